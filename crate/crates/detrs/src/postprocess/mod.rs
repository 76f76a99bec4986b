//! Detection assembly (decode, per-class NMS, top-k), the simplified AP
//! evaluator, the latency benchmark harness, and Pareto reporting.

pub mod ap;
pub mod bench;
pub mod pareto;

use ndarray::Array2;

use crate::geometry::{decode_boxes, iou_pair, BoxSet};
use crate::tensor::kernels::sigmoid;

/// Assembly thresholds; the defaults follow the common evaluation protocol.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AssembleParams {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_detections: usize,
}

impl Default for AssembleParams {
    fn default() -> Self {
        AssembleParams {
            score_thresh: 0.05,
            nms_thresh: 0.5,
            max_detections: 100,
        }
    }
}

/// Final detector output for one image: scores sorted descending, within
/// one class every kept pair has IoU below the NMS threshold.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DetectionResult {
    /// Rows `(ymin, xmin, ymax, xmax)`.
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
    pub class_ids: Vec<usize>,
}

impl DetectionResult {
    pub fn empty() -> Self {
        DetectionResult {
            boxes: vec![],
            scores: vec![],
            class_ids: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Greedy highest-score-first suppression. Returns kept indices in
/// suppression order; ties in score break toward the lower index. A box is
/// suppressed when its IoU with any kept box reaches `iou_threshold`.
pub fn nms(boxes: &BoxSet, scores: &[f64], iou_threshold: f64, max_out: usize) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: |scores| must equal |boxes|");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        if keep.len() >= max_out {
            break;
        }
        let bi = boxes.get(i);
        let suppressed = keep.iter().any(|&k| iou_pair(&boxes.get(k), &bi) >= iou_threshold);
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

/// Decode, clip, filter, run per-class NMS and keep the global top
/// detections, given a per-roi score matrix `(R, K)` in [0, 1].
pub fn assemble_scores(
    decoded: &BoxSet,
    scores: &Array2<f64>,
    image_size: (usize, usize),
    params: &AssembleParams,
) -> DetectionResult {
    let clipped = decoded.clip(image_size.0 as f64, image_size.1 as f64);
    let k = scores.ncols();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new(); // (score, class, row)
    for class in 0..k {
        let mut rows: Vec<usize> = (0..clipped.len())
            .filter(|&r| scores[(r, class)] >= params.score_thresh)
            .collect();
        if rows.is_empty() {
            continue;
        }
        rows.sort_by(|&a, &b| {
            scores[(b, class)]
                .partial_cmp(&scores[(a, class)])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let class_boxes =
            BoxSet::from_rows(&rows.iter().map(|&r| clipped.get(r)).collect::<Vec<_>>())
                .expect("clipped boxes valid");
        let class_scores: Vec<f64> = rows.iter().map(|&r| scores[(r, class)]).collect();
        for ki in nms(&class_boxes, &class_scores, params.nms_thresh, params.max_detections) {
            candidates.push((class_scores[ki], class, rows[ki]));
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    candidates.truncate(params.max_detections);
    DetectionResult {
        boxes: candidates.iter().map(|&(_, _, r)| clipped.get(r)).collect(),
        scores: candidates.iter().map(|&(s, _, _)| s).collect(),
        class_ids: candidates.iter().map(|&(_, c, _)| c).collect(),
    }
}

/// Assemble one-stage outputs: sigmoid class logits `(A, K)` and deltas
/// `(A, 4)` against the anchor set.
pub fn assemble_one_stage(
    cls_logits: &Array2<f64>,
    deltas: &Array2<f64>,
    anchors: &BoxSet,
    image_size: (usize, usize),
    params: &AssembleParams,
) -> DetectionResult {
    assert_eq!(cls_logits.nrows(), anchors.len());
    assert_eq!(deltas.nrows(), anchors.len());
    let decoded = decode_boxes(deltas, anchors);
    let scores = cls_logits.mapv(sigmoid);
    assemble_scores(&decoded, &scores, image_size, params)
}

/// Assemble two-stage outputs: softmax logits `(R, K+1)` with background
/// last and class-agnostic deltas `(R, 4)` against the proposals.
pub fn assemble_two_stage(
    logits: &Array2<f64>,
    deltas: &Array2<f64>,
    proposals: &BoxSet,
    image_size: (usize, usize),
    params: &AssembleParams,
) -> DetectionResult {
    assert_eq!(logits.nrows(), proposals.len());
    let k = logits.ncols() - 1;
    let decoded = decode_boxes(deltas, proposals);
    let mut probs = Array2::<f64>::zeros((logits.nrows(), k));
    for r in 0..logits.nrows() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        for c in 0..k {
            probs[(r, c)] = (row[c] - m).exp() / z;
        }
    }
    assemble_scores(&decoded, &probs, image_size, params)
}
