//! Simplified 101-point interpolated average precision over IoU thresholds
//! 0.5:0.05:0.95 with the standard small/medium/large area buckets.

use crate::geometry::{iou_pair, BoxSet};
use crate::par;

use super::DetectionResult;

/// Ground truth for one image.
#[derive(Debug, Clone)]
pub struct ImageGroundTruth {
    pub boxes: BoxSet,
    pub class_ids: Vec<usize>,
}

/// Evaluation result; metrics are absent when the dataset contains no
/// ground truth in the corresponding area bucket.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ApResult {
    pub ap: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const RECALL_POINTS: usize = 101;

const AREA_ALL: (f64, f64) = (0.0, f64::INFINITY);
const AREA_SMALL: (f64, f64) = (0.0, 32.0 * 32.0);
const AREA_MEDIUM: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);
const AREA_LARGE: (f64, f64) = (96.0 * 96.0, f64::INFINITY);

fn box_area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// Evaluate detections against ground truth. Both slices are per image and
/// must be the same length.
pub fn coco_ap(
    detections: &[DetectionResult],
    gts: &[ImageGroundTruth],
    num_classes: usize,
) -> ApResult {
    assert_eq!(detections.len(), gts.len(), "per-image lists must align");
    ApResult {
        ap: ap_for_range(detections, gts, num_classes, AREA_ALL),
        ap_small: ap_for_range(detections, gts, num_classes, AREA_SMALL),
        ap_medium: ap_for_range(detections, gts, num_classes, AREA_MEDIUM),
        ap_large: ap_for_range(detections, gts, num_classes, AREA_LARGE),
    }
}

/// Mean over classes (with ground truth in range) of the per-class AP.
fn ap_for_range(
    detections: &[DetectionResult],
    gts: &[ImageGroundTruth],
    num_classes: usize,
    range: (f64, f64),
) -> Option<f64> {
    let per_class = par::map_collect(num_classes, |class| {
        class_ap(detections, gts, class, range)
    });
    let present: Vec<f64> = per_class.into_iter().flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

struct ImageEval {
    /// Per threshold, per detection: matched-and-counted (true positive).
    tp: Vec<Vec<bool>>,
    /// Per threshold, per detection: excluded from scoring.
    ignore: Vec<Vec<bool>>,
    scores: Vec<f64>,
}

fn class_ap(
    detections: &[DetectionResult],
    gts: &[ImageGroundTruth],
    class: usize,
    range: (f64, f64),
) -> Option<f64> {
    let t_count = IOU_THRESHOLDS.len();
    let mut evals: Vec<ImageEval> = Vec::with_capacity(detections.len());
    let mut npig = 0usize;
    for (det, gt) in detections.iter().zip(gts) {
        // class subsets, detections sorted by score descending
        let mut d_idx: Vec<usize> = (0..det.len()).filter(|&i| det.class_ids[i] == class).collect();
        d_idx.sort_by(|&a, &b| {
            det.scores[b]
                .partial_cmp(&det.scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let g_idx: Vec<usize> = (0..gt.boxes.len())
            .filter(|&i| gt.class_ids[i] == class)
            .collect();
        let g_ignore: Vec<bool> = g_idx
            .iter()
            .map(|&g| {
                let a = gt.boxes.area(g);
                a < range.0 || a >= range.1
            })
            .collect();
        npig += g_ignore.iter().filter(|x| !**x).count();

        // gt visit order: non-ignored first, stable within groups
        let mut g_order: Vec<usize> = (0..g_idx.len()).collect();
        g_order.sort_by_key(|&k| g_ignore[k]);

        let mut tp = vec![vec![false; d_idx.len()]; t_count];
        let mut ignore = vec![vec![false; d_idx.len()]; t_count];
        for (ti, &thr) in IOU_THRESHOLDS.iter().enumerate() {
            let mut g_used = vec![false; g_idx.len()];
            for (di, &d) in d_idx.iter().enumerate() {
                let db = det.boxes[d];
                let mut best = thr.min(1.0 - 1e-10);
                let mut matched: Option<usize> = None;
                for &gk in &g_order {
                    if g_used[gk] {
                        continue;
                    }
                    // once matched to a real gt, never trade down to an
                    // ignored one
                    if let Some(m) = matched {
                        if !g_ignore[m] && g_ignore[gk] {
                            break;
                        }
                    }
                    let iou = iou_pair(&db, &gt.boxes.get(g_idx[gk]));
                    if iou < best {
                        continue;
                    }
                    best = iou;
                    matched = Some(gk);
                }
                match matched {
                    Some(gk) => {
                        g_used[gk] = true;
                        if g_ignore[gk] {
                            ignore[ti][di] = true;
                        } else {
                            tp[ti][di] = true;
                        }
                    }
                    None => {
                        let a = box_area(&db);
                        if a < range.0 || a >= range.1 {
                            ignore[ti][di] = true;
                        }
                    }
                }
            }
        }
        evals.push(ImageEval {
            tp,
            ignore,
            scores: d_idx.iter().map(|&d| det.scores[d]).collect(),
        });
    }
    if npig == 0 {
        return None;
    }

    // global score ordering across images (stable: image order on ties)
    let mut flat: Vec<(f64, usize, usize)> = Vec::new(); // (score, image, det)
    for (ii, e) in evals.iter().enumerate() {
        for (di, &s) in e.scores.iter().enumerate() {
            flat.push((s, ii, di));
        }
    }
    flat.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut ap_sum = 0.0;
    for ti in 0..t_count {
        let mut tp_run = 0usize;
        let mut fp_run = 0usize;
        let mut precisions = Vec::with_capacity(flat.len());
        let mut recalls = Vec::with_capacity(flat.len());
        for &(_, ii, di) in &flat {
            if evals[ii].ignore[ti][di] {
                continue;
            }
            if evals[ii].tp[ti][di] {
                tp_run += 1;
            } else {
                fp_run += 1;
            }
            precisions.push(tp_run as f64 / (tp_run + fp_run) as f64);
            recalls.push(tp_run as f64 / npig as f64);
        }
        // monotone precision envelope
        for i in (1..precisions.len()).rev() {
            if precisions[i - 1] < precisions[i] {
                precisions[i - 1] = precisions[i];
            }
        }
        let mut q_sum = 0.0;
        for r in 0..RECALL_POINTS {
            let thr = r as f64 / (RECALL_POINTS - 1) as f64;
            // first index with recall >= thr
            let idx = recalls.partition_point(|&rc| rc < thr);
            if idx < precisions.len() {
                q_sum += precisions[idx];
            }
        }
        ap_sum += q_sum / RECALL_POINTS as f64;
    }
    Some(ap_sum / t_count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt_one(b: [f64; 4]) -> ImageGroundTruth {
        ImageGroundTruth {
            boxes: BoxSet::from_rows(&[b]).unwrap(),
            class_ids: vec![0],
        }
    }

    fn det(items: &[([f64; 4], f64, usize)]) -> DetectionResult {
        DetectionResult {
            boxes: items.iter().map(|x| x.0).collect(),
            scores: items.iter().map(|x| x.1).collect(),
            class_ids: items.iter().map(|x| x.2).collect(),
        }
    }

    #[test]
    fn perfect_predictions_give_ap_one() {
        let g = [10.0, 10.0, 50.0, 50.0];
        let gts = vec![gt_one(g), gt_one(g)];
        let dets = vec![det(&[(g, 1.0, 0)]), det(&[(g, 1.0, 0)])];
        let r = coco_ap(&dets, &gts, 1);
        assert_eq!(r.ap, Some(1.0));
        // 40x40 ground truth is medium-sized
        assert_eq!(r.ap_medium, Some(1.0));
        assert_eq!(r.ap_small, None);
        assert_eq!(r.ap_large, None);
    }

    #[test]
    fn no_predictions_give_ap_zero() {
        let gts = vec![gt_one([0.0, 0.0, 40.0, 40.0])];
        let dets = vec![DetectionResult::empty()];
        let r = coco_ap(&dets, &gts, 1);
        assert_eq!(r.ap, Some(0.0));
    }

    #[test]
    fn empty_ground_truth_reports_absent_not_zero() {
        let gts = vec![ImageGroundTruth { boxes: BoxSet::empty(), class_ids: vec![] }];
        let dets = vec![det(&[([0.0, 0.0, 10.0, 10.0], 0.9, 0)])];
        let r = coco_ap(&dets, &gts, 1);
        assert_eq!(r.ap, None);
    }

    #[test]
    fn three_image_toy_matches_hand_computed_integral() {
        // three ground truths, three perfect detections, one false positive
        // ranked second by score
        let g0 = [0.0, 0.0, 40.0, 40.0];
        let g1 = [10.0, 10.0, 50.0, 50.0];
        let g2 = [20.0, 20.0, 60.0, 60.0];
        let far = [200.0, 200.0, 240.0, 240.0];
        let gts = vec![gt_one(g0), gt_one(g1), gt_one(g2)];
        let dets = vec![
            det(&[(g0, 0.9, 0)]),
            det(&[(g1, 0.8, 0)]),
            det(&[(far, 0.85, 0), (g2, 0.7, 0)]),
        ];
        let r = coco_ap(&dets, &gts, 1).ap.unwrap();
        // ranks: TP(0.9), FP(0.85), TP(0.8), TP(0.7)
        // envelope precisions [1, .75, .75, .75] at recalls [1/3,1/3,2/3,1]
        // 101-point integral: (34*1 + 67*0.75) / 101
        let expect = (34.0 + 67.0 * 0.75) / 101.0;
        assert!((r - expect).abs() < 1e-9, "{r} vs {expect}");
    }

    #[test]
    fn invariant_to_image_order_and_det_reordering() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mk_box = |rng: &mut rand_chacha::ChaCha8Rng| {
            let y = rng.gen_range(0.0..100.0);
            let x = rng.gen_range(0.0..100.0);
            [y, x, y + rng.gen_range(10.0..60.0), x + rng.gen_range(10.0..60.0)]
        };
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..4 {
            let n = rng.gen_range(1..4);
            let rows: Vec<[f64; 4]> = (0..n).map(|_| mk_box(&mut rng)).collect();
            let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            gts.push(ImageGroundTruth {
                boxes: BoxSet::from_rows(&rows).unwrap(),
                class_ids: classes,
            });
            let m = rng.gen_range(1..5);
            let items: Vec<([f64; 4], f64, usize)> = (0..m)
                .map(|_| (mk_box(&mut rng), rng.gen::<f64>(), rng.gen_range(0..2)))
                .collect();
            dets.push(det(&items));
        }
        let base = coco_ap(&dets, &gts, 2).ap.unwrap();

        // permute images
        let perm = [2usize, 0, 3, 1];
        let gts_p: Vec<_> = perm.iter().map(|&i| gts[i].clone()).collect();
        let dets_p: Vec<_> = perm.iter().map(|&i| dets[i].clone()).collect();
        assert!((coco_ap(&dets_p, &gts_p, 2).ap.unwrap() - base).abs() < 1e-12);

        // reorder detections within an image (scores preserved)
        let mut dets_r = dets.clone();
        dets_r[0].boxes.reverse();
        dets_r[0].scores.reverse();
        dets_r[0].class_ids.reverse();
        assert!((coco_ap(&dets_r, &gts, 2).ap.unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detections_count_as_false_positives() {
        let g = [0.0, 0.0, 40.0, 40.0];
        let gts = vec![gt_one(g)];
        // same box three times: one TP + two FPs
        let dets = vec![det(&[(g, 0.9, 0), (g, 0.8, 0), (g, 0.7, 0)])];
        let r = coco_ap(&dets, &gts, 1).ap.unwrap();
        // precision envelope [1,...]: AP = 1.0 (recall hits 1 at rank 1)
        assert_eq!(r, 1.0);
        // now put the duplicates in front
        let dets = vec![det(&[(g, 0.9, 0), ([100.0, 100.0, 140.0, 140.0], 0.95, 0)])];
        let r = coco_ap(&dets, &gts, 1).ap.unwrap();
        // FP first: precisions [0, 1/2] -> envelope [1/2, 1/2]
        let expect = 0.5;
        assert!((r - expect).abs() < 1e-9);
    }
}
