//! Box algebra shared by both detector families: IoU, anchor generation,
//! box coding, and anchor-to-ground-truth matching.
//!
//! Boxes are axis-aligned in pixel units, stored row-wise as
//! `(ymin, xmin, ymax, xmax)`.

use ndarray::{Array2, ArrayView1};

use crate::error::{DetError, Result};
use crate::par;

/// Lowest and highest pyramid levels used by the detectors.
pub const MIN_LEVEL: u32 = 3;
pub const MAX_LEVEL: u32 = 7;

/// A batch of axis-aligned boxes, rows `(ymin, xmin, ymax, xmax)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    coords: Array2<f64>,
}

impl BoxSet {
    /// Validates the box invariants: finite coordinates, `ymax >= ymin`,
    /// `xmax >= xmin`.
    pub fn new(coords: Array2<f64>) -> Result<Self> {
        if coords.ncols() != 4 {
            return Err(DetError::Shape(format!(
                "boxes must have 4 columns, got {}",
                coords.ncols()
            )));
        }
        for (i, row) in coords.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(DetError::Data(format!("box {i} has non-finite coordinates")));
            }
            if row[2] < row[0] || row[3] < row[1] {
                return Err(DetError::Data(format!(
                    "box {i} is inverted: ({}, {}, {}, {})",
                    row[0], row[1], row[2], row[3]
                )));
            }
        }
        Ok(BoxSet { coords })
    }

    pub fn from_rows(rows: &[[f64; 4]]) -> Result<Self> {
        let mut coords = Array2::zeros((rows.len(), 4));
        for (i, r) in rows.iter().enumerate() {
            for j in 0..4 {
                coords[(i, j)] = r[j];
            }
        }
        Self::new(coords)
    }

    pub fn empty() -> Self {
        BoxSet {
            coords: Array2::zeros((0, 4)),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.coords.row(i)
    }

    pub fn get(&self, i: usize) -> [f64; 4] {
        let r = self.coords.row(i);
        [r[0], r[1], r[2], r[3]]
    }

    pub fn to_rows(&self) -> Vec<[f64; 4]> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn area(&self, i: usize) -> f64 {
        let r = self.coords.row(i);
        (r[2] - r[0]) * (r[3] - r[1])
    }

    /// Clip every box to `[0, h] x [0, w]`.
    pub fn clip(&self, h: f64, w: f64) -> BoxSet {
        let mut c = self.coords.clone();
        for mut row in c.rows_mut() {
            row[0] = row[0].clamp(0.0, h);
            row[1] = row[1].clamp(0.0, w);
            row[2] = row[2].clamp(0.0, h);
            row[3] = row[3].clamp(0.0, w);
        }
        BoxSet { coords: c }
    }

    /// Concatenate in order.
    pub fn concat(sets: &[&BoxSet]) -> BoxSet {
        let total: usize = sets.iter().map(|s| s.len()).sum();
        let mut coords = Array2::zeros((total, 4));
        let mut at = 0;
        for s in sets {
            coords
                .slice_mut(ndarray::s![at..at + s.len(), ..])
                .assign(&s.coords);
            at += s.len();
        }
        BoxSet { coords }
    }
}

/// IoU of two boxes given as `(ymin, xmin, ymax, xmax)` slices. Zero-area
/// boxes contribute 0 against anything.
pub fn iou_pair(a: &[f64], b: &[f64]) -> f64 {
    let iy = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ix = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iy * ix;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Pairwise IoU matrix, `|a| x |b|`.
pub fn iou_matrix(a: &BoxSet, b: &BoxSet) -> Array2<f64> {
    let rows = par::map_collect(a.len(), |i| {
        let ra = a.get(i);
        (0..b.len())
            .map(|j| iou_pair(&ra, &b.get(j)))
            .collect::<Vec<_>>()
    });
    let mut m = Array2::zeros((a.len(), b.len()));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

/// Anchors for one pyramid level.
#[derive(Debug, Clone)]
pub struct AnchorLevel {
    pub level: u32,
    pub stride: usize,
    /// Grid height/width in cells.
    pub grid: (usize, usize),
    /// Boxes in `(y, x, ratio)` order: ratio varies fastest, matching the
    /// flattened prediction layout of the heads.
    pub boxes: BoxSet,
}

/// Anchors for levels 3..=7 over a fixed input size.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub image_size: (usize, usize),
    pub base_scale: f64,
    pub aspect_ratios: Vec<f64>,
    pub levels: Vec<AnchorLevel>,
}

impl AnchorGrid {
    pub fn anchors_per_location(&self) -> usize {
        self.aspect_ratios.len()
    }

    pub fn total_anchors(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    /// All anchors concatenated in level order (level 3 first).
    pub fn all_boxes(&self) -> BoxSet {
        let refs: Vec<&BoxSet> = self.levels.iter().map(|l| &l.boxes).collect();
        BoxSet::concat(&refs)
    }
}

/// Tile anchors over the stride grid of every pyramid level.
///
/// Each location carries one anchor per aspect ratio `r = h/w`, with edge
/// `base_scale * 2^level` and `h = edge * sqrt(r)`, `w = edge / sqrt(r)`, so
/// area is preserved across ratios. The input size must be divisible by the
/// coarsest stride, `2^MAX_LEVEL`.
pub fn generate_anchors(
    image_size: (usize, usize),
    base_scale: f64,
    aspect_ratios: &[f64],
) -> Result<AnchorGrid> {
    let (h, w) = image_size;
    let coarsest = 1usize << MAX_LEVEL;
    if h == 0 || w == 0 || h % coarsest != 0 || w % coarsest != 0 {
        return Err(DetError::Shape(format!(
            "image size {h}x{w} must be divisible by {coarsest}"
        )));
    }
    if aspect_ratios.is_empty() {
        return Err(DetError::Shape("aspect ratio list is empty".into()));
    }
    let mut levels = Vec::new();
    for level in MIN_LEVEL..=MAX_LEVEL {
        let stride = 1usize << level;
        let gh = h / stride;
        let gw = w / stride;
        let edge = base_scale * stride as f64;
        let mut coords = Array2::zeros((gh * gw * aspect_ratios.len(), 4));
        let mut row = 0;
        for gy in 0..gh {
            let cy = (gy as f64 + 0.5) * stride as f64;
            for gx in 0..gw {
                let cx = (gx as f64 + 0.5) * stride as f64;
                for &r in aspect_ratios {
                    let ah = edge * r.sqrt();
                    let aw = edge / r.sqrt();
                    coords[(row, 0)] = cy - ah / 2.0;
                    coords[(row, 1)] = cx - aw / 2.0;
                    coords[(row, 2)] = cy + ah / 2.0;
                    coords[(row, 3)] = cx + aw / 2.0;
                    row += 1;
                }
            }
        }
        levels.push(AnchorLevel {
            level,
            stride,
            grid: (gh, gw),
            boxes: BoxSet { coords },
        });
    }
    Ok(AnchorGrid {
        image_size,
        base_scale,
        aspect_ratios: aspect_ratios.to_vec(),
        levels,
    })
}

/// Box regression coding: center offsets normalized by anchor size, log
/// size ratios, no variance scaling.
pub fn encode_boxes(boxes: &BoxSet, anchors: &BoxSet) -> Array2<f64> {
    assert_eq!(boxes.len(), anchors.len(), "encode_boxes: cardinality mismatch");
    let mut deltas = Array2::zeros((boxes.len(), 4));
    for i in 0..boxes.len() {
        let b = boxes.get(i);
        let a = anchors.get(i);
        let (ah, aw) = (a[2] - a[0], a[3] - a[1]);
        debug_assert!(ah > 0.0 && aw > 0.0, "anchor {i} has non-positive size");
        let (bh, bw) = (b[2] - b[0], b[3] - b[1]);
        let (acy, acx) = ((a[0] + a[2]) / 2.0, (a[1] + a[3]) / 2.0);
        let (bcy, bcx) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
        deltas[(i, 0)] = (bcy - acy) / ah;
        deltas[(i, 1)] = (bcx - acx) / aw;
        deltas[(i, 2)] = (bh / ah).ln();
        deltas[(i, 3)] = (bw / aw).ln();
    }
    deltas
}

/// Inverse of [`encode_boxes`].
pub fn decode_boxes(deltas: &Array2<f64>, anchors: &BoxSet) -> BoxSet {
    assert_eq!(deltas.nrows(), anchors.len(), "decode_boxes: cardinality mismatch");
    let mut coords = Array2::zeros((deltas.nrows(), 4));
    for i in 0..deltas.nrows() {
        let a = anchors.get(i);
        let (ah, aw) = (a[2] - a[0], a[3] - a[1]);
        let (acy, acx) = ((a[0] + a[2]) / 2.0, (a[1] + a[3]) / 2.0);
        let cy = deltas[(i, 0)] * ah + acy;
        let cx = deltas[(i, 1)] * aw + acx;
        let h = deltas[(i, 2)].exp() * ah;
        let w = deltas[(i, 3)].exp() * aw;
        coords[(i, 0)] = cy - h / 2.0;
        coords[(i, 1)] = cx - w / 2.0;
        coords[(i, 2)] = cy + h / 2.0;
        coords[(i, 3)] = cx + w / 2.0;
    }
    BoxSet { coords }
}

/// Per-anchor assignment produced by [`match_targets`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// Matched to the ground-truth box with this index.
    Positive(usize),
    /// IoU between the thresholds: excluded from the loss.
    Ignore,
    Negative,
}

#[derive(Debug, Clone)]
pub struct MatchResult {
    pub assignments: Vec<Assignment>,
    /// Max IoU against any ground-truth box (0 when there is none).
    pub ious: Vec<f64>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.assignments
            .iter()
            .filter(|a| matches!(a, Assignment::Positive(_)))
            .count()
    }
}

/// Threshold matching: anchors with max IoU `>= pos_thresh` are positive
/// (ties broken by the lowest ground-truth index), `< neg_thresh` negative,
/// in between ignored. An empty ground-truth set makes everything negative.
pub fn match_targets(
    anchors: &BoxSet,
    gt: &BoxSet,
    pos_thresh: f64,
    neg_thresh: f64,
) -> MatchResult {
    assert!(
        pos_thresh >= neg_thresh,
        "pos_thresh {pos_thresh} must be >= neg_thresh {neg_thresh}"
    );
    if gt.is_empty() {
        return MatchResult {
            assignments: vec![Assignment::Negative; anchors.len()],
            ious: vec![0.0; anchors.len()],
        };
    }
    let results = par::map_collect(anchors.len(), |i| {
        let a = anchors.get(i);
        let mut best = 0.0;
        let mut best_j = 0;
        for j in 0..gt.len() {
            let v = iou_pair(&a, &gt.get(j));
            if v > best {
                best = v;
                best_j = j;
            }
        }
        let assign = if best >= pos_thresh {
            Assignment::Positive(best_j)
        } else if best < neg_thresh {
            Assignment::Negative
        } else {
            Assignment::Ignore
        };
        (assign, best)
    });
    let (assignments, ious) = results.into_iter().unzip();
    MatchResult { assignments, ious }
}
