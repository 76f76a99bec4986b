//! Training objectives with analytic gradients: focal classification loss,
//! Huber box regression, proposal losses, cascaded stage losses, and the
//! per-pixel mask loss. [`gradcheck`] provides the finite-difference harness
//! every loss is verified against.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{DetError, Result};
use crate::geometry::{Assignment, MatchResult};
use crate::tensor::tape::{Backward, Tape, TensorId};

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        0.0
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Focal loss parameters; the defaults match the detector recipe.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 1.5 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(DetError::config("focal.alpha", "alpha must be in (0, 1)"));
        }
        if self.gamma < 0.0 {
            return Err(DetError::config("focal.gamma", "gamma must be non-negative"));
        }
        Ok(())
    }
}

/// Per-element focal term and its input gradient for a binary target.
fn focal_term(x: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let (u, log_u, alpha_t, sign) = if t > 0.5 {
        (p, -softplus(-x), alpha, 1.0)
    } else {
        (1.0 - p, -softplus(x), 1.0 - alpha, -1.0)
    };
    let one_minus_u = 1.0 - u;
    let loss = -alpha_t * one_minus_u.powf(gamma) * log_u;
    // d/dx [-a (1-u)^g ln u] with du/dx = sign * u (1-u)
    let grad = sign * alpha_t * one_minus_u.powf(gamma) * (gamma * u * log_u - one_minus_u);
    (loss, grad)
}

struct FocalLossBw {
    targets: Array2<f64>,
    anchor_mask: Array1<f64>,
    params: FocalParams,
    normalizer: f64,
}

impl Backward for FocalLossBw {
    fn backward(&self, grad: &ArrayD<f64>, inputs: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let g = *grad.first().unwrap();
        let logits = inputs[0];
        let mut gx = ArrayD::<f64>::zeros(logits.raw_dim());
        let (a, k) = (self.targets.nrows(), self.targets.ncols());
        for i in 0..a {
            let w = self.anchor_mask[i];
            if w == 0.0 {
                continue;
            }
            for j in 0..k {
                let (_, d) = focal_term(
                    logits[[i, j]],
                    self.targets[(i, j)],
                    self.params.alpha,
                    self.params.gamma,
                );
                gx[[i, j]] = g * w * d / self.normalizer;
            }
        }
        vec![gx]
    }
}

/// Focal classification loss over flattened anchor logits `(A, K)`.
///
/// `targets` holds per anchor-class binary labels; `anchor_mask` is 1 for
/// anchors that participate (positives and negatives) and 0 for ignored
/// ones. The sum is normalized by the positive-anchor count, clamped to at
/// least 1 so a batch without positives stays finite.
pub fn focal_loss(
    tape: &mut Tape,
    logits: TensorId,
    targets: &Array2<f64>,
    anchor_mask: &Array1<f64>,
    num_positives: usize,
    params: FocalParams,
) -> TensorId {
    let shape = tape.value(logits).shape().to_vec();
    assert_eq!(shape, &[targets.nrows(), targets.ncols()]);
    assert_eq!(anchor_mask.len(), targets.nrows());
    let normalizer = (num_positives as f64).max(1.0);
    let lv = tape.value(logits);
    let mut total = 0.0;
    for i in 0..targets.nrows() {
        let w = anchor_mask[i];
        if w == 0.0 {
            continue;
        }
        for j in 0..targets.ncols() {
            let (l, _) = focal_term(lv[[i, j]], targets[(i, j)], params.alpha, params.gamma);
            total += w * l;
        }
    }
    let value = ArrayD::from_elem(IxDyn(&[]), total / normalizer);
    tape.op(
        "focal_loss",
        value,
        vec![logits],
        Box::new(FocalLossBw {
            targets: targets.clone(),
            anchor_mask: anchor_mask.clone(),
            params,
            normalizer,
        }),
    )
}

fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() <= delta {
        (0.5 * r * r, r)
    } else {
        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
    }
}

struct HuberBw {
    target: Array2<f64>,
    row_weights: Array1<f64>,
    normalizer: f64,
    delta: f64,
}

impl Backward for HuberBw {
    fn backward(&self, grad: &ArrayD<f64>, inputs: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let g = *grad.first().unwrap();
        let pred = inputs[0];
        let mut gx = ArrayD::<f64>::zeros(pred.raw_dim());
        for i in 0..self.target.nrows() {
            let w = self.row_weights[i];
            if w == 0.0 {
                continue;
            }
            for j in 0..self.target.ncols() {
                let (_, d) = huber(pred[[i, j]] - self.target[(i, j)], self.delta);
                gx[[i, j]] = g * w * d / self.normalizer;
            }
        }
        vec![gx]
    }
}

/// Huber regression loss on encoded deltas `(A, 4)`, delta 1.0, summed over
/// coordinates and averaged over rows with nonzero weight (positives).
/// No positives yields exactly 0.
pub fn box_loss(
    tape: &mut Tape,
    pred: TensorId,
    target: &Array2<f64>,
    positive_mask: &Array1<f64>,
) -> TensorId {
    weighted_huber(tape, pred, target, positive_mask, 1.0)
}

fn weighted_huber(
    tape: &mut Tape,
    pred: TensorId,
    target: &Array2<f64>,
    row_weights: &Array1<f64>,
    delta: f64,
) -> TensorId {
    let shape = tape.value(pred).shape().to_vec();
    assert_eq!(shape, &[target.nrows(), target.ncols()]);
    let positives = row_weights.iter().filter(|w| **w != 0.0).count();
    let normalizer = (positives as f64).max(1.0);
    let pv = tape.value(pred);
    let mut total = 0.0;
    for i in 0..target.nrows() {
        let w = row_weights[i];
        if w == 0.0 {
            continue;
        }
        for j in 0..target.ncols() {
            let (l, _) = huber(pv[[i, j]] - target[(i, j)], delta);
            total += w * l;
        }
    }
    let value = ArrayD::from_elem(IxDyn(&[]), total / normalizer);
    tape.op(
        "huber_loss",
        value,
        vec![pred],
        Box::new(HuberBw {
            target: target.clone(),
            row_weights: row_weights.clone(),
            normalizer,
            delta,
        }),
    )
}

struct BceBw {
    targets: ArrayD<f64>,
    weights: ArrayD<f64>,
    normalizer: f64,
}

impl Backward for BceBw {
    fn backward(&self, grad: &ArrayD<f64>, inputs: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let g = *grad.first().unwrap();
        let logits = inputs[0];
        let mut gx = ArrayD::<f64>::zeros(logits.raw_dim());
        for (i, ((x, t), w)) in logits
            .iter()
            .zip(self.targets.iter())
            .zip(self.weights.iter())
            .enumerate()
        {
            if *w == 0.0 {
                continue;
            }
            gx.as_slice_mut().unwrap()[i] = g * w * (sigmoid(*x) - t) / self.normalizer;
        }
        vec![gx]
    }
}

/// Binary cross entropy with logits; elementwise weights, explicit
/// normalizer.
pub fn bce_loss(
    tape: &mut Tape,
    logits: TensorId,
    targets: &ArrayD<f64>,
    weights: &ArrayD<f64>,
    normalizer: f64,
) -> TensorId {
    let lv = tape.value(logits);
    assert_eq!(lv.shape(), targets.shape());
    assert_eq!(lv.shape(), weights.shape());
    let mut total = 0.0;
    for ((x, t), w) in lv.iter().zip(targets.iter()).zip(weights.iter()) {
        if *w == 0.0 {
            continue;
        }
        total += w * (softplus(*x) - t * x);
    }
    let value = ArrayD::from_elem(IxDyn(&[]), total / normalizer);
    tape.op(
        "bce_loss",
        value,
        vec![logits],
        Box::new(BceBw {
            targets: targets.clone(),
            weights: weights.clone(),
            normalizer,
        }),
    )
}

struct SoftmaxCeBw {
    classes: Vec<usize>,
    normalizer: f64,
}

impl Backward for SoftmaxCeBw {
    fn backward(&self, grad: &ArrayD<f64>, inputs: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let g = *grad.first().unwrap();
        let logits = inputs[0];
        let k = logits.shape()[1];
        let mut gx = ArrayD::<f64>::zeros(logits.raw_dim());
        for (i, &c) in self.classes.iter().enumerate() {
            let row = logits.index_axis(Axis(0), i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for j in 0..k {
                let p = (row[j] - m).exp() / z;
                let onehot = if j == c { 1.0 } else { 0.0 };
                gx[[i, j]] = g * (p - onehot) / self.normalizer;
            }
        }
        vec![gx]
    }
}

/// Mean softmax cross entropy over rows of `(R, K)` logits.
pub fn softmax_ce_loss(tape: &mut Tape, logits: TensorId, classes: &[usize]) -> TensorId {
    let lv = tape.value(logits);
    assert_eq!(lv.shape()[0], classes.len());
    let normalizer = (classes.len() as f64).max(1.0);
    let mut total = 0.0;
    for (i, &c) in classes.iter().enumerate() {
        let row = lv.index_axis(Axis(0), i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        total += z.ln() + m - row[c];
    }
    let value = ArrayD::from_elem(IxDyn(&[]), total / normalizer);
    tape.op(
        "softmax_ce_loss",
        value,
        vec![logits],
        Box::new(SoftmaxCeBw {
            classes: classes.to_vec(),
            normalizer,
        }),
    )
}

/// Proposal-head anchor sample: 256 anchors per image with at most half
/// positives, drawn seeded from the match result.
pub const RPN_SAMPLE_SIZE: usize = 256;
pub const RPN_MAX_POS_FRACTION: f64 = 0.5;

pub struct RpnSample {
    pub indices: Vec<usize>,
    pub labels: Vec<f64>,
    /// Indices (into `indices`) of the positive entries.
    pub positive: Vec<usize>,
}

/// Draw the proposal-loss minibatch. Errors when the match result contains
/// neither positives nor negatives.
pub fn sample_rpn_anchors(m: &MatchResult, rng: &mut ChaCha8Rng) -> Result<RpnSample> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, a) in m.assignments.iter().enumerate() {
        match a {
            Assignment::Positive(_) => pos.push(i),
            Assignment::Negative => neg.push(i),
            Assignment::Ignore => {}
        }
    }
    if pos.is_empty() && neg.is_empty() {
        return Err(DetError::Data(
            "proposal sample rejected: every anchor is ignored".into(),
        ));
    }
    let max_pos = (RPN_SAMPLE_SIZE as f64 * RPN_MAX_POS_FRACTION) as usize;
    pos.shuffle(rng);
    pos.truncate(max_pos);
    let need_neg = RPN_SAMPLE_SIZE.saturating_sub(pos.len()).min(neg.len());
    neg.shuffle(rng);
    neg.truncate(need_neg);
    let mut indices = pos.clone();
    indices.extend_from_slice(&neg);
    let labels: Vec<f64> = indices
        .iter()
        .map(|i| match m.assignments[*i] {
            Assignment::Positive(_) => 1.0,
            _ => 0.0,
        })
        .collect();
    let positive = (0..pos.len()).collect();
    Ok(RpnSample { indices, labels, positive })
}

/// Proposal losses: BCE on the sampled objectness logits plus Huber on the
/// positive deltas. Returns `(objectness_loss, box_loss)`.
pub fn rpn_loss(
    tape: &mut Tape,
    objectness: TensorId,
    deltas: TensorId,
    m: &MatchResult,
    delta_targets: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(TensorId, TensorId)> {
    let sample = sample_rpn_anchors(m, rng)?;
    let obj_rows = tape.gather_rows(objectness, &sample.indices);
    let n = sample.indices.len();
    let targets = ArrayD::from_shape_vec(IxDyn(&[n, 1]), sample.labels.clone()).unwrap();
    let weights = ArrayD::from_elem(IxDyn(&[n, 1]), 1.0);
    let obj_loss = bce_loss(tape, obj_rows, &targets, &weights, n as f64);

    let pos_anchor_indices: Vec<usize> = sample.positive.iter().map(|k| sample.indices[*k]).collect();
    let box_l = if pos_anchor_indices.is_empty() {
        tape.constant(ArrayD::from_elem(IxDyn(&[]), 0.0))
    } else {
        let pred = tape.gather_rows(deltas, &pos_anchor_indices);
        let mut tgt = Array2::zeros((pos_anchor_indices.len(), 4));
        for (k, &ai) in pos_anchor_indices.iter().enumerate() {
            tgt.row_mut(k).assign(&delta_targets.row(ai));
        }
        let mask = Array1::from_elem(pos_anchor_indices.len(), 1.0);
        box_loss(tape, pred, &tgt, &mask)
    };
    Ok((obj_loss, box_l))
}

/// Targets for one cascade stage.
pub struct StageTargets {
    /// Class index per roi; `num_classes` encodes background.
    pub classes: Vec<usize>,
    /// Encoded regression targets, nonzero rows only for positives.
    pub deltas: Array2<f64>,
    /// 1.0 for positive rois.
    pub positive_mask: Array1<f64>,
    /// The matching threshold the targets were built with.
    pub iou_threshold: f64,
}

/// Per-stage cascade losses with equal stage weights: softmax cross entropy
/// over `K+1` classes plus class-agnostic Huber regression on positives.
/// Returns `(per-stage (cls, box) losses, total)`.
pub fn cascade_losses(
    tape: &mut Tape,
    stages: &[(TensorId, TensorId)],
    targets: &[StageTargets],
) -> (Vec<(TensorId, TensorId)>, TensorId) {
    assert_eq!(stages.len(), targets.len());
    let mut parts = Vec::with_capacity(stages.len());
    let mut terms = Vec::new();
    for ((logits, deltas), tgt) in stages.iter().zip(targets) {
        let cls = softmax_ce_loss(tape, *logits, &tgt.classes);
        let boxl = box_loss(tape, *deltas, &tgt.deltas, &tgt.positive_mask);
        terms.push((cls, 1.0));
        terms.push((boxl, 1.0));
        parts.push((cls, boxl));
    }
    let total = tape.sum_scalars(&terms);
    (parts, total)
}

/// Per-pixel BCE on the matched-class mask channel, averaged over positive
/// rois. `mask_logits` is `(R, K, S, S)`, `gt` is `(R, S, S)` binary, and
/// `classes[r]` selects the channel of roi `r`. Empty input yields 0.
pub fn mask_loss(
    tape: &mut Tape,
    mask_logits: TensorId,
    gt: &ArrayD<f64>,
    classes: &[usize],
) -> TensorId {
    let shape = tape.value(mask_logits).shape().to_vec();
    if classes.is_empty() {
        return tape.constant(ArrayD::from_elem(IxDyn(&[]), 0.0));
    }
    let (r, _k, s, s2) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(r, classes.len());
    assert_eq!(s, s2);
    let mut targets = ArrayD::<f64>::zeros(IxDyn(&shape));
    let mut weights = ArrayD::<f64>::zeros(IxDyn(&shape));
    for (ri, &c) in classes.iter().enumerate() {
        for y in 0..s {
            for x in 0..s {
                targets[[ri, c, y, x]] = gt[[ri, y, x]];
                weights[[ri, c, y, x]] = 1.0;
            }
        }
    }
    let normalizer = (r * s * s) as f64;
    bce_loss(tape, mask_logits, &targets, &weights, normalizer)
}

/// Named scalar losses plus their weighted total.
pub struct LossBundle {
    pub components: Vec<(&'static str, TensorId)>,
    pub total: TensorId,
}

impl LossBundle {
    pub fn value(&self, tape: &Tape, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, id)| tape.scalar_value(*id))
    }

    pub fn total_value(&self, tape: &Tape) -> f64 {
        tape.scalar_value(self.total)
    }
}

/// Finite-difference gradient checking used by the loss tests and the
/// acceptance suite.
pub mod gradcheck {
    use super::*;

    /// Build `f(x)` on a fresh tape, compare the analytic gradient at the
    /// given coordinates with central differences, and return the maximum
    /// relative error.
    pub fn max_rel_error(
        build: &dyn Fn(&mut Tape, TensorId) -> TensorId,
        x0: &ArrayD<f64>,
        coords: &[usize],
        eps: f64,
    ) -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = build(&mut tape, x);
        assert_eq!(tape.value(y).len(), 1, "loss must be scalar");
        let grads = tape.backward(y);
        let gx = grads.get(x).expect("input gradient").clone();

        let eval = |arr: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new();
            let l = t.leaf(arr.clone(), false);
            let out = build(&mut t, l);
            t.scalar_value(out)
        };
        let mut worst = 0.0f64;
        let mut xp = x0.clone();
        for &c in coords {
            let orig = xp.as_slice_mut().unwrap()[c];
            xp.as_slice_mut().unwrap()[c] = orig + eps;
            let fp = eval(&xp);
            xp.as_slice_mut().unwrap()[c] = orig - eps;
            let fm = eval(&xp);
            xp.as_slice_mut().unwrap()[c] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = gx.as_slice().unwrap()[c];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max((fd - an).abs() / denom);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn scalar(tape: &Tape, id: TensorId) -> f64 {
        tape.scalar_value(id)
    }

    #[test]
    fn focal_single_positive_half_probability() {
        // one anchor, one class, logit 0 => p_t = 0.5
        let mut tape = Tape::new();
        let logits = tape.leaf(ArrayD::zeros(IxDyn(&[1, 1])), false);
        let t = ndarray::arr2(&[[1.0]]);
        let mask = ndarray::arr1(&[1.0]);
        let l = focal_loss(&mut tape, logits, &t, &mask, 1, FocalParams::default());
        let expect = 0.25 * 0.5f64.powf(1.5) * 2.0f64.ln();
        assert!((scalar(&tape, l) - expect).abs() < 1e-12);
        assert!((expect - 0.0612661339667842).abs() < 1e-12);
    }

    #[test]
    fn focal_perfect_prediction_vanishes() {
        let mut tape = Tape::new();
        let logits = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1]), 40.0), false);
        let t = ndarray::arr2(&[[1.0]]);
        let mask = ndarray::arr1(&[1.0]);
        let l = focal_loss(&mut tape, logits, &t, &mask, 1, FocalParams::default());
        assert!(scalar(&tape, l) < 1e-12);
    }

    #[test]
    fn focal_gamma_zero_reduces_to_alpha_weighted_bce() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let logits0 = ArrayD::from_shape_fn(IxDyn(&[6, 3]), |_| rng.gen_range(-2.0..2.0));
        let targets = Array2::from_shape_fn((6, 3), |_| f64::from(rng.gen_bool(0.4)));
        let mask = Array1::from_elem(6, 1.0);
        let params = FocalParams { alpha: 0.5, gamma: 0.0 };

        let mut tape = Tape::new();
        let logits = tape.leaf(logits0.clone(), false);
        let l = focal_loss(&mut tape, logits, &targets, &mask, 4, params);

        // analytic alpha-weighted BCE oracle
        let mut expect = 0.0;
        for i in 0..6 {
            for j in 0..3 {
                let x = logits0[[i, j]];
                let t = targets[(i, j)];
                expect += 0.5 * (softplus(x) - t * x);
            }
        }
        expect /= 4.0;
        assert!((scalar(&tape, l) - expect).abs() < 1e-6);
    }

    #[test]
    fn focal_no_positives_is_finite_with_unit_normalizer() {
        let mut tape = Tape::new();
        let logits = tape.leaf(ArrayD::zeros(IxDyn(&[3, 2])), false);
        let t = Array2::zeros((3, 2));
        let mask = Array1::from_elem(3, 1.0);
        let l = focal_loss(&mut tape, logits, &t, &mask, 0, FocalParams::default());
        let v = scalar(&tape, l);
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn huber_branch_values() {
        let mut tape = Tape::new();
        let pred = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![0.5, 3.0]).unwrap(), false);
        let tgt = ndarray::arr2(&[[0.0], [0.0]]);
        // only the first row active: quadratic branch
        let l1 = box_loss(&mut tape, pred, &tgt, &ndarray::arr1(&[1.0, 0.0]));
        assert!((scalar(&tape, l1) - 0.125).abs() < 1e-12);
        // only the second: linear branch
        let l2 = box_loss(&mut tape, pred, &tgt, &ndarray::arr1(&[0.0, 1.0]));
        assert!((scalar(&tape, l2) - 2.5).abs() < 1e-12);
        // exact prediction
        let exact = tape.leaf(ArrayD::zeros(IxDyn(&[2, 1])), false);
        let l3 = box_loss(&mut tape, exact, &tgt, &ndarray::arr1(&[1.0, 1.0]));
        assert_eq!(scalar(&tape, l3), 0.0);
    }

    #[test]
    fn box_loss_zero_positives_is_zero() {
        let mut tape = Tape::new();
        let pred = tape.leaf(ArrayD::from_elem(IxDyn(&[3, 4]), 2.0), false);
        let tgt = Array2::zeros((3, 4));
        let l = box_loss(&mut tape, pred, &tgt, &Array1::zeros(3));
        assert_eq!(scalar(&tape, l), 0.0);
    }

    fn toy_match(n_pos: usize, n_neg: usize, n_ign: usize) -> MatchResult {
        let mut assignments = Vec::new();
        for _ in 0..n_pos {
            assignments.push(Assignment::Positive(0));
        }
        for _ in 0..n_neg {
            assignments.push(Assignment::Negative);
        }
        for _ in 0..n_ign {
            assignments.push(Assignment::Ignore);
        }
        let ious = vec![0.0; assignments.len()];
        MatchResult { assignments, ious }
    }

    #[test]
    fn rpn_balanced_zero_logits_give_ln2() {
        let m = toy_match(10, 300, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let obj = tape.leaf(ArrayD::zeros(IxDyn(&[315, 1])), false);
        let deltas = tape.leaf(ArrayD::zeros(IxDyn(&[315, 4])), false);
        let tgts = Array2::zeros((315, 4));
        let (lo, lb) = rpn_loss(&mut tape, obj, deltas, &m, &tgts, &mut rng).unwrap();
        assert!((scalar(&tape, lo) - 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(scalar(&tape, lb), 0.0); // targets equal predictions
    }

    #[test]
    fn rpn_all_ignore_is_rejected() {
        let m = toy_match(0, 0, 12);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let obj = tape.leaf(ArrayD::zeros(IxDyn(&[12, 1])), false);
        let deltas = tape.leaf(ArrayD::zeros(IxDyn(&[12, 4])), false);
        let tgts = Array2::zeros((12, 4));
        assert!(rpn_loss(&mut tape, obj, deltas, &m, &tgts, &mut rng).is_err());
    }

    #[test]
    fn rpn_sample_caps_positive_fraction() {
        let m = toy_match(400, 400, 0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let s = sample_rpn_anchors(&m, &mut rng).unwrap();
        assert_eq!(s.indices.len(), RPN_SAMPLE_SIZE);
        assert_eq!(s.positive.len(), 128);
    }

    #[test]
    fn cascade_two_identical_stages_double_single_stage() {
        let mut tape = Tape::new();
        let logits0 = ArrayD::from_shape_vec(
            IxDyn(&[3, 3]),
            vec![1.0, -0.5, 0.2, 0.3, 0.8, -0.2, -1.0, 0.1, 0.6],
        )
        .unwrap();
        let deltas0 = ArrayD::from_elem(IxDyn(&[3, 4]), 0.25);
        let mk = |tape: &mut Tape| {
            let l = tape.leaf(logits0.clone(), false);
            let d = tape.leaf(deltas0.clone(), false);
            (l, d)
        };
        let tgt = || StageTargets {
            classes: vec![0, 2, 1],
            deltas: Array2::zeros((3, 4)),
            positive_mask: ndarray::arr1(&[1.0, 0.0, 1.0]),
            iou_threshold: 0.6,
        };
        let s1 = mk(&mut tape);
        let (_, single) = cascade_losses(&mut tape, &[s1], &[tgt()]);
        let s2a = mk(&mut tape);
        let s2b = mk(&mut tape);
        let (_, double) = cascade_losses(&mut tape, &[s2a, s2b], &[tgt(), tgt()]);
        let sv = scalar(&tape, single);
        let dv = scalar(&tape, double);
        assert!((dv - 2.0 * sv).abs() < 1e-12);
    }

    #[test]
    fn higher_threshold_never_increases_positives() {
        // threshold monotonicity on the same proposals
        use crate::geometry::{match_targets, BoxSet};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let rand_boxes = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
            let rows: Vec<[f64; 4]> = (0..n)
                .map(|_| {
                    let y = rng.gen_range(0.0..50.0);
                    let x = rng.gen_range(0.0..50.0);
                    [y, x, y + rng.gen_range(5.0..30.0), x + rng.gen_range(5.0..30.0)]
                })
                .collect();
            BoxSet::from_rows(&rows).unwrap()
        };
        let proposals = rand_boxes(&mut rng, 40);
        let gt = rand_boxes(&mut rng, 5);
        let m6 = match_targets(&proposals, &gt, 0.6, 0.6);
        let m7 = match_targets(&proposals, &gt, 0.7, 0.7);
        assert!(m7.num_positive() <= m6.num_positive());
        let neg6 = m6.assignments.iter().filter(|a| **a == Assignment::Negative).count();
        let neg7 = m7.assignments.iter().filter(|a| **a == Assignment::Negative).count();
        assert!(neg7 >= neg6);
    }

    #[test]
    fn mask_loss_values() {
        // zero logits everywhere -> ln 2
        let mut tape = Tape::new();
        let logits = tape.leaf(ArrayD::zeros(IxDyn(&[2, 3, 4, 4])), false);
        let gt = ArrayD::from_elem(IxDyn(&[2, 4, 4]), 1.0);
        let l = mask_loss(&mut tape, logits, &gt, &[1, 2]);
        assert!((scalar(&tape, l) - 2.0f64.ln()).abs() < 1e-12);

        // saturated-correct logits -> ~0
        let mut sat = ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 0.0);
        for y in 0..2 {
            for x in 0..2 {
                sat[[0, 1, y, x]] = 40.0;
            }
        }
        let logits2 = tape.leaf(sat, false);
        let gt2 = ArrayD::from_elem(IxDyn(&[1, 2, 2]), 1.0);
        let l2 = mask_loss(&mut tape, logits2, &gt2, &[1]);
        assert!(scalar(&tape, l2) < 1e-12);
    }

    #[test]
    fn mask_loss_ignores_unmatched_channels() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let base = ArrayD::from_shape_fn(IxDyn(&[1, 3, 4, 4]), |_| rng.gen_range(-1.0..1.0));
        let gt = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4]), |_| f64::from(rng.gen_bool(0.5)));
        let mut tape = Tape::new();
        let a = tape.leaf(base.clone(), false);
        let la = mask_loss(&mut tape, a, &gt, &[1]);
        // perturb channels 0 and 2 wildly
        let mut perturbed = base;
        for y in 0..4 {
            for x in 0..4 {
                perturbed[[0, 0, y, x]] += 100.0;
                perturbed[[0, 2, y, x]] -= 55.0;
            }
        }
        let b = tape.leaf(perturbed, false);
        let lb = mask_loss(&mut tape, b, &gt, &[1]);
        assert_eq!(scalar(&tape, la), scalar(&tape, lb));
    }

    #[test]
    fn mask_loss_empty_is_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(ArrayD::zeros(IxDyn(&[0, 3, 4, 4])), false);
        let gt = ArrayD::zeros(IxDyn(&[0, 4, 4]));
        let l = mask_loss(&mut tape, logits, &gt, &[]);
        assert_eq!(scalar(&tape, l), 0.0);
    }

    #[test]
    fn losses_are_permutation_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let n = 12;
        let logits0 = ArrayD::from_shape_fn(IxDyn(&[n, 3]), |_| rng.gen_range(-2.0..2.0));
        let targets = Array2::from_shape_fn((n, 3), |_| f64::from(rng.gen_bool(0.3)));
        let mask = Array1::from_shape_fn(n, |_| f64::from(rng.gen_bool(0.8)));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);

        let eval = |order: &[usize]| {
            let mut tape = Tape::new();
            let mut l = ArrayD::zeros(IxDyn(&[n, 3]));
            let mut t = Array2::zeros((n, 3));
            let mut mk = Array1::zeros(n);
            for (row, &src) in order.iter().enumerate() {
                for j in 0..3 {
                    l[[row, j]] = logits0[[src, j]];
                    t[(row, j)] = targets[(src, j)];
                }
                mk[row] = mask[src];
            }
            let lid = tape.leaf(l, false);
            let loss = focal_loss(&mut tape, lid, &t, &mk, 5, FocalParams::default());
            tape.scalar_value(loss)
        };
        let id: Vec<usize> = (0..n).collect();
        assert!((eval(&id) - eval(&perm)).abs() < 1e-12);
    }

    #[test]
    fn all_losses_pass_gradient_checks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut coords_for = |len: usize| -> Vec<usize> {
            (0..20).map(|_| rng.gen_range(0..len)).collect()
        };
        let coords = coords_for(24);

        // focal
        let targets = Array2::from_shape_fn((8, 3), |_| f64::from(rng.gen_bool(0.4)));
        let mask = Array1::from_shape_fn(8, |_| f64::from(rng.gen_bool(0.8)));
        let x0 = ArrayD::from_shape_fn(IxDyn(&[8, 3]), |_| rng.gen_range(-2.0..2.0));
        let e = gradcheck::max_rel_error(
            &|t, x| focal_loss(t, x, &targets, &mask, 3, FocalParams::default()),
            &x0,
            &coords,
            1e-6,
        );
        assert!(e < 1e-3, "focal rel err {e}");

        // huber
        let tgt = Array2::from_shape_fn((8, 4), |_| rng.gen_range(-1.0..1.0));
        let pm = Array1::from_shape_fn(8, |_| f64::from(rng.gen_bool(0.6)));
        let x0 = ArrayD::from_shape_fn(IxDyn(&[8, 4]), |_| rng.gen_range(-2.0..2.0));
        let e = gradcheck::max_rel_error(&|t, x| box_loss(t, x, &tgt, &pm), &x0, &coords, 1e-6);
        assert!(e < 1e-3, "huber rel err {e}");

        // bce
        let targets = ArrayD::from_shape_fn(IxDyn(&[16, 2]), |_| f64::from(rng.gen_bool(0.5)));
        let weights = ArrayD::from_elem(IxDyn(&[16, 2]), 1.0);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[16, 2]), |_| rng.gen_range(-2.0..2.0));
        let e = gradcheck::max_rel_error(
            &|t, x| bce_loss(t, x, &targets, &weights, 32.0),
            &x0,
            &coords,
            1e-6,
        );
        assert!(e < 1e-3, "bce rel err {e}");

        // softmax ce
        let classes: Vec<usize> = (0..8).map(|_| rng.gen_range(0..4)).collect();
        let x0 = ArrayD::from_shape_fn(IxDyn(&[8, 4]), |_| rng.gen_range(-2.0..2.0));
        let e = gradcheck::max_rel_error(&|t, x| softmax_ce_loss(t, x, &classes), &x0, &coords, 1e-6);
        assert!(e < 1e-3, "softmax ce rel err {e}");

        // mask
        let gt = ArrayD::from_shape_fn(IxDyn(&[2, 3, 3]), |_| f64::from(rng.gen_bool(0.5)));
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 2, 3, 3]), |_| rng.gen_range(-2.0..2.0));
        let e = gradcheck::max_rel_error(&|t, x| mask_loss(t, x, &gt, &[0, 1]), &x0, &coords, 1e-6);
        assert!(e < 1e-3, "mask rel err {e}");
    }
}
