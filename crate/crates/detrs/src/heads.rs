//! Prediction heads: the one-stage classification/box subnets, the region
//! proposal head, cascaded class-agnostic box heads, the mask head, and
//! multi-level region feature extraction.

use ndarray::{Array2 as NdArray2, Array4 as NdArray4, Axis as NdAxis};
use rand_chacha::ChaCha8Rng;

use crate::error::{DetError, Result};
use crate::layers::{scaled_width, Activation, BatchNorm2d, Conv2d, Linear};
use crate::pyramid::PyramidFeatures;
use crate::tensor::{kernels, params, Forward, InferCtx, ParamStore, TensorId};

/// Proposal budgets after top-k + NMS.
pub const TRAIN_PROPOSALS: usize = 500;
pub const EVAL_PROPOSALS: usize = 1000;
/// Proposal filtering before NMS, per level.
pub const RPN_PRE_NMS_TOPK: usize = 1000;
pub const RPN_NMS_THRESHOLD: f64 = 0.7;

/// Initial foreground probability encoded in the classification bias.
pub const CLS_PRIOR: f64 = 0.01;

/// Crop sizes for region features.
pub const BOX_CROP: usize = 7;
pub const MASK_CROP: usize = 14;

/// Shape of the two-stage heads.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct HeadConfig {
    pub num_convs: usize,
    pub conv_width: usize,
    /// Fully connected width of the box heads.
    pub fc_width: usize,
    /// Per-stage matching thresholds; strictly increasing.
    pub cascade_iou_thresholds: Vec<f64>,
    pub class_agnostic_regression: bool,
}

impl HeadConfig {
    /// Regular two-stage setting: two cascaded heads at IoU 0.6 and 0.7,
    /// four convolutions each.
    pub fn regular() -> Self {
        HeadConfig {
            num_convs: 4,
            conv_width: 256,
            fc_width: 1024,
            cascade_iou_thresholds: vec![0.6, 0.7],
            class_agnostic_regression: true,
        }
    }

    /// Heavy setting: seven convolutions per head and a third stage at
    /// IoU 0.8.
    pub fn heavy() -> Self {
        HeadConfig {
            num_convs: 7,
            conv_width: 256,
            fc_width: 1024,
            cascade_iou_thresholds: vec![0.6, 0.7, 0.8],
            class_agnostic_regression: true,
        }
    }

    pub fn with_width_mult(mut self, mult: f64) -> Self {
        self.conv_width = scaled_width(self.conv_width, mult);
        self.fc_width = scaled_width(self.fc_width, mult);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_convs < 1 {
            return Err(DetError::config("head.num_convs", "need at least one convolution"));
        }
        for w in self.cascade_iou_thresholds.windows(2) {
            if w[1] <= w[0] {
                return Err(DetError::config(
                    "head.cascade_iou_thresholds",
                    format!("thresholds must be strictly increasing, got {:?}", self.cascade_iou_thresholds),
                ));
            }
        }
        if self.cascade_iou_thresholds.is_empty() {
            return Err(DetError::config(
                "head.cascade_iou_thresholds",
                "need at least one stage",
            ));
        }
        Ok(())
    }
}

/// Per-level raw outputs of the one-stage head.
pub struct OneStagePredictions {
    /// Class logits, `(N, A*K, H, W)` per level.
    pub cls: Vec<TensorId>,
    /// Box deltas, `(N, A*4, H, W)` per level.
    pub bbox: Vec<TensorId>,
}

/// Per-level raw outputs of the proposal head.
pub struct RpnPredictions {
    /// Objectness logits, `(N, A, H, W)` per level.
    pub objectness: Vec<TensorId>,
    /// Box deltas, `(N, A*4, H, W)` per level.
    pub deltas: Vec<TensorId>,
}

fn pred_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    bias_value: f64,
) -> Conv2d {
    let conv = Conv2d::new(store, rng, name, c_in, c_out, 3, 1, true);
    // small prediction-layer init; bias carries the prior
    let w = params::normal_init(rng, &[c_out, c_in, 3, 3], 0.01);
    store.value_mut(conv.w).assign(&w);
    store.value_mut(conv.b.unwrap()).fill(bias_value);
    conv
}

/// Shared-conv subnet with per-level norms.
struct Subnet {
    convs: Vec<Conv2d>,
    /// `norms[level][conv]` — convolutions are shared across levels, norms
    /// are not.
    norms: Vec<Vec<BatchNorm2d>>,
    pred: Conv2d,
    act: Activation,
}

impl Subnet {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        width: usize,
        num_convs: usize,
        levels: usize,
        out_channels: usize,
        pred_bias: f64,
        act: Activation,
    ) -> Self {
        let convs = (0..num_convs)
            .map(|i| Conv2d::new(store, rng, &format!("{prefix}.conv{}", i + 1), width, width, 3, 1, false))
            .collect();
        let norms = (0..levels)
            .map(|l| {
                (0..num_convs)
                    .map(|i| {
                        BatchNorm2d::new(store, &format!("{prefix}.level{}.bn{}", l + 3, i + 1), width)
                    })
                    .collect()
            })
            .collect();
        let pred = pred_conv(store, rng, &format!("{prefix}.pred"), width, out_channels, pred_bias);
        Subnet { convs, norms, pred, act }
    }

    fn forward_level(&self, f: &mut Forward, level_idx: usize, x: TensorId) -> TensorId {
        let mut h = x;
        for (ci, conv) in self.convs.iter().enumerate() {
            h = conv.forward(f, h);
            h = self.norms[level_idx][ci].forward(f, h);
            h = self.act.apply(f, h);
        }
        self.pred.forward(f, h)
    }
}

/// One-stage head: two parallel subnets of shared 3x3 convolutions over all
/// pyramid levels, with per-level normalization. The classification bias is
/// initialized so the initial foreground probability is [`CLS_PRIOR`].
pub struct RetinaNetHead {
    cls: Subnet,
    bbox: Subnet,
    pub num_classes: usize,
    pub anchors_per_loc: usize,
    pub activation: Activation,
}

impl RetinaNetHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        width: usize,
        num_convs: usize,
        num_classes: usize,
        anchors_per_loc: usize,
        act: Activation,
    ) -> Self {
        let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        let cls = Subnet::new(
            store,
            rng,
            &format!("{prefix}.cls"),
            width,
            num_convs,
            5,
            anchors_per_loc * num_classes,
            prior_bias,
            act,
        );
        let bbox = Subnet::new(
            store,
            rng,
            &format!("{prefix}.box"),
            width,
            num_convs,
            5,
            anchors_per_loc * 4,
            0.0,
            act,
        );
        RetinaNetHead {
            cls,
            bbox,
            num_classes,
            anchors_per_loc,
            activation: act,
        }
    }

    pub fn forward(&self, f: &mut Forward, p: &PyramidFeatures) -> OneStagePredictions {
        let levels = p.levels();
        let cls = levels
            .iter()
            .enumerate()
            .map(|(i, l)| self.cls.forward_level(f, i, *l))
            .collect();
        let bbox = levels
            .iter()
            .enumerate()
            .map(|(i, l)| self.bbox.forward_level(f, i, *l))
            .collect();
        OneStagePredictions { cls, bbox }
    }
}

/// Class-agnostic proposal head: two shared 3x3 convolutions, then
/// objectness and delta predictions.
pub struct RpnHead {
    trunk: Vec<Conv2d>,
    norms: Vec<Vec<BatchNorm2d>>,
    obj_pred: Conv2d,
    delta_pred: Conv2d,
    pub anchors_per_loc: usize,
    pub activation: Activation,
}

impl RpnHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        width: usize,
        anchors_per_loc: usize,
        act: Activation,
    ) -> Self {
        let trunk: Vec<Conv2d> = (0..2)
            .map(|i| Conv2d::new(store, rng, &format!("{prefix}.conv{}", i + 1), width, width, 3, 1, false))
            .collect();
        let norms = (0..5)
            .map(|l| {
                (0..2)
                    .map(|i| BatchNorm2d::new(store, &format!("{prefix}.level{}.bn{}", l + 3, i + 1), width))
                    .collect()
            })
            .collect();
        let obj_pred = pred_conv(store, rng, &format!("{prefix}.obj"), width, anchors_per_loc, 0.0);
        let delta_pred = pred_conv(store, rng, &format!("{prefix}.delta"), width, anchors_per_loc * 4, 0.0);
        RpnHead {
            trunk,
            norms,
            obj_pred,
            delta_pred,
            anchors_per_loc,
            activation: act,
        }
    }

    pub fn forward(&self, f: &mut Forward, p: &PyramidFeatures) -> RpnPredictions {
        let mut objectness = Vec::with_capacity(5);
        let mut deltas = Vec::with_capacity(5);
        for (li, level) in p.levels().iter().enumerate() {
            let mut h = *level;
            for (ci, conv) in self.trunk.iter().enumerate() {
                h = conv.forward(f, h);
                h = self.norms[li][ci].forward(f, h);
                h = self.activation.apply(f, h);
            }
            objectness.push(self.obj_pred.forward(f, h));
            deltas.push(self.delta_pred.forward(f, h));
        }
        RpnPredictions { objectness, deltas }
    }
}

/// Pyramid level for region features by the area heuristic
/// `floor(4 + log2(sqrt(area) / 224))`, clamped to P3..P5.
pub fn roi_level(bbox: &[f64; 4]) -> u32 {
    let area = ((bbox[2] - bbox[0]) * (bbox[3] - bbox[1])).max(1e-12);
    let lvl = (4.0 + (area.sqrt() / 224.0).log2()).floor();
    lvl.clamp(3.0, 5.0) as u32
}

/// Bilinear region crops from P3..P5 at `crop x crop` resolution. Rois carry
/// `(batch index, image-coordinate box)`; empty input yields an empty crop
/// tensor.
pub fn roi_extract(
    f: &mut Forward,
    p: &PyramidFeatures,
    rois: &[(usize, [f64; 4])],
    crop: usize,
) -> TensorId {
    let levels = [p.p3, p.p4, p.p5];
    let strides = [8usize, 16, 32];
    let assignment: Vec<usize> = rois
        .iter()
        .map(|(_, b)| (roi_level(b) - 3) as usize)
        .collect();
    f.tape
        .roi_extract_multi(&levels, &strides, rois, &assignment, crop)
}

/// One cascaded box refinement stage: convolutions with norms, one fully
/// connected layer, then classification (`K+1` logits, background last) and
/// a single 4-vector refinement shared by all classes.
pub struct CascadeStage {
    convs: Vec<(Conv2d, BatchNorm2d)>,
    fc: Linear,
    cls_pred: Linear,
    box_pred: Linear,
    pub iou_threshold: f64,
    pub activation: Activation,
}

impl CascadeStage {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &HeadConfig,
        num_classes: usize,
        iou_threshold: f64,
        act: Activation,
    ) -> Self {
        let w = cfg.conv_width;
        let convs = (0..cfg.num_convs)
            .map(|i| {
                (
                    Conv2d::new(store, rng, &format!("{prefix}.conv{}", i + 1), w, w, 3, 1, false),
                    BatchNorm2d::new(store, &format!("{prefix}.bn{}", i + 1), w),
                )
            })
            .collect();
        let fc = Linear::new(store, rng, &format!("{prefix}.fc"), w * BOX_CROP * BOX_CROP, cfg.fc_width);
        let cls_pred = Linear::new(store, rng, &format!("{prefix}.cls"), cfg.fc_width, num_classes + 1);
        let reg_out = if cfg.class_agnostic_regression { 4 } else { 4 * num_classes };
        let box_pred = Linear::new(store, rng, &format!("{prefix}.reg"), cfg.fc_width, reg_out);
        CascadeStage {
            convs,
            fc,
            cls_pred,
            box_pred,
            iou_threshold,
            activation: act,
        }
    }

    /// `crops`: `(R, C, 7, 7)` region features. Returns `(logits, deltas)`.
    pub fn forward(&self, f: &mut Forward, crops: TensorId) -> (TensorId, TensorId) {
        let mut h = crops;
        for (conv, bn) in &self.convs {
            h = conv.forward(f, h);
            h = bn.forward(f, h);
            h = self.activation.apply(f, h);
        }
        let shape = f.tape.value(h).shape().to_vec();
        let flat = f.tape.reshape(h, &[shape[0], shape[1] * shape[2] * shape[3]]);
        let fc = self.fc.forward(f, flat);
        let fc = self.activation.apply(f, fc);
        let logits = self.cls_pred.forward(f, fc);
        let deltas = self.box_pred.forward(f, fc);
        (logits, deltas)
    }

    pub fn regression_width(&self) -> usize {
        self.box_pred.out_dim
    }
}

/// The cascade of box heads; stage `t` refines the boxes decoded from stage
/// `t-1` (stage 0 consumes the proposals). Stages do not share weights.
pub struct CascadeBoxHead {
    pub stages: Vec<CascadeStage>,
    pub config: HeadConfig,
}

impl CascadeBoxHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: HeadConfig,
        num_classes: usize,
        act: Activation,
    ) -> Result<Self> {
        cfg.validate()?;
        let stages = cfg
            .cascade_iou_thresholds
            .iter()
            .enumerate()
            .map(|(i, &thr)| {
                CascadeStage::new(
                    store,
                    rng,
                    &format!("{prefix}.stage{}", i + 1),
                    &cfg,
                    num_classes,
                    thr,
                    act,
                )
            })
            .collect();
        Ok(CascadeBoxHead { stages, config: cfg })
    }
}

/// Mask prediction head: convolutions at the mask crop size, one stride-2
/// transposed convolution that doubles resolution, and a per-class 1x1
/// prediction.
pub struct MaskHead {
    convs: Vec<(Conv2d, BatchNorm2d)>,
    deconv_w: crate::tensor::ParamId,
    deconv_b: crate::tensor::ParamId,
    pred: Conv2d,
    pub num_classes: usize,
    pub activation: Activation,
}

impl MaskHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        width: usize,
        num_classes: usize,
        act: Activation,
    ) -> Self {
        let convs = (0..4)
            .map(|i| {
                (
                    Conv2d::new(store, rng, &format!("{prefix}.conv{}", i + 1), width, width, 3, 1, false),
                    BatchNorm2d::new(store, &format!("{prefix}.bn{}", i + 1), width),
                )
            })
            .collect();
        let deconv_w = store.add(
            format!("{prefix}.deconv.weight"),
            params::conv_transpose_init(rng, width, width, 3),
            true,
            false,
        );
        let deconv_b = store.add(format!("{prefix}.deconv.bias"), params::zeros(&[width]), true, false);
        let pred = Conv2d::new(store, rng, &format!("{prefix}.pred"), width, num_classes, 1, 1, true);
        MaskHead {
            convs,
            deconv_w,
            deconv_b,
            pred,
            num_classes,
            activation: act,
        }
    }

    /// `crops`: `(R, C, 14, 14)`. Returns `(R, K, 28, 28)` mask logits.
    pub fn forward(&self, f: &mut Forward, crops: TensorId) -> TensorId {
        let mut h = crops;
        for (conv, bn) in &self.convs {
            h = conv.forward(f, h);
            h = bn.forward(f, h);
            h = self.activation.apply(f, h);
        }
        let w = f.param(self.deconv_w);
        let b = f.param(self.deconv_b);
        let up = f.tape.conv2d_transpose(h, w, Some(b), 2, 1, 1);
        let up = self.activation.apply(f, up);
        self.pred.forward(f, up)
    }
}


// ---------------------------------------------------------------------------
// forward-only inference at benchmark precision
// ---------------------------------------------------------------------------

impl Subnet {
    fn infer_level(&self, ctx: &InferCtx, level_idx: usize, x: &NdArray4<f32>) -> NdArray4<f32> {
        let mut h = x.clone();
        for (ci, conv) in self.convs.iter().enumerate() {
            h = conv.infer(ctx, &h);
            h = self.norms[level_idx][ci].infer(ctx, &h);
            h = self.act.infer4(h);
        }
        self.pred.infer(ctx, &h)
    }
}

impl RetinaNetHead {
    /// Per-level `(class logits, box deltas)` from P3..P7 features.
    pub fn infer(
        &self,
        ctx: &InferCtx,
        levels: &[NdArray4<f32>; 5],
    ) -> (Vec<NdArray4<f32>>, Vec<NdArray4<f32>>) {
        let cls = levels
            .iter()
            .enumerate()
            .map(|(i, l)| self.cls.infer_level(ctx, i, l))
            .collect();
        let bbox = levels
            .iter()
            .enumerate()
            .map(|(i, l)| self.bbox.infer_level(ctx, i, l))
            .collect();
        (cls, bbox)
    }
}

impl RpnHead {
    pub fn infer(
        &self,
        ctx: &InferCtx,
        levels: &[NdArray4<f32>; 5],
    ) -> (Vec<NdArray4<f32>>, Vec<NdArray4<f32>>) {
        let mut objectness = Vec::with_capacity(5);
        let mut deltas = Vec::with_capacity(5);
        for (li, level) in levels.iter().enumerate() {
            let mut h = level.clone();
            for (ci, conv) in self.trunk.iter().enumerate() {
                h = conv.infer(ctx, &h);
                h = self.norms[li][ci].infer(ctx, &h);
                h = self.activation.infer4(h);
            }
            objectness.push(self.obj_pred.infer(ctx, &h));
            deltas.push(self.delta_pred.infer(ctx, &h));
        }
        (objectness, deltas)
    }
}

impl CascadeStage {
    pub fn infer(&self, ctx: &InferCtx, crops: &NdArray4<f32>) -> (NdArray2<f32>, NdArray2<f32>) {
        let mut h = crops.clone();
        for (conv, bn) in &self.convs {
            h = conv.infer(ctx, &h);
            h = bn.infer(ctx, &h);
            h = self.activation.infer4(h);
        }
        let (r, c, s1, s2) = h.dim();
        let flat = h.into_shape_with_order((r, c * s1 * s2)).unwrap();
        let fc = self.activation.infer2(self.fc.infer(ctx, &flat));
        (self.cls_pred.infer(ctx, &fc), self.box_pred.infer(ctx, &fc))
    }
}

impl MaskHead {
    pub fn infer(&self, ctx: &InferCtx, crops: &NdArray4<f32>) -> NdArray4<f32> {
        let mut h = crops.clone();
        for (conv, bn) in &self.convs {
            h = conv.infer(ctx, &h);
            h = bn.infer(ctx, &h);
            h = self.activation.infer4(h);
        }
        let w = ctx.value4(self.deconv_w);
        let b = ctx.value1(self.deconv_b);
        let up = kernels::conv2d_transpose(&h.view(), &w.view(), Some(&b), 2, 1, 1);
        let up = self.activation.infer4(ctx.quantize4(up));
        self.pred.infer(ctx, &up)
    }
}

/// Forward-only multi-level region cropping from P3..P5.
pub fn roi_extract_infer(
    levels: [&NdArray4<f32>; 3],
    rois: &[(usize, [f64; 4])],
    crop: usize,
) -> NdArray4<f32> {
    let strides = [8.0f64, 16.0, 32.0];
    let c = levels[0].shape()[1];
    let mut out = NdArray4::<f32>::zeros((rois.len(), c, crop, crop));
    let mut per_level: Vec<(Vec<kernels::RoiRef>, Vec<usize>)> = vec![(vec![], vec![]); 3];
    for (i, (batch, b)) in rois.iter().enumerate() {
        let li = (roi_level(b) - 3) as usize;
        let s = strides[li];
        per_level[li].0.push(kernels::RoiRef {
            batch: *batch,
            ymin: b[0] / s,
            xmin: b[1] / s,
            ymax: b[2] / s,
            xmax: b[3] / s,
        });
        per_level[li].1.push(i);
    }
    for (li, (lrois, rows)) in per_level.iter().enumerate() {
        if lrois.is_empty() {
            continue;
        }
        let crops = kernels::roi_align(&levels[li].view(), lrois, crop);
        for (k, &row) in rows.iter().enumerate() {
            out.index_axis_mut(NdAxis(0), row)
                .assign(&crops.index_axis(NdAxis(0), k));
        }
    }
    out
}
