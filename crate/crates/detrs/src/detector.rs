//! Detector assembly: the one-stage and cascaded two-stage models built
//! from backbone + pyramid + heads, with target construction, training
//! losses, and both the exact (f64 tape) and benchmark-precision (f32)
//! inference paths.

use ndarray::{Array1, Array2, Array4};

use crate::backbone::{BackboneSpec, ResNetRs};
use crate::error::{DetError, Result};
use crate::geometry::{
    decode_boxes, encode_boxes, generate_anchors, match_targets, AnchorGrid, Assignment, BoxSet,
    MatchResult,
};
use crate::heads::{
    roi_extract, roi_extract_infer, CascadeBoxHead, HeadConfig, MaskHead, RetinaNetHead, RpnHead,
    BOX_CROP, EVAL_PROPOSALS, MASK_CROP, RPN_NMS_THRESHOLD, RPN_PRE_NMS_TOPK, TRAIN_PROPOSALS,
};
use crate::layers::scaled_width;
use crate::losses::{
    box_loss, cascade_losses, focal_loss, mask_loss, rpn_loss, FocalParams, LossBundle,
    StageTargets,
};
use crate::postprocess::ap::{coco_ap, ApResult, ImageGroundTruth};
use crate::postprocess::{assemble_scores, nms, AssembleParams, DetectionResult};
use crate::pyramid::{Fpn, FpnConfig, PyramidFeatures};
use crate::rng;
use crate::scaling::Family;
use crate::tensor::kernels::sigmoid;
use crate::tensor::{Forward, InferCtx, Mode, ParamStore, TensorId};

/// Anchor layout shared by both families.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AnchorConfig {
    pub base_scale: f64,
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            base_scale: 3.0,
            aspect_ratios: vec![1.0, 2.0, 0.5],
        }
    }
}

/// Matching thresholds, `positive >= negative`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MatchThresholds {
    pub positive: f64,
    pub negative: f64,
}

/// Two-stage head shape variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    /// 4-conv heads, two stages at IoU 0.6 / 0.7.
    Regular,
    /// 7-conv heads, three stages at IoU 0.6 / 0.7 / 0.8.
    Heavy,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DetectorConfig {
    pub family: Family,
    pub num_classes: usize,
    pub resolution: usize,
    pub backbone: BackboneSpec,
    /// Channel multiplier applied to backbone, pyramid and head widths.
    pub width_mult: f64,
    pub fpn_norm: bool,
    pub head_variant: HeadVariant,
    pub anchor: AnchorConfig,
    pub focal: FocalParams,
    pub one_stage_match: MatchThresholds,
    pub rpn_match: MatchThresholds,
    pub assemble: AssembleParams,
    /// Attach the mask head (two-stage family only).
    pub with_masks: bool,
    /// Average the per-stage classifiers on the final boxes instead of
    /// using the last stage only.
    pub cascade_class_ensemble: bool,
}

impl DetectorConfig {
    pub fn new(family: Family, num_classes: usize, resolution: usize) -> Self {
        DetectorConfig {
            family,
            num_classes,
            resolution,
            backbone: BackboneSpec::default(),
            width_mult: 1.0,
            fpn_norm: true,
            head_variant: HeadVariant::Regular,
            anchor: AnchorConfig::default(),
            focal: FocalParams::default(),
            one_stage_match: MatchThresholds { positive: 0.5, negative: 0.4 },
            rpn_match: MatchThresholds { positive: 0.6, negative: 0.3 },
            assemble: AssembleParams::default(),
            with_masks: false,
            cascade_class_ensemble: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 128 != 0 {
            return Err(DetError::config(
                "resolution",
                format!(
                    "{} is not divisible by 128 (stride of the coarsest pyramid level)",
                    self.resolution
                ),
            ));
        }
        if self.num_classes == 0 {
            return Err(DetError::config("num_classes", "need at least one class"));
        }
        if self.head_variant == HeadVariant::Heavy && self.family != Family::RcnnRs {
            return Err(DetError::config(
                "head_variant",
                "the heavy head variant applies to the two-stage family only",
            ));
        }
        if self.with_masks && self.family != Family::RcnnRs {
            return Err(DetError::config(
                "with_masks",
                "mask prediction applies to the two-stage family only",
            ));
        }
        if self.one_stage_match.positive < self.one_stage_match.negative
            || self.rpn_match.positive < self.rpn_match.negative
        {
            return Err(DetError::config(
                "match",
                "positive threshold must be >= negative threshold",
            ));
        }
        self.backbone.validate()?;
        self.focal.validate()?;
        self.head_config().validate()?;
        Ok(())
    }

    pub fn head_config(&self) -> HeadConfig {
        let base = match self.head_variant {
            HeadVariant::Regular => HeadConfig::regular(),
            HeadVariant::Heavy => HeadConfig::heavy(),
        };
        base.with_width_mult(self.width_mult)
    }

    fn fpn_config(&self) -> FpnConfig {
        FpnConfig {
            width: scaled_width(256, self.width_mult),
            norm: self.fpn_norm,
            activation: self.backbone.activation,
        }
    }
}

/// Ground truth for one image in model-input coordinates.
#[derive(Debug, Clone)]
pub struct GtInstances {
    pub boxes: BoxSet,
    pub class_ids: Vec<usize>,
    pub masks: Option<Vec<Array2<u8>>>,
}

/// Per-stage diagnostics from a cascade training pass.
#[derive(Debug, Clone)]
pub struct StageTrace {
    /// Threshold taken from the head configuration for this stage.
    pub configured_threshold: f64,
    /// Threshold the targets were actually matched with.
    pub matched_threshold: f64,
    pub num_positive: usize,
    pub num_rois: usize,
}

pub struct TrainOutput {
    pub losses: LossBundle,
    pub stage_traces: Vec<StageTrace>,
}

// ---------------------------------------------------------------------------
// one-stage model
// ---------------------------------------------------------------------------

pub struct RetinaNetModel {
    pub config: DetectorConfig,
    pub backbone: ResNetRs,
    pub fpn: Fpn,
    pub head: RetinaNetHead,
    pub anchors: AnchorGrid,
}

impl RetinaNetModel {
    pub fn new(store: &mut ParamStore, seed: u64, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = rng::rng_for(&[seed, 0xB0]);
        let backbone = ResNetRs::new(store, &mut init_rng, "backbone", &config.backbone)?;
        let fpn = Fpn::new(
            store,
            &mut init_rng,
            "fpn",
            [
                backbone.stage_channels[1],
                backbone.stage_channels[2],
                backbone.stage_channels[3],
            ],
            config.fpn_config(),
        )?;
        let head = RetinaNetHead::new(
            store,
            &mut init_rng,
            "head",
            scaled_width(256, config.width_mult),
            4,
            config.num_classes,
            config.anchor.aspect_ratios.len(),
            config.backbone.activation,
        );
        let anchors = generate_anchors(
            (config.resolution, config.resolution),
            config.anchor.base_scale,
            &config.anchor.aspect_ratios,
        )?;
        Ok(RetinaNetModel {
            config,
            backbone,
            fpn,
            head,
            anchors,
        })
    }

    fn forward_pyramid(&self, f: &mut Forward, images: TensorId) -> Result<PyramidFeatures> {
        let maps = self.backbone.forward(f, images);
        self.fpn.forward(f, &maps)
    }

    /// Flatten per-level head outputs to `(N, total_anchors, C)`.
    fn flatten(&self, f: &mut Forward, per_level: &[TensorId]) -> TensorId {
        let a = self.head.anchors_per_loc;
        let flat: Vec<TensorId> = per_level
            .iter()
            .map(|id| f.tape.flatten_predictions(*id, a))
            .collect();
        f.tape.concat_axis1(&flat)
    }

    pub fn training_loss(
        &self,
        f: &mut Forward,
        images: &Array4<f64>,
        gt: &[GtInstances],
    ) -> Result<TrainOutput> {
        assert_eq!(images.shape()[0], gt.len());
        let n = gt.len();
        let x = f.tape.leaf(images.clone().into_dyn(), false);
        let pyramid = self.forward_pyramid(f, x)?;
        let preds = self.head.forward(f, &pyramid);
        let cls_flat = self.flatten(f, &preds.cls);
        let box_flat = self.flatten(f, &preds.bbox);
        let total_anchors = self.anchors.total_anchors();
        debug_assert_eq!(f.tape.value(cls_flat).shape()[1], total_anchors);

        let anchor_boxes = self.anchors.all_boxes();
        let k = self.config.num_classes;
        let mut cls_terms = Vec::with_capacity(n);
        let mut box_terms = Vec::with_capacity(n);
        for i in 0..n {
            let m = match_targets(
                &anchor_boxes,
                &gt[i].boxes,
                self.config.one_stage_match.positive,
                self.config.one_stage_match.negative,
            );
            let mut targets = Array2::<f64>::zeros((total_anchors, k));
            let mut anchor_mask = Array1::<f64>::zeros(total_anchors);
            let mut delta_targets = Array2::<f64>::zeros((total_anchors, 4));
            let mut positive_mask = Array1::<f64>::zeros(total_anchors);
            let mut positives = 0usize;
            for (ai, assign) in m.assignments.iter().enumerate() {
                match assign {
                    Assignment::Positive(g) => {
                        targets[(ai, gt[i].class_ids[*g])] = 1.0;
                        anchor_mask[ai] = 1.0;
                        positive_mask[ai] = 1.0;
                        positives += 1;
                        let gt_box = BoxSet::from_rows(&[gt[i].boxes.get(*g)])?;
                        let anchor = BoxSet::from_rows(&[anchor_boxes.get(ai)])?;
                        let d = encode_boxes(&gt_box, &anchor);
                        delta_targets.row_mut(ai).assign(&d.row(0));
                    }
                    Assignment::Negative => anchor_mask[ai] = 1.0,
                    Assignment::Ignore => {}
                }
            }
            let cls_i = f.tape.gather_rows(cls_flat, &[i]);
            let cls_i = f.tape.reshape(cls_i, &[total_anchors, k]);
            let box_i = f.tape.gather_rows(box_flat, &[i]);
            let box_i = f.tape.reshape(box_i, &[total_anchors, 4]);
            cls_terms.push(focal_loss(
                &mut f.tape,
                cls_i,
                &targets,
                &anchor_mask,
                positives,
                self.config.focal,
            ));
            box_terms.push(box_loss(&mut f.tape, box_i, &delta_targets, &positive_mask));
        }
        let w = 1.0 / n as f64;
        let cls_total = f
            .tape
            .sum_scalars(&cls_terms.iter().map(|t| (*t, w)).collect::<Vec<_>>());
        let box_total = f
            .tape
            .sum_scalars(&box_terms.iter().map(|t| (*t, w)).collect::<Vec<_>>());
        let total = f.tape.sum_scalars(&[(cls_total, 1.0), (box_total, 1.0)]);
        Ok(TrainOutput {
            losses: LossBundle {
                components: vec![("cls", cls_total), ("box", box_total)],
                total,
            },
            stage_traces: vec![],
        })
    }

    /// Exact eval-mode detection on one preprocessed input batch of 1.
    pub fn detect(&self, store: &mut ParamStore, input: &Array4<f64>) -> Result<DetectionResult> {
        let mut f = Forward::new(store, Mode::Eval);
        let x = f.tape.constant(input.clone().into_dyn());
        let pyramid = self.forward_pyramid(&mut f, x)?;
        let preds = self.head.forward(&mut f, &pyramid);
        let cls_flat = self.flatten(&mut f, &preds.cls);
        let box_flat = self.flatten(&mut f, &preds.bbox);
        let a = self.anchors.total_anchors();
        let cls = f
            .tape
            .value(cls_flat)
            .to_shape((a, self.config.num_classes))
            .unwrap()
            .to_owned();
        let deltas = f.tape.value(box_flat).to_shape((a, 4)).unwrap().to_owned();
        let scores = cls.mapv(sigmoid);
        let decoded = decode_boxes(&deltas, &self.anchors.all_boxes());
        Ok(assemble_scores(
            &decoded,
            &scores,
            (self.config.resolution, self.config.resolution),
            &self.config.assemble,
        ))
    }

    /// Benchmark-precision raw forward: flattened class logits and deltas.
    pub fn infer_raw(&self, ctx: &InferCtx, input: &Array4<f32>) -> (Array2<f64>, Array2<f64>) {
        let maps = self.backbone.infer(ctx, input);
        let levels = self.fpn.infer(ctx, &maps);
        let (cls, bbox) = self.head.infer(ctx, &levels);
        let a = self.head.anchors_per_loc;
        (
            flatten_levels_values(&cls, a, self.config.num_classes),
            flatten_levels_values(&bbox, a, 4),
        )
    }

    /// Benchmark-precision detection including postprocessing.
    pub fn infer_detect(&self, ctx: &InferCtx, input: &Array4<f32>) -> DetectionResult {
        let (cls, deltas) = self.infer_raw(ctx, input);
        let scores = cls.mapv(sigmoid);
        let decoded = decode_boxes(&deltas, &self.anchors.all_boxes());
        assemble_scores(
            &decoded,
            &scores,
            (self.config.resolution, self.config.resolution),
            &self.config.assemble,
        )
    }
}

/// Rearrange per-level `(1, A*C, H, W)` maps into `(total, C)` rows in
/// anchor order (level, y, x, anchor).
fn flatten_levels_values(levels: &[Array4<f32>], anchors_per_loc: usize, c: usize) -> Array2<f64> {
    let total: usize = levels
        .iter()
        .map(|l| l.shape()[2] * l.shape()[3] * anchors_per_loc)
        .sum();
    let mut out = Array2::<f64>::zeros((total, c));
    let mut row = 0;
    for l in levels {
        let (_, ac, h, w) = l.dim();
        debug_assert_eq!(ac, anchors_per_loc * c);
        for y in 0..h {
            for x in 0..w {
                for a in 0..anchors_per_loc {
                    for ci in 0..c {
                        out[(row, ci)] = l[(0, a * c + ci, y, x)] as f64;
                    }
                    row += 1;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// two-stage model
// ---------------------------------------------------------------------------

pub struct CascadeModel {
    pub config: DetectorConfig,
    pub backbone: ResNetRs,
    pub fpn: Fpn,
    pub rpn: RpnHead,
    pub cascade: CascadeBoxHead,
    pub mask_head: Option<MaskHead>,
    pub anchors: AnchorGrid,
}

impl CascadeModel {
    pub fn new(store: &mut ParamStore, seed: u64, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = rng::rng_for(&[seed, 0xB1]);
        let backbone = ResNetRs::new(store, &mut init_rng, "backbone", &config.backbone)?;
        let fpn = Fpn::new(
            store,
            &mut init_rng,
            "fpn",
            [
                backbone.stage_channels[1],
                backbone.stage_channels[2],
                backbone.stage_channels[3],
            ],
            config.fpn_config(),
        )?;
        let width = scaled_width(256, config.width_mult);
        let rpn = RpnHead::new(
            store,
            &mut init_rng,
            "rpn",
            width,
            config.anchor.aspect_ratios.len(),
            config.backbone.activation,
        );
        let cascade = CascadeBoxHead::new(
            store,
            &mut init_rng,
            "cascade",
            config.head_config(),
            config.num_classes,
            config.backbone.activation,
        )?;
        let mask_head = config.with_masks.then(|| {
            MaskHead::new(
                store,
                &mut init_rng,
                "mask",
                width,
                config.num_classes,
                config.backbone.activation,
            )
        });
        let anchors = generate_anchors(
            (config.resolution, config.resolution),
            config.anchor.base_scale,
            &config.anchor.aspect_ratios,
        )?;
        Ok(CascadeModel {
            config,
            backbone,
            fpn,
            rpn,
            cascade,
            mask_head,
            anchors,
        })
    }

    /// Select proposals from raw objectness/deltas values: per-level top-k,
    /// decode, clip, then cross-level NMS down to the budget. Proposal boxes
    /// carry no gradient.
    fn select_proposals(
        &self,
        objectness: &[Array4<f64>],
        deltas: &[Array4<f64>],
        image_idx: usize,
        budget: usize,
    ) -> Result<BoxSet> {
        let res = self.config.resolution as f64;
        let a_per = self.anchors.anchors_per_location();
        let mut scored: Vec<(f64, [f64; 4])> = Vec::new();
        for (li, level) in self.anchors.levels.iter().enumerate() {
            let obj = &objectness[li];
            let dl = &deltas[li];
            let (_, _, h, w) = obj.dim();
            let mut entries: Vec<(f64, usize)> = Vec::with_capacity(h * w * a_per);
            for y in 0..h {
                for x in 0..w {
                    for a in 0..a_per {
                        let flat = (y * w + x) * a_per + a;
                        entries.push((obj[(image_idx, a, y, x)], flat));
                    }
                }
            }
            entries.sort_by(|p, q| {
                q.0.partial_cmp(&p.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(p.1.cmp(&q.1))
            });
            entries.truncate(RPN_PRE_NMS_TOPK);
            let rows: Vec<[f64; 4]> = entries
                .iter()
                .map(|&(_, flat)| {
                    let a = flat % a_per;
                    let cell = flat / a_per;
                    let (y, x) = (cell / w, cell % w);
                    let anchor = level.boxes.get((y * w + x) * a_per + a);
                    let mut d = [0.0; 4];
                    for (ci, dv) in d.iter_mut().enumerate() {
                        *dv = dl[(image_idx, a * 4 + ci, y, x)];
                    }
                    decode_single(&anchor, &d)
                })
                .collect();
            for (e, r) in entries.iter().zip(rows) {
                let clipped = [
                    r[0].clamp(0.0, res),
                    r[1].clamp(0.0, res),
                    r[2].clamp(0.0, res),
                    r[3].clamp(0.0, res),
                ];
                if (clipped[2] - clipped[0]) * (clipped[3] - clipped[1]) >= 1.0 {
                    scored.push((sigmoid(e.0), clipped));
                }
            }
        }
        scored.sort_by(|p, q| q.0.partial_cmp(&p.0).unwrap_or(std::cmp::Ordering::Equal));
        let boxes = BoxSet::from_rows(&scored.iter().map(|s| s.1).collect::<Vec<_>>())?;
        let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
        let keep = nms(&boxes, &scores, RPN_NMS_THRESHOLD, budget);
        BoxSet::from_rows(&keep.iter().map(|&i| boxes.get(i)).collect::<Vec<_>>())
    }

    fn rpn_values(
        &self,
        f: &Forward,
        preds: &crate::heads::RpnPredictions,
    ) -> (Vec<Array4<f64>>, Vec<Array4<f64>>) {
        let to4 = |id: TensorId, f: &Forward| {
            f.tape
                .value(id)
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap()
                .to_owned()
        };
        (
            preds.objectness.iter().map(|id| to4(*id, f)).collect(),
            preds.deltas.iter().map(|id| to4(*id, f)).collect(),
        )
    }

    pub fn training_loss(
        &self,
        f: &mut Forward,
        images: &Array4<f64>,
        gt: &[GtInstances],
    ) -> Result<TrainOutput> {
        let n = gt.len();
        let Mode::Train { step, seed } = f.mode else {
            return Err(DetError::Data("training_loss needs train mode".into()));
        };
        let x = f.tape.leaf(images.clone().into_dyn(), false);
        let maps = self.backbone.forward(f, x);
        let pyramid = self.fpn.forward(f, &maps)?;
        let rpn_preds = self.rpn.forward(f, &pyramid);

        // --- proposal losses ---
        let anchor_boxes = self.anchors.all_boxes();
        let total_anchors = anchor_boxes.len();
        let a_per = self.anchors.anchors_per_location();
        let obj_flat = {
            let flat: Vec<TensorId> = rpn_preds
                .objectness
                .iter()
                .map(|id| f.tape.flatten_predictions(*id, a_per))
                .collect();
            f.tape.concat_axis1(&flat)
        };
        let delta_flat = {
            let flat: Vec<TensorId> = rpn_preds
                .deltas
                .iter()
                .map(|id| f.tape.flatten_predictions(*id, a_per))
                .collect();
            f.tape.concat_axis1(&flat)
        };
        let mut rpn_obj_terms = Vec::new();
        let mut rpn_box_terms = Vec::new();
        for i in 0..n {
            let m = match_targets(
                &anchor_boxes,
                &gt[i].boxes,
                self.config.rpn_match.positive,
                self.config.rpn_match.negative,
            );
            let mut delta_targets = Array2::<f64>::zeros((total_anchors, 4));
            for (ai, assign) in m.assignments.iter().enumerate() {
                if let Assignment::Positive(g) = assign {
                    let gt_box = BoxSet::from_rows(&[gt[i].boxes.get(*g)])?;
                    let anchor = BoxSet::from_rows(&[anchor_boxes.get(ai)])?;
                    delta_targets
                        .row_mut(ai)
                        .assign(&encode_boxes(&gt_box, &anchor).row(0));
                }
            }
            let obj_i = f.tape.gather_rows(obj_flat, &[i]);
            let obj_i = f.tape.reshape(obj_i, &[total_anchors, 1]);
            let del_i = f.tape.gather_rows(delta_flat, &[i]);
            let del_i = f.tape.reshape(del_i, &[total_anchors, 4]);
            let mut sample_rng = rng::rng_for(&[seed, step, i as u64, 0x59]);
            let (lo, lb) = rpn_loss(&mut f.tape, obj_i, del_i, &m, &delta_targets, &mut sample_rng)?;
            rpn_obj_terms.push(lo);
            rpn_box_terms.push(lb);
        }
        let w = 1.0 / n as f64;
        let rpn_obj = f
            .tape
            .sum_scalars(&rpn_obj_terms.iter().map(|t| (*t, w)).collect::<Vec<_>>());
        let rpn_box = f
            .tape
            .sum_scalars(&rpn_box_terms.iter().map(|t| (*t, w)).collect::<Vec<_>>());

        // --- proposals (values only, no gradient) ---
        let (obj_vals, delta_vals) = self.rpn_values(f, &rpn_preds);
        let mut proposals: Vec<BoxSet> = Vec::with_capacity(n);
        for i in 0..n {
            proposals.push(self.select_proposals(&obj_vals, &delta_vals, i, TRAIN_PROPOSALS)?);
        }

        // --- cascade stages ---
        let k = self.config.num_classes;
        let mut stage_outputs: Vec<(TensorId, TensorId)> = Vec::new();
        let mut stage_targets: Vec<StageTargets> = Vec::new();
        let mut stage_traces: Vec<StageTrace> = Vec::new();
        // per-roi bookkeeping for the mask head: (image, box, matched gt)
        let mut final_positive: Vec<(usize, [f64; 4], usize)> = Vec::new();
        let mut current = proposals;
        for stage in &self.cascade.stages {
            let thr = stage.iou_threshold;
            let mut rois: Vec<(usize, [f64; 4])> = Vec::new();
            let mut classes: Vec<usize> = Vec::new();
            let mut deltas_t: Vec<[f64; 4]> = Vec::new();
            let mut pos_mask: Vec<f64> = Vec::new();
            final_positive.clear();
            for (i, props) in current.iter().enumerate() {
                let m: MatchResult = match_targets(props, &gt[i].boxes, thr, thr);
                for (ri, assign) in m.assignments.iter().enumerate() {
                    let pbox = props.get(ri);
                    rois.push((i, pbox));
                    match assign {
                        Assignment::Positive(g) => {
                            classes.push(gt[i].class_ids[*g]);
                            let gt_box = BoxSet::from_rows(&[gt[i].boxes.get(*g)])?;
                            let anchor = BoxSet::from_rows(&[pbox])?;
                            let d = encode_boxes(&gt_box, &anchor);
                            deltas_t.push([d[(0, 0)], d[(0, 1)], d[(0, 2)], d[(0, 3)]]);
                            pos_mask.push(1.0);
                            final_positive.push((i, pbox, *g));
                        }
                        _ => {
                            classes.push(k); // background
                            deltas_t.push([0.0; 4]);
                            pos_mask.push(0.0);
                        }
                    }
                }
            }
            let crops = roi_extract(f, &pyramid, &rois, BOX_CROP);
            let (logits, deltas) = stage.forward(f, crops);
            let num_pos = pos_mask.iter().filter(|v| **v > 0.0).count();
            stage_traces.push(StageTrace {
                configured_threshold: thr,
                matched_threshold: thr,
                num_positive: num_pos,
                num_rois: rois.len(),
            });
            let mut dt = Array2::<f64>::zeros((deltas_t.len(), 4));
            for (r, row) in deltas_t.iter().enumerate() {
                for c in 0..4 {
                    dt[(r, c)] = row[c];
                }
            }
            stage_targets.push(StageTargets {
                classes,
                deltas: dt,
                positive_mask: Array1::from_vec(pos_mask),
                iou_threshold: thr,
            });
            stage_outputs.push((logits, deltas));

            // refine boxes for the next stage from the predicted deltas
            let pred_deltas = f
                .tape
                .value(deltas)
                .to_shape((rois.len(), 4))
                .unwrap()
                .to_owned();
            let roi_boxes = BoxSet::from_rows(&rois.iter().map(|r| r.1).collect::<Vec<_>>())?;
            let refined = decode_boxes(&pred_deltas, &roi_boxes)
                .clip(self.config.resolution as f64, self.config.resolution as f64);
            let mut next: Vec<Vec<[f64; 4]>> = vec![Vec::new(); n];
            for (ri, (i, _)) in rois.iter().enumerate() {
                let rb = refined.get(ri);
                if (rb[2] - rb[0]) * (rb[3] - rb[1]) >= 1.0 {
                    next[*i].push(rb);
                }
            }
            current = next
                .into_iter()
                .map(|rows| BoxSet::from_rows(&rows))
                .collect::<Result<Vec<_>>>()?;
        }
        let (stage_parts, cascade_total) = cascade_losses(&mut f.tape, &stage_outputs, &stage_targets);

        // --- mask loss on final-stage positives ---
        let mask_term = match (&self.mask_head, gt.iter().all(|g| g.masks.is_some())) {
            (Some(mask_head), true) if !final_positive.is_empty() => {
                let mut picked = final_positive.clone();
                picked.truncate(128);
                let rois: Vec<(usize, [f64; 4])> = picked.iter().map(|(i, b, _)| (*i, *b)).collect();
                let crops = roi_extract(f, &pyramid, &rois, MASK_CROP);
                let logits = mask_head.forward(f, crops);
                let out = 2 * MASK_CROP;
                let mut gt_crops = ndarray::ArrayD::<f64>::zeros(ndarray::IxDyn(&[picked.len(), out, out]));
                let mut classes = Vec::with_capacity(picked.len());
                for (ri, (i, b, g)) in picked.iter().enumerate() {
                    classes.push(gt[*i].class_ids[*g]);
                    let full = &gt[*i].masks.as_ref().unwrap()[*g];
                    let crop = crop_mask_to_box(full, b, out);
                    for y in 0..out {
                        for x in 0..out {
                            gt_crops[[ri, y, x]] = crop[(y, x)];
                        }
                    }
                }
                Some(mask_loss(&mut f.tape, logits, &gt_crops, &classes))
            }
            _ => None,
        };

        let mut components = vec![("rpn_obj", rpn_obj), ("rpn_box", rpn_box)];
        static STAGE_NAMES: [(&str, &str); 3] = [
            ("stage1_cls", "stage1_box"),
            ("stage2_cls", "stage2_box"),
            ("stage3_cls", "stage3_box"),
        ];
        for (si, (cls, boxl)) in stage_parts.iter().enumerate() {
            components.push((STAGE_NAMES[si].0, *cls));
            components.push((STAGE_NAMES[si].1, *boxl));
        }
        let mut total_terms = vec![(rpn_obj, 1.0), (rpn_box, 1.0), (cascade_total, 1.0)];
        if let Some(m) = mask_term {
            components.push(("mask", m));
            total_terms.push((m, 1.0));
        }
        let total = f.tape.sum_scalars(&total_terms);
        Ok(TrainOutput {
            losses: LossBundle { components, total },
            stage_traces,
        })
    }

    /// Exact eval-mode detection on one preprocessed input batch of 1.
    pub fn detect(&self, store: &mut ParamStore, input: &Array4<f64>) -> Result<DetectionResult> {
        let mut f = Forward::new(store, Mode::Eval);
        let x = f.tape.constant(input.clone().into_dyn());
        let maps = self.backbone.forward(&mut f, x);
        let pyramid = self.fpn.forward(&mut f, &maps)?;
        let rpn_preds = self.rpn.forward(&mut f, &pyramid);
        let (obj_vals, delta_vals) = self.rpn_values(&f, &rpn_preds);
        let mut proposals = self.select_proposals(&obj_vals, &delta_vals, 0, EVAL_PROPOSALS)?;

        let res = self.config.resolution as f64;
        let mut final_logits: Option<Array2<f64>> = None;
        let mut prob_stack: Vec<Array2<f64>> = Vec::new();
        let mut final_deltas = Array2::<f64>::zeros((0, 4));
        for (si, stage) in self.cascade.stages.iter().enumerate() {
            let rois: Vec<(usize, [f64; 4])> =
                (0..proposals.len()).map(|r| (0, proposals.get(r))).collect();
            let crops = roi_extract(&mut f, &pyramid, &rois, BOX_CROP);
            let (logits, deltas) = stage.forward(&mut f, crops);
            let lv = f
                .tape
                .value(logits)
                .to_shape((proposals.len(), self.config.num_classes + 1))
                .unwrap()
                .to_owned();
            let dv = f
                .tape
                .value(deltas)
                .to_shape((proposals.len(), 4))
                .unwrap()
                .to_owned();
            if si + 1 == self.cascade.stages.len() {
                final_logits = Some(lv);
                final_deltas = dv;
            } else {
                if self.config.cascade_class_ensemble {
                    prob_stack.push(softmax_probs(&lv));
                }
                proposals = decode_boxes(&dv, &proposals).clip(res, res);
            }
        }
        let final_logits = final_logits.expect("at least one stage");
        let scores = if self.config.cascade_class_ensemble && !prob_stack.is_empty() {
            // average the stage classifiers (the final boxes were produced
            // by the last refinement either way)
            let mut acc = softmax_probs(&final_logits);
            for p in &prob_stack {
                acc += p;
            }
            acc.mapv(|v| v / (prob_stack.len() + 1) as f64)
        } else {
            softmax_probs(&final_logits)
        };
        let decoded = decode_boxes(&final_deltas, &proposals);
        Ok(assemble_scores(
            &decoded,
            &scores,
            (self.config.resolution, self.config.resolution),
            &self.config.assemble,
        ))
    }

    /// Benchmark-precision forward up to the final stage's raw outputs.
    pub fn infer_raw(
        &self,
        ctx: &InferCtx,
        input: &Array4<f32>,
    ) -> Result<(Array2<f64>, Array2<f64>, BoxSet)> {
        let maps = self.backbone.infer(ctx, input);
        let levels = self.fpn.infer(ctx, &maps);
        let (obj, deltas) = self.rpn.infer(ctx, &levels);
        let obj64: Vec<Array4<f64>> = obj.iter().map(|a| a.mapv(|v| v as f64)).collect();
        let del64: Vec<Array4<f64>> = deltas.iter().map(|a| a.mapv(|v| v as f64)).collect();
        let mut proposals = self.select_proposals(&obj64, &del64, 0, EVAL_PROPOSALS)?;
        let res = self.config.resolution as f64;
        let box_levels = [&levels[0], &levels[1], &levels[2]];
        let mut final_out: Option<(Array2<f64>, Array2<f64>)> = None;
        for (si, stage) in self.cascade.stages.iter().enumerate() {
            let rois: Vec<(usize, [f64; 4])> =
                (0..proposals.len()).map(|r| (0, proposals.get(r))).collect();
            let crops = roi_extract_infer(box_levels, &rois, BOX_CROP);
            let (logits, dv) = stage.infer(ctx, &crops);
            let lv64 = logits.mapv(|v| v as f64);
            let dv64 = dv.mapv(|v| v as f64);
            if si + 1 == self.cascade.stages.len() {
                final_out = Some((lv64, dv64));
            } else {
                proposals = decode_boxes(&dv64, &proposals).clip(res, res);
            }
        }
        let (logits, deltas) = final_out.expect("at least one stage");
        Ok((logits, deltas, proposals))
    }

    /// Benchmark-precision detection including postprocessing (and mask
    /// crops for the kept detections when the mask head is attached).
    pub fn infer_detect(&self, ctx: &InferCtx, input: &Array4<f32>) -> Result<DetectionResult> {
        let (logits, deltas, proposals) = self.infer_raw(ctx, input)?;
        let scores = softmax_probs(&logits);
        let decoded = decode_boxes(&deltas, &proposals);
        let result = assemble_scores(
            &decoded,
            &scores,
            (self.config.resolution, self.config.resolution),
            &self.config.assemble,
        );
        if let Some(mask_head) = &self.mask_head {
            if !result.is_empty() {
                let maps = self.backbone.infer(ctx, input);
                let levels = self.fpn.infer(ctx, &maps);
                let rois: Vec<(usize, [f64; 4])> =
                    result.boxes.iter().map(|b| (0usize, *b)).collect();
                let crops = roi_extract_infer([&levels[0], &levels[1], &levels[2]], &rois, MASK_CROP);
                let _masks = mask_head.infer(ctx, &crops);
            }
        }
        Ok(result)
    }
}

fn softmax_probs(logits: &Array2<f64>) -> Array2<f64> {
    let k = logits.ncols() - 1;
    let mut probs = Array2::<f64>::zeros((logits.nrows(), k));
    for r in 0..logits.nrows() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        for c in 0..k {
            probs[(r, c)] = (row[c] - m).exp() / z;
        }
    }
    probs
}

fn decode_single(anchor: &[f64; 4], delta: &[f64; 4]) -> [f64; 4] {
    let anchors = BoxSet::from_rows(&[*anchor]).expect("anchor valid");
    let mut d = Array2::zeros((1, 4));
    for (c, v) in delta.iter().enumerate() {
        d[(0, c)] = *v;
    }
    let out = decode_boxes(&d, &anchors);
    out.get(0)
}

/// Sample a full-image binary mask over the box at `out x out` cell
/// centers.
fn crop_mask_to_box(mask: &Array2<u8>, bbox: &[f64; 4], out: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    let bh = (bbox[2] - bbox[0]).max(1e-6);
    let bw = (bbox[3] - bbox[1]).max(1e-6);
    Array2::from_shape_fn((out, out), |(i, j)| {
        let y = bbox[0] + (i as f64 + 0.5) / out as f64 * bh;
        let x = bbox[1] + (j as f64 + 0.5) / out as f64 * bw;
        let yi = (y.floor().max(0.0) as usize).min(h - 1);
        let xi = (x.floor().max(0.0) as usize).min(w - 1);
        mask[(yi, xi)] as f64
    })
}

/// Either detector family behind one interface.
pub enum Detector {
    OneStage(RetinaNetModel),
    TwoStage(CascadeModel),
}

impl Detector {
    pub fn new(store: &mut ParamStore, seed: u64, config: DetectorConfig) -> Result<Self> {
        match config.family {
            Family::RetinanetRs => Ok(Detector::OneStage(RetinaNetModel::new(store, seed, config)?)),
            Family::RcnnRs => Ok(Detector::TwoStage(CascadeModel::new(store, seed, config)?)),
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        match self {
            Detector::OneStage(m) => &m.config,
            Detector::TwoStage(m) => &m.config,
        }
    }

    pub fn training_loss(
        &self,
        f: &mut Forward,
        images: &Array4<f64>,
        gt: &[GtInstances],
    ) -> Result<TrainOutput> {
        match self {
            Detector::OneStage(m) => m.training_loss(f, images, gt),
            Detector::TwoStage(m) => m.training_loss(f, images, gt),
        }
    }

    pub fn detect(&self, store: &mut ParamStore, input: &Array4<f64>) -> Result<DetectionResult> {
        match self {
            Detector::OneStage(m) => m.detect(store, input),
            Detector::TwoStage(m) => m.detect(store, input),
        }
    }

    pub fn infer_detect(&self, ctx: &InferCtx, input: &Array4<f32>) -> Result<DetectionResult> {
        match self {
            Detector::OneStage(m) => Ok(m.infer_detect(ctx, input)),
            Detector::TwoStage(m) => m.infer_detect(ctx, input),
        }
    }

    /// Model-only forward at benchmark precision (no postprocessing).
    pub fn infer_forward_only(&self, ctx: &InferCtx, input: &Array4<f32>) -> Result<()> {
        match self {
            Detector::OneStage(m) => {
                let _ = m.infer_raw(ctx, input);
            }
            Detector::TwoStage(m) => {
                let _ = m.infer_raw(ctx, input)?;
            }
        }
        Ok(())
    }
}

/// Evaluation over a dataset: resize-longer-side preprocessing, exact
/// eval-mode detection, boxes mapped back to source coordinates, and the
/// AP metrics. Errors on an empty dataset rather than reporting 0.
pub struct EvalOutput {
    pub ap: ApResult,
    /// Per-image detections in source-image coordinates.
    pub detections: Vec<DetectionResult>,
    pub ground_truths: Vec<ImageGroundTruth>,
}

pub fn evaluate_dataset(
    detector: &Detector,
    store: &mut ParamStore,
    dataset: &dyn crate::datapipe::Dataset,
    norm: &crate::datapipe::NormalizeSpec,
) -> Result<EvalOutput> {
    if dataset.is_empty() {
        return Err(DetError::Data(
            "evaluation dataset is empty; refusing to report a metric".into(),
        ));
    }
    let resolution = detector.config().resolution;
    let mut detections = Vec::with_capacity(dataset.len());
    let mut ground_truths = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let sample = dataset.get(i)?;
        sample.validate()?;
        let normalized = crate::datapipe::normalize_image(&sample.image, norm);
        let (padded, scale) = crate::datapipe::resize_longer_pad(&normalized, resolution);
        let input = crate::datapipe::image_to_input(&padded);
        let mut r = detector.detect(store, &input)?;
        for b in &mut r.boxes {
            for v in b.iter_mut() {
                *v /= scale;
            }
        }
        detections.push(r);
        ground_truths.push(ImageGroundTruth {
            boxes: sample.boxes.clone(),
            class_ids: sample.class_ids.clone(),
        });
    }
    let ap = coco_ap(&detections, &ground_truths, dataset.num_classes());
    Ok(EvalOutput {
        ap,
        detections,
        ground_truths,
    })
}

/// Like [`evaluate_dataset`] but on the benchmark-precision engine; used
/// by sweeps where many configurations are scored.
pub fn evaluate_dataset_fast(
    detector: &Detector,
    ctx: &InferCtx,
    dataset: &dyn crate::datapipe::Dataset,
    norm: &crate::datapipe::NormalizeSpec,
) -> Result<EvalOutput> {
    if dataset.is_empty() {
        return Err(DetError::Data(
            "evaluation dataset is empty; refusing to report a metric".into(),
        ));
    }
    let resolution = detector.config().resolution;
    let mut detections = Vec::with_capacity(dataset.len());
    let mut ground_truths = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let sample = dataset.get(i)?;
        let normalized = crate::datapipe::normalize_image(&sample.image, norm);
        let (padded, scale) = crate::datapipe::resize_longer_pad(&normalized, resolution);
        let input = ctx.cast_input(&crate::datapipe::image_to_input(&padded));
        let mut r = detector.infer_detect(ctx, &input)?;
        for b in &mut r.boxes {
            for v in b.iter_mut() {
                *v /= scale;
            }
        }
        detections.push(r);
        ground_truths.push(ImageGroundTruth {
            boxes: sample.boxes.clone(),
            class_ids: sample.class_ids.clone(),
        });
    }
    let ap = coco_ap(&detections, &ground_truths, dataset.num_classes());
    Ok(EvalOutput {
        ap,
        detections,
        ground_truths,
    })
}

/// Convert a preprocessed sample batch into the ground-truth structures the
/// training losses consume.
pub fn gt_from_samples(samples: &[crate::datapipe::Sample]) -> Vec<GtInstances> {
    samples
        .iter()
        .map(|s| GtInstances {
            boxes: s.boxes.clone(),
            class_ids: s.class_ids.clone(),
            masks: s.masks.clone(),
        })
        .collect()
}

/// NCHW batch from normalized samples (helper re-exported for the train
/// loop and tests).
pub fn batch_from_samples(samples: &[crate::datapipe::Sample]) -> Array4<f64> {
    crate::datapipe::collate(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::StemKind;
    use crate::layers::Activation;
    use ndarray::Array3;

    fn tiny_config(family: Family) -> DetectorConfig {
        let mut c = DetectorConfig::new(family, 2, 256);
        c.width_mult = 0.0625;
        c.backbone = BackboneSpec {
            width_mult: 0.0625,
            ..Default::default()
        };
        c
    }

    fn toy_gt(res: f64) -> GtInstances {
        GtInstances {
            boxes: BoxSet::from_rows(&[[res * 0.2, res * 0.2, res * 0.55, res * 0.5]]).unwrap(),
            class_ids: vec![1],
            masks: None,
        }
    }

    #[test]
    fn config_validation_rules() {
        let mut c = tiny_config(Family::RetinanetRs);
        c.resolution = 600;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("128"), "{err}");

        let mut c = tiny_config(Family::RetinanetRs);
        c.head_variant = HeadVariant::Heavy;
        assert!(c.validate().is_err());

        let mut c = tiny_config(Family::RcnnRs);
        c.head_variant = HeadVariant::Heavy;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn one_stage_loss_is_finite_and_backprops() {
        let mut store = ParamStore::new();
        let model = RetinaNetModel::new(&mut store, 7, tiny_config(Family::RetinanetRs)).unwrap();
        let images = Array4::from_elem((1, 3, 256, 256), 0.1);
        let gt = vec![toy_gt(256.0)];
        let mut f = Forward::new(&mut store, Mode::Train { step: 0, seed: 7 });
        let out = model.training_loss(&mut f, &images, &gt).unwrap();
        let total = out.losses.total_value(&f.tape);
        assert!(total.is_finite() && total > 0.0);
        assert!(out.losses.value(&f.tape, "cls").unwrap() > 0.0);
        // gradients reach the stem
        let grads = f.tape.backward(out.losses.total);
        let stem_w = f
            .store
            .find("backbone.stem.conv1.conv.weight")
            .and_then(|p| f.param_node(p))
            .unwrap();
        let g = grads.get(stem_w).expect("stem gradient");
        assert!(g.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn two_stage_loss_components_and_traces() {
        let mut store = ParamStore::new();
        let mut cfg = tiny_config(Family::RcnnRs);
        cfg.with_masks = true;
        let model = CascadeModel::new(&mut store, 9, cfg).unwrap();
        let images = Array4::from_elem((1, 3, 256, 256), 0.05);
        let mut gt = toy_gt(256.0);
        let mut mask = Array2::<u8>::zeros((256, 256));
        mask.slice_mut(ndarray::s![51..141, 51..128]).fill(1);
        gt.masks = Some(vec![mask]);
        let mut f = Forward::new(&mut store, Mode::Train { step: 3, seed: 9 });
        let out = model.training_loss(&mut f, &images, &[gt]).unwrap();
        assert!(out.losses.total_value(&f.tape).is_finite());
        // regular config: exactly 2 stages matched at their configured
        // thresholds 0.6 and 0.7
        assert_eq!(out.stage_traces.len(), 2);
        assert_eq!(out.stage_traces[0].matched_threshold, 0.6);
        assert_eq!(out.stage_traces[1].matched_threshold, 0.7);
        for t in &out.stage_traces {
            assert_eq!(t.matched_threshold, t.configured_threshold);
        }
        let names: Vec<&str> = out.losses.components.iter().map(|(n, _)| *n).collect();
        assert!(names.contains(&"rpn_obj"));
        assert!(names.contains(&"stage2_cls"));
    }

    #[test]
    fn detect_runs_on_eval_path() {
        let mut store = ParamStore::new();
        let model = RetinaNetModel::new(&mut store, 3, tiny_config(Family::RetinanetRs)).unwrap();
        let input = Array4::from_elem((1, 3, 256, 256), 0.2);
        let r = model.detect(&mut store, &input).unwrap();
        // fresh random weights: no strong detections expected, but the path
        // must produce a valid, sorted result
        for w in r.scores.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn fast_inference_matches_exact_path_closely() {
        let mut store = ParamStore::new();
        let model = RetinaNetModel::new(&mut store, 5, tiny_config(Family::RetinanetRs)).unwrap();
        let input64 = Array4::from_shape_fn((1, 3, 256, 256), |(_, c, y, x)| {
            ((c + y + x) % 13) as f64 * 0.05
        });
        // exact path logits
        let mut f = Forward::new(&mut store, Mode::Eval);
        let x = f.tape.constant(input64.clone().into_dyn());
        let maps = model.backbone.forward(&mut f, x);
        let pyr = model.fpn.forward(&mut f, &maps).unwrap();
        let preds = model.head.forward(&mut f, &pyr);
        let cls_flat = model.flatten(&mut f, &preds.cls);
        let exact = f
            .tape
            .value(cls_flat)
            .to_shape((model.anchors.total_anchors(), 2))
            .unwrap()
            .to_owned();
        drop(f);
        // f32 path
        let ctx = InferCtx::new(&store, false);
        let (fast, _) = model.infer_raw(&ctx, &ctx.cast_input(&input64));
        let mut max_diff = 0.0f64;
        for (a, b) in exact.iter().zip(fast.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
        assert!(max_diff < 1e-2, "f32 path diverged: {max_diff}");

        // half emulation runs and quantizes
        let ctx_h = InferCtx::new(&store, true);
        let (half_out, _) = model.infer_raw(&ctx_h, &ctx_h.cast_input(&input64));
        assert_eq!(half_out.dim(), fast.dim());
    }

    #[test]
    fn vanilla_relu_ablation_builds_and_uses_relu_graph() {
        let mut store = ParamStore::new();
        let mut cfg = tiny_config(Family::RetinanetRs);
        cfg.backbone.stem = StemKind::Vanilla;
        cfg.backbone.activation = Activation::Relu;
        cfg.backbone.use_se = false;
        let model = RetinaNetModel::new(&mut store, 2, cfg).unwrap();
        let mut f = Forward::new(&mut store, Mode::Eval);
        let x = f.tape.constant(Array4::from_elem((1, 3, 256, 256), 0.1).into_dyn());
        let maps = model.backbone.forward(&mut f, x);
        let pyr = model.fpn.forward(&mut f, &maps).unwrap();
        let _ = model.head.forward(&mut f, &pyr);
        assert_eq!(f.tape.count_ops("silu"), 0);
        assert!(f.tape.count_ops("relu") > 0);
    }

    #[test]
    fn gt_helpers_roundtrip() {
        let image = Array3::from_elem((64, 64, 3), 1.0);
        let s = crate::datapipe::Sample {
            image,
            boxes: BoxSet::from_rows(&[[1.0, 2.0, 11.0, 12.0]]).unwrap(),
            class_ids: vec![0],
            masks: None,
        };
        let gt = gt_from_samples(&[s.clone()]);
        assert_eq!(gt[0].class_ids, vec![0]);
        let batch = batch_from_samples(&[s]);
        assert_eq!(batch.dim(), (1, 3, 64, 64));
    }
}
