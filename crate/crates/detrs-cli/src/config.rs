//! Run configuration: one TOML file describes the model, recipe, dataset,
//! and output locations. Everything is explicit; environment variables
//! override nothing.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use detrs::backbone::{BackboneSpec, Depth, StemKind};
use detrs::datapipe::{CocoDataset, Dataset, JitterSpec, NormalizeSpec, VecDataset};
use detrs::detector::{AnchorConfig, DetectorConfig, HeadVariant, MatchThresholds};
use detrs::layers::Activation;
use detrs::losses::FocalParams;
use detrs::postprocess::bench::BenchSpec;
use detrs::postprocess::AssembleParams;
use detrs::scaling::{rcnn_rs_config, retinanet_rs_config, Family, ScaleConfig};
use detrs::schedule::{ScheduleKind, StepTailSpec, TrainRecipe};
use detrs::DetError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    #[serde(default)]
    pub anchors: AnchorSection,
    #[serde(default)]
    pub focal: FocalSection,
    #[serde(default)]
    pub train: TrainSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub assemble: AssembleSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    /// Published scale label; sets resolution and depth from the tables.
    #[serde(default)]
    pub scale: Option<u32>,
    /// Explicit resolution (overrides `scale`); must be divisible by 128.
    #[serde(default)]
    pub resolution: Option<usize>,
    /// Explicit backbone depth (overrides `scale`).
    #[serde(default)]
    pub backbone_depth: Option<usize>,
    pub num_classes: usize,
    #[serde(default = "default_width_mult")]
    pub width_mult: f64,
    #[serde(default = "default_head_variant")]
    pub head_variant: HeadVariant,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_stem")]
    pub stem: StemKind,
    #[serde(default = "default_true")]
    pub use_se: bool,
    #[serde(default = "default_se_ratio")]
    pub se_ratio: f64,
    #[serde(default)]
    pub with_masks: bool,
    #[serde(default)]
    pub cascade_class_ensemble: bool,
    #[serde(default = "default_true")]
    pub fpn_norm: bool,
}

fn default_width_mult() -> f64 {
    1.0
}
fn default_head_variant() -> HeadVariant {
    HeadVariant::Regular
}
fn default_activation() -> Activation {
    Activation::Silu
}
fn default_stem() -> StemKind {
    StemKind::Deep
}
fn default_true() -> bool {
    true
}
fn default_se_ratio() -> f64 {
    0.25
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSection {
    pub base_scale: f64,
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorSection {
    fn default() -> Self {
        let a = AnchorConfig::default();
        AnchorSection {
            base_scale: a.base_scale,
            aspect_ratios: a.aspect_ratios,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalSection {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalSection {
    fn default() -> Self {
        let f = FocalParams::default();
        FocalSection {
            alpha: f.alpha,
            gamma: f.gamma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub step_tail: Option<StepTailSpec>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub stochastic_depth: f64,
    /// Jitter scale range `[lo, hi]`.
    pub jitter: [f64; 2],
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_workers() -> usize {
    1
}
fn default_checkpoint_every() -> usize {
    10
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 50,
            batch_size: 8,
            base_lr: 0.28 * 8.0 / 256.0,
            warmup_epochs: 5.0,
            schedule: ScheduleKind::StepTail,
            step_tail: None,
            weight_decay: 4e-5,
            momentum: 0.9,
            stochastic_depth: 0.2,
            jitter: [0.1, 2.0],
            workers: 1,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase", tag = "kind")]
pub enum DatasetSection {
    /// Seeded synthetic shapes.
    Synth { count: usize },
    /// COCO-style annotations plus an image directory.
    Coco {
        annotations: PathBuf,
        image_root: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssembleSection {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_detections: usize,
}

impl Default for AssembleSection {
    fn default() -> Self {
        let a = AssembleParams::default();
        AssembleSection {
            score_thresh: a.score_thresh,
            nms_thresh: a.nms_thresh,
            max_detections: a.max_detections,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub repeats: usize,
    pub warmups: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            repeats: 30,
            warmups: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase", tag = "kind")]
pub enum SweepSection {
    /// Depth x resolution latency grid.
    Bench {
        depths: Vec<usize>,
        resolutions: Vec<usize>,
    },
    /// Jitter-range x epochs training grid.
    Train {
        jitter_ranges: Vec<[f64; 2]>,
        epochs_axis: Vec<usize>,
        /// Optional per-cell step cap for desk-scale runs.
        #[serde(default)]
        max_steps: Option<u64>,
    },
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&raw).map_err(|e| {
            anyhow::Error::from(DetError::InvalidConfig {
                field: path.display().to_string(),
                message: e.to_string(),
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolve (resolution, depth) from the scale label or explicit fields.
    pub fn scale_config(&self) -> Result<ScaleConfig, DetError> {
        let table_row = match (self.model.scale, self.model.family) {
            (Some(s), Family::RetinanetRs) => Some(retinanet_rs_config(s)?),
            (Some(s), Family::RcnnRs) => Some(rcnn_rs_config(s)?),
            (None, _) => None,
        };
        let resolution = self
            .model
            .resolution
            .or(table_row.map(|r| r.resolution))
            .ok_or_else(|| DetError::config("model", "set either `scale` or `resolution`"))?;
        let backbone_depth = self
            .model
            .backbone_depth
            .or(table_row.map(|r| r.backbone_depth))
            .ok_or_else(|| DetError::config("model", "set either `scale` or `backbone_depth`"))?;
        Ok(ScaleConfig {
            family: self.model.family,
            scale_label: self.model.scale,
            resolution,
            backbone_depth,
        })
    }

    pub fn detector_config(&self) -> Result<DetectorConfig, DetError> {
        let sc = self.scale_config()?;
        let mut cfg = DetectorConfig::new(self.model.family, self.model.num_classes, sc.resolution);
        cfg.width_mult = self.model.width_mult;
        cfg.backbone = BackboneSpec {
            depth: Depth::from_layers(sc.backbone_depth)?,
            se_ratio: self.model.se_ratio,
            use_se: self.model.use_se,
            stochastic_depth_init: self.train.stochastic_depth,
            activation: self.model.activation,
            stem: self.model.stem,
            width_mult: self.model.width_mult,
            per_sample_drop: true,
        };
        cfg.fpn_norm = self.model.fpn_norm;
        cfg.head_variant = self.model.head_variant;
        cfg.anchor = AnchorConfig {
            base_scale: self.anchors.base_scale,
            aspect_ratios: self.anchors.aspect_ratios.clone(),
        };
        cfg.focal = FocalParams {
            alpha: self.focal.alpha,
            gamma: self.focal.gamma,
        };
        cfg.one_stage_match = MatchThresholds {
            positive: 0.5,
            negative: 0.4,
        };
        cfg.assemble = AssembleParams {
            score_thresh: self.assemble.score_thresh,
            nms_thresh: self.assemble.nms_thresh,
            max_detections: self.assemble.max_detections,
        };
        cfg.with_masks = self.model.with_masks;
        cfg.cascade_class_ensemble = self.model.cascade_class_ensemble;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn recipe(&self) -> Result<TrainRecipe, DetError> {
        let sc = self.scale_config()?;
        let t = &self.train;
        let recipe = TrainRecipe {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            warmup_epochs: t.warmup_epochs,
            schedule: t.schedule,
            step_tail: t.step_tail.unwrap_or_default(),
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            sd_init: t.stochastic_depth,
            jitter: JitterSpec::new(sc.resolution, t.jitter[0], t.jitter[1])?,
            workers: t.workers,
            checkpoint_every: t.checkpoint_every,
        };
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn bench_spec(&self) -> BenchSpec {
        BenchSpec {
            repeats: self.bench.repeats,
            warmups: self.bench.warmups,
        }
    }

    pub fn normalize(&self) -> NormalizeSpec {
        NormalizeSpec::default()
    }

    pub fn build_dataset(&self) -> anyhow::Result<Box<dyn Dataset>> {
        match &self.dataset {
            DatasetSection::Synth { count } => {
                let ds: VecDataset = detrs::datapipe::synth_shapes(*count, self.seed);
                Ok(Box::new(ds))
            }
            DatasetSection::Coco {
                annotations,
                image_root,
            } => {
                let ds: CocoDataset = detrs::datapipe::load_coco_json(annotations, image_root)?;
                Ok(Box::new(ds))
            }
        }
    }

    /// Cross-field validation with dotted field paths in errors.
    pub fn validate(&self) -> Result<(), DetError> {
        if let DatasetSection::Synth { count } = &self.dataset {
            if *count == 0 {
                return Err(DetError::config("dataset.count", "need at least one image"));
            }
        }
        // detector_config and recipe run the model- and recipe-level rules
        self.detector_config()?;
        self.recipe()?;
        let br = BenchSpec {
            repeats: self.bench.repeats,
            warmups: self.bench.warmups,
        };
        br.validate()?;
        if let Some(sweep) = &self.sweep {
            match sweep {
                SweepSection::Bench {
                    depths,
                    resolutions,
                } => {
                    detrs::scaling::sweep_grid(depths, resolutions)?;
                }
                SweepSection::Train {
                    jitter_ranges,
                    epochs_axis,
                    ..
                } => {
                    if jitter_ranges.is_empty() || epochs_axis.is_empty() {
                        return Err(DetError::config("sweep", "empty sweep axes"));
                    }
                    for (i, r) in jitter_ranges.iter().enumerate() {
                        if !(r[0] > 0.0 && r[0] <= r[1]) {
                            return Err(DetError::config(
                                format!("sweep.jitter_ranges[{i}]"),
                                "need 0 < lo <= hi",
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
