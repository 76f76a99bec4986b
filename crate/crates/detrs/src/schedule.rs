//! Optimizer, learning-rate schedules, and the desk-scale training loop
//! with deterministic checkpoint/resume.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;

use crate::datapipe::{load_epoch, Dataset, JitterSpec, NormalizeSpec};
use crate::detector::{batch_from_samples, gt_from_samples, Detector};
use crate::error::{DetError, Result};
use crate::tensor::{Forward, Mode, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Constant at the base rate, dropping to 0.1x over the last
    /// `first_drop_last_epochs` and 0.01x over the last
    /// `second_drop_last_epochs`.
    StepTail,
    /// Half-cosine decay from the base rate to zero.
    Cosine,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct StepTailSpec {
    pub first_drop_last_epochs: f64,
    pub second_drop_last_epochs: f64,
    pub first_factor: f64,
    pub second_factor: f64,
}

impl Default for StepTailSpec {
    fn default() -> Self {
        StepTailSpec {
            first_drop_last_epochs: 25.0,
            second_drop_last_epochs: 10.0,
            first_factor: 0.1,
            second_factor: 0.01,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub schedule: ScheduleKind,
    pub step_tail: StepTailSpec,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Initial stochastic-depth drop rate (applied at model build).
    pub sd_init: f64,
    pub jitter: JitterSpec,
    /// Concurrent augmentation worker streams.
    pub workers: usize,
    /// Checkpoint every this many epochs (and at the end).
    pub checkpoint_every: usize,
}

impl TrainRecipe {
    /// The published large-scale recipe: batch 256 for 600 epochs, SGD with
    /// momentum 0.9 at base rate 0.28, 5 warmup epochs, step drops over the
    /// last 25 and 10 epochs, weight decay 4e-5, jitter 0.1..2.0.
    pub fn reference(target_size: usize) -> Self {
        TrainRecipe {
            epochs: 600,
            batch_size: 256,
            base_lr: 0.28,
            warmup_epochs: 5.0,
            schedule: ScheduleKind::StepTail,
            step_tail: StepTailSpec::default(),
            weight_decay: 4e-5,
            momentum: 0.9,
            sd_init: 0.2,
            jitter: JitterSpec {
                target_size,
                scale_range: (0.1, 2.0),
            },
            workers: 1,
            checkpoint_every: 25,
        }
    }

    /// Desk-scale default: batch 8 with the base rate rescaled linearly by
    /// batch/256.
    pub fn desk(target_size: usize) -> Self {
        let mut r = Self::reference(target_size);
        r.batch_size = 8;
        r.base_lr = 0.28 * 8.0 / 256.0;
        r.epochs = 50;
        r.step_tail.first_drop_last_epochs = 10.0;
        r.step_tail.second_drop_last_epochs = 4.0;
        r.checkpoint_every = 10;
        r
    }

    /// Cosine fine-tuning variant: base rate 0.08, no warmup.
    pub fn cosine_finetune(target_size: usize, epochs: usize) -> Self {
        let mut r = Self::reference(target_size);
        r.schedule = ScheduleKind::Cosine;
        r.base_lr = 0.08;
        r.warmup_epochs = 0.0;
        r.epochs = epochs;
        r
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.warmup_epochs >= self.epochs as f64 {
            return Err(DetError::config(
                "recipe.warmup_epochs",
                format!("warmup {} must be below epochs {}", self.warmup_epochs, self.epochs),
            ));
        }
        if self.step_tail.second_factor >= self.step_tail.first_factor {
            return Err(DetError::config(
                "recipe.step_tail",
                "drop factors must be decreasing",
            ));
        }
        if self.step_tail.second_drop_last_epochs > self.step_tail.first_drop_last_epochs {
            return Err(DetError::config(
                "recipe.step_tail",
                "the second drop must come after the first",
            ));
        }
        if self.batch_size == 0 {
            return Err(DetError::config("recipe.batch_size", "batch size must be positive"));
        }
        self.jitter.validate()?;
        Ok(())
    }
}

/// Learning rate at a (fractional) epoch position.
pub fn lr_at(recipe: &TrainRecipe, epoch: f64) -> f64 {
    let e = recipe.epochs as f64;
    let w = recipe.warmup_epochs;
    let schedule_value = |epoch: f64| -> f64 {
        match recipe.schedule {
            ScheduleKind::StepTail => {
                let t1 = e - recipe.step_tail.first_drop_last_epochs;
                let t2 = e - recipe.step_tail.second_drop_last_epochs;
                if epoch < t1 {
                    recipe.base_lr
                } else if epoch < t2 {
                    recipe.base_lr * recipe.step_tail.first_factor
                } else {
                    recipe.base_lr * recipe.step_tail.second_factor
                }
            }
            ScheduleKind::Cosine => {
                let t = ((epoch - w) / (e - w)).clamp(0.0, 1.0);
                recipe.base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
            }
        }
    };
    if w > 0.0 && epoch < w {
        // linear ramp from 0 to the schedule value at the warmup boundary
        schedule_value(w) * (epoch / w)
    } else {
        schedule_value(epoch)
    }
}

/// One SGD update: `g <- g + wd*w` (decay-exempt parameters skip the decay
/// term), `m <- momentum*m + g`, `w <- w - lr*m`. Gradients must be finite.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &[(ParamId, ArrayD<f64>)],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (id, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(DetError::NonFinite {
                what: format!("gradient of `{}`", store.entry(*id).name),
            });
        }
        let entry = store.entry_mut(*id);
        debug_assert!(entry.trainable);
        let decay = if entry.decay_exempt { 0.0 } else { weight_decay };
        ndarray::Zip::from(&mut entry.momentum)
            .and(&entry.value)
            .and(g)
            .for_each(|m, w, gv| {
                *m = momentum * *m + (gv + decay * *w);
            });
        ndarray::Zip::from(&mut entry.value)
            .and(&entry.momentum)
            .for_each(|w, m| {
                *w -= lr * *m;
            });
    }
    Ok(())
}

/// Durable training state: parameters (with momentum), counters and the run
/// seed. The seed plus counters fully determine every random stream, so a
/// reloaded checkpoint continues bit-identically.
pub struct TrainState {
    pub store: ParamStore,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct StateFile {
    step: u64,
    epoch: u64,
    seed: u64,
}

/// Write `weights.bin` + `state.json` + `recipe.json` into `dir`.
pub fn save_checkpoint(dir: &Path, state: &TrainState, recipe: &TrainRecipe) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    state.store.save(&dir.join("weights.bin"))?;
    let sf = StateFile {
        step: state.step,
        epoch: state.epoch,
        seed: state.seed,
    };
    std::fs::write(dir.join("state.json"), serde_json::to_string_pretty(&sf)?)?;
    std::fs::write(dir.join("recipe.json"), serde_json::to_string_pretty(recipe)?)?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, TrainRecipe)> {
    let store = ParamStore::load(&dir.join("weights.bin"))?;
    let sf: StateFile = serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)?;
    let recipe: TrainRecipe =
        serde_json::from_str(&std::fs::read_to_string(dir.join("recipe.json"))?)?;
    Ok((
        TrainState {
            store,
            step: sf.step,
            epoch: sf.epoch,
            seed: sf.seed,
        },
        recipe,
    ))
}

pub struct TrainSummary {
    pub steps_run: u64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Options beyond the recipe: output locations and an optional step cap for
/// smoke runs.
#[derive(Default)]
pub struct TrainOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub max_steps: Option<u64>,
}

/// Run the training loop. Metrics are emitted as one JSON object per step
/// onto `metrics`; loss divergence (total above 1e4) aborts with a state
/// dump into the checkpoint directory.
pub fn train(
    detector: &Detector,
    state: &mut TrainState,
    recipe: &TrainRecipe,
    dataset: &dyn Dataset,
    norm: &NormalizeSpec,
    metrics: &mut dyn Write,
    options: &TrainOptions,
) -> Result<TrainSummary> {
    recipe.validate()?;
    if dataset.is_empty() {
        return Err(DetError::Data("training dataset is empty".into()));
    }
    let steps_per_epoch = dataset.len().div_ceil(recipe.batch_size) as u64;
    let mut summary = TrainSummary {
        steps_run: 0,
        initial_loss: None,
        final_loss: None,
    };
    'epochs: while state.epoch < recipe.epochs as u64 {
        let samples = load_epoch(
            dataset,
            &recipe.jitter,
            norm,
            state.seed,
            state.epoch,
            recipe.workers,
        )?;
        for chunk in samples.chunks(recipe.batch_size) {
            if let Some(cap) = options.max_steps {
                if summary.steps_run >= cap {
                    break 'epochs;
                }
            }
            let images = batch_from_samples(chunk);
            let gt = gt_from_samples(chunk);
            let epoch_pos = state.step as f64 / steps_per_epoch as f64;
            let lr = lr_at(recipe, epoch_pos);

            let mut f = Forward::new(
                &mut state.store,
                Mode::Train {
                    step: state.step,
                    seed: state.seed,
                },
            );
            let out = detector.training_loss(&mut f, &images, &gt)?;
            let total = out.losses.total_value(&f.tape);
            if !total.is_finite() || total > 1e4 {
                drop(f);
                if let Some(dir) = &options.checkpoint_dir {
                    save_checkpoint(&dir.join("diverged"), state, recipe)?;
                }
                return Err(DetError::Diverged {
                    step: state.step,
                    loss: total,
                });
            }
            let grads_by_node = f.tape.backward(out.losses.total);
            let mut grads: Vec<(ParamId, ArrayD<f64>)> = Vec::new();
            for pid in f.store.ids().collect::<Vec<_>>() {
                if let Some(node) = f.param_node(pid) {
                    if let Some(g) = grads_by_node.get(node) {
                        grads.push((pid, g.clone()));
                    }
                }
            }
            // metrics record: step counters, rate, loss components
            let mut record = serde_json::Map::new();
            record.insert("step".into(), state.step.into());
            record.insert("epoch".into(), serde_json::json!(epoch_pos));
            record.insert("lr".into(), serde_json::json!(lr));
            record.insert("total".into(), serde_json::json!(total));
            for (name, id) in &out.losses.components {
                record.insert((*name).into(), serde_json::json!(f.tape.scalar_value(*id)));
            }
            drop(f);
            sgd_step(
                &mut state.store,
                &grads,
                lr,
                recipe.momentum,
                recipe.weight_decay,
            )?;
            writeln!(metrics, "{}", serde_json::Value::Object(record))?;

            if summary.initial_loss.is_none() {
                summary.initial_loss = Some(total);
            }
            summary.final_loss = Some(total);
            summary.steps_run += 1;
            state.step += 1;
        }
        state.epoch += 1;
        if let Some(dir) = &options.checkpoint_dir {
            if recipe.checkpoint_every > 0 && state.epoch % recipe.checkpoint_every as u64 == 0 {
                save_checkpoint(&dir.join(format!("epoch{:04}", state.epoch)), state, recipe)?;
            }
        }
    }
    if let Some(dir) = &options.checkpoint_dir {
        save_checkpoint(&dir.join("final"), state, recipe)?;
    }
    Ok(summary)
}
