//! Dataset ingestion and preprocessing: normalization, horizontal flip,
//! scale jitter, and the aspect-preserving resize used at eval time.
//!
//! Images are `(H, W, 3)` f64 arrays. Raw pixel values are 0..=255;
//! [`normalize_image`] maps them to the standardized range the models
//! consume. Augmentations run after normalization, so zero padding equals
//! the dataset mean.

mod coco;
mod synth;

pub use coco::{load_coco_json, CocoDataset};
pub use synth::{synth_shapes, SYNTH_CLASSES, SYNTH_SIZE};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DetError, Result};
use crate::geometry::BoxSet;
use crate::par;
use crate::rng;

/// One annotated image.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `(H, W, 3)`.
    pub image: Array3<f64>,
    pub boxes: BoxSet,
    pub class_ids: Vec<usize>,
    /// Optional per-instance binary masks at image resolution.
    pub masks: Option<Vec<Array2<u8>>>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image.dim();
        if c != 3 {
            return Err(DetError::Data(format!("expected 3 channels, got {c}")));
        }
        if self.class_ids.len() != self.boxes.len() {
            return Err(DetError::Data(format!(
                "{} class ids for {} boxes",
                self.class_ids.len(),
                self.boxes.len()
            )));
        }
        for i in 0..self.boxes.len() {
            let b = self.boxes.get(i);
            if b[0] < 0.0 || b[1] < 0.0 || b[2] > h as f64 + 1e-6 || b[3] > w as f64 + 1e-6 {
                return Err(DetError::Data(format!(
                    "box {i} {:?} outside {h}x{w} image",
                    b
                )));
            }
        }
        if let Some(masks) = &self.masks {
            if masks.len() != self.boxes.len() {
                return Err(DetError::Data(format!(
                    "{} masks for {} boxes",
                    masks.len(),
                    self.boxes.len()
                )));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> (usize, usize) {
        let (h, w, _) = self.image.dim();
        (h, w)
    }
}

/// A detection dataset with deterministic indexing.
pub trait Dataset: Send + Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn get(&self, index: usize) -> Result<Sample>;
    fn num_classes(&self) -> usize;
    fn class_names(&self) -> Vec<String>;
}

/// In-memory dataset.
pub struct VecDataset {
    pub samples: Vec<Sample>,
    pub classes: Vec<String>,
}

impl Dataset for VecDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn get(&self, index: usize) -> Result<Sample> {
        self.samples
            .get(index)
            .cloned()
            .ok_or_else(|| DetError::Data(format!("index {index} out of range")))
    }
    fn num_classes(&self) -> usize {
        self.classes.len()
    }
    fn class_names(&self) -> Vec<String> {
        self.classes.clone()
    }
}

/// Per-channel normalization constants on the 0..=1 scale.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NormalizeSpec {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormalizeSpec {
    fn default() -> Self {
        NormalizeSpec {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// `(v / 255 - mean) / std` per channel.
pub fn normalize_image(image: &Array3<f64>, spec: &NormalizeSpec) -> Array3<f64> {
    let mut out = image.clone();
    for (ci, mut plane) in out.axis_iter_mut(Axis(2)).enumerate() {
        let (m, s) = (spec.mean[ci], spec.std[ci]);
        plane.mapv_inplace(|v| (v / 255.0 - m) / s);
    }
    out
}

/// Jitter range and output size for train-time resizing.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct JitterSpec {
    pub target_size: usize,
    pub scale_range: (f64, f64),
}

impl JitterSpec {
    pub fn new(target_size: usize, lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi) {
            return Err(DetError::config(
                "jitter.scale_range",
                format!("need 0 < lo <= hi, got ({lo}, {hi})"),
            ));
        }
        Ok(JitterSpec {
            target_size,
            scale_range: (lo, hi),
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.target_size, self.scale_range.0, self.scale_range.1).map(|_| ())
    }
}

/// Bilinear resize (half-pixel centers). Same-size input is returned
/// unchanged.
pub fn resize_bilinear(image: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = image.dim();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let rows = par::map_collect(out_h, |oy| {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        let mut row = Array2::<f64>::zeros((out_w, c));
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let v = image[(y0, x0, ci)] * (1.0 - wy) * (1.0 - wx)
                    + image[(y0, x1, ci)] * (1.0 - wy) * wx
                    + image[(y1, x0, ci)] * wy * (1.0 - wx)
                    + image[(y1, x1, ci)] * wy * wx;
                row[(ox, ci)] = v;
            }
        }
        row
    });
    let mut out = Array3::<f64>::zeros((out_h, out_w, c));
    for (oy, row) in rows.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), oy).assign(&row);
    }
    out
}

/// Nearest-neighbor resize for binary masks.
pub fn resize_mask_nearest(mask: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    if (h, w) == (out_h, out_w) {
        return mask.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let iy = (((oy as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(h - 1);
        let ix = (((ox as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(w - 1);
        mask[(iy, ix)]
    })
}

/// Mirror a sample horizontally (deterministic part of
/// [`horizontal_flip`]).
pub fn flip_sample(s: &Sample) -> Sample {
    let (_, w, _) = s.image.dim();
    let mut image = s.image.clone();
    image.invert_axis(Axis(1));
    let rows: Vec<[f64; 4]> = s
        .boxes
        .to_rows()
        .into_iter()
        .map(|b| [b[0], w as f64 - b[3], b[2], w as f64 - b[1]])
        .collect();
    let masks = s.masks.as_ref().map(|ms| {
        ms.iter()
            .map(|m| {
                let mut f = m.clone();
                f.invert_axis(Axis(1));
                f
            })
            .collect()
    });
    Sample {
        image,
        boxes: BoxSet::from_rows(&rows).expect("flipped boxes stay valid"),
        class_ids: s.class_ids.clone(),
        masks,
    }
}

/// Flip with probability 0.5.
pub fn horizontal_flip(s: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    if rng.gen_bool(0.5) {
        flip_sample(s)
    } else {
        s.clone()
    }
}

/// Scale jitter: draw a scale `u` in the configured range, resize so the
/// longer side becomes `u * target`, then pad with zeros (top-left anchored)
/// or random-crop back to `target x target`. Boxes and masks are transformed
/// identically; instances whose remaining clipped area falls below 1 px^2
/// are dropped. A sample whose boxes are all cropped out is kept with empty
/// ground truth.
pub fn scale_jitter(s: &Sample, spec: &JitterSpec, rng: &mut ChaCha8Rng) -> Sample {
    let (h, w) = s.size();
    let target = spec.target_size;
    let (lo, hi) = spec.scale_range;
    let u = if (hi - lo).abs() < 1e-12 { lo } else { rng.gen_range(lo..=hi) };
    let longer = h.max(w) as f64;
    let desired = (u * target as f64).max(1.0);
    let f = desired / longer;
    let new_h = ((h as f64 * f).round() as usize).max(1);
    let new_w = ((w as f64 * f).round() as usize).max(1);
    let resized = resize_bilinear(&s.image, new_h, new_w);
    // actual per-axis factors absorb the rounding
    let fy = new_h as f64 / h as f64;
    let fx = new_w as f64 / w as f64;

    let off_y = if new_h > target { rng.gen_range(0..=(new_h - target)) } else { 0 };
    let off_x = if new_w > target { rng.gen_range(0..=(new_w - target)) } else { 0 };

    let mut canvas = Array3::<f64>::zeros((target, target, 3));
    let copy_h = new_h.min(target);
    let copy_w = new_w.min(target);
    canvas
        .slice_mut(ndarray::s![0..copy_h, 0..copy_w, ..])
        .assign(&resized.slice(ndarray::s![off_y..off_y + copy_h, off_x..off_x + copy_w, ..]));

    let mut rows = Vec::new();
    let mut class_ids = Vec::new();
    let mut kept = Vec::new();
    for i in 0..s.boxes.len() {
        let b = s.boxes.get(i);
        let t = [
            (b[0] * fy - off_y as f64).clamp(0.0, target as f64),
            (b[1] * fx - off_x as f64).clamp(0.0, target as f64),
            (b[2] * fy - off_y as f64).clamp(0.0, target as f64),
            (b[3] * fx - off_x as f64).clamp(0.0, target as f64),
        ];
        if (t[2] - t[0]) * (t[3] - t[1]) < 1.0 {
            continue;
        }
        rows.push(t);
        class_ids.push(s.class_ids[i]);
        kept.push(i);
    }
    let masks = s.masks.as_ref().map(|ms| {
        kept.iter()
            .map(|&i| {
                let rm = resize_mask_nearest(&ms[i], new_h, new_w);
                let mut cm = Array2::<u8>::zeros((target, target));
                cm.slice_mut(ndarray::s![0..copy_h, 0..copy_w])
                    .assign(&rm.slice(ndarray::s![off_y..off_y + copy_h, off_x..off_x + copy_w]));
                cm
            })
            .collect()
    });
    Sample {
        image: canvas,
        boxes: BoxSet::from_rows(&rows).expect("jittered boxes stay valid"),
        class_ids,
        masks,
    }
}

/// Resize the longer side to `target`, keep aspect ratio, zero-pad bottom
/// and right to `target x target`. Returns the applied scale so predictions
/// can be mapped back to source coordinates.
pub fn resize_longer_pad(image: &Array3<f64>, target: usize) -> (Array3<f64>, f64) {
    let (h, w, _) = image.dim();
    assert!(h > 0 && w > 0, "empty image");
    let f = target as f64 / h.max(w) as f64;
    let new_h = ((h as f64 * f).round() as usize).clamp(1, target);
    let new_w = ((w as f64 * f).round() as usize).clamp(1, target);
    let resized = resize_bilinear(image, new_h, new_w);
    let mut canvas = Array3::<f64>::zeros((target, target, 3));
    canvas
        .slice_mut(ndarray::s![0..new_h, 0..new_w, ..])
        .assign(&resized);
    (canvas, f)
}

/// HWC image to an NCHW batch of one.
pub fn image_to_input(image: &Array3<f64>) -> Array4<f64> {
    let (h, w, c) = image.dim();
    let mut out = Array4::<f64>::zeros((1, c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(0, ci, y, x)] = image[(y, x, ci)];
            }
        }
    }
    out
}

/// Stack normalized target-size samples into one NCHW batch.
pub fn collate(samples: &[Sample]) -> Array4<f64> {
    assert!(!samples.is_empty());
    let (h, w) = samples[0].size();
    let mut out = Array4::<f64>::zeros((samples.len(), 3, h, w));
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s.size(), (h, w), "collate needs equal sizes");
        for ci in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[(i, ci, y, x)] = s.image[(y, x, ci)];
                }
            }
        }
    }
    out
}

/// Produce one augmented epoch deterministically.
///
/// The epoch order is a seeded shuffle; worker `w` of `workers` owns every
/// `workers`-th slot and augments its samples with an independent generator
/// derived from `(seed, worker, epoch)`. Workers run in parallel, and the
/// merged output preserves slot order, so a given `(seed, epoch, workers)`
/// always yields the same byte-identical epoch.
pub fn load_epoch(
    dataset: &dyn Dataset,
    jitter: &JitterSpec,
    norm: &NormalizeSpec,
    seed: u64,
    epoch: u64,
    workers: usize,
) -> Result<Vec<Sample>> {
    let n = dataset.len();
    let workers = workers.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut shuffle_rng = rng::rng_for(&[seed, epoch, 0x5u64]);
        order.shuffle(&mut shuffle_rng);
    }
    let worker_outputs: Vec<Result<Vec<(usize, Sample)>>> = par::map_collect(workers, |w| {
        let mut wrng = rng::rng_for(&[seed, w as u64, epoch]);
        let mut out = Vec::new();
        let mut slot = w;
        while slot < n {
            let sample = dataset.get(order[slot])?;
            sample.validate()?;
            let normalized = Sample {
                image: normalize_image(&sample.image, norm),
                ..sample
            };
            let flipped = horizontal_flip(&normalized, &mut wrng);
            let jittered = scale_jitter(&flipped, jitter, &mut wrng);
            out.push((slot, jittered));
            slot += workers;
        }
        Ok(out)
    });
    let mut merged: Vec<Option<Sample>> = (0..n).map(|_| None).collect();
    for wo in worker_outputs {
        for (slot, s) in wo? {
            merged[slot] = Some(s);
        }
    }
    Ok(merged.into_iter().map(|s| s.unwrap()).collect())
}
