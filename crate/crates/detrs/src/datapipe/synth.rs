//! Seeded synthetic dataset: colored rectangles and ellipses on a tinted
//! background, with exact boxes and masks. Small enough to overfit on a
//! desk, sized so the anchor grid covers the object scales.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::geometry::BoxSet;
use crate::rng;

use super::{Sample, VecDataset};

/// Edge length of generated images.
pub const SYNTH_SIZE: usize = 512;
/// Class vocabulary of the generator.
pub const SYNTH_CLASSES: [&str; 2] = ["rectangle", "ellipse"];

const MIN_EDGE: f64 = 48.0;
const MAX_EDGE: f64 = 176.0;

/// Generate `n` images seeded by `(seed, image index)`; two calls with the
/// same arguments produce identical datasets.
pub fn synth_shapes(n: usize, seed: u64) -> VecDataset {
    let samples = crate::par::map_collect(n, |i| synth_image(seed, i as u64));
    VecDataset {
        samples,
        classes: SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
    }
}

fn synth_image(seed: u64, index: u64) -> Sample {
    let mut r = rng::rng_for(&[seed, index, 0x517e]);
    let s = SYNTH_SIZE;
    // light tinted background
    let bg: [f64; 3] = [
        r.gen_range(160.0..220.0),
        r.gen_range(160.0..220.0),
        r.gen_range(160.0..220.0),
    ];
    let mut image = Array3::from_shape_fn((s, s, 3), |(_, _, c)| bg[c]);

    let count = r.gen_range(2..=4);
    let mut rows: Vec<[f64; 4]> = Vec::new();
    let mut class_ids = Vec::new();
    let mut masks = Vec::new();
    let mut attempts = 0;
    while rows.len() < count && attempts < 50 {
        attempts += 1;
        let class = r.gen_range(0..2usize);
        let edge = r.gen_range(MIN_EDGE..MAX_EDGE);
        let aspect: f64 = r.gen_range(0.7..1.4);
        let h = (edge * aspect.sqrt()).min(s as f64 - 2.0);
        let w = (edge / aspect.sqrt()).min(s as f64 - 2.0);
        let y0 = r.gen_range(1.0..(s as f64 - h - 1.0));
        let x0 = r.gen_range(1.0..(s as f64 - w - 1.0));
        let candidate = [y0, x0, y0 + h, x0 + w];
        let overlaps = rows
            .iter()
            .any(|b| crate::geometry::iou_pair(b, &candidate) > 0.25);
        if overlaps {
            continue;
        }
        // saturated class-correlated color with noise
        let color: [f64; 3] = if class == 0 {
            [r.gen_range(170.0..255.0), r.gen_range(0.0..70.0), r.gen_range(0.0..70.0)]
        } else {
            [r.gen_range(0.0..70.0), r.gen_range(0.0..70.0), r.gen_range(170.0..255.0)]
        };
        let mask = draw_shape(&mut image, class, &candidate, &color);
        // tight box of the drawn mask keeps boxes exact for ellipses too
        if let Some(tight) = tight_box(&mask) {
            rows.push(tight);
            class_ids.push(class);
            masks.push(mask);
        }
    }
    Sample {
        image,
        boxes: BoxSet::from_rows(&rows).expect("synthetic boxes valid"),
        class_ids,
        masks: Some(masks),
    }
}

fn draw_shape(image: &mut Array3<f64>, class: usize, b: &[f64; 4], color: &[f64; 3]) -> Array2<u8> {
    let s = SYNTH_SIZE;
    let mut mask = Array2::<u8>::zeros((s, s));
    let (cy, cx) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
    let (ry, rx) = ((b[2] - b[0]) / 2.0, (b[3] - b[1]) / 2.0);
    let y_lo = b[0].floor().max(0.0) as usize;
    let y_hi = (b[2].ceil() as usize).min(s);
    let x_lo = b[1].floor().max(0.0) as usize;
    let x_hi = (b[3].ceil() as usize).min(s);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let inside = match class {
                0 => {
                    (y as f64 + 0.5) >= b[0]
                        && (y as f64 + 0.5) < b[2]
                        && (x as f64 + 0.5) >= b[1]
                        && (x as f64 + 0.5) < b[3]
                }
                _ => {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    dy * dy + dx * dx <= 1.0
                }
            };
            if inside {
                mask[(y, x)] = 1;
                for c in 0..3 {
                    image[(y, x, c)] = color[c];
                }
            }
        }
    }
    mask
}

fn tight_box(mask: &Array2<u8>) -> Option<[f64; 4]> {
    let (h, w) = mask.dim();
    let mut y0 = h;
    let mut y1 = 0;
    let mut x0 = w;
    let mut x1 = 0;
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] != 0 {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 > y1 {
        return None;
    }
    Some([y0 as f64, x0 as f64, (y1 + 1) as f64, (x1 + 1) as f64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::Dataset;

    #[test]
    fn generator_is_deterministic() {
        let a = synth_shapes(8, 7);
        let b = synth_shapes(8, 7);
        assert_eq!(a.len(), 8);
        for i in 0..8 {
            let (sa, sb) = (a.get(i).unwrap(), b.get(i).unwrap());
            assert_eq!(sa.image, sb.image);
            assert_eq!(sa.boxes.coords(), sb.boxes.coords());
            assert_eq!(sa.class_ids, sb.class_ids);
        }
        let c = synth_shapes(8, 8);
        assert_ne!(a.get(0).unwrap().image, c.get(0).unwrap().image);
    }

    #[test]
    fn samples_validate_and_boxes_are_tight() {
        let ds = synth_shapes(4, 3);
        for i in 0..4 {
            let s = ds.get(i).unwrap();
            s.validate().unwrap();
            assert!(!s.boxes.is_empty());
            let masks = s.masks.as_ref().unwrap();
            for (bi, m) in masks.iter().enumerate() {
                let tight = tight_box(m).unwrap();
                let b = s.boxes.get(bi);
                for k in 0..4 {
                    assert!((tight[k] - b[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn object_sizes_sit_inside_anchor_coverage() {
        let ds = synth_shapes(16, 5);
        for i in 0..16 {
            let s = ds.get(i).unwrap();
            for bi in 0..s.boxes.len() {
                let area = s.boxes.area(bi);
                let edge = area.sqrt();
                assert!(edge >= 20.0 && edge <= 220.0, "edge {edge}");
            }
        }
    }
}
