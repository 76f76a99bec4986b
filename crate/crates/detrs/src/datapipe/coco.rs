//! Loader for the documented COCO-JSON subset: `images`, `annotations` with
//! `bbox` `[x, y, w, h]` and `category_id`, optional polygon or
//! uncompressed-RLE masks, and `categories`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::Deserialize;

use crate::error::{DetError, Result};
use crate::geometry::BoxSet;

use super::{Dataset, Sample};

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    bbox: [f64; 4],
    category_id: u64,
    #[serde(default)]
    segmentation: Option<Segmentation>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Segmentation {
    /// Flattened `[x0, y0, x1, y1, ...]` rings.
    Polygons(Vec<Vec<f64>>),
    /// Uncompressed column-major run lengths starting with background.
    Rle { counts: Vec<usize>, size: [usize; 2] },
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug)]
struct Record {
    path: PathBuf,
    width: usize,
    height: usize,
    boxes: Vec<[f64; 4]>,
    classes: Vec<usize>,
    segmentations: Vec<Option<Segmentation>>,
}

/// Dataset backed by a COCO-style annotation file plus an image directory.
/// Samples iterate in ascending image-id order; image files are decoded on
/// access.
#[derive(Debug)]
pub struct CocoDataset {
    records: Vec<Record>,
    class_names: Vec<String>,
    has_masks: bool,
}

/// Parse and validate the annotation file. Every referenced image file must
/// exist under `image_root`, and every bbox must lie inside its image.
pub fn load_coco_json(annotations: &Path, image_root: &Path) -> Result<CocoDataset> {
    let raw = std::fs::read_to_string(annotations).map_err(|e| {
        DetError::Data(format!("cannot read {}: {e}", annotations.display()))
    })?;
    let file: CocoFile = serde_json::from_str(&raw).map_err(|e| {
        DetError::Data(format!("malformed COCO json {}: {e}", annotations.display()))
    })?;

    let mut cat_ids: Vec<u64> = file.categories.iter().map(|c| c.id).collect();
    cat_ids.sort_unstable();
    cat_ids.dedup();
    let cat_index: BTreeMap<u64, usize> = cat_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut class_names = vec![String::new(); cat_ids.len()];
    for c in &file.categories {
        class_names[cat_index[&c.id]] = c.name.clone();
    }

    let mut by_image: BTreeMap<u64, Record> = BTreeMap::new();
    for img in &file.images {
        let path = image_root.join(&img.file_name);
        if !path.exists() {
            return Err(DetError::Data(format!(
                "image file missing for id {}: {}",
                img.id,
                path.display()
            )));
        }
        if by_image.contains_key(&img.id) {
            return Err(DetError::Data(format!("duplicate image id {}", img.id)));
        }
        by_image.insert(
            img.id,
            Record {
                path,
                width: img.width,
                height: img.height,
                boxes: Vec::new(),
                classes: Vec::new(),
                segmentations: Vec::new(),
            },
        );
    }

    let mut has_masks = false;
    for (ai, ann) in file.annotations.into_iter().enumerate() {
        let rec = by_image.get_mut(&ann.image_id).ok_or_else(|| {
            DetError::Data(format!(
                "annotation {ai} references unknown image id {}",
                ann.image_id
            ))
        })?;
        let [x, y, w, h] = ann.bbox;
        if w <= 0.0 || h <= 0.0 {
            return Err(DetError::Data(format!(
                "annotation {ai} has degenerate bbox {:?}",
                ann.bbox
            )));
        }
        if x < 0.0 || y < 0.0 || x + w > rec.width as f64 + 1e-6 || y + h > rec.height as f64 + 1e-6
        {
            return Err(DetError::Data(format!(
                "annotation {ai} bbox {:?} outside {}x{} image",
                ann.bbox, rec.height, rec.width
            )));
        }
        let class = *cat_index.get(&ann.category_id).ok_or_else(|| {
            DetError::Data(format!(
                "annotation {ai} references unknown category {}",
                ann.category_id
            ))
        })?;
        // bbox [x, y, w, h] -> (ymin, xmin, ymax, xmax)
        rec.boxes.push([y, x, y + h, x + w]);
        rec.classes.push(class);
        has_masks |= ann.segmentation.is_some();
        rec.segmentations.push(ann.segmentation);
    }

    Ok(CocoDataset {
        records: by_image.into_values().collect(),
        class_names,
        has_masks,
    })
}

fn decode_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| DetError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = p[c] as f64;
        }
    }
    Ok(out)
}

fn rasterize(seg: &Segmentation, height: usize, width: usize) -> Result<Array2<u8>> {
    match seg {
        Segmentation::Rle { counts, size } => {
            if size[0] != height || size[1] != width {
                return Err(DetError::Data(format!(
                    "rle size {:?} does not match image {}x{}",
                    size, height, width
                )));
            }
            let total: usize = counts.iter().sum();
            if total != height * width {
                return Err(DetError::Data(format!(
                    "rle covers {total} pixels of {}",
                    height * width
                )));
            }
            let mut mask = Array2::<u8>::zeros((height, width));
            let mut pos = 0usize;
            let mut value = 0u8;
            for &run in counts {
                if value == 1 {
                    for k in pos..pos + run {
                        // column-major order
                        mask[(k % height, k / height)] = 1;
                    }
                }
                pos += run;
                value ^= 1;
            }
            Ok(mask)
        }
        Segmentation::Polygons(rings) => {
            let mut mask = Array2::<u8>::zeros((height, width));
            for ring in rings {
                if ring.len() < 6 || ring.len() % 2 != 0 {
                    return Err(DetError::Data(format!(
                        "polygon with {} coordinates",
                        ring.len()
                    )));
                }
                fill_polygon(&mut mask, ring);
            }
            Ok(mask)
        }
    }
}

/// Even-odd scanline fill at pixel centers.
fn fill_polygon(mask: &mut Array2<u8>, ring: &[f64]) {
    let (h, w) = mask.dim();
    let pts: Vec<(f64, f64)> = ring.chunks(2).map(|c| (c[0], c[1])).collect(); // (x, y)
    for row in 0..h {
        let yc = row as f64 + 0.5;
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..pts.len() {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % pts.len()];
            if (y0 <= yc && y1 > yc) || (y1 <= yc && y0 > yc) {
                xs.push(x0 + (yc - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks(2) {
            if pair.len() < 2 {
                continue;
            }
            let lo = pair[0].max(0.0).round() as usize;
            let hi = (pair[1].min(w as f64).round() as usize).min(w);
            for col in lo..hi {
                mask[(row, col)] = 1;
            }
        }
    }
}

impl Dataset for CocoDataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let rec = self
            .records
            .get(index)
            .ok_or_else(|| DetError::Data(format!("index {index} out of range")))?;
        let image = decode_image(&rec.path)?;
        let (h, w, _) = image.dim();
        if (h, w) != (rec.height, rec.width) {
            return Err(DetError::Data(format!(
                "{}: file is {h}x{w} but annotations say {}x{}",
                rec.path.display(),
                rec.height,
                rec.width
            )));
        }
        let masks = if self.has_masks {
            let mut ms = Vec::with_capacity(rec.segmentations.len());
            for seg in &rec.segmentations {
                match seg {
                    Some(s) => ms.push(rasterize(s, h, w)?),
                    None => ms.push(Array2::zeros((h, w))),
                }
            }
            Some(ms)
        } else {
            None
        };
        Ok(Sample {
            image,
            boxes: BoxSet::from_rows(&rec.boxes)?,
            class_ids: rec.classes.clone(),
            masks,
        })
    }

    fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn class_names(&self) -> Vec<String> {
        self.class_names.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, h: u32, w: u32) {
        let img = image::RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x % 256) as u8, (y % 256) as u8, 7])
        });
        img.save(path).unwrap();
    }

    fn fixture(dir: &Path, json: &str) -> PathBuf {
        let ann = dir.join("ann.json");
        std::fs::write(&ann, json).unwrap();
        ann
    }

    #[test]
    fn loads_and_converts_bbox_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 100, 120);
        let ann = fixture(
            dir.path(),
            r#"{
              "images": [{"id": 5, "file_name": "a.png", "width": 120, "height": 100}],
              "annotations": [
                {"image_id": 5, "bbox": [10, 20, 30, 40], "category_id": 9}
              ],
              "categories": [{"id": 9, "name": "thing"}]
            }"#,
        );
        let ds = load_coco_json(&ann, dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.num_classes(), 1);
        let s = ds.get(0).unwrap();
        assert_eq!(s.boxes.get(0), [20.0, 10.0, 60.0, 40.0]);
        assert_eq!(s.class_ids, vec![0]);
    }

    #[test]
    fn image_without_annotations_yields_empty_gt() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 40, 40);
        let ann = fixture(
            dir.path(),
            r#"{
              "images": [{"id": 1, "file_name": "a.png", "width": 40, "height": 40}],
              "annotations": [],
              "categories": [{"id": 1, "name": "x"}]
            }"#,
        );
        let ds = load_coco_json(&ann, dir.path()).unwrap();
        let s = ds.get(0).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.class_ids.is_empty());
    }

    #[test]
    fn descriptive_failures() {
        let dir = tempfile::tempdir().unwrap();
        // missing image file
        let ann = fixture(
            dir.path(),
            r#"{"images": [{"id": 1, "file_name": "missing.png", "width": 10, "height": 10}],
                "annotations": [], "categories": []}"#,
        );
        let err = load_coco_json(&ann, dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing.png"), "{err}");

        // malformed json
        let bad = fixture(dir.path(), "{ not json");
        let err = load_coco_json(&bad, dir.path()).unwrap_err().to_string();
        assert!(err.contains("malformed"), "{err}");

        // out-of-bounds bbox
        write_png(&dir.path().join("a.png"), 20, 20);
        let oob = fixture(
            dir.path(),
            r#"{
              "images": [{"id": 1, "file_name": "a.png", "width": 20, "height": 20}],
              "annotations": [{"image_id": 1, "bbox": [10, 10, 20, 5], "category_id": 1}],
              "categories": [{"id": 1, "name": "x"}]
            }"#,
        );
        let err = load_coco_json(&oob, dir.path()).unwrap_err().to_string();
        assert!(err.contains("outside"), "{err}");
    }

    #[test]
    fn iteration_order_is_by_image_id() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 10, 10);
        write_png(&dir.path().join("b.png"), 12, 10);
        let ann = fixture(
            dir.path(),
            r#"{
              "images": [
                {"id": 7, "file_name": "b.png", "width": 10, "height": 12},
                {"id": 2, "file_name": "a.png", "width": 10, "height": 10}
              ],
              "annotations": [], "categories": []
            }"#,
        );
        let ds = load_coco_json(&ann, dir.path()).unwrap();
        // id 2 (10x10) first, id 7 (12x10) second
        assert_eq!(ds.get(0).unwrap().size(), (10, 10));
        assert_eq!(ds.get(1).unwrap().size(), (12, 10));
    }

    #[test]
    fn rle_masks_decode_column_major() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 3, 3);
        // 3x3 grid, column-major: 4 zeros, 2 ones, 3 zeros
        // ones at flat positions 4,5 -> (y=1,x=1), (y=2,x=1)
        let ann = fixture(
            dir.path(),
            r#"{
              "images": [{"id": 1, "file_name": "a.png", "width": 3, "height": 3}],
              "annotations": [{
                 "image_id": 1, "bbox": [1, 1, 1, 2], "category_id": 1,
                 "segmentation": {"counts": [4, 2, 3], "size": [3, 3]}
              }],
              "categories": [{"id": 1, "name": "x"}]
            }"#,
        );
        let ds = load_coco_json(&ann, dir.path()).unwrap();
        let s = ds.get(0).unwrap();
        let m = &s.masks.as_ref().unwrap()[0];
        assert_eq!(m[(1, 1)], 1);
        assert_eq!(m[(2, 1)], 1);
        assert_eq!(m.iter().map(|v| *v as usize).sum::<usize>(), 2);
    }

    #[test]
    fn polygon_masks_fill_interior() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 10, 10);
        // axis-aligned square from (2,2) to (8,8) in (x, y) pairs
        let ann = fixture(
            dir.path(),
            r#"{
              "images": [{"id": 1, "file_name": "a.png", "width": 10, "height": 10}],
              "annotations": [{
                 "image_id": 1, "bbox": [2, 2, 6, 6], "category_id": 1,
                 "segmentation": [[2.0, 2.0, 8.0, 2.0, 8.0, 8.0, 2.0, 8.0]]
              }],
              "categories": [{"id": 1, "name": "x"}]
            }"#,
        );
        let ds = load_coco_json(&ann, dir.path()).unwrap();
        let s = ds.get(0).unwrap();
        let m = &s.masks.as_ref().unwrap()[0];
        assert_eq!(m[(5, 5)], 1);
        assert_eq!(m[(1, 1)], 0);
        assert_eq!(m.iter().map(|v| *v as usize).sum::<usize>(), 36);
    }
}
