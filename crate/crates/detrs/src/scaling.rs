//! The rescaled model families as data: one config per published row, plus
//! the depth-by-resolution sweep grid.

use crate::backbone::Depth;
use crate::error::{DetError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    RetinanetRs,
    RcnnRs,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::RetinanetRs => write!(f, "retinanet-rs"),
            Family::RcnnRs => write!(f, "rcnn-rs"),
        }
    }
}

/// One (model scale, input resolution, backbone depth) row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ScaleConfig {
    pub family: Family,
    /// Published scale label; `None` for sweep-grid entries that are not
    /// table rows.
    pub scale_label: Option<u32>,
    pub resolution: usize,
    pub backbone_depth: usize,
}

impl ScaleConfig {
    pub fn depth(&self) -> Result<Depth> {
        Depth::from_layers(self.backbone_depth)
    }

    /// Stable identifier used in sweep outputs and benchmark reports.
    pub fn id(&self) -> String {
        match self.scale_label {
            Some(l) => format!("{}-scale{}", self.family, l),
            None => format!("{}-r{}-{}", self.family, self.backbone_depth, self.resolution),
        }
    }
}

/// The one-stage family rows. The published table defines no scale 2; the
/// gap is preserved rather than invented.
const RETINANET_RS_ROWS: &[(u32, usize, usize)] = &[
    (1, 512, 50),
    (3, 640, 50),
    (4, 640, 101),
    (5, 768, 101),
    (6, 768, 152),
];

/// The two-stage family rows, scales 1..=9.
const RCNN_RS_ROWS: &[(u32, usize, usize)] = &[
    (1, 512, 50),
    (2, 640, 50),
    (3, 768, 50),
    (4, 768, 101),
    (5, 896, 101),
    (6, 896, 152),
    (7, 1024, 152),
    (8, 1280, 152),
    (9, 1280, 200),
];

fn lookup(rows: &[(u32, usize, usize)], family: Family, scale: u32) -> Result<ScaleConfig> {
    rows.iter()
        .find(|(l, _, _)| *l == scale)
        .map(|&(l, res, d)| ScaleConfig {
            family,
            scale_label: Some(l),
            resolution: res,
            backbone_depth: d,
        })
        .ok_or_else(|| {
            let valid: Vec<u32> = rows.iter().map(|(l, _, _)| *l).collect();
            DetError::config(
                "scale",
                format!("{family} defines no scale {scale}; valid labels: {valid:?}"),
            )
        })
}

pub fn retinanet_rs_config(scale: u32) -> Result<ScaleConfig> {
    lookup(RETINANET_RS_ROWS, Family::RetinanetRs, scale)
}

pub fn rcnn_rs_config(scale: u32) -> Result<ScaleConfig> {
    lookup(RCNN_RS_ROWS, Family::RcnnRs, scale)
}

pub fn all_retinanet_rs() -> Vec<ScaleConfig> {
    RETINANET_RS_ROWS
        .iter()
        .map(|&(l, _, _)| retinanet_rs_config(l).unwrap())
        .collect()
}

pub fn all_rcnn_rs() -> Vec<ScaleConfig> {
    RCNN_RS_ROWS
        .iter()
        .map(|&(l, _, _)| rcnn_rs_config(l).unwrap())
        .collect()
}

/// Full depth-by-resolution cross product in depth-major, resolution-minor
/// order. Depths must be supported backbone depths and resolutions must be
/// divisible by 128 so the pyramid stays valid.
pub fn sweep_grid(depths: &[usize], resolutions: &[usize]) -> Result<Vec<ScaleConfig>> {
    for &d in depths {
        Depth::from_layers(d)?;
    }
    for &r in resolutions {
        if r == 0 || r % 128 != 0 {
            return Err(DetError::config(
                "sweep.resolutions",
                format!("resolution {r} must be a positive multiple of 128"),
            ));
        }
    }
    let mut out = Vec::with_capacity(depths.len() * resolutions.len());
    for &d in depths {
        for &r in resolutions {
            out.push(ScaleConfig {
                family: Family::RcnnRs,
                scale_label: None,
                resolution: r,
                backbone_depth: d,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retinanet_rows() {
        let c = retinanet_rs_config(1).unwrap();
        assert_eq!((c.resolution, c.backbone_depth), (512, 50));
        let c = retinanet_rs_config(4).unwrap();
        assert_eq!((c.resolution, c.backbone_depth), (640, 101));
        let c = retinanet_rs_config(6).unwrap();
        assert_eq!((c.resolution, c.backbone_depth), (768, 152));
    }

    #[test]
    fn retinanet_scale_two_gap_is_preserved() {
        let err = retinanet_rs_config(2).unwrap_err().to_string();
        assert!(err.contains("valid labels"), "{err}");
        assert!(err.contains("[1, 3, 4, 5, 6]"), "{err}");
    }

    #[test]
    fn rcnn_rows() {
        let c = rcnn_rs_config(3).unwrap();
        assert_eq!((c.resolution, c.backbone_depth), (768, 50));
        let c = rcnn_rs_config(7).unwrap();
        assert_eq!((c.resolution, c.backbone_depth), (1024, 152));
        let c = rcnn_rs_config(9).unwrap();
        assert_eq!((c.resolution, c.backbone_depth), (1280, 200));
        assert!(rcnn_rs_config(10).is_err());
    }

    #[test]
    fn fourteen_rows_total_all_divisible_by_128() {
        let rows: Vec<ScaleConfig> = all_retinanet_rs().into_iter().chain(all_rcnn_rs()).collect();
        assert_eq!(rows.len(), 14);
        for c in rows {
            assert_eq!(c.resolution % 128, 0, "{}", c.id());
            assert!(c.depth().is_ok());
        }
    }

    #[test]
    fn golden_file_pins_every_row() {
        let fixture: Vec<ScaleConfig> =
            serde_json::from_str(include_str!("../tests/data/scale_tables.json")).unwrap();
        let generated: Vec<ScaleConfig> =
            all_retinanet_rs().into_iter().chain(all_rcnn_rs()).collect();
        assert_eq!(fixture, generated);
    }

    #[test]
    fn sweep_grid_order_and_shape() {
        let grid = sweep_grid(&[50, 101, 152, 200], &[512, 640, 768, 896, 1024, 1280]).unwrap();
        assert_eq!(grid.len(), 24);
        // depth-major, resolution-minor
        assert_eq!((grid[0].backbone_depth, grid[0].resolution), (50, 512));
        assert_eq!((grid[1].backbone_depth, grid[1].resolution), (50, 640));
        assert_eq!((grid[6].backbone_depth, grid[6].resolution), (101, 512));
        assert_eq!((grid[23].backbone_depth, grid[23].resolution), (200, 1280));

        assert_eq!(sweep_grid(&[50], &[512]).unwrap().len(), 1);
        assert!(sweep_grid(&[50], &[]).unwrap().is_empty());
        assert!(sweep_grid(&[42], &[512]).is_err());
        assert!(sweep_grid(&[50], &[600]).is_err());
    }
}
