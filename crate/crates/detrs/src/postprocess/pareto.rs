//! Latency/quality Pareto frontier with CSV and JSON emission.

use crate::error::Result;

/// One benchmarked configuration on the latency/quality plane.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParetoPoint {
    pub config_id: String,
    pub latency_ms: f64,
    /// Quality metric, higher is better (AP).
    pub quality: f64,
    pub dominated: bool,
}

impl ParetoPoint {
    pub fn new(config_id: impl Into<String>, latency_ms: f64, quality: f64) -> Self {
        ParetoPoint {
            config_id: config_id.into(),
            latency_ms,
            quality,
            dominated: false,
        }
    }
}

/// `q` dominates `p` when it is at least as fast and at least as good, and
/// strictly better on one axis.
fn dominates(q: &ParetoPoint, p: &ParetoPoint) -> bool {
    q.latency_ms <= p.latency_ms
        && q.quality >= p.quality
        && (q.latency_ms < p.latency_ms || q.quality > p.quality)
}

/// Mark dominated points in place and return the frontier (indices of
/// non-dominated points) sorted by latency ascending.
pub fn pareto_frontier(points: &mut [ParetoPoint]) -> Vec<usize> {
    assert!(!points.is_empty(), "need at least one point");
    for i in 0..points.len() {
        let d = (0..points.len()).any(|j| j != i && dominates(&points[j], &points[i]));
        points[i].dominated = d;
    }
    let mut frontier: Vec<usize> = (0..points.len()).filter(|&i| !points[i].dominated).collect();
    frontier.sort_by(|&a, &b| {
        points[a]
            .latency_ms
            .partial_cmp(&points[b].latency_ms)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(points[a].config_id.cmp(&points[b].config_id))
    });
    frontier
}

/// CSV with a documented header; one row per point, frontier rows marked.
pub fn to_csv(points: &[ParetoPoint]) -> String {
    let mut out = String::from("config_id,latency_ms,quality,dominated\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.config_id, p.latency_ms, p.quality, p.dominated
        ));
    }
    out
}

pub fn write_reports(points: &[ParetoPoint], csv_path: &std::path::Path, json_path: &std::path::Path) -> Result<()> {
    std::fs::write(csv_path, to_csv(points))?;
    std::fs::write(json_path, serde_json::to_string_pretty(points)?)?;
    Ok(())
}
