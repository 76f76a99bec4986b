//! Latency benchmarking: timed single-stream inference with explicit
//! precision modes, warmups, and distributional statistics.
//!
//! The hot path is never sampled once: every report carries the raw per-
//! repeat timings plus mean/median/p95. Input preparation (the host-to-
//! device transfer on accelerators; the precision cast here) is timed
//! separately and excluded from the model timings.

use std::time::Instant;

use crate::error::{DetError, Result};

/// Numeric precision of weights and activations during benchmarked
/// inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// IEEE binary16 storage; on hosts without native half arithmetic the
    /// device descriptor marks this mode as emulated.
    Half,
    /// IEEE binary32.
    Single,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Half => write!(f, "half"),
            Precision::Single => write!(f, "single"),
        }
    }
}

/// The compute device executing the benchmark. The CPU device synchronizes
/// implicitly (no queued execution) and supports single natively plus half
/// as a storage emulation.
#[derive(Debug, Clone)]
pub struct Device {
    pub name: String,
    pub supported: Vec<Precision>,
    pub emulated: Vec<Precision>,
}

impl Device {
    pub fn host() -> Device {
        Device {
            name: format!("cpu ({} threads, {})", crate::par::threads(), std::env::consts::ARCH),
            supported: vec![Precision::Single, Precision::Half],
            emulated: vec![Precision::Half],
        }
    }

    /// Capability check: unsupported precisions error out instead of
    /// silently falling back.
    pub fn require(&self, p: Precision) -> Result<()> {
        if self.supported.contains(&p) {
            Ok(())
        } else {
            Err(DetError::Capability(format!(
                "precision {p} is not supported on device `{}`",
                self.name
            )))
        }
    }

    /// Fence for devices with queued execution; the CPU path is a no-op.
    pub fn sync(&self) {}

    pub fn describe(&self, p: Precision) -> String {
        if self.emulated.contains(&p) {
            format!("{} [{} emulated: f16 storage, f32 arithmetic]", self.name, p)
        } else {
            format!("{} [{p} native]", self.name)
        }
    }
}

/// Repeat/warmup schedule. Reported numbers require at least 30 repeats and
/// 10 warmups.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BenchSpec {
    pub repeats: usize,
    pub warmups: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec { repeats: 30, warmups: 10 }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 30 {
            return Err(DetError::config(
                "bench.repeats",
                format!("reported numbers need >= 30 repeats, got {}", self.repeats),
            ));
        }
        if self.warmups < 10 {
            return Err(DetError::config(
                "bench.warmups",
                format!("need >= 10 warmups, got {}", self.warmups),
            ));
        }
        Ok(())
    }
}

/// Timing distribution for one (configuration, precision, postprocess)
/// cell.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LatencyReport {
    pub config_id: String,
    pub resolution: usize,
    pub depth: usize,
    pub precision: Precision,
    pub include_postprocess: bool,
    /// Raw per-repeat timings, milliseconds.
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    /// The statistic of record.
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Input preparation / transfer, timed separately.
    pub transfer_ms: f64,
    pub environment: String,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Run the benchmark loop: `prepare` once (timed as transfer), `warmups`
/// untimed runs, then `repeats` timed runs of `run`, synchronizing the
/// device around each timed region.
#[allow(clippy::too_many_arguments)]
pub fn benchmark(
    config_id: &str,
    resolution: usize,
    depth: usize,
    precision: Precision,
    include_postprocess: bool,
    device: &Device,
    spec: &BenchSpec,
    prepare: &mut dyn FnMut() -> Result<()>,
    run: &mut dyn FnMut() -> Result<()>,
) -> Result<LatencyReport> {
    spec.validate()?;
    device.require(precision)?;

    device.sync();
    let t0 = Instant::now();
    prepare()?;
    device.sync();
    let transfer_ms = t0.elapsed().as_secs_f64() * 1e3;

    for _ in 0..spec.warmups {
        run()?;
    }
    let mut samples_ms = Vec::with_capacity(spec.repeats);
    for _ in 0..spec.repeats {
        device.sync();
        let t = Instant::now();
        run()?;
        device.sync();
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = samples_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(LatencyReport {
        config_id: config_id.to_string(),
        resolution,
        depth,
        precision,
        include_postprocess,
        mean_ms: samples_ms.iter().sum::<f64>() / samples_ms.len() as f64,
        median_ms: percentile(&sorted, 0.5),
        p95_ms: percentile(&sorted, 0.95),
        samples_ms,
        transfer_ms,
        environment: device.describe(precision),
    })
}

/// Seeded random input batch for benchmarking at the given resolution.
pub fn random_input(resolution: usize, seed: u64) -> ndarray::Array4<f64> {
    use rand::Rng;
    let mut rng = crate::rng::rng_for(&[seed, 0xBE]);
    ndarray::Array4::from_shape_fn((1, 3, resolution, resolution), |_| rng.gen_range(-2.0..2.0))
}

/// Share of end-to-end latency spent in postprocessing, in percent:
/// `(t_with - t_without) / t_with * 100` on the medians.
pub fn postprocess_share(with_pp: &LatencyReport, without_pp: &LatencyReport) -> f64 {
    (with_pp.median_ms - without_pp.median_ms) / with_pp.median_ms * 100.0
}

/// CSV header shared by benchmark emissions.
pub const REPORT_CSV_HEADER: &str =
    "config_id,resolution,depth,precision,with_postprocess,median_ms,mean_ms,p95_ms,transfer_ms,ap";

/// One CSV row; `ap` is empty when quality was not evaluated.
pub fn report_csv_row(r: &LatencyReport, ap: Option<f64>) -> String {
    format!(
        "{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{}",
        r.config_id,
        r.resolution,
        r.depth,
        r.precision,
        r.include_postprocess,
        r.median_ms,
        r.mean_ms,
        r.p95_ms,
        r.transfer_ms,
        ap.map(|v| format!("{v:.4}")).unwrap_or_default()
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_minimums_are_enforced() {
        assert!(BenchSpec { repeats: 29, warmups: 10 }.validate().is_err());
        assert!(BenchSpec { repeats: 30, warmups: 9 }.validate().is_err());
        assert!(BenchSpec::default().validate().is_ok());
    }

    #[test]
    fn unsupported_precision_is_a_capability_error() {
        let device = Device {
            name: "half-less".into(),
            supported: vec![Precision::Single],
            emulated: vec![],
        };
        let err = device.require(Precision::Half).unwrap_err();
        assert!(matches!(err, DetError::Capability(_)));
        assert!(Device::host().require(Precision::Half).is_ok());
    }

    #[test]
    fn report_carries_raw_samples_and_summary() {
        let device = Device::host();
        let mut counter = 0u64;
        let r = benchmark(
            "toy",
            128,
            50,
            Precision::Single,
            false,
            &device,
            &BenchSpec::default(),
            &mut || Ok(()),
            &mut || {
                counter += 1;
                std::hint::black_box(&counter);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(r.samples_ms.len(), 30);
        assert!(r.median_ms >= 0.0 && r.p95_ms >= r.median_ms);
        assert!(r.environment.contains("cpu"));
        // 10 warmups + 30 timed
        assert_eq!(counter, 40);
    }

    #[test]
    fn postprocess_share_formula() {
        let mk = |median: f64, pp: bool| LatencyReport {
            config_id: "x".into(),
            resolution: 512,
            depth: 50,
            precision: Precision::Single,
            include_postprocess: pp,
            samples_ms: vec![median; 30],
            mean_ms: median,
            median_ms: median,
            p95_ms: median,
            transfer_ms: 0.1,
            environment: "test".into(),
        };
        let share = postprocess_share(&mk(10.0, true), &mk(6.0, false));
        assert!((share - 40.0).abs() < 1e-12);
    }

    #[test]
    fn csv_row_matches_header_arity() {
        let r = LatencyReport {
            config_id: "cfg".into(),
            resolution: 640,
            depth: 101,
            precision: Precision::Half,
            include_postprocess: true,
            samples_ms: vec![1.0; 30],
            mean_ms: 1.0,
            median_ms: 1.0,
            p95_ms: 1.2,
            transfer_ms: 0.3,
            environment: "e".into(),
        };
        let row = report_csv_row(&r, Some(0.41));
        assert_eq!(
            row.split(',').count(),
            REPORT_CSV_HEADER.split(',').count()
        );
    }
}
