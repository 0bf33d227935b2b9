//! Seeded Monte-Carlo campaigns: RMSE against SNR and anchor count for the
//! closed-form estimator and the Gauss-Newton baseline.
//!
//! Every run draws from its own ChaCha stream, keyed by the master seed, a
//! purpose tag and the run index. The UD state and the unit noise draws of a
//! run are therefore shared by every SNR, anchor count and method, and results
//! do not depend on how runs are scheduled across threads. Per-run results are
//! reduced in run order.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, error_stats, BlockTraces, ErrorStats, RunRecord};
use crate::baseline::{gauss_newton, make_initializer, GaussNewtonOptions};
use crate::estimator::{estimate, EstimatorOptions};
use crate::scenario::{
    add_noise, build_square_scenario, forward_model, sample_ud_state, AnchorSet, NoiseSpec, RespSigmaModel, UdPrior,
    UdState,
};
use crate::{LasError, Result};

const STREAM_UD: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_INIT: u64 = 3;

/// Independent random stream for one `(purpose, run)` pair under a master seed.
pub fn stream_rng(seed: u64, purpose: u64, run: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(run);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    ClosedForm,
    GaussNewton { init_std_m: f64 },
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::ClosedForm => "closed_form".to_string(),
            MethodSpec::GaussNewton { init_std_m } => format!("gauss_newton_{init_std_m}m"),
        }
    }
}

/// Everything needed to reproduce a campaign. Offsets are given in seconds and
/// drifts in ppm; they are converted to meters internally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    /// Side of the square whose corners and midpoints hold the anchors, m.
    pub side_len_m: f64,
    /// Anchor layouts to evaluate (4, 5 or 8).
    pub an_counts: Vec<usize>,
    /// Side of the concentric square the UD is placed in, m.
    pub region_side_m: f64,
    pub vmax_mps: f64,
    pub offset_range_s: (f64, f64),
    pub drift_range_ppm: (f64, f64),
    pub snr_db: Vec<f64>,
    /// Replace the SNR sweep by a single noise-free cell.
    #[serde(default)]
    pub noise_free: bool,
    pub runs: usize,
    pub seed: u64,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_refine_steps")]
    pub refine_steps: usize,
    #[serde(default)]
    pub reference_anchor: usize,
    #[serde(default)]
    pub resp_sigma: RespSigmaModel,
    #[serde(default = "default_gn_max_iter")]
    pub gn_max_iter: usize,
    #[serde(default = "default_gn_tol")]
    pub gn_tol_m: f64,
    /// Record summed per-call wall-clock time in each cell.
    #[serde(default)]
    pub record_timing: bool,
}

fn default_refine_steps() -> usize {
    1
}

fn default_gn_max_iter() -> usize {
    crate::baseline::DEFAULT_MAX_ITER
}

fn default_gn_tol() -> f64 {
    crate::baseline::DEFAULT_TOL
}

/// Desk-scale run count per cell; the full protocol uses [`FULL_RUNS`].
pub const DEFAULT_RUNS: usize = 2000;
pub const FULL_RUNS: usize = 10_000;

impl CampaignConfig {
    /// 800 m square, 8 anchors, UD in the central 500 m square, responses every
    /// 10 ms, offset U(0, 20 µs), drift U(−10, 10) ppm, speed U(0, 50) m/s,
    /// SNR swept 10–50 dB in 2 dB steps, closed form plus Gauss-Newton from
    /// 50 m and 200 m initial position errors.
    pub fn paper_defaults() -> Self {
        Self {
            side_len_m: 800.0,
            an_counts: vec![8],
            region_side_m: 500.0,
            vmax_mps: 50.0,
            offset_range_s: (0.0, 20e-6),
            drift_range_ppm: (-10.0, 10.0),
            snr_db: (0..=20).map(|k| 10.0 + 2.0 * k as f64).collect(),
            noise_free: false,
            runs: DEFAULT_RUNS,
            seed: 1,
            methods: vec![
                MethodSpec::ClosedForm,
                MethodSpec::GaussNewton { init_std_m: 50.0 },
                MethodSpec::GaussNewton { init_std_m: 200.0 },
            ],
            refine_steps: 1,
            reference_anchor: 0,
            resp_sigma: RespSigmaModel::MeanDistance,
            gn_max_iter: crate::baseline::DEFAULT_MAX_ITER,
            gn_tol_m: crate::baseline::DEFAULT_TOL,
            record_timing: false,
        }
    }

    /// Anchor-count ablation at 30 dB with the closed-form estimator.
    pub fn anchor_ablation() -> Self {
        Self {
            an_counts: vec![4, 5, 8],
            snr_db: vec![30.0],
            methods: vec![MethodSpec::ClosedForm],
            runs: FULL_RUNS,
            ..Self::paper_defaults()
        }
    }

    pub fn prior(&self) -> UdPrior {
        let c = self.side_len_m / 2.0;
        UdPrior {
            center: vec![c, c],
            region_side: self.region_side_m,
            vmax: self.vmax_mps,
            offset_range_s: self.offset_range_s,
            drift_range_ppm: self.drift_range_ppm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LasError::Config(msg));
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if !self.noise_free && self.snr_db.is_empty() {
            return bad("snr_db must list at least one value".into());
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("snr_db values must be finite; use noise_free for the noiseless case".into());
        }
        if self.an_counts.is_empty() {
            return bad("an_counts must list at least one layout".into());
        }
        if self.methods.is_empty() {
            return bad("methods must list at least one estimator".into());
        }
        for m in &self.methods {
            if let MethodSpec::GaussNewton { init_std_m } = m {
                if !(init_std_m.is_finite() && *init_std_m >= 0.0) {
                    return bad(format!("init_std_m must be non-negative, got {init_std_m}"));
                }
            }
        }
        if !(self.region_side_m <= self.side_len_m) {
            return bad("region_side_m must not exceed side_len_m".into());
        }
        if self.refine_steps == 0 {
            return bad("refine_steps must be at least 1".into());
        }
        if !self.gn_tol_m.is_finite() {
            return bad("gn_tol_m must be finite".into());
        }
        for &count in &self.an_counts {
            let anchors = build_square_scenario(self.side_len_m, count)?;
            if self.reference_anchor >= anchors.len() {
                return bad(format!("reference_anchor {} out of range for {count} anchors", self.reference_anchor));
            }
        }
        self.prior().validate()
    }

    /// SNR cells in ascending order; `None` is the noise-free cell.
    fn snr_cells(&self) -> Vec<Option<f64>> {
        if self.noise_free {
            return vec![None];
        }
        let mut snrs = self.snr_db.clone();
        snrs.sort_by(f64::total_cmp);
        snrs.dedup();
        snrs.into_iter().map(Some).collect()
    }

    fn sorted_an_counts(&self) -> Vec<usize> {
        let mut counts = self.an_counts.clone();
        counts.sort_unstable();
        counts.dedup();
        counts
    }
}

/// Statistics of one `(method, SNR, anchor count)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub method: String,
    /// `None` for the noise-free cell.
    pub snr_db: Option<f64>,
    pub an_count: usize,
    pub stats: ErrorStats,
    /// Modelled flops per call; for Gauss-Newton, per-iteration flops times
    /// the mean iteration count.
    pub flops_per_call: f64,
    /// Mean Gauss-Newton iterations, if applicable.
    pub mean_iterations: Option<f64>,
    /// Fraction of Gauss-Newton runs that hit a singular normal matrix or a
    /// non-finite iterate, if applicable.
    pub diverged_rate: Option<f64>,
    /// Summed per-call wall-clock seconds, when timing is recorded.
    pub wall_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub config: CampaignConfig,
    /// Ordered by method (config order), then SNR ascending, then anchor count ascending.
    pub cells: Vec<CellStats>,
}

impl CampaignStats {
    pub fn cell(&self, method: &str, snr_db: Option<f64>, an_count: usize) -> Option<&CellStats> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.snr_db == snr_db && c.an_count == an_count)
    }
}

/// What one method produced on one run.
#[derive(Debug, Clone)]
struct MethodOutcome {
    record: RunRecord,
    iterations: usize,
    diverged: bool,
    seconds: f64,
}

/// Runs a campaign on the current rayon pool.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignStats> {
    cfg.validate()?;
    let snrs = cfg.snr_cells();
    let counts = cfg.sorted_an_counts();

    // results[count][snr][method] -> ErrorStats inputs
    let mut cells: Vec<CellStats> = Vec::new();
    let mut grid: Vec<(usize, Option<f64>, Vec<Vec<MethodOutcome>>)> = Vec::new();
    for &count in &counts {
        let anchors = build_square_scenario(cfg.side_len_m, count)?;
        for &snr in &snrs {
            let per_run: Vec<Vec<MethodOutcome>> = (0..cfg.runs as u64)
                .into_par_iter()
                .map(|run| simulate_run(cfg, &anchors, snr, run))
                .collect::<Result<Vec<_>>>()?;
            grid.push((count, snr, per_run));
        }
    }

    for (mi, method) in cfg.methods.iter().enumerate() {
        for &snr in &snrs {
            for &count in &counts {
                let (_, _, per_run) = grid
                    .iter()
                    .find(|(c, s, _)| *c == count && *s == snr)
                    .expect("every cell was simulated");
                let records: Vec<RunRecord> = per_run.iter().map(|r| r[mi].record.clone()).collect();
                let stats = error_stats(&records)?;
                let mean_iter = per_run.iter().map(|r| r[mi].iterations as f64).sum::<f64>() / cfg.runs as f64;
                let diverged = per_run.iter().filter(|r| r[mi].diverged).count() as f64 / cfg.runs as f64;
                let (flops_per_call, mean_iterations, diverged_rate) = match method {
                    MethodSpec::ClosedForm => (analysis::flops_cftwlas(2, count as u64) as f64, None, None),
                    MethodSpec::GaussNewton { .. } => (
                        analysis::flops_iterative_per_iter(2, count as u64) as f64 * mean_iter,
                        Some(mean_iter),
                        Some(diverged),
                    ),
                };
                let wall_s = cfg
                    .record_timing
                    .then(|| per_run.iter().map(|r| r[mi].seconds).sum::<f64>());
                cells.push(CellStats {
                    method: method.label(),
                    snr_db: snr,
                    an_count: count,
                    stats,
                    flops_per_call,
                    mean_iterations,
                    diverged_rate,
                    wall_s,
                });
            }
        }
    }
    Ok(CampaignStats { config: cfg.clone(), cells })
}

/// Runs a campaign on a dedicated pool with `threads` workers.
pub fn run_campaign_with_threads(cfg: &CampaignConfig, threads: usize) -> Result<CampaignStats> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| LasError::Config(format!("cannot build thread pool: {e}")))?;
    pool.install(|| run_campaign(cfg))
}

/// Truth, measurements and noise model for one run.
pub struct RunInputs {
    pub truth: UdState,
    pub meas: crate::MeasurementSet,
    pub noise: NoiseSpec,
    pub crlb: BlockTraces,
}

/// Synthesizes the data of run `run`; `snr_db = None` gives noise-free data
/// with unit weights.
pub fn run_inputs(cfg: &CampaignConfig, anchors: &AnchorSet, snr_db: Option<f64>, run: u64) -> Result<RunInputs> {
    let truth = sample_ud_state(&mut stream_rng(cfg.seed, STREAM_UD, run), &cfg.prior());
    let clean = forward_model(&truth, anchors)?;
    let (meas, noise, crlb) = match snr_db {
        Some(snr) => {
            let noise = NoiseSpec::from_snr(anchors, &truth.p, snr, cfg.resp_sigma)?;
            let meas = add_noise(&clean, &noise, &mut stream_rng(cfg.seed, STREAM_NOISE, run))?;
            let bound = analysis::crlb(&truth, anchors, &noise)?.blocks;
            (meas, noise, bound)
        }
        None => (clean, NoiseSpec::uniform(anchors.len(), 1.0)?, BlockTraces::default()),
    };
    Ok(RunInputs { truth, meas, noise, crlb })
}

fn simulate_run(cfg: &CampaignConfig, anchors: &AnchorSet, snr: Option<f64>, run: u64) -> Result<Vec<MethodOutcome>> {
    let RunInputs { truth, meas, noise, crlb } = run_inputs(cfg, anchors, snr, run)?;
    let est_opts = EstimatorOptions { reference: cfg.reference_anchor, refine_steps: cfg.refine_steps };
    let gn_opts = GaussNewtonOptions { max_iter: cfg.gn_max_iter, tol: cfg.gn_tol_m };

    cfg.methods
        .iter()
        .enumerate()
        .map(|(mi, method)| {
            let start = Instant::now();
            let outcome = match method {
                MethodSpec::ClosedForm => {
                    let report = estimate(&meas, anchors, &noise, &est_opts)?;
                    let seconds = start.elapsed().as_secs_f64();
                    MethodOutcome {
                        record: RunRecord {
                            truth: truth.clone(),
                            raw: report.raw,
                            estimate: report.refined,
                            crlb,
                            fallback: report.flags.no_real_root_fallback,
                        },
                        iterations: 0,
                        diverged: false,
                        seconds,
                    }
                }
                MethodSpec::GaussNewton { init_std_m } => {
                    let mut rng = stream_rng(cfg.seed, STREAM_INIT + 16 * mi as u64, run);
                    let init = make_initializer(&truth, *init_std_m, &mut rng);
                    let (est, trace) = gauss_newton(&meas, anchors, &noise, &init, &gn_opts)?;
                    let seconds = start.elapsed().as_secs_f64();
                    // the last iterate is scored even when the iteration diverged
                    let finite = est.is_finite();
                    MethodOutcome {
                        diverged: trace.diverged,
                        record: RunRecord {
                            truth: truth.clone(),
                            raw: None,
                            estimate: finite.then_some(est),
                            crlb,
                            fallback: false,
                        },
                        iterations: trace.iterations_used,
                        seconds,
                    }
                }
            };
            Ok(outcome)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub method: String,
    /// Fixed iteration count for Gauss-Newton (convergence test disabled).
    pub iterations: Option<usize>,
    pub runs: usize,
    pub total_s: f64,
    pub flops_per_call: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub an_count: usize,
    pub snr_db: f64,
    pub entries: Vec<TimingEntry>,
}

/// Times the closed-form estimator and Gauss-Newton at each fixed iteration
/// count on identical inputs (first anchor count and SNR of the config),
/// single-threaded.
pub fn timing_report(cfg: &CampaignConfig, gn_iterations: &[usize]) -> Result<TimingReport> {
    cfg.validate()?;
    let count = cfg.sorted_an_counts()[0];
    let snr = cfg.snr_cells()[0].unwrap_or(30.0);
    let anchors = build_square_scenario(cfg.side_len_m, count)?;
    let inputs = (0..cfg.runs as u64)
        .map(|run| run_inputs(cfg, &anchors, Some(snr), run))
        .collect::<Result<Vec<_>>>()?;
    let init_std = cfg
        .methods
        .iter()
        .find_map(|m| match m {
            MethodSpec::GaussNewton { init_std_m } => Some(*init_std_m),
            _ => None,
        })
        .unwrap_or(50.0);
    let inits: Vec<UdState> = inputs
        .iter()
        .enumerate()
        .map(|(run, x)| make_initializer(&x.truth, init_std, &mut stream_rng(cfg.seed, STREAM_INIT, run as u64)))
        .collect();

    let est_opts = EstimatorOptions { reference: cfg.reference_anchor, refine_steps: cfg.refine_steps };
    let mut entries = Vec::new();

    let start = Instant::now();
    for x in &inputs {
        std::hint::black_box(estimate(&x.meas, &anchors, &x.noise, &est_opts)?);
    }
    entries.push(TimingEntry {
        method: MethodSpec::ClosedForm.label(),
        iterations: None,
        runs: cfg.runs,
        total_s: start.elapsed().as_secs_f64(),
        flops_per_call: analysis::flops_cftwlas(2, count as u64),
    });

    for &iters in gn_iterations {
        let opts = GaussNewtonOptions { max_iter: iters, tol: 0.0 };
        let start = Instant::now();
        for (x, init) in inputs.iter().zip(&inits) {
            std::hint::black_box(gauss_newton(&x.meas, &anchors, &x.noise, init, &opts)?);
        }
        entries.push(TimingEntry {
            method: MethodSpec::GaussNewton { init_std_m: init_std }.label(),
            iterations: Some(iters),
            runs: cfg.runs,
            total_s: start.elapsed().as_secs_f64(),
            flops_per_call: analysis::flops_iterative_per_iter(2, count as u64) * iters as u64,
        });
    }
    Ok(TimingReport { an_count: count, snr_db: snr, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(runs: usize) -> CampaignConfig {
        CampaignConfig {
            runs,
            snr_db: vec![40.0, 30.0],
            methods: vec![MethodSpec::ClosedForm, MethodSpec::GaussNewton { init_std_m: 50.0 }],
            ..CampaignConfig::paper_defaults()
        }
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: f64 = stream_rng(7, STREAM_UD, 3).random();
        let b: f64 = stream_rng(7, STREAM_UD, 3).random();
        let c: f64 = stream_rng(7, STREAM_UD, 4).random();
        let d: f64 = stream_rng(7, STREAM_NOISE, 3).random();
        let e: f64 = stream_rng(8, STREAM_UD, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_ne!(a, e);
    }

    #[test]
    fn noise_free_single_run_is_exact() {
        let cfg = CampaignConfig {
            runs: 1,
            noise_free: true,
            methods: vec![MethodSpec::ClosedForm],
            ..CampaignConfig::paper_defaults()
        };
        let stats = run_campaign(&cfg).unwrap();
        assert_eq!(stats.cells.len(), 1);
        let cell = &stats.cells[0];
        assert_eq!(cell.snr_db, None);
        assert!(cell.stats.rmse.position < 1e-6);
        assert_eq!(cell.stats.large_error_rate, 0.0);
    }

    #[test]
    fn cells_are_ordered() {
        let cfg = CampaignConfig { an_counts: vec![8, 5], ..small(4) };
        let stats = run_campaign(&cfg).unwrap();
        let keys: Vec<(String, Option<f64>, usize)> =
            stats.cells.iter().map(|c| (c.method.clone(), c.snr_db, c.an_count)).collect();
        assert_eq!(
            keys,
            vec![
                ("closed_form".into(), Some(30.0), 5),
                ("closed_form".into(), Some(30.0), 8),
                ("closed_form".into(), Some(40.0), 5),
                ("closed_form".into(), Some(40.0), 8),
                ("gauss_newton_50m".into(), Some(30.0), 5),
                ("gauss_newton_50m".into(), Some(30.0), 8),
                ("gauss_newton_50m".into(), Some(40.0), 5),
                ("gauss_newton_50m".into(), Some(40.0), 8),
            ]
        );
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let cfg = small(64);
        let one = run_campaign_with_threads(&cfg, 1).unwrap();
        let many = run_campaign_with_threads(&cfg, 8).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn config_validation() {
        assert!(CampaignConfig { runs: 0, ..small(1) }.validate().is_err());
        assert!(CampaignConfig { snr_db: vec![], ..small(1) }.validate().is_err());
        assert!(CampaignConfig { an_counts: vec![6], ..small(1) }.validate().is_err());
        assert!(CampaignConfig { methods: vec![], ..small(1) }.validate().is_err());
        assert!(CampaignConfig { region_side_m: 900.0, ..small(1) }.validate().is_err());
        assert!(CampaignConfig { snr_db: vec![f64::INFINITY], ..small(1) }.validate().is_err());
        assert!(CampaignConfig { snr_db: vec![], noise_free: true, ..small(1) }.validate().is_ok());
    }

    #[test]
    fn statistics_are_in_range() {
        let stats = run_campaign(&small(50)).unwrap();
        for cell in &stats.cells {
            let s = &cell.stats;
            assert!(s.rmse.position >= 0.0 && s.crlb.position > 0.0);
            assert!((0.0..=1.0).contains(&s.large_error_rate));
            assert!((0.0..=1.0).contains(&s.fallback_rate));
            assert!(cell.wall_s.is_none());
        }
    }

    #[test]
    fn timing_is_recorded_on_request() {
        let cfg = CampaignConfig { record_timing: true, ..small(5) };
        let stats = run_campaign(&cfg).unwrap();
        assert!(stats.cells.iter().all(|c| c.wall_s.is_some_and(|t| t >= 0.0)));
    }

    #[test]
    fn config_round_trips_through_json_shape() {
        let cfg = CampaignConfig::paper_defaults();
        assert_eq!(cfg.prior().center, vec![400.0, 400.0]);
        assert_eq!(cfg.snr_db.first(), Some(&10.0));
        assert_eq!(cfg.snr_db.last(), Some(&50.0));
        assert_eq!(CampaignConfig::anchor_ablation().runs, FULL_RUNS);
    }
}
