//! CSV rows and JSON documents emitted by the CLI.

use serde::Serialize;
use twtoa::analysis::{crlb, BlockTraces};
use twtoa::estimator::{Candidate, EstimateFlags, EstimateReport};
use twtoa::montecarlo::{CampaignStats, CellStats};
use twtoa::{mps_to_ppm, AnchorSet, NoiseSpec, UdState};

pub const CSV_HEADER: [&str; 12] = [
    "method",
    "snr_db",
    "an_count",
    "runs",
    "rmse_pos_m",
    "rmse_vel_mps",
    "rmse_b_m",
    "rmse_w_mps",
    "crlb_pos_m",
    "large_error_rate",
    "fallback_rate",
    "wall_s",
];

/// Non-finite values (every run of a cell failed) are written as `failed`.
fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        "failed".to_string()
    }
}

fn row(cell: &CellStats) -> [String; 12] {
    let s = &cell.stats;
    [
        cell.method.clone(),
        cell.snr_db.map_or_else(|| "inf".to_string(), num),
        cell.an_count.to_string(),
        s.runs.to_string(),
        num(s.rmse.position),
        num(s.rmse.velocity),
        num(s.rmse.offset),
        num(s.rmse.drift),
        num(s.crlb.position),
        num(s.large_error_rate),
        num(s.fallback_rate),
        cell.wall_s.map(num).unwrap_or_default(),
    ]
}

pub fn write_csv<W: std::io::Write>(stats: &CampaignStats, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for cell in &stats.cells {
        w.write_record(row(cell))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct StateOut {
    pub p_m: Vec<f64>,
    pub v_mps: Vec<f64>,
    pub offset_m: f64,
    pub drift_mps: f64,
    pub offset_s: f64,
    pub drift_ppm: f64,
}

impl From<&UdState> for StateOut {
    fn from(ud: &UdState) -> Self {
        Self {
            p_m: ud.p.as_slice().to_vec(),
            v_mps: ud.v.as_slice().to_vec(),
            offset_m: ud.b,
            drift_mps: ud.w,
            offset_s: twtoa::meters_to_seconds(ud.b),
            drift_ppm: mps_to_ppm(ud.w),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CandidateOut {
    pub lambda1: f64,
    pub lambda2: f64,
    pub projected: bool,
    pub weighted_cost: f64,
    pub state: StateOut,
}

impl From<&Candidate> for CandidateOut {
    fn from(c: &Candidate) -> Self {
        Self {
            lambda1: c.aux.lambda1,
            lambda2: c.aux.lambda2,
            projected: c.projected,
            weighted_cost: c.weighted_cost,
            state: (&c.state).into(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FlagsOut {
    pub degenerate_geometry: bool,
    pub no_real_root_fallback: bool,
    pub refinement_singular: bool,
    pub ill_conditioned_elimination: bool,
}

impl From<&EstimateFlags> for FlagsOut {
    fn from(f: &EstimateFlags) -> Self {
        Self {
            degenerate_geometry: f.degenerate_geometry,
            no_real_root_fallback: f.no_real_root_fallback,
            refinement_singular: f.refinement_singular,
            ill_conditioned_elimination: f.ill_conditioned_elimination,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorOut {
    pub position_m: f64,
    pub velocity_mps: f64,
    pub offset_m: f64,
    pub drift_mps: f64,
}

impl ErrorOut {
    pub fn between(est: &UdState, truth: &UdState) -> Self {
        Self {
            position_m: (&est.p - &truth.p).norm(),
            velocity_mps: (&est.v - &truth.v).norm(),
            offset_m: (est.b - truth.b).abs(),
            drift_mps: (est.w - truth.w).abs(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct EstimateOut {
    pub raw: Option<StateOut>,
    pub refined: Option<StateOut>,
    pub selected: Option<usize>,
    pub candidates: Vec<CandidateOut>,
    pub weighted_cost: Option<f64>,
    /// Square roots of the diagonal of the refinement covariance.
    pub refined_std: Option<Vec<f64>>,
    pub flags: FlagsOut,
    pub diagnostic: Option<String>,
    pub error_vs_truth: Option<ErrorOut>,
}

impl EstimateOut {
    pub fn new(report: &EstimateReport, truth: Option<&UdState>) -> Self {
        Self {
            raw: report.raw.as_ref().map(Into::into),
            refined: report.refined.as_ref().map(Into::into),
            selected: report.selected,
            candidates: report.candidates.iter().map(Into::into).collect(),
            weighted_cost: report.residuals.as_ref().map(|r| r.weighted_cost),
            refined_std: report
                .refinement_cov
                .as_ref()
                .map(|c| c.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()),
            flags: (&report.flags).into(),
            diagnostic: report.diagnostic.clone(),
            error_vs_truth: match (&report.refined, truth) {
                (Some(est), Some(t)) => Some(ErrorOut::between(est, t)),
                _ => None,
            },
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CrlbOut {
    /// Traces of the diagonal blocks.
    pub trace: BlockTraces,
    /// Square roots of the block traces.
    pub sqrt_trace: BlockTraces,
    pub crlb: Vec<Vec<f64>>,
}

pub fn crlb_out(truth: &UdState, anchors: &AnchorSet, noise: &NoiseSpec) -> twtoa::Result<CrlbOut> {
    let res = crlb(truth, anchors, noise)?;
    let n = res.crlb.nrows();
    Ok(CrlbOut {
        trace: res.blocks,
        sqrt_trace: res.blocks.sqrt(),
        crlb: (0..n).map(|i| res.crlb.row(i).iter().copied().collect()).collect(),
    })
}
