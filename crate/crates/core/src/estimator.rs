//! Closed-form estimation: raw estimate from the auxiliary-variable solution,
//! then a weighted least-squares refinement.

use nalgebra::{DMatrix, DVector};

use crate::analysis::{invert_spd, jacobian, measurement_fn, weighted_normal_matrix};
use crate::linear_system::{build_system, ConstraintMatrices};
use crate::polysolve::{coefficients_from_system, solve_pair, AuxiliaryPair};
use crate::scenario::{AnchorSet, MeasurementSet, NoiseSpec, UdState};
use crate::{LasError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimatorOptions {
    /// Zero-based index of the anchor used as the differencing reference.
    pub reference: usize,
    /// Number of weighted least-squares steps after the raw estimate.
    pub refine_steps: usize,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self { reference: 0, refine_steps: 1 }
    }
}

/// Measurement residuals `γ − h(θ)` split by family, with the weighted cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub r_rho: DVector<f64>,
    pub r_tau: DVector<f64>,
    pub weighted_cost: f64,
}

/// Residuals of a candidate state against the measurements.
///
/// `[r_ρ]ᵢ = ρ̂ᵢ − ‖qᵢ − p‖ + b` and `[r_τ]ᵢ = τ̂ᵢ − ‖qᵢ − p − vΔtᵢ‖ − b − ωΔtᵢ`.
pub fn residuals(ud: &UdState, meas: &MeasurementSet, anchors: &AnchorSet, noise: &NoiseSpec) -> Residuals {
    let m = meas.len();
    let r = meas.gamma() - measurement_fn(ud, anchors);
    let w = noise.weights();
    let weighted_cost = r.iter().zip(w.iter()).map(|(ri, wi)| wi * ri * ri).sum();
    Residuals {
        r_rho: r.rows(0, m).into_owned(),
        r_tau: r.rows(m, m).into_owned(),
        weighted_cost,
    }
}

/// One root of the auxiliary system mapped back to a state.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub aux: AuxiliaryPair,
    pub state: UdState,
    pub weighted_cost: f64,
    /// `aux` is the real part of a complex root rather than an exact real root.
    pub projected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawEstimate {
    pub state: UdState,
    pub candidates: Vec<Candidate>,
    /// Index of `state` within `candidates`.
    pub selected: usize,
    /// The selected candidate is not an exact real root: it is the real part
    /// of a complex root, or `λ = 0` when the system had no usable root.
    pub fallback: bool,
    pub ill_conditioned: bool,
}

/// Raw estimate: every real `(λ₁, λ₂)` root, and the real part of every
/// complex root, gives `θ = g + U·λ`; the candidate with the smallest weighted
/// residual cost wins. Ties go to the candidate with the smaller `‖θ‖`.
///
/// `fallback` is set when the winner is not an exact real root. With no root
/// at all, `λ = 0` is used.
pub fn raw_estimate(
    meas: &MeasurementSet,
    anchors: &AnchorSet,
    noise: &NoiseSpec,
    reference: usize,
) -> Result<RawEstimate> {
    check_inputs(meas, anchors, noise)?;
    let sys = build_system(meas, anchors, reference)?;
    let h = ConstraintMatrices::new(anchors.dim());
    let (q1, q2) = coefficients_from_system(&sys, &h);
    let sol = solve_pair(&q1, &q2)?;

    let mut pairs: Vec<(AuxiliaryPair, bool)> = sol.real.iter().map(|&p| (p, false)).collect();
    pairs.extend(sol.projected.iter().map(|&p| (p, true)));
    if pairs.is_empty() {
        pairs.push((sol.complex_seed.unwrap_or(AuxiliaryPair::new(0.0, 0.0)), true));
    }

    let candidates: Vec<Candidate> = pairs
        .into_iter()
        .filter_map(|(aux, projected)| {
            let theta = sys.theta(aux.lambda1, aux.lambda2);
            let state = UdState::from_vector(&theta);
            if !state.is_finite() {
                return None;
            }
            let cost = residuals(&state, meas, anchors, noise).weighted_cost;
            let weighted_cost = if cost.is_finite() { cost } else { f64::INFINITY };
            Some(Candidate { aux, state, weighted_cost, projected })
        })
        .collect();

    let selected = select(&candidates)
        .ok_or_else(|| LasError::Singular("no finite candidate from the auxiliary system".into()))?;
    Ok(RawEstimate {
        state: candidates[selected].state.clone(),
        fallback: candidates[selected].projected,
        candidates,
        selected,
        ill_conditioned: sol.ill_conditioned,
    })
}

fn select(candidates: &[Candidate]) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            a.weighted_cost
                .total_cmp(&b.weighted_cost)
                .then_with(|| a.state.to_vector().norm().total_cmp(&b.state.to_vector().norm()))
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub state: UdState,
    /// `(J̃ᵀWJ̃)⁻¹` at the last linearization point.
    pub covariance: DMatrix<f64>,
}

/// `θ ← θ + (JᵀWJ)⁻¹JᵀW(γ − h(θ))`, applied `steps` times (at least once).
pub fn wls_refine(
    raw: &UdState,
    meas: &MeasurementSet,
    anchors: &AnchorSet,
    noise: &NoiseSpec,
    steps: usize,
) -> Result<Refinement> {
    check_inputs(meas, anchors, noise)?;
    if !raw.is_finite() {
        return Err(LasError::Domain("raw estimate is not finite".into()));
    }
    let weights = noise.weights();
    let gamma = meas.gamma();
    let mut theta = raw.to_vector();
    let mut covariance = DMatrix::zeros(theta.len(), theta.len());
    for _ in 0..steps.max(1) {
        let state = UdState::from_vector(&theta);
        let j = jacobian(&state, anchors)?;
        let normal = weighted_normal_matrix(&j, &weights);
        covariance = invert_spd(&normal)?;
        let r = &gamma - measurement_fn(&state, anchors);
        let jt_w_r = j.transpose() * r.component_mul(&weights);
        theta += &covariance * jt_w_r;
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(LasError::Singular("refinement step is not finite".into()));
        }
    }
    Ok(Refinement { state: UdState::from_vector(&theta), covariance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EstimateFlags {
    pub degenerate_geometry: bool,
    pub no_real_root_fallback: bool,
    pub refinement_singular: bool,
    pub ill_conditioned_elimination: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub raw: Option<UdState>,
    /// Refined estimate. Equals `raw` when the refinement was singular.
    pub refined: Option<UdState>,
    pub candidates: Vec<Candidate>,
    pub selected: Option<usize>,
    pub refinement_cov: Option<DMatrix<f64>>,
    /// Residuals of `refined`.
    pub residuals: Option<Residuals>,
    pub flags: EstimateFlags,
    /// Description of the failure behind a set flag, if any.
    pub diagnostic: Option<String>,
}

impl EstimateReport {
    fn failed(flags: EstimateFlags, diagnostic: String) -> Self {
        Self {
            raw: None,
            refined: None,
            candidates: Vec::new(),
            selected: None,
            refinement_cov: None,
            residuals: None,
            flags,
            diagnostic: Some(diagnostic),
        }
    }
}

/// Runs the full pipeline. Structural input errors (mismatched lengths, too
/// few anchors) are returned as `Err`; numerical trouble is reported through
/// [`EstimateFlags`].
pub fn estimate(
    meas: &MeasurementSet,
    anchors: &AnchorSet,
    noise: &NoiseSpec,
    opts: &EstimatorOptions,
) -> Result<EstimateReport> {
    check_inputs(meas, anchors, noise)?;
    if anchors.len() < anchors.dim() + 2 {
        return Err(LasError::Config(format!(
            "{} anchors cannot resolve a {}-dimensional state",
            anchors.len(),
            anchors.dim()
        )));
    }
    if meas.rho.iter().chain(&meas.tau).any(|x| !x.is_finite()) {
        return Err(LasError::Domain("measurements must be finite".into()));
    }

    let mut flags = EstimateFlags::default();
    let raw = match raw_estimate(meas, anchors, noise, opts.reference) {
        Ok(raw) => raw,
        Err(err) => {
            flags.degenerate_geometry = matches!(err, LasError::DegenerateGeometry { .. });
            if !flags.degenerate_geometry {
                flags.no_real_root_fallback = true;
            }
            return Ok(EstimateReport::failed(flags, err.to_string()));
        }
    };
    flags.no_real_root_fallback = raw.fallback;
    flags.ill_conditioned_elimination = raw.ill_conditioned;

    let (refined, cov, diagnostic) = match wls_refine(&raw.state, meas, anchors, noise, opts.refine_steps) {
        Ok(r) => (r.state, Some(r.covariance), None),
        Err(err) => {
            flags.refinement_singular = true;
            (raw.state.clone(), None, Some(err.to_string()))
        }
    };
    let residuals = residuals(&refined, meas, anchors, noise);
    Ok(EstimateReport {
        raw: Some(raw.state),
        refined: Some(refined),
        candidates: raw.candidates,
        selected: Some(raw.selected),
        refinement_cov: cov,
        residuals: Some(residuals),
        flags,
        diagnostic,
    })
}

fn check_inputs(meas: &MeasurementSet, anchors: &AnchorSet, noise: &NoiseSpec) -> Result<()> {
    meas.check_against(anchors)?;
    noise.validate()?;
    if noise.len() != anchors.len() {
        return Err(LasError::Dimension(format!(
            "noise spec covers {} anchors, scenario has {}",
            noise.len(),
            anchors.len()
        )));
    }
    Ok(())
}
