//! Jacobian of the measurement model, Cramér-Rao bound, flop-count models and
//! campaign error statistics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::scenario::{predict, AnchorSet, NoiseSpec, UdState};
use crate::{LasError, Result};

/// Position errors larger than this multiple of `√CRLB` count as large errors.
pub const LARGE_ERROR_SIGMAS: f64 = 3.0;

/// Absolute floor on the large-error threshold, used when the bound is zero
/// (noise-free campaigns).
pub const LARGE_ERROR_FLOOR: f64 = 1e-6;

/// Stacked noise-free measurement function `h(θ) = [h_ρ(θ)ᵀ, h_τ(θ)ᵀ]ᵀ`.
pub fn measurement_fn(ud: &UdState, anchors: &AnchorSet) -> DVector<f64> {
    let (rho, tau) = predict(ud, anchors);
    DVector::from_iterator(2 * rho.len(), rho.into_iter().chain(tau))
}

/// `∂h/∂θ`, a `2M × (2N+2)` matrix. Request rows are `[−eᵢᵀ, 0ᵀ, −1, 0]` and
/// response rows `[−lᵢᵀ, −Δtᵢ·lᵢᵀ, 1, Δtᵢ]`, where `eᵢ` and `lᵢ` are the unit
/// vectors from the UD to anchor `i` at the request and reception instants.
pub fn jacobian(ud: &UdState, anchors: &AnchorSet) -> Result<DMatrix<f64>> {
    let m = anchors.len();
    let n = anchors.dim();
    if ud.dim() != n {
        return Err(LasError::Dimension(format!("state is {}-D, anchors are {n}-D", ud.dim())));
    }
    let mut j = DMatrix::zeros(2 * m, 2 * n + 2);
    for (i, (q, &dt)) in anchors.positions().iter().zip(anchors.schedule()).enumerate() {
        let to_anchor = q - &ud.p;
        let to_anchor_late = &to_anchor - &ud.v * dt;
        let (d0, d1) = (to_anchor.norm(), to_anchor_late.norm());
        if !(d0 > 0.0 && d1 > 0.0) || !d0.is_finite() || !d1.is_finite() {
            return Err(LasError::Geometry(format!("UD coincides with anchor {}", i + 1)));
        }
        let e = to_anchor / d0;
        let l = to_anchor_late / d1;
        for k in 0..n {
            j[(i, k)] = -e[k];
            j[(m + i, k)] = -l[k];
            j[(m + i, n + k)] = -l[k] * dt;
        }
        j[(i, 2 * n)] = -1.0;
        j[(m + i, 2 * n)] = 1.0;
        j[(m + i, 2 * n + 1)] = dt;
    }
    Ok(j)
}

/// `JᵀWJ` for a diagonal weight vector.
pub fn weighted_normal_matrix(j: &DMatrix<f64>, weights: &DVector<f64>) -> DMatrix<f64> {
    let mut wj = j.clone();
    for (mut row, w) in wj.row_iter_mut().zip(weights.iter()) {
        row *= *w;
    }
    let mut f = j.transpose() * wj;
    // exact symmetry
    let k = f.nrows();
    for r in 0..k {
        for c in 0..r {
            let avg = 0.5 * (f[(r, c)] + f[(c, r)]);
            f[(r, c)] = avg;
            f[(c, r)] = avg;
        }
    }
    f
}

/// Inverts a symmetric positive definite matrix after scaling it to unit
/// diagonal, failing if the scaled matrix is numerically singular.
pub(crate) fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let diag = m.diagonal();
    if diag.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(LasError::Singular("normal matrix has a non-positive diagonal".into()));
    }
    let inv_sqrt = diag.map(|d| 1.0 / d.sqrt());
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] * inv_sqrt[r] * inv_sqrt[c]);
    let chol = scaled
        .cholesky()
        .ok_or_else(|| LasError::Singular("normal matrix is not positive definite".into()))?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |lo, &d| lo.min(d.abs()));
    // pivots of a unit-diagonal matrix are at most one; their squared minimum
    // bounds the reciprocal condition number
    if min_pivot * min_pivot < 1e-14 {
        return Err(LasError::Singular(format!("normal matrix is ill-conditioned (pivot {min_pivot:.2e})")));
    }
    let inv = chol.inverse();
    let inv = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| inv[(r, c)] * inv_sqrt[r] * inv_sqrt[c]);
    if inv.iter().any(|x| !x.is_finite()) {
        return Err(LasError::Singular("normal matrix inverse is not finite".into()));
    }
    Ok(inv)
}

/// Traces of the diagonal blocks of a `(2N+2)²` covariance, i.e. the summed
/// variances of position, velocity, offset and drift.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockTraces {
    pub position: f64,
    pub velocity: f64,
    pub offset: f64,
    pub drift: f64,
}

impl BlockTraces {
    pub fn from_covariance(cov: &DMatrix<f64>) -> Self {
        let n = (cov.nrows() - 2) / 2;
        let tr = |start: usize, len: usize| (start..start + len).map(|i| cov[(i, i)]).sum::<f64>();
        Self {
            position: tr(0, n),
            velocity: tr(n, n),
            offset: cov[(2 * n, 2 * n)],
            drift: cov[(2 * n + 1, 2 * n + 1)],
        }
    }

    pub fn sqrt(&self) -> Self {
        Self {
            position: self.position.sqrt(),
            velocity: self.velocity.sqrt(),
            offset: self.offset.sqrt(),
            drift: self.drift.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrlbResult {
    /// `JᵀWJ` at the true state.
    pub fisher: DMatrix<f64>,
    /// `(JᵀWJ)⁻¹`.
    pub crlb: DMatrix<f64>,
    pub blocks: BlockTraces,
}

impl CrlbResult {
    /// `√trace` of the position block, the usual position-error bound.
    pub fn position_bound(&self) -> f64 {
        self.blocks.position.sqrt()
    }
}

/// Cramér-Rao lower bound `(JᵀWJ)⁻¹` evaluated at the true state.
pub fn crlb(truth: &UdState, anchors: &AnchorSet, noise: &NoiseSpec) -> Result<CrlbResult> {
    if noise.len() != anchors.len() {
        return Err(LasError::Dimension(format!(
            "noise spec covers {} anchors, scenario has {}",
            noise.len(),
            anchors.len()
        )));
    }
    let j = jacobian(truth, anchors)?;
    let fisher = weighted_normal_matrix(&j, &noise.weights());
    let crlb = invert_spd(&fisher).map_err(|_| LasError::DegenerateGeometry { ratio: 0.0 })?;
    let blocks = BlockTraces::from_covariance(&crlb);
    Ok(CrlbResult { fisher, crlb, blocks })
}

/// Modelled flop count of one closed-form estimate.
pub fn flops_cftwlas(n: u64, m: u64) -> u64 {
    32 * n.pow(3) + 32 * n * n * m + 104 * n * n + 124 * n * m + 148 * n + 130 * m + 697
}

/// Modelled flop count of one Gauss-Newton iteration.
pub fn flops_iterative_per_iter(n: u64, m: u64) -> u64 {
    16 * n.pow(3) + 16 * n * n * m + 56 * n * n + 44 * n * m + 64 * n + 32 * m + 24
}

/// One Monte-Carlo run as seen by [`error_stats`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub truth: UdState,
    /// Intermediate estimate, when the method has one.
    pub raw: Option<UdState>,
    /// Final estimate; `None` if the method failed outright.
    pub estimate: Option<UdState>,
    /// CRLB block traces at the truth; zero for noise-free runs.
    pub crlb: BlockTraces,
    pub fallback: bool,
}

/// Error statistics of one campaign cell.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorStats {
    pub runs: usize,
    /// Runs that produced no estimate at all.
    pub failures: usize,
    pub rmse: BlockTraces,
    /// Position RMSE of the intermediate estimate, if any run had one.
    pub raw_rmse_pos: Option<f64>,
    /// Campaign average of the per-run `√trace` CRLB values.
    pub crlb: BlockTraces,
    /// Fraction of runs whose position error exceeds `3·√CRLB` (failures included).
    pub large_error_rate: f64,
    pub fallback_rate: f64,
}

/// Per-block RMSE, averaged bounds and large-error rate over a set of runs.
/// A run sitting exactly on the `3·√CRLB` threshold is not a large error.
pub fn error_stats(runs: &[RunRecord]) -> Result<ErrorStats> {
    if runs.is_empty() {
        return Err(LasError::Config("error statistics need at least one run".into()));
    }
    let mut sq = BlockTraces::default();
    let mut bound = BlockTraces::default();
    let (mut raw_sq, mut raw_count) = (0.0, 0usize);
    let (mut ok, mut large, mut fallback) = (0usize, 0usize, 0usize);

    for run in runs {
        let b = run.crlb.sqrt();
        bound.position += b.position;
        bound.velocity += b.velocity;
        bound.offset += b.offset;
        bound.drift += b.drift;
        if run.fallback {
            fallback += 1;
        }
        if let Some(raw) = &run.raw {
            raw_sq += (&raw.p - &run.truth.p).norm_squared();
            raw_count += 1;
        }
        let Some(est) = &run.estimate else {
            large += 1;
            continue;
        };
        ok += 1;
        let pos_err = (&est.p - &run.truth.p).norm();
        sq.position += pos_err * pos_err;
        sq.velocity += (&est.v - &run.truth.v).norm_squared();
        sq.offset += (est.b - run.truth.b).powi(2);
        sq.drift += (est.w - run.truth.w).powi(2);
        let threshold = (LARGE_ERROR_SIGMAS * b.position).max(LARGE_ERROR_FLOOR);
        if !(pos_err <= threshold) {
            large += 1;
        }
    }

    let total = runs.len() as f64;
    let mean_sqrt = |s: f64, k: usize| if k == 0 { f64::NAN } else { (s / k as f64).sqrt() };
    Ok(ErrorStats {
        runs: runs.len(),
        failures: runs.len() - ok,
        rmse: BlockTraces {
            position: mean_sqrt(sq.position, ok),
            velocity: mean_sqrt(sq.velocity, ok),
            offset: mean_sqrt(sq.offset, ok),
            drift: mean_sqrt(sq.drift, ok),
        },
        raw_rmse_pos: (raw_count > 0).then(|| (raw_sq / raw_count as f64).sqrt()),
        crlb: BlockTraces {
            position: bound.position / total,
            velocity: bound.velocity / total,
            offset: bound.offset / total,
            drift: bound.drift / total,
        },
        large_error_rate: large as f64 / total,
        fallback_rate: fallback as f64 / total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_square_scenario, sample_ud_state, RespSigmaModel, UdPrior};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn request_row_for_unit_direction() {
        let anchors = AnchorSet::new(vec![v(&[1.0, 0.0]), v(&[0.0, 5.0])], vec![0.01, 0.02]).unwrap();
        let j = jacobian(&UdState::static_at(v(&[0.0, 0.0])), &anchors).unwrap();
        assert_eq!(j.row(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
        assert_eq!(j.row(2).iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.0, -0.01, 0.0, 1.0, 0.01]);
    }

    #[test]
    fn static_ud_has_equal_directions() {
        let anchors = build_square_scenario(800.0, 8).unwrap();
        let ud = UdState::new(v(&[123.0, 456.0]), v(&[0.0, 0.0]), 10.0, 3.0);
        let j = jacobian(&ud, &anchors).unwrap();
        for i in 0..8 {
            assert_eq!(j[(i, 0)], j[(8 + i, 0)]);
            assert_eq!(j[(i, 1)], j[(8 + i, 1)]);
        }
    }

    #[test]
    fn coincident_ud_is_a_geometry_error() {
        let anchors = build_square_scenario(800.0, 4).unwrap();
        let err = jacobian(&UdState::static_at(v(&[800.0, 0.0])), &anchors).unwrap_err();
        assert!(matches!(err, LasError::Geometry(_)));
    }

    #[test]
    fn bound_inverts_fisher() {
        let anchors = build_square_scenario(800.0, 8).unwrap();
        let ud = UdState::new(v(&[300.0, 420.0]), v(&[5.0, -3.0]), 100.0, 20.0);
        let noise = NoiseSpec::uniform(8, 2.0).unwrap();
        let res = crlb(&ud, &anchors, &noise).unwrap();
        let prod = &res.crlb * &res.fisher;
        assert!((prod - DMatrix::identity(6, 6)).amax() < 1e-8);
        let f = &res.fisher;
        assert!((f - f.transpose()).amax() <= 1e-12 * f.amax());
    }

    #[test]
    fn orthonormal_jacobian_unit_weights() {
        // JᵀWJ with W = I and orthonormal J is the identity, so is its inverse.
        let j = DMatrix::<f64>::identity(6, 6).insert_rows(6, 2, 0.0);
        let f = weighted_normal_matrix(&j, &DVector::from_element(8, 1.0));
        let inv = invert_spd(&f).unwrap();
        assert!((inv - DMatrix::identity(6, 6)).amax() < 1e-15);
    }

    #[test]
    fn bound_scales_with_sigma_squared() {
        let anchors = build_square_scenario(800.0, 8).unwrap();
        let ud = UdState::new(v(&[200.0, 520.0]), v(&[10.0, 30.0]), 4000.0, -1500.0);
        let noise = NoiseSpec::from_snr(&anchors, &ud.p, 30.0, RespSigmaModel::MeanDistance).unwrap();
        let a = crlb(&ud, &anchors, &noise).unwrap();
        let b = crlb(&ud, &anchors, &noise.scaled(3.0)).unwrap();
        assert!((&b.crlb - &a.crlb * 9.0).amax() <= 1e-9 * b.crlb.amax());
    }

    #[test]
    fn flop_models() {
        assert_eq!(flops_cftwlas(2, 8), 5713);
        assert_eq!(flops_iterative_per_iter(2, 8), 1976);
        assert_eq!(flops_cftwlas(3, 8), 9261);
    }

    fn central_difference(ud: &UdState, anchors: &AnchorSet, step: f64) -> DMatrix<f64> {
        let theta = ud.to_vector();
        let k = theta.len();
        let mut j = DMatrix::zeros(2 * anchors.len(), k);
        for c in 0..k {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[c] += step;
            minus[c] -= step;
            let hp = measurement_fn(&UdState::from_vector(&plus), anchors);
            let hm = measurement_fn(&UdState::from_vector(&minus), anchors);
            j.set_column(c, &((hp - hm) / (2.0 * step)));
        }
        j
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let anchors = build_square_scenario(800.0, 8).unwrap();
        let prior = UdPrior {
            center: vec![400.0, 400.0],
            region_side: 500.0,
            vmax: 50.0,
            offset_range_s: (0.0, 20e-6),
            drift_range_ppm: (-10.0, 10.0),
        };
        for _ in 0..100 {
            let ud = sample_ud_state(&mut rng, &prior);
            let analytic = jacobian(&ud, &anchors).unwrap();
            let numeric = central_difference(&ud, &anchors, 1e-3);
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let rel = (a - n).abs() / a.abs().max(1.0);
                assert!(rel <= 1e-5, "{a} vs {n}");
            }
        }
        let _ = rng.random::<u8>();
    }

    fn record(truth: &UdState, est: Option<UdState>, pos_var: f64) -> RunRecord {
        RunRecord {
            truth: truth.clone(),
            raw: est.clone(),
            estimate: est,
            crlb: BlockTraces { position: pos_var, velocity: 1.0, offset: 1.0, drift: 1.0 },
            fallback: false,
        }
    }

    #[test]
    fn zero_errors() {
        let t = UdState::static_at(v(&[1.0, 2.0]));
        let stats = error_stats(&[record(&t, Some(t.clone()), 4.0)]).unwrap();
        assert_eq!(stats.rmse.position, 0.0);
        assert_eq!(stats.large_error_rate, 0.0);
        assert_eq!(stats.raw_rmse_pos, Some(0.0));
        assert_relative_eq!(stats.crlb.position, 2.0);
    }

    #[test]
    fn threshold_is_strict() {
        let t = UdState::static_at(v(&[0.0, 0.0]));
        // √CRLB = 2, error exactly 6 = 3·√CRLB
        let on_edge = UdState::static_at(v(&[6.0, 0.0]));
        let stats = error_stats(&[record(&t, Some(on_edge), 4.0)]).unwrap();
        assert_eq!(stats.large_error_rate, 0.0);
        let beyond = UdState::static_at(v(&[6.0001, 0.0]));
        let stats = error_stats(&[record(&t, Some(beyond), 4.0)]).unwrap();
        assert_eq!(stats.large_error_rate, 1.0);
    }

    #[test]
    fn failures_count_as_large_errors() {
        let t = UdState::static_at(v(&[0.0, 0.0]));
        let runs = vec![record(&t, Some(t.clone()), 1.0), record(&t, None, 1.0)];
        let stats = error_stats(&runs).unwrap();
        assert_eq!(stats.failures, 1);
        assert_relative_eq!(stats.large_error_rate, 0.5);
        assert_eq!(stats.rmse.position, 0.0);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(error_stats(&[]).is_err());
    }
}
