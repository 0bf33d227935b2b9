//! Squared-and-differenced form of the two-way TOA equations.
//!
//! Squaring `ρᵢ + b = ‖qᵢ − p‖` and `τᵢ − b − ωΔtᵢ = ‖qᵢ + … ‖` and subtracting
//! the reference anchor's equation removes `b² − ‖p‖²`, leaving
//!
//! ```text
//! A·θ = y + G·[λ₁, λ₂]ᵀ,   λ₁ = ω² − ‖v‖²,   λ₂ = bω − pᵀv
//! ```
//!
//! which is linear in `θ` once the two auxiliary terms are treated as unknowns.

use nalgebra::{DMatrix, DVector};

use crate::scenario::{AnchorSet, MeasurementSet, UdState};
use crate::{LasError, Result};

/// Singular-value ratio below which `A` is considered rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    /// `2(M−1) × (2N+2)`; request rows first, then response rows.
    pub a: DMatrix<f64>,
    pub y: DVector<f64>,
    /// `2(M−1) × 2`; the request half is identically zero.
    pub g_mat: DMatrix<f64>,
    /// Least-squares solution for the `λ`-free part: `θ = g + U·λ`.
    pub g: DVector<f64>,
    pub u: DMatrix<f64>,
    /// `σ_min / σ_max` of `A`.
    pub rank_ratio: f64,
}

impl LinearSystem {
    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    /// `θ = g + U·λ` for a given auxiliary pair.
    pub fn theta(&self, lambda1: f64, lambda2: f64) -> DVector<f64> {
        &self.g + &self.u * DVector::from_vec(vec![lambda1, lambda2])
    }

    /// `A·θ − y − G·λ`.
    pub fn residual(&self, theta: &DVector<f64>, lambda1: f64, lambda2: f64) -> DVector<f64> {
        &self.a * theta - &self.y - &self.g_mat * DVector::from_vec(vec![lambda1, lambda2])
    }
}

/// The quadratic forms tying `θ` back to the auxiliary variables:
/// `θᵀH₁θ = ω² − ‖v‖²` and `θᵀH₂θ = 2(bω − pᵀv)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMatrices {
    pub h1: DMatrix<f64>,
    pub h2: DMatrix<f64>,
}

impl ConstraintMatrices {
    pub fn new(dim: usize) -> Self {
        let k = 2 * dim + 2;
        let mut h1 = DMatrix::zeros(k, k);
        for i in dim..2 * dim {
            h1[(i, i)] = -1.0;
        }
        h1[(k - 1, k - 1)] = 1.0;

        let mut h2 = DMatrix::zeros(k, k);
        for i in 0..dim {
            h2[(i, dim + i)] = -1.0;
            h2[(dim + i, i)] = -1.0;
        }
        h2[(k - 2, k - 1)] = 1.0;
        h2[(k - 1, k - 2)] = 1.0;
        Self { h1, h2 }
    }
}

/// `(λ₁, λ₂) = (ω² − ‖v‖², bω − pᵀv)` for a known state.
pub fn auxiliary_values(ud: &UdState) -> (f64, f64) {
    (ud.w * ud.w - ud.v.norm_squared(), ud.b * ud.w - ud.p.dot(&ud.v))
}

/// Builds `A`, `y`, `G` with anchor `reference` (zero-based) as the differencing
/// reference, and solves for `g` and `U` by SVD.
pub fn build_system(meas: &MeasurementSet, anchors: &AnchorSet, reference: usize) -> Result<LinearSystem> {
    meas.check_against(anchors)?;
    let m = anchors.len();
    let n = anchors.dim();
    if m < n + 2 {
        return Err(LasError::Config(format!(
            "{m} anchors cannot resolve a {n}-dimensional state; at least {} are needed",
            n + 2
        )));
    }
    if reference >= m {
        return Err(LasError::Config(format!("reference anchor {reference} out of range 0..{m}")));
    }
    let cols = 2 * n + 2;
    let rows = 2 * (m - 1);
    let mut a = DMatrix::zeros(rows, cols);
    let mut y = DVector::zeros(rows);
    let mut g_mat = DMatrix::zeros(rows, 2);

    let q1 = anchors.position(reference);
    let dt1 = anchors.schedule()[reference];
    let (rho1, tau1) = (meas.rho[reference], meas.tau[reference]);
    let q1_sq = q1.norm_squared();

    let others = (0..m).filter(|&i| i != reference);
    for (row, i) in others.enumerate() {
        let qi = anchors.position(i);
        let dti = anchors.schedule()[i];
        let (rhoi, taui) = (meas.rho[i], meas.tau[i]);
        let dq = qi - q1;
        let half_dq_sq = (qi.norm_squared() - q1_sq) / 2.0;

        // request row
        a.view_mut((row, 0), (1, n)).copy_from(&dq.transpose());
        a[(row, 2 * n)] = rhoi - rho1;
        y[row] = half_dq_sq - (rhoi * rhoi - rho1 * rho1) / 2.0;

        // response row
        let r = row + m - 1;
        a.view_mut((r, 0), (1, n)).copy_from(&dq.transpose());
        let dv = qi * dti - q1 * dt1;
        a.view_mut((r, n), (1, n)).copy_from(&dv.transpose());
        a[(r, 2 * n)] = tau1 - taui;
        a[(r, 2 * n + 1)] = dt1 * tau1 - dti * taui;
        y[r] = half_dq_sq - (taui * taui - tau1 * tau1) / 2.0;
        g_mat[(r, 0)] = (dt1 * dt1 - dti * dti) / 2.0;
        g_mat[(r, 1)] = dt1 - dti;
    }

    let svd = a.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let rank_ratio = if s_max > 0.0 { s_min / s_max } else { 0.0 };
    if !(rank_ratio >= RANK_TOLERANCE) {
        return Err(LasError::DegenerateGeometry { ratio: rank_ratio });
    }
    let u_svd = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let inv_s = DMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / s));
    let pinv = v_t.transpose() * inv_s * u_svd.transpose();
    let g = &pinv * &y;
    let u = &pinv * &g_mat;

    Ok(LinearSystem { a, y, g_mat, g, u, rank_ratio })
}
