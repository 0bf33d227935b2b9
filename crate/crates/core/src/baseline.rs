//! Iterative maximum-likelihood baseline: undamped Gauss-Newton over the same
//! weighted two-way TOA residuals the closed-form estimator refines.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::analysis::{invert_spd, jacobian, measurement_fn, weighted_normal_matrix};
use crate::scenario::{AnchorSet, MeasurementSet, NoiseSpec, UdState};
use crate::{LasError, Result};

pub const DEFAULT_MAX_ITER: usize = 20;
/// Step-norm convergence threshold, meters.
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussNewtonOptions {
    pub max_iter: usize,
    /// Stop once `‖θ_{k+1} − θ_k‖ < tol`. A non-positive value disables the
    /// test so exactly `max_iter` iterations run.
    pub tol: f64,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        Self { max_iter: DEFAULT_MAX_ITER, tol: DEFAULT_TOL }
    }
}

/// Iterates and costs; `iterates[0]` is the initialization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationTrace {
    pub iterates: Vec<UdState>,
    pub costs: Vec<f64>,
    pub converged: bool,
    /// A normal matrix was singular or an iterate stopped being finite.
    pub diverged: bool,
    pub iterations_used: usize,
}

fn weighted_cost(ud: &UdState, gamma: &DVector<f64>, anchors: &AnchorSet, weights: &DVector<f64>) -> f64 {
    let r = gamma - measurement_fn(ud, anchors);
    r.iter().zip(weights.iter()).map(|(ri, wi)| wi * ri * ri).sum()
}

/// Gauss-Newton from `init`. Returns the last valid iterate; divergence is
/// recorded in the trace rather than repaired.
pub fn gauss_newton(
    meas: &MeasurementSet,
    anchors: &AnchorSet,
    noise: &NoiseSpec,
    init: &UdState,
    opts: &GaussNewtonOptions,
) -> Result<(UdState, IterationTrace)> {
    meas.check_against(anchors)?;
    if noise.len() != anchors.len() {
        return Err(LasError::Dimension("noise spec and anchors differ in length".into()));
    }
    if !init.is_finite() || init.dim() != anchors.dim() {
        return Err(LasError::Domain("initial state must be finite and match the anchor dimension".into()));
    }
    let weights = noise.weights();
    let gamma = meas.gamma();
    let mut theta = init.to_vector();
    let mut trace = IterationTrace {
        iterates: vec![init.clone()],
        costs: vec![weighted_cost(init, &gamma, anchors, &weights)],
        ..Default::default()
    };

    for _ in 0..opts.max_iter {
        let state = UdState::from_vector(&theta);
        let step = jacobian(&state, anchors).and_then(|j| {
            let normal = weighted_normal_matrix(&j, &weights);
            let inv = invert_spd(&normal)?;
            let r = &gamma - measurement_fn(&state, anchors);
            Ok(inv * (j.transpose() * r.component_mul(&weights)))
        });
        let step = match step {
            Ok(s) if s.iter().all(|x| x.is_finite()) => s,
            _ => {
                trace.diverged = true;
                break;
            }
        };
        theta += &step;
        let next = UdState::from_vector(&theta);
        trace.iterations_used += 1;
        trace.costs.push(weighted_cost(&next, &gamma, anchors, &weights));
        trace.iterates.push(next);
        if step.norm() < opts.tol {
            trace.converged = true;
            break;
        }
    }
    let last = trace.iterates.last().cloned().unwrap_or_else(|| init.clone());
    Ok((last, trace))
}

/// Initial guess: the true position plus isotropic Gaussian noise of standard
/// deviation `pos_std` per axis; velocity, offset and drift start at zero.
pub fn make_initializer<R: Rng + ?Sized>(truth: &UdState, pos_std: f64, rng: &mut R) -> UdState {
    let n = truth.dim();
    let p = DVector::from_iterator(
        n,
        truth.p.iter().map(|&x| x + pos_std * rng.sample::<f64, _>(StandardNormal)),
    );
    UdState::new(p, DVector::zeros(n), 0.0, 0.0)
}
