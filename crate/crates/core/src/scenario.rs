//! Ground truth, the noise-free two-way TOA forward model, and measurement noise.

use nalgebra::{DVector, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{ppm_to_mps, seconds_to_meters, LasError, Result};

/// Response delay between consecutive anchors in the square layouts, in seconds.
pub const DEFAULT_RESPONSE_INTERVAL: f64 = 0.010;

/// Known anchor positions plus the instants, relative to the request, at which
/// the UD receives each anchor's response.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    positions: Vec<DVector<f64>>,
    schedule: Vec<f64>,
}

impl AnchorSet {
    pub fn new(positions: Vec<DVector<f64>>, schedule: Vec<f64>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(LasError::Config(format!(
                "at least 2 anchors are required, got {}",
                positions.len()
            )));
        }
        if positions.len() != schedule.len() {
            return Err(LasError::Dimension(format!(
                "{} anchor positions but {} response delays",
                positions.len(),
                schedule.len()
            )));
        }
        let dim = positions[0].len();
        if dim == 0 {
            return Err(LasError::Config("anchor positions must have at least one coordinate".into()));
        }
        for (i, q) in positions.iter().enumerate() {
            if q.len() != dim {
                return Err(LasError::Dimension(format!(
                    "anchor {} has {} coordinates, expected {dim}",
                    i + 1,
                    q.len()
                )));
            }
            if q.iter().any(|x| !x.is_finite()) {
                return Err(LasError::Config(format!("anchor {} position is not finite", i + 1)));
            }
        }
        for i in 0..positions.len() {
            for j in 0..i {
                if positions[i] == positions[j] {
                    return Err(LasError::Config(format!(
                        "anchors {} and {} share a position",
                        j + 1,
                        i + 1
                    )));
                }
            }
        }
        if schedule.iter().any(|dt| !dt.is_finite() || *dt <= 0.0) {
            return Err(LasError::Config("response delays must be finite and positive".into()));
        }
        if schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LasError::Config("response delays must be strictly increasing".into()));
        }
        Ok(Self { positions, schedule })
    }

    /// Anchors with the evenly spaced schedule `Δtᵢ = interval · i`.
    pub fn with_interval(positions: Vec<DVector<f64>>, interval: f64) -> Result<Self> {
        let schedule = (1..=positions.len()).map(|i| interval * i as f64).collect();
        Self::new(positions, schedule)
    }

    pub fn positions(&self) -> &[DVector<f64>] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> &DVector<f64> {
        &self.positions[i]
    }

    pub fn schedule(&self) -> &[f64] {
        &self.schedule
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.positions[0].len()
    }

    /// Centroid of the anchor positions.
    pub fn centroid(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.dim());
        for q in &self.positions {
            c += q;
        }
        c / self.len() as f64
    }

    /// Applies `x -> rotation · x + offset` to every anchor.
    pub fn transformed(&self, rotation: &nalgebra::DMatrix<f64>, offset: &DVector<f64>) -> Self {
        Self {
            positions: self.positions.iter().map(|q| rotation * q + offset).collect(),
            schedule: self.schedule.clone(),
        }
    }
}

/// Position, velocity, clock offset and clock drift of the UD at the request instant.
///
/// `b` is in meters (seconds times signal speed) and `w` in meters/second
/// (dimensionless drift times signal speed).
#[derive(Debug, Clone, PartialEq)]
pub struct UdState {
    pub p: DVector<f64>,
    pub v: DVector<f64>,
    pub b: f64,
    pub w: f64,
}

impl UdState {
    pub fn new(p: DVector<f64>, v: DVector<f64>, b: f64, w: f64) -> Self {
        assert_eq!(p.len(), v.len(), "position and velocity dimensions differ");
        Self { p, v, b, w }
    }

    pub fn static_at(p: DVector<f64>) -> Self {
        let n = p.len();
        Self::new(p, DVector::zeros(n), 0.0, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    /// The stacked parameter vector `[pᵀ, vᵀ, b, ω]ᵀ` of length `2N + 2`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.dim();
        let mut theta = DVector::zeros(2 * n + 2);
        theta.rows_mut(0, n).copy_from(&self.p);
        theta.rows_mut(n, n).copy_from(&self.v);
        theta[2 * n] = self.b;
        theta[2 * n + 1] = self.w;
        theta
    }

    pub fn from_vector(theta: &DVector<f64>) -> Self {
        assert!(
            theta.len() >= 4 && theta.len() % 2 == 0,
            "parameter vector length {} is not 2N + 2",
            theta.len()
        );
        let n = (theta.len() - 2) / 2;
        Self {
            p: theta.rows(0, n).into_owned(),
            v: theta.rows(n, n).into_owned(),
            b: theta[2 * n],
            w: theta[2 * n + 1],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).all(|x| x.is_finite()) && self.b.is_finite() && self.w.is_finite()
    }

    /// Applies a rigid motion to the kinematic part; clock terms are unchanged.
    pub fn transformed(&self, rotation: &nalgebra::DMatrix<f64>, offset: &DVector<f64>) -> Self {
        Self {
            p: rotation * &self.p + offset,
            v: rotation * &self.v,
            b: self.b,
            w: self.w,
        }
    }
}

/// Noise-free request/response arrival times kept alongside synthesized data.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseFreeToa {
    pub rho: Vec<f64>,
    pub tau: Vec<f64>,
}

/// Request TOAs `ρ̂ᵢ` measured at the anchors and response TOAs `τ̂ᵢ` measured
/// at the UD, both in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub rho: Vec<f64>,
    pub tau: Vec<f64>,
    pub schedule: Vec<f64>,
    pub truth: Option<NoiseFreeToa>,
}

impl MeasurementSet {
    pub fn new(rho: Vec<f64>, tau: Vec<f64>, schedule: Vec<f64>) -> Result<Self> {
        if rho.len() != tau.len() || rho.len() != schedule.len() {
            return Err(LasError::Dimension(format!(
                "measurement lengths differ: rho {}, tau {}, schedule {}",
                rho.len(),
                tau.len(),
                schedule.len()
            )));
        }
        Ok(Self { rho, tau, schedule, truth: None })
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// Stacked measurement vector `γ = [ρ̂₁..ρ̂_M, τ̂₁..τ̂_M]ᵀ`.
    pub fn gamma(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.len(), self.rho.iter().chain(self.tau.iter()).copied())
    }

    pub(crate) fn check_against(&self, anchors: &AnchorSet) -> Result<()> {
        if self.len() != anchors.len() {
            return Err(LasError::Dimension(format!(
                "{} measurements for {} anchors",
                self.len(),
                anchors.len()
            )));
        }
        if self.schedule != anchors.schedule() {
            return Err(LasError::Dimension("measurement schedule differs from anchor schedule".into()));
        }
        Ok(())
    }
}

/// Standard deviations of the request noise at each anchor and of the
/// (shared) response noise at the UD, in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_req: Vec<f64>,
    pub sigma_resp: f64,
}

impl NoiseSpec {
    pub fn new(sigma_req: Vec<f64>, sigma_resp: f64) -> Result<Self> {
        let spec = Self { sigma_req, sigma_resp };
        spec.validate()?;
        Ok(spec)
    }

    pub fn uniform(count: usize, sigma: f64) -> Result<Self> {
        Self::new(vec![sigma; count], sigma)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_req.is_empty() {
            return Err(LasError::Config("noise spec has no request sigmas".into()));
        }
        let ok = |s: f64| s.is_finite() && s > 0.0;
        if !self.sigma_req.iter().all(|&s| ok(s)) || !ok(self.sigma_resp) {
            return Err(LasError::Config("noise standard deviations must be finite and positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sigma_req.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma_req.is_empty()
    }

    /// Diagonal of `W = diag(1/σ₁², …, 1/σ_M², 1/σ², …, 1/σ²)`.
    pub fn weights(&self) -> DVector<f64> {
        let m = self.len();
        let resp = 1.0 / (self.sigma_resp * self.sigma_resp);
        DVector::from_iterator(
            2 * m,
            self.sigma_req.iter().map(|s| 1.0 / (s * s)).chain(std::iter::repeat_n(resp, m)),
        )
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            sigma_req: self.sigma_req.iter().map(|s| s * k).collect(),
            sigma_resp: self.sigma_resp * k,
        }
    }

    /// Per-anchor request sigmas from the link SNR at the request instant;
    /// the shared response sigma is taken from a summary of the same distances.
    pub fn from_snr(anchors: &AnchorSet, p: &DVector<f64>, snr_db: f64, resp: RespSigmaModel) -> Result<Self> {
        let distances: Vec<f64> = anchors.positions().iter().map(|q| (q - p).norm()).collect();
        let sigma_req = distances
            .iter()
            .map(|&d| sigma_from_snr(d, snr_db))
            .collect::<Result<Vec<_>>>()?;
        let summary = match resp {
            RespSigmaModel::MeanDistance => distances.iter().sum::<f64>() / distances.len() as f64,
            RespSigmaModel::RmsDistance => {
                (distances.iter().map(|d| d * d).sum::<f64>() / distances.len() as f64).sqrt()
            }
            RespSigmaModel::MaxDistance => distances.iter().copied().fold(0.0, f64::max),
        };
        Self::new(sigma_req, sigma_from_snr(summary, snr_db)?)
    }
}

/// How the single response-noise sigma is derived from the per-anchor distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RespSigmaModel {
    #[default]
    MeanDistance,
    RmsDistance,
    MaxDistance,
}

/// Anchors at the corners (and optionally side midpoints) of a square with one
/// corner at the origin, responding every 10 ms.
///
/// `an_count` selects the layout: 4 uses the corners, 5 adds the midpoint of
/// the bottom side, 8 adds all four side midpoints.
pub fn build_square_scenario(side_len: f64, an_count: usize) -> Result<AnchorSet> {
    if !(side_len.is_finite() && side_len > 0.0) {
        return Err(LasError::Config(format!("square side length must be positive, got {side_len}")));
    }
    let s = side_len;
    let h = side_len / 2.0;
    let corners = [(0.0, 0.0), (s, 0.0), (s, s), (0.0, s)];
    let midpoints = [(h, 0.0), (s, h), (h, s), (0.0, h)];
    let points: Vec<(f64, f64)> = match an_count {
        4 => corners.to_vec(),
        5 => corners.iter().chain(&midpoints[..1]).copied().collect(),
        8 => corners.iter().chain(&midpoints).copied().collect(),
        other => {
            return Err(LasError::Config(format!(
                "unsupported anchor count {other}; the square layout supports 4, 5 or 8"
            )))
        }
    };
    let positions = points.into_iter().map(|(x, y)| DVector::from_vec(vec![x, y])).collect();
    AnchorSet::with_interval(positions, DEFAULT_RESPONSE_INTERVAL)
}

/// Prior over the UD state used by the simulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UdPrior {
    /// Center of the placement region.
    pub center: Vec<f64>,
    /// Side length of the (square or cubic) placement region, meters.
    pub region_side: f64,
    /// Upper bound of the speed, m/s.
    pub vmax: f64,
    /// Clock offset range in seconds.
    pub offset_range_s: (f64, f64),
    /// Clock drift range in ppm.
    pub drift_range_ppm: (f64, f64),
}

impl UdPrior {
    pub fn validate(&self) -> Result<()> {
        if self.center.is_empty() || self.center.iter().any(|x| !x.is_finite()) {
            return Err(LasError::Config("UD region center must be finite and non-empty".into()));
        }
        if !(self.region_side.is_finite() && self.region_side >= 0.0) {
            return Err(LasError::Config("UD region side must be non-negative".into()));
        }
        if !(self.vmax.is_finite() && self.vmax >= 0.0) {
            return Err(LasError::Config("vmax must be non-negative".into()));
        }
        for (name, (lo, hi)) in [("offset_range_s", self.offset_range_s), ("drift_range_ppm", self.drift_range_ppm)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(LasError::Config(format!("{name} must be a finite [lo, hi] range")));
            }
        }
        Ok(())
    }
}

/// Draws a UD state: position uniform in the region, speed uniform on
/// `[0, vmax]` with a uniform heading, offset and drift uniform over their ranges.
pub fn sample_ud_state<R: Rng + ?Sized>(rng: &mut R, prior: &UdPrior) -> UdState {
    let n = prior.center.len();
    let half = prior.region_side / 2.0;
    let p = DVector::from_iterator(
        n,
        prior.center.iter().map(|&c| c + uniform(rng, -half, half)),
    );
    let speed = uniform(rng, 0.0, prior.vmax);
    let direction = random_direction(rng, n);
    let v = direction * speed;
    let b = seconds_to_meters(uniform(rng, prior.offset_range_s.0, prior.offset_range_s.1));
    let w = ppm_to_mps(uniform(rng, prior.drift_range_ppm.0, prior.drift_range_ppm.1));
    UdState::new(p, v, b, w)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        // still consume a draw so the stream layout does not depend on the prior
        let _: f64 = rng.random();
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    if n == 2 {
        let heading = uniform(rng, 0.0, std::f64::consts::TAU);
        let u = Vector2::new(heading.cos(), heading.sin());
        return DVector::from_column_slice(u.as_slice());
    }
    loop {
        let g = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = g.norm();
        if norm > 1e-12 {
            return g / norm;
        }
    }
}

/// Noise-free arrival times `(ρ, τ)` of the two-way exchange.
///
/// `ρᵢ = ‖qᵢ − p‖ − b` and `τᵢ = ‖qᵢ − p − vΔtᵢ‖ + b + ωΔtᵢ`.
pub fn predict(ud: &UdState, anchors: &AnchorSet) -> (Vec<f64>, Vec<f64>) {
    let mut rho = Vec::with_capacity(anchors.len());
    let mut tau = Vec::with_capacity(anchors.len());
    for (q, &dt) in anchors.positions().iter().zip(anchors.schedule()) {
        rho.push((q - &ud.p).norm() - ud.b);
        tau.push((q - &ud.p - &ud.v * dt).norm() + ud.b + ud.w * dt);
    }
    (rho, tau)
}

/// Synthesizes noise-free measurements for a UD state.
pub fn forward_model(ud: &UdState, anchors: &AnchorSet) -> Result<MeasurementSet> {
    if ud.dim() != anchors.dim() {
        return Err(LasError::Dimension(format!(
            "UD state is {}-dimensional, anchors are {}-dimensional",
            ud.dim(),
            anchors.dim()
        )));
    }
    for (i, (q, &dt)) in anchors.positions().iter().zip(anchors.schedule()).enumerate() {
        let scale = 1.0 + q.norm();
        if (q - &ud.p).norm() <= 1e-12 * scale || (q - &ud.p - &ud.v * dt).norm() <= 1e-12 * scale {
            return Err(LasError::Geometry(format!("UD coincides with anchor {}", i + 1)));
        }
    }
    let (rho, tau) = predict(ud, anchors);
    Ok(MeasurementSet {
        truth: Some(NoiseFreeToa { rho: rho.clone(), tau: tau.clone() }),
        rho,
        tau,
        schedule: anchors.schedule().to_vec(),
    })
}

/// TOA noise standard deviation giving `snr_db = 10·log₁₀(d²/σ²)` at distance `d`.
pub fn sigma_from_snr(distance: f64, snr_db: f64) -> Result<f64> {
    if !(distance.is_finite() && distance > 0.0) {
        return Err(LasError::Domain(format!("distance must be positive, got {distance}")));
    }
    if !snr_db.is_finite() {
        return Err(LasError::Domain(format!("SNR must be finite, got {snr_db}")));
    }
    Ok(distance * 10f64.powf(-snr_db / 20.0))
}

/// Adds independent zero-mean Gaussian noise: `σᵢ` on the request TOAs and the
/// shared `σ` on the response TOAs. All `M` request draws come before the `M`
/// response draws.
pub fn add_noise<R: Rng + ?Sized>(meas: &MeasurementSet, noise: &NoiseSpec, rng: &mut R) -> Result<MeasurementSet> {
    if noise.len() != meas.len() {
        return Err(LasError::Dimension(format!(
            "noise spec covers {} anchors, measurements have {}",
            noise.len(),
            meas.len()
        )));
    }
    let m = meas.len();
    let draws: Vec<f64> = (0..2 * m).map(|_| rng.sample(StandardNormal)).collect();
    let rho = meas
        .rho
        .iter()
        .zip(&noise.sigma_req)
        .zip(&draws[..m])
        .map(|((r, s), z)| r + s * z)
        .collect();
    let tau = meas.tau.iter().zip(&draws[m..]).map(|(t, z)| t + noise.sigma_resp * z).collect();
    let truth = meas.truth.clone().or_else(|| {
        Some(NoiseFreeToa { rho: meas.rho.clone(), tau: meas.tau.clone() })
    });
    Ok(MeasurementSet { rho, tau, schedule: meas.schedule.clone(), truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v2(x: f64, y: f64) -> DVector<f64> {
        DVector::from_vec(vec![x, y])
    }

    fn paper_prior() -> UdPrior {
        UdPrior {
            center: vec![400.0, 400.0],
            region_side: 500.0,
            vmax: 50.0,
            offset_range_s: (0.0, 20e-6),
            drift_range_ppm: (-10.0, 10.0),
        }
    }

    #[test]
    fn square_with_eight_anchors() {
        let a = build_square_scenario(800.0, 8).unwrap();
        let expected = [
            (0.0, 0.0),
            (800.0, 0.0),
            (800.0, 800.0),
            (0.0, 800.0),
            (400.0, 0.0),
            (800.0, 400.0),
            (400.0, 800.0),
            (0.0, 400.0),
        ];
        for (q, (x, y)) in a.positions().iter().zip(expected) {
            assert_eq!(q, &v2(x, y));
        }
        for (i, dt) in a.schedule().iter().enumerate() {
            assert_relative_eq!(*dt, 0.01 * (i + 1) as f64, max_relative = 1e-15);
        }
    }

    #[test]
    fn square_with_four_and_five_anchors() {
        let a = build_square_scenario(800.0, 4).unwrap();
        assert_eq!(a.len(), 4);
        assert_relative_eq!(a.schedule()[3], 0.04);
        let a = build_square_scenario(800.0, 5).unwrap();
        assert_eq!(a.position(4), &v2(400.0, 0.0));
        let a = build_square_scenario(2.0, 4).unwrap();
        assert_eq!(a.position(2), &v2(2.0, 2.0));
    }

    #[test]
    fn unsupported_anchor_count() {
        assert!(matches!(build_square_scenario(800.0, 6), Err(LasError::Config(_))));
        assert!(build_square_scenario(-1.0, 4).is_err());
    }

    #[test]
    fn anchor_set_invariants() {
        let q = vec![v2(0.0, 0.0), v2(1.0, 0.0)];
        assert!(AnchorSet::new(q.clone(), vec![0.02, 0.01]).is_err());
        assert!(AnchorSet::new(q.clone(), vec![0.0, 0.01]).is_err());
        assert!(AnchorSet::new(vec![v2(0.0, 0.0), v2(0.0, 0.0)], vec![0.01, 0.02]).is_err());
        assert!(AnchorSet::new(vec![v2(0.0, 0.0)], vec![0.01]).is_err());
        assert!(AnchorSet::new(q, vec![0.01, 0.02]).is_ok());
    }

    #[test]
    fn forward_model_examples() {
        let anchors = AnchorSet::new(vec![v2(3.0, 4.0), v2(-3.0, 4.0)], vec![0.01, 0.02]).unwrap();
        let origin = v2(0.0, 0.0);

        let m = forward_model(&UdState::static_at(origin.clone()), &anchors).unwrap();
        assert_relative_eq!(m.rho[0], 5.0);
        assert_relative_eq!(m.tau[0], 5.0);

        let ud = UdState::new(origin.clone(), v2(0.0, 0.0), 2.0, 0.0);
        let m = forward_model(&ud, &anchors).unwrap();
        assert_relative_eq!(m.rho[0], 3.0);
        assert_relative_eq!(m.tau[0], 7.0);

        let ud = UdState::new(origin, v2(100.0, 0.0), 0.0, 0.0);
        let m = forward_model(&ud, &anchors).unwrap();
        assert_relative_eq!(m.rho[0], 5.0);
        assert_relative_eq!(m.tau[0], 20f64.sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn forward_model_rejects_coincident_ud() {
        let anchors = build_square_scenario(10.0, 4).unwrap();
        let err = forward_model(&UdState::static_at(v2(10.0, 0.0)), &anchors).unwrap_err();
        assert!(matches!(err, LasError::Geometry(_)));
    }

    #[test]
    fn clock_terms_recover_true_ranges() {
        let anchors = build_square_scenario(800.0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let ud = sample_ud_state(&mut rng, &paper_prior());
            let m = forward_model(&ud, &anchors).unwrap();
            for i in 0..anchors.len() {
                let q = anchors.position(i);
                let dt = anchors.schedule()[i];
                let d0 = (q - &ud.p).norm();
                let d1 = (q - &ud.p - &ud.v * dt).norm();
                assert!(m.rho[i] + ud.b >= 0.0);
                assert_relative_eq!(m.rho[i] + ud.b, d0, max_relative = 1e-12);
                assert_relative_eq!(m.tau[i] - ud.b - ud.w * dt, d1, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn sigma_from_snr_examples() {
        assert_relative_eq!(sigma_from_snr(100.0, 40.0).unwrap(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(sigma_from_snr(100.0, 20.0).unwrap(), 10.0, max_relative = 1e-14);
        // center-to-corner distance of the 800 m square
        assert_relative_eq!(sigma_from_snr(565.7, 30.0).unwrap(), 17.889, max_relative = 1e-4);
        assert!(matches!(sigma_from_snr(0.0, 30.0), Err(LasError::Domain(_))));
        assert!(sigma_from_snr(-5.0, 30.0).is_err());
    }

    #[test]
    fn prior_bounds_and_unit_conversion() {
        let prior = paper_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let ud = sample_ud_state(&mut rng, &prior);
            assert!(ud.p.iter().all(|&x| (150.0..=650.0).contains(&x)));
            assert!(ud.v.norm() <= 50.0 + 1e-9);
            assert!((0.0..=5995.8492).contains(&ud.b));
            assert!(ud.w.abs() <= 2997.92458 + 1e-9);
        }
    }

    #[test]
    fn degenerate_prior_is_static_and_clock_perfect() {
        let prior = UdPrior {
            vmax: 0.0,
            offset_range_s: (0.0, 0.0),
            drift_range_ppm: (0.0, 0.0),
            ..paper_prior()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ud = sample_ud_state(&mut rng, &prior);
        assert_eq!(ud.v.norm(), 0.0);
        assert_eq!(ud.b, 0.0);
        assert_eq!(ud.w, 0.0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_ud_state(&mut ChaCha8Rng::seed_from_u64(9), &paper_prior());
        let b = sample_ud_state(&mut ChaCha8Rng::seed_from_u64(9), &paper_prior());
        assert_eq!(a, b);
    }

    #[test]
    fn noise_statistics() {
        let anchors = build_square_scenario(800.0, 4).unwrap();
        let ud = UdState::static_at(v2(300.0, 200.0));
        let clean = forward_model(&ud, &anchors).unwrap();
        let noise = NoiseSpec::new(vec![2.0, 3.0, 4.0, 5.0], 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let (mut s1, mut s11, mut s15, mut s_cross) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let noisy = add_noise(&clean, &noise, &mut rng).unwrap();
            let e1 = noisy.rho[0] - clean.rho[0];
            let h1 = noisy.tau[0] - clean.tau[0];
            s1 += e1;
            s11 += e1 * e1;
            s15 += h1 * h1;
            s_cross += e1 * h1;
        }
        let n = n as f64;
        let var1 = s11 / n - (s1 / n).powi(2);
        assert!((var1 / 4.0 - 1.0).abs() < 0.03, "request variance {var1}");
        assert!((s15 / n / 2.25 - 1.0).abs() < 0.03);
        // correlation between the two families vanishes
        assert!((s_cross / n / (2.0 * 1.5)).abs() < 0.02);
    }

    #[test]
    fn noise_is_reproducible_and_keeps_truth() {
        let anchors = build_square_scenario(800.0, 8).unwrap();
        let clean = forward_model(&UdState::static_at(v2(410.0, 380.0)), &anchors).unwrap();
        let noise = NoiseSpec::uniform(8, 3.0).unwrap();
        let a = add_noise(&clean, &noise, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = add_noise(&clean, &noise, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.truth, clean.truth);
        assert_ne!(a.rho, clean.rho);
    }

    #[test]
    fn weights_layout() {
        let noise = NoiseSpec::new(vec![1.0, 2.0], 4.0).unwrap();
        let w = noise.weights();
        assert_eq!(w.as_slice(), &[1.0, 0.25, 1.0 / 16.0, 1.0 / 16.0]);
        assert!(NoiseSpec::new(vec![1.0, 0.0], 1.0).is_err());
        assert!(NoiseSpec::new(vec![1.0], -1.0).is_err());
    }

    #[test]
    fn response_sigma_uses_mean_distance() {
        let anchors = build_square_scenario(800.0, 4).unwrap();
        let p = v2(400.0, 400.0);
        let noise = NoiseSpec::from_snr(&anchors, &p, 30.0, RespSigmaModel::MeanDistance).unwrap();
        let expected = sigma_from_snr(800.0 / 2f64.sqrt(), 30.0).unwrap();
        assert_relative_eq!(noise.sigma_resp, expected, max_relative = 1e-12);
        for s in &noise.sigma_req {
            assert_relative_eq!(*s, expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn state_vector_round_trip() {
        let ud = UdState::new(v2(1.0, 2.0), v2(3.0, 4.0), 5.0, 6.0);
        let theta = ud.to_vector();
        assert_eq!(theta.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(UdState::from_vector(&theta), ud);
    }
}
