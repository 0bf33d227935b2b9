//! Real solutions of two bivariate quadratics in the auxiliary variables.
//!
//! `λ₂` is eliminated with the Sylvester resultant, leaving a univariate
//! polynomial of degree at most four in `λ₁`. Its roots come from the
//! eigenvalues of a (scaled) companion matrix; each real root is
//! back-substituted for `λ₂` and the pair is polished with Newton's method on
//! the original 2×2 system.

use nalgebra::linalg::Schur;
use nalgebra::{Complex, DMatrix, DVector};

use crate::linear_system::{ConstraintMatrices, LinearSystem};
use crate::{LasError, Result};

type Complex64 = Complex<f64>;

/// A univariate root counts as real when `|im| ≤ IMAG_TOLERANCE · max(1, |re|)`.
pub const IMAG_TOLERANCE: f64 = 1e-6;
/// Maximum relative residual of a returned pair in either equation.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

const NEWTON_MIN_STEPS: usize = 2;
const NEWTON_MAX_STEPS: usize = 8;

/// `a·λ₁² + b·λ₁λ₂ + c·λ₂² + d·λ₁ + e·λ₂ + f = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariateQuadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl BivariateQuadratic {
    pub fn new(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Self {
        Self { a, b, c, d, e, f }
    }

    pub fn eval(&self, l1: f64, l2: f64) -> f64 {
        self.a * l1 * l1 + self.b * l1 * l2 + self.c * l2 * l2 + self.d * l1 + self.e * l2 + self.f
    }

    pub fn gradient(&self, l1: f64, l2: f64) -> (f64, f64) {
        (
            2.0 * self.a * l1 + self.b * l2 + self.d,
            self.b * l1 + 2.0 * self.c * l2 + self.e,
        )
    }

    /// Sum of the absolute values of the six terms at a point.
    pub fn term_scale(&self, l1: f64, l2: f64) -> f64 {
        (self.a * l1 * l1).abs()
            + (self.b * l1 * l2).abs()
            + (self.c * l2 * l2).abs()
            + (self.d * l1).abs()
            + (self.e * l2).abs()
            + self.f.abs()
    }

    /// `|q(λ)|` relative to the magnitude of its terms.
    pub fn relative_residual(&self, l1: f64, l2: f64) -> f64 {
        let value = self.eval(l1, l2).abs();
        let scale = self.term_scale(l1, l2);
        if scale == 0.0 {
            value
        } else {
            value / scale
        }
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients().iter().all(|&x| x == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.coefficients().iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.a * k, self.b * k, self.c * k, self.d * k, self.e * k, self.f * k)
    }

    /// The same equation with the roles of `λ₁` and `λ₂` exchanged.
    pub fn swapped(&self) -> Self {
        Self::new(self.c, self.b, self.a, self.e, self.d, self.f)
    }

    fn coefficients(&self) -> [f64; 6] {
        [self.a, self.b, self.c, self.d, self.e, self.f]
    }

    /// Coefficients in `λ₂` as polynomials in `λ₁`, lowest power first.
    fn in_second_variable(&self) -> [Poly; 3] {
        [
            Poly::new(vec![self.f, self.d, self.a]),
            Poly::new(vec![self.e, self.b]),
            Poly::new(vec![self.c]),
        ]
    }
}

/// `(λ₁, λ₂) = (ω² − ‖v‖², bω − pᵀv)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxiliaryPair {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl AuxiliaryPair {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        Self { lambda1, lambda2 }
    }
}

/// Everything [`solve_pair`] learned about the system.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSolutions {
    /// Real solutions, each satisfying both equations to [`RESIDUAL_TOLERANCE`].
    pub real: Vec<AuxiliaryPair>,
    /// Real part of the complex root closest to the real axis, with the
    /// best-fitting `λ₂`. Only set when there are no real solutions.
    pub complex_seed: Option<AuxiliaryPair>,
    /// Real parts of the non-real common roots. Noise can push the root near
    /// the true parameters off the real axis while spurious real roots remain,
    /// so these are offered as approximate candidates.
    pub projected: Vec<AuxiliaryPair>,
    /// Elimination needed a fallback path or a real root failed to polish.
    pub ill_conditioned: bool,
}

/// Forms the two quadratics obtained by substituting `θ = g + U·λ` into
/// `θᵀH₁θ = λ₁` and `θᵀH₂θ = 2λ₂`.
pub fn coefficients_from_system(
    sys: &LinearSystem,
    h: &ConstraintMatrices,
) -> (BivariateQuadratic, BivariateQuadratic) {
    let u1 = sys.u.column(0).into_owned();
    let u2 = sys.u.column(1).into_owned();
    let g = &sys.g;
    let form = |hm: &DMatrix<f64>, x: &DVector<f64>, z: &DVector<f64>| x.dot(&(hm * z));

    let q1 = BivariateQuadratic::new(
        form(&h.h1, &u1, &u1),
        2.0 * form(&h.h1, &u1, &u2),
        form(&h.h1, &u2, &u2),
        2.0 * form(&h.h1, &u1, g) - 1.0,
        2.0 * form(&h.h1, &u2, g),
        form(&h.h1, g, g),
    );
    let q2 = BivariateQuadratic::new(
        form(&h.h2, &u1, &u1),
        2.0 * form(&h.h2, &u1, &u2),
        form(&h.h2, &u2, &u2),
        2.0 * form(&h.h2, &u1, g),
        2.0 * form(&h.h2, &u2, g) - 2.0,
        form(&h.h2, g, g),
    );
    (q1, q2)
}

/// Finds all real common roots of two bivariate quadratics (at most four).
pub fn solve_pair(q1: &BivariateQuadratic, q2: &BivariateQuadratic) -> Result<PairSolutions> {
    if q1.is_zero() && q2.is_zero() {
        return Err(LasError::Domain("both quadratics are identically zero".into()));
    }
    if !q1.is_finite() || !q2.is_finite() {
        return Err(LasError::Domain("quadratic coefficients are not finite".into()));
    }

    if let Some(mut sol) = solve_eliminating_second(q1, q2) {
        finish(&mut sol, q1, q2);
        return Ok(sol);
    }
    if let Some(mut sol) = solve_eliminating_second(&q1.swapped(), &q2.swapped()) {
        for pair in sol
            .real
            .iter_mut()
            .chain(sol.complex_seed.iter_mut())
            .chain(sol.projected.iter_mut())
        {
            *pair = AuxiliaryPair::new(pair.lambda2, pair.lambda1);
        }
        sol.ill_conditioned = true;
        finish(&mut sol, q1, q2);
        return Ok(sol);
    }

    // Both resultants vanish identically: the equations share a factor.
    // Fall back to the linear part, accepted only if it satisfies both.
    let mut sol = PairSolutions { ill_conditioned: true, ..Default::default() };
    let det = q1.d * q2.e - q1.e * q2.d;
    if det != 0.0 {
        let l1 = (-q1.f * q2.e + q1.e * q2.f) / det;
        let l2 = (-q1.d * q2.f + q1.f * q2.d) / det;
        if let Some(pair) = polish(q1, q2, AuxiliaryPair::new(l1, l2)) {
            sol.real.push(pair);
        }
    }
    finish(&mut sol, q1, q2);
    Ok(sol)
}

fn finish(sol: &mut PairSolutions, q1: &BivariateQuadratic, q2: &BivariateQuadratic) {
    sol.real.retain(|p| max_residual(q1, q2, *p) <= RESIDUAL_TOLERANCE);
    dedup_pairs(&mut sol.real);
    sol.real.sort_by(|x, y| x.lambda1.total_cmp(&y.lambda1).then(x.lambda2.total_cmp(&y.lambda2)));
    sol.projected.retain(|p| p.lambda1.is_finite() && p.lambda2.is_finite());
    dedup_pairs(&mut sol.projected);
    sol.projected.sort_by(|x, y| x.lambda1.total_cmp(&y.lambda1).then(x.lambda2.total_cmp(&y.lambda2)));
    if !sol.real.is_empty() {
        sol.complex_seed = None;
    }
}

fn max_residual(q1: &BivariateQuadratic, q2: &BivariateQuadratic, p: AuxiliaryPair) -> f64 {
    q1.relative_residual(p.lambda1, p.lambda2)
        .max(q2.relative_residual(p.lambda1, p.lambda2))
}

/// Eliminates `λ₂`; returns `None` when the resultant vanishes identically.
fn solve_eliminating_second(q1: &BivariateQuadratic, q2: &BivariateQuadratic) -> Option<PairSolutions> {
    let p = q1.in_second_variable();
    let q = q2.in_second_variable();
    let p_abs = p.clone().map(|c| c.map(f64::abs));
    let q_abs = q.clone().map(|c| c.map(f64::abs));

    let res = resultant(&p, &q, false);
    let bound = resultant(&p_abs, &q_abs, true);
    let res = res.trimmed_against(&bound);
    if res.is_zero() {
        return None;
    }

    let mut sol = PairSolutions::default();
    let roots = res.roots();
    let mut best_complex: Option<(f64, f64)> = None;
    for root in roots {
        let re = root.re;
        let im_rel = root.im.abs() / re.abs().max(1.0);
        if im_rel <= IMAG_TOLERANCE {
            let mut found = false;
            for l2 in second_candidates(q1, q2, re) {
                if let Some(pair) = polish(q1, q2, AuxiliaryPair::new(re, l2)) {
                    sol.real.push(pair);
                    found = true;
                }
            }
            if !found {
                // real λ₁ without a matching real λ₂ is still a usable seed
                sol.ill_conditioned = true;
                sol.projected.push(project(q1, q2, root));
                if best_complex.is_none_or(|(best, _)| im_rel < best) {
                    best_complex = Some((im_rel, re));
                }
            }
        } else {
            sol.projected.push(project(q1, q2, root));
            if best_complex.is_none_or(|(best, _)| im_rel < best) {
                best_complex = Some((im_rel, re));
            }
        }
    }
    if let Some((_, re)) = best_complex {
        let l2 = second_candidates(q1, q2, re)
            .into_iter()
            .min_by(|a, b| {
                let ra = max_residual(q1, q2, AuxiliaryPair::new(re, *a));
                let rb = max_residual(q1, q2, AuxiliaryPair::new(re, *b));
                ra.total_cmp(&rb)
            })
            .unwrap_or(0.0);
        sol.complex_seed = Some(AuxiliaryPair::new(re, l2));
    }
    Some(sol)
}

/// Real part of the complex common root whose first coordinate is `z`.
fn project(q1: &BivariateQuadratic, q2: &BivariateQuadratic, z: Complex64) -> AuxiliaryPair {
    let coeffs = |q: &BivariateQuadratic| {
        (Complex64::from(q.c), z * q.b + q.e, z * z * q.a + z * q.d + q.f)
    };
    let (p2, p1, p0) = coeffs(q1);
    let (r2, r1, r0) = coeffs(q2);
    let mut candidates: Vec<Complex64> = Vec::with_capacity(5);
    let lin = r2 * p1 - p2 * r1;
    if lin.norm() > 0.0 {
        candidates.push(-(r2 * p0 - p2 * r0) / lin);
    }
    for (c2, c1, c0) in [(p2, p1, p0), (r2, r1, r0)] {
        if c2.norm() > 0.0 {
            let disc = (c1 * c1 - c2 * c0 * 4.0).sqrt();
            candidates.push((-c1 + disc) / (c2 * 2.0));
            candidates.push((-c1 - disc) / (c2 * 2.0));
        } else if c1.norm() > 0.0 {
            candidates.push(-c0 / c1);
        }
    }
    let misfit = |w: Complex64| {
        let eval = |q: &BivariateQuadratic| {
            let terms = [z * z * q.a, z * w * q.b, w * w * q.c, z * q.d, w * q.e, Complex64::from(q.f)];
            let scale: f64 = terms.iter().map(|t| t.norm()).sum();
            let sum: Complex64 = terms.iter().sum();
            if scale > 0.0 {
                sum.norm() / scale
            } else {
                0.0
            }
        };
        eval(q1).max(eval(q2))
    };
    let w = candidates
        .into_iter()
        .filter(|w| w.re.is_finite() && w.im.is_finite())
        .min_by(|a, b| misfit(*a).total_cmp(&misfit(*b)))
        .unwrap_or_default();
    AuxiliaryPair::new(z.re, w.re)
}

/// Candidate `λ₂` values for a fixed `λ₁`: the root of the combination that
/// cancels the `λ₂²` terms, and the real roots (or real parts) of each quadratic.
fn second_candidates(q1: &BivariateQuadratic, q2: &BivariateQuadratic, l1: f64) -> Vec<f64> {
    let coeffs = |q: &BivariateQuadratic| (q.c, q.b * l1 + q.e, q.a * l1 * l1 + q.d * l1 + q.f);
    let (p2, p1, p0) = coeffs(q1);
    let (r2, r1, r0) = coeffs(q2);
    let mut out = Vec::with_capacity(5);

    let lin = r2 * p1 - p2 * r1;
    let cst = r2 * p0 - p2 * r0;
    if lin != 0.0 {
        out.push(-cst / lin);
    }
    for (c2, c1, c0) in [(p2, p1, p0), (r2, r1, r0)] {
        out.extend(quadratic_real_parts(c2, c1, c0));
    }
    out.retain(|x| x.is_finite());
    out
}

/// Real roots of `c2·x² + c1·x + c0`, or the common real part of a complex pair.
fn quadratic_real_parts(c2: f64, c1: f64, c0: f64) -> Vec<f64> {
    if c2 == 0.0 {
        return if c1 != 0.0 { vec![-c0 / c1] } else { Vec::new() };
    }
    let disc = c1 * c1 - 4.0 * c2 * c0;
    if disc < 0.0 {
        return vec![-c1 / (2.0 * c2)];
    }
    // cancellation-free form
    let t = -0.5 * (c1 + c1.signum() * disc.sqrt());
    if t == 0.0 {
        return vec![0.0];
    }
    vec![t / c2, c0 / t]
}

/// Newton iterations on the 2×2 system; returns the pair if it meets the
/// residual tolerance.
fn polish(q1: &BivariateQuadratic, q2: &BivariateQuadratic, start: AuxiliaryPair) -> Option<AuxiliaryPair> {
    let mut best = start;
    let mut best_res = max_residual(q1, q2, start);
    let mut cur = start;
    for step in 0..NEWTON_MAX_STEPS {
        if step >= NEWTON_MIN_STEPS && best_res <= 1e-15 {
            break;
        }
        let (f1, f2) = (q1.eval(cur.lambda1, cur.lambda2), q2.eval(cur.lambda1, cur.lambda2));
        let (j11, j12) = q1.gradient(cur.lambda1, cur.lambda2);
        let (j21, j22) = q2.gradient(cur.lambda1, cur.lambda2);
        let det = j11 * j22 - j12 * j21;
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let dl1 = (f1 * j22 - f2 * j12) / det;
        let dl2 = (j11 * f2 - j21 * f1) / det;
        let next = AuxiliaryPair::new(cur.lambda1 - dl1, cur.lambda2 - dl2);
        if !next.lambda1.is_finite() || !next.lambda2.is_finite() {
            break;
        }
        cur = next;
        let r = max_residual(q1, q2, cur);
        if r < best_res {
            best = cur;
            best_res = r;
        } else if step >= NEWTON_MIN_STEPS {
            break;
        }
    }
    (best_res <= RESIDUAL_TOLERANCE).then_some(best)
}

fn dedup_pairs(pairs: &mut Vec<AuxiliaryPair>) {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-7 * a.abs().max(b.abs()).max(1e-300);
    let mut out: Vec<AuxiliaryPair> = Vec::with_capacity(pairs.len());
    for p in pairs.drain(..) {
        if !out
            .iter()
            .any(|o| close(o.lambda1, p.lambda1) && close(o.lambda2, p.lambda2))
        {
            out.push(p);
        }
    }
    *pairs = out;
}

/// Sylvester resultant of two polynomials in `λ₂` whose coefficients are
/// polynomials in `λ₁`. With `magnitude` set, every term enters with a plus
/// sign, which bounds the rounding error of the signed evaluation.
fn resultant(p: &[Poly; 3], q: &[Poly; 3], magnitude: bool) -> Poly {
    let degree = |c: &[Poly; 3]| (0..3).rev().find(|&k| !c[k].is_zero());
    let (dp, dq) = match (degree(p), degree(q)) {
        (Some(dp), Some(dq)) => (dp, dq),
        // one equation is identically zero
        _ => return Poly::zero(),
    };
    if dp == 0 && dq == 0 {
        return Poly::zero();
    }
    let size = dp + dq;
    let mut mat = vec![vec![Poly::zero(); size]; size];
    for r in 0..dq {
        for k in 0..=dp {
            mat[r][r + k] = p[dp - k].clone();
        }
    }
    for r in 0..dp {
        for k in 0..=dq {
            mat[dq + r][r + k] = q[dq - k].clone();
        }
    }
    determinant(&mat, magnitude)
}

fn determinant(mat: &[Vec<Poly>], magnitude: bool) -> Poly {
    let n = mat.len();
    if n == 1 {
        return mat[0][0].clone();
    }
    let mut acc = Poly::zero();
    for col in 0..n {
        if mat[0][col].is_zero() {
            continue;
        }
        let minor: Vec<Vec<Poly>> = mat[1..]
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|&(c, _)| c != col)
                    .map(|(_, x)| x.clone())
                    .collect()
            })
            .collect();
        let term = mat[0][col].mul(&determinant(&minor, magnitude));
        if col % 2 == 1 && !magnitude {
            acc = acc.sub(&term);
        } else {
            acc = acc.add(&term);
        }
    }
    acc
}

/// Dense univariate polynomial, lowest power first.
#[derive(Debug, Clone, PartialEq)]
struct Poly(Vec<f64>);

impl Poly {
    fn new(coeffs: Vec<f64>) -> Self {
        let mut p = Self(coeffs);
        p.strip();
        p
    }

    fn zero() -> Self {
        Self(Vec::new())
    }

    fn strip(&mut self) {
        while self.0.last() == Some(&0.0) {
            self.0.pop();
        }
    }

    fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    fn map(self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.0.into_iter().map(f).collect())
    }

    fn add(&self, other: &Self) -> Self {
        let n = self.0.len().max(other.0.len());
        let get = |v: &Vec<f64>, i: usize| v.get(i).copied().unwrap_or(0.0);
        Self::new((0..n).map(|i| get(&self.0, i) + get(&other.0, i)).collect())
    }

    fn sub(&self, other: &Self) -> Self {
        self.add(&other.clone().map(|x| -x))
    }

    fn mul(&self, other: &Self) -> Self {
        if self.is_zero() || other.is_zero() {
            return Self::zero();
        }
        let mut out = vec![0.0; self.0.len() + other.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in other.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Self::new(out)
    }

    /// Zeroes coefficients that are indistinguishable from rounding, given a
    /// same-shaped bound on the magnitude of the terms that produced them.
    fn trimmed_against(&self, bound: &Self) -> Self {
        const SLACK: f64 = 64.0 * f64::EPSILON;
        Self::new(
            self.0
                .iter()
                .enumerate()
                .map(|(k, &c)| {
                    let b = bound.0.get(k).copied().unwrap_or(0.0);
                    if c.abs() <= SLACK * b {
                        0.0
                    } else {
                        c
                    }
                })
                .collect(),
        )
    }

    /// Complex roots, from the companion matrices of the polynomial and of its
    /// reversal. A single companion matrix resolves roots only to about
    /// `eps` times the largest root; the reversed polynomial recovers the
    /// small ones. Both sets are Newton-polished and merged, so the result can
    /// hold more than `degree` entries when a root is poorly resolved.
    fn roots(&self) -> Vec<Complex64> {
        let mut coeffs = self.0.clone();
        let mut zero_roots = 0;
        while coeffs.len() > 1 && coeffs[0] == 0.0 {
            coeffs.remove(0);
            zero_roots += 1;
        }
        let mut roots = vec![Complex64::new(0.0, 0.0); zero_roots];
        if coeffs.len() <= 1 {
            return roots;
        }
        let mut found = companion_roots(&coeffs);
        let reversed: Vec<f64> = coeffs.iter().rev().copied().collect();
        found.extend(
            companion_roots(&reversed)
                .into_iter()
                .filter(|z| z.norm() > 0.0)
                .map(|z| z.inv()),
        );
        let mut merged: Vec<Complex64> = Vec::with_capacity(found.len());
        for z in found {
            let z = newton_poly(&coeffs, z);
            if !(z.re.is_finite() && z.im.is_finite()) {
                continue;
            }
            if !merged.iter().any(|m| (m - z).norm() <= 1e-9 * m.norm().max(z.norm())) {
                merged.push(z);
            }
        }
        roots.extend(merged);
        roots
    }
}

/// Eigenvalues of the companion matrix after rescaling the variable so the
/// roots have magnitude near one. `coeffs` is lowest power first with a
/// nonzero constant term.
///
/// The QR iteration can stall on companion matrices with repeated roots; a
/// stalled attempt is retried with a different scaling, which changes the
/// matrix but not the roots, and Durand-Kerner is the last resort.
fn companion_roots(coeffs: &[f64]) -> Vec<Complex64> {
    let n = coeffs.len() - 1;
    let lead = coeffs[n];
    let scale = (0..n)
        .map(|k| (coeffs[k] / lead).abs().powf(1.0 / (n - k) as f64))
        .fold(0.0, f64::max);
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    if n == 1 {
        return vec![Complex64::new(-coeffs[0] / lead, 0.0)];
    }
    for factor in [1.0, 1.37, 0.71, 2.3] {
        let s = scale * factor;
        let mut companion = DMatrix::<f64>::zeros(n, n);
        for i in 1..n {
            companion[(i, i - 1)] = 1.0;
        }
        for k in 0..n {
            companion[(k, n - 1)] = -coeffs[k] / lead / s.powi((n - k) as i32);
        }
        if let Some(schur) = Schur::try_new(companion, f64::EPSILON, 500) {
            return schur.complex_eigenvalues().iter().map(|z| z * s).collect();
        }
    }
    durand_kerner(coeffs, scale)
}

fn durand_kerner(coeffs: &[f64], scale: f64) -> Vec<Complex64> {
    let n = coeffs.len() - 1;
    let lead = coeffs[n];
    let eval = |z: Complex64| coeffs.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c / lead);
    let seed = Complex64::from_polar(scale, 0.4);
    let mut z: Vec<Complex64> = (0..n).map(|k| seed.powu(k as u32 + 1) / scale.powi(k as i32)).collect();
    for _ in 0..500 {
        let mut moved = 0.0f64;
        for i in 0..n {
            let denom = (0..n)
                .filter(|&j| j != i)
                .fold(Complex64::new(1.0, 0.0), |acc, j| acc * (z[i] - z[j]));
            if denom.norm() == 0.0 {
                continue;
            }
            let step = eval(z[i]) / denom;
            z[i] -= step;
            moved = moved.max(step.norm() / z[i].norm().max(f64::MIN_POSITIVE));
        }
        if moved < 1e-14 {
            break;
        }
    }
    z
}

/// A few Newton steps on the polynomial, keeping the iterate with the smallest
/// relative residual.
fn newton_poly(coeffs: &[f64], start: Complex64) -> Complex64 {
    let eval = |z: Complex64| {
        let mut p = Complex64::new(0.0, 0.0);
        let mut dp = Complex64::new(0.0, 0.0);
        let mut mag = 0.0;
        for &c in coeffs.iter().rev() {
            dp = dp * z + p;
            p = p * z + c;
            mag = mag * z.norm() + c.abs();
        }
        (p, dp, if mag > 0.0 { p.norm() / mag } else { 0.0 })
    };
    let (mut p, mut dp, mut best_res) = eval(start);
    let (mut best, mut z) = (start, start);
    for _ in 0..NEWTON_MAX_STEPS {
        if best_res <= f64::EPSILON || dp.norm() == 0.0 {
            break;
        }
        z -= p / dp;
        let (np, ndp, res) = eval(z);
        if !(res < best_res) {
            break;
        }
        (p, dp, best_res, best) = (np, ndp, res, z);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_system::{auxiliary_values, build_system};
    use crate::scenario::{build_square_scenario, forward_model, sample_ud_state, UdPrior};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn has(sol: &PairSolutions, l1: f64, l2: f64, tol: f64) -> bool {
        sol.real.iter().any(|p| {
            (p.lambda1 - l1).abs() <= tol * l1.abs().max(1.0) && (p.lambda2 - l2).abs() <= tol * l2.abs().max(1.0)
        })
    }

    #[test]
    fn separable_system_has_four_roots() {
        let q1 = BivariateQuadratic::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0);
        let q2 = BivariateQuadratic::new(0.0, 0.0, 1.0, 0.0, 0.0, -1.0);
        let sol = solve_pair(&q1, &q2).unwrap();
        assert_eq!(sol.real.len(), 4, "{:?}", sol.real);
        for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            assert!(has(&sol, a, b, 1e-12));
        }
    }

    #[test]
    fn linear_system_has_one_root() {
        let q1 = BivariateQuadratic::new(0.0, 0.0, 0.0, 1.0, 0.0, -2.0);
        let q2 = BivariateQuadratic::new(0.0, 0.0, 0.0, 0.0, 1.0, -3.0);
        let sol = solve_pair(&q1, &q2).unwrap();
        assert_eq!(sol.real, vec![AuxiliaryPair::new(2.0, 3.0)]);
    }

    #[test]
    fn circle_and_line() {
        // λ₁² + λ₂² = 25 and λ₁ − λ₂ = 1 → (4, 3), (−3, −4)
        let q1 = BivariateQuadratic::new(1.0, 0.0, 1.0, 0.0, 0.0, -25.0);
        let q2 = BivariateQuadratic::new(0.0, 0.0, 0.0, 1.0, -1.0, -1.0);
        let sol = solve_pair(&q1, &q2).unwrap();
        assert_eq!(sol.real.len(), 2);
        assert!(has(&sol, 4.0, 3.0, 1e-12));
        assert!(has(&sol, -3.0, -4.0, 1e-12));
    }

    #[test]
    fn disjoint_circles_have_no_real_root() {
        // two circles of radius 1 centered 4 apart
        let q1 = BivariateQuadratic::new(1.0, 0.0, 1.0, 0.0, 0.0, -1.0);
        let q2 = BivariateQuadratic::new(1.0, 0.0, 1.0, -8.0, 0.0, 15.0);
        let sol = solve_pair(&q1, &q2).unwrap();
        assert!(sol.real.is_empty());
        let seed = sol.complex_seed.expect("complex seed");
        assert_relative_eq!(seed.lambda1, 2.0, max_relative = 1e-9);
    }

    #[test]
    fn both_zero_is_an_error() {
        let z = BivariateQuadratic::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(solve_pair(&z, &z).is_err());
    }

    #[test]
    fn dependent_equations_fall_back() {
        let q = BivariateQuadratic::new(1.0, 0.0, 1.0, 0.0, 0.0, -1.0);
        let sol = solve_pair(&q, &q.scaled(2.0)).unwrap();
        assert!(sol.ill_conditioned);
        assert!(sol.real.len() <= 4);
    }

    #[test]
    fn zero_u_and_g_leave_only_shift_terms() {
        let sys = LinearSystem {
            a: DMatrix::zeros(6, 6),
            y: DVector::zeros(6),
            g_mat: DMatrix::zeros(6, 2),
            g: DVector::zeros(6),
            u: DMatrix::zeros(6, 2),
            rank_ratio: 1.0,
        };
        let (q1, q2) = coefficients_from_system(&sys, &ConstraintMatrices::new(2));
        assert_eq!(q1, BivariateQuadratic::new(0.0, 0.0, 0.0, -1.0, 0.0, 0.0));
        assert_eq!(q2, BivariateQuadratic::new(0.0, 0.0, 0.0, 0.0, -2.0, 0.0));
    }

    #[test]
    fn cross_coefficient_uses_symmetry_of_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = ConstraintMatrices::new(2);
        let u = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let g = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let sys = LinearSystem {
            a: DMatrix::zeros(6, 6),
            y: DVector::zeros(6),
            g_mat: DMatrix::zeros(6, 2),
            g,
            u: u.clone(),
            rank_ratio: 1.0,
        };
        let (q1, q2) = coefficients_from_system(&sys, &h);
        let (c1, c2) = (u.column(0), u.column(1));
        let sym1 = c2.dot(&(&h.h1 * c1)) + c1.dot(&(&h.h1 * c2));
        let sym2 = c2.dot(&(&h.h2 * c1)) + c1.dot(&(&h.h2 * c2));
        assert_relative_eq!(q1.b, sym1, max_relative = 1e-14);
        assert_relative_eq!(q2.b, sym2, max_relative = 1e-14);
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
    fn noise_free_scenarios_contain_true_pair() {
        let anchors = build_square_scenario(800.0, 8).unwrap();
        let h = ConstraintMatrices::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let ud = sample_ud_state(&mut rng, &paper_prior());
            let sys = build_system(&forward_model(&ud, &anchors).unwrap(), &anchors, 0).unwrap();
            let (q1, q2) = coefficients_from_system(&sys, &h);
            let (l1, l2) = auxiliary_values(&ud);
            assert!(q1.relative_residual(l1, l2) < 1e-9);
            assert!(q2.relative_residual(l1, l2) < 1e-9);
            let sol = solve_pair(&q1, &q2).unwrap();
            assert!(sol.real.len() <= 4);
            assert!(has(&sol, l1, l2, 1e-8), "{:?} vs ({l1}, {l2})", sol.real);
        }
    }

    #[test]
    fn scaling_an_equation_keeps_solutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let mut coeffs = || {
                BivariateQuadratic::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                )
            };
            let (q1, q2) = (coeffs(), coeffs());
            let base = solve_pair(&q1, &q2).unwrap();
            let scaled = solve_pair(&q1.scaled(1e6), &q2.scaled(-3e-4)).unwrap();
            assert_eq!(base.real.len(), scaled.real.len());
            for p in &base.real {
                assert!(has(&scaled, p.lambda1, p.lambda2, 1e-7));
            }
        }
    }

    #[test]
    fn widely_spread_roots_are_all_found() {
        // resultant roots span 1e5 to 5e14; reference values from 50-digit arithmetic
        let q1 = BivariateQuadratic::new(
            2.335502182423792e-10,
            1.1260624273296252e-8,
            8.641344737383291e-8,
            -1.0029336280474366,
            -0.09376755807880693,
            -97876.81236745883,
        );
        let q2 = BivariateQuadratic::new(
            2.5482092831374705e-12,
            1.4965753366631285e-10,
            1.9784464558820214e-9,
            0.06689057942666507,
            -0.16765134531810322,
            22898.42674384595,
        );
        let sol = solve_pair(&q1, &q2).unwrap();
        assert!(has(&sol, -105764.37351019167, 94481.67961925970, 1e-7), "{:?}", sol.real);
        assert!(has(&sol, 34087408.61027238, 18232254.85042093, 1e-7), "{:?}", sol.real);
    }

    #[test]
    fn complex_roots_are_projected() {
        let q1 = BivariateQuadratic::new(
            -7.065149451660353e-10,
            -4.756814353921505e-9,
            8.369175127025555e-8,
            -1.082408511104084,
            -1.0133368539376364,
            -1039805.1822594713,
        );
        let q2 = BivariateQuadratic::new(
            9.277605808604489e-11,
            2.1256898808771686e-9,
            8.694029468544071e-9,
            0.10647370090201959,
            0.033334817224917934,
            221892.5481323253,
        );
        let sol = solve_pair(&q1, &q2).unwrap();
        assert_eq!(sol.real.len(), 2);
        assert_eq!(sol.projected.len(), 1, "{:?}", sol.projected);
        assert_relative_eq!(sol.projected[0].lambda1, -2825505.63, max_relative = 1e-6);
    }

    #[test]
    fn durand_kerner_finds_simple_roots() {
        // (x − 1)(x − 2)(x + 3) = x³ − 7x + 6
        let mut roots: Vec<f64> = durand_kerner(&[6.0, -7.0, 0.0, 1.0], 3.0).iter().map(|z| z.re).collect();
        roots.sort_by(f64::total_cmp);
        for (r, e) in roots.iter().zip([-3.0, 1.0, 2.0]) {
            assert_relative_eq!(*r, e, epsilon = 1e-10);
        }
    }

    #[test]
    fn repeated_roots_do_not_stall() {
        let roots = Poly::new(vec![1.0, 0.0, -2.0, 0.0, 1.0]).roots();
        assert!(roots.iter().all(|z| (z.norm() - 1.0).abs() < 1e-6));
    }
}
