//! The generic linear-Gaussian chain
//! `X_{t+1} = A_h X_t + G_h b(X_t, t·h) + Γ_h Z_t`, its execution, and
//! checks of the step-size scaling identities that make `n` steps of size
//! `h` agree in law with one step of size `n·h` when the drift is constant.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::matrix::{factor_noise_covariance, Structure, StructuredMatrix};
use crate::rng::RngStream;

/// The step-size dependent triple `(A_h, G_h, Γ_h²)` plus a lazily computed
/// lower-triangular noise factor.
#[derive(Debug, Clone)]
pub struct StepMatrices {
    pub a: StructuredMatrix,
    pub g: StructuredMatrix,
    pub gamma_sq: StructuredMatrix,
    factor: OnceLock<StructuredMatrix>,
}

impl StepMatrices {
    pub fn new(a: StructuredMatrix, g: StructuredMatrix, gamma_sq: StructuredMatrix) -> Self {
        Self {
            a,
            g,
            gamma_sq,
            factor: OnceLock::new(),
        }
    }

    /// `L` with `L Lᵀ = Γ²`.
    pub fn noise_factor(&self) -> Result<&StructuredMatrix> {
        if let Some(f) = self.factor.get() {
            return Ok(f);
        }
        let f = factor_noise_covariance(&self.gamma_sq)?;
        Ok(self.factor.get_or_init(|| f))
    }
}

/// A step-size indexed family of transition matrices.
///
/// `eval(0.0)` must return `A = I`, `G = 0`, `Γ² = 0`.
pub trait TransitionFamily: Send + Sync {
    fn dim(&self) -> usize;
    fn structure(&self) -> Structure;
    fn eval(&self, h: f64) -> StepMatrices;
}

/// A family given by an arbitrary closure returning dense matrices.
pub struct DenseFamily<F> {
    dim: usize,
    f: F,
}

impl<F> DenseFamily<F>
where
    F: Fn(f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> TransitionFamily for DenseFamily<F>
where
    F: Fn(f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn structure(&self) -> Structure {
        Structure::Dense
    }

    fn eval(&self, h: f64) -> StepMatrices {
        if h == 0.0 {
            return StepMatrices::new(
                StructuredMatrix::identity(Structure::Dense, self.dim),
                StructuredMatrix::zero(Structure::Dense, self.dim),
                StructuredMatrix::zero(Structure::Dense, self.dim),
            );
        }
        let (a, g, s) = (self.f)(h);
        StepMatrices::new(
            StructuredMatrix::Dense(a),
            StructuredMatrix::Dense(g),
            StructuredMatrix::Dense(s),
        )
    }
}

/// The drift `b(x, τ)`.
pub trait DriftField: Send + Sync {
    fn dim(&self) -> usize;

    /// Lipschitz constant of `x ↦ b(x, τ)` when known.
    fn lipschitz(&self) -> Option<f64> {
        None
    }

    fn evaluate(&self, x: &[f64], tau: f64, out: &mut [f64]);
}

/// `b ≡ c`.
#[derive(Debug, Clone)]
pub struct ConstantDrift {
    pub value: Vec<f64>,
}

impl ConstantDrift {
    pub fn new(value: Vec<f64>) -> Self {
        Self { value }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            value: vec![0.0; dim],
        }
    }
}

impl DriftField for ConstantDrift {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(0.0)
    }

    fn evaluate(&self, _x: &[f64], _tau: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.value);
    }
}

/// Drift given by a closure.
pub struct FnDrift<F> {
    dim: usize,
    lipschitz: Option<f64>,
    f: F,
}

impl<F> FnDrift<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self {
            dim,
            lipschitz: None,
            f,
        }
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }
}

impl<F> DriftField for FnDrift<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    fn evaluate(&self, x: &[f64], tau: f64, out: &mut [f64]) {
        (self.f)(x, tau, out)
    }
}

/// A per-chain handle on a drift that counts evaluations and rejects
/// non-finite output.
pub struct CountedDrift<'a> {
    field: &'a dyn DriftField,
    calls: u64,
}

impl<'a> CountedDrift<'a> {
    pub fn new(field: &'a dyn DriftField) -> Self {
        Self { field, calls: 0 }
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn field(&self) -> &'a dyn DriftField {
        self.field
    }

    /// Evaluate into `out`; `step` tags a divergence error.
    pub fn eval_into(&mut self, x: &[f64], tau: f64, out: &mut [f64], step: u64) -> Result<()> {
        self.calls += 1;
        self.field.evaluate(x, tau, out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::divergence(step, "drift returned a non-finite value"))
        }
    }

    pub fn eval(&mut self, x: &[f64], tau: f64, step: u64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.eval_into(x, tau, &mut out, step)?;
        Ok(out)
    }
}

/// State of a chain after `step_index` steps of size `step_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub step_index: u64,
    pub step_size: f64,
}

impl ChainState {
    pub fn new(x: Vec<f64>, step_size: f64) -> Self {
        Self {
            x,
            step_index: 0,
            step_size,
        }
    }

    /// Chain time `t·h`, derived rather than accumulated.
    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.step_size
    }
}

/// `out = A x + G b + L z`. Shared by every sampler so that degenerate
/// configurations reproduce the plain step bit for bit.
pub(crate) fn affine_step(
    m: &StepMatrices,
    x: &[f64],
    drift: &[f64],
    z: &[f64],
    out: &mut [f64],
) -> Result<()> {
    m.a.apply(x, out);
    m.g.apply_add(drift, out);
    let mut noise = vec![0.0; x.len()];
    m.noise_factor()?.apply(z, &mut noise);
    add_into(out, &noise);
    Ok(())
}

pub(crate) fn add_into(out: &mut [f64], v: &[f64]) {
    for (o, vi) in out.iter_mut().zip(v) {
        *o += vi;
    }
}

/// One step of the chain with a freshly drawn Gaussian.
pub fn fine_step(
    fam: &dyn TransitionFamily,
    drift: &mut CountedDrift<'_>,
    state: &ChainState,
    h: f64,
    rng: &mut RngStream,
) -> Result<ChainState> {
    let z = rng.gaussian_vec(fam.dim());
    fine_step_with_noise(fam, drift, state, h, &z)
}

/// One step of the chain with the standard normal `z` supplied by the caller.
pub fn fine_step_with_noise(
    fam: &dyn TransitionFamily,
    drift: &mut CountedDrift<'_>,
    state: &ChainState,
    h: f64,
    z: &[f64],
) -> Result<ChainState> {
    if !(h > 0.0) {
        return Err(Error::config(format!("step size must be positive, got {h}")));
    }
    let m = fam.eval(h);
    step_with_matrices(fam.dim(), &m, drift, state, h, z)
}

pub(crate) fn step_with_matrices(
    dim: usize,
    m: &StepMatrices,
    drift: &mut CountedDrift<'_>,
    state: &ChainState,
    h: f64,
    z: &[f64],
) -> Result<ChainState> {
    check_dim(dim, state.x.len())?;
    check_dim(dim, drift.dim())?;
    check_dim(dim, z.len())?;
    let tau = state.step_index as f64 * h;
    let b = drift.eval(&state.x, tau, state.step_index)?;
    let mut out = vec![0.0; dim];
    affine_step(m, &state.x, &b, z, &mut out)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::divergence(state.step_index, "state became non-finite"));
    }
    Ok(ChainState {
        x: out,
        step_index: state.step_index + 1,
        step_size: h,
    })
}

/// Run `n_steps` steps from `x0`, recording every `stride`-th state plus the
/// final one.
pub fn run_chain(
    fam: &dyn TransitionFamily,
    drift: &mut CountedDrift<'_>,
    x0: &[f64],
    h: f64,
    n_steps: u64,
    rng: &mut RngStream,
    stride: u64,
) -> Result<Vec<ChainState>> {
    if stride == 0 {
        return Err(Error::config("record stride must be at least 1"));
    }
    if !(h > 0.0) {
        return Err(Error::config(format!("step size must be positive, got {h}")));
    }
    check_dim(fam.dim(), x0.len())?;
    let m = fam.eval(h);
    let mut state = ChainState::new(x0.to_vec(), h);
    let mut out = vec![state.clone()];
    let mut z = vec![0.0; fam.dim()];
    for _ in 0..n_steps {
        rng.fill_gaussian(&mut z);
        state = step_with_matrices(fam.dim(), &m, drift, &state, h, &z)?;
        if state.step_index.is_multiple_of(stride) || state.step_index == n_steps {
            out.push(state.clone());
        }
    }
    Ok(out)
}

/// Residuals of the three scaling identities, in max-norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingReport {
    /// `‖A_hⁿ − A_{nh}‖`
    pub a_err: f64,
    /// `‖(Σ_{i<n} A_hⁱ) G_h − G_{nh}‖`
    pub g_err: f64,
    /// `‖Σ_{i<n} A_hⁱ Γ_h² (A_hᵀ)ⁱ − Γ_{nh}²‖`
    pub gamma_err: f64,
}

impl ScalingReport {
    pub fn max(&self) -> f64 {
        self.a_err.max(self.g_err).max(self.gamma_err)
    }
}

pub fn check_scaling_relations(fam: &dyn TransitionFamily, h: f64, n: u32) -> Result<ScalingReport> {
    if n == 0 {
        return Err(Error::config("n must be at least 1"));
    }
    let one = fam.eval(h);
    let big = fam.eval(h * n as f64);
    let dim = fam.dim();
    let mut power = StructuredMatrix::identity(fam.structure(), dim);
    let mut power_sum = StructuredMatrix::zero(fam.structure(), dim);
    let mut cov_sum = StructuredMatrix::zero(fam.structure(), dim);
    for _ in 0..n {
        power_sum = power_sum.add(&power);
        cov_sum = cov_sum.add(&power.mul(&one.gamma_sq).mul(&power.transpose()));
        power = power.mul(&one.a);
    }
    Ok(ScalingReport {
        a_err: power.max_abs_diff(&big.a),
        g_err: power_sum.mul(&one.g).max_abs_diff(&big.g),
        gamma_err: cov_sum.max_abs_diff(&big.gamma_sq),
    })
}

/// Mean and covariance of a Gaussian law on the state space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn point(x: &[f64]) -> Self {
        Self {
            mean: DVector::from_row_slice(x),
            cov: DMatrix::zeros(x.len(), x.len()),
        }
    }

    pub fn max_abs_diff(&self, other: &GaussianLaw) -> f64 {
        (&self.mean - &other.mean)
            .amax()
            .max((&self.cov - &other.cov).amax())
    }
}

/// Exact law after `n` steps of size `h` under the constant drift `c`.
pub fn propagate_constant_drift(
    fam: &dyn TransitionFamily,
    h: f64,
    n: u32,
    start: &GaussianLaw,
    c: &[f64],
) -> GaussianLaw {
    let dim = fam.dim();
    let m = fam.eval(h);
    let a = m.a.to_dense(dim);
    let gc = m.g.to_dense(dim) * DVector::from_row_slice(c);
    let s = m.gamma_sq.to_dense(dim);
    let mut law = start.clone();
    for _ in 0..n {
        law.mean = &a * &law.mean + &gc;
        law.cov = &a * &law.cov * a.transpose() + &s;
    }
    law
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langevin::{OverdampedFamily, UnderdampedFamily};

    #[test]
    fn zero_drift_pinned_noise() {
        let fam = OverdampedFamily::new(3);
        let drift = ConstantDrift::zero(3);
        let mut cd = CountedDrift::new(&drift);
        let s = ChainState::new(vec![0.0; 3], 0.1);
        let out = fine_step_with_noise(&fam, &mut cd, &s, 0.1, &[1.0, 1.0, 1.0]).unwrap();
        for v in &out.x {
            assert!((v - 0.2_f64.sqrt()).abs() < 1e-15);
        }
        assert_eq!(out.step_index, 1);
        assert_eq!(cd.calls(), 1);
    }

    #[test]
    fn linear_contraction_pinned() {
        let fam = OverdampedFamily::new(1);
        let drift = FnDrift::new(1, |x: &[f64], _t, out: &mut [f64]| out[0] = -x[0]);
        let mut cd = CountedDrift::new(&drift);
        let s = ChainState::new(vec![1.0], 0.1);
        let out = fine_step_with_noise(&fam, &mut cd, &s, 0.1, &[0.0]).unwrap();
        assert!((out.x[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let fam = OverdampedFamily::new(2);
        let drift = ConstantDrift::zero(2);
        let mut cd = CountedDrift::new(&drift);
        let s = ChainState::new(vec![0.0; 3], 0.1);
        assert!(matches!(
            fine_step_with_noise(&fam, &mut cd, &s, 0.1, &[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        let s = ChainState::new(vec![0.0; 2], 0.1);
        assert!(matches!(
            fine_step_with_noise(&fam, &mut cd, &s, 0.0, &[0.0; 2]),
            Err(Error::Config(_))
        ));
        let bad = FnDrift::new(2, |_x: &[f64], _t, out: &mut [f64]| out.fill(f64::NAN));
        let mut cd = CountedDrift::new(&bad);
        let mut s = ChainState::new(vec![0.0; 2], 0.1);
        s.step_index = 17;
        match fine_step_with_noise(&fam, &mut cd, &s, 0.1, &[0.0; 2]) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 17),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn run_chain_records_and_counts() {
        let fam = OverdampedFamily::new(2);
        let drift = ConstantDrift::zero(2);
        let mut cd = CountedDrift::new(&drift);
        let mut rng = RngStream::new(1, 0);
        let states = run_chain(&fam, &mut cd, &[0.0, 0.0], 0.1, 0, &mut rng, 1).unwrap();
        assert_eq!(states.len(), 1);

        let mut rng = RngStream::new(1, 0);
        let states = run_chain(&fam, &mut cd, &[0.0, 0.0], 0.1, 3, &mut rng, 1).unwrap();
        assert_eq!(states.len(), 4);
        assert_eq!(cd.calls(), 3);
        // partial sums of sqrt(2h) z
        let mut rng = RngStream::new(1, 0);
        let mut acc = [0.0; 2];
        for s in &states[1..] {
            for a in acc.iter_mut() {
                *a += (0.2_f64).sqrt() * rng.gaussian();
            }
            for i in 0..2 {
                assert!((s.x[i] - acc[i]).abs() < 1e-14);
            }
        }

        let mut rng = RngStream::new(1, 0);
        let states = run_chain(&fam, &mut cd, &[0.0, 0.0], 0.1, 10, &mut rng, 4).unwrap();
        let idx: Vec<u64> = states.iter().map(|s| s.step_index).collect();
        assert_eq!(idx, vec![0, 4, 8, 10]);
        assert!((states[2].time() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn scaling_identity_case_n1() {
        let fam = UnderdampedFamily::new(2, 1.3).unwrap();
        let r = check_scaling_relations(&fam, 0.37, 1).unwrap();
        assert_eq!(r.max(), 0.0);
        let fam = OverdampedFamily::new(2);
        let r = check_scaling_relations(&fam, 0.37, 1).unwrap();
        assert_eq!(r.max(), 0.0);
    }

    #[test]
    fn scaling_overdamped_and_underdamped() {
        let r = check_scaling_relations(&OverdampedFamily::new(4), 0.05, 8).unwrap();
        assert!(r.max() <= 1e-12, "{r:?}");
        let fam = UnderdampedFamily::new(3, 2.0).unwrap();
        let r = check_scaling_relations(&fam, 0.05, 8).unwrap();
        assert!(r.max() <= 1e-10, "{r:?}");
    }

    #[test]
    fn dense_family_scaling() {
        // Dense rendering of the underdamped family for d = 1.
        let ul = UnderdampedFamily::new(1, 0.7).unwrap();
        let fam = DenseFamily::new(2, move |h| {
            let m = ul.eval(h);
            (m.a.to_dense(2), m.g.to_dense(2), m.gamma_sq.to_dense(2))
        });
        let r = check_scaling_relations(&fam, 0.1, 16).unwrap();
        assert!(r.max() <= 1e-10, "{r:?}");
        let drift = ConstantDrift::new(vec![0.3, 0.0]);
        let mut cd = CountedDrift::new(&drift);
        let mut rng = RngStream::new(3, 3);
        let s = fine_step(&fam, &mut cd, &ChainState::new(vec![0.1, 0.2], 0.1), 0.1, &mut rng).unwrap();
        assert!(s.x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_drift_gaussian_exactness() {
        let c = [0.7, -0.2, 0.0, 0.0];
        let fam = UnderdampedFamily::new(2, 1.5).unwrap();
        let start = GaussianLaw::point(&[1.0, -1.0, 0.5, 0.25]);
        for &(h, n) in &[(0.01, 10u32), (0.1, 4), (0.05, 16)] {
            let many = propagate_constant_drift(&fam, h, n, &start, &c);
            let one = propagate_constant_drift(&fam, h * n as f64, 1, &start, &c);
            assert!(many.max_abs_diff(&one) <= 1e-10);
        }
    }
}
