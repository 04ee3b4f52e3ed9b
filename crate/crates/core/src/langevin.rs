//! Overdamped and underdamped Langevin families and the Poisson midpoint
//! kernel built on top of them.
//!
//! A coarse step of size `α` stands in for `K` fine steps of size `α/K`.
//! The drift is frozen at the coarse point `x` and corrected at a random
//! set of fine offsets `I ⊆ {0, …, K−1}`:
//!
//! ```text
//! X̂_i   = A_{αi/K} x + G_{αi/K} b(x, tα) + Σ_{j<i} A_{α(i−j−1)/K} Γ_{α/K} Z_j
//! X_next = A_α x + G_α b(x, tα) + M + p Σ_{i∈I} A_{α(K−1−i)/K} G_{α/K} (b(X̂_i) − b(x))
//! ```
//!
//! where `M ~ N(0, Γ_α²)` is the bridge noise sampled jointly with the
//! noise parts of the `X̂_i`, and `p` reweights the correction so that it is
//! unbiased (`p = K` unless the zero offset is excluded under `Option2`).
//! [`PlmcKernel::step`] computes this in `O(|I|)` drift calls;
//! [`PlmcKernel::refined_trace`] runs the equivalent `K`-step recursion with
//! the same randomness, for diagnostics and cross-validation.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::dynamics::{
    add_into, ChainState, CountedDrift, DriftField, GaussianLaw, StepMatrices, TransitionFamily,
};
use crate::error::{check_dim, Error, Result};
use crate::matrix::{Block2, Structure, StructuredMatrix};
use crate::rng::RngStream;

/// Threshold on `γh` below which the underdamped entries that suffer from
/// cancellation are evaluated by their power series.
pub const SMALL_GAMMA_H: f64 = 1e-4;

/// A potential `F` through its gradient.
pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;

    fn gradient(&self, x: &[f64], out: &mut [f64]);

    /// Smoothness constant `L` (Lipschitz constant of `∇F`), when known.
    fn smoothness(&self) -> Option<f64> {
        None
    }
}

/// `F(x) = c‖x − m‖²/2`.
#[derive(Debug, Clone)]
pub struct IsotropicQuadratic {
    pub dim: usize,
    pub curvature: f64,
    pub center: Vec<f64>,
}

impl IsotropicQuadratic {
    pub fn standard(dim: usize) -> Self {
        Self {
            dim,
            curvature: 1.0,
            center: vec![0.0; dim],
        }
    }
}

impl Potential for IsotropicQuadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for ((o, xi), mi) in out.iter_mut().zip(x).zip(&self.center) {
            *o = self.curvature * (xi - mi);
        }
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.curvature.abs())
    }
}

/// Potential given by a gradient closure.
pub struct FnPotential<F> {
    dim: usize,
    smoothness: Option<f64>,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Send + Sync> FnPotential<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self {
            dim,
            smoothness: None,
            f,
        }
    }

    pub fn with_smoothness(mut self, l: f64) -> Self {
        self.smoothness = Some(l);
        self
    }
}

impl<F: Fn(&[f64], &mut [f64]) + Send + Sync> Potential for FnPotential<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }

    fn smoothness(&self) -> Option<f64> {
        self.smoothness
    }
}

/// `b(x) = −∇F(x)`.
#[derive(Clone)]
pub struct OverdampedDrift {
    potential: Arc<dyn Potential>,
}

impl OverdampedDrift {
    pub fn new(potential: Arc<dyn Potential>) -> Self {
        Self { potential }
    }
}

impl DriftField for OverdampedDrift {
    fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn lipschitz(&self) -> Option<f64> {
        self.potential.smoothness()
    }

    fn evaluate(&self, x: &[f64], _tau: f64, out: &mut [f64]) {
        self.potential.gradient(x, out);
        for v in out.iter_mut() {
            *v = -*v;
        }
    }
}

/// `b([u; v]) = [−∇F(u); 0]` on the doubled state.
#[derive(Clone)]
pub struct UnderdampedDrift {
    potential: Arc<dyn Potential>,
}

impl UnderdampedDrift {
    pub fn new(potential: Arc<dyn Potential>) -> Self {
        Self { potential }
    }
}

impl DriftField for UnderdampedDrift {
    fn dim(&self) -> usize {
        2 * self.potential.dim()
    }

    fn lipschitz(&self) -> Option<f64> {
        self.potential.smoothness()
    }

    fn evaluate(&self, x: &[f64], _tau: f64, out: &mut [f64]) {
        let d = self.potential.dim();
        let (ou, ov) = out.split_at_mut(d);
        self.potential.gradient(&x[..d], ou);
        for v in ou.iter_mut() {
            *v = -*v;
        }
        ov.fill(0.0);
    }
}

/// `A_h = I`, `G_h = h·I`, `Γ_h² = 2h·I`.
#[derive(Debug, Clone, Copy)]
pub struct OverdampedFamily {
    dim: usize,
}

impl OverdampedFamily {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl TransitionFamily for OverdampedFamily {
    fn dim(&self) -> usize {
        self.dim
    }

    fn structure(&self) -> Structure {
        Structure::ScalarOverdamped
    }

    fn eval(&self, h: f64) -> StepMatrices {
        StepMatrices::new(
            StructuredMatrix::Scalar(1.0),
            StructuredMatrix::Scalar(h),
            StructuredMatrix::Scalar(2.0 * h),
        )
    }
}

/// Kinetic Langevin family with damping `γ` on the state `[u; v] ∈ R^{2d}`.
#[derive(Debug, Clone, Copy)]
pub struct UnderdampedFamily {
    d: usize,
    gamma: f64,
}

impl UnderdampedFamily {
    pub fn new(d: usize, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::config(format!("damping must be positive, got {gamma}")));
        }
        Ok(Self { d, gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Per-coordinate blocks `(A, G, Γ²)` at step `h`.
    pub fn blocks(&self, h: f64) -> (Block2, Block2, Block2) {
        let g = self.gamma;
        let x = g * h;
        let e1 = (-x).exp();
        // 1 − e^{−x} and 1 − e^{−2x} without cancellation
        let one_m_e1 = -(-x).exp_m1();
        let one_m_e2 = -(-2.0 * x).exp_m1();
        let (g11_scaled, c1_scaled) = if x < SMALL_GAMMA_H {
            (series_x_minus_1me(x), series_c1(x))
        } else {
            (x - one_m_e1, x - 2.0 * one_m_e1 + 0.5 * one_m_e2)
        };
        let a = Block2([[1.0, one_m_e1 / g], [0.0, e1]]);
        let gm = Block2([[g11_scaled / (g * g), 0.0], [one_m_e1 / g, 0.0]]);
        let c1 = 2.0 * c1_scaled / (g * g);
        let c2 = one_m_e1 * one_m_e1 / g;
        let c3 = one_m_e2;
        (a, gm, Block2([[c1, c2], [c2, c3]]))
    }
}

/// `x − (1 − e^{−x}) = Σ_{k≥2} (−1)^k x^k / k!`
fn series_x_minus_1me(x: f64) -> f64 {
    let mut term = x * x / 2.0;
    let mut sum = 0.0;
    for k in 2..12 {
        sum += term;
        term *= -x / (k + 1) as f64;
    }
    sum
}

/// `x − 2(1 − e^{−x}) + (1 − e^{−2x})/2 = Σ_{k≥3} (−1)^{k+1} (2^{k−1} − 2) x^k / k!`
fn series_c1(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut xk_over_fact = x * x / 2.0; // x^2 / 2!
    let mut pow2 = 2.0; // 2^{k-1} at k = 2
    for k in 3..14 {
        xk_over_fact *= x / k as f64;
        pow2 *= 2.0;
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        sum += sign * (pow2 - 2.0) * xk_over_fact;
    }
    sum
}

impl TransitionFamily for UnderdampedFamily {
    fn dim(&self) -> usize {
        2 * self.d
    }

    fn structure(&self) -> Structure {
        Structure::BlockUnderdamped
    }

    fn eval(&self, h: f64) -> StepMatrices {
        let (a, g, s) = self.blocks(h);
        StepMatrices::new(
            StructuredMatrix::Block(a),
            StructuredMatrix::Block(g),
            StructuredMatrix::Block(s),
        )
    }
}

/// Overdamped Langevin target `π ∝ e^{−F}` with coarse step `α`.
#[derive(Clone)]
pub struct OverdampedSpec {
    pub potential: Arc<dyn Potential>,
    pub alpha: f64,
    pub d: usize,
}

impl OverdampedSpec {
    pub fn drift(&self) -> OverdampedDrift {
        OverdampedDrift::new(self.potential.clone())
    }
}

#[derive(Clone)]
pub struct UnderdampedSpec {
    pub potential: Arc<dyn Potential>,
    pub gamma: f64,
    pub alpha: f64,
    pub d: usize,
}

impl UnderdampedSpec {
    pub fn drift(&self) -> UnderdampedDrift {
        UnderdampedDrift::new(self.potential.clone())
    }
}

pub fn make_olmc_family(spec: &OverdampedSpec) -> Result<OverdampedFamily> {
    if !(spec.alpha > 0.0) {
        return Err(Error::config(format!("step size must be positive, got {}", spec.alpha)));
    }
    check_dim(spec.d, spec.potential.dim())?;
    Ok(OverdampedFamily::new(spec.d))
}

pub fn make_ulmc_family(spec: &UnderdampedSpec) -> Result<UnderdampedFamily> {
    if !(spec.alpha > 0.0) {
        return Err(Error::config(format!("step size must be positive, got {}", spec.alpha)));
    }
    check_dim(spec.d, spec.potential.dim())?;
    UnderdampedFamily::new(spec.d, spec.gamma)
}

/// Law of the midpoint indicators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MidpointOption {
    /// Independent `Bernoulli(1/K)` indicators.
    Option1,
    /// Exactly one uniformly chosen index.
    Option2,
}

/// Which fine offsets are eligible as midpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MidpointSupport {
    /// `{0, …, K−1}`. The zero offset never costs a drift call.
    #[default]
    Full,
    /// `{1, …, K−1}`; `Option2` then reweights by `K−1`.
    ExcludeZero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonMidpointConfig {
    pub k: usize,
    pub option: MidpointOption,
    pub alpha: f64,
    pub support: MidpointSupport,
}

impl PoissonMidpointConfig {
    pub fn new(k: usize, option: MidpointOption, alpha: f64) -> Self {
        Self {
            k,
            option,
            alpha,
            support: MidpointSupport::Full,
        }
    }

    pub fn with_support(mut self, support: MidpointSupport) -> Self {
        self.support = support;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("refinement K must be at least 1"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("step size must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Correction weight `p`, chosen so that `E[p·H_i] = 1` at every
    /// eligible offset.
    pub fn weight(&self) -> f64 {
        match (self.support, self.option) {
            (MidpointSupport::ExcludeZero, MidpointOption::Option2) => (self.k - 1) as f64,
            _ => self.k as f64,
        }
    }
}

/// Sorted midpoint offsets drawn for one coarse step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MidpointDraw {
    pub indices: Vec<usize>,
}

impl MidpointDraw {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
}

/// Draw the midpoint set. Option1 consumes one uniform per eligible offset,
/// Option2 a single uniform integer (none when no offset is eligible).
pub fn draw_midpoints(cfg: &PoissonMidpointConfig, rng: &mut RngStream) -> MidpointDraw {
    let lo = match cfg.support {
        MidpointSupport::Full => 0,
        MidpointSupport::ExcludeZero => 1,
    };
    MidpointDraw {
        indices: draw_offsets(cfg.k, cfg.option, lo, rng),
    }
}

/// Sorted offsets in `lo..k`: independent `Bernoulli(1/k)` per offset under
/// Option1, one uniform offset under Option2.
pub(crate) fn draw_offsets(k: usize, option: MidpointOption, lo: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut indices = Vec::new();
    match option {
        MidpointOption::Option1 => {
            let p = 1.0 / k as f64;
            for i in lo..k {
                if rng.bernoulli(p) {
                    indices.push(i);
                }
            }
        }
        MidpointOption::Option2 => {
            if lo < k {
                indices.push(rng.uniform_index(lo, k));
            }
        }
    }
    indices
}

/// Per-step accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepStats {
    pub drift_calls: u64,
    /// Number of drawn midpoints.
    pub n_midpoints: usize,
}

/// Source of the Gaussian noise for one coarse step.
pub enum BridgeNoise<'r> {
    /// Fresh bridge draws `W_1, …, W_{N+1}` from the stream.
    Fresh(&'r mut RngStream),
    /// Bridge noise assembled from the `K` fine Gaussians `Z_0, …, Z_{K−1}`,
    /// so the output matches the refined recursion run on the same `Z`.
    Fine(&'r [Vec<f64>]),
}

/// A Poisson midpoint kernel: a transition family, a configuration, and the
/// matrices at every multiple of `α/K`.
pub struct PlmcKernel<'f> {
    fam: &'f dyn TransitionFamily,
    cfg: PoissonMidpointConfig,
    /// `mats[j] = eval(α j / K)` for `j = 0..=K`.
    mats: Vec<StepMatrices>,
}

impl<'f> PlmcKernel<'f> {
    pub fn new(fam: &'f dyn TransitionFamily, cfg: PoissonMidpointConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.k;
        let mats: Vec<StepMatrices> = (0..=k)
            .map(|j| fam.eval(cfg.alpha * j as f64 / k as f64))
            .collect();
        for m in &mats {
            m.noise_factor()?;
        }
        Ok(Self { fam, cfg, mats })
    }

    pub fn config(&self) -> &PoissonMidpointConfig {
        &self.cfg
    }

    pub fn family(&self) -> &dyn TransitionFamily {
        self.fam
    }

    pub fn dim(&self) -> usize {
        self.fam.dim()
    }

    /// Matrices at step `α j / K`.
    pub fn matrices(&self, j: usize) -> &StepMatrices {
        &self.mats[j]
    }

    fn factor(&self, j: usize) -> &StructuredMatrix {
        // factors were forced in `new`
        self.mats[j].noise_factor().expect("noise factor checked at construction")
    }

    /// Time passed to the drift at fine offset `i` of coarse step `t`.
    pub fn fine_time(&self, t: u64, i: usize) -> f64 {
        let a = self.cfg.alpha;
        t as f64 * a + i as f64 * a / self.cfg.k as f64
    }

    fn fine_index(&self, t: u64, i: usize) -> u64 {
        t * self.cfg.k as u64 + i as u64
    }

    /// Cheap interpolation at offset `i` given the cached coarse drift `b0`
    /// and the fine Gaussians `Z_0, …, Z_{i−1}`.
    pub fn interpolate(&self, x: &[f64], b0: &[f64], i: usize, noise: &[Vec<f64>]) -> Result<Vec<f64>> {
        if i >= self.cfg.k {
            return Err(Error::config(format!(
                "fine offset {i} out of range for K = {}",
                self.cfg.k
            )));
        }
        if noise.len() < i {
            return Err(Error::config(format!("need {i} fine noise vectors, got {}", noise.len())));
        }
        let dim = self.dim();
        let mut out = vec![0.0; dim];
        self.mats[i].a.apply(x, &mut out);
        self.mats[i].g.apply_add(b0, &mut out);
        let mut tmp = vec![0.0; dim];
        let l1 = self.factor(1);
        for (j, z) in noise.iter().take(i).enumerate() {
            check_dim(dim, z.len())?;
            let mut lz = vec![0.0; dim];
            l1.apply(z, &mut lz);
            self.mats[i - j - 1].a.apply(&lz, &mut tmp);
            add_into(&mut out, &tmp);
        }
        Ok(out)
    }

    /// One coarse step (Steps 1–5) with noise drawn from `rng`.
    pub fn step(
        &self,
        drift: &mut CountedDrift<'_>,
        x: &[f64],
        t: u64,
        rng: &mut RngStream,
    ) -> Result<(Vec<f64>, StepStats)> {
        let draw = draw_midpoints(&self.cfg, rng);
        self.step_with(drift, x, t, &draw, BridgeNoise::Fresh(rng))
    }

    /// One coarse step for a given midpoint set and noise source.
    pub fn step_with(
        &self,
        drift: &mut CountedDrift<'_>,
        x: &[f64],
        t: u64,
        draw: &MidpointDraw,
        noise: BridgeNoise<'_>,
    ) -> Result<(Vec<f64>, StepStats)> {
        let dim = self.dim();
        let k = self.cfg.k;
        check_dim(dim, x.len())?;
        check_dim(dim, drift.dim())?;
        if draw.indices.iter().any(|&i| i >= k) || draw.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("midpoint indices must be sorted, distinct and below K"));
        }
        let calls0 = drift.calls();
        let t_coarse = self.fine_index(t, 0);
        let b0 = drift.eval(x, self.fine_time(t, 0), t_coarse)?;

        // Step 2: bridge noise at each midpoint and at the end of the step.
        let bridge = self.bridge_noise(draw, noise)?;

        // Steps 3 and 4.
        let p = self.cfg.weight();
        let mut corr: Option<Vec<f64>> = None;
        let g1 = &self.mats[1].g;
        for (k_idx, &i) in draw.indices.iter().enumerate() {
            if i == 0 {
                // X̂ = x, so the correction vanishes and b(x) is already known.
                continue;
            }
            let mut x_hat = vec![0.0; dim];
            self.mats[i].a.apply(x, &mut x_hat);
            self.mats[i].g.apply_add(&b0, &mut x_hat);
            add_into(&mut x_hat, &bridge[k_idx]);
            let step_id = self.fine_index(t, i);
            let mut diff = drift.eval(&x_hat, self.fine_time(t, i), step_id)?;
            for (dv, bv) in diff.iter_mut().zip(&b0) {
                *dv -= bv;
            }
            let mut gd = vec![0.0; dim];
            g1.apply(&diff, &mut gd);
            let mut term = vec![0.0; dim];
            self.mats[k - 1 - i].a.apply(&gd, &mut term);
            let acc = corr.get_or_insert_with(|| vec![0.0; dim]);
            for (c, v) in acc.iter_mut().zip(&term) {
                *c += p * v;
            }
            if acc.iter().any(|v| !v.is_finite()) {
                return Err(Error::divergence(step_id, format!("non-finite correction at midpoint {i}")));
            }
        }

        // Step 5.
        let mut out = vec![0.0; dim];
        self.mats[k].a.apply(x, &mut out);
        self.mats[k].g.apply_add(&b0, &mut out);
        add_into(&mut out, &bridge[draw.len()]);
        if let Some(c) = corr {
            add_into(&mut out, &c);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::divergence(t_coarse, "state became non-finite"));
        }
        Ok((
            out,
            StepStats {
                drift_calls: drift.calls() - calls0,
                n_midpoints: draw.len(),
            },
        ))
    }

    /// `M_1, …, M_N, M_{N+1}` for the drawn offsets, with `M_{N+1}` the
    /// noise accumulated over the whole coarse step.
    fn bridge_noise(&self, draw: &MidpointDraw, noise: BridgeNoise<'_>) -> Result<Vec<Vec<f64>>> {
        let dim = self.dim();
        let k = self.cfg.k;
        let mut targets: Vec<usize> = draw.indices.clone();
        targets.push(k);
        let mut out = Vec::with_capacity(targets.len());
        match noise {
            BridgeNoise::Fresh(rng) => {
                let mut m = vec![0.0; dim];
                let mut prev = 0usize;
                let mut w = vec![0.0; dim];
                let mut tmp = vec![0.0; dim];
                for &target in &targets {
                    let delta = target - prev;
                    if delta > 0 {
                        rng.fill_gaussian(&mut w);
                        let mut lw = vec![0.0; dim];
                        self.factor(delta).apply(&w, &mut lw);
                        if prev == 0 {
                            m = lw;
                        } else {
                            self.mats[delta].a.apply(&m, &mut tmp);
                            add_into(&mut tmp, &lw);
                            std::mem::swap(&mut m, &mut tmp);
                        }
                    }
                    out.push(m.clone());
                    prev = target;
                }
            }
            BridgeNoise::Fine(z) => {
                if z.len() != k {
                    return Err(Error::config(format!("need {k} fine noise vectors, got {}", z.len())));
                }
                // S_i = Σ_{j<i} A_{α(i−j−1)/K} L_{α/K} Z_j, built incrementally.
                let mut s = vec![0.0; dim];
                let mut tmp = vec![0.0; dim];
                let l1 = self.factor(1);
                let a1 = &self.mats[1].a;
                let mut next = 0usize;
                for i in 0..=k {
                    while next < targets.len() && targets[next] == i {
                        out.push(s.clone());
                        next += 1;
                    }
                    if i == k {
                        break;
                    }
                    check_dim(dim, z[i].len())?;
                    let mut lz = vec![0.0; dim];
                    l1.apply(&z[i], &mut lz);
                    if i == 0 {
                        s = lz;
                    } else {
                        a1.apply(&s, &mut tmp);
                        add_into(&mut tmp, &lz);
                        std::mem::swap(&mut s, &mut tmp);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Run the `K`-step refined recursion on one coarse step with the given
    /// midpoint set and fine Gaussians, recording every intermediate.
    ///
    /// With `full = true` the drift is also evaluated at every `X̂_i` and at
    /// every refined iterate (needed by the diagnostics); otherwise only
    /// where the recursion itself needs it.
    pub fn refined_trace(
        &self,
        drift: &mut CountedDrift<'_>,
        x: &[f64],
        t: u64,
        draw: &MidpointDraw,
        z: &[Vec<f64>],
        full: bool,
    ) -> Result<CoarseStepTrace> {
        let dim = self.dim();
        let k = self.cfg.k;
        check_dim(dim, x.len())?;
        if z.len() != k {
            return Err(Error::config(format!("need {k} fine noise vectors, got {}", z.len())));
        }
        let p = self.cfg.weight();
        let b0 = drift.eval(x, self.fine_time(t, 0), self.fine_index(t, 0))?;
        let m1 = &self.mats[1];
        let l1 = self.factor(1);

        let mut x_tilde = vec![x.to_vec()];
        let mut x_hat = Vec::with_capacity(k);
        let mut b_hat = Vec::with_capacity(k);
        let mut b_tilde = Vec::with_capacity(k);
        let mut h = Vec::with_capacity(k);
        let mut s = vec![0.0; dim];
        let mut tmp = vec![0.0; dim];
        for i in 0..k {
            let hi = draw.contains(i);
            h.push(hi);
            let mut xh = vec![0.0; dim];
            self.mats[i].a.apply(x, &mut xh);
            self.mats[i].g.apply_add(&b0, &mut xh);
            add_into(&mut xh, &s);
            let tau = self.fine_time(t, i);
            let step_id = self.fine_index(t, i);
            let bh = if full || (hi && i > 0) {
                Some(drift.eval(&xh, tau, step_id)?)
            } else {
                None
            };
            let bt = if full {
                Some(drift.eval(&x_tilde[i], tau, step_id)?)
            } else {
                None
            };

            let mut eff = b0.clone();
            if hi {
                if let Some(bh) = &bh {
                    for ((e, bhv), b0v) in eff.iter_mut().zip(bh).zip(&b0) {
                        *e += p * (bhv - b0v);
                    }
                }
            }
            let mut next = vec![0.0; dim];
            m1.a.apply(&x_tilde[i], &mut next);
            m1.g.apply_add(&eff, &mut next);
            let mut lz = vec![0.0; dim];
            l1.apply(&z[i], &mut lz);
            add_into(&mut next, &lz);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::divergence(step_id, "refined iterate became non-finite"));
            }
            x_tilde.push(next);

            m1.a.apply(&s, &mut tmp);
            add_into(&mut tmp, &lz);
            std::mem::swap(&mut s, &mut tmp);

            x_hat.push(xh);
            b_hat.push(bh);
            b_tilde.push(bt);
        }
        Ok(CoarseStepTrace {
            t,
            h,
            z: z.to_vec(),
            b0,
            x_hat,
            x_tilde,
            b_hat,
            b_tilde,
        })
    }

    /// `Γ_{α/K}^{-1} G_{α/K}`, with `Γ` the lower-triangular noise factor.
    pub fn whitened_gain(&self) -> Result<StructuredMatrix> {
        let l = self.factor(1);
        let g = &self.mats[1].g;
        match (l, g) {
            (StructuredMatrix::Scalar(l), StructuredMatrix::Scalar(g)) => {
                if *l == 0.0 {
                    return Err(Error::DegenerateCovariance("Γ is zero".into()));
                }
                Ok(StructuredMatrix::Scalar(g / l))
            }
            (StructuredMatrix::Block(l), StructuredMatrix::Block(g)) => {
                let inv = l
                    .lower_inverse()
                    .ok_or_else(|| Error::DegenerateCovariance("singular Γ block".into()))?;
                Ok(StructuredMatrix::Block(inv.mul(g)))
            }
            _ => {
                let dim = self.dim();
                let ld = l.to_dense(dim);
                let gd = g.to_dense(dim);
                let sol = ld
                    .solve_lower_triangular(&gd)
                    .ok_or_else(|| Error::DegenerateCovariance("singular Γ".into()))?;
                Ok(StructuredMatrix::Dense(sol))
            }
        }
    }

    /// Exact law of one coarse step from `x` under a constant drift `c`,
    /// for a fixed midpoint set, propagated through the fresh-noise bridge.
    pub fn constant_drift_law(&self, x: &[f64], c: &[f64], draw: &MidpointDraw) -> GaussianLaw {
        let dim = self.dim();
        let k = self.cfg.k;
        let mut cov = DMatrix::zeros(dim, dim);
        let mut prev = 0usize;
        let mut targets = draw.indices.clone();
        targets.push(k);
        for &target in &targets {
            let delta = target - prev;
            let m = &self.mats[delta];
            let a = m.a.to_dense(dim);
            cov = &a * cov * a.transpose() + m.gamma_sq.to_dense(dim);
            prev = target;
        }
        let mk = &self.mats[k];
        let mean = mk.a.to_dense(dim) * nalgebra::DVector::from_row_slice(x)
            + mk.g.to_dense(dim) * nalgebra::DVector::from_row_slice(c);
        GaussianLaw { mean, cov }
    }
}

/// Everything recorded by [`PlmcKernel::refined_trace`] for one coarse step.
#[derive(Debug, Clone)]
pub struct CoarseStepTrace {
    pub t: u64,
    /// `H_i` for `i = 0..K`.
    pub h: Vec<bool>,
    pub z: Vec<Vec<f64>>,
    /// Drift at the coarse point.
    pub b0: Vec<f64>,
    /// `X̂_i`, `i = 0..K`.
    pub x_hat: Vec<Vec<f64>>,
    /// Refined iterates `X̃_0, …, X̃_K`.
    pub x_tilde: Vec<Vec<f64>>,
    pub b_hat: Vec<Option<Vec<f64>>>,
    pub b_tilde: Vec<Option<Vec<f64>>>,
}

impl CoarseStepTrace {
    pub fn output(&self) -> &[f64] {
        self.x_tilde.last().expect("trace has at least one iterate")
    }
}

/// Free-function form of [`PlmcKernel::interpolate`] that evaluates and
/// returns the coarse drift itself (one drift call).
pub fn cheap_interpolate(
    fam: &dyn TransitionFamily,
    drift: &mut CountedDrift<'_>,
    x: &[f64],
    t: u64,
    i: usize,
    cfg: &PoissonMidpointConfig,
    noise: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let kernel = PlmcKernel::new(fam, *cfg)?;
    if i >= cfg.k {
        return Err(Error::config(format!("fine offset {i} out of range for K = {}", cfg.k)));
    }
    let b0 = drift.eval(x, kernel.fine_time(t, 0), t * cfg.k as u64)?;
    kernel.interpolate(x, &b0, i, noise)
}

/// Free-function form of [`PlmcKernel::step`].
pub fn plmc_step(
    fam: &dyn TransitionFamily,
    drift: &mut CountedDrift<'_>,
    x: &[f64],
    t: u64,
    cfg: &PoissonMidpointConfig,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, StepStats)> {
    PlmcKernel::new(fam, *cfg)?.step(drift, x, t, rng)
}

/// Run `n_coarse` Poisson midpoint steps, recording every `stride`-th state
/// plus the last. Returns the states and the total drift calls.
pub fn run_plmc_chain(
    kernel: &PlmcKernel<'_>,
    drift: &mut CountedDrift<'_>,
    x0: &[f64],
    n_coarse: u64,
    rng: &mut RngStream,
    stride: u64,
) -> Result<Vec<ChainState>> {
    if stride == 0 {
        return Err(Error::config("record stride must be at least 1"));
    }
    let alpha = kernel.config().alpha;
    let mut state = ChainState::new(x0.to_vec(), alpha);
    let mut out = vec![state.clone()];
    for t in 0..n_coarse {
        let (x, _) = kernel.step(drift, &state.x, t, rng)?;
        state = ChainState {
            x,
            step_index: t + 1,
            step_size: alpha,
        };
        if state.step_index.is_multiple_of(stride) || state.step_index == n_coarse {
            out.push(state.clone());
        }
    }
    Ok(out)
}

/// Running sums of the bias and variance-scale quantities that enter the
/// trajectory KL bound between the midpoint chain and the fine chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsAccumulator {
    /// Exponent `r > 1` of the last moment term.
    pub r: f64,
    /// `Σ ‖B‖²` over all recorded fine indices.
    pub sum_b_sq: f64,
    /// `Σ β⁴/K²`
    pub sum_beta4: f64,
    /// `Σ β⁶/K²`
    pub sum_beta6: f64,
    /// `Σ β¹⁰/K³`
    pub sum_beta10: f64,
    /// `Σ β^{2r}/K`
    pub sum_beta2r: f64,
    /// Number of coarse steps folded in.
    pub samples_seen: u64,
}

impl DiagnosticsAccumulator {
    pub fn new(r: f64) -> Self {
        Self {
            r,
            sum_b_sq: 0.0,
            sum_beta4: 0.0,
            sum_beta6: 0.0,
            sum_beta10: 0.0,
            sum_beta2r: 0.0,
            samples_seen: 0,
        }
    }

    pub fn merge(&mut self, other: &DiagnosticsAccumulator) {
        self.sum_b_sq += other.sum_b_sq;
        self.sum_beta4 += other.sum_beta4;
        self.sum_beta6 += other.sum_beta6;
        self.sum_beta10 += other.sum_beta10;
        self.sum_beta2r += other.sum_beta2r;
        self.samples_seen += other.samples_seen;
    }

    /// Sum of the β moment terms (without the universal constant).
    pub fn beta_terms(&self) -> f64 {
        self.sum_beta4 + self.sum_beta6 + self.sum_beta10 + self.sum_beta2r
    }

    pub fn is_valid(&self) -> bool {
        [
            self.sum_b_sq,
            self.sum_beta4,
            self.sum_beta6,
            self.sum_beta10,
            self.sum_beta2r,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Fold one coarse step's bias `B_i = Γ⁻¹G[b(X̂_i) − b(X̃_i)]` and
/// variance scale `β_i = ‖p Γ⁻¹G[b(X̂_i) − b(X̃_0)]‖` into `acc`.
/// The trace must come from [`PlmcKernel::refined_trace`] with `full = true`.
pub fn accumulate_theorem1_diagnostics(
    kernel: &PlmcKernel<'_>,
    trace: &CoarseStepTrace,
    acc: &mut DiagnosticsAccumulator,
) -> Result<()> {
    if !(acc.r > 1.0) {
        return Err(Error::config(format!("moment exponent r must exceed 1, got {}", acc.r)));
    }
    let gain = kernel.whitened_gain()?;
    let k = kernel.config().k as f64;
    let p = kernel.config().weight();
    let dim = kernel.dim();
    let mut w = vec![0.0; dim];
    let mut diff = vec![0.0; dim];
    for (bh, bt) in trace.b_hat.iter().zip(&trace.b_tilde) {
        let (bh, bt) = match (bh, bt) {
            (Some(bh), Some(bt)) => (bh, bt),
            _ => return Err(Error::config("diagnostics need a full trace")),
        };
        for ((d, a), b) in diff.iter_mut().zip(bh).zip(bt) {
            *d = a - b;
        }
        gain.apply(&diff, &mut w);
        acc.sum_b_sq += w.iter().map(|v| v * v).sum::<f64>();

        for ((d, a), b) in diff.iter_mut().zip(bh).zip(&trace.b0) {
            *d = a - b;
        }
        gain.apply(&diff, &mut w);
        let beta = p * w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let b2 = beta * beta;
        acc.sum_beta4 += b2 * b2 / (k * k);
        acc.sum_beta6 += b2 * b2 * b2 / (k * k);
        acc.sum_beta10 += b2.powi(5) / (k * k * k);
        acc.sum_beta2r += beta.powf(2.0 * acc.r) / k;
    }
    acc.samples_seen += 1;
    Ok(())
}

/// Rewrite every refined update as a plain fine step driven by the
/// perturbed noise `Z̃_i = Z_i + B_i + S_i`, replay it from `X̃_0`, and
/// return the largest deviation from the recorded iterates.
pub fn bias_variance_decomposition_check(
    kernel: &PlmcKernel<'_>,
    drift: &mut CountedDrift<'_>,
    trace: &CoarseStepTrace,
) -> Result<f64> {
    let gain = kernel.whitened_gain()?;
    let p = kernel.config().weight();
    let dim = kernel.dim();
    let m1 = kernel.matrices(1);
    let l1 = m1.noise_factor()?;
    let mut y = trace.x_tilde[0].clone();
    let mut worst = 0.0_f64;
    let mut diff = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    for i in 0..trace.h.len() {
        let (bh, bt) = match (&trace.b_hat[i], &trace.b_tilde[i]) {
            (Some(bh), Some(bt)) => (bh, bt),
            _ => return Err(Error::config("decomposition check needs a full trace")),
        };
        let mut z_eff = trace.z[i].clone();
        // bias part
        for ((d, a), b) in diff.iter_mut().zip(bh).zip(bt) {
            *d = a - b;
        }
        gain.apply(&diff, &mut w);
        add_into(&mut z_eff, &w);
        // variance part
        let scale = if trace.h[i] { p - 1.0 } else { -1.0 };
        for ((d, a), b) in diff.iter_mut().zip(bh).zip(&trace.b0) {
            *d = a - b;
        }
        gain.apply(&diff, &mut w);
        for (ze, wv) in z_eff.iter_mut().zip(&w) {
            *ze += scale * wv;
        }

        let b_y = drift.eval(&y, kernel.fine_time(trace.t, i), kernel.fine_index(trace.t, i))?;
        let mut next = vec![0.0; dim];
        m1.a.apply(&y, &mut next);
        m1.g.apply_add(&b_y, &mut next);
        l1.apply_add(&z_eff, &mut next);
        y = next;
        for (a, b) in y.iter().zip(&trace.x_tilde[i + 1]) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Randomized midpoint step for overdamped Langevin with drift `b = −∇F`.
pub fn rlmc_step(
    alpha: f64,
    drift: &mut CountedDrift<'_>,
    x: &[f64],
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let u = rng.uniform();
    let z1 = rng.gaussian_vec(x.len());
    let z2 = rng.gaussian_vec(x.len());
    rlmc_step_with(alpha, drift, x, u, &z1, &z2)
}

/// [`rlmc_step`] with the midpoint fraction and both Gaussians pinned.
pub fn rlmc_step_with(
    alpha: f64,
    drift: &mut CountedDrift<'_>,
    x: &[f64],
    u: f64,
    z1: &[f64],
    z2: &[f64],
) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::config(format!("step size must be positive, got {alpha}")));
    }
    check_dim(drift.dim(), x.len())?;
    let s1 = (2.0 * u * alpha).sqrt();
    let s2 = (2.0 * (1.0 - u) * alpha).sqrt();
    let b = drift.eval(x, 0.0, 0)?;
    let mid: Vec<f64> = x
        .iter()
        .zip(&b)
        .zip(z1)
        .map(|((xi, bi), zi)| xi + u * alpha * bi + s1 * zi)
        .collect();
    let bm = drift.eval(&mid, u * alpha, 0)?;
    let out: Vec<f64> = x
        .iter()
        .zip(&bm)
        .zip(z1.iter().zip(z2))
        .map(|((xi, bi), (a, b))| xi + alpha * bi + s1 * a + s2 * b)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::divergence(0, "randomized midpoint step became non-finite"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{check_scaling_relations, fine_step_with_noise, ConstantDrift};

    fn quad_drift(d: usize) -> OverdampedDrift {
        OverdampedDrift::new(Arc::new(IsotropicQuadratic::standard(d)))
    }

    #[test]
    fn olmc_family_values() {
        let spec = OverdampedSpec {
            potential: Arc::new(IsotropicQuadratic::standard(3)),
            alpha: 0.5,
            d: 3,
        };
        let fam = make_olmc_family(&spec).unwrap();
        let m = fam.eval(0.5);
        assert_eq!(m.a, StructuredMatrix::Scalar(1.0));
        assert_eq!(m.g, StructuredMatrix::Scalar(0.5));
        assert_eq!(m.gamma_sq, StructuredMatrix::Scalar(1.0));
        let r = check_scaling_relations(&fam, 0.1, 10).unwrap();
        assert!(r.max() <= 1e-12);
        let bad = OverdampedSpec { alpha: 0.0, ..spec };
        assert!(matches!(make_olmc_family(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn ulmc_family_values() {
        let fam = UnderdampedFamily::new(1, 1.0).unwrap();
        let (a, g, s) = fam.blocks(0.0);
        assert_eq!(a, Block2::IDENTITY);
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(s.max_abs(), 0.0);
        let (a, _, _) = fam.blocks(2.0_f64.ln());
        assert!((a.0[0][1] - 0.5).abs() < 1e-15);
        assert!((a.0[1][1] - 0.5).abs() < 1e-15);
        assert_eq!(a.0[0][0], 1.0);
        assert_eq!(a.0[1][0], 0.0);
        assert!(matches!(UnderdampedFamily::new(1, 0.0), Err(Error::Config(_))));
        assert!(matches!(UnderdampedFamily::new(1, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn ulmc_small_step_series_matches_closed_form() {
        // Straddle the series threshold: both branches must agree to high
        // relative accuracy.
        let gamma = 1.0;
        let lo = UnderdampedFamily::new(1, gamma).unwrap();
        let h_below = SMALL_GAMMA_H * 0.999;
        let h_above = SMALL_GAMMA_H * 1.001;
        let (_, g_b, s_b) = lo.blocks(h_below);
        let (_, g_a, s_a) = lo.blocks(h_above);
        // leading orders: G11 ≈ h²/2, c1 ≈ 2h³/3
        assert!((g_b.0[0][0] / (h_below * h_below / 2.0) - 1.0).abs() < 1e-3);
        assert!((s_b.0[0][0] / (2.0 * h_below.powi(3) / 3.0) - 1.0).abs() < 1e-3);
        assert!((g_a.0[0][0] / (h_above * h_above / 2.0) - 1.0).abs() < 1e-3);
        assert!((s_a.0[0][0] / (2.0 * h_above.powi(3) / 3.0) - 1.0).abs() < 1e-3);
        // series vs closed form at a moderate x where both are accurate
        let x: f64 = 1e-2;
        let one_m_e1 = -(-x).exp_m1();
        let one_m_e2 = -(-2.0 * x).exp_m1();
        assert!((series_x_minus_1me(x) / (x - one_m_e1) - 1.0).abs() < 1e-12);
        assert!((series_c1(x) / (x - 2.0 * one_m_e1 + 0.5 * one_m_e2) - 1.0).abs() < 1e-9);
        // tiny steps still factor
        let m = lo.eval(1e-9);
        assert!(m.noise_factor().is_ok());
    }

    #[test]
    fn draw_k1_option2() {
        let cfg = PoissonMidpointConfig::new(1, MidpointOption::Option2, 0.1);
        let mut rng = RngStream::new(0, 0);
        for _ in 0..20 {
            assert_eq!(draw_midpoints(&cfg, &mut rng).indices, vec![0]);
        }
        let cfg = cfg.with_support(MidpointSupport::ExcludeZero);
        assert!(draw_midpoints(&cfg, &mut rng).is_empty());
    }

    #[test]
    fn draws_consume_rng_deterministically() {
        let cfg = PoissonMidpointConfig::new(5, MidpointOption::Option1, 0.1);
        let mut rng = RngStream::new(0, 0);
        draw_midpoints(&cfg, &mut rng);
        assert_eq!(rng.draws(), 5);
        let cfg = PoissonMidpointConfig::new(5, MidpointOption::Option2, 0.1);
        let mut rng = RngStream::new(0, 0);
        draw_midpoints(&cfg, &mut rng);
        assert_eq!(rng.draws(), 1);
        let cfg = cfg.with_support(MidpointSupport::ExcludeZero);
        let mut rng = RngStream::new(0, 0);
        let d = draw_midpoints(&cfg, &mut rng);
        assert!(d.indices[0] >= 1 && d.indices[0] < 5);
    }

    #[test]
    fn interpolate_zero_offset_is_identity() {
        let fam = UnderdampedFamily::new(2, 1.0).unwrap();
        let drift = UnderdampedDrift::new(Arc::new(IsotropicQuadratic::standard(2)));
        let mut cd = CountedDrift::new(&drift);
        let cfg = PoissonMidpointConfig::new(4, MidpointOption::Option1, 0.2);
        let x = vec![0.3, -0.1, 1.0, 2.0];
        let out = cheap_interpolate(&fam, &mut cd, &x, 3, 0, &cfg, &[]).unwrap();
        assert_eq!(out, x);
        assert_eq!(cd.calls(), 1);
        assert!(matches!(
            cheap_interpolate(&fam, &mut cd, &x, 3, 4, &cfg, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn interpolate_single_fine_step_constant_drift() {
        let fam = OverdampedFamily::new(2);
        let c = ConstantDrift::new(vec![0.4, -1.0]);
        let mut cd = CountedDrift::new(&c);
        let alpha = 0.3;
        let cfg = PoissonMidpointConfig::new(2, MidpointOption::Option1, alpha);
        let x = vec![1.0, 2.0];
        let z = vec![vec![0.5, -0.25]];
        let out = cheap_interpolate(&fam, &mut cd, &x, 0, 1, &cfg, &z).unwrap();
        for j in 0..2 {
            let want = x[j] + alpha / 2.0 * c.value[j] + alpha.sqrt() * z[0][j];
            assert!((out[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn interpolate_equals_frozen_drift_fine_steps() {
        let gamma = 1.0;
        let alpha = 0.2;
        let k = 4;
        let fam = UnderdampedFamily::new(1, gamma).unwrap();
        let drift = UnderdampedDrift::new(Arc::new(IsotropicQuadratic::standard(1)));
        let mut cd = CountedDrift::new(&drift);
        let cfg = PoissonMidpointConfig::new(k, MidpointOption::Option1, alpha);
        let x = vec![0.7, -0.4];
        let z = vec![vec![0.3, 1.1], vec![-0.8, 0.2], vec![0.05, -1.4]];
        let got = cheap_interpolate(&fam, &mut cd, &x, 2, 3, &cfg, &z).unwrap();

        let b0 = drift_value(&drift, &x);
        let frozen = ConstantDrift::new(b0);
        let mut cf = CountedDrift::new(&frozen);
        let mut s = ChainState::new(x.clone(), alpha / k as f64);
        for zi in &z {
            s = fine_step_with_noise(&fam, &mut cf, &s, alpha / k as f64, zi).unwrap();
        }
        for j in 0..2 {
            assert!((got[j] - s.x[j]).abs() < 1e-14, "{got:?} vs {:?}", s.x);
        }
    }

    fn drift_value(d: &dyn DriftField, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        d.evaluate(x, 0.0, &mut out);
        out
    }

    #[test]
    fn k1_option2_matches_fine_step_bitwise() {
        let alpha = 0.37;
        let fam = UnderdampedFamily::new(3, 2.0).unwrap();
        let drift = UnderdampedDrift::new(Arc::new(IsotropicQuadratic::standard(3)));
        let cfg = PoissonMidpointConfig::new(1, MidpointOption::Option2, alpha);
        let kernel = PlmcKernel::new(&fam, cfg).unwrap();
        let mut rng = RngStream::new(5, 9);
        let mut x = vec![0.5, -1.0, 2.0, 0.1, 0.0, -0.3];
        let mut y = x.clone();
        for t in 0..50u64 {
            let z = rng.gaussian_vec(6);
            let draw = MidpointDraw { indices: vec![0] };
            let mut cd = CountedDrift::new(&drift);
            let (nx, stats) = kernel
                .step_with(&mut cd, &x, t, &draw, BridgeNoise::Fine(std::slice::from_ref(&z)))
                .unwrap();
            assert_eq!(stats.drift_calls, 1);
            let mut cd2 = CountedDrift::new(&drift);
            let mut st = ChainState::new(y.clone(), alpha);
            st.step_index = t;
            let ny = fine_step_with_noise(&fam, &mut cd2, &st, alpha, &z).unwrap();
            for (a, b) in nx.iter().zip(&ny.x) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            x = nx;
            y = ny.x;
        }
    }

    #[test]
    fn shared_noise_step_matches_refined_recursion() {
        for (fam, drift) in [
            (
                Box::new(OverdampedFamily::new(2)) as Box<dyn TransitionFamily>,
                Box::new(quad_drift(2)) as Box<dyn DriftField>,
            ),
            (
                Box::new(UnderdampedFamily::new(1, 2.0).unwrap()),
                Box::new(UnderdampedDrift::new(Arc::new(IsotropicQuadratic::standard(1)))),
            ),
        ] {
            for option in [MidpointOption::Option1, MidpointOption::Option2] {
                let cfg = PoissonMidpointConfig::new(8, option, 0.2);
                let kernel = PlmcKernel::new(fam.as_ref(), cfg).unwrap();
                let mut rng = RngStream::new(42, 0);
                for t in 0..20 {
                    let draw = draw_midpoints(&cfg, &mut rng);
                    let z: Vec<Vec<f64>> = (0..8).map(|_| rng.gaussian_vec(2)).collect();
                    let x = rng.gaussian_vec(2);
                    let mut c1 = CountedDrift::new(drift.as_ref());
                    let (a, stats) = kernel
                        .step_with(&mut c1, &x, t, &draw, BridgeNoise::Fine(&z))
                        .unwrap();
                    let mut c2 = CountedDrift::new(drift.as_ref());
                    let tr = kernel.refined_trace(&mut c2, &x, t, &draw, &z, false).unwrap();
                    for (u, v) in a.iter().zip(tr.output()) {
                        assert!((u - v).abs() < 1e-12, "{a:?} vs {:?}", tr.output());
                    }
                    let nonzero = draw.indices.iter().filter(|&&i| i > 0).count() as u64;
                    assert_eq!(stats.drift_calls, 1 + nonzero);
                    assert_eq!(stats.n_midpoints, draw.len());
                }
            }
        }
    }

    #[test]
    fn constant_drift_correction_vanishes() {
        let fam = OverdampedFamily::new(1);
        let c = ConstantDrift::new(vec![0.5]);
        let cfg = PoissonMidpointConfig::new(4, MidpointOption::Option1, 0.2);
        let kernel = PlmcKernel::new(&fam, cfg).unwrap();
        let draw = MidpointDraw {
            indices: vec![1, 3],
        };
        let law = kernel.constant_drift_law(&[1.0], &c.value, &draw);
        assert!((law.mean[0] - (1.0 + 0.2 * 0.5)).abs() < 1e-15);
        assert!((law.cov[(0, 0)] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn rlmc_pinned_cases() {
        let d = quad_drift(1);
        let mut cd = CountedDrift::new(&d);
        let out = rlmc_step_with(0.1, &mut cd, &[2.0], 0.0, &[0.0], &[0.0]).unwrap();
        assert!((out[0] - 1.8).abs() < 1e-15);
        assert_eq!(cd.calls(), 2);
        let zero = ConstantDrift::zero(1);
        let mut cz = CountedDrift::new(&zero);
        let out = rlmc_step_with(0.1, &mut cz, &[2.0], 0.25, &[1.0], &[-1.0]).unwrap();
        let want = 2.0 + (0.05_f64).sqrt() - (0.15_f64).sqrt();
        assert!((out[0] - want).abs() < 1e-15);
    }

    #[test]
    fn whitened_gain_olmc() {
        let fam = OverdampedFamily::new(3);
        let cfg = PoissonMidpointConfig::new(4, MidpointOption::Option1, 0.1);
        let kernel = PlmcKernel::new(&fam, cfg).unwrap();
        match kernel.whitened_gain().unwrap() {
            StructuredMatrix::Scalar(v) => assert!((v - (0.1_f64 / 8.0).sqrt()).abs() < 1e-15),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn diagnostics_zero_for_constant_drift() {
        let fam = UnderdampedFamily::new(1, 1.0).unwrap();
        let c = ConstantDrift::new(vec![0.3, 0.0]);
        let cfg = PoissonMidpointConfig::new(4, MidpointOption::Option1, 0.2);
        let kernel = PlmcKernel::new(&fam, cfg).unwrap();
        let mut rng = RngStream::new(1, 1);
        let draw = draw_midpoints(&cfg, &mut rng);
        let z: Vec<Vec<f64>> = (0..4).map(|_| rng.gaussian_vec(2)).collect();
        let mut cd = CountedDrift::new(&c);
        let tr = kernel.refined_trace(&mut cd, &[0.1, 0.2], 0, &draw, &z, true).unwrap();
        let mut acc = DiagnosticsAccumulator::new(7.0);
        accumulate_theorem1_diagnostics(&kernel, &tr, &mut acc).unwrap();
        assert_eq!(acc.sum_b_sq, 0.0);
        assert_eq!(acc.beta_terms(), 0.0);
        assert_eq!(acc.samples_seen, 1);
        let err = bias_variance_decomposition_check(&kernel, &mut cd, &tr).unwrap();
        assert!(err <= 1e-15, "{err}");
    }
}
