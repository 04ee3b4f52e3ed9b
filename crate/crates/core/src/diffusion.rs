//! DDPM-family reverse samplers, the Poisson midpoint scheduler, and an
//! analytic score for Gaussian-mixture data.
//!
//! Time runs in the DDPM direction: a reverse step at index `t ∈ 1..=N`
//! maps `x_t` to `x_{t−1}` via
//!
//! ```text
//! x_{t−1} = a_t x_t + b_t d_t(x_t) + σ_t z,    d_t(x) = s_t · ∇log p_{τ_t}(x)
//! ```
//!
//! where `s_t` is a per-variant drift scale and `τ_t = −½ log ᾱ_t`, so that
//! the OU marginal at `τ_t` is the forward marginal `√ᾱ_t x_0 + √(1−ᾱ_t) ε`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::langevin::{draw_offsets, MidpointOption};
use crate::rng::RngStream;

/// `β_1, …, β_N` with the derived `α_t = 1 − β_t` and `ᾱ_t = Π_{s≤t} α_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    /// Linear in `√β`, as used by latent diffusion models.
    #[serde(rename = "scaled_linear")]
    ScaledLinear,
    Custom,
}

impl NoiseSchedule {
    /// `N` values interpolated linearly from `beta_start` to `beta_end`
    /// inclusive.
    pub fn linear(n: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = if n == 1 {
            vec![beta_start]
        } else {
            (0..n)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64)
                .collect()
        };
        Self::custom(betas)
    }

    /// `β_t = (√β_start + (√β_end − √β_start)(t−1)/(N−1))²`.
    pub fn scaled_linear(n: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let lin = Self::linear(n, beta_start.sqrt(), beta_end.sqrt())?;
        Self::custom(lin.betas.iter().map(|b| b * b).collect())
    }

    pub fn custom(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        let bad: Vec<String> = betas
            .iter()
            .enumerate()
            .filter(|(_, b)| !(**b > 0.0 && **b < 1.0))
            .map(|(i, b)| format!("beta_{} = {b} outside (0, 1)", i + 1))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Validation(bad));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `β_t` for `t ∈ 1..=N`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t` for `t ∈ 0..=N`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// OU time matching index `t`: `τ_t = −½ log ᾱ_t`.
    pub fn tau(&self, t: usize) -> f64 {
        -0.5 * self.alpha_bar(t).ln()
    }
}

/// Schedule constructor mirroring the configuration file fields.
pub fn make_schedule(
    kind: ScheduleKind,
    n: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Option<Vec<f64>>,
) -> Result<NoiseSchedule> {
    match kind {
        ScheduleKind::Linear => NoiseSchedule::linear(n, beta_start, beta_end),
        ScheduleKind::ScaledLinear => NoiseSchedule::scaled_linear(n, beta_start, beta_end),
        ScheduleKind::Custom => {
            let betas = betas.ok_or_else(|| Error::config("custom schedule needs a beta list"))?;
            if betas.len() != n {
                return Err(Error::config(format!(
                    "custom schedule has {} betas but N = {n}",
                    betas.len()
                )));
            }
            NoiseSchedule::custom(betas)
        }
    }
}

/// DDPM coefficient variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    V1,
    V1a,
    V1b,
    V1c,
    V1d,
    V2,
    V3,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::V1,
        Variant::V1a,
        Variant::V1b,
        Variant::V1c,
        Variant::V1d,
        Variant::V2,
        Variant::V3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V1a => "v1a",
            Variant::V1b => "v1b",
            Variant::V1c => "v1c",
            Variant::V1d => "v1d",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
        }
    }

    /// `i` in `σ² = β/(1 + iβ)` for the first variant family.
    fn v1_index(&self) -> Option<f64> {
        match self {
            Variant::V1 | Variant::V1a => Some(-1.0),
            Variant::V1b => Some(0.0),
            Variant::V1c => Some(1.0),
            Variant::V1d => Some(2.0),
            Variant::V2 | Variant::V3 => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// DDIM (η = 1) posterior variance for the step landing at `t`:
/// `(1 − ᾱ_t) β_{t+1} / (1 − ᾱ_{t+1})`.
pub fn ddim_sigma_sq(alpha_bar_t: f64, beta_next: f64, alpha_bar_next: f64) -> f64 {
    (1.0 - alpha_bar_t) * beta_next / (1.0 - alpha_bar_next)
}

/// Lower-variance alternative `(1 − ᾱ_t) β_{t+1}`.
pub fn reduced_sigma_sq(alpha_bar_t: f64, beta_next: f64) -> f64 {
    (1.0 - alpha_bar_t) * beta_next
}

/// Per-step `(a_t, b_t, σ_t)` and drift scale `s_t`, for `t ∈ 1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerCoefficients {
    pub variant: Variant,
    schedule: NoiseSchedule,
    a: Vec<f64>,
    b: Vec<f64>,
    sigma: Vec<f64>,
    drift_scale: Vec<f64>,
}

impl SchedulerCoefficients {
    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn a(&self, t: usize) -> f64 {
        self.a[t - 1]
    }

    pub fn b(&self, t: usize) -> f64 {
        self.b[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Factor applied to the score to obtain the drift that `b_t`
    /// multiplies.
    pub fn drift_scale(&self, t: usize) -> f64 {
        self.drift_scale[t - 1]
    }
}

/// Build the coefficient table.
///
/// The first family uses `a_t = 1/√α_t`,
/// `b_t = −2(1 − √α_t)/(√α_t (1 − ᾱ_t))` against the drift
/// `−(1 − ᾱ_t) ∇log p`, which is the DDPM mean up to `O(β²)`, with
/// `σ_t² = β_t/(1 + iβ_t)` (`V1` is the `i = −1` member).
///
/// `V2`/`V3` are DDIM with η = 1 written against the score itself:
/// `a_t = √(ᾱ_{t−1}/ᾱ_t)`,
/// `b_t = a_t (1 − ᾱ_t) − √(1 − ᾱ_{t−1} − σ_t²) √(1 − ᾱ_t)`, with the step
/// from `t` to `t − 1` using the variance of the landing index `t − 1`.
pub fn variant_coefficients(sched: &NoiseSchedule, variant: Variant) -> SchedulerCoefficients {
    let n = sched.len();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    for t in 1..=n {
        let beta = sched.beta(t);
        let alpha = sched.alpha(t);
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t - 1);
        match variant.v1_index() {
            Some(i) => {
                let sa = alpha.sqrt();
                a.push(1.0 / sa);
                b.push(-2.0 * (1.0 - sa) / (sa * (1.0 - ab)));
                sigma.push((beta / (1.0 + i * beta)).sqrt());
                scale.push(-(1.0 - ab));
            }
            None => {
                let s2 = match variant {
                    Variant::V2 => ddim_sigma_sq(ab_prev, beta, ab),
                    _ => reduced_sigma_sq(ab_prev, beta),
                };
                let at = (ab_prev / ab).sqrt();
                let dir = (1.0 - ab_prev - s2).max(0.0).sqrt();
                a.push(at);
                b.push(at * (1.0 - ab) - dir * (1.0 - ab).sqrt());
                sigma.push(s2.sqrt());
                scale.push(1.0);
            }
        }
    }
    SchedulerCoefficients {
        variant,
        schedule: sched.clone(),
        a,
        b,
        sigma,
        drift_scale: scale,
    }
}

/// Coefficients of `k` composed reverse steps starting at index `t`:
/// `x_{t−k} = A_k x_t + Σ_i B_{k,i} d_{t−i+1} + Σ_i C_{k,i} Z_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpConstants {
    pub a_k: f64,
    /// `B_{k,1..k}`.
    pub b: Vec<f64>,
    /// `C_{k,1..k}`.
    pub c: Vec<f64>,
}

impl InterpConstants {
    pub fn k(&self) -> usize {
        self.b.len()
    }

    pub fn b_at(&self, i: usize) -> f64 {
        self.b[i - 1]
    }

    pub fn c_at(&self, i: usize) -> f64 {
        self.c[i - 1]
    }

    pub fn sum_b(&self) -> f64 {
        self.b.iter().fold(0.0, |acc, v| acc + v)
    }
}

/// `A_k = a_t ⋯ a_{t−k+1}`; `B_{k,i} = (a_{t−k+1} ⋯ a_{t−i}) b_{t−i+1}`
/// and likewise `C_{k,i}` with `σ`. Computed in `O(k)` by a suffix
/// product.
pub fn interpolation_constants(coeffs: &SchedulerCoefficients, t: usize, k: usize) -> Result<InterpConstants> {
    if k == 0 {
        return Err(Error::config("interpolation width must be at least 1"));
    }
    if t > coeffs.n() || k > t {
        return Err(Error::config(format!(
            "width {k} from index {t} leaves the schedule (N = {})",
            coeffs.n()
        )));
    }
    let mut b = vec![0.0; k];
    let mut c = vec![0.0; k];
    let mut suffix = 1.0;
    for i in (1..=k).rev() {
        let idx = t - i + 1;
        b[i - 1] = suffix * coeffs.b(idx);
        c[i - 1] = suffix * coeffs.sigma(idx);
        suffix *= coeffs.a(idx);
    }
    Ok(InterpConstants { a_k: suffix, b, c })
}

/// One Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major covariance; a single number means `v·I`.
    pub cov: Vec<f64>,
}

impl MixtureComponent {
    pub fn isotropic(weight: f64, mean: Vec<f64>, var: f64) -> Self {
        Self {
            weight,
            mean,
            cov: vec![var],
        }
    }

    fn cov_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.mean.len();
        if self.cov.len() == 1 {
            Ok(DMatrix::identity(d, d) * self.cov[0])
        } else if self.cov.len() == d * d {
            Ok(DMatrix::from_row_slice(d, d, &self.cov))
        } else {
            Err(Error::config(format!(
                "component covariance has {} entries, expected 1 or {}",
                self.cov.len(),
                d * d
            )))
        }
    }
}

/// A Gaussian mixture data distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
    covs: Vec<DMatrix<f64>>,
    d: usize,
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::config("mixture needs at least one component"));
        };
        let d = first.mean.len();
        if d == 0 {
            return Err(Error::config("mixture dimension must be positive"));
        }
        let mut problems = Vec::new();
        let mut covs = Vec::new();
        for (j, c) in components.iter().enumerate() {
            if c.mean.len() != d {
                problems.push(format!("component {j}: mean has length {}, expected {d}", c.mean.len()));
                continue;
            }
            if !(c.weight > 0.0) {
                problems.push(format!("component {j}: weight {} must be positive", c.weight));
            }
            match c.cov_matrix() {
                Ok(m) => {
                    let asym = (&m - m.transpose()).amax();
                    let min = m.clone().symmetric_eigen().eigenvalues.min();
                    if asym > 1e-12 * m.amax().max(1.0) || min < -1e-10 {
                        problems.push(format!("component {j}: covariance is not symmetric PSD"));
                    }
                    covs.push(m);
                }
                Err(e) => problems.push(format!("component {j}: {e}")),
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            problems.push(format!("weights sum to {total}, expected 1"));
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self { components, covs, d })
    }

    /// `N(mean, var·I)`.
    pub fn single(mean: Vec<f64>, var: f64) -> Result<Self> {
        Self::new(vec![MixtureComponent::isotropic(1.0, mean, var)])
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Law after running the OU process for time `τ`, given as
    /// `signal = e^{−2τ}` and `noise = 1 − e^{−2τ}`.
    pub fn diffuse(&self, signal: f64, noise: f64) -> Result<DiffusedMixture> {
        let s = signal.sqrt();
        let d = self.d;
        let mut comps = Vec::with_capacity(self.components.len());
        for (c, cov) in self.components.iter().zip(&self.covs) {
            let cov_t = cov * signal + DMatrix::identity(d, d) * noise;
            let chol = cov_t.cholesky().ok_or_else(|| {
                Error::DegenerateCovariance("diffused component covariance is singular".into())
            })?;
            let half_logdet = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let precision = chol.inverse();
            comps.push(PreparedComponent {
                log_norm: c.weight.ln() - half_logdet,
                mean: c.mean.iter().map(|m| s * m).collect(),
                precision: precision.transpose().as_slice().to_vec(),
            });
        }
        Ok(DiffusedMixture { d, comps })
    }

    pub fn diffuse_to(&self, tau: f64) -> Result<DiffusedMixture> {
        if !(tau >= 0.0) {
            return Err(Error::config(format!("diffusion time must be nonnegative, got {tau}")));
        }
        self.diffuse((-2.0 * tau).exp(), -(-2.0 * tau).exp_m1())
    }

    /// Draw `n` samples, row-major.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Vec<f64> {
        let d = self.d;
        let factors: Vec<DMatrix<f64>> = self
            .covs
            .iter()
            .map(|c| crate::metrics::sym_sqrt(c, 1e-10).expect("validated PSD"))
            .collect();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut j = self.components.len() - 1;
            for (i, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    j = i;
                    break;
                }
            }
            let z = DVector::from_vec(rng.gaussian_vec(d));
            let x = &factors[j] * z;
            out.extend(x.iter().zip(&self.components[j].mean).map(|(v, m)| v + m));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PreparedComponent {
    log_norm: f64,
    mean: Vec<f64>,
    /// Row-major inverse covariance.
    precision: Vec<f64>,
}

/// A mixture at a fixed diffusion time, ready for score evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusedMixture {
    d: usize,
    comps: Vec<PreparedComponent>,
}

impl DiffusedMixture {
    pub fn dim(&self) -> usize {
        self.d
    }

    /// `Σ_j r_j(x) · (−P_j (x − m_j))` with log-sum-exp responsibilities.
    /// If every log-weight is non-finite the score of the component with
    /// the largest normalizer is returned.
    pub fn score(&self, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        let mut diff = [0.0f64; 8];
        let mut heap;
        let diff: &mut [f64] = if d <= 8 {
            &mut diff[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        if self.comps.len() == 1 {
            component_score(&self.comps[0], x, diff, out);
            return;
        }
        let logs: Vec<f64> = self
            .comps
            .iter()
            .map(|c| {
                for ((dv, xv), mv) in diff.iter_mut().zip(x).zip(&c.mean) {
                    *dv = xv - mv;
                }
                let mut q = 0.0;
                for i in 0..d {
                    let row = &c.precision[i * d..(i + 1) * d];
                    q += diff[i] * row.iter().zip(diff.iter()).map(|(p, v)| p * v).sum::<f64>();
                }
                c.log_norm - 0.5 * q
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            let j = (0..self.comps.len())
                .max_by(|&a, &b| self.comps[a].log_norm.total_cmp(&self.comps[b].log_norm))
                .unwrap_or(0);
            component_score(&self.comps[j], x, diff, out);
            return;
        }
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        out.fill(0.0);
        let mut tmp = vec![0.0; d];
        for (c, wj) in self.comps.iter().zip(&w) {
            component_score(c, x, diff, &mut tmp);
            let r = wj / total;
            for (o, v) in out.iter_mut().zip(&tmp) {
                *o += r * v;
            }
        }
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        let logs: Vec<f64> = self
            .comps
            .iter()
            .map(|c| {
                let diff: Vec<f64> = x.iter().zip(&c.mean).map(|(a, b)| a - b).collect();
                let mut q = 0.0;
                for i in 0..d {
                    q += diff[i] * (0..d).map(|j| c.precision[i * d + j] * diff[j]).sum::<f64>();
                }
                c.log_norm - 0.5 * q
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }
}

fn component_score(c: &PreparedComponent, x: &[f64], diff: &mut [f64], out: &mut [f64]) {
    let d = diff.len();
    for ((dv, xv), mv) in diff.iter_mut().zip(x).zip(&c.mean) {
        *dv = xv - mv;
    }
    for i in 0..d {
        let row = &c.precision[i * d..(i + 1) * d];
        out[i] = -row.iter().zip(diff.iter()).map(|(p, v)| p * v).sum::<f64>();
    }
}

/// Exact score of the OU-diffused mixture at continuous time `τ`.
pub fn gaussian_mixture_score(mixture: &GaussianMixture, x: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_dim(mixture.dim(), x.len())?;
    let dm = mixture.diffuse_to(tau)?;
    let mut out = vec![0.0; x.len()];
    dm.score(x, &mut out);
    Ok(out)
}

/// Analytic score at the discrete indices of a schedule.
#[derive(Debug, Clone)]
pub struct ScoreOracle {
    mixture: GaussianMixture,
    per_index: Vec<DiffusedMixture>,
}

impl ScoreOracle {
    pub fn new(mixture: GaussianMixture, sched: &NoiseSchedule) -> Result<Self> {
        let per_index = (1..=sched.len())
            .map(|t| {
                let ab = sched.alpha_bar(t);
                mixture.diffuse(ab, 1.0 - ab)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mixture, per_index })
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn n(&self) -> usize {
        self.per_index.len()
    }

    pub fn at_index(&self, t: usize) -> &DiffusedMixture {
        &self.per_index[t - 1]
    }
}

/// Per-chain view of a [`ScoreOracle`] that counts evaluations.
pub struct CountedScore<'a> {
    oracle: &'a ScoreOracle,
    calls: u64,
}

impl<'a> CountedScore<'a> {
    pub fn new(oracle: &'a ScoreOracle) -> Self {
        Self { oracle, calls: 0 }
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn oracle(&self) -> &'a ScoreOracle {
        self.oracle
    }

    /// `∇log p_{τ_t}(x)`.
    pub fn eval(&mut self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        check_dim(self.oracle.dim(), x.len())?;
        if t == 0 || t > self.oracle.n() {
            return Err(Error::config(format!("score index {t} outside 1..={}", self.oracle.n())));
        }
        self.calls += 1;
        let mut out = vec![0.0; x.len()];
        self.oracle.at_index(t).score(x, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::divergence(t as u64, "non-finite score"));
        }
        Ok(out)
    }

    /// Drift `s_t ∇log p_{τ_t}(x)` for the given coefficient table.
    pub fn drift(&mut self, coeffs: &SchedulerCoefficients, x: &[f64], t: usize) -> Result<Vec<f64>> {
        let mut v = self.eval(x, t)?;
        let s = coeffs.drift_scale(t);
        for e in v.iter_mut() {
            *e *= s;
        }
        Ok(v)
    }
}

/// Steps taken and score calls spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CallLedger {
    pub steps_taken: u64,
    pub score_calls: u64,
}

impl CallLedger {
    pub fn merge(&mut self, other: &CallLedger) {
        self.steps_taken += other.steps_taken;
        self.score_calls += other.score_calls;
    }
}

/// One reverse step `x_t → x_{t−1}`.
pub fn ddpm_step(
    coeffs: &SchedulerCoefficients,
    score: &mut CountedScore<'_>,
    x: &[f64],
    t: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let z = rng.gaussian_vec(x.len());
    ddpm_step_with_noise(coeffs, score, x, t, &z)
}

pub fn ddpm_step_with_noise(
    coeffs: &SchedulerCoefficients,
    score: &mut CountedScore<'_>,
    x: &[f64],
    t: usize,
    z: &[f64],
) -> Result<Vec<f64>> {
    if t == 0 || t > coeffs.n() {
        return Err(Error::config(format!("reverse index {t} outside 1..={}", coeffs.n())));
    }
    check_dim(x.len(), z.len())?;
    let d = score.drift(coeffs, x, t)?;
    let (a, b, s) = (coeffs.a(t), coeffs.b(t), coeffs.sigma(t));
    let out: Vec<f64> = x
        .iter()
        .zip(&d)
        .zip(z)
        .map(|((xv, dv), zv)| a * xv + b * dv + s * zv)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::divergence(t as u64, "state became non-finite"));
    }
    Ok(out)
}

/// One Poisson midpoint step of width `k` from index `t` to `t − k`.
/// Consumes the midpoint indicators first, then `Z_1, …, Z_k`.
pub fn poisson_midpoint_scheduler_step(
    coeffs: &SchedulerCoefficients,
    score: &mut CountedScore<'_>,
    x: &[f64],
    t: usize,
    k: usize,
    option: MidpointOption,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, CallLedger)> {
    if k == 0 {
        return Err(Error::config("refinement K must be at least 1"));
    }
    let offsets = draw_offsets(k, option, 1, rng);
    let z: Vec<Vec<f64>> = (0..k).map(|_| rng.gaussian_vec(x.len())).collect();
    poisson_midpoint_scheduler_step_with(coeffs, score, x, t, k, option, &offsets, &z)
}

/// [`poisson_midpoint_scheduler_step`] with the midpoint offsets (sorted,
/// within `1..k`) and the Gaussians `Z_1..Z_k` supplied.
///
/// The estimate at offset `τ` runs `τ` reverse steps with the drift frozen
/// at `x` and the same `Z_1..Z_τ` as the full update; its drift replaces
/// the frozen one in the `(τ+1)`-th composed step with weight `p`
/// (`K` under Option1, `K − 1` under Option2).
#[allow(clippy::too_many_arguments)]
pub fn poisson_midpoint_scheduler_step_with(
    coeffs: &SchedulerCoefficients,
    score: &mut CountedScore<'_>,
    x: &[f64],
    t: usize,
    k: usize,
    option: MidpointOption,
    offsets: &[usize],
    z: &[Vec<f64>],
) -> Result<(Vec<f64>, CallLedger)> {
    if k == 0 || k > t || t > coeffs.n() {
        return Err(Error::config(format!(
            "width {k} from index {t} leaves the schedule (N = {})",
            coeffs.n()
        )));
    }
    if z.len() != k {
        return Err(Error::config(format!("need {k} noise vectors, got {}", z.len())));
    }
    if offsets.iter().any(|&o| o == 0 || o >= k) || offsets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("midpoint offsets must be sorted, distinct and in 1..K"));
    }
    let dim = x.len();
    let calls0 = score.calls();
    let full = interpolation_constants(coeffs, t, k)?;
    let d0 = score.drift(coeffs, x, t)?;
    let sum_b = full.sum_b();
    let mut noise = vec![0.0; dim];
    for (i, zi) in z.iter().enumerate() {
        check_dim(dim, zi.len())?;
        let c = full.c_at(i + 1);
        for (n, zv) in noise.iter_mut().zip(zi) {
            *n += c * zv;
        }
    }
    let mut out: Vec<f64> = x
        .iter()
        .zip(&d0)
        .zip(&noise)
        .map(|((xv, dv), nv)| full.a_k * xv + sum_b * dv + nv)
        .collect();

    let p = match option {
        MidpointOption::Option1 => k as f64,
        MidpointOption::Option2 => (k - 1) as f64,
    };
    for &tau in offsets {
        let part = interpolation_constants(coeffs, t, tau)?;
        let pb = part.sum_b();
        let mut x_hat: Vec<f64> = x.iter().zip(&d0).map(|(xv, dv)| part.a_k * xv + pb * dv).collect();
        for (j, zj) in z.iter().take(tau).enumerate() {
            let c = part.c_at(j + 1);
            for (h, zv) in x_hat.iter_mut().zip(zj) {
                *h += c * zv;
            }
        }
        let d_hat = score.drift(coeffs, &x_hat, t - tau)?;
        let w = p * full.b_at(tau + 1);
        for ((o, dh), dv) in out.iter_mut().zip(&d_hat).zip(&d0) {
            *o += w * (dh - dv);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::divergence((t - tau) as u64, format!("non-finite correction at offset {tau}")));
        }
    }
    Ok((
        out,
        CallLedger {
            steps_taken: 1,
            score_calls: score.calls() - calls0,
        },
    ))
}

/// Expected score calls per step of width `k`.
fn expected_calls_per_step(k: usize, option: MidpointOption) -> f64 {
    if k <= 1 {
        return 1.0;
    }
    match option {
        MidpointOption::Option1 => 2.0 - 1.0 / k as f64,
        MidpointOption::Option2 => 2.0,
    }
}

/// Expected score calls for a full reverse run of `n` indices with width
/// `k`. When `k` does not divide `n` the last step has width `n mod k`.
pub fn expected_score_calls(n: usize, k: usize, option: MidpointOption) -> f64 {
    if k == 0 {
        return f64::NAN;
    }
    let full = (n / k) as f64 * expected_calls_per_step(k, option);
    let r = n % k;
    if r == 0 {
        full
    } else {
        full + expected_calls_per_step(r, option)
    }
}

/// Widths of the coarse steps covering `n` indices.
pub fn coarse_widths(n: usize, k: usize) -> Vec<usize> {
    let mut w = vec![k; n / k];
    if !n.is_multiple_of(k) {
        w.push(n % k);
    }
    w
}

/// Full reverse run from `x_N` down to `x_0`. Width 1 uses [`ddpm_step`].
pub fn run_reverse(
    coeffs: &SchedulerCoefficients,
    score: &mut CountedScore<'_>,
    x_n: &[f64],
    k: usize,
    option: MidpointOption,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, CallLedger)> {
    if k == 0 {
        return Err(Error::config("refinement K must be at least 1"));
    }
    let mut x = x_n.to_vec();
    let mut t = coeffs.n();
    let mut ledger = CallLedger::default();
    for w in coarse_widths(coeffs.n(), k) {
        if w == 1 {
            let c0 = score.calls();
            x = ddpm_step(coeffs, score, &x, t, rng)?;
            ledger.merge(&CallLedger {
                steps_taken: 1,
                score_calls: score.calls() - c0,
            });
        } else {
            let (nx, l) = poisson_midpoint_scheduler_step(coeffs, score, &x, t, w, option, rng)?;
            x = nx;
            ledger.merge(&l);
        }
        t -= w;
    }
    Ok((x, ledger))
}

/// Euler–Maruyama step of the reverse SDE `dX = (X + 2∇log p_τ(X)) dτ + √2 dB`,
/// moving from OU time `τ` to `τ − Δτ`.
pub fn reverse_sde_step(
    mixture: &GaussianMixture,
    x: &[f64],
    tau: f64,
    dtau: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let z = rng.gaussian_vec(x.len());
    reverse_step(mixture, x, tau, dtau, Some(&z))
}

/// Euler step of the probability-flow ODE `dX = (X + ∇log p_τ(X)) dτ`.
pub fn reverse_ode_step(mixture: &GaussianMixture, x: &[f64], tau: f64, dtau: f64) -> Result<Vec<f64>> {
    reverse_step(mixture, x, tau, dtau, None)
}

fn reverse_step(
    mixture: &GaussianMixture,
    x: &[f64],
    tau: f64,
    dtau: f64,
    z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if !(dtau > 0.0) {
        return Err(Error::config(format!("time step must be positive, got {dtau}")));
    }
    let s = gaussian_mixture_score(mixture, x, tau)?;
    reverse_step_with_score(x, &s, dtau, z)
}

/// Shared update used by both reverse integrators, given the score.
pub fn reverse_step_with_score(x: &[f64], score: &[f64], dtau: f64, z: Option<&[f64]>) -> Result<Vec<f64>> {
    let out: Vec<f64> = match z {
        Some(z) => {
            let sd = (2.0 * dtau).sqrt();
            x.iter()
                .zip(score)
                .zip(z)
                .map(|((xv, sv), zv)| xv + dtau * (xv + 2.0 * sv) + sd * zv)
                .collect()
        }
        None => x
            .iter()
            .zip(score)
            .map(|(xv, sv)| xv + dtau * (xv + sv))
            .collect(),
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::divergence(0, "reverse step became non-finite"));
    }
    Ok(out)
}

/// Per-coordinate mean and variance of the DDPM chain when the data are
/// `N(μ₀, s₀²)` in each coordinate, so that the score is affine and every
/// marginal Gaussian. Entry `j` is the law of `x_{N−j}`.
pub fn exact_gaussian_moments(
    coeffs: &SchedulerCoefficients,
    data_mean: f64,
    data_var: f64,
    start_mean: f64,
    start_var: f64,
) -> Vec<(f64, f64)> {
    let sched = coeffs.schedule();
    let mut m = start_mean;
    let mut v = start_var;
    let mut out = vec![(m, v)];
    for t in (1..=coeffs.n()).rev() {
        let ab = sched.alpha_bar(t);
        let var_t = ab * data_var + 1.0 - ab;
        let mu_t = ab.sqrt() * data_mean;
        // drift = s_t · (−(x − μ_t)/var_t)
        let g = coeffs.b(t) * coeffs.drift_scale(t) / var_t;
        let c = coeffs.a(t) - g;
        let e = g * mu_t;
        m = c * m + e;
        v = c * c * v + coeffs.sigma(t).powi(2);
        out.push((m, v));
    }
    out
}

/// Exact mean and covariance of `x_{t−k}` given `x_t = x` when the drift is
/// the constant `c`, for `k` composed reverse steps.
pub fn constant_drift_composed_law(
    coeffs: &SchedulerCoefficients,
    x: f64,
    c: f64,
    t: usize,
    k: usize,
) -> Result<(f64, f64)> {
    if k > t {
        return Err(Error::config("width exceeds remaining steps"));
    }
    let (mut m, mut v) = (x, 0.0);
    for idx in ((t - k + 1)..=t).rev() {
        m = coeffs.a(idx) * m + coeffs.b(idx) * c;
        v = coeffs.a(idx).powi(2) * v + coeffs.sigma(idx).powi(2);
    }
    Ok((m, v))
}

/// Schedule section of a diffusion configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default)]
    pub betas: Option<Vec<f64>>,
}

fn default_n() -> usize {
    1000
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    0.02
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            n: default_n(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            betas: None,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.n, self.beta_start, self.beta_end, self.betas.clone())
    }
}

/// A complete diffusion sampler description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub variant: Variant,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_option")]
    pub option: MidpointOption,
    pub mixture: Vec<MixtureComponent>,
}

fn default_k() -> usize {
    1
}

fn default_option() -> MidpointOption {
    MidpointOption::Option2
}

/// Everything needed to sample, built from a [`DiffusionConfig`].
#[derive(Debug, Clone)]
pub struct DiffusionSetup {
    pub coeffs: SchedulerCoefficients,
    pub oracle: ScoreOracle,
    pub k: usize,
    pub option: MidpointOption,
}

impl DiffusionConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&s)
    }

    pub fn build(&self) -> Result<DiffusionSetup> {
        let sched = self.schedule.build()?;
        if self.k == 0 || self.k > sched.len() {
            return Err(Error::config(format!("K = {} must lie in 1..={}", self.k, sched.len())));
        }
        let mixture = GaussianMixture::new(self.mixture.clone())?;
        Ok(DiffusionSetup {
            coeffs: variant_coefficients(&sched, self.variant),
            oracle: ScoreOracle::new(mixture, &sched)?,
            k: self.k,
            option: self.option,
        })
    }
}

/// One row of a moment trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub step: usize,
    pub time: f64,
    pub mean: f64,
    pub var: f64,
    pub n: u64,
}

/// Write `step,time,mean,var,n` rows as CSV.
pub fn write_moment_csv<W: std::io::Write>(out: W, rows: &[MomentRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io {
            path: "<moment table>".into(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<moment table>".into(),
        message: e.to_string(),
    })
}
