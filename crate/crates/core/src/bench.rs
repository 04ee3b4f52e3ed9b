//! Named scenarios that reproduce the structural and statistical checks,
//! with every pass/fail rule drawn from one threshold table.
//!
//! Ensembles run one chain per rayon task with its own `(seed, stream)`
//! RNG, and results are reduced in chain order, so reports do not depend
//! on the number of worker threads.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::diffusion::{
    constant_drift_composed_law, ddpm_step_with_noise, exact_gaussian_moments, expected_score_calls,
    interpolation_constants, poisson_midpoint_scheduler_step, poisson_midpoint_scheduler_step_with,
    run_reverse, variant_coefficients, CountedScore, GaussianMixture, MixtureComponent, ScheduleConfig,
    ScheduleKind, SchedulerCoefficients, ScoreOracle, Variant,
};
use crate::dynamics::{
    check_scaling_relations, fine_step_with_noise, propagate_constant_drift, step_with_matrices, ChainState,
    ConstantDrift, CountedDrift, DriftField, GaussianLaw, TransitionFamily,
};
use crate::error::{Error, Result};
use crate::langevin::{
    accumulate_theorem1_diagnostics, bias_variance_decomposition_check, draw_midpoints, BridgeNoise,
    DiagnosticsAccumulator, FnPotential, IsotropicQuadratic, MidpointDraw, MidpointOption, OverdampedDrift,
    OverdampedFamily, PlmcKernel, PoissonMidpointConfig, Potential, UnderdampedDrift, UnderdampedFamily,
};
use crate::metrics::{empirical_moments, two_sample_energy_test, EmpiricalEnsemble};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ScalingCheck,
    K1Degeneration,
    ConstantDriftEquiv,
    PropositionEnergyTest,
    OlmcSpeedupSweep,
    UlmcSpeedupSweep,
    Theorem1Diagnostics,
    DdpmGaussianE2e,
    PlmcSchedulerE2e,
    CallAccounting,
    VariantVarianceOrder,
}

impl Scenario {
    pub const ALL: [Scenario; 11] = [
        Scenario::ScalingCheck,
        Scenario::K1Degeneration,
        Scenario::ConstantDriftEquiv,
        Scenario::PropositionEnergyTest,
        Scenario::OlmcSpeedupSweep,
        Scenario::UlmcSpeedupSweep,
        Scenario::Theorem1Diagnostics,
        Scenario::DdpmGaussianE2e,
        Scenario::PlmcSchedulerE2e,
        Scenario::CallAccounting,
        Scenario::VariantVarianceOrder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::ScalingCheck => "scaling_check",
            Scenario::K1Degeneration => "k1_degeneration",
            Scenario::ConstantDriftEquiv => "constant_drift_equiv",
            Scenario::PropositionEnergyTest => "proposition_energy_test",
            Scenario::OlmcSpeedupSweep => "olmc_speedup_sweep",
            Scenario::UlmcSpeedupSweep => "ulmc_speedup_sweep",
            Scenario::Theorem1Diagnostics => "theorem1_diagnostics",
            Scenario::DdpmGaussianE2e => "ddpm_gaussian_e2e",
            Scenario::PlmcSchedulerE2e => "plmc_scheduler_e2e",
            Scenario::CallAccounting => "call_accounting",
            Scenario::VariantVarianceOrder => "variant_variance_order",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            Scenario::ScalingCheck => "composition identities of the transition matrices",
            Scenario::K1Degeneration => "K=1 midpoint steps reproduce the plain steps bit for bit",
            Scenario::ConstantDriftEquiv => "one coarse step and K fine steps have the same law under constant drift",
            Scenario::PropositionEnergyTest => "Steps 1-5 vs the refined recursion, energy two-sample test",
            Scenario::OlmcSpeedupSweep => "stationary variance bias, overdamped, PLMC vs LMC",
            Scenario::UlmcSpeedupSweep => "stationary variance bias, underdamped, PLMC vs LMC",
            Scenario::Theorem1Diagnostics => "bias/variance diagnostics and their noise-replay identity",
            Scenario::DdpmGaussianE2e => "DDPM reverse runs against analytic Gaussian and mixture data",
            Scenario::PlmcSchedulerE2e => "midpoint scheduler against the exact full-resolution moments",
            Scenario::CallAccounting => "score calls per run against the predicted counts",
            Scenario::VariantVarianceOrder => "ordering of the variant noise levels",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .iter()
            .find(|x| x.name() == s)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown scenario {s:?}")))
    }
}

/// A pass/fail rule applied to a report row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    /// `value ≤ bound`
    AtMost(f64),
    /// `value ≥ bound`
    AtLeast(f64),
    /// `|value − reference| ≤ tol`
    WithinAbs(f64),
    /// `|value − reference| ≤ k · stderr`
    WithinStdErrs(f64),
    /// `value ≤ r · reference`
    AtMostTimesReference(f64),
}

impl Rule {
    pub fn check(&self, value: f64, reference: f64, stderr: f64) -> bool {
        match *self {
            Rule::AtMost(b) => value <= b,
            Rule::AtLeast(b) => value >= b,
            Rule::WithinAbs(tol) => (value - reference).abs() <= tol,
            Rule::WithinStdErrs(k) => (value - reference).abs() <= k * stderr,
            Rule::AtMostTimesReference(r) => value <= r * reference,
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::AtMost(b) => write!(f, "value<={b:e}"),
            Rule::AtLeast(b) => write!(f, "value>={b}"),
            Rule::WithinAbs(t) => write!(f, "|value-reference|<={t}"),
            Rule::WithinStdErrs(k) => write!(f, "|value-reference|<={k}*stderr"),
            Rule::AtMostTimesReference(r) => write!(f, "value<={r}*reference"),
        }
    }
}

/// Every threshold used by the harness.
pub const THRESHOLDS: &[(Scenario, &str, Rule)] = &[
    (Scenario::ScalingCheck, "identity_residual", Rule::AtMost(1e-9)),
    (Scenario::K1Degeneration, "max_abs_deviation", Rule::AtMost(0.0)),
    (Scenario::K1Degeneration, "mismatched_values", Rule::AtMost(0.0)),
    (Scenario::ConstantDriftEquiv, "law_max_abs_diff", Rule::AtMost(1e-10)),
    (Scenario::PropositionEnergyTest, "p_value", Rule::AtLeast(0.01)),
    (Scenario::PropositionEnergyTest, "null_rejection_rate", Rule::WithinStdErrs(3.0)),
    (Scenario::OlmcSpeedupSweep, "bias_vs_lmc", Rule::AtMostTimesReference(1.0)),
    (Scenario::OlmcSpeedupSweep, "bias_vs_lmc_fine", Rule::AtMostTimesReference(3.0)),
    (Scenario::OlmcSpeedupSweep, "bias_monotone_in_alpha", Rule::AtLeast(1.0)),
    (Scenario::UlmcSpeedupSweep, "bias_vs_lmc", Rule::AtMostTimesReference(1.0)),
    (Scenario::UlmcSpeedupSweep, "bias_vs_lmc_fine", Rule::AtMostTimesReference(3.0)),
    (Scenario::Theorem1Diagnostics, "replay_max_abs_error", Rule::AtMost(1e-9)),
    (Scenario::Theorem1Diagnostics, "accumulators_valid", Rule::AtLeast(1.0)),
    (Scenario::DdpmGaussianE2e, "terminal_abs_mean", Rule::AtMost(0.02)),
    (Scenario::DdpmGaussianE2e, "terminal_var", Rule::WithinAbs(0.05)),
    (Scenario::DdpmGaussianE2e, "exact_recursion_moment", Rule::WithinStdErrs(3.0)),
    (Scenario::DdpmGaussianE2e, "component_mass", Rule::WithinAbs(0.01)),
    (Scenario::DdpmGaussianE2e, "component_moment", Rule::WithinStdErrs(3.0)),
    (Scenario::PlmcSchedulerE2e, "exact_recursion_moment", Rule::WithinStdErrs(3.0)),
    (Scenario::CallAccounting, "predicted_vs_paper", Rule::WithinAbs(0.0)),
    (Scenario::CallAccounting, "empirical_calls", Rule::WithinStdErrs(3.0)),
    (Scenario::VariantVarianceOrder, "ordering_violations", Rule::AtMost(0.0)),
];

/// Look up a rule in [`THRESHOLDS`].
pub fn threshold(scenario: Scenario, check: &str) -> Rule {
    THRESHOLDS
        .iter()
        .find(|(s, c, _)| *s == scenario && *c == check)
        .map(|(_, _, r)| *r)
        .unwrap_or_else(|| panic!("no threshold for {scenario}/{check}"))
}

/// Target distribution parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    /// Dimension of the Langevin position.
    pub dim: usize,
    /// Damping values for underdamped runs.
    pub gammas: Vec<f64>,
    /// Initial position where a scenario starts from a point.
    pub x0: f64,
    /// Data distribution for diffusion scenarios.
    pub mixture: Vec<MixtureComponent>,
    pub schedule: ScheduleConfig,
    /// Further schedules checked by `variant_variance_order`.
    pub extra_schedules: Vec<ScheduleConfig>,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            dim: 1,
            gammas: vec![2.0],
            x0: 0.0,
            mixture: vec![
                MixtureComponent::isotropic(0.5, vec![3.0], 1.0),
                MixtureComponent::isotropic(0.5, vec![-3.0], 1.0),
            ],
            schedule: ScheduleConfig::default(),
            extra_schedules: Vec::new(),
        }
    }
}

/// Sampler parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    /// Coarse step sizes.
    pub alphas: Vec<f64>,
    /// Refinement factors. Empty in the speedup sweeps means `⌈1/α⌉`.
    pub ks: Vec<usize>,
    pub options: Vec<MidpointOption>,
    pub variant: Variant,
    /// Coarse steps discarded before recording.
    pub burn_in: usize,
    pub permutations: usize,
    pub level: f64,
    pub calibration_trials: usize,
    pub calibration_size: usize,
    /// Exponent `r` of the last diagnostic moment term.
    pub moment_r: f64,
    /// Coarse steps replayed by the noise-decomposition check.
    pub replay_steps: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            alphas: vec![0.1],
            ks: vec![4],
            options: vec![MidpointOption::Option1, MidpointOption::Option2],
            variant: Variant::V2,
            burn_in: 0,
            permutations: 999,
            level: 0.01,
            calibration_trials: 0,
            calibration_size: 500,
            moment_r: 7.0,
            replay_steps: 100,
        }
    }
}

/// One experiment, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub chains: usize,
    pub steps: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub target: TargetSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
}

impl ExperimentConfig {
    /// The configuration that reproduces the acceptance check for
    /// `scenario`.
    pub fn default_for(scenario: Scenario) -> Self {
        let mut c = ExperimentConfig {
            scenario,
            seed: 20240601,
            chains: 1,
            steps: 1,
            output: None,
            target: TargetSpec::default(),
            sampler: SamplerSpec::default(),
        };
        let (t, s) = (&mut c.target, &mut c.sampler);
        match scenario {
            Scenario::ScalingCheck => {
                t.dim = 2;
                t.gammas = vec![0.5, 2.0, 8.0];
                s.alphas = vec![1e-3, 1e-2, 1e-1];
                s.ks = vec![2, 4, 16, 64];
            }
            Scenario::K1Degeneration => {
                c.chains = 16;
                c.steps = 200;
                t.dim = 2;
                t.gammas = vec![2.0];
                s.alphas = vec![0.1];
                s.ks = vec![1];
                t.schedule.n = 200;
            }
            Scenario::ConstantDriftEquiv => {
                c.chains = 20;
                t.dim = 2;
                t.gammas = vec![0.5, 2.0, 8.0];
                s.alphas = vec![0.05, 0.2];
                s.ks = vec![2, 8, 32];
            }
            Scenario::PropositionEnergyTest => {
                c.chains = 100_000;
                c.steps = 3;
                t.x0 = 1.5;
                s.alphas = vec![0.2];
                s.ks = vec![8];
                s.calibration_trials = 1000;
                s.calibration_size = 500;
            }
            Scenario::OlmcSpeedupSweep | Scenario::UlmcSpeedupSweep => {
                c.chains = 1000;
                c.steps = 10_000;
                s.alphas = vec![0.4, 0.2, 0.1];
                s.ks = Vec::new();
                s.burn_in = 200;
            }
            Scenario::Theorem1Diagnostics => {
                c.chains = 50;
                c.steps = 20;
                t.dim = 2;
                s.alphas = vec![0.1];
                s.ks = vec![4, 16];
                s.replay_steps = 100;
            }
            Scenario::DdpmGaussianE2e => {
                c.chains = 100_000;
            }
            Scenario::PlmcSchedulerE2e => {
                c.chains = 100_000;
                s.ks = vec![10, 20];
                s.options = vec![MidpointOption::Option2];
            }
            Scenario::CallAccounting => {
                c.chains = 10_000;
                c.steps = 100_000;
                s.ks = vec![2, 50];
                s.options = vec![MidpointOption::Option1, MidpointOption::Option2];
            }
            Scenario::VariantVarianceOrder => {
                t.extra_schedules = vec![
                    ScheduleConfig {
                        kind: ScheduleKind::ScaledLinear,
                        n: 1000,
                        beta_start: 0.00085,
                        beta_end: 0.012,
                        betas: None,
                    },
                    ScheduleConfig {
                        kind: ScheduleKind::Linear,
                        n: 50,
                        beta_start: 1e-3,
                        beta_end: 0.3,
                        betas: None,
                    },
                ];
            }
        }
        c
    }

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

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Check every field, collecting all problems.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let (t, s) = (&self.target, &self.sampler);
        let sc = self.scenario;
        if self.chains == 0 {
            p.push("chains must be at least 1".to_string());
        }
        if self.steps == 0 {
            p.push("steps must be at least 1".to_string());
        }
        if t.dim == 0 {
            p.push("target.dim must be at least 1".to_string());
        }
        if !t.x0.is_finite() {
            p.push("target.x0 must be finite".to_string());
        }
        for (i, g) in t.gammas.iter().enumerate() {
            if !(*g > 0.0 && g.is_finite()) {
                p.push(format!("target.gammas[{i}] = {g} must be positive"));
            }
        }
        for (i, a) in s.alphas.iter().enumerate() {
            if !(*a > 0.0 && a.is_finite()) {
                p.push(format!("sampler.alphas[{i}] = {a} must be positive"));
            }
        }
        for (i, k) in s.ks.iter().enumerate() {
            if *k == 0 {
                p.push(format!("sampler.ks[{i}] must be at least 1"));
            }
        }
        if !(s.level > 0.0 && s.level < 1.0) {
            p.push(format!("sampler.level = {} must lie in (0, 1)", s.level));
        }
        if !(s.moment_r > 1.0) {
            p.push(format!("sampler.moment_r = {} must exceed 1", s.moment_r));
        }
        if let Err(e) = t.schedule.build() {
            p.push(format!("target.schedule: {e}"));
        }
        for (i, sch) in t.extra_schedules.iter().enumerate() {
            if let Err(e) = sch.build() {
                p.push(format!("target.extra_schedules[{i}]: {e}"));
            }
        }
        let needs_mixture = matches!(
            sc,
            Scenario::K1Degeneration | Scenario::DdpmGaussianE2e | Scenario::CallAccounting
        );
        if needs_mixture {
            if let Err(e) = GaussianMixture::new(t.mixture.clone()) {
                p.push(format!("target.mixture: {e}"));
            }
        }
        if sc == Scenario::DdpmGaussianE2e && t.mixture.iter().any(|c| c.mean.len() != 1) {
            p.push("target.mixture must be one-dimensional for ddpm_gaussian_e2e".into());
        }
        let nonempty = |p: &mut Vec<String>, name: &str, len: usize| {
            if len == 0 {
                p.push(format!("{name} must not be empty"));
            }
        };
        match sc {
            Scenario::ScalingCheck | Scenario::ConstantDriftEquiv => {
                nonempty(&mut p, "sampler.alphas", s.alphas.len());
                nonempty(&mut p, "sampler.ks", s.ks.len());
                if s.ks.iter().any(|&k| k > u32::MAX as usize) {
                    p.push("sampler.ks entries are too large".into());
                }
            }
            Scenario::K1Degeneration | Scenario::Theorem1Diagnostics => {
                nonempty(&mut p, "sampler.alphas", s.alphas.len());
                nonempty(&mut p, "target.gammas", t.gammas.len());
                if sc == Scenario::Theorem1Diagnostics {
                    nonempty(&mut p, "sampler.ks", s.ks.len());
                    nonempty(&mut p, "sampler.options", s.options.len());
                }
            }
            Scenario::PropositionEnergyTest => {
                nonempty(&mut p, "sampler.alphas", s.alphas.len());
                nonempty(&mut p, "sampler.ks", s.ks.len());
                nonempty(&mut p, "sampler.options", s.options.len());
                if self.chains < 100 {
                    p.push("chains must be at least 100 for the energy test".into());
                }
                if s.permutations == 0 {
                    p.push("sampler.permutations must be at least 1".into());
                }
                if s.calibration_trials > 0 && s.calibration_size < 100 {
                    p.push("sampler.calibration_size must be at least 100".into());
                }
            }
            Scenario::OlmcSpeedupSweep | Scenario::UlmcSpeedupSweep => {
                nonempty(&mut p, "sampler.alphas", s.alphas.len());
                if !s.ks.is_empty() && s.ks.len() != s.alphas.len() {
                    p.push("sampler.ks must be empty or match sampler.alphas in length".into());
                }
                if self.chains < 2 {
                    p.push("chains must be at least 2 for standard errors".into());
                }
                if sc == Scenario::UlmcSpeedupSweep {
                    nonempty(&mut p, "target.gammas", t.gammas.len());
                }
            }
            Scenario::DdpmGaussianE2e | Scenario::PlmcSchedulerE2e => {
                if self.chains < 2 {
                    p.push("chains must be at least 2 for standard errors".into());
                }
                if sc == Scenario::PlmcSchedulerE2e {
                    nonempty(&mut p, "sampler.ks", s.ks.len());
                    nonempty(&mut p, "sampler.options", s.options.len());
                    if let Ok(sched) = t.schedule.build() {
                        if s.ks.iter().any(|&k| k > sched.len()) {
                            p.push("sampler.ks entries must not exceed target.schedule.n".into());
                        }
                    }
                }
            }
            Scenario::CallAccounting => {
                nonempty(&mut p, "sampler.ks", s.ks.len());
                if s.ks.len() != s.options.len() {
                    p.push("sampler.ks and sampler.options must pair up".into());
                }
                if self.chains < 2 {
                    p.push("chains must be at least 2 for standard errors".into());
                }
                if let Ok(sched) = t.schedule.build() {
                    if s.ks.iter().any(|&k| k > sched.len()) {
                        p.push("sampler.ks entries must not exceed target.schedule.n".into());
                    }
                }
            }
            Scenario::VariantVarianceOrder => {}
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }
}

/// One result line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub case: String,
    pub metric: String,
    pub value: f64,
    pub reference: f64,
    pub stderr: f64,
    pub n: u64,
    pub rule: String,
    pub pass: String,
}

/// Outcome of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub scenario: Scenario,
    pub wall_time_s: f64,
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass != "fail")
    }

    pub fn failures(&self) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.pass == "fail").collect()
    }

    pub fn checked(&self) -> usize {
        self.rows.iter().filter(|r| !r.pass.is_empty()).count()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: String| Error::Io {
            path: "<report>".into(),
            message: e,
        };
        for r in &self.rows {
            w.serialize(r).map_err(|e| io(e.to_string()))?;
        }
        w.flush().map_err(|e| io(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

struct Rows {
    scenario: Scenario,
    rows: Vec<ReportRow>,
}

impl Rows {
    fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            rows: Vec::new(),
        }
    }

    fn info(&mut self, case: &str, metric: &str, value: f64, stderr: f64, n: u64) {
        self.rows.push(ReportRow {
            case: case.to_string(),
            metric: metric.to_string(),
            value,
            reference: f64::NAN,
            stderr,
            n,
            rule: String::new(),
            pass: String::new(),
        });
    }

    fn check(&mut self, case: &str, metric: &str, value: f64, reference: f64, stderr: f64, n: u64) {
        let rule = threshold(self.scenario, metric);
        let ok = rule.check(value, reference, stderr);
        self.rows.push(ReportRow {
            case: case.to_string(),
            metric: metric.to_string(),
            value,
            reference,
            stderr,
            n,
            rule: rule.to_string(),
            pass: if ok { "pass" } else { "fail" }.to_string(),
        });
    }
}

/// Validate `cfg` and run its scenario.
pub fn run_scenario(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rows = Rows::new(cfg.scenario);
    match cfg.scenario {
        Scenario::ScalingCheck => scaling_check(cfg, &mut rows)?,
        Scenario::K1Degeneration => k1_degeneration(cfg, &mut rows)?,
        Scenario::ConstantDriftEquiv => constant_drift_equiv(cfg, &mut rows)?,
        Scenario::PropositionEnergyTest => proposition_energy_test(cfg, &mut rows)?,
        Scenario::OlmcSpeedupSweep => speedup_sweep(cfg, &mut rows, false)?,
        Scenario::UlmcSpeedupSweep => speedup_sweep(cfg, &mut rows, true)?,
        Scenario::Theorem1Diagnostics => theorem1_diagnostics(cfg, &mut rows)?,
        Scenario::DdpmGaussianE2e => ddpm_gaussian_e2e(cfg, &mut rows)?,
        Scenario::PlmcSchedulerE2e => plmc_scheduler_e2e(cfg, &mut rows)?,
        Scenario::CallAccounting => call_accounting(cfg, &mut rows)?,
        Scenario::VariantVarianceOrder => variant_variance_order(cfg, &mut rows)?,
    }
    Ok(RunReport {
        scenario: cfg.scenario,
        wall_time_s: start.elapsed().as_secs_f64(),
        rows: rows.rows,
    })
}

/// Stream id for chain `chain` of case `case`.
fn stream(case: u64, chain: usize) -> u64 {
    (case << 40) | chain as u64
}

/// Run `f` for every chain in parallel and return results in chain order.
/// The first failing chain (by id) determines the error.
fn per_chain<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let out: Vec<Result<T>> = (0..n).into_par_iter().map(|c| f(c).map_err(|e| tag_chain(e, c))).collect();
    out.into_iter().collect()
}

fn tag_chain(e: Error, chain: usize) -> Error {
    match e {
        Error::Divergence { step, detail } => Error::Divergence {
            step,
            detail: format!("chain {chain}: {detail}"),
        },
        other => other,
    }
}

fn quadratic(dim: usize) -> Arc<dyn Potential> {
    Arc::new(IsotropicQuadratic::standard(dim))
}

/// `F(x) = Σ x²/2 + log cosh x`, a smooth non-quadratic potential.
fn soft_well(dim: usize) -> Arc<dyn Potential> {
    Arc::new(
        FnPotential::new(dim, |x: &[f64], out: &mut [f64]| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = v + v.tanh();
            }
        })
        .with_smoothness(2.0),
    )
}

struct Langevin {
    label: String,
    fam: Box<dyn TransitionFamily>,
    drift: Box<dyn DriftField>,
}

fn langevin_families(dim: usize, gammas: &[f64], potential: Arc<dyn Potential>) -> Result<Vec<Langevin>> {
    let mut v = vec![Langevin {
        label: "olmc".into(),
        fam: Box::new(OverdampedFamily::new(dim)),
        drift: Box::new(OverdampedDrift::new(potential.clone())),
    }];
    for &g in gammas {
        v.push(Langevin {
            label: format!("ulmc gamma={g}"),
            fam: Box::new(UnderdampedFamily::new(dim, g)?),
            drift: Box::new(UnderdampedDrift::new(potential.clone())),
        });
    }
    Ok(v)
}

fn scaling_check(cfg: &ExperimentConfig, rows: &mut Rows) -> Result<()> {
    let fams = langevin_families(cfg.target.dim, &cfg.target.gammas, quadratic(cfg.target.dim))?;
    for f in &fams {
        for &h in &cfg.sampler.alphas {
            for &n in &cfg.sampler.ks {
                let r = check_scaling_relations(f.fam.as_ref(), h, n as u32)?;
                let case = format!("{} h={h} n={n}", f.label);
                rows.check(&case, "identity_residual", r.max(), 0.0, 0.0, 1);
                rows.info(&case, "a_err", r.a_err, 0.0, 1);
                rows.info(&case, "g_err", r.g_err, 0.0, 1);
                rows.info(&case, "gamma_err", r.gamma_err, 0.0, 1);
            }
        }
    }
    Ok(())
}

fn k1_degeneration(cfg: &ExperimentConfig, rows: &mut Rows) -> Result<()> {
    let dim = cfg.target.dim;
    let alpha = cfg.sampler.alphas[0];
    let fams = langevin_families(dim, &cfg.target.gammas, quadratic(dim))?;
    for (fi, f) in fams.iter().enumerate() {
        let pm = PoissonMidpointConfig::new(1, MidpointOption::Option2, alpha);
        let kernel = PlmcKernel::new(f.fam.as_ref(), pm)?;
        let sdim = f.fam.dim();
        let dev = per_chain(cfg.chains, |c| {
            let mut rng = RngStream::new(cfg.seed, stream(fi as u64, c));
            let mut x = rng.gaussian_vec(sdim);
            let mut y = x.clone();
            let mut worst = 0.0f64;
            let mut mismatched = 0u64;
            let draw = MidpointDraw { indices: vec![0] };
            for t in 0..cfg.steps as u64 {
                let z = rng.gaussian_vec(sdim);
                let mut d1 = CountedDrift::new(f.drift.as_ref());
                let (nx, _) = kernel.step_with(&mut d1, &x, t, &draw, BridgeNoise::Fine(std::slice::from_ref(&z)))?;
                let mut d2 = CountedDrift::new(f.drift.as_ref());
                let st = ChainState {
                    x: y.clone(),
                    step_index: t,
                    step_size: alpha,
                };
                let ny = fine_step_with_noise(f.fam.as_ref(), &mut d2, &st, alpha, &z)?.x;
                for (a, b) in nx.iter().zip(&ny) {
                    worst = worst.max((a - b).abs());
                    mismatched += (a.to_bits() != b.to_bits()) as u64;
                }
                x = nx;
                y = ny;
            }
            Ok((worst, mismatched))
        })?;
        let case = format!("{} plmc option2 K=1", f.label);
        let n = (cfg.chains * cfg.steps) as u64;
        rows.check(&case, "max_abs_deviation", dev.iter().map(|d| d.0).fold(0.0, f64::max), 0.0, 0.0, n);
        rows.check(&case, "mismatched_values", dev.iter().map(|d| d.1).sum::<u64>() as f64, 0.0, 0.0, n);
    }

    let sched = cfg.target.schedule.build()?;
    let oracle = ScoreOracle::new(GaussianMixture::new(cfg.target.mixture.clone())?, &sched)?;
    let d = oracle.dim();
    for (vi, v) in Variant::ALL.iter().enumerate() {
        let coeffs = variant_coefficients(&sched, *v);
        let dev = per_chain(cfg.chains, |c| {
            let mut rng = RngStream::new(cfg.seed, stream(100 + vi as u64, c));
            let mut x = rng.gaussian_vec(d);
            let mut y = x.clone();
            let mut worst = 0.0f64;
            let mut mismatched = 0u64;
            for t in (1..=coeffs.n()).rev() {
                let z = rng.gaussian_vec(d);
                let mut s1 = CountedScore::new(&oracle);
                let mut s2 = CountedScore::new(&oracle);
                let (nx, _) = poisson_midpoint_scheduler_step_with(
                    &coeffs,
                    &mut s1,
                    &x,
                    t,
                    1,
                    MidpointOption::Option2,
                    &[],
                    std::slice::from_ref(&z),
                )?;
                let ny = ddpm_step_with_noise(&coeffs, &mut s2, &y, t, &z)?;
                for (a, b) in nx.iter().zip(&ny) {
                    worst = worst.max((a - b).abs());
                    mismatched += (a.to_bits() != b.to_bits()) as u64;
                }
                x = nx;
                y = ny;
            }
            Ok((worst, mismatched))
        })?;
        let case = format!("scheduler {} K=1", v.name());
        let n = (cfg.chains * coeffs.n()) as u64;
        rows.check(&case, "max_abs_deviation", dev.iter().map(|d| d.0).fold(0.0, f64::max), 0.0, 0.0, n);
        rows.check(&case, "mismatched_values", dev.iter().map(|d| d.1).sum::<u64>() as f64, 0.0, 0.0, n);
    }
    Ok(())
}

fn constant_drift_equiv(cfg: &ExperimentConfig, rows: &mut Rows) -> Result<()> {
    let dim = cfg.target.dim;
    let fams = langevin_families(dim, &cfg.target.gammas, quadratic(dim))?;
    let mut rng = RngStream::new(cfg.seed, stream(0, 0));
    for f in &fams {
        let sdim = f.fam.dim();
        // drift acts on the position block only
        let mut c = vec![0.0; sdim];
        for (i, v) in c.iter_mut().take(dim).enumerate() {
            *v = 0.7 - 0.4 * i as f64;
        }
        let x: Vec<f64> = (0..sdim).map(|i| 0.5 + 0.25 * i as f64).collect();
        for &alpha in &cfg.sampler.alphas {
            for &k in &cfg.sampler.ks {
                let fine = propagate_constant_drift(f.fam.as_ref(), alpha / k as f64, k as u32, &GaussianLaw::point(&x), &c);
                let mut worst = 0.0f64;
                let mut n = 0u64;
                for option in [MidpointOption::Option1, MidpointOption::Option2] {
                    let pm = PoissonMidpointConfig::new(k, option, alpha);
                    let kernel = PlmcKernel::new(f.fam.as_ref(), pm)?;
                    let mut draws = vec![
                        MidpointDraw::default(),
                        MidpointDraw {
                            indices: (0..k).collect(),
                        },
                    ];
                    draws.extend((0..cfg.chains).map(|_| draw_midpoints(&pm, &mut rng)));
                    for d in &draws {
                        let law = kernel.constant_drift_law(&x, &c, d);
                        worst = worst.max(law.max_abs_diff(&fine));
                        n += 1;
                    }
                    // the step itself, noise off, lands on the mean
                    let drift = ConstantDrift::new(c.clone());
                    let zeros = vec![vec![0.0; sdim]; k];
                    for d in &draws {
                        let mut cd = CountedDrift::new(&drift);
                        let (out, _) = kernel.step_with(&mut cd, &x, 0, d, BridgeNoise::Fine(&zeros))?;
                        for (o, m) in out.iter().zip(fine.mean.iter()) {
                            worst = worst.max((o - m).abs());
                        }
                    }
                }
                let case = format!("{} alpha={alpha} K={k}", f.label);
                rows.check(&case, "law_max_abs_diff", worst, 0.0, 0.0, n);
            }
        }
    }

    let sched = cfg.target.schedule.build()?;
    for v in [Variant::V1, Variant::V2, Variant::V3] {
        let coeffs = variant_coefficients(&sched, v);
        for &k in &cfg.sampler.ks {
            let mut worst = 0.0f64;
            for t in [k, sched.len() / 2, sched.len()] {
                if t < k {
                    continue;
                }
                let ic = interpolation_constants(&coeffs, t, k)?;
                let (m, var) = constant_drift_composed_law(&coeffs, 0.4, -1.2, t, k)?;
                let m_shot = ic.a_k * 0.4 + ic.sum_b() * -1.2;
                let v_shot: f64 = ic.c.iter().map(|x| x * x).sum();
                worst = worst.max((m - m_shot).abs()).max((var - v_shot).abs());
            }
            rows.check(&format!("scheduler {} K={k}", v.name()), "law_max_abs_diff", worst, 0.0, 0.0, 3);
        }
    }
    Ok(())
}

/// Position after `steps` coarse steps from `x0`, either through Steps 1–5
/// with fresh bridge noise or through the refined recursion.
fn proposition_sample(
    kernel: &PlmcKernel<'_>,
    drift: &dyn DriftField,
    x0: &[f64],
    steps: usize,
    refined: bool,
    rng: &mut RngStream,
) -> Result<f64> {
    let mut x = x0.to_vec();
    let cfg = *kernel.config();
    for t in 0..steps as u64 {
        let mut cd = CountedDrift::new(drift);
        if refined {
            let draw = draw_midpoints(&cfg, rng);
            let z: Vec<Vec<f64>> = (0..cfg.k).map(|_| rng.gaussian_vec(x.len())).collect();
            x = kernel.refined_trace(&mut cd, &x, t, &draw, &z, false)?.output().to_vec();
        } else {
            x = kernel.step(&mut cd, &x, t, rng)?.0;
        }
    }
    Ok(x[0])
}

fn proposition_energy_test(cfg: &ExperimentConfig, rows: &mut Rows) -> Result<()> {
    let s = &cfg.sampler;
    let (alpha, k) = (s.alphas[0], s.ks[0]);
    let fam = OverdampedFamily::new(1);
    let drift = OverdampedDrift::new(quadratic(1));
    let x0 = [cfg.target.x0];
    for (oi, &option) in s.options.iter().enumerate() {
        let kernel = PlmcKernel::new(&fam, PoissonMidpointConfig::new(k, option, alpha))?;
        let case = format!("alpha={alpha} K={k} {option:?}").to_lowercase();
        let base = 10 * oi as u64;
        let a = per_chain(cfg.chains, |c| {
            let mut rng = RngStream::new(cfg.seed, stream(base, c));
            proposition_sample(&kernel, &drift, &x0, cfg.steps, false, &mut rng)
        })?;
        let b = per_chain(cfg.chains, |c| {
            let mut rng = RngStream::new(cfg.seed, stream(base + 1, c));
            proposition_sample(&kernel, &drift, &x0, cfg.steps, true, &mut rng)
        })?;
        let ea = EmpiricalEnsemble::from_scalars(a)?;
        let eb = EmpiricalEnsemble::from_scalars(b)?;
        let t = two_sample_energy_test(&ea, &eb, s.level, s.permutations, cfg.seed ^ base)?;
        rows.info(&case, "energy_statistic", t.statistic, 0.0, cfg.chains as u64);
        rows.check(&case, "p_value", t.p_value, s.level, 0.0, cfg.chains as u64);

        if s.calibration_trials > 0 {
            let m = s.calibration_size;
            let rejects = per_chain(s.calibration_trials, |trial| {
                let mut rng = RngStream::new(cfg.seed, stream(base + 2, trial));
                let draw = |rng: &mut RngStream| -> Result<Vec<f64>> {
                    (0..m)
                        .map(|_| proposition_sample(&kernel, &drift, &x0, cfg.steps, false, rng))
                        .collect()
                };
                let xa = EmpiricalEnsemble::from_scalars(draw(&mut rng)?)?;
                let xb = EmpiricalEnsemble::from_scalars(draw(&mut rng)?)?;
                let t = two_sample_energy_test(&xa, &xb, s.level, s.permutations, stream(base + 3, trial))?;
                Ok(t.reject as u64)
            })?;
            let n = s.calibration_trials as f64;
            let rate = rejects.iter().sum::<u64>() as f64 / n;
            let se = (s.level * (1.0 - s.level) / n).sqrt();
            rows.check(&case, "null_rejection_rate", rate, s.level, se, s.calibration_trials as u64);
        }
    }
    Ok(())
}

/// Pooled second moment of the recorded coordinate and its standard error
/// from per-chain averages.
fn pooled_second_moment(per_chain: &[f64]) -> (f64, f64) {
    let n = per_chain.len() as f64;
    let mean = per_chain.iter().sum::<f64>() / n;
    let var = per_chain.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum SweepMethod {
    Lmc,
    LmcFine,
    Plmc(MidpointOption),
}

impl SweepMethod {
    fn name(&self) -> &'static str {
        match self {
            SweepMethod::Lmc => "lmc",
            SweepMethod::LmcFine => "lmc_fine",
            SweepMethod::Plmc(MidpointOption::Option1) => "plmc_option1",
            SweepMethod::Plmc(MidpointOption::Option2) => "plmc_option2",
        }
    }
}

/// Mean of the squared first coordinate over `records` samples taken every
/// coarse step (every `K` fine steps for `LmcFine`) after `burn_in`.
#[allow(clippy::too_many_arguments)]
fn sweep_chain(
    fam: &dyn TransitionFamily,
    drift: &dyn DriftField,
    method: SweepMethod,
    alpha: f64,
    k: usize,
    burn_in: usize,
    records: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let dim = fam.dim();
    let mut x = rng.gaussian_vec(dim);
    let mut cd = CountedDrift::new(drift);
    let mut acc = 0.0;
    match method {
        SweepMethod::Lmc | SweepMethod::LmcFine => {
            let (h, per) = if method == SweepMethod::Lmc {
                (alpha, 1)
            } else {
                (alpha / k as f64, k)
            };
            let m = fam.eval(h);
            let mut st = ChainState::new(x, h);
            let mut z = vec![0.0; dim];
            for r in 0..burn_in + records {
                for _ in 0..per {
                    rng.fill_gaussian(&mut z);
                    st = step_with_matrices(dim, &m, &mut cd, &st, h, &z)?;
                }
                if r >= burn_in {
                    acc += st.x[0] * st.x[0];
                }
            }
        }
        SweepMethod::Plmc(option) => {
            let kernel = PlmcKernel::new(fam, PoissonMidpointConfig::new(k, option, alpha))?;
            for r in 0..burn_in + records {
                x = kernel.step(&mut cd, &x, r as u64, rng)?.0;
                if r >= burn_in {
                    acc += x[0] * x[0];
                }
            }
        }
    }
    Ok(acc / records as f64)
}

fn speedup_sweep(cfg: &ExperimentConfig, rows: &mut Rows, underdamped: bool) -> Result<()> {
    let s = &cfg.sampler;
    let fam: Box<dyn TransitionFamily> = if underdamped {
        Box::new(UnderdampedFamily::new(1, cfg.target.gammas[0])?)
    } else {
        Box::new(OverdampedFamily::new(1))
    };
    let drift: Box<dyn DriftField> = if underdamped {
        Box::new(UnderdampedDrift::new(quadratic(1)))
    } else {
        Box::new(OverdampedDrift::new(quadratic(1)))
    };
    let methods = [
        SweepMethod::Lmc,
        SweepMethod::LmcFine,
        SweepMethod::Plmc(MidpointOption::Option1),
        SweepMethod::Plmc(MidpointOption::Option2),
    ];
    let n = (cfg.chains * cfg.steps) as u64;
    let mut biases: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
    for (ai, &alpha) in s.alphas.iter().enumerate() {
        let k = if s.ks.is_empty() {
            (1.0 / alpha).ceil() as usize
        } else {
            s.ks[ai]
        };
        let mut est = Vec::new();
        for (mi, &method) in methods.iter().enumerate() {
            let case_id = (ai * methods.len() + mi) as u64;
            let per = per_chain(cfg.chains, |c| {
                let mut rng = RngStream::new(cfg.seed, stream(case_id, c));
                sweep_chain(fam.as_ref(), drift.as_ref(), method, alpha, k, s.burn_in, cfg.steps, &mut rng)
            })?;
            let (m2, se) = pooled_second_moment(&per);
            let bias = (m2 - 1.0).abs();
            rows.info(&format!("alpha={alpha} K={k} method={}", method.name()), "variance_bias", bias, se, n);
            biases[mi].push(bias);
            est.push(bias);
        }
        for (mi, method) in methods.iter().enumerate().skip(2) {
            let case = format!("alpha={alpha} K={k} method={}", method.name());
            rows.check(&case, "bias_vs_lmc", est[mi], est[0], 0.0, n);
            rows.check(&case, "bias_vs_lmc_fine", est[mi], est[1], 0.0, n);
        }
    }
    if !underdamped {
        // biases should shrink with the step size
        let mut order: Vec<usize> = (0..s.alphas.len()).collect();
        order.sort_by(|&a, &b| s.alphas[b].total_cmp(&s.alphas[a]));
        for (mi, method) in methods.iter().enumerate() {
            let seq: Vec<f64> = order.iter().map(|&i| biases[mi][i]).collect();
            let mono = seq.windows(2).all(|w| w[1] <= w[0]);
            rows.check(&format!("method={}", method.name()), "bias_monotone_in_alpha", mono as u8 as f64, 1.0, 0.0, n);
        }
    }
    Ok(())
}

fn theorem1_diagnostics(cfg: &ExperimentConfig, rows: &mut Rows) -> Result<()> {
    let s = &cfg.sampler;
    let dim = cfg.target.dim;
    let alpha = s.alphas[0];
    let fams = langevin_families(dim, &cfg.target.gammas, soft_well(dim))?;
    let mut case_id = 0u64;
    for f in &fams {
        for &k in &s.ks {
            for &option in &s.options {
                case_id += 1;
                let pm = PoissonMidpointConfig::new(k, option, alpha);
                let kernel = PlmcKernel::new(f.fam.as_ref(), pm)?;
                let sdim = f.fam.dim();
                let total_steps = cfg.chains * cfg.steps;
                let replay_every = total_steps.div_ceil(s.replay_steps.max(1)).max(1);
                let per = per_chain(cfg.chains, |c| {
                    let mut rng = RngStream::new(cfg.seed, stream(case_id, c));
                    let mut acc = DiagnosticsAccumulator::new(s.moment_r);
                    let mut replay_err = 0.0f64;
                    let mut replays = 0u64;
                    let mut x = rng.gaussian_vec(sdim);
                    for t in 0..cfg.steps {
                        let draw = draw_midpoints(&pm, &mut rng);
                        let z: Vec<Vec<f64>> = (0..k).map(|_| rng.gaussian_vec(sdim)).collect();
                        let mut cd = CountedDrift::new(f.drift.as_ref());
                        let tr = kernel.refined_trace(&mut cd, &x, t as u64, &draw, &z, true)?;
                        accumulate_theorem1_diagnostics(&kernel, &tr, &mut acc)?;
                        if (c * cfg.steps + t).is_multiple_of(replay_every) {
                            replay_err = replay_err.max(bias_variance_decomposition_check(&kernel, &mut cd, &tr)?);
                            replays += 1;
                        }
                        x = tr.output().to_vec();
                    }
                    Ok((acc, replay_err, replays))
                })?;
                let mut acc = DiagnosticsAccumulator::new(s.moment_r);
                let mut err = 0.0f64;
                let mut replays = 0u64;
                for (a, e, r) in &per {
                    acc.merge(a);
                    err = err.max(*e);
                    replays += r;
                }
                let case = format!("{} K={k} {option:?}", f.label).to_lowercase();
                let steps = acc.samples_seen as f64;
                rows.info(&case, "sum_b_sq_per_step", acc.sum_b_sq / steps, 0.0, acc.samples_seen);
                rows.info(&case, "beta_terms_per_step", acc.beta_terms() / steps, 0.0, acc.samples_seen);
                rows.info(&case, "beta4_per_step", acc.sum_beta4 / steps, 0.0, acc.samples_seen);
                rows.check(&case, "accumulators_valid", acc.is_valid() as u8 as f64, 1.0, 0.0, acc.samples_seen);
                rows.check(&case, "replay_max_abs_error", err, 0.0, 0.0, replays);
            }
        }
    }
    Ok(())
}

/// Reverse runs of `chains` chains started from `N(0, I)`; returns the
/// terminal states row-major and the per-chain score calls.
fn reverse_ensemble(
    cfg: &ExperimentConfig,
    coeffs: &SchedulerCoefficients,
    oracle: &ScoreOracle,
    k: usize,
    option: MidpointOption,
    case_id: u64,
) -> Result<(Vec<f64>, Vec<u64>)> {
    let d = oracle.dim();
    let out = per_chain(cfg.chains, |c| {
        let mut rng = RngStream::new(cfg.seed, stream(case_id, c));
        let x = rng.gaussian_vec(d);
        let mut sc = CountedScore::new(oracle);
        let (x, ledger) = run_reverse(coeffs, &mut sc, &x, k, option, &mut rng)?;
        Ok((x, ledger.score_calls))
    })?;
    let mut xs = Vec::with_capacity(cfg.chains * d);
    let mut calls = Vec::with_capacity(cfg.chains);
    for (x, c) in out {
        xs.extend(x);
        calls.push(c);
    }
    Ok((xs, calls))
}

/// Mass, mean and variance of a Gaussian mixture restricted to one side of
/// zero.
fn truncated_mixture_moments(mix: &[MixtureComponent], positive: bool) -> (f64, f64, f64) {
    let (mut mass, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for c in mix {
        let (mu, sd) = (c.mean[0], c.cov[0].sqrt());
        let nrm = Normal::new(0.0, 1.0).expect("standard normal");
        // moments of N(mu, sd²) on x > 0, or on x < 0 via reflection
        let m = if positive { mu } else { -mu };
        let a = m / sd;
        let p = nrm.cdf(a);
        let phi = nrm.pdf(a);
        let e1 = m * p + sd * phi;
        let e2 = (m * m + sd * sd) * p + m * sd * phi;
        let sign = if positive { 1.0 } else { -1.0 };
        mass += c.weight * p;
        m1 += c.weight * sign * e1;
        m2 += c.weight * e2;
    }
    let mean = m1 / mass;
    (mass, mean, m2 / mass - mean * mean)
}

fn ddpm_gaussian_e2e(cfg: &ExperimentConfig, rows: &mut Rows) -> Result<()> {
    let sched = cfg.target.schedule.build()?;
    let coeffs = variant_coefficients(&sched, cfg.sampler.variant);
    let vname = cfg.sampler.variant.name();
    let n = cfg.chains as u64;

    let single = ScoreOracle::new(GaussianMixture::single(vec![0.0], 1.0)?, &sched)?;
    let (xs, _) = reverse_ensemble(cfg, &coeffs, &single, 1, MidpointOption::Option2, 0)?;
    let est = empirical_moments(&EmpiricalEnsemble::from_scalars(xs)?)?;
    let (mean, var) = (est.moments.mean[0], est.moments.cov[(0, 0)]);
    let (mse, vse) = (est.mean_se[0], est.cov_se[(0, 0)]);
    let case = format!("single gaussian {vname} N={}", sched.len());
    rows.check(&case, "terminal_abs_mean", mean.abs(), 0.0, mse, n);
    rows.check(&case, "terminal_var", var, 1.0, vse, n);
    let (em, ev) = *exact_gaussian_moments(&coeffs, 0.0, 1.0, 0.0, 1.0).last().expect("nonempty");
    rows.check(&format!("{case} mean"), "exact_recursion_moment", mean, em, mse, n);
    rows.check(&format!("{case} var"), "exact_recursion_moment", var, ev, vse, n);

    let mixture = GaussianMixture::new(cfg.target.mixture.clone())?;
    let oracle = ScoreOracle::new(mixture, &sched)?;
    let (xs, _) = reverse_ensemble(cfg, &coeffs, &oracle, 1, MidpointOption::Option2, 1)?;
    let case = format!("mixture {vname} N={}", sched.len());
    for positive in [true, false] {
        let side: Vec<f64> = xs.iter().copied().filter(|&x| (x > 0.0) == positive).collect();
        let (ref_mass, ref_mean, ref_var) = truncated_mixture_moments(&cfg.target.mixture, positive);
        let label = if positive { "x>0" } else { "x<0" };
        let mass = side.len() as f64 / xs.len() as f64;
        let mass_se = (mass * (1.0 - mass) / xs.len() as f64).sqrt();
        rows.check(&format!("{case} {label} mass"), "component_mass", mass, ref_mass, mass_se, n);
        if side.len() >= 2 {
            let est = empirical_moments(&EmpiricalEnsemble::from_scalars(side.clone())?)?;
            let ns = side.len() as u64;
            rows.check(&format!("{case} {label} mean"), "component_moment", est.moments.mean[0], ref_mean, est.mean_se[0], ns);
            rows.check(&format!("{case} {label} var"), "component_moment", est.moments.cov[(0, 0)], ref_var, est.cov_se[(0, 0)], ns);
        } else {
            rows.check(&format!("{case} {label} mean"), "component_moment", f64::NAN, ref_mean, 0.0, 0);
        }
    }
    Ok(())
}

fn plmc_scheduler_e2e(cfg: &ExperimentConfig, rows: &mut Rows) -> Result<()> {
    let sched = cfg.target.schedule.build()?;
    let coeffs = variant_coefficients(&sched, cfg.sampler.variant);
    let oracle = ScoreOracle::new(GaussianMixture::single(vec![0.0], 1.0)?, &sched)?;
    let (em, ev) = *exact_gaussian_moments(&coeffs, 0.0, 1.0, 0.0, 1.0).last().expect("nonempty");
    let n = cfg.chains as u64;
    let mut case_id = 0;
    for &k in &cfg.sampler.ks {
        for &option in &cfg.sampler.options {
            case_id += 1;
            let (xs, calls) = reverse_ensemble(cfg, &coeffs, &oracle, k, option, case_id)?;
            let est = empirical_moments(&EmpiricalEnsemble::from_scalars(xs)?)?;
            let case = format!("{} K={k} {option:?}", cfg.sampler.variant.name()).to_lowercase();
            rows.check(&format!("{case} mean"), "exact_recursion_moment", est.moments.mean[0], em, est.mean_se[0], n);
            rows.check(&format!("{case} var"), "exact_recursion_moment", est.moments.cov[(0, 0)], ev, est.cov_se[(0, 0)], n);
            let cm = calls.iter().sum::<u64>() as f64 / n as f64;
            rows.info(&case, "mean_score_calls", cm, 0.0, n);
            rows.info(&case, "predicted_score_calls", expected_score_calls(sched.len(), k, option), 0.0, 1);
        }
    }
    Ok(())
}

/// Score-call counts printed in the paper's tables, keyed by `(N, K, option)`.
const PAPER_CALLS: &[(usize, usize, MidpointOption, f64, usize)] = &[
    (1000, 2, MidpointOption::Option1, 750.0, 500),
    (1000, 50, MidpointOption::Option2, 40.0, 20),
];

fn mean_se_u64(v: &[u64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<u64>() as f64 / n;
    let var = v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn call_accounting(cfg: &ExperimentConfig, rows: &mut Rows) -> Result<()> {
    let sched = cfg.target.schedule.build()?;
    let coeffs = variant_coefficients(&sched, cfg.sampler.variant);
    let oracle = ScoreOracle::new(GaussianMixture::new(cfg.target.mixture.clone())?, &sched)?;
    let n_idx = sched.len();
    for (i, (&k, &option)) in cfg.sampler.ks.iter().zip(&cfg.sampler.options).enumerate() {
        let case = format!("N={n_idx} K={k} {option:?}").to_lowercase();
        let predicted = expected_score_calls(n_idx, k, option);
        let steps = crate::diffusion::coarse_widths(n_idx, k).len();
        if let Some(&(_, _, _, paper, paper_steps)) =
            PAPER_CALLS.iter().find(|(pn, pk, po, _, _)| *pn == n_idx && *pk == k && *po == option)
        {
            rows.check(&case, "predicted_vs_paper", predicted, paper, 0.0, 1);
            rows.check(&format!("{case} steps"), "predicted_vs_paper", steps as f64, paper_steps as f64, 0.0, 1);
        } else {
            rows.info(&case, "predicted_calls", predicted, 0.0, 1);
        }
        let (_, calls) = reverse_ensemble(cfg, &coeffs, &oracle, k, option, i as u64)?;
        let (m, se) = mean_se_u64(&calls);
        rows.check(&case, "empirical_calls", m, predicted, se, cfg.chains as u64);
    }

    // per-step accounting at K = 4 over `steps` single steps
    let k = 4.min(n_idx);
    for (oi, option) in [MidpointOption::Option1, MidpointOption::Option2].into_iter().enumerate() {
        let chunks = 100usize;
        let per = cfg.steps.div_ceil(chunks);
        let calls = per_chain(chunks, |c| {
            let mut rng = RngStream::new(cfg.seed, stream(1000 + oi as u64, c));
            let mut out = Vec::with_capacity(per);
            for _ in 0..per {
                let t = rng.uniform_index(k, n_idx + 1);
                let x = rng.gaussian_vec(oracle.dim());
                let mut sc = CountedScore::new(&oracle);
                let (_, led) = poisson_midpoint_scheduler_step(&coeffs, &mut sc, &x, t, k, option, &mut rng)?;
                out.push(led.score_calls);
            }
            Ok(out)
        })?;
        let flat: Vec<u64> = calls.into_iter().flatten().collect();
        let (m, se) = mean_se_u64(&flat);
        let predicted = expected_score_calls(k, k, option);
        rows.check(&format!("per step K={k} {option:?}").to_lowercase(), "empirical_calls", m, predicted, se, flat.len() as u64);
    }
    Ok(())
}

fn variant_variance_order(cfg: &ExperimentConfig, rows: &mut Rows) -> Result<()> {
    let mut schedules = vec![cfg.target.schedule.clone()];
    schedules.extend(cfg.target.extra_schedules.iter().cloned());
    for sc in &schedules {
        let sched = sc.build()?;
        let table: Vec<SchedulerCoefficients> = [Variant::V1a, Variant::V1b, Variant::V1c, Variant::V1d, Variant::V2, Variant::V3]
            .iter()
            .map(|v| variant_coefficients(&sched, *v))
            .collect();
        let mut v1_bad = 0u64;
        let mut v3_bad = 0u64;
        for t in 1..=sched.len() {
            let s: Vec<f64> = table.iter().map(|c| c.sigma(t).powi(2)).collect();
            if !(s[0] > s[1] && s[1] > s[2] && s[2] > s[3]) {
                v1_bad += 1;
            }
            if s[5] > s[4] {
                v3_bad += 1;
            }
        }
        let case = format!("{:?} N={} beta={}..{}", sc.kind, sched.len(), sched.beta(1), sched.beta(sched.len())).to_lowercase();
        rows.check(&format!("{case} v1a>v1b>v1c>v1d"), "ordering_violations", v1_bad as f64, 0.0, 0.0, sched.len() as u64);
        rows.check(&format!("{case} v3<=v2"), "ordering_violations", v3_bad as f64, 0.0, 0.0, sched.len() as u64);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("nope".parse::<Scenario>().is_err());
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        for s in Scenario::ALL {
            let c = ExperimentConfig::default_for(s);
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml_str(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn every_check_has_a_threshold() {
        for (s, c, _) in THRESHOLDS {
            threshold(*s, c);
        }
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut c = ExperimentConfig::default_for(Scenario::OlmcSpeedupSweep);
        c.chains = 0;
        c.sampler.alphas = vec![-1.0];
        c.sampler.level = 2.0;
        match c.validate() {
            Err(Error::Validation(v)) => assert!(v.len() >= 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = ExperimentConfig::default_for(Scenario::ScalingCheck).to_toml();
        text.push_str("\nbogus = 1\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn truncated_moments_symmetric_mixture() {
        let mix = TargetSpec::default().mixture;
        let (mp, mean_p, var_p) = truncated_mixture_moments(&mix, true);
        let (mn, mean_n, var_n) = truncated_mixture_moments(&mix, false);
        assert!((mp - 0.5).abs() < 1e-12 && (mn - 0.5).abs() < 1e-12);
        assert!((mean_p + mean_n).abs() < 1e-12);
        assert!((var_p - var_n).abs() < 1e-12);
        assert!((mean_p - 3.0).abs() < 0.01);
    }

    #[test]
    fn small_runs_pass() {
        for s in [Scenario::ScalingCheck, Scenario::VariantVarianceOrder, Scenario::ConstantDriftEquiv] {
            let r = run_scenario(&ExperimentConfig::default_for(s)).unwrap();
            assert!(r.passed(), "{s}: {:?}", r.failures());
        }
    }
}
