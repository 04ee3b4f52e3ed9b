//! Python bindings: schedules, scheduler coefficients, Langevin and
//! diffusion samplers, the gaussian metrics and the benchmark scenarios.

use std::sync::Arc;

use poisson_midpoint::bench::{self, ExperimentConfig, Scenario};
use poisson_midpoint::diffusion::{self, GaussianMixture, MixtureComponent, ScoreOracle, Variant};
use poisson_midpoint::dynamics::{CountedDrift, DriftField, TransitionFamily};
use poisson_midpoint::langevin::{
    self, FnPotential, IsotropicQuadratic, MidpointOption, OverdampedDrift, OverdampedFamily, PlmcKernel,
    PoissonMidpointConfig, Potential, UnderdampedDrift, UnderdampedFamily,
};
use poisson_midpoint::metrics::{self, EmpiricalEnsemble, GaussianMoments};
use poisson_midpoint::{Error, RngStream};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_option(s: &str) -> PyResult<MidpointOption> {
    match s {
        "option1" => Ok(MidpointOption::Option1),
        "option2" => Ok(MidpointOption::Option2),
        _ => Err(PyValueError::new_err(format!("option must be 'option1' or 'option2', got {s:?}"))),
    }
}

fn parse_variant(s: &str) -> PyResult<Variant> {
    s.parse::<Variant>().map_err(py_err)
}

#[pyclass(name = "NoiseSchedule", module = "pmm", frozen, from_py_object)]
#[derive(Clone)]
struct PyNoiseSchedule(diffusion::NoiseSchedule);

#[pymethods]
impl PyNoiseSchedule {
    #[staticmethod]
    #[pyo3(signature = (n=1000, beta_start=1e-4, beta_end=0.02))]
    fn linear(n: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        diffusion::NoiseSchedule::linear(n, beta_start, beta_end).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn scaled_linear(n: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        diffusion::NoiseSchedule::scaled_linear(n, beta_start, beta_end).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn custom(betas: Vec<f64>) -> PyResult<Self> {
        diffusion::NoiseSchedule::custom(betas).map(Self).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.check(t, 1)?;
        Ok(self.0.beta(t))
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.check(t, 0)?;
        Ok(self.0.alpha_bar(t))
    }

    fn __repr__(&self) -> String {
        format!("NoiseSchedule(n={})", self.0.len())
    }
}

impl PyNoiseSchedule {
    fn check(&self, t: usize, lo: usize) -> PyResult<()> {
        if t < lo || t > self.0.len() {
            return Err(PyValueError::new_err(format!("t = {t} outside {lo}..={}", self.0.len())));
        }
        Ok(())
    }
}

#[pyclass(name = "SchedulerCoefficients", module = "pmm", frozen)]
struct PyCoefficients(diffusion::SchedulerCoefficients);

#[pymethods]
impl PyCoefficients {
    #[new]
    fn new(schedule: &PyNoiseSchedule, variant: &str) -> PyResult<Self> {
        Ok(Self(diffusion::variant_coefficients(&schedule.0, parse_variant(variant)?)))
    }

    fn __len__(&self) -> usize {
        self.0.n()
    }

    /// `(a_t, b_t, σ_t)` for the step that leaves index `t`.
    fn triple(&self, t: usize) -> PyResult<(f64, f64, f64)> {
        if t == 0 || t > self.0.n() {
            return Err(PyValueError::new_err(format!("t = {t} outside 1..={}", self.0.n())));
        }
        Ok((self.0.a(t), self.0.b(t), self.0.sigma(t)))
    }
}

/// Standard-quadratic potential, or one whose gradient is a Python callable
/// `grad(x: list[float]) -> list[float]`.
fn make_potential(dim: usize, grad: Option<Py<PyAny>>) -> Arc<dyn Potential> {
    match grad {
        None => Arc::new(IsotropicQuadratic::standard(dim)),
        Some(f) => Arc::new(FnPotential::new(dim, move |x: &[f64], out: &mut [f64]| {
            Python::attach(|py| {
                let v: Vec<f64> = f
                    .call1(py, (x.to_vec(),))
                    .and_then(|r| r.extract(py))
                    .unwrap_or_else(|e| {
                        e.print(py);
                        vec![f64::NAN; x.len()]
                    });
                for (o, g) in out.iter_mut().zip(v.iter().chain(std::iter::repeat(&f64::NAN))) {
                    *o = *g;
                }
            })
        })),
    }
}

/// Run a Poisson-midpoint Langevin chain and return the recorded states.
///
/// Overdamped when `gamma` is `None`; otherwise underdamped with the state
/// `[position, velocity]`. `k = 1` gives plain LMC.
#[pyfunction]
#[pyo3(signature = (x0, alpha, k, option, steps, seed, gamma=None, grad=None, stride=1))]
#[allow(clippy::too_many_arguments)]
fn plmc_chain(
    x0: Vec<f64>,
    alpha: f64,
    k: usize,
    option: &str,
    steps: u64,
    seed: u64,
    gamma: Option<f64>,
    grad: Option<Py<PyAny>>,
    stride: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let option = parse_option(option)?;
    let (fam, drift): (Box<dyn TransitionFamily>, Box<dyn DriftField>) = match gamma {
            None => {
                let d = x0.len();
                let p = make_potential(d, grad);
                (Box::new(OverdampedFamily::new(d)), Box::new(OverdampedDrift::new(p)))
            }
            Some(g) => {
                if !x0.len().is_multiple_of(2) {
                    return Err(PyValueError::new_err("underdamped x0 must be [position, velocity]"));
                }
                let d = x0.len() / 2;
                let p = make_potential(d, grad);
                (Box::new(UnderdampedFamily::new(d, g).map_err(py_err)?), Box::new(UnderdampedDrift::new(p)))
            }
        };
    let kernel = PlmcKernel::new(fam.as_ref(), PoissonMidpointConfig::new(k, option, alpha)).map_err(py_err)?;
    let mut cd = CountedDrift::new(drift.as_ref());
    let mut rng = RngStream::new(seed, 0);
    let states = langevin::run_plmc_chain(&kernel, &mut cd, &x0, steps, &mut rng, stride).map_err(py_err)?;
    Ok(states.into_iter().map(|s| s.x).collect())
}

/// Reverse diffusion from `N(0, I)` with the analytic mixture score.
///
/// `mixture` is a list of `(weight, mean, variance)`. Returns the terminal
/// samples and the score calls of each chain.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (schedule, variant, mixture, chains, seed, k=1, option="option2"))]
fn reverse_sample(
    py: Python<'_>,
    schedule: &PyNoiseSchedule,
    variant: &str,
    mixture: Vec<(f64, Vec<f64>, f64)>,
    chains: usize,
    seed: u64,
    k: usize,
    option: &str,
) -> PyResult<(Vec<Vec<f64>>, Vec<u64>)> {
    let coeffs = diffusion::variant_coefficients(&schedule.0, parse_variant(variant)?);
    let option = parse_option(option)?;
    let comps = mixture.into_iter().map(|(w, m, v)| MixtureComponent::isotropic(w, m, v)).collect();
    let oracle = ScoreOracle::new(GaussianMixture::new(comps).map_err(py_err)?, &schedule.0).map_err(py_err)?;
    py.detach(|| {
        let mut xs = Vec::with_capacity(chains);
        let mut calls = Vec::with_capacity(chains);
        for c in 0..chains {
            let mut rng = RngStream::new(seed, c as u64);
            let x = rng.gaussian_vec(oracle.dim());
            let mut sc = diffusion::CountedScore::new(&oracle);
            let (x, ledger) = diffusion::run_reverse(&coeffs, &mut sc, &x, k, option, &mut rng)?;
            xs.push(x);
            calls.push(ledger.score_calls);
        }
        Ok((xs, calls))
    })
    .map_err(py_err)
}

#[pyfunction]
fn expected_score_calls(n: usize, k: usize, option: &str) -> PyResult<f64> {
    Ok(diffusion::expected_score_calls(n, k, parse_option(option)?))
}

fn moments(mean: &[f64], cov: Vec<Vec<f64>>) -> PyResult<GaussianMoments> {
    let flat: Vec<f64> = cov.into_iter().flatten().collect();
    GaussianMoments::from_slices(mean, &flat).map_err(py_err)
}

#[pyfunction]
fn w2_gaussians(m1: Vec<f64>, c1: Vec<Vec<f64>>, m2: Vec<f64>, c2: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::w2_gaussians(&moments(&m1, c1)?, &moments(&m2, c2)?).map_err(py_err)
}

#[pyfunction]
fn kl_gaussians(m1: Vec<f64>, c1: Vec<Vec<f64>>, m2: Vec<f64>, c2: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::kl_gaussians(&moments(&m1, c1)?, &moments(&m2, c2)?).map_err(py_err)
}

#[pyfunction]
fn empirical_w2_1d(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let a = EmpiricalEnsemble::from_scalars(a).map_err(py_err)?;
    let b = EmpiricalEnsemble::from_scalars(b).map_err(py_err)?;
    metrics::empirical_w2_1d(&a, &b).map_err(py_err)
}

/// Energy-distance permutation test on two scalar samples. Returns
/// `(statistic, p_value, reject)`.
#[pyfunction]
#[pyo3(signature = (a, b, level=0.01, permutations=999, seed=0))]
fn energy_test(py: Python<'_>, a: Vec<f64>, b: Vec<f64>, level: f64, permutations: usize, seed: u64) -> PyResult<(f64, f64, bool)> {
    let a = EmpiricalEnsemble::from_scalars(a).map_err(py_err)?;
    let b = EmpiricalEnsemble::from_scalars(b).map_err(py_err)?;
    let t = py
        .detach(|| metrics::two_sample_energy_test(&a, &b, level, permutations, seed))
        .map_err(py_err)?;
    Ok((t.statistic, t.p_value, t.reject))
}

#[pyfunction]
fn list_scenarios() -> Vec<&'static str> {
    Scenario::ALL.iter().map(|s| s.name()).collect()
}

#[pyfunction]
fn default_config(scenario: &str) -> PyResult<String> {
    let s: Scenario = scenario.parse().map_err(py_err)?;
    Ok(ExperimentConfig::default_for(s).to_toml())
}

/// Run a scenario from its TOML config. Returns `(passed, csv)`.
#[pyfunction]
fn run_scenario(py: Python<'_>, config: &str) -> PyResult<(bool, String)> {
    let cfg = ExperimentConfig::from_toml_str(config).map_err(py_err)?;
    let report = py.detach(|| bench::run_scenario(&cfg)).map_err(py_err)?;
    Ok((report.passed(), report.to_csv_string()))
}

#[pymodule]
fn pmm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PyCoefficients>()?;
    m.add_function(wrap_pyfunction!(plmc_chain, m)?)?;
    m.add_function(wrap_pyfunction!(reverse_sample, m)?)?;
    m.add_function(wrap_pyfunction!(expected_score_calls, m)?)?;
    m.add_function(wrap_pyfunction!(w2_gaussians, m)?)?;
    m.add_function(wrap_pyfunction!(kl_gaussians, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_w2_1d, m)?)?;
    m.add_function(wrap_pyfunction!(energy_test, m)?)?;
    m.add_function(wrap_pyfunction!(list_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
