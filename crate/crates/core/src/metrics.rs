//! Closed-form Gaussian distances, empirical estimators and a permutation
//! two-sample test.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::rng::RngStream;

/// Eigenvalue clamp used for matrix square roots and PSD checks.
pub const EIGEN_TOL: f64 = 1e-10;

/// Mean and covariance of a Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    /// Validates symmetry (within `1e-12`, relative to the largest entry) and
    /// positive semidefiniteness (within [`EIGEN_TOL`]); the stored
    /// covariance is the symmetrized input.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NotPsd("non-finite entries".into()));
        }
        let scale = cov.amax().max(1.0);
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::NotPsd(format!("covariance asymmetric by {asym:e}")));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        if d > 0 {
            let min = SymmetricEigen::new(sym.clone()).eigenvalues.min();
            if min < -EIGEN_TOL * scale {
                return Err(Error::NotPsd(format!("eigenvalue {min:e}")));
            }
        }
        Ok(Self { mean, cov: sym })
    }

    pub fn from_slices(mean: &[f64], cov_row_major: &[f64]) -> Result<Self> {
        let d = mean.len();
        check_dim(d * d, cov_row_major.len())?;
        Self::new(
            DVector::from_row_slice(mean),
            DMatrix::from_row_slice(d, d, cov_row_major),
        )
    }

    /// `N(μ, σ²)` in one dimension.
    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::from_slices(&[mean], &[var])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetric PSD square root by eigendecomposition. Eigenvalues down to
/// `−tol·max(1, ‖m‖)` are clamped to zero; anything lower is an error.
pub fn sym_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let scale = sym.amax().max(1.0);
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -tol * scale {
            return Err(Error::NotPsd(format!("eigenvalue {v:e}")));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

fn clamped_sqrt_trace(m: &DMatrix<f64>) -> Result<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let scale = sym.amax().max(1.0);
    let vals = SymmetricEigen::new(sym).eigenvalues;
    let mut tr = 0.0;
    for v in vals.iter() {
        if *v < -EIGEN_TOL * scale {
            return Err(Error::NotPsd(format!("eigenvalue {v:e}")));
        }
        tr += v.max(0.0).sqrt();
    }
    Ok(tr)
}

/// 2-Wasserstein distance between two Gaussians.
pub fn w2_gaussians(p: &GaussianMoments, q: &GaussianMoments) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let s2 = sym_sqrt(&q.cov, EIGEN_TOL)?;
    let inner = &s2 * &p.cov * &s2;
    let cross = clamped_sqrt_trace(&inner)?;
    let dm = (&p.mean - &q.mean).norm_squared();
    let w2sq = dm + p.cov.trace() + q.cov.trace() - 2.0 * cross;
    Ok(w2sq.max(0.0).sqrt())
}

/// `KL(P ‖ Q)` between Gaussians.
pub fn kl_gaussians(p: &GaussianMoments, q: &GaussianMoments) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let d = p.dim() as f64;
    let cq = q
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DegenerateCovariance("Q covariance is singular".into()))?;
    let cp = p
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DegenerateCovariance("P covariance is singular".into()))?;
    let tr = cq.solve(&p.cov).trace();
    let dm = &q.mean - &p.mean;
    let maha = dm.dot(&cq.solve(&dm));
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let kl = 0.5 * (tr + maha - d + logdet(&cq.l()) - logdet(&cp.l()));
    Ok(kl.max(0.0))
}

/// Where an ensemble came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SeedLineage {
    pub seed: u64,
    /// Stream ids of the chains, in row order.
    pub streams: Vec<u64>,
}

/// `n` states in `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalEnsemble {
    n: usize,
    d: usize,
    samples: Vec<f64>,
    pub lineage: Option<SeedLineage>,
}

impl EmpiricalEnsemble {
    pub fn new(d: usize, samples: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::config("ensemble dimension must be positive"));
        }
        if !samples.len().is_multiple_of(d) {
            return Err(Error::config(format!(
                "{} values do not split into rows of length {d}",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::divergence(0, format!("non-finite sample in row {}", i / d)));
        }
        Ok(Self {
            n: samples.len() / d,
            d,
            samples,
            lineage: None,
        })
    }

    pub fn from_scalars(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(rows.len() * d);
        for r in rows {
            check_dim(d, r.len())?;
            flat.extend_from_slice(r);
        }
        Self::new(d, flat)
    }

    pub fn with_lineage(mut self, lineage: SeedLineage) -> Self {
        self.lineage = Some(lineage);
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.d..(i + 1) * self.d]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.samples.iter().skip(j).step_by(self.d).copied().collect()
    }
}

/// Sample moments together with their asymptotic standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub moments: GaussianMoments,
    pub mean_se: Vec<f64>,
    /// Standard error of each covariance entry.
    pub cov_se: DMatrix<f64>,
    pub n: usize,
}

/// Unbiased mean and covariance (divisor `n − 1`).
pub fn empirical_moments(e: &EmpiricalEnsemble) -> Result<MomentEstimate> {
    let (n, d) = (e.n(), e.d());
    if n < 2 {
        return Err(Error::config(format!("need at least 2 samples, got {n}")));
    }
    let nf = n as f64;
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        for (j, v) in e.row(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    mean /= nf;
    let mut cov: DMatrix<f64> = DMatrix::zeros(d, d);
    let mut fourth: DMatrix<f64> = DMatrix::zeros(d, d);
    let mut c = vec![0.0; d];
    for i in 0..n {
        for (j, v) in e.row(i).iter().enumerate() {
            c[j] = v - mean[j];
        }
        for a in 0..d {
            for b in a..d {
                let p = c[a] * c[b];
                cov[(a, b)] += p;
                fourth[(a, b)] += p * p;
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let biased = cov[(a, b)] / nf;
            let m4 = fourth[(a, b)] / nf;
            let se = ((m4 - biased * biased).max(0.0) / nf).sqrt();
            let unbiased = cov[(a, b)] / (nf - 1.0);
            cov[(a, b)] = unbiased;
            cov[(b, a)] = unbiased;
            fourth[(a, b)] = se;
            fourth[(b, a)] = se;
        }
    }
    let mean_se = (0..d).map(|j| (cov[(j, j)] / nf).sqrt()).collect();
    Ok(MomentEstimate {
        moments: GaussianMoments { mean, cov },
        mean_se,
        cov_se: fourth,
        n,
    })
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Squared 2-Wasserstein distance between the empirical quantile functions
/// of two sorted samples. Exact for any sizes: the integral over `u ∈ (0,1)`
/// is split at every breakpoint `i/n_a` and `j/n_b`.
fn w2sq_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        return a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / na as f64;
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        let diff = a[i] - b[j];
        acc += (next - u) * diff * diff;
        u = next;
        if ua <= ub {
            i += 1;
        }
        if ub <= ua {
            j += 1;
        }
    }
    acc
}

/// Empirical 2-Wasserstein distance between one-dimensional ensembles via
/// the order-statistics coupling. Ensembles with `d ≠ 1` should go through
/// [`sliced_w2`].
pub fn empirical_w2_1d(a: &EmpiricalEnsemble, b: &EmpiricalEnsemble) -> Result<f64> {
    check_dim(1, a.d())?;
    check_dim(1, b.d())?;
    if a.n() == 0 || b.n() == 0 {
        return Err(Error::config("empty ensemble"));
    }
    Ok(w2sq_sorted(&sorted(a.samples()), &sorted(b.samples())).sqrt())
}

/// Sliced 2-Wasserstein distance: root mean of the squared 1-d distances
/// along `n_dirs` random unit directions.
pub fn sliced_w2(
    a: &EmpiricalEnsemble,
    b: &EmpiricalEnsemble,
    n_dirs: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    check_dim(a.d(), b.d())?;
    if n_dirs == 0 {
        return Err(Error::config("need at least one direction"));
    }
    if a.d() == 1 {
        return empirical_w2_1d(a, b);
    }
    let project = |e: &EmpiricalEnsemble, dir: &[f64]| -> Vec<f64> {
        (0..e.n())
            .map(|i| e.row(i).iter().zip(dir).map(|(x, u)| x * u).sum())
            .collect()
    };
    let mut total = 0.0;
    for _ in 0..n_dirs {
        let mut dir = rng.gaussian_vec(a.d());
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        total += w2sq_sorted(&sorted(&project(a, &dir)), &sorted(&project(b, &dir)));
    }
    Ok((total / n_dirs as f64).sqrt())
}

/// Result of the energy-distance permutation test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTest {
    /// Energy distance `2E|X−Y| − E|X−X'| − E|Y−Y'|` (V-statistic).
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// `Σ_{x∈a, y∈b} |x − y|` for sorted one-dimensional samples.
fn cross_abs_sum(a: &[f64], b: &[f64]) -> f64 {
    let total_b: f64 = b.iter().sum();
    let mut prefix = 0.0;
    let mut j = 0;
    let mut acc = 0.0;
    for &x in a {
        while j < b.len() && b[j] <= x {
            prefix += b[j];
            j += 1;
        }
        let below = j as f64;
        let above = (b.len() - j) as f64;
        acc += x * below - prefix + (total_b - prefix) - x * above;
    }
    acc
}

/// Energy distance of a labelling of the sorted pool in one pass.
fn labelled_energy_1d(pool: &[f64], in_a: &[bool], na: usize, nb: usize) -> f64 {
    // Unordered within-group pair sums via running prefix sums.
    let (mut ca, mut cb) = (0.0f64, 0.0f64);
    let (mut sa, mut sb) = (0.0f64, 0.0f64);
    let (mut wa, mut wb) = (0.0f64, 0.0f64);
    let mut total = 0.0;
    let mut st = 0.0;
    for (k, (&z, &lab)) in pool.iter().zip(in_a).enumerate() {
        total += z * k as f64 - st;
        st += z;
        if lab {
            wa += z * ca - sa;
            ca += 1.0;
            sa += z;
        } else {
            wb += z * cb - sb;
            cb += 1.0;
            sb += z;
        }
    }
    let cross = total - wa - wb;
    let (na, nb) = (na as f64, nb as f64);
    2.0 * cross / (na * nb) - 2.0 * wa / (na * na) - 2.0 * wb / (nb * nb)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Two-sample energy-distance test with a permutation p-value
/// `(1 + #{perm ≥ observed}) / (P + 1)`. Permutations are drawn from the
/// stream `(seed, 0)`, so the outcome is a function of the inputs and seed.
///
/// One-dimensional samples cost `O(n)` per permutation; higher dimensions
/// use the pooled distance matrix and cost `O(n²)`.
pub fn two_sample_energy_test(
    a: &EmpiricalEnsemble,
    b: &EmpiricalEnsemble,
    level: f64,
    n_permutations: usize,
    seed: u64,
) -> Result<EnergyTest> {
    check_dim(a.d(), b.d())?;
    let (na, nb) = (a.n(), b.n());
    if na < 2 || nb < 2 {
        return Err(Error::config("each sample needs at least 2 points"));
    }
    let mut rng = RngStream::new(seed, 0);
    let n = na + nb;
    let mut labels: Vec<bool> = (0..n).map(|i| i < na).collect();
    let shuffle = |labels: &mut Vec<bool>, rng: &mut RngStream| {
        for i in (1..labels.len()).rev() {
            let j = rng.uniform_index(0, i + 1);
            labels.swap(i, j);
        }
    };

    let (statistic, observed, perms): (f64, f64, Vec<f64>) = if a.d() == 1 {
        let sa = sorted(a.samples());
        let sb = sorted(b.samples());
        let (fa, fb) = (na as f64, nb as f64);
        let stat = 2.0 * cross_abs_sum(&sa, &sb) / (fa * fb)
            - cross_abs_sum(&sa, &sa) / (fa * fa)
            - cross_abs_sum(&sb, &sb) / (fb * fb);
        // sorted pool with original group labels
        let mut pool: Vec<(f64, bool)> = a
            .samples()
            .iter()
            .map(|&v| (v, true))
            .chain(b.samples().iter().map(|&v| (v, false)))
            .collect();
        pool.sort_by(|x, y| x.0.total_cmp(&y.0));
        let values: Vec<f64> = pool.iter().map(|p| p.0).collect();
        let orig: Vec<bool> = pool.iter().map(|p| p.1).collect();
        let observed = labelled_energy_1d(&values, &orig, na, nb);
        let perms = (0..n_permutations)
            .map(|_| {
                shuffle(&mut labels, &mut rng);
                labelled_energy_1d(&values, &labels, na, nb)
            })
            .collect();
        (stat, observed, perms)
    } else {
        let rows: Vec<&[f64]> = (0..na).map(|i| a.row(i)).chain((0..nb).map(|i| b.row(i))).collect();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = euclid(rows[i], rows[j]);
                dist[i * n + j] = v;
                dist[j * n + i] = v;
            }
        }
        let energy = |lab: &[bool]| {
            let (mut wa, mut wb, mut cr) = (0.0, 0.0, 0.0);
            for i in 0..n {
                for j in (i + 1)..n {
                    let v = dist[i * n + j];
                    match (lab[i], lab[j]) {
                        (true, true) => wa += v,
                        (false, false) => wb += v,
                        _ => cr += v,
                    }
                }
            }
            let (fa, fb) = (na as f64, nb as f64);
            2.0 * cr / (fa * fb) - 2.0 * wa / (fa * fa) - 2.0 * wb / (fb * fb)
        };
        let observed = energy(&labels);
        let perms = (0..n_permutations)
            .map(|_| {
                shuffle(&mut labels, &mut rng);
                energy(&labels)
            })
            .collect();
        (observed, observed, perms)
    };

    let slack = 1e-12 * observed.abs().max(f64::MIN_POSITIVE);
    let exceed = perms.iter().filter(|&&p| p >= observed - slack).count();
    let p_value = (1 + exceed) as f64 / (n_permutations + 1) as f64;
    let statistic = statistic.max(0.0);
    Ok(EnergyTest {
        statistic,
        p_value,
        reject: statistic > 0.0 && p_value < level,
    })
}

/// Total variation between histograms of two 1-d ensembles on a shared
/// binning of the pooled range.
pub fn histogram_tv(a: &EmpiricalEnsemble, b: &EmpiricalEnsemble, bins: usize) -> Result<f64> {
    check_dim(1, a.d())?;
    check_dim(1, b.d())?;
    if bins == 0 {
        return Err(Error::config("need at least one bin"));
    }
    if a.n() == 0 || b.n() == 0 {
        return Err(Error::config("empty ensemble"));
    }
    let all = a.samples().iter().chain(b.samples());
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let bin_of = |v: f64| -> usize {
        if width == 0.0 {
            0
        } else {
            (((v - lo) / width) as usize).min(bins - 1)
        }
    };
    let mut ha = vec![0.0; bins];
    let mut hb = vec![0.0; bins];
    for &v in a.samples() {
        ha[bin_of(v)] += 1.0;
    }
    for &v in b.samples() {
        hb[bin_of(v)] += 1.0;
    }
    let (fa, fb) = (a.n() as f64, b.n() as f64);
    let tv = 0.5 * ha.iter().zip(&hb).map(|(p, q)| (p / fa - q / fb).abs()).sum::<f64>();
    Ok(tv.clamp(0.0, 1.0))
}

/// One row of a metric table.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    pub n: u64,
}

/// Write `metric,value,stderr,n` rows.
pub fn write_metric_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io {
        path: "<metric table>".into(),
        message: e.to_string(),
    };
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<metric table>".into(),
        message: e.to_string(),
    })
}

pub fn write_metric_csv_file(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_metric_csv(f, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(m: f64, v: f64) -> GaussianMoments {
        GaussianMoments::scalar(m, v).unwrap()
    }

    #[test]
    fn w2_trivial_cases() {
        let p = scalar(0.3, 2.0);
        assert!(w2_gaussians(&p, &p).unwrap() < 1e-12);
        assert!((w2_gaussians(&scalar(0.0, 4.0), &scalar(0.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let q = GaussianMoments::from_slices(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(w2_gaussians(&p, &q), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn kl_cases() {
        let p = scalar(0.0, 1.0);
        assert_eq!(kl_gaussians(&p, &p).unwrap(), 0.0);
        assert!((kl_gaussians(&p, &scalar(0.1, 1.0)).unwrap() - 0.005).abs() < 1e-15);
        let s: f64 = 0.01;
        let want = 0.5 * (s - s.ln_1p());
        assert!((kl_gaussians(&scalar(0.0, 1.0 + s), &p).unwrap() - want).abs() < 1e-15);
        assert!((want - 2.48346e-5).abs() < 1e-9);
        assert!(matches!(
            kl_gaussians(&p, &scalar(0.0, 0.0)),
            Err(Error::DegenerateCovariance(_))
        ));
    }

    #[test]
    fn moments_validation() {
        assert!(GaussianMoments::from_slices(&[0.0, 0.0], &[1.0, 0.5, 0.4, 1.0]).is_err());
        assert!(GaussianMoments::from_slices(&[0.0, 0.0], &[1.0, 2.0, 2.0, 1.0]).is_err());
        // tiny negative eigenvalue is clamped away
        assert!(GaussianMoments::from_slices(&[0.0], &[-1e-13]).is_ok());
    }

    #[test]
    fn sym_sqrt_squares_back() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let r = sym_sqrt(&m, EIGEN_TOL).unwrap();
        assert!((&r * &r - &m).amax() < 1e-12);
        let bad = DMatrix::from_row_slice(1, 1, &[-1.0]);
        assert!(matches!(sym_sqrt(&bad, EIGEN_TOL), Err(Error::NotPsd(_))));
    }

    #[test]
    fn moments_examples() {
        let e = EmpiricalEnsemble::from_scalars(vec![0.0, 0.0]).unwrap();
        let m = empirical_moments(&e).unwrap();
        assert_eq!(m.moments.mean[0], 0.0);
        assert_eq!(m.moments.cov[(0, 0)], 0.0);
        let e = EmpiricalEnsemble::from_scalars(vec![-1.0, 1.0]).unwrap();
        let m = empirical_moments(&e).unwrap();
        assert_eq!(m.moments.mean[0], 0.0);
        assert_eq!(m.moments.cov[(0, 0)], 2.0);
        let one = EmpiricalEnsemble::from_scalars(vec![1.0]).unwrap();
        assert!(empirical_moments(&one).is_err());
        assert!(EmpiricalEnsemble::from_scalars(vec![f64::NAN]).is_err());
    }

    #[test]
    fn moments_clt() {
        let mut rng = RngStream::new(11, 0);
        let e = EmpiricalEnsemble::new(3, rng.gaussian_vec(3_000_000)).unwrap();
        let m = empirical_moments(&e).unwrap();
        for j in 0..3 {
            assert!(m.moments.mean[j].abs() <= 4.0 / 1000.0);
            for k in 0..3 {
                let want = if j == k { 1.0 } else { 0.0 };
                assert!((m.moments.cov[(j, k)] - want).abs() <= 0.01);
            }
            assert!((m.mean_se[j] - 1e-3).abs() < 1e-5);
            // var of z² is 2
            assert!((m.cov_se[(j, j)] - (2.0f64 / 1e6).sqrt()).abs() < 5e-5);
        }
    }

    #[test]
    fn w2_1d_examples() {
        let a = EmpiricalEnsemble::from_scalars(vec![0.0, 1.0]).unwrap();
        let b = EmpiricalEnsemble::from_scalars(vec![2.0, 1.0]).unwrap();
        assert_eq!(empirical_w2_1d(&a, &a).unwrap(), 0.0);
        assert_eq!(empirical_w2_1d(&a, &b).unwrap(), 1.0);
        let two = EmpiricalEnsemble::new(2, vec![0.0; 4]).unwrap();
        assert!(empirical_w2_1d(&two, &two).is_err());

        let mut rng = RngStream::new(3, 0);
        let n = 100_000;
        let xa = EmpiricalEnsemble::from_scalars(rng.gaussian_vec(n)).unwrap();
        let xb: Vec<f64> = rng.gaussian_vec(n).into_iter().map(|v| 2.0 * v).collect();
        let xb = EmpiricalEnsemble::from_scalars(xb).unwrap();
        assert!((empirical_w2_1d(&xa, &xb).unwrap() - 1.0).abs() < 0.02);
    }

    #[test]
    fn w2_unequal_sizes_is_quantile_integral() {
        // {0} vs {0, 2}: quantile difference is 0 on (0, ½) and 2 on (½, 1)
        let a = EmpiricalEnsemble::from_scalars(vec![0.0]).unwrap();
        let b = EmpiricalEnsemble::from_scalars(vec![2.0, 0.0]).unwrap();
        assert!((empirical_w2_1d(&a, &b).unwrap() - 2.0f64.sqrt()).abs() < 1e-15);
        // duplicating every point leaves the distance unchanged
        let c = EmpiricalEnsemble::from_scalars(vec![0.3, -1.0, 2.0]).unwrap();
        let d = EmpiricalEnsemble::from_scalars(vec![0.0, 0.5]).unwrap();
        let dd = EmpiricalEnsemble::from_scalars(vec![0.0, 0.5, 0.0, 0.5, 0.0, 0.5]).unwrap();
        let w1 = empirical_w2_1d(&c, &d).unwrap();
        let w2 = empirical_w2_1d(&c, &dd).unwrap();
        assert!((w1 - w2).abs() < 1e-14);
    }

    #[test]
    fn energy_identical_never_rejects() {
        let mut rng = RngStream::new(1, 0);
        let a = EmpiricalEnsemble::from_scalars(rng.gaussian_vec(200)).unwrap();
        let t = two_sample_energy_test(&a, &a, 0.01, 199, 5).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert!(!t.reject);
    }

    #[test]
    fn energy_labelled_pass_matches_direct_sum() {
        let mut rng = RngStream::new(2, 0);
        let a = rng.gaussian_vec(37);
        let b = rng.gaussian_vec(23);
        let direct = |x: &[f64], y: &[f64]| -> f64 {
            x.iter().map(|u| y.iter().map(|v| (u - v).abs()).sum::<f64>()).sum()
        };
        let want = 2.0 * direct(&a, &b) / (37.0 * 23.0)
            - direct(&a, &a) / (37.0 * 37.0)
            - direct(&b, &b) / (23.0 * 23.0);
        let mut pool: Vec<(f64, bool)> =
            a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
        pool.sort_by(|x, y| x.0.total_cmp(&y.0));
        let vals: Vec<f64> = pool.iter().map(|p| p.0).collect();
        let labs: Vec<bool> = pool.iter().map(|p| p.1).collect();
        assert!((labelled_energy_1d(&vals, &labs, 37, 23) - want).abs() < 1e-12);
        let sa = sorted(&a);
        let sb = sorted(&b);
        assert!((cross_abs_sum(&sa, &sb) - direct(&a, &b)).abs() < 1e-10);

        // the d > 1 path agrees on 1-d data embedded in R²
        let ea = EmpiricalEnsemble::new(2, a.iter().flat_map(|&v| [v, 0.0]).collect()).unwrap();
        let eb = EmpiricalEnsemble::new(2, b.iter().flat_map(|&v| [v, 0.0]).collect()).unwrap();
        let t2 = two_sample_energy_test(&ea, &eb, 0.05, 0, 0).unwrap();
        assert!((t2.statistic - want).abs() < 1e-12);
    }

    #[test]
    fn energy_power() {
        let mut rng = RngStream::new(4, 0);
        let a = EmpiricalEnsemble::from_scalars(rng.gaussian_vec(1000)).unwrap();
        let b: Vec<f64> = rng.gaussian_vec(1000).into_iter().map(|v| v + 1.0).collect();
        let b = EmpiricalEnsemble::from_scalars(b).unwrap();
        let t = two_sample_energy_test(&a, &b, 0.01, 199, 0).unwrap();
        assert!(t.reject);
        assert!((t.p_value - 1.0 / 200.0).abs() < 1e-15);
    }

    #[test]
    fn tv_cases() {
        let a = EmpiricalEnsemble::from_scalars(vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(histogram_tv(&a, &a, 10).unwrap(), 0.0);
        let b = EmpiricalEnsemble::from_scalars(vec![10.0, 11.0]).unwrap();
        assert_eq!(histogram_tv(&a, &b, 10).unwrap(), 1.0);
        let c = EmpiricalEnsemble::from_scalars(vec![3.0, 3.0]).unwrap();
        assert_eq!(histogram_tv(&c, &c, 5).unwrap(), 0.0);
    }

    #[test]
    fn tv_gaussian_shift() {
        // ½∫|φ(x) − φ(x − ½)| dx = 2Φ(¼) − 1
        let want = 2.0 * 0.598_706_325_683_923 - 1.0;
        let mut rng = RngStream::new(8, 0);
        let a = EmpiricalEnsemble::from_scalars(rng.gaussian_vec(1_000_000)).unwrap();
        let b: Vec<f64> = rng.gaussian_vec(1_000_000).into_iter().map(|v| v + 0.5).collect();
        let b = EmpiricalEnsemble::from_scalars(b).unwrap();
        let tv = histogram_tv(&a, &b, 200).unwrap();
        assert!((tv - want).abs() < 0.01, "{tv} vs {want}");
        assert!((want - 0.197).abs() < 1e-3);
    }

    #[test]
    fn csv_rows() {
        let mut buf = Vec::new();
        write_metric_csv(
            &mut buf,
            &[MetricRow {
                metric: "w2".into(),
                value: 0.5,
                stderr: 0.01,
                n: 10,
            }],
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "metric,value,stderr,n\nw2,0.5,0.01,10\n");
    }
}
