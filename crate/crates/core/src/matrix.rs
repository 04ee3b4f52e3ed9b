//! Structured linear maps used by transition families.
//!
//! The overdamped family only ever needs `c·I`, and the underdamped family
//! only needs 2×2 blocks of scalars acting on the `[position; velocity]`
//! split of the state. Both are stored as O(1) scalars; `Dense` covers
//! anything else.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Negative-eigenvalue tolerance for covariance factors; values in
/// `[-PSD_TOL, 0]` are clamped to zero.
pub const PSD_TOL: f64 = 1e-12;

/// A 2×2 block matrix `[[m00·I, m01·I], [m10·I, m11·I]]` acting on `[u; v]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block2(pub [[f64; 2]; 2]);

impl Block2 {
    pub const IDENTITY: Block2 = Block2([[1.0, 0.0], [0.0, 1.0]]);
    pub const ZERO: Block2 = Block2([[0.0, 0.0], [0.0, 0.0]]);

    pub fn mul(&self, o: &Block2) -> Block2 {
        let a = &self.0;
        let b = &o.0;
        Block2([
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ])
    }

    pub fn add(&self, o: &Block2) -> Block2 {
        let mut r = self.0;
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += o.0[i][j];
            }
        }
        Block2(r)
    }

    pub fn scale(&self, s: f64) -> Block2 {
        let mut r = self.0;
        for row in r.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        Block2(r)
    }

    pub fn transpose(&self) -> Block2 {
        let a = &self.0;
        Block2([[a[0][0], a[1][0]], [a[0][1], a[1][1]]])
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Inverse of a lower-triangular block; `None` when a diagonal entry is zero.
    pub fn lower_inverse(&self) -> Option<Block2> {
        let [[l00, _], [l10, l11]] = self.0;
        if l00 == 0.0 || l11 == 0.0 {
            return None;
        }
        Some(Block2([
            [1.0 / l00, 0.0],
            [-l10 / (l00 * l11), 1.0 / l11],
        ]))
    }
}

/// Structure tag of a transition family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    ScalarOverdamped,
    BlockUnderdamped,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StructuredMatrix {
    /// `c·I` of the ambient dimension.
    Scalar(f64),
    /// Block matrix over the `[u; v]` halves of the state.
    Block(Block2),
    Dense(DMatrix<f64>),
}

impl StructuredMatrix {
    pub fn identity(structure: Structure, dim: usize) -> Self {
        match structure {
            Structure::ScalarOverdamped => StructuredMatrix::Scalar(1.0),
            Structure::BlockUnderdamped => StructuredMatrix::Block(Block2::IDENTITY),
            Structure::Dense => StructuredMatrix::Dense(DMatrix::identity(dim, dim)),
        }
    }

    pub fn zero(structure: Structure, dim: usize) -> Self {
        match structure {
            Structure::ScalarOverdamped => StructuredMatrix::Scalar(0.0),
            Structure::BlockUnderdamped => StructuredMatrix::Block(Block2::ZERO),
            Structure::Dense => StructuredMatrix::Dense(DMatrix::zeros(dim, dim)),
        }
    }

    /// `out = M x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), out.len());
        match self {
            StructuredMatrix::Scalar(c) => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = c * xi;
                }
            }
            StructuredMatrix::Block(b) => {
                let d = x.len() / 2;
                let [[m00, m01], [m10, m11]] = b.0;
                let (xu, xv) = x.split_at(d);
                let (ou, ov) = out.split_at_mut(d);
                for i in 0..d {
                    ou[i] = m00 * xu[i] + m01 * xv[i];
                    ov[i] = m10 * xu[i] + m11 * xv[i];
                }
            }
            StructuredMatrix::Dense(m) => {
                for (r, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (c, xi) in x.iter().enumerate() {
                        acc += m[(r, c)] * xi;
                    }
                    *o = acc;
                }
            }
        }
    }

    /// `out += M x`, computed as `out[i] + (M x)[i]` so it rounds exactly
    /// like [`apply`](Self::apply) followed by an elementwise add.
    pub fn apply_add(&self, x: &[f64], out: &mut [f64]) {
        match self {
            StructuredMatrix::Scalar(c) => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o += c * xi;
                }
            }
            StructuredMatrix::Block(b) => {
                let d = x.len() / 2;
                let [[m00, m01], [m10, m11]] = b.0;
                let (xu, xv) = x.split_at(d);
                let (ou, ov) = out.split_at_mut(d);
                for i in 0..d {
                    ou[i] += m00 * xu[i] + m01 * xv[i];
                    ov[i] += m10 * xu[i] + m11 * xv[i];
                }
            }
            StructuredMatrix::Dense(_) => {
                let mut tmp = vec![0.0; out.len()];
                self.apply(x, &mut tmp);
                for (o, t) in out.iter_mut().zip(tmp) {
                    *o += t;
                }
            }
        }
    }

    pub fn mul(&self, other: &StructuredMatrix) -> StructuredMatrix {
        use StructuredMatrix::*;
        match (self, other) {
            (Scalar(a), Scalar(b)) => Scalar(a * b),
            (Scalar(a), Block(b)) | (Block(b), Scalar(a)) => Block(b.scale(*a)),
            (Block(a), Block(b)) => Block(a.mul(b)),
            (Scalar(a), Dense(m)) | (Dense(m), Scalar(a)) => Dense(m * *a),
            (Dense(a), Dense(b)) => Dense(a * b),
            (Block(_), Dense(_)) | (Dense(_), Block(_)) => {
                let n = self.dense_dim().or(other.dense_dim()).unwrap_or(0);
                Dense(self.to_dense(n) * other.to_dense(n))
            }
        }
    }

    pub fn add(&self, other: &StructuredMatrix) -> StructuredMatrix {
        use StructuredMatrix::*;
        match (self, other) {
            (Scalar(a), Scalar(b)) => Scalar(a + b),
            (Block(a), Block(b)) => Block(a.add(b)),
            (Scalar(a), Block(b)) | (Block(b), Scalar(a)) => {
                Block(b.add(&Block2::IDENTITY.scale(*a)))
            }
            (Dense(a), Dense(b)) => Dense(a + b),
            _ => {
                let n = self.dense_dim().or(other.dense_dim()).unwrap_or(0);
                Dense(self.to_dense(n) + other.to_dense(n))
            }
        }
    }

    pub fn transpose(&self) -> StructuredMatrix {
        match self {
            StructuredMatrix::Scalar(c) => StructuredMatrix::Scalar(*c),
            StructuredMatrix::Block(b) => StructuredMatrix::Block(b.transpose()),
            StructuredMatrix::Dense(m) => StructuredMatrix::Dense(m.transpose()),
        }
    }

    /// Largest absolute entry of the full (expanded) matrix.
    pub fn max_abs(&self) -> f64 {
        match self {
            StructuredMatrix::Scalar(c) => c.abs(),
            StructuredMatrix::Block(b) => b.max_abs(),
            StructuredMatrix::Dense(m) => m.amax(),
        }
    }

    /// `‖self − other‖_max` over the expanded matrices.
    pub fn max_abs_diff(&self, other: &StructuredMatrix) -> f64 {
        self.add(&other.mul(&StructuredMatrix::Scalar(-1.0))).max_abs()
    }

    fn dense_dim(&self) -> Option<usize> {
        match self {
            StructuredMatrix::Dense(m) => Some(m.nrows()),
            _ => None,
        }
    }

    /// Expand to a dense `dim × dim` matrix.
    pub fn to_dense(&self, dim: usize) -> DMatrix<f64> {
        match self {
            StructuredMatrix::Scalar(c) => DMatrix::identity(dim, dim) * *c,
            StructuredMatrix::Block(b) => {
                let d = dim / 2;
                let mut m = DMatrix::zeros(dim, dim);
                for i in 0..d {
                    m[(i, i)] = b.0[0][0];
                    m[(i, d + i)] = b.0[0][1];
                    m[(d + i, i)] = b.0[1][0];
                    m[(d + i, d + i)] = b.0[1][1];
                }
                m
            }
            StructuredMatrix::Dense(m) => m.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            StructuredMatrix::Scalar(c) => c.is_finite(),
            StructuredMatrix::Block(b) => b.0.iter().flatten().all(|v| v.is_finite()),
            StructuredMatrix::Dense(m) => m.iter().all(|v| v.is_finite()),
        }
    }
}

/// Lower-triangular factor `L` with `L Lᵀ = Γ²` for a structured PSD matrix.
///
/// Scalar: `√c`. Block: per-coordinate 2×2 Cholesky of `[[c1, c2], [c2, c3]]`,
/// with a zero first pivot allowed only when `c2 = 0`. Dense: eigenvalue
/// clamped square root folded into a Cholesky factor.
pub fn factor_noise_covariance(cov: &StructuredMatrix) -> Result<StructuredMatrix> {
    match cov {
        StructuredMatrix::Scalar(c) => Ok(StructuredMatrix::Scalar(clamp_nonneg(*c, "scalar")?.sqrt())),
        StructuredMatrix::Block(b) => {
            let [[c1, c2], [c2b, c3]] = b.0;
            if (c2 - c2b).abs() > PSD_TOL * 1.0_f64.max(b.max_abs()) {
                return Err(Error::NotPsd(format!("block is not symmetric: {c2} vs {c2b}")));
            }
            let c1 = clamp_nonneg(c1, "c1")?;
            if c1 == 0.0 {
                if c2 != 0.0 {
                    return Err(Error::DegenerateCovariance(format!(
                        "zero leading variance with off-diagonal {c2}"
                    )));
                }
                let l11 = clamp_nonneg(c3, "c3")?.sqrt();
                return Ok(StructuredMatrix::Block(Block2([[0.0, 0.0], [0.0, l11]])));
            }
            let l00 = c1.sqrt();
            let l10 = c2 / l00;
            let schur = clamp_nonneg(c3 - c2 * c2 / c1, "Schur complement c3 - c2^2/c1")?;
            Ok(StructuredMatrix::Block(Block2([[l00, 0.0], [l10, schur.sqrt()]])))
        }
        StructuredMatrix::Dense(m) => dense_factor(m).map(StructuredMatrix::Dense),
    }
}

fn clamp_nonneg(v: f64, what: &str) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::NotPsd(format!("{what} is not finite")));
    }
    if v < -PSD_TOL {
        return Err(Error::NotPsd(format!("{what} = {v:e} is negative")));
    }
    Ok(v.max(0.0))
}

fn dense_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        return Ok(ch.l());
    }
    // Semidefinite: take the clamped symmetric square root, then a QR of its
    // transpose gives a lower-triangular factor with the same Gram matrix.
    let root = crate::metrics::sym_sqrt(&sym, PSD_TOL.max(1e-10))?;
    let qr = root.transpose().qr();
    let r = qr.r();
    let mut l = r.transpose();
    for j in 0..l.ncols() {
        if l[(j, j)] < 0.0 {
            for i in 0..l.nrows() {
                l[(i, j)] = -l[(i, j)];
            }
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(c1: f64, c2: f64, c3: f64) -> StructuredMatrix {
        StructuredMatrix::Block(Block2([[c1, c2], [c2, c3]]))
    }

    #[test]
    fn diagonal_block_factor() {
        let f = factor_noise_covariance(&block(4.0, 0.0, 9.0)).unwrap();
        assert_eq!(f, StructuredMatrix::Block(Block2([[2.0, 0.0], [0.0, 3.0]])));
    }

    #[test]
    fn comonotone_block_factor() {
        let f = factor_noise_covariance(&block(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(f, StructuredMatrix::Block(Block2([[1.0, 0.0], [1.0, 0.0]])));
    }

    #[test]
    fn scalar_factor() {
        let f = factor_noise_covariance(&StructuredMatrix::Scalar(0.2)).unwrap();
        assert_eq!(f, StructuredMatrix::Scalar(0.2_f64.sqrt()));
    }

    #[test]
    fn degenerate_and_non_psd() {
        assert!(matches!(
            factor_noise_covariance(&block(0.0, 0.5, 1.0)),
            Err(Error::DegenerateCovariance(_))
        ));
        assert!(matches!(
            factor_noise_covariance(&block(1.0, 2.0, 1.0)),
            Err(Error::NotPsd(_))
        ));
        // tiny negative Schur complement clamps
        let f = factor_noise_covariance(&block(1.0, 1.0, 1.0 - 5e-13)).unwrap();
        if let StructuredMatrix::Block(b) = f {
            assert_eq!(b.0[1][1], 0.0);
        } else {
            panic!("wrong structure");
        }
    }

    #[test]
    fn dense_factor_recomposes() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 2.0, 0.5, 0.6, 0.5, 3.0]);
        let l = factor_noise_covariance(&StructuredMatrix::Dense(m.clone())).unwrap();
        let l = l.to_dense(3);
        assert!((&l * l.transpose() - &m).amax() < 1e-12);
        // rank deficient
        let v = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]);
        let m = &v * v.transpose();
        let l = factor_noise_covariance(&StructuredMatrix::Dense(m.clone()))
            .unwrap()
            .to_dense(3);
        assert!((&l * l.transpose() - &m).amax() < 1e-9);
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert!(l[(i, j)].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_apply_matches_dense() {
        let b = StructuredMatrix::Block(Block2([[1.0, 2.0], [3.0, 4.0]]));
        let x = [1.0, -1.0, 0.5, 2.0];
        let mut out = [0.0; 4];
        b.apply(&x, &mut out);
        let dense = b.to_dense(4) * nalgebra::DVector::from_row_slice(&x);
        for i in 0..4 {
            assert_eq!(out[i], dense[i]);
        }
    }

    #[test]
    fn lower_inverse_is_inverse() {
        let l = Block2([[2.0, 0.0], [0.5, 0.25]]);
        let inv = l.lower_inverse().unwrap();
        let p = l.mul(&inv);
        assert!((p.0[0][0] - 1.0).abs() < 1e-15);
        assert!((p.0[1][1] - 1.0).abs() < 1e-15);
        assert!(p.0[1][0].abs() < 1e-15);
    }
}
