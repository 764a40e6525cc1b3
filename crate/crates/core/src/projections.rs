//! Random projection matrices used to sketch the data.
//!
//! Entries are i.i.d. from a zero-mean law with finite fourth moment. Two laws
//! are supported: Gaussian, stored densely, and the sparse-Bernoulli law on
//! `{-1, 0, +1}` with probabilities `{1/(2s), 1 - 1/s, 1/(2s)}`, stored as
//! column-compressed row indices with a sign. Sparse values are exactly `±1`;
//! any scaling is carried analytically through the second moment.

use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::seed::rng_from_seed;

/// Entry law of a projection matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProjectionDistribution {
    Gaussian { variance: f64 },
    SparseBernoulli { s: f64 },
}

/// Second and fourth moments and the excess kurtosis of an entry law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mu2: f64,
    pub mu4: f64,
    pub kurtosis: f64,
}

impl ProjectionDistribution {
    pub fn gaussian(variance: f64) -> Result<Self> {
        let d = Self::Gaussian { variance };
        d.validate()?;
        Ok(d)
    }

    /// Gaussian with variance `1/p`, which keeps sketch norms comparable to data norms.
    pub fn gaussian_for_dim(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidParameter("p must be at least 1".into()));
        }
        Self::gaussian(1.0 / p as f64)
    }

    pub fn sparse_bernoulli(s: f64) -> Result<Self> {
        let d = Self::SparseBernoulli { s };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Gaussian { variance } if !(variance.is_finite() && variance > 0.0) => Err(
                Error::InvalidParameter(format!("gaussian variance must be positive, got {variance}")),
            ),
            Self::SparseBernoulli { s } if !(s.is_finite() && s >= 1.0) => Err(
                Error::InvalidParameter(format!("sparse-Bernoulli s must be >= 1, got {s}")),
            ),
            _ => Ok(()),
        }
    }

    /// Exact analytic moments of the entry law.
    pub fn moments(&self) -> Result<Moments> {
        self.validate()?;
        let (mu2, mu4) = match *self {
            Self::Gaussian { variance } => (variance, 3.0 * variance * variance),
            Self::SparseBernoulli { s } => (1.0 / s, 1.0 / s),
        };
        let kurtosis = match *self {
            // Avoid rounding in 3v^2 / v^2 - 3.
            Self::Gaussian { .. } => 0.0,
            Self::SparseBernoulli { s } => s - 3.0,
        };
        Ok(Moments { mu2, mu4, kurtosis })
    }

    pub fn kurtosis(&self) -> Result<f64> {
        Ok(self.moments()?.kurtosis)
    }

    /// `m * mu2`, the scale of `E[R R^T] = m mu2 I`.
    pub fn expected_gram_scale(&self, m: usize) -> Result<f64> {
        if m == 0 {
            return Err(Error::InvalidParameter("m must be at least 1".into()));
        }
        Ok(m as f64 * self.moments()?.mu2)
    }

    /// The law's parameter: `s` for sparse-Bernoulli, the variance for Gaussian.
    pub fn parameter(&self) -> f64 {
        match *self {
            Self::Gaussian { variance } => variance,
            Self::SparseBernoulli { s } => s,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian { .. } => "gaussian",
            Self::SparseBernoulli { .. } => "sparse",
        }
    }
}

/// Column-compressed storage of a `{-1, 0, +1}` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedCsc {
    col_ptr: Vec<usize>,
    rows: Vec<u32>,
    negative: Vec<bool>,
}

impl SignedCsc {
    /// Nonzeros of column `j` as `(row, sign)` pairs, rows strictly increasing.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        self.rows[range.clone()]
            .iter()
            .zip(&self.negative[range])
            .map(|(&r, &neg)| (r as usize, if neg { -1.0 } else { 1.0 }))
    }

    pub fn nnz(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    Dense(DMatrix<f64>),
    Sparse(SignedCsc),
}

/// One `p x m` random matrix `R`. A sketch of `x` is `R^T x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    p: usize,
    m: usize,
    seed: u64,
    dist: ProjectionDistribution,
    storage: Storage,
}

impl ProjectionMatrix {
    /// Draw a matrix with i.i.d. entries from `dist`. Deterministic in `seed`.
    pub fn sample(dist: ProjectionDistribution, p: usize, m: usize, seed: u64) -> Result<Self> {
        dist.validate()?;
        if p == 0 || m == 0 {
            return Err(Error::InvalidParameter(format!(
                "projection dimensions must be positive, got p={p}, m={m}"
            )));
        }
        if m > p {
            log::warn!("projection with m={m} > p={p}; sketch is not compressive");
        }
        if p > u32::MAX as usize {
            return Err(Error::InvalidParameter(format!("p={p} too large")));
        }
        let mut rng = rng_from_seed(seed);
        let storage = match dist {
            ProjectionDistribution::Gaussian { variance } => {
                let sd = variance.sqrt();
                Storage::Dense(DMatrix::from_fn(p, m, |_, _| {
                    sd * rng.sample::<f64, _>(StandardNormal)
                }))
            }
            ProjectionDistribution::SparseBernoulli { s } => {
                let keep = 1.0 / s;
                let negative_below = 0.5 / s;
                let mut col_ptr = Vec::with_capacity(m + 1);
                let mut rows = Vec::new();
                let mut negative = Vec::new();
                col_ptr.push(0);
                for _ in 0..m {
                    for i in 0..p {
                        let u: f64 = rng.random();
                        if u < keep {
                            rows.push(i as u32);
                            negative.push(u < negative_below);
                        }
                    }
                    col_ptr.push(rows.len());
                }
                Storage::Sparse(SignedCsc {
                    col_ptr,
                    rows,
                    negative,
                })
            }
        };
        Ok(Self {
            p,
            m,
            seed,
            dist,
            storage,
        })
    }

    /// Wrap an explicit matrix. `dist` declares the law whose second moment is
    /// used for normalization. Intended for tests and degenerate experiments
    /// (e.g. identity projections).
    pub fn from_dense(dist: ProjectionDistribution, matrix: DMatrix<f64>) -> Result<Self> {
        dist.validate()?;
        let (p, m) = matrix.shape();
        if p == 0 || m == 0 {
            return Err(Error::InvalidParameter("empty projection matrix".into()));
        }
        Ok(Self {
            p,
            m,
            seed: 0,
            dist,
            storage: Storage::Dense(matrix),
        })
    }

    /// The `p x p` identity declared with second moment `mu2`.
    pub fn identity(p: usize, mu2: f64) -> Result<Self> {
        Self::from_dense(
            ProjectionDistribution::Gaussian { variance: mu2 },
            DMatrix::identity(p, p),
        )
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dist(&self) -> ProjectionDistribution {
        self.dist
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    /// Stored nonzeros (all `p*m` entries for dense storage).
    pub fn nnz(&self) -> usize {
        match &self.storage {
            Storage::Dense(_) => self.p * self.m,
            Storage::Sparse(csc) => csc.nnz(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.storage {
            Storage::Dense(d) => d.clone(),
            Storage::Sparse(csc) => {
                let mut d = DMatrix::zeros(self.p, self.m);
                for j in 0..self.m {
                    for (i, v) in csc.column(j) {
                        d[(i, j)] = v;
                    }
                }
                d
            }
        }
    }

    /// `R^T x`.
    pub fn apply_transpose(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim("apply_transpose", self.p, x.len())?;
        let mut out = DVector::zeros(self.m);
        self.apply_transpose_into(x, out.as_mut_slice());
        Ok(out)
    }

    /// `out = R^T x` without dimension checks beyond debug assertions.
    pub(crate) fn apply_transpose_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.p);
        debug_assert_eq!(out.len(), self.m);
        match &self.storage {
            Storage::Dense(d) => {
                let mut o = DVectorViewMut::from_slice(out, self.m);
                o.gemv_tr(1.0, d, &DVectorView::from_slice(x, self.p), 0.0);
            }
            Storage::Sparse(csc) => {
                for (j, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (i, sign) in csc.column(j) {
                        acc += sign * x[i];
                    }
                    *o = acc;
                }
            }
        }
    }

    /// `R y`, the back-projection of a sketch.
    pub fn apply(&self, y: &[f64]) -> Result<DVector<f64>> {
        check_dim("apply", self.m, y.len())?;
        let mut out = DVector::zeros(self.p);
        self.apply_add(y, 1.0, out.as_mut_slice());
        Ok(out)
    }

    /// `out += alpha * R y`.
    pub(crate) fn apply_add(&self, y: &[f64], alpha: f64, out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.m);
        debug_assert_eq!(out.len(), self.p);
        match &self.storage {
            Storage::Dense(d) => {
                for (j, &yj) in y.iter().enumerate() {
                    let a = alpha * yj;
                    if a == 0.0 {
                        continue;
                    }
                    let col = &d.as_slice()[j * self.p..(j + 1) * self.p];
                    for (o, r) in out.iter_mut().zip(col) {
                        *o += a * r;
                    }
                }
            }
            Storage::Sparse(csc) => {
                for (j, &yj) in y.iter().enumerate() {
                    let a = alpha * yj;
                    for (i, sign) in csc.column(j) {
                        out[i] += sign * a;
                    }
                }
            }
        }
    }

    /// `R^T X` for a `p x n` matrix.
    pub fn transpose_mul(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("transpose_mul", self.p, x.nrows())?;
        let n = x.ncols();
        let mut out = DMatrix::zeros(self.m, n);
        match &self.storage {
            Storage::Dense(d) => out.gemm_tr(1.0, d, x, 0.0),
            Storage::Sparse(_) => {
                for c in 0..n {
                    let xc = x.column(c);
                    let mut oc = out.column_mut(c);
                    self.apply_transpose_into(xc.as_slice(), oc.as_mut_slice());
                }
            }
        }
        Ok(out)
    }

    /// `G += weight * R R^T` for a `p x p` accumulator.
    pub fn add_scaled_gram(&self, weight: f64, gram: &mut DMatrix<f64>) -> Result<()> {
        check_dim("add_scaled_gram", self.p, gram.nrows())?;
        check_dim("add_scaled_gram", self.p, gram.ncols())?;
        if weight == 0.0 {
            return Ok(());
        }
        match &self.storage {
            Storage::Dense(d) => gram.gemm(weight, d, &d.transpose(), 1.0),
            Storage::Sparse(csc) => {
                let mut nz: Vec<(usize, f64)> = Vec::new();
                for j in 0..self.m {
                    nz.clear();
                    nz.extend(csc.column(j));
                    for &(a, sa) in &nz {
                        let w = weight * sa;
                        for &(b, sb) in &nz {
                            gram[(a, b)] += w * sb;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Scalar multiply-adds spent by one `R^T x`.
    pub fn transpose_cost(&self) -> usize {
        self.nnz()
    }
}
