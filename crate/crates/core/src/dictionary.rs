use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Tolerance on atom norms after every update.
pub const UNIT_NORM_TOL: f64 = 1e-10;

/// A `p x K` matrix of unit-norm atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
}

impl Dictionary {
    /// Normalize each column; fails on a zero or non-finite column.
    pub fn from_columns(mut atoms: DMatrix<f64>) -> Result<Self> {
        if atoms.ncols() == 0 || atoms.nrows() == 0 {
            return Err(Error::InvalidParameter("dictionary must be non-empty".into()));
        }
        for (k, mut col) in atoms.column_iter_mut().enumerate() {
            let n = col.norm();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::InvalidParameter(format!("atom {k} has norm {n}")));
            }
            col /= n;
        }
        Ok(Self { atoms })
    }

    /// `K` atoms drawn uniformly on the unit sphere.
    pub fn random(p: usize, k: usize, seed: u64) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::InvalidParameter(format!(
                "dictionary dimensions must be positive, got p={p}, K={k}"
            )));
        }
        let mut rng = rng_from_seed(seed);
        loop {
            let m = DMatrix::from_fn(p, k, |_, _| rng.sample::<f64, _>(StandardNormal));
            if let Ok(d) = Self::from_columns(m) {
                return Ok(d);
            }
        }
    }

    pub fn p(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.atoms
    }

    pub fn atom(&self, k: usize) -> DVector<f64> {
        self.atoms.column(k).into_owned()
    }

    /// Replace atom `k` by `v` scaled to unit norm with canonical sign.
    pub(crate) fn set_atom(&mut self, k: usize, v: &DVector<f64>) {
        let mut v = v.clone();
        canonicalize(&mut v);
        self.atoms.set_column(k, &v);
    }

    /// Largest deviation of an atom norm from one.
    pub fn max_norm_error(&self) -> f64 {
        self.atoms
            .column_iter()
            .map(|c| (c.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Scale to unit norm and flip so the largest-magnitude entry is positive
/// (first such entry on ties). Returns false for a zero or non-finite vector.
pub fn canonicalize(v: &mut DVector<f64>) -> bool {
    let n = v.norm();
    if !(n > 0.0 && n.is_finite()) {
        return false;
    }
    *v /= n;
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_atoms_are_unit_norm_and_reproducible() {
        let a = Dictionary::random(20, 6, 3).unwrap();
        assert!(a.max_norm_error() < UNIT_NORM_TOL);
        assert_eq!(a, Dictionary::random(20, 6, 3).unwrap());
        assert_ne!(a, Dictionary::random(20, 6, 4).unwrap());
    }

    #[test]
    fn zero_column_rejected() {
        assert!(Dictionary::from_columns(DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn canonical_sign() {
        let mut v = DVector::from_column_slice(&[0.5, -2.0, 1.0]);
        assert!(canonicalize(&mut v));
        assert!(v[1] > 0.0 && v[0] < 0.0);
        assert!((v.norm() - 1.0).abs() < 1e-15);
        assert!(!canonicalize(&mut DVector::zeros(3)));
    }
}
