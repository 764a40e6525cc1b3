//! T-sparse coding of sketches against the equivalent dictionary `Psi = R^T D`.
//!
//! Columns of `Psi` are not unit norm even when the atoms are, so atom
//! selection uses normalized correlations `|<r, psi_j>| / ||psi_j||`. Atoms
//! whose norm falls below `1e-12` times the largest norm are never selected.
//! Ties go to the lowest atom index. Least squares on the active set uses a
//! Cholesky factor of the active Gram matrix that grows by one row per step.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::projections::ProjectionMatrix;

const NORM_FLOOR: f64 = 1e-12;
const EARLY_STOP: f64 = 1e-10;
/// Relative pivot below which a new atom is treated as linearly dependent.
const PIVOT_FLOOR: f64 = 1e-14;

/// `Psi = R^T D` with its column norms and, for batched coding, `Psi^T Psi`.
#[derive(Debug, Clone)]
pub struct EquivalentDictionary {
    psi: DMatrix<f64>,
    norms: Vec<f64>,
    gram: Option<DMatrix<f64>>,
    floor: f64,
}

impl EquivalentDictionary {
    pub fn new(r: &ProjectionMatrix, d: &DMatrix<f64>, with_gram: bool) -> Result<Self> {
        check_dim("equivalent_dictionary", r.p(), d.nrows())?;
        Ok(Self::from_matrix(r.transpose_mul(d)?, with_gram))
    }

    pub fn from_matrix(psi: DMatrix<f64>, with_gram: bool) -> Self {
        let norms: Vec<f64> = psi.column_iter().map(|c| c.norm()).collect();
        let gram = with_gram.then(|| psi.tr_mul(&psi));
        let floor = NORM_FLOOR * norms.iter().cloned().fold(0.0, f64::max);
        Self {
            psi,
            norms,
            gram,
            floor,
        }
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn gram(&self) -> Option<&DMatrix<f64>> {
        self.gram.as_ref()
    }

    pub fn num_atoms(&self) -> usize {
        self.psi.ncols()
    }

    pub fn dim(&self) -> usize {
        self.psi.nrows()
    }

    /// Whether atom `j` is eligible for selection.
    pub fn usable(&self, j: usize) -> bool {
        self.norms[j] > self.floor && self.norms[j] > 0.0
    }

    fn any_usable(&self) -> bool {
        (0..self.num_atoms()).any(|j| self.usable(j))
    }
}

/// Sorted support and matching coefficients of one sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseCode {
    pub support: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseCode {
    pub fn nnz(&self) -> usize {
        self.support.len()
    }

    pub fn get(&self, atom: usize) -> Option<f64> {
        self.support
            .binary_search(&atom)
            .ok()
            .map(|pos| self.values[pos])
    }

    fn from_selection(selected: &[usize], coeffs: &[f64]) -> Self {
        let mut pairs: Vec<(usize, f64)> = selected.iter().copied().zip(coeffs.iter().copied()).collect();
        pairs.sort_by_key(|&(j, _)| j);
        let (support, values) = pairs.into_iter().unzip();
        Self { support, values }
    }

    /// `Psi c`.
    pub fn reconstruct(&self, psi: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(psi.nrows());
        for (&j, &v) in self.support.iter().zip(&self.values) {
            out.axpy(v, &psi.column(j), 1.0);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmpResult {
    pub code: SparseCode,
    pub residual_norm: f64,
    /// Fewer than `T` atoms could be selected before the residual vanished:
    /// usable atoms ran out or the next atom was linearly dependent.
    pub exhausted: bool,
}

/// Codes for all samples of a block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseCodeBlock {
    pub codes: Vec<SparseCode>,
    pub residual_norms: Vec<f64>,
    pub exhausted: Vec<bool>,
}

impl SparseCodeBlock {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Lower-triangular factor of the active Gram matrix, grown one atom at a time.
struct ProgressiveCholesky {
    rows: Vec<Vec<f64>>,
}

impl ProgressiveCholesky {
    fn new() -> Self {
        Self { rows: Vec::new() }
    }

    /// Append an atom with Gram entries `cross[s] = <psi_s, psi_new>` against
    /// the active atoms and `diag = ||psi_new||^2`. Returns false if the atom
    /// is numerically dependent on the active set.
    fn push(&mut self, cross: &[f64], diag: f64) -> bool {
        let n = self.rows.len();
        let mut w = vec![0.0; n + 1];
        for i in 0..n {
            let mut acc = cross[i];
            for (k, wk) in w.iter().enumerate().take(i) {
                acc -= self.rows[i][k] * wk;
            }
            w[i] = acc / self.rows[i][i];
        }
        let pivot = diag - w[..n].iter().map(|v| v * v).sum::<f64>();
        if !(pivot > PIVOT_FLOOR * diag) {
            return false;
        }
        w[n] = pivot.sqrt();
        self.rows.push(w);
        true
    }

    /// Solve `L L^T c = rhs`.
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.rows.len();
        let mut z = vec![0.0; n];
        for i in 0..n {
            let mut acc = rhs[i];
            for (k, zk) in z.iter().enumerate().take(i) {
                acc -= self.rows[i][k] * zk;
            }
            z[i] = acc / self.rows[i][i];
        }
        let mut c = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = z[i];
            for (k, ck) in c.iter().enumerate().skip(i + 1) {
                acc -= self.rows[k][i] * ck;
            }
            c[i] = acc / self.rows[i][i];
        }
        c
    }
}

/// Best unselected usable atom by normalized correlation; lowest index wins ties.
fn select(psi: &EquivalentDictionary, selected: &[usize], corr: impl Fn(usize) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..psi.num_atoms() {
        if !psi.usable(j) || selected.contains(&j) {
            continue;
        }
        let score = corr(j).abs() / psi.norms[j];
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((j, score));
        }
    }
    best.map(|(j, _)| j)
}

fn residual_of(y: &[f64], psi: &DMatrix<f64>, selected: &[usize], coeffs: &[f64]) -> DVector<f64> {
    let mut r = DVector::from_column_slice(y);
    for (&j, &c) in selected.iter().zip(coeffs) {
        r.axpy(-c, &psi.column(j), 1.0);
    }
    r
}

/// Orthogonal matching pursuit of one sketch.
pub fn omp(y: &[f64], psi: &EquivalentDictionary, sparsity: usize) -> Result<OmpResult> {
    check_sparsity(sparsity)?;
    check_dim("omp", psi.dim(), y.len())?;
    let mat = &psi.psi;
    let mut r = DVector::from_column_slice(y);
    let mut rnorm = r.norm();
    let tol = EARLY_STOP * rnorm;
    let mut selected = Vec::with_capacity(sparsity);
    let mut rhs = Vec::with_capacity(sparsity);
    let mut coeffs = Vec::new();
    let mut chol = ProgressiveCholesky::new();
    let mut exhausted = !psi.any_usable();

    while !exhausted && selected.len() < sparsity && rnorm > tol {
        let Some(j) = select(psi, &selected, |j| mat.column(j).dot(&r)) else {
            exhausted = true;
            break;
        };
        let cross: Vec<f64> = selected.iter().map(|&s| mat.column(s).dot(&mat.column(j))).collect();
        if !chol.push(&cross, psi.norms[j] * psi.norms[j]) {
            exhausted = true;
            break;
        }
        selected.push(j);
        rhs.push(mat.column(j).iter().zip(y).map(|(a, b)| a * b).sum::<f64>());
        coeffs = chol.solve(&rhs);
        r = residual_of(y, mat, &selected, &coeffs);
        rnorm = r.norm();
    }

    Ok(OmpResult {
        code: SparseCode::from_selection(&selected, &coeffs),
        residual_norm: rnorm,
        exhausted,
    })
}

/// Batch-OMP over the columns of one sketch block. Shares `Psi^T Psi` and
/// `Psi^T Y` across samples; selects exactly as [`omp`] does.
pub fn batch_omp_block(
    y: &DMatrix<f64>,
    psi: &EquivalentDictionary,
    sparsity: usize,
) -> Result<SparseCodeBlock> {
    check_sparsity(sparsity)?;
    check_dim("batch_omp_block", psi.dim(), y.nrows())?;
    let gram = psi
        .gram
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("batch OMP needs the equivalent Gram matrix".into()))?;
    let mat = &psi.psi;
    let k = psi.num_atoms();
    let alpha0_all = mat.tr_mul(y);
    let any_usable = psi.any_usable();

    let mut out = SparseCodeBlock {
        codes: Vec::with_capacity(y.ncols()),
        residual_norms: Vec::with_capacity(y.ncols()),
        exhausted: Vec::with_capacity(y.ncols()),
    };
    let mut alpha = vec![0.0; k];
    for (yc, alpha0) in y.column_iter().zip(alpha0_all.column_iter()) {
        let ys = yc.as_slice();
        let mut rnorm = yc.norm();
        let tol = EARLY_STOP * rnorm;
        alpha.copy_from_slice(alpha0.as_slice());
        let mut selected = Vec::with_capacity(sparsity);
        let mut rhs = Vec::with_capacity(sparsity);
        let mut coeffs = Vec::new();
        let mut chol = ProgressiveCholesky::new();
        let mut exhausted = !any_usable;

        while !exhausted && selected.len() < sparsity && rnorm > tol {
            let Some(j) = select(psi, &selected, |j| alpha[j]) else {
                exhausted = true;
                break;
            };
            let cross: Vec<f64> = selected.iter().map(|&s| gram[(s, j)]).collect();
            if !chol.push(&cross, gram[(j, j)]) {
                exhausted = true;
                break;
            }
            selected.push(j);
            rhs.push(alpha0[j]);
            coeffs = chol.solve(&rhs);
            for (a, (i, a0)) in alpha.iter_mut().zip(alpha0.iter().enumerate()) {
                let mut acc = *a0;
                for (&s, &c) in selected.iter().zip(&coeffs) {
                    acc -= gram[(i, s)] * c;
                }
                *a = acc;
            }
            rnorm = residual_of(ys, mat, &selected, &coeffs).norm();
        }

        out.codes.push(SparseCode::from_selection(&selected, &coeffs));
        out.residual_norms.push(rnorm);
        out.exhausted.push(exhausted);
    }
    Ok(out)
}

fn check_sparsity(t: usize) -> Result<()> {
    if t == 0 {
        Err(Error::InvalidParameter("sparsity T must be >= 1".into()))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projections::ProjectionDistribution;
    use crate::testutil::{gaussian_matrix, rel_close};
    use proptest::prelude::*;

    /// Step-by-step OMP that re-solves least squares from scratch with QR on
    /// every iteration and computes correlations from an explicit residual.
    fn reference_omp(y: &DVector<f64>, psi: &DMatrix<f64>, t: usize) -> (Vec<usize>, Vec<f64>) {
        let norms: Vec<f64> = psi.column_iter().map(|c| c.norm()).collect();
        let mut sel: Vec<usize> = Vec::new();
        let mut coef = DVector::zeros(0);
        let mut r = y.clone();
        for _ in 0..t {
            if r.norm() <= 1e-10 * y.norm() {
                break;
            }
            let mut best = (usize::MAX, -1.0);
            for j in 0..psi.ncols() {
                if sel.contains(&j) {
                    continue;
                }
                let score = psi.column(j).dot(&r).abs() / norms[j];
                if score > best.1 {
                    best = (j, score);
                }
            }
            sel.push(best.0);
            let sub = psi.select_columns(sel.iter());
            let qr = sub.clone().qr();
            coef = qr.r().solve_upper_triangular(&(qr.q().transpose() * y)).unwrap();
            r = y - &sub * &coef;
        }
        let mut pairs: Vec<(usize, f64)> = sel.into_iter().zip(coef.iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        pairs.into_iter().unzip()
    }

    #[test]
    fn exact_single_atom() {
        let psi = EquivalentDictionary::from_matrix(gaussian_matrix(6, 4, 1), false);
        let y: Vec<f64> = psi.psi().column(1).iter().map(|v| 3.0 * v).collect();
        let res = omp(&y, &psi, 1).unwrap();
        assert_eq!(res.code.support, vec![1]);
        assert!(rel_close(res.code.values[0], 3.0, 1e-12));
        assert!(!res.exhausted);
    }

    #[test]
    fn zero_sketch_gives_empty_code() {
        let psi = EquivalentDictionary::from_matrix(gaussian_matrix(6, 4, 1), true);
        let res = omp(&[0.0; 6], &psi, 3).unwrap();
        assert!(res.code.support.is_empty());
        assert_eq!(res.residual_norm, 0.0);
        let block = batch_omp_block(&DMatrix::zeros(6, 2), &psi, 3).unwrap();
        assert!(block.codes.iter().all(|c| c.support.is_empty()));
    }

    #[test]
    fn all_zero_dictionary_is_flagged_not_error() {
        let psi = EquivalentDictionary::from_matrix(DMatrix::zeros(5, 3), true);
        let res = omp(&[1.0, 0.0, 0.0, 0.0, 0.0], &psi, 2).unwrap();
        assert!(res.exhausted);
        assert!(res.code.support.is_empty());
        let block = batch_omp_block(&DMatrix::from_element(5, 1, 1.0), &psi, 2).unwrap();
        assert!(block.exhausted[0]);
    }

    #[test]
    fn fewer_usable_atoms_than_sparsity() {
        let mut mat = gaussian_matrix(8, 4, 2);
        mat.column_mut(2).fill(0.0);
        mat.column_mut(3).fill(0.0);
        let psi = EquivalentDictionary::from_matrix(mat, true);
        let y = gaussian_matrix(8, 1, 3);
        let res = omp(y.as_slice(), &psi, 3).unwrap();
        assert_eq!(res.code.support, vec![0, 1]);
        assert!(res.exhausted);
    }

    #[test]
    fn matches_reference_on_small_random_instances() {
        for seed in 0..50 {
            let psi_m = gaussian_matrix(8, 12, 100 + seed);
            let y = gaussian_matrix(8, 1, 200 + seed).column(0).into_owned();
            let psi = EquivalentDictionary::from_matrix(psi_m.clone(), false);
            let res = omp(y.as_slice(), &psi, 3).unwrap();
            let (sup, vals) = reference_omp(&y, &psi_m, 3);
            assert_eq!(res.code.support, sup, "seed {seed}");
            for (a, b) in res.code.values.iter().zip(&vals) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn identity_projection_gives_original_dictionary() {
        let d = gaussian_matrix(5, 3, 4);
        let r = ProjectionMatrix::identity(5, 1.0).unwrap();
        let eq = EquivalentDictionary::new(&r, &d, true).unwrap();
        assert_eq!(eq.psi(), &d);
        let g = eq.gram().unwrap();
        assert!((g - g.transpose()).amax() == 0.0);
    }

    #[test]
    fn equivalent_dictionary_matches_naive_multiply() {
        let dist = ProjectionDistribution::sparse_bernoulli(2.0).unwrap();
        let r = ProjectionMatrix::sample(dist, 9, 4, 11).unwrap();
        let d = gaussian_matrix(9, 3, 12);
        let eq = EquivalentDictionary::new(&r, &d, false).unwrap();
        let dense = r.to_dense();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for t in 0..9 {
                    acc += dense[(t, i)] * d[(t, j)];
                }
                assert!(rel_close(eq.psi()[(i, j)], acc, 1e-12));
            }
        }
        let bad = gaussian_matrix(8, 3, 1);
        assert!(EquivalentDictionary::new(&r, &bad, false).is_err());
    }

    #[test]
    fn block_of_identical_columns() {
        let psi = EquivalentDictionary::from_matrix(gaussian_matrix(7, 9, 5), true);
        let col = gaussian_matrix(7, 1, 6);
        let y = DMatrix::from_fn(7, 5, |i, _| col[(i, 0)]);
        let block = batch_omp_block(&y, &psi, 3).unwrap();
        assert!(block.codes.windows(2).all(|w| w[0] == w[1]));
        let single = batch_omp_block(&col, &psi, 3).unwrap();
        let direct = omp(col.as_slice(), &psi, 3).unwrap();
        assert_eq!(single.codes[0].support, direct.code.support);
    }

    #[test]
    fn batch_requires_gram() {
        let psi = EquivalentDictionary::from_matrix(gaussian_matrix(4, 4, 5), false);
        assert!(batch_omp_block(&DMatrix::zeros(4, 1), &psi, 1).is_err());
        assert!(omp(&[0.0; 4], &psi, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn residual_orthogonal_to_selected_atoms(seed in 0u64..10_000, t in 1usize..5) {
            let psi = EquivalentDictionary::from_matrix(gaussian_matrix(10, 15, seed), false);
            let y = gaussian_matrix(10, 1, seed + 1);
            let res = omp(y.as_slice(), &psi, t).unwrap();
            prop_assert!(res.code.nnz() <= t);
            let r = y.column(0) - res.code.reconstruct(psi.psi());
            let ynorm = y.norm();
            for &j in &res.code.support {
                let ip = r.dot(&psi.psi().column(j)).abs();
                prop_assert!(ip <= 1e-8 * ynorm * psi.norms()[j]);
            }
            prop_assert!((r.norm() - res.residual_norm).abs() <= 1e-12 * ynorm.max(1.0));
        }

        #[test]
        fn residual_non_increasing_in_sparsity(seed in 0u64..10_000) {
            let psi = EquivalentDictionary::from_matrix(gaussian_matrix(10, 15, seed), false);
            let y = gaussian_matrix(10, 1, seed + 7);
            let mut last = f64::INFINITY;
            for t in 1..=6 {
                let res = omp(y.as_slice(), &psi, t).unwrap();
                prop_assert!(res.residual_norm <= last * (1.0 + 1e-12));
                last = res.residual_norm;
            }
        }

        #[test]
        fn batch_equals_per_sample(seed in 0u64..10_000, t in 1usize..5) {
            let psi = EquivalentDictionary::from_matrix(gaussian_matrix(9, 14, seed), true);
            let y = gaussian_matrix(9, 6, seed + 3);
            let block = batch_omp_block(&y, &psi, t).unwrap();
            for i in 0..6 {
                let single = omp(y.column(i).as_slice(), &psi, t).unwrap();
                prop_assert_eq!(&block.codes[i].support, &single.code.support);
                for (a, b) in block.codes[i].values.iter().zip(&single.code.values) {
                    prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
                }
            }
        }
    }
}
