//! Small dense solvers for the symmetric positive semidefinite systems that
//! arise in the atom and cluster-center updates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

/// How to solve `G d = b` for a symmetric PSD `G`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveMode {
    /// Moore-Penrose pseudo-inverse; eigenvalues at or below `rel_tol * max`
    /// are treated as zero.
    PseudoInverse { rel_tol: f64 },
    /// `(G + eps I)^{-1} b`.
    Ridge { eps: f64 },
}

impl Default for SolveMode {
    fn default() -> Self {
        Self::PseudoInverse { rel_tol: 1e-10 }
    }
}

impl SolveMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::PseudoInverse { rel_tol } if !(rel_tol >= 0.0 && rel_tol.is_finite()) => Err(
                Error::InvalidParameter(format!("pseudo-inverse tolerance must be >= 0, got {rel_tol}")),
            ),
            Self::Ridge { eps } if !(eps > 0.0 && eps.is_finite()) => Err(Error::InvalidParameter(
                format!("ridge must be positive, got {eps}"),
            )),
            _ => Ok(()),
        }
    }
}

pub fn solve_psd(g: &DMatrix<f64>, b: &DVector<f64>, mode: SolveMode) -> Result<DVector<f64>> {
    check_dim("solve_psd", g.nrows(), g.ncols())?;
    check_dim("solve_psd", g.nrows(), b.len())?;
    mode.validate()?;
    match mode {
        SolveMode::PseudoInverse { rel_tol } => Ok(pinv_solve_symmetric(g, b, rel_tol)),
        SolveMode::Ridge { eps } => {
            let mut shifted = g.clone();
            for i in 0..g.nrows() {
                shifted[(i, i)] += eps;
            }
            shifted
                .cholesky()
                .map(|c| c.solve(b))
                .ok_or_else(|| Error::Numerical("ridge system is not positive definite".into()))
        }
    }
}

/// `G^+ b` through the symmetric eigendecomposition of `G`. Singular values of
/// a symmetric matrix are the magnitudes of its eigenvalues. All-zero rows are
/// split off first since they contribute nothing to the minimum-norm solution;
/// the eigensolver can also return NaN on such matrices, in which case the SVD
/// is used instead.
pub fn pinv_solve_symmetric(g: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    let n = g.nrows();
    let active: Vec<usize> = (0..n)
        .filter(|&i| g.row(i).iter().any(|&v| v != 0.0))
        .collect();
    let mut out = DVector::zeros(n);
    if active.is_empty() {
        return out;
    }
    let (ga, ba) = if active.len() == n {
        (g.clone(), b.clone())
    } else {
        (
            g.select_rows(&active).select_columns(&active),
            b.select_rows(&active),
        )
    };
    let sol = pinv_eigen(&ga, &ba, rel_tol).unwrap_or_else(|| pinv_svd(ga, &ba, rel_tol));
    for (a, &i) in active.iter().enumerate() {
        out[i] = sol[a];
    }
    out
}

fn pinv_eigen(g: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> Option<DVector<f64>> {
    let eig = SymmetricEigen::new(g.clone());
    if eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).any(|v| !v.is_finite()) {
        return None;
    }
    let sigma_max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cutoff = rel_tol * sigma_max;
    let coords = eig.eigenvectors.tr_mul(b);
    let mut scaled = DVector::zeros(coords.len());
    for i in 0..coords.len() {
        let lambda = eig.eigenvalues[i];
        if lambda.abs() > cutoff && lambda != 0.0 {
            scaled[i] = coords[i] / lambda;
        }
    }
    Some(&eig.eigenvectors * scaled)
}

fn pinv_svd(g: DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    let svd = g.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = rel_tol * sigma_max;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut coords = u.tr_mul(b);
    for (c, &s) in coords.iter_mut().zip(svd.singular_values.iter()) {
        *c = if s > cutoff && s != 0.0 { *c / s } else { 0.0 };
    }
    v_t.tr_mul(&coords)
}

/// Conjugate gradients on a consistent PSD system `G d = b` given only the
/// action of `G`. Started from zero, the iterates stay in the range of `G`,
/// so the limit is the minimum-norm solution.
pub fn conjugate_gradient(
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    rel_tol: f64,
    max_iter: usize,
) -> DVector<f64> {
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    let stop = (rel_tol * b.norm()).powi(2);
    for _ in 0..max_iter {
        if rs <= stop {
            break;
        }
        let gp = apply(&p);
        let curvature = p.dot(&gp);
        if !(curvature > 0.0) {
            break;
        }
        let alpha = rs / curvature;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &gp, 1.0);
        let rs_next = r.norm_squared();
        p = &r + &p * (rs_next / rs);
        rs = rs_next;
    }
    x
}
