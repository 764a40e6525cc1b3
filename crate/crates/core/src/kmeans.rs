//! Compressive K-means: sparse coding with `T = 1` and coefficients fixed to 1.
//!
//! Samples are assigned to the center minimizing `||y_i - R_l^T d_k||^2`, and
//! each center solves `H_k d_k = f_k` with
//!
//! ```text
//! H_k = 1/(m mu2 |I_k|) sum_{i in I_k} R_i R_i^T
//! f_k = 1/(m mu2 |I_k|) sum_{i in I_k} R_i y_i
//! ```
//!
//! where `R_i` is the projection of the block holding sample `i`. Centers are
//! not normalized.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rayon::prelude::*;

use crate::cksvd::{weighted_gram, DENSE_GRAM_MAX_DIM};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{conjugate_gradient, solve_psd, SolveMode};
use crate::projections::ProjectionMatrix;
use crate::seed::{derive_seed, rng_from_seed, stream};
use crate::sketching::SketchedDataset;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub iterations: usize,
    pub seed: u64,
    pub solve: SolveMode,
    /// Initial centers (`p x K`). Drawn from back-projected samples when absent.
    pub init: Option<DMatrix<f64>>,
}

impl KMeansConfig {
    pub fn new(k: usize, iterations: usize, seed: u64) -> Self {
        Self {
            k,
            iterations,
            seed,
            solve: SolveMode::default(),
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRecord {
    pub iteration: usize,
    /// `sum_i ||y_i - R_i^T d_{k(i)}||^2` for the assignment of this iteration.
    pub objective: f64,
    pub seconds: f64,
    pub reseeded: usize,
}

#[derive(Debug, Clone)]
pub struct KMeansOutput {
    pub centers: DMatrix<f64>,
    /// Cluster index per sample, in global sample order.
    pub assignments: Vec<usize>,
    pub history: Vec<KMeansRecord>,
}

/// `R y / (m mu2)`, an unbiased estimate of the sample's cluster center.
pub fn back_project(r: &ProjectionMatrix, y: &[f64]) -> Result<DVector<f64>> {
    let scale = r.dist().expected_gram_scale(r.m())?;
    Ok(r.apply(y)? / scale)
}

/// Nearest center per sample of one block, ties to the lowest index.
/// Returns assignments and squared distances.
pub fn assign_block(
    r: &ProjectionMatrix,
    y: &DMatrix<f64>,
    centers: &DMatrix<f64>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    check_dim("assign_block", r.m(), y.nrows())?;
    let psi = r.transpose_mul(centers)?;
    let mut assignment = Vec::with_capacity(y.ncols());
    let mut dist = Vec::with_capacity(y.ncols());
    for col in y.column_iter() {
        let mut best = (f64::INFINITY, 0);
        for k in 0..psi.ncols() {
            let d = (col - psi.column(k)).norm_squared();
            if d < best.0 {
                best = (d, k);
            }
        }
        assignment.push(best.1);
        dist.push(best.0);
    }
    Ok((assignment, dist))
}

/// `H_k` and `f_k` for one cluster. `members[l]` lists the block-local sample
/// indices of block `l` assigned to the cluster; at least one must be present.
pub fn cluster_system(
    projections: &[ProjectionMatrix],
    blocks: &[DMatrix<f64>],
    members: &[Vec<usize>],
) -> Result<(Vec<f64>, DVector<f64>)> {
    check_dim("cluster_system", projections.len(), members.len())?;
    let total: usize = members.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::InvalidParameter("empty cluster".into()));
    }
    let r0 = &projections[0];
    let norm = r0.dist().expected_gram_scale(r0.m())? * total as f64;
    let mut weights = vec![0.0; projections.len()];
    let mut f = DVector::zeros(r0.p());
    for (l, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        weights[l] = idx.len() as f64 / norm;
        let mut ysum = DVector::zeros(blocks[l].nrows());
        for &i in idx {
            ysum += blocks[l].column(i);
        }
        projections[l].apply_add(ysum.as_slice(), 1.0 / norm, f.as_mut_slice());
    }
    Ok((weights, f))
}

/// Solve `H d = f` with `H = sum_l w_l R_l R_l^T`.
pub fn solve_cluster(
    projections: &[ProjectionMatrix],
    weights: &[f64],
    f: &DVector<f64>,
    mode: SolveMode,
) -> Result<DVector<f64>> {
    let p = f.len();
    if p <= DENSE_GRAM_MAX_DIM {
        let h = weighted_gram(projections, weights)?;
        return solve_psd(&h, f, mode);
    }
    mode.validate()?;
    let (shift, tol) = match mode {
        SolveMode::PseudoInverse { rel_tol } => (0.0, rel_tol.max(1e-12)),
        SolveMode::Ridge { eps } => (eps, 1e-12),
    };
    let m = projections[0].m();
    Ok(conjugate_gradient(
        |v| {
            let mut out = v * shift;
            let mut tmp = vec![0.0; m];
            for (r, &w) in projections.iter().zip(weights) {
                if w != 0.0 {
                    r.apply_transpose_into(v.as_slice(), &mut tmp);
                    r.apply_add(&tmp, w, out.as_mut_slice());
                }
            }
            out
        },
        f,
        tol,
        10 * p,
    ))
}

fn locate(sketches: &SketchedDataset, global: usize) -> (usize, usize) {
    let b = sketches.partition().boundaries();
    let l = b.partition_point(|&x| x <= global) - 1;
    (l, global - b[l])
}

pub fn kmeans_train(sketches: &SketchedDataset, cfg: &KMeansConfig) -> Result<KMeansOutput> {
    kmeans_train_with_observer(sketches, cfg, |_, _| {})
}

/// [`kmeans_train`], calling `observer` with the centers after every update.
pub fn kmeans_train_with_observer(
    sketches: &SketchedDataset,
    cfg: &KMeansConfig,
    mut observer: impl FnMut(&KMeansRecord, &DMatrix<f64>),
) -> Result<KMeansOutput> {
    let n = sketches.num_samples();
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::InvalidParameter(format!(
            "K must be in 1..={n}, got {}",
            cfg.k
        )));
    }
    if cfg.iterations == 0 {
        return Err(Error::InvalidParameter("iterations must be >= 1".into()));
    }
    cfg.solve.validate()?;
    let mut clock = 0.0;
    let start = Instant::now();
    let projections = sketches.projections()?;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, stream::KMEANS));
    let mut centers = match &cfg.init {
        Some(c) => {
            check_dim("initial centers rows", sketches.p(), c.nrows())?;
            check_dim("initial centers count", cfg.k, c.ncols())?;
            c.clone()
        }
        None => {
            let picks = sample_indices(&mut rng, n, cfg.k).into_vec();
            let cols = picks
                .iter()
                .map(|&g| {
                    let (l, i) = locate(sketches, g);
                    back_project(&projections[l], sketches.block(l).column(i).as_slice())
                })
                .collect::<Result<Vec<_>>>()?;
            DMatrix::from_columns(&cols)
        }
    };
    clock += start.elapsed().as_secs_f64();

    let mut history = Vec::with_capacity(cfg.iterations);
    let mut assignments = vec![0; n];
    for it in 1..=cfg.iterations {
        let start = Instant::now();
        let per_block = projections
            .par_iter()
            .zip(sketches.blocks().par_iter())
            .map(|(r, y)| assign_block(r, y, &centers))
            .collect::<Result<Vec<_>>>()?;
        let objective: f64 = per_block.iter().flat_map(|(_, d)| d.iter()).sum();
        let mut members = vec![vec![Vec::new(); projections.len()]; cfg.k];
        let mut pos = 0;
        for (l, (a, _)) in per_block.iter().enumerate() {
            for (i, &k) in a.iter().enumerate() {
                members[k][l].push(i);
                assignments[pos] = k;
                pos += 1;
            }
        }
        let solved = members
            .par_iter()
            .map(|mem| {
                if mem.iter().all(Vec::is_empty) {
                    return Ok(None);
                }
                let (w, f) = cluster_system(&projections, sketches.blocks(), mem)?;
                solve_cluster(&projections, &w, &f, cfg.solve).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut reseeded = 0;
        for (k, c) in solved.into_iter().enumerate() {
            let c = match c {
                Some(c) => c,
                None => {
                    reseeded += 1;
                    let (l, i) = locate(sketches, rng.random_range(0..n));
                    back_project(&projections[l], sketches.block(l).column(i).as_slice())?
                }
            };
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("center {k} is not finite at iteration {it}")));
            }
            centers.set_column(k, &c);
        }
        clock += start.elapsed().as_secs_f64();
        let record = KMeansRecord {
            iteration: it,
            objective,
            seconds: clock,
            reseeded,
        };
        observer(&record, &centers);
        history.push(record);
    }
    Ok(KMeansOutput {
        centers,
        assignments,
        history,
    })
}
