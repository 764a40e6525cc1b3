//! Compressive K-SVD over block sketches.
//!
//! Each iteration codes every block against its equivalent dictionary
//! `Psi_l = R_l^T D` with Batch-OMP, then updates the atoms one at a time.
//! For atom `k`, with `e_i` the sketch residual of sample `i` with atom `k`
//! removed and `s_l` the sum of squared coefficients of atom `k` in block `l`,
//!
//! ```text
//! G_k = sum_l s_l R_l R_l^T        b_k = sum_l R_l sum_{i in I_k^l} c_ik e_i
//! d_k = normalize(G_k^+ b_k)       c_ik = <e_i, R_l^T d_k> / ||R_l^T d_k||^2
//! ```
//!
//! The coefficient refit keeps the support of every code unchanged. With
//! `delayed_refit` all atoms are updated first (each seeing the new earlier
//! atoms with the old coefficients) and the coefficients are refit afterwards
//! in one sweep.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dictionary::{canonicalize, Dictionary};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{conjugate_gradient, solve_psd, SolveMode};
use crate::projections::ProjectionMatrix;
use crate::seed::{derive_seed, rng_from_seed};
use crate::sketching::SketchedDataset;
use crate::sparse_coding::{batch_omp_block, EquivalentDictionary, SparseCode, SparseCodeBlock};

/// Largest `p` for which `G_k` is formed densely.
pub const DENSE_GRAM_MAX_DIM: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sparsity: usize,
    pub iterations: usize,
    pub delayed_refit: bool,
    pub solve: SolveMode,
    pub seed: u64,
    pub dense_gram_max_dim: usize,
}

impl TrainConfig {
    pub fn new(sparsity: usize, iterations: usize, seed: u64) -> Self {
        Self {
            sparsity,
            iterations,
            delayed_refit: false,
            solve: SolveMode::default(),
            seed,
            dense_gram_max_dim: DENSE_GRAM_MAX_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sparsity == 0 {
            return Err(Error::InvalidParameter("sparsity T must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be >= 1".into()));
        }
        self.solve.validate()
    }
}

/// One row of training history.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `sum_l ||Y_l - R_l^T D C_l||_F^2` after the dictionary update.
    pub objective: f64,
    /// Cumulative wall time.
    pub seconds: f64,
    pub replaced_atoms: usize,
    /// Coefficients zeroed because `R_l^T d_k` vanished.
    pub zeroed_coefficients: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dictionary: Dictionary,
    pub history: Vec<IterationRecord>,
    pub codes: Vec<SparseCodeBlock>,
}

/// Representation errors `e_i` for the samples of one block that use atom `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomResiduals {
    pub block: usize,
    /// Sample indices within the block.
    pub samples: Vec<usize>,
    /// `c_ik` for each listed sample.
    pub coeffs: Vec<f64>,
    /// `m x |I_k^l|`, one column per listed sample.
    pub errors: DMatrix<f64>,
}

impl AtomResiduals {
    pub fn weight(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    /// `sum_i c_ik e_i`.
    pub fn weighted_error(&self) -> DVector<f64> {
        &self.errors * DVector::from_column_slice(&self.coeffs)
    }
}

/// `e_i = y_i - sum_{j != k} c_ij psi_j` for every sample of the block whose
/// code uses atom `k`, computed from scratch.
pub fn residuals_for_atom(
    k: usize,
    block: usize,
    y: &DMatrix<f64>,
    psi: &DMatrix<f64>,
    codes: &[SparseCode],
) -> Result<AtomResiduals> {
    check_dim("residuals_for_atom", y.nrows(), psi.nrows())?;
    check_dim("residuals_for_atom", y.ncols(), codes.len())?;
    let mut samples = Vec::new();
    let mut coeffs = Vec::new();
    let mut cols = Vec::new();
    for (i, code) in codes.iter().enumerate() {
        let Some(cik) = code.get(k) else { continue };
        let mut e = y.column(i).into_owned();
        for (&j, &v) in code.support.iter().zip(&code.values) {
            if j != k {
                e.axpy(-v, &psi.column(j), 1.0);
            }
        }
        samples.push(i);
        coeffs.push(cik);
        cols.push(e);
    }
    Ok(AtomResiduals {
        block,
        samples,
        coeffs,
        errors: stack_columns(y.nrows(), &cols),
    })
}

fn stack_columns(rows: usize, cols: &[DVector<f64>]) -> DMatrix<f64> {
    if cols.is_empty() {
        DMatrix::zeros(rows, 0)
    } else {
        DMatrix::from_columns(cols)
    }
}

/// `G_k` in either explicit or operator form.
#[derive(Debug, Clone)]
pub enum GramForm {
    Dense(DMatrix<f64>),
    /// `G v = sum_l weights[l] R_l R_l^T v`, applied on demand.
    Implicit,
}

/// The normal equations `G_k d_k = b_k` for one atom.
#[derive(Debug, Clone)]
pub struct AtomUpdateSystem<'a> {
    pub k: usize,
    /// `s_k^l` per block.
    pub weights: Vec<f64>,
    pub gram: GramForm,
    pub rhs: DVector<f64>,
    projections: &'a [ProjectionMatrix],
}

impl AtomUpdateSystem<'_> {
    /// `G_k v`.
    pub fn apply_gram(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.gram {
            GramForm::Dense(g) => g * v,
            GramForm::Implicit => {
                let mut out = DVector::zeros(v.len());
                let mut tmp = vec![0.0; self.projections.first().map_or(0, |r| r.m())];
                for (r, &w) in self.projections.iter().zip(&self.weights) {
                    if w == 0.0 {
                        continue;
                    }
                    r.apply_transpose_into(v.as_slice(), &mut tmp);
                    r.apply_add(&tmp, w, out.as_mut_slice());
                }
                out
            }
        }
    }

    /// Dense `G_k`, formed on demand for the implicit form.
    pub fn dense_gram(&self) -> Result<DMatrix<f64>> {
        match &self.gram {
            GramForm::Dense(g) => Ok(g.clone()),
            GramForm::Implicit => weighted_gram(self.projections, &self.weights),
        }
    }
}

#[derive(Debug, Clone)]
pub enum AtomSystem<'a> {
    /// No sample uses the atom.
    Empty,
    System(AtomUpdateSystem<'a>),
}

/// `sum_l w_l R_l R_l^T`, accumulated in block order.
pub fn weighted_gram(projections: &[ProjectionMatrix], weights: &[f64]) -> Result<DMatrix<f64>> {
    check_dim("weighted_gram", projections.len(), weights.len())?;
    let p = projections
        .first()
        .ok_or_else(|| Error::InvalidParameter("no projections".into()))?
        .p();
    let mut g = DMatrix::zeros(p, p);
    for (r, &w) in projections.iter().zip(weights) {
        r.add_scaled_gram(w, &mut g)?;
    }
    Ok(g)
}

/// `R S R^T` with `R = [R_1 ... R_L]` concatenated and `S` the diagonal of
/// block weights, each repeated `m` times.
pub fn gram_factored(projections: &[ProjectionMatrix], weights: &[f64]) -> Result<DMatrix<f64>> {
    check_dim("gram_factored", projections.len(), weights.len())?;
    let first = projections
        .first()
        .ok_or_else(|| Error::InvalidParameter("no projections".into()))?;
    let (p, m) = (first.p(), first.m());
    let mut big = DMatrix::zeros(p, m * projections.len());
    let mut diag = DVector::zeros(m * projections.len());
    for (l, (r, &w)) in projections.iter().zip(weights).enumerate() {
        big.columns_mut(l * m, m).copy_from(&r.to_dense());
        diag.rows_mut(l * m, m).fill(w);
    }
    let scaled = &big * DMatrix::from_diagonal(&diag);
    Ok(scaled * big.transpose())
}

/// Assemble `G_k` and `b_k` from the per-block residuals of atom `k`.
pub fn build_atom_system<'a>(
    k: usize,
    projections: &'a [ProjectionMatrix],
    residuals: &[AtomResiduals],
    dense_gram_max_dim: usize,
) -> Result<AtomSystem<'a>> {
    let first = projections
        .first()
        .ok_or_else(|| Error::InvalidParameter("no projections".into()))?;
    let p = first.p();
    let mut weights = vec![0.0; projections.len()];
    let mut rhs = DVector::zeros(p);
    let mut used = false;
    for res in residuals {
        if res.samples.is_empty() {
            continue;
        }
        let r = projections
            .get(res.block)
            .ok_or_else(|| Error::InvalidParameter(format!("block {} out of range", res.block)))?;
        check_dim("atom residual rows", r.m(), res.errors.nrows())?;
        used = true;
        weights[res.block] += res.weight();
        let ce = res.weighted_error();
        r.apply_add(ce.as_slice(), 1.0, rhs.as_mut_slice());
    }
    if !used {
        return Ok(AtomSystem::Empty);
    }
    let gram = if p <= dense_gram_max_dim {
        let g = weighted_gram(projections, &weights)?;
        debug_assert!(
            p > 32 || first.m() * projections.len() > 512 || {
                let f = gram_factored(projections, &weights).unwrap();
                (&g - &f).amax() <= 1e-10 * g.amax().max(f64::MIN_POSITIVE)
            },
            "G_k sum form disagrees with R S_k R^T"
        );
        GramForm::Dense(g)
    } else {
        GramForm::Implicit
    };
    Ok(AtomSystem::System(AtomUpdateSystem {
        k,
        weights,
        gram,
        rhs,
        projections,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub enum AtomSolution {
    /// Unit-norm atom with its largest-magnitude entry positive.
    Atom(DVector<f64>),
    /// `b_k = 0` or the solution vanished; the atom must be replaced.
    NeedsReplacement,
}

/// Solve `G_k d = b_k` and normalize.
pub fn solve_atom(sys: &AtomUpdateSystem<'_>, mode: SolveMode) -> Result<AtomSolution> {
    if sys.rhs.iter().all(|&v| v == 0.0) {
        return Ok(AtomSolution::NeedsReplacement);
    }
    let mut d = match &sys.gram {
        GramForm::Dense(g) => solve_psd(g, &sys.rhs, mode)?,
        GramForm::Implicit => {
            mode.validate()?;
            let (shift, tol) = match mode {
                SolveMode::PseudoInverse { rel_tol } => (0.0, rel_tol.max(1e-12)),
                SolveMode::Ridge { eps } => (eps, 1e-12),
            };
            let max_iter = 10 * sys.rhs.len();
            conjugate_gradient(
                |v| {
                    let mut gv = sys.apply_gram(v);
                    if shift > 0.0 {
                        gv.axpy(shift, v, 1.0);
                    }
                    gv
                },
                &sys.rhs,
                tol,
                max_iter,
            )
        }
    };
    if canonicalize(&mut d) {
        Ok(AtomSolution::Atom(d))
    } else {
        Ok(AtomSolution::NeedsReplacement)
    }
}

/// Least-squares coefficients against `psi_k = R_l^T d_k` for one block.
/// Returns the new coefficients and the number zeroed because `psi_k` vanished.
pub fn refit_block(psi_k: &DVector<f64>, residuals: &AtomResiduals, floor: f64) -> (Vec<f64>, usize) {
    let nsq = psi_k.norm_squared();
    if !(nsq.sqrt() > floor) {
        return (vec![0.0; residuals.samples.len()], residuals.samples.len());
    }
    let coeffs = residuals
        .errors
        .column_iter()
        .map(|e| e.dot(psi_k) / nsq)
        .collect();
    (coeffs, 0)
}

/// Refit `c_ik` for every block after atom `k` has been replaced by `d`.
pub fn refit_coefficients(
    d: &DVector<f64>,
    projections: &[ProjectionMatrix],
    residuals: &[AtomResiduals],
) -> Result<Vec<Vec<f64>>> {
    let floor = psi_floor(projections)?;
    residuals
        .iter()
        .map(|res| {
            let r = &projections[res.block];
            let psi_k = r.apply_transpose(d.as_slice())?;
            Ok(refit_block(&psi_k, res, floor).0)
        })
        .collect()
}

/// `||R^T d||` below which an equivalent atom is considered zero.
fn psi_floor(projections: &[ProjectionMatrix]) -> Result<f64> {
    let r = projections
        .first()
        .ok_or_else(|| Error::InvalidParameter("no projections".into()))?;
    Ok(1e-12 * r.dist().expected_gram_scale(r.m())?.sqrt())
}

/// Per-block working state.
#[derive(Debug, Clone)]
pub(crate) struct BlockState {
    pub psi: DMatrix<f64>,
    pub codes: Vec<SparseCode>,
    pub residual: DMatrix<f64>,
    /// `usage[k]` lists `(sample, slot in support)` for samples using atom `k`.
    pub usage: Vec<Vec<(usize, usize)>>,
}

impl BlockState {
    fn new(y: &DMatrix<f64>, psi: DMatrix<f64>, codes: Vec<SparseCode>, k: usize) -> Self {
        let mut usage = vec![Vec::new(); k];
        let mut residual = y.clone();
        for (i, code) in codes.iter().enumerate() {
            let mut col = residual.column_mut(i);
            for (slot, (&j, &v)) in code.support.iter().zip(&code.values).enumerate() {
                usage[j].push((i, slot));
                col.axpy(-v, &psi.column(j), 1.0);
            }
        }
        Self {
            psi,
            codes,
            residual,
            usage,
        }
    }

    /// `e_i = r_i + c_ik psi_k` for the samples using atom `k`.
    fn atom_residuals(&self, k: usize, block: usize) -> AtomResiduals {
        let list = &self.usage[k];
        let m = self.psi.nrows();
        let mut errors = DMatrix::zeros(m, list.len());
        let mut coeffs = Vec::with_capacity(list.len());
        let psi_k = self.psi.column(k);
        for (col, &(i, slot)) in list.iter().enumerate() {
            let c = self.codes[i].values[slot];
            let mut e = errors.column_mut(col);
            e.copy_from(&self.residual.column(i));
            e.axpy(c, &psi_k, 1.0);
            coeffs.push(c);
        }
        AtomResiduals {
            block,
            samples: list.iter().map(|&(i, _)| i).collect(),
            coeffs,
            errors,
        }
    }

    /// Install a new `psi_k` and new coefficients (`None` keeps the old ones),
    /// updating the residuals of the affected samples.
    fn install_atom(&mut self, k: usize, psi_k: &DVector<f64>, res: &AtomResiduals, coeffs: Option<&[f64]>) {
        self.psi.set_column(k, psi_k);
        for (col, &(i, slot)) in self.usage[k].iter().enumerate() {
            let c = match coeffs {
                Some(c) => {
                    self.codes[i].values[slot] = c[col];
                    c[col]
                }
                None => self.codes[i].values[slot],
            };
            let mut r = self.residual.column_mut(i);
            r.copy_from(&res.errors.column(col));
            r.axpy(-c, psi_k, 1.0);
        }
    }

    /// Refit every coefficient of atom `k` in place against the current `psi_k`.
    fn refit_in_place(&mut self, k: usize, floor: f64) -> usize {
        let res = self.atom_residuals(k, 0);
        let psi_k = self.psi.column(k).into_owned();
        let (coeffs, zeroed) = refit_block(&psi_k, &res, floor);
        self.install_atom(k, &psi_k, &res, Some(&coeffs));
        zeroed
    }

    fn objective(&self, y: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for (i, code) in self.codes.iter().enumerate() {
            let r = y.column(i) - code.reconstruct(&self.psi);
            total += r.norm_squared();
        }
        total
    }
}

/// Code all blocks against `d`.
pub(crate) fn code_blocks(
    sketches: &SketchedDataset,
    projections: &[ProjectionMatrix],
    d: &DMatrix<f64>,
    sparsity: usize,
) -> Result<Vec<BlockState>> {
    let k = d.ncols();
    projections
        .par_iter()
        .zip(sketches.blocks().par_iter())
        .map(|(r, y)| {
            let eq = EquivalentDictionary::new(r, d, true)?;
            let block = batch_omp_block(y, &eq, sparsity)?;
            Ok(BlockState::new(y, eq.psi().clone(), block.codes, k))
        })
        .collect()
}

#[derive(Debug, Default, Clone, Copy)]
struct UpdateStats {
    replaced: usize,
    zeroed: usize,
}

/// The dictionary-update phase of one iteration. Supports are never changed.
fn update_dictionary(
    states: &mut [BlockState],
    projections: &[ProjectionMatrix],
    dict: &mut Dictionary,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<UpdateStats> {
    let floor = psi_floor(projections)?;
    let mut stats = UpdateStats::default();
    let mut donors: Vec<(usize, usize)> = Vec::new();
    for k in 0..dict.num_atoms() {
        let residuals: Vec<AtomResiduals> = states
            .par_iter()
            .enumerate()
            .map(|(l, st)| st.atom_residuals(k, l))
            .collect();
        let solution = match build_atom_system(k, projections, &residuals, cfg.dense_gram_max_dim)? {
            AtomSystem::Empty => AtomSolution::NeedsReplacement,
            AtomSystem::System(sys) => solve_atom(&sys, cfg.solve)?,
        };
        let atom = match solution {
            AtomSolution::Atom(d) => d,
            AtomSolution::NeedsReplacement => {
                stats.replaced += 1;
                replacement_atom(states, projections, &mut donors, cfg.seed, iteration, k)?
            }
        };
        dict.set_atom(k, &atom);
        let atom = dict.atom(k);
        let zeroed: usize = states
            .par_iter_mut()
            .zip(residuals.par_iter())
            .zip(projections.par_iter())
            .map(|((st, res), r)| {
                let mut psi_k = DVector::zeros(r.m());
                r.apply_transpose_into(atom.as_slice(), psi_k.as_mut_slice());
                if cfg.delayed_refit {
                    st.install_atom(k, &psi_k, res, None);
                    0
                } else {
                    let (coeffs, zeroed) = refit_block(&psi_k, res, floor);
                    st.install_atom(k, &psi_k, res, Some(&coeffs));
                    zeroed
                }
            })
            .sum();
        stats.zeroed += zeroed;
    }
    if cfg.delayed_refit {
        for k in 0..dict.num_atoms() {
            stats.zeroed += states
                .par_iter_mut()
                .map(|st| st.refit_in_place(k, floor))
                .sum::<usize>();
        }
    }
    Ok(stats)
}

/// Normalized back-projection `R_l r_i` of the sample with the largest current
/// residual that has not donated an atom yet this iteration.
fn replacement_atom(
    states: &[BlockState],
    projections: &[ProjectionMatrix],
    donors: &mut Vec<(usize, usize)>,
    seed: u64,
    iteration: usize,
    k: usize,
) -> Result<DVector<f64>> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (l, st) in states.iter().enumerate() {
        for (i, col) in st.residual.column_iter().enumerate() {
            candidates.push((col.norm_squared(), l, i));
        }
    }
    // Largest residual first; ties by (block, sample).
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    for (energy, l, i) in candidates {
        if energy == 0.0 {
            break;
        }
        if donors.contains(&(l, i)) {
            continue;
        }
        let mut v = projections[l].apply(states[l].residual.column(i).as_slice())?;
        if canonicalize(&mut v) {
            donors.push((l, i));
            return Ok(v);
        }
    }
    let p = projections[0].p();
    let mut rng = rng_from_seed(derive_seed(derive_seed(seed, iteration as u64), k as u64));
    loop {
        let mut v = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        if canonicalize(&mut v) {
            return Ok(v);
        }
    }
}

/// `sum_l ||Y_l - R_l^T D C_l||_F^2`.
pub fn surrogate_objective(
    sketches: &SketchedDataset,
    projections: &[ProjectionMatrix],
    d: &DMatrix<f64>,
    codes: &[SparseCodeBlock],
) -> Result<f64> {
    check_dim("surrogate_objective", sketches.num_blocks(), codes.len())?;
    let parts = projections
        .par_iter()
        .zip(sketches.blocks().par_iter())
        .zip(codes.par_iter())
        .map(|((r, y), block)| {
            let psi = r.transpose_mul(d)?;
            Ok(block
                .codes
                .iter()
                .enumerate()
                .map(|(i, c)| (y.column(i) - c.reconstruct(&psi)).norm_squared())
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.iter().sum())
}

fn check_inputs(sketches: &SketchedDataset, k: usize, init: Option<&Dictionary>) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    if let Some(d0) = init {
        check_dim("initial dictionary rows", sketches.p(), d0.p())?;
        check_dim("initial dictionary atoms", k, d0.num_atoms())?;
    }
    Ok(())
}

pub fn train(
    sketches: &SketchedDataset,
    k: usize,
    cfg: &TrainConfig,
    init: Option<&Dictionary>,
) -> Result<TrainOutput> {
    train_with_observer(sketches, k, cfg, init, |_, _| {})
}

/// [`train`], calling `observer` after every iteration. Observer time is not
/// counted in `seconds`.
pub fn train_with_observer(
    sketches: &SketchedDataset,
    k: usize,
    cfg: &TrainConfig,
    init: Option<&Dictionary>,
    mut observer: impl FnMut(&IterationRecord, &Dictionary),
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_inputs(sketches, k, init)?;
    let mut clock = 0.0;
    let start = Instant::now();
    let projections = sketches.projections()?;
    let mut dict = match init {
        Some(d) => d.clone(),
        None => Dictionary::random(sketches.p(), k, derive_seed(cfg.seed, u64::MAX))?,
    };
    clock += start.elapsed().as_secs_f64();

    let mut history = Vec::with_capacity(cfg.iterations);
    let mut states = Vec::new();
    for it in 1..=cfg.iterations {
        let start = Instant::now();
        states = code_blocks(sketches, &projections, dict.matrix(), cfg.sparsity)?;
        let stats = update_dictionary(&mut states, &projections, &mut dict, cfg, it)?;
        let objective: f64 = states
            .par_iter()
            .zip(sketches.blocks().par_iter())
            .map(|(st, y)| st.objective(y))
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        if !objective.is_finite() {
            return Err(Error::Numerical(format!("objective became {objective} at iteration {it}")));
        }
        clock += start.elapsed().as_secs_f64();
        let record = IterationRecord {
            iteration: it,
            objective,
            seconds: clock,
            replaced_atoms: stats.replaced,
            zeroed_coefficients: stats.zeroed,
        };
        observer(&record, &dict);
        history.push(record);
    }
    let codes = states
        .into_iter()
        .map(|st| SparseCodeBlock {
            residual_norms: st.residual.column_iter().map(|c| c.norm()).collect(),
            exhausted: vec![false; st.codes.len()],
            codes: st.codes,
        })
        .collect();
    Ok(TrainOutput {
        dictionary: dict,
        history,
        codes,
    })
}
