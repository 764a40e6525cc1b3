//! Approximate K-SVD on raw data: Batch-OMP coding, then one power iteration
//! per atom on the restricted residual `E_k`:
//!
//! ```text
//! d_k = E_k g_k / ||E_k g_k||,    g_k = E_k^T d_k
//! ```

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::cksvd::IterationRecord;
use crate::dictionary::{canonicalize, Dictionary};
use crate::error::{check_dim, Error, Result};
use crate::seed::{derive_seed, rng_from_seed};
use crate::sparse_coding::{batch_omp_block, EquivalentDictionary, SparseCode};

/// Columns coded per parallel task.
const CODING_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct AkSvdConfig {
    pub k: usize,
    pub sparsity: usize,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct AkSvdOutput {
    pub dictionary: Dictionary,
    pub history: Vec<IterationRecord>,
    pub codes: Vec<SparseCode>,
}

/// Batch-OMP codes of every column of `x` against `d`.
pub fn code_samples(x: &DMatrix<f64>, d: &DMatrix<f64>, sparsity: usize) -> Result<Vec<SparseCode>> {
    check_dim("code_samples", d.nrows(), x.nrows())?;
    let eq = EquivalentDictionary::from_matrix(d.clone(), true);
    let n = x.ncols();
    let starts: Vec<usize> = (0..n).step_by(CODING_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let w = CODING_CHUNK.min(n - s);
            let chunk = x.columns(s, w).into_owned();
            batch_omp_block(&chunk, &eq, sparsity).map(|b| b.codes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

struct State {
    codes: Vec<SparseCode>,
    residual: DMatrix<f64>,
    usage: Vec<Vec<(usize, usize)>>,
}

impl State {
    fn new(x: &DMatrix<f64>, d: &DMatrix<f64>, codes: Vec<SparseCode>) -> Self {
        let mut usage = vec![Vec::new(); d.ncols()];
        let mut residual = x.clone();
        for (i, code) in codes.iter().enumerate() {
            let mut col = residual.column_mut(i);
            for (slot, (&j, &v)) in code.support.iter().zip(&code.values).enumerate() {
                usage[j].push((i, slot));
                col.axpy(-v, &d.column(j), 1.0);
            }
        }
        Self {
            codes,
            residual,
            usage,
        }
    }

    /// `E_k` restricted to the samples using atom `k`, and their coefficients.
    fn restricted(&self, k: usize, d_k: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let list = &self.usage[k];
        let mut e = DMatrix::zeros(self.residual.nrows(), list.len());
        let mut g = DVector::zeros(list.len());
        for (col, &(i, slot)) in list.iter().enumerate() {
            let c = self.codes[i].values[slot];
            let mut ec = e.column_mut(col);
            ec.copy_from(&self.residual.column(i));
            ec.axpy(c, d_k, 1.0);
            g[col] = c;
        }
        (e, g)
    }

    fn install(&mut self, k: usize, d_k: &DVector<f64>, e: &DMatrix<f64>, g: &DVector<f64>) {
        for (col, &(i, slot)) in self.usage[k].iter().enumerate() {
            self.codes[i].values[slot] = g[col];
            let mut r = self.residual.column_mut(i);
            r.copy_from(&e.column(col));
            r.axpy(-g[col], d_k, 1.0);
        }
    }

    fn replacement(&self, donors: &mut Vec<usize>, seed: u64, iteration: usize, k: usize) -> DVector<f64> {
        let mut order: Vec<(f64, usize)> = self
            .residual
            .column_iter()
            .enumerate()
            .map(|(i, c)| (c.norm_squared(), i))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (energy, i) in order {
            if energy == 0.0 {
                break;
            }
            if donors.contains(&i) {
                continue;
            }
            let mut v = self.residual.column(i).into_owned();
            if canonicalize(&mut v) {
                donors.push(i);
                return v;
            }
        }
        let mut rng = rng_from_seed(derive_seed(derive_seed(seed, iteration as u64), k as u64));
        loop {
            let mut v = DVector::from_fn(self.residual.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
            if canonicalize(&mut v) {
                return v;
            }
        }
    }
}

pub fn aksvd_train(
    x: &DMatrix<f64>,
    cfg: &AkSvdConfig,
    init: Option<&Dictionary>,
) -> Result<AkSvdOutput> {
    aksvd_train_with_observer(x, cfg, init, |_, _| {})
}

/// [`aksvd_train`], calling `observer` after every iteration.
pub fn aksvd_train_with_observer(
    x: &DMatrix<f64>,
    cfg: &AkSvdConfig,
    init: Option<&Dictionary>,
    mut observer: impl FnMut(&IterationRecord, &Dictionary),
) -> Result<AkSvdOutput> {
    if cfg.k == 0 || cfg.k > x.ncols() {
        return Err(Error::InvalidParameter(format!(
            "K must be in 1..={}, got {}",
            x.ncols(),
            cfg.k
        )));
    }
    if cfg.sparsity == 0 || cfg.iterations == 0 {
        return Err(Error::InvalidParameter("sparsity and iterations must be >= 1".into()));
    }
    let mut clock = 0.0;
    let start = Instant::now();
    let mut dict = match init {
        Some(d) => {
            check_dim("initial dictionary rows", x.nrows(), d.p())?;
            check_dim("initial dictionary atoms", cfg.k, d.num_atoms())?;
            d.clone()
        }
        None => Dictionary::random(x.nrows(), cfg.k, derive_seed(cfg.seed, u64::MAX))?,
    };
    clock += start.elapsed().as_secs_f64();

    let mut history = Vec::with_capacity(cfg.iterations);
    let mut codes = Vec::new();
    for it in 1..=cfg.iterations {
        let start = Instant::now();
        let c = code_samples(x, dict.matrix(), cfg.sparsity)?;
        let mut st = State::new(x, dict.matrix(), c);
        let mut donors = Vec::new();
        let mut replaced = 0;
        for k in 0..cfg.k {
            let d_old = dict.atom(k);
            let (e, g) = st.restricted(k, &d_old);
            let mut d = &e * &g;
            if g.is_empty() || !canonicalize(&mut d) {
                replaced += 1;
                d = st.replacement(&mut donors, cfg.seed, it, k);
            }
            dict.set_atom(k, &d);
            let d = dict.atom(k);
            let g_new = e.transpose() * &d;
            st.install(k, &d, &e, &g_new);
        }
        let objective = st.residual.norm_squared();
        if !objective.is_finite() {
            return Err(Error::Numerical(format!("objective became {objective} at iteration {it}")));
        }
        clock += start.elapsed().as_secs_f64();
        let record = IterationRecord {
            iteration: it,
            objective,
            seconds: clock,
            replaced_atoms: replaced,
            zeroed_coefficients: 0,
        };
        observer(&record, &dict);
        history.push(record);
        codes = st.codes;
    }
    Ok(AkSvdOutput {
        dictionary: dict,
        history,
        codes,
    })
}
