//! Synthetic sparse data, atom recovery scoring and the end-to-end recovery
//! experiment.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;

use crate::baseline::{aksvd_train_with_observer, AkSvdConfig};
use crate::cksvd::{train_with_observer, TrainConfig};
use crate::config::{ExperimentConfig, Method};
use crate::dictionary::Dictionary;
use crate::error::{check_dim, Error, Result};
use crate::kmeans::{kmeans_train_with_observer, KMeansConfig};
use crate::linalg::SolveMode;
use crate::seed::{derive_seed, rng_from_seed, stream};
use crate::sketching::{sketch_blocks, BlockPartition, SketchConfig};
use crate::sparse_coding::SparseCode;

/// Coherence above which a learned atom counts as recovered.
pub const RECOVERY_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoefficientLaw {
    /// `N(0, coeff_std^2)`.
    Gaussian,
    /// Every coefficient equal to 1.
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub p: usize,
    pub k: usize,
    pub n: usize,
    pub t: usize,
    pub coeff_std: f64,
    pub noise_var: f64,
    pub coefficients: CoefficientLaw,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(p: usize, k: usize, n: usize, t: usize, seed: u64) -> Self {
        Self {
            p,
            k,
            n,
            t,
            coeff_std: 10.0,
            noise_var: 0.04,
            coefficients: CoefficientLaw::Gaussian,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.k == 0 || self.n == 0 || self.t == 0 {
            return Err(Error::InvalidParameter("p, K, n and T must be >= 1".into()));
        }
        if self.t > self.k {
            return Err(Error::InvalidParameter(format!("T = {} exceeds K = {}", self.t, self.k)));
        }
        if !(self.coeff_std >= 0.0) || !(self.noise_var >= 0.0) {
            return Err(Error::InvalidParameter("coeff_std and noise_var must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub x: DMatrix<f64>,
    pub dictionary: Dictionary,
    pub codes: Vec<SparseCode>,
}

/// `X = D C + noise` with atom entries uniform on `[-1, 1]` before
/// normalization and `T` distinct atoms per sample.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let raw = DMatrix::from_fn(cfg.p, cfg.k, |_, _| rng.random_range(-1.0..=1.0));
    let dictionary = Dictionary::from_columns(raw)?;
    let d = dictionary.matrix();
    let coeff = Normal::new(0.0, cfg.coeff_std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let noise_std = cfg.noise_var.sqrt();
    let mut x = DMatrix::zeros(cfg.p, cfg.n);
    let mut codes = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut support = sample_indices(&mut rng, cfg.k, cfg.t).into_vec();
        support.sort_unstable();
        let values: Vec<f64> = support
            .iter()
            .map(|_| match cfg.coefficients {
                CoefficientLaw::Gaussian => rng.sample(coeff),
                CoefficientLaw::Ones => 1.0,
            })
            .collect();
        let mut col = x.column_mut(i);
        for (&j, &v) in support.iter().zip(&values) {
            col.axpy(v, &d.column(j), 1.0);
        }
        if noise_std > 0.0 {
            for v in col.iter_mut() {
                *v += noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        codes.push(SparseCode { support, values });
    }
    Ok(SyntheticData { x, dictionary, codes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryScore {
    /// `(learned, true, |cos|)` in matching order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub recovered_fraction: f64,
    pub threshold: f64,
}

/// Greedy one-to-one matching on `|<learned, true>|`, both columns normalized.
pub fn match_atoms(learned: &DMatrix<f64>, truth: &DMatrix<f64>, threshold: f64) -> Result<RecoveryScore> {
    check_dim("match_atoms rows", truth.nrows(), learned.nrows())?;
    check_dim("match_atoms atoms", truth.ncols(), learned.ncols())?;
    let k = truth.ncols();
    let unit = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for mut c in out.column_iter_mut() {
            let n = c.norm();
            if n > 0.0 {
                c /= n;
            }
        }
        out
    };
    let coh = (unit(learned).transpose() * unit(truth)).abs();
    let mut used_l = vec![false; k];
    let mut used_t = vec![false; k];
    let mut pairs = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best = (-1.0, 0, 0);
        for i in (0..k).filter(|&i| !used_l[i]) {
            for j in (0..k).filter(|&j| !used_t[j]) {
                if coh[(i, j)] > best.0 {
                    best = (coh[(i, j)], i, j);
                }
            }
        }
        used_l[best.1] = true;
        used_t[best.2] = true;
        pairs.push((best.1, best.2, best.0));
    }
    let hits = pairs.iter().filter(|p| p.2 > threshold).count();
    Ok(RecoveryScore {
        pairs,
        recovered_fraction: hits as f64 / k as f64,
        threshold,
    })
}

/// One CSV row of the experiment output.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub method: Method,
    pub gamma: Option<f64>,
    pub trial: usize,
    pub iteration: usize,
    pub recovery: f64,
    pub objective: f64,
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "method,gamma,trial,iteration,recovery,objective,seconds";

impl ExperimentRow {
    pub fn to_csv(&self) -> String {
        let gamma = self.gamma.map(|g| format!("{g:.16e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{:.16e},{:.16e},{:.16e}",
            self.method, gamma, self.trial, self.iteration, self.recovery, self.objective, self.seconds
        )
    }
}

/// Recovery for `(method, gamma)` averaged over trials, one value per iteration.
pub fn mean_curve(rows: &[ExperimentRow], method: Method, gamma: Option<f64>) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.method == method && r.gamma == gamma) {
        if sums.len() < r.iteration {
            sums.resize(r.iteration, (0.0, 0));
        }
        sums[r.iteration - 1].0 += r.recovery;
        sums[r.iteration - 1].1 += 1;
    }
    sums.into_iter().map(|(s, c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect()
}

/// Centered moving average over a window of `w` (shrunk at the ends).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + w - half).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

pub fn trial_seed(cfg: &ExperimentConfig, trial: usize) -> u64 {
    derive_seed(cfg.master_seed, trial as u64)
}

/// The synthetic data set of one trial.
pub fn synthetic_for_trial(cfg: &ExperimentConfig, trial: usize) -> Result<SyntheticData> {
    let ts = trial_seed(cfg, trial);
    let mut syn = SyntheticConfig::new(cfg.p, cfg.k, cfg.n, cfg.t, derive_seed(ts, stream::DATA));
    syn.coeff_std = cfg.coeff_std;
    syn.noise_var = cfg.noise_var;
    syn.coefficients = cfg.coefficients;
    generate_synthetic(&syn)
}

/// The initial dictionary shared by all methods of one trial.
pub fn initial_dictionary(cfg: &ExperimentConfig, trial: usize) -> Result<Dictionary> {
    Dictionary::random(cfg.p, cfg.k, derive_seed(trial_seed(cfg, trial), stream::INIT))
}

/// Sketch settings of one trial, one per entry of
/// [`ExperimentConfig::projection_settings`].
pub fn sketch_configs(cfg: &ExperimentConfig, trial: usize) -> Result<Vec<(Option<f64>, SketchConfig)>> {
    let ts = trial_seed(cfg, trial);
    Ok(cfg
        .projection_settings()?
        .into_iter()
        .enumerate()
        .map(|(gi, (gamma, dist))| {
            (
                gamma,
                SketchConfig {
                    m: cfg.m(),
                    dist,
                    blocks: cfg.blocks,
                    master_seed: derive_seed(ts, stream::SKETCH_BASE + gi as u64),
                },
            )
        })
        .collect())
}

pub fn solve_mode(cfg: &ExperimentConfig) -> SolveMode {
    if cfg.ridge > 0.0 {
        SolveMode::Ridge { eps: cfg.ridge }
    } else {
        SolveMode::default()
    }
}

fn trial_rows(cfg: &ExperimentConfig, trial: usize) -> Result<Vec<ExperimentRow>> {
    let ts = trial_seed(cfg, trial);
    let data = synthetic_for_trial(cfg, trial)?;
    let truth = data.dictionary.matrix();
    let d0 = initial_dictionary(cfg, trial)?;
    let solve = solve_mode(cfg);
    let mut rows = Vec::new();
    let mut first_error: Option<Error> = None;
    for &method in &cfg.methods {
        if method == Method::Aksvd {
            let ak = AkSvdConfig {
                k: cfg.k,
                sparsity: cfg.t,
                iterations: cfg.iterations,
                seed: ts,
            };
            aksvd_train_with_observer(&data.x, &ak, Some(&d0), |rec, d| {
                match match_atoms(d.matrix(), truth, RECOVERY_THRESHOLD) {
                    Ok(score) => rows.push(ExperimentRow {
                        method,
                        gamma: None,
                        trial,
                        iteration: rec.iteration,
                        recovery: score.recovered_fraction,
                        objective: rec.objective,
                        seconds: rec.seconds,
                    }),
                    Err(e) => {
                        first_error.get_or_insert(e);
                    }
                }
            })?;
            continue;
        }
        let partition = BlockPartition::even(cfg.n, cfg.blocks)?;
        for (gamma, sketch_cfg) in sketch_configs(cfg, trial)? {
            let sketches = sketch_blocks(&data.x, &partition, &sketch_cfg)?;
            let mut record = |iteration: usize, objective: f64, seconds: f64, d: &DMatrix<f64>| {
                match match_atoms(d, truth, RECOVERY_THRESHOLD) {
                    Ok(score) => rows.push(ExperimentRow {
                        method,
                        gamma,
                        trial,
                        iteration,
                        recovery: score.recovered_fraction,
                        objective,
                        seconds,
                    }),
                    Err(e) => {
                        first_error.get_or_insert(e);
                    }
                }
            };
            match method {
                Method::Cksvd => {
                    let mut tc = TrainConfig::new(cfg.t, cfg.iterations, ts);
                    tc.delayed_refit = cfg.delayed_refit;
                    tc.solve = solve;
                    train_with_observer(&sketches, cfg.k, &tc, Some(&d0), |rec, d| {
                        record(rec.iteration, rec.objective, rec.seconds, d.matrix())
                    })?;
                }
                Method::Kmeans => {
                    let mut kc = KMeansConfig::new(cfg.k, cfg.iterations, derive_seed(ts, stream::KMEANS));
                    kc.solve = solve;
                    kmeans_train_with_observer(&sketches, &kc, |rec, c| {
                        record(rec.iteration, rec.objective, rec.seconds, c)
                    })?;
                }
                Method::Aksvd => unreachable!(),
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}

/// Run every trial and write the CSV to `out`. Trials run in parallel waves
/// of the current thread-pool size; each wave is written and flushed in trial
/// order, so the output does not depend on the number of threads.
pub fn run_experiment<W: Write>(cfg: &ExperimentConfig, mut out: W) -> Result<Vec<ExperimentRow>> {
    cfg.validate()?;
    writeln!(out, "{CSV_HEADER}")?;
    let wave = rayon::current_num_threads().max(1);
    let mut all = Vec::new();
    for start in (0..cfg.trials).step_by(wave) {
        let end = (start + wave).min(cfg.trials);
        let results = (start..end)
            .into_par_iter()
            .map(|t| trial_rows(cfg, t))
            .collect::<Vec<_>>();
        for res in results {
            let rows = res?;
            for r in &rows {
                writeln!(out, "{}", r.to_csv())?;
            }
            out.flush()?;
            log::info!(
                "trial {} done, final recovery {:?}",
                rows.first().map_or(0, |r| r.trial),
                rows.last().map(|r| r.recovery)
            );
            all.extend(rows);
        }
    }
    Ok(all)
}

/// The CSV without its `seconds` column, for reproducibility comparisons.
pub fn strip_seconds(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Empirical mean of `||x||^2`.
pub fn mean_energy(x: &DMatrix<f64>) -> f64 {
    x.column_iter().map(|c| c.norm_squared()).sum::<f64>() / x.ncols() as f64
}

/// Unit-norm columns of `m` (zero columns stay zero).
pub fn normalized_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = m
        .column_iter()
        .map(|c| {
            let n = c.norm();
            if n > 0.0 {
                c / n
            } else {
                c.into_owned()
            }
        })
        .collect();
    DMatrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::gaussian_matrix;

    #[test]
    fn ones_noiseless_t1_columns_are_atoms() {
        let mut cfg = SyntheticConfig::new(12, 5, 40, 1, 3);
        cfg.noise_var = 0.0;
        cfg.coefficients = CoefficientLaw::Ones;
        let data = generate_synthetic(&cfg).unwrap();
        for (i, code) in data.codes.iter().enumerate() {
            assert_eq!(data.x.column(i), data.dictionary.matrix().column(code.support[0]));
        }
    }

    #[test]
    fn synthetic_structure_and_energy() {
        let cfg = SyntheticConfig::new(64, 10, 4000, 3, 8);
        let data = generate_synthetic(&cfg).unwrap();
        assert!(data.dictionary.max_norm_error() < 1e-12);
        assert!(data.codes.iter().all(|c| c.support.len() == 3 && c.support.windows(2).all(|w| w[0] < w[1])));
        let energies: Vec<f64> = data.x.column_iter().map(|c| c.norm_squared()).collect();
        let mean = energies.iter().sum::<f64>() / energies.len() as f64;
        let var = energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (energies.len() - 1) as f64;
        let se = (var / energies.len() as f64).sqrt();
        let expected = 3.0 * 100.0 + 64.0 * 0.04;
        // Atoms are not orthogonal, so cross terms add zero-mean fluctuation only.
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean} expected {expected} se {se}");
    }

    #[test]
    fn synthetic_determinism() {
        let a = generate_synthetic(&SyntheticConfig::new(8, 4, 30, 2, 1)).unwrap();
        let b = generate_synthetic(&SyntheticConfig::new(8, 4, 30, 2, 1)).unwrap();
        let c = generate_synthetic(&SyntheticConfig::new(8, 4, 30, 2, 2)).unwrap();
        assert_eq!(a.x, b.x);
        assert_ne!(a.x, c.x);
        assert!(generate_synthetic(&SyntheticConfig::new(8, 2, 30, 3, 1)).is_err());
    }

    #[test]
    fn matching_examples() {
        let truth = Dictionary::random(20, 6, 4).unwrap().into_matrix();
        let same = match_atoms(&truth, &truth, RECOVERY_THRESHOLD).unwrap();
        assert_eq!(same.recovered_fraction, 1.0);
        let neg = match_atoms(&(-&truth), &truth, RECOVERY_THRESHOLD).unwrap();
        assert_eq!(neg.recovered_fraction, 1.0);
        // Replace atom 2 by a vector orthogonal to every true atom.
        let mut learned = truth.clone();
        let z = gaussian_matrix(20, 1, 9).column(0).into_owned();
        let q = truth.clone().qr().q();
        let ortho = &z - &q * (q.transpose() * &z);
        learned.set_column(2, &(ortho.normalize()));
        let score = match_atoms(&learned, &truth, RECOVERY_THRESHOLD).unwrap();
        assert!((score.recovered_fraction - 5.0 / 6.0).abs() < 1e-15);
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn greedy_matches_exhaustive_assignment_on_noisy_copies() {
        let truth = Dictionary::random(30, 6, 1).unwrap().into_matrix();
        for seed in 0..10 {
            let noisy = &truth + gaussian_matrix(30, 6, 100 + seed) * 0.03;
            let mut perm = noisy.clone();
            let order = [3, 0, 5, 1, 4, 2];
            for (dst, &src) in order.iter().enumerate() {
                perm.set_column(dst, &noisy.column(src));
            }
            let greedy = match_atoms(&perm, &truth, RECOVERY_THRESHOLD).unwrap();
            let coh = (normalized_columns(&perm).transpose() * normalized_columns(&truth)).abs();
            let best = permutations(6)
                .iter()
                .map(|p| p.iter().enumerate().filter(|&(i, &j)| coh[(i, j)] > RECOVERY_THRESHOLD).count())
                .max()
                .unwrap();
            assert_eq!((greedy.recovered_fraction * 6.0).round() as usize, best);
            let base = match_atoms(&noisy, &truth, RECOVERY_THRESHOLD).unwrap();
            assert_eq!(base.recovered_fraction, greedy.recovered_fraction);
        }
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 2.0, 3.0], 1), vec![1.0, 2.0, 3.0]);
        let s = smooth(&[0.0, 0.0, 5.0, 0.0, 0.0], 5);
        assert!(s.iter().all(|&v| (v - 5.0 / 3.0).abs() < 1e-12 || (v - 1.25).abs() < 1e-12 || (v - 1.0).abs() < 1e-12));
    }

    fn tiny_config(methods: &str) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            "p=16\nK=4\nn=200\nT=2\nL=4\nm_over_p=0.5\ngamma_list=1/2,1/4\niterations=1\ntrials=1\nmaster_seed=3\nmethod={methods}\n"
        ))
        .unwrap()
    }

    #[test]
    fn one_row_per_method_and_gamma() {
        let cfg = tiny_config("cksvd,aksvd,kmeans");
        let mut out = Vec::new();
        let rows = run_experiment(&cfg, &mut out).unwrap();
        assert_eq!(rows.len(), 2 + 1 + 2);
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        let aksvd = text.lines().find(|l| l.starts_with("aksvd")).unwrap();
        assert!(aksvd.starts_with("aksvd,,0,1,"));
        for l in text.lines().skip(1) {
            assert_eq!(l.split(',').count(), 7);
        }
    }

    #[test]
    fn repeated_runs_match_without_seconds() {
        let mut cfg = tiny_config("cksvd,aksvd");
        cfg.iterations = 3;
        cfg.trials = 2;
        let mut a = Vec::new();
        let mut b = Vec::new();
        run_experiment(&cfg, &mut a).unwrap();
        run_experiment(&cfg, &mut b).unwrap();
        let (a, b) = (String::from_utf8(a).unwrap(), String::from_utf8(b).unwrap());
        assert_eq!(strip_seconds(&a), strip_seconds(&b));
    }

    #[test]
    fn mean_curve_averages_trials() {
        let row = |trial, iteration, recovery| ExperimentRow {
            method: Method::Cksvd,
            gamma: Some(0.5),
            trial,
            iteration,
            recovery,
            objective: 0.0,
            seconds: 0.0,
        };
        let rows = vec![row(0, 1, 0.2), row(1, 1, 0.4), row(0, 2, 1.0), row(1, 2, 0.0)];
        let c = mean_curve(&rows, Method::Cksvd, Some(0.5));
        assert!((c[0] - 0.3).abs() < 1e-15 && (c[1] - 0.5).abs() < 1e-15);
        assert!(mean_curve(&rows, Method::Aksvd, None).is_empty());
    }

    mod props {
        use super::*;
        use crate::testutil::gaussian_matrix;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn matching_ignores_permutation_and_signs(
                seed in any::<u64>(),
                k in 1usize..7,
                perm_seed in any::<u64>(),
                flips in prop::collection::vec(any::<bool>(), 7),
            ) {
                let truth = normalized_columns(&gaussian_matrix(8, k, seed));
                let learned = normalized_columns(&(&truth + gaussian_matrix(8, k, seed ^ 1) * 0.3));
                let base = match_atoms(&learned, &truth, RECOVERY_THRESHOLD).unwrap();
                let mut order: Vec<usize> = (0..k).collect();
                let mut rng = crate::seed::rng_from_seed(perm_seed);
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                let shuffled = DMatrix::from_fn(8, k, |i, j| {
                    let v = learned[(i, order[j])];
                    if flips[j] { -v } else { v }
                });
                let other = match_atoms(&shuffled, &truth, RECOVERY_THRESHOLD).unwrap();
                prop_assert_eq!(base.recovered_fraction, other.recovered_fraction);
                let scaled = base.recovered_fraction * k as f64;
                prop_assert!((scaled - scaled.round()).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&base.recovered_fraction));
            }
        }
    }
}
