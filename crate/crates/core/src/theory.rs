//! Concentration bounds for the K-means operators `H_k` and `f_k`, and their
//! Monte-Carlo check.
//!
//! For `|I|` i.i.d. projections with entry kurtosis `kappa`,
//!
//! ```text
//! P(||H - I||_F / sqrt(p) > eta) <= P0 = (kappa + 1 + p) / (m |I| eta^2)
//! P(||f - d|| / ||d|| > eta)     <= P1 = P0 + (P0 + 1 / (|I| eta^2)) / SNR
//! ```

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::projections::{ProjectionDistribution, ProjectionMatrix, Storage};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub p: usize,
    pub m: usize,
    pub cluster_size: usize,
    pub kappa: f64,
    pub eta: f64,
    /// `||d||^2 / sigma^2`; infinite for noiseless data.
    pub snr: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.m == 0 || self.cluster_size == 0 {
            return Err(Error::InvalidParameter("p, m and cluster size must be >= 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidParameter(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.snr > 0.0) {
            return Err(Error::InvalidParameter(format!("SNR must be > 0, got {}", self.snr)));
        }
        if !(self.kappa >= -2.0) {
            return Err(Error::InvalidParameter(format!("kurtosis must be >= -2, got {}", self.kappa)));
        }
        Ok(())
    }
}

/// `(kappa + 1 + p) / (m |I| eta^2)`. Values above 1 are returned unchanged.
pub fn p0_bound(params: &BoundParams) -> f64 {
    (params.kappa + 1.0 + params.p as f64)
        / (params.m as f64 * params.cluster_size as f64 * params.eta * params.eta)
}

pub fn p1_bound(params: &BoundParams) -> f64 {
    let p0 = p0_bound(params);
    p0 + (p0 + 1.0 / (params.cluster_size as f64 * params.eta * params.eta)) / params.snr
}

/// The `eta` at which [`p0_bound`] equals `target_p0`.
pub fn eta_for_p0(target_p0: f64, p: usize, m: usize, cluster_size: usize, kappa: f64) -> Result<f64> {
    if !(target_p0 > 0.0) {
        return Err(Error::InvalidParameter(format!("target P0 must be > 0, got {target_p0}")));
    }
    Ok(((kappa + 1.0 + p as f64) / (m as f64 * cluster_size as f64 * target_p0)).sqrt())
}

/// Sparse matrices with at least `1 / STACK_DENSITY_INV` nonzero entries go
/// through the dense product.
const STACK_DENSITY_INV: usize = 8;

/// `H = 1/(m mu2 |I|) sum_i R_i R_i^T`.
pub fn hk_matrix(projections: &[ProjectionMatrix]) -> Result<DMatrix<f64>> {
    let first = projections
        .first()
        .ok_or_else(|| Error::InvalidParameter("no projections".into()))?;
    let (p, m) = (first.p(), first.m());
    let w = 1.0 / (first.dist().expected_gram_scale(m)? * projections.len() as f64);
    let mut h = DMatrix::zeros(p, p);
    // Dense enough matrices are stacked so the Gram is one large product;
    // very sparse ones are accumulated entrywise into the upper triangle.
    const CHUNK: usize = 32;
    let mut buf: Option<DMatrix<f64>> = None;
    let mut filled = 0;
    let mut upper_used = false;
    let mut nz: Vec<(usize, f64)> = Vec::new();
    for r in projections {
        match r.storage() {
            Storage::Sparse(csc) if csc.nnz() * STACK_DENSITY_INV < p * m => {
                let hs = h.as_mut_slice();
                for j in 0..m {
                    nz.clear();
                    nz.extend(csc.column(j));
                    for (ia, &(a, sa)) in nz.iter().enumerate() {
                        let wa = w * sa;
                        for &(b, sb) in &nz[ia..] {
                            hs[a + b * p] += wa * sb;
                        }
                    }
                }
                upper_used = true;
            }
            storage => {
                let b = buf.get_or_insert_with(|| DMatrix::zeros(p, m * CHUNK));
                let mut cols = b.columns_mut(filled * m, m);
                match storage {
                    Storage::Dense(d) => cols.copy_from(d),
                    Storage::Sparse(csc) => {
                        cols.fill(0.0);
                        for j in 0..m {
                            for (i, v) in csc.column(j) {
                                cols[(i, j)] = v;
                            }
                        }
                    }
                }
                filled += 1;
                if filled == CHUNK {
                    h.gemm(w, b, &b.transpose(), 1.0);
                    filled = 0;
                }
            }
        }
    }
    if filled > 0 {
        let b = buf.unwrap().columns(0, filled * m).into_owned();
        h.gemm(w, &b, &b.transpose(), 1.0);
    }
    if upper_used {
        // The stacked part is already symmetric, so mirroring the strict upper
        // triangle onto the lower one adds only the entrywise contributions.
        for b in 0..p {
            for a in 0..b {
                let extra = h[(a, b)] - h[(b, a)];
                h[(b, a)] += extra;
            }
        }
    }
    Ok(h)
}

/// `||H - I||_F / ||I||_F` with `||I||_F = sqrt(p)`.
pub fn hk_distance(h: &DMatrix<f64>) -> f64 {
    let p = h.nrows();
    let mut sum = 0.0;
    for j in 0..p {
        for i in 0..p {
            let v = if i == j { h[(i, j)] - 1.0 } else { h[(i, j)] };
            sum += v * v;
        }
    }
    sum.sqrt() / (p as f64).sqrt()
}

/// `f = 1/(m mu2 |I|) sum_i R_i R_i^T x_i`, one sample per projection.
pub fn fk_vector(projections: &[ProjectionMatrix], samples: &[DVector<f64>]) -> Result<DVector<f64>> {
    if projections.len() != samples.len() || projections.is_empty() {
        return Err(Error::InvalidParameter("need one sample per projection".into()));
    }
    let first = &projections[0];
    let w = 1.0 / (first.dist().expected_gram_scale(first.m())? * projections.len() as f64);
    let mut f = DVector::zeros(first.p());
    let mut y = vec![0.0; first.m()];
    for (r, x) in projections.iter().zip(samples) {
        r.apply_transpose_into(x.as_slice(), &mut y);
        r.apply_add(&y, w, f.as_mut_slice());
    }
    Ok(f)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MonteCarloKind {
    Hk,
    Fk { snr: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloCell {
    pub cluster_size: usize,
    /// One relative distance per trial.
    pub distances: Vec<f64>,
}

impl MonteCarloCell {
    pub fn mean_distance(&self) -> f64 {
        self.distances.iter().sum::<f64>() / self.distances.len() as f64
    }

    /// Fraction of trials with distance above `eta`.
    pub fn violation_rate(&self, eta: f64) -> f64 {
        self.distances.iter().filter(|&&d| d > eta).count() as f64 / self.distances.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloReport {
    pub kind: MonteCarloKind,
    pub dist: ProjectionDistribution,
    pub p: usize,
    pub m: usize,
    pub trials: usize,
    pub seed: u64,
    pub cells: Vec<MonteCarloCell>,
}

impl MonteCarloReport {
    pub fn cell(&self, cluster_size: usize) -> Option<&MonteCarloCell> {
        self.cells.iter().find(|c| c.cluster_size == cluster_size)
    }

    pub fn params(&self, cluster_size: usize, eta: f64) -> Result<BoundParams> {
        Ok(BoundParams {
            p: self.p,
            m: self.m,
            cluster_size,
            kappa: self.dist.kurtosis()?,
            eta,
            snr: match self.kind {
                MonteCarloKind::Hk => f64::INFINITY,
                MonteCarloKind::Fk { snr } => snr,
            },
        })
    }

    /// One CSV row per (cell, target P0), with `eta = eta_for_p0(target)`.
    pub fn write_csv<W: Write>(&self, mut w: W, p0_targets: &[f64], header: bool) -> Result<()> {
        if header {
            writeln!(w, "{CSV_HEADER}")?;
        }
        let kappa = self.dist.kurtosis()?;
        for cell in &self.cells {
            for &target in p0_targets {
                let eta = eta_for_p0(target, self.p, self.m, cell.cluster_size, kappa)?;
                let params = self.params(cell.cluster_size, eta)?;
                writeln!(
                    w,
                    "{},{},{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                    self.dist.name(),
                    self.dist.parameter(),
                    self.p,
                    self.m,
                    cell.cluster_size,
                    self.trials,
                    cell.mean_distance(),
                    eta,
                    cell.violation_rate(eta),
                    p0_bound(&params),
                    p1_bound(&params),
                )?;
            }
        }
        Ok(())
    }
}

pub const CSV_HEADER: &str =
    "dist,s_or_variance,p,m,cluster_size,trials,mean_distance,eta,violation_rate,p0,p1";

fn trial_seed(seed: u64, cluster_size: usize, trial: usize) -> u64 {
    derive_seed(derive_seed(seed, cluster_size as u64), trial as u64)
}

fn sample_set(dist: ProjectionDistribution, p: usize, m: usize, count: usize, seed: u64) -> Result<Vec<ProjectionMatrix>> {
    (0..count)
        .map(|i| ProjectionMatrix::sample(dist, p, m, derive_seed(seed, i as u64)))
        .collect()
}

fn check_grid(p: usize, m: usize, cluster_sizes: &[usize], trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    if p == 0 || m == 0 || cluster_sizes.is_empty() || cluster_sizes.contains(&0) {
        return Err(Error::InvalidParameter("p, m and cluster sizes must be >= 1".into()));
    }
    Ok(())
}

fn run_grid(
    cluster_sizes: &[usize],
    trials: usize,
    trial_fn: impl Fn(usize, usize) -> Result<f64> + Sync,
) -> Result<Vec<MonteCarloCell>> {
    let jobs: Vec<(usize, usize)> = cluster_sizes
        .iter()
        .flat_map(|&c| (0..trials).map(move |t| (c, t)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(c, t)| trial_fn(c, t))
        .collect::<Result<Vec<f64>>>()?;
    Ok(cluster_sizes
        .iter()
        .zip(results.chunks(trials))
        .map(|(&cluster_size, d)| MonteCarloCell {
            cluster_size,
            distances: d.to_vec(),
        })
        .collect())
}

/// Distance of `H_k` from the identity over `trials` independent draws per
/// cluster size.
pub fn monte_carlo_hk(
    dist: ProjectionDistribution,
    p: usize,
    m: usize,
    cluster_sizes: &[usize],
    trials: usize,
    seed: u64,
) -> Result<MonteCarloReport> {
    dist.validate()?;
    check_grid(p, m, cluster_sizes, trials)?;
    let cells = run_grid(cluster_sizes, trials, |c, t| {
        let mats = sample_set(dist, p, m, c, trial_seed(seed, c, t))?;
        Ok(hk_distance(&hk_matrix(&mats)?))
    })?;
    Ok(MonteCarloReport {
        kind: MonteCarloKind::Hk,
        dist,
        p,
        m,
        trials,
        seed,
        cells,
    })
}

/// Relative distance of `f_k` from the cluster center. Each trial draws a unit
/// center uniformly on the sphere and samples `x_i = d + e_i` with
/// `e_i ~ N(0, sigma^2 / p I)` and `sigma^2 = 1 / SNR`.
pub fn monte_carlo_fk(
    dist: ProjectionDistribution,
    p: usize,
    m: usize,
    cluster_sizes: &[usize],
    snr: f64,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloReport> {
    let mut reports = monte_carlo_fk_snrs(dist, p, m, cluster_sizes, &[snr], trials, seed)?;
    Ok(reports.remove(0))
}

/// [`monte_carlo_fk`] for several SNR values at once. Every SNR sees the same
/// projections, centers and noise directions, so each report equals the one
/// `monte_carlo_fk` returns for that SNR up to rounding.
pub fn monte_carlo_fk_snrs(
    dist: ProjectionDistribution,
    p: usize,
    m: usize,
    cluster_sizes: &[usize],
    snrs: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<MonteCarloReport>> {
    dist.validate()?;
    check_grid(p, m, cluster_sizes, trials)?;
    if snrs.is_empty() {
        return Err(Error::InvalidParameter("no SNR values".into()));
    }
    if let Some(bad) = snrs.iter().find(|&&snr| !(snr > 0.0)) {
        return Err(Error::InvalidParameter(format!("SNR must be > 0, got {bad}")));
    }
    let noise_stds: Vec<f64> = snrs.iter().map(|&snr| (1.0 / (snr * p as f64)).sqrt()).collect();
    let jobs: Vec<(usize, usize)> = cluster_sizes
        .iter()
        .flat_map(|&c| (0..trials).map(move |t| (c, t)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(c, t)| {
            let ts = trial_seed(seed, c, t);
            let mut rng = rng_from_seed(derive_seed(ts, u64::MAX));
            let mut center = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            center /= center.norm();
            let noise: Vec<DVector<f64>> = (0..c)
                .map(|_| DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let mats = sample_set(dist, p, m, c, ts)?;
            let f_center = fk_vector(&mats, &vec![center.clone(); c])?;
            let f_noise = fk_vector(&mats, &noise)?;
            Ok(noise_stds
                .iter()
                .map(|&sd| (&f_center + &f_noise * sd - &center).norm() / center.norm())
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(snrs
        .iter()
        .enumerate()
        .map(|(si, &snr)| {
            let cells = cluster_sizes
                .iter()
                .enumerate()
                .map(|(ci, &cluster_size)| MonteCarloCell {
                    cluster_size,
                    distances: results[ci * trials..(ci + 1) * trials]
                        .iter()
                        .map(|r| r[si])
                        .collect(),
                })
                .collect();
            MonteCarloReport {
                kind: MonteCarloKind::Fk { snr },
                dist,
                p,
                m,
                trials,
                seed,
                cells,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(p: usize, m: usize, c: usize, kappa: f64, eta: f64, snr: f64) -> BoundParams {
        BoundParams {
            p,
            m,
            cluster_size: c,
            kappa,
            eta,
            snr,
        }
    }

    #[test]
    fn p0_large_eta() {
        let v = p0_bound(&params(100, 30, 100, 0.0, 1e6, f64::INFINITY));
        assert!((v - 101.0 / 3e15).abs() < 1e-25);
        assert!(v < 1e-10);
    }

    #[test]
    fn eta_inversion() {
        let eta = eta_for_p0(0.5, 100, 30, 100, 0.0).unwrap();
        assert!((eta - (101.0f64 / 1500.0).sqrt()).abs() < 1e-15);
        assert!((eta - 0.2595).abs() < 5e-5);
        for &(target, c, kappa) in &[(0.5, 10, 0.0), (0.01, 1000, 7.0), (3.0, 1, -2.0)] {
            let eta = eta_for_p0(target, 100, 30, c, kappa).unwrap();
            let back = p0_bound(&params(100, 30, c, kappa, eta, 1.0));
            assert!((back - target).abs() <= 1e-12 * target);
        }
        assert!(eta_for_p0(0.0, 100, 30, 10, 0.0).is_err());
    }

    #[test]
    fn kurtosis_ratio() {
        let a = p0_bound(&params(100, 30, 100, 7.0, 0.3, 1.0));
        let b = p0_bound(&params(100, 30, 100, 0.0, 0.3, 1.0));
        assert!((a / b - 108.0 / 101.0).abs() < 1e-14);
        let e1 = eta_for_p0(0.5, 100, 30, 100, -2.0).unwrap();
        let e0 = eta_for_p0(0.5, 100, 30, 100, 0.0).unwrap();
        assert!(e1 < e0);
    }

    #[test]
    fn p0_scaling() {
        let base = p0_bound(&params(50, 10, 20, 1.0, 0.4, 1.0));
        assert!((p0_bound(&params(50, 20, 20, 1.0, 0.4, 1.0)) - base / 2.0).abs() < 1e-15);
        assert!((p0_bound(&params(50, 10, 60, 1.0, 0.4, 1.0)) - base / 3.0).abs() < 1e-15);
        assert!((p0_bound(&params(50, 10, 20, 1.0, 0.8, 1.0)) - base / 4.0).abs() < 1e-15);
    }

    #[test]
    fn p1_examples() {
        let mut pr = params(99, 10, 100, 0.0, 1.0, 1.0);
        let p0 = p0_bound(&pr);
        assert!((p0 - 0.1).abs() < 1e-15);
        assert!((p1_bound(&pr) - 0.21).abs() < 1e-15);
        pr.snr = f64::INFINITY;
        assert_eq!(p1_bound(&pr), p0);
        for snr in [0.1, 1.0, 10.0, 1e6] {
            pr.snr = snr;
            assert!(p1_bound(&pr) >= p0);
        }
    }

    #[test]
    fn identity_injection_gives_zero_distance() {
        let p = 6;
        let r = ProjectionMatrix::identity(p, 1.0 / p as f64).unwrap();
        let h = hk_matrix(std::slice::from_ref(&r)).unwrap();
        assert_eq!(hk_distance(&h), 0.0);
        let d = DVector::from_fn(p, |i, _| i as f64 - 2.0);
        let f = fk_vector(std::slice::from_ref(&r), &[d.clone()]).unwrap();
        assert!((f - d).amax() < 1e-15);
    }

    #[test]
    fn stacked_gram_matches_per_matrix_sum() {
        let laws = [
            ProjectionDistribution::gaussian(0.5).unwrap(),
            ProjectionDistribution::sparse_bernoulli(1.0).unwrap(),
            ProjectionDistribution::sparse_bernoulli(3.0).unwrap(),
            ProjectionDistribution::sparse_bernoulli(30.0).unwrap(),
        ];
        for dist in laws {
            let mats = sample_set(dist, 9, 4, 70, 3).unwrap();
            let h = hk_matrix(&mats).unwrap();
            let mut oracle = DMatrix::zeros(9, 9);
            for r in &mats {
                let d = r.to_dense();
                oracle += &d * d.transpose();
            }
            oracle /= 4.0 * dist.moments().unwrap().mu2 * 70.0;
            assert!((&h - oracle).amax() < 1e-12, "{dist:?}");
            assert_eq!(h, h.transpose());
        }
    }

    #[test]
    fn monte_carlo_shapes_and_determinism() {
        let dist = ProjectionDistribution::sparse_bernoulli(3.0).unwrap();
        let a = monte_carlo_hk(dist, 20, 6, &[5, 50], 10, 1).unwrap();
        let b = monte_carlo_hk(dist, 20, 6, &[5, 50], 10, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cells.len(), 2);
        assert!(a.cells[1].mean_distance() < a.cells[0].mean_distance());
        let v = a.cells[0].violation_rate(0.0);
        assert_eq!(v, 1.0);
        let mut out = Vec::new();
        a.write_csv(&mut out, &[0.5], true).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(CSV_HEADER));
        assert!(text.lines().nth(1).unwrap().starts_with("sparse,3,20,6,5,10,"));
    }

    #[test]
    fn fk_violation_grows_as_snr_drops() {
        let dist = ProjectionDistribution::gaussian_for_dim(30).unwrap();
        let hi = monte_carlo_fk(dist, 30, 10, &[40], 100.0, 150, 2).unwrap();
        let lo = monte_carlo_fk(dist, 30, 10, &[40], 0.5, 150, 2).unwrap();
        let eta = 0.5;
        assert!(lo.cells[0].violation_rate(eta) >= hi.cells[0].violation_rate(eta));
        assert!(lo.cells[0].mean_distance() > hi.cells[0].mean_distance());
    }

    #[test]
    fn invalid_inputs() {
        let dist = ProjectionDistribution::gaussian(1.0).unwrap();
        assert!(monte_carlo_hk(dist, 10, 3, &[5], 0, 0).is_err());
        assert!(monte_carlo_hk(dist, 10, 3, &[0], 1, 0).is_err());
        assert!(monte_carlo_fk(dist, 10, 3, &[5], 0.0, 1, 0).is_err());
        assert!(monte_carlo_fk_snrs(dist, 10, 3, &[5], &[], 1, 0).is_err());
        assert!(params(10, 3, 5, 0.0, 0.0, 1.0).validate().is_err());
        assert!(params(10, 3, 5, -3.0, 1.0, 1.0).validate().is_err());
        assert!(params(10, 3, 5, 0.0, 1.0, 1.0).validate().is_ok());
    }

    #[test]
    fn shared_snr_sweep_matches_single_runs() {
        let dist = ProjectionDistribution::sparse_bernoulli(3.0).unwrap();
        let snrs = [0.5, 10.0, 1e6];
        let all = monte_carlo_fk_snrs(dist, 25, 8, &[3, 30], &snrs, 12, 4).unwrap();
        for (rep, &snr) in all.iter().zip(&snrs) {
            let one = monte_carlo_fk(dist, 25, 8, &[3, 30], snr, 12, 4).unwrap();
            assert_eq!(rep.kind, one.kind);
            for (a, b) in rep.cells.iter().zip(&one.cells) {
                for (x, y) in a.distances.iter().zip(&b.distances) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bound_scaling(
                p in 1usize..500,
                m in 1usize..100,
                c in 1usize..1000,
                kappa in -2.0f64..50.0,
                eta in 0.01f64..10.0,
                snr in 0.01f64..1e6,
            ) {
                let base = BoundParams { p, m, cluster_size: c, kappa, eta, snr };
                let p0 = p0_bound(&base);
                let twice_m = BoundParams { m: 2 * m, ..base };
                let twice_c = BoundParams { cluster_size: 2 * c, ..base };
                let twice_eta = BoundParams { eta: 2.0 * eta, ..base };
                prop_assert!(crate::testutil::rel_close(p0_bound(&twice_m), p0 / 2.0, 1e-12));
                prop_assert!(crate::testutil::rel_close(p0_bound(&twice_c), p0 / 2.0, 1e-12));
                prop_assert!(crate::testutil::rel_close(p0_bound(&twice_eta), p0 / 4.0, 1e-12));
                prop_assert!(p1_bound(&base) >= p0);
                let back = eta_for_p0(p0, p, m, c, kappa).unwrap();
                prop_assert!(crate::testutil::rel_close(back, eta, 1e-12));
            }
        }
    }
}
