//! `key = value` experiment configuration.
//!
//! One pair per line; `#` starts a comment. Unknown or repeated keys are
//! rejected. Gamma values may be written as fractions (`1/30`).

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::experiment::CoefficientLaw;
use crate::projections::ProjectionDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Cksvd,
    Aksvd,
    Kmeans,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cksvd => "cksvd",
            Method::Aksvd => "aksvd",
            Method::Kmeans => "kmeans",
        }
    }

    /// Whether the method trains on sketches.
    pub fn compressive(self) -> bool {
        !matches!(self, Method::Aksvd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cksvd" => Ok(Method::Cksvd),
            "aksvd" => Ok(Method::Aksvd),
            "kmeans" => Ok(Method::Kmeans),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistKind {
    Sparse,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub p: usize,
    pub k: usize,
    pub n: usize,
    pub t: usize,
    pub blocks: usize,
    pub m_over_p: f64,
    pub gamma_list: Vec<f64>,
    pub dist: DistKind,
    /// Sparse-Bernoulli parameter, used when `gamma_list` is empty.
    pub s: Option<f64>,
    /// Gaussian entry variance; `1/p` when absent.
    pub variance: Option<f64>,
    pub iterations: usize,
    pub trials: usize,
    pub master_seed: u64,
    pub methods: Vec<Method>,
    pub delayed_refit: bool,
    /// Ridge shift for the atom solve; 0 selects the pseudo-inverse.
    pub ridge: f64,
    pub output_path: Option<PathBuf>,
    pub coeff_std: f64,
    pub noise_var: f64,
    pub coefficients: CoefficientLaw,
}

const KEYS: &[&str] = &[
    "p",
    "K",
    "n",
    "T",
    "L",
    "m_over_p",
    "gamma_list",
    "dist",
    "s",
    "variance",
    "iterations",
    "trials",
    "master_seed",
    "method",
    "delayed_refit",
    "ridge",
    "output_path",
    "coeff_std",
    "noise_var",
    "coefficients",
];

/// Parse `a/b` or a plain number.
pub fn parse_ratio(text: &str) -> Result<f64> {
    let bad = || Error::Config(format!("invalid number '{text}'"));
    let v = match text.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            a / b
        }
        None => text.trim().parse().map_err(|_| bad())?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad())
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map: HashMap<&str, &str> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key '{k}'", lineno + 1)));
            }
            if map.insert(k, v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", lineno + 1)));
            }
        }
        let req = |k: &str| -> Result<&str> {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing required key '{k}'")))
        };
        let methods = req("method")?
            .split(',')
            .map(|m| m.trim().parse())
            .collect::<Result<Vec<Method>>>()?;
        let compressive = methods.iter().any(|m| m.compressive());
        let needs_t = methods.iter().any(|&m| m != Method::Kmeans);

        let dist = match map.get("dist").copied().unwrap_or("sparse") {
            "sparse" => DistKind::Sparse,
            "gaussian" => DistKind::Gaussian,
            other => return Err(Error::Config(format!("dist: unknown distribution '{other}'"))),
        };
        let gamma_list = match map.get("gamma_list") {
            Some(v) if !v.is_empty() => v
                .split(',')
                .map(|g| parse_ratio(g.trim()))
                .collect::<Result<Vec<f64>>>()?,
            _ => Vec::new(),
        };
        let opt_f64 = |k: &str| -> Result<Option<f64>> { map.get(k).map(|v| parse_ratio(v)).transpose() };

        let cfg = Self {
            p: parse_num("p", req("p")?)?,
            k: parse_num("K", req("K")?)?,
            n: parse_num("n", req("n")?)?,
            t: if needs_t { parse_num("T", req("T")?)? } else { 1 },
            blocks: if compressive { parse_num("L", req("L")?)? } else { 1 },
            m_over_p: if compressive { parse_ratio(req("m_over_p")?)? } else { 1.0 },
            gamma_list,
            dist,
            s: opt_f64("s")?,
            variance: opt_f64("variance")?,
            iterations: parse_num("iterations", req("iterations")?)?,
            trials: map.get("trials").map_or(Ok(1), |v| parse_num("trials", v))?,
            master_seed: map.get("master_seed").map_or(Ok(0), |v| parse_num("master_seed", v))?,
            methods,
            delayed_refit: map
                .get("delayed_refit")
                .map_or(Ok(false), |v| parse_bool("delayed_refit", v))?,
            ridge: opt_f64("ridge")?.unwrap_or(0.0),
            output_path: map.get("output_path").map(PathBuf::from),
            coeff_std: opt_f64("coeff_std")?.unwrap_or(10.0),
            noise_var: opt_f64("noise_var")?.unwrap_or(0.04),
            coefficients: match map.get("coefficients").copied().unwrap_or("gaussian") {
                "gaussian" => CoefficientLaw::Gaussian,
                "ones" => CoefficientLaw::Ones,
                other => return Err(Error::Config(format!("coefficients: unknown law '{other}'"))),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.p == 0 || self.k == 0 || self.n == 0 || self.t == 0 {
            return bad("p, K, n and T must be >= 1".into());
        }
        if self.t > self.k {
            return bad(format!("T = {} exceeds K = {}", self.t, self.k));
        }
        if self.k > self.n {
            return bad(format!("K = {} exceeds n = {}", self.k, self.n));
        }
        if self.iterations == 0 || self.trials == 0 {
            return bad("iterations and trials must be >= 1".into());
        }
        if self.methods.is_empty() {
            return bad("no method given".into());
        }
        if !(self.coeff_std >= 0.0) || !(self.noise_var >= 0.0) {
            return bad("coeff_std and noise_var must be >= 0".into());
        }
        if !(self.ridge >= 0.0) {
            return bad("ridge must be >= 0".into());
        }
        if self.methods.iter().any(|m| m.compressive()) {
            if self.blocks == 0 || self.blocks > self.n {
                return bad(format!("L must be in 1..={}", self.n));
            }
            if !(self.m_over_p > 0.0) {
                return bad("m_over_p must be > 0".into());
            }
            match self.dist {
                DistKind::Sparse => {
                    if self.gamma_list.is_empty() && self.s.is_none() {
                        return bad("sparse projections need gamma_list or s".into());
                    }
                    if self.gamma_list.iter().any(|&g| !(g > 0.0)) {
                        return bad("gamma values must be > 0".into());
                    }
                    for (_, dist) in self.projection_settings()? {
                        dist.validate().map_err(|e| Error::Config(e.to_string()))?;
                    }
                }
                DistKind::Gaussian => {
                    if !self.gamma_list.is_empty() {
                        return bad("gamma_list applies to sparse projections only".into());
                    }
                    if self.variance.is_some_and(|v| !(v > 0.0)) {
                        return bad("variance must be > 0".into());
                    }
                }
            }
        }
        Ok(())
    }

    /// Sketch size `round(m_over_p * p)`, at least 1.
    pub fn m(&self) -> usize {
        ((self.m_over_p * self.p as f64).round() as usize).max(1)
    }

    /// One `(gamma, distribution)` per compression setting. Gamma is `None`
    /// for Gaussian projections.
    pub fn projection_settings(&self) -> Result<Vec<(Option<f64>, ProjectionDistribution)>> {
        let m = self.m() as f64;
        match self.dist {
            DistKind::Gaussian => {
                let var = self.variance.unwrap_or(1.0 / self.p as f64);
                Ok(vec![(None, ProjectionDistribution::gaussian(var)?)])
            }
            DistKind::Sparse if self.gamma_list.is_empty() => {
                let s = self.s.unwrap_or(1.0);
                Ok(vec![(Some(m / s), ProjectionDistribution::sparse_bernoulli(s)?)])
            }
            DistKind::Sparse => self
                .gamma_list
                .iter()
                .map(|&g| Ok((Some(g), ProjectionDistribution::sparse_bernoulli(m / g)?)))
                .collect(),
        }
    }
}
