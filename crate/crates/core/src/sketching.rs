//! Block sketching: split the samples into `L` contiguous blocks and sketch
//! block `l` with its own projection matrix, `Y_l = R_l^T X_l`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::matfile;
use crate::projections::{ProjectionDistribution, ProjectionMatrix};
use crate::seed::derive_seed;

/// Sample index boundaries of `L` contiguous blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    boundaries: Vec<usize>,
}

impl BlockPartition {
    /// `L` blocks whose sizes differ by at most one; the remainder goes to the
    /// leading blocks.
    pub fn even(n: usize, blocks: usize) -> Result<Self> {
        if blocks == 0 || blocks > n {
            return Err(Error::InvalidParameter(format!(
                "need 1 <= L <= n, got L={blocks}, n={n}"
            )));
        }
        let base = n / blocks;
        let extra = n % blocks;
        let mut boundaries = Vec::with_capacity(blocks + 1);
        boundaries.push(0);
        let mut at = 0;
        for l in 0..blocks {
            at += base + usize::from(l < extra);
            boundaries.push(at);
        }
        Ok(Self { boundaries })
    }

    pub fn from_boundaries(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.len() < 2 || boundaries[0] != 0 {
            return Err(Error::InvalidParameter(
                "partition needs at least two boundaries starting at 0".into(),
            ));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "partition boundaries must be strictly increasing".into(),
            ));
        }
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn num_blocks(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn range(&self, l: usize) -> std::ops::Range<usize> {
        self.boundaries[l]..self.boundaries[l + 1]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SketchConfig {
    pub m: usize,
    pub dist: ProjectionDistribution,
    pub blocks: usize,
    pub master_seed: u64,
}

impl SketchConfig {
    /// `gamma = m / s`; only defined for sparse-Bernoulli projections.
    pub fn compression_factor(&self) -> Result<f64> {
        compression_factor(self.m, self.dist)
    }
}

pub fn compression_factor(m: usize, dist: ProjectionDistribution) -> Result<f64> {
    dist.validate()?;
    match dist {
        ProjectionDistribution::SparseBernoulli { s } => Ok(m as f64 / s),
        ProjectionDistribution::Gaussian { .. } => Err(Error::NotApplicable(
            "compression factor is defined for sparse-Bernoulli projections only".into(),
        )),
    }
}

/// Seed of block `l`'s projection matrix.
pub fn block_seed(master_seed: u64, l: usize) -> u64 {
    derive_seed(master_seed, l as u64)
}

/// Where the per-block projection matrices come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ProjectionSource {
    /// Regenerated from `block_seed(master_seed, l)`.
    Seeded { master_seed: u64 },
    /// Explicit matrices, one per block.
    Explicit(Vec<ProjectionMatrix>),
}

/// Sketches of all blocks. The raw data is not retained.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchedDataset {
    p: usize,
    m: usize,
    dist: ProjectionDistribution,
    partition: BlockPartition,
    blocks: Vec<DMatrix<f64>>,
    source: ProjectionSource,
    multiply_adds: u64,
}

impl SketchedDataset {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dist(&self) -> ProjectionDistribution {
        self.dist
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_samples(&self) -> usize {
        self.partition.total()
    }

    pub fn block(&self, l: usize) -> &DMatrix<f64> {
        &self.blocks[l]
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn source(&self) -> &ProjectionSource {
        &self.source
    }

    /// Scalar multiply-adds spent acquiring the sketches.
    pub fn multiply_adds(&self) -> u64 {
        self.multiply_adds
    }

    /// Reals held by the sketches (`m * n`).
    pub fn stored_reals(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    /// `gamma = m / s` for sparse-Bernoulli sketches.
    pub fn compression_factor(&self) -> Result<f64> {
        compression_factor(self.m, self.dist)
    }

    pub fn projection(&self, l: usize) -> Result<ProjectionMatrix> {
        match &self.source {
            ProjectionSource::Seeded { master_seed } => {
                ProjectionMatrix::sample(self.dist, self.p, self.m, block_seed(*master_seed, l))
            }
            ProjectionSource::Explicit(mats) => Ok(mats[l].clone()),
        }
    }

    /// All block projections, regenerated in parallel.
    pub fn projections(&self) -> Result<Vec<ProjectionMatrix>> {
        (0..self.num_blocks())
            .into_par_iter()
            .map(|l| self.projection(l))
            .collect()
    }

    /// Assemble a dataset from existing sketches, e.g. after reading from disk.
    pub fn from_parts(
        p: usize,
        dist: ProjectionDistribution,
        partition: BlockPartition,
        blocks: Vec<DMatrix<f64>>,
        source: ProjectionSource,
    ) -> Result<Self> {
        dist.validate()?;
        check_dim("sketch blocks", partition.num_blocks(), blocks.len())?;
        let m = blocks[0].nrows();
        if m == 0 {
            return Err(Error::InvalidParameter("sketch dimension m must be >= 1".into()));
        }
        for (l, b) in blocks.iter().enumerate() {
            check_dim("sketch rows", m, b.nrows())?;
            check_dim("sketch block size", partition.range(l).len(), b.ncols())?;
        }
        if let ProjectionSource::Explicit(mats) = &source {
            check_dim("explicit projections", blocks.len(), mats.len())?;
            for r in mats {
                check_dim("projection rows", p, r.p())?;
                check_dim("projection cols", m, r.m())?;
            }
        }
        Ok(Self {
            p,
            m,
            dist,
            partition,
            blocks,
            source,
            multiply_adds: 0,
        })
    }

    /// Write as a directory: `manifest.txt` plus one matrix file per block
    /// (and per explicit projection).
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        manifest.push_str("# sketched dataset\n");
        manifest.push_str(&format!("p={}\nm={}\nL={}\n", self.p, self.m, self.num_blocks()));
        match self.dist {
            ProjectionDistribution::SparseBernoulli { s } => {
                manifest.push_str(&format!("dist=sparse\ns={s:?}\n"))
            }
            ProjectionDistribution::Gaussian { variance } => {
                manifest.push_str(&format!("dist=gaussian\nvariance={variance:?}\n"))
            }
        }
        match &self.source {
            ProjectionSource::Seeded { master_seed } => {
                manifest.push_str(&format!("projections=seeded\nmaster_seed={master_seed}\n"))
            }
            ProjectionSource::Explicit(mats) => {
                manifest.push_str("projections=explicit\n");
                for (l, r) in mats.iter().enumerate() {
                    matfile::save(dir.join(format!("projection_{l:05}.cdlm")), &r.to_dense())?;
                }
            }
        }
        let bounds: Vec<String> = self.partition.boundaries().iter().map(|b| b.to_string()).collect();
        manifest.push_str(&format!("boundaries={}\n", bounds.join(",")));
        for (l, b) in self.blocks.iter().enumerate() {
            matfile::save(dir.join(format!("block_{l:05}.cdlm")), b)?;
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let kv = parse_manifest(&text)?;
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("manifest missing key `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("manifest key `{k}` is not an integer")))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("manifest key `{k}` is not a number")))
        };
        let p = num("p")?;
        let m = num("m")?;
        let blocks_n = num("L")?;
        let dist = match get("dist")? {
            "sparse" => ProjectionDistribution::sparse_bernoulli(real("s")?)?,
            "gaussian" => ProjectionDistribution::gaussian(real("variance")?)?,
            other => return Err(Error::Format(format!("unknown dist `{other}`"))),
        };
        let boundaries = get("boundaries")?
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad boundary `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let partition = BlockPartition::from_boundaries(boundaries)?;
        check_dim("manifest L", blocks_n, partition.num_blocks())?;
        let blocks = (0..blocks_n)
            .map(|l| matfile::load(dir.join(format!("block_{l:05}.cdlm"))))
            .collect::<Result<Vec<_>>>()?;
        let source = match get("projections")? {
            "seeded" => {
                let master_seed = get("master_seed")?
                    .parse()
                    .map_err(|_| Error::Format("bad master_seed".into()))?;
                ProjectionSource::Seeded { master_seed }
            }
            "explicit" => ProjectionSource::Explicit(
                (0..blocks_n)
                    .map(|l| {
                        let d = matfile::load(dir.join(format!("projection_{l:05}.cdlm")))?;
                        ProjectionMatrix::from_dense(dist, d)
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            other => return Err(Error::Format(format!("unknown projections `{other}`"))),
        };
        let ds = Self::from_parts(p, dist, partition, blocks, source)?;
        check_dim("manifest m", m, ds.m)?;
        Ok(ds)
    }
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line without `=`: {line}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

/// Sketch every block of `x` with its own seeded projection.
pub fn sketch_blocks(
    x: &DMatrix<f64>,
    partition: &BlockPartition,
    cfg: &SketchConfig,
) -> Result<SketchedDataset> {
    cfg.dist.validate()?;
    if cfg.m == 0 {
        return Err(Error::InvalidParameter("m must be >= 1".into()));
    }
    check_dim("partition blocks", cfg.blocks, partition.num_blocks())?;
    let p = x.nrows();
    let projections = (0..partition.num_blocks())
        .into_par_iter()
        .map(|l| ProjectionMatrix::sample(cfg.dist, p, cfg.m, block_seed(cfg.master_seed, l)))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = sketch_with(x, partition, cfg.dist, &projections)?;
    ds.source = ProjectionSource::Seeded {
        master_seed: cfg.master_seed,
    };
    Ok(ds)
}

/// Sketch with explicit projection matrices, one per block.
pub fn sketch_blocks_with(
    x: &DMatrix<f64>,
    partition: &BlockPartition,
    dist: ProjectionDistribution,
    projections: Vec<ProjectionMatrix>,
) -> Result<SketchedDataset> {
    let mut ds = sketch_with(x, partition, dist, &projections)?;
    ds.source = ProjectionSource::Explicit(projections);
    Ok(ds)
}

fn sketch_with(
    x: &DMatrix<f64>,
    partition: &BlockPartition,
    dist: ProjectionDistribution,
    projections: &[ProjectionMatrix],
) -> Result<SketchedDataset> {
    check_dim("sketch_blocks samples", partition.total(), x.ncols())?;
    check_dim("sketch_blocks projections", partition.num_blocks(), projections.len())?;
    let p = x.nrows();
    let m = projections[0].m();
    for r in projections {
        check_dim("projection rows", p, r.p())?;
        check_dim("projection cols", m, r.m())?;
    }
    let blocks = projections
        .par_iter()
        .enumerate()
        .map(|(l, r)| {
            let range = partition.range(l);
            let xl = x.columns(range.start, range.len()).into_owned();
            r.transpose_mul(&xl)
        })
        .collect::<Result<Vec<_>>>()?;
    let multiply_adds = projections
        .iter()
        .enumerate()
        .map(|(l, r)| (r.transpose_cost() * partition.range(l).len()) as u64)
        .sum();
    Ok(SketchedDataset {
        p,
        m,
        dist,
        partition: partition.clone(),
        blocks,
        source: ProjectionSource::Seeded { master_seed: 0 },
        multiply_adds,
    })
}
