//! Fixtures shared by the criterion benchmarks.

use nalgebra::DMatrix;
use sketchdl::experiment::{generate_synthetic, SyntheticConfig, SyntheticData};
use sketchdl::sketching::sketch_blocks;
use sketchdl::{
    BlockPartition, Dictionary, EquivalentDictionary, ProjectionDistribution, ProjectionMatrix, SketchConfig,
    SketchedDataset,
};

/// A sparse-Bernoulli projection with compression factor `gamma` and the
/// same matrix in dense storage.
pub fn projection_pair(p: usize, m: usize, gamma: f64, seed: u64) -> (ProjectionMatrix, ProjectionMatrix) {
    let dist = ProjectionDistribution::sparse_bernoulli(m as f64 / gamma).unwrap();
    let sparse = ProjectionMatrix::sample(dist, p, m, seed).unwrap();
    let dense = ProjectionMatrix::from_dense(dist, sparse.to_dense()).unwrap();
    (sparse, dense)
}

pub fn synthetic(p: usize, k: usize, n: usize, t: usize, seed: u64) -> SyntheticData {
    generate_synthetic(&SyntheticConfig::new(p, k, n, t, seed)).unwrap()
}

/// One sketched block and its equivalent dictionary against the true atoms.
pub fn coding_block(p: usize, k: usize, m: usize, n: usize, t: usize, seed: u64) -> (DMatrix<f64>, EquivalentDictionary) {
    let data = synthetic(p, k, n, t, seed);
    let r = ProjectionMatrix::sample(ProjectionDistribution::gaussian_for_dim(p).unwrap(), p, m, seed + 1).unwrap();
    let y = r.transpose_mul(&data.x).unwrap();
    let eq = EquivalentDictionary::new(&r, data.dictionary.matrix(), true).unwrap();
    (y, eq)
}

/// Sketches of a synthetic data set together with a random initial dictionary.
pub fn training_set(
    p: usize,
    k: usize,
    n: usize,
    t: usize,
    blocks: usize,
    m: usize,
    gamma: f64,
    seed: u64,
) -> (SketchedDataset, Dictionary) {
    let data = synthetic(p, k, n, t, seed);
    let cfg = SketchConfig {
        m,
        dist: ProjectionDistribution::sparse_bernoulli(m as f64 / gamma).unwrap(),
        blocks,
        master_seed: seed + 1,
    };
    let part = BlockPartition::even(n, blocks).unwrap();
    let sketches = sketch_blocks(&data.x, &part, &cfg).unwrap();
    (sketches, Dictionary::random(p, k, seed + 2).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_shapes() {
        let (s, d) = projection_pair(50, 5, 0.2, 1);
        assert_eq!(s.to_dense(), d.to_dense());
        let (y, eq) = coding_block(20, 6, 8, 30, 2, 3);
        assert_eq!((y.nrows(), y.ncols()), (8, 30));
        assert_eq!(eq.num_atoms(), 6);
        let (sk, d0) = training_set(20, 6, 120, 2, 3, 8, 0.5, 4);
        assert_eq!((sk.num_blocks(), sk.num_samples(), d0.num_atoms()), (3, 120, 6));
    }
}
