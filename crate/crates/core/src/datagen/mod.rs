//! Analytic dataset generators and the on-disk dataset format.
//!
//! Every dataset stores the joint state `z = (x, y)` of each sample, with the
//! input channels first. Values are raw; [`Normalization`] maps them to zero
//! mean / unit variance per channel at load time.

mod dataset;
mod oracle;
mod toy;
mod wave;

pub use dataset::write_atomic;
pub use dataset::{read_dataset, write_dataset, Dataset, Normalization, DATASET_MAGIC, DATASET_VERSION};
pub use oracle::GaussianOracle;
pub use toy::{bimodal_test_set, gen_toy_bimodal, gen_toy_piecewise_sine, piecewise_sine, BimodalSpec, Mode, ToyFunction};
pub use wave::{gen_wave_dataset, grid_nodes, wave_exact, wave_initial, Scale, WaveDist, WaveParams};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Distribution to draw a dataset from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "kebab-case")]
pub enum DistSpec {
    Wave(WaveDist),
    ToyBimodal(BimodalSpec),
    ToyPiecewiseSine,
    GaussianOracle(GaussianOracle),
}

/// Draws `n` samples (for the bimodal toy, `n` is ignored in favour of `N₊`).
pub fn generate(spec: &DistSpec, n: usize, seed: u64) -> Result<Dataset> {
    match spec {
        DistSpec::Wave(w) => gen_wave_dataset(w, n, seed),
        DistSpec::ToyBimodal(b) => gen_toy_bimodal(b, seed),
        DistSpec::ToyPiecewiseSine => gen_toy_piecewise_sine(n, seed),
        DistSpec::GaussianOracle(g) => g.dataset(n, seed),
    }
}
