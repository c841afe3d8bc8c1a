//! Shared fixtures for the benchmarks: default-size model, a batch of
//! synthetic videos and random proposal graphs.

use apgn_core::data::{generate_split, Batch, Split, SyntheticConfig, VideoSample};
use apgn_core::head::Prediction;
use apgn_core::model::{Model, ModelConfig};
use apgn_core::params::ParamStore;
use apgn_core::proposal::Segment;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn model() -> (Model, ParamStore<f32>) {
    Model::new::<f32>(ModelConfig::default(), 0).expect("default config is valid")
}

pub fn videos(n: usize) -> Vec<VideoSample> {
    generate_split(&SyntheticConfig::default(), Split::Train, n).expect("default config is valid")
}

pub fn batch(samples: &[VideoSample]) -> Batch {
    Batch::from_samples(&samples.iter().collect::<Vec<_>>()).expect("uniform samples")
}

/// Node features and two layers of weights for an `m`-node graph.
pub fn graph(m: usize, c: usize, seed: u64) -> (Array2<f32>, Vec<(Array2<f32>, Array2<f32>)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mat = |r, c| Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0f32..1.0));
    let p = mat(m, c);
    let layers = (0..2).map(|_| (mat(c, c), mat(c, c))).collect();
    (p, layers)
}

pub fn predictions(n: usize, frames: usize, seed: u64) -> Vec<Prediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|anchor| {
            let start = rng.gen_range(0.0..frames as f64 - 1.0);
            let end = rng.gen_range(start..frames as f64 - 1.0);
            Prediction {
                segment: Segment { start, end },
                score: rng.gen(),
                anchor,
            }
        })
        .collect()
}
