//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simflow_core::flow::normal_vec;
use simflow_core::lens::{render, Instrument, LensObservation, LensPrior, LensScene};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A prior scene and its noisy observation on the default 64-pixel grid.
pub fn lens_fixture(seed: u64) -> (Instrument, LensScene, LensObservation) {
    let inst = Instrument::default();
    let mut r = rng(seed);
    let scene = LensPrior::default().sample(&mut r);
    let obs = render(&scene, &inst, &normal_vec(inst.pixels(), &mut r));
    (inst, scene, obs)
}

/// Row-major batch of standard normal inputs.
pub fn normal_batch(rows: usize, cols: usize, seed: u64) -> Vec<f32> {
    normal_vec(rows * cols, &mut rng(seed)).into_iter().map(|v| v as f32).collect()
}
