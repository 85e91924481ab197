//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metamorph_core::model::{DType, FeatureTensor};
use metamorph_core::runtime::{MsgType, SplitMessage};
use metamorph_core::{BackboneSpec, MetamorphConfig, MultiTaskModel, TaskKind, TaskSpec, Tensor};

/// Uniform values in [0, 1) with a fixed seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f32>()).collect())
}

/// A FORWARD_FEATURES frame whose f32 payload is `bytes` long (rounded up to
/// whole floats).
pub fn feature_message(bytes: usize) -> SplitMessage {
    let t = random_tensor(&[bytes.div_ceil(4)], 1);
    SplitMessage::new(MsgType::ForwardFeatures, 1, 0, vec![FeatureTensor::from_tensor(&t, DType::F32)])
}

/// `n` per-sample gradient vectors of length `dim`.
pub fn per_sample_grads(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random::<f32>() - 0.5).collect())
        .collect()
}

/// The default two-task classification model.
pub fn desk_model(seed: u64) -> MultiTaskModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = [
        TaskSpec::new("shape", TaskKind::Classification { classes: 2 }),
        TaskSpec::new("color", TaskKind::Classification { classes: 2 }),
    ];
    MultiTaskModel::new(BackboneSpec::desk_default(), MetamorphConfig::default(), &tasks, &mut rng)
        .expect("default model builds")
}
