#![allow(dead_code)]

use hoi_autograd::{ParamStore, Tensor};
use hoi_core::config::{DataConfig, RunConfig};
use hoi_core::data::{generate_dataset, HoiSequence, SynthConfig};
use hoi_core::diffusion::ScheduleKind;
use hoi_core::features::{prepare, Dims, Prepared};
use hoi_core::model::{CoopModel, DiffusionConfig, ModelConfig};
use hoi_core::nn::BlockConfig;
use hoi_core::training::{StageConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn synth() -> SynthConfig {
    SynthConfig { joints: 6, past_len: 4, future_len: 3, object_points: 24, contact_start: 2, contact_len: 4, ..SynthConfig::default() }
}

pub fn dims() -> Dims {
    let s = synth();
    Dims { joints: s.joints, groups: s.joints, subset_size: s.subset_size, past_len: s.past_len, future_len: s.future_len }
}

pub fn block() -> BlockConfig {
    BlockConfig { width: 8, heads: 2, encoder_layers: 2, decoder_layers: 2 }
}

pub fn model_config() -> ModelConfig {
    ModelConfig { human: block(), object: block(), contact_tokens: 3, ..ModelConfig::default() }
}

pub fn diffusion() -> DiffusionConfig {
    DiffusionConfig { steps: 10, schedule: ScheduleKind::Cosine }
}

/// Sequences with at least one active contact group in the past and in the
/// future.
pub fn sequences(count: usize, seed: u64) -> Vec<HoiSequence> {
    let seqs = generate_dataset(&synth(), count, seed).unwrap();
    for s in &seqs {
        assert!(s.contact.mask[..s.past_len].iter().flatten().any(|&b| b), "fixture needs past contact");
        assert!(s.contact.mask[s.past_len..].iter().flatten().any(|&b| b), "fixture needs future contact");
    }
    seqs
}

pub fn prepared(seqs: &[HoiSequence]) -> Vec<Prepared> {
    seqs.iter().map(|s| prepare(s, &dims()).unwrap()).collect()
}

pub fn model(seed: u64) -> CoopModel {
    CoopModel::new(&model_config(), &diffusion(), dims(), seed).unwrap()
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Adds uniform noise of the given scale to every parameter whose name
/// starts with `prefix`.
pub fn perturb(store: &mut ParamStore, prefix: &str, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids_with_prefix(prefix) {
        for v in store.get_mut(id).data_mut() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
}

/// Order-sensitive digest of every parameter under `prefix`.
pub fn checksum(store: &ParamStore, prefix: &str) -> Vec<u64> {
    store.ids_with_prefix(prefix).into_iter().flat_map(|id| store.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

/// Tiny end-to-end configuration: a few steps per stage on the fixture data.
pub fn run_config(steps: usize) -> RunConfig {
    let stage = StageConfig { steps, learning_rate: 1e-3 };
    RunConfig {
        model: model_config(),
        diffusion: diffusion(),
        data: DataConfig { generator: synth(), count: 6, holdout: 2 },
        training: TrainConfig { stages: [stage; 3], batch_size: 2, ..TrainConfig::default() },
        ..RunConfig::default()
    }
}
