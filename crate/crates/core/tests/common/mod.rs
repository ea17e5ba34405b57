#![allow(dead_code)]

use ppc::flow::{make_training_batch, BatchOptions};
use ppc::model::{Model, ModelConfig, VelocityTarget};
use ppc::seq::{AssembleOptions, TokenBatch};
use ppc::world::{decompose_stages, gen_scene, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Small model with a pose stream and every tensor moved off its initial
/// (partly zero) values, so no gradient vanishes by construction.
pub fn generic_tiny_model(seed: u64) -> Model {
    let mut m = Model::init(ModelConfig::tiny(), seed).unwrap();
    m.params.perturb(&mut ChaCha8Rng::seed_from_u64(seed + 100), 0.2);
    m.init_pose_stream(seed + 1).unwrap();
    m.params.perturb(&mut ChaCha8Rng::seed_from_u64(seed + 200), 0.1);
    m
}

/// One training example from stage `stage` of a seeded `people`-person scene.
pub fn training_example(seed: u64, people: usize, stage: usize, with_pose: bool) -> (TokenBatch, VelocityTarget) {
    let spec = gen_scene(seed, &WorldConfig::default().with_people(people)).unwrap();
    let sample = &decompose_stages(&spec)[stage - 1];
    let opts = BatchOptions {
        p_drop: 0.0,
        patch: spec.patch,
        assemble: AssembleOptions {
            include_pose: with_pose,
            ..AssembleOptions::default()
        },
    };
    let (tokens, flow) = make_training_batch(sample, &mut ChaCha8Rng::seed_from_u64(seed), &opts).unwrap();
    (tokens, flow.target())
}
