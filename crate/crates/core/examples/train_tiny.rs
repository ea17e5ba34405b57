//! Pretrains a small model on single-person scenes, then fine-tunes the
//! pose adapters on two-person scenes and saves both checkpoints.
//!
//! ```text
//! cargo run --release --example train_tiny -- /tmp/tiny
//! ```

use std::path::PathBuf;

use ppc::model::{Model, ModelConfig};
use ppc::train::{generate_specs, phase_samples, train_phase, DataConfig, Phase, TrainConfig, TrainOutputs};
use ppc::world::WorldConfig;

fn main() -> ppc::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/train_tiny".into()));
    let world = WorldConfig::default();
    let data = |people, seed| DataConfig {
        scenes: 200,
        min_people: people,
        max_people: people,
        data_seed: seed,
    };

    let pre = TrainConfig {
        steps: 150,
        batch_size: 8,
        ..TrainConfig::for_phase(Phase::Pretrain)
    };
    let samples = phase_samples(Phase::Pretrain, &generate_specs(&data(1, 1), &world)?)?;
    let outputs = TrainOutputs {
        metrics: Some(out.join("pretrain.csv")),
        checkpoints: Some(out.clone()),
    };
    let model = Model::init(ModelConfig::tiny(), 0)?;
    let phase1 = train_phase(&pre, samples, model, &outputs, |row| {
        if row.step % 25 == 0 {
            println!("pretrain step {:4} loss {:.4}", row.step, row.loss.total);
        }
    })?;

    let fine = TrainConfig {
        steps: 100,
        batch_size: 8,
        ..TrainConfig::for_phase(Phase::Finetune)
    };
    let samples = phase_samples(Phase::Finetune, &generate_specs(&data(2, 2), &world)?)?;
    let outputs = TrainOutputs {
        metrics: Some(out.join("finetune.csv")),
        checkpoints: Some(out.clone()),
    };
    train_phase(&fine, samples, phase1.model, &outputs, |row| {
        if row.step % 25 == 0 {
            println!(
                "finetune step {:4} loss {:.4} (pose {:.4}, image {:.4})",
                row.step, row.loss.total, row.loss.pose, row.loss.image
            );
        }
    })?;
    println!("checkpoints written to {}", out.display());
    Ok(())
}
