//! Training-loop contracts: determinism, freeze mask, zero step size,
//! checkpoint round trips and a small learning run.

mod common;

use ppc::model::{Model, ModelConfig};
use ppc::train::{
    from_bytes, load_checkpoint, moving_average, phase_samples, save_checkpoint, to_bytes, train_phase, DataConfig,
    Phase, TrainConfig, TrainOutputs, Trainer,
};
use ppc::world::WorldConfig;
use ppc::Error;

/// Moving-average loss of the seeded tiny pretraining run below, at its
/// first and last step.
const SMOKE_INITIAL_LOSS: f64 = 1.9676;
const SMOKE_FINAL_LOSS: f64 = 0.8529;
const SMOKE_RECORD_TOLERANCE: f64 = 1e-3;

fn specs(scenes: usize, people: (usize, usize), seed: u64) -> Vec<ppc::world::SceneSpec> {
    ppc::train::generate_specs(
        &DataConfig {
            scenes,
            min_people: people.0,
            max_people: people.1,
            data_seed: seed,
        },
        &WorldConfig::default(),
    )
    .unwrap()
}

fn tiny_pretrained(steps: usize) -> Model {
    let model = Model::init(ModelConfig::tiny(), 1).unwrap();
    let cfg = TrainConfig {
        steps,
        batch_size: 4,
        seed: 2,
        ..TrainConfig::default()
    };
    let samples = phase_samples(Phase::Pretrain, &specs(40, (1, 1), 3)).unwrap();
    train_phase(&cfg, samples, model, &TrainOutputs::default(), |_| {})
        .unwrap()
        .model
}

fn finetune_cfg(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        phase: Phase::Finetune,
        steps,
        lr,
        batch_size: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_equal() {
    let mut model = tiny_pretrained(3);
    model.init_pose_stream(9).unwrap();
    let before = model.params.clone();
    let samples = phase_samples(Phase::Finetune, &specs(6, (2, 2), 4)).unwrap();
    let out = train_phase(&finetune_cfg(5, 0.0), samples, model, &TrainOutputs::default(), |_| {}).unwrap();
    assert_eq!(out.model.params, before);
}

#[test]
fn finetuning_never_touches_frozen_tensors() {
    let model = tiny_pretrained(5);
    let samples = phase_samples(Phase::Finetune, &specs(10, (2, 3), 6)).unwrap();
    let mut trainer = Trainer::new(model, finetune_cfg(0, 1e-2), samples).unwrap();
    let checksum = trainer.model.params.frozen_checksum();
    let frozen: Vec<(String, Vec<u64>)> = trainer
        .model
        .params
        .frozen_names()
        .map(|n| {
            (
                n.clone(),
                trainer
                    .model
                    .params
                    .get(n)
                    .unwrap()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect(),
            )
        })
        .collect();
    let trainable_before = trainer.model.params.clone();
    for _ in 0..100 {
        trainer.step().unwrap();
    }
    assert_eq!(trainer.model.params.frozen_checksum(), checksum);
    for (name, bits) in &frozen {
        let now: Vec<u64> = trainer
            .model
            .params
            .get(name)
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(&now, bits, "{name}");
    }
    assert!(trainer
        .model
        .params
        .trainable_names()
        .any(|n| { trainer.model.params.get(n).unwrap() != trainable_before.get(n).unwrap() }));
    let state: Vec<&String> = trainer.optimizer().state_names().collect();
    assert!(state.iter().all(|n| !trainer.model.params.is_frozen(n)));
    assert_eq!(state.len(), trainer.model.params.trainable_names().count());
}

#[test]
fn runs_are_bit_reproducible() {
    let a = tiny_pretrained(6);
    let b = tiny_pretrained(6);
    assert_eq!(to_bytes(&a), to_bytes(&b));
}

#[test]
fn logged_total_is_weighted_sum_of_terms() {
    let model = tiny_pretrained(2);
    let samples = phase_samples(Phase::Finetune, &specs(6, (2, 2), 8)).unwrap();
    let mut cfg = finetune_cfg(6, 1e-3);
    cfg.lambda_pose = 0.7;
    cfg.lambda_img = 1.9;
    let out = train_phase(&cfg, samples, model, &TrainOutputs::default(), |_| {}).unwrap();
    for row in &out.log {
        let want = 0.7 * row.loss.pose + 1.9 * row.loss.image;
        assert!((row.loss.total - want).abs() < 1e-12);
    }
}

#[test]
fn non_finite_loss_reports_its_step() {
    let mut model = Model::init(ModelConfig::tiny(), 1).unwrap();
    let w = model.params.get_mut("head.img.w").unwrap();
    w[[0, 0]] = f64::NAN;
    let samples = phase_samples(Phase::Pretrain, &specs(4, (1, 1), 3)).unwrap();
    let cfg = TrainConfig {
        steps: 3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    match train_phase(&cfg, samples, model, &TrainOutputs::default(), |_| {}) {
        Err(Error::NonFiniteLoss { step }) => assert_eq!(step, 0),
        other => panic!("expected non-finite loss, got {:?}", other.map(|r| r.log.len())),
    }
}

#[test]
fn pretraining_rejects_multi_person_stages() {
    assert!(phase_samples(Phase::Pretrain, &specs(5, (2, 2), 1)).is_err());
    let samples = phase_samples(Phase::Finetune, &specs(5, (2, 2), 1)).unwrap();
    let model = Model::init(ModelConfig::tiny(), 1).unwrap();
    assert!(Trainer::new(model, TrainConfig::default(), samples).is_err());
}

#[test]
fn checkpoints_roundtrip_and_feed_finetuning() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_pretrained(4);
    let path = dir.path().join("p1.ppc");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.params, model.params);
    assert!(!loaded.has_pose_stream());

    let samples = phase_samples(Phase::Finetune, &specs(4, (2, 2), 2)).unwrap();
    let outputs = TrainOutputs {
        metrics: Some(dir.path().join("metrics.csv")),
        checkpoints: Some(dir.path().join("ck")),
    };
    let mut cfg = finetune_cfg(4, 1e-3);
    cfg.checkpoint_every = 2;
    let tuned = train_phase(&cfg, samples, loaded, &outputs, |_| {}).unwrap().model;
    let reloaded = load_checkpoint(&dir.path().join("ck/finetune.ppc")).unwrap();
    assert_eq!(reloaded.params, tuned.params);
    assert_eq!(
        reloaded.params.frozen_names().collect::<Vec<_>>(),
        tuned.params.frozen_names().collect::<Vec<_>>()
    );
    assert!(dir.path().join("ck/step_000002.ppc").exists());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("step,loss_total,loss_pose,loss_img,lr,wall_ms\n"));

    let bytes = std::fs::read(dir.path().join("ck/finetune.ppc")).unwrap();
    let cut = &bytes[..bytes.len() - 5];
    match from_bytes(cut) {
        Err(Error::CorruptCheckpoint { offset, .. }) => assert!(offset > 0),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn tiny_pretraining_reduces_loss() {
    let model = Model::init(ModelConfig::tiny(), 11).unwrap();
    let cfg = TrainConfig {
        steps: 500,
        batch_size: 4,
        seed: 12,
        ..TrainConfig::default()
    };
    let samples = phase_samples(Phase::Pretrain, &specs(200, (1, 1), 13)).unwrap();
    let log = train_phase(&cfg, samples, model, &TrainOutputs::default(), |_| {})
        .unwrap()
        .log;
    let avg = moving_average(&log, 50);
    let (first, last) = (log[0].loss.total, avg[avg.len() - 1]);
    eprintln!("tiny pretraining: initial {first:.4}, final moving average {last:.4}");
    assert!(last < first);
    assert!(
        (first - SMOKE_INITIAL_LOSS).abs() < SMOKE_RECORD_TOLERANCE,
        "initial {first}"
    );
    assert!((last - SMOKE_FINAL_LOSS).abs() < SMOKE_RECORD_TOLERANCE, "final {last}");
}
