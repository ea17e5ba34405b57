//! Two-phase training: backbone pretraining on single-person scenes, then
//! pose-stream adaptation over a frozen backbone on multi-person scenes.

mod checkpoint;
mod config;
mod gradcheck;
mod optim;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, MAGIC};
pub use config::{parse_range, DataConfig, Phase, RunConfig, TrainConfig};
pub use gradcheck::{check_gradients, grad_check, GradCheckOptions, GradCheckReport, TensorCheck, FD_STEP};
pub use optim::{decays, AdamW};

use crate::error::{Error, PathContext, Result};
use crate::flow::{make_training_batch, BatchOptions};
use crate::model::{LossTerms, LossWeights, Model, VelocityTarget};
use crate::seq::{AssembleOptions, TokenBatch};
use crate::world::{decompose_stages, gen_scene, SceneSpec, StageSample, WorldConfig};

/// Mixes a base seed with indices into an independent stream seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x2545_f491_4f6c_dd1d;
    for &v in parts {
        h = (h ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= h >> 29;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 32;
    }
    h
}

/// Seeded scenes with the people count drawn uniformly from the range.
pub fn generate_specs(data: &DataConfig, world: &WorldConfig) -> Result<Vec<SceneSpec>> {
    let span = (data.max_people - data.min_people + 1) as u64;
    (0..data.scenes as u64)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(data.data_seed, &[i]);
            let n = data.min_people + (seed % span) as usize;
            gen_scene(seed, &world.clone().with_people(n))
        })
        .collect()
}

/// The training stages a phase uses from a set of scenes.
pub fn phase_samples(phase: Phase, specs: &[SceneSpec]) -> Result<Vec<StageSample>> {
    let mut out = Vec::new();
    for spec in specs {
        let stages = decompose_stages(spec);
        match phase {
            Phase::Pretrain => {
                if spec.num_people != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "pretraining uses single-person scenes, scene {} has {}",
                        spec.seed, spec.num_people
                    )));
                }
                out.extend(stages.into_iter().filter(|s| s.prompt.is_final()));
            }
            Phase::Finetune => out.extend(stages),
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig("no training stages".into()));
    }
    Ok(out)
}

/// Token layout options for a phase: pretraining has no pose segments.
pub fn phase_assemble(phase: Phase) -> AssembleOptions {
    AssembleOptions {
        include_pose: phase == Phase::Finetune,
        ..AssembleOptions::default()
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: LossTerms,
    pub lr: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,loss_total,loss_pose,loss_img,lr,wall_ms";

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:.3}",
            self.step, self.loss.total, self.loss.pose, self.loss.image, self.lr, self.wall_ms
        )
    }
}

/// Append-only CSV metrics file.
pub struct MetricsLog {
    file: File,
    path: PathBuf,
}

impl MetricsLog {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path).with_path(path)?.len() == 0;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_path(path)?;
        if fresh {
            writeln!(file, "{METRICS_HEADER}").with_path(path)?;
        }
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, row: &MetricRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv()).with_path(&self.path)
    }
}

/// Stateful training loop over a fixed list of stages.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    samples: Vec<StageSample>,
    opt: AdamW,
    batch_opts: BatchOptions,
    step: usize,
}

impl Trainer {
    /// Prepares a phase. Fine-tuning requires a pretrained model and creates
    /// the pose stream if it does not exist yet.
    pub fn new(mut model: Model, cfg: TrainConfig, samples: Vec<StageSample>) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::InvalidConfig("no training stages".into()));
        }
        match cfg.phase {
            Phase::Pretrain => {
                if model.has_pose_stream() {
                    return Err(Error::InvalidConfig(
                        "pretraining a model that already has a pose stream".into(),
                    ));
                }
                if let Some(s) = samples.iter().find(|s| s.prompt.num_people != 1) {
                    return Err(Error::InvalidConfig(format!(
                        "pretraining stage with {} people",
                        s.prompt.num_people
                    )));
                }
            }
            Phase::Finetune => {
                if !model.has_pose_stream() {
                    model.init_pose_stream(derive_seed(cfg.seed, &[u64::MAX]))?;
                }
            }
        }
        let batch_opts = BatchOptions {
            p_drop: cfg.p_drop,
            patch: samples_patch(&samples, &model)?,
            assemble: phase_assemble(cfg.phase),
        };
        let opt = AdamW::new(cfg.lr, cfg.weight_decay);
        Ok(Self {
            model,
            cfg,
            samples,
            opt,
            batch_opts,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            pose: self.cfg.lambda_pose,
            image: self.cfg.lambda_img,
        }
    }

    /// Indices of the stages used at `step`: consecutive slices of a fresh
    /// permutation per epoch, so the order depends only on the seed.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.samples.len();
        let b = self.cfg.batch_size;
        let mut out = Vec::with_capacity(b);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for j in 0..b {
            let g = step * b + j;
            let epoch = g / n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                    self.cfg.seed,
                    &[0, epoch as u64],
                )));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().expect("set above").1[g % n]);
        }
        out
    }

    /// Token batches and targets for `step`, with noise drawn from a stream
    /// keyed by the step.
    pub fn make_batch(&self, step: usize) -> Result<(Vec<TokenBatch>, Vec<VelocityTarget>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[1, step as u64]));
        let mut tokens = Vec::with_capacity(self.cfg.batch_size);
        let mut targets = Vec::with_capacity(self.cfg.batch_size);
        for i in self.batch_indices(step) {
            let (t, f) = make_training_batch(&self.samples[i], &mut rng, &self.batch_opts)?;
            tokens.push(t);
            targets.push(f.target());
        }
        Ok((tokens, targets))
    }

    /// One optimiser update; returns the loss measured before it.
    pub fn step(&mut self) -> Result<MetricRow> {
        let start = Instant::now();
        let (tokens, targets) = self.make_batch(self.step)?;
        let (loss, grads) = self.model.loss_and_grads(&tokens, &targets, self.weights())?;
        if !loss.total.is_finite() || grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        self.opt.step(&mut self.model.params, &grads)?;
        let row = MetricRow {
            step: self.step,
            loss,
            lr: self.opt.lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(row)
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

fn samples_patch(samples: &[StageSample], model: &Model) -> Result<usize> {
    let (c, _, _) = samples[0].target_pose.dims();
    let per = model.config.patch_dim / c.max(1);
    let p = (per as f64).sqrt().round() as usize;
    if c == 0 || p * p * c != model.config.patch_dim {
        return Err(Error::ShapeMismatch(format!(
            "patch_dim {} does not match {c}-channel rasters",
            model.config.patch_dim
        )));
    }
    Ok(p)
}

/// Where a training run writes its artefacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Metrics CSV path.
    pub metrics: Option<PathBuf>,
    /// Directory for periodic and final checkpoints.
    pub checkpoints: Option<PathBuf>,
}

/// Result of a completed phase.
pub struct PhaseResult {
    pub model: Model,
    pub log: Vec<MetricRow>,
}

/// Runs a full phase and returns the trained model with its per-step log.
pub fn train_phase(
    cfg: &TrainConfig,
    samples: Vec<StageSample>,
    model: Model,
    outputs: &TrainOutputs,
    mut on_step: impl FnMut(&MetricRow),
) -> Result<PhaseResult> {
    let mut trainer = Trainer::new(model, cfg.clone(), samples)?;
    let mut metrics = outputs.metrics.as_deref().map(MetricsLog::open).transpose()?;
    if let Some(dir) = &outputs.checkpoints {
        std::fs::create_dir_all(dir).with_path(dir)?;
    }
    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let row = trainer.step()?;
        if let Some(m) = metrics.as_mut() {
            m.append(&row)?;
        }
        on_step(&row);
        log.push(row);
        let done = trainer.step_index();
        if let Some(dir) = &outputs.checkpoints {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                save_checkpoint(&trainer.model, &dir.join(format!("step_{done:06}.ppc")))?;
            }
        }
    }
    let model = trainer.into_model();
    if let Some(dir) = &outputs.checkpoints {
        save_checkpoint(&model, &dir.join(format!("{}.ppc", cfg.phase.name())))?;
    }
    Ok(PhaseResult { model, log })
}

/// Mean loss over `samples` with noise fixed by `seed`, so repeated calls on
/// different models are directly comparable.
pub fn held_out_loss(
    model: &Model,
    samples: &[StageSample],
    phase: Phase,
    weights: LossWeights,
    seed: u64,
) -> Result<LossTerms> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no held-out stages".into()));
    }
    let opts = BatchOptions {
        p_drop: 0.0,
        patch: samples_patch(samples, model)?,
        assemble: phase_assemble(phase),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let mut sum = LossTerms::default();
    for chunk in samples.chunks(16) {
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        for s in chunk {
            let (t, f) = make_training_batch(s, &mut rng, &opts)?;
            tokens.push(t);
            targets.push(f.target());
        }
        let l = model.loss(&tokens, &targets, weights)?;
        let k = chunk.len() as f64;
        sum.total += l.total * k;
        sum.pose += l.pose * k;
        sum.image += l.image * k;
    }
    let n = samples.len() as f64;
    Ok(LossTerms {
        total: sum.total / n,
        pose: sum.pose / n,
        image: sum.image / n,
    })
}

/// Trailing moving average of the total loss.
pub fn moving_average(log: &[MetricRow], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(log.len());
    let mut acc = 0.0;
    for (i, r) in log.iter().enumerate() {
        acc += r.loss.total;
        if i >= w {
            acc -= log[i - w].loss.total;
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
