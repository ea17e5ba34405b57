//! Dual-stream diffusion transformer.
//!
//! Tokens are routed by kind to one of three parameter streams (text, pose,
//! image) and meet in a single joint attention per block. Each block applies
//! adaLN-style modulation computed from the pooled text conditioning plus an
//! embedding of the token's own timestep. The pose stream is created by
//! copying the trained image stream and is adapted only through LoRA deltas
//! and its own input/output projections.

mod lora;
mod params;

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use lora::{apply_lora, LoraDelta};
pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rope::{build_rope_tables, RopeTables};
use crate::seq::{unpatchify, PositionId, TokenBatch};
use crate::tape::{Tape, Var};
use crate::vocab;

/// Scale applied to timesteps before the sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Rotary dimensions per head given to the tau, x and y axes.
    pub rope_split: [usize; 3],
    pub rope_base: f64,
    pub lora_rank: usize,
    pub mlp_ratio: usize,
    /// Flattened patch width (`channels * patch * patch`).
    pub patch_dim: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            blocks: 4,
            heads: 2,
            rope_split: [8, 12, 12],
            rope_base: 10_000.0,
            lora_rank: 8,
            mlp_ratio: 4,
            patch_dim: 48,
            vocab_size: vocab::VOCAB_SIZE,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            dim: 16,
            blocks: 2,
            heads: 1,
            rope_split: [4, 6, 6],
            lora_rank: 4,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) || !self.dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "dim {} must be even and divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 || self.patch_dim == 0 {
            return Err(Error::InvalidConfig(
                "blocks, mlp_ratio and patch_dim must be positive".into(),
            ));
        }
        if self.vocab_size < vocab::VOCAB_SIZE {
            return Err(Error::InvalidConfig(format!("vocab_size below {}", vocab::VOCAB_SIZE)));
        }
        if self.lora_rank == 0 || self.lora_rank > self.dim {
            return Err(Error::InvalidRank {
                rank: self.lora_rank,
                dim: self.dim,
            });
        }
        build_rope_tables(self.head_dim(), self.rope_split, self.rope_base)?;
        Ok(())
    }

    /// Scalar hyperparameters as `(key, value)` pairs, for checkpoints.
    pub fn to_meta(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("dim", self.dim as f64),
            ("blocks", self.blocks as f64),
            ("heads", self.heads as f64),
            ("rope_tau", self.rope_split[0] as f64),
            ("rope_x", self.rope_split[1] as f64),
            ("rope_y", self.rope_split[2] as f64),
            ("rope_base", self.rope_base),
            ("lora_rank", self.lora_rank as f64),
            ("mlp_ratio", self.mlp_ratio as f64),
            ("patch_dim", self.patch_dim as f64),
            ("vocab_size", self.vocab_size as f64),
        ]
    }

    pub fn from_meta(meta: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .copied()
                .ok_or_else(|| Error::MissingParam(format!("@meta/{k}")))
        };
        let int = |k: &str| get(k).map(|v| v as usize);
        let cfg = Self {
            dim: int("dim")?,
            blocks: int("blocks")?,
            heads: int("heads")?,
            rope_split: [int("rope_tau")?, int("rope_x")?, int("rope_y")?],
            rope_base: get("rope_base")?,
            lora_rank: int("lora_rank")?,
            mlp_ratio: int("mlp_ratio")?,
            patch_dim: int("patch_dim")?,
            vocab_size: int("vocab_size")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Text,
    Pose,
    Image,
}

impl Stream {
    pub fn key(self) -> &'static str {
        match self {
            Stream::Text => "text",
            Stream::Pose => "pose",
            Stream::Image => "img",
        }
    }
}

/// Projections inside every block, with their (input, output) widths as
/// multiples of `dim`.
const BLOCK_PROJECTIONS: [(&str, usize, usize); 5] = [
    ("mod", 1, 6),
    ("qkv", 1, 3),
    ("out", 1, 1),
    ("mlp1", 1, 0),
    ("mlp2", 0, 1),
];

/// Predicted velocities for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity {
    pub pose: Option<Raster>,
    pub image: Raster,
}

/// Per-token head outputs of one sequence, in grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenOutput {
    pub pose: Option<Array2<f64>>,
    pub image: Array2<f64>,
}

/// Regression targets for one sequence; `None` terms contribute no loss.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityTarget {
    pub pose: Option<Raster>,
    pub image: Option<Raster>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub pose: f64,
    pub image: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pose: 1.0, image: 1.0 }
    }
}

/// Batch-mean loss terms; `total = w_pose * pose + w_image * image`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub pose: f64,
    pub image: f64,
}

pub type Gradients = BTreeMap<String, Array2<f64>>;

/// Attention probabilities indexed `[block][sequence][head]`.
pub type AttentionMaps = Vec<Vec<Vec<Array2<f64>>>>;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    rope: RopeTables,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

/// `[cos(t f_k) .., sin(t f_k) ..]` with geometric frequencies.
fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let f = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let a = t * TIME_SCALE * f;
        out[k] = a.cos();
        out[half + k] = a.sin();
    }
    out
}

impl Model {
    /// Fresh text and image streams; the pose stream does not exist yet.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let hidden = d * config.mlp_ratio;
        let mut p = ParamStore::new();
        p.insert("embed.text", normal(&mut rng, config.vocab_size, d, 1.0));
        for fc in ["time.fc1", "time.fc2"] {
            p.insert(format!("{fc}.w"), normal(&mut rng, d, d, (1.0 / d as f64).sqrt()));
            p.insert(format!("{fc}.b"), Array2::zeros((1, d)));
        }
        let pd = config.patch_dim;
        p.insert("img_in.w", normal(&mut rng, pd, d, (1.0 / pd as f64).sqrt()));
        p.insert("img_in.b", Array2::zeros((1, d)));
        let width = |m: usize| if m == 0 { hidden } else { m * d };
        for b in 0..config.blocks {
            for s in [Stream::Text, Stream::Image] {
                for (name, i, o) in BLOCK_PROJECTIONS {
                    let (fi, fo) = (width(i), width(o));
                    let prefix = format!("blocks.{b}.{}.{name}", s.key());
                    let w = if name == "mod" {
                        Array2::zeros((fi, fo))
                    } else {
                        normal(&mut rng, fi, fo, (1.0 / fi as f64).sqrt())
                    };
                    p.insert(format!("{prefix}.w"), w);
                    p.insert(format!("{prefix}.b"), Array2::zeros((1, fo)));
                }
            }
        }
        p.insert("final.img.mod.w", Array2::zeros((d, 2 * d)));
        p.insert("final.img.mod.b", Array2::zeros((1, 2 * d)));
        p.insert("head.img.w", Array2::zeros((d, pd)));
        p.insert("head.img.b", Array2::zeros((1, pd)));
        Self::from_params(config, p)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let rope = build_rope_tables(config.head_dim(), config.rope_split, config.rope_base)?;
        Ok(Self { config, params, rope })
    }

    pub fn rope_tables(&self) -> &RopeTables {
        &self.rope
    }

    pub fn has_pose_stream(&self) -> bool {
        self.params.contains("head.pose.w")
    }

    /// Names of every projection in the pose stream that carries a LoRA delta.
    pub fn lora_targets(&self) -> Vec<String> {
        let mut out = Vec::new();
        for b in 0..self.config.blocks {
            for (name, _, _) in BLOCK_PROJECTIONS {
                out.push(format!("blocks.{b}.pose.{name}"));
            }
        }
        out.push("final.pose.mod".into());
        out
    }

    /// Adds the pose stream as an exact copy of the image stream, attaches
    /// zero-effect LoRA deltas, and freezes everything except the deltas and
    /// the pose input/output projections.
    pub fn init_pose_stream(&mut self, seed: u64) -> Result<()> {
        if self.has_pose_stream() {
            return Err(Error::InvalidConfig("pose stream already initialised".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.config.lora_rank;
        let copy = |p: &mut ParamStore, from: &str, to: &str| -> Result<()> {
            let v = p.get(from)?.clone();
            p.insert(to, v);
            Ok(())
        };
        let p = &mut self.params;
        for b in 0..self.config.blocks {
            for (name, _, _) in BLOCK_PROJECTIONS {
                for suffix in ["w", "b"] {
                    copy(
                        p,
                        &format!("blocks.{b}.img.{name}.{suffix}"),
                        &format!("blocks.{b}.pose.{name}.{suffix}"),
                    )?;
                }
            }
        }
        for suffix in ["w", "b"] {
            copy(
                p,
                &format!("final.img.mod.{suffix}"),
                &format!("final.pose.mod.{suffix}"),
            )?;
            copy(p, &format!("img_in.{suffix}"), &format!("pose_in.{suffix}"))?;
            copy(p, &format!("head.img.{suffix}"), &format!("head.pose.{suffix}"))?;
        }
        p.insert("pose_in.ctx", Array2::zeros((1, self.config.dim)));
        for name in p.names().cloned().collect::<Vec<_>>() {
            p.freeze(&name);
        }
        for target in self.lora_targets() {
            let (fi, fo) = self.params.get(&format!("{target}.w"))?.dim();
            let down = normal(&mut rng, fi, r, (1.0 / fi as f64).sqrt());
            self.params.insert(format!("{target}.lora_down"), down);
            self.params.insert(format!("{target}.lora_up"), Array2::zeros((r, fo)));
        }
        for name in ["pose_in.w", "pose_in.b", "pose_in.ctx", "head.pose.w", "head.pose.b"] {
            self.params.unfreeze(name);
        }
        Ok(())
    }

    pub fn forward(&self, batches: &[TokenBatch]) -> Result<Vec<Velocity>> {
        let mut tape = Tape::new();
        let built = Builder::new(self, &mut tape, false).build(batches)?;
        built.velocities(&tape, batches)
    }

    /// Forward pass returning head outputs per token instead of rasters.
    pub fn forward_tokens(&self, batches: &[TokenBatch]) -> Result<Vec<TokenOutput>> {
        let mut tape = Tape::new();
        let built = Builder::new(self, &mut tape, false).build(batches)?;
        Ok(built.token_outputs(&tape, batches))
    }

    /// Forward pass that also returns attention probabilities.
    pub fn forward_with_attention(&self, batches: &[TokenBatch]) -> Result<(Vec<Velocity>, AttentionMaps)> {
        let mut tape = Tape::new();
        let built = Builder::new(self, &mut tape, false).build(batches)?;
        let v = built.velocities(&tape, batches)?;
        let maps = built
            .attention
            .iter()
            .map(|&a| tape.attention_probs(a).map(|p| p.to_vec()).unwrap_or_default())
            .collect();
        Ok((v, maps))
    }

    /// Loss terms without gradients.
    pub fn loss(&self, batches: &[TokenBatch], targets: &[VelocityTarget], weights: LossWeights) -> Result<LossTerms> {
        let mut tape = Tape::new();
        let built = Builder::new(self, &mut tape, false).build(batches)?;
        let (terms, _) = built.loss(&mut tape, batches, targets, weights)?;
        Ok(terms)
    }

    /// Loss terms and gradients for every trainable parameter.
    pub fn loss_and_grads(
        &self,
        batches: &[TokenBatch],
        targets: &[VelocityTarget],
        weights: LossWeights,
    ) -> Result<(LossTerms, Gradients)> {
        let mut tape = Tape::new();
        let built = Builder::new(self, &mut tape, true).build(batches)?;
        let (terms, root) = built.loss(&mut tape, batches, targets, weights)?;
        let mut grads = tape.backward(root);
        let mut out = Gradients::new();
        for name in self.params.trainable_names() {
            let g = match built.vars.get(name) {
                Some(&v) => grads.take(v),
                None => None,
            };
            let g = g.unwrap_or_else(|| Array2::zeros(self.params.get(name).expect("listed").raw_dim()));
            out.insert(name.clone(), g);
        }
        Ok((terms, out))
    }
}

/// Row bookkeeping for a stack of sequences.
struct Layout {
    /// Rows of each stream in the stacked hidden state.
    text_rows: usize,
    ctx_rows: usize,
    pose_rows: usize,
    image_rows: usize,
    /// Global row ids of each sequence's tokens, in its own token order.
    members: Arc<Vec<Vec<usize>>>,
    /// Position of every global row.
    positions: Vec<PositionId>,
    /// Conditioning group (3 per sequence) of every global row.
    groups: Vec<usize>,
    /// First pose-only row and image row of each sequence, relative to the
    /// start of that stream's output.
    pose_start: Vec<Option<usize>>,
    image_start: Vec<usize>,
}

impl Layout {
    fn new(batches: &[TokenBatch], patch_dim: usize) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        for b in batches {
            b.validate()?;
            if b.patch_dim() != patch_dim {
                return Err(Error::ShapeMismatch(format!(
                    "patch width {} but model expects {patch_dim}",
                    b.patch_dim()
                )));
            }
        }
        let text_rows: usize = batches.iter().map(|b| b.layout.text_len).sum();
        let ctx_rows: usize = batches.iter().map(|b| b.layout.ctx().len()).sum();
        let pose_rows: usize = batches.iter().map(|b| b.layout.pose().len()).sum();
        let image_rows: usize = batches.iter().map(|b| b.layout.grid_len()).sum();
        let total = text_rows + ctx_rows + pose_rows + image_rows;
        let mut positions = vec![PositionId::default(); total];
        let mut groups = vec![0; total];
        let mut members = Vec::with_capacity(batches.len());
        let (mut at_text, mut at_ctx, mut at_pose, mut at_img) =
            (0, text_rows, text_rows + ctx_rows, text_rows + ctx_rows + pose_rows);
        let mut pose_start = Vec::new();
        let mut image_start = Vec::new();
        for (s, b) in batches.iter().enumerate() {
            let l = &b.layout;
            let mut rows = Vec::with_capacity(l.total());
            let segments = [
                (l.text(), &mut at_text, 0),
                (l.ctx(), &mut at_ctx, 0),
                (l.pose(), &mut at_pose, 1),
                (l.image(), &mut at_img, 2),
            ];
            for (k, (range, cursor, g)) in segments.into_iter().enumerate() {
                if k == 2 {
                    pose_start.push(l.has_pose.then_some(*cursor - text_rows - ctx_rows));
                }
                if k == 3 {
                    image_start.push(*cursor - text_rows - ctx_rows - pose_rows);
                }
                for local in range {
                    let row = *cursor;
                    *cursor += 1;
                    positions[row] = b.positions[local];
                    groups[row] = 3 * s + g;
                    rows.push(row);
                }
            }
            members.push(rows);
        }
        Ok(Self {
            text_rows,
            ctx_rows,
            pose_rows,
            image_rows,
            members: Arc::new(members),
            positions,
            groups,
            pose_start,
            image_start,
        })
    }

    fn stream_rows(&self, s: Stream) -> std::ops::Range<usize> {
        let p0 = self.text_rows;
        let i0 = p0 + self.ctx_rows + self.pose_rows;
        match s {
            Stream::Text => 0..p0,
            Stream::Pose => p0..i0,
            Stream::Image => i0..i0 + self.image_rows,
        }
    }

    fn group_index(&self, rows: std::ops::Range<usize>) -> Arc<Vec<usize>> {
        Arc::new(self.groups[rows].to_vec())
    }
}

struct Built {
    vars: BTreeMap<String, Var>,
    layout: Layout,
    pose_out: Option<Var>,
    image_out: Var,
    attention: Vec<Var>,
}

fn stack<'v>(parts: impl Iterator<Item = ArrayView2<'v, f64>>, cols: usize) -> Array2<f64> {
    let views: Vec<ArrayView2<f64>> = parts.collect();
    if views.is_empty() {
        return Array2::zeros((0, cols));
    }
    concatenate(Axis(0), &views).expect("equal widths")
}

impl Built {
    fn token_outputs(&self, tape: &Tape, batches: &[TokenBatch]) -> Vec<TokenOutput> {
        let img = tape.value(self.image_out);
        let pose = self.pose_out.map(|v| tape.value(v));
        batches
            .iter()
            .enumerate()
            .map(|(s, b)| {
                let g = b.layout.grid_len();
                let i0 = self.layout.image_start[s];
                let pose = match (self.layout.pose_start[s], pose) {
                    (Some(p0), Some(pv)) => Some(pv.slice(ndarray::s![p0..p0 + g, ..]).to_owned()),
                    _ => None,
                };
                TokenOutput {
                    pose,
                    image: img.slice(ndarray::s![i0..i0 + g, ..]).to_owned(),
                }
            })
            .collect()
    }

    fn velocities(&self, tape: &Tape, batches: &[TokenBatch]) -> Result<Vec<Velocity>> {
        self.token_outputs(tape, batches)
            .into_iter()
            .zip(batches)
            .map(|(o, b)| {
                Ok(Velocity {
                    pose: o.pose.map(|p| unpatchify(&p, b.grid(), b.patch)).transpose()?,
                    image: unpatchify(&o.image, b.grid(), b.patch)?,
                })
            })
            .collect()
    }

    fn loss(
        &self,
        tape: &mut Tape,
        batches: &[TokenBatch],
        targets: &[VelocityTarget],
        weights: LossWeights,
    ) -> Result<(LossTerms, Var)> {
        use crate::seq::patchify;
        if targets.len() != batches.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {} sequences",
                targets.len(),
                batches.len()
            )));
        }
        let n = batches.len() as f64;
        let pd = tape.value(self.image_out).ncols();
        let mut img_target = Array2::zeros(tape.value(self.image_out).raw_dim());
        let mut img_w = vec![0.0; img_target.nrows()];
        let pose_dim = self.pose_out.map(|v| tape.value(v).raw_dim());
        let mut pose_target = pose_dim.map(Array2::zeros);
        let mut pose_w = vec![0.0; pose_target.as_ref().map_or(0, |t| t.nrows())];
        for (s, (b, t)) in batches.iter().zip(targets).enumerate() {
            let g = b.layout.grid_len();
            let w = 1.0 / (n * (g * pd) as f64);
            if let Some(img) = &t.image {
                let i0 = self.layout.image_start[s];
                img_target
                    .slice_mut(ndarray::s![i0..i0 + g, ..])
                    .assign(&patchify(img, b.patch)?);
                img_w[i0..i0 + g].iter_mut().for_each(|v| *v = w);
            }
            match (&t.pose, self.layout.pose_start[s], pose_target.as_mut()) {
                (Some(pose), Some(p0), Some(pt)) => {
                    pt.slice_mut(ndarray::s![p0..p0 + g, ..])
                        .assign(&patchify(pose, b.patch)?);
                    pose_w[p0..p0 + g].iter_mut().for_each(|v| *v = w);
                }
                (None, _, _) => {}
                _ => {
                    return Err(Error::ShapeMismatch(format!(
                        "pose target for sequence {s} without a pose segment"
                    )))
                }
            }
        }
        let img_loss = tape.sq_err(self.image_out, img_target, img_w);
        let mut terms = vec![(img_loss, weights.image)];
        let mut pose_value = 0.0;
        if let (Some(out), Some(target)) = (self.pose_out, pose_target) {
            let l = tape.sq_err(out, target, pose_w);
            pose_value = tape.scalar(l);
            terms.push((l, weights.pose));
        }
        let root = tape.weighted_sum(&terms);
        let image = tape.scalar(img_loss);
        Ok((
            LossTerms {
                total: tape.scalar(root),
                pose: pose_value,
                image,
            },
            root,
        ))
    }
}

struct Builder<'a, 't> {
    model: &'a Model,
    tape: &'t mut Tape<'a>,
    train: bool,
    vars: BTreeMap<String, Var>,
}

impl<'a, 't> Builder<'a, 't> {
    fn new(model: &'a Model, tape: &'t mut Tape<'a>, train: bool) -> Self {
        Self {
            model,
            tape,
            train,
            vars: BTreeMap::new(),
        }
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let params = &self.model.params;
        let t = params.get(name)?;
        let v = self.tape.param(t, self.train && !params.is_frozen(name));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w);
        let mut y = self.tape.add_bias(y, b);
        let down = format!("{prefix}.lora_down");
        if self.model.params.contains(&down) {
            let d = self.p(&down)?;
            let u = self.p(&format!("{prefix}.lora_up"))?;
            let xd = self.tape.matmul(x, d);
            let delta = self.tape.matmul(xd, u);
            y = self.tape.add(y, delta);
        }
        Ok(y)
    }

    /// Per-token modulation chunks of width `dim` from a per-group projection.
    fn modulation(&mut self, cond: Var, prefix: &str, groups: &Arc<Vec<usize>>, chunks: usize) -> Result<Vec<Var>> {
        let d = self.model.config.dim;
        let m = self.linear(cond, prefix)?;
        let per_token = self.tape.gather(m, groups.clone());
        Ok((0..chunks)
            .map(|c| self.tape.slice_cols(per_token, c * d, (c + 1) * d))
            .collect())
    }

    fn build(mut self, batches: &[TokenBatch]) -> Result<Built> {
        let cfg = &self.model.config;
        let (d, pd) = (cfg.dim, cfg.patch_dim);
        let layout = Layout::new(batches, pd)?;
        let has_pose = layout.ctx_rows + layout.pose_rows > 0;

        let embed = self.p("embed.text")?;
        let ids: Vec<usize> = batches
            .iter()
            .flat_map(|b| b.text_ids.iter().map(|&t| t as usize))
            .collect();
        let globals: Vec<usize> = batches
            .iter()
            .flat_map(|b| b.global_ids.iter().map(|&t| t as usize))
            .collect();
        if let Some(bad) = ids.iter().chain(&globals).find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::ShapeMismatch(format!("token id {bad} outside vocabulary")));
        }
        let text_h = self.tape.gather(embed, Arc::new(ids));
        let global_h = self.tape.gather(embed, Arc::new(globals));
        let mut at = 0;
        let pool_groups: Vec<Vec<usize>> = batches
            .iter()
            .map(|b| {
                let g: Vec<usize> = (at..at + b.global_ids.len()).collect();
                at += b.global_ids.len();
                g
            })
            .collect();
        if pool_groups.iter().any(|g| g.is_empty()) {
            return Err(Error::ShapeMismatch("sequence without global tokens".into()));
        }
        let pooled = self.tape.group_mean(global_h, Arc::new(pool_groups));
        let per_group: Vec<usize> = (0..batches.len()).flat_map(|s| [s, s, s]).collect();
        let pooled = self.tape.gather(pooled, Arc::new(per_group));

        let mut temb = Array2::zeros((3 * batches.len(), d));
        for (s, b) in batches.iter().enumerate() {
            for (k, t) in [0.0, b.t_pose, b.t_img].into_iter().enumerate() {
                temb.row_mut(3 * s + k)
                    .assign(&ndarray::Array1::from(timestep_embedding(t, d)));
            }
        }
        let temb = self.tape.constant(temb);
        let h1 = self.linear(temb, "time.fc1")?;
        let h1 = self.tape.silu(h1);
        let temb = self.linear(h1, "time.fc2")?;
        let cond = self.tape.add(temb, pooled);
        let cond = self.tape.silu(cond);

        let images = stack(batches.iter().map(|b| b.image_patches.view()), pd);
        let images = self.tape.constant(images);
        let mut streams: Vec<(Stream, Var)> = vec![(Stream::Text, text_h)];
        if has_pose {
            let ctx = stack(
                batches.iter().filter_map(|b| b.ctx_patches.as_ref().map(|a| a.view())),
                pd,
            );
            let pose = stack(
                batches.iter().filter_map(|b| b.pose_patches.as_ref().map(|a| a.view())),
                pd,
            );
            let mut parts = Vec::new();
            if ctx.nrows() > 0 {
                let c = self.tape.constant(ctx);
                let c = self.linear(c, "pose_in")?;
                let seg = self.p("pose_in.ctx")?;
                parts.push(self.tape.add_bias(c, seg));
            }
            if pose.nrows() > 0 {
                let p = self.tape.constant(pose);
                parts.push(self.linear(p, "pose_in")?);
            }
            let h = if parts.len() == 1 {
                parts[0]
            } else {
                self.tape.concat_rows(&parts)
            };
            streams.push((Stream::Pose, h));
        }
        let img_h = self.linear(images, "img_in")?;
        streams.push((Stream::Image, img_h));

        let angles = Arc::new(self.model.rope.angles(&layout.positions));
        let group_idx: Vec<Arc<Vec<usize>>> = streams
            .iter()
            .map(|(s, _)| layout.group_index(layout.stream_rows(*s)))
            .collect();
        let mut attention = Vec::new();
        for blk in 0..cfg.blocks {
            let mut mods = Vec::new();
            let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
            for (k, (s, x)) in streams.iter().enumerate() {
                let prefix = format!("blocks.{blk}.{}", s.key());
                let m = self.modulation(cond, &format!("{prefix}.mod"), &group_idx[k], 6)?;
                let n = self.tape.layer_norm(*x);
                let n = self.tape.modulate(n, m[0], m[1]);
                let qkv = self.linear(n, &format!("{prefix}.qkv"))?;
                qs.push(self.tape.slice_cols(qkv, 0, d));
                ks.push(self.tape.slice_cols(qkv, d, 2 * d));
                vs.push(self.tape.slice_cols(qkv, 2 * d, 3 * d));
                mods.push(m);
            }
            let q = self.tape.concat_rows(&qs);
            let k = self.tape.concat_rows(&ks);
            let v = self.tape.concat_rows(&vs);
            let q = self.tape.rope(q, angles.clone());
            let k = self.tape.rope(k, angles.clone());
            let a = self.tape.attention(q, k, v, cfg.heads, layout.members.clone());
            attention.push(a);
            for (k, (s, x)) in streams.iter_mut().enumerate() {
                let prefix = format!("blocks.{blk}.{}", s.key());
                let rows = layout.stream_rows(*s);
                let m = &mods[k];
                let a_s = self.tape.slice_rows(a, rows.start, rows.end);
                let o = self.linear(a_s, &format!("{prefix}.out"))?;
                let h = self.tape.gated_add(*x, m[2], o);
                let n = self.tape.layer_norm(h);
                let n = self.tape.modulate(n, m[3], m[4]);
                let hid = self.linear(n, &format!("{prefix}.mlp1"))?;
                let hid = self.tape.gelu(hid);
                let y = self.linear(hid, &format!("{prefix}.mlp2"))?;
                *x = self.tape.gated_add(h, m[5], y);
            }
        }

        let mut pose_out = None;
        let mut image_out = None;
        for (s, x) in &streams {
            let rows = layout.stream_rows(*s);
            let (x, rows) = match s {
                Stream::Text => continue,
                Stream::Pose => {
                    if layout.pose_rows == 0 {
                        continue;
                    }
                    let x = self
                        .tape
                        .slice_rows(*x, layout.ctx_rows, layout.ctx_rows + layout.pose_rows);
                    (x, rows.start + layout.ctx_rows..rows.end)
                }
                Stream::Image => (*x, rows),
            };
            let groups = layout.group_index(rows);
            let m = self.modulation(cond, &format!("final.{}.mod", s.key()), &groups, 2)?;
            let n = self.tape.layer_norm(x);
            let n = self.tape.modulate(n, m[0], m[1]);
            let out = self.linear(n, &format!("head.{}", s.key()))?;
            match s {
                Stream::Pose => pose_out = Some(out),
                _ => image_out = Some(out),
            }
        }
        Ok(Built {
            vars: self.vars,
            layout,
            pose_out,
            image_out: image_out.expect("image stream always present"),
            attention,
        })
    }
}

#[cfg(test)]
mod tests;
