//! Flow matching with independent per-modality noise levels.
//!
//! A clean sample `x1` and Gaussian noise `x0` are blended as
//! `x_t = (1 - t) x1 + t x0`; the model regresses the constant velocity
//! `u = x0 - x1`. Sampling integrates from `t = 1` down to `t = 0` with
//! explicit Euler steps, optionally with classifier-free guidance.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{LossTerms, LossWeights, VelocityTarget};
use crate::raster::Raster;
use crate::seq::{assemble_sequence, AssembleOptions, TokenBatch};
use crate::world::StageSample;

/// Anything the sampler can integrate.
pub trait FlowState: Clone {
    /// Elementwise `f(self, other)`.
    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self;
    fn is_finite(&self) -> bool;
}

impl FlowState for f64 {
    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        f(*self, *other)
    }

    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
}

impl FlowState for Raster {
    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.dims(), other.dims(), "raster shapes differ");
        let mut out = self.data().clone();
        out.zip_mut_with(other.data(), |a, &b| *a = f(*a, b));
        Raster::from_array(out)
    }

    fn is_finite(&self) -> bool {
        self.all_finite()
    }
}

impl<S: FlowState> FlowState for Vec<S> {
    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.len(), other.len(), "state lengths differ");
        self.iter().zip(other).map(|(a, b)| a.zip_with(b, &f)).collect()
    }

    fn is_finite(&self) -> bool {
        self.iter().all(FlowState::is_finite)
    }
}

/// `(1 - t) x1 + t x0`, exact at both endpoints.
pub fn interpolate<S: FlowState>(x1: &S, x0: &S, t: f64) -> S {
    if t == 0.0 {
        return x1.clone();
    }
    if t == 1.0 {
        return x0.clone();
    }
    x1.zip_with(x0, |a, b| (1.0 - t) * a + t * b)
}

/// `x0 - x1`.
pub fn velocity_target<S: FlowState>(x0: &S, x1: &S) -> S {
    x0.zip_with(x1, |a, b| a - b)
}

/// `v_uncond + g (v_cond - v_uncond)`; returns the exact input at `g = 0` or `g = 1`.
pub fn cfg_combine<S: FlowState>(v_cond: &S, v_uncond: &S, g: f64) -> S {
    if g == 1.0 {
        return v_cond.clone();
    }
    if g == 0.0 {
        return v_uncond.clone();
    }
    v_cond.zip_with(v_uncond, |c, u| u + g * (c - u))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 4.0,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.guidance.is_nan() || self.guidance < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "steps {} must be >= 1 and guidance {} >= 0",
                self.steps, self.guidance
            )));
        }
        Ok(())
    }

    /// Sequences evaluated per sampling step (conditional, plus unconditional when guided).
    pub fn evals_per_step(&self) -> usize {
        if self.guidance == 1.0 {
            1
        } else {
            2
        }
    }
}

/// The time grid `1 = t_0 > t_1 > ... > t_steps = 0`.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect()
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` to `t = 0` on a uniform grid.
///
/// `velocity` receives the state, the current time and the step index.
pub fn euler_sample<S: FlowState>(
    mut velocity: impl FnMut(&S, f64, usize) -> Result<S>,
    x_init: S,
    steps: usize,
) -> Result<S> {
    if steps == 0 {
        return Err(Error::InvalidConfig("sampling needs at least one step".into()));
    }
    let grid = time_grid(steps);
    let mut x = x_init;
    for step in 0..steps {
        let (t, next) = (grid[step], grid[step + 1]);
        let v = velocity(&x, t, step)?;
        if !v.is_finite() {
            return Err(Error::NumericBlowup { step });
        }
        let dt = t - next;
        x = x.zip_with(&v, |a, b| a - dt * b);
    }
    Ok(x)
}

/// One training example's flow quantities. Pose fields are absent when the
/// pose segments are not modelled; image targets are absent at intermediate
/// stages, where the image input is pure noise.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub x1_pose: Option<Raster>,
    pub x1_img: Option<Raster>,
    pub x0_pose: Option<Raster>,
    pub x0_img: Raster,
    pub t_pose: f64,
    pub t_img: f64,
    pub xt_pose: Option<Raster>,
    pub xt_img: Raster,
    pub u_pose: Option<Raster>,
    pub u_img: Option<Raster>,
    pub text_dropped: bool,
}

impl FlowBatch {
    pub fn target(&self) -> VelocityTarget {
        VelocityTarget {
            pose: self.u_pose.clone(),
            image: self.u_img.clone(),
        }
    }
}

fn mse(a: &Raster, b: &Raster) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Per-stage loss: pose MSE always, image MSE only on the final stage.
pub fn stage_loss(
    v_pose: Option<&Raster>,
    v_img: &Raster,
    batch: &FlowBatch,
    stage: usize,
    num_people: usize,
    weights: LossWeights,
) -> LossTerms {
    let pose = match (v_pose, &batch.u_pose) {
        (Some(p), Some(u)) => mse(p, u),
        _ => 0.0,
    };
    let image = match (&batch.u_img, stage == num_people) {
        (Some(u), true) => mse(v_img, u),
        _ => 0.0,
    };
    LossTerms {
        total: weights.pose * pose + weights.image * image,
        pose,
        image,
    }
}

/// Options for turning a stage into a training example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchOptions {
    /// Probability of replacing every text token by the null token.
    pub p_drop: f64,
    pub patch: usize,
    pub assemble: AssembleOptions,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            p_drop: 0.1,
            patch: 4,
            assemble: AssembleOptions::default(),
        }
    }
}

pub fn gaussian_raster(rng: &mut impl Rng, dims: (usize, usize, usize)) -> Raster {
    Raster::from_array(Array3::from_shape_simple_fn(dims, || rng.sample(StandardNormal)))
}

/// Draws noise levels, noise and (optionally) text dropout for one stage.
///
/// Random draws happen in a fixed order regardless of options, so the same
/// rng state always yields the same noise.
pub fn make_training_batch(
    stage: &StageSample,
    rng: &mut impl Rng,
    opts: &BatchOptions,
) -> Result<(TokenBatch, FlowBatch)> {
    let dims = stage.target_pose.dims();
    let t_pose: f64 = rng.random_range(0.0..=1.0);
    let t_img_draw: f64 = rng.random_range(0.0..=1.0);
    let drop = rng.random_bool(opts.p_drop.clamp(0.0, 1.0));
    let x0_pose = gaussian_raster(rng, dims);
    let x0_img = gaussian_raster(rng, dims);
    let with_pose = opts.assemble.include_pose;
    let is_final = stage.prompt.is_final();

    let (t_img, x1_img, xt_img, u_img) = match (&stage.target_image, is_final) {
        (Some(img), true) => (
            t_img_draw,
            Some(img.clone()),
            interpolate(img, &x0_img, t_img_draw),
            Some(velocity_target(&x0_img, img)),
        ),
        _ => (1.0, None, x0_img.clone(), None),
    };
    let (x1_pose, x0_pose, xt_pose, u_pose) = if with_pose {
        let x1 = stage.target_pose.clone();
        let xt = interpolate(&x1, &x0_pose, t_pose);
        let u = velocity_target(&x0_pose, &x1);
        (Some(x1), Some(x0_pose), Some(xt), Some(u))
    } else {
        (None, None, None, None)
    };
    let context = (stage.stage() > 1).then_some(&stage.context_pose);
    let tokens = assemble_sequence(
        &stage.prompt,
        context,
        xt_pose.as_ref(),
        &xt_img,
        t_pose,
        t_img,
        opts.patch,
        opts.assemble,
    )?;
    let tokens = if drop { tokens.without_text() } else { tokens };
    Ok((
        tokens,
        FlowBatch {
            x1_pose,
            x1_img,
            x0_pose,
            x0_img,
            t_pose,
            t_img,
            xt_pose,
            xt_img,
            u_pose,
            u_img,
            text_dropped: drop,
        },
    ))
}
