//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Gradients, LossWeights, Model, ParamStore, VelocityTarget};
use crate::seq::TokenBatch;

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries whose true gradient
/// vanishes are compared absolutely.
pub const REL_FLOOR: f64 = 1e-7;
/// Multiple of machine epsilon allowed as rounding noise in each loss value.
pub const ROUNDING_ULPS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Entries sampled per tensor; tensors smaller than this are checked fully.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            samples_per_tensor: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub frozen: bool,
    /// Entries compared (0 for frozen tensors).
    pub checked: usize,
    pub max_rel_err: f64,
    /// Largest relative error after discounting finite-difference rounding
    /// noise; this is what the tolerance applies to.
    pub max_excess_err: f64,
    /// For frozen tensors: whether an analytic gradient was (wrongly) produced.
    pub has_gradient: bool,
}

impl TensorCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        if self.frozen {
            !self.has_gradient
        } else {
            self.max_excess_err < tolerance
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passes(self.tolerance))
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| !t.passes(self.tolerance)).collect()
    }

    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<40} {:>7} {:>8} {:>12}  status\n",
            "tensor", "frozen", "checked", "max_rel_err"
        );
        for t in &self.tensors {
            let status = if t.passes(self.tolerance) { "ok" } else { "FAIL" };
            s.push_str(&format!(
                "{:<40} {:>7} {:>8} {:>12.3e}  {status}\n",
                t.name, t.frozen, t.checked, t.max_rel_err
            ));
        }
        s
    }
}

/// Compares `analytic` against central differences of a loss.
///
/// `loss_at(name, (i, j), value)` must return the loss with that one entry of
/// `params` replaced by `value` and every other entry unchanged.
pub fn check_gradients(
    params: &ParamStore,
    analytic: &Gradients,
    mut loss_at: impl FnMut(&str, (usize, usize), f64) -> Result<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tensors = Vec::new();
    for (name, value) in params.iter() {
        if params.is_frozen(name) {
            let has_gradient = analytic.get(name).is_some_and(|g| g.iter().any(|v| *v != 0.0));
            tensors.push(TensorCheck {
                name: name.clone(),
                frozen: true,
                checked: 0,
                max_rel_err: 0.0,
                max_excess_err: 0.0,
                has_gradient,
            });
            continue;
        }
        let n = value.len();
        let picks: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.samples_per_tensor).into_vec()
        };
        let cols = value.ncols();
        let mut worst = 0.0f64;
        let mut worst_excess = 0.0f64;
        for flat in &picks {
            let at = (flat / cols, flat % cols);
            let x = value[[at.0, at.1]];
            let fp = loss_at(name, at, x + FD_STEP)?;
            let fm = loss_at(name, at, x - FD_STEP)?;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let an = analytic.get(name).map_or(0.0, |g| g[[at.0, at.1]]);
            let noise = ROUNDING_ULPS * f64::EPSILON * (fp.abs() + fm.abs()) / (2.0 * FD_STEP);
            let scale = numeric.abs().max(an.abs()).max(REL_FLOOR);
            let gap = (numeric - an).abs();
            worst = worst.max(gap / scale);
            worst_excess = worst_excess.max((gap - noise).max(0.0) / scale);
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            frozen: false,
            checked: picks.len(),
            max_rel_err: worst,
            max_excess_err: worst_excess,
            has_gradient: analytic.contains_key(name),
        });
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        tensors,
    })
}

/// Gradient check of the full model loss on the given batch.
pub fn grad_check(
    model: &Model,
    batches: &[TokenBatch],
    targets: &[VelocityTarget],
    weights: LossWeights,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(batches, targets, weights)?;
    let mut probe = model.clone();
    check_gradients(
        &model.params,
        &grads,
        |name, (i, j), value| {
            let original = probe.params.get(name)?[[i, j]];
            probe.params.get_mut(name)?[[i, j]] = value;
            let loss = probe.loss(batches, targets, weights);
            probe.params.get_mut(name)?[[i, j]] = original;
            Ok(loss?.total)
        },
        opts,
    )
}
