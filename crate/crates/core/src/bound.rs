//! One-step convergence-bound evaluation and constant estimation.
//!
//! The bound predicts the expected change of the global training loss over
//! one round as a function of the action (how many samples the selected
//! devices contribute, and the quantization bitwidth) and a handful of
//! model constants: the smoothness constant, two gradient-diversity
//! coefficients, and a combined non-i.i.d. term. The constants are fitted
//! by fixed-step gradient descent on a squared-residual regression loss
//! over observed transitions, and the fitted bound then serves as a
//! deterministic transition model for planning.

use crate::action::Action;
use crate::datasets::{Dataset, DevicePartition};
use crate::error::{Error, Result};
use crate::qnn::{mean_gradient_flat, ModelParams};
use crate::rng::{stream, SeededRng, StreamKind};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundMode {
    Convex,
    Nonconvex,
}

/// Estimated constants of the one-step bound.
///
/// In convex mode only `l`, `zeta1`, `zeta2`, `beps2` are used. Nonconvex
/// mode replaces `l` with `l_gamma` and adds the residual `ups4m2`
/// (`M^2 Upsilon^4` as a single parameter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub mode: BoundMode,
    /// Smoothness constant, > 0.
    pub l: f64,
    /// Gradient-diversity offset, >= 0.
    pub zeta1: f64,
    /// Gradient-diversity slope, >= 0.
    pub zeta2: f64,
    /// Combined non-i.i.d. constant, >= 0.
    pub beps2: f64,
    /// Nonconvex smoothness, > 0 (unused in convex mode).
    pub l_gamma: f64,
    /// Nonconvex residual, >= 0 (unused in convex mode).
    pub ups4m2: f64,
}

impl BoundParams {
    pub fn convex(l: f64, zeta1: f64, zeta2: f64, beps2: f64) -> Self {
        Self { mode: BoundMode::Convex, l, zeta1, zeta2, beps2, l_gamma: 0.0, ups4m2: 0.0 }
    }

    pub fn nonconvex(l_gamma: f64, zeta1: f64, zeta2: f64, beps2: f64, ups4m2: f64) -> Self {
        Self { mode: BoundMode::Nonconvex, l: 0.0, zeta1, zeta2, beps2, l_gamma, ups4m2 }
    }

    /// The smoothness constant in play for the current mode.
    pub fn smoothness(&self) -> f64 {
        match self.mode {
            BoundMode::Convex => self.l,
            BoundMode::Nonconvex => self.l_gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.smoothness();
        if !(l.is_finite() && l > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "smoothness constant must be positive, got {l}"
            )));
        }
        for (name, v) in [
            ("zeta1", self.zeta1),
            ("zeta2", self.zeta2),
            ("beps2", self.beps2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if self.mode == BoundMode::Nonconvex && !(self.ups4m2.is_finite() && self.ups4m2 >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ups4m2 must be nonnegative, got {}",
                self.ups4m2
            )));
        }
        Ok(())
    }
}

/// Per-transition inputs of the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepFeatures {
    /// Squared norm of the global gradient at the round's starting model.
    pub grad_norm_sq: f64,
    /// `A`: samples contributed by the selected devices.
    pub selected_samples: f64,
    /// `N`: total samples across all devices.
    pub total_samples: f64,
    /// Quantization bitwidth of the round.
    pub alpha: u32,
    /// Device count `M`.
    pub device_count: usize,
    /// Full-precision bitwidth `V`.
    pub full_bitwidth: u32,
}

/// Expected quantization-error norm `M * 2^-alpha`.
pub fn quant_error_norm(alpha: u32, device_count: usize) -> f64 {
    device_count as f64 * 2f64.powi(-(alpha as i32))
}

/// Evaluate the one-step bound on the loss change.
///
/// At `alpha = V` the quantizer is the identity, so the expected
/// quantization error is exactly zero and with `A = N` the value reduces
/// to the classical descent term `-grad_norm_sq / (2 L)`.
pub fn bound_step(f: &StepFeatures, p: &BoundParams) -> Result<f64> {
    p.validate()?;
    let l = p.smoothness();
    let e = if f.alpha >= f.full_bitwidth {
        0.0
    } else {
        quant_error_norm(f.alpha, f.device_count)
    };
    let n = f.total_samples;
    let gap = n - f.selected_samples;
    let c = 4.0 * gap * gap / (n * n);
    // Dividing first makes the full-participation full-precision case
    // return the canonical -grad/(2L) to the last bit.
    let descent = (f.grad_norm_sq / (2.0 * l)) * (-1.0 + c * (e + 1.0) * p.zeta2);
    let penalty = ((e + 1.0) / (2.0 * l)) * (c * (p.zeta1 + p.beps2) + l * l * e);
    let quant_sq = e * e;
    let residual = match p.mode {
        BoundMode::Convex => 0.0,
        BoundMode::Nonconvex => p.ups4m2 / (2.0 * l),
    };
    Ok(descent + penalty + quant_sq + residual)
}

/// One observed transition: losses before/after a round plus the features
/// the bound needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub f_t: f64,
    pub action: Action,
    pub f_next: f64,
    pub grad_norm_sq: f64,
    /// `A`: effective sample count of the selected devices.
    pub selected_samples: f64,
    /// `N`: total samples.
    pub total_samples: f64,
    pub full_bitwidth: u32,
}

impl TransitionRecord {
    pub fn features(&self) -> StepFeatures {
        StepFeatures {
            grad_norm_sq: self.grad_norm_sq,
            selected_samples: self.selected_samples,
            total_samples: self.total_samples,
            alpha: self.action.alpha,
            device_count: self.action.device_count(),
            full_bitwidth: self.full_bitwidth,
        }
    }

    pub fn observed_delta(&self) -> f64 {
        self.f_next - self.f_t
    }
}

/// Mean squared residual between observed loss changes and the bound.
pub fn regression_loss(p: &BoundParams, buffer: &[TransitionRecord]) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("empty transition buffer".into()));
    }
    let mut sum = 0.0;
    for rec in buffer {
        let r = rec.observed_delta() - bound_step(&rec.features(), p)?;
        sum += r * r;
    }
    Ok(sum / buffer.len() as f64)
}

fn param_vector(p: &BoundParams) -> Vec<f64> {
    match p.mode {
        BoundMode::Convex => vec![p.l, p.zeta1, p.zeta2, p.beps2],
        BoundMode::Nonconvex => vec![p.l_gamma, p.zeta1, p.zeta2, p.beps2, p.ups4m2],
    }
}

fn with_vector(mode: BoundMode, v: &[f64]) -> BoundParams {
    match mode {
        BoundMode::Convex => BoundParams::convex(v[0], v[1], v[2], v[3]),
        BoundMode::Nonconvex => BoundParams::nonconvex(v[0], v[1], v[2], v[3], v[4]),
    }
}

/// Analytic gradient of [`regression_loss`] with respect to the active
/// parameters (`[L, zeta1, zeta2, beps2]` in convex mode, plus `ups4m2`
/// in nonconvex mode).
pub fn regression_gradient_analytic(
    p: &BoundParams,
    buffer: &[TransitionRecord],
) -> Result<Vec<f64>> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("empty transition buffer".into()));
    }
    p.validate()?;
    let l = p.smoothness();
    let n_params = if p.mode == BoundMode::Convex { 4 } else { 5 };
    let mut grad = vec![0.0; n_params];
    let inv_i = 1.0 / buffer.len() as f64;
    for rec in buffer {
        let f = rec.features();
        let e = if f.alpha >= f.full_bitwidth {
            0.0
        } else {
            quant_error_norm(f.alpha, f.device_count)
        };
        let n = f.total_samples;
        let gap = n - f.selected_samples;
        let c = 4.0 * gap * gap / (n * n);
        let g = f.grad_norm_sq;
        let residual = rec.observed_delta() - bound_step(&f, p)?;
        // dK/dL: the 1/(2L) terms flip sign and square, the L^2 e / (2L)
        // term differentiates to (e+1) e / 2, the nonconvex residual to
        // -ups4m2 / (2 L^2).
        let mut dk_dl = -(1.0 / (2.0 * l * l)) * (-1.0 + c * (e + 1.0) * p.zeta2) * g
            - (1.0 / (2.0 * l * l)) * (e + 1.0) * c * (p.zeta1 + p.beps2)
            + (e + 1.0) * e / 2.0;
        if p.mode == BoundMode::Nonconvex {
            dk_dl -= p.ups4m2 / (2.0 * l * l);
        }
        let dk_dz1 = (e + 1.0) * c / (2.0 * l);
        let dk_dz2 = (1.0 / (2.0 * l)) * c * (e + 1.0) * g;
        let dk_db = dk_dz1;
        let scale = -2.0 * residual * inv_i;
        grad[0] += scale * dk_dl;
        grad[1] += scale * dk_dz1;
        grad[2] += scale * dk_dz2;
        grad[3] += scale * dk_db;
        if p.mode == BoundMode::Nonconvex {
            grad[4] += scale / (2.0 * l);
        }
    }
    Ok(grad)
}

/// Central-difference gradient of [`regression_loss`], the independent
/// check on the analytic form.
pub fn regression_gradient_numeric(
    p: &BoundParams,
    buffer: &[TransitionRecord],
) -> Result<Vec<f64>> {
    let base = param_vector(p);
    let mut grad = vec![0.0; base.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let h = 1e-6 * base[i].abs().max(1.0);
        let mut up = base.clone();
        up[i] += h;
        let mut dn = base.clone();
        dn[i] -= h;
        // Keep the perturbed points inside the validity domain.
        if i == 0 {
            dn[0] = dn[0].max(1e-9);
        } else {
            dn[i] = dn[i].max(0.0);
        }
        let lu = regression_loss(&with_vector(p.mode, &up), buffer)?;
        let ld = regression_loss(&with_vector(p.mode, &dn), buffer)?;
        *g = (lu - ld) / (up[i] - dn[i]);
    }
    Ok(grad)
}

/// Per-parameter learning rates of the regression descent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LearningRates {
    pub l: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub beps2: f64,
    pub ups4m2: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { l: 0.02, zeta1: 0.02, zeta2: 0.02, beps2: 0.02, ups4m2: 0.02 }
    }
}

impl LearningRates {
    fn as_vec(&self, mode: BoundMode) -> Vec<f64> {
        match mode {
            BoundMode::Convex => vec![self.l, self.zeta1, self.zeta2, self.beps2],
            BoundMode::Nonconvex => {
                vec![self.l, self.zeta1, self.zeta2, self.beps2, self.ups4m2]
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub rates: LearningRates,
    pub steps: usize,
    pub restarts: usize,
    pub seed: u64,
    pub init: BoundParams,
}

impl EstimateOptions {
    pub fn convex_default(seed: u64) -> Self {
        Self {
            rates: LearningRates::default(),
            steps: 60_000,
            restarts: 8,
            seed,
            // Order-of-magnitude neutral initialization.
            init: BoundParams::convex(1.0, 1.0, 1.0, 0.1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub params: BoundParams,
    pub loss: f64,
    pub restarts_converged: usize,
}

fn project(v: &mut [f64]) {
    v[0] = v[0].max(1e-6);
    for x in v.iter_mut().skip(1) {
        *x = x.max(0.0);
    }
}

/// One projected gradient-descent run from a given initialization.
/// Fails if the loss increases 100 consecutive steps.
fn descend(
    buffer: &[TransitionRecord],
    rates: &[f64],
    steps: usize,
    init: &BoundParams,
) -> Result<(BoundParams, f64)> {
    let mode = init.mode;
    let mut v = param_vector(init);
    project(&mut v);
    let initial_loss = regression_loss(&with_vector(mode, &v), buffer)?;
    let mut loss = initial_loss;
    let mut rising = 0usize;
    for _ in 0..steps {
        let p = with_vector(mode, &v);
        let grad = regression_gradient_analytic(&p, buffer)?;
        for ((x, g), r) in v.iter_mut().zip(&grad).zip(rates) {
            *x -= r * g;
        }
        project(&mut v);
        let new_loss = regression_loss(&with_vector(mode, &v), buffer)?;
        if !new_loss.is_finite() {
            return Err(Error::EstimationFailure(
                "regression loss diverged to a non-finite value; try smaller learning rates"
                    .into(),
            ));
        }
        if new_loss > loss {
            rising += 1;
            if rising >= 100 {
                return Err(Error::EstimationFailure(
                    "regression loss increased 100 consecutive steps; try smaller learning rates"
                        .into(),
                ));
            }
        } else {
            rising = 0;
        }
        loss = new_loss;
    }
    // A run that ends worse than it started has diverged, whatever the
    // step-by-step pattern looked like.
    if loss > initial_loss {
        return Err(Error::EstimationFailure(
            "regression loss ended above its starting value; try smaller learning rates".into(),
        ));
    }
    Ok((with_vector(mode, &v), loss))
}

/// Fit the bound constants by fixed-step projected gradient descent on the
/// regression loss, with seeded restarts whose initializations are scaled
/// by random factors in `10^[-1, 1]`. The first candidate uses the given
/// initialization unchanged; a later restart replaces the incumbent only
/// when it improves the loss beyond numerical noise. A diverged restart
/// shrinks the step sizes tenfold for the remaining restarts (each
/// individual descent still runs at a fixed step), so poorly conditioned
/// buffers degrade to slower fits instead of failures.
pub fn estimate_params(
    buffer: &[TransitionRecord],
    opts: &EstimateOptions,
) -> Result<EstimateReport> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("empty transition buffer".into()));
    }
    let mode = opts.init.mode;
    let rates = opts.rates.as_vec(mode);
    if rates.iter().any(|&r| r <= 0.0) {
        return Err(Error::InvalidArgument("learning rates must be positive".into()));
    }
    let mut rng = stream(opts.seed, StreamKind::Estimator, 0);
    let mut best: Option<(BoundParams, f64)> = None;
    let mut converged = 0usize;
    let mut last_err = None;
    let mut rate_scale = 1.0;
    for k in 0..opts.restarts.max(1) {
        let init = if k == 0 {
            opts.init.clone()
        } else {
            let base = param_vector(&opts.init);
            let scaled: Vec<f64> = base
                .iter()
                .map(|&x| x * 10f64.powf(rng.gen_range(-1.0..=1.0)))
                .collect();
            with_vector(mode, &scaled)
        };
        let scaled_rates: Vec<f64> = rates.iter().map(|r| r * rate_scale).collect();
        match descend(buffer, &scaled_rates, opts.steps, &init) {
            Ok((params, loss)) => {
                converged += 1;
                let improves = match &best {
                    None => true,
                    Some((_, incumbent)) => loss < incumbent - 1e-9 * (1.0 + incumbent.abs()),
                };
                if improves {
                    best = Some((params, loss));
                }
            }
            Err(e) => {
                last_err = Some(e);
                rate_scale = (rate_scale / 10.0).max(1e-9);
            }
        }
    }
    match best {
        Some((params, loss)) => Ok(EstimateReport { params, loss, restarts_converged: converged }),
        None => Err(last_err
            .unwrap_or_else(|| Error::EstimationFailure("no restart converged".into()))),
    }
}

/// Per-device gradient-gap diagnostics (the non-i.i.d. degree).
#[derive(Debug, Clone)]
pub struct EpsilonDiagnostics {
    /// `||eps_m||` per device.
    pub per_device_norms: Vec<f64>,
    /// Weighted combination of the per-device gaps, in weight space.
    pub combined: Vec<f64>,
    /// `||eps||` of the combination.
    pub norm: f64,
}

/// Compute the per-device gradient gaps `eps_m = grad F - grad F_m` at the
/// full-precision model and their selection-weighted combination.
/// Diagnostics only; the bound consumes the regressed scalar.
pub fn compute_epsilon(
    model: &ModelParams,
    ds: &Dataset,
    part: &DevicePartition,
    selected: &[bool],
    batch_sizes: &[usize],
) -> Result<EpsilonDiagnostics> {
    if selected.len() != part.device_count() || batch_sizes.len() != part.device_count() {
        return Err(Error::ShapeMismatch(
            "selection and batch sizes must cover every device".into(),
        ));
    }
    let packed = model.quantize(model.v)?.packed()?;
    let one_hots: Vec<Vec<f64>> = (0..ds.len()).map(|n| ds.one_hot(n)).collect();
    let all: Vec<(&[f64], &[f64])> = (0..ds.len())
        .map(|n| (ds.inputs[n].as_slice(), one_hots[n].as_slice()))
        .collect();
    let global = mean_gradient_flat(&packed, &all)?;

    let mut per_device_norms = Vec::with_capacity(part.device_count());
    let mut combined = vec![0.0; global.len()];
    let total_batch: f64 = batch_sizes.iter().map(|&b| b as f64).sum();
    for m in 0..part.device_count() {
        let local_samples: Vec<(&[f64], &[f64])> = part
            .samples_of(m)
            .iter()
            .map(|&n| (ds.inputs[n].as_slice(), one_hots[n].as_slice()))
            .collect();
        if local_samples.is_empty() {
            per_device_norms.push(0.0);
            continue;
        }
        let local = mean_gradient_flat(&packed, &local_samples)?;
        let eps_m: Vec<f64> = global.iter().zip(&local).map(|(g, l)| g - l).collect();
        per_device_norms.push(eps_m.iter().map(|v| v * v).sum::<f64>().sqrt());
        if selected[m] && total_batch > 0.0 {
            let w = part.samples_of(m).len() as f64 * batch_sizes[m] as f64 / total_batch;
            for (c, e) in combined.iter_mut().zip(&eps_m) {
                *c += w * e;
            }
        }
    }
    let norm = combined.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(EpsilonDiagnostics { per_device_norms, combined, norm })
}

/// Deterministic learned transition: the next loss is the current loss
/// plus the bound value, clamped below at zero, taken with probability 1.
pub fn predict_next_state(
    f_t: f64,
    features: &StepFeatures,
    params: &BoundParams,
) -> Result<(f64, f64)> {
    let delta = bound_step(features, params)?;
    Ok(((f_t + delta).max(0.0), 1.0))
}

/// Draw a diverse synthetic transition buffer exactly consistent with the
/// given parameters. Shared by the recovery tests and the planted-model
/// environment checks.
pub fn planted_buffer(
    params: &BoundParams,
    records: usize,
    device_count: usize,
    total_samples: f64,
    full_bitwidth: u32,
    rng: &mut SeededRng,
) -> Result<Vec<TransitionRecord>> {
    let alphas = [2u32, 3, 4, 6, 8];
    let mut out = Vec::with_capacity(records);
    let mut f_t = 2.0;
    for i in 0..records {
        let alpha = alphas[i % alphas.len()];
        let num_sel = rng.gen_range(1..=device_count);
        let mut selected = vec![false; device_count];
        for s in selected.iter_mut().take(num_sel) {
            *s = true;
        }
        let per_device = total_samples / device_count as f64;
        let features = StepFeatures {
            grad_norm_sq: rng.gen_range(0.2..1.5),
            selected_samples: per_device * num_sel as f64,
            total_samples,
            alpha,
            device_count,
            full_bitwidth,
        };
        let delta = bound_step(&features, params)?;
        out.push(TransitionRecord {
            f_t,
            action: Action::new(selected, alpha),
            f_next: f_t + delta,
            grad_norm_sq: features.grad_norm_sq,
            selected_samples: features.selected_samples,
            total_samples,
            full_bitwidth,
        });
        f_t = (f_t + delta).clamp(0.05, 4.0);
    }
    Ok(out)
}
