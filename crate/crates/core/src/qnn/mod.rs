//! Layered feed-forward network with variable-bitwidth weight and
//! activation quantization.
//!
//! The forward pass at `1 < alpha < V` runs on bit-plane decompositions of
//! the fixed-point values (see [`bitplane`]); `alpha = 1` uses the packed
//! binary inner product, and `alpha = V` is a plain full-precision pass.
//! Backpropagation goes through the quantized forward pass with the
//! straight-through estimator: the weight quantizer's derivative is
//! replaced by the hard-tanh derivative taken at the full-precision
//! weights, and is exactly 1 when `alpha = V` (the quantizer is the
//! identity there, so the full-precision path reproduces unquantized SGD
//! bit for bit).

pub mod bitplane;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use rand::Rng;

pub use bitplane::{binary_inner_product, bitplane_inner_product, PackedPlanes, PackedSigns};

/// Loss-log clipping: output activations are clamped to
/// `[EPS_CLIP, 1 - EPS_CLIP]` before taking logarithms.
pub const EPS_CLIP: f64 = 1e-12;

/// Row-major dense matrix. `rows` is the layer's output width, `cols` its
/// input width. Kept deliberately minimal: the bit-exact reproducibility
/// contract pins the exact summation order of every inner product, so all
/// products are written as explicit in-order loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `W x` with in-order accumulation per row.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "matvec: matrix has {} columns, input has {}",
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *o = acc;
        }
        Ok(out)
    }

    /// `Wᵀ d` with in-order accumulation over rows.
    pub fn matvec_transpose(&self, d: &[f64]) -> Result<Vec<f64>> {
        if d.len() != self.rows {
            return Err(Error::ShapeMismatch(format!(
                "matvec_transpose: matrix has {} rows, input has {}",
                self.rows,
                d.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &dv) in d.iter().enumerate() {
            let row = self.row(r);
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * dv;
            }
        }
        Ok(out)
    }
}

/// Full-precision model state: an ordered list of weight matrices plus the
/// full-precision bitwidth `V`. Weights keep full precision after every
/// update; quantized copies are derived views.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Matrix>,
    pub v: u32,
}

/// Quantized model snapshot at bitwidth `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub layers: Vec<Matrix>,
    pub alpha: u32,
    pub v: u32,
}

/// Per-layer outputs of one forward pass. `layers[0]` is the input vector,
/// `layers[k]` the activated output of weight layer `k`; the last entry is
/// the network output in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct Activations {
    pub layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("forward produces at least the input layer")
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len() - 1
    }
}

impl ModelParams {
    /// Neuron widths `[input, hidden.., output]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].cols()];
        dims.extend(self.layers.iter().map(Matrix::rows));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.rows() * l.cols()).sum()
    }

    /// Seeded init, uniform in `±1/sqrt(fan_in)` per layer.
    pub fn init_uniform(dims: &[usize], v: u32, rng: &mut SeededRng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "a model needs at least one weight layer".into(),
            ));
        }
        if v < 2 {
            return Err(Error::InvalidArgument(format!(
                "full-precision bitwidth must be >= 2, got {v}"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut m = Matrix::zeros(fan_out, fan_in);
            for v in m.as_mut_slice() {
                *v = rng.gen_range(-bound..=bound);
            }
            layers.push(m);
        }
        Ok(Self { layers, v })
    }

    /// Quantize every layer to `alpha` bits (the device- and server-side
    /// quantizer; `alpha = V` is a bit-exact passthrough).
    pub fn quantize(&self, alpha: u32) -> Result<QuantizedModel> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let data = quantize_slice(layer.as_slice(), alpha, self.v)?;
            layers.push(Matrix::from_vec(layer.rows(), layer.cols(), data)?);
        }
        Ok(QuantizedModel { layers, alpha, v: self.v })
    }

    pub fn check_finite(&self) -> Result<()> {
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("model layer {k}")));
            }
        }
        Ok(())
    }
}

/// The rounding function used by the mid-range quantizer: round to the
/// nearer integer, with midpoint ties going down (`R(0.5) = 0`,
/// `R(-1.5) = -2`).
pub fn rounding(x: f64) -> f64 {
    let fl = x.floor();
    let ce = x.ceil();
    if x <= (fl + ce) / 2.0 {
        fl
    } else {
        ce
    }
}

/// Hard tanh, `max(-1, min(1, x))`.
pub fn htanh(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Straight-through surrogate for the quantizer derivative: 1 on the
/// closed interval `|x| <= 1`, 0 outside. The boundary must pass
/// gradients: aggregated sign-quantized models put many weights at
/// exactly ±1, and gating them would freeze training permanently after
/// any one-bit round.
pub fn htanh_deriv(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Number of representable steps per unit at bitwidth `alpha`, `2^alpha - 1`.
pub fn grid_scale(alpha: u32) -> f64 {
    debug_assert!(alpha >= 1 && alpha < 64);
    ((1u64 << alpha) - 1) as f64
}

/// Quantize one value to `alpha` bits out of `V`.
///
/// `alpha = 1` maps to `sign(w)` with `sign(0) = +1`; `1 < alpha < V` maps
/// the value (clamped to `[-1, 1]`) onto the uniform grid
/// `k / (2^alpha - 1)`; `alpha = V` returns the value unchanged.
pub fn quantize_value(w: f64, alpha: u32, v: u32) -> Result<f64> {
    if alpha < 1 || alpha > v {
        return Err(Error::InvalidBitwidth { alpha, v });
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("quantizer input".into()));
    }
    if alpha == v {
        return Ok(w);
    }
    let w = w.clamp(-1.0, 1.0);
    if alpha == 1 {
        Ok(if w >= 0.0 { 1.0 } else { -1.0 })
    } else {
        if alpha >= 64 {
            return Err(Error::InvalidBitwidth { alpha, v });
        }
        let scale = grid_scale(alpha);
        Ok(rounding(scale * w) / scale)
    }
}

/// Elementwise [`quantize_value`] over a slice.
pub fn quantize_slice(w: &[f64], alpha: u32, v: u32) -> Result<Vec<f64>> {
    w.iter().map(|&x| quantize_value(x, alpha, v)).collect()
}

/// Standard cross-entropy summed over output units:
/// `-Σ_o [y_o ln h_o + (1 - y_o) ln(1 - h_o)]`. Outputs are clipped to
/// `[EPS_CLIP, 1 - EPS_CLIP]` before the logs.
pub fn cross_entropy(h: &[f64], y: &[f64]) -> Result<f64> {
    if h.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "cross_entropy: output has {} entries, label has {}",
            h.len(),
            y.len()
        )));
    }
    let mut loss = 0.0;
    for (&hv, &yv) in h.iter().zip(y) {
        let hv = hv.clamp(EPS_CLIP, 1.0 - EPS_CLIP);
        loss -= yv * hv.ln() + (1.0 - yv) * (1.0 - hv).ln();
    }
    Ok(loss)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-layer inner-product machinery for one quantized model, built once
/// and reused across samples. The quantized real-valued layers are kept
/// alongside the packed bit planes because backpropagation runs on the
/// real values.
pub struct PackedModel {
    pub quant: QuantizedModel,
    kind: PackedKind,
}

enum PackedKind {
    /// `alpha = V`: plain real arithmetic.
    Real,
    /// `alpha = 1`: packed sign vectors per weight row.
    Binary(Vec<Vec<PackedSigns>>),
    /// `1 < alpha < V`: packed bit planes per weight row.
    Planes(Vec<Vec<PackedPlanes>>),
}

impl QuantizedModel {
    pub fn packed(&self) -> Result<PackedModel> {
        let kind = if self.alpha == self.v {
            PackedKind::Real
        } else if self.alpha == 1 {
            let mut layers = Vec::with_capacity(self.layers.len());
            for layer in &self.layers {
                let rows = (0..layer.rows())
                    .map(|r| PackedSigns::pack(layer.row(r)))
                    .collect::<Result<Vec<_>>>()?;
                layers.push(rows);
            }
            PackedKind::Binary(layers)
        } else {
            let mut layers = Vec::with_capacity(self.layers.len());
            for layer in &self.layers {
                let rows = (0..layer.rows())
                    .map(|r| PackedPlanes::pack(layer.row(r), self.alpha))
                    .collect::<Result<Vec<_>>>()?;
                layers.push(rows);
            }
            PackedKind::Planes(layers)
        };
        Ok(PackedModel { quant: self.clone(), kind })
    }
}

/// Intermediate state of one forward pass kept for backpropagation.
pub struct ForwardTrace {
    /// Quantized input fed to each weight layer.
    pub quant_inputs: Vec<Vec<f64>>,
    /// Pre-activation `z` of each weight layer.
    pub preacts: Vec<Vec<f64>>,
    pub activations: Activations,
}

impl PackedModel {
    pub fn alpha(&self) -> u32 {
        self.quant.alpha
    }

    fn layer_output(&self, k: usize, input_q: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            PackedKind::Real => self.quant.layers[k].matvec(input_q),
            PackedKind::Binary(layers) => {
                let packed_in = PackedSigns::pack(input_q)?;
                layers[k].iter().map(|row| row.dot(&packed_in)).collect()
            }
            PackedKind::Planes(layers) => {
                let packed_in = PackedPlanes::pack(input_q, self.quant.alpha)?;
                layers[k].iter().map(|row| row.dot(&packed_in)).collect()
            }
        }
    }

    /// Forward pass recording everything backprop needs.
    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        let k_layers = self.quant.layers.len();
        if x.len() != self.quant.layers[0].cols() {
            return Err(Error::ShapeMismatch(format!(
                "forward: layer 1 expects {} inputs, got {}",
                self.quant.layers[0].cols(),
                x.len()
            )));
        }
        let alpha = self.quant.alpha;
        let v = self.quant.v;
        let mut acts = Vec::with_capacity(k_layers + 1);
        acts.push(x.to_vec());
        let mut quant_inputs = Vec::with_capacity(k_layers);
        let mut preacts = Vec::with_capacity(k_layers);
        let mut h = x.to_vec();
        for k in 0..k_layers {
            let input_q = if alpha == v { h.clone() } else { quantize_slice(&h, alpha, v)? };
            let z = self.layer_output(k, &input_q)?;
            let out: Vec<f64> = if k + 1 == k_layers {
                z.iter().map(|&zv| sigmoid(zv)).collect()
            } else {
                z.iter().map(|&zv| htanh(zv)).collect()
            };
            quant_inputs.push(input_q);
            preacts.push(z);
            acts.push(out.clone());
            h = out;
        }
        Ok(ForwardTrace { quant_inputs, preacts, activations: Activations { layers: acts } })
    }
}

/// Forward pass at the model's bitwidth: hidden layers use hard tanh, the
/// output layer a logistic map into `(0, 1)`. Activations are quantized to
/// the model bitwidth before each product (a passthrough at `alpha = V`).
pub fn forward(model: &QuantizedModel, x: &[f64]) -> Result<Activations> {
    Ok(model.packed()?.forward_trace(x)?.activations)
}

/// Sum of per-sample weight gradients of the cross-entropy loss, taken
/// through the quantized forward pass. Returns one gradient matrix per
/// layer plus the summed loss.
pub fn batch_gradient(
    packed: &PackedModel,
    batch: &[(&[f64], &[f64])],
) -> Result<(Vec<Matrix>, f64)> {
    let mut grads: Vec<Matrix> = packed
        .quant
        .layers
        .iter()
        .map(|l| Matrix::zeros(l.rows(), l.cols()))
        .collect();
    let mut loss_sum = 0.0;
    let k_layers = packed.quant.layers.len();
    for &(x, y) in batch {
        let trace = packed.forward_trace(x)?;
        loss_sum += cross_entropy(trace.activations.output(), y)?;
        // Output layer: sigmoid + cross-entropy gives delta = h - y.
        let h_out = trace.activations.output();
        if h_out.len() != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "label has {} entries, output layer has {}",
                y.len(),
                h_out.len()
            )));
        }
        let mut delta: Vec<f64> = h_out.iter().zip(y).map(|(&h, &yv)| h - yv).collect();
        for k in (0..k_layers).rev() {
            {
                let grad = &mut grads[k];
                let input_q = &trace.quant_inputs[k];
                for (r, &d) in delta.iter().enumerate() {
                    let row = grad.row_mut(r);
                    for (g, &a) in row.iter_mut().zip(input_q) {
                        *g += d * a;
                    }
                }
            }
            if k > 0 {
                // Backprop through the quantized weights; the activation
                // quantizer passes gradients straight through, hard tanh
                // gates on its own pre-activation.
                let back = packed.quant.layers[k].matvec_transpose(&delta)?;
                delta = back
                    .iter()
                    .zip(&trace.preacts[k - 1])
                    .map(|(&b, &z)| b * htanh_deriv(z))
                    .collect();
            }
        }
    }
    Ok((grads, loss_sum))
}

/// One local update step: `w_next = g_hat - lambda * Σ_batch ∂f/∂g`, where
/// the gradient runs through the quantized forward pass and the weight
/// quantizer derivative is the hard-tanh derivative at the full-precision
/// weights `w` (exactly 1 when `alpha = V`). The result is full precision.
pub fn backward_update(
    w: &ModelParams,
    g_hat: &QuantizedModel,
    batch: &[(&[f64], &[f64])],
    lambda: f64,
) -> Result<ModelParams> {
    let packed = g_hat.packed()?;
    backward_update_packed(w, &packed, batch, lambda)
}

/// [`backward_update`] against a pre-packed quantized model (the round
/// engine packs the broadcast once and reuses it for every device).
pub fn backward_update_packed(
    w: &ModelParams,
    packed: &PackedModel,
    batch: &[(&[f64], &[f64])],
    lambda: f64,
) -> Result<ModelParams> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let (grads, _) = batch_gradient(packed, batch)?;
    apply_update(w, &packed.quant, &grads, lambda)
}

/// Apply the straight-through update to a summed gradient:
/// `w_next = g_hat - lambda * mask(w) * grad`, with `mask = Htanh'` below
/// full precision and exactly 1 at `alpha = V`. Below full precision the
/// updated weights are clamped back to `[-1, 1]`, the quantizer's domain;
/// without the clamp one large step through a saturated model pushes
/// weights past ±1 where the mask silences them for good. The `alpha = V`
/// path is plain SGD with no clamp.
pub fn apply_update(
    w: &ModelParams,
    g_hat: &QuantizedModel,
    grads: &[Matrix],
    lambda: f64,
) -> Result<ModelParams> {
    if lambda <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lambda}"
        )));
    }
    if w.layers.len() != g_hat.layers.len() || grads.len() != g_hat.layers.len() {
        return Err(Error::ShapeMismatch(
            "model, quantized model, and gradient must have matching layer counts".into(),
        ));
    }
    let full_precision = g_hat.alpha == g_hat.v;
    let mut layers = Vec::with_capacity(w.layers.len());
    for (k, grad) in grads.iter().enumerate() {
        let ghat_l = &g_hat.layers[k];
        let w_l = &w.layers[k];
        let mut out = Matrix::zeros(ghat_l.rows(), ghat_l.cols());
        for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
            let g = grad.as_slice()[i];
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { layer: k });
            }
            let mask = if full_precision { 1.0 } else { htanh_deriv(w_l.as_slice()[i]) };
            let updated = ghat_l.as_slice()[i] - lambda * mask * g;
            *o = if full_precision { updated } else { updated.clamp(-1.0, 1.0) };
        }
        layers.push(out);
    }
    Ok(ModelParams { layers, v: w.v })
}

/// Mean cross-entropy of the model over `(x, y)` pairs through its
/// quantized forward pass.
pub fn mean_loss(packed: &PackedModel, samples: &[(&[f64], &[f64])]) -> Result<f64> {
    let mut sum = 0.0;
    for &(x, y) in samples {
        let trace = packed.forward_trace(x)?;
        sum += cross_entropy(trace.activations.output(), y)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Mean weight gradient over a sample set, flattened in layer order.
pub fn mean_gradient_flat(packed: &PackedModel, samples: &[(&[f64], &[f64])]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty sample set".into()));
    }
    let (grads, _) = batch_gradient(packed, samples)?;
    let inv = 1.0 / samples.len() as f64;
    let mut out = Vec::with_capacity(grads.iter().map(|g| g.as_slice().len()).sum());
    for g in &grads {
        out.extend(g.as_slice().iter().map(|v| v * inv));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamKind};
    use rand::Rng;

    fn rng(seed: u64) -> SeededRng {
        stream(seed, StreamKind::ModelInit, 0)
    }

    #[test]
    fn rounding_matches_stated_cases() {
        assert_eq!(rounding(0.5), 0.0);
        assert_eq!(rounding(0.9), 1.0);
        assert_eq!(rounding(-1.5), -2.0);
        assert_eq!(rounding(2.0), 2.0);
        assert_eq!(rounding(-0.5), -1.0);
        assert_eq!(rounding(1.5), 1.0);
    }

    #[test]
    fn htanh_clamps() {
        assert_eq!(htanh(2.0), 1.0);
        assert_eq!(htanh(-0.5), -0.5);
        assert_eq!(htanh(0.0), 0.0);
        assert_eq!(htanh_deriv(0.999), 1.0);
        assert_eq!(htanh_deriv(1.0), 1.0);
        assert_eq!(htanh_deriv(-1.0), 1.0);
        assert_eq!(htanh_deriv(-1.2), 0.0);
    }

    #[test]
    fn quantize_sign_case() {
        assert_eq!(quantize_value(0.3, 1, 32).unwrap(), 1.0);
        assert_eq!(quantize_value(-0.2, 1, 32).unwrap(), -1.0);
        assert_eq!(quantize_value(0.0, 1, 32).unwrap(), 1.0);
    }

    #[test]
    fn quantize_full_precision_is_bit_exact() {
        for &w in &[0.3, -1.7, 42.123456789, 1e-300] {
            let q = quantize_value(w, 32, 32).unwrap();
            assert_eq!(q.to_bits(), w.to_bits());
        }
    }

    #[test]
    fn quantize_midrange_example() {
        // R(3 * 0.3) = R(0.9) = 1 since 0.9 > 0.5, so 0.3 -> 1/3.
        let q = quantize_value(0.3, 2, 32).unwrap();
        assert!((q - 1.0 / 3.0).abs() < 1e-15);
    }

    /// Exhaustive scan of the two-bit quantizer against a direct
    /// transcription of the piecewise definition.
    #[test]
    fn quantize_matches_direct_transcription_on_grid_scan() {
        for alpha in 2..=8u32 {
            let scale = ((1u64 << alpha) - 1) as f64;
            let mut w = -1.0;
            while w <= 1.0 + 1e-12 {
                let got = quantize_value(w, alpha, 32).unwrap();
                let x = scale * w.clamp(-1.0, 1.0);
                let expected = {
                    let (fl, ce) = (x.floor(), x.ceil());
                    (if x <= (fl + ce) / 2.0 { fl } else { ce }) / scale
                };
                assert_eq!(got, expected, "alpha={alpha} w={w}");
                w += 0.01;
            }
        }
    }

    #[test]
    fn quantize_rejects_invalid_bitwidth_and_nonfinite() {
        assert!(matches!(
            quantize_value(0.1, 0, 32),
            Err(Error::InvalidBitwidth { .. })
        ));
        assert!(matches!(
            quantize_value(0.1, 33, 32),
            Err(Error::InvalidBitwidth { .. })
        ));
        assert!(quantize_value(f64::NAN, 2, 32).is_err());
    }

    #[test]
    fn quantization_error_bound_and_idempotence() {
        let mut r = rng(11);
        for alpha in 2..=8u32 {
            let bound = 1.0 / (2.0 * grid_scale(alpha)) + 1e-12;
            for _ in 0..2000 {
                let w: f64 = r.gen_range(-1.0..=1.0);
                let q = quantize_value(w, alpha, 32).unwrap();
                assert!((q - w).abs() <= bound, "alpha={alpha} w={w} q={q}");
                let qq = quantize_value(q, alpha, 32).unwrap();
                assert_eq!(q.to_bits(), qq.to_bits(), "idempotence at alpha={alpha}");
            }
        }
    }

    #[test]
    fn quantization_error_is_monotone_in_alpha_on_random_vectors() {
        let mut r = rng(12);
        for _ in 0..20 {
            let w: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..=1.0)).collect();
            let mut prev = f64::INFINITY;
            for alpha in 2..=10u32 {
                let q = quantize_slice(&w, alpha, 32).unwrap();
                let max_err = q
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(
                    max_err <= prev + 1e-12,
                    "max error grew from {prev} to {max_err} at alpha={alpha}"
                );
                prev = max_err;
            }
        }
    }

    #[test]
    fn cross_entropy_matches_closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        assert!((cross_entropy(&[0.5], &[1.0]).unwrap() - ln2).abs() < 1e-12);
        assert!((cross_entropy(&[0.5], &[0.0]).unwrap() - ln2).abs() < 1e-12);
        assert!(cross_entropy(&[1.0 - 1e-13], &[1.0]).unwrap() < 1e-10);
        // Out-of-range outputs are clipped, not rejected.
        assert!(cross_entropy(&[1.5], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn forward_full_precision_matches_reference() {
        // Identity-like single-layer net at alpha = V.
        let w = Matrix::from_vec(1, 2, vec![0.7, -0.3]).unwrap();
        let model = ModelParams { layers: vec![w], v: 32 };
        let q = model.quantize(32).unwrap();
        let acts = forward(&q, &[1.0, 0.0]).unwrap();
        let expected = sigmoid(0.7);
        assert_eq!(acts.output()[0], expected);
    }

    #[test]
    fn forward_alpha_v_equals_reference_bit_exactly() {
        let mut r = rng(13);
        let model = ModelParams::init_uniform(&[6, 5, 3], 32, &mut r).unwrap();
        let q = model.quantize(32).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
            let acts = forward(&q, &x).unwrap();
            // Reference: explicit real-arithmetic pass over the same weights.
            let mut h = x.clone();
            for (k, layer) in model.layers.iter().enumerate() {
                let z = layer.matvec(&h).unwrap();
                h = if k + 1 == model.layers.len() {
                    z.iter().map(|&v| sigmoid(v)).collect()
                } else {
                    z.iter().map(|&v| htanh(v)).collect()
                };
            }
            for (a, b) in acts.output().iter().zip(&h) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn forward_quantized_matches_arithmetic_reference() {
        let mut r = rng(14);
        for &alpha in &[2u32, 3, 4, 8] {
            let model = ModelParams::init_uniform(&[8, 6, 4], 32, &mut r).unwrap();
            let q = model.quantize(alpha).unwrap();
            for _ in 0..10 {
                let x: Vec<f64> = (0..8).map(|_| r.gen_range(0.0..1.0)).collect();
                let acts = forward(&q, &x).unwrap();
                // Reference materializes quantized reals and multiplies
                // arithmetically.
                let mut h = x.clone();
                for (k, layer) in q.layers.iter().enumerate() {
                    let hq = quantize_slice(&h, alpha, 32).unwrap();
                    let z = layer.matvec(&hq).unwrap();
                    h = if k + 1 == q.layers.len() {
                        z.iter().map(|&v| sigmoid(v)).collect()
                    } else {
                        z.iter().map(|&v| htanh(v)).collect()
                    };
                }
                for (a, b) in acts.output().iter().zip(&h) {
                    assert!((a - b).abs() < 1e-9, "alpha={alpha}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let mut r = rng(15);
        let model = ModelParams::init_uniform(&[4, 2], 32, &mut r).unwrap();
        let q = model.quantize(32).unwrap();
        assert!(matches!(forward(&q, &[0.1; 3]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn backward_zero_gradient_returns_ghat() {
        // With y equal to the sigmoid output the output delta vanishes.
        let w = Matrix::from_vec(1, 1, vec![0.4]).unwrap();
        let model = ModelParams { layers: vec![w], v: 32 };
        let ghat = model.quantize(32).unwrap();
        let x = [0.5f64];
        let acts = forward(&ghat, &x).unwrap();
        let y = [acts.output()[0]];
        let batch: Vec<(&[f64], &[f64])> = vec![(&x, &y)];
        let next = backward_update(&model, &ghat, &batch, 0.1).unwrap();
        assert_eq!(next.layers[0].get(0, 0), ghat.layers[0].get(0, 0));
    }

    #[test]
    fn backward_alpha_v_matches_reference_sgd_step() {
        let mut r = rng(16);
        let model = ModelParams::init_uniform(&[3, 2], 32, &mut r).unwrap();
        let ghat = model.quantize(32).unwrap();
        let x = [0.2, 0.8, 0.5];
        let y = [1.0, 0.0];
        let lambda = 0.05;
        let batch: Vec<(&[f64], &[f64])> = vec![(&x, &y)];
        let next = backward_update(&model, &ghat, &batch, lambda).unwrap();

        // Reference: single-layer logistic gradient dL/dW = (h - y) x^T.
        let z = model.layers[0].matvec(&x).unwrap();
        let h: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        for i in 0..2 {
            for j in 0..3 {
                let expected = model.layers[0].get(i, j) - lambda * (h[i] - y[i]) * x[j];
                assert!((next.layers[0].get(i, j) - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_matches_central_finite_differences_full_precision() {
        let mut r = rng(17);
        let model = ModelParams::init_uniform(&[4, 3, 2], 32, &mut r).unwrap();
        let x: Vec<f64> = (0..4).map(|_| r.gen_range(0.0..1.0)).collect();
        let y = [1.0, 0.0];
        let packed = model.quantize(32).unwrap().packed().unwrap();
        let batch: Vec<(&[f64], &[f64])> = vec![(&x, &y)];
        let (grads, _) = batch_gradient(&packed, &batch).unwrap();

        let eps = 1e-6;
        for k in 0..model.layers.len() {
            for idx in 0..model.layers[k].as_slice().len() {
                let mut up = model.clone();
                up.layers[k].as_mut_slice()[idx] += eps;
                let mut dn = model.clone();
                dn.layers[k].as_mut_slice()[idx] -= eps;
                let lu = mean_loss(&up.quantize(32).unwrap().packed().unwrap(), &batch).unwrap();
                let ld = mean_loss(&dn.quantize(32).unwrap().packed().unwrap(), &batch).unwrap();
                let fd = (lu - ld) / (2.0 * eps);
                let an = grads[k].as_slice()[idx];
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())),
                    "layer {k} idx {idx}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn deterministic_init_under_seed() {
        let a = ModelParams::init_uniform(&[5, 4], 32, &mut rng(3)).unwrap();
        let b = ModelParams::init_uniform(&[5, 4], 32, &mut rng(3)).unwrap();
        assert_eq!(a, b);
    }
}
