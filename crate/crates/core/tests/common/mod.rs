//! Shared test support: an independently written full-precision
//! federated-averaging reference used by the equivalence oracle and the
//! acceptance suite.

#![allow(dead_code)]

use bitfed_core::datasets::Dataset;
use bitfed_core::federation::REDUCE_CHUNK;
use bitfed_core::qnn::EPS_CLIP;

/// Plain nested-vector network: layers[k][row][col].
#[derive(Clone)]
pub struct RefNet {
    pub layers: Vec<Vec<Vec<f64>>>,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn htanh(z: f64) -> f64 {
    z.clamp(-1.0, 1.0)
}

impl RefNet {
    pub fn forward(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut acts = vec![x.to_vec()];
        let mut preacts = Vec::new();
        let mut h = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.len());
            for row in layer {
                let mut acc = 0.0;
                for (w, v) in row.iter().zip(&h) {
                    acc += w * v;
                }
                z.push(acc);
            }
            let out: Vec<f64> = if k + 1 == self.layers.len() {
                z.iter().map(|&v| sigmoid(v)).collect()
            } else {
                z.iter().map(|&v| htanh(v)).collect()
            };
            preacts.push(z);
            acts.push(out.clone());
            h = out;
        }
        (acts, preacts)
    }

    pub fn sample_loss(&self, x: &[f64], y: &[f64]) -> f64 {
        let (acts, _) = self.forward(x);
        let out = acts.last().unwrap();
        let mut loss = 0.0;
        for (&h, &yv) in out.iter().zip(y) {
            let h = h.clamp(EPS_CLIP, 1.0 - EPS_CLIP);
            loss -= yv * h.ln() + (1.0 - yv) * (1.0 - h).ln();
        }
        loss
    }

    /// Accumulate this sample's gradient into `grads`.
    pub fn accumulate_gradient(&self, x: &[f64], y: &[f64], grads: &mut [Vec<Vec<f64>>]) {
        let (acts, preacts) = self.forward(x);
        let out = acts.last().unwrap();
        let mut delta: Vec<f64> = out.iter().zip(y).map(|(&h, &yv)| h - yv).collect();
        for k in (0..self.layers.len()).rev() {
            let input = &acts[k];
            for (r, &d) in delta.iter().enumerate() {
                for (g, &a) in grads[k][r].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if k > 0 {
                let mut back = vec![0.0; self.layers[k][0].len()];
                for (r, &d) in delta.iter().enumerate() {
                    for (b, &w) in back.iter_mut().zip(&self.layers[k][r]) {
                        *b += w * d;
                    }
                }
                delta = back
                    .iter()
                    .zip(&preacts[k - 1])
                    .map(|(&b, &z)| if z.abs() < 1.0 { b } else { 0.0 })
                    .collect();
            }
        }
    }

    pub fn zero_grads(&self) -> Vec<Vec<Vec<f64>>> {
        self.layers
            .iter()
            .map(|l| l.iter().map(|r| vec![0.0; r.len()]).collect())
            .collect()
    }
}

/// Mean loss over the dataset with the engine's chunked reduction.
pub fn ref_global_loss(net: &RefNet, ds: &Dataset, one_hots: &[Vec<f64>]) -> f64 {
    let mut chunk_sums = Vec::new();
    let mut n = 0;
    while n < ds.len() {
        let hi = (n + REDUCE_CHUNK).min(ds.len());
        let mut sum = 0.0;
        for i in n..hi {
            sum += net.sample_loss(&ds.inputs[i], &one_hots[i]);
        }
        chunk_sums.push(sum);
        n = hi;
    }
    chunk_sums.iter().sum::<f64>() / ds.len() as f64
}

/// One unquantized federated-averaging round: every selected device takes
/// a full-batch gradient step from the shared global model, and the
/// aggregate is the sample-count-weighted mean of the updated models.
pub fn ref_round(
    global: &RefNet,
    ds: &Dataset,
    one_hots: &[Vec<f64>],
    device_samples: &[Vec<usize>],
    selected: &[bool],
    lambda: f64,
) -> RefNet {
    let mut updated: Vec<Option<RefNet>> = vec![None; selected.len()];
    for (m, &sel) in selected.iter().enumerate() {
        if !sel {
            continue;
        }
        let mut grads = global.zero_grads();
        for &n in &device_samples[m] {
            global.accumulate_gradient(&ds.inputs[n], &one_hots[n], &mut grads);
        }
        let mut w = global.clone();
        for (k, layer) in w.layers.iter_mut().enumerate() {
            for (r, row) in layer.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v -= lambda * grads[k][r][c];
                }
            }
        }
        updated[m] = Some(w);
    }
    let total: f64 = selected
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(m, _)| device_samples[m].len() as f64)
        .sum();
    let mut agg = global.clone();
    for layer in &mut agg.layers {
        for row in layer {
            for v in row {
                *v = 0.0;
            }
        }
    }
    for (m, &sel) in selected.iter().enumerate() {
        if !sel {
            continue;
        }
        let weight = device_samples[m].len() as f64 / total;
        let w = updated[m].as_ref().unwrap();
        for (k, layer) in agg.layers.iter_mut().enumerate() {
            for (r, row) in layer.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v += weight * w.layers[k][r][c];
                }
            }
        }
    }
    agg
}

pub fn net_from_model(model: &bitfed_core::qnn::ModelParams) -> RefNet {
    RefNet {
        layers: model
            .layers
            .iter()
            .map(|l| (0..l.rows()).map(|r| l.row(r).to_vec()).collect())
            .collect(),
    }
}

