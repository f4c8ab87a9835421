//! The `selftest` verb: a quick pass over the core invariants, printing
//! one line per check.

use crate::{CliError, Result};
use bitfed_core::bound::{bound_step, BoundParams, StepFeatures};
use bitfed_core::qnn::{bitplane_inner_product, grid_scale, quantize_slice, quantize_value};
use bitfed_core::rl::{discretize_state, StateSpace};
use bitfed_core::rng::{stream, StreamKind};
use bitfed_core::wireless::{delay_compute, delay_quantize, DeviceProfile};
use rand::Rng;

struct Check {
    name: &'static str,
    run: fn() -> std::result::Result<(), String>,
}

fn quantizer_error_bound() -> std::result::Result<(), String> {
    let mut rng = stream(1, StreamKind::DataSynthesis, 50);
    for alpha in 2..=8u32 {
        let bound = 1.0 / (2.0 * grid_scale(alpha)) + 1e-12;
        for _ in 0..2000 {
            let w: f64 = rng.gen_range(-1.0..=1.0);
            let q = quantize_value(w, alpha, 32).map_err(|e| e.to_string())?;
            if (q - w).abs() > bound {
                return Err(format!("alpha={alpha}: |{q} - {w}| > {bound}"));
            }
            let qq = quantize_value(q, alpha, 32).map_err(|e| e.to_string())?;
            if qq.to_bits() != q.to_bits() {
                return Err(format!("alpha={alpha}: quantizer not idempotent at {w}"));
            }
        }
    }
    Ok(())
}

fn bitplane_equivalence() -> std::result::Result<(), String> {
    let mut rng = stream(2, StreamKind::DataSynthesis, 51);
    for &alpha in &[2u32, 4, 8] {
        for _ in 0..200 {
            let raw: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let a = quantize_slice(&raw, alpha, 32).map_err(|e| e.to_string())?;
            let raw: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let b = quantize_slice(&raw, alpha, 32).map_err(|e| e.to_string())?;
            let fast = bitplane_inner_product(&a, &b, alpha).map_err(|e| e.to_string())?;
            let direct: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            if (fast - direct).abs() > 1e-9 {
                return Err(format!("alpha={alpha}: {fast} vs {direct}"));
            }
        }
    }
    Ok(())
}

fn delay_formulas() -> std::result::Result<(), String> {
    let p = DeviceProfile {
        rho: 2.8e6,
        cpu_hz: 3.3e9,
        bits_per_cycle: 64.0,
        distance_m: 100.0,
        tx_power_w: 0.5,
    };
    let d1 = delay_compute(1, &p, 217_728).map_err(|e| e.to_string())?;
    if (d1 - 2.8866).abs() > 1e-3 {
        return Err(format!("compute delay at alpha=1: {d1}"));
    }
    let d2 = delay_compute(2, &p, 217_728).map_err(|e| e.to_string())?;
    if (d2 / d1 - 4.0).abs() > 1e-12 {
        return Err("compute delay not quadratic".into());
    }
    for (alpha, expect_zero) in [(1u32, true), (32, true), (4, false)] {
        let q = delay_quantize(alpha, 32, 217_728, &p).map_err(|e| e.to_string())?;
        if expect_zero != (q == 0.0) {
            return Err(format!("quantization delay at alpha={alpha}: {q}"));
        }
    }
    Ok(())
}

fn bound_descent_case() -> std::result::Result<(), String> {
    let params = BoundParams::convex(2.0, 1.0, 0.5, 0.25);
    let f = StepFeatures {
        grad_norm_sq: 1.3,
        selected_samples: 100.0,
        total_samples: 100.0,
        alpha: 32,
        device_count: 4,
        full_bitwidth: 32,
    };
    let got = bound_step(&f, &params).map_err(|e| e.to_string())?;
    if got != -1.3 / 4.0 {
        return Err(format!("full-participation descent term: {got}"));
    }
    Ok(())
}

fn state_bins() -> std::result::Result<(), String> {
    let s = StateSpace::new(10, 2.0).map_err(|e| e.to_string())?;
    if discretize_state(0.0, &s) != 0 || discretize_state(1.0, &s) != 5 || discretize_state(9.0, &s) != 9
    {
        return Err("state discretization off".into());
    }
    Ok(())
}

/// Run every check; returns the number passed or the first failure.
pub fn run() -> Result<usize> {
    let checks = [
        Check { name: "quantizer error bound and idempotence", run: quantizer_error_bound },
        Check { name: "bit-plane inner-product equivalence", run: bitplane_equivalence },
        Check { name: "delay model unit values", run: delay_formulas },
        Check { name: "bound descent reference case", run: bound_descent_case },
        Check { name: "state discretization", run: state_bins },
    ];
    for check in &checks {
        match (check.run)() {
            Ok(()) => println!("ok   {}", check.name),
            Err(msg) => {
                println!("FAIL {}: {msg}", check.name);
                return Err(CliError::Config(format!("selftest failed: {}", check.name)));
            }
        }
    }
    Ok(checks.len())
}
