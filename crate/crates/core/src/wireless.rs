//! Analytic per-iteration delay model: loss-computation delay, quantization
//! delay, OFDMA uplink transmission delay, and feasibility checks against
//! the resource-block budget and the per-iteration delay budget.

use crate::action::Action;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Per-device compute and radio descriptors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// Chip-dependent time-consumption coefficient.
    pub rho: f64,
    /// CPU frequency in Hz.
    pub cpu_hz: f64,
    /// Bits processed per CPU cycle.
    pub bits_per_cycle: f64,
    /// Distance to the server in meters.
    pub distance_m: f64,
    /// Uplink transmit power in watts.
    pub tx_power_w: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rho", self.rho),
            ("cpu_hz", self.cpu_hz),
            ("bits_per_cycle", self.bits_per_cycle),
            ("distance_m", self.distance_m),
            ("tx_power_w", self.tx_power_w),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "device profile field {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Path-loss + Rayleigh power-fading channel: `h = g0 (d/d0)^-2 X` with
/// `X ~ Exp(1)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelModel {
    /// Gain at the reference distance.
    pub ref_gain: f64,
    /// Reference distance in meters.
    pub ref_distance_m: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self { ref_gain: 1e-3, ref_distance_m: 1.0 }
    }
}

impl ChannelModel {
    /// Draw one channel gain for a device at `distance_m`.
    pub fn gain(&self, distance_m: f64, rng: &mut SeededRng) -> f64 {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let fading = -u.ln(); // Exponential(1)
        self.deterministic_gain(distance_m) * fading
    }

    /// Mean gain (the `X = 1` path-loss component).
    pub fn deterministic_gain(&self, distance_m: f64) -> f64 {
        self.ref_gain * (distance_m / self.ref_distance_m).powi(-2)
    }
}

/// One round's channel realization plus the shared radio constants.
#[derive(Debug, Clone)]
pub struct ChannelState {
    /// Channel gain per device for this iteration (linear scale).
    pub gains: Vec<f64>,
    /// Resource-block bandwidth in Hz.
    pub bandwidth_hz: f64,
    /// Noise variance in watts.
    pub noise_w: f64,
}

/// Network-wide constants of the round delay model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Resource-block budget: at most this many devices upload per round.
    pub max_selected: usize,
    /// Per-iteration delay budget in seconds.
    pub delay_budget_s: f64,
    /// Parameter count determining the transmission size.
    pub tx_size_params: u64,
    /// Multiplication-operation count of one loss computation.
    pub mult_ops: u64,
    /// Full-precision bitwidth; actions must use `alpha` in `[1, V]`.
    pub full_bitwidth: u32,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_selected < 1 {
            return Err(Error::InvalidArgument("max_selected must be >= 1".into()));
        }
        if !(self.delay_budget_s.is_finite() && self.delay_budget_s > 0.0) {
            return Err(Error::InvalidArgument("delay budget must be positive".into()));
        }
        if self.tx_size_params < 1 || self.mult_ops < 1 {
            return Err(Error::InvalidArgument(
                "transmission size and multiplication count must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Convert dBm to watts (`-174 dBm -> 10^(-17.4 - 3) W`).
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0 - 3.0)
}

/// Uplink channel capacity in bits/s: `u * W * log2(1 + P h / sigma^2)`.
pub fn capacity(selected: bool, gain: f64, bandwidth_hz: f64, tx_power_w: f64, noise_w: f64) -> f64 {
    if !selected {
        return 0.0;
    }
    bandwidth_hz * (1.0 + tx_power_w * gain / noise_w).log2()
}

/// Loss-computation delay `rho * alpha^2 * N_C / (theta * f)`.
pub fn delay_compute(alpha: u32, profile: &DeviceProfile, mult_ops: u64) -> Result<f64> {
    if alpha < 1 {
        return Err(Error::InvalidBitwidth { alpha, v: u32::MAX });
    }
    let a = alpha as f64;
    Ok(profile.rho * a * a * mult_ops as f64 / (profile.bits_per_cycle * profile.cpu_hz))
}

/// Quantization delay: zero at `alpha = 1` and `alpha = V`, otherwise
/// `D / (theta * f)`.
pub fn delay_quantize(alpha: u32, v: u32, tx_size_params: u64, profile: &DeviceProfile) -> Result<f64> {
    if alpha < 1 || alpha > v {
        return Err(Error::InvalidBitwidth { alpha, v });
    }
    if alpha == 1 || alpha == v {
        Ok(0.0)
    } else {
        Ok(tx_size_params as f64 / (profile.bits_per_cycle * profile.cpu_hz))
    }
}

/// Uplink transmission delay `D * alpha / c` for a selected device.
pub fn delay_transmit(selected: bool, alpha: u32, tx_size_params: u64, capacity_bps: f64) -> Result<f64> {
    if !selected {
        return Ok(0.0);
    }
    if capacity_bps <= 0.0 {
        return Err(Error::InfeasibleLink { device: usize::MAX });
    }
    Ok(tx_size_params as f64 * alpha as f64 / capacity_bps)
}

/// Total round delay of one selected device.
pub fn device_delay(
    device: usize,
    alpha: u32,
    profile: &DeviceProfile,
    channel: &ChannelState,
    cfg: &NetworkConfig,
) -> Result<f64> {
    let c = capacity(true, channel.gains[device], channel.bandwidth_hz, profile.tx_power_w, channel.noise_w);
    if c <= 0.0 {
        return Err(Error::InfeasibleLink { device });
    }
    let l_c = delay_compute(alpha, profile, cfg.mult_ops)?;
    let l_q = delay_quantize(alpha, cfg.full_bitwidth, cfg.tx_size_params, profile)?;
    let l_t = delay_transmit(true, alpha, cfg.tx_size_params, c)?;
    Ok(l_c + l_q + l_t)
}

/// Round delay: max over the selected devices of compute + quantization +
/// transmission delay; zero when nothing is selected.
pub fn iteration_delay(
    action: &Action,
    profiles: &[DeviceProfile],
    channel: &ChannelState,
    cfg: &NetworkConfig,
) -> Result<f64> {
    if action.selected.len() != profiles.len() {
        return Err(Error::ShapeMismatch(format!(
            "action covers {} devices, network has {}",
            action.selected.len(),
            profiles.len()
        )));
    }
    let mut worst = 0.0f64;
    for (m, &sel) in action.selected.iter().enumerate() {
        if !sel {
            continue;
        }
        let d = device_delay(m, action.alpha, &profiles[m], channel, cfg)?;
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Which constraint an action violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintTag {
    RbBudget,
    Bitwidth,
    Delay,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Feasibility {
    Feasible,
    Infeasible(ConstraintTag),
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible)
    }
}

/// Check an action against the RB budget, the bitwidth range, and the
/// delay budget (all boundaries inclusive).
pub fn feasible(
    action: &Action,
    profiles: &[DeviceProfile],
    channel: &ChannelState,
    cfg: &NetworkConfig,
) -> Result<Feasibility> {
    if action.num_selected() > cfg.max_selected {
        return Ok(Feasibility::Infeasible(ConstraintTag::RbBudget));
    }
    if action.alpha < 1 || action.alpha > cfg.full_bitwidth {
        return Ok(Feasibility::Infeasible(ConstraintTag::Bitwidth));
    }
    match iteration_delay(action, profiles, channel, cfg) {
        Ok(d) if d <= cfg.delay_budget_s => Ok(Feasibility::Feasible),
        Ok(_) => Ok(Feasibility::Infeasible(ConstraintTag::Delay)),
        Err(Error::InfeasibleLink { .. }) => Ok(Feasibility::Infeasible(ConstraintTag::Delay)),
        Err(e) => Err(e),
    }
}

/// Repair a sampled action into a feasible one, preferring to preserve
/// participation: first clamp the selection to the RB budget and the
/// bitwidth into range, then drop the selected device with the largest
/// individual delay while the delay budget is violated, and only once a
/// single device remains lower the bitwidth (stepping down through
/// `allowed_alphas` when given, else by one). If the last device is still
/// infeasible at `alpha = 1`, every other device is tried at `alpha = 1`
/// before declaring the environment infeasible.
pub fn repair_action(
    action: &Action,
    profiles: &[DeviceProfile],
    channel: &ChannelState,
    cfg: &NetworkConfig,
    allowed_alphas: Option<&[u32]>,
) -> Result<Action> {
    let mut act = action.clone();
    act.alpha = act.alpha.clamp(1, cfg.full_bitwidth);

    // RB budget: keep the devices with the smallest individual delay.
    if act.num_selected() > cfg.max_selected {
        let mut delays: Vec<(usize, f64)> = act
            .selected_indices()
            .into_iter()
            .map(|m| {
                let d = device_delay(m, act.alpha, &profiles[m], channel, cfg)
                    .unwrap_or(f64::INFINITY);
                (m, d)
            })
            .collect();
        delays.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        act.selected = vec![false; act.selected.len()];
        for &(m, _) in delays.iter().take(cfg.max_selected) {
            act.selected[m] = true;
        }
    }

    let lower_alpha = |alpha: u32| -> Option<u32> {
        match allowed_alphas {
            Some(set) => set.iter().copied().filter(|&a| a < alpha).max(),
            None => (alpha > 1).then(|| alpha - 1),
        }
    };

    loop {
        if feasible(&act, profiles, channel, cfg)?.is_feasible() {
            return Ok(act);
        }
        if act.num_selected() > 1 {
            // Drop the selected device with the largest individual delay.
            let worst = act
                .selected_indices()
                .into_iter()
                .map(|m| {
                    let d = device_delay(m, act.alpha, &profiles[m], channel, cfg)
                        .unwrap_or(f64::INFINITY);
                    (m, d)
                })
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(m, _)| m)
                .expect("at least two devices selected");
            act.selected[worst] = false;
        } else if let Some(next) = lower_alpha(act.alpha) {
            act.alpha = next;
        } else {
            // Last resort: the cheapest single device at the lowest
            // bitwidth the caller allows.
            let floor_alpha = allowed_alphas
                .and_then(|set| set.iter().copied().min())
                .unwrap_or(1);
            let best = (0..profiles.len())
                .map(|m| {
                    let d = device_delay(m, floor_alpha, &profiles[m], channel, cfg)
                        .unwrap_or(f64::INFINITY);
                    (m, d)
                })
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
                .expect("at least one device");
            if best.1 <= cfg.delay_budget_s {
                let mut selected = vec![false; profiles.len()];
                selected[best.0] = true;
                return Ok(Action::new(selected, floor_alpha));
            }
            return Err(Error::EnvironmentInfeasible);
        }
    }
}
