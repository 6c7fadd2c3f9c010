//! Scalar training schedules: warmup learning rate, layer-wise
//! discriminative multipliers and the decaying auxiliary MPC weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `lrate(n) = k · d_model^exponent · min(n^-0.5, n · warmup_n^-1.5)`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    pub k: f64,
    pub warmup_n: u64,
    pub d_model: usize,
    #[serde(default = "default_exponent")]
    pub dmodel_exponent: f64,
}

fn default_exponent() -> f64 {
    0.5
}

impl WarmupConfig {
    /// Pre-training constants: k = 0.5, 5000 warmup steps.
    pub fn pretrain(d_model: usize) -> Self {
        WarmupConfig {
            k: 0.5,
            warmup_n: 5000,
            d_model,
            dmodel_exponent: 0.5,
        }
    }

    /// Fine-tuning constants: k = 1.0, 25000 warmup steps.
    pub fn finetune(d_model: usize) -> Self {
        WarmupConfig {
            k: 1.0,
            warmup_n: 25_000,
            d_model,
            dmodel_exponent: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::Config(format!("warmup k must be positive, got {}", self.k)));
        }
        if self.warmup_n == 0 {
            return Err(Error::Config("warmup_n must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn lrate(cfg: &WarmupConfig, n: u64) -> Result<f64> {
    if n < 1 {
        return Err(Error::Invalid("learning-rate step must be at least 1".into()));
    }
    let n = n as f64;
    let w = cfg.warmup_n as f64;
    let scale = cfg.k * (cfg.d_model as f64).powf(cfg.dmodel_exponent);
    Ok(scale * f64::min(n.powf(-0.5), n * w.powf(-1.5)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerwiseConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
}

fn default_lambda() -> f64 {
    0.95
}

fn default_theta() -> f64 {
    5.5
}

impl Default for LayerwiseConfig {
    fn default() -> Self {
        LayerwiseConfig {
            lambda: default_lambda(),
            theta: default_theta(),
        }
    }
}

impl LayerwiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!(
                "layer-wise lambda must lie in (0, 1), got {}",
                self.lambda
            )));
        }
        if !self.theta.is_finite() {
            return Err(Error::Config("layer-wise theta must be finite".into()));
        }
        Ok(())
    }
}

/// `λ^|l − θ|` for encoder layer `l` (1-based) of an `num_layers`-layer
/// encoder.
pub fn layer_multiplier(cfg: &LayerwiseConfig, l: usize, num_layers: usize) -> Result<f64> {
    if l < 1 || l > num_layers {
        return Err(Error::Invalid(format!(
            "encoder layer {l} outside 1..={num_layers}"
        )));
    }
    Ok(cfg.lambda.powf((l as f64 - cfg.theta).abs()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcWeightSchedule {
    #[serde(default = "default_gamma0")]
    pub gamma0: f64,
    #[serde(default = "default_halve_every")]
    pub halve_every: u32,
}

fn default_gamma0() -> f64 {
    0.2
}

fn default_halve_every() -> u32 {
    5
}

impl Default for MpcWeightSchedule {
    fn default() -> Self {
        MpcWeightSchedule {
            gamma0: default_gamma0(),
            halve_every: default_halve_every(),
        }
    }
}

impl MpcWeightSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 >= 0.0) || !self.gamma0.is_finite() {
            return Err(Error::Config(format!("gamma0 must be >= 0, got {}", self.gamma0)));
        }
        if self.halve_every == 0 {
            return Err(Error::Config("halve_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// `γ₀ · 2^-floor(epoch / halve_every)`
pub fn gamma_mpc(sched: &MpcWeightSchedule, epoch: u32) -> f64 {
    let halvings = (epoch / sched.halve_every.max(1)).min(1074);
    sched.gamma0 * 0.5f64.powi(halvings as i32)
}
