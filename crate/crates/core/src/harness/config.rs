use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory_model::PrecisionMap;
use crate::moe_router::PostMask;
use crate::quantizer::{Rounding, DEFAULT_BITS, MAX_BITS};
use crate::requant::{DriftModel, RequantSchedule};
use crate::side_network::{AdamWConfig, BackboneShape, LossWeights, SideConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub seq_len: usize,
    pub dim: usize,
    pub classes: usize,
    pub clusters: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Distance of cluster centers from the origin.
    pub center_scale: f64,
    pub token_noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seq_len: 4,
            dim: 16,
            classes: 2,
            clusters: 6,
            train_size: 1024,
            val_size: 256,
            test_size: 256,
            center_scale: 4.0,
            token_noise: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub ffn_dim: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            ffn_dim: 16,
            pretrain_epochs: 3,
            pretrain_lr: 3e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    /// Quantize the frozen backbone and re-quantize it on schedule.
    pub enabled: bool,
    pub bits: u8,
    pub rounding: Rounding,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            bits: DEFAULT_BITS,
            rounding: Rounding::Floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RequantConfig {
    /// Fraction of frozen elements sampled per event; 0 disables events.
    pub fraction: f64,
    pub interval: usize,
    pub drift_fraction: f64,
    pub drift_mean_steps: f64,
    pub drift_sigma_steps: f64,
}

impl Default for RequantConfig {
    fn default() -> Self {
        let d = DriftModel::default();
        Self {
            fraction: crate::requant::DEFAULT_FRACTION,
            interval: crate::requant::DEFAULT_INTERVAL,
            drift_fraction: d.fraction,
            drift_mean_steps: d.mean_steps,
            drift_sigma_steps: d.sigma_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub experts: usize,
    pub top_k: usize,
    pub post_mask: PostMask,
    pub interaction: bool,
    pub balance_weight: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            experts: crate::moe_router::DEFAULT_EXPERTS,
            top_k: crate::moe_router::DEFAULT_TOP_K,
            post_mask: PostMask::Renormalize,
            interaction: true,
            balance_weight: crate::moe_router::DEFAULT_BALANCE_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SideSection {
    pub ismoe: bool,
    pub reduction: usize,
    pub layer_drop: Vec<usize>,
    pub train_backbone_ln: bool,
}

impl Default for SideSection {
    fn default() -> Self {
        Self {
            ismoe: true,
            reduction: 2,
            layer_drop: Vec::new(),
            train_backbone_ln: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub task_weight: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            epochs: 50,
            batch_size: 32,
            task_weight: 1.0,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub layer_norm_bits: u8,
    pub side_bits: u8,
    pub activation_bits: u8,
    pub optimizer_bits: u8,
    pub optimizer_copies: u32,
    /// Reduction factors listed in the memory report sweep.
    pub r_sweep: Vec<usize>,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        let p = PrecisionMap::default();
        Self {
            layer_norm_bits: p.layer_norm_bits,
            side_bits: p.side_bits,
            activation_bits: p.activation_bits,
            optimizer_bits: p.optimizer_bits,
            optimizer_copies: p.optimizer_copies,
            r_sweep: vec![1, 2, 4, 8],
        }
    }
}

/// Complete experiment description, read from TOML. Unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub backbone: BackboneConfig,
    pub quantizer: QuantizerConfig,
    pub requant: RequantConfig,
    pub router: RouterConfig,
    pub side: SideSection,
    pub train: TrainConfig,
    pub memory: MemoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskConfig::default(),
            backbone: BackboneConfig::default(),
            quantizer: QuantizerConfig::default(),
            requant: RequantConfig::default(),
            router: RouterConfig::default(),
            side: SideSection::default(),
            train: TrainConfig::default(),
            memory: MemoryConfig::default(),
        }
    }
}

fn check(cond: bool, key: &str, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(format!("{key}: {msg}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        check(t.seq_len >= 1, "task.seq_len", "must be >= 1")?;
        check(t.dim >= 1, "task.dim", "must be >= 1")?;
        check(t.classes >= 2, "task.classes", "must be >= 2")?;
        check(t.clusters >= 1, "task.clusters", "must be >= 1")?;
        check(t.train_size >= 1, "task.train_size", "must be >= 1")?;
        check(t.val_size >= 1, "task.val_size", "must be >= 1")?;
        check(t.test_size >= 1, "task.test_size", "must be >= 1")?;
        check(t.token_noise >= 0.0 && t.token_noise.is_finite(), "task.token_noise", "must be >= 0")?;
        check(t.center_scale.is_finite(), "task.center_scale", "must be finite")?;
        check(self.backbone.layers >= 1, "backbone.layers", "must be >= 1")?;
        check(self.backbone.ffn_dim >= 1, "backbone.ffn_dim", "must be >= 1")?;
        check(self.backbone.pretrain_lr > 0.0, "backbone.pretrain_lr", "must be > 0")?;
        check(
            (2..=MAX_BITS).contains(&self.quantizer.bits),
            "quantizer.bits",
            "must be in 2..=16",
        )?;
        let r = &self.requant;
        check((0.0..=1.0).contains(&r.fraction), "requant.fraction", "must be in [0, 1]")?;
        check(r.interval >= 1, "requant.interval", "must be >= 1")?;
        self.drift().validate()?;
        check(self.router.experts >= 1, "router.experts", "must be >= 1")?;
        check(
            (1..=self.router.experts).contains(&self.router.top_k),
            "router.top_k",
            "must be in 1..=router.experts",
        )?;
        check(self.router.balance_weight >= 0.0, "router.balance_weight", "must be >= 0")?;
        check(self.side.reduction >= 1, "side.reduction", "must be >= 1")?;
        if let Some(l) = self.side.layer_drop.iter().find(|&&l| l >= self.backbone.layers) {
            return Err(Error::config(format!("side.layer_drop: layer {l} does not exist")));
        }
        check(self.train.epochs >= 1, "train.epochs", "must be >= 1")?;
        check(self.train.batch_size >= 1, "train.batch_size", "must be >= 1")?;
        check(self.train.task_weight >= 0.0, "train.task_weight", "must be >= 0")?;
        self.optimizer().validate()?;
        self.precision().validate()?;
        check(
            self.memory.r_sweep.iter().all(|&r| r >= 1),
            "memory.r_sweep",
            "reduction factors must be >= 1",
        )?;
        Ok(())
    }

    pub fn backbone_shape(&self) -> BackboneShape {
        BackboneShape {
            dim: self.task.dim,
            seq_len: self.task.seq_len,
            layers: self.backbone.layers,
            ffn_dim: self.backbone.ffn_dim,
        }
    }

    pub fn side_config(&self) -> SideConfig {
        SideConfig {
            reduction: self.side.reduction,
            ismoe: self.side.ismoe,
            experts: self.router.experts,
            top_k: self.router.top_k,
            post_mask: self.router.post_mask,
            interaction: self.router.interaction,
            layer_drop: self.side.layer_drop.clone(),
            train_backbone_ln: self.side.train_backbone_ln,
            train_side: true,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
            weight_decay: self.train.weight_decay,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.train.task_weight,
            beta: self.router.balance_weight,
        }
    }

    pub fn precision(&self) -> PrecisionMap {
        PrecisionMap {
            frozen_bits: if self.quantizer.enabled {
                match self.quantizer.bits {
                    0..=4 => 4,
                    5..=8 => 8,
                    _ => 16,
                }
            } else {
                32
            },
            layer_norm_bits: self.memory.layer_norm_bits,
            side_bits: self.memory.side_bits,
            activation_bits: self.memory.activation_bits,
            optimizer_bits: self.memory.optimizer_bits,
            optimizer_copies: self.memory.optimizer_copies,
        }
    }

    /// Schedule, or `None` when quantization or re-quantization is off.
    pub fn schedule(&self) -> Option<RequantSchedule> {
        (self.quantizer.enabled && self.requant.fraction > 0.0).then(|| RequantSchedule {
            fraction: self.requant.fraction,
            interval: self.requant.interval,
            epochs: self.train.epochs,
            seed: crate::rng::derive_seed(self.seed, "requant"),
        })
    }

    pub fn drift(&self) -> DriftModel {
        DriftModel {
            fraction: self.requant.drift_fraction,
            mean_steps: self.requant.drift_mean_steps,
            sigma_steps: self.requant.drift_sigma_steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml(&RunConfig::from_toml(&text).unwrap().to_toml()).unwrap(), cfg);
    }

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.requant.fraction, 0.10);
        assert_eq!(c.requant.interval, 10);
        assert_eq!(c.train.epochs, 50);
        assert_eq!((c.router.experts, c.router.top_k), (6, 1));
        assert_eq!((c.train.task_weight, c.router.balance_weight), (1.0, 1e-3));
        assert_eq!(c.quantizer.bits, 8);
        assert_eq!(c.schedule().unwrap().events(), 5);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[router]\nexperts = 3\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.router.experts, 3);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[router]\nexpertz = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("expertz"), "{err}");
    }

    #[test]
    fn invalid_values_are_named() {
        let err = RunConfig::from_toml("[router]\nexperts = 2\ntop_k = 3\n").unwrap_err();
        assert!(err.to_string().contains("router.top_k"));
        let err = RunConfig::from_toml("[side]\nreduction = 0\n").unwrap_err();
        assert!(err.to_string().contains("side.reduction"));
    }

    #[test]
    fn zero_fraction_disables_events() {
        let c = RunConfig::from_toml("[requant]\nfraction = 0.0\n").unwrap();
        assert!(c.schedule().is_none());
    }
}
