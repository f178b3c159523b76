//! Closed-form byte accounting for training memory: stored activations,
//! activation derivatives, weights per precision class, and optimizer
//! state.

use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    /// Frozen, quantized backbone weights.
    Frozen,
    /// Trainable full-precision normalization parameters.
    LayerNorm,
    /// Trainable side-network parameters.
    Side,
}

impl ParamClass {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamClass::Frozen)
    }
}

/// One layer: its pre-activation element count and its weight elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub pre_activation_dim: usize,
    pub weight_elems: usize,
    pub class: ParamClass,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NetworkShape {
    pub layers: Vec<LayerShape>,
}

impl NetworkShape {
    pub fn new(layers: Vec<LayerShape>) -> Result<Self> {
        if let Some(i) = layers.iter().position(|l| l.pre_activation_dim == 0) {
            return Err(Error::config(format!("layer {i} has a zero pre-activation dimension")));
        }
        Ok(Self { layers })
    }

    /// Layers of `self` followed by those of `other`.
    pub fn concat(&self, other: &NetworkShape) -> NetworkShape {
        NetworkShape {
            layers: self.layers.iter().chain(&other.layers).copied().collect(),
        }
    }

    /// `Σ dim(z_i)`, the element count of both the stored activations and
    /// their derivatives.
    pub fn activation_elems(&self) -> usize {
        self.layers.iter().map(|l| l.pre_activation_dim).sum()
    }

    pub fn weight_elems(&self, class: ParamClass) -> usize {
        self.layers
            .iter()
            .filter(|l| l.class == class)
            .map(|l| l.weight_elems)
            .sum()
    }

    /// Every width divided by `r`, floored at 1. Weight matrices shrink in
    /// both dimensions, so their element counts divide by `r²`. The result
    /// is a side network, so every layer becomes [`ParamClass::Side`].
    pub fn scaled(&self, r: usize) -> Result<NetworkShape> {
        if r == 0 {
            return Err(Error::config("reduction factor must be >= 1"));
        }
        Ok(NetworkShape {
            layers: self
                .layers
                .iter()
                .map(|l| LayerShape {
                    pre_activation_dim: (l.pre_activation_dim / r).max(1),
                    weight_elems: if l.weight_elems == 0 {
                        0
                    } else {
                        (l.weight_elems / (r * r)).max(1)
                    },
                    class: ParamClass::Side,
                })
                .collect(),
        })
    }
}

pub const ALLOWED_BITS: [u8; 5] = [4, 8, 16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrecisionMap {
    pub frozen_bits: u8,
    pub layer_norm_bits: u8,
    pub side_bits: u8,
    pub activation_bits: u8,
    pub optimizer_bits: u8,
    /// Moment buffers kept per trainable parameter.
    pub optimizer_copies: u32,
}

impl Default for PrecisionMap {
    fn default() -> Self {
        Self {
            frozen_bits: 8,
            layer_norm_bits: 32,
            side_bits: 16,
            activation_bits: 32,
            optimizer_bits: 32,
            optimizer_copies: 2,
        }
    }
}

impl PrecisionMap {
    /// Every class at `bits`.
    pub fn uniform(bits: u8) -> Self {
        Self {
            frozen_bits: bits,
            layer_norm_bits: bits,
            side_bits: bits,
            activation_bits: bits,
            optimizer_bits: bits,
            optimizer_copies: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("frozen_bits", self.frozen_bits),
            ("layer_norm_bits", self.layer_norm_bits),
            ("side_bits", self.side_bits),
            ("activation_bits", self.activation_bits),
            ("optimizer_bits", self.optimizer_bits),
        ] {
            if !ALLOWED_BITS.contains(&b) {
                return Err(Error::config(format!(
                    "{name} must be one of {ALLOWED_BITS:?}, got {b}"
                )));
            }
        }
        Ok(())
    }

    pub fn bits(&self, class: ParamClass) -> u8 {
        match class {
            ParamClass::Frozen => self.frozen_bits,
            ParamClass::LayerNorm => self.layer_norm_bits,
            ParamClass::Side => self.side_bits,
        }
    }
}

fn bytes(count: usize, bits: u8) -> f64 {
    count as f64 * f64::from(bits) / 8.0
}

/// Bytes per category. Fractional values appear only for 4-bit classes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub weights: f64,
    pub activations: f64,
    pub derivatives: f64,
    pub optimizer: f64,
}

impl MemoryBudget {
    /// Activations plus their derivatives, the backprop footprint.
    pub fn backprop(&self) -> f64 {
        self.activations + self.derivatives
    }

    pub fn total(&self) -> f64 {
        self.weights + self.activations + self.derivatives + self.optimizer
    }
}

impl Add for MemoryBudget {
    type Output = MemoryBudget;

    fn add(self, o: MemoryBudget) -> MemoryBudget {
        MemoryBudget {
            weights: self.weights + o.weights,
            activations: self.activations + o.activations,
            derivatives: self.derivatives + o.derivatives,
            optimizer: self.optimizer + o.optimizer,
        }
    }
}

impl std::iter::Sum for MemoryBudget {
    fn sum<I: Iterator<Item = MemoryBudget>>(iter: I) -> MemoryBudget {
        iter.fold(MemoryBudget::default(), Add::add)
    }
}

/// Full backpropagation footprint of `shape`: activations and derivatives
/// each hold `Σ dim(z_i)` elements.
pub fn backprop_memory(shape: &NetworkShape, prec: &PrecisionMap) -> Result<MemoryBudget> {
    prec.validate()?;
    let elems = shape.activation_elems();
    let weights = [ParamClass::Frozen, ParamClass::LayerNorm, ParamClass::Side]
        .iter()
        .map(|&c| bytes(shape.weight_elems(c), prec.bits(c)))
        .sum();
    let trainable = shape.weight_elems(ParamClass::LayerNorm) + shape.weight_elems(ParamClass::Side);
    Ok(MemoryBudget {
        weights,
        activations: bytes(elems, prec.activation_bits),
        derivatives: bytes(elems, prec.activation_bits),
        optimizer: bytes(trainable, prec.optimizer_bits) * f64::from(prec.optimizer_copies),
    })
}

/// Budget of a side network whose widths are those of `backbone` divided by
/// `r`.
pub fn side_memory(backbone: &NetworkShape, r: usize, prec: &PrecisionMap) -> Result<MemoryBudget> {
    backprop_memory(&backbone.scaled(r)?, prec)
}

/// Lower bound on the backprop footprint of parameter-efficient tuning:
/// half of the full activation-plus-derivative bytes.
pub fn petl_floor(shape: &NetworkShape, prec: &PrecisionMap) -> Result<f64> {
    Ok(backprop_memory(shape, prec)?.backprop() / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCounts {
    pub frozen: usize,
    pub layer_norm: usize,
    pub side: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.frozen + self.layer_norm + self.side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightBytes {
    pub bytes: f64,
    pub full_precision_bytes: f64,
    /// `1 - bytes / full_precision_bytes`, zero when there are no weights.
    pub savings_ratio: f64,
}

/// Weight bytes under `prec` against an all-32-bit baseline.
pub fn mixed_precision_weights(counts: &ParamCounts, prec: &PrecisionMap) -> Result<WeightBytes> {
    prec.validate()?;
    let b = bytes(counts.frozen, prec.frozen_bits)
        + bytes(counts.layer_norm, prec.layer_norm_bits)
        + bytes(counts.side, prec.side_bits);
    let full = bytes(counts.total(), 32);
    Ok(WeightBytes {
        bytes: b,
        full_precision_bytes: full,
        savings_ratio: if full == 0.0 { 0.0 } else { 1.0 - b / full },
    })
}

/// One row of the reduction-factor sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: usize,
    pub side_backprop: f64,
    pub side_total: f64,
    pub petl_floor: f64,
    pub below_floor: bool,
    pub equals_floor: bool,
}

/// Document written by the memory report command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub precision: PrecisionMap,
    pub backbone: MemoryBudget,
    pub side: MemoryBudget,
    /// Backbone weights plus side budget, the memory of a side-tuning run.
    pub combined_total: f64,
    /// Same with weights left out, i.e. only backprop and optimizer bytes.
    pub combined_without_weights: f64,
    pub petl_floor: f64,
    pub weights: WeightBytes,
    pub r_sweep: Vec<SweepRow>,
}

pub fn memory_report(
    backbone: &NetworkShape,
    r: usize,
    sweep: &[usize],
    prec: &PrecisionMap,
) -> Result<MemoryReport> {
    let full = backprop_memory(backbone, prec)?;
    let side = side_memory(backbone, r, prec)?;
    let floor = full.backprop() / 2.0;
    let side_shape = backbone.scaled(r)?;
    let counts = ParamCounts {
        frozen: backbone.weight_elems(ParamClass::Frozen),
        layer_norm: backbone.weight_elems(ParamClass::LayerNorm),
        side: side_shape.weight_elems(ParamClass::Side),
    };
    let r_sweep = sweep
        .iter()
        .map(|&r| {
            let s = side_memory(backbone, r, prec)?;
            Ok(SweepRow {
                r,
                side_backprop: s.backprop(),
                side_total: s.total(),
                petl_floor: floor,
                below_floor: s.backprop() < floor,
                equals_floor: s.backprop() == floor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let frozen_weights = MemoryBudget {
        weights: full.weights,
        ..MemoryBudget::default()
    };
    Ok(MemoryReport {
        precision: *prec,
        backbone: full,
        side,
        combined_total: (frozen_weights + side).total(),
        combined_without_weights: side.backprop() + side.optimizer,
        petl_floor: floor,
        weights: mixed_precision_weights(&counts, prec)?,
        r_sweep,
    })
}
