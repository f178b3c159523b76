use serde::{Deserialize, Serialize};

use super::params::{init_param, Init, ParamSet};
use super::Batch;
use crate::error::{Error, Result};
use crate::numerics::{DenseTensor, GradTape, Var, DEFAULT_LN_EPS};
use crate::quantizer::Rounding;
use crate::requant::{QuantGroup, RequantEvent, Requantizer};

/// Frozen tensors of one backbone layer, in group order.
pub const FROZEN_PARTS: [&str; 5] = ["mix", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"];
const LN_PARTS: [&str; 4] = ["ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneShape {
    pub dim: usize,
    pub seq_len: usize,
    pub layers: usize,
    pub ffn_dim: usize,
}

impl BackboneShape {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.seq_len == 0 || self.layers == 0 || self.ffn_dim == 0 {
            return Err(Error::config("backbone dim, seq_len, layers and ffn_dim must be positive"));
        }
        Ok(())
    }

    fn frozen_shape(&self, part: &str) -> Vec<usize> {
        let (d, t, f) = (self.dim, self.seq_len, self.ffn_dim);
        match part {
            "mix" => vec![t, t],
            "ffn.w1" => vec![d, f],
            "ffn.b1" => vec![f],
            "ffn.w2" => vec![f, d],
            "ffn.b2" => vec![d],
            _ => unreachable!("unknown frozen part"),
        }
    }

    /// Frozen elements per layer.
    pub fn frozen_per_layer(&self) -> usize {
        FROZEN_PARTS.iter().map(|p| self.frozen_shape(p).iter().product::<usize>()).sum()
    }

    /// Normalization parameters per layer.
    pub fn ln_per_layer(&self) -> usize {
        4 * self.dim
    }
}

#[derive(Debug, Clone)]
enum Frozen {
    Full(ParamSet),
    Quantized {
        groups: Vec<QuantGroup>,
        effective: Vec<DenseTensor>,
    },
}

/// Token-mixing + FFN layers with post-normalization. Everything except the
/// normalization parameters is frozen after pretraining.
#[derive(Debug, Clone)]
pub struct Backbone {
    shape: BackboneShape,
    ln: ParamSet,
    frozen: Frozen,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    frozen: Vec<Var>,
    ln: Vec<Var>,
}

impl BackboneVars {
    /// Handles of the normalization parameters, in [`Backbone::ln_params`]
    /// order.
    pub fn ln(&self) -> &[Var] {
        &self.ln
    }

    pub fn frozen(&self) -> &[Var] {
        &self.frozen
    }
}

pub fn frozen_name(layer: usize, part: &str) -> String {
    format!("backbone.layer{layer}.{part}")
}

impl Backbone {
    pub fn init(shape: BackboneShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut frozen = ParamSet::new();
        let mut ln = ParamSet::new();
        for l in 0..shape.layers {
            for part in FROZEN_PARTS {
                let name = frozen_name(l, part);
                let init = if part.contains(".b") { Init::Zeros } else { Init::FanIn };
                frozen.insert(name.clone(), init_param(seed, &name, &shape.frozen_shape(part), init));
            }
            for part in LN_PARTS {
                let name = frozen_name(l, part);
                let init = if part.ends_with("gamma") { Init::Ones } else { Init::Zeros };
                ln.insert(name.clone(), init_param(seed, &name, &[shape.dim], init));
            }
        }
        Ok(Self {
            shape,
            ln,
            frozen: Frozen::Full(frozen),
        })
    }

    pub fn shape(&self) -> &BackboneShape {
        &self.shape
    }

    pub fn ln_params(&self) -> &ParamSet {
        &self.ln
    }

    pub fn ln_params_mut(&mut self) -> &mut ParamSet {
        &mut self.ln
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.frozen, Frozen::Quantized { .. })
    }

    /// Weights the forward pass sees: dequantized codes once quantized,
    /// full-precision values before.
    pub fn effective_weights(&self) -> Vec<(String, &DenseTensor)> {
        match &self.frozen {
            Frozen::Full(p) => p.iter().map(|(n, t)| (n.to_string(), t)).collect(),
            Frozen::Quantized { groups, effective } => groups
                .iter()
                .zip(effective)
                .map(|(g, t)| (g.name.clone(), t))
                .collect(),
        }
    }

    pub fn frozen_numel(&self) -> usize {
        self.shape.layers * self.shape.frozen_per_layer()
    }

    /// Replace the frozen weights by per-tensor quantized groups.
    pub fn quantize(&mut self, bits: u8, rounding: Rounding) -> Result<()> {
        let Frozen::Full(params) = &self.frozen else {
            return Err(Error::config("backbone is already quantized"));
        };
        let groups = params
            .iter()
            .map(|(n, t)| QuantGroup::new(n, t.clone(), bits, rounding))
            .collect::<Result<Vec<_>>>()?;
        let effective = groups.iter().map(QuantGroup::dequantized).collect();
        self.frozen = Frozen::Quantized { groups, effective };
        Ok(())
    }

    pub fn groups(&self) -> &[QuantGroup] {
        match &self.frozen {
            Frozen::Full(_) => &[],
            Frozen::Quantized { groups, .. } => groups,
        }
    }

    /// Mutable access to the live values of the groups. The forward pass
    /// keeps using the current codes until the next re-quantization.
    pub fn groups_mut(&mut self) -> &mut [QuantGroup] {
        match &mut self.frozen {
            Frozen::Full(_) => &mut [],
            Frozen::Quantized { groups, .. } => groups,
        }
    }

    /// Run the re-quantization schedule for `epoch` and refresh the weights
    /// used by the forward pass.
    pub fn requantize(&mut self, requantizer: &mut Requantizer, epoch: usize) -> Result<Vec<RequantEvent>> {
        let Frozen::Quantized { groups, effective } = &mut self.frozen else {
            return Ok(Vec::new());
        };
        let events = requantizer.step(groups, epoch)?;
        for e in &events {
            effective[e.group] = groups[e.group].dequantized();
        }
        Ok(events)
    }

    /// Put the backbone's tensors on `tape`.
    pub fn bind(&self, tape: &mut GradTape, train_ln: bool, train_frozen: bool) -> BackboneVars {
        let frozen = self
            .effective_weights()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), train_frozen))
            .collect();
        let ln = self.ln.iter().map(|(_, t)| tape.leaf(t.clone(), train_ln)).collect();
        BackboneVars { frozen, ln }
    }

    /// Per-layer outputs for a `(batch * seq_len) x dim` input.
    pub fn forward(&self, tape: &mut GradTape, vars: &BackboneVars, x: Var) -> Result<Vec<Var>> {
        let (rows, cols) = tape.value(x).dims2();
        if cols != self.shape.dim || rows % self.shape.seq_len != 0 {
            return Err(Error::dim(
                "backbone input",
                tape.value(x).shape(),
                &[self.shape.seq_len, self.shape.dim],
            ));
        }
        let t = self.shape.seq_len;
        let mut h = x;
        let mut outs = Vec::with_capacity(self.shape.layers);
        for l in 0..self.shape.layers {
            let f = &vars.frozen[l * 5..l * 5 + 5];
            let n = &vars.ln[l * 4..l * 4 + 4];
            let mixed = tape.mix_tokens(f[0], h, t)?;
            let a = tape.add(h, mixed)?;
            let h1 = tape.layer_norm(a, n[0], n[1], DEFAULT_LN_EPS)?;
            let z = tape.linear(h1, f[1], f[2])?;
            let z = tape.gelu(z);
            let z = tape.linear(z, f[3], f[4])?;
            let b = tape.add(h1, z)?;
            h = tape.layer_norm(b, n[2], n[3], DEFAULT_LN_EPS)?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// Train every backbone tensor plus a throwaway pooled head on a source
    /// task, in full precision.
    pub fn pretrain(
        &mut self,
        batches: &[Batch],
        classes: usize,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        use super::optimizer::{AdamW, AdamWConfig};
        let Frozen::Full(_) = &self.frozen else {
            return Err(Error::config("pretraining needs a full-precision backbone"));
        };
        let d = self.shape.dim;
        let mut head = ParamSet::new();
        head.insert("source.head.w", init_param(seed, "source.head.w", &[d, classes], Init::FanIn));
        head.insert("source.head.b", DenseTensor::zeros(&[classes]));
        let mut opt = AdamW::new(AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })?;
        let mut losses = Vec::with_capacity(epochs);
        for epoch in 1..=epochs {
            let mut total = 0.0;
            for batch in batches {
                let mut tape = GradTape::new();
                let vars = self.bind(&mut tape, true, true);
                let hw = tape.leaf(head.get("source.head.w")?.clone(), true);
                let hb = tape.leaf(head.get("source.head.b")?.clone(), true);
                let x = tape.constant(batch.x.clone());
                let outs = self.forward(&mut tape, &vars, x)?;
                let pooled = tape.mean_groups(*outs.last().expect("layers >= 1"), self.shape.seq_len)?;
                let logits = tape.linear(pooled, hw, hb)?;
                let loss = tape.cross_entropy(logits, &batch.labels)?;
                let lv = tape.value(loss).data()[0];
                if !lv.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        component: "backbone pretraining".into(),
                        detail: format!("loss {lv}"),
                    });
                }
                total += lv;
                let grads = tape.backward(loss)?;
                let handles: Vec<Var> = vars.frozen.iter().chain(&vars.ln).copied().chain([hw, hb]).collect();
                let gvals: Vec<DenseTensor> = handles
                    .iter()
                    .map(|&v| grads.get_or_zeros(v, tape.value(v)))
                    .collect();
                let Frozen::Full(frozen) = &mut self.frozen else { unreachable!() };
                let mut params: Vec<&mut DenseTensor> = frozen
                    .iter_mut()
                    .map(|(_, t)| t)
                    .chain(self.ln.iter_mut().map(|(_, t)| t))
                    .chain(head.iter_mut().map(|(_, t)| t))
                    .collect();
                opt.update(&mut params, &gvals.iter().collect::<Vec<_>>())?;
            }
            losses.push(total / batches.len().max(1) as f64);
        }
        Ok(losses)
    }
}
