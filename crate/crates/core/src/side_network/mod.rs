//! Trainable side branch fed by ladder projections of a frozen backbone.
//!
//! Each retained backbone layer gets one side block of width `⌊D/r⌋`:
//! the ladder adds a projection of the backbone features to the side
//! state, then a normalized copy goes through an expert-bank FFN routed
//! with the backbone's position-0 token. A mean-pooled linear head
//! produces the logits.

mod backbone;
mod checkpoint;
mod optimizer;
mod params;

pub use backbone::{frozen_name, Backbone, BackboneShape, BackboneVars, FROZEN_PARTS};
pub use checkpoint::{Checkpoint, CheckpointManifest};
pub use optimizer::{AdamW, AdamWConfig};
pub use params::{init_param, Init, ParamSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe_router::{balance_stats, topk_indices, BalanceStats, PostMask, INIT_STD};
use crate::numerics::{DenseTensor, GradTape, Var, DEFAULT_LN_EPS};

/// Sequences flattened to `(batch * seq_len) x dim` rows, one label per
/// sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: DenseTensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SideConfig {
    pub reduction: usize,
    /// Use the routed expert bank; otherwise one dense FFN per block.
    pub ismoe: bool,
    pub experts: usize,
    pub top_k: usize,
    pub post_mask: PostMask,
    /// Blend in the salient-token correlation when routing.
    pub interaction: bool,
    /// Backbone layers without a side block.
    pub layer_drop: Vec<usize>,
    pub train_backbone_ln: bool,
    pub train_side: bool,
}

impl Default for SideConfig {
    fn default() -> Self {
        Self {
            reduction: 2,
            ismoe: true,
            experts: crate::moe_router::DEFAULT_EXPERTS,
            top_k: crate::moe_router::DEFAULT_TOP_K,
            post_mask: PostMask::Renormalize,
            interaction: true,
            layer_drop: Vec::new(),
            train_backbone_ln: true,
            train_side: true,
        }
    }
}

/// Widths derived from the backbone and [`SideConfig`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideShape {
    pub dim: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub experts: usize,
    pub classes: usize,
    pub blocks: Vec<usize>,
}

impl SideShape {
    pub fn new(backbone: &BackboneShape, cfg: &SideConfig, classes: usize) -> Result<Self> {
        if cfg.reduction == 0 {
            return Err(Error::config("side.reduction must be >= 1"));
        }
        if classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if cfg.ismoe && (cfg.experts == 0 || cfg.top_k == 0 || cfg.top_k > cfg.experts) {
            return Err(Error::config(format!(
                "router needs 1 <= top_k <= experts, got top_k={} experts={}",
                cfg.top_k, cfg.experts
            )));
        }
        if let Some(&l) = cfg.layer_drop.iter().find(|&&l| l >= backbone.layers) {
            return Err(Error::Index {
                what: "side.layer_drop layer",
                index: l,
                bound: backbone.layers,
            });
        }
        Ok(Self {
            dim: backbone.dim,
            seq_len: backbone.seq_len,
            hidden: (backbone.dim / cfg.reduction).max(1),
            ffn: (backbone.ffn_dim / cfg.reduction).max(1),
            experts: if cfg.ismoe { cfg.experts } else { 1 },
            classes,
            blocks: (0..backbone.layers).filter(|l| !cfg.layer_drop.contains(l)).collect(),
        })
    }

    /// Scalars in one expert FFN.
    pub fn expert_params(&self) -> usize {
        2 * self.hidden * self.ffn + self.ffn + self.hidden
    }

    /// Gate column plus representative token contributed by each expert.
    pub fn routing_params_per_expert(&self) -> usize {
        self.hidden + 1 + self.dim
    }
}

/// Routing record of one side block for one batch.
#[derive(Debug, Clone)]
pub struct BlockRouting {
    pub block: usize,
    pub distribution: Var,
    pub top1: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
}

pub struct SideForward {
    pub logits: Var,
    pub routing: Vec<BlockRouting>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: crate::moe_router::DEFAULT_BALANCE_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLoss {
    pub task: f64,
    pub balance: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideNetwork {
    cfg: SideConfig,
    shape: SideShape,
    params: ParamSet,
}

fn block_name(i: usize, part: &str) -> String {
    format!("side.block{i}.{part}")
}

impl SideNetwork {
    pub fn init(backbone: &BackboneShape, cfg: SideConfig, classes: usize, seed: u64) -> Result<Self> {
        let shape = SideShape::new(backbone, &cfg, classes)?;
        let (dd, d, f, n) = (shape.dim, shape.hidden, shape.ffn, shape.experts);
        let mut p = ParamSet::new();
        let mut add = |name: String, dims: &[usize], init: Init| {
            let t = init_param(seed, &name, dims, init);
            p.insert(name, t);
        };
        add("side.input.w".into(), &[dd, d], Init::FanIn);
        add("side.input.b".into(), &[d], Init::Zeros);
        for i in 0..shape.blocks.len() {
            add(block_name(i, "ladder.w"), &[dd, d], Init::FanIn);
            add(block_name(i, "ladder.b"), &[d], Init::Zeros);
            add(block_name(i, "ln.gamma"), &[d], Init::Ones);
            add(block_name(i, "ln.beta"), &[d], Init::Zeros);
            for j in 0..n {
                add(block_name(i, &format!("expert{j}.w1")), &[d, f], Init::FanIn);
                add(block_name(i, &format!("expert{j}.b1")), &[f], Init::Zeros);
                add(block_name(i, &format!("expert{j}.w2")), &[f, d], Init::FanIn);
                add(block_name(i, &format!("expert{j}.b2")), &[d], Init::Zeros);
            }
            if cfg.ismoe {
                add(block_name(i, "gate.w"), &[d, n], Init::Normal(INIT_STD));
                add(block_name(i, "gate.b"), &[n], Init::Zeros);
                add(block_name(i, "reps"), &[n, dd], Init::Normal(INIT_STD));
            }
        }
        add("side.head.w".into(), &[d, shape.classes], Init::FanIn);
        add("side.head.b".into(), &[shape.classes], Init::Zeros);
        Ok(Self { cfg, shape, params: p })
    }

    pub fn config(&self) -> &SideConfig {
        &self.cfg
    }

    pub fn shape(&self) -> &SideShape {
        &self.shape
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Side forward on `tape`. `side` holds one handle per parameter in
    /// [`ParamSet`] order and `layers` the backbone outputs.
    pub fn forward(&self, tape: &mut GradTape, side: &[Var], x: Var, layers: &[Var]) -> Result<SideForward> {
        let sh = &self.shape;
        let t = sh.seq_len;
        let v = |name: &str| -> Result<Var> {
            self.params
                .index(name)
                .map(|i| side[i])
                .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
        };
        let rows = tape.value(x).rows();
        let seqs = rows / t;
        let mut s = tape.linear(x, v("side.input.w")?, v("side.input.b")?)?;
        let mut routing = Vec::new();
        for (i, &layer) in sh.blocks.iter().enumerate() {
            let h = layers[layer];
            let ladder = tape.linear(h, v(&block_name(i, "ladder.w"))?, v(&block_name(i, "ladder.b"))?)?;
            s = tape.add(s, ladder)?;
            let u = tape.layer_norm(s, v(&block_name(i, "ln.gamma"))?, v(&block_name(i, "ln.beta"))?, DEFAULT_LN_EPS)?;
            let expert = |tape: &mut GradTape, j: usize, input: Var| -> Result<Var> {
                let z = tape.linear(
                    input,
                    v(&block_name(i, &format!("expert{j}.w1")))?,
                    v(&block_name(i, &format!("expert{j}.b1")))?,
                )?;
                let z = tape.gelu(z);
                tape.linear(
                    z,
                    v(&block_name(i, &format!("expert{j}.w2")))?,
                    v(&block_name(i, &format!("expert{j}.b2")))?,
                )
            };
            let out = if self.cfg.ismoe {
                let n = sh.experts;
                let g = tape.linear(u, v(&block_name(i, "gate.w"))?, v(&block_name(i, "gate.b"))?)?;
                let pg = tape.softmax_rows(g)?;
                let (dist, select_on, mode) = if self.cfg.interaction {
                    let first: Vec<usize> = (0..seqs).map(|b| b * t).collect();
                    let salient = tape.gather_rows(h, &first)?;
                    let sims = tape.matmul_bt(salient, v(&block_name(i, "reps"))?)?;
                    let c = tape.softmax_rows(sims)?;
                    let owner: Vec<usize> = (0..rows).map(|r| r / t).collect();
                    let c_tok = tape.gather_rows(c, &owner)?;
                    let sum = tape.add(pg, c_tok)?;
                    let dist = tape.scale(sum, 0.5);
                    (dist, dist, self.cfg.post_mask)
                } else {
                    (pg, g, PostMask::Softmax)
                };
                let vals = tape.value(select_on).clone();
                let mut mask = vec![false; rows * n];
                for r in 0..rows {
                    for e in topk_indices(vals.row(r), self.cfg.top_k)? {
                        mask[r * n + e] = true;
                    }
                }
                let w = tape.select(select_on, &mask, mode)?;
                let wv = tape.value(w).clone();
                let top1: Vec<usize> = (0..rows)
                    .map(|r| topk_indices(wv.row(r), 1).map(|v| v[0]))
                    .collect::<Result<_>>()?;
                let dv = tape.value(dist);
                let probs = (0..rows).map(|r| dv.row(r).to_vec()).collect();
                routing.push(BlockRouting {
                    block: i,
                    distribution: dist,
                    top1,
                    probs,
                });
                let mut acc: Option<Var> = None;
                for j in 0..n {
                    let idx: Vec<usize> = (0..rows).filter(|&r| mask[r * n + j]).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let xin = tape.gather_rows(u, &idx)?;
                    let y = expert(tape, j, xin)?;
                    let y = tape.scale_rows_by_entry(y, w, &idx, j)?;
                    let y = tape.scatter_add_rows(y, &idx, rows)?;
                    acc = Some(match acc {
                        None => y,
                        Some(a) => tape.add(a, y)?,
                    });
                }
                acc.expect("every token selects at least one expert")
            } else {
                expert(tape, 0, u)?
            };
            s = tape.add(s, out)?;
        }
        let pooled = tape.mean_groups(s, t)?;
        let logits = tape.linear(pooled, v("side.head.w")?, v("side.head.b")?)?;
        Ok(SideForward { logits, routing })
    }
}

/// Frozen backbone plus side network.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Backbone,
    pub side: SideNetwork,
}

/// Everything recorded for one batch.
pub struct Recorded {
    pub tape: GradTape,
    pub loss: Var,
    pub logits: Var,
    pub step: StepLoss,
    pub trainable: Vec<Var>,
    pub routing: Vec<BlockRouting>,
    pub layers: Vec<Var>,
}

impl Model {
    pub fn new(backbone: Backbone, side: SideNetwork) -> Result<Self> {
        let bs = backbone.shape();
        if bs.dim != side.shape.dim || bs.seq_len != side.shape.seq_len {
            return Err(Error::dim(
                "side network",
                &[bs.seq_len, bs.dim],
                &[side.shape.seq_len, side.shape.dim],
            ));
        }
        Ok(Self { backbone, side })
    }

    /// Names of the trainable parameters in update order: backbone
    /// normalization first, then the side network.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.side.cfg.train_backbone_ln {
            out.extend(self.backbone.ln_params().names());
        }
        if self.side.cfg.train_side {
            out.extend(self.side.params.names());
        }
        out
    }

    pub fn trainable_tensors(&self) -> Vec<(&str, &DenseTensor)> {
        let mut out: Vec<(&str, &DenseTensor)> = Vec::new();
        if self.side.cfg.train_backbone_ln {
            out.extend(self.backbone.ln_params().iter());
        }
        if self.side.cfg.train_side {
            out.extend(self.side.params.iter());
        }
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut DenseTensor> {
        let mut out: Vec<&mut DenseTensor> = Vec::new();
        if self.side.cfg.train_backbone_ln {
            out.extend(self.backbone.ln_params_mut().iter_mut().map(|(_, t)| t));
        }
        if self.side.cfg.train_side {
            out.extend(self.side.params.iter_mut().map(|(_, t)| t));
        }
        out
    }

    /// Flattened copy of the trainable parameters.
    pub fn trainable_parameters(&self) -> Vec<f64> {
        self.trainable_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_trainable_parameters(&mut self, flat: &[f64]) -> Result<()> {
        let n: usize = self.trainable_tensors().iter().map(|(_, t)| t.len()).sum();
        if flat.len() != n {
            return Err(Error::dim("trainable parameters", &[n], &[flat.len()]));
        }
        let mut off = 0;
        for t in self.trainable_mut() {
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// Record forward and loss for `batch`.
    pub fn record(&self, batch: &Batch, w: &LossWeights) -> Result<Recorded> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let cfg = &self.side.cfg;
        let mut tape = GradTape::new();
        let bvars = self.backbone.bind(&mut tape, cfg.train_backbone_ln, false);
        let svars: Vec<Var> = self
            .side
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), cfg.train_side))
            .collect();
        let x = tape.constant(batch.x.clone());
        let layers = self.backbone.forward(&mut tape, &bvars, x)?;
        let fwd = self.side.forward(&mut tape, &svars, x, &layers)?;
        let task = tape.cross_entropy(fwd.logits, &batch.labels)?;
        let task_v = tape.value(task).data()[0];
        let mut loss = tape.scale(task, w.alpha);
        let mut balance_v = 0.0;
        if self.side.shape.experts > 1 && !fwd.routing.is_empty() {
            let n = self.side.shape.experts;
            let mut terms = Vec::new();
            for r in &fwd.routing {
                let stats = balance_stats(&r.top1, &r.probs)?;
                let rows = tape.value(r.distribution).rows();
                let p = tape.mean_groups(r.distribution, rows)?;
                let f = tape.constant(DenseTensor::matrix(1, n, stats.shares)?);
                let fp = tape.mul(p, f)?;
                let s = tape.sum(fp);
                terms.push(tape.scale(s, n as f64));
            }
            let mut lb = terms[0];
            for &t in &terms[1..] {
                lb = tape.add(lb, t)?;
            }
            let lb = tape.scale(lb, 1.0 / terms.len() as f64);
            balance_v = tape.value(lb).data()[0];
            let weighted = tape.scale(lb, w.beta);
            loss = tape.add(loss, weighted)?;
        }
        let total_v = tape.value(loss).data()[0];
        let mut trainable = Vec::new();
        if cfg.train_backbone_ln {
            trainable.extend_from_slice(bvars.ln());
        }
        if cfg.train_side {
            trainable.extend_from_slice(&svars);
        }
        Ok(Recorded {
            loss,
            logits: fwd.logits,
            step: StepLoss {
                task: task_v,
                balance: balance_v,
                total: total_v,
            },
            trainable,
            routing: fwd.routing,
            layers,
            tape,
        })
    }

    /// Loss value and flattened gradient over the trainable parameters.
    pub fn loss_and_grad(&self, batch: &Batch, w: &LossWeights) -> Result<(StepLoss, Vec<f64>)> {
        let rec = self.record(batch, w)?;
        let grads = rec.tape.backward(rec.loss)?;
        let flat = rec
            .trainable
            .iter()
            .flat_map(|&v| grads.get_or_zeros(v, rec.tape.value(v)).into_data())
            .collect();
        Ok((rec.step, flat))
    }

    /// Forward, backward and one optimizer update.
    pub fn train_step(&mut self, batch: &Batch, w: &LossWeights, opt: &mut AdamW, epoch: usize) -> Result<TrainOutcome> {
        let rec = self.record(batch, w)?;
        for (name, value) in [("task loss", rec.step.task), ("balance loss", rec.step.balance)] {
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    component: name.into(),
                    detail: format!("value {value}"),
                });
            }
        }
        let grads = rec.tape.backward(rec.loss)?;
        let names = self.trainable_names();
        let gvals: Vec<DenseTensor> = rec
            .trainable
            .iter()
            .map(|&v| grads.get_or_zeros(v, rec.tape.value(v)))
            .collect();
        if let Some(i) = gvals.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                component: format!("gradient of {}", names[i]),
                detail: "non-finite entry".into(),
            });
        }
        let correct = count_correct(rec.tape.value(rec.logits), &batch.labels);
        let routing = rec
            .routing
            .iter()
            .map(|r| (r.top1.clone(), r.probs.clone()))
            .collect();
        let mut params = self.trainable_mut();
        opt.update(&mut params, &gvals.iter().collect::<Vec<_>>())?;
        Ok(TrainOutcome {
            loss: rec.step,
            correct,
            routing,
        })
    }

    /// Loss and correct-prediction count without updating anything.
    pub fn evaluate(&self, batch: &Batch, w: &LossWeights) -> Result<(StepLoss, usize)> {
        let rec = self.record(batch, w)?;
        Ok((rec.step, count_correct(rec.tape.value(rec.logits), &batch.labels)))
    }

    /// Logits for `batch`, rows in sequence order.
    pub fn logits(&self, batch: &Batch) -> Result<DenseTensor> {
        let rec = self.record(batch, &LossWeights::default())?;
        Ok(rec.tape.value(rec.logits).clone())
    }
}

/// Per-batch training result.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub loss: StepLoss,
    pub correct: usize,
    /// Top-1 experts and pre-selection distributions per MoE block.
    pub routing: Vec<(Vec<usize>, Vec<Vec<f64>>)>,
}

/// Balance statistics over routing records pooled from many batches and
/// blocks.
pub fn pooled_balance(records: &[(Vec<usize>, Vec<Vec<f64>>)]) -> Result<Option<BalanceStats>> {
    if records.is_empty() {
        return Ok(None);
    }
    let top1: Vec<usize> = records.iter().flat_map(|(t, _)| t.iter().copied()).collect();
    let probs: Vec<Vec<f64>> = records.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
    balance_stats(&top1, &probs).map(Some)
}

fn count_correct(logits: &DenseTensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| topk_indices(logits.row(i), 1).map(|v| v[0] == y).unwrap_or(false))
        .count()
}

#[cfg(test)]
mod tests;
