use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::task::SyntheticTask;
use crate::error::{Error, Result};
use crate::memory_model::{
    backprop_memory, memory_report, LayerShape, MemoryBudget, MemoryReport, NetworkShape, ParamClass,
};
use crate::moe_router::RoutingRow;
use crate::requant::{pooled_error, sample_count, RequantEvent, Requantizer};
use crate::rng::{stream, Rng};
use crate::side_network::{
    pooled_balance, AdamW, Backbone, Checkpoint, LossWeights, Model, SideNetwork, SideShape,
};

/// Comma-separated, header row, LF line endings.
pub fn csv_text<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// One row per epoch of the CSV report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub task_loss: f64,
    pub balance_loss: f64,
    pub total_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub error_q: f64,
    pub requant_events: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMemory {
    pub budget: MemoryBudget,
    /// Buffer for the sampled elements of one re-quantization event.
    pub requant_workspace: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub epochs: usize,
    pub final_task_loss: f64,
    pub final_val_accuracy: f64,
    pub test_accuracy: f64,
    pub final_error_q: f64,
    pub final_balance_loss: f64,
    pub requant_events: usize,
    pub trainable_parameters: usize,
    pub pretrain_loss: Vec<f64>,
    pub memory: RunMemory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<EpochRow>,
    pub summary: RunSummary,
    /// Not serialized, so reports of identical runs stay byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn to_csv(&self) -> Result<String> {
        csv_text(&self.rows)
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)? + "\n")
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub events: Vec<RequantEvent>,
    pub routing: Vec<RoutingRow>,
    pub model: Model,
}

/// Re-quantization plus synthetic drift for one run, with random streams
/// of its own so training does not change its trajectory.
pub struct QuantDynamics {
    requantizer: Option<Requantizer>,
    drift: crate::requant::DriftModel,
    drift_rng: Rng,
}

impl QuantDynamics {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            requantizer: cfg.schedule().map(Requantizer::new).transpose()?,
            drift: cfg.drift(),
            drift_rng: stream(cfg.seed, "drift"),
        })
    }

    /// Events fire at the start of their epoch.
    pub fn begin_epoch(&mut self, backbone: &mut Backbone, epoch: usize) -> Result<Vec<RequantEvent>> {
        match &mut self.requantizer {
            Some(rq) if backbone.is_quantized() => backbone.requantize(rq, epoch),
            _ => Ok(Vec::new()),
        }
    }

    /// Drift lands on the live values after the epoch's updates.
    pub fn end_epoch(&mut self, backbone: &mut Backbone) -> Result<()> {
        if backbone.is_quantized() {
            self.drift.apply(backbone.groups_mut(), &mut self.drift_rng)?;
        }
        Ok(())
    }
}

fn build_backbone(cfg: &RunConfig, task: &SyntheticTask) -> Result<(Backbone, Vec<f64>)> {
    let mut backbone = Backbone::init(cfg.backbone_shape(), cfg.seed)?;
    let source = task.train.source_batches(cfg.train.batch_size);
    let losses = backbone.pretrain(
        &source,
        cfg.task.clusters,
        cfg.backbone.pretrain_epochs,
        cfg.backbone.pretrain_lr,
        cfg.seed,
    )?;
    if cfg.quantizer.enabled {
        backbone.quantize(cfg.quantizer.bits, cfg.quantizer.rounding)?;
    }
    Ok((backbone, losses))
}

/// Pooled error after each epoch when only re-quantization and drift run,
/// without fine-tuning. The trajectory is the same one `run_experiment`
/// records.
pub fn quant_trajectory(cfg: &RunConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !cfg.quantizer.enabled {
        return Err(Error::config("quantizer.enabled must be true for an error trajectory"));
    }
    let task = SyntheticTask::generate(&cfg.task, cfg.seed)?;
    let (mut backbone, _) = build_backbone(cfg, &task)?;
    let mut dynamics = QuantDynamics::new(cfg)?;
    let mut out = Vec::with_capacity(cfg.train.epochs);
    for epoch in 1..=cfg.train.epochs {
        dynamics.begin_epoch(&mut backbone, epoch)?;
        dynamics.end_epoch(&mut backbone)?;
        out.push(pooled_error(backbone.groups()));
    }
    Ok(out)
}

/// Analytic memory of a run: frozen backbone weights, trainable
/// normalization parameters, and the side network's weights, optimizer
/// state and backprop footprint for one batch.
pub fn run_memory(cfg: &RunConfig) -> Result<RunMemory> {
    cfg.validate()?;
    let prec = cfg.precision();
    let bs = cfg.backbone_shape();
    let side = SideShape::new(&bs, &cfg.side_config(), cfg.task.classes)?;
    let tokens = cfg.train.batch_size * bs.seq_len;
    let mut layers = Vec::new();
    for _ in 0..bs.layers {
        layers.push(LayerShape {
            pre_activation_dim: 0,
            weight_elems: bs.frozen_per_layer(),
            class: ParamClass::Frozen,
        });
        layers.push(LayerShape {
            pre_activation_dim: 0,
            weight_elems: bs.ln_per_layer(),
            class: if cfg.side.train_backbone_ln {
                ParamClass::LayerNorm
            } else {
                ParamClass::Frozen
            },
        });
    }
    let (dd, d, f, n) = (side.dim, side.hidden, side.ffn, side.experts);
    let k = if cfg.side.ismoe { cfg.router.top_k } else { 1 };
    let s = |dim: usize, w: usize| LayerShape {
        pre_activation_dim: dim,
        weight_elems: w,
        class: ParamClass::Side,
    };
    layers.push(s(tokens * d, dd * d + d));
    for _ in &side.blocks {
        layers.push(s(tokens * d, dd * d + d));
        layers.push(s(tokens * d, 2 * d));
        if cfg.side.ismoe {
            layers.push(s(tokens * n, d * n + n + n * dd));
        }
        layers.push(s(tokens * k * f, n * (d * f + f)));
        layers.push(s(tokens * k * d, n * (f * d + d)));
    }
    layers.push(s(cfg.train.batch_size * cfg.task.classes, d * cfg.task.classes + cfg.task.classes));
    // Frozen layers carry no stored activations: gradients never enter the
    // backbone beyond its normalization parameters.
    let shape = NetworkShape { layers };
    let budget = backprop_memory(&shape, &prec)?;
    let workspace = match cfg.schedule() {
        Some(sched) => sample_count(sched.fraction, bs.layers * bs.frozen_per_layer()) as f64 * 4.0,
        None => 0.0,
    };
    Ok(RunMemory {
        budget,
        requant_workspace: workspace,
        total: budget.total() + workspace,
    })
}

/// The backbone as a fully fine-tuned network for one batch: the
/// reference that the side network and the PETL floor are compared with.
pub fn backbone_network(cfg: &RunConfig) -> NetworkShape {
    let bs = cfg.backbone_shape();
    let tokens = cfg.train.batch_size * bs.seq_len;
    let (d, f, t) = (bs.dim, bs.ffn_dim, bs.seq_len);
    let layer = |dim: usize, w: usize, class: ParamClass| LayerShape {
        pre_activation_dim: dim,
        weight_elems: w,
        class,
    };
    let mut layers = Vec::new();
    for _ in 0..bs.layers {
        layers.push(layer(tokens * d, t * t, ParamClass::Frozen));
        layers.push(layer(tokens * d, 2 * d, ParamClass::LayerNorm));
        layers.push(layer(tokens * f, d * f + f, ParamClass::Frozen));
        layers.push(layer(tokens * d, f * d + d, ParamClass::Frozen));
        layers.push(layer(tokens * d, 2 * d, ParamClass::LayerNorm));
    }
    NetworkShape { layers }
}

/// Analytic memory report for the configured backbone, reduction factor
/// and precision map.
pub fn config_memory_report(cfg: &RunConfig) -> Result<MemoryReport> {
    cfg.validate()?;
    memory_report(
        &backbone_network(cfg),
        cfg.side.reduction,
        &cfg.memory.r_sweep,
        &cfg.precision(),
    )
}

/// Pretrain and quantize the backbone, fine-tune the side network with
/// scheduled re-quantization, and evaluate.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunArtifacts> {
    let started = Instant::now();
    cfg.validate()?;
    let task = SyntheticTask::generate(&cfg.task, cfg.seed)?;
    let (backbone, pretrain_loss) = build_backbone(cfg, &task)?;
    let side = SideNetwork::init(&cfg.backbone_shape(), cfg.side_config(), cfg.task.classes, cfg.seed)?;
    let mut model = Model::new(backbone, side)?;
    let mut opt = AdamW::new(cfg.optimizer())?;
    let weights: LossWeights = cfg.loss_weights();
    let mut dynamics = QuantDynamics::new(cfg)?;
    let mut shuffle = stream(cfg.seed, "shuffle");
    let val = task.val.in_order(cfg.train.batch_size);
    let mut rows = Vec::with_capacity(cfg.train.epochs);
    let mut all_events = Vec::new();
    let mut routing_rows = Vec::new();
    let mut last_balance = 0.0;

    for epoch in 1..=cfg.train.epochs {
        let events = dynamics.begin_epoch(&mut model.backbone, epoch)?;
        let n_events = events.len();
        all_events.extend(events);

        let batches = task.train.shuffled(cfg.train.batch_size, &mut shuffle);
        let (mut task_loss, mut balance, mut total, mut correct) = (0.0, 0.0, 0.0, 0usize);
        let mut routing = Vec::new();
        for batch in &batches {
            let out = model.train_step(batch, &weights, &mut opt, epoch)?;
            let share = batch.len() as f64;
            task_loss += out.loss.task * share;
            balance += out.loss.balance * share;
            total += out.loss.total * share;
            correct += out.correct;
            routing.extend(out.routing);
        }
        let n = task.train.len() as f64;
        if let Some(stats) = pooled_balance(&routing)? {
            routing_rows.extend(stats.rows(epoch));
        }
        let val_acc = accuracy(&model, &val, &weights)?;
        dynamics.end_epoch(&mut model.backbone)?;
        last_balance = balance / n;
        rows.push(EpochRow {
            epoch,
            task_loss: task_loss / n,
            balance_loss: balance / n,
            total_loss: total / n,
            train_accuracy: correct as f64 / n,
            val_accuracy: val_acc,
            error_q: pooled_error(model.backbone.groups()),
            requant_events: n_events,
        });
    }

    let test_acc = accuracy(&model, &task.test.in_order(cfg.train.batch_size), &weights)?;
    let last = *rows.last().expect("epochs >= 1");
    let summary = RunSummary {
        seed: cfg.seed,
        epochs: cfg.train.epochs,
        final_task_loss: last.task_loss,
        final_val_accuracy: last.val_accuracy,
        test_accuracy: test_acc,
        final_error_q: last.error_q,
        final_balance_loss: last_balance,
        requant_events: all_events.len(),
        trainable_parameters: model.trainable_parameters().len(),
        pretrain_loss,
        memory: run_memory(cfg)?,
    };
    Ok(RunArtifacts {
        report: RunReport {
            rows,
            summary,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        events: all_events,
        routing: routing_rows,
        model,
    })
}

fn accuracy(model: &Model, batches: &[crate::side_network::Batch], w: &LossWeights) -> Result<f64> {
    let mut correct = 0;
    let mut total = 0;
    for b in batches {
        correct += model.evaluate(b, w)?.1;
        total += b.len();
    }
    Ok(correct as f64 / total.max(1) as f64)
}

impl RunArtifacts {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint::from_model(&self.model, cfg.to_toml())
    }
}
