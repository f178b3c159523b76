//! Iterative re-quantization: every `M` epochs a random fraction of the
//! frozen weights is perturbed with Gaussian noise fitted to the drift seen
//! since the previous event, and every group touched by the sample gets
//! fresh coefficients and codes.

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseTensor;
use crate::quantizer::{
    calibrate_with, dequantize, quantize, residual_sq_sum, QuantizedTensor, Rounding,
};
use crate::rng::Rng;

pub const DEFAULT_FRACTION: f64 = 0.10;
pub const DEFAULT_INTERVAL: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequantSchedule {
    pub fraction: f64,
    pub interval: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl RequantSchedule {
    pub fn new(fraction: f64, interval: usize, epochs: usize, seed: u64) -> Result<Self> {
        let s = Self {
            fraction,
            interval,
            epochs,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config(format!(
                "requant fraction must be in (0, 1], got {}",
                self.fraction
            )));
        }
        if self.interval == 0 {
            return Err(Error::config("requant interval must be at least 1"));
        }
        Ok(())
    }

    /// Number of events over the full run, `epochs / interval`.
    pub fn events(&self) -> usize {
        self.epochs / self.interval
    }

    pub fn is_event(&self, epoch: usize) -> bool {
        epoch >= 1 && epoch <= self.epochs && epoch % self.interval == 0
    }

    /// 1-based event index for an event epoch.
    pub fn event_index(&self, epoch: usize) -> usize {
        epoch / self.interval
    }
}

/// Gaussian drift model for one event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub mu: f64,
    pub sigma: f64,
    pub event: usize,
}

impl NoiseParams {
    pub fn new(mu: f64, sigma: f64, event: usize) -> Result<Self> {
        let n = Self { mu, sigma, event };
        n.validate()?;
        Ok(n)
    }

    pub fn zero() -> Self {
        Self {
            mu: 0.0,
            sigma: 0.0,
            event: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() || !self.sigma.is_finite() {
            return Err(Error::numeric("noise parameters must be finite"));
        }
        if self.sigma < 0.0 {
            return Err(Error::config(format!("noise sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        if self.sigma == 0.0 {
            return self.mu;
        }
        Normal::new(self.mu, self.sigma)
            .expect("validated parameters")
            .sample(rng)
    }
}

/// Live values at the previous event and the element deltas observed since.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftRecord {
    snapshot: DenseTensor,
    deltas: Vec<f64>,
}

impl DriftRecord {
    pub fn new(snapshot: DenseTensor) -> Self {
        Self {
            snapshot,
            deltas: Vec::new(),
        }
    }

    /// Record built directly from a list of deltas.
    pub fn from_deltas(deltas: Vec<f64>) -> Self {
        Self {
            snapshot: DenseTensor::vector(Vec::new()),
            deltas,
        }
    }

    /// Replace the delta list with `live - snapshot` over changed elements.
    pub fn observe(&mut self, live: &DenseTensor) -> Result<()> {
        if live.shape() != self.snapshot.shape() {
            return Err(Error::dim("drift snapshot", self.snapshot.shape(), live.shape()));
        }
        self.deltas = live
            .data()
            .iter()
            .zip(self.snapshot.data())
            .filter(|(a, b)| a != b)
            .map(|(a, b)| a - b)
            .collect();
        Ok(())
    }

    pub fn reset(&mut self, live: &DenseTensor) {
        self.snapshot = live.clone();
        self.deltas.clear();
    }

    pub fn snapshot(&self) -> &DenseTensor {
        &self.snapshot
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }
}

/// Maximum-likelihood Gaussian fit (mean, population std) of the recorded
/// deltas. Fewer than two deltas give the zero model.
pub fn fit_noise(drift: &DriftRecord) -> NoiseParams {
    let d = drift.deltas();
    if d.len() < 2 {
        return NoiseParams::zero();
    }
    let n = d.len() as f64;
    let mu = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    NoiseParams {
        mu,
        sigma: var.sqrt(),
        event: 0,
    }
}

/// Sampled element indices, sorted, for each group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub per_group: Vec<Vec<usize>>,
}

impl Selection {
    pub fn total(&self) -> usize {
        self.per_group.iter().map(Vec::len).sum()
    }
}

/// `ceil(p * total)` without letting representation error in `p` add one.
pub fn sample_count(fraction: f64, total: usize) -> usize {
    let raw = fraction * total as f64;
    ((raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize).min(total)
}

/// Uniform sample without replacement of `ceil(p * U)` elements across all
/// groups, `U` being the total element count.
pub fn sample_subset(group_sizes: &[usize], fraction: f64, rng: &mut Rng) -> Result<Selection> {
    let total: usize = group_sizes.iter().sum();
    if total == 0 {
        return Err(Error::config("cannot sample from an empty weight set"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("sample fraction must be in (0, 1], got {fraction}")));
    }
    let count = sample_count(fraction, total);
    let mut flat = index::sample(rng, total, count).into_vec();
    flat.sort_unstable();
    let mut per_group = vec![Vec::new(); group_sizes.len()];
    let mut g = 0;
    let mut offset = 0;
    for i in flat {
        while i >= offset + group_sizes[g] {
            offset += group_sizes[g];
            g += 1;
        }
        per_group[g].push(i - offset);
    }
    Ok(Selection { per_group })
}

/// Copy of `weights` with an independent N(mu, sigma²) draw added to every
/// element.
pub fn perturb(weights: &DenseTensor, noise: &NoiseParams, rng: &mut Rng) -> DenseTensor {
    let mut out = weights.clone();
    for v in out.data_mut() {
        *v += noise.sample(rng);
    }
    out
}

/// Like [`perturb`] but only at the listed element indices.
pub fn perturb_subset(
    weights: &DenseTensor,
    indices: &[usize],
    noise: &NoiseParams,
    rng: &mut Rng,
) -> Result<DenseTensor> {
    let mut out = weights.clone();
    let n = out.len();
    for &i in indices {
        if i >= n {
            return Err(Error::Index {
                what: "weight element",
                index: i,
                bound: n,
            });
        }
        out.data_mut()[i] += noise.sample(rng);
    }
    Ok(out)
}

/// A frozen weight group: live full-precision values, their current codes,
/// and the drift record since the last event.
#[derive(Debug, Clone)]
pub struct QuantGroup {
    pub name: String,
    live: DenseTensor,
    quant: QuantizedTensor,
    drift: DriftRecord,
}

impl QuantGroup {
    pub fn new(name: impl Into<String>, live: DenseTensor, bits: u8, rounding: Rounding) -> Result<Self> {
        let params = calibrate_with(&live, bits, rounding)?;
        let quant = quantize(&live, &params)?;
        Ok(Self {
            name: name.into(),
            drift: DriftRecord::new(live.clone()),
            live,
            quant,
        })
    }

    pub fn live(&self) -> &DenseTensor {
        &self.live
    }

    /// Mutable live values, for drift injection.
    pub fn live_mut(&mut self) -> &mut DenseTensor {
        &mut self.live
    }

    pub fn quantized(&self) -> &QuantizedTensor {
        &self.quant
    }

    pub fn dequantized(&self) -> DenseTensor {
        dequantize(&self.quant)
    }

    pub fn drift(&self) -> &DriftRecord {
        &self.drift
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    /// Error between the live values and the current codes.
    pub fn error_q(&self) -> f64 {
        residual_sq_sum(&self.live, &self.quant).expect("shapes kept in sync") / self.len() as f64
    }
}

/// One row of the re-quantization event log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequantEvent {
    pub epoch: usize,
    pub group: usize,
    pub pre_error_q: f64,
    pub post_error_q: f64,
    pub mu: f64,
    pub sigma: f64,
    pub scale: f64,
    pub zero_point: i32,
}

/// Re-quantize one group if `epoch` is an event epoch and the group has
/// sampled elements: perturb the sampled elements, recalibrate over the
/// perturbed group and requantize it. Live values are left untouched, so
/// the error is always measured against them.
#[allow(clippy::too_many_arguments)]
pub fn requantize_step(
    group: &mut QuantGroup,
    group_id: usize,
    sampled: &[usize],
    schedule: &RequantSchedule,
    noise: &NoiseParams,
    epoch: usize,
    rng: &mut Rng,
) -> Result<Option<RequantEvent>> {
    if epoch == 0 {
        return Err(Error::config("epochs are numbered from 1"));
    }
    noise.validate()?;
    if !schedule.is_event(epoch) || sampled.is_empty() {
        return Ok(None);
    }
    let pre = group.error_q();
    let perturbed = perturb_subset(&group.live, sampled, noise, rng)?;
    let old = *group.quant.params();
    let params = calibrate_with(&perturbed, old.bits, old.rounding)?;
    group.quant = quantize(&perturbed, &params)?;
    group.drift.reset(&group.live);
    Ok(Some(RequantEvent {
        epoch,
        group: group_id,
        pre_error_q: pre,
        post_error_q: group.error_q(),
        mu: noise.mu,
        sigma: noise.sigma,
        scale: params.scale,
        zero_point: params.zero_point,
    }))
}

/// Drives the schedule over a set of groups with its own random stream.
#[derive(Debug, Clone)]
pub struct Requantizer {
    schedule: RequantSchedule,
    rng: Rng,
}

impl Requantizer {
    pub fn new(schedule: RequantSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            rng: crate::rng::stream(schedule.seed, "requant"),
            schedule,
        })
    }

    pub fn schedule(&self) -> &RequantSchedule {
        &self.schedule
    }

    /// Sample globally, fit noise per touched group, and refresh it.
    pub fn step(&mut self, groups: &mut [QuantGroup], epoch: usize) -> Result<Vec<RequantEvent>> {
        if epoch == 0 {
            return Err(Error::config("epochs are numbered from 1"));
        }
        if !self.schedule.is_event(epoch) {
            return Ok(Vec::new());
        }
        let sizes: Vec<usize> = groups.iter().map(QuantGroup::len).collect();
        let selection = sample_subset(&sizes, self.schedule.fraction, &mut self.rng)?;
        let t = self.schedule.event_index(epoch);
        let mut events = Vec::new();
        for (g, (group, sampled)) in groups.iter_mut().zip(&selection.per_group).enumerate() {
            if sampled.is_empty() {
                continue;
            }
            group.drift.observe(&group.live)?;
            let noise = NoiseParams {
                event: t,
                ..fit_noise(&group.drift)
            };
            if let Some(e) =
                requantize_step(group, g, sampled, &self.schedule, &noise, epoch, &mut self.rng)?
            {
                events.push(e);
            }
        }
        Ok(events)
    }
}

/// Synthetic drift: each epoch a fraction of all elements receives a delta
/// drawn from N(mean, (sigma_steps * s)²), `s` being the group's current
/// scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    pub fraction: f64,
    pub mean_steps: f64,
    pub sigma_steps: f64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self {
            fraction: 0.01,
            mean_steps: 0.0,
            sigma_steps: 0.1,
        }
    }
}

impl DriftModel {
    pub fn is_active(&self) -> bool {
        self.fraction > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::config(format!("drift fraction must be in [0, 1], got {}", self.fraction)));
        }
        if !self.mean_steps.is_finite() || !(self.sigma_steps >= 0.0) || !self.sigma_steps.is_finite() {
            return Err(Error::config("drift mean must be finite and sigma non-negative"));
        }
        Ok(())
    }

    pub fn apply(&self, groups: &mut [QuantGroup], rng: &mut Rng) -> Result<()> {
        if !self.is_active() || groups.is_empty() {
            return Ok(());
        }
        let sizes: Vec<usize> = groups.iter().map(QuantGroup::len).collect();
        let selection = sample_subset(&sizes, self.fraction, rng)?;
        for (group, picked) in groups.iter_mut().zip(&selection.per_group) {
            let s = group.quant.params().scale;
            let noise = NoiseParams::new(self.mean_steps * s, self.sigma_steps * s, 0)?;
            for &i in picked {
                group.live.data_mut()[i] += noise.sample(rng);
            }
        }
        Ok(())
    }
}

/// Mean squared residual pooled over all elements of all groups.
pub fn pooled_error(groups: &[QuantGroup]) -> f64 {
    let (sum, n) = groups.iter().fold((0.0, 0usize), |(s, n), g| {
        (
            s + residual_sq_sum(&g.live, &g.quant).expect("shapes kept in sync"),
            n + g.len(),
        )
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
pub(crate) fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    use rand::Rng as _;
    rng.random_range(lo..hi)
}
