//! Sparse top-k gating over an expert bank, refined by the correlation
//! between the backbone's salient token and one representative token per
//! expert.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_row, stable_sum, DenseTensor};
use crate::rng::Rng;

pub use crate::numerics::SelectMode as PostMask;

pub const DEFAULT_EXPERTS: usize = 6;
pub const DEFAULT_TOP_K: usize = 1;
pub const DEFAULT_BALANCE_WEIGHT: f64 = 1e-3;
pub const INIT_STD: f64 = 0.02;

/// Linear gate `x · projection + bias` producing one score per expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateWeights {
    projection: DenseTensor,
    bias: Vec<f64>,
}

impl GateWeights {
    pub fn new(projection: DenseTensor, bias: Vec<f64>) -> Result<Self> {
        if projection.shape().len() != 2 || projection.cols() == 0 {
            return Err(Error::config("gate projection must be a D x N matrix with N >= 1"));
        }
        if bias.len() != projection.cols() {
            return Err(Error::dim("gate bias", projection.shape(), &[bias.len()]));
        }
        if !projection.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::numeric("gate weights must be finite"));
        }
        Ok(Self { projection, bias })
    }

    /// Projection from N(0, 0.02²), zero bias.
    pub fn init(dim: usize, experts: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(normal_matrix(dim, experts, rng)?, vec![0.0; experts])
    }

    pub fn projection(&self) -> &DenseTensor {
        &self.projection
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn experts(&self) -> usize {
        self.projection.cols()
    }
}

/// One learnable `D`-wide token per expert, stored as an `N x D` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeTokens {
    tokens: DenseTensor,
}

impl RepresentativeTokens {
    pub fn new(tokens: DenseTensor) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() == 0 {
            return Err(Error::config("representative tokens must be an N x D matrix"));
        }
        if !tokens.is_finite() {
            return Err(Error::numeric("representative tokens must be finite"));
        }
        Ok(Self { tokens })
    }

    pub fn init(experts: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(normal_matrix(experts, dim, rng)?)
    }

    pub fn tokens(&self) -> &DenseTensor {
        &self.tokens
    }

    pub fn experts(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Result<DenseTensor> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    DenseTensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// Routing outcome for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Selected experts in ascending index order.
    pub experts: Vec<usize>,
    /// Combination weight of each entry of `experts`.
    pub weights: Vec<f64>,
    /// Raw gate scores.
    pub scores: Vec<f64>,
    /// Correlation distribution, uniform when routing is not refined.
    pub correlation: Vec<f64>,
    /// Distribution the top-k selection was made on.
    pub refined: Vec<f64>,
}

impl RoutingDecision {
    pub fn num_experts(&self) -> usize {
        self.scores.len()
    }

    /// Dense combination weights, zero for unselected experts.
    pub fn dense_weights(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_experts()];
        for (&e, &w) in self.experts.iter().zip(&self.weights) {
            out[e] = w;
        }
        out
    }

    /// Highest-weighted expert, lowest index on ties.
    pub fn top1(&self) -> usize {
        let mut best = 0;
        for i in 1..self.experts.len() {
            if self.weights[i] > self.weights[best] {
                best = i;
            }
        }
        self.experts[best]
    }
}

pub fn gate_scores(x: &[f64], gate: &GateWeights) -> Result<Vec<f64>> {
    if x.len() != gate.dim() {
        return Err(Error::dim("gate_scores", &[x.len()], gate.projection.shape()));
    }
    let n = gate.experts();
    let p = gate.projection.data();
    let mut out = gate.bias.clone();
    for (i, &xi) in x.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(&p[i * n..(i + 1) * n]) {
            *o += xi * w;
        }
    }
    Ok(out)
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::config(format!("top_k must be in 1..={n}, got {k}")));
    }
    Ok(())
}

/// Indices of the `k` largest scores, ascending by index. Ties go to the
/// lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(k, scores.len())?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::numeric(format!("routing score {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Keep the top-k scores, set the rest to `-inf`.
pub fn topk_mask(scores: &[f64], k: usize) -> Result<Vec<f64>> {
    let keep = topk_indices(scores, k)?;
    let mut out = vec![f64::NEG_INFINITY; scores.len()];
    for i in keep {
        out[i] = scores[i];
    }
    Ok(out)
}

/// Softmax over the masked scores.
pub fn routing_probs(scores: &[f64], k: usize) -> Result<Vec<f64>> {
    softmax_row(&topk_mask(scores, k)?)
}

/// Softmax of the similarities between the salient token and each
/// representative token.
pub fn correlation_scores(salient: &[f64], reps: &RepresentativeTokens) -> Result<Vec<f64>> {
    if salient.len() != reps.dim() {
        return Err(Error::dim("correlation_scores", &[salient.len()], reps.tokens.shape()));
    }
    let sims: Vec<f64> = (0..reps.experts())
        .map(|i| {
            reps.tokens
                .row(i)
                .iter()
                .zip(salient)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    softmax_row(&sims)
}

fn select(dist: &[f64], k: usize, mode: PostMask) -> Result<(Vec<usize>, Vec<f64>)> {
    let experts = topk_indices(dist, k)?;
    let picked: Vec<f64> = experts.iter().map(|&i| dist[i]).collect();
    let weights = match mode {
        PostMask::Renormalize => {
            let total = stable_sum(&picked);
            if !(total > 0.0) {
                return Err(Error::InvalidDistribution(
                    "selected routing mass is zero".into(),
                ));
            }
            picked.iter().map(|v| v / total).collect()
        }
        PostMask::Softmax => softmax_row(&picked)?,
    };
    Ok((experts, weights))
}

/// Plain sparse gating: top-k of the gate scores, softmax over the kept
/// entries.
pub fn route(x: &[f64], gate: &GateWeights, k: usize) -> Result<RoutingDecision> {
    let scores = gate_scores(x, gate)?;
    let probs = routing_probs(&scores, k)?;
    let experts = topk_indices(&scores, k)?;
    let weights = experts.iter().map(|&i| probs[i]).collect();
    let n = scores.len();
    Ok(RoutingDecision {
        experts,
        weights,
        refined: softmax_row(&scores)?,
        correlation: vec![1.0 / n as f64; n],
        scores,
    })
}

/// Average of the gate distribution and the correlation distribution,
/// followed by top-k selection and `mode` normalization of the kept
/// entries.
pub fn refined_routing(
    x: &[f64],
    salient: &[f64],
    gate: &GateWeights,
    reps: &RepresentativeTokens,
    k: usize,
    mode: PostMask,
) -> Result<RoutingDecision> {
    if gate.experts() != reps.experts() {
        return Err(Error::dim(
            "refined_routing",
            gate.projection.shape(),
            reps.tokens.shape(),
        ));
    }
    let scores = gate_scores(x, gate)?;
    let correlation = correlation_scores(salient, reps)?;
    refine_from(scores, correlation, k, mode)
}

/// Refinement step on precomputed scores and correlation.
pub fn refine_from(
    scores: Vec<f64>,
    correlation: Vec<f64>,
    k: usize,
    mode: PostMask,
) -> Result<RoutingDecision> {
    if scores.len() != correlation.len() {
        return Err(Error::dim("refine", &[scores.len()], &[correlation.len()]));
    }
    let refined: Vec<f64> = softmax_row(&scores)?
        .iter()
        .zip(&correlation)
        .map(|(g, c)| (g + c) / 2.0)
        .collect();
    let (experts, weights) = select(&refined, k, mode)?;
    Ok(RoutingDecision {
        experts,
        weights,
        scores,
        correlation,
        refined,
    })
}

/// Weighted sum of the selected experts' outputs. Unselected experts are
/// never called.
pub fn dispatch_combine<F>(x: &[f64], decision: &RoutingDecision, experts: &mut [F]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if experts.len() != decision.num_experts() {
        return Err(Error::dim(
            "dispatch_combine",
            &[experts.len()],
            &[decision.num_experts()],
        ));
    }
    let mut out: Option<Vec<f64>> = None;
    for (&e, &w) in decision.experts.iter().zip(&decision.weights) {
        let y = (experts[e])(x);
        match &mut out {
            None => out = Some(y.iter().map(|v| w * v).collect()),
            Some(acc) => {
                if acc.len() != y.len() {
                    return Err(Error::dim("expert output", &[acc.len()], &[y.len()]));
                }
                for (a, v) in acc.iter_mut().zip(&y) {
                    *a += w * v;
                }
            }
        }
    }
    out.ok_or_else(|| Error::config("routing decision selects no expert"))
}

/// Per-expert token share and mean probability for a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceStats {
    pub shares: Vec<f64>,
    pub mean_probs: Vec<f64>,
    pub loss: f64,
}

/// `N · Σ f_i · P_i` with `f_i` the share of tokens whose top-1 expert is
/// `i` and `P_i` the mean probability on `i`.
pub fn balance_stats(top1: &[usize], probs: &[Vec<f64>]) -> Result<BalanceStats> {
    if top1.is_empty() {
        return Err(Error::config("load balancing needs at least one routed token"));
    }
    if top1.len() != probs.len() {
        return Err(Error::dim("load balancing", &[top1.len()], &[probs.len()]));
    }
    let n = probs[0].len();
    let tokens = top1.len() as f64;
    let mut counts = vec![0usize; n];
    for &e in top1 {
        if e >= n {
            return Err(Error::Index {
                what: "expert",
                index: e,
                bound: n,
            });
        }
        counts[e] += 1;
    }
    let mut mean_probs = vec![0.0; n];
    for row in probs {
        if row.len() != n {
            return Err(Error::dim("load balancing", &[n], &[row.len()]));
        }
        for (m, p) in mean_probs.iter_mut().zip(row) {
            *m += p;
        }
    }
    for m in &mut mean_probs {
        *m /= tokens;
    }
    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / tokens).collect();
    let terms: Vec<f64> = shares.iter().zip(&mean_probs).map(|(f, p)| f * p).collect();
    Ok(BalanceStats {
        loss: n as f64 * stable_sum(&terms),
        shares,
        mean_probs,
    })
}

/// Load-balancing loss over a batch of decisions, using each decision's
/// pre-selection distribution as the routing probability.
pub fn load_balancing_loss(decisions: &[RoutingDecision]) -> Result<f64> {
    let top1: Vec<usize> = decisions.iter().map(RoutingDecision::top1).collect();
    let probs: Vec<Vec<f64>> = decisions.iter().map(|d| d.refined.clone()).collect();
    Ok(balance_stats(&top1, &probs)?.loss)
}

/// One row of the routing diagnostics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub epoch: usize,
    pub expert: usize,
    pub share: f64,
    pub mean_prob: f64,
    pub balance_loss: f64,
}

impl BalanceStats {
    pub fn rows(&self, epoch: usize) -> Vec<RoutingRow> {
        (0..self.shares.len())
            .map(|i| RoutingRow {
                epoch,
                expert: i,
                share: self.shares[i],
                mean_prob: self.mean_probs[i],
                balance_loss: self.loss,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use std::cell::Cell;

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol || x == y)
    }

    #[test]
    fn gate_scores_examples() {
        let gate = GateWeights::new(DenseTensor::zeros(&[4, 6]), vec![0.0; 6]).unwrap();
        assert_eq!(gate_scores(&[0.0; 4], &gate).unwrap(), vec![0.0; 6]);
        let mut proj = DenseTensor::identity(3);
        proj.data_mut()[1] = 2.0;
        let gate = GateWeights::new(proj, vec![0.5, 0.0, 0.0]).unwrap();
        assert_eq!(gate_scores(&[1.0, 0.0, 0.0], &gate).unwrap(), vec![1.5, 2.0, 0.0]);
        let gate = GateWeights::init(5, 6, &mut stream(0, "g")).unwrap();
        assert_eq!(gate_scores(&[0.3; 5], &gate).unwrap().len(), 6);
        assert!(matches!(gate_scores(&[0.3; 4], &gate), Err(Error::Dimension { .. })));
    }

    #[test]
    fn topk_mask_examples() {
        let ninf = f64::NEG_INFINITY;
        assert_eq!(topk_mask(&[2.0, 1.0, 0.0, -1.0], 2).unwrap(), vec![2.0, 1.0, ninf, ninf]);
        assert_eq!(topk_mask(&[3.0, -1.0, 2.0], 3).unwrap(), vec![3.0, -1.0, 2.0]);
        assert_eq!(topk_mask(&[5.0, 5.0, 1.0], 1).unwrap(), vec![5.0, ninf, ninf]);
        assert!(matches!(topk_mask(&[1.0], 0), Err(Error::Config(_))));
        assert!(matches!(topk_mask(&[1.0], 2), Err(Error::Config(_))));
    }

    #[test]
    fn routing_probs_examples() {
        let p = routing_probs(&[2.0, 1.0, 0.0, -1.0], 2).unwrap();
        assert!(approx(&p, &[0.7311, 0.2689, 0.0, 0.0], 1e-4));
        assert_eq!(&p[2..], &[0.0, 0.0]);
        assert_eq!(routing_probs(&[0.1, 0.9, 0.3], 1).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(approx(&routing_probs(&[0.4; 5], 5).unwrap(), &[0.2; 5], 1e-15));
    }

    #[test]
    fn correlation_examples() {
        let same = RepresentativeTokens::new(DenseTensor::filled(&[4, 3], 0.7)).unwrap();
        assert!(approx(&correlation_scores(&[1.0, -2.0, 0.5], &same).unwrap(), &[0.25; 4], 1e-15));
        let basis = RepresentativeTokens::new(DenseTensor::identity(3)).unwrap();
        let c = correlation_scores(&[0.0, 1.0, 0.0], &basis).unwrap();
        assert!(c[1] > c[0] && c[1] > c[2]);
        let reps = RepresentativeTokens::init(5, 3, &mut stream(1, "r")).unwrap();
        assert!(approx(&correlation_scores(&[0.0; 3], &reps).unwrap(), &[0.2; 5], 1e-15));
    }

    #[test]
    fn refine_worked_example() {
        // softmax(g) = [0.6, 0.4] and c = [0.2, 0.8]
        let g = vec![0.0, (0.4f64 / 0.6).ln()];
        let d = refine_from(g, vec![0.2, 0.8], 1, PostMask::Renormalize).unwrap();
        assert!(approx(&d.refined, &[0.4, 0.6], 1e-12));
        assert_eq!(d.experts, vec![1]);
        assert_eq!(d.weights, vec![1.0]);
    }

    #[test]
    fn refine_uniform_correlation_keeps_argmax() {
        let scores = vec![0.3, 1.2, -0.4, 1.1];
        let d = refine_from(scores.clone(), vec![0.25; 4], 1, PostMask::Renormalize).unwrap();
        assert_eq!(d.experts, topk_indices(&scores, 1).unwrap());
    }

    #[test]
    fn refine_full_k_equals_refined() {
        let c = softmax_row(&[0.2, -0.1, 0.7]).unwrap();
        let d = refine_from(vec![1.0, 0.5, -2.0], c, 3, PostMask::Renormalize).unwrap();
        assert!(approx(&d.weights, &d.refined, 1e-15));
    }

    #[test]
    fn softmax_post_mask() {
        let d = refine_from(vec![1.0, 0.0, 0.0], vec![1.0 / 3.0; 3], 2, PostMask::Softmax).unwrap();
        let expect = softmax_row(&[d.refined[0], d.refined[1]]).unwrap();
        assert!(approx(&d.weights, &expect, 1e-15));
    }

    #[test]
    fn dispatch_examples() {
        let d = refine_from(vec![0.0, 2.0, 0.0], vec![1.0 / 3.0; 3], 1, PostMask::Renormalize).unwrap();
        let calls: Vec<Cell<usize>> = (0..3).map(|_| Cell::new(0)).collect();
        let mut experts: Vec<Box<dyn FnMut(&[f64]) -> Vec<f64> + '_>> = (0..3)
            .map(|i| {
                let c = &calls[i];
                Box::new(move |x: &[f64]| {
                    c.set(c.get() + 1);
                    x.iter().map(|v| v * (i + 1) as f64).collect()
                }) as Box<dyn FnMut(&[f64]) -> Vec<f64>>
            })
            .collect();
        assert_eq!(dispatch_combine(&[1.0, 2.0], &d, &mut experts).unwrap(), vec![2.0, 4.0]);
        assert_eq!(calls.iter().map(Cell::get).collect::<Vec<_>>(), vec![0, 1, 0]);

        let half = RoutingDecision {
            experts: vec![0, 2],
            weights: vec![0.5, 0.5],
            scores: vec![0.0; 3],
            correlation: vec![1.0 / 3.0; 3],
            refined: vec![1.0 / 3.0; 3],
        };
        let mut same = vec![|x: &[f64]| x.iter().map(|v| v + 1.0).collect::<Vec<_>>(); 3];
        assert_eq!(dispatch_combine(&[1.0, 3.0], &half, &mut same).unwrap(), vec![2.0, 4.0]);

        let mut ragged: Vec<Box<dyn FnMut(&[f64]) -> Vec<f64>>> = vec![
            Box::new(|_: &[f64]| vec![1.0]),
            Box::new(|_: &[f64]| vec![0.0]),
            Box::new(|_: &[f64]| vec![1.0, 2.0]),
        ];
        assert!(dispatch_combine(&[0.0], &half, &mut ragged).is_err());
    }

    #[test]
    fn six_experts_one_call_per_token() {
        let gate = GateWeights::init(4, 6, &mut stream(2, "g")).unwrap();
        let reps = RepresentativeTokens::init(6, 8, &mut stream(2, "r")).unwrap();
        let counts: Vec<Cell<usize>> = (0..6).map(|_| Cell::new(0)).collect();
        let mut experts: Vec<Box<dyn FnMut(&[f64]) -> Vec<f64> + '_>> = counts
            .iter()
            .map(|c| {
                Box::new(move |x: &[f64]| {
                    c.set(c.get() + 1);
                    x.to_vec()
                }) as Box<dyn FnMut(&[f64]) -> Vec<f64>>
            })
            .collect();
        let mut rng = stream(2, "x");
        for token in 1..=50 {
            let x: Vec<f64> = (0..4).map(|_| crate::requant::uniform(&mut rng, -1.0, 1.0)).collect();
            let h: Vec<f64> = (0..8).map(|_| crate::requant::uniform(&mut rng, -1.0, 1.0)).collect();
            let d = refined_routing(&x, &h, &gate, &reps, 1, PostMask::Renormalize).unwrap();
            dispatch_combine(&x, &d, &mut experts).unwrap();
            assert_eq!(counts.iter().map(Cell::get).sum::<usize>(), token);
        }
    }

    #[test]
    fn balance_endpoints() {
        let n = 4;
        let top1: Vec<usize> = (0..8).map(|i| i % n).collect();
        let probs = vec![vec![0.25; n]; 8];
        assert!((balance_stats(&top1, &probs).unwrap().loss - 1.0).abs() <= 1e-12);
        let mut one = vec![0.0; n];
        one[2] = 1.0;
        let s = balance_stats(&[2; 5], &vec![one; 5]).unwrap();
        assert_eq!(s.loss, n as f64);
        assert!(balance_stats(&[], &[]).is_err());
    }

    #[test]
    fn balance_can_fall_below_one() {
        let top1 = [0, 0, 1];
        let probs = vec![vec![0.51, 0.49], vec![0.51, 0.49], vec![0.0, 1.0]];
        let loss = balance_stats(&top1, &probs).unwrap().loss;
        assert!(loss < 1.0);
    }

    fn random_simplex(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| crate::requant::uniform(rng, -3.0, 3.0)).collect();
        softmax_row(&raw).unwrap()
    }

    #[test]
    fn balance_matches_brute_force() {
        let mut rng = stream(5, "lb");
        for _ in 0..200 {
            let n = 4;
            let t = 1 + (crate::requant::uniform(&mut rng, 0.0, 20.0) as usize);
            let probs: Vec<Vec<f64>> = (0..t).map(|_| random_simplex(&mut rng, n)).collect();
            let top1: Vec<usize> = probs.iter().map(|p| topk_indices(p, 1).unwrap()[0]).collect();
            let mut brute = 0.0;
            for i in 0..n {
                let f = top1.iter().filter(|&&e| e == i).count() as f64 / t as f64;
                let p = probs.iter().map(|r| r[i]).sum::<f64>() / t as f64;
                brute += f * p;
            }
            let loss = balance_stats(&top1, &probs).unwrap().loss;
            assert!((loss - n as f64 * brute).abs() <= 1e-12);
            assert!((0.0..=n as f64).contains(&loss));
        }
    }

    proptest! {
        #[test]
        fn exactly_k_weights_summing_to_one(
            seed in 0u64..10_000, n in 2usize..=8, kf in 0.0f64..1.0, soft in any::<bool>()
        ) {
            let k = 1 + ((kf * n as f64) as usize).min(n - 1);
            let mut rng = stream(seed, "p");
            let scores: Vec<f64> = (0..n).map(|_| crate::requant::uniform(&mut rng, -4.0, 4.0)).collect();
            let c = random_simplex(&mut rng, n);
            let mode = if soft { PostMask::Softmax } else { PostMask::Renormalize };
            let d = refine_from(scores, c, k, mode).unwrap();
            let w = d.dense_weights();
            prop_assert_eq!(w.iter().filter(|&&v| v > 0.0).count(), k);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(d.refined.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((d.refined.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn permutation_equivariance(seed in 0u64..10_000, n in 2usize..=8, k in 1usize..=8) {
            let k = k.min(n);
            let dim = 5;
            let mut rng = stream(seed, "perm");
            let gate = GateWeights::init(dim, n, &mut rng).unwrap();
            let reps = RepresentativeTokens::init(n, 3, &mut rng).unwrap();
            let x: Vec<f64> = (0..dim).map(|_| crate::requant::uniform(&mut rng, -20.0, 20.0)).collect();
            let h: Vec<f64> = (0..3).map(|_| crate::requant::uniform(&mut rng, -20.0, 20.0)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);

            let mut pg = DenseTensor::zeros(&[dim, n]);
            let mut pb = vec![0.0; n];
            let mut pr = DenseTensor::zeros(&[n, 3]);
            for (i, &p) in perm.iter().enumerate() {
                for r in 0..dim {
                    pg.data_mut()[r * n + p] = gate.projection().get2(r, i);
                }
                pb[p] = gate.bias()[i];
                pr.row_mut(p).copy_from_slice(reps.tokens().row(i));
            }
            let pgate = GateWeights::new(pg, pb).unwrap();
            let preps = RepresentativeTokens::new(pr).unwrap();

            let a = refined_routing(&x, &h, &gate, &reps, k, PostMask::Renormalize).unwrap();
            let b = refined_routing(&x, &h, &pgate, &preps, k, PostMask::Renormalize).unwrap();
            let (wa, wb) = (a.dense_weights(), b.dense_weights());
            for i in 0..n {
                prop_assert_eq!(wa[i], wb[perm[i]]);
                prop_assert_eq!(a.refined[i], b.refined[perm[i]]);
            }
        }
    }
}
