use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::TaskConfig;
use crate::error::Result;
use crate::numerics::DenseTensor;
use crate::rng::{stream, Rng};
use crate::side_network::Batch;

/// One split: sequences flattened to `(n * seq_len) x dim` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub x: DenseTensor,
    /// Target-task labels.
    pub labels: Vec<usize>,
    /// Cluster of each sequence, the source-task label.
    pub clusters: Vec<usize>,
    pub seq_len: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn rows(&self, seqs: &[usize]) -> DenseTensor {
        let t = self.seq_len;
        let idx: Vec<usize> = seqs.iter().flat_map(|&s| s * t..(s + 1) * t).collect();
        self.x.gather_rows(&idx)
    }

    /// Target-task batches over `order`, `size` sequences each (the last
    /// may be shorter).
    pub fn batches(&self, order: &[usize], size: usize) -> Vec<Batch> {
        order
            .chunks(size.max(1))
            .map(|c| Batch {
                x: self.rows(c),
                labels: c.iter().map(|&i| self.labels[i]).collect(),
            })
            .collect()
    }

    /// Source-task batches, labelled by cluster.
    pub fn source_batches(&self, size: usize) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.len()).collect();
        order
            .chunks(size.max(1))
            .map(|c| Batch {
                x: self.rows(c),
                labels: c.iter().map(|&i| self.clusters[i]).collect(),
            })
            .collect()
    }

    pub fn in_order(&self, size: usize) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.len()).collect();
        self.batches(&order, size)
    }

    pub fn shuffled(&self, size: usize, rng: &mut Rng) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        self.batches(&order, size)
    }
}

/// Sequence classification with per-cluster labelling rules.
///
/// Every sequence belongs to one cluster and its tokens are the cluster
/// center plus Gaussian noise. Each cluster owns a unit direction; the
/// label bins the projection of the mean token offset onto the direction
/// of the sequence's cluster. Bin edges are the empirical quantiles of the
/// training projections, so classes are balanced. A single shared linear
/// readout cannot fit all clusters at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub centers: DenseTensor,
    /// `clusters x dim` unit rows.
    pub directions: DenseTensor,
    /// `classes - 1` ascending bin edges.
    pub edges: Vec<f64>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

fn unit_rows(rows: usize, dim: usize, scale: f64, rng: &mut Rng) -> Result<DenseTensor> {
    let mut out = DenseTensor::zeros(&[rows, dim]);
    for i in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for (o, x) in out.row_mut(i).iter_mut().zip(v) {
            *o = scale * x / norm;
        }
    }
    Ok(out)
}

struct RawSplit {
    x: Vec<f64>,
    clusters: Vec<usize>,
    projections: Vec<f64>,
}

impl SyntheticTask {
    pub fn generate(config: &TaskConfig, seed: u64) -> Result<Self> {
        let (d, k, c, t) = (config.dim, config.clusters, config.classes, config.seq_len);
        let centers = unit_rows(k, d, config.center_scale, &mut stream(seed, "task.centers"))?;
        let directions = unit_rows(k, d, 1.0, &mut stream(seed, "task.rules"))?;
        let raw = |label: &str, n: usize| -> RawSplit {
            let mut rng = stream(seed, label);
            let noise = Normal::new(0.0, config.token_noise.max(f64::MIN_POSITIVE)).expect("valid");
            let mut x = Vec::with_capacity(n * t * d);
            let mut clusters = Vec::with_capacity(n);
            let mut projections = Vec::with_capacity(n);
            for _ in 0..n {
                let cl = rng.random_range(0..k);
                let mut proj = 0.0;
                for _ in 0..t {
                    for j in 0..d {
                        let z = if config.token_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        proj += z * directions.get2(cl, j) / t as f64;
                        x.push(centers.get2(cl, j) + z);
                    }
                }
                clusters.push(cl);
                projections.push(proj);
            }
            RawSplit { x, clusters, projections }
        };
        let train = raw("task.train", config.train_size);
        let val = raw("task.val", config.val_size);
        let test = raw("task.test", config.test_size);

        let mut sorted = train.projections.clone();
        sorted.sort_by(f64::total_cmp);
        let edges: Vec<f64> = (1..c)
            .map(|i| match sorted.len() {
                0 => 0.0,
                n => sorted[(i * n / c).min(n - 1)],
            })
            .collect();
        let finish = |r: RawSplit| -> Result<Split> {
            let n = r.clusters.len();
            Ok(Split {
                x: DenseTensor::matrix(n * t, d, r.x)?,
                labels: r.projections.iter().map(|&p| edges.partition_point(|&e| e <= p)).collect(),
                clusters: r.clusters,
                seq_len: t,
            })
        };
        Ok(Self {
            train: finish(train)?,
            val: finish(val)?,
            test: finish(test)?,
            centers,
            directions,
            edges,
            config: config.clone(),
        })
    }
}
