use serde::{Deserialize, Serialize};

use super::kernels::{
    cross_entropy_grad, cross_entropy_loss, gelu, gelu_grad, layer_norm, layer_norm_backward,
    matmul, softmax_row, stable_sum,
};
use super::tensor::DenseTensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the selected entries of a row are turned into combination weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    /// Divide each selected value by the sum of the selected values.
    #[default]
    Renormalize,
    /// Softmax over the selected values, the rest treated as `-inf`.
    Softmax,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Sum(Var),
    MeanGroups { x: Var, group: usize },
    MixTokens { w: Var, x: Var, seq_len: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    ScaleRowsByEntry { x: Var, w: Var, idx: Vec<usize>, col: usize },
    Select { g: Var, mask: Vec<bool>, mode: SelectMode },
}

#[derive(Debug)]
struct Node {
    value: DenseTensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of primitive operations.
///
/// Backward replays the record in exact reverse order. A tape belongs to one
/// training loop; build a fresh one per step.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Result of [`GradTape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &DenseTensor) -> DenseTensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| DenseTensor::zeros(like.shape()))
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: DenseTensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: DenseTensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: DenseTensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), &self.value(b).transpose())?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulBt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds the vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let c = av.cols();
        if bv.len() != c {
            return Err(Error::dim("add_row", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    /// Linear layer `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scaled(c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(softmax_row(av.row(i))?);
        }
        let out = DenseTensor::new(av.shape().to_vec(), out)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let loss = cross_entropy_loss(self.value(logits), labels)?;
        let ng = self.ng(logits);
        Ok(self.push(
            DenseTensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(DenseTensor::scalar(s), Op::Sum(a), ng)
    }

    /// Mean over consecutive blocks of `group` rows.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if group == 0 || r % group != 0 {
            return Err(Error::dim("mean_groups", xv.shape(), &[group]));
        }
        let g = r / group;
        let mut out = vec![0.0; g * c];
        for b in 0..g {
            let o = &mut out[b * c..(b + 1) * c];
            for t in 0..group {
                for (acc, v) in o.iter_mut().zip(xv.row(b * group + t)) {
                    *acc += v;
                }
            }
            for v in o.iter_mut() {
                *v /= group as f64;
            }
        }
        let out = DenseTensor::matrix(g, c, out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MeanGroups { x, group }, ng))
    }

    /// Token mixing within each sequence: `out_b = w · x_b` for every block
    /// `x_b` of `seq_len` rows.
    pub fn mix_tokens(&mut self, w: Var, x: Var, seq_len: usize) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        if wv.dims2() != (seq_len, seq_len) || seq_len == 0 || xv.rows() % seq_len != 0 {
            return Err(Error::dim("mix_tokens", wv.shape(), xv.shape()));
        }
        let c = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for b in 0..xv.rows() / seq_len {
            for t in 0..seq_len {
                let o = &mut out[(b * seq_len + t) * c..(b * seq_len + t + 1) * c];
                for s in 0..seq_len {
                    let wts = wv.get2(t, s);
                    for (acc, v) in o.iter_mut().zip(xv.row(b * seq_len + s)) {
                        *acc += wts * v;
                    }
                }
            }
        }
        let out = DenseTensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(w) || self.ng(x);
        Ok(self.push(out, Op::MixTokens { w, x, seq_len }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::Index {
                what: "row",
                index: bad,
                bound: xv.rows(),
            });
        }
        let out = xv.gather_rows(idx);
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Zeros of `rows × cols` with row `r` of `x` added into row `idx[r]`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if idx.len() != xv.rows() {
            return Err(Error::dim("scatter_add_rows", xv.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "row",
                index: bad,
                bound: rows,
            });
        }
        let c = xv.cols();
        let mut out = DenseTensor::zeros(&[rows, c]);
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::ScatterAddRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Row `r` of `x` multiplied by the scalar `w[idx[r], col]`.
    pub fn scale_rows_by_entry(&mut self, x: Var, w: Var, idx: &[usize], col: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if idx.len() != xv.rows() || col >= wv.cols() {
            return Err(Error::dim("scale_rows_by_entry", xv.shape(), wv.shape()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= wv.rows()) {
            return Err(Error::Index {
                what: "row",
                index: bad,
                bound: wv.rows(),
            });
        }
        let mut out = xv.clone();
        for (r, &i) in idx.iter().enumerate() {
            let s = wv.get2(i, col);
            for v in out.row_mut(r) {
                *v *= s;
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            out,
            Op::ScaleRowsByEntry {
                x,
                w,
                idx: idx.to_vec(),
                col,
            },
            ng,
        ))
    }

    /// Keeps the entries where `mask` is set and normalizes them per row;
    /// everything else becomes 0. The selection itself is treated as a
    /// constant by backward.
    pub fn select(&mut self, g: Var, mask: &[bool], mode: SelectMode) -> Result<Var> {
        let gv = self.value(g);
        let (r, c) = gv.dims2();
        if mask.len() != r * c {
            return Err(Error::dim("select", gv.shape(), &[mask.len()]));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = gv.row(i);
            let m = &mask[i * c..(i + 1) * c];
            let o = &mut out[i * c..(i + 1) * c];
            match mode {
                SelectMode::Renormalize => {
                    let picked: Vec<f64> = (0..c).filter(|&j| m[j]).map(|j| row[j]).collect();
                    let total = stable_sum(&picked);
                    if !(total > 0.0) {
                        return Err(Error::numeric(format!(
                            "selected routing mass {total} is not positive"
                        )));
                    }
                    for j in (0..c).filter(|&j| m[j]) {
                        o[j] = row[j] / total;
                    }
                }
                SelectMode::Softmax => {
                    let masked: Vec<f64> = (0..c)
                        .map(|j| if m[j] { row[j] } else { f64::NEG_INFINITY })
                        .collect();
                    o.copy_from_slice(&softmax_row(&masked)?);
                }
            }
        }
        let out = DenseTensor::new(gv.shape().to_vec(), out)?;
        let ng = self.ng(g);
        Ok(self.push(
            out,
            Op::Select {
                g,
                mask: mask.to_vec(),
                mode,
            },
            ng,
        ))
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.value(loss).shape(), &[1]));
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        grads[loss.0] = Some(DenseTensor::filled(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dout) = grads[i].take() else { continue };
            visited.push(i);
            self.backward_node(node, &dout, &mut grads)?;
            grads[i] = Some(dout);
        }
        Ok(Gradients { grads, visited })
    }

    fn acc(&self, grads: &mut [Option<DenseTensor>], v: Var, g: DenseTensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, dout: &DenseTensor, grads: &mut [Option<DenseTensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let g = matmul(dout, &bv.transpose())?;
                    self.acc(grads, *a, g.reshape(av.shape().to_vec())?);
                }
                if self.ng(*b) {
                    let g = matmul(&av.transpose(), dout)?;
                    self.acc(grads, *b, g.reshape(bv.shape().to_vec())?);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let g = matmul(dout, bv)?;
                    self.acc(grads, *a, g.reshape(av.shape().to_vec())?);
                }
                if self.ng(*b) {
                    let g = matmul(&dout.transpose(), av)?;
                    self.acc(grads, *b, g.reshape(bv.shape().to_vec())?);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, dout.clone());
                self.acc(grads, *b, dout.clone());
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, dout.clone());
                if self.ng(*bias) {
                    let c = dout.cols();
                    let mut db = vec![0.0; c];
                    for i in 0..dout.rows() {
                        for (d, v) in db.iter_mut().zip(dout.row(i)) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.acc(grads, *bias, DenseTensor::new(shape, db)?);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, dout.mul(self.value(*b))?);
                }
                if self.ng(*b) {
                    self.acc(grads, *b, dout.mul(self.value(*a))?);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, dout.scaled(*c)),
            Op::Gelu(a) => {
                let d = self.value(*a).map(gelu_grad).mul(dout)?;
                self.acc(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (dx, dg, db) = layer_norm_backward(self.value(*x), self.value(*gamma), *eps, dout)?;
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dg);
                self.acc(grads, *beta, db);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = y.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let dr = dout.row(i);
                    let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    for (j, v) in d.row_mut(i).iter_mut().enumerate() {
                        *v = yr[j] * (dr[j] - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::CrossEntropy { logits, labels } => {
                let g = cross_entropy_grad(self.value(*logits), labels)?;
                self.acc(grads, *logits, g.scaled(dout.data()[0]));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, DenseTensor::filled(&shape, dout.data()[0]));
            }
            Op::MeanGroups { x, group } => {
                let xv = self.value(*x);
                let mut d = DenseTensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    let src = dout.row(r / group);
                    for (o, v) in d.row_mut(r).iter_mut().zip(src) {
                        *o = v / *group as f64;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::MixTokens { w, x, seq_len } => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let t_len = *seq_len;
                let blocks = xv.rows() / t_len;
                if self.ng(*x) {
                    let mut dx = DenseTensor::zeros(xv.shape());
                    for b in 0..blocks {
                        for s in 0..t_len {
                            let o = dx.row_mut(b * t_len + s);
                            for t in 0..t_len {
                                let wts = wv.get2(t, s);
                                for (acc, v) in o.iter_mut().zip(dout.row(b * t_len + t)) {
                                    *acc += wts * v;
                                }
                            }
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = DenseTensor::zeros(wv.shape());
                    for b in 0..blocks {
                        for t in 0..t_len {
                            for s in 0..t_len {
                                let dot: f64 = dout
                                    .row(b * t_len + t)
                                    .iter()
                                    .zip(xv.row(b * t_len + s))
                                    .map(|(p, q)| p * q)
                                    .sum();
                                dw.data_mut()[t * t_len + s] += dot;
                            }
                        }
                    }
                    self.acc(grads, *w, dw);
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut d = DenseTensor::zeros(xv.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(dout.row(r)) {
                        *o += v;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::ScatterAddRows { x, idx } => {
                let xv = self.value(*x);
                let d = dout.gather_rows(idx).reshape(xv.shape().to_vec())?;
                self.acc(grads, *x, d);
            }
            Op::ScaleRowsByEntry { x, w, idx, col } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.ng(*x) {
                    let mut dx = dout.clone();
                    for (r, &i) in idx.iter().enumerate() {
                        let s = wv.get2(i, *col);
                        for v in dx.row_mut(r) {
                            *v *= s;
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = DenseTensor::zeros(wv.shape());
                    let c = wv.cols();
                    for (r, &i) in idx.iter().enumerate() {
                        let dot: f64 = dout.row(r).iter().zip(xv.row(r)).map(|(p, q)| p * q).sum();
                        dw.data_mut()[i * c + col] += dot;
                    }
                    self.acc(grads, *w, dw);
                }
            }
            Op::Select { g, mask, mode } => {
                let gv = self.value(*g);
                let y = &node.value;
                let c = y.cols();
                let mut d = DenseTensor::zeros(gv.shape());
                for i in 0..y.rows() {
                    let m = &mask[i * c..(i + 1) * c];
                    let (yr, dr) = (y.row(i), dout.row(i));
                    let dot: f64 = (0..c).filter(|&j| m[j]).map(|j| yr[j] * dr[j]).sum();
                    let row = d.row_mut(i);
                    match mode {
                        SelectMode::Renormalize => {
                            let picked: Vec<f64> =
                                (0..c).filter(|&j| m[j]).map(|j| gv.row(i)[j]).collect();
                            let total = stable_sum(&picked);
                            for j in (0..c).filter(|&j| m[j]) {
                                row[j] = (dr[j] - dot) / total;
                            }
                        }
                        SelectMode::Softmax => {
                            for j in (0..c).filter(|&j| m[j]) {
                                row[j] = yr[j] * (dr[j] - dot);
                            }
                        }
                    }
                }
                self.acc(grads, *g, d);
            }
        }
        Ok(())
    }
}
