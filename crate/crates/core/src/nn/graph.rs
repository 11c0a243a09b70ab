//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! reverse of insertion order is a valid topological order for `backward`.
//! Handles ([`Var`]) are plain indices into the tape and are only meaningful
//! for the graph that created them.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Floor applied to every logarithm argument.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a · bᵀ` for `a: [n,k]`, `b: [m,k]`.
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Var, Var),
    Sum(Var),
    Mean(Var),
    WeightedNll {
        probs: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
    SquaredError {
        pred: Var,
        target: Vec<f64>,
        scale: f64,
    },
    KlStdNormal {
        mu: Var,
        logvar: Var,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted (parameters, or inputs for input-gradient methods).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul inner dimensions differ: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; n * m];
        gemm(false, true, n, m, k, self.value(a).data(), self.value(b).data(), 0.0, &mut out);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMulNt(a, b), rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        let b = self.value(bias).data();
        if b.len() != m {
            return Err(Error::contract(format!(
                "bias of width {} for {m} columns",
                b.len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::AddBias(x, bias), rg))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::contract(format!(
                "shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = map(self.value(a), |x| x * c);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::exp);
        let rg = self.needs(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), sigmoid);
        let rg = self.needs(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(t.cols().max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.needs(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims(a);
        if start >= end || end > m {
            return Err(Error::contract(format!(
                "column slice {start}..{end} out of 0..{m}"
            )));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&src[i * m + start..i * m + end]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![n, end - start], out),
            Op::SliceCols(a, start),
            rg,
        ))
    }

    /// `[a | b]` along the feature axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ma) = self.dims(a);
        let (nb, mb) = self.dims(b);
        if n != nb {
            return Err(Error::contract(format!("concat of {n} and {nb} rows")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            out.extend_from_slice(&da[i * ma..(i + 1) * ma]);
            out.extend_from_slice(&db[i * mb..(i + 1) * mb]);
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![n, ma + mb], out),
            Op::ConcatCols(a, b),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Batch mean of `weights[y] · −ln p[y]` over rows of probabilities.
    pub fn weighted_nll(&mut self, probs: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let (n, k) = self.dims(probs);
        if labels.len() != n {
            return Err(Error::contract(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        if weights.len() != k {
            return Err(Error::contract(format!(
                "{} class weights for {k} classes",
                weights.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let p = self.value(probs).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -weights[y] * p[i * k + y].max(LOG_FLOOR).ln())
            .sum();
        let rg = self.needs(&[probs]);
        Ok(self.push(
            Tensor::scalar(total / n.max(1) as f64),
            Op::WeightedNll {
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Binary cross-entropy summed over features and averaged over rows.
    pub fn bce(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if t.len() != target.len() {
            return Err(Error::contract("bce target size mismatch"));
        }
        if target.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract(
                "binary cross-entropy needs targets in [0, 1]",
            ));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &x)| bce_term(p, x))
            .sum();
        let n = t.rows().max(1) as f64;
        let rg = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// `scale · Σ (pred − target)²` summed over features, averaged over rows.
    pub fn squared_error(&mut self, pred: Var, target: &[f64], scale: f64) -> Result<Var> {
        let t = self.value(pred);
        if t.len() != target.len() {
            return Err(Error::contract("squared error target size mismatch"));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(target)
            .map(|(p, x)| (p - x) * (p - x))
            .sum();
        let n = t.rows().max(1) as f64;
        let rg = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(scale * total / n),
            Op::SquaredError {
                pred,
                target: target.to_vec(),
                scale,
            },
            rg,
        ))
    }

    /// KL(N(mu, exp(logvar)) ‖ N(0, I)) summed over latent axes, averaged over rows.
    pub fn kl_std_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        self.same_shape(mu, logvar)?;
        let (m, lv) = (self.value(mu), self.value(logvar));
        let total: f64 = m
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&u, &l)| -0.5 * (1.0 + l - u * u - l.exp()))
            .sum();
        let n = m.rows().max(1) as f64;
        let rg = self.needs(&[mu, logvar]);
        Ok(self.push(Tensor::scalar(total / n), Op::KlStdNormal { mu, logvar }, rg))
    }

    /// Populates gradients of `loss` with respect to every node that requires
    /// them. Earlier gradients are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), delta)),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let op = self.nodes[i].op.clone();
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::MatMulNt(a, b) => {
                let (n, k) = self.dims(a);
                let (m, _) = self.dims(b);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; n * k];
                    gemm(false, false, n, k, m, gd, self.value(b).data(), 0.0, &mut da);
                    self.accumulate(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; m * k];
                    gemm(true, false, m, k, n, gd, self.value(a).data(), 0.0, &mut db);
                    self.accumulate(b, db);
                }
            }
            Op::AddBias(x, bias) => {
                let m = self.value(bias).len();
                self.accumulate(x, gd.to_vec());
                let mut db = vec![0.0; m];
                for row in gd.chunks(m.max(1)) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                self.accumulate(bias, db);
            }
            Op::Add(a, b) => {
                self.accumulate(a, gd.to_vec());
                self.accumulate(b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let da = gd.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Scale(a, c) => self.accumulate(a, gd.iter().map(|g| g * c).collect()),
            Op::Exp(a) => {
                let out = self.nodes[i].value.data();
                let d = gd.iter().zip(out).map(|(g, e)| g * e).collect();
                self.accumulate(a, d);
            }
            Op::Relu(a) => {
                let out = self.nodes[i].value.data();
                let d = gd
                    .iter()
                    .zip(out)
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, d);
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[i].value.data();
                let d = gd.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(a, d);
            }
            Op::Softmax(a) => {
                let out = &self.nodes[i].value;
                let k = out.cols().max(1);
                let mut d = vec![0.0; gd.len()];
                for ((drow, grow), prow) in d
                    .chunks_mut(k)
                    .zip(gd.chunks(k))
                    .zip(out.data().chunks(k))
                {
                    let s: f64 = grow.iter().zip(prow).map(|(g, p)| g * p).sum();
                    for ((dv, gv), pv) in drow.iter_mut().zip(grow).zip(prow) {
                        *dv = pv * (gv - s);
                    }
                }
                self.accumulate(a, d);
            }
            Op::SliceCols(a, start) => {
                let (n, m) = self.dims(a);
                let w = g.cols();
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    d[r * m + start..r * m + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.accumulate(a, d);
            }
            Op::ConcatCols(a, b) => {
                let (n, ma) = self.dims(a);
                let (_, mb) = self.dims(b);
                let w = ma + mb;
                let mut da = Vec::with_capacity(n * ma);
                let mut db = Vec::with_capacity(n * mb);
                for r in 0..n {
                    da.extend_from_slice(&gd[r * w..r * w + ma]);
                    db.extend_from_slice(&gd[r * w + ma..(r + 1) * w]);
                }
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Sum(a) => {
                let n = self.value(a).len();
                self.accumulate(a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(a).len();
                self.accumulate(a, vec![gd[0] / n.max(1) as f64; n]);
            }
            Op::WeightedNll {
                probs,
                labels,
                weights,
            } => {
                let (n, k) = self.dims(probs);
                let p = self.value(probs).data();
                let mut d = vec![0.0; n * k];
                for (r, &y) in labels.iter().enumerate() {
                    let pv = p[r * k + y];
                    if pv > LOG_FLOOR {
                        d[r * k + y] = -gd[0] * weights[y] / (pv * n as f64);
                    }
                }
                self.accumulate(probs, d);
            }
            Op::Bce { pred, target } => {
                let t = self.value(pred);
                let n = t.rows().max(1) as f64;
                let d = t
                    .data()
                    .iter()
                    .zip(&target)
                    .map(|(&p, &x)| gd[0] * bce_grad(p, x) / n)
                    .collect();
                self.accumulate(pred, d);
            }
            Op::SquaredError {
                pred,
                target,
                scale,
            } => {
                let t = self.value(pred);
                let n = t.rows().max(1) as f64;
                let d = t
                    .data()
                    .iter()
                    .zip(&target)
                    .map(|(p, x)| gd[0] * 2.0 * scale * (p - x) / n)
                    .collect();
                self.accumulate(pred, d);
            }
            Op::KlStdNormal { mu, logvar } => {
                let n = self.value(mu).rows().max(1) as f64;
                let dmu = self.value(mu).data().iter().map(|u| gd[0] * u / n).collect();
                let dlv = self
                    .value(logvar)
                    .data()
                    .iter()
                    .map(|l| gd[0] * 0.5 * (l.exp() - 1.0) / n)
                    .collect();
                self.accumulate(mu, dmu);
                self.accumulate(logvar, dlv);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn bce_term(p: f64, x: f64) -> f64 {
    -(x * p.max(LOG_FLOOR).ln() + (1.0 - x) * (1.0 - p).max(LOG_FLOOR).ln())
}

fn bce_grad(p: f64, x: f64) -> f64 {
    let mut d = 0.0;
    if p > LOG_FLOOR {
        d -= x / p;
    }
    if 1.0 - p > LOG_FLOOR {
        d += (1.0 - x) / (1.0 - p);
    }
    d
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient() {
        // loss = w · x with x = 3
        let mut g = Graph::new();
        let w = g.variable(Tensor::row(vec![1.5]));
        let x = g.constant(Tensor::row(vec![3.0]));
        let y = g.mul(w, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().item(), 3.0);
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(loss).unwrap().item(), 1.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::row(vec![0.0]));
        let s = g.sigmoid(w);
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().item(), 0.25);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        // loss = sum(w * w + w) → 2w + 1
        let mut g = Graph::new();
        let w = g.variable(Tensor::row(vec![2.0, -1.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.add(sq, w).unwrap();
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[5.0, -1.0]);
        assert_eq!(g.grad(w).unwrap().shape(), g.value(w).shape());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::row(vec![1.0, 2.0]));
        let e = g.exp(w);
        assert!(matches!(g.backward(e), Err(Error::Contract(_))));
    }

    #[test]
    fn nll_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::row(vec![0.5, 0.5]));
        assert!(matches!(
            g.weighted_nll(p, &[2], &[1.0, 1.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -50.0, 0.0, 700.0]).unwrap());
        let p = g.softmax(x);
        for r in 0..2 {
            let row = g.value(p).row_slice(r);
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
