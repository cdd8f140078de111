//! Reverse-mode automatic differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records every operation as a node whose operands precede it,
//! so the reversed node list is a valid topological order for the backward
//! sweep. Backward runs once per tape: a second call is rejected, which keeps
//! gradients from silently accumulating twice.
//!
//! All losses are scalars stored as `1 x 1` tensors.

mod optim;

pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Tensor2};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    ConcatRows(Var, Var),
    SoftmaxCrossEntropy { logits: Var, probs: Tensor2, labels: Vec<usize> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    SquaredDistance { features: Var, rows: Vec<usize>, anchors: Tensor2 },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether `backward` has already run on this tape.
    pub fn is_spent(&self) -> bool {
        self.spent
    }

    /// Records a differentiable input (a parameter or a checked input).
    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value.detached(), Op::Leaf, true)
    }

    /// Records a constant. No gradient is ever produced for it.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value.detached(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    /// Gradient of the last backward root with respect to `v`, if `v` is tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor2, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        let tracked = self.tracked(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Relu(x), tracked)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::Dimension(format!(
                "add of {}x{} and {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            )));
        }
        let values = va.values().iter().zip(vb.values()).map(|(x, y)| x + y).collect();
        let value = Tensor2::new(va.rows(), va.cols(), values)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Scale(x, factor), tracked)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_rows(self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::ConcatRows(a, b), tracked))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    ///
    /// Returns the scalar loss and the softmax probabilities of every row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor2)> {
        let z = self.value(logits);
        let (n, k) = z.shape();
        if labels.len() != n {
            return Err(Error::Dimension(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some((row, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
            return Err(Error::Label(format!("label {y} at row {row} is outside [0, {k})")));
        }
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(n * k);
        for (row, &y) in z.row_iter().zip(labels) {
            let lse = log_sum_exp(row);
            loss += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let probs = Tensor2::new(n, k, probs)?;
        let tracked = self.tracked(&[logits]);
        let out = self.push(
            Tensor2::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy { logits, probs: probs.clone(), labels: labels.to_vec() },
            tracked,
        );
        Ok((out, probs))
    }

    /// Mean binary cross-entropy of `sigmoid(logit)` against 0/1 targets,
    /// evaluated as `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.cols() != 1 {
            return Err(Error::Dimension(format!("domain logits must be n x 1, got {}x{}", z.rows(), z.cols())));
        }
        if targets.len() != z.rows() {
            return Err(Error::Dimension(format!("{} targets for {} logits", targets.len(), z.rows())));
        }
        if let Some((row, y)) = targets.iter().enumerate().find(|(_, &y)| y != 0.0 && y != 1.0) {
            return Err(Error::Label(format!("domain label {y} at row {row} is not 0 or 1")));
        }
        let n = targets.len() as f64;
        let loss: f64 = z
            .values()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            Tensor2::scalar(loss / n),
            Op::BceWithLogits { logits, targets: targets.to_vec() },
            tracked,
        ))
    }

    /// `sum_j ||features[rows[j]] - anchors[j]||^2`. Anchors are constants.
    pub fn squared_distance(&mut self, features: Var, rows: &[usize], anchors: &Tensor2) -> Result<Var> {
        let f = self.value(features);
        if anchors.rows() != rows.len() || anchors.cols() != f.cols() {
            return Err(Error::Dimension(format!(
                "{}x{} anchors for {} rows of width {}",
                anchors.rows(),
                anchors.cols(),
                rows.len(),
                f.cols()
            )));
        }
        let mut total = 0.0;
        for (j, &r) in rows.iter().enumerate() {
            if r >= f.rows() {
                return Err(Error::Index(format!("row {r} of a {}-row feature batch", f.rows())));
            }
            total += f.row(r).iter().zip(anchors.row(j)).map(|(a, c)| (a - c).powi(2)).sum::<f64>();
        }
        let tracked = self.tracked(&[features]);
        Ok(self.push(
            Tensor2::scalar(total),
            Op::SquaredDistance { features, rows: rows.to_vec(), anchors: anchors.detached() },
            tracked,
        ))
    }

    /// Back-propagates from the scalar `root`, filling the gradient slot of
    /// every tracked node that `root` depends on.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.spent {
            return Err(Error::State("backward already ran on this tape; record a fresh forward pass".into()));
        }
        let (rows, cols) = self.value(root).shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::Dimension(format!("backward root must be 1x1, got {rows}x{cols}")));
        }
        self.spent = true;
        if !self.nodes[root.0].tracked {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let gt = Tensor2::new(node.value.rows(), node.value.cols(), g.clone())?;
                    if self.nodes[a.0].tracked {
                        let da = gt.matmul(&self.nodes[b.0].value.transpose())?;
                        accumulate(&mut grads, *a, da.values());
                    }
                    if self.nodes[b.0].tracked {
                        let db = self.nodes[a.0].value.transpose().matmul(&gt)?;
                        accumulate(&mut grads, *b, db.values());
                    }
                }
                Op::AddBias(x, b) => {
                    let cols = node.value.cols();
                    if self.nodes[b.0].tracked {
                        let mut db = vec![0.0; cols];
                        for row in g.chunks_exact(cols) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, &db);
                    }
                    accumulate(&mut grads, *x, &g);
                }
                Op::Relu(x) => {
                    let input = self.nodes[x.0].value.values();
                    let dx: Vec<f64> =
                        g.iter().zip(input).map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Scale(x, factor) => {
                    let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::ConcatRows(a, b) => {
                    let split = self.nodes[a.0].value.len();
                    accumulate(&mut grads, *a, &g[..split]);
                    accumulate(&mut grads, *b, &g[split..]);
                }
                Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                    let (n, k) = probs.shape();
                    let scale = g[0] / n as f64;
                    let mut dz: Vec<f64> = probs.values().iter().map(|p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        dz[i * k + y] -= scale;
                    }
                    accumulate(&mut grads, *logits, &dz);
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.nodes[logits.0].value.values();
                    let scale = g[0] / targets.len() as f64;
                    let dz: Vec<f64> = z.iter().zip(targets).map(|(&z, &y)| (sigmoid(z) - y) * scale).collect();
                    accumulate(&mut grads, *logits, &dz);
                }
                Op::SquaredDistance { features, rows, anchors } => {
                    let f = &self.nodes[features.0].value;
                    let mut df = vec![0.0; f.len()];
                    let d = f.cols();
                    for (j, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            df[r * d + c] += 2.0 * g[0] * (f.get(r, c) - anchors.get(j, c));
                        }
                    }
                    accumulate(&mut grads, *features, &df);
                }
            }
            self.nodes[idx].value.set_grad(g)?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

/// Logistic function evaluated without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
