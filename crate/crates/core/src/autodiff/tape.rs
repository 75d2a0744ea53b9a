//! Operation tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and the ids of
//! its inputs, so node ids are already a topological order. `backward` walks
//! the tape in reverse and accumulates vector-Jacobian products into the
//! inputs that require gradients.

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SquaredL2RowMean {
        a: Var,
        b: Var,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Lerp {
        a: Var,
        b: Var,
        weight: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::Mul { a, b }
            | Op::SquaredL2RowMean { a, b }
            | Op::Lerp { a, b, .. } => vec![a, b],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::Scale { x, .. } | Op::Sum { x } | Op::Relu { x } | Op::GatherRows { x, .. } => {
                vec![x]
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Direct inputs of the op that produced `var`.
    pub fn inputs_of(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, requires_grad, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: [{m}x{k}] x [{k2}x{n}]"),
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.record(value, Op::MatMul { a, b }))
    }

    /// Adds a length-`d` bias to every row of an `N x d` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("add_bias")?;
        if self.value(bias).shape() != [d] {
            return Err(Error::dim(
                "add_bias",
                format!("bias shape {:?} for {d} columns", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        Ok(self.record(value, Op::AddBias { x, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.record(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.record(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let out = src.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), out).expect("shape preserved");
        self.record(value, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum { x })
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let out = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), out).expect("shape preserved");
        self.record(value, Op::Relu { x })
    }

    /// Training-mode batch normalization over the rows of an `N x d` matrix.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).dims2("batch_norm")?;
        if n < 2 {
            return Err(Error::DegenerateBatch {
                op: "batch_norm",
                rows: n,
            });
        }
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("batch_norm eps must be > 0, got {eps}")));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [d] {
                return Err(Error::dim(
                    "batch_norm",
                    format!("{name} shape {:?} for {d} features", self.value(p).shape()),
                ));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_n = 1.0 / n as f64;
        let mut mean = vec![0.0; d];
        for row in xs.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_n);
        let mut var = vec![0.0; d];
        for row in xs.chunks_exact(d) {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v * inv_n + eps).sqrt()).collect();
        let mut x_hat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (xs[i * d + j] - mean[j]) * inv_std[j];
                x_hat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        Ok(self.record(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if n == 0 {
            return Err(Error::dim("softmax_cross_entropy", "empty batch"));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Label {
                row,
                label,
                num_classes: c,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (i, row) in z.chunks_exact(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= denom);
            total += max + denom.ln() - row[labels[i]];
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.record(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `(1/N) * sum_i ||a_i - b_i||^2` over the rows of two `N x d` matrices.
    pub fn squared_l2_rowmean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("squared_l2_rowmean", a, b)?;
        let (n, _) = self.value(a).dims2("squared_l2_rowmean")?;
        if n == 0 {
            return Err(Error::dim("squared_l2_rowmean", "empty batch"));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.record(Tensor::scalar(s / n as f64), Op::SquaredL2RowMean { a, b }))
    }

    /// Row `r` of the output is row `index[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims2("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim(
                "gather_rows",
                format!("row index {bad} out of range for {n} rows"),
            ));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(src.row(i));
        }
        let value = Tensor::matrix(index.len(), d, out)?;
        Ok(self.record(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// `weight * a + (1 - weight) * b`, elementwise.
    pub fn lerp(&mut self, a: Var, b: Var, weight: f64) -> Result<Var> {
        self.same_shape("lerp", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| {
            weight * x + (1.0 - weight) * y
        });
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.record(value, Op::Lerp { a, b, weight }))
    }

    /// Reverse-mode sweep from a scalar `loss` in tape order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let order: Vec<Var> = (0..=loss.0).rev().map(Var).collect();
        self.backward_unchecked(loss, &order)
    }

    /// Reverse sweep in a caller-chosen order.
    ///
    /// `order` must list every node up to and including `loss` exactly once,
    /// with each node appearing after all nodes that consume it.
    pub fn backward_in_order(&self, loss: Var, order: &[Var]) -> Result<Gradients> {
        let count = loss.0 + 1;
        if order.len() != count {
            return Err(Error::Contract(format!(
                "order lists {} nodes, tape prefix has {count}",
                order.len()
            )));
        }
        let mut position = vec![usize::MAX; count];
        for (pos, v) in order.iter().enumerate() {
            if v.0 >= count || position[v.0] != usize::MAX {
                return Err(Error::Contract(format!("order repeats or overruns at {v:?}")));
            }
            position[v.0] = pos;
        }
        for (k, node) in self.nodes[..count].iter().enumerate() {
            for input in node.op.inputs() {
                if position[input.0] < position[k] {
                    return Err(Error::Contract(format!(
                        "node {} visited before its consumer {k}",
                        input.0
                    )));
                }
            }
        }
        self.backward_unchecked(loss, order)
    }

    fn backward_unchecked(&self, loss: Var, order: &[Var]) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for &var in order {
            let node = &self.nodes[var.0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[var.0].take() else {
                continue;
            };
            for (input, contribution) in self.vjp(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[var.0] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::MatMul { a, b } => {
                let (m, k) = self.value(a).dims2("matmul").expect("recorded");
                let n = self.value(b).shape()[1];
                let av = self.value(a).data();
                let bv = self.value(b).data();
                // dA = G * B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                // dB = A^T * G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += aip * gv;
                        }
                    }
                }
                vec![(a, da), (b, db)]
            }
            &Op::AddBias { x, bias } => {
                let d = self.value(bias).len();
                let mut db = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    db.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                }
                vec![(x, g.to_vec()), (bias, db)]
            }
            &Op::Add { a, b } => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Mul { a, b } => {
                let da = zip_map(g, self.value(b).data(), |x, y| x * y);
                let db = zip_map(g, self.value(a).data(), |x, y| x * y);
                vec![(a, da), (b, db)]
            }
            &Op::Scale { x, factor } => vec![(x, g.iter().map(|v| v * factor).collect())],
            &Op::Sum { x } => vec![(x, vec![g[0]; self.value(x).len()])],
            &Op::Relu { x } => {
                let dx = zip_map(g, self.value(x).data(), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                vec![(x, dx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let (n, d) = self.value(*x).dims2("batch_norm").expect("recorded");
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        dgamma[j] += g[i * d + j] * x_hat[i * d + j];
                        dbeta[j] += g[i * d + j];
                    }
                }
                // dx = inv_std/N * (N*dxh - sum(dxh) - x_hat*sum(dxh*x_hat)), dxh = g*gamma
                let nf = n as f64;
                let mut dx = vec![0.0; n * d];
                for j in 0..d {
                    let sum_dxh = dbeta[j] * gam[j];
                    let sum_dxh_xh = dgamma[j] * gam[j];
                    for i in 0..n {
                        let dxh = g[i * d + j] * gam[j];
                        dx[i * d + j] = inv_std[j] / nf
                            * (nf * dxh - sum_dxh - x_hat[i * d + j] * sum_dxh_xh);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * c + l] -= scale;
                }
                vec![(*logits, dz)]
            }
            &Op::SquaredL2RowMean { a, b } => {
                let n = self.value(a).shape()[0] as f64;
                let k = 2.0 * g[0] / n;
                let da = zip_map(self.value(a).data(), self.value(b).data(), |x, y| k * (x - y));
                let db = da.iter().map(|v| -v).collect();
                vec![(a, da), (b, db)]
            }
            Op::GatherRows { x, index } => {
                let src = self.value(*x);
                let d = src.shape()[1];
                let mut dx = vec![0.0; src.len()];
                for (r, &i) in index.iter().enumerate() {
                    for (acc, v) in dx[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *acc += v;
                    }
                }
                vec![(*x, dx)]
            }
            &Op::Lerp { a, b, weight } => {
                let da = g.iter().map(|v| v * weight).collect();
                let db = g.iter().map(|v| v * (1.0 - weight)).collect();
                vec![(a, da), (b, db)]
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}
