//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its value and the data its
//! backward rule needs. Nodes are created in topological order, so the
//! backward sweep is a single reverse pass over the node list. Adjoints of
//! interior nodes are released as soon as they have been propagated; only
//! leaf gradients survive into [`Gradients`].

use super::ops::{self, RunningStats};
use super::{KernelError, Mode, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Relu { a: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Sum { a: Var },
    Mse { pred: Var, target: Vec<f64> },
    /// Shared by batch norm (both modes) and layer norm; `per_row` selects
    /// along which axis the statistics were taken, `batch_stats` whether they
    /// depend on `x` (false for eval-mode batch norm).
    Norm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        per_row: bool,
        batch_stats: bool,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Relu { .. } => "relu",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mse { .. } => "mse",
            Op::Norm { per_row: true, .. } => "layer_norm",
            Op::Norm { .. } => "batch_norm",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::AddBias { a, bias } => vec![a, bias],
            Op::Relu { a } | Op::Scale { a, .. } | Op::Sum { a } => vec![a],
            Op::Mse { pred, .. } => vec![pred],
            Op::Norm { x, scale, shift, .. } => vec![x, scale, shift],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-feature statistics of a train-mode batch-norm call, to be folded into
/// the owner's [`RunningStats`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

impl BatchStats {
    pub fn apply_to(&self, stats: &mut RunningStats) {
        stats.update(&self.mean, &self.var, self.rows);
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> KernelError {
    KernelError::DimensionMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Handle of the node at `index`, if it exists.
    pub fn var(&self, index: usize) -> Option<Var> {
        (index < self.nodes.len()).then_some(Var(index))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    /// Smallest `|input|` over all recorded relu nodes, `None` without relus.
    pub fn min_abs_relu_input(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { a } => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.abs()))
            .reduce(f64::min)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let mut value = ta.clone();
        value.add_assign(tb);
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Adds a length-`f` bias to every row of an `n x f` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, KernelError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let f = ta.cols();
        if tb.len() != f || ta.shape().len() != 2 {
            return Err(mismatch("add_bias", ta, tb));
        }
        let mut value = ta.clone();
        let bd = tb.data();
        for row in value.data_mut().chunks_exact_mut(f) {
            for (v, b) in row.iter_mut().zip(bd) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddBias { a, bias }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = ops::relu(self.value(a));
        self.push(value, Op::Relu { a })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale { a, c })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    /// Mean squared error between `pred` and a constant target of equal length.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var, KernelError> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(KernelError::DimensionMismatch {
                op: "mse",
                left: p.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let loss = p
            .data()
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / target.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Batch normalization. In train mode the batch statistics are returned so
    /// the caller can update its running statistics; `stats` is only read in
    /// eval mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: Mode,
        stats: &RunningStats,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>), KernelError> {
        let (xv, sv, hv) = (self.value(x), self.value(scale), self.value(shift));
        match mode {
            Mode::Train => {
                let rows = xv.rows();
                let out = ops::batch_norm_train_forward(xv, sv, hv, eps)?;
                let var = self.push(
                    out.y,
                    Op::Norm {
                        x,
                        scale,
                        shift,
                        xhat: out.xhat,
                        inv_std: out.inv_std,
                        per_row: false,
                        batch_stats: true,
                    },
                );
                Ok((
                    var,
                    Some(BatchStats {
                        mean: out.mean,
                        var: out.var,
                        rows,
                    }),
                ))
            }
            Mode::Eval => {
                let out = ops::batch_norm_eval_forward(xv, sv, hv, stats, eps)?;
                let var = self.push(
                    out.y,
                    Op::Norm {
                        x,
                        scale,
                        shift,
                        xhat: out.xhat,
                        inv_std: out.inv_std,
                        per_row: false,
                        batch_stats: false,
                    },
                );
                Ok((var, None))
            }
        }
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var, KernelError> {
        let out = ops::layer_norm_forward(self.value(x), self.value(scale), self.value(shift), eps)?;
        Ok(self.push(
            out.y,
            Op::Norm {
                x,
                scale,
                shift,
                xhat: out.xhat,
                inv_std: out.inv_std,
                per_row: true,
                batch_stats: true,
            },
        ))
    }

    /// Reverse sweep from a scalar node. Adjoints are summed over fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients, KernelError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(KernelError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(g) = adj[idx].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaves[idx] = Some(g),
                op => self.propagate(op, &node.value, g, &mut adj),
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, adj: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.wants(a) {
                    let (d, _, _) = ops::gemm(g.data(), m, n, false, tb.data(), k, n, true);
                    self.accumulate(adj, a, Tensor::matrix(m, k, d).unwrap());
                }
                if self.wants(b) {
                    let (d, _, _) = ops::gemm(ta.data(), m, k, true, g.data(), m, n, false);
                    self.accumulate(adj, b, Tensor::matrix(k, n, d).unwrap());
                }
            }
            Op::Add { a, b } => {
                if self.wants(b) {
                    self.accumulate(adj, b, g.clone());
                }
                self.accumulate(adj, a, g);
            }
            Op::AddBias { a, bias } => {
                if self.wants(bias) {
                    let tb = self.value(bias);
                    let f = tb.len();
                    let mut db = vec![0.0; f];
                    for row in g.data().chunks_exact(f) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(adj, bias, Tensor::new(tb.shape().to_vec(), db).unwrap());
                }
                self.accumulate(adj, a, g);
            }
            Op::Relu { a } => {
                let mut g = g;
                for (d, &y) in g.data_mut().iter_mut().zip(out.data()) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(adj, a, g);
            }
            Op::Mul { a, b } => {
                if self.wants(a) {
                    let mut d = g.clone();
                    for (x, y) in d.data_mut().iter_mut().zip(self.value(b).data()) {
                        *x *= y;
                    }
                    self.accumulate(adj, a, d);
                }
                if self.wants(b) {
                    let mut d = g;
                    for (x, y) in d.data_mut().iter_mut().zip(self.value(a).data()) {
                        *x *= y;
                    }
                    self.accumulate(adj, b, d);
                }
            }
            Op::Scale { a, c } => self.accumulate(adj, a, g.map(|v| v * c)),
            Op::Sum { a } => {
                let s = g.data()[0];
                let d = self.value(a).same_shape_zeros().map(|_| s);
                self.accumulate(adj, a, d);
            }
            Op::Mse { pred, ref target } => {
                let s = g.data()[0] * 2.0 / target.len() as f64;
                let p = self.value(pred);
                let data = p.data().iter().zip(target).map(|(x, y)| s * (x - y)).collect();
                self.accumulate(adj, pred, Tensor::new(p.shape().to_vec(), data).unwrap());
            }
            Op::Norm {
                x,
                scale,
                shift,
                ref xhat,
                ref inv_std,
                per_row,
                batch_stats,
            } => self.norm_backward(x, scale, shift, xhat, inv_std, per_row, batch_stats, g, adj),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        x: Var,
        scale: Var,
        shift: Var,
        xhat: &[f64],
        inv_std: &[f64],
        per_row: bool,
        batch_stats: bool,
        g: Tensor,
        adj: &mut [Option<Tensor>],
    ) {
        let (b, f) = self.value(x).dims2();
        let gd = g.data();
        let sc = self.value(scale).data();
        let wants_x = self.wants(x);
        // column sums of g and g * xhat serve both the affine gradients and,
        // scaled by `sc`, the batch-statistics correction of dx
        let mut dscale = vec![0.0; f];
        let mut dshift = vec![0.0; f];
        if self.wants(scale) || self.wants(shift) || (wants_x && batch_stats && !per_row) {
            for (grow, hrow) in gd.chunks_exact(f).zip(xhat.chunks_exact(f)) {
                for ((ds, dh), (gv, hv)) in dscale.iter_mut().zip(dshift.iter_mut()).zip(grow.iter().zip(hrow)) {
                    *ds += gv * hv;
                    *dh += gv;
                }
            }
        }
        if !wants_x {
            let s_shape = self.value(scale).shape().to_vec();
            let h_shape = self.value(shift).shape().to_vec();
            self.accumulate(adj, scale, Tensor::new(s_shape, dscale).unwrap());
            self.accumulate(adj, shift, Tensor::new(h_shape, dshift).unwrap());
            return;
        }
        let mut dx = vec![0.0; b * f];
        if !batch_stats {
            // eval-mode batch norm is a fixed per-feature affine map
            for (drow, grow) in dx.chunks_exact_mut(f).zip(gd.chunks_exact(f)) {
                for j in 0..f {
                    drow[j] = grow[j] * sc[j] * inv_std[j];
                }
            }
        } else if per_row {
            let nf = f as f64;
            for i in 0..b {
                let (grow, hrow) = (&gd[i * f..(i + 1) * f], &xhat[i * f..(i + 1) * f]);
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for j in 0..f {
                    let dh = grow[j] * sc[j];
                    s1 += dh;
                    s2 += dh * hrow[j];
                }
                let k = inv_std[i] / nf;
                for j in 0..f {
                    let dh = grow[j] * sc[j];
                    dx[i * f + j] = k * (nf * dh - s1 - hrow[j] * s2);
                }
            }
        } else {
            let nb = b as f64;
            let s1: Vec<f64> = dshift.iter().zip(sc).map(|(d, s)| d * s).collect();
            let s2: Vec<f64> = dscale.iter().zip(sc).map(|(d, s)| d * s).collect();
            let k: Vec<f64> = inv_std.iter().map(|s| s / nb).collect();
            for ((drow, grow), hrow) in dx.chunks_exact_mut(f).zip(gd.chunks_exact(f)).zip(xhat.chunks_exact(f)) {
                for j in 0..f {
                    drow[j] = k[j] * (nb * grow[j] * sc[j] - s1[j] - hrow[j] * s2[j]);
                }
            }
        }
        let s_shape = self.value(scale).shape().to_vec();
        let h_shape = self.value(shift).shape().to_vec();
        self.accumulate(adj, scale, Tensor::new(s_shape, dscale).unwrap());
        self.accumulate(adj, shift, Tensor::new(h_shape, dshift).unwrap());
        let shape = self.value(x).shape().to_vec();
        self.accumulate(adj, x, Tensor::new(shape, dx).unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::finite_diff_grad;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_gradient_at_negative_and_zero() {
        for (input, expect) in [(-2.0, 0.0), (-3.0, 0.0), (0.0, 0.0), (1.5, 1.0)] {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::scalar(input));
            let y = tape.relu(x);
            let s = tape.sum(y);
            let g = tape.backward(s).unwrap();
            assert_eq!(g.get(x).unwrap().data(), &[expect], "input {input}");
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(KernelError::NotScalar { .. })));
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = x*x + 3x at x = 2 -> 2x + 3 = 7
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0);
        let y = tape.add(sq, lin).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let w = tape.param(Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap());
        let y = tape.matmul(c, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    /// loss = mse(norm(relu(X W1 + b1)) W2, y) with every norm flavour.
    fn composite_loss(theta: &[f64], x: &Tensor, y: &[f64], which: usize) -> (f64, Vec<f64>) {
        let (w1, rest) = theta.split_at(12);
        let (b1, rest) = rest.split_at(4);
        let (sc, rest) = rest.split_at(4);
        let (sh, w2) = rest.split_at(4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = [
            tape.param(Tensor::matrix(3, 4, w1.to_vec()).unwrap()),
            tape.param(Tensor::new(vec![4], b1.to_vec()).unwrap()),
            tape.param(Tensor::new(vec![4], sc.to_vec()).unwrap()),
            tape.param(Tensor::new(vec![4], sh.to_vec()).unwrap()),
            tape.param(Tensor::matrix(4, 1, w2.to_vec()).unwrap()),
        ];
        let h = tape.matmul(xv, vars[0]).unwrap();
        let h = tape.add_bias(h, vars[1]).unwrap();
        let h = tape.relu(h);
        let stats = RunningStats {
            mean: vec![0.1, -0.2, 0.3, 0.05],
            var: vec![1.5, 0.7, 2.0, 0.9],
            momentum: 0.1,
        };
        let h = match which {
            0 => tape.batch_norm(h, vars[2], vars[3], Mode::Train, &stats, 1e-5).unwrap().0,
            1 => tape.batch_norm(h, vars[2], vars[3], Mode::Eval, &stats, 1e-5).unwrap().0,
            _ => tape.layer_norm(h, vars[2], vars[3], 1e-5).unwrap(),
        };
        let out = tape.matmul(h, vars[4]).unwrap();
        let loss = tape.mse(out, y).unwrap();
        let g = tape.backward(loss).unwrap();
        let grad = vars.iter().flat_map(|v| g.get(*v).unwrap().data().to_vec()).collect();
        (tape.value(loss).data()[0], grad)
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut seed = 3;
        let x = Tensor::matrix(6, 3, (0..18).map(|_| lcg(&mut seed) * 2.0).collect()).unwrap();
        let y: Vec<f64> = (0..6).map(|_| lcg(&mut seed)).collect();
        let mut theta: Vec<f64> = (0..28).map(|_| lcg(&mut seed)).collect();
        // push first-layer biases away from zero so no relu input sits near a kink
        for b in &mut theta[12..16] {
            *b += 0.5 * b.signum();
        }
        for which in 0..3 {
            let (_, grad) = composite_loss(&theta, &x, &y, which);
            let fd = finite_diff_grad(|t| composite_loss(t, &x, &y, which).0, &theta, 1e-5);
            for (a, n) in grad.iter().zip(&fd) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
                assert!(rel <= 1e-5, "norm {which}: analytic {a} vs fd {n}");
            }
        }
    }
}
