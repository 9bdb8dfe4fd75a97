use super::kernels::{
    broadcast_shape, broadcast_strides, for_each_broadcast, gemm, log_softmax_in_place,
    softmax_in_place, swap_axes,
};
use super::{CounterRng, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    SwapAxes(Var, usize, usize),
    Reshape(Var),
    Relu(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    RmsNorm(Var, f64),
    L2Normalize(Var, f64),
    Dropout(Var, Vec<f64>),
    Embedding { table: Var, ids: Vec<usize> },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    MaskedFill { x: Var, mask: Vec<bool> },
    Narrow { x: Var, start: usize },
    Concat(Vec<Var>),
    SelectLast { x: Var, idx: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of executed operations. Nodes are stored in execution
/// order, which is a valid topological order of the computation graph.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn non_empty(shape: Vec<usize>) -> Vec<usize> {
    if shape.is_empty() {
        vec![1]
    } else {
        shape
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

    /// Records a leaf. Gradients are kept for it iff `requires_grad` is set.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a gradient-detached leaf.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let value = Tensor::new(&shape, data)
            .expect("op kernels produce consistent shapes")
            .with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(shape, data, op, &[x])
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok((ta.shape().to_vec(), data));
        }
        let out = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| shape_err(name, ta.shape(), tb.shape()))?;
        let sa = broadcast_strides(ta.shape(), &out);
        let sb = broadcast_strides(tb.shape(), &out);
        let mut data = vec![0.0; out.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Ok((out, data))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(shape, data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(shape, data, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(shape, data, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v / (1.0 + (-v).exp()))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log; rejects non-positive inputs instead of producing -inf/NaN.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].value.data().iter().find(|v| !(**v > 0.0)) {
            return Err(contract(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    /// `max(x, floor)`; gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::ClampMin(x, floor), |v| v.max(floor))
    }

    /// Batched matrix product `[..., m, k] × [..., k, n] → [..., m, n]` with
    /// broadcasting over the leading (batch) dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let plan = MatmulPlan::new(&sa, &sb).ok_or_else(|| shape_err("matmul", &sa, &sb))?;
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        plan.for_each(|o, ia, ib| {
            gemm(
                plan.m,
                plan.k,
                plan.n,
                &ta.data()[ia * plan.m * plan.k..(ia + 1) * plan.m * plan.k],
                false,
                &tb.data()[ib * plan.k * plan.n..(ib + 1) * plan.k * plan.n],
                false,
                &mut out[o * plan.m * plan.n..(o + 1) * plan.m * plan.n],
                false,
            )
        });
        Ok(self.push(plan.out_shape.clone(), out, Op::Matmul(a, b), &[a, b]))
    }

    /// Exchanges two axes (materialized copy).
    pub fn swap_axes(&mut self, x: Var, d0: usize, d1: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if d0 >= t.ndim() || d1 >= t.ndim() {
            return Err(contract(format!(
                "swap_axes({d0}, {d1}) on rank {}",
                t.ndim()
            )));
        }
        let (data, shape) = swap_axes(t.data(), t.shape(), d0, d1);
        Ok(self.push(shape, data, Op::SwapAxes(x, d0, d1), &[x]))
    }

    /// Transpose of the two trailing axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(contract("transpose needs rank >= 2"));
        }
        self.swap_axes(x, r - 2, r - 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != t.numel() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err("reshape", t.shape(), shape));
        }
        let data = t.data().to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Softmax over the trailing dimension (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let n = t.last_dim();
        let mut data = t.data().to_vec();
        data.chunks_exact_mut(n).for_each(softmax_in_place);
        let shape = t.shape().to_vec();
        self.push(shape, data, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let n = t.last_dim();
        let mut data = t.data().to_vec();
        data.chunks_exact_mut(n).for_each(log_softmax_in_place);
        let shape = t.shape().to_vec();
        self.push(shape, data, Op::LogSoftmax(x), &[x])
    }

    /// `x / sqrt(mean(x²) + eps)` over the trailing dimension, no gain.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let n = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= r);
        }
        let shape = t.shape().to_vec();
        self.push(shape, data, Op::RmsNorm(x, eps), &[x])
    }

    /// `x / sqrt(|x|² + eps)` over the trailing dimension.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let n = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let r = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= r);
        }
        let shape = t.shape().to_vec();
        self.push(shape, data, Op::L2Normalize(x, eps), &[x])
    }

    /// Inverted dropout. Element `i` is kept iff `rng.uniform_at(i) >= rate`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: CounterRng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = &self.nodes[x.0].value;
        let mask: Vec<f64> = (0..t.numel() as u64)
            .map(|i| if rng.uniform_at(i) >= rate { keep } else { 0.0 })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(shape, data, Op::Dropout(x, mask), &[x]))
    }

    /// Row lookup: `table[V, d]`, ids → `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.ndim() != 2 {
            return Err(contract("embedding table must be 2-D"));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {v}"
            )));
        }
        if ids.is_empty() {
            return Err(Error::Input("empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.ndim() {
            return Err(contract(format!("sum_axis({axis}) on rank {}", t.ndim())));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let len = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(non_empty(shape), data, Op::SumAxis { x, axis }, &[x]))
    }

    /// Replaces masked entries by a constant; they receive no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if mask.len() != t.numel() {
            return Err(shape_err("masked_fill", t.shape(), &[mask.len()]));
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let shape = t.shape().to_vec();
        Ok(self.push(
            shape,
            data,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// Slice `[start, start + len)` of the trailing dimension.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let n = t.last_dim();
        if len == 0 || start + len > n {
            return Err(contract(format!(
                "narrow [{start}, {}) of dimension {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(t.numel() / n * len);
        for row in t.rows() {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(shape, data, Op::Narrow { x, start }, &[x]))
    }

    /// Concatenation along the trailing dimension.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| contract("concat of nothing"))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[v.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, data, Op::Concat(xs.to_vec()), xs))
    }

    /// Picks one trailing-dimension entry per row: `out[r] = x[r, idx[r]]`.
    pub fn select_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let n = t.last_dim();
        let rows = t.numel() / n;
        if idx.len() != rows {
            return Err(shape_err("select_last", t.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("index {bad} outside dimension {n}")));
        }
        let data = t.rows().zip(idx).map(|(row, &i)| row[i]).collect();
        let shape = non_empty(t.shape()[..t.ndim() - 1].to_vec());
        Ok(self.push(
            shape,
            data,
            Op::SelectLast {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node that requires
    /// grad holds `∂loss/∂node` (zeros if unreachable). Returns the number of
    /// nodes visited.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].value.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad {
                node.value.grad = Some(g.unwrap_or_else(|| vec![0.0; node.value.numel()]));
            }
        }
        Ok(visited)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let t = &nodes[v.0].value;
            if !t.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; t.numel()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                acc(*a, &mut |ga| {
                    reduce_broadcast(ga, nodes[a.0].value.shape(), out.shape(), g, |x, _| x)
                });
                acc(*b, &mut |gb| {
                    reduce_broadcast(gb, nodes[b.0].value.shape(), out.shape(), g, |x, _| {
                        sign * x
                    })
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                // d(a*b)/da = b broadcast to the output; gather via the
                // other operand's strides.
                acc(*a, &mut |ga| mul_grad(ga, ta.shape(), tb, out.shape(), g));
                acc(*b, &mut |gb| mul_grad(gb, tb.shape(), ta, out.shape(), g));
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)
            }),
            Op::Matmul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let plan = MatmulPlan::new(ta.shape(), tb.shape()).expect("validated in forward");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                acc(*a, &mut |ga| {
                    plan.for_each(|o, ia, ib| {
                        gemm(
                            m,
                            n,
                            k,
                            &g[o * m * n..(o + 1) * m * n],
                            false,
                            &tb.data()[ib * k * n..(ib + 1) * k * n],
                            true,
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            true,
                        )
                    })
                });
                acc(*b, &mut |gb| {
                    plan.for_each(|o, ia, ib| {
                        gemm(
                            k,
                            m,
                            n,
                            &ta.data()[ia * m * k..(ia + 1) * m * k],
                            true,
                            &g[o * m * n..(o + 1) * m * n],
                            false,
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            true,
                        )
                    })
                });
            }
            Op::SwapAxes(x, d0, d1) => {
                let (back, _) = swap_axes(g, out.shape(), *d0, *d1);
                acc(*x, &mut |gx| add_into(gx, &back));
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Relu(x) => {
                let tx = &nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(tx.data()) {
                        if *v > 0.0 {
                            *d += s;
                        }
                    }
                })
            }
            Op::Silu(x) => {
                let tx = &nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((d, s), &v) in gx.iter_mut().zip(g).zip(tx.data()) {
                        let sig = 1.0 / (1.0 + (-v).exp());
                        *d += s * sig * (1.0 + v * (1.0 - sig));
                    }
                })
            }
            Op::Exp(x) => acc(*x, &mut |gx| {
                for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *d += s * y;
                }
            }),
            Op::Log(x) => {
                let tx = &nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(tx.data()) {
                        *d += s / v;
                    }
                })
            }
            Op::ClampMin(x, floor) => {
                let tx = &nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(tx.data()) {
                        if *v > *floor {
                            *d += s;
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let n = out.last_dim();
                acc(*x, &mut |gx| {
                    for ((dx, dy), y) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.rows())
                    {
                        let dot: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((d, s), yv) in dx.iter_mut().zip(dy).zip(y) {
                            *d += yv * (s - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let n = out.last_dim();
                acc(*x, &mut |gx| {
                    for ((dx, dy), y) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.rows())
                    {
                        let total: f64 = dy.iter().sum();
                        for ((d, s), ly) in dx.iter_mut().zip(dy).zip(y) {
                            *d += s - ly.exp() * total;
                        }
                    }
                })
            }
            Op::RmsNorm(x, eps) => {
                let tx = &nodes[x.0].value;
                let n = out.last_dim();
                acc(*x, &mut |gx| {
                    for (((dx, dy), y), xr) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.rows())
                        .zip(tx.rows())
                    {
                        let ms = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
                        let r = 1.0 / (ms + eps).sqrt();
                        let proj = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((d, s), yv) in dx.iter_mut().zip(dy).zip(y) {
                            *d += r * (s - yv * proj);
                        }
                    }
                })
            }
            Op::L2Normalize(x, eps) => {
                let tx = &nodes[x.0].value;
                let n = out.last_dim();
                acc(*x, &mut |gx| {
                    for (((dx, dy), y), xr) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.rows())
                        .zip(tx.rows())
                    {
                        let r = 1.0 / (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                        let proj: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((d, s), yv) in dx.iter_mut().zip(dy).zip(y) {
                            *d += r * (s - yv * proj);
                        }
                    }
                })
            }
            Op::Dropout(x, mask) => acc(*x, &mut |gx| {
                for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += s * m;
                }
            }),
            Op::Embedding { table, ids } => {
                let d = out.last_dim();
                acc(*table, &mut |gt| {
                    for (row, &id) in g.chunks_exact(d).zip(ids) {
                        add_into(&mut gt[id * d..(id + 1) * d], row);
                    }
                })
            }
            Op::SumAll(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::SumAxis { x, axis } => {
                let tx = &nodes[x.0].value;
                let outer: usize = tx.shape()[..*axis].iter().product();
                let len = tx.shape()[*axis];
                let inner: usize = tx.shape()[axis + 1..].iter().product();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            add_into(dst, &g[o * inner..(o + 1) * inner]);
                        }
                    }
                })
            }
            Op::MaskedFill { x, mask } => acc(*x, &mut |gx| {
                for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *d += s;
                    }
                }
            }),
            Op::Narrow { x, start } => {
                let n = nodes[x.0].value.last_dim();
                let len = out.last_dim();
                acc(*x, &mut |gx| {
                    for (dst, src) in gx.chunks_exact_mut(n).zip(g.chunks_exact(len)) {
                        add_into(&mut dst[*start..start + len], src);
                    }
                })
            }
            Op::Concat(xs) => {
                let total = out.last_dim();
                let mut offset = 0;
                for &v in xs {
                    let w = nodes[v.0].value.last_dim();
                    acc(v, &mut |gv| {
                        for (dst, src) in gv.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_into(dst, &src[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SelectLast { x, idx } => {
                let n = nodes[x.0].value.last_dim();
                acc(*x, &mut |gx| {
                    for ((row, &j), s) in gx.chunks_exact_mut(n).zip(idx).zip(g) {
                        row[j] += s;
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Accumulates `f(g, _)` into `dst` (shape `shape`), summing over the axes
/// along which `shape` was broadcast to `out`.
fn reduce_broadcast(
    dst: &mut [f64],
    shape: &[usize],
    out: &[usize],
    g: &[f64],
    f: impl Fn(f64, usize) -> f64,
) {
    if shape == out {
        dst.iter_mut().zip(g).for_each(|(d, &s)| *d += f(s, 0));
        return;
    }
    let sd = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &sd, &zeros, |o, id, _| dst[id] += f(g[o], o));
}

fn mul_grad(dst: &mut [f64], shape: &[usize], other: &Tensor, out: &[usize], g: &[f64]) {
    if shape == out && other.shape() == out {
        for ((d, s), v) in dst.iter_mut().zip(g).zip(other.data()) {
            *d += s * v;
        }
        return;
    }
    let sd = broadcast_strides(shape, out);
    let so = broadcast_strides(other.shape(), out);
    let od = other.data();
    for_each_broadcast(out, &sd, &so, |o, id, io| dst[id] += g[o] * od[io]);
}

/// Batch layout of a broadcast matmul, in units of whole matrices.
///
/// When the right operand is 2-D, `[.., m, k] × [k, n]` folds into a single
/// `[(..·m), k] × [k, n]` product with an empty batch.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    batch: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Option<Self> {
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 1]);
        if sb[rb - 2] != k {
            return None;
        }
        let ba = &sa[..ra - 2];
        let bb = &sb[..rb - 2];
        let batch = broadcast_shape(ba, bb)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        if bb.is_empty() {
            return Some(Self {
                m: ba.iter().product::<usize>() * m,
                k,
                n,
                out_shape,
                batch: Vec::new(),
                sa: Vec::new(),
                sb: Vec::new(),
            });
        }
        Some(Self {
            m,
            k,
            n,
            out_shape,
            sa: broadcast_strides(ba, &batch),
            sb: broadcast_strides(bb, &batch),
            batch,
        })
    }

    /// Calls `f(out_batch, a_batch, b_batch)` once per matrix product.
    fn for_each(&self, f: impl FnMut(usize, usize, usize)) {
        for_each_broadcast(&self.batch, &self.sa, &self.sb, f);
    }
}
