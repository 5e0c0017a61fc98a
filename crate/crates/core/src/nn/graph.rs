//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, so reverse creation order is a valid topological order for the
//! backward sweep. Parameters are borrowed from a [`ParamStore`] rather than
//! copied; whether a parameter receives a gradient follows its `trainable`
//! flag.

use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeom};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation implemented outside this module (e.g. the entropy model's
/// likelihood). Forward values are computed by the caller; the graph only
/// needs the vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one entry per input; entries for inputs with `needs[i] ==
    /// false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f32>>>>;
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Gelu(Var),
    Gdn { x: Var, beta: Var, gamma: Var },
    Upsample2x(Var),
    DenseHead { x: Var, w: Var, b: Var },
    Add(Var, Var),
    AddConst(Var),
    Softplus(Var),
    Scale(Var, f32),
    AddScalar(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    KlDiv { teacher: Var, student: Var, temperature: f32 },
    NegLog2Sum { x: Var, floor: f32 },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Gradients of one backward sweep, kept for leaves only.
pub struct Gradients {
    leaves: Vec<Option<Vec<f32>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter that took part in the graph and required
    /// one. A parameter used by several nodes appears once per node.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.leaves[node].as_deref().map(|g| (id, g)))
    }
}

fn shape_err<T>(op: &str, msg: String) -> Result<T> {
    Err(Error::Config(format!("{op}: {msg}")))
}

impl<'a> Graph<'a> {
    /// A graph that records gradients and has no parameter store.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Inference graph: nothing requires a gradient.
    pub fn inference(store: &'a ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("param nodes only exist with a store")
                .tensor(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], what: &str) -> Result<Var> {
        value.check_finite(what)?;
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// A free leaf, optionally tracked for gradients (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store.expect("Graph::param needs a parameter store");
        let trainable = store.get(id).trainable;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: trainable && self.grad_enabled,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err("conv2d", format!("expected 4-d input/weight, got {xs:?} / {ws:?}"));
        }
        if ws[2] != ws[3] || ws[1] != xs[1] || bs != [ws[0]] {
            return shape_err("conv2d", format!("input {xs:?} weight {ws:?} bias {bs:?}"));
        }
        let k = ws[2];
        if stride == 0 || k == 0 || xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return shape_err("conv2d", format!("kernel {k} stride {stride} pad {pad} on {xs:?}"));
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k,
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let t = Tensor::new(&[geom.batch, geom.c_out, oh, ow], out)?;
        self.push(t, Op::Conv2d { x, w, b, geom }, &[x, w, b], "conv2d")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(src.shape(), data)?;
        self.push(t, Op::Gelu(x), &[x], "gelu")
    }

    /// Generalized divisive normalization with already-positive `beta` [C]
    /// and `gamma` [C, C].
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let c = xs.get(1).copied().unwrap_or(0);
        if xs.len() != 4 || self.value(beta).shape() != [c] || self.value(gamma).shape() != [c, c] {
            return shape_err(
                "gdn",
                format!(
                    "input {xs:?} beta {:?} gamma {:?}",
                    self.value(beta).shape(),
                    self.value(gamma).shape()
                ),
            );
        }
        let norm = gdn_norm(self.value(x), self.value(beta), self.value(gamma));
        if norm.iter().any(|&n| n <= 0.0 || !n.is_finite()) {
            return Err(Error::Numeric("gdn: non-positive denominator".into()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&norm)
            .map(|(&v, &n)| v / n.sqrt())
            .collect();
        let t = Tensor::new(&xs, data)?;
        self.push(t, Op::Gdn { x, beta, gamma }, &[x, beta, gamma], "gdn")
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let s = src.shape();
        if s.len() != 4 {
            return shape_err("upsample2x", format!("expected 4-d input, got {s:?}"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0f32; planes * 4 * h * w];
        for p in 0..planes {
            let sp = &src.data()[p * h * w..][..h * w];
            let dp = &mut out[p * 4 * h * w..][..4 * h * w];
            for y in 0..2 * h {
                for x2 in 0..2 * w {
                    dp[y * 2 * w + x2] = sp[(y / 2) * w + x2 / 2];
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        self.push(t, Op::Upsample2x(x), &[x], "upsample2x")
    }

    /// Global average pool followed by an affine map: [B,C,H,W] -> [B,K].
    pub fn dense_head(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return shape_err("dense_head", format!("feature {xs:?} weight {ws:?} bias {bs:?}"));
        }
        let (batch, c, k) = (xs[0], xs[1], ws[0]);
        let pooled = global_mean(self.value(x));
        let mut out = vec![0.0f32; batch * k];
        for n in 0..batch {
            for j in 0..k {
                let row = &self.value(w).data()[j * c..(j + 1) * c];
                out[n * k + j] = self.value(b).data()[j]
                    + row.iter().zip(&pooled[n * c..(n + 1) * c]).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        let t = Tensor::new(&[batch, k], out)?;
        self.push(t, Op::DenseHead { x, w, b }, &[x, w, b], "dense_head")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        self.push(t, Op::Add(a, b), &[a, b], "add")
    }

    /// `x + c` for a constant tensor `c` (e.g. quantization noise).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return shape_err("add_const", format!("{:?} vs {:?}", self.value(x).shape(), c.shape()));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let t = Tensor::new(c.shape(), data)?;
        self.push(t, Op::AddConst(x), &[x], "add_const")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| kernels::softplus(v)).collect();
        let t = Tensor::new(src.shape(), data)?;
        self.push(t, Op::Softplus(x), &[x], "softplus")
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * k).collect();
        let t = Tensor::new(src.shape(), data)?;
        self.push(t, Op::Scale(x, k), &[x], "scale")
    }

    pub fn add_scalar(&mut self, x: Var, k: f32) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v + k).collect();
        let t = Tensor::new(src.shape(), data)?;
        self.push(t, Op::AddScalar(x), &[x], "add_scalar")
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("mse", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let sum: f32 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let t = Tensor::scalar(sum / ta.len() as f32);
        self.push(t, Op::Mse(a, b), &[a, b], "mse")
    }

    /// Batch-mean cross entropy of [B,K] logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err("cross_entropy", format!("logits {s:?} with {} labels", labels.len()));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Config(format!("label {bad} outside [0, {k})")));
        }
        let mut logp = vec![0.0f32; k];
        let mut total = 0.0f32;
        for (n, &label) in labels.iter().enumerate() {
            kernels::log_softmax_row(&self.value(logits).data()[n * k..(n + 1) * k], 1.0, &mut logp);
            total -= logp[label];
        }
        let t = Tensor::scalar(total / labels.len() as f32);
        self.push(
            t,
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            &[logits],
            "cross_entropy",
        )
    }

    /// Batch-mean KL(softmax(teacher/T) || softmax(student/T)).
    pub fn kl_div(&mut self, teacher: Var, student: Var, temperature: f32) -> Result<Var> {
        let (tt, ts) = (self.value(teacher), self.value(student));
        if tt.shape() != ts.shape() || tt.shape().len() != 2 {
            return shape_err("kl_div", format!("{:?} vs {:?}", tt.shape(), ts.shape()));
        }
        if temperature <= 0.0 {
            return Err(Error::Config(format!("temperature {temperature} must be positive")));
        }
        let (batch, k) = (tt.shape()[0], tt.shape()[1]);
        let mut lt = vec![0.0f32; k];
        let mut ls = vec![0.0f32; k];
        let mut total = 0.0f32;
        for n in 0..batch {
            kernels::log_softmax_row(&tt.data()[n * k..(n + 1) * k], temperature, &mut lt);
            kernels::log_softmax_row(&ts.data()[n * k..(n + 1) * k], temperature, &mut ls);
            total += lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum::<f32>();
        }
        let t = Tensor::scalar(total / batch as f32);
        self.push(t, Op::KlDiv { teacher, student, temperature }, &[teacher, student], "kl_div")
    }

    /// `sum(-log2(max(x, floor)))`, the information content of likelihoods.
    pub fn neg_log2_sum(&mut self, x: Var, floor: f32) -> Result<Var> {
        let bits: f64 = self
            .value(x)
            .data()
            .iter()
            .map(|&p| -(p.max(floor) as f64).log2())
            .sum();
        self.push(Tensor::scalar(bits as f32), Op::NegLog2Sum { x, floor }, &[x], "neg_log2_sum")
    }

    /// Records an externally computed value together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, inputs, name)
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Config("backward root must be a scalar".into()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut params = Vec::new();
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if let Some(id) = node.param {
                if node.requires_grad {
                    params.push((id, i));
                }
            }
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(Var(i), &g, &mut grads)?;
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at node {i}")));
                }
            }
        }
        params.reverse();
        Ok(Gradients { leaves: grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, v: Var, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let out = self.value(v);
        match &self.nodes[v.0].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let r = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    (self.wants(*x), self.wants(*w), self.wants(*b)),
                );
                accumulate(grads, *x, r.dx);
                accumulate(grads, *w, r.dw);
                accumulate(grads, *b, r.db);
            }
            Op::Gelu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| gv * kernels::gelu_grad(xv))
                    .collect();
                accumulate(grads, *x, Some(d));
            }
            Op::Gdn { x, beta, gamma } => {
                let (dx, db, dg) = gdn_backward(self.value(*x), self.value(*beta), self.value(*gamma), g);
                accumulate(grads, *x, self.wants(*x).then_some(dx));
                accumulate(grads, *beta, self.wants(*beta).then_some(db));
                accumulate(grads, *gamma, self.wants(*gamma).then_some(dg));
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut d = vec![0.0f32; planes * h * w];
                for p in 0..planes {
                    let gp = &g[p * 4 * h * w..][..4 * h * w];
                    let dp = &mut d[p * h * w..][..h * w];
                    for y in 0..2 * h {
                        for x2 in 0..2 * w {
                            dp[(y / 2) * w + x2 / 2] += gp[y * 2 * w + x2];
                        }
                    }
                }
                accumulate(grads, *x, Some(d));
            }
            Op::DenseHead { x, w, b } => {
                let xs = self.value(*x).shape();
                let (batch, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let k = self.value(*w).shape()[0];
                let wd = self.value(*w).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0f32; batch * c * plane];
                    for n in 0..batch {
                        for ch in 0..c {
                            let dp: f32 = (0..k).map(|j| g[n * k + j] * wd[j * c + ch]).sum();
                            dx[(n * c + ch) * plane..][..plane].fill(dp / plane as f32);
                        }
                    }
                    accumulate(grads, *x, Some(dx));
                }
                if self.wants(*w) {
                    let pooled = global_mean(self.value(*x));
                    let mut dw = vec![0.0f32; k * c];
                    for n in 0..batch {
                        for j in 0..k {
                            for ch in 0..c {
                                dw[j * c + ch] += g[n * k + j] * pooled[n * c + ch];
                            }
                        }
                    }
                    accumulate(grads, *w, Some(dw));
                }
                if self.wants(*b) {
                    let db = (0..k).map(|j| (0..batch).map(|n| g[n * k + j]).sum()).collect();
                    accumulate(grads, *b, Some(db));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, Some(g.to_vec()));
                accumulate(grads, *b, Some(g.to_vec()));
            }
            Op::AddConst(x) | Op::AddScalar(x) => accumulate(grads, *x, Some(g.to_vec())),
            Op::Softplus(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| gv * kernels::sigmoid(xv))
                    .collect();
                accumulate(grads, *x, Some(d));
            }
            Op::Scale(x, k) => accumulate(grads, *x, Some(g.iter().map(|v| v * k).collect())),
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * g[0] / ta.len() as f32;
                let d: Vec<f32> = ta.iter().zip(tb).map(|(x, y)| k * (x - y)).collect();
                if self.wants(*b) {
                    accumulate(grads, *b, Some(d.iter().map(|v| -v).collect()));
                }
                accumulate(grads, *a, self.wants(*a).then_some(d));
            }
            Op::CrossEntropy { logits, labels } => {
                let t = self.value(*logits);
                let k = t.shape()[1];
                let scale = g[0] / labels.len() as f32;
                let mut d = vec![0.0f32; t.len()];
                let mut logp = vec![0.0f32; k];
                for (n, &label) in labels.iter().enumerate() {
                    kernels::log_softmax_row(&t.data()[n * k..(n + 1) * k], 1.0, &mut logp);
                    for j in 0..k {
                        let target = if j == label { 1.0 } else { 0.0 };
                        d[n * k + j] = scale * (logp[j].exp() - target);
                    }
                }
                accumulate(grads, *logits, Some(d));
            }
            Op::KlDiv { teacher, student, temperature } => {
                let (tt, ts) = (self.value(*teacher), self.value(*student));
                let (batch, k) = (tt.shape()[0], tt.shape()[1]);
                let scale = g[0] / (batch as f32 * temperature);
                let mut lt = vec![0.0f32; k];
                let mut ls = vec![0.0f32; k];
                let mut dt = vec![0.0f32; tt.len()];
                let mut dst = vec![0.0f32; ts.len()];
                for n in 0..batch {
                    kernels::log_softmax_row(&tt.data()[n * k..(n + 1) * k], *temperature, &mut lt);
                    kernels::log_softmax_row(&ts.data()[n * k..(n + 1) * k], *temperature, &mut ls);
                    let kl: f32 = lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum();
                    for j in 0..k {
                        let (pt, ps) = (lt[j].exp(), ls[j].exp());
                        dst[n * k + j] = scale * (ps - pt);
                        dt[n * k + j] = scale * pt * ((lt[j] - ls[j]) - kl);
                    }
                }
                accumulate(grads, *teacher, self.wants(*teacher).then_some(dt));
                accumulate(grads, *student, self.wants(*student).then_some(dst));
            }
            Op::NegLog2Sum { x, floor } => {
                let k = -g[0] / std::f32::consts::LN_2;
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .map(|&p| if p > *floor { k / p } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Some(d));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.wants(*v)).collect();
                let rs = op.backward(&values, out, g, &needs)?;
                for ((v, need), r) in inputs.iter().zip(needs).zip(rs) {
                    if need {
                        accumulate(grads, *v, r);
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, contrib: Option<Vec<f32>>) {
    let Some(c) = contrib else { return };
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&c) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(c),
    }
}

fn global_mean(x: &Tensor) -> Vec<f32> {
    let s = x.shape();
    let plane = s[2] * s[3];
    x.data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f32>() / plane as f32)
        .collect()
}

/// `beta_i + sum_j gamma_ij x_j^2` at every location, laid out like `x`.
fn gdn_norm(x: &Tensor, beta: &Tensor, gamma: &Tensor) -> Vec<f32> {
    let s = x.shape();
    let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
    let sq: Vec<f32> = x.data().iter().map(|v| v * v).collect();
    let mut norm = vec![0.0f32; x.len()];
    for n in 0..batch {
        let dst = &mut norm[n * c * plane..][..c * plane];
        for (i, row) in dst.chunks_mut(plane).enumerate() {
            row.fill(beta.data()[i]);
        }
        kernels::gemm(
            c,
            c,
            plane,
            1.0,
            gamma.data(),
            (c, 1),
            &sq[n * c * plane..][..c * plane],
            (plane, 1),
            1.0,
            dst,
            plane,
        );
    }
    norm
}

fn gdn_backward(x: &Tensor, beta: &Tensor, gamma: &Tensor, g: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let s = x.shape();
    let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
    let norm = gdn_norm(x, beta, gamma);
    let xd = x.data();
    // t_i = g_i x_i n_i^{-3/2}
    let t: Vec<f32> = (0..x.len()).map(|i| g[i] * xd[i] * norm[i].powf(-1.5)).collect();
    let sq: Vec<f32> = xd.iter().map(|v| v * v).collect();
    let mut dx: Vec<f32> = (0..x.len()).map(|i| g[i] / norm[i].sqrt()).collect();
    let mut dbeta = vec![0.0f32; c];
    let mut dgamma = vec![0.0f32; c * c];
    let mut gt = vec![0.0f32; c * plane];
    for n in 0..batch {
        let tn = &t[n * c * plane..][..c * plane];
        let sqn = &sq[n * c * plane..][..c * plane];
        // (gamma^T t)_j
        kernels::gemm(c, c, plane, 1.0, gamma.data(), (1, c), tn, (plane, 1), 0.0, &mut gt, plane);
        for j in 0..c * plane {
            dx[n * c * plane + j] -= xd[n * c * plane + j] * gt[j];
        }
        for (i, row) in tn.chunks(plane).enumerate() {
            dbeta[i] -= 0.5 * row.iter().sum::<f32>();
        }
        kernels::gemm(c, plane, c, -0.5, tn, (plane, 1), sqn, (1, plane), 1.0, &mut dgamma, c);
    }
    (dx, dbeta, dgamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn one_by_one_unit_kernel_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..2 * 3 * 5 * 4).map(|i| i as f32 * 0.25 - 3.0).collect();
        let x = g.input(t(&[2, 3, 5, 4], &data));
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = g.input(t(&[3, 3, 1, 1], &w));
        let b = g.input(Tensor::zeros(&[3]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn patch_embedding_shape() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 32, 32]));
        let w = g.input(Tensor::zeros(&[64, 3, 8, 8]));
        let b = g.input(Tensor::zeros(&[64]));
        let y = g.conv2d(x, w, b, 8, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 64, 4, 4]);
    }

    #[test]
    fn conv_rejects_mismatched_channels() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.input(Tensor::zeros(&[4, 3, 3, 3]));
        let b = g.input(Tensor::zeros(&[4]));
        assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(Error::Config(_))));
        let w = g.input(Tensor::zeros(&[4, 2, 7, 7]));
        assert!(g.conv2d(x, w, b, 1, 1).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[f32::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn gdn_identity_and_scaling() {
        let data: Vec<f32> = (0..2 * 3 * 2 * 2).map(|i| i as f32 - 5.0).collect();
        let mut g = Graph::new();
        let x = g.input(t(&[2, 3, 2, 2], &data));
        let gamma = g.input(Tensor::zeros(&[3, 3]));
        let one = g.input(Tensor::full(&[3], 1.0));
        let four = g.input(Tensor::full(&[3], 4.0));
        let y = g.gdn(x, one, gamma).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
        let y = g.gdn(x, four, gamma).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert!((a - b / 2.0).abs() < 1e-6);
        }
        let x = g.input(t(&[1, 1, 1, 1], &[2.0]));
        let beta = g.input(t(&[1], &[1.0]));
        let gamma = g.input(t(&[1, 1], &[1.0]));
        let y = g.gdn(x, beta, gamma).unwrap();
        assert!((g.value(y).data()[0] - 2.0 / 5f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn upsample_replicates_and_block_sums() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 1, 1], &[1.0]), true);
        let y = g.upsample2x(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 4]);
        let x8 = g.leaf(Tensor::full(&[1, 8, 4, 4], 0.5), true);
        let y8 = g.upsample2x(x8).unwrap();
        assert_eq!(g.value(y8).shape(), &[1, 8, 8, 8]);
        // d(sum)/dx = 4 everywhere
        let ones = g.input(Tensor::zeros(&[1, 8, 8, 8]));
        let sum = g.mse(y8, ones).unwrap();
        let grads = g.backward(sum).unwrap();
        let n = 8.0 * 8.0 * 8.0;
        for v in grads.wrt(x8).unwrap() {
            // d/dx of mean((y)^2) with y = 0.5 -> 2*0.5/n per copy, 4 copies
            assert!((v - 4.0 * 2.0 * 0.5 / n).abs() < 1e-7);
        }
    }

    #[test]
    fn dense_head_arithmetic() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 4, 2, 2]));
        let w = g.input(Tensor::full(&[3, 4], 0.7));
        let b = g.input(t(&[3], &[1.0, -2.0, 0.5]));
        let y = g.dense_head(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 0.5]);

        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 3.0, 2.0, 2.0]));
        let w = g.input(t(&[1, 1], &[3.0]));
        let b = g.input(t(&[1], &[1.0]));
        let y = g.dense_head(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
    }

    #[test]
    fn loss_reference_values() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 4.0, 1.0]));
        let m = g.mse(a, a).unwrap();
        assert_eq!(g.value(m).data(), &[0.0]);
        for temp in [0.5, 1.0, 4.0] {
            let k = g.kl_div(a, a, temp).unwrap();
            assert!(g.value(k).data()[0].abs() < 1e-7);
        }
        let z = g.input(t(&[1, 2], &[0.0, 0.0]));
        let ce = g.cross_entropy(z, &[0]).unwrap();
        assert!((g.value(ce).data()[0] - std::f32::consts::LN_2).abs() < 1e-6);
        assert!(matches!(g.cross_entropy(z, &[2]), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[1, 1, 1, 1], &[2.0])).unwrap();
        let b = store.add("b", t(&[1], &[0.0])).unwrap();
        store.set_trainable("w", false);
        let mut g = Graph::with_params(&store);
        let x = g.input(t(&[1, 1, 1, 1], &[3.0]));
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.conv2d(x, wv, bv, 1, 0).unwrap();
        let zero = g.input(Tensor::zeros(&[1, 1, 1, 1]));
        let l = g.mse(y, zero).unwrap();
        let grads = g.backward(l).unwrap();
        let ids: Vec<ParamId> = grads.params().map(|(id, _)| id).collect();
        assert_eq!(ids, vec![b]);
        assert_eq!(grads.wrt(bv).unwrap(), &[12.0]);
    }
}
