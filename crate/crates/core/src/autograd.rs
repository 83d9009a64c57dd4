//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`] handle.
//! Operands always precede their results, so [`Tape::backward`] walks the tape
//! in reverse index order; that fixed order makes gradient accumulation
//! bit-reproducible.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined operation: `(inputs, output, upstream) -> input grads`.
pub type CustomBackward<F> = Box<dyn Fn(&[&Tensor<F>], &Tensor<F>, &[F]) -> Vec<Vec<F>> + Send + Sync>;

/// Names of the built-in differentiable operations, as reported by [`Tape::op_name`].
pub const DIFFERENTIABLE_OPS: [&str; 19] = [
    "add",
    "sub",
    "mul",
    "div",
    "add_n",
    "scale",
    "add_scalar",
    "sigmoid",
    "tanh",
    "relu",
    "maximum",
    "concat_channels",
    "slice_channels",
    "sum",
    "mean",
    "conv2d",
    "bilinear_up2",
    "area_down",
    "custom",
];

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddN(Vec<Var>),
    Scale(Var, F),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Maximum(Var, Var),
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Up2(Var),
    AreaDown(Var, usize),
    Custom(Vec<Var>, CustomBackward<F>),
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Maximum(a, b) => {
                vec![*a, *b]
            }
            Op::AddN(v) | Op::Concat(v) | Op::Custom(v, _) => v.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Up2(a)
            | Op::AreaDown(a, _)
            | Op::Slice { src: a, .. } => vec![*a],
            Op::Conv2d { x, weight, bias, .. } => vec![*x, *weight, *bias],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddN(..) => "add_n",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Maximum(..) => "maximum",
            Op::Concat(..) => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::Up2(..) => "bilinear_up2",
            Op::AreaDown(..) => "area_down",
            Op::Custom(..) => "custom",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Recorded computation graph for one forward pass.
pub struct Tape<F: Element> {
    nodes: Vec<Node<F>>,
}

impl<F: Element> fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.nodes.iter().map(|n| (n.op.name(), n.value.shape())))
            .finish()
    }
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn map<F: Element>(a: &[F], f: impl Fn(F) -> F) -> Vec<F> {
    a.iter().map(|&v| f(v)).collect()
}

fn zip<F: Element>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sigmoid<F: Element>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<F>, shape: &[usize], op: Op<F>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].value.requires_grad());
        let mut value = Tensor::from_vec(shape, data).expect("op produced consistent shape");
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor<F>) -> Var {
        t.zero_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor<F>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Var> {
        Ok(self.constant(Tensor::zeros(shape)?))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<F>> {
        self.nodes[v.0].value.grad_slot().take()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Distinct operations recorded so far, leaves excluded.
    pub fn recorded_ops(&self) -> BTreeSet<&'static str> {
        self.nodes
            .iter()
            .map(|n| n.op.name())
            .filter(|&n| n != "leaf")
            .collect()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let data = zip(self.data(a), self.data(b), f);
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, &shape, op))
    }

    fn unary(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let data = map(self.data(a), f);
        let shape = self.shape(a).to_vec();
        self.push(data, &shape, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err!("add_n of zero tensors"))?;
        for &p in &parts[1..] {
            self.same_shape(first, p, "add_n")?;
        }
        let mut acc = self.data(first).to_vec();
        for &p in &parts[1..] {
            for (a, &b) in acc.iter_mut().zip(self.data(p)) {
                *a = *a + b;
            }
        }
        let shape = self.shape(first).to_vec();
        Ok(self.push(acc, &shape, Op::AddN(parts.to_vec())))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(F::zero()))
    }

    /// Stacks `[C_j, H, W]` parts along the channel axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let (_, h, w) = self.value(first).chw()?;
        let mut channels = 0;
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err!("concat_channels spatial mismatch: {h}x{w} vs {ph}x{pw}"));
            }
            channels += c;
        }
        if parts.len() == 1 {
            return Ok(first);
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(data, &[channels, h, w], Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start+len` of a `[C, H, W]` tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        if len == 0 || start + len > c {
            return Err(shape_err!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            ));
        }
        let data = self.data(a)[start * h * w..(start + len) * h * w].to_vec();
        Ok(self.push(data, &[len, h, w], Op::Slice { src: a, start }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().fold(F::zero(), |acc, &v| acc + v);
        self.push(vec![s], &[1], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().fold(F::zero(), |acc, &v| acc + v);
        let m = s / F::from_usize(d.len()).unwrap();
        self.push(vec![m], &[1], Op::Mean(a))
    }

    /// Cross-correlation of `x [C_in,H,W]` with `weight [C_out,C_in,k,k]` plus `bias [C_out]`,
    /// "same" zero padding, given stride. Output is `[C_out, ceil(H/s), ceil(W/s)]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (c_in, h, w) = self.value(x).chw()?;
        let (c_out, wc_in, kh, kw) = match self.shape(weight)[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(shape_err!("conv weight must be 4-D, got {:?}", self.shape(weight))),
        };
        if wc_in != c_in {
            return Err(shape_err!("conv2d expects {wc_in} input channels, got {c_in}"));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err!("conv2d needs a square odd kernel, got {kh}x{kw}"));
        }
        if self.shape(bias) != [c_out] {
            return Err(shape_err!("conv bias must be [{c_out}], got {:?}", self.shape(bias)));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            h,
            w,
            k: kh,
            stride,
        };
        let out = kernels::conv2d_forward(self.data(x), self.data(weight), self.data(bias), &geom);
        let shape = [c_out, geom.out_h(), geom.out_w()];
        Ok(self.push(out, &shape, Op::Conv2d { x, weight, bias, geom }))
    }

    /// Half-pixel bilinear 2× upsampling with edge clamping.
    pub fn bilinear_up2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let out = kernels::up2_forward(self.data(x), c, h, w);
        Ok(self.push(out, &[c, 2 * h, 2 * w], Op::Up2(x)))
    }

    /// Non-overlapping `factor×factor` block averaging.
    pub fn area_down(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if factor == 0 || !factor.is_power_of_two() {
            return Err(shape_err!("area_down factor {factor} is not a power of two"));
        }
        if h % factor != 0 || w % factor != 0 {
            return Err(shape_err!("area_down: {h}x{w} not divisible by {factor}"));
        }
        if factor == 1 {
            return Ok(x);
        }
        let out = kernels::area_down_forward(self.data(x), c, h, w, factor);
        Ok(self.push(out, &[c, h / factor, w / factor], Op::AreaDown(x, factor)))
    }

    /// Records an operation with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<F>, backward: CustomBackward<F>) -> Var {
        let shape = value.shape().to_vec();
        self.push(value.into_data(), &shape, Op::Custom(inputs.to_vec(), backward))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients accumulate additively on every leaf that requires them; such leaves
    /// not reachable from `loss` receive zeros. Intermediate gradients are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut pending: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].value.requires_grad() {
            pending[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                accumulate(self.nodes[i].value.grad_slot(), g);
                continue;
            }
            for (input, contrib) in self.input_grads(i, &g) {
                if self.nodes[input.0].value.requires_grad() {
                    accumulate(&mut pending[input.0], contrib);
                }
            }
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let n = node.value.numel();
                node.value.grad_slot().get_or_insert_with(|| vec![F::zero(); n]);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn input_grads(&self, i: usize, g: &[F]) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let d = |v: Var| self.data(v);
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, map(g, |x| -x))],
            Op::Mul(a, b) => vec![(*a, zip(g, d(*b), |x, y| x * y)), (*b, zip(g, d(*a), |x, y| x * y))],
            Op::Div(a, b) => vec![
                (*a, zip(g, d(*b), |x, y| x / y)),
                (
                    *b,
                    g.iter()
                        .zip(d(*a).iter().zip(d(*b)))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect(),
                ),
            ],
            Op::AddN(parts) => parts.iter().map(|&p| (p, g.to_vec())).collect(),
            Op::Scale(a, c) => vec![(*a, map(g, |x| x * *c))],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Sigmoid(a) => vec![(*a, zip(g, out, |gv, s| gv * s * (F::one() - s)))],
            Op::Tanh(a) => vec![(*a, zip(g, out, |gv, t| gv * (F::one() - t * t)))],
            Op::Relu(a) => vec![(*a, zip(g, d(*a), |gv, x| if x > F::zero() { gv } else { F::zero() }))],
            Op::Maximum(a, b) => {
                let (da, db) = (d(*a), d(*b));
                let ga = (0..g.len())
                    .map(|j| if da[j] >= db[j] { g[j] } else { F::zero() })
                    .collect();
                let gb = (0..g.len())
                    .map(|j| if da[j] >= db[j] { F::zero() } else { g[j] })
                    .collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Concat(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).numel();
                        let s = g[off..off + n].to_vec();
                        off += n;
                        (p, s)
                    })
                    .collect()
            }
            Op::Slice { src, start } => {
                let full = self.value(*src);
                let (_, h, w) = full.chw().expect("sliced tensor is an image");
                let mut gs = vec![F::zero(); full.numel()];
                gs[start * h * w..start * h * w + g.len()].copy_from_slice(g);
                vec![(*src, gs)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0] / F::from_usize(n).unwrap(); n])]
            }
            Op::Conv2d { x, weight, bias, geom } => {
                let need = [self.needs(*x), self.needs(*weight), self.needs(*bias)];
                let grads = kernels::conv2d_backward(d(*x), d(*weight), g, geom, need);
                [(*x, grads.x), (*weight, grads.weight), (*bias, grads.bias)]
                    .into_iter()
                    .filter_map(|(v, gr)| gr.map(|gr| (v, gr)))
                    .collect()
            }
            Op::Up2(x) => {
                let (c, h, w) = self.value(*x).chw().expect("image");
                vec![(*x, kernels::up2_backward(g, c, h, w))]
            }
            Op::AreaDown(x, f) => {
                let (c, h, w) = self.value(*x).chw().expect("image");
                vec![(*x, kernels::area_down_backward(g, c, h, w, *f))]
            }
            Op::Custom(inputs, rule) => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
                inputs.iter().copied().zip(rule(&ins, &node.value, g)).collect()
            }
        }
    }
}

fn accumulate<F: Element>(slot: &mut Option<Vec<F>>, g: Vec<F>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}
