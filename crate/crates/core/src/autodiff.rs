//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and the handles of its
//! parents. Because parents always precede children, walking the node list
//! backwards is a valid reverse topological order. A tape is single-threaded
//! and meant to live for one forward/backward pass.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::tensor::{self, ConvGeometry, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Binary(BinaryKind),
    Unary(UnaryKind),
    Scale,
    Offset,
    Sum,
    MatMul,
    Transpose,
    Conv2d,
    LogAbsDet,
    Inverse,
    Reshape,
    SliceChannels,
    ConcatChannels,
    Gather,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Offset {
        a: Var,
    },
    Sum(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: ConvGeometry,
    },
    /// Saves `W^{-T}`, the gradient of `log|det W|`.
    LogAbsDet {
        a: Var,
        inv_t: Tensor,
    },
    Inverse(Var),
    Reshape(Var),
    SliceChannels {
        a: Var,
        start: usize,
    },
    ConcatChannels(Vec<Var>),
    Gather {
        a: Var,
        index: Rc<[usize]>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Binary { kind, .. } => OpKind::Binary(*kind),
            Op::Unary { kind, .. } => OpKind::Unary(*kind),
            Op::Scale { .. } => OpKind::Scale,
            Op::Offset { .. } => OpKind::Offset,
            Op::Sum(_) => OpKind::Sum,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::LogAbsDet { .. } => OpKind::LogAbsDet,
            Op::Inverse(_) => OpKind::Inverse,
            Op::Reshape(_) => OpKind::Reshape,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::ConcatChannels(_) => OpKind::ConcatChannels,
            Op::Gather { .. } => OpKind::Gather,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Unary { a, .. }
            | Op::Scale { a, .. }
            | Op::Offset { a }
            | Op::LogAbsDet { a, .. }
            | Op::SliceChannels { a, .. }
            | Op::Gather { a, .. } => vec![*a],
            Op::Sum(a) | Op::Transpose(a) | Op::Inverse(a) | Op::Reshape(a) => vec![*a],
            Op::ConcatChannels(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // -- elementwise ------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let broadcast = if sa == sb {
            false
        } else if is_channel_vector(&sb) && sb.iter().product::<usize>() == sa[sa.len() - 1] {
            true
        } else {
            return Err(Error::shape("elementwise", format!("{sa:?} with {sb:?}")));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let c = *sa.last().unwrap();
        if kind == BinaryKind::Div && bv.contains(&0.0) {
            return Err(Error::DivByZero("div"));
        }
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = if broadcast {
            av.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % c]))
                .collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(sa, data)?;
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
        ))
    }

    /// `a + b`; `b` may be a `[c]` or `[1, c]` vector broadcast over `a`'s last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Errors if any divisor entry is exactly zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            UnaryKind::Exp => x.map(f64::exp),
            UnaryKind::Log => {
                if x.data().iter().any(|&v| v <= 0.0) {
                    return Err(Error::LogDomain("log"));
                }
                x.map(f64::ln)
            }
            UnaryKind::Sigmoid => x.map(sigmoid),
            UnaryKind::Relu => x.map(|v| v.max(0.0)),
        };
        Ok(self.push(value, Op::Unary { kind, a }))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a).expect("exp is total")
    }

    /// Errors on non-positive entries.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a).expect("relu is total")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale { a, factor })
    }

    /// `a + constant`
    pub fn offset(&mut self, a: Var, constant: f64) -> Var {
        let value = self.value(a).map(|v| v + constant);
        self.push(value, Op::Offset { a })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    // -- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    /// Cross-correlation of `[h,w,cin]` input with `[kh,kw,cin,cout]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, geometry: ConvGeometry) -> Result<Var> {
        let value = tensor::conv2d(self.value(input), self.value(kernel), geometry)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geometry,
            },
        ))
    }

    /// `log|det W|` as a `[1]` tensor, together with the determinant sign.
    pub fn log_abs_det(&mut self, w: Var) -> Result<(Var, f64)> {
        let lu = Lu::factor(self.value(w))?;
        let (sign, logabs) = lu.slogdet();
        let inv_t = lu.inverse().transpose()?;
        Ok((
            self.push(Tensor::scalar(logabs), Op::LogAbsDet { a: w, inv_t }),
            sign,
        ))
    }

    pub fn inverse(&mut self, w: Var) -> Result<Var> {
        let value = Lu::factor(self.value(w))?.inverse();
        Ok(self.push(value, Op::Inverse(w)))
    }

    // -- structure --------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_channels(start, end)?;
        Ok(self.push(value, Op::SliceChannels { a, start }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_channels(&tensors)?;
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec())))
    }

    /// `out.data[i] = a.data[index[i]]`. The gradient scatters back, so
    /// repeated indices accumulate.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::OutOfRange(format!("gather index {bad} of {n}")));
        }
        let value = self.value(a).gather(&index, shape)?;
        Ok(self.push(value, Op::Gather { a, index }))
    }

    // -- reverse pass -----------------------------------------------------

    /// Populate gradients of the scalar `loss` for every node that depends on
    /// a parameter leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(contrib.data())
                    .for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let (av, bv) = (val(a).data(), val(b).data());
                let c = val(b).len();
                let bi = |k: usize| if broadcast { k % c } else { k };
                let gd = g.data();
                if wants(a) {
                    let ga: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                        BinaryKind::Mul => (0..gd.len()).map(|k| gd[k] * bv[bi(k)]).collect(),
                        BinaryKind::Div => (0..gd.len()).map(|k| gd[k] / bv[bi(k)]).collect(),
                    };
                    acc(a, Tensor::new(val(a).shape().to_vec(), ga).unwrap());
                }
                if wants(b) {
                    let mut gb = vec![0.0; c];
                    let mut put = |k: usize, v: f64| {
                        if broadcast {
                            gb[k % c] += v
                        } else {
                            gb[k] += v
                        }
                    };
                    for k in 0..gd.len() {
                        match kind {
                            BinaryKind::Add => put(k, gd[k]),
                            BinaryKind::Sub => put(k, -gd[k]),
                            BinaryKind::Mul => put(k, gd[k] * av[k]),
                            BinaryKind::Div => {
                                let y = bv[bi(k)];
                                put(k, -gd[k] * av[k] / (y * y))
                            }
                        }
                    }
                    acc(b, Tensor::new(val(b).shape().to_vec(), gb).unwrap());
                }
            }
            &Op::Unary { kind, a } => {
                let x = val(a).data();
                let y = node.value.data();
                let gd = g.data();
                let ga: Vec<f64> = (0..gd.len())
                    .map(|k| {
                        gd[k]
                            * match kind {
                                UnaryKind::Exp => y[k],
                                UnaryKind::Log => 1.0 / x[k],
                                UnaryKind::Sigmoid => y[k] * (1.0 - y[k]),
                                UnaryKind::Relu => {
                                    if x[k] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            }
                    })
                    .collect();
                acc(a, Tensor::new(val(a).shape().to_vec(), ga).unwrap());
            }
            &Op::Scale { a, factor } => acc(a, g.map(|v| v * factor)),
            &Op::Offset { a } => acc(a, g.clone()),
            &Op::Sum(a) => acc(a, Tensor::full(val(a).shape(), g.item())),
            &Op::MatMul(a, b) => {
                if wants(a) {
                    acc(a, g.matmul(&val(b).transpose().unwrap()).unwrap());
                }
                if wants(b) {
                    acc(b, val(a).transpose().unwrap().matmul(g).unwrap());
                }
            }
            &Op::Transpose(a) => acc(a, g.transpose().unwrap()),
            &Op::Conv2d {
                input,
                kernel,
                geometry,
            } => {
                if wants(input) {
                    acc(
                        input,
                        tensor::conv2d_grad_input(g, val(input).shape(), val(kernel), geometry),
                    );
                }
                if wants(kernel) {
                    acc(
                        kernel,
                        tensor::conv2d_grad_kernel(g, val(input), val(kernel).shape(), geometry),
                    );
                }
            }
            Op::LogAbsDet { a, inv_t } => {
                let s = g.item();
                acc(*a, inv_t.map(|v| v * s));
            }
            &Op::Inverse(a) => {
                // d(W^-1) = -W^-1 dW W^-1  =>  dL/dW = -W^-T G W^-T
                let vt = node.value.transpose().unwrap();
                let ga = vt.matmul(g).unwrap().matmul(&vt).unwrap().map(|v| -v);
                acc(a, ga);
            }
            &Op::Reshape(a) => acc(a, g.reshape(val(a).shape()).unwrap()),
            &Op::SliceChannels { a, start } => {
                let src = val(a);
                let c = src.channels();
                let width = g.channels();
                let mut ga = Tensor::zeros(src.shape());
                let rows = src.len() / c;
                let gd = g.data();
                let out = ga.data_mut();
                for r in 0..rows {
                    out[r * c + start..r * c + start + width]
                        .copy_from_slice(&gd[r * width..(r + 1) * width]);
                }
                acc(a, ga);
            }
            Op::ConcatChannels(parts) => {
                let mut start = 0;
                for &p in parts {
                    let width = val(p).channels();
                    acc(p, g.slice_channels(start, start + width).unwrap());
                    start += width;
                }
            }
            Op::Gather { a, index } => {
                let mut ga = Tensor::zeros(val(*a).shape());
                let out = ga.data_mut();
                for (k, &src) in index.iter().enumerate() {
                    out[src] += g.data()[k];
                }
                acc(*a, ga);
            }
        }
    }
}

fn is_channel_vector(shape: &[usize]) -> bool {
    matches!(shape, [_] | [1, _])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_hand_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[2], &[3., 4.]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4., 6.]);
        let z = tape.constant(Tensor::zeros(&[3]));
        let e = tape.exp(z);
        assert_eq!(tape.value(e).data(), &[1., 1., 1.]);
        let z0 = tape.constant(Tensor::zeros(&[1]));
        let sg = tape.sigmoid(z0);
        assert_eq!(tape.value(sg).item(), 0.5);
    }

    #[test]
    fn broadcast_channel_vector() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let s = tape.constant(t(&[1, 3], &[1., 10., 100.]));
        let u = tape.mul(v, s).unwrap();
        assert_eq!(tape.value(u).at(&[1, 1, 2]), 11.0 * 100.0);
        let bad = tape.constant(t(&[1, 2], &[1., 1.]));
        assert!(tape.add(v, bad).is_err());
    }

    #[test]
    fn division_by_exact_zero_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 1.]));
        let b = tape.constant(t(&[2], &[1., 0.]));
        assert!(matches!(tape.div(a, b), Err(Error::DivByZero(_))));
        assert!(tape.log(b).is_err());
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[2, 2], &[0.3, -1., 2., 5.]));
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[1.; 4]);

        let mut tape = Tape::new();
        let p = tape.param(t(&[2], &[1., 2.]));
        let sq = tape.mul(p, p).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[2], &[1., 2.]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1., 2.]));
        let p = tape.param(t(&[2], &[3., 4.]));
        let m = tape.mul(c, p).unwrap();
        let l = tape.sum(m);
        tape.backward(l).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(p).unwrap().data(), &[1., 2.]);
        assert_eq!(tape.op_kind(m), OpKind::Binary(BinaryKind::Mul));
        assert_eq!(tape.parents(m), vec![c, p]);
    }

    /// Random non-zero tensor with entries bounded away from zero.
    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let v: f64 = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    /// Central-difference check of d(sum(w ⊙ f(inputs)))/d(inputs) at 10
    /// random points. `w` is a random weighting so every output matters.
    fn fd_check(
        shapes: &[Vec<usize>],
        positive: bool,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    let t = rand_tensor(&mut rng, s);
                    if positive {
                        t.map(f64::abs)
                    } else {
                        t
                    }
                })
                .collect();
            let eval = |inputs: &[Tensor], weights: Option<&Tensor>| -> (f64, Vec<Tensor>, Tensor) {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
                let out = build(&mut tape, &vars).unwrap();
                let w = weights
                    .cloned()
                    .unwrap_or_else(|| Tensor::from_fn(tape.shape(out), |i| 0.5 + (i % 5) as f64 * 0.3));
                let wv = tape.constant(w.clone());
                let prod = tape.mul(out, wv).unwrap();
                let loss = tape.sum(prod);
                tape.backward(loss).unwrap();
                let grads = vars
                    .iter()
                    .map(|&v| {
                        tape.grad(v)
                            .cloned()
                            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
                    })
                    .collect();
                (tape.value(loss).item(), grads, w)
            };
            let (_, analytic, w) = eval(&inputs, None);
            let eps = 1e-6;
            for (k, input) in inputs.iter().enumerate() {
                let mut num = Tensor::zeros(input.shape());
                for j in 0..input.len() {
                    let mut plus = inputs.clone();
                    plus[k].data_mut()[j] += eps;
                    let mut minus = inputs.clone();
                    minus[k].data_mut()[j] -= eps;
                    let fp = eval(&plus, Some(&w)).0;
                    let fm = eval(&minus, Some(&w)).0;
                    num.data_mut()[j] = (fp - fm) / (2.0 * eps);
                }
                let diff: f64 = analytic[k]
                    .data()
                    .iter()
                    .zip(num.data())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let scale = analytic[k].sum_squares().sqrt().max(num.sum_squares().sqrt());
                assert!(
                    diff / scale.max(1e-12) < 1e-6,
                    "input {k}: rel err {}",
                    diff / scale
                );
            }
        }
    }

    #[test]
    fn fd_elementwise() {
        for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul, BinaryKind::Div] {
            fd_check(&[vec![2, 3], vec![2, 3]], false, |t, v| t.binary(kind, v[0], v[1]));
            fd_check(&[vec![2, 2, 3], vec![1, 3]], false, |t, v| {
                t.binary(kind, v[0], v[1])
            });
        }
        fd_check(&[vec![5]], false, |t, v| Ok(t.exp(v[0])));
        fd_check(&[vec![5]], true, |t, v| t.log(v[0]));
        fd_check(&[vec![5]], false, |t, v| Ok(t.sigmoid(v[0])));
        fd_check(&[vec![5]], false, |t, v| Ok(t.relu(v[0])));
        fd_check(&[vec![5]], false, |t, v| Ok(t.scale(v[0], -2.5)));
        fd_check(&[vec![5]], false, |t, v| Ok(t.offset(v[0], 2.0)));
        fd_check(&[vec![2, 3]], false, |t, v| Ok(t.sum(v[0])));
    }

    #[test]
    fn fd_linear_algebra() {
        fd_check(&[vec![2, 3], vec![3, 4]], false, |t, v| t.matmul(v[0], v[1]));
        fd_check(&[vec![2, 3]], false, |t, v| t.transpose(v[0]));
        fd_check(&[vec![5, 5, 2], vec![3, 3, 2, 3]], false, |t, v| {
            t.conv2d(v[0], v[1], ConvGeometry::new(1, 1))
        });
        fd_check(&[vec![6, 6, 2], vec![4, 4, 2, 2]], false, |t, v| {
            t.conv2d(v[0], v[1], ConvGeometry::new(2, 1))
        });
        let diag_heavy = |t: &mut Tape, v: Var| -> Result<Var> {
            let eye = t.constant(Tensor::eye(3).map(|x| x * 4.0));
            t.add(v, eye)
        };
        fd_check(&[vec![3, 3]], false, |t, v| {
            let w = diag_heavy(t, v[0])?;
            Ok(t.log_abs_det(w)?.0)
        });
        fd_check(&[vec![3, 3]], false, |t, v| {
            let w = diag_heavy(t, v[0])?;
            t.inverse(w)
        });
    }

    #[test]
    fn fd_structure() {
        fd_check(&[vec![2, 3]], false, |t, v| t.reshape(v[0], &[3, 2]));
        fd_check(&[vec![2, 2, 4]], false, |t, v| t.slice_channels(v[0], 1, 3));
        fd_check(&[vec![2, 2, 1], vec![2, 2, 3]], false, |t, v| {
            t.concat_channels(&[v[0], v[1]])
        });
        let idx: Rc<[usize]> = Rc::from(vec![3usize, 0, 0, 2, 1, 5]);
        fd_check(&[vec![6]], false, move |t, v| t.gather(v[0], idx.clone(), &[2, 3]));
    }

    #[test]
    fn concat_gradient_routes_to_parents() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 1]));
        let b = tape.param(Tensor::zeros(&[2, 2]));
        let c = tape.concat_channels(&[a, b]).unwrap();
        let w = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let m = tape.mul(c, w).unwrap();
        let l = tape.sum(m);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1., 4.]);
        assert_eq!(tape.grad(b).unwrap().data(), &[2., 3., 5., 6.]);
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut tape = Tape::new();
            let x = tape.param(rand_tensor(&mut rng, &[4, 4, 2]));
            let k = tape.param(rand_tensor(&mut rng, &[3, 3, 2, 2]));
            let y = tape.conv2d(x, k, ConvGeometry::new(1, 1)).unwrap();
            let s = tape.sigmoid(y);
            let l = tape.sum(s);
            tape.backward(l).unwrap();
            (tape.grad(x).unwrap().clone(), tape.grad(k).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
