//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every op applied to its [`Var`]s. [`Tape::backward`] walks
//! the record in reverse and returns gradients for every node that depends on a
//! leaf created with [`Tape::leaf`]. Tapes are cheap: build one per step.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use super::kernels;
use super::tensor::{Scalar, Tensor};

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sqr(usize),
    Sqrt(usize),
    Silu(usize),
    Tanh(usize),
    LeakyRelu(usize, T),
    /// `x[N, C, ...] + b[C]`
    BiasChannel(usize, usize),
    /// `x[N, C, ...] * g[C]`
    MulChannel(usize, usize),
    /// `x[N, C, ...] + e[N, C]`
    AddNc(usize, usize),
    /// `x[N, C, ...] * s[N, C]`
    MulNc(usize, usize),
    /// `[N, C, ...] -> [N, C]`
    MeanSpatial(usize),
    /// Constant per-sample factor over the leading axis.
    ScalePerSample(usize, Rc<Vec<T>>),
    /// Constant factor broadcast along the last axis.
    MulColumns(usize, Rc<Vec<T>>),
    /// `x * s` with `s` a single-element var.
    MulScalarVar(usize, usize),
    SumAll(usize),
    Reshape(usize),
    ConcatChannels(usize, usize),
    Conv2d { x: usize, w: usize, pad: usize },
    AvgPool2(usize),
    Upsample2(usize),
    /// `x[N, F] * w[O, F]^T`
    Linear(usize, usize),
    MatLeft(usize, Rc<Tensor<T>>),
    MatRight(usize, Rc<Tensor<T>>),
    BoxFilter(usize, usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by var.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Trainable input: gradients flow to it.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn unary(&self, a: usize, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));

        let acc = |grads: &mut Vec<Option<Tensor<T>>>, id: usize, g: Tensor<T>| {
            if !nodes[id].tracked {
                return;
            }
            match grads[id].as_mut() {
                Some(existing) => existing.add_assign(&g),
                None => grads[id] = Some(g),
            }
        };

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
            let wants = |i: usize| nodes[i].tracked;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        acc(&mut grads, *b, g.map(|v| -v));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(&mut grads, *a, g.zip_map(val(*b), |g, y| g * y));
                    }
                    if wants(*b) {
                        acc(&mut grads, *b, g.zip_map(val(*a), |g, x| g * x));
                    }
                }
                Op::Div(a, b) => {
                    if wants(*a) {
                        acc(&mut grads, *a, g.zip_map(val(*b), |g, y| g / y));
                    }
                    if wants(*b) {
                        // d(a/b)/db = -out / b
                        let t = g.zip_map(&node.value, |g, o| g * o);
                        acc(&mut grads, *b, t.zip_map(val(*b), |t, y| -t / y));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.map(|v| v * c));
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(&mut grads, *a, g.reshaped(&shape));
                }
                Op::Sqr(a) => {
                    let two = T::of(2.0);
                    acc(&mut grads, *a, g.zip_map(val(*a), |g, x| two * g * x));
                }
                Op::Sqrt(a) => {
                    let half = T::of(0.5);
                    acc(&mut grads, *a, g.zip_map(&node.value, |g, s| half * g / s));
                }
                Op::Silu(a) => {
                    acc(
                        &mut grads,
                        *a,
                        g.zip_map(val(*a), |g, x| {
                            let s = T::one() / (T::one() + (-x).exp());
                            g * s * (T::one() + x * (T::one() - s))
                        }),
                    );
                }
                Op::Tanh(a) => {
                    acc(&mut grads, *a, g.zip_map(&node.value, |g, y| g * (T::one() - y * y)));
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    acc(
                        &mut grads,
                        *a,
                        g.zip_map(val(*a), |g, x| if x > T::zero() { g } else { g * slope }),
                    );
                }
                Op::BiasChannel(x, b) => {
                    if wants(*b) {
                        acc(&mut grads, *b, reduce_channels(&g, val(*x).shape(), None));
                    }
                    acc(&mut grads, *x, g);
                }
                Op::MulChannel(x, gamma) => {
                    let (xs, gs) = (val(*x), val(*gamma));
                    if wants(*gamma) {
                        acc(&mut grads, *gamma, reduce_channels(&g, xs.shape(), Some(xs)));
                    }
                    if wants(*x) {
                        acc(&mut grads, *x, broadcast_channels(&g, gs, |g, s| g * s));
                    }
                }
                Op::AddNc(x, e) => {
                    if wants(*e) {
                        acc(&mut grads, *e, reduce_nc(&g, None));
                    }
                    acc(&mut grads, *x, g);
                }
                Op::MulNc(x, s) => {
                    let (xs, ss) = (val(*x), val(*s));
                    if wants(*s) {
                        acc(&mut grads, *s, reduce_nc(&g, Some(xs)));
                    }
                    if wants(*x) {
                        acc(&mut grads, *x, broadcast_nc(&g, ss, |g, s| g * s));
                    }
                }
                Op::MeanSpatial(x) => {
                    let xs = val(*x).shape().to_vec();
                    let per: usize = xs[2..].iter().product();
                    let inv = T::one() / T::of(per as f64);
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v * inv, per))
                        .collect();
                    acc(&mut grads, *x, Tensor::new(&xs, data));
                }
                Op::ScalePerSample(x, s) => {
                    acc(&mut grads, *x, scale_per_sample(&g, s));
                }
                Op::MulColumns(x, m) => {
                    acc(&mut grads, *x, mul_columns(&g, m));
                }
                Op::MulScalarVar(x, s) => {
                    let sv = val(*s).data()[0];
                    if wants(*s) {
                        let d: T = g.data().iter().zip(val(*x).data()).map(|(&g, &x)| g * x).sum();
                        acc(&mut grads, *s, Tensor::new(val(*s).shape(), vec![d]));
                    }
                    if wants(*x) {
                        acc(&mut grads, *x, g.map(|v| v * sv));
                    }
                }
                Op::SumAll(x) => {
                    let gv = g.data()[0];
                    acc(&mut grads, *x, Tensor::full(val(*x).shape(), gv));
                }
                Op::ConcatChannels(a, b) => {
                    let (ga, gb) = split_channels(&g, val(*a).shape()[1]);
                    if wants(*a) {
                        acc(&mut grads, *a, ga);
                    }
                    if wants(*b) {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Conv2d { x, w, pad } => {
                    let (dx, dw) =
                        kernels::conv2d_backward(val(*x), val(*w), *pad, &g, wants(*x), wants(*w));
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(&mut grads, *w, dw);
                    }
                }
                Op::AvgPool2(x) => {
                    acc(&mut grads, *x, kernels::avg_pool2_backward(val(*x).shape(), &g));
                }
                Op::Upsample2(x) => {
                    acc(&mut grads, *x, kernels::upsample2_backward(val(*x).shape(), &g));
                }
                Op::Linear(x, w) => {
                    let (xs, ws) = (val(*x), val(*w));
                    let (n, f) = (xs.shape()[0], xs.shape()[1]);
                    let o = ws.shape()[0];
                    if wants(*x) {
                        // dx [n, f] = g [n, o] * w [o, f]
                        let mut dx = vec![T::zero(); n * f];
                        T::gemm(
                            n, o, f, T::one(), g.data(), o as isize, 1, ws.data(), f as isize, 1,
                            T::zero(), &mut dx, f as isize, 1,
                        );
                        acc(&mut grads, *x, Tensor::new(xs.shape(), dx));
                    }
                    if wants(*w) {
                        // dw [o, f] = g^T [o, n] * x [n, f]
                        let mut dw = vec![T::zero(); o * f];
                        T::gemm(
                            o, n, f, T::one(), g.data(), 1, o as isize, xs.data(), f as isize, 1,
                            T::zero(), &mut dw, f as isize, 1,
                        );
                        acc(&mut grads, *w, Tensor::new(ws.shape(), dw));
                    }
                }
                Op::MatLeft(x, m) => {
                    acc(&mut grads, *x, kernels::mat_left(m, &g, true));
                }
                Op::MatRight(x, m) => {
                    acc(&mut grads, *x, kernels::mat_right(&g, m, true));
                }
                Op::BoxFilter(x, k) => {
                    acc(&mut grads, *x, kernels::box_filter_backward(val(*x).shape(), *k, &g));
                }
            }
        }
        Gradients { grads }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Self) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    fn map(self, f: impl Fn(T) -> T, op: Op<T>) -> Self {
        let v = self.value().map(f);
        self.tape.unary(self.id, v, op)
    }

    pub fn scale(self, c: T) -> Self {
        self.map(|v| v * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Self {
        self.map(|v| v + c, Op::AddScalar(self.id))
    }

    pub fn sqr(self) -> Self {
        self.map(|v| v * v, Op::Sqr(self.id))
    }

    pub fn sqrt(self) -> Self {
        self.map(|v| v.sqrt(), Op::Sqrt(self.id))
    }

    pub fn silu(self) -> Self {
        self.map(|v| v / (T::one() + (-v).exp()), Op::Silu(self.id))
    }

    pub fn tanh(self) -> Self {
        self.map(|v| v.tanh(), Op::Tanh(self.id))
    }

    pub fn leaky_relu(self, slope: T) -> Self {
        self.map(
            |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn add_channel_bias(self, b: Self) -> Self {
        self.same_tape(&b);
        let out = broadcast_channels(&self.value(), &b.value(), |x, b| x + b);
        self.tape.binary(self.id, b.id, out, Op::BiasChannel(self.id, b.id))
    }

    pub fn mul_channel(self, g: Self) -> Self {
        self.same_tape(&g);
        let out = broadcast_channels(&self.value(), &g.value(), |x, g| x * g);
        self.tape.binary(self.id, g.id, out, Op::MulChannel(self.id, g.id))
    }

    pub fn add_nc(self, e: Self) -> Self {
        self.same_tape(&e);
        let out = broadcast_nc(&self.value(), &e.value(), |x, e| x + e);
        self.tape.binary(self.id, e.id, out, Op::AddNc(self.id, e.id))
    }

    pub fn mul_nc(self, s: Self) -> Self {
        self.same_tape(&s);
        let out = broadcast_nc(&self.value(), &s.value(), |x, s| x * s);
        self.tape.binary(self.id, s.id, out, Op::MulNc(self.id, s.id))
    }

    /// Mean over every axis after the first two.
    pub fn mean_spatial(self) -> Self {
        let v = self.value();
        let s = v.shape();
        assert!(s.len() >= 3, "mean_spatial needs rank >= 3");
        let per: usize = s[2..].iter().product();
        let inv = T::one() / T::of(per as f64);
        let data = v
            .data()
            .chunks_exact(per)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&s[..2], data);
        self.tape.unary(self.id, out, Op::MeanSpatial(self.id))
    }

    pub fn scale_per_sample(self, s: &[T]) -> Self {
        let s = Rc::new(s.to_vec());
        let out = scale_per_sample(&self.value(), &s);
        self.tape.unary(self.id, out, Op::ScalePerSample(self.id, s))
    }

    pub fn mul_columns(self, m: &[T]) -> Self {
        let m = Rc::new(m.to_vec());
        let out = mul_columns(&self.value(), &m);
        self.tape.unary(self.id, out, Op::MulColumns(self.id, m))
    }

    pub fn mul_scalar_var(self, s: Self) -> Self {
        self.same_tape(&s);
        let sv = s.value();
        assert_eq!(sv.len(), 1, "mul_scalar_var expects a single-element scale");
        let c = sv.data()[0];
        let out = self.value().map(|v| v * c);
        self.tape.binary(self.id, s.id, out, Op::MulScalarVar(self.id, s.id))
    }

    pub fn sum_all(self) -> Self {
        let out = Tensor::scalar(self.value().sum());
        self.tape.unary(self.id, out, Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Self {
        let n = self.value().len();
        self.sum_all().scale(T::one() / T::of(n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let out = (*self.value()).clone().reshaped(shape);
        self.tape.unary(self.id, out, Op::Reshape(self.id))
    }

    pub fn concat_channels(self, other: Self) -> Self {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (n, ca, h, w) = kernels::dims4(a.shape());
        let (nb, cb, hb, wb) = kernels::dims4(b.shape());
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels shape mismatch");
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            data.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
        }
        let out = Tensor::new(&[n, ca + cb, h, w], data);
        self.tape
            .binary(self.id, other.id, out, Op::ConcatChannels(self.id, other.id))
    }

    pub fn conv2d(self, w: Self, pad: usize) -> Self {
        self.same_tape(&w);
        let out = kernels::conv2d(&self.value(), &w.value(), pad);
        self.tape.binary(
            self.id,
            w.id,
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                pad,
            },
        )
    }

    pub fn avg_pool2(self) -> Self {
        let out = kernels::avg_pool2(&self.value());
        self.tape.unary(self.id, out, Op::AvgPool2(self.id))
    }

    pub fn upsample2(self) -> Self {
        let out = kernels::upsample2(&self.value());
        self.tape.unary(self.id, out, Op::Upsample2(self.id))
    }

    pub fn linear(self, w: Self) -> Self {
        self.same_tape(&w);
        let (xv, wv) = (self.value(), w.value());
        let (n, f) = (xv.shape()[0], xv.shape()[1]);
        let (o, fw) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(f, fw, "linear feature mismatch");
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            f,
            o,
            T::one(),
            xv.data(),
            f as isize,
            1,
            wv.data(),
            1,
            f as isize,
            T::zero(),
            &mut out,
            o as isize,
            1,
        );
        self.tape
            .binary(self.id, w.id, Tensor::new(&[n, o], out), Op::Linear(self.id, w.id))
    }

    /// Left-multiplies every trailing matrix by the constant `m`.
    pub fn mat_left(self, m: &Rc<Tensor<T>>) -> Self {
        let out = kernels::mat_left(m, &self.value(), false);
        self.tape.unary(self.id, out, Op::MatLeft(self.id, Rc::clone(m)))
    }

    /// Right-multiplies every trailing matrix by the constant `m`.
    pub fn mat_right(self, m: &Rc<Tensor<T>>) -> Self {
        let out = kernels::mat_right(&self.value(), m, false);
        self.tape.unary(self.id, out, Op::MatRight(self.id, Rc::clone(m)))
    }

    pub fn box_filter(self, k: usize) -> Self {
        let out = kernels::box_filter(&self.value(), k);
        self.tape.unary(self.id, out, Op::BoxFilter(self.id, k))
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'t, T: Scalar> ops::$trait for Var<'t, T> {
            type Output = Var<'t, T>;

            fn $method(self, rhs: Self) -> Self::Output {
                self.same_tape(&rhs);
                let out = self.value().zip_map(&rhs.value(), $f);
                self.tape
                    .binary(self.id, rhs.id, out, Op::$variant(self.id, rhs.id))
            }
        }
    };
}

binary_op!(Add, add, Add, |a, b| a + b);
binary_op!(Sub, sub, Sub, |a, b| a - b);
binary_op!(Mul, mul, Mul, |a, b| a * b);
binary_op!(Div, div, Div, |a, b| a / b);

impl<'t, T: Scalar> ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;

    fn neg(self) -> Self::Output {
        self.scale(-T::one())
    }
}

fn broadcast_channels<T: Scalar>(x: &Tensor<T>, c: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let s = x.shape();
    let ch = s[1];
    assert_eq!(c.len(), ch, "per-channel operand has wrong length");
    let per: usize = s[2..].iter().product();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_exact_mut(per).enumerate() {
        let cv = c.data()[i % ch];
        chunk.iter_mut().for_each(|v| *v = f(*v, cv));
    }
    out
}

fn reduce_channels<T: Scalar>(g: &Tensor<T>, shape: &[usize], with: Option<&Tensor<T>>) -> Tensor<T> {
    let ch = shape[1];
    let per: usize = shape[2..].iter().product();
    let mut out = vec![T::zero(); ch];
    for (i, chunk) in g.data().chunks_exact(per).enumerate() {
        let s: T = match with {
            Some(x) => chunk
                .iter()
                .zip(&x.data()[i * per..(i + 1) * per])
                .map(|(&a, &b)| a * b)
                .sum(),
            None => chunk.iter().copied().sum(),
        };
        out[i % ch] += s;
    }
    Tensor::new(&[ch], out)
}

fn broadcast_nc<T: Scalar>(x: &Tensor<T>, e: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(e.shape(), &s[..2], "per-(N, C) operand has wrong shape");
    let per: usize = s[2..].iter().product();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_exact_mut(per).enumerate() {
        let ev = e.data()[i];
        chunk.iter_mut().for_each(|v| *v = f(*v, ev));
    }
    out
}

fn reduce_nc<T: Scalar>(g: &Tensor<T>, with: Option<&Tensor<T>>) -> Tensor<T> {
    let s = g.shape();
    let per: usize = s[2..].iter().product();
    let data = g
        .data()
        .chunks_exact(per)
        .enumerate()
        .map(|(i, chunk)| match with {
            Some(x) => chunk
                .iter()
                .zip(&x.data()[i * per..(i + 1) * per])
                .map(|(&a, &b)| a * b)
                .sum(),
            None => chunk.iter().copied().sum(),
        })
        .collect();
    Tensor::new(&s[..2], data)
}

fn scale_per_sample<T: Scalar>(x: &Tensor<T>, s: &[T]) -> Tensor<T> {
    let n = x.shape()[0];
    assert_eq!(s.len(), n, "per-sample factor length mismatch");
    let per = x.len() / n.max(1);
    let mut out = x.clone();
    for (chunk, &f) in out.data_mut().chunks_exact_mut(per).zip(s) {
        chunk.iter_mut().for_each(|v| *v *= f);
    }
    out
}

fn mul_columns<T: Scalar>(x: &Tensor<T>, m: &[T]) -> Tensor<T> {
    let w = *x.shape().last().expect("rank >= 1");
    assert_eq!(m.len(), w, "column factor length mismatch");
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.iter_mut().zip(m).for_each(|(v, &f)| *v *= f);
    }
    out
}

fn split_channels<T: Scalar>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = kernels::dims4(g.shape());
    let cb = c - ca;
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut a = Vec::with_capacity(n * pa);
    let mut b = Vec::with_capacity(n * pb);
    for i in 0..n {
        let base = i * (pa + pb);
        a.extend_from_slice(&g.data()[base..base + pa]);
        b.extend_from_slice(&g.data()[base + pa..base + pa + pb]);
    }
    (
        Tensor::new(&[n, ca, h, w], a),
        Tensor::new(&[n, cb, h, w], b),
    )
}
