//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation eagerly; [`Var`] is a cheap handle into
//! it. [`Tape::backward`] walks the record in reverse, accumulating gradients
//! additively into every tracked leaf, and consumes the graph.
//!
//! The op set is closed: elementwise arithmetic and activations, reductions,
//! matmul/linear, 1-D convolution, nearest upsampling, channel concat/slice,
//! time windowing and the STFT/iSTFT pair. Anything outside it is simply not
//! expressible.

mod checkpoint;
mod gradcheck;
pub(crate) mod kernels;
mod optim;
mod tensor;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

pub use checkpoint::{Checkpoint, Record, RecordData};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use optim::{AdamW, AdamWConfig, Ema};
pub use tensor::Tensor;

use crate::error::{shape_err, Error, Result};
use crate::signal::stft::StftPlan;
use kernels::ConvGeom;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Exp,
    Log,
    Sqrt,
    Pow(f64),
    Abs,
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
    Softplus,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Pow(p) => pow_m(x, p),
            Unary::Abs => x.abs(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Softplus => softplus(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Pow(p) => p * pow_m(x, p - 1.0),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Softplus => sigmoid(x),
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

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Unary(usize, Unary),
    /// SiLU with the forward sigmoid kept for the backward pass.
    Silu { x: usize, sig: Vec<f64> },
    Sum(usize),
    Matmul(usize, usize),
    Linear { x: usize, w: usize, b: usize },
    Conv1d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Upsample2(usize),
    AddChannelBias { x: usize, bias: usize },
    Concat(Vec<usize>),
    SliceChannels { x: usize, start: usize },
    TimeWindow { x: usize, start: isize },
    Reshape(usize),
    MagPow { x: usize, gain: f64, power: f64, eps: f64 },
    Stft { x: usize, plan: Arc<StftPlan> },
    Istft { x: usize, plan: Arc<StftPlan> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Eager operation record.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, tracked });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    pub fn leaves(&self, values: &[Tensor]) -> Vec<Var<'_>> {
        values.iter().map(|v| self.leaf(v.clone())).collect()
    }

    pub fn constants(&self, values: &[Tensor]) -> Vec<Var<'_>> {
        values.iter().map(|v| self.constant(v.clone())).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Back-propagates from a scalar `loss`. The recorded graph is released;
    /// calling this again on the same tape is a contract error.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if nodes.is_empty() || loss.id >= nodes.len() {
            return Err(Error::Contract("backward on a consumed or empty tape".into()));
        }
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf => leaf_grads[id] = Some(g),
                Op::Const => {}
                op => propagate(&nodes, op, &node.value, g, &mut grads)?,
            }
        }
        let shapes = nodes
            .iter()
            .map(|n| if matches!(n.op, Op::Leaf) { n.value.shape().to_vec() } else { Vec::new() })
            .collect();
        Ok(Gradients { grads: leaf_grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), data)
}

fn propagate(
    nodes: &[Node],
    op: &Op,
    out: &Tensor,
    g: Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let val = |id: usize| nodes[id].value.clone();
    let tracked = |id: usize| nodes[id].tracked;
    match *op {
        Op::Leaf | Op::Const => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, b, g.clone());
            accumulate(grads, nodes, a, g);
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, b, g.map(|v| -v));
            accumulate(grads, nodes, a, g);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            if tracked(a) {
                accumulate(grads, nodes, a, g.zip_map(&vb, |g, y| g * y)?);
            }
            if tracked(b) {
                accumulate(grads, nodes, b, g.zip_map(&va, |g, x| g * x)?);
            }
        }
        Op::Div(a, b) => {
            let vb = val(b);
            if tracked(a) {
                accumulate(grads, nodes, a, g.zip_map(&vb, |g, y| g / y)?);
            }
            if tracked(b) {
                // d(a/b)/db = -(a/b)/b
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(vb.data())
                    .map(|((g, q), y)| -g * q / y)
                    .collect();
                accumulate(grads, nodes, b, like(&vb, d));
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, a, g.map(|v| v * s)),
        Op::Shift(a) => accumulate(grads, nodes, a, g),
        Op::Unary(a, u) => {
            let va = val(a);
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(va.data())
                .zip(out.data())
                .map(|((g, x), y)| g * u.deriv(*x, *y))
                .collect();
            accumulate(grads, nodes, a, like(&va, d));
        }
        Op::Silu { x, ref sig } => {
            let vx = val(x);
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(vx.data())
                .zip(sig)
                .map(|((g, x), s)| g * s * (1.0 + x * (1.0 - s)))
                .collect();
            accumulate(grads, nodes, x, like(&vx, d));
        }
        Op::Sum(a) => {
            let va = val(a);
            accumulate(grads, nodes, a, Tensor::full(va.shape().to_vec(), g.item()));
        }
        Op::Matmul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if tracked(a) {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, vb.data(), true, 0.0, &mut ga);
                accumulate(grads, nodes, a, like(&va, ga));
            }
            if tracked(b) {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, va.data(), true, g.data(), false, 0.0, &mut gb);
                accumulate(grads, nodes, b, like(&vb, gb));
            }
        }
        Op::Linear { x, w, b } => {
            let (vx, vw) = (val(x), val(w));
            let (batch, din) = (vx.shape()[0], vx.shape()[1]);
            let dout = vw.shape()[0];
            if tracked(x) {
                let mut gx = vec![0.0; batch * din];
                kernels::gemm(batch, dout, din, g.data(), false, vw.data(), false, 0.0, &mut gx);
                accumulate(grads, nodes, x, like(&vx, gx));
            }
            if tracked(w) {
                let mut gw = vec![0.0; dout * din];
                kernels::gemm(dout, batch, din, g.data(), true, vx.data(), false, 0.0, &mut gw);
                accumulate(grads, nodes, w, like(&vw, gw));
            }
            if tracked(b) {
                let mut gb = vec![0.0; dout];
                for r in 0..batch {
                    for (o, acc) in gb.iter_mut().enumerate() {
                        *acc += g.data()[r * dout + o];
                    }
                }
                accumulate(grads, nodes, b, Tensor::from_parts(vec![dout], gb));
            }
        }
        Op::Conv1d { x, w, b, geom } => {
            let (vx, vw) = (val(x), val(w));
            let need_b = b.is_some_and(tracked);
            let (gx, gw, gb) =
                kernels::conv1d_backward(&geom, vx.data(), vw.data(), g.data(), tracked(x), tracked(w), need_b);
            if let Some(gx) = gx {
                accumulate(grads, nodes, x, like(&vx, gx));
            }
            if let Some(gw) = gw {
                accumulate(grads, nodes, w, like(&vw, gw));
            }
            if let (Some(b), Some(gb)) = (b, gb) {
                accumulate(grads, nodes, b, Tensor::from_parts(vec![geom.c_out], gb));
            }
        }
        Op::Upsample2(a) => {
            let va = val(a);
            let gx: Vec<f64> = g.data().chunks_exact(2).map(|p| p[0] + p[1]).collect();
            accumulate(grads, nodes, a, like(&va, gx));
        }
        Op::AddChannelBias { x, bias } => {
            let vb = val(bias);
            if tracked(bias) {
                let (bt, c, t) = g.dims3()?;
                let mut gb = vec![0.0; bt * c];
                for (i, acc) in gb.iter_mut().enumerate() {
                    *acc = g.data()[i * t..(i + 1) * t].iter().sum();
                }
                accumulate(grads, nodes, bias, like(&vb, gb));
            }
            accumulate(grads, nodes, x, g);
        }
        Op::Concat(ref parts) => {
            let (b, c_total, t) = g.dims3()?;
            let mut offset = 0;
            for &p in parts {
                let vp = val(p);
                let (_, c, _) = vp.dims3()?;
                if tracked(p) {
                    let mut gp = Vec::with_capacity(vp.len());
                    for bi in 0..b {
                        gp.extend_from_slice(&g.data()[(bi * c_total + offset) * t..][..c * t]);
                    }
                    accumulate(grads, nodes, p, like(&vp, gp));
                }
                offset += c;
            }
        }
        Op::SliceChannels { x, start } => {
            let vx = val(x);
            let (b, c_in, t) = vx.dims3()?;
            let (_, c, _) = g.dims3()?;
            let mut gx = vec![0.0; vx.len()];
            for bi in 0..b {
                gx[(bi * c_in + start) * t..][..c * t].copy_from_slice(&g.data()[bi * c * t..][..c * t]);
            }
            accumulate(grads, nodes, x, like(&vx, gx));
        }
        Op::TimeWindow { x, start } => {
            let vx = val(x);
            let t_in = *vx.shape().last().unwrap();
            let t_out = *g.shape().last().unwrap();
            let rows = vx.len() / t_in.max(1);
            let mut gx = vec![0.0; vx.len()];
            for r in 0..rows {
                for j in 0..t_out {
                    let i = start + j as isize;
                    if i >= 0 && (i as usize) < t_in {
                        gx[r * t_in + i as usize] += g.data()[r * t_out + j];
                    }
                }
            }
            accumulate(grads, nodes, x, like(&vx, gx));
        }
        Op::Reshape(a) => {
            let va = val(a);
            accumulate(grads, nodes, a, g.reshape(va.shape().to_vec())?);
        }
        Op::MagPow { x, gain, power, eps } => {
            let vx = val(x);
            let mut gx = vec![0.0; vx.len()];
            for_complex_pairs(&vx, |re_i, im_i| {
                let (re, im) = (vx.data()[re_i], vx.data()[im_i]);
                let m = (re * re + im * im + eps).sqrt();
                let phi = gain * pow_m(m, power);
                // phi'(m) / m
                let dphi = gain * power * pow_m(m, power - 2.0);
                let (gr, gi) = (g.data()[re_i], g.data()[im_i]);
                let proj = dphi * (gr * re + gi * im);
                gx[re_i] = gr * phi + re * proj;
                gx[im_i] = gi * phi + im * proj;
            })?;
            accumulate(grads, nodes, x, like(&vx, gx));
        }
        Op::Stft { x, ref plan } => {
            let vx = val(x);
            let (b, len) = vx.dims2()?;
            let per = g.len() / b;
            let mut gx = vec![0.0; vx.len()];
            for bi in 0..b {
                plan.forward_adjoint(&g.data()[bi * per..][..per], &mut gx[bi * len..][..len]);
            }
            accumulate(grads, nodes, x, like(&vx, gx));
        }
        Op::Istft { x, ref plan } => {
            let vx = val(x);
            let (b, len) = g.dims2()?;
            let per = vx.len() / b;
            let mut gs = vec![0.0; vx.len()];
            for bi in 0..b {
                plan.inverse_adjoint(&g.data()[bi * len..][..len], &mut gs[bi * per..][..per]);
            }
            accumulate(grads, nodes, x, like(&vx, gs));
        }
    }
    Ok(())
}

/// `m^p` for `m > 0`, with the exponents of square-root compression done
/// without `powf`.
fn pow_m(m: f64, p: f64) -> f64 {
    match p {
        0.0 => 1.0,
        1.0 => m,
        2.0 => m * m,
        -0.5 => 1.0 / m.sqrt(),
        -1.0 => 1.0 / m,
        -1.5 => 1.0 / (m * m.sqrt()),
        -2.0 => 1.0 / (m * m),
        _ => m.powf(p),
    }
}

/// Calls `f(re_index, im_index)` for every complex pair of a `[B, 2F, T]`
/// spectrogram tensor.
fn for_complex_pairs(t: &Tensor, mut f: impl FnMut(usize, usize)) -> Result<()> {
    let (b, c, frames) = t.dims3()?;
    if c % 2 != 0 {
        return Err(shape_err(format!("complex layout needs an even channel count, got {c}")));
    }
    let half = c / 2 * frames;
    for bi in 0..b {
        let base = bi * c * frames;
        for i in 0..half {
            f(base + i, base + half + i);
        }
    }
    Ok(())
}

/// Gradients of tracked leaves after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    /// Leaf shapes, kept because `backward` releases the graph.
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf that must have been reached from the loss.
    pub fn wrt(&self, v: Var<'_>) -> Result<Tensor> {
        self.get(v)
            .cloned()
            .ok_or_else(|| Error::MissingGradient(format!("leaf #{} not reached from the loss", v.id)))
    }

    /// Gradient of a leaf, zero when it did not influence the loss.
    pub fn wrt_or_zero(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }

    pub fn collect(&self, vars: &[Var<'_>]) -> Vec<Tensor> {
        vars.iter().map(|&v| self.wrt_or_zero(v)).collect()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn derive(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let tracked = inputs.iter().any(|&i| self.tape.tracked(i));
        self.tape.push(value, op, tracked)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let v = self.value().zip_map(&other.value(), f)?;
        Ok(self.derive(v, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.derive(v, Op::Scale(self.id, s), &[self.id])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.derive(v, Op::Shift(self.id), &[self.id])
    }

    fn unary(self, u: Unary) -> Var<'t> {
        let v = self.value().map(|x| u.apply(x));
        self.derive(v, Op::Unary(self.id, u), &[self.id])
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Log)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(Unary::Pow(p))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Pow(2.0))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn silu(self) -> Var<'t> {
        let v = self.value();
        let sig: Vec<f64> = v.data().iter().map(|&x| sigmoid(x)).collect();
        let y = v.data().iter().zip(&sig).map(|(x, s)| x * s).collect();
        self.derive(like(&v, y), Op::Silu { x: self.id, sig }, &[self.id])
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(Unary::LeakyRelu(slope))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    /// Sum of all elements, as a `[]` scalar.
    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.derive(v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(shape_err(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
        Ok(self.derive(Tensor::from_parts(vec![m, n], c), Op::Matmul(self.id, other.id), &[self.id, other.id]))
    }

    /// `x·wᵀ + b` for `x: [B, Din]`, `w: [Dout, Din]`, `b: [Dout]`.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (batch, din) = xv.dims2()?;
        let (dout, din2) = wv.dims2()?;
        if din != din2 || bv.shape() != [dout] {
            return Err(shape_err(format!(
                "linear x{:?} w{:?} b{:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut y = vec![0.0; batch * dout];
        for r in 0..batch {
            y[r * dout..(r + 1) * dout].copy_from_slice(bv.data());
        }
        kernels::gemm(batch, din, dout, xv.data(), false, wv.data(), true, 1.0, &mut y);
        let op = Op::Linear { x: self.id, w: w.id, b: b.id };
        Ok(self.derive(Tensor::from_parts(vec![batch, dout], y), op, &[self.id, w.id, b.id]))
    }

    /// 1-D convolution of `[B, Cin, T]` with `w: [Cout, Cin, K]`.
    pub fn conv1d(self, w: Var<'t>, b: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (xv, wv) = (self.value(), w.value());
        let (batch, c_in, t_in) = xv.dims3()?;
        let (c_out, c_in2, kernel) = wv.dims3()?;
        if c_in != c_in2 || stride == 0 || t_in + 2 * pad < kernel {
            return Err(shape_err(format!(
                "conv1d x{:?} w{:?} stride {stride} pad {pad}",
                xv.shape(),
                wv.shape()
            )));
        }
        let bias = b.map(|b| b.value());
        if let Some(bv) = &bias {
            bv.expect_shape(&[c_out])?;
        }
        let geom = ConvGeom { batch, c_in, t_in, c_out, kernel, stride, pad };
        let y = kernels::conv1d_forward(&geom, xv.data(), wv.data(), bias.as_ref().map(|b| b.data()));
        let mut inputs = vec![self.id, w.id];
        inputs.extend(b.map(|b| b.id));
        let op = Op::Conv1d { x: self.id, w: w.id, b: b.map(|b| b.id), geom };
        Ok(self.derive(Tensor::from_parts(vec![batch, c_out, geom.t_out()], y), op, &inputs))
    }

    /// Nearest-neighbour ×2 upsampling along the last axis.
    pub fn upsample2(self) -> Var<'t> {
        let v = self.value();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() *= 2;
        let data: Vec<f64> = v.data().iter().flat_map(|&x| [x, x]).collect();
        self.derive(Tensor::from_parts(shape, data), Op::Upsample2(self.id), &[self.id])
    }

    /// Adds `bias: [B, C]` to every time step of `[B, C, T]`.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (xv, bv) = (self.value(), bias.value());
        let (b, c, t) = xv.dims3()?;
        bv.expect_shape(&[b, c])?;
        let mut y = xv.data().to_vec();
        for (i, bias) in bv.data().iter().enumerate() {
            y[i * t..(i + 1) * t].iter_mut().for_each(|v| *v += bias);
        }
        let op = Op::AddChannelBias { x: self.id, bias: bias.id };
        Ok(self.derive(Tensor::from_parts(vec![b, c, t], y), op, &[self.id, bias.id]))
    }

    /// Concatenates `[B, Ci, T]` tensors along the channel axis.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let (b, _, t) = vals[0].dims3()?;
        let mut chans = Vec::with_capacity(vals.len());
        for v in &vals {
            let (b2, c, t2) = v.dims3()?;
            if b2 != b || t2 != t {
                return Err(shape_err(format!("concat {:?} with {:?}", vals[0].shape(), v.shape())));
            }
            chans.push(c);
        }
        let c_total: usize = chans.iter().sum();
        let mut y = Vec::with_capacity(b * c_total * t);
        for bi in 0..b {
            for (v, &c) in vals.iter().zip(&chans) {
                y.extend_from_slice(&v.data()[bi * c * t..][..c * t]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.derive(Tensor::from_parts(vec![b, c_total, t], y), Op::Concat(ids.clone()), &ids))
    }

    /// Channels `start..start+len` of `[B, C, T]`.
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (b, c, t) = v.dims3()?;
        if start + len > c {
            return Err(shape_err(format!("channel slice {start}+{len} of {c}")));
        }
        let mut y = Vec::with_capacity(b * len * t);
        for bi in 0..b {
            y.extend_from_slice(&v.data()[(bi * c + start) * t..][..len * t]);
        }
        let op = Op::SliceChannels { x: self.id, start };
        Ok(self.derive(Tensor::from_parts(vec![b, len, t], y), op, &[self.id]))
    }

    /// Window `start..start+len` of the last axis, zero outside the input.
    /// Crops and zero-pads both reduce to this.
    pub fn time_window(self, start: isize, len: usize) -> Var<'t> {
        let v = self.value();
        let t_in = *v.shape().last().unwrap();
        let rows = v.len() / t_in.max(1);
        let mut y = vec![0.0; rows * len];
        for r in 0..rows {
            for j in 0..len {
                let i = start + j as isize;
                if i >= 0 && (i as usize) < t_in {
                    y[r * len + j] = v.data()[r * t_in + i as usize];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.derive(Tensor::from_parts(shape, y), Op::TimeWindow { x: self.id, start }, &[self.id])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.derive(v, Op::Reshape(self.id), &[self.id]))
    }

    /// Rescales every complex pair of a `[B, 2F, T]` spectrogram by
    /// `gain·m^power` with `m = sqrt(re² + im² + eps)`, keeping the phase.
    pub fn mag_pow(self, gain: f64, power: f64, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        let mut y = vec![0.0; v.len()];
        for_complex_pairs(&v, |re_i, im_i| {
            let (re, im) = (v.data()[re_i], v.data()[im_i]);
            let phi = gain * pow_m((re * re + im * im + eps).sqrt(), power);
            y[re_i] = re * phi;
            y[im_i] = im * phi;
        })?;
        let op = Op::MagPow { x: self.id, gain, power, eps };
        Ok(self.derive(like(&v, y), op, &[self.id]))
    }

    /// STFT of `[B, L]` waveforms to `[B, 2F, frames]` spectrograms.
    pub fn stft(self, plan: &Arc<StftPlan>) -> Result<Var<'t>> {
        let v = self.value();
        let (b, len) = v.dims2()?;
        let (nb, nf) = (plan.cfg.n_bins(), plan.cfg.n_frames(len));
        let per = 2 * nb * nf;
        let mut y = vec![0.0; b * per];
        for bi in 0..b {
            plan.forward(v.row(bi), &mut y[bi * per..][..per]);
        }
        let op = Op::Stft { x: self.id, plan: plan.clone() };
        Ok(self.derive(Tensor::from_parts(vec![b, 2 * nb, nf], y), op, &[self.id]))
    }

    /// Inverse STFT of `[B, 2F, frames]` to `[B, len]`.
    pub fn istft(self, plan: &Arc<StftPlan>, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (b, c, nf) = v.dims3()?;
        if c != 2 * plan.cfg.n_bins() || nf != plan.cfg.n_frames(len) {
            return Err(shape_err(format!(
                "istft input {:?} does not match length {len} under {:?}",
                v.shape(),
                plan.cfg
            )));
        }
        let per = c * nf;
        let mut y = vec![0.0; b * len];
        for bi in 0..b {
            plan.inverse(&v.data()[bi * per..][..per], len, &mut y[bi * len..][..len]);
        }
        let op = Op::Istft { x: self.id, plan: plan.clone() };
        Ok(self.derive(Tensor::from_parts(vec![b, len], y), op, &[self.id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.square().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 4.0]));
        let loss = x.add(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_receive_nothing() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let loss = x.mul(c).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn unused_leaf_collects_zeros() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::zeros([2, 3]));
        let g = tape.backward(x.square().sum()).unwrap();
        let all = g.collect(&[x, unused]);
        assert_eq!(all[0].data(), &[2.0, 4.0]);
        assert_eq!(all[1], Tensor::zeros([2, 3]));
        assert!(g.wrt(unused).is_err());
    }

    #[test]
    fn contract_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::vector(vec![1.0]));
        assert!(matches!(tape.backward(x.square()), Err(Error::Contract(_))));

        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused2 = tape.leaf(Tensor::vector(vec![1.0]));
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert!(matches!(g.wrt(unused2), Err(Error::MissingGradient(_))));
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
        let _ = unused;
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(a.add(b), Err(Error::Shape(_))));
    }
}
