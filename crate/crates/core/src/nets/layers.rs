use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::Result;
use crate::rng::normal;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

pub(crate) struct Init<'a, R: Rng> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn scaled_normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * normal(self.rng)).collect();
        Tensor::new(shape, data).expect("init shape")
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Conv {
        self.conv_scaled(name, c_in, c_out, kernel, stride, 1.0)
    }

    /// `gain = 0` gives an all-zero layer.
    pub fn conv_scaled(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, gain: f64) -> Conv {
        let std = gain / ((c_in * kernel) as f64).sqrt();
        let w = self.scaled_normal(vec![c_out, c_in, kernel], std);
        let w = self.params.push(format!("{name}.w"), w);
        let b = self.params.push(format!("{name}.b"), Tensor::zeros([c_out]));
        Conv { w, b, stride, pad: (kernel - 1) / 2 }
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let w = self.scaled_normal(vec![d_out, d_in], 1.0 / (d_in as f64).sqrt());
        let w = self.params.push(format!("{name}.w"), w);
        let b = self.params.push(format!("{name}.b"), Tensor::zeros([d_out]));
        Linear { w, b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn apply<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        x.conv1d(p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn apply<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        x.linear(p[self.w], p[self.b])
    }
}

/// Sinusoidal embedding of `1000·t`, one row per entry of `t`.
pub fn time_embedding(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; t.len() * dim];
    for (row, &tv) in out.chunks_exact_mut(dim).zip(t) {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let a = 1000.0 * tv * freq;
            row[i] = a.sin();
            row[half + i] = a.cos();
        }
    }
    Tensor::new([t.len(), dim], out).expect("embedding shape")
}

/// Time-embedding MLP shared by every level: `silu(W·emb + b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct TimeMlp {
    pub dim: usize,
    pub lin: Linear,
}

impl TimeMlp {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize) -> Self {
        Self { dim, lin: init.linear(name, dim, dim) }
    }

    pub fn apply<'t>(&self, p: &[Var<'t>], t: &[f64]) -> Result<Var<'t>> {
        let tape = p[self.lin.w].tape();
        let e = tape.constant(time_embedding(t, self.dim));
        Ok(self.lin.apply(p, e)?.silu())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_shape_and_range() {
        let e = time_embedding(&[0.0, 0.5, 1.0], 8);
        assert_eq!(e.shape(), &[3, 8]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        // t = 0: sines vanish, cosines are one.
        assert_eq!(&e.data()[..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
