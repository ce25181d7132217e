//! Pointwise networks for scalar toy problems.
//!
//! Every sample position is an independent example: the inputs and the time
//! embedding are stacked as channels and mixed by kernel-1 convolutions.

use rand::Rng;

use super::layers::{time_embedding, Conv, Init};
use crate::autodiff::{Tensor, Var};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone)]
pub struct Mlp {
    embed_dim: usize,
    layers: Vec<Conv>,
    /// Generators add their output to `x_t`.
    residual: bool,
}

impl Mlp {
    pub(crate) fn new<R: Rng>(
        init: &mut Init<'_, R>,
        embed_dim: usize,
        hidden: usize,
        n_hidden: usize,
        residual: bool,
    ) -> Self {
        let mut layers = Vec::with_capacity(n_hidden + 1);
        let mut c_in = 2 + embed_dim;
        for i in 0..n_hidden {
            layers.push(init.conv(&format!("mlp{i}"), c_in, hidden, 1, 1));
            c_in = hidden;
        }
        let gain = if residual { 0.0 } else { 1.0 };
        layers.push(init.conv_scaled("mlp.out", c_in, 1, 1, 1, gain));
        Self { embed_dim, layers, residual }
    }

    /// Returns `[B, L]` for generators and `[1, 1, B·L]` logits otherwise.
    pub(crate) fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>, y: Var<'t>, t: &[f64]) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape != y.shape() || shape.len() != 2 || shape[0] != t.len() {
            return Err(shape_err(format!("pointwise net inputs x{:?} y{:?} with {} times", shape, y.shape(), t.len())));
        }
        let (b, len) = (shape[0], shape[1]);
        let n = b * len;
        let per_pos: Vec<f64> = t.iter().flat_map(|&tv| std::iter::repeat_n(tv, len)).collect();
        let emb = time_embedding(&per_pos, self.embed_dim);
        // [n, D] to channel-major [1, D, n].
        let mut ch = vec![0.0; n * self.embed_dim];
        for i in 0..n {
            for d in 0..self.embed_dim {
                ch[d * n + i] = emb.data()[i * self.embed_dim + d];
            }
        }
        let tape = x.tape();
        let emb = tape.constant(Tensor::new([1, self.embed_dim, n], ch)?);
        let mut h = Var::concat(&[x.reshape([1, 1, n])?, y.reshape([1, 1, n])?, emb])?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(p, h)?;
            if i < last {
                h = h.silu();
            }
        }
        if self.residual {
            x.add(h.reshape([b, len])?)
        } else {
            Ok(h)
        }
    }
}
