//! U-shaped convolutional generator over STFT frames or raw samples.

use std::sync::Arc;

use rand::Rng;

use super::layers::{Conv, Init, Linear, TimeMlp};
use super::{GeneratorConfig, InputRep};
use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::signal::compress::CompressionConfig;
use crate::signal::stft::StftPlan;

#[derive(Debug, Clone)]
struct Level {
    block: Conv,
    block_bias: Linear,
    down: Conv,
    up: Conv,
    merge: Conv,
    merge_bias: Linear,
}

/// Per-bin features the frame network hands to the bin head.
const BIN_FEATURES: usize = 4;

/// Pointwise MLP applied at every (bin, frame) of the spectrogram. It sees
/// the compressed `x_t` and `y` of its bin plus context features from the
/// frame network, so per-bin gains do not have to pass through the
/// frame-level bottleneck.
#[derive(Debug, Clone)]
struct BinHead {
    hidden: Conv,
    hidden_bias: Linear,
    mix: Conv,
    out: Conv,
}

#[derive(Debug, Clone)]
pub struct Unet {
    rep: InputRep,
    plan: Option<Arc<StftPlan>>,
    compression: CompressionConfig,
    time: TimeMlp,
    input: Conv,
    levels: Vec<Level>,
    mid: Conv,
    mid_bias: Linear,
    output: Conv,
    head: Option<BinHead>,
}

impl Unet {
    pub(crate) fn new<R: Rng>(cfg: &GeneratorConfig, init: &mut Init<'_, R>) -> Result<Self> {
        let (plan, io_channels) = match cfg.input_rep {
            InputRep::CompressedComplexSpectrogram => {
                let plan = cfg.stft.plan()?;
                let f = plan.cfg.n_bins();
                (Some(plan), 2 * f)
            }
            InputRep::Waveform => (None, 1),
        };
        let c0 = cfg.base_channels;
        let k = cfg.kernel;
        let e = cfg.time_embed_dim;
        let time = TimeMlp::new(init, "time", e);
        let input = init.conv("input", 2 * io_channels, c0, k, 1);
        let mut levels = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let (c, c2) = (c0 << i, c0 << (i + 1));
            levels.push(Level {
                block: init.conv(&format!("enc{i}.conv"), c, c, k, 1),
                block_bias: init.linear(&format!("enc{i}.temb"), e, c),
                down: init.conv(&format!("enc{i}.down"), c, c2, k, 2),
                up: init.conv(&format!("dec{i}.up"), c2, c, k, 1),
                merge: init.conv(&format!("dec{i}.merge"), 2 * c, c, k, 1),
                merge_bias: init.linear(&format!("dec{i}.temb"), e, c),
            });
        }
        let cm = c0 << cfg.depth;
        let mid = init.conv("mid.conv", cm, cm, k, 1);
        let mid_bias = init.linear("mid.temb", e, cm);
        let (output, head) = match cfg.input_rep {
            InputRep::CompressedComplexSpectrogram => {
                let bins = io_channels / 2;
                let output = init.conv("output", c0, BIN_FEATURES * bins, k, 1);
                let head = BinHead {
                    hidden: init.conv("head.hidden", BIN_FEATURES + 4, c0, 1, 1),
                    hidden_bias: init.linear("head.temb", e, c0),
                    mix: init.conv("head.mix", c0, c0, 1, 1),
                    out: init.conv_scaled("head.out", c0, 2, 1, 1, 0.0),
                };
                (output, Some(head))
            }
            InputRep::Waveform => (init.conv_scaled("output", c0, io_channels, k, 1, 0.0), None),
        };
        Ok(Self { rep: cfg.input_rep, plan, compression: cfg.compression, time, input, levels, mid, mid_bias, output, head })
    }

    fn body<'t>(&self, p: &[Var<'t>], h: Var<'t>, emb: Var<'t>) -> Result<Var<'t>> {
        let mut h = self.input.apply(p, h)?.silu();
        let mut skips = Vec::with_capacity(self.levels.len());
        for lv in &self.levels {
            let r = lv.block.apply(p, h)?.add_channel_bias(lv.block_bias.apply(p, emb)?)?.silu();
            h = h.add(r)?;
            skips.push(h);
            h = lv.down.apply(p, h)?.silu();
        }
        let r = self.mid.apply(p, h)?.add_channel_bias(self.mid_bias.apply(p, emb)?)?.silu();
        h = h.add(r)?;
        for (lv, skip) in self.levels.iter().zip(skips).rev() {
            let u = lv.up.apply(p, h.upsample2())?.silu();
            let m = Var::concat(&[u, skip])?;
            h = lv.merge.apply(p, m)?.add_channel_bias(lv.merge_bias.apply(p, emb)?)?.silu();
        }
        self.output.apply(p, h)
    }

    fn levels_multiple(&self) -> usize {
        1 << self.levels.len()
    }

    pub(crate) fn forward<'t>(&self, p: &[Var<'t>], x_t: Var<'t>, y: Var<'t>, t: &[f64]) -> Result<Var<'t>> {
        let shape = x_t.shape();
        if shape != y.shape() || shape.len() != 2 || shape[0] != t.len() {
            return Err(shape_err(format!(
                "generator inputs x_t{:?} y{:?} with {} times",
                shape,
                y.shape(),
                t.len()
            )));
        }
        let (b, len) = (shape[0], shape[1]);
        let emb = self.time.apply(p, t)?;
        let mult = self.levels_multiple();
        match self.rep {
            InputRep::Waveform => {
                let padded = len.div_ceil(mult) * mult;
                let xw = x_t.reshape([b, 1, len])?.time_window(0, padded);
                let yw = y.reshape([b, 1, len])?.time_window(0, padded);
                let delta = self.body(p, Var::concat(&[xw, yw])?, emb)?;
                let delta = delta.time_window(0, len).reshape([b, len])?;
                x_t.add(delta)
            }
            InputRep::CompressedComplexSpectrogram => {
                let plan = self.plan.as_ref().expect("spectral generator has a plan");
                let hop = plan.cfg.hop;
                let padded_len = len.div_ceil(hop) * hop;
                let frames = plan.cfg.n_frames(padded_len);
                let padded_frames = frames.div_ceil(mult) * mult;
                let spec = |v: Var<'t>| -> Result<Var<'t>> {
                    let v = if padded_len != len { v.time_window(0, padded_len) } else { v };
                    self.compression.compress_var(v.stft(plan)?)
                };
                let xc = spec(x_t)?;
                let yc = spec(y)?;
                let h = Var::concat(&[xc, yc])?.time_window(0, padded_frames);
                let feats = self.body(p, h, emb)?.time_window(0, frames);
                let head = self.head.as_ref().expect("spectral generator has a bin head");
                let cells = plan.cfg.n_bins() * frames;
                let h = Var::concat(&[
                    feats.reshape([b, BIN_FEATURES, cells])?,
                    xc.reshape([b, 2, cells])?,
                    yc.reshape([b, 2, cells])?,
                ])?;
                let h = head.hidden.apply(p, h)?.add_channel_bias(head.hidden_bias.apply(p, emb)?)?.silu();
                let h = h.add(head.mix.apply(p, h)?.silu())?;
                let delta = head.out.apply(p, h)?.reshape(xc.shape())?;
                let out = self.compression.decompress_var(xc.add(delta)?)?;
                Ok(out.istft(plan, padded_len)?.time_window(0, len))
            }
        }
    }
}
