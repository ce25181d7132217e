//! Multi-scale STFT discriminator.

use std::sync::Arc;

use rand::Rng;

use super::layers::{Conv, Init, Linear, TimeMlp};
use super::DiscriminatorConfig;
use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::signal::compress::CompressionConfig;
use crate::signal::stft::StftPlan;

#[derive(Debug, Clone)]
struct Scale {
    plan: Arc<StftPlan>,
    input: Conv,
    temb: Linear,
    hidden: Conv,
    logits: Conv,
}

#[derive(Debug, Clone)]
pub struct MsStft {
    compression: CompressionConfig,
    time: TimeMlp,
    scales: Vec<Scale>,
}

impl MsStft {
    pub(crate) fn new<R: Rng>(cfg: &DiscriminatorConfig, init: &mut Init<'_, R>) -> Result<Self> {
        let c = cfg.channels;
        let e = cfg.time_embed_dim;
        let time = TimeMlp::new(init, "time", e);
        let scales = cfg
            .scales
            .iter()
            .enumerate()
            .map(|(i, sc)| {
                let plan = sc.plan()?;
                let f = plan.cfg.n_bins();
                Ok(Scale {
                    plan,
                    input: init.conv(&format!("s{i}.input"), 4 * f, c, 3, 1),
                    temb: init.linear(&format!("s{i}.temb"), e, c),
                    hidden: init.conv(&format!("s{i}.hidden"), c, c, 3, 1),
                    logits: init.conv(&format!("s{i}.logits"), c, 1, 3, 1),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { compression: cfg.compression, time, scales })
    }

    pub(crate) fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>, y: Var<'t>, t: &[f64]) -> Result<Vec<Var<'t>>> {
        let shape = x.shape();
        if shape != y.shape() || shape.len() != 2 || shape[0] != t.len() {
            return Err(shape_err(format!("discriminator inputs x{:?} y{:?} with {} times", shape, y.shape(), t.len())));
        }
        let emb = self.time.apply(p, t)?;
        self.scales
            .iter()
            .map(|s| {
                let xs = self.compression.compress_var(x.stft(&s.plan)?)?;
                let ys = self.compression.compress_var(y.stft(&s.plan)?)?;
                let h = s.input.apply(p, Var::concat(&[xs, ys])?)?;
                let h = h.add_channel_bias(s.temb.apply(p, emb)?)?.silu();
                let h = s.hidden.apply(p, h)?.silu();
                s.logits.apply(p, h)
            })
            .collect()
    }
}
