//! Reconstruction and adversarial objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::signal::compress::CompressionConfig;
use crate::signal::mel::mel_filterbank;
use crate::signal::stft::StftConfig;

const MEL_MAG_EPS: f64 = 1e-8;
const MEL_LOG_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconDomain {
    /// Squared error of compressed complex spectrograms plus waveform L1.
    Spectral,
    /// Squared error plus L1, both on raw samples. For scalar toys.
    Waveform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelLossConfig {
    pub weight: f64,
    pub resolutions: Vec<StftConfig>,
    pub n_mels: usize,
}

impl Default for MelLossConfig {
    fn default() -> Self {
        Self {
            weight: 0.01,
            resolutions: [(512, 128), (256, 64), (128, 32)]
                .iter()
                .map(|&(fft_size, hop)| StftConfig { fft_size, hop })
                .collect(),
            n_mels: 40,
        }
    }
}

/// Everything `recon_loss` needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub domain: ReconDomain,
    pub stft: StftConfig,
    pub compression: CompressionConfig,
    pub alpha_l1: f64,
    /// Present for dereverberation.
    pub mel: Option<MelLossConfig>,
    pub sample_rate: f64,
}

/// Per-example reconstruction error, averaged over the batch.
///
/// Spectral domain: `‖C(x̂) − C(x)‖² + α‖x̂ − x‖₁`, where `C` is the
/// compressed STFT, plus an optional multi-resolution log-mel L1 term.
pub fn recon_loss<'t>(x0_hat: Var<'t>, x0: Var<'t>, cfg: &ReconConfig) -> Result<Var<'t>> {
    let shape = x0_hat.shape();
    if shape != x0.shape() || shape.len() != 2 {
        return Err(shape_err(format!("recon_loss on {:?} vs {:?}", shape, x0.shape())));
    }
    let batch = shape[0] as f64;
    let l1 = x0_hat.sub(x0)?.abs().sum().scale(cfg.alpha_l1 / batch);
    let sq = match cfg.domain {
        ReconDomain::Waveform => x0_hat.sub(x0)?.square().sum(),
        ReconDomain::Spectral => {
            let plan = cfg.stft.plan()?;
            let a = cfg.compression.compress_var(x0_hat.stft(&plan)?)?;
            let b = cfg.compression.compress_var(x0.stft(&plan)?)?;
            a.sub(b)?.square().sum()
        }
    };
    let mut loss = sq.scale(1.0 / batch).add(l1)?;
    if let Some(mel) = &cfg.mel {
        if mel.weight > 0.0 {
            loss = loss.add(mel_loss(x0_hat, x0, mel, cfg.sample_rate)?.scale(mel.weight))?;
        }
    }
    Ok(loss)
}

/// Mean absolute difference of log-mel magnitudes, averaged over resolutions.
pub fn mel_loss<'t>(x_hat: Var<'t>, x: Var<'t>, cfg: &MelLossConfig, sample_rate: f64) -> Result<Var<'t>> {
    if cfg.resolutions.is_empty() {
        return Err(Error::Config("mel loss needs at least one resolution".into()));
    }
    let tape = x.tape();
    let mut total: Option<Var<'t>> = None;
    for res in &cfg.resolutions {
        let plan = res.plan()?;
        let fb = mel_filterbank(cfg.n_mels, res.fft_size, sample_rate);
        let bins = res.n_bins();
        let fb = tape.constant(fb.reshape([cfg.n_mels, bins, 1])?);
        let logmel = |v: Var<'t>| -> Result<Var<'t>> {
            let s = v.stft(&plan)?;
            let re = s.slice_channels(0, bins)?;
            let im = s.slice_channels(bins, bins)?;
            let mag = re.square().add(im.square())?.add_scalar(MEL_MAG_EPS).sqrt();
            Ok(mag.conv1d(fb, None, 1, 0)?.add_scalar(MEL_LOG_EPS).ln())
        };
        let d = logmel(x_hat)?.sub(logmel(x)?)?.abs().mean();
        total = Some(match total {
            Some(acc) => acc.add(d)?,
            None => d,
        });
    }
    Ok(total.expect("at least one resolution").scale(1.0 / cfg.resolutions.len() as f64))
}

fn mean_over_scales<'t>(per_scale: Vec<Var<'t>>) -> Result<Var<'t>> {
    let n = per_scale.len() as f64;
    let mut it = per_scale.into_iter();
    let first = it.next().ok_or_else(|| shape_err("loss over zero logit maps"))?;
    let mut acc = first;
    for v in it {
        acc = acc.add(v)?;
    }
    Ok(acc.scale(1.0 / n))
}

/// `−log σ(real) − log(1 − σ(fake))`, averaged over positions, then scales.
pub fn d_loss<'t>(real: &[Var<'t>], fake: &[Var<'t>]) -> Result<Var<'t>> {
    if real.len() != fake.len() {
        return Err(shape_err(format!("{} real vs {} fake logit maps", real.len(), fake.len())));
    }
    let terms = real
        .iter()
        .zip(fake)
        .map(|(r, f)| r.neg().softplus().mean().add(f.softplus().mean()))
        .collect::<Result<Vec<_>>>()?;
    mean_over_scales(terms)
}

/// `−log σ(fake)`, averaged over positions, then scales.
pub fn g_adv_loss<'t>(fake: &[Var<'t>]) -> Result<Var<'t>> {
    mean_over_scales(fake.iter().map(|f| f.neg().softplus().mean()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape, Tensor};
    use crate::rng::{normal_vec, stream};
    use crate::signal::stft::stft;
    use std::f64::consts::LN_2;

    fn constant_logits<'t>(tape: &'t Tape, shapes: &[Vec<usize>], value: f64) -> Vec<Var<'t>> {
        shapes.iter().map(|s| tape.constant(Tensor::full(s.clone(), value))).collect()
    }

    fn spectral(alpha: f64, mel: Option<MelLossConfig>) -> ReconConfig {
        ReconConfig {
            domain: ReconDomain::Spectral,
            stft: StftConfig { fft_size: 32, hop: 8 },
            compression: CompressionConfig::default(),
            alpha_l1: alpha,
            mel,
            sample_rate: 8000.0,
        }
    }

    fn batch(b: usize, len: usize, seed: u64) -> Tensor {
        Tensor::new([b, len], normal_vec(&mut stream(seed, &[]), b * len)).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero() {
        let tape = Tape::new();
        let x = tape.constant(batch(2, 64, 1));
        let mel = MelLossConfig { resolutions: vec![StftConfig { fft_size: 32, hop: 8 }], n_mels: 8, weight: 0.5 };
        assert_eq!(recon_loss(x, x, &spectral(1e-3, Some(mel))).unwrap().value().item(), 0.0);
    }

    #[test]
    fn positive_when_different() {
        let tape = Tape::new();
        let x = tape.constant(batch(1, 64, 1));
        let y = x.add_scalar(1e-6);
        assert!(recon_loss(y, x, &spectral(1e-3, None)).unwrap().value().item() > 0.0);
    }

    #[test]
    fn impulse_by_direct_evaluation() {
        let cfg = spectral(1e-3, None);
        let len = 64;
        let mut imp = vec![0.0; len];
        imp[0] = 1.0;
        let comp = cfg.compression.compress(&stft(&imp, &cfg.stft).unwrap());
        let expected = comp.energy() + cfg.alpha_l1;

        let tape = Tape::new();
        let x0 = tape.constant(Tensor::new([1, len], imp).unwrap());
        let zero = tape.constant(Tensor::zeros([1, len]));
        let got = recon_loss(zero, x0, &cfg).unwrap().value().item();
        assert!((got - expected).abs() <= 1e-6 * expected, "{got} vs {expected}");
    }

    #[test]
    fn half_probability_values() {
        let tape = Tape::new();
        let shapes = vec![vec![2, 1, 5], vec![2, 1, 9]];
        let real = constant_logits(&tape, &shapes, 0.0);
        let fake = constant_logits(&tape, &shapes, 0.0);
        assert!((d_loss(&real, &fake).unwrap().value().item() - 2.0 * LN_2).abs() < 1e-15);
        assert!((g_adv_loss(&fake).unwrap().value().item() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_discriminator() {
        let tape = Tape::new();
        let shapes = vec![vec![1, 1, 4]];
        let real = constant_logits(&tape, &shapes, 40.0);
        let fake = constant_logits(&tape, &shapes, -40.0);
        assert!(d_loss(&real, &fake).unwrap().value().item() < 1e-15);
    }

    #[test]
    fn g_adv_decreases_with_fake_probability() {
        let tape = Tape::new();
        let mut last = f64::INFINITY;
        for logit in [-5.0, -1.0, 0.0, 1.0, 5.0] {
            let v = g_adv_loss(&constant_logits(&tape, &[vec![1, 1, 3]], logit)).unwrap().value().item();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn losses_gradcheck() {
        let x0 = batch(2, 48, 3);
        let mel = MelLossConfig { resolutions: vec![StftConfig { fft_size: 32, hop: 8 }, StftConfig { fft_size: 16, hop: 4 }], n_mels: 6, weight: 0.3 };
        for cfg in [spectral(1e-3, Some(mel)), ReconConfig { domain: ReconDomain::Waveform, ..spectral(1e-3, None) }] {
            let r = gradcheck(&[batch(2, 48, 4)], 1e-4, |tape, v| recon_loss(v[0], tape.constant(x0.clone()), &cfg)).unwrap();
            assert!(r.max_rel_err <= 1e-5, "{:?}: {r:?}", cfg.domain);
        }
        let logits = [batch(2, 7, 5).reshape([2, 1, 7]).unwrap(), batch(2, 3, 6).reshape([2, 1, 3]).unwrap()];
        let fake = [batch(2, 7, 7).reshape([2, 1, 7]).unwrap(), batch(2, 3, 8).reshape([2, 1, 3]).unwrap()];
        let mut inputs = logits.to_vec();
        inputs.extend(fake.iter().cloned());
        let r = gradcheck(&inputs, 1e-4, |_, v| d_loss(&v[..2], &v[2..])).unwrap();
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
        let r = gradcheck(&fake, 1e-4, |_, v| g_adv_loss(v)).unwrap();
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
    }
}
