//! Objective metrics and the step × SNR sweep.

mod sweep;

pub use sweep::*;

use crate::error::{Error, Result};
use crate::signal::stft::{stft, StftConfig};

/// Value reported for a zero residual; `-SI_SDR_SATURATION` for a zero
/// projection.
pub const SI_SDR_SATURATION: f64 = 200.0;

const LSD_EPS: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant signal-to-distortion ratio in dB, clamped to
/// `±SI_SDR_SATURATION`.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "si_sdr: estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let ref_energy = dot(reference, reference);
    if ref_energy == 0.0 {
        return Err(Error::Domain("si_sdr: zero reference".into()));
    }
    let alpha = dot(estimate, reference) / ref_energy;
    let mut target = 0.0;
    let mut resid = 0.0;
    for (e, r) in estimate.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        resid += (e - t) * (e - t);
    }
    if target == 0.0 {
        return Ok(-SI_SDR_SATURATION);
    }
    if resid == 0.0 {
        return Ok(SI_SDR_SATURATION);
    }
    Ok((10.0 * (target / resid).log10()).clamp(-SI_SDR_SATURATION, SI_SDR_SATURATION))
}

/// Log-spectral distance in dB: RMS over frames of the per-frame RMS
/// difference of log power spectra.
pub fn lsd(estimate: &[f64], reference: &[f64], cfg: &StftConfig) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "lsd: estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let (a, b) = (stft(estimate, cfg)?, stft(reference, cfg)?);
    let mut acc = 0.0;
    for m in 0..a.frames {
        let mut frame = 0.0;
        for f in 0..a.bins {
            let d = 10.0 * ((a.at(f, m).norm_sqr() + LSD_EPS).log10() - (b.at(f, m).norm_sqr() + LSD_EPS).log10());
            frame += d * d;
        }
        acc += frame / a.bins as f64;
    }
    Ok((acc / a.frames as f64).sqrt())
}
