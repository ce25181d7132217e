//! Power-law magnitude compression of complex spectrograms.

use serde::{Deserialize, Serialize};

use super::stft::Spectrogram;
use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Keeps the compressed magnitude differentiable at zero.
pub const COMPRESS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionConfig {
    /// Magnitude exponent β.
    pub exponent: f64,
    pub scale: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self { exponent: 0.5, scale: 0.15 }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.exponent > 0.0 && self.exponent <= 1.0) || !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!(
                "compression needs exponent in (0, 1] and positive scale, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `|S| → scale·|S|^β`, phase kept. Exact, zero stays zero.
    pub fn compress(&self, s: &Spectrogram) -> Spectrogram {
        self.map_magnitude(s, |m| self.scale * m.powf(self.exponent))
    }

    pub fn decompress(&self, s: &Spectrogram) -> Spectrogram {
        self.map_magnitude(s, |m| (m / self.scale).powf(1.0 / self.exponent))
    }

    fn map_magnitude(&self, s: &Spectrogram, f: impl Fn(f64) -> f64) -> Spectrogram {
        let data = s
            .data
            .iter()
            .map(|&z| {
                let m = z.norm();
                if m == 0.0 {
                    z
                } else {
                    z * (f(m) / m)
                }
            })
            .collect();
        Spectrogram { bins: s.bins, frames: s.frames, data }
    }

    /// Differentiable compression of a `[B, 2F, T]` spectrogram tensor.
    pub fn compress_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.mag_pow(self.scale, self.exponent - 1.0, COMPRESS_EPS)
    }

    /// Differentiable inverse of [`Self::compress_var`].
    pub fn decompress_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let inv = 1.0 / self.exponent;
        x.mag_pow(self.scale.powf(-inv), inv - 1.0, COMPRESS_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex64;

    fn spec(vals: &[(f64, f64)]) -> Spectrogram {
        Spectrogram { bins: vals.len(), frames: 1, data: vals.iter().map(|&(r, i)| Complex64::new(r, i)).collect() }
    }

    #[test]
    fn identity_when_trivial() {
        let s = spec(&[(1.0, -2.0), (0.0, 0.0), (3.5, 0.25)]);
        let c = CompressionConfig { exponent: 1.0, scale: 1.0 }.compress(&s);
        for (a, b) in s.data.iter().zip(&c.data) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn magnitude_four_maps_to_point_three() {
        let c = CompressionConfig::default().compress(&spec(&[(0.0, 4.0), (4.0 / 2f64.sqrt(), -4.0 / 2f64.sqrt())]));
        for z in &c.data {
            assert!((z.norm() - 0.3).abs() < 1e-12);
        }
        assert!(c.data[0].re.abs() < 1e-15 && c.data[0].im > 0.0);
        assert!((c.data[1].arg() + std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn round_trip() {
        let cfg = CompressionConfig::default();
        let s = spec(&[(1e-3, 2.0), (-7.0, 0.5), (0.0, 0.0), (1e3, -1e2)]);
        let back = cfg.decompress(&cfg.compress(&s));
        for (a, b) in s.data.iter().zip(&back.data) {
            assert!((a - b).norm() <= 1e-6 * a.norm().max(1e-300));
        }
    }

    #[test]
    fn rejects_bad_exponent() {
        assert!(CompressionConfig { exponent: 0.0, scale: 0.15 }.validate().is_err());
        assert!(CompressionConfig { exponent: 1.5, scale: 0.15 }.validate().is_err());
        assert!(CompressionConfig::default().validate().is_ok());
    }
}
