//! Training and test data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{normal, stream};
use crate::signal::synth::{synth_pair, CleanKind, NoiseColor, PairedSample, RirSpec, SynthSpec, Task};

const PURPOSE_TRAIN: u64 = 0x7472;
const PURPOSE_TEST: u64 = 0x7465;

/// Synthetic paired audio generated on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthDataConfig {
    pub sample_rate: u32,
    /// Training segment length in samples.
    pub segment: usize,
    pub kinds: Vec<CleanKind>,
    pub noise: Vec<NoiseColor>,
    /// Training SNR range, dB.
    pub snr_db: (f64, f64),
    /// Set for dereverberation.
    pub rir: Option<RirSpec>,
    pub test_items: usize,
    /// Test item length in samples.
    pub test_len: usize,
    /// Test SNRs, cycled over the items.
    pub test_snr_db: Vec<f64>,
}

impl Default for SynthDataConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            segment: 1024,
            kinds: vec![CleanKind::Harmonic, CleanKind::Chirp, CleanKind::FilteredNoiseBurst],
            noise: vec![NoiseColor::White, NoiseColor::Pink],
            snr_db: (-5.0, 15.0),
            rir: None,
            test_items: 40,
            test_len: 4096,
            test_snr_db: vec![-5.0, 0.0, 5.0, 10.0, 15.0],
        }
    }
}

/// Scalar two-component Gaussian mixture: `x0 ~ ½N(−s/2, σ²) + ½N(s/2, σ²)`,
/// `y = x0 + N(0, noise_std²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    pub separation: f64,
    pub std: f64,
    pub noise_std: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self { separation: 4.0, std: 1.0, noise_std: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synth(SynthDataConfig),
    Mixture(MixtureConfig),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synth(SynthDataConfig::default())
    }
}

impl SynthDataConfig {
    pub fn task(&self) -> Task {
        if self.rir.is_some() {
            Task::Dereverb
        } else {
            Task::Denoise
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() || self.noise.is_empty() {
            return Err(Error::Config("synthetic data needs at least one clean kind and noise color".into()));
        }
        if self.segment == 0 || self.test_len == 0 || self.test_snr_db.is_empty() {
            return Err(Error::Config("synthetic data needs nonzero lengths and test SNRs".into()));
        }
        self.spec(CleanKind::Chirp, NoiseColor::White, self.segment, self.snr_db, 0).validate()
    }

    fn spec(&self, kind: CleanKind, noise: NoiseColor, len: usize, snr: (f64, f64), seed: u64) -> SynthSpec {
        SynthSpec {
            sample_rate: self.sample_rate,
            duration: len as f64 / self.sample_rate as f64,
            clean_kind: kind,
            noise,
            snr_db: snr,
            rir: self.rir,
            seed,
        }
    }

    fn draw(&self, rng: &mut impl Rng, len: usize, snr: (f64, f64), seed: u64) -> Result<(PairedSample, CleanKind)> {
        let kind = self.kinds[rng.random_range(0..self.kinds.len())];
        let noise = self.noise[rng.random_range(0..self.noise.len())];
        Ok((synth_pair(&self.spec(kind, noise, len, snr, seed), rng)?, kind))
    }

    /// Training example `index` of step `step`.
    pub fn train_pair(&self, seed: u64, step: u64, index: usize) -> Result<PairedSample> {
        let mut rng = stream(seed, &[PURPOSE_TRAIN, step, index as u64]);
        Ok(self.draw(&mut rng, self.segment, self.snr_db, seed)?.0)
    }

    /// Test item `index`; independent of the training stream.
    pub fn test_pair(&self, seed: u64, index: usize) -> Result<(PairedSample, CleanKind)> {
        let mut rng = stream(seed, &[PURPOSE_TEST, index as u64]);
        let snr = self.test_snr_db[index % self.test_snr_db.len()];
        self.draw(&mut rng, self.test_len, (snr, snr), seed)
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        let v = [self.separation, self.std, self.noise_std];
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || self.std == 0.0 {
            return Err(Error::Config(format!("mixture parameters must be finite, >= 0 with std > 0, got {v:?}")));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> (f64, f64) {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let x0 = sign * self.separation / 2.0 + self.std * normal(rng);
        (x0, x0 + self.noise_std * normal(rng))
    }

    pub fn samples(&self, seed: u64, path: &[u64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = stream(seed, path);
        (0..n).map(|_| self.sample(&mut rng)).unzip()
    }
}

/// Gain that brings `y` to unit RMS; 1 for silent input.
pub fn normalization_gain(y: &[f64]) -> f64 {
    let rms = (y.iter().map(|v| v * v).sum::<f64>() / y.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        1.0 / rms
    } else {
        1.0
    }
}

/// Stacks `(x0, y)` pairs into `[B, L]` tensors, each pair scaled so that its
/// `y` has unit RMS.
pub fn stack_normalized(pairs: &[PairedSample]) -> Result<(Tensor, Tensor)> {
    let len = pairs.first().map(|p| p.clean.len()).ok_or_else(|| Error::Config("empty batch".into()))?;
    let mut x0 = Vec::with_capacity(pairs.len() * len);
    let mut y = Vec::with_capacity(pairs.len() * len);
    for p in pairs {
        let g = normalization_gain(&p.degraded);
        x0.extend(p.clean.iter().map(|v| v * g));
        y.extend(p.degraded.iter().map(|v| v * g));
    }
    Ok((Tensor::new([pairs.len(), len], x0)?, Tensor::new([pairs.len(), len], y)?))
}

/// Produces one training batch per step.
pub trait BatchSource {
    fn batch(&mut self, step: u64, batch_size: usize) -> Result<(Tensor, Tensor)>;
}

#[derive(Debug, Clone)]
pub struct SynthSource {
    pub cfg: SynthDataConfig,
    pub seed: u64,
}

impl BatchSource for SynthSource {
    fn batch(&mut self, step: u64, batch_size: usize) -> Result<(Tensor, Tensor)> {
        let pairs = (0..batch_size).map(|i| self.cfg.train_pair(self.seed, step, i)).collect::<Result<Vec<_>>>()?;
        stack_normalized(&pairs)
    }
}

/// Scalar mixture; a batch is `[B, 1]`.
#[derive(Debug, Clone)]
pub struct MixtureSource {
    pub cfg: MixtureConfig,
    pub seed: u64,
}

impl BatchSource for MixtureSource {
    fn batch(&mut self, step: u64, batch_size: usize) -> Result<(Tensor, Tensor)> {
        let (x0, y) = self.cfg.samples(self.seed, &[PURPOSE_TRAIN, step], batch_size);
        Ok((Tensor::new([batch_size, 1], x0)?, Tensor::new([batch_size, 1], y)?))
    }
}

pub fn source_for(data: &DataConfig, seed: u64) -> Box<dyn BatchSource> {
    match data {
        DataConfig::Synth(c) => Box::new(SynthSource { cfg: c.clone(), seed }),
        DataConfig::Mixture(c) => Box::new(MixtureSource { cfg: *c, seed }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_normalized_and_reproducible() {
        let mut src = SynthSource { cfg: SynthDataConfig::default(), seed: 5 };
        let (x0, y) = src.batch(3, 4).unwrap();
        assert_eq!(y.shape(), &[4, 1024]);
        for i in 0..4 {
            let rms = (y.row(i).iter().map(|v| v * v).sum::<f64>() / 1024.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-12);
        }
        assert_eq!(src.batch(3, 4).unwrap(), (x0.clone(), y));
        assert_ne!(src.batch(4, 4).unwrap().0, x0);
    }

    #[test]
    fn test_items_cycle_snrs() {
        let cfg = SynthDataConfig::default();
        for i in 0..10 {
            let (p, _) = cfg.test_pair(1, i).unwrap();
            assert_eq!(p.snr_db, cfg.test_snr_db[i % 5]);
            assert_eq!(p.clean.len(), cfg.test_len);
        }
    }

    #[test]
    fn mixture_moments() {
        let cfg = MixtureConfig::default();
        let (x0, y) = cfg.samples(2, &[], 200_000);
        let n = x0.len() as f64;
        let mean = x0.iter().sum::<f64>() / n;
        let var = x0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        // Var = σ² + (s/2)² = 5.
        assert!(mean.abs() < 0.02 && (var - 5.0).abs() < 0.05, "{mean} {var}");
        let nv = x0.iter().zip(&y).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / n;
        assert!((nv - 0.25).abs() < 0.005);
    }
}
