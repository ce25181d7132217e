//! Synthetic paired data: clean test signals, SNR-exact mixing and
//! exponential-decay reverberation.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Denoise,
    Dereverb,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Dereverb => "dereverb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanKind {
    Harmonic,
    Chirp,
    FilteredNoiseBurst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseColor {
    White,
    Pink,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RirSpec {
    /// Time for the tail envelope to fall by 60 dB, seconds.
    pub decay_time: f64,
    /// RIR length, seconds.
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub sample_rate: u32,
    /// Seconds.
    pub duration: f64,
    pub clean_kind: CleanKind,
    pub noise: NoiseColor,
    /// Inclusive range the mixing SNR is drawn from, dB.
    pub snr_db: (f64, f64),
    /// Present for dereverberation pairs.
    pub rir: Option<RirSpec>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn task(&self) -> Task {
        if self.rir.is_some() {
            Task::Dereverb
        } else {
            Task::Denoise
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.snr_db;
        if self.sample_rate == 0 || !(self.duration > 0.0) || self.n_samples() == 0 {
            return Err(Error::Config(format!("synth needs positive rate and duration, got {self:?}")));
        }
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::Config(format!("bad SNR range {:?}", self.snr_db)));
        }
        if let Some(r) = self.rir {
            if !(r.decay_time >= 0.0) || !(r.length > 0.0) {
                return Err(Error::Config(format!("bad RIR spec {r:?}")));
            }
        }
        Ok(())
    }
}

/// Aligned clean/degraded waveforms.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub clean: Vec<f64>,
    pub degraded: Vec<f64>,
    /// Mixing SNR for denoising; measured clean-to-residual ratio for
    /// dereverberation.
    pub snr_db: f64,
    pub task: Task,
    pub sample_rate: u32,
}

pub fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

pub fn snr_db(clean: &[f64], degraded: &[f64]) -> f64 {
    let resid: Vec<f64> = degraded.iter().zip(clean).map(|(d, c)| d - c).collect();
    10.0 * (power(clean) / power(&resid)).log10()
}

/// `clean + g·noise` with `g` chosen so the mixture has exactly `snr_db`.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<(Vec<f64>, f64)> {
    if clean.len() != noise.len() {
        return Err(Error::Shape(format!("clean has {} samples, noise {}", clean.len(), noise.len())));
    }
    let (pc, pn) = (power(clean), power(noise));
    if pc == 0.0 || pn == 0.0 {
        return Err(Error::Domain("mix_at_snr needs nonzero clean and noise power".into()));
    }
    let g = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let noisy = clean.iter().zip(noise).map(|(c, n)| c + g * n).collect();
    Ok((noisy, g))
}

pub fn white_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Approximately 1/f noise from white noise through Kellet's pinking filter.
pub fn pink_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    (0..n)
        .map(|_| {
            let w = normal(rng);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let out = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
            b[6] = w * 0.115926;
            out
        })
        .collect()
}

/// Unit-norm impulse response: a direct path at delay 0 followed by a white
/// noise tail decaying 60 dB over `decay_time`.
pub fn synth_rir(spec: &RirSpec, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let n = ((spec.length * sample_rate as f64).round() as usize).max(1);
    let mut h = vec![0.0; n];
    h[0] = 1.0;
    let tau = spec.decay_time * sample_rate as f64;
    for (i, v) in h.iter_mut().enumerate().skip(1) {
        let z = normal(rng);
        if tau > 0.0 {
            *v = z * (-6.907_755_278_982_137 * i as f64 / tau).exp();
        }
    }
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter_mut().for_each(|v| *v /= norm);
    h
}

/// Causal convolution truncated to the length of `x`.
pub fn convolve_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (i, out) in y.iter_mut().enumerate() {
        let kmax = h.len().min(i + 1);
        *out = (0..kmax).map(|k| h[k] * x[i - k]).sum();
    }
    y
}

fn fade(n: usize, sr: f64) -> impl Fn(usize) -> f64 {
    let ramp = (0.01 * sr).max(1.0);
    move |i| {
        let edge = (i as f64).min((n - 1 - i) as f64);
        (edge / ramp).min(1.0)
    }
}

/// One-pole-pair resonator for band-limiting noise.
fn resonate(x: &[f64], center_hz: f64, bandwidth_hz: f64, sr: f64) -> Vec<f64> {
    let r = (-PI * bandwidth_hz / sr).exp();
    let theta = 2.0 * PI * center_hz / sr;
    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
    let (mut y1, mut y2) = (0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = (1.0 - r) * v + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

pub fn clean_signal(kind: CleanKind, n: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let nyq = sr / 2.0;
    let env = fade(n, sr);
    let mut x: Vec<f64> = match kind {
        CleanKind::Harmonic => {
            let f0 = rng.random_range(100.0..300.0);
            let n_harm = rng.random_range(3..=6);
            let am_rate = rng.random_range(1.0..4.0);
            let am_phase = rng.random_range(0.0..2.0 * PI);
            let partials: Vec<(f64, f64, f64)> = (1..=n_harm)
                .map(|h| (f0 * h as f64, rng.random_range(0.3..1.0) / h as f64, rng.random_range(0.0..2.0 * PI)))
                .filter(|&(f, _, _)| f < 0.9 * nyq)
                .collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let am = 0.6 + 0.4 * (2.0 * PI * am_rate * t + am_phase).sin();
                    am * partials.iter().map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum::<f64>()
                })
                .collect()
        }
        CleanKind::Chirp => {
            let f_a = rng.random_range(150.0..600.0);
            let f_b = rng.random_range(0.3 * nyq..0.7 * nyq);
            let (f_start, f_end) = if rng.random_bool(0.5) { (f_a, f_b) } else { (f_b, f_a) };
            let dur = n as f64 / sr;
            let rate = (f_end - f_start) / dur;
            let phase0 = rng.random_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (2.0 * PI * (f_start * t + 0.5 * rate * t * t) + phase0).sin()
                })
                .collect()
        }
        CleanKind::FilteredNoiseBurst => {
            let center = rng.random_range(300.0..0.6 * nyq);
            let bw = rng.random_range(80.0..400.0);
            let band = resonate(&white_noise(rng, n), center, bw, sr);
            let n_bursts = rng.random_range(1..=3);
            let bursts: Vec<(f64, f64)> = (0..n_bursts)
                .map(|_| {
                    let width = rng.random_range(0.15..0.5) * n as f64;
                    (rng.random_range(0.0..n as f64), width)
                })
                .collect();
            band.iter()
                .enumerate()
                .map(|(i, v)| {
                    let g: f64 = bursts
                        .iter()
                        .map(|&(c, w)| {
                            let u = (i as f64 - c) / w;
                            if u.abs() < 0.5 {
                                (PI * u).cos().powi(2)
                            } else {
                                0.0
                            }
                        })
                        .sum();
                    v * g.min(1.0)
                })
                .collect()
        }
    };
    for (i, v) in x.iter_mut().enumerate() {
        *v *= env(i);
    }
    if x.iter().all(|&v| v == 0.0) {
        // A burst can miss the segment entirely; fall back to a plain tone.
        x = (0..n).map(|i| (2.0 * PI * 440.0 * i as f64 / sr).sin() * env(i)).collect();
    }
    normalize_peak(&mut x, 0.5);
    x
}

/// Draws one clean/degraded pair according to `spec`.
pub fn synth_pair(spec: &SynthSpec, rng: &mut impl Rng) -> Result<PairedSample> {
    spec.validate()?;
    let n = spec.n_samples();
    let clean = clean_signal(spec.clean_kind, n, spec.sample_rate, rng);
    match spec.rir {
        None => {
            let noise = match spec.noise {
                NoiseColor::White => white_noise(rng, n),
                NoiseColor::Pink => pink_noise(rng, n),
            };
            let (lo, hi) = spec.snr_db;
            let snr = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let (degraded, _) = mix_at_snr(&clean, &noise, snr)?;
            Ok(PairedSample { clean, degraded, snr_db: snr, task: Task::Denoise, sample_rate: spec.sample_rate })
        }
        Some(rir) => {
            let h = synth_rir(&rir, spec.sample_rate, rng);
            let degraded = convolve_same(&clean, &h);
            let snr = snr_db(&clean, &degraded).min(200.0);
            Ok(PairedSample { clean, degraded, snr_db: snr, task: Task::Dereverb, sample_rate: spec.sample_rate })
        }
    }
}
