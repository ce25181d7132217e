//! Short-time Fourier transform with a periodic Hann window and centered
//! framing.
//!
//! Frame `m` covers samples `m·hop − K/2 .. m·hop + K/2` (zero outside the
//! signal), so a signal of length `L` has `L/hop + 1` frames. The inverse is a
//! weighted overlap-add normalized by the squared-window envelope, which makes
//! `istft(stft(x)) = x` exact up to rounding whenever that envelope is bounded
//! away from zero.
//!
//! Spectrogram tensors use a channel layout `[Re(bin 0..F), Im(bin 0..F)]` by
//! frame, i.e. shape `[2F, frames]` per signal. The four kernels here (forward,
//! inverse and their adjoints) back both the plain API and the differentiable
//! graph ops.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        let c = Self { fft_size, hop };
        c.validate()?;
        Ok(c)
    }

    /// Rejects configurations whose overlap-add envelope can vanish.
    pub fn validate(&self) -> Result<()> {
        let k = self.fft_size;
        if k < 4 || k % 2 != 0 {
            return Err(Error::Config(format!("fft_size must be even and >= 4, got {k}")));
        }
        if self.hop == 0 || self.hop > k / 2 {
            return Err(Error::Config(format!(
                "hop must lie in 1..={} for fft_size {k}, got {}",
                k / 2,
                self.hop
            )));
        }
        let w = hann(k);
        let mut env = vec![0.0; self.hop];
        for (i, wi) in w.iter().enumerate() {
            env[i % self.hop] += wi * wi;
        }
        let (lo, hi) = env.iter().fold((f64::MAX, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
        if lo < 1e-3 * hi {
            return Err(Error::Config(format!(
                "fft_size {k} with hop {} does not overlap-add to a usable envelope",
                self.hop
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    pub fn plan(&self) -> Result<Arc<StftPlan>> {
        self.validate()?;
        thread_local! {
            static PLANS: RefCell<HashMap<StftConfig, Arc<StftPlan>>> = RefCell::new(HashMap::new());
        }
        Ok(PLANS.with(|p| {
            p.borrow_mut().entry(*self).or_insert_with(|| Arc::new(StftPlan::build(*self))).clone()
        }))
    }
}

/// Periodic Hann window of length `k`.
pub fn hann(k: usize) -> Vec<f64> {
    (0..k).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / k as f64).cos()).collect()
}

pub struct StftPlan {
    pub cfg: StftConfig,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("cfg", &self.cfg).finish()
    }
}

impl StftPlan {
    fn build(cfg: StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            cfg,
            window: hann(cfg.fft_size),
            fwd: planner.plan_fft_forward(cfg.fft_size),
            inv: planner.plan_fft_inverse(cfg.fft_size),
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    fn frame_start(&self, m: usize) -> isize {
        (m * self.cfg.hop) as isize - (self.cfg.fft_size / 2) as isize
    }

    /// Squared-window overlap-add envelope over `len` samples.
    pub fn envelope(&self, len: usize) -> Vec<f64> {
        let mut env = vec![0.0; len];
        for m in 0..self.cfg.n_frames(len) {
            let start = self.frame_start(m);
            for (k, w) in self.window.iter().enumerate() {
                let j = start + k as isize;
                if j >= 0 && (j as usize) < len {
                    env[j as usize] += w * w;
                }
            }
        }
        env
    }

    /// `x` (length `len`) to `out` (`[2F, frames]`).
    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        let k = self.cfg.fft_size;
        let nb = self.cfg.n_bins();
        let nf = self.cfg.n_frames(x.len());
        debug_assert_eq!(out.len(), 2 * nb * nf);
        let mut buf = vec![Complex64::default(); k];
        let mut scratch = vec![Complex64::default(); self.fwd.get_inplace_scratch_len()];
        for m in 0..nf {
            let start = self.frame_start(m);
            for (i, slot) in buf.iter_mut().enumerate() {
                let j = start + i as isize;
                let v = if j >= 0 && (j as usize) < x.len() { x[j as usize] } else { 0.0 };
                *slot = Complex64::new(self.window[i] * v, 0.0);
            }
            self.fwd.process_with_scratch(&mut buf, &mut scratch);
            for f in 0..nb {
                out[f * nf + m] = buf[f].re;
                out[(nb + f) * nf + m] = buf[f].im;
            }
        }
    }

    /// Adjoint of [`forward`](Self::forward): accumulates into `grad_x`.
    pub fn forward_adjoint(&self, g: &[f64], grad_x: &mut [f64]) {
        let k = self.cfg.fft_size;
        let nb = self.cfg.n_bins();
        let len = grad_x.len();
        let nf = self.cfg.n_frames(len);
        let mut buf = vec![Complex64::default(); k];
        let mut scratch = vec![Complex64::default(); self.inv.get_inplace_scratch_len()];
        for m in 0..nf {
            buf.iter_mut().for_each(|b| *b = Complex64::default());
            for f in 0..nb {
                buf[f] = Complex64::new(g[f * nf + m], g[(nb + f) * nf + m]);
            }
            self.inv.process_with_scratch(&mut buf, &mut scratch);
            let start = self.frame_start(m);
            for (i, b) in buf.iter().enumerate() {
                let j = start + i as isize;
                if j >= 0 && (j as usize) < len {
                    grad_x[j as usize] += self.window[i] * b.re;
                }
            }
        }
    }

    fn bin_weight(&self, f: usize) -> f64 {
        let k = self.cfg.fft_size;
        if f == 0 || f == k / 2 {
            1.0 / k as f64
        } else {
            2.0 / k as f64
        }
    }

    /// `[2F, frames]` spectrogram to a waveform of length `len`.
    pub fn inverse(&self, s: &[f64], len: usize, out: &mut [f64]) {
        let k = self.cfg.fft_size;
        let nb = self.cfg.n_bins();
        let nf = self.cfg.n_frames(len);
        debug_assert_eq!(s.len(), 2 * nb * nf);
        let env = self.envelope(len);
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut buf = vec![Complex64::default(); k];
        let mut scratch = vec![Complex64::default(); self.inv.get_inplace_scratch_len()];
        for m in 0..nf {
            buf.iter_mut().for_each(|b| *b = Complex64::default());
            for f in 0..nb {
                let c = self.bin_weight(f);
                buf[f] = Complex64::new(c * s[f * nf + m], c * s[(nb + f) * nf + m]);
            }
            self.inv.process_with_scratch(&mut buf, &mut scratch);
            let start = self.frame_start(m);
            for (i, b) in buf.iter().enumerate() {
                let j = start + i as isize;
                if j >= 0 && (j as usize) < len {
                    out[j as usize] += self.window[i] * b.re;
                }
            }
        }
        for (o, e) in out.iter_mut().zip(&env) {
            *o /= e;
        }
    }

    /// Adjoint of [`inverse`](Self::inverse): accumulates into `grad_s`.
    pub fn inverse_adjoint(&self, g: &[f64], grad_s: &mut [f64]) {
        let k = self.cfg.fft_size;
        let nb = self.cfg.n_bins();
        let len = g.len();
        let nf = self.cfg.n_frames(len);
        let env = self.envelope(len);
        let mut buf = vec![Complex64::default(); k];
        let mut scratch = vec![Complex64::default(); self.fwd.get_inplace_scratch_len()];
        for m in 0..nf {
            let start = self.frame_start(m);
            for (i, slot) in buf.iter_mut().enumerate() {
                let j = start + i as isize;
                let v = if j >= 0 && (j as usize) < len { g[j as usize] / env[j as usize] } else { 0.0 };
                *slot = Complex64::new(self.window[i] * v, 0.0);
            }
            self.fwd.process_with_scratch(&mut buf, &mut scratch);
            for f in 0..nb {
                let c = self.bin_weight(f);
                grad_s[f * nf + m] += c * buf[f].re;
                grad_s[(nb + f) * nf + m] += c * buf[f].im;
            }
        }
    }
}

/// Complex spectrogram of a single signal, bin-major (`data[f * frames + m]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self { bins, frames, data: vec![Complex64::default(); bins * frames] }
    }

    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub(crate) fn from_channels(bins: usize, frames: usize, ch: &[f64]) -> Self {
        let n = bins * frames;
        let data = (0..n).map(|i| Complex64::new(ch[i], ch[n + i])).collect();
        Self { bins, frames, data }
    }

    pub(crate) fn to_channels(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.data.iter().map(|c| c.re).collect();
        out.extend(self.data.iter().map(|c| c.im));
        out
    }
}

pub fn stft(x: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    let plan = cfg.plan()?;
    let (nb, nf) = (cfg.n_bins(), cfg.n_frames(x.len()));
    let mut ch = vec![0.0; 2 * nb * nf];
    plan.forward(x, &mut ch);
    Ok(Spectrogram::from_channels(nb, nf, &ch))
}

pub fn istft(s: &Spectrogram, cfg: &StftConfig, len: usize) -> Result<Vec<f64>> {
    let plan = cfg.plan()?;
    if s.bins != cfg.n_bins() || s.frames != cfg.n_frames(len) {
        return Err(Error::Shape(format!(
            "spectrogram {}x{} does not match length {len} under {cfg:?}",
            s.bins, s.frames
        )));
    }
    let mut out = vec![0.0; len];
    plan.inverse(&s.to_channels(), len, &mut out);
    Ok(out)
}
