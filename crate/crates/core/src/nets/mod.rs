//! Generator and discriminator architectures.
//!
//! Parameters live outside the networks in a [`ParamSet`]; a forward pass
//! takes them as tape variables in the same order, so the caller decides
//! whether they are trainable leaves or frozen constants.

mod layers;
mod mlp;
mod msstft;
mod unet;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use layers::{time_embedding, ParamSet};
pub use mlp::Mlp;
pub use msstft::MsStft;
pub use unet::Unet;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::signal::compress::CompressionConfig;
use crate::signal::stft::StftConfig;
use layers::Init;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Convolutional encoder/decoder (generator) or multi-scale STFT
    /// discriminator.
    Conv,
    /// Pointwise network for scalar toys.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRep {
    CompressedComplexSpectrogram,
    Waveform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub arch: Arch,
    /// Channels at the first level, hidden width for `mlp`.
    pub base_channels: usize,
    /// Encoder/decoder levels, hidden layers for `mlp`.
    pub depth: usize,
    pub time_embed_dim: usize,
    pub input_rep: InputRep,
    pub kernel: usize,
    pub stft: StftConfig,
    pub compression: CompressionConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Conv,
            base_channels: 32,
            depth: 3,
            time_embed_dim: 64,
            input_rep: InputRep::CompressedComplexSpectrogram,
            kernel: 3,
            stft: StftConfig { fft_size: 256, hop: 64 },
            compression: CompressionConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.time_embed_dim < 2 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "generator needs depth >= 1, channels > 0, embedding >= 2 and an odd kernel, got {self:?}"
            )));
        }
        self.stft.validate()?;
        self.compression.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub arch: Arch,
    pub scales: Vec<StftConfig>,
    pub channels: usize,
    pub time_embed_dim: usize,
    /// Hidden layers for `mlp`.
    pub depth: usize,
    pub compression: CompressionConfig,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Conv,
            scales: [(512, 128), (256, 64), (128, 32), (64, 16), (32, 8)]
                .iter()
                .map(|&(fft_size, hop)| StftConfig { fft_size, hop })
                .collect(),
            channels: 16,
            time_embed_dim: 64,
            depth: 3,
            compression: CompressionConfig::default(),
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.time_embed_dim < 2 {
            return Err(Error::Config(format!("discriminator needs channels > 0, got {self:?}")));
        }
        if self.arch == Arch::Conv {
            if self.scales.is_empty() {
                return Err(Error::Config("discriminator needs at least one scale".into()));
            }
            for s in &self.scales {
                s.validate()?;
            }
        }
        self.compression.validate()
    }
}

#[derive(Debug, Clone)]
pub enum Generator {
    Unet(Unet),
    Mlp(Mlp),
}

impl Generator {
    /// Builds the network and its initial parameters. The last layer starts
    /// at zero, so the untrained generator passes `x_t` through.
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut params = ParamSet::default();
        let mut rng = StreamRng::seed_from_u64(seed);
        let mut init = Init { params: &mut params, rng: &mut rng };
        let net = match cfg.arch {
            Arch::Conv => Generator::Unet(Unet::new(cfg, &mut init)?),
            Arch::Mlp => Generator::Mlp(Mlp::new(&mut init, cfg.time_embed_dim, cfg.base_channels, cfg.depth, true)),
        };
        Ok((net, params))
    }

    /// `x_t`, `y`: `[B, L]`; one time per row. Returns the `[B, L]` estimate
    /// of the clean signal.
    pub fn forward<'t>(&self, p: &[Var<'t>], x_t: Var<'t>, y: Var<'t>, t: &[f64]) -> Result<Var<'t>> {
        check_times(t)?;
        match self {
            Generator::Unet(n) => n.forward(p, x_t, y, t),
            Generator::Mlp(n) => n.forward(p, x_t, y, t),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Discriminator {
    MsStft(MsStft),
    Mlp(Mlp),
}

impl Discriminator {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut params = ParamSet::default();
        let mut rng = StreamRng::seed_from_u64(seed);
        let mut init = Init { params: &mut params, rng: &mut rng };
        let net = match cfg.arch {
            Arch::Conv => Discriminator::MsStft(MsStft::new(cfg, &mut init)?),
            Arch::Mlp => Discriminator::Mlp(Mlp::new(&mut init, cfg.time_embed_dim, cfg.channels, cfg.depth, false)),
        };
        Ok((net, params))
    }

    /// One logit map per scale.
    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>, y: Var<'t>, t: &[f64]) -> Result<Vec<Var<'t>>> {
        check_times(t)?;
        match self {
            Discriminator::MsStft(n) => n.forward(p, x, y, t),
            Discriminator::Mlp(n) => Ok(vec![n.forward(p, x, y, t)?]),
        }
    }
}

fn check_times(t: &[f64]) -> Result<()> {
    match t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Domain(format!("network time {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape, Tensor};
    use crate::rng::{normal_vec, stream};

    fn tiny_gen(rep: InputRep) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 2,
            depth: 2,
            time_embed_dim: 4,
            input_rep: rep,
            stft: StftConfig { fft_size: 16, hop: 4 },
            ..GeneratorConfig::default()
        }
    }

    fn tiny_disc() -> DiscriminatorConfig {
        DiscriminatorConfig {
            scales: vec![StftConfig { fft_size: 16, hop: 4 }, StftConfig { fft_size: 8, hop: 2 }],
            channels: 2,
            time_embed_dim: 4,
            ..DiscriminatorConfig::default()
        }
    }

    fn signals(b: usize, len: usize, seed: u64) -> Tensor {
        Tensor::new([b, len], normal_vec(&mut stream(seed, &[]), b * len)).unwrap()
    }

    fn randomize(params: &mut ParamSet, seed: u64) {
        let mut rng = stream(seed, &[]);
        for t in &mut params.tensors {
            for v in t.data_mut() {
                *v += 0.3 * crate::rng::normal(&mut rng);
            }
        }
    }

    #[test]
    fn default_sizes_fit_budget() {
        let (_, g) = Generator::new(&GeneratorConfig::default(), 0).unwrap();
        let (_, d) = Discriminator::new(&DiscriminatorConfig::default(), 0).unwrap();
        assert!(g.count() < 2_000_000, "generator has {} parameters", g.count());
        assert!(d.count() < 2_000_000, "discriminator has {} parameters", d.count());
    }

    #[test]
    fn untrained_generator_passes_x_t_through() {
        for rep in [InputRep::CompressedComplexSpectrogram, InputRep::Waveform] {
            let cfg = GeneratorConfig { input_rep: rep, ..GeneratorConfig::default() };
            let (g, p) = Generator::new(&cfg, 1).unwrap();
            let tape = Tape::new();
            let pv = tape.constants(&p.tensors);
            let x = signals(2, 1024, 2);
            let out = g.forward(&pv, tape.constant(x.clone()), tape.constant(signals(2, 1024, 3)), &[0.5, 1.0]).unwrap();
            let err = out.value().max_abs_diff(&x);
            assert!(err < 1e-6, "{rep:?}: {err}");
        }
    }

    #[test]
    fn generator_preserves_length() {
        for rep in [InputRep::CompressedComplexSpectrogram, InputRep::Waveform] {
            let (g, mut p) = Generator::new(&tiny_gen(rep), 4).unwrap();
            randomize(&mut p, 5);
            for len in [64, 96, 100, 37] {
                let tape = Tape::new();
                let pv = tape.constants(&p.tensors);
                let out = g
                    .forward(&pv, tape.constant(signals(3, len, 6)), tape.constant(signals(3, len, 7)), &[0.1, 0.5, 1.0])
                    .unwrap();
                assert_eq!(out.shape(), vec![3, len]);
            }
        }
    }

    #[test]
    fn discriminator_shapes() {
        let (d, p) = Discriminator::new(&DiscriminatorConfig::default(), 8).unwrap();
        let frames = |len: usize| {
            let tape = Tape::new();
            let pv = tape.constants(&p.tensors);
            let out = d.forward(&pv, tape.constant(signals(2, len, 9)), tape.constant(signals(2, len, 10)), &[0.2, 0.7]).unwrap();
            assert_eq!(out.len(), 5);
            out.iter().map(|o| o.shape()).collect::<Vec<_>>()
        };
        let (a, b) = (frames(1024), frames(2048));
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!((sa[0], sa[1]), (2, 1));
            // L/hop + 1 frames per map.
            assert_eq!(sb[2] - 1, 2 * (sa[2] - 1));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (g, p) = Generator::new(&tiny_gen(InputRep::Waveform), 0).unwrap();
        let tape = Tape::new();
        let pv = tape.constants(&p.tensors);
        let x = tape.constant(signals(2, 32, 1));
        assert!(g.forward(&pv, x, tape.constant(signals(2, 16, 1)), &[0.5, 0.5]).is_err());
        assert!(g.forward(&pv, x, x, &[0.5]).is_err());
        assert!(matches!(g.forward(&pv, x, x, &[0.5, 1.5]), Err(Error::Domain(_))));
        assert!(GeneratorConfig { depth: 0, ..GeneratorConfig::default() }.validate().is_err());
        assert!(DiscriminatorConfig { scales: vec![], ..DiscriminatorConfig::default() }.validate().is_err());
    }

    fn check_generator(rep: InputRep, len: usize) {
        let (g, mut p) = Generator::new(&tiny_gen(rep), 11).unwrap();
        randomize(&mut p, 12);
        let x = signals(2, len, 13);
        let y = signals(2, len, 14);
        let w = signals(2, len, 15);
        let report = gradcheck(&p.tensors, 1e-4, |tape, pv| {
            let out = g.forward(pv, tape.constant(x.clone()), tape.constant(y.clone()), &[0.3, 0.9])?;
            Ok(out.mul(tape.constant(w.clone()))?.sum())
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{rep:?}: {report:?}");
    }

    #[test]
    fn generator_gradcheck_spectral() {
        check_generator(InputRep::CompressedComplexSpectrogram, 64);
    }

    #[test]
    fn generator_gradcheck_waveform() {
        check_generator(InputRep::Waveform, 30);
    }

    #[test]
    fn discriminator_gradcheck() {
        let (d, mut p) = Discriminator::new(&tiny_disc(), 16).unwrap();
        randomize(&mut p, 17);
        let x = signals(2, 32, 18);
        let y = signals(2, 32, 19);
        let report = gradcheck(&p.tensors, 1e-4, |tape, pv| {
            let logits = d.forward(pv, tape.constant(x.clone()), tape.constant(y.clone()), &[0.25, 0.75])?;
            let mut acc = logits[0].softplus().sum();
            for l in &logits[1..] {
                acc = acc.add(l.neg().softplus().sum())?;
            }
            Ok(acc)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }

    #[test]
    fn mlp_gradcheck() {
        let gcfg = GeneratorConfig { arch: Arch::Mlp, base_channels: 5, depth: 2, time_embed_dim: 4, ..GeneratorConfig::default() };
        let (g, mut p) = Generator::new(&gcfg, 20).unwrap();
        randomize(&mut p, 21);
        let x = signals(6, 1, 22);
        let y = signals(6, 1, 23);
        let t = [0.25, 0.5, 0.75, 1.0, 0.25, 0.5];
        let report = gradcheck(&p.tensors, 1e-4, |tape, pv| {
            Ok(g.forward(pv, tape.constant(x.clone()), tape.constant(y.clone()), &t)?.square().sum())
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }
}
