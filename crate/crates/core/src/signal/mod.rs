//! Signal-processing substrate and synthetic data.

pub mod compress;
pub mod io;
pub mod mel;
pub mod stft;
pub mod synth;

pub use compress::CompressionConfig;
pub use io::{read_wav, write_wav, Manifest, ManifestEntry};
pub use mel::mel_filterbank;
pub use stft::{istft, stft, Spectrogram, StftConfig, StftPlan};
pub use synth::{mix_at_snr, synth_pair, CleanKind, NoiseColor, PairedSample, RirSpec, SynthSpec, Task};
