//! Triangular mel filterbank.

use crate::autodiff::Tensor;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `[n_mels, fft_size/2 + 1]` filterbank with triangles equally spaced on the
/// mel scale between 0 Hz and Nyquist.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: f64) -> Tensor {
    let n_bins = fft_size / 2 + 1;
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    let bin_hz = sample_rate / fft_size as f64;
    let mut w = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for f in 0..n_bins {
            let hz = f as f64 * bin_hz;
            let v = if hz > lo && hz <= mid {
                (hz - lo) / (mid - lo)
            } else if hz > mid && hz < hi {
                (hi - hz) / (hi - mid)
            } else {
                0.0
            };
            w[m * n_bins + f] = v;
        }
    }
    Tensor::new([n_mels, n_bins], w).expect("filterbank shape")
}
