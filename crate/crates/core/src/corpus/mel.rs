use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::MelSpectrogram;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied before the natural log.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    /// Frame length and FFT size, in samples.
    pub window: usize,
    pub hop: usize,
    pub mel_bins: usize,
    pub f_min: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 16_000,
            window: 512,
            hop: 128,
            mel_bins: 16,
            f_min: 0.0,
            f_max: None,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `[mel_bins, window/2 + 1]` triangular weights on linear-frequency FFT
/// bins, with edges evenly spaced on the mel scale. Also returns the
/// centre frequency of each band.
pub fn mel_filterbank(cfg: &MelConfig) -> (Tensor, Vec<f64>) {
    let n_freqs = cfg.window / 2 + 1;
    let f_max = cfg.f_max.unwrap_or(cfg.sample_rate as f64 / 2.0);
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.window as f64;
    let mut w = vec![0.0; cfg.mel_bins * n_freqs];
    for m in 0..cfg.mel_bins {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_freqs {
            let f = k as f64 * bin_hz;
            let up = (f - left) / (centre - left);
            let down = (right - f) / (right - centre);
            w[m * n_freqs + k] = up.min(down).max(0.0);
        }
    }
    let centres = edges[1..=cfg.mel_bins].to_vec();
    (
        Tensor::matrix(cfg.mel_bins, n_freqs, w).expect("filterbank shape"),
        centres,
    )
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Log-mel spectrogram: Hann-windowed STFT magnitude, triangular mel
/// filterbank, `ln(max(x, 1e-5))`. Frames start at multiples of `hop` with
/// no padding, so `T = 1 + ⌊(n − window) / hop⌋`.
pub fn extract_mel(samples: &[f64], sample_rate: u32, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if sample_rate == 0 {
        return Err(Error::Audio("sample rate must be positive".into()));
    }
    if sample_rate != cfg.sample_rate {
        return Err(Error::Audio(format!(
            "audio at {sample_rate} Hz, mel config expects {} Hz",
            cfg.sample_rate
        )));
    }
    if cfg.window == 0 || cfg.hop == 0 || cfg.mel_bins == 0 {
        return Err(Error::Config("window, hop and mel_bins must be positive".into()));
    }
    if samples.len() < cfg.window {
        return Err(Error::Audio(format!(
            "{} samples is shorter than one {}-sample window",
            samples.len(),
            cfg.window
        )));
    }
    let frames = 1 + (samples.len() - cfg.window) / cfg.hop;
    let n_freqs = cfg.window / 2 + 1;
    let (bank, _) = mel_filterbank(cfg);
    let window = hann(cfg.window);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(cfg.window);

    let mut out = Vec::with_capacity(frames * cfg.mel_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.window];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        let mag: Vec<f64> = buf[..n_freqs].iter().map(|c| c.norm()).collect();
        for m in 0..cfg.mel_bins {
            let e: f64 = bank
                .row_slice(m)
                .iter()
                .zip(&mag)
                .map(|(w, x)| w * x)
                .sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(MelSpectrogram {
        frames: Tensor::matrix(frames, cfg.mel_bins, out)?,
        hop: cfg.hop,
        window: cfg.window,
        sample_rate,
    })
}
