use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Spectrogram, Waveform};
use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// Floor added to mel power before the logarithm.
pub const LOG_FLOOR: f32 = 1e-6;

/// Short-time analysis settings for [`log_mel`].
#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub mel_bins: usize,
    pub fmin: f64,
    /// Upper band edge; `None` means Nyquist.
    pub fmax: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            mel_bins: 64,
            fmin: 0.0,
            fmax: None,
        }
    }
}

impl MelConfig {
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn n_fft(&self, sample_rate: u32) -> usize {
        self.window_len(sample_rate).next_power_of_two()
    }
}

/// `1 + floor((len − win) / hop)` for `len ≥ win`.
pub fn frame_count(len: usize, win: usize, hop: usize) -> Option<usize> {
    (len >= win && hop > 0).then(|| 1 + (len - win) / hop)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `mel_bins × (n_fft/2 + 1)`, row-major.
pub fn mel_filterbank(
    mel_bins: usize,
    n_fft: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Vec<Vec<f64>> {
    let n_freqs = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (mel_bins + 1) as f64))
        .collect();
    (0..mel_bins)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_freqs)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    let up = (f - left) / (center - left);
                    let down = (right - f) / (right - center);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Centre frequency (Hz) of each mel band.
pub fn mel_centers(mel_bins: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (1..=mel_bins)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (mel_bins + 1) as f64))
        .collect()
}

/// Log-mel spectrogram: Hann-windowed power spectra projected onto a mel
/// filterbank, then `ln(power + 1e-6)`. Frames are not centred or padded.
pub fn log_mel(w: &Waveform, cfg: &MelConfig) -> Result<Spectrogram> {
    let sr = w.sample_rate;
    let win = cfg.window_len(sr);
    let hop = cfg.hop_len(sr);
    let n_fft = cfg.n_fft(sr);
    if win == 0 || hop == 0 || cfg.mel_bins == 0 {
        bail!(Argument, "window, hop and mel_bins must be positive");
    }
    let fmax = cfg.fmax.unwrap_or(sr as f64 / 2.0);
    if !(cfg.fmin >= 0.0 && fmax > cfg.fmin && fmax <= sr as f64 / 2.0) {
        bail!(Argument, "invalid band [{}, {fmax}] Hz", cfg.fmin);
    }
    let Some(frames) = frame_count(w.samples.len(), win, hop) else {
        bail!(
            Argument,
            "waveform of {} samples is shorter than one {win}-sample window",
            w.samples.len()
        );
    };
    let window: Vec<f64> = (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg.mel_bins, n_fft, sr, cfg.fmin, fmax);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    let mut out = Vec::with_capacity(frames * cfg.mel_bins);
    for t in 0..frames {
        let start = t * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < win {
                Complex::new(w.samples[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push((e as f32 + LOG_FLOOR).ln());
        }
    }
    Spectrogram::new(
        Tensor::from_vec(&[frames, cfg.mel_bins], out)?,
        cfg.hop_ms / 1000.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, sr: u32) -> Waveform {
        let n = (seconds * sr as f64) as usize;
        let samples = (0..n)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin()) as f32)
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn frame_count_for_one_second() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.window_len(16_000), 400);
        assert_eq!(cfg.hop_len(16_000), 160);
        assert_eq!(cfg.n_fft(16_000), 512);
        assert_eq!(frame_count(16_000, 400, 160), Some(98));
        let s = log_mel(&tone(440.0, 1.0, 16_000), &cfg).unwrap();
        assert_eq!(s.frames.shape(), &[98, 64]);
    }

    #[test]
    fn silence_is_log_floor() {
        let w = Waveform::new(vec![0.0; 4000], 16_000).unwrap();
        let s = log_mel(&w, &MelConfig::default()).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(s.frames.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn short_waveform_is_rejected() {
        let w = Waveform::new(vec![0.1; 399], 16_000).unwrap();
        assert!(matches!(
            log_mel(&w, &MelConfig::default()),
            Err(crate::Error::Argument(_))
        ));
    }

    #[test]
    fn tone_peaks_in_the_band_nearest_its_frequency() {
        let cfg = MelConfig::default();
        let s = log_mel(&tone(1000.0, 0.5, 16_000), &cfg).unwrap();
        // The oracle: the band whose centre is closest to 1 kHz on the mel axis.
        let centers = mel_centers(cfg.mel_bins, 0.0, 8000.0);
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (hz_to_mel(*a.1) - hz_to_mel(1000.0)).abs();
                let db = (hz_to_mel(*b.1) - hz_to_mel(1000.0)).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
            .0;
        for t in 0..s.frames.shape()[0] {
            let row = s.frames.row(t);
            let argmax = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn one_hop_shift_moves_frames_by_one() {
        let cfg = MelConfig::default();
        let sr = 16_000;
        let hop = cfg.hop_len(sr);
        let mut state = 12345u64;
        let samples: Vec<f32> = (0..8000)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 40) as f32 / (1u64 << 24) as f32) - 0.5
            })
            .collect();
        let a = log_mel(&Waveform::new(samples.clone(), sr).unwrap(), &cfg).unwrap();
        let b = log_mel(&Waveform::new(samples[hop..].to_vec(), sr).unwrap(), &cfg).unwrap();
        let tb = b.frames.shape()[0];
        for t in 0..tb {
            for (x, y) in a.frames.row(t + 1).iter().zip(b.frames.row(t)) {
                assert!((x - y).abs() <= 1e-5, "frame {t}: {x} vs {y}");
            }
        }
    }
}
