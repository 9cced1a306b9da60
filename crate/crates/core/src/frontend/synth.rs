use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::Spectrogram;
use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// Harmonic-stack classification task used as a small stand-in for real audio.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub duration_frames: usize,
    pub mel_bins: usize,
    pub seed: u64,
    pub count: usize,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            duration_frames: 64,
            mel_bins: 64,
            seed: 0,
            count: 1000,
            noise_sigma: 0.3,
        }
    }
}

/// Maximum time shift of the pattern, in frames.
const MAX_OFFSET: i64 = 4;

impl SynthSpec {
    /// Frequency bins lit for class `c`: base `4 + 5c` and its 2nd/3rd multiples.
    pub fn harmonic_bins(&self, class: usize) -> [usize; 3] {
        let base = 4 + 5 * class;
        let top = self.mel_bins - 1;
        [base.min(top), (2 * base).min(top), (3 * base).min(top)]
    }

    /// Sample `index` of the dataset. Each index draws from its own RNG
    /// stream, so samples can be produced in any order.
    pub fn sample(&self, index: usize) -> Result<(Spectrogram, usize)> {
        let (t, f) = (self.duration_frames, self.mel_bins);
        if self.classes == 0 || t == 0 || f == 0 {
            bail!(Argument, "synthetic task needs positive classes and extents");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            bail!(Argument, "noise sigma must be finite and non-negative");
        }
        let label = index % self.classes;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let offset = rng.random_range(-MAX_OFFSET..=MAX_OFFSET);
        let start = (t as i64 / 4 + offset).clamp(0, t as i64) as usize;
        let end = (3 * t as i64 / 4 + offset).clamp(0, t as i64) as usize;
        let mut grid = vec![0.0f32; t * f];
        let bins = self.harmonic_bins(label);
        for row in grid.chunks_mut(f).take(end).skip(start) {
            for &b in &bins {
                row[b] = 1.0;
            }
        }
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
            for v in &mut grid {
                *v += normal.sample(&mut rng) as f32;
            }
        }
        Ok((Spectrogram::new(Tensor::from_vec(&[t, f], grid)?, 0.01)?, label))
    }
}

/// Generates `spec.count` labelled spectrograms; label of sample `i` is `i mod classes`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Vec<(Spectrogram, usize)>> {
    (0..spec.count)
        .into_par_iter()
        .map(|i| spec.sample(i))
        .collect()
}
