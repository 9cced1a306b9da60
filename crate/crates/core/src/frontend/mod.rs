//! Audio front end: WAV decoding, log-mel analysis, patch grids, augmentation,
//! synthetic data and feature files.

mod augment;
mod features;
mod mel;
mod patch;
mod synth;
mod wav;

pub use augment::{crop_and_resize, mixup, random_resized_crop, resize_bilinear, CropParams};
pub use features::{
    decode_features, encode_features, fit_frames, read_feature_file, read_manifest, write_feature_file, write_manifest,
    ManifestEntry, FEATURE_MAGIC,
};
pub use mel::{frame_count, hz_to_mel, log_mel, mel_centers, mel_filterbank, mel_to_hz, MelConfig, LOG_FLOOR};
pub use patch::{kept_count, patch_drop, patch_rows, patchify, unpatchify, PatchEmbedding, PatchGrid};
pub use synth::{gen_synthetic, SynthSpec};
pub use wav::{decode_wav, encode_wav};

use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            bail!(Argument, "sample rate must be positive");
        }
        if samples.is_empty() {
            bail!(Argument, "waveform has no samples");
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Log-scaled `T × F` time/mel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: Tensor,
    /// Seconds between consecutive frames.
    pub frame_hop: f64,
}

impl Spectrogram {
    pub fn new(frames: Tensor, frame_hop: f64) -> Result<Self> {
        if frames.rank() != 2 {
            bail!(Shape, "spectrogram must be T×F, got {:?}", frames.shape());
        }
        if !frames.is_finite() {
            bail!(Numeric, "spectrogram contains non-finite values");
        }
        Ok(Self { frames, frame_hop })
    }

    pub fn time_len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn mel_bins(&self) -> usize {
        self.frames.shape()[1]
    }
}
