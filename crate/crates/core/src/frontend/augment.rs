use rand::Rng;

use super::Spectrogram;
use crate::error::{bail, Result};
use crate::numerics::Tensor;

const SCALE_RANGE: (f64, f64) = (0.6, 1.0);
const ASPECT_RANGE: (f64, f64) = (0.75, 4.0 / 3.0);

/// A crop window on the `T × F` grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropParams {
    pub t0: usize,
    pub f0: usize,
    pub height: usize,
    pub width: usize,
}

impl CropParams {
    /// Window covering `scale` of the area with time/freq aspect `aspect`,
    /// placed at the origin.
    pub fn from_scale(t: usize, f: usize, scale: f64, aspect: f64) -> Self {
        let height = ((t as f64 * (scale * aspect).sqrt()).round() as usize).clamp(1, t);
        let width = ((f as f64 * (scale / aspect).sqrt()).round() as usize).clamp(1, f);
        Self {
            t0: 0,
            f0: 0,
            height,
            width,
        }
    }

    pub fn sample<R: Rng + ?Sized>(t: usize, f: usize, rng: &mut R) -> Self {
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let aspect = rng
            .random_range(ASPECT_RANGE.0.ln()..=ASPECT_RANGE.1.ln())
            .exp();
        let mut c = Self::from_scale(t, f, scale, aspect);
        c.t0 = rng.random_range(0..=t - c.height);
        c.f0 = rng.random_range(0..=f - c.width);
        c
    }
}

/// Bilinear resize with half-pixel centres and clamped borders.
pub fn resize_bilinear(src: &[f32], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f32> {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let ratio = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (x - lo as f64) as f32)
            })
            .collect()
    };
    let rows = axis(h, oh);
    let cols = axis(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(r0, r1, a) in &rows {
        for &(c0, c1, b) in &cols {
            let top = src[r0 * w + c0] + b * (src[r0 * w + c1] - src[r0 * w + c0]);
            let bot = src[r1 * w + c0] + b * (src[r1 * w + c1] - src[r1 * w + c0]);
            out.push(top + a * (bot - top));
        }
    }
    out
}

/// Crops `crop` out of `s` and resizes it back to the original extents.
pub fn crop_and_resize(s: &Spectrogram, crop: CropParams) -> Result<Spectrogram> {
    let (t, f) = (s.time_len(), s.mel_bins());
    if crop.height == 0
        || crop.width == 0
        || crop.t0 + crop.height > t
        || crop.f0 + crop.width > f
    {
        bail!(Argument, "crop {crop:?} leaves the {t}×{f} grid");
    }
    let src = s.frames.data();
    let mut window = Vec::with_capacity(crop.height * crop.width);
    for r in crop.t0..crop.t0 + crop.height {
        window.extend_from_slice(&src[r * f + crop.f0..r * f + crop.f0 + crop.width]);
    }
    let out = resize_bilinear(&window, (crop.height, crop.width), (t, f));
    Spectrogram::new(Tensor::from_vec(&[t, f], out)?, s.frame_hop)
}

/// Random resized crop over the time/frequency plane.
pub fn random_resized_crop<R: Rng + ?Sized>(s: &Spectrogram, rng: &mut R) -> Result<Spectrogram> {
    let crop = CropParams::sample(s.time_len(), s.mel_bins(), rng);
    crop_and_resize(s, crop)
}

/// `λ·s1 + (1 − λ)·s2`, evaluated in double precision.
pub fn mixup(s1: &Spectrogram, s2: &Spectrogram, lambda: f64) -> Result<Spectrogram> {
    if s1.frames.shape() != s2.frames.shape() {
        bail!(
            Argument,
            "mixup of {:?} with {:?}",
            s1.frames.shape(),
            s2.frames.shape()
        );
    }
    if !(0.0..=1.0).contains(&lambda) {
        bail!(Argument, "mixup weight {lambda} outside [0, 1]");
    }
    let data = s1
        .frames
        .data()
        .iter()
        .zip(s2.frames.data())
        .map(|(&a, &b)| (b as f64 + lambda * (a as f64 - b as f64)) as f32)
        .collect();
    Spectrogram::new(Tensor::from_vec(s1.frames.shape(), data)?, s1.frame_hop)
}
