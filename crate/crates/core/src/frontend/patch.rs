use rand::seq::index::sample;
use rand::Rng;

use super::Spectrogram;
use crate::error::{bail, Result};
use crate::numerics::{Scalar, Tensor};

/// Token sequence that remembers where on the patch grid each token lives.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// `N × D`.
    pub tokens: Tensor,
    /// Full grid extents `(time, freq)` before any drop.
    pub grid: (usize, usize),
    /// Sorted positions (row-major into `grid`) of the tokens that remain.
    pub kept: Vec<usize>,
    /// Patch extents `(time, freq)` in spectrogram cells.
    pub patch: (usize, usize),
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.last_dim()
    }

    pub fn is_full(&self) -> bool {
        self.kept.len() == self.grid.0 * self.grid.1
    }
}

/// Linear patch projection: `token = patch · weight + bias`.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    /// `(pt·pf) × D`.
    pub weight: Tensor,
    /// `D`.
    pub bias: Tensor,
}

/// Cuts a spectrogram into time-major patches without projecting them.
///
/// Extents that are not multiples of the patch are edge-padded by repeating
/// the last frame / bin.
pub fn patch_rows(s: &Spectrogram, patch: (usize, usize)) -> Result<PatchGrid> {
    let (t, f) = (s.frames.shape()[0], s.frames.shape()[1]);
    let (pt, pf) = patch;
    if pt == 0 || pf == 0 || pt > t || pf > f {
        bail!(Argument, "patch {patch:?} does not fit spectrogram {t}×{f}");
    }
    let (gt, gf) = (t.div_ceil(pt), f.div_ceil(pf));
    let src = s.frames.data();
    let mut out = Vec::with_capacity(gt * gf * pt * pf);
    for it in 0..gt {
        for jf in 0..gf {
            for a in 0..pt {
                let row = (it * pt + a).min(t - 1);
                for b in 0..pf {
                    let col = (jf * pf + b).min(f - 1);
                    out.push(src[row * f + col]);
                }
            }
        }
    }
    Ok(PatchGrid {
        tokens: Tensor::from_vec(&[gt * gf, pt * pf], out)?,
        grid: (gt, gf),
        kept: (0..gt * gf).collect(),
        patch,
    })
}

/// Patchifies and projects every patch to the embedding dimension.
pub fn patchify(
    s: &Spectrogram,
    patch: (usize, usize),
    embed: &PatchEmbedding,
) -> Result<PatchGrid> {
    let rows = patch_rows(s, patch)?;
    let p = patch.0 * patch.1;
    let w = &embed.weight;
    if w.shape() != [p, embed.bias.numel()] {
        bail!(
            Shape,
            "patch projection {:?} does not map {p}-cell patches to {} dims",
            w.shape(),
            embed.bias.numel()
        );
    }
    let (n, d) = (rows.len(), w.shape()[1]);
    let mut out: Vec<f32> = embed.bias.data().iter().copied().cycle().take(n * d).collect();
    f32::gemm(
        n,
        p,
        d,
        1.0,
        rows.tokens.data(),
        (p as isize, 1),
        w.data(),
        (d as isize, 1),
        1.0,
        &mut out,
        (d as isize, 1),
    );
    Ok(PatchGrid {
        tokens: Tensor::from_vec(&[n, d], out)?,
        ..rows
    })
}

/// Inverse of [`patch_rows`] for undropped, unprojected grids. Returns the
/// padded spectrogram grid.
pub fn unpatchify(g: &PatchGrid) -> Result<Tensor> {
    let (pt, pf) = g.patch;
    if !g.is_full() || g.dim() != pt * pf {
        bail!(Argument, "unpatchify needs a full grid of raw patches");
    }
    let (gt, gf) = g.grid;
    let f = gf * pf;
    let mut out = vec![0.0; gt * pt * f];
    for (k, tok) in g.tokens.data().chunks(pt * pf).enumerate() {
        let (it, jf) = (k / gf, k % gf);
        for a in 0..pt {
            for b in 0..pf {
                out[(it * pt + a) * f + jf * pf + b] = tok[a * pf + b];
            }
        }
    }
    Tensor::from_vec(&[gt * pt, f], out)
}

/// Number of tokens kept by [`patch_drop`]: `N − round(j·N)`, at least one.
pub fn kept_count(n: usize, fraction: f64) -> usize {
    (n - (fraction * n as f64).round() as usize).max(1)
}

/// Drops `round(j·N)` tokens uniformly without replacement. Kept tokens keep
/// their values and original grid positions.
pub fn patch_drop<R: Rng + ?Sized>(g: &PatchGrid, fraction: f64, rng: &mut R) -> Result<PatchGrid> {
    if !(0.0..1.0).contains(&fraction) {
        bail!(Argument, "patch-drop fraction must lie in [0, 1), got {fraction}");
    }
    let n = g.len();
    let keep = kept_count(n, fraction);
    if keep == n {
        return Ok(g.clone());
    }
    let mut chosen = sample(rng, n, keep).into_vec();
    chosen.sort_unstable();
    let d = g.dim();
    let src = g.tokens.data();
    let mut tokens = Vec::with_capacity(keep * d);
    for &i in &chosen {
        tokens.extend_from_slice(&src[i * d..(i + 1) * d]);
    }
    Ok(PatchGrid {
        tokens: Tensor::from_vec(&[keep, d], tokens)?,
        grid: g.grid,
        kept: chosen.iter().map(|&i| g.kept[i]).collect(),
        patch: g.patch,
    })
}
