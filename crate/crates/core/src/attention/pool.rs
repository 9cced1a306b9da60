use crate::error::{bail, Result};
use crate::numerics::{conv_out_len, Scalar, Tape, TensorBase, Var};

/// Kernel, stride and padding of a grid pooling operator, as `(time, freq)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl PoolSpec {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            bail!(Config, "pool kernel and stride must be positive, got k={kernel:?} s={stride:?}");
        }
        if padding.0 >= kernel.0 || padding.1 >= kernel.1 {
            bail!(Config, "pool padding {padding:?} must be smaller than kernel {kernel:?}");
        }
        Ok(Self {
            kernel,
            stride,
            padding,
        })
    }

    /// 1×1 kernel, unit stride, no padding.
    pub fn identity() -> Self {
        Self {
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
        }
    }

    /// Square kernel `k` with padding `p` and the given stride.
    pub fn square(k: usize, p: usize, stride: (usize, usize)) -> Result<Self> {
        Self::new((k, k), stride, (p, p))
    }

    pub fn output(&self, grid: (usize, usize)) -> Result<(usize, usize)> {
        Ok((
            pooled_len(grid.0, self.kernel.0, self.stride.0, self.padding.0)?,
            pooled_len(grid.1, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    pub fn is_unit_stride(&self) -> bool {
        self.stride == (1, 1)
    }
}

/// Output length of a pooling operator along one axis:
/// `floor((L + 2p − k) / s) + 1`.
pub fn pooled_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    conv_out_len(len, kernel, stride, padding)
}

/// Where the tokens of a sequence sit on their grid.
///
/// `step` is the cumulative stride relative to the input patch grid, so
/// `coords` of tokens at different resolutions live in one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub grid: (usize, usize),
    /// Sorted row-major grid positions present in the sequence.
    pub kept: Vec<usize>,
    pub step: (usize, usize),
}

impl Layout {
    pub fn full(grid: (usize, usize)) -> Self {
        Self {
            grid,
            kept: (0..grid.0 * grid.1).collect(),
            step: (1, 1),
        }
    }

    pub fn sparse(grid: (usize, usize), kept: Vec<usize>) -> Result<Self> {
        let cells = grid.0 * grid.1;
        if kept.is_empty() || kept.windows(2).any(|w| w[0] >= w[1]) || kept[kept.len() - 1] >= cells {
            bail!(Argument, "kept list must be non-empty, strictly increasing and inside the {grid:?} grid");
        }
        Ok(Self {
            grid,
            kept,
            step: (1, 1),
        })
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_full(&self) -> bool {
        self.kept.len() == self.cells()
    }

    /// Position of every token in input-patch units.
    pub fn coords(&self) -> Vec<(i64, i64)> {
        let gf = self.grid.1;
        self.kept
            .iter()
            .map(|&i| (((i / gf) * self.step.0) as i64, ((i % gf) * self.step.1) as i64))
            .collect()
    }

    /// Layout after pooling. An output cell is present when any in-bounds
    /// input cell under its kernel window is present.
    pub fn pooled(&self, spec: &PoolSpec) -> Result<Layout> {
        let grid = spec.output(self.grid)?;
        let step = (self.step.0 * spec.stride.0, self.step.1 * spec.stride.1);
        if self.is_full() {
            return Ok(Layout {
                step,
                ..Layout::full(grid)
            });
        }
        let mut present = vec![false; self.cells()];
        for &i in &self.kept {
            present[i] = true;
        }
        let window = |o: usize, k: usize, s: usize, p: usize, n: usize| {
            let lo = (o * s) as i64 - p as i64;
            (lo.max(0) as usize)..((lo + k as i64).min(n as i64).max(0) as usize)
        };
        let kept = (0..grid.0 * grid.1)
            .filter(|&o| {
                let rows = window(o / grid.1, spec.kernel.0, spec.stride.0, spec.padding.0, self.grid.0);
                rows.into_iter().any(|r| {
                    window(o % grid.1, spec.kernel.1, spec.stride.1, spec.padding.1, self.grid.1)
                        .any(|c| present[r * self.grid.1 + c])
                })
            })
            .collect();
        Ok(Layout { grid, kept, step })
    }
}

/// Pools an `[N × C]` token matrix laid out by `layout` with a depthwise
/// `[kt × kf × C]` kernel. Absent cells are zero-filled before the
/// convolution; only present output cells are returned.
pub fn pool_tokens<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    kernel: Var,
    spec: &PoolSpec,
    layout: &Layout,
) -> Result<(Var, Layout)> {
    let (n, c) = (tape.shape(x)[0], tape.shape(x)[1]);
    if n != layout.len() {
        bail!(State, "{n} tokens do not match a layout of {} cells", layout.len());
    }
    if tape.shape(kernel) != [spec.kernel.0, spec.kernel.1, c] {
        bail!(
            Shape,
            "pool kernel {:?} does not match spec {:?} over {c} channels",
            tape.shape(kernel),
            spec.kernel
        );
    }
    let out = layout.pooled(spec)?;
    let grid_in = if layout.is_full() {
        x
    } else {
        tape.scatter_rows(x, &layout.kept, layout.cells())?
    };
    let grid_in = tape.reshape(grid_in, &[layout.grid.0, layout.grid.1, c])?;
    let pooled = tape.conv2d_grid(grid_in, kernel, spec.stride, spec.padding)?;
    let flat = tape.reshape(pooled, &[out.cells(), c])?;
    let y = if out.is_full() {
        flat
    } else {
        tape.gather_rows(flat, &out.kept)?
    };
    Ok((y, out))
}

/// Fixed averaging kernel used on the residual path: a centre tap for unit
/// stride, a uniform box otherwise.
pub fn skip_kernel<T: Scalar>(spec: &PoolSpec, channels: usize) -> TensorBase<T> {
    let (kt, kf) = spec.kernel;
    if spec.is_unit_stride() {
        let centre = (spec.padding.0 * kf + spec.padding.1) * channels;
        let mut k = TensorBase::zeros(&[kt, kf, channels]);
        k.data_mut()[centre..centre + channels].fill(T::one());
        k
    } else {
        TensorBase::full(&[kt, kf, channels], T::of(1.0 / (kt * kf) as f64))
    }
}

/// Applies the residual-path pooling. Unit-stride pooling with a centred
/// kernel is a pure re-indexing and skips the convolution.
pub fn pool_skip<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    spec: &PoolSpec,
    layout: &Layout,
) -> Result<(Var, Layout)> {
    let centred = spec.kernel.0 == 2 * spec.padding.0 + 1 && spec.kernel.1 == 2 * spec.padding.1 + 1;
    if spec.is_unit_stride() && centred {
        let out = layout.pooled(spec)?;
        if out.kept == layout.kept {
            return Ok((x, out));
        }
        let grid = tape.scatter_rows(x, &layout.kept, layout.cells())?;
        return Ok((tape.gather_rows(grid, &out.kept)?, out));
    }
    let c = tape.shape(x)[1];
    let kernel = tape.constant(skip_kernel(spec, c));
    pool_tokens(tape, x, kernel, spec, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor64;

    #[test]
    fn pooled_len_examples() {
        assert_eq!(pooled_len(16, 3, 2, 1).unwrap(), 8);
        assert_eq!(pooled_len(7, 3, 2, 1).unwrap(), 4);
        assert_eq!(pooled_len(13, 1, 1, 0).unwrap(), 13);
        assert!(pooled_len(1, 4, 1, 1).is_err());
        assert!(PoolSpec::new((3, 3), (1, 1), (3, 1)).is_err());
    }

    #[test]
    fn identity_pool_leaves_tokens_unchanged() {
        let mut t = Tape::<f64>::new();
        let x = Tensor64::from_fn(&[6, 3], |i| i as f64 * 0.5 - 1.0);
        let xv = t.constant(x.clone());
        let k = t.constant(Tensor64::full(&[1, 1, 3], 1.0));
        let (y, out) = pool_tokens(&mut t, xv, k, &PoolSpec::identity(), &Layout::full((2, 3))).unwrap();
        assert_eq!(t.value(y), &x.reshape(&[6, 3]).unwrap());
        assert_eq!(out, Layout::full((2, 3)));
    }

    #[test]
    fn strided_pool_on_sixteen_grid() {
        let spec = PoolSpec::square(3, 1, (2, 2)).unwrap();
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor64::full(&[256, 4], 2.5));
        let k = t.constant(skip_kernel::<f64>(&spec, 4));
        let (y, out) = pool_tokens(&mut t, x, k, &spec, &Layout::full((16, 16))).unwrap();
        assert_eq!(out.grid, (8, 8));
        assert_eq!(t.shape(y), &[64, 4]);
        assert_eq!(out.step, (2, 2));
        // Interior windows see nine real cells; the border sees zero padding.
        assert!((t.value(y).at(&[9, 0]) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn constant_input_with_unit_sum_kernel_stays_constant() {
        let spec = PoolSpec::square(3, 0, (1, 1)).unwrap();
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor64::full(&[25, 2], -1.5));
        let k = t.constant(Tensor64::from_fn(&[3, 3, 2], |i| [0.3, 0.1, 0.05, 0.05, 0.2, 0.1, 0.05, 0.1, 0.05][i / 2]));
        let (y, _) = pool_tokens(&mut t, x, k, &spec, &Layout::full((5, 5))).unwrap();
        assert!(t.value(y).data().iter().all(|v| (v + 1.5).abs() < 1e-12));
    }

    #[test]
    fn sparse_layouts_dilate_under_pooling() {
        let layout = Layout::sparse((4, 4), vec![0, 15]).unwrap();
        let unit = PoolSpec::square(3, 1, (1, 1)).unwrap();
        assert_eq!(layout.pooled(&unit).unwrap().kept, vec![0, 1, 4, 5, 10, 11, 14, 15]);
        let strided = PoolSpec::square(3, 1, (2, 2)).unwrap();
        let p = layout.pooled(&strided).unwrap();
        assert_eq!(p.grid, (2, 2));
        assert_eq!(p.kept, vec![0, 3]);
        assert_eq!(p.coords(), vec![(0, 0), (2, 2)]);
        assert!(Layout::sparse((2, 2), vec![1, 1]).is_err());
    }

    #[test]
    fn sparse_pool_matches_dense_pool_of_zero_filled_grid() {
        let spec = PoolSpec::square(3, 1, (2, 1)).unwrap();
        let layout = Layout::sparse((4, 3), vec![1, 2, 6, 11]).unwrap();
        let vals = Tensor64::from_fn(&[4, 2], |i| i as f64 + 1.0);
        let kern = Tensor64::from_fn(&[3, 3, 2], |i| (i as f64 * 0.37).sin());

        let mut t = Tape::<f64>::new();
        let x = t.constant(vals.clone());
        let k = t.constant(kern.clone());
        let (y, out) = pool_tokens(&mut t, x, k, &spec, &layout).unwrap();

        let mut dense = vec![0.0; 12 * 2];
        for (r, &pos) in layout.kept.iter().enumerate() {
            dense[pos * 2..pos * 2 + 2].copy_from_slice(vals.row(r));
        }
        let mut t2 = Tape::<f64>::new();
        let xd = t2.constant(Tensor64::from_vec(&[12, 2], dense).unwrap());
        let k2 = t2.constant(kern);
        let (yd, _) = pool_tokens(&mut t2, xd, k2, &spec, &Layout::full((4, 3))).unwrap();
        for (r, &pos) in out.kept.iter().enumerate() {
            assert_eq!(t.value(y).row(r), t2.value(yd).row(pos));
        }
    }

    #[test]
    fn unit_stride_skip_is_identity_without_drop() {
        let spec = PoolSpec::square(3, 1, (1, 1)).unwrap();
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor64::from_fn(&[9, 2], |i| i as f64));
        let (y, _) = pool_skip(&mut t, x, &spec, &Layout::full((3, 3))).unwrap();
        assert_eq!(y, x);
        let layout = Layout::sparse((3, 3), vec![4]).unwrap();
        let x1 = t.constant(Tensor64::from_vec(&[1, 2], vec![7.0, 8.0]).unwrap());
        let (y1, out) = pool_skip(&mut t, x1, &spec, &layout).unwrap();
        assert_eq!(out.len(), 9);
        assert_eq!(t.value(y1).row(4), &[7.0, 8.0]);
        assert_eq!(t.value(y1).row(0), &[0.0, 0.0]);
    }
}
