//! Finite-difference checks of every differentiable tape op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_check, GradReport, Tape, Tensor64, Var};
use crate::error::Result;

/// Relative tolerance of the 64-bit op checks.
pub const OP_TOL: f64 = 1e-4;
/// Central-difference step of the 64-bit op checks.
pub const OP_STEP: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weighted sum so every output coordinate carries a distinct cotangent.
fn probe(t: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let w = t.constant(Tensor64::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
    let p = t.mul(y, w)?;
    t.sum(p)
}

/// Checks every differentiable op on `trials` random shapes in 64-bit
/// arithmetic, plus softmax on eight values and GELU near zero.
pub fn op_gradient_suite(trials: usize, seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut check = |name: &str, f: &dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>, xs: &[Tensor64]| -> Result<()> {
        out.push(finite_diff_check(name, |t, v| f(t, v), xs, OP_TOL, OP_STEP)?);
        Ok(())
    };
    for trial in 0..trials {
        let s = seed.wrapping_mul(1000) + trial as u64;
        let (r, c) = (rng.random_range(1..6), rng.random_range(2..7));
        let x = rand_tensor(&mut rng, &[r, c]);
        let y = rand_tensor(&mut rng, &[r, c]);
        let k = rng.random_range(1..5);
        let w = rand_tensor(&mut rng, &[c, k]);
        let b = rand_tensor(&mut rng, &[c]);
        let gamma = rand_tensor(&mut rng, &[c]);
        let x1 = [x.clone()];

        check("matmul", &|t, v| { let o = t.matmul(v[0], v[1])?; probe(t, o, s) }, &[x.clone(), w])?;
        check("add", &|t, v| { let o = t.add(v[0], v[1])?; probe(t, o, s) }, &[x.clone(), y.clone()])?;
        check("add_row", &|t, v| { let o = t.add_row(v[0], v[1])?; probe(t, o, s) }, &[x.clone(), b.clone()])?;
        check("mul", &|t, v| { let o = t.mul(v[0], v[1])?; probe(t, o, s) }, &[x.clone(), y.clone()])?;
        check("scale", &|t, v| { let o = t.scale(v[0], -1.7)?; probe(t, o, s) }, &x1)?;
        check("div_scalar", &|t, v| { let o = t.div_scalar(v[0], 0.07)?; probe(t, o, s) }, &x1)?;
        check("transpose", &|t, v| { let o = t.transpose(v[0])?; probe(t, o, s) }, &x1)?;
        check("gelu", &|t, v| { let o = t.gelu(v[0])?; probe(t, o, s) }, &x1)?;
        check("softmax_lastdim", &|t, v| { let o = t.softmax_lastdim(v[0])?; probe(t, o, s) }, &x1)?;
        check("layer_norm", &|t, v| { let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?; probe(t, o, s) }, &[x.clone(), gamma, b])?;
        check("mean_rows", &|t, v| { let o = t.mean_rows(v[0])?; probe(t, o, s) }, &x1)?;
        check("sum", &|t, v| { let o = t.sum(v[0])?; probe(t, o, s) }, &x1)?;
        check("l2_normalize", &|t, v| { let o = t.l2_normalize(v[0], 1e-12)?; probe(t, o, s) }, &x1)?;
        let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        check("cross_entropy", &|t, v| t.cross_entropy(v[0], &labels), &x1)?;
        check("reshape", &|t, v| { let o = t.reshape(v[0], &[r * c])?; probe(t, o, s) }, &x1)?;

        let idx: Vec<usize> = (0..r + 2).map(|_| rng.random_range(0..r)).collect();
        check("gather_rows", &|t, v| { let o = t.gather_rows(v[0], &idx)?; probe(t, o, s) }, &x1)?;
        let total = r + 3;
        let mut perm: Vec<usize> = (0..total).collect();
        perm.sort_by_key(|_| rng.random::<u32>());
        let dst = perm[..r].to_vec();
        check("scatter_rows", &|t, v| { let o = t.scatter_rows(v[0], &dst, total)?; probe(t, o, s) }, &x1)?;
        let m = 4;
        let cols: Vec<usize> = (0..r * m).map(|_| rng.random_range(0..c)).collect();
        check("take_along_rows", &|t, v| { let o = t.take_along_rows(v[0], &cols, m)?; probe(t, o, s) }, &x1)?;
        let z = rand_tensor(&mut rng, &[r, 3]);
        check("concat_cols", &|t, v| { let o = t.concat_cols(&[v[0], v[1], v[0]])?; probe(t, o, s) }, &[x.clone(), z])?;
        let start = rng.random_range(0..c - 1);
        check("slice_cols", &|t, v| { let o = t.slice_cols(v[0], start, c - start)?; probe(t, o, s) }, &x1)?;

        let (gt, gf, ch) = (rng.random_range(2..7), rng.random_range(2..7), rng.random_range(1..4));
        let stride = (rng.random_range(1..3), rng.random_range(1..3));
        let grid = rand_tensor(&mut rng, &[gt, gf, ch]);
        let kernel = rand_tensor(&mut rng, &[3, 3, ch]);
        check("conv2d_grid", &|t, v| { let o = t.conv2d_grid(v[0], v[1], stride, (1, 1))?; probe(t, o, s) }, &[grid, kernel])?;
    }
    let eight = rand_tensor(&mut rng, &[8]);
    check("softmax_lastdim", &|t, v| { let o = t.softmax_lastdim(v[0])?; probe(t, o, 8) }, &[eight])?;
    let near_zero = Tensor64::from_vec(&[5], vec![-1e-3, -1e-6, 0.0, 1e-6, 1e-3])?;
    check("gelu", &|t, v| { let o = t.gelu(v[0])?; t.sum(o) }, &[near_zero])?;
    Ok(out)
}
