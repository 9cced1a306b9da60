//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamSet, Scalar, Tape, Tensor64, TensorBase, Var};
use crate::error::{bail, Result};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub per_input_err: Vec<f64>,
    pub passed: bool,
}

/// Knobs for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub tol: f64,
    pub step: f64,
    /// Check only this fraction of coordinates (at least one per input).
    pub sample: Option<(f64, u64)>,
    /// Judge all checked coordinates as one vector instead of input by input.
    pub joint: bool,
}

impl CheckOptions {
    pub fn new(tol: f64, step: f64) -> Self {
        Self {
            tol,
            step,
            sample: None,
            joint: false,
        }
    }

    pub fn sampled(mut self, fraction: f64, seed: u64) -> Self {
        self.sample = Some((fraction, seed));
        self
    }

    pub fn joint(mut self) -> Self {
        self.joint = true;
        self
    }
}

/// Denominator floor so all-zero gradient pairs compare as equal.
const NORM_FLOOR: f64 = 1e-7;

/// Loss and optional analytic gradient for one assignment of the inputs.
pub type Evaluation<T> = (T, Option<Vec<Vec<T>>>);

/// Checks a tape-built scalar function of `inputs` in 64-bit arithmetic.
///
/// `f` receives a fresh tape with every input registered as a tracked leaf.
pub fn finite_diff_check<F>(
    op_name: &str,
    f: F,
    inputs: &[Tensor64],
    tol: f64,
    step: f64,
) -> Result<GradReport>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor64], want_grad: bool| -> Result<Evaluation<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            bail!(Argument, "{op_name}: checked function must return a scalar");
        }
        let value = tape.value(loss).data()[0];
        if !want_grad {
            return Ok((value, None));
        }
        let mut grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| grads.take(v).unwrap_or_else(|| vec![0.0; x.numel()]))
            .collect();
        Ok((value, Some(g)))
    };
    check_gradients(op_name, eval, inputs, &CheckOptions::new(tol, step))
}

/// Compares the analytic gradient produced by `eval` against central
/// differences `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate.
///
/// The per-input error is `‖a − n‖ / max(‖a‖ + ‖n‖, floor)` over the checked
/// coordinates.
pub fn check_gradients<T, E>(
    op_name: &str,
    eval: E,
    inputs: &[TensorBase<T>],
    opts: &CheckOptions,
) -> Result<GradReport>
where
    T: Scalar,
    E: Fn(&[TensorBase<T>], bool) -> Result<Evaluation<T>>,
{
    if opts.step <= 0.0 || opts.tol <= 0.0 {
        bail!(Argument, "step and tolerance must be positive");
    }
    if inputs.iter().any(|x| !x.is_finite()) {
        bail!(Argument, "{op_name}: gradient check inputs must be finite");
    }
    let (f0, analytic) = eval(inputs, true)?;
    let (f1, _) = eval(inputs, false)?;
    if f0.as_f64().to_bits() != f1.as_f64().to_bits() {
        bail!(
            Oracle,
            "{op_name}: two forward passes disagree ({f0} vs {f1}); function is not deterministic"
        );
    }
    let analytic = analytic.expect("gradient requested");
    let mut rng = opts.sample.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));

    let mut work: Vec<TensorBase<T>> = inputs.to_vec();
    let mut per_input_err = Vec::with_capacity(inputs.len());
    let mut totals = (0.0, 0.0, 0.0);
    for (k, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let coords: Vec<usize> = match (&opts.sample, rng.as_mut()) {
            (Some((fraction, _)), Some(rng)) => {
                let count = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
                let mut c = sample(rng, n, count).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for &c in &coords {
            let orig = x.data()[c];
            let h = T::of(opts.step);
            work[k].data_mut()[c] = orig + h;
            let (fp, _) = eval(&work, false)?;
            work[k].data_mut()[c] = orig - h;
            let (fm, _) = eval(&work, false)?;
            work[k].data_mut()[c] = orig;
            // Use the realised step so rounding of orig±h does not bias the quotient.
            let span = (orig + h).as_f64() - (orig - h).as_f64();
            let numeric = (fp.as_f64() - fm.as_f64()) / span;
            let a = analytic[k][c].as_f64();
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = (a2.sqrt() + n2.sqrt()).max(NORM_FLOOR);
        per_input_err.push(diff2.sqrt() / denom);
        totals = (totals.0 + diff2, totals.1 + a2, totals.2 + n2);
    }
    let max_rel_err = if opts.joint {
        totals.0.sqrt() / (totals.1.sqrt() + totals.2.sqrt()).max(NORM_FLOOR)
    } else {
        per_input_err.iter().copied().fold(0.0, f64::max)
    };
    Ok(GradReport {
        op_name: op_name.to_string(),
        max_rel_err,
        passed: max_rel_err <= opts.tol,
        per_input_err,
    })
}

/// Runs [`check_gradients`] with every tensor of `params` as an input.
pub fn check_param_gradients<T, F>(
    op_name: &str,
    params: &ParamSet<T>,
    loss: F,
    opts: &CheckOptions,
) -> Result<GradReport>
where
    T: Scalar,
    F: for<'g> Fn(&mut Graph<'g, T>) -> Result<Var>,
{
    let eval = |xs: &[TensorBase<T>], want_grad: bool| -> Result<Evaluation<T>> {
        let ps = params.with_values(xs)?;
        let mut g = Graph::new(&ps, true);
        let out = loss(&mut g)?;
        let value = g.value(out).data()[0];
        if !want_grad {
            return Ok((value, None));
        }
        let mut grads = g.backward(out)?;
        let per_param = g
            .param_grads(&mut grads)
            .into_iter()
            .zip(xs)
            .map(|(grad, x)| grad.unwrap_or_else(|| vec![T::zero(); x.numel()]))
            .collect();
        Ok((value, Some(per_param)))
    };
    check_gradients(op_name, eval, &params.values(), opts)
}
