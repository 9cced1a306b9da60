use crate::error::{bail, Result};
use crate::numerics::{Scalar, Tape, Var};

/// Table row for every (query, key) pair along one axis: `clamp(δ) + M`.
pub fn delta_indices(q: &[i64], k: &[i64], max_delta: usize) -> Vec<usize> {
    let m = max_delta as i64;
    q.iter()
        .flat_map(|&a| k.iter().map(move |&b| ((a - b).clamp(-m, m) + m) as usize))
        .collect()
}

/// Decomposed relative position bias
/// `E[i, j] = q_i · Rt[δt(i, j)] + q_i · Rf[δf(i, j)]`.
///
/// `q` is `[Lq × d]`, both tables are `[(2M+1) × d]`, coordinates are
/// `(time, freq)` in a shared frame. Returns `[Lq × Lk]`.
pub fn relative_bias<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q: Var,
    table_time: Var,
    table_freq: Var,
    coords_q: &[(i64, i64)],
    coords_k: &[(i64, i64)],
    max_delta: usize,
) -> Result<Var> {
    let rows = 2 * max_delta + 1;
    for table in [table_time, table_freq] {
        if tape.shape(table) != [rows, tape.shape(q)[1]] {
            bail!(
                Shape,
                "position table {:?} does not match {rows} offsets of width {}",
                tape.shape(table),
                tape.shape(q)[1]
            );
        }
    }
    if tape.shape(q)[0] != coords_q.len() {
        bail!(State, "query coordinates do not match {} query rows", tape.shape(q)[0]);
    }
    let mut axis = |table: Var, pick: fn(&(i64, i64)) -> i64| -> Result<Var> {
        let qc: Vec<i64> = coords_q.iter().map(pick).collect();
        let kc: Vec<i64> = coords_k.iter().map(pick).collect();
        let rt = tape.transpose(table)?;
        let scores = tape.matmul(q, rt)?;
        tape.take_along_rows(scores, &delta_indices(&qc, &kc, max_delta), kc.len())
    };
    let et = axis(table_time, |c| c.0)?;
    let ef = axis(table_freq, |c| c.1)?;
    tape.add(et, ef)
}
