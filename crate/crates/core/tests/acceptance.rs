//! Acceptance criteria, one test each. Every test prints a single
//! `[PASS]`/`[FAIL]` line straight to stdout so the summary survives output
//! capture. Tests hold a shared lock so runtimes are measured without
//! contention from each other.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use mast::attention::{mhpa, pooled_len, relative_bias, BlockConfig, BlockParams, Layout, PoolSpec};
use mast::frontend::{gen_synthetic, patch_drop, patch_rows, Spectrogram, SynthSpec};
use mast::harness::{
    pretrain, probe_encoder, supervised_step, to_grids, train_classifier, MetricsLog, RunConfig, Schedule,
};
use mast::model::{shape_plan, Mast, ModelConfig};
use mast::numerics::{
    check_param_gradients, op_gradient_suite, AdamW, CheckOptions, Graph, ParamSet, Tape, Tensor, Tensor64,
    OP_TOL,
};
use mast::ssl::{info_nce, symmetric_loss, SslConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs one criterion under the lock, prints its verdict, then fails the
/// test if the verdict or the runtime budget is not met.
fn criterion(name: &str, budget: Duration, check: impl FnOnce() -> (bool, String)) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (ok, detail) = check();
    let elapsed = start.elapsed();
    let in_budget = elapsed <= budget;
    let verdict = if ok && in_budget { "PASS" } else { "FAIL" };
    writeln!(
        std::io::stdout().lock(),
        "[{verdict}] {name}: {detail} ({:.1}s of {:.0}s budget)",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    )
    .ok();
    assert!(ok, "{name}: {detail}");
    assert!(in_budget, "{name}: took {elapsed:?}, budget {budget:?}");
}

fn random_spectrogram(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Spectrogram {
    let frames = Tensor::from_fn(&[cfg.frames, cfg.mel_bins], |_| rng.random_range(-1.0..1.0));
    Spectrogram::new(frames, 0.01).unwrap()
}

#[test]
fn pyramid_shape_law() {
    criterion("pyramid shape law", Duration::from_secs(1), || {
        let expected = vec![(256, 32), (64, 64), (16, 128), (4, 256)];
        let cfg = ModelConfig::desk();
        let plan = shape_plan(&cfg).unwrap();

        let (model, ps) = Mast::init(&cfg, 0).unwrap();
        let grid = patch_rows(&random_spectrogram(&cfg, &mut ChaCha8Rng::seed_from_u64(1)), cfg.patch).unwrap();
        let mut g = Graph::new(&ps, false);
        let mut trace = Vec::new();
        let (y, _) = model.forward_features(&mut g, &grid, Some(&mut trace)).unwrap();
        let mut measured = Vec::new();
        for t in &trace {
            if measured.len() < t.stage {
                measured.push((t.tokens, t.dim_in));
            }
        }
        let output = (g.shape(y)[0], g.shape(y)[1]);
        let ok = plan.stage_shapes() == expected && measured == expected && output == (4, 256);
        (ok, format!("plan {:?}, forward {measured:?}, output {output:?}", plan.stage_shapes()))
    });
}

#[test]
fn pooled_length_formula() {
    criterion("pooled-length formula", Duration::from_secs(5), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut failures = Vec::new();
        for case in 0..1000 {
            let kernel = rng.random_range(1..=7usize);
            let padding = rng.random_range(0..kernel);
            let stride = rng.random_range(1..=4usize);
            let len = rng.random_range(kernel.saturating_sub(2 * padding).max(1)..=64);
            let expected = (len + 2 * padding - kernel) / stride + 1;
            let formula = pooled_len(len, kernel, stride, padding).unwrap();
            // A real strided convolution along time on a len × 1 grid.
            let spec = PoolSpec::new((kernel, 1), (stride, 1), (padding, 0)).unwrap();
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor64::from_fn(&[len, 2], |i| i as f64));
            let k = tape.constant(Tensor64::full(&[kernel, 1, 2], 1.0));
            let (y, layout) =
                mast::attention::pool_tokens(&mut tape, x, k, &spec, &Layout::full((len, 1))).unwrap();
            let conv = tape.shape(y)[0];
            if formula != expected || conv != expected || layout.grid.0 != expected {
                failures.push((case, len, kernel, stride, padding, formula, conv));
            }
        }
        (failures.is_empty(), format!("1000 cases, mismatches {failures:?}"))
    });
}

/// Dense multi-head attention written out with explicit loops in f64.
fn naive_attention(x: &Tensor, ps: &ParamSet<f32>, p: &BlockParams, heads: usize) -> Vec<f64> {
    let (n, dim) = (x.shape()[0], x.shape()[1]);
    let project = |(w, b): (mast::numerics::ParamId, mast::numerics::ParamId)| {
        let (w, b) = (ps.get(w).data(), ps.get(b).data());
        let mut out = vec![0.0f64; n * dim];
        for i in 0..n {
            for o in 0..dim {
                let mut acc = b[o] as f64;
                for c in 0..dim {
                    acc += x.data()[i * dim + c] as f64 * w[c * dim + o] as f64;
                }
                out[i * dim + o] = acc;
            }
        }
        out
    };
    let (q, k, v) = (project(p.wq), project(p.wk), project(p.wv));
    let d = dim / heads;
    let mut z = vec![0.0f64; n * dim];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|c| q[i * dim + h * d + c] * k[j * dim + h * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exp.iter().sum();
            for c in 0..d {
                z[i * dim + h * d + c] = (0..n).map(|j| exp[j] / total * v[j * dim + h * d + c]).sum();
            }
        }
    }
    let (wo, bo) = (ps.get(p.wo.0).data(), ps.get(p.wo.1).data());
    let mut out = vec![0.0f64; n * dim];
    for i in 0..n {
        for o in 0..dim {
            out[i * dim + o] = bo[o] as f64 + (0..dim).map(|c| z[i * dim + c] * wo[c * dim + o] as f64).sum::<f64>();
        }
    }
    out
}

#[test]
fn mha_equivalence() {
    criterion("MHA equivalence", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut worst = 0.0f64;
        for case in 0..20 {
            let heads = rng.random_range(1..=3usize);
            let dim = heads * rng.random_range(1..=4usize) * 2;
            let grid = (rng.random_range(1..=4usize), rng.random_range(1..=4usize));
            let cfg = BlockConfig {
                dim,
                dim_out: dim,
                heads,
                mlp_ratio: 4,
                pool_q: PoolSpec::identity(),
                pool_kv: PoolSpec::identity(),
                rpe_max_delta: Some(3),
                residual_pooling: false,
                ln_eps: 1e-5,
            };
            let mut ps = ParamSet::new();
            let p = BlockParams::init(&mut ps, "b", &cfg, &mut rng).unwrap();
            for (name, t) in ps.iter_mut() {
                if name.contains("rpe") {
                    t.data_mut().fill(0.0);
                } else if !name.contains("pool") {
                    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
                }
            }
            let n = grid.0 * grid.1;
            let x = Tensor::from_fn(&[n, dim], |_| rng.random_range(-1.0..1.0));
            let mut g = Graph::new(&ps, false);
            let xv = g.constant(x.clone());
            let out = mhpa(&mut g, &p, &cfg, xv, &Layout::full(grid)).unwrap();
            let oracle = naive_attention(&x, &ps, &p, heads);
            let err = g
                .value(out.tokens)
                .data()
                .iter()
                .zip(&oracle)
                .map(|(&a, &b)| (a as f64 - b).abs())
                .fold(0.0, f64::max);
            assert!(g.shape(out.tokens) == [n, dim], "case {case}");
            worst = worst.max(err);
        }
        (worst <= 1e-5, format!("20 cases, max abs error {worst:.2e} (tol 1e-5)"))
    });
}

#[test]
fn gradient_suite() {
    criterion("gradient suite", Duration::from_secs(120), || {
        let reports = op_gradient_suite(5, 11).unwrap();
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.op_name.clone()).collect();
        let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);

        let cfg = ModelConfig::micro();
        let (model, ps) = Mast::init(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps64 = ps.cast::<f64>();
        for (_, t) in ps64.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
        let x = patch_rows(&random_spectrogram(&cfg, &mut rng), cfg.patch).unwrap();
        let e2e = check_param_gradients(
            "micro model",
            &ps64,
            |g| {
                let l = model.logits(g, &x)?;
                g.cross_entropy(l, &[1])
            },
            &CheckOptions::new(1e-3, 1e-5),
        )
        .unwrap();
        let ok = failed.is_empty() && e2e.passed;
        (
            ok,
            format!(
                "{} op checks, worst rel err {worst:.2e} (tol {OP_TOL:.0e}), failed {failed:?}; \
                 end-to-end rel err {:.2e} (tol 1e-3)",
                reports.len(),
                e2e.max_rel_err
            ),
        )
    });
}

#[test]
fn info_nce_closed_form() {
    criterion("InfoNCE closed form", Duration::from_secs(10), || {
        let mut worst = 0.0f64;
        for k in 1..=63usize {
            let n = k + 1;
            let mut tape = Tape::<f32>::new();
            // Row i is e_{2i}, column j of the other view is e_{2j+1}: all similarities are 0.
            let za = tape.constant(Tensor::from_fn(&[n, 2 * n], |i| ((i % (2 * n)) == 2 * (i / (2 * n))) as u8 as f32));
            let zo = tape.constant(Tensor::from_fn(&[n, 2 * n], |i| ((i % (2 * n)) == 2 * (i / (2 * n)) + 1) as u8 as f32));
            let loss = info_nce(&mut tape, za, zo, 0.07).unwrap();
            let err = (tape.value(loss).data()[0] as f64 - ((1 + k) as f64).ln()).abs();
            worst = worst.max(err);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut swap_exact = true;
        for _ in 0..20 {
            let n = rng.random_range(2..=16usize);
            let mut tape = Tape::<f32>::new();
            let f = tape.constant(Tensor::from_fn(&[n, 8], |_| rng.random_range(-1.0..1.0)));
            let h = tape.constant(Tensor::from_fn(&[n, 8], |_| rng.random_range(-1.0..1.0)));
            let a = symmetric_loss(&mut tape, f, h, 0.07).unwrap();
            let b = symmetric_loss(&mut tape, h, f, 0.07).unwrap();
            swap_exact &= tape.value(a).data()[0].to_bits() == tape.value(b).data()[0].to_bits();
        }
        (
            worst <= 1e-6 && swap_exact,
            format!("K=1..63 max |loss - ln(1+K)| {worst:.2e} (tol 1e-6), swap exact: {swap_exact}"),
        )
    });
}

#[test]
fn rpe_translation_invariance() {
    criterion("RPE translation invariance", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut exact = true;
        for _ in 0..50 {
            let (d, m) = (rng.random_range(1..=6usize), rng.random_range(1..=8usize));
            let nq = rng.random_range(1..=10usize);
            let nk = rng.random_range(1..=10usize);
            let mut tape = Tape::<f32>::new();
            let q = tape.constant(Tensor::from_fn(&[nq, d], |_| rng.random_range(-1.0..1.0)));
            let rt = tape.constant(Tensor::from_fn(&[2 * m + 1, d], |_| rng.random_range(-1.0..1.0)));
            let rf = tape.constant(Tensor::from_fn(&[2 * m + 1, d], |_| rng.random_range(-1.0..1.0)));
            let mut coords = |n: usize| -> Vec<(i64, i64)> {
                (0..n).map(|_| (rng.random_range(-12..12), rng.random_range(-12..12))).collect()
            };
            let (cq, ck) = (coords(nq), coords(nk));
            let shift = (rng.random_range(-100..100), rng.random_range(-100..100));
            let moved = |c: &[(i64, i64)]| c.iter().map(|&(t, f)| (t + shift.0, f + shift.1)).collect::<Vec<_>>();
            let e0 = relative_bias(&mut tape, q, rt, rf, &cq, &ck, m).unwrap();
            let e1 = relative_bias(&mut tape, q, rt, rf, &moved(&cq), &moved(&ck), m).unwrap();
            exact &= tape.value(e0) == tape.value(e1);
        }
        (exact, format!("50 random translations, bitwise equal: {exact}"))
    });
}

#[test]
fn patch_drop_count() {
    criterion("patch-drop", Duration::from_secs(5), || {
        let frames = Tensor::from_fn(&[40, 40], |i| i as f32);
        let grid = patch_rows(&Spectrogram::new(frames, 0.01).unwrap(), (4, 4)).unwrap();
        let a = patch_drop(&grid, 0.2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = patch_drop(&grid, 0.2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ok = grid.len() == 100 && a.len() == 80 && a == b;
        (ok, format!("N={}, kept {}, same seed identical: {}", grid.len(), a.len(), a == b))
    });
}

#[test]
fn overfit_smoke() {
    criterion("overfit smoke", Duration::from_secs(300), || {
        let cfg = ModelConfig::desk();
        let data = gen_synthetic(&SynthSpec { count: 8, ..SynthSpec::default() }).unwrap();
        let grids = to_grids(&data, cfg.patch).unwrap();
        let batch: Vec<_> = grids.iter().map(|(g, y)| (g, *y)).collect();
        let (model, mut params) = Mast::init(&cfg, 0).unwrap();
        let mut opt = AdamW::new(&params, 0.9, 0.999, 1e-4);
        let mut reached = None;
        let mut last = f32::NAN;
        for step in 1..=500 {
            last = supervised_step(&model, &mut params, &mut opt, &batch, 3e-4).unwrap().loss;
            if last < 0.01 {
                reached = Some(step);
                break;
            }
        }
        (
            reached.is_some(),
            format!("loss {last:.4} after {} steps (target < 0.01 within 500)", reached.unwrap_or(500)),
        )
    });
}

/// The synthetic task as generated by `gen-synth --n 1000 --test-n 200 --seed 0`.
fn synthetic_split(cfg: &ModelConfig) -> (Vec<(mast::frontend::PatchGrid, usize)>, Vec<(mast::frontend::PatchGrid, usize)>) {
    let data = gen_synthetic(&SynthSpec { count: 1200, seed: 0, ..SynthSpec::default() }).unwrap();
    let grids = to_grids(&data, cfg.patch).unwrap();
    let test = grids[1000..].to_vec();
    let mut train = grids;
    train.truncate(1000);
    (train, test)
}

/// Supervised settings used by the synthetic-task criterion.
fn synthetic_run_config() -> RunConfig {
    let mut run = RunConfig::default();
    run.optim.epochs = 30;
    run.optim.schedule = Schedule::Cosine;
    run.metrics.wall_ms = false;
    run
}

#[test]
fn synthetic_task_accuracy() {
    criterion("synthetic task", Duration::from_secs(30 * 60), || {
        let run = synthetic_run_config();
        let (train, test) = synthetic_split(&run.model);
        let (model, mut params) = Mast::init(&run.model, run.optim.seed).unwrap();
        let mut log = MetricsLog::new(false);
        let summary = train_classifier(&run, &model, &mut params, &train, Some(&test), &mut log).unwrap();
        let acc = summary.test.unwrap().accuracy;
        (acc >= 0.9, format!("test accuracy {:.3} after {} steps (target >= 0.900)", acc, summary.steps))
    });
}

/// Pretraining settings used by the directionality criterion.
fn ssl_run_config(seed: u64, patch_drop: f64) -> RunConfig {
    let mut run = RunConfig::default();
    run.optim.seed = seed;
    run.optim.epochs = 4;
    run.ssl = SslConfig { patch_drop, ..SslConfig::default() };
    run.metrics.wall_ms = false;
    run
}

#[test]
fn ssl_directionality() {
    criterion("SSL directionality", Duration::from_secs(60 * 60), || {
        let base = ssl_run_config(0, 0.2);
        let (train, test) = synthetic_split(&base.model);
        let unlabeled: Vec<Spectrogram> =
            gen_synthetic(&SynthSpec { count: 1000, seed: 0, ..SynthSpec::default() })
                .unwrap()
                .into_iter()
                .map(|(s, _)| s)
                .collect();
        let views: Vec<&Spectrogram> = unlabeled.iter().collect();
        let mut scores = Vec::new();
        for seed in 0..3 {
            let (model, random) = Mast::init(&base.model, seed).unwrap();
            let random_acc = probe_encoder(&base, &model, &random, &train, &test).unwrap();
            let mut pretrained_acc = [0.0f32; 2];
            for (slot, j) in [0.2, 0.0].into_iter().enumerate() {
                let run = ssl_run_config(seed, j);
                let out = pretrain(&run, &views, &mut MetricsLog::new(false)).unwrap();
                let mut encoder = random.clone();
                for (name, t) in encoder.iter_mut() {
                    if let Some(id) = out.student.find(name) {
                        t.data_mut().copy_from_slice(out.student.get(id).data());
                    }
                }
                pretrained_acc[slot] = probe_encoder(&run, &model, &encoder, &train, &test).unwrap();
            }
            scores.push((random_acc, pretrained_acc[0], pretrained_acc[1]));
        }
        let mean = |f: fn(&(f32, f32, f32)) -> f32| scores.iter().map(f).sum::<f32>() / scores.len() as f32;
        let (random, with_drop, without_drop) = (mean(|s| s.0), mean(|s| s.1), mean(|s| s.2));
        let gain = with_drop - random;
        let drop_cost = without_drop - with_drop;
        (
            gain >= 0.05 && drop_cost <= 0.01,
            format!(
                "per seed (random, pretrained, pretrained without patch-drop) {scores:?}; \
                 gain {:+.1} points (need >= 5), patch-drop cost {:+.1} points (need <= 1)",
                100.0 * gain,
                100.0 * drop_cost
            ),
        )
    });
}
