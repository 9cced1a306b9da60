use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{EncoderSource, OptimConfig, ProbeConfig, RunConfig, Schedule};
use super::data::{load_manifest, Labeled};
use super::metrics::MetricsLog;
use crate::error::{bail, Error, Result};
use crate::frontend::{patch_rows, PatchGrid, Spectrogram};
use crate::model::{load_checkpoint, prefixed, save_checkpoint, Entries, Mast};
use crate::numerics::{cosine_lr, AdamW, Graph, ParamSet, Tape, Tensor};
use crate::ssl::{sum_gradients, Pretrainer, SslModel, TeacherState};

/// Independent seeds for init, shuffling and augmentation, all from one root.
pub fn derive_seed(root: u64, purpose: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = root ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;

fn lr_at(o: &OptimConfig, step: usize, total: usize) -> f32 {
    match o.schedule {
        Schedule::Cosine => cosine_lr(o.lr, step, total) as f32,
        Schedule::Constant => o.lr as f32,
    }
}

fn optimizer(o: &OptimConfig, params: &ParamSet<f32>) -> AdamW {
    AdamW::new(params, o.beta1 as f32, o.beta2 as f32, o.weight_decay as f32)
}

/// Per-epoch batches of sample indices: shuffled, then sorted within a batch.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

pub fn to_grids(data: &[Labeled], patch: (usize, usize)) -> Result<Vec<(PatchGrid, usize)>> {
    data.par_iter().map(|(s, y)| Ok((patch_rows(s, patch)?, *y))).collect()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and share of correct predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f32,
    pub accuracy: f32,
}

/// One optimizer step on the mean cross-entropy of `batch`.
pub fn supervised_step(
    model: &Mast,
    params: &mut ParamSet<f32>,
    opt: &mut AdamW,
    batch: &[(&PatchGrid, usize)],
    lr: f32,
) -> Result<Evaluation> {
    if batch.is_empty() {
        bail!(Argument, "empty batch");
    }
    let scale = 1.0 / batch.len() as f64;
    let ps = &*params;
    let per_sample = batch
        .par_iter()
        .map(|&(grid, label)| {
            let mut g = Graph::new(ps, true);
            let logits = model.logits(&mut g, grid)?;
            let correct = argmax(g.value(logits).data()) == label;
            let loss = g.cross_entropy(logits, &[label])?;
            let value = g.value(loss).data()[0];
            let scaled = g.scale(loss, scale)?;
            let mut grads = g.backward(scaled)?;
            Ok((value, correct, g.param_grads(&mut grads)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0f64;
    let mut correct = 0;
    let mut grads = Vec::with_capacity(per_sample.len());
    for (l, c, g) in per_sample {
        loss += l as f64;
        correct += c as usize;
        grads.push(g);
    }
    let loss = (loss * scale) as f32;
    if !loss.is_finite() {
        bail!(Numeric, "training loss is not finite");
    }
    opt.step(params, &sum_gradients(grads), lr)?;
    Ok(Evaluation {
        loss,
        accuracy: correct as f32 / batch.len() as f32,
    })
}

pub fn evaluate(model: &Mast, params: &ParamSet<f32>, data: &[(PatchGrid, usize)]) -> Result<Evaluation> {
    if data.is_empty() {
        bail!(Data, "nothing to evaluate");
    }
    let results = data
        .par_iter()
        .map(|(grid, label)| {
            let mut g = Graph::new(params, false);
            let logits = model.logits(&mut g, grid)?;
            let correct = argmax(g.value(logits).data()) == *label;
            let loss = g.cross_entropy(logits, &[*label])?;
            Ok((g.value(loss).data()[0] as f64, correct))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    Ok(Evaluation {
        loss: (results.iter().map(|r| r.0).sum::<f64>() / n) as f32,
        accuracy: (results.iter().filter(|r| r.1).count() as f64 / n) as f32,
    })
}

/// Outcome of [`train_classifier`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_train_loss: f32,
    pub test: Option<Evaluation>,
}

/// Mini-batch training of every parameter, with a test row after each epoch.
pub fn train_classifier(
    cfg: &RunConfig,
    model: &Mast,
    params: &mut ParamSet<f32>,
    train: &[(PatchGrid, usize)],
    test: Option<&[(PatchGrid, usize)]>,
    log: &mut MetricsLog,
) -> Result<TrainSummary> {
    let o = &cfg.optim;
    let batch = o.batch_size.min(train.len());
    let per_epoch = train.len().div_ceil(batch);
    let total = per_epoch * o.epochs;
    let mut opt = optimizer(o, params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(o.seed, SHUFFLE));
    let mut step = 0;
    let mut last = f32::NAN;
    let mut test_eval = None;
    for _ in 0..o.epochs {
        for idx in epoch_batches(train.len(), batch, &mut rng) {
            let items: Vec<(&PatchGrid, usize)> = idx.iter().map(|&i| (&train[i].0, train[i].1)).collect();
            let e = supervised_step(model, params, &mut opt, &items, lr_at(o, step, total))?;
            step += 1;
            last = e.loss;
            if step == 1 || step % cfg.metrics.every == 0 || step == total {
                log.push(step, "train", e.loss, Some(e.accuracy))?;
            }
        }
        if let Some(test) = test {
            let e = evaluate(model, params, test)?;
            log.push(step, "test", e.loss, Some(e.accuracy))?;
            test_eval = Some(e);
        }
    }
    Ok(TrainSummary {
        steps: step,
        final_train_loss: last,
        test: test_eval,
    })
}

fn require<'a>(path: &'a Option<std::path::PathBuf>, key: &str) -> Result<&'a Path> {
    match path {
        Some(p) => Ok(p),
        None => bail!(Config, "{key} is not set"),
    }
}

/// Fails early when an input file is missing.
fn check_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    Ok(())
}

fn load_split(cfg: &RunConfig, manifest: &Path) -> Result<Vec<Labeled>> {
    load_manifest(manifest, cfg.paths.features_dir.as_deref(), &cfg.model)
}

/// Whether a checkpoint came from pretraining.
fn is_pretrain_checkpoint(entries: &Entries) -> bool {
    entries.iter().any(|(n, _)| n.starts_with("student/"))
}

/// Loads encoder weights into `params`. A pretraining checkpoint supplies
/// everything except the classification head, which keeps its fresh init;
/// a classifier checkpoint must supply every tensor.
pub fn restore_model(params: &mut ParamSet<f32>, entries: &Entries, source: EncoderSource) -> Result<()> {
    let pretrained = is_pretrain_checkpoint(entries);
    let prefix = if pretrained { source.prefix() } else { "" };
    for (name, t) in params.iter_mut() {
        if pretrained && name.starts_with("head.") {
            continue;
        }
        let key = format!("{prefix}{name}");
        let Some((_, src)) = entries.iter().find(|(n, _)| *n == key) else {
            bail!(State, "checkpoint has no entry {key}");
        };
        if src.shape() != t.shape() {
            bail!(State, "checkpoint entry {key} has shape {:?}, model expects {:?}", src.shape(), t.shape());
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

/// Supervised training from a config: loads data, trains, writes metrics
/// and the final checkpoint.
pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_path = require(&cfg.paths.train_manifest, "paths.train_manifest")?;
    check_exists(train_path)?;
    if let Some(p) = &cfg.paths.test_manifest {
        check_exists(p)?;
    }
    if let Some(p) = &cfg.paths.checkpoint_in {
        check_exists(p)?;
    }
    let (model, mut params) = Mast::init(&cfg.model, cfg.optim.seed)?;
    if let Some(p) = &cfg.paths.checkpoint_in {
        restore_model(&mut params, &load_checkpoint(p)?, cfg.probe.encoder)?;
    }
    let train = to_grids(&load_split(cfg, train_path)?, cfg.model.patch)?;
    let test = match &cfg.paths.test_manifest {
        Some(p) => Some(to_grids(&load_split(cfg, p)?, cfg.model.patch)?),
        None => None,
    };
    let mut log = MetricsLog::new(cfg.metrics.wall_ms);
    let summary = train_classifier(cfg, &model, &mut params, &train, test.as_deref(), &mut log)?;
    if let Some(p) = &cfg.paths.metrics_out {
        log.write_csv(p)?;
    }
    if let Some(p) = &cfg.paths.checkpoint_out {
        save_checkpoint(p, params.iter())?;
    }
    Ok(summary)
}

/// Loads a classifier checkpoint and scores the test split (or the train
/// split when no test manifest is set).
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<Evaluation> {
    cfg.model.validate()?;
    let manifest = match (&cfg.paths.test_manifest, &cfg.paths.train_manifest) {
        (Some(p), _) | (None, Some(p)) => p,
        (None, None) => bail!(Config, "paths.test_manifest is not set"),
    };
    check_exists(manifest)?;
    check_exists(checkpoint)?;
    let (model, mut params) = Mast::init(&cfg.model, cfg.optim.seed)?;
    let entries = load_checkpoint(checkpoint)?;
    if is_pretrain_checkpoint(&entries) {
        bail!(State, "{} is a pretraining checkpoint without a trained head", checkpoint.display());
    }
    restore_model(&mut params, &entries, cfg.probe.encoder)?;
    evaluate(&model, &params, &to_grids(&load_split(cfg, manifest)?, cfg.model.patch)?)
}

/// Student and teacher after pretraining.
#[derive(Debug)]
pub struct Pretrained {
    pub model: SslModel,
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
    pub losses: Vec<f32>,
}

/// Contrastive pretraining on unlabeled spectrograms. Batches smaller than
/// two samples are skipped since they have no negatives.
pub fn pretrain(cfg: &RunConfig, data: &[&Spectrogram], log: &mut MetricsLog) -> Result<Pretrained> {
    let o = &cfg.optim;
    if o.batch_size < 2 || data.len() < 2 {
        bail!(Config, "pretraining needs batch_size >= 2 and at least two samples");
    }
    let (model, mut student) = SslModel::init(&cfg.model, o.seed)?;
    let mut teacher = TeacherState::new(&student, cfg.ssl.momentum);
    let mut opt = optimizer(o, &student);
    let batch = o.batch_size.min(data.len());
    let batches_per_epoch = epoch_batches(data.len(), batch, &mut ChaCha8Rng::seed_from_u64(0))
        .iter()
        .filter(|b| b.len() >= 2)
        .count();
    let total = batches_per_epoch * o.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(o.seed, SHUFFLE));
    let augment_root = derive_seed(o.seed, AUGMENT);
    let mut losses = Vec::with_capacity(total);
    for _ in 0..o.epochs {
        for idx in epoch_batches(data.len(), batch, &mut rng) {
            if idx.len() < 2 {
                continue;
            }
            let items: Vec<&Spectrogram> = idx.iter().map(|&i| data[i]).collect();
            let step = losses.len();
            let mut trainer = Pretrainer {
                model: &model,
                student: &mut student,
                teacher: &mut teacher,
                optimizer: &mut opt,
                cfg: &cfg.ssl,
            };
            let loss = trainer.step(&items, lr_at(o, step, total), derive_seed(augment_root, step as u64))?;
            losses.push(loss);
            let s = step + 1;
            if s == 1 || s % cfg.metrics.every == 0 || s == total {
                log.push(s, "pretrain", loss, None)?;
            }
        }
    }
    Ok(Pretrained {
        model,
        student,
        teacher: teacher.params,
        losses,
    })
}

/// Pretraining from a config; saves `student/` and `teacher/` tensors.
pub fn run_pretrain(cfg: &RunConfig) -> Result<Pretrained> {
    cfg.validate()?;
    let manifest = require(&cfg.paths.train_manifest, "paths.train_manifest")?;
    check_exists(manifest)?;
    let data = load_split(cfg, manifest)?;
    let specs: Vec<&Spectrogram> = data.iter().map(|(s, _)| s).collect();
    let mut log = MetricsLog::new(cfg.metrics.wall_ms);
    let out = pretrain(cfg, &specs, &mut log)?;
    if let Some(p) = &cfg.paths.metrics_out {
        log.write_csv(p)?;
    }
    if let Some(p) = &cfg.paths.checkpoint_out {
        let student: Vec<(String, &Tensor)> = prefixed("student/", &out.student).collect();
        let teacher: Vec<(String, &Tensor)> = prefixed("teacher/", &out.teacher).collect();
        save_checkpoint(
            p,
            student.iter().chain(&teacher).map(|(n, t)| (n.as_str(), *t)),
        )?;
    }
    Ok(out)
}

/// Mean-pooled final-stage features of every input, `[N × D]` row-major.
pub fn encode_all(model: &Mast, params: &ParamSet<f32>, data: &[(PatchGrid, usize)]) -> Result<Vec<Vec<f32>>> {
    data.par_iter()
        .map(|(grid, _)| {
            let mut g = Graph::new(params, false);
            let (x, _) = model.forward_features(&mut g, grid, None)?;
            let pooled = model.pool(&mut g, x)?;
            Ok(g.value(pooled).data().to_vec())
        })
        .collect()
}

/// Trains a softmax classifier on standardised features and returns test
/// accuracy. Standardisation statistics come from the training features.
pub fn linear_probe(
    cfg: &ProbeConfig,
    classes: usize,
    train: (&[Vec<f32>], &[usize]),
    test: (&[Vec<f32>], &[usize]),
) -> Result<f32> {
    let (xs, ys) = train;
    let Some(d) = xs.first().map(Vec::len) else {
        bail!(Data, "probe needs training features");
    };
    let n = xs.len() as f64;
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for x in xs {
        for (m, &v) in mean.iter_mut().zip(x) {
            *m += v as f64 / n;
        }
    }
    for x in xs {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(x) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    let standardise = |rows: &[Vec<f32>]| -> Result<Tensor> {
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                bail!(Shape, "feature width {} differs from {d}", r.len());
            }
            for ((&v, &m), &s) in r.iter().zip(&mean).zip(&var) {
                out.push(((v as f64 - m) / (s.sqrt() + 1e-6)) as f32);
            }
        }
        Tensor::from_vec(&[rows.len(), d], out)
    };
    let x_train = standardise(xs)?;
    let x_test = standardise(test.0)?;

    let mut ps = ParamSet::new();
    let w = ps.insert("probe.weight", Tensor::zeros(&[d, classes]));
    let b = ps.insert("probe.bias", Tensor::zeros(&[classes]));
    let mut opt = AdamW::new(&ps, 0.9, 0.999, cfg.weight_decay as f32);
    for _ in 0..cfg.epochs {
        let grads = {
            let mut g = Graph::new(&ps, true);
            let x = g.constant(x_train.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let h = g.matmul(x, wv)?;
            let logits = g.add_row(h, bv)?;
            let loss = g.cross_entropy(logits, ys)?;
            let mut grads = g.backward(loss)?;
            g.param_grads(&mut grads)
        };
        opt.step(&mut ps, &grads, cfg.lr as f32)?;
    }
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(x_test);
    let wv = tape.constant(ps.get(w).clone());
    let bv = tape.constant(ps.get(b).clone());
    let h = tape.matmul(x, wv)?;
    let logits = tape.add_row(h, bv)?;
    let scores = tape.value(logits);
    let correct = test.1.iter().enumerate().filter(|&(i, &y)| argmax(scores.row(i)) == y).count();
    Ok(correct as f32 / test.1.len().max(1) as f32)
}

/// Linear-probe accuracy of a frozen encoder on labeled splits.
pub fn probe_encoder(
    cfg: &RunConfig,
    model: &Mast,
    params: &ParamSet<f32>,
    train: &[(PatchGrid, usize)],
    test: &[(PatchGrid, usize)],
) -> Result<f32> {
    let before = params.values();
    let f_train = encode_all(model, params, train)?;
    let f_test = encode_all(model, params, test)?;
    let y_train: Vec<usize> = train.iter().map(|s| s.1).collect();
    let y_test: Vec<usize> = test.iter().map(|s| s.1).collect();
    let acc = linear_probe(
        &cfg.probe,
        cfg.model.num_classes,
        (&f_train, &y_train),
        (&f_test, &y_test),
    )?;
    if params.values() != before {
        bail!(State, "encoder weights changed during probing");
    }
    Ok(acc)
}

/// Probe from a config. Without a checkpoint the encoder keeps its random
/// init from `optim.seed`.
pub fn run_probe(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<f32> {
    cfg.validate()?;
    let train_path = require(&cfg.paths.train_manifest, "paths.train_manifest")?;
    let test_path = require(&cfg.paths.test_manifest, "paths.test_manifest")?;
    for p in [train_path, test_path].into_iter().chain(checkpoint) {
        check_exists(p)?;
    }
    let (model, mut params) = Mast::init(&cfg.model, cfg.optim.seed)?;
    if let Some(p) = checkpoint {
        restore_model(&mut params, &load_checkpoint(p)?, cfg.probe.encoder)?;
    }
    let train = to_grids(&load_split(cfg, train_path)?, cfg.model.patch)?;
    let test = to_grids(&load_split(cfg, test_path)?, cfg.model.patch)?;
    probe_encoder(cfg, &model, &params, &train, &test)
}
