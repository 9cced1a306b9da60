//! Contrastive pretraining with a momentum teacher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{bail, Result};
use crate::frontend::{mixup, patch_drop, patch_rows, random_resized_crop, PatchGrid, Spectrogram};
use crate::model::{Mast, ModelConfig};
use crate::numerics::{
    truncated_normal, AdamW, Graph, ParamId, ParamSet, Scalar, Tape, Tensor, Var,
};

/// Width of the contrastive embedding.
pub const PROJECTION_DIM: usize = 256;
const NORM_EPS: f64 = 1e-12;

/// Encoder plus the linear projection into the contrastive space.
#[derive(Clone, Debug)]
pub struct SslModel {
    pub encoder: Mast,
    pub proj: (ParamId, ParamId),
}

impl SslModel {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamSet<f32>)> {
        let (encoder, mut ps) = Mast::init(cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9e0);
        let d = cfg.final_dim();
        let proj = (
            ps.insert("proj.weight", truncated_normal(&[d, PROJECTION_DIM], 0.02, &mut rng)),
            ps.insert("proj.bias", Tensor::zeros(&[PROJECTION_DIM])),
        );
        Ok((Self { encoder, proj }, ps))
    }

    /// Unit-norm embedding `[1 × 256]` of one input.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, grid: &PatchGrid) -> Result<Var> {
        let (features, _) = self.encoder.forward_features(g, grid, None)?;
        let pooled = self.encoder.pool(g, features)?;
        let z = crate::attention::linear(g, pooled, self.proj)?;
        g.l2_normalize(z, NORM_EPS)
    }
}

/// Mean over anchors of `−log softmax(za·zoᵀ / τ)` at the aligned column.
/// Negatives for anchor `i` are the other rows of `zo`.
pub fn info_nce<T: Scalar>(tape: &mut Tape<'_, T>, za: Var, zo: Var, tau: f64) -> Result<Var> {
    let n = tape.shape(za)[0];
    if tape.shape(za) != tape.shape(zo) {
        bail!(Shape, "embeddings {:?} and {:?} differ", tape.shape(za), tape.shape(zo));
    }
    if n < 2 {
        bail!(Argument, "contrastive loss needs at least two rows, got {n}");
    }
    if !(tau > 0.0) {
        bail!(Argument, "temperature must be positive, got {tau}");
    }
    let zo_t = tape.transpose(zo)?;
    let sims = tape.matmul(za, zo_t)?;
    let logits = tape.div_scalar(sims, tau)?;
    info_nce_logits(tape, logits)
}

/// Cross-entropy of every row of a square logit matrix against its diagonal.
pub fn info_nce_logits<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var) -> Result<Var> {
    let n = tape.shape(logits)[0];
    if tape.shape(logits) != [n, n] {
        bail!(Shape, "logits must be square, got {:?}", tape.shape(logits));
    }
    let labels: Vec<usize> = (0..n).collect();
    tape.cross_entropy(logits, &labels)
}

/// `info_nce(f, h) + info_nce(h, f)`.
pub fn symmetric_loss<T: Scalar>(tape: &mut Tape<'_, T>, f: Var, h: Var, tau: f64) -> Result<Var> {
    let a = info_nce(tape, f, h, tau)?;
    let b = info_nce(tape, h, f, tau)?;
    tape.add(a, b)
}

/// `θt ← m·θt + (1 − m)·θs` for every tensor.
pub fn ema_update(teacher: &mut ParamSet<f32>, student: &ParamSet<f32>, m: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        bail!(Argument, "momentum {m} outside [0, 1]");
    }
    teacher.check_same_layout(student)?;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// Pretraining hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SslConfig {
    pub tau: f64,
    pub momentum: f32,
    pub patch_drop: f64,
    /// Largest share of the mixup partner; `λ = 1 − u·mixup_max`, `u ~ U(0, 1)`.
    pub mixup_max: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            momentum: 0.99,
            patch_drop: 0.2,
            mixup_max: 1.0,
        }
    }
}

/// Momentum copy of the student; only [`ema_update`] writes to it.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub params: ParamSet<f32>,
    pub momentum: f32,
}

impl TeacherState {
    pub fn new(student: &ParamSet<f32>, momentum: f32) -> Self {
        Self {
            params: student.clone(),
            momentum,
        }
    }

    pub fn update(&mut self, student: &ParamSet<f32>) -> Result<()> {
        ema_update(&mut self.params, student, self.momentum)
    }
}

/// RRC, then mixup with `partner`, then patchify and patch-drop.
pub fn augment_view<R: Rng + ?Sized>(
    s: &Spectrogram,
    partner: &Spectrogram,
    patch: (usize, usize),
    cfg: &SslConfig,
    rng: &mut R,
) -> Result<PatchGrid> {
    let cropped = random_resized_crop(s, rng)?;
    let lambda = 1.0 - rng.random::<f64>() * cfg.mixup_max;
    let mixed = mixup(&cropped, partner, lambda)?;
    let grid = patch_rows(&mixed, patch)?;
    if cfg.patch_drop > 0.0 {
        patch_drop(&grid, cfg.patch_drop, rng)
    } else {
        Ok(grid)
    }
}

/// Everything one pretraining step touches.
pub struct Pretrainer<'a> {
    pub model: &'a SslModel,
    pub student: &'a mut ParamSet<f32>,
    pub teacher: &'a mut TeacherState,
    pub optimizer: &'a mut AdamW,
    pub cfg: &'a SslConfig,
}

impl Pretrainer<'_> {
    /// One step on `batch`: the student embeds view a, the teacher view b,
    /// the symmetric loss updates the student, then the teacher follows by EMA.
    /// `seed` fixes every augmentation draw of the step.
    pub fn step(&mut self, batch: &[&Spectrogram], lr: f32, seed: u64) -> Result<f32> {
        let n = batch.len();
        if n < 2 {
            bail!(Argument, "pretraining batch needs at least two samples, got {n}");
        }
        let patch = self.model.encoder.config().patch;
        let views = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let mut partner = || {
                    let j = rng.random_range(0..n - 1);
                    if j >= i { j + 1 } else { j }
                };
                let (pa, pb) = (partner(), partner());
                let a = augment_view(batch[i], batch[pa], patch, self.cfg, &mut rng)?;
                let b = augment_view(batch[i], batch[pb], patch, self.cfg, &mut rng)?;
                Ok((a, b))
            })
            .collect::<Result<Vec<_>>>()?;

        let model = self.model;
        let (student, teacher) = (&*self.student, &self.teacher.params);
        let embed = |ps: &ParamSet<f32>, grid: &PatchGrid| -> Result<Vec<f32>> {
            let mut g = Graph::new(ps, false);
            let z = model.embed(&mut g, grid)?;
            Ok(g.value(z).data().to_vec())
        };
        let zs = views.par_iter().map(|(a, _)| embed(student, a)).collect::<Result<Vec<_>>>()?;
        let zt = views.par_iter().map(|(_, b)| embed(teacher, b)).collect::<Result<Vec<_>>>()?;

        let stack = |rows: Vec<Vec<f32>>| Tensor::from_vec(&[n, PROJECTION_DIM], rows.concat());
        let mut tape = Tape::<f32>::new();
        let za = tape.input(stack(zs)?, true);
        let zo = tape.constant(stack(zt)?);
        let loss = symmetric_loss(&mut tape, za, zo, self.cfg.tau)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            bail!(Numeric, "contrastive loss is not finite");
        }
        let mut grads = tape.backward(loss)?;
        let dz = grads.take(za).expect("student embeddings are tracked");

        // Second student pass with a tape, seeded by the embedding gradient.
        let per_sample = views
            .par_iter()
            .enumerate()
            .map(|(i, (a, _))| {
                let mut g = Graph::new(student, true);
                let z = model.embed(&mut g, a)?;
                let mut grads = g.backward_from(z, &dz[i * PROJECTION_DIM..(i + 1) * PROJECTION_DIM])?;
                Ok(g.param_grads(&mut grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let total = sum_gradients(per_sample);
        self.optimizer.step(self.student, &total, lr)?;
        self.teacher.update(self.student)?;
        Ok(loss_value)
    }
}

/// Elementwise sum of per-sample gradients in sample order.
pub fn sum_gradients(per_sample: Vec<Vec<Option<Vec<f32>>>>) -> Vec<Option<Vec<f32>>> {
    let mut iter = per_sample.into_iter();
    let Some(mut total) = iter.next() else {
        return Vec::new();
    };
    for sample in iter {
        for (acc, g) in total.iter_mut().zip(sample) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{gen_synthetic, SynthSpec};
    use crate::numerics::{finite_diff_check, Tensor64};

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Tensor64::from_vec(&[n, d], data).unwrap()
    }

    fn direct_info_nce(a: &Tensor64, o: &Tensor64, tau: f64) -> f64 {
        let n = a.shape()[0];
        let dot = |i: usize, j: usize| a.row(i).iter().zip(o.row(j)).map(|(x, y)| x * y).sum::<f64>();
        (0..n)
            .map(|i| {
                let pos = (dot(i, i) / tau).exp();
                let neg: f64 = (0..n).filter(|&j| j != i).map(|j| (dot(i, j) / tau).exp()).sum();
                -(pos / (pos + neg)).ln()
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn matches_direct_evaluation() {
        let (a, o) = (unit_rows(3, 8, 1), unit_rows(3, 8, 2));
        let mut t = Tape::<f64>::new();
        let (va, vo) = (t.constant(a.clone()), t.constant(o.clone()));
        let l = info_nce(&mut t, va, vo, 0.1).unwrap();
        assert!((t.value(l).data()[0] - direct_info_nce(&a, &o, 0.1)).abs() <= 1e-6);
    }

    #[test]
    fn symmetric_hand_case_and_errors() {
        let z = Tensor64::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut t = Tape::<f64>::new();
        let v = t.constant(z.clone());
        let l = symmetric_loss(&mut t, v, v, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((t.value(l).data()[0] - 2.0 * -(e / (e + 1.0)).ln()).abs() < 1e-12);
        let one = t.constant(Tensor64::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        assert!(info_nce(&mut t, one, one, 0.1).is_err());
        assert!(info_nce(&mut t, v, v, 0.0).is_err());
    }

    #[test]
    fn confident_positives_drive_the_loss_to_zero() {
        let mut t = Tape::<f64>::new();
        let v = t.constant(Tensor64::eye(4));
        let l = info_nce(&mut t, v, v, 0.01).unwrap();
        assert!(t.value(l).data()[0] < 1e-30);
    }

    #[test]
    fn temperature_is_a_logit_division() {
        let (a, o) = (unit_rows(5, 8, 4), unit_rows(5, 8, 5));
        let mut t = Tape::<f32>::new();
        let (va, vo) = (t.constant(a.cast()), t.constant(o.cast()));
        let l = info_nce(&mut t, va, vo, 0.07).unwrap();
        let ot = t.transpose(vo).unwrap();
        let sims = t.matmul(va, ot).unwrap();
        let pre = t.value(sims).map(|v| v / 0.07f32);
        let pre = t.constant(pre);
        let l1 = info_nce_logits(&mut t, pre).unwrap();
        assert_eq!(t.value(l).data(), t.value(l1).data());
    }

    #[test]
    fn anchor_gradient_matches_finite_differences() {
        let (a, o) = (unit_rows(4, 6, 6), unit_rows(4, 6, 7));
        let report = finite_diff_check(
            "info_nce",
            |t, v| {
                let other = t.constant(o.clone());
                info_nce(t, v[0], other, 0.2)
            },
            &[a],
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn ema_examples() {
        let mut s = ParamSet::new();
        s.insert("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        let mut t = ParamSet::new();
        t.insert("w", Tensor::from_vec(&[2], vec![0.0, 4.0]).unwrap());
        let before = t.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t.values(), before.values());
        let mut t0 = before.clone();
        ema_update(&mut t0, &s, 0.0).unwrap();
        assert_eq!(t0.values(), s.values());
        // Two steps towards a fixed student: θ = m²θ0 + (1 − m²)θs.
        let mut t2 = before.clone();
        ema_update(&mut t2, &s, 0.99).unwrap();
        ema_update(&mut t2, &s, 0.99).unwrap();
        let m2 = 0.99f64 * 0.99;
        let want = [m2 * 0.0 + (1.0 - m2) * 1.0, m2 * 4.0 + (1.0 - m2) * -2.0];
        for (got, want) in t2.values()[0].data().iter().zip(want) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
        let mut other = ParamSet::new();
        other.insert("v", Tensor::zeros(&[2]));
        assert!(matches!(ema_update(&mut other, &s, 0.5), Err(crate::Error::State(_))));
    }

    #[test]
    fn pretrain_step_is_finite_and_moves_only_the_student_by_gradient() {
        let cfg = ModelConfig::micro();
        let (model, mut student) = SslModel::init(&cfg, 0).unwrap();
        let mut teacher = TeacherState::new(&student, 0.99);
        let mut opt = AdamW::new(&student, 0.9, 0.999, 1e-4);
        let data = gen_synthetic(&SynthSpec {
            count: 4,
            duration_frames: 8,
            mel_bins: 4,
            ..Default::default()
        })
        .unwrap();
        let batch: Vec<&Spectrogram> = data.iter().map(|(s, _)| s).collect();
        let before_student = student.clone();
        let before_teacher = teacher.params.clone();
        let ssl = SslConfig {
            patch_drop: 0.0,
            ..Default::default()
        };
        let loss = Pretrainer {
            model: &model,
            student: &mut student,
            teacher: &mut teacher,
            optimizer: &mut opt,
            cfg: &ssl,
        }
        .step(&batch, 1e-3, 0)
        .unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let mut expected = before_teacher;
        ema_update(&mut expected, &student, 0.99).unwrap();
        assert_eq!(teacher.params.values(), expected.values());
        assert_ne!(student.values(), before_student.values());
    }
}
