use super::ParamSet;
use crate::error::{bail, Result};

/// Adam with decoupled weight decay on matrices and kernels (rank ≥ 2).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    steps: u32,
}

impl AdamW {
    pub fn new(params: &ParamSet<f32>, beta1: f32, beta2: f32, weight_decay: f32) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// One update with learning rate `lr`. Missing gradients count as zero.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Option<Vec<f32>>], lr: f32) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            bail!(State, "optimizer tracks {} tensors, got {} gradients", self.m.len(), grads.len());
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                data[i] -= lr * (update + decay * data[i]);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(&ps, 0.9, 0.999, 0.0);
        opt.step(&mut ps, &[Some(vec![0.5, -3.0])], 0.1).unwrap();
        let w = ps.iter().next().unwrap().1.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::full(&[2, 2], 0.3));
        let before = ps.values();
        let mut opt = AdamW::new(&ps, 0.9, 0.999, 1e-4);
        opt.step(&mut ps, &[Some(vec![1.0; 4])], 0.0).unwrap();
        assert_eq!(ps.values(), before);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(3e-4, 0, 100), 3e-4);
        assert!((cosine_lr(3e-4, 50, 100) - 1.5e-4).abs() < 1e-12);
        assert!(cosine_lr(3e-4, 100, 100).abs() < 1e-15);
    }
}
