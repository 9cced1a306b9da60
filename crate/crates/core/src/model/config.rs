use crate::attention::{BlockConfig, Layout, PoolSpec};
use crate::error::{bail, Error, Result};

/// One stage of the pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Query stride of the stage's first block; later blocks use unit stride.
    pub pool_q_stride: (usize, usize),
    /// Key/value stride shared by every block of the stage.
    pub pool_kv_stride: (usize, usize),
}

/// Whole-network hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mel_bins: usize,
    pub frames: usize,
    pub patch: (usize, usize),
    pub stem_dim: usize,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub rpe_enabled: bool,
    pub residual_pooling: bool,
    pub pool_kernel: usize,
    pub pool_padding: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// 64×64 inputs, 4×4 patches, four stages of depth (1, 2, 11, 2).
    pub fn desk() -> Self {
        let stage = |depth, dim, heads, q, kv| StageConfig {
            depth,
            dim,
            heads,
            pool_q_stride: q,
            pool_kv_stride: kv,
        };
        Self {
            mel_bins: 64,
            frames: 64,
            patch: (4, 4),
            stem_dim: 32,
            stages: vec![
                stage(1, 32, 1, (1, 1), (4, 4)),
                stage(2, 64, 2, (2, 2), (2, 2)),
                stage(11, 128, 4, (2, 2), (1, 1)),
                stage(2, 256, 8, (2, 2), (1, 1)),
            ],
            num_classes: 10,
            rpe_enabled: true,
            residual_pooling: true,
            pool_kernel: 3,
            pool_padding: 1,
            mlp_ratio: 4,
            ln_eps: 1e-5,
        }
    }

    /// Two-token input grid and two single-block stages; for exhaustive checks.
    pub fn micro() -> Self {
        Self {
            mel_bins: 4,
            frames: 8,
            patch: (4, 4),
            stem_dim: 4,
            stages: vec![
                StageConfig {
                    depth: 1,
                    dim: 4,
                    heads: 2,
                    pool_q_stride: (1, 1),
                    pool_kv_stride: (1, 1),
                },
                StageConfig {
                    depth: 1,
                    dim: 8,
                    heads: 2,
                    pool_q_stride: (2, 1),
                    pool_kv_stride: (1, 1),
                },
            ],
            num_classes: 3,
            ..Self::desk()
        }
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.frames.div_ceil(self.patch.0), self.mel_bins.div_ceil(self.patch.1))
    }

    pub fn patch_cells(&self) -> usize {
        self.patch.0 * self.patch.1
    }

    pub fn final_dim(&self) -> usize {
        self.stages.last().map_or(self.stem_dim, |s| s.dim)
    }

    pub fn depths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.depth).collect()
    }

    /// Largest coordinate offset representable on the input patch grid.
    pub fn rpe_max_delta(&self) -> usize {
        let (gt, gf) = self.patch_grid();
        gt.max(gf) - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.mel_bins == 0 || self.frames == 0 || self.num_classes == 0 {
            bail!(Config, "mel_bins, frames and num_classes must be positive");
        }
        if self.patch.0 == 0 || self.patch.1 == 0 || self.patch.0 > self.frames || self.patch.1 > self.mel_bins {
            bail!(Config, "patch {:?} does not fit {}×{} input", self.patch, self.frames, self.mel_bins);
        }
        if self.stages.is_empty() {
            bail!(Config, "model needs at least one stage");
        }
        if self.stages[0].dim != self.stem_dim {
            bail!(Config, "stage 1 dim {} differs from stem dim {}", self.stages[0].dim, self.stem_dim);
        }
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            if s.depth == 0 {
                bail!(Config, "stage {n}: depth must be positive");
            }
            if s.heads == 0 || s.dim % s.heads != 0 {
                bail!(Config, "stage {n}: dim {} not divisible by {} heads", s.dim, s.heads);
            }
            let strides = [s.pool_q_stride.0, s.pool_q_stride.1, s.pool_kv_stride.0, s.pool_kv_stride.1];
            if strides.contains(&0) {
                bail!(Config, "stage {n}: strides must be at least 1");
            }
            if i > 0 && s.dim < self.stages[i - 1].dim {
                bail!(Config, "stage {n}: dim {} shrinks from {}", s.dim, self.stages[i - 1].dim);
            }
        }
        if self.pool_kernel == 0 || self.pool_padding >= self.pool_kernel {
            bail!(Config, "pool padding {} must be below kernel {}", self.pool_padding, self.pool_kernel);
        }
        if self.mlp_ratio == 0 || !(self.ln_eps > 0.0) {
            bail!(Config, "mlp_ratio and ln_eps must be positive");
        }
        Ok(())
    }

    /// Per-block configurations in execution order, tagged with 1-based
    /// stage numbers.
    pub fn blocks(&self) -> Result<Vec<(usize, BlockConfig)>> {
        self.validate()?;
        let (k, p) = (self.pool_kernel, self.pool_padding);
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let next_dim = self.stages.get(i + 1).map_or(s.dim, |n| n.dim);
            for j in 0..s.depth {
                let q = if j == 0 { s.pool_q_stride } else { (1, 1) };
                out.push((
                    i + 1,
                    BlockConfig {
                        dim: s.dim,
                        dim_out: if j + 1 == s.depth { next_dim } else { s.dim },
                        heads: s.heads,
                        mlp_ratio: self.mlp_ratio,
                        pool_q: PoolSpec::square(k, p, q)?,
                        pool_kv: PoolSpec::square(k, p, s.pool_kv_stride)?,
                        rpe_max_delta: self.rpe_enabled.then(|| self.rpe_max_delta()),
                        residual_pooling: self.residual_pooling,
                        ln_eps: self.ln_eps,
                    },
                ));
            }
        }
        Ok(out)
    }
}

/// Shapes of one block, computed without weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub stage: usize,
    pub tokens: usize,
    pub grid: (usize, usize),
    pub dim_in: usize,
    pub dim_out: usize,
    /// Attention score extents `(queries, keys)`.
    pub scores: (usize, usize),
}

/// Shapes of one stage: token count and grid after the first block's query
/// pooling, and the width the stage attends at.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub tokens: usize,
    pub grid: (usize, usize),
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapePlan {
    pub input_grid: (usize, usize),
    pub stages: Vec<StagePlan>,
    pub blocks: Vec<BlockPlan>,
    /// Final token count and width.
    pub output: (usize, usize),
}

impl ShapePlan {
    pub fn stage_shapes(&self) -> Vec<(usize, usize)> {
        self.stages.iter().map(|s| (s.tokens, s.dim)).collect()
    }
}

/// Pooled-length arithmetic over the whole network.
pub fn shape_plan(cfg: &ModelConfig) -> Result<ShapePlan> {
    let input_grid = cfg.patch_grid();
    let mut layout = Layout::full(input_grid);
    let mut stages: Vec<StagePlan> = Vec::new();
    let mut blocks = Vec::new();
    for (stage, b) in cfg.blocks()? {
        let stage_err = |e: Error| Error::Config(format!("stage {stage}: {e}"));
        let q = layout.pooled(&b.pool_q).map_err(stage_err)?;
        let kv = layout.pooled(&b.pool_kv).map_err(stage_err)?;
        if stages.len() < stage {
            stages.push(StagePlan {
                tokens: q.len(),
                grid: q.grid,
                dim: b.dim,
            });
        }
        blocks.push(BlockPlan {
            stage,
            tokens: q.len(),
            grid: q.grid,
            dim_in: b.dim,
            dim_out: b.dim_out,
            scores: (q.len(), kv.len()),
        });
        layout = q;
    }
    let output = (layout.len(), cfg.final_dim());
    Ok(ShapePlan {
        input_grid,
        stages,
        blocks,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_pyramid() {
        let plan = shape_plan(&ModelConfig::desk()).unwrap();
        assert_eq!(plan.input_grid, (16, 16));
        assert_eq!(plan.stage_shapes(), vec![(256, 32), (64, 64), (16, 128), (4, 256)]);
        assert_eq!(plan.output, (4, 256));
        assert_eq!(plan.blocks.len(), 16);
        assert_eq!(plan.blocks[0].scores, (256, 16));
        for w in plan.stages.windows(2) {
            assert_eq!(w[1].dim, 2 * w[0].dim);
        }
        for w in plan.stages[1..].windows(2) {
            assert_eq!(w[0].tokens, 4 * w[1].tokens);
        }
    }

    #[test]
    fn unit_strides_keep_shapes_constant() {
        let mut cfg = ModelConfig::desk();
        for s in &mut cfg.stages {
            s.pool_q_stride = (1, 1);
            s.pool_kv_stride = (1, 1);
            s.dim = 32;
            s.heads = 1;
        }
        let plan = shape_plan(&cfg).unwrap();
        assert!(plan.stages.iter().all(|s| (s.tokens, s.dim) == (256, 32)));
        assert!(plan.blocks.iter().all(|b| b.scores == (256, 256)));
    }

    #[test]
    fn zero_extent_grid_names_the_stage() {
        let mut cfg = ModelConfig::desk();
        cfg.pool_kernel = 5;
        cfg.pool_padding = 0;
        let err = shape_plan(&cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("stage 2"), "{err}");
        let mut bad = ModelConfig::desk();
        bad.stages[2].heads = 3;
        assert!(bad.validate().unwrap_err().to_string().contains("stage 3"));
    }

    #[test]
    fn micro_grid_has_two_tokens() {
        let plan = shape_plan(&ModelConfig::micro()).unwrap();
        assert_eq!(plan.input_grid, (2, 1));
        assert_eq!(plan.stage_shapes(), vec![(2, 4), (1, 8)]);
    }
}
