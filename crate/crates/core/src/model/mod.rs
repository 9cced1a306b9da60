//! The four-stage pooling-attention pyramid, its weight-free shape planner
//! and checkpoint files.

mod checkpoint;
mod config;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, prefixed, restore_params, save_checkpoint,
    Entries, CHECKPOINT_MAGIC,
};
pub use config::{shape_plan, BlockPlan, ModelConfig, ShapePlan, StageConfig, StagePlan};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{linear, transformer_block, BlockConfig, BlockParams, Layout};
use crate::error::{bail, Result};
use crate::frontend::{PatchEmbedding, PatchGrid};
use crate::numerics::{truncated_normal, Graph, ParamId, ParamSet, Scalar, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// Shapes observed while running one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockTrace {
    pub stage: usize,
    pub tokens: usize,
    pub grid: (usize, usize),
    pub dim_in: usize,
    pub dim_out: usize,
    pub scores: (usize, usize),
}

/// Parameter handles of the full network. Weights live in a separate
/// [`ParamSet`] so student and teacher can share one architecture.
#[derive(Clone, Debug)]
pub struct Mast {
    config: ModelConfig,
    embed: (ParamId, ParamId),
    blocks: Vec<(usize, BlockConfig, BlockParams)>,
    head_norm: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

impl Mast {
    /// Builds the architecture and its initial weights from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<(Self, ParamSet<f32>)> {
        let block_cfgs = config.blocks()?;
        shape_plan(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d0 = config.stem_dim;
        let embed = (
            ps.insert("patch_embed.weight", truncated_normal(&[config.patch_cells(), d0], INIT_STD, &mut rng)),
            ps.insert("patch_embed.bias", Tensor::zeros(&[d0])),
        );
        let mut blocks = Vec::with_capacity(block_cfgs.len());
        for (i, (stage, cfg)) in block_cfgs.into_iter().enumerate() {
            let p = BlockParams::init(&mut ps, &format!("blocks.{i}"), &cfg, &mut rng)?;
            blocks.push((stage, cfg, p));
        }
        let d = config.final_dim();
        let head_norm = (
            ps.insert("head.norm.gamma", Tensor::full(&[d], 1.0)),
            ps.insert("head.norm.beta", Tensor::zeros(&[d])),
        );
        let head = (
            ps.insert("head.fc.weight", truncated_normal(&[d, config.num_classes], INIT_STD, &mut rng)),
            ps.insert("head.fc.bias", Tensor::zeros(&[config.num_classes])),
        );
        Ok((
            Self {
                config: config.clone(),
                embed,
                blocks,
                head_norm,
                head,
            },
            ps,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Whether `id` belongs to the classification head.
    pub fn is_head_param(&self, id: ParamId) -> bool {
        [self.head_norm.0, self.head_norm.1, self.head.0, self.head.1].contains(&id)
    }

    /// The stem projection as a plain [`PatchEmbedding`].
    pub fn patch_embedding(&self, params: &ParamSet<f32>) -> PatchEmbedding {
        PatchEmbedding {
            weight: params.get(self.embed.0).clone(),
            bias: params.get(self.embed.1).clone(),
        }
    }

    /// Projects raw patches (`N × pt·pf`) to stem tokens.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, grid: &PatchGrid) -> Result<(Var, Layout)> {
        if grid.patch != self.config.patch || grid.grid != self.config.patch_grid() {
            bail!(
                Shape,
                "patch grid {:?} of {:?} patches does not match the model's {:?} of {:?}",
                grid.grid,
                grid.patch,
                self.config.patch_grid(),
                self.config.patch
            );
        }
        let layout = if grid.is_full() {
            Layout::full(grid.grid)
        } else {
            Layout::sparse(grid.grid, grid.kept.clone())?
        };
        let x = g.constant(grid.tokens.cast::<T>());
        Ok((linear(g, x, self.embed)?, layout))
    }

    /// Runs every block; returns final tokens `[Ñ × D]` and their layout.
    pub fn forward_features<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        grid: &PatchGrid,
        mut trace: Option<&mut Vec<BlockTrace>>,
    ) -> Result<(Var, Layout)> {
        let (mut x, mut layout) = self.embed(g, grid)?;
        for (i, (stage, cfg, p)) in self.blocks.iter().enumerate() {
            let out = transformer_block(g, p, cfg, x, &layout)?;
            if !g.value(out.tokens).is_finite() {
                bail!(Numeric, "non-finite activations after block {} (stage {stage})", i + 1);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(BlockTrace {
                    stage: *stage,
                    tokens: out.layout.len(),
                    grid: out.layout.grid,
                    dim_in: cfg.dim,
                    dim_out: g.shape(out.tokens)[1],
                    scores: out.score_shape(g),
                });
            }
            x = out.tokens;
            layout = out.layout;
        }
        Ok((x, layout))
    }

    /// Mean over tokens, `[1 × D]`.
    pub fn pool<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        g.mean_rows(features)
    }

    /// Mean-pool, layer norm, linear: logits `[1 × classes]`.
    pub fn classify<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let pooled = g.mean_rows(features)?;
        let (gamma, beta) = (g.param(self.head_norm.0), g.param(self.head_norm.1));
        let normed = g.layer_norm(pooled, gamma, beta, self.config.ln_eps)?;
        linear(g, normed, self.head)
    }

    /// Forward through features and head.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, grid: &PatchGrid) -> Result<Var> {
        let (features, _) = self.forward_features(g, grid, None)?;
        self.classify(g, features)
    }
}
