use rand::Rng;

use super::pool::{pool_skip, pool_tokens, Layout, PoolSpec};
use super::rpe::relative_bias;
use crate::error::{bail, Result};
use crate::numerics::{truncated_normal, Graph, ParamId, ParamSet, Scalar, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// Hyper-parameters of one pooling transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    /// Output width; larger than `dim` when the block expands the embedding.
    pub dim_out: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pool_q: PoolSpec,
    pub pool_kv: PoolSpec,
    /// Largest coordinate offset with its own table row; `None` disables RPE.
    pub rpe_max_delta: Option<usize>,
    /// Add the pooled query to the attention output of every head.
    pub residual_pooling: bool,
    pub ln_eps: f64,
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            bail!(Config, "dim {} is not divisible into {} heads", self.dim, self.heads);
        }
        if self.dim_out < self.dim || self.mlp_ratio == 0 {
            bail!(Config, "block cannot shrink {} to {}", self.dim, self.dim_out);
        }
        Ok(())
    }
}

/// Parameter handles of one block inside a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1: (ParamId, ParamId),
    pub wq: (ParamId, ParamId),
    pub wk: (ParamId, ParamId),
    pub wv: (ParamId, ParamId),
    pub pool_q: ParamId,
    pub pool_k: ParamId,
    pub pool_v: ParamId,
    pub rpe: Option<(ParamId, ParamId)>,
    pub wo: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
    /// Residual projection for expanding blocks.
    pub proj: Option<ParamId>,
}

fn delta_kernel(spec: &PoolSpec, channels: usize) -> Tensor {
    let mut k = Tensor::zeros(&[spec.kernel.0, spec.kernel.1, channels]);
    let (ct, cf) = (spec.kernel.0 / 2, spec.kernel.1 / 2);
    let at = (ct * spec.kernel.1 + cf) * channels;
    k.data_mut()[at..at + channels].fill(1.0);
    k
}

impl BlockParams {
    /// Registers freshly initialised parameters under `prefix`.
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamSet<f32>,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, hidden) = (cfg.dim, cfg.dim * cfg.mlp_ratio);
        let mut linear = |ps: &mut ParamSet<f32>, name: &str, i: usize, o: usize| {
            (
                ps.insert(format!("{prefix}.{name}.weight"), truncated_normal(&[i, o], INIT_STD, rng)),
                ps.insert(format!("{prefix}.{name}.bias"), Tensor::zeros(&[o])),
            )
        };
        let norm = |ps: &mut ParamSet<f32>, name: &str| {
            (
                ps.insert(format!("{prefix}.{name}.gamma"), Tensor::full(&[d], 1.0)),
                ps.insert(format!("{prefix}.{name}.beta"), Tensor::zeros(&[d])),
            )
        };
        let ln1 = norm(ps, "norm1");
        let wq = linear(ps, "attn.q", d, d);
        let wk = linear(ps, "attn.k", d, d);
        let wv = linear(ps, "attn.v", d, d);
        let pool_q = ps.insert(format!("{prefix}.attn.pool_q"), delta_kernel(&cfg.pool_q, d));
        let pool_k = ps.insert(format!("{prefix}.attn.pool_k"), delta_kernel(&cfg.pool_kv, d));
        let pool_v = ps.insert(format!("{prefix}.attn.pool_v"), delta_kernel(&cfg.pool_kv, d));
        let rpe = cfg.rpe_max_delta.map(|m| {
            (
                ps.insert(format!("{prefix}.attn.rpe_time"), Tensor::zeros(&[2 * m + 1, d])),
                ps.insert(format!("{prefix}.attn.rpe_freq"), Tensor::zeros(&[2 * m + 1, d])),
            )
        });
        let wo = linear(ps, "attn.out", d, d);
        let ln2 = norm(ps, "norm2");
        let fc1 = linear(ps, "mlp.fc1", d, hidden);
        let fc2 = linear(ps, "mlp.fc2", hidden, cfg.dim_out);
        let proj = (cfg.dim_out != d).then(|| {
            ps.insert(
                format!("{prefix}.proj.weight"),
                truncated_normal(&[d, cfg.dim_out], INIT_STD, rng),
            )
        });
        Ok(Self {
            ln1,
            wq,
            wk,
            wv,
            pool_q,
            pool_k,
            pool_v,
            rpe,
            wo,
            ln2,
            fc1,
            fc2,
            proj,
        })
    }
}

/// `x · W + b`.
pub fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let (w, b) = (g.param(w), g.param(b));
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, (gamma, beta): (ParamId, ParamId), eps: f64) -> Result<Var> {
    let (gamma, beta) = (g.param(gamma), g.param(beta));
    g.layer_norm(x, gamma, beta, eps)
}

/// Result of running attention or a block on a token sequence.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub tokens: Var,
    pub layout: Layout,
    /// Per-head attention probabilities, `[Lq × Lkv]` each.
    pub attention: Vec<Var>,
}

impl BlockOutput {
    pub fn score_shape<T: Scalar>(&self, g: &Graph<'_, T>) -> (usize, usize) {
        let s = g.shape(self.attention[0]);
        (s[0], s[1])
    }
}

/// Multi-head pooling attention over `x` (`[N × D]`, laid out by `layout`).
pub fn mhpa<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &BlockParams,
    cfg: &BlockConfig,
    x: Var,
    layout: &Layout,
) -> Result<BlockOutput> {
    let d = cfg.head_dim();
    let q = linear(g, x, p.wq)?;
    let k = linear(g, x, p.wk)?;
    let v = linear(g, x, p.wv)?;
    let kq = g.param(p.pool_q);
    let (q, q_layout) = pool_tokens(g, q, kq, &cfg.pool_q, layout)?;
    let kk = g.param(p.pool_k);
    let (k, kv_layout) = pool_tokens(g, k, kk, &cfg.pool_kv, layout)?;
    let kv = g.param(p.pool_v);
    let (v, _) = pool_tokens(g, v, kv, &cfg.pool_kv, layout)?;

    let rpe = match (p.rpe, cfg.rpe_max_delta) {
        (Some((t, f)), Some(m)) => Some((g.param(t), g.param(f), m)),
        _ => None,
    };
    let (cq, ck) = (q_layout.coords(), kv_layout.coords());
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(v, h * d, d)?;
        let kt = g.transpose(kh)?;
        let mut scores = g.matmul(qh, kt)?;
        if let Some((rt, rf, m)) = rpe {
            let rt = g.slice_cols(rt, h * d, d)?;
            let rf = g.slice_cols(rf, h * d, d)?;
            let e = relative_bias(g, qh, rt, rf, &cq, &ck, m)?;
            scores = g.add(scores, e)?;
        }
        let scores = g.scale(scores, inv_sqrt_d)?;
        let a = g.softmax_lastdim(scores)?;
        let mut z = g.matmul(a, vh)?;
        if cfg.residual_pooling {
            z = g.add(z, qh)?;
        }
        heads.push(z);
        attention.push(a);
    }
    let z = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let tokens = linear(g, z, p.wo)?;
    Ok(BlockOutput {
        tokens,
        layout: q_layout,
        attention,
    })
}

/// Pre-norm block: `x' = pool(x) + MHPA(LN(x))`, `y = res(x') + MLP(LN(x'))`
/// where `res` is the identity or, for expanding blocks, a linear map.
pub fn transformer_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &BlockParams,
    cfg: &BlockConfig,
    x: Var,
    layout: &Layout,
) -> Result<BlockOutput> {
    let xn = norm(g, x, p.ln1, cfg.ln_eps)?;
    let attn = mhpa(g, p, cfg, xn, layout)?;
    let (skip, skip_layout) = pool_skip(g, x, &cfg.pool_q, layout)?;
    if skip_layout != attn.layout {
        bail!(State, "residual and attention layouts diverged");
    }
    let x1 = g.add(skip, attn.tokens)?;

    let yn = norm(g, x1, p.ln2, cfg.ln_eps)?;
    let hidden = linear(g, yn, p.fc1)?;
    let hidden = g.gelu(hidden)?;
    let mlp = linear(g, hidden, p.fc2)?;
    let res = match p.proj {
        Some(w) => {
            let w = g.param(w);
            g.matmul(x1, w)?
        }
        None => x1,
    };
    let tokens = g.add(res, mlp)?;
    Ok(BlockOutput {
        tokens,
        layout: attn.layout,
        attention: attn.attention,
    })
}
