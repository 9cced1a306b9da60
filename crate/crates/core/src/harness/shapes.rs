use std::fmt::Write;

use crate::error::Result;
use crate::model::{shape_plan, ModelConfig};

/// Human-readable table of every block followed by one
/// `stage,i,tokens,gt,gf,dim` line per stage (1-based).
pub fn render_shapes(cfg: &ModelConfig) -> Result<String> {
    let plan = shape_plan(cfg)?;
    let heads: Vec<usize> = cfg.blocks()?.iter().map(|(_, b)| b.heads).collect();
    let mut out = String::new();
    let (gt, gf) = plan.input_grid;
    writeln!(out, "input   {}x{} patch grid of {:?} patches, {} tokens x {}", gt, gf, cfg.patch, gt * gf, cfg.stem_dim).ok();
    writeln!(
        out,
        "{:>5} {:>5} {:>7} {:>7} {:>11} {:>17}",
        "block", "stage", "tokens", "grid", "dim", "attention"
    )
    .ok();
    for (i, (b, h)) in plan.blocks.iter().zip(&heads).enumerate() {
        writeln!(
            out,
            "{:>5} {:>5} {:>7} {:>7} {:>11} {:>17}",
            i + 1,
            b.stage,
            b.tokens,
            format!("{}x{}", b.grid.0, b.grid.1),
            format!("{}->{}", b.dim_in, b.dim_out),
            format!("{}x{}x{}", h, b.scores.0, b.scores.1),
        )
        .ok();
    }
    writeln!(out, "output  {} tokens x {}", plan.output.0, plan.output.1).ok();
    writeln!(out, "depths  {:?}", cfg.depths()).ok();
    for (i, s) in plan.stages.iter().enumerate() {
        writeln!(out, "stage,{},{},{},{},{}", i + 1, s.tokens, s.grid.0, s.grid.1, s.dim).ok();
    }
    Ok(out)
}
