//! Template-to-search attention export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::image::{Image, Pair};
use crate::model::params::Ctx;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrids {
    pub layer: usize,
    /// `[G, G]` per branch: attention from template tokens to each search
    /// cell, averaged over template tokens and heads.
    pub maps: Pair<Tensor>,
    /// Largest `|Σ row − 1|` over the template rows of every head, before
    /// averaging.
    pub max_row_error: f64,
}

/// Mean over heads and template rows of the template-to-search block.
fn reduce(heads: &[Tensor], n_z: usize, grid: usize, max_err: &mut f64) -> Tensor {
    let n = heads[0].shape()[0];
    let mut acc = vec![0.0; grid * grid];
    for a in heads {
        let d = a.data();
        for i in 0..n_z {
            let row = &d[i * n..(i + 1) * n];
            *max_err = max_err.max((row.iter().sum::<f64>() - 1.0).abs());
            for (k, v) in row[n_z..].iter().enumerate() {
                acc[k] += v;
            }
        }
    }
    let denom = (heads.len() * n_z) as f64;
    Tensor::from_fn([grid, grid], |i| acc[i] / denom)
}

/// Runs one forward on standardized crops and reduces the attention of
/// zero-based `layer`.
pub fn attention_grids(model: &Model, template: Pair<&Image>, search: Pair<&Image>, layer: usize) -> Result<AttentionGrids> {
    let cfg = model.config();
    let mut ctx = Ctx::new(model.params(), false);
    let f = model.forward(&mut ctx, template, search, Some(layer))?;
    let (rgb, tir) = f.dual.attn.expect("capture requested");
    let vals = |vs: &[crate::autograd::Var]| vs.iter().map(|&v| ctx.g.value(v).clone()).collect::<Vec<_>>();
    let (rgb, tir) = (vals(&rgb), vals(&tir));
    let mut err: f64 = 0.0;
    let g = cfg.grid();
    let maps = Pair::new(reduce(&rgb, cfg.n_template(), g, &mut err), reduce(&tir, cfg.n_template(), g, &mut err));
    Ok(AttentionGrids {
        layer,
        maps,
        max_row_error: err,
    })
}

/// Comma-separated rows with full round-trip precision.
pub fn grid_text(t: &Tensor) -> String {
    let cols = t.shape()[t.rank() - 1];
    let mut s = String::new();
    for row in t.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

/// Writes `attn_rgb_l{layer}.csv` and `attn_tir_l{layer}.csv` into `dir`.
pub fn export_attention(model: &Model, template: Pair<&Image>, search: Pair<&Image>, layer: usize, dir: &Path) -> Result<(AttentionGrids, Pair<PathBuf>)> {
    let grids = attention_grids(model, template, search, layer)?;
    std::fs::create_dir_all(dir)?;
    let rgb = dir.join(format!("attn_rgb_l{layer}.csv"));
    let tir = dir.join(format!("attn_tir_l{layer}.csv"));
    std::fs::write(&rgb, grid_text(&grids.maps.rgb))?;
    std::fs::write(&tir, grid_text(&grids.maps.tir))?;
    Ok((grids, Pair::new(rgb, tir)))
}
