//! Exact parameter counts and analytic multiply-accumulate counts.
//!
//! MACs cover matrix products, attention products and convolutions of one
//! forward pass. Normalization, activations, softmax and elementwise
//! products are not counted. `flops = 2·macs`.

use std::fmt::Write as _;

use indexmap::IndexMap;

use crate::model::config::ModelConfig;
use crate::model::Model;
use crate::prompter::SPATIAL_KERNEL;

/// Ordered `(module, count)` rows.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CountTable {
    pub rows: IndexMap<String, u64>,
}

impl CountTable {
    fn add(&mut self, key: &str, v: u64) {
        *self.rows.entry(key.to_string()).or_insert(0) += v;
    }

    pub fn total(&self) -> u64 {
        self.rows.values().sum()
    }

    pub fn get(&self, key: &str) -> u64 {
        self.rows.get(key).copied().unwrap_or(0)
    }

    pub fn render(&self, unit: &str, scale: f64) -> String {
        let mut s = String::new();
        for (k, v) in &self.rows {
            let _ = writeln!(s, "  {k:<20} {:>16} {:>12.4}{unit}", v, *v as f64 / scale);
        }
        let t = self.total();
        let _ = writeln!(s, "  {:<20} {:>16} {:>12.4}{unit}", "total", t, t as f64 / scale);
        s
    }
}

/// Module of a parameter name, ignoring modality and layer indices.
pub fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').filter(|p| !matches!(*p, "rgb" | "tir")).collect();
    match parts.as_slice() {
        ["backbone", "pos_z" | "pos_x"] => "backbone.pos".into(),
        ["backbone", sub, ..] => format!("backbone.{sub}"),
        ["prompt", sub, ..] => format!("prompt.{sub}"),
        ["head", stack, ..] => format!("head.{stack}"),
        [first, ..] => (*first).to_string(),
        [] => String::new(),
    }
}

fn is_frozen(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("patch_embed.")
}

/// Element counts per module. With `trainable_only`, the encoder and patch
/// projections count as frozen.
pub fn count_params(model: &Model, trainable_only: bool) -> CountTable {
    count_params_for(model.config(), trainable_only)
}

pub fn count_params_for(cfg: &ModelConfig, trainable_only: bool) -> CountTable {
    let mut t = CountTable::default();
    for spec in Model::param_specs(cfg) {
        if trainable_only && is_frozen(&spec.name) {
            continue;
        }
        t.add(&module_of(&spec.name), spec.numel() as u64);
    }
    t
}

/// Parameters of one encoder layer.
pub fn encoder_layer_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.embed_dim as u64;
    let h = cfg.mlp_dim() as u64;
    // two norms, qkv, proj, fc1, fc2
    4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub table: CountTable,
}

impl FlopReport {
    pub fn macs(&self) -> u64 {
        self.table.total()
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }

    pub fn render(&self) -> String {
        let mut s = self.table.render(" GMAC", 1e9);
        let _ = writeln!(
            s,
            "  {:.4} GMACs = {:.4} GFLOPs (flops = 2 x macs)",
            self.macs() as f64 / 1e9,
            self.flops() as f64 / 1e9
        );
        s
    }
}

fn linear(n: usize, fin: usize, fout: usize) -> u64 {
    (n * fin * fout) as u64
}

/// `Q·Kᵀ` and `A·V` over all heads.
fn attention_products(n: usize, d: usize) -> u64 {
    2 * (n * n * d) as u64
}

fn prompt_branch_macs(cfg: &ModelConfig) -> u64 {
    let n = cfg.n_tokens();
    let m = n / cfg.reduction_ratio;
    let d = cfg.embed_dim;
    let mut v = 0;
    if cfg.flags.use_token_attn {
        v += linear(2, n, m) + linear(2, m, n);
    }
    if cfg.flags.use_spatial_attn {
        v += (2 * SPATIAL_KERNEL * d) as u64;
    }
    v
}

fn head_macs(cfg: &ModelConfig, t: &mut CountTable) {
    let g = cfg.grid();
    let cells = g * g;
    for (name, out) in crate::model::head::STACKS {
        let mut cin = cfg.embed_dim;
        let mut v = 0;
        for &c in &cfg.head_widths() {
            v += (cells * c * cin * 9) as u64;
            cin = c;
        }
        v += (cells * out * cin) as u64;
        t.add(&format!("head.{name}"), v);
    }
}

fn encoder_macs(cfg: &ModelConfig, branches: usize, t: &mut CountTable) {
    let (n, d, h) = (cfg.n_tokens(), cfg.embed_dim, cfg.mlp_dim());
    let l = cfg.num_layers as u64;
    let b = branches as u64;
    t.add("backbone.attn", b * l * attention_products(n, d));
    t.add("backbone.linear", b * l * (linear(n, d, 3 * d) + linear(n, d, d) + linear(n, d, h) + linear(n, h, d)));
}

/// One forward of the dual-branch model.
pub fn count_flops(cfg: &ModelConfig) -> FlopReport {
    let mut t = CountTable::default();
    let n = cfg.n_tokens();
    t.add("patch_embed", 2 * linear(n, cfg.patch_dim(), cfg.embed_dim));
    encoder_macs(cfg, 2, &mut t);
    if cfg.flags.use_mvip {
        let b = prompt_branch_macs(cfg);
        t.add("prompt.init", 2 * 2 * b);
        t.add("prompt.layers", cfg.num_layers as u64 * 2 * 3 * b);
    }
    t.add("fuse", linear(n, 2 * cfg.embed_dim, cfg.embed_dim));
    head_macs(cfg, &mut t);
    FlopReport { table: t }
}

/// One forward of the same encoder and head on a single modality, without
/// prompters or fusion.
pub fn count_flops_single(cfg: &ModelConfig) -> FlopReport {
    let mut t = CountTable::default();
    t.add("patch_embed", linear(cfg.n_tokens(), cfg.patch_dim(), cfg.embed_dim));
    encoder_macs(cfg, 1, &mut t);
    head_macs(cfg, &mut t);
    FlopReport { table: t }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Size2;
    use crate::prompter::prompter_param_count;

    #[test]
    fn toy_counts_match_store_and_closed_forms() {
        let cfg = ModelConfig::gradcheck_toy();
        let m = Model::new(cfg.clone(), 0).unwrap();
        let t = count_params(&m, false);
        assert_eq!(t.total(), m.params().numel() as u64);
        let (d, l) = (cfg.embed_dim as u64, cfg.num_layers as u64);
        assert_eq!(t.get("backbone.blocks"), l * encoder_layer_params(&cfg));
        assert_eq!(t.get("backbone.norm"), 2 * d);
        assert_eq!(t.get("backbone.pos"), cfg.n_tokens() as u64 * d);
        assert_eq!(t.get("patch_embed"), 2 * (cfg.patch_dim() as u64 * d + d));
        assert_eq!(t.get("fuse"), 2 * d * d + d);
        let pc = prompter_param_count(&cfg);
        assert_eq!(t.get("prompt.init") + t.get("prompt.layers"), pc.total as u64);
        assert_eq!(t.get("prompt.layers"), l * pc.per_layer as u64);
    }

    #[test]
    fn vit_b_layer_closed_form() {
        let cfg = ModelConfig::default();
        assert_eq!(encoder_layer_params(&cfg), 12 * 768 * 768 + 13 * 768);
    }

    #[test]
    fn frozen_view_drops_encoder() {
        let cfg = ModelConfig::default();
        let all = count_params_for(&cfg, false);
        let tr = count_params_for(&cfg, true);
        assert_eq!(tr.get("backbone.blocks"), 0);
        assert_eq!(tr.get("patch_embed"), 0);
        assert_eq!(all.total() - tr.total(), all.get("backbone.blocks") + all.get("backbone.norm") + all.get("backbone.pos") + all.get("patch_embed"));
    }

    #[test]
    fn linear_formula() {
        assert_eq!(linear(320, 768, 2304), 320 * 768 * 2304);
    }

    #[test]
    fn dual_backbone_costs_twice_single() {
        let cfg = ModelConfig::default();
        let dual = count_flops(&cfg);
        let single = count_flops_single(&cfg);
        let bb = |r: &FlopReport| r.table.get("backbone.attn") + r.table.get("backbone.linear");
        assert_eq!(bb(&dual), 2 * bb(&single));
        let mut shared = cfg.clone();
        shared.share_backbone = false;
        assert_eq!(count_flops(&shared).macs(), dual.macs());
        assert_eq!(dual.flops(), 2 * dual.macs());
    }

    #[test]
    fn attention_quadratic_linear_terms_linear() {
        let at = |z: usize, x: usize| {
            let cfg = ModelConfig {
                template_size: Size2::square(z),
                search_size: Size2::square(x),
                ..ModelConfig::default()
            };
            assert!(cfg.validate().is_ok() || cfg.n_tokens() % cfg.reduction_ratio != 0);
            let r = count_flops_single(&cfg);
            (cfg.n_tokens() as f64, r.table.get("backbone.attn") as f64, r.table.get("backbone.linear") as f64)
        };
        let pts = [at(64, 128), at(64, 192), at(128, 256)];
        assert_eq!(pts.map(|p| p.0), [80.0, 160.0, 320.0]);
        // attn / N² and linear / N are constant
        for p in &pts[1..] {
            assert!((p.1 / (p.0 * p.0) - pts[0].1 / (pts[0].0 * pts[0].0)).abs() < 1e-9);
            assert!((p.2 / p.0 - pts[0].2 / pts[0].0).abs() < 1e-9);
        }
    }

    #[test]
    fn module_keys() {
        assert_eq!(module_of("backbone.rgb.blocks.3.attn.qkv.weight"), "backbone.blocks");
        assert_eq!(module_of("backbone.pos_x"), "backbone.pos");
        assert_eq!(module_of("prompt.layers.0.into_rgb.cur.s1.weight"), "prompt.layers");
        assert_eq!(module_of("head.score.conv1.weight"), "head.score");
        assert_eq!(module_of("patch_embed.tir.bias"), "patch_embed");
    }
}
