//! Patch embedding, pre-norm encoder blocks and the dual-branch recursion.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::config::ModelConfig;
use crate::model::params::{linear_specs, norm_specs, Ctx, Init, ParamSpec};
use crate::prompter::{bind_prompter, imvip, mvip, prompter_specs, PromptOptions, PrompterParams};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Tir,
    Fused,
}

impl Modality {
    pub fn key(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Tir => "tir",
            Modality::Fused => "fused",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Template,
    Search,
}

/// `N×D` tokens; rows `[0, n_z)` are template tokens, the rest search tokens.
#[derive(Clone, Copy, Debug)]
pub struct TokenSeq {
    pub tokens: Var,
    pub n_z: usize,
    pub n_x: usize,
    pub modality: Modality,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.n_z + self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self { tokens, ..*self }
    }
}

fn backbone_prefix(cfg: &ModelConfig, m: Modality) -> String {
    if cfg.share_backbone {
        "backbone".to_string()
    } else {
        format!("backbone.{}", m.key())
    }
}

/// Flattened-patch projection plus the segment's positional table.
pub fn patch_embed(ctx: &mut Ctx<'_>, cfg: &ModelConfig, image: &Image, modality: Modality, segment: Segment) -> Result<TokenSeq> {
    let p = cfg.patch_size;
    if image.width() % p != 0 || image.height() % p != 0 {
        return Err(Error::config(format!(
            "{}x{} image is not divisible by patch size {p}",
            image.width(),
            image.height()
        )));
    }
    let expected = match segment {
        Segment::Template => cfg.template_size,
        Segment::Search => cfg.search_size,
    };
    if (image.height(), image.width()) != (expected.h, expected.w) {
        return Err(Error::shape(
            "patch_embed",
            format!("{}x{} (h×w)", expected.h, expected.w),
            format!("{}x{}", image.height(), image.width()),
        ));
    }
    let n = (image.width() / p) * (image.height() / p);
    let x = ctx.g.input(Tensor::new([n, cfg.patch_dim()], image.patches(p)?)?);
    let w = ctx.p(&format!("patch_embed.{}.weight", modality.key()))?;
    let b = ctx.p(&format!("patch_embed.{}.bias", modality.key()))?;
    let tokens = ctx.g.affine(x, w, Some(b))?;
    let table = match segment {
        Segment::Template => "pos_z",
        Segment::Search => "pos_x",
    };
    let pos = ctx.p(&format!("{}.{table}", backbone_prefix(cfg, modality)))?;
    let tokens = ctx.g.add(tokens, pos)?;
    let (n_z, n_x) = match segment {
        Segment::Template => (n, 0),
        Segment::Search => (0, n),
    };
    Ok(TokenSeq {
        tokens,
        n_z,
        n_x,
        modality,
    })
}

/// Template rows followed by search rows.
pub fn concat_tokens(g: &mut Graph, z: &TokenSeq, x: &TokenSeq) -> Result<TokenSeq> {
    if z.modality != x.modality {
        return Err(Error::config(format!(
            "cannot concatenate {} and {} tokens",
            z.modality.key(),
            x.modality.key()
        )));
    }
    if z.n_x != 0 || x.n_z != 0 {
        return Err(Error::config("concat_tokens expects a template and a search sequence"));
    }
    let tokens = g.concat(&[z.tokens, x.tokens], 0)?;
    Ok(TokenSeq {
        tokens,
        n_z: z.n_z,
        n_x: x.n_x,
        modality: z.modality,
    })
}

/// Splits a sequence back into its template and search parts.
pub fn split_tokens(g: &mut Graph, h: &TokenSeq) -> Result<(Var, Var)> {
    let z = g.slice(h.tokens, 0, 0, h.n_z)?;
    let x = g.slice(h.tokens, 0, h.n_z, h.n_x)?;
    Ok((z, x))
}

/// Both modalities' template+search sequences.
pub fn embed_pair(ctx: &mut Ctx<'_>, cfg: &ModelConfig, modality: Modality, template: &Image, search: &Image) -> Result<TokenSeq> {
    let z = patch_embed(ctx, cfg, template, modality, Segment::Template)?;
    let x = patch_embed(ctx, cfg, search, modality, Segment::Search)?;
    concat_tokens(&mut ctx.g, &z, &x)
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.affine(x, self.weight, Some(self.bias))
    }
}

impl Norm {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

fn bind_norm(ctx: &mut Ctx<'_>, prefix: &str) -> Result<Norm> {
    Ok(Norm {
        gain: ctx.p(&format!("{prefix}.gain"))?,
        bias: ctx.p(&format!("{prefix}.bias"))?,
    })
}

fn bind_linear(ctx: &mut Ctx<'_>, prefix: &str) -> Result<Linear> {
    Ok(Linear {
        weight: ctx.p(&format!("{prefix}.weight"))?,
        bias: ctx.p(&format!("{prefix}.bias"))?,
    })
}

pub fn bind_block(ctx: &mut Ctx<'_>, prefix: &str) -> Result<BlockParams> {
    Ok(BlockParams {
        norm1: bind_norm(ctx, &format!("{prefix}.norm1"))?,
        qkv: bind_linear(ctx, &format!("{prefix}.attn.qkv"))?,
        proj: bind_linear(ctx, &format!("{prefix}.attn.proj"))?,
        norm2: bind_norm(ctx, &format!("{prefix}.norm2"))?,
        fc1: bind_linear(ctx, &format!("{prefix}.mlp.fc1"))?,
        fc2: bind_linear(ctx, &format!("{prefix}.mlp.fc2"))?,
    })
}

pub fn block_specs(prefix: &str, d: usize, mlp: usize) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    v.extend(norm_specs(&format!("{prefix}.norm1"), d));
    v.extend(linear_specs(&format!("{prefix}.attn.qkv"), d, 3 * d, false));
    v.extend(linear_specs(&format!("{prefix}.attn.proj"), d, d, false));
    v.extend(norm_specs(&format!("{prefix}.norm2"), d));
    v.extend(linear_specs(&format!("{prefix}.mlp.fc1"), d, mlp, false));
    v.extend(linear_specs(&format!("{prefix}.mlp.fc2"), mlp, d, false));
    v
}

pub struct EncoderOut {
    pub out: Var,
    /// Per-head `N×N` attention probabilities.
    pub attn: Vec<Var>,
}

/// `h + MHSA(LN(h))`, then `+ MLP(LN(·))`, joint attention over all tokens.
pub fn encoder_layer(g: &mut Graph, h: Var, p: &BlockParams, num_heads: usize) -> Result<EncoderOut> {
    let d = match *g.shape(h) {
        [_, d] => d,
        ref s => return Err(Error::shape("encoder_layer", "[N, D]", format!("{s:?}"))),
    };
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::config(format!("embed dim {d} not divisible by {num_heads} heads")));
    }
    let dh = d / num_heads;
    let x = p.norm1.apply(g, h)?;
    let qkv = p.qkv.apply(g, x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    let mut attn = Vec::with_capacity(num_heads);
    for i in 0..num_heads {
        let q = g.slice(qkv, 1, i * dh, dh)?;
        let k = g.slice(qkv, 1, d + i * dh, dh)?;
        let v = g.slice(qkv, 1, 2 * d + i * dh, dh)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax(s, 1)?;
        heads.push(g.matmul(a, v)?);
        attn.push(a);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    let o = p.proj.apply(g, cat)?;
    let h = g.add(h, o)?;
    let x = p.norm2.apply(g, h)?;
    let x = p.fc1.apply(g, x)?;
    let x = g.gelu(x)?;
    let x = p.fc2.apply(g, x)?;
    let out = g.add(h, x)?;
    Ok(EncoderOut { out, attn })
}

pub struct BackboneParams {
    pub blocks: Vec<BlockParams>,
    pub norm: Norm,
}

pub fn bind_backbone(ctx: &mut Ctx<'_>, cfg: &ModelConfig, m: Modality) -> Result<BackboneParams> {
    let prefix = backbone_prefix(cfg, m);
    let blocks = (0..cfg.num_layers)
        .map(|l| bind_block(ctx, &format!("{prefix}.blocks.{l}")))
        .collect::<Result<_>>()?;
    Ok(BackboneParams {
        blocks,
        norm: bind_norm(ctx, &format!("{prefix}.norm"))?,
    })
}

pub fn backbone_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let prefixes: Vec<String> = if cfg.share_backbone {
        vec!["backbone".into()]
    } else {
        vec!["backbone.rgb".into(), "backbone.tir".into()]
    };
    let d = cfg.embed_dim;
    let mut v = Vec::new();
    for prefix in prefixes {
        v.push(ParamSpec::new(format!("{prefix}.pos_z"), [cfg.n_template(), d], Init::Normal(0.02)));
        v.push(ParamSpec::new(format!("{prefix}.pos_x"), [cfg.n_search(), d], Init::Normal(0.02)));
        for l in 0..cfg.num_layers {
            v.extend(block_specs(&format!("{prefix}.blocks.{l}"), d, cfg.mlp_dim()));
        }
        v.extend(norm_specs(&format!("{prefix}.norm"), d));
    }
    v
}

pub fn prompt_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    if !cfg.flags.use_mvip {
        return Vec::new();
    }
    let opts = PromptOptions::from_config(cfg);
    let (n, r, l0) = (cfg.n_tokens(), cfg.reduction_ratio, cfg.fovea_init);
    let mut v = Vec::new();
    for dir in ["into_rgb", "into_tir"] {
        v.extend(prompter_specs(&format!("prompt.init.{dir}"), n, r, false, l0, &opts));
    }
    for l in 0..cfg.num_layers {
        for dir in ["into_rgb", "into_tir"] {
            v.extend(prompter_specs(&format!("prompt.layers.{l}.{dir}"), n, r, true, l0, &opts));
        }
    }
    v
}

/// Outputs of the dual-branch backbone.
pub struct DualOutput {
    pub rgb: TokenSeq,
    pub tir: TokenSeq,
    /// Attention probabilities `(rgb, tir)` at the captured layer.
    pub attn: Option<(Vec<Var>, Vec<Var>)>,
}

fn check_branches(g: &Graph, a: &TokenSeq, b: &TokenSeq) -> Result<()> {
    if g.shape(a.tokens) != g.shape(b.tokens) || a.n_z != b.n_z {
        return Err(Error::shape(
            "dual_forward",
            format!("{:?}", g.shape(a.tokens)),
            format!("{:?}", g.shape(b.tokens)),
        ));
    }
    Ok(())
}

/// The mutual-prompt recursion over both branches. `capture` selects a
/// (zero-based) layer whose attention maps are returned.
pub fn dual_forward(ctx: &mut Ctx<'_>, cfg: &ModelConfig, rgb: &TokenSeq, tir: &TokenSeq, capture: Option<usize>) -> Result<DualOutput> {
    check_branches(&ctx.g, rgb, tir)?;
    if let Some(c) = capture {
        if c >= cfg.num_layers {
            return Err(Error::config(format!("layer {c} out of range (model has {})", cfg.num_layers)));
        }
    }
    let bb_rgb = bind_backbone(ctx, cfg, Modality::Rgb)?;
    let bb_tir = bind_backbone(ctx, cfg, Modality::Tir)?;
    let opts = PromptOptions::from_config(cfg);
    let use_mvip = cfg.flags.use_mvip;

    let mut h_r = rgb.tokens;
    let mut h_t = tir.tokens;
    let mut prompts: Option<(Var, Var)> = None;
    if use_mvip {
        let pr = bind_prompter(ctx, "prompt.init.into_rgb", false, &opts)?;
        let pt = bind_prompter(ctx, "prompt.init.into_tir", false, &opts)?;
        let p_r = imvip(&mut ctx.g, h_r, h_t, &pr, &opts)?;
        let p_t = imvip(&mut ctx.g, h_t, h_r, &pt, &opts)?;
        h_r = ctx.g.add(h_r, p_r)?;
        h_t = ctx.g.add(h_t, p_t)?;
        prompts = Some((p_r, p_t));
    }
    let mut attn = None;
    for l in 0..cfg.num_layers {
        let layer_prompters: Option<(PrompterParams, PrompterParams)> = if use_mvip {
            Some((
                bind_prompter(ctx, &format!("prompt.layers.{l}.into_rgb"), true, &opts)?,
                bind_prompter(ctx, &format!("prompt.layers.{l}.into_tir"), true, &opts)?,
            ))
        } else {
            None
        };
        let e_r = encoder_layer(&mut ctx.g, h_r, &bb_rgb.blocks[l], cfg.num_heads)?;
        let e_t = encoder_layer(&mut ctx.g, h_t, &bb_tir.blocks[l], cfg.num_heads)?;
        if capture == Some(l) {
            attn = Some((e_r.attn.clone(), e_t.attn.clone()));
        }
        let (next_r, next_t) = match (layer_prompters, prompts) {
            (Some((pr, pt)), Some((p_r, p_t))) => {
                let np_r = mvip(&mut ctx.g, h_r, p_r, h_t, &pr, &opts)?;
                let np_t = mvip(&mut ctx.g, h_t, p_t, h_r, &pt, &opts)?;
                prompts = Some((np_r, np_t));
                (ctx.g.add(e_r.out, np_r)?, ctx.g.add(e_t.out, np_t)?)
            }
            _ => (e_r.out, e_t.out),
        };
        h_r = next_r;
        h_t = next_t;
    }
    let h_r = bb_rgb.norm.apply(&mut ctx.g, h_r)?;
    let h_t = bb_tir.norm.apply(&mut ctx.g, h_t)?;
    Ok(DualOutput {
        rgb: rgb.with_tokens(h_r),
        tir: tir.with_tokens(h_t),
        attn,
    })
}

/// Plain `L`-layer backbone over one branch, no prompting.
pub fn single_forward(ctx: &mut Ctx<'_>, cfg: &ModelConfig, h: &TokenSeq) -> Result<TokenSeq> {
    let bb = bind_backbone(ctx, cfg, h.modality)?;
    let mut x = h.tokens;
    for block in &bb.blocks {
        x = encoder_layer(&mut ctx.g, x, block, cfg.num_heads)?.out;
    }
    let x = bb.norm.apply(&mut ctx.g, x)?;
    Ok(h.with_tokens(x))
}

pub fn fuse_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    linear_specs("fuse", 2 * cfg.embed_dim, cfg.embed_dim, false).to_vec()
}

/// Column-wise concatenation `N×2D`, then the affine reduction to `N×D`.
pub fn fuse_reduce(ctx: &mut Ctx<'_>, rgb: &TokenSeq, tir: &TokenSeq) -> Result<TokenSeq> {
    check_branches(&ctx.g, rgb, tir)?;
    let cat = ctx.g.concat(&[rgb.tokens, tir.tokens], 1)?;
    let dr = bind_linear(ctx, "fuse")?;
    let tokens = dr.apply(&mut ctx.g, cat)?;
    Ok(TokenSeq {
        tokens,
        modality: Modality::Fused,
        ..*rgb
    })
}
