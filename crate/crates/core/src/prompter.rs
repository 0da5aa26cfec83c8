//! Multi-modal visual information prompters.
//!
//! A prompter branch is an *attention stack*: token attention (per-token
//! weights from pooling along the feature axis) followed by spatial attention
//! (per-feature weights from pooling along the token axis, then a kernel-7
//! convolution). The layer prompter sums three branches, the current modality
//! (through the fovea), the other modality and the previous prompt; the
//! initial prompter drops the previous-prompt branch.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{Ctx, Init, ParamSpec};

/// Kernel length of the spatial-attention convolution.
pub const SPATIAL_KERNEL: usize = 7;

/// Which parts of a prompter run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptOptions {
    pub token_attn: bool,
    pub spatial_attn: bool,
    pub sigmoid: bool,
    pub fovea_on_other: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            token_attn: true,
            spatial_attn: true,
            sigmoid: false,
            fovea_on_other: false,
        }
    }
}

impl PromptOptions {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            token_attn: cfg.flags.use_token_attn,
            spatial_attn: cfg.flags.use_spatial_attn,
            sigmoid: cfg.attn_sigmoid,
            fovea_on_other: cfg.fovea_on_other,
        }
    }
}

/// `g_s1: N → N/r` and `g_s2: N/r → N`, shared by the mean and max paths.
#[derive(Clone, Copy, Debug)]
pub struct TokenAttnParams {
    pub s1_w: Var,
    pub s1_b: Var,
    pub s2_w: Var,
    pub s2_b: Var,
}

/// `g_t`: kernel-7 convolution from the {mean, max} rows to one row.
#[derive(Clone, Copy, Debug)]
pub struct SpatialAttnParams {
    pub t_w: Var,
    pub t_b: Var,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BranchParams {
    pub token: Option<TokenAttnParams>,
    pub spatial: Option<SpatialAttnParams>,
}

#[derive(Clone, Copy, Debug)]
pub struct PrompterParams {
    pub cur: BranchParams,
    pub other: BranchParams,
    /// Absent for the initial prompter.
    pub prev: Option<BranchParams>,
    /// Fovea sharpness, shape `[1]`.
    pub lambda: Var,
}

fn require_n(g: &Graph, h: Var, op: &'static str) -> Result<(usize, usize)> {
    match *g.shape(h) {
        [n, d] => Ok((n, d)),
        ref s => Err(Error::shape(op, "[N, D]", format!("{s:?}"))),
    }
}

/// Per-token weights `[N, 1]`.
pub fn token_weights(g: &mut Graph, h: Var, p: &TokenAttnParams, sigmoid: bool) -> Result<Var> {
    let (n, _) = require_n(g, h, "token_attention")?;
    let rows = g.shape(p.s1_w)[0];
    if rows != n {
        return Err(Error::shape("token_attention", format!("g_s1 weight [{n}, N/r]"), format!("{:?}", g.shape(p.s1_w))));
    }
    let avg = g.mean_axis(h, 1)?;
    let max = g.max_axis(h, 1)?;
    let pooled = g.concat(&[avg, max], 1)?;
    // rows: [mean path; max path], each 1×N
    let pooled = g.transpose(pooled)?;
    let z = g.affine(pooled, p.s1_w, Some(p.s1_b))?;
    let z = g.relu(z)?;
    let z = g.affine(z, p.s2_w, Some(p.s2_b))?;
    let a = g.slice(z, 0, 0, 1)?;
    let b = g.slice(z, 0, 1, 1)?;
    let w = g.add(a, b)?;
    let w = g.transpose(w)?;
    if sigmoid {
        g.sigmoid(w)
    } else {
        Ok(w)
    }
}

/// `h ⊙ W` with `W ∈ R^{N×1}` broadcast over D.
pub fn token_attention(g: &mut Graph, h: Var, p: &TokenAttnParams, sigmoid: bool) -> Result<Var> {
    let w = token_weights(g, h, p, sigmoid)?;
    g.mul(h, w)
}

/// Per-feature weights `[1, D]`.
pub fn spatial_weights(g: &mut Graph, h: Var, p: &SpatialAttnParams, sigmoid: bool) -> Result<Var> {
    require_n(g, h, "spatial_attention")?;
    let avg = g.mean_axis(h, 0)?;
    let max = g.max_axis(h, 0)?;
    let pooled = g.concat(&[avg, max], 0)?;
    let w = g.conv1d(pooled, p.t_w, Some(p.t_b))?;
    if sigmoid {
        g.sigmoid(w)
    } else {
        Ok(w)
    }
}

/// `h ⊙ W` with `W ∈ R^{1×D}` broadcast over N.
pub fn spatial_attention(g: &mut Graph, h: Var, p: &SpatialAttnParams, sigmoid: bool) -> Result<Var> {
    let w = spatial_weights(g, h, p, sigmoid)?;
    g.mul(h, w)
}

fn missing(stage: &str) -> Error {
    Error::config(format!("{stage} enabled but its parameters are not bound"))
}

/// Token attention then spatial attention; a disabled stage is the identity.
pub fn attention_stack(g: &mut Graph, h: Var, p: &BranchParams, opts: &PromptOptions) -> Result<Var> {
    let mut x = h;
    if opts.token_attn {
        let tp = p.token.as_ref().ok_or_else(|| missing("token attention"))?;
        x = token_attention(g, x, tp, opts.sigmoid)?;
    }
    if opts.spatial_attn {
        let sp = p.spatial.as_ref().ok_or_else(|| missing("spatial attention"))?;
        x = spatial_attention(g, x, sp, opts.sigmoid)?;
    }
    Ok(x)
}

/// Column-wise softmax mask over N of `λ·h`.
pub fn fovea_mask(g: &mut Graph, h: Var, lambda: Var) -> Result<Var> {
    require_n(g, h, "fovea")?;
    let l = g.reshape(lambda, &[1, 1])?;
    let scaled = g.mul(h, l)?;
    g.softmax(scaled, 0)
}

pub fn fovea(g: &mut Graph, h: Var, lambda: Var) -> Result<Var> {
    let mask = fovea_mask(g, h, lambda)?;
    g.mul(mask, h)
}

/// Per-branch outputs of one prompter evaluation, before summation.
#[derive(Clone, Copy, Debug)]
pub struct PromptTerms {
    pub cur: Var,
    pub other: Var,
    pub prev: Option<Var>,
}

fn check_pair(g: &Graph, a: Var, b: Var, op: &'static str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, format!("{:?}", g.shape(a)), format!("{:?}", g.shape(b))));
    }
    Ok(())
}

pub fn prompt_terms(
    g: &mut Graph,
    h_cur: Var,
    p_prev: Option<Var>,
    h_other: Var,
    params: &PrompterParams,
    opts: &PromptOptions,
) -> Result<PromptTerms> {
    check_pair(g, h_cur, h_other, "prompter")?;
    let mut cur = attention_stack(g, h_cur, &params.cur, opts)?;
    let mut other = attention_stack(g, h_other, &params.other, opts)?;
    if opts.fovea_on_other {
        other = fovea(g, other, params.lambda)?;
    } else {
        cur = fovea(g, cur, params.lambda)?;
    }
    let prev = match (p_prev, params.prev.as_ref()) {
        (Some(p), Some(bp)) => {
            check_pair(g, h_cur, p, "prompter")?;
            Some(attention_stack(g, p, bp, opts)?)
        }
        (None, None) => None,
        _ => return Err(Error::config("previous prompt and its branch parameters must be given together")),
    };
    Ok(PromptTerms { cur, other, prev })
}

fn sum_terms(g: &mut Graph, t: PromptTerms) -> Result<Var> {
    let s = g.add(t.cur, t.other)?;
    match t.prev {
        Some(p) => g.add(s, p),
        None => Ok(s),
    }
}

/// Layer prompter: `fovea(stack(h_cur)) + stack(h_other) + stack(p_prev)`.
pub fn mvip(
    g: &mut Graph,
    h_cur: Var,
    p_prev: Var,
    h_other: Var,
    params: &PrompterParams,
    opts: &PromptOptions,
) -> Result<Var> {
    if params.prev.is_none() {
        return Err(Error::config("layer prompter needs a previous-prompt branch"));
    }
    let t = prompt_terms(g, h_cur, Some(p_prev), h_other, params, opts)?;
    sum_terms(g, t)
}

/// Initial prompter: `fovea(stack(h_cur)) + stack(h_other)`.
pub fn imvip(g: &mut Graph, h_cur: Var, h_other: Var, params: &PrompterParams, opts: &PromptOptions) -> Result<Var> {
    let params = PrompterParams { prev: None, ..*params };
    let t = prompt_terms(g, h_cur, None, h_other, &params, opts)?;
    sum_terms(g, t)
}

fn branch_specs(prefix: &str, n: usize, r: usize, opts: &PromptOptions) -> Vec<ParamSpec> {
    let m = n / r;
    let mut v = Vec::new();
    if opts.token_attn {
        // With both stages active only the last one starts at zero; zeroing
        // both would leave every prompter gradient identically zero.
        let s2 = if opts.spatial_attn {
            Init::Xavier { fan_in: m, fan_out: n }
        } else {
            Init::Zeros
        };
        v.push(ParamSpec::new(format!("{prefix}.s1.weight"), [n, m], Init::Xavier { fan_in: n, fan_out: m }));
        v.push(ParamSpec::new(format!("{prefix}.s1.bias"), [m], Init::Zeros));
        v.push(ParamSpec::new(format!("{prefix}.s2.weight"), [m, n], s2));
        v.push(ParamSpec::new(format!("{prefix}.s2.bias"), [n], Init::Zeros));
    }
    if opts.spatial_attn {
        v.push(ParamSpec::new(format!("{prefix}.t.weight"), [1, 2, SPATIAL_KERNEL], Init::Zeros));
        v.push(ParamSpec::new(format!("{prefix}.t.bias"), [1], Init::Zeros));
    }
    v
}

/// Parameter specs of one prompter under `prefix`.
pub fn prompter_specs(prefix: &str, n: usize, r: usize, with_prev: bool, lambda0: f64, opts: &PromptOptions) -> Vec<ParamSpec> {
    let mut v = branch_specs(&format!("{prefix}.cur"), n, r, opts);
    v.extend(branch_specs(&format!("{prefix}.other"), n, r, opts));
    if with_prev {
        v.extend(branch_specs(&format!("{prefix}.prev"), n, r, opts));
    }
    v.push(ParamSpec::new(format!("{prefix}.lambda"), [1], Init::Const(lambda0)));
    v
}

fn bind_branch(ctx: &mut Ctx<'_>, prefix: &str, opts: &PromptOptions) -> Result<BranchParams> {
    let token = if opts.token_attn {
        Some(TokenAttnParams {
            s1_w: ctx.p(&format!("{prefix}.s1.weight"))?,
            s1_b: ctx.p(&format!("{prefix}.s1.bias"))?,
            s2_w: ctx.p(&format!("{prefix}.s2.weight"))?,
            s2_b: ctx.p(&format!("{prefix}.s2.bias"))?,
        })
    } else {
        None
    };
    let spatial = if opts.spatial_attn {
        Some(SpatialAttnParams {
            t_w: ctx.p(&format!("{prefix}.t.weight"))?,
            t_b: ctx.p(&format!("{prefix}.t.bias"))?,
        })
    } else {
        None
    };
    Ok(BranchParams { token, spatial })
}

pub fn bind_prompter(ctx: &mut Ctx<'_>, prefix: &str, with_prev: bool, opts: &PromptOptions) -> Result<PrompterParams> {
    Ok(PrompterParams {
        cur: bind_branch(ctx, &format!("{prefix}.cur"), opts)?,
        other: bind_branch(ctx, &format!("{prefix}.other"), opts)?,
        prev: if with_prev {
            Some(bind_branch(ctx, &format!("{prefix}.prev"), opts)?)
        } else {
            None
        },
        lambda: ctx.p(&format!("{prefix}.lambda"))?,
    })
}

/// Closed-form prompter parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrompterCount {
    /// One attention stack (`g_s1`, `g_s2`, `g_t`).
    pub branch: usize,
    /// One layer prompter: three branches plus λ.
    pub mvip: usize,
    /// The initial prompter: two branches plus λ.
    pub imvip: usize,
    /// Both directions of one layer.
    pub per_layer: usize,
    /// Every prompter in the model.
    pub total: usize,
}

pub fn prompter_param_count(cfg: &ModelConfig) -> PrompterCount {
    let n = cfg.n_tokens();
    let m = n / cfg.reduction_ratio;
    let token = if cfg.flags.use_token_attn { (n * m + m) + (m * n + n) } else { 0 };
    let spatial = if cfg.flags.use_spatial_attn { 2 * SPATIAL_KERNEL + 1 } else { 0 };
    let branch = token + spatial;
    let mvip = 3 * branch + 1;
    let imvip = 2 * branch + 1;
    let per_layer = 2 * mvip;
    let total = if cfg.flags.use_mvip {
        2 * imvip + cfg.num_layers * per_layer
    } else {
        0
    };
    PrompterCount {
        branch,
        mvip,
        imvip,
        per_layer,
        total,
    }
}
