//! Center-style localization head and box decoding.

use crate::autograd::{Graph, Var};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{Ctx, Init, ParamSpec};
use crate::model::vit::{Modality, TokenSeq, LN_EPS};
use crate::tensor::Tensor;
use crate::tracking::crop::CropGeometry;

pub const STACKS: [(&str, usize); 3] = [("score", 1), ("offset", 2), ("size", 2)];

/// Graph handles of the three maps.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[1, G, G]`, in (0, 1).
    pub score: Var,
    /// `[2, G, G]`, (x, y) sub-cell offsets.
    pub offset: Var,
    /// `[2, G, G]`, (w, h) as fractions of the search side, in (0, 1).
    pub size: Var,
}

/// Plain values of a [`HeadOutput`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps {
    pub score: Tensor,
    pub offset: Tensor,
    pub size: Tensor,
}

impl HeadOutput {
    pub fn maps(&self, g: &Graph) -> HeadMaps {
        HeadMaps {
            score: g.value(self.score).clone(),
            offset: g.value(self.offset).clone(),
            size: g.value(self.size).clone(),
        }
    }
}

impl HeadMaps {
    pub fn grid(&self) -> usize {
        self.score.shape()[1]
    }
}

pub fn head_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let widths = cfg.head_widths();
    let mut v = Vec::new();
    for (name, out) in STACKS {
        let mut cin = cfg.embed_dim;
        for (i, &c) in widths.iter().enumerate() {
            let p = format!("head.{name}.conv{}", i + 1);
            let init = Init::Xavier {
                fan_in: cin * 9,
                fan_out: c * 9,
            };
            v.push(ParamSpec::new(format!("{p}.weight"), [c, cin, 3, 3], init));
            v.push(ParamSpec::new(format!("{p}.bias"), [c], Init::Zeros));
            let n = format!("head.{name}.norm{}", i + 1);
            v.push(ParamSpec::new(format!("{n}.gain"), [c], Init::Const(1.0)));
            v.push(ParamSpec::new(format!("{n}.bias"), [c], Init::Zeros));
            cin = c;
        }
        let init = Init::Xavier { fan_in: cin, fan_out: out };
        v.push(ParamSpec::new(format!("head.{name}.out.weight"), [out, cin, 1, 1], init));
        // score logits start near a 0.1 prior
        let bias = if name == "score" { Init::Const(-2.19) } else { Init::Zeros };
        v.push(ParamSpec::new(format!("head.{name}.out.bias"), [out], bias));
    }
    v
}

/// LayerNorm over the channel axis of a `[C, H, W]` map, per position.
fn channel_norm(ctx: &mut Ctx<'_>, x: Var, prefix: &str) -> Result<Var> {
    let (c, h, w) = match *ctx.g.shape(x) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("channel_norm", "[C, H, W]", format!("{s:?}"))),
    };
    let gain = ctx.p(&format!("{prefix}.gain"))?;
    let bias = ctx.p(&format!("{prefix}.bias"))?;
    let g = &mut ctx.g;
    let flat = g.reshape(x, &[c, h * w])?;
    let t = g.transpose(flat)?;
    let n = g.layer_norm(t, gain, bias, LN_EPS)?;
    let back = g.transpose(n)?;
    g.reshape(back, &[c, h, w])
}

fn stack(ctx: &mut Ctx<'_>, x: Var, name: &str) -> Result<Var> {
    let mut y = x;
    for i in 1..=4 {
        let w = ctx.p(&format!("head.{name}.conv{i}.weight"))?;
        let b = ctx.p(&format!("head.{name}.conv{i}.bias"))?;
        y = ctx.g.conv2d(y, w, Some(b))?;
        y = channel_norm(ctx, y, &format!("head.{name}.norm{i}"))?;
        y = ctx.g.relu(y)?;
    }
    let w = ctx.p(&format!("head.{name}.out.weight"))?;
    let b = ctx.p(&format!("head.{name}.out.bias"))?;
    ctx.g.conv2d(y, w, Some(b))
}

/// Reshapes the search tokens to `D×G×G` and runs the three stacks.
pub fn head_forward(ctx: &mut Ctx<'_>, fused: &TokenSeq) -> Result<HeadOutput> {
    if fused.modality != Modality::Fused {
        return Err(Error::config(format!("head expects fused tokens, got {}", fused.modality.key())));
    }
    let gsz = (fused.n_x as f64).sqrt().round() as usize;
    if gsz * gsz != fused.n_x || gsz == 0 {
        return Err(Error::shape("head_forward", "square search token count", fused.n_x));
    }
    let d = ctx.g.shape(fused.tokens)[1];
    let x = ctx.g.slice(fused.tokens, 0, fused.n_z, fused.n_x)?;
    let x = ctx.g.transpose(x)?;
    let x = ctx.g.reshape(x, &[d, gsz, gsz])?;
    let score = stack(ctx, x, "score")?;
    let score = ctx.g.sigmoid(score)?;
    let offset = stack(ctx, x, "offset")?;
    let size = stack(ctx, x, "size")?;
    let size = ctx.g.sigmoid(size)?;
    Ok(HeadOutput { score, offset, size })
}

/// `0.5·(1 − cos(2πk/(G+1)))`, `k = 1..G`, as an outer product.
pub fn hanning(g: usize) -> Tensor {
    let w: Vec<f64> = (1..=g)
        .map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / (g + 1) as f64).cos()))
        .collect();
    Tensor::from_fn([g, g], |i| w[i / g] * w[i % g])
}

/// Grid cell `(row, col)` of the (optionally windowed) score maximum; first
/// index on ties.
pub fn peak_cell(score: &Tensor, window: bool) -> (usize, usize) {
    let g = score.shape()[score.rank() - 1];
    let win = window.then(|| hanning(g));
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &s) in score.data().iter().enumerate() {
        let v = win.as_ref().map_or(s, |w| s * w.data()[i]);
        if v > best.1 {
            best = (i, v);
        }
    }
    (best.0 / g, best.0 % g)
}

/// Box at the score peak, in frame coordinates through `geom`.
/// `center = (cell + 0.5 + offset)·stride`, `size = Z·search side`,
/// confidence is the unwindowed score at the chosen cell.
pub fn decode_box(maps: &HeadMaps, cfg: &ModelConfig, geom: &CropGeometry, window: bool) -> BBox {
    let g = maps.grid();
    let (i, j) = peak_cell(&maps.score, window);
    let cell = i * g + j;
    let plane = g * g;
    let stride = cfg.patch_size as f64;
    let cx = (j as f64 + 0.5 + maps.offset.data()[cell]) * stride;
    let cy = (i as f64 + 0.5 + maps.offset.data()[plane + cell]) * stride;
    let w = maps.size.data()[cell] * cfg.search_size.w as f64;
    let h = maps.size.data()[plane + cell] * cfg.search_size.h as f64;
    let conf = maps.score.data()[cell];
    geom.box_to_frame(&BBox::from_center(cx, cy, w, h)).with_confidence(conf)
}
