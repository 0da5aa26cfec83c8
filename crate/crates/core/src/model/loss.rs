//! Focal loss on a Gaussian target map plus GIoU and L1 box terms.

use crate::autograd::{Graph, Var};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::head::HeadOutput;
use crate::tensor::Tensor;

pub const GIOU_WEIGHT: f64 = 2.0;
pub const L1_WEIGHT: f64 = 5.0;
const MIN_OVERLAP: f64 = 0.7;
const PROB_CLAMP: f64 = 1e-4;

pub struct Loss {
    pub total: Var,
    pub focal: f64,
    /// `1 − GIoU`.
    pub giou: f64,
    pub l1: f64,
}

/// Largest Gaussian radius keeping IoU ≥ `min_overlap` for corner jitter
/// (CenterNet's three-case bound), in grid cells.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let root = |a: f64, b: f64, c: f64| (b + (b * b - 4.0 * a * c).sqrt()) / 2.0;
    let r1 = root(1.0, h + w, w * h * (1.0 - min_overlap) / (1.0 + min_overlap));
    let r2 = root(4.0, 2.0 * (h + w), (1.0 - min_overlap) * w * h);
    let r3 = root(4.0 * min_overlap, -2.0 * min_overlap * (h + w), (min_overlap - 1.0) * w * h);
    r1.min(r2).min(r3)
}

/// Grid cell holding the center of `gt` (search-region pixels), clamped.
pub fn target_cell(gt: &BBox, cfg: &ModelConfig) -> (usize, usize) {
    let g = cfg.grid();
    let stride = cfg.patch_size as f64;
    let (cx, cy) = gt.center();
    let c = |v: f64| ((v / stride).floor().max(0.0) as usize).min(g - 1);
    (c(cy), c(cx))
}

/// `G×G` target heat map: a truncated Gaussian with peak exactly 1 at the
/// target cell.
pub fn target_map(gt: &BBox, cfg: &ModelConfig) -> Tensor {
    let g = cfg.grid();
    let stride = cfg.patch_size as f64;
    let r = gaussian_radius(gt.h / stride, gt.w / stride, MIN_OVERLAP).max(0.0).floor() as i64;
    let sigma = (2 * r + 1) as f64 / 6.0;
    let (ci, cj) = target_cell(gt, cfg);
    let mut t = Tensor::zeros([g, g]);
    for di in -r..=r {
        for dj in -r..=r {
            let (i, j) = (ci as i64 + di, cj as i64 + dj);
            if i < 0 || j < 0 || i >= g as i64 || j >= g as i64 {
                continue;
            }
            let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
            if v < f64::EPSILON {
                continue;
            }
            let off = i as usize * g + j as usize;
            t.data_mut()[off] = v;
        }
    }
    t
}

/// Penalty-reduced focal loss, `α = 2`, `β = 4`, normalized by the number of
/// positive cells.
pub fn focal_loss(g: &mut Graph, score: Var, target: &Tensor) -> Result<Var> {
    let n = target.numel();
    if g.value(score).numel() != n {
        return Err(Error::shape("focal_loss", format!("{:?}", target.shape()), format!("{:?}", g.shape(score))));
    }
    let pos: Vec<f64> = target.data().iter().map(|&t| if t == 1.0 { 1.0 } else { 0.0 }).collect();
    let num_pos = pos.iter().sum::<f64>().max(1.0);
    let neg: Vec<f64> = target
        .data()
        .iter()
        .zip(&pos)
        .map(|(&t, &p)| (1.0 - p) * (1.0 - t).powi(4))
        .collect();
    let shape = g.shape(score).to_vec();
    let pos = g.input(Tensor::new(shape.clone(), pos)?);
    let neg = g.input(Tensor::new(shape, neg)?);
    let p = g.clamp(score, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let q = g.neg(p)?;
    let q = g.add_scalar(q, 1.0)?;
    let lp = g.ln(p)?;
    let lq = g.ln(q)?;
    let q2 = g.mul(q, q)?;
    let p2 = g.mul(p, p)?;
    let a = g.mul(lp, q2)?;
    let a = g.mul(a, pos)?;
    let b = g.mul(lq, p2)?;
    let b = g.mul(b, neg)?;
    let s = g.add(a, b)?;
    let s = g.sum(s)?;
    g.scale(s, -1.0 / num_pos)
}

/// Normalized `(x1, y1, x2, y2)` of the prediction at `cell`.
fn predicted_xyxy(g: &mut Graph, out: &HeadOutput, cell: (usize, usize), grid: usize) -> Result<[Var; 4]> {
    let flat = cell.0 * grid + cell.1;
    let plane = grid * grid;
    let off = g.gather(out.offset, &[flat, plane + flat])?;
    let size = g.gather(out.size, &[flat, plane + flat])?;
    let ox = g.slice(off, 0, 0, 1)?;
    let oy = g.slice(off, 0, 1, 1)?;
    let w = g.slice(size, 0, 0, 1)?;
    let h = g.slice(size, 0, 1, 1)?;
    let inv = 1.0 / grid as f64;
    let cx = g.add_scalar(ox, cell.1 as f64 + 0.5)?;
    let cx = g.scale(cx, inv)?;
    let cy = g.add_scalar(oy, cell.0 as f64 + 0.5)?;
    let cy = g.scale(cy, inv)?;
    let hw = g.scale(w, 0.5)?;
    let hh = g.scale(h, 0.5)?;
    Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
}

/// GIoU between a graph box and a constant box, both `(x1, y1, x2, y2)`.
fn giou_var(g: &mut Graph, p: [Var; 4], t: [f64; 4]) -> Result<Var> {
    let c: Vec<Var> = t.iter().map(|&v| g.scalar(v)).collect();
    let iw = {
        let a = g.minimum(p[2], c[2])?;
        let b = g.maximum(p[0], c[0])?;
        let d = g.sub(a, b)?;
        g.relu(d)?
    };
    let ih = {
        let a = g.minimum(p[3], c[3])?;
        let b = g.maximum(p[1], c[1])?;
        let d = g.sub(a, b)?;
        g.relu(d)?
    };
    let inter = g.mul(iw, ih)?;
    let pw = g.sub(p[2], p[0])?;
    let ph = g.sub(p[3], p[1])?;
    let pa = g.mul(pw, ph)?;
    let ta = (t[2] - t[0]) * (t[3] - t[1]);
    let union = g.add_scalar(pa, ta)?;
    let union = g.sub(union, inter)?;
    let ew = {
        let a = g.maximum(p[2], c[2])?;
        let b = g.minimum(p[0], c[0])?;
        g.sub(a, b)?
    };
    let eh = {
        let a = g.maximum(p[3], c[3])?;
        let b = g.minimum(p[1], c[1])?;
        g.sub(a, b)?
    };
    let enc = g.mul(ew, eh)?;
    let iou = g.div(inter, union)?;
    let gap = g.sub(enc, union)?;
    let gap = g.div(gap, enc)?;
    g.sub(iou, gap)
}

/// Total training loss for one search region; `gt` in search-region pixels.
/// Box terms are evaluated at the ground-truth center cell.
pub fn compute_loss(g: &mut Graph, out: &HeadOutput, gt: &BBox, cfg: &ModelConfig) -> Result<Loss> {
    if !gt.is_valid() {
        return Err(Error::config(format!("degenerate ground-truth box {gt:?}")));
    }
    let grid = cfg.grid();
    let target = target_map(gt, cfg);
    let focal = focal_loss(g, out.score, &target)?;
    let cell = target_cell(gt, cfg);
    let pred = predicted_xyxy(g, out, cell, grid)?;
    let (sw, sh) = (cfg.search_size.w as f64, cfg.search_size.h as f64);
    let t = [gt.x / sw, gt.y / sh, gt.x2() / sw, gt.y2() / sh];
    let giou = giou_var(g, pred, t)?;
    let giou_loss = g.neg(giou)?;
    let giou_loss = g.add_scalar(giou_loss, 1.0)?;
    let mut l1 = None;
    for k in 0..4 {
        let d = g.add_scalar(pred[k], -t[k])?;
        let d = g.abs(d)?;
        l1 = Some(match l1 {
            None => d,
            Some(acc) => g.add(acc, d)?,
        });
    }
    let l1 = g.scale(l1.expect("four terms"), 0.25)?;
    let a = g.scale(giou_loss, GIOU_WEIGHT)?;
    let b = g.scale(l1, L1_WEIGHT)?;
    let total = g.add(focal, a)?;
    let total = g.add(total, b)?;
    Ok(Loss {
        total,
        focal: g.value(focal).item(),
        giou: g.value(giou_loss).item(),
        l1: g.value(l1).item(),
    })
}
