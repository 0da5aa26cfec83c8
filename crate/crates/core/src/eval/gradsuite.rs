//! The gradient-check suite: every graph operation, then the end-to-end
//! training loss of a toy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Activation, Graph, ReduceKind, Var};
use crate::bbox::BBox;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::image::{Image, Pair};
use crate::model::loss::compute_loss;
use crate::model::params::Ctx;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < TOLERANCE
    }
}

type Check = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Random values kept at least `gap` away from zero, so kinks at 0 are not
/// straddled by the finite-difference step.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng).map(|v| v + gap * v.signum())
}

/// Weighted sum so every output element carries a distinct gradient.
fn project(g: &mut Graph, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng);
    let w = g.input(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn op_checks(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Check)> {
    let r = |s: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(s.to_vec(), 1.0, rng);
    let pos = |s: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(s.to_vec(), 0.3, rng).map(|v| v.abs() + 0.5);
    let mut v: Vec<(&'static str, Vec<Tensor>, Check)> = Vec::new();
    v.push(("matmul", vec![r(&[3, 4], rng), r(&[4, 5], rng)], Box::new(|g, x| {
        let y = g.matmul(x[0], x[1])?;
        project(g, y, 1)
    })));
    v.push(("transpose", vec![r(&[3, 5], rng)], Box::new(|g, x| {
        let y = g.transpose(x[0])?;
        project(g, y, 2)
    })));
    v.push(("add_broadcast", vec![r(&[3, 4], rng), r(&[1, 4], rng)], Box::new(|g, x| {
        let y = g.add(x[0], x[1])?;
        project(g, y, 3)
    })));
    v.push(("sub_broadcast", vec![r(&[3, 4], rng), r(&[3, 1], rng)], Box::new(|g, x| {
        let y = g.sub(x[0], x[1])?;
        project(g, y, 4)
    })));
    v.push(("mul_broadcast", vec![r(&[3, 4], rng), r(&[1, 4], rng)], Box::new(|g, x| {
        let y = g.mul(x[0], x[1])?;
        project(g, y, 5)
    })));
    v.push(("div", vec![r(&[3, 4], rng), pos(&[3, 4], rng)], Box::new(|g, x| {
        let y = g.div(x[0], x[1])?;
        project(g, y, 6)
    })));
    let a = r(&[3, 4], rng);
    let b = a.map(|v| v + if v > 0.0 { -0.5 } else { 0.5 });
    v.push(("maximum_minimum", vec![a, b], Box::new(|g, x| {
        let hi = g.maximum(x[0], x[1])?;
        let lo = g.minimum(x[0], x[1])?;
        let y = g.concat(&[hi, lo], 0)?;
        project(g, y, 7)
    })));
    v.push(("scale_neg_add_scalar", vec![r(&[2, 3], rng)], Box::new(|g, x| {
        let a = g.scale(x[0], 1.7)?;
        let b = g.neg(a)?;
        let y = g.add_scalar(b, 0.3)?;
        project(g, y, 8)
    })));
    v.push(("exp_ln", vec![pos(&[2, 3], rng)], Box::new(|g, x| {
        let a = g.exp(x[0])?;
        let b = g.ln(x[0])?;
        let y = g.add(a, b)?;
        project(g, y, 9)
    })));
    v.push(("abs", vec![away_from_zero(&[2, 3], 0.1, rng)], Box::new(|g, x| {
        let y = g.abs(x[0])?;
        project(g, y, 10)
    })));
    for (name, act) in [
        ("relu", Activation::Relu),
        ("gelu", Activation::Gelu),
        ("sigmoid", Activation::Sigmoid),
    ] {
        v.push((name, vec![away_from_zero(&[3, 3], 0.1, rng)], Box::new(move |g, x| {
            let y = g.activation(x[0], act)?;
            project(g, y, 11)
        })));
    }
    v.push(("clamp", vec![away_from_zero(&[3, 3], 0.1, rng).map(|v| v * 0.4)], Box::new(|g, x| {
        let y = g.clamp(x[0], -0.3, 0.3)?;
        project(g, y, 12)
    })));
    for axis in [0, 1] {
        v.push((if axis == 0 { "softmax_axis0" } else { "softmax_axis1" }, vec![r(&[3, 4], rng)], Box::new(move |g, x| {
            let y = g.softmax(x[0], axis)?;
            project(g, y, 13)
        })));
    }
    v.push(("layer_norm", vec![r(&[3, 5], rng), r(&[5], rng), r(&[5], rng)], Box::new(|g, x| {
        let y = g.layer_norm(x[0], x[1], x[2], 1e-6)?;
        project(g, y, 14)
    })));
    for (name, kind) in [
        ("reduce_mean", ReduceKind::Mean),
        ("reduce_max", ReduceKind::Max),
    ] {
        for axis in [0, 1] {
            v.push((name, vec![r(&[4, 3], rng)], Box::new(move |g, x| {
                let y = g.reduce(x[0], axis, kind)?;
                project(g, y, 15)
            })));
        }
    }
    v.push(("sum", vec![r(&[2, 3], rng)], Box::new(|g, x| {
        let y = g.sum(x[0])?;
        g.scale(y, 1.3)
    })));
    v.push(("affine", vec![r(&[4, 3], rng), r(&[3, 5], rng), r(&[5], rng)], Box::new(|g, x| {
        let y = g.affine(x[0], x[1], Some(x[2]))?;
        project(g, y, 16)
    })));
    v.push(("conv1d", vec![r(&[2, 9], rng), r(&[1, 2, 7], rng), r(&[1], rng)], Box::new(|g, x| {
        let y = g.conv1d(x[0], x[1], Some(x[2]))?;
        project(g, y, 17)
    })));
    v.push(("conv2d_3x3", vec![r(&[2, 4, 4], rng), r(&[3, 2, 3, 3], rng), r(&[3], rng)], Box::new(|g, x| {
        let y = g.conv2d(x[0], x[1], Some(x[2]))?;
        project(g, y, 18)
    })));
    v.push(("conv2d_1x1", vec![r(&[2, 3, 3], rng), r(&[2, 2, 1, 1], rng), r(&[2], rng)], Box::new(|g, x| {
        let y = g.conv2d(x[0], x[1], Some(x[2]))?;
        project(g, y, 19)
    })));
    v.push(("concat_slice_reshape", vec![r(&[2, 3], rng), r(&[2, 2], rng)], Box::new(|g, x| {
        let c = g.concat(&[x[0], x[1]], 1)?;
        let s = g.slice(c, 1, 1, 3)?;
        let y = g.reshape(s, &[3, 2])?;
        project(g, y, 20)
    })));
    v.push(("gather", vec![r(&[6], rng)], Box::new(|g, x| {
        let y = g.gather(x[0], &[4, 1, 1, 5])?;
        project(g, y, 21)
    })));
    v
}

/// Loss of a toy model with every parameter perturbed away from its
/// initialization, so that all prompter paths are active.
fn end_to_end(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = ModelConfig::gradcheck_toy();
    let mut model = Model::new(cfg.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37);
    for (_, t) in model.params_mut().iter_mut() {
        let noise = Tensor::randn(t.shape().to_vec(), 0.05, &mut rng);
        t.add_assign(&noise);
    }
    let img = |s: crate::model::config::Size2, rng: &mut ChaCha8Rng| Image::new(s.w, s.h, Tensor::randn([s.h * s.w * 3], 1.0, rng).into_data());
    let z = Pair::new(img(cfg.template_size, &mut rng)?, img(cfg.template_size, &mut rng)?);
    let x = Pair::new(img(cfg.search_size, &mut rng)?, img(cfg.search_size, &mut rng)?);
    let side = cfg.search_size.w as f64;
    let gt = BBox::from_center(side * rng.gen_range(0.3..0.7), side * rng.gen_range(0.3..0.7), side * 0.4, side * 0.3);
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let values: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let model = &model;
    grad_check(
        |g, vars| {
            let bound = names.iter().map(String::as_str).zip(vars.iter().copied());
            let mut ctx = Ctx::preset(model.params(), std::mem::take(g), bound);
            let out = model
                .forward(&mut ctx, z.as_ref(), x.as_ref(), None)
                .and_then(|f| compute_loss(&mut ctx.g, &f.head, &gt, &cfg));
            *g = ctx.g;
            Ok(out?.total)
        },
        &values,
        opts,
    )
}

/// Runs every check. `max_per_tensor` bounds the end-to-end cost.
pub fn run_suite(seed: u64, max_per_tensor: Option<usize>) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut out = Vec::new();
    for (name, params, f) in op_checks(&mut rng) {
        let report = grad_check(|g, v| f(g, v), &params, &opts)?;
        out.push(SuiteEntry {
            name: name.to_string(),
            report,
        });
    }
    let report = end_to_end(&GradCheckOptions {
        max_per_tensor,
        ..opts
    })?;
    out.push(SuiteEntry {
        name: "end_to_end_loss".into(),
        report,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (name, params, f) in op_checks(&mut rng) {
            let rep = grad_check(|g, v| f(g, v), &params, &GradCheckOptions::default()).unwrap();
            assert!(rep.max_rel_err < TOLERANCE, "{name}: {rep:?}");
        }
    }

    #[test]
    fn end_to_end_sampled() {
        let rep = end_to_end(&GradCheckOptions {
            max_per_tensor: Some(3),
            ..GradCheckOptions::default()
        })
        .unwrap();
        assert!(rep.max_rel_err < TOLERANCE, "{rep:?}");
        assert!(rep.checked > 100);
    }
}
