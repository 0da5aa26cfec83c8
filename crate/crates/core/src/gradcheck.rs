//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many elements per parameter tensor (chosen at
    /// random with `seed`); `None` checks every element.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |g_ad − g_fd| / max(1, |g_fd|)` over all checked elements.
    pub max_rel_err: f64,
    /// `(tensor index, flat element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Evaluates `f` once on fresh parameter leaves and returns the scalar loss.
fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::shape("grad_check", "scalar output", format!("{:?}", g.shape(out))));
    }
    Ok((g, vars, out))
}

/// Compares the reverse-mode gradient of the scalar function `f` against
/// central finite differences at `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = evaluate(&f, params)?;
    let grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let n = params[ti].numel();
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[ti].shape().to_vec()));
        let elements: Vec<usize> = match opts.max_per_tensor {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for e in elements {
            let orig = params[ti].data()[e];
            work[ti].data_mut()[e] = orig + opts.step;
            let plus = evaluate(&f, &work)?;
            let fp = plus.0.value(plus.2).item();
            work[ti].data_mut()[e] = orig - opts.step;
            let minus = evaluate(&f, &work)?;
            let fm = minus.0.value(minus.2).item();
            work[ti].data_mut()[e] = orig;
            let fd = (fp - fm) / (2.0 * opts.step);
            let err = (analytic.data()[e] - fd).abs() / fd.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (ti, e);
            }
        }
    }
    Ok(report)
}
