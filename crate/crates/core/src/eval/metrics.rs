//! Center location error, precision and success curves.

use std::fmt::Write as _;

use crate::bbox::BBox;
use crate::error::{Error, Result};

pub const PRECISION_THRESHOLD: f64 = 20.0;
/// Success thresholds `0, 0.05, …, 1`.
pub const SUCCESS_STEPS: usize = 21;
/// Precision curve thresholds `0..=50` px.
pub const PRECISION_STEPS: usize = 51;

pub fn cle(a: &BBox, b: &BBox) -> f64 {
    a.center_distance(b)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

fn check_lengths(pred: &[BBox], gt: &[BBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::config(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_STEPS).map(|i| i as f64 / (SUCCESS_STEPS - 1) as f64).collect()
}

/// Fraction of frames with `cle ≤ tau`. An empty track scores 0.
pub fn precision_at(pred: &[BBox], gt: &[BBox], tau: f64) -> Result<f64> {
    check_lengths(pred, gt)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| cle(p, g) <= tau).count();
    Ok(hits as f64 / pred.len() as f64)
}

pub fn precision_rate(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    precision_at(pred, gt, PRECISION_THRESHOLD)
}

/// `success(t)` = fraction of frames with `iou ≥ t`, per threshold.
pub fn success_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(pred, gt)?;
    if pred.is_empty() {
        return Ok(vec![0.0; SUCCESS_STEPS]);
    }
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let n = ious.len() as f64;
    Ok(success_thresholds()
        .into_iter()
        .map(|t| ious.iter().filter(|&&v| v >= t).count() as f64 / n)
        .collect())
}

/// Mean of the 21-point success curve.
pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    let c = success_curve(pred, gt)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

pub fn precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<(f64, f64)>> {
    (0..PRECISION_STEPS)
        .map(|t| Ok((t as f64, precision_at(pred, gt, t as f64)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScore {
    pub name: String,
    pub frames: usize,
    pub pr: f64,
    pub sr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Over all frames of all sequences.
    pub pr: f64,
    pub sr: f64,
    pub precision: Vec<(f64, f64)>,
    pub success: Vec<(f64, f64)>,
    pub sequences: Vec<SequenceScore>,
    pub fps: Option<f64>,
}

/// Pools frames across `(name, pred, gt)` sequences.
pub fn evaluate(seqs: &[(String, Vec<BBox>, Vec<BBox>)], fps: Option<f64>) -> Result<EvalReport> {
    let mut all_p = Vec::new();
    let mut all_g = Vec::new();
    let mut sequences = Vec::new();
    for (name, p, g) in seqs {
        check_lengths(p, g)?;
        sequences.push(SequenceScore {
            name: name.clone(),
            frames: p.len(),
            pr: precision_rate(p, g)?,
            sr: success_auc(p, g)?,
        });
        all_p.extend_from_slice(p);
        all_g.extend_from_slice(g);
    }
    let success = success_thresholds().into_iter().zip(success_curve(&all_p, &all_g)?).collect();
    Ok(EvalReport {
        pr: precision_rate(&all_p, &all_g)?,
        sr: success_auc(&all_p, &all_g)?,
        precision: precision_curve(&all_p, &all_g)?,
        success,
        sequences,
        fps,
    })
}

/// `threshold,value` lines.
pub fn curve_text(curve: &[(f64, f64)]) -> String {
    let mut s = String::new();
    for (t, v) in curve {
        let _ = writeln!(s, "{t:.2},{v:.6}");
    }
    s
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = format!("PR {:.4}  SR {:.4}\n", self.pr, self.sr);
        for q in &self.sequences {
            let _ = writeln!(s, "  {:<24} frames {:>5}  PR {:.4}  SR {:.4}", q.name, q.frames, q.pr, q.sr);
        }
        if let Some(fps) = self.fps {
            let _ = writeln!(s, "  {fps:.2} frames/s");
        }
        s
    }
}
