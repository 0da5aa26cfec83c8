//! The per-frame loop with confidence-gated template update and Kalman
//! correction.

use std::collections::VecDeque;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::{Image, Pair};
use crate::model::head::decode_box;
use crate::model::Model;
use crate::tracking::crop::{crop_region, CropGeometry};
use crate::tracking::kalman::{KalmanConfig, KalmanState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerConfig {
    /// Template re-crop fires when confidence is strictly above this.
    pub thr_a: f64,
    /// Kalman correction fires when confidence is strictly below this.
    pub thr_b: f64,
    /// Confidence history length.
    pub history: usize,
    pub template_context: f64,
    pub search_context: f64,
    pub kalman: KalmanConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            thr_a: 0.91,
            thr_b: 0.25,
            history: 16,
            template_context: 2.0,
            search_context: 4.0,
            kalman: KalmanConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.thr_b && self.thr_b < self.thr_a && self.thr_a <= 1.0) {
            return Err(Error::config(format!(
                "thresholds must satisfy 0 <= thr_b < thr_a <= 1, got thr_b {} and thr_a {}",
                self.thr_b, self.thr_a
            )));
        }
        if self.history == 0 {
            return Err(Error::config("confidence history must hold at least one frame"));
        }
        if !(self.template_context > 0.0 && self.search_context > 0.0) {
            return Err(Error::config("context factors must be positive"));
        }
        Ok(())
    }
}

/// Whether each gate may run. Mirrors the model's ablation flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateFlags {
    pub template_update: bool,
    pub kalman: bool,
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub config: TrackerConfig,
    pub flags: GateFlags,
    /// Standardized template crops.
    pub template: Pair<Image>,
    pub confidences: VecDeque<f64>,
    pub kalman: KalmanState,
    pub frame: usize,
    pub last: BBox,
}

/// What happened on one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput {
    /// Returned box, possibly replaced by the Kalman prediction.
    pub bbox: BBox,
    /// The network's decoded box.
    pub raw: BBox,
    pub corrected: bool,
    pub template_updated: bool,
}

fn check_aligned(frames: Pair<&Image>) -> Result<()> {
    if !frames.rgb.same_size(frames.tir) {
        return Err(Error::config(format!(
            "misaligned frames: rgb {}x{}, tir {}x{}",
            frames.rgb.width(),
            frames.rgb.height(),
            frames.tir.width(),
            frames.tir.height()
        )));
    }
    Ok(())
}

fn square_side(s: crate::model::config::Size2, what: &str) -> Result<usize> {
    if !s.is_square() {
        return Err(Error::config(format!("tracking needs a square {what}, got {}x{}", s.h, s.w)));
    }
    Ok(s.w)
}

/// Standardized crops of both modalities around `b`.
pub fn crop_pair(frames: Pair<&Image>, b: &BBox, context: f64, size: usize) -> Result<(Pair<Image>, CropGeometry)> {
    let (rgb, geom) = crop_region(frames.rgb, b, context, size)?;
    let (tir, _) = crop_region(frames.tir, b, context, size)?;
    Ok((Pair::new(rgb.standardized(), tir.standardized()), geom))
}

/// Crops templates at `init_box` and starts the filter at rest.
pub fn init_track(frames: Pair<&Image>, init_box: &BBox, model: &Model, config: &TrackerConfig) -> Result<TrackerState> {
    config.validate()?;
    check_aligned(frames)?;
    init_box.validate()?;
    let cfg = model.config();
    let side = square_side(cfg.template_size, "template")?;
    square_side(cfg.search_size, "search region")?;
    let (template, _) = crop_pair(frames, init_box, config.template_context, side)?;
    Ok(TrackerState {
        config: *config,
        flags: GateFlags {
            template_update: cfg.flags.use_template_update,
            kalman: cfg.flags.use_kalman,
        },
        template,
        confidences: VecDeque::with_capacity(config.history),
        kalman: KalmanState::from_box(init_box, &config.kalman)?,
        frame: 0,
        last: *init_box,
    })
}

impl TrackerState {
    fn record(&mut self, confidence: f64) {
        if self.confidences.len() == self.config.history {
            self.confidences.pop_front();
        }
        self.confidences.push_back(confidence);
    }

    /// Records the confidence, then the correction gate, then the template
    /// gate on the corrected box. `frames` may be `None` when no re-crop is
    /// wanted (policy-level use).
    pub fn apply_gates(&mut self, decoded: BBox, frames: Option<Pair<&Image>>, template_side: usize) -> Result<StepOutput> {
        self.record(decoded.confidence);
        let (bbox, corrected) = kf_correct_gate(self, &decoded)?;
        let template_updated = match frames {
            Some(f) => template_update_gate(self, f, &bbox, decoded.confidence, template_side)?,
            None => false,
        };
        self.last = bbox;
        Ok(StepOutput {
            bbox,
            raw: decoded,
            corrected,
            template_updated,
        })
    }
}

/// Replaces the templates with crops at `b` when `confidence > thr_a`.
pub fn template_update_gate(state: &mut TrackerState, frames: Pair<&Image>, b: &BBox, confidence: f64, side: usize) -> Result<bool> {
    if !state.flags.template_update || !(confidence > state.config.thr_a) || !b.is_valid() {
        return Ok(false);
    }
    let (template, _) = crop_pair(frames, b, state.config.template_context, side)?;
    state.template = template;
    Ok(true)
}

/// Advances the filter one frame. Below `thr_b`, with at least two recorded
/// confidences, returns the prediction carrying the network's confidence;
/// otherwise feeds `decoded` to the filter and returns it unchanged.
pub fn kf_correct_gate(state: &mut TrackerState, decoded: &BBox) -> Result<(BBox, bool)> {
    if !state.flags.kalman {
        return Ok((*decoded, false));
    }
    state.kalman.predict_in_place();
    let low = decoded.confidence < state.config.thr_b;
    if low && state.confidences.len() >= 2 {
        return Ok((state.kalman.to_box().with_confidence(decoded.confidence), true));
    }
    if !low {
        state.kalman.update(decoded)?;
    }
    Ok((*decoded, false))
}

/// Tracks one frame pair.
pub fn track_step(state: &mut TrackerState, frames: Pair<&Image>, model: &Model) -> Result<StepOutput> {
    let frame = state.frame + 1;
    let wrap = |e: Error| Error::Frame {
        frame,
        source: Box::new(e),
    };
    check_aligned(frames).map_err(wrap)?;
    let cfg = model.config();
    let search_side = square_side(cfg.search_size, "search region").map_err(wrap)?;
    let template_side = square_side(cfg.template_size, "template").map_err(wrap)?;
    let (search, geom) = crop_pair(frames, &state.last, state.config.search_context, search_side).map_err(wrap)?;
    let maps = model.head_maps(state.template.as_ref(), search.as_ref()).map_err(wrap)?;
    let decoded = decode_box(&maps, cfg, &geom, cfg.hanning_window);
    let out = state.apply_gates(decoded, Some(frames), template_side).map_err(wrap)?;
    state.frame = frame;
    Ok(out)
}

/// Runs the tracker over a whole sequence; the first output is `init_box`.
pub fn track_sequence(frames: &[Pair<Image>], init_box: &BBox, model: &Model, config: &TrackerConfig) -> Result<Vec<BBox>> {
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let mut state = init_track(first.as_ref(), init_box, model, config)?;
    let mut out = vec![init_box.with_confidence(1.0)];
    for f in &frames[1..] {
        out.push(track_step(&mut state, f.as_ref(), model)?.bbox);
    }
    Ok(out)
}
