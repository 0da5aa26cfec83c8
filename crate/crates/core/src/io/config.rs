//! Line-based `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys not present
//! keep their defaults. Sizes are written `S` (square) or `HxW`; optional
//! values accept `none`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, Size2};
use crate::model::train::TrainConfig;
use crate::tracking::tracker::TrackerConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub sequences: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            tracker: TrackerConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            sequences: None,
            checkpoint: None,
            output: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::InvalidValue {
        key: key.to_string(),
        msg: format!("`{v}`: {e}"),
    })
}

fn parse_size(key: &str, v: &str) -> Result<Size2> {
    match v.split_once(['x', 'X']) {
        Some((h, w)) => Ok(Size2::new(parse(key, h.trim())?, parse(key, w.trim())?)),
        None => Ok(Size2::square(parse(key, v)?)),
    }
}

fn parse_opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    if v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && !v.eq_ignore_ascii_case("none")).then(|| PathBuf::from(v))
}

fn size_text(s: Size2) -> String {
    if s.is_square() {
        s.w.to_string()
    } else {
        format!("{}x{}", s.h, s.w)
    }
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.tracker;
        let tr = &mut self.train;
        match key {
            "patch_size" => m.patch_size = parse(key, v)?,
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "num_layers" => m.num_layers = parse(key, v)?,
            "num_heads" => m.num_heads = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "template_size" => m.template_size = parse_size(key, v)?,
            "search_size" => m.search_size = parse_size(key, v)?,
            "reduction_ratio" => m.reduction_ratio = parse(key, v)?,
            "fovea_init" => m.fovea_init = parse(key, v)?,
            "head_channels" => m.head_channels = parse(key, v)?,
            "share_backbone" => m.share_backbone = parse(key, v)?,
            "hanning_window" => m.hanning_window = parse(key, v)?,
            "fovea_on_other" => m.fovea_on_other = parse(key, v)?,
            "attn_sigmoid" => m.attn_sigmoid = parse(key, v)?,
            "use_mvip" => m.flags.use_mvip = parse(key, v)?,
            "use_spatial_attn" => m.flags.use_spatial_attn = parse(key, v)?,
            "use_token_attn" => m.flags.use_token_attn = parse(key, v)?,
            "use_template_update" => m.flags.use_template_update = parse(key, v)?,
            "use_kalman" => m.flags.use_kalman = parse(key, v)?,
            "thr_a" => t.thr_a = parse(key, v)?,
            "thr_b" => t.thr_b = parse(key, v)?,
            "history" => t.history = parse(key, v)?,
            "template_context" => t.template_context = parse(key, v)?,
            "search_context" => t.search_context = parse(key, v)?,
            "kf_q_pos" => t.kalman.q_pos = parse(key, v)?,
            "kf_q_vel" => t.kalman.q_vel = parse(key, v)?,
            "kf_r" => t.kalman.r = parse(key, v)?,
            "kf_p0" => t.kalman.p0 = parse(key, v)?,
            "steps" => tr.steps = parse(key, v)?,
            "lr" => tr.lr = parse(key, v)?,
            "backbone_lr" => tr.backbone_lr = parse(key, v)?,
            "weight_decay" => tr.weight_decay = parse(key, v)?,
            "beta1" => tr.beta1 = parse(key, v)?,
            "beta2" => tr.beta2 = parse(key, v)?,
            "eps" => tr.eps = parse(key, v)?,
            "clip" => tr.clip = parse_opt_f64(key, v)?,
            "batch_size" => tr.batch_size = parse(key, v)?,
            "decay_at" => tr.decay_at = parse_opt_f64(key, v)?,
            "decay_factor" => tr.decay_factor = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "sequences" => self.sequences = parse_path(v),
            "checkpoint" => self.checkpoint = parse_path(v),
            "output" => self.output = parse_path(v),
            _ => {
                return Err(Error::InvalidValue {
                    key: key.to_string(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Parses text without touching the filesystem.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let Some((k, v)) = s.split_once('=') else {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected `key = value`, got `{s}`"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: "empty key".into(),
                });
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key `{k}`"),
                });
            }
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tracker.validate()?;
        let tr = &self.train;
        let pos = |key: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidValue {
                    key: key.into(),
                    msg: format!("{v} must be finite and non-negative"),
                })
            }
        };
        pos("lr", tr.lr)?;
        pos("backbone_lr", tr.backbone_lr)?;
        pos("weight_decay", tr.weight_decay)?;
        pos("eps", tr.eps)?;
        pos("decay_factor", tr.decay_factor)?;
        if let Some(f) = tr.decay_at {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidValue {
                    key: "decay_at".into(),
                    msg: format!("{f} must lie in [0, 1]"),
                });
            }
        }
        for (k, v) in [("beta1", tr.beta1), ("beta2", tr.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidValue {
                    key: k.into(),
                    msg: format!("{v} must lie in [0, 1)"),
                });
            }
        }
        let kf = &self.tracker.kalman;
        for (k, v) in [("kf_q_pos", kf.q_pos), ("kf_q_vel", kf.q_vel), ("kf_r", kf.r), ("kf_p0", kf.p0)] {
            pos(k, v)?;
        }
        Ok(())
    }

    /// Input paths must exist; the output path is created on demand.
    pub fn check_paths(&self) -> Result<()> {
        for (k, p) in [("sequences", &self.sequences), ("checkpoint", &self.checkpoint)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::InvalidValue {
                        key: k.into(),
                        msg: format!("{} does not exist", p.display()),
                    });
                }
            }
        }
        Ok(())
    }

    /// Every key, in a form [`RunConfig::parse`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.tracker;
        let tr = &self.train;
        let entries: Vec<(&str, String)> = vec![
            ("patch_size", m.patch_size.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("num_layers", m.num_layers.to_string()),
            ("num_heads", m.num_heads.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("template_size", size_text(m.template_size)),
            ("search_size", size_text(m.search_size)),
            ("reduction_ratio", m.reduction_ratio.to_string()),
            ("fovea_init", format!("{:?}", m.fovea_init)),
            ("head_channels", m.head_channels.to_string()),
            ("share_backbone", m.share_backbone.to_string()),
            ("hanning_window", m.hanning_window.to_string()),
            ("fovea_on_other", m.fovea_on_other.to_string()),
            ("attn_sigmoid", m.attn_sigmoid.to_string()),
            ("use_mvip", m.flags.use_mvip.to_string()),
            ("use_spatial_attn", m.flags.use_spatial_attn.to_string()),
            ("use_token_attn", m.flags.use_token_attn.to_string()),
            ("use_template_update", m.flags.use_template_update.to_string()),
            ("use_kalman", m.flags.use_kalman.to_string()),
            ("thr_a", format!("{:?}", t.thr_a)),
            ("thr_b", format!("{:?}", t.thr_b)),
            ("history", t.history.to_string()),
            ("template_context", format!("{:?}", t.template_context)),
            ("search_context", format!("{:?}", t.search_context)),
            ("kf_q_pos", format!("{:?}", t.kalman.q_pos)),
            ("kf_q_vel", format!("{:?}", t.kalman.q_vel)),
            ("kf_r", format!("{:?}", t.kalman.r)),
            ("kf_p0", format!("{:?}", t.kalman.p0)),
            ("steps", tr.steps.to_string()),
            ("lr", format!("{:?}", tr.lr)),
            ("backbone_lr", format!("{:?}", tr.backbone_lr)),
            ("weight_decay", format!("{:?}", tr.weight_decay)),
            ("beta1", format!("{:?}", tr.beta1)),
            ("beta2", format!("{:?}", tr.beta2)),
            ("eps", format!("{:?}", tr.eps)),
            ("clip", tr.clip.map_or("none".into(), |c| format!("{c:?}"))),
            ("batch_size", tr.batch_size.to_string()),
            ("decay_at", tr.decay_at.map_or("none".into(), |c| format!("{c:?}"))),
            ("decay_factor", format!("{:?}", tr.decay_factor)),
            ("seed", self.seed.to_string()),
            ("sequences", path_text(&self.sequences)),
            ("checkpoint", path_text(&self.checkpoint)),
            ("output", path_text(&self.output)),
        ];
        let mut s = String::new();
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Reads, parses and validates a config file, including input paths.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let c = RunConfig::parse(&text)?;
    c.check_paths()?;
    Ok(c)
}

pub fn save_config(c: &RunConfig, path: &Path) -> Result<()> {
    std::fs::write(path, c.to_text())?;
    Ok(())
}
