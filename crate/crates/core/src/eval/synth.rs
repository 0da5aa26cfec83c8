//! Deterministic synthetic RGB-T sequences with exact ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::{Image, Pair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attribute {
    /// Low illumination: the RGB frame carries no target contrast.
    LowIllumination,
    /// Thermal crossover: the TIR frame carries no target contrast.
    ThermalCrossover,
    /// Frame loss: neither modality shows the target.
    FrameLoss,
}

impl Attribute {
    pub fn tag(self) -> &'static str {
        match self {
            Attribute::LowIllumination => "LI",
            Attribute::ThermalCrossover => "TC",
            Attribute::FrameLoss => "FL",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "LI" => Some(Attribute::LowIllumination),
            "TC" => Some(Attribute::ThermalCrossover),
            "FL" => Some(Attribute::FrameLoss),
            _ => None,
        }
    }
}

/// Target center over time (pixels, frame index `t`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trajectory {
    Static { x: f64, y: f64 },
    Linear { x: f64, y: f64, vx: f64, vy: f64 },
    Sinusoidal { x: f64, y: f64, ax: f64, ay: f64, period: f64 },
}

impl Trajectory {
    pub fn center(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        match *self {
            Trajectory::Static { x, y } => (x, y),
            Trajectory::Linear { x, y, vx, vy } => (x + vx * t, y + vy * t),
            Trajectory::Sinusoidal { x, y, ax, ay, period } => {
                let ph = 2.0 * std::f64::consts::PI * t / period;
                (x + ax * ph.sin(), y + ay * ph.cos())
            }
        }
    }
}

/// Target and background intensities of one modality, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Appearance {
    pub target: [f64; 3],
    pub background: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Degradation {
    pub attribute: Attribute,
    /// Half-open frame range.
    pub start: usize,
    pub end: usize,
}

/// A square distractor blob visible in one modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distractor {
    pub trajectory: Trajectory,
    pub size: f64,
    pub rgb: Option<[f64; 3]>,
    pub tir: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub target_w: f64,
    pub target_h: f64,
    pub trajectory: Trajectory,
    pub rgb: Appearance,
    pub tir: Appearance,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub degradations: Vec<Degradation>,
    pub distractors: Vec<Distractor>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            frames: 30,
            target_w: 16.0,
            target_h: 16.0,
            trajectory: Trajectory::Linear {
                x: 40.0,
                y: 48.0,
                vx: 1.5,
                vy: 1.0,
            },
            rgb: Appearance {
                target: [0.9, 0.2, 0.2],
                background: [0.3, 0.4, 0.5],
            },
            tir: Appearance {
                target: [0.95, 0.95, 0.95],
                background: [0.2, 0.2, 0.2],
            },
            noise: 0.02,
            degradations: Vec::new(),
            distractors: Vec::new(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config(m));
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return err("synthetic sequence needs positive size and frame count".into());
        }
        if !(self.target_w > 0.0 && self.target_h > 0.0) {
            return err(format!("target size {}x{} must be positive", self.target_w, self.target_h));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err(format!("noise {} must be a finite non-negative value", self.noise));
        }
        let colors = [self.rgb.target, self.rgb.background, self.tir.target, self.tir.background];
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return err("appearance values must lie in [0, 1]".into());
        }
        for d in &self.degradations {
            if d.start >= d.end || d.end > self.frames {
                return err(format!("degradation range {}..{} invalid for {} frames", d.start, d.end, self.frames));
            }
        }
        Ok(())
    }

    pub fn gt_box(&self, t: usize) -> BBox {
        let (cx, cy) = self.trajectory.center(t);
        BBox::from_center(cx, cy, self.target_w, self.target_h)
    }

    pub fn attributes_at(&self, t: usize) -> Vec<Attribute> {
        self.degradations
            .iter()
            .filter(|d| (d.start..d.end).contains(&t))
            .map(|d| d.attribute)
            .collect()
    }
}

/// Frames, ground truth and per-frame attribute tags.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: Vec<Pair<Image>>,
    pub gt: Vec<BBox>,
    pub attributes: Vec<Vec<Attribute>>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.gt.len() {
            return Err(Error::Sequence {
                path: self.name.clone().into(),
                msg: format!("{} frames but {} ground-truth boxes", self.frames.len(), self.gt.len()),
            });
        }
        if let Some(first) = self.frames.first() {
            for (i, f) in self.frames.iter().enumerate() {
                if !f.rgb.same_size(&first.rgb) || !f.tir.same_size(&first.rgb) {
                    return Err(Error::Sequence {
                        path: self.name.clone().into(),
                        msg: format!("frame {i} differs in size from frame 0"),
                    });
                }
            }
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Fraction of pixel `(x, y)` covered by the box (area-weighted edges).
fn coverage(b: &BBox, x: usize, y: usize) -> f64 {
    let ox = (b.x2().min(x as f64 + 1.0) - b.x.max(x as f64)).max(0.0);
    let oy = (b.y2().min(y as f64 + 1.0) - b.y.max(y as f64)).max(0.0);
    ox * oy
}

fn paint(img: &mut Image, b: &BBox, color: [f64; 3]) {
    let x0 = b.x.floor().max(0.0) as usize;
    let y0 = b.y.floor().max(0.0) as usize;
    let x1 = (b.x2().ceil().max(0.0) as usize).min(img.width());
    let y1 = (b.y2().ceil().max(0.0) as usize).min(img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            let a = coverage(b, x, y);
            if a <= 0.0 {
                continue;
            }
            for c in 0..3 {
                let v = img.get(x, y, c);
                img.set(x, y, c, v * (1.0 - a) + color[c] * a);
            }
        }
    }
}

/// Renders the sequence. Pixel values are quantized to multiples of 1/255 so
/// that 8-bit image files reproduce them exactly.
pub fn synth_sequence(spec: &SynthSpec, seed: u64) -> Result<SequenceRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt = Vec::with_capacity(spec.frames);
    let mut attributes = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let attrs = spec.attributes_at(t);
        let lost = attrs.contains(&Attribute::FrameLoss);
        let mut rgb_app = spec.rgb;
        let mut tir_app = spec.tir;
        if attrs.contains(&Attribute::LowIllumination) {
            // darkened scene, target indistinguishable from background
            let dark = spec.rgb.background.map(|v| v * 0.15);
            rgb_app = Appearance {
                target: dark,
                background: dark,
            };
        }
        if attrs.contains(&Attribute::ThermalCrossover) {
            tir_app.target = tir_app.background;
        }
        let b = spec.gt_box(t);
        let mut pair = Pair::new(
            Image::filled(spec.width, spec.height, rgb_app.background),
            Image::filled(spec.width, spec.height, tir_app.background),
        );
        for d in &spec.distractors {
            let (cx, cy) = d.trajectory.center(t);
            let db = BBox::from_center(cx, cy, d.size, d.size);
            if let (Some(c), false) = (d.rgb, attrs.contains(&Attribute::LowIllumination)) {
                paint(&mut pair.rgb, &db, c);
            }
            if let Some(c) = d.tir {
                paint(&mut pair.tir, &db, c);
            }
        }
        if !lost {
            paint(&mut pair.rgb, &b, rgb_app.target);
            paint(&mut pair.tir, &b, tir_app.target);
        }
        // thermal frames are single-channel replicated to three
        let grey_noise = spec.noise > 0.0;
        let finish = |img: &Image, rng: &mut ChaCha8Rng, grey: bool| -> Image {
            let mut data = Vec::with_capacity(img.data().len());
            for px in img.data().chunks_exact(3) {
                if grey {
                    let n = if grey_noise { noise.sample(rng) } else { 0.0 };
                    let v = quantize(px[0] + n);
                    data.extend_from_slice(&[v, v, v]);
                } else {
                    for &v in px {
                        let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                        data.push(quantize(v + n));
                    }
                }
            }
            Image::new(img.width(), img.height(), data).expect("same dimensions")
        };
        let rgb = finish(&pair.rgb, &mut rng, false);
        let tir = finish(&pair.tir, &mut rng, true);
        frames.push(Pair::new(rgb, tir));
        gt.push(b);
        attributes.push(attrs);
    }
    Ok(SequenceRecord {
        name: format!("synth-{seed}"),
        frames,
        gt,
        attributes,
    })
}

/// Random variation of `base` for training and evaluation sets: start
/// position, velocity, target size and colors drawn from `rng`.
pub fn random_spec(base: &SynthSpec, rng: &mut impl Rng) -> SynthSpec {
    let (w, h) = (base.width as f64, base.height as f64);
    let tw = rng.gen_range(0.10..0.18) * w;
    let th = tw * rng.gen_range(0.7..1.4);
    let margin = 0.3 * w;
    let x = rng.gen_range(margin..w - margin);
    let y = rng.gen_range(margin..h - margin);
    let speed = 0.8;
    let vx = rng.gen_range(-speed..speed);
    let vy = rng.gen_range(-speed..speed);
    let bg = rng.gen_range(0.2..0.5);
    let rgb_bg = [bg, rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5)];
    let rgb_t = [rng.gen_range(0.7..1.0), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)];
    let tir_bg = rng.gen_range(0.1..0.3);
    let tir_t = rng.gen_range(0.75..1.0);
    SynthSpec {
        target_w: tw,
        target_h: th,
        trajectory: Trajectory::Linear { x, y, vx, vy },
        rgb: Appearance {
            target: rgb_t,
            background: rgb_bg,
        },
        tir: Appearance {
            target: [tir_t; 3],
            background: [tir_bg; 3],
        },
        ..base.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_target_has_constant_gt() {
        let spec = SynthSpec {
            trajectory: Trajectory::Static { x: 50.0, y: 60.0 },
            ..SynthSpec::default()
        };
        let s = synth_sequence(&spec, 1).unwrap();
        assert!(s.gt.iter().all(|b| *b == s.gt[0]));
        s.validate().unwrap();
    }

    #[test]
    fn gt_matches_trajectory() {
        let spec = SynthSpec::default();
        let s = synth_sequence(&spec, 2).unwrap();
        for (t, b) in s.gt.iter().enumerate() {
            let (cx, cy) = spec.trajectory.center(t);
            assert_eq!(b.center(), BBox::from_center(cx, cy, spec.target_w, spec.target_h).center());
        }
    }

    #[test]
    fn low_illumination_removes_rgb_contrast_only() {
        let spec = SynthSpec {
            noise: 0.0,
            degradations: vec![Degradation {
                attribute: Attribute::LowIllumination,
                start: 5,
                end: 10,
            }],
            ..SynthSpec::default()
        };
        let s = synth_sequence(&spec, 3).unwrap();
        let (cx, cy) = s.gt[7].center();
        let f = &s.frames[7];
        assert_eq!(f.rgb.pixel(cx as usize, cy as usize), f.rgb.pixel(1, 1));
        assert_ne!(f.tir.pixel(cx as usize, cy as usize), f.tir.pixel(1, 1));
        assert_eq!(s.attributes[7], vec![Attribute::LowIllumination]);
        let (cx, cy) = s.gt[2].center();
        assert_ne!(s.frames[2].rgb.pixel(cx as usize, cy as usize), s.frames[2].rgb.pixel(1, 1));
    }

    #[test]
    fn thermal_crossover_removes_tir_contrast() {
        let spec = SynthSpec {
            noise: 0.0,
            degradations: vec![Degradation {
                attribute: Attribute::ThermalCrossover,
                start: 0,
                end: 3,
            }],
            ..SynthSpec::default()
        };
        let s = synth_sequence(&spec, 4).unwrap();
        let (cx, cy) = s.gt[1].center();
        assert_eq!(s.frames[1].tir.pixel(cx as usize, cy as usize), s.frames[1].tir.pixel(0, 0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SynthSpec::default();
        assert_eq!(synth_sequence(&spec, 9).unwrap(), synth_sequence(&spec, 9).unwrap());
        assert_ne!(synth_sequence(&spec, 9).unwrap().frames, synth_sequence(&spec, 10).unwrap().frames);
    }

    #[test]
    fn values_are_8bit_exact() {
        let s = synth_sequence(&SynthSpec::default(), 5).unwrap();
        for v in s.frames[0].rgb.data() {
            assert_eq!((v * 255.0).round() / 255.0, *v);
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = SynthSpec {
            degradations: vec![Degradation {
                attribute: Attribute::FrameLoss,
                start: 4,
                end: 2,
            }],
            ..SynthSpec::default()
        };
        assert!(synth_sequence(&spec, 0).is_err());
    }
}
