//! Desk-scale training and evaluation on synthetic sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;
use crate::error::Result;
use crate::eval::metrics::success_auc;
use crate::eval::synth::{random_spec, synth_sequence, Attribute, Degradation, SequenceRecord, SynthSpec};
use crate::model::train::{train, LossValues, Sample, TrainConfig};
use crate::model::{Model, ModelConfig};
use crate::tracking::tracker::{crop_pair, track_sequence, TrackerConfig};

/// Training pair from frame `t` of `seq`: template at frame 0, search
/// around a jittered copy of the true box at `t`.
pub fn sample_at(seq: &SequenceRecord, t: usize, cfg: &ModelConfig, tracker: &TrackerConfig, jitter: f64, rng: &mut impl Rng) -> Result<Sample> {
    let zs = cfg.template_size.w;
    let xs = cfg.search_size.w;
    let (template, _) = crop_pair(seq.frames[0].as_ref(), &seq.gt[0], tracker.template_context, zs)?;
    let g = seq.gt[t];
    let s = (g.w * g.h).sqrt();
    let (cx, cy) = g.center();
    let dx = rng.gen_range(-jitter..=jitter) * s;
    let dy = rng.gen_range(-jitter..=jitter) * s;
    let anchor = BBox::from_center(cx + dx, cy + dy, g.w, g.h);
    let (search, geom) = crop_pair(seq.frames[t].as_ref(), &anchor, tracker.search_context, xs)?;
    Ok(Sample {
        template,
        search,
        gt: geom.box_to_crop(&g),
    })
}

/// Randomized spec with one low-illumination segment covering
/// `li_fraction` of the frames (never frame 0).
pub fn li_spec(base: &SynthSpec, li_fraction: f64, rng: &mut impl Rng) -> SynthSpec {
    let mut spec = random_spec(base, rng);
    let len = ((spec.frames as f64 * li_fraction).round() as usize).clamp(1, spec.frames - 1);
    let start = rng.gen_range(1..=spec.frames - len);
    spec.degradations = vec![Degradation {
        attribute: Attribute::LowIllumination,
        start,
        end: start + len,
    }];
    spec
}

#[derive(Clone, Debug, PartialEq)]
pub struct LiExperiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub base: SynthSpec,
    pub li_fraction: f64,
    pub train_sequences: usize,
    pub samples_per_sequence: usize,
    pub test_sequences: usize,
    pub jitter: f64,
}

impl Default for LiExperiment {
    fn default() -> Self {
        Self {
            model: ModelConfig::tracking_toy(32, 2),
            train: TrainConfig::toy(1000),
            base: SynthSpec {
                width: 96,
                height: 96,
                frames: 24,
                noise: 0.03,
                ..SynthSpec::default()
            },
            li_fraction: 0.5,
            train_sequences: 24,
            samples_per_sequence: 8,
            test_sequences: 8,
            jitter: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LiOutcome {
    pub sr: f64,
    pub losses: Vec<LossValues>,
}

impl LiExperiment {
    /// Training sequences depend on `seed`; test sequences do not.
    pub fn data(&self, seed: u64) -> Result<(Vec<Sample>, Vec<SequenceRecord>)> {
        let tracker = TrackerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        for i in 0..self.train_sequences {
            let spec = li_spec(&self.base, self.li_fraction, &mut rng);
            let seq = synth_sequence(&spec, seed.wrapping_mul(1000).wrapping_add(i as u64))?;
            for _ in 0..self.samples_per_sequence {
                let t = rng.gen_range(1..seq.len());
                samples.push(sample_at(&seq, t, &self.model, &tracker, self.jitter, &mut rng)?);
            }
        }
        let mut test_rng = ChaCha8Rng::seed_from_u64(0x7e57);
        let mut test = Vec::new();
        for i in 0..self.test_sequences {
            let spec = li_spec(&self.base, self.li_fraction, &mut test_rng);
            let mut seq = synth_sequence(&spec, 900_000 + i as u64)?;
            seq.name = format!("li-test-{i}");
            test.push(seq);
        }
        Ok((samples, test))
    }

    /// Trains one model from `seed` and reports pooled SR on the test set.
    pub fn run(&self, model_cfg: &ModelConfig, seed: u64) -> Result<LiOutcome> {
        let (samples, test) = self.data(seed)?;
        let mut model = Model::new(model_cfg.clone(), seed)?;
        let losses = train(&mut model, &samples, &self.train, |_, _| {})?;
        let sr = track_and_score(&model, &test)?;
        Ok(LiOutcome { sr, losses })
    }
}

/// Pooled success AUC of the tracker over `seqs`.
pub fn track_and_score(model: &Model, seqs: &[SequenceRecord]) -> Result<f64> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for s in seqs {
        pred.extend(track_sequence(&s.frames, &s.gt[0], model, &TrackerConfig::default())?);
        gt.extend_from_slice(&s.gt);
    }
    success_auc(&pred, &gt)
}
