//! Acceptance suite. Runs every criterion at its pinned tolerance, prints one
//! PASS/FAIL line each, and exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mplt::eval::accounting::{count_flops, count_flops_single, encoder_layer_params};
use mplt::eval::gradsuite::{run_suite, TOLERANCE};
use mplt::eval::metrics::{cle, iou, precision_rate, success_auc};
use mplt::eval::synth::{synth_sequence, Attribute, Degradation, SynthSpec, Trajectory};
use mplt::eval::toy::LiExperiment;
use mplt::io::checkpoint::{load_checkpoint, save_checkpoint};
use mplt::io::config::RunConfig;
use mplt::io::results::{read_results, write_results};
use mplt::io::sequence::{load_sequence, write_sequence};
use mplt::model::params::Ctx;
use mplt::model::train::{train, Sample, TrainConfig};
use mplt::model::vit::{dual_forward, embed_pair, single_forward, Modality};
use mplt::prompter::{fovea_mask, prompter_param_count};
use mplt::tracking::crop::CropGeometry;
use mplt::tracking::kalman::{KalmanConfig, KalmanState};
use mplt::tracking::tracker::{crop_pair, init_track, track_sequence, TrackerConfig};
use mplt::{BBox, Graph, Image, Model, ModelConfig, Pair, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_pair(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Pair<Image>, Pair<Image>) {
    let mut img = |w: usize, h: usize| Image::new(w, h, (0..w * h * 3).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let (z, x) = (cfg.template_size, cfg.search_size);
    (Pair::new(img(z.w, z.h), img(z.w, z.h)), Pair::new(img(x.w, x.h), img(x.w, x.h)))
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let suite = run_suite(0, None).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let worst = suite
        .iter()
        .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
        .unwrap();
    let failed: Vec<_> = suite.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    let checked: usize = suite.iter().map(|e| e.report.checked).sum();
    check(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, {checked} elements, worst {} at {:.2e} (< {TOLERANCE:e}), failed {failed:?}, {:.1}s (< 120s)",
            suite.len(),
            worst.name,
            worst.report.max_rel_err,
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_zero_prompt() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for (cfg, seed) in [(ModelConfig::gradcheck_toy(), 1), (ModelConfig::tracking_toy(32, 2), 2)] {
        let model = Model::new(cfg.clone(), seed).unwrap();
        let (z, x) = random_pair(&cfg, &mut rng);
        let z = z.map(|i| i.standardized());
        let x = x.map(|i| i.standardized());
        let mut ctx = Ctx::new(model.params(), false);
        let rgb = embed_pair(&mut ctx, &cfg, Modality::Rgb, &z.rgb, &x.rgb).unwrap();
        let tir = embed_pair(&mut ctx, &cfg, Modality::Tir, &z.tir, &x.tir).unwrap();
        let dual = dual_forward(&mut ctx, &cfg, &rgb, &tir, None).unwrap();
        let sr = single_forward(&mut ctx, &cfg, &rgb).unwrap();
        let st = single_forward(&mut ctx, &cfg, &tir).unwrap();
        worst = worst
            .max(ctx.g.value(dual.rgb.tokens).max_abs_diff(ctx.g.value(sr.tokens)))
            .max(ctx.g.value(dual.tir.tokens).max_abs_diff(ctx.g.value(st.tokens)));
    }
    check(worst < 1e-9, format!("max abs diff {worst:.2e} (< 1e-9)"))
}

fn c3_fovea() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for lambda in [0.1, 1.0, 10.0] {
        for _ in 0..100 {
            let n = rng.gen_range(2..40);
            let d = rng.gen_range(1..24);
            let mut g = Graph::new();
            let h = g.input(Tensor::randn([n, d], 3.0, &mut rng));
            let l = g.input(Tensor::scalar(lambda));
            let m = fovea_mask(&mut g, h, l).unwrap();
            let v = g.value(m);
            for j in 0..d {
                let s: f64 = (0..n).map(|i| v.at(&[i, j])).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    check(worst < 1e-9, format!("300 inputs, max |column sum - 1| {worst:.2e} (< 1e-9)"))
}

/// Textbook filter on row-major heap matrices.
mod naive {
    pub type M = Vec<Vec<f64>>;

    pub fn mul(a: &M, b: &M) -> M {
        (0..a.len())
            .map(|i| (0..b[0].len()).map(|j| (0..b.len()).map(|k| a[i][k] * b[k][j]).sum()).collect())
            .collect()
    }

    pub fn t(a: &M) -> M {
        (0..a[0].len()).map(|j| (0..a.len()).map(|i| a[i][j]).collect()).collect()
    }

    pub fn add(a: &M, b: &M, s: f64) -> M {
        a.iter().zip(b).map(|(r, q)| r.iter().zip(q).map(|(x, y)| x + s * y).collect()).collect()
    }

    pub fn eye(n: usize) -> M {
        (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect()
    }

    /// Inverse via the adjugate of the cofactor expansion.
    pub fn inv(a: &M) -> M {
        let n = a.len();
        let minor = |m: &M, r: usize, c: usize| -> M {
            m.iter()
                .enumerate()
                .filter(|(i, _)| *i != r)
                .map(|(_, row)| row.iter().enumerate().filter(|(j, _)| *j != c).map(|(_, v)| *v).collect())
                .collect()
        };
        fn det(m: &M) -> f64 {
            if m.len() == 1 {
                return m[0][0];
            }
            (0..m.len())
                .map(|c| {
                    let sub: M = m[1..].iter().map(|row| row.iter().enumerate().filter(|(j, _)| *j != c).map(|(_, v)| *v).collect()).collect();
                    let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                    sign * m[0][c] * det(&sub)
                })
                .sum()
        }
        let d = det(a);
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                        sign * det(&minor(a, j, i)) / d
                    })
                    .collect()
            })
            .collect()
    }
}

fn cholesky_ok(p: &[[f64; 8]; 8]) -> bool {
    let mut l = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..=i {
            let s: f64 = p[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return false;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    true
}

fn c4_kalman() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = KalmanConfig::default();
    let mut k = KalmanState::new([20.0, 30.0, 8.0, 6.0, 0.5, -0.3, 0.0, 0.0], &cfg);
    let mut x: naive::M = k.mean.iter().map(|&v| vec![v]).collect();
    let mut p: naive::M = k.cov.iter().map(|r| r.to_vec()).collect();
    let q: naive::M = k.q.iter().map(|r| r.to_vec()).collect();
    let r: naive::M = k.r.iter().map(|r| r.to_vec()).collect();
    let mut f = naive::eye(8);
    let mut h = vec![vec![0.0; 8]; 4];
    for i in 0..4 {
        f[i][i + 4] = 1.0;
        h[i][i] = 1.0;
    }
    let (mut worst, mut sym, mut psd) = (0.0f64, 0.0f64, true);
    for _ in 0..100 {
        k.predict_in_place();
        x = naive::mul(&f, &x);
        p = naive::add(&naive::mul(&naive::mul(&f, &p), &naive::t(&f)), &q, 1.0);
        let b = BBox::from_center(rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0), rng.gen_range(2.0..15.0), rng.gen_range(2.0..15.0));
        k.update(&b).unwrap();
        let (cx, cy) = b.center();
        let z = vec![vec![cx], vec![cy], vec![b.w], vec![b.h]];
        let s = naive::add(&naive::mul(&naive::mul(&h, &p), &naive::t(&h)), &r, 1.0);
        let gain = naive::mul(&naive::mul(&p, &naive::t(&h)), &naive::inv(&s));
        x = naive::add(&x, &naive::mul(&gain, &naive::add(&z, &naive::mul(&h, &x), -1.0)), 1.0);
        p = naive::mul(&naive::add(&naive::eye(8), &naive::mul(&gain, &h), -1.0), &p);
        for i in 0..8 {
            worst = worst.max((k.mean[i] - x[i][0]).abs());
            for j in 0..8 {
                worst = worst.max((k.cov[i][j] - p[i][j]).abs());
                sym = sym.max((k.cov[i][j] - k.cov[j][i]).abs());
            }
        }
        psd &= cholesky_ok(&k.cov);
    }

    let exact = KalmanConfig { r: 1e-12, ..cfg };
    let at = |c: f64| BBox::from_center(10.0 + c, 20.0 + c, 12.0, 12.0);
    let mut cv = KalmanState::from_box(&at(0.0), &exact).unwrap();
    for c in [1.0, 2.0] {
        cv.predict_in_place();
        cv.update(&at(c)).unwrap();
    }
    let (m, _) = cv.predict();
    let err = (m[0] * cv.scale - 13.0).abs().max((m[1] * cv.scale - 23.0).abs());
    check(
        worst < 1e-9 && sym < 1e-9 && psd && err < 1e-3,
        format!("oracle diff {worst:.2e} (< 1e-9), asymmetry {sym:.1e}, positive definite {psd}, extrapolation error {err:.2e} (< 1e-3)"),
    )
}

fn c5_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rand_box = |rng: &mut ChaCha8Rng| BBox::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0), rng.gen_range(1.0..50.0), rng.gen_range(1.0..50.0));
    let pred: Vec<BBox> = (0..1000).map(|_| rand_box(&mut rng)).collect();
    let gt: Vec<BBox> = (0..1000).map(|_| rand_box(&mut rng)).collect();

    // brute force straight from the definitions
    let dist = |a: &BBox, b: &BBox| ((a.x + a.w / 2.0 - b.x - b.w / 2.0).powi(2) + (a.y + a.h / 2.0 - b.y - b.h / 2.0).powi(2)).sqrt();
    let overlap = |a: &BBox, b: &BBox| {
        let w = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
        let h = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
        let i = w.max(0.0) * h.max(0.0);
        i / (a.w * a.h + b.w * b.h - i)
    };
    let within = pred.iter().zip(&gt).filter(|(p, g)| dist(p, g) <= 20.0).count();
    let pr_bf = within as f64 / 1000.0;
    let mut auc = 0.0;
    for k in 0..=20 {
        let t = k as f64 / 20.0;
        auc += pred.iter().zip(&gt).filter(|(p, g)| overlap(p, g) >= t).count() as f64 / 1000.0;
    }
    let sr_bf = auc / 21.0;
    let pr = precision_rate(&pred, &gt).unwrap();
    let sr = success_auc(&pred, &gt).unwrap();

    let c = cle(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(3.0, 4.0, 2.0, 2.0));
    let i = iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 0.0, 2.0, 2.0));
    check(
        pr == pr_bf && sr == sr_bf && c == 5.0 && (i - 1.0 / 3.0).abs() < 1e-12,
        format!("PR {pr} vs {pr_bf}, SR {sr} vs {sr_bf}, CLE {c}, IoU {i:.15}"),
    )
}

fn overfit_sample() -> Sample {
    let spec = SynthSpec {
        frames: 2,
        ..SynthSpec::default()
    };
    let seq = synth_sequence(&spec, 1).unwrap();
    let (z, _) = crop_pair(seq.frames[0].as_ref(), &seq.gt[0], 2.0, 32).unwrap();
    let (x, geom) = crop_pair(seq.frames[1].as_ref(), &seq.gt[0], 4.0, 64).unwrap();
    Sample {
        template: z,
        search: x,
        gt: geom.box_to_crop(&seq.gt[1]),
    }
}

fn c6_overfit() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig::tracking_toy(64, 3);
    let mut model = Model::new(cfg.clone(), 0).unwrap();
    let s = overfit_sample();
    let losses = train(&mut model, std::slice::from_ref(&s), &TrainConfig::toy(500), |_, _| {}).unwrap();
    let first = losses[0].total;
    let last = losses.last().unwrap().total;
    let reduction = 1.0 - last / first;
    let b = model
        .predict(s.template.as_ref(), s.search.as_ref(), &CropGeometry::identity(cfg.search_size.w))
        .unwrap();
    let overlap = b.iou(&s.gt);
    let elapsed = t.elapsed();
    check(
        reduction >= 0.9 && overlap >= 0.7 && elapsed < Duration::from_secs(600),
        format!(
            "loss {first:.3} -> {last:.4} ({:.1}% reduction, >= 90%), IoU {overlap:.3} (>= 0.7), {:.1}s (< 600s)",
            100.0 * reduction,
            elapsed.as_secs_f64()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c7_complementarity() -> Outcome {
    let e = LiExperiment::default();
    let mut with = Vec::new();
    let mut without = Vec::new();
    let mut ablated = e.model.clone();
    ablated.flags.use_mvip = false;
    for seed in 0..3 {
        with.push(e.run(&e.model, seed).unwrap().sr);
        without.push(e.run(&ablated, seed).unwrap().sr);
    }
    let (a, b) = (median(with.clone()), median(without.clone()));
    let fmt = |v: &[f64]| v.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>().join(" ");
    check(
        a > b,
        format!("median SR with prompters {a:.4} vs without {b:.4} (must be higher); per seed [{}] vs [{}]", fmt(&with), fmt(&without)),
    )
}

fn c8_gating() -> Outcome {
    let cfg = ModelConfig::tracking_toy(16, 1);
    let model = Model::new(cfg.clone(), 8).unwrap();
    let spec = SynthSpec {
        frames: 40,
        trajectory: Trajectory::Linear {
            x: 30.0,
            y: 40.0,
            vx: 1.5,
            vy: 0.75,
        },
        ..SynthSpec::default()
    };
    let seq = synth_sequence(&spec, 8).unwrap();
    let tracker = TrackerConfig::default();
    let side = cfg.template_size.w;
    let fresh = || init_track(seq.frames[0].as_ref(), &seq.gt[0], &model, &tracker).unwrap();

    let mut gates = Vec::new();
    for (conf, want) in [(0.95, true), (0.91, false)] {
        let mut st = fresh();
        let before = st.template.clone();
        let out = st.apply_gates(seq.gt[5].with_confidence(conf), Some(seq.frames[5].as_ref()), side).unwrap();
        gates.push(out.template_updated == want && (st.template != before) == want);
    }
    for (conf, want) in [(0.10, true), (0.25, false)] {
        let mut st = fresh();
        st.apply_gates(seq.gt[1].with_confidence(0.8), None, side).unwrap();
        let raw = seq.gt[2].with_confidence(conf);
        let out = st.apply_gates(raw, None, side).unwrap();
        gates.push(out.corrected == want && (out.bbox == raw) != want);
    }

    let forced = |t: usize| (12..15).contains(&t) || (25..28).contains(&t) || t == 33;
    let mut st = fresh();
    let (mut with, mut without, mut n) = (0.0, 0.0, 0);
    for t in 1..seq.len() {
        let g = seq.gt[t];
        let raw = if forced(t) {
            BBox::new(g.x + 18.0, g.y - 12.0, g.w, g.h).with_confidence(0.05)
        } else {
            g.with_confidence(0.95)
        };
        let out = st.apply_gates(raw, None, side).unwrap();
        if forced(t) {
            with += out.bbox.center_distance(&g);
            without += raw.center_distance(&g);
            n += 1;
        }
    }
    let (with, without) = (with / n as f64, without / n as f64);
    check(
        gates.iter().all(|&g| g) && with < without,
        format!("gates 0.95/0.91/0.10/0.25 {gates:?}, forced-frame center error {with:.3} corrected vs {without:.3} raw"),
    )
}

fn c9_prompter_share() -> Outcome {
    let cfg = ModelConfig::default();
    let per_layer = prompter_param_count(&cfg).per_layer as u64;
    let layer = encoder_layer_params(&cfg);
    let share = per_layer as f64 / layer as f64;
    check(
        cfg.n_tokens() == 320 && share < 0.02,
        format!("{per_layer} prompter vs {layer} encoder-layer parameters = {:.3}% (< 2%)", 100.0 * share),
    )
}

fn c10_flops() -> Outcome {
    let cfg = ModelConfig::default();
    let full = count_flops(&cfg).macs() as f64 / 1e9;
    let single = count_flops_single(&cfg).macs() as f64 / 1e9;
    let full_ok = (40.0..=75.0).contains(&full);
    let single_ok = (15.0..=27.0).contains(&single);
    check(
        full_ok && single_ok,
        format!("full {full:.2}G MACs in [40, 75]: {full_ok}; single-branch {single:.2}G MACs in [15, 27]: {single_ok}"),
    )
}

fn end_to_end(seed: u64) -> (Vec<f64>, Vec<BBox>, Vec<u8>) {
    let spec = SynthSpec {
        width: 96,
        height: 96,
        frames: 8,
        ..SynthSpec::default()
    };
    let seq = synth_sequence(&spec, seed).unwrap();
    let cfg = ModelConfig::tracking_toy(16, 1);
    let mut model = Model::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<_> = (1..seq.len())
        .map(|t| mplt::eval::toy::sample_at(&seq, t, &cfg, &TrackerConfig::default(), 0.3, &mut rng).unwrap())
        .collect();
    let losses = train(&mut model, &samples, &TrainConfig::toy(10), |_, _| {}).unwrap();
    let boxes = track_sequence(&seq.frames, &seq.gt[0], &model, &TrackerConfig::default()).unwrap();
    let mut bytes = Vec::new();
    mplt::io::checkpoint::write_params(model.params(), &mut bytes).unwrap();
    (losses.iter().map(|l| l.total).collect(), boxes, bytes)
}

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let a = end_to_end(11);
    let b = end_to_end(11);
    let same_run = a.0.iter().map(|v| v.to_bits()).eq(b.0.iter().map(|v| v.to_bits())) && a.1 == b.1 && a.2 == b.2;

    let mut rc = RunConfig::default();
    rc.seed = 99;
    rc.model.flags.use_kalman = false;
    rc.tracker.thr_a = 0.875;
    rc.train.lr = 3.3e-4;
    let config_ok = RunConfig::parse(&rc.to_text()).unwrap() == rc;

    let cfg = ModelConfig::gradcheck_toy();
    let model = Model::new(cfg.clone(), 3).unwrap();
    let path = dir.path().join("m.bin");
    save_checkpoint(&model, &path).unwrap();
    let ckpt_ok = load_checkpoint(&path, &cfg).unwrap().params() == model.params();

    let boxes: Vec<BBox> = (0..20)
        .map(|i| BBox::new(i as f64 * 1.25, 3.5, 10.0 + i as f64 / 8.0, 7.0).with_confidence(0.5))
        .collect();
    let rpath = dir.path().join("r.txt");
    write_results(&boxes, &rpath).unwrap();
    let back = read_results(&rpath).unwrap();
    let results_ok = back.len() == boxes.len()
        && back.iter().zip(&boxes).all(|(x, y)| x.x == y.x && x.y == y.y && x.w == y.w && x.h == y.h);

    let spec = SynthSpec {
        width: 48,
        height: 40,
        frames: 5,
        target_w: 10.0,
        target_h: 8.0,
        trajectory: Trajectory::Static { x: 20.0, y: 18.0 },
        degradations: vec![Degradation {
            attribute: Attribute::LowIllumination,
            start: 2,
            end: 4,
        }],
        ..SynthSpec::default()
    };
    let mut seq = synth_sequence(&spec, 5).unwrap();
    seq.name = "roundtrip".into();
    let sdir = dir.path().join("roundtrip");
    write_sequence(&seq, &sdir).unwrap();
    let seq_ok = load_sequence(&sdir).unwrap() == seq;

    check(
        same_run && config_ok && ckpt_ok && results_ok && seq_ok,
        format!("bit-identical rerun {same_run}, config {config_ok}, checkpoint {ckpt_ok}, results {results_ok}, sequence {seq_ok}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient integrity", c1_gradients),
        ("zero-prompt equivalence", c2_zero_prompt),
        ("fovea normalization", c3_fovea),
        ("kalman oracle", c4_kalman),
        ("metric oracle", c5_metrics),
        ("toy overfit", c6_overfit),
        ("mutual-prompt complementarity", c7_complementarity),
        ("gating", c8_gating),
        ("prompter share", c9_prompter_share),
        ("flop brackets", c10_flops),
        ("determinism and round trips", c11_determinism),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("criterion {n:2} PASS {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:2} FAIL {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
