//! Command-line entry points.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::eval::accounting::{count_flops, count_flops_single, count_params_for, encoder_layer_params};
use crate::eval::attention::export_attention;
use crate::eval::gradsuite::{run_suite, TOLERANCE};
use crate::eval::metrics::{curve_text, evaluate};
use crate::eval::synth::{random_spec, synth_sequence, Attribute, Degradation, SynthSpec, Trajectory};
use crate::eval::toy::sample_at;
use crate::io::checkpoint::{load_checkpoint, save_checkpoint};
use crate::io::config::{load_config, save_config, RunConfig};
use crate::io::results::{read_results, write_results};
use crate::io::sequence::{load_sequence, parse_groundtruth, write_sequence};
use crate::model::config::ModelConfig;
use crate::model::train::{train, TrainConfig};
use crate::model::Model;
use crate::prompter::prompter_param_count;
use crate::tracking::tracker::{crop_pair, track_sequence};

#[derive(Parser, Debug)]
#[command(name = "mplt", version, about = "RGB-T tracking with mutual multi-modal prompting")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// `key = value` run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Remove every prompter (implies --no-sa and --no-ta).
    #[arg(long, global = true)]
    pub no_mvip: bool,
    /// Remove spatial attention from the prompters.
    #[arg(long, global = true)]
    pub no_sa: bool,
    /// Remove token attention from the prompters.
    #[arg(long, global = true)]
    pub no_ta: bool,
    /// Disable confidence-gated template update.
    #[arg(long, global = true)]
    pub no_tu: bool,
    /// Disable Kalman-filter correction.
    #[arg(long, global = true)]
    pub no_kf: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic RGB-T sequences.
    Synth(SynthArgs),
    /// Train a small model on synthetic data or a sequence directory.
    TrainToy(TrainArgs),
    /// Run the tracker over a sequence directory.
    Track(TrackArgs),
    /// Precision and success from results and ground truth.
    Eval(EvalArgs),
    /// Parameter and MAC tables.
    Bench,
    /// Finite-difference check of every operation and the end-to-end loss.
    Gradcheck(GradcheckArgs),
    /// Export template-to-search attention grids.
    DumpAttention(AttentionArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    /// linear, sinusoidal or static.
    #[arg(long, default_value = "linear")]
    pub trajectory: String,
    /// Degraded segment `TAG:START:END` with TAG one of LI, TC, FL.
    #[arg(long = "segment")]
    pub segments: Vec<String>,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    /// Train on every frame of these sequences instead of one synthetic pair.
    #[arg(long = "sequence")]
    pub sequences: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrackArgs {
    #[arg(long = "sequence", required = true)]
    pub sequences: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Results file per sequence.
    #[arg(long = "results", required = true)]
    pub results: Vec<PathBuf>,
    /// Sequence directory or ground-truth file, one per results file.
    #[arg(long = "gt", required = true)]
    pub gt: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Elements checked per tensor in the end-to-end check.
    #[arg(long, default_value_t = 16)]
    pub per_tensor: usize,
}

#[derive(Args, Debug)]
pub struct AttentionArgs {
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub frame: usize,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Applies the ablation switches. `--no-mvip` removes the prompters whatever
/// the other prompter switches say.
pub fn apply_ablations(cfg: &mut ModelConfig, g: &GlobalArgs) {
    if g.no_mvip {
        cfg.flags.use_mvip = false;
    }
    if g.no_sa {
        cfg.flags.use_spatial_attn = false;
    }
    if g.no_ta {
        cfg.flags.use_token_attn = false;
    }
    if g.no_tu {
        cfg.flags.use_template_update = false;
    }
    if g.no_kf {
        cfg.flags.use_kalman = false;
    }
}

struct Run {
    cfg: RunConfig,
    from_file: bool,
    out: PathBuf,
}

fn prepare(g: &GlobalArgs) -> Result<Run> {
    let (mut cfg, from_file) = match &g.config {
        Some(p) => (load_config(p)?, true),
        None => (RunConfig::default(), false),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output = Some(o.clone());
    }
    apply_ablations(&mut cfg.model, g);
    cfg.validate()?;
    let out = cfg.output.clone().unwrap_or_else(|| PathBuf::from("mplt-out"));
    Ok(Run { cfg, from_file, out })
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p)?;
    Ok(())
}

/// Model config for commands that default to the desk-scale model.
fn toy_model_config(run: &Run, dim: usize, layers: usize) -> ModelConfig {
    if run.from_file {
        return run.cfg.model.clone();
    }
    let mut m = ModelConfig::tracking_toy(dim, layers);
    m.flags = run.cfg.model.flags;
    m
}

fn load_model(run: &Run, checkpoint: Option<&PathBuf>) -> Result<Model> {
    let cfg = if run.from_file { run.cfg.model.clone() } else { toy_model_config(run, 64, 3) };
    match checkpoint.or(run.cfg.checkpoint.as_ref()) {
        Some(p) => load_checkpoint(p, &cfg),
        None => {
            eprintln!("no checkpoint given; using a randomly initialized model (seed {})", run.cfg.seed);
            Model::new(cfg, run.cfg.seed)
        }
    }
}

fn parse_segment(s: &str) -> Result<Degradation> {
    let bad = || Error::InvalidValue {
        key: "segment".into(),
        msg: format!("`{s}` is not TAG:START:END"),
    };
    let parts: Vec<&str> = s.split(':').collect();
    let [tag, a, b] = parts.as_slice() else {
        return Err(bad());
    };
    Ok(Degradation {
        attribute: Attribute::from_tag(tag).ok_or_else(bad)?,
        start: a.parse().map_err(|_| bad())?,
        end: b.parse().map_err(|_| bad())?,
    })
}

fn cmd_synth(run: &Run, a: &SynthArgs) -> Result<()> {
    let base = SynthSpec {
        width: a.size,
        height: a.size,
        frames: a.frames,
        noise: a.noise,
        degradations: a.segments.iter().map(|s| parse_segment(s)).collect::<Result<_>>()?,
        ..SynthSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
    ensure_dir(&run.out)?;
    for i in 0..a.count {
        let mut spec = random_spec(&base, &mut rng);
        let (x, y) = spec.trajectory.center(0);
        spec.trajectory = match a.trajectory.as_str() {
            "linear" => spec.trajectory,
            "static" => Trajectory::Static { x, y },
            "sinusoidal" => Trajectory::Sinusoidal {
                x,
                y,
                ax: a.size as f64 * 0.15,
                ay: a.size as f64 * 0.1,
                period: a.frames.max(2) as f64,
            },
            other => {
                return Err(Error::InvalidValue {
                    key: "trajectory".into(),
                    msg: format!("unknown trajectory `{other}`"),
                })
            }
        };
        let mut seq = synth_sequence(&spec, run.cfg.seed.wrapping_add(i as u64))?;
        seq.name = format!("seq{i:03}");
        let dir = run.out.join(&seq.name);
        write_sequence(&seq, &dir)?;
        println!("{}", dir.display());
    }
    Ok(())
}

fn cmd_train(run: &Run, a: &TrainArgs) -> Result<()> {
    let mcfg = toy_model_config(run, a.dim, a.layers);
    let mut tcfg = if run.from_file { run.cfg.train.clone() } else { TrainConfig::toy(500) };
    if let Some(s) = a.steps {
        tcfg.steps = s;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
    let tracker = run.cfg.tracker;
    let mut samples = Vec::new();
    if a.sequences.is_empty() {
        // one frame pair: the overfit setting
        let spec = SynthSpec {
            frames: 2,
            ..SynthSpec::default()
        };
        let seq = synth_sequence(&spec, run.cfg.seed)?;
        samples.push(sample_at(&seq, 1, &mcfg, &tracker, 0.0, &mut rng)?);
    } else {
        for p in &a.sequences {
            let seq = load_sequence(p)?;
            for t in 1..seq.len() {
                samples.push(sample_at(&seq, t, &mcfg, &tracker, 0.25, &mut rng)?);
            }
        }
    }
    let mut model = Model::new(mcfg.clone(), run.cfg.seed)?;
    let start = Instant::now();
    let every = (tcfg.steps / 10).max(1);
    let hist = train(&mut model, &samples, &tcfg, |i, l| {
        if i % every == 0 || i + 1 == tcfg.steps {
            println!("step {i:>5}  loss {:.5}  focal {:.5}  giou {:.5}  l1 {:.5}", l.total, l.focal, l.giou, l.l1);
        }
    })?;
    ensure_dir(&run.out)?;
    let ckpt = run.out.join("model.bin");
    save_checkpoint(&model, &ckpt)?;
    let snapshot = RunConfig {
        model: mcfg.clone(),
        train: tcfg,
        checkpoint: Some(ckpt.clone()),
        ..run.cfg.clone()
    };
    save_config(&snapshot, &run.out.join("config.txt"))?;
    let losses: String = hist.iter().enumerate().map(|(i, l)| format!("{i},{:.9}\n", l.total)).collect();
    std::fs::write(run.out.join("loss.csv"), losses)?;
    if let (Some(first), Some(last)) = (hist.first(), hist.last()) {
        println!(
            "loss {:.5} -> {:.5} ({:.1}% reduction) in {:.1}s",
            first.total,
            last.total,
            100.0 * (1.0 - last.total / first.total),
            start.elapsed().as_secs_f64()
        );
    }
    let s = &samples[0];
    let geom = crate::tracking::crop::CropGeometry::identity(mcfg.search_size.w);
    let b = model.predict(s.template.as_ref(), s.search.as_ref(), &geom)?;
    println!("first sample IoU {:.4}", b.iou(&s.gt));
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn cmd_track(run: &Run, a: &TrackArgs) -> Result<()> {
    let model = load_model(run, a.checkpoint.as_ref())?;
    ensure_dir(&run.out)?;
    for dir in &a.sequences {
        let seq = load_sequence(dir)?;
        let start = Instant::now();
        let boxes = track_sequence(&seq.frames, &seq.gt[0], &model, &run.cfg.tracker)?;
        let secs = start.elapsed().as_secs_f64();
        let path = run.out.join(format!("{}.txt", seq.name));
        write_results(&boxes, &path)?;
        println!("{}  {} frames  {:.2} frames/s", path.display(), boxes.len(), boxes.len() as f64 / secs.max(1e-9));
    }
    Ok(())
}

fn read_gt(p: &Path) -> Result<Vec<BBox>> {
    if p.is_dir() {
        let gt = p.join(crate::io::sequence::GROUNDTRUTH);
        parse_groundtruth(&std::fs::read_to_string(&gt)?, &gt)
    } else {
        parse_groundtruth(&std::fs::read_to_string(p)?, p)
    }
}

fn cmd_eval(run: &Run, a: &EvalArgs) -> Result<()> {
    if a.results.len() != a.gt.len() {
        return Err(Error::config(format!("{} results files but {} ground truths", a.results.len(), a.gt.len())));
    }
    let mut seqs = Vec::new();
    for (r, g) in a.results.iter().zip(&a.gt) {
        let name = r.file_stem().map_or_else(|| r.display().to_string(), |s| s.to_string_lossy().into_owned());
        seqs.push((name, read_results(r)?, read_gt(g)?));
    }
    let report = evaluate(&seqs, None)?;
    ensure_dir(&run.out)?;
    std::fs::write(run.out.join("precision.csv"), curve_text(&report.precision))?;
    std::fs::write(run.out.join("success.csv"), curve_text(&report.success))?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_bench(run: &Run) -> Result<()> {
    let cfg = &run.cfg.model;
    let all = count_params_for(cfg, false);
    let tr = count_params_for(cfg, true);
    println!("parameters (all)");
    print!("{}", all.render(" M", 1e6));
    println!("parameters (encoder frozen)");
    print!("{}", tr.render(" M", 1e6));
    let pc = prompter_param_count(cfg);
    let layer = encoder_layer_params(cfg);
    println!(
        "prompters per layer {} = {:.3}% of one encoder layer ({})",
        pc.per_layer,
        100.0 * pc.per_layer as f64 / layer as f64,
        layer
    );
    println!("MACs (dual branch)");
    print!("{}", count_flops(cfg).render());
    println!("MACs (single branch)");
    print!("{}", count_flops_single(cfg).render());
    Ok(())
}

fn cmd_gradcheck(run: &Run, a: &GradcheckArgs) -> Result<bool> {
    let entries = run_suite(run.cfg.seed, Some(a.per_tensor))?;
    let mut ok = true;
    for e in &entries {
        let pass = e.passed();
        ok &= pass;
        println!(
            "{:<24} {:>6} checked  max rel err {:.3e}  {}",
            e.name,
            e.report.checked,
            e.report.max_rel_err,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("{} (tolerance {TOLERANCE:e})", if ok { "all checks passed" } else { "gradient check failed" });
    Ok(ok)
}

fn cmd_attention(run: &Run, a: &AttentionArgs) -> Result<()> {
    let model = load_model(run, a.checkpoint.as_ref())?;
    let seq = load_sequence(&a.sequence)?;
    if a.frame >= seq.len() {
        return Err(Error::config(format!("frame {} out of range ({} frames)", a.frame, seq.len())));
    }
    let cfg = model.config();
    let t = &run.cfg.tracker;
    let (z, _) = crop_pair(seq.frames[0].as_ref(), &seq.gt[0], t.template_context, cfg.template_size.w)?;
    let (x, _) = crop_pair(seq.frames[a.frame].as_ref(), &seq.gt[a.frame], t.search_context, cfg.search_size.w)?;
    let (g, paths) = export_attention(&model, z.as_ref(), x.as_ref(), a.layer, &run.out)?;
    println!("{}\n{}", paths.rgb.display(), paths.tir.display());
    println!("max row-sum error {:.3e}", g.max_row_error);
    Ok(())
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let r = prepare(&cli.global)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&r, a)?,
        Command::TrainToy(a) => cmd_train(&r, a)?,
        Command::Track(a) => cmd_track(&r, a)?,
        Command::Eval(a) => cmd_eval(&r, a)?,
        Command::Bench => cmd_bench(&r)?,
        Command::Gradcheck(a) => return Ok(if cmd_gradcheck(&r, a)? { 0 } else { 1 }),
        Command::DumpAttention(a) => cmd_attention(&r, a)?,
    }
    Ok(0)
}

/// Parses `argv` and runs it. Usage errors exit with clap's code (2).
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
