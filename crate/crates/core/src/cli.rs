//! Command-line front end: `synth`, `train`, `eval`, `infer` and `sweep`.
//!
//! Settings resolve as defaults, then an optional JSON config file, then
//! flags. The resolved settings are written next to every output.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::eval::{self, compare, EvalOptions, ReportFile};
use crate::imageio;
use crate::model::{infer_shadow, Checkpoint, CHECKPOINT_VERSION};
use crate::phantom::{build_corpus, Corpus, PhantomSpec, MANIFEST_VERSION};
use crate::trainer::{fit, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

pub const EVAL_CONFIG_ECHO: &str = "eval_config.json";
pub const SWEEP_CONFIG_ECHO: &str = "sweep_config.json";
pub const SWEEP_RESULTS: &str = "sweep.csv";

pub fn version_string() -> String {
    format!(
        "{} (checkpoint format {CHECKPOINT_VERSION}, manifest {MANIFEST_VERSION}, report {})",
        env!("CARGO_PKG_VERSION"),
        eval::REPORT_FORMAT_VERSION
    )
}

#[derive(Parser, Debug)]
#[command(name = "sonoshadow", about = "Self-supervised acoustic shadow detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a labelled phantom corpus.
    Synth(SynthArgs),
    /// Train a model on a corpus's training split.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus's evaluation split.
    Eval(EvalArgs),
    /// Predict the shadow map of one image.
    Infer(InferArgs),
    /// Train and evaluate a grid of config variants, ranked by mean IoU.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    eval: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Phantom spec as JSON; without it the defaults for --size are used.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Side length of square phantoms.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct EvalFlags {
    /// Evaluation options as JSON.
    #[arg(long = "eval-config")]
    eval_config: Option<PathBuf>,
    /// Fixed binarization threshold.
    #[arg(long, conflicts_with = "select_tau")]
    tau: Option<f64>,
    /// Choose the binarization threshold by mean IoU (the default).
    #[arg(long)]
    select_tau: bool,
    /// Add the intensity-threshold baseline at this threshold.
    #[arg(long, conflicts_with = "baseline_select")]
    baseline_threshold: Option<f64>,
    /// Add the intensity-threshold baseline with its threshold chosen by
    /// mean IoU.
    #[arg(long)]
    baseline_select: bool,
    /// Score predictions over the whole image instead of only the fan.
    #[arg(long)]
    full_image: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overlay PNGs to write for the first evaluation images.
    #[arg(long, default_value_t = 8)]
    overlays: usize,
    #[command(flatten)]
    flags: EvalFlags,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Shadow map output (PNG or PGM).
    #[arg(long)]
    out: PathBuf,
    /// Overlay output; defaults to `<out stem>_overlay.png`.
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Base training config as JSON.
    #[arg(long)]
    config: PathBuf,
    /// JSON list of partial configs, each merged over the base.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: EvalFlags,
}

/// Bad invocation or configuration, found before any work starts.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Usage(msg.into()))
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let version = version_string();
    let matches = Cli::command().version(version).try_get_matches_from(args);
    let cli = match matches.and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn read_json(path: &Path) -> Outcome<Value> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
pub fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn set(obj: &mut Map<String, Value>, key: &str, value: Option<impl Serialize>) {
    if let Some(v) = value {
        obj.insert(key.to_string(), serde_json::to_value(v).expect("plain value"));
    }
}

fn typed<T: serde::de::DeserializeOwned>(value: Value, what: &str) -> Outcome<T> {
    serde_json::from_value(value).map_err(|e| Failure::Usage(format!("invalid {what}: {e}")))
}

fn cmd_synth(a: &SynthArgs) -> Outcome<()> {
    let spec = match &a.spec {
        Some(p) => typed(read_json(p)?, "phantom spec")?,
        None => PhantomSpec::for_image(a.size, a.size),
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let manifest = build_corpus(&spec, a.train, a.eval, a.seed, &a.out)?;
    println!(
        "wrote {} phantoms ({} train, {} eval) to {}",
        manifest.entries.len(),
        a.train,
        a.eval,
        a.out.display()
    );
    Ok(())
}

fn resolve_train(a: &TrainArgs) -> Outcome<TrainConfig> {
    let mut value = match &a.config {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    let Value::Object(obj) = &mut value else {
        return usage("training config must be a JSON object");
    };
    set(obj, "corpus", a.corpus.as_ref());
    set(obj, "out_dir", a.out.as_ref());
    set(obj, "epochs", a.epochs);
    set(obj, "batch_size", a.batch_size);
    set(obj, "learning_rate", a.learning_rate);
    set(obj, "momentum", a.momentum);
    set(obj, "seed", a.seed);
    set(obj, "checkpoint_every", a.checkpoint_every);
    set(obj, "resume", a.resume.as_ref());
    let cfg: TrainConfig = typed(value, "training config")?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Outcome<()> {
    let cfg = resolve_train(a)?;
    let out = fit(&cfg)?;
    let last = out.records.last();
    println!(
        "trained {} steps; final total loss {}; checkpoint {}",
        out.steps,
        last.map_or("n/a".to_string(), |r| format!("{:.6}", r.total)),
        out.checkpoint.display()
    );
    Ok(())
}

fn resolve_eval(f: &EvalFlags) -> Outcome<EvalOptions> {
    let mut value = match &f.eval_config {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    let Value::Object(obj) = &mut value else {
        return usage("evaluation options must be a JSON object");
    };
    if f.tau.is_some() {
        set(obj, "tau", f.tau);
    }
    if f.select_tau {
        obj.insert("tau".into(), Value::Null);
    }
    if let Some(t) = f.baseline_threshold {
        set(obj, "baseline_threshold", Some(t));
        set(obj, "include_baseline", Some(true));
    }
    if f.baseline_select {
        obj.insert("baseline_threshold".into(), Value::Null);
        set(obj, "include_baseline", Some(true));
    }
    if !obj.contains_key("include_baseline") {
        set(obj, "include_baseline", Some(false));
    }
    if f.full_image {
        set(obj, "restrict_to_fan", Some(false));
    }
    let opts: EvalOptions = typed(value, "evaluation options")?;
    for t in opts.tau.iter().chain(&opts.grid) {
        if !(*t > 0.0 && *t < 1.0) {
            return usage(format!("threshold {t} must lie in (0, 1)"));
        }
    }
    if opts.tau.is_none() && opts.grid.is_empty() {
        return usage("empty threshold grid");
    }
    if opts.include_baseline && opts.baseline_threshold.is_none() && opts.baseline_grid.is_empty() {
        return usage("empty baseline threshold grid");
    }
    Ok(opts)
}

/// Evaluates `checkpoint` on the evaluation split of `corpus` and writes
/// the report files (and `overlays` overlay PNGs) into `out`.
fn evaluate_into(checkpoint: &Path, corpus: &Path, out: &Path, opts: &EvalOptions, overlays: usize) -> Result<ReportFile> {
    let ck = Checkpoint::load(checkpoint)?;
    let corpus = Corpus::open(corpus)?;
    let samples = corpus.eval_samples()?;
    let cmp = compare(&ck.params, &samples, &corpus.manifest.spec.geometry, opts)?;
    let report = cmp.report_file(opts);
    report.write(out)?;
    if overlays > 0 {
        let dir = out.join("overlays");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, s) in samples.iter().enumerate().take(overlays) {
            let path = dir.join(format!("eval_{i:05}_model.png"));
            eval::write_overlay(&path, &s.image, &cmp.model_masks[i], Some(&s.truth))?;
            if let Some(m) = cmp.baseline_masks.get(i) {
                let path = dir.join(format!("eval_{i:05}_threshold.png"));
                eval::write_overlay(&path, &s.image, m, Some(&s.truth))?;
            }
        }
    }
    Ok(report)
}

fn print_reports(report: &ReportFile) {
    for r in &report.reports {
        print!(
            "{:<10} threshold {:<5} IoU {:.3} (±{:.3})  DICE {:.3} (±{:.3})",
            r.method, r.threshold, r.iou.mean, r.iou.std, r.dice.mean, r.dice.std
        );
        match &r.cavities {
            Some(c) => println!(
                "  cavity pixels flagged {}/{} in {} of {} images",
                c.flagged_pixels, c.cavity_pixels, c.images_flagged, c.images
            ),
            None => println!(),
        }
    }
}

fn cmd_eval(a: &EvalArgs) -> Outcome<()> {
    let opts = resolve_eval(&a.flags)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_json(
        &a.out.join(EVAL_CONFIG_ECHO),
        &json!({
            "checkpoint": a.checkpoint,
            "corpus": a.corpus,
            "overlays": a.overlays,
            "options": opts,
        }),
    )?;
    let report = evaluate_into(&a.checkpoint, &a.corpus, &a.out, &opts, a.overlays)?;
    print_reports(&report);
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Outcome<()> {
    if !(a.tau > 0.0 && a.tau < 1.0) {
        return usage(format!("tau {} must lie in (0, 1)", a.tau));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let image = imageio::load(&a.image)?;
    let shadow = infer_shadow(&ck.params, &image)?;
    imageio::save(&shadow, &a.out)?;
    let overlay = a.overlay.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        a.out.with_file_name(format!("{stem}_overlay.png"))
    });
    let mask = eval::binarize(&shadow, a.tau)?;
    eval::write_overlay(&overlay, &image, &mask, None)?;
    println!(
        "{} of {} pixels below tau {}; wrote {} and {}",
        mask.count(),
        mask.bits().len(),
        a.tau,
        a.out.display(),
        overlay.display()
    );
    Ok(())
}

/// One row of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub rank: usize,
    /// Position of the variant in the grid file.
    pub index: usize,
    pub overrides: String,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub tau: f64,
}

/// Orders rows by mean IoU, best first; equal scores keep grid order.
pub fn rank_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| b.iou_mean.total_cmp(&a.iou_mean).then(a.index.cmp(&b.index)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
}

fn cmd_sweep(a: &SweepArgs) -> Outcome<()> {
    let base = read_json(&a.config)?;
    if !base.is_object() {
        return usage("base config must be a JSON object");
    }
    let Value::Array(grid) = read_json(&a.grid)? else {
        return usage("grid must be a JSON list of partial configs");
    };
    if grid.is_empty() {
        return usage("grid is empty");
    }
    let opts = resolve_eval(&a.flags)?;
    // Resolve every variant up front so a bad one fails before training.
    let mut configs = Vec::with_capacity(grid.len());
    for (i, patch) in grid.iter().enumerate() {
        if !patch.is_object() {
            return usage(format!("grid entry {i} is not an object"));
        }
        let mut v = base.clone();
        merge_json(&mut v, patch);
        merge_json(&mut v, &json!({ "out_dir": a.out.join(format!("run_{i:03}")) }));
        let cfg: TrainConfig = typed(v, &format!("config for grid entry {i}"))?;
        cfg.validate().map_err(|e| Failure::Usage(format!("grid entry {i}: {e}")))?;
        configs.push(cfg);
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_json(
        &a.out.join(SWEEP_CONFIG_ECHO),
        &json!({ "base": base, "grid": grid, "eval": opts }),
    )?;

    let mut rows = Vec::with_capacity(configs.len());
    for (i, (cfg, patch)) in configs.iter().zip(&grid).enumerate() {
        log::info!("sweep variant {i}: {patch}");
        let trained = fit(cfg)?;
        let report = evaluate_into(&trained.checkpoint, &cfg.corpus, &cfg.out_dir.join("eval"), &opts, 0)?;
        let m = &report.reports[0];
        rows.push(SweepRow {
            rank: 0,
            index: i,
            overrides: patch.to_string(),
            iou_mean: m.iou.mean,
            iou_std: m.iou.std,
            dice_mean: m.dice.mean,
            dice_std: m.dice.std,
            tau: m.threshold,
        });
    }
    rank_rows(&mut rows);
    let path = a.out.join(SWEEP_RESULTS);
    let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
    for r in &rows {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    for r in &rows {
        println!("{:>3}. IoU {:.4} (±{:.4})  {}", r.rank, r.iou_mean, r.iou_std, r.overrides);
    }
    Ok(())
}
