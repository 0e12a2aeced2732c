//! Acceptance harness: one PASS/FAIL line per criterion, nonzero exit if
//! any fails. Runs the full default pipeline, so expect a few minutes.

mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use sonoshadow::eval::{compare, EvalOptions};
use sonoshadow::phantom::{build_corpus, held_out_samples, Corpus, PhantomSpec};
use sonoshadow::trainer::{fit, FitOutcome, StepRecord, TrainConfig};
use support::{grad, identities, metrics, runs};

const TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const EVAL_BUDGET: Duration = Duration::from_secs(60);
const GRAD_BUDGET: Duration = Duration::from_secs(30);

/// Held-out recovery floor and its regression pin (measured 0.841).
const RECOVERY_FLOOR: f64 = 0.5;
const RECOVERY_PIN: f64 = 0.82;
/// Mean IoU of the default run (measured 0.825).
const MODEL_IOU_PIN: f64 = 0.80;
/// Final over first epoch mean `l_s` of the default run (measured 0.578).
const SHADOW_LOSS_RATIO_PIN: f64 = 0.60;
const HELD_OUT: usize = 100;

struct Tally {
    failed: Vec<String>,
}

impl Tally {
    fn record(&mut self, id: &str, name: &str, outcome: Result<String, String>) {
        match outcome {
            Ok(detail) => println!("PASS  {id:<3} {name}: {detail}"),
            Err(detail) => {
                println!("FAIL  {id:<3} {name}: {detail}");
                self.failed.push(id.to_string());
            }
        }
    }
}

fn workdir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if dir.exists() {
        fs::remove_dir_all(&dir).expect("clear previous acceptance run");
    }
    fs::create_dir_all(&dir).expect("create acceptance dir");
    dir
}

fn epoch_mean(records: &[StepRecord], epoch: usize) -> f64 {
    let v: Vec<f64> = records.iter().filter(|r| r.epoch == epoch).map(|r| r.l_s).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct DefaultRun {
    corpus: PathBuf,
    dir: PathBuf,
    fit: FitOutcome,
    train_time: Duration,
}

fn default_run(dir: &Path) -> Result<DefaultRun, String> {
    let corpus = dir.join("corpus");
    build_corpus(&PhantomSpec::for_image(64, 64), 2000, 100, 0, &corpus).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        corpus: corpus.clone(),
        out_dir: dir.join("run"),
        ..Default::default()
    };
    let start = Instant::now();
    let fit = fit(&cfg).map_err(|e| e.to_string())?;
    Ok(DefaultRun {
        corpus,
        dir: dir.to_path_buf(),
        fit,
        train_time: start.elapsed(),
    })
}

fn main() -> ExitCode {
    let dir = workdir();
    let mut tally = Tally { failed: Vec::new() };

    // 3, 4, 5 are quick; run them first
    let start = Instant::now();
    let mut grads = Vec::new();
    for (name, check) in grad::all() {
        match check() {
            Ok(worst) => grads.push(format!("{name} {worst:.1e}")),
            Err(e) => grads.push(format!("{name} FAILED ({e})")),
        }
    }
    let elapsed = start.elapsed();
    let failed: Vec<&String> = grads.iter().filter(|g| g.contains("FAILED")).collect();
    tally.record(
        "3",
        "gradient suite",
        if !failed.is_empty() {
            Err(failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("; "))
        } else if elapsed > GRAD_BUDGET {
            Err(format!("took {elapsed:.1?} (budget {GRAD_BUDGET:?})"))
        } else {
            Ok(format!(
                "{} checks x {} cases, step {:e}, tol {:e}, {elapsed:.1?}; worst: {}",
                grads.len(),
                grad::CASES,
                grad::STEP,
                grad::TOL,
                grads.join(", ")
            ))
        },
    );

    let mut ids = Vec::new();
    let mut identity_failure = None;
    for (name, check) in identities::all() {
        match check() {
            Ok(_) => ids.push(name),
            Err(e) => {
                identity_failure = Some(e);
                break;
            }
        }
    }
    tally.record(
        "4",
        "loss identities",
        match identity_failure {
            Some(e) => Err(e),
            None => Ok(format!("{} identities on {} cases each: {}", ids.len(), identities::CASES, ids.join("; "))),
        },
    );

    tally.record(
        "5",
        "metric oracle",
        metrics::check_pairs(0).map(|(n, worst)| {
            format!("{n} random 16x16 pairs exact; DICE identity worst error {worst:.1e} (tol {:e})", metrics::IDENTITY_TOL)
        }),
    );

    let det = dir.join("determinism");
    let (a, b) = (det.join("a"), det.join("b"));
    let _ = fs::create_dir_all(&a).and_then(|_| fs::create_dir_all(&b));
    tally.record("6", "determinism", runs::pipeline_is_deterministic(&a, &b, 32, 2));

    let resume_dir = dir.join("resume");
    let _ = fs::create_dir_all(&resume_dir);
    let resume_cfg = TrainConfig {
        corpus: runs::small_corpus(&resume_dir, 64, 40, 4, 1),
        out_dir: resume_dir.join("run"),
        epochs: 30,
        checkpoint_every: 0,
        ..Default::default()
    };
    tally.record("7", "checkpoint resume", runs::resume_is_bit_exact(&resume_cfg, &resume_dir, 20, 100));

    // 1, 2, 8 and the training regression share the default run
    match default_run(&dir) {
        Err(e) => {
            for id in ["1", "2", "8", "R1", "R2"] {
                tally.record(id, "default run", Err(e.clone()));
            }
        }
        Ok(run) => shared_run_criteria(&mut tally, &run),
    }

    let total = 10;
    println!(
        "{} of {total} checks passed; artifacts under {}",
        total - tally.failed.len(),
        dir.display()
    );
    if tally.failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", tally.failed.join(", "));
        ExitCode::FAILURE
    }
}

fn shared_run_criteria(tally: &mut Tally, run: &DefaultRun) {
    let records = &run.fit.records;
    let finite = records.iter().all(|r| [r.l_ae, r.l_s, r.l_sreg, r.l_c, r.total].iter().all(|v| v.is_finite()));
    let last_epoch = records.last().map_or(0, |r| r.epoch);
    let ratio = epoch_mean(records, last_epoch) / epoch_mean(records, 0);
    tally.record(
        "R1",
        "shadow loss regression",
        if !finite {
            Err("non-finite loss in the log".into())
        } else if ratio <= SHADOW_LOSS_RATIO_PIN {
            Ok(format!(
                "{} steps all finite; final/first epoch mean l_s {ratio:.3} (pinned <= {SHADOW_LOSS_RATIO_PIN})",
                records.len()
            ))
        } else {
            Err(format!("final/first epoch mean l_s {ratio:.3} > {SHADOW_LOSS_RATIO_PIN}"))
        },
    );

    let outcome = (|| -> sonoshadow::Result<_> {
        let ck = sonoshadow::model::Checkpoint::load(&run.fit.checkpoint)?;
        let corpus = Corpus::open(&run.corpus)?;
        let samples = corpus.eval_samples()?;
        let fan = corpus.manifest.spec.geometry;
        let start = Instant::now();
        let cmp = compare(&ck.params, &samples, &fan, &EvalOptions::default())?;
        let eval_time = start.elapsed();
        let held = held_out_samples(&corpus.manifest.spec, HELD_OUT, 0)?;
        let opts = EvalOptions {
            tau: Some(cmp.model.threshold),
            include_baseline: false,
            ..Default::default()
        };
        let recovered = compare(&ck.params, &held, &fan, &opts)?;
        Ok((cmp, eval_time, recovered))
    })();
    let (cmp, eval_time, recovered) = match outcome {
        Ok(v) => v,
        Err(e) => {
            for id in ["1", "2", "8", "R2"] {
                tally.record(id, "evaluation", Err(e.to_string()));
            }
            return;
        }
    };

    let model = &cmp.model;
    let base = cmp.baseline.as_ref().expect("baseline requested");
    let detail = format!(
        "model IoU {:.4} (±{:.4}) DICE {:.4} (±{:.4}) at tau {}; threshold IoU {:.4} (±{:.4}) DICE {:.4} (±{:.4}) at t {}; train {:.0?}, eval {:.1?}",
        model.iou.mean,
        model.iou.std,
        model.dice.mean,
        model.dice.std,
        model.threshold,
        base.iou.mean,
        base.iou.std,
        base.dice.mean,
        base.dice.std,
        base.threshold,
        run.train_time,
        eval_time
    );
    tally.record(
        "1",
        "model beats thresholding",
        if model.iou.mean <= base.iou.mean {
            Err(detail)
        } else if run.train_time > TRAIN_BUDGET || eval_time > EVAL_BUDGET {
            Err(format!("over time budget: {detail}"))
        } else if model.iou.mean < MODEL_IOU_PIN {
            Err(format!("below pinned IoU {MODEL_IOU_PIN}: {detail}"))
        } else {
            Ok(detail)
        },
    );

    let r = recovered.model.iou.mean;
    let detail = format!(
        "mean IoU {r:.4} on {HELD_OUT} held-out phantoms at tau {} (floor {RECOVERY_FLOOR}, pinned {RECOVERY_PIN})",
        recovered.model.threshold
    );
    tally.record(
        "2",
        "shadow recovery",
        if r >= RECOVERY_FLOOR.max(RECOVERY_PIN) { Ok(detail) } else { Err(detail) },
    );

    let docs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs");
    let doc_files = ["failure_mode.md", "failure_mode.png"].map(|f| docs.join(f));
    let missing: Vec<String> = doc_files.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    tally.record(
        "8",
        "cavity failure mode",
        match (&model.cavities, missing.is_empty()) {
            (Some(c), true) if c.flagged_pixels > 0 => Ok(format!(
                "model flags {}/{} cavity pixels ({:.1}%) in {} of {} images; thresholding flags {}; documented in docs/failure_mode.md",
                c.flagged_pixels,
                c.cavity_pixels,
                100.0 * c.flagged_fraction,
                c.images_flagged,
                c.images,
                base.cavities.as_ref().map_or("n/a".into(), |b| format!("{}/{}", b.flagged_pixels, b.cavity_pixels))
            )),
            (Some(c), true) => Err(format!("no cavity pixels flagged (of {})", c.cavity_pixels)),
            (None, _) => Err("report carries no cavity statistics".into()),
            (_, false) => Err(format!("missing {}", missing.join(", "))),
        },
    );

    tally.record("R2", "shadow weight sweep", shadow_weight_sweep(run, model.iou.mean));
}

/// The default run is the λ_s = 10 variant; trains the λ_s = 1 variant on
/// the same corpus and ranks the two by mean IoU.
fn shadow_weight_sweep(run: &DefaultRun, default_iou: f64) -> Result<String, String> {
    let mut cfg = TrainConfig {
        corpus: run.corpus.clone(),
        out_dir: run.dir.join("run_lambda_s_1"),
        ..Default::default()
    };
    if cfg.weights.lambda_s != 10.0 {
        return Err(format!("default lambda_s is {}, expected 10", cfg.weights.lambda_s));
    }
    cfg.weights.lambda_s = 1.0;
    let other = (|| -> sonoshadow::Result<f64> {
        let fit = fit(&cfg)?;
        let ck = sonoshadow::model::Checkpoint::load(&fit.checkpoint)?;
        let corpus = Corpus::open(&run.corpus)?;
        let opts = EvalOptions {
            include_baseline: false,
            ..Default::default()
        };
        let cmp = compare(&ck.params, &corpus.eval_samples()?, &corpus.manifest.spec.geometry, &opts)?;
        Ok(cmp.model.iou.mean)
    })()
    .map_err(|e| e.to_string())?;
    let detail = format!("lambda_s = 10 IoU {default_iou:.4}, lambda_s = 1 IoU {other:.4}");
    if default_iou > other {
        Ok(format!("{detail}; lambda_s = 10 ranked first"))
    } else {
        Err(format!("{detail}; lambda_s = 1 ranked first"))
    }
}
