//! Small end-to-end runs shared by the training tests and the acceptance
//! harness.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::json;
use sonoshadow::model::{ArchConfig, Checkpoint};
use sonoshadow::phantom::{build_corpus, Corpus, PhantomSpec};
use sonoshadow::trainer::{StepRecord, TrainConfig, Trainer, FINAL_CHECKPOINT, LOG_FILE};

pub fn small_corpus(dir: &Path, size: usize, train: usize, eval: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("corpus_{size}"));
    build_corpus(&PhantomSpec::for_image(size, size), train, eval, seed, &out).expect("corpus builds");
    out
}

pub fn small_arch(size: usize) -> ArchConfig {
    ArchConfig {
        input_size: (size, size),
        enc_channels: vec![4, 8],
        ..Default::default()
    }
}

/// Trains `before + after` steps straight through, and again with a
/// save/load round trip after `before` steps. Every record after the
/// break and the final checkpoint bytes must agree exactly.
pub fn resume_is_bit_exact(cfg: &TrainConfig, dir: &Path, before: u64, after: u64) -> Result<String, String> {
    let corpus = Corpus::open(&cfg.corpus).map_err(|e| e.to_string())?;
    let images = corpus.train_images().map_err(|e| e.to_string())?;
    let geometry = corpus.manifest.spec.geometry;
    let fresh = || Trainer::new(cfg.clone(), geometry, images.clone()).map_err(|e| e.to_string());
    let steps = |t: &mut Trainer, n: u64| -> Result<Vec<StepRecord>, String> {
        (0..n).map(|_| t.step().map_err(|e| e.to_string())).collect()
    };
    if fresh()?.total_steps() < before + after {
        return Err(format!("config runs fewer than {} steps", before + after));
    }

    let mut straight = fresh()?;
    let expected = steps(&mut straight, before + after)?.split_off(before as usize);

    let mut first = fresh()?;
    steps(&mut first, before)?;
    let path = dir.join("break.shdw");
    first.checkpoint().save(&path).map_err(|e| e.to_string())?;
    drop(first);
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::resume(cfg.clone(), geometry, images.clone(), loaded).map_err(|e| e.to_string())?;
    let got = steps(&mut resumed, after)?;

    if let Some(i) = (0..after as usize).find(|&i| got[i] != expected[i]) {
        return Err(format!("step {} differs: {:?} vs {:?}", expected[i].step, got[i], expected[i]));
    }
    let (a, b) = (straight.checkpoint().to_bytes(), resumed.checkpoint().to_bytes());
    match (a, b) {
        (Ok(a), Ok(b)) if a == b => Ok(format!("{after} steps after a break at step {before} match bit for bit")),
        (Ok(_), Ok(_)) => Err("final checkpoints differ".into()),
        (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
    }
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sonoshadow"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut all = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).unwrap_or_default();
                all.push((p.strip_prefix(dir).unwrap_or(&p).to_path_buf(), bytes));
            }
        }
    }
    all.sort();
    all
}

/// Runs synth, train and eval through the binary into `root`.
fn pipeline(root: &Path, size: usize, epochs: usize) -> Result<(), String> {
    let corpus = root.join("corpus");
    let s = |p: &Path| p.to_string_lossy().into_owned();
    cli(&["synth", "--out", &s(&corpus), "--train", "24", "--eval", "8", "--size", &size.to_string(), "--seed", "11"])?;
    let cfg = root.join("cfg.json");
    let body = json!({ "arch": small_arch(size), "epochs": epochs, "batch_size": 4, "seed": 3 });
    fs::write(&cfg, body.to_string()).map_err(|e| e.to_string())?;
    let run = root.join("run");
    cli(&["train", "--config", &s(&cfg), "--corpus", &s(&corpus), "--out", &s(&run)])?;
    let ck = run.join(FINAL_CHECKPOINT);
    cli(&["eval", "--checkpoint", &s(&ck), "--corpus", &s(&corpus), "--out", &s(&root.join("eval")), "--baseline-select"])
}

/// Runs the pipeline twice in separate directories and compares the
/// corpus files, loss log, checkpoint and report files byte for byte.
pub fn pipeline_is_deterministic(a: &Path, b: &Path, size: usize, epochs: usize) -> Result<String, String> {
    pipeline(a, size, epochs)?;
    pipeline(b, size, epochs)?;
    let corpus = (files(&a.join("corpus")), files(&b.join("corpus")));
    if corpus.0 != corpus.1 {
        return Err("corpus files differ".into());
    }
    for name in [LOG_FILE, FINAL_CHECKPOINT] {
        if fs::read(a.join("run").join(name)).ok() != fs::read(b.join("run").join(name)).ok() {
            return Err(format!("{name} differs"));
        }
    }
    let reports = (files(&a.join("eval")), files(&b.join("eval")));
    let keep = |v: &[(PathBuf, Vec<u8>)]| -> Vec<(PathBuf, Vec<u8>)> {
        // the config echo records the (different) directories
        v.iter().filter(|(p, _)| !p.ends_with("eval_config.json")).cloned().collect()
    };
    if keep(&reports.0) != keep(&reports.1) {
        return Err("report files differ".into());
    }
    Ok(format!("{} corpus files, log, checkpoint and {} report files identical", corpus.0.len(), reports.0.len() - 1))
}
