//! Scores a checkpoint against the intensity-threshold baseline on a
//! corpus's evaluation split.
//!
//! cargo run --release --example evaluate -- <checkpoint> <corpus>
//!
//! `train_small` writes a suitable pair under `train_small/`.

use std::path::PathBuf;

use sonoshadow::eval::{compare, EvalOptions};
use sonoshadow::model::Checkpoint;
use sonoshadow::phantom::Corpus;

fn main() -> sonoshadow::Result<()> {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let checkpoint = args.next().unwrap_or_else(|| "train_small/run/final.shdw".into());
    let corpus = args.next().unwrap_or_else(|| "train_small/corpus".into());

    let ck = Checkpoint::load(&checkpoint)?;
    let corpus = Corpus::open(&corpus)?;
    let samples = corpus.eval_samples()?;
    let cmp = compare(&ck.params, &samples, &corpus.manifest.spec.geometry, &EvalOptions::default())?;

    println!("{:<10} {:>9} {:>16} {:>16} {:>14}", "method", "threshold", "IoU", "DICE", "cavity px");
    for r in [Some(&cmp.model), cmp.baseline.as_ref()].into_iter().flatten() {
        let cav = r.cavities.as_ref().map_or("-".into(), |c| format!("{}/{}", c.flagged_pixels, c.cavity_pixels));
        println!(
            "{:<10} {:>9} {:>8.3} ±{:.3} {:>8.3} ±{:.3} {:>14}",
            r.method, r.threshold, r.iou.mean, r.iou.std, r.dice.mean, r.dice.std, cav
        );
    }
    Ok(())
}
