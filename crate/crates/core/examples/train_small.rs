//! Trains the default model on a small corpus and prints per-epoch loss
//! means. About a minute on one core.
//!
//! cargo run --release --example train_small -- [work_dir]

use std::path::PathBuf;

use sonoshadow::phantom::{build_corpus, PhantomSpec};
use sonoshadow::trainer::{fit, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "train_small".into()));
    std::fs::create_dir_all(&dir)?;
    let corpus = dir.join("corpus");
    build_corpus(&PhantomSpec::for_image(64, 64), 1000, 50, 0, &corpus)?;

    let cfg = TrainConfig {
        corpus,
        out_dir: dir.join("run"),
        epochs: 10,
        checkpoint_every: 0,
        ..Default::default()
    };
    let out = fit(&cfg)?;
    println!("epoch   l_ae      l_s       l_sreg    total");
    for epoch in 0..cfg.epochs {
        let rows: Vec<_> = out.records.iter().filter(|r| r.epoch == epoch).collect();
        let mean = |f: fn(&sonoshadow::trainer::StepRecord) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
        println!(
            "{epoch:>5}   {:.5}   {:.5}   {:.5}   {:.5}",
            mean(|r| r.l_ae),
            mean(|r| r.l_s),
            mean(|r| r.l_sreg),
            mean(|r| r.total)
        );
    }
    println!("checkpoint {}", out.checkpoint.display());
    Ok(())
}
