//! Builds a small labelled corpus and summarises its manifest.
//!
//! cargo run --example phantom_corpus -- [out_dir]

use std::path::PathBuf;

use sonoshadow::phantom::{build_corpus, Corpus, PhantomSpec, Role};

fn main() -> sonoshadow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "phantom_corpus".into()));
    let spec = PhantomSpec::for_image(64, 64);
    let manifest = build_corpus(&spec, 40, 10, 3, &out)?;
    println!("{} entries under {}", manifest.entries.len(), out.display());

    let corpus = Corpus::open(&out)?;
    let samples = corpus.eval_samples()?;
    let shadow: usize = samples.iter().map(|s| s.truth.count()).sum();
    let cavity: usize = samples.iter().filter_map(|s| s.cavities.as_ref()).map(|c| c.count()).sum();
    let pixels = samples.len() * spec.width * spec.height;
    println!(
        "{} training images, {} evaluation pairs",
        corpus.entries(Role::Train).count(),
        samples.len()
    );
    println!(
        "evaluation shadow pixels {:.1}%, cavity pixels {:.1}%",
        100.0 * shadow as f64 / pixels as f64,
        100.0 * cavity as f64 / pixels as f64
    );
    Ok(())
}
