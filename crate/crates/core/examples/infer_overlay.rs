//! Predicts the shadow map of one image and writes it with an overlay.
//!
//! cargo run --release --example infer_overlay -- <checkpoint> <image> [tau]

use std::path::PathBuf;

use sonoshadow::eval::{binarize, write_overlay};
use sonoshadow::imageio;
use sonoshadow::model::{infer_shadow, Checkpoint};

fn main() -> sonoshadow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [checkpoint, image, rest @ ..] = args.as_slice() else {
        eprintln!("usage: infer_overlay <checkpoint> <image> [tau]");
        std::process::exit(1);
    };
    let tau: f64 = rest.first().map_or(Ok(0.5), |t| t.parse()).unwrap_or_else(|_| {
        eprintln!("tau must be a number");
        std::process::exit(1);
    });

    let params = Checkpoint::load(&PathBuf::from(checkpoint))?.params;
    let x = imageio::load(&PathBuf::from(image))?;
    let shadow = infer_shadow(&params, &x)?;
    let mask = binarize(&shadow, tau)?;

    imageio::save(&shadow, &PathBuf::from("shadow_map.png"))?;
    write_overlay(&PathBuf::from("shadow_overlay.png"), &x, &mask, None)?;
    println!(
        "{} of {} pixels below tau {tau}; wrote shadow_map.png and shadow_overlay.png",
        mask.count(),
        mask.bits().len()
    );
    Ok(())
}
