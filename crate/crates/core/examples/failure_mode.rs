//! Renders the evaluation image on which the model mistakes the most
//! dark-cavity pixels for shadow. Panels, left to right: input; prediction
//! (red) over truth (green); cavity (blue) with the falsely flagged cavity
//! pixels in red.
//!
//! cargo run --release --example failure_mode -- <checkpoint> <corpus> <out.png>
//!
//! Defaults point at the artifacts the acceptance harness leaves under
//! `target/tmp/acceptance`.

use std::path::PathBuf;

use sonoshadow::eval::{compare, overlay, EvalOptions};
use sonoshadow::imageio::{quantize, write_rgb_png};
use sonoshadow::model::Checkpoint;
use sonoshadow::phantom::Corpus;

const SCALE: usize = 4;
const GAP: usize = 4;

fn main() -> sonoshadow::Result<()> {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let checkpoint = args.next().unwrap_or_else(|| "target/tmp/acceptance/run/final.shdw".into());
    let corpus = args.next().unwrap_or_else(|| "target/tmp/acceptance/corpus".into());
    let out = args.next().unwrap_or_else(|| "docs/failure_mode.png".into());

    let params = Checkpoint::load(&checkpoint)?.params;
    let corpus = Corpus::open(&corpus)?;
    let samples = corpus.eval_samples()?;
    let cmp = compare(&params, &samples, &corpus.manifest.spec.geometry, &EvalOptions::default())?;

    // cavity pixels outside the true shadow that the model flags
    let mut worst = (0, 0, None);
    for (i, (s, pred)) in samples.iter().zip(&cmp.model_masks).enumerate() {
        let Some(cav) = &s.cavities else { continue };
        let wrong = pred.and(&cav.and_not(&s.truth)?)?;
        if wrong.count() > worst.1 {
            worst = (i, wrong.count(), Some(wrong));
        }
    }
    let (index, flagged, Some(wrong)) = worst else {
        println!("no cavity pixel is flagged at tau {}", cmp.model.threshold);
        return Ok(());
    };
    let s = &samples[index];
    let cav = s.cavities.as_ref().expect("selected sample has cavities");
    let (w, h) = (s.truth.width(), s.truth.height());

    let gray: Vec<u8> = s.image.data().iter().map(|&v| quantize(v)).collect::<sonoshadow::Result<_>>()?;
    let input: Vec<u8> = gray.iter().flat_map(|&g| [g, g, g]).collect();
    let pred = overlay(&s.image, &cmp.model_masks[index], Some(&s.truth))?;
    let mut cavity = input.clone();
    for (p, px) in cavity.chunks_mut(3).enumerate() {
        let (r, c) = (p / w, p % w);
        if wrong.get(r, c) {
            px.copy_from_slice(&[255, 0, 0]);
        } else if cav.get(r, c) {
            px.copy_from_slice(&[0, 0, 255]);
        }
    }

    let panels = [input, pred, cavity];
    let (pw, ph) = (w * SCALE, h * SCALE);
    let width = panels.len() * pw + (panels.len() - 1) * GAP;
    let mut canvas = vec![255u8; width * ph * 3];
    for (k, panel) in panels.iter().enumerate() {
        for y in 0..ph {
            for x in 0..pw {
                let src = ((y / SCALE) * w + x / SCALE) * 3;
                let dst = (y * width + k * (pw + GAP) + x) * 3;
                canvas[dst..dst + 3].copy_from_slice(&panel[src..src + 3]);
            }
        }
    }
    write_rgb_png(&out, width, ph, &canvas)?;

    let c = cmp.model.cavities.as_ref().expect("corpus has cavity masks");
    println!("tau {}; evaluation image {index}", cmp.model.threshold);
    println!(
        "this image: {flagged} of {} cavity pixels flagged, IoU {:.3}",
        cav.and_not(&s.truth)?.count(),
        cmp.model.per_image[index].iou
    );
    println!(
        "all images: {} of {} cavity pixels flagged ({:.1}%) in {} of {} images",
        c.flagged_pixels,
        c.cavity_pixels,
        100.0 * c.flagged_fraction,
        c.images_flagged,
        c.images
    );
    if let Some(b) = cmp.baseline.as_ref().and_then(|b| b.cavities.as_ref()) {
        println!("thresholding: {} of {} cavity pixels flagged", b.flagged_pixels, b.cavity_pixels);
    }
    println!("wrote {}", out.display());
    Ok(())
}
