//! Samples random shadow sectors inside the imaging fan, rasterizes them and
//! darkens a phantom with the result.
//!
//! cargo run --example shadow_synthesis -- [out_dir]

use std::path::PathBuf;

use rand::SeedableRng;
use sonoshadow::imageio;
use sonoshadow::phantom::{generate_phantom, PhantomSpec};
use sonoshadow::rng::Rng;
use sonoshadow::shadow::{inject, rasterize_mask, sample_sectors, shadow_region, SamplingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "shadow_synthesis".into()));
    std::fs::create_dir_all(&out)?;

    let spec = PhantomSpec::for_image(64, 64);
    let mut rng = Rng::seed_from_u64(7);
    let phantom = generate_phantom(&spec, &mut rng)?;
    let sampling = SamplingConfig::default();

    for i in 0..4 {
        let sectors = sample_sectors(&spec.geometry, &mut rng, &sampling)?;
        let mask = rasterize_mask(&sectors, &spec.geometry, 64, 64);
        let shadowed = inject(&phantom.shadow_free, &mask)?;
        println!(
            "variant {i}: {} sector(s), {} pixels attenuated",
            sectors.len(),
            shadow_region(&mask).count()
        );
        for s in &sectors {
            println!("  {s:?}");
        }
        imageio::save(&mask.to_tensor(), &out.join(format!("mask_{i}.png")))?;
        imageio::save(&shadowed, &out.join(format!("shadowed_{i}.png")))?;
    }
    imageio::save(&phantom.shadow_free, &out.join("clean.png"))?;
    println!("wrote images to {}", out.display());
    Ok(())
}
