//! Verifies the analytic gradient of a small conv → leaky → deconv →
//! sigmoid chain against central differences.
//!
//! cargo run --example gradcheck

use rand::{Rng as _, SeedableRng};
use sonoshadow::rng::Rng;
use sonoshadow::tensor::gradcheck::check;
use sonoshadow::tensor::Tensor;

fn main() -> sonoshadow::Result<()> {
    let mut rng = Rng::seed_from_u64(1);
    let mut draw = |shape: &[usize]| Tensor::<f64>::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0));
    let inputs = [
        draw(&[1, 1, 8, 8]),
        draw(&[3, 1, 4, 4]),
        draw(&[3]),
        draw(&[3, 1, 4, 4]),
        draw(&[1]),
    ];
    let report = check(&inputs, 1e-3, |g, v| {
        let h = g.conv2d(v[0], v[1], v[2], 2, 1)?;
        let h = g.leaky_relu(h, 0.1)?;
        let y = g.deconv2d(h, v[3], v[4], 2, 1)?;
        let y = g.sigmoid(y);
        let y = g.square(y);
        Ok(g.mean(y))
    })?;
    println!("checked {} partial derivatives", report.checked);
    println!(
        "worst relative error {:.2e} at input {} element {} (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_error, report.worst.0, report.worst.1, report.analytic, report.numeric
    );
    Ok(())
}
