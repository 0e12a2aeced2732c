//! Exact loss identities, each checked on `CASES` random inputs.

use rand::{Rng as _, SeedableRng};
use sonoshadow::losses::{loss_ae, loss_content, loss_shadow, loss_sreg, losses_in, LossWeights, ShadowTargets};
use sonoshadow::model::{forward_in, init_params_as, ArchConfig, ModelParams};
use sonoshadow::rng::Rng;
use sonoshadow::shadow::ShadowMask;
use sonoshadow::tensor::{Graph, Tensor};

pub const CASES: u64 = 200;
pub const SUM_TOL: f64 = 1e-6;

pub type Outcome = std::result::Result<String, String>;

fn image(rng: &mut Rng, h: usize, w: usize, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn([1, 1, h, w], |_| rng.random_range(lo..hi))
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (rng.random_range(1..12), rng.random_range(1..12))
}

/// Mask with roughly half its pixels attenuated.
fn mask(rng: &mut Rng, h: usize, w: usize) -> ShadowMask {
    let values = (0..h * w)
        .map(|_| if rng.random::<bool>() { 1.0 } else { rng.random_range(0.0..0.99) })
        .collect();
    ShadowMask::new(w, h, values).expect("sized to match")
}

fn each(name: &str, mut case: impl FnMut(&mut Rng) -> Result<(), String>) -> Outcome {
    for seed in 0..CASES {
        let mut rng = Rng::seed_from_u64(seed);
        case(&mut rng).map_err(|e| format!("{name}, case {seed}: {e}"))?;
    }
    Ok(format!("{CASES} cases"))
}

fn exact_zero(v: sonoshadow::Result<f64>) -> Result<(), String> {
    match v {
        Ok(0.0) => Ok(()),
        Ok(v) => Err(format!("expected exactly 0, got {v:e}")),
        Err(e) => Err(e.to_string()),
    }
}

pub fn ae_of_identical_inputs() -> Outcome {
    each("l_ae(x, x)", |rng| {
        let (h, w) = dims(rng);
        let x = image(rng, h, w, 0.0, 1.0);
        exact_zero(loss_ae(&x, &x))
    })
}

pub fn shadow_with_unit_mask() -> Outcome {
    each("l_s with x_s = 1", |rng| {
        let (h, w) = dims(rng);
        let pred = image(rng, h, w, 0.0, 1.0);
        exact_zero(loss_shadow(&ShadowMask::ones(w, h), &pred))
    })
}

pub fn sreg_of_ones() -> Outcome {
    each("l_sreg(1)", |rng| {
        let (h, w) = dims(rng);
        exact_zero(loss_sreg(&Tensor::ones([1, 1, h, w])))
    })
}

pub fn content_with_flat_prior() -> Outcome {
    each("l_c with alpha = beta = 1", |rng| {
        let (h, w) = dims(rng);
        let c = image(rng, h, w, 0.0, 1.0);
        exact_zero(loss_content(&c, 1.0, 1.0, 1e-6))
    })
}

/// Predictions outside the attenuated region never change `l_s`.
pub fn shadow_masked_insensitivity() -> Outcome {
    each("l_s outside the shadow region", |rng| {
        let (h, w) = dims(rng);
        let m = mask(rng, h, w);
        let pred = image(rng, h, w, 0.0, 1.0);
        let mut other = pred.clone();
        for (v, &x) in other.data_mut().iter_mut().zip(m.values()) {
            if x == 1.0 {
                *v = rng.random_range(0.0..1.0);
            }
        }
        let a = loss_shadow(&m, &pred).map_err(|e| e.to_string())?;
        let b = loss_shadow(&m, &other).map_err(|e| e.to_string())?;
        if a.to_bits() == b.to_bits() {
            Ok(())
        } else {
            Err(format!("{a:e} != {b:e}"))
        }
    })
}

/// The total of the differentiated graph equals the weighted sum of its
/// four components.
pub fn weighted_sum_decomposition() -> Outcome {
    let arch = ArchConfig {
        input_size: (16, 16),
        enc_channels: vec![2, 4],
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    let out = each("weighted sum", |rng| {
        let params: ModelParams<f64> = init_params_as(&arch, rng).map_err(|e| e.to_string())?;
        let masks: Vec<ShadowMask> = (0..2).map(|_| mask(rng, 16, 16)).collect();
        let targets = ShadowTargets::<f64>::new(&masks).map_err(|e| e.to_string())?;
        let x = Tensor::<f64>::from_fn([2, 1, 16, 16], |_| rng.random_range(0.0..1.0));
        let w = LossWeights {
            lambda_ae: rng.random_range(0.0..5.0),
            lambda_s: rng.random_range(0.0..20.0),
            lambda_sreg: rng.random_range(0.0..1.0),
            lambda_c: rng.random_range(0.0..1e-2),
            alpha: rng.random_range(1.0..4.0),
            beta: rng.random_range(1.0..4.0),
            ..LossWeights::default()
        };
        let mut g = Graph::<f64>::new();
        let bound = params.bind(&mut g);
        let xv = g.constant(x);
        let fwd = forward_in(&mut g, &arch, &bound, xv).map_err(|e| e.to_string())?;
        let l = losses_in(&mut g, &fwd, xv, &targets, &w).map_err(|e| e.to_string())?;
        let v = |var| g.value(var).item().expect("scalar");
        let expected = w.lambda_ae * v(l.l_ae) + w.lambda_s * v(l.l_s) + w.lambda_sreg * v(l.l_sreg) + w.lambda_c * v(l.l_c);
        let total = v(l.total);
        let rel = (total - expected).abs() / expected.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        if rel <= SUM_TOL {
            Ok(())
        } else {
            Err(format!("total {total} vs weighted sum {expected} (rel {rel:e})"))
        }
    })?;
    Ok(format!("{out}, worst rel error {worst:.1e}"))
}

pub type Check = (&'static str, fn() -> Outcome);

pub fn all() -> Vec<Check> {
    vec![
        ("l_ae(x, x) = 0", ae_of_identical_inputs),
        ("l_s = 0 for x_s = 1", shadow_with_unit_mask),
        ("l_sreg(1) = 0", sreg_of_ones),
        ("l_c = 0 for alpha = beta = 1", content_with_flat_prior),
        ("l_s masked-region insensitivity", shadow_masked_insensitivity),
        ("weighted-sum decomposition", weighted_sum_decomposition),
    ]
}
