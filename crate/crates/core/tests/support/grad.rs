//! Finite-difference checks of every differentiable operator and of the
//! full training objective on a tiny model. Each check runs `CASES` random
//! cases and returns the worst relative error.

use rand::{Rng as _, SeedableRng};
use sonoshadow::losses::{losses_in, LossWeights, ShadowTargets};
use sonoshadow::model::{forward_in, init_params_as, ArchConfig, BoundParams, ModelParams};
use sonoshadow::rng::Rng;
use sonoshadow::shadow::{rasterize_mask, sample_sectors, FanGeometry, SamplingConfig};
use sonoshadow::tensor::gradcheck::{check, GradCheckReport};
use sonoshadow::tensor::{Graph, OpKind, Tensor, Var};
use sonoshadow::Result;

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const CASES: u64 = 20;

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values at least `gap` away from `kink`, so a central difference never
/// straddles a non-differentiable point.
fn away_from(rng: &mut Rng, shape: &[usize], kink: f64, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.random_range(gap..1.5);
        if rng.random::<bool>() { kink + mag } else { kink - mag }
    })
}

fn small_shape(rng: &mut Rng) -> Vec<usize> {
    vec![rng.random_range(1..3), rng.random_range(1..3), rng.random_range(2..5), rng.random_range(2..5)]
}

/// Reduces `y` to a scalar with fixed random weights so that every output
/// element contributes a distinct sensitivity.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.hadamard(y, w)?;
    Ok(g.sum(p))
}

pub type Outcome = std::result::Result<f64, String>;

fn run(name: &str, mut case: impl FnMut(u64) -> Result<GradCheckReport>) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let r = case(seed).map_err(|e| format!("{name} case {seed}: {e}"))?;
        if r.checked == 0 {
            return Err(format!("{name} case {seed}: nothing checked"));
        }
        if r.max_rel_error > TOL {
            return Err(format!(
                "{name} case {seed}: rel error {:.3e} at {:?} (analytic {}, numeric {})",
                r.max_rel_error, r.worst, r.analytic, r.numeric
            ));
        }
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

fn unary(
    name: &str,
    sample: impl Fn(&mut Rng, &[usize]) -> Tensor<f64>,
    op: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + Copy,
) -> Outcome {
    run(name, |seed| {
        let mut rng = Rng::seed_from_u64(seed);
        let shape = small_shape(&mut rng);
        let x = sample(&mut rng, &shape);
        check(&[x], STEP, |g, v| {
            let y = op(g, v[0])?;
            project(g, y, seed)
        })
    })
}

pub fn conv2d() -> Outcome {
    run("conv2d", |seed| {
        let mut rng = Rng::seed_from_u64(seed);
        let (n, c, k) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
        let kh = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..2);
        // choose the output extent, then the input extent that yields it
        let out = rng.random_range(1..4) + 2 * padding;
        let h = (out - 1) * stride + kh - 2 * padding;
        let x = uniform(&mut rng, &[n, c, h, h], -1.0, 1.0);
        let w = uniform(&mut rng, &[k, c, kh, kh], -1.0, 1.0);
        let b = uniform(&mut rng, &[k], -1.0, 1.0);
        check(&[x, w, b], STEP, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, padding)?;
            project(g, y, seed)
        })
    })
}

pub fn deconv2d() -> Outcome {
    run("deconv2d", |seed| {
        let mut rng = Rng::seed_from_u64(seed);
        let (n, c, k) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
        let kh = rng.random_range(2..5);
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..kh.min(2));
        let h = rng.random_range(2..4);
        let x = uniform(&mut rng, &[n, c, h, h], -1.0, 1.0);
        let w = uniform(&mut rng, &[c, k, kh, kh], -1.0, 1.0);
        let b = uniform(&mut rng, &[k], -1.0, 1.0);
        check(&[x, w, b], STEP, |g, v| {
            let y = g.deconv2d(v[0], v[1], v[2], stride, padding)?;
            project(g, y, seed)
        })
    })
}

pub fn sigmoid() -> Outcome {
    unary("sigmoid", |r, s| uniform(r, s, -6.0, 6.0), |g, x| Ok(g.sigmoid(x)))
}

pub fn leaky_relu() -> Outcome {
    unary("leaky_relu", |r, s| away_from(r, s, 0.0, 0.01), |g, x| g.leaky_relu(x, 0.1))
}

pub fn square() -> Outcome {
    unary("square", |r, s| uniform(r, s, -2.0, 2.0), |g, x| Ok(g.square(x)))
}

pub fn abs() -> Outcome {
    unary("abs", |r, s| away_from(r, s, 0.0, 0.01), |g, x| Ok(g.abs(x)))
}

pub fn ln() -> Outcome {
    unary("ln", |r, s| uniform(r, s, 0.1, 3.0), |g, x| Ok(g.ln(x)))
}

pub fn clamp() -> Outcome {
    // keep clear of both bounds
    unary(
        "clamp",
        |r, s| {
            Tensor::from_fn(s.to_vec(), |_| match r.random_range(0..3) {
                0 => r.random_range(-1.0..-0.31),
                1 => r.random_range(-0.29..0.49),
                _ => r.random_range(0.51..1.0),
            })
        },
        |g, x| g.clamp(x, -0.3, 0.5),
    )
}

pub fn affine() -> Outcome {
    run("affine", |seed| {
        let mut rng = Rng::seed_from_u64(seed);
        let shape = small_shape(&mut rng);
        let x = uniform(&mut rng, &shape, -1.0, 1.0);
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
        check(&[x], STEP, |g, v| {
            let y = g.affine(v[0], a, b);
            project(g, y, seed)
        })
    })
}

pub fn reduction(mean: bool) -> Outcome {
    let name = if mean { "mean" } else { "sum" };
    run(name, |seed| {
        let mut rng = Rng::seed_from_u64(seed);
        let shape = small_shape(&mut rng);
        let x = uniform(&mut rng, &shape, -1.0, 1.0);
        check(&[x], STEP, |g, v| {
            // square first so the reduction sees a non-constant slope
            let s = g.square(v[0]);
            Ok(if mean { g.mean(s) } else { g.sum(s) })
        })
    })
}

type Bin = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;

pub fn hadamard() -> Outcome {
    binary("hadamard", |g, a, b| g.hadamard(a, b))
}

pub fn add() -> Outcome {
    binary("add", |g, a, b| g.add(a, b))
}

pub fn sub() -> Outcome {
    binary("sub", |g, a, b| g.sub(a, b))
}

fn binary(name: &str, op: Bin) -> Outcome {
    run(name, |seed| {
        let mut rng = Rng::seed_from_u64(seed);
        let shape = small_shape(&mut rng);
        let a = uniform(&mut rng, &shape, -1.0, 1.0);
        let b = uniform(&mut rng, &shape, -1.0, 1.0);
        check(&[a, b], STEP, |g, v| {
            let y = op(g, v[0], v[1])?;
            let y = g.square(y);
            project(g, y, seed)
        })
    })
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        input_size: (8, 8),
        enc_channels: vec![2, 2],
        ..Default::default()
    }
}

fn rebind(params: &ModelParams<f64>, vars: &[Var]) -> BoundParams {
    let mut it = vars.chunks(2).map(|p| (p[0], p[1]));
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
    BoundParams {
        encoder: take(params.encoder.len()),
        shadow_decoder: take(params.shadow_decoder.len()),
        content_decoder: take(params.content_decoder.len()),
    }
}

/// Which linear piece every kinked operator (leaky unit, abs, clamp) sits
/// on at the given point.
fn kink_sides(inputs: &[Tensor<f64>], build: &impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<Vec<i8>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    build(&mut g, &vars)?;
    let mut sides = Vec::new();
    for v in g.vars() {
        let kind = g.kind(v);
        if !matches!(kind, OpKind::LeakyRelu | OpKind::Abs | OpKind::Clamp) {
            continue;
        }
        let pre = g.value(g.inputs(v)[0]).data();
        let post = g.value(v).data();
        sides.extend(pre.iter().zip(post).map(|(&x, &y)| match kind {
            // 0 inside the range, otherwise the bound it was pushed to
            OpKind::Clamp => (x - y).signum() as i8 * i8::from(x != y),
            _ => i8::from(x > 0.0),
        }));
    }
    Ok(sides)
}

/// True if nudging any single input element by `±STEP` moves some
/// operator across its kink, where a central difference would average two
/// slopes instead of measuring one.
fn straddles_kink(inputs: &[Tensor<f64>], build: &impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<bool> {
    let base = kink_sides(inputs, build)?;
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let original = inputs[i].data()[j];
            for delta in [STEP, -STEP] {
                probe[i].data_mut()[j] = original + delta;
                if kink_sides(&probe, build)? != base {
                    return Ok(true);
                }
            }
            probe[i].data_mut()[j] = original;
        }
    }
    Ok(false)
}

pub fn composite_loss() -> Outcome {
    let arch = tiny_arch();
    let fan = FanGeometry::for_image(8, 8);
    let sampling = SamplingConfig::default();
    run("composite loss", |seed| {
        // redraw until no probe of the finite difference crosses a kink
        for attempt in 0..50 {
            let mut rng = Rng::seed_from_u64(seed * 1000 + attempt);
            let mut params: ModelParams<f64> = init_params_as(&arch, &mut rng)?;
            // fresh-init biases are zero and activations small, which parks
            // many units right on their kink
            for t in params.tensors_mut() {
                let bias = t.shape().len() == 1;
                for v in t.data_mut() {
                    *v = if bias { rng.random_range(-0.5..0.5) } else { *v * 2.0 };
                }
            }
            let n = 1;
            let masks: Vec<_> = (0..n)
                .map(|_| Ok(rasterize_mask(&sample_sectors(&fan, &mut rng, &sampling)?, &fan, 8, 8)))
                .collect::<Result<_>>()?;
            let targets = ShadowTargets::<f64>::new(&masks)?;
            let clean = uniform(&mut rng, &[n, 1, 8, 8], 0.05, 0.95);
            let x_tilde = Tensor::new(
                [n, 1, 8, 8],
                clean.data().iter().zip(targets.mask.data()).map(|(a, b)| a * b).collect(),
            )?;
            let weights = LossWeights {
                lambda_ae: rng.random_range(0.5..2.0),
                lambda_s: rng.random_range(1.0..10.0),
                lambda_sreg: rng.random_range(0.0..1.0),
                lambda_c: rng.random_range(1e-4..1e-2),
                ..LossWeights::default()
            };
            let inputs: Vec<Tensor<f64>> = params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
            let build = |g: &mut Graph<f64>, vars: &[Var]| {
                let bound = rebind(&params, vars);
                let x = g.constant(x_tilde.clone());
                let out = forward_in(g, &arch, &bound, x)?;
                Ok(losses_in(g, &out, x, &targets, &weights)?.total)
            };
            if straddles_kink(&inputs, &build)? {
                continue;
            }
            return check(&inputs, STEP, build);
        }
        Err(sonoshadow::Error::InvalidArgument(format!(
            "case {seed}: no draw kept clear of the activation kinks"
        )))
    })
}

/// Every check, by operator name.
pub type Check = (&'static str, fn() -> Outcome);

pub fn all() -> Vec<Check> {
    vec![
        ("conv2d", conv2d),
        ("deconv2d", deconv2d),
        ("sigmoid", sigmoid),
        ("leaky_relu", leaky_relu),
        ("hadamard", hadamard),
        ("add", add),
        ("sub", sub),
        ("affine", affine),
        ("square", square),
        ("abs", abs),
        ("ln", ln),
        ("clamp", clamp),
        ("sum", || reduction(false)),
        ("mean", || reduction(true)),
        ("composite loss", composite_loss),
    ]
}
