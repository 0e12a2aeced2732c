//! Reconstruction, masked shadow, shadow-darkness and beta-prior content
//! losses, and their weighted sum.
//!
//! Every loss is averaged over the batch. The reconstruction, shadow and
//! darkness terms are per-pixel means; the content term is a per-pixel sum
//! of negative log densities, so it is orders of magnitude larger and its
//! default weight is correspondingly small.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::ForwardVars;
use crate::shadow::ShadowMask;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ae: f64,
    pub lambda_s: f64,
    pub lambda_sreg: f64,
    pub lambda_c: f64,
    /// Beta-prior shape parameters of the content image.
    pub alpha: f64,
    pub beta: f64,
    /// Content values are clamped to `[eps, 1 − eps]` before taking logs.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ae: 1.0,
            lambda_s: 10.0,
            lambda_sreg: 0.1,
            lambda_c: 1e-4,
            alpha: 2.0,
            beta: 2.0,
            eps: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_ae, self.lambda_s, self.lambda_sreg, self.lambda_c];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {lambdas:?}")));
        }
        check_beta_shape(self.alpha, self.beta)?;
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config(format!("eps {} outside (0, 0.5)", self.eps)));
        }
        Ok(())
    }

    /// Returns a copy with every λ set to zero.
    pub fn zeroed(&self) -> Self {
        LossWeights {
            lambda_ae: 0.0,
            lambda_s: 0.0,
            lambda_sreg: 0.0,
            lambda_c: 0.0,
            ..*self
        }
    }
}

fn check_beta_shape(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "beta prior needs alpha, beta > 0, got {alpha} and {beta}"
        )));
    }
    Ok(())
}

/// `ln B(α, β) = ln Γ(α) + ln Γ(β) − ln Γ(α + β)`.
///
/// Small integer shapes go through exact factorials so that e.g. `B(1, 1)` is
/// exactly 1.
pub fn ln_beta_fn(alpha: f64, beta: f64) -> f64 {
    let small_int = |v: f64| v.fract() == 0.0 && (1.0..=20.0).contains(&v);
    if small_int(alpha) && small_int(beta) {
        let gamma = |n: f64| (1..n as u64).map(|k| k as f64).product::<f64>();
        (gamma(alpha) * gamma(beta) / gamma(alpha + beta)).ln()
    } else {
        ln_gamma(alpha) + ln_gamma(beta) - ln_gamma(alpha + beta)
    }
}

/// Individual loss values and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ae: f64,
    pub l_s: f64,
    pub l_sreg: f64,
    pub l_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_ae, self.l_s, self.l_sreg, self.l_c, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Combines component values as `λ_AE·l_ae + λ_s·l_s + λ_sreg·l_sreg + λ_c·l_c`.
pub fn loss_total(l_ae: f64, l_s: f64, l_sreg: f64, l_c: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_ae,
        l_s,
        l_sreg,
        l_c,
        total: w.lambda_ae * l_ae + w.lambda_s * l_s + w.lambda_sreg * l_sreg + w.lambda_c * l_c,
    }
}

fn batch_size<T: Scalar>(graph: &Graph<T>, v: Var) -> usize {
    graph.shape(v).first().copied().unwrap_or(1).max(1)
}

/// Mean squared difference between the network input and its reconstruction.
pub fn loss_ae_in<T: Scalar>(graph: &mut Graph<T>, x_tilde: Var, recon: Var) -> Result<Var> {
    let d = graph.sub(recon, x_tilde).map_err(|_| shape_err("loss_ae", graph, x_tilde, recon))?;
    let sq = graph.square(d);
    Ok(graph.mean(sq))
}

/// Squared error restricted to the injected region, normalized by the full
/// pixel count. `region` holds 1 where the synthetic mask is below 1.
pub fn loss_shadow_in<T: Scalar>(
    graph: &mut Graph<T>,
    target: Var,
    region: Var,
    pred: Var,
) -> Result<Var> {
    let d = graph.sub(pred, target).map_err(|_| shape_err("loss_shadow", graph, target, pred))?;
    let sq = graph.square(d);
    let masked = graph.hadamard(region, sq)?;
    Ok(graph.mean(masked))
}

/// Mean of `|1 − x̂_s|`.
pub fn loss_sreg_in<T: Scalar>(graph: &mut Graph<T>, pred: Var) -> Var {
    let gap = graph.affine(pred, -T::one(), T::one());
    let a = graph.abs(gap);
    graph.mean(a)
}

/// Beta negative log-likelihood of the content image, summed over pixels.
pub fn loss_content_in<T: Scalar>(
    graph: &mut Graph<T>,
    content: Var,
    alpha: f64,
    beta: f64,
    eps: f64,
) -> Result<Var> {
    check_beta_shape(alpha, beta)?;
    let n = batch_size(graph, content);
    let c = graph.clamp(content, T::from_f64(eps), T::from_f64(1.0 - eps))?;
    let ln_c = graph.ln(c);
    let one_minus = graph.affine(c, -T::one(), T::one());
    let ln_1mc = graph.ln(one_minus);
    let a = graph.affine(ln_c, T::from_f64(alpha - 1.0), T::zero());
    let b = graph.affine(ln_1mc, T::from_f64(beta - 1.0), T::from_f64(-ln_beta_fn(alpha, beta)));
    let log_density = graph.add(a, b)?;
    let total = graph.sum(log_density);
    Ok(graph.affine(total, T::from_f64(-1.0 / n as f64), T::zero()))
}

fn shape_err<T: Scalar>(op: &'static str, graph: &Graph<T>, a: Var, b: Var) -> Error {
    Error::shape(op, format!("{:?} vs {:?}", graph.shape(a), graph.shape(b)))
}

/// Graph handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_ae: Var,
    pub l_s: Var,
    pub l_sreg: Var,
    pub l_c: Var,
    pub total: Var,
}

impl LossVars {
    /// Reads the recorded values; `total` is recombined in `f64`.
    pub fn breakdown<T: Scalar>(&self, graph: &Graph<T>, w: &LossWeights) -> LossBreakdown {
        let v = |var: Var| graph.value(var).item().expect("losses are scalar").as_f64();
        loss_total(v(self.l_ae), v(self.l_s), v(self.l_sreg), v(self.l_c), w)
    }
}

/// Records all four losses and their weighted sum for one forward pass.
pub fn losses_in<T: Scalar>(
    graph: &mut Graph<T>,
    out: &ForwardVars,
    x_tilde: Var,
    targets: &ShadowTargets<T>,
    w: &LossWeights,
) -> Result<LossVars> {
    w.validate()?;
    let target = graph.constant(targets.mask.clone());
    let region = graph.constant(targets.region.clone());
    let l_ae = loss_ae_in(graph, x_tilde, out.recon)?;
    let l_s = loss_shadow_in(graph, target, region, out.shadow)?;
    let l_sreg = loss_sreg_in(graph, out.shadow);
    let l_c = loss_content_in(graph, out.content, w.alpha, w.beta, w.eps)?;
    let terms = [
        (l_ae, w.lambda_ae),
        (l_s, w.lambda_s),
        (l_sreg, w.lambda_sreg),
        (l_c, w.lambda_c),
    ];
    let mut total = graph.affine(terms[0].0, T::from_f64(terms[0].1), T::zero());
    for &(l, lambda) in &terms[1..] {
        let scaled = graph.affine(l, T::from_f64(lambda), T::zero());
        total = graph.add(total, scaled)?;
    }
    Ok(LossVars {
        l_ae,
        l_s,
        l_sreg,
        l_c,
        total,
    })
}

/// Synthetic masks of a batch as `[N, 1, H, W]` target and 0/1 region
/// tensors.
#[derive(Clone, Debug)]
pub struct ShadowTargets<T: Scalar = f32> {
    pub mask: Tensor<T>,
    pub region: Tensor<T>,
}

impl<T: Scalar> ShadowTargets<T> {
    pub fn new(masks: &[ShadowMask]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidArgument("no shadow masks".into()))?;
        let (w, h) = (first.width(), first.height());
        let mut mask = Vec::with_capacity(masks.len() * w * h);
        for m in masks {
            if (m.width(), m.height()) != (w, h) {
                return Err(Error::shape("ShadowTargets", "masks differ in size"));
            }
            mask.extend(m.values().iter().map(|&v| T::from_f64(f64::from(v))));
        }
        let region = mask
            .iter()
            .map(|&v| if v != T::one() { T::one() } else { T::zero() })
            .collect();
        Ok(ShadowTargets {
            mask: Tensor::new([masks.len(), 1, h, w], mask)?,
            region: Tensor::new([masks.len(), 1, h, w], region)?,
        })
    }
}

fn eval_scalar(
    inputs: &[&Tensor],
    build: impl FnOnce(&mut Graph<f32>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.constant((*t).clone())).collect();
    let out = build(&mut graph, &vars)?;
    Ok(graph.value(out).item().expect("scalar loss").as_f64())
}

/// Reconstruction loss of two equally shaped tensors.
pub fn loss_ae(x_tilde: &Tensor, recon: &Tensor) -> Result<f64> {
    eval_scalar(&[x_tilde, recon], |g, v| loss_ae_in(g, v[0], v[1]))
}

/// Masked shadow loss of a single-image prediction.
pub fn loss_shadow(x_s: &ShadowMask, shadow_pred: &Tensor) -> Result<f64> {
    let targets = ShadowTargets::<f32>::new(std::slice::from_ref(x_s))?;
    let pred = shadow_pred.clone().reshape(targets.mask.shape().to_vec()).map_err(|_| {
        Error::shape(
            "loss_shadow",
            format!("{:?} vs {}x{} mask", shadow_pred.shape(), x_s.height(), x_s.width()),
        )
    })?;
    eval_scalar(&[&targets.mask, &targets.region, &pred], |g, v| {
        loss_shadow_in(g, v[0], v[1], v[2])
    })
}

pub fn loss_sreg(shadow_pred: &Tensor) -> Result<f64> {
    eval_scalar(&[shadow_pred], |g, v| Ok(loss_sreg_in(g, v[0])))
}

pub fn loss_content(content_pred: &Tensor, alpha: f64, beta: f64, eps: f64) -> Result<f64> {
    eval_scalar(&[content_pred], |g, v| loss_content_in(g, v[0], alpha, beta, eps))
}
