//! Encoder with two mirrored decoders. The shadow head and the content head
//! each end in a sigmoid; their element-wise product is the reconstruction.

mod checkpoint;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{conv_output_extent, Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// `(height, width)` of input images.
    pub input_size: (usize, usize),
    /// Output channels of each encoder layer; the decoders mirror them.
    pub enc_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Negative-side slope of the interior activations.
    pub slope: f64,
    pub init: InitScheme,
}

/// Weight initialization; biases always start at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in `±sqrt(1 / fan_in)`.
    Uniform,
    /// Uniform in `±sqrt(6 / ((1 + slope²) · fan_in))`, which keeps the
    /// activation scale roughly constant through the leaky layers.
    #[default]
    Kaiming,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_size: (64, 64),
            enc_channels: vec![16, 32, 64, 128],
            kernel: 4,
            stride: 2,
            padding: 1,
            slope: 0.1,
            init: InitScheme::default(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.is_empty() || self.enc_channels.contains(&0) {
            return Err(Error::Config(
                "enc_channels must be a non-empty list of positive counts".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.slope) {
            return Err(Error::Config(format!("activation slope {} outside [0, 1)", self.slope)));
        }
        let (h, w) = self.input_size;
        let scale = self
            .stride
            .checked_pow(self.enc_channels.len() as u32)
            .filter(|&s| s > 0)
            .ok_or_else(|| Error::Config("stride overflow".into()))?;
        if h == 0 || w == 0 || h % scale != 0 || w % scale != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} must be divisible by {scale} (stride^depth)"
            )));
        }
        // each layer must exactly divide by the stride so the decoders mirror it
        for extent in [h, w] {
            let mut e = extent;
            for _ in &self.enc_channels {
                let next = conv_output_extent(e, self.kernel, self.stride, self.padding)
                    .map_err(|err| Error::Config(err.to_string()))?;
                if next * self.stride != e {
                    return Err(Error::Config(format!(
                        "kernel {}, stride {}, padding {} do not halve extent {e} exactly",
                        self.kernel, self.stride, self.padding
                    )));
                }
                e = next;
            }
        }
        Ok(())
    }

    /// Shape of the latent code for a batch of `n`.
    pub fn latent_shape(&self, n: usize) -> Vec<usize> {
        let scale = self.stride.pow(self.enc_channels.len() as u32);
        vec![
            n,
            *self.enc_channels.last().expect("validated non-empty"),
            self.input_size.0 / scale,
            self.input_size.1 / scale,
        ]
    }

    /// `(in, out)` channel pairs of the encoder layers.
    fn encoder_channels(&self) -> Vec<(usize, usize)> {
        std::iter::once(1)
            .chain(self.enc_channels.iter().copied())
            .collect::<Vec<_>>()
            .windows(2)
            .map(|p| (p[0], p[1]))
            .collect()
    }

    /// `(in, out)` channel pairs of either decoder.
    fn decoder_channels(&self) -> Vec<(usize, usize)> {
        self.encoder_channels()
            .into_iter()
            .rev()
            .map(|(a, b)| (b, a))
            .collect()
    }
}

/// Weight and bias of one (transposed) convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// All learnable tensors of the encoder and both decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub arch: ArchConfig,
    pub encoder: Vec<Layer<T>>,
    pub shadow_decoder: Vec<Layer<T>>,
    pub content_decoder: Vec<Layer<T>>,
}

fn init_layer<T: Scalar>(
    rng: &mut Rng,
    cfg: &ArchConfig,
    weight_shape: [usize; 4],
    out: usize,
    fan_in: usize,
) -> Layer<T> {
    let bound = match cfg.init {
        InitScheme::Uniform => (1.0 / fan_in as f64).sqrt(),
        InitScheme::Kaiming => (6.0 / ((1.0 + cfg.slope * cfg.slope) * fan_in as f64)).sqrt(),
    };
    Layer {
        weight: Tensor::from_fn(weight_shape, |_| T::from_f64(rng.random_range(-bound..bound))),
        bias: Tensor::zeros([out]),
    }
}

/// Draws weights per `cfg.init` with zero biases. A transposed convolution
/// counts as fan-in only the taps that reach one output pixel,
/// `in · ceil(k / stride)²`.
pub fn init_params(cfg: &ArchConfig, rng: &mut Rng) -> Result<ModelParams> {
    init_params_as(cfg, rng)
}

pub fn init_params_as<T: Scalar>(cfg: &ArchConfig, rng: &mut Rng) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let k = cfg.kernel;
    let taps = k.div_ceil(cfg.stride);
    let encoder = cfg
        .encoder_channels()
        .into_iter()
        .map(|(cin, cout)| init_layer(rng, cfg, [cout, cin, k, k], cout, cin * k * k))
        .collect();
    let decoder = |rng: &mut Rng| -> Vec<Layer<T>> {
        cfg.decoder_channels()
            .into_iter()
            .map(|(cin, cout)| init_layer(rng, cfg, [cin, cout, k, k], cout, cin * taps * taps))
            .collect()
    };
    let shadow_decoder = decoder(rng);
    let content_decoder = decoder(rng);
    Ok(ModelParams {
        arch: cfg.clone(),
        encoder,
        shadow_decoder,
        content_decoder,
    })
}

impl<T: Scalar> ModelParams<T> {
    fn layers(&self) -> impl Iterator<Item = (&'static str, usize, &Layer<T>)> {
        let tag = |name: &'static str| move |(i, l)| (name, i, l);
        self.encoder
            .iter()
            .enumerate()
            .map(tag("encoder"))
            .chain(self.shadow_decoder.iter().enumerate().map(tag("shadow_decoder")))
            .chain(self.content_decoder.iter().enumerate().map(tag("content_decoder")))
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers()
            .flat_map(|(name, i, l)| {
                [
                    (format!("{name}.{i}.weight"), &l.weight),
                    (format!("{name}.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    /// Mutable tensors in the order of [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.encoder
            .iter_mut()
            .chain(self.shadow_decoder.iter_mut())
            .chain(self.content_decoder.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cast = |v: &Vec<Layer<T>>| {
            v.iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect()
        };
        ModelParams {
            arch: self.arch.clone(),
            encoder: cast(&self.encoder),
            shadow_decoder: cast(&self.shadow_decoder),
            content_decoder: cast(&self.content_decoder),
        }
    }

    /// Registers every tensor as a graph parameter, in
    /// [`ModelParams::named_tensors`] order.
    pub fn bind(&self, graph: &mut Graph<T>) -> BoundParams {
        let mut bind = |v: &Vec<Layer<T>>| -> Vec<(Var, Var)> {
            v.iter()
                .map(|l| (graph.param(l.weight.clone()), graph.param(l.bias.clone())))
                .collect()
        };
        BoundParams {
            encoder: bind(&self.encoder),
            shadow_decoder: bind(&self.shadow_decoder),
            content_decoder: bind(&self.content_decoder),
        }
    }
}

/// Graph handles of a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub encoder: Vec<(Var, Var)>,
    pub shadow_decoder: Vec<(Var, Var)>,
    pub content_decoder: Vec<(Var, Var)>,
}

impl BoundParams {
    /// Handles in [`ModelParams::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain(&self.shadow_decoder)
            .chain(&self.content_decoder)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

/// Graph handles produced by [`forward_in`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub z: Var,
    pub shadow: Var,
    pub content: Var,
    pub recon: Var,
}

/// Latent code, shadow map, content image and reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOut<T: Scalar = f32> {
    pub z: Tensor<T>,
    pub shadow: Tensor<T>,
    pub content: Tensor<T>,
    pub recon: Tensor<T>,
}

fn check_input(arch: &ArchConfig, shape: &[usize]) -> Result<()> {
    let (h, w) = arch.input_size;
    match *shape {
        [n, 1, sh, sw] if n > 0 && sh == h && sw == w => Ok(()),
        _ => Err(Error::shape(
            "forward",
            format!("expected input [N, 1, {h}, {w}], got {shape:?}"),
        )),
    }
}

fn decode<T: Scalar>(
    graph: &mut Graph<T>,
    arch: &ArchConfig,
    layers: &[(Var, Var)],
    z: Var,
) -> Result<Var> {
    let slope = T::from_f64(arch.slope);
    let mut h = z;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = graph.deconv2d(h, w, b, arch.stride, arch.padding)?;
        if i + 1 < layers.len() {
            h = graph.leaky_relu(h, slope)?;
        }
    }
    Ok(graph.sigmoid(h))
}

/// Records the network on `graph` for input `x` of shape `[N, 1, H, W]`.
pub fn forward_in<T: Scalar>(
    graph: &mut Graph<T>,
    arch: &ArchConfig,
    params: &BoundParams,
    x: Var,
) -> Result<ForwardVars> {
    check_input(arch, graph.shape(x))?;
    let slope = T::from_f64(arch.slope);
    let mut z = x;
    for &(w, b) in &params.encoder {
        z = graph.conv2d(z, w, b, arch.stride, arch.padding)?;
        z = graph.leaky_relu(z, slope)?;
    }
    let shadow = decode(graph, arch, &params.shadow_decoder, z)?;
    let content = decode(graph, arch, &params.content_decoder, z)?;
    let recon = graph.hadamard(shadow, content)?;
    Ok(ForwardVars {
        z,
        shadow,
        content,
        recon,
    })
}

/// Runs the network on `x` (`[N, 1, H, W]`, values in `[0, 1]`).
pub fn forward<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<ForwardOut<T>> {
    check_input(&params.arch, x.shape())?;
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let input = graph.constant(x.clone());
    let out = forward_in(&mut graph, &params.arch, &bound, input)?;
    Ok(ForwardOut {
        z: graph.value(out.z).clone(),
        shadow: graph.value(out.shadow).clone(),
        content: graph.value(out.content).clone(),
        recon: graph.value(out.recon).clone(),
    })
}

/// Shadow map of raw (uninjected) input `x`.
pub fn infer_shadow(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    Ok(forward(params, x)?.shadow)
}
