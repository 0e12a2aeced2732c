use super::conv::{self, ConvDims, DeconvDims};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        dims: ConvDims,
    },
    Deconv2d {
        input: Var,
        weight: Var,
        bias: Var,
        dims: DeconvDims,
    },
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Hadamard(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Affine(Var, T, T),
    Square(Var),
    Abs(Var),
    Ln(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
}

/// Operator tag of a recorded node, for inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Deconv2d,
    Sigmoid,
    LeakyRelu,
    Hadamard,
    Add,
    Sub,
    Affine,
    Square,
    Abs,
    Ln,
    Clamp,
    Sum,
    Mean,
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Deconv2d { .. } => OpKind::Deconv2d,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Affine(..) => OpKind::Affine,
            Op::Square(_) => OpKind::Square,
            Op::Abs(_) => OpKind::Abs,
            Op::Ln(_) => OpKind::Ln,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::Deconv2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::Hadamard(a, b) | Op::Add(a, b) | Op::Sub(a, b) => vec![a, b],
            Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::Affine(a, ..)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Ln(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run operation record. Nodes are appended in execution order,
/// so the node list is always topologically sorted.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable logistic function, kept strictly inside (0, 1).
fn sigmoid<T: Scalar>(v: T) -> T {
    let y = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let top = T::one() - T::epsilon() / T::from_f64(2.0);
    if y.is_nan() {
        return y;
    }
    y.max(T::min_positive_value()).min(top)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is computed by [`Graph::backward`].
    /// Every node, in creation (topological) order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.len()).map(Var)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `var`.
    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.nodes[var.0].value.grad()
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn inputs(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs()
    }

    pub fn into_value(mut self, var: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[var.0].value, Tensor::scalar(T::zero()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(op.inputs().iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn data(&self, var: Var) -> &[T] {
        self.nodes[var.0].value.data()
    }

    fn map(&mut self, input: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = &self.nodes[input.0].value;
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())
            .expect("element-wise map preserves shape");
        self.record(out, op)
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(out, op))
    }

    /// 2-D cross-correlation of `[N, C, H, W]` input with `[K, C, kh, kw]`
    /// weights plus a per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let dims = ConvDims::conv(
            self.shape(input),
            self.shape(weight),
            self.shape(bias),
            stride,
            padding,
        )?;
        let out = conv::conv2d_forward(&dims, self.data(input), self.data(weight), self.data(bias));
        let out = Tensor::new(dims.out_shape(), out)?;
        Ok(self.record(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
        ))
    }

    /// Transposed convolution of `[N, C, H, W]` input with `[C, K, kh, kw]`
    /// weights; the adjoint of [`Graph::conv2d`] with the same weights.
    pub fn deconv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let dims = DeconvDims::deconv(
            self.shape(input),
            self.shape(weight),
            self.shape(bias),
            stride,
            padding,
        )?;
        let out =
            conv::deconv2d_forward(&dims, self.data(input), self.data(weight), self.data(bias));
        let out = Tensor::new(dims.out_shape(), out)?;
        Ok(self.record(
            out,
            Op::Deconv2d {
                input,
                weight,
                bias,
                dims,
            },
        ))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.map(input, Op::Sigmoid(input), sigmoid)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Result<Var> {
        if !(slope >= T::zero() && slope < T::one()) {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope {slope} outside [0, 1)"
            )));
        }
        Ok(self.map(input, Op::LeakyRelu(input, slope), move |v| {
            if v >= T::zero() {
                v
            } else {
                slope * v
            }
        }))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "hadamard", Op::Hadamard(a, b), |x, y| x * y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// `scale · v + shift`, element-wise.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Var {
        self.map(input, Op::Affine(input, scale, shift), move |v| scale * v + shift)
    }

    pub fn square(&mut self, input: Var) -> Var {
        self.map(input, Op::Square(input), |v| v * v)
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.map(input, Op::Abs(input), |v| v.abs())
    }

    pub fn ln(&mut self, input: Var) -> Var {
        self.map(input, Op::Ln(input), |v| v.ln())
    }

    pub fn clamp(&mut self, input: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds [{lo}, {hi}] inverted")));
        }
        Ok(self.map(input, Op::Clamp(input, lo, hi), move |v| if v.is_nan() { v } else { v.max(lo).min(hi) }))
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.data(input).iter().map(|v| v.as_f64()).sum();
        self.record(Tensor::scalar(T::from_f64(total)), Op::Sum(input))
    }

    /// Mean of all elements, accumulated in `f64`.
    pub fn mean(&mut self, input: Var) -> Var {
        let data = self.data(input);
        let total: f64 = data.iter().map(|v| v.as_f64()).sum();
        let mean = total / data.len() as f64;
        self.record(Tensor::scalar(T::from_f64(mean)), Op::Mean(input))
    }

    /// Propagates `d loss / d node` to every node that depends on a
    /// parameter, seeding the loss with 1. Gradients are stored in each
    /// node's tensor and read back through [`Graph::grad`]; gradients from a
    /// previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            for (var, contribution) in self.adjoint(idx, &gy) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(contribution)
                        .for_each(|(a, c)| *a = *a + c),
                    slot => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(gy);
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads.into_iter().chain(std::iter::repeat_with(|| None))) {
            match grad {
                Some(g) => node.value.set_grad(g)?,
                None => node.value.clear_grad(),
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` with respect to its inputs.
    fn adjoint(&self, idx: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let elementwise = |a: Var, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
            self.data(a)
                .iter()
                .zip(y)
                .zip(gy)
                .map(|((&x, &yv), &g)| f(x, yv, g))
                .collect()
        };
        match node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                let g = conv::conv2d_backward(
                    &dims,
                    self.data(input),
                    self.data(weight),
                    gy,
                    wants(input),
                );
                let mut out = vec![(weight, g.weight), (bias, g.bias)];
                if let Some(dx) = g.input {
                    out.push((input, dx));
                }
                out
            }
            Op::Deconv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                let g = conv::deconv2d_backward(
                    &dims,
                    self.data(input),
                    self.data(weight),
                    gy,
                    wants(input),
                );
                let mut out = vec![(weight, g.weight), (bias, g.bias)];
                if let Some(dx) = g.input {
                    out.push((input, dx));
                }
                out
            }
            Op::Sigmoid(a) => vec![(a, elementwise(a, &|_, yv, g| g * yv * (T::one() - yv)))],
            Op::LeakyRelu(a, slope) => vec![(
                a,
                elementwise(a, &|x, _, g| if x >= T::zero() { g } else { g * slope }),
            )],
            Op::Hadamard(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                vec![
                    (a, gy.iter().zip(db).map(|(&g, &v)| g * v).collect()),
                    (b, gy.iter().zip(da).map(|(&g, &v)| g * v).collect()),
                ]
            }
            Op::Add(a, b) => vec![(a, gy.to_vec()), (b, gy.to_vec())],
            Op::Sub(a, b) => vec![(a, gy.to_vec()), (b, gy.iter().map(|&g| -g).collect())],
            Op::Affine(a, scale, _) => vec![(a, gy.iter().map(|&g| g * scale).collect())],
            Op::Square(a) => vec![(
                a,
                elementwise(a, &|x, _, g| g * (x + x)),
            )],
            Op::Abs(a) => vec![(
                a,
                elementwise(a, &|x, _, g| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
            )],
            Op::Ln(a) => vec![(a, elementwise(a, &|x, _, g| g / x))],
            Op::Clamp(a, lo, hi) => vec![(
                a,
                elementwise(a, &|x, _, g| if x >= lo && x <= hi { g } else { T::zero() }),
            )],
            Op::Sum(a) => vec![(a, vec![gy[0]; self.data(a).len()])],
            Op::Mean(a) => {
                let n = self.data(a).len();
                let g = T::from_f64(gy[0].as_f64() / n as f64);
                vec![(a, vec![g; n])]
            }
        }
    }
}
