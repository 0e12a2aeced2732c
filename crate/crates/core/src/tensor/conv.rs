//! im2col lowering of 2-D cross-correlation and its transpose onto GEMM.

use super::Scalar;
use crate::error::{Error, Result};

/// Output extent of a cross-correlation along one axis:
/// `(extent + 2·padding − kernel) / stride + 1`, which must be integral and
/// positive.
pub fn conv_output_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel ({kernel}) and stride ({stride}) must be at least 1"
        )));
    }
    let padded = extent + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kernel} exceeds padded extent {padded}"),
        ));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::shape(
            "conv2d",
            format!(
                "extent {extent} with kernel {kernel}, stride {stride}, padding {padding} \
                 gives a non-integral output extent"
            ),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution:
/// `(extent − 1)·stride − 2·padding + kernel`.
pub(crate) fn deconv_output_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel ({kernel}) and stride ({stride}) must be at least 1"
        )));
    }
    if extent == 0 {
        return Err(Error::shape("deconv2d", "input extent is zero"));
    }
    let full = (extent - 1) * stride + kernel;
    if full <= 2 * padding {
        return Err(Error::shape(
            "deconv2d",
            format!("padding {padding} leaves no output for extent {extent}"),
        ));
    }
    Ok(full - 2 * padding)
}

/// Geometry of one cross-correlation: an image of `channels × height × width`
/// sampled by a `kh × kw` window onto an `out_h × out_w` grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output index `o` and kernel tap `k`, or `None`
    /// when it falls into the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Unfolds `image` into `cols` (`rows × cols`, row-major).
    pub fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        debug_assert_eq!(image.len(), self.channels * self.height * self.width);
        debug_assert_eq!(cols.len(), self.rows() * self.cols());
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, ki, self.height) {
                            None => line.fill(T::zero()),
                            Some(y) => {
                                let src = &plane[y * self.width..(y + 1) * self.width];
                                for (ox, out) in line.iter_mut().enumerate() {
                                    *out = match self.source(ox, kj, self.width) {
                                        Some(x) => src[x],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds `cols` back onto `image`, accumulating overlapping taps.
    pub fn col2im_add<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        debug_assert_eq!(image.len(), self.channels * self.height * self.width);
        debug_assert_eq!(cols.len(), self.rows() * self.cols());
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let Some(y) = self.source(oy, ki, self.height) else {
                            continue;
                        };
                        let dst = &mut plane[y * self.width..(y + 1) * self.width];
                        for ox in 0..self.out_w {
                            if let Some(x) = self.source(ox, kj, self.width) {
                                dst[x] = dst[x] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn accumulate_bias_grad<T: Scalar>(grad_out: &[T], plane: usize, acc: &mut [f64]) {
    for (chunk, a) in grad_out.chunks(plane).zip(acc.iter_mut()) {
        *a += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
    }
}

/// Shapes of a cross-correlation: input `[N, C, H, W]`, weight
/// `[K, C, kh, kw]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub window: Window,
}

impl ConvDims {
    pub fn conv(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [n, c, h, w] = *input else {
            return Err(Error::shape("conv2d", format!("input must be rank 4, got {input:?}")));
        };
        let [k, wc, kh, kw] = *weight else {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {weight:?}")));
        };
        if input.contains(&0) || weight.contains(&0) {
            return Err(Error::shape("conv2d", format!("empty input {input:?} or weight {weight:?}")));
        }
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        if bias != [k] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {bias:?} does not match {k} output channels"),
            ));
        }
        let out_h = conv_output_extent(h, kh, stride, padding)?;
        let out_w = conv_output_extent(w, kw, stride, padding)?;
        Ok(ConvDims {
            batch: n,
            in_channels: c,
            out_channels: k,
            window: Window {
                channels: c,
                height: h,
                width: w,
                kh,
                kw,
                stride,
                padding,
                out_h,
                out_w,
            },
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.window.out_h, self.window.out_w]
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    dims: &ConvDims,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let win = &dims.window;
    let (rows, ncols) = (win.rows(), win.cols());
    let in_per = dims.in_channels * win.height * win.width;
    let out_per = dims.out_channels * ncols;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); dims.batch * out_per];
    for (x, y) in input.chunks(in_per).zip(out.chunks_mut(out_per)) {
        win.im2col(x, &mut cols);
        T::gemm(
            dims.out_channels,
            rows,
            ncols,
            T::one(),
            weight,
            (rows as isize, 1),
            &cols,
            (ncols as isize, 1),
            T::zero(),
            y,
            (ncols as isize, 1),
        );
        add_bias(y, bias, ncols);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    dims: &ConvDims,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
) -> ConvGrads<T> {
    let win = &dims.window;
    let (rows, ncols) = (win.rows(), win.cols());
    let in_per = dims.in_channels * win.height * win.width;
    let out_per = dims.out_channels * ncols;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dcols = vec![T::zero(); rows * ncols];
    let mut d_weight = vec![T::zero(); weight.len()];
    let mut d_bias = vec![0f64; dims.out_channels];
    let mut d_input = want_input.then(|| vec![T::zero(); input.len()]);
    for (n, (x, gy)) in input.chunks(in_per).zip(grad_out.chunks(out_per)).enumerate() {
        win.im2col(x, &mut cols);
        // dW += dY · colsᵀ
        T::gemm(
            dims.out_channels,
            ncols,
            rows,
            T::one(),
            gy,
            (ncols as isize, 1),
            &cols,
            (1, ncols as isize),
            T::one(),
            &mut d_weight,
            (rows as isize, 1),
        );
        accumulate_bias_grad(gy, ncols, &mut d_bias);
        if let Some(dx) = d_input.as_mut() {
            // dcols = Wᵀ · dY
            T::gemm(
                rows,
                dims.out_channels,
                ncols,
                T::one(),
                weight,
                (1, rows as isize),
                gy,
                (ncols as isize, 1),
                T::zero(),
                &mut dcols,
                (ncols as isize, 1),
            );
            win.col2im_add(&dcols, &mut dx[n * in_per..(n + 1) * in_per]);
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias.into_iter().map(T::from_f64).collect(),
    }
}

/// Shapes of a transposed convolution: input `[N, C, H, W]`, weight
/// `[C, K, kh, kw]`, output `[N, K, H'', W'']`. The window describes the
/// cross-correlation from the output grid back to the input grid, whose
/// adjoint this operator is.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DeconvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub window: Window,
}

impl DeconvDims {
    pub fn deconv(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [n, c, h, w] = *input else {
            return Err(Error::shape("deconv2d", format!("input must be rank 4, got {input:?}")));
        };
        let [wc, k, kh, kw] = *weight else {
            return Err(Error::shape(
                "deconv2d",
                format!("weight must be rank 4, got {weight:?}"),
            ));
        };
        if input.contains(&0) || weight.contains(&0) {
            return Err(Error::shape("deconv2d", format!("empty input {input:?} or weight {weight:?}")));
        }
        if wc != c {
            return Err(Error::shape(
                "deconv2d",
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        if bias != [k] {
            return Err(Error::shape(
                "deconv2d",
                format!("bias shape {bias:?} does not match {k} output channels"),
            ));
        }
        let out_h = deconv_output_extent(h, kh, stride, padding)?;
        let out_w = deconv_output_extent(w, kw, stride, padding)?;
        Ok(DeconvDims {
            batch: n,
            in_channels: c,
            out_channels: k,
            window: Window {
                channels: k,
                height: out_h,
                width: out_w,
                kh,
                kw,
                stride,
                padding,
                out_h: h,
                out_w: w,
            },
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.window.height, self.window.width]
    }
}

pub(crate) fn deconv2d_forward<T: Scalar>(
    dims: &DeconvDims,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let win = &dims.window;
    let (rows, ncols) = (win.rows(), win.cols());
    let in_per = dims.in_channels * ncols;
    let out_plane = win.height * win.width;
    let out_per = dims.out_channels * out_plane;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); dims.batch * out_per];
    for (x, y) in input.chunks(in_per).zip(out.chunks_mut(out_per)) {
        // cols = Wᵀ · x, with W viewed as C × (K·kh·kw)
        T::gemm(
            rows,
            dims.in_channels,
            ncols,
            T::one(),
            weight,
            (1, rows as isize),
            x,
            (ncols as isize, 1),
            T::zero(),
            &mut cols,
            (ncols as isize, 1),
        );
        win.col2im_add(&cols, y);
        add_bias(y, bias, out_plane);
    }
    out
}

pub(crate) fn deconv2d_backward<T: Scalar>(
    dims: &DeconvDims,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
) -> ConvGrads<T> {
    let win = &dims.window;
    let (rows, ncols) = (win.rows(), win.cols());
    let in_per = dims.in_channels * ncols;
    let out_plane = win.height * win.width;
    let out_per = dims.out_channels * out_plane;
    let mut dcols = vec![T::zero(); rows * ncols];
    let mut d_weight = vec![T::zero(); weight.len()];
    let mut d_bias = vec![0f64; dims.out_channels];
    let mut d_input = want_input.then(|| vec![T::zero(); input.len()]);
    for (n, (x, gy)) in input.chunks(in_per).zip(grad_out.chunks(out_per)).enumerate() {
        win.im2col(gy, &mut dcols);
        accumulate_bias_grad(gy, out_plane, &mut d_bias);
        // dW += x · dcolsᵀ
        T::gemm(
            dims.in_channels,
            ncols,
            rows,
            T::one(),
            x,
            (ncols as isize, 1),
            &dcols,
            (1, ncols as isize),
            T::one(),
            &mut d_weight,
            (rows as isize, 1),
        );
        if let Some(dx) = d_input.as_mut() {
            // dx = W · dcols
            T::gemm(
                dims.in_channels,
                rows,
                ncols,
                T::one(),
                weight,
                (rows as isize, 1),
                &dcols,
                (ncols as isize, 1),
                T::zero(),
                &mut dx[n * in_per..(n + 1) * in_per],
                (ncols as isize, 1),
            );
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias.into_iter().map(T::from_f64).collect(),
    }
}
