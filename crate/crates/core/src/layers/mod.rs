//! Convolution layers (six tropical variants plus the standard baseline) and
//! the small dense/flatten/ReLU layers the architectures need.
//!
//! Layout conventions: feature maps are `[H, W, C]`, conv kernels are
//! `[k, k, C_in, C_out]`, dense weights are `[out, in]`.

mod dense;
mod mode;
mod standard;
mod tropical;

use crate::error::{Error, Result};
use crate::ops::OpCounter;
use crate::tensor::{conv_output_extent, PadFill, PadSpec, Shape, Tensor};

pub use dense::{flatten_backward, flatten_forward, relu_backward, relu_forward, Dense, DenseCache, DenseGrads};
pub use mode::{InnerOp, OuterOp, TropicalMode};
pub use standard::{standard_conv_backward, standard_conv_forward};
pub use tropical::{tropical_conv_backward, tropical_conv_forward};

/// Which convolution a conv layer computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvKind {
    /// Multiply-accumulate convolution with bias.
    Standard,
    Tropical(TropicalMode),
}

impl ConvKind {
    pub fn name(&self) -> &'static str {
        match self {
            ConvKind::Standard => "Conv",
            ConvKind::Tropical(mode) => mode.name(),
        }
    }

    pub fn is_tropical(&self) -> bool {
        matches!(self, ConvKind::Tropical(_))
    }
}

/// Kernel bank, stride, padding and optional per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    kernel: Tensor,
    stride: usize,
    pad: PadSpec,
    bias: Option<Tensor>,
}

impl ConvParams {
    pub fn new(kernel: Tensor, stride: usize, pad: PadSpec, bias: Option<Tensor>) -> Result<Self> {
        let [k, k2, _, c_out] = match *kernel.dims() {
            [a, b, c, d] => [a, b, c, d],
            _ => {
                return Err(Error::shape(format!(
                    "kernel must be [k, k, C_in, C_out], got {}",
                    kernel.shape()
                )))
            }
        };
        if k != k2 {
            return Err(Error::shape(format!("kernel must be square, got {}", kernel.shape())));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        if pad.size >= k {
            return Err(Error::invalid(format!(
                "padding {} must be smaller than the kernel size {k}",
                pad.size
            )));
        }
        if let PadFill::Value(v) = pad.fill {
            if !v.is_finite() {
                return Err(Error::invalid("pad value must be finite"));
            }
        }
        if let Some(b) = &bias {
            if b.dims() != [c_out] {
                return Err(Error::shape(format!(
                    "bias must be [{c_out}], got {}",
                    b.shape()
                )));
            }
        }
        Ok(ConvParams {
            kernel,
            stride,
            pad,
            bias,
        })
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Tensor {
        &mut self.kernel
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor> {
        self.bias.as_mut()
    }

    /// Kernel, then bias if present.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.kernel).chain(self.bias.as_mut()).collect()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> PadSpec {
        self.pad
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[3]
    }

    /// `[H_out, W_out, C_out]` for an `[H, W, C_in]` input.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        let [h, w, c] = match *input.dims() {
            [h, w, c] => [h, w, c],
            _ => return Err(Error::shape(format!("expected [H, W, C] input, got {input}"))),
        };
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "input has {c} channels but the kernel expects {}",
                self.in_channels()
            )));
        }
        let k = self.kernel_size();
        Shape::new([
            conv_output_extent(h, k, self.stride, self.pad.size)?,
            conv_output_extent(w, k, self.stride, self.pad.size)?,
            self.out_channels(),
        ])
    }

    fn geometry(&self) -> Geometry {
        Geometry {
            k: self.kernel_size(),
            stride: self.stride,
            pad: self.pad.size,
            c_in: self.in_channels(),
            c_out: self.out_channels(),
            bias: self.bias.is_some(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
    c_in: usize,
    c_out: usize,
    bias: bool,
}

/// State saved by a conv forward pass for its backward pass.
///
/// For tropical layers this holds, per output cell, the window cell that won
/// the inner reduction of every input channel and (for min/max outer
/// reductions) the winning channel.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    kind: ConvKind,
    geometry: Geometry,
    input: Tensor,
    out_dims: [usize; 3],
    inner_arg: Vec<u32>,
    outer_arg: Vec<u32>,
    ops: OpCounter,
}

impl ForwardCache {
    pub fn kind(&self) -> ConvKind {
        self.kind
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn output_dims(&self) -> [usize; 3] {
        self.out_dims
    }

    /// Operations performed by the forward pass that produced this cache.
    pub fn ops(&self) -> OpCounter {
        self.ops
    }

    /// Kernel cell `(i, j)` selected by the inner reduction for output
    /// `(h, w, p)` and input channel `d`.
    pub fn inner_choice(&self, h: usize, w: usize, d: usize, p: usize) -> Option<(usize, usize)> {
        let [ho, wo, co] = self.out_dims;
        let c_in = self.geometry.c_in;
        if self.inner_arg.is_empty() || h >= ho || w >= wo || p >= co || d >= c_in {
            return None;
        }
        let cell = self.inner_arg[((h * wo + w) * co + p) * c_in + d] as usize;
        Some((cell / self.geometry.k, cell % self.geometry.k))
    }

    /// Input channel selected by a min/max outer reduction.
    pub fn outer_choice(&self, h: usize, w: usize, p: usize) -> Option<usize> {
        let [ho, wo, co] = self.out_dims;
        if self.outer_arg.is_empty() || h >= ho || w >= wo || p >= co {
            return None;
        }
        Some(self.outer_arg[(h * wo + w) * co + p] as usize)
    }

    fn check_against(&self, kind: ConvKind, params: &ConvParams, dy: &Tensor) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!(
                "cache was produced by a {} layer, not {}",
                self.kind.name(),
                kind.name()
            )));
        }
        if self.geometry != params.geometry() {
            return Err(Error::invalid(format!(
                "cache geometry {:?} does not match the layer parameters {:?}",
                self.geometry,
                params.geometry()
            )));
        }
        if dy.dims() != self.out_dims {
            return Err(Error::shape(format!(
                "upstream gradient is {} but the forward output was {:?}",
                dy.shape(),
                self.out_dims
            )));
        }
        Ok(())
    }
}

/// Input, kernel and bias gradients of a conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv_forward(kind: ConvKind, x: &Tensor, params: &ConvParams) -> Result<(Tensor, ForwardCache)> {
    match kind {
        ConvKind::Standard => standard_conv_forward(x, params),
        ConvKind::Tropical(mode) => tropical_conv_forward(x, params, mode),
    }
}

pub fn conv_backward(
    kind: ConvKind,
    dy: &Tensor,
    cache: &ForwardCache,
    params: &ConvParams,
) -> Result<ConvGrads> {
    match kind {
        ConvKind::Standard => standard_conv_backward(dy, cache, params),
        ConvKind::Tropical(mode) => tropical_conv_backward(dy, cache, params, mode),
    }
}

/// Closed-form operation count of one conv forward pass.
///
/// Per output cell, with `n = C_in * k^2`:
/// - tropical: `n` additions (input + kernel), `C_in - 1` more when the outer
///   reduction is a sum, `C_in * (k^2 - 1)` comparisons in the window
///   reductions and `C_in - 1` more for a min/max outer reduction;
/// - standard: `n` multiplications and `n` additions (`n - 1` to accumulate,
///   one for the bias).
///
/// A tropical bias adds one addition per output cell.
pub fn count_conv_ops(kind: ConvKind, input: &Shape, params: &ConvParams) -> Result<OpCounter> {
    let out = params.output_shape(input)?;
    let cells = out.len() as u64;
    let c_in = params.in_channels() as u64;
    let kk = (params.kernel_size() * params.kernel_size()) as u64;
    let bias = u64::from(params.bias.is_some());
    Ok(match kind {
        ConvKind::Standard => OpCounter::new(cells * c_in * kk, cells * (c_in * kk - 1 + bias), 0),
        ConvKind::Tropical(mode) => {
            let (outer_adds, outer_cmps) = match mode.outer {
                OuterOp::Sum => (c_in - 1, 0),
                OuterOp::Max | OuterOp::Min => (0, c_in - 1),
            };
            OpCounter::new(
                0,
                cells * (c_in * kk + outer_adds + bias),
                cells * (c_in * (kk - 1) + outer_cmps),
            )
        }
    })
}

/// The input, padded on every spatial side with `fill`.
/// Returns the buffer and its padded `[H, W]`.
fn pad_input(x: &Tensor, pad: usize, fill: f64) -> (Vec<f64>, usize, usize) {
    let [h, w, c] = x.hwc().expect("caller validated rank");
    if pad == 0 {
        return (x.data().to_vec(), h, w);
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![fill; hp * wp * c];
    for r in 0..h {
        let src = &x.data()[r * w * c..(r + 1) * w * c];
        let dst = ((r + pad) * wp + pad) * c;
        out[dst..dst + w * c].copy_from_slice(src);
    }
    (out, hp, wp)
}

/// Copies the window at padded coordinates `(top, left)` into `patch`, laid
/// out channel-major: `patch[d * k * k + i * k + j]`.
fn gather_patch(padded: &[f64], wp: usize, c_in: usize, top: usize, left: usize, k: usize, patch: &mut [f64]) {
    let kk = k * k;
    for i in 0..k {
        for j in 0..k {
            let base = ((top + i) * wp + left + j) * c_in;
            for d in 0..c_in {
                patch[d * kk + i * k + j] = padded[base + d];
            }
        }
    }
}

/// Kernel `[k, k, C_in, C_out]` rearranged to `[C_out, C_in, k * k]`.
fn transpose_kernel(kernel: &Tensor) -> Vec<f64> {
    let [k, _, c_in, c_out] = match *kernel.dims() {
        [a, b, c, d] => [a, b, c, d],
        _ => unreachable!("ConvParams validates kernel rank"),
    };
    let kk = k * k;
    let mut out = vec![0.0; kk * c_in * c_out];
    for cell in 0..kk {
        for d in 0..c_in {
            for p in 0..c_out {
                out[(p * c_in + d) * kk + cell] = kernel.data()[(cell * c_in + d) * c_out + p];
            }
        }
    }
    out
}

fn check_input(x: &Tensor, params: &ConvParams, context: &'static str) -> Result<[usize; 3]> {
    x.hwc()?;
    x.check_finite(context)?;
    params.kernel.check_finite("conv kernel")?;
    if let Some(b) = &params.bias {
        b.check_finite("conv bias")?;
    }
    let out = params.output_shape(x.shape())?;
    let d = out.dims();
    Ok([d[0], d[1], d[2]])
}
