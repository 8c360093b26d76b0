use super::{check_input, gather_patch, pad_input, transpose_kernel, ConvGrads, ConvKind, ConvParams, ForwardCache};
use crate::error::{Error, Result};
use crate::ops::OpCounter;
use crate::tensor::{Reducer, Tensor};

/// Multiply-accumulate convolution:
/// `Y(h, w, p) = sum_d sum_{i,j} X(h*s + i, w*s + j, d) * K(i, j, d, p) + bias(p)`.
///
/// Accumulates channel-major, then row-major over the window, starting
/// from zero; the bias is added last. A missing bias is treated as zero.
pub fn standard_conv_forward(x: &Tensor, params: &ConvParams) -> Result<(Tensor, ForwardCache)> {
    let [ho, wo, c_out] = check_input(x, params, "conv input")?;
    let c_in = params.in_channels();
    let k = params.kernel_size();
    let kk = k * k;
    let stride = params.stride();
    let pad = params.pad();
    let (padded, _, wp) = pad_input(x, pad.size, pad.fill_value(Reducer::Sum));
    let kt = transpose_kernel(params.kernel());
    let bias = params.bias().map(|b| b.data());

    let mut y = vec![0.0; ho * wo * c_out];
    let mut patch = vec![0.0; c_in * kk];
    let mut ops = OpCounter::ZERO;

    for oh in 0..ho {
        for ow in 0..wo {
            gather_patch(&padded, wp, c_in, oh * stride, ow * stride, k, &mut patch);
            for p in 0..c_out {
                let mut acc = 0.0;
                for d in 0..c_in {
                    let xs = &patch[d * kk..(d + 1) * kk];
                    let ks = &kt[(p * c_in + d) * kk..(p * c_in + d + 1) * kk];
                    for (a, b) in xs.iter().zip(ks) {
                        acc += a * b;
                    }
                    ops.mults += kk as u64;
                    // the first product lands on the zero accumulator
                    ops.adds += if d == 0 { kk - 1 } else { kk } as u64;
                }
                if let Some(b) = bias {
                    acc += b[p];
                    ops.adds += 1;
                }
                y[(oh * wo + ow) * c_out + p] = acc;
            }
        }
    }

    let y = Tensor::from_vec([ho, wo, c_out], y)?;
    y.check_finite("conv output")?;
    let cache = ForwardCache {
        kind: ConvKind::Standard,
        geometry: params.geometry(),
        input: x.clone(),
        out_dims: [ho, wo, c_out],
        inner_arg: Vec::new(),
        outer_arg: Vec::new(),
        ops,
    };
    Ok((y, cache))
}

/// Exact gradient of [`standard_conv_forward`].
pub fn standard_conv_backward(dy: &Tensor, cache: &ForwardCache, params: &ConvParams) -> Result<ConvGrads> {
    cache.check_against(ConvKind::Standard, params, dy)?;
    let [h_in, w_in, c_in] = cache.input.hwc()?;
    let [ho, wo, c_out] = cache.out_dims;
    let k = params.kernel_size();
    let stride = params.stride();
    let pad = params.pad();
    let (padded, hp, wp) = pad_input(&cache.input, pad.size, pad.fill_value(Reducer::Sum));
    let kernel = params.kernel().data();

    let mut dx_padded = vec![0.0; hp * wp * c_in];
    let mut dk = vec![0.0; k * k * c_in * c_out];
    let mut db = params.bias().map(|_| vec![0.0; c_out]);

    for oh in 0..ho {
        for ow in 0..wo {
            for p in 0..c_out {
                let g = dy.data()[(oh * wo + ow) * c_out + p];
                if let Some(db) = db.as_mut() {
                    db[p] += g;
                }
                for i in 0..k {
                    for j in 0..k {
                        let base = ((oh * stride + i) * wp + ow * stride + j) * c_in;
                        for d in 0..c_in {
                            let kidx = ((i * k + j) * c_in + d) * c_out + p;
                            dk[kidx] += g * padded[base + d];
                            dx_padded[base + d] += g * kernel[kidx];
                        }
                    }
                }
            }
        }
    }

    let mut dx = vec![0.0; h_in * w_in * c_in];
    for r in 0..h_in {
        let src = ((r + pad.size) * wp + pad.size) * c_in;
        dx[r * w_in * c_in..(r + 1) * w_in * c_in].copy_from_slice(&dx_padded[src..src + w_in * c_in]);
    }

    let grads = ConvGrads {
        input: Tensor::from_vec([h_in, w_in, c_in], dx)?,
        kernel: Tensor::from_vec([k, k, c_in, c_out], dk)?,
        bias: db.map(|b| Tensor::from_vec([c_out], b)).transpose()?,
    };
    if let Some(bad) = grads.kernel.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "conv kernel gradient",
            index: bad,
            value: grads.kernel.data()[bad],
        });
    }
    Ok(grads)
}
