use super::{check_input, gather_patch, pad_input, transpose_kernel, ConvGrads, ConvKind, ConvParams, ForwardCache};
use crate::error::{Error, Result};
use crate::layers::{InnerOp, OuterOp, TropicalMode};
use crate::ops::OpCounter;
use crate::tensor::{Reducer, Tensor};

trait Extremum {
    const REDUCER: Reducer;
    fn better(candidate: f64, best: f64) -> bool;
}

struct Lowest;
struct Highest;

impl Extremum for Lowest {
    const REDUCER: Reducer = Reducer::Min;
    #[inline(always)]
    fn better(candidate: f64, best: f64) -> bool {
        candidate < best
    }
}

impl Extremum for Highest {
    const REDUCER: Reducer = Reducer::Max;
    #[inline(always)]
    fn better(candidate: f64, best: f64) -> bool {
        candidate > best
    }
}

/// Tropical convolution:
/// `Y(h, w, p) = outer_d inner_{i,j} (X(h*s + i, w*s + j, d) + K(i, j, d, p))`,
/// plus `bias(p)` when the layer has one. No multiplications are performed.
///
/// Window cells are scanned in row-major `(i, j)` order and channels in
/// increasing `d`; ties go to the first candidate.
pub fn tropical_conv_forward(x: &Tensor, params: &ConvParams, mode: TropicalMode) -> Result<(Tensor, ForwardCache)> {
    match mode.inner {
        InnerOp::MinPlus => forward_impl::<Lowest>(x, params, mode),
        InnerOp::MaxPlus => forward_impl::<Highest>(x, params, mode),
    }
}

fn forward_impl<E: Extremum>(x: &Tensor, params: &ConvParams, mode: TropicalMode) -> Result<(Tensor, ForwardCache)> {
    let [ho, wo, c_out] = check_input(x, params, "tropical conv input")?;
    let c_in = params.in_channels();
    let k = params.kernel_size();
    let kk = k * k;
    let stride = params.stride();
    let pad = params.pad();
    let (padded, _, wp) = pad_input(x, pad.size, pad.fill_value(E::REDUCER));
    let kt = transpose_kernel(params.kernel());
    let bias = params.bias().map(|b| b.data());

    let cells = ho * wo * c_out;
    let mut y = vec![0.0; cells];
    let mut inner_arg = vec![0u32; cells * c_in];
    let mut outer_arg = if mode.outer == OuterOp::Sum {
        Vec::new()
    } else {
        vec![0u32; cells]
    };
    let mut patch = vec![0.0; c_in * kk];
    let mut ops = OpCounter::ZERO;

    for oh in 0..ho {
        for ow in 0..wo {
            gather_patch(&padded, wp, c_in, oh * stride, ow * stride, k, &mut patch);
            for p in 0..c_out {
                let cell = (oh * wo + ow) * c_out + p;
                let mut acc = 0.0;
                let mut acc_arg = 0;
                for d in 0..c_in {
                    let xs = &patch[d * kk..(d + 1) * kk];
                    let ks = &kt[(p * c_in + d) * kk..(p * c_in + d + 1) * kk];
                    let mut best = xs[0] + ks[0];
                    let mut arg = 0;
                    for c in 1..kk {
                        let v = xs[c] + ks[c];
                        if E::better(v, best) {
                            best = v;
                            arg = c;
                        }
                    }
                    ops.adds += kk as u64;
                    ops.comparisons += (kk - 1) as u64;
                    inner_arg[cell * c_in + d] = arg as u32;

                    if d == 0 {
                        acc = best;
                        continue;
                    }
                    match mode.outer {
                        OuterOp::Sum => {
                            acc += best;
                            ops.adds += 1;
                        }
                        OuterOp::Max => {
                            ops.comparisons += 1;
                            if best > acc {
                                acc = best;
                                acc_arg = d;
                            }
                        }
                        OuterOp::Min => {
                            ops.comparisons += 1;
                            if best < acc {
                                acc = best;
                                acc_arg = d;
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b[p];
                    ops.adds += 1;
                }
                if !outer_arg.is_empty() {
                    outer_arg[cell] = acc_arg as u32;
                }
                y[cell] = acc;
            }
        }
    }

    let y = Tensor::from_vec([ho, wo, c_out], y)?;
    y.check_finite("tropical conv output")?;
    let cache = ForwardCache {
        kind: ConvKind::Tropical(mode),
        geometry: params.geometry(),
        input: x.clone(),
        out_dims: [ho, wo, c_out],
        inner_arg,
        outer_arg,
        ops,
    };
    Ok((y, cache))
}

/// Subgradient of [`tropical_conv_forward`].
///
/// Each upstream gradient flows to every channel for a sum outer reduction,
/// or only to the cached winning channel for min/max. Within a channel it
/// reaches exactly the cached winning window cell, where it is added to both
/// the kernel entry and the input entry (padding cells receive none).
pub fn tropical_conv_backward(
    dy: &Tensor,
    cache: &ForwardCache,
    params: &ConvParams,
    mode: TropicalMode,
) -> Result<ConvGrads> {
    cache.check_against(ConvKind::Tropical(mode), params, dy)?;
    let [h_in, w_in, c_in] = cache.input.hwc()?;
    let [ho, wo, c_out] = cache.out_dims;
    let k = params.kernel_size();
    let stride = params.stride();
    let pad = params.pad().size;

    let mut dx = vec![0.0; h_in * w_in * c_in];
    let mut dk = vec![0.0; k * k * c_in * c_out];
    let mut db = params.bias().map(|_| vec![0.0; c_out]);

    let mut route = |oh: usize, ow: usize, p: usize, d: usize, g: f64, cell: usize| {
        let arg = cache.inner_arg[cell * c_in + d] as usize;
        let (i, j) = (arg / k, arg % k);
        dk[((i * k + j) * c_in + d) * c_out + p] += g;
        let r = oh * stride + i;
        let c = ow * stride + j;
        if r >= pad && c >= pad && r - pad < h_in && c - pad < w_in {
            dx[((r - pad) * w_in + (c - pad)) * c_in + d] += g;
        }
    };

    for oh in 0..ho {
        for ow in 0..wo {
            for p in 0..c_out {
                let cell = (oh * wo + ow) * c_out + p;
                let g = dy.data()[cell];
                if let Some(db) = db.as_mut() {
                    db[p] += g;
                }
                match mode.outer {
                    OuterOp::Sum => {
                        for d in 0..c_in {
                            route(oh, ow, p, d, g, cell);
                        }
                    }
                    OuterOp::Max | OuterOp::Min => {
                        let d = cache.outer_arg[cell] as usize;
                        route(oh, ow, p, d, g, cell);
                    }
                }
            }
        }
    }

    let grads = ConvGrads {
        input: Tensor::from_vec([h_in, w_in, c_in], dx)?,
        kernel: Tensor::from_vec([k, k, c_in, c_out], dk)?,
        bias: db.map(|b| Tensor::from_vec([c_out], b)).transpose()?,
    };
    if let Some(bad) = grads.kernel.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "tropical conv kernel gradient",
            index: bad,
            value: grads.kernel.data()[bad],
        });
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::count_conv_ops;
    use crate::tensor::PadSpec;

    fn img(h: usize, w: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec([h, w, 1], data.to_vec()).unwrap()
    }

    fn single(kernel: &[f64], k: usize) -> ConvParams {
        ConvParams::new(Tensor::from_vec([k, k, 1, 1], kernel.to_vec()).unwrap(), 1, PadSpec::NONE, None).unwrap()
    }

    #[test]
    fn zero_kernel_is_window_minimum() {
        let x = img(2, 2, &[1., 2., 3., 4.]);
        let (y, _) = tropical_conv_forward(&x, &single(&[0.; 4], 2), TropicalMode::MIN_P_S).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn min_plus_sum_example_and_tie_routing() {
        // sums: 1+2, -2+1, 3+0, 0-1 = 3, -1, 3, -1
        let x = img(2, 2, &[1., -2., 3., 0.]);
        let p = single(&[2., 1., 0., -1.], 2);
        let (y, cache) = tropical_conv_forward(&x, &p, TropicalMode::MIN_P_S).unwrap();
        assert_eq!(y.data(), &[-1.0]);
        assert_eq!(cache.inner_choice(0, 0, 0, 0), Some((0, 1)));

        let dy = Tensor::from_vec([1, 1, 1], vec![1.0]).unwrap();
        let g = tropical_conv_backward(&dy, &cache, &p, TropicalMode::MIN_P_S).unwrap();
        assert_eq!(g.kernel.data(), &[0., 1., 0., 0.]);
        assert_eq!(g.input.data(), &[0., 1., 0., 0.]);
        assert!(g.bias.is_none());
    }

    #[test]
    fn max_plus_max_channel_identity() {
        let x = Tensor::from_vec([1, 1, 2], vec![0., 0.]).unwrap();
        let p = ConvParams::new(Tensor::from_vec([1, 1, 2, 1], vec![5., 3.]).unwrap(), 1, PadSpec::NONE, None).unwrap();
        let (y, cache) = tropical_conv_forward(&x, &p, TropicalMode::MAX_P_MAX).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(cache.outer_choice(0, 0, 0), Some(0));
    }

    #[test]
    fn seven_by_seven_three_channels_to_five_by_five_by_two() {
        let x = Tensor::from_fn([7, 7, 3], |i| (i % 11) as f64 * 0.1).unwrap();
        let p = ConvParams::new(Tensor::from_fn([3, 3, 3, 2], |i| (i % 5) as f64 - 2.0).unwrap(), 1, PadSpec::NONE, None)
            .unwrap();
        for mode in [TropicalMode::MIN_P_S, TropicalMode::MAX_P_S] {
            let (y, _) = tropical_conv_forward(&x, &p, mode).unwrap();
            assert_eq!(y.dims(), &[5, 5, 2]);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = Tensor::from_fn([4, 4, 2], |i| (i as f64).sin()).unwrap();
        let p = ConvParams::new(Tensor::from_fn([2, 2, 2, 3], |i| (i as f64).cos()).unwrap(), 1, PadSpec::NONE, None)
            .unwrap();
        for mode in TropicalMode::ALL {
            let (y, cache) = tropical_conv_forward(&x, &p, mode).unwrap();
            let dy = Tensor::zeros(y.dims().to_vec()).unwrap();
            let g = tropical_conv_backward(&dy, &cache, &p, mode).unwrap();
            assert!(g.input.data().iter().all(|&v| v == 0.0));
            assert!(g.kernel.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn one_by_one_kernel_is_scalar_shift() {
        let x = img(3, 2, &[0.5, -1., 2., 4., 0., 1.5]);
        let p = single(&[0.25], 1);
        let (y, cache) = tropical_conv_forward(&x, &p, TropicalMode::MIN_P_S).unwrap();
        assert_eq!(y.data(), &[0.75, -0.75, 2.25, 4.25, 0.25, 1.75]);
        let dy = Tensor::from_vec([3, 2, 1], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let g = tropical_conv_backward(&dy, &cache, &p, TropicalMode::MIN_P_S).unwrap();
        assert_eq!(g.kernel.data(), &[21.0]);
        assert_eq!(g.input, dy);
    }

    #[test]
    fn bias_extension() {
        let x = img(2, 2, &[1., 2., 3., 4.]);
        let p = ConvParams::new(
            Tensor::zeros([2, 2, 1, 1]).unwrap(),
            1,
            PadSpec::NONE,
            Some(Tensor::from_vec([1], vec![0.5]).unwrap()),
        )
        .unwrap();
        let (y, cache) = tropical_conv_forward(&x, &p, TropicalMode::MAX_P_S).unwrap();
        assert_eq!(y.data(), &[4.5]);
        let dy = Tensor::from_vec([1, 1, 1], vec![3.0]).unwrap();
        let g = tropical_conv_backward(&dy, &cache, &p, TropicalMode::MAX_P_S).unwrap();
        assert_eq!(g.bias.unwrap().data(), &[3.0]);
        assert_eq!(cache.ops().adds, 5);
    }

    #[test]
    fn identity_padding_never_wins() {
        let x = img(2, 2, &[1., 2., 3., 4.]);
        let p = ConvParams::new(Tensor::zeros([2, 2, 1, 1]).unwrap(), 1, PadSpec::identity(1), None).unwrap();
        let (lo, cache) = tropical_conv_forward(&x, &p, TropicalMode::MIN_P_S).unwrap();
        assert_eq!(lo.dims(), &[3, 3, 1]);
        assert_eq!(lo.data(), &[1., 1., 2., 1., 1., 2., 3., 3., 4.]);
        let (hi, _) = tropical_conv_forward(&x, &p, TropicalMode::MAX_P_S).unwrap();
        assert_eq!(hi.data(), &[1., 2., 2., 3., 4., 4., 3., 4., 4.]);

        // padded cells get no input gradient
        let dy = Tensor::full([3, 3, 1], 1.0).unwrap();
        let g = tropical_conv_backward(&dy, &cache, &p, TropicalMode::MIN_P_S).unwrap();
        assert_eq!(g.input.data().iter().sum::<f64>(), 9.0);
    }

    #[test]
    fn value_padding_can_win() {
        let x = img(2, 2, &[1., 2., 3., 4.]);
        let p = ConvParams::new(Tensor::zeros([2, 2, 1, 1]).unwrap(), 1, PadSpec::value(1, 0.0), None).unwrap();
        let (y, cache) = tropical_conv_forward(&x, &p, TropicalMode::MIN_P_S).unwrap();
        // only the centre window lies fully inside the input
        assert_eq!(y.data(), &[0., 0., 0., 0., 1., 0., 0., 0., 0.]);
        let dy = Tensor::full([3, 3, 1], 1.0).unwrap();
        let g = tropical_conv_backward(&dy, &cache, &p, TropicalMode::MIN_P_S).unwrap();
        assert_eq!(g.input.data(), &[1., 0., 0., 0.]);
        assert_eq!(g.kernel.data().iter().sum::<f64>(), 9.0);
    }

    #[test]
    fn strided_geometry() {
        let x = Tensor::from_fn([5, 5, 1], |i| i as f64).unwrap();
        let p = ConvParams::new(Tensor::zeros([3, 3, 1, 1]).unwrap(), 2, PadSpec::NONE, None).unwrap();
        let (y, _) = tropical_conv_forward(&x, &p, TropicalMode::MIN_P_S).unwrap();
        // window origins (0,0), (0,2), (2,0), (2,2): minimum is the top-left cell
        assert_eq!(y.data(), &[0., 2., 10., 12.]);
    }

    #[test]
    fn live_counter_matches_closed_form_and_has_no_mults() {
        let x = Tensor::from_fn([6, 5, 3], |i| (i as f64 * 0.37).sin()).unwrap();
        for mode in TropicalMode::ALL {
            for (stride, pad) in [(1, PadSpec::NONE), (2, PadSpec::value(1, 0.0)), (1, PadSpec::identity(2))] {
                let p = ConvParams::new(Tensor::from_fn([3, 3, 3, 2], |i| i as f64 * 0.1).unwrap(), stride, pad, None)
                    .unwrap();
                let (_, cache) = tropical_conv_forward(&x, &p, mode).unwrap();
                assert_eq!(cache.ops().mults, 0);
                assert_eq!(cache.ops(), count_conv_ops(ConvKind::Tropical(mode), x.shape(), &p).unwrap());
            }
        }
    }

    #[test]
    fn errors() {
        let p = single(&[0.; 4], 2);
        let nan = img(2, 2, &[1., f64::NAN, 3., 4.]);
        assert!(matches!(
            tropical_conv_forward(&nan, &p, TropicalMode::MIN_P_S),
            Err(Error::NonFinite { .. })
        ));
        let wrong_channels = Tensor::zeros([2, 2, 2]).unwrap();
        assert!(tropical_conv_forward(&wrong_channels, &p, TropicalMode::MIN_P_S).is_err());
        let too_small = Tensor::zeros([1, 1, 1]).unwrap();
        assert!(tropical_conv_forward(&too_small, &p, TropicalMode::MIN_P_S).is_err());

        let x = img(2, 2, &[1., 2., 3., 4.]);
        let (_, cache) = tropical_conv_forward(&x, &p, TropicalMode::MIN_P_S).unwrap();
        let dy = Tensor::zeros([1, 1, 1]).unwrap();
        assert!(tropical_conv_backward(&dy, &cache, &p, TropicalMode::MAX_P_S).is_err());
        let bad_dy = Tensor::zeros([2, 1, 1]).unwrap();
        assert!(tropical_conv_backward(&bad_dy, &cache, &p, TropicalMode::MIN_P_S).is_err());
        let other = ConvParams::new(Tensor::zeros([2, 2, 1, 1]).unwrap(), 2, PadSpec::NONE, None).unwrap();
        assert!(tropical_conv_backward(&dy, &cache, &other, TropicalMode::MIN_P_S).is_err());
    }
}
