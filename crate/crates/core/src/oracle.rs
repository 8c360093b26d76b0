//! Naive reference implementations used as test oracles.
//!
//! Every function here is a literal loop nest over the layer formulas and
//! reads tensors only through [`Tensor::get`]. Nothing is shared with
//! [`crate::layers`] beyond the parameter types, so agreement between the two
//! is meaningful. Intended for small shapes only.

use thiserror::Error;

use crate::error::Error;
use crate::layers::{ConvKind, ConvParams, Dense, InnerOp, OuterOp};
use crate::tensor::{PadFill, Tensor};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Layer(#[from] Error),
    /// Two competing candidates of some reduction are closer than the
    /// tolerance; a finite difference would straddle a kink. Resample.
    #[error("near-tie between competing sums (gap {gap:e} < {tolerance:e})")]
    Tie { gap: f64, tolerance: f64 },
}

/// Output of [`oracle_forward`].
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub output: Tensor,
    /// Winning window cell `(i, j)` per `(h, w, p, d)`, row-major; empty for
    /// standard convolution.
    pub inner_winners: Vec<(usize, usize)>,
    /// Winning channel per `(h, w, p)` for min/max outer reductions.
    pub outer_winners: Vec<usize>,
    /// Smallest gap between a winner and its runner-up over every min/max
    /// reduction (infinite when no reduction has two candidates).
    pub min_gap: f64,
}

/// Finite-difference gradients of `sum(dY * Y)`.
#[derive(Debug, Clone)]
pub struct NumericGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

pub fn oracle_forward(x: &Tensor, params: &ConvParams, kind: ConvKind) -> Result<OracleResult, Error> {
    let dims = x.dims();
    if dims.len() != 3 {
        return Err(Error::Shape(format!("oracle expects [H, W, C], got {}", x.shape())));
    }
    let (h_in, w_in, c_in) = (dims[0], dims[1], dims[2]);
    let kd = params.kernel().dims();
    let (k, c_out) = (kd[0], kd[3]);
    if kd[2] != c_in {
        return Err(Error::Shape(format!("input has {c_in} channels, kernel expects {}", kd[2])));
    }
    for (i, v) in x.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "oracle input",
                index: i,
                value: *v,
            });
        }
    }
    let s = params.stride();
    let pad = params.pad().size;
    if h_in + 2 * pad < k || w_in + 2 * pad < k {
        return Err(Error::Shape(format!("kernel {k} larger than padded input {h_in}x{w_in}+{pad}")));
    }
    let h_out = (h_in + 2 * pad - k) / s + 1;
    let w_out = (w_in + 2 * pad - k) / s + 1;

    let fill = match (params.pad().fill, kind) {
        (PadFill::Value(v), _) => v,
        (PadFill::Identity, ConvKind::Standard) => 0.0,
        (PadFill::Identity, ConvKind::Tropical(m)) => match m.inner {
            InnerOp::MinPlus => f64::INFINITY,
            InnerOp::MaxPlus => f64::NEG_INFINITY,
        },
    };
    let at = |r: usize, c: usize, d: usize| -> f64 {
        // (r, c) are padded coordinates
        if r < pad || c < pad || r - pad >= h_in || c - pad >= w_in {
            fill
        } else {
            x.get(&[r - pad, c - pad, d]).unwrap()
        }
    };
    let kern = |i: usize, j: usize, d: usize, p: usize| params.kernel().get(&[i, j, d, p]).unwrap();
    let bias = |p: usize| params.bias().map(|b| b.get(&[p]).unwrap());

    let mut out = Tensor::zeros([h_out, w_out, c_out])?;
    let mut inner_winners = Vec::new();
    let mut outer_winners = Vec::new();
    let mut min_gap = f64::INFINITY;

    for h in 0..h_out {
        for w in 0..w_out {
            for p in 0..c_out {
                let value = match kind {
                    ConvKind::Standard => {
                        let mut acc = 0.0;
                        for d in 0..c_in {
                            for i in 0..k {
                                for j in 0..k {
                                    acc += at(h * s + i, w * s + j, d) * kern(i, j, d, p);
                                }
                            }
                        }
                        acc + bias(p).unwrap_or(0.0)
                    }
                    ConvKind::Tropical(mode) => {
                        let mut per_channel = Vec::with_capacity(c_in);
                        for d in 0..c_in {
                            let mut sums = Vec::with_capacity(k * k);
                            for i in 0..k {
                                for j in 0..k {
                                    sums.push(at(h * s + i, w * s + j, d) + kern(i, j, d, p));
                                }
                            }
                            let (best, arg, gap) = pick(&sums, mode.inner == InnerOp::MinPlus);
                            min_gap = min_gap.min(gap);
                            inner_winners.push((arg / k, arg % k));
                            per_channel.push(best);
                        }
                        let reduced = match mode.outer {
                            OuterOp::Sum => {
                                let mut total = per_channel[0];
                                for v in &per_channel[1..] {
                                    total += v;
                                }
                                total
                            }
                            OuterOp::Max | OuterOp::Min => {
                                let (best, arg, gap) = pick(&per_channel, mode.outer == OuterOp::Min);
                                min_gap = min_gap.min(gap);
                                outer_winners.push(arg);
                                best
                            }
                        };
                        match bias(p) {
                            Some(b) => reduced + b,
                            None => reduced,
                        }
                    }
                };
                out.set(&[h, w, p], value)?;
            }
        }
    }

    Ok(OracleResult {
        output: out,
        inner_winners,
        outer_winners,
        min_gap,
    })
}

/// First minimum (or maximum) of `values`, its index, and the distance to the
/// closest other candidate.
fn pick(values: &[f64], minimum: bool) -> (f64, usize, f64) {
    let mut arg = 0;
    for (i, &v) in values.iter().enumerate() {
        if (minimum && v < values[arg]) || (!minimum && v > values[arg]) {
            arg = i;
        }
    }
    let best = values[arg];
    let mut gap = f64::INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if i != arg {
            gap = gap.min((v - best).abs());
        }
    }
    (best, arg, gap)
}

fn weighted_sum(y: &Tensor, dy: &Tensor) -> f64 {
    let mut total = 0.0;
    for (a, b) in y.data().iter().zip(dy.data()) {
        total += a * b;
    }
    total
}

/// Central finite differences of `L = sum(dY * conv(X, K))`, one coordinate
/// at a time. Refuses inputs where some reduction has a near-tie closer than
/// `tie_tolerance`.
pub fn oracle_grad(
    x: &Tensor,
    params: &ConvParams,
    kind: ConvKind,
    dy: &Tensor,
    eps: f64,
    tie_tolerance: f64,
) -> Result<NumericGrads, OracleError> {
    let base = oracle_forward(x, params, kind)?;
    if base.output.dims() != dy.dims() {
        return Err(Error::Shape(format!(
            "upstream gradient {} does not match output {}",
            dy.shape(),
            base.output.shape()
        ))
        .into());
    }
    if kind.is_tropical() && base.min_gap < tie_tolerance {
        return Err(OracleError::Tie {
            gap: base.min_gap,
            tolerance: tie_tolerance,
        });
    }
    let loss = |x: &Tensor, p: &ConvParams| -> Result<f64, Error> {
        Ok(weighted_sum(&oracle_forward(x, p, kind)?.output, dy))
    };

    let mut dx = Tensor::zeros(x.dims().to_vec())?;
    for n in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[n] += eps;
        let mut minus = x.clone();
        minus.data_mut()[n] -= eps;
        dx.data_mut()[n] = (loss(&plus, params)? - loss(&minus, params)?) / (2.0 * eps);
    }

    let mut dk = Tensor::zeros(params.kernel().dims().to_vec())?;
    for n in 0..dk.len() {
        let mut plus = params.clone();
        plus.kernel_mut().data_mut()[n] += eps;
        let mut minus = params.clone();
        minus.kernel_mut().data_mut()[n] -= eps;
        dk.data_mut()[n] = (loss(x, &plus)? - loss(x, &minus)?) / (2.0 * eps);
    }

    let db = match params.bias() {
        None => None,
        Some(b) => {
            let mut db = Tensor::zeros(b.dims().to_vec())?;
            for n in 0..b.len() {
                let mut plus = params.clone();
                plus.bias_mut().unwrap().data_mut()[n] += eps;
                let mut minus = params.clone();
                minus.bias_mut().unwrap().data_mut()[n] -= eps;
                db.data_mut()[n] = (loss(x, &plus)? - loss(x, &minus)?) / (2.0 * eps);
            }
            Some(db)
        }
    };

    Ok(NumericGrads {
        input: dx,
        kernel: dk,
        bias: db,
    })
}

/// `y[o] = sum_i W[o, i] x[i] + b[o]`, literally.
pub fn oracle_dense_forward(dense: &Dense, x: &Tensor) -> Tensor {
    let (n_out, n_in) = (dense.out_features(), dense.in_features());
    let mut y = Tensor::zeros([n_out]).unwrap();
    for o in 0..n_out {
        let mut acc = 0.0;
        for i in 0..n_in {
            acc += dense.weight().get(&[o, i]).unwrap() * x.data()[i];
        }
        y.set(&[o], acc + dense.bias().get(&[o]).unwrap()).unwrap();
    }
    y
}

/// Finite-difference `(dX, dW, db)` of `sum(dY * dense(X))`.
pub fn oracle_dense_grad(dense: &Dense, x: &Tensor, dy: &Tensor, eps: f64) -> (Tensor, Tensor, Tensor) {
    let loss = |d: &Dense, x: &Tensor| weighted_sum(&oracle_dense_forward(d, x), dy);

    let mut dx = Tensor::zeros(x.dims().to_vec()).unwrap();
    for n in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[n] += eps;
        minus.data_mut()[n] -= eps;
        dx.data_mut()[n] = (loss(dense, &plus) - loss(dense, &minus)) / (2.0 * eps);
    }
    let mut dw = Tensor::zeros(dense.weight().dims().to_vec()).unwrap();
    for n in 0..dw.len() {
        let (mut plus, mut minus) = (dense.clone(), dense.clone());
        plus.weight_mut().data_mut()[n] += eps;
        minus.weight_mut().data_mut()[n] -= eps;
        dw.data_mut()[n] = (loss(&plus, x) - loss(&minus, x)) / (2.0 * eps);
    }
    let mut db = Tensor::zeros(dense.bias().dims().to_vec()).unwrap();
    for n in 0..db.len() {
        let (mut plus, mut minus) = (dense.clone(), dense.clone());
        plus.bias_mut().data_mut()[n] += eps;
        minus.bias_mut().data_mut()[n] -= eps;
        db.data_mut()[n] = (loss(&plus, x) - loss(&minus, x)) / (2.0 * eps);
    }
    (dx, dw, db)
}

/// Relative error of `analytic` against `numeric` in the max norm:
/// `max|a - n| / max(max|a|, max|n|)`, or 0 when both are all zero.
///
/// Measured per tensor rather than per entry: a central difference carries
/// roundoff of order `ulp(L) / eps` in absolute terms, which would swamp an
/// entry that happens to be tiny.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
