//! Dense row-major `f64` tensors.
//!
//! Everything above this module (layers, oracle, training) stores feature maps
//! as `[H, W, C]` and kernels as `[k, k, C_in, C_out]`, both row-major with the
//! last axis fastest.

use std::fmt;

use crate::error::{Error, Result};

/// Extents of a tensor. Every extent is at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("shape must have at least one axis"));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("extent 0 on axis {axis} in {dims:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::shape(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for axis in (0..self.0.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.0[axis + 1];
        }
        strides
    }

    /// Row-major flat offset of a multi-index.
    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.0.len() {
            return Err(Error::shape(format!(
                "index {index:?} has rank {} but shape {:?} has rank {}",
                index.len(),
                self.0,
                self.0.len()
            )));
        }
        let mut flat = 0;
        for (axis, (&i, &d)) in index.iter().zip(&self.0).enumerate() {
            if i >= d {
                return Err(Error::shape(format!(
                    "index {i} out of bounds for axis {axis} of extent {d}"
                )));
            }
            flat = flat * d + i;
        }
        Ok(flat)
    }

    /// Inverse of [`Shape::flat_index`].
    pub fn unravel(&self, mut flat: usize) -> Result<Vec<usize>> {
        if flat >= self.len() {
            return Err(Error::shape(format!(
                "flat index {flat} out of bounds for {} elements",
                self.len()
            )));
        }
        let mut index = vec![0; self.0.len()];
        for axis in (0..self.0.len()).rev() {
            index[axis] = flat % self.0[axis];
            flat /= self.0[axis];
        }
        Ok(index)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Output extent of a sliding window along one axis:
/// `floor((input + 2*pad - kernel) / stride) + 1`.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::shape(format!(
            "kernel ({kernel}) and stride ({stride}) must be positive"
        )));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} larger than padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// How cells outside the input are filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PadFill {
    Value(f64),
    /// The identity of whatever reduction consumes the cell.
    Identity,
}

/// Symmetric spatial padding. `size == 0` is a valid convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PadSpec {
    pub size: usize,
    pub fill: PadFill,
}

impl PadSpec {
    pub const NONE: PadSpec = PadSpec {
        size: 0,
        fill: PadFill::Value(0.0),
    };

    pub fn value(size: usize, value: f64) -> Self {
        PadSpec {
            size,
            fill: PadFill::Value(value),
        }
    }

    pub fn identity(size: usize) -> Self {
        PadSpec {
            size,
            fill: PadFill::Identity,
        }
    }

    pub fn is_none(&self) -> bool {
        self.size == 0
    }

    /// The concrete fill value for a cell consumed by `reducer`.
    pub fn fill_value(&self, reducer: Reducer) -> f64 {
        match self.fill {
            PadFill::Value(v) => v,
            PadFill::Identity => reducer.identity(),
        }
    }
}

impl Default for PadSpec {
    fn default() -> Self {
        PadSpec::NONE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reducer {
    Sum,
    Min,
    Max,
}

impl Reducer {
    pub fn identity(self) -> f64 {
        match self {
            Reducer::Sum => 0.0,
            Reducer::Min => f64::INFINITY,
            Reducer::Max => f64::NEG_INFINITY,
        }
    }
}

/// Result of [`Tensor::reduce`]. `argindex` holds, for min/max, the flat input
/// index of the selected element of every output cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub values: Tensor,
    pub argindex: Option<Vec<usize>>,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 32 {
            write!(f, "Tensor[{}]{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor[{}]{{{} elements}}", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.len()];
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.len() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape} needs {} elements, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.len()).map(&mut f).collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.shape.flat_index(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let flat = self.shape.flat_index(index)?;
        self.data[flat] = value;
        Ok(())
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.len() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary op on same-shaped tensors.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {} and {}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Fails with the first non-finite element, if any.
    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(Error::NonFinite {
                context,
                index,
                value: self.data[index],
            }),
        }
    }

    /// Extracts the `k x k x C` patch of an `[H, W, C]` tensor whose top-left
    /// corner sits at input coordinates `(h, w)`.
    ///
    /// With `fill == None` the patch must lie entirely inside the input. With a
    /// fill value, out-of-bounds cells take that value, but at least one cell
    /// must overlap the input.
    pub fn window(&self, h: isize, w: isize, k: usize, fill: Option<f64>) -> Result<Tensor> {
        let [height, width, channels] = self.hwc()?;
        if k == 0 {
            return Err(Error::shape("window size must be positive"));
        }
        let (hi, wi, ki) = (height as isize, width as isize, k as isize);
        if h + ki <= 0 || w + ki <= 0 || h >= hi || w >= wi {
            return Err(Error::shape(format!(
                "{k}x{k} window at ({h}, {w}) lies outside {}",
                self.shape
            )));
        }
        let inside = h >= 0 && w >= 0 && h + ki <= hi && w + ki <= wi;
        if !inside && fill.is_none() {
            return Err(Error::shape(format!(
                "{k}x{k} window at ({h}, {w}) overlaps the border of {} without padding",
                self.shape
            )));
        }
        let mut out = Vec::with_capacity(k * k * channels);
        for i in 0..ki {
            for j in 0..ki {
                let (r, c) = (h + i, w + j);
                if (0..hi).contains(&r) && (0..wi).contains(&c) {
                    let base = (r as usize * width + c as usize) * channels;
                    out.extend_from_slice(&self.data[base..base + channels]);
                } else {
                    out.extend(std::iter::repeat_n(fill.unwrap_or(0.0), channels));
                }
            }
        }
        Tensor::from_vec(vec![k, k, channels], out)
    }

    /// Reduces over `axes` in row-major order. The output keeps the remaining
    /// axes, or is `[1]` when every axis is reduced. Ties in min/max go to the
    /// smallest flat index.
    pub fn reduce(&self, op: Reducer, axes: &[usize]) -> Result<Reduction> {
        if axes.is_empty() {
            return Err(Error::shape("reduction over an empty axis set"));
        }
        let rank = self.shape.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(Error::shape(format!("axis {axis} out of range for rank {rank}")));
            }
            if reduced[axis] {
                return Err(Error::shape(format!("axis {axis} listed twice")));
            }
            reduced[axis] = true;
        }
        let dims = self.shape.dims();
        let kept: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).map(|a| dims[a]).collect();
        let out_shape = Shape::new(if kept.is_empty() { vec![1] } else { kept })?;

        let out_len = out_shape.len();
        let mut values = vec![0.0; out_len];
        let mut seen = vec![false; out_len];
        let mut arg = vec![0usize; out_len];

        let mut index = vec![0usize; rank];
        for (flat, &v) in self.data.iter().enumerate() {
            let mut out = 0;
            for axis in 0..rank {
                if !reduced[axis] {
                    out = out * dims[axis] + index[axis];
                }
            }
            if !seen[out] {
                seen[out] = true;
                values[out] = v;
                arg[out] = flat;
            } else {
                match op {
                    Reducer::Sum => values[out] += v,
                    Reducer::Min if v < values[out] => {
                        values[out] = v;
                        arg[out] = flat;
                    }
                    Reducer::Max if v > values[out] => {
                        values[out] = v;
                        arg[out] = flat;
                    }
                    _ => {}
                }
            }
            // advance the row-major multi-index
            for axis in (0..rank).rev() {
                index[axis] += 1;
                if index[axis] < dims[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }

        Ok(Reduction {
            values: Tensor {
                shape: out_shape,
                data: values,
            },
            argindex: (op != Reducer::Sum).then_some(arg),
        })
    }

    /// `[H, W, C]` extents, or a shape error for any other rank.
    pub fn hwc(&self) -> Result<[usize; 3]> {
        match *self.shape.dims() {
            [h, w, c] => Ok([h, w, c]),
            _ => Err(Error::shape(format!(
                "expected an [H, W, C] tensor, got {}",
                self.shape
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_are_zero() {
        let t = Tensor::zeros([2, 2]).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        assert_eq!(Tensor::zeros([1]).unwrap().data(), &[0.0]);
        let t = Tensor::zeros([3, 3, 2]).unwrap();
        assert_eq!(t.len(), 18);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::zeros([2, 0]).is_err());
        assert!(Tensor::zeros(Vec::<usize>::new()).is_err());
        assert!(Tensor::zeros([usize::MAX, 2]).is_err());
        assert!(Tensor::from_vec([2], vec![1.0]).is_err());
    }

    #[test]
    fn output_extent() {
        assert_eq!(conv_output_extent(7, 3, 1, 0).unwrap(), 5);
        assert_eq!(conv_output_extent(32, 4, 2, 0).unwrap(), 15);
        assert_eq!(conv_output_extent(15, 3, 2, 0).unwrap(), 7);
        assert_eq!(conv_output_extent(28, 14, 1, 0).unwrap(), 15);
        assert!(conv_output_extent(2, 3, 1, 0).is_err());
        assert!(conv_output_extent(2, 3, 0, 1).is_err());
    }

    #[test]
    fn window_top_left_of_7x7() {
        let x = Tensor::from_fn([7, 7, 1], |i| i as f64).unwrap();
        let p = x.window(0, 0, 3, None).unwrap();
        assert_eq!(p.dims(), &[3, 3, 1]);
        assert_eq!(p.data(), &[0., 1., 2., 7., 8., 9., 14., 15., 16.]);
    }

    #[test]
    fn window_whole_tensor() {
        let x = Tensor::from_vec([2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(x.window(0, 0, 2, None).unwrap(), x);
    }

    #[test]
    fn window_with_value_padding() {
        let x = Tensor::from_vec([2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let p = x.window(1, 1, 2, Some(0.0)).unwrap();
        assert_eq!(p.data(), &[4., 0., 0., 0.]);
        let p = x.window(-1, 0, 2, Some(f64::INFINITY)).unwrap();
        assert_eq!(p.data(), &[f64::INFINITY, f64::INFINITY, 1., 2.]);
    }

    #[test]
    fn window_errors() {
        let x = Tensor::zeros([2, 2, 1]).unwrap();
        assert!(x.window(1, 1, 2, None).is_err());
        assert!(x.window(2, 0, 2, Some(0.0)).is_err());
        assert!(x.window(-2, -2, 2, Some(0.0)).is_err());
    }

    #[test]
    fn reduce_examples() {
        let x = Tensor::from_vec([2, 2], vec![1., 2., 3., 4.]).unwrap();
        let r = x.reduce(Reducer::Sum, &[0, 1]).unwrap();
        assert_eq!(r.values.data(), &[10.0]);
        assert!(r.argindex.is_none());

        let x = Tensor::from_vec([4], vec![3., -1., 3., -1.]).unwrap();
        let r = x.reduce(Reducer::Min, &[0]).unwrap();
        assert_eq!(r.values.data(), &[-1.0]);
        assert_eq!(r.argindex.unwrap(), vec![1]);

        let x = Tensor::from_vec([1], vec![5.]).unwrap();
        let r = x.reduce(Reducer::Max, &[0]).unwrap();
        assert_eq!(r.values.data(), &[5.0]);
        assert_eq!(r.argindex.unwrap(), vec![0]);
    }

    #[test]
    fn reduce_partial_axes() {
        // [2, 3]: reduce rows -> per-column
        let x = Tensor::from_vec([2, 3], vec![1., 5., 3., 4., 2., 6.]).unwrap();
        let r = x.reduce(Reducer::Max, &[0]).unwrap();
        assert_eq!(r.values.dims(), &[3]);
        assert_eq!(r.values.data(), &[4., 5., 6.]);
        assert_eq!(r.argindex.unwrap(), vec![3, 1, 5]);
        let r = x.reduce(Reducer::Sum, &[1]).unwrap();
        assert_eq!(r.values.data(), &[9., 12.]);
    }

    #[test]
    fn reduce_errors() {
        let x = Tensor::zeros([2, 2]).unwrap();
        assert!(x.reduce(Reducer::Sum, &[]).is_err());
        assert!(x.reduce(Reducer::Sum, &[2]).is_err());
        assert!(x.reduce(Reducer::Sum, &[0, 0]).is_err());
    }

    #[test]
    fn identities() {
        assert_eq!(PadSpec::identity(1).fill_value(Reducer::Min), f64::INFINITY);
        assert_eq!(PadSpec::identity(1).fill_value(Reducer::Max), f64::NEG_INFINITY);
        assert_eq!(PadSpec::identity(1).fill_value(Reducer::Sum), 0.0);
        assert_eq!(PadSpec::value(1, 2.5).fill_value(Reducer::Min), 2.5);
    }

    fn small_dims() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..=4)
    }

    proptest! {
        #[test]
        fn flat_index_round_trips(dims in small_dims(), seed in any::<usize>()) {
            let shape = Shape::new(dims).unwrap();
            let flat = seed % shape.len();
            let index = shape.unravel(flat).unwrap();
            prop_assert_eq!(shape.flat_index(&index).unwrap(), flat);
        }

        #[test]
        fn reduce_min_is_lower_bound_with_first_argindex(
            data in prop::collection::vec(-3i32..3, 1..40),
        ) {
            let x = Tensor::from_vec([data.len()], data.iter().map(|&v| v as f64).collect()).unwrap();
            let r = x.reduce(Reducer::Min, &[0]).unwrap();
            let m = r.values.data()[0];
            prop_assert!(x.data().iter().all(|&v| m <= v));
            let arg = r.argindex.unwrap()[0];
            prop_assert_eq!(x.data()[arg], m);
            prop_assert!(x.data()[..arg].iter().all(|&v| v != m));
        }

        #[test]
        fn window_matches_direct_indexing(
            h in 1usize..6, w in 1usize..6, c in 1usize..3, k in 1usize..4,
            oh in -2isize..6, ow in -2isize..6,
        ) {
            let x = Tensor::from_fn([h, w, c], |i| i as f64 * 0.5 - 3.0).unwrap();
            let Ok(p) = x.window(oh, ow, k, Some(-7.0)) else { return Ok(()); };
            for i in 0..k {
                for j in 0..k {
                    for d in 0..c {
                        let (r, col) = (oh + i as isize, ow + j as isize);
                        let expect = if r >= 0 && col >= 0 && (r as usize) < h && (col as usize) < w {
                            x.get(&[r as usize, col as usize, d]).unwrap()
                        } else {
                            -7.0
                        };
                        prop_assert_eq!(p.get(&[i, j, d]).unwrap(), expect);
                    }
                }
            }
        }
    }
}
