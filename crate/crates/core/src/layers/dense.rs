use crate::error::{Error, Result};
use crate::ops::OpCounter;
use crate::tensor::{Shape, Tensor};

/// Affine layer `y = W x + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Tensor,
    ops: OpCounter,
}

impl DenseCache {
    pub fn ops(&self) -> OpCounter {
        self.ops
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [out, _] = match *weight.dims() {
            [o, i] => [o, i],
            _ => return Err(Error::shape(format!("dense weight must be [out, in], got {}", weight.shape()))),
        };
        if bias.dims() != [out] {
            return Err(Error::shape(format!("dense bias must be [{out}], got {}", bias.shape())));
        }
        Ok(Dense { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn count_ops(&self) -> OpCounter {
        let n = (self.in_features() * self.out_features()) as u64;
        OpCounter::new(n, n, 0)
    }

    /// Accepts any input with `in_features` elements; the output is `[out]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, DenseCache)> {
        let (n_in, n_out) = (self.in_features(), self.out_features());
        if x.len() != n_in {
            return Err(Error::shape(format!(
                "dense layer expects {n_in} inputs, got {}",
                x.shape()
            )));
        }
        x.check_finite("dense input")?;
        let w = self.weight.data();
        let mut y = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.data()) {
                acc += a * b;
            }
            y.push(acc + self.bias.data()[o]);
        }
        let y = Tensor::from_vec([n_out], y)?;
        y.check_finite("dense output")?;
        let ops = self.count_ops();
        Ok((
            y,
            DenseCache {
                input: x.clone(),
                ops,
            },
        ))
    }

    pub fn backward(&self, dy: &Tensor, cache: &DenseCache) -> Result<DenseGrads> {
        let (n_in, n_out) = (self.in_features(), self.out_features());
        if dy.len() != n_out || cache.input.len() != n_in {
            return Err(Error::shape(format!(
                "dense backward: upstream {} / cached input {} do not match [{n_out}, {n_in}]",
                dy.shape(),
                cache.input.shape()
            )));
        }
        let w = self.weight.data();
        let x = cache.input.data();
        let mut dw = vec![0.0; n_out * n_in];
        let mut dx = vec![0.0; n_in];
        for o in 0..n_out {
            let g = dy.data()[o];
            let row = &w[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                dw[o * n_in + i] = g * x[i];
                dx[i] += g * row[i];
            }
        }
        Ok(DenseGrads {
            input: Tensor::from_vec(cache.input.dims().to_vec(), dx)?,
            weight: Tensor::from_vec([n_out, n_in], dw)?,
            bias: dy.clone().reshape([n_out])?,
        })
    }
}

/// Flattens to a vector, preserving row-major order.
pub fn flatten_forward(x: &Tensor) -> Result<Tensor> {
    x.clone().reshape([x.len()])
}

pub fn flatten_backward(dy: &Tensor, input_shape: &Shape) -> Result<Tensor> {
    dy.clone().reshape(input_shape.dims().to_vec())
}

/// `max(0, x)`, one comparison per element.
pub fn relu_forward(x: &Tensor) -> (Tensor, OpCounter) {
    (
        x.map(|v| if v > 0.0 { v } else { 0.0 }),
        OpCounter::new(0, 0, x.len() as u64),
    )
}

pub fn relu_backward(dy: &Tensor, input: &Tensor) -> Result<Tensor> {
    dy.zip_with(input, |g, x| if x > 0.0 { g } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_is_identity() {
        let mut w = Tensor::zeros([3, 3]).unwrap();
        for i in 0..3 {
            w.set(&[i, i], 1.0).unwrap();
        }
        let dense = Dense::new(w, Tensor::zeros([3]).unwrap()).unwrap();
        let x = Tensor::from_vec([3], vec![0.5, -2.0, 7.0]).unwrap();
        let (y, cache) = dense.forward(&x).unwrap();
        assert_eq!(y, x);
        assert_eq!(cache.ops(), OpCounter::new(9, 9, 0));
    }

    #[test]
    fn hand_gradient() {
        let dense = Dense::new(
            Tensor::from_vec([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap(),
            Tensor::from_vec([2], vec![0.5, -0.5]).unwrap(),
        )
        .unwrap();
        let x = Tensor::from_vec([3], vec![1., 0., -1.]).unwrap();
        let (y, cache) = dense.forward(&x).unwrap();
        assert_eq!(y.data(), &[-1.5, -2.5]);
        let dy = Tensor::from_vec([2], vec![1., 2.]).unwrap();
        let g = dense.backward(&dy, &cache).unwrap();
        assert_eq!(g.input.data(), &[9., 12., 15.]);
        assert_eq!(g.weight.data(), &[1., 0., -1., 2., 0., -2.]);
        assert_eq!(g.bias.data(), &[1., 2.]);
    }

    #[test]
    fn accepts_unflattened_input_and_keeps_its_shape_in_grad() {
        let dense = Dense::new(Tensor::full([1, 4], 1.0).unwrap(), Tensor::zeros([1]).unwrap()).unwrap();
        let x = Tensor::from_vec([2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let (y, cache) = dense.forward(&x).unwrap();
        assert_eq!(y.data(), &[10.0]);
        let g = dense.backward(&Tensor::full([1], 1.0).unwrap(), &cache).unwrap();
        assert_eq!(g.input.dims(), &[2, 2, 1]);
    }

    #[test]
    fn shape_errors() {
        assert!(Dense::new(Tensor::zeros([2, 3]).unwrap(), Tensor::zeros([3]).unwrap()).is_err());
        let dense = Dense::new(Tensor::zeros([2, 3]).unwrap(), Tensor::zeros([2]).unwrap()).unwrap();
        assert!(dense.forward(&Tensor::zeros([4]).unwrap()).is_err());
    }

    #[test]
    fn flatten_shapes() {
        let x = Tensor::from_fn([7, 7, 4], |i| i as f64).unwrap();
        let y = flatten_forward(&x).unwrap();
        assert_eq!(y.dims(), &[196]);
        assert_eq!(y.data(), x.data());
        let back = flatten_backward(&y, x.shape()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn relu_masks() {
        let x = Tensor::from_vec([4], vec![-1., 0., 2., 3.]).unwrap();
        let (y, ops) = relu_forward(&x);
        assert_eq!(y.data(), &[0., 0., 2., 3.]);
        assert_eq!(ops.comparisons, 4);
        let g = relu_backward(&Tensor::full([4], 5.0).unwrap(), &x).unwrap();
        assert_eq!(g.data(), &[0., 0., 5., 5.]);
    }
}
