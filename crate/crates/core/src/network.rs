//! The four benchmark architectures and the layer stack that runs them.
//!
//! Every architecture is `conv -> conv -> flatten -> dense(196 -> 10)` with a
//! `15x15x4` first feature map and a `7x7x4` second one. Only the all-standard
//! baseline uses ReLU, after each of its convs. Tropical layers are nonlinear
//! already, and the conv in `minps-conv` stays linear: with four channels fed
//! by a nearly constant MinP-S map, a ReLU there dies on MNIST within a few
//! dozen steps and the network never leaves chance accuracy.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::layers::{
    conv_backward, conv_forward, count_conv_ops, flatten_backward, flatten_forward, relu_backward, relu_forward,
    ConvKind, ConvParams, Dense, DenseCache, ForwardCache, TropicalMode,
};
use crate::ops::OpCounter;
use crate::tensor::{PadSpec, Shape, Tensor};

pub const FEATURE_CHANNELS: usize = 4;
/// Half-width of the uniform init range for tropical kernels.
pub const TROPICAL_INIT_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    ConvConv,
    MinpsMaxps,
    MinpmaxMaxpmin,
    MinpsConv,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::ConvConv,
        Architecture::MinpsMaxps,
        Architecture::MinpmaxMaxpmin,
        Architecture::MinpsConv,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::ConvConv => "conv-conv",
            Architecture::MinpsMaxps => "minps-maxps",
            Architecture::MinpmaxMaxpmin => "minpmax-maxpmin",
            Architecture::MinpsConv => "minps-conv",
        }
    }

    /// Long form used in result tables, e.g. `(MinP-S)+(MaxP-S)+Flatten+Dense`.
    pub fn structure(&self) -> &'static str {
        match self {
            Architecture::ConvConv => "Conv+Conv+Flatten+Dense",
            Architecture::MinpsMaxps => "(MinP-S)+(MaxP-S)+Flatten+Dense",
            Architecture::MinpmaxMaxpmin => "(MinP-Max)+(MaxP-Min)+Flatten+Dense",
            Architecture::MinpsConv => "(MinP-S)+Conv+Flatten+Dense",
        }
    }

    /// Kinds of the first and second conv layers.
    pub fn conv_kinds(&self) -> [ConvKind; 2] {
        use ConvKind::{Standard, Tropical};
        match self {
            Architecture::ConvConv => [Standard, Standard],
            Architecture::MinpsMaxps => [Tropical(TropicalMode::MIN_P_S), Tropical(TropicalMode::MAX_P_S)],
            Architecture::MinpmaxMaxpmin => [Tropical(TropicalMode::MIN_P_MAX), Tropical(TropicalMode::MAX_P_MIN)],
            Architecture::MinpsConv => [Tropical(TropicalMode::MIN_P_S), Standard],
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown architecture {s:?} (expected one of conv-conv, minps-maxps, minpmax-maxpmin, minps-conv)"
                ))
            })
    }
}

/// `(kernel, stride)` of the first conv layer for a given input.
pub fn first_layer_geometry(input: [usize; 3]) -> Result<(usize, usize)> {
    match input {
        [28, 28, 1] => Ok((14, 1)),
        [32, 32, 3] => Ok((4, 2)),
        other => Err(Error::shape(format!(
            "unsupported input shape {other:?} (expected 28x28x1 or 32x32x3)"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { kind: ConvKind, params: ConvParams },
    Relu,
    Flatten,
    Dense(Dense),
}

impl Layer {
    pub fn name(&self) -> String {
        match self {
            Layer::Conv { kind, params } => format!(
                "{} k{} s{} {}->{}",
                kind.name(),
                params.kernel_size(),
                params.stride(),
                params.in_channels(),
                params.out_channels()
            ),
            Layer::Relu => "ReLU".to_string(),
            Layer::Flatten => "Flatten".to_string(),
            Layer::Dense(d) => format!("Dense {}->{}", d.in_features(), d.out_features()),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv { params, .. } => std::iter::once(params.kernel()).chain(params.bias()).collect(),
            Layer::Dense(d) => vec![d.weight(), d.bias()],
            Layer::Relu | Layer::Flatten => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv { params, .. } => params.tensors_mut(),
            Layer::Dense(d) => d.tensors_mut().into(),
            Layer::Relu | Layer::Flatten => Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv(ForwardCache),
    Relu(Tensor),
    Flatten(Shape),
    Dense(DenseCache),
}

/// Per-layer caches and live operation counts of one forward pass.
#[derive(Debug, Clone)]
pub struct NetCache {
    caches: Vec<LayerCache>,
    ops: Vec<OpCounter>,
}

impl NetCache {
    pub fn layer_ops(&self) -> &[OpCounter] {
        &self.ops
    }

    pub fn total_ops(&self) -> OpCounter {
        self.ops.iter().fold(OpCounter::ZERO, |a, &b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    input_dims: [usize; 3],
    layers: Vec<Layer>,
}

fn uniform(rng: &mut impl Rng, dims: [usize; 4], scale: f64) -> Tensor {
    Tensor::from_fn(dims, |_| rng.random_range(-scale..=scale)).expect("positive dims")
}

fn conv_layer(kind: ConvKind, k: usize, stride: usize, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Layer> {
    let params = match kind {
        ConvKind::Tropical(_) => {
            ConvParams::new(uniform(rng, [k, k, c_in, c_out], TROPICAL_INIT_SCALE), stride, PadSpec::NONE, None)?
        }
        ConvKind::Standard => {
            let scale = (6.0 / ((c_in * k * k + c_out * k * k) as f64)).sqrt();
            ConvParams::new(
                uniform(rng, [k, k, c_in, c_out], scale),
                stride,
                PadSpec::NONE,
                Some(Tensor::zeros([c_out])?),
            )?
        }
    };
    Ok(Layer::Conv { kind, params })
}

impl Network {
    /// Builds `arch` for `[H, W, C]` inputs with freshly initialized weights.
    pub fn build(arch: Architecture, input_dims: [usize; 3], rng: &mut impl Rng) -> Result<Network> {
        let (k1, s1) = first_layer_geometry(input_dims)?;
        let [kind1, kind2] = arch.conv_kinds();
        let relu = arch == Architecture::ConvConv;
        let mut layers = vec![conv_layer(kind1, k1, s1, input_dims[2], FEATURE_CHANNELS, rng)?];
        if relu {
            layers.push(Layer::Relu);
        }
        layers.push(conv_layer(kind2, 3, 2, FEATURE_CHANNELS, FEATURE_CHANNELS, rng)?);
        if relu {
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Flatten);

        let net = Network {
            arch,
            input_dims,
            layers,
        };
        let features = net.feature_len()?;
        let scale = (6.0 / ((features + NUM_CLASSES) as f64)).sqrt();
        let weight = Tensor::from_fn([NUM_CLASSES, features], |_| rng.random_range(-scale..=scale))?;
        let mut net = net;
        net.layers.push(Layer::Dense(Dense::new(weight, Tensor::zeros([NUM_CLASSES])?)?));
        Ok(net)
    }

    /// Reassembles a network from a parameter list in [`Network::params`]
    /// order.
    pub fn from_params(arch: Architecture, input_dims: [usize; 3], params: Vec<Tensor>) -> Result<Network> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Network::build(arch, input_dims, &mut rng)?;
        let slots = net.params_mut();
        if slots.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} expects {} parameter tensors, got {}",
                arch,
                slots.len(),
                params.len()
            )));
        }
        for (slot, value) in slots.into_iter().zip(params) {
            if slot.shape() != value.shape() {
                return Err(Error::shape(format!(
                    "parameter shape {} does not match expected {}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(net)
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(Layer::name).collect()
    }

    /// Output shape of every layer for one input.
    pub fn layer_output_shapes(&self) -> Result<Vec<Shape>> {
        let mut shape = Shape::new(self.input_dims)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = match layer {
                Layer::Conv { params, .. } => params.output_shape(&shape)?,
                Layer::Relu => shape,
                Layer::Flatten => Shape::new([shape.len()])?,
                Layer::Dense(d) => Shape::new([d.out_features()])?,
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    fn feature_len(&self) -> Result<usize> {
        Ok(self.layer_output_shapes()?.last().map(Shape::len).unwrap_or(0))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Parameters excluding conv and dense biases.
    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { params, .. } => params.kernel().len(),
                Layer::Dense(d) => d.weight().len(),
                _ => 0,
            })
            .sum()
    }

    /// Closed-form per-layer operation counts of one forward pass.
    pub fn count_ops(&self) -> Result<Vec<OpCounter>> {
        let mut shape = Shape::new(self.input_dims)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (ops, next) = match layer {
                Layer::Conv { kind, params } => (count_conv_ops(*kind, &shape, params)?, params.output_shape(&shape)?),
                Layer::Relu => (OpCounter::new(0, 0, shape.len() as u64), shape.clone()),
                Layer::Flatten => (OpCounter::ZERO, Shape::new([shape.len()])?),
                Layer::Dense(d) => (d.count_ops(), Shape::new([d.out_features()])?),
            };
            out.push(ops);
            shape = next;
        }
        Ok(out)
    }

    /// Logits for one `[H, W, C]` input, with the caches needed by
    /// [`Network::backward`].
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, NetCache)> {
        if x.dims() != self.input_dims {
            return Err(Error::shape(format!(
                "{} expects {:?} inputs, got {}",
                self.arch,
                self.input_dims,
                x.shape()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut ops = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv { kind, params } => {
                    let (y, cache) = conv_forward(*kind, &h, params)?;
                    ops.push(cache.ops());
                    caches.push(LayerCache::Conv(cache));
                    y
                }
                Layer::Relu => {
                    let (y, count) = relu_forward(&h);
                    ops.push(count);
                    caches.push(LayerCache::Relu(h));
                    y
                }
                Layer::Flatten => {
                    let y = flatten_forward(&h)?;
                    ops.push(OpCounter::ZERO);
                    caches.push(LayerCache::Flatten(h.shape().clone()));
                    y
                }
                Layer::Dense(d) => {
                    let (y, cache) = d.forward(&h)?;
                    ops.push(cache.ops());
                    caches.push(LayerCache::Dense(cache));
                    y
                }
            };
        }
        Ok((h, NetCache { caches, ops }))
    }

    /// Parameter gradients, in [`Network::params`] order, for upstream
    /// gradient `dlogits`.
    pub fn backward(&self, cache: &NetCache, dlogits: &Tensor) -> Result<Vec<Tensor>> {
        if cache.caches.len() != self.layers.len() {
            return Err(Error::invalid("cache does not belong to this network"));
        }
        let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); self.layers.len()];
        let mut g = dlogits.clone();
        for (idx, (layer, lc)) in self.layers.iter().zip(&cache.caches).enumerate().rev() {
            g = match (layer, lc) {
                (Layer::Conv { kind, params }, LayerCache::Conv(c)) => {
                    let grads = conv_backward(*kind, &g, c, params)?;
                    per_layer[idx].push(grads.kernel);
                    per_layer[idx].extend(grads.bias);
                    grads.input
                }
                (Layer::Relu, LayerCache::Relu(input)) => relu_backward(&g, input)?,
                (Layer::Flatten, LayerCache::Flatten(shape)) => flatten_backward(&g, shape)?,
                (Layer::Dense(d), LayerCache::Dense(c)) => {
                    let grads = d.backward(&g, c)?;
                    per_layer[idx].push(grads.weight);
                    per_layer[idx].push(grads.bias);
                    grads.input
                }
                _ => return Err(Error::invalid("cache does not belong to this network")),
            };
        }
        Ok(per_layer.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn geometry_per_dataset() {
        for input in [[28, 28, 1], [32, 32, 3]] {
            for arch in Architecture::ALL {
                let net = Network::build(arch, input, &mut rng()).unwrap();
                let shapes = net.layer_output_shapes().unwrap();
                let convs: Vec<&Shape> = net
                    .layers()
                    .iter()
                    .zip(&shapes)
                    .filter(|(l, _)| matches!(l, Layer::Conv { .. }))
                    .map(|(_, s)| s)
                    .collect();
                assert_eq!(convs[0].dims(), &[15, 15, 4]);
                assert_eq!(convs[1].dims(), &[7, 7, 4]);
                assert_eq!(shapes.last().unwrap().dims(), &[10]);
                let dense = net.layers().iter().find_map(|l| match l {
                    Layer::Dense(d) => Some(d),
                    _ => None,
                });
                assert_eq!(dense.unwrap().in_features(), 196);
            }
        }
        assert!(Network::build(Architecture::ConvConv, [30, 30, 1], &mut rng()).is_err());
    }

    #[test]
    fn parameter_counts_agree_up_to_biases() {
        for input in [[28, 28, 1], [32, 32, 3]] {
            let nets: Vec<Network> =
                Architecture::ALL.iter().map(|&a| Network::build(a, input, &mut rng()).unwrap()).collect();
            let weights: Vec<usize> = nets.iter().map(Network::weight_count).collect();
            assert!(weights.iter().all(|&w| w == weights[0]), "{weights:?}");
            for net in &nets {
                let conv_biases = net.arch().conv_kinds().iter().filter(|k| **k == ConvKind::Standard).count() * 4;
                assert_eq!(net.param_count(), net.weight_count() + conv_biases + NUM_CLASSES);
            }
        }
    }

    #[test]
    fn relu_only_in_the_baseline() {
        let net = Network::build(Architecture::ConvConv, [28, 28, 1], &mut rng()).unwrap();
        let names = net.layer_names();
        assert!(names[0].starts_with("Conv") && names[2].starts_with("Conv"));
        assert_eq!((names[1].as_str(), names[3].as_str(), names[4].as_str()), ("ReLU", "ReLU", "Flatten"));
        for arch in [Architecture::MinpsMaxps, Architecture::MinpmaxMaxpmin, Architecture::MinpsConv] {
            let names = Network::build(arch, [28, 28, 1], &mut rng()).unwrap().layer_names();
            assert_eq!(names.len(), 4);
            assert!(!names.iter().any(|n| n == "ReLU"), "{arch}");
        }
    }

    #[test]
    fn live_ops_match_closed_form() {
        let x = Tensor::from_fn([32, 32, 3], |i| (i % 256) as f64 / 255.0).unwrap();
        for arch in Architecture::ALL {
            let net = Network::build(arch, [32, 32, 3], &mut rng()).unwrap();
            let (_, cache) = net.forward(&x).unwrap();
            assert_eq!(cache.layer_ops(), net.count_ops().unwrap().as_slice());
        }
    }

    #[test]
    fn from_params_round_trip() {
        let net = Network::build(Architecture::MinpmaxMaxpmin, [32, 32, 3], &mut rng()).unwrap();
        let params: Vec<Tensor> = net.params().into_iter().cloned().collect();
        let back = Network::from_params(net.arch(), net.input_dims(), params).unwrap();
        assert_eq!(back, net);
        let wrong = vec![Tensor::zeros([1]).unwrap()];
        assert!(Network::from_params(net.arch(), net.input_dims(), wrong).is_err());
    }

    #[test]
    fn names_parse() {
        for arch in Architecture::ALL {
            assert_eq!(arch.name().parse::<Architecture>().unwrap(), arch);
        }
        assert!("conv".parse::<Architecture>().is_err());
    }
}
