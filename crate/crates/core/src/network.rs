//! Declarative network specs and the assembled layer stack.
//!
//! A [`NetworkSpec`] is an ordered list of [`LayerSpec`]s ending in a fully
//! connected classifier, which feeds the softmax cross-entropy loss. Building
//! it gives a [`Network`] whose parameters are initialized deterministically
//! from a seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classic::{
    batchnorm_backward, batchnorm_forward, conv_backward, conv_forward, fc_backward, fc_forward, maxpool2_backward,
    maxpool2_forward, BatchNormCache, BatchNormState, ConvParams, FcParams, PoolCache,
};
use crate::dau::{dau_backward, dau_forward, DauCache, DauLayerParams, DmuMode, DEFAULT_MAX_DISPLACEMENT};
use crate::error::{Error, Result};
use crate::gaussian::{build_bank, GaussianKernelBank};
use crate::tensor::{elementwise_relu, relu_backward, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dau {
        features: usize,
        units: usize,
        sigma: f64,
        max_displacement: f64,
    },
    Conv {
        features: usize,
        kernel: usize,
    },
    BatchNorm,
    Relu,
    MaxPool,
    Fc {
        outputs: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Dau { .. } => "dau",
            Self::Conv { .. } => "conv",
            Self::BatchNorm => "batchnorm",
            Self::Relu => "relu",
            Self::MaxPool => "maxpool",
            Self::Fc { .. } => "fc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkSpec {
    /// `(C, H, W)` of one input sample.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// The shallow classifier: three blocks of
    /// `DAU -> batch norm -> ReLU -> 2x2 max pool`, then a linear layer.
    pub fn shallow_dau(features: [usize; 3], units: [usize; 3], sigma: f64) -> Self {
        let mut layers = Vec::new();
        for (f, k) in features.into_iter().zip(units) {
            layers.push(LayerSpec::Dau {
                features: f,
                units: k,
                sigma,
                max_displacement: DEFAULT_MAX_DISPLACEMENT,
            });
            layers.extend([LayerSpec::BatchNorm, LayerSpec::Relu, LayerSpec::MaxPool]);
        }
        layers.push(LayerSpec::Fc { outputs: 10 });
        Self {
            input: [3, 32, 32],
            classes: 10,
            layers,
        }
    }

    /// [`NetworkSpec::shallow_dau`] with dense convolutions of the given sizes.
    pub fn shallow_conv(features: [usize; 3], kernels: [usize; 3]) -> Self {
        let mut layers = Vec::new();
        for (f, k) in features.into_iter().zip(kernels) {
            layers.push(LayerSpec::Conv { features: f, kernel: k });
            layers.extend([LayerSpec::BatchNorm, LayerSpec::Relu, LayerSpec::MaxPool]);
        }
        layers.push(LayerSpec::Fc { outputs: 10 });
        Self {
            input: [3, 32, 32],
            classes: 10,
            layers,
        }
    }

    /// Checks the stack and returns the `(C, H, W)` shape after every layer.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.input.contains(&0) {
            return Err(Error::Spec(format!("input dims must be >= 1, got {:?}", self.input)));
        }
        if self.classes < 2 {
            return Err(Error::Spec(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.layers.is_empty() {
            return Err(Error::Spec("network has no layers".into()));
        }
        match self.layers.last() {
            Some(LayerSpec::Fc { outputs }) if *outputs == self.classes => {}
            _ => {
                return Err(Error::Spec(format!(
                    "the last layer must be the fc loss head with {} outputs",
                    self.classes
                )))
            }
        }
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Spec(format!("layer {}: {msg}", i + 1));
            shape = match *layer {
                LayerSpec::Dau {
                    features,
                    units,
                    sigma,
                    max_displacement,
                } => {
                    if features == 0 || units == 0 {
                        return Err(bad("dau needs features and units >= 1".into()));
                    }
                    if !(sigma.is_finite() && sigma > 0.0) {
                        return Err(bad(format!("sigma must be > 0, got {sigma}")));
                    }
                    if !(max_displacement.is_finite() && max_displacement > 0.0) {
                        return Err(bad(format!("max_displacement must be > 0, got {max_displacement}")));
                    }
                    [features, shape[1], shape[2]]
                }
                LayerSpec::Conv { features, kernel } => {
                    if features == 0 || kernel % 2 == 0 {
                        return Err(bad(format!("conv needs features >= 1 and an odd kernel, got {kernel}")));
                    }
                    [features, shape[1], shape[2]]
                }
                LayerSpec::BatchNorm | LayerSpec::Relu => shape,
                LayerSpec::MaxPool => [shape[0], shape[1].div_ceil(2), shape[2].div_ceil(2)],
                LayerSpec::Fc { outputs } => {
                    if outputs == 0 {
                        return Err(bad("fc needs outputs >= 1".into()));
                    }
                    [outputs, 1, 1]
                }
            };
            out.push(shape);
        }
        Ok(out)
    }
}

/// Role of a parameter array in the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Displacement,
    Bias,
    Scale,
    Shift,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dau {
        params: DauLayerParams,
        bank: GaussianKernelBank,
    },
    Conv(ConvParams),
    BatchNorm(BatchNormState),
    Relu,
    MaxPool,
    Fc(FcParams),
}

/// Per-layer state kept between the forward and backward pass.
#[derive(Debug)]
pub enum Cache {
    Dau(DauCache),
    Conv(Tensor),
    BatchNorm(BatchNormCache),
    Relu(Tensor),
    MaxPool(PoolCache),
    Fc(Tensor),
}

/// Gradients in [`Network::params`] order.
pub type Gradients = Vec<Vec<f32>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

/// Builds a network with deterministic initial parameters.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    let shapes = spec.shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut prev = spec.input;
    for (layer, &shape) in spec.layers.iter().zip(&shapes) {
        let built = match *layer {
            LayerSpec::Dau {
                features,
                units,
                sigma,
                max_displacement,
            } => Layer::Dau {
                params: DauLayerParams::initialized(features, prev[0], units, sigma, max_displacement, &mut rng)?,
                bank: build_bank(sigma)?,
            },
            LayerSpec::Conv { features, kernel } => Layer::Conv(ConvParams::initialized(features, prev[0], kernel, &mut rng)?),
            LayerSpec::BatchNorm => Layer::BatchNorm(BatchNormState::new(prev[0])),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool => Layer::MaxPool,
            LayerSpec::Fc { outputs } => Layer::Fc(FcParams::initialized(prev.iter().product(), outputs, &mut rng)?),
        };
        layers.push(built);
        prev = shape;
    }
    Ok(Network {
        spec: spec.clone(),
        layers,
    })
}

impl Network {
    /// Reassembles a network from stored layers, checking them against the spec.
    pub fn from_parts(spec: NetworkSpec, layers: Vec<Layer>) -> Result<Self> {
        let template = build_network(&spec, 0)?;
        if template.layers.len() != layers.len() {
            return Err(Error::Spec(format!(
                "spec has {} layers, got {}",
                template.layers.len(),
                layers.len()
            )));
        }
        for (i, (a, b)) in template.layers.iter().zip(&layers).enumerate() {
            let same = match (a, b) {
                (Layer::Dau { params: p, .. }, Layer::Dau { params: q, bank }) => {
                    (p.out_features, p.in_channels, p.units, p.sigma, p.max_displacement)
                        == (q.out_features, q.in_channels, q.units, q.sigma, q.max_displacement)
                        && q.w.len() == p.w.len()
                        && q.mu.len() == p.mu.len()
                        && q.active.len() == p.active.len()
                        && q.bias.len() == p.bias.len()
                        && bank.sigma() == q.sigma
                }
                (Layer::Conv(p), Layer::Conv(q)) => {
                    (p.out_features, p.in_channels, p.kernel_h, p.kernel_w, p.padding, p.stride)
                        == (q.out_features, q.in_channels, q.kernel_h, q.kernel_w, q.padding, q.stride)
                        && p.weights.len() == q.weights.len()
                        && p.bias.len() == q.bias.len()
                }
                (Layer::BatchNorm(p), Layer::BatchNorm(q)) => {
                    p.channels() == q.channels()
                        && q.shift.len() == q.channels()
                        && q.running_mean.len() == q.channels()
                        && q.running_var.len() == q.channels()
                }
                (Layer::Relu, Layer::Relu) | (Layer::MaxPool, Layer::MaxPool) => true,
                (Layer::Fc(p), Layer::Fc(q)) => {
                    (p.in_features, p.out_features) == (q.in_features, q.out_features)
                        && p.weights.len() == q.weights.len()
                        && p.bias.len() == q.bias.len()
                }
                _ => false,
            };
            if !same {
                return Err(Error::Spec(format!("layer {} does not match the spec", i + 1)));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// DAU parameters of layer `index` (0-based; errors report it 1-based).
    pub fn dau(&self, index: usize) -> Result<&DauLayerParams> {
        match self.layers.get(index) {
            Some(Layer::Dau { params, .. }) => Ok(params),
            Some(_) => Err(Error::NotDau(index + 1)),
            None => Err(Error::LayerIndex(index + 1)),
        }
    }

    pub fn dau_mut(&mut self, index: usize) -> Result<&mut DauLayerParams> {
        match self.layers.get_mut(index) {
            Some(Layer::Dau { params, .. }) => Ok(params),
            Some(_) => Err(Error::NotDau(index + 1)),
            None => Err(Error::LayerIndex(index + 1)),
        }
    }

    /// Indices of the DAU layers.
    pub fn dau_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], Layer::Dau { .. }))
            .collect()
    }

    /// Trainable arrays, in a fixed order shared with gradients and velocities.
    pub fn params(&self) -> Vec<(usize, ParamKind, &[f32])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dau { params, .. } => {
                    out.push((i, ParamKind::Weight, params.w.as_slice()));
                    out.push((i, ParamKind::Displacement, params.mu.as_flattened()));
                    out.push((i, ParamKind::Bias, params.bias.as_slice()));
                }
                Layer::Conv(p) => {
                    out.push((i, ParamKind::Weight, p.weights.as_slice()));
                    out.push((i, ParamKind::Bias, p.bias.as_slice()));
                }
                Layer::BatchNorm(s) => {
                    out.push((i, ParamKind::Scale, s.scale.as_slice()));
                    out.push((i, ParamKind::Shift, s.shift.as_slice()));
                }
                Layer::Fc(p) => {
                    out.push((i, ParamKind::Weight, p.weights.as_slice()));
                    out.push((i, ParamKind::Bias, p.bias.as_slice()));
                }
                Layer::Relu | Layer::MaxPool => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(usize, ParamKind, &mut [f32])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Dau { params, .. } => {
                    out.push((i, ParamKind::Weight, params.w.as_mut_slice()));
                    out.push((i, ParamKind::Displacement, params.mu.as_flattened_mut()));
                    out.push((i, ParamKind::Bias, params.bias.as_mut_slice()));
                }
                Layer::Conv(p) => {
                    out.push((i, ParamKind::Weight, p.weights.as_mut_slice()));
                    out.push((i, ParamKind::Bias, p.bias.as_mut_slice()));
                }
                Layer::BatchNorm(s) => {
                    out.push((i, ParamKind::Scale, s.scale.as_mut_slice()));
                    out.push((i, ParamKind::Shift, s.shift.as_mut_slice()));
                }
                Layer::Fc(p) => {
                    out.push((i, ParamKind::Weight, p.weights.as_mut_slice()));
                    out.push((i, ParamKind::Bias, p.bias.as_mut_slice()));
                }
                Layer::Relu | Layer::MaxPool => {}
            }
        }
        out
    }

    /// Number of scalars in every trainable array.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, _, p)| p.len()).sum()
    }

    /// Projects every DAU displacement back into its clamp box.
    pub fn clamp_displacements(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Dau { params, .. } = layer {
                params.clamp_displacements();
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims();
        if [c, h, w] != self.spec.input {
            return Err(Error::Shape(format!(
                "network expects samples of {:?}, got {:?}",
                self.spec.input,
                [c, h, w]
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass: batch statistics are used and the running
    /// averages updated. Returns the logits and the caches for [`Network::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Vec<Cache>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for layer in &mut self.layers {
            let (next, cache) = match layer {
                Layer::Dau { params, bank } => {
                    let (y, c) = dau_forward(&a, params, bank)?;
                    (y, Cache::Dau(c))
                }
                Layer::Conv(p) => (conv_forward(&a, p)?, Cache::Conv(a)),
                Layer::BatchNorm(s) => {
                    let (y, c) = batchnorm_forward(&a, s, true)?;
                    (y, Cache::BatchNorm(c))
                }
                Layer::Relu => (elementwise_relu(&a), Cache::Relu(a)),
                Layer::MaxPool => {
                    let (y, c) = maxpool2_forward(&a);
                    (y, Cache::MaxPool(c))
                }
                Layer::Fc(p) => (fc_forward(&a, p)?, Cache::Fc(a)),
            };
            caches.push(cache);
            a = next;
        }
        Ok((a, caches))
    }

    /// Inference-mode logits; batch norm uses the running statistics.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut a = x.clone();
        for layer in &self.layers {
            a = match layer {
                Layer::Dau { params, bank } => dau_forward(&a, params, bank)?.0,
                Layer::Conv(p) => conv_forward(&a, p)?,
                Layer::BatchNorm(s) => batchnorm_forward(&a, &mut s.clone(), false)?.0,
                Layer::Relu => elementwise_relu(&a),
                Layer::MaxPool => maxpool2_forward(&a).0,
                Layer::Fc(p) => fc_forward(&a, p)?,
            };
        }
        Ok(a)
    }

    /// Gradients of the loss given `dlogits`, in [`Network::params`] order.
    pub fn backward(&self, dlogits: &Tensor, caches: Vec<Cache>, mode: DmuMode) -> Result<Gradients> {
        if caches.len() != self.layers.len() {
            return Err(Error::Shape("cache count does not match the network".into()));
        }
        let mut per_layer: Vec<Vec<Vec<f32>>> = vec![Vec::new(); self.layers.len()];
        let mut g = dlogits.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            g = match (layer, cache) {
                (Layer::Dau { params, bank }, Cache::Dau(c)) => {
                    let r = dau_backward(&g, &c, params, bank, mode)?;
                    per_layer[i] = vec![r.dw, r.dmu.into_flattened(), r.dbias];
                    r.dinput
                }
                (Layer::Conv(p), Cache::Conv(x)) => {
                    let r = conv_backward(&x, &g, p)?;
                    per_layer[i] = vec![r.dweights, r.dbias];
                    r.dinput
                }
                (Layer::BatchNorm(s), Cache::BatchNorm(c)) => {
                    let r = batchnorm_backward(&g, &c, s)?;
                    per_layer[i] = vec![r.dscale, r.dshift];
                    r.dinput
                }
                (Layer::Relu, Cache::Relu(x)) => relu_backward(&x, &g),
                (Layer::MaxPool, Cache::MaxPool(c)) => maxpool2_backward(&g, &c)?,
                (Layer::Fc(p), Cache::Fc(x)) => {
                    let r = fc_backward(&x, &g, p)?;
                    per_layer[i] = vec![r.dweights, r.dbias];
                    r.dinput
                }
                _ => return Err(Error::Shape(format!("cache {i} does not belong to its layer"))),
            };
        }
        Ok(per_layer.into_iter().flatten().collect())
    }
}
