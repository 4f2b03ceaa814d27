//! Minimal CNN stack with hand-derived backward passes.

mod layers;
pub mod loss;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorized::ModelParams;
use crate::tensor::Tensor;

pub use loss::{argmax_rows, cross_entropy, softmax};
pub use optim::{Sgd, Velocity};

use layers::ConvGeom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        filter: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d { size: usize },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

/// Per-example activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Spatial { h, w, c } => h * w * c,
            ActShape::Flat(n) => n,
        }
    }

    fn with_batch(&self, b: usize) -> Vec<usize> {
        match *self {
            ActShape::Spatial { h, w, c } => vec![b, h, w, c],
            ActShape::Flat(n) => vec![b, n],
        }
    }
}

/// A validated layer stack with inferred activation shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<LayerSpec>,
    shapes: Vec<ActShape>,
}

impl Network {
    /// `input` is `(h, w, channels)`. The stack must end in a dense layer.
    pub fn new(input: (usize, usize, usize), layers: Vec<LayerSpec>) -> Result<Self> {
        let mut shapes = vec![ActShape::Spatial {
            h: input.0,
            w: input.1,
            c: input.2,
        }];
        for (idx, layer) in layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let next = match (*layer, cur) {
                (
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        filter,
                        stride,
                    },
                    ActShape::Spatial { h, w, c },
                ) => {
                    if in_channels != c {
                        return Err(Error::shape(idx, format!("conv expects {in_channels} channels, input has {c}")));
                    }
                    if filter == 0 || stride == 0 || out_channels == 0 {
                        return Err(Error::shape(idx, "conv extents must be positive"));
                    }
                    if filter > h || filter > w {
                        return Err(Error::shape(idx, format!("filter {filter} larger than input {h}x{w}")));
                    }
                    let g = ConvGeom { h, w, cin: c, cout: out_channels, f: filter, stride };
                    ActShape::Spatial { h: g.out_h(), w: g.out_w(), c: out_channels }
                }
                (LayerSpec::MaxPool2d { size }, ActShape::Spatial { h, w, c }) => {
                    if size == 0 || h / size == 0 || w / size == 0 {
                        return Err(Error::shape(idx, format!("pool size {size} does not fit {h}x{w}")));
                    }
                    ActShape::Spatial { h: h / size, w: w / size, c }
                }
                (LayerSpec::Flatten, s) => ActShape::Flat(s.numel()),
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Dense { in_dim, out_dim }, ActShape::Flat(n)) => {
                    if in_dim != n {
                        return Err(Error::shape(idx, format!("dense expects {in_dim} inputs, got {n}")));
                    }
                    if out_dim == 0 {
                        return Err(Error::shape(idx, "dense output must be positive"));
                    }
                    ActShape::Flat(out_dim)
                }
                (l, s) => {
                    return Err(Error::shape(idx, format!("{l:?} cannot follow activation {s:?}")));
                }
            };
            shapes.push(next);
        }
        match layers.last() {
            Some(LayerSpec::Dense { .. }) => {}
            _ => return Err(Error::config("network must end with a dense classifier")),
        }
        Ok(Network { layers, shapes })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> ActShape {
        self.shapes[0]
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().unwrap().numel()
    }

    /// Trainable layers with their index in the stack.
    pub fn trainable(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_trainable())
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().count()
    }
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    batch: usize,
    inputs: Vec<Tensor>,
    pool_argmax: Vec<Option<Vec<usize>>>,
    weights: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// One kernel gradient per trainable layer.
    pub weights: Vec<Tensor>,
    pub input: Tensor,
}

pub fn forward(net: &Network, params: &ModelParams, batch: &Tensor) -> Result<(Tensor, Cache)> {
    if params.layer_count() != net.trainable_count() {
        return Err(Error::config(format!(
            "{} parameter blocks for {} trainable layers",
            params.layer_count(),
            net.trainable_count()
        )));
    }
    forward_with_weights(net, params.weights()?, batch)
}

/// Forward pass with explicit dense kernels (one per trainable layer).
pub fn forward_with_weights(
    net: &Network,
    weights: Vec<Tensor>,
    batch: &Tensor,
) -> Result<(Tensor, Cache)> {
    let b = *batch.shape().first().unwrap_or(&0);
    if batch.shape() != net.input_shape().with_batch(b).as_slice() {
        return Err(Error::shape(
            0,
            format!("batch {:?} does not match input {:?}", batch.shape(), net.input_shape()),
        ));
    }
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pool_argmax = Vec::with_capacity(net.layers.len());
    let mut x = batch.clone();
    let mut wi = 0;
    for (idx, layer) in net.layers.iter().enumerate() {
        let out_shape = net.shapes[idx + 1].with_batch(b);
        let mut argmax = None;
        let y = match (*layer, net.shapes[idx]) {
            (LayerSpec::Conv2d { out_channels, filter, stride, .. }, ActShape::Spatial { h, w, c }) => {
                let k = &weights[wi];
                if k.shape() != [filter, filter, c, out_channels] {
                    return Err(Error::shape(idx, format!("kernel {:?}", k.shape())));
                }
                wi += 1;
                let g = ConvGeom { h, w, cin: c, cout: out_channels, f: filter, stride };
                layers::conv2d_forward(x.data(), k.data(), b, g)
            }
            (LayerSpec::Dense { in_dim, out_dim }, _) => {
                let k = &weights[wi];
                if k.shape() != [in_dim, out_dim] {
                    return Err(Error::shape(idx, format!("kernel {:?}", k.shape())));
                }
                wi += 1;
                layers::dense_forward(x.data(), k.data(), b, in_dim, out_dim)
            }
            (LayerSpec::Relu, _) => layers::relu_forward(x.data()),
            (LayerSpec::MaxPool2d { size }, ActShape::Spatial { h, w, c }) => {
                let (y, a) = layers::maxpool_forward(x.data(), b, h, w, c, size);
                argmax = Some(a);
                y
            }
            (LayerSpec::Flatten, _) => x.data().to_vec(),
            _ => unreachable!("validated in Network::new"),
        };
        pool_argmax.push(argmax);
        inputs.push(x);
        x = Tensor::new(out_shape, y)?;
    }
    if wi != weights.len() {
        return Err(Error::config(format!("{} kernels for {wi} trainable layers", weights.len())));
    }
    Ok((
        x,
        Cache {
            batch: b,
            inputs,
            pool_argmax,
            weights,
        },
    ))
}

pub fn backward(net: &Network, cache: &Cache, dlogits: &Tensor) -> Result<Gradients> {
    let b = cache.batch;
    if cache.inputs.len() != net.layers.len() || cache.weights.len() != net.trainable_count() {
        return Err(Error::Internal("cache was produced by a different network".into()));
    }
    if dlogits.shape() != net.shapes.last().unwrap().with_batch(b).as_slice() {
        return Err(Error::Internal(format!(
            "dlogits {:?} does not match cached batch of {b}",
            dlogits.shape()
        )));
    }
    let mut dweights: Vec<Option<Tensor>> = vec![None; cache.weights.len()];
    let mut wi = cache.weights.len();
    let mut d = dlogits.data().to_vec();
    for (idx, layer) in net.layers.iter().enumerate().rev() {
        let x = &cache.inputs[idx];
        d = match (*layer, net.shapes[idx]) {
            (LayerSpec::Conv2d { out_channels, filter, stride, .. }, ActShape::Spatial { h, w, c }) => {
                wi -= 1;
                let g = ConvGeom { h, w, cin: c, cout: out_channels, f: filter, stride };
                let k = &cache.weights[wi];
                let (dk, dx) = layers::conv2d_backward(x.data(), k.data(), &d, b, g);
                dweights[wi] = Some(Tensor::new(k.shape().to_vec(), dk)?);
                dx
            }
            (LayerSpec::Dense { in_dim, out_dim }, _) => {
                wi -= 1;
                let k = &cache.weights[wi];
                let (dk, dx) = layers::dense_backward(x.data(), k.data(), &d, b, in_dim, out_dim);
                dweights[wi] = Some(Tensor::new(k.shape().to_vec(), dk)?);
                dx
            }
            (LayerSpec::Relu, _) => layers::relu_backward(x.data(), &d),
            (LayerSpec::MaxPool2d { .. }, _) => {
                let arg = cache.pool_argmax[idx]
                    .as_ref()
                    .ok_or_else(|| Error::Internal("missing pool indices".into()))?;
                layers::maxpool_backward(x.len(), arg, &d)
            }
            (LayerSpec::Flatten, _) => d,
            _ => unreachable!("validated in Network::new"),
        };
    }
    Ok(Gradients {
        weights: dweights.into_iter().map(|w| w.expect("every kernel visited")).collect(),
        input: Tensor::new(cache.inputs[0].shape().to_vec(), d)?,
    })
}

/// Preset architectures.
pub mod presets {
    use super::LayerSpec;

    /// Small CNN: two unpadded 3x3 convolutions (8 and 16 channels), a 2x2
    /// max-pool and a dense classifier. Needs `height, width >= 6`.
    pub fn desk_cnn(height: usize, width: usize, channels: usize, classes: usize) -> Vec<LayerSpec> {
        let flat = ((height - 4) / 2) * ((width - 4) / 2) * 16;
        vec![
            LayerSpec::Conv2d { in_channels: channels, out_channels: 8, filter: 3, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { in_channels: 8, out_channels: 16, filter: 3, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: flat, out_dim: classes },
        ]
    }

    /// The ResNet-9 kernel inventory (8 convolutions + classifier). Used for
    /// parameter and communication accounting only; pooling and skip
    /// connections are not represented.
    pub fn resnet9(classes: usize) -> Vec<LayerSpec> {
        let conv = |i, o, f, s| LayerSpec::Conv2d { in_channels: i, out_channels: o, filter: f, stride: s };
        vec![
            conv(3, 64, 3, 1),
            conv(64, 128, 5, 2),
            conv(128, 128, 3, 1),
            conv(128, 128, 3, 1),
            conv(128, 256, 3, 1),
            conv(256, 256, 3, 1),
            conv(256, 256, 3, 1),
            conv(256, 256, 3, 1),
            LayerSpec::Dense { in_dim: 256, out_dim: classes },
        ]
    }
}
