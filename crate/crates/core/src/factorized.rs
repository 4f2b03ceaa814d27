//! Rank-1 kernel factorization with a sparse residual.
//!
//! A factorized layer stores `(u, v, mu)` and rebuilds its kernel as
//! `W = pi(u v^T + mu)`. For a convolution `u` has one entry per filter tap
//! (`F*F`) and `v` one entry per input/output channel pair (`I*O`), so every
//! column of `u v^T` is the same base filter scaled by a channel coefficient.
//! Dense layers use `u` of length `I` and `v` of length `O`.
//!
//! The reshape `pi` is `W[f1, f2, i, o] = M[f1*F + f2, i*O + o]`, which in
//! row-major storage is the identity on the flat buffer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, LayerSpec, Network};
use crate::rng::SimRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReshapeSig {
    Conv { f: usize, cin: usize, cout: usize },
    Dense { nin: usize, nout: usize },
}

impl ReshapeSig {
    pub fn kernel_shape(&self) -> Vec<usize> {
        match *self {
            ReshapeSig::Conv { f, cin, cout } => vec![f, f, cin, cout],
            ReshapeSig::Dense { nin, nout } => vec![nin, nout],
        }
    }

    pub fn u_len(&self) -> usize {
        match *self {
            ReshapeSig::Conv { f, .. } => f * f,
            ReshapeSig::Dense { nin, .. } => nin,
        }
    }

    pub fn v_len(&self) -> usize {
        match *self {
            ReshapeSig::Conv { cin, cout, .. } => cin * cout,
            ReshapeSig::Dense { nout, .. } => nout,
        }
    }

    /// Fan-in of the kernel this signature reshapes to.
    pub fn fan_in(&self) -> usize {
        match *self {
            ReshapeSig::Conv { f, cin, .. } => f * f * cin,
            ReshapeSig::Dense { nin, .. } => nin,
        }
    }

    pub fn for_layer(layer: &LayerSpec) -> Option<Self> {
        match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                filter,
                ..
            } => Some(ReshapeSig::Conv {
                f: filter,
                cin: in_channels,
                cout: out_channels,
            }),
            LayerSpec::Dense { in_dim, out_dim } => Some(ReshapeSig::Dense {
                nin: in_dim,
                nout: out_dim,
            }),
            _ => None,
        }
    }
}

/// `pi`: `(len(u), len(v))` matrix to kernel shape.
pub fn pi(m: Tensor, sig: ReshapeSig) -> Result<Tensor> {
    if m.shape() != [sig.u_len(), sig.v_len()] {
        return Err(Error::config(format!(
            "matrix {:?} does not match signature {sig:?}",
            m.shape()
        )));
    }
    m.reshape(&sig.kernel_shape())
}

/// `pi^-1`: kernel shape back to the `(len(u), len(v))` matrix.
pub fn pi_inv(w: Tensor, sig: ReshapeSig) -> Result<Tensor> {
    if w.shape() != sig.kernel_shape().as_slice() {
        return Err(Error::config(format!(
            "kernel {:?} does not match signature {sig:?}",
            w.shape()
        )));
    }
    w.reshape(&[sig.u_len(), sig.v_len()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedParam {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Sparse residual, shape `(len(u), len(v))`.
    pub mu: Tensor,
    pub sig: ReshapeSig,
}

/// Gradients of a factorized block.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrads {
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub dmu: Tensor,
}

impl FactorizedParam {
    pub fn new(u: Vec<f64>, v: Vec<f64>, mu: Tensor, sig: ReshapeSig) -> Result<Self> {
        let p = FactorizedParam { u, v, mu, sig };
        p.check()?;
        Ok(p)
    }

    /// Zero residual.
    pub fn from_factors(u: Vec<f64>, v: Vec<f64>, sig: ReshapeSig) -> Result<Self> {
        let mu = Tensor::zeros(&[u.len().max(1), v.len().max(1)]);
        Self::new(u, v, mu, sig)
    }

    fn check(&self) -> Result<()> {
        let (nu, nv) = (self.sig.u_len(), self.sig.v_len());
        if self.u.len() != nu || self.v.len() != nv {
            return Err(Error::config(format!(
                "factor lengths ({}, {}) do not match signature {:?} ({nu}, {nv})",
                self.u.len(),
                self.v.len(),
                self.sig
            )));
        }
        if self.mu.shape() != [nu, nv] {
            return Err(Error::config(format!(
                "mu shape {:?} should be [{nu}, {nv}]",
                self.mu.shape()
            )));
        }
        Ok(())
    }

    pub fn param_len(&self) -> usize {
        self.u.len() + self.v.len() + self.mu.len()
    }

    /// `W = pi(u v^T + mu)`.
    pub fn reconstruct(&self) -> Result<Tensor> {
        self.check()?;
        let nv = self.v.len();
        let mut m = self.mu.clone();
        for (row, &ui) in m.data_mut().chunks_mut(nv).zip(&self.u) {
            for (x, &vj) in row.iter_mut().zip(&self.v) {
                *x += ui * vj;
            }
        }
        pi(m, self.sig)
    }

    /// Chain rule through `W = pi(u v^T + mu)`: with `M = pi^-1(dW)`,
    /// `du = M v`, `dv = M^T u`, `dmu = M`.
    pub fn route_gradients(&self, dw: &Tensor) -> Result<FactorGrads> {
        self.check()?;
        let m = pi_inv(dw.clone(), self.sig)?;
        let nv = self.v.len();
        let mut du = vec![0.0; self.u.len()];
        let mut dv = vec![0.0; nv];
        for (r, row) in m.data().chunks(nv).enumerate() {
            let ur = self.u[r];
            let mut s = 0.0;
            for j in 0..nv {
                s += row[j] * self.v[j];
                dv[j] += row[j] * ur;
            }
            du[r] = s;
        }
        Ok(FactorGrads { du, dv, dmu: m })
    }
}

/// Soft-threshold: `sign(m) * max(|m| - lr * lambda, 0)`.
pub fn prox_l1(mu: &Tensor, lr: f64, lambda: f64) -> Tensor {
    let mut out = mu.clone();
    prox_l1_in_place(out.data_mut(), lr * lambda);
    out
}

pub(crate) fn prox_l1_in_place(values: &mut [f64], threshold: f64) {
    if threshold <= 0.0 {
        return;
    }
    for m in values {
        let a = m.abs() - threshold;
        *m = if a > 0.0 { m.signum() * a } else { 0.0 };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamBlock {
    Plain { weight: Tensor },
    Factorized(FactorizedParam),
}

impl ParamBlock {
    pub fn param_len(&self) -> usize {
        match self {
            ParamBlock::Plain { weight } => weight.len(),
            ParamBlock::Factorized(p) => p.param_len(),
        }
    }

    pub fn as_factorized(&self) -> Option<&FactorizedParam> {
        match self {
            ParamBlock::Factorized(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_factorized_mut(&mut self) -> Option<&mut FactorizedParam> {
        match self {
            ParamBlock::Factorized(p) => Some(p),
            _ => None,
        }
    }
}

/// Which part of a block a flat parameter slot holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Weight,
    U,
    V,
    Mu,
}

/// One parameter block per trainable layer; the last block is the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub blocks: Vec<ParamBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockGrad {
    Plain(Tensor),
    Factorized(FactorGrads),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub blocks: Vec<BlockGrad>,
}

impl ParamGrads {
    /// Flat gradient slots in the same order as [`ModelParams::slots_mut`].
    pub fn slots(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                BlockGrad::Plain(t) => out.push(t.data()),
                BlockGrad::Factorized(g) => {
                    out.push(&g.du[..]);
                    out.push(&g.dv[..]);
                    out.push(g.dmu.data());
                }
            }
        }
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            match b {
                BlockGrad::Plain(t) => out.push(t.data_mut()),
                BlockGrad::Factorized(g) => {
                    out.push(&mut g.du[..]);
                    out.push(&mut g.dv[..]);
                    out.push(g.dmu.data_mut());
                }
            }
        }
        out
    }
}

impl ModelParams {
    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn classifier_index(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn is_factorized(&self) -> bool {
        self.blocks.iter().all(|b| matches!(b, ParamBlock::Factorized(_)))
    }

    pub fn param_len(&self) -> usize {
        self.blocks.iter().map(ParamBlock::param_len).sum()
    }

    /// Dense kernel per trainable layer.
    pub fn weights(&self) -> Result<Vec<Tensor>> {
        self.blocks
            .iter()
            .map(|b| match b {
                ParamBlock::Plain { weight } => Ok(weight.clone()),
                ParamBlock::Factorized(p) => p.reconstruct(),
            })
            .collect()
    }

    /// Maps kernel gradients onto the stored parameterization.
    pub fn route(&self, grads: &Gradients) -> Result<ParamGrads> {
        if grads.weights.len() != self.blocks.len() {
            return Err(Error::Internal(format!(
                "{} kernel gradients for {} parameter blocks",
                grads.weights.len(),
                self.blocks.len()
            )));
        }
        let blocks = self
            .blocks
            .iter()
            .zip(&grads.weights)
            .map(|(b, dw)| match b {
                ParamBlock::Plain { .. } => Ok(BlockGrad::Plain(dw.clone())),
                ParamBlock::Factorized(p) => p.route_gradients(dw).map(BlockGrad::Factorized),
            })
            .collect::<Result<_>>()?;
        Ok(ParamGrads { blocks })
    }

    /// Flat parameter slots with their kinds and owning layer.
    pub fn slots_mut(&mut self) -> Vec<(usize, SlotKind, &mut [f64])> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter_mut().enumerate() {
            match b {
                ParamBlock::Plain { weight } => out.push((l, SlotKind::Weight, weight.data_mut())),
                ParamBlock::Factorized(p) => {
                    out.push((l, SlotKind::U, &mut p.u[..]));
                    out.push((l, SlotKind::V, &mut p.v[..]));
                    out.push((l, SlotKind::Mu, p.mu.data_mut()));
                }
            }
        }
        out
    }

    pub fn slots(&self) -> Vec<(usize, SlotKind, &[f64])> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            match b {
                ParamBlock::Plain { weight } => out.push((l, SlotKind::Weight, weight.data())),
                ParamBlock::Factorized(p) => {
                    out.push((l, SlotKind::U, &p.u[..]));
                    out.push((l, SlotKind::V, &p.v[..]));
                    out.push((l, SlotKind::Mu, p.mu.data()));
                }
            }
        }
        out
    }

    /// Concatenation of every slot of the given kind.
    pub fn flatten_kind(&self, kind: SlotKind) -> Vec<f64> {
        self.slots()
            .into_iter()
            .filter(|(_, k, _)| *k == kind)
            .flat_map(|(_, _, s)| s.iter().copied())
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slots()
            .into_iter()
            .flat_map(|(_, _, s)| s.iter().copied())
            .collect()
    }

    /// Total length of all `u` vectors.
    pub fn u_len(&self) -> usize {
        self.blocks
            .iter()
            .filter_map(ParamBlock::as_factorized)
            .map(|p| p.u.len())
            .sum()
    }

    /// The second-last layer's `v`, used for client matching.
    pub fn matching_v(&self) -> Option<&[f64]> {
        let l = self.blocks.len().checked_sub(2)?;
        self.blocks[l].as_factorized().map(|p| &p.v[..])
    }

    /// The second-last layer's `u`.
    pub fn matching_u(&self) -> Option<&[f64]> {
        let l = self.blocks.len().checked_sub(2)?;
        self.blocks[l].as_factorized().map(|p| &p.u[..])
    }
}

/// How `v` is initialized in factorized layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VInit {
    /// `Uniform` in hidden layers, `Ones` in the classifier. Hidden layers
    /// need distinct `v` entries or their output channels never separate.
    #[default]
    ClassifierOnes,
    /// All entries `1/sqrt(len(v))`.
    Ones,
    /// Uniform with `E[v^2] = 1/len(v)`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InitScheme {
    pub factorized: bool,
    pub v_init: VInit,
    /// Rescale `u` and `v` to equal expected norms (the product is unchanged).
    pub balanced: bool,
}

/// He-uniform initialization. For factorized blocks `u` is scaled so the
/// reconstructed kernel has the same per-entry variance as a plain kernel;
/// `mu` starts at zero.
pub fn init_params(net: &Network, scheme: InitScheme, rng: &mut SimRng) -> ModelParams {
    let last = net.trainable_count() - 1;
    let blocks = net
        .trainable()
        .enumerate()
        .map(|(t, (_, layer))| {
            let sig = ReshapeSig::for_layer(layer).expect("trainable layer");
            let bound = (6.0 / sig.fan_in() as f64).sqrt();
            if scheme.factorized {
                let (nu, nv) = (sig.u_len(), sig.v_len());
                let scale = (nv as f64).sqrt();
                let u: Vec<f64> = (0..nu)
                    .map(|_| rng.random_range(-bound..bound) * scale)
                    .collect();
                let ones = match scheme.v_init {
                    VInit::ClassifierOnes => t == last,
                    VInit::Ones => true,
                    VInit::Uniform => false,
                };
                let v: Vec<f64> = match ones {
                    true => vec![1.0 / scale; nv],
                    false => {
                        let b = (3.0 / nv as f64).sqrt();
                        (0..nv).map(|_| rng.random_range(-b..b)).collect()
                    }
                };
                let (u, v) = if scheme.balanced {
                    let g = (nu as f64 * nv as f64 * bound * bound / 3.0).powf(0.25);
                    (
                        u.into_iter().map(|x: f64| x / g).collect(),
                        v.into_iter().map(|x| x * g).collect(),
                    )
                } else {
                    (u, v)
                };
                ParamBlock::Factorized(
                    FactorizedParam::from_factors(u, v, sig).expect("consistent signature"),
                )
            } else {
                let shape = sig.kernel_shape();
                ParamBlock::Plain {
                    weight: Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound)),
                }
            }
        })
        .collect();
    ModelParams { blocks }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub nonzero_count: usize,
    pub total_count: usize,
    pub effective_param_count: usize,
}

/// Counts `mu` entries with `|x| > zero_tol`. The effective size is every
/// `u` and `v` entry plus the surviving `mu` entries.
pub fn sparsity_stats(params: &ModelParams, zero_tol: f64) -> SparsityStats {
    let mut s = SparsityStats {
        nonzero_count: 0,
        total_count: 0,
        effective_param_count: 0,
    };
    for p in params.blocks.iter().filter_map(ParamBlock::as_factorized) {
        s.total_count += p.mu.len();
        s.nonzero_count += p.mu.data().iter().filter(|x| x.abs() > zero_tol).count();
        s.effective_param_count += p.u.len() + p.v.len();
    }
    s.effective_param_count += s.nonzero_count;
    s
}

/// Trainable parameter count. In factorized mode only `u` and `v` are counted.
pub fn param_count(layers: &[LayerSpec], factorized: bool) -> usize {
    layers
        .iter()
        .filter_map(ReshapeSig::for_layer)
        .map(|sig| {
            if factorized {
                sig.u_len() + sig.v_len()
            } else {
                sig.kernel_shape().iter().product()
            }
        })
        .sum()
}
