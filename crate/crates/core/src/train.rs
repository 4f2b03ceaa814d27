//! Local minibatch training and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TrainSet;
use crate::error::{Error, Result};
use crate::factorized::{prox_l1_in_place, BlockGrad, ModelParams, ParamBlock, SlotKind};
use crate::nn::{self, argmax_rows, cross_entropy, Network, Sgd, Velocity};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub sgd: Sgd,
    pub batch_size: usize,
    /// L1 weight on every `mu`, applied as a soft-threshold after each step.
    pub lambda_sparsity: f64,
    /// Reshuffle examples every epoch.
    pub shuffle: bool,
}

/// FedProx anchor: `(prox_mu / 2) * ||theta - anchor||^2` over the blocks
/// flagged in `mask`.
#[derive(Debug, Clone)]
pub struct ProxAnchor<'a> {
    pub prox_mu: f64,
    pub params: &'a ModelParams,
    pub mask: &'a [bool],
}

/// Runs `epochs` passes over `data`. Returns the mean training loss of the
/// last epoch.
pub fn train_epochs(
    net: &Network,
    params: &mut ModelParams,
    velocity: &mut Velocity,
    data: &TrainSet,
    hp: &TrainHyper,
    epochs: usize,
    rng: &mut SimRng,
    anchor: Option<&ProxAnchor<'_>>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("empty training set"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last = 0.0;
    for _ in 0..epochs {
        if hp.shuffle {
            order.shuffle(rng);
        }
        let mut total = 0.0;
        for chunk in order.chunks(hp.batch_size.max(1)) {
            let loss = train_step(net, params, velocity, data, chunk, hp, anchor)?;
            total += loss * chunk.len() as f64;
        }
        last = total / data.len() as f64;
    }
    Ok(last)
}

pub fn train_step(
    net: &Network,
    params: &mut ModelParams,
    velocity: &mut Velocity,
    data: &TrainSet,
    batch: &[usize],
    hp: &TrainHyper,
    anchor: Option<&ProxAnchor<'_>>,
) -> Result<f64> {
    let x = data.x.gather_rows(batch);
    let y: Vec<usize> = batch.iter().map(|&i| data.y[i]).collect();
    let (logits, cache) = nn::forward(net, params, &x)?;
    let (loss, dlogits) = cross_entropy(&logits, &y)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {loss}")));
    }
    let grads = nn::backward(net, &cache, &dlogits)?;
    let mut pg = params.route(&grads)?;
    if let Some(a) = anchor.filter(|a| a.prox_mu != 0.0) {
        for (l, (g, (p, q))) in pg
            .blocks
            .iter_mut()
            .zip(params.blocks.iter().zip(&a.params.blocks))
            .enumerate()
        {
            if !a.mask[l] {
                continue;
            }
            if let (BlockGrad::Plain(g), ParamBlock::Plain { weight: p }, ParamBlock::Plain { weight: q }) = (g, p, q) {
                for ((gi, pi), qi) in g.data_mut().iter_mut().zip(p.data()).zip(q.data()) {
                    *gi += a.prox_mu * (pi - qi);
                }
            }
        }
    }
    hp.sgd.step(params, &pg, velocity)?;
    let threshold = hp.sgd.lr * hp.lambda_sparsity;
    for (_, kind, slot) in params.slots_mut() {
        if kind == SlotKind::Mu {
            prox_l1_in_place(slot, threshold);
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

pub fn evaluate(net: &Network, params: &ModelParams, data: &TrainSet) -> Result<EvalResult> {
    if data.is_empty() {
        return Ok(EvalResult { accuracy: 0.0, loss: 0.0 });
    }
    let weights = params.weights()?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    let n = data.len();
    let step = 256;
    for start in (0..n).step_by(step) {
        let count = step.min(n - start);
        let x = data.x.slice_rows(start, count);
        let y = &data.y[start..start + count];
        let (logits, _) = nn::forward_with_weights(net, weights.clone(), &x)?;
        let (l, _) = cross_entropy(&logits, y)?;
        loss += l * count as f64;
        correct += argmax_rows(&logits)
            .iter()
            .zip(y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(EvalResult {
        accuracy: correct as f64 / n as f64,
        loss: loss / n as f64,
    })
}
