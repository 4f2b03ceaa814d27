//! Federated round loop and aggregation strategies.
//!
//! Every round the server (1) picks participants, (2) from round 2 on builds
//! each participant's starting point from the latest uploads, (3) lets the
//! participants train locally, possibly in parallel, and (4) stores their
//! uploads. Client randomness is keyed by `(seed, client, round)`, so the
//! outcome is independent of thread count and scheduling.

pub mod cost;
pub mod similarity;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Partition, TrainSet};
use crate::error::{Error, Result};
use crate::factorized::{init_params, InitScheme, ModelParams, ParamBlock};
use crate::nn::{Network, Velocity};
use crate::rng::{self, STREAM_INIT, STREAM_MATCH, STREAM_PARTICIPANTS, STREAM_TRAIN};
use crate::train::{evaluate, train_epochs, EvalResult, ProxAnchor, TrainHyper};

pub use cost::{comm_cost, cost_formula, steady_payload, CostLedger, Inventory, Payload, RoundCost};
pub use similarity::{
    cosine, cosine_matrix, similarity_match, softmax_weights, weighted_average_u, weighted_sum, Matching,
    SimilarityMatrix, ABLATION_PEERS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "standalone")]
    Standalone,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "factorized_fl")]
    FactorizedFl,
    #[serde(rename = "factorized_fl_beta")]
    FactorizedFlBeta,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Standalone,
        Strategy::FedAvg,
        Strategy::FedProx,
        Strategy::FactorizedFl,
        Strategy::FactorizedFlBeta,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Standalone => "standalone",
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::FactorizedFl => "factorized_fl",
            Strategy::FactorizedFlBeta => "factorized_fl_beta",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn needs_factorized(&self) -> bool {
        matches!(self, Strategy::FactorizedFl | Strategy::FactorizedFlBeta)
    }

    pub fn needs_plain(&self) -> bool {
        matches!(self, Strategy::FedAvg | Strategy::FedProx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Cosine threshold below which a peer's score is zeroed.
    pub tau: f64,
    /// Softmax temperature on the scores.
    pub epsilon: f64,
    pub lambda_sparsity: f64,
    pub prox_mu: f64,
    /// FedAvg/FedProx only: whether the classifier layer is averaged.
    pub share_classifier: bool,
    pub participation_fraction: f64,
    /// Drop peers whose thresholded score is zero instead of giving them
    /// weight `exp(0)/Z`.
    pub exclude_zero_sigma: bool,
    pub matching: Matching,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy) -> Self {
        StrategyConfig {
            strategy,
            tau: 0.5,
            epsilon: 10.0,
            lambda_sparsity: 5e-4,
            prox_mu: 0.01,
            share_classifier: true,
            participation_fraction: 1.0,
            exclude_zero_sigma: false,
            matching: Matching::Cosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config(format!("tau = {} must be in [0, 1]", self.tau)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon = {} must be positive", self.epsilon)));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::config(format!(
                "participation_fraction = {} must be in (0, 1]",
                self.participation_fraction
            )));
        }
        if !(self.lambda_sparsity >= 0.0) {
            return Err(Error::config("lambda_sparsity must be non-negative"));
        }
        if !(self.prox_mu >= 0.0) {
            return Err(Error::config("prox_mu must be non-negative"));
        }
        Ok(())
    }
}

/// `ceil(fraction * k)` clients, drawn from the round's participant stream
/// and returned in ascending order.
pub fn select_participants(k: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    let m = ((fraction * k as f64 - 1e-9).ceil() as usize).clamp(1, k.max(1));
    let mut ids: Vec<usize> = (0..k).collect();
    if m >= k {
        return ids;
    }
    ids.shuffle(&mut rng::stream(&[seed, STREAM_PARTICIPANTS, round as u64]));
    ids.truncate(m);
    ids.sort_unstable();
    ids
}

/// Data a client trains and evaluates on (labels already mapped).
#[derive(Debug, Clone)]
pub struct ClientData {
    pub partition: Partition,
    pub train: TrainSet,
    pub val: TrainSet,
    pub test: TrainSet,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: ClientData,
    pub model: ModelParams,
    pub velocity: Velocity,
}

/// Which model a client is scored with at the end of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPoint {
    /// The locally trained model.
    #[default]
    Trained,
    /// The model the server would send next, built from this round's
    /// uploads (for FedAvg: the global model with the client's own
    /// unshared layers).
    Aggregated,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub net: Network,
    pub eval_point: EvalPoint,
    pub init: InitScheme,
    pub strategy: StrategyConfig,
    pub hyper: TrainHyper,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: usize,
    pub participated: bool,
    pub train_loss: Option<f64>,
    pub val: EvalResult,
    pub test: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub metrics: Vec<ClientMetrics>,
    /// Matching used for this round's aggregation (factorized strategies, round > 1).
    pub similarity: Option<SimilarityMatrix>,
    /// Second-last-layer `u` of every client at the start of the round
    /// (after aggregation, before local training).
    pub matching_u: Option<Vec<Vec<f64>>>,
    /// Second-last-layer `v` of every client at the start of the round.
    pub matching_v: Option<Vec<Vec<f64>>>,
    pub cost: RoundCost,
    pub cumulative_bytes: u64,
}

impl RoundReport {
    pub fn mean_test_accuracy(&self) -> f64 {
        mean(self.metrics.iter().map(|m| m.test.accuracy))
    }

    pub fn mean_val_accuracy(&self) -> f64 {
        mean(self.metrics.iter().map(|m| m.val.accuracy))
    }

    pub fn mean_test_loss(&self) -> f64 {
        mean(self.metrics.iter().map(|m| m.test.loss))
    }

    pub fn mean_val_loss(&self) -> f64 {
        mean(self.metrics.iter().map(|m| m.val.loss))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[cfg(feature = "parallel")]
fn par_map<T: Send, R: Send>(items: &mut [T], f: impl Fn(&mut T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter_mut().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R>(items: &mut [T], f: impl Fn(&mut T) -> R) -> Vec<R> {
    items.iter_mut().map(f).collect()
}

pub struct Simulation {
    cfg: SimulationConfig,
    clients: Vec<ClientState>,
    /// Latest upload per client. Strategies read only the parts they transmit.
    uploads: Vec<ModelParams>,
    inventory: Inventory,
    ledger: CostLedger,
    round: usize,
    last_losses: Vec<Option<f64>>,
}

impl Simulation {
    pub fn new(cfg: SimulationConfig, data: Vec<ClientData>) -> Result<Self> {
        cfg.strategy.validate()?;
        cfg.hyper.sgd.validate()?;
        if data.is_empty() {
            return Err(Error::config("need at least one client"));
        }
        if cfg.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        let s = cfg.strategy.strategy;
        if s.needs_factorized() && !cfg.init.factorized {
            return Err(Error::config(format!("{} requires a factorized network", s.name())));
        }
        if s.needs_plain() && cfg.init.factorized {
            return Err(Error::config(format!("{} requires a plain network", s.name())));
        }
        let classes = cfg.net.classes();
        for d in &data {
            if d.partition.class_count() != classes {
                return Err(Error::config(format!(
                    "client {} has {} classes but the classifier has {classes}",
                    d.partition.client_id,
                    d.partition.class_count()
                )));
            }
        }
        let init = init_params(&cfg.net, cfg.init, &mut rng::stream(&[cfg.seed, STREAM_INIT]));
        let clients = data
            .into_iter()
            .enumerate()
            .map(|(id, data)| ClientState {
                id,
                data,
                model: init.clone(),
                velocity: Velocity::zeros_like(&init),
            })
            .collect::<Vec<_>>();
        let uploads = vec![init; clients.len()];
        let inventory = Inventory::of(cfg.net.layers());
        Ok(Simulation {
            cfg,
            clients,
            uploads,
            inventory,
            ledger: CostLedger::default(),
            round: 0,
            last_losses: Vec::new(),
        })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn run(&mut self, rounds: usize) -> Result<Vec<RoundReport>> {
        (0..rounds).map(|_| self.run_round()).collect()
    }

    /// One round: aggregate (from round 2), charge the ledger, train the
    /// participants, evaluate every client.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        self.round += 1;
        let r = self.round;
        let parts = self.participants(r);
        let mut similarity = None;
        if r > 1 {
            let (models, sim) = self.aggregate(&parts, r)?;
            for (&k, m) in parts.iter().zip(models) {
                self.clients[k].model = m;
            }
            similarity = sim;
        }
        let strategy = self.cfg.strategy.strategy;
        let payload = steady_payload(&self.inventory, strategy, self.cfg.strategy.share_classifier);
        let s2c = match (r, strategy) {
            (_, Strategy::Standalone) => 0,
            (1, Strategy::FactorizedFl | Strategy::FactorizedFlBeta) => self.inventory.factorized_full(),
            (1, _) => self.inventory.plain,
            _ => payload.s2c,
        };
        self.ledger.charge(r, parts.len(), s2c, payload.c2s);
        let snap = self.snapshot();
        let mask = self.shared_mask();
        let prox = (strategy == Strategy::FedProx).then_some(&mask[..]);
        self.train_participants(&parts, r, prox)?;
        self.finish_round(r, parts, similarity, snap)
    }

    /// The models the server would hand to `parts` in round `r`, built from
    /// the stored uploads; nothing is modified.
    pub fn aggregate(&self, parts: &[usize], r: usize) -> Result<(Vec<ModelParams>, Option<SimilarityMatrix>)> {
        match self.cfg.strategy.strategy {
            Strategy::Standalone => Ok((parts.iter().map(|&k| self.clients[k].model.clone()).collect(), None)),
            Strategy::FedAvg | Strategy::FedProx => Ok((self.aggregate_fedavg(parts), None)),
            Strategy::FactorizedFl => self.aggregate_factorized(parts, r, false).map(|(m, s)| (m, Some(s))),
            Strategy::FactorizedFlBeta => self.aggregate_factorized(parts, r, true).map(|(m, s)| (m, Some(s))),
        }
    }

    /// Personalized `U` (beta: `U`, `V`, `M`) averages with similarity weights.
    fn aggregate_factorized(&self, parts: &[usize], r: usize, beta: bool) -> Result<(Vec<ModelParams>, SimilarityMatrix)> {
        let sim = self.match_clients(parts, r)?;
        let models = parts
            .iter()
            .zip(&sim.weights)
            .map(|(&k, w)| {
                let mut m = self.clients[k].model.clone();
                for (block, b) in m.blocks.iter_mut().zip(self.blend_factorized(parts, w, beta)) {
                    let f = block.as_factorized_mut().expect("factorized model");
                    f.u = b.u;
                    if let Some((v, mu)) = b.vm {
                        f.v = v;
                        f.mu.data_mut().copy_from_slice(&mu);
                    }
                }
                m
            })
            .collect();
        Ok((models, sim))
    }

    /// Size-weighted average of the shared layers.
    fn aggregate_fedavg(&self, parts: &[usize]) -> Vec<ModelParams> {
        let mask = self.shared_mask();
        let total: usize = parts.iter().map(|&k| self.clients[k].data.train.len()).sum();
        let w: Vec<f64> = parts
            .iter()
            .map(|&k| self.clients[k].data.train.len() as f64 / total as f64)
            .collect();
        let global: Vec<Option<Vec<f64>>> = (0..self.inventory_blocks())
            .map(|l| {
                mask[l].then(|| {
                    let vs: Vec<&[f64]> = parts.iter().map(|&k| plain_weight(&self.uploads[k], l)).collect();
                    weighted_sum(&vs, &w)
                })
            })
            .collect();
        parts
            .iter()
            .map(|&k| {
                let mut m = self.clients[k].model.clone();
                for (l, g) in global.iter().enumerate() {
                    if let (Some(g), ParamBlock::Plain { weight }) = (g, &mut m.blocks[l]) {
                        weight.data_mut().copy_from_slice(g);
                    }
                }
                m
            })
            .collect()
    }

    fn snapshot(&self) -> (Option<Vec<Vec<f64>>>, Option<Vec<Vec<f64>>>) {
        let take = |f: fn(&ModelParams) -> Option<&[f64]>| -> Option<Vec<Vec<f64>>> {
            self.clients.iter().map(|c| f(&c.model).map(<[f64]>::to_vec)).collect()
        };
        (take(ModelParams::matching_u), take(ModelParams::matching_v))
    }

    fn participants(&self, r: usize) -> Vec<usize> {
        select_participants(
            self.clients.len(),
            self.cfg.strategy.participation_fraction,
            r,
            self.cfg.seed,
        )
    }

    fn inventory_blocks(&self) -> usize {
        self.uploads[0].blocks.len()
    }

    fn shared_mask(&self) -> Vec<bool> {
        let n = self.inventory_blocks();
        (0..n)
            .map(|l| self.cfg.strategy.share_classifier || l + 1 != n)
            .collect()
    }

    /// Scores and aggregation weights for every participant, computed from
    /// the stored uploads.
    fn match_clients(&self, parts: &[usize], r: usize) -> Result<SimilarityMatrix> {
        let vs: Vec<Vec<f64>> = parts
            .iter()
            .map(|&k| {
                self.uploads[k]
                    .matching_v()
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::config("matching needs a factorized second-last layer"))
            })
            .collect::<Result<_>>()?;
        let cos = cosine_matrix(&vs).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("{msg} (position in round {r} participant list)")),
            e => e,
        })?;
        let sc = &self.cfg.strategy;
        let n = parts.len();
        let mut sigma = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for a in 0..n {
            let mut s = similarity_match(&vs, a, sc.tau)?;
            let include: Option<Vec<bool>> = match sc.matching {
                Matching::Cosine => sc
                    .exclude_zero_sigma
                    .then(|| s.iter().enumerate().map(|(i, &x)| i == a || x != 0.0).collect()),
                Matching::Random | Matching::Worst => {
                    let mut others: Vec<usize> = (0..n).filter(|&i| i != a).collect();
                    if sc.matching == Matching::Random {
                        let mut rr = rng::stream(&[self.cfg.seed, STREAM_MATCH, r as u64, parts[a] as u64]);
                        others.shuffle(&mut rr);
                    } else {
                        others.sort_by(|&i, &j| cos[a][i].partial_cmp(&cos[a][j]).unwrap().then(i.cmp(&j)));
                    }
                    others.truncate(ABLATION_PEERS);
                    let mut m = vec![false; n];
                    m[a] = true;
                    for &i in &others {
                        m[i] = true;
                        s[i] = cos[a][i];
                    }
                    Some(m)
                }
            };
            weights.push(softmax_weights(&s, sc.epsilon, include.as_deref()));
            sigma.push(s);
        }
        Ok(SimilarityMatrix {
            clients: parts.to_vec(),
            cosine: cos,
            sigma,
            weights,
        })
    }

    /// Weighted averages of the participants' uploaded `u` (and for beta also
    /// `v`, `mu`), one entry per layer.
    fn blend_factorized(&self, parts: &[usize], w: &[f64], beta: bool) -> Vec<Blend> {
        (0..self.inventory_blocks())
            .map(|l| {
                let fac = |k: usize| self.uploads[k].blocks[l].as_factorized().expect("factorized upload");
                let u: Vec<&[f64]> = parts.iter().map(|&k| &fac(k).u[..]).collect();
                let vm = beta.then(|| {
                    let v: Vec<&[f64]> = parts.iter().map(|&k| &fac(k).v[..]).collect();
                    let mu: Vec<&[f64]> = parts.iter().map(|&k| fac(k).mu.data()).collect();
                    (weighted_sum(&v, w), weighted_sum(&mu, w))
                });
                Blend {
                    u: weighted_sum(&u, w),
                    vm,
                }
            })
            .collect()
    }

    fn train_participants(&mut self, parts: &[usize], r: usize, prox_mask: Option<&[bool]>) -> Result<()> {
        let mut active = vec![false; self.clients.len()];
        for &k in parts {
            active[k] = true;
        }
        let cfg = &self.cfg;
        let results = par_map(&mut self.clients, |c| -> Result<Option<f64>> {
            if !active[c.id] {
                return Ok(None);
            }
            let mut rr = rng::stream(&[cfg.seed, STREAM_TRAIN, c.id as u64, r as u64]);
            let anchor_params = prox_mask.map(|_| c.model.clone());
            let anchor = anchor_params.as_ref().zip(prox_mask).map(|(p, mask)| ProxAnchor {
                prox_mu: cfg.strategy.prox_mu,
                params: p,
                mask,
            });
            train_epochs(
                &cfg.net,
                &mut c.model,
                &mut c.velocity,
                &c.data.train,
                &cfg.hyper,
                cfg.epochs,
                &mut rr,
                anchor.as_ref(),
            )
            .map(Some)
            .map_err(|e| Error::Training {
                client: c.id,
                round: r,
                msg: e.to_string(),
            })
        });
        self.last_losses = Vec::with_capacity(results.len());
        for res in results {
            self.last_losses.push(res?);
        }
        for &k in parts {
            self.uploads[k] = self.clients[k].model.clone();
        }
        Ok(())
    }

    fn finish_round(
        &mut self,
        r: usize,
        parts: Vec<usize>,
        similarity: Option<SimilarityMatrix>,
        (matching_u, matching_v): (Option<Vec<Vec<f64>>>, Option<Vec<Vec<f64>>>),
    ) -> Result<RoundReport> {
        let mut received: Vec<Option<ModelParams>> = vec![None; self.clients.len()];
        if self.cfg.eval_point == EvalPoint::Aggregated {
            for (&k, m) in parts.iter().zip(self.aggregate(&parts, r + 1)?.0) {
                received[k] = Some(m);
            }
        }
        let net = &self.cfg.net;
        let mut items: Vec<(&ClientState, Option<ModelParams>)> = self.clients.iter().zip(received).collect();
        let evals = par_map(&mut items, |(c, m)| -> Result<(EvalResult, EvalResult)> {
            let model = m.as_ref().unwrap_or(&c.model);
            Ok((evaluate(net, model, &c.data.val)?, evaluate(net, model, &c.data.test)?))
        });
        let mut metrics = Vec::with_capacity(evals.len());
        for (k, e) in evals.into_iter().enumerate() {
            let (val, test) = e?;
            let train_loss = self.last_losses.get(k).copied().flatten();
            metrics.push(ClientMetrics {
                client: k,
                participated: parts.contains(&k),
                train_loss,
                val,
                test,
            });
        }
        Ok(RoundReport {
            round: r,
            participants: parts,
            metrics,
            similarity,
            matching_u,
            matching_v,
            cost: self.ledger.rounds.last().cloned().expect("round charged"),
            cumulative_bytes: self.ledger.cumulative_bytes,
        })
    }
}

struct Blend {
    u: Vec<f64>,
    vm: Option<(Vec<f64>, Vec<f64>)>,
}

fn plain_weight(p: &ModelParams, l: usize) -> &[f64] {
    match &p.blocks[l] {
        ParamBlock::Plain { weight } => weight.data(),
        ParamBlock::Factorized(_) => panic!("plain strategy on factorized block"),
    }
}
