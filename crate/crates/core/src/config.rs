//! Experiment configuration (TOML).
//!
//! `load_config` parses, fills every default and checks all invariants.
//! `ExperimentConfig::to_toml` writes the normalized form, which parses back
//! to the same value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{contiguous_domains, BlobParams, DatasetKind, DomainSpec, Scenario, ScenarioSpec};
use crate::engine::{EvalPoint, Matching, Strategy, StrategyConfig};
use crate::error::{Error, Result};
use crate::factorized::{InitScheme, VInit};
use crate::nn::{presets, LayerSpec, Network, Sgd};
use crate::rng::RNG_ALGORITHM;
use crate::train::TrainHyper;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub rounds: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    /// Client count; for `domain_hetero` it is derived from the domains.
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    #[serde(default)]
    pub global_seed: u64,
    #[serde(default = "defaults::rng")]
    pub rng: String,
    #[serde(default = "defaults::trials")]
    pub trials: usize,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: String,
    #[serde(default)]
    pub save_models: bool,
    #[serde(default)]
    pub evaluate: EvalPoint,
    #[serde(default)]
    pub strategy: StrategySection,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub dataset: Option<DatasetKind>,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub suite: Option<SuiteSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    #[serde(default = "defaults::strategy")]
    pub strategy: Strategy,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda_sparsity: f64,
    #[serde(default = "defaults::prox_mu")]
    pub prox_mu: f64,
    /// Defaults to sharing only when labels are not permuted.
    #[serde(default)]
    pub share_classifier: Option<bool>,
    #[serde(default = "defaults::one_f")]
    pub participation_fraction: f64,
    #[serde(default)]
    pub exclude_zero_sigma: bool,
    #[serde(default)]
    pub matching: Matching,
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection {
            strategy: defaults::strategy(),
            tau: defaults::tau(),
            epsilon: defaults::epsilon(),
            lambda_sparsity: defaults::lambda(),
            prox_mu: defaults::prox_mu(),
            share_classifier: None,
            participation_fraction: 1.0,
            exclude_zero_sigma: false,
            matching: Matching::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetPreset {
    #[default]
    DeskCnn,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    #[serde(default)]
    pub preset: NetPreset,
    /// Used when `preset = "custom"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerSpec>,
    /// Defaults to the strategy's requirement (plain for standalone).
    #[serde(default)]
    pub factorized: Option<bool>,
    #[serde(default)]
    pub v_init: VInit,
    #[serde(default = "defaults::yes")]
    pub balanced_init: bool,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            preset: NetPreset::DeskCnn,
            layers: Vec::new(),
            factorized: None,
            v_init: VInit::default(),
            balanced_init: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::yes")]
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: defaults::lr(),
            momentum: defaults::momentum(),
            weight_decay: 0.0,
            batch_size: defaults::batch_size(),
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    #[serde(default = "defaults::holdout")]
    pub val_fraction: f64,
    #[serde(default = "defaults::holdout")]
    pub test_fraction: f64,
    #[serde(default = "defaults::alpha")]
    pub dirichlet_alpha: f64,
    #[serde(default = "defaults::clients_per_domain")]
    pub clients_per_domain: usize,
    /// Explicit domains; by default one per contiguous class block of the
    /// synthetic dataset.
    #[serde(default)]
    pub domains: Vec<DomainSpec>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            val_fraction: defaults::holdout(),
            test_fraction: defaults::holdout(),
            dirichlet_alpha: defaults::alpha(),
            clients_per_domain: defaults::clients_per_domain(),
            domains: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(default = "defaults::probe_epochs")]
    pub epochs: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            epochs: defaults::probe_epochs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    pub scenarios: Vec<Scenario>,
    pub strategies: Vec<Strategy>,
}

mod defaults {
    use super::*;

    pub fn epochs() -> usize {
        2
    }
    pub fn clients() -> usize {
        8
    }
    pub fn rng() -> String {
        RNG_ALGORITHM.to_string()
    }
    pub fn trials() -> usize {
        1
    }
    pub fn output_dir() -> String {
        "runs/out".to_string()
    }
    pub fn strategy() -> Strategy {
        Strategy::FactorizedFl
    }
    pub fn tau() -> f64 {
        0.5
    }
    pub fn epsilon() -> f64 {
        10.0
    }
    pub fn lambda() -> f64 {
        5e-4
    }
    pub fn prox_mu() -> f64 {
        0.01
    }
    pub fn one_f() -> f64 {
        1.0
    }
    pub fn lr() -> f64 {
        0.02
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn yes() -> bool {
        true
    }
    pub fn holdout() -> f64 {
        0.1
    }
    pub fn alpha() -> f64 {
        0.5
    }
    pub fn clients_per_domain() -> usize {
        3
    }
    pub fn probe_epochs() -> usize {
        10
    }
}

/// Default synthetic dataset for a scenario: 10 classes, or 4 domains of 5
/// classes for `domain_hetero`.
pub fn default_dataset(scenario: Scenario) -> DatasetKind {
    let mut p = BlobParams::new(10, 250, 1.3);
    if scenario == Scenario::DomainHetero {
        p = BlobParams {
            classes: 20,
            domains: 4,
            per_class: 150,
            depth: 3,
            domain_style: 1.0,
            ..p
        };
    }
    DatasetKind::SyntheticBlobs(p)
}

impl ExperimentConfig {
    /// Parses without filling defaults or validating.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills scenario- and strategy-dependent defaults, then validates.
    pub fn normalize(mut self) -> Result<Self> {
        let problems = self.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("\n")));
        }
        let dataset = self.dataset.get_or_insert_with(|| default_dataset(self.scenario)).clone();
        self.strategy
            .share_classifier
            .get_or_insert(self.scenario.default_share_classifier());
        self.net
            .factorized
            .get_or_insert(self.strategy.strategy.needs_factorized());
        if self.scenario == Scenario::DomainHetero {
            if self.partition.domains.is_empty() {
                let DatasetKind::SyntheticBlobs(p) = &dataset else {
                    return Err(Error::config(
                        "partition.domains: required for domain_hetero on a tiny-images dataset",
                    ));
                };
                self.partition.domains = contiguous_domains(p.classes, p.domains, self.partition.clients_per_domain)?;
            }
            self.clients = self.partition.domains.iter().map(|d| d.clients_per_domain).sum();
        }
        let problems = self.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("\n")));
        }
        Ok(self)
    }

    /// Every violated invariant, prefixed with its field path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };
        check(self.rounds >= 1, format!("rounds: must be at least 1, got {}", self.rounds));
        check(self.epochs >= 1, format!("epochs: must be at least 1, got {}", self.epochs));
        check(self.clients >= 1, format!("clients: must be at least 1, got {}", self.clients));
        check(self.trials >= 1, format!("trials: must be at least 1, got {}", self.trials));
        check(
            self.rng == RNG_ALGORITHM,
            format!("rng: only \"{RNG_ALGORITHM}\" is supported, got \"{}\"", self.rng),
        );
        let s = &self.strategy;
        check(
            (0.0..=1.0).contains(&s.tau),
            format!("strategy.tau: must be in [0, 1], got {}", s.tau),
        );
        check(
            s.epsilon > 0.0 && s.epsilon.is_finite(),
            format!("strategy.epsilon: must be positive, got {}", s.epsilon),
        );
        check(
            s.lambda_sparsity >= 0.0,
            format!("strategy.lambda_sparsity: must be non-negative, got {}", s.lambda_sparsity),
        );
        check(s.prox_mu >= 0.0, format!("strategy.prox_mu: must be non-negative, got {}", s.prox_mu));
        check(
            s.participation_fraction > 0.0 && s.participation_fraction <= 1.0,
            format!(
                "strategy.participation_fraction: must be in (0, 1], got {}",
                s.participation_fraction
            ),
        );
        if let Some(f) = self.net.factorized {
            check(
                !(s.strategy.needs_factorized() && !f),
                format!("net.factorized: {} requires a factorized network", s.strategy.name()),
            );
            check(
                !(s.strategy.needs_plain() && f),
                format!("net.factorized: {} requires a plain network", s.strategy.name()),
            );
        }
        check(
            self.net.preset != NetPreset::Custom || !self.net.layers.is_empty(),
            "net.layers: a custom net needs at least one layer".to_string(),
        );
        let t = &self.train;
        check(t.lr > 0.0 && t.lr.is_finite(), format!("train.lr: must be positive, got {}", t.lr));
        check(
            (0.0..1.0).contains(&t.momentum),
            format!("train.momentum: must be in [0, 1), got {}", t.momentum),
        );
        check(
            t.weight_decay >= 0.0,
            format!("train.weight_decay: must be non-negative, got {}", t.weight_decay),
        );
        check(t.batch_size >= 1, "train.batch_size: must be at least 1".to_string());
        let p = &self.partition;
        check(
            p.val_fraction >= 0.0 && p.test_fraction >= 0.0 && p.val_fraction + p.test_fraction < 1.0,
            "partition.val_fraction, partition.test_fraction: must be non-negative and sum below 1".to_string(),
        );
        check(
            p.dirichlet_alpha > 0.0 && p.dirichlet_alpha.is_finite(),
            format!("partition.dirichlet_alpha: must be positive, got {}", p.dirichlet_alpha),
        );
        check(
            p.clients_per_domain >= 1,
            "partition.clients_per_domain: must be at least 1".to_string(),
        );
        check(self.probe.epochs >= 1, "probe.epochs: must be at least 1".to_string());
        if let Some(DatasetKind::SyntheticBlobs(b)) = &self.dataset {
            if let Err(e) = b.validate() {
                out.push(format!("dataset: {e}"));
            }
        }
        if let Some(suite) = &self.suite {
            if suite.scenarios.is_empty() || suite.strategies.is_empty() {
                out.push("suite: scenarios and strategies must be non-empty".to_string());
            }
        }
        out
    }

    pub fn scenario_spec(&self) -> ScenarioSpec {
        ScenarioSpec {
            scenario: self.scenario,
            clients: self.clients,
            dirichlet_alpha: self.partition.dirichlet_alpha,
            domains: self.partition.domains.clone(),
            val_fraction: self.partition.val_fraction,
            test_fraction: self.partition.test_fraction,
        }
    }

    pub fn strategy_config(&self) -> StrategyConfig {
        let s = &self.strategy;
        StrategyConfig {
            strategy: s.strategy,
            tau: s.tau,
            epsilon: s.epsilon,
            lambda_sparsity: s.lambda_sparsity,
            prox_mu: s.prox_mu,
            share_classifier: s.share_classifier.unwrap_or(self.scenario.default_share_classifier()),
            participation_fraction: s.participation_fraction,
            exclude_zero_sigma: s.exclude_zero_sigma,
            matching: s.matching,
        }
    }

    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            sgd: Sgd {
                lr: self.train.lr,
                momentum: self.train.momentum,
                weight_decay: self.train.weight_decay,
            },
            batch_size: self.train.batch_size,
            lambda_sparsity: self.strategy.lambda_sparsity,
            shuffle: self.train.shuffle,
        }
    }

    pub fn init_scheme(&self) -> InitScheme {
        InitScheme {
            factorized: self
                .net
                .factorized
                .unwrap_or(self.strategy.strategy.needs_factorized()),
            v_init: self.net.v_init,
            balanced: self.net.balanced_init,
        }
    }

    /// Builds the network for `(h, w, c)` inputs and `classes` outputs.
    pub fn network(&self, input: (usize, usize, usize), classes: usize) -> Result<Network> {
        let layers = match self.net.preset {
            NetPreset::DeskCnn => {
                if input.0 < 6 || input.1 < 6 {
                    return Err(Error::config("net.preset: desk_cnn needs inputs of at least 6x6"));
                }
                presets::desk_cnn(input.0, input.1, input.2, classes)
            }
            NetPreset::Custom => self.net.layers.clone(),
        };
        Network::new(input, layers)
    }

    /// Copy of this config for another scenario/strategy cell, with the
    /// scenario- and strategy-dependent defaults re-derived.
    pub fn for_cell(&self, scenario: Scenario, strategy: Strategy) -> Result<Self> {
        let mut c = self.clone();
        c.scenario = scenario;
        c.strategy.strategy = strategy;
        c.strategy.share_classifier = None;
        c.net.factorized = None;
        c.suite = None;
        if scenario != self.scenario {
            c.dataset = None;
            c.partition.domains.clear();
        }
        c.normalize()
    }
}

/// Reads, normalizes and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::parse(&text)?.normalize()
}
