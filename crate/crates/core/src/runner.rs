//! Experiment orchestration: builds data and clients from a config, runs the
//! rounds and writes the output files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::{default_dataset, ExperimentConfig};
use crate::data::{
    build_partitions, contiguous_domains, make_desk_dataset, permute_labels, BlobParams, Dataset, DatasetKind,
    Partition, Scenario, Split, TrainSet,
};
use crate::data::deal_iid;
use crate::engine::{ClientData, CostLedger, RoundReport, Simulation, SimulationConfig, Strategy};
use crate::error::{Error, Result};
use crate::factorized::{sparsity_stats, InitScheme, ModelParams, SparsityStats};
use crate::nn::Network;
use crate::probes::{
    cosine_heatmap, divergence_probe, heatmap_series, matching_frequency, uv_divergence_probe, DivergenceTrace,
    MatchingSummary, ProbeData,
};
use crate::rng::{self, RNG_ALGORITHM, STREAM_SPLIT};

/// Dataset, partitions and materialized client data for one run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub partitions: Vec<Partition>,
    pub net: Network,
    pub clients: Vec<ClientData>,
}

pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let kind = cfg.dataset.clone().unwrap_or_else(|| default_dataset(cfg.scenario));
    make_desk_dataset(&kind, seed)
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let dataset = load_dataset(cfg, seed)?;
    let partitions = build_partitions(&dataset, &cfg.scenario_spec(), seed)?;
    let classes = partitions[0].class_count();
    if let Some(p) = partitions.iter().find(|p| p.class_count() != classes) {
        return Err(Error::config(format!(
            "partition.domains: client {} has {} classes, client 0 has {classes}; all domains need the same class count",
            p.client_id,
            p.class_count()
        )));
    }
    let net = cfg.network(dataset.input_shape(), classes)?;
    let clients = partitions
        .iter()
        .map(|p| {
            Ok(ClientData {
                partition: p.clone(),
                train: p.materialize(&dataset, Split::Train)?,
                val: p.materialize(&dataset, Split::Val)?,
                test: p.materialize(&dataset, Split::Test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        dataset,
        partitions,
        net,
        clients,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub partitions: Vec<Partition>,
    pub reports: Vec<RoundReport>,
    pub ledger: CostLedger,
    pub final_models: Vec<ModelParams>,
}

impl RunOutcome {
    pub fn final_report(&self) -> &RoundReport {
        self.reports.last().expect("at least one round")
    }

    /// Mean test accuracy of the last round.
    pub fn final_test_accuracy(&self) -> f64 {
        self.final_report().mean_test_accuracy()
    }

    /// Mean test accuracy of the round with the best mean validation
    /// accuracy (earliest on ties).
    pub fn best_val_test_accuracy(&self) -> f64 {
        let mut best = &self.reports[0];
        for r in &self.reports[1..] {
            if r.mean_val_accuracy() > best.mean_val_accuracy() {
                best = r;
            }
        }
        best.mean_test_accuracy()
    }

    pub fn domains(&self) -> Vec<usize> {
        self.partitions.iter().map(|p| p.domain.unwrap_or(0)).collect()
    }

    /// `mu` sparsity summed over every client's final model; `None` for
    /// plain networks.
    pub fn sparsity(&self) -> Option<SparsityStats> {
        if !self.config.init_scheme().factorized {
            return None;
        }
        let mut total = SparsityStats {
            nonzero_count: 0,
            total_count: 0,
            effective_param_count: 0,
        };
        for m in &self.final_models {
            let s = sparsity_stats(m, 0.0);
            total.nonzero_count += s.nonzero_count;
            total.total_count += s.total_count;
            total.effective_param_count += s.effective_param_count;
        }
        Some(total)
    }

    pub fn matching(&self) -> MatchingSummary {
        matching_frequency(&heatmap_series(&self.reports, self.config.strategy.tau), &self.domains())
    }
}

/// Runs the configured simulation in memory.
pub fn simulate(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    let prep = prepare(cfg, seed)?;
    let sim_cfg = SimulationConfig {
        net: prep.net,
        eval_point: cfg.evaluate,
        init: cfg.init_scheme(),
        strategy: cfg.strategy_config(),
        hyper: cfg.train_hyper(),
        epochs: cfg.epochs,
        seed,
    };
    let mut sim = Simulation::new(sim_cfg, prep.clients)?;
    let reports = sim.run(cfg.rounds)?;
    Ok(RunOutcome {
        config: cfg.clone(),
        seed,
        partitions: prep.partitions,
        reports,
        ledger: sim.ledger().clone(),
        final_models: sim.clients().iter().map(|c| c.model.clone()).collect(),
    })
}

pub const METRICS_HEADER: &str = "round,mean_val_acc,mean_test_acc,mean_val_loss,mean_test_loss,cost_bytes";

pub fn metrics_csv(reports: &[RoundReport]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            r.round,
            r.mean_val_accuracy(),
            r.mean_test_accuracy(),
            r.mean_val_loss(),
            r.mean_test_loss(),
            r.cumulative_bytes
        );
    }
    s
}

pub fn clients_csv(reports: &[RoundReport]) -> String {
    let mut s = String::from("round,client,participated,train_loss,val_acc,val_loss,test_acc,test_loss\n");
    for r in reports {
        for m in &r.metrics {
            let loss = m.train_loss.map(|l| format!("{l:.6}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.round,
                m.client,
                u8::from(m.participated),
                loss,
                m.val.accuracy,
                m.val.loss,
                m.test.accuracy,
                m.test.loss
            );
        }
    }
    s
}

/// `FFLM` magic, `u32` model count, then per model a `u64` length and the
/// flattened parameters as little-endian `f64`.
pub fn encode_models(models: &[ModelParams]) -> Vec<u8> {
    let mut out = b"FFLM".to_vec();
    out.extend_from_slice(&(models.len() as u32).to_le_bytes());
    for m in models {
        let flat = m.flatten();
        out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for x in flat {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

#[derive(Serialize)]
struct RunMeta<'a> {
    seed: u64,
    rng: &'a str,
    scenario: Scenario,
    strategy: Strategy,
    mu_sparsity: Option<SparsityStats>,
    clients: Vec<ClientMeta>,
}

#[derive(Serialize)]
struct ClientMeta {
    client: usize,
    domain: Option<usize>,
    classes: Vec<usize>,
    permutation: Vec<usize>,
    train: usize,
    val: usize,
    test: usize,
}

#[derive(Serialize)]
struct SimilarityFile<'a> {
    round: usize,
    participants: &'a [usize],
    u_cosine: Option<Vec<Vec<f64>>>,
    v_cosine: Option<Vec<Vec<f64>>>,
    matching: Option<&'a crate::engine::SimilarityMatrix>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes every output file of a run into `dir`.
pub fn write_run(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.normalized.toml"), outcome.config.to_toml())?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.reports))?;
    fs::write(dir.join("clients.csv"), clients_csv(&outcome.reports))?;
    write_json(&dir.join("ledger.json"), &outcome.ledger)?;
    write_json(
        &dir.join("run.json"),
        &RunMeta {
            seed: outcome.seed,
            rng: RNG_ALGORITHM,
            scenario: outcome.config.scenario,
            strategy: outcome.config.strategy.strategy,
            mu_sparsity: outcome.sparsity(),
            clients: outcome
                .partitions
                .iter()
                .map(|p| ClientMeta {
                    client: p.client_id,
                    domain: p.domain,
                    classes: p.classes.clone(),
                    permutation: p.permutation.clone(),
                    train: p.train.len(),
                    val: p.val.len(),
                    test: p.test.len(),
                })
                .collect(),
        },
    )?;
    if outcome.reports.iter().any(|r| r.matching_v.is_some()) {
        let sdir = dir.join("similarity");
        fs::create_dir_all(&sdir)?;
        for r in &outcome.reports {
            write_json(
                &sdir.join(format!("round_{:03}.json", r.round)),
                &SimilarityFile {
                    round: r.round,
                    participants: &r.participants,
                    u_cosine: r.matching_u.as_deref().map(cosine_heatmap),
                    v_cosine: r.matching_v.as_deref().map(cosine_heatmap),
                    matching: r.similarity.as_ref(),
                },
            )?;
        }
        write_json(&sdir.join("matching.json"), &outcome.matching())?;
    }
    if outcome.config.save_models {
        fs::write(dir.join("final_models.bin"), encode_models(&outcome.final_models))?;
    }
    Ok(())
}

pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let outcome = simulate(cfg, cfg.global_seed)?;
    write_run(&outcome, out)?;
    Ok(outcome)
}

/// Mean and sample standard deviation (`n - 1`; zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteCell {
    pub scenario: Scenario,
    pub strategy: Strategy,
    pub final_test: Vec<f64>,
    pub best_val_test: Vec<f64>,
    pub cost_bytes: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub cells: Vec<SuiteCell>,
}

impl SuiteReport {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "scenario,strategy,trials,final_test_mean,final_test_std,best_val_test_mean,best_val_test_std,cost_bytes,status\n",
        );
        for c in &self.cells {
            let (fm, fs) = mean_std(&c.final_test);
            let (bm, bs) = mean_std(&c.best_val_test);
            let status = match &c.error {
                None => "ok".to_string(),
                Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
            };
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
                c.scenario.name(),
                c.strategy.name(),
                c.final_test.len(),
                fm,
                fs,
                bm,
                bs,
                c.cost_bytes,
                status
            );
        }
        s
    }
}

/// Runs every scenario x strategy cell for `trials` seeds
/// (`global_seed + t`). A failing cell is recorded and the suite continues.
pub fn run_suite(cfg: &ExperimentConfig, out: &Path) -> Result<SuiteReport> {
    let grid = cfg
        .suite
        .clone()
        .ok_or_else(|| Error::config("suite: missing [suite] section"))?;
    let mut cells = Vec::new();
    for &scenario in &grid.scenarios {
        for &strategy in &grid.strategies {
            let mut cell = SuiteCell {
                scenario,
                strategy,
                final_test: Vec::new(),
                best_val_test: Vec::new(),
                cost_bytes: 0,
                error: None,
            };
            let result = (|| -> Result<()> {
                let c = cfg.for_cell(scenario, strategy)?;
                for t in 0..c.trials {
                    let seed = c.global_seed + t as u64;
                    let o = simulate(&c, seed)?;
                    write_run(
                        &o,
                        &out.join(scenario.name()).join(strategy.name()).join(format!("trial_{t}")),
                    )?;
                    cell.final_test.push(o.final_test_accuracy());
                    cell.best_val_test.push(o.best_val_test_accuracy());
                    cell.cost_bytes = o.ledger.cumulative_bytes;
                }
                Ok(())
            })();
            if let Err(e) = result {
                cell.error = Some(e.to_string());
            }
            cells.push(cell);
        }
    }
    let report = SuiteReport { cells };
    fs::create_dir_all(out)?;
    fs::write(out.join("summary.csv"), report.summary_csv())?;
    Ok(report)
}

/// Training sets for the divergence probes, all relabelled to the first
/// domain's class count.
#[derive(Debug, Clone)]
pub struct ProbeSets {
    /// First half of domain 0.
    pub reference: TrainSet,
    /// Second half of domain 0.
    pub same_label: TrainSet,
    /// Second half of domain 0 with permuted labels.
    pub permuted: TrainSet,
    /// First half of domain 1.
    pub hetero_domain: TrainSet,
    pub input: (usize, usize, usize),
}

fn probe_blobs(cfg: &ExperimentConfig) -> BlobParams {
    match &cfg.dataset {
        Some(DatasetKind::SyntheticBlobs(p)) if p.domains >= 2 => p.clone(),
        _ => match default_dataset(Scenario::DomainHetero) {
            DatasetKind::SyntheticBlobs(p) => p,
            DatasetKind::TinyImages { .. } => unreachable!("default dataset is synthetic"),
        },
    }
}

pub fn probe_sets(cfg: &ExperimentConfig, seed: u64) -> Result<ProbeSets> {
    let blobs = probe_blobs(cfg);
    let d = make_desk_dataset(&DatasetKind::SyntheticBlobs(blobs.clone()), seed)?;
    let domains = contiguous_domains(blobs.classes, blobs.domains, 2)?;
    let mut rng = rng::stream(&[seed, STREAM_SPLIT, 20]);
    let halves = |g: usize, rng: &mut rng::SimRng| {
        let pool: Vec<usize> = d
            .all_indices()
            .into_iter()
            .filter(|&i| domains[g].classes.contains(&d.labels[i]))
            .collect();
        deal_iid(&d.labels, d.class_count, &pool, 2, rng)
            .into_iter()
            .map(|train| Partition::new(0, train, domains[g].classes.clone()))
            .collect::<Vec<_>>()
    };
    let dom0 = halves(0, &mut rng);
    let dom1 = halves(1, &mut rng);
    let mut permuted = None;
    for id in 1.. {
        let p = permute_labels(&dom0[1], seed, id)?;
        if !p.has_identity_permutation() {
            permuted = Some(p);
            break;
        }
    }
    let permuted = permuted.expect("some permutation differs from the identity");
    Ok(ProbeSets {
        reference: dom0[0].materialize(&d, Split::Train)?,
        same_label: dom0[1].materialize(&d, Split::Train)?,
        permuted: permuted.materialize(&d, Split::Train)?,
        hetero_domain: dom1[0].materialize(&d, Split::Train)?,
        input: d.input_shape(),
    })
}

fn probe_pairs(s: &ProbeSets) -> [(ProbeData<'_>, ProbeData<'_>); 3] {
    let a = ProbeData {
        label: "reference",
        data: &s.reference,
    };
    [
        (a, ProbeData { label: "same_label", data: &s.same_label }),
        (a, ProbeData { label: "permuted", data: &s.permuted }),
        (a, ProbeData { label: "hetero_domain", data: &s.hetero_domain }),
    ]
}

#[derive(Serialize)]
struct ProbeMeta<'a> {
    distance: &'a str,
    update: &'a str,
    seed: u64,
    epochs: usize,
}

fn probe_meta(dir: &Path, seed: u64, epochs: usize) -> Result<()> {
    write_json(
        &dir.join("probe.json"),
        &ProbeMeta {
            distance: "||delta_a - delta_b||_2 / ||delta_a||_2 over all parameters as one vector",
            update: "cumulative change from the shared initialization",
            seed,
            epochs,
        },
    )
}

/// Same-label, permuted and hetero-domain traces (in that order).
pub fn run_divergence_probe(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<Vec<DivergenceTrace>> {
    let sets = probe_sets(cfg, seed)?;
    let net = cfg.network(sets.input, sets.reference.classes)?;
    let scheme = InitScheme {
        factorized: false,
        ..cfg.init_scheme()
    };
    let hp = cfg.train_hyper();
    let traces = probe_pairs(&sets)
        .into_iter()
        .map(|(a, b)| divergence_probe(&net, scheme, a, b, cfg.probe.epochs, &hp, seed))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut s = String::from("epoch,same_label,permuted,hetero_domain\n");
        for e in 0..cfg.probe.epochs {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                e + 1,
                traces[0].distances[e],
                traces[1].distances[e],
                traces[2].distances[e]
            );
        }
        fs::write(dir.join("divergence.csv"), s)?;
        probe_meta(dir, seed, cfg.probe.epochs)?;
    }
    Ok(traces)
}

/// `(u, v)` traces for the same-label, permuted and hetero-domain pairings.
pub fn run_uv_probe(
    cfg: &ExperimentConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<Vec<(DivergenceTrace, DivergenceTrace)>> {
    let sets = probe_sets(cfg, seed)?;
    let net = cfg.network(sets.input, sets.reference.classes)?;
    let scheme = InitScheme {
        factorized: true,
        ..cfg.init_scheme()
    };
    let hp = cfg.train_hyper();
    let traces = probe_pairs(&sets)
        .into_iter()
        .map(|(a, b)| uv_divergence_probe(&net, scheme, a, b, cfg.probe.epochs, &hp, seed))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut s = String::from("epoch,pairing,u,v\n");
        for (tu, tv) in &traces {
            for e in 0..cfg.probe.epochs {
                let _ = writeln!(s, "{},{},{:.6},{:.6}", e + 1, tu.label_b, tu.distances[e], tv.distances[e]);
            }
        }
        fs::write(dir.join("uv_divergence.csv"), s)?;
        probe_meta(dir, seed, cfg.probe.epochs)?;
    }
    Ok(traces)
}
