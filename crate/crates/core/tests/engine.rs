use factorized_fl::config::ExperimentConfig;
use factorized_fl::engine::Strategy;
use factorized_fl::runner::{metrics_csv, simulate, RunOutcome};

fn config(scenario: &str, strategy: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
scenario = "{scenario}"
rounds = 3
epochs = 1
clients = 3
[strategy]
strategy = "{strategy}"
{extra}
[train]
batch_size = 16
[dataset]
kind = "synthetic-blobs"
classes = 4
per_class = 40
height = 8
width = 8
noise = 1.0
"#
    );
    ExperimentConfig::parse(&text).unwrap().normalize().unwrap()
}

fn run(cfg: &ExperimentConfig) -> RunOutcome {
    simulate(cfg, cfg.global_seed).unwrap()
}

#[test]
fn fedprox_without_proximal_term_is_fedavg() {
    let avg = run(&config("standard_iid", "fedavg", ""));
    let prox = run(&config("standard_iid", "fedprox", "prox_mu = 0.0"));
    assert_eq!(metrics_csv(&avg.reports), metrics_csv(&prox.reports));
    assert_eq!(avg.final_models, prox.final_models);
}

#[test]
fn single_client_fedavg_is_local_training() {
    let one = |s: &str| {
        let mut cfg = config("standard_iid", s, "");
        cfg.clients = 1;
        run(&cfg)
    };
    let avg = one("fedavg");
    let alone = one("standalone");
    assert_eq!(avg.final_models, alone.final_models);
    assert_eq!(avg.final_test_accuracy(), alone.final_test_accuracy());
}

#[test]
fn identical_clients_stay_identical_under_factorized_aggregation() {
    let mut cfg = config("standard_iid", "factorized_fl", "");
    cfg.train.shuffle = false;
    let prep = factorized_fl::runner::prepare(&cfg, 5).unwrap();
    let clients = vec![prep.clients[0].clone(); 3];
    let sim_cfg = factorized_fl::engine::SimulationConfig {
        net: prep.net.clone(),
        eval_point: cfg.evaluate,
        init: cfg.init_scheme(),
        strategy: cfg.strategy_config(),
        hyper: cfg.train_hyper(),
        epochs: 1,
        seed: 5,
    };
    let mut sim = factorized_fl::engine::Simulation::new(sim_cfg, clients).unwrap();
    let reports = sim.run(3).unwrap();
    let flat: Vec<Vec<f64>> = sim.clients().iter().map(|c| c.model.flatten()).collect();
    for other in &flat[1..] {
        let gap = flat[0].iter().zip(other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-9, "{gap}");
    }
    let accs: Vec<f64> = reports[2].metrics.iter().map(|m| m.test.accuracy).collect();
    assert!(accs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn factorized_accuracy_is_label_permutation_invariant() {
    let std = run(&config("standard_iid", "factorized_fl", ""));
    let perm = run(&config("permuted_iid", "factorized_fl", ""));
    let (a, b) = (std.final_test_accuracy(), perm.final_test_accuracy());
    assert!((a - b).abs() <= 0.01, "{a} vs {b}");
}

#[test]
fn ledger_charges_every_round() {
    for s in [Strategy::Standalone, Strategy::FedAvg, Strategy::FactorizedFl] {
        let o = run(&config("standard_iid", s.name(), ""));
        assert_eq!(o.ledger.rounds.len(), 3);
        let total: u64 = o.ledger.rounds.iter().map(|r| r.bytes).sum();
        assert_eq!(total, o.ledger.cumulative_bytes);
        if s == Strategy::Standalone {
            assert_eq!(total, 0);
        } else {
            assert!(total > 0);
        }
    }
    let avg = run(&config("standard_iid", "fedavg", ""));
    let ffl = run(&config("standard_iid", "factorized_fl", ""));
    assert!(ffl.ledger.rounds[2].bytes < avg.ledger.rounds[2].bytes);
}

#[test]
fn thread_count_does_not_change_results() {
    let cfg = config("permuted_noniid", "factorized_fl", "");
    let at = |n: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        pool.install(|| metrics_csv(&run(&cfg).reports))
    };
    assert_eq!(at(1), at(4));
}

#[test]
fn same_seed_same_bits() {
    let cfg = config("standard_noniid", "fedprox", "");
    assert_eq!(run(&cfg).final_models, run(&cfg).final_models);
    let mut other = cfg.clone();
    other.global_seed += 1;
    assert_ne!(run(&cfg).final_models, run(&other).final_models);
}
