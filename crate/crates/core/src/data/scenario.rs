//! Client partitions for the five heterogeneity scenarios.

use serde::{Deserialize, Serialize};

use super::split::{assign_by_proportions, check_domains, deal_iid, dirichlet_proportions, holdout_split};
use super::{permute_labels, Dataset, DomainSpec, Partition};
use crate::error::{Error, Result};
use crate::rng::{self, STREAM_SPLIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    StandardIid,
    PermutedIid,
    StandardNoniid,
    PermutedNoniid,
    DomainHetero,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::StandardIid,
        Scenario::PermutedIid,
        Scenario::StandardNoniid,
        Scenario::PermutedNoniid,
        Scenario::DomainHetero,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::StandardIid => "standard_iid",
            Scenario::PermutedIid => "permuted_iid",
            Scenario::StandardNoniid => "standard_noniid",
            Scenario::PermutedNoniid => "permuted_noniid",
            Scenario::DomainHetero => "domain_hetero",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    /// Whether client labels are permuted (domain clients always are).
    pub fn is_permuted(&self) -> bool {
        !matches!(self, Scenario::StandardIid | Scenario::StandardNoniid)
    }

    /// Baselines keep the classifier local whenever labels are permuted.
    pub fn default_share_classifier(&self) -> bool {
        !self.is_permuted()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    /// Number of clients (ignored for `domain_hetero`, where the domain specs decide).
    pub clients: usize,
    pub dirichlet_alpha: f64,
    pub domains: Vec<DomainSpec>,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

/// Stratified holdout, then the scenario's train split. IID clients evaluate
/// on the full val/test pools; non-IID clients get val/test slices with the
/// same per-class proportions as their training data; domain clients
/// evaluate on their domain's pools. Permutations use `seed + client_id`.
pub fn build_partitions(d: &Dataset, spec: &ScenarioSpec, seed: u64) -> Result<Vec<Partition>> {
    let hold = holdout_split(d, spec.val_fraction, spec.test_fraction, seed)?;
    let all: Vec<usize> = (0..d.class_count).collect();
    let k = spec.clients;
    if spec.scenario != Scenario::DomainHetero && (k == 0 || k > hold.train.len()) {
        return Err(Error::config(format!(
            "cannot split {} training examples across {k} clients",
            hold.train.len()
        )));
    }
    let mut rng = rng::stream(&[seed, STREAM_SPLIT, 10]);
    let mut parts: Vec<Partition> = match spec.scenario {
        Scenario::StandardIid | Scenario::PermutedIid => deal_iid(&d.labels, d.class_count, &hold.train, k, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(id, train)| Partition {
                val: hold.val.clone(),
                test: hold.test.clone(),
                ..Partition::new(id, train, all.clone())
            })
            .collect(),
        Scenario::StandardNoniid | Scenario::PermutedNoniid => {
            let props = dirichlet_proportions(d.class_count, k, spec.dirichlet_alpha, &mut rng)?;
            let train = assign_by_proportions(&d.labels, &props, &hold.train, k, &mut rng);
            let val = assign_by_proportions(&d.labels, &props, &hold.val, k, &mut rng);
            let test = assign_by_proportions(&d.labels, &props, &hold.test, k, &mut rng);
            train
                .into_iter()
                .zip(val)
                .zip(test)
                .enumerate()
                .map(|(id, ((train, val), test))| Partition {
                    val,
                    test,
                    ..Partition::new(id, train, all.clone())
                })
                .collect()
        }
        Scenario::DomainHetero => {
            if spec.domains.is_empty() {
                return Err(Error::config("domain_hetero needs at least one domain"));
            }
            check_domains(d, &spec.domains)?;
            let mut out = Vec::new();
            for (g, dom) in spec.domains.iter().enumerate() {
                let keep = |pool: &[usize]| -> Vec<usize> {
                    pool.iter().copied().filter(|&i| dom.classes.contains(&d.labels[i])).collect()
                };
                let (val, test) = (keep(&hold.val), keep(&hold.test));
                for train in deal_iid(&d.labels, d.class_count, &keep(&hold.train), dom.clients_per_domain, &mut rng) {
                    out.push(Partition {
                        val: val.clone(),
                        test: test.clone(),
                        domain: Some(g),
                        ..Partition::new(out.len(), train, dom.classes.clone())
                    });
                }
            }
            out
        }
    };
    if spec.scenario.is_permuted() {
        parts = parts
            .iter()
            .map(|p| permute_labels(p, seed, p.client_id))
            .collect::<Result<_>>()?;
    }
    for p in &parts {
        if p.train.is_empty() {
            return Err(Error::config(format!("client {} received no training data", p.client_id)));
        }
    }
    Ok(parts)
}

/// Domains formed from contiguous class blocks, `clients_per_domain` each.
pub fn contiguous_domains(classes: usize, domains: usize, clients_per_domain: usize) -> Result<Vec<DomainSpec>> {
    if domains == 0 || classes % domains != 0 {
        return Err(Error::config(format!("{classes} classes cannot form {domains} equal domains")));
    }
    let per = classes / domains;
    Ok((0..domains)
        .map(|g| DomainSpec {
            name: format!("domain{g}"),
            classes: (g * per..(g + 1) * per).collect(),
            clients_per_domain,
        })
        .collect())
}
