//! Diagnostics: update divergence between paired trainings, inter-client
//! cosine heatmaps and matching frequency.

use serde::{Deserialize, Serialize};

use crate::data::TrainSet;
use crate::engine::{cosine, RoundReport};
use crate::error::{Error, Result};
use crate::factorized::{init_params, InitScheme, ModelParams, SlotKind};
use crate::nn::{Network, Velocity};
use crate::rng::{self, STREAM_INIT, STREAM_TRAIN};
use crate::train::{train_epochs, TrainHyper};

/// `d = ||delta_a - delta_b|| / ||delta_a||` per epoch, where `delta` is the
/// cumulative change from the shared initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceTrace {
    pub label_a: String,
    pub label_b: String,
    pub epochs: Vec<usize>,
    pub distances: Vec<f64>,
}

impl DivergenceTrace {
    pub fn last(&self) -> Option<f64> {
        self.distances.last().copied()
    }
}

/// A named training set for a probe.
#[derive(Debug, Clone, Copy)]
pub struct ProbeData<'a> {
    pub label: &'a str,
    pub data: &'a TrainSet,
}

pub fn normalized_distance(init: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut ref_norm = 0.0;
    for ((&i, &x), &y) in init.iter().zip(a).zip(b) {
        let da = x - i;
        let db = y - i;
        diff += (da - db) * (da - db);
        ref_norm += da * da;
    }
    if ref_norm == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (diff / ref_norm).sqrt()
    }
}

/// Trains two copies from the same initialization, one on each dataset,
/// with identical batch-order streams, and calls `measure(init, a, b)` after
/// every epoch.
fn paired_training<const N: usize>(
    net: &Network,
    scheme: InitScheme,
    a: &TrainSet,
    b: &TrainSet,
    epochs: usize,
    hp: &TrainHyper,
    seed: u64,
    measure: impl Fn(&ModelParams, &ModelParams, &ModelParams) -> [f64; N],
) -> Result<Vec<[f64; N]>> {
    if a.x.shape()[1..] != b.x.shape()[1..] || a.classes != b.classes {
        return Err(Error::input("probe datasets must share input shape and class count"));
    }
    let init = init_params(net, scheme, &mut rng::stream(&[seed, STREAM_INIT]));
    let (mut pa, mut pb) = (init.clone(), init.clone());
    let (mut va, mut vb) = (Velocity::zeros_like(&init), Velocity::zeros_like(&init));
    let mut ra = rng::stream(&[seed, STREAM_TRAIN, 0]);
    let mut rb = ra.clone();
    let mut out = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        for (p, v, d, r, which) in [(&mut pa, &mut va, a, &mut ra, "a"), (&mut pb, &mut vb, b, &mut rb, "b")] {
            train_epochs(net, p, v, d, hp, 1, r, None)
                .map_err(|e| Error::Numeric(format!("probe model {which}, epoch {epoch}: {e}")))?;
        }
        out.push(measure(&init, &pa, &pb));
    }
    Ok(out)
}

fn trace(a: &ProbeData<'_>, b: &ProbeData<'_>, distances: Vec<f64>) -> DivergenceTrace {
    DivergenceTrace {
        label_a: a.label.to_string(),
        label_b: b.label.to_string(),
        epochs: (1..=distances.len()).collect(),
        distances,
    }
}

/// Divergence of all parameters, concatenated into one vector.
pub fn divergence_probe(
    net: &Network,
    scheme: InitScheme,
    a: ProbeData<'_>,
    b: ProbeData<'_>,
    epochs: usize,
    hp: &TrainHyper,
    seed: u64,
) -> Result<DivergenceTrace> {
    let rows = paired_training(net, scheme, a.data, b.data, epochs, hp, seed, |i, x, y| {
        [normalized_distance(&i.flatten(), &x.flatten(), &y.flatten())]
    })?;
    Ok(trace(&a, &b, rows.into_iter().map(|[d]| d).collect()))
}

/// Divergence of the concatenated `u`s and of the concatenated `v`s of a
/// factorized network.
pub fn uv_divergence_probe(
    net: &Network,
    scheme: InitScheme,
    a: ProbeData<'_>,
    b: ProbeData<'_>,
    epochs: usize,
    hp: &TrainHyper,
    seed: u64,
) -> Result<(DivergenceTrace, DivergenceTrace)> {
    if !scheme.factorized {
        return Err(Error::config("the u/v probe needs a factorized network"));
    }
    let dist = |k: SlotKind, i: &ModelParams, x: &ModelParams, y: &ModelParams| {
        normalized_distance(&i.flatten_kind(k), &x.flatten_kind(k), &y.flatten_kind(k))
    };
    let rows = paired_training(net, scheme, a.data, b.data, epochs, hp, seed, |i, x, y| {
        [dist(SlotKind::U, i, x, y), dist(SlotKind::V, i, x, y)]
    })?;
    Ok((
        trace(&a, &b, rows.iter().map(|r| r[0]).collect()),
        trace(&a, &b, rows.iter().map(|r| r[1]).collect()),
    ))
}

/// Per-round cosine matrices of the second-last-layer `u` and `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSeries {
    pub rounds: Vec<usize>,
    pub u: Vec<Vec<Vec<f64>>>,
    pub v: Vec<Vec<Vec<f64>>>,
    pub tau: f64,
    /// Rounds with matching in which each off-diagonal pair's `v` cosine
    /// reached `tau`.
    pub frequency: Vec<Vec<u64>>,
}

/// Cosine matrix with unit diagonal; zero vectors score 0 against others.
pub fn cosine_heatmap(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = vectors.len();
    let mut m = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let c = cosine(&vectors[i], &vectors[j]);
            let c = if c.is_finite() { c.clamp(-1.0, 1.0) } else { 0.0 };
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    m
}

/// Builds the series from reports that carry `u`/`v` snapshots; reports
/// without them are skipped.
pub fn heatmap_series(reports: &[RoundReport], tau: f64) -> HeatmapSeries {
    let mut s = HeatmapSeries {
        rounds: Vec::new(),
        u: Vec::new(),
        v: Vec::new(),
        tau,
        frequency: Vec::new(),
    };
    for r in reports {
        let (Some(u), Some(v)) = (&r.matching_u, &r.matching_v) else { continue };
        let mv = cosine_heatmap(v);
        if s.frequency.is_empty() {
            s.frequency = vec![vec![0; mv.len()]; mv.len()];
        }
        let matched = r.similarity.is_some();
        for (i, row) in mv.iter().enumerate().filter(|_| matched) {
            for (j, &c) in row.iter().enumerate() {
                if i != j && c >= tau {
                    s.frequency[i][j] += 1;
                }
            }
        }
        s.rounds.push(r.round);
        s.u.push(cosine_heatmap(u));
        s.v.push(mv);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingSummary {
    pub frequency: Vec<Vec<u64>>,
    /// Share of above-threshold matches between clients of the same domain.
    pub within_domain_fraction: f64,
    /// No matches at all; the fraction is reported as 1.0.
    pub vacuous: bool,
}

pub fn matching_frequency(series: &HeatmapSeries, domains: &[usize]) -> MatchingSummary {
    let mut within = 0u64;
    let mut total = 0u64;
    for (i, row) in series.frequency.iter().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            total += n;
            if domains.get(i) == domains.get(j) {
                within += n;
            }
        }
    }
    MatchingSummary {
        frequency: series.frequency.clone(),
        within_domain_fraction: if total == 0 { 1.0 } else { within as f64 / total as f64 },
        vacuous: total == 0,
    }
}

/// Mean final-round `v` cosine over same-domain and cross-domain pairs.
pub fn domain_cosine_means(matrix: &[Vec<f64>], domains: &[usize]) -> (f64, f64) {
    let (mut ws, mut wn, mut cs, mut cn) = (0.0, 0usize, 0.0, 0usize);
    for (i, row) in matrix.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if i == j {
                continue;
            }
            if domains[i] == domains[j] {
                ws += c;
                wn += 1;
            } else {
                cs += c;
                cn += 1;
            }
        }
    }
    let avg = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    (avg(ws, wn), avg(cs, cn))
}
