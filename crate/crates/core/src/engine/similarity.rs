//! Client matching on `v` and softmax-weighted averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Full cosine matrix with the diagonal pinned to 1.
pub fn cosine_matrix(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_vectors(vectors)?;
    let k = vectors.len();
    let mut m = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let c = cosine(&vectors[i], &vectors[j]).clamp(-1.0, 1.0);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

fn check_vectors(vectors: &[Vec<f64>]) -> Result<()> {
    let Some(first) = vectors.first() else {
        return Err(Error::input("no vectors to match"));
    };
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != first.len() {
            return Err(Error::input(format!(
                "client {i} matching vector has length {}, expected {}",
                v.len(),
                first.len()
            )));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numeric(format!("client {i} has a zero or non-finite matching vector")));
        }
    }
    Ok(())
}

/// Scores of every client against client `k`: the cosine similarity when it
/// reaches `tau`, zero otherwise; the client's own score is 1.
pub fn similarity_match(vectors: &[Vec<f64>], k: usize, tau: f64) -> Result<Vec<f64>> {
    check_vectors(vectors)?;
    if k >= vectors.len() {
        return Err(Error::input(format!("client {k} out of range")));
    }
    Ok(vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if i == k {
                1.0
            } else {
                let c = cosine(&vectors[k], v);
                if c >= tau {
                    c
                } else {
                    0.0
                }
            }
        })
        .collect())
}

/// `softmax(epsilon * sigma)` restricted to `include` (others get weight 0).
pub fn softmax_weights(sigmas: &[f64], epsilon: f64, include: Option<&[bool]>) -> Vec<f64> {
    let on = |i: usize| include.is_none_or(|m| m[i]);
    let m = sigmas
        .iter()
        .enumerate()
        .filter(|&(i, _)| on(i))
        .map(|(_, &s)| epsilon * s)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = sigmas
        .iter()
        .enumerate()
        .map(|(i, &s)| if on(i) { (epsilon * s - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `sum_i w_i * x_i`, accumulated in index order.
pub fn weighted_sum(vectors: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; vectors[0].len()];
    for (v, &w) in vectors.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    out
}

/// Similarity-weighted average of per-layer `u` sets: `u_sets[client][layer]`.
pub fn weighted_average_u(u_sets: &[Vec<Vec<f64>>], sigmas: &[f64], epsilon: f64) -> Vec<Vec<f64>> {
    let w = softmax_weights(sigmas, epsilon, None);
    average_layers(u_sets, &w)
}

pub(crate) fn average_layers(sets: &[Vec<Vec<f64>>], weights: &[f64]) -> Vec<Vec<f64>> {
    let layers = sets[0].len();
    (0..layers)
        .map(|l| {
            let vs: Vec<&[f64]> = sets.iter().map(|s| &s[l][..]).collect();
            weighted_sum(&vs, weights)
        })
        .collect()
}

/// How the server picks the peers a client aggregates with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Cosine similarity with threshold `tau`.
    #[default]
    Cosine,
    /// Three peers chosen uniformly at random.
    Random,
    /// The three least similar peers.
    Worst,
}

/// Peers used by the `random` and `worst` matchers.
pub const ABLATION_PEERS: usize = 3;

/// Similarity state of one aggregation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    /// Client ids, in row order.
    pub clients: Vec<usize>,
    /// Raw cosine similarities of the matching vectors.
    pub cosine: Vec<Vec<f64>>,
    /// Thresholded scores (row `k` is client `k`'s view).
    pub sigma: Vec<Vec<f64>>,
    /// Aggregation weights actually used.
    pub weights: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_score_one() {
        let v = vec![vec![0.3, -1.0, 2.0]; 4];
        let s = similarity_match(&v, 2, 0.9).unwrap();
        for x in s {
            assert!((x - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn orthogonal_is_thresholded() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(similarity_match(&v, 0, 0.5).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn hand_computed_three_clients() {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let v = vec![vec![1.0, 0.0], vec![r, r], vec![0.0, 1.0]];
        let s = similarity_match(&v, 0, 0.6).unwrap();
        assert_eq!(s[0], 1.0);
        assert!((s[1] - 0.7071067811865476).abs() < 1e-12);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn zero_vector_names_client() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        match similarity_match(&v, 0, 0.1) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("client 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hand_computed_softmax() {
        // softmax(2, 1, 0): e^2 / (e^2 + e + 1) etc.
        let w = softmax_weights(&[1.0, 0.5, 0.0], 2.0, None);
        let (a, b, c) = (2f64.exp(), 1f64.exp(), 1.0);
        let z = a + b + c;
        assert!((w[0] - a / z).abs() < 1e-15);
        assert!((w[0] - 0.66524).abs() < 1e-5);
        assert!((w[1] - 0.24473).abs() < 1e-5);
        assert!((w[2] - 0.09003).abs() < 1e-5);
        let u = vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]], vec![vec![2.0, 2.0]]];
        let avg = weighted_average_u(&u, &[1.0, 0.5, 0.0], 2.0);
        let direct = [a / z + 2.0 * c / z, b / z + 2.0 * c / z];
        assert!((avg[0][0] - direct[0]).abs() < 1e-15);
        assert!((avg[0][1] - direct[1]).abs() < 1e-15);
    }

    #[test]
    fn equal_scores_give_uniform_average() {
        let u = vec![vec![vec![1.0]], vec![vec![2.0]], vec![vec![6.0]]];
        let avg = weighted_average_u(&u, &[0.4, 0.4, 0.4], 7.0);
        assert!((avg[0][0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn large_epsilon_saturates() {
        let w = softmax_weights(&[1.0, 0.9, 0.0], 1e3, None);
        assert!(w[0] > 1.0 - 1e-6);
    }

    #[test]
    fn excluded_clients_get_no_weight() {
        let w = softmax_weights(&[1.0, 0.0, 0.0], 1.0, Some(&[true, false, true]));
        assert_eq!(w[1], 0.0);
        assert!((w[0] + w[2] - 1.0).abs() < 1e-15);
    }
}
