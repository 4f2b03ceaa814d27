//! Browser bindings: client matching, a rank-1 kernel with its sparse
//! residual, and communication cost.

use factorized_fl::engine::{cosine_matrix, cost_formula, similarity_match, softmax_weights, steady_payload, Inventory, Strategy};
use factorized_fl::factorized::{param_count, pi_inv, prox_l1, FactorizedParam, ReshapeSig};
use factorized_fl::nn::presets;
use factorized_fl::Tensor;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn parse<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T, String> {
    serde_json::from_str(text).map_err(|e| format!("{what}: {e}"))
}

/// Cosines, thresholded scores and softmax aggregation weights for every
/// client, given one `v` vector per client.
pub fn matching_report(vectors: &str, tau: f64, epsilon: f64) -> Result<Value, String> {
    let vs: Vec<Vec<f64>> = parse(vectors, "vectors")?;
    if !(0.0..=1.0).contains(&tau) || !(epsilon > 0.0) {
        return Err("tau must be in [0, 1] and epsilon positive".into());
    }
    let cos = cosine_matrix(&vs).map_err(|e| e.to_string())?;
    let mut sigma = Vec::with_capacity(vs.len());
    let mut weights = Vec::with_capacity(vs.len());
    for k in 0..vs.len() {
        let s = similarity_match(&vs, k, tau).map_err(|e| e.to_string())?;
        weights.push(softmax_weights(&s, epsilon, None));
        sigma.push(s);
    }
    Ok(json!({ "cosine": cos, "sigma": sigma, "weights": weights }))
}

/// `W = u v^T + mu` for a dense layer, one soft-threshold step on `mu`, and
/// the largest 2x2 minor of the rank-1 part.
pub fn kernel_report(u: &str, v: &str, mu: &str, lr: f64, lambda: f64) -> Result<Value, String> {
    let u: Vec<f64> = parse(u, "u")?;
    let v: Vec<f64> = parse(v, "v")?;
    let mu: Vec<Vec<f64>> = parse(mu, "mu")?;
    let (nu, nv) = (u.len(), v.len());
    if nu == 0 || nv == 0 {
        return Err("u and v must be non-empty".into());
    }
    if mu.len() != nu || mu.iter().any(|r| r.len() != nv) {
        return Err(format!("mu must be {nu} rows of {nv}"));
    }
    let sig = ReshapeSig::Dense { nin: nu, nout: nv };
    let mu_t = Tensor::new(vec![nu, nv], mu.concat()).map_err(|e| e.to_string())?;
    let after = prox_l1(&mu_t, lr, lambda);
    let rank_one = FactorizedParam::from_factors(u.clone(), v.clone(), sig).map_err(|e| e.to_string())?;
    let r1 = pi_inv(rank_one.reconstruct().map_err(|e| e.to_string())?, sig).map_err(|e| e.to_string())?;
    let full = FactorizedParam::new(u, v, after.clone(), sig).map_err(|e| e.to_string())?;
    let w = full.reconstruct().map_err(|e| e.to_string())?;
    let mut minor: f64 = 0.0;
    let d = r1.data();
    for a in 0..nu {
        for b in a + 1..nu {
            for c in 0..nv {
                for e in c + 1..nv {
                    minor = minor.max((d[a * nv + c] * d[b * nv + e] - d[a * nv + e] * d[b * nv + c]).abs());
                }
            }
        }
    }
    let rows = |t: &Tensor| t.data().chunks(nv).map(<[f64]>::to_vec).collect::<Vec<_>>();
    Ok(json!({
        "weight": rows(&w),
        "mu": rows(&after),
        "nonzero_mu": after.data().iter().filter(|x| **x != 0.0).count(),
        "max_rank_one_minor": minor,
    }))
}

/// Communication cost of a ResNet-9 run and its ratio to FedAvg.
pub fn cost_report(strategy: &str, clients: u64, rounds: u64, classes: usize, share_classifier: bool) -> Result<Value, String> {
    let s = Strategy::parse(strategy).ok_or_else(|| format!("unknown strategy {strategy:?}"))?;
    if classes == 0 {
        return Err("classes must be positive".into());
    }
    let layers = presets::resnet9(classes);
    let inv = Inventory::of(&layers);
    let p = steady_payload(&inv, s, share_classifier);
    let bytes = cost_formula(p.s2c, p.c2s, clients, rounds);
    let fedavg = cost_formula(inv.plain, inv.plain, clients, rounds);
    Ok(json!({
        "p_s2c": p.s2c,
        "p_c2s": p.c2s,
        "bytes": bytes,
        "gb": bytes as f64 / 1e9,
        "ratio_to_fedavg": bytes as f64 / fedavg as f64,
        "plain_params": param_count(&layers, false),
        "factorized_params": param_count(&layers, true),
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn matching(vectors_json: &str, tau: f64, epsilon: f64) -> Result<String, JsValue> {
    to_js(matching_report(vectors_json, tau, epsilon))
}

#[wasm_bindgen]
pub fn kernel(u_json: &str, v_json: &str, mu_json: &str, lr: f64, lambda: f64) -> Result<String, JsValue> {
    to_js(kernel_report(u_json, v_json, mu_json, lr, lambda))
}

#[wasm_bindgen]
pub fn cost(strategy: &str, clients: u32, rounds: u32, classes: u32, share_classifier: bool) -> Result<String, JsValue> {
    to_js(cost_report(strategy, clients.into(), rounds.into(), classes as usize, share_classifier))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_matches_hand_computed_scores() {
        let r = matching_report("[[1,0],[0.70710678118654752,0.70710678118654752],[0,1]]", 0.6, 2.0).unwrap();
        let s = &r["sigma"][0];
        assert_eq!(s[0].as_f64(), Some(1.0));
        assert!((s[1].as_f64().unwrap() - 0.7071).abs() < 1e-4);
        assert_eq!(s[2].as_f64(), Some(0.0));
        let w: f64 = r["weights"][0].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_thresholds_and_stays_rank_one() {
        let r = kernel_report("[1,2]", "[3,4,5]", "[[0.5,-0.01,0],[0,0,-0.2]]", 0.1, 0.5).unwrap();
        assert_eq!(r["nonzero_mu"], 2);
        assert_eq!(r["max_rank_one_minor"].as_f64(), Some(0.0));
        assert!((r["weight"][0][0].as_f64().unwrap() - 3.45).abs() < 1e-12);
        assert!(kernel_report("[1]", "[1]", "[[1,2]]", 0.1, 0.1).is_err());
    }

    #[test]
    fn fedavg_cost_ratio_is_one() {
        let r = cost_report("fedavg", 20, 50, 10, true).unwrap();
        assert_eq!(r["ratio_to_fedavg"].as_f64(), Some(1.0));
        assert!(cost_report("fedsgd", 1, 1, 10, true).is_err());
    }
}
