use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::{Dataset, DomainSpec, Partition};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng, STREAM_SPLIT};

/// Stratified train/val/test index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Holdout {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per class: shuffle, then take `round(val_frac * n)` for validation,
/// `round(test_frac * n)` for test and the rest for training.
pub fn holdout_split(d: &Dataset, val_frac: f64, test_frac: f64, seed: u64) -> Result<Holdout> {
    if !(val_frac >= 0.0 && test_frac >= 0.0 && val_frac + test_frac < 1.0) {
        return Err(Error::input("holdout fractions must be non-negative and sum below 1"));
    }
    let mut rng = rng::stream(&[seed, STREAM_SPLIT, 0]);
    let mut h = Holdout {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for mut idx in d.by_class(&d.all_indices()) {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let nv = (n * val_frac).round() as usize;
        let nt = (n * test_frac).round() as usize;
        h.val.extend_from_slice(&idx[..nv]);
        h.test.extend_from_slice(&idx[nv..nv + nt]);
        h.train.extend_from_slice(&idx[nv + nt..]);
    }
    Ok(h)
}

/// Per class, shuffles the instances and deals them round-robin with a cursor
/// that carries over between classes.
pub(crate) fn deal_iid(labels: &[usize], classes: usize, pool: &[usize], k: usize, rng: &mut SimRng) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); classes];
    for &i in pool {
        by_class[labels[i]].push(i);
    }
    let mut parts = vec![Vec::new(); k];
    let mut cursor = 0;
    for mut idx in by_class {
        idx.shuffle(rng);
        for i in idx {
            parts[cursor % k].push(i);
            cursor += 1;
        }
    }
    parts
}

pub fn split_iid(d: &Dataset, k: usize, seed: u64) -> Result<Vec<Partition>> {
    if k == 0 || k > d.len() {
        return Err(Error::input(format!("cannot split {} examples across {k} clients", d.len())));
    }
    let mut rng = rng::stream(&[seed, STREAM_SPLIT, 1]);
    let classes: Vec<usize> = (0..d.class_count).collect();
    Ok(deal_iid(&d.labels, d.class_count, &d.all_indices(), k, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(id, train)| Partition::new(id, train, classes.clone()))
        .collect())
}

/// `[class][client]` proportions, each row a Dirichlet(alpha) draw.
pub fn dirichlet_proportions(classes: usize, k: usize, alpha: f64, rng: &mut SimRng) -> Result<Vec<Vec<f64>>> {
    if !(alpha > 0.0) || k == 0 {
        return Err(Error::input(format!("invalid Dirichlet parameters alpha={alpha}, k={k}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::input(e.to_string()))?;
    Ok((0..classes)
        .map(|_| {
            let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
            let s: f64 = g.iter().sum();
            if s > 0.0 {
                g.into_iter().map(|x| x / s).collect()
            } else {
                // Every draw underflowed (tiny alpha): put the class on one client.
                let mut one = vec![0.0; k];
                one[rng.random_range(0..k)] = 1.0;
                one
            }
        })
        .collect())
}

/// Largest-remainder rounding of `p * n`; ties go to the lower client index.
fn largest_remainder(p: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|x| x * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Assigns every instance of `pool` to a client according to per-class
/// proportions, then repairs empty clients by moving one instance from the
/// largest holder of some class.
pub(crate) fn assign_by_proportions(
    labels: &[usize],
    props: &[Vec<f64>],
    pool: &[usize],
    k: usize,
    rng: &mut SimRng,
) -> Vec<Vec<usize>> {
    let classes = props.len();
    let mut by_class = vec![Vec::new(); classes];
    for &i in pool {
        by_class[labels[i]].push(i);
    }
    // cells[class][client]
    let mut cells: Vec<Vec<Vec<usize>>> = Vec::with_capacity(classes);
    for (c, mut idx) in by_class.into_iter().enumerate() {
        idx.shuffle(rng);
        let counts = largest_remainder(&props[c], idx.len());
        let mut row = Vec::with_capacity(k);
        let mut start = 0;
        for n in counts {
            row.push(idx[start..start + n].to_vec());
            start += n;
        }
        cells.push(row);
    }
    if pool.len() >= k {
        loop {
            let sizes: Vec<usize> = (0..k).map(|j| cells.iter().map(|r| r[j].len()).sum()).collect();
            let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
            // Donor: the (class, client) cell with the most instances among
            // clients that can spare one.
            let mut best: Option<(usize, usize, usize)> = None;
            for (c, row) in cells.iter().enumerate() {
                for (j, cell) in row.iter().enumerate() {
                    if sizes[j] >= 2 && best.is_none_or(|(_, _, n)| cell.len() > n) {
                        best = Some((c, j, cell.len()));
                    }
                }
            }
            let Some((c, j, _)) = best else { break };
            let moved = cells[c][j].pop().expect("non-empty donor");
            cells[c][empty].push(moved);
        }
    }
    (0..k)
        .map(|j| cells.iter().flat_map(|r| r[j].iter().copied()).collect())
        .collect()
}

pub fn split_dirichlet(d: &Dataset, k: usize, alpha: f64, seed: u64) -> Result<Vec<Partition>> {
    if k == 0 {
        return Err(Error::input("need at least one client"));
    }
    let mut rng = rng::stream(&[seed, STREAM_SPLIT, 2]);
    let props = dirichlet_proportions(d.class_count, k, alpha, &mut rng)?;
    let classes: Vec<usize> = (0..d.class_count).collect();
    Ok(assign_by_proportions(&d.labels, &props, &d.all_indices(), k, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(id, train)| Partition::new(id, train, classes.clone()))
        .collect())
}

/// Draws the client's label permutation from `seeded(global_seed + client_id)`.
pub fn permute_labels(p: &Partition, global_seed: u64, client_id: usize) -> Result<Partition> {
    if !p.has_identity_permutation() {
        return Err(Error::input(format!("client {} is already permuted", p.client_id)));
    }
    let mut rng = rng::seeded(global_seed.wrapping_add(client_id as u64));
    let mut perm: Vec<usize> = (0..p.class_count()).collect();
    perm.shuffle(&mut rng);
    Ok(Partition {
        permutation: perm,
        ..p.clone()
    })
}

pub(crate) fn check_domains(d: &Dataset, specs: &[DomainSpec]) -> Result<()> {
    let mut seen = vec![false; d.class_count];
    for s in specs {
        if s.clients_per_domain == 0 || s.classes.is_empty() {
            return Err(Error::config(format!("domain {} needs classes and clients", s.name)));
        }
        for &c in &s.classes {
            if c >= d.class_count {
                return Err(Error::config(format!("domain {} uses unknown class {c}", s.name)));
            }
            if seen[c] {
                return Err(Error::config(format!("class {c} appears in more than one domain")));
            }
            seen[c] = true;
        }
    }
    Ok(())
}

/// One sub-dataset per domain (relabelled to `0..classes.len()`), split
/// evenly over that domain's clients, then permuted per client with
/// `seed + client_id`. Client ids run consecutively across domains.
pub fn split_domains(d: &Dataset, specs: &[DomainSpec], seed: u64) -> Result<Vec<Partition>> {
    check_domains(d, specs)?;
    let mut rng = rng::stream(&[seed, STREAM_SPLIT, 3]);
    let mut out = Vec::new();
    for (g, spec) in specs.iter().enumerate() {
        let pool: Vec<usize> = d
            .all_indices()
            .into_iter()
            .filter(|&i| spec.classes.contains(&d.labels[i]))
            .collect();
        for train in deal_iid(&d.labels, d.class_count, &pool, spec.clients_per_domain, &mut rng) {
            let mut p = Partition::new(out.len(), train, spec.classes.clone());
            p.domain = Some(g);
            let id = p.client_id;
            out.push(permute_labels(&p, seed, id)?);
        }
    }
    Ok(out)
}
