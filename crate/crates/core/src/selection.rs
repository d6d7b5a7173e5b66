//! Choosing which workers to use when one slow link can dominate the
//! Inkheart time bound.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timemodel::ClusterProfile;
use crate::tuner::equilibrium_solve;

/// Largest cluster the exhaustive search accepts.
pub const BRUTE_FORCE_MAX_N: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionInputs {
    pub d: usize,
    pub omega: f64,
    pub omega_s: f64,
    /// Full-vector gradient noise variance.
    pub sigma_sq: f64,
    pub epsilon: f64,
    pub l_max: f64,
    pub l_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetEvaluation {
    /// Worker indices, ascending.
    pub subset: Vec<usize>,
    pub t: f64,
    pub s_star: f64,
    pub kappa_max: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best: SubsetEvaluation,
    /// Distinct candidates in the order the search first met them.
    pub candidates: Vec<SubsetEvaluation>,
}

/// `T(S) = max{t(S) L_max, d kappa_max(S) L_A}` with
/// `t(S) = max{max_{i in S} M_i, s*(S)}`.
pub fn evaluate_subset(cluster: &ClusterProfile, subset: &[usize], inp: &SelectionInputs) -> Result<SubsetEvaluation> {
    if subset.is_empty() {
        return Err(Error::contract("subset must be nonempty"));
    }
    let mut idx = subset.to_vec();
    idx.sort_unstable();
    idx.dedup();
    let sub = cluster.subset(&idx)?;
    let eq = equilibrium_solve(&sub, inp.omega, inp.omega_s, inp.sigma_sq, inp.epsilon, inp.d)?;
    let m_max = idx.iter().map(|&i| cluster.m_of(i)).fold(0.0, f64::max);
    let kappa_max = sub.kappa_max();
    let t = m_max.max(eq.s_star);
    let objective = (t * inp.l_max).max(inp.d as f64 * kappa_max * inp.l_a);
    Ok(SubsetEvaluation {
        subset: idx,
        t,
        s_star: eq.s_star,
        kappa_max,
        objective,
    })
}

/// Sorted-prefix search: order by `kappa`, and within every prefix re-order
/// by `M_i`; only prefixes of those orders can be optimal.
pub fn select_optimal_subset(cluster: &ClusterProfile, inp: &SelectionInputs) -> Result<Selection> {
    let n = cluster.len();
    let mut by_kappa: Vec<usize> = (0..n).collect();
    by_kappa.sort_by(|&a, &b| {
        cluster.worker(a).kappa.total_cmp(&cluster.worker(b).kappa).then(a.cmp(&b))
    });

    let mut memo: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut candidates: Vec<SubsetEvaluation> = Vec::new();
    let mut best: Option<usize> = None;
    for k in 1..=n {
        let mut prefix = by_kappa[..k].to_vec();
        prefix.sort_by(|&a, &b| cluster.m_of(a).total_cmp(&cluster.m_of(b)).then(a.cmp(&b)));
        for m in 1..=k {
            let mut key = prefix[..m].to_vec();
            key.sort_unstable();
            let pos = match memo.get(&key) {
                Some(&p) => p,
                None => {
                    let ev = evaluate_subset(cluster, &key, inp)?;
                    candidates.push(ev);
                    memo.insert(key, candidates.len() - 1);
                    candidates.len() - 1
                }
            };
            if best.is_none_or(|b| candidates[pos].objective < candidates[b].objective) {
                best = Some(pos);
            }
        }
    }
    let best = candidates[best.expect("n >= 1")].clone();
    Ok(Selection { best, candidates })
}

/// Exhaustive minimum over all nonempty subsets.
pub fn brute_force_subset(cluster: &ClusterProfile, inp: &SelectionInputs) -> Result<SubsetEvaluation> {
    let n = cluster.len();
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::contract(format!(
            "brute force limited to {BRUTE_FORCE_MAX_N} workers, got {n}"
        )));
    }
    let mut best: Option<SubsetEvaluation> = None;
    for mask in 1u32..(1u32 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let ev = evaluate_subset(cluster, &idx, inp)?;
        if best.as_ref().is_none_or(|b| ev.objective < b.objective) {
            best = Some(ev);
        }
    }
    Ok(best.expect("n >= 1"))
}
