//! Brute-force reference implementations and random input helpers shared by
//! the integration suites. Nothing here calls into the library's numeric
//! code paths.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    // Occasionally quantize to produce exact ties and zeros.
    let quantize = rng.random_bool(0.2);
    loop {
        let mut v: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().ln()).collect();
        if quantize {
            v.iter_mut().for_each(|x| *x = (*x * 2.0).floor());
        }
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            return v.into_iter().map(|x| x / s).collect();
        }
    }
}

pub fn random_permutation(rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

pub fn all_permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Greedy north-west-corner transport on unit-spaced support, normalized
/// by the support diameter. Optimal for the 1-D ground metric.
pub fn wasserstein_transport(y: &[f64], p: &[f64]) -> f64 {
    let mut supply = y.to_vec();
    let mut demand = p.to_vec();
    let (mut i, mut j) = (0, 0);
    let mut cost = 0.0;
    while i < supply.len() && j < demand.len() {
        let moved = supply[i].min(demand[j]);
        cost += moved * (i as f64 - j as f64).abs();
        supply[i] -= moved;
        demand[j] -= moved;
        if supply[i] <= demand[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    cost / (y.len() - 1) as f64
}

pub fn cosine_direct(y: &[f64], p: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut ny = 0.0;
    let mut np = 0.0;
    for k in 0..y.len() {
        dot += y[k] * p[k];
        ny += y[k] * y[k];
        np += p[k] * p[k];
    }
    dot / (ny.sqrt() * np.sqrt())
}

/// `Σ p ln(p / ỹ)` with `ỹ = (y + 1e-8) / (1 + K·1e-8)`.
pub fn kl_direct(y: &[f64], p: &[f64]) -> f64 {
    let eps = 1e-8;
    let k = y.len() as f64;
    let mut total = 0.0;
    for i in 0..y.len() {
        if p[i] > 0.0 {
            let ys = (y[i] + eps) / (1.0 + k * eps);
            total += p[i] * (p[i] / ys).ln();
        }
    }
    total
}

/// Repeatedly pick the largest remaining probability, lowest index first.
pub fn ranking_by_selection(probs: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..probs.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for pos in 1..left.len() {
            if probs[left[pos]] > probs[left[best]] {
                best = pos;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// Tau-a by pair counting over items.
pub fn kendall_pairs(a: &[usize], b: &[usize]) -> f64 {
    let k = a.len();
    let pos = |perm: &[usize], item: usize| perm.iter().position(|&x| x == item).unwrap();
    let (mut conc, mut disc) = (0i64, 0i64);
    for x in 0..k {
        for y in x + 1..k {
            let da = pos(a, x) as i64 - pos(a, y) as i64;
            let db = pos(b, x) as i64 - pos(b, y) as i64;
            if da * db > 0 {
                conc += 1;
            } else {
                disc += 1;
            }
        }
    }
    (conc - disc) as f64 / (k * (k - 1) / 2) as f64
}

pub fn borda_direct(a: &[usize], b: &[usize]) -> f64 {
    let k = a.len();
    let mut score = 0usize;
    for pos in 0..k {
        if a[pos] == b[pos] {
            score += k - pos;
        }
    }
    score as f64 / (k * (k + 1) / 2) as f64
}

pub fn binary_direct(a: &[usize], b: &[usize]) -> f64 {
    if a == b { 1.0 } else { 0.0 }
}

/// FI computed straight from the definition, one question at a time.
pub fn fairness_direct(rows: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for row in rows {
        let n = row.len() as f64;
        let mu = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / n;
        let cov = var.sqrt() / mu.abs().max(1e-9);
        acc += 1.0 / (1.0 + cov * cov);
    }
    acc / rows.len() as f64
}

pub fn softmax_direct(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
