//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use kuronet::postprocess::Label;
use kuronet::Tensor64;

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central difference of `f` at coordinate `i` of `x`.
pub fn partial(x: &Tensor64, i: usize, f: &dyn Fn(&Tensor64) -> f64) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += FD_STEP;
    let mut minus = x.clone();
    minus.data_mut()[i] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

/// Largest relative error between `analytic` and central differences over
/// every coordinate of `x`.
pub fn max_fd_error(x: &Tensor64, analytic: &Tensor64, f: &dyn Fn(&Tensor64) -> f64) -> f64 {
    (0..x.len())
        .map(|i| rel_error(analytic.data()[i], partial(x, i, f)))
        .fold(0.0, f64::max)
}

/// `Σ w·y`, the scalar probe used to check vector-valued ops.
pub fn dot(a: &Tensor64, b: &Tensor64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Brute-force DBSCAN: labels follow a breadth-first closure over the full
/// distance matrix, then border points take the cluster of their
/// lowest-index core neighbour.
pub fn dbscan_oracle(points: &[(f64, f64)], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let d = |i: usize, j: usize| ((points[i].0 - points[j].0).powi(2) + (points[i].1 - points[j].1).powi(2)).sqrt();
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| d(i, j) <= eps).count() >= min_pts)
        .collect();
    let mut comp = vec![None; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || comp[s].is_some() {
            continue;
        }
        let mut frontier = vec![s];
        comp[s] = Some(next);
        while !frontier.is_empty() {
            let mut grown = Vec::new();
            for &i in &frontier {
                for j in 0..n {
                    if core[j] && comp[j].is_none() && d(i, j) <= eps {
                        comp[j] = Some(next);
                        grown.push(j);
                    }
                }
            }
            frontier = grown;
        }
        next += 1;
    }
    (0..n)
        .map(|i| {
            if core[i] {
                comp[i]
            } else {
                (0..n).find(|&j| core[j] && d(i, j) <= eps).and_then(|j| comp[j])
            }
        })
        .collect()
}

/// Whether two labelings induce the same partition, noise included.
pub fn same_partition(a: &[Label], b: &[Option<usize>]) -> bool {
    use std::collections::HashMap;
    if a.len() != b.len() {
        return false;
    }
    let mut fwd: HashMap<usize, usize> = HashMap::new();
    let mut back: HashMap<usize, usize> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (Label::Noise, None) => {}
            (Label::Cluster(p), Some(q)) => {
                if *fwd.entry(*p).or_insert(*q) != *q || *back.entry(*q).or_insert(*p) != *p {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}

/// Composite Simpson's rule with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n)
        .map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    (f(a) + inner + f(b)) * h / 3.0
}

/// `E[min(X, c)]` for `X ~ Beta(a, b)`, with `c` in (0, 1).
///
/// Substituting `u = x^a` removes the `x^(a−1)` singularity at 0, leaving
/// smooth integrands for the partial mean and the mass below `c`.
pub fn clamped_beta_mean(a: f64, b: f64, c: f64, ln_beta: f64) -> (f64, f64) {
    let norm = 1.0 / (a * ln_beta.exp());
    let top = c.powf(a);
    let n = 200_000;
    let partial_mean = norm * simpson(|u| u.powf(1.0 / a) * (1.0 - u.powf(1.0 / a)).powf(b - 1.0), 0.0, top, n);
    let mass_below = norm * simpson(|u| (1.0 - u.powf(1.0 / a)).powf(b - 1.0), 0.0, top, n);
    (partial_mean + c * (1.0 - mass_below), mass_below)
}
