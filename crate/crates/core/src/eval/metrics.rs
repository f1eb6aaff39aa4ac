use crate::error::{Error, Result};
use crate::rng::Rng;
use rayon::prelude::*;

/// Number of random directions used by default.
pub const DEFAULT_PROJECTIONS: usize = 128;

fn check_sets(a: &[f64], b: &[f64], dim: usize) -> Result<(usize, usize)> {
    if dim == 0 {
        return Err(Error::Contract("sample dimension must be positive".into()));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("distance between empty sample sets".into()));
    }
    if !a.len().is_multiple_of(dim) || !b.len().is_multiple_of(dim) {
        return Err(Error::Contract(format!(
            "sample buffers of length {} and {} are not multiples of {dim}",
            a.len(),
            b.len()
        )));
    }
    Ok((a.len() / dim, b.len() / dim))
}

/// Exact 2-Wasserstein distance between two 1-D empirical distributions
/// with uniform weights. Both inputs must be sorted ascending.
pub fn w2_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut q = 0.0;
    let mut acc = 0.0;
    // Walk merged quantile breakpoints i/n and j/m.
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        acc += (next - q) * (a[i] - b[j]).powi(2);
        q = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc.max(0.0).sqrt()
}

/// Mean over `n_proj` random unit directions of the 1-D 2-Wasserstein
/// distance between the projected sets. `a` and `b` are row-major
/// `[n, dim]` buffers.
pub fn sliced_w2(a: &[f64], b: &[f64], dim: usize, n_proj: usize, rng: &mut Rng) -> Result<f64> {
    check_sets(a, b, dim)?;
    if n_proj == 0 {
        return Err(Error::Contract("at least one projection is required".into()));
    }
    let dirs: Vec<Vec<f64>> = (0..n_proj)
        .map(|_| loop {
            let v = rng.normals(dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let project = |set: &[f64], d: &[f64]| -> Vec<f64> {
        let mut p: Vec<f64> = set
            .chunks(dim)
            .map(|row| row.iter().zip(d).map(|(x, y)| x * y).sum())
            .collect();
        p.sort_by(f64::total_cmp);
        p
    };
    let per: Vec<f64> = dirs
        .par_iter()
        .map(|d| w2_sorted(&project(a, d), &project(b, d)))
        .collect();
    Ok(per.iter().sum::<f64>() / n_proj as f64)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum()
}

// Sum of k(x_i, y_j) over all pairs, skipping i == j when `same`.
fn kernel_sum(x: &[f64], y: &[f64], dim: usize, gamma: f64, same: bool) -> f64 {
    let rows: Vec<f64> = x
        .par_chunks(dim)
        .enumerate()
        .map(|(i, xi)| {
            y.chunks(dim)
                .enumerate()
                .filter(|&(j, _)| !(same && i == j))
                .map(|(_, yj)| (-gamma * sq_dist(xi, yj)).exp())
                .sum()
        })
        .collect();
    rows.iter().sum()
}

/// Unbiased MMD² with the kernel `exp(−‖x−y‖² / 2σ²)`. May be slightly
/// negative; [`clamp_report`] it for display.
pub fn mmd_rbf(a: &[f64], b: &[f64], dim: usize, bandwidth: f64) -> Result<f64> {
    let (n, m) = check_sets(a, b, dim)?;
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Contract(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if n < 2 || m < 2 {
        return Err(Error::Contract(
            "unbiased MMD needs at least two samples per set".into(),
        ));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let kaa = kernel_sum(a, a, dim, gamma, true) / (n * (n - 1)) as f64;
    let kbb = kernel_sum(b, b, dim, gamma, true) / (m * (m - 1)) as f64;
    let kab = kernel_sum(a, b, dim, gamma, false) / (n * m) as f64;
    Ok(kaa + kbb - 2.0 * kab)
}

pub fn clamp_report(mmd2: f64) -> f64 {
    mmd2.max(0.0)
}

/// Median pairwise Euclidean distance within the first `limit` rows.
pub fn median_bandwidth(x: &[f64], dim: usize, limit: usize) -> Result<f64> {
    let n = (x.len() / dim.max(1)).min(limit);
    if n < 2 {
        return Err(Error::Contract("median heuristic needs two samples".into()));
    }
    let mut d: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(&x[i * dim..(i + 1) * dim], &x[j * dim..(j + 1) * dim]).sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    Ok(if med > 0.0 { med } else { 1.0 })
}

/// Fraction of points whose nearest centre is the one of their own class.
pub fn purity(points: &[f64], labels: &[usize], centers: &[[f64; 2]]) -> Result<f64> {
    if points.len() != 2 * labels.len() || labels.is_empty() {
        return Err(Error::Contract("purity needs one 2-D point per label".into()));
    }
    let hits = points
        .chunks(2)
        .zip(labels)
        .filter(|(p, &c)| {
            let nearest = centers
                .iter()
                .enumerate()
                .min_by(|x, y| sq_dist(p, x.1).total_cmp(&sq_dist(p, y.1)))
                .map(|(i, _)| i);
            nearest == Some(c)
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
