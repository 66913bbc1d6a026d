//! Weighted k-means: reservoir-sampled k-means++ seeding, mini-batch warm-up,
//! then full weighted Lloyd iterations.
//!
//! Objective: `sum_i w_i * ||x_i - mu_{c(i)}||^2`. With no weights every
//! point has weight one, which is the plain k-means objective.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub seed: u64,
    pub reservoir_size: usize,
    pub batch_size: usize,
    pub minibatch_passes: usize,
    /// Seedings of the refined initialization, scored on a subsample; the
    /// best warm-starts the mini-batch and Lloyd stages. At most one means
    /// plain k-means++ on the whole reservoir.
    pub restarts: usize,
    /// Size of the subsample used to score restarts.
    pub restart_sample: usize,
    /// Relative weighted-WCSS decrease below which Lloyd stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            reservoir_size: 100_000,
            batch_size: 1024,
            minibatch_passes: 10,
            restarts: 10,
            restart_sample: 4096,
            tol: 1e-6,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// k x d, ordered by descending total assigned weight.
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub wcss: f64,
    /// Weighted WCSS after each centroid update.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// True when Lloyd stopped at an assignment fixed point.
    pub converged: bool,
}

#[inline]
pub fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => sq_dist_slice(a, b),
        _ => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

/// Four interleaved partial sums, combined in a fixed order.
fn sq_dist_slice(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..4 {
            let d = x[j] - y[j];
            acc[j] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += (x - y) * (x - y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(centroids: ArrayView2<'_, f64>, x: ArrayView1<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

const BLOCK: usize = 2048;

/// Nearest centroid for every row. Squared distances are screened through
/// `|x|^2 - 2 x.c + |c|^2` (one matrix product per block), then every
/// centroid within rounding reach of the screened minimum is re-scored
/// exactly, so the result equals [`nearest`] row by row.
pub fn nearest_all(centroids: ArrayView2<'_, f64>, points: ArrayView2<'_, f64>) -> Vec<(usize, f64)> {
    nearest_rows(centroids, points, true)
}

pub fn assign_all(centroids: ArrayView2<'_, f64>, points: ArrayView2<'_, f64>) -> Vec<usize> {
    nearest_rows(centroids, points, false).into_iter().map(|(k, _)| k).collect()
}

fn nearest_rows(
    centroids: ArrayView2<'_, f64>,
    points: ArrayView2<'_, f64>,
    exact_distance: bool,
) -> Vec<(usize, f64)> {
    let m = points.nrows();
    let d = points.ncols();
    let c_norm: Vec<f64> = centroids.rows().into_iter().map(|c| c.dot(&c)).collect();
    let c_max = c_norm.iter().fold(0.0f64, |a, &b| a.max(b));
    let ct = centroids.t();
    let starts: Vec<usize> = (0..m).step_by(BLOCK).collect();
    let blocks: Vec<Vec<(usize, f64)>> = starts
        .par_iter()
        .map(|&s| {
            let block = points.slice(ndarray::s![s..(s + BLOCK).min(m), ..]);
            let g = block.dot(&ct);
            block
                .rows()
                .into_iter()
                .zip(g.rows())
                .map(|(x, gx)| {
                    let x_norm = x.dot(&x);
                    let screened: Vec<f64> = gx
                        .iter()
                        .zip(&c_norm)
                        .map(|(&xc, &cn)| x_norm - 2.0 * xc + cn)
                        .collect();
                    let low = screened.iter().fold(f64::INFINITY, |a, &b| a.min(b));
                    let reach = (d as f64 + 16.0) * 8.0 * f64::EPSILON * (x_norm + c_max);
                    let close = screened.iter().filter(|&&v| v <= low + reach).count();
                    if close == 1 && !exact_distance {
                        let k = screened.iter().position(|&v| v <= low + reach).unwrap();
                        return (k, f64::NAN);
                    }
                    let mut best = (0, f64::INFINITY);
                    for (k, &v) in screened.iter().enumerate() {
                        if v <= low + reach {
                            let exact = sq_dist(x, centroids.row(k));
                            if exact < best.1 {
                                best = (k, exact);
                            }
                        }
                    }
                    best
                })
                .collect()
        })
        .collect();
    blocks.into_iter().flatten().collect()
}

pub fn weighted_wcss(
    points: ArrayView2<'_, f64>,
    weights: &[f64],
    centroids: ArrayView2<'_, f64>,
    assignments: &[usize],
) -> f64 {
    points
        .rows()
        .into_iter()
        .zip(weights)
        .zip(assignments)
        .map(|((x, &w), &c)| w * sq_dist(x, centroids.row(c)))
        .sum()
}

fn validate(points: ArrayView2<'_, f64>, weights: Option<&[f64]>, k: usize) -> Result<Vec<f64>> {
    let m = points.nrows();
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if m < k {
        return Err(Error::Invalid(format!("k = {k} exceeds the {m} available points")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means points".into()));
    }
    let w = match weights {
        Some(w) => {
            if w.len() != m {
                return Err(Error::dims("k-means weights", m, w.len()));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Invalid("weights must be finite and nonnegative".into()));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Invalid("weights sum to zero".into()));
            }
            w.to_vec()
        }
        None => vec![1.0; m],
    };
    Ok(w)
}

/// Two-stage weighted k-means from a seed.
pub fn fit(
    points: ArrayView2<'_, f64>,
    weights: Option<&[f64]>,
    k: usize,
    config: &KMeansConfig,
) -> Result<KMeansFit> {
    let w = validate(points, weights, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sample = reservoir(points.nrows(), config.reservoir_size, &mut rng);
    let init = if config.restarts > 1 {
        best_seeding(points, &w, &sample, k, config, &mut rng)?
    } else {
        plus_plus(points, &w, &sample, k, &mut rng)
    };
    let warm = minibatch(points, &w, &sample, init, config, &mut rng);
    lloyd_weighted(points, &w, warm, config.tol, config.max_iter)
}

/// Refined seeding: over-cluster a random subsample of the reservoir into
/// `3k` groups, then cluster the group centroids (weighted by group mass)
/// into `k` with `restarts` seedings, keeping the lowest objective.
fn best_seeding(
    points: ArrayView2<'_, f64>,
    w: &[f64],
    sample: &[usize],
    k: usize,
    config: &KMeansConfig,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    let mut sub = sample.to_vec();
    let over = (3 * k).min(sample.len());
    if sub.len() > config.restart_sample.max(over) {
        sub.shuffle(rng);
        sub.truncate(config.restart_sample.max(over));
        sub.sort_unstable();
    }
    let sub_points = points.select(Axis(0), &sub);
    let sub_w: Vec<f64> = sub.iter().map(|&i| w[i]).collect();
    if sub_w.iter().sum::<f64>() <= 0.0 {
        return Ok(plus_plus(points, w, sample, k, rng));
    }
    let local: Vec<usize> = (0..sub.len()).collect();
    let init = plus_plus(sub_points.view(), &sub_w, &local, over, rng);
    let fine = lloyd_weighted(sub_points.view(), &sub_w, init, config.tol, config.max_iter)?;
    let mut mass = vec![0.0; over];
    for (&c, &wi) in fine.assignments.iter().zip(&sub_w) {
        mass[c] += wi;
    }
    let keep: Vec<usize> = (0..over).filter(|&c| mass[c] > 0.0).collect();
    if keep.len() < k {
        return Ok(plus_plus(points, w, sample, k, rng));
    }
    let groups = fine.centroids.select(Axis(0), &keep);
    let gw: Vec<f64> = keep.iter().map(|&c| mass[c]).collect();
    let all: Vec<usize> = (0..keep.len()).collect();
    let mut best: Option<(f64, Array2<f64>)> = None;
    for _ in 0..config.restarts {
        let init = plus_plus(groups.view(), &gw, &all, k, rng);
        let fit = lloyd_weighted(groups.view(), &gw, init, config.tol, config.max_iter)?;
        let labels = assign_all(fit.centroids.view(), sub_points.view());
        let cost = weighted_wcss(sub_points.view(), &sub_w, fit.centroids.view(), &labels);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, fit.centroids));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// Full weighted Lloyd iterations from the given initial centroids.
pub fn lloyd(
    points: ArrayView2<'_, f64>,
    weights: Option<&[f64]>,
    init: Array2<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<KMeansFit> {
    let w = validate(points, weights, init.nrows())?;
    if init.ncols() != points.ncols() {
        return Err(Error::dims("initial centroids", points.ncols(), init.ncols()));
    }
    lloyd_weighted(points, &w, init, tol, max_iter)
}

/// Algorithm R; returns sorted point indices.
fn reservoir(m: usize, capacity: usize, rng: &mut impl Rng) -> Vec<usize> {
    if m <= capacity {
        return (0..m).collect();
    }
    let mut res: Vec<usize> = (0..capacity).collect();
    for i in capacity..m {
        let j = rng.random_range(0..=i);
        if j < capacity {
            res[j] = i;
        }
    }
    res.sort_unstable();
    res
}

/// Draw an index from `candidates` with probability proportional to `mass`.
fn draw(mass: &[f64], rng: &mut impl Rng) -> Option<usize> {
    let total: f64 = mass.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &m) in mass.iter().enumerate() {
        if m > 0.0 {
            acc += m;
            last = Some(i);
            if target < acc {
                return Some(i);
            }
        }
    }
    last
}

/// Greedy k-means++ on the sample: each new center is the best of
/// `2 + ln k` candidates drawn by weighted D^2 mass, judged by the weighted
/// potential it leaves behind.
fn plus_plus(
    points: ArrayView2<'_, f64>,
    w: &[f64],
    sample: &[usize],
    k: usize,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let d = points.ncols();
    let trials = 2 + (k as f64).ln() as usize;
    let sub = points.select(Axis(0), sample);
    let norms: Vec<f64> = sub.rows().into_iter().map(|x| x.dot(&x)).collect();
    let mut centroids = Array2::zeros((k, d));
    let sw: Vec<f64> = sample.iter().map(|&i| w[i]).collect();
    let first = draw(&sw, rng).unwrap_or(0);
    centroids.row_mut(0).assign(&sub.row(first));
    let mut best = distances_to(sub.view(), &norms, &[first]).remove(0);
    let mut taken = vec![false; sample.len()];
    taken[first] = true;
    for c in 1..k {
        let mass: Vec<f64> = best.iter().zip(&sw).map(|(d2, w)| d2 * w).collect();
        // Degenerate mass (all remaining points coincide with centers or
        // carry no weight): fall back to the first untaken sample point.
        let picks: Vec<usize> = (0..trials)
            .map(|_| {
                draw(&mass, rng)
                    .or_else(|| taken.iter().position(|t| !t))
                    .unwrap_or(0)
            })
            .collect();
        let mut chosen: Option<(usize, f64, Vec<f64>)> = None;
        for (pick, cand) in picks.iter().zip(distances_to(sub.view(), &norms, &picks)) {
            let merged: Vec<f64> = best.iter().zip(&cand).map(|(a, b)| a.min(*b)).collect();
            let potential: f64 = merged.iter().zip(&sw).map(|(d2, w)| d2 * w).sum();
            if chosen.as_ref().is_none_or(|(_, p, _)| potential < *p) {
                chosen = Some((*pick, potential, merged));
            }
        }
        let (pick, _, merged) = chosen.expect("at least one trial");
        taken[pick] = true;
        centroids.row_mut(c).assign(&sub.row(pick));
        best = merged;
    }
    centroids
}

/// Squared distances from every sample row to each of the `centers` rows,
/// through the inner-product expansion (clamped at zero).
fn distances_to(sub: ArrayView2<'_, f64>, norms: &[f64], centers: &[usize]) -> Vec<Vec<f64>> {
    let c = sub.select(Axis(0), centers);
    let g = sub.dot(&c.t());
    centers
        .iter()
        .enumerate()
        .map(|(j, &ci)| {
            g.column(j)
                .iter()
                .zip(norms)
                .map(|(&xc, &xn)| (xn - 2.0 * xc + norms[ci]).max(0.0))
                .collect()
        })
        .collect()
}

/// Weighted mini-batch passes over the sample (per-center learning rate
/// `w_i / accumulated weight`).
fn minibatch(
    points: ArrayView2<'_, f64>,
    w: &[f64],
    sample: &[usize],
    mut centroids: Array2<f64>,
    config: &KMeansConfig,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let k = centroids.nrows();
    let mut counts = vec![0.0; k];
    let mut order = sample.to_vec();
    let batch = config.batch_size.max(1);
    for _ in 0..config.minibatch_passes {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let rows = points.select(Axis(0), chunk);
            let labels = assign_all(centroids.view(), rows.view());
            for (&i, &c) in chunk.iter().zip(&labels) {
                if w[i] <= 0.0 {
                    continue;
                }
                counts[c] += w[i];
                let eta = w[i] / counts[c];
                let mut row = centroids.row_mut(c);
                for (m, &x) in row.iter_mut().zip(points.row(i)) {
                    *m += eta * (x - *m);
                }
            }
        }
    }
    centroids
}

/// Weighted means of the current assignment. Clusters without positive
/// weight are moved onto the point with the largest weighted distance to
/// its own centroid.
fn update(
    points: ArrayView2<'_, f64>,
    w: &[f64],
    assignments: &[usize],
    centroids: &mut Array2<f64>,
) {
    let (k, d) = centroids.dim();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut mass = vec![0.0; k];
    for ((x, &wi), &c) in points.rows().into_iter().zip(w).zip(assignments) {
        if wi == 0.0 {
            continue;
        }
        mass[c] += wi;
        let mut row = sums.row_mut(c);
        for (s, &v) in row.iter_mut().zip(x) {
            *s += wi * v;
        }
    }
    let mut empty = Vec::new();
    for (c, &m) in mass.iter().enumerate() {
        if m > 0.0 {
            let inv = m;
            centroids
                .row_mut(c)
                .iter_mut()
                .zip(sums.row(c))
                .for_each(|(m, &s)| *m = s / inv);
        } else {
            empty.push(c);
        }
    }
    if empty.is_empty() {
        return;
    }
    let mut far: Vec<f64> = points
        .rows()
        .into_iter()
        .zip(w)
        .zip(assignments)
        .map(|((x, &wi), &c)| wi * sq_dist(x, centroids.row(c)))
        .collect();
    for c in empty {
        let mut pick = 0;
        for (i, &f) in far.iter().enumerate() {
            if f > far[pick] {
                pick = i;
            }
        }
        far[pick] = -1.0;
        centroids.row_mut(c).assign(&points.row(pick));
    }
}

fn lloyd_weighted(
    points: ArrayView2<'_, f64>,
    w: &[f64],
    mut centroids: Array2<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<KMeansFit> {
    let mut assignments = assign_all(centroids.view(), points);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        update(points, w, &assignments, &mut centroids);
        let cost = weighted_wcss(points, w, centroids.view(), &assignments);
        trace.push(cost);
        let next = assign_all(centroids.view(), points);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        if let [.., prev, last] = trace[..] {
            if prev > 0.0 && (prev - last) / prev < tol {
                break;
            }
        }
    }
    if centroids.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite centroid".into()));
    }
    let wcss = weighted_wcss(points, w, centroids.view(), &assignments);
    let (centroids, assignments) = order_by_weight(centroids, assignments, w);
    Ok(KMeansFit {
        centroids,
        assignments,
        wcss,
        trace,
        iterations,
        converged,
    })
}

/// Relabel clusters by descending total assigned weight (ties keep index order).
fn order_by_weight(
    centroids: Array2<f64>,
    assignments: Vec<usize>,
    w: &[f64],
) -> (Array2<f64>, Vec<usize>) {
    let k = centroids.nrows();
    let mut mass = vec![0.0; k];
    for (&c, &wi) in assignments.iter().zip(w) {
        mass[c] += wi;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    let mut rank = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let reordered = Array2::from_shape_fn(centroids.dim(), |(r, j)| centroids[[order[r], j]]);
    let assignments = assignments.into_iter().map(|c| rank[c]).collect();
    (reordered, assignments)
}

/// Grow an existing solution by `extra` centers placed greedily on the point
/// with the largest weighted distance to its nearest center, then re-run
/// Lloyd. The result never has a higher objective than the input.
pub fn grow(
    points: ArrayView2<'_, f64>,
    weights: Option<&[f64]>,
    base: &KMeansFit,
    extra: usize,
    tol: f64,
    max_iter: usize,
) -> Result<KMeansFit> {
    let k = base.centroids.nrows() + extra;
    let w = validate(points, weights, k)?;
    let d = points.ncols();
    let mut centroids = Array2::zeros((k, d));
    centroids
        .slice_mut(ndarray::s![..base.centroids.nrows(), ..])
        .assign(&base.centroids);
    let mut far: Vec<f64> = nearest_all(base.centroids.view(), points)
        .into_iter()
        .zip(&w)
        .map(|((_, d2), &wi)| wi * d2)
        .collect();
    for c in base.centroids.nrows()..k {
        let mut pick = 0;
        for (i, &f) in far.iter().enumerate() {
            if f > far[pick] {
                pick = i;
            }
        }
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, x) in points.rows().into_iter().enumerate() {
            let d2 = w[i] * sq_dist(x, centroids.row(c));
            if d2 < far[i] {
                far[i] = d2;
            }
        }
    }
    lloyd_weighted(points, &w, centroids, tol, max_iter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn one_cluster_per_point_has_zero_wcss() {
        let pts = array![[0.0, 0.0], [1.0, 5.0], [-3.0, 2.0], [4.0, 4.0]];
        let fit = fit(pts.view(), None, 4, &KMeansConfig::default()).unwrap();
        assert_eq!(fit.wcss, 0.0);
        let mut seen = fit.assignments.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let pts = array![[0.0], [1.0]];
        let cfg = KMeansConfig::default();
        assert!(fit(pts.view(), None, 3, &cfg).is_err());
        assert!(fit(pts.view(), Some(&[0.0, 0.0]), 1, &cfg).is_err());
        assert!(fit(pts.view(), Some(&[1.0, -1.0]), 1, &cfg).is_err());
        let bad = array![[0.0], [f64::NAN]];
        assert_eq!(fit(bad.view(), None, 1, &cfg).unwrap_err().category(), "non-finite");
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let c = array![[0.0, 0.0], [-1.0, 0.0], [2.0, 0.0], [1.0, 5.0], [1.0, 0.0]];
        let x = array![0.0, 0.0];
        assert_eq!(nearest(c.view(), x.view()).0, 0);
        let mid = array![0.0, 0.0];
        let c2 = array![[9.0, 9.0], [-1.0, 0.0], [5.0, 5.0], [7.0, 7.0], [1.0, 0.0]];
        assert_eq!(nearest(c2.view(), mid.view()).0, 1);
    }

    #[test]
    fn zero_weight_points_do_not_move_centroids() {
        let pts = array![[0.0], [1.0], [100.0], [10.0], [11.0]];
        let w = [1.0, 1.0, 0.0, 1.0, 1.0];
        let init = array![[0.0], [10.0]];
        let f = lloyd(pts.view(), Some(&w), init, 0.0, 100).unwrap();
        let mut cs: Vec<f64> = f.centroids.iter().copied().collect();
        cs.sort_by(f64::total_cmp);
        assert_eq!(cs, vec![0.5, 10.5]);
    }

    #[test]
    fn clusters_are_ordered_by_weight() {
        let pts = array![[0.0], [0.1], [0.2], [10.0]];
        let f = fit(pts.view(), None, 2, &KMeansConfig::default()).unwrap();
        assert_eq!(f.assignments, vec![0, 0, 0, 1]);
    }

    #[test]
    fn grow_never_increases_wcss() {
        let pts = Array2::from_shape_fn((40, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let cfg = KMeansConfig::default();
        let base = fit(pts.view(), None, 2, &cfg).unwrap();
        let bigger = grow(pts.view(), None, &base, 1, cfg.tol, cfg.max_iter).unwrap();
        assert!(bigger.wcss <= base.wcss);
    }
}
