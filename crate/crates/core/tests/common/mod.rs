//! Reference implementations used as test oracles.
//!
//! Each one is written independently of the library code it checks.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// KL projection onto the clipped simplex by bisection on the Lagrange
/// multiplier: `q_i = max(alpha/n, c * y_i)` with `c` chosen so that `q` sums
/// to one. The active set found by bisection is then solved in closed form.
pub fn kkt_project(y: &[f64], alpha: f64) -> Vec<f64> {
    let n = y.len();
    let floor = alpha / n as f64;
    if alpha >= 1.0 {
        return vec![1.0 / n as f64; n];
    }
    let mass = |c: f64| y.iter().map(|&v| (c * v).max(floor)).sum::<f64>();
    let total: f64 = y.iter().sum();
    // mass(0) = alpha <= 1 and mass(1/total) >= 1.
    let (mut lo, mut hi) = (0.0, 1.0 / total);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    let free: Vec<bool> = y.iter().map(|&v| c * v > floor).collect();
    let clipped = free.iter().filter(|&&f| !f).count();
    let free_sum: f64 = y
        .iter()
        .zip(&free)
        .filter(|(_, &f)| f)
        .map(|(v, _)| v)
        .sum();
    let c = (1.0 - clipped as f64 * floor) / free_sum;
    y.iter()
        .zip(&free)
        .map(|(&v, &f)| if f { c * v } else { floor })
        .collect()
}

/// Euclidean projection onto `{q : sum q = 1, q_i >= floor}`.
fn euclid_project(x: &[f64], floor: f64) -> Vec<f64> {
    let n = x.len();
    let radius = 1.0 - floor * n as f64;
    let z: Vec<f64> = x.iter().map(|v| v - floor).collect();
    let mut s = z.clone();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &v) in s.iter().enumerate() {
        cum += v;
        let t = (cum - radius) / (j + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    z.iter().map(|v| (v - theta).max(0.0) + floor).collect()
}

/// Generic projected-gradient minimization of `D(q || y)` over the clipped
/// simplex, with `D(q||y) = sum q log(q/y) - q + y`.
pub fn projected_gradient_project(y: &[f64], alpha: f64, iters: usize) -> Vec<f64> {
    let n = y.len();
    let floor = alpha / n as f64;
    let mut q = vec![1.0 / n as f64; n];
    for k in 0..iters {
        let step = 0.5 / (1.0 + k as f64).sqrt();
        let x: Vec<f64> = q
            .iter()
            .zip(y)
            .map(|(&qi, &yi)| qi - step * (qi.max(1e-300) / yi).ln())
            .collect();
        q = euclid_project(&x, floor);
    }
    q
}

/// Best switching-comparator payoff by enumerating every action sequence.
pub fn brute_force_oracle(gains: &[Vec<f64>], m: usize, k: usize) -> f64 {
    let t_len = gains.len();
    let n = gains[0].len();
    let mut best = f64::NEG_INFINITY;
    let mut seq = vec![0usize; t_len];
    loop {
        let switches = seq.windows(2).filter(|w| w[0] != w[1]).count();
        if switches < m {
            let v: f64 = (0..t_len).map(|t| gains[t][seq[t]]).sum();
            best = best.max(v);
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == t_len {
                return k as f64 * best;
            }
            seq[pos] += 1;
            if seq[pos] < n {
                break;
            }
            seq[pos] = 0;
            pos += 1;
        }
    }
}

/// Ranks with ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

/// Uniform point of the clipped simplex: floor plus a scaled Dirichlet(1) draw.
pub fn random_feasible<R: Rng>(rng: &mut R, n: usize, alpha: f64) -> Vec<f64> {
    let floor = alpha / n as f64;
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| floor + (1.0 - alpha) * v / s).collect()
}

/// Log-uniform positive weights over `[lo, hi]`.
pub fn log_uniform<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|_| (a + (b - a) * rng.random::<f64>()).exp())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
