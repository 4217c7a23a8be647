mod common;

use std::collections::BTreeMap;

use itertools::Itertools;
use osmd_market::clipped_simplex::Distribution;
use osmd_market::rng::{substream, Purpose};
use osmd_market::sampler::{
    estimate_utilities, sample_from, step, Batch, SamplerState, UtilityEstimate,
};
use proptest::prelude::*;
use rand::Rng;

fn gains_map(gains: &[f64]) -> BTreeMap<usize, f64> {
    gains.iter().copied().enumerate().collect()
}

/// Probability-weighted sum of the estimator over all `n^K` ordered batches.
fn exact_expectation(p: &[f64], gains: &[f64], k: usize) -> Vec<f64> {
    let n = p.len();
    let dist = Distribution::new(p.to_vec(), 0.0).unwrap();
    let mut mean = vec![0.0; n];
    for draws in (0..k).map(|_| 0..n).multi_cartesian_product() {
        let prob: f64 = draws.iter().map(|&i| p[i]).product();
        let batch = Batch { draws, round: 0 };
        let est = estimate_utilities(&batch, &gains_map(gains), &dist, k).unwrap();
        for (m, v) in mean.iter_mut().zip(&est.values) {
            *m += prob * v;
        }
    }
    mean
}

#[test]
fn unbiased_by_enumeration() {
    let mut r = common::rng(3);
    for n in 1..=3 {
        for k in 1..=2 {
            for _ in 0..50 {
                let p = common::random_feasible(&mut r, n, 0.3);
                let gains: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
                let mean = exact_expectation(&p, &gains, k);
                assert!(
                    common::max_abs_diff(&mean, &gains) < 1e-12,
                    "{mean:?} vs {gains:?}"
                );
            }
        }
    }
}

#[test]
fn three_provider_example_by_enumeration() {
    let gains = [0.1, -0.05, 0.3];
    let mean = exact_expectation(&[0.2, 0.3, 0.5], &gains, 2);
    assert!(common::max_abs_diff(&mean, &gains) < 1e-12);
}

/// Mean and standard error of each estimator coordinate over `batches` draws.
fn monte_carlo(
    p: &[f64],
    gains: &[f64],
    k: usize,
    batches: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let n = p.len();
    let dist = Distribution::new(p.to_vec(), 0.0).unwrap();
    let map = gains_map(gains);
    let mut rng = substream(seed, 0, Purpose::Draw, 0);
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for b in 0..batches {
        let batch = sample_from(&dist, b, k, &mut rng).unwrap();
        let est = estimate_utilities(&batch, &map, &dist, k).unwrap();
        for i in 0..n {
            sum[i] += est.values[i];
            sq[i] += est.values[i] * est.values[i];
        }
    }
    let m = batches as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let se = (0..n)
        .map(|i| ((sq[i] / m - mean[i] * mean[i]) * m / (m - 1.0)).sqrt() / m.sqrt())
        .collect();
    (mean, se)
}

#[test]
fn unbiased_monte_carlo_three_providers() {
    let gains = [0.1, -0.05, 0.3];
    let (mean, se) = monte_carlo(&[0.2, 0.3, 0.5], &gains, 2, 100_000, 8);
    for i in 0..3 {
        assert!(
            (mean[i] - gains[i]).abs() <= 3.0 * se[i],
            "coord {i}: {} vs {}",
            mean[i],
            gains[i]
        );
    }
}

#[test]
fn uniform_start_and_round_counter() {
    let s = SamplerState::new(5, 0.5, 0.3).unwrap();
    assert!(s.dist.probs().iter().all(|&p| p == 0.2));
    let s = step(
        s,
        &UtilityEstimate {
            values: vec![0.1, 0.0, 0.0, 0.0, -0.2],
        },
    )
    .unwrap();
    assert_eq!(s.round, 1);
    assert_eq!(s.hold().round, 2);
}

#[test]
fn same_seed_same_trajectory() {
    let run = |seed: u64| {
        let mut s = SamplerState::new(6, 0.2, 0.5).unwrap();
        let gains: Vec<f64> = (0..6).map(|i| i as f64 / 10.0 - 0.2).collect();
        let mut out = Vec::new();
        for t in 0..50 {
            let b = sample_from(
                &s.dist,
                t,
                3,
                &mut substream(seed, t as u64, Purpose::Draw, 0),
            )
            .unwrap();
            let est = estimate_utilities(&b, &gains_map(&gains), &s.dist, 3).unwrap();
            s = step(s, &est).unwrap();
            out.push(s.dist.probs().to_vec());
        }
        out
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

proptest! {
    #[test]
    fn batch_shape(n in 1usize..20, k in 1usize..10, seed in any::<u64>()) {
        let dist = Distribution::uniform(n, 0.5).unwrap();
        let b = sample_from(&dist, 0, k, &mut substream(seed, 0, Purpose::Draw, 0)).unwrap();
        prop_assert_eq!(b.draws.len(), k);
        prop_assert!(b.draws.iter().all(|&i| i < n));
        prop_assert_eq!(b.multiplicities().values().sum::<usize>(), k);
    }

    #[test]
    fn estimate_zero_outside_batch(n in 2usize..20, k in 1usize..6, seed in any::<u64>()) {
        let dist = Distribution::uniform(n, 0.5).unwrap();
        let b = sample_from(&dist, 0, k, &mut substream(seed, 0, Purpose::Draw, 0)).unwrap();
        let gains: BTreeMap<usize, f64> = b.draws.iter().map(|&i| (i, 0.5)).collect();
        let est = estimate_utilities(&b, &gains, &dist, k).unwrap();
        for i in 0..n {
            if !b.draws.contains(&i) {
                prop_assert_eq!(est.values[i], 0.0);
            }
        }
    }
}
