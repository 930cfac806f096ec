mod common;

use common::{normal_matrix, random_net};
use proptest::prelude::*;
use tmle_lens_core::probes::{
    fit_probe, importance_curve, importance_curve_from, probe_all_layers, probe_split, rank_descending,
};
use tmle_lens_core::{Error, Matrix};

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

#[test]
fn probe_matches_normal_equation_solve() {
    let acts = normal_matrix(40, 3, 21);
    let target: Vec<f64> = (0..40)
        .map(|i| 0.5 + 2.0 * acts.get(i, 0) - acts.get(i, 2) + 0.3 * ((i * 7 % 11) as f64 / 11.0 - 0.5))
        .collect();
    let rep = fit_probe(&acts, &target, 4).unwrap();

    // raw-scale OLS with intercept on the training rows
    let (train, test) = probe_split(40, 4);
    let mut xtx = vec![vec![0.0; 4]; 4];
    let mut xty = vec![0.0; 4];
    for &i in &train {
        let x = [1.0, acts.get(i, 0), acts.get(i, 1), acts.get(i, 2)];
        for r in 0..4 {
            for c in 0..4 {
                xtx[r][c] += x[r] * x[c];
            }
            xty[r] += x[r] * target[i];
        }
    }
    let beta = solve(xtx, xty);
    for j in 0..3 {
        assert!((rep.raw_coefficients[j] - beta[j + 1]).abs() < 1e-9, "coef {j}");
    }
    let pred = |i: usize| beta[0] + (0..3).map(|j| beta[j + 1] * acts.get(i, j)).sum::<f64>();
    let m = test.iter().map(|&i| target[i]).sum::<f64>() / test.len() as f64;
    let ss_res: f64 = test.iter().map(|&i| (target[i] - pred(i)).powi(2)).sum();
    let ss_tot: f64 = test.iter().map(|&i| (target[i] - m).powi(2)).sum();
    assert!((rep.r2 - (1.0 - ss_res / ss_tot)).abs() < 1e-9);
    assert_eq!(rep.ranking[0], 0);
    assert!(!rep.ridge);
}

#[test]
fn dead_neurons_get_zero_weight() {
    let mut acts = normal_matrix(60, 4, 2);
    for i in 0..60 {
        acts.set(i, 1, 0.0);
    }
    let target: Vec<f64> = (0..60).map(|i| acts.get(i, 0) + acts.get(i, 3)).collect();
    let rep = fit_probe(&acts, &target, 1).unwrap();
    assert_eq!(rep.coefficients[1], 0.0);
    assert_eq!(*rep.ranking.last().unwrap(), 1);
    assert!(rep.r2 > 0.999);
}

#[test]
fn duplicated_columns_fall_back_to_ridge() {
    let base = normal_matrix(50, 2, 5);
    let acts = Matrix::from_fn(50, 3, |i, j| base.get(i, j.min(1)));
    let target: Vec<f64> = (0..50).map(|i| base.get(i, 0) - base.get(i, 1)).collect();
    let rep = fit_probe(&acts, &target, 0).unwrap();
    assert!(rep.ridge);
    assert!(rep.r2 > 0.99);
}

#[test]
fn degenerate_inputs_are_reported() {
    let acts = normal_matrix(30, 2, 1);
    assert!(matches!(fit_probe(&acts, &[1.0; 30], 0), Err(Error::ConstantTarget)));
    assert!(matches!(
        fit_probe(&acts, &[1.0; 29], 0),
        Err(Error::DimensionMismatch { .. })
    ));
    let tiny = normal_matrix(4, 3, 1);
    assert!(matches!(
        fit_probe(&tiny, &[1.0, 2.0, 3.0, 4.0], 0),
        Err(Error::TooFewRows { .. })
    ));
    assert!(matches!(
        importance_curve_from(&[0.0, 0.0], &[0, 1]),
        Err(Error::ZeroImportance)
    ));
    let net = random_net(3, 2, 4, 0);
    assert!(probe_all_layers(&net, &normal_matrix(50, 3, 0), 3, 0).is_err());
}

#[test]
fn curve_counts_for_known_importance() {
    let imp = [4.0, 3.0, 2.0, 1.0];
    let curve = importance_curve_from(&imp, &rank_descending(&imp)).unwrap();
    assert_eq!(curve.cumulative, vec![0.4, 0.7, 0.9, 1.0]);
    assert_eq!(curve.count(0.5), Some(2));
    assert_eq!(curve.count(0.75), Some(3));
    assert_eq!(curve.count(0.95), Some(4));
    let flat = importance_curve_from(&[1.0, 1.0], &[0, 1]).unwrap();
    assert_eq!(flat.count(0.5), Some(1), "an exact threshold is reached, not passed");
}

#[test]
fn every_layer_is_probed_with_one_split() {
    let net = random_net(3, 3, 6, 7);
    let w = normal_matrix(120, 3, 8);
    let reps = probe_all_layers(&net, &w, 0, 9).unwrap();
    assert_eq!(reps.iter().map(|r| r.layer).collect::<Vec<_>>(), vec![0, 1, 2]);
    for r in &reps {
        let again = fit_probe(&net.trunk_activations(&w).unwrap()[r.layer], &w.column(0), 9).unwrap();
        assert_eq!(again.coefficients, r.coefficients);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ranking_is_a_sorted_permutation(weights in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let r = rank_descending(&weights);
        let mut seen = r.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..weights.len()).collect::<Vec<_>>());
        for p in r.windows(2) {
            prop_assert!(weights[p[0]] > weights[p[1]] || (weights[p[0]] == weights[p[1]] && p[0] < p[1]));
        }
    }

    #[test]
    fn curve_is_monotone_and_counts_ordered(seed in 0u64..500) {
        let acts = normal_matrix(80, 6, seed);
        let target: Vec<f64> = (0..80).map(|i| acts.get(i, seed as usize % 6) + 0.1 * acts.get(i, 0)).collect();
        let rep = fit_probe(&acts, &target, seed).unwrap();
        let curve = importance_curve(&rep).unwrap();
        prop_assert!(curve.cumulative.windows(2).all(|p| p[0] <= p[1] + 1e-15));
        prop_assert!((curve.cumulative.last().unwrap() - 1.0).abs() < 1e-12);
        let c: Vec<usize> = curve.counts.iter().map(|x| x.1).collect();
        prop_assert!(c[0] <= c[1] && c[1] <= c[2] && c[2] <= 6);
        prop_assert!(rep.r2 <= 1.0);
    }
}
