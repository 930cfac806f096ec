//! Linear probes on trunk activations.
//!
//! A probe is an ordinary least-squares regression of a scalar covariate on
//! one layer's activations. Activation columns are standardized on the
//! training split first, so the magnitude of a coefficient is comparable
//! across neurons and serves as that neuron's importance. Columns that are
//! constant on the training split (dead ReLUs) are left out of the fit and
//! get coefficient zero. Accuracy is the held-out `R²` on a seeded 80/20
//! split.

use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::{cholesky_solve, Matrix};
use crate::nnet::MultiTaskNet;
use crate::rng;
use crate::stats;
use crate::{Error, Result};

pub const PROBE_HELD_OUT_FRACTION: f64 = 0.2;
/// Ridge added to the normal matrix when it is not positive definite.
pub const RIDGE_FALLBACK: f64 = 1e-6;
pub const IMPORTANCE_THRESHOLDS: [f64; 3] = [0.50, 0.75, 0.95];

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbeReport {
    /// Trunk layer index (0 = h1).
    pub layer: usize,
    /// Held-out coefficient of determination.
    pub r2: f64,
    /// Coefficients on standardized activations.
    pub coefficients: Vec<f64>,
    /// Coefficients on the raw activation scale.
    pub raw_coefficients: Vec<f64>,
    pub intercept: f64,
    /// `|coefficients|`.
    pub importance: Vec<f64>,
    /// Neuron indices sorted by importance, largest first, ties by index.
    pub ranking: Vec<usize>,
    /// Whether the ridge fallback was needed.
    pub ridge: bool,
}

/// Rows used to fit and to score a probe over `n` samples.
pub fn probe_split(n: usize, split_seed: u64) -> (Vec<usize>, Vec<usize>) {
    rng::train_test_split(n, PROBE_HELD_OUT_FRACTION, split_seed)
}

/// Indices sorted by descending weight; equal weights keep ascending index.
pub fn rank_descending(weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order
}

pub fn fit_probe(acts: &Matrix, target: &[f64], split_seed: u64) -> Result<ProbeReport> {
    let (n, k) = (acts.rows(), acts.cols());
    if target.len() != n {
        return Err(Error::DimensionMismatch {
            what: "probe target",
            expected: n,
            found: target.len(),
        });
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe target"));
    }
    if !acts.is_finite() {
        return Err(Error::NonFinite("probe activations"));
    }
    let (train, test) = probe_split(n, split_seed);
    if train.len() <= k + 1 {
        return Err(Error::TooFewRows {
            needed: k + 2,
            found: train.len(),
        });
    }

    let x_train = acts.select_rows(&train);
    let y_train: Vec<f64> = train.iter().map(|&i| target[i]).collect();
    let mut mean = vec![0.0; k];
    let mut sd = vec![0.0; k];
    let mut active = Vec::new();
    for j in 0..k {
        let col = x_train.column(j);
        mean[j] = stats::mean(&col);
        sd[j] = stats::population_sd(&col);
        if sd[j] > 1e-12 * (1.0 + mean[j].abs()) {
            active.push(j);
        }
    }

    let y_mean = stats::mean(&y_train);
    let z = Matrix::from_fn(train.len(), active.len(), |i, c| {
        let j = active[c];
        (x_train.get(i, j) - mean[j]) / sd[j]
    });
    let yc: Vec<f64> = y_train.iter().map(|y| y - y_mean).collect();
    let mut gram = z.transposed_matmul(&z);
    let yc_m = Matrix::from_vec(yc.len(), 1, yc).expect("column vector");
    let rhs = z.transposed_matmul(&yc_m).into_vec();
    let mut ridge = false;
    let beta_active = match cholesky_solve(&gram, &rhs) {
        Some(b) => b,
        None => {
            ridge = true;
            for j in 0..active.len() {
                gram.set(j, j, gram.get(j, j) + RIDGE_FALLBACK);
            }
            cholesky_solve(&gram, &rhs).ok_or(Error::NonFinite("probe normal equations"))?
        }
    };

    let mut coefficients = vec![0.0; k];
    let mut raw = vec![0.0; k];
    for (c, &j) in active.iter().enumerate() {
        coefficients[j] = beta_active[c];
        raw[j] = beta_active[c] / sd[j];
    }

    let y_test: Vec<f64> = test.iter().map(|&i| target[i]).collect();
    let test_mean = stats::mean(&y_test);
    let mut res = Vec::with_capacity(test.len());
    let mut tot = Vec::with_capacity(test.len());
    for (&i, &y) in test.iter().zip(&y_test) {
        let row = acts.row(i);
        let pred = y_mean
            + active
                .iter()
                .map(|&j| coefficients[j] * (row[j] - mean[j]) / sd[j])
                .sum::<f64>();
        res.push((y - pred) * (y - pred));
        tot.push((y - test_mean) * (y - test_mean));
    }
    let ss_tot = stats::pairwise_sum(&tot);
    if ss_tot == 0.0 {
        return Err(Error::ConstantTarget);
    }
    let r2 = 1.0 - stats::pairwise_sum(&res) / ss_tot;
    let importance: Vec<f64> = coefficients.iter().map(|c| c.abs()).collect();
    let ranking = rank_descending(&importance);
    Ok(ProbeReport {
        layer: 0,
        r2,
        coefficients,
        raw_coefficients: raw,
        intercept: y_mean,
        importance,
        ranking,
        ridge,
    })
}

/// Probes every trunk layer (h1 through h_shared) for covariate column
/// `target_index`, using the same split for all layers.
pub fn probe_all_layers(
    net: &MultiTaskNet,
    w: &Matrix,
    target_index: usize,
    split_seed: u64,
) -> Result<Vec<ProbeReport>> {
    if target_index >= w.cols() {
        return Err(Error::IndexOutOfRange {
            what: "probe target column",
            index: target_index,
            bound: w.cols(),
        });
    }
    let target = w.column(target_index);
    let layers = net.trunk_activations(w)?;
    layers
        .iter()
        .enumerate()
        .map(|(l, acts)| {
            let mut r = fit_probe(acts, &target, split_seed)?;
            r.layer = l;
            Ok(r)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImportanceCurve {
    /// Running share of total importance over neurons in ranking order.
    pub cumulative: Vec<f64>,
    /// `(threshold, neurons needed)` for each of [`IMPORTANCE_THRESHOLDS`].
    pub counts: Vec<(f64, usize)>,
}

impl ImportanceCurve {
    pub fn count(&self, threshold: f64) -> Option<usize> {
        self.counts.iter().find(|(t, _)| *t == threshold).map(|(_, c)| *c)
    }
}

/// Smallest prefix of `cumulative` whose share reaches `threshold`.
fn neurons_needed(cumulative: &[f64], threshold: f64) -> usize {
    // shares are sums of floats; absorb rounding at exact thresholds
    cumulative
        .iter()
        .position(|&c| c >= threshold - 1e-12)
        .map_or(cumulative.len(), |p| p + 1)
}

pub fn importance_curve_from(importance: &[f64], ranking: &[usize]) -> Result<ImportanceCurve> {
    let total: f64 = importance.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroImportance);
    }
    let mut running = 0.0;
    let cumulative: Vec<f64> = ranking
        .iter()
        .map(|&j| {
            running += importance[j];
            running / total
        })
        .collect();
    let counts = IMPORTANCE_THRESHOLDS
        .iter()
        .map(|&t| (t, neurons_needed(&cumulative, t)))
        .collect();
    Ok(ImportanceCurve { cumulative, counts })
}

pub fn importance_curve(report: &ProbeReport) -> Result<ImportanceCurve> {
    importance_curve_from(&report.importance, &report.ranking)
}
