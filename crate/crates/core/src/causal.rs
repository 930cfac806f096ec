//! Average treatment effect estimators built on plug-in nuisance models.
//!
//! TMLE fluctuates an initial outcome regression `Q̄⁰` along the clever
//! covariate `H(A, W) = 1{A=1}/g(W) − 1{A=0}/(1 − g(W))`, which makes the
//! empirical mean of the efficient influence curve zero, and reads its
//! standard error off that curve. G-computation, inverse probability
//! weighting and the naive difference of means are reported alongside.
//!
//! Nuisance models are anything implementing [`OutcomeRegression`] and
//! [`PropensityScore`]: trained networks, the true data-generating
//! functions, or closures wrapped in [`FnOutcome`] / [`FnPropensity`].

use alloc::vec::Vec;

use crate::dgp::{Dataset, DgpSpec};
use crate::matrix::Matrix;
use crate::stats::{self, expit, logit, pairwise_sum};
use crate::{Error, Result};

/// Default propensity truncation.
pub const DEFAULT_TRUNCATION: f64 = 0.025;
/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;

pub trait OutcomeRegression {
    /// `Q̄(aᵢ, wᵢ)` for every row.
    fn predict_outcome(&self, w: &Matrix, a: &[f64]) -> Result<Vec<f64>>;

    /// Predictions at the observed treatment, at `A = 1` and at `A = 0`.
    fn predict_outcome_all(&self, w: &Matrix, a: &[f64]) -> Result<[Vec<f64>; 3]> {
        let ones = alloc::vec![1.0; w.rows()];
        let zeros = alloc::vec![0.0; w.rows()];
        Ok([
            self.predict_outcome(w, a)?,
            self.predict_outcome(w, &ones)?,
            self.predict_outcome(w, &zeros)?,
        ])
    }
}

pub trait PropensityScore {
    /// `P(A = 1 | wᵢ)` for every row.
    fn predict_propensity(&self, w: &Matrix) -> Result<Vec<f64>>;
}

impl<T: OutcomeRegression + ?Sized> OutcomeRegression for &T {
    fn predict_outcome(&self, w: &Matrix, a: &[f64]) -> Result<Vec<f64>> {
        (**self).predict_outcome(w, a)
    }
    fn predict_outcome_all(&self, w: &Matrix, a: &[f64]) -> Result<[Vec<f64>; 3]> {
        (**self).predict_outcome_all(w, a)
    }
}

impl<T: PropensityScore + ?Sized> PropensityScore for &T {
    fn predict_propensity(&self, w: &Matrix) -> Result<Vec<f64>> {
        (**self).predict_propensity(w)
    }
}

/// Row-wise outcome model from a closure `(a, w_row) -> Q̄(a, w)`.
#[derive(Clone, Copy, Debug)]
pub struct FnOutcome<F>(pub F);

impl<F: Fn(f64, &[f64]) -> f64> OutcomeRegression for FnOutcome<F> {
    fn predict_outcome(&self, w: &Matrix, a: &[f64]) -> Result<Vec<f64>> {
        Ok((0..w.rows()).map(|i| (self.0)(a[i], w.row(i))).collect())
    }
}

/// Row-wise propensity model from a closure `w_row -> g(w)`.
#[derive(Clone, Copy, Debug)]
pub struct FnPropensity<F>(pub F);

impl<F: Fn(&[f64]) -> f64> PropensityScore for FnPropensity<F> {
    fn predict_propensity(&self, w: &Matrix) -> Result<Vec<f64>> {
        Ok((0..w.rows()).map(|i| (self.0)(w.row(i))).collect())
    }
}

/// The data-generating functions are themselves nuisance models.
impl OutcomeRegression for DgpSpec {
    fn predict_outcome(&self, w: &Matrix, a: &[f64]) -> Result<Vec<f64>> {
        Ok((0..w.rows()).map(|i| self.outcome_mean(a[i], w.row(i))).collect())
    }
}

impl PropensityScore for DgpSpec {
    fn predict_propensity(&self, w: &Matrix) -> Result<Vec<f64>> {
        Ok((0..w.rows()).map(|i| self.propensity(w.row(i))).collect())
    }
}

/// Initial nuisance estimates evaluated on a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NuisancePredictions {
    pub qbar0_a: Vec<f64>,
    pub qbar0_1: Vec<f64>,
    pub qbar0_0: Vec<f64>,
    /// Already truncated to `[truncation, 1 − truncation]`.
    pub g_hat: Vec<f64>,
    pub truncation: f64,
}

fn check_truncation(truncation: f64) -> Result<()> {
    if !(truncation > 0.0 && truncation < 0.5) {
        return Err(Error::InvalidParameter {
            name: "truncation",
            reason: alloc::format!("{truncation} outside (0, 0.5)"),
        });
    }
    Ok(())
}

fn truncate(g: &[f64], truncation: f64) -> Result<Vec<f64>> {
    g.iter()
        .map(|&p| {
            if p.is_nan() {
                Err(Error::NonFinite("propensity"))
            } else {
                Ok(p.clamp(truncation, 1.0 - truncation))
            }
        })
        .collect()
}

impl NuisancePredictions {
    pub fn new(
        qbar0_a: Vec<f64>,
        qbar0_1: Vec<f64>,
        qbar0_0: Vec<f64>,
        g_raw: &[f64],
        truncation: f64,
    ) -> Result<Self> {
        check_truncation(truncation)?;
        let n = qbar0_a.len();
        for (what, len) in [
            ("Q̄(1, W)", qbar0_1.len()),
            ("Q̄(0, W)", qbar0_0.len()),
            ("g(W)", g_raw.len()),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    found: len,
                });
            }
        }
        if qbar0_a.iter().chain(&qbar0_1).chain(&qbar0_0).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("outcome predictions"));
        }
        Ok(Self {
            qbar0_a,
            qbar0_1,
            qbar0_0,
            g_hat: truncate(g_raw, truncation)?,
            truncation,
        })
    }

    pub fn from_models(
        data: &Dataset,
        q: &impl OutcomeRegression,
        g: &impl PropensityScore,
        truncation: f64,
    ) -> Result<Self> {
        let [qa, q1, q0] = q.predict_outcome_all(&data.w, &data.a)?;
        let g_raw = g.predict_propensity(&data.w)?;
        Self::new(qa, q1, q0, &g_raw, truncation)
    }

    pub fn len(&self) -> usize {
        self.qbar0_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qbar0_a.is_empty()
    }
}

/// `Hᵢ = 1{Aᵢ=1}/gᵢ − 1{Aᵢ=0}/(1 − gᵢ)`.
pub fn clever_covariate(a: &[f64], g_hat: &[f64]) -> Result<Vec<f64>> {
    if a.len() != g_hat.len() {
        return Err(Error::DimensionMismatch {
            what: "propensity vector",
            expected: a.len(),
            found: g_hat.len(),
        });
    }
    a.iter()
        .zip(g_hat)
        .enumerate()
        .map(|(row, (&ai, &g))| {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::PropensityOnBoundary { row, value: g });
            }
            Ok(if ai == 1.0 { 1.0 / g } else { -1.0 / (1.0 - g) })
        })
        .collect()
}

/// Least-squares coefficient of `H` in `Y ~ offset(Q̄⁰) + εH`:
/// `ε̂ = Σ Hᵢ(Yᵢ − Q̄⁰ᵢ) / Σ Hᵢ²`. This is also the Gaussian MLE.
pub fn fluctuate_continuous(qbar0_a: &[f64], h: &[f64], y: &[f64]) -> Result<f64> {
    let n = y.len();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, found: n });
    }
    if qbar0_a.len() != n || h.len() != n {
        return Err(Error::DimensionMismatch {
            what: "fluctuation inputs",
            expected: n,
            found: qbar0_a.len().min(h.len()),
        });
    }
    let num: Vec<f64> = h.iter().zip(y).zip(qbar0_a).map(|((h, y), q)| h * (y - q)).collect();
    let den: Vec<f64> = h.iter().map(|h| h * h).collect();
    let den = pairwise_sum(&den);
    if den == 0.0 {
        return Err(Error::DegenerateCovariate);
    }
    Ok(pairwise_sum(&num) / den)
}

/// Comparator estimates reported next to TMLE.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Comparators {
    pub gcomp: f64,
    pub ipw: f64,
    /// `None` when one treatment arm is empty.
    pub naive: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TmleResult {
    pub psi: f64,
    pub epsilon: f64,
    /// Efficient influence curve evaluated at every row; not serialized.
    #[cfg_attr(feature = "serde", serde(skip))]
    pub eic: Vec<f64>,
    pub se: f64,
    pub ci95: (f64, f64),
    pub comparators: Comparators,
}

impl TmleResult {
    pub fn covers(&self, value: f64) -> bool {
        self.ci95.0 <= value && value <= self.ci95.1
    }
}

fn inference(psi: f64, eic: Vec<f64>, epsilon: f64, comparators: Comparators) -> TmleResult {
    let n = eic.len() as f64;
    let se = libm::sqrt(stats::population_variance(&eic) / n);
    TmleResult {
        psi,
        epsilon,
        eic,
        se,
        ci95: (psi - Z_95 * se, psi + Z_95 * se),
        comparators,
    }
}

fn comparators_from(a: &[f64], y: &[f64], p: &NuisancePredictions) -> Comparators {
    let diffs: Vec<f64> = p.qbar0_1.iter().zip(&p.qbar0_0).map(|(a, b)| a - b).collect();
    Comparators {
        gcomp: stats::mean(&diffs),
        ipw: ipw_from(a, y, &p.g_hat),
        naive: naive_from(a, y).ok(),
    }
}

/// TMLE for a continuous outcome from precomputed nuisance predictions.
///
/// Linear fluctuation, `Q̄* = Q̄⁰ + ε̂H`; `ψ̂ = mean(Q̄*(1,W) − Q̄*(0,W))`;
/// `D*ᵢ = Hᵢ(Yᵢ − Q̄*(Aᵢ,Wᵢ)) + Q̄*(1,Wᵢ) − Q̄*(0,Wᵢ) − ψ̂`;
/// `se = sqrt(Var_n(D*)/n)` with the empirical (divisor `n`) variance.
pub fn tmle_from_predictions(a: &[f64], y: &[f64], p: &NuisancePredictions) -> Result<TmleResult> {
    let n = y.len();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, found: n });
    }
    if a.len() != n || p.len() != n {
        return Err(Error::DimensionMismatch {
            what: "nuisance predictions",
            expected: n,
            found: p.len().min(a.len()),
        });
    }
    let h = clever_covariate(a, &p.g_hat)?;
    let epsilon = fluctuate_continuous(&p.qbar0_a, &h, y)?;
    let mut q_star_a = Vec::with_capacity(n);
    let mut contrast = Vec::with_capacity(n);
    for i in 0..n {
        let g = p.g_hat[i];
        q_star_a.push(p.qbar0_a[i] + epsilon * h[i]);
        let q1 = p.qbar0_1[i] + epsilon / g;
        let q0 = p.qbar0_0[i] - epsilon / (1.0 - g);
        contrast.push(q1 - q0);
    }
    let psi = stats::mean(&contrast);
    let eic: Vec<f64> = (0..n)
        .map(|i| h[i] * (y[i] - q_star_a[i]) + contrast[i] - psi)
        .collect();
    Ok(inference(psi, eic, epsilon, comparators_from(a, y, p)))
}

pub fn tmle_ate(
    data: &Dataset,
    q: &impl OutcomeRegression,
    g: &impl PropensityScore,
    truncation: f64,
) -> Result<TmleResult> {
    let p = NuisancePredictions::from_models(data, q, g, truncation)?;
    tmle_from_predictions(&data.a, &data.y, &p)
}

/// Outcome predictions are bounded this far from 0 and 1 on the logit scale.
pub const LOGISTIC_BOUND: f64 = 1e-6;

/// Logistic fluctuation for an outcome in `[0, 1]`:
/// solves `Σ Hᵢ(Yᵢ − expit(logit Q̄⁰ᵢ + εHᵢ)) = 0` by Newton's method.
pub fn fluctuate_logistic(qbar0_a: &[f64], h: &[f64], y: &[f64]) -> Result<f64> {
    let n = y.len();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, found: n });
    }
    if h.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateCovariate);
    }
    let offset: Vec<f64> = qbar0_a
        .iter()
        .map(|&q| logit(q.clamp(LOGISTIC_BOUND, 1.0 - LOGISTIC_BOUND)))
        .collect();
    let mut eps = 0.0;
    for _ in 0..100 {
        let mut score = Vec::with_capacity(n);
        let mut info = Vec::with_capacity(n);
        for i in 0..n {
            let p = expit(offset[i] + eps * h[i]);
            score.push(h[i] * (y[i] - p));
            info.push(h[i] * h[i] * p * (1.0 - p));
        }
        let (s, f) = (pairwise_sum(&score), pairwise_sum(&info));
        if f <= 0.0 || !f.is_finite() {
            return Err(Error::DegenerateCovariate);
        }
        let step = s / f;
        eps += step;
        if step.abs() < 1e-12 * (1.0 + eps.abs()) {
            break;
        }
    }
    if !eps.is_finite() {
        return Err(Error::NonFinite("logistic fluctuation"));
    }
    Ok(eps)
}

/// TMLE for an outcome bounded in `[0, 1]` with a logistic fluctuation.
pub fn tmle_binary_from_predictions(a: &[f64], y: &[f64], p: &NuisancePredictions) -> Result<TmleResult> {
    let n = y.len();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, found: n });
    }
    if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidParameter {
            name: "y",
            reason: "logistic fluctuation needs outcomes in [0, 1]".into(),
        });
    }
    let h = clever_covariate(a, &p.g_hat)?;
    let epsilon = fluctuate_logistic(&p.qbar0_a, &h, y)?;
    let bound = |q: f64| logit(q.clamp(LOGISTIC_BOUND, 1.0 - LOGISTIC_BOUND));
    let mut q_star_a = Vec::with_capacity(n);
    let mut contrast = Vec::with_capacity(n);
    for i in 0..n {
        let g = p.g_hat[i];
        q_star_a.push(expit(bound(p.qbar0_a[i]) + epsilon * h[i]));
        let q1 = expit(bound(p.qbar0_1[i]) + epsilon / g);
        let q0 = expit(bound(p.qbar0_0[i]) - epsilon / (1.0 - g));
        contrast.push(q1 - q0);
    }
    let psi = stats::mean(&contrast);
    let eic: Vec<f64> = (0..n)
        .map(|i| h[i] * (y[i] - q_star_a[i]) + contrast[i] - psi)
        .collect();
    Ok(inference(psi, eic, epsilon, comparators_from(a, y, p)))
}

pub fn tmle_ate_binary(
    data: &Dataset,
    q: &impl OutcomeRegression,
    g: &impl PropensityScore,
    truncation: f64,
) -> Result<TmleResult> {
    let p = NuisancePredictions::from_models(data, q, g, truncation)?;
    tmle_binary_from_predictions(&data.a, &data.y, &p)
}

/// G-computation: `mean(Q̄(1, Wᵢ) − Q̄(0, Wᵢ))`.
pub fn gcomp_ate(data: &Dataset, q: &impl OutcomeRegression) -> Result<f64> {
    let [_, q1, q0] = q.predict_outcome_all(&data.w, &data.a)?;
    let diffs: Vec<f64> = q1.iter().zip(&q0).map(|(a, b)| a - b).collect();
    Ok(stats::mean(&diffs))
}

fn ipw_from(a: &[f64], y: &[f64], g: &[f64]) -> f64 {
    let terms: Vec<f64> = (0..y.len())
        .map(|i| (a[i] / g[i] - (1.0 - a[i]) / (1.0 - g[i])) * y[i])
        .collect();
    stats::mean(&terms)
}

/// Horvitz–Thompson IPW: `(1/n) Σ [Aᵢ/gᵢ − (1−Aᵢ)/(1−gᵢ)]·Yᵢ` with truncated `g`.
pub fn ipw_ate(data: &Dataset, g: &impl PropensityScore, truncation: f64) -> Result<f64> {
    check_truncation(truncation)?;
    let g = truncate(&g.predict_propensity(&data.w)?, truncation)?;
    if g.len() != data.n() {
        return Err(Error::DimensionMismatch {
            what: "propensity vector",
            expected: data.n(),
            found: g.len(),
        });
    }
    Ok(ipw_from(&data.a, &data.y, &g))
}

fn naive_from(a: &[f64], y: &[f64]) -> Result<f64> {
    let treated: Vec<f64> = a.iter().zip(y).filter(|(a, _)| **a == 1.0).map(|(_, y)| *y).collect();
    let control: Vec<f64> = a.iter().zip(y).filter(|(a, _)| **a != 1.0).map(|(_, y)| *y).collect();
    if treated.is_empty() {
        return Err(Error::EmptyGroup("treated"));
    }
    if control.is_empty() {
        return Err(Error::EmptyGroup("control"));
    }
    Ok(stats::mean(&treated) - stats::mean(&control))
}

/// `mean(Y | A = 1) − mean(Y | A = 0)`.
pub fn naive_diff(data: &Dataset) -> Result<f64> {
    naive_from(&data.a, &data.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn dataset(w: Matrix, a: Vec<f64>, y: Vec<f64>) -> Dataset {
        Dataset::new(w, a, y, None, 0).unwrap()
    }

    #[test]
    fn clever_covariate_formula() {
        let h = clever_covariate(&[1.0, 0.0, 1.0], &[0.5, 0.5, 0.25]).unwrap();
        assert_eq!(h, vec![2.0, -2.0, 4.0]);
        assert!(matches!(
            clever_covariate(&[1.0], &[1.0]),
            Err(Error::PropensityOnBoundary { row: 0, .. })
        ));
    }

    #[test]
    fn fluctuation_zero_and_exact_recovery() {
        let q = [1.0, 2.0, -1.0, 0.5];
        let h = [2.0, -2.0, 4.0, -1.5];
        assert_eq!(fluctuate_continuous(&q, &h, &q).unwrap(), 0.0);
        let y: Vec<f64> = q.iter().zip(&h).map(|(q, h)| q + 0.7 * h).collect();
        assert!((fluctuate_continuous(&q, &h, &y).unwrap() - 0.7).abs() < 1e-14);
        assert_eq!(fluctuate_continuous(&q, &[0.0; 4], &y), Err(Error::DegenerateCovariate));
        assert!(matches!(
            fluctuate_continuous(&q[..1], &h[..1], &y[..1]),
            Err(Error::TooFewRows { .. })
        ));
    }

    #[test]
    fn gcomp_constant_effect() {
        let w = Matrix::from_fn(7, 2, |i, j| (i * 2 + j) as f64);
        let ds = dataset(w, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0], vec![0.0; 7]);
        assert_eq!(gcomp_ate(&ds, &FnOutcome(|a: f64, _: &[f64]| 5.0 * a)).unwrap(), 5.0);
        assert_eq!(gcomp_ate(&ds, &FnOutcome(|_: f64, w: &[f64]| w[0] * 3.0)).unwrap(), 0.0);
    }

    #[test]
    fn ipw_single_unit_and_zero_outcome() {
        let ds = dataset(Matrix::zeros(1, 1), vec![1.0], vec![1.0]);
        let half = FnPropensity(|_: &[f64]| 0.5);
        assert_eq!(ipw_ate(&ds, &half, DEFAULT_TRUNCATION).unwrap(), 2.0);
        let ds = dataset(Matrix::zeros(4, 1), vec![1.0, 0.0, 1.0, 0.0], vec![0.0; 4]);
        assert_eq!(ipw_ate(&ds, &half, DEFAULT_TRUNCATION).unwrap(), 0.0);
        assert!(ipw_ate(&ds, &half, 0.5).is_err());
    }

    #[test]
    fn naive_difference_cases() {
        let w = Matrix::zeros(4, 1);
        let ds = dataset(w.clone(), vec![1.0, 1.0, 0.0, 0.0], vec![3.0, 3.0, 1.0, 1.0]);
        assert_eq!(naive_diff(&ds).unwrap(), 2.0);
        let ds = dataset(w.clone(), vec![1.0, 1.0, 0.0, 0.0], vec![4.0; 4]);
        assert_eq!(naive_diff(&ds).unwrap(), 0.0);
        let ds = dataset(w, vec![1.0; 4], vec![4.0; 4]);
        assert_eq!(naive_diff(&ds), Err(Error::EmptyGroup("control")));
    }

    #[test]
    fn zero_residuals_leave_plugin_untouched() {
        let w = Matrix::from_fn(6, 1, |i, _| i as f64 / 5.0);
        let a = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let q = FnOutcome(|a: f64, w: &[f64]| 1.0 + 2.0 * w[0] + (1.5 + w[0]) * a);
        let y = q.predict_outcome(&w, &a).unwrap();
        let ds = dataset(w, a, y);
        let g = FnPropensity(|w: &[f64]| 0.3 + 0.4 * w[0]);
        let res = tmle_ate(&ds, &q, &g, DEFAULT_TRUNCATION).unwrap();
        assert_eq!(res.epsilon, 0.0);
        assert_eq!(res.psi, gcomp_ate(&ds, &q).unwrap());
        assert!(res.covers(res.psi));
    }

    #[test]
    fn truncation_is_applied() {
        let p = NuisancePredictions::new(vec![0.0; 3], vec![0.0; 3], vec![0.0; 3], &[0.0, 0.5, 1.0], 0.025).unwrap();
        assert_eq!(p.g_hat, vec![0.025, 0.5, 0.975]);
        assert!(NuisancePredictions::new(vec![0.0], vec![0.0], vec![0.0], &[0.5], 0.0).is_err());
    }

    #[test]
    fn logistic_fluctuation_solves_its_score() {
        let q = [0.2, 0.7, 0.4, 0.9, 0.5, 0.3];
        let a = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let g = [0.4, 0.6, 0.5, 0.7, 0.3, 0.5];
        let y = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let h = clever_covariate(&a, &g).unwrap();
        let eps = fluctuate_logistic(&q, &h, &y).unwrap();
        let score: f64 = (0..6).map(|i| h[i] * (y[i] - expit(logit(q[i]) + eps * h[i]))).sum();
        assert!(score.abs() < 1e-10);
        let p = NuisancePredictions::new(q.to_vec(), q.to_vec(), q.to_vec(), &g, 0.025).unwrap();
        let res = tmle_binary_from_predictions(&a, &y, &p).unwrap();
        assert!(stats::mean(&res.eic).abs() < 1e-10);
    }
}
