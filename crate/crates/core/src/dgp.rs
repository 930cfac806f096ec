//! Synthetic observational data with a known average treatment effect.
//!
//! Covariates are iid standard normal. Treatment is Bernoulli with a logistic
//! propensity linear in the covariates. The outcome is
//! `Y = τ·A + m(W) + Σ cⱼ·A·Wⱼ + σ·ε`, where `m` is a small polynomial
//! surface and the `A·Wⱼ` terms (absent from the two stock families) let
//! tests exercise effect heterogeneity. Because every `Wⱼ` has mean zero the
//! population ATE is exactly `τ`.
//!
//! Two stock families are provided:
//!
//! | family | d  | propensity logit            | outcome surface m(W)                                  | τ   |
//! |--------|----|-----------------------------|-------------------------------------------------------|-----|
//! | DS1    | 10 | 1.5·W₁ + 0.3·W₂ − 0.3·W₃    | 2.5·W₁ + 1.0·W₂ + 0.5·W₄ + 0.8·W₁W₂ + 0.5·W₃²         | 2.0 |
//! | DS2    | 6  | 1.2·W₁ + 0.5·W₂             | 2.0·W₁ + 1.0·W₂ + 0.5·W₃²                             | 0.0 |
//!
//! Draws use three independent ChaCha streams of the dataset seed (see
//! [`crate::rng`]): covariates, treatment uniforms, outcome noise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::matrix::Matrix;
use crate::rng::{self, streams};
use crate::stats::{self, expit};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Family {
    /// Strong confounder `W₁`, ATE 2.
    Ds1,
    /// Confounded but no treatment effect.
    Ds2,
}

impl Family {
    pub fn dim(self) -> usize {
        match self {
            Family::Ds1 => 10,
            Family::Ds2 => 6,
        }
    }
}

/// One additive term of the outcome mean. Column indices are 0-based.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum OutcomeTerm {
    Linear {
        col: usize,
        coef: f64,
    },
    Interaction {
        a: usize,
        b: usize,
        coef: f64,
    },
    Square {
        col: usize,
        coef: f64,
    },
    /// `coef · A · W[col]`
    TreatmentInteraction {
        col: usize,
        coef: f64,
    },
}

impl OutcomeTerm {
    fn columns(&self) -> [usize; 2] {
        match *self {
            OutcomeTerm::Linear { col, .. }
            | OutcomeTerm::Square { col, .. }
            | OutcomeTerm::TreatmentInteraction { col, .. } => [col, col],
            OutcomeTerm::Interaction { a, b, .. } => [a, b],
        }
    }

    fn coef(&self) -> f64 {
        match *self {
            OutcomeTerm::Linear { coef, .. }
            | OutcomeTerm::Interaction { coef, .. }
            | OutcomeTerm::Square { coef, .. }
            | OutcomeTerm::TreatmentInteraction { coef, .. } => coef,
        }
    }

    #[inline]
    fn eval(&self, a: f64, w: &[f64]) -> f64 {
        match *self {
            OutcomeTerm::Linear { col, coef } => coef * w[col],
            OutcomeTerm::Interaction { a: i, b: j, coef } => coef * w[i] * w[j],
            OutcomeTerm::Square { col, coef } => coef * w[col] * w[col],
            OutcomeTerm::TreatmentInteraction { col, coef } => coef * a * w[col],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DgpSpec {
    pub family: Family,
    pub n: usize,
    pub propensity_coeffs: Vec<f64>,
    pub outcome_terms: Vec<OutcomeTerm>,
    pub treatment_effect: f64,
    pub noise_sd: f64,
}

/// Largest share of units allowed outside `[0.01, 0.99]` propensity.
pub const POSITIVITY_TAIL: f64 = 0.01;

impl DgpSpec {
    pub fn ds1(n: usize) -> Self {
        let mut c = vec![0.0; 10];
        c[0] = 1.5;
        c[1] = 0.3;
        c[2] = -0.3;
        Self {
            family: Family::Ds1,
            n,
            propensity_coeffs: c,
            outcome_terms: vec![
                OutcomeTerm::Linear { col: 0, coef: 2.5 },
                OutcomeTerm::Linear { col: 1, coef: 1.0 },
                OutcomeTerm::Linear { col: 3, coef: 0.5 },
                OutcomeTerm::Interaction { a: 0, b: 1, coef: 0.8 },
                OutcomeTerm::Square { col: 2, coef: 0.5 },
            ],
            treatment_effect: 2.0,
            noise_sd: 1.0,
        }
    }

    pub fn ds2(n: usize) -> Self {
        let mut c = vec![0.0; 6];
        c[0] = 1.2;
        c[1] = 0.5;
        Self {
            family: Family::Ds2,
            n,
            propensity_coeffs: c,
            outcome_terms: vec![
                OutcomeTerm::Linear { col: 0, coef: 2.0 },
                OutcomeTerm::Linear { col: 1, coef: 1.0 },
                OutcomeTerm::Square { col: 2, coef: 0.5 },
            ],
            treatment_effect: 0.0,
            noise_sd: 1.0,
        }
    }

    pub fn for_family(family: Family, n: usize) -> Self {
        match family {
            Family::Ds1 => Self::ds1(n),
            Family::Ds2 => Self::ds2(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    /// Share of the population whose true propensity falls outside
    /// `[0.01, 0.99]`. The logit is `N(0, ‖c‖²)` under standard normal
    /// covariates, so the tail mass is available in closed form.
    pub fn positivity_tail_mass(&self) -> f64 {
        let norm = libm::sqrt(self.propensity_coeffs.iter().map(|c| c * c).sum::<f64>());
        if norm == 0.0 {
            return 0.0;
        }
        let bound = stats::logit(0.99);
        2.0 * (1.0 - stats::normal_cdf(bound / norm))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.n == 0 {
            return Err(Error::InvalidSpec("n must be positive".into()));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "noise_sd must be finite and non-negative, got {}",
                self.noise_sd
            )));
        }
        if !self.treatment_effect.is_finite() {
            return Err(Error::InvalidSpec("treatment_effect must be finite".into()));
        }
        if self.propensity_coeffs.len() != d {
            return Err(Error::DimensionMismatch {
                what: "propensity_coeffs",
                expected: d,
                found: self.propensity_coeffs.len(),
            });
        }
        if self.propensity_coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidSpec("propensity coefficients must be finite".into()));
        }
        for term in &self.outcome_terms {
            for col in term.columns() {
                if col >= d {
                    return Err(Error::IndexOutOfRange {
                        what: "outcome term column",
                        index: col,
                        bound: d,
                    });
                }
            }
            if !term.coef().is_finite() {
                return Err(Error::InvalidSpec("outcome coefficients must be finite".into()));
            }
        }
        let tail = self.positivity_tail_mass();
        if tail > POSITIVITY_TAIL {
            return Err(Error::InvalidSpec(format!(
                "positivity violated: {:.4} of units have propensity outside [0.01, 0.99]",
                tail
            )));
        }
        Ok(())
    }

    /// True propensity `g₀(w)`.
    pub fn propensity(&self, w: &[f64]) -> f64 {
        expit(crate::matrix::dot(&self.propensity_coeffs, w))
    }

    /// True outcome regression `Q̄₀(a, w)`.
    pub fn outcome_mean(&self, a: f64, w: &[f64]) -> f64 {
        let mut y = self.treatment_effect * a;
        for t in &self.outcome_terms {
            y += t.eval(a, w);
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub w: Matrix,
    /// Treatment indicators stored as 0.0 / 1.0.
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub true_ate: Option<f64>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(w: Matrix, a: Vec<f64>, y: Vec<f64>, true_ate: Option<f64>, seed: u64) -> Result<Self> {
        let ds = Self {
            w,
            a,
            y,
            true_ate,
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.w.rows();
        if n == 0 {
            return Err(Error::TooFewRows { needed: 1, found: 0 });
        }
        for (what, len) in [("treatment vector", self.a.len()), ("outcome vector", self.y.len())] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    found: len,
                });
            }
        }
        if !self.w.is_finite() {
            return Err(Error::NonFinite("covariates"));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("outcome"));
        }
        if self.a.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidSpec("treatment must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            w: self.w.select_rows(idx),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            true_ate: self.true_ate,
            seed: self.seed,
        }
    }
}

/// A dataset together with both potential outcomes of every unit, drawn on
/// shared covariates and noise.
#[derive(Clone, Debug)]
pub struct PotentialOutcomes {
    pub dataset: Dataset,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

pub fn generate_with_potential_outcomes(spec: &DgpSpec, seed: u64) -> Result<PotentialOutcomes> {
    spec.validate()?;
    let (n, d) = (spec.n, spec.dim());
    let mut cov_rng = rng::stream(seed, streams::COVARIATES);
    let mut trt_rng = rng::stream(seed, streams::TREATMENT);
    let mut eps_rng = rng::stream(seed, streams::OUTCOME_NOISE);

    let mut w = Matrix::zeros(n, d);
    for v in w.as_mut_slice() {
        *v = cov_rng.sample(StandardNormal);
    }
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    for i in 0..n {
        let row = w.row(i);
        let u: f64 = trt_rng.random();
        let ai = if u < spec.propensity(row) { 1.0 } else { 0.0 };
        let eps: f64 = eps_rng.sample(StandardNormal);
        let noise = spec.noise_sd * eps;
        let p0 = spec.outcome_mean(0.0, row) + noise;
        let p1 = spec.outcome_mean(1.0, row) + noise;
        a.push(ai);
        y.push(if ai == 1.0 { p1 } else { p0 });
        y0.push(p0);
        y1.push(p1);
    }
    let dataset = Dataset {
        w,
        a,
        y,
        true_ate: Some(spec.treatment_effect),
        seed,
    };
    Ok(PotentialOutcomes { dataset, y0, y1 })
}

pub fn generate(spec: &DgpSpec, seed: u64) -> Result<Dataset> {
    generate_with_potential_outcomes(spec, seed).map(|p| p.dataset)
}

/// Monte-Carlo estimate of `E[Y(1) − Y(0)]` and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AteEstimate {
    pub estimate: f64,
    pub se: f64,
}

pub const ORACLE_MIN_DRAWS: usize = 100_000;

/// Simulates both potential outcomes for `m` fresh units on shared
/// covariates and noise, streaming so memory stays constant in `m`.
pub fn true_ate_oracle(spec: &DgpSpec, m: usize, seed: u64) -> Result<AteEstimate> {
    spec.validate()?;
    if m < ORACLE_MIN_DRAWS {
        return Err(Error::TooFewRows {
            needed: ORACLE_MIN_DRAWS,
            found: m,
        });
    }
    let d = spec.dim();
    let mut cov_rng = rng::stream(seed, streams::COVARIATES);
    let mut eps_rng = rng::stream(seed, streams::OUTCOME_NOISE);
    let mut w = vec![0.0; d];
    // Welford accumulation
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 0..m {
        for v in w.iter_mut() {
            *v = cov_rng.sample(StandardNormal);
        }
        let eps: f64 = eps_rng.sample(StandardNormal);
        let noise = spec.noise_sd * eps;
        let diff = (spec.outcome_mean(1.0, &w) + noise) - (spec.outcome_mean(0.0, &w) + noise);
        let delta = diff - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (diff - mean);
    }
    let var = m2 / (m - 1) as f64;
    Ok(AteEstimate {
        estimate: mean,
        se: libm::sqrt(var / m as f64),
    })
}

/// Per-column mean and standard deviation (divisor `n`).
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScalerParams {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl ScalerParams {
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::TooFewRows { needed: 1, found: 0 });
        }
        let mut mean = Vec::with_capacity(x.cols());
        let mut sd = Vec::with_capacity(x.cols());
        for j in 0..x.cols() {
            let col = x.column(j);
            let m = stats::mean(&col);
            let s = stats::population_sd(&col);
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::ConstantColumn { column: j });
            }
            mean.push(m);
            sd.push(s);
        }
        Ok(Self { mean, sd })
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        self.check_width(x)?;
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            (x.get(i, j) - self.mean[j]) / self.sd[j]
        }))
    }

    pub fn inverse_transform(&self, z: &Matrix) -> Result<Matrix> {
        self.check_width(z)?;
        Ok(Matrix::from_fn(z.rows(), z.cols(), |i, j| {
            z.get(i, j) * self.sd[j] + self.mean[j]
        }))
    }

    fn check_width(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                what: "scaler width",
                expected: self.mean.len(),
                found: x.cols(),
            });
        }
        Ok(())
    }
}

pub fn standardize(x: &Matrix) -> Result<(Matrix, ScalerParams)> {
    let params = ScalerParams::fit(x)?;
    let z = params.transform(x)?;
    Ok((z, params))
}
