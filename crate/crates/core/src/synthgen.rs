//! Synthetic data from edited networks.
//!
//! Two parameter groups of a trained net have a direct causal reading: the
//! first trunk layer's weights on one covariate (how strongly that covariate
//! drives everything downstream, in particular treatment assignment) and the
//! outcome head's weight on the treatment input (the effect of treatment).
//! Scaling them and resampling treatments and outcomes on the real
//! covariates gives datasets whose confounding or effect size is dialled up
//! or down in a known way.
//!
//! Sweeps reuse the same uniforms for treatment draws and the same normal
//! noise for outcomes at every factor, so differences between rows come
//! from the scaled parameters alone.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::causal::{naive_diff, tmle_ate, OutcomeRegression, PropensityScore, TmleResult};
use crate::dgp::Dataset;
use crate::matrix::Matrix;
use crate::nnet::MultiTaskNet;
use crate::rng::{self, streams};
use crate::stats;
use crate::{Error, Result};

pub const DEFAULT_ALPHAS: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];
pub const DEFAULT_BETAS: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ParamTarget {
    /// First trunk layer weights reading covariate `input_idx`.
    ConfounderColumn(usize),
    /// Outcome head weight on the treatment input.
    TreatmentSlot,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamSelector {
    pub target: ParamTarget,
    pub description: String,
}

impl ParamSelector {
    pub fn confounder(input_idx: usize) -> Self {
        Self {
            target: ParamTarget::ConfounderColumn(input_idx),
            description: alloc::format!("first-layer weights on W{}", input_idx + 1),
        }
    }

    pub fn treatment() -> Self {
        Self {
            target: ParamTarget::TreatmentSlot,
            description: "outcome-head weight on A".into(),
        }
    }
}

/// Copy of `net` with the selected weights multiplied by `factor`.
pub fn scale_params(net: &MultiTaskNet, selector: &ParamSelector, factor: f64) -> Result<MultiTaskNet> {
    if !factor.is_finite() {
        return Err(Error::NonFinite("scale factor"));
    }
    let mut out = net.clone();
    match selector.target {
        ParamTarget::ConfounderColumn(idx) => {
            if idx >= net.input_dim() {
                return Err(Error::IndexOutOfRange {
                    what: "confounder column",
                    index: idx,
                    bound: net.input_dim(),
                });
            }
            let w = &mut out.trunk[0].weight;
            for r in 0..w.rows() {
                w.set(r, idx, w.get(r, idx) * factor);
            }
        }
        ParamTarget::TreatmentSlot => {
            let slot = net.hidden_size();
            let w = &mut out.q_head.weight;
            w.set(0, slot, w.get(0, slot) * factor);
        }
    }
    Ok(out)
}

/// `A′ᵢ = 1[uᵢ < gᵢ]` with uniforms from the treatment stream of `seed`.
pub fn sample_treatments_from(g: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, streams::TREATMENT);
    g.iter()
        .map(|&p| {
            let u: f64 = rng.random();
            if u < p {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

pub fn sample_treatments(g_net: &impl PropensityScore, w: &Matrix, seed: u64) -> Result<Vec<f64>> {
    let g = g_net.predict_propensity(w)?;
    if let Some(bad) = g.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidParameter {
            name: "propensity",
            reason: alloc::format!("{bad} outside [0, 1]"),
        });
    }
    Ok(sample_treatments_from(&g, seed))
}

/// `Y′ᵢ = q(A′ᵢ, Wᵢ) + sigma_hat·εᵢ` with ε from the outcome-noise stream.
pub fn sample_outcomes(
    q_net: &impl OutcomeRegression,
    w: &Matrix,
    a: &[f64],
    sigma_hat: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(sigma_hat >= 0.0) || !sigma_hat.is_finite() {
        return Err(Error::InvalidParameter {
            name: "sigma_hat",
            reason: "must be finite and non-negative".into(),
        });
    }
    let mean = q_net.predict_outcome(w, a)?;
    let mut rng = rng::stream(seed, streams::OUTCOME_NOISE);
    Ok(mean
        .into_iter()
        .map(|m| {
            let e: f64 = rng.sample(StandardNormal);
            m + sigma_hat * e
        })
        .collect())
}

/// Population sd of `Y − q(A, W)`.
pub fn residual_sd(q_net: &impl OutcomeRegression, data: &Dataset) -> Result<f64> {
    let pred = q_net.predict_outcome(&data.w, &data.a)?;
    let res: Vec<f64> = data.y.iter().zip(&pred).map(|(y, p)| y - p).collect();
    Ok(stats::population_sd(&res))
}

/// `mean(q(1, W) − q(0, W))`.
pub fn plugin_ate(q_net: &impl OutcomeRegression, w: &Matrix) -> Result<f64> {
    let n = w.rows();
    let [_, q1, q0] = q_net.predict_outcome_all(w, &alloc::vec![0.0; n])?;
    let d: Vec<f64> = q1.iter().zip(&q0).map(|(a, b)| a - b).collect();
    Ok(stats::mean(&d))
}

/// Networks a sweep starts from; the same net may play both roles.
#[derive(Clone, Copy, Debug)]
pub struct BaseNets<'a> {
    pub q_net: &'a MultiTaskNet,
    pub g_net: &'a MultiTaskNet,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepRow {
    pub factor: f64,
    pub naive: f64,
    pub plugin_ate: f64,
    pub tmle: TmleResult,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepReport {
    pub factors: Vec<f64>,
    pub rows: Vec<SweepRow>,
    /// TMLE estimate of the factor-1 row.
    pub baseline_psi: f64,
}

fn check_grid(grid: &[f64], required: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    for r in required {
        if !grid.contains(r) {
            return Err(Error::InvalidParameter {
                name: "grid",
                reason: alloc::format!("must contain {r}"),
            });
        }
    }
    if let Some(bad) = grid.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "grid",
            reason: alloc::format!("non-finite factor {bad}"),
        });
    }
    Ok(())
}

/// One generated dataset: treatments from `g_net`, outcomes from `q_net`.
pub fn generate_from_nets(
    q_net: &MultiTaskNet,
    g_net: &MultiTaskNet,
    w: &Matrix,
    sigma_hat: f64,
    seed: u64,
) -> Result<Dataset> {
    let a = sample_treatments(g_net, w, seed)?;
    let y = sample_outcomes(q_net, w, &a, sigma_hat, seed)?;
    let truth = plugin_ate(q_net, w)?;
    Dataset::new(w.clone(), a, y, Some(truth), seed)
}

fn finish(factors: &[f64], rows: Vec<SweepRow>) -> SweepReport {
    let baseline_psi = rows.iter().find(|r| r.factor == 1.0).map_or(f64::NAN, |r| r.tmle.psi);
    SweepReport {
        factors: factors.to_vec(),
        rows,
        baseline_psi,
    }
}

/// Scales the confounder's first-layer weights in a copy of the propensity
/// net by each α, draws treatments from it and outcomes from the original
/// outcome net. Returns the report and the generated datasets.
pub fn confounding_sweep(
    nets: BaseNets<'_>,
    w: &Matrix,
    confounder: usize,
    alphas: &[f64],
    sigma_hat: f64,
    truncation: f64,
    seed: u64,
) -> Result<(SweepReport, Vec<Dataset>)> {
    check_grid(alphas, &[1.0])?;
    let selector = ParamSelector::confounder(confounder);
    let plugin = plugin_ate(nets.q_net, w)?;
    let mut rows = Vec::with_capacity(alphas.len());
    let mut datasets = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let g_scaled = scale_params(nets.g_net, &selector, alpha)?;
        let data = generate_from_nets(nets.q_net, &g_scaled, w, sigma_hat, seed)?;
        rows.push(SweepRow {
            factor: alpha,
            naive: naive_diff(&data)?,
            plugin_ate: plugin,
            tmle: tmle_ate(&data, nets.q_net, &g_scaled, truncation)?,
        });
        datasets.push(data);
    }
    Ok((finish(alphas, rows), datasets))
}

/// Scales the treatment slot of a copy of the outcome net by each β, draws
/// treatments from the original propensity net and outcomes from the scaled
/// net.
pub fn effect_sweep(
    nets: BaseNets<'_>,
    w: &Matrix,
    betas: &[f64],
    sigma_hat: f64,
    truncation: f64,
    seed: u64,
) -> Result<(SweepReport, Vec<Dataset>)> {
    check_grid(betas, &[0.0, 1.0])?;
    let selector = ParamSelector::treatment();
    let mut rows = Vec::with_capacity(betas.len());
    let mut datasets = Vec::with_capacity(betas.len());
    for &beta in betas {
        let q_scaled = scale_params(nets.q_net, &selector, beta)?;
        let data = generate_from_nets(&q_scaled, nets.g_net, w, sigma_hat, seed)?;
        rows.push(SweepRow {
            factor: beta,
            naive: naive_diff(&data)?,
            plugin_ate: plugin_ate(&q_scaled, w)?,
            tmle: tmle_ate(&data, &q_scaled, nets.g_net, truncation)?,
        });
        datasets.push(data);
    }
    Ok((finish(betas, rows), datasets))
}
