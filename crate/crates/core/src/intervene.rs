//! Ablation and activation patching on the trunk, and the ablation study
//! that ties probe importance to shifts in the TMLE estimate.
//!
//! Ablation forces selected post-ReLU outputs to zero before they feed the
//! next layer. Patching overwrites selected outputs of one layer with the
//! values the same neurons take on a different input, then resumes the
//! forward pass. Both work through [`MultiTaskNet::forward_with_hook`] and
//! [`MultiTaskNet::resume`], so everything downstream is recomputed.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::causal::{tmle_from_predictions, NuisancePredictions, TmleResult};
use crate::dgp::Dataset;
use crate::matrix::Matrix;
use crate::nnet::{combined_loss, ActivationRecord, MultiTaskNet};
use crate::probes::ProbeReport;
use crate::rng::{self, streams};
use crate::{Error, Result};

/// Neurons of one trunk layer to zero out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationMask {
    pub layer: usize,
    /// Sorted, no duplicates.
    neurons: Vec<usize>,
}

impl AblationMask {
    pub fn new(layer: usize, neurons: impl IntoIterator<Item = usize>) -> Self {
        let mut neurons: Vec<usize> = neurons.into_iter().collect();
        neurons.sort_unstable();
        neurons.dedup();
        Self { layer, neurons }
    }

    pub fn neurons(&self) -> &[usize] {
        &self.neurons
    }
}

fn check_neurons(net: &MultiTaskNet, layer: usize, neurons: &[usize]) -> Result<()> {
    if layer >= net.depth() {
        return Err(Error::IndexOutOfRange {
            what: "trunk layer",
            index: layer,
            bound: net.depth(),
        });
    }
    if let Some(&bad) = neurons.iter().find(|&&j| j >= net.hidden_size()) {
        return Err(Error::IndexOutOfRange {
            what: "neuron",
            index: bad,
            bound: net.hidden_size(),
        });
    }
    Ok(())
}

fn zero_columns(h: &mut Matrix, cols: &[usize]) {
    for i in 0..h.rows() {
        let row = h.row_mut(i);
        for &j in cols {
            row[j] = 0.0;
        }
    }
}

/// Forward pass with the union of `masks` zeroed after each ReLU.
pub fn ablated_forward(net: &MultiTaskNet, w: &Matrix, a: &[f64], masks: &[AblationMask]) -> Result<ActivationRecord> {
    for m in masks {
        check_neurons(net, m.layer, &m.neurons)?;
    }
    net.forward_with_hook(w, a, &mut |l, h| {
        for m in masks.iter().filter(|m| m.layer == l) {
            zero_columns(h, &m.neurons);
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchResult {
    pub base: ActivationRecord,
    pub patched: ActivationRecord,
    /// `patched − base` outcome predictions.
    pub delta_q: Vec<f64>,
    /// `patched − base` propensities.
    pub delta_g: Vec<f64>,
}

/// Runs `base` and `source`, copies the source activations of `neurons` in
/// trunk `layer` into the base run row by row, and resumes the base pass.
/// The treatment input always stays the base one.
pub fn patched_forward(
    net: &MultiTaskNet,
    base: (&Matrix, &[f64]),
    source: (&Matrix, &[f64]),
    layer: usize,
    neurons: &[usize],
) -> Result<PatchResult> {
    check_neurons(net, layer, neurons)?;
    if base.0.rows() != source.0.rows() {
        return Err(Error::DimensionMismatch {
            what: "source rows",
            expected: base.0.rows(),
            found: source.0.rows(),
        });
    }
    let base_rec = net.forward(base.0, base.1, true)?;
    let source_rec = net.forward(source.0, source.1, true)?;
    let mut prefix: Vec<Matrix> = base_rec.layers[..=layer].to_vec();
    let src = &source_rec.layers[layer];
    let target = &mut prefix[layer];
    for i in 0..target.rows() {
        for &j in neurons {
            target.set(i, j, src.get(i, j));
        }
    }
    let patched = net.resume(prefix, base.1, &mut |_, _| {})?;
    let delta_q = patched
        .q_pred
        .iter()
        .zip(&base_rec.q_pred)
        .map(|(p, b)| p - b)
        .collect();
    let delta_g = patched
        .g_pred
        .iter()
        .zip(&base_rec.g_pred)
        .map(|(p, b)| p - b)
        .collect();
    Ok(PatchResult {
        base: base_rec,
        patched,
        delta_q,
        delta_g,
    })
}

/// How neurons are chosen from a layer's importance ranking.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum AblationScheme {
    /// The most important `fraction` of neurons.
    Top { fraction: f64 },
    /// The least important `fraction`.
    Bottom { fraction: f64 },
    /// A seeded uniform draw of `fraction` of the neurons.
    Random { fraction: f64, seed: u64 },
    /// Slice `[lo, hi)` of the neurons ordered from least to most important.
    Band { lo: f64, hi: f64 },
}

impl AblationScheme {
    /// Consecutive bands of the given width covering `[0, 1]`.
    pub fn bands(width: f64) -> Result<Vec<AblationScheme>> {
        if !(width > 0.0 && width <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "band width",
                reason: alloc::format!("{width} outside (0, 1]"),
            });
        }
        let count = libm::ceil(1.0 / width - 1e-9) as usize;
        Ok((0..count)
            .map(|i| AblationScheme::Band {
                lo: i as f64 * width,
                hi: ((i + 1) as f64 * width).min(1.0),
            })
            .collect())
    }

    pub fn name(&self) -> String {
        match *self {
            AblationScheme::Top { fraction } => alloc::format!("top{}", libm::round(fraction * 100.0)),
            AblationScheme::Bottom { fraction } => alloc::format!("bottom{}", libm::round(fraction * 100.0)),
            AblationScheme::Random { fraction, seed } => {
                alloc::format!("random{}_s{}", libm::round(fraction * 100.0), seed)
            }
            AblationScheme::Band { .. } => "band".into(),
        }
    }

    /// The importance band the scheme covers, as a slice of the ascending
    /// importance order. Random draws have none.
    pub fn band(&self) -> Option<(f64, f64)> {
        match *self {
            AblationScheme::Top { fraction } => Some((1.0 - fraction, 1.0)),
            AblationScheme::Bottom { fraction } => Some((0.0, fraction)),
            AblationScheme::Random { .. } => None,
            AblationScheme::Band { lo, hi } => Some((lo, hi)),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            AblationScheme::Top { fraction }
            | AblationScheme::Bottom { fraction }
            | AblationScheme::Random { fraction, .. } => {
                if !(0.0..=1.0).contains(&fraction) {
                    return Err(Error::InvalidParameter {
                        name: "fraction",
                        reason: alloc::format!("{fraction} outside [0, 1]"),
                    });
                }
            }
            AblationScheme::Band { lo, hi } => {
                if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                    return Err(Error::InvalidParameter {
                        name: "band",
                        reason: alloc::format!("need 0 <= lo < hi <= 1, got ({lo}, {hi})"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Neurons selected from `ranking` (most important first). A positive
    /// fraction always selects at least one neuron.
    pub fn select(&self, ranking: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let k = ranking.len();
        let count = |fraction: f64| -> usize {
            if fraction == 0.0 {
                0
            } else {
                (libm::round(fraction * k as f64) as usize).clamp(1, k)
            }
        };
        let mut chosen: Vec<usize> = match *self {
            AblationScheme::Top { fraction } => ranking[..count(fraction)].to_vec(),
            AblationScheme::Bottom { fraction } => ranking[k - count(fraction)..].to_vec(),
            AblationScheme::Random { fraction, seed } => {
                let mut all: Vec<usize> = (0..k).collect();
                all.shuffle(&mut rng::stream(seed, streams::RANDOM_ABLATION));
                all.truncate(count(fraction));
                all
            }
            AblationScheme::Band { lo, hi } => {
                let start = libm::round(lo * k as f64) as usize;
                let end = libm::round(hi * k as f64) as usize;
                // ranking is descending; band positions count from the least important
                (start..end.min(k)).map(|p| ranking[k - 1 - p]).collect()
            }
        };
        chosen.sort_unstable();
        Ok(chosen)
    }
}

/// Nuisance predictions of a (possibly ablated) network on a sample.
pub fn ablated_predictions(
    net: &MultiTaskNet,
    data: &Dataset,
    masks: &[AblationMask],
    truncation: f64,
) -> Result<NuisancePredictions> {
    let rec = ablated_forward(net, &data.w, &data.a, masks)?;
    let shared = &rec.layers[net.depth() - 1];
    let n = data.n();
    let q1 = net.q_from_shared(shared, &alloc::vec![1.0; n]);
    let q0 = net.q_from_shared(shared, &alloc::vec![0.0; n]);
    NuisancePredictions::new(rec.q_pred, q1, q0, &rec.g_pred, truncation)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutcome {
    /// Ablated minus baseline outcome-head MSE.
    pub delta_mse_q: f64,
    /// Ablated minus baseline propensity-head cross-entropy.
    pub delta_bce_g: f64,
    pub delta_ate: f64,
    pub tmle: TmleResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRecord {
    pub scheme: AblationScheme,
    pub layer: usize,
    pub neurons: Vec<usize>,
    pub outcome: AblationOutcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationStudy {
    pub baseline: TmleResult,
    pub baseline_mse_q: f64,
    pub baseline_bce_g: f64,
    pub records: Vec<AblationRecord>,
}

fn head_losses(data: &Dataset, p: &NuisancePredictions, g_raw: &[f64]) -> Result<(f64, f64)> {
    let mse = combined_loss(&p.qbar0_a, g_raw, &data.y, &data.a, 0.0)?;
    let bce = combined_loss(&p.qbar0_a, g_raw, &data.y, &data.a, 1.0)?;
    Ok((mse, bce))
}

fn evaluate(
    net: &MultiTaskNet,
    data: &Dataset,
    masks: &[AblationMask],
    truncation: f64,
) -> Result<(TmleResult, f64, f64)> {
    let rec = ablated_forward(net, &data.w, &data.a, masks)?;
    let p = ablated_predictions(net, data, masks, truncation)?;
    let (mse, bce) = head_losses(data, &p, &rec.g_pred)?;
    let tmle = tmle_from_predictions(&data.a, &data.y, &p)?;
    Ok((tmle, mse, bce))
}

/// For every probed layer and every scheme, ablates the selected neurons,
/// re-runs the full TMLE (fluctuation included) on the ablated predictions
/// and records the changes against the unablated network.
pub fn ablation_study(
    net: &MultiTaskNet,
    data: &Dataset,
    probe_reports: &[ProbeReport],
    schemes: &[AblationScheme],
    truncation: f64,
) -> Result<AblationStudy> {
    let (baseline, base_mse, base_bce) = evaluate(net, data, &[], truncation)?;
    let mut records = Vec::with_capacity(probe_reports.len() * schemes.len());
    for report in probe_reports {
        for scheme in schemes {
            let neurons = scheme.select(&report.ranking)?;
            let mask = AblationMask::new(report.layer, neurons.iter().copied());
            let (tmle, mse, bce) = evaluate(net, data, core::slice::from_ref(&mask), truncation)?;
            records.push(AblationRecord {
                scheme: *scheme,
                layer: report.layer,
                neurons,
                outcome: AblationOutcome {
                    delta_mse_q: mse - base_mse,
                    delta_bce_g: bce - base_bce,
                    delta_ate: tmle.psi - baseline.psi,
                    tmle,
                },
            });
        }
    }
    Ok(AblationStudy {
        baseline,
        baseline_mse_q: base_mse,
        baseline_bce_g: base_bce,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ranking(k: usize) -> Vec<usize> {
        // neuron j has importance k - j
        (0..k).collect()
    }

    #[test]
    fn top_bottom_random_sizes() {
        let r = ranking(30);
        assert_eq!(AblationScheme::Top { fraction: 0.1 }.select(&r).unwrap(), vec![0, 1, 2]);
        assert_eq!(
            AblationScheme::Bottom { fraction: 0.1 }.select(&r).unwrap(),
            vec![27, 28, 29]
        );
        assert_eq!(
            AblationScheme::Random { fraction: 0.1, seed: 3 }
                .select(&r)
                .unwrap()
                .len(),
            3
        );
        assert!(AblationScheme::Top { fraction: 0.0 }.select(&r).unwrap().is_empty());
        assert_eq!(AblationScheme::Top { fraction: 0.01 }.select(&r).unwrap(), vec![0]);
    }

    #[test]
    fn bands_partition_each_layer() {
        for k in [1usize, 5, 7, 13, 30] {
            let r = ranking(k);
            let mut seen = Vec::new();
            let mut sizes = Vec::new();
            for b in AblationScheme::bands(0.2).unwrap() {
                let s = b.select(&r).unwrap();
                sizes.push(s.len());
                seen.extend(s);
            }
            seen.sort_unstable();
            assert_eq!(seen, (0..k).collect::<Vec<_>>());
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1, "k={k} sizes={sizes:?}");
        }
        assert_eq!(AblationScheme::bands(0.05).unwrap().len(), 20);
    }

    #[test]
    fn top_band_holds_most_important() {
        let r = ranking(10);
        assert_eq!(
            AblationScheme::Band { lo: 0.8, hi: 1.0 }.select(&r).unwrap(),
            vec![0, 1]
        );
        assert_eq!(
            AblationScheme::Band { lo: 0.0, hi: 0.2 }.select(&r).unwrap(),
            vec![8, 9]
        );
    }

    #[test]
    fn invalid_schemes_rejected() {
        let r = ranking(4);
        assert!(AblationScheme::Band { lo: 0.5, hi: 0.5 }.select(&r).is_err());
        assert!(AblationScheme::Top { fraction: 1.5 }.select(&r).is_err());
    }

    #[test]
    fn mask_is_sorted_set() {
        let m = AblationMask::new(0, [3, 1, 3, 2]);
        assert_eq!(m.neurons(), &[1, 2, 3]);
    }
}
