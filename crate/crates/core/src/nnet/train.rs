use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::backprop::{backward, LossBreakdown};
use super::MultiTaskNet;
use crate::dgp::Dataset;
use crate::optim::Adam;
use crate::rng::{self, streams};
use crate::stats;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the propensity cross-entropy; the outcome MSE gets `1 − alpha`.
    pub alpha: f64,
    pub test_fraction: f64,
    pub seed: u64,
    /// Fit the outcome head against `(Y − mean) / sd` of the training split
    /// and fold that affine map back into the head afterwards.
    /// Off by default.
    #[cfg_attr(feature = "serde", serde(default))]
    pub standardize_outcome: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 3e-4,
            alpha: 0.5,
            test_fraction: 0.2,
            seed: 42,
            standardize_outcome: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter {
                name: "batch_size",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter {
                name: "learning_rate",
                reason: "must be finite and non-negative".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                reason: "must lie in [0, 1]".into(),
            });
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidParameter {
                name: "test_fraction",
                reason: "must lie in (0, 1)".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLosses {
    /// 0 for the untrained network.
    pub epoch: usize,
    pub train_total: f64,
    pub val_total: f64,
    pub val_mse: f64,
    pub val_bce: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Entry 0 is the untrained network; entry `e` follows epoch `e`.
    pub history: Vec<EpochLosses>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// `(mean, sd)` the outcome was standardized with during training, or
    /// `(0, 1)`. Losses in `history` are on that training scale.
    pub outcome_scale: (f64, f64),
}

impl TrainReport {
    pub fn initial(&self) -> &EpochLosses {
        &self.history[0]
    }

    pub fn last(&self) -> &EpochLosses {
        self.history.last().expect("history always holds the untrained entry")
    }
}

fn eval(net: &MultiTaskNet, ds: &Dataset, alpha: f64) -> Result<LossBreakdown> {
    let rec = net.forward(&ds.w, &ds.a, false)?;
    let total = super::combined_loss(&rec.q_pred, &rec.g_pred, &ds.y, &ds.a, alpha)?;
    let mse = super::combined_loss(&rec.q_pred, &rec.g_pred, &ds.y, &ds.a, 0.0)?;
    let bce = super::combined_loss(&rec.q_pred, &rec.g_pred, &ds.y, &ds.a, 1.0)?;
    Ok(LossBreakdown { total, mse, bce })
}

/// Trains on covariates that are already standardized.
///
/// Minibatch Adam on the combined loss; epoch `e` shuffles the training
/// rows with stream `SHUFFLE_BASE + e` of `config.seed`, so the first `k`
/// epochs of any run are identical for the same seed.
pub fn train(net: &MultiTaskNet, data: &Dataset, config: &TrainConfig) -> Result<(MultiTaskNet, TrainReport)> {
    config.validate()?;
    net.validate()?;
    data.validate()?;
    if data.n() < 2 {
        return Err(Error::TooFewRows {
            needed: 2,
            found: data.n(),
        });
    }
    let (train_idx, val_idx) = rng::train_test_split(data.n(), config.test_fraction, config.seed);
    let mut train_set = data.select_rows(&train_idx);
    let mut val_set = data.select_rows(&val_idx);
    let outcome_scale = if config.standardize_outcome {
        let m = stats::mean(&train_set.y);
        let sd = stats::population_sd(&train_set.y);
        if !(sd > 0.0) {
            return Err(Error::ConstantColumn { column: data.dim() });
        }
        for y in train_set.y.iter_mut().chain(val_set.y.iter_mut()) {
            *y = (*y - m) / sd;
        }
        (m, sd)
    } else {
        (0.0, 1.0)
    };

    let mut net = net.clone();
    let mut params = net.parameters();
    let mut adam = Adam::new(config.learning_rate, params.len());

    let record = |net: &MultiTaskNet, epoch: usize| -> Result<EpochLosses> {
        let tr = eval(net, &train_set, config.alpha)?;
        let va = eval(net, &val_set, config.alpha)?;
        if !tr.total.is_finite() || !va.total.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        Ok(EpochLosses {
            epoch,
            train_total: tr.total,
            val_total: va.total,
            val_mse: va.mse,
            val_bce: va.bce,
        })
    };

    let mut history = Vec::with_capacity(config.epochs + 1);
    history.push(record(&net, 0)?);

    let mut order: Vec<usize> = (0..train_set.n()).collect();
    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, streams::SHUFFLE_BASE + epoch as u64));
        for batch in order.chunks(config.batch_size) {
            let b = train_set.select_rows(batch);
            let (loss, grads) = match backward(&net, &b.w, &b.a, &b.y, config.alpha) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            let flat = grads.flatten();
            if !loss.total.is_finite() || flat.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            adam.step(&mut params, &flat);
            net.set_parameters(&params)?;
        }
        history.push(record(&net, epoch)?);
    }
    if config.standardize_outcome {
        let (m, sd) = outcome_scale;
        for w in net.q_head.weight.as_mut_slice() {
            *w *= sd;
        }
        net.q_head.bias[0] = net.q_head.bias[0] * sd + m;
    }
    Ok((
        net,
        TrainReport {
            history,
            train_indices: train_idx,
            val_indices: val_idx,
            outcome_scale,
        },
    ))
}
