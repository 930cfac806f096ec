use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{coder_gradients, coder_loss, SaeConfig, SaeVariant, SparseCoder};
use crate::matrix::Matrix;
use crate::optim::Adam;
use crate::rng::{self, streams};
use crate::stats;
use crate::{Error, Result};

/// Lower bound kept on learned JumpReLU thresholds.
const MIN_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SaeTrainReport {
    /// Full-data loss before training, then after each epoch.
    pub loss_curve: Vec<f64>,
    /// Mean squared error per target entry.
    pub reconstruction_mse: f64,
    pub mean_l0: f64,
    /// Mean per-column variance of the target.
    pub target_variance: f64,
}

/// Mean per-column population variance.
pub fn mean_variance(x: &Matrix) -> f64 {
    let v: Vec<f64> = (0..x.cols())
        .map(|j| stats::population_variance(&x.column(j)))
        .collect();
    stats::mean(&v)
}

pub fn reconstruction_mse(model: &SparseCoder, input: &Matrix, target: &Matrix) -> Result<f64> {
    let r = model.reconstruct(input)?;
    if r.rows() != target.rows() || r.cols() != target.cols() {
        return Err(Error::DimensionMismatch {
            what: "target shape",
            expected: r.rows() * r.cols(),
            found: target.rows() * target.cols(),
        });
    }
    let sq: Vec<f64> = r
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    Ok(stats::mean(&sq))
}

/// Average number of nonzero latents per row.
pub fn mean_l0(model: &SparseCoder, input: &Matrix) -> Result<f64> {
    let f = model.encode(input)?;
    let counts: Vec<f64> = (0..f.rows())
        .map(|i| f.row(i).iter().filter(|v| **v != 0.0).count() as f64)
        .collect();
    Ok(stats::mean(&counts))
}

fn column_means(x: &Matrix) -> Vec<f64> {
    (0..x.cols()).map(|j| stats::mean(&x.column(j))).collect()
}

/// Random unit decoder columns and a decoder bias at the target mean. The
/// encoder is the decoder transpose for autoencoders, Glorot-uniform
/// otherwise, with its bias centring the input mean.
fn initialize(config: &SaeConfig, input: &Matrix, target: &Matrix, tied: bool) -> SparseCoder {
    let (k, m, out) = (config.input_dim, config.latent_dim, target.cols());
    let mut model = SparseCoder::zeros(k, m, out, config.variant);
    let mut rng = rng::stream(config.seed, streams::INIT);
    for v in model.decoder.weight.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    model.normalize_decoder();
    if tied {
        model.encoder.weight = model.decoder.weight.transpose();
    } else {
        let limit = libm::sqrt(6.0 / (k + m) as f64);
        for v in model.encoder.weight.as_mut_slice() {
            *v = rng.random_range(-limit..limit);
        }
    }
    let in_mean = column_means(input);
    for j in 0..m {
        model.encoder.bias[j] = -(0..k).map(|c| model.encoder.weight.get(j, c) * in_mean[c]).sum::<f64>();
    }
    model.decoder.bias = column_means(target);
    model
}

fn fit(config: &SaeConfig, input: &Matrix, target: &Matrix, tied: bool) -> Result<(SparseCoder, SaeTrainReport)> {
    config.validate()?;
    if input.cols() != config.input_dim {
        return Err(Error::DimensionMismatch {
            what: "activation columns",
            expected: config.input_dim,
            found: input.cols(),
        });
    }
    if target.rows() != input.rows() {
        return Err(Error::DimensionMismatch {
            what: "paired activation rows",
            expected: input.rows(),
            found: target.rows(),
        });
    }
    let needed = 10 * config.latent_dim;
    if input.rows() < needed {
        return Err(Error::TooFewRows {
            needed,
            found: input.rows(),
        });
    }
    if !input.is_finite() || !target.is_finite() {
        return Err(Error::NonFinite("coder training data"));
    }

    let lambda = config.variant.lambda();
    let mut model = initialize(config, input, target, tied);
    let kernel_width = match config.variant {
        SaeVariant::JumpRelu { .. } => {
            let sd = stats::population_sd(model.pre_activations(input)?.as_slice());
            if sd > 0.0 {
                0.1 * sd
            } else {
                0.1
            }
        }
        _ => 1.0,
    };

    let mut params = model.parameters();
    let mut adam = Adam::new(config.learning_rate, params.len());
    let mut loss_curve = Vec::with_capacity(config.epochs + 1);
    loss_curve.push(coder_loss(&model, input, target, lambda)?);
    let mut order: Vec<usize> = (0..input.rows()).collect();
    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, streams::SHUFFLE_BASE + epoch as u64));
        for batch in order.chunks(config.batch_size) {
            let x = input.select_rows(batch);
            let t = target.select_rows(batch);
            let (loss, grad) = coder_gradients(&model, &x, &t, lambda, kernel_width)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            adam.step(&mut params, &grad);
            model.set_parameters(&params)?;
            model.normalize_decoder();
            for t in model.threshold.iter_mut() {
                *t = t.max(MIN_THRESHOLD);
            }
            params = model.parameters();
        }
        let loss = coder_loss(&model, input, target, lambda)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        loss_curve.push(loss);
    }
    let report = SaeTrainReport {
        loss_curve,
        reconstruction_mse: reconstruction_mse(&model, input, target)?,
        mean_l0: mean_l0(&model, input)?,
        target_variance: mean_variance(target),
    };
    Ok((model, report))
}

/// Trains a sparse autoencoder on activation rows with minibatch Adam.
/// Needs at least `10 · latent_dim` rows.
pub fn train_sae(acts: &Matrix, config: &SaeConfig) -> Result<(SparseCoder, SaeTrainReport)> {
    fit(config, acts, acts, true)
}

/// Trains a coder mapping `acts_in` rows to the paired `acts_out` rows.
pub fn train_transcoder(
    acts_in: &Matrix,
    acts_out: &Matrix,
    config: &SaeConfig,
) -> Result<(SparseCoder, SaeTrainReport)> {
    fit(config, acts_in, acts_out, false)
}
