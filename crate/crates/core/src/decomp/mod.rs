//! Sparse dictionaries over trunk activations.
//!
//! A [`SparseCoder`] is an encoder affine map, a sparsifying nonlinearity and
//! a decoder affine map. Trained to reproduce its own input it is a sparse
//! autoencoder; trained to reproduce the next layer's activations from the
//! current layer's it is a transcoder. Decoder columns (one per latent) are
//! kept at unit norm so the L1 penalty cannot be dodged by shrinking latents
//! and growing the decoder.

mod train;

pub use train::{mean_l0, mean_variance, reconstruction_mse, train_sae, train_transcoder, SaeTrainReport};

use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::Matrix;
use crate::nnet::{Dense, GradCheckReport, GRAD_SCALE_FLOOR};
use crate::stats;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum SaeVariant {
    /// ReLU latents with an L1 penalty of weight `lambda`.
    L1 { lambda: f64 },
    /// Keeps the `k_active` largest pre-activations; reconstruction loss only.
    TopK { k_active: usize },
    /// `z·1[z ≥ θ]` with a learned per-latent θ starting at `theta`.
    JumpRelu { theta: f64, lambda: f64 },
}

impl SaeVariant {
    pub fn lambda(&self) -> f64 {
        match *self {
            SaeVariant::L1 { lambda } | SaeVariant::JumpRelu { lambda, .. } => lambda,
            SaeVariant::TopK { .. } => 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SaeVariant::L1 { .. } => "l1",
            SaeVariant::TopK { .. } => "topk",
            SaeVariant::JumpRelu { .. } => "jumprelu",
        }
    }

    fn validate(&self, latent_dim: usize) -> Result<()> {
        match *self {
            SaeVariant::L1 { lambda } => {
                if !(lambda > 0.0) || !lambda.is_finite() {
                    return Err(Error::InvalidParameter {
                        name: "lambda",
                        reason: "must be finite and positive".into(),
                    });
                }
            }
            SaeVariant::TopK { k_active } => {
                if k_active == 0 || k_active > latent_dim {
                    return Err(Error::InvalidParameter {
                        name: "k_active",
                        reason: alloc::format!("must lie in 1..={latent_dim}"),
                    });
                }
            }
            SaeVariant::JumpRelu { theta, lambda } => {
                if !(theta > 0.0) || !theta.is_finite() {
                    return Err(Error::InvalidParameter {
                        name: "theta",
                        reason: "must be finite and positive".into(),
                    });
                }
                if !(lambda > 0.0) || !lambda.is_finite() {
                    return Err(Error::InvalidParameter {
                        name: "lambda",
                        reason: "must be finite and positive".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SaeConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub variant: SaeVariant,
    pub epochs: usize,
    pub learning_rate: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_batch"))]
    pub batch_size: usize,
    pub seed: u64,
}

#[cfg(feature = "serde")]
fn default_batch() -> usize {
    256
}

impl SaeConfig {
    pub fn new(input_dim: usize, latent_dim: usize, variant: SaeVariant) -> Self {
        Self {
            input_dim,
            latent_dim,
            variant,
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 256,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidParameter {
                name: "input_dim",
                reason: "must be at least 1".into(),
            });
        }
        if self.latent_dim < self.input_dim {
            return Err(Error::InvalidParameter {
                name: "latent_dim",
                reason: alloc::format!("{} is below input_dim {}", self.latent_dim, self.input_dim),
            });
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter {
                name: "learning_rate",
                reason: "must be finite and positive".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter {
                name: "batch_size",
                reason: "must be at least 1".into(),
            });
        }
        self.variant.validate(self.latent_dim)
    }
}

/// `z` with everything outside the `k_active` largest entries set to zero;
/// among equal values the lower index wins.
pub fn topk_activate(z: &[f64], k_active: usize) -> Vec<f64> {
    let keep = topk_mask(z, k_active);
    z.iter().zip(keep).map(|(&v, k)| if k { v } else { 0.0 }).collect()
}

fn topk_mask(z: &[f64], k_active: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let mut keep = vec![false; z.len()];
    for &j in order.iter().take(k_active) {
        keep[j] = true;
    }
    keep
}

pub fn jumprelu(z: f64, theta: f64) -> f64 {
    if z >= theta {
        z
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SparseCoder {
    pub variant: SaeVariant,
    /// latent_dim × input_dim.
    pub encoder: Dense,
    /// output_dim × latent_dim; column `j` is latent `j`'s dictionary vector.
    pub decoder: Dense,
    /// Per-latent JumpReLU thresholds; empty for other variants.
    pub threshold: Vec<f64>,
}

pub type SaeModel = SparseCoder;
pub type TranscoderModel = SparseCoder;

impl SparseCoder {
    pub fn zeros(input_dim: usize, latent_dim: usize, output_dim: usize, variant: SaeVariant) -> Self {
        let threshold = match variant {
            SaeVariant::JumpRelu { theta, .. } => vec![theta; latent_dim],
            _ => Vec::new(),
        };
        Self {
            variant,
            encoder: Dense::zeros(input_dim, latent_dim),
            decoder: Dense::zeros(latent_dim, output_dim),
            threshold,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.inputs()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.outputs()
    }

    pub fn output_dim(&self) -> usize {
        self.decoder.outputs()
    }

    pub fn pre_activations(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "coder input columns",
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        Ok(self.encoder.apply(x))
    }

    /// Which latents are open, row by row.
    fn gate(&self, z: &Matrix) -> Vec<bool> {
        let m = z.cols();
        let mut open = Vec::with_capacity(z.rows() * m);
        for i in 0..z.rows() {
            let row = z.row(i);
            match self.variant {
                SaeVariant::L1 { .. } => open.extend(row.iter().map(|&v| v > 0.0)),
                SaeVariant::TopK { k_active } => open.extend(topk_mask(row, k_active)),
                SaeVariant::JumpRelu { .. } => open.extend(row.iter().zip(&self.threshold).map(|(&v, &t)| v >= t)),
            }
        }
        open
    }

    fn activate(&self, z: &Matrix) -> Matrix {
        let open = self.gate(z);
        let mut f = z.clone();
        for (v, o) in f.as_mut_slice().iter_mut().zip(open) {
            if !o {
                *v = 0.0;
            }
        }
        f
    }

    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.activate(&self.pre_activations(x)?))
    }

    pub fn decode(&self, f: &Matrix) -> Matrix {
        self.decoder.apply(f)
    }

    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.decode(&self.encode(x)?))
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().len()
    }

    /// Encoder weights, encoder bias, decoder weights, decoder bias, thresholds.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::new();
        p.extend_from_slice(self.encoder.weight.as_slice());
        p.extend_from_slice(&self.encoder.bias);
        p.extend_from_slice(self.decoder.weight.as_slice());
        p.extend_from_slice(&self.decoder.bias);
        p.extend_from_slice(&self.threshold);
        p
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                what: "coder parameters",
                expected: self.parameter_count(),
                found: params.len(),
            });
        }
        let mut rest = params;
        for dst in [
            self.encoder.weight.as_mut_slice(),
            &mut self.encoder.bias[..],
            self.decoder.weight.as_mut_slice(),
            &mut self.decoder.bias[..],
            &mut self.threshold[..],
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Rescales every decoder column to unit Euclidean norm; zero columns
    /// are left alone.
    pub fn normalize_decoder(&mut self) {
        let w = &mut self.decoder.weight;
        for j in 0..w.cols() {
            let norm = libm::sqrt((0..w.rows()).map(|a| w.get(a, j) * w.get(a, j)).sum::<f64>());
            if norm > 0.0 {
                for a in 0..w.rows() {
                    w.set(a, j, w.get(a, j) / norm);
                }
            }
        }
    }
}

fn check_pair(model: &SparseCoder, input: &Matrix, target: &Matrix, lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "lambda",
            reason: "must be non-negative".into(),
        });
    }
    if target.rows() != input.rows() {
        return Err(Error::DimensionMismatch {
            what: "target rows",
            expected: input.rows(),
            found: target.rows(),
        });
    }
    if target.cols() != model.output_dim() {
        return Err(Error::DimensionMismatch {
            what: "target columns",
            expected: model.output_dim(),
            found: target.cols(),
        });
    }
    if input.rows() == 0 {
        return Err(Error::TooFewRows { needed: 1, found: 0 });
    }
    if !input.is_finite() || !target.is_finite() {
        return Err(Error::NonFinite("coder inputs"));
    }
    Ok(())
}

/// Mean over rows of `‖target − dec(enc(input))‖² + lambda·‖enc(input)‖₁`.
pub fn coder_loss(model: &SparseCoder, input: &Matrix, target: &Matrix, lambda: f64) -> Result<f64> {
    check_pair(model, input, target, lambda)?;
    let f = model.encode(input)?;
    let r = model.decode(&f);
    let per_row: Vec<f64> = (0..input.rows())
        .map(|i| {
            let sq: f64 = r.row(i).iter().zip(target.row(i)).map(|(a, b)| (b - a) * (b - a)).sum();
            let l1: f64 = f.row(i).iter().map(|v| v.abs()).sum();
            sq + lambda * l1
        })
        .collect();
    Ok(stats::mean(&per_row))
}

pub fn sae_loss(model: &SparseCoder, h: &Matrix, lambda: f64) -> Result<f64> {
    coder_loss(model, h, h, lambda)
}

pub fn transcoder_loss(model: &SparseCoder, h_in: &Matrix, h_out: &Matrix, lambda: f64) -> Result<f64> {
    coder_loss(model, h_in, h_out, lambda)
}

/// Loss and flat gradient in [`SparseCoder::parameters`] order.
///
/// JumpReLU thresholds get a straight-through gradient: the step
/// `1[z ≥ θ]` is differentiated as a rectangle of width `kernel_width`
/// centred on θ.
pub fn coder_gradients(
    model: &SparseCoder,
    input: &Matrix,
    target: &Matrix,
    lambda: f64,
    kernel_width: f64,
) -> Result<(f64, Vec<f64>)> {
    check_pair(model, input, target, lambda)?;
    let n = input.rows() as f64;
    let z = model.pre_activations(input)?;
    let open = model.gate(&z);
    let mut f = z.clone();
    for (v, &o) in f.as_mut_slice().iter_mut().zip(&open) {
        if !o {
            *v = 0.0;
        }
    }
    let r = model.decode(&f);

    let mut dr = r.clone();
    let mut per_row = Vec::with_capacity(input.rows());
    for i in 0..dr.rows() {
        let mut sq = 0.0;
        for (d, t) in dr.row_mut(i).iter_mut().zip(target.row(i)) {
            let e = *d - t;
            sq += e * e;
            *d = 2.0 * e / n;
        }
        let l1: f64 = f.row(i).iter().map(|v| v.abs()).sum();
        per_row.push(sq + lambda * l1);
    }
    let loss = stats::mean(&per_row);

    let g_dec_w = dr.transposed_matmul(&f);
    let g_dec_b: Vec<f64> = (0..dr.cols())
        .map(|a| (0..dr.rows()).map(|i| dr.get(i, a)).sum())
        .collect();
    let df = dr.matmul(&model.decoder.weight);

    let m = z.cols();
    let mut dz = Matrix::zeros(z.rows(), m);
    let mut g_theta = vec![0.0; model.threshold.len()];
    let jump = matches!(model.variant, SaeVariant::JumpRelu { .. });
    for i in 0..z.rows() {
        for j in 0..m {
            let zv = z.get(i, j);
            let sign = if zv > 0.0 {
                1.0
            } else if zv < 0.0 {
                -1.0
            } else {
                0.0
            };
            let g = df.get(i, j) + lambda * sign / n;
            if open[i * m + j] {
                dz.set(i, j, g);
            }
            if jump && (zv - model.threshold[j]).abs() < kernel_width / 2.0 {
                g_theta[j] -= g * zv / kernel_width;
            }
        }
    }
    let g_enc_w = dz.transposed_matmul(input);
    let g_enc_b: Vec<f64> = (0..m).map(|j| (0..dz.rows()).map(|i| dz.get(i, j)).sum()).collect();

    let mut grad = Vec::with_capacity(model.parameter_count());
    grad.extend_from_slice(g_enc_w.as_slice());
    grad.extend(g_enc_b);
    grad.extend_from_slice(g_dec_w.as_slice());
    grad.extend(g_dec_b);
    grad.extend(g_theta);
    Ok((loss, grad))
}

/// Central-difference check of [`coder_gradients`] on a sparse autoencoder
/// (`target = input`). Thresholds are skipped (their gradient is a
/// surrogate), as is any parameter whose ±`h` step opens or closes a latent.
pub fn sae_grad_check(model: &SparseCoder, h_batch: &Matrix, lambda: f64, h: f64) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidParameter {
            name: "h",
            reason: alloc::format!("step {h} outside [1e-7, 1e-3]"),
        });
    }
    let (_, analytic) = coder_gradients(model, h_batch, h_batch, lambda, 1.0)?;
    let base = model.parameters();
    let checked_len = base.len() - model.threshold.len();
    let pattern = model.gate(&model.pre_activations(h_batch)?);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut params = base.clone();
    for p in 0..checked_len {
        params[p] = base[p] + h;
        probe.set_parameters(&params)?;
        let same_up = probe.gate(&probe.pre_activations(h_batch)?) == pattern;
        let up = sae_loss(&probe, h_batch, lambda)?;
        params[p] = base[p] - h;
        probe.set_parameters(&params)?;
        let same_down = probe.gate(&probe.pre_activations(h_batch)?) == pattern;
        let down = sae_loss(&probe, h_batch, lambda)?;
        params[p] = base[p];
        if !(same_up && same_down) {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[p].abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR);
        let rel = (analytic[p] - numeric).abs() / scale;
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
