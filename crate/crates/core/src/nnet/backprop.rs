use alloc::vec::Vec;

use super::{Dense, MultiTaskNet};
use crate::matrix::Matrix;
use crate::stats::pairwise_sum;
use crate::{Error, Result};

/// Predicted propensities are clipped this far from 0 and 1 inside the
/// cross-entropy.
pub const BCE_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub bce: f64,
}

fn bce_term(a: f64, p: f64) -> f64 {
    let pc = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
    -(a * libm::log(pc) + (1.0 - a) * libm::log(1.0 - pc))
}

fn breakdown(q_pred: &[f64], g_pred: &[f64], y: &[f64], a: &[f64], alpha: f64) -> Result<LossBreakdown> {
    let n = y.len();
    for (what, len) in [
        ("outcome predictions", q_pred.len()),
        ("propensity predictions", g_pred.len()),
        ("treatment vector", a.len()),
    ] {
        if len != n {
            return Err(Error::DimensionMismatch {
                what,
                expected: n,
                found: len,
            });
        }
    }
    if n == 0 {
        return Err(Error::TooFewRows { needed: 1, found: 0 });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            reason: alloc::format!("{alpha} is outside [0, 1]"),
        });
    }
    let sq: Vec<f64> = q_pred.iter().zip(y).map(|(q, y)| (q - y) * (q - y)).collect();
    let ce: Vec<f64> = a.iter().zip(g_pred).map(|(&a, &p)| bce_term(a, p)).collect();
    let mse = pairwise_sum(&sq) / n as f64;
    let bce = pairwise_sum(&ce) / n as f64;
    if mse.is_nan() || bce.is_nan() {
        return Err(Error::NonFinite("loss inputs"));
    }
    Ok(LossBreakdown {
        total: (1.0 - alpha) * mse + alpha * bce,
        mse,
        bce,
    })
}

/// `(1 − alpha)·MSE(y, q) + alpha·BCE(a, g)` with the propensity clipped to
/// `[BCE_CLIP, 1 − BCE_CLIP]`.
pub fn combined_loss(q_pred: &[f64], g_pred: &[f64], y: &[f64], a: &[f64], alpha: f64) -> Result<f64> {
    breakdown(q_pred, g_pred, y, a, alpha).map(|b| b.total)
}

/// Gradients in the same layer layout as [`MultiTaskNet`].
#[derive(Clone, Debug)]
pub(crate) struct Gradients {
    pub trunk: Vec<Dense>,
    pub q_head: Dense,
    pub g_head: Dense,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.trunk.iter().chain([&self.q_head, &self.g_head]) {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }
}

fn dense_grad(delta: &Matrix, input: &Matrix) -> Dense {
    let weight = delta.transposed_matmul(input);
    let bias = (0..delta.cols())
        .map(|j| {
            let col = delta.column(j);
            pairwise_sum(&col)
        })
        .collect();
    Dense { weight, bias }
}

/// Combined loss on a batch and its gradient with respect to every
/// parameter, flattened in [`MultiTaskNet::parameters`] order.
pub fn loss_and_gradients(
    net: &MultiTaskNet,
    w: &Matrix,
    a: &[f64],
    y: &[f64],
    alpha: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (loss, grads) = backward(net, w, a, y, alpha)?;
    Ok((loss, grads.flatten()))
}

pub(crate) fn backward(
    net: &MultiTaskNet,
    w: &Matrix,
    a: &[f64],
    y: &[f64],
    alpha: f64,
) -> Result<(LossBreakdown, Gradients)> {
    let rec = net.forward(w, a, true)?;
    let loss = breakdown(&rec.q_pred, &rec.g_pred, y, a, alpha)?;
    let n = y.len() as f64;
    let hs = net.hidden_size();
    let depth = net.depth();
    let shared = &rec.layers[depth - 1];

    // d loss / d q_i and d loss / d (g logit)_i
    let dq: Vec<f64> = rec
        .q_pred
        .iter()
        .zip(y)
        .map(|(q, y)| (1.0 - alpha) * 2.0 * (q - y) / n)
        .collect();
    let dz: Vec<f64> = rec
        .g_pred
        .iter()
        .zip(a)
        .map(|(&p, &a)| {
            if (BCE_CLIP..=1.0 - BCE_CLIP).contains(&p) {
                alpha * (p - a) / n
            } else {
                0.0
            }
        })
        .collect();

    let q_in = Matrix::from_fn(
        shared.rows(),
        hs + 1,
        |i, j| if j < hs { shared.get(i, j) } else { a[i] },
    );
    let dq_m = Matrix::from_vec(dq.len(), 1, dq.clone()).expect("column vector");
    let dz_m = Matrix::from_vec(dz.len(), 1, dz.clone()).expect("column vector");
    let q_grad = dense_grad(&dq_m, &q_in);
    let g_grad = dense_grad(&dz_m, shared);

    let wq = net.q_head.weight.row(0);
    let wg = net.g_head.weight.row(0);
    let mut delta = Matrix::from_fn(shared.rows(), hs, |i, j| dq[i] * wq[j] + dz[i] * wg[j]);

    let mut trunk_grads: Vec<Dense> = Vec::with_capacity(depth);
    for l in (0..depth).rev() {
        let out = &rec.layers[l];
        for (d, &h) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        let input = if l == 0 { w } else { &rec.layers[l - 1] };
        trunk_grads.push(dense_grad(&delta, input));
        if l > 0 {
            delta = delta.matmul(&net.trunk[l].weight);
        }
    }
    trunk_grads.reverse();
    Ok((
        loss,
        Gradients {
            trunk: trunk_grads,
            q_head: q_grad,
            g_head: g_grad,
        },
    ))
}
