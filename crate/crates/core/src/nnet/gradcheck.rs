use alloc::vec::Vec;

use super::backprop::{backward, BCE_CLIP};
use super::MultiTaskNet;
use crate::matrix::Matrix;
use crate::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameters compared.
    pub checked: usize,
    /// Parameters skipped because a ±h step moved some unit across a ReLU
    /// or clipping kink, where central differences are not a derivative.
    pub skipped: usize,
}

/// Which ReLUs are open and which propensities are inside the clip range.
fn kink_pattern(net: &MultiTaskNet, w: &Matrix, a: &[f64]) -> Result<Vec<bool>> {
    let mut pattern = Vec::new();
    let mut input = w.clone();
    for layer in &net.trunk {
        let mut pre = layer.apply(&input);
        pattern.extend(pre.as_slice().iter().map(|&v| v > 0.0));
        for v in pre.as_mut_slice() {
            *v = v.max(0.0);
        }
        input = pre;
    }
    let rec = net.forward(w, a, false)?;
    pattern.extend(rec.g_pred.iter().map(|&p| (BCE_CLIP..=1.0 - BCE_CLIP).contains(&p)));
    Ok(pattern)
}

fn loss_at(net: &MultiTaskNet, w: &Matrix, a: &[f64], y: &[f64], alpha: f64) -> Result<f64> {
    let rec = net.forward(w, a, false)?;
    super::combined_loss(&rec.q_pred, &rec.g_pred, y, a, alpha)
}

/// Compares the analytic gradient of the combined loss with central finite
/// differences, parameter by parameter.
///
/// The relative error of one parameter is
/// `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_SCALE_FLOOR)`.
pub fn grad_check(net: &MultiTaskNet, w: &Matrix, a: &[f64], y: &[f64], alpha: f64, h: f64) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::InvalidParameter {
            name: "h",
            reason: alloc::format!("step {h} outside [1e-6, 1e-4]"),
        });
    }
    if w.rows() == 0 {
        return Err(Error::TooFewRows { needed: 1, found: 0 });
    }
    let (_, grads) = backward(net, w, a, y, alpha)?;
    let analytic = grads.flatten();
    let base_pattern = kink_pattern(net, w, a)?;
    let params = net.parameters();
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut shifted = params.clone();
    for i in 0..params.len() {
        shifted[i] = params[i] + h;
        probe.set_parameters(&shifted)?;
        let plus = loss_at(&probe, w, a, y, alpha)?;
        let plus_ok = kink_pattern(&probe, w, a)? == base_pattern;
        shifted[i] = params[i] - h;
        probe.set_parameters(&shifted)?;
        let minus = loss_at(&probe, w, a, y, alpha)?;
        let minus_ok = kink_pattern(&probe, w, a)? == base_pattern;
        shifted[i] = params[i];
        if !(plus_ok && minus_ok) {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR);
        let err = (analytic[i] - numeric).abs() / scale;
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
