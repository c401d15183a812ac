//! Mask-aware training objectives: MAE, the quantile regression (pinball)
//! loss, and the Huber quantile loss.
//!
//! The error convention throughout is `u = target - prediction`, so a
//! positive `u` means the model underestimates. The pinball loss
//! `rho_tau(u) = (tau - I[u <= 0]) * u` then charges underestimation with
//! weight `tau` and overestimation with weight `1 - tau`; its expected
//! minimizer is the `tau`-quantile. The Huber variant swaps in a quadratic
//! branch `u^2 / (2*kappa)` for `|u| < kappa` so gradients scale with the
//! error magnitude near zero instead of jumping between `-tau` and `1-tau`.
//!
//! ```
//! use qgwnet::losses::{huber_pinball, pinball};
//!
//! assert_eq!(pinball(2.0, 0.5), 1.0);          // half the absolute error
//! assert_eq!(pinball(1.0, 0.9), 0.9);          // underestimation, weight tau
//! assert!((pinball(-1.0, 0.9) - 0.1).abs() < 1e-15);
//!
//! // Quadratic inside the threshold: weight * u^2 / (2 kappa).
//! assert!((huber_pinball(-0.02, 0.9, 0.05) - 0.0004).abs() < 1e-18);
//! ```

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Huber threshold configuration; `kappa` is in normalized units.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub kappa: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { kappa: 0.05 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa <= 0.0 {
            return Err(Error::invalid(
                "LossConfig",
                format!("kappa must be positive, got {}", self.kappa),
            ));
        }
        Ok(())
    }
}

/// Pinball loss for a single error value.
pub fn pinball(u: f64, tau: f64) -> f64 {
    if u > 0.0 {
        tau * u
    } else {
        (tau - 1.0) * u
    }
}

/// Subgradient of [`pinball`] in `u`; at `u = 0` the weight is `tau - 1`,
/// taking the indicator `I[u <= 0]` at face value.
pub fn pinball_grad(u: f64, tau: f64) -> f64 {
    if u > 0.0 {
        tau
    } else {
        tau - 1.0
    }
}

/// Huber quantile loss for a single error value.
pub fn huber_pinball(u: f64, tau: f64, kappa: f64) -> f64 {
    let weight = if u > 0.0 { tau } else { 1.0 - tau };
    let body = if u.abs() < kappa {
        u * u / (2.0 * kappa)
    } else {
        u.abs() - kappa / 2.0
    };
    weight * body
}

/// Derivative of [`huber_pinball`] in `u` (defined everywhere; 0 at `u = 0`).
pub fn huber_pinball_grad(u: f64, tau: f64, kappa: f64) -> f64 {
    let weight = if u > 0.0 { tau } else { 1.0 - tau };
    if u.abs() < kappa {
        weight * u / kappa
    } else {
        weight * u.signum()
    }
}

fn check_tau(op: &'static str, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(op, format!("tau must be in [0,1], got {tau}")));
    }
    Ok(())
}

fn mask_total(op: &'static str, shape: &[usize], mask: &Tensor) -> Result<f64> {
    if mask.shape() != shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let total: f64 = mask.data().iter().sum();
    if total == 0.0 {
        return Err(Error::invalid(op, "mask is all zero"));
    }
    Ok(total)
}

/// Masked mean absolute error `sum(mask * |pred - target|) / sum(mask)`.
pub fn mae_loss<'t>(pred: Var<'t>, target: Var<'t>, mask: &Tensor) -> Result<Var<'t>> {
    let total = mask_total("mae_loss", &pred.shape(), mask)?;
    let diff = pred.sub(target)?.abs()?;
    let m = diff.tape.constant(mask.clone());
    diff.mul(m)?.sum()?.scale(1.0 / total)
}

/// Elementwise pinball loss recorded on the tape.
fn pinball_elem(u: Var<'_>, tau: f64) -> Result<Var<'_>> {
    let nodes = u.tape.nodes();
    let uv = &nodes[u.idx].value;
    let data: Vec<f64> = uv.data().iter().map(|&x| pinball(x, tau)).collect();
    let out = Tensor::from_vec(uv.shape().to_vec(), data)?;
    let needs = nodes[u.idx].needs_grad;
    let (ui, len) = (u.idx, uv.len());
    drop(nodes);
    let back = needs.then(|| {
        Box::new(
            move |g: &[f64],
                  nodes: &[crate::autodiff::tape::Node],
                  buf: &mut crate::autodiff::tape::GradBuffer| {
                let x = nodes[ui].value.data();
                let dst = buf.slot(ui, len);
                for i in 0..len {
                    dst[i] += g[i] * pinball_grad(x[i], tau);
                }
            },
        ) as crate::autodiff::tape::BackFn
    });
    u.tape.push("quantile_loss", out, needs, back)
}

/// Elementwise Huber quantile loss recorded on the tape.
fn huber_elem(u: Var<'_>, tau: f64, kappa: f64) -> Result<Var<'_>> {
    let nodes = u.tape.nodes();
    let uv = &nodes[u.idx].value;
    let data: Vec<f64> = uv.data().iter().map(|&x| huber_pinball(x, tau, kappa)).collect();
    let out = Tensor::from_vec(uv.shape().to_vec(), data)?;
    let needs = nodes[u.idx].needs_grad;
    let (ui, len) = (u.idx, uv.len());
    drop(nodes);
    let back = needs.then(|| {
        Box::new(
            move |g: &[f64],
                  nodes: &[crate::autodiff::tape::Node],
                  buf: &mut crate::autodiff::tape::GradBuffer| {
                let x = nodes[ui].value.data();
                let dst = buf.slot(ui, len);
                for i in 0..len {
                    dst[i] += g[i] * huber_pinball_grad(x[i], tau, kappa);
                }
            },
        ) as crate::autodiff::tape::BackFn
    });
    u.tape.push("huber_quantile_loss", out, needs, back)
}

/// Masked mean of the pinball loss over the error tensor `u = target - pred`.
pub fn quantile_loss<'t>(u: Var<'t>, tau: f64, mask: &Tensor) -> Result<Var<'t>> {
    check_tau("quantile_loss", tau)?;
    let total = mask_total("quantile_loss", &u.shape(), mask)?;
    let elem = pinball_elem(u, tau)?;
    let m = elem.tape.constant(mask.clone());
    elem.mul(m)?.sum()?.scale(1.0 / total)
}

/// Masked mean of the Huber quantile loss over `u = target - pred`.
pub fn huber_quantile_loss<'t>(u: Var<'t>, tau: f64, kappa: f64, mask: &Tensor) -> Result<Var<'t>> {
    check_tau("huber_quantile_loss", tau)?;
    if kappa <= 0.0 {
        return Err(Error::invalid(
            "huber_quantile_loss",
            format!("kappa must be positive, got {kappa}"),
        ));
    }
    let total = mask_total("huber_quantile_loss", &u.shape(), mask)?;
    let elem = huber_elem(u, tau, kappa)?;
    let m = elem.tape.constant(mask.clone());
    elem.mul(m)?.sum()?.scale(1.0 / total)
}

/// Convenience for tests and the book: scalar masked-mean losses on plain
/// slices, no tape involved.
pub fn mae_scalar(pred: &[f64], target: &[f64], mask: &[f64]) -> Result<f64> {
    let total: f64 = mask.iter().sum();
    if total == 0.0 {
        return Err(Error::invalid("mae_loss", "mask is all zero"));
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((p, t), m)| m * (p - t).abs())
        .sum();
    Ok(s / total)
}
