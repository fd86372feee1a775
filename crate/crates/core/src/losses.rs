//! Training objectives with analytic gradients with respect to predictions.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ccc_with_grad;
use crate::numerics::Matrix;

/// Default probability clamp for the KL objective.
pub const KL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub d_pred: Matrix,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    L1,
    Kl,
    Ccc,
}

impl LossKind {
    pub fn evaluate(self, pred: &Matrix, label: &Matrix) -> Result<LossReport> {
        match self {
            LossKind::L1 => l1_loss(pred, label),
            LossKind::Kl => kl_loss(pred, label, KL_EPS),
            LossKind::Ccc => ccc_loss(pred, label),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Kl => "kl",
            LossKind::Ccc => "ccc",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "kl" => Ok(LossKind::Kl),
            "ccc" => Ok(LossKind::Ccc),
            other => Err(Error::input(format!("unknown loss {other:?} (expected l1, kl or ccc)"))),
        }
    }
}

fn check_shapes(pred: &Matrix, label: &Matrix) -> Result<()> {
    if pred.shape() != label.shape() {
        return Err(Error::Dimension {
            op: "loss",
            left: pred.shape(),
            right: label.shape(),
        });
    }
    if pred.is_empty() {
        return Err(Error::input("empty prediction"));
    }
    Ok(())
}

/// Mean absolute error over every entry. Ties get a zero subgradient.
pub fn l1_loss(pred: &Matrix, label: &Matrix) -> Result<LossReport> {
    check_shapes(pred, label)?;
    let n = pred.len() as f64;
    let mut d_pred = Matrix::zeros(pred.rows(), pred.cols());
    let mut total = 0.0;
    for ((d, &p), &y) in d_pred.data_mut().iter_mut().zip(pred.data()).zip(label.data()) {
        let diff = p - y;
        total += diff.abs();
        *d = if diff > 0.0 {
            1.0 / n
        } else if diff < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok(LossReport {
        value: total / n,
        d_pred,
    })
}

fn xlogy_ratio(y: f64, p: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        y * (y / p).ln()
    }
}

/// Mean per-entry Bernoulli KL divergence `KL(y ‖ ŷ)`, with `ŷ` clamped to
/// `[eps, 1 − eps]`. Clamped entries get a zero gradient.
pub fn kl_loss(pred: &Matrix, label: &Matrix, eps: f64) -> Result<LossReport> {
    check_shapes(pred, label)?;
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::input(format!("KL eps must be in (0, 1e-3], got {eps}")));
    }
    let n = pred.len() as f64;
    let mut d_pred = Matrix::zeros(pred.rows(), pred.cols());
    let mut total = 0.0;
    for ((d, &p_raw), &y) in d_pred.data_mut().iter_mut().zip(pred.data()).zip(label.data()) {
        let p = p_raw.clamp(eps, 1.0 - eps);
        total += xlogy_ratio(y, p) + xlogy_ratio(1.0 - y, 1.0 - p);
        *d = if p_raw > eps && p_raw < 1.0 - eps {
            (-y / p + (1.0 - y) / (1.0 - p)) / n
        } else {
            0.0
        };
    }
    Ok(LossReport {
        value: (total / n).max(0.0),
        d_pred,
    })
}

/// Mean over channels of `1 − ρ_c(pred column, label column)`.
pub fn ccc_loss(pred: &Matrix, label: &Matrix) -> Result<LossReport> {
    check_shapes(pred, label)?;
    if pred.rows() < 2 {
        return Err(Error::input(format!(
            "CCC loss needs at least 2 time steps, got {}",
            pred.rows()
        )));
    }
    let channels = pred.cols();
    let mut d_pred = Matrix::zeros(pred.rows(), channels);
    let mut total = 0.0;
    for c in 0..channels {
        let term = ccc_with_grad(&pred.col(c), &label.col(c))?;
        total += 1.0 - term.value;
        for (t, g) in term.d_x.iter().enumerate() {
            d_pred.set(t, c, -g / channels as f64);
        }
    }
    Ok(LossReport {
        value: total / channels as f64,
        d_pred,
    })
}
