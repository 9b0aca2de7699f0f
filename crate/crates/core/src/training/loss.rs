use std::fmt;
use std::str::FromStr;

use crate::codec::IterationTrace;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossNorm {
    /// `β · Σ_t Σ |r_t|`
    Sum,
    /// The sum divided by the total number of residual elements.
    Mean,
}

impl fmt::Display for LossNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossNorm::Sum => "sum",
            LossNorm::Mean => "mean",
        })
    }
}

impl FromStr for LossNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(LossNorm::Sum),
            "mean" => Ok(LossNorm::Mean),
            _ => Err(Error::Config(format!("unknown loss normalization {s:?}"))),
        }
    }
}

fn scale(residuals: &[Tensor], beta: f64, norm: LossNorm) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::invalid("loss needs at least one iteration"));
    }
    Ok(match norm {
        LossNorm::Sum => beta,
        LossNorm::Mean => beta / residuals.iter().map(Tensor::len).sum::<usize>() as f64,
    })
}

/// Weighted L1 norm of the residuals `r_1 … r_T`.
pub fn l1_loss(residuals: &[Tensor], beta: f64, norm: LossNorm) -> Result<f64> {
    let k = scale(residuals, beta, norm)?;
    Ok(k * residuals.iter().map(Tensor::abs_sum).sum::<f64>())
}

/// Gradient of [`l1_loss`] with respect to each residual; `sign(0)` is taken as 0.
pub fn l1_loss_grad(residuals: &[Tensor], beta: f64, norm: LossNorm) -> Result<Vec<Tensor>> {
    let k = scale(residuals, beta, norm)?;
    Ok(residuals
        .iter()
        .map(|r| {
            r.map(|v| {
                if v > 0.0 {
                    k
                } else if v < 0.0 {
                    -k
                } else {
                    0.0
                }
            })
        })
        .collect())
}

pub fn l1_residual_loss(trace: &IterationTrace, beta: f64, norm: LossNorm) -> Result<f64> {
    l1_loss(&trace.residuals, beta, norm)
}
