//! Order-1 arc-cosine kernel.
//!
//! `k(x, y) = σ² ‖x‖ ‖y‖ (sin θ + (π − θ) cos θ) / π`, where θ is the angle
//! between `x` and `y`. It is the covariance of an infinitely wide one-layer
//! ReLU network. The output scale σ² is the only hyperparameter and is stored
//! as its logarithm.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Var};
use crate::tensor::{dot, Tensor};

/// Order of the arc-cosine kernel family used by every layer.
pub const KERNEL_ORDER: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcCosParams {
    pub log_variance: f64,
}

impl Default for ArcCosParams {
    fn default() -> Self {
        ArcCosParams { log_variance: 0.0 }
    }
}

impl ArcCosParams {
    pub fn with_variance(variance: f64) -> Self {
        assert!(variance > 0.0, "kernel variance must be positive");
        ArcCosParams {
            log_variance: variance.ln(),
        }
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }
}

/// `n x m` Gram matrix between the rows of `x` and `y`.
pub fn arccos_gram(x: &Tensor, y: &Tensor, params: &ArcCosParams) -> Tensor {
    autodiff::arccos_gram_value(x, y).0.scale(params.variance())
}

/// `k(xᵢ, xᵢ) = σ² ‖xᵢ‖²` for each row.
pub fn kernel_diag(x: &Tensor, params: &ArcCosParams) -> Vec<f64> {
    let s = params.variance();
    (0..x.rows()).map(|i| s * dot(x.row(i), x.row(i))).collect()
}

/// Differentiable Gram matrix; `log_variance` is a `1 x 1` value.
pub fn gram<'t>(x: Var<'t>, y: Var<'t>, log_variance: Var<'t>) -> Var<'t> {
    autodiff::arccos_gram(x, y) * log_variance.exp()
}

/// Differentiable kernel diagonal as an `n x 1` column.
pub fn diag<'t>(x: Var<'t>, log_variance: Var<'t>) -> Var<'t> {
    x.square().sum_rows() * log_variance.exp()
}
