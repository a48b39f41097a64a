//! Generalized inverse of two-column prototype matrices.

use super::{Scalar, Tensor};
use crate::error::{dim_err, Result};

/// Condition number of `PᵀP` above which the inverse is regularized and a
/// warning is logged.
pub const CONDITION_LIMIT: f64 = 1e8;

/// Relative ridge used once [`CONDITION_LIMIT`] is exceeded: `λ = 1e-6·tr(PᵀP)/2`.
pub const RIDGE_SCALE: f64 = 1e-6;

/// Result of [`pinv2`].
#[derive(Clone, Debug)]
pub struct Pinv2<T> {
    /// `(PᵀP + λI)⁻¹Pᵀ`, shape `2×c`.
    pub pinv: Tensor<T>,
    pub lambda: f64,
    /// Condition number of `PᵀP` (infinite when singular).
    pub condition: f64,
}

fn gram<T: Scalar>(p: &Tensor<T>) -> Result<(usize, [f64; 3])> {
    match *p.shape() {
        [c, 2] => {
            let d = p.data();
            let (mut g11, mut g12, mut g22) = (0.0, 0.0, 0.0);
            for r in 0..c {
                let (a, b) = (d[2 * r].f64(), d[2 * r + 1].f64());
                g11 += a * a;
                g12 += a * b;
                g22 += b * b;
            }
            Ok((c, [g11, g12, g22]))
        }
        _ => dim_err(format!("pinv2 expects a c×2 matrix, got {:?}", p.shape())),
    }
}

/// Condition number of the 2×2 symmetric Gram matrix `[[g11,g12],[g12,g22]]`.
pub fn gram_condition(g: [f64; 3]) -> f64 {
    let half_tr = 0.5 * (g[0] + g[2]);
    let det = g[0] * g[2] - g[1] * g[1];
    let disc = (half_tr * half_tr - det).max(0.0).sqrt();
    let (hi, lo) = (half_tr + disc, half_tr - disc);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// `(PᵀP + λI)⁻¹Pᵀ` for an explicit ridge `λ`. Solved in f64 regardless of `T`.
pub fn pinv2_ridge<T: Scalar>(p: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    let (c, [g11, g12, g22]) = gram(p)?;
    let (a, b, d) = (g11 + lambda, g12, g22 + lambda);
    let det = a * d - b * b;
    if det <= 0.0 || !det.is_finite() {
        return Ok(Tensor::zeros(&[2, c]));
    }
    let inv = [[d / det, -b / det], [-b / det, a / det]];
    let src = p.data();
    let mut out = Vec::with_capacity(2 * c);
    for row in inv {
        for r in 0..c {
            out.push(T::of(row[0] * src[2 * r].f64() + row[1] * src[2 * r + 1].f64()));
        }
    }
    Tensor::new(&[2, c], out)
}

/// Generalized inverse of a `c×2` matrix. Exact (`λ = 0`) while `PᵀP` is
/// well conditioned; ridge-regularized beyond [`CONDITION_LIMIT`].
pub fn pinv2<T: Scalar>(p: &Tensor<T>) -> Result<Pinv2<T>> {
    let (_, g) = gram(p)?;
    let condition = gram_condition(g);
    let lambda = if condition > CONDITION_LIMIT {
        let l = RIDGE_SCALE * 0.5 * (g[0] + g[2]);
        log::warn!("prototype Gram matrix condition {condition:.3e}; regularizing with λ={l:.3e}");
        l
    } else {
        0.0
    };
    Ok(Pinv2 { pinv: pinv2_ridge(p, lambda)?, lambda, condition })
}
