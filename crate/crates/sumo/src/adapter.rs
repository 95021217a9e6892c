//! Low-rank adapter extraction from a fine-tuned / pretrained weight pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, check_finite, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBundle {
    /// m×rank
    pub a: Matrix,
    /// rank×n
    pub b: Matrix,
    pub rank: usize,
    /// ‖Δ − AB‖_F, recomputed from the factors.
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMetadata {
    pub rank: usize,
    pub residual_norm: f64,
    pub rows: usize,
    pub cols: usize,
    pub tolerance: f64,
}

/// Factors Δ = W_ft − W_pre as A·B with A = U√S and B = √S·Vᵀ, keeping the
/// singular values above `tolerance·σ₁`. A zero Δ gives rank 0 and empty factors.
pub fn extract_adapter(w_finetuned: &Matrix, w_pretrained: &Matrix, tolerance: f64) -> Result<AdapterBundle> {
    if w_finetuned.shape() != w_pretrained.shape() {
        return Err(Error::ShapeMismatch {
            expected: w_pretrained.shape(),
            got: w_finetuned.shape(),
        });
    }
    if !(tolerance >= 0.0 && tolerance.is_finite()) {
        return Err(Error::InvalidArgument(format!("tolerance must be non-negative, got {tolerance}")));
    }
    check_finite(w_finetuned, "fine-tuned weights")?;
    check_finite(w_pretrained, "pretrained weights")?;
    let delta = w_finetuned - w_pretrained;
    let (m, n) = delta.shape();
    if delta.norm() == 0.0 {
        return Ok(AdapterBundle {
            a: Matrix::zeros(m, 0),
            b: Matrix::zeros(0, n),
            rank: 0,
            residual_norm: 0.0,
        });
    }
    let f = linalg::svd(&delta)?;
    let s1 = f.singular_values[0];
    let rank = f.singular_values.iter().filter(|&&s| s > tolerance * s1).count();
    let mut a = f.u.columns(0, rank).into_owned();
    let mut b = f.v.columns(0, rank).transpose();
    for j in 0..rank {
        let root = f.singular_values[j].sqrt();
        a.column_mut(j).scale_mut(root);
        b.row_mut(j).scale_mut(root);
    }
    let residual_norm = (&delta - &a * &b).norm();
    Ok(AdapterBundle {
        a,
        b,
        rank,
        residual_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matrix_with_singular_values;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_weights_give_rank_zero() {
        let w = Matrix::from_element(3, 4, 0.25);
        let bundle = extract_adapter(&w, &w, 1e-6).unwrap();
        assert_eq!(bundle.rank, 0);
        assert_eq!(bundle.a.shape(), (3, 0));
        assert_eq!(bundle.b.shape(), (0, 4));
    }

    #[test]
    fn exact_low_rank_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pre = linalg::gaussian_matrix(6, 5, &mut rng);
        let delta = matrix_with_singular_values(6, 5, &[3.0, 1.0], &mut rng);
        let bundle = extract_adapter(&(&pre + &delta), &pre, 1e-8).unwrap();
        assert_eq!(bundle.rank, 2);
        assert!(bundle.residual_norm <= 1e-8);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let r = extract_adapter(&Matrix::zeros(2, 3), &Matrix::zeros(3, 2), 0.1);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }
}
