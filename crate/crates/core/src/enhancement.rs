//! Local attention enhancement: a multiplicative `L x T` matrix applied to
//! cross-attention logits before the softmax.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::patch_grid::TokenIndexSet;
use crate::voxel::VoxelSelection;

pub const DEFAULT_BETA: f64 = 1.0;

/// `1 + beta * (1 - f)` with `f = selected_count / patch_total`.
///
/// Smaller selected regions get larger strengths; a full-image selection
/// gets exactly 1.
pub fn default_lambda(selected_count: usize, patch_total: usize, beta: f64) -> Result<f64> {
    if patch_total == 0 || selected_count > patch_total {
        return Err(Error::Parameter(format!(
            "need 0 <= selected ({selected_count}) <= total ({patch_total}) and total >= 1"
        )));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("beta {beta} must be finite and >= 0")));
    }
    let f = selected_count as f64 / patch_total as f64;
    Ok(1.0 + beta * (1.0 - f))
}

/// Voxel rows and unified-token columns that share one strength.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancementSource {
    pub rows: VoxelSelection,
    pub cols: TokenIndexSet,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancementMatrix(Matrix);

impl EnhancementMatrix {
    pub fn identity(voxels: usize, tokens: usize) -> Self {
        Self(Matrix::filled(voxels, tokens, 1.0))
    }

    /// Wraps an arbitrary strictly positive matrix.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.as_slice().iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Parameter("enhancement entries must be finite and > 0".into()));
        }
        Ok(Self(m))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    /// True when every entry is exactly 1.
    pub fn is_identity(&self) -> bool {
        self.0.as_slice().iter().all(|&v| v == 1.0)
    }

    /// Number of entries different from 1.
    pub fn scaled_count(&self) -> usize {
        self.0.as_slice().iter().filter(|&&v| v != 1.0).count()
    }
}

/// Starts from all ones and writes each source's strength over its
/// rows x cols block. Where blocks overlap the largest strength wins.
pub fn build_enhancement(
    sources: &[EnhancementSource],
    voxels: usize,
    tokens: usize,
) -> Result<EnhancementMatrix> {
    let mut m = Matrix::filled(voxels, tokens, 1.0);
    let mut covered = vec![false; voxels * tokens];
    for s in sources {
        if !(s.lambda > 0.0 && s.lambda.is_finite()) {
            return Err(Error::Parameter(format!("lambda {} must be finite and > 0", s.lambda)));
        }
        if let Some(&r) = s.rows.as_slice().last() {
            if r >= voxels {
                return Err(Error::OutOfBounds { index: r, bound: voxels });
            }
        }
        if let Some(&c) = s.cols.as_slice().last() {
            if c >= tokens {
                return Err(Error::OutOfBounds { index: c, bound: tokens });
            }
        }
        for i in s.rows.iter() {
            for j in s.cols.iter() {
                let cell = i * tokens + j;
                if !covered[cell] || s.lambda > m.get(i, j) {
                    m.set(i, j, s.lambda);
                    covered[cell] = true;
                }
            }
        }
    }
    Ok(EnhancementMatrix(m))
}

/// `logits ⊙ E`. Negative logits shrink toward zero when the strength exceeds 1.
pub fn apply_enhancement(logits: &Matrix, e: &EnhancementMatrix) -> Result<Matrix> {
    if logits.shape() != e.shape() {
        return Err(Error::Shape(format!(
            "logits are {:?} but enhancement is {:?}",
            logits.shape(),
            e.shape()
        )));
    }
    let data: Vec<f64> = logits.as_slice().iter().zip(e.0.as_slice()).map(|(a, b)| a * b).collect();
    Matrix::from_vec(logits.rows(), logits.cols(), data)
}
