//! Scaled dot-product multi-head attention shared by the encoder and the
//! flow transformer.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{softmax_in_place, Matrix};

/// What to keep besides the attention output.
#[derive(Debug, Clone, Copy, Default)]
pub struct Capture {
    /// Pre-softmax logits (before any multiplicative scaling), one `L x T` matrix per head.
    pub logits: bool,
    /// Post-softmax weights, one `L x T` matrix per head.
    pub weights: bool,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Concatenated head outputs, `L x D`.
    pub output: Matrix,
    pub logits: Vec<Matrix>,
    pub weights: Vec<Matrix>,
}

fn head_slices(m: &Matrix, heads: usize) -> Vec<Matrix> {
    let dh = m.cols() / heads;
    (0..heads)
        .map(|h| {
            let mut out = Matrix::zeros(m.rows(), dh);
            for r in 0..m.rows() {
                out.row_mut(r).copy_from_slice(&m.row(r)[h * dh..(h + 1) * dh]);
            }
            out
        })
        .collect()
}

/// Multi-head attention of already projected queries `q` (`L x D`) over
/// keys `k` and values `v` (`T x D`).
///
/// Logits are `q_h k_hᵀ / sqrt(D / heads)`. When `scale` is given, each
/// logit is multiplied elementwise by `scale[i][j]` before the softmax.
pub fn multi_head_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    scale: Option<&Matrix>,
    capture: Capture,
) -> AttentionOutput {
    let (l, d) = q.shape();
    let t = k.rows();
    assert_eq!(k.cols(), d);
    assert_eq!(v.shape(), (t, d));
    assert!(heads > 0 && d % heads == 0);
    if let Some(s) = scale {
        assert_eq!(s.shape(), (l, t));
    }
    let dh = d / heads;
    let inv_sqrt = 1.0 / libm::sqrt(dh as f64);
    let ks = head_slices(k, heads);
    let vs = head_slices(v, heads);

    let mut output = Matrix::zeros(l, d);
    let mut logits = Vec::new();
    let mut weights = Vec::new();
    let mut row = vec![0.0; t];
    for h in 0..heads {
        let mut lg = if capture.logits { Matrix::zeros(l, t) } else { Matrix::zeros(0, 0) };
        let mut wt = if capture.weights { Matrix::zeros(l, t) } else { Matrix::zeros(0, 0) };
        for i in 0..l {
            let qi = &q.row(i)[h * dh..(h + 1) * dh];
            for (j, slot) in row.iter_mut().enumerate() {
                let dot: f64 = qi.iter().zip(ks[h].row(j)).map(|(a, b)| a * b).sum();
                *slot = dot * inv_sqrt;
            }
            if capture.logits {
                lg.row_mut(i).copy_from_slice(&row);
            }
            if let Some(s) = scale {
                for (x, e) in row.iter_mut().zip(s.row(i)) {
                    *x *= e;
                }
            }
            softmax_in_place(&mut row);
            if capture.weights {
                wt.row_mut(i).copy_from_slice(&row);
            }
            let out = &mut output.row_mut(i)[h * dh..(h + 1) * dh];
            for (j, &p) in row.iter().enumerate() {
                for (o, x) in out.iter_mut().zip(vs[h].row(j)) {
                    *o += p * x;
                }
            }
        }
        if capture.logits {
            logits.push(lg);
        }
        if capture.weights {
            weights.push(wt);
        }
    }
    AttentionOutput { output, logits, weights }
}
