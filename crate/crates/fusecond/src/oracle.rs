//! Naive reference implementations used to cross-check the optimized
//! kernels. Written with explicit loops and `std` math, sharing no code
//! with the routines they verify.

#![allow(clippy::needless_range_loop)]
use fusecond_core::flow::{FlowBlock, FlowModel};
use fusecond_core::patch_grid::PatchMask;
use fusecond_core::voxel::Position;
use fusecond_core::Matrix;

pub type Dense = Vec<Vec<f64>>;

pub fn to_dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn patch_indices(mask: &PatchMask) -> Vec<usize> {
    let mut out = Vec::new();
    for r in 0..mask.rows() {
        for c in 0..mask.cols() {
            if mask.get(r, c) {
                out.push(r * mask.cols() + c);
            }
        }
    }
    out
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    let mut out = vec![vec![0.0; cols]; a.len()];
    for i in 0..a.len() {
        for j in 0..cols {
            let mut s = 0.0;
            for k in 0..inner {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn layer_norm(a: &Dense) -> Dense {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().map(|v| (v - mean) / (var + 1e-6).sqrt()).collect()
        })
        .collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn sinusoid(pos: f64, width: usize) -> Vec<f64> {
    (0..width)
        .map(|c| {
            let w = 10000f64.powf(-2.0 * (c / 2) as f64 / width as f64);
            if c % 2 == 0 {
                (pos * w).sin()
            } else {
                (pos * w).cos()
            }
        })
        .collect()
}

/// Output (before the output projection) and per-head logits of one
/// block's cross-attention.
pub fn cross_attention(
    block: &FlowBlock,
    x: &Dense,
    tokens: &Dense,
    heads: usize,
    scale: Option<&Dense>,
) -> (Dense, Vec<Dense>) {
    let q = matmul(&layer_norm(x), &to_dense(&block.wq));
    let k = matmul(tokens, &to_dense(&block.wk));
    let v = matmul(tokens, &to_dense(&block.wv));
    let c = q[0].len();
    let dh = c / heads;
    let mut out = vec![vec![0.0; c]; x.len()];
    let mut logits = Vec::new();
    for h in 0..heads {
        let mut lg = vec![vec![0.0; tokens.len()]; x.len()];
        for i in 0..x.len() {
            for j in 0..tokens.len() {
                let mut dot = 0.0;
                for d in 0..dh {
                    dot += q[i][h * dh + d] * k[j][h * dh + d];
                }
                lg[i][j] = dot / (dh as f64).sqrt();
            }
            let scaled: Vec<f64> = match scale {
                Some(s) => lg[i].iter().zip(&s[i]).map(|(a, b)| a * b).collect(),
                None => lg[i].clone(),
            };
            let p = softmax(&scaled);
            for d in 0..dh {
                let mut acc = 0.0;
                for j in 0..tokens.len() {
                    acc += p[j] * v[j][h * dh + d];
                }
                out[i][h * dh + d] = acc;
            }
        }
        logits.push(lg);
    }
    (out, logits)
}

/// Full velocity field and every block's logits.
pub fn velocity(
    model: &FlowModel,
    positions: &[Position],
    z: &Dense,
    t: f64,
    tokens: &Dense,
    scale: Option<&Dense>,
) -> (Dense, Vec<Vec<Dense>>) {
    let cfg = model.config();
    let c = cfg.latent_dim;
    let time = sinusoid(1000.0 * t, c);
    let cond: Dense = positions
        .iter()
        .map(|p| {
            let mut row = vec![0.0; c];
            for axis in 0..3 {
                let (lo, hi) = (axis * c / 3, (axis + 1) * c / 3);
                let code = sinusoid(f64::from(p[axis]), hi - lo);
                row[lo..hi].copy_from_slice(&code);
            }
            row.iter().zip(&time).map(|(a, b)| a + b).collect()
        })
        .collect();
    let mut x = z.clone();
    let mut all_logits = Vec::new();
    for (b, block) in model.blocks().iter().enumerate() {
        for i in 0..x.len() {
            for j in 0..c {
                x[i][j] += cond[i][j];
            }
        }
        let enhanced = cfg.enhanced_blocks.as_ref().is_none_or(|l| l.contains(&b));
        let (att, logits) =
            cross_attention(block, &x, tokens, cfg.head_count, if enhanced { scale } else { None });
        let proj = matmul(&att, &to_dense(&block.wo));
        for i in 0..x.len() {
            for j in 0..c {
                x[i][j] += proj[i][j];
            }
        }
        let mut h = matmul(&layer_norm(&x), &to_dense(&block.w1));
        for row in h.iter_mut() {
            for (v, bias) in row.iter_mut().zip(&block.b1) {
                *v = gelu(*v + bias);
            }
        }
        let f = matmul(&h, &to_dense(&block.w2));
        for i in 0..x.len() {
            for j in 0..c {
                x[i][j] += f[i][j] + block.b2[j];
            }
        }
        all_logits.push(logits);
    }
    (matmul(&layer_norm(&x), &to_dense(model.output_projection())), all_logits)
}

pub fn head_sum(heads: &[Dense], subset: &[usize]) -> Dense {
    let (l, t) = (heads[0].len(), heads[0][0].len());
    let mut out = vec![vec![0.0; t]; l];
    for &h in subset {
        for i in 0..l {
            for j in 0..t {
                out[i][j] += heads[h][i][j];
            }
        }
    }
    out
}

/// Heads ordered by mean row entropy of their token-axis softmax, lowest first.
pub fn rank_heads(heads: &[Dense]) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = heads
        .iter()
        .enumerate()
        .map(|(h, lg)| {
            let total: f64 = lg
                .iter()
                .map(|row| softmax(row).iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>())
                .sum();
            (total / lg.len() as f64, h)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, h)| h).collect()
}

pub fn forward_scores(logits: &Dense, columns: &[usize]) -> Vec<f64> {
    logits
        .iter()
        .map(|row| {
            let p = softmax(row);
            columns.iter().map(|&c| p[c]).sum()
        })
        .collect()
}

pub fn reverse_scores(logits: &Dense, rows: &[usize]) -> Vec<f64> {
    let t = logits[0].len();
    (0..t)
        .map(|j| {
            let col: Vec<f64> = logits.iter().map(|r| r[j]).collect();
            let p = softmax(&col);
            rows.iter().map(|&i| p[i]).sum()
        })
        .collect()
}

pub fn threshold(scores: &[f64], tau: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&i| scores[i] >= tau).collect()
}

/// One majority-vote pass. Neighbors come from a full sort of all other
/// voxels by squared distance, then lexicographic position.
pub fn knn_refine(selected: &[bool], positions: &[Position], k: usize, fill: f64, clear: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..positions.len() {
        let mut others: Vec<(i64, Position, usize)> = (0..positions.len())
            .filter(|&j| j != i)
            .map(|j| {
                let d: i64 =
                    (0..3).map(|a| (i64::from(positions[i][a]) - i64::from(positions[j][a])).pow(2)).sum();
                (d, positions[j], j)
            })
            .collect();
        others.sort();
        let count = others.iter().take(k).filter(|o| selected[o.2]).count() as f64;
        let keep = if selected[i] { count >= clear * k as f64 } else { count >= fill * k as f64 };
        if keep {
            out.push(i);
        }
    }
    out
}

pub fn complement(sets: &[Vec<usize>], len: usize) -> Vec<usize> {
    (0..len).filter(|i| !sets.iter().any(|s| s.contains(i))).collect()
}

/// Every cell takes the largest strength among the sources covering it, or 1.
pub fn enhancement(sources: &[(Vec<usize>, Vec<usize>, f64)], voxels: usize, tokens: usize) -> Dense {
    let mut out = vec![vec![1.0; tokens]; voxels];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let best = sources
                .iter()
                .filter(|(r, c, _)| r.contains(&i) && c.contains(&j))
                .map(|s| s.2)
                .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.max(l))));
            if let Some(l) = best {
                *cell = l;
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &Dense, b: &Matrix) -> f64 {
    if a.len() != b.rows() || a.iter().any(|r| r.len() != b.cols()) {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(i, j)).abs());
        }
    }
    worst
}
