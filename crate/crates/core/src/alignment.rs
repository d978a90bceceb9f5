//! Bidirectional attention alignment between condition tokens and voxels.
//!
//! Forward: token-axis softmax of head-summed logits, per-voxel mass on a
//! token subset, threshold, then kNN vote refinement. Reverse: voxel-axis
//! softmax, per-token mass on a voxel subset, threshold.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::CrossAttentionRecord;
use crate::math::{entropy, softmax_cols, softmax_rows, Matrix};
use crate::patch_grid::{TokenIndexSet, TokenLayout};
use crate::voxel::{knn_vote_refine, KnnVoteParams, Position, VoxelSelection};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.55;
pub const DEFAULT_HEAD_COUNT: usize = 3;

/// Which attention heads feed the alignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadSubset {
    /// The `n` heads with the lowest mean row entropy.
    Auto(usize),
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    pub score_threshold: f64,
    pub reverse_threshold: f64,
    pub heads: HeadSubset,
    pub block_index: usize,
    /// Average the head-summed logits of every block instead of reading one.
    pub average_blocks: bool,
    /// `None` skips the kNN vote.
    pub refine: Option<KnnVoteParams>,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            reverse_threshold: DEFAULT_SCORE_THRESHOLD,
            heads: HeadSubset::Auto(DEFAULT_HEAD_COUNT),
            block_index: 0,
            average_blocks: false,
            refine: Some(KnnVoteParams::default()),
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("score_threshold", self.score_threshold), ("reverse_threshold", self.reverse_threshold)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} {v} outside [0, 1]")));
            }
        }
        match &self.heads {
            HeadSubset::Auto(0) => Err(Error::Parameter("automatic head count must be >= 1".into())),
            HeadSubset::Explicit(h) if h.is_empty() => {
                Err(Error::Parameter("explicit head list is empty".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Mean row entropy of the token-axis softmax of one head.
pub fn mean_row_entropy(logits: &Matrix) -> f64 {
    let p = softmax_rows(logits);
    if p.rows() == 0 {
        return 0.0;
    }
    (0..p.rows()).map(|r| entropy(p.row(r))).sum::<f64>() / p.rows() as f64
}

/// The `n` sharpest heads of `block`, ranked by ascending mean row entropy
/// (ties by head index).
pub fn select_heads(record: &CrossAttentionRecord, block: usize, n: usize) -> Result<Vec<usize>> {
    let heads =
        record.logits.get(block).ok_or(Error::OutOfBounds { index: block, bound: record.block_count() })?;
    if n == 0 || n > heads.len() {
        return Err(Error::Parameter(format!("head count {n} must be in 1..={}", heads.len())));
    }
    let mut ranked: Vec<(f64, usize)> = heads.iter().map(mean_row_entropy).zip(0..).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(n).map(|(_, h)| h).collect())
}

fn resolve_heads(record: &CrossAttentionRecord, block: usize, subset: &HeadSubset) -> Result<Vec<usize>> {
    match subset {
        HeadSubset::Auto(n) => select_heads(record, block, *n),
        HeadSubset::Explicit(list) => {
            if let Some(&h) = list.iter().find(|&&h| h >= record.head_count()) {
                return Err(Error::OutOfBounds { index: h, bound: record.head_count() });
            }
            Ok(list.clone())
        }
    }
}

fn head_sum(record: &CrossAttentionRecord, block: usize, heads: &[usize]) -> Matrix {
    let (l, t) = record.shape();
    let mut sum = Matrix::zeros(l, t);
    for &h in heads {
        sum.add_assign(record.head(block, h));
    }
    sum
}

/// Summed logits of the configured heads, from one block or averaged over
/// all blocks. Returns the heads used for each block read.
pub fn combined_logits(
    record: &CrossAttentionRecord,
    cfg: &AlignmentConfig,
) -> Result<(Matrix, Vec<Vec<usize>>)> {
    cfg.validate()?;
    if record.block_count() == 0 {
        return Err(Error::Parameter("attention record holds no blocks".into()));
    }
    let blocks: Vec<usize> = if cfg.average_blocks {
        (0..record.block_count()).collect()
    } else {
        if cfg.block_index >= record.block_count() {
            return Err(Error::OutOfBounds { index: cfg.block_index, bound: record.block_count() });
        }
        vec![cfg.block_index]
    };
    let (l, t) = record.shape();
    let mut acc = Matrix::zeros(l, t);
    let mut used = Vec::new();
    for &b in &blocks {
        let heads = resolve_heads(record, b, &cfg.heads)?;
        acc.add_assign(&head_sum(record, b, &heads));
        used.push(heads);
    }
    if blocks.len() > 1 {
        let inv = 1.0 / blocks.len() as f64;
        for v in acc.as_mut_slice() {
            *v *= inv;
        }
    }
    Ok((acc, used))
}

/// Per-voxel attention mass on `columns` after a token-axis softmax.
pub fn forward_scores(logits: &Matrix, columns: &[usize]) -> Result<Vec<f64>> {
    if let Some(&c) = columns.iter().find(|&&c| c >= logits.cols()) {
        return Err(Error::OutOfBounds { index: c, bound: logits.cols() });
    }
    let p = softmax_rows(logits);
    Ok((0..p.rows()).map(|i| columns.iter().map(|&c| p.get(i, c)).sum()).collect())
}

/// Per-token attention mass on `rows` after a voxel-axis softmax.
pub fn reverse_scores(logits: &Matrix, rows: &VoxelSelection) -> Result<Vec<f64>> {
    if let Some(&r) = rows.as_slice().last() {
        if r >= logits.rows() {
            return Err(Error::OutOfBounds { index: r, bound: logits.rows() });
        }
    }
    let p = softmax_cols(logits);
    let mut scores = vec![0.0; p.cols()];
    for i in rows.iter() {
        for (s, v) in scores.iter_mut().zip(p.row(i)) {
            *s += v;
        }
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardAlignment {
    pub heads: Vec<Vec<usize>>,
    pub scores: Vec<f64>,
    /// Voxels at or above the threshold.
    pub raw: VoxelSelection,
    /// `raw` after the kNN vote (equal to `raw` when refinement is off).
    pub refined: VoxelSelection,
}

/// Voxels aligned with the token `columns` of one image's attention record.
pub fn forward_align(
    record: &CrossAttentionRecord,
    columns: &[usize],
    cfg: &AlignmentConfig,
    positions: &[Position],
) -> Result<ForwardAlignment> {
    let (logits, heads) = combined_logits(record, cfg)?;
    if positions.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} positions for {} attention rows",
            positions.len(),
            logits.rows()
        )));
    }
    let scores = forward_scores(&logits, columns)?;
    let raw =
        VoxelSelection::from_mask(&scores.iter().map(|&s| s >= cfg.score_threshold).collect::<Vec<_>>());
    let refined = match &cfg.refine {
        Some(params) => knn_vote_refine(&raw, positions, params)?,
        None => raw.clone(),
    };
    Ok(ForwardAlignment { heads, scores, raw, refined })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReverseAlignment {
    pub heads: Vec<Vec<usize>>,
    /// One score per token of the record, CLS and REG included.
    pub scores: Vec<f64>,
    /// Selected patch indices of the global image.
    pub selected: TokenIndexSet,
}

/// Patch tokens of the global image that attend to the `unaligned` voxels.
/// CLS and REG tokens are scored but never selected.
pub fn reverse_align(
    record: &CrossAttentionRecord,
    layout: &TokenLayout,
    unaligned: &VoxelSelection,
    cfg: &AlignmentConfig,
) -> Result<ReverseAlignment> {
    let (logits, heads) = combined_logits(record, cfg)?;
    if logits.cols() != layout.total_count() {
        return Err(Error::Shape(format!(
            "record has {} tokens, layout has {}",
            logits.cols(),
            layout.total_count()
        )));
    }
    let scores = reverse_scores(&logits, unaligned)?;
    let selected = layout
        .patch_range()
        .filter(|&pos| scores[pos] >= cfg.reverse_threshold)
        .map(|pos| layout.patch_of_position(pos).expect("patch range"))
        .collect();
    Ok(ReverseAlignment { heads, scores, selected: TokenIndexSet::from_unsorted(selected) })
}

/// Counts of scores in `bins` equal-width bins over `[0, 1]`; 1.0 falls in
/// the last bin and values are clamped into range.
pub fn score_histogram(scores: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0usize; bins];
    if bins == 0 {
        return h;
    }
    for &s in scores {
        let b = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn random_record(blocks: usize, heads: usize, l: usize, t: usize, seed: u64) -> CrossAttentionRecord {
        let mut rng = SplitMix64::new(seed);
        CrossAttentionRecord {
            t: 1.0,
            logits: (0..blocks)
                .map(|_| {
                    (0..heads)
                        .map(|_| {
                            Matrix::from_vec(l, t, (0..l * t).map(|_| rng.uniform(3.0)).collect()).unwrap()
                        })
                        .collect()
                })
                .collect(),
        }
    }

    fn line(l: usize) -> Vec<Position> {
        (0..l as u32).map(|i| [0, 0, i]).collect()
    }

    fn no_refine() -> AlignmentConfig {
        AlignmentConfig { refine: None, heads: HeadSubset::Explicit(vec![0, 1]), ..Default::default() }
    }

    #[test]
    fn defaults() {
        let c = AlignmentConfig::default();
        assert_eq!(c.score_threshold, 0.55);
        assert_eq!(c.reverse_threshold, 0.55);
        assert_eq!(c.heads, HeadSubset::Auto(3));
        assert_eq!(c.refine, Some(KnnVoteParams { k: 16, fill_frac: 0.6, clear_frac: 0.4 }));
    }

    #[test]
    fn sharp_head_ranks_first() {
        let l = 4;
        let t = 5;
        let mut sharp = Matrix::zeros(l, t);
        for i in 0..l {
            sharp.set(i, i % t, 200.0);
        }
        let rec = CrossAttentionRecord { t: 1.0, logits: vec![vec![Matrix::zeros(l, t), sharp]] };
        assert_eq!(select_heads(&rec, 0, 1).unwrap(), vec![1]);
        assert_eq!(select_heads(&rec, 0, 2).unwrap(), vec![1, 0]);
        assert!(select_heads(&rec, 0, 3).is_err());
        assert!(select_heads(&rec, 1, 1).is_err());
    }

    #[test]
    fn head_ranking_matches_entropy_loops() {
        let rec = random_record(1, 4, 6, 9, 3);
        let mut ent = Vec::new();
        for h in 0..4 {
            let m = rec.head(0, h);
            let mut total = 0.0;
            for i in 0..6 {
                let z: f64 = (0..9).map(|j| m.get(i, j).exp()).sum();
                total -= (0..9)
                    .map(|j| {
                        let p = m.get(i, j).exp() / z;
                        p * p.ln()
                    })
                    .sum::<f64>();
            }
            ent.push((total / 6.0, h));
        }
        ent.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let expect: Vec<usize> = ent.iter().map(|e| e.1).collect();
        assert_eq!(select_heads(&rec, 0, 4).unwrap(), expect);
    }

    #[test]
    fn full_and_empty_token_sets() {
        let rec = random_record(1, 2, 10, 7, 5);
        let all: Vec<usize> = (0..7).collect();
        let f = forward_align(&rec, &all, &no_refine(), &line(10)).unwrap();
        assert!(f.scores.iter().all(|s| (s - 1.0).abs() < 1e-9));
        assert_eq!(f.raw, VoxelSelection::all(10));
        let e = forward_align(&rec, &[], &no_refine(), &line(10)).unwrap();
        assert!(e.scores.iter().all(|&s| s == 0.0));
        assert!(e.raw.is_empty());
    }

    #[test]
    fn reverse_full_and_empty_voxel_sets() {
        let layout = TokenLayout::new(2, 6).unwrap();
        let rec = random_record(1, 2, 12, 9, 6);
        let r = reverse_align(&rec, &layout, &VoxelSelection::all(12), &no_refine()).unwrap();
        assert!(r.scores.iter().all(|s| (s - 1.0).abs() < 1e-9));
        assert_eq!(r.selected.as_slice(), &[0, 1, 2, 3, 4, 5]);
        let r = reverse_align(&rec, &layout, &VoxelSelection::empty(), &no_refine()).unwrap();
        assert!(r.selected.is_empty());
        let bad = TokenLayout::new(1, 6).unwrap();
        assert!(reverse_align(&rec, &bad, &VoxelSelection::empty(), &no_refine()).is_err());
    }

    #[test]
    fn refinement_runs_on_the_kept_set() {
        let rec = random_record(1, 2, 40, 6, 7);
        let cfg = AlignmentConfig {
            refine: Some(KnnVoteParams { k: 4, fill_frac: 0.6, clear_frac: 0.4 }),
            ..no_refine()
        };
        let f = forward_align(&rec, &[0, 1, 2], &cfg, &line(40)).unwrap();
        let again =
            knn_vote_refine(&f.raw, &line(40), &KnnVoteParams { k: 4, fill_frac: 0.6, clear_frac: 0.4 })
                .unwrap();
        assert_eq!(f.refined, again);
    }

    #[test]
    fn block_averaging() {
        let rec = random_record(2, 2, 5, 4, 8);
        let cfg = AlignmentConfig { average_blocks: true, ..no_refine() };
        let (avg, heads) = combined_logits(&rec, &cfg).unwrap();
        assert_eq!(heads.len(), 2);
        for i in 0..5 {
            for j in 0..4 {
                let e = (rec.head(0, 0).get(i, j)
                    + rec.head(0, 1).get(i, j)
                    + rec.head(1, 0).get(i, j)
                    + rec.head(1, 1).get(i, j))
                    / 2.0;
                assert!((avg.get(i, j) - e).abs() < 1e-12);
            }
        }
        let cfg = AlignmentConfig { block_index: 2, ..no_refine() };
        assert!(combined_logits(&rec, &cfg).is_err());
    }

    #[test]
    fn histogram_bins() {
        let h = score_histogram(&[0.0, 0.05, 0.5, 0.9375, 1.0], 16);
        assert_eq!(h[0], 2);
        assert_eq!(h[8], 1);
        assert_eq!(h[15], 2);
        assert_eq!(h.iter().sum::<usize>(), 5);
    }

    proptest! {
        #[test]
        fn row_shift_invariance(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let rec = random_record(1, 1, 8, 6, seed);
            let mut shifted = rec.clone();
            for j in 0..6 {
                let v = shifted.logits[0][0].get(3, j);
                shifted.logits[0][0].set(3, j, v + shift);
            }
            let cfg = AlignmentConfig { heads: HeadSubset::Explicit(vec![0]), ..no_refine() };
            let a = forward_align(&rec, &[1, 4], &cfg, &line(8)).unwrap();
            let b = forward_align(&shifted, &[1, 4], &cfg, &line(8)).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn nested_subsets_are_monotone(seed in any::<u64>()) {
            let rec = random_record(1, 2, 10, 12, seed);
            let mut rng = SplitMix64::new(seed ^ 1);
            let small: Vec<usize> = (0..12).filter(|_| rng.next_f64() < 0.3).collect();
            let mut large = small.clone();
            large.extend((0..12).filter(|c| !small.contains(c) && rng.next_f64() < 0.5));
            let a = forward_align(&rec, &small, &no_refine(), &line(10)).unwrap();
            let b = forward_align(&rec, &large, &no_refine(), &line(10)).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                prop_assert!(*x <= *y + 1e-12);
            }
        }

        #[test]
        fn raising_threshold_never_grows_selection(seed in any::<u64>(), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let rec = random_record(1, 2, 15, 8, seed);
            let at = |th| forward_align(&rec, &[0, 2, 5], &AlignmentConfig { score_threshold: th, ..no_refine() }, &line(15)).unwrap().raw;
            let a = at(lo);
            let b = at(hi);
            prop_assert!(b.iter().all(|i| a.contains(i)));
        }

        #[test]
        fn single_head_sum_is_that_head(seed in any::<u64>(), head in 0usize..3) {
            let rec = random_record(1, 3, 7, 5, seed);
            let cfg = AlignmentConfig { heads: HeadSubset::Explicit(vec![head]), ..no_refine() };
            let f = forward_align(&rec, &[0, 3], &cfg, &line(7)).unwrap();
            let own = forward_scores(rec.head(0, head), &[0, 3]).unwrap();
            prop_assert_eq!(f.scores, own);
        }
    }
}
