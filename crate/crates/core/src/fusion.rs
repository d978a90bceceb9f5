//! Multi-condition token fusion: per-image selection plus concatenation,
//! with a provenance record for every fused row.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::patch_grid::TokenIndexSet;

/// Which condition image a token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceId {
    Local(usize),
    Global,
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceId::Local(k) => write!(f, "local{k}"),
            SourceId::Global => f.write_str("global"),
        }
    }
}

impl core::str::FromStr for SourceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "global" {
            return Ok(SourceId::Global);
        }
        s.strip_prefix("local")
            .and_then(|k| k.parse().ok())
            .map(SourceId::Local)
            .ok_or_else(|| Error::Parameter(format!("unknown source name `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Cls,
    Reg,
    Patch,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenKind::Cls => "CLS",
            TokenKind::Reg => "REG",
            TokenKind::Patch => "PATCH",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenProvenance {
    pub source: SourceId,
    pub kind: TokenKind,
    /// Patch index for `Patch` rows, register index for `Reg` rows.
    pub index: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ConditionSource {
    pub id: SourceId,
    pub tokens: TokenSequence,
    pub selection: TokenIndexSet,
}

impl ConditionSource {
    pub fn new(id: SourceId, tokens: TokenSequence, selection: TokenIndexSet) -> Result<Self> {
        if let Some(&last) = selection.as_slice().last() {
            if last >= tokens.layout.patch_count() {
                return Err(Error::OutOfBounds { index: last, bound: tokens.layout.patch_count() });
            }
        }
        Ok(Self { id, tokens, selection })
    }

    /// Rows this source contributes: `1 + r + |selection|`.
    pub fn retained_count(&self) -> usize {
        1 + self.tokens.layout.register_count() + self.selection.len()
    }
}

/// Fused condition tokens, `T x token_dim`, with per-row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedConditionTokens {
    pub matrix: Matrix,
    pub provenance: Vec<TokenProvenance>,
}

impl UnifiedConditionTokens {
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.matrix.cols()
    }

    /// Sources in row order.
    pub fn sources(&self) -> Vec<SourceId> {
        let mut out: Vec<SourceId> = Vec::new();
        for p in &self.provenance {
            if out.last() != Some(&p.source) {
                out.push(p.source);
            }
        }
        out
    }

    /// Row indices of `source`'s PATCH tokens (CLS and REG rows excluded).
    pub fn columns_of(&self, source: SourceId) -> Result<Vec<usize>> {
        let mut present = false;
        let mut cols = Vec::new();
        for (i, p) in self.provenance.iter().enumerate() {
            if p.source == source {
                present = true;
                if p.kind == TokenKind::Patch {
                    cols.push(i);
                }
            }
        }
        if !present {
            return Err(Error::Lookup(format!("source {source} is not part of the unified tokens")));
        }
        Ok(cols)
    }
}

/// Concatenates CLS, REG and selected patch rows of every source.
///
/// Locals keep their input order; the global source, if any, goes last.
/// Rows are copied verbatim.
pub fn fuse_conditions(sources: &[ConditionSource]) -> Result<UnifiedConditionTokens> {
    let first = sources.first().ok_or_else(|| Error::Fusion("no condition sources".into()))?;
    let dim = first.tokens.token_dim();
    let regs = first.tokens.layout.register_count();
    for (i, s) in sources.iter().enumerate() {
        if s.tokens.token_dim() != dim || s.tokens.layout.register_count() != regs {
            return Err(Error::Fusion(format!(
                "source {} has token_dim {} and {} registers, expected {dim} and {regs}",
                s.id,
                s.tokens.token_dim(),
                s.tokens.layout.register_count()
            )));
        }
        if sources[..i].iter().any(|o| o.id == s.id) {
            return Err(Error::Fusion(format!("source {} appears twice", s.id)));
        }
    }

    let ordered = sources
        .iter()
        .filter(|s| s.id != SourceId::Global)
        .chain(sources.iter().filter(|s| s.id == SourceId::Global));

    let total: usize = sources.iter().map(ConditionSource::retained_count).sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut provenance = Vec::with_capacity(total);
    for s in ordered {
        let layout = &s.tokens.layout;
        data.extend_from_slice(s.tokens.tokens.row(layout.cls_position()));
        provenance.push(TokenProvenance { source: s.id, kind: TokenKind::Cls, index: None });
        for (k, pos) in layout.register_range().enumerate() {
            data.extend_from_slice(s.tokens.tokens.row(pos));
            provenance.push(TokenProvenance { source: s.id, kind: TokenKind::Reg, index: Some(k) });
        }
        for patch in s.selection.iter() {
            data.extend_from_slice(s.tokens.tokens.row(layout.position_of_patch(patch)));
            provenance.push(TokenProvenance { source: s.id, kind: TokenKind::Patch, index: Some(patch) });
        }
    }
    Ok(UnifiedConditionTokens { matrix: Matrix::from_vec(total, dim, data)?, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch_grid::TokenLayout;
    use crate::rng::SplitMix64;
    use alloc::vec;
    use proptest::prelude::*;

    fn seq(regs: usize, patches: usize, dim: usize, seed: u64) -> TokenSequence {
        let layout = TokenLayout::new(regs, patches).unwrap();
        let mut rng = SplitMix64::new(seed);
        let n = layout.total_count() * dim;
        TokenSequence::new(
            layout,
            Matrix::from_vec(layout.total_count(), dim, (0..n).map(|_| rng.uniform(1.0)).collect()).unwrap(),
        )
        .unwrap()
    }

    fn src(id: SourceId, regs: usize, patches: usize, sel: Vec<usize>, seed: u64) -> ConditionSource {
        ConditionSource::new(id, seq(regs, patches, 4, seed), TokenIndexSet::from_unsorted(sel)).unwrap()
    }

    #[test]
    fn full_selection_keeps_every_token() {
        let s = src(SourceId::Local(0), 3, 6, (0..6).collect(), 1);
        let u = fuse_conditions(core::slice::from_ref(&s)).unwrap();
        assert_eq!(u.len(), 1 + 3 + 6);
        assert_eq!(u.matrix, s.tokens.tokens);
    }

    #[test]
    fn empty_selection_keeps_specials_only() {
        let u = fuse_conditions(&[src(SourceId::Local(0), 2, 6, vec![], 1)]).unwrap();
        assert_eq!(u.len(), 3);
        assert!(u.provenance.iter().all(|p| p.kind != TokenKind::Patch));
        assert!(u.columns_of(SourceId::Local(0)).unwrap().is_empty());
    }

    #[test]
    fn patch_columns_by_layout() {
        let u = fuse_conditions(&[src(SourceId::Local(0), 2, 8, vec![1, 4, 6], 1)]).unwrap();
        assert_eq!(u.columns_of(SourceId::Local(0)).unwrap(), vec![3, 4, 5]);

        let u = fuse_conditions(&[
            src(SourceId::Local(0), 0, 4, vec![2], 1),
            src(SourceId::Local(1), 0, 4, vec![0], 2),
        ])
        .unwrap();
        assert_eq!(u.columns_of(SourceId::Local(1)).unwrap(), vec![3]);
        assert!(matches!(u.columns_of(SourceId::Global), Err(Error::Lookup(_))));
    }

    #[test]
    fn global_goes_last() {
        let u = fuse_conditions(&[
            src(SourceId::Global, 1, 4, vec![0], 1),
            src(SourceId::Local(0), 1, 4, vec![1], 2),
            src(SourceId::Local(1), 1, 4, vec![2], 3),
        ])
        .unwrap();
        assert_eq!(u.sources(), vec![SourceId::Local(0), SourceId::Local(1), SourceId::Global]);
    }

    #[test]
    fn mismatched_sources_are_rejected() {
        let a = src(SourceId::Local(0), 1, 4, vec![], 1);
        let b = src(SourceId::Local(1), 2, 4, vec![], 2);
        assert!(matches!(fuse_conditions(&[a.clone(), b]), Err(Error::Fusion(_))));
        assert!(matches!(fuse_conditions(&[a.clone(), a]), Err(Error::Fusion(_))));
        assert!(fuse_conditions(&[]).is_err());
    }

    #[test]
    fn source_names_round_trip() {
        for id in [SourceId::Global, SourceId::Local(0), SourceId::Local(12)] {
            assert_eq!(alloc::string::ToString::to_string(&id).parse::<SourceId>().unwrap(), id);
        }
        assert!("localx".parse::<SourceId>().is_err());
    }

    fn random_sources(seed: u64, k: usize, regs: usize) -> Vec<ConditionSource> {
        let mut rng = SplitMix64::new(seed);
        (0..k)
            .map(|i| {
                let patches = 1 + (rng.next_u64() % 12) as usize;
                let sel = (0..patches).filter(|_| rng.next_f64() < 0.4).collect();
                src(SourceId::Local(i), regs, patches, sel, rng.next_u64())
            })
            .collect()
    }

    proptest! {
        #[test]
        fn row_count_and_lossless_copy(seed in any::<u64>(), k in 1usize..5, regs in 0usize..4) {
            let sources = random_sources(seed, k, regs);
            let u = fuse_conditions(&sources).unwrap();
            let expected: usize = sources.iter().map(|s| 1 + regs + s.selection.len()).sum();
            prop_assert_eq!(u.len(), expected);
            for (row, p) in u.provenance.iter().enumerate() {
                let s = sources.iter().find(|s| s.id == p.source).unwrap();
                let pos = match p.kind {
                    TokenKind::Cls => 0,
                    TokenKind::Reg => 1 + p.index.unwrap(),
                    TokenKind::Patch => s.tokens.layout.position_of_patch(p.index.unwrap()),
                };
                prop_assert_eq!(u.matrix.row(row), s.tokens.tokens.row(pos));
            }
        }

        #[test]
        fn adding_a_source_adds_its_retained_rows(seed in any::<u64>(), k in 1usize..4) {
            let sources = random_sources(seed, k + 1, 2);
            let smaller = fuse_conditions(&sources[..k]).unwrap();
            let larger = fuse_conditions(&sources).unwrap();
            prop_assert_eq!(larger.len() - smaller.len(), 3 + sources[k].selection.len());
        }

        #[test]
        fn columns_match_provenance_scan(seed in any::<u64>(), k in 1usize..5) {
            let sources = random_sources(seed, k, 1);
            let u = fuse_conditions(&sources).unwrap();
            let mut covered = vec![0usize; u.len()];
            for s in &sources {
                let scan: Vec<usize> = u.provenance.iter().enumerate()
                    .filter(|(_, p)| p.source == s.id && p.kind == TokenKind::Patch)
                    .map(|(i, _)| i).collect();
                prop_assert_eq!(u.columns_of(s.id).unwrap(), scan);
                for (i, p) in u.provenance.iter().enumerate() {
                    if p.source == s.id {
                        covered[i] += 1;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c == 1));
        }
    }
}
