//! Sparse voxel latents, dense occupancy grids, voxel index sets and the
//! one-pass kNN majority-vote refinement of a selection.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::Matrix;

/// Integer lattice coordinate `(x, y, z)`; ordering is lexicographic.
pub type Position = [u32; 3];

/// Active voxel positions with one latent row per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelLatent {
    grid_size: u32,
    positions: Vec<Position>,
    latents: Matrix,
}

impl SparseVoxelLatent {
    pub fn new(grid_size: u32, positions: Vec<Position>, latents: Matrix) -> Result<Self> {
        validate_positions(grid_size, &positions)?;
        if latents.rows() != positions.len() {
            return Err(Error::Shape(format!(
                "{} latent rows for {} voxels",
                latents.rows(),
                positions.len()
            )));
        }
        if !latents.is_finite() {
            return Err(Error::Numeric("non-finite latent value".into()));
        }
        Ok(Self { grid_size, positions, latents })
    }

    pub fn grid_size(&self) -> u32 {
        self.grid_size
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn latents(&self) -> &Matrix {
        &self.latents
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.latents.cols()
    }

    pub fn into_parts(self) -> (u32, Vec<Position>, Matrix) {
        (self.grid_size, self.positions, self.latents)
    }
}

/// Checks positions are non-empty, inside `[0, n)³` and strictly increasing.
pub fn validate_positions(grid_size: u32, positions: &[Position]) -> Result<()> {
    if positions.is_empty() {
        return Err(Error::EmptyStructure);
    }
    if let Some(p) = positions.iter().find(|p| p.iter().any(|&c| c >= grid_size)) {
        return Err(Error::Geometry(format!("voxel {p:?} lies outside a grid of size {grid_size}")));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Geometry("voxel positions must be strictly increasing".into()));
    }
    Ok(())
}

/// `N x N x N` occupancy grid, indexed `(x * N + y) * N + z`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseBinaryGrid {
    size: usize,
    bits: Vec<bool>,
}

impl DenseBinaryGrid {
    pub fn empty(size: usize) -> Self {
        Self { size, bits: vec![false; size * size * size] }
    }

    pub fn filled(size: usize) -> Self {
        Self { size, bits: vec![true; size * size * size] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[(x * self.size + y) * self.size + z]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        self.bits[(x * self.size + y) * self.size + z] = v;
    }
}

/// Lexicographically sorted positions of all active cells.
pub fn grid_to_positions(grid: &DenseBinaryGrid) -> Result<Vec<Position>> {
    let n = grid.size();
    // Flat index order is already lexicographic in (x, y, z).
    let out: Vec<Position> = grid
        .bits
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| [(i / (n * n)) as u32, ((i / n) % n) as u32, (i % n) as u32])
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyStructure);
    }
    Ok(out)
}

/// Sorted set of voxel indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct VoxelSelection(Vec<usize>);

impl VoxelSelection {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn all(len: usize) -> Self {
        Self((0..len).collect())
    }

    pub fn from_unsorted(mut v: Vec<usize>) -> Self {
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    pub fn from_sorted(v: Vec<usize>, bound: usize) -> Result<Self> {
        if v.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("voxel selection must be strictly increasing".into()));
        }
        if let Some(&last) = v.last() {
            if last >= bound {
                return Err(Error::OutOfBounds { index: last, bound });
            }
        }
        Ok(Self(v))
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        Self(mask.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect())
    }

    pub fn to_mask(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        for &i in &self.0 {
            m[i] = true;
        }
        m
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn is_disjoint(&self, other: &VoxelSelection) -> bool {
        self.0.iter().all(|&i| !other.contains(i))
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

/// Parameters of the majority-vote refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnVoteParams {
    pub k: usize,
    /// An unselected voxel joins when at least `fill_frac * k` neighbors are selected.
    pub fill_frac: f64,
    /// A selected voxel leaves when fewer than `clear_frac * k` neighbors are selected.
    pub clear_frac: f64,
}

impl Default for KnnVoteParams {
    fn default() -> Self {
        Self { k: 16, fill_frac: 0.6, clear_frac: 0.4 }
    }
}

impl KnnVoteParams {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.k == 0 || self.k >= len {
            return Err(Error::Parameter(format!("k = {} must satisfy 0 < k < L = {len}", self.k)));
        }
        if !(0.0 <= self.clear_frac && self.clear_frac <= self.fill_frac && self.fill_frac <= 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 <= clear_frac ({}) <= fill_frac ({}) <= 1",
                self.clear_frac, self.fill_frac
            )));
        }
        Ok(())
    }
}

#[inline]
fn dist2(a: &Position, b: &Position) -> u64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = i64::from(p) - i64::from(q);
            (d * d) as u64
        })
        .sum()
}

/// The `k` nearest other voxels of voxel `i`, closest first.
///
/// Distance is Euclidean on lattice coordinates; equal distances are ordered
/// by position, which for sorted positions is the index order.
pub fn nearest_neighbors(positions: &[Position], i: usize, k: usize) -> Vec<usize> {
    let origin = &positions[i];
    let mut keyed: Vec<(u64, usize)> =
        positions.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, p)| (dist2(origin, p), j)).collect();
    let k = k.min(keyed.len());
    if k == 0 {
        return Vec::new();
    }
    keyed.select_nth_unstable(k - 1);
    keyed.truncate(k);
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, j)| j).collect()
}

/// Decides membership of voxel `i` after refinement, reading only `selected`.
pub fn vote(selected: &[bool], positions: &[Position], i: usize, params: &KnnVoteParams) -> bool {
    let s = nearest_neighbors(positions, i, params.k).into_iter().filter(|&j| selected[j]).count() as f64;
    let k = params.k as f64;
    if selected[i] {
        s >= params.clear_frac * k
    } else {
        s >= params.fill_frac * k
    }
}

/// Applies the fill/clear vote once, every voxel voting against the input
/// selection.
pub fn knn_vote_refine(
    sel: &VoxelSelection,
    positions: &[Position],
    params: &KnnVoteParams,
) -> Result<VoxelSelection> {
    let order: Vec<usize> = (0..positions.len()).collect();
    knn_vote_refine_in_order(sel, positions, params, &order)
}

/// As [`knn_vote_refine`], visiting voxels in `order`. The result does not
/// depend on the order.
pub fn knn_vote_refine_in_order(
    sel: &VoxelSelection,
    positions: &[Position],
    params: &KnnVoteParams,
    order: &[usize],
) -> Result<VoxelSelection> {
    let len = positions.len();
    params.validate(len)?;
    if let Some(&last) = sel.as_slice().last() {
        if last >= len {
            return Err(Error::OutOfBounds { index: last, bound: len });
        }
    }
    let before = sel.to_mask(len);
    let mut after = vec![false; len];
    for &i in order {
        after[i] = vote(&before, positions, i, params);
    }
    Ok(VoxelSelection::from_mask(&after))
}

/// `[0, len)` minus the union of `sels`.
pub fn unaligned_complement(sels: &[VoxelSelection], len: usize) -> Result<VoxelSelection> {
    let mut covered = vec![false; len];
    for s in sels {
        for i in s.iter() {
            if i >= len {
                return Err(Error::OutOfBounds { index: i, bound: len });
            }
            covered[i] = true;
        }
    }
    Ok(VoxelSelection((0..len).filter(|&i| !covered[i]).collect()))
}
