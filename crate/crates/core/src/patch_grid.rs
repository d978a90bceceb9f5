//! Image and patch-lattice geometry: mask downsampling and token index sets.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};

/// Patch edge length used by the pretrained encoder family this mimics.
pub const DEFAULT_PATCH_SIZE: usize = 14;

/// Minimum fraction of set pixels for a patch to count as selected.
pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageGeometry {
    height_px: usize,
    width_px: usize,
    patch_size_px: usize,
}

impl ImageGeometry {
    /// Rejects zero sizes and images that do not tile exactly into patches.
    pub fn new(height_px: usize, width_px: usize, patch_size_px: usize) -> Result<Self> {
        if height_px == 0 || width_px == 0 || patch_size_px == 0 {
            return Err(Error::Geometry(format!(
                "dimensions must be positive, got {height_px}x{width_px} with patch {patch_size_px}"
            )));
        }
        if !height_px.is_multiple_of(patch_size_px) || !width_px.is_multiple_of(patch_size_px) {
            return Err(Error::Geometry(format!(
                "{height_px}x{width_px} is not divisible by patch size {patch_size_px}"
            )));
        }
        Ok(Self { height_px, width_px, patch_size_px })
    }

    pub fn height_px(&self) -> usize {
        self.height_px
    }

    pub fn width_px(&self) -> usize {
        self.width_px
    }

    pub fn patch_size_px(&self) -> usize {
        self.patch_size_px
    }

    /// Patch rows.
    pub fn rows(&self) -> usize {
        self.height_px / self.patch_size_px
    }

    /// Patch columns.
    pub fn cols(&self) -> usize {
        self.width_px / self.patch_size_px
    }

    pub fn patch_count(&self) -> usize {
        self.rows() * self.cols()
    }
}

/// Binary pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Geometry(format!(
                "mask holds {} values, expected {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, bits: alloc::vec![value; height * width] }
    }

    /// Builds a mask from 0/1 bytes; any other value is rejected.
    pub fn from_u8(height: usize, width: usize, values: &[u8]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Geometry(format!("mask value {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Inclusive-exclusive bounding box `(y0, x0, y1, x1)` of set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                    });
                }
            }
        }
        bb
    }
}

/// Binary mask over the patch lattice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl PatchMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Geometry(format!(
                "patch mask holds {} values, expected {rows}x{cols}",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: alloc::vec![false; rows * cols] }
    }

    /// Rebuilds the indicator mask of an index set.
    pub fn from_indices(rows: usize, cols: usize, indices: &TokenIndexSet) -> Result<Self> {
        let mut m = Self::empty(rows, cols);
        for &i in indices.as_slice() {
            if i >= rows * cols {
                return Err(Error::OutOfBounds { index: i, bound: rows * cols });
            }
            m.bits[i] = true;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.cols + col] = v;
    }
}

/// Sorted, duplicate-free set of indices (patch indices or token columns).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenIndexSet(Vec<usize>);

impl TokenIndexSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// Sorts and deduplicates arbitrary indices.
    pub fn from_unsorted(mut v: Vec<usize>) -> Self {
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    /// Accepts `v` only if it is strictly increasing and every entry is `< bound`.
    pub fn from_sorted(v: Vec<usize>, bound: usize) -> Result<Self> {
        if v.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("index set must be strictly increasing".into()));
        }
        if let Some(&last) = v.last() {
            if last >= bound {
                return Err(Error::OutOfBounds { index: last, bound });
            }
        }
        Ok(Self(v))
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

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

/// Position layout of one encoded image: `CLS, REG_1..REG_r, patch_0..`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    register_count: usize,
    patch_count: usize,
}

impl TokenLayout {
    pub fn new(register_count: usize, patch_count: usize) -> Result<Self> {
        if patch_count == 0 {
            return Err(Error::Geometry("token layout needs at least one patch".into()));
        }
        Ok(Self { register_count, patch_count })
    }

    pub fn register_count(&self) -> usize {
        self.register_count
    }

    pub fn patch_count(&self) -> usize {
        self.patch_count
    }

    pub fn total_count(&self) -> usize {
        1 + self.register_count + self.patch_count
    }

    pub const fn cls_position(&self) -> usize {
        0
    }

    pub fn register_range(&self) -> Range<usize> {
        1..1 + self.register_count
    }

    pub fn patch_range(&self) -> Range<usize> {
        1 + self.register_count..self.total_count()
    }

    #[inline]
    pub fn position_of_patch(&self, patch: usize) -> usize {
        debug_assert!(patch < self.patch_count);
        1 + self.register_count + patch
    }

    pub fn patch_of_position(&self, position: usize) -> Option<usize> {
        self.patch_range().contains(&position).then(|| position - 1 - self.register_count)
    }
}

/// Marks patch `(row, col)` when its pixel coverage reaches `coverage_threshold`.
///
/// A patch with no set pixel is never marked, so a threshold of 0 means
/// "any pixel set" and a threshold of 1 means "fully covered".
pub fn downsample_mask(
    mask: &RegionMask,
    geom: &ImageGeometry,
    coverage_threshold: f64,
) -> Result<PatchMask> {
    if mask.height() != geom.height_px() || mask.width() != geom.width_px() {
        return Err(Error::Geometry(format!(
            "mask is {}x{} but image is {}x{}",
            mask.height(),
            mask.width(),
            geom.height_px(),
            geom.width_px()
        )));
    }
    if !(0.0..=1.0).contains(&coverage_threshold) {
        return Err(Error::Parameter(format!("coverage threshold {coverage_threshold} outside [0, 1]")));
    }
    let p = geom.patch_size_px();
    let area = (p * p) as f64;
    let mut out = PatchMask::empty(geom.rows(), geom.cols());
    for row in 0..geom.rows() {
        for col in 0..geom.cols() {
            let mut set = 0usize;
            for y in row * p..(row + 1) * p {
                for x in col * p..(col + 1) * p {
                    set += usize::from(mask.get(y, x));
                }
            }
            let marked = set > 0 && set as f64 / area >= coverage_threshold;
            out.set(row, col, marked);
        }
    }
    Ok(out)
}

/// Flattened indices `row * cols + col` of every marked patch, ascending.
pub fn patch_indices(pmask: &PatchMask) -> TokenIndexSet {
    let cols = pmask.cols();
    TokenIndexSet(
        pmask
            .bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .inspect(|i| debug_assert!(i / cols < pmask.rows()))
            .collect(),
    )
}

pub fn token_layout(geom: &ImageGeometry, register_count: usize) -> TokenLayout {
    TokenLayout { register_count, patch_count: geom.patch_count() }
}
