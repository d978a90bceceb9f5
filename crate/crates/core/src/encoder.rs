//! Deterministic ViT-style stand-in for a pretrained patch encoder.
//!
//! Patch pixels go through a seeded linear embedding, receive an additive 2D
//! sinusoidal position code (first half of the channels encodes the patch
//! row, second half the column), and are prepended with a CLS token and `r`
//! register tokens. `depth` pre-norm blocks of global self-attention and a
//! GELU feed-forward then mix all tokens. Registers are kept in the output.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{multi_head_attention, Capture};
use crate::error::{Error, Result};
use crate::math::{gelu, layer_norm_rows, sinusoid_into, Matrix};
use crate::patch_grid::{token_layout, ImageGeometry, RegionMask, TokenLayout};
use crate::rng::{xavier_bound, SplitMix64};

/// `height x width x channels` grid of pixel values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Geometry("pixel grid dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Geometry(format!(
                "{} pixel values do not fill {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub token_dim: usize,
    /// Self-attention blocks; 0 leaves patch tokens as embedding plus position code.
    pub depth: usize,
    pub head_count: usize,
    pub register_count: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { token_dim: 64, depth: 2, head_count: 4, register_count: 4, seed: 0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.head_count == 0 {
            return Err(Error::Parameter("token_dim and head_count must be positive".into()));
        }
        if !self.token_dim.is_multiple_of(self.head_count) {
            return Err(Error::Parameter(format!(
                "token_dim {} is not divisible by head_count {}",
                self.token_dim, self.head_count
            )));
        }
        Ok(())
    }
}

/// Encoded image: one row per token, laid out as described by `layout`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub layout: TokenLayout,
    pub tokens: Matrix,
}

impl TokenSequence {
    pub fn new(layout: TokenLayout, tokens: Matrix) -> Result<Self> {
        if tokens.rows() != layout.total_count() {
            return Err(Error::Shape(format!(
                "{} token rows for a layout of {}",
                tokens.rows(),
                layout.total_count()
            )));
        }
        Ok(Self { layout, tokens })
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn patch_token(&self, patch: usize) -> &[f64] {
        self.tokens.row(self.layout.position_of_patch(patch))
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl EncoderBlock {
    fn seeded(d: usize, rng: &mut SplitMix64) -> Self {
        let hidden = 2 * d;
        let wq = Matrix::xavier(d, d, rng);
        let wk = Matrix::xavier(d, d, rng);
        let wv = Matrix::xavier(d, d, rng);
        let wo = Matrix::xavier(d, d, rng);
        let w1 = Matrix::xavier(d, hidden, rng);
        let b1 = vec![0.0; hidden];
        let w2 = Matrix::xavier(hidden, d, rng);
        let b2 = vec![0.0; d];
        Self { wq, wk, wv, wo, w1, b1, w2, b2 }
    }

    fn forward(&self, x: &mut Matrix, heads: usize, capture: Capture) -> Vec<Matrix> {
        let n = layer_norm_rows(x);
        let att = multi_head_attention(
            &n.matmul(&self.wq),
            &n.matmul(&self.wk),
            &n.matmul(&self.wv),
            heads,
            None,
            capture,
        );
        x.add_assign(&att.output.matmul(&self.wo));

        let n = layer_norm_rows(x);
        let mut hidden = n.matmul(&self.w1);
        hidden.add_row_vector(&self.b1);
        for v in hidden.as_mut_slice() {
            *v = gelu(*v);
        }
        let mut ff = hidden.matmul(&self.w2);
        ff.add_row_vector(&self.b2);
        x.add_assign(&ff);
        att.weights
    }
}

/// Immutable seeded encoder; `encode_*` calls are pure.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    cfg: EncoderConfig,
    patch_size: usize,
    channels: usize,
    embed: Matrix,
    cls: Vec<f64>,
    registers: Vec<Vec<f64>>,
    blocks: Vec<EncoderBlock>,
}

impl ToyEncoder {
    /// Draws all weights from `cfg.seed` in a fixed order: patch embedding,
    /// CLS, registers, then each block.
    pub fn new(cfg: EncoderConfig, patch_size: usize, channels: usize) -> Result<Self> {
        cfg.validate()?;
        if patch_size == 0 || channels == 0 {
            return Err(Error::Parameter("patch size and channels must be positive".into()));
        }
        let d = cfg.token_dim;
        let mut rng = SplitMix64::new(cfg.seed);
        let embed = Matrix::xavier(patch_size * patch_size * channels, d, &mut rng);
        let special = xavier_bound(1, d);
        let cls = (0..d).map(|_| rng.uniform(special)).collect();
        let registers =
            (0..cfg.register_count).map(|_| (0..d).map(|_| rng.uniform(special)).collect()).collect();
        let blocks = (0..cfg.depth).map(|_| EncoderBlock::seeded(d, &mut rng)).collect();
        Ok(Self { cfg, patch_size, channels, embed, cls, registers, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// 2D sinusoidal position code of patch `(row, col)`.
    pub fn position_code(&self, row: usize, col: usize) -> Vec<f64> {
        let d = self.cfg.token_dim;
        let half = d / 2;
        let mut code = vec![0.0; d];
        sinusoid_into(row as f64, &mut code[..half]);
        sinusoid_into(col as f64, &mut code[half..]);
        code
    }

    fn check_input(&self, pixels: &PixelGrid, geom: &ImageGeometry) -> Result<()> {
        if geom.patch_size_px() != self.patch_size {
            return Err(Error::Geometry(format!(
                "encoder expects patch size {}, geometry has {}",
                self.patch_size,
                geom.patch_size_px()
            )));
        }
        if pixels.height() != geom.height_px() || pixels.width() != geom.width_px() {
            return Err(Error::Geometry(format!(
                "pixels are {}x{} but geometry is {}x{}",
                pixels.height(),
                pixels.width(),
                geom.height_px(),
                geom.width_px()
            )));
        }
        if pixels.channels() != self.channels {
            return Err(Error::Geometry(format!(
                "encoder expects {} channels, got {}",
                self.channels,
                pixels.channels()
            )));
        }
        if pixels.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pixel value".into()));
        }
        Ok(())
    }

    fn embed_tokens(&self, pixels: &PixelGrid, geom: &ImageGeometry) -> (TokenLayout, Matrix) {
        let layout = token_layout(geom, self.cfg.register_count);
        let d = self.cfg.token_dim;
        let p = self.patch_size;
        let mut tokens = Matrix::zeros(layout.total_count(), d);
        tokens.row_mut(0).copy_from_slice(&self.cls);
        for (i, reg) in self.registers.iter().enumerate() {
            tokens.row_mut(1 + i).copy_from_slice(reg);
        }
        let mut flat = Vec::with_capacity(p * p * self.channels);
        for row in 0..geom.rows() {
            for col in 0..geom.cols() {
                flat.clear();
                for y in row * p..(row + 1) * p {
                    for x in col * p..(col + 1) * p {
                        flat.extend_from_slice(pixels.pixel(y, x));
                    }
                }
                let pos = self.position_code(row, col);
                let out = tokens.row_mut(layout.position_of_patch(row * geom.cols() + col));
                out.copy_from_slice(&pos);
                for (k, &v) in flat.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    for (o, w) in out.iter_mut().zip(self.embed.row(k)) {
                        *o += v * w;
                    }
                }
            }
        }
        (layout, tokens)
    }

    pub fn encode_image(&self, pixels: &PixelGrid, geom: &ImageGeometry) -> Result<TokenSequence> {
        Ok(self.encode_with_attention(pixels, geom, false)?.0)
    }

    /// Encodes and also returns every block's per-head self-attention weights
    /// when `keep_attention` is set.
    pub fn encode_with_attention(
        &self,
        pixels: &PixelGrid,
        geom: &ImageGeometry,
        keep_attention: bool,
    ) -> Result<(TokenSequence, Vec<Vec<Matrix>>)> {
        self.check_input(pixels, geom)?;
        let (layout, mut x) = self.embed_tokens(pixels, geom);
        let capture = Capture { logits: false, weights: keep_attention };
        let mut maps = Vec::new();
        for block in &self.blocks {
            let w = block.forward(&mut x, self.cfg.head_count, capture);
            if keep_attention {
                maps.push(w);
            }
        }
        if !x.is_finite() {
            return Err(Error::Numeric("encoder produced non-finite tokens".into()));
        }
        Ok((TokenSequence::new(layout, x)?, maps))
    }

    /// Encodes only the masked region: pixels outside `mask` are zeroed, the
    /// image is cut to the mask's bounding box (grown to patch multiples,
    /// zero padded past the border) and encoded with its own geometry.
    pub fn encode_cropped(
        &self,
        pixels: &PixelGrid,
        mask: &RegionMask,
        geom: &ImageGeometry,
    ) -> Result<CroppedEncoding> {
        self.check_input(pixels, geom)?;
        if mask.height() != geom.height_px() || mask.width() != geom.width_px() {
            return Err(Error::Geometry("mask does not match image geometry".into()));
        }
        let (y0, x0, y1, x1) = mask.bounding_box().ok_or(Error::EmptyRegion)?;
        let p = self.patch_size;
        let h = (y1 - y0).div_ceil(p) * p;
        let w = (x1 - x0).div_ceil(p) * p;
        let mut crop = PixelGrid::zeros(h, w, self.channels);
        let mut crop_mask = RegionMask::filled(h, w, false);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y0 + y, x0 + x);
                if sy < geom.height_px() && sx < geom.width_px() && mask.get(sy, sx) {
                    crop.pixel_mut(y, x).copy_from_slice(pixels.pixel(sy, sx));
                    crop_mask.set(y, x, true);
                }
            }
        }
        let crop_geom = ImageGeometry::new(h, w, p)?;
        let tokens = self.encode_image(&crop, &crop_geom)?;
        Ok(CroppedEncoding {
            tokens,
            geometry: crop_geom,
            origin_px: (y0, x0),
            mask: crop_mask,
            full_cols: geom.cols(),
        })
    }
}

/// Result of [`ToyEncoder::encode_cropped`].
#[derive(Debug, Clone)]
pub struct CroppedEncoding {
    pub tokens: TokenSequence,
    pub geometry: ImageGeometry,
    /// Top-left pixel of the crop in the source image.
    pub origin_px: (usize, usize),
    /// The source mask cut to the crop window.
    pub mask: RegionMask,
    full_cols: usize,
}

impl CroppedEncoding {
    /// Source-image patch index covering the same pixels as crop patch
    /// `crop_patch`, when the crop origin sits on the patch grid.
    pub fn full_patch_index(&self, crop_patch: usize) -> Option<usize> {
        let p = self.geometry.patch_size_px();
        let (y0, x0) = self.origin_px;
        if y0 % p != 0 || x0 % p != 0 || crop_patch >= self.geometry.patch_count() {
            return None;
        }
        let row = y0 / p + crop_patch / self.geometry.cols();
        let col = x0 / p + crop_patch % self.geometry.cols();
        (col < self.full_cols).then_some(row * self.full_cols + col)
    }
}
