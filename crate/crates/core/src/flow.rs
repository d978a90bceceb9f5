//! Toy stand-ins for the two-stage generator: a seeded structure head that
//! turns global tokens into active voxels, and a rectified-flow transformer
//! whose voxel latents cross-attend to condition tokens.
//!
//! Time runs from noise at `t = 1` to data at `t = 0` along the linear path
//! `z_t = (1 - t) z_0 + t ε`; sampling is uniform-step Euler.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{multi_head_attention, AttentionOutput, Capture};
use crate::encoder::TokenSequence;
use crate::enhancement::EnhancementMatrix;
use crate::error::{Error, Result};
use crate::math::{gelu, layer_norm_rows, sinusoid_into, Matrix};
use crate::rng::{derive_seed, SplitMix64};
use crate::voxel::{validate_positions, Position, SparseVoxelLatent, VoxelSelection};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModelConfig {
    /// Latent channels `C` per voxel.
    pub latent_dim: usize,
    pub token_dim: usize,
    pub head_count: usize,
    pub block_count: usize,
    /// Side `D` of the coarse structure grid.
    pub structure_resolution: usize,
    /// Side `N` of the output voxel grid.
    pub resolution: usize,
    /// Constant bias of the structure head; more negative means sparser structures.
    pub structure_bias: f64,
    /// Blocks whose logits are scaled by an enhancement matrix; `None` means all.
    pub enhanced_blocks: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for FlowModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            token_dim: 64,
            head_count: 4,
            block_count: 2,
            structure_resolution: 16,
            resolution: 32,
            structure_bias: -1.8,
            enhanced_blocks: None,
            seed: 0,
        }
    }
}

impl FlowModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.head_count == 0 || self.token_dim == 0 {
            return Err(Error::Parameter("latent_dim, token_dim and head_count must be positive".into()));
        }
        if !self.latent_dim.is_multiple_of(self.head_count) {
            return Err(Error::Parameter(format!(
                "latent_dim {} is not divisible by head_count {}",
                self.latent_dim, self.head_count
            )));
        }
        if self.structure_resolution == 0 || self.structure_resolution > self.resolution {
            return Err(Error::Parameter(format!(
                "need 0 < D ({}) <= N ({})",
                self.structure_resolution, self.resolution
            )));
        }
        if self.resolution > u32::MAX as usize {
            return Err(Error::Parameter("resolution does not fit in u32".into()));
        }
        if !self.structure_bias.is_finite() {
            return Err(Error::Parameter("structure_bias must be finite".into()));
        }
        if let Some(blocks) = &self.enhanced_blocks {
            if let Some(&b) = blocks.iter().find(|&&b| b >= self.block_count) {
                return Err(Error::OutOfBounds { index: b, bound: self.block_count });
            }
        }
        Ok(())
    }

    fn is_enhanced(&self, block: usize) -> bool {
        self.enhanced_blocks.as_ref().is_none_or(|b| b.contains(&block))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub step_count: usize,
    pub noise_seed: u64,
    /// Zero-based sampling step whose attention is recorded; step 0 runs at `t = 1`.
    pub capture_step: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { step_count: 25, noise_seed: 0, capture_step: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_count == 0 {
            return Err(Error::Parameter("step_count must be >= 1".into()));
        }
        if self.capture_step >= self.step_count {
            return Err(Error::Parameter(format!(
                "capture_step {} must be < step_count {}",
                self.capture_step, self.step_count
            )));
        }
        Ok(())
    }

    /// Time at the start of step `s`.
    pub fn time_at(&self, s: usize) -> f64 {
        (self.step_count - s) as f64 / self.step_count as f64
    }
}

/// Pre-softmax cross-attention logits `Q Kᵀ / sqrt(C / h)` of every block
/// and head, captured before any enhancement is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionRecord {
    pub t: f64,
    /// `logits[block][head]` is `L x T`.
    pub logits: Vec<Vec<Matrix>>,
}

impl CrossAttentionRecord {
    pub fn block_count(&self) -> usize {
        self.logits.len()
    }

    pub fn head_count(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.logits.first().and_then(|b| b.first()).map_or((0, 0), Matrix::shape)
    }

    pub fn head(&self, block: usize, head: usize) -> &Matrix {
        &self.logits[block][head]
    }
}

/// One transformer block: cross-attention to the condition tokens, then a
/// GELU feed-forward, both pre-norm with residuals.
#[derive(Debug, Clone)]
pub struct FlowBlock {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl FlowBlock {
    fn seeded(c: usize, token_dim: usize, rng: &mut SplitMix64) -> Self {
        let hidden = 2 * c;
        let wq = Matrix::xavier(c, c, rng);
        let wk = Matrix::xavier(token_dim, c, rng);
        let wv = Matrix::xavier(token_dim, c, rng);
        let wo = Matrix::xavier(c, c, rng);
        let w1 = Matrix::xavier(c, hidden, rng);
        let w2 = Matrix::xavier(hidden, c, rng);
        Self { wq, wk, wv, wo, w1, b1: vec![0.0; hidden], w2, b2: vec![0.0; c] }
    }

    /// Cross-attention of hidden states `x` over condition tokens, before
    /// the output projection.
    pub fn cross_attention(
        &self,
        x: &Matrix,
        tokens: &Matrix,
        heads: usize,
        scale: Option<&EnhancementMatrix>,
        capture: Capture,
    ) -> AttentionOutput {
        let kv = self.project_tokens(tokens);
        self.attend(x, &kv, heads, scale, capture)
    }

    fn project_tokens(&self, tokens: &Matrix) -> (Matrix, Matrix) {
        (tokens.matmul(&self.wk), tokens.matmul(&self.wv))
    }

    fn attend(
        &self,
        x: &Matrix,
        kv: &(Matrix, Matrix),
        heads: usize,
        scale: Option<&EnhancementMatrix>,
        capture: Capture,
    ) -> AttentionOutput {
        let q = layer_norm_rows(x).matmul(&self.wq);
        multi_head_attention(&q, &kv.0, &kv.1, heads, scale.map(EnhancementMatrix::as_matrix), capture)
    }

    fn feed_forward(&self, x: &mut Matrix) {
        let mut h = layer_norm_rows(x).matmul(&self.w1);
        h.add_row_vector(&self.b1);
        for v in h.as_mut_slice() {
            *v = gelu(*v);
        }
        let mut f = h.matmul(&self.w2);
        f.add_row_vector(&self.b2);
        x.add_assign(&f);
    }
}

/// Token keys and values projected once per block, reused across steps.
struct ProjectedTokens(Vec<(Matrix, Matrix)>);

/// Immutable toy generator. All methods are pure.
#[derive(Debug, Clone)]
pub struct FlowModel {
    cfg: FlowModelConfig,
    structure: Matrix,
    blocks: Vec<FlowBlock>,
    w_out: Matrix,
}

impl FlowModel {
    /// Draws the structure head, then each block, then the output projection
    /// from `cfg.seed`.
    pub fn new(cfg: FlowModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(cfg.seed);
        let d3 = cfg.structure_resolution.pow(3);
        let structure = Matrix::xavier(cfg.token_dim, d3, &mut rng);
        let blocks = (0..cfg.block_count)
            .map(|_| FlowBlock::seeded(cfg.latent_dim, cfg.token_dim, &mut rng))
            .collect();
        let w_out = Matrix::xavier(cfg.latent_dim, cfg.latent_dim, &mut rng);
        Ok(Self { cfg, structure, blocks, w_out })
    }

    /// Same weights but a zero output projection, so the velocity is always 0.
    pub fn with_zero_output(cfg: FlowModelConfig) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        m.w_out = Matrix::zeros(m.cfg.latent_dim, m.cfg.latent_dim);
        Ok(m)
    }

    pub fn config(&self) -> &FlowModelConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[FlowBlock] {
        &self.blocks
    }

    pub fn output_projection(&self) -> &Matrix {
        &self.w_out
    }

    pub fn structure_weights(&self) -> &Matrix {
        &self.structure
    }

    /// Gain that brings unit-norm pooled features to roughly unit-variance logits.
    pub fn structure_gain(&self) -> f64 {
        libm::sqrt((self.cfg.token_dim + self.structure.cols()) as f64 / 2.0)
    }

    /// Coarse `D³` occupancy logits, flattened `(x * D + y) * D + z`.
    pub fn structure_logits(&self, global: &TokenSequence) -> Result<Vec<f64>> {
        if global.token_dim() != self.cfg.token_dim {
            return Err(Error::Shape(format!(
                "global tokens have dim {}, model expects {}",
                global.token_dim(),
                self.cfg.token_dim
            )));
        }
        let d = self.cfg.token_dim;
        let mut pooled = vec![0.0; d];
        let range = global.layout.patch_range();
        let count = range.len() as f64;
        for pos in range {
            for (p, v) in pooled.iter_mut().zip(global.tokens.row(pos)) {
                *p += v;
            }
        }
        let norm = libm::sqrt(pooled.iter().map(|v| (v / count) * (v / count)).sum());
        let denom = if norm > 0.0 { count * norm } else { count };
        for p in pooled.iter_mut() {
            *p /= denom;
        }
        let gain = self.structure_gain();
        let mut logits = vec![self.cfg.structure_bias; self.structure.cols()];
        for (k, &p) in pooled.iter().enumerate() {
            for (l, w) in logits.iter_mut().zip(self.structure.row(k)) {
                *l += gain * p * w;
            }
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite structure logits".into()));
        }
        Ok(logits)
    }

    /// Initial active voxels from the global image's tokens.
    ///
    /// Coarse logits are upsampled nearest-neighbor to `N³` and kept where
    /// `>= 0`. If every logit is negative, only the first fine voxel of the
    /// arg-max coarse cell is activated.
    pub fn init_voxels_from_global(&self, global: &TokenSequence) -> Result<Vec<Position>> {
        let logits = self.structure_logits(global)?;
        let (dc, n) = (self.cfg.structure_resolution, self.cfg.resolution);
        let coarse = |f: usize| f * dc / n;
        let mut out = Vec::new();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    let cell = (coarse(x) * dc + coarse(y)) * dc + coarse(z);
                    if logits[cell] >= 0.0 {
                        out.push([x as u32, y as u32, z as u32]);
                    }
                }
            }
        }
        if out.is_empty() {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            let first_fine = |c: usize| (c * n).div_ceil(dc) as u32;
            let (cx, cy, cz) = (best / (dc * dc), (best / dc) % dc, best % dc);
            out.push([first_fine(cx), first_fine(cy), first_fine(cz)]);
        }
        Ok(out)
    }

    /// Sinusoidal code of voxel positions (channels split in thirds over
    /// x, y, z) plus a sinusoidal code of `1000 t` on all channels.
    pub fn conditioning(&self, positions: &[Position], t: f64) -> Matrix {
        let c = self.cfg.latent_dim;
        let mut time = vec![0.0; c];
        sinusoid_into(1000.0 * t, &mut time);
        let mut m = Matrix::zeros(positions.len(), c);
        for (i, p) in positions.iter().enumerate() {
            let row = m.row_mut(i);
            for axis in 0..3 {
                sinusoid_into(f64::from(p[axis]), &mut row[axis * c / 3..(axis + 1) * c / 3]);
            }
            for (v, tv) in row.iter_mut().zip(&time) {
                *v += tv;
            }
        }
        m
    }

    fn project(&self, tokens: &Matrix) -> Result<ProjectedTokens> {
        if tokens.cols() != self.cfg.token_dim {
            return Err(Error::Shape(format!(
                "condition tokens have dim {}, model expects {}",
                tokens.cols(),
                self.cfg.token_dim
            )));
        }
        if tokens.rows() == 0 {
            return Err(Error::Shape("no condition tokens".into()));
        }
        Ok(ProjectedTokens(self.blocks.iter().map(|b| b.project_tokens(tokens)).collect()))
    }

    fn check_shapes(
        &self,
        positions: &[Position],
        z: &Matrix,
        tokens: usize,
        e: Option<&EnhancementMatrix>,
    ) -> Result<()> {
        if z.shape() != (positions.len(), self.cfg.latent_dim) {
            return Err(Error::Shape(format!(
                "latents are {:?}, expected ({}, {})",
                z.shape(),
                positions.len(),
                self.cfg.latent_dim
            )));
        }
        if let Some(e) = e {
            if e.shape() != (positions.len(), tokens) {
                return Err(Error::Shape(format!(
                    "enhancement is {:?}, expected ({}, {tokens})",
                    e.shape(),
                    positions.len()
                )));
            }
        }
        Ok(())
    }

    fn velocity_projected(
        &self,
        positions: &[Position],
        z: &Matrix,
        t: f64,
        kv: &ProjectedTokens,
        e: Option<&EnhancementMatrix>,
        capture: bool,
    ) -> (Matrix, Option<CrossAttentionRecord>) {
        let cond = self.conditioning(positions, t);
        let mut x = z.clone();
        let mut logits = Vec::new();
        for (b, (block, kv)) in self.blocks.iter().zip(&kv.0).enumerate() {
            x.add_assign(&cond);
            let scale = if self.cfg.is_enhanced(b) { e } else { None };
            let att =
                block.attend(&x, kv, self.cfg.head_count, scale, Capture { logits: capture, weights: false });
            x.add_assign(&att.output.matmul(&block.wo));
            block.feed_forward(&mut x);
            if capture {
                logits.push(att.logits);
            }
        }
        let v = layer_norm_rows(&x).matmul(&self.w_out);
        (v, capture.then_some(CrossAttentionRecord { t, logits }))
    }

    /// Predicted velocity at time `t` and the captured cross-attention logits.
    pub fn velocity(
        &self,
        slat: &SparseVoxelLatent,
        t: f64,
        tokens: &Matrix,
        e: Option<&EnhancementMatrix>,
    ) -> Result<(Matrix, CrossAttentionRecord)> {
        self.check_shapes(slat.positions(), slat.latents(), tokens.rows(), e)?;
        let kv = self.project(tokens)?;
        let (v, rec) = self.velocity_projected(slat.positions(), slat.latents(), t, &kv, e, true);
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite velocity".into()));
        }
        Ok((v, rec.expect("captured")))
    }

    /// Standard-normal `L x C` noise from `seed`.
    pub fn noise(&self, len: usize, seed: u64) -> Matrix {
        let mut rng = SplitMix64::new(seed);
        Matrix::from_vec(len, self.cfg.latent_dim, rng.normal_vec(len * self.cfg.latent_dim)).expect("sized")
    }

    /// Euler integration from `t = 1` to `t = 0`.
    pub fn sample(
        &self,
        positions: &[Position],
        tokens: &Matrix,
        scfg: &SamplerConfig,
        e: Option<&EnhancementMatrix>,
    ) -> Result<SparseVoxelLatent> {
        Ok(self.run(positions, tokens, scfg, e, None, false)?.0)
    }

    /// As [`FlowModel::sample`], also returning the attention captured at
    /// `scfg.capture_step`.
    pub fn sample_with_capture(
        &self,
        positions: &[Position],
        tokens: &Matrix,
        scfg: &SamplerConfig,
        e: Option<&EnhancementMatrix>,
    ) -> Result<(SparseVoxelLatent, CrossAttentionRecord)> {
        let (slat, rec) = self.run(positions, tokens, scfg, e, None, false)?;
        Ok((slat, rec.expect("capture step is within the run")))
    }

    /// Runs the sampler only up to the capture step and returns its attention.
    pub fn capture_attention(
        &self,
        positions: &[Position],
        tokens: &Matrix,
        scfg: &SamplerConfig,
    ) -> Result<CrossAttentionRecord> {
        Ok(self.run(positions, tokens, scfg, None, None, true)?.1.expect("capture step is within the run"))
    }

    /// Regenerates latents under `tokens` while voxels in `unaligned` follow
    /// the forward-noised path of `initial`: after every step to time `t`
    /// their rows are reset to `noise_to(z⁰, t)`, so at `t = 0` they equal `z⁰`.
    pub fn sample_inpaint(
        &self,
        initial: &SparseVoxelLatent,
        tokens: &Matrix,
        unaligned: &VoxelSelection,
        scfg: &SamplerConfig,
    ) -> Result<SparseVoxelLatent> {
        if let Some(&last) = unaligned.as_slice().last() {
            if last >= initial.len() {
                return Err(Error::OutOfBounds { index: last, bound: initial.len() });
            }
        }
        let keep =
            Inpaint { initial: initial.latents(), unaligned, seed: forward_noise_seed(scfg.noise_seed) };
        Ok(self.run(initial.positions(), tokens, scfg, None, Some(keep), false)?.0)
    }

    fn run(
        &self,
        positions: &[Position],
        tokens: &Matrix,
        scfg: &SamplerConfig,
        e: Option<&EnhancementMatrix>,
        inpaint: Option<Inpaint<'_>>,
        stop_after_capture: bool,
    ) -> Result<(SparseVoxelLatent, Option<CrossAttentionRecord>)> {
        scfg.validate()?;
        validate_positions(self.cfg.resolution as u32, positions)?;
        let kv = self.project(tokens)?;
        let mut z = self.noise(positions.len(), scfg.noise_seed);
        self.check_shapes(positions, &z, tokens.rows(), e)?;

        let eps = inpaint.as_ref().map(|ip| self.noise(positions.len(), ip.seed));
        if let (Some(ip), Some(eps)) = (&inpaint, &eps) {
            ip.reset(&mut z, eps, 1.0);
        }

        let dt = 1.0 / scfg.step_count as f64;
        let mut record = None;
        for s in 0..scfg.step_count {
            let t = scfg.time_at(s);
            let capture = s == scfg.capture_step;
            let (v, rec) = self.velocity_projected(positions, &z, t, &kv, e, capture);
            if capture {
                record = rec;
                if stop_after_capture {
                    break;
                }
            }
            for (zi, vi) in z.as_mut_slice().iter_mut().zip(v.as_slice()) {
                *zi -= dt * vi;
            }
            if let (Some(ip), Some(eps)) = (&inpaint, &eps) {
                ip.reset(&mut z, eps, scfg.time_at(s + 1));
            }
            if !z.is_finite() {
                return Err(Error::Numeric(format!("latents diverged at step {s} (t = {t})")));
            }
        }
        let slat = SparseVoxelLatent::new(self.cfg.resolution as u32, positions.to_vec(), z)?;
        Ok((slat, record))
    }
}

fn forward_noise_seed(noise_seed: u64) -> u64 {
    derive_seed(noise_seed, "forward-noise")
}

struct Inpaint<'a> {
    initial: &'a Matrix,
    unaligned: &'a VoxelSelection,
    seed: u64,
}

impl Inpaint<'_> {
    fn reset(&self, z: &mut Matrix, eps: &Matrix, t: f64) {
        for i in self.unaligned.iter() {
            let z0 = self.initial.row(i);
            let row = z.row_mut(i);
            if t == 0.0 {
                row.copy_from_slice(z0);
            } else {
                for ((r, a), b) in row.iter_mut().zip(z0).zip(eps.row(i)) {
                    *r = (1.0 - t) * a + t * b;
                }
            }
        }
    }
}

/// Point at time `t` on the linear path from `z0` to seeded noise:
/// `(1 - t) z0 + t ε`.
pub fn noise_to(z0: &Matrix, t: f64, noise_seed: u64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Parameter(format!("t = {t} outside [0, 1]")));
    }
    let mut rng = SplitMix64::new(noise_seed);
    let eps = rng.normal_vec(z0.rows() * z0.cols());
    let data = z0
        .as_slice()
        .iter()
        .zip(&eps)
        .map(|(&a, &b)| {
            if t == 0.0 {
                a
            } else if t == 1.0 {
                b
            } else {
                (1.0 - t) * a + t * b
            }
        })
        .collect();
    Matrix::from_vec(z0.rows(), z0.cols(), data)
}

/// Seed of the noise used by [`FlowModel::sample_inpaint`] to re-noise
/// unaligned rows; `noise_to(z0, t, inpaint_noise_seed(s))` reproduces them.
pub fn inpaint_noise_seed(sampler_noise_seed: u64) -> u64 {
    forward_noise_seed(sampler_noise_seed)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::encoder::TokenSequence;
    use crate::patch_grid::TokenLayout;

    fn small_cfg() -> FlowModelConfig {
        FlowModelConfig {
            latent_dim: 8,
            token_dim: 6,
            head_count: 2,
            block_count: 2,
            structure_resolution: 4,
            resolution: 8,
            structure_bias: 0.0,
            enhanced_blocks: None,
            seed: 17,
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = SplitMix64::new(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(1.0)).collect()).unwrap()
    }

    fn global_tokens(dim: usize, seed: u64) -> TokenSequence {
        let layout = TokenLayout::new(2, 9).unwrap();
        TokenSequence::new(layout, random_matrix(layout.total_count(), dim, seed)).unwrap()
    }

    fn positions(n: usize) -> Vec<Position> {
        let mut v = Vec::new();
        for i in 0..n as u32 {
            v.push([i / 4, i % 4, (i * 3) % 5]);
        }
        v.sort_unstable();
        v.dedup();
        v
    }

    #[test]
    fn init_is_deterministic() {
        let m = FlowModel::new(small_cfg()).unwrap();
        let g = global_tokens(6, 1);
        assert_eq!(m.init_voxels_from_global(&g).unwrap(), m.init_voxels_from_global(&g).unwrap());
        assert!(!m.init_voxels_from_global(&g).unwrap().is_empty());
    }

    #[test]
    fn all_negative_logits_activate_one_voxel_at_argmax() {
        let cfg = FlowModelConfig { structure_bias: -1e3, resolution: 4, ..small_cfg() };
        let m = FlowModel::new(cfg).unwrap();
        let g = global_tokens(6, 2);
        let logits = m.structure_logits(&g).unwrap();
        assert!(logits.iter().all(|&l| l < 0.0));
        let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        let v = m.init_voxels_from_global(&g).unwrap();
        assert_eq!(v, vec![[(best / 16) as u32, ((best / 4) % 4) as u32, (best % 4) as u32]]);
    }

    #[test]
    fn init_matches_straight_line_recomputation() {
        let m = FlowModel::new(small_cfg()).unwrap();
        let g = global_tokens(6, 3);
        let d = 6;
        let mut pooled = vec![0.0; d];
        for pos in g.layout.patch_range() {
            for c in 0..d {
                pooled[c] += g.tokens.get(pos, c) / 9.0;
            }
        }
        let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w = m.structure_weights();
        let gain = ((6 + 64) as f64 / 2.0).sqrt();
        let mut expect = Vec::new();
        for x in 0..8u32 {
            for y in 0..8u32 {
                for z in 0..8u32 {
                    let cell = ((x / 2) * 16 + (y / 2) * 4 + z / 2) as usize;
                    let mut l = 0.0;
                    for c in 0..d {
                        l += gain * pooled[c] / norm * w.get(c, cell);
                    }
                    if l >= 0.0 {
                        expect.push([x, y, z]);
                    }
                }
            }
        }
        assert_eq!(m.init_voxels_from_global(&g).unwrap(), expect);
    }

    #[test]
    fn singleton_token_gets_all_attention() {
        let m = FlowModel::new(small_cfg()).unwrap();
        let x = random_matrix(5, 8, 4);
        let tokens = random_matrix(1, 6, 5);
        let out =
            m.blocks()[0].cross_attention(&x, &tokens, 2, None, Capture { logits: false, weights: true });
        for w in &out.weights {
            assert!(w.as_slice().iter().all(|&p| p == 1.0));
        }
    }

    #[test]
    fn logits_and_output_match_naive_loops() {
        let m = FlowModel::new(small_cfg()).unwrap();
        let (l, t, c, h) = (5, 7, 8, 2);
        let x = random_matrix(l, c, 6);
        let tokens = random_matrix(t, 6, 7);
        let block = &m.blocks()[1];
        let out = block.cross_attention(&x, &tokens, h, None, Capture { logits: true, weights: false });
        let n = layer_norm_rows(&x);
        let dh = c / h;
        for head in 0..h {
            for i in 0..l {
                let mut row = vec![0.0; t];
                for (j, slot) in row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for a in head * dh..(head + 1) * dh {
                        let mut q = 0.0;
                        let mut k = 0.0;
                        for b in 0..c {
                            q += n.get(i, b) * block.wq.get(b, a);
                        }
                        for b in 0..6 {
                            k += tokens.get(j, b) * block.wk.get(b, a);
                        }
                        s += q * k;
                    }
                    *slot = s / (dh as f64).sqrt();
                    assert!((out.logits[head].get(i, j) - *slot).abs() < 1e-9);
                }
                let max = row.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for a in head * dh..(head + 1) * dh {
                    let mut o = 0.0;
                    for j in 0..t {
                        let mut v = 0.0;
                        for b in 0..6 {
                            v += tokens.get(j, b) * block.wv.get(b, a);
                        }
                        o += (row[j] - max).exp() / z * v;
                    }
                    assert!((out.output.get(i, a) - o).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn unit_enhancement_is_bit_identical() {
        let m = FlowModel::new(small_cfg()).unwrap();
        let pos = positions(12);
        let tokens = random_matrix(7, 6, 8);
        let slat = SparseVoxelLatent::new(8, pos.clone(), random_matrix(pos.len(), 8, 9)).unwrap();
        let ones = EnhancementMatrix::identity(pos.len(), 7);
        let (a, ra) = m.velocity(&slat, 0.7, &tokens, None).unwrap();
        let (b, rb) = m.velocity(&slat, 0.7, &tokens, Some(&ones)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let scfg = SamplerConfig { step_count: 5, noise_seed: 3, capture_step: 0 };
        assert_eq!(
            m.sample(&pos, &tokens, &scfg, None).unwrap(),
            m.sample(&pos, &tokens, &scfg, Some(&ones)).unwrap()
        );
    }

    #[test]
    fn enhancement_changes_the_velocity() {
        let m = FlowModel::new(small_cfg()).unwrap();
        let pos = positions(12);
        let tokens = random_matrix(7, 6, 8);
        let slat = SparseVoxelLatent::new(8, pos.clone(), random_matrix(pos.len(), 8, 9)).unwrap();
        let e = EnhancementMatrix::from_matrix(Matrix::filled(pos.len(), 7, 3.0)).unwrap();
        let (a, _) = m.velocity(&slat, 0.7, &tokens, None).unwrap();
        let (b, _) = m.velocity(&slat, 0.7, &tokens, Some(&e)).unwrap();
        assert_ne!(a, b);
        let cfg = FlowModelConfig { enhanced_blocks: Some(vec![]), ..small_cfg() };
        let m = FlowModel::new(cfg).unwrap();
        let (a, _) = m.velocity(&slat, 0.7, &tokens, None).unwrap();
        let (b, _) = m.velocity(&slat, 0.7, &tokens, Some(&e)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors() {
        let m = FlowModel::new(small_cfg()).unwrap();
        let pos = positions(6);
        let slat = SparseVoxelLatent::new(8, pos.clone(), random_matrix(pos.len(), 8, 1)).unwrap();
        let tokens = random_matrix(4, 6, 2);
        assert!(matches!(m.velocity(&slat, 1.0, &random_matrix(4, 5, 2), None), Err(Error::Shape(_))));
        let bad = EnhancementMatrix::identity(pos.len(), 5);
        assert!(matches!(m.velocity(&slat, 1.0, &tokens, Some(&bad)), Err(Error::Shape(_))));
        assert!(FlowModel::new(FlowModelConfig { latent_dim: 9, ..small_cfg() }).is_err());
        assert!(FlowModel::new(FlowModelConfig { structure_resolution: 9, ..small_cfg() }).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_single_step_is_one_euler_step() {
        let m = FlowModel::new(small_cfg()).unwrap();
        let pos = positions(10);
        let tokens = random_matrix(5, 6, 3);
        let scfg = SamplerConfig { step_count: 4, noise_seed: 99, capture_step: 1 };
        assert_eq!(
            m.sample(&pos, &tokens, &scfg, None).unwrap(),
            m.sample(&pos, &tokens, &scfg, None).unwrap()
        );

        let one = SamplerConfig { step_count: 1, noise_seed: 5, capture_step: 0 };
        let out = m.sample(&pos, &tokens, &one, None).unwrap();
        let z1 = m.noise(pos.len(), 5);
        let start = SparseVoxelLatent::new(8, pos.clone(), z1.clone()).unwrap();
        let (v, _) = m.velocity(&start, 1.0, &tokens, None).unwrap();
        for (i, (a, b)) in z1.as_slice().iter().zip(v.as_slice()).enumerate() {
            assert_eq!(out.latents().as_slice()[i], a - b);
        }
    }

    #[test]
    fn sampling_matches_a_plain_euler_loop() {
        let m = FlowModel::new(small_cfg()).unwrap();
        let pos = positions(9);
        let tokens = random_matrix(6, 6, 4);
        let scfg = SamplerConfig { step_count: 6, noise_seed: 12, capture_step: 2 };
        let (out, rec) = m.sample_with_capture(&pos, &tokens, &scfg, None).unwrap();
        let mut z = m.noise(pos.len(), 12);
        let mut captured = None;
        for s in 0..6 {
            let t = 1.0 - s as f64 / 6.0;
            let cur = SparseVoxelLatent::new(8, pos.clone(), z.clone()).unwrap();
            let (v, r) = m.velocity(&cur, t, &tokens, None).unwrap();
            if s == 2 {
                captured = Some(r);
            }
            for (a, b) in z.as_mut_slice().iter_mut().zip(v.as_slice()) {
                *a -= b / 6.0;
            }
        }
        for (a, b) in out.latents().as_slice().iter().zip(z.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        let captured = captured.unwrap();
        assert!((rec.t - captured.t).abs() < 1e-12);
        assert_eq!(rec.block_count(), 2);
        assert_eq!(rec.head_count(), 2);
        for b in 0..2 {
            for h in 0..2 {
                for (x, y) in rec.head(b, h).as_slice().iter().zip(captured.head(b, h).as_slice()) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
        let early = m.capture_attention(&pos, &tokens, &scfg).unwrap();
        assert_eq!(early, rec);
    }

    #[test]
    fn zero_velocity_returns_initial_noise() {
        let m = FlowModel::with_zero_output(small_cfg()).unwrap();
        let pos = positions(8);
        let tokens = random_matrix(3, 6, 1);
        let scfg = SamplerConfig { step_count: 3, noise_seed: 44, capture_step: 0 };
        let out = m.sample(&pos, &tokens, &scfg, None).unwrap();
        assert_eq!(out.latents(), &m.noise(pos.len(), 44));
    }

    #[test]
    fn forward_noising_endpoints_and_midpoint() {
        let z0 = random_matrix(4, 3, 1);
        assert_eq!(noise_to(&z0, 0.0, 7).unwrap(), z0);
        let eps = noise_to(&z0, 1.0, 7).unwrap();
        assert_eq!(eps, noise_to(&random_matrix(4, 3, 2), 1.0, 7).unwrap());
        let mid = noise_to(&z0, 0.5, 7).unwrap();
        for i in 0..12 {
            let expect = (z0.as_slice()[i] + eps.as_slice()[i]) / 2.0;
            assert!((mid.as_slice()[i] - expect).abs() < 1e-15);
        }
        assert!(noise_to(&z0, 1.5, 7).is_err());
    }

    #[test]
    fn inpainting_contract() {
        let m = FlowModel::new(small_cfg()).unwrap();
        let pos = positions(10);
        let tokens = random_matrix(5, 6, 3);
        let scfg = SamplerConfig { step_count: 5, noise_seed: 8, capture_step: 0 };
        let initial = m
            .sample(&pos, &random_matrix(4, 6, 9), &SamplerConfig { noise_seed: 1, ..scfg.clone() }, None)
            .unwrap();

        let all = m.sample_inpaint(&initial, &tokens, &VoxelSelection::all(pos.len()), &scfg).unwrap();
        assert_eq!(all.latents(), initial.latents());

        let none = m.sample_inpaint(&initial, &tokens, &VoxelSelection::empty(), &scfg).unwrap();
        assert_eq!(none, m.sample(&pos, &tokens, &scfg, None).unwrap());

        let part = VoxelSelection::from_unsorted(vec![0, 3, 4]);
        let out = m.sample_inpaint(&initial, &tokens, &part, &scfg).unwrap();
        for i in 0..pos.len() {
            let diff: f64 =
                out.latents().row(i).iter().zip(initial.latents().row(i)).map(|(a, b)| (a - b).powi(2)).sum();
            if part.contains(i) {
                assert_eq!(diff, 0.0);
            } else {
                assert!(diff > 0.0);
            }
        }
        assert!(m
            .sample_inpaint(&initial, &tokens, &VoxelSelection::from_unsorted(vec![99]), &scfg)
            .is_err());
    }

    #[test]
    fn attention_rows_are_distributions_at_every_step() {
        let m = FlowModel::new(small_cfg()).unwrap();
        let pos = positions(10);
        let tokens = random_matrix(6, 6, 3);
        for step in 0..4 {
            let scfg = SamplerConfig { step_count: 4, noise_seed: 2, capture_step: step };
            let rec = m.capture_attention(&pos, &tokens, &scfg).unwrap();
            for block in &rec.logits {
                for head in block {
                    let p = crate::math::softmax_rows(head);
                    for r in 0..p.rows() {
                        assert!(p.row(r).iter().all(|&v| v >= 0.0));
                        assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn sampler_validation() {
        let m = FlowModel::new(small_cfg()).unwrap();
        let tokens = random_matrix(2, 6, 1);
        let bad = SamplerConfig { step_count: 0, ..Default::default() };
        assert!(m.sample(&positions(4), &tokens, &bad, None).is_err());
        assert!(matches!(
            m.sample(&[], &tokens, &SamplerConfig::default(), None),
            Err(Error::EmptyStructure)
        ));
    }
}
