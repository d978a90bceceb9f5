//! Oracle-equivalence checks: each compares an optimized routine against
//! its naive counterpart in [`crate::oracle`] on seeded random instances.

use std::collections::BTreeSet;
use std::time::Instant;

use fusecond_core::alignment::{
    forward_align, forward_scores, reverse_align, reverse_scores, AlignmentConfig, HeadSubset,
    DEFAULT_HEAD_COUNT, DEFAULT_SCORE_THRESHOLD,
};
use fusecond_core::attention::Capture;
use fusecond_core::encoder::{EncoderConfig, PixelGrid, ToyEncoder};
use fusecond_core::enhancement::{
    apply_enhancement, build_enhancement, EnhancementMatrix, EnhancementSource,
};
use fusecond_core::flow::{CrossAttentionRecord, FlowBlock, FlowModel, FlowModelConfig, SamplerConfig};
use fusecond_core::math::softmax_rows;
use fusecond_core::patch_grid::{
    patch_indices, ImageGeometry, PatchMask, RegionMask, TokenIndexSet, TokenLayout, DEFAULT_PATCH_SIZE,
};
use fusecond_core::rng::SplitMix64;
use fusecond_core::voxel::{
    knn_vote_refine, knn_vote_refine_in_order, KnnVoteParams, Position, SparseVoxelLatent, VoxelSelection,
};
use fusecond_core::Matrix;

use crate::oracle::{self, to_dense};

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

/// Instance counts per check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub patch_masks: usize,
    pub attention: usize,
    pub velocity: usize,
    pub alignment: usize,
    pub knn: usize,
    pub enhancement: usize,
    pub inpaint: usize,
    pub mcfm: usize,
}

impl Budget {
    pub const FULL: Budget = Budget {
        patch_masks: 1000,
        attention: 200,
        velocity: 20,
        alignment: 100,
        knn: 100,
        enhancement: 20,
        inpaint: 20,
        mcfm: 50,
    };
    pub const QUICK: Budget = Budget {
        patch_masks: 100,
        attention: 20,
        velocity: 4,
        alignment: 10,
        knn: 10,
        enhancement: 4,
        inpaint: 4,
        mcfm: 5,
    };
}

pub fn run_all(budget: &Budget, seed: u64) -> Vec<Outcome> {
    vec![
        constants(),
        patch_index_oracle(budget.patch_masks, seed),
        attention_oracle(budget.attention, seed),
        velocity_oracle(budget.velocity, seed),
        alignment_oracle(budget.alignment, seed),
        knn_oracle(budget.knn, seed),
        enhancement_oracle(budget.enhancement, seed),
        inpaint_contract(budget.inpaint, seed),
        context_sensitivity(budget.mcfm, seed),
    ]
}

fn below(rng: &mut SplitMix64, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

fn between(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + below(rng, hi - lo + 1)
}

fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(scale)).collect()).expect("sized")
}

fn random_subset(rng: &mut SplitMix64, n: usize, p: f64) -> Vec<usize> {
    (0..n).filter(|_| rng.next_f64() < p).collect()
}

fn random_positions(rng: &mut SplitMix64, grid: u32, count: usize) -> Vec<Position> {
    let mut set = BTreeSet::new();
    while set.len() < count {
        let g = u64::from(grid);
        set.insert([(rng.next_u64() % g) as u32, (rng.next_u64() % g) as u32, (rng.next_u64() % g) as u32]);
    }
    set.into_iter().collect()
}

fn shuffled(rng: &mut SplitMix64, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        v.swap(i, below(rng, i + 1));
    }
    v
}

fn random_block(rng: &mut SplitMix64, c: usize, token_dim: usize) -> FlowBlock {
    let b1 = (0..2 * c).map(|_| rng.uniform(0.1)).collect();
    let b2 = (0..c).map(|_| rng.uniform(0.1)).collect();
    FlowBlock {
        wq: Matrix::xavier(c, c, rng),
        wk: Matrix::xavier(token_dim, c, rng),
        wv: Matrix::xavier(token_dim, c, rng),
        wo: Matrix::xavier(c, c, rng),
        w1: Matrix::xavier(c, 2 * c, rng),
        b1,
        w2: Matrix::xavier(2 * c, c, rng),
        b2,
    }
}

fn random_scale(rng: &mut SplitMix64, l: usize, t: usize) -> EnhancementMatrix {
    let m = Matrix::from_vec(l, t, (0..l * t).map(|_| 0.25 + 4.0 * rng.next_f64()).collect()).expect("sized");
    EnhancementMatrix::from_matrix(m).expect("positive")
}

/// Default constants: threshold 0.55, patch size 14, kNN k = 16 with 60% / 40%
/// fill and clear fractions, three heads.
pub fn constants() -> Outcome {
    let knn = KnnVoteParams::default();
    let align = AlignmentConfig::default();
    let ok = DEFAULT_SCORE_THRESHOLD == 0.55
        && align.score_threshold == 0.55
        && DEFAULT_PATCH_SIZE == 14
        && knn == KnnVoteParams { k: 16, fill_frac: 0.6, clear_frac: 0.4 }
        && align.refine == Some(knn)
        && DEFAULT_HEAD_COUNT == 3
        && align.heads == HeadSubset::Auto(3);
    Outcome::new(
        "constants",
        ok,
        format!(
            "threshold {} patch {} knn k={} fill {} clear {} heads {:?}",
            align.score_threshold, DEFAULT_PATCH_SIZE, knn.k, knn.fill_frac, knn.clear_frac, align.heads
        ),
    )
}

pub fn patch_index_oracle(n: usize, seed: u64) -> Outcome {
    let mut rng = SplitMix64::new(seed ^ 0x01);
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..n {
        let (rows, cols) = (between(&mut rng, 1, 64), between(&mut rng, 1, 64));
        let p = rng.next_f64();
        let bits = (0..rows * cols).map(|_| rng.next_f64() < p).collect();
        let mask = PatchMask::new(rows, cols, bits).expect("sized");
        if patch_indices(&mask).as_slice() != oracle::patch_indices(&mask).as_slice() {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        "patch_index_oracle",
        mismatches == 0,
        format!("{n} masks, {mismatches} mismatches, {secs:.3} s"),
    )
}

pub fn attention_oracle(n: usize, seed: u64) -> Outcome {
    let mut rng = SplitMix64::new(seed ^ 0x02);
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    for inst in 0..n {
        let heads = between(&mut rng, 1, 4);
        let c = heads * between(&mut rng, 1, 4);
        let token_dim = between(&mut rng, 1, 8);
        let (l, t) = (between(&mut rng, 1, 50), between(&mut rng, 1, 80));
        let block = random_block(&mut rng, c, token_dim);
        let x = random_matrix(&mut rng, l, c, 2.0);
        let tokens = random_matrix(&mut rng, t, token_dim, 2.0);
        let scale = (inst % 2 == 1).then(|| random_scale(&mut rng, l, t));
        let got = block.cross_attention(
            &x,
            &tokens,
            heads,
            scale.as_ref(),
            Capture { logits: true, weights: true },
        );
        let scale_dense = scale.as_ref().map(|s| to_dense(s.as_matrix()));
        let (out, logits) =
            oracle::cross_attention(&block, &to_dense(&x), &to_dense(&tokens), heads, scale_dense.as_ref());
        worst = worst.max(oracle::max_abs_diff(&out, &got.output));
        for (a, b) in logits.iter().zip(&got.logits) {
            worst = worst.max(oracle::max_abs_diff(a, b));
        }
        if got.logits.len() != heads {
            worst = f64::INFINITY;
        }
        for w in &got.weights {
            for r in 0..w.rows() {
                worst_sum = worst_sum.max((w.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Outcome::new(
        "attention_oracle",
        worst <= 1e-9 && worst_sum <= 1e-6,
        format!("{n} instances, max |diff| {worst:.2e}, max |row sum - 1| {worst_sum:.2e}"),
    )
}

fn random_flow_config(rng: &mut SplitMix64) -> FlowModelConfig {
    let heads = between(rng, 1, 4);
    let blocks = between(rng, 1, 3);
    let enhanced_blocks = (below(rng, 2) == 0).then(|| random_subset(rng, blocks, 0.5));
    FlowModelConfig {
        latent_dim: heads * between(rng, 1, 4),
        token_dim: between(rng, 1, 8),
        head_count: heads,
        block_count: blocks,
        structure_resolution: 4,
        resolution: 8,
        structure_bias: -1.8,
        enhanced_blocks,
        seed: rng.next_u64(),
    }
}

/// Whole-model velocity and captured logits against the naive forward pass.
pub fn velocity_oracle(n: usize, seed: u64) -> Outcome {
    let mut rng = SplitMix64::new(seed ^ 0x03);
    let mut worst = 0.0f64;
    for inst in 0..n {
        let cfg = random_flow_config(&mut rng);
        let model = FlowModel::new(cfg.clone()).expect("valid config");
        let l = between(&mut rng, 1, 30);
        let positions = random_positions(&mut rng, 8, l);
        let z = random_matrix(&mut rng, l, cfg.latent_dim, 1.5);
        let t_count = between(&mut rng, 1, 20);
        let tokens = random_matrix(&mut rng, t_count, cfg.token_dim, 1.5);
        let scale = (inst % 2 == 0).then(|| random_scale(&mut rng, l, tokens.rows()));
        let t = rng.next_f64();
        let slat = SparseVoxelLatent::new(8, positions.clone(), z.clone()).expect("valid");
        let (v, record) = model.velocity(&slat, t, &tokens, scale.as_ref()).expect("finite");
        let scale_dense = scale.as_ref().map(|s| to_dense(s.as_matrix()));
        let (v_ref, logits_ref) =
            oracle::velocity(&model, &positions, &to_dense(&z), t, &to_dense(&tokens), scale_dense.as_ref());
        worst = worst.max(oracle::max_abs_diff(&v_ref, &v));
        for (b, heads) in logits_ref.iter().enumerate() {
            for (h, lg) in heads.iter().enumerate() {
                worst = worst.max(oracle::max_abs_diff(lg, record.head(b, h)));
            }
        }
    }
    Outcome::new("velocity_oracle", worst <= 1e-9, format!("{n} models, max |diff| {worst:.2e}"))
}

fn random_record(
    rng: &mut SplitMix64,
    blocks: usize,
    heads: usize,
    l: usize,
    t: usize,
) -> CrossAttentionRecord {
    let logits = (0..blocks).map(|_| (0..heads).map(|_| random_matrix(rng, l, t, 3.0)).collect()).collect();
    CrossAttentionRecord { t: 1.0, logits }
}

/// Forward and reverse alignment against explicit loops, plus the
/// full-subset (score 1) and empty-subset (score 0) anchors.
pub fn alignment_oracle(n: usize, seed: u64) -> Outcome {
    let mut rng = SplitMix64::new(seed ^ 0x04);
    let (mut worst, mut selection_mismatches, mut anchor_err) = (0.0f64, 0usize, 0.0f64);
    for _ in 0..n {
        let (blocks, heads) = (between(&mut rng, 1, 3), between(&mut rng, 1, 4));
        let (l, t) = (between(&mut rng, 2, 40), between(&mut rng, 2, 30));
        let record = random_record(&mut rng, blocks, heads, l, t);
        let subset = if below(&mut rng, 2) == 0 {
            HeadSubset::Auto(between(&mut rng, 1, heads))
        } else {
            let mut s = random_subset(&mut rng, heads, 0.5);
            if s.is_empty() {
                s.push(below(&mut rng, heads));
            }
            HeadSubset::Explicit(s)
        };
        let cfg = AlignmentConfig {
            score_threshold: 0.05 + 0.9 * rng.next_f64(),
            reverse_threshold: 0.05 + 0.9 * rng.next_f64(),
            heads: subset.clone(),
            block_index: below(&mut rng, blocks),
            average_blocks: below(&mut rng, 3) == 0,
            refine: None,
        };

        let read: Vec<usize> = if cfg.average_blocks { (0..blocks).collect() } else { vec![cfg.block_index] };
        let mut expect_heads = Vec::new();
        let mut combined = vec![vec![0.0; t]; l];
        for &b in &read {
            let dense: Vec<oracle::Dense> = record.logits[b].iter().map(to_dense).collect();
            let hs = match &subset {
                HeadSubset::Auto(k) => oracle::rank_heads(&dense)[..*k].to_vec(),
                HeadSubset::Explicit(s) => s.clone(),
            };
            let sum = oracle::head_sum(&dense, &hs);
            for i in 0..l {
                for j in 0..t {
                    combined[i][j] += sum[i][j] / read.len() as f64;
                }
            }
            expect_heads.push(hs);
        }

        let density = rng.next_f64();
        let columns = random_subset(&mut rng, t, density);
        let positions = random_positions(&mut rng, 16, l);
        let fa = forward_align(&record, &columns, &cfg, &positions).expect("valid");
        let f_ref = oracle::forward_scores(&combined, &columns);
        worst = worst.max(f_ref.iter().zip(&fa.scores).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        if fa.raw.as_slice() != oracle::threshold(&f_ref, cfg.score_threshold)
            || fa.refined != fa.raw
            || fa.heads != expect_heads
        {
            selection_mismatches += 1;
        }

        let registers = below(&mut rng, t - 1);
        let layout = TokenLayout::new(registers, t - 1 - registers).expect("non-empty");
        let density = rng.next_f64();
        let rows = VoxelSelection::from_unsorted(random_subset(&mut rng, l, density));
        let ra = reverse_align(&record, &layout, &rows, &cfg).expect("valid");
        let r_ref = oracle::reverse_scores(&combined, rows.as_slice());
        worst = worst.max(r_ref.iter().zip(&ra.scores).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let expect_sel: Vec<usize> = oracle::threshold(&r_ref, cfg.reverse_threshold)
            .into_iter()
            .filter(|&j| j > registers)
            .map(|j| j - 1 - registers)
            .collect();
        if ra.selected.as_slice() != expect_sel {
            selection_mismatches += 1;
        }

        let logits = Matrix::from_vec(l, t, combined.concat()).expect("sized");
        let all_cols: Vec<usize> = (0..t).collect();
        let full = forward_scores(&logits, &all_cols).expect("in range");
        let empty = forward_scores(&logits, &[]).expect("in range");
        let full_r = reverse_scores(&logits, &VoxelSelection::all(l)).expect("in range");
        let empty_r = reverse_scores(&logits, &VoxelSelection::empty()).expect("in range");
        for s in full.iter().chain(&full_r) {
            anchor_err = anchor_err.max((s - 1.0).abs());
        }
        for s in empty.iter().chain(&empty_r) {
            anchor_err = anchor_err.max(s.abs());
        }
    }
    Outcome::new(
        "alignment_oracle",
        worst <= 1e-9 && selection_mismatches == 0 && anchor_err <= 1e-12,
        format!("{n} instances, max score diff {worst:.2e}, {selection_mismatches} selection mismatches, anchor error {anchor_err:.2e}"),
    )
}

/// kNN vote against a full-sort brute force, in natural and shuffled order.
pub fn knn_oracle(n: usize, seed: u64) -> Outcome {
    let mut rng = SplitMix64::new(seed ^ 0x05);
    let mut mismatches = 0;
    let mut total_voxels = 0;
    for inst in 0..n {
        let l = between(&mut rng, 17, 500);
        let grid = between(&mut rng, 8, 16) as u32;
        let positions = random_positions(&mut rng, grid, l);
        let density = 0.1 + 0.8 * rng.next_f64();
        let sel = VoxelSelection::from_unsorted(random_subset(&mut rng, l, density));
        let params = if inst % 3 == 0 {
            let fill = rng.next_f64();
            KnnVoteParams {
                k: between(&mut rng, 1, 24.min(l - 1)),
                fill_frac: fill,
                clear_frac: fill * rng.next_f64(),
            }
        } else {
            KnnVoteParams::default()
        };
        let got = knn_vote_refine(&sel, &positions, &params).expect("valid");
        let expect =
            oracle::knn_refine(&sel.to_mask(l), &positions, params.k, params.fill_frac, params.clear_frac);
        let order = shuffled(&mut rng, l);
        let permuted = knn_vote_refine_in_order(&sel, &positions, &params, &order).expect("valid");
        if got.as_slice() != expect.as_slice() || permuted != got {
            mismatches += 1;
        }
        total_voxels += l;
    }
    Outcome::new(
        "knn_oracle",
        mismatches == 0,
        format!("{n} sets ({total_voxels} voxels), {mismatches} mismatches"),
    )
}

/// Enhancement construction against the per-cell rule, identity strengths
/// leaving sampling bit-identical, and monotone attention mass over the
/// strength grid 0.5, 1, 2, 5.
pub fn enhancement_oracle(n: usize, seed: u64) -> Outcome {
    const GRID: [f64; 4] = [0.5, 1.0, 2.0, 5.0];
    let mut rng = SplitMix64::new(seed ^ 0x06);
    let (mut build_mismatch, mut identity_mismatch, mut monotone_violations, mut rows_checked) =
        (0, 0, 0, 0usize);
    for _ in 0..n {
        let (l, t) = (between(&mut rng, 1, 30), between(&mut rng, 1, 30));
        let sources: Vec<(Vec<usize>, Vec<usize>, f64)> = (0..between(&mut rng, 1, 4))
            .map(|_| {
                (random_subset(&mut rng, l, 0.5), random_subset(&mut rng, t, 0.5), 0.5 + 4.5 * rng.next_f64())
            })
            .collect();
        let built = build_enhancement(
            &sources
                .iter()
                .map(|(r, c, lambda)| EnhancementSource {
                    rows: VoxelSelection::from_unsorted(r.clone()),
                    cols: TokenIndexSet::from_unsorted(c.clone()),
                    lambda: *lambda,
                })
                .collect::<Vec<_>>(),
            l,
            t,
        )
        .expect("valid");
        if oracle::max_abs_diff(&oracle::enhancement(&sources, l, t), built.as_matrix()) != 0.0 {
            build_mismatch += 1;
        }

        // Identity strengths on a small model: sampling must not change at all.
        let mut cfg = random_flow_config(&mut rng);
        cfg.enhanced_blocks = None;
        let model = FlowModel::new(cfg.clone()).expect("valid");
        let positions = random_positions(&mut rng, 8, l);
        let tokens = random_matrix(&mut rng, t, cfg.token_dim, 1.0);
        let ones: Vec<EnhancementSource> = sources
            .iter()
            .map(|(r, c, _)| EnhancementSource {
                rows: VoxelSelection::from_unsorted(r.clone()),
                cols: TokenIndexSet::from_unsorted(c.clone()),
                lambda: 1.0,
            })
            .collect();
        let e = build_enhancement(&ones, l, t).expect("valid");
        let scfg = SamplerConfig { step_count: 5, noise_seed: rng.next_u64(), capture_step: 0 };
        let plain = model.sample(&positions, &tokens, &scfg, None).expect("finite");
        let scaled = model.sample(&positions, &tokens, &scfg, Some(&e)).expect("finite");
        let same_bits = plain
            .latents()
            .as_slice()
            .iter()
            .zip(scaled.latents().as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !e.is_identity() || !same_bits {
            identity_mismatch += 1;
        }

        // Monotone mass on the scaled columns, using this model's real logits.
        let slat = SparseVoxelLatent::new(8, positions, model.noise(l, scfg.noise_seed)).expect("valid");
        let (_, record) = model.velocity(&slat, 1.0, &tokens, None).expect("finite");
        let logits = record.head(0, 0);
        let cols = TokenIndexSet::from_unsorted(random_subset(&mut rng, t, 0.4));
        let masses: Vec<Vec<f64>> = GRID
            .iter()
            .map(|&lambda| {
                let src = EnhancementSource { rows: VoxelSelection::all(l), cols: cols.clone(), lambda };
                let e = build_enhancement(&[src], l, t).expect("valid");
                let p = softmax_rows(&apply_enhancement(logits, &e).expect("shapes"));
                (0..l).map(|i| cols.iter().map(|j| p.get(i, j)).sum()).collect()
            })
            .collect();
        for i in 0..l {
            if cols.is_empty() || cols.iter().any(|j| logits.get(i, j) < 0.0) {
                continue;
            }
            rows_checked += 1;
            if masses.windows(2).any(|w| w[1][i] < w[0][i]) {
                monotone_violations += 1;
            }
        }
    }
    Outcome::new(
        "enhancement_oracle",
        build_mismatch == 0 && identity_mismatch == 0 && monotone_violations == 0,
        format!(
            "{n} instances, {build_mismatch} construction mismatches, {identity_mismatch} identity mismatches, \
             {monotone_violations}/{rows_checked} non-monotone rows"
        ),
    )
}

/// Inpainting keeps unaligned rows bit-equal to the starting latents and
/// changes aligned rows.
pub fn inpaint_contract(n: usize, seed: u64) -> Outcome {
    let mut rng = SplitMix64::new(seed ^ 0x07);
    let (mut copy_failures, mut differing) = (0, 0);
    for _ in 0..n {
        let cfg = random_flow_config(&mut rng);
        let model = FlowModel::new(cfg.clone()).expect("valid");
        let l = between(&mut rng, 4, 40);
        let positions = random_positions(&mut rng, 8, l);
        let (tg, tl) = (between(&mut rng, 1, 12), between(&mut rng, 1, 12));
        let global = random_matrix(&mut rng, tg, cfg.token_dim, 1.0);
        let local = random_matrix(&mut rng, tl, cfg.token_dim, 1.0);
        let steps = between(&mut rng, 2, 10);
        let initial = model
            .sample(
                &positions,
                &global,
                &SamplerConfig { step_count: steps, noise_seed: rng.next_u64(), capture_step: 0 },
                None,
            )
            .expect("finite");
        let mut unaligned = random_subset(&mut rng, l, 0.5);
        if unaligned.len() == l {
            unaligned.pop();
        }
        let unaligned = VoxelSelection::from_unsorted(unaligned);
        let scfg = SamplerConfig { step_count: steps, noise_seed: rng.next_u64(), capture_step: 0 };
        let out = model.sample_inpaint(&initial, &local, &unaligned, &scfg).expect("finite");
        let mut copied = true;
        let mut diff2 = 0.0;
        for i in 0..l {
            let (a, b) = (out.latents().row(i), initial.latents().row(i));
            if unaligned.contains(i) {
                copied &= a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            } else {
                diff2 += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
        }
        copy_failures += usize::from(!copied);
        differing += usize::from(diff2 > 0.0);
    }
    let ok = copy_failures == 0 && differing as f64 >= 0.95 * n as f64;
    Outcome::new(
        "inpaint_contract",
        ok,
        format!("{n} trials, {copy_failures} copy failures, aligned rows differ in {differing}"),
    )
}

/// Relative Frobenius distance between full-image and cropped encodings of
/// the same patches; returns `(with attention, depth-0 control)`.
pub fn crop_distance(
    encoder_cfg: &EncoderConfig,
    patch: usize,
    rows: usize,
    cols: usize,
    region: (usize, usize),
    seed: u64,
) -> (f64, f64) {
    let mut rng = SplitMix64::new(seed);
    let (h, w, ch) = (rows * patch, cols * patch, 3);
    let pixels = PixelGrid::new(h, w, ch, (0..h * w * ch).map(|_| rng.next_f64()).collect()).expect("sized");
    let geom = ImageGeometry::new(h, w, patch).expect("divisible");
    let mut mask = RegionMask::filled(h, w, false);
    for y in 0..region.0 * patch {
        for x in 0..region.1 * patch {
            mask.set(y, x, true);
        }
    }
    let distance = |cfg: &EncoderConfig| {
        let enc = ToyEncoder::new(*cfg, patch, ch).expect("valid");
        let full = enc.encode_image(&pixels, &geom).expect("finite");
        let crop = enc.encode_cropped(&pixels, &mask, &geom).expect("non-empty");
        let (mut diff, mut norm) = (0.0, 0.0);
        for q in 0..crop.geometry.patch_count() {
            let p = crop.full_patch_index(q).expect("crop starts on the patch grid");
            for (a, b) in full.patch_token(p).iter().zip(crop.tokens.patch_token(q)) {
                diff += (a - b) * (a - b);
                norm += a * a;
            }
        }
        (diff / norm).sqrt()
    };
    (distance(encoder_cfg), distance(&EncoderConfig { depth: 0, ..*encoder_cfg }))
}

/// Full-image encodings differ from cropped ones once attention mixes
/// context in, and coincide with a grid-aligned crop at depth 0. Token
/// widths start at 8: with 2 channels layer norm maps every token to ±1.
pub fn context_sensitivity(n: usize, seed: u64) -> Outcome {
    let mut rng = SplitMix64::new(seed ^ 0x08);
    let (mut min_rel, mut max_control, mut too_close) = (f64::INFINITY, 0.0f64, 0);
    for _ in 0..n {
        let heads = between(&mut rng, 1, 4);
        let cfg = EncoderConfig {
            token_dim: 8 * heads * between(&mut rng, 1, 2),
            depth: between(&mut rng, 1, 3),
            head_count: heads,
            register_count: below(&mut rng, 5),
            seed: rng.next_u64(),
        };
        let (rows, cols) = (between(&mut rng, 2, 6), between(&mut rng, 2, 6));
        let region = if below(&mut rng, 2) == 0 {
            (between(&mut rng, 1, rows - 1), between(&mut rng, 1, cols))
        } else {
            (between(&mut rng, 1, rows), between(&mut rng, 1, cols - 1))
        };
        let (rel, control) = crop_distance(&cfg, between(&mut rng, 2, 8), rows, cols, region, rng.next_u64());
        min_rel = min_rel.min(rel);
        max_control = max_control.max(control);
        too_close += usize::from(rel <= 1e-3);
    }
    Outcome::new(
        "context_sensitivity",
        too_close == 0 && max_control == 0.0,
        format!("{n} images, min relative difference {min_rel:.3e}, depth-0 control max {max_control:.1e}"),
    )
}
