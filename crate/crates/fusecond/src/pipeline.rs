//! End-to-end run: encode, initialize voxels, align, fuse, enhance, sample.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use fusecond_core::alignment::{
    combined_logits, forward_align, reverse_align, score_histogram, AlignmentConfig,
};
use fusecond_core::encoder::{PixelGrid, TokenSequence, ToyEncoder};
use fusecond_core::enhancement::{build_enhancement, default_lambda, EnhancementMatrix, EnhancementSource};
use fusecond_core::flow::FlowModel;
use fusecond_core::fusion::{fuse_conditions, ConditionSource, SourceId, UnifiedConditionTokens};
use fusecond_core::patch_grid::{downsample_mask, patch_indices, ImageGeometry, TokenIndexSet};
use fusecond_core::voxel::{unaligned_complement, Position, SparseVoxelLatent, VoxelSelection};
use fusecond_core::Matrix;
use rayon::prelude::*;

use crate::config::{Mode, PipelineConfig, Stage};
use crate::error::{Error, Result, StageExt};
use crate::mask::load_mask;
use crate::records::{format_lambdas, format_provenance, format_selections, IndexRecord};
use crate::slat::save_slat;
use crate::tensor::{load_tensor, save_tensor, Tensor};

pub const HISTOGRAM_BINS: usize = 16;

/// Forward alignment of one local image.
#[derive(Debug, Clone)]
pub struct LocalResult {
    pub patch_count: usize,
    /// Token count of the image's own sequence.
    pub token_count: usize,
    /// Selected patch indices `D_k`.
    pub selection: TokenIndexSet,
    pub heads: Vec<Vec<usize>>,
    /// Head-summed logits against the image's own tokens, `L x token_count`.
    pub logits: Matrix,
    pub scores: Vec<f64>,
    pub raw: VoxelSelection,
    pub refined: VoxelSelection,
}

/// Reverse alignment on the global image.
#[derive(Debug, Clone)]
pub struct GlobalResult {
    pub patch_count: usize,
    pub token_count: usize,
    /// Selected patch indices `D_g`.
    pub selection: TokenIndexSet,
    pub heads: Vec<Vec<usize>>,
    pub logits: Matrix,
    /// One score per global token, CLS and REG included.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: PipelineConfig,
    pub positions: Vec<Position>,
    pub locals: Vec<LocalResult>,
    /// Absent in inpaint mode, which conditions on local tokens only.
    pub global: Option<GlobalResult>,
    pub unaligned: VoxelSelection,
    pub unified: Option<UnifiedConditionTokens>,
    pub lambdas: BTreeMap<SourceId, f64>,
    pub enhancement: Option<EnhancementMatrix>,
    /// Global-conditioned latents that inpainting starts from.
    pub initial: Option<SparseVoxelLatent>,
    pub final_slat: Option<SparseVoxelLatent>,
    pub warnings: Vec<String>,
    pub threads: usize,
    pub timings: Vec<(&'static str, Duration)>,
}

/// Degree of parallelism: the configured count, lowered by `FUSECOND_THREADS`.
pub fn effective_threads(configured: usize) -> usize {
    let cap = std::env::var("FUSECOND_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    configured.min(cap.unwrap_or(usize::MAX)).max(1)
}

pub fn build_encoder(cfg: &PipelineConfig, channels: usize) -> Result<ToyEncoder> {
    Ok(ToyEncoder::new(cfg.encoder_config(), cfg.patch_size, channels)?)
}

pub fn build_flow_model(cfg: &PipelineConfig) -> Result<FlowModel> {
    Ok(FlowModel::new(cfg.flow_config())?)
}

struct Timer(Vec<(&'static str, Duration)>, Instant);

impl Timer {
    fn lap(&mut self, name: &'static str) {
        let now = Instant::now();
        self.0.push((name, now - self.1));
        self.1 = now;
    }
}

struct LocalInputs {
    tokens: TokenSequence,
    selection: TokenIndexSet,
    patch_count: usize,
}

fn load_pixels(path: &Path) -> Result<PixelGrid> {
    load_tensor(path)?.to_pixels()
}

fn encode_local(cfg: &PipelineConfig, encoder: &ToyEncoder, k: usize) -> Result<LocalInputs> {
    let input = &cfg.locals[k];
    let pixels = load_pixels(&input.image)?;
    let mask = load_mask(&input.mask)?;
    let geom = ImageGeometry::new(pixels.height(), pixels.width(), cfg.patch_size)?;
    if cfg.mode == Mode::NoMcfmAblation {
        let crop = encoder.encode_cropped(&pixels, &mask, &geom)?;
        let pmask = downsample_mask(&crop.mask, &crop.geometry, cfg.coverage_threshold)?;
        return Ok(LocalInputs {
            patch_count: crop.geometry.patch_count(),
            selection: patch_indices(&pmask),
            tokens: crop.tokens,
        });
    }
    let pmask = downsample_mask(&mask, &geom, cfg.coverage_threshold)?;
    Ok(LocalInputs {
        tokens: encoder.encode_image(&pixels, &geom)?,
        selection: patch_indices(&pmask),
        patch_count: geom.patch_count(),
    })
}

fn align_local(
    flow: &FlowModel,
    positions: &[Position],
    inputs: &LocalInputs,
    acfg: &AlignmentConfig,
    noise_seed: u64,
    cfg: &PipelineConfig,
) -> Result<LocalResult> {
    let record = flow.capture_attention(positions, &inputs.tokens.tokens, &cfg.sampler_config(noise_seed))?;
    let layout = &inputs.tokens.layout;
    let columns: Vec<usize> = inputs.selection.iter().map(|p| layout.position_of_patch(p)).collect();
    let fa = forward_align(&record, &columns, acfg, positions)?;
    let (logits, _) = combined_logits(&record, acfg)?;
    Ok(LocalResult {
        patch_count: inputs.patch_count,
        token_count: layout.total_count(),
        selection: inputs.selection.clone(),
        heads: fa.heads,
        logits,
        scores: fa.scores,
        raw: fa.raw,
        refined: fa.refined,
    })
}

/// Runs encoding and both alignment directions but stops before fusion.
pub fn run_alignment(cfg: &PipelineConfig) -> Result<RunArtifacts> {
    run(cfg, false)
}

/// Runs the whole pipeline in the configured mode.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunArtifacts> {
    run(cfg, true)
}

fn run(cfg: &PipelineConfig, generate: bool) -> Result<RunArtifacts> {
    cfg.validate().stage("config")?;
    let threads = effective_threads(cfg.threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut timer = Timer(Vec::new(), Instant::now());
    let mut warnings = Vec::new();

    // 1. Global image and initial structure.
    let global_pixels = load_pixels(&cfg.global_image).stage("load-global")?;
    let global_geom = ImageGeometry::new(global_pixels.height(), global_pixels.width(), cfg.patch_size)
        .stage("load-global")?;
    let encoder = build_encoder(cfg, global_pixels.channels()).stage("encode-global")?;
    let global_tokens = encoder.encode_image(&global_pixels, &global_geom).stage("encode-global")?;
    let flow = build_flow_model(cfg).stage("init-voxels")?;
    let positions = flow.init_voxels_from_global(&global_tokens).stage("init-voxels")?;
    timer.lap("encode-global+init-voxels");

    let mut acfg = cfg.alignment.clone();
    if let Some(p) = &acfg.refine {
        if p.k >= positions.len() {
            warnings.push(format!(
                "only {} voxels, fewer than k + 1 = {}; skipping kNN refinement",
                positions.len(),
                p.k + 1
            ));
            acfg.refine = None;
        }
    }

    // 2-3. Per-local encoding and forward alignment, concurrently per image.
    let align_seed = cfg.stage_seed(Stage::AlignNoise);
    let per_local: Vec<Result<(LocalInputs, LocalResult)>> = pool.install(|| {
        (0..cfg.locals.len())
            .into_par_iter()
            .map(|k| {
                let inputs = encode_local(cfg, &encoder, k).stage("encode-local")?;
                let result =
                    align_local(&flow, &positions, &inputs, &acfg, align_seed, cfg).stage("align-forward")?;
                Ok((inputs, result))
            })
            .collect()
    });
    let (local_inputs, locals): (Vec<_>, Vec<_>) =
        per_local.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    for (k, l) in locals.iter().enumerate() {
        if l.refined.is_empty() {
            let msg = format!("{}: no voxels aligned after refinement", SourceId::Local(k));
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    timer.lap("encode-local+align-forward");

    // 4. Unaligned voxels.
    let refined: Vec<VoxelSelection> = locals.iter().map(|l| l.refined.clone()).collect();
    let unaligned = unaligned_complement(&refined, positions.len()).stage("align-reverse")?;

    let mut art = RunArtifacts {
        config: cfg.clone(),
        positions,
        locals,
        global: None,
        unaligned,
        unified: None,
        lambdas: BTreeMap::new(),
        enhancement: None,
        initial: None,
        final_slat: None,
        warnings,
        threads,
        timings: Vec::new(),
    };

    let local_sources = || -> Result<Vec<ConditionSource>> {
        local_inputs
            .iter()
            .enumerate()
            .map(|(k, li)| {
                Ok(ConditionSource::new(SourceId::Local(k), li.tokens.clone(), li.selection.clone())?)
            })
            .collect()
    };

    if cfg.mode == Mode::Inpaint {
        if generate {
            let all = TokenIndexSet::from_unsorted((0..global_geom.patch_count()).collect());
            let global_only =
                fuse_conditions(&[
                    ConditionSource::new(SourceId::Global, global_tokens.clone(), all).stage("inpaint")?
                ])
                .stage("inpaint")?;
            let initial = flow
                .sample(
                    &art.positions,
                    &global_only.matrix,
                    &cfg.sampler_config(cfg.stage_seed(Stage::InitialNoise)),
                    None,
                )
                .stage("inpaint")?;
            timer.lap("initial-sample");
            let unified = fuse_conditions(&local_sources().stage("fuse")?).stage("fuse")?;
            let out = flow
                .sample_inpaint(
                    &initial,
                    &unified.matrix,
                    &art.unaligned,
                    &cfg.sampler_config(cfg.stage_seed(Stage::GenerateNoise)),
                )
                .stage("inpaint")?;
            timer.lap("inpaint-sample");
            art.unified = Some(unified);
            art.initial = Some(initial);
            art.final_slat = Some(out);
        }
        art.timings = timer.0;
        return Ok(art);
    }

    let global_record = flow
        .capture_attention(&art.positions, &global_tokens.tokens, &cfg.sampler_config(align_seed))
        .stage("align-reverse")?;
    let ra =
        reverse_align(&global_record, &global_tokens.layout, &art.unaligned, &acfg).stage("align-reverse")?;
    let (global_logits, _) = combined_logits(&global_record, &acfg).stage("align-reverse")?;
    art.global = Some(GlobalResult {
        patch_count: global_geom.patch_count(),
        token_count: global_tokens.layout.total_count(),
        selection: ra.selected.clone(),
        heads: ra.heads,
        logits: global_logits,
        scores: ra.scores,
    });
    timer.lap("align-reverse");
    if !generate {
        art.timings = timer.0;
        return Ok(art);
    }

    // 5. Fusion.
    let mut sources = local_sources().stage("fuse")?;
    sources.push(ConditionSource::new(SourceId::Global, global_tokens, ra.selected.clone()).stage("fuse")?);
    let unified = fuse_conditions(&sources).stage("fuse")?;
    timer.lap("fuse");

    // 6. Enhancement.
    let lambda_for = |id: SourceId, selected: usize, total: usize| -> Result<f64> {
        match cfg.lambda_overrides.get(&id) {
            Some(&l) => Ok(l),
            None => Ok(default_lambda(selected, total, cfg.beta)?),
        }
    };
    let mut e_sources = Vec::new();
    for (k, l) in art.locals.iter().enumerate() {
        let id = SourceId::Local(k);
        let lambda = lambda_for(id, l.selection.len(), l.patch_count).stage("enhance")?;
        art.lambdas.insert(id, lambda);
        let cols = TokenIndexSet::from_unsorted(unified.columns_of(id).stage("enhance")?);
        e_sources.push(EnhancementSource { rows: l.refined.clone(), cols, lambda });
    }
    let lambda_g =
        lambda_for(SourceId::Global, ra.selected.len(), global_geom.patch_count()).stage("enhance")?;
    art.lambdas.insert(SourceId::Global, lambda_g);
    let cols = TokenIndexSet::from_unsorted(unified.columns_of(SourceId::Global).stage("enhance")?);
    e_sources.push(EnhancementSource { rows: art.unaligned.clone(), cols, lambda: lambda_g });
    let e = build_enhancement(&e_sources, art.positions.len(), unified.len()).stage("enhance")?;
    timer.lap("enhance");

    // 7. Enhanced generation.
    let out = flow
        .sample(
            &art.positions,
            &unified.matrix,
            &cfg.sampler_config(cfg.stage_seed(Stage::GenerateNoise)),
            Some(&e),
        )
        .stage("sample")?;
    timer.lap("sample");

    art.unified = Some(unified);
    art.enhancement = Some(e);
    art.final_slat = Some(out);
    art.timings = timer.0;
    Ok(art)
}

/// Files written by [`RunArtifacts::write_to`].
pub mod files {
    pub const MANIFEST: &str = "manifest.txt";
    pub const RUNTIME: &str = "runtime.txt";
    pub const REPORT: &str = "report.txt";
    pub const POSITIONS: &str = "positions.fus3";
    pub const UNIFIED: &str = "unified.fus3";
    pub const PROVENANCE: &str = "provenance.txt";
    pub const SELECTIONS: &str = "selections.txt";
    pub const LAMBDAS: &str = "lambdas.txt";
    pub const ENHANCEMENT: &str = "enhancement.fus3";
    pub const INITIAL: &str = "initial.slat";
    pub const FINAL: &str = "final.slat";

    pub fn scores(source: &str) -> String {
        format!("{source}.scores.fus3")
    }

    pub fn logits(source: &str) -> String {
        format!("{source}.logits.fus3")
    }
}

impl RunArtifacts {
    /// Named index sets: per-local `raw`/`refined` voxels and `tokens`,
    /// `unaligned`, and `global.tokens` when reverse alignment ran.
    pub fn selections(&self) -> BTreeMap<String, IndexRecord> {
        let l = self.positions.len();
        let mut sets = BTreeMap::new();
        for (k, r) in self.locals.iter().enumerate() {
            let id = SourceId::Local(k);
            sets.insert(format!("{id}.raw"), IndexRecord { bound: l, indices: r.raw.as_slice().to_vec() });
            sets.insert(
                format!("{id}.refined"),
                IndexRecord { bound: l, indices: r.refined.as_slice().to_vec() },
            );
            sets.insert(
                format!("{id}.tokens"),
                IndexRecord { bound: r.patch_count, indices: r.selection.as_slice().to_vec() },
            );
        }
        sets.insert(
            "unaligned".into(),
            IndexRecord { bound: l, indices: self.unaligned.as_slice().to_vec() },
        );
        if let Some(g) = &self.global {
            sets.insert(
                "global.tokens".into(),
                IndexRecord { bound: g.patch_count, indices: g.selection.as_slice().to_vec() },
            );
        }
        sets
    }

    /// Manifest text: the resolved configuration (loadable as a config) and
    /// the derived stage seeds as comments.
    pub fn manifest(&self) -> String {
        let mut out = String::from("# fusecond run manifest\n");
        out.push_str(&self.config.to_config_text());
        for s in Stage::ALL {
            out.push_str(&format!("# seed.{} = {}\n", s.label(), self.config.stage_seed(s)));
        }
        out
    }

    /// Per-source alignment summary.
    pub fn alignment_report(&self) -> String {
        let mut out = format!("voxels = {}\nunaligned = {}\n", self.positions.len(), self.unaligned.len());
        for w in &self.warnings {
            out.push_str(&format!("warning = {w}\n"));
        }
        for (k, r) in self.locals.iter().enumerate() {
            out.push_str(&format!("\n[{}]\n", SourceId::Local(k)));
            out.push_str(&format!("selected_tokens = {} / {}\n", r.selection.len(), r.patch_count));
            out.push_str(&format!("heads = {}\n", format_heads(&r.heads)));
            out.push_str(&format!("voxels_raw = {}\nvoxels_refined = {}\n", r.raw.len(), r.refined.len()));
            out.push_str(&format!(
                "score_histogram = {}\n",
                join(&score_histogram(&r.scores, HISTOGRAM_BINS))
            ));
        }
        if let Some(g) = &self.global {
            out.push_str("\n[global]\n");
            out.push_str(&format!("selected_tokens = {} / {}\n", g.selection.len(), g.patch_count));
            out.push_str(&format!("heads = {}\n", format_heads(&g.heads)));
            out.push_str(&format!(
                "score_histogram = {}\n",
                join(&score_histogram(&g.scores, HISTOGRAM_BINS))
            ));
        }
        out
    }

    /// Writes every artifact into `dir`. All files except `runtime.txt` are
    /// a pure function of the configuration.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = |name: &str, body: String| {
            fs::write(dir.join(name), body).map_err(|e| Error::io(dir.join(name), e))
        };
        text(files::MANIFEST, self.manifest())?;
        text(files::REPORT, self.alignment_report())?;
        text(files::SELECTIONS, format_selections(&self.selections()))?;
        let mut runtime = format!("threads = {}\n", self.threads);
        for (name, d) in &self.timings {
            runtime.push_str(&format!("time.{name} = {:.6}\n", d.as_secs_f64()));
        }
        text(files::RUNTIME, runtime)?;

        let pos: Vec<f32> = self.positions.iter().flat_map(|p| p.map(|c| c as f32)).collect();
        save_tensor(dir.join(files::POSITIONS), &Tensor::new(vec![self.positions.len(), 3], pos)?)?;
        for (k, r) in self.locals.iter().enumerate() {
            let id = SourceId::Local(k).to_string();
            save_tensor(dir.join(files::scores(&id)), &Tensor::from_vector(&r.scores))?;
            save_tensor(dir.join(files::logits(&id)), &Tensor::from_matrix(&r.logits))?;
        }
        if let Some(g) = &self.global {
            save_tensor(dir.join(files::scores("global")), &Tensor::from_vector(&g.scores))?;
            save_tensor(dir.join(files::logits("global")), &Tensor::from_matrix(&g.logits))?;
        }
        if let Some(u) = &self.unified {
            save_tensor(dir.join(files::UNIFIED), &Tensor::from_matrix(&u.matrix))?;
            text(files::PROVENANCE, format_provenance(&u.provenance))?;
        }
        if !self.lambdas.is_empty() {
            text(files::LAMBDAS, format_lambdas(&self.lambdas))?;
        }
        if let Some(e) = &self.enhancement {
            save_tensor(dir.join(files::ENHANCEMENT), &Tensor::from_matrix(e.as_matrix()))?;
        }
        if let Some(s) = &self.initial {
            save_slat(dir.join(files::INITIAL), s)?;
        }
        if let Some(s) = &self.final_slat {
            save_slat(dir.join(files::FINAL), s)?;
        }
        Ok(())
    }
}

fn format_heads(heads: &[Vec<usize>]) -> String {
    heads.iter().map(|h| join(h)).collect::<Vec<_>>().join(" | ")
}

pub(crate) fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}
