//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown or repeated keys are errors. Relative paths resolve against the
//! directory of the config file.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fusecond_core::alignment::{AlignmentConfig, HeadSubset};
use fusecond_core::encoder::EncoderConfig;
use fusecond_core::enhancement::DEFAULT_BETA;
use fusecond_core::flow::{FlowModelConfig, SamplerConfig};
use fusecond_core::fusion::SourceId;
use fusecond_core::patch_grid::{DEFAULT_COVERAGE_THRESHOLD, DEFAULT_PATCH_SIZE};
use fusecond_core::voxel::KnnVoteParams;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Full,
    Inpaint,
    NoMcfmAblation,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::Inpaint => "inpaint",
            Mode::NoMcfmAblation => "no_mcfm_ablation",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "inpaint" => Ok(Mode::Inpaint),
            "no_mcfm_ablation" => Ok(Mode::NoMcfmAblation),
            _ => Err(Error::Config(format!("unknown mode `{s}` (full, inpaint, no_mcfm_ablation)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalInput {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub global_image: PathBuf,
    pub locals: Vec<LocalInput>,
    pub patch_size: usize,
    pub coverage_threshold: f64,
    /// `seed` is ignored; the encoder seed derives from `seed` below.
    pub encoder: EncoderConfig,
    /// `token_dim` and `seed` are ignored; they come from the encoder and `seed`.
    pub flow: FlowModelConfig,
    pub sampler_steps: usize,
    pub capture_step: usize,
    pub alignment: AlignmentConfig,
    pub beta: f64,
    pub lambda_overrides: BTreeMap<SourceId, f64>,
    pub mode: Mode,
    pub seed: u64,
    /// Upper bound on worker threads; `FUSECOND_THREADS` can lower it further.
    pub threads: usize,
    pub output_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn new(global_image: impl Into<PathBuf>) -> Self {
        Self {
            global_image: global_image.into(),
            locals: Vec::new(),
            patch_size: DEFAULT_PATCH_SIZE,
            coverage_threshold: DEFAULT_COVERAGE_THRESHOLD,
            encoder: EncoderConfig::default(),
            flow: FlowModelConfig::default(),
            sampler_steps: SamplerConfig::default().step_count,
            capture_step: 0,
            alignment: AlignmentConfig::default(),
            beta: DEFAULT_BETA,
            lambda_overrides: BTreeMap::new(),
            mode: Mode::Full,
            seed: 0,
            threads: 1,
            output_dir: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Self::from_entries(entries, base_dir)
    }

    fn from_entries(mut entries: BTreeMap<String, String>, base: &Path) -> Result<Self> {
        let resolve = |v: &str| -> PathBuf {
            let p = Path::new(v);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let global =
            entries.remove("global.image").ok_or_else(|| Error::Config("missing `global.image`".into()))?;
        let mut cfg = Self::new(resolve(&global));

        let mut locals: BTreeMap<usize, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
        let mut head_count = None;
        let mut head_list = None;
        let mut knn = KnnVoteParams::default();
        let mut refine = true;

        for (key, value) in entries {
            let v = value.as_str();
            if let Some(rest) = key.strip_prefix("local.") {
                let (idx, field) =
                    rest.split_once('.').ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
                let idx: usize = parse(&key, idx)?;
                let slot = locals.entry(idx).or_default();
                match field {
                    "image" => slot.0 = Some(resolve(v)),
                    "mask" => slot.1 = Some(resolve(v)),
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                continue;
            }
            if let Some(src) = key.strip_prefix("enhancement.lambda.") {
                let id: SourceId = src.parse().map_err(|_| Error::Config(format!("unknown key `{key}`")))?;
                cfg.lambda_overrides.insert(id, parse(&key, v)?);
                continue;
            }
            match key.as_str() {
                "geometry.patch_size" => cfg.patch_size = parse(&key, v)?,
                "mask.coverage_threshold" => cfg.coverage_threshold = parse(&key, v)?,
                "encoder.token_dim" => cfg.encoder.token_dim = parse(&key, v)?,
                "encoder.depth" => cfg.encoder.depth = parse(&key, v)?,
                "encoder.heads" => cfg.encoder.head_count = parse(&key, v)?,
                "encoder.registers" => cfg.encoder.register_count = parse(&key, v)?,
                "flow.latent_dim" => cfg.flow.latent_dim = parse(&key, v)?,
                "flow.heads" => cfg.flow.head_count = parse(&key, v)?,
                "flow.blocks" => cfg.flow.block_count = parse(&key, v)?,
                "flow.structure_resolution" => cfg.flow.structure_resolution = parse(&key, v)?,
                "flow.resolution" => cfg.flow.resolution = parse(&key, v)?,
                "flow.structure_bias" => cfg.flow.structure_bias = parse(&key, v)?,
                "flow.enhanced_blocks" => {
                    cfg.flow.enhanced_blocks = if v == "all" { None } else { Some(parse_list(&key, v)?) }
                }
                "sampler.steps" => cfg.sampler_steps = parse(&key, v)?,
                "sampler.capture_step" => cfg.capture_step = parse(&key, v)?,
                "alignment.threshold" => cfg.alignment.score_threshold = parse(&key, v)?,
                "alignment.reverse_threshold" => cfg.alignment.reverse_threshold = parse(&key, v)?,
                "alignment.head_count" => head_count = Some(parse(&key, v)?),
                "alignment.heads" => head_list = Some(parse_list(&key, v)?),
                "alignment.block" => cfg.alignment.block_index = parse(&key, v)?,
                "alignment.average_blocks" => cfg.alignment.average_blocks = parse(&key, v)?,
                "alignment.refine" => refine = parse(&key, v)?,
                "alignment.knn_k" => knn.k = parse(&key, v)?,
                "alignment.fill_frac" => knn.fill_frac = parse(&key, v)?,
                "alignment.clear_frac" => knn.clear_frac = parse(&key, v)?,
                "enhancement.beta" => cfg.beta = parse(&key, v)?,
                "run.mode" => cfg.mode = v.parse()?,
                "run.seed" => cfg.seed = parse(&key, v)?,
                "run.threads" => cfg.threads = parse(&key, v)?,
                "run.output" => cfg.output_dir = Some(resolve(v)),
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
        }

        cfg.alignment.heads = match (head_count, head_list) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set either `alignment.heads` or `alignment.head_count`, not both".into(),
                ))
            }
            (_, Some(list)) => HeadSubset::Explicit(list),
            (Some(n), None) => HeadSubset::Auto(n),
            (None, None) => cfg.alignment.heads,
        };
        cfg.alignment.refine = refine.then_some(knn);

        for (expect, (idx, (image, mask))) in locals.into_iter().enumerate() {
            if idx != expect {
                return Err(Error::Config(format!(
                    "local sources must be numbered 0.., missing local.{expect}"
                )));
            }
            let image = image.ok_or_else(|| Error::Config(format!("missing `local.{idx}.image`")))?;
            let mask = mask.ok_or_else(|| Error::Config(format!("missing `local.{idx}.mask`")))?;
            cfg.locals.push(LocalInput { image, mask });
        }
        Ok(cfg)
    }

    /// Checks values and that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        if self.locals.is_empty() {
            return Err(Error::Config("at least one local source is required".into()));
        }
        let files =
            std::iter::once(&self.global_image).chain(self.locals.iter().flat_map(|l| [&l.image, &l.mask]));
        for f in files {
            if !f.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", f.display())));
            }
        }
        if self.patch_size == 0 {
            return Err(Error::Config("geometry.patch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.coverage_threshold) {
            return Err(Error::Config("mask.coverage_threshold must lie in [0, 1]".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("enhancement.beta must be finite and >= 0".into()));
        }
        for (id, &l) in &self.lambda_overrides {
            if let SourceId::Local(k) = id {
                if *k >= self.locals.len() {
                    return Err(Error::Config(format!("lambda override for unknown source {id}")));
                }
            }
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda for {id} must be finite and > 0")));
            }
        }
        if self.threads == 0 {
            return Err(Error::Config("run.threads must be >= 1".into()));
        }
        self.encoder_config().validate()?;
        self.flow_config().validate()?;
        self.sampler_config(0).validate()?;
        self.alignment.validate()?;
        if let Some(p) = &self.alignment.refine {
            p.validate(usize::MAX)?;
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { seed: self.stage_seed(Stage::Encoder), ..self.encoder }
    }

    pub fn flow_config(&self) -> FlowModelConfig {
        FlowModelConfig {
            token_dim: self.encoder.token_dim,
            seed: self.stage_seed(Stage::Flow),
            ..self.flow.clone()
        }
    }

    pub fn sampler_config(&self, noise_seed: u64) -> SamplerConfig {
        SamplerConfig { step_count: self.sampler_steps, noise_seed, capture_step: self.capture_step }
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        fusecond_core::rng::derive_seed(self.seed, stage.label())
    }

    /// Every setting as config text that parses back to an equal config.
    /// Threads and the output directory are left out: they do not affect results.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("global.image", &self.global_image.display());
        for (i, l) in self.locals.iter().enumerate() {
            kv(&format!("local.{i}.image"), &l.image.display());
            kv(&format!("local.{i}.mask"), &l.mask.display());
        }
        kv("geometry.patch_size", &self.patch_size);
        kv("mask.coverage_threshold", &self.coverage_threshold);
        kv("encoder.token_dim", &self.encoder.token_dim);
        kv("encoder.depth", &self.encoder.depth);
        kv("encoder.heads", &self.encoder.head_count);
        kv("encoder.registers", &self.encoder.register_count);
        kv("flow.latent_dim", &self.flow.latent_dim);
        kv("flow.heads", &self.flow.head_count);
        kv("flow.blocks", &self.flow.block_count);
        kv("flow.structure_resolution", &self.flow.structure_resolution);
        kv("flow.resolution", &self.flow.resolution);
        kv("flow.structure_bias", &self.flow.structure_bias);
        let blocks = match &self.flow.enhanced_blocks {
            None => "all".to_string(),
            Some(b) => join(b),
        };
        kv("flow.enhanced_blocks", &blocks);
        kv("sampler.steps", &self.sampler_steps);
        kv("sampler.capture_step", &self.capture_step);
        kv("alignment.threshold", &self.alignment.score_threshold);
        kv("alignment.reverse_threshold", &self.alignment.reverse_threshold);
        match &self.alignment.heads {
            HeadSubset::Auto(n) => kv("alignment.head_count", n),
            HeadSubset::Explicit(h) => kv("alignment.heads", &join(h)),
        }
        kv("alignment.block", &self.alignment.block_index);
        kv("alignment.average_blocks", &self.alignment.average_blocks);
        kv("alignment.refine", &self.alignment.refine.is_some());
        let knn = self.alignment.refine.unwrap_or_default();
        kv("alignment.knn_k", &knn.k);
        kv("alignment.fill_frac", &knn.fill_frac);
        kv("alignment.clear_frac", &knn.clear_frac);
        kv("enhancement.beta", &self.beta);
        for (id, l) in &self.lambda_overrides {
            kv(&format!("enhancement.lambda.{id}"), l);
        }
        kv("run.mode", &self.mode);
        kv("run.seed", &self.seed);
        out
    }
}

/// Labels for per-stage seeds; each stage's randomness depends only on the
/// master seed and its own label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Flow,
    AlignNoise,
    InitialNoise,
    GenerateNoise,
}

impl Stage {
    pub const ALL: [Stage; 5] =
        [Stage::Encoder, Stage::Flow, Stage::AlignNoise, Stage::InitialNoise, Stage::GenerateNoise];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Encoder => "encoder",
            Stage::Flow => "flow",
            Stage::AlignNoise => "align-noise",
            Stage::InitialNoise => "initial-noise",
            Stage::GenerateNoise => "generate-noise",
        }
    }
}

/// Parses a `source=value` strength override such as `local0=2.5`.
pub fn parse_lambda_override(s: &str) -> Result<(SourceId, f64)> {
    let bad = || Error::Config(format!("bad lambda override `{s}`, expected SRC=VALUE"));
    let (id, v) = s.split_once('=').ok_or_else(bad)?;
    let id: SourceId = id.trim().parse().map_err(|_| bad())?;
    let v: f64 = v.trim().parse().map_err(|_| bad())?;
    Ok((id, v))
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# two locals
global.image = g.fus3
local.0.image = a.fus3
local.0.mask = a.mask
local.1.image = /abs/b.fus3
local.1.mask = b.mask
sampler.steps=10   # inline comment
alignment.heads = 0,2
enhancement.lambda.local1 = 2.5
run.mode = inpaint
";

    #[test]
    fn parses_and_resolves_paths() {
        let cfg = PipelineConfig::parse(SAMPLE, Path::new("/base")).unwrap();
        assert_eq!(cfg.global_image, PathBuf::from("/base/g.fus3"));
        assert_eq!(cfg.locals[1].image, PathBuf::from("/abs/b.fus3"));
        assert_eq!(cfg.sampler_steps, 10);
        assert_eq!(cfg.alignment.heads, HeadSubset::Explicit(vec![0, 2]));
        assert_eq!(cfg.lambda_overrides[&SourceId::Local(1)], 2.5);
        assert_eq!(cfg.mode, Mode::Inpaint);
    }

    #[test]
    fn round_trips_through_text() {
        let cfg = PipelineConfig::parse(SAMPLE, Path::new("/base")).unwrap();
        let again = PipelineConfig::parse(&cfg.to_config_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_unknown_duplicate_and_gapped_keys() {
        let base = Path::new("/");
        assert!(PipelineConfig::parse("global.image = g\nsampler.stpes = 3\n", base).is_err());
        assert!(PipelineConfig::parse("global.image = g\nrun.seed = 1\nrun.seed = 2\n", base).is_err());
        assert!(
            PipelineConfig::parse("global.image = g\nlocal.1.image = a\nlocal.1.mask = b\n", base).is_err()
        );
        assert!(PipelineConfig::parse("global.image = g\nlocal.0.image = a\n", base).is_err());
        assert!(PipelineConfig::parse("global.image = g\nenhancement.lambda.foo = 1\n", base).is_err());
        assert!(PipelineConfig::parse("global.image = g\nrun.mode = fast\n", base).is_err());
        assert!(PipelineConfig::parse(
            "global.image = g\nalignment.heads = 1\nalignment.head_count = 2\n",
            base
        )
        .is_err());
        assert!(PipelineConfig::parse("sampler.steps = 3\n", base).is_err());
        assert!(PipelineConfig::parse("global.image\n", base).is_err());
    }

    #[test]
    fn validation_requires_files_and_locals() {
        let cfg = PipelineConfig::parse(SAMPLE, Path::new("/nonexistent")).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("does not exist")));
        let no_locals = PipelineConfig::parse("global.image = g\n", Path::new("/")).unwrap();
        assert!(no_locals.validate().is_err());
    }

    #[test]
    fn lambda_overrides_parse() {
        assert_eq!(parse_lambda_override("local3=2.5").unwrap(), (SourceId::Local(3), 2.5));
        assert_eq!(parse_lambda_override("global = 1").unwrap(), (SourceId::Global, 1.0));
        assert!(parse_lambda_override("local=2").is_err());
        assert!(parse_lambda_override("global").is_err());
    }

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let cfg = PipelineConfig::new("g");
        let seeds: Vec<u64> = Stage::ALL.iter().map(|&s| cfg.stage_seed(s)).collect();
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        assert_eq!(cfg.encoder_config().seed, seeds[0]);
        assert_eq!(cfg.flow_config().token_dim, cfg.encoder.token_dim);
    }
}
