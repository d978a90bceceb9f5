//! Summaries and invariant spot checks over a run's output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fusecond_core::alignment::score_histogram;
use fusecond_core::fusion::{SourceId, TokenKind};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::pipeline::{files, join, HISTOGRAM_BINS};
use crate::records::{parse_lambdas, parse_provenance, parse_selections};
use crate::slat::load_slat;
use crate::tensor::{load_tensor, Tensor};

/// Row and column sums of a softmax must be within this of 1.
pub const SOFTMAX_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    /// `None` when the artifacts the section reads are missing.
    pub entries: Option<Vec<(String, String)>>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.as_ref()?.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InspectReport {
    pub sections: Vec<Section>,
    pub checks: Vec<Check>,
}

impl InspectReport {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sections {
            let _ = writeln!(out, "[{}]", s.name);
            match &s.entries {
                None => out.push_str("absent\n"),
                Some(e) => {
                    for (k, v) in e {
                        let _ = writeln!(out, "{k} = {v}");
                    }
                }
            }
            out.push('\n');
        }
        out.push_str("[checks]\n");
        for c in &self.checks {
            let _ = writeln!(out, "{} = {} ({})", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
        }
        out
    }
}

fn read_opt(dir: &Path, name: &str) -> Result<Option<String>> {
    let p = dir.join(name);
    if !p.exists() {
        return Ok(None);
    }
    fs::read_to_string(&p).map(Some).map_err(|e| Error::io(p, e))
}

fn tensor_opt(dir: &Path, name: &str) -> Result<Option<Tensor>> {
    let p = dir.join(name);
    if p.exists() {
        load_tensor(p).map(Some)
    } else {
        Ok(None)
    }
}

fn kv(k: impl Into<String>, v: impl ToString) -> (String, String) {
    (k.into(), v.to_string())
}

/// Largest deviation from 1 of softmax sums along rows (`by_rows`) or columns.
fn worst_softmax_sum(t: &Tensor, by_rows: bool) -> Result<f64> {
    let m = t.to_matrix()?;
    let (rows, cols) = m.shape();
    let (outer, inner) = if by_rows { (rows, cols) } else { (cols, rows) };
    let at = |o: usize, i: usize| if by_rows { m.get(o, i) } else { m.get(i, o) };
    let mut worst = 0.0f64;
    for o in 0..outer {
        let max = (0..inner).map(|i| at(o, i)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..inner).map(|i| (at(o, i) - max).exp()).sum();
        let sum: f64 = (0..inner).map(|i| (at(o, i) - max).exp() / z).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    Ok(worst)
}

/// Reads the artifacts in `dir` and builds the report. Missing files mark
/// their sections absent and skip their checks; malformed files are errors.
pub fn inspect(dir: &Path) -> Result<InspectReport> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let mut rep = InspectReport::default();

    let manifest = read_opt(dir, files::MANIFEST)?.map(|t| PipelineConfig::parse(&t, dir)).transpose()?;
    rep.sections.push(Section {
        name: "manifest".into(),
        entries: manifest.as_ref().map(|c| {
            vec![
                kv("mode", c.mode),
                kv("seed", c.seed),
                kv("locals", c.locals.len()),
                kv("score_threshold", c.alignment.score_threshold),
                kv("beta", c.beta),
            ]
        }),
    });

    let provenance = read_opt(dir, files::PROVENANCE)?.map(|t| parse_provenance(&t)).transpose()?;
    rep.sections.push(Section {
        name: "tokens".into(),
        entries: provenance.as_ref().map(|rows| {
            let mut sources: Vec<SourceId> = rows.iter().map(|p| p.source).collect();
            sources.dedup();
            let mut e = vec![kv("total", rows.len())];
            for s in sources {
                let count = |kind| rows.iter().filter(|p| p.source == s && p.kind == kind).count();
                e.push(kv(
                    s.to_string(),
                    format!(
                        "CLS {} REG {} PATCH {}",
                        count(TokenKind::Cls),
                        count(TokenKind::Reg),
                        count(TokenKind::Patch)
                    ),
                ));
            }
            e
        }),
    });
    if let (Some(rows), Some(u)) = (&provenance, tensor_opt(dir, files::UNIFIED)?) {
        let ok = u.dims().first() == Some(&rows.len());
        rep.checks.push(Check {
            name: "provenance_rows".into(),
            passed: ok,
            detail: format!("{} provenance rows, unified dims {:?}", rows.len(), u.dims()),
        });
    }

    let positions = tensor_opt(dir, files::POSITIONS)?;
    let voxel_count = positions.as_ref().map(|p| p.dims()[0]);
    let selections = read_opt(dir, files::SELECTIONS)?.map(|t| parse_selections(&t)).transpose()?;
    rep.sections.push(Section {
        name: "voxels".into(),
        entries: voxel_count.map(|l| {
            let mut e = vec![kv("total", l)];
            if let Some(sel) = &selections {
                e.extend(sel.iter().map(|(name, r)| kv(name.clone(), r.indices.len())));
            }
            e
        }),
    });

    let mut score_files: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|d| d.ok()?.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix(".scores.fus3").map(str::to_string))
        .collect();
    score_files.sort();
    if score_files.is_empty() {
        rep.sections.push(Section { name: "histogram".into(), entries: None });
    }
    for src in &score_files {
        let scores = load_tensor(dir.join(files::scores(src)))?.to_vector()?;
        let h = score_histogram(&scores, HISTOGRAM_BINS);
        let peak = (0..h.len()).max_by_key(|&b| (h[b], std::cmp::Reverse(b))).unwrap_or(0);
        let width = 1.0 / HISTOGRAM_BINS as f64;
        rep.sections.push(Section {
            name: format!("histogram.{src}"),
            entries: Some(vec![
                kv("count", scores.len()),
                kv("bins", join(&h)),
                kv("peak_bin", format!("{peak} [{}, {}]", peak as f64 * width, (peak + 1) as f64 * width)),
            ]),
        });
    }

    let lambdas = read_opt(dir, files::LAMBDAS)?.map(|t| parse_lambdas(&t)).transpose()?;
    rep.sections.push(Section {
        name: "lambda".into(),
        entries: lambdas.as_ref().map(|l| l.iter().map(|(id, v)| kv(id.to_string(), v)).collect()),
    });

    let enhancement = tensor_opt(dir, files::ENHANCEMENT)?;
    rep.sections.push(Section {
        name: "enhancement".into(),
        entries: enhancement.as_ref().map(|e| {
            let scaled = e.data().iter().filter(|&&v| v != 1.0).count();
            let mut distinct: Vec<f32> = e.data().to_vec();
            distinct.sort_by(f32::total_cmp);
            distinct.dedup();
            vec![
                kv("shape", format!("{} x {}", e.dims()[0], e.dims().get(1).copied().unwrap_or(1))),
                kv("scaled_entries", scaled),
                kv("scaled_fraction", scaled as f64 / e.data().len() as f64),
                kv("uniform_one", scaled == 0),
                kv("distinct_values", distinct.iter().map(f32::to_string).collect::<Vec<_>>().join(" ")),
            ]
        }),
    });
    if let (Some(e), Some(l)) = (&enhancement, &lambdas) {
        let bad = e.data().iter().filter(|&&v| v != 1.0 && !l.values().any(|&x| x as f32 == v)).count();
        rep.checks.push(Check {
            name: "enhancement_values".into(),
            passed: bad == 0,
            detail: format!("{bad} entries are neither 1 nor a source strength"),
        });
    }

    for src in &score_files {
        if let Some(t) = tensor_opt(dir, &files::logits(src))? {
            let by_rows = src != "global";
            let worst = worst_softmax_sum(&t, by_rows)?;
            rep.checks.push(Check {
                name: format!("softmax_{}.{src}", if by_rows { "rows" } else { "cols" }),
                passed: worst <= SOFTMAX_SUM_TOLERANCE,
                detail: format!("max |sum - 1| = {worst:.3e}"),
            });
        }
    }

    if let (Some(l), Some(sel)) = (voxel_count, &selections) {
        if let Some(unaligned) = sel.get("unaligned") {
            let mut covered = vec![false; l];
            let mut overlap = 0usize;
            let in_unaligned = {
                let mut m = vec![false; l];
                unaligned.indices.iter().for_each(|&i| m[i] = true);
                m
            };
            let refined: Vec<_> = sel.iter().filter(|(n, _)| n.ends_with(".refined")).collect();
            for (_, r) in &refined {
                for &i in &r.indices {
                    covered[i] = true;
                    overlap += usize::from(in_unaligned[i]);
                }
            }
            unaligned.indices.iter().for_each(|&i| covered[i] = true);
            let missing = covered.iter().filter(|&&c| !c).count();
            let bounds_ok = unaligned.bound == l && refined.iter().all(|(_, r)| r.bound == l);
            rep.checks.push(Check {
                name: "complement_law".into(),
                passed: missing == 0 && overlap == 0 && bounds_ok,
                detail: format!("{} local sets, {missing} uncovered, {overlap} overlapping", refined.len()),
            });
        }
    }

    if let (Some(p), true) = (&positions, dir.join(files::FINAL).exists()) {
        let s = load_slat(dir.join(files::FINAL))?;
        let same = s.positions().iter().flat_map(|q| q.map(|c| c as f32)).eq(p.data().iter().copied());
        rep.checks.push(Check {
            name: "final_positions".into(),
            passed: same,
            detail: format!("{} voxels, {} channels", s.len(), s.channels()),
        });
    }
    Ok(rep)
}
