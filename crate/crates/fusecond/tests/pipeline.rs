mod common;

use std::collections::BTreeMap;

use common::{artifact_bytes, small_scene, write_scene};
use fusecond::pipeline::build_flow_model;
use fusecond::scene::Region;
use fusecond::{inspect, run_alignment, run_pipeline, Error, Mode, PipelineConfig};
use fusecond_core::fusion::SourceId;

fn bits(m: &fusecond_core::Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn unit_strengths_match_an_unenhanced_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut scene = small_scene(3);
    scene.regions = vec![Region::Full];
    let mut cfg = PipelineConfig::load(write_scene(&scene, dir.path())).unwrap();
    cfg.lambda_overrides = BTreeMap::from([(SourceId::Local(0), 1.0), (SourceId::Global, 1.0)]);
    let art = run_pipeline(&cfg).unwrap();
    let e = art.enhancement.as_ref().unwrap();
    assert!(e.is_identity());

    let flow = build_flow_model(&cfg).unwrap();
    let unified = art.unified.as_ref().unwrap();
    let sampler = cfg.sampler_config(cfg.stage_seed(fusecond::config::Stage::GenerateNoise));
    let plain = flow.sample(&art.positions, &unified.matrix, &sampler, None).unwrap();
    assert_eq!(bits(plain.latents()), bits(art.final_slat.as_ref().unwrap().latents()));

    art.write_to(&dir.path().join("out")).unwrap();
    let report = inspect(&dir.path().join("out")).unwrap();
    assert_eq!(report.section("enhancement").unwrap().get("uniform_one"), Some("true"));
}

#[test]
fn inpainting_with_nothing_aligned_returns_the_initial_latents() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(4).with("run.mode", "inpaint").with("alignment.threshold", 1.0);
    let cfg = PipelineConfig::load(write_scene(&scene, dir.path())).unwrap();
    let art = run_pipeline(&cfg).unwrap();
    assert_eq!(art.unaligned.len(), art.positions.len());
    assert_eq!(art.warnings.iter().filter(|w| w.contains("no voxels aligned")).count(), 2);
    let (initial, out) = (art.initial.as_ref().unwrap(), art.final_slat.as_ref().unwrap());
    assert_eq!(bits(initial.latents()), bits(out.latents()));
    assert!(art.global.is_none() && art.enhancement.is_none());
}

#[test]
fn inpainting_keeps_unaligned_rows_and_regenerates_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        PipelineConfig::load(write_scene(&small_scene(5).with("run.mode", "inpaint"), dir.path())).unwrap();
    let art = run_pipeline(&cfg).unwrap();
    let (initial, out) =
        (art.initial.as_ref().unwrap().latents(), art.final_slat.as_ref().unwrap().latents());
    assert!(art.unaligned.len() < art.positions.len());
    for i in 0..art.positions.len() {
        let same = bits(&initial.select_rows(&[i])) == bits(&out.select_rows(&[i]));
        assert_eq!(same, art.unaligned.contains(i), "row {i}");
    }
}

#[test]
fn repeated_runs_and_thread_counts_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::load(write_scene(&small_scene(6), dir.path())).unwrap();
    let mut outputs = Vec::new();
    for (i, threads) in [1, 1, 3].into_iter().enumerate() {
        cfg.threads = threads;
        let out = dir.path().join(format!("run{i}"));
        run_pipeline(&cfg).unwrap().write_to(&out).unwrap();
        outputs.push(artifact_bytes(&out));
    }
    assert!(outputs[0].len() >= 14);
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn manifest_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::load(write_scene(&small_scene(7).with("run.seed", 42), dir.path())).unwrap();
    let first = dir.path().join("first");
    run_pipeline(&cfg).unwrap().write_to(&first).unwrap();
    let again = PipelineConfig::load(first.join("manifest.txt")).unwrap();
    assert_eq!(again, cfg);
    let second = dir.path().join("second");
    run_pipeline(&again).unwrap().write_to(&second).unwrap();
    assert_eq!(artifact_bytes(&first), artifact_bytes(&second));
}

#[test]
fn stage_seeds_do_not_leak_between_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::load(write_scene(&small_scene(8), dir.path())).unwrap();
    let a = run_alignment(&cfg).unwrap();
    let b = run_pipeline(&cfg).unwrap();
    assert_eq!(a.positions, b.positions);
    for (x, y) in a.locals.iter().zip(&b.locals) {
        assert_eq!(x.scores, y.scores);
        assert_eq!(x.refined, y.refined);
    }
    assert!(a.final_slat.is_none() && a.unified.is_none());
}

#[test]
fn cropped_ablation_changes_the_local_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::load(write_scene(&small_scene(9), dir.path())).unwrap();
    let full = run_pipeline(&cfg).unwrap();
    cfg.mode = Mode::NoMcfmAblation;
    let crop = run_pipeline(&cfg).unwrap();
    assert_eq!(full.positions, crop.positions);
    let rows =
        |a: &fusecond::RunArtifacts| a.unified.as_ref().unwrap().columns_of(SourceId::Local(0)).unwrap();
    let (fu, cu) = (full.unified.as_ref().unwrap(), crop.unified.as_ref().unwrap());
    let (fr, cr) = (rows(&full), rows(&crop));
    assert!(!fr.is_empty() && !cr.is_empty());
    assert_ne!(bits(&fu.matrix.select_rows(&fr[..1])), bits(&cu.matrix.select_rows(&cr[..1])));
    // The crop is re-tiled on its own grid; its selection counts patches of that grid.
    assert_eq!(crop.locals[0].patch_count, crop.locals[0].token_count - 1 - cfg.encoder.register_count);
}

#[test]
fn full_cover_mask_scores_land_in_the_top_bin() {
    let dir = tempfile::tempdir().unwrap();
    let mut scene = small_scene(10).with("encoder.registers", 0);
    scene.regions = vec![Region::Full];
    let cfg = PipelineConfig::load(write_scene(&scene, dir.path())).unwrap();
    let out = dir.path().join("out");
    run_alignment(&cfg).unwrap().write_to(&out).unwrap();
    let report = inspect(&out).unwrap();
    let hist = report.section("histogram.local0").unwrap();
    assert!(hist.get("peak_bin").unwrap().starts_with("15 [0.9375, 1]"), "{:?}", hist);
    let bins: Vec<usize> = hist.get("bins").unwrap().split(' ').map(|b| b.parse().unwrap()).collect();
    assert!(2 * bins[15] > bins.iter().sum::<usize>(), "{bins:?}");
    assert!(report.all_passed(), "{}", report.to_text());
}

#[test]
fn inspect_marks_missing_artifacts_absent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::load(write_scene(&small_scene(11), dir.path())).unwrap();
    let out = dir.path().join("out");
    run_alignment(&cfg).unwrap().write_to(&out).unwrap();
    let report = inspect(&out).unwrap();
    assert_eq!(report.section("enhancement").unwrap().entries, None);
    assert_eq!(report.section("lambda").unwrap().entries, None);
    assert!(report.check("complement_law").unwrap().passed);
    assert!(report.to_text().contains("[enhancement]\nabsent\n"));

    std::fs::remove_file(out.join("selections.txt")).unwrap();
    assert!(inspect(&out).unwrap().check("complement_law").is_none());
}

#[test]
fn errors_carry_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scene(&small_scene(12), dir.path());
    std::fs::write(dir.path().join("local1.mask"), "MASK 2 2\n0 1\n1 1\n").unwrap();
    let cfg = PipelineConfig::load(&path).unwrap();
    match run_pipeline(&cfg) {
        Err(e @ Error::Stage { stage: "encode-local", .. }) => assert_eq!(e.exit_code(), 2),
        other => panic!("expected an encode-local failure, got {other:?}"),
    }
    std::fs::remove_file(dir.path().join("global.fus3")).unwrap();
    assert!(matches!(run_pipeline(&cfg), Err(Error::Stage { stage: "config", .. })));
}

#[test]
fn non_finite_pixels_are_numeric_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scene(&small_scene(13), dir.path());
    let mut data = vec![0.5f32; 112 * 112 * 3];
    data[7] = f32::NAN;
    let t = fusecond::tensor::Tensor::new(vec![112, 112, 3], data).unwrap();
    fusecond::tensor::save_tensor(dir.path().join("global.fus3"), &t).unwrap();
    let err = run_pipeline(&PipelineConfig::load(&path).unwrap()).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}
