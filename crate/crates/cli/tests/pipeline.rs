use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mas_cli::pipeline::{self, Layout};
use mas_cli::{CliError, FusionMethod, PipelineConfig};
use mas_core::io::{read_labels, write_labels};
use mas_core::phantom::{CohortConfig, Ellipsoid, PhantomConfig};
use mas_core::registration::RegistrationConfig;
use mas_core::volume::LabelMap;

fn small(out: &Path, atlases: usize, targets: usize) -> PipelineConfig {
    let base = PhantomConfig::default();
    let base = PhantomConfig {
        dims: [24; 3],
        shapes: base.shapes.iter().map(|s| Ellipsoid { label: s.label, center: [11.5; 3], radii: s.radii.map(|r| r / 2.0) }).collect(),
        ..base
    };
    PipelineConfig {
        registration: RegistrationConfig { iterations: 15, gradient_smoothing: 1.5, ..Default::default() },
        out_dir: out.to_path_buf(),
        cohort: CohortConfig { base, atlases, targets, center_jitter: 1.0, seed: 5, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn single_atlas_majority_vote_is_the_warped_label() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pipeline::cmd_phantom(&small(dir.path(), 1, 1)).unwrap();
    pipeline::cmd_register(&cfg).unwrap();
    pipeline::cmd_fuse(&cfg).unwrap();
    let layout = Layout::new(&cfg.out_dir);
    let fused = read_labels(&layout.fused(FusionMethod::Mv, 0)).unwrap();
    let warped = read_labels(&layout.warped_label(0, 0)).unwrap();
    assert_eq!(fused.labels, warped.labels);
}

#[test]
fn default_cohort_is_fast_and_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = |out: &Path| PipelineConfig { out_dir: out.to_path_buf(), seed: 7, cohort: CohortConfig { seed: 7, ..Default::default() }, ..Default::default() };
    let start = Instant::now();
    let written = pipeline::cmd_phantom(&cfg(a.path())).unwrap();
    assert!(start.elapsed().as_secs_f64() < 10.0, "took {:?}", start.elapsed());
    assert_eq!((written.atlases.len(), written.targets.len()), (10, 5));
    pipeline::cmd_phantom(&cfg(b.path())).unwrap();
    for p in written.atlases.iter().chain(&written.targets) {
        for f in [&p.image, &p.label] {
            let rel = f.strip_prefix(a.path()).unwrap();
            assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{}", rel.display());
        }
    }
    assert_eq!(
        std::fs::read(a.path().join("manifest_phantom.json")).unwrap(),
        std::fs::read(b.path().join("manifest_phantom.json")).unwrap()
    );
}

#[test]
fn failed_jobs_keep_the_other_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pipeline::cmd_phantom(&small(dir.path(), 2, 1)).unwrap();
    // an atlas with no foreground cannot be center-aligned
    let empty = read_labels(&cfg.atlases[1].label).unwrap();
    let empty = LabelMap::with_label_set(empty.grid, vec![0; empty.labels.len()], empty.label_set.clone()).unwrap();
    write_labels(&cfg.atlases[1].label, &empty).unwrap();

    match pipeline::cmd_register(&cfg) {
        Err(CliError::JobsFailed(jobs)) => assert_eq!(jobs.len(), 1, "{jobs:?}"),
        other => panic!("expected a job failure, got {other:?}"),
    }
    let layout = Layout::new(&cfg.out_dir);
    assert!(layout.warped_label(0, 0).exists());
    assert!(!layout.warped_label(0, 1).exists());
    let summary = std::fs::read_to_string(dir.path().join("registration/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(dir.path().join("manifest_register.json").exists());
}

#[test]
fn missing_stages_and_bad_settings_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pipeline::cmd_phantom(&small(dir.path(), 2, 1)).unwrap();
    assert!(matches!(pipeline::cmd_fuse(&cfg), Err(CliError::MissingInput(_))));
    let too_many = PipelineConfig { sweep: vec![3], ..cfg.clone() };
    assert!(matches!(pipeline::cmd_sweep(&too_many), Err(CliError::Config(_))));
    assert!(matches!(pipeline::cmd_train_similarity(&cfg), Err(CliError::Config(_))));
}

fn mas(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mas")).args(args).output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = mas(&["--config", &format!("{out}/nope.json"), "register"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));
    assert!(!mas(&["--fusion", "staple", "fuse"]).status.success());

    std::fs::write(dir.path().join("c.json"), serde_json::to_string(&small(Path::new("."), 1, 1)).unwrap()).unwrap();
    assert!(mas(&["--config", &format!("{out}/c.json"), "phantom"]).status.success());
    let cfg = format!("{out}/pipeline.json");
    assert!(!mas(&["--config", &cfg, "fuse"]).status.success());
    assert!(mas(&["--config", &cfg, "register"]).status.success());
    let label = format!("{out}/targets/target_00_label.mvol");
    let eval = mas(&["eval", "--pred", &label, "--gold", &label, "--case", "self"]);
    assert!(eval.status.success());
    let csv = String::from_utf8(eval.stdout).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("self,") && l.split(',').nth(2) == Some("100.000000")), "{csv}");
}
