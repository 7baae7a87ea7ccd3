use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use layercache::fixtures::{gaussian_vectors, mlp_chain};
use layercache::graph::save_model;
use layercache::samples::SampleSet;
use layercache_service::config::PipelineConfig;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layercache"))
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A small MLP backbone, labeled traffic and a config with short training.
fn workspace(dir: &Path) -> PathBuf {
    let graph = mlp_chain(6, 16, 4, 3, 1).unwrap();
    save_model(&graph, &dir.join("backbone/manifest.toml")).unwrap();
    let x = gaussian_vectors(600, 6, 2).unwrap();
    let labels = graph.forward(&x.inputs).unwrap().argmax_rows();
    SampleSet::new(x.ids, x.inputs, Some(labels))
        .unwrap()
        .save(&dir.join("data/traffic.bin"))
        .unwrap();
    let mut cfg = PipelineConfig {
        tolerance: 0.1,
        ..PipelineConfig::default()
    };
    cfg.search.max_epochs = 3;
    cfg.train.max_epochs = 4;
    cfg.evaluation.repetitions = 2;
    let path = dir.join("layercache.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn stages_out_of_order_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    let out = run(dir.path(), &["optimize"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("run `candidates` first"), "{}", stderr(&out));

    assert_eq!(code(&run(dir.path(), &["candidates"])), 0);
    let out = run(dir.path(), &["search"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("`collect`"), "{}", stderr(&out));
}

#[test]
fn corrupt_data_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    fs::write(dir.path().join("data/traffic.bin"), b"not a sample file").unwrap();
    assert_eq!(code(&run(dir.path(), &["candidates"])), 0);
    let out = run(dir.path(), &["collect"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn unknown_config_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--config", "missing.toml", "report"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing.toml"));
}

#[test]
fn full_pipeline_then_backbone_change_is_stale() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    for stage in ["candidates", "collect", "search", "train-caches", "calibrate", "optimize", "evaluate"] {
        let out = run(dir.path(), &[stage]);
        assert_eq!(code(&out), 0, "{stage}: {}", stderr(&out));
    }
    let art = dir.path().join("artifacts");
    for f in ["candidates.json", "optimize/subsets.json", "evaluation/report.txt", "maintenance.json"] {
        assert!(art.join(f).exists(), "{f} missing");
    }
    let caches = fs::read_dir(art.join("caches")).unwrap().count();
    assert!(caches > 0, "no cache was trained");
    let report = run(dir.path(), &["report"]);
    assert_eq!(code(&report), 0);
    let text = String::from_utf8_lossy(&report.stdout);
    assert!(text.contains("\"trigger\": \"none\""), "{text}");

    // new weights under the same node names
    save_model(&mlp_chain(6, 16, 4, 3, 99).unwrap(), &dir.path().join("backbone/manifest.toml")).unwrap();
    let out = run(dir.path(), &["search"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("rerun"), "{}", stderr(&out));
    let report = run(dir.path(), &["report"]);
    assert!(String::from_utf8_lossy(&report.stdout).contains("backbone-changed"));
}
