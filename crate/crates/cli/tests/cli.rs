use std::path::Path;
use std::process::{Command, Output};

fn dsside(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsside"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

const CONFIG: &str = r#"
[network]
width_multiplier = 0.125

[train]
steps = 2
batch_size = 2
validate_every = 1

[router]
method = "forced_low"

[paths]
train_manifest = "data/manifest.tsv"
val_manifest = "data/manifest.tsv"
eval_manifest = "data/manifest.tsv"
output_dir = "out"
low_checkpoint = "out/low_last.ckpt"
high_checkpoint = "out/high_last.ckpt"

[synthetic]
output_dir = "data"
low_count = 2
high_count = 2
width = 32
height = 32
"#;

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();

    let o = dsside(d, &["gen-synthetic", "--config", "run.toml"]);
    assert!(o.status.success(), "{o:?}");
    assert!(d.join("data/manifest.tsv").exists());

    for target in ["low", "high"] {
        let o = dsside(d, &["train", "--config", "run.toml", "--target", target]);
        assert!(o.status.success(), "{o:?}");
    }
    assert!(d.join("out/low_best.ckpt").exists());

    let o = dsside(d, &["eval", "--config", "run.toml", "--json", "report.json"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("REL"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["images"].as_array().unwrap().len(), 4);

    let o = dsside(
        d,
        &["infer", "--config", "run.toml", "--input", "data/high_0002_rgb.png", "--output-dir", "pred", "--router", "forced_high"],
    );
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("high"));
    assert!(d.join("pred/high_0002_rgb_depth.png").exists());
    let viz = std::fs::read(d.join("pred/high_0002_rgb_viz.png")).unwrap();
    assert!(viz.starts_with(b"\x89PNG"));

    let o = dsside(d, &["route", "--config", "run.toml", "--input", "data/low_0000_rgb.png"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("\tlow\t"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();

    std::fs::write(d.join("bad.toml"), "[network]\nwidth_multiplier = 3.0\n").unwrap();
    assert_eq!(dsside(d, &["eval", "--config", "bad.toml"]).status.code(), Some(2));
    assert_eq!(dsside(d, &["eval", "--config", "missing.toml"]).status.code(), Some(2));
    assert_eq!(
        dsside(d, &["train", "--config", "run.toml", "--sigma", "-1"]).status.code(),
        Some(2)
    );
    assert_eq!(
        dsside(d, &["train", "--config", "run.toml", "--router", "psychic"]).status.code(),
        Some(2)
    );
    // manifest not generated yet
    assert_eq!(dsside(d, &["train", "--config", "run.toml"]).status.code(), Some(3));
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let cfg = dsside::pipeline::PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.router.sigma, 5.89);
    assert_eq!(cfg.schemes.coarse.beta(), 90.0);
}
