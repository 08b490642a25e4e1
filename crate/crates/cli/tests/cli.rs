use std::path::Path;
use std::process::{Command, Output};

fn rqwav(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rqwav"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RQWAV_CONFIG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn hash_line(o: &Output) -> String {
    stdout(o)
        .lines()
        .find(|l| l.starts_with("config-hash: "))
        .expect("hash printed")
        .to_string()
}

#[test]
fn count_params_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = rqwav(&["count-params"], dir.path());
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("95963072"), "{s}");
    assert!(s.contains("139264"));
    assert!(s.contains("DISCREPANCY"));
    let again = rqwav(&["count-params"], dir.path());
    assert_eq!(hash_line(&o), hash_line(&again));
}

#[test]
fn pretrain_requires_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = rqwav(&["pretrain"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--config"));
}

#[test]
fn unknown_subcommand_and_bad_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = rqwav(&["frobnicate"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("usage"));

    let o = rqwav(&["count-params", "--set", "encoder.layerz=3"], dir.path());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: config: encoder.layerz"), "{err}");
}

#[test]
fn end_to_end_on_synthetic_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("tiny.toml"),
        r#"
[data]
target_len = 8000
synthetic_count = 8
synthetic_seconds = [0.4, 0.6]

[featurizer.conv]
channels = [8, 8, 8, 8, 8, 8, 8]

[quantizer]
vocab = 16

[masking]
mask_prob = 0.05
mask_time = 0.1
stride_time = 0.02

[encoder]
layers = 1
hidden = 16
heads = 2
ffn_dim = 32
input_dim = 8
vocab = 16
rel_pos_buckets = 8
max_rel_distance = 32
dropout = 0.0

[train]
batch_size = 4
warmup_steps = 2
total_steps = 4
peak_lr = 0.001
checkpoint_every = 2
log_every = 2

[probe]
per_class = 4
steps = 20
seconds = [0.3, 0.4]
"#,
    )
    .unwrap();

    let o = rqwav(&["prepare-data", "--config", "tiny.toml", "--out", "data"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("data/manifest.txt").exists());

    let o = rqwav(&["pretrain", "--config", "tiny.toml", "--out", "run"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let h = hash_line(&o);
    assert!(d.join("run/ckpt-00000002.bin").exists());
    assert!(d.join("run/ckpt-00000004.bin").exists());
    let log = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for key in ["step", "loss", "masked_acc", "lr", "wall_time", "codebook_utilization"] {
        assert!(log.contains(&format!("\"{key}\"")), "{key}");
    }

    let o = rqwav(&["probe", "--checkpoint", "run/ckpt-00000004.bin", "--task", "tones"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(hash_line(&o), h);
    assert!(stdout(&o).contains("frozen true"));
    let log = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert!(log.lines().last().unwrap().contains("\"probe\""));

    let o = rqwav(&["probe", "--checkpoint", "run/ckpt-00000004.bin", "--task", "speech"], d);
    assert!(!o.status.success());

    let o = rqwav(
        &[
            "diagnose",
            "--checkpoint",
            "run/ckpt-00000004.bin",
            "--corpus",
            "data/manifest.txt",
            "--out",
            "diag.txt",
            "--trials",
            "1",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(d.join("diag.txt")).unwrap();
    assert!(report.contains("logmel") && report.contains("[config]"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("diag.json")).unwrap()).unwrap();
    assert_eq!(json["comparisons"].as_array().unwrap().len(), 3);
}

#[test]
fn bundled_desk_config_matches_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = rqwav_core::load_config(Some(&path), &[]).unwrap();
    assert_eq!(cfg, rqwav_core::RunConfig::desk());
}
