use std::path::PathBuf;
use std::process::{Command, Output};
use std::sync::OnceLock;

use hyperdet::checkpoint::{checkpoint_files, read_manifest};
use hyperdet::toydata::{write_toy_dataset, ToySpec};
use hyperdet::trainer::train_with_summary;
use hyperdet::{DetectorModel, Image, TrainConfig};

fn hyperdet() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hyperdet"));
    cmd.env_remove("HYPERDET_LOG").arg("--log-level").arg("warn");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
epochs = 2
batch_size = 4
learning_rate = 0.001
workers = 1

[model.backbone]
image_size = 16
depth = 2
width = 16
heads = 2
feature_dim = 8

[model.hyper]
embed_dim = 4
hidden_dim = 8
rank = 2
"#;

struct Fixture {
    dir: tempfile::TempDir,
    data: PathBuf,
    config: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            size: 16,
            train_pairs: 4,
            test_pairs: 3,
            ..ToySpec::default()
        };
        let data = write_toy_dataset(dir.path().join("data"), &spec).unwrap();
        let config = dir.path().join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        let checkpoint = dir.path().join("ckpt");
        let out = run(hyperdet()
            .args(["train", "--config"])
            .arg(&config)
            .arg("--dataset")
            .arg(&data)
            .arg("--out")
            .arg(&checkpoint)
            .args(["--seed", "3"]));
        assert!(out.status.success(), "{}", stderr(&out));
        Fixture {
            dir,
            data,
            config,
            checkpoint,
        }
    })
}

#[test]
fn filters_prints_kernel_and_group() {
    let out = run(hyperdet().args(["filters", "--id", "3"]));
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("kernel 3"));
    assert!(text.contains("[   0    0   -1    0    0 ]"));
    assert!(text.contains("group 1"));
    let out = run(hyperdet().args(["filters", "--id", "31"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_config_file_is_a_validation_error() {
    let out = run(hyperdet().args(["train", "--config", "missing.toml"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("not found"), "{}", stderr(&out));
}

#[test]
fn no_subcommand_prints_usage() {
    let out = run(&mut hyperdet());
    assert_eq!(out.status.code(), Some(1));
    let all = format!("{}{}", stdout(&out), stderr(&out));
    assert!(all.contains("Usage"), "{all}");
}

#[test]
fn unknown_and_out_of_range_keys_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "lerning_rate = 0.1\n").unwrap();
    let out = run(hyperdet().arg("train").arg("--config").arg(&cfg));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("lerning_rate"), "{}", stderr(&out));

    let out = run(hyperdet().arg("train").env("HYPERDET_ALPHA", "1.5"));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("alpha"), "{}", stderr(&out));
}

#[test]
fn empty_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("data/train")).unwrap();
    let out = run(hyperdet()
        .arg("train")
        .arg("--dataset")
        .arg(dir.path().join("data"))
        .arg("--out")
        .arg(dir.path().join("ckpt")));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("ingestion"));
}

#[test]
fn cli_training_matches_the_library_byte_for_byte() {
    let f = fixture();
    let mut cfg: TrainConfig = toml::from_str(TINY).unwrap();
    cfg.seed = 3;
    cfg.dataset_root = Some(f.data.clone());
    cfg.checkpoint_dir = f.dir.path().join("lib");
    train_with_summary(&cfg).unwrap();
    let cli = checkpoint_files(&f.checkpoint).unwrap();
    let lib = checkpoint_files(&cfg.checkpoint_dir).unwrap();
    assert_eq!(cli, lib);
}

#[test]
fn flags_beat_environment_beats_file() {
    let f = fixture();
    let out_dir = f.dir.path().join("layered");
    let out = run(hyperdet()
        .args(["train", "--config"])
        .arg(&f.config)
        .arg("--dataset")
        .arg(&f.data)
        .arg("--out")
        .arg(&out_dir)
        .args(["--epochs", "1"])
        .env("HYPERDET_EPOCHS", "3")
        .env("HYPERDET_SEED", "11")
        .env("HYPERDET_MODEL__HYPER__RANK", "1"));
    assert!(out.status.success(), "{}", stderr(&out));
    let m = read_manifest(&out_dir).unwrap();
    assert_eq!(m.epoch, 1);
    assert_eq!(m.seed, 11);
    assert_eq!(m.model.hyper.rank, 1);
    assert_eq!(m.model.hyper.embed_dim, 4);
    assert_eq!(m.config["epochs"], 1);
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["config"]["seed"], 11);
}

#[test]
fn detect_json_on_stdout_matches_the_library_call() {
    let f = fixture();
    let img = f.data.join("test/checker/fake/0000.png");
    assert!(img.is_file());
    let out = run(hyperdet()
        .args(["detect", "--checkpoint"])
        .arg(&f.checkpoint)
        .arg("--input")
        .arg(&img)
        .args(["--json", "-"]));
    assert!(out.status.success(), "{}", stderr(&out));
    let det = DetectorModel::load(&f.checkpoint).unwrap();
    let verdict = det.detect(&Image::open(&img).unwrap(), f64::NEG_INFINITY).unwrap();
    let expected = format!("{}\n", serde_json::to_string_pretty(&verdict).unwrap());
    assert_eq!(stdout(&out), expected);

    let out = run(hyperdet()
        .args(["detect", "--checkpoint"])
        .arg(&f.checkpoint)
        .arg("--input")
        .arg(&img)
        .args(["--threshold", "inf", "--json", "-"]));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["experts_evaluated"], 1);
    assert_eq!(v["threshold_used"], "inf");
}

#[test]
fn detect_directory_writes_one_record_per_image() {
    let f = fixture();
    let input = f.data.join("test/checker/real");
    let json = f.dir.path().join("detect/out.json");
    let out = run(hyperdet()
        .args(["detect", "--checkpoint"])
        .arg(&f.checkpoint)
        .arg("--input")
        .arg(&input)
        .arg("--json")
        .arg(&json));
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["records"].as_array().unwrap().len(), 3);
    assert_eq!(v["summary"]["scored"], 3);
    assert_eq!(v["config"]["command"], "detect");
    assert!(v["records"][0]["verdict"]["merged_score"].is_number());
}

#[test]
fn eval_report_echoes_its_configuration() {
    let f = fixture();
    let report = f.dir.path().join("eval/report.json");
    let out = run(hyperdet()
        .args(["eval", "--checkpoint"])
        .arg(&f.checkpoint)
        .arg("--dataset")
        .arg(&f.data)
        .args(["--perturb", "jpeg:70", "--out"])
        .arg(&report));
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("checker"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["config"]["command"], "eval");
    assert_eq!(v["config"]["perturb"], "jpeg:70");
    assert_eq!(v["perturbation"]["kind"], "jpeg");
    assert_eq!(v["generators"][0]["n_real"], 3);

    let out = run(hyperdet()
        .args(["eval", "--checkpoint"])
        .arg(&f.checkpoint)
        .arg("--dataset")
        .arg(&f.data)
        .args(["--perturb", "sharpen:2"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_writes_csv_reports_and_plots() {
    let f = fixture();
    let dir = f.dir.path().join("sweep");
    let out = run(hyperdet()
        .args(["sweep", "--checkpoint"])
        .arg(&f.checkpoint)
        .arg("--dataset")
        .arg(&f.data)
        .args(["--grid", "blur=1,2", "jpeg=90", "--out"])
        .arg(&dir));
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["sweep.csv", "reports.json", "blur_acc.png", "blur_map.png", "jpeg_acc.png", "jpeg_map.png"] {
        assert!(dir.join(name).is_file(), "{name}");
    }
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("reports.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 4);
}

#[test]
fn spectrum_writes_map_and_sidecar() {
    let f = fixture();
    let out_png = f.dir.path().join("spec/g2.png");
    let out = run(hyperdet()
        .args(["spectrum", "--input"])
        .arg(f.data.join("train/checker/real"))
        .args(["--group", "2", "--size", "16", "--out"])
        .arg(&out_png));
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out_png.is_file());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_png.with_extension("json")).unwrap()).unwrap();
    assert_eq!(meta["images"], 4);
    assert!(meta["low_band_fraction"].as_f64().unwrap() < 1.0);
}

#[test]
fn export_features_dumps_feature_vectors() {
    let f = fixture();
    let out = run(hyperdet()
        .args(["export-features", "--checkpoint"])
        .arg(&f.checkpoint)
        .arg("--dataset")
        .arg(&f.data)
        .args(["--expert", "5"]));
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let records = v["records"].as_array().unwrap();
    assert_eq!(records.len(), 6);
    assert_eq!(records[0]["features"].as_array().unwrap().len(), 8);
    assert_eq!(v["config"]["expert"], 5);
    let out = run(hyperdet()
        .args(["export-features", "--checkpoint"])
        .arg(&f.checkpoint)
        .arg("--dataset")
        .arg(&f.data)
        .args(["--expert", "7"]));
    assert_eq!(out.status.code(), Some(1));
}

