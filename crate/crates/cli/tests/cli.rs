use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn seqdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqdg"))
        .args(args)
        .env_remove("SEQDG_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
[synth]
n_source_domains = 2
n_target_domains = 1
n_verbs = 10
n_nouns = 10
n_ambiguous_pairs = 2
videos_per_domain = 2
actions_per_video = 10
clips_per_action = 3
d_visual = 6
d_text = 8
seed = 1

[model]
window = 3
d_model = 8
d_ff = 16
n_heads = 2
clips_sampled = 2

[train]
batch_size = 8
lr = 0.05
epochs = 3
lr_decay_epochs = []
"#;

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
    manifest: PathBuf,
}

impl Fixture {
    fn new(extra: &str) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        std::fs::write(&config, format!("{TINY}{extra}")).unwrap();
        let data = dir.path().join("data");
        let o = seqdg(&["synth-gen", "-q", "--config", s(&config), "--out", s(&data)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Fixture {
            manifest: data.join("manifest.json"),
            dir,
            config,
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, name: &str, extra: &[&str]) -> Output {
        let out = self.out(name);
        let mut args = vec!["train", "-q", "--config", s(&self.config), "--data", s(&self.manifest), "--out", s(&out)];
        args.extend_from_slice(extra);
        seqdg(&args)
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn metrics(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_gen_writes_dataset_and_oracles() {
    let f = Fixture::new("");
    let data = f.manifest.parent().unwrap();
    for name in ["manifest.json", "features.f32", "truth.json", "config.toml", "run.json", "oracle.json", "log.txt"] {
        assert!(data.join(name).exists(), "{name}");
    }
    let oracle: serde_json::Value = serde_json::from_slice(&read(data.join("oracle.json"))).unwrap();
    assert_eq!(oracle["context_oracle_accuracy"], 1.0);
}

#[test]
fn train_writes_a_complete_run_directory() {
    let f = Fixture::new("");
    let o = f.train("t", &["--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = f.out("t");
    for name in ["config.toml", "run.json", "metrics.jsonl", "checkpoint.ckpt", "results.json", "log.txt"] {
        assert!(run.join(name).exists(), "{name}");
    }
    let echo = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echo.contains("seed = 7"));
    let info: serde_json::Value = serde_json::from_slice(&read(run.join("run.json"))).unwrap();
    assert_eq!(info["seed"], 7);
    assert_eq!(info["data"].as_array().unwrap().len(), 2);
    assert_eq!(info["data"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(metrics(&run).len(), 3);

    // The echoed config alone reproduces the run.
    let again = f.out("t2");
    let o = seqdg(&["train", "-q", "--config", s(&run.join("config.toml")), "--out", s(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read(run.join("checkpoint.ckpt")), read(again.join("checkpoint.ckpt")));
    assert_eq!(read(run.join("metrics.jsonl")), read(again.join("metrics.jsonl")));
}

#[test]
fn overrides_reach_the_resolved_config() {
    let f = Fixture::new("");
    let o = f.train("t", &["--W", "5", "--lambda-rv", "0.5", "--lambda-rt", "0", "--p-mix", "0.25", "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo: toml::Table = toml::from_str(&std::fs::read_to_string(f.out("t").join("config.toml")).unwrap()).unwrap();
    assert_eq!(echo["model"]["window"].as_integer(), Some(5));
    assert_eq!(echo["train"]["lambda_rv"].as_float(), Some(0.5));
    assert_eq!(echo["train"]["lambda_rt"].as_float(), Some(0.0));
    assert_eq!(echo["train"]["p_mix"].as_float(), Some(0.25));
    assert_eq!(echo["train"]["epochs"].as_integer(), Some(1));
}

#[test]
fn step_schedule_is_logged() {
    let f = Fixture::new("");
    // The fixture disables decay; restore the default schedule.
    let cfg = std::fs::read_to_string(&f.config).unwrap().replace("lr_decay_epochs = []", "lr = 0.005");
    let cfg = cfg.replace("lr = 0.05\n", "");
    std::fs::write(&f.config, cfg).unwrap();
    let o = f.train("s", &["--epochs", "76", "--lambda-rv", "0", "--lambda-rt", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = metrics(&f.out("s"));
    let lr = |e: usize| m[e]["lr"].as_f64().unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15 * b;
    assert!(close(lr(0), 0.005) && close(lr(49), 0.005));
    assert!(close(lr(50), 0.0005) && close(lr(74), 0.0005));
    assert!(close(lr(75), 0.00005));
}

#[test]
fn eval_is_repeatable_and_read_only() {
    let f = Fixture::new("");
    assert_eq!(code(&f.train("t", &[])), 0);
    let ckpt = f.out("t").join("checkpoint.ckpt");
    let before = (read(&ckpt), read(&f.manifest), read(f.manifest.with_file_name("features.f32")));
    for name in ["e1", "e2"] {
        let o = seqdg(&["eval", "-q", "--checkpoint", s(&ckpt), "--out", s(&f.out(name))]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for file in ["results.json", "predictions.jsonl"] {
        assert_eq!(read(f.out("e1").join(file)), read(f.out("e2").join(file)), "{file}");
    }
    let after = (read(&ckpt), read(&f.manifest), read(f.manifest.with_file_name("features.f32")));
    assert!(before == after);

    let o = seqdg(&["eval", "-q", "--checkpoint", s(&ckpt), "--W", "5", "--out", s(&f.out("e3"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_errors_list_every_violation() {
    let f = Fixture::new("");
    std::fs::write(&f.config, TINY.replace("window = 3", "window = 4").replace("lr = 0.05", "lr = -1.0")).unwrap();
    let o = f.train("bad", &[]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("model.window") && err.contains("train.lr"), "{err}");

    std::fs::write(&f.config, format!("{TINY}[train2]\nx = 1\n")).unwrap();
    assert_eq!(code(&f.train("bad2", &[])), 2);
}

#[test]
fn exit_codes_follow_error_category() {
    let f = Fixture::new("");
    let missing = f.out("nothing.json");
    let o = seqdg(&["train", "-q", "--config", s(&f.config), "--data", s(&missing), "--out", s(&f.out("x"))]);
    assert_eq!(code(&o), 3);
    let o = seqdg(&["train", "-q", "--out", s(&f.out("y"))]);
    assert_eq!(code(&o), 2, "no dataset given");
    std::fs::write(&f.config, TINY.replace("lr = 0.05", "lr = 1e150")).unwrap();
    let o = f.train("div2", &[]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn ablate_collapses_disabled_components_to_the_baseline() {
    let f = Fixture::new("\n[ablate]\nsequence = [false]\nseqmix = [false]\nlambda_rv = [0.0, 1.0]\nlambda_rt = [1.0]\nwindows = [3, 5]\nseeds = [0, 1]\n");
    let out = f.out("ab");
    let o = seqdg(&["ablate", "-q", "--config", s(&f.config), "--data", s(&f.manifest), "--out", s(&out), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: Vec<serde_json::Value> = serde_json::from_slice(&read(out.join("summary.json"))).unwrap();
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0]["label"], "w1-rv0-rt0");
    assert!(out.join("w1-rv0-rt0/seed1/metrics.jsonl").exists());

    // The same baseline trained directly gives the same target numbers.
    let o = f.train("base", &["--W", "1", "--lambda-rv", "0", "--lambda-rt", "0", "--p-mix", "0", "--epochs", "1", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let direct: serde_json::Value = serde_json::from_slice(&read(f.out("base").join("results.json"))).unwrap();
    let grid: serde_json::Value = serde_json::from_slice(&read(out.join("w1-rv0-rt0/seed1/results.json"))).unwrap();
    assert_eq!(direct["target"], grid);
}

#[test]
fn seq_stats_reads_csv_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ann.csv");
    std::fs::write(
        &csv,
        "video_id,domain_id,temporal_index,verb_class,noun_class,narration\n\
         a,P01,0,1,5,take cup\na,P01,1,2,5,wash cup\nb,P02,0,1,5,take cup\nb,P02,1,2,5,wash cup\n",
    )
    .unwrap();
    let out = dir.path().join("st");
    let o = seqdg(&["seq-stats", "-q", "--annotations", s(&csv), "--max-length", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let counts: Vec<serde_json::Value> = serde_json::from_slice(&read(out.join("counts.json"))).unwrap();
    assert_eq!(counts.len(), 3);
    assert_eq!(counts[2]["rows"][0]["occurrences"], 2);
    assert!(std::fs::read_to_string(out.join("table.txt")).unwrap().contains("action distinct"));

    let f = Fixture::new("");
    let o = seqdg(&["seq-stats", "-q", "--data", s(&f.manifest), "--out", s(&f.out("st"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn import_builds_a_trainable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ann.csv");
    let mut text = String::from("video_id,domain_id,temporal_index,verb_class,noun_class,narration\n");
    for (d, dom) in ["P01", "P02", "P03"].iter().enumerate() {
        for t in 0..4 {
            text.push_str(&format!("v{d},{dom},{t},{},{},open drawer\n", t % 2, t % 3));
        }
    }
    std::fs::write(&csv, text).unwrap();
    let blob: Vec<u8> = (0..12 * 2 * 4).flat_map(|i| (i as f32 * 0.01).to_le_bytes()).collect();
    let blob_path = dir.path().join("feat.f32");
    std::fs::write(&blob_path, blob).unwrap();
    let cfg = dir.path().join("imp.toml");
    std::fs::write(&cfg, "[import]\ndataset = \"toy\"\nd_visual = 4\nd_text = 8\nclips_per_action = 2\n").unwrap();
    let out = dir.path().join("imported");
    let o = seqdg(&[
        "import", "-q", "--config", s(&cfg), "--annotations", s(&csv), "--blob", s(&blob_path),
        "--target-domain", "P03", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_slice(&read(out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["actions"].as_array().unwrap().len(), 12);
    assert_eq!(manifest["vocab"], serde_json::json!(["drawer", "open"]));

    // Wrong blob size is a data error.
    std::fs::write(&blob_path, [0u8; 12]).unwrap();
    let o = seqdg(&["import", "-q", "--config", s(&cfg), "--annotations", s(&csv), "--blob", s(&blob_path), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn grad_check_passes_at_default_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let o = seqdg(&["grad-check", "-q", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&read(out.join("report.json"))).unwrap();
    assert!(report["max_rel_err"].as_f64().unwrap() < 1e-3);
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_seqdg"))
        .args(["grad-check", "-q"])
        .env("SEQDG_OUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(root.join("grad-check-001/report.json").exists());
}
