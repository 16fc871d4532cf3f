use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fedgame() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedgame"));
    cmd.env_remove("FEDGAME_OUTPUT_DIR");
    cmd
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn fedgame");
    if !out.status.success() {
        eprintln!("stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    }
    out
}

const TINY: &str = r#"
seed = 3

[protocol]
rounds = 2

[forecaster]
history_len = 8
horizon = 2
hidden_sizes = [4]

[aggregator]
embed_dim = 4

[data]
source = "synth"
clients = 3
clusters = 1
length = 120
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_writes_parseable_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out_dir = tmp.path().join("out");
    let out = run(fedgame().arg("run").arg(&cfg).arg("--output").arg(&out_dir));
    assert!(out.status.success());

    let rounds = fs::read_to_string(out_dir.join("rounds.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = rounds.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["round"], 1);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("eval.json")).unwrap()).unwrap();
    assert!(eval["macro_avg"]["qs"].as_f64().unwrap() > 0.0);
    for file in ["eval.csv", "attention.csv"] {
        let mut r = csv::Reader::from_path(out_dir.join(file)).unwrap();
        assert!(r.records().all(|rec| rec.is_ok()), "{file}");
    }
    let header = fs::read_to_string(out_dir.join("attention.csv")).unwrap();
    assert!(header.starts_with("round,i,j,w_ij"));
}

#[test]
fn invalid_top_k_exits_2_naming_both_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{TINY}\n").replace("embed_dim = 4", "embed_dim = 4\nnum_experts = 4\ntop_k = 5"));
    let out = fedgame().arg("run").arg(&cfg).arg("-o").arg(tmp.path().join("out")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("aggregator.top_k") && err.contains("aggregator.num_experts"), "{err}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn every_validation_problem_is_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY.replace("rounds = 2", "rounds = 2\neta = -1.0").replace("embed_dim = 4", "embed_dim = 0");
    let out = fedgame().arg("run").arg(write_config(tmp.path(), &text)).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("protocol.eta") && err.contains("aggregator.embed_dim"), "{err}");
}

#[test]
fn unknown_keys_and_missing_files_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fedgame().arg("run").arg(write_config(tmp.path(), "seed = 1\ncolour = 2\n")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    let out = fedgame().args(["run", "/nonexistent/fedgame.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_csv_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY.replace("source = \"synth\"\nclients = 3\nclusters = 1\nlength = 120", "source = \"csv\"\npath = \"/nonexistent/data.csv\"");
    let out = fedgame().arg("run").arg(write_config(tmp.path(), &text)).arg("-o").arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_flag_overrides_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    for (dir, seed) in dirs.iter().zip(["11", "11", "12"]) {
        assert!(run(fedgame().arg("run").arg(&cfg).args(["--seed", seed, "-o"]).arg(dir)).status.success());
    }
    for file in ["rounds.jsonl", "eval.json", "eval.csv", "attention.csv"] {
        let a = fs::read(dirs[0].join(file)).unwrap();
        assert_eq!(a, fs::read(dirs[1].join(file)).unwrap(), "{file}");
        if file == "eval.json" {
            assert_ne!(a, fs::read(dirs[2].join(file)).unwrap());
        }
    }
    let effective = fs::read_to_string(dirs[0].join("config.toml")).unwrap();
    assert!(effective.contains("seed = 11"));
}

#[test]
fn effective_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    assert!(run(fedgame().arg("run").arg(write_config(tmp.path(), TINY)).arg("-o").arg(&first)).status.success());
    let second = tmp.path().join("second");
    assert!(run(fedgame().arg("run").arg(first.join("config.toml")).arg("-o").arg(&second)).status.success());
    for file in ["rounds.jsonl", "eval.json", "eval.csv", "attention.csv"] {
        assert_eq!(fs::read(first.join(file)).unwrap(), fs::read(second.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn output_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let env_dir = tmp.path().join("from-env");
    let out = run(fedgame().arg("run").arg(&cfg).env("FEDGAME_OUTPUT_DIR", &env_dir));
    assert!(out.status.success());
    assert!(env_dir.join("eval.json").exists());

    let flag_dir = tmp.path().join("from-flag");
    assert!(run(fedgame().arg("run").arg(&cfg).arg("-o").arg(&flag_dir).env("FEDGAME_OUTPUT_DIR", &env_dir)).status.success());
    assert!(flag_dir.join("eval.json").exists());
}

fn comm_json(args: &[&str]) -> serde_json::Value {
    let out = run(fedgame().arg("comm").args(args).arg("--json"));
    assert!(out.status.success());
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn comm_reports_reference_sizes() {
    let six = comm_json(&["--preset", "lstm-h6", "--clients", "8"]);
    assert_eq!(six["head_params"], 2322);
    assert_eq!(six["total_params"], 996_013);
    assert_eq!(six["downstream_bytes"], (8 * 996_013 + 8 * 2322) * 8);
    assert_eq!(six["ratio"].as_f64().unwrap(), 1.0 + 2322.0 / (2.0 * 996_013.0));

    let twelve = comm_json(&["--preset", "lstm-h12"]);
    assert_eq!(twelve["head_params"], 4644);
    assert_eq!(twelve["total_params"], 994_852);

    let fedavg = comm_json(&["--preset", "lstm-h6", "--method", "fedavg"]);
    assert_eq!(fedavg["ratio"].as_f64().unwrap(), 1.0);

    let text = String::from_utf8(run(fedgame().args(["comm", "--preset", "lstm-h6"])).stdout).unwrap();
    assert!(text.contains("+0.1166%"), "{text}");
}

#[test]
fn comm_from_config_uses_its_model_and_clients() {
    let v = comm_json(&[configs().join("synth-2cluster.toml").to_str().unwrap()]);
    assert_eq!(v["clients"], 8);
    // MLP 24 → 32 → 18: 24·32 + 32 + 32·18 + 18
    assert_eq!(v["total_params"], 24 * 32 + 32 + 32 * 18 + 18);
    assert_eq!(v["head_params"], 32 * 18 + 18);
}

#[test]
fn ablate_writes_one_row_per_method() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{TINY}\n[ablation]\nseeds = 2\n");
    let out_dir = tmp.path().join("abl");
    assert!(run(fedgame().arg("ablate").arg(write_config(tmp.path(), &text)).arg("-o").arg(&out_dir)).status.success());
    let mut r = csv::Reader::from_path(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["method", "qs", "mil", "icp"]);
    let methods: Vec<String> = r.records().map(|rec| rec.unwrap()[0].to_string()).collect();
    assert_eq!(methods, ["game", "mean", "single_attention", "fedavg", "local_only"]);
    let runs = csv::Reader::from_path(out_dir.join("ablation_runs.csv")).unwrap().into_records().count();
    assert_eq!(runs, 5 * 2);
}

#[test]
fn two_clients_make_game_and_mean_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{TINY}\n[ablation]\nmethods = [\"game\", \"mean\"]\nseeds = 2\n").replace("clients = 3", "clients = 2");
    let out_dir = tmp.path().join("abl");
    assert!(run(fedgame().arg("ablate").arg(write_config(tmp.path(), &text)).arg("-o").arg(&out_dir)).status.success());
    let rows: Vec<csv::StringRecord> = csv::Reader::from_path(out_dir.join("ablation.csv")).unwrap().records().map(Result::unwrap).collect();
    assert_eq!(rows[0][0].to_string(), "game");
    assert_eq!(rows[0][1].to_string(), rows[1][1].to_string());
}

#[test]
fn synth_csv_round_trips_through_run() {
    let tmp = tempfile::tempdir().unwrap();
    let csv_path = tmp.path().join("data/synth.csv");
    assert!(run(fedgame().args(["synth", "--clients", "3", "--length", "150", "-o"]).arg(&csv_path)).status.success());
    let mut r = csv::Reader::from_path(&csv_path).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["timestamp", "station_id", "demand_kwh"]);
    assert_eq!(r.records().count(), 3 * 150);

    let text = TINY.replace(
        "source = \"synth\"\nclients = 3\nclusters = 1\nlength = 120",
        &format!("source = \"csv\"\npath = {:?}", csv_path.to_str().unwrap()),
    );
    let out_dir = tmp.path().join("out");
    assert!(run(fedgame().arg("run").arg(write_config(tmp.path(), &text)).arg("-o").arg(&out_dir)).status.success());
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["clients"].as_array().unwrap().len(), 3);
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(fedgame().args(["comm", "--preset", "lstm-h9"]).output().unwrap().status.code(), Some(2));
    assert_eq!(fedgame().arg("comm").output().unwrap().status.code(), Some(2));
    assert_eq!(fedgame().arg("launch").output().unwrap().status.code(), Some(2));
}
