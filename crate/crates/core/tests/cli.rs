use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 5
output_dir = "results"

[inputs]
matrix = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]

[network]
depth = 2
sigma_w_sq = 1.0
sigma_b_sq = 0.0

[activation]
kind = "identity"

[sampling]
widths = [4, 16]
samples = 400

[segment]
x0 = [0.0, 0.0]
x1 = [1.0, 0.0]
levels = 4
paths = 5
"#;

fn nngp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nngp"))
        .args(args)
        .current_dir(cwd)
        .env_remove("NNGP_THREADS")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn check_validates_without_writing() {
    let dir = setup();
    let out = nngp(&["check", "--config", "exp.toml"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(!dir.path().join("results").exists());
}

#[test]
fn config_errors_exit_2_and_list_every_problem() {
    let dir = setup();
    let bad = CONFIG.replace("seed = 5", "").replace("widths = [4, 16]", "widths = [64, 8]\nsampels = 3");
    std::fs::write(dir.path().join("bad.toml"), bad).unwrap();
    let out = nngp(&["converge", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed"), "{err}");
    assert!(err.contains("widths must be strictly increasing"), "{err}");
    assert!(err.contains("did you mean `sampling.samples`"), "{err}");
}

#[test]
fn missing_config_flag_is_a_usage_error() {
    let dir = setup();
    assert_eq!(nngp(&["kernel"], dir.path()).status.code(), Some(2));
    assert_eq!(nngp(&["frobnicate", "--config", "exp.toml"], dir.path()).status.code(), Some(2));
}

#[test]
fn kernel_prints_layers_and_writes_csv() {
    let dir = setup();
    let out = nngp(&["kernel", "--config", "exp.toml", "--no-timestamp"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Sigma(1):") && text.contains("Sigma(2):"), "{text}");
    let csv = std::fs::read_to_string(dir.path().join("results/kernel_l2.csv")).unwrap();
    assert!(csv.starts_with("k,layer\n3,2\n"), "{csv}");
}

#[test]
fn converge_writes_report_plot_data_and_manifest() {
    let dir = setup();
    let out = nngp(&["converge", "--config", "exp.toml", "--out", "run"], dir.path());
    assert!(matches!(out.status.code(), Some(0) | Some(1)));
    let run = dir.path().join("run");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "nngp-report/1");
    assert_eq!(report["command"], "converge");
    assert!(report["timestamp_unix"].is_u64());
    let checks = report["checks"].as_array().unwrap();
    let all_pass = checks.iter().all(|c| c["pass"] == true);
    assert_eq!(out.status.code() == Some(0), all_pass && report["pass"] == true);
    for f in ["rate.csv", "widths.csv", "marginals.csv", "holder.csv", "path.csv", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let rate = std::fs::read_to_string(run.join("rate.csv")).unwrap();
    assert_eq!(rate.lines().count(), 3);
}

#[test]
fn thread_env_var_is_honored_and_output_is_stable() {
    let dir = setup();
    let run = |threads: &str, out: &str| {
        Command::new(env!("CARGO_BIN_EXE_nngp"))
            .args(["sample-net", "--config", "exp.toml", "--no-timestamp", "--out", out])
            .env("NNGP_THREADS", threads)
            .current_dir(dir.path())
            .output()
            .unwrap()
    };
    assert_eq!(run("1", "a").status.code(), Some(0));
    assert_eq!(run("2", "b").status.code(), Some(0));
    for f in ["report.json", "net_n4.bin", "net_n16.bin", "manifest.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(run("0", "c").status.code(), Some(2));
}

#[test]
fn holder_and_sample_gp_subcommands() {
    let dir = setup();
    let out = nngp(&["holder", "--config", "exp.toml", "--out", "h"], dir.path());
    assert!(matches!(out.status.code(), Some(0) | Some(1)), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("h/holder.csv").exists());
    let out = nngp(&["sample-gp", "--config", "exp.toml", "--out", "g"], dir.path());
    assert!(matches!(out.status.code(), Some(0) | Some(1)));
    assert!(dir.path().join("g/gp.bin").exists());
}

#[test]
fn shipped_config_is_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let out = nngp(&["check", "--config", "configs/relu_ladder.toml"], root);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}
