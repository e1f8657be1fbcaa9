use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dpp2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpp2")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const CONFIG: &str = r#"
seed = 42
name = "cli"

[problem]
kind = "quadratic_pl"
nodes = 4
dim = 2

[network]
kind = "ring"

[params]
alpha = 0.1
beta = 0.05
rho = 10.0
horizon = 40

[noise]
u = 0.5
r = 0.8

[run]
repeats = 2
plot = true
"#;

#[test]
fn no_arguments_prints_usage_and_fails() {
    let o = dpp2(&[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_fails() {
    let o = dpp2(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["run", "sweep", "dp-budget", "dp-select", "validate-params", "plot"] {
        let o = dpp2(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
}

#[test]
fn dp_budget_worked_example_prints_4_4() {
    let o = dpp2(&[
        "dp-budget", "--horizon", "1", "--dim", "1", "--alpha", "0.1", "--delta", "1", "--m-bar", "5", "--u-e", "1",
        "--u-w", "1", "--r", "0.5",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l == "epsilon = 4.4"), "{}", stdout(&o));
}

#[test]
fn dp_budget_requires_delta() {
    let o = dpp2(&[
        "dp-budget", "--horizon", "1", "--dim", "1", "--alpha", "0.1", "--m-bar", "5", "--u-e", "1", "--u-w", "1",
        "--r", "0.5",
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--delta"));
}

#[test]
fn dp_select_reports_intervals() {
    let o = dpp2(&[
        "dp-select", "--epsilon", "10", "--delta", "1e-4", "--dim", "2", "--m-bar", "1", "--horizon", "100", "--u-w",
        "1",
    ]);
    let text = stdout(&o);
    assert!(text.contains("r_interval_certified"), "{text}");
    assert_eq!(o.status.success(), text.contains("feasible = true"));
}

#[test]
fn validate_params_prints_table_and_flags() {
    let o = dpp2(&["validate-params", "--alpha", "0.1", "--beta", "0.05", "--rho", "10"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["lambda_bar_G", "kappa_G", "xi9", "zeta5", "D1", "D2", "rho_range", "certified"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
}

#[test]
fn run_writes_traces_summary_and_plot_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let mut listings = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = dpp2(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("certified"));
        listings.push(out);
    }
    for f in ["run_run0.csv", "run_run1.csv", "run_summary.csv", "plot.svg", "report.txt"] {
        let a = fs::read(listings[0].join(f)).unwrap();
        let b = fs::read(listings[1].join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between reruns");
    }
    let summary = fs::read_to_string(listings[0].join("run_summary.csv")).unwrap();
    assert_eq!(summary.lines().filter(|l| !l.starts_with('#')).count(), 42);
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, CONFIG.replace("rho = 10.0", "rho = 0.0")).unwrap();
    let o = dpp2(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 16"), "{err}");
}

#[test]
fn set_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("o");
    let o = dpp2(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "params.horizon=0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let summary = fs::read_to_string(out.join("run_summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("0,"));
}

#[test]
fn sweep_preset_prints_its_config() {
    let o = dpp2(&["sweep", "--preset", "figure2", "--print-config"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("parameter = \"u\""));
    assert!(text.contains("values = [0.0, 0.1, 0.3, 0.6, 1.0, 3.0, 5.0]"), "{text}");
}

#[test]
fn plot_renders_csvs_and_refuses_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    fs::write(&csv, "# label = flat\nk,w_hat_mean\n0,0.5\n10,0.5\n").unwrap();
    let svg = dir.path().join("p.svg");
    let o = dpp2(&["plot", csv.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.contains("<svg") && text.contains(">flat</text>"));

    let o = dpp2(&["plot", "--out", svg.to_str().unwrap()]);
    assert!(!o.status.success());
    let zeros = dir.path().join("z.csv");
    fs::write(&zeros, "k,w_hat_mean\n0,0\n").unwrap();
    let o = dpp2(&["plot", zeros.to_str().unwrap(), "--out", Path::new("/dev/null").to_str().unwrap()]);
    assert!(!o.status.success());
}
