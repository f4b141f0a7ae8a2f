use std::path::Path;
use std::process::Command;

use fedlamb::bench::{
    compare_protocols, default_grid, grid_sweep, read_metrics, run_experiment, ExperimentConfig,
    Grid, METRICS_HEADER,
};
use fedlamb::data::{gen_blobs, write_csv, BlobParams};
use fedlamb::federation::{comm_account, ProtocolKind};

fn config_text(protocol: &str, out: &Path, extra: &str) -> String {
    let mut lines: Vec<String> = format!(
        r#"protocol = "{protocol}"
model = "mlp"
hidden = [8]
blob_classes = 3
blob_dim = 5
blob_per_class = 30
blob_test_per_class = 10
clients = 4
participation = 0.5
rounds = 3
batch_size = 16
lr = 0.01
output = "{}""#,
        out.display()
    )
    .lines()
    .map(String::from)
    .collect();
    // extra keys override the template
    for line in extra.lines() {
        let key = line.split('=').next().unwrap().trim();
        match lines
            .iter_mut()
            .find(|l| l.split('=').next().unwrap().trim() == key)
        {
            Some(slot) => *slot = line.to_string(),
            None => lines.push(line.to_string()),
        }
    }
    lines.join("\n") + "\n"
}

fn config(protocol: &str, out: &Path, extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&config_text(protocol, out, extra)).unwrap()
}

fn without_wall(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn run_writes_header_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let cfg = config("fed-lamb", &out, "");
    let s = run_experiment(&cfg).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(read_metrics(&out).unwrap(), s.runs[0].metrics);
    let summary: toml::Table = std::fs::read_to_string(s.summary_path.unwrap())
        .unwrap()
        .parse()
        .unwrap();
    for key in [
        "best_accuracy",
        "final_grad_norm_sq",
        "total_uplink",
        "total_downlink",
        "best_accuracy_std",
    ] {
        assert!(summary.contains_key(key), "{key}");
    }
}

#[test]
fn csv_comm_columns_equal_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    for protocol in ProtocolKind::ALL {
        let out = dir.path().join(format!("{protocol}.csv"));
        let cfg = config(protocol.name(), &out, "lazy_period = 2\nrounds = 4\n");
        run_experiment(&cfg).unwrap();
        let p = cfg.model_spec().layout().dim();
        for m in read_metrics(&out).unwrap() {
            let e = comm_account(protocol, p, 2, m.round, Some(2));
            assert_eq!(
                (m.uplink, m.downlink),
                (e.uplink(), e.downlink()),
                "{protocol} round {}",
                m.round
            );
        }
    }
}

#[test]
fn replay_is_byte_identical_except_wall_time() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    run_experiment(&config("mime-lamb", &a, "seed = 5\n")).unwrap();
    run_experiment(&config("mime-lamb", &b, "seed = 5\n")).unwrap();
    assert_eq!(without_wall(&a), without_wall(&b));
}

#[test]
fn repeats_use_derived_seeds_and_report_spread() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let s = run_experiment(&config("fed-ams", &out, "seed = 10\nrepeat = 3\n")).unwrap();
    assert_eq!(
        s.runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
        vec![10, 11, 12]
    );
    let best: Vec<f64> = (0..3)
        .map(|i| {
            let m = read_metrics(&dir.path().join(format!("r_rep{i}.csv"))).unwrap();
            m.iter().map(|r| r.test_accuracy).fold(f64::MIN, f64::max)
        })
        .collect();
    let mean = best.iter().sum::<f64>() / 3.0;
    let sd = (best.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    let summary: toml::Table = std::fs::read_to_string(dir.path().join("r.summary.toml"))
        .unwrap()
        .parse()
        .unwrap();
    let get = |k: &str| summary[k].as_float().unwrap();
    assert!((get("best_accuracy_mean") - mean).abs() < 1e-12);
    assert!((get("best_accuracy_std") - sd).abs() < 1e-12);
}

#[test]
fn single_point_sweep_equals_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = config("fed-lamb", &dir.path().join("s.csv"), "");
    let entries = grid_sweep(&base, &Grid::Single(vec![0.01])).unwrap();
    assert_eq!(entries.len(), 1);
    let direct = dir.path().join("direct.csv");
    let mut cfg = base.clone();
    cfg.output = direct.clone();
    run_experiment(&cfg).unwrap();
    assert_eq!(
        without_wall(&entries[0].metrics_path),
        without_wall(&direct)
    );
}

#[test]
fn sweep_report_ranks_by_best_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let base = config("adp-fed", &dir.path().join("g.csv"), "");
    let grid = Grid::Pair {
        local: vec![0.01, 0.1],
        global: vec![0.001, 0.01],
    };
    let entries = grid_sweep(&base, &grid).unwrap();
    assert_eq!(entries.len(), 4);
    let best_of = |p: &Path| {
        read_metrics(p)
            .unwrap()
            .iter()
            .map(|m| m.test_accuracy)
            .fold(f64::MIN, f64::max)
    };
    let max = entries
        .iter()
        .map(|e| best_of(&e.metrics_path))
        .fold(f64::MIN, f64::max);
    assert_eq!(entries[0].best_accuracy, max);
    let report = std::fs::read_to_string(dir.path().join("g.sweep.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
    assert!(report.lines().nth(1).unwrap().starts_with("1,"));
    assert!(grid_sweep(&base, &default_grid(ProtocolKind::FedLamb)).is_err());
}

#[test]
fn comparison_aligns_rounds_and_checks_shared_fields() {
    let dir = tempfile::tempdir().unwrap();
    let a = config(
        "fed-ams",
        &dir.path().join("x.csv"),
        "target_accuracy = 1.0\n",
    );
    let c = compare_protocols(&[a.clone(), a.clone()], &dir.path().join("cmp.csv")).unwrap();
    assert_eq!(c.accuracy[0], c.accuracy[1]);
    assert_eq!(c.labels, vec!["fed-ams", "fed-ams#2"]);
    let table = std::fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3 + 1);

    let mut other = a.clone();
    other.seed = 1;
    let err = compare_protocols(&[a.clone(), other], &dir.path().join("bad.csv")).unwrap_err();
    assert!(err.to_string().contains("`seed`"), "{err}");

    let reach = c.rounds_to_target.clone();
    let accs = &c.accuracy[0];
    let expect = accs.iter().position(|&x| x >= 1.0).map(|i| i + 1);
    assert_eq!(reach[0], expect);
    if expect.is_none() {
        assert!(table.lines().last().unwrap().ends_with("inf,inf"));
    }
}

#[test]
fn csv_source_round_trips_through_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_blobs(
        &BlobParams {
            classes: 3,
            dim: 4,
            per_class: 20,
            separation: 4.0,
            noise: 1.0,
        },
        1,
    )
    .unwrap();
    let train = dir.path().join("train.csv");
    write_csv(&data, &train).unwrap();
    let text = format!(
        "protocol = \"fed-sgd\"\nmodel = \"logistic\"\ncsv = \"{}\"\ncsv_dim = 4\ncsv_classes = 3\nclients = 3\nrounds = 2\noutput = \"{}\"\n",
        train.display(),
        dir.path().join("o.csv").display()
    );
    let s = run_experiment(&ExperimentConfig::parse(&text).unwrap()).unwrap();
    assert_eq!(s.runs[0].metrics.len(), 2);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedlamb"))
}

#[test]
fn cli_run_sweep_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        config_text("fed-lamb", &dir.path().join("ignored.csv"), ""),
    )
    .unwrap();
    let out = dir.path().join("cli.csv");

    let st = cli()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "3", "--repeat", "1"])
        .output()
        .unwrap();
    assert!(
        st.status.success(),
        "{}",
        String::from_utf8_lossy(&st.stderr)
    );
    assert_eq!(read_metrics(&out).unwrap().len(), 3);

    let grid = dir.path().join("grid.toml");
    std::fs::write(&grid, "lr = [0.01, 0.03]\n").unwrap();
    let st = cli()
        .arg("sweep")
        .arg(&cfg)
        .arg(&grid)
        .arg("--out")
        .arg(dir.path().join("sw.csv"))
        .output()
        .unwrap();
    assert!(
        st.status.success(),
        "{}",
        String::from_utf8_lossy(&st.stderr)
    );
    assert!(dir.path().join("sw.sweep.csv").exists());

    let table = dir.path().join("cmp.csv");
    let st = cli()
        .arg("compare")
        .arg(&cfg)
        .arg(&cfg)
        .arg("--out")
        .arg(&table)
        .output()
        .unwrap();
    assert!(
        st.status.success(),
        "{}",
        String::from_utf8_lossy(&st.stderr)
    );
    assert!(table.exists());
}

#[test]
fn cli_reports_bad_keys_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        config_text("fed-lamb", &dir.path().join("o.csv"), "participation = 0\n"),
    )
    .unwrap();
    let st = cli().arg("run").arg(&cfg).output().unwrap();
    assert!(!st.status.success());
    assert!(String::from_utf8_lossy(&st.stderr).contains("participation"));

    let st = cli()
        .arg("run")
        .arg(dir.path().join("missing.toml"))
        .output()
        .unwrap();
    assert!(!st.status.success());
    assert!(String::from_utf8_lossy(&st.stderr).contains("missing.toml"));
}
