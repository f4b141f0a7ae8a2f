//! Experiment driver: single runs, learning-rate sweeps and side-by-side
//! protocol comparisons, all writing plain CSV/TOML artifacts.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::{gen_blobs, load_csv, Dataset};
use crate::error::{Error, Result};
use crate::federation::{ProtocolKind, RoundMetrics, Simulation};
use crate::rng::{stream_key, Stream};

pub use config::{DataSource, ExperimentConfig};

pub const METRICS_HEADER: &str =
    "round,train_loss,test_accuracy,grad_norm_sq,uplink,downlink,grad_evals,wall_ms";

/// Step-size grids tried by default for each protocol.
pub fn default_grid(protocol: ProtocolKind) -> Grid {
    const WIDE: [f64; 9] = [0.001, 0.003, 0.005, 0.01, 0.03, 0.05, 0.1, 0.3, 0.5];
    const SMALL: [f64; 10] = [
        0.0001, 0.0003, 0.0005, 0.001, 0.003, 0.005, 0.01, 0.03, 0.05, 0.1,
    ];
    const LOCAL: [f64; 12] = [
        0.0001, 0.0003, 0.0005, 0.001, 0.003, 0.005, 0.01, 0.03, 0.05, 0.1, 0.3, 0.5,
    ];
    match protocol {
        ProtocolKind::FedSgd | ProtocolKind::FedLamb | ProtocolKind::MimeLamb => {
            Grid::Single(WIDE.to_vec())
        }
        ProtocolKind::FedAms | ProtocolKind::Mime => Grid::Single(SMALL.to_vec()),
        ProtocolKind::AdpFed => Grid::Pair {
            local: LOCAL.to_vec(),
            global: SMALL.to_vec(),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    Single(Vec<f64>),
    /// Cross product of local and server step sizes.
    Pair {
        local: Vec<f64>,
        global: Vec<f64>,
    },
}

impl Grid {
    /// `(lr, lr_global)` points; `lr_global` is `None` for single grids.
    pub fn points(&self) -> Vec<(f64, Option<f64>)> {
        match self {
            Grid::Single(v) => v.iter().map(|&lr| (lr, None)).collect(),
            Grid::Pair { local, global } => local
                .iter()
                .flat_map(|&l| global.iter().map(move |&g| (l, Some(g))))
                .collect(),
        }
    }

    /// Reads `lr = [...]`, or `lr_local` and `lr_global` lists.
    pub fn parse(text: &str) -> Result<Grid> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<grid>", e.message().to_string()))?;
        let mut list = |key: &str| -> Result<Option<Vec<f64>>> {
            match table.remove(key) {
                None => Ok(None),
                Some(toml::Value::Array(items)) => items
                    .into_iter()
                    .map(|v| match v {
                        toml::Value::Float(x) if x > 0.0 => Ok(x),
                        toml::Value::Integer(i) if i > 0 => Ok(i as f64),
                        _ => Err(Error::config(key, "expected a list of positive numbers")),
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(Some),
                Some(_) => Err(Error::config(key, "expected a list")),
            }
        };
        let grid = match (list("lr")?, list("lr_local")?, list("lr_global")?) {
            (Some(lr), None, None) if !lr.is_empty() => Grid::Single(lr),
            (None, Some(local), Some(global)) if !local.is_empty() && !global.is_empty() => {
                Grid::Pair { local, global }
            }
            _ => {
                return Err(Error::config(
                    "lr",
                    "give a non-empty lr list, or both lr_local and lr_global",
                ))
            }
        };
        if let Some(key) = table.keys().next() {
            return Err(Error::config(key.clone(), "unknown key"));
        }
        Ok(grid)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Grid> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Grid::parse(&text).map_err(|e| e.with_context(path.display().to_string()))
    }
}

/// Builds `(train, test)` for one run seed.
pub fn load_data(cfg: &ExperimentConfig, run_seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    match &cfg.data {
        DataSource::Csv {
            train,
            test,
            dim,
            classes,
        } => {
            let tr = load_csv(train, *dim, *classes)?;
            let te = test
                .as_ref()
                .map(|p| load_csv(p, *dim, *classes))
                .transpose()?;
            Ok((tr, te))
        }
        DataSource::Blobs {
            params,
            test_per_class,
            seed,
        } => {
            let s = seed.unwrap_or(run_seed);
            let train = gen_blobs(params, s)?;
            let test = if *test_per_class > 0 {
                let p = config_blob_test(params, *test_per_class);
                Some(gen_blobs(&p, stream_key(s, Stream::Blobs, &[1]))?)
            } else {
                None
            };
            Ok((train, test))
        }
    }
}

fn config_blob_test(p: &crate::data::BlobParams, per_class: usize) -> crate::data::BlobParams {
    crate::data::BlobParams {
        per_class,
        ..p.clone()
    }
}

/// One completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
    pub metrics_path: Option<PathBuf>,
}

impl RunRecord {
    pub fn best_accuracy(&self) -> f64 {
        self.metrics
            .iter()
            .map(|m| m.test_accuracy)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.test_accuracy)
    }

    pub fn final_grad_norm_sq(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.grad_norm_sq)
    }

    pub fn total_uplink(&self) -> u64 {
        self.metrics.iter().map(|m| m.uplink).sum()
    }

    pub fn total_downlink(&self) -> u64 {
        self.metrics.iter().map(|m| m.downlink).sum()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.test_accuracy).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub protocol: ProtocolKind,
    pub runs: Vec<RunRecord>,
    pub summary_path: Option<PathBuf>,
}

impl ExperimentSummary {
    pub fn best_accuracy(&self) -> (f64, f64) {
        mean_std(
            &self
                .runs
                .iter()
                .map(RunRecord::best_accuracy)
                .collect::<Vec<_>>(),
        )
    }

    pub fn final_accuracy(&self) -> (f64, f64) {
        mean_std(
            &self
                .runs
                .iter()
                .map(RunRecord::final_accuracy)
                .collect::<Vec<_>>(),
        )
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// First 1-based round whose accuracy reaches `target`.
pub fn rounds_to_target(accuracies: &[f64], target: f64) -> Option<usize> {
    accuracies.iter().position(|&a| a >= target).map(|i| i + 1)
}

/// Runs one seed without touching the filesystem.
pub fn run_once(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<RoundMetrics>> {
    let (train, test) = load_data(cfg, seed)?;
    let mut sim = Simulation::new(cfg.federation(seed), train, test)?;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        metrics.push(sim.run_round()?.metrics);
    }
    Ok(metrics)
}

fn metrics_row(m: &RoundMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        m.round,
        m.train_loss,
        m.test_accuracy,
        m.grad_norm_sq,
        m.uplink,
        m.downlink,
        m.grad_evals,
        m.wall_ms
    )
}

pub fn write_metrics(path: &Path, metrics: &[RoundMetrics]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |line: &str| writeln!(out, "{line}").map_err(|e| Error::io(path, e));
    write(METRICS_HEADER)?;
    for m in metrics {
        write(&metrics_row(m))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_error(path, 0, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != METRICS_HEADER {
        return Err(parse_error(path, 1, "unexpected header".into()));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_error(path, line, e.to_string()))?;
        let f = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_error(path, line, format!("bad field {}", j + 1)))
        };
        let u = |j: usize| -> Result<u64> {
            rec.get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_error(path, line, format!("bad field {}", j + 1)))
        };
        out.push(RoundMetrics {
            round: u(0)? as usize,
            train_loss: f(1)?,
            test_accuracy: f(2)?,
            grad_norm_sq: f(3)?,
            uplink: u(4)?,
            downlink: u(5)?,
            grad_evals: u(6)?,
            wall_ms: f(7)?,
        });
    }
    Ok(out)
}

fn parse_error(path: &Path, line: usize, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

/// `dir/stem_rep{i}.csv` for repeat `i` when there are several repeats.
pub fn repeat_path(output: &Path, repeat: usize, of: usize) -> PathBuf {
    if of <= 1 {
        return output.to_path_buf();
    }
    let stem = output
        .file_stem()
        .map_or("metrics".into(), |s| s.to_string_lossy().into_owned());
    output.with_file_name(format!("{stem}_rep{repeat}.csv"))
}

pub fn summary_path(output: &Path) -> PathBuf {
    output.with_extension("summary.toml")
}

/// Runs `repeat` seeds (`seed`, `seed + 1`, ...), writing one metrics file
/// per run plus a summary next to `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.repeat);
    for i in 0..cfg.repeat {
        let seed = cfg.seed.wrapping_add(i as u64);
        let metrics = run_once(cfg, seed).map_err(|e| e.with_context(format!("seed {seed}")))?;
        let path = repeat_path(&cfg.output, i, cfg.repeat);
        write_metrics(&path, &metrics)?;
        runs.push(RunRecord {
            seed,
            metrics,
            metrics_path: Some(path),
        });
    }
    let mut summary = ExperimentSummary {
        protocol: cfg.protocol,
        runs,
        summary_path: None,
    };
    let path = summary_path(&cfg.output);
    std::fs::write(&path, render_summary(cfg, &summary)).map_err(|e| Error::io(&path, e))?;
    summary.summary_path = Some(path);
    Ok(summary)
}

fn render_summary(cfg: &ExperimentConfig, s: &ExperimentSummary) -> String {
    use toml::Value;
    let floats = |f: fn(&RunRecord) -> f64| {
        Value::Array(s.runs.iter().map(|r| Value::Float(f(r))).collect())
    };
    let ints = |f: fn(&RunRecord) -> u64| {
        Value::Array(s.runs.iter().map(|r| Value::Integer(f(r) as i64)).collect())
    };
    let mut t = toml::Table::new();
    let (best_mean, best_std) = s.best_accuracy();
    let (final_mean, final_std) = s.final_accuracy();
    t.insert("protocol".into(), Value::String(cfg.protocol.name().into()));
    t.insert("rounds".into(), Value::Integer(cfg.rounds as i64));
    t.insert("seeds".into(), ints(|r| r.seed));
    t.insert("best_accuracy".into(), floats(RunRecord::best_accuracy));
    t.insert("final_accuracy".into(), floats(RunRecord::final_accuracy));
    t.insert(
        "final_grad_norm_sq".into(),
        floats(RunRecord::final_grad_norm_sq),
    );
    t.insert("total_uplink".into(), ints(RunRecord::total_uplink));
    t.insert("total_downlink".into(), ints(RunRecord::total_downlink));
    t.insert("best_accuracy_mean".into(), Value::Float(best_mean));
    t.insert("best_accuracy_std".into(), Value::Float(best_std));
    t.insert("final_accuracy_mean".into(), Value::Float(final_mean));
    t.insert("final_accuracy_std".into(), Value::Float(final_std));
    let rounds: Vec<Value> = s
        .runs
        .iter()
        .map(
            |r| match rounds_to_target(&r.accuracies(), cfg.target_accuracy) {
                Some(n) => Value::Integer(n as i64),
                None => Value::String("inf".into()),
            },
        )
        .collect();
    t.insert("target_accuracy".into(), Value::Float(cfg.target_accuracy));
    t.insert("rounds_to_target".into(), Value::Array(rounds));
    toml::to_string(&t).expect("flat table serializes")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub lr: f64,
    pub lr_global: Option<f64>,
    pub best_accuracy: f64,
    pub final_accuracy: f64,
    pub final_grad_norm_sq: f64,
    pub metrics_path: PathBuf,
}

/// Runs every grid point; entries are ranked by mean best accuracy, ties
/// keeping grid order.
pub fn grid_sweep(base: &ExperimentConfig, grid: &Grid) -> Result<Vec<SweepEntry>> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::config("lr", "empty grid"));
    }
    if matches!(grid, Grid::Pair { .. }) != (base.protocol == ProtocolKind::AdpFed) {
        return Err(Error::config(
            "lr",
            "adp-fed sweeps need lr_local and lr_global; other protocols need lr",
        ));
    }
    let dir = base
        .output
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let stem = base
        .output
        .file_stem()
        .map_or("sweep".into(), |s| s.to_string_lossy().into_owned());
    let mut entries = Vec::with_capacity(points.len());
    for (lr, lr_global) in points {
        let mut cfg = base.clone();
        cfg.lr = lr;
        let tag = match lr_global {
            Some(g) => {
                cfg.lr_global = g;
                format!("{stem}_lr{lr}_glr{g}.csv")
            }
            None => format!("{stem}_lr{lr}.csv"),
        };
        cfg.output = dir.join(tag);
        let s = run_experiment(&cfg)?;
        let mean = |f: fn(&RunRecord) -> f64| mean_std(&s.runs.iter().map(f).collect::<Vec<_>>()).0;
        entries.push(SweepEntry {
            lr,
            lr_global,
            best_accuracy: mean(RunRecord::best_accuracy),
            final_accuracy: mean(RunRecord::final_accuracy),
            final_grad_norm_sq: mean(RunRecord::final_grad_norm_sq),
            metrics_path: cfg.output,
        });
    }
    entries.sort_by(|a, b| b.best_accuracy.total_cmp(&a.best_accuracy));
    let report = dir.join(format!("{stem}.sweep.csv"));
    let mut text =
        String::from("rank,lr,lr_global,best_accuracy,final_accuracy,final_grad_norm_sq,metrics\n");
    for (i, e) in entries.iter().enumerate() {
        let g = e.lr_global.map(|g| g.to_string()).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i + 1,
            e.lr,
            g,
            e.best_accuracy,
            e.final_accuracy,
            e.final_grad_norm_sq,
            e.metrics_path.display()
        ));
    }
    std::fs::write(&report, text).map_err(|e| Error::io(&report, e))?;
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub labels: Vec<String>,
    /// Per-protocol accuracy curves, one entry per round.
    pub accuracy: Vec<Vec<f64>>,
    pub rounds_to_target: Vec<Option<usize>>,
    pub target: f64,
}

/// Runs configs that differ only in protocol and optimizer settings and
/// tabulates their accuracy per round.
pub fn compare_protocols(configs: &[ExperimentConfig], out: &Path) -> Result<Comparison> {
    let first = configs
        .first()
        .ok_or_else(|| Error::config("<compare>", "need at least one config"))?;
    for c in &configs[1..] {
        let shared = [
            ("data", c.data == first.data),
            ("model", c.model_spec() == first.model_spec()),
            ("seed", c.seed == first.seed),
            ("clients", c.clients == first.clients),
            ("participation", c.participation == first.participation),
            ("rounds", c.rounds == first.rounds),
            ("partitioning", c.partitioning == first.partitioning),
        ];
        if let Some((key, _)) = shared.iter().find(|(_, same)| !same) {
            return Err(Error::config(*key, "compared configs must agree"));
        }
    }
    let mut labels = Vec::new();
    let mut accuracy = Vec::new();
    for c in configs {
        let base = c.protocol.name().to_string();
        let n = labels
            .iter()
            .filter(|l: &&String| l.starts_with(&base))
            .count();
        labels.push(if n == 0 {
            base
        } else {
            format!("{base}#{}", n + 1)
        });
        let metrics = run_once(c, c.seed)?;
        accuracy.push(metrics.iter().map(|m| m.test_accuracy).collect::<Vec<_>>());
    }
    let target = first.target_accuracy;
    let rounds_to_target = accuracy
        .iter()
        .map(|a| rounds_to_target(a, target))
        .collect::<Vec<_>>();

    let mut text = format!("round,{}\n", labels.join(","));
    for r in 0..first.rounds {
        let row: Vec<String> = accuracy.iter().map(|a| a[r].to_string()).collect();
        text.push_str(&format!("{},{}\n", r + 1, row.join(",")));
    }
    let reach: Vec<String> = rounds_to_target
        .iter()
        .map(|r| r.map_or("inf".to_string(), |n| n.to_string()))
        .collect();
    text.push_str(&format!("rounds_to_{target},{}\n", reach.join(",")));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
    Ok(Comparison {
        labels,
        accuracy,
        rounds_to_target,
        target,
    })
}
