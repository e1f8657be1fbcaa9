//! Experiment harness: config-driven runs, the two noise sweeps, seed-averaged
//! summaries and SVG plots.

pub mod config;
pub mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use thiserror::Error;

use crate::algorithm::{run, validate_parameters, AlgoError, AlgoParams, DerivedConstants, FreeConstants, TraceConfig};
use crate::diagnostics::Trace;
use crate::graph::{complete_edges, path_edges, random_geometric_graph, ring_edges, GraphError, Network};
use crate::privacy::{fmt_num, NoiseSchedule, PrivacyError};
use crate::problems::{generate_dataset, logistic_nonconvex, quadratic_pl, Problem, ProblemError};

pub use config::{ConfigError, ExperimentConfig, NetworkKind, ProblemKind, SweepParameter, SweepSection, Weights};
pub use plot::{emit_plot, Axes, PlotError, Series};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Generates the problem and the network described by `cfg`.
pub fn build_instance(cfg: &ExperimentConfig) -> Result<(Problem, Network), HarnessError> {
    let p = &cfg.problem;
    let problem = match p.kind {
        ProblemKind::Logistic => {
            let ds = generate_dataset(p.nodes, p.dim, p.samples, cfg.problem_seed())?;
            logistic_nonconvex(&ds, p.lambda, p.omega)?
        }
        ProblemKind::QuadraticPl => quadratic_pl(p.nodes, p.dim, p.rank_deficit, cfg.problem_seed())?,
    };
    let n = p.nodes;
    let edges = match cfg.network.kind {
        NetworkKind::Geometric => {
            random_geometric_graph(n, cfg.network.radius, cfg.network_seed(), cfg.network.max_attempts)?.edges
        }
        NetworkKind::Path => path_edges(n),
        NetworkKind::Ring => ring_edges(n),
        NetworkKind::Complete => complete_edges(n),
    };
    let mut network = Network::from_edges(n, &edges)?;
    if cfg.network.weights == Weights::Scaled {
        network = network.scaled(1.0 / (1.0 + network.max_degree() as f64))?;
    }
    Ok((problem, network))
}

/// Free constants used when the config does not pin them: `c̄_θ` at half
/// its admissible ceiling `1/κ_G` and `γ = c̄_θ/10`.
pub fn default_free_constants(network: &Network, alpha: f64, beta: f64) -> FreeConstants {
    let kappa_g = (alpha - beta * network.lambda_min_pos()) / (alpha - beta * network.lambda_max());
    let c_theta = if kappa_g.is_finite() && kappa_g > 0.0 {
        0.5 / kappa_g
    } else {
        0.5
    };
    FreeConstants {
        c_theta,
        gamma: c_theta / 10.0,
    }
}

/// The two noise sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Decay rate sweep at `ū = 1`.
    Figure1,
    /// Initial scale sweep at `r̄ = 0.95`.
    Figure2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// `N = 10, d = 5, m = 50` on a radius-0.5 geometric graph.
    Desk,
    /// `N = 50, d = 10, m = 200` on a radius-0.3 geometric graph.
    Full,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Figure1 => "figure1",
            Preset::Figure2 => "figure2",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "figure1" => Some(Preset::Figure1),
            "figure2" => Some(Preset::Figure2),
            _ => None,
        }
    }

    pub fn sweep(self) -> SweepSection {
        match self {
            Preset::Figure1 => SweepSection {
                parameter: SweepParameter::R,
                values: vec![0.0, 0.5, 0.9, 0.95, 0.97, 0.98, 0.99],
            },
            Preset::Figure2 => SweepSection {
                parameter: SweepParameter::U,
                values: vec![0.0, 0.1, 0.3, 0.6, 1.0, 3.0, 5.0],
            },
        }
    }

    /// Logistic benchmark with `λ = 0.001, ω = 1, α = 0.1, β = 0.05, ρ = 10`,
    /// 10 repeats of `K = 2000` iterations.
    pub fn config(self, scale: Scale, seed: u64) -> ExperimentConfig {
        let (nodes, dim, samples, radius) = match scale {
            Scale::Desk => (10, 5, 50, 0.5),
            Scale::Full => (50, 10, 200, 0.3),
        };
        let (u, r) = match self {
            Preset::Figure1 => (1.0, 0.0),
            Preset::Figure2 => (0.0, 0.95),
        };
        ExperimentConfig {
            seed,
            name: self.name().into(),
            problem: config::ProblemSection {
                kind: ProblemKind::Logistic,
                nodes,
                dim,
                samples,
                lambda: 0.001,
                omega: 1.0,
                rank_deficit: 0,
                seed: None,
            },
            network: config::NetworkSection {
                kind: NetworkKind::Geometric,
                radius,
                max_attempts: 1000,
                weights: Weights::Scaled,
                seed: None,
            },
            params: config::ParamsSection {
                alpha: 0.1,
                beta: 0.05,
                rho: 10.0,
                eta: config::EtaSpec::Constant(0.5),
                eta_seed: None,
                horizon: 2000,
            },
            noise: config::NoiseSection { u, r },
            trace: config::TraceSection {
                cadence: 10,
                ..Default::default()
            },
            run: config::RunSection {
                repeats: 10,
                seeds: None,
                output: None,
                plot: true,
            },
            sweep: Some(self.sweep()),
        }
    }
}

/// One row of a seed-averaged summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub k: u64,
    pub w_hat_mean: f64,
    pub w_hat_min: f64,
    pub w_hat_max: f64,
    pub consensus_mean: f64,
    pub stationarity_mean: f64,
    pub objective_mean: f64,
}

pub const SUMMARY_COLUMNS: [&str; 7] = [
    "k",
    "w_hat_mean",
    "w_hat_min",
    "w_hat_max",
    "consensus_mean",
    "stationarity_mean",
    "objective_mean",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub label: String,
    pub metadata: Vec<(String, String)>,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    /// Averages traces recorded at identical iterations, in the given order.
    pub fn from_traces(label: &str, traces: &[Trace]) -> Summary {
        let count = traces.len() as f64;
        let rows = (0..traces[0].rows.len())
            .map(|i| {
                let k = traces[0].rows[i].k;
                let mut row = SummaryRow {
                    k,
                    w_hat_mean: 0.0,
                    w_hat_min: f64::INFINITY,
                    w_hat_max: f64::NEG_INFINITY,
                    consensus_mean: 0.0,
                    stationarity_mean: 0.0,
                    objective_mean: 0.0,
                };
                for t in traces {
                    let r = &t.rows[i];
                    debug_assert_eq!(r.k, k);
                    row.w_hat_mean += r.w_hat;
                    row.w_hat_min = row.w_hat_min.min(r.w_hat);
                    row.w_hat_max = row.w_hat_max.max(r.w_hat);
                    row.consensus_mean += r.consensus;
                    row.stationarity_mean += r.stationarity;
                    row.objective_mean += r.objective;
                }
                row.w_hat_mean /= count;
                row.consensus_mean /= count;
                row.stationarity_mean /= count;
                row.objective_mean /= count;
                row
            })
            .collect();
        Summary {
            label: label.to_string(),
            metadata: vec![("label".into(), label.into()), ("repeats".into(), traces.len().to_string())],
            rows,
        }
    }

    pub fn final_w_hat_mean(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.w_hat_mean)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "# {k} = {v}");
        }
        s.push_str(&SUMMARY_COLUMNS.join(","));
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.k, r.w_hat_mean, r.w_hat_min, r.w_hat_max, r.consensus_mean, r.stationarity_mean, r.objective_mean
            );
        }
        s
    }
}

/// Reads `(k, column)` pairs plus the `label` metadata entry from a trace or
/// summary CSV.
pub fn read_series(csv: &str, column: &str) -> Result<Series, HarnessError> {
    let mut label = None;
    let mut header: Option<Vec<&str>> = None;
    let mut points = Vec::new();
    for (i, line) in csv.lines().enumerate() {
        if let Some(meta) = line.strip_prefix('#') {
            if let Some((k, v)) = meta.split_once('=') {
                if k.trim() == "label" {
                    label = Some(v.trim().to_string());
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let Some(h) = &header else {
            header = Some(fields);
            continue;
        };
        let find = |name: &str| {
            h.iter()
                .position(|c| *c == name)
                .ok_or_else(|| HarnessError::Csv(format!("no `{name}` column")))
        };
        let (ki, ci) = (find("k")?, find(column)?);
        let parse = |idx: usize| -> Result<f64, HarnessError> {
            fields
                .get(idx)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| HarnessError::Csv(format!("line {}: bad value in column {}", i + 1, h[idx])))
        };
        points.push((parse(ki)?, parse(ci)?));
    }
    if header.is_none() {
        return Err(HarnessError::Csv("no header row".into()));
    }
    Ok(Series {
        label: label.unwrap_or_else(|| column.to_string()),
        points,
    })
}

/// Results for one sweep point (or the single point of a plain run).
#[derive(Debug, Clone)]
pub struct PointResult {
    pub label: String,
    pub value: Option<f64>,
    pub constants: DerivedConstants,
    pub traces: Vec<Trace>,
    pub summary: Summary,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub points: Vec<PointResult>,
    /// Validator tables, one per point.
    pub report: String,
    /// Files written, in creation order.
    pub files: Vec<PathBuf>,
}

fn point_label(parameter: SweepParameter, value: f64) -> String {
    format!("{parameter}={}", fmt_num(value))
}

fn file_stem(label: &str) -> String {
    label.replace('=', "_")
}

/// Runs every (sweep point, repeat) pair, in parallel, and writes per-run
/// CSVs, per-point summaries, the validator report and an optional plot to
/// `run.output` when set. Outputs depend only on the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    let (problem, network) = build_instance(cfg)?;
    let n = network.node_count();
    let seeds = cfg.run_seeds();
    let hash = cfg.hash();
    let points: Vec<(String, Option<f64>, NoiseSchedule)> = match &cfg.sweep {
        None => vec![("run".into(), None, NoiseSchedule::uniform(n, cfg.noise.u, cfg.noise.r)?)],
        Some(sw) => sw
            .values
            .iter()
            .map(|&v| {
                let (u, r) = match sw.parameter {
                    SweepParameter::R => (cfg.noise.u, v),
                    SweepParameter::U => (v, cfg.noise.r),
                };
                Ok((point_label(sw.parameter, v), Some(v), NoiseSchedule::uniform(n, u, r)?))
            })
            .collect::<Result<_, PrivacyError>>()?,
    };
    let free = cfg
        .free_constants()
        .unwrap_or_else(|| default_free_constants(&network, cfg.params.alpha, cfg.params.beta));

    let make_params = |noise: &NoiseSchedule| AlgoParams {
        alpha: cfg.params.alpha,
        beta: cfg.params.beta,
        rho: cfg.params.rho,
        eta: cfg.eta_schedule(),
        noise: noise.clone(),
        horizon: cfg.params.horizon,
    };
    let mut report = String::new();
    let mut constants = Vec::with_capacity(points.len());
    for (label, _, noise) in &points {
        let c = validate_parameters(&make_params(noise), &network, &problem, free)?;
        let _ = writeln!(report, "[{label}]");
        report.push_str(&c.table());
        report.push('\n');
        constants.push(c);
    }

    let trace_cfg = TraceConfig {
        cadence: cfg.trace.cadence,
        x0: None,
        lyapunov: cfg.trace.lyapunov.then_some(free),
        allow_disconnected: false,
    };
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..seeds.len()).map(move |s| (p, s))).collect();
    info!("{}: {} runs of {} iterations", cfg.name, jobs.len(), cfg.params.horizon);
    let traces: Vec<Trace> = jobs
        .par_iter()
        .map(|&(p, s)| {
            let (label, _, noise) = &points[p];
            let params = make_params(noise);
            let mut trace = run(&problem, &network, &params, seeds[s], &trace_cfg)?;
            for (k, v) in [
                ("experiment", cfg.name.clone()),
                ("config_hash", hash.clone()),
                ("label", label.clone()),
                ("seed", seeds[s].to_string()),
                ("problem", format!("{} seed {}", problem.kind(), cfg.problem_seed())),
                ("network_seed", cfg.network_seed().to_string()),
                ("alpha", fmt_num(params.alpha)),
                ("beta", fmt_num(params.beta)),
                ("rho", fmt_num(params.rho)),
                ("eta", format!("{:?}", params.eta)),
                ("horizon", params.horizon.to_string()),
                ("u_bar", fmt_num(params.noise.u_bar())),
                ("r_bar", fmt_num(params.noise.r_bar())),
            ] {
                trace.push_metadata(k, v);
            }
            Ok(trace)
        })
        .collect::<Result<_, AlgoError>>()?;

    let mut traces = traces.into_iter();
    let mut results = Vec::with_capacity(points.len());
    for ((label, value, _), c) in points.into_iter().zip(constants) {
        let runs: Vec<Trace> = traces.by_ref().take(seeds.len()).collect();
        let mut summary = Summary::from_traces(&label, &runs);
        summary.metadata.insert(0, ("config_hash".into(), hash.clone()));
        summary.metadata.insert(0, ("experiment".into(), cfg.name.clone()));
        results.push(PointResult {
            label,
            value,
            constants: c,
            traces: runs,
            summary,
        });
    }

    let mut out = ExperimentOutput {
        config_hash: hash,
        seeds,
        points: results,
        report,
        files: Vec::new(),
    };
    if let Some(dir) = &cfg.run.output {
        write_outputs(cfg, &mut out, dir)?;
    }
    Ok(out)
}

fn write_outputs(cfg: &ExperimentConfig, out: &mut ExperimentOutput, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut write = |name: String, body: &str| -> Result<(), HarnessError> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
        out.files.push(path);
        Ok(())
    };
    write("config.toml".into(), &cfg.to_toml())?;
    write("report.txt".into(), &out.report)?;
    for p in &out.points {
        let stem = file_stem(&p.label);
        for (j, t) in p.traces.iter().enumerate() {
            write(format!("{stem}_run{j}.csv"), &t.to_csv())?;
        }
        write(format!("{stem}_summary.csv"), &p.summary.to_csv())?;
    }
    if cfg.run.plot {
        let series: Vec<Series> = out
            .points
            .iter()
            .map(|p| Series {
                label: p.label.clone(),
                points: p.summary.rows.iter().map(|r| (r.k as f64, r.w_hat_mean)).collect(),
            })
            .collect();
        let axes = Axes {
            title: cfg.name.clone(),
            ..Axes::default()
        };
        let svg = emit_plot(&series, &axes)?;
        write("plot.svg".into(), &svg)?;
    }
    Ok(())
}
