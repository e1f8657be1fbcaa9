//! `dpp2` command line: experiments, noise sweeps, privacy accounting,
//! parameter validation and plotting.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dpp2::algorithm::{validate_parameters, AlgoParams, FreeConstants};
use dpp2::harness::{
    build_instance, default_free_constants, emit_plot, read_series, run_experiment, Axes, ExperimentConfig,
    ExperimentOutput, Preset, Scale,
};
use dpp2::privacy::{fmt_num, select_dp_parameters, BudgetInputs, NoiseSchedule, PrivacyReport};

#[derive(Parser)]
#[command(name = "dpp2", version, about = "Decentralized primal-dual optimization with two-tier privacy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run(RunArgs),
    /// Run one of the noise sweep presets.
    Sweep(SweepArgs),
    /// Evaluate the privacy budget epsilon for given noise parameters.
    DpBudget(BudgetArgs),
    /// Select step size and decay rates meeting a target epsilon.
    DpSelect(SelectArgs),
    /// Print the derived constants and feasibility flags for (alpha, beta, rho).
    ValidateParams(ValidateArgs),
    /// Render trace or summary CSVs as a log-scale SVG plot.
    Plot(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set params.alpha=0.2` (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `run.output`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Figure1,
    Figure2,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    preset: PresetArg,
    /// N = 50, d = 10, m = 200 instead of the desk-scale N = 10, d = 5, m = 50.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Override a config field of the preset (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the preset as a config file and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct BudgetArgs {
    /// Iteration count K.
    #[arg(long)]
    horizon: u64,
    /// Decision dimension d.
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    alpha: f64,
    /// Adjacency bound on gradient differences; required.
    #[arg(long)]
    delta: f64,
    /// Largest local smoothness constant.
    #[arg(long)]
    m_bar: f64,
    #[arg(long)]
    u_e: f64,
    #[arg(long)]
    u_w: f64,
    /// Noise decay rate.
    #[arg(long)]
    r: f64,
    /// Report feasibility against this budget.
    #[arg(long)]
    target: Option<f64>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    m_bar: f64,
    #[arg(long)]
    horizon: u64,
    #[arg(long)]
    u_w: f64,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    beta: f64,
    #[arg(long, default_value_t = 10.0)]
    rho: f64,
    /// Instance config; the desk-scale logistic benchmark when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    paper_scale: bool,
    /// Largest noise decay rate; taken from the config when absent.
    #[arg(long)]
    r_bar: Option<f64>,
    #[arg(long, requires = "gamma")]
    c_theta: Option<f64>,
    #[arg(long, requires = "c_theta")]
    gamma: Option<f64>,
    /// Exit nonzero unless every flag passes.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Trace or summary CSV files, one series each.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Column plotted against k.
    #[arg(long, default_value = "w_hat_mean")]
    column: String,
    /// Series labels, in input order; defaults to each file's `label` entry.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    #[arg(long, default_value = "")]
    title: String,
    #[arg(long, default_value = "optimality gap")]
    y_label: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run(a) => {
            let src = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
            let mut cfg = ExperimentConfig::parse(&src, &a.overrides)
                .with_context(|| format!("in {}", a.config.display()))?;
            if a.out.is_some() {
                cfg.run.output = a.out;
            }
            report(&run_experiment(&cfg)?);
        }
        Command::Sweep(a) => {
            let preset = match a.preset {
                PresetArg::Figure1 => Preset::Figure1,
                PresetArg::Figure2 => Preset::Figure2,
            };
            let scale = if a.paper_scale { Scale::Full } else { Scale::Desk };
            let base = preset.config(scale, a.seed).to_toml();
            let mut cfg = ExperimentConfig::parse(&base, &a.overrides)?;
            if a.out.is_some() {
                cfg.run.output = a.out;
            }
            if a.print_config {
                print!("{}", cfg.to_toml());
                return Ok(ExitCode::SUCCESS);
            }
            report(&run_experiment(&cfg)?);
        }
        Command::DpBudget(a) => {
            let inputs = BudgetInputs {
                horizon: a.horizon,
                dim: a.dim,
                alpha: a.alpha,
                delta: a.delta,
                m_bar: a.m_bar,
                u_e: a.u_e,
                u_w: a.u_w,
                r: a.r,
            };
            let r = PrivacyReport::evaluate(inputs, a.target)?;
            print!("{}", r.to_text());
            if !r.feasible {
                return Ok(ExitCode::from(2));
            }
        }
        Command::DpSelect(a) => {
            let s = select_dp_parameters(a.epsilon, a.delta, a.dim, a.m_bar, a.horizon, a.u_w)?;
            print!("{}", s.to_text());
            if !s.feasible {
                return Ok(ExitCode::from(2));
            }
        }
        Command::ValidateParams(a) => return validate(a),
        Command::Plot(a) => {
            let mut series = Vec::with_capacity(a.inputs.len());
            for (i, path) in a.inputs.iter().enumerate() {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let mut s = read_series(&text, &a.column).with_context(|| path.display().to_string())?;
                if let Some(l) = a.labels.get(i) {
                    s.label = l.clone();
                }
                series.push(s);
            }
            let axes = Axes {
                title: a.title,
                x_label: "iteration k".into(),
                y_label: a.y_label,
            };
            let svg = emit_plot(&series, &axes)?;
            fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
            println!("wrote {}", a.out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn validate(a: ValidateArgs) -> Result<ExitCode> {
    let scale = if a.paper_scale { Scale::Full } else { Scale::Desk };
    let cfg = match &a.config {
        Some(p) => ExperimentConfig::parse(&fs::read_to_string(p)?, &[]).with_context(|| p.display().to_string())?,
        None => Preset::Figure1.config(scale, 1),
    };
    let (problem, network) = build_instance(&cfg)?;
    let r_bar = a.r_bar.unwrap_or(cfg.noise.r);
    if !(0.0..1.0).contains(&r_bar) {
        bail!("r_bar must lie in [0, 1), got {r_bar}");
    }
    let params = AlgoParams {
        alpha: a.alpha,
        beta: a.beta,
        rho: a.rho,
        eta: cfg.eta_schedule(),
        noise: NoiseSchedule::uniform(network.node_count(), 1.0, r_bar)?,
        horizon: cfg.params.horizon,
    };
    let free = match (a.c_theta, a.gamma) {
        (Some(c_theta), Some(gamma)) => FreeConstants { c_theta, gamma },
        _ => default_free_constants(&network, a.alpha, a.beta),
    };
    let c = validate_parameters(&params, &network, &problem, free)?;
    println!(
        "instance: {} with N = {}, d = {}, r_bar = {}",
        problem.kind(),
        network.node_count(),
        problem.dim(),
        fmt_num(r_bar)
    );
    print!("{}", c.table());
    if a.strict && !c.flags.all() {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn report(out: &ExperimentOutput) {
    print!("{}", out.report);
    println!("config hash {}", out.config_hash);
    for p in &out.points {
        let last = p.summary.rows.last().expect("at least one row");
        println!(
            "{:<10} final W_hat mean {:.4e} [min {:.4e}, max {:.4e}] at k = {}",
            p.label, last.w_hat_mean, last.w_hat_min, last.w_hat_max, last.k
        );
    }
    if let Some(dir) = out.files.first().and_then(|f| f.parent()) {
        println!("wrote {} files to {}", out.files.len(), dir.display());
    }
}
