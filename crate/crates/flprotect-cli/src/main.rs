//! Command-line driver: Monte Carlo simulation, the lower-bound pipeline,
//! the oracle verification battery, and parameter sweeps, all emitting CSV.

mod emit;
mod overrides;
mod scripts;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use flprotect::adversary::check_stability;
use flprotect::analysis::{perfect_eavesdrop_protection, protection_lower_bound};
use flprotect::config::{InitSpec, RunConfig, RunMode, SurrogateSpec};
use flprotect::experiments::{
    brute_force_protection, monte_carlo_protection, protection_sweep, Dynamics, Scenario,
    ScriptSet, SweepParameter,
};
use flprotect::fl::ProtocolKind;
use flprotect::verify;

use emit::{float, opt_float, CsvDoc};
use overrides::Overrides;

/// Environment variable capping trial concurrency.
const THREADS_ENV: &str = "FLPROTECT_THREADS";

#[derive(Parser)]
#[command(
    name = "flprotect",
    about = "Protection of federated-learning clients against an eavesdropping adversary",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo protection estimate, one CSV row per round.
    Simulate(RunArgs),
    /// Closed-form lower-bound pipeline on scripted sequences.
    Bound(RunArgs),
    /// Oracle cross-check battery; nonzero exit if any check fails.
    Verify(VerifyArgs),
    /// Tail protection across a parameter grid.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Key/value configuration file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Uplink protocol: flip (increments) or flop (full models).
    #[arg(long)]
    protocol: Option<String>,
    /// Total number of clients.
    #[arg(long = "N")]
    n_total: Option<usize>,
    /// Clients sampled per round.
    #[arg(long = "n")]
    n_sampled: Option<usize>,
    /// Participation probability override (otherwise n/N).
    #[arg(long)]
    p: Option<f64>,
    /// Interception probability.
    #[arg(long)]
    gamma: Option<f64>,
    /// Local learning rate.
    #[arg(long)]
    eta: Option<f64>,
    /// Local gradient-descent steps per round.
    #[arg(long)]
    steps: Option<usize>,
    /// Number of global rounds.
    #[arg(long)]
    horizon: Option<usize>,
    /// Model dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Surrogate transition matrix M = m * I.
    #[arg(long = "M-scalar")]
    m_scalar: Option<f64>,
    /// Root seed (fixed default keeps unseeded runs reproducible).
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Force every interception to succeed (perfect eavesdropping).
    #[arg(long = "force-mu-one", num_args = 0..=1, default_missing_value = "true")]
    force_mu_one: Option<bool>,
    /// Rounds in the liminf tail window (default: last quarter).
    #[arg(long = "tail-window")]
    tail_window: Option<usize>,
    /// Output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Innovation script CSV (one vector per row, d columns).
    #[arg(long = "script-xi")]
    script_xi: Option<PathBuf>,
    /// Server-client mismatch script CSV.
    #[arg(long = "script-zeta")]
    script_zeta: Option<PathBuf>,
    /// Adversary mismatch-estimate script CSV.
    #[arg(long = "script-zeta-hat")]
    script_zeta_hat: Option<PathBuf>,
    /// Dynamics mode: scripted or full_fl.
    #[arg(long)]
    mode: Option<String>,
    /// Attach the exact enumeration column (scripted, horizon <= 14).
    #[arg(long)]
    exact: bool,
    /// Initial client model, constant across coordinates.
    #[arg(long = "x-c0")]
    x_c0: Option<f64>,
    /// Initial adversary estimate, constant across coordinates.
    #[arg(long = "x-a0")]
    x_a0: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Emit the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Swept parameter: p, gamma, or m_scale.
    #[arg(long)]
    param: String,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    let threads = threads_from_env()?;
    match cli.command {
        Command::Simulate(args) => {
            cmd_simulate(&args, threads)?;
            Ok(0)
        }
        Command::Bound(args) => {
            cmd_bound(&args)?;
            Ok(0)
        }
        Command::Verify(args) => cmd_verify(&args, threads),
        Command::Sweep(args) => {
            cmd_sweep(&args, threads)?;
            Ok(0)
        }
    }
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{raw}`"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be at least 1");
            }
            Ok(Some(n))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(format!("reading {THREADS_ENV}")),
    }
}

fn flag_overrides(args: &RunArgs) -> Result<Overrides> {
    Ok(Overrides {
        protocol: args
            .protocol
            .as_deref()
            .map(str::parse)
            .transpose()
            .map_err(anyhow::Error::from)?,
        mode: args
            .mode
            .as_deref()
            .map(str::parse)
            .transpose()
            .map_err(anyhow::Error::from)?,
        n_total: args.n_total,
        n_sampled: args.n_sampled,
        p: args.p,
        gamma: args.gamma,
        eta: args.eta,
        steps: args.steps,
        horizon: args.horizon,
        dimension: args.d,
        surrogate: args.m_scalar.map(SurrogateSpec::Scalar),
        seed: args.seed,
        trials: args.trials,
        force_mu_one: args.force_mu_one,
        tail_window: args.tail_window,
        x_c0: args.x_c0.map(InitSpec::Constant),
        x_a0: args.x_a0.map(InitSpec::Constant),
        ..Default::default()
    })
}

fn build_config(args: &RunArgs) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &args.config {
        overrides::parse_config_file(path)?.apply(&mut config);
    }
    flag_overrides(args)?.apply(&mut config);
    if args.script_xi.is_some() || args.script_zeta.is_some() || args.script_zeta_hat.is_some() {
        if config.mode == RunMode::FullFl {
            bail!("script files require scripted mode, but mode = full_fl");
        }
        config.mode = RunMode::Scripted;
    }
    config.validate()?;
    Ok(config)
}

fn build_scenario(args: &RunArgs, config: &RunConfig) -> Result<Scenario> {
    let scripts = if config.mode == RunMode::Scripted {
        let d = config.dimension;
        let mut set = ScriptSet::zeros(d, config.horizon);
        if let Some(path) = &args.script_xi {
            set.xi = scripts::load_script(path, d)?;
        }
        if let Some(path) = &args.script_zeta {
            set.zeta = scripts::load_script(path, d)?;
        }
        if let Some(path) = &args.script_zeta_hat {
            set.zeta_hat = scripts::load_script(path, d)?;
        }
        Some(set)
    } else {
        None
    };
    Ok(Scenario::from_config(config, scripts)?)
}

/// Lower-bound series for scripted FLIP scenarios; `None` (with a warning on
/// stderr) when the pipeline does not apply.
fn bound_series_if_applicable(
    scenario: &Scenario,
) -> Option<flprotect::analysis::BoundSeries> {
    let script = match &scenario.dynamics {
        Dynamics::Scripted(s) => s,
        Dynamics::FullFl(_) => return None,
    };
    if scenario.protocol != ProtocolKind::Flip || scenario.p <= 0.0 {
        return None;
    }
    let gamma = if scenario.force_mu_one { 1.0 } else { scenario.gamma };
    match protection_lower_bound(
        &script.xi,
        &script.zeta,
        &script.zeta_hat,
        scenario.p,
        gamma,
        &scenario.m,
        &scenario.x_c0,
        &scenario.x_a0,
        scenario.horizon,
        None,
    ) {
        Ok(series) => Some(series),
        Err(err) => {
            eprintln!("warning: bound pipeline skipped: {err}");
            None
        }
    }
}

fn cmd_simulate(args: &RunArgs, threads: Option<usize>) -> Result<()> {
    let config = build_config(args)?;
    let scenario = build_scenario(args, &config)?;
    let estimate = monte_carlo_protection(&scenario, config.trials, config.seed, threads)?;

    let exact = if args.exact {
        Some(brute_force_protection(&scenario)?)
    } else {
        None
    };
    let bound = bound_series_if_applicable(&scenario);
    let gamma = if scenario.force_mu_one { 1.0 } else { scenario.gamma };
    let eq13 = if (scenario.force_mu_one || scenario.gamma >= 1.0)
        && scenario.protocol == ProtocolKind::Flip
    {
        if let Dynamics::Scripted(script) = &scenario.dynamics {
            let r: Vec<_> = (0..scenario.horizon)
                .map(|t| &script.zeta[t] - &script.zeta_hat[t])
                .collect();
            Some(
                perfect_eavesdrop_protection(
                    &r,
                    scenario.p,
                    &scenario.x_c0,
                    &scenario.x_a0,
                    scenario.horizon,
                    config.tail_window,
                )?
                .values,
            )
        } else {
            None
        }
    } else {
        None
    };
    let stability = check_stability(&scenario.m, scenario.p, gamma);

    let mut doc = CsvDoc::new("simulate");
    doc.comment(&format!(
        "protocol={} p={} gamma={} horizon={} trials={} seed={} d={}",
        scenario.protocol,
        float(scenario.p),
        float(scenario.gamma),
        scenario.horizon,
        estimate.trials,
        config.seed,
        scenario.dimension()
    ));
    doc.header(&[
        "t",
        "mc_mean",
        "mc_stderr",
        "exact",
        "bound",
        "eq13",
        "lemma1_satisfied",
    ]);
    for t in 0..=scenario.horizon {
        doc.row(&[
            t.to_string(),
            float(estimate.mean[t]),
            float(estimate.stderr[t]),
            opt_float(exact.as_ref().map(|e| e[t])),
            opt_float(bound.as_ref().map(|b| b.bound[t])),
            opt_float(eq13.as_ref().map(|e| e[t])),
            stability.satisfied.to_string(),
        ]);
    }
    doc.finish(args.out.as_deref())
}

fn cmd_bound(args: &RunArgs) -> Result<()> {
    let config = build_config(args)?;
    if config.mode != RunMode::Scripted {
        bail!("bound requires scripted mode");
    }
    if config.protocol != ProtocolKind::Flip {
        bail!("the lower-bound pipeline applies to increment uplinks (protocol = flip)");
    }
    let scenario = build_scenario(args, &config)?;
    let script = match &scenario.dynamics {
        Dynamics::Scripted(s) => s.clone(),
        Dynamics::FullFl(_) => unreachable!("validated above"),
    };
    let gamma = if scenario.force_mu_one { 1.0 } else { scenario.gamma };
    let series = protection_lower_bound(
        &script.xi,
        &script.zeta,
        &script.zeta_hat,
        scenario.p,
        gamma,
        &scenario.m,
        &scenario.x_c0,
        &scenario.x_a0,
        scenario.horizon,
        config.tail_window,
    )?;

    let mut doc = CsvDoc::new("bound");
    if !series.stability.satisfied {
        doc.comment(&format!(
            "warning: surrogate spectral radius {} exceeds the stability threshold {}",
            float(series.stability.spectral_radius_m),
            float(series.stability.threshold)
        ));
    }
    if series.resolvent_condition > flprotect::analysis::CONDITION_WARN_THRESHOLD {
        doc.comment(&format!(
            "warning: mean-drift resolvent condition number {:.3e}; drift values are unreliable",
            series.resolvent_condition
        ));
    }
    doc.header(&[
        "t",
        "ell_norm",
        "h_norm",
        "s_norm",
        "g_norm",
        "var",
        "mean_sq",
        "bound",
        "bound_stationary",
        "lemma1_satisfied",
    ]);
    for t in 0..=scenario.horizon {
        let round = (t < scenario.horizon).then_some(t);
        doc.row(&[
            t.to_string(),
            float(series.ell[t].norm()),
            opt_float(round.map(|k| series.h[k].norm())),
            opt_float(round.map(|k| series.s[k].norm())),
            opt_float(round.map(|k| series.g[k].norm())),
            float(series.var[t]),
            float(series.mean_error[t].norm_squared()),
            float(series.bound[t]),
            opt_float(round.map(|k| series.bound_stationary[k])),
            series.stability.satisfied.to_string(),
        ]);
    }
    doc.comment(&format!(
        "tail_window={} tail_min_bound={} tail_min_stationary={}",
        series.tail_window,
        float(series.tail_min_bound),
        float(series.tail_min_stationary)
    ));
    doc.finish(args.out.as_deref())
}

fn cmd_verify(args: &VerifyArgs, threads: Option<usize>) -> Result<i32> {
    let report = verify::run_all(threads);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for check in &report.checks {
            let status = if check.passed { "PASS" } else { "FAIL" };
            println!("{status} {}: {} ({} ms)", check.name, check.detail, check.millis);
        }
        println!(
            "{}: {} of {} checks passed",
            if report.all_passed { "OK" } else { "FAILED" },
            report.checks.iter().filter(|c| c.passed).count(),
            report.checks.len()
        );
    }
    Ok(if report.all_passed { 0 } else { 1 })
}

fn cmd_sweep(args: &SweepArgs, threads: Option<usize>) -> Result<()> {
    let config = build_config(&args.run)?;
    let scenario = build_scenario(&args.run, &config)?;
    let parameter: SweepParameter = args.param.parse()?;
    let rows = protection_sweep(
        &scenario,
        parameter,
        &args.grid,
        config.trials,
        config.seed,
        config.tail_window,
        threads,
    )?;
    let mut doc = CsvDoc::new("sweep");
    doc.comment(&format!(
        "param={} base: protocol={} p={} gamma={} horizon={} trials={} seed={}",
        args.param,
        scenario.protocol,
        float(scenario.p),
        float(scenario.gamma),
        scenario.horizon,
        config.trials,
        config.seed
    ));
    doc.header(&[
        "param",
        "value",
        "tail_mc_mean",
        "tail_mc_stderr",
        "tail_bound",
        "lemma1_satisfied",
    ]);
    for row in &rows {
        doc.row(&[
            args.param.clone(),
            float(row.value),
            float(row.tail_mean),
            float(row.tail_stderr),
            opt_float(row.tail_bound),
            row.stability_satisfied.to_string(),
        ]);
    }
    doc.finish(args.run.out.as_deref())
}
