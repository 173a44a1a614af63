mod config;

use clap::{Args, Parser, Subcommand};
use config::{DensityConfig, RunConfig, SimConfig};
use hiertmle::sim::{default_battery, run_study};
use hiertmle::{build_weights, fit_generic_density, run, Error, HierDataset, McConfig, RunOutput};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "hiertmle")]
#[command(about = "TMLE for community/individual hierarchical data under arbitrary single time-point interventions", long_about = None)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate counterfactual means / treatment effects from a dataset.
    Estimate(CommonArgs),
    /// Fit and serialize a conditional exposure density for later reuse.
    DensityFit(CommonArgs),
    /// Run a benchmark simulation study and write its metrics table.
    Simulate(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Configuration file (.toml or .json).
    #[arg(long = "config")]
    config: PathBuf,
    /// Override the config's random seed.
    #[arg(long = "seed")]
    seed: Option<u64>,
    /// Worker threads for replication studies (1 = sequential).
    #[arg(long = "threads", default_value_t = 1)]
    threads: usize,
    /// Output directory.
    #[arg(long = "out", default_value = ".")]
    out: PathBuf,
    #[arg(long = "verbose", default_value_t = false)]
    verbose: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::DensityFit(args) => cmd_density_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Csv(_) => 3,
        Error::Numeric(_) | Error::Json(_) => 4,
    }
}

fn ensure_out(dir: &Path) -> hiertmle::Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_text(dir: &Path, name: &str, text: &str) -> hiertmle::Result<()> {
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig, config_dir: &Path) -> hiertmle::Result<HierDataset> {
    let path = if cfg.data.is_relative() {
        config_dir.join(&cfg.data)
    } else {
        cfg.data.clone()
    };
    HierDataset::load_csv(path, cfg.roles())
}

fn cmd_estimate(args: &CommonArgs) -> hiertmle::Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if args.verbose {
        cfg.verbose = true;
    }
    ensure_out(&args.out)?;
    let config_dir = args.config.parent().unwrap_or(Path::new("."));

    let ds = load_dataset(&cfg, config_dir)?;
    let (obs_policy, user_obs) = cfg.obs_policy(&ds)?;
    let (comm_policy, user_comm) = cfg.community_policy(&ds)?;
    let weights = build_weights(&ds, obs_policy, comm_policy, user_obs, user_comm)?;
    let est_cfg = cfg.estimation_config(&ds)?;
    let strategy = cfg.strategy();

    if cfg.verbose {
        eprintln!(
            "estimate: {} rows, {} communities, strategy {:?}",
            ds.n_obs(),
            ds.n_communities(),
            strategy.step
        );
    }

    let output = run(&ds, &weights, &strategy, &est_cfg)?;
    let resolved = serde_json::to_string_pretty(&cfg.resolved())?;
    write_text(&args.out, "config.resolved.json", &resolved)?;
    write_text(&args.out, "report.json", &output.to_json()?)?;

    print_summary(&output);
    Ok(())
}

fn print_triple(label: &str, est: &hiertmle::tmle::EstimateTriple, vars: &hiertmle::tmle::EstimateTriple, cis: &hiertmle::tmle::CiTriple) {
    println!("{label}:");
    println!(
        "  tmle  {:>12.6}  var {:>12.6e}  ci [{:.6}, {:.6}]",
        est.tmle, vars.tmle, cis.tmle[0], cis.tmle[1]
    );
    println!(
        "  iptw  {:>12.6}  var {:>12.6e}  ci [{:.6}, {:.6}]",
        est.iptw, vars.iptw, cis.iptw[0], cis.iptw[1]
    );
    println!(
        "  gcomp {:>12.6}  var {:>12.6e}  ci [{:.6}, {:.6}]",
        est.gcomp, vars.gcomp, cis.gcomp[0], cis.gcomp[1]
    );
}

fn print_summary(output: &RunOutput) {
    match output {
        RunOutput::Single { report } => {
            println!(
                "strategy: {}   units: {}   outcome bounds: [{:.6}, {:.6}]",
                report.strategy,
                report.n_units,
                report.outcome_bounds[0],
                report.outcome_bounds[1]
            );
            for ir in &report.interventions {
                print_triple(
                    &format!("intervention {}", ir.name),
                    &ir.estimates,
                    &ir.vars,
                    &ir.cis,
                );
            }
            if let Some(ate) = &report.ate {
                print_triple(&format!("ate ({})", ate.name), &ate.estimates, &ate.vars, &ate.cis);
            }
        }
        RunOutput::PerCommunity { output } => {
            println!(
                "stratified analysis over {} communities",
                output.communities.len()
            );
            for block in &output.pooled {
                println!(
                    "pooled {}: tmle {:.6}  iptw {:.6}  gcomp {:.6}",
                    block.name, block.estimates.tmle, block.estimates.iptw, block.estimates.gcomp
                );
            }
            if let Some(ate) = &output.pooled_ate {
                println!(
                    "pooled ate: tmle {:.6}  iptw {:.6}  gcomp {:.6}",
                    ate.estimates.tmle, ate.estimates.iptw, ate.estimates.gcomp
                );
            }
        }
    }
}

fn cmd_density_fit(args: &CommonArgs) -> hiertmle::Result<()> {
    let mut cfg = DensityConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    ensure_out(&args.out)?;
    let config_dir = args.config.parent().unwrap_or(Path::new("."));
    let path = if cfg.data.is_relative() {
        config_dir.join(&cfg.data)
    } else {
        cfg.data.clone()
    };
    let ds = HierDataset::load_csv(path, cfg.roles())?;
    let gform = cfg
        .gform
        .as_ref()
        .map(|f| hiertmle::Formula::parse(f))
        .transpose()?;
    let f_gstar = cfg
        .f_gstar
        .as_ref()
        .map(|c| c.resolve("gstar", &ds))
        .transpose()?;
    let mc = McConfig {
        n_sims: cfg.n_mc_sims.unwrap_or(1),
        seed: cfg.seed.unwrap_or(0),
    };
    let fd = fit_generic_density(
        &ds,
        f_gstar.as_ref(),
        gform.as_ref(),
        &cfg.binning(),
        cfg.lbound.unwrap_or(hiertmle::density::DEFAULT_LBOUND),
        &mc,
    )?;
    let resolved = serde_json::to_string_pretty(&cfg.resolved())?;
    write_text(&args.out, "config.resolved.json", &resolved)?;
    write_text(&args.out, "density.json", &fd.to_json()?)?;
    println!(
        "fitted density for {:?}: {} models, per factor {:?}",
        fd.anodes,
        fd.n_models(),
        fd.models_per_factor()
    );
    Ok(())
}

fn cmd_simulate(args: &CommonArgs) -> hiertmle::Result<()> {
    let mut cfg = SimConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    ensure_out(&args.out)?;
    if args.threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.threads)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    let dgp = cfg.dgp();
    let battery = cfg
        .battery
        .clone()
        .unwrap_or_else(|| default_battery(cfg.study));
    let result = run_study(
        &dgp,
        cfg.replications,
        &battery,
        cfg.truth,
        cfg.calibration_size.unwrap_or(20_000),
        args.threads != 1,
    )?;

    let resolved = serde_json::to_string_pretty(&cfg.resolved())?;
    write_text(&args.out, "config.resolved.json", &resolved)?;
    write_text(&args.out, "metrics.txt", &result.metrics.render_text())?;
    write_text(
        &args.out,
        "metrics.json",
        &serde_json::to_string_pretty(&result.metrics)?,
    )?;
    write_text(&args.out, "reps.csv", &result.reps_csv())?;
    print!("{}", result.metrics.render_text());
    Ok(())
}
