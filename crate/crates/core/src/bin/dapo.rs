use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dapo_core::harness::{
    apply_settings, parse_settings, run_experiment, write_csv, EnvSpec, Environment, ExperimentConfig, Mode,
};
use dapo_core::learner::{DapoConfig, Variant};
use dapo_core::mdp::solve_optimal;
use dapo_core::verification::run_suite;

#[derive(Parser)]
#[command(
    name = "dapo",
    about = "Divergence-augmented policy optimization on tabular environments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write one metrics row per outer iteration as CSV.
    Run {
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        algo: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// `seq` or `conc`.
        #[arg(long)]
        mode: Option<String>,
        /// Flat `key = value` file applied before the flags above.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the optimal performance and policy of an environment.
    Oracle {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
    },
    /// Run the exact verification checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> dapo_core::Result<bool> {
    match cli.command {
        Command::Run {
            env,
            algo,
            seed,
            iters,
            out,
            mode,
            config,
        } => {
            let mut cfg = ExperimentConfig::default();
            if let Some(path) = config {
                apply_settings(&mut cfg, &parse_settings(&std::fs::read_to_string(path)?)?)?;
            }
            if let Some(algo) = algo {
                let variant: Variant = algo.parse()?;
                if variant != cfg.dapo.variant {
                    let keep = cfg.dapo.clone();
                    let defaults = DapoConfig::for_variant(variant);
                    let base_eta = DapoConfig::for_variant(keep.variant).one_over_eta;
                    cfg.dapo = DapoConfig {
                        variant,
                        // a variant-specific default follows the variant unless it was overridden
                        one_over_eta: if keep.one_over_eta == base_eta {
                            defaults.one_over_eta
                        } else {
                            keep.one_over_eta
                        },
                        ..keep
                    };
                }
            }
            if let Some(env) = env {
                cfg.env = env.parse()?;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(iters) = iters {
                cfg.dapo.iterations = iters;
            }
            if let Some(mode) = mode {
                cfg.mode = mode.parse::<Mode>()?;
            }
            let rows = run_experiment(&cfg)?;
            write_csv(&out, &rows)?;
            if let Some(last) = rows.last() {
                let j = last.exact_j.map_or("-".to_string(), |j| format!("{j:.6}"));
                println!(
                    "{} {} seed {}: {} iterations, final J {j}, wrote {}",
                    cfg.env,
                    cfg.dapo.variant,
                    cfg.seed,
                    last.iteration,
                    out.display()
                );
            }
            Ok(true)
        }
        Command::Oracle { env, gamma } => {
            let spec: EnvSpec = env.parse()?;
            let built = spec.build(gamma)?;
            let mdp = built.mdp().expect("synthetic environments are tabular");
            let opt = solve_optimal(mdp)?;
            println!(
                "env {spec}  states {}  actions {}  gamma {gamma}",
                mdp.num_states(),
                mdp.num_actions()
            );
            println!("J* = {:.10}", opt.performance);
            let names: &[&str] = match spec {
                EnvSpec::Grid { .. } | EnvSpec::Cliff { .. } => &["up", "right", "down", "left"],
                EnvSpec::Chain(_) => &["left", "right"],
                EnvSpec::Bandit(_) => &[],
            };
            for (s, a) in opt.actions.iter().enumerate() {
                let label = names.get(*a).map_or_else(|| a.to_string(), |n| n.to_string());
                println!("state {s:>3}: {label}  V* = {:.6}", opt.values[s]);
            }
            Ok(true)
        }
        Command::Verify { seed } => {
            let rows = run_suite(seed)?;
            let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
            for r in &rows {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("{status}  {:<width$}  {}", r.name, r.detail);
            }
            Ok(rows.iter().all(|r| r.passed))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
