use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use riskmpc_cli::experiment::{EXIT_CONFIG, EXIT_OK, EXIT_SOLVER};
use riskmpc_cli::{oracle_check, parse_config, run_experiment, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "riskmpc", version, about = "Risk-sensitive MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write CSV artifacts.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of closed-loop paths per policy.
        #[arg(long)]
        paths: Option<usize>,
        /// CCP convergence tolerance (overrides `planner.ccp.eps`).
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Parse and check a config without solving anything.
    Validate { config: PathBuf },
    /// Compare CCP with the exact KKT solution on a quadratic instance.
    OracleCheck { config: PathBuf },
}

fn load(path: &PathBuf, o: &Overrides) -> Result<ExperimentConfig, ExitCode> {
    let mut cfg = parse_config(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_CONFIG as u8)
    })?;
    cfg.apply(o).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_CONFIG as u8)
    })?;
    Ok(cfg)
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            paths,
            tol,
        } => {
            let o = Overrides {
                output_dir: out,
                seed,
                n_paths: paths,
                tol,
            };
            let cfg = match load(&config, &o) {
                Ok(c) => c,
                Err(c) => return c,
            };
            match run_experiment(&cfg) {
                Ok(report) => {
                    for i in &report.issues {
                        eprintln!(
                            "{}: {}: {}",
                            if i.breakdown { "breakdown" } else { "failure" },
                            i.stage,
                            i.message
                        );
                    }
                    println!(
                        "wrote {} files to {}",
                        report.files.len(),
                        report.output_dir.display()
                    );
                    code(report.exit_code())
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    code(e.exit_code())
                }
            }
        }
        Command::Validate { config } => match load(&config, &Overrides::default()) {
            Ok(cfg) => match riskmpc::build_problem(&cfg.problem) {
                Ok(p) => {
                    println!(
                        "ok: horizon {}, {} states, {} inputs, {} policies, {} paths",
                        p.horizon(),
                        p.state_dim(),
                        p.input_dim(),
                        cfg.policies.len(),
                        cfg.n_paths
                    );
                    code(EXIT_OK)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    code(EXIT_CONFIG)
                }
            },
            Err(c) => c,
        },
        Command::OracleCheck { config } => {
            let cfg = match load(&config, &Overrides::default()) {
                Ok(c) => c,
                Err(c) => return c,
            };
            match oracle_check(&cfg) {
                Ok(rows) => {
                    let fmt = |v: Option<f64>| v.map_or("breakdown".to_string(), |x| format!("{x:.12}"));
                    println!("gamma,iterative_bound,kkt_bound,w_gap,agree");
                    for r in &rows {
                        println!(
                            "{},{},{},{},{}",
                            r.gamma,
                            fmt(r.iterative),
                            fmt(r.kkt),
                            r.w_gap.map_or(String::new(), |g| format!("{g:.3e}")),
                            r.agree
                        );
                    }
                    if rows.iter().all(|r| r.agree) {
                        code(EXIT_OK)
                    } else {
                        code(EXIT_SOLVER)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    code(e.exit_code())
                }
            }
        }
    }
}
