use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wagma::harness::{
    self, exit_code, format_comparison, HarnessError, ModeSpec, RunConfig, SweepAxis,
    VerifyOptions, OUTPUT_ROOT_ENV,
};
use wagma::MaskRule;

#[derive(Parser)]
#[command(name = "wagma", version, about = "Group model averaging SGD over a simulated cluster")]
struct Cli {
    /// Directory that receives run artifacts.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with one config and write metrics.csv and manifest.json.
    Run {
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the same config under several algorithms and print a table.
    Compare {
        config: PathBuf,
        /// Comma-separated modes, each `name` or `name:tau` (tau may be `inf`).
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the cartesian product of config variations.
    Sweep {
        config: PathBuf,
        /// `dotted.key=v1,v2,...`; repeat for more axes.
        #[arg(long, required = true)]
        vary: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in correctness checks.
    Verify {
        #[arg(long, value_enum, default_value_t = RuleArg::Rotating)]
        mask_rule: RuleArg,
        /// Randomized collective schedules to check.
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_corruption: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Rotating,
    Literal,
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<RunConfig, HarnessError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let root = cli.output_root;
    match cli.command {
        Command::Run { config, seed } => {
            let cfg = load(&config, seed)?;
            let out = harness::execute(&cfg, &root)?;
            let m = &out.manifest;
            println!("run:            {}", out.dir.display());
            println!("rows:           {}", m.rows);
            println!("sim time (ms):  {:.3}", m.end_time_ms);
            println!("final loss:     {:.6e}", m.final_loss);
            println!("grad norm^2:    {:.6e}", m.final_grad_norm_sq);
            if let Some(acc) = m.final_accuracy {
                println!("accuracy:       {acc:.4}");
            }
            println!("max staleness:  {}", m.max_staleness);
            println!("metrics sha256: {}", m.metrics_sha256);
        }
        Command::Compare { config, modes, seed } => {
            let cfg = load(&config, seed)?;
            let modes = modes.iter().map(|m| ModeSpec::parse(m)).collect::<Result<Vec<_>, _>>()?;
            let rows = harness::compare(&cfg, &modes)?;
            print!("{}", format_comparison(&rows));
        }
        Command::Sweep { config, vary, seed } => {
            let cfg = load(&config, seed)?;
            let axes = vary.iter().map(|v| SweepAxis::parse(v)).collect::<Result<Vec<_>, _>>()?;
            for out in harness::sweep(&cfg, &axes, &root)? {
                println!(
                    "{}  loss {:.6e}  sim {:.1} ms",
                    out.dir.display(),
                    out.manifest.final_loss,
                    out.manifest.end_time_ms
                );
            }
        }
        Command::Verify {
            mask_rule,
            trials,
            seed,
            inject_corruption,
        } => {
            let report = harness::verify(&VerifyOptions {
                mask_rule: match mask_rule {
                    RuleArg::Rotating => MaskRule::Rotating,
                    RuleArg::Literal => MaskRule::Literal,
                },
                inject_corruption,
                trials,
                seed,
            });
            for check in &report.checks {
                println!("{check}");
            }
            if !report.passed() {
                return Err(HarnessError::VerifyFailed(report.failures()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit_code::SUCCESS as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
