use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use headpurify::checkpoint::Checkpoint;
use headpurify::export::{aggregate, export_results, render};
use headpurify::runner::Grid;
use headpurify::{verify, Error, ExperimentConfig, Result, Runner};

/// Head-level purification experiments on a synthetic multi-domain benchmark.
#[derive(Parser)]
#[command(name = "headpurify", version)]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.alpha=0.3`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root; falls back to the config's `output_dir`.
    #[arg(long, env = "HEADPURIFY_OUT", global = true)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',', global = true)]
    seeds: Option<Vec<u64>>,
    /// Recompute runs that already have results.
    #[arg(long, global = true)]
    force: bool,
    /// No progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One leave-one-domain-out run per seed on `target`, with checkpoints.
    Train {
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Every held-out target per seed; per-target and mean accuracy.
    Lodo,
    /// Ablation grids.
    Ablate { grid: AblateGrid },
    /// Parameter sweeps.
    Sweep { param: SweepParam },
    /// Head-drop curves and rankings over the configured strategies.
    Headdrop,
    /// Dump tables from a trained model.
    Dump {
        what: DumpWhat,
        /// Read this checkpoint instead of training `target` under the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the built-in oracle and invariant suite.
    Verify,
    /// Aggregate grid or run directories over seeds.
    Export {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Write a merged-weights copy of a checkpoint.
    Merge { checkpoint: PathBuf },
    /// Write the synthetic dataset and its manifest for each seed.
    Data,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateGrid {
    Components,
    MmdRouting,
    Strategy,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Alpha,
}

#[derive(Clone, Copy, ValueEnum)]
enum DumpWhat {
    Gates,
}

fn print_grid(g: &Grid) {
    let mut order: Vec<String> = Vec::new();
    for c in &g.cells {
        if !order.contains(&c.variant) {
            order.push(c.variant.clone());
        }
    }
    print!("{}", render(&aggregate(&g.cells, &order)));
    println!("{}", g.dir.display());
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = &cli.seeds {
        let list: Vec<String> = s.iter().map(u64::to_string).collect();
        overrides.push(format!("seeds=[{}]", list.join(",")));
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    let mut runner = Runner::new(cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone()));
    runner.force = cli.force;
    runner.verbose = !cli.quiet;
    match cli.command {
        Command::Train { resume: None } => {
            for r in runner.train(&cfg)? {
                for row in &r.rows {
                    println!(
                        "seed {} target {}: {:.2}%",
                        row.seed,
                        row.target,
                        100.0 * row.accuracy
                    );
                }
                println!("{}", r.dir.display());
            }
        }
        Command::Train { resume: Some(path) } => {
            let r = runner.resume(&cfg, Checkpoint::load(&path)?)?;
            for row in &r.rows {
                println!(
                    "seed {} target {}: {:.2}%",
                    row.seed,
                    row.target,
                    100.0 * row.accuracy
                );
            }
            println!("{}", r.dir.display());
        }
        Command::Lodo => print_grid(&runner.lodo(&cfg)?),
        Command::Ablate {
            grid: AblateGrid::Components,
        } => print_grid(&runner.ablate_components(&cfg)?),
        Command::Ablate {
            grid: AblateGrid::MmdRouting,
        } => print_grid(&runner.ablate_mmd_routing(&cfg)?),
        Command::Ablate {
            grid: AblateGrid::Strategy,
        } => print_grid(&runner.ablate_strategy(&cfg)?),
        Command::Sweep {
            param: SweepParam::Alpha,
        } => print_grid(&runner.sweep_alpha(&cfg)?),
        Command::Headdrop => {
            let out = runner.headdrop(&cfg)?;
            println!("{}", out.dir.display());
        }
        Command::Dump {
            what: DumpWhat::Gates,
            checkpoint,
        } => {
            let path = match checkpoint {
                Some(p) => runner.dump_gates(&p)?,
                None => {
                    if !cfg.modules.dig {
                        return Err(Error::Config(
                            "modules.dig: the configured model has no gates".into(),
                        ));
                    }
                    let runs = runner.train(&cfg)?;
                    runs.iter()
                        .map(|r| r.dir.join(format!("gate_report-t{}.csv", cfg.target)))
                        .last()
                        .expect("at least one seed")
                }
            };
            print!(
                "{}",
                std::fs::read_to_string(&path).map_err(Error::io(&path))?
            );
            println!("{}", path.display());
        }
        Command::Verify => {
            let failed = verify::run_all(&mut |name, out| match out {
                Ok(msg) => println!("PASS {name}: {msg}"),
                Err(msg) => println!("FAIL {name}: {msg}"),
            });
            if failed > 0 {
                return Err(Error::Verify(failed));
            }
        }
        Command::Export { dirs } => {
            let e = export_results(&dirs, &runner.out, cli.force)?;
            print!("{}", e.table);
            println!("{}", e.dir.display());
        }
        Command::Merge { checkpoint } => println!("{}", runner.merge(&checkpoint)?.display()),
        Command::Data => {
            for d in runner.data(&cfg)? {
                println!("{}", d.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors are validation errors; clap would otherwise exit with 2.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
