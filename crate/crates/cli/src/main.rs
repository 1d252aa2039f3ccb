use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use weakpoly::budget::AnnotationPolicy;
use weakpoly::em::EmConfig;
use weakpoly::evaluation::DEFAULT_IOU_THRESH;
use weakpoly::weak_labels::{AnnotationCost, WeakKind};
use weakpoly_cli::{
    budget_csv, cmd_budget, cmd_em, cmd_eval, cmd_synth, cmd_weaken, emit_json, load_costs, load_experiment_config,
    load_synth_config, write_new, BudgetArgs, CliError, EvalArgs, WeakenArgs,
};

#[derive(Parser)]
#[command(name = "weakpoly", version, about = "Weakly supervised polygon detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a TOML config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Replace polygon labels by weak labels; polygons go to a truth sidecar.
    Weaken {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        kind: WeakKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run an EM experiment from a TOML config.
    Em {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a saved model on a labelled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = EmConfig::default().eval_score_floor)]
        score_floor: f64,
        #[arg(long, default_value_t = DEFAULT_IOU_THRESH)]
        iou: f64,
        /// Metrics JSON path; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write every detection here.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Allocate an annotation budget across label forms.
    Budget {
        /// Policies to plan; all standard policies when omitted.
        #[arg(long, value_enum)]
        policy: Vec<PolicyArg>,
        /// Polygon share of the budget for `--policy mixed`.
        #[arg(long, default_value_t = 0.8)]
        poly_fraction: f64,
        /// Weak form for `--policy mixed`.
        #[arg(long, default_value = "tag")]
        weak_kind: WeakKind,
        #[arg(long, default_value_t = weakpoly::budget::DEFAULT_BUDGET_SECONDS)]
        budget: f64,
        /// TOML file overriding per-image costs in seconds.
        #[arg(long)]
        costs: Option<PathBuf>,
        #[arg(long, default_value_t = weakpoly::budget::DEFAULT_STRONG_BASE)]
        strong_base: u64,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write the cost table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Strong,
    EqualTime,
    EqualNumber,
    Mixed,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, force } => {
            let cfg = load_synth_config(&config)?;
            let hash = cmd_synth(&cfg, force)?;
            eprintln!("wrote {} ({hash})", cfg.output.display());
        }
        Command::Weaken {
            dataset,
            kind,
            seed,
            output,
            force,
        } => {
            let args = WeakenArgs {
                dataset,
                kind,
                rng_seed: seed,
                output,
            };
            let hash = cmd_weaken(&args, force)?;
            eprintln!("wrote {} ({hash})", args.output.display());
        }
        Command::Em { config, force } => {
            let cfg = load_experiment_config(&config)?;
            let hash = cmd_em(&cfg, force)?;
            eprintln!("wrote {} ({hash})", cfg.output_dir.display());
        }
        Command::Eval {
            model,
            dataset,
            score_floor,
            iou,
            output,
            detections,
            force,
        } => {
            let args = EvalArgs {
                model,
                dataset,
                score_floor,
                iou,
                output,
                detections,
            };
            let metrics = cmd_eval(&args, force)?;
            if args.output.is_none() {
                emit_json(None, &metrics, force)?;
            }
        }
        Command::Budget {
            policy,
            poly_fraction,
            weak_kind,
            budget,
            costs,
            strong_base,
            output,
            csv,
            force,
        } => {
            let mut args = BudgetArgs {
                budget,
                strong_base,
                costs: match costs {
                    Some(p) => load_costs(&p)?,
                    None => AnnotationCost::default(),
                },
                ..BudgetArgs::default()
            };
            if !policy.is_empty() {
                args.policies = policy
                    .iter()
                    .map(|p| match p {
                        PolicyArg::Strong => AnnotationPolicy::Strong,
                        PolicyArg::EqualTime => AnnotationPolicy::EqualTime,
                        PolicyArg::EqualNumber => AnnotationPolicy::EqualNumber,
                        PolicyArg::Mixed => AnnotationPolicy::MixedFraction {
                            poly_fraction,
                            weak_kind,
                        },
                    })
                    .collect();
            }
            let file = cmd_budget(&args)?;
            if let Some(p) = &csv {
                write_new(p, budget_csv(&file).as_bytes(), force)?;
            }
            emit_json(output.as_deref(), &file, force)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
