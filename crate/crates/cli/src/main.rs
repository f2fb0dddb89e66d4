//! `asg`: command-line front end.
//!
//! Every flag can also be set through an `ASG_`-prefixed environment variable
//! (`ASG_TAU`, `ASG_STRATEGY`, ...). Precedence: flag, then environment, then
//! the `--config` file, then built-in defaults.

use std::path::PathBuf;
use std::process::ExitCode;

use asg_core::checks::CheckPlan;
use asg_core::pairing::Scenario3Strategy;
use asg_core::pipeline::{self, CommandOutput, PipelineError, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "asg",
    version,
    about = "Report parsing, region-sentence alignment and loss evaluation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, env = "ASG_CONFIG")]
    config: Option<PathBuf>,
    /// Similarity and soft-label temperature.
    #[arg(long, global = true, env = "ASG_TAU")]
    tau: Option<f64>,
    /// Weight of soft labels in the mixed targets.
    #[arg(long, global = true, env = "ASG_ALPHA")]
    alpha: Option<f64>,
    /// Handling of regions that map to several detector classes.
    #[arg(long, global = true, env = "ASG_STRATEGY")]
    strategy: Option<Strategy>,
    #[arg(long, global = true, env = "ASG_SEED")]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true, env = "ASG_OUT", default_value = "asg-out")]
    out: PathBuf,
    /// Do not print the run report to stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Merge,
    Split,
}

impl From<Strategy> for Scenario3Strategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Merge => Scenario3Strategy::MergeBBox,
            Strategy::Split => Scenario3Strategy::SplitSentence,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Extract triplets and tag vectors from reports.
    Parse {
        #[arg(long, env = "ASG_REPORTS")]
        reports: Option<PathBuf>,
        #[arg(long, env = "ASG_LEXICON")]
        lexicon: Option<PathBuf>,
        #[arg(long, env = "ASG_ONTOLOGY")]
        ontology: Option<PathBuf>,
    },
    /// Build region-sentence pairs from triplets and detector boxes.
    Align {
        #[arg(long, env = "ASG_REPORTS")]
        reports: Option<PathBuf>,
        /// Output of `parse`; the reports are parsed again when omitted.
        #[arg(long, env = "ASG_TRIPLETS")]
        triplets: Option<PathBuf>,
        #[arg(long, env = "ASG_DETECTIONS")]
        detections: Option<PathBuf>,
        #[arg(long, env = "ASG_ONTOLOGY")]
        ontology: Option<PathBuf>,
        #[arg(long, env = "ASG_LEXICON")]
        lexicon: Option<PathBuf>,
    },
    /// Evaluate the four loss terms on precomputed embeddings.
    LossEval {
        #[arg(long, env = "ASG_EMBEDDINGS")]
        embeddings: Option<PathBuf>,
        #[arg(long, env = "ASG_TAGS")]
        tags: Option<PathBuf>,
        /// Pairs file; when given its length must match the region embeddings.
        #[arg(long, env = "ASG_PAIRS")]
        pairs: Option<PathBuf>,
    },
    /// Run the seeded invariant and gradient checks.
    Check {
        #[arg(long, default_value_t = CheckPlan::default().identities)]
        identities: usize,
        #[arg(long, default_value_t = CheckPlan::default().gradients)]
        gradients: usize,
        #[arg(long, default_value_t = CheckPlan::default().boxes)]
        boxes: usize,
    },
    /// Run parse, align and loss evaluation on a synthetic corpus.
    Demo,
    /// Validate an ontology table and optionally a lexicon against it.
    ValidateOntology {
        #[arg(long, env = "ASG_ONTOLOGY")]
        ontology: Option<PathBuf>,
        #[arg(long, env = "ASG_LEXICON")]
        lexicon: Option<PathBuf>,
    },
}

fn set(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

fn build_config(common: &Common) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(t) = common.tau {
        cfg.tau = t;
    }
    if let Some(a) = common.alpha {
        cfg.alpha = a;
    }
    if let Some(s) = common.strategy {
        cfg.strategy = s.into();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<CommandOutput, PipelineError> {
    let mut cfg = build_config(&cli.common)?;
    let p = &mut cfg.paths;
    match cli.command {
        Command::Parse {
            reports,
            lexicon,
            ontology,
        } => {
            set(&mut p.reports, reports);
            set(&mut p.lexicon, lexicon);
            set(&mut p.ontology, ontology);
            pipeline::cmd_parse(&cfg)
        }
        Command::Align {
            reports,
            triplets,
            detections,
            ontology,
            lexicon,
        } => {
            set(&mut p.reports, reports);
            set(&mut p.triplets, triplets);
            set(&mut p.detections, detections);
            set(&mut p.ontology, ontology);
            set(&mut p.lexicon, lexicon);
            pipeline::cmd_align(&cfg)
        }
        Command::LossEval {
            embeddings,
            tags,
            pairs,
        } => {
            set(&mut p.embeddings, embeddings);
            set(&mut p.tags, tags);
            set(&mut p.pairs, pairs);
            pipeline::cmd_loss_eval(&cfg)
        }
        Command::Check {
            identities,
            gradients,
            boxes,
        } => pipeline::cmd_check(
            &cfg,
            CheckPlan {
                identities,
                gradients,
                boxes,
            },
        ),
        Command::Demo => pipeline::cmd_demo(&cfg),
        Command::ValidateOntology { ontology, lexicon } => {
            set(&mut p.ontology, ontology);
            set(&mut p.lexicon, lexicon);
            pipeline::cmd_validate_ontology(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_dir = cli.common.out.clone();
    let quiet = cli.common.quiet;
    match run(cli) {
        Ok(output) => {
            if let Err(e) = output.write_to(&out_dir) {
                eprintln!(
                    "{}",
                    serde_json::json!({
                        "error": "Io",
                        "message": e.to_string(),
                        "path": out_dir.display().to_string(),
                    })
                );
                return ExitCode::from(1);
            }
            if !quiet {
                println!("{}", output.report.to_json_pretty());
            }
            for c in output.report.checks.iter().filter(|c| !c.passed) {
                eprintln!(
                    "check {} failed: max error {:e} > {:e}",
                    c.name, c.max_error, c.threshold
                );
            }
            ExitCode::from(output.report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("{}", e.to_record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
