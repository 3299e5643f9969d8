//! `fbgs`: run the feedback-guided synthesis experiment stage by stage or end to end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fbgs::checkpoint::{load_classifier, load_diffusion, save_classifier, save_diffusion};
use fbgs::config::ExperimentConfig;
use fbgs::criteria::CriterionKind;
use fbgs::data::Split;
use fbgs::error::{Error, ErrorKind, Result};
use fbgs::pipeline::{self, Artifacts, RunOptions, Trained};

#[derive(Parser, Debug)]
#[command(name = "fbgs", version, about = "Classifier-feedback guided diffusion sampling for imbalanced data")]
struct Cli {
    /// Experiment config (TOML). The built-in toy configuration when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true, env = "FBGS_OUT")]
    out: Option<PathBuf>,
    /// Recompute stages whose outputs already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for sampling.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate train, validation and test CSVs.
    GenData,
    /// Train the denoiser and instance encoder.
    TrainDiffusion,
    /// Train the real-only classifier and fit its embedding statistics.
    TrainClassifier,
    /// Draw synthetic samples.
    Sample(SampleArgs),
    /// Retrain the classifier on real plus synthetic data.
    Retrain {
        /// Sample set under `samples/`.
        #[arg(long, default_value = "guided")]
        samples: String,
    },
    /// Score a classifier checkpoint or a predictions file on the test set.
    Evaluate {
        #[arg(long, conflicts_with = "model")]
        predictions: Option<PathBuf>,
        /// Classifier checkpoint; the retrained one when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run every stage and write the report.
    Run,
    /// Sample the γ×ω grid.
    Sweep,
    /// Run the ablation matrix.
    Ablate,
    /// Print the resolved config.
    ShowConfig,
}

#[derive(clap::Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    /// loss, entropy, hardness or none.
    #[arg(long)]
    criterion: Option<String>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Samples per class instead of the synthesis plan.
    #[arg(long)]
    per_class: Option<usize>,
    /// Output name under `samples/`.
    #[arg(long, default_value = "guided")]
    name: String,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sample(cfg: &ExperimentConfig, art: &Artifacts, args: &SampleArgs, jobs: usize) -> Result<()> {
    let mut g = cfg.guidance.clone();
    if let Some(v) = args.gamma {
        g.gamma = v;
    }
    if let Some(v) = args.omega {
        g.omega = v;
    }
    if let Some(v) = args.dropout {
        g.dropout_p = v;
    }
    if let Some(c) = &args.criterion {
        g.criterion = match c.as_str() {
            "none" => None,
            s => Some(CriterionKind::parse(s).ok_or_else(|| Error::Config(format!("unknown criterion `{s}`")))?),
        };
    }
    g.validate().map_err(|e| Error::Config(e.to_string()))?;
    let train = pipeline::load_dataset(&art.split(Split::Train), Split::Train)?;
    let (den, enc) = load_diffusion(&art.diffusion())?;
    let clf = if g.feedback_active() { Some(load_classifier(&art.classifier())?) } else { None };
    let stats = if g.feedback_active() && g.criterion == Some(CriterionKind::Hardness) {
        Some(pipeline::load_stats(&art.stats())?)
    } else {
        None
    };
    let requests = match args.per_class {
        Some(n) => pipeline::per_class_requests(train.classes, n),
        None => {
            let plan = pipeline::make_plan(cfg, &train)?;
            pipeline::save_plan(art, &plan)?;
            plan.requests
        }
    };
    let models = Trained { denoiser: &den, encoder: &enc, classifier: clf.as_ref(), stats: stats.as_ref() };
    let set = pipeline::sample_requests(cfg, &g, &requests, &train, &models, jobs)?;
    let path = art.samples(&args.name);
    pipeline::save_samples(&path, &set)?;
    println!("wrote {} samples to {}", set.len(), path.display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let art = Artifacts::new(&cfg.out_dir);
    let opts = RunOptions { force: cli.force, jobs: cli.jobs };
    match &cli.cmd {
        Cmd::ShowConfig => print!("{}", cfg.to_toml()),
        Cmd::GenData => {
            let s = pipeline::generate_data(&cfg)?;
            pipeline::save_splits(&art, &s)?;
            println!(
                "train {} (groups {:?}), validation {}, test {}",
                s.train.len(),
                s.train.group_counts(),
                s.validation.len(),
                s.test.len()
            );
        }
        Cmd::TrainDiffusion => {
            let train = pipeline::load_dataset(&art.split(Split::Train), Split::Train)?;
            let (d, e) = pipeline::fit_diffusion(&cfg, &train)?;
            save_diffusion(&art.diffusion(), &d, &e)?;
            println!("wrote {}", art.diffusion().display());
        }
        Cmd::TrainClassifier => {
            let train = pipeline::load_dataset(&art.split(Split::Train), Split::Train)?;
            let clf = pipeline::fit_classifier(&cfg, &train)?;
            save_classifier(&art.classifier(), &clf)?;
            pipeline::save_stats(&art.stats(), &pipeline::fit_stats(&cfg, &clf, &train)?)?;
            println!("wrote {}", art.classifier().display());
        }
        Cmd::Sample(args) => sample(&cfg, &art, args, cli.jobs)?,
        Cmd::Retrain { samples } => {
            let train = pipeline::load_dataset(&art.split(Split::Train), Split::Train)?;
            let set = pipeline::load_samples(&art.samples(samples))?;
            let clf = pipeline::fit_retrained(&cfg, &train, &pipeline::synthetic_dataset(&cfg, &set, &train))?;
            save_classifier(&art.retrained(), &clf)?;
            println!("wrote {}", art.retrained().display());
        }
        Cmd::Evaluate { predictions, model } => {
            let (train, test) = pipeline::load_evaluation_inputs(&art)?;
            let preds = match (predictions, model) {
                (Some(p), _) => pipeline::load_predictions_for(p, &test)?,
                (None, m) => {
                    let path = m.clone().unwrap_or_else(|| art.retrained());
                    load_classifier(&path)?.predict_labels(&test.points)?
                }
            };
            let eval = pipeline::evaluate_predictions(&cfg, &preds, &test, &train.class_counts())?;
            let path = cfg.out_dir.join("evaluation.json");
            pipeline::save_json(&path, &eval)?;
            println!(
                "overall {:.4}  worst group {:.4} (group {})",
                eval.stratified.overall, eval.worst_group, eval.worst_group_id
            );
        }
        Cmd::Run => {
            let r = pipeline::run(&cfg, &art, opts)?;
            println!(
                "overall {:.4} -> {:.4}, worst group {:.4} -> {:.4}; report {}",
                r.before.stratified.overall,
                r.after.stratified.overall,
                r.before.worst_group,
                r.after.worst_group,
                art.report().display()
            );
        }
        Cmd::Sweep => {
            let s = pipeline::sweep(&cfg, &art, opts)?;
            let failed = s.rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} cells ({failed} failed); summary in {}", s.rows.len(), art.sweep_dir().display());
            if let Some(b) = s.best {
                println!("best cell: gamma {} omega {}", s.rows[b].gamma, s.rows[b].omega);
            }
        }
        Cmd::Ablate => {
            let r = pipeline::ablate(&cfg, &art, opts)?;
            println!("{} rows in {}", r.rows.len(), art.ablate_dir().display());
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::MissingFile => 2,
        ErrorKind::Schema => 3,
        ErrorKind::Config => 4,
        ErrorKind::Other => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(exit_code(ErrorKind::Config));
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
