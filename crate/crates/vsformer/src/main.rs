use clap::{Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};
use vsformer::dataset::{gen_synthetic, parse_ts, split_train_val, write_ts, SyntheticKind};
use vsformer::model::AblationMode;
use vsformer::trainer::{
    self, evaluate, explain, load_checkpoint, save_checkpoint, EvalMetrics, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "vsformer",
    version,
    about = "Value- and shape-aware transformer for multivariate time series classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a .ts corpus (20% of it is held out for validation) and
    /// write a checkpoint.
    Train {
        /// Training corpus in UEA .ts format.
        #[arg(long)]
        data: PathBuf,
        /// Optional test corpus to evaluate after training.
        #[arg(long)]
        test: Option<PathBuf>,
        /// JSON run configuration; unknown keys are rejected.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config mode:
        /// full|shape-only|value-only|vanilla-attn|learnable-pe.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a checkpoint on a labeled corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Emit machine-readable JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Debug dump of shape/value tokens and priors. Artifacts are fitted on
    /// the given corpus itself.
    Tokenize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus and write it as a .ts file.
    Synth {
        /// shape|value|mixed.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        classes: usize,
        #[arg(long = "per-class")]
        per_class: usize,
        #[arg(long)]
        vars: usize,
        #[arg(long)]
        len: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank one instance's tokens by received attention.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Instance index within the corpus.
        #[arg(long)]
        instance: usize,
        /// Rows to print per branch.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
}

fn main() {
    // die quietly when a downstream pipe (head, less) closes early
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_config(path: &Path) -> Result<TrainConfig, Box<dyn std::error::Error>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let config: TrainConfig =
        serde_json::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))?;
    Ok(config)
}

fn run(command: Command) -> Result<(), Box<dyn std::error::Error>> {
    match command {
        Command::Train {
            data,
            test,
            config,
            out,
            seed,
            mode,
        } => {
            let mut config = load_config(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(mode) = mode {
                config.mode = mode.parse::<AblationMode>()?;
            }
            let corpus = parse_ts(&data)?;
            let (train_set, val_set) = split_train_val(&corpus, 0.2, config.seed)?;
            println!(
                "training on {} instances ({} validation), mode {}",
                train_set.len(),
                val_set.len(),
                config.mode.name()
            );
            let (cp, report) =
                trainer::train_with_progress(&config, &train_set, &val_set, |epoch| {
                    println!(
                        "epoch {:>4}  train loss {:.4} acc {:.3}  |  val loss {:.4} acc {:.3}",
                        epoch.epoch,
                        epoch.train_loss,
                        epoch.train_accuracy,
                        epoch.val_loss,
                        epoch.val_accuracy
                    );
                })?;
            for warning in &cp.artifacts.warnings {
                eprintln!("warning: {warning}");
            }
            save_checkpoint(&cp, &out)?;
            println!(
                "best epoch {} (val acc {:.3}); checkpoint written to {}",
                report.best_epoch,
                report.epochs[report.best_epoch].val_accuracy,
                out.display()
            );
            if let Some(test_path) = test {
                let test_set = parse_ts(&test_path)?;
                let metrics = evaluate(&cp, &test_set)?;
                print_eval(&metrics);
            }
        }
        Command::Eval { ckpt, data, json } => {
            let cp = load_checkpoint(&ckpt)?;
            let dataset = parse_ts(&data)?;
            let metrics = evaluate(&cp, &dataset)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&metrics)?);
            } else {
                print_eval(&metrics);
            }
        }
        Command::Tokenize { data, config, out } => {
            let config = load_config(&config)?;
            let dataset = parse_ts(&data)?;
            let artifacts = trainer::fit_artifacts(&dataset, &config)?;
            let mcfg = trainer::pipeline::model_config(&artifacts, &config, &dataset);
            let tokenized = trainer::tokenize_dataset(&dataset, &artifacts, &mcfg)?;

            #[derive(Serialize)]
            struct InstanceDump<'a> {
                label: &'a str,
                shape_tokens: &'a [vsformer::shape::ShapeToken],
                shape_priors: &'a [f64],
                value_tokens: &'a [vsformer::value::ValueToken],
            }
            #[derive(Serialize)]
            struct Dump<'a> {
                config: &'a TrainConfig,
                artifacts: &'a trainer::TokenizerArtifacts,
                value_priors: &'a [f64],
                instances: Vec<InstanceDump<'a>>,
            }
            let empty_shape: Vec<vsformer::shape::ShapeToken> = Vec::new();
            let empty_priors: Vec<f64> = Vec::new();
            let empty_value: Vec<vsformer::value::ValueToken> = Vec::new();
            let instances: Vec<InstanceDump> = (0..dataset.len())
                .map(|i| InstanceDump {
                    label: &dataset.class_names()[dataset.instances()[i].label],
                    shape_tokens: tokenized.shape_tokens.get(i).map(Vec::as_slice).unwrap_or(&empty_shape),
                    shape_priors: tokenized.shape_priors.get(i).map(Vec::as_slice).unwrap_or(&empty_priors),
                    value_tokens: tokenized.value_tokens.get(i).map(Vec::as_slice).unwrap_or(&empty_value),
                })
                .collect();
            let dump = Dump {
                config: &config,
                artifacts: &artifacts,
                value_priors: &tokenized.value_priors,
                instances,
            };
            std::fs::write(&out, serde_json::to_string_pretty(&dump)?)?;
            println!(
                "wrote token dump for {} instances to {}",
                dataset.len(),
                out.display()
            );
        }
        Command::Synth {
            kind,
            classes,
            per_class,
            vars,
            len,
            seed,
            out,
        } => {
            let kind: SyntheticKind = kind.parse()?;
            let dataset = gen_synthetic(kind, per_class, vars, len, classes, seed)?;
            write_ts(&dataset, &out)?;
            println!("wrote {} instances to {}", dataset.len(), out.display());
        }
        Command::Explain {
            ckpt,
            data,
            instance,
            top,
        } => {
            let cp = load_checkpoint(&ckpt)?;
            let dataset = parse_ts(&data)?;
            let report = explain(&cp, &dataset, instance)?;
            println!(
                "instance {}: actual {}, predicted {} (lambda {:.4})",
                report.instance, report.actual_class, report.predicted_class, report.lambda
            );
            let probs: Vec<String> = cp
                .class_names
                .iter()
                .zip(&report.probabilities)
                .map(|(name, p)| format!("{name} {p:.4}"))
                .collect();
            println!("probabilities: {}", probs.join(", "));
            if !report.shape.is_empty() {
                println!(
                    "shape tokens by received attention (top {} of {}):",
                    top.min(report.shape.len()),
                    report.shape.len()
                );
                println!(
                    "  {:>4} {:>10} {:>4} {:>7} {:>6} {:>8} {:>9}",
                    "rank", "attention", "var", "start", "end", "prior", "distance"
                );
                for (rank, e) in report.shape.iter().take(top).enumerate() {
                    println!(
                        "  {:>4} {:>10.6} {:>4} {:>7} {:>6} {:>8.3} {:>9.4}",
                        rank + 1,
                        e.attention,
                        e.variable,
                        e.t_start,
                        e.t_end,
                        e.prior,
                        e.distance.unwrap_or(f64::NAN)
                    );
                }
            }
            if !report.value.is_empty() {
                println!(
                    "value tokens by received attention (top {} of {}):",
                    top.min(report.value.len()),
                    report.value.len()
                );
                println!(
                    "  {:>4} {:>10} {:>4} {:>7} {:>6} {:>8} {:>6} {:>12}",
                    "rank", "attention", "var", "start", "end", "prior", "stat", "value"
                );
                for (rank, e) in report.value.iter().take(top).enumerate() {
                    let (stat, value) = e.statistic.unwrap_or(("?", f64::NAN));
                    println!(
                        "  {:>4} {:>10.6} {:>4} {:>7} {:>6} {:>8.3} {:>6} {:>12.5}",
                        rank + 1,
                        e.attention,
                        e.variable,
                        e.t_start,
                        e.t_end,
                        e.prior,
                        stat,
                        value
                    );
                }
            }
        }
    }
    Ok(())
}

fn print_eval(metrics: &EvalMetrics) {
    println!("test loss      {:.4}", metrics.loss);
    println!("test accuracy  {:.4}", metrics.accuracy);
    println!("macro ovr auc  {:.4}", metrics.auc_macro);
    println!("mean lambda    {:.4}", metrics.mean_lambda);
    println!("instances      {}", metrics.lambdas.len());
}
