use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tabulatime::interpret::{mean_attention, permutation_importance, step_importance};
use tabulatime::io::config::{EventData, SeriesData};
use tabulatime::io::env::format_hour;
use tabulatime::io::pipeline::{load_series_windows, sensitivity_table};
use tabulatime::io::synth::{synth_classification, synth_forecasting, ClassificationSynth, ForecastSynth};
use tabulatime::io::{evaluate_bundle, run_training, sensitivity_imputation, DataConfig, InterpretConfig, ModelBundle, RunConfig};
use tabulatime::model::{ModelConfig, ModelKind};
use tabulatime::rwkv::EncoderConfig;
use tabulatime::tabular::ImputeMethod;
use tabulatime::train::{MetricsReport, Task, TrainConfig};

#[derive(Parser)]
#[command(name = "tabulatime", version, about = "Train, evaluate and inspect multimodal time-series models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the environmental window length.
    #[arg(long)]
    window_days: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(d) = self.window_days {
            cfg.set_window_days(d)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct BundleArgs {
    /// Trained model bundle.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthTask {
    Classification,
    Forecasting,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and save the bundle, history and test metrics.
    Train(RunArgs),
    /// Score a bundle on its test split.
    Evaluate(BundleArgs),
    /// Write denormalized test-window forecasts.
    Forecast(BundleArgs),
    /// Permutation importance of tabular features and of each day, measured
    /// on the validation split.
    Importance {
        #[command(flatten)]
        bundle: BundleArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a seeded synthetic dataset with a ready-to-run config.
    Synth {
        #[arg(long, value_enum)]
        task: SynthTask,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        /// MCAR rate for clinical cells.
        #[arg(long, default_value_t = 0.0)]
        missing_rate: f64,
        /// Number of event rows (classification only).
        #[arg(long)]
        events: Option<usize>,
    },
    /// Compare mean, MICE and KNN imputation on the same data.
    SensitivityImputation {
        #[command(flatten)]
        run: RunArgs,
        /// Seeds averaged per method.
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_metrics(out: &Path, metrics: &MetricsReport) -> Result<()> {
    write(&out.join("metrics.json"), serde_json::to_string_pretty(metrics)?)?;
    if let MetricsReport::Classification(r) = metrics {
        let mut csv = String::from("threshold,fpr,tpr\n");
        for p in &r.roc {
            writeln!(csv, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
        write(&out.join("roc.csv"), csv)?;
    }
    Ok(())
}

fn train_cmd(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    ensure_dir(&args.out)?;
    let outcome = run_training(&cfg)?;
    let h = &outcome.bundle.history;
    log::info!("best epoch {} of {} (val loss {:.5})", h.best_epoch, h.epochs.len(), h.best_val_loss);
    outcome.bundle.save(&args.out.join("model.tbl"))?;
    write(&args.out.join("history.json"), serde_json::to_string_pretty(h)?)?;
    write_metrics(&args.out, &outcome.test_metrics)?;
    println!("{}", serde_json::to_string_pretty(&outcome.test_metrics)?);
    Ok(())
}

fn evaluate_cmd(args: &BundleArgs) -> Result<()> {
    let bundle = ModelBundle::load(&args.model)?;
    ensure_dir(&args.out)?;
    let (metrics, _, prepared) = evaluate_bundle(&bundle)?;
    write_metrics(&args.out, &metrics)?;
    if let Ok(att) = mean_attention(&bundle.model, &prepared.test) {
        let mut csv = String::from("feature,attention\n");
        for (name, a) in att {
            writeln!(csv, "{name},{a}")?;
        }
        write(&args.out.join("attention.csv"), csv)?;
    }
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn forecast_cmd(args: &BundleArgs) -> Result<()> {
    let bundle = ModelBundle::load(&args.model)?;
    let DataConfig::Series(data) = &bundle.config.data else {
        bail!("forecast needs a bundle trained on series data");
    };
    ensure_dir(&args.out)?;
    let windows = load_series_windows(data, bundle.model.config.horizon)?;
    let (_, pred, prepared) = evaluate_bundle(&bundle)?;
    let s = pred.output.shape().to_vec();
    let (n, h) = (s[1], s[2]);
    let mut csv = String::from("window_start,channel,step,forecast,actual\n");
    for (row, &w) in prepared.splits.test.iter().enumerate() {
        for c in 0..n {
            for k in 0..h {
                let i = (row * n + c) * h + k;
                let actual = windows.future.data()[(w * n + c) * h + k];
                writeln!(
                    csv,
                    "{},{},{},{},{}",
                    format_hour(windows.starts[w]),
                    windows.channel_names[c],
                    k + 1,
                    pred.output.data()[i],
                    actual
                )?;
            }
        }
    }
    write(&args.out.join("forecast.csv"), csv)
}

fn importance_cmd(args: &BundleArgs, seed: Option<u64>) -> Result<()> {
    let bundle = ModelBundle::load(&args.model)?;
    ensure_dir(&args.out)?;
    let seed = seed.unwrap_or(bundle.config.train.seed);
    let InterpretConfig { metric, repeats } = bundle.config.interpret;
    let (_, _, prepared) = evaluate_bundle(&bundle)?;
    let model = &bundle.model;
    if model.kind().uses_tabular() {
        let r = permutation_importance(model, &prepared.val, &prepared.feature_groups, metric, repeats, seed)?;
        write(&args.out.join("feature_importance.csv"), r.to_csv())?;
        println!("feature ranking: {}", r.ranking().join(", "));
    }
    if model.kind().uses_series() {
        let r = step_importance(model, &prepared.val, metric, repeats, seed)?;
        write(&args.out.join("step_importance.csv"), r.to_csv())?;
        if let Some(d) = r.most_important_day() {
            println!("most important day: {d}");
        }
    }
    Ok(())
}

/// Desk-scale model for the generated datasets; a few thousand rows cannot
/// support the full-size encoder without heavy overfitting.
fn synth_model(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            layers: 1,
            embed_dim: 16,
            ..EncoderConfig::default()
        },
        ..ModelConfig::new(kind)
    }
}

fn synth_cmd(task: SynthTask, seed: u64, out: &Path, missing_rate: f64, events: Option<usize>) -> Result<()> {
    ensure_dir(out)?;
    let cfg = match task {
        SynthTask::Classification => {
            let mut synth = ClassificationSynth {
                missing_rate,
                ..ClassificationSynth::default()
            };
            if let Some(e) = events {
                synth.events = e;
            }
            let files = synth_classification(&synth, seed)?;
            write(&out.join("env.csv"), &files.environment)?;
            write(&out.join("events.csv"), &files.events)?;
            RunConfig {
                model: synth_model(ModelKind::TabulaTime),
                train: TrainConfig {
                    seed,
                    ..TrainConfig::default()
                },
                data: DataConfig::Events(EventData {
                    events: "events.csv".into(),
                    environment: Some("env.csv".into()),
                    schema: files.schema,
                    admission_column: "admission_time".into(),
                    label_column: "label".into(),
                    label_classes: Vec::new(),
                    window_days: synth.window_days,
                    imputation: ImputeMethod::default(),
                    temporal_split: true,
                    summary_features: true,
                }),
                interpret: InterpretConfig::default(),
            }
        }
        SynthTask::Forecasting => {
            write(&out.join("series.csv"), synth_forecasting(&ForecastSynth::default(), seed)?)?;
            RunConfig {
                model: synth_model(ModelKind::Forecaster),
                train: TrainConfig {
                    seed,
                    task: Task::Forecasting,
                    ..TrainConfig::default()
                },
                data: DataConfig::Series(SeriesData {
                    path: "series.csv".into(),
                    input_len: 240,
                    window_stride: 24,
                }),
                interpret: InterpretConfig::default(),
            }
        }
    };
    write(&out.join("run.json"), cfg.to_json()?)
}

fn sensitivity_cmd(args: &RunArgs, runs: usize) -> Result<()> {
    let cfg = args.config()?;
    ensure_dir(&args.out)?;
    let methods = [ImputeMethod::Mean, ImputeMethod::Mice { iterations: 10 }, ImputeMethod::Knn { k: 5 }];
    let rows = sensitivity_imputation(&cfg, &methods, runs)?;
    let table = sensitivity_table(&rows);
    write(&args.out.join("imputation_sensitivity.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Forecast(a) => forecast_cmd(a),
        Command::Importance { bundle, seed } => importance_cmd(bundle, *seed),
        Command::Synth {
            task,
            seed,
            out,
            missing_rate,
            events,
        } => synth_cmd(*task, *seed, out, *missing_rate, *events),
        Command::SensitivityImputation { run, runs } => sensitivity_cmd(run, *runs),
    }
}
