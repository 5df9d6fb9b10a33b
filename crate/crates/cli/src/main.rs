use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uav_intent::classifier::{self, argmax, Classifier};
use uav_intent::pipeline::{
    self, balance, dataset_windows, generate_dataset, infer_stream, posterior_to_csv, read_dataset, retrack,
    run_experiment, thin, write_dataset, write_report, NetworkTrainer, PipelineConfig,
};
use uav_intent::radar::detections_from_csv;
use uav_intent::tracking::FeatureWindow;

#[derive(Parser)]
#[command(
    name = "uav-intent",
    version,
    about = "Simulate, track and classify UAV intent near a geo-fence"
)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Pipeline config (TOML). Dataset commands default to the config stored
    /// in the dataset manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Window length in track steps.
    #[arg(long)]
    window: Option<usize>,
    /// Fractional overlap of consecutive windows.
    #[arg(long)]
    overlap: Option<f64>,
    /// Dimensionality: 2 or 3 (also accepts 2d/3d).
    #[arg(long, value_parser = parse_dim)]
    dim: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset pipeline config as TOML.
    Config {
        #[command(flatten)]
        o: Overrides,
        /// desk (default) or reference-2d.
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Generate trajectories, detections, tracks and features.
    Generate {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run tracking on a dataset's stored detections.
    Track {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
    },
    /// Rewrite a dataset's window index for a window length and overlap.
    Features {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one classifier on every trajectory of a dataset.
    Train {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-epoch history CSV next to the model.
        #[arg(long)]
        emit_plots: bool,
    },
    /// Window accuracy and confusion of a model on a dataset.
    Eval {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Posterior evolution for a replayed detection stream.
    Infer {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        model: PathBuf,
        /// Detection CSV (`t,range,azimuth,elevation,false_alarm`).
        #[arg(long)]
        detections: PathBuf,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split, train and evaluate; writes report.json (and plot CSVs).
    Report {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        emit_plots: bool,
    },
}

fn parse_dim(s: &str) -> Result<usize, String> {
    match s.trim_end_matches(['d', 'D']) {
        "2" => Ok(2),
        "3" => Ok(3),
        _ => Err(format!("dimensionality must be 2 or 3, got {s}")),
    }
}

impl Overrides {
    fn apply(&self, mut cfg: PipelineConfig) -> Result<PipelineConfig> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg = PipelineConfig::from_toml(&text)?;
        }
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(w) = self.window {
            cfg.features.window = w;
        }
        if let Some(o) = self.overlap {
            cfg.features.overlap = o;
        }
        if let Some(d) = self.dim {
            cfg.dimensionality = d;
        }
        if let Some(e) = self.epochs {
            cfg.training.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn load(&self, data: &Path) -> Result<(PipelineConfig, pipeline::Dataset)> {
        let (stored, dataset) = read_dataset(data).with_context(|| format!("reading dataset {}", data.display()))?;
        Ok((self.apply(stored)?, dataset))
    }
}

fn all_windows(cfg: &PipelineConfig, dataset: &pipeline::Dataset) -> Vec<FeatureWindow> {
    dataset_windows(dataset, cfg.dimensionality, cfg.features.window, cfg.features.overlap)
        .into_values()
        .flatten()
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { o, preset } => {
            let base = match preset.as_str() {
                "desk" => PipelineConfig::default(),
                "reference-2d" => PipelineConfig::reference_2d(),
                other => bail!("unknown preset {other}; expected desk or reference-2d"),
            };
            print!("{}", o.apply(base)?.to_toml()?);
        }
        Command::Generate { o, out } => {
            let cfg = o.apply(PipelineConfig::default())?;
            let dataset = generate_dataset(&cfg)?;
            write_dataset(&out, &cfg, &dataset)?;
            println!(
                "wrote {} trajectories ({} skipped) to {}",
                dataset.records.len(),
                dataset.skipped.len(),
                out.display()
            );
        }
        Command::Track { o, data } => {
            let (cfg, mut dataset) = o.load(&data)?;
            retrack(&mut dataset, &cfg)?;
            write_dataset(&data, &cfg, &dataset)?;
            println!("re-tracked {} trajectories", dataset.records.len());
        }
        Command::Features { o, data } => {
            let (cfg, dataset) = o.load(&data)?;
            write_dataset(&data, &cfg, &dataset)?;
            println!(
                "{} windows of {} steps at overlap {}",
                all_windows(&cfg, &dataset).len(),
                cfg.features.window,
                cfg.features.overlap
            );
        }
        Command::Train {
            o,
            data,
            out,
            emit_plots,
        } => {
            let (cfg, dataset) = o.load(&data)?;
            let windows = dataset_windows(&dataset, cfg.dimensionality, cfg.features.window, cfg.features.overlap);
            let train: Vec<&FeatureWindow> = windows
                .values()
                .flat_map(|w| thin(w, cfg.features.max_train_windows_per_trajectory))
                .collect();
            let train = balance(&train, cfg.master_seed);
            if train.is_empty() {
                bail!("no windows of {} steps in the dataset", cfg.features.window);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
            let (model, history) = classifier::train(&train, &[], Some(cfg.classes()), &cfg.training, &mut rng)?;
            model.write(fs::File::create(&out)?)?;
            if emit_plots {
                history.to_csv(fs::File::create(out.with_extension("history.csv"))?)?;
            }
            let last = history.epochs.last();
            println!(
                "trained on {} windows; final train accuracy {:.4}",
                train.len(),
                last.map_or(0.0, |e| e.train_acc)
            );
        }
        Command::Eval { o, data, model } => {
            let model = Classifier::read(fs::File::open(&model)?)?;
            let mut o = o;
            o.window = Some(model.architecture.window);
            let (cfg, dataset) = o.load(&data)?;
            let windows = all_windows(&cfg, &dataset);
            let refs: Vec<&FeatureWindow> = windows.iter().collect();
            let probs = model.predict(&refs)?;
            let k = model.classes.len();
            let mut confusion = vec![vec![0u64; k]; k];
            for (w, p) in refs.iter().zip(&probs) {
                confusion[model.class_index(&w.intent)?][argmax(p)] += 1;
            }
            let hits: u64 = (0..k).map(|i| confusion[i][i]).sum();
            let summary = serde_json::json!({
                "windows": refs.len(),
                "accuracy": hits as f64 / refs.len().max(1) as f64,
                "classes": model.classes,
                "confusion": confusion,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Infer {
            o,
            model,
            detections,
            out,
        } => {
            let model = Classifier::read(fs::File::open(&model)?)?;
            let cfg = o.apply(PipelineConfig {
                dimensionality: if model.architecture.features == 7 { 3 } else { 2 },
                ..PipelineConfig::default()
            })?;
            let dets = detections_from_csv(&fs::read_to_string(&detections)?)?;
            let series = infer_stream(&model, &dets, &cfg)?;
            let csv = posterior_to_csv(&series, &model.classes)?;
            match out {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Report {
            o,
            data,
            out,
            emit_plots,
        } => {
            let (cfg, dataset) = o.load(&data)?;
            let outcome = run_experiment(&cfg, &dataset, &NetworkTrainer(cfg.training.clone()))?;
            write_report(&out, &cfg, &dataset, &outcome, emit_plots)?;
            let r = &outcome.report;
            println!(
                "W={} accuracy {:.2}% +- {:.2} over {} splits; report in {}",
                r.window,
                100.0 * r.mean_accuracy,
                100.0 * r.std_accuracy,
                r.accuracies.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    run(cli)
}
