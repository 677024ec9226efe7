use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use detention::datagen::{generate_dataset, load_csv, write_csv, GenSpec};
use detention::dsrae::{load_checkpoint, save_checkpoint, score_samples, Mode, ModelParams, Sample};
use detention::eval::{evaluate, normalized_samples, write_scores_csv, ScoreRow};
use detention::grouprank::{
    export_sft_jsonl, make_training_groups, members_from_samples, partition_inference, rank_scores,
    OracleBackend, RankBackend, RemoteBackend, RemoteBackendConfig, ThresholdMode, GROUP_SIZE,
};
use detention::progressive::{build_schedule, run_all, PhaseResult, TrainConfig};
use detention::schema::{fit_on_train, PscRecord, Split};
use detention::Error;

#[derive(Parser)]
#[command(name = "detention", version, about = "Ship detention scoring: data generation, training, ranking and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Oracle,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic inspection dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the six-phase training pipeline.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the mode in the config file.
        #[arg(long)]
        mode: Option<Mode>,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write per-record DSRAE scores (`id,label,score`).
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score records through a group-ranking backend.
    Rank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "oracle")]
        backend: BackendKind,
        #[arg(long)]
        remote_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export training groups as line-delimited JSON for fine-tuning.
    ExportSft {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate on the test splits and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "oracle")]
        backend: BackendKind,
        #[arg(long)]
        remote_config: Option<PathBuf>,
        /// `fixed:<θ>` or `rate:<k>`; defaults to the validation prevalence rate.
        #[arg(long)]
        threshold: Option<ThresholdMode>,
        #[arg(long)]
        report: PathBuf,
        /// Raw scores CSV; defaults to `<report>.scores.csv`.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = if error.is_data_error() { 2 } else { 3 };
        Failure { code, error }
    }
}

fn data_err(error: Error) -> Failure {
    Failure { code: 2, error }
}

type CliResult<T> = Result<T, Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| data_err(e.into()))?;
    serde_json::from_str(&text).map_err(|e| data_err(Error::Config(format!("{}: {e}", path.display()))))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn load_data(path: &Path) -> CliResult<Vec<PscRecord>> {
    load_csv(path).map_err(data_err)
}

fn split_samples(params: &ModelParams<f64>, records: &[PscRecord], split: Split) -> CliResult<Vec<Sample<f64>>> {
    let subset: Vec<PscRecord> = records.iter().filter(|r| r.split == split).cloned().collect();
    Ok(normalized_samples(params, &subset)?)
}

fn backend(kind: BackendKind, remote_config: Option<&Path>) -> CliResult<Box<dyn RankBackend>> {
    match kind {
        BackendKind::Oracle => Ok(Box::new(OracleBackend)),
        BackendKind::Remote => {
            let path = remote_config
                .ok_or_else(|| data_err(Error::Config("--remote-config is required with --backend remote".into())))?;
            let config: RemoteBackendConfig = read_json(path)?;
            Ok(Box::new(RemoteBackend::new(config)?))
        }
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a TrainConfig,
    final_checkpoint: PathBuf,
    phases: &'a [PhaseResult],
}

fn train(data: &Path, config: Option<&Path>, out_dir: &Path, mode: Option<Mode>, seed: Option<u64>) -> CliResult<()> {
    let mut config: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = mode {
        config.mode = m;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    let schedule = build_schedule(&config.schedule)?;
    let records = load_data(data)?;
    let stats = fit_on_train(&records).map_err(data_err)?;
    let pick = |split: Split| -> CliResult<Vec<Sample<f64>>> {
        let subset: Vec<PscRecord> = records.iter().filter(|r| r.split == split).cloned().collect();
        Sample::from_records(&subset, &stats).map_err(data_err)
    };
    let (train_set, val_set) = (pick(Split::Train)?, pick(Split::Val)?);
    info!("training {:?} on {} records, validating on {}", config.mode, train_set.len(), val_set.len());
    let (params, phases) = run_all(&train_set, &val_set, &schedule, &config, Some(stats.clone()), out_dir)?;
    let final_checkpoint = out_dir.join("final.ckpt");
    save_checkpoint(&params, &final_checkpoint)?;
    write_json(
        &TrainSummary {
            config: &config,
            final_checkpoint: final_checkpoint.clone(),
            phases: &phases,
        },
        &out_dir.join("summary.json"),
    )?;
    println!("{}", final_checkpoint.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec: GenSpec = read_json(&spec)?;
            let records = generate_dataset(&spec).map_err(data_err)?;
            write_csv(&records, &out)?;
            info!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Train {
            data,
            config,
            out_dir,
            mode,
            seed,
        } => train(&data, config.as_deref(), &out_dir, mode, seed)?,
        Command::Score { checkpoint, data, out } => {
            let params: ModelParams<f64> = load_checkpoint(&checkpoint)?;
            let records = load_data(&data)?;
            let samples = normalized_samples(&params, &records).map_err(data_err)?;
            let rows: Vec<ScoreRow> = score_samples(&params, &samples)?
                .into_iter()
                .zip(&samples)
                .map(|(s, x)| ScoreRow {
                    id: s.id,
                    label: x.detained,
                    score: s.score,
                })
                .collect();
            write_scores_csv(&rows, &out)?;
        }
        Command::Rank {
            checkpoint,
            data,
            backend: kind,
            remote_config,
            out,
            seed,
        } => {
            let backend = backend(kind, remote_config.as_deref())?;
            let params: ModelParams<f64> = load_checkpoint(&checkpoint)?;
            let records = load_data(&data)?;
            let samples = normalized_samples(&params, &records).map_err(data_err)?;
            let members = members_from_samples(&params, &samples)?;
            let groups = partition_inference(&members, GROUP_SIZE, seed);
            let ranked: std::collections::HashMap<String, f64> =
                rank_scores(backend.as_ref(), &groups)?.into_iter().collect();
            let rows: Vec<ScoreRow> = samples
                .iter()
                .map(|s| ScoreRow {
                    id: s.id.clone(),
                    label: s.detained,
                    score: ranked[&s.id],
                })
                .collect();
            write_scores_csv(&rows, &out)?;
        }
        Command::ExportSft {
            checkpoint,
            data,
            out,
            seed,
        } => {
            let params: ModelParams<f64> = load_checkpoint(&checkpoint)?;
            let records = load_data(&data)?;
            let samples = split_samples(&params, &records, Split::Train)?;
            let members = members_from_samples(&params, &samples)?;
            let groups = make_training_groups(&members, seed).map_err(data_err)?;
            if !groups.leftover_detained.is_empty() {
                warn!("{} detained samples left over: {:?}", groups.leftover_detained.len(), groups.leftover_detained);
            }
            export_sft_jsonl(&groups.groups, &out)?;
            info!("wrote {} groups to {}", groups.groups.len(), out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            backend: kind,
            remote_config,
            threshold,
            report,
            scores,
            seed,
        } => {
            let backend = backend(kind, remote_config.as_deref())?;
            let records = load_data(&data)?;
            let (result, rows) = evaluate(&checkpoint, &records, backend.as_ref(), threshold, seed)?;
            write_json(&result, &report)?;
            let scores = scores.unwrap_or_else(|| {
                let mut name = report.file_name().unwrap_or_default().to_os_string();
                name.push(".scores.csv");
                report.with_file_name(name)
            });
            write_scores_csv(&rows, &scores)?;
            for s in &result.splits {
                println!(
                    "{}: precision {:.4} recall {:.4} f_score {:.4} auc {} ap {}",
                    s.split,
                    s.precision,
                    s.recall,
                    s.f_score,
                    s.auc.map_or("n/a".into(), |v| format!("{v:.4}")),
                    s.ap.map_or("n/a".into(), |v| format!("{v:.4}")),
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
