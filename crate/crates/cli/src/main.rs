//! `modaldrop`: synthesise paired audio/video data, train the cross-modal
//! model with an optional missing-modality ablation, sweep evaluation
//! ablations, check gradients and merge sweep reports.
//!
//! Exit codes: 0 success, 1 failed check, 2 invalid input, 3 dimension
//! mismatch between data and model.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use modaldrop_core::augment::{Modality, Strategy};
use modaldrop_core::autodiff::OpKind;
use modaldrop_core::data::{generate_synthetic, load_dataset, save_dataset, Dataset};
use modaldrop_core::harness::{
    check_model_fits, gradcheck, merge_reports, prepare, read_report_table, sweep, train, write_sweep_csv,
    HarnessError, RunConfig, GRADCHECK_TOLERANCE,
};
use modaldrop_core::model::{load_checkpoint, save_checkpoint};

#[derive(Parser, Debug)]
#[command(name = "modaldrop", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file from the `data` section of a config.
    Synth {
        /// Run config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and save the checkpoint of the best validation epoch.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file; synthesised from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Training ablation, overriding the config.
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Modality the training ablation targets, overriding the config.
        #[arg(long)]
        modality: Option<Modality>,
        /// Training seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the validation split under a grid of
    /// ablation probabilities.
    EvalSweep {
        /// Checkpoint to evaluate.
        #[arg(long)]
        model: PathBuf,
        /// Run config giving the data splits; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file; synthesised from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long, default_value = "video")]
        modality: Modality,
        /// Comma-separated probabilities; the strategy's standard grid when
        /// omitted.
        #[arg(long)]
        probs: Option<String>,
        /// Seed of the evaluation corruption, shared across models.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sweep CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reverse-mode gradients with finite differences on a small
    /// model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the backward rule of one op, to see the check fail.
        #[arg(long, hide = true)]
        inject_fault: Option<OpKind>,
    },
    /// Merge sweep CSVs into one table with a column pair per model.
    Report {
        /// Sweep CSVs or merged reports; a sweep is labelled by its file
        /// stem.
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        /// Merged CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Synth { config, out } => synth(&load_config(config.as_deref())?, &out),
        Command::Train {
            config,
            data,
            out,
            log,
            strategy,
            modality,
            seed,
        } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(s) = strategy {
                config.ablation.strategy = s;
            }
            if let Some(m) = modality {
                config.ablation.modality = m;
            }
            if let Some(s) = seed {
                config.train.seed = s;
            }
            run_train(&config, data.as_deref(), &out, log.as_deref())
        }
        Command::EvalSweep {
            model,
            config,
            data,
            strategy,
            modality,
            probs,
            seed,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let probs = match probs {
                Some(p) => modaldrop_core::harness::parse_probs(&p)?,
                None => strategy.default_grid(),
            };
            eval_sweep(&config, &model, data.as_deref(), strategy, modality, &probs, seed, &out)
        }
        Command::Gradcheck { seed, inject_fault } => run_gradcheck(seed, inject_fault),
        Command::Report { csvs, out } => report(&csvs, out.as_deref()),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, HarnessError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_data(config: &RunConfig, path: Option<&Path>) -> Result<Dataset, HarnessError> {
    Ok(match path {
        Some(p) => load_dataset(p)?,
        None => {
            info!(
                "no --data given; synthesising {} clips from the config",
                config.data.n_clips
            );
            generate_synthetic(&config.data)?
        }
    })
}

fn synth(config: &RunConfig, out: &Path) -> Result<(), HarnessError> {
    let dataset = generate_synthetic(&config.data)?;
    save_dataset(&dataset, out)?;
    let (d_audio, d_video) = dataset.feature_dims().unwrap_or((0, 0));
    println!(
        "wrote {} clips to {}: audio {} dims, video {} dims",
        dataset.len(),
        out.display(),
        d_audio,
        d_video
    );
    Ok(())
}

fn run_train(config: &RunConfig, data: Option<&Path>, out: &Path, log: Option<&Path>) -> Result<(), HarnessError> {
    let dataset = load_data(config, data)?;
    let prepared = prepare(&dataset, config)?;
    info!(
        "{} training sequences, {} validation clips, ablation {} on {} at p={}",
        prepared.train.len(),
        prepared.val.len(),
        config.ablation.strategy,
        config.ablation.modality,
        config.ablation.probability
    );
    let outcome = train(config, &prepared)?;
    save_checkpoint(&outcome.params, &outcome.model, out)?;
    if let Some(path) = log {
        std::fs::write(path, outcome.log_csv())?;
    }
    let best = &outcome.log[outcome.best_epoch - 1];
    println!(
        "best epoch {}: val CCC valence {:.4}, arousal {:.4}; checkpoint {}",
        outcome.best_epoch,
        best.val.ccc_valence,
        best.val.ccc_arousal,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_sweep(
    config: &RunConfig,
    model_path: &Path,
    data: Option<&Path>,
    strategy: Strategy,
    modality: Modality,
    probs: &[f64],
    seed: u64,
    out: &Path,
) -> Result<(), HarnessError> {
    let (params, model) = load_checkpoint(model_path)?;
    let dataset = load_data(config, data)?;
    let prepared = prepare(&dataset, config)?;
    check_model_fits(&model, &prepared)?;
    let rows = sweep(&params, &model, &prepared.val, strategy, modality, probs, seed)?;
    write_sweep_csv(&rows, out)?;
    for r in &rows {
        println!(
            "{} {} p={}: valence {:.4}, arousal {:.4}",
            r.strategy, r.modality, r.probability, r.ccc_valence, r.ccc_arousal
        );
    }
    Ok(())
}

fn run_gradcheck(seed: u64, fault: Option<OpKind>) -> Result<(), HarnessError> {
    if let Some(kind) = fault {
        info!("corrupting the backward rule of {kind}");
    }
    let report = gradcheck(seed, fault)?;
    for (name, err) in &report.per_param {
        info!("{name}: {err:.3e}");
    }
    if !report.passed() {
        return Err(HarnessError::CheckFailed(format!(
            "worst parameter {} has relative error {:.3e} (tolerance {GRADCHECK_TOLERANCE:e})",
            report.worst_param, report.worst_error
        )));
    }
    println!(
        "gradcheck passed: worst parameter {} has relative error {:.3e}",
        report.worst_param, report.worst_error
    );
    Ok(())
}

fn report(csvs: &[PathBuf], out: Option<&Path>) -> Result<(), HarnessError> {
    let tables = csvs
        .iter()
        .map(|path| {
            let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            read_report_table(label, &std::fs::read_to_string(path)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let merged = merge_reports(&tables)?;
    if let Some(path) = out {
        std::fs::write(path, merged.to_csv())?;
    }
    print!("{}", merged.to_text());
    Ok(())
}
