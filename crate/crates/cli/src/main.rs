//! `ser` — scripted experiments for speaker-invariant emotion embeddings.
//!
//! Subcommands cover the whole pipeline: synthetic data generation, speaker
//! splits, training under the four strategies, evaluation, embedding export,
//! speaker-leakage probing, 2-d projection, a full gradient-check run, and
//! the multi-strategy comparison experiment.
//!
//! Outputs are written to a temporary path and renamed on success, so a
//! failed run never leaves a partial file. Every run is reproducible from
//! its config and seed. Errors exit non-zero with one machine-parseable
//! `error kind=... msg="..."` line on stderr. Log lines are `key=value`
//! text on stdout.

mod csvio;

use clap::{Args, Parser, Subcommand};
use ser_core::data::{
    generate_synthetic, read_serf, split_by_speaker, write_serf, Dataset, SessionMap,
    SplitManifest, SpeakerTag, SyntheticSpec,
};
use ser_core::error::Error;
use ser_core::eval::{evaluate, pca_project, speaker_probe};
use ser_core::experiment::{run_experiment, ExperimentConfig};
use ser_core::model::{embed, load_checkpoint, save_checkpoint};
use ser_core::suite::run_gradcheck_suite;
use ser_core::training::{train, Strategy};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ser",
    version,
    about = "Speaker-invariant emotion embedding pipeline",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker emotion dataset (SERF file).
    GenData(GenDataArgs),
    /// Speaker-disjoint train/validation/test split of a SERF file.
    Split(SplitArgs),
    /// Train one model; writes the best checkpoint and the history CSV.
    Train(TrainArgs),
    /// Emotion metrics of a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Export utterance embeddings of one split as CSV.
    Embed(EmbedArgs),
    /// Fit a linear speaker probe on exported embeddings.
    Probe(ProbeArgs),
    /// Project exported embeddings onto principal components.
    Project(ProjectArgs),
    /// Run the full gradient-check suite; non-zero exit on any failure.
    Gradcheck,
    /// Run the strategy x seed comparison and write summary tables.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// SyntheticSpec JSON; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    per_speaker: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    emotions: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    offset_scale: Option<f64>,
    #[arg(long)]
    interaction_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write a speaker-session sidecar, grouping speakers into this
    /// many equal sessions (IEMOCAP layout needs 2 speakers per session).
    #[arg(long)]
    sessions: Option<usize>,
    /// Output SERF path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Train/validation/test fractions.
    #[arg(long, num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON (model, train, data). Flags win.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    grl_lambda: Option<f64>,
    #[arg(long)]
    cgt_alpha: Option<f64>,
    #[arg(long)]
    cgt_epsilon: Option<f64>,
    /// Output directory (default: SER_OUT_DIR or “.”).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Which split to score: train, validation, or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Output CSV; a `<out>.manifest.json` sidecar lists skipped ids.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(short = 'k', long, default_value_t = 2)]
    components: usize,
    /// Output CSV; a `<out>.variance.json` sidecar holds explained-variance
    /// fractions.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Parallel (strategy, seed) cells; each cell is single-threaded.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error kind={} msg={:?}", error_kind(&err), err.to_string());
            ExitCode::FAILURE
        }
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Contract(_) => "contract",
        Error::Graph(_) => "graph",
        Error::TooShortUtterance { .. } => "too_short_utterance",
        Error::Format(_) => "format",
        Error::Truncated(_) => "truncated",
        Error::Validation(_) => "validation",
        Error::SplitOverlap { .. } => "split_overlap",
        Error::NonFinite { .. } => "non_finite",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::Split(args) => split(args),
        Command::Train(args) => train_cmd(args),
        Command::Evaluate(args) => evaluate_cmd(args),
        Command::Embed(args) => embed_cmd(args),
        Command::Probe(args) => probe_cmd(args),
        Command::Project(args) => project_cmd(args),
        Command::Gradcheck => gradcheck_cmd(),
        Command::Experiment(args) => experiment_cmd(args),
    }
}

/// Writes through a temp file and renames on success.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let tmp = tmp_path(path);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("SER_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_split<'a>(
    dataset: &'a Dataset,
    manifest: &SplitManifest,
    which: &str,
) -> Result<Vec<&'a ser_core::data::Utterance>, Error> {
    let ids = match which {
        "train" => &manifest.train,
        "validation" => &manifest.validation,
        "test" => &manifest.test,
        other => {
            return Err(Error::Config(format!(
                "unknown split '{}' (expected train, validation, or test)",
                other
            )))
        }
    };
    dataset.by_ids(ids)
}

fn gen_data(args: GenDataArgs) -> Result<(), Error> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(v) = args.speakers {
        spec.num_speakers = v;
    }
    if let Some(v) = args.per_speaker {
        spec.utterances_per_speaker = v;
    }
    if let Some(v) = args.feature_dim {
        spec.feature_dim = v;
    }
    if let Some(v) = args.emotions {
        spec.num_emotions = v;
    }
    if let Some(v) = args.min_len {
        spec.length_range.0 = v;
    }
    if let Some(v) = args.max_len {
        spec.length_range.1 = v;
    }
    if let Some(v) = args.noise_sigma {
        spec.noise_sigma = v;
    }
    if let Some(v) = args.offset_scale {
        spec.speaker_offset_scale = v;
    }
    if let Some(v) = args.interaction_scale {
        spec.interaction_scale = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }

    let dataset = generate_synthetic(&spec)?;
    let tmp = tmp_path(&args.out);
    write_serf(&dataset, &tmp)?;
    std::fs::rename(&tmp, &args.out)?;
    println!(
        "event=gen_data utterances={} speakers={} emotions={} out={}",
        dataset.utterances.len(),
        dataset.num_speakers(),
        dataset.num_emotions(),
        args.out.display()
    );

    if let Some(sessions) = args.sessions {
        if sessions == 0 || dataset.num_speakers() % sessions != 0 {
            return Err(Error::Config(format!(
                "{} speakers cannot be grouped into {} equal sessions",
                dataset.num_speakers(),
                sessions
            )));
        }
        let per = dataset.num_speakers() / sessions;
        let map: SessionMap = dataset
            .speaker_ids
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (
                    s.clone(),
                    SpeakerTag {
                        session: format!("session{}", i / per),
                    },
                )
            })
            .collect();
        let meta_path = args.out.with_extension("speakers.json");
        write_atomic(&meta_path, serde_json::to_string_pretty(&map)?.as_bytes())?;
        println!(
            "event=session_meta sessions={} out={}",
            sessions,
            meta_path.display()
        );
    }
    Ok(())
}

fn split(args: SplitArgs) -> Result<(), Error> {
    let dataset = read_serf(&args.data)?;
    let manifest = split_by_speaker(
        &dataset,
        (args.fractions[0], args.fractions[1], args.fractions[2]),
        args.seed,
    )?;
    write_atomic(&args.out, manifest.to_json()?.as_bytes())?;
    println!(
        "event=split train={} validation={} test={} out={}",
        manifest.train.len(),
        manifest.validation.len(),
        manifest.test.len(),
        args.out.display()
    );
    Ok(())
}

fn load_experiment_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn train_cmd(args: TrainArgs) -> Result<(), Error> {
    let mut config = load_experiment_config(&args.config)?;
    if let Some(s) = &args.strategy {
        config.train.strategy = s.parse::<Strategy>()?;
    }
    if let Some(v) = args.seed {
        config.train.seed = v;
    }
    if let Some(v) = args.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.train.learning_rate = v;
    }
    if let Some(v) = args.grl_lambda {
        config.train.grl_lambda = v;
    }
    if let Some(v) = args.cgt_alpha {
        config.train.cgt_alpha = v;
    }
    if let Some(v) = args.cgt_epsilon {
        config.train.cgt_epsilon = v;
    }

    let model_config = config.model.resolve()?;
    let (dataset, manifest) = config.load_data()?;
    let dir = out_dir(args.out_dir.or(config.output_dir.clone()));
    std::fs::create_dir_all(&dir)?;

    let mut log = |stats: &ser_core::training::EpochStats| {
        println!(
            "event=epoch epoch={} train_emotion_loss={:.6} train_speaker_loss={:.6} val_acc={:.4} speaker_head_acc={:.4} seconds={:.2}",
            stats.epoch,
            stats.train_emotion_loss,
            stats.train_speaker_loss,
            stats.val_emotion_accuracy,
            stats.speaker_head_accuracy,
            stats.wall_clock_s
        );
    };
    let outcome = train(&dataset, &manifest, &model_config, &config.train, Some(&mut log))?;

    let ckpt = dir.join("checkpoint.serm");
    let tmp = tmp_path(&ckpt);
    save_checkpoint(&outcome.best, &tmp)?;
    std::fs::rename(&tmp, &ckpt)?;
    let history = dir.join("history.csv");
    write_atomic(&history, outcome.history.to_csv().as_bytes())?;
    println!(
        "event=train_done strategy={} best_epoch={} checkpoint={} history={}",
        config.train.strategy.name(),
        outcome.best_epoch,
        ckpt.display(),
        history.display()
    );
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<(), Error> {
    let mut params = load_checkpoint(&args.checkpoint)?;
    let dataset = read_serf(&args.data)?;
    let manifest = SplitManifest::from_json(&std::fs::read_to_string(&args.manifest)?, &dataset)?;
    let utts = load_split(&dataset, &manifest, &args.split)?;
    let metrics = evaluate(&mut params, &utts, args.batch_size)?;
    write_atomic(&args.out, serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    println!(
        "event=evaluate split={} utterances={} accuracy={:.4} out={}",
        args.split,
        utts.len(),
        metrics.accuracy,
        args.out.display()
    );
    Ok(())
}

fn embed_cmd(args: EmbedArgs) -> Result<(), Error> {
    let mut params = load_checkpoint(&args.checkpoint)?;
    let dataset = read_serf(&args.data)?;
    let manifest = SplitManifest::from_json(&std::fs::read_to_string(&args.manifest)?, &dataset)?;
    let utts = load_split(&dataset, &manifest, &args.split)?;
    let output = embed(&mut params, &utts, args.batch_size)?;
    write_atomic(&args.out, csvio::embeddings_to_csv(&output.records).as_bytes())?;

    #[derive(serde::Serialize)]
    struct EmbedManifest<'a> {
        written: usize,
        skipped: &'a [String],
    }
    let sidecar = args.out.with_extension("manifest.json");
    write_atomic(
        &sidecar,
        serde_json::to_string_pretty(&EmbedManifest {
            written: output.records.len(),
            skipped: &output.skipped,
        })?
        .as_bytes(),
    )?;
    for id in &output.skipped {
        println!("event=skip_short_utterance id={:?}", id);
    }
    println!(
        "event=embed split={} written={} skipped={} out={}",
        args.split,
        output.records.len(),
        output.skipped.len(),
        args.out.display()
    );
    Ok(())
}

fn probe_cmd(args: ProbeArgs) -> Result<(), Error> {
    let records = csvio::embeddings_from_csv(&std::fs::read_to_string(&args.embeddings)?)?;
    let result = speaker_probe(&records, args.seed)?;
    write_atomic(&args.out, serde_json::to_string_pretty(&result)?.as_bytes())?;
    println!(
        "event=probe speakers={} probe_accuracy={:.4} leakage_ratio={:.3} out={}",
        result.num_probe_speakers,
        result.probe_accuracy,
        result.leakage_ratio,
        args.out.display()
    );
    Ok(())
}

fn project_cmd(args: ProjectArgs) -> Result<(), Error> {
    let records = csvio::embeddings_from_csv(&std::fs::read_to_string(&args.embeddings)?)?;
    let projection = pca_project(&records, args.components)?;
    write_atomic(
        &args.out,
        csvio::projection_to_csv(&records, &projection).as_bytes(),
    )?;
    #[derive(serde::Serialize)]
    struct Variance<'a> {
        explained: &'a [f64],
    }
    let sidecar = args.out.with_extension("variance.json");
    write_atomic(
        &sidecar,
        serde_json::to_string_pretty(&Variance {
            explained: &projection.explained,
        })?
        .as_bytes(),
    )?;
    println!(
        "event=project components={} explained={:?} out={}",
        args.components,
        projection.explained,
        args.out.display()
    );
    Ok(())
}

fn gradcheck_cmd() -> Result<(), Error> {
    let report = run_gradcheck_suite()?;
    let mut failed = 0;
    for r in &report.reports {
        let status = if r.max_rel_error < report.tolerance {
            "pass"
        } else {
            failed += 1;
            "fail"
        };
        println!(
            "check={} max_rel_error={:.3e} status={}",
            r.op_name, r.max_rel_error, status
        );
    }
    println!(
        "event=gradcheck checks={} failed={} tolerance={:.0e}",
        report.reports.len(),
        failed,
        report.tolerance
    );
    if failed > 0 {
        return Err(Error::Contract(format!(
            "{} gradient checks failed",
            failed
        )));
    }
    Ok(())
}

fn experiment_cmd(args: ExperimentArgs) -> Result<(), Error> {
    let config = load_experiment_config(&args.config)?;
    let dir = out_dir(args.out_dir.or(config.output_dir.clone()));
    std::fs::create_dir_all(&dir)?;
    let threads = args.threads.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });
    let progress = |cell: &ser_core::experiment::CellResult| {
        println!(
            "event=cell strategy={} seed={} best_epoch={} val_acc={:.4} test_acc={:.4} test_leakage={:.3}",
            cell.strategy.name(),
            cell.seed,
            cell.best_epoch,
            cell.val_accuracy,
            cell.test_accuracy,
            cell.test_probe.leakage_ratio
        );
    };
    let result = run_experiment(&config, threads, Some(&progress))?;
    write_atomic(&dir.join("summary.csv"), result.summary_csv().as_bytes())?;
    write_atomic(&dir.join("cells.csv"), result.cells_csv().as_bytes())?;
    for row in &result.summary {
        println!(
            "event=summary strategy={} val={:.4}±{:.4} test={:.4}±{:.4} gap={:.4} leakage={:.3}±{:.3}",
            row.strategy.name(),
            row.val_mean,
            row.val_std,
            row.test_mean,
            row.test_std,
            row.gap_mean,
            row.test_leakage_mean,
            row.test_leakage_std
        );
    }
    println!(
        "event=experiment_done cells={} out={}",
        result.cells.len(),
        dir.display()
    );
    Ok(())
}
