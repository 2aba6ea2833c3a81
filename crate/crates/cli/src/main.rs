//! `trajo` — batch front end for the trajectory prognosis pipeline.
//!
//! Every subcommand is a pure function from input files and flags to
//! output files: nothing is mutated in place, all randomness flows from
//! `--seed`, and reports embed the fully resolved configuration so they
//! can be regenerated byte-for-byte.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trajo_core::archive::{build_archive, load_archive, save_archive, ArchiveEntry};
use trajo_core::encoder::{
    encode_cohort, train_encoder, write_training_log, EncoderConfig, EncoderModel, TrajectoryVector,
};
use trajo_core::eval::{
    run_ablations, run_cv, summarize_audit, weight_sweep, write_ablation_csv, write_json_report,
    write_roc_csv, write_threshold_csv, EvalConfig, Method,
};
use trajo_core::oracle::{
    predict, read_verdict_log, write_verdict_log, ExternalProvider, OracleConfig, QueryMeta,
    RuleBasedProvider, VerdictProvider,
};
use trajo_core::synthdata::{generate_cohort, read_cohort, write_cohort, CohortSpec, SubjectRecord};

const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "trajo", version, about = "Trajectory prognosis pipeline", max_term_width = 100)]
struct Cli {
    /// Master seed; flows into every random draw (default 42)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for fold-parallel commands; output is identical
    /// for any value
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic cohort
    GenData(GenDataArgs),
    /// Train the trajectory encoder on a cohort
    Train(TrainArgs),
    /// Embed a cohort with a frozen encoder checkpoint
    Embed(EmbedArgs),
    /// Build a population archive from embeddings
    BuildArchive(BuildArchiveArgs),
    /// Query an archive for the nearest trajectories
    Retrieve(RetrieveArgs),
    /// Run the full retrieval + verdict pipeline for one subject
    Predict(PredictArgs),
    /// Cross-validated evaluation of one method
    Evaluate(EvaluateArgs),
    /// Pipeline ablation grid (M5 and its degraded variants)
    Ablate(AblateArgs),
    /// Calibration sweep over the fusion weight grid
    WeightSweep(WeightSweepArgs),
    /// Audit a verdict log for fabrications and filter adherence
    Audit(AuditArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Cohort size
    #[arg(long, default_value_t = 268)]
    n: usize,
    /// Fraction of unfavourable outcomes
    #[arg(long, default_value_t = 53.0 / 268.0)]
    pos_frac: f64,
    /// Volume side length
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Class separation strength (0 = pure noise)
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    /// Output cohort path (JSONL)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Optional per-epoch loss log (JSONL)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Encoder configuration (JSON); defaults are used otherwise
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured epoch count
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Encoder checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Output embeddings path (JSONL)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArchiveArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Output archive path (binary)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    archive: PathBuf,
    /// Embeddings file holding the query trajectory
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    query_id: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Cohort file supplying the query's age and sex
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    query_id: String,
    /// Oracle configuration (JSON); defaults are used otherwise
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional output path; stdout otherwise
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// One of: M3, M3b, M4, M5, M6-style, random-encoder, k1-retrieval,
    /// no-age-filter
    #[arg(long)]
    method: String,
    #[arg(long)]
    out: PathBuf,
    /// Evaluation configuration (JSON); defaults are used otherwise
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    /// Directory for CSV side tables (ROC points, threshold grid)
    #[arg(long)]
    csv_dir: Option<PathBuf>,
    /// Verdict log output (oracle methods only)
    #[arg(long)]
    verdicts: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional CSV rendering of the ablation grid
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct WeightSweepArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated fusion weights; default 0.0,0.1,...,1.0
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Args)]
struct AuditArgs {
    /// Verdict log (JSONL) to audit
    #[arg(long)]
    verdicts: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // determinism does not depend on this; it only bounds parallelism
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a, seed),
        Command::Train(a) => cmd_train(a, seed),
        Command::Embed(a) => cmd_embed(a),
        Command::BuildArchive(a) => cmd_build_archive(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a, seed),
        Command::Ablate(a) => cmd_ablate(a, seed),
        Command::WeightSweep(a) => cmd_weight_sweep(a, seed),
        Command::Audit(a) => cmd_audit(a),
    }
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn load_cohort(path: &Path) -> Result<(CohortSpec, Vec<SubjectRecord>)> {
    read_cohort(path).with_context(|| format!("reading cohort {}", path.display()))
}

fn cmd_gen_data(a: GenDataArgs, seed: Option<u64>) -> Result<()> {
    let spec = CohortSpec {
        n_subjects: a.n,
        positive_fraction: a.pos_frac,
        volume_dim: a.dim,
        class_separation: a.separation,
        seed: seed.unwrap_or(DEFAULT_SEED),
    };
    let cohort = generate_cohort(&spec)?;
    write_cohort(&a.out, &spec, &cohort)?;
    let positives = cohort.iter().filter(|s| s.label == 1).count();
    println!(
        "wrote {} subjects ({} unfavourable, {} favourable) to {}",
        cohort.len(),
        positives,
        cohort.len() - positives,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let (spec, cohort) = load_cohort(&a.cohort)?;
    let mut config = match &a.config {
        Some(path) => read_json_config::<EncoderConfig>(path)?,
        None => EncoderConfig {
            volume_dim: spec.volume_dim,
            ..EncoderConfig::default()
        },
    };
    if let Some(seed) = seed {
        config.seed = seed;
        config.augmentation.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        config.epochs = epochs;
    }
    let (model, history) = train_encoder(&cohort, &HashSet::new(), &config)?;
    model.save(&a.out)?;
    if let Some(log) = &a.log {
        write_training_log(log, &history)?;
    }
    let last = history.last().context("training produced no epochs")?;
    println!(
        "trained {} epochs; final train loss {:.6}, val loss {:.6}; checkpoint {}",
        history.len(),
        last.train_loss,
        last.val_loss,
        a.out.display()
    );
    Ok(())
}

const EMBEDDINGS_SCHEMA: &str = "trajo.embeddings.v1";

#[derive(serde::Serialize, serde::Deserialize)]
struct EmbeddingsHeader {
    schema: String,
    encoder: EncoderConfig,
}

fn write_embeddings(path: &Path, config: &EncoderConfig, trajectories: &[TrajectoryVector]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = EmbeddingsHeader {
        schema: EMBEDDINGS_SCHEMA.to_string(),
        encoder: config.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_embeddings(path: &Path) -> Result<Vec<TrajectoryVector>> {
    let reader = BufReader::new(
        File::open(path).with_context(|| format!("reading embeddings {}", path.display()))?,
    );
    let mut lines = reader.lines();
    let header_line = lines.next().context("embeddings file is empty")??;
    let header: EmbeddingsHeader =
        serde_json::from_str(&header_line).context("embeddings header")?;
    if header.schema != EMBEDDINGS_SCHEMA {
        bail!("unexpected embeddings schema '{}'", header.schema);
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).context("embeddings record")?);
    }
    Ok(out)
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let (_, cohort) = load_cohort(&a.cohort)?;
    let model = EncoderModel::load(&a.model)?;
    let trajectories = encode_cohort(&model, &cohort)?;
    write_embeddings(&a.out, &model.config, &trajectories)?;
    println!("embedded {} subjects to {}", trajectories.len(), a.out.display());
    Ok(())
}

fn cmd_build_archive(a: BuildArchiveArgs) -> Result<()> {
    let (_, cohort) = load_cohort(&a.cohort)?;
    let trajectories = read_embeddings(&a.embeddings)?;
    let entries = trajectories
        .into_iter()
        .map(|t| {
            let subject = cohort
                .iter()
                .find(|s| s.subject_id == t.subject_id)
                .with_context(|| format!("embedding '{}' has no cohort record", t.subject_id))?;
            Ok(ArchiveEntry::new(t, subject.label, subject.age, subject.sex))
        })
        .collect::<Result<Vec<_>>>()?;
    let archive = build_archive(entries)?;
    save_archive(&a.out, &archive)?;
    println!("archived {} trajectories to {}", archive.len(), a.out.display());
    Ok(())
}

fn find_trajectory(trajectories: &[TrajectoryVector], id: &str) -> Result<TrajectoryVector> {
    trajectories
        .iter()
        .find(|t| t.subject_id == id)
        .cloned()
        .with_context(|| format!("query id '{id}' not present in embeddings"))
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let archive = load_archive(&a.archive)?;
    let query = find_trajectory(&read_embeddings(&a.embeddings)?, &a.query_id)?;
    let neighbors = archive.search(&query.values, a.k)?;
    for (rank, n) in neighbors.iter().enumerate() {
        println!(
            "{}\t{}\t{:.6}\t{}\t{:.1}\t{:?}",
            rank + 1,
            n.subject_id,
            n.similarity,
            if n.label == 1 { "FAILURE" } else { "SUCCESS" },
            n.age,
            n.sex
        );
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let archive = load_archive(&a.archive)?;
    let query_traj = find_trajectory(&read_embeddings(&a.embeddings)?, &a.query_id)?;
    let (_, cohort) = load_cohort(&a.cohort)?;
    let subject = cohort
        .iter()
        .find(|s| s.subject_id == a.query_id)
        .with_context(|| format!("query id '{}' not present in cohort", a.query_id))?;
    let config = match &a.config {
        Some(path) => read_json_config::<OracleConfig>(path)?,
        None => OracleConfig::default(),
    };
    let query = QueryMeta {
        subject_id: subject.subject_id.clone(),
        age: subject.age,
        sex: subject.sex,
    };
    let external = ExternalProvider::from_env();
    let provider: &dyn VerdictProvider = match &external {
        Some(p) => p,
        None => &RuleBasedProvider,
    };
    let verdict = predict(&query, &query_traj.values, &archive, provider, &config)?;
    let output = serde_json::json!({
        "provider": provider.name(),
        "config": config,
        "verdict": verdict,
    });
    let text = serde_json::to_string_pretty(&output)?;
    match &a.out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn resolve_eval_config(
    config_path: Option<&Path>,
    cohort_spec: &CohortSpec,
    seed: Option<u64>,
    folds: Option<usize>,
) -> Result<EvalConfig> {
    let mut config = match config_path {
        Some(path) => read_json_config::<EvalConfig>(path)?,
        None => EvalConfig {
            encoder: EncoderConfig {
                volume_dim: cohort_spec.volume_dim,
                ..EncoderConfig::default()
            },
            ..EvalConfig::default()
        },
    };
    if let Some(seed) = seed {
        config.seed = seed;
        config.encoder.seed = seed;
        config.encoder.augmentation.seed = seed;
    }
    if let Some(folds) = folds {
        config.n_folds = folds;
    }
    Ok(config)
}

fn cmd_evaluate(a: EvaluateArgs, seed: Option<u64>) -> Result<()> {
    let method = Method::from_str(&a.method)?;
    let (spec, cohort) = load_cohort(&a.cohort)?;
    let config = resolve_eval_config(a.config.as_deref(), &spec, seed, a.folds)?;
    let outcome = run_cv(&cohort, method, &config)?;
    write_json_report(&a.out, &outcome.report)?;
    if let Some(dir) = &a.csv_dir {
        std::fs::create_dir_all(dir)?;
        write_roc_csv(&dir.join("roc.csv"), &outcome.report)?;
        write_threshold_csv(&dir.join("thresholds.csv"), &outcome.report)?;
    }
    if let Some(path) = &a.verdicts {
        if outcome.verdicts.is_empty() {
            bail!("method {} produces no verdicts to log", method.as_str());
        }
        write_verdict_log(path, &outcome.verdicts)?;
    }
    let agg = &outcome.report.aggregate_default;
    println!(
        "{}: AUC {:.4}, balanced accuracy {:.4} (best threshold {:.2} -> {:.4}); report {}",
        method.as_str(),
        agg.auc,
        agg.balanced_accuracy,
        outcome.report.threshold_sweep.best_threshold,
        outcome.report.aggregate_optimized.balanced_accuracy,
        a.out.display()
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs, seed: Option<u64>) -> Result<()> {
    let (spec, cohort) = load_cohort(&a.cohort)?;
    let config = resolve_eval_config(a.config.as_deref(), &spec, seed, None)?;
    let report = run_ablations(&cohort, &config)?;
    write_json_report(&a.out, &report)?;
    if let Some(path) = &a.csv {
        write_ablation_csv(path, &report)?;
    }
    for row in &report.rows {
        println!(
            "{}: AUC {:.4}, balanced accuracy {:.4}",
            row.method, row.aggregate.auc, row.aggregate.balanced_accuracy
        );
    }
    Ok(())
}

fn cmd_weight_sweep(a: WeightSweepArgs, seed: Option<u64>) -> Result<()> {
    let (spec, cohort) = load_cohort(&a.cohort)?;
    let config = resolve_eval_config(a.config.as_deref(), &spec, seed, None)?;
    let grid: Vec<f64> = match &a.grid {
        Some(text) => text
            .split(',')
            .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad weight '{t}'")))
            .collect::<Result<_>>()?,
        None => (0..=10).map(|i| i as f64 / 10.0).collect(),
    };
    let report = weight_sweep(&cohort, &grid, &config)?;
    write_json_report(&a.out, &report)?;
    for row in &report.rows {
        println!("w_n = {:.2}: calibration MAE {:.4}", row.neighbor_weight, row.calibration_mae);
    }
    Ok(())
}

fn cmd_audit(a: AuditArgs) -> Result<()> {
    let verdicts = read_verdict_log(&a.verdicts)?;
    let summary = summarize_audit(&verdicts)?;
    let text = serde_json::to_string_pretty(&summary)?;
    match &a.out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}
