//! `tabattack`: one binary, one subcommand per pipeline stage plus `run`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tabattack::attack::{AttackConfig, Attacker};
use tabattack::consistency::{fit_supports, ConsistencyConfig, ConsistencyEstimator};
use tabattack::embedding::{train_embedding, EmbeddingModel, TripletConfig};
use tabattack::pipeline::{self, read_json, write_json, Prepared, RunConfig};
use tabattack::preprocess::{PreprocessConfig, SplitSpec};
use tabattack::report::{self, build_report, write_records, write_report, Mode, RecordContext};
use tabattack::surrogate::{SolverConfig, SurrogateModel};
use tabattack::synth::{synth_generate, SynthSpec};
use tabattack::trees::{evaluate, train_tree_model, TreeKind, TreeModel, TreeParams};
use tabattack::{Error, Result, Task};

#[derive(Parser)]
#[command(
    name = "tabattack",
    version,
    about = "Validity-preserving l0 attacks on tabular models"
)]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic table and its schema manifest.
    Synth(SynthArgs),
    /// Fit preprocessing, transform and split a raw table.
    Preprocess(PreprocessArgs),
    /// Train the metric-learned embedding.
    TrainEmbedding(EmbeddingArgs),
    /// Train the task head on a frozen embedding.
    TrainSurrogate(SurrogateArgs),
    /// Train tree-based target models.
    TrainTargets(TargetsArgs),
    /// Attack the attack split with a trained surrogate.
    Attack(AttackArgs),
    /// Aggregate per-sample results into the report bundle.
    Report(ReportArgs),
    /// Run the whole pipeline from a configuration file.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Reference,
    Regression,
    MonotonePair,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "reference")]
    preset: Preset,
    /// JSON spec; replaces the preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON `PreprocessConfig`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    attack_size: Option<usize>,
}

#[derive(Args)]
struct EmbeddingArgs {
    /// Directory written by `preprocess`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `<data>/embedding.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SurrogateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    embedding: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `<data>/surrogate.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TargetsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated subset of dt, rf, gbm.
    #[arg(long, default_value = "dt,rf,gbm")]
    models: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `<model>.json`; defaults to `<data>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackMode {
    Gradient,
    Importance,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    surrogate: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON `AttackConfig`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gradient")]
    mode: AttackMode,
    /// Target whose importance ranks features (importance mode).
    #[arg(long)]
    target: Option<PathBuf>,
    /// Targets to evaluate transfer on; comma-separated model files.
    #[arg(long, value_delimiter = ',')]
    eval_targets: Vec<PathBuf>,
    /// Audit outputs with a consistency estimator fitted on the train split.
    #[arg(long)]
    audit: bool,
    #[arg(long, default_value = "dataset")]
    dataset: String,
    /// Also write one JSON trace per sample.
    #[arg(long)]
    trace: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding `results*.csv` files.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON `RunConfig`; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `paths.output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed; `TABATTACK_SEED` wins over both.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let (stage, outcome) = dispatch(cli.command);
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let record = serde_json::json!({ "status": "error", "stage": stage, "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> (&'static str, Result<()>) {
    match cmd {
        Command::Synth(a) => ("synth", synth(a)),
        Command::Preprocess(a) => ("preprocess", preprocess(a)),
        Command::TrainEmbedding(a) => ("train-embedding", embedding(a)),
        Command::TrainSurrogate(a) => ("train-surrogate", surrogate(a)),
        Command::TrainTargets(a) => ("train-targets", targets(a)),
        Command::Attack(a) => ("attack", attack(a)),
        Command::Report(a) => ("report", report_cmd(a)),
        Command::Run(a) => ("run", run(a)),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_json::<SynthSpec>(p)?,
        None => match a.preset {
            Preset::Reference => SynthSpec::reference(a.seed),
            Preset::Regression => SynthSpec::regression(a.seed),
            Preset::MonotonePair => SynthSpec::monotone_pair(a.seed),
        },
    };
    spec.seed = a.seed;
    if let Some(n) = a.samples {
        spec.n_samples = n;
    }
    synth_generate(&spec)?.write(&a.out, None)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let (table, schema) = pipeline::load_raw(&a.data, &a.schema)?;
    let mut cfg: PreprocessConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PreprocessConfig::default(),
    };
    cfg.seed = a.seed;
    let mut spec = SplitSpec {
        seed: a.seed,
        ..SplitSpec::default()
    };
    if let Some(n) = a.attack_size {
        spec.attack_set_size = n;
    }
    let prepared = pipeline::prepare(&table, &schema, &cfg, &spec)?;
    prepared.write(&a.out, "none")?;
    for d in &prepared.preprocessor.dropped {
        println!("dropped {}: {:?}", d.name, d.reason);
    }
    println!(
        "train {} / validation {} / attack {} rows, {} features",
        prepared.train.len(),
        prepared.validation.len(),
        prepared.attack.len(),
        prepared.schema.dim()
    );
    Ok(())
}

fn triplet_for(task: Task) -> TripletConfig {
    match task {
        Task::BinaryClassification => TripletConfig::default(),
        Task::Regression => TripletConfig::regression(),
    }
}

fn embedding(a: EmbeddingArgs) -> Result<()> {
    let prepared = Prepared::load(&a.data)?;
    let mut cfg = TripletConfig {
        seed: a.seed,
        ..triplet_for(prepared.schema.task())
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let model = train_embedding(&prepared.train, &cfg, a.dim)?;
    let out = a.out.unwrap_or_else(|| a.data.join("embedding.json"));
    write_json(&out, &model)?;
    println!("wrote {} (final loss {:?})", out.display(), model.loss_history.last());
    Ok(())
}

fn surrogate(a: SurrogateArgs) -> Result<()> {
    let prepared = Prepared::load(&a.data)?;
    let emb: EmbeddingModel = read_json(&a.embedding)?;
    let mut cfg = SolverConfig {
        seed: a.seed,
        ..SolverConfig::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let model = pipeline::fit_head(emb, &prepared, &cfg)?;
    let out = a.out.unwrap_or_else(|| a.data.join("surrogate.json"));
    model.save(&out)?;
    println!(
        "wrote {} (validation {:?})",
        out.display(),
        pipeline::surrogate_quality(&model, &prepared.validation)?
    );
    Ok(())
}

fn targets(a: TargetsArgs) -> Result<()> {
    let prepared = Prepared::load(&a.data)?;
    let dir = a.out.unwrap_or_else(|| a.data.clone());
    std::fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    for (i, name) in a.models.split(',').map(str::trim).filter(|s| !s.is_empty()).enumerate() {
        let kind = TreeKind::parse(name)?;
        let params = TreeParams::for_kind(kind, prepared.schema.dim());
        let t = train_tree_model(
            kind,
            &prepared.train,
            &params,
            pipeline::stage_seed(a.seed, &i.to_string()),
        )?;
        let path = dir.join(format!("{}.json", kind.short_name()));
        t.save(&path)?;
        println!(
            "wrote {} (validation {:?})",
            path.display(),
            evaluate(&t, &prepared.validation)?
        );
    }
    Ok(())
}

fn attack(a: AttackArgs) -> Result<()> {
    let prepared = Prepared::load(&a.data)?;
    let model = SurrogateModel::load(&a.surrogate)?;
    let cfg: AttackConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AttackConfig::default(),
    };
    let ranking = match (a.mode, &a.target) {
        (AttackMode::Importance, Some(p)) => Some(TreeModel::load(p)?),
        (AttackMode::Importance, None) => {
            return Err(Error::Config("importance mode needs --target".into()));
        }
        (AttackMode::Gradient, _) => None,
    };
    let mut eval_targets: Vec<TreeModel> = a
        .eval_targets
        .iter()
        .map(|p| TreeModel::load(p))
        .collect::<Result<_>>()?;
    if let Some(t) = &ranking {
        if !eval_targets.iter().any(|e| e.kind == t.kind) {
            eval_targets.push(t.clone());
        }
    }
    let supports = fit_supports(&prepared.all()?)?;
    let estimator = if a.audit {
        Some(ConsistencyEstimator::fit(
            &prepared.train,
            &supports,
            &ConsistencyConfig::default(),
        )?)
    } else {
        None
    };
    let attacker = Attacker {
        surrogate: &model,
        supports: &supports,
        schema: &prepared.schema,
        estimator: estimator.as_ref(),
        config: &cfg,
    };
    let results = attacker.craft_all(&prepared.attack, ranking.as_ref())?;
    let ctx = RecordContext {
        dataset: &a.dataset,
        mode: if ranking.is_some() {
            Mode::Importance
        } else {
            Mode::Gradient
        },
        ranking: ranking.as_ref().map(|t| t.kind),
        data: &prepared.attack,
        targets: &eval_targets,
        tau: cfg.tau,
    };
    let records = report::records(&ctx, &results)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Config(format!("{}: {e}", a.out.display())))?;
    let name = match &ranking {
        Some(t) => format!("results_importance_{}.csv", t.kind.short_name()),
        None => "results_gradient.csv".to_string(),
    };
    let path = a.out.join(&name);
    write_records(&path, &records, "none")?;
    if a.trace {
        let stem = name.trim_end_matches(".csv");
        let dir = a.out.join("traces");
        for (i, r) in results.iter().enumerate() {
            write_json(&dir.join(format!("{stem}_{i}.json")), r)?;
        }
    }
    let wins = results.iter().filter(|r| r.succeeded).count();
    println!("wrote {} ({wins}/{} succeeded)", path.display(), results.len());
    Ok(())
}

fn result_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("results"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingInput(dir.join(report::RESULTS_FILE)));
    }
    Ok(files)
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let files = result_files(&a.results)?;
    let mut records = Vec::new();
    for f in &files {
        records.extend(report::read_records(f)?);
    }
    let hash = report::read_config_hash(&files[0])?.unwrap_or_else(|| "none".into());
    write_report(&a.out, &build_report(&records)?, &hash)?;
    println!("wrote report to {}", a.out.display());
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = a.out {
        cfg.paths.output = o;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.apply_seed_env()?;
    let out = pipeline::run(&cfg)?;
    println!("config_hash {}", out.manifest.config_hash);
    println!("surrogate validation {:?}", out.manifest.surrogate_quality);
    for (k, v) in &out.manifest.target_quality {
        println!("target {k} validation {v:?}");
    }
    let summary = std::fs::read_to_string(out.report_dir.join(report::SUMMARY_FILE))
        .map_err(|e| Error::Config(format!("{}: {e}", out.report_dir.display())))?;
    print!("{summary}");
    println!("report written to {}", out.report_dir.display());
    Ok(())
}
