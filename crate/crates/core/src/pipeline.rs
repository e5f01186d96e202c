//! End-to-end runs: synth → preprocess → split → train → attack → report.
//!
//! Every stage draws its seed from the global seed and a fixed stage name,
//! so changing one stage's configuration never reseeds another. Artifacts
//! are listed with their SHA-256 in `manifest.json`, and every CSV starts
//! with a `# config_hash=` line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, AttackResult, Attacker};
use crate::consistency::{fit_supports, ConsistencyConfig, ConsistencyEstimator, Supports};
use crate::dataset::Dataset;
use crate::embedding::{train_embedding, EmbeddingModel, TripletConfig};
use crate::error::{Error, Result};
use crate::metrics::{auc, mse};
use crate::preprocess::{fit_preprocessor, split, transform, PreprocessConfig, Preprocessor, RawTable, SplitSpec};
use crate::report::{self, build_report, write_records, write_report, Mode, RecordContext, ResultRecord};
use crate::schema::{parse_schema, Schema, Task};
use crate::surrogate::{train_solver, SolverConfig, SurrogateModel};
use crate::synth::{synth_generate, SynthSpec};
use crate::trees::{evaluate, train_tree_model, Evaluation, TreeKind, TreeModel, TreeParams};

/// Environment variable that replaces the configured global seed.
pub const SEED_ENV: &str = "TABATTACK_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Raw CSV; ignored when the synth stage is on.
    pub data: Option<PathBuf>,
    /// Schema manifest; ignored when the synth stage is on.
    pub schema: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: None,
            schema: None,
            output: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stages {
    pub synth: bool,
    /// Train tree targets and evaluate transfer.
    pub targets: bool,
    /// Importance-ranked attacks per target.
    pub adjusted: bool,
    /// Fit the consistency estimator and audit every output.
    pub audit: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            synth: true,
            targets: true,
            adjusted: true,
            audit: true,
        }
    }
}

/// Per-learner overrides; missing entries use [`TreeParams::for_kind`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeOverrides {
    pub dt: Option<TreeParams>,
    pub rf: Option<TreeParams>,
    pub gbm: Option<TreeParams>,
}

impl TreeOverrides {
    pub fn params(&self, kind: TreeKind, d: usize) -> TreeParams {
        let o = match kind {
            TreeKind::DecisionTree => &self.dt,
            TreeKind::RandomForest => &self.rf,
            TreeKind::Gbm => &self.gbm,
        };
        o.clone().unwrap_or_else(|| TreeParams::for_kind(kind, d))
    }
}

/// Seeds inside the module configs are ignored; each stage uses
/// [`stage_seed`] of the global seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: String,
    pub seed: u64,
    pub paths: Paths,
    pub stages: Stages,
    pub synth: SynthSpec,
    pub preprocess: PreprocessConfig,
    pub split: SplitSpec,
    /// `None` picks the classification or regression batch layout by task.
    pub embedding: Option<TripletConfig>,
    pub embedding_dim: usize,
    pub solver: SolverConfig,
    pub targets: Vec<TreeKind>,
    pub trees: TreeOverrides,
    pub attack: AttackConfig,
    pub consistency: ConsistencyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "synthetic".into(),
            seed: 0,
            paths: Paths::default(),
            stages: Stages::default(),
            synth: SynthSpec::reference(0),
            preprocess: PreprocessConfig::default(),
            split: SplitSpec::default(),
            embedding: None,
            embedding_dim: 4,
            solver: SolverConfig::default(),
            targets: TreeKind::ALL.to_vec(),
            trees: TreeOverrides::default(),
            attack: AttackConfig::default(),
            consistency: ConsistencyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Replace the seed with `TABATTACK_SEED` when it is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 characters.
    /// The output directory is left out so relocated runs share a hash.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = serde_json::to_value(self)?;
        if let Some(paths) = canonical.get_mut("paths").and_then(|p| p.as_object_mut()) {
            paths.remove("output");
        }
        Ok(hex::encode(Sha256::digest(canonical.to_string().as_bytes()))[..16].to_string())
    }

    fn triplet(&self, task: Task) -> TripletConfig {
        self.embedding.clone().unwrap_or_else(|| match task {
            Task::BinaryClassification => TripletConfig::default(),
            Task::Regression => TripletConfig::regression(),
        })
    }
}

/// Seed of a named stage; stable across releases.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, format!("{text}\n")).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

/// Preprocessed splits with their fitted pipeline.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub preprocessor: Arc<Preprocessor>,
    pub schema: Arc<Schema>,
    pub train: Dataset,
    pub validation: Dataset,
    pub attack: Dataset,
}

pub const PREPROCESSOR_FILE: &str = "preprocessor.json";
pub const SCHEMA_FILE: &str = "schema.json";
pub const SPLIT_FILES: [&str; 3] = ["train.csv", "validation.csv", "attack.csv"];

impl Prepared {
    /// Every split; supports are fitted on their union.
    pub fn all(&self) -> Result<Dataset> {
        Dataset::concat(&[&self.train, &self.validation, &self.attack])
    }

    pub fn write(&self, dir: &Path, config_hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(PREPROCESSOR_FILE), &*self.preprocessor)?;
        let schema = dir.join(SCHEMA_FILE);
        std::fs::write(&schema, self.schema.to_manifest()?).map_err(|e| Error::io(&schema, e))?;
        let comment = format!("config_hash={config_hash}");
        for (name, ds) in SPLIT_FILES.iter().zip([&self.train, &self.validation, &self.attack]) {
            ds.write_csv(&dir.join(name), Some(&comment))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let preprocessor: Arc<Preprocessor> = Arc::new(read_json(&dir.join(PREPROCESSOR_FILE))?);
        let schema_path = dir.join(SCHEMA_FILE);
        require(&schema_path)?;
        let text = std::fs::read_to_string(&schema_path).map_err(|e| Error::io(&schema_path, e))?;
        let schema = Arc::new(parse_schema(&text)?);
        let read = |name: &str| Dataset::read_csv(&dir.join(name), schema.clone(), Some(preprocessor.clone()));
        Ok(Prepared {
            train: read(SPLIT_FILES[0])?,
            validation: read(SPLIT_FILES[1])?,
            attack: read(SPLIT_FILES[2])?,
            preprocessor,
            schema,
        })
    }
}

/// Read a raw table and its schema manifest; both paths must exist.
pub fn load_raw(data: &Path, schema: &Path) -> Result<(RawTable, Schema)> {
    require(schema)?;
    require(data)?;
    let text = std::fs::read_to_string(schema).map_err(|e| Error::io(schema, e))?;
    Ok((RawTable::read_csv(data)?, parse_schema(&text)?))
}

pub fn prepare(table: &RawTable, schema: &Schema, pre: &PreprocessConfig, spec: &SplitSpec) -> Result<Prepared> {
    let p = Arc::new(fit_preprocessor(table, schema, pre)?);
    let ds = transform(&p, table)?;
    let s = split(&ds, spec)?;
    Ok(Prepared {
        preprocessor: p,
        schema: s.train.schema().clone(),
        train: s.train,
        validation: s.validation,
        attack: s.attack,
    })
}

/// Train the embedding, then the task solver on top of it.
pub fn train_surrogate(
    prepared: &Prepared,
    triplet: &TripletConfig,
    dim: usize,
    solver: &SolverConfig,
) -> Result<SurrogateModel> {
    let embedding = train_embedding(&prepared.train, triplet, dim)?;
    fit_head(embedding, prepared, solver)
}

pub fn fit_head(embedding: EmbeddingModel, prepared: &Prepared, solver: &SolverConfig) -> Result<SurrogateModel> {
    let head = train_solver(&embedding, &prepared.train, Some(&prepared.validation), solver)?;
    SurrogateModel::new(embedding, head)
}

/// Surrogate quality on a labelled set: AUC for classification, MSE otherwise.
pub fn surrogate_quality(m: &SurrogateModel, data: &Dataset) -> Result<Evaluation> {
    let scores = m.score_batch(data.features().view())?;
    match m.task() {
        Task::BinaryClassification => Ok(Evaluation::Auc(auc(&scores, data.labels())?)),
        Task::Regression => Ok(Evaluation::Mse(mse(&scores, data.labels())?)),
    }
}

/// Fraction of validation rows where surrogate and target decisions agree.
pub fn agreement(m: &SurrogateModel, t: &TreeModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Undefined("agreement on an empty set".into()));
    }
    let mut same = 0usize;
    for i in 0..data.len() {
        let x = data.sample(i).x;
        if m.predict(&x)? == t.predict(&x)? {
            same += 1;
        }
    }
    Ok(same as f64 / data.len() as f64)
}

/// Raw outputs of one attack pass over the attack split.
#[derive(Debug, Clone)]
pub struct AttackBatch {
    pub mode: Mode,
    pub ranking: Option<TreeKind>,
    pub results: Vec<AttackResult>,
}

/// Attack the attack split in gradient mode and, per target, in importance
/// mode; returns flattened records in a fixed order plus the raw batches.
#[allow(clippy::too_many_arguments)]
pub fn attack_records(
    dataset: &str,
    surrogate: &SurrogateModel,
    prepared: &Prepared,
    supports: &Supports,
    estimator: Option<&ConsistencyEstimator>,
    targets: &[TreeModel],
    config: &AttackConfig,
    adjusted: bool,
) -> Result<(Vec<ResultRecord>, Vec<AttackBatch>)> {
    let attacker = Attacker {
        surrogate,
        supports,
        schema: &prepared.schema,
        estimator,
        config,
    };
    let data = &prepared.attack;
    let base = attacker.craft_all(data, None)?;
    let mut out = report::records(
        &RecordContext {
            dataset,
            mode: Mode::Gradient,
            ranking: None,
            data,
            targets,
            tau: config.tau,
        },
        &base,
    )?;
    let mut batches = vec![AttackBatch {
        mode: Mode::Gradient,
        ranking: None,
        results: base,
    }];
    if adjusted {
        for t in targets {
            let res = attacker.craft_all(data, Some(t))?;
            out.extend(report::records(
                &RecordContext {
                    dataset,
                    mode: Mode::Importance,
                    ranking: Some(t.kind),
                    data,
                    targets,
                    tau: config.tau,
                },
                &res,
            )?);
            batches.push(AttackBatch {
                mode: Mode::Importance,
                ranking: Some(t.kind),
                results: res,
            });
        }
    }
    Ok((out, batches))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub surrogate_quality: Evaluation,
    pub target_quality: BTreeMap<String, Evaluation>,
    /// Validation agreement between surrogate and each target.
    pub agreement: BTreeMap<String, f64>,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Where a run wrote its outputs.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub root: PathBuf,
    pub report_dir: PathBuf,
    pub results: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<ResultRecord>,
    pub attacks: Vec<AttackBatch>,
}

pub const STAGES: [&str; 8] = [
    "synth",
    "preprocess",
    "embedding",
    "solver",
    "targets",
    "attack",
    "consistency",
    "split",
];

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Run every enabled stage in dependency order and write the artifact tree
/// under `config.paths.output`.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    let hash = config.hash()?;
    let seeds: BTreeMap<String, u64> = STAGES
        .iter()
        .map(|s| (s.to_string(), stage_seed(config.seed, s)))
        .collect();
    let root = config.paths.output.clone();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut artifacts: Vec<PathBuf> = Vec::new();

    let (table, schema) = if config.stages.synth {
        let out = synth_generate(&SynthSpec {
            seed: seeds["synth"],
            ..config.synth.clone()
        })?;
        let dir = root.join("data");
        out.write(&dir, Some(&format!("config_hash={hash}")))?;
        artifacts.extend([dir.join("data.csv"), dir.join("schema.json")]);
        (out.table, out.schema)
    } else {
        let data = config
            .paths
            .data
            .as_deref()
            .ok_or_else(|| Error::Config("paths.data is required when the synth stage is off".into()))?;
        let schema = config
            .paths
            .schema
            .as_deref()
            .ok_or_else(|| Error::Config("paths.schema is required when the synth stage is off".into()))?;
        load_raw(data, schema)?
    };
    log::info!("preprocessing {} rows", table.rows.len());
    let prepared = prepare(
        &table,
        &schema,
        &PreprocessConfig {
            seed: seeds["preprocess"],
            ..config.preprocess.clone()
        },
        &SplitSpec {
            seed: seeds["split"],
            ..config.split.clone()
        },
    )?;
    let prep_dir = root.join("prep");
    prepared.write(&prep_dir, &hash)?;
    artifacts.push(prep_dir.join(PREPROCESSOR_FILE));
    artifacts.push(prep_dir.join(SCHEMA_FILE));
    artifacts.extend(SPLIT_FILES.iter().map(|f| prep_dir.join(f)));

    let task = prepared.schema.task();
    log::info!("training surrogate");
    let surrogate = train_surrogate(
        &prepared,
        &TripletConfig {
            seed: seeds["embedding"],
            ..config.triplet(task)
        },
        config.embedding_dim,
        &SolverConfig {
            seed: seeds["solver"],
            ..config.solver.clone()
        },
    )?;
    let models = root.join("models");
    std::fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;
    surrogate.save(&models.join("surrogate.json"))?;
    artifacts.push(models.join("surrogate.json"));
    let surrogate_quality = surrogate_quality(&surrogate, &prepared.validation)?;
    log::info!("surrogate validation {surrogate_quality:?}");

    let mut targets = Vec::new();
    let mut target_quality = BTreeMap::new();
    let mut agreements = BTreeMap::new();
    if config.stages.targets {
        for (i, &kind) in config.targets.iter().enumerate() {
            log::info!("training target {}", kind.short_name());
            let params = config.trees.params(kind, prepared.schema.dim());
            let t = train_tree_model(
                kind,
                &prepared.train,
                &params,
                stage_seed(seeds["targets"], &i.to_string()),
            )?;
            let path = models.join(format!("{}.json", kind.short_name()));
            t.save(&path)?;
            artifacts.push(path);
            target_quality.insert(kind.short_name().to_string(), evaluate(&t, &prepared.validation)?);
            agreements.insert(
                kind.short_name().to_string(),
                agreement(&surrogate, &t, &prepared.validation)?,
            );
            targets.push(t);
        }
    }

    let supports = fit_supports(&prepared.all()?)?;
    write_json(&models.join("supports.json"), &supports)?;
    artifacts.push(models.join("supports.json"));
    let estimator = if config.stages.audit {
        let est = ConsistencyEstimator::fit(&prepared.train, &supports, &config.consistency)?;
        write_json(&models.join("estimator.json"), &est)?;
        artifacts.push(models.join("estimator.json"));
        Some(est)
    } else {
        None
    };

    log::info!("attacking {} samples", prepared.attack.len());
    let (records, attacks) = attack_records(
        &config.dataset,
        &surrogate,
        &prepared,
        &supports,
        estimator.as_ref(),
        &targets,
        &config.attack,
        config.stages.targets && config.stages.adjusted,
    )?;
    let results_dir = root.join("results");
    std::fs::create_dir_all(&results_dir).map_err(|e| Error::io(&results_dir, e))?;
    let results = results_dir.join(report::RESULTS_FILE);
    write_records(&results, &records, &hash)?;
    artifacts.push(results.clone());

    // The report is rebuilt from the file just written, not from memory.
    let report_dir = root.join("report");
    let bundle = build_report(&report::read_records(&results)?)?;
    write_report(&report_dir, &bundle, &hash)?;
    for f in [
        report::SUMMARY_FILE,
        report::TRANSFER_FILE,
        report::HISTOGRAM_FILE,
        report::VALIDITY_FILE,
    ] {
        artifacts.push(report_dir.join(f));
    }

    write_json(&root.join("config.json"), config)?;
    artifacts.push(root.join("config.json"));
    let manifest = Manifest {
        config_hash: hash,
        seed: config.seed,
        stage_seeds: seeds,
        surrogate_quality,
        target_quality,
        agreement: agreements,
        artifacts: artifacts
            .iter()
            .map(|p| {
                Ok(ArtifactEntry {
                    path: p.strip_prefix(&root).unwrap_or(p).to_string_lossy().replace('\\', "/"),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<_>>()?,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(RunOutput {
        root,
        report_dir,
        results,
        manifest,
        records,
        attacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> RunConfig {
        RunConfig {
            paths: Paths {
                output: dir.to_path_buf(),
                ..Paths::default()
            },
            synth: SynthSpec {
                n_samples: 700,
                ..SynthSpec::reference(0)
            },
            split: SplitSpec {
                attack_set_size: 40,
                ..SplitSpec::default()
            },
            embedding: Some(TripletConfig {
                epochs: 3,
                ..TripletConfig::default()
            }),
            solver: SolverConfig {
                epochs: 5,
                ..SolverConfig::default()
            },
            trees: TreeOverrides {
                rf: Some(TreeParams {
                    n_trees: 5,
                    ..TreeParams::for_kind(TreeKind::RandomForest, 20)
                }),
                gbm: Some(TreeParams {
                    n_trees: 10,
                    ..TreeParams::for_kind(TreeKind::Gbm, 20)
                }),
                dt: None,
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let a: Vec<u64> = STAGES.iter().map(|s| stage_seed(7, s)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), STAGES.len());
        assert_eq!(stage_seed(7, "attack"), a[5]);
        assert_ne!(stage_seed(8, "attack"), a[5]);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.attack.tau = 0.5;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(back.hash().unwrap(), a.hash().unwrap());
    }

    #[test]
    fn small_run_writes_bundle_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&small(dir.path())).unwrap();
        for f in ["summary.csv", "transfer.csv", "l0_hist.json", "validity.csv"] {
            assert!(out.report_dir.join(f).exists(), "{f}");
        }
        let hash = out.manifest.config_hash.clone();
        assert_eq!(
            report::read_config_hash(&out.report_dir.join("summary.csv")).unwrap(),
            Some(hash.clone())
        );
        for a in &out.manifest.artifacts {
            assert_eq!(sha256_file(&out.root.join(&a.path)).unwrap(), a.sha256);
        }
        assert_eq!(out.records.len(), 40 * 4);
        let prepared = Prepared::load(&out.root.join("prep")).unwrap();
        assert_eq!(prepared.attack.len(), 40);
        assert_eq!(prepared.schema.dim(), 20);
    }

    #[test]
    fn missing_schema_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.stages.synth = false;
        cfg.paths.data = Some(dir.path().join("data.csv"));
        cfg.paths.schema = Some(dir.path().join("nope.json"));
        let err = run(&cfg).unwrap_err();
        assert!(err.to_string().contains("nope.json"), "{err}");
    }
}
