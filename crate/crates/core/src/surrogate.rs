//! Surrogate `M̃ = C ∘ f`: a frozen embedding followed by a one-neuron task
//! solver.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::diff::{sigmoid, softplus, Activation, Loss, Network, OptimizerKind, OptimizerState};
use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::schema::Task;

/// Dense `e -> 1` head; sigmoid for classification, identity for regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSolver {
    pub network: Network,
    pub task: Task,
}

impl TaskSolver {
    pub fn new(embedding_dim: usize, task: Task, seed: u64) -> Result<Self> {
        let act = match task {
            Task::BinaryClassification => Activation::Sigmoid,
            Task::Regression => Activation::Identity,
        };
        Ok(TaskSolver {
            network: Network::new(embedding_dim, &[(1, act)], seed)?,
            task,
        })
    }

    pub fn loss(&self) -> Loss {
        match self.task {
            Task::BinaryClassification => Loss::BinaryCrossEntropy,
            Task::Regression => Loss::MeanSquaredError,
        }
    }

    /// Weights of the single neuron; the gradient of the pre-activation with
    /// respect to the embedding.
    pub fn weights(&self) -> Vec<f64> {
        self.network.layers()[0].weights.column(0).to_vec()
    }

    /// Pre-activation `w·e + b`.
    pub fn logit(&self, e: &[f64]) -> f64 {
        let l = &self.network.layers()[0];
        l.weights.column(0).iter().zip(e).map(|(w, v)| w * v).sum::<f64>() + l.bias[0]
    }

    /// Output given the pre-activation.
    pub fn link(&self, z: f64) -> f64 {
        match self.task {
            Task::BinaryClassification => sigmoid(z),
            Task::Regression => z,
        }
    }

    /// Task loss and its derivative with respect to the pre-activation.
    pub fn task_loss(&self, z: f64, y: f64) -> (f64, f64) {
        match self.task {
            Task::BinaryClassification => (softplus(z) - y * z, sigmoid(z) - y),
            Task::Regression => ((z - y) * (z - y), 2.0 * (z - y)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            epochs: 100,
            learning_rate: 0.001,
            batch_size: 32,
            patience: 10,
            seed: 0,
        }
    }
}

fn targets_of(ds: &Dataset) -> Array2<f64> {
    Array2::from_shape_vec((ds.len(), 1), ds.labels().to_vec()).expect("one target per row")
}

/// Fit the head on `{f(x)}` with Adam. The embedding is only read.
pub fn train_solver(
    embedding: &EmbeddingModel,
    train: &Dataset,
    validation: Option<&Dataset>,
    cfg: &SolverConfig,
) -> Result<TaskSolver> {
    let task = train.schema().task();
    if embedding.input_dim() != train.dim() {
        return Err(Error::Shape(format!(
            "embedding expects {} features, data has {}",
            embedding.input_dim(),
            train.dim()
        )));
    }
    if (task == Task::Regression) != embedding.bin_edges.is_some() {
        return Err(Error::Config("embedding was trained for a different task".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut solver = TaskSolver::new(embedding.dim, task, cfg.seed)?;
    let e_train = embedding.embed_batch(train.features().view())?;
    let t_train = targets_of(train);
    let val = match validation {
        Some(v) if !v.is_empty() => Some((embedding.embed_batch(v.features().view())?, targets_of(v))),
        _ => None,
    };
    let loss = solver.loss();
    let mut opt = OptimizerState::new(OptimizerKind::adam(cfg.learning_rate), solver.network.parameter_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x50_1e_e5);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, solver.network.clone());
    let mut stale = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = e_train.select(Axis(0), chunk);
            let tb = t_train.select(Axis(0), chunk);
            let (_, grads) = solver.network.loss_and_gradients(loss, xb.view(), tb.view())?;
            opt.step_network(&mut solver.network, &grads)?;
        }
        if let Some((ev, tv)) = &val {
            let v = solver.network.loss(loss, ev.view(), tv.view())?;
            if v < best.0 {
                best = (v, solver.network.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if val.is_some() && best.0.is_finite() {
        solver.network = best.1;
    }
    Ok(solver)
}

const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Bundle {
    version: u32,
    task: Task,
    embedding: EmbeddingModel,
    solver: TaskSolver,
}

/// Embedding and solver composed.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub embedding: EmbeddingModel,
    pub solver: TaskSolver,
}

impl SurrogateModel {
    pub fn new(embedding: EmbeddingModel, solver: TaskSolver) -> Result<Self> {
        if solver.network.input_dim() != embedding.dim {
            return Err(Error::Shape("solver width differs from embedding dimension".into()));
        }
        Ok(SurrogateModel { embedding, solver })
    }

    pub fn task(&self) -> Task {
        self.solver.task
    }

    pub fn input_dim(&self) -> usize {
        self.embedding.input_dim()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::LengthMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input coordinate {i}")));
        }
        Ok(())
    }

    /// Probability of class 1, or the regression output.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let e = self.embedding.embed(x)?;
        Ok(self.solver.link(self.solver.logit(&e)))
    }

    pub fn score_batch(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let e = self.embedding.embed_batch(x)?;
        Ok(e.rows()
            .into_iter()
            .map(|r| {
                self.solver
                    .link(self.solver.logit(r.as_slice().expect("standard layout")))
            })
            .collect())
    }

    /// Thresholded label for classification, raw output for regression.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(decide(self.task(), self.score(x)?))
    }

    /// `∇_x L(M̃(x), y)` for the training loss of the head. Immutable
    /// coordinates are included; masking happens in the attack.
    pub fn input_gradient(&self, x: &[f64], y: f64) -> Result<Vec<f64>> {
        self.check(x)?;
        let (e, vjp) = self.embedding.embed_with_vjp(x)?;
        let (_, dz) = self.solver.task_loss(self.solver.logit(&e), y);
        let ge: Vec<f64> = self.solver.weights().iter().map(|w| w * dz).collect();
        let g = vjp(&ge)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input gradient".into()));
        }
        Ok(g)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Bundle {
            version: BUNDLE_VERSION,
            task: self.task(),
            embedding: self.embedding.clone(),
            solver: self.solver.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: Bundle = serde_json::from_str(s)?;
        if b.version != BUNDLE_VERSION {
            return Err(Error::Data(format!(
                "unsupported surrogate bundle version {}",
                b.version
            )));
        }
        if b.task != b.solver.task {
            return Err(Error::Data("bundle task does not match its solver".into()));
        }
        Self::new(b.embedding, b.solver)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Label for classification scores (`>= 0.5` is class 1); identity otherwise.
pub fn decide(task: Task, score: f64) -> f64 {
    match task {
        Task::BinaryClassification => f64::from(u8::from(score >= 0.5)),
        Task::Regression => score,
    }
}

/// SHA-256 of the serialized embedding; used to prove it stays frozen.
pub fn embedding_checksum(e: &EmbeddingModel) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(e)?)))
}
