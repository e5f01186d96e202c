//! Saliency-guided ℓ0 attack on the surrogate, with an importance-adjusted
//! variant for tree targets.
//!
//! Each outer iteration selects one new mutable feature, optimizes all
//! selected coordinates with a few Adam steps on `L* = L_adv + w · L_spatial`,
//! then projects them back onto their supports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{project_coords, validity_check, ConsistencyEstimator, Supports, ValidityReport};
use crate::dataset::Dataset;
use crate::diff::{sigmoid, softplus, OptimizerKind, OptimizerState};
use crate::error::{Error, Result};
use crate::schema::{mutable_count, Schema, Task};
use crate::surrogate::{decide, SurrogateModel};
use crate::trees::TreeModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// λ: most features that may be selected; `None` means every mutable one.
    pub max_features: Option<usize>,
    /// Regression success threshold on `|M̃(x*) - y|`.
    pub tau: f64,
    /// Extra distance the regression hinge aims past `tau`.
    pub margin_pad: f64,
    pub inner_steps: usize,
    pub learning_rate: f64,
    /// Cap on outer iterations; `None` means λ.
    pub max_outer_iterations: Option<usize>,
    pub spatial_weight: f64,
    /// Rank by raw `G_i` instead of `|G_i|`.
    pub signed_selection: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            max_features: None,
            tau: 0.75,
            margin_pad: 0.05,
            inner_steps: 20,
            learning_rate: 0.05,
            max_outer_iterations: None,
            // The negated cross-entropy gradient vanishes on confident
            // samples while the spatial gradient keeps unit norm, so any
            // larger weight pulls those attacks back toward f(x) and stalls them.
            spatial_weight: 0.01,
            signed_selection: false,
        }
    }
}

impl AttackConfig {
    /// Effective λ for a schema.
    pub fn lambda(&self, schema: &Schema) -> Result<usize> {
        let m = mutable_count(schema);
        match self.max_features {
            Some(l) if l > m => Err(Error::Config(format!("λ = {l} exceeds the {m} mutable features"))),
            Some(l) => Ok(l),
            None => Ok(m),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.spatial_weight < 0.0 {
            return Err(Error::Config(
                "learning rate must be positive and spatial weight nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    SurrogateGradient,
    TargetImportance,
}

/// `L* = L_adv + spatial_weight · ‖f(x) − f(x*)‖₂` for one sample.
#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    pub task: Task,
    pub y: f64,
    /// `f(x)` of the unperturbed sample.
    pub anchor: Vec<f64>,
    pub spatial_weight: f64,
    pub tau: f64,
    pub margin_pad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub adversarial: f64,
    pub spatial: f64,
}

impl ObjectiveSpec {
    pub fn new(m: &SurrogateModel, x: &[f64], y: f64, cfg: &AttackConfig) -> Result<Self> {
        Ok(ObjectiveSpec {
            task: m.task(),
            y,
            anchor: m.embedding.embed(x)?,
            spatial_weight: cfg.spatial_weight,
            tau: cfg.tau,
            margin_pad: cfg.margin_pad,
        })
    }

    /// `L_adv` and its derivative with respect to the solver pre-activation.
    fn adversarial(&self, z: f64) -> (f64, f64) {
        match self.task {
            // Negated cross-entropy of the true label.
            Task::BinaryClassification => (-(softplus(z) - self.y * z), -(sigmoid(z) - self.y)),
            Task::Regression => {
                let r = z - self.y;
                let h = self.tau + self.margin_pad - r.abs();
                if h > 0.0 {
                    (h, if r >= 0.0 { -1.0 } else { 1.0 })
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }

    /// Objective value and its gradient with respect to `x*`.
    pub fn value_and_gradient(&self, m: &SurrogateModel, x_star: &[f64]) -> Result<(ObjectiveValue, Vec<f64>)> {
        let (e, vjp) = m.embedding.embed_with_vjp(x_star)?;
        let (adv, dz) = self.adversarial(m.solver.logit(&e));
        let mut ge: Vec<f64> = m.solver.weights().iter().map(|w| w * dz).collect();
        let diff: Vec<f64> = e.iter().zip(&self.anchor).map(|(a, b)| a - b).collect();
        let spatial = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        if spatial > 0.0 && self.spatial_weight > 0.0 {
            for (g, d) in ge.iter_mut().zip(&diff) {
                *g += self.spatial_weight * d / spatial;
            }
        }
        let value = ObjectiveValue {
            total: adv + self.spatial_weight * spatial,
            adversarial: adv,
            spatial,
        };
        if !value.total.is_finite() {
            return Err(Error::NonFinite("attack objective".into()));
        }
        let g = vjp(&ge)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attack gradient".into()));
        }
        Ok((value, g))
    }

    pub fn value(&self, m: &SurrogateModel, x_star: &[f64]) -> Result<ObjectiveValue> {
        Ok(self.value_and_gradient(m, x_star)?.0)
    }
}

/// Argmax over indices outside `selected ∪ immutable`; lowest index wins ties.
pub fn select_feature(scores: &[f64], selected: &[usize], immutable: &[usize], signed: bool) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &g) in scores.iter().enumerate() {
        if selected.contains(&i) || immutable.contains(&i) {
            continue;
        }
        let v = if signed { g } else { g.abs() };
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::NoEligibleFeature)
}

/// Per-coordinate Adam states; a coordinate keeps its state once selected.
#[derive(Debug, Clone)]
pub struct StepState {
    kind: OptimizerKind,
    coords: Vec<Option<OptimizerState>>,
}

impl StepState {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        StepState {
            kind: OptimizerKind::adam(learning_rate),
            coords: vec![None; dim],
        }
    }
}

/// Run `steps` Adam iterations on the coordinates in `selected`, all others
/// frozen, and return the cumulative step `α`.
pub fn compute_step(
    m: &SurrogateModel,
    x_star: &[f64],
    objective: &ObjectiveSpec,
    selected: &[usize],
    state: &mut StepState,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut cur = x_star.to_vec();
    for _ in 0..steps {
        let (_, g) = objective.value_and_gradient(m, &cur)?;
        for &j in selected {
            let kind = state.kind;
            let st = state.coords[j].get_or_insert_with(|| OptimizerState::new(kind, 1));
            let mut p = [cur[j]];
            st.step(&mut p, &[g[j]])?;
            cur[j] = p[0];
        }
    }
    Ok(cur.iter().zip(x_star).map(|(a, b)| a - b).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub feature: usize,
    pub objective: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub x: Vec<f64>,
    pub y: f64,
    pub x_star: Vec<f64>,
    /// Selected features in selection order.
    pub selected: Vec<usize>,
    pub succeeded: bool,
    pub iterations: usize,
    pub score_before: f64,
    pub score_after: f64,
    pub trace: Vec<IterationTrace>,
    /// Why the attack stopped early, if it did.
    pub aborted: Option<String>,
    pub validity: Option<ValidityReport>,
}

impl AttackResult {
    pub fn delta(&self) -> Vec<f64> {
        self.x_star.iter().zip(&self.x).map(|(a, b)| a - b).collect()
    }
}

/// Whether a prediction meets the exit condition for label `y`.
pub fn attack_succeeds(task: Task, score: f64, y: f64, tau: f64) -> bool {
    match task {
        Task::BinaryClassification => decide(task, score) != y,
        Task::Regression => (score - y).abs() > tau,
    }
}

enum Ranking<'a> {
    Gradient,
    Importance(&'a [f64]),
}

/// Shared read-only attack context.
#[derive(Debug, Clone, Copy)]
pub struct Attacker<'a> {
    pub surrogate: &'a SurrogateModel,
    pub supports: &'a Supports,
    pub schema: &'a Schema,
    pub estimator: Option<&'a ConsistencyEstimator>,
    pub config: &'a AttackConfig,
}

impl Attacker<'_> {
    pub fn craft(&self, x: &[f64], y: f64) -> Result<AttackResult> {
        self.run(x, y, Ranking::Gradient)
    }

    /// Feature order follows the target's importance; steps still use
    /// surrogate gradients.
    pub fn craft_adjusted(&self, target: &TreeModel, x: &[f64], y: f64) -> Result<AttackResult> {
        if target.importance.len() != x.len() {
            return Err(Error::LengthMismatch {
                expected: x.len(),
                actual: target.importance.len(),
            });
        }
        if target.importance.iter().all(|&v| v == 0.0) {
            log::warn!("target importance is all zero; ranking by surrogate gradient");
        }
        self.run(x, y, Ranking::Importance(&target.importance))
    }

    /// Attack every row of a dataset in parallel; output order follows rows.
    pub fn craft_all(&self, data: &Dataset, target: Option<&TreeModel>) -> Result<Vec<AttackResult>> {
        (0..data.len())
            .into_par_iter()
            .map(|i| {
                let s = data.sample(i);
                match target {
                    Some(t) => self.craft_adjusted(t, &s.x, s.y),
                    None => self.craft(&s.x, s.y),
                }
            })
            .collect()
    }

    fn run(&self, x: &[f64], y: f64, ranking: Ranking) -> Result<AttackResult> {
        let cfg = self.config;
        cfg.validate()?;
        let m = self.surrogate;
        if x.len() != self.schema.dim() {
            return Err(Error::LengthMismatch {
                expected: self.schema.dim(),
                actual: x.len(),
            });
        }
        let lambda = cfg.lambda(self.schema)?;
        let max_outer = cfg.max_outer_iterations.unwrap_or(lambda);
        let immutable = self.schema.immutable_set();
        let objective = ObjectiveSpec::new(m, x, y, cfg)?;
        let score_before = m.score(x)?;
        let mut x_star = x.to_vec();
        let mut selected: Vec<usize> = Vec::new();
        let mut state = StepState::new(x.len(), cfg.learning_rate);
        let mut trace = Vec::new();
        let mut aborted = None;
        let mut score = score_before;
        let mut iterations = 0;
        while !attack_succeeds(m.task(), score, y, cfg.tau) && selected.len() < lambda {
            if iterations >= max_outer {
                aborted = Some("max_outer_iterations reached".to_string());
                break;
            }
            let step = (|| -> Result<(usize, f64)> {
                let j = match ranking {
                    Ranking::Importance(imp) if eligible_max(imp, &selected, immutable) > 0.0 => {
                        select_feature(imp, &selected, immutable, true)?
                    }
                    _ => {
                        let g = m.input_gradient(&x_star, y)?;
                        select_feature(&g, &selected, immutable, cfg.signed_selection)?
                    }
                };
                selected.push(j);
                let alpha = compute_step(m, &x_star, &objective, &selected, &mut state, cfg.inner_steps)?;
                for &k in &selected {
                    x_star[k] += alpha[k];
                }
                project_coords(&mut x_star, &selected, self.supports)?;
                Ok((j, objective.value(m, &x_star)?.total))
            })();
            iterations += 1;
            match step {
                Ok((feature, value)) => {
                    score = m.score(&x_star)?;
                    trace.push(IterationTrace {
                        feature,
                        objective: value,
                        score,
                    });
                }
                Err(e) => {
                    aborted = Some(e.to_string());
                    // Keep the last projected point; the result stays feasible.
                    project_coords(&mut x_star, &selected, self.supports)?;
                    score = m.score(&x_star)?;
                    break;
                }
            }
        }
        // Re-check rather than trust the loop state.
        let succeeded = attack_succeeds(m.task(), m.score(&x_star)?, y, cfg.tau);
        let validity = match self.estimator {
            Some(est) => Some(validity_check(x, &x_star, y, est, self.supports, self.schema)?),
            None => None,
        };
        Ok(AttackResult {
            x: x.to_vec(),
            y,
            x_star,
            selected,
            succeeded,
            iterations,
            score_before,
            score_after: score,
            trace,
            aborted,
            validity,
        })
    }
}

fn eligible_max(scores: &[f64], selected: &[usize], immutable: &[usize]) -> f64 {
    scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !selected.contains(i) && !immutable.contains(i))
        .map(|(_, &v)| v)
        .fold(0.0, f64::max)
}

/// Gradient-ranked attack on one sample.
pub fn craft(
    surrogate: &SurrogateModel,
    x: &[f64],
    y: f64,
    cfg: &AttackConfig,
    supports: &Supports,
    schema: &Schema,
) -> Result<AttackResult> {
    Attacker {
        surrogate,
        supports,
        schema,
        estimator: None,
        config: cfg,
    }
    .craft(x, y)
}

/// Importance-ranked attack on one sample.
pub fn craft_adjusted(
    surrogate: &SurrogateModel,
    target: &TreeModel,
    x: &[f64],
    y: f64,
    cfg: &AttackConfig,
    supports: &Supports,
    schema: &Schema,
) -> Result<AttackResult> {
    Attacker {
        surrogate,
        supports,
        schema,
        estimator: None,
        config: cfg,
    }
    .craft_adjusted(target, x, y)
}
