//! Decision tree, random forest and gradient-boosted trees used as attack
//! targets, with information-gain feature importance.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayView2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diff::sigmoid;
use crate::error::{Error, Result};
use crate::metrics::{auc, mse};
use crate::schema::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    DecisionTree,
    RandomForest,
    Gbm,
}

impl TreeKind {
    pub const ALL: [TreeKind; 3] = [TreeKind::DecisionTree, TreeKind::RandomForest, TreeKind::Gbm];

    pub fn short_name(self) -> &'static str {
        match self {
            TreeKind::DecisionTree => "dt",
            TreeKind::RandomForest => "rf",
            TreeKind::Gbm => "gbm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dt" | "decision_tree" => Ok(TreeKind::DecisionTree),
            "rf" | "random_forest" => Ok(TreeKind::RandomForest),
            "gbm" => Ok(TreeKind::Gbm),
            _ => Err(Error::Config(format!("unknown tree model {s:?}"))),
        }
    }
}

/// How per-split gains are accumulated into feature importance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceWeighting {
    /// Each gain is scaled by the fraction of training weight reaching the node.
    #[default]
    NodeFraction,
    /// Plain sum of per-split gains.
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub n_trees: usize,
    pub learning_rate: f64,
    pub min_samples_split: usize,
    /// Features tried per node; `None` tries all.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    /// Row fraction per boosting round.
    pub subsample: f64,
    /// Split categorical codes as ordered values instead of category sets.
    pub ordered_categories: bool,
    pub importance: ImportanceWeighting,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self::for_kind(TreeKind::DecisionTree, 0)
    }
}

impl TreeParams {
    /// Defaults per learner; `d` is the feature count (forest uses `sqrt(d)`).
    pub fn for_kind(kind: TreeKind, d: usize) -> Self {
        let base = TreeParams {
            max_depth: 8,
            n_trees: 1,
            learning_rate: 1.0,
            min_samples_split: 2,
            max_features: None,
            bootstrap: false,
            subsample: 1.0,
            ordered_categories: false,
            importance: ImportanceWeighting::NodeFraction,
        };
        match kind {
            TreeKind::DecisionTree => base,
            TreeKind::RandomForest => TreeParams {
                n_trees: 100,
                max_features: Some(((d as f64).sqrt().floor() as usize).max(1)),
                bootstrap: true,
                ..base
            },
            TreeKind::Gbm => TreeParams {
                max_depth: 3,
                n_trees: 200,
                learning_rate: 0.1,
                ordered_categories: true,
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Split {
    /// Left iff `x[feature] <= threshold`.
    Threshold { feature: usize, threshold: f64 },
    /// Left iff the rounded code of `x[feature]` is in `left`.
    Categories { feature: usize, left: Vec<i64> },
}

impl Split {
    pub fn feature(&self) -> usize {
        match self {
            Split::Threshold { feature, .. } | Split::Categories { feature, .. } => *feature,
        }
    }

    pub fn goes_left(&self, x: &[f64]) -> bool {
        match self {
            Split::Threshold { feature, threshold } => x[*feature] <= *threshold,
            Split::Categories { feature, left } => left.binary_search(&(x[*feature].round() as i64)).is_ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Internal {
        split: Split,
        left: usize,
        right: usize,
        /// Label-impurity decrease at this node.
        gain: f64,
        /// Training weight reaching this node relative to the root.
        fraction: f64,
    },
}

/// A binary tree stored as a node array with the root at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { value }],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Internal { split, left, right, .. } => {
                    i = if split.goes_left(x) { *left } else { *right };
                }
            }
        }
    }

    fn importance_into(&self, out: &mut [f64], weighting: ImportanceWeighting) {
        for n in &self.nodes {
            if let Node::Internal {
                split, gain, fraction, ..
            } = n
            {
                out[split.feature()] += match weighting {
                    ImportanceWeighting::NodeFraction => gain * fraction,
                    ImportanceWeighting::Unweighted => *gain,
                };
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub kind: TreeKind,
    pub task: Task,
    pub params: TreeParams,
    pub dim: usize,
    /// Initial raw score for boosting; zero otherwise.
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub importance: Vec<f64>,
}

impl TreeModel {
    /// Class-1 probability (classification) or predicted value.
    pub fn predict_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::LengthMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(match self.kind {
            TreeKind::Gbm => {
                let raw =
                    self.base_score + self.params.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>();
                match self.task {
                    Task::BinaryClassification => sigmoid(raw),
                    Task::Regression => raw,
                }
            }
            _ => self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64,
        })
    }

    /// Thresholded label for classification, value for regression.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(crate::surrogate::decide(self.task, self.predict_score(x)?))
    }

    pub fn predict_scores(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        x.rows()
            .into_iter()
            .map(|r| self.predict_score(r.as_slice().expect("standard layout")))
            .collect()
    }

    pub fn feature_importance(&self) -> &[f64] {
        &self.importance
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Sufficient statistics `(Σw, Σw·t, Σw·t²)`.
#[derive(Debug, Clone, Copy, Default)]
struct Stats {
    w: f64,
    s1: f64,
    s2: f64,
}

impl Stats {
    fn add(&mut self, w: f64, t: f64) {
        self.w += w;
        self.s1 += w * t;
        self.s2 += w * t * t;
    }

    fn sub(self, o: Stats) -> Stats {
        Stats {
            w: self.w - o.w,
            s1: self.s1 - o.s1,
            s2: self.s2 - o.s2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Impurity {
    /// Binary entropy in bits; targets are 0/1.
    Entropy,
    Variance,
}

impl Impurity {
    fn of(self, s: Stats) -> f64 {
        if s.w <= 0.0 {
            return 0.0;
        }
        match self {
            Impurity::Entropy => {
                let p = (s.s1 / s.w).clamp(0.0, 1.0);
                let h = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.log2() };
                h(p) + h(1.0 - p)
            }
            Impurity::Variance => (s.s2 / s.w - (s.s1 / s.w).powi(2)).max(0.0),
        }
    }

    fn gain(self, parent: Stats, left: Stats, right: Stats) -> f64 {
        self.of(parent) - (left.w / parent.w) * self.of(left) - (right.w / parent.w) * self.of(right)
    }
}

/// Binary-entropy information gain of splitting `labels` into two groups.
pub fn information_gain(parent: &[f64], left: &[f64], right: &[f64]) -> f64 {
    let st = |v: &[f64]| {
        let mut s = Stats::default();
        for &t in v {
            s.add(1.0, t);
        }
        s
    };
    Impurity::Entropy.gain(st(parent), st(left), st(right))
}

struct Builder<'a> {
    x: ArrayView2<'a, f64>,
    /// Split-search target.
    target: Vec<f64>,
    /// Labels used for recorded information gain.
    labels: &'a [f64],
    weights: Vec<f64>,
    criterion: Impurity,
    label_impurity: Impurity,
    categorical: Vec<bool>,
    params: &'a TreeParams,
    rng: ChaCha8Rng,
    root_weight: f64,
    nodes: Vec<Node>,
}

struct Candidate {
    gain: f64,
    split: Split,
}

const MAX_ONE_VS_REST: usize = 16;

impl Builder<'_> {
    fn stats(&self, idx: &[usize], t: &[f64]) -> Stats {
        let mut s = Stats::default();
        for &i in idx {
            s.add(self.weights[i], t[i]);
        }
        s
    }

    fn leaf_value(&self, idx: &[usize]) -> f64 {
        let s = self.stats(idx, &self.target);
        if s.w > 0.0 {
            s.s1 / s.w
        } else {
            0.0
        }
    }

    fn best_numeric(&self, f: usize, idx: &[usize], parent: Stats) -> Option<Candidate> {
        let mut sorted: Vec<usize> = idx.to_vec();
        sorted.sort_by(|&a, &b| self.x[[a, f]].total_cmp(&self.x[[b, f]]).then(a.cmp(&b)));
        let mut left = Stats::default();
        let mut best: Option<Candidate> = None;
        for k in 0..sorted.len() - 1 {
            let i = sorted[k];
            left.add(self.weights[i], self.target[i]);
            let (v, next) = (self.x[[i, f]], self.x[[sorted[k + 1], f]]);
            if v == next {
                continue;
            }
            let right = parent.sub(left);
            let g = self.criterion.gain(parent, left, right);
            if best.as_ref().is_none_or(|b| g > b.gain) {
                best = Some(Candidate {
                    gain: g,
                    split: Split::Threshold {
                        feature: f,
                        threshold: v + (next - v) / 2.0,
                    },
                });
            }
        }
        best
    }

    fn best_categorical(&self, f: usize, idx: &[usize], parent: Stats) -> Option<Candidate> {
        let mut per: BTreeMap<i64, Stats> = BTreeMap::new();
        for &i in idx {
            per.entry(self.x[[i, f]].round() as i64)
                .or_default()
                .add(self.weights[i], self.target[i]);
        }
        if per.len() < 2 {
            return None;
        }
        let sets: Vec<Vec<i64>> = if per.len() <= MAX_ONE_VS_REST {
            per.keys().map(|&c| vec![c]).collect()
        } else {
            let mut order: Vec<(i64, f64)> = per
                .iter()
                .map(|(&c, s)| (c, s.s1 / s.w.max(f64::MIN_POSITIVE)))
                .collect();
            order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            (1..order.len())
                .map(|k| {
                    let mut s: Vec<i64> = order[..k].iter().map(|p| p.0).collect();
                    s.sort_unstable();
                    s
                })
                .collect()
        };
        let mut best: Option<Candidate> = None;
        for set in sets {
            let mut left = Stats::default();
            for c in &set {
                let s = per[c];
                left.w += s.w;
                left.s1 += s.s1;
                left.s2 += s.s2;
            }
            let right = parent.sub(left);
            let g = self.criterion.gain(parent, left, right);
            if best.as_ref().is_none_or(|b| g > b.gain) {
                best = Some(Candidate {
                    gain: g,
                    split: Split::Categories { feature: f, left: set },
                });
            }
        }
        best
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: self.leaf_value(&idx),
        });
        let parent = self.stats(&idx, &self.target);
        if depth >= self.params.max_depth
            || idx.len() < self.params.min_samples_split.max(2)
            || self.criterion.of(parent) <= 1e-15
        {
            return id;
        }
        let d = self.x.ncols();
        let features: Vec<usize> = match self.params.max_features {
            Some(m) if m < d => {
                let mut f = sample(&mut self.rng, d, m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        };
        let mut best: Option<Candidate> = None;
        for f in features {
            let c = if self.categorical[f] && !self.params.ordered_categories {
                self.best_categorical(f, &idx, parent)
            } else {
                self.best_numeric(f, &idx, parent)
            };
            if let Some(c) = c {
                if best.as_ref().is_none_or(|b| c.gain > b.gain) {
                    best = Some(c);
                }
            }
        }
        // Zero-gain splits are still taken while depth remains (XOR-like data).
        let Some(best) = best.filter(|b| b.gain > -1e-12) else {
            return id;
        };
        let (li, ri): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| {
            let row = self.x.row(i);
            match &best.split {
                Split::Threshold { feature, threshold } => row[*feature] <= *threshold,
                Split::Categories { feature, left } => left.binary_search(&(row[*feature].round() as i64)).is_ok(),
            }
        });
        let (ls, rs) = (self.stats(&li, self.labels), self.stats(&ri, self.labels));
        let gain = self.label_impurity.gain(self.stats(&idx, self.labels), ls, rs).max(0.0);
        let fraction = parent.w / self.root_weight;
        let left = self.build(li, depth + 1);
        let right = self.build(ri, depth + 1);
        self.nodes[id] = Node::Internal {
            split: best.split,
            left,
            right,
            gain,
            fraction,
        };
        id
    }
}

#[allow(clippy::too_many_arguments)]
fn grow(
    x: ArrayView2<f64>,
    target: Vec<f64>,
    labels: &[f64],
    weights: Vec<f64>,
    criterion: Impurity,
    label_impurity: Impurity,
    categorical: &[bool],
    params: &TreeParams,
    seed: u64,
) -> (Tree, Vec<Vec<usize>>) {
    let idx: Vec<usize> = (0..x.nrows()).filter(|&i| weights[i] > 0.0).collect();
    let root_weight = idx.iter().map(|&i| weights[i]).sum::<f64>();
    let mut b = Builder {
        x,
        target,
        labels,
        weights,
        criterion,
        label_impurity,
        categorical: categorical.to_vec(),
        params,
        rng: ChaCha8Rng::seed_from_u64(seed),
        root_weight,
        nodes: Vec::new(),
    };
    b.build(idx, 0);
    let tree = Tree { nodes: b.nodes };
    // Leaf membership of every weighted row, for boosting's Newton leaves.
    let mut members = vec![Vec::new(); tree.nodes.len()];
    for i in 0..x.nrows() {
        if b.weights[i] > 0.0 {
            let row = x.row(i);
            let row = row.as_slice().expect("standard layout");
            let mut n = 0;
            while let Node::Internal { split, left, right, .. } = &tree.nodes[n] {
                n = if split.goes_left(row) { *left } else { *right };
            }
            members[n].push(i);
        }
    }
    (tree, members)
}

fn derive_seed(seed: u64, t: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(t.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        ^ t
}

/// Train a target model of the given kind.
pub fn train_tree_model(kind: TreeKind, train: &Dataset, params: &TreeParams, seed: u64) -> Result<TreeModel> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if params.n_trees == 0 {
        return Err(Error::Config("at least one tree is required".into()));
    }
    if !(params.subsample > 0.0 && params.subsample <= 1.0) {
        return Err(Error::Config("subsample must lie in (0, 1]".into()));
    }
    let task = train.schema().task();
    let x = train.features().view();
    let y = train.labels();
    let n = train.len();
    let d = train.dim();
    let categorical: Vec<bool> = train.schema().features().iter().map(|f| f.is_categorical()).collect();
    let label_impurity = match task {
        Task::BinaryClassification => Impurity::Entropy,
        Task::Regression => Impurity::Variance,
    };
    if task == Task::BinaryClassification && (y.iter().all(|&v| v == 0.0) || y.iter().all(|&v| v == 1.0)) {
        log::warn!(
            "single-class training data; {} is a constant predictor",
            kind.short_name()
        );
    }
    let (trees, base_score) = match kind {
        TreeKind::DecisionTree | TreeKind::RandomForest => {
            let count = if kind == TreeKind::DecisionTree {
                1
            } else {
                params.n_trees
            };
            let trees: Vec<Tree> = (0..count as u64)
                .into_par_iter()
                .map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t));
                    let mut w = vec![0.0; n];
                    if params.bootstrap {
                        for _ in 0..n {
                            w[rng.random_range(0..n)] += 1.0;
                        }
                    } else {
                        w.fill(1.0);
                    }
                    let s = rng.random();
                    grow(
                        x,
                        y.to_vec(),
                        y,
                        w,
                        label_impurity,
                        label_impurity,
                        &categorical,
                        params,
                        s,
                    )
                    .0
                })
                .collect();
            (trees, 0.0)
        }
        TreeKind::Gbm => boost(x, y, task, &categorical, params, seed),
    };
    let mut importance = vec![0.0; d];
    for t in &trees {
        t.importance_into(&mut importance, params.importance);
    }
    if kind == TreeKind::RandomForest {
        importance.iter_mut().for_each(|v| *v /= trees.len() as f64);
    }
    Ok(TreeModel {
        kind,
        task,
        params: params.clone(),
        dim: d,
        base_score,
        trees,
        importance,
    })
}

fn boost(
    x: ArrayView2<f64>,
    y: &[f64],
    task: Task,
    categorical: &[bool],
    params: &TreeParams,
    seed: u64,
) -> (Vec<Tree>, f64) {
    let n = y.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let base = match task {
        Task::BinaryClassification => {
            let p = mean.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        }
        Task::Regression => mean,
    };
    let mut raw = vec![base; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = ((params.subsample * n as f64).round() as usize).clamp(1, n);
    for _ in 0..params.n_trees {
        let (resid, hess): (Vec<f64>, Vec<f64>) = match task {
            Task::BinaryClassification => raw
                .iter()
                .zip(y)
                .map(|(&f, &t)| {
                    let p = sigmoid(f);
                    (t - p, p * (1.0 - p))
                })
                .unzip(),
            Task::Regression => raw.iter().zip(y).map(|(&f, &t)| (t - f, 1.0)).unzip(),
        };
        let mut w = vec![0.0; n];
        if keep < n {
            for i in sample(&mut rng, n, keep) {
                w[i] = 1.0;
            }
        } else {
            w.fill(1.0);
        }
        // Importance records the variance gain on the residuals each tree
        // was fitted to, i.e. the gain of the split criterion itself.
        let (mut tree, members) = grow(
            x,
            resid.clone(),
            &resid,
            w,
            Impurity::Variance,
            Impurity::Variance,
            categorical,
            params,
            rng.random(),
        );
        for (node, m) in tree.nodes.iter_mut().zip(&members) {
            if let Node::Leaf { value } = node {
                if !m.is_empty() {
                    let g: f64 = m.iter().map(|&i| resid[i]).sum();
                    let h: f64 = m.iter().map(|&i| hess[i]).sum();
                    *value = g / h.max(1e-12);
                }
            }
        }
        for (i, f) in raw.iter_mut().enumerate() {
            *f += params.learning_rate * tree.predict(x.row(i).as_slice().expect("standard layout"));
        }
        trees.push(tree);
    }
    (trees, base)
}

/// Task score of a model on a labelled dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", content = "value", rename_all = "snake_case")]
pub enum Evaluation {
    Auc(f64),
    Mse(f64),
}

impl Evaluation {
    pub fn value(self) -> f64 {
        match self {
            Evaluation::Auc(v) | Evaluation::Mse(v) => v,
        }
    }
}

/// ROC-AUC for classification, MSE for regression.
pub fn evaluate_scores(task: Task, scores: &[f64], labels: &[f64]) -> Result<Evaluation> {
    match task {
        Task::BinaryClassification => Ok(Evaluation::Auc(auc(scores, labels)?)),
        Task::Regression => Ok(Evaluation::Mse(mse(scores, labels)?)),
    }
}

pub fn evaluate(m: &TreeModel, ds: &Dataset) -> Result<Evaluation> {
    evaluate_scores(m.task, &m.predict_scores(ds.features().view())?, ds.labels())
}
