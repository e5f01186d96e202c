//! Structure-preserving embedding `f: X -> R^e` trained with batch-hard
//! triplet loss under cosine distance.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diff::{sigmoid, softplus, Activation, Network, OptimizerKind, OptimizerState};
use crate::error::{Error, Result};

/// `1 - a·b / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let cos = dot(a, b) / (na * nb);
    Ok(1.0 - cos.clamp(-1.0, 1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Distance and its gradients with respect to both arguments.
fn cosine_distance_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let ab = dot(a, b);
    let cos = ab / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| -(bi / (na * nb) - cos * ai / (na * na)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| -(ai / (na * nb) - cos * bi / (nb * nb)))
        .collect();
    Ok((1.0 - cos, ga, gb))
}

/// Equal-frequency binning of a regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct Binning {
    pub labels: Vec<usize>,
    /// Strictly increasing lower edges of bins `1..bins`.
    pub edges: Vec<f64>,
    pub bins: usize,
}

impl Binning {
    pub fn label_of(edges: &[f64], t: f64) -> usize {
        edges.partition_point(|&e| e <= t)
    }
}

/// Partition targets into `bins` quantile classes. Tied values always share a
/// bin, so heavy ties can reduce the number of usable bins.
pub fn equal_frequency_bins(targets: &[f64], bins: usize) -> Result<Binning> {
    if bins < 2 {
        return Err(Error::Config("at least two bins are required".into()));
    }
    if targets.len() < bins {
        return Err(Error::TooSmall(format!("{} targets for {bins} bins", targets.len())));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("regression target".into()));
    }
    let n = targets.len();
    let mut sorted = targets.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = Vec::with_capacity(bins - 1);
    for k in 1..bins {
        let e = sorted[(k * n).div_ceil(bins)];
        if e > sorted[0] && edges.last().is_none_or(|&l| e > l) {
            edges.push(e);
        }
    }
    if edges.len() + 1 < bins {
        log::warn!(
            "equal-frequency binning: ties leave {} of {bins} bins usable",
            edges.len() + 1
        );
    }
    let labels = targets.iter().map(|&t| Binning::label_of(&edges, t)).collect();
    Ok(Binning {
        labels,
        bins: edges.len() + 1,
        edges,
    })
}

fn hardest(dist: &Array2<f64>, labels: &[usize], a: usize) -> Option<(usize, usize)> {
    let (mut pos, mut neg): (Option<usize>, Option<usize>) = (None, None);
    for j in 0..labels.len() {
        if j == a {
            continue;
        }
        if labels[j] == labels[a] {
            if pos.is_none_or(|p| dist[[a, j]] > dist[[a, p]]) {
                pos = Some(j);
            }
        } else if neg.is_none_or(|n| dist[[a, j]] < dist[[a, n]]) {
            neg = Some(j);
        }
    }
    Some((pos?, neg?))
}

fn pairwise(emb: ArrayView2<f64>) -> Result<Array2<f64>> {
    let b = emb.nrows();
    let rows: Vec<Vec<f64>> = emb.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut d = Array2::zeros((b, b));
    for i in 0..b {
        for j in i + 1..b {
            let v = cosine_distance(&rows[i], &rows[j])?;
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

fn check_batch(emb: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if emb.nrows() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: emb.nrows(),
            actual: labels.len(),
        });
    }
    let first = labels.first().copied();
    if labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::Data("batch-hard triplet loss needs at least two classes".into()));
    }
    Ok(())
}

/// Mean over anchors of `max(0, margin + max_p d(a,p) - min_n d(a,n))`.
/// Anchors without an in-batch positive are skipped.
pub fn batch_hard_triplet_loss(emb: ArrayView2<f64>, labels: &[usize], margin: f64) -> Result<f64> {
    Ok(batch_hard_loss_and_grad(emb, labels, margin, false)?.0)
}

/// Loss and gradient with respect to the embeddings. With `soft`, the hinge
/// is replaced by `softplus(d(a,p) - d(a,n))`.
pub fn batch_hard_loss_and_grad(
    emb: ArrayView2<f64>,
    labels: &[usize],
    margin: f64,
    soft: bool,
) -> Result<(f64, Array2<f64>)> {
    check_batch(&emb, labels)?;
    let dist = pairwise(emb)?;
    let rows: Vec<Vec<f64>> = emb.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut grad = Array2::zeros(emb.dim());
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut active: Vec<(usize, usize, usize, f64)> = Vec::new();
    for a in 0..labels.len() {
        let Some((p, n)) = hardest(&dist, labels, a) else {
            skipped += 1;
            continue;
        };
        used += 1;
        let gap = dist[[a, p]] - dist[[a, n]];
        if soft {
            total += softplus(gap);
            active.push((a, p, n, sigmoid(gap)));
        } else if margin + gap > 0.0 {
            total += margin + gap;
            active.push((a, p, n, 1.0));
        }
    }
    if skipped > 0 {
        log::warn!("batch-hard triplet loss: {skipped} anchors without a positive were skipped");
    }
    if used == 0 {
        return Err(Error::Data("no anchor has an in-batch positive".into()));
    }
    let scale = 1.0 / used as f64;
    for (a, p, n, w) in active {
        let (_, ga, gp) = cosine_distance_grad(&rows[a], &rows[p])?;
        let (_, ga2, gn) = cosine_distance_grad(&rows[a], &rows[n])?;
        let c = w * scale;
        for k in 0..rows[a].len() {
            grad[[a, k]] += c * (ga[k] - ga2[k]);
            grad[[p, k]] += c * gp[k];
            grad[[n, k]] -= c * gn[k];
        }
    }
    Ok((total * scale, grad))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    pub margin: f64,
    pub soft_margin: bool,
    /// P: classes per batch.
    pub classes_per_batch: usize,
    /// K: samples per class.
    pub samples_per_class: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Equal-frequency bins for regression targets.
    pub regression_bins: usize,
    /// Hidden width; `None` means `max(2d, 32)`.
    pub hidden_width: Option<usize>,
    /// Centre embeddings on the batch mean before cosine distances. Without
    /// it, a shared offset direction lets batch-hard mining collapse every
    /// embedding onto one ray.
    pub center: bool,
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.3,
            soft_margin: false,
            classes_per_batch: 2,
            samples_per_class: 16,
            epochs: 50,
            learning_rate: 0.001,
            regression_bins: 10,
            hidden_width: None,
            center: true,
            seed: 0,
        }
    }
}

impl TripletConfig {
    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }

    /// Batch layout used for binned regression targets.
    pub fn regression() -> Self {
        TripletConfig {
            classes_per_batch: 4,
            samples_per_class: 8,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes_per_batch < 2 || self.samples_per_class < 2 {
            return Err(Error::Config("triplet batches need P >= 2 and K >= 2".into()));
        }
        if self.margin < 0.0 {
            return Err(Error::Config("margin must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Fixed per-column affine map applied before the network: `(x - offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaler {
    /// Standardize each training column to zero mean and unit variance.
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut offset = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let mean = col.sum() / n;
            let var = col.fold(0.0, |a, &b| a + (b - mean) * (b - mean)) / n;
            offset.push(if mean.is_finite() { mean } else { 0.0 });
            scale.push(if var > 1e-24 { var.sqrt() } else { 1.0 });
        }
        InputScaler { offset, scale }
    }

    pub fn identity(d: usize) -> Self {
        InputScaler {
            offset: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (mut col, (o, s)) in out.columns_mut().into_iter().zip(self.offset.iter().zip(&self.scale)) {
            col.mapv_inplace(|v| (v - o) / s);
        }
        out
    }
}

/// Trained embedding function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub network: Network,
    pub dim: usize,
    pub input_scaler: InputScaler,
    /// Subtracted from network outputs; training centres each batch instead.
    #[serde(default)]
    pub center: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_edges: Option<Vec<f64>>,
    /// Mean batch-hard loss per epoch.
    #[serde(default)]
    pub loss_history: Vec<f64>,
}

impl EmbeddingModel {
    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn embed_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = self.network.forward(self.input_scaler.apply(x).view())?;
        self.recenter(&mut out);
        Ok(out)
    }

    fn recenter(&self, out: &mut Array2<f64>) {
        if self.center.len() == out.ncols() {
            for mut row in out.rows_mut() {
                row.iter_mut().zip(&self.center).for_each(|(v, c)| *v -= c);
            }
        }
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.embed_batch(v)?.into_raw_vec_and_offset().0)
    }

    /// Embedding of one sample plus the vector-Jacobian product for a given
    /// upstream gradient on the embedding.
    #[allow(clippy::type_complexity)]
    pub fn embed_with_vjp(&self, x: &[f64]) -> Result<(Vec<f64>, impl Fn(&[f64]) -> Result<Vec<f64>> + '_)> {
        let v = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        let trace = self.network.forward_traced(self.input_scaler.apply(v).view())?;
        let mut out = trace.output().row(0).to_vec();
        if self.center.len() == out.len() {
            out.iter_mut().zip(&self.center).for_each(|(v, c)| *v -= c);
        }
        let vjp = move |g: &[f64]| -> Result<Vec<f64>> {
            let gv = ArrayView2::from_shape((1, g.len()), g).map_err(|e| Error::Shape(e.to_string()))?;
            let grads = self.network.backward(&trace, gv)?;
            Ok(grads
                .input
                .row(0)
                .iter()
                .zip(&self.input_scaler.scale)
                .map(|(g, s)| g / s)
                .collect())
        };
        Ok((out, vjp))
    }
}

/// Class ids used for metric learning: binary labels directly, regression
/// targets via equal-frequency bins.
pub fn metric_labels(train: &Dataset, cfg: &TripletConfig) -> Result<(Vec<usize>, Option<Vec<f64>>)> {
    if train.schema().label_space().is_classification() {
        Ok((train.labels().iter().map(|&y| y as usize).collect(), None))
    } else {
        let b = equal_frequency_bins(train.labels(), cfg.regression_bins)?;
        Ok((b.labels, Some(b.edges)))
    }
}

fn sample_batch(
    rng: &mut ChaCha8Rng,
    by_class: &BTreeMap<usize, Vec<usize>>,
    cfg: &TripletConfig,
    warned: &mut bool,
) -> Vec<usize> {
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let p = cfg.classes_per_batch.min(classes.len());
    let chosen: Vec<usize> = classes.choose_multiple(rng, p).copied().collect();
    let mut idx = Vec::with_capacity(p * cfg.samples_per_class);
    for c in chosen {
        let members = &by_class[&c];
        if members.len() >= cfg.samples_per_class {
            idx.extend(members.choose_multiple(rng, cfg.samples_per_class).copied());
        } else {
            if !*warned {
                log::warn!(
                    "class {c} has {} members, fewer than K = {}; sampling with replacement",
                    members.len(),
                    cfg.samples_per_class
                );
                *warned = true;
            }
            for _ in 0..cfg.samples_per_class {
                idx.push(members[rng.random_range(0..members.len())]);
            }
        }
    }
    idx
}

/// Train the embedding with Adagrad on P x K batches.
pub fn train_embedding(train: &Dataset, cfg: &TripletConfig, dim: usize) -> Result<EmbeddingModel> {
    cfg.validate()?;
    if dim < 2 {
        return Err(Error::Config("embedding dimension must be at least 2".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let d = train.dim();
    let hidden = cfg.hidden_width.unwrap_or((2 * d).max(32));
    let mut network = Network::new(
        d,
        &[
            (hidden, Activation::Relu),
            (hidden, Activation::Relu),
            (dim, Activation::Identity),
        ],
        cfg.seed,
    )?;
    let input_scaler = InputScaler::fit(train.features().view());
    let (labels, bin_edges) = metric_labels(train, cfg)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Data("metric learning needs at least two classes".into()));
    }
    let scaled = input_scaler.apply(train.features().view());
    let mut opt = OptimizerState::new(OptimizerKind::adagrad(cfg.learning_rate), network.parameter_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e3b3_d000_0001);
    let batches = train.len().div_ceil(cfg.batch_size());
    let mut warned = false;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..batches {
            let mut idx = sample_batch(&mut rng, &by_class, cfg, &mut warned);
            idx.shuffle(&mut rng);
            let xb = scaled.select(Axis(0), &idx);
            let lb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let trace = network.forward_traced(xb.view())?;
            let mut out = trace.output().clone();
            if cfg.center {
                let mean = out.mean_axis(Axis(0)).expect("nonempty batch");
                out -= &mean;
            }
            let (loss, mut g) = match batch_hard_loss_and_grad(out.view(), &lb, cfg.margin, cfg.soft_margin) {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("skipping triplet batch: {e}");
                    continue;
                }
            };
            if cfg.center {
                let mean = g.mean_axis(Axis(0)).expect("nonempty batch");
                g -= &mean;
            }
            let grads = network.backward(&trace, g.view())?;
            if let Err(e) = opt.step_network(&mut network, &grads) {
                log::warn!("skipping optimizer step: {e}");
                continue;
            }
            sum += loss;
            count += 1;
        }
        history.push(if count > 0 { sum / count as f64 } else { f64::NAN });
    }
    let center = if cfg.center {
        network
            .forward(scaled.view())?
            .mean_axis(Axis(0))
            .expect("nonempty training set")
            .to_vec()
    } else {
        Vec::new()
    };
    Ok(EmbeddingModel {
        network,
        dim,
        input_scaler,
        center,
        bin_edges,
        loss_history: history,
    })
}

/// Fraction of (anchor, positive, negative) triplets whose negative lies
/// farther than the positive.
pub fn triplet_order_rate(emb: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let dist = pairwise(emb)?;
    let (mut good, mut total) = (0usize, 0usize);
    let n = labels.len();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                total += 1;
                if dist[[a, q]] > dist[[a, p]] {
                    good += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Undefined("no triplets".into()));
    }
    Ok(good as f64 / total as f64)
}
