//! Attention-based multiple-instance learning: the standard slide classifier and
//! its object-aware variant with one attention aggregator per object.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ExplainError;
use crate::model::layers::{fan_in_bound, softmax_rows, uniform_matrix};
use crate::optim::Adam;

/// Attention scoring `score_i = w · tanh(h_i V)` with `V: d x k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPool {
    pub v: Array2<f64>,
    pub w: Array1<f64>,
}

impl AttentionPool {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Self {
        Self {
            v: uniform_matrix(rng, d, k, fan_in_bound(d)),
            w: uniform_matrix(rng, 1, k, fan_in_bound(k)).row(0).to_owned(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            v: Array2::zeros(self.v.raw_dim()),
            w: Array1::zeros(self.w.len()),
        }
    }

    pub fn dim(&self) -> usize {
        self.v.nrows()
    }
}

fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let row = x.view().insert_axis(Axis(0)).to_owned();
    softmax_rows(&row).row(0).to_owned()
}

struct PoolTrace {
    tanh: Array2<f64>,
    alpha: Array1<f64>,
    pooled: Array1<f64>,
}

fn pool_forward(pool: &AttentionPool, feats: &Array2<f64>) -> PoolTrace {
    let tanh = feats.dot(&pool.v).mapv(f64::tanh);
    let alpha = softmax(&tanh.dot(&pool.w));
    let pooled = alpha.dot(feats);
    PoolTrace { tanh, alpha, pooled }
}

fn check_bag(feats: &Array2<f64>, d: usize) -> Result<(), ExplainError> {
    if feats.nrows() == 0 {
        return Err(ExplainError::EmptyBag);
    }
    if feats.ncols() != d {
        return Err(ExplainError::DimensionMismatch(format!("features have width {}, expected {d}", feats.ncols())));
    }
    Ok(())
}

/// Attention-weighted slide feature `S = Σ α_i h_i` and the weights `α`.
pub fn mil_aggregate(features: &Array2<f64>, pool: &AttentionPool) -> Result<(Array1<f64>, Array1<f64>), ExplainError> {
    check_bag(features, pool.dim())?;
    let t = pool_forward(pool, features);
    Ok((t.pooled, t.alpha))
}

/// Bias-free linear logits `S · W`.
pub fn class_logits(slide_feature: &ArrayView1<f64>, weight: &Array2<f64>) -> Array1<f64> {
    slide_feature.dot(weight)
}

/// Softmax class probabilities of `S · W`.
pub fn classify(slide_feature: &ArrayView1<f64>, weight: &Array2<f64>) -> Array1<f64> {
    softmax(&class_logits(slide_feature, weight))
}

/// `-ln p_y`.
pub fn cross_entropy(probs: &Array1<f64>, label: usize) -> f64 {
    -probs[label].ln()
}

fn cross_entropy_from_logits(logits: &Array1<f64>, label: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
    lse - logits[label]
}

/// One aggregator per object; the slide feature is the mean of the per-object
/// slide features. With a single object this is the standard ABMIL classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilModel {
    pub objects: Vec<String>,
    pub pools: Vec<AttentionPool>,
    /// `d x C` classifier weights.
    pub classifier: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilOutput {
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
    /// Pooled slide feature fed to the classifier.
    pub slide_feature: Array1<f64>,
    /// Per-object slide features `S^j`.
    pub object_features: Vec<Array1<f64>>,
    /// Per-object attention weights over patches.
    pub alphas: Vec<Array1<f64>>,
}

impl MilOutput {
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// One training bag: per-object `N x d` patch features and the slide label.
#[derive(Debug, Clone, PartialEq)]
pub struct MilBag {
    pub objects: Vec<Array2<f64>>,
    pub label: usize,
}

impl MilBag {
    pub fn standard(features: Array2<f64>, label: usize) -> Self {
        Self {
            objects: vec![features],
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilConfig {
    pub attention_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            attention_dim: 8,
            learning_rate: 1e-2,
            epochs: 100,
            seed: 0,
        }
    }
}

pub const SLIDE_OBJECT: &str = "slide";

impl MilModel {
    pub fn init(objects: Vec<String>, d: usize, classes: usize, cfg: &MilConfig) -> Result<Self, ExplainError> {
        if classes < 2 {
            return Err(ExplainError::InvalidConfig(format!("{classes} classes; need at least 2")));
        }
        if objects.is_empty() || d == 0 || cfg.attention_dim == 0 {
            return Err(ExplainError::InvalidConfig("empty model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pools = objects.iter().map(|_| AttentionPool::init(&mut rng, d, cfg.attention_dim)).collect();
        let classifier = uniform_matrix(&mut rng, d, classes, fan_in_bound(d));
        Ok(Self {
            objects,
            pools,
            classifier,
        })
    }

    pub fn classes(&self) -> usize {
        self.classifier.ncols()
    }

    pub fn dim(&self) -> usize {
        self.classifier.nrows()
    }

    fn check(&self, bag: &[Array2<f64>]) -> Result<(), ExplainError> {
        if bag.len() != self.pools.len() {
            return Err(ExplainError::MissingObjectMasks(format!(
                "{} object feature sets for {} objects",
                bag.len(),
                self.pools.len()
            )));
        }
        for f in bag {
            check_bag(f, self.dim())?;
        }
        Ok(())
    }

    pub fn forward(&self, bag: &[Array2<f64>]) -> Result<MilOutput, ExplainError> {
        self.check(bag)?;
        let traces: Vec<PoolTrace> = self.pools.iter().zip(bag).map(|(p, f)| pool_forward(p, f)).collect();
        Ok(self.output(&traces))
    }

    fn output(&self, traces: &[PoolTrace]) -> MilOutput {
        let l = traces.len() as f64;
        let mut slide_feature = Array1::zeros(self.dim());
        for t in traces {
            slide_feature += &t.pooled;
        }
        slide_feature /= l;
        let logits = class_logits(&slide_feature.view(), &self.classifier);
        MilOutput {
            probs: softmax(&logits),
            logits,
            slide_feature,
            object_features: traces.iter().map(|t| t.pooled.clone()).collect(),
            alphas: traces.iter().map(|t| t.alpha.clone()).collect(),
        }
    }

    pub fn loss(&self, bag: &[Array2<f64>], label: usize) -> Result<f64, ExplainError> {
        if label >= self.classes() {
            return Err(ExplainError::InvalidConfig(format!("label {label} >= {} classes", self.classes())));
        }
        Ok(cross_entropy_from_logits(&self.forward(bag)?.logits, label))
    }

    fn zeros_like(&self) -> Self {
        Self {
            objects: self.objects.clone(),
            pools: self.pools.iter().map(AttentionPool::zeros_like).collect(),
            classifier: Array2::zeros(self.classifier.raw_dim()),
        }
    }

    fn tensors(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out: Vec<ArrayViewD<'_, f64>> = Vec::new();
        for p in &self.pools {
            out.push(p.v.view().into_dyn());
            out.push(p.w.view().into_dyn());
        }
        out.push(self.classifier.view().into_dyn());
        out
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out: Vec<ArrayViewMutD<'_, f64>> = Vec::new();
        for p in &mut self.pools {
            out.push(p.v.view_mut().into_dyn());
            out.push(p.w.view_mut().into_dyn());
        }
        out.push(self.classifier.view_mut().into_dyn());
        out
    }

    /// Cross-entropy and its gradient for one bag.
    fn loss_and_grad(&self, bag: &[Array2<f64>], label: usize) -> Result<(f64, MilModel), ExplainError> {
        self.check(bag)?;
        let traces: Vec<PoolTrace> = self.pools.iter().zip(bag).map(|(p, f)| pool_forward(p, f)).collect();
        let out = self.output(&traces);
        let loss = cross_entropy_from_logits(&out.logits, label);
        let mut grads = self.zeros_like();
        let mut d_logits = out.probs.clone();
        d_logits[label] -= 1.0;
        grads.classifier = out
            .slide_feature
            .view()
            .insert_axis(Axis(1))
            .dot(&d_logits.view().insert_axis(Axis(0)));
        let d_pooled = self.classifier.dot(&d_logits) / traces.len() as f64;
        for (j, (t, feats)) in traces.iter().zip(bag).enumerate() {
            let pool = &self.pools[j];
            let d_alpha = feats.dot(&d_pooled);
            let centered = &d_alpha - t.alpha.dot(&d_alpha);
            let d_score = &t.alpha * &centered;
            grads.pools[j].w = t.tanh.t().dot(&d_score);
            let mut d_pre = d_score.view().insert_axis(Axis(1)).dot(&pool.w.view().insert_axis(Axis(0)));
            d_pre.zip_mut_with(&t.tanh, |g, &th| *g *= 1.0 - th * th);
            grads.pools[j].v = feats.t().dot(&d_pre);
        }
        Ok((loss, grads))
    }
}

/// Trains a MIL model with per-bag Adam steps in a seeded shuffled order.
/// Returns the model and the mean loss of every epoch.
pub fn train_mil(
    bags: &[MilBag],
    objects: Vec<String>,
    classes: usize,
    cfg: &MilConfig,
) -> Result<(MilModel, Vec<f64>), ExplainError> {
    let first = bags.first().ok_or(ExplainError::EmptyBag)?;
    let d = first.objects.first().ok_or(ExplainError::MissingObjectMasks("bag without objects".into()))?.ncols();
    let mut model = MilModel::init(objects, d, classes, cfg)?;
    for bag in bags {
        if bag.label >= classes {
            return Err(ExplainError::InvalidConfig(format!("label {} >= {classes} classes", bag.label)));
        }
        model.check(&bag.objects)?;
    }
    let mut adam = Adam::new(model.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = model.loss_and_grad(&bags[i].objects, bags[i].label)?;
            total += loss;
            adam.step(model.tensors_mut(), grads.tensors(), cfg.learning_rate);
        }
        curve.push(total / bags.len() as f64);
    }
    Ok((model, curve))
}

/// Standard single-aggregator classifier on `N x d` patch features.
pub fn train_standard(bags: &[(Array2<f64>, usize)], classes: usize, cfg: &MilConfig) -> Result<(MilModel, Vec<f64>), ExplainError> {
    let bags: Vec<MilBag> = bags.iter().map(|(f, y)| MilBag::standard(f.clone(), *y)).collect();
    train_mil(&bags, vec![SLIDE_OBJECT.into()], classes, cfg)
}
