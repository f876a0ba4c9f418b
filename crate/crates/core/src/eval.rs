//! Downstream protocols: fine-tuning, evaluation reports and few-shot episodes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use numcore::{Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, HeadInfo};
use crate::config::{FewShotConfig, RunConfig};
use crate::data::{Dataset, Sample, Split};
use crate::embed::tokenize_cloud;
use crate::error::{Error, Result};
use crate::geom::PatchGroups;
use crate::model::{point_cls, point_features, Model};
use crate::nn::{Ctx, GradPolicy};
use crate::params::{Init, Owner};
use crate::train::{argmax, clip_global_norm, cross_entropy, lr_at, optim_step, AdamW, OptimState};

pub const HEAD: &str = "cls_head";
const STREAM_HEAD: u64 = 21;
const STREAM_TOKENS: u64 = 22;
const STREAM_SHUFFLE: u64 = 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Full,
    Linear,
    Mlp3,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Full, Protocol::Linear, Protocol::Mlp3];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Full => "full",
            Protocol::Linear => "linear",
            Protocol::Mlp3 => "mlp3",
        }
    }

    /// Head widths from the feature width `d` to `classes` logits.
    pub fn head_widths(self, d: usize, classes: usize) -> Vec<usize> {
        match self {
            Protocol::Linear => vec![d, classes],
            Protocol::Full | Protocol::Mlp3 => vec![d, d, d, classes],
        }
    }

    pub fn trains(self, owner: Owner) -> bool {
        match self {
            Protocol::Full => matches!(owner, Owner::Point | Owner::Classifier),
            Protocol::Linear | Protocol::Mlp3 => owner == Owner::Classifier,
        }
    }

    /// The backbone stays frozen, so features can be computed once.
    pub fn frozen_backbone(self) -> bool {
        self != Protocol::Full
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Protocol::Full),
            "linear" => Ok(Protocol::Linear),
            "mlp3" => Ok(Protocol::Mlp3),
            _ => Err(Error::Usage(format!("unknown protocol `{s}` (expected full, linear or mlp3)"))),
        }
    }
}

/// A backbone with a classification head, trained under one protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub model: Model<f32>,
    pub protocol: Protocol,
    pub classes: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl Classifier {
    /// Wraps the classifier in a checkpoint that keeps `base` metadata.
    pub fn to_checkpoint(&self, base: &CheckpointMeta) -> Checkpoint {
        let head = HeadInfo { protocol: self.protocol, classes: self.classes, seed: self.seed, config_hash: self.config_hash.clone() };
        Checkpoint { model: self.model.clone(), meta: CheckpointMeta { head: Some(head), ..base.clone() }, optim: None }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let h = ck.meta.head.as_ref().ok_or_else(|| Error::Usage("checkpoint has no classification head".into()))?;
        Ok(Self { model: ck.model.clone(), protocol: h.protocol, classes: h.classes, seed: h.seed, config_hash: h.config_hash.clone() })
    }
}

fn head_forward(ctx: &mut Ctx<'_, f32>, x: Var, protocol: Protocol) -> Result<Var> {
    ctx.mlp(x, HEAD, protocol.head_widths(0, 0).len() - 1)
}

/// Deterministic tokenization for evaluation: the stream depends only on the
/// seed and sample id.
fn eval_groups(samples: &[&Sample], run: &RunConfig, seed: u64) -> Result<Vec<PatchGroups>> {
    let root = Rng::new(seed).split(STREAM_TOKENS);
    samples.iter().map(|s| tokenize_cloud(&s.cloud, &run.model, &mut root.split(s.id as u64))).collect()
}

fn features(model: &Model<f32>, groups: &[PatchGroups]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(groups.len());
    for chunk in groups.chunks(64) {
        out.extend(point_features(model, chunk)?);
    }
    Ok(out)
}

fn feature_tensor(rows: &[&Vec<f32>]) -> Result<Tensor<f32>> {
    let d = rows.first().map_or(0, |r| r.len());
    Ok(Tensor::new(rows.iter().flat_map(|r| r.iter().copied()).collect(), vec![rows.len(), d])?)
}

/// Trains a fresh head (and, under FULL, the point path) on labeled samples.
/// `labels[i]` is the target for `samples[i]` in `0..classes`.
pub fn finetune_on(
    model: &Model<f32>,
    samples: &[&Sample],
    labels: &[usize],
    classes: usize,
    protocol: Protocol,
    run: &RunConfig,
    seed: u64,
) -> Result<Classifier> {
    if samples.is_empty() || samples.len() != labels.len() {
        return Err(Error::Data("fine-tuning needs a non-empty labeled set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of {classes} classes")));
    }
    let fc = &run.finetune;
    let mut model = model.clone();
    model.params.take_owner(Owner::Classifier);
    {
        let mut rng = Rng::new(seed).split(STREAM_HEAD);
        let mut init = Init { store: &mut model.params, rng: &mut rng, std: model.cfg.init_std };
        init.mlp(HEAD, &protocol.head_widths(model.cfg.dim, classes), Owner::Classifier)?;
    }
    let groups = eval_groups(samples, run, seed)?;
    model.params.set_trainable_where(|o| protocol.trains(o));
    let feats = if protocol.frozen_backbone() { Some(features(&model, &groups)?) } else { None };
    let mut clf = Classifier { model, protocol, classes, seed, config_hash: run.hash() };

    let steps = fc.epochs * samples.len().div_ceil(fc.batch.max(1));
    let hp = AdamW { beta1: run.train.beta1, beta2: run.train.beta2, eps: run.train.adam_eps, weight_decay: fc.weight_decay };
    let mut state = OptimState::default();
    let shuffle = Rng::new(seed).split(STREAM_SHUFFLE);
    let mut step = 0;
    for epoch in 0..fc.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        shuffle.split(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(fc.batch.max(1)) {
            let lr = lr_at(step, fc.lr, 0, steps)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut ctx = clf.model.ctx(GradPolicy::Trainable);
            let x = match &feats {
                Some(f) => ctx.g.constant(feature_tensor(&chunk.iter().map(|&i| &f[i]).collect::<Vec<_>>())?)?,
                None => {
                    let gs: Vec<PatchGroups> = chunk.iter().map(|&i| groups[i].clone()).collect();
                    point_cls(&mut ctx, &clf.model.cfg, &gs)?
                }
            };
            let logits = head_forward(&mut ctx, x, clf.protocol)?;
            let loss = cross_entropy(&mut ctx, logits, &y)?;
            ctx.g.backward(loss)?;
            let mut grads = ctx.param_grads();
            drop(ctx);
            clip_global_norm(&mut grads, run.train.clip_norm);
            optim_step(&mut clf.model.params, &grads, &mut state, lr, &hp)?;
            step += 1;
        }
    }
    Ok(clf)
}

/// Fine-tunes on the training split with dataset labels.
pub fn finetune(model: &Model<f32>, data: &Dataset, protocol: Protocol, run: &RunConfig) -> Result<Classifier> {
    let train = data.split(Split::Train);
    let labels: Vec<usize> = train.iter().map(|s| s.label()).collect();
    finetune_on(model, &train, &labels, data.num_classes, protocol, run, run.finetune.seed)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: usize,
    pub label: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
    /// Per-episode accuracy (%), ordered by episode id.
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    /// Overall accuracy in percent.
    pub overall_accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Percent per class; `None` for classes absent from the split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub episodes: Option<EpisodeStats>,
    pub seed: u64,
    pub config_hash: String,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Returns the predicted class of each sample.
pub fn predict(clf: &Classifier, samples: &[&Sample], run: &RunConfig) -> Result<Vec<usize>> {
    let groups = eval_groups(samples, run, clf.seed)?;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in groups.chunks(64) {
        let mut ctx = clf.model.ctx(GradPolicy::None);
        let cls = point_cls(&mut ctx, &clf.model.cfg, chunk)?;
        let logits = head_forward(&mut ctx, cls, clf.protocol)?;
        let t = ctx.g.value(logits);
        preds.extend(t.data().chunks(t.last_dim()).map(argmax));
    }
    Ok(preds)
}

/// Builds a report from a prediction log.
pub fn report_from(predictions: Vec<Prediction>, classes: usize, protocol: Protocol, seed: u64, config_hash: String) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let total = predictions.len();
    let correct = predictions.iter().filter(|p| p.label == p.predicted).count();
    let mut hits = vec![(0usize, 0usize); classes];
    for p in &predictions {
        let slot = hits.get_mut(p.label).ok_or_else(|| Error::Data(format!("label {} out of {classes} classes", p.label)))?;
        slot.0 += (p.label == p.predicted) as usize;
        slot.1 += 1;
    }
    let per_class_accuracy = hits.iter().map(|&(c, n)| (n > 0).then(|| 100.0 * c as f64 / n as f64)).collect();
    Ok(EvalReport {
        protocol,
        overall_accuracy: 100.0 * correct as f64 / total as f64,
        correct,
        total,
        per_class_accuracy,
        episodes: None,
        seed,
        config_hash,
        predictions,
    })
}

pub fn evaluate(clf: &Classifier, data: &Dataset, split: Split, run: &RunConfig) -> Result<EvalReport> {
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let preds = predict(clf, &samples, run)?;
    let log = samples.iter().zip(preds).map(|(s, p)| Prediction { id: s.id, label: s.label(), predicted: p }).collect();
    report_from(log, clf.classes, clf.protocol, clf.seed, clf.config_hash.clone())
}

/// Mean and sample standard deviation; a single value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn by_class(data: &Dataset, split: Split) -> BTreeMap<usize, Vec<&Sample>> {
    let mut m: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in data.split(split) {
        m.entry(s.label()).or_default().push(s);
    }
    m
}

/// `way`-way `shot`-shot episodes: support drawn from the training split,
/// `query` queries per class from the test split.
pub fn few_shot(model: &Model<f32>, data: &Dataset, spec: &FewShotConfig, protocol: Protocol, run: &RunConfig, seed: u64) -> Result<EvalReport> {
    let train = by_class(data, Split::Train);
    let test = by_class(data, Split::Test);
    let classes: Vec<usize> = train.keys().copied().filter(|c| test.contains_key(c)).collect();
    if spec.way == 0 || spec.shot == 0 || spec.query == 0 || spec.episodes == 0 {
        return Err(Error::Usage("way, shot, query and episodes must all be positive".into()));
    }
    if spec.way > classes.len() {
        return Err(Error::Data(format!("{}-way episodes need {} classes, dataset has {}", spec.way, spec.way, classes.len())));
    }
    for &c in &classes {
        if train[&c].len() < spec.shot || test[&c].len() < spec.query {
            return Err(Error::Data(format!("class {c} has too few samples for {} shots and {} queries", spec.shot, spec.query)));
        }
    }
    let root = Rng::new(seed);
    let mut accs = Vec::with_capacity(spec.episodes);
    let mut log = Vec::new();
    for e in 0..spec.episodes {
        let mut rng = root.split(e as u64);
        let chosen: Vec<usize> = rng.choose_distinct(classes.len(), spec.way).into_iter().map(|i| classes[i]).collect();
        let (mut support, mut s_labels, mut query, mut q_labels) = (vec![], vec![], vec![], vec![]);
        for (local, c) in chosen.iter().enumerate() {
            for i in rng.choose_distinct(train[c].len(), spec.shot) {
                support.push(train[c][i]);
                s_labels.push(local);
            }
            for i in rng.choose_distinct(test[c].len(), spec.query) {
                query.push(test[c][i]);
                q_labels.push(local);
            }
        }
        let clf = finetune_on(model, &support, &s_labels, spec.way, protocol, run, rng.next_u64())?;
        let preds = predict(&clf, &query, run)?;
        let correct = preds.iter().zip(&q_labels).filter(|(p, l)| p == l).count();
        accs.push(100.0 * correct as f64 / query.len() as f64);
        log.extend(preds.iter().zip(&query).map(|(&p, s)| Prediction { id: s.id, label: s.label(), predicted: chosen[p] }));
    }
    let (mean, std) = mean_std(&accs);
    let mut report = report_from(log, data.num_classes, protocol, seed, run.hash())?;
    report.episodes = Some(EpisodeStats { episodes: spec.episodes, mean, std, accuracies: accs });
    Ok(report)
}
