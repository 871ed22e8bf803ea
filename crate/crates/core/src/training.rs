//! Optimization, augmentation, loss, metrics and voting evaluation.
//!
//! Training is deterministic: batch order derives from `(seed, epoch)` and
//! each sample's augmentation from `(seed, epoch, sample index)`, so two runs
//! with the same seed produce identical loss curves.
//!
//! The per-epoch log is JSON lines, one object per epoch:
//!
//! ```text
//! {"epoch":1,"lr":0.1,"train_loss":0.93,"eval":{"oa":0.71,"ma":0.70,"miou":0.55,...}}
//! ```
//!
//! `eval` is `null` on epochs without evaluation.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data_io::Sample;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::networks::{Batch, Network, SamplePlan, Task};
use crate::params::{Forward, Mode, ParamStore};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Uniform rotation about the z (gravity) axis.
    pub rotate_z: bool,
    /// Per-axis translation bound; 0 disables.
    pub translate: f64,
    /// Per-axis scale factors drawn from `[scale_min, scale_max]`.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Gaussian color jitter std and uniform color shift bound (colored clouds only).
    pub color_jitter: f64,
    pub color_shift: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotate_z: true,
            translate: 0.1,
            scale_min: 0.8,
            scale_max: 1.25,
            color_jitter: 0.0,
            color_shift: 0.0,
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            rotate_z: false,
            translate: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            color_jitter: 0.0,
            color_shift: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.rotate_z
            && self.translate == 0.0
            && self.scale_min == 1.0
            && self.scale_max == 1.0
            && self.color_jitter == 0.0
            && self.color_shift == 0.0
    }

    pub fn without_rotation(&self) -> Self {
        Self {
            rotate_z: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] is invalid",
                self.scale_min, self.scale_max
            )));
        }
        if self.translate < 0.0 || self.color_jitter < 0.0 || self.color_shift < 0.0 {
            return Err(Error::Config("augmentation magnitudes must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Applies the enabled transforms: scale, then rotate about z, then translate.
///
/// Feature columns 0..3 follow the positions when they mirror them; columns
/// 3..6 are treated as colors in `[0, 1]`.
pub fn augment<T: Scalar>(cloud: &PointCloud<T>, spec: &AugmentSpec, rng: &mut impl Rng) -> PointCloud<T> {
    if spec.is_identity() {
        return cloud.clone();
    }
    let scale: [f64; 3] = std::array::from_fn(|_| {
        if spec.scale_min < spec.scale_max {
            rng.random_range(spec.scale_min..=spec.scale_max)
        } else {
            spec.scale_min
        }
    });
    let angle = if spec.rotate_z {
        rng.random_range(0.0..std::f64::consts::TAU)
    } else {
        0.0
    };
    let shift: [f64; 3] = std::array::from_fn(|_| {
        if spec.translate > 0.0 {
            rng.random_range(-spec.translate..=spec.translate)
        } else {
            0.0
        }
    });
    let (s, c) = angle.sin_cos();
    let transform = |p: &Point<T>| -> Point<T> {
        let q: [f64; 3] = std::array::from_fn(|a| p[a].to_f64().unwrap_or(0.0) * scale[a]);
        let r = [c * q[0] - s * q[1], s * q[0] + c * q[1], q[2]];
        std::array::from_fn(|a| cast(r[a] + shift[a]))
    };
    let mut out = cloud.clone();
    let mirrored = cloud.feature_width() >= 3
        && (0..cloud.len()).all(|i| cloud.features.row(i)[..3] == cloud.positions[i]);
    out.positions = cloud.positions.iter().map(transform).collect();
    if mirrored {
        for (i, p) in out.positions.iter().enumerate() {
            out.features.row_mut(i)[..3].copy_from_slice(p);
        }
    }
    if cloud.feature_width() >= 6 && (spec.color_jitter > 0.0 || spec.color_shift > 0.0) {
        let shift: [f64; 3] = std::array::from_fn(|_| {
            if spec.color_shift > 0.0 {
                rng.random_range(-spec.color_shift..=spec.color_shift)
            } else {
                0.0
            }
        });
        let jitter = Normal::new(0.0, spec.color_jitter).expect("nonnegative std");
        for i in 0..out.len() {
            let row = out.features.row_mut(i);
            for (a, v) in row[3..6].iter_mut().enumerate() {
                let noise = if spec.color_jitter > 0.0 { jitter.sample(rng) } else { 0.0 };
                let nv = (v.to_f64().unwrap_or(0.0) + shift[a] + noise).clamp(0.0, 1.0);
                *v = cast(nv);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentSpec,
    pub voting_rounds: usize,
    /// Evaluate on the test split every this many epochs (0: only after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            decay_epochs: vec![90, 120],
            decay_factor: 10.0,
            epochs: 150,
            batch_size: 16,
            seed: 0,
            augment: AugmentSpec::default(),
            voting_rounds: 10,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.decay_factor > 1.0) {
            return bad("decay_factor must exceed 1");
        }
        if self.decay_epochs.windows(2).any(|w| w[1] <= w[0]) {
            return bad("decay_epochs must be strictly increasing");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch normalization)");
        }
        if self.voting_rounds == 0 {
            return bad("voting_rounds must be at least 1");
        }
        self.augment.validate()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let crossed = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr / self.decay_factor.powi(crossed as i32)
    }
}

/// SGD with classical momentum: `v ← μ v + g`, `p ← p − lr · v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    momentum: T,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum: cast(momentum),
            velocity: Vec::new(),
        }
    }

    /// Updates every trainable parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let lr: T = cast(lr);
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        if let Some(id) = ids.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(Error::Optimizer(format!(
                "parameter {} has no gradient",
                store.get(*id).name
            )));
        }
        for id in ids {
            let slot = id.index();
            if self.velocity.len() <= slot {
                self.velocity.resize(slot + 1, None);
            }
            let p = store.get_mut(id);
            let g = p.grad.as_ref().expect("checked above").data();
            let v = self.velocity[slot].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((w, vi), &gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `scores`.
pub fn cross_entropy<'t, T: Scalar>(scores: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: shape,
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::Label {
            label: bad,
            classes: shape[1],
        });
    }
    let picked = scores.log_softmax_rows()?.select_per_row(Arc::from(labels))?;
    Ok(picked.mean().scale(-T::one()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub oa: f64,
    pub ma: f64,
    pub miou: f64,
    /// Instance- and category-averaged part IoU (segmentation only).
    pub imiou: Option<f64>,
    pub cmiou: Option<f64>,
    pub per_class_iou: Vec<f64>,
}

/// OA, MA and IoU metrics from flat predictions.
///
/// Classes absent from both predictions and labels get IoU 1; MA averages
/// over classes that occur in the labels.
pub fn classification_metrics(pred: &[usize], labels: &[usize], num_classes: usize) -> Result<MetricReport> {
    if pred.is_empty() || pred.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "need matching nonempty predictions and labels, got {} and {}",
            pred.len(),
            labels.len()
        )));
    }
    let mut conf = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::Label {
                label: p.max(l),
                classes: num_classes,
            });
        }
        conf[l][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| conf[c][c]).sum();
    let oa = correct as f64 / pred.len() as f64;
    let mut accs = Vec::new();
    let mut ious = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = conf[c][c];
        let gt: usize = conf[c].iter().sum();
        let pr: usize = (0..num_classes).map(|r| conf[r][c]).sum();
        if gt > 0 {
            accs.push(tp as f64 / gt as f64);
        }
        let union = gt + pr - tp;
        ious.push(if union == 0 { 1.0 } else { tp as f64 / union as f64 });
    }
    Ok(MetricReport {
        oa,
        ma: accs.iter().sum::<f64>() / accs.len() as f64,
        miou: ious.iter().sum::<f64>() / num_classes as f64,
        imiou: None,
        cmiou: None,
        per_class_iou: ious,
    })
}

/// Mean part IoU of one instance over its category's parts; a part absent
/// from both prediction and ground truth scores 1.
pub fn instance_iou(pred: &[usize], labels: &[usize], parts: &[usize]) -> f64 {
    let total: f64 = parts
        .iter()
        .map(|&p| {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (&a, &b) in pred.iter().zip(labels) {
                let (pa, pb) = (a == p, b == p);
                inter += (pa && pb) as usize;
                union += (pa || pb) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    total / parts.len().max(1) as f64
}

/// Segmentation metrics: point-level OA/MA/mIoU plus ImIoU and CmIoU.
pub fn segmentation_metrics(
    preds: &[Vec<usize>],
    labels: &[Vec<usize>],
    categories: &[usize],
    category_parts: &[Vec<usize>],
    num_classes: usize,
) -> Result<MetricReport> {
    if preds.is_empty() || preds.len() != labels.len() || preds.len() != categories.len() {
        return Err(Error::Evaluation("segmentation metrics need matching nonempty inputs".into()));
    }
    let flat_p: Vec<usize> = preds.iter().flatten().copied().collect();
    let flat_l: Vec<usize> = labels.iter().flatten().copied().collect();
    let mut report = classification_metrics(&flat_p, &flat_l, num_classes)?;
    let mut per_cat: Vec<Vec<f64>> = vec![Vec::new(); category_parts.len()];
    let mut all = Vec::with_capacity(preds.len());
    for ((p, l), &c) in preds.iter().zip(labels).zip(categories) {
        let parts = category_parts.get(c).ok_or(Error::Label {
            label: c,
            classes: category_parts.len(),
        })?;
        let iou = instance_iou(p, l, parts);
        per_cat[c].push(iou);
        all.push(iou);
    }
    report.imiou = Some(all.iter().sum::<f64>() / all.len() as f64);
    let cat_means: Vec<f64> = per_cat
        .iter()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    report.cmiou = Some(cat_means.iter().sum::<f64>() / cat_means.len() as f64);
    Ok(report)
}

/// Row-wise argmax restricted to `allowed` columns (all columns when `None`).
pub fn argmax_restricted<T: Scalar>(scores: &Tensor<T>, allowed: Option<&[usize]>) -> Vec<usize> {
    let c = scores.cols();
    (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            let mut best = (T::neg_infinity(), 0);
            let mut consider = |j: usize| {
                if row[j] > best.0 {
                    best = (row[j], j);
                }
            };
            match allowed {
                Some(a) => a.iter().for_each(|&j| consider(j)),
                None => (0..c).for_each(&mut consider),
            }
            best.1
        })
        .collect()
}

fn sample_rng(seed: u64, stream: u64, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) ^ idx as u64);
    rng
}

/// Evaluation output: metrics plus per-sample predictions and averaged scores.
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub report: MetricReport,
    pub predictions: Vec<Vec<usize>>,
    pub scores: Vec<Tensor<T>>,
}

/// Scores averaged over `voting_rounds` passes: round 0 is the plain input,
/// later rounds use `augment` without rotation.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    samples: &[Sample<T>],
    voting_rounds: usize,
    augment_spec: &AugmentSpec,
    category_parts: &[Vec<usize>],
    seed: u64,
) -> Result<Evaluation<T>> {
    if samples.is_empty() {
        return Err(Error::Evaluation("empty dataset".into()));
    }
    if voting_rounds == 0 {
        return Err(Error::Evaluation("voting_rounds must be at least 1".into()));
    }
    let cfg = net.config();
    let vote_spec = augment_spec.without_rotation();
    let chunk = 16;
    let mut scores: Vec<Tensor<T>> = Vec::with_capacity(samples.len());
    for (ci, group) in samples.chunks(chunk).enumerate() {
        let mut acc: Option<Vec<Tensor<T>>> = None;
        for round in 0..voting_rounds {
            let clouds: Vec<PointCloud<T>> = group
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    if round == 0 {
                        s.cloud.clone()
                    } else {
                        let mut rng = sample_rng(seed, 1000 + round as u64, ci * chunk + j);
                        augment(&s.cloud, &vote_spec, &mut rng)
                    }
                })
                .collect();
            let refs: Vec<&PointCloud<T>> = clouds.iter().collect();
            let out = net.predict(&net.batch(&refs)?)?;
            let per: Vec<Tensor<T>> = match cfg.task {
                Task::Classification => (0..group.len())
                    .map(|j| Tensor::new(vec![1, out.cols()], out.row(j).to_vec()))
                    .collect::<Result<_>>()?,
                Task::Segmentation => {
                    let mut start = 0;
                    group
                        .iter()
                        .map(|s| {
                            let n = s.cloud.len();
                            let t = Tensor::new(
                                vec![n, out.cols()],
                                out.data()[start * out.cols()..(start + n) * out.cols()].to_vec(),
                            );
                            start += n;
                            t
                        })
                        .collect::<Result<_>>()?
                }
            };
            acc = Some(match acc {
                None => per,
                Some(prev) => prev
                    .into_iter()
                    .zip(per)
                    .map(|(a, b)| {
                        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
                        Tensor::new(a.shape().to_vec(), data)
                    })
                    .collect::<Result<_>>()?,
            });
        }
        let inv = T::one() / cast(voting_rounds as f64);
        for t in acc.expect("at least one round") {
            scores.push(if voting_rounds == 1 { t } else { t.map(|v| v * inv) });
        }
    }
    match cfg.task {
        Task::Classification => {
            let preds: Vec<usize> = scores.iter().map(|s| argmax_restricted(s, None)[0]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let report = classification_metrics(&preds, &labels, cfg.num_classes)?;
            Ok(Evaluation {
                report,
                predictions: preds.into_iter().map(|p| vec![p]).collect(),
                scores,
            })
        }
        Task::Segmentation => {
            let mut preds = Vec::with_capacity(samples.len());
            let mut labels = Vec::with_capacity(samples.len());
            let mut cats = Vec::with_capacity(samples.len());
            for (s, sc) in samples.iter().zip(&scores) {
                let allowed = category_parts.get(s.label).map(Vec::as_slice);
                preds.push(argmax_restricted(sc, allowed));
                labels.push(
                    s.cloud
                        .labels
                        .clone()
                        .ok_or_else(|| Error::Evaluation("segmentation sample without labels".into()))?,
                );
                cats.push(s.label);
            }
            let parts: Vec<Vec<usize>> = if category_parts.is_empty() {
                vec![(0..cfg.num_classes).collect()]
            } else {
                category_parts.to_vec()
            };
            if category_parts.is_empty() {
                cats.iter_mut().for_each(|c| *c = 0);
            }
            let report = segmentation_metrics(&preds, &labels, &cats, &parts, cfg.num_classes)?;
            Ok(Evaluation {
                report,
                predictions: preds,
                scores,
            })
        }
    }
}

/// One line of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub seconds: f64,
    pub eval: Option<MetricReport>,
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub history: Vec<EpochRecord>,
    /// Parameters of the best evaluated epoch (OA for classification, mIoU for segmentation).
    pub best: Option<(usize, ParamStore<T>)>,
    pub final_report: Option<MetricReport>,
}

fn score_of(task: Task, r: &MetricReport) -> f64 {
    match task {
        Task::Classification => r.oa,
        Task::Segmentation => r.miou,
    }
}

/// Splits `order` into batches of `size`, folding a trailing singleton into
/// the previous batch so batch normalization always sees two clouds.
pub fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let n = out.len();
        let start = (n - 2) * size;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

/// Mean loss of one training step on `samples` (gradients applied).
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    sgd: &mut Sgd<T>,
    batch: &Batch<T>,
    targets: &[usize],
    lr: f64,
) -> Result<f64> {
    let (loss, outcome) = {
        let tape = Tape::new();
        let f = Forward::new(&tape, net.store(), Mode::Train);
        let scores = net.forward(&f, batch)?;
        let loss = cross_entropy(scores, targets)?;
        loss.backward()?;
        let value = loss.value().data()[0].to_f64().unwrap_or(f64::NAN);
        (value, f.finish())
    };
    let store = net.store_mut();
    store.zero_grad();
    store.apply(outcome);
    sgd.step(store, lr)?;
    Ok(loss)
}

/// Per-point (segmentation) or per-cloud (classification) targets of a batch.
pub fn batch_targets<T: Scalar>(task: Task, samples: &[&Sample<T>]) -> Result<Vec<usize>> {
    match task {
        Task::Classification => Ok(samples.iter().map(|s| s.label).collect()),
        Task::Segmentation => samples
            .iter()
            .map(|s| {
                s.cloud
                    .labels
                    .clone()
                    .ok_or_else(|| Error::Config("segmentation sample without labels".into()))
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.concat()),
    }
}

/// Trains `net` on `train`, evaluating on `test` per `cfg.eval_every`, and
/// streams one JSON record per epoch to `log` when given.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train: &[Sample<T>],
    test: &[Sample<T>],
    category_parts: &[Vec<usize>],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Config("training needs at least two samples".into()));
    }
    let task = net.config().task;
    let mut sgd = Sgd::new(cfg.momentum);
    // any augmentation moves points relative to the kernel frames, so plans
    // are only reusable without it
    let cached: Option<Vec<SamplePlan<T>>> = if cfg.augment.is_identity() {
        Some(train.iter().map(|s| net.plan(&s.cloud)).collect::<Result<_>>()?)
    } else {
        None
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<T>)> = None;
    let mut final_report = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut sample_rng(cfg.seed, 1, epoch));
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in batches(&order, cfg.batch_size) {
            let clouds: Vec<PointCloud<T>> = idx
                .iter()
                .map(|&i| {
                    let mut rng = sample_rng(cfg.seed, 2 + epoch as u64, i);
                    augment(&train[i].cloud, &cfg.augment, &mut rng)
                })
                .collect();
            let fresh: Vec<SamplePlan<T>> = match &cached {
                Some(_) => Vec::new(),
                None => clouds.iter().map(|c| net.plan(c)).collect::<Result<_>>()?,
            };
            let pairs: Vec<(&PointCloud<T>, &SamplePlan<T>)> = match &cached {
                Some(c) => clouds.iter().zip(idx.iter().map(|&i| &c[i])).collect(),
                None => clouds.iter().zip(fresh.iter()).collect(),
            };
            let batch = Batch::assemble(net.config(), &pairs)?;
            let samples: Vec<&Sample<T>> = idx.iter().map(|&i| &train[i]).collect();
            let targets = batch_targets(task, &samples)?;
            total += train_step(net, &mut sgd, &batch, &targets, lr)? * idx.len() as f64;
            count += idx.len();
        }
        let last = epoch + 1 == cfg.epochs;
        let do_eval = !test.is_empty() && (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0));
        let eval = if do_eval {
            let ev = evaluate(net, test, cfg.voting_rounds, &cfg.augment, category_parts, cfg.seed)?;
            let s = score_of(task, &ev.report);
            if best.as_ref().map_or(true, |(_, b, _)| s > *b) {
                best = Some((epoch + 1, s, net.store().clone()));
            }
            Some(ev.report)
        } else {
            None
        };
        if last {
            final_report = eval.clone();
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: total / count as f64,
            seconds: started.elapsed().as_secs_f64(),
            eval,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::Io(e.into()))?;
            writeln!(w)?;
        }
        log::info!("epoch {} lr {:.4} loss {:.4}", rec.epoch, rec.lr, rec.train_loss);
        history.push(rec);
    }
    Ok(TrainOutcome {
        history,
        best: best.map(|(e, _, s)| (e, s)),
        final_report,
    })
}
