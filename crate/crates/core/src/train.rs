//! Loss, AdamW, the learning-rate schedule, regime parameter selection,
//! pretext pretraining of the experts and the adaptation loop.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{expert_forward, ExpertEncoder};
use crate::dsp::{iq_to_spectrogram, Spectrogram};
use crate::error::{Error, Result};
use crate::model::{ExpertFeatures, MoeModel};
use crate::param::{GradStore, Graph, Param, Parameters, TrainableSet};
use crate::rng::{mix, stream};
use crate::router::ClassifierHead;
use crate::synth::Dataset;

pub const LABEL_SMOOTHING: f32 = 0.1;

// ---------------------------------------------------------------------------
// Loss

/// Label-smoothed cross-entropy of one logit vector against class `y`.
pub fn smoothed_cross_entropy(logits: &[f32], y: usize, eps: f32) -> Result<f64> {
    let c = logits.len();
    if y >= c {
        return Err(Error::OutOfRange {
            op: "smoothed_cross_entropy",
            index: y,
            len: c,
        });
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("label smoothing {eps} outside [0, 1)")));
    }
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
    let lse = max + logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    Ok((0..c)
        .map(|k| -crate::autograd::smoothed_target(k, y, eps, c) * (logits[k] as f64 - lse))
        .sum())
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u32,
}

/// One AdamW update of a single tensor. Decay, when enabled, is applied to
/// the weights directly before the moment step.
pub fn adamw_step(
    w: &mut [f32],
    g: &[f32],
    state: &mut Moments,
    lr: f32,
    decay: bool,
    cfg: &AdamWConfig,
) -> Result<()> {
    if w.len() != g.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            lhs: vec![w.len()],
            rhs: vec![g.len()],
        });
    }
    if state.m.is_empty() {
        state.m = vec![0.0; w.len()];
        state.v = vec![0.0; w.len()];
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    if decay && cfg.weight_decay != 0.0 {
        let f = 1.0 - lr * cfg.weight_decay;
        w.iter_mut().for_each(|x| *x *= f);
    }
    for i in 0..w.len() {
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        state.m[i] = m;
        state.v[i] = v;
        w[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW over named parameters. State exists only for parameters that have
/// received a gradient.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Updates every parameter present in `grads`; `lr` maps a name to its
    /// learning rate.
    pub fn step<'p>(
        &mut self,
        params: impl IntoIterator<Item = &'p mut Param>,
        grads: &GradStore,
        lr: impl Fn(&str) -> f32,
    ) -> Result<()> {
        for p in params {
            let Some(g) = grads.get(&p.name) else {
                continue;
            };
            let decay = p.decays();
            let state = self.state.entry(p.name.clone()).or_default();
            adamw_step(p.value.data_mut(), g, state, lr(&p.name), decay, &self.config)?;
            if !p.value.is_finite() {
                return Err(Error::NonFinite { op: "adamw" });
            }
        }
        Ok(())
    }

    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    /// Floats held in optimizer state.
    pub fn state_numel(&self) -> usize {
        self.state.values().map(|s| s.m.len() + s.v.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Schedule

/// Linear warm-up to `base_lr` over `warmup` epochs, then cosine decay to 0
/// at `max_epochs`. `progress` is measured in (fractional) epochs.
pub fn lr_schedule(progress: f64, base_lr: f64, warmup: f64, max_epochs: f64) -> f64 {
    if progress < warmup {
        return base_lr * progress / warmup;
    }
    let span = (max_epochs - warmup).max(f64::MIN_POSITIVE);
    let frac = ((progress - warmup) / span).clamp(0.0, 1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

// ---------------------------------------------------------------------------
// Regimes

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdaptationRegime {
    FrozenExpert,
    PartialFineTune { layers: Vec<usize> },
    RfPrompt { prompt_len: usize },
}

impl AdaptationRegime {
    /// Partial fine-tuning of the last two layers.
    pub fn pft(n_layers: usize) -> Self {
        Self::PartialFineTune {
            layers: (n_layers.saturating_sub(2)..n_layers).collect(),
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            Self::FrozenExpert => "frozen",
            Self::PartialFineTune { .. } => "pft",
            Self::RfPrompt { .. } => "rfprompt",
        }
    }

    pub fn parse(s: &str, n_layers: usize, prompt_len: usize) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frozen" | "frozen-expert" | "frozenexpert" => Ok(Self::FrozenExpert),
            "pft" | "partial" | "partial-fine-tune" => Ok(Self::pft(n_layers)),
            "rfprompt" | "prompt" => Ok(Self::RfPrompt { prompt_len }),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }

    /// First expert layer whose parameters or prompts train, if any.
    fn first_live_layer(&self) -> Option<usize> {
        match self {
            Self::FrozenExpert => None,
            Self::PartialFineTune { layers } => layers.iter().min().copied(),
            Self::RfPrompt { .. } => Some(0),
        }
    }
}

impl fmt::Display for AdaptationRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FrozenExpert => write!(f, "FrozenExpert"),
            Self::PartialFineTune { layers } => write!(f, "PFT{layers:?}"),
            Self::RfPrompt { prompt_len } => write!(f, "RFPrompt(M={prompt_len})"),
        }
    }
}

fn router_head_names(model: &MoeModel) -> Vec<String> {
    model
        .router
        .param_names()
        .into_iter()
        .chain(model.head.param_names())
        .collect()
}

/// Names of the parameters a regime trains.
pub fn select_trainable(model: &MoeModel, regime: &AdaptationRegime) -> Result<TrainableSet> {
    let mut names = router_head_names(model);
    match regime {
        AdaptationRegime::FrozenExpert => {}
        AdaptationRegime::PartialFineTune { layers } => {
            let n = model.config.backbone.n_layers;
            if layers.is_empty() || layers.iter().any(|&l| l >= n) {
                return Err(Error::Config(format!(
                    "partial fine-tune layers {layers:?} invalid for {n} layers"
                )));
            }
            for e in &model.experts {
                for &l in layers {
                    names.extend(e.layers[l].param_names());
                }
            }
        }
        AdaptationRegime::RfPrompt { prompt_len } => {
            let bank = model
                .prompts
                .as_ref()
                .ok_or_else(|| Error::Config("prompt regime on a model without prompts".into()))?;
            if bank.len != *prompt_len {
                return Err(Error::Config(format!(
                    "model carries M={} prompts but the regime asks for M={prompt_len}",
                    bank.len
                )));
            }
            names.extend(bank.param_names());
        }
    }
    Ok(TrainableSet::from_names(names))
}

/// Copies `base`, gives it a fresh router and head for `classes` outputs and
/// adds or removes the prompt bank as the regime requires.
pub fn prepare_model(
    base: &MoeModel,
    regime: &AdaptationRegime,
    classes: usize,
    sigma: f32,
    seed: u64,
) -> Result<MoeModel> {
    let mut m = base.clone();
    m.reset_task(classes, seed)?;
    match regime {
        AdaptationRegime::RfPrompt { prompt_len } => m.attach_prompts(*prompt_len, sigma, seed)?,
        _ => m.prompts = None,
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Data

/// Spectrograms with labels, ready for the model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpecSet {
    pub specs: Vec<Spectrogram>,
    pub labels: Vec<usize>,
}

impl SpecSet {
    pub fn new(specs: Vec<Spectrogram>, labels: Vec<usize>) -> Result<Self> {
        if specs.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} spectrograms but {} labels",
                specs.len(),
                labels.len()
            )));
        }
        Ok(Self { specs, labels })
    }

    /// Spectrograms of `ds.records[idx]`, labels remapped through `label`.
    pub fn from_dataset(ds: &Dataset, idx: &[usize], label: impl Fn(usize) -> usize) -> Result<Self> {
        let mut specs = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let rec = ds.records.get(i).ok_or(Error::OutOfRange {
                op: "from_dataset",
                index: i,
                len: ds.records.len(),
            })?;
            specs.push(iq_to_spectrogram(rec)?);
            labels.push(label(ds.info[i].class));
        }
        Ok(Self { specs, labels })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            specs: idx.iter().map(|&i| self.specs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration and history

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_adapt: f64,
    pub weight_decay: f32,
    pub warmup_epochs: f64,
    pub router_warmup_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f32,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Reuse activations of frozen prefixes across epochs.
    #[serde(default = "default_true")]
    pub cache_features: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-5,
            lr_adapt: 1e-3,
            weight_decay: 0.01,
            warmup_epochs: 5.0,
            router_warmup_epochs: 2,
            max_epochs: 100,
            batch_size: 32,
            label_smoothing: LABEL_SMOOTHING,
            early_stop_patience: 10,
            seed: 0,
            cache_features: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates_ok = self.lr_backbone > 0.0 && self.lr_adapt > 0.0;
        if !rates_ok || self.weight_decay < 0.0 || self.warmup_epochs < 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.early_stop_patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "patience, batch size and max epochs must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr_backbone: f64,
    pub lr_adapt: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stale_epochs: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_acc,lr_backbone,lr_adapt\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr_backbone, r.lr_adapt
            );
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Evaluation helpers

/// Mean smoothed loss and accuracy over a set.
pub fn evaluate_loss(
    model: &MoeModel,
    data: &SpecSet,
    cache: Option<&[ExpertFeatures]>,
    eps: f32,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (i, (spec, &y)) in data.specs.iter().zip(&data.labels).enumerate() {
        let logits = model.predict(spec, cache.map(|c| &c[i]))?;
        loss += smoothed_cross_entropy(&logits, y, eps)?;
        if argmax(&logits) == y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed));
    idx
}

fn build_cache(model: &MoeModel, data: &SpecSet, start: usize) -> Result<Vec<ExpertFeatures>> {
    data.specs.iter().map(|s| model.features(s, start)).collect()
}

// ---------------------------------------------------------------------------
// Adaptation

/// Backbone parameters train at `lr_backbone`, everything else at
/// `lr_adapt`.
pub fn param_lr(name: &str, lr_backbone: f32, lr_adapt: f32) -> f32 {
    if name.starts_with("expert.") {
        lr_backbone
    } else {
        lr_adapt
    }
}

/// Trains `model` under `regime` and returns the weights of the epoch with
/// the lowest validation loss. An empty training set returns the model as is.
pub fn adapt(
    model: &MoeModel,
    regime: &AdaptationRegime,
    train: &SpecSet,
    val: &SpecSet,
    cfg: &TrainConfig,
) -> Result<(MoeModel, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        info!("empty support set: returning the model without adaptation");
        return Ok((model.clone(), TrainHistory::default()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let classes = model.head.classes();
    if let Some(&y) = train.labels.iter().chain(&val.labels).find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
    }

    let warm_set = TrainableSet::from_names(router_head_names(model));
    let full_set = select_trainable(model, regime)?;
    let n_layers = model.config.backbone.n_layers;
    let live = regime.first_live_layer();

    let mut model = model.clone();
    let mut opt = AdamW::new(cfg.adamw());
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;

    // Activations before the first trainable layer never change, so they
    // are computed once per phase.
    let frozen_start = live.unwrap_or(n_layers);
    let (mut train_cache, mut val_cache) = (None, None);
    let mut cached_start = usize::MAX;

    let steps = train.len().div_ceil(cfg.batch_size);
    let max_epochs = cfg.max_epochs as f64;
    for epoch in 0..cfg.max_epochs {
        let warm = epoch < cfg.router_warmup_epochs;
        let trainable = if warm { &warm_set } else { &full_set };
        let start = if warm { n_layers } else { frozen_start };
        if cfg.cache_features && start != cached_start {
            debug!("caching features from layer {start}");
            train_cache = Some(build_cache(&model, train, start)?);
            val_cache = Some(build_cache(&model, val, start)?);
            cached_start = start;
        }
        let (train_feats, val_feats) = (train_cache.as_deref(), val_cache.as_deref());

        let order = shuffled(train.len(), mix(cfg.seed, epoch as u64));
        let mut loss_sum = 0.0;
        let (mut lr_b, mut lr_a) = (0.0, 0.0);
        for (s, batch) in order.chunks(cfg.batch_size).enumerate() {
            let progress = epoch as f64 + (s + 1) as f64 / steps as f64;
            lr_b = lr_schedule(progress, cfg.lr_backbone, cfg.warmup_epochs, max_epochs);
            lr_a = lr_schedule(progress, cfg.lr_adapt, cfg.warmup_epochs, max_epochs);
            let mut grads = GradStore::new();
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let mut g = Graph::new(trainable);
                let out = model.forward(&mut g, &train.specs[i], train_feats.map(|c| &c[i]))?;
                let loss = g
                    .tape
                    .smoothed_cross_entropy(out.logits, &[train.labels[i]], cfg.label_smoothing)?;
                loss_sum += g.tape.value(loss).data()[0] as f64;
                g.backward_scaled(loss, scale)?;
                grads.accumulate(&g);
            }
            let (b, a) = (lr_b as f32, lr_a as f32);
            opt.step(model.params_mut(), &grads, |n| param_lr(n, b, a))?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, val_acc) = evaluate_loss(&model, val, val_feats, cfg.label_smoothing)?;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::NonFinite { op: "adapt" });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr_backbone: lr_b,
            lr_adapt: lr_a,
        });
        debug!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4} acc {val_acc:.3}");
        if val_loss < best_loss {
            best_loss = val_loss;
            best = model.clone();
            history.best_epoch = Some(epoch);
            history.stale_epochs = 0;
        } else {
            history.stale_epochs += 1;
            if history.stale_epochs >= cfg.early_stop_patience {
                info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok((best, history))
}

// ---------------------------------------------------------------------------
// Pretext pretraining

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretextConfig {
    pub lr: f64,
    pub weight_decay: f32,
    pub warmup_epochs: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f32,
    pub seed: u64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_epochs: 1.0,
            epochs: 15,
            batch_size: 32,
            label_smoothing: LABEL_SMOOTHING,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretextReport {
    pub expert: usize,
    pub best_epoch: usize,
    pub val_acc: f64,
    pub val_loss: f64,
}

/// Supervised data for one expert: its slice of the source task.
#[derive(Debug, Clone)]
pub struct PretextSlice {
    pub train: SpecSet,
    pub val: SpecSet,
}

/// Splits a source dataset into one slice per expert, grouping classes by
/// samples-per-symbol. Labels are renumbered within each slice.
pub fn pretext_data(source: &Dataset) -> Result<Vec<PretextSlice>> {
    let slices = crate::synth::pretext_slices(&source.spec);
    if slices.is_empty() || source.records.is_empty() {
        return Err(Error::Data("source dataset is empty".into()));
    }
    slices
        .iter()
        .map(|classes| {
            let local = |c: usize| classes.iter().position(|&k| k == c).unwrap_or(usize::MAX);
            let pick = |p: &crate::synth::Partition| -> Vec<usize> {
                crate::synth::Partition {
                    by_class: classes.iter().map(|&c| p.by_class[c].clone()).collect(),
                }
                .indices()
            };
            Ok(PretextSlice {
                train: SpecSet::from_dataset(source, &pick(&source.splits.train), local)?,
                val: SpecSet::from_dataset(source, &pick(&source.splits.val), local)?,
            })
        })
        .collect()
}

fn pretext_logits(
    g: &mut Graph<'_>,
    expert: &ExpertEncoder,
    head: &ClassifierHead,
    spec: &Spectrogram,
) -> Result<crate::autograd::Var> {
    let out = expert_forward(g, expert, spec, None)?;
    head.forward(g, out.cls)
}

fn pretext_eval(
    expert: &ExpertEncoder,
    head: &ClassifierHead,
    data: &SpecSet,
    eps: f32,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (spec, &y) in data.specs.iter().zip(&data.labels) {
        let mut g = Graph::inference();
        let logits = pretext_logits(&mut g, expert, head, spec)?;
        let l = g.tape.value(logits).data();
        loss += smoothed_cross_entropy(l, y, eps)?;
        if argmax(l) == y {
            correct += 1;
        }
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains one expert on its slice with a throwaway head and keeps the epoch
/// with the lowest validation loss.
pub fn pretrain_expert(
    expert: &ExpertEncoder,
    slice: &PretextSlice,
    cfg: &PretextConfig,
) -> Result<(ExpertEncoder, PretextReport)> {
    if slice.train.is_empty() || slice.val.is_empty() {
        return Err(Error::Data(format!("pretext slice for expert {} is empty", expert.id)));
    }
    let classes = slice.train.labels.iter().max().map_or(0, |m| m + 1);
    let d = expert.config.d_model;
    let seed = mix(cfg.seed, 100 + expert.id as u64);
    let mut head = ClassifierHead::new(d, classes.max(2), seed)?;
    let mut expert = expert.clone();
    let names: Vec<String> = expert
        .param_names()
        .into_iter()
        .chain(head.param_names())
        .collect();
    let trainable = TrainableSet::from_names(names);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let steps = slice.train.len().div_ceil(cfg.batch_size);
    let mut best = (expert.clone(), f64::INFINITY, 0.0, 0);
    for epoch in 0..cfg.epochs {
        let order = shuffled(slice.train.len(), mix(seed, epoch as u64));
        for (s, batch) in order.chunks(cfg.batch_size).enumerate() {
            let progress = epoch as f64 + (s + 1) as f64 / steps as f64;
            let lr = lr_schedule(progress, cfg.lr, cfg.warmup_epochs, cfg.epochs as f64) as f32;
            let mut grads = GradStore::new();
            for &i in batch {
                let mut g = Graph::new(&trainable);
                let logits = pretext_logits(&mut g, &expert, &head, &slice.train.specs[i])?;
                let loss = g.tape.smoothed_cross_entropy(
                    logits,
                    &[slice.train.labels[i]],
                    cfg.label_smoothing,
                )?;
                g.backward_scaled(loss, 1.0 / batch.len() as f32)?;
                grads.accumulate(&g);
            }
            let params = expert.params_mut().into_iter().chain(head.params_mut());
            opt.step(params, &grads, |_| lr)?;
        }
        let (vl, va) = pretext_eval(&expert, &head, &slice.val, cfg.label_smoothing)?;
        info!("pretext expert {} epoch {epoch}: val loss {vl:.4} acc {va:.3}", expert.id);
        if vl < best.1 {
            best = (expert.clone(), vl, va, epoch);
        }
    }
    let (expert, val_loss, val_acc, best_epoch) = best;
    let id = expert.id;
    Ok((
        expert,
        PretextReport {
            expert: id,
            best_epoch,
            val_acc,
            val_loss,
        },
    ))
}

/// Pretrains every expert of `model` on its source slice. Router, head and
/// prompts are left untouched.
pub fn pretext_pretrain(
    model: &MoeModel,
    source: &Dataset,
    cfg: &PretextConfig,
) -> Result<(MoeModel, Vec<PretextReport>)> {
    let slices = pretext_data(source)?;
    if slices.len() != model.experts.len() {
        warn!(
            "{} pretext slices for {} experts; extra experts keep their initial weights",
            slices.len(),
            model.experts.len()
        );
    }
    let mut out = model.clone();
    let mut reports = Vec::new();
    for (e, slice) in out.experts.iter_mut().zip(&slices) {
        let (trained, report) = pretrain_expert(e, slice, cfg)?;
        *e = trained;
        reports.push(report);
    }
    Ok((out, reports))
}
