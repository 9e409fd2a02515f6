//! Experiment sweeps, metrics, parameter accounting and embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{iq_to_spectrogram, Spectrogram};
use crate::error::{Error, Result};
use crate::model::MoeModel;
use crate::param::Parameters;
use crate::synth::{cap_per_class, kshot_support, Dataset, DatasetSpec, Partition};
use crate::train::{adapt, argmax, prepare_model, select_trainable, AdaptationRegime, SpecSet, TrainConfig, TrainHistory};

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_fraction: f64,
}

impl MetricsReport {
    pub fn from_predictions(predicted: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("cannot score an empty set".into()));
        }
        if predicted.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} predictions for {} labels",
                predicted.len(),
                labels.len()
            )));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &y) in predicted.iter().zip(labels) {
            if p >= classes || y >= classes {
                return Err(Error::OutOfRange {
                    op: "confusion",
                    index: p.max(y),
                    len: classes,
                });
            }
            confusion[y][p] += 1;
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut precision = Vec::with_capacity(classes);
        let mut recall = Vec::with_capacity(classes);
        let mut f1_sum = 0.0;
        for c in 0..classes {
            let tp = confusion[c][c];
            let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
            let actual_c: usize = confusion[c].iter().sum();
            let (p, r) = (ratio(tp, predicted_c), ratio(tp, actual_c));
            f1_sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            precision.push(p);
            recall.push(r);
        }
        let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
        Ok(Self {
            accuracy: ratio(trace, labels.len()),
            macro_f1: f1_sum / classes as f64,
            precision,
            recall,
            confusion,
            trainable_params: 0,
            total_params: 0,
            trainable_fraction: 0.0,
        })
    }

    pub fn with_params(mut self, trainable: usize, total: usize) -> Self {
        self.trainable_params = trainable;
        self.total_params = total;
        self.trainable_fraction = if total == 0 { 0.0 } else { trainable as f64 / total as f64 };
        self
    }
}

/// Argmax predictions of `model` on every item of `data`.
pub fn predict_all(model: &MoeModel, data: &SpecSet) -> Result<Vec<usize>> {
    data.specs.iter().map(|s| Ok(argmax(&model.predict(s, None)?))).collect()
}

pub fn evaluate(model: &MoeModel, test: &SpecSet) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let predicted = predict_all(model, test)?;
    let report = MetricsReport::from_predictions(&predicted, &test.labels, model.head.classes())?;
    Ok(report.with_params(0, model.param_count()))
}

/// Standard deviation of the accuracy of a chance-level classifier on `n`
/// items with `classes` balanced classes.
pub fn chance_sigma(classes: usize, n: usize) -> f64 {
    let p = 1.0 / classes as f64;
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Spearman rank correlation, ties sharing their mean rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = mean;
        }
        i = j + 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Parameter accounting

/// Values claimed for the reference system, used as the comparison column.
pub mod claimed {
    pub const PROMPTS_M16: f64 = 73_728.0;
    pub const ROUTER: f64 = 16_000.0;
    pub const HEAD: f64 = 165_000.0;
    pub const RFPROMPT_TOTAL: f64 = 255_000.0;
    pub const PFT_BACKBONE: f64 = 800_000.0;
    pub const MODEL_TOTAL: f64 = 4_800_000.0;
    pub const FRACTION_FROZEN: f64 = 0.0037;
    pub const FRACTION_PFT: f64 = 0.17;
    pub const FRACTION_RFPROMPT: f64 = 0.0034;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub item: String,
    pub ours: f64,
    pub claimed: Option<f64>,
}

impl ParamRow {
    pub fn delta(&self) -> Option<f64> {
        self.claimed.map(|c| self.ours - c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub regime: String,
    pub backbone_trainable: usize,
    pub prompt_trainable: usize,
    pub router_trainable: usize,
    pub head_trainable: usize,
    pub trainable: usize,
    pub total: usize,
    pub trainable_fraction: f64,
    pub rows: Vec<ParamRow>,
}

/// Counts the parameters `regime` trains on `model` by walking the stored
/// tensors.
pub fn report_params(model: &MoeModel, regime: &AdaptationRegime) -> Result<ParamReport> {
    if let AdaptationRegime::RfPrompt { prompt_len } = regime {
        if model.prompt_len() != *prompt_len {
            return Err(Error::Config(format!(
                "regime expects {prompt_len} prompt tokens, model carries {}",
                model.prompt_len()
            )));
        }
    }
    let set = select_trainable(model, regime)?;
    let (mut backbone, mut prompts, mut router, mut head) = (0, 0, 0, 0);
    for p in model.params().into_iter().filter(|p| set.contains(&p.name)) {
        let slot = match p.name.split('.').next() {
            Some("expert") => &mut backbone,
            Some("prompts") => &mut prompts,
            Some("router") => &mut router,
            Some("head") => &mut head,
            _ => return Err(Error::Data(format!("unclassified parameter {:?}", p.name))),
        };
        *slot += p.numel();
    }
    let trainable = backbone + prompts + router + head;
    let total = model.param_count();
    let fraction = trainable as f64 / total as f64;
    let claimed_backbone = match regime {
        AdaptationRegime::PartialFineTune { .. } => claimed::PFT_BACKBONE,
        _ => 0.0,
    };
    let claimed_fraction = match regime {
        AdaptationRegime::FrozenExpert => claimed::FRACTION_FROZEN,
        AdaptationRegime::PartialFineTune { .. } => claimed::FRACTION_PFT,
        AdaptationRegime::RfPrompt { .. } => claimed::FRACTION_RFPROMPT,
    };
    let mut rows = vec![ParamRow {
        item: "backbone".into(),
        ours: backbone as f64,
        claimed: Some(claimed_backbone),
    }];
    if let AdaptationRegime::RfPrompt { prompt_len } = regime {
        rows.push(ParamRow {
            item: "prompts".into(),
            ours: prompts as f64,
            claimed: (*prompt_len == 16).then_some(claimed::PROMPTS_M16),
        });
    }
    rows.push(ParamRow {
        item: "router".into(),
        ours: router as f64,
        claimed: Some(claimed::ROUTER),
    });
    rows.push(ParamRow {
        item: "head".into(),
        ours: head as f64,
        claimed: Some(claimed::HEAD),
    });
    rows.push(ParamRow {
        item: "trainable".into(),
        ours: trainable as f64,
        claimed: matches!(regime, AdaptationRegime::RfPrompt { prompt_len: 16 })
            .then_some(claimed::RFPROMPT_TOTAL),
    });
    rows.push(ParamRow {
        item: "model total".into(),
        ours: total as f64,
        claimed: Some(claimed::MODEL_TOTAL),
    });
    rows.push(ParamRow {
        item: "trainable %".into(),
        ours: 100.0 * fraction,
        claimed: Some(100.0 * claimed_fraction),
    });
    Ok(ParamReport {
        regime: regime.to_string(),
        backbone_trainable: backbone,
        prompt_trainable: prompts,
        router_trainable: router,
        head_trainable: head,
        trainable,
        total,
        trainable_fraction: fraction,
        rows,
    })
}

impl ParamReport {
    pub fn render(&self) -> String {
        let num = |v: f64, pct: bool| {
            if pct {
                format!("{v:.3}")
            } else {
                format!("{v:.0}")
            }
        };
        let mut s = format!("{}\n", self.regime);
        let _ = writeln!(s, "{:<14} {:>12} {:>12} {:>12}", "item", "ours", "claimed", "delta");
        for r in &self.rows {
            let pct = r.item.ends_with('%');
            let claimed = r.claimed.map_or("-".into(), |c| num(c, pct));
            let delta = r.delta().map_or("-".into(), |d| num(d, pct));
            let _ = writeln!(s, "{:<14} {:>12} {:>12} {:>12}", r.item, num(r.ours, pct), claimed, delta);
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Embedding export

/// Writes one row per item: the label, then the fused representation fed to
/// the head.
pub fn export_embeddings(model: &MoeModel, data: &SpecSet, path: &Path) -> Result<usize> {
    let d = model.config.backbone.d_model;
    let mut s = String::from("label");
    for j in 0..d {
        let _ = write!(s, ",z_{j}");
    }
    s.push('\n');
    for (spec, &y) in data.specs.iter().zip(&data.labels) {
        let z = model.embed(spec, None)?;
        let _ = write!(s, "{y}");
        for v in z {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    write_file(path, s.as_bytes())?;
    Ok(data.len())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Experiment specification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
    Ablation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    Frozen,
    Pft,
    Rfprompt,
}

impl RegimeKind {
    pub fn regime(self, n_layers: usize, prompt_len: usize) -> AdaptationRegime {
        match self {
            Self::Frozen => AdaptationRegime::FrozenExpert,
            Self::Pft => AdaptationRegime::pft(n_layers),
            Self::Rfprompt => AdaptationRegime::RfPrompt { prompt_len },
        }
    }
}

fn default_caps() -> Vec<usize> {
    vec![100, 200, 400, 800, 1600]
}

fn default_shots() -> Vec<usize> {
    vec![0, 2, 4, 8, 16, 32, 64, 128]
}

fn default_prompt_lengths() -> Vec<usize> {
    vec![8, 12, 16, 20, 32]
}

fn default_regimes() -> Vec<RegimeKind> {
    vec![RegimeKind::Frozen, RegimeKind::Pft, RegimeKind::Rfprompt]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_prompt_len() -> usize {
    crate::prompt::DEFAULT_PROMPT_LEN
}

fn default_sigma() -> f32 {
    crate::prompt::DEFAULT_SIGMA
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub stage: Stage,
    #[serde(default = "default_caps")]
    pub caps: Vec<usize>,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_prompt_lengths")]
    pub prompt_lengths: Vec<usize>,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<RegimeKind>,
    /// One run of every cell per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f32,
    #[serde(default)]
    pub train: TrainConfig,
    /// Dataset conditions; the default is the shifted target task alone.
    #[serde(default = "default_conditions")]
    pub conditions: Vec<DatasetSpec>,
}

fn default_conditions() -> Vec<DatasetSpec> {
    vec![DatasetSpec::default_target()]
}

impl ExperimentSpec {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            caps: default_caps(),
            shots: default_shots(),
            prompt_lengths: default_prompt_lengths(),
            regimes: default_regimes(),
            seeds: default_seeds(),
            output_dir: default_output(),
            prompt_len: default_prompt_len(),
            sigma: default_sigma(),
            train: TrainConfig::default(),
            conditions: default_conditions(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let empty = |what: &str| Err(Error::Config(format!("{what} list is empty")));
        match self.stage {
            Stage::A if self.caps.is_empty() => return empty("caps"),
            Stage::A if self.caps.contains(&0) => {
                return Err(Error::Config("a cap of 0 is only meaningful as a Stage B shot count".into()))
            }
            Stage::B if self.shots.is_empty() => return empty("shots"),
            Stage::Ablation if self.prompt_lengths.is_empty() => return empty("prompt_lengths"),
            Stage::Ablation if self.prompt_lengths.contains(&0) => {
                return Err(Error::Config("ablation prompt lengths must be positive".into()))
            }
            _ => {}
        }
        if self.stage != Stage::Ablation && self.regimes.is_empty() {
            return empty("regimes");
        }
        if self.seeds.is_empty() {
            return empty("seeds");
        }
        if self.conditions.is_empty() {
            return empty("conditions");
        }
        if self.sigma <= 0.0 || !self.sigma.is_finite() {
            return Err(Error::Config(format!("prompt sigma must be positive, got {}", self.sigma)));
        }
        self.train.validate()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn config_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub condition: String,
    pub seed: u64,
    pub regime: String,
    /// N, K or P depending on the stage.
    pub axis_value: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub prompt_params: usize,
    pub best_epoch: Option<usize>,
    /// Checksum of every expert parameter after adaptation.
    pub backbone_checksum: u64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub stage: Stage,
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
    /// Stage-level statistics such as rank correlations.
    pub summary: BTreeMap<String, f64>,
}

impl SweepTable {
    fn axis_name(&self) -> &'static str {
        match self.stage {
            Stage::A => "N",
            Stage::B => "K",
            Stage::Ablation => "P",
        }
    }

    pub fn to_csv(&self, seed_label: &str) -> String {
        let mut s = format!("# config_hash={} seeds={seed_label}\n", self.config_hash);
        let _ = writeln!(
            s,
            "condition,seed,regime,{},train_size,test_size,accuracy,macro_f1,trainable_params,total_params,trainable_fraction,prompt_params,best_epoch,backbone_checksum",
            self.axis_name()
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{:016x}",
                r.condition,
                r.seed,
                r.regime,
                r.axis_value,
                r.train_size,
                r.test_size,
                r.report.accuracy,
                r.report.macro_f1,
                r.report.trainable_params,
                r.report.total_params,
                r.report.trainable_fraction,
                r.prompt_params,
                r.best_epoch.map_or(String::new(), |e| e.to_string()),
                r.backbone_checksum
            );
        }
        s
    }

    /// Accuracy grid: one line per axis value, one column per regime.
    pub fn render(&self, seed_label: &str) -> String {
        let mut s = format!("# config_hash={} seeds={seed_label}\n", self.config_hash);
        let mut conditions: Vec<&str> = self.rows.iter().map(|r| r.condition.as_str()).collect();
        conditions.dedup();
        for cond in conditions {
            let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.condition == cond).collect();
            let mut regimes: Vec<&str> = Vec::new();
            let mut values: Vec<usize> = Vec::new();
            for r in &rows {
                if !regimes.contains(&r.regime.as_str()) {
                    regimes.push(&r.regime);
                }
                if !values.contains(&r.axis_value) {
                    values.push(r.axis_value);
                }
            }
            let _ = writeln!(s, "[{cond}]");
            let _ = write!(s, "{:>6}", self.axis_name());
            for g in &regimes {
                let _ = write!(s, " {:>16}", format!("{g} acc/F1"));
            }
            s.push('\n');
            for v in values {
                let _ = write!(s, "{v:>6}");
                for g in &regimes {
                    let cells: Vec<&&SweepRow> =
                        rows.iter().filter(|r| r.axis_value == v && r.regime == *g).collect();
                    if cells.is_empty() {
                        let _ = write!(s, " {:>16}", "-");
                        continue;
                    }
                    let n = cells.len() as f64;
                    let acc = cells.iter().map(|r| r.report.accuracy).sum::<f64>() / n;
                    let f1 = cells.iter().map(|r| r.report.macro_f1).sum::<f64>() / n;
                    let _ = write!(s, " {:>16}", format!("{acc:.3}/{f1:.3}"));
                }
                s.push('\n');
            }
        }
        for (k, v) in &self.summary {
            let _ = writeln!(s, "{k}: {v:.4}");
        }
        s
    }

    /// Writes `<dir>/<stem>.csv`, `<stem>.txt` and `<stem>.json`.
    pub fn write(&self, dir: &Path, stem: &str, seed_label: &str) -> Result<()> {
        write_file(&dir.join(format!("{stem}.csv")), self.to_csv(seed_label).as_bytes())?;
        write_file(&dir.join(format!("{stem}.txt")), self.render(seed_label).as_bytes())?;
        write_file(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(self)?)
    }
}

/// Spectrograms of a dataset, computed once and shared by every cell.
pub struct PreparedDataset<'a> {
    pub dataset: &'a Dataset,
    specs: Vec<Spectrogram>,
}

impl<'a> PreparedDataset<'a> {
    pub fn new(dataset: &'a Dataset) -> Result<Self> {
        if dataset.records.is_empty() {
            return Err(Error::Data(format!("dataset {} has no records", dataset.spec.name)));
        }
        let specs = dataset.records.iter().map(iq_to_spectrogram).collect::<Result<_>>()?;
        Ok(Self { dataset, specs })
    }

    pub fn set(&self, part: &Partition) -> SpecSet {
        let idx = part.indices();
        SpecSet {
            specs: idx.iter().map(|&i| self.specs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.dataset.info[i].class).collect(),
        }
    }
}

/// One adaptation run from `base`, scored on `test`.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    base: &MoeModel,
    regime: &AdaptationRegime,
    train: &SpecSet,
    val: &SpecSet,
    test: &SpecSet,
    classes: usize,
    sigma: f32,
    cfg: &TrainConfig,
) -> Result<(MoeModel, TrainHistory, SweepRow)> {
    let model = prepare_model(base, regime, classes, sigma, cfg.seed)?;
    let (best, history) = adapt(&model, regime, train, val, cfg)?;
    let params = report_params(&best, regime)?;
    let report = evaluate(&best, test)?.with_params(params.trainable, params.total);
    let backbone_checksum = best.backbone_checksum();
    let row = SweepRow {
        condition: String::new(),
        seed: cfg.seed,
        regime: regime.to_string(),
        axis_value: 0,
        train_size: train.len(),
        test_size: test.len(),
        prompt_params: best.prompts.as_ref().map_or(0, crate::prompt::count_prompt_params),
        best_epoch: history.best_epoch,
        backbone_checksum,
        report,
    };
    Ok((best, history, row))
}

fn sweep<F>(spec: &ExperimentSpec, datasets: &[Dataset], mut cells: F) -> Result<SweepTable>
where
    F: FnMut(&PreparedDataset<'_>, u64, &mut Vec<SweepRow>, &SpecSet, &SpecSet) -> Result<()>,
{
    spec.validate()?;
    if datasets.is_empty() {
        return Err(Error::Data("no datasets to sweep over".into()));
    }
    let mut rows = Vec::new();
    for ds in datasets {
        let prepared = PreparedDataset::new(ds)?;
        let val = prepared.set(&ds.splits.val);
        let test = prepared.set(&ds.splits.test);
        if test.is_empty() || val.is_empty() {
            return Err(Error::Data(format!("dataset {} has an empty val or test split", ds.spec.name)));
        }
        for &seed in &spec.seeds {
            let start = rows.len();
            cells(&prepared, seed, &mut rows, &val, &test)?;
            for r in &mut rows[start..] {
                r.condition = ds.spec.name.clone();
            }
        }
    }
    Ok(SweepTable {
        stage: spec.stage,
        config_hash: spec.config_hash()?,
        rows,
        summary: BTreeMap::new(),
    })
}

fn cell_config(spec: &ExperimentSpec, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..spec.train.clone()
    }
}

/// Supervised data-scale sweep: every regime at every per-class cap N.
pub fn run_stage_a(spec: &ExperimentSpec, base: &MoeModel, datasets: &[Dataset]) -> Result<SweepTable> {
    if spec.stage != Stage::A {
        return Err(Error::Config("run_stage_a needs a Stage A spec".into()));
    }
    let n_layers = base.config.backbone.n_layers;
    sweep(spec, datasets, |prepared, seed, rows, val, test| {
        let ds = prepared.dataset;
        for &n in &spec.caps {
            let train = prepared.set(&cap_per_class(&ds.splits.train, n)?);
            for kind in &spec.regimes {
                let regime = kind.regime(n_layers, spec.prompt_len);
                info!("stage A {}: N={n} {regime} seed {seed}", ds.spec.name);
                let cfg = cell_config(spec, seed);
                let (_, _, mut row) = run_cell(base, &regime, &train, val, test, ds.n_classes(), spec.sigma, &cfg)?;
                row.axis_value = n;
                rows.push(row);
            }
        }
        Ok(())
    })
}

/// Few-shot sweep over nested K-shot supports; K = 0 scores the untrained
/// head.
pub fn run_stage_b(spec: &ExperimentSpec, base: &MoeModel, datasets: &[Dataset]) -> Result<SweepTable> {
    if spec.stage != Stage::B {
        return Err(Error::Config("run_stage_b needs a Stage B spec".into()));
    }
    let n_layers = base.config.backbone.n_layers;
    let mut table = sweep(spec, datasets, |prepared, seed, rows, val, test| {
        let ds = prepared.dataset;
        for &k in &spec.shots {
            let train = prepared.set(&kshot_support(&ds.splits.train, k)?);
            for kind in &spec.regimes {
                let regime = kind.regime(n_layers, spec.prompt_len);
                info!("stage B {}: K={k} {regime} seed {seed}", ds.spec.name);
                let cfg = cell_config(spec, seed);
                let (_, _, mut row) = run_cell(base, &regime, &train, val, test, ds.n_classes(), spec.sigma, &cfg)?;
                row.axis_value = k;
                rows.push(row);
            }
        }
        Ok(())
    })?;
    let mut keys: Vec<(String, String)> = table
        .rows
        .iter()
        .map(|r| (r.condition.clone(), r.regime.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    for (cond, regime) in keys {
        let (k, acc): (Vec<f64>, Vec<f64>) = table
            .rows
            .iter()
            .filter(|r| r.condition == cond && r.regime == regime)
            .map(|r| (r.axis_value as f64, r.report.accuracy))
            .unzip();
        if let Some(rho) = spearman(&k, &acc) {
            table.summary.insert(format!("spearman(K, acc) {cond} {regime}"), rho);
        }
    }
    Ok(table)
}

/// Prompt-length sweep under RFPrompt, with each prompt count checked
/// against the stored tensors.
pub fn run_ablation(spec: &ExperimentSpec, base: &MoeModel, datasets: &[Dataset]) -> Result<SweepTable> {
    if spec.stage != Stage::Ablation {
        return Err(Error::Config("run_ablation needs an ablation spec".into()));
    }
    let b = base.config.backbone;
    let cap = spec.caps.first().copied();
    sweep(spec, datasets, |prepared, seed, rows, val, test| {
        let ds = prepared.dataset;
        let part = match cap {
            Some(n) => cap_per_class(&ds.splits.train, n)?,
            None => ds.splits.train.clone(),
        };
        let train = prepared.set(&part);
        for &p in &spec.prompt_lengths {
            let regime = AdaptationRegime::RfPrompt { prompt_len: p };
            info!("ablation {}: P={p} seed {seed}", ds.spec.name);
            let cfg = cell_config(spec, seed);
            let (_, _, mut row) = run_cell(base, &regime, &train, val, test, ds.n_classes(), spec.sigma, &cfg)?;
            let expected = base.experts.len() * b.n_layers * p * b.d_model;
            if row.prompt_params != expected {
                return Err(Error::Data(format!(
                    "P={p}: stored prompt tensors hold {} values, expected {expected}",
                    row.prompt_params
                )));
            }
            row.axis_value = p;
            rows.push(row);
        }
        Ok(())
    })
}
