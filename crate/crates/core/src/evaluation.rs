//! Confusion-matrix metrics, modality ablations and subject-wise
//! cross-validation.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::{
    generate_caption, train_captioner, CaptionerConfig, CaptionerModel, CaptionerTrainConfig, DecodeConfig,
};
use crate::corpus::{k_fold, sample_support_set, Dataset, Label, Partition, SplitSpec};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode, FusionModel};
use crate::retrieval::{build_store, classify, RetrievalConfig, SupportStore};
use crate::text::Tokenizer;
use crate::trainer::{train_fusion, TrainConfig, TrainHistory};

/// Counts over the positive class `infected`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn total(&self) -> usize {
        self.positives() + self.negatives()
    }
}

pub fn confusion(preds: &[Label], truth: &[Label]) -> Result<Confusion> {
    if preds.len() != truth.len() {
        return Err(Error::LengthMismatch(preds.len(), truth.len()));
    }
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let mut cm = Confusion::default();
    for (&p, &t) in preds.iter().zip(truth) {
        match (p, t) {
            (Label::Infected, Label::Infected) => cm.tp += 1,
            (Label::Infected, Label::Uninfected) => cm.fp += 1,
            (Label::Uninfected, Label::Uninfected) => cm.tn += 1,
            (Label::Uninfected, Label::Infected) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Classification metrics; `None` marks a zero denominator and serializes
/// as `null`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spc: Option<f64>,
    pub ppv: Option<f64>,
    pub f1: Option<f64>,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["acc", "sen", "spc", "ppv", "f1"];

    pub fn values(&self) -> [Option<f64>; 5] {
        [self.acc, self.sen, self.spc, self.ppv, self.f1]
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(cm: &Confusion) -> Result<Metrics> {
    if cm.total() == 0 {
        return Err(Error::AllZeroConfusion);
    }
    let sen = ratio(cm.tp, cm.tp + cm.fn_);
    let ppv = ratio(cm.tp, cm.tp + cm.fp);
    let f1 = match (ppv, sen) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    Ok(Metrics { acc: ratio(cm.tp + cm.tn, cm.total()), sen, spc: ratio(cm.tn, cm.tn + cm.fp), ppv, f1 })
}

/// Mean and population standard deviation over the defined values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub stdev: Option<f64>,
    pub undefined: usize,
}

pub fn mean_stdev(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub fn summarize(reports: &[Metrics]) -> BTreeMap<String, MetricSummary> {
    Metrics::NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let defined: Vec<f64> = reports.iter().filter_map(|m| m.values()[i]).collect();
            let ms = mean_stdev(&defined);
            let summary = MetricSummary {
                mean: ms.map(|(m, _)| m),
                stdev: ms.map(|(_, s)| s),
                undefined: reports.len() - defined.len(),
            };
            (name.to_string(), summary)
        })
        .collect()
}

/// Where query and training captions come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionPolicy {
    /// Every sample already carries its caption.
    Provided,
    /// A captioner is fitted on the training captions of each fold and then
    /// describes every image of the fold, so fusion training, the support
    /// store and the queries all see generated captions.
    Generated,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionerSettings {
    pub model: CaptionerConfig,
    pub train: CaptionerTrainConfig,
    pub decode: DecodeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
    pub support_size: usize,
    pub strict_support: bool,
    /// Keep the fusion epoch with the best validation accuracy.
    pub select_on_validation: bool,
    pub captions: CaptionPolicy,
    pub captioner: CaptionerSettings,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
            retrieval: RetrievalConfig::default(),
            support_size: 1024,
            strict_support: false,
            select_on_validation: true,
            captions: CaptionPolicy::Provided,
            captioner: CaptionerSettings::default(),
        }
    }
}

impl EvalConfig {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

pub const SELECTION_CRITERION: &str = "best_validation_accuracy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub truth: Label,
    pub predicted: Label,
}

pub struct FoldOutcome {
    pub confusion: Confusion,
    pub metrics: Metrics,
    pub history: TrainHistory,
    pub predictions: Vec<Prediction>,
    pub model: FusionModel,
    pub store: SupportStore,
    pub captioner: Option<CaptionerModel>,
}

/// Accuracy of `model` on `queries` when retrieving from `support`.
pub fn retrieval_accuracy(
    model: &FusionModel,
    support: &Dataset,
    queries: &Dataset,
    cfg: &RetrievalConfig,
) -> Result<f64> {
    let store = build_store(model, support)?;
    let k = RetrievalConfig { k: cfg.k.min(store.len()) };
    let mut correct = 0usize;
    for s in queries.samples() {
        let r = classify(&store, model, s.image.load()?, s.caption.as_deref(), &k)?;
        correct += usize::from(r.predicted == s.label);
    }
    Ok(correct as f64 / queries.len().max(1) as f64)
}

fn check_disjoint(train: &Dataset, other: &Dataset, what: &str) -> Result<()> {
    let subjects: HashSet<&str> = train.samples().iter().map(|s| s.subject_id.as_str()).collect();
    match other.samples().iter().find(|s| subjects.contains(s.subject_id.as_str())) {
        Some(s) => Err(Error::Leakage(format!("subject {} is in both train and {what}", s.subject_id))),
        None => Ok(()),
    }
}

/// Fits a captioner on `train` and replaces the captions of `queries` with
/// its greedy descriptions.
pub fn caption_with_trained_captioner(
    train: &Dataset,
    queries: &[&Dataset],
    settings: &CaptionerSettings,
    seed: u64,
) -> Result<(CaptionerModel, Vec<Dataset>)> {
    let captioned = train.captioned();
    let tokenizer = Tokenizer::build(captioned.samples().iter().filter_map(|s| s.caption.as_deref()));
    let mut model = CaptionerModel::new(settings.model.clone(), tokenizer, seed)?;
    let tcfg = CaptionerTrainConfig { seed, ..settings.train.clone() };
    train_captioner(&mut model, &captioned, &tcfg, |_, _| {})?;
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let caps = q
            .samples()
            .iter()
            .map(|s| Ok(Some(generate_caption(&model, s.image.load()?, &settings.decode)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push(q.with_captions(&caps));
    }
    Ok((model, out))
}

/// Trains on the fold's train partition (plus `extra_train`), builds the
/// support store from train and scores the test partition.
pub fn run_fold(
    ds: &Dataset,
    partition: &Partition,
    extra_train: Option<&Dataset>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<FoldOutcome> {
    let (mut train, mut val, mut test) = partition.datasets(ds);
    check_disjoint(&train, &test, "test")?;
    check_disjoint(&train, &val, "validation")?;
    if test.is_empty() {
        return Err(Error::Empty("test partition"));
    }
    if let Some(extra) = extra_train {
        train = train.concat(extra)?;
    }
    let captioner = match cfg.captions {
        CaptionPolicy::Provided => None,
        CaptionPolicy::Generated => {
            let (m, mut q) = caption_with_trained_captioner(&train, &[&train, &val, &test], &cfg.captioner, seed)?;
            test = q.pop().expect("three sets");
            val = q.pop().expect("three sets");
            train = q.pop().expect("three sets");
            Some(m)
        }
    };
    let tokenizer = Tokenizer::build(train.samples().iter().filter_map(|s| s.caption.as_deref()));
    let mut model = FusionModel::new(cfg.fusion.clone(), tokenizer, seed)?;
    let support = sample_support_set(&train, cfg.support_size, seed, cfg.strict_support)?;

    let tcfg = TrainConfig { seed, ..cfg.train.clone() };
    let history = if cfg.select_on_validation && !val.is_empty() {
        let mut validator = |m: &FusionModel| retrieval_accuracy(m, &support, &val, &cfg.retrieval);
        train_fusion(&mut model, &train, &tcfg, Some(&mut validator), |_| {})?
    } else {
        train_fusion(&mut model, &train, &tcfg, None, |_| {})?
    };

    let store = build_store(&model, &support)?;
    if cfg.retrieval.k > store.len() {
        log::warn!("k = {} exceeds the {} support items; using k = {}", cfg.retrieval.k, store.len(), store.len());
    }
    let k = RetrievalConfig { k: cfg.retrieval.k.min(store.len()) };
    let mut predictions = Vec::with_capacity(test.len());
    for s in test.samples() {
        let r = classify(&store, &model, s.image.load()?, s.caption.as_deref(), &k)?;
        predictions.push(Prediction { id: s.id.clone(), truth: s.label, predicted: r.predicted });
    }
    let preds: Vec<Label> = predictions.iter().map(|p| p.predicted).collect();
    let truth: Vec<Label> = predictions.iter().map(|p| p.truth).collect();
    let cm = confusion(&preds, &truth)?;
    Ok(FoldOutcome { confusion: cm, metrics: metrics(&cm)?, history, predictions, model, store, captioner })
}

/// [`run_fold`] with only the fusion input mode changed.
pub fn run_ablation(
    mode: FusionMode,
    ds: &Dataset,
    partition: &Partition,
    extra_train: Option<&Dataset>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<FoldOutcome> {
    let mut cfg = cfg.clone();
    cfg.fusion.mode = mode;
    run_fold(ds, partition, extra_train, &cfg, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub confusion: Confusion,
    pub metrics: Metrics,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub summary: BTreeMap<String, MetricSummary>,
    pub config_hash: String,
    pub seed: u64,
    pub mode: FusionMode,
    pub stdev: String,
    pub selection: String,
}

/// Subject-wise k-fold evaluation; each fold's train partition also
/// receives `extra_train`.
pub fn cross_validate(
    ds: &Dataset,
    spec: &SplitSpec,
    extra_train: Option<&Dataset>,
    cfg: &EvalConfig,
    mut on_fold: impl FnMut(usize, &FoldOutcome),
) -> Result<CvReport> {
    let folds = k_fold(ds, spec)?;
    let mut reports = Vec::with_capacity(folds.len());
    for (i, fold) in folds.iter().enumerate() {
        let out = run_fold(ds, fold, extra_train, cfg, spec.seed.wrapping_add(i as u64))?;
        log::info!("fold {i}: acc {:?}", out.metrics.acc);
        on_fold(i, &out);
        reports.push(FoldReport {
            fold: i,
            confusion: out.confusion,
            metrics: out.metrics,
            best_epoch: out.history.best_epoch,
        });
    }
    let all: Vec<Metrics> = reports.iter().map(|r| r.metrics).collect();
    Ok(CvReport {
        summary: summarize(&all),
        folds: reports,
        config_hash: cfg.hash(),
        seed: spec.seed,
        mode: cfg.fusion.mode,
        stdev: "population".into(),
        selection: if cfg.select_on_validation { SELECTION_CRITERION.into() } else { "last_epoch".into() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Infected as I, Uninfected as U};

    #[test]
    fn generated_policy_recaptions_the_whole_fold() {
        use crate::captioner::CaptionerConfig;
        use crate::corpus::{generate_toy_corpus, subject_wise_split, SplitSpec, ToyAttrConfig};
        let toy = generate_toy_corpus(40, &ToyAttrConfig { image_size: 8, ..Default::default() }, 3).unwrap();
        let part = subject_wise_split(&toy.dataset, &SplitSpec::default()).unwrap();
        let mut cfg = EvalConfig::default();
        cfg.fusion = FusionConfig {
            image_size: 8,
            patch_size: 4,
            width: 4,
            encoder_layers: 1,
            max_text_len: 8,
            projection_dim: 4,
            ..Default::default()
        };
        cfg.train = TrainConfig { epochs: 1, batch_size: 64, ..Default::default() };
        cfg.captions = CaptionPolicy::Generated;
        cfg.captioner.model = CaptionerConfig {
            image_size: 8,
            patch_size: 4,
            width: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            max_len: 8,
            ..Default::default()
        };
        cfg.captioner.train.epochs = 1;
        let out = run_fold(&toy.dataset, &part, None, &cfg, 0).unwrap();
        assert!(out.captioner.is_some());
        assert_eq!(out.predictions.len(), part.test.len());
        let provided = run_fold(&toy.dataset, &part, None, &EvalConfig { captions: CaptionPolicy::Provided, ..cfg }, 0);
        assert!(provided.unwrap().captioner.is_none());
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion(&[I, I, U, U], &[I, U, U, I]).unwrap(), Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let same = confusion(&[I, U, U], &[I, U, U]).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
        assert_eq!(confusion(&[I; 4], &[U; 4]).unwrap(), Confusion { fp: 4, ..Default::default() });
        assert!(matches!(confusion(&[I], &[I, U]), Err(Error::LengthMismatch(1, 2))));
        assert!(matches!(confusion(&[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&Confusion { tp: 3, fn_: 1, tn: 2, fp: 2 }).unwrap();
        assert_eq!((m.sen, m.spc, m.acc, m.ppv), (Some(0.75), Some(0.5), Some(0.625), Some(0.6)));
        assert!((m.f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let perfect = metrics(&Confusion { tp: 2, tn: 5, ..Default::default() }).unwrap();
        assert!(perfect.values().iter().all(|v| *v == Some(1.0)));
        let none = metrics(&Confusion { tn: 3, fn_: 1, ..Default::default() }).unwrap();
        assert_eq!((none.ppv, none.f1), (None, None));
        assert!(matches!(metrics(&Confusion::default()), Err(Error::AllZeroConfusion)));
    }

    #[test]
    fn undefined_serializes_as_null() {
        let m = metrics(&Confusion { tn: 1, ..Default::default() }).unwrap();
        let v = serde_json::to_value(m).unwrap();
        assert!(v["ppv"].is_null());
        assert_eq!(v["spc"], 1.0);
        let cm = serde_json::to_value(Confusion { fn_: 2, ..Default::default() }).unwrap();
        assert_eq!(cm["fn"], 2);
    }

    #[test]
    fn summary_uses_population_stdev_and_counts_undefined() {
        let m = |acc: f64, ppv: Option<f64>| Metrics { acc: Some(acc), sen: None, spc: Some(0.5), ppv, f1: None };
        let reports = [m(0.8, Some(1.0)), m(0.8, None), m(0.8, Some(0.5)), m(0.9, None), m(0.7, Some(0.0))];
        let s = summarize(&reports);
        assert!((s["acc"].mean.unwrap() - 0.8).abs() < 1e-12);
        assert!((s["acc"].stdev.unwrap() - 0.004f64.sqrt()).abs() < 1e-12);
        assert_eq!(s["spc"].stdev, Some(0.0));
        assert_eq!((s["ppv"].mean, s["ppv"].undefined), (Some(0.5), 2));
        assert_eq!((s["sen"].mean, s["sen"].undefined), (None, 5));
    }
}
