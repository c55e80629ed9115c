//! Stage graph driven by a [`PipelineConfig`]: every stage reads the
//! artifacts of earlier stages from the output root, writes its own and
//! records a run manifest.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::{
    generate_caption, train_captioner, train_itm, CaptionCache, CaptionerModel, CaptionerTrainConfig, ClientMode,
    ItmTrainConfig, MllmClient, CREDENTIAL_ENV, ENDPOINT_ENV,
};
use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::config::PipelineConfig;
use crate::corpus::{
    augment_image, generate_toy_corpus, ingest_synthetic, load_manifest, sample_support_set, sanitize,
    subject_wise_split, write_manifest, Dataset, ImageHandle, Label, Partition, Sample, Source, ToyAttrConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{confusion, cross_validate, metrics, retrieval_accuracy, CaptionPolicy, Confusion, Metrics};
use crate::explain::{fusion_rollout, phrase_gradcams, project_embeddings, render_report, QueryPoint, QueryReport};
use crate::fusion::{FusionMode, FusionModel};
use crate::retrieval::{build_store, classify, RetrievalConfig, SupportStore, VoteCounts, STORE_VERSION};
use crate::text::Tokenizer;
use crate::trainer::{train_fusion, EpochLog, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenToy,
    Caption,
    TrainCaptioner,
    TrainFusion,
    BuildSupport,
    Classify,
    Evaluate,
    Explain,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenToy,
        Stage::Caption,
        Stage::TrainCaptioner,
        Stage::TrainFusion,
        Stage::BuildSupport,
        Stage::Classify,
        Stage::Evaluate,
        Stage::Explain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenToy => "gen-toy",
            Stage::Caption => "caption",
            Stage::TrainCaptioner => "train-captioner",
            Stage::TrainFusion => "train-fusion",
            Stage::BuildSupport => "build-support",
            Stage::Classify => "classify",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stage {s:?}")))
    }
}

/// Artifact locations under an output root.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join(".scarwid.lock")
    }

    pub fn toy_manifest(&self) -> PathBuf {
        self.root.join("toy/manifest.jsonl")
    }

    pub fn toy_metadata(&self) -> PathBuf {
        self.root.join("toy/metadata.json")
    }

    pub fn captioned_manifest(&self) -> PathBuf {
        self.root.join("captions/manifest.jsonl")
    }

    pub fn caption_cache(&self) -> PathBuf {
        self.root.join("captions/cache.jsonl")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn captioner_model(&self) -> PathBuf {
        self.root.join("captioner/model.scwm")
    }

    pub fn captioner_history(&self) -> PathBuf {
        self.root.join("captioner/history.json")
    }

    pub fn fusion_model(&self) -> PathBuf {
        self.root.join("fusion/model.scwm")
    }

    pub fn fusion_history(&self) -> PathBuf {
        self.root.join("fusion/history.json")
    }

    pub fn store(&self) -> PathBuf {
        self.root.join("support/store.scwd")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("classify/predictions.json")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("evaluate/results.json")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn run_manifest(&self, stage: Stage) -> PathBuf {
        self.root.join("manifests").join(format!("{stage}.json"))
    }
}

/// Exclusive claim on an output root, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(layout: &Layout) -> Result<Self> {
        let root = layout.root();
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = layout.lock();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(root.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub scarwid: String,
    pub checkpoint_format: u32,
    pub store_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            scarwid: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: CHECKPOINT_VERSION,
            store_format: STORE_VERSION,
        }
    }
}

/// Provenance record of one stage run. Contains no timestamps, so
/// identical runs produce identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    pub mode: FusionMode,
    pub versions: Versions,
    /// SHA-256 of every input, keyed by a path relative to the output root
    /// where possible.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption_mode: Option<ClientMode>,
    /// SHA-256 over all other fields.
    pub run_hash: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json("artifact", e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, stage: Stage) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { path: path.to_path_buf(), stage: stage.as_str() })
    }
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    seed: u64,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

#[derive(Serialize)]
struct CaptionerHistory<'a> {
    lm: &'a [f64],
    itm: &'a [f64],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub id: String,
    pub truth: Label,
    pub predicted: Label,
    pub neighbor_ids: Vec<String>,
    pub distances: Vec<f64>,
    pub votes: VoteCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub k: usize,
    pub predictions: Vec<QueryPrediction>,
    pub confusion: Confusion,
    pub metrics: Metrics,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    layout: Layout,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    caption_mode: Option<ClientMode>,
}

impl<'a> Run<'a> {
    fn key(&self, path: &Path) -> String {
        path.strip_prefix(self.layout.root()).unwrap_or(path).display().to_string()
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.inputs.insert(self.key(path), h);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.outputs.insert(self.key(path), h);
        Ok(())
    }

    fn base_manifest(&self) -> Result<PathBuf> {
        match &self.cfg.paths.manifest {
            Some(p) => Ok(p.clone()),
            None => {
                let p = self.layout.toy_manifest();
                require(&p, Stage::GenToy)?;
                Ok(p)
            }
        }
    }

    fn load(&mut self, path: &Path) -> Result<Dataset> {
        let ds = load_manifest(path, self.cfg.corpus.image_size)?;
        self.input(path)?;
        self.inputs.insert("corpus".into(), ds.content_hash()?);
        Ok(ds)
    }

    /// Captioned corpus when the caption stage ran, the base corpus
    /// otherwise. Captions are required unless the fusion model ignores text.
    fn corpus(&mut self) -> Result<Dataset> {
        let captioned = self.layout.captioned_manifest();
        let path = if captioned.is_file() { captioned.clone() } else { self.base_manifest()? };
        let ds = self.load(&path)?;
        let needs_text = self.cfg.fusion.mode != FusionMode::ImageOnly;
        if needs_text && ds.samples().iter().any(|s| s.caption.is_none()) {
            return Err(Error::MissingArtifact { path: captioned, stage: Stage::Caption.as_str() });
        }
        Ok(ds)
    }

    fn synthetic(&mut self) -> Result<Option<Dataset>> {
        let dirs = [
            (&self.cfg.paths.synthetic_infected, Label::Infected),
            (&self.cfg.paths.synthetic_uninfected, Label::Uninfected),
        ];
        let mut out: Option<Dataset> = None;
        for (dir, label) in dirs {
            let Some(dir) = dir else { continue };
            let ingest = ingest_synthetic(dir, label, self.cfg.corpus.image_size)?;
            if ingest.skipped > 0 {
                log::warn!("{} undecodable files skipped in {}", ingest.skipped, dir.display());
            }
            out = Some(match out {
                Some(d) => d.concat(&ingest.dataset)?,
                None => ingest.dataset,
            });
        }
        if let Some(d) = &out {
            self.inputs.insert("synthetic".into(), d.content_hash()?);
        }
        Ok(out)
    }

    /// Fixed subject-wise split, written once per run for inspection.
    fn partition(&mut self, ds: &Dataset) -> Result<Partition> {
        let p = subject_wise_split(ds, &self.cfg.split_spec())?;
        let ids = |idx: &[usize]| idx.iter().map(|&i| ds.get(i).id.clone()).collect();
        let file = SplitFile { seed: self.cfg.seed, train: ids(&p.train), val: ids(&p.val), test: ids(&p.test) };
        let path = self.layout.split();
        write_json(&path, &file)?;
        self.output(&path)?;
        Ok(p)
    }

    /// Real training samples plus synthetic images and, when configured,
    /// one augmented copy of each real sample.
    fn training_set(&mut self, train: Dataset) -> Result<Dataset> {
        let mut train = match self.synthetic()? {
            Some(extra) => train.concat(&extra)?,
            None => train,
        };
        if !self.cfg.corpus.augment.ops.is_empty() {
            let mut copies = Vec::new();
            for (i, s) in train.samples().iter().enumerate() {
                if s.source != Source::Real {
                    continue;
                }
                let img = augment_image(s.image.load()?, &self.cfg.corpus.augment, self.cfg.seed ^ ((i as u64) << 20))?;
                copies.push(Sample { id: format!("{}~aug", s.id), image: ImageHandle::memory(img), ..s.clone() });
            }
            train = train.concat(&Dataset::new(copies)?)?;
        }
        Ok(train)
    }

    fn fusion_model(&mut self) -> Result<FusionModel> {
        let path = self.layout.fusion_model();
        require(&path, Stage::TrainFusion)?;
        self.input(&path)?;
        FusionModel::from_checkpoint(&Checkpoint::load(&path)?)
    }

    fn captioner_model(&mut self) -> Result<CaptionerModel> {
        let path = self.layout.captioner_model();
        require(&path, Stage::TrainCaptioner)?;
        self.input(&path)?;
        CaptionerModel::from_checkpoint(&Checkpoint::load(&path)?)
    }

    fn store(&mut self, model: &FusionModel) -> Result<SupportStore> {
        let path = self.layout.store();
        require(&path, Stage::BuildSupport)?;
        self.input(&path)?;
        let store = SupportStore::load(&path)?;
        if store.model_hash() != model.hash() {
            return Err(Error::InvalidConfig(format!(
                "{} was built from a different fusion model; rerun build-support",
                path.display()
            )));
        }
        Ok(store)
    }

    /// Applies the caption policy: under `Generated` the trained captioner
    /// replaces the captions of `samples`.
    fn query_captions(&mut self, samples: Dataset) -> Result<Dataset> {
        match self.cfg.evaluation.captions {
            CaptionPolicy::Provided => Ok(samples),
            CaptionPolicy::Generated => {
                let m = self.captioner_model()?;
                let caps = samples
                    .samples()
                    .iter()
                    .map(|s| Ok(Some(generate_caption(&m, s.image.load()?, &self.cfg.captioner.decode)?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(samples.with_captions(&caps))
            }
        }
    }

    fn retrieval(&self, store: &SupportStore) -> RetrievalConfig {
        RetrievalConfig { k: self.cfg.retrieval.k.min(store.len()) }
    }

    fn finish(self, stage: Stage) -> Result<RunManifest> {
        let mut m = RunManifest {
            stage,
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            mode: self.cfg.fusion.mode,
            versions: Versions::default(),
            inputs: self.inputs,
            outputs: self.outputs,
            caption_mode: self.caption_mode,
            run_hash: String::new(),
        };
        m.run_hash = hex::encode(Sha256::digest(serde_json::to_vec(&m).map_err(|e| Error::json("run manifest", e))?));
        write_json(&self.layout.run_manifest(stage), &m)?;
        Ok(m)
    }
}

/// Validates `cfg`, locks its output root and runs one stage.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths.output);
    let _lock = OutputLock::acquire(&layout)?;
    let mut run = Run { cfg, layout, inputs: BTreeMap::new(), outputs: BTreeMap::new(), caption_mode: None };
    log::info!("stage {stage}: output root {}", run.layout.root().display());
    match stage {
        Stage::GenToy => gen_toy(&mut run)?,
        Stage::Caption => caption(&mut run)?,
        Stage::TrainCaptioner => train_captioner_stage(&mut run)?,
        Stage::TrainFusion => train_fusion_stage(&mut run)?,
        Stage::BuildSupport => build_support(&mut run)?,
        Stage::Classify => classify_stage(&mut run)?,
        Stage::Evaluate => evaluate(&mut run)?,
        Stage::Explain => explain(&mut run)?,
    }
    run.finish(stage)
}

fn gen_toy(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let toy_cfg = ToyAttrConfig { image_size: cfg.corpus.image_size, ..cfg.corpus.toy.clone() };
    let toy = generate_toy_corpus(cfg.corpus.toy_size, &toy_cfg, cfg.seed)?;
    let manifest = run.layout.toy_manifest();
    write_manifest(&toy.dataset, &manifest)?;
    let meta = run.layout.toy_metadata();
    write_json(&meta, &toy.metadata)?;
    run.output(&manifest)?;
    run.output(&meta)?;
    run.outputs.insert("corpus".into(), toy.dataset.content_hash()?);
    Ok(())
}

fn caption(run: &mut Run) -> Result<()> {
    let path = run.base_manifest()?;
    let ds = run.load(&path)?;
    let cache_path = run.cfg.paths.caption_cache.clone().unwrap_or_else(|| run.layout.caption_cache());
    if cache_path.is_file() {
        run.input(&cache_path)?;
    }
    if std::env::var_os(ENDPOINT_ENV).is_some() && std::env::var_os(CREDENTIAL_ENV).is_some() {
        log::warn!("no live transport is built in; captioning from the cache in replay mode");
    }
    let mut client = MllmClient::replay(CaptionCache::open(&cache_path)?, run.cfg.captioner.prompt.clone())?;
    run.caption_mode = Some(client.mode());
    let mut caps = Vec::with_capacity(ds.len());
    for s in ds.samples() {
        caps.push(Some(match &s.caption {
            Some(c) => c.clone(),
            None => client.caption(&s.id, s.image.load()?, s.label)?,
        }));
    }
    let out = run.layout.captioned_manifest();
    write_manifest(&ds.with_captions(&caps), &out)?;
    run.output(&out)
}

fn train_captioner_stage(run: &mut Run) -> Result<()> {
    let ds = run.corpus()?;
    let part = run.partition(&ds)?;
    let train = ds.subset(&part.train).captioned();
    let cfg = run.cfg;
    let tokenizer = Tokenizer::build(train.samples().iter().filter_map(|s| s.caption.as_deref()));
    let mut model = CaptionerModel::new(cfg.captioner.model.clone(), tokenizer, cfg.seed)?;
    let lm = train_captioner(
        &mut model,
        &train,
        &CaptionerTrainConfig { seed: cfg.seed, ..cfg.captioner.train.clone() },
        |e, l| log::info!("captioner epoch {e}: loss {l:.4}"),
    )?;
    let itm =
        train_itm(&mut model, &train, &ItmTrainConfig { seed: cfg.seed, ..cfg.captioner.itm.clone() }, |e, l| {
            log::info!("match head epoch {e}: loss {l:.4}")
        })?;
    let path = run.layout.captioner_model();
    model.to_checkpoint().save(&path)?;
    let hist = run.layout.captioner_history();
    write_json(&hist, &CaptionerHistory { lm: &lm, itm: &itm })?;
    run.output(&path)?;
    run.output(&hist)
}

fn train_fusion_stage(run: &mut Run) -> Result<()> {
    let ds = run.corpus()?;
    let part = run.partition(&ds)?;
    let (train, val, _) = part.datasets(&ds);
    let train = run.training_set(train)?;
    let train = run.query_captions(train)?;
    let val = if run.cfg.evaluation.select_on_validation { run.query_captions(val)? } else { val };
    let cfg = run.cfg;
    let tokenizer = Tokenizer::build(train.samples().iter().filter_map(|s| s.caption.as_deref()));
    let mut model = FusionModel::new(cfg.fusion.clone(), tokenizer, cfg.seed)?;
    let tcfg = TrainConfig { seed: cfg.seed, ..cfg.trainer.clone() };
    let log_epoch = |e: &EpochLog| log::info!("fusion epoch {}: loss {:.4}", e.epoch, e.mean_loss);
    let history = if cfg.evaluation.select_on_validation && !val.is_empty() {
        let support = sample_support_set(&train, cfg.retrieval.support_size, cfg.seed, cfg.retrieval.strict_support)?;
        let rc = RetrievalConfig { k: cfg.retrieval.k };
        let mut validator = |m: &FusionModel| retrieval_accuracy(m, &support, &val, &rc);
        train_fusion(&mut model, &train, &tcfg, Some(&mut validator), log_epoch)?
    } else {
        train_fusion(&mut model, &train, &tcfg, None, log_epoch)?
    };
    let path = run.layout.fusion_model();
    model.to_checkpoint().save(&path)?;
    let hist = run.layout.fusion_history();
    write_json(&hist, &history)?;
    run.output(&path)?;
    run.output(&hist)
}

fn build_support(run: &mut Run) -> Result<()> {
    let model = run.fusion_model()?;
    let ds = run.corpus()?;
    let part = run.partition(&ds)?;
    let train = ds.subset(&part.train);
    let train = match run.synthetic()? {
        Some(extra) => train.concat(&extra)?,
        None => train,
    };
    let train = run.query_captions(train)?;
    let cfg = run.cfg;
    let support = sample_support_set(&train, cfg.retrieval.support_size, cfg.seed, cfg.retrieval.strict_support)?;
    let store = build_store(&model, &support)?;
    let path = run.layout.store();
    store.save(&path)?;
    run.output(&path)
}

fn classify_stage(run: &mut Run) -> Result<()> {
    let model = run.fusion_model()?;
    let store = run.store(&model)?;
    let ds = run.corpus()?;
    let part = run.partition(&ds)?;
    let test = run.query_captions(ds.subset(&part.test))?;
    if test.is_empty() {
        return Err(Error::Empty("test partition"));
    }
    let rc = run.retrieval(&store);
    let mut predictions = Vec::with_capacity(test.len());
    for s in test.samples() {
        let r = classify(&store, &model, s.image.load()?, s.caption.as_deref(), &rc)?;
        predictions.push(QueryPrediction {
            id: s.id.clone(),
            truth: s.label,
            predicted: r.predicted,
            neighbor_ids: r.neighbor_ids,
            distances: r.distances,
            votes: r.votes,
        });
    }
    let preds: Vec<Label> = predictions.iter().map(|p| p.predicted).collect();
    let truth: Vec<Label> = predictions.iter().map(|p| p.truth).collect();
    let cm = confusion(&preds, &truth)?;
    let file = PredictionsFile { k: rc.k, predictions, confusion: cm, metrics: metrics(&cm)? };
    let path = run.layout.predictions();
    write_json(&path, &file)?;
    run.output(&path)
}

fn evaluate(run: &mut Run) -> Result<()> {
    let ds = run.corpus()?;
    let extra = run.synthetic()?;
    let cfg = run.cfg;
    let report = cross_validate(&ds, &cfg.split_spec(), extra.as_ref(), &cfg.eval_config(), |_, _| {})?;
    let path = run.layout.results();
    write_json(&path, &report)?;
    run.output(&path)
}

fn explain(run: &mut Run) -> Result<()> {
    let model = run.fusion_model()?;
    let store = run.store(&model)?;
    let ds = run.corpus()?;
    let part = run.partition(&ds)?;
    let n = part.test.len().min(run.cfg.explain.max_queries);
    let queries = run.query_captions(ds.subset(&part.test[..n]))?;
    let captioner = if run.layout.captioner_model().is_file() {
        Some(run.captioner_model()?)
    } else {
        log::warn!("no trained captioner; Grad-CAM panels are left empty (run train-captioner)");
        None
    };
    let mut captions: HashMap<String, Option<String>> =
        ds.samples().iter().map(|s| (s.id.clone(), s.caption.clone())).collect();
    if let Some(extra) = run.synthetic()? {
        captions.extend(extra.samples().iter().map(|s| (s.id.clone(), s.caption.clone())));
    }
    let rc = run.retrieval(&store);
    let mut points = Vec::with_capacity(queries.len());
    let mut results = Vec::with_capacity(queries.len());
    for s in queries.samples() {
        let img = s.image.load()?;
        let text = s.caption.as_deref().unwrap_or("");
        let r = classify(&store, &model, img, s.caption.as_deref(), &rc)?;
        points.push(QueryPoint { id: s.id.clone(), embedding: model.fuse(img, text)?, label: r.predicted });
        results.push(r);
    }
    let projection = project_embeddings(&store, &points)?;
    let root = run.layout.reports();
    let cfg = run.cfg;
    for (s, r) in queries.samples().iter().zip(&results) {
        let img = s.image.load()?;
        let text = s.caption.as_deref().unwrap_or("");
        let rollout = match cfg.fusion.mode {
            FusionMode::TextOnly => None,
            _ => Some(fusion_rollout(&model, img, text)?),
        };
        let gradcam = match (&captioner, s.caption.as_deref()) {
            (Some(c), Some(cap)) if !cap.trim().is_empty() => phrase_gradcams(c, img, cap, &cfg.explain.gradcam)?,
            _ => Vec::new(),
        };
        let neighbor_captions: Vec<Option<String>> =
            r.neighbor_ids.iter().map(|id| captions.get(id).cloned().flatten()).collect();
        let dir = render_report(
            &root,
            &QueryReport {
                query_id: &s.id,
                caption: s.caption.as_deref(),
                truth: Some(s.label),
                image: img,
                result: r,
                neighbor_captions: &neighbor_captions,
                rollout: rollout.as_ref(),
                gradcam: &gradcam,
                projection: &projection,
            },
        )?;
        debug_assert!(dir.ends_with(sanitize(&s.id)));
        for f in crate::explain::REPORT_FILES {
            run.output(&dir.join(f))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(root: &Path) -> PipelineConfig {
        let mut c = PipelineConfig::from_json(
            r#"{
                "corpus": {"image_size": 16, "toy_size": 40},
                "fusion": {"image_size": 16, "patch_size": 8, "width": 8, "encoder_layers": 1, "projection_dim": 8, "max_text_len": 16},
                "captioner": {"model": {"image_size": 16, "patch_size": 8, "width": 8, "encoder_layers": 1, "decoder_layers": 1, "max_len": 16},
                              "train": {"epochs": 1}, "itm": {"epochs": 1}},
                "trainer": {"epochs": 2, "batch_size": 8},
                "retrieval": {"support_size": 64},
                "explain": {"max_queries": 2}
            }"#,
        )
        .unwrap();
        c.paths.output = root.to_path_buf();
        c
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn missing_artifacts_name_their_producer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let err = run_stage(Stage::TrainFusion, &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { stage: "gen-toy", .. }), "{err}");
        run_stage(Stage::GenToy, &cfg).unwrap();
        let err = run_stage(Stage::Classify, &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { stage: "train-fusion", .. }), "{err}");
    }

    #[test]
    fn lock_blocks_a_second_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let lock = OutputLock::acquire(&Layout::new(dir.path())).unwrap();
        assert!(matches!(run_stage(Stage::GenToy, &cfg), Err(Error::Locked(_))));
        drop(lock);
        run_stage(Stage::GenToy, &cfg).unwrap();
        assert!(!Layout::new(dir.path()).lock().exists());
    }

    #[test]
    fn full_stage_chain_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut hashes = Vec::new();
        for dir in [&a, &b] {
            let cfg = small(dir.path());
            let mut run = Vec::new();
            for stage in [
                Stage::GenToy,
                Stage::Caption,
                Stage::TrainCaptioner,
                Stage::TrainFusion,
                Stage::BuildSupport,
                Stage::Classify,
                Stage::Explain,
            ] {
                let m = run_stage(stage, &cfg).unwrap();
                assert!(Layout::new(dir.path()).run_manifest(stage).is_file());
                run.push(m.run_hash);
            }
            hashes.push(run);
        }
        assert_eq!(hashes[0], hashes[1]);
        let preds: PredictionsFile =
            serde_json::from_slice(&fs::read(Layout::new(a.path()).predictions()).unwrap()).unwrap();
        assert!(!preds.predictions.is_empty());
        let reports = fs::read_dir(Layout::new(a.path()).reports()).unwrap().count();
        assert_eq!(reports, 2);
    }

    #[test]
    fn generated_captions_need_a_trained_captioner() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.evaluation.captions = CaptionPolicy::Generated;
        run_stage(Stage::GenToy, &cfg).unwrap();
        let err = run_stage(Stage::TrainFusion, &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { stage: "train-captioner", .. }), "{err}");
        run_stage(Stage::TrainCaptioner, &cfg).unwrap();
        for stage in [Stage::TrainFusion, Stage::BuildSupport, Stage::Classify] {
            run_stage(stage, &cfg).unwrap();
        }
    }

    #[test]
    fn caption_stage_misses_in_replay_mode() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        run_stage(Stage::GenToy, &cfg).unwrap();
        // Strip captions so the stage must consult the (empty) cache.
        let layout = Layout::new(dir.path());
        let ds = load_manifest(&layout.toy_manifest(), 16).unwrap();
        let bare = dir.path().join("bare/manifest.jsonl");
        fs::create_dir_all(bare.parent().unwrap()).unwrap();
        write_manifest(&ds.with_captions(&vec![None; ds.len()]), &bare).unwrap();
        cfg.paths.manifest = Some(bare);
        let err = run_stage(Stage::Caption, &cfg).unwrap_err();
        assert!(matches!(err, Error::ReplayMiss { .. }), "{err}");
        let err = run_stage(Stage::TrainFusion, &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { stage: "caption", .. }), "{err}");
    }
}
