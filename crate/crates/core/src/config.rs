//! The single JSON configuration file read by every pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::{CaptionerConfig, CaptionerTrainConfig, DecodeConfig, PromptSpec};
use crate::corpus::{AugmentConfig, SplitRatios, SplitSpec, ToyAttrConfig, DEFAULT_IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::evaluation::{CaptionPolicy, CaptionerSettings, EvalConfig};
use crate::explain::GradCamConfig;
use crate::fusion::FusionConfig;
use crate::retrieval::RetrievalConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// JSON Lines manifest of the labelled corpus. Stages fall back to the
    /// `gen-toy` output when unset.
    pub manifest: Option<PathBuf>,
    /// Directories of synthetic images, keyed by the label they carry.
    pub synthetic_infected: Option<PathBuf>,
    pub synthetic_uninfected: Option<PathBuf>,
    /// Caption cache for the external multimodal model.
    pub caption_cache: Option<PathBuf>,
    /// Output root; `--out` overrides it.
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic_infected: None,
            synthetic_uninfected: None,
            caption_cache: None,
            output: PathBuf::from("scarwid-out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub image_size: usize,
    /// Samples produced by `gen-toy`; rendered at `image_size`.
    pub toy_size: usize,
    pub toy: ToyAttrConfig,
    /// Applied to training images only.
    pub augment: AugmentConfig,
    pub split: SplitRatios,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            image_size: DEFAULT_IMAGE_SIZE,
            toy_size: 600,
            toy: ToyAttrConfig::default(),
            augment: AugmentConfig::default(),
            split: SplitRatios::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionerSection {
    pub model: CaptionerConfig,
    pub train: CaptionerTrainConfig,
    /// Epoch count and optimizer for the match head; shares the train
    /// section's defaults.
    pub itm: CaptionerTrainConfig,
    pub decode: DecodeConfig,
    pub prompt: PromptSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub k: usize,
    pub support_size: usize,
    /// Fail instead of capping when fewer subjects than `support_size` exist.
    pub strict_support: bool,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self { k: RetrievalConfig::default().k, support_size: 1024, strict_support: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub folds: usize,
    pub select_on_validation: bool,
    pub captions: CaptionPolicy,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { folds: 5, select_on_validation: true, captions: CaptionPolicy::Provided }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    pub gradcam: GradCamConfig,
    /// Test queries to write reports for.
    pub max_queries: usize,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self { gradcam: GradCamConfig::default(), max_queries: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub captioner: CaptionerSection,
    pub fusion: FusionConfig,
    pub trainer: TrainConfig,
    pub retrieval: RetrievalSection,
    pub evaluation: EvaluationSection,
    pub explain: ExplainSection,
    /// Root seed; every stage derives its randomness from it.
    pub seed: u64,
}

impl PipelineConfig {
    /// Parses JSON text; an empty or blank document means all defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        serde_json::from_str(text).map_err(|e| Error::Validation(vec![e.to_string()]))
    }

    /// Every range problem at once.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        check(self.retrieval.k >= 1, "retrieval.k must be >= 1");
        check(self.retrieval.support_size >= 1, "retrieval.support_size must be >= 1");
        check(self.retrieval.k <= self.retrieval.support_size, "retrieval.k must not exceed retrieval.support_size");
        check(self.trainer.margin > 0.0 && self.trainer.margin.is_finite(), "trainer.margin must be > 0");
        check(self.trainer.epochs >= 1, "trainer.epochs must be >= 1");
        check(self.trainer.batch_size >= 3, "trainer.batch_size must be >= 3");
        check(
            self.trainer.learning_rate >= 0.0 && self.trainer.learning_rate.is_finite(),
            "trainer.learning_rate must be >= 0",
        );
        let r = self.corpus.split;
        check(r.train > 0.0 && r.val > 0.0 && r.test > 0.0, "corpus.split ratios must be positive");
        check(((r.train + r.val + r.test) - 1.0).abs() <= 1e-9, "corpus.split ratios must sum to 1");
        check(self.evaluation.folds >= 2, "evaluation.folds must be >= 2");
        check(self.corpus.toy_size >= 1, "corpus.toy_size must be >= 1");
        check(self.fusion.image_size == self.corpus.image_size, "fusion.image_size must equal corpus.image_size");
        check(
            self.captioner.model.image_size == self.corpus.image_size,
            "captioner.model.image_size must equal corpus.image_size",
        );
        check(self.explain.max_queries >= 1, "explain.max_queries must be >= 1");
        let nested: [(&str, Result<()>); 7] = [
            ("fusion", self.fusion.validate()),
            ("captioner.model", self.captioner.model.validate()),
            ("captioner.train", self.captioner.train.validate()),
            ("captioner.itm", self.captioner.itm.validate()),
            ("captioner.decode", self.captioner.decode.validate()),
            ("captioner.prompt", self.captioner.prompt.validate()),
            (
                "corpus.toy",
                ToyAttrConfig { image_size: self.corpus.image_size.max(8), ..self.corpus.toy.clone() }.validate(),
            ),
        ];
        for (name, r) in nested {
            if let Err(e) = r {
                errs.push(format!("{name}: {e}"));
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems() {
            p if p.is_empty() => Ok(()),
            p => Err(Error::Validation(p)),
        }
    }

    /// SHA-256 of the normalized configuration. The output root is left
    /// out so that identical runs into different directories agree.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.output = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { ratios: self.corpus.split, folds: self.evaluation.folds, seed: self.seed }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            fusion: self.fusion.clone(),
            train: TrainConfig { seed: self.seed, ..self.trainer.clone() },
            retrieval: RetrievalConfig { k: self.retrieval.k },
            support_size: self.retrieval.support_size,
            strict_support: self.retrieval.strict_support,
            select_on_validation: self.evaluation.select_on_validation,
            captions: self.evaluation.captions,
            captioner: CaptionerSettings {
                model: self.captioner.model.clone(),
                train: self.captioner.train.clone(),
                decode: self.captioner.decode.clone(),
            },
        }
    }
}

/// Reads, fills defaults and range-checks a configuration file, reporting
/// every problem found.
pub fn validate_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = PipelineConfig::from_json(&text).map_err(|e| match e {
        Error::Validation(v) => Error::Validation(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
        other => other,
    })?;
    cfg.validate()?;
    Ok(cfg)
}
