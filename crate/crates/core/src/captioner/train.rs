use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CaptionerModel;
use crate::autograd::{Graph, Var};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nn::Bound;
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionerTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub freeze_image_encoder: bool,
    pub seed: u64,
}

impl Default for CaptionerTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, learning_rate: 1e-5, weight_decay: 0.01, batch_size: 8, freeze_image_encoder: true, seed: 0 }
    }
}

impl CaptionerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("captioner batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("captioner learning rate and weight decay must be >= 0".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::with_lr(self.learning_rate) }
    }

    fn trainable(&self, name: &str) -> bool {
        !(self.freeze_image_encoder && name.starts_with("image_encoder."))
    }
}

pub type ItmTrainConfig = CaptionerTrainConfig;

/// Per-epoch mean loss over the examples seen in that epoch.
pub type ItmHistory = Vec<f64>;

/// Image tokens for every sample: graph constants when the encoder is
/// frozen, otherwise recomputed per batch.
struct ImageCache<'a> {
    images: Vec<&'a ImageTensor>,
    frozen: Option<Vec<Matrix>>,
}

impl<'a> ImageCache<'a> {
    fn new(model: &CaptionerModel, corpus: &'a Dataset, frozen: bool) -> Result<Self> {
        let images = corpus.samples().iter().map(|s| s.image.load()).collect::<Result<Vec<_>>>()?;
        let frozen =
            if frozen { Some(images.iter().map(|i| model.image_tokens(i)).collect::<Result<_>>()?) } else { None };
        Ok(Self { images, frozen })
    }

    fn tokens(&self, model: &CaptionerModel, g: &mut Graph, b: &Bound, i: usize) -> Result<Var> {
        match &self.frozen {
            Some(t) => Ok(g.constant(t[i].clone())),
            None => model.encode_image(g, b, self.images[i]),
        }
    }
}

fn captions(corpus: &Dataset) -> Result<Vec<&str>> {
    corpus
        .samples()
        .iter()
        .map(|s| s.caption.as_deref().filter(|c| !c.trim().is_empty()).ok_or(Error::Empty("caption")))
        .collect()
}

/// Fits the decoder on `(image, caption)` pairs by the summed caption NLL,
/// averaged over each batch. Returns the per-epoch mean caption loss.
pub fn train_captioner(
    model: &mut CaptionerModel,
    corpus: &Dataset,
    cfg: &CaptionerTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("captioner corpus"));
    }
    let targets: Vec<Vec<usize>> = captions(corpus)?.iter().map(|c| model.caption_targets(c)).collect();
    let cache = ImageCache::new(model, corpus, cfg.freeze_image_encoder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer(), &model.params);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let b = model.params.bind(&mut g, |n| cfg.trainable(n));
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let img = cache.tokens(model, &mut g, &b, i)?;
                terms.push(model.lm_loss_graph(&mut g, &b, img, &targets[i])?);
            }
            let stacked = g.concat_rows(&terms);
            let mean = g.mean_rows(stacked);
            let value = g.value(mean).item();
            if !value.is_finite() {
                return Err(Error::NonFinite("caption loss"));
            }
            total += value * batch.len() as f64;
            let grads = g.backward(mean);
            opt.step(&mut model.params, &b.gradients(&grads));
            model.params.round_to_f32();
        }
        let mean = total / corpus.len() as f64;
        log::info!("captioner epoch {epoch}: lm loss {mean:.4}");
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}

/// BCE of the match logit for `ids` against `target` (1 = match).
pub fn itm_loss_graph(
    model: &CaptionerModel,
    g: &mut Graph,
    b: &Bound,
    image_tokens: Var,
    ids: &[usize],
    target: f64,
) -> Var {
    let (logit, _) = model.itm_pass(g, b, image_tokens, ids);
    g.bce_with_logits(logit, target)
}

/// Loss value and per-parameter gradients of the summed caption NLL.
pub fn lm_loss_gradients(
    model: &CaptionerModel,
    image: &ImageTensor,
    tokens: &[usize],
    trainable: impl Fn(&str) -> bool,
) -> Result<(f64, Vec<Option<Matrix>>)> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, trainable);
    let img = model.encode_image(&mut g, &b, image)?;
    let loss = model.lm_loss_graph(&mut g, &b, img, tokens)?;
    let grads = g.backward(loss);
    Ok((g.value(loss).item(), b.gradients(&grads)))
}

/// Loss value and per-parameter gradients of the ITM BCE for one pair.
pub fn itm_loss_gradients(
    model: &CaptionerModel,
    image: &ImageTensor,
    text: &str,
    target: f64,
    trainable: impl Fn(&str) -> bool,
) -> Result<(f64, Vec<Option<Matrix>>)> {
    let ids = model.itm_ids(text)?;
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, trainable);
    let img = model.encode_image(&mut g, &b, image)?;
    let loss = itm_loss_graph(model, &mut g, &b, img, &ids, target);
    let grads = g.backward(loss);
    Ok((g.value(loss).item(), b.gradients(&grads)))
}

/// Plain ITM BCE value.
pub fn itm_loss(model: &CaptionerModel, image: &ImageTensor, text: &str, target: f64) -> Result<f64> {
    Ok(itm_loss_gradients(model, image, text, target, |_| false)?.0)
}

/// Trains the match head on matched pairs against in-batch shuffled
/// captions, one negative per positive. A shuffled caption whose text equals
/// the anchor's own caption is not used as a negative.
pub fn train_itm(
    model: &mut CaptionerModel,
    corpus: &Dataset,
    cfg: &ItmTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<ItmHistory> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(Error::Empty("ITM corpus needs at least two pairs"));
    }
    let texts = captions(corpus)?;
    let ids: Vec<Vec<usize>> = texts.iter().map(|t| model.itm_ids(t)).collect::<Result<_>>()?;
    let cache = ImageCache::new(model, corpus, cfg.freeze_image_encoder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer(), &model.params);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size.max(2)) {
            let mut g = Graph::new();
            let b = model.params.bind(&mut g, |n| cfg.trainable(n));
            let shift = if batch.len() > 1 { rng.gen_range(1..batch.len()) } else { 0 };
            let mut terms = Vec::with_capacity(2 * batch.len());
            for (j, &i) in batch.iter().enumerate() {
                let img = cache.tokens(model, &mut g, &b, i)?;
                terms.push(itm_loss_graph(model, &mut g, &b, img, &ids[i], 1.0));
                let other = batch[(j + shift) % batch.len()];
                if other != i && texts[other] != texts[i] {
                    terms.push(itm_loss_graph(model, &mut g, &b, img, &ids[other], 0.0));
                }
            }
            let n = terms.len();
            let stacked = g.concat_rows(&terms);
            let mean = g.mean_rows(stacked);
            let value = g.value(mean).item();
            if !value.is_finite() {
                return Err(Error::NonFinite("ITM loss"));
            }
            total += value * n as f64;
            seen += n;
            let grads = g.backward(mean);
            opt.step(&mut model.params, &b.gradients(&grads));
            model.params.round_to_f32();
        }
        let mean = total / seen as f64;
        log::info!("itm epoch {epoch}: bce {mean:.4}");
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{image, tiny};
    use super::*;
    use crate::corpus::{Label, Sample, Source};

    fn corpus(captions: &[&str]) -> Dataset {
        let samples = captions
            .iter()
            .enumerate()
            .map(|(i, c)| Sample {
                id: format!("c{i}"),
                subject_id: format!("s{i}"),
                image: crate::corpus::ImageHandle::memory(image(i * 5)),
                caption: Some(c.to_string()),
                label: if i % 2 == 0 { Label::Infected } else { Label::Uninfected },
                source: Source::Toy,
            })
            .collect();
        Dataset::new(samples).unwrap()
    }

    #[test]
    fn loss_decreases_and_encoder_stays_frozen() {
        let mut m = tiny();
        let before = m.params.clone();
        let ds = corpus(&["a red wound .", "a wound with yellowish discharge .", "a red wound with discharge ."]);
        let cfg = CaptionerTrainConfig { epochs: 15, learning_rate: 3e-3, batch_size: 2, ..Default::default() };
        let h = train_captioner(&mut m, &ds, &cfg, |_, _| {}).unwrap();
        assert!(h[h.len() - 1] < 0.5 * h[0], "{h:?}");
        for (id, (name, p)) in m.params.ids().zip(m.params.iter()) {
            if name.starts_with("image_encoder.") || name.starts_with("itm.") {
                assert_eq!(p, before.get(id), "{name}");
            }
        }
        assert_ne!(m.params, before);
    }

    #[test]
    fn fifty_toy_pairs_halve_the_loss_in_twenty_epochs() {
        use super::super::CaptionerConfig;
        use crate::corpus::{generate_toy_corpus, ToyAttrConfig};
        use crate::text::Tokenizer;
        let ds = generate_toy_corpus(50, &ToyAttrConfig { image_size: 16, ..Default::default() }, 70).unwrap().dataset;
        let cfg = CaptionerConfig {
            image_size: 16,
            patch_size: 8,
            width: 16,
            encoder_layers: 1,
            decoder_layers: 2,
            max_len: 24,
            ..Default::default()
        };
        let tokenizer = Tokenizer::build(ds.samples().iter().filter_map(|s| s.caption.as_deref()));
        let mut m = CaptionerModel::new(cfg, tokenizer, 5).unwrap();
        let tcfg = CaptionerTrainConfig { epochs: 20, learning_rate: 1e-3, ..Default::default() };
        let h = train_captioner(&mut m, &ds, &tcfg, |_, _| {}).unwrap();
        assert_eq!(h.len(), 20);
        assert!(h[19] < 0.5 * h[0], "{h:?}");
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut m = tiny();
        let before = m.params.clone();
        let ds = corpus(&["a red wound .", "a wound ."]);
        let cfg =
            CaptionerTrainConfig { epochs: 3, learning_rate: 0.0, freeze_image_encoder: false, ..Default::default() };
        let h = train_captioner(&mut m, &ds, &cfg, |_, _| {}).unwrap();
        assert_eq!(m.params, before);
        assert!(h.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn empty_or_uncaptioned_corpus_is_rejected() {
        let mut m = tiny();
        let empty = Dataset::new(vec![]).unwrap();
        assert!(matches!(train_captioner(&mut m, &empty, &Default::default(), |_, _| {}), Err(Error::Empty(_))));
        let ds = corpus(&["a wound ."]).with_captions(&[None]);
        assert!(train_captioner(&mut m, &ds, &Default::default(), |_, _| {}).is_err());
    }

    #[test]
    fn training_is_reproducible() {
        let ds = corpus(&["a red wound .", "a wound with discharge .", "a wound ."]);
        let cfg = CaptionerTrainConfig { epochs: 2, learning_rate: 1e-3, batch_size: 2, ..Default::default() };
        let run = || {
            let mut m = tiny();
            let h = train_captioner(&mut m, &ds, &cfg, |_, _| {}).unwrap();
            let i = train_itm(&mut m, &ds, &cfg, |_, _| {}).unwrap();
            (h, i, m.params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn itm_separates_matched_from_shuffled_pairs() {
        let mut m = tiny();
        let caps = ["a red wound .", "a wound with yellowish discharge ."];
        let colors = [[0.8, 0.1, 0.1], [0.8, 0.8, 0.2]];
        let samples = (0..4)
            .map(|i| Sample {
                id: format!("p{i}"),
                subject_id: format!("p{i}"),
                image: crate::corpus::ImageHandle::memory(ImageTensor::filled(8, 8, colors[i % 2])),
                caption: Some(caps[i % 2].into()),
                label: Label::Infected,
                source: Source::Toy,
            })
            .collect();
        let ds = Dataset::new(samples).unwrap();
        let cfg = ItmTrainConfig { epochs: 150, learning_rate: 3e-3, batch_size: 4, ..Default::default() };
        let h = train_itm(&mut m, &ds, &cfg, |_, _| {}).unwrap();
        assert!(h[h.len() - 1] < h[0]);
        let (mut pos, mut neg) = (0.0, 0.0);
        for (i, s) in ds.samples().iter().enumerate() {
            let img = s.image.load().unwrap();
            pos += m.itm_score(img, caps[i % 2]).unwrap();
            neg += m.itm_score(img, caps[(i + 1) % 2]).unwrap();
        }
        assert!(pos / 4.0 > neg / 4.0 + 0.2, "{pos} {neg}");
    }
}
