//! Triplet metric learning for the fusion model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{Dataset, Label};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::optim::{AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    Random,
    SemiHard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub margin: f64,
    pub mining: Mining,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            margin: 1.0,
            mining: Mining::Random,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.margin <= 0.0 || !self.margin.is_finite() {
            return Err(Error::InvalidConfig("margin must be positive".into()));
        }
        if self.batch_size < 3 {
            return Err(Error::InvalidConfig("batch_size must be at least 3".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be non-negative".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::with_lr(self.learning_rate) }
    }
}

/// Indices of anchor, positive and negative within a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(0, ‖a−p‖² − ‖a−n‖² + α)`.
pub fn triplet_loss(ea: &[f64], ep: &[f64], en: &[f64], alpha: f64) -> Result<f64> {
    if ea.len() != ep.len() || ea.len() != en.len() {
        return Err(Error::Shape(format!("triplet dims {}, {}, {}", ea.len(), ep.len(), en.len())));
    }
    Ok((sq_dist(ea, ep) - sq_dist(ea, en) + alpha).max(0.0))
}

/// Differentiable triplet loss on graph nodes; zero subgradient on the hinge.
pub fn triplet_loss_graph(g: &mut Graph, a: Var, p: Var, n: Var, alpha: f64) -> Var {
    let dp = g.sq_dist(a, p);
    let dn = g.sq_dist(a, n);
    let diff = g.sub(dp, dn);
    let shifted = g.add_scalar(diff, alpha);
    g.relu(shifted)
}

/// One triplet per eligible anchor (a sample with at least one other sample
/// of its label), in anchor order. Positives are drawn uniformly. Negatives
/// are drawn uniformly under [`Mining::Random`]; under [`Mining::SemiHard`]
/// the closest negative with `d_ap < d_an < d_ap + margin` is taken (ties to
/// the lower index), falling back to a uniform draw when the band is empty.
pub fn mine_triplets(
    labels: &[Label],
    embeddings: &[Vec<f64>],
    strategy: Mining,
    margin: f64,
    seed: u64,
) -> Result<Vec<Triplet>> {
    assert_eq!(labels.len(), embeddings.len(), "one embedding per label");
    let has = |l: Label| labels.contains(&l);
    if !(has(Label::Infected) && has(Label::Uninfected)) {
        return Err(Error::SingleLabel);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for a in 0..labels.len() {
        let positives: Vec<usize> = (0..labels.len()).filter(|&i| i != a && labels[i] == labels[a]).collect();
        if positives.is_empty() {
            continue;
        }
        let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != labels[a]).collect();
        let positive = positives[rng.gen_range(0..positives.len())];
        let random_negative = negatives[rng.gen_range(0..negatives.len())];
        let negative = match strategy {
            Mining::Random => random_negative,
            Mining::SemiHard => {
                let d_ap = sq_dist(&embeddings[a], &embeddings[positive]);
                let mut best: Option<(f64, usize)> = None;
                for &n in &negatives {
                    let d_an = sq_dist(&embeddings[a], &embeddings[n]);
                    if d_ap < d_an && d_an < d_ap + margin && best.is_none_or(|(d, _)| d_an < d) {
                        best = Some((d_an, n));
                    }
                }
                best.map_or(random_negative, |(_, n)| n)
            }
        };
        out.push(Triplet { anchor: a, positive, negative });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub active_triplet_fraction: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLog>,
    /// Epoch (1-based) whose parameters were kept, when a validator ran.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Scores the current model after every epoch; the best-scoring parameters
/// (first on ties) are restored at the end.
pub type Validator<'a> = dyn FnMut(&FusionModel) -> Result<f64> + 'a;

/// Trains `model` in place. Each batch is forwarded once on a single graph,
/// triplets are mined from the resulting embeddings and their mean loss is
/// back-propagated. Batches without a usable triplet are skipped.
pub fn train_fusion(
    model: &mut FusionModel,
    train: &Dataset,
    cfg: &TrainConfig,
    mut validator: Option<&mut Validator<'_>>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let (neg, pos) = train.label_counts();
    if neg == 0 || pos == 0 {
        return Err(Error::SingleLabel);
    }
    let images = train.samples().iter().map(|s| s.image.load()).collect::<Result<Vec<_>>>()?;
    let texts: Vec<&str> = train.samples().iter().map(|s| s.caption.as_deref().unwrap_or("")).collect();
    let labels: Vec<Label> = train.samples().iter().map(|s| s.label).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer(), &model.params);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, crate::nn::ParamSet)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        let mut active = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let batch_labels: Vec<Label> = batch.iter().map(|&i| labels[i]).collect();
            let mine_seed = rng.gen::<u64>();
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, |n| model.is_trainable(n));
            let mut vars = Vec::with_capacity(batch.len());
            for &i in batch {
                vars.push(model.forward(&mut g, &bound, images[i], texts[i])?.embedding);
            }
            let values: Vec<Vec<f64>> = vars.iter().map(|&v| g.value(v).data().to_vec()).collect();
            let triplets = match mine_triplets(&batch_labels, &values, cfg.mining, cfg.margin, mine_seed) {
                Ok(t) if !t.is_empty() => t,
                Ok(_) | Err(Error::SingleLabel) => continue,
                Err(e) => return Err(e),
            };
            let mut terms = Vec::with_capacity(triplets.len());
            for t in &triplets {
                let l = triplet_loss_graph(&mut g, vars[t.anchor], vars[t.positive], vars[t.negative], cfg.margin);
                let v = g.value(l).item();
                loss_sum += v;
                active += usize::from(v > 0.0);
                terms.push(l);
            }
            count += triplets.len();
            let stacked = g.concat_rows(&terms);
            let mean = g.mean_rows(stacked);
            let grads = g.backward(mean);
            if !g.value(mean).is_finite() {
                return Err(Error::NonFinite("triplet loss"));
            }
            opt.step(&mut model.params, &bound.gradients(&grads));
            model.params.round_to_f32();
        }
        let val_score = match validator.as_deref_mut() {
            Some(v) => Some(v(model)?),
            None => None,
        };
        let log = EpochLog {
            epoch,
            mean_loss: if count == 0 { 0.0 } else { loss_sum / count as f64 },
            active_triplet_fraction: if count == 0 { 0.0 } else { active as f64 / count as f64 },
            seed: cfg.seed,
            val_score,
        };
        log::info!("fusion epoch {epoch}: loss {:.4} active {:.3}", log.mean_loss, log.active_triplet_fraction);
        on_epoch(&log);
        if let Some(score) = val_score {
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, model.params.clone()));
                history.best_epoch = Some(epoch);
            }
        }
        history.epochs.push(log);
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::{generate_toy_corpus, ToyAttrConfig};
    use crate::fusion::FusionConfig;
    use crate::text::Tokenizer;

    #[test]
    fn analytic_losses() {
        assert_eq!(triplet_loss(&[0.0, 0.0], &[0.0, 0.0], &[2.0, 0.0], 1.0).unwrap(), 0.0);
        assert_eq!(triplet_loss(&[0.0], &[1.0], &[-1.0], 1.0).unwrap(), 1.0);
        let e = [0.3, -0.7, 2.0];
        assert_eq!(triplet_loss(&e, &e, &e, 1.0).unwrap(), 1.0);
        assert!(triplet_loss(&[0.0], &[1.0, 2.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn mined_triplets_respect_labels() {
        let labels = [Label::Infected, Label::Infected, Label::Uninfected, Label::Uninfected];
        let emb: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        for strategy in [Mining::Random, Mining::SemiHard] {
            let ts = mine_triplets(&labels, &emb, strategy, 1.0, 3).unwrap();
            assert_eq!(ts.len(), 4);
            for t in ts {
                assert_eq!(labels[t.anchor], labels[t.positive]);
                assert_ne!(labels[t.anchor], labels[t.negative]);
                assert_ne!(t.anchor, t.positive);
            }
        }
        assert!(matches!(
            mine_triplets(&[Label::Infected; 3], &emb[..3], Mining::Random, 1.0, 0),
            Err(Error::SingleLabel)
        ));
    }

    #[test]
    fn semi_hard_picks_band_negative() {
        // Anchor 0 at origin, positive 1 at distance² 1, negatives at
        // distance² 0.25 (too hard), 1.5625 (in band) and 9 (too easy).
        let labels = [Label::Infected, Label::Infected, Label::Uninfected, Label::Uninfected, Label::Uninfected];
        let emb = vec![vec![0.0], vec![1.0], vec![0.5], vec![1.25], vec![3.0]];
        let ts = mine_triplets(&labels, &emb, Mining::SemiHard, 1.0, 0).unwrap();
        assert_eq!(ts[0], Triplet { anchor: 0, positive: 1, negative: 3 });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mining_never_violates_labels(
            bits in prop::collection::vec(any::<bool>(), 2..24),
            coords in prop::collection::vec(-3.0..3.0f64, 24),
            seed in any::<u64>(),
            semi in any::<bool>(),
        ) {
            let labels: Vec<Label> = bits.iter().map(|&b| if b { Label::Infected } else { Label::Uninfected }).collect();
            let emb: Vec<Vec<f64>> = (0..labels.len()).map(|i| vec![coords[i]]).collect();
            let strategy = if semi { Mining::SemiHard } else { Mining::Random };
            match mine_triplets(&labels, &emb, strategy, 1.0, seed) {
                Ok(ts) => {
                    for t in &ts {
                        prop_assert_eq!(labels[t.anchor], labels[t.positive]);
                        prop_assert_ne!(labels[t.anchor], labels[t.negative]);
                        prop_assert!(t.anchor != t.positive && t.anchor != t.negative && t.positive != t.negative);
                    }
                    prop_assert_eq!(&ts, &mine_triplets(&labels, &emb, strategy, 1.0, seed).unwrap());
                }
                Err(e) => {
                    prop_assert!(matches!(e, Error::SingleLabel));
                    prop_assert!(labels.iter().all(|&l| l == labels[0]));
                }
            }
        }

        #[test]
        fn loss_is_nonnegative_and_zero_past_margin(
            a in prop::collection::vec(-2.0..2.0f64, 3),
            p in prop::collection::vec(-2.0..2.0f64, 3),
            n in prop::collection::vec(-2.0..2.0f64, 3),
            alpha in 0.01..3.0f64,
        ) {
            let l = triplet_loss(&a, &p, &n, alpha).unwrap();
            prop_assert!(l >= 0.0);
            if sq_dist(&a, &n) >= sq_dist(&a, &p) + alpha {
                prop_assert_eq!(l, 0.0);
            }
        }
    }

    fn small_setup(lr: f64) -> (FusionModel, Dataset, TrainConfig) {
        let toy = generate_toy_corpus(24, &ToyAttrConfig { image_size: 16, ..Default::default() }, 3).unwrap();
        let tok = Tokenizer::build(toy.dataset.samples().iter().filter_map(|s| s.caption.as_deref()));
        let cfg = FusionConfig {
            image_size: 16,
            patch_size: 8,
            width: 16,
            encoder_layers: 1,
            projection_dim: 8,
            ..FusionConfig::default()
        };
        let model = FusionModel::new(cfg, tok, 1).unwrap();
        let tc = TrainConfig { epochs: 2, learning_rate: lr, batch_size: 8, seed: 5, ..TrainConfig::default() };
        (model, toy.dataset, tc)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut model, ds, tc) = small_setup(0.0);
        let before = model.params.clone();
        let h = train_fusion(&mut model, &ds, &tc, None, |_| {}).unwrap();
        assert_eq!(h.epochs.len(), 2);
        assert_eq!(model.params, before);
    }

    #[test]
    fn training_is_reproducible_and_validator_selects() {
        let (mut a, ds, tc) = small_setup(1e-3);
        let (mut b, _, _) = small_setup(1e-3);
        let mut scores = vec![0.5, 0.9].into_iter();
        let mut v = |_: &FusionModel| Ok(scores.next().unwrap());
        let ha = train_fusion(&mut a, &ds, &tc, Some(&mut v), |_| {}).unwrap();
        let hb = train_fusion(&mut b, &ds, &tc, None, |_| {}).unwrap();
        assert_eq!(ha.losses(), hb.losses());
        assert_eq!(a.params, b.params);
        assert_eq!(ha.best_epoch, Some(2));
    }

    #[test]
    fn single_label_training_set_rejected() {
        let (mut model, ds, tc) = small_setup(1e-3);
        let one = ds.filter(|s| s.label == Label::Infected);
        assert!(matches!(train_fusion(&mut model, &one, &tc, None, |_| {}), Err(Error::SingleLabel)));
    }
}
