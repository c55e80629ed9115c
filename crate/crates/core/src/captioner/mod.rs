//! Image-grounded captioning.
//!
//! A frozen-by-default vision encoder feeds an autoregressive text decoder
//! through cross-attention, trained with the summed caption negative
//! log-likelihood. An image-text matching (ITM) encoder reuses the decoder's
//! cross-attention and feed-forward weights block for block, with its own
//! bidirectional self-attention and layer norms, and scores a pair through a
//! zero-initialized logistic head on its first token.

mod decode;
mod mllm;
mod prompt;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decode::{generate_caption, DecodeConfig, DecodeStrategy};
pub use mllm::{
    cache_key, CacheEntry, CaptionCache, ClientMode, MllmClient, MllmRequest, Transport, CREDENTIAL_ENV, ENDPOINT_ENV,
};
pub use prompt::{build_label_guided_prompt, PromptSpec, IMAGE_PLACEHOLDER, LABEL_PLACEHOLDER};
pub use train::{
    itm_loss, itm_loss_gradients, itm_loss_graph, lm_loss_gradients, train_captioner, train_itm, CaptionerTrainConfig,
    ItmHistory, ItmTrainConfig,
};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::patchify;
use crate::imaging::ImageTensor;
use crate::nn::{
    causal_mask, uniform, Attention, Bound, FeedForward, LayerNorm, Linear, ParamId, ParamSet, VisionConfig,
    VisionEncoder,
};
use crate::tensor::Matrix;
use crate::text::{Tokenizer, BOS};

pub const CAPTIONER_KIND: &str = "scarwid-captioner";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionerConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    /// Longest token sequence, `<bos>` included.
    pub max_len: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            width: 64,
            encoder_layers: 2,
            encoder_heads: 2,
            decoder_layers: 2,
            decoder_heads: 2,
            max_len: 40,
        }
    }
}

impl CaptionerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidConfig("captioner patch size must divide image size".into()));
        }
        for h in [self.encoder_heads, self.decoder_heads] {
            if h == 0 || !self.width.is_multiple_of(h) {
                return Err(Error::InvalidConfig("captioner heads must divide width".into()));
            }
        }
        if self.decoder_layers == 0 || self.max_len < 2 {
            return Err(Error::InvalidConfig("captioner needs a decoder layer and max_len >= 2".into()));
        }
        Ok(())
    }

    fn vision(&self) -> VisionConfig {
        VisionConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            width: self.width,
            layers: self.encoder_layers,
            heads: self.encoder_heads,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct ItmBlock {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    norm3: LayerNorm,
}

/// Text states after a stack of blocks plus the cross-attention
/// probabilities of every block (per head, `tokens × patches`).
pub struct TextPass {
    pub states: Var,
    pub cross_attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct CaptionerModel {
    pub config: CaptionerConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamSet,
    pub seed: u64,
    image_encoder: VisionEncoder,
    token_embed: ParamId,
    position: ParamId,
    decoder: Vec<DecoderBlock>,
    decoder_norm: LayerNorm,
    lm_head: Linear,
    itm: Vec<ItmBlock>,
    itm_norm: LayerNorm,
    itm_head: Linear,
}

impl CaptionerModel {
    pub fn new(config: CaptionerConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = config.width;
        let image_encoder = VisionEncoder::new(&mut ps, &mut rng, "image_encoder", config.vision());
        let token_embed = ps.add("text.token_embed", uniform(&mut rng, tokenizer.vocab_size(), w, 0.5));
        let position = ps.add("text.position", uniform(&mut rng, config.max_len, w, 0.02));
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let n = format!("decoder.blocks.{i}");
                DecoderBlock {
                    norm1: LayerNorm::new(&mut ps, &format!("{n}.norm1"), w),
                    self_attn: Attention::new(&mut ps, &mut rng, &format!("{n}.self_attn"), w, w, config.decoder_heads),
                    norm2: LayerNorm::new(&mut ps, &format!("{n}.norm2"), w),
                    cross_attn: Attention::new(
                        &mut ps,
                        &mut rng,
                        &format!("{n}.cross_attn"),
                        w,
                        w,
                        config.decoder_heads,
                    ),
                    norm3: LayerNorm::new(&mut ps, &format!("{n}.norm3"), w),
                    ffn: FeedForward::new(&mut ps, &mut rng, &format!("{n}.ffn"), w, 4 * w),
                }
            })
            .collect();
        let decoder_norm = LayerNorm::new(&mut ps, "decoder.norm", w);
        let lm_head = Linear::new(&mut ps, &mut rng, "decoder.lm_head", w, tokenizer.vocab_size(), true);
        let itm = (0..config.decoder_layers)
            .map(|i| {
                let n = format!("itm.blocks.{i}");
                ItmBlock {
                    norm1: LayerNorm::new(&mut ps, &format!("{n}.norm1"), w),
                    self_attn: Attention::new(&mut ps, &mut rng, &format!("{n}.self_attn"), w, w, config.decoder_heads),
                    norm2: LayerNorm::new(&mut ps, &format!("{n}.norm2"), w),
                    norm3: LayerNorm::new(&mut ps, &format!("{n}.norm3"), w),
                }
            })
            .collect();
        let itm_norm = LayerNorm::new(&mut ps, "itm.norm", w);
        let itm_head = Linear::new(&mut ps, &mut rng, "itm.head", w, 1, true);
        *ps.get_mut(itm_head.weight) = Matrix::zeros(w, 1);
        ps.round_to_f32();
        Ok(Self {
            config,
            tokenizer,
            params: ps,
            seed,
            image_encoder,
            token_embed,
            position,
            decoder,
            decoder_norm,
            lm_head,
            itm,
            itm_norm,
            itm_head,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let s = self.config.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::Shape(format!(
                "image {}x{} but captioner expects {s}x{s}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    pub fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        let vocab = self.vocab_size();
        match ids.iter().find(|&&t| t >= vocab) {
            Some(&token) => Err(Error::TokenOutOfVocabulary { token, vocab }),
            None => Ok(()),
        }
    }

    /// Patch tokens of `image` on `g`.
    pub fn encode_image(&self, g: &mut Graph, b: &Bound, image: &ImageTensor) -> Result<Var> {
        self.check_image(image)?;
        let patches = g.constant(patchify(image, self.config.patch_size));
        Ok(self.image_encoder.forward(g, b, patches).tokens)
    }

    /// Patch tokens computed off-graph with the current parameters.
    pub fn image_tokens(&self, image: &ImageTensor) -> Result<Matrix> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let t = self.encode_image(&mut g, &b, image)?;
        Ok(g.value(t).clone())
    }

    fn embed_text(&self, g: &mut Graph, b: &Bound, ids: &[usize]) -> Var {
        let tok = g.embed(b.var(self.token_embed), ids);
        let pos = g.slice_rows(b.var(self.position), 0, ids.len());
        g.add(tok, pos)
    }

    /// Causal decoder pass over `input_ids`.
    pub fn decode_pass(&self, g: &mut Graph, b: &Bound, image_tokens: Var, input_ids: &[usize]) -> TextPass {
        let mut x = self.embed_text(g, b, input_ids);
        let mask = g.constant(causal_mask(input_ids.len()));
        let mut cross = Vec::with_capacity(self.decoder.len());
        for blk in &self.decoder {
            let h = blk.norm1.forward(g, b, x);
            let (a, _) = blk.self_attn.forward(g, b, h, h, Some(mask));
            x = g.add(x, a);
            let h = blk.norm2.forward(g, b, x);
            let (c, probs) = blk.cross_attn.forward(g, b, h, image_tokens, None);
            cross.push(probs);
            x = g.add(x, c);
            let h = blk.norm3.forward(g, b, x);
            let f = blk.ffn.forward(g, b, h);
            x = g.add(x, f);
        }
        TextPass { states: self.decoder_norm.forward(g, b, x), cross_attention: cross }
    }

    /// `len(input_ids) × vocab` next-token logits.
    pub fn decoder_logits(&self, g: &mut Graph, b: &Bound, image_tokens: Var, input_ids: &[usize]) -> Var {
        let pass = self.decode_pass(g, b, image_tokens, input_ids);
        self.lm_head.forward(g, b, pass.states)
    }

    /// Bidirectional ITM pass; returns the `1 × 1` match logit and the pass.
    pub fn itm_pass(&self, g: &mut Graph, b: &Bound, image_tokens: Var, ids: &[usize]) -> (Var, TextPass) {
        let mut x = self.embed_text(g, b, ids);
        let mut cross = Vec::with_capacity(self.itm.len());
        for (blk, shared) in self.itm.iter().zip(&self.decoder) {
            let h = blk.norm1.forward(g, b, x);
            let (a, _) = blk.self_attn.forward(g, b, h, h, None);
            x = g.add(x, a);
            let h = blk.norm2.forward(g, b, x);
            let (c, probs) = shared.cross_attn.forward(g, b, h, image_tokens, None);
            cross.push(probs);
            x = g.add(x, c);
            let h = blk.norm3.forward(g, b, x);
            let f = shared.ffn.forward(g, b, h);
            x = g.add(x, f);
        }
        let states = self.itm_norm.forward(g, b, x);
        let first = g.slice_rows(states, 0, 1);
        let logit = self.itm_head.forward(g, b, first);
        (logit, TextPass { states, cross_attention: cross })
    }

    /// `<bos>` plus the caption's word ids, truncated to `max_len`.
    pub fn itm_ids(&self, text: &str) -> Result<Vec<usize>> {
        let words = self.tokenizer.encode(text);
        if words.is_empty() {
            return Err(Error::Empty("ITM text"));
        }
        let mut ids = vec![BOS];
        ids.extend(words);
        ids.truncate(self.config.max_len);
        Ok(ids)
    }

    /// Input `[<bos>, w_1 … w_{L−1}]` for target tokens `w_1 … w_L`.
    pub fn teacher_inputs(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::Empty("caption tokens"));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Shape(format!("{} tokens exceed max_len {}", tokens.len(), self.config.max_len)));
        }
        self.check_tokens(tokens)?;
        let mut input = vec![BOS];
        input.extend_from_slice(&tokens[..tokens.len() - 1]);
        Ok(input)
    }

    /// Summed caption NLL on `g`.
    pub fn lm_loss_graph(&self, g: &mut Graph, b: &Bound, image_tokens: Var, tokens: &[usize]) -> Result<Var> {
        let input = self.teacher_inputs(tokens)?;
        let logits = self.decoder_logits(g, b, image_tokens, &input);
        Ok(g.cross_entropy(logits, tokens))
    }

    /// `−Σ_l log p(w_l | w_<l, I)` for target tokens `w_1 … w_L`.
    pub fn lm_loss(&self, image: &ImageTensor, tokens: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let img = self.encode_image(&mut g, &b, image)?;
        let l = self.lm_loss_graph(&mut g, &b, img, tokens)?;
        Ok(g.value(l).item())
    }

    /// Caption word ids followed by `<eos>`, the training target.
    pub fn caption_targets(&self, caption: &str) -> Vec<usize> {
        let mut t = self.tokenizer.encode(caption);
        t.truncate(self.config.max_len - 1);
        t.push(crate::text::EOS);
        t
    }

    /// Probability that `text` describes `image`.
    pub fn itm_score(&self, image: &ImageTensor, text: &str) -> Result<f64> {
        let ids = self.itm_ids(text)?;
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let img = self.encode_image(&mut g, &b, image)?;
        let (logit, _) = self.itm_pass(&mut g, &b, img, &ids);
        Ok(crate::autograd::sigmoid(g.value(logit).item()))
    }

    /// Next-token distribution after `prefix` (which should start with `<bos>`).
    pub fn next_token_distribution(&self, image_tokens: &Matrix, prefix: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(prefix)?;
        if prefix.is_empty() || prefix.len() > self.config.max_len {
            return Err(Error::Shape(format!("prefix length {}", prefix.len())));
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let img = g.constant(image_tokens.clone());
        let logits = self.decoder_logits(&mut g, &b, img, prefix);
        let last = g.slice_rows(logits, prefix.len() - 1, 1);
        let p = g.softmax(last);
        Ok(g.value(p).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.config, "tokenizer": self.tokenizer, "seed": self.seed });
        Checkpoint::new(CAPTIONER_KIND, meta, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != CAPTIONER_KIND {
            return Err(Error::Shape(format!("checkpoint kind {:?} is not a captioner", ck.header.kind)));
        }
        let field = |k: &str| ck.header.meta.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let config: CaptionerConfig =
            serde_json::from_value(field("config")).map_err(|e| Error::json("captioner checkpoint config", e))?;
        let tokenizer: Tokenizer =
            serde_json::from_value(field("tokenizer")).map_err(|e| Error::json("captioner checkpoint tokenizer", e))?;
        let mut m = Self::new(config, tokenizer, field("seed").as_u64().unwrap_or(0))?;
        ck.restore_into(&mut m.params)?;
        Ok(m)
    }
}

/// Summed NLL of `targets` under row-wise softmax of `logits`.
pub fn lm_loss_from_logits(logits: &Matrix, targets: &[usize]) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets);
    g.value(loss).item()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny() -> CaptionerModel {
        let cfg = CaptionerConfig {
            image_size: 8,
            patch_size: 4,
            width: 8,
            encoder_layers: 1,
            encoder_heads: 2,
            decoder_layers: 2,
            decoder_heads: 2,
            max_len: 12,
        };
        CaptionerModel::new(cfg, Tokenizer::build(["a red wound with yellowish discharge ."]), 3).unwrap()
    }

    pub(crate) fn image(seed: usize) -> ImageTensor {
        let data = (0..8 * 8 * 3).map(|i| (((i + seed) * 37) % 101) as f32 / 100.0).collect();
        ImageTensor::from_vec(8, 8, data)
    }

    #[test]
    fn analytic_losses_from_logits() {
        assert!(lm_loss_from_logits(&Matrix::from_rows(&[vec![0.0, 0.0]]), &[1]) - std::f64::consts::LN_2 < 1e-15);
        let (v, l) = (7usize, 5usize);
        let uniform = Matrix::zeros(l, v);
        let loss = lm_loss_from_logits(&uniform, &[0, 1, 2, 3, 4]);
        assert!((loss - l as f64 * (v as f64).ln()).abs() < 1e-12);
        let mut sure = Matrix::filled(2, 3, f64::NEG_INFINITY);
        sure.set(0, 1, 0.0);
        sure.set(1, 2, 0.0);
        assert_eq!(lm_loss_from_logits(&sure, &[1, 2]), 0.0);
    }

    #[test]
    fn itm_head_starts_at_one_half() {
        let m = tiny();
        assert_eq!(m.itm_score(&image(0), "a red wound").unwrap(), 0.5);
        assert!(matches!(m.itm_score(&image(0), "  "), Err(Error::Empty(_))));
    }

    #[test]
    fn out_of_vocabulary_token_is_rejected() {
        let m = tiny();
        let v = m.vocab_size();
        assert!(matches!(m.lm_loss(&image(0), &[4, v]), Err(Error::TokenOutOfVocabulary { token, .. }) if token == v));
        assert!(m.lm_loss(&image(0), &m.caption_targets("a red wound .")).unwrap() > 0.0);
    }

    #[test]
    fn next_token_distributions_sum_to_one() {
        let m = tiny();
        let img = m.image_tokens(&image(1)).unwrap();
        let mut prefix = vec![BOS];
        for step in 0..6 {
            let p = m.next_token_distribution(&img, &prefix).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prefix.push(4 + step % 3);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny();
        let back = CaptionerModel::from_checkpoint(
            &Checkpoint::from_bytes(&m.to_checkpoint().to_bytes(), "c".as_ref()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.params, m.params);
    }
}
