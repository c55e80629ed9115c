//! Image-text fusion.
//!
//! Patch tokens `E_I` (M × d) from the vision encoder act as queries over the
//! caption tokens `E_T` (L × d):
//!
//! ```text
//! Q = E_I W^Q,  K = E_T W^K,  V = E_T W^V
//! A = softmax(Q Kᵀ / √d_head) V        (per head, heads concatenated)
//! e = W_p · pool(E_I + A) + b_p        (residual optional, pool = mean | first)
//! ```
//!
//! Ablation modes keep the same path: image-only feeds the empty caption
//! (a single `<bos>` token), text-only replaces the patch tokens with a single
//! all-zero query row.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nn::{
    glorot, multi_head_attention, Bound, Linear, ParamId, ParamSet, TextConfig, TextEncoder, VisionConfig,
    VisionEncoder,
};
use crate::tensor::Matrix;
use crate::text::{Tokenizer, BOS};

pub const FUSION_KIND: &str = "scarwid-fusion";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    FirstToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    ImageText,
    ImageOnly,
    TextOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::ImageText, FusionMode::ImageOnly, FusionMode::TextOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::ImageText => "image_text",
            FusionMode::ImageOnly => "image_only",
            FusionMode::TextOnly => "text_only",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Token width of both reference encoders and of the cross-attention.
    pub width: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub max_text_len: usize,
    pub attention_heads: usize,
    pub projection_dim: usize,
    pub pooling: Pooling,
    /// Adds the patch tokens back onto the attention output before pooling.
    pub residual: bool,
    /// L2-normalizes the projected embedding.
    pub normalize: bool,
    pub mode: FusionMode,
    pub freeze_image_encoder: bool,
    pub freeze_text_encoder: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            width: 64,
            encoder_layers: 2,
            encoder_heads: 2,
            max_text_len: 64,
            attention_heads: 2,
            projection_dim: 256,
            pooling: Pooling::Mean,
            residual: true,
            normalize: false,
            mode: FusionMode::ImageText,
            freeze_image_encoder: false,
            freeze_text_encoder: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("patch size {} must divide image size {}", self.patch_size, self.image_size));
        }
        for (name, heads) in [("attention_heads", self.attention_heads), ("encoder_heads", self.encoder_heads)] {
            if heads == 0 || !self.width.is_multiple_of(heads) {
                return bad(format!("{name} = {heads} must divide width {}", self.width));
            }
        }
        if self.projection_dim == 0 || self.max_text_len < 2 {
            return bad("projection_dim must be positive and max_text_len at least 2".into());
        }
        Ok(())
    }

    pub fn vision(&self) -> VisionConfig {
        VisionConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            width: self.width,
            layers: self.encoder_layers,
            heads: self.encoder_heads,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.vision().num_patches()
    }
}

/// Flattens an image into `(S/P)² × (P·P·3)` patch rows, patches in
/// row-major order, pixels row-major inside a patch, channels innermost.
pub fn patchify(img: &ImageTensor, patch: usize) -> Matrix {
    let grid_y = img.height() / patch;
    let grid_x = img.width() / patch;
    let mut m = Matrix::zeros(grid_y * grid_x, patch * patch * 3);
    for gy in 0..grid_y {
        for gx in 0..grid_x {
            let row = m.row_mut(gy * grid_x + gx);
            let mut c = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for v in img.pixel(gy * patch + y, gx * patch + x) {
                        row[c] = v as f64;
                        c += 1;
                    }
                }
            }
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct CrossAttentionOutput {
    /// `M × d` attended rows.
    pub output: Matrix,
    /// Per-head `M × L` attention probabilities.
    pub weights: Vec<Matrix>,
}

/// Multi-head cross-attention with image queries and text keys/values.
pub fn cross_attention(
    e_i: &Matrix,
    e_t: &Matrix,
    w_q: &Matrix,
    w_k: &Matrix,
    w_v: &Matrix,
    heads: usize,
) -> Result<CrossAttentionOutput> {
    if e_i.rows() == 0 || e_t.rows() == 0 {
        return Err(Error::Empty("attention input"));
    }
    if w_q.rows() != e_i.cols() || w_k.rows() != e_t.cols() || w_v.rows() != e_t.cols() {
        return Err(Error::Shape(format!(
            "E_I {:?}, E_T {:?} against W^Q {:?}, W^K {:?}, W^V {:?}",
            e_i.shape(),
            e_t.shape(),
            w_q.shape(),
            w_k.shape(),
            w_v.shape()
        )));
    }
    let d = w_q.cols();
    if w_k.cols() != d || w_v.cols() != d || heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!("projection width {d} with {heads} heads")));
    }
    for m in [e_i, e_t, w_q, w_k, w_v] {
        if !m.is_finite() {
            return Err(Error::NonFinite("cross-attention input"));
        }
    }
    let mut g = Graph::new();
    let (ei, et) = (g.constant(e_i.clone()), g.constant(e_t.clone()));
    let (wq, wk, wv) = (g.constant(w_q.clone()), g.constant(w_k.clone()), g.constant(w_v.clone()));
    let q = g.matmul(ei, wq);
    let k = g.matmul(et, wk);
    let v = g.matmul(et, wv);
    let (out, probs) = multi_head_attention(&mut g, q, k, v, heads, None);
    Ok(CrossAttentionOutput {
        output: g.value(out).clone(),
        weights: probs.iter().map(|&p| g.value(p).clone()).collect(),
    })
}

/// Graph nodes of one fusion forward pass.
pub struct FuseTrace {
    pub embedding: Var,
    pub image_tokens: Var,
    pub text_tokens: Var,
    /// Per-head `M × L` cross-attention probabilities.
    pub cross_attention: Vec<Var>,
    /// Vision encoder self-attention, per layer and head.
    pub vision_attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamSet,
    pub seed: u64,
    vision: VisionEncoder,
    text: TextEncoder,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    projection: Linear,
}

impl FusionModel {
    pub fn new(config: FusionConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let vision = VisionEncoder::new(&mut params, &mut rng, "image_encoder", config.vision());
        let text = TextEncoder::new(
            &mut params,
            &mut rng,
            "text_encoder",
            TextConfig {
                vocab_size: tokenizer.vocab_size(),
                max_len: config.max_text_len,
                width: config.width,
                layers: config.encoder_layers,
                heads: config.encoder_heads,
            },
        );
        let d = config.width;
        let w_q = params.add("cross.w_q", glorot(&mut rng, d, d));
        let w_k = params.add("cross.w_k", glorot(&mut rng, d, d));
        let w_v = params.add("cross.w_v", glorot(&mut rng, d, d));
        let projection = Linear::new(&mut params, &mut rng, "projection", d, config.projection_dim, true);
        params.round_to_f32();
        Ok(Self { config, tokenizer, params, seed, vision, text, w_q, w_k, w_v, projection })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.projection_dim
    }

    /// Parameter names updated during training under the freeze mask.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.config.freeze_image_encoder && name.starts_with("image_encoder."))
            && !(self.config.freeze_text_encoder && name.starts_with("text_encoder."))
    }

    pub fn cross_params(&self) -> (&Matrix, &Matrix, &Matrix) {
        (self.params.get(self.w_q), self.params.get(self.w_k), self.params.get(self.w_v))
    }

    /// `<bos>` followed by the caption's word ids, truncated to `max_text_len`.
    pub fn text_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.tokenizer.encode(text));
        ids.truncate(self.config.max_text_len);
        ids
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let s = self.config.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::Shape(format!("image {}x{} but model expects {s}x{s}", image.height(), image.width())));
        }
        Ok(())
    }

    /// Builds the forward pass on `g`. The mode decides which inputs are read.
    pub fn forward(&self, g: &mut Graph, b: &Bound, image: &ImageTensor, text: &str) -> Result<FuseTrace> {
        let mode = self.config.mode;
        let (image_tokens, vision_attention) = if mode == FusionMode::TextOnly {
            (g.constant(Matrix::zeros(1, self.config.width)), Vec::new())
        } else {
            self.check_image(image)?;
            let patches = g.constant(patchify(image, self.config.patch_size));
            let out = self.vision.forward(g, b, patches);
            (out.tokens, out.attentions)
        };
        let ids = if mode == FusionMode::ImageOnly { vec![BOS] } else { self.text_ids(text) };
        let text_tokens = self.text.forward(g, b, &ids).tokens;
        Ok(self.head(g, b, image_tokens, text_tokens, vision_attention))
    }

    /// Cross-attention, pooling and projection on already encoded tokens.
    pub fn head(
        &self,
        g: &mut Graph,
        b: &Bound,
        image_tokens: Var,
        text_tokens: Var,
        vision_attention: Vec<Vec<Var>>,
    ) -> FuseTrace {
        let q = g.matmul(image_tokens, b.var(self.w_q));
        let k = g.matmul(text_tokens, b.var(self.w_k));
        let v = g.matmul(text_tokens, b.var(self.w_v));
        let (attended, probs) = multi_head_attention(g, q, k, v, self.config.attention_heads, None);
        let attended = if self.config.residual { g.add(image_tokens, attended) } else { attended };
        let pooled = match self.config.pooling {
            Pooling::Mean => g.mean_rows(attended),
            Pooling::FirstToken => g.slice_rows(attended, 0, 1),
        };
        let mut embedding = self.projection.forward(g, b, pooled);
        if self.config.normalize {
            embedding = g.l2_normalize_rows(embedding);
        }
        FuseTrace { embedding, image_tokens, text_tokens, cross_attention: probs, vision_attention }
    }

    /// `(E_I, E_T)` as read by the cross-attention in the configured mode.
    pub fn encode_pair(&self, image: &ImageTensor, text: &str) -> Result<(Matrix, Matrix)> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let t = self.forward(&mut g, &b, image, text)?;
        Ok((g.value(t.image_tokens).clone(), g.value(t.text_tokens).clone()))
    }

    /// The cross-modal embedding `F_θ(image, text)`.
    pub fn fuse(&self, image: &ImageTensor, text: &str) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let t = self.forward(&mut g, &b, image, text)?;
        let e = g.value(t.embedding);
        if !e.is_finite() {
            return Err(Error::NonFinite("fusion embedding"));
        }
        Ok(e.data().to_vec())
    }

    pub fn fuse_sample(&self, s: &Sample) -> Result<Vec<f64>> {
        self.fuse(s.image.load()?, s.caption.as_deref().unwrap_or(""))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "tokenizer": self.tokenizer,
            "seed": self.seed,
        });
        Checkpoint::new(FUSION_KIND, meta, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != FUSION_KIND {
            return Err(Error::Shape(format!("checkpoint kind {:?} is not a fusion model", ck.header.kind)));
        }
        let meta = &ck.header.meta;
        let field = |k: &str| meta.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let config: FusionConfig =
            serde_json::from_value(field("config")).map_err(|e| Error::json("fusion checkpoint config", e))?;
        let tokenizer: Tokenizer =
            serde_json::from_value(field("tokenizer")).map_err(|e| Error::json("fusion checkpoint tokenizer", e))?;
        let seed = field("seed").as_u64().unwrap_or(0);
        let mut model = Self::new(config, tokenizer, seed)?;
        ck.restore_into(&mut model.params)?;
        Ok(model)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        self.to_checkpoint().sha256()
    }
}
