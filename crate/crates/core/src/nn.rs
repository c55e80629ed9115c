//! Parameter storage and the transformer building blocks shared by the
//! captioner and the fusion model.
//!
//! Layers hold [`ParamId`]s into a [`ParamSet`] rather than owning their
//! weights. A forward pass first binds the whole set onto a [`Graph`]
//! (trainable parameters become differentiable leaves, frozen ones become
//! constants) and then threads the resulting [`Bound`] table through the
//! layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Snaps every value to the nearest `f32` so checkpoints round-trip exactly.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.round_to_f32();
        }
    }

    /// Binds every parameter onto `g`. Parameters for which `trainable`
    /// returns false become constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| if trainable(n) { g.param(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// Binds everything as constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.bind(g, |_| false)
    }
}

/// The [`Var`] of each parameter on one particular graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects per-parameter gradients, `None` where no gradient flowed.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Matrix>> {
        self.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }
}

/// Glorot-uniform initialized `rows × cols` matrix.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, rows, cols, a)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = ps.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Matrix::zeros(1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let y = g.matmul(x, b.var(self.weight));
        match self.bias {
            Some(bias) => g.add_row(y, b.var(bias)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Matrix::filled(1, width, 1.0)),
            beta: ps.add(format!("{name}.beta"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        g.layer_norm(x, b.var(self.gamma), b.var(self.beta), LAYER_NORM_EPS)
    }
}

/// Scaled dot-product attention with the width split evenly across `heads`.
///
/// Returns the concatenated head outputs and each head's probability matrix
/// (`queries × keys`). `mask`, when given, is added to the scores before the
/// softmax (use `-inf` to block a position).
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, mask: Option<Var>) -> (Var, Vec<Var>) {
    let width = g.value(q).cols();
    assert!(heads >= 1 && width.is_multiple_of(heads), "heads must divide width");
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * head_dim, head_dim),
                g.slice_cols(k, h * head_dim, head_dim),
                g.slice_cols(v, h * head_dim, head_dim),
            )
        };
        let scores = g.matmul_t(qh, kh);
        let mut scores = g.scale(scores, scale);
        if let Some(m) = mask {
            scores = g.add(scores, m);
        }
        let p = g.softmax(scores);
        probs.push(p);
        outs.push(g.matmul(p, vh));
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    (out, probs)
}

/// `n × n` additive mask blocking attention to later positions.
pub fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for r in 0..n {
        for c in r + 1..n {
            m.set(r, c, f64::NEG_INFINITY);
        }
    }
    m
}

/// Attention block with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
    ) -> Self {
        Self {
            query: Linear::new(ps, rng, &format!("{name}.query"), width, width, true),
            key: Linear::new(ps, rng, &format!("{name}.key"), kv_width, width, true),
            value: Linear::new(ps, rng, &format!("{name}.value"), kv_width, width, true),
            out: Linear::new(ps, rng, &format!("{name}.out"), width, width, true),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, context: Var, mask: Option<Var>) -> (Var, Vec<Var>) {
        let q = self.query.forward(g, b, x);
        let k = self.key.forward(g, b, context);
        let v = self.value.forward(g, b, context);
        let (o, probs) = multi_head_attention(g, q, k, v, self.heads, mask);
        (self.out.forward(g, b, o), probs)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(ps, rng, &format!("{name}.up"), width, hidden, true),
            down: Linear::new(ps, rng, &format!("{name}.down"), hidden, width, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let h = self.up.forward(g, b, x);
        let h = g.gelu(h);
        self.down.forward(g, b, h)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, width: usize, heads: usize) -> Self {
        Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), width),
            attn: Attention::new(ps, rng, &format!("{name}.attn"), width, width, heads),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), width),
            ffn: FeedForward::new(ps, rng, &format!("{name}.ffn"), width, 4 * width),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> (Var, Vec<Var>) {
        let h = self.norm1.forward(g, b, x);
        let (a, probs) = self.attn.forward(g, b, h, h, None);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, b, x);
        let f = self.ffn.forward(g, b, h);
        (g.add(x, f), probs)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl VisionConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Output of a transformer encoder: final token states plus the self-attention
/// probabilities of every head of every layer.
pub struct EncoderOutput {
    pub tokens: Var,
    pub attentions: Vec<Vec<Var>>,
}

/// Patch-embedding vision transformer without special tokens: an
/// `S × S` image with patch size `P` yields `(S/P)²` tokens.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub config: VisionConfig,
    pub patch_embed: Linear,
    pub position: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl VisionEncoder {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, config: VisionConfig) -> Self {
        let patch_embed = Linear::new(ps, rng, &format!("{name}.patch_embed"), config.patch_dim(), config.width, true);
        let position = ps.add(format!("{name}.position"), uniform(rng, config.num_patches(), config.width, 0.02));
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::new(ps, rng, &format!("{name}.blocks.{i}"), config.width, config.heads))
            .collect();
        let norm = LayerNorm::new(ps, &format!("{name}.norm"), config.width);
        Self { config, patch_embed, position, blocks, norm }
    }

    /// Runs the encoder on a `num_patches × patch_dim` matrix of flattened patches.
    pub fn forward(&self, g: &mut Graph, b: &Bound, patches: Var) -> EncoderOutput {
        let x = self.patch_embed.forward(g, b, patches);
        let mut x = g.add(x, b.var(self.position));
        let mut attentions = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, probs) = block.forward(g, b, x);
            x = y;
            attentions.push(probs);
        }
        EncoderOutput { tokens: self.norm.forward(g, b, x), attentions }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

/// Bidirectional transformer text encoder with learned positions.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub token_embed: ParamId,
    pub position: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl TextEncoder {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, config: TextConfig) -> Self {
        let token_embed = ps.add(format!("{name}.token_embed"), uniform(rng, config.vocab_size, config.width, 0.5));
        let position = ps.add(format!("{name}.position"), uniform(rng, config.max_len, config.width, 0.02));
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::new(ps, rng, &format!("{name}.blocks.{i}"), config.width, config.heads))
            .collect();
        let norm = LayerNorm::new(ps, &format!("{name}.norm"), config.width);
        Self { config, token_embed, position, blocks, norm }
    }

    /// `ids` must be non-empty, at most `max_len` long and inside the vocabulary.
    pub fn forward(&self, g: &mut Graph, b: &Bound, ids: &[usize]) -> EncoderOutput {
        let tok = g.embed(b.var(self.token_embed), ids);
        let pos = g.slice_rows(b.var(self.position), 0, ids.len());
        let mut x = g.add(tok, pos);
        let mut attentions = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, probs) = block.forward(g, b, x);
            x = y;
            attentions.push(probs);
        }
        EncoderOutput { tokens: self.norm.forward(g, b, x), attentions }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn attention_probabilities_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let q = g.constant(uniform(&mut rng, 3, 8, 2.0));
        let k = g.constant(uniform(&mut rng, 5, 8, 2.0));
        let v = g.constant(uniform(&mut rng, 5, 8, 2.0));
        let (out, probs) = multi_head_attention(&mut g, q, k, v, 2, None);
        assert_eq!(g.value(out).shape(), (3, 8));
        for p in probs {
            for r in 0..3 {
                let s: f64 = g.value(p).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_mask_blocks_future_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = g.constant(uniform(&mut rng, 4, 4, 1.0));
        let m = g.constant(causal_mask(4));
        let (_, probs) = multi_head_attention(&mut g, x, x, x, 1, Some(m));
        let p = g.value(probs[0]);
        for r in 0..4 {
            for c in r + 1..4 {
                assert_eq!(p.get(r, c), 0.0);
            }
        }
        assert_eq!(p.get(0, 0), 1.0);
    }

    #[test]
    fn frozen_binding_yields_no_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, &mut rng, "l", 3, 2, true);
        let mut g = Graph::new();
        let b = ps.bind(&mut g, |n| n.ends_with("bias"));
        let x = g.constant(Matrix::filled(2, 3, 1.0));
        let y = lin.forward(&mut g, &b, x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let per = b.gradients(&grads);
        assert!(per[0].is_none());
        assert_eq!(per[1].as_ref().unwrap().data(), &[2.0, 2.0]);
    }
}
