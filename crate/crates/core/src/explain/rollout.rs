use super::Heatmap;
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, FusionModel};
use crate::imaging::ImageTensor;
use crate::tensor::Matrix;

const ROW_TOLERANCE: f64 = 1e-6;

/// Per-layer, per-head square attention matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub layers: Vec<Vec<Matrix>>,
}

impl AttentionStack {
    pub fn new(layers: Vec<Vec<Matrix>>) -> Result<Self> {
        let s = Self { layers };
        s.validate()?;
        Ok(s)
    }

    pub fn tokens(&self) -> usize {
        self.layers.first().and_then(|l| l.first()).map_or(0, Matrix::rows)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens();
        if n == 0 {
            return Err(Error::InvalidAttention("empty stack".into()));
        }
        for (li, layer) in self.layers.iter().enumerate() {
            if layer.is_empty() {
                return Err(Error::InvalidAttention(format!("layer {li} has no heads")));
            }
            for (hi, a) in layer.iter().enumerate() {
                if a.shape() != (n, n) {
                    return Err(Error::InvalidAttention(format!(
                        "layer {li} head {hi} is {:?}, expected {n}x{n}",
                        a.shape()
                    )));
                }
                for r in 0..n {
                    let row = a.row(r);
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > ROW_TOLERANCE {
                        return Err(Error::InvalidAttention(format!(
                            "layer {li} head {hi} row {r} is not a probability row (sum {sum})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Which row of the rolled-out matrix becomes the map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutReference {
    Token(usize),
    /// Mean over all rows, matching mean-pooled embeddings.
    Mean,
}

fn residual_adjusted(layer: &[Matrix]) -> Matrix {
    let n = layer[0].rows();
    let mut avg = Matrix::zeros(n, n);
    for a in layer {
        avg.add_assign(a);
    }
    let mut m = avg.scale(0.5 / layer.len() as f64);
    for i in 0..n {
        m.set(i, i, m.get(i, i) + 0.5);
    }
    for r in 0..n {
        let s: f64 = m.row(r).iter().sum();
        m.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    m
}

/// Product of the residual-adjusted, head-averaged layers, first layer
/// rightmost so that row `i` traces token `i` back to the input tokens.
pub fn rollout_matrix(stack: &AttentionStack) -> Result<Matrix> {
    stack.validate()?;
    let mut acc = Matrix::identity(stack.tokens());
    for layer in &stack.layers {
        acc = residual_adjusted(layer).matmul(&acc);
    }
    Ok(acc)
}

pub fn attention_rollout(stack: &AttentionStack, grid: (usize, usize), reference: RolloutReference) -> Result<Heatmap> {
    let r = rollout_matrix(stack)?;
    let n = r.rows();
    if grid.0 * grid.1 != n {
        return Err(Error::InvalidAttention(format!("{n} tokens do not fill a {}x{} grid", grid.0, grid.1)));
    }
    let row = match reference {
        RolloutReference::Token(t) if t < n => r.row(t).to_vec(),
        RolloutReference::Token(t) => return Err(Error::InvalidAttention(format!("reference token {t} of {n}"))),
        RolloutReference::Mean => r.mean_rows().into_data(),
    };
    Ok(Heatmap::normalized(&Matrix::from_vec(grid.0, grid.1, row)))
}

/// Self-attention stack of the fusion image encoder for one input.
pub fn fusion_attention_stack(model: &FusionModel, image: &ImageTensor, text: &str) -> Result<AttentionStack> {
    if model.config.mode == FusionMode::TextOnly {
        return Err(Error::InvalidAttention("text-only mode has no image encoder".into()));
    }
    let mut g = Graph::new();
    let b = model.params.bind_frozen(&mut g);
    let trace = model.forward(&mut g, &b, image, text)?;
    let layers =
        trace.vision_attention.iter().map(|heads| heads.iter().map(|&h| g.value(h).clone()).collect()).collect();
    AttentionStack::new(layers)
}

/// Rollout over the fusion image encoder, referenced to the mean-pooled token.
pub fn fusion_rollout(model: &FusionModel, image: &ImageTensor, text: &str) -> Result<Heatmap> {
    let stack = fusion_attention_stack(model, image, text)?;
    let grid = model.config.image_size / model.config.patch_size;
    attention_rollout(&stack, (grid, grid), RolloutReference::Mean)
}
