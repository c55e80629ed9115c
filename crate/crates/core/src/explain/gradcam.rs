use serde::{Deserialize, Serialize};

use super::phrases::split_phrases;
use super::Heatmap;
use crate::autograd::Graph;
use crate::captioner::CaptionerModel;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::tensor::Matrix;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCamConfig {
    /// ITM cross-attention block to read; the last one when unset.
    pub layer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    /// Rectified weighted sum before normalization.
    pub raw: Matrix,
    pub heatmap: Heatmap,
}

/// Grad-CAM from `channels × positions` activations and their gradients:
/// each channel is weighted by its mean gradient, the weighted sum is
/// rectified, and the result is reshaped to `grid` and min-max normalized.
pub fn gradcam_from_parts(activations: &Matrix, gradients: &Matrix, grid: (usize, usize)) -> Result<GradCam> {
    if activations.shape() != gradients.shape() {
        return Err(Error::Shape(format!(
            "activations {:?} vs gradients {:?}",
            activations.shape(),
            gradients.shape()
        )));
    }
    if activations.rows() == 0 || activations.cols() != grid.0 * grid.1 {
        return Err(Error::Shape(format!("{:?} activations for a {}x{} grid", activations.shape(), grid.0, grid.1)));
    }
    let mut map = vec![0.0; activations.cols()];
    for c in 0..activations.rows() {
        let g = gradients.row(c);
        let w = g.iter().sum::<f64>() / g.len() as f64;
        for (m, a) in map.iter_mut().zip(activations.row(c)) {
            *m += w * a;
        }
    }
    let raw = Matrix::from_vec(grid.0, grid.1, map.into_iter().map(|v| v.max(0.0)).collect());
    Ok(GradCam { heatmap: Heatmap::normalized(&raw), raw })
}

/// Cross-attention probabilities of one ITM block and the gradient of the
/// match logit with respect to them, one row per (head, text position),
/// head-major.
struct ItmAttention {
    activations: Matrix,
    gradients: Matrix,
    heads: usize,
    tokens: usize,
}

impl ItmAttention {
    fn compute(model: &CaptionerModel, image: &ImageTensor, ids: &[usize], cfg: &GradCamConfig) -> Result<Self> {
        let layers = model.config.decoder_layers;
        let layer = cfg.layer.unwrap_or(layers - 1);
        if layer >= layers {
            return Err(Error::InvalidConfig(format!("Grad-CAM layer {layer} but the ITM encoder has {layers}")));
        }
        let tokens_value = model.image_tokens(image)?;
        let mut g = Graph::new();
        let b = model.params.bind_frozen(&mut g);
        let image_tokens = g.param(tokens_value);
        let (logit, pass) = model.itm_pass(&mut g, &b, image_tokens, ids);
        let grads = g.backward(logit);
        let probs = &pass.cross_attention[layer];
        let patches = g.value(probs[0]).cols();
        let mut activations = Vec::new();
        let mut gradients = Vec::new();
        for &p in probs {
            activations.extend_from_slice(g.value(p).data());
            match grads.get(p) {
                Some(gm) => gradients.extend_from_slice(gm.data()),
                None => gradients.extend(std::iter::repeat_n(0.0, ids.len() * patches)),
            }
        }
        let rows = probs.len() * ids.len();
        Ok(Self {
            activations: Matrix::from_vec(rows, patches, activations),
            gradients: Matrix::from_vec(rows, patches, gradients),
            heads: probs.len(),
            tokens: ids.len(),
        })
    }

    fn cam(&self, positions: &[usize], grid: usize) -> Result<GradCam> {
        let rows: Vec<usize> = (0..self.heads)
            .flat_map(|h| positions.iter().filter(|&&t| t < self.tokens).map(move |&t| h * self.tokens + t))
            .collect();
        if rows.is_empty() {
            return Err(Error::Empty("Grad-CAM text positions"));
        }
        let pick = |m: &Matrix| Matrix::from_rows(&rows.iter().map(|&r| m.row(r).to_vec()).collect::<Vec<_>>());
        gradcam_from_parts(&pick(&self.activations), &pick(&self.gradients), (grid, grid))
    }
}

/// Grad-CAM of the ITM match logit for `(image, text)` over every text
/// position of the chosen cross-attention block.
pub fn gradcam(model: &CaptionerModel, image: &ImageTensor, text: &str, cfg: &GradCamConfig) -> Result<GradCam> {
    let ids = model.itm_ids(text)?;
    let att = ItmAttention::compute(model, image, &ids, cfg)?;
    att.cam(&(0..ids.len()).collect::<Vec<_>>(), model.config.grid())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhraseMap {
    /// `None` for the whole-caption map.
    pub phrase: Option<String>,
    pub cam: GradCam,
}

/// The whole-caption map followed by one map per phrase chunk. Each phrase
/// map keeps only the channels of that phrase's token positions; phrases
/// cut off by the length limit are skipped.
pub fn phrase_gradcams(
    model: &CaptionerModel,
    image: &ImageTensor,
    caption: &str,
    cfg: &GradCamConfig,
) -> Result<Vec<PhraseMap>> {
    let ids = model.itm_ids(caption)?;
    let att = ItmAttention::compute(model, image, &ids, cfg)?;
    let grid = model.config.grid();
    let mut out = vec![PhraseMap { phrase: None, cam: att.cam(&(0..ids.len()).collect::<Vec<_>>(), grid)? }];
    for p in split_phrases(caption) {
        // Word i sits at ITM position i + 1, after <bos>.
        let positions: Vec<usize> = (p.start + 1..p.end + 1).filter(|&t| t < ids.len()).collect();
        if positions.is_empty() {
            continue;
        }
        out.push(PhraseMap { phrase: Some(p.text), cam: att.cam(&positions, grid)? });
    }
    Ok(out)
}
