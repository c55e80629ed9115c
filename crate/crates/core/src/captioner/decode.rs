use serde::{Deserialize, Serialize};

use super::CaptionerModel;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::text::{BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    Greedy,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub beam_width: usize,
    pub max_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { strategy: DecodeStrategy::Greedy, beam_width: 3, max_tokens: 30 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::InvalidConfig("beam_width must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
    done: bool,
}

/// Decodes a caption for `image`. Generation stops at `<eos>`, after
/// `max_tokens` tokens, or when the model's context is full. Ties between
/// equally likely tokens go to the lower id.
pub fn generate_caption(model: &CaptionerModel, image: &ImageTensor, cfg: &DecodeConfig) -> Result<String> {
    cfg.validate()?;
    let width = match cfg.strategy {
        DecodeStrategy::Greedy => 1,
        DecodeStrategy::Beam => cfg.beam_width,
    };
    let tokens = model.image_tokens(image)?;
    let budget = cfg.max_tokens.min(model.config.max_len - 1);
    let mut beams = vec![Hypothesis { tokens: vec![BOS], log_prob: 0.0, done: false }];
    for _ in 0..budget {
        if beams.iter().all(|h| h.done) {
            break;
        }
        let mut candidates = Vec::new();
        for h in &beams {
            if h.done {
                candidates.push(h.clone());
                continue;
            }
            let p = model.next_token_distribution(&tokens, &h.tokens)?;
            for (t, &pt) in p.iter().enumerate() {
                if t == PAD || t == BOS {
                    continue;
                }
                let mut next = h.tokens.clone();
                next.push(t);
                candidates.push(Hypothesis { tokens: next, log_prob: h.log_prob + pt.ln(), done: t == EOS });
            }
        }
        candidates.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        candidates.truncate(width);
        beams = candidates;
    }
    Ok(model.tokenizer.decode(&beams[0].tokens))
}
