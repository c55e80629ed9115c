//! Procedural wound images with known ground truth.
//!
//! Each subject gets a skin tone and a set of wound attributes; each of its
//! 1 to 4 samples is a fresh rendering with jittered geometry and pixel
//! noise. The label rule is `infected ⇔ discharge ∨ necrosis`. A sample's
//! [`SignalChannel`] decides where that deciding evidence shows up: in both
//! modalities, only in the caption, or only in the pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageHandle, Label, Sample, Source};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyAttrConfig {
    pub image_size: usize,
    pub p_erythema: f64,
    pub p_discharge: f64,
    pub p_necrosis: f64,
    pub p_granulation: f64,
    /// Fraction of samples whose deciding attributes are captioned but not rendered.
    pub text_only_signal_rate: f64,
    /// Fraction of samples whose deciding attributes are rendered but not captioned.
    pub image_only_signal_rate: f64,
    pub label_noise: f64,
}

impl Default for ToyAttrConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            p_erythema: 0.5,
            p_discharge: 0.35,
            p_necrosis: 0.25,
            p_granulation: 0.5,
            text_only_signal_rate: 0.3,
            image_only_signal_rate: 0.3,
            label_noise: 0.0,
        }
    }
}

impl ToyAttrConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_erythema", self.p_erythema),
            ("p_discharge", self.p_discharge),
            ("p_necrosis", self.p_necrosis),
            ("p_granulation", self.p_granulation),
            ("text_only_signal_rate", self.text_only_signal_rate),
            ("image_only_signal_rate", self.image_only_signal_rate),
            ("label_noise", self.label_noise),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if self.text_only_signal_rate + self.image_only_signal_rate > 1.0 {
            return Err(Error::InvalidConfig("signal rates sum to more than 1".into()));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidConfig("toy image_size must be at least 8".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub erythema: bool,
    pub discharge: bool,
    pub necrosis: bool,
    pub granulation: bool,
}

impl Attributes {
    pub fn infected(&self) -> bool {
        self.discharge || self.necrosis
    }

    fn without_deciding(self) -> Self {
        Self { discharge: false, necrosis: false, ..self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalChannel {
    Both,
    TextOnly,
    ImageOnly,
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0 + 1) * (self.x1 - self.x0 + 1)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRecord {
    pub id: String,
    pub subject_id: String,
    /// Ground-truth attributes of the subject's wound.
    pub attributes: Attributes,
    pub rendered: Attributes,
    pub captioned: Attributes,
    pub channel: SignalChannel,
    pub label: Label,
    pub label_flipped: bool,
    pub discharge_bbox: Option<BoundingBox>,
    pub necrosis_bbox: Option<BoundingBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyMetadata {
    pub n: usize,
    pub seed: u64,
    pub config: ToyAttrConfig,
    /// Samples drawn into the text-only channel.
    pub text_only_signal_count: usize,
    /// Text-only samples that actually carry a deciding attribute.
    pub text_only_decisive_count: usize,
    pub image_only_signal_count: usize,
    pub label_flips: usize,
    pub records: Vec<ToyRecord>,
}

#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub dataset: Dataset,
    pub metadata: ToyMetadata,
}

const OPENERS: [&str; 3] = ["a diabetic foot ulcer", "the wound", "a foot wound"];

/// Template caption enumerating the attributes in a fixed order.
pub fn toy_caption(opener: &str, a: &Attributes) -> String {
    let mut phrases = Vec::new();
    if a.erythema {
        phrases.push("reddened edges");
    }
    if a.discharge {
        phrases.push("yellowish discharge");
    }
    if a.necrosis {
        phrases.push("black necrotic tissue");
    }
    if a.granulation {
        phrases.push("pink granulation tissue");
    }
    let body = match phrases.len() {
        0 => "a clean bed and healthy surrounding skin".to_string(),
        1 => phrases[0].to_string(),
        n => format!("{} and {}", phrases[..n - 1].join(", "), phrases[n - 1]),
    };
    format!("{opener} with {body} .")
}

struct Subject {
    id: String,
    skin: [f32; 3],
    attributes: Attributes,
    members: usize,
}

pub fn generate_toy_corpus(n: usize, cfg: &ToyAttrConfig, seed: u64) -> Result<ToyCorpus> {
    if n == 0 {
        return Err(Error::InvalidConfig("toy corpus size must be at least 1".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut subjects = Vec::new();
    let mut assigned = 0;
    while assigned < n {
        let members = rng.gen_range(1..=4usize).min(n - assigned);
        let skin = [rng.gen_range(0.70..0.95), rng.gen_range(0.52..0.72), rng.gen_range(0.42..0.62)];
        let attributes = Attributes {
            erythema: rng.gen_bool(cfg.p_erythema),
            discharge: rng.gen_bool(cfg.p_discharge),
            necrosis: rng.gen_bool(cfg.p_necrosis),
            granulation: rng.gen_bool(cfg.p_granulation),
        };
        subjects.push(Subject { id: format!("toy-s{:04}", subjects.len()), skin, attributes, members });
        assigned += members;
    }

    let mut samples = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for subject in &subjects {
        for _ in 0..subject.members {
            let id = format!("toy-{:05}", samples.len());
            let u: f64 = rng.gen();
            let channel = if u < cfg.text_only_signal_rate {
                SignalChannel::TextOnly
            } else if u < cfg.text_only_signal_rate + cfg.image_only_signal_rate {
                SignalChannel::ImageOnly
            } else {
                SignalChannel::Both
            };
            let a = subject.attributes;
            let (rendered, captioned) = match channel {
                SignalChannel::Both => (a, a),
                SignalChannel::TextOnly => (a.without_deciding(), a),
                SignalChannel::ImageOnly => (a, a.without_deciding()),
            };
            let flipped = rng.gen_bool(cfg.label_noise);
            let clean = if a.infected() { Label::Infected } else { Label::Uninfected };
            let label = if flipped { clean.flipped() } else { clean };
            let opener = OPENERS[rng.gen_range(0..OPENERS.len())];
            let caption = toy_caption(opener, &captioned);
            let (image, discharge_bbox, necrosis_bbox) = render(&mut rng, cfg.image_size, subject.skin, &rendered);
            samples.push(Sample {
                id: id.clone(),
                subject_id: subject.id.clone(),
                image: ImageHandle::memory(image),
                caption: Some(caption),
                label,
                source: Source::Toy,
            });
            records.push(ToyRecord {
                id,
                subject_id: subject.id.clone(),
                attributes: a,
                rendered,
                captioned,
                channel,
                label,
                label_flipped: flipped,
                discharge_bbox,
                necrosis_bbox,
            });
        }
    }

    let count = |pred: &dyn Fn(&ToyRecord) -> bool| records.iter().filter(|r| pred(r)).count();
    let metadata = ToyMetadata {
        n,
        seed,
        config: cfg.clone(),
        text_only_signal_count: count(&|r| r.channel == SignalChannel::TextOnly),
        text_only_decisive_count: count(&|r| r.channel == SignalChannel::TextOnly && r.attributes.infected()),
        image_only_signal_count: count(&|r| r.channel == SignalChannel::ImageOnly),
        label_flips: count(&|r| r.label_flipped),
        records,
    };
    Ok(ToyCorpus { dataset: Dataset::new(samples)?, metadata })
}

const BED: [f32; 3] = [0.62, 0.22, 0.22];
const ERYTHEMA: [f32; 3] = [0.88, 0.22, 0.2];
const GRANULATION: [f32; 3] = [0.95, 0.5, 0.55];
const DISCHARGE: [f32; 3] = [0.95, 0.85, 0.2];
const NECROSIS: [f32; 3] = [0.06, 0.05, 0.04];

fn render(
    rng: &mut ChaCha8Rng,
    size: usize,
    skin: [f32; 3],
    a: &Attributes,
) -> (ImageTensor, Option<BoundingBox>, Option<BoundingBox>) {
    let s = size as f64;
    let cy = s / 2.0 + rng.gen_range(-0.06..0.06) * s;
    let cx = s / 2.0 + rng.gen_range(-0.06..0.06) * s;
    let ry = rng.gen_range(0.26..0.34) * s;
    let rx = rng.gen_range(0.26..0.34) * s;
    // Elliptical radius of a pixel centre: < 1 inside the bed.
    let radius = |y: usize, x: usize| {
        let dy = (y as f64 + 0.5 - cy) / ry;
        let dx = (x as f64 + 0.5 - cx) / rx;
        (dy * dy + dx * dx).sqrt()
    };

    let mut img = ImageTensor::filled(size, size, skin);
    for y in 0..size {
        for x in 0..size {
            let r = radius(y, x);
            if r < 1.0 {
                let speckle = a.granulation && rng.gen_bool(0.35);
                img.set_pixel(y, x, if speckle { GRANULATION } else { BED });
            } else if a.erythema && r < 1.3 {
                img.set_pixel(y, x, ERYTHEMA);
            }
        }
    }

    // Lesions sit inside the bed, away from each other's centres.
    let place = |rng: &mut ChaCha8Rng, half: f64| {
        let oy = rng.gen_range(-0.45..0.45) * (ry - half).max(0.0);
        let ox = rng.gen_range(-0.45..0.45) * (rx - half).max(0.0);
        (cy + oy, cx + ox)
    };
    let clip = |v: f64| (v.max(0.0) as usize).min(size - 1);

    let mut discharge_bbox = None;
    if a.discharge {
        let r = (0.13 * s).max(1.5);
        let (py, px) = place(rng, r);
        let mut bb = BoundingBox { y0: size, x0: size, y1: 0, x1: 0 };
        for y in clip(py - r)..=clip(py + r) {
            for x in clip(px - r)..=clip(px + r) {
                let dy = y as f64 + 0.5 - py;
                let dx = x as f64 + 0.5 - px;
                if dy * dy + dx * dx <= r * r {
                    img.set_pixel(y, x, DISCHARGE);
                    bb = BoundingBox { y0: bb.y0.min(y), x0: bb.x0.min(x), y1: bb.y1.max(y), x1: bb.x1.max(x) };
                }
            }
        }
        discharge_bbox = Some(bb);
    }

    let mut necrosis_bbox = None;
    if a.necrosis {
        let half = (0.1 * s).max(1.0);
        let (py, px) = place(rng, half);
        let bb = BoundingBox {
            y0: clip(py - half),
            x0: clip(px - half),
            y1: clip(py + half - 1.0),
            x1: clip(px + half - 1.0),
        };
        for y in bb.y0..=bb.y1 {
            for x in bb.x0..=bb.x1 {
                img.set_pixel(y, x, NECROSIS);
            }
        }
        necrosis_bbox = Some(bb);
    }

    for v in img.data_mut() {
        *v += rng.gen_range(-0.03f32..0.03);
    }
    img.quantize_u8();
    (img, discharge_bbox, necrosis_bbox)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_template() {
        let a = Attributes { erythema: true, discharge: true, necrosis: false, granulation: true };
        assert_eq!(
            toy_caption("the wound", &a),
            "the wound with reddened edges, yellowish discharge and pink granulation tissue ."
        );
        assert_eq!(
            toy_caption("a foot wound", &Attributes::default()),
            "a foot wound with a clean bed and healthy surrounding skin ."
        );
        let b = Attributes { necrosis: true, ..Default::default() };
        assert_eq!(toy_caption("the wound", &b), "the wound with black necrotic tissue .");
    }

    #[test]
    fn discharge_without_noise_is_infected() {
        let cfg = ToyAttrConfig { p_discharge: 1.0, ..Default::default() };
        let toy = generate_toy_corpus(20, &cfg, 4).unwrap();
        assert!(toy.dataset.samples().iter().all(|s| s.label == Label::Infected));
    }

    #[test]
    fn label_follows_rule_exhaustively() {
        let toy = generate_toy_corpus(300, &ToyAttrConfig::default(), 17).unwrap();
        for (s, r) in toy.dataset.samples().iter().zip(&toy.metadata.records) {
            let expect =
                if r.attributes.discharge || r.attributes.necrosis { Label::Infected } else { Label::Uninfected };
            assert_eq!(s.label, expect, "{}", s.id);
            assert_eq!(s.image.load().unwrap().height(), 32);
        }
        assert_eq!(toy.metadata.label_flips, 0);
    }

    #[test]
    fn same_seed_same_hash() {
        let cfg = ToyAttrConfig::default();
        let a = generate_toy_corpus(40, &cfg, 8).unwrap();
        let b = generate_toy_corpus(40, &cfg, 8).unwrap();
        let c = generate_toy_corpus(40, &cfg, 9).unwrap();
        assert_eq!(a.dataset.content_hash().unwrap(), b.dataset.content_hash().unwrap());
        assert_ne!(a.dataset.content_hash().unwrap(), c.dataset.content_hash().unwrap());
    }

    #[test]
    fn channels_hide_evidence() {
        let cfg = ToyAttrConfig { p_discharge: 1.0, p_necrosis: 0.0, ..Default::default() };
        let toy = generate_toy_corpus(200, &cfg, 2).unwrap();
        for (s, r) in toy.dataset.samples().iter().zip(&toy.metadata.records) {
            let cap = s.caption.as_deref().unwrap();
            let img = s.image.load().unwrap();
            let yellow = img.data().chunks_exact(3).any(|p| p[0] > 0.85 && p[1] > 0.75 && p[2] < 0.35);
            match r.channel {
                SignalChannel::Both => assert!(cap.contains("discharge") && yellow),
                SignalChannel::TextOnly => {
                    assert!(cap.contains("discharge") && !yellow && r.discharge_bbox.is_none())
                }
                SignalChannel::ImageOnly => assert!(!cap.contains("discharge") && yellow),
            }
        }
    }

    #[test]
    fn text_only_count_near_rate() {
        let toy = generate_toy_corpus(600, &ToyAttrConfig::default(), 1).unwrap();
        let m = &toy.metadata;
        let oracle = m.records.iter().filter(|r| r.channel == SignalChannel::TextOnly).count();
        assert_eq!(m.text_only_signal_count, oracle);
        assert!((130..=230).contains(&oracle), "{oracle}");
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ToyAttrConfig { p_discharge: 1.5, ..Default::default() };
        assert!(generate_toy_corpus(5, &cfg, 0).is_err());
        assert!(generate_toy_corpus(0, &ToyAttrConfig::default(), 0).is_err());
    }
}
