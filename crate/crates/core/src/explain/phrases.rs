use serde::{Deserialize, Serialize};

use crate::text::words;

/// Words that end a chunk without belonging to either side.
const BREAKS: &[&str] = &[
    "and",
    "or",
    "with",
    "without",
    "of",
    "on",
    "in",
    "at",
    "by",
    "to",
    "from",
    "is",
    "are",
    "was",
    "has",
    "have",
    "showing",
    "characterized",
    "indicative",
    "indicating",
    "suggesting",
    "suggestive",
    "consistent",
    "around",
];
const ARTICLES: &[&str] = &["a", "an", "the", "some"];

/// A chunk of caption words; `start..end` indexes [`words`] of the caption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_punct(w: &str) -> bool {
    w.chars().all(|c| !c.is_alphanumeric())
}

/// Rule-based noun-phrase chunks: the caption is cut at punctuation and at
/// connective words, and leading articles are dropped.
pub fn split_phrases(caption: &str) -> Vec<Phrase> {
    let ws = words(caption);
    let mut out = Vec::new();
    let mut start = 0;
    let flush = |out: &mut Vec<Phrase>, mut s: usize, e: usize| {
        while s < e && ARTICLES.contains(&ws[s].as_str()) {
            s += 1;
        }
        if s < e {
            out.push(Phrase { text: ws[s..e].join(" "), start: s, end: e });
        }
    };
    for (i, w) in ws.iter().enumerate() {
        if is_punct(w) || BREAKS.contains(&w.as_str()) {
            flush(&mut out, start, i);
            start = i + 1;
        }
    }
    flush(&mut out, start, ws.len());
    out
}
