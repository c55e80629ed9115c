//! Independent reference implementations used by the acceptance suite.

#![allow(dead_code)]

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use scarwid_core::corpus::{Dataset, ImageHandle, Label, Sample, Source};
use scarwid_core::imaging::ImageTensor;

/// Criteria run one at a time so each is timed without contention.
static SERIAL: Mutex<()> = Mutex::new(());

/// Runs `body`, writes one PASS/FAIL line straight to stderr (bypassing the
/// harness capture) and fails the test if the body failed or overran.
pub fn criterion(id: u32, name: &str, limit: Duration, body: impl FnOnce() -> Result<String, String>) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(body)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())),
    };
    let elapsed = start.elapsed();
    let outcome = match outcome {
        Ok(detail) if elapsed >= limit => Err(format!("{detail}; runtime over the {:.0?} limit", limit)),
        other => other,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    let line = format!(
        "acceptance criterion {id:>2} {tag}: {name} [{:.2}s of {:.0}s] {detail}\n",
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    if let Err(e) = outcome {
        panic!("criterion {id} failed: {e}");
    }
}

pub fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Naive scaled dot-product attention with the query taken from `e_i` and
/// keys and values from `e_t`. Each head sees a contiguous block of
/// `d / heads` columns and is scaled by the square root of that width.
/// Returns the concatenated output and per-head weight matrices.
pub fn attention_oracle(
    e_i: &[Vec<f64>],
    e_t: &[Vec<f64>],
    w_q: &[Vec<f64>],
    w_k: &[Vec<f64>],
    w_v: &[Vec<f64>],
    heads: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let project = |x: &[Vec<f64>], w: &[Vec<f64>]| -> Vec<Vec<f64>> {
        x.iter().map(|row| (0..w[0].len()).map(|j| (0..row.len()).map(|i| row[i] * w[i][j]).sum()).collect()).collect()
    };
    let (q, k, v) = (project(e_i, w_q), project(e_t, w_k), project(e_t, w_v));
    let d = w_q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut w_h = Vec::new();
        for (m, qm) in q.iter().enumerate() {
            let scores: Vec<f64> =
                k.iter().map(|kl| cols.clone().map(|c| qm[c] * kl[c]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
            for c in cols.clone() {
                out[m][c] = p.iter().zip(&v).map(|(pl, vl)| pl * vl[c]).sum();
            }
            w_h.push(p);
        }
        weights.push(w_h);
    }
    (out, weights)
}

/// Every store row ranked by `(distance, index)` through a full sort.
pub fn knn_oracle(store: &[Vec<f32>], query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = store
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut acc = 0.0f64;
            for (s, q) in row.iter().zip(query) {
                let diff = q - f64::from(*s);
                acc += diff * diff;
            }
            (i, acc.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Hand-derived metric values, `None` where a denominator is zero.
pub struct MetricOracle {
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spc: Option<f64>,
    pub ppv: Option<f64>,
    pub f1: Option<f64>,
}

pub fn metric_oracle(tp: usize, fp: usize, tn: usize, fn_: usize) -> MetricOracle {
    let ratio = |a: usize, b: usize| if b == 0 { None } else { Some(a as f64 / b as f64) };
    let sen = ratio(tp, tp + fn_);
    let ppv = ratio(tp, tp + fp);
    // Harmonic mean of precision and recall: 2tp / (2tp + fp + fn) whenever
    // both are defined and not both zero.
    let f1 = match (sen, ppv) {
        (Some(_), Some(_)) if tp > 0 => ratio(2 * tp, 2 * tp + fp + fn_),
        _ => None,
    };
    MetricOracle { acc: ratio(tp + tn, tp + fp + tn + fn_), sen, spc: ratio(tn, tn + fp), ppv, f1 }
}

/// Relative error with the denominator floored at 1e-5. Below that level
/// central differences with a 1e-5 step are dominated by round-off in the
/// loss, so tiny gradients are effectively compared in absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Flat-coloured in-memory image.
pub fn flat_image(size: usize, rgb: [f32; 3]) -> ImageHandle {
    ImageHandle::memory(ImageTensor::filled(size, size, rgb))
}

/// Real samples for `(subject, label, images)` triples, ids `"{subject}-{j}"`.
pub fn dataset_from_subjects(subjects: &[(String, Label, usize)], size: usize) -> Dataset {
    let mut samples = Vec::new();
    for (si, (subject, label, n)) in subjects.iter().enumerate() {
        for j in 0..*n {
            let shade = ((si * 7 + j * 3) % 17) as f32 / 17.0;
            let rgb = match label {
                Label::Infected => [0.9, shade, 0.2],
                Label::Uninfected => [0.3, shade, 0.8],
            };
            samples.push(Sample {
                id: format!("{subject}-{j}"),
                subject_id: subject.clone(),
                image: flat_image(size, rgb),
                caption: Some(format!("{} wound {}", label.as_str(), j % 3)),
                label: *label,
                source: Source::Real,
            });
        }
    }
    Dataset::new(samples).expect("unique ids")
}
