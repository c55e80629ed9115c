use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::gradcam::PhraseMap;
use super::projection::{PointKind, Projection};
use super::Heatmap;
use crate::corpus::{sanitize, Label};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::retrieval::{ClassificationResult, VoteCounts};
use crate::tensor::Matrix;

/// Every file written into a query's report directory.
pub const REPORT_FILES: [&str; 6] =
    ["prediction.json", "neighbors.json", "rollout.png", "gradcam.png", "projection.csv", "index.html"];

const OVERLAY_ALPHA: f32 = 0.5;

pub struct QueryReport<'a> {
    pub query_id: &'a str,
    pub caption: Option<&'a str>,
    pub truth: Option<Label>,
    pub image: &'a ImageTensor,
    pub result: &'a ClassificationResult,
    /// Captions of the neighbours, in result order.
    pub neighbor_captions: &'a [Option<String>],
    pub rollout: Option<&'a Heatmap>,
    /// Whole-caption map first, then one per phrase.
    pub gradcam: &'a [PhraseMap],
    pub projection: &'a Projection,
}

#[derive(Serialize)]
struct NeighborEntry<'a> {
    rank: usize,
    id: &'a str,
    distance: f64,
    label: Label,
    caption: Option<&'a str>,
}

#[derive(Serialize)]
struct PredictionFile<'a> {
    query_id: &'a str,
    predicted: Label,
    truth: Option<Label>,
    caption: Option<&'a str>,
    k: usize,
    votes: VoteCounts,
    neighbors: &'a [NeighborEntry<'a>],
    gradcam_panels: Vec<String>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| Error::json("report", e))?;
    v.push(b'\n');
    Ok(v)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn zero_map(image: &ImageTensor) -> Heatmap {
    Heatmap::normalized(&Matrix::zeros(image.height().max(1), image.width().max(1)))
}

/// Overlays placed side by side with a white gutter.
fn montage(panels: &[ImageTensor]) -> ImageTensor {
    let gap = 4;
    let h = panels.iter().map(ImageTensor::height).max().unwrap_or(1);
    let w = panels.iter().map(ImageTensor::width).sum::<usize>() + gap * panels.len().saturating_sub(1);
    let mut out = ImageTensor::filled(h, w, [1.0; 3]);
    let mut x0 = 0;
    for p in panels {
        for y in 0..p.height() {
            for x in 0..p.width() {
                out.set_pixel(y, x0 + x, p.pixel(y, x));
            }
        }
        x0 += p.width() + gap;
    }
    out
}

fn scatter_svg(p: &Projection, query_id: &str) -> String {
    let (size, pad) = (360.0, 20.0);
    let xs = p.points.iter().map(|q| q.x);
    let ys = p.points.iter().map(|q| q.y);
    let (x0, x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (size - 2.0 * pad);
    let sy = |y: f64| size - pad - (y - y0) / (y1 - y0).max(1e-12) * (size - 2.0 * pad);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\">\n");
    for q in &p.points {
        let color = match q.label {
            Label::Infected => "#c0392b",
            Label::Uninfected => "#2e86c1",
        };
        let (cx, cy) = (sx(q.x), sy(q.y));
        match q.kind {
            PointKind::Support => {
                let _ = writeln!(
                    s,
                    "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.6\"/>"
                );
            }
            PointKind::Query => {
                let (r, stroke) = if q.id == query_id { (7.0, 3) } else { (5.0, 1) };
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{}\" height=\"{}\" fill=\"{color}\" stroke=\"black\" stroke-width=\"{stroke}\"/>",
                    cx - r / 2.0,
                    cy - r / 2.0,
                    r,
                    r
                );
            }
        }
    }
    s.push_str("</svg>");
    s
}

fn index_html(q: &QueryReport<'_>, neighbors: &[NeighborEntry<'_>], panels: &[String]) -> String {
    let mut h = String::new();
    let _ = writeln!(h, "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title>", escape(q.query_id));
    h.push_str("<style>body{font-family:sans-serif;margin:2em}td,th{padding:2px 8px;text-align:left}img{image-rendering:pixelated;height:224px}</style></head><body>\n");
    let _ = writeln!(h, "<h1>{}</h1>", escape(q.query_id));
    let _ = writeln!(
        h,
        "<p>Predicted <b>{}</b> ({} infected / {} uninfected of k={}){}</p>",
        q.result.predicted,
        q.result.votes.infected,
        q.result.votes.uninfected,
        neighbors.len(),
        q.truth.map(|t| format!("; labelled {t}")).unwrap_or_default()
    );
    if let Some(c) = q.caption {
        let _ = writeln!(h, "<p>Caption: <i>{}</i></p>", escape(c));
    }
    h.push_str("<h2>Attention rollout</h2>\n<img src=\"rollout.png\" alt=\"rollout\">\n");
    let _ = writeln!(h, "<h2>Grad-CAM</h2>\n<p>Panels left to right: {}</p>", escape(&panels.join(" | ")));
    h.push_str("<img src=\"gradcam.png\" alt=\"gradcam\">\n<h2>Neighbours</h2>\n<table><tr><th>#</th><th>id</th><th>distance</th><th>label</th><th>caption</th></tr>\n");
    for n in neighbors {
        let _ = writeln!(
            h,
            "<tr><td>{}</td><td>{}</td><td>{:.4}</td><td>{}</td><td>{}</td></tr>",
            n.rank,
            escape(n.id),
            n.distance,
            n.label,
            escape(n.caption.unwrap_or(""))
        );
    }
    h.push_str("</table>\n");
    let _ = writeln!(
        h,
        "<h2>Embedding projection</h2>\n<p>PCA, explained variance {:.3} / {:.3}. Circles: support; squares: queries; red infected, blue uninfected. Data in <a href=\"projection.csv\">projection.csv</a>.</p>",
        q.projection.explained_variance[0], q.projection.explained_variance[1]
    );
    h.push_str(&scatter_svg(q.projection, q.query_id));
    h.push_str("\n</body></html>\n");
    h
}

/// Writes `root/<query_id>/` with the files listed in [`REPORT_FILES`] and
/// returns that directory. Output is a pure function of the inputs.
pub fn render_report(root: &Path, q: &QueryReport<'_>) -> Result<PathBuf> {
    if q.neighbor_captions.len() != q.result.neighbor_ids.len() {
        return Err(Error::LengthMismatch(q.neighbor_captions.len(), q.result.neighbor_ids.len()));
    }
    let dir = root.join(sanitize(q.query_id));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let neighbors: Vec<NeighborEntry<'_>> = (0..q.result.neighbor_ids.len())
        .map(|i| NeighborEntry {
            rank: i + 1,
            id: &q.result.neighbor_ids[i],
            distance: q.result.distances[i],
            label: q.result.neighbor_labels[i],
            caption: q.neighbor_captions[i].as_deref(),
        })
        .collect();
    let panels: Vec<String> = if q.gradcam.is_empty() {
        vec!["(no captioner)".into()]
    } else {
        q.gradcam.iter().map(|p| p.phrase.clone().unwrap_or_else(|| "full caption".into())).collect()
    };
    let prediction = PredictionFile {
        query_id: q.query_id,
        predicted: q.result.predicted,
        truth: q.truth,
        caption: q.caption,
        k: neighbors.len(),
        votes: q.result.votes,
        neighbors: &neighbors,
        gradcam_panels: panels.clone(),
    };
    write(&dir.join("prediction.json"), &json(&prediction)?)?;
    write(&dir.join("neighbors.json"), &json(&neighbors)?)?;

    let zero = zero_map(q.image);
    q.rollout.unwrap_or(&zero).overlay(q.image, OVERLAY_ALPHA).save_png(&dir.join("rollout.png"))?;
    let overlays: Vec<ImageTensor> = if q.gradcam.is_empty() {
        vec![zero.overlay(q.image, OVERLAY_ALPHA)]
    } else {
        q.gradcam.iter().map(|p| p.cam.heatmap.overlay(q.image, OVERLAY_ALPHA)).collect()
    };
    montage(&overlays).save_png(&dir.join("gradcam.png"))?;
    write(&dir.join("projection.csv"), q.projection.to_csv().as_bytes())?;
    write(&dir.join("index.html"), index_html(q, &neighbors, &panels).as_bytes())?;
    Ok(dir)
}
