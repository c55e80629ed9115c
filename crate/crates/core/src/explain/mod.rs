//! Attention rollout, Grad-CAM, embedding projection and static reports.

mod gradcam;
mod phrases;
mod projection;
mod report;
mod rollout;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};

pub use gradcam::{gradcam, gradcam_from_parts, phrase_gradcams, GradCam, GradCamConfig, PhraseMap};
pub use phrases::{split_phrases, Phrase};
pub use projection::{pca_2d, project_embeddings, PointKind, ProjectedPoint, Projection, QueryPoint};
pub use report::{render_report, QueryReport, REPORT_FILES};
pub use rollout::{
    attention_rollout, fusion_attention_stack, fusion_rollout, rollout_matrix, AttentionStack, RolloutReference,
};

use crate::imaging::ImageTensor;
use crate::tensor::Matrix;

/// A map over the patch grid with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    grid: Matrix,
}

impl Heatmap {
    /// Min-max normalizes `raw`; a constant map becomes all zeros.
    pub fn normalized(raw: &Matrix) -> Self {
        let lo = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let grid = if span > 0.0 && span.is_finite() {
            raw.map(|v| (v - lo) / span)
        } else {
            Matrix::zeros(raw.rows(), raw.cols())
        };
        Self { grid }
    }

    pub fn grid(&self) -> &Matrix {
        &self.grid
    }

    pub fn is_zero(&self) -> bool {
        self.grid.data().iter().all(|&v| v == 0.0)
    }

    /// Bilinear upsampling to `height × width` pixels.
    pub fn upsample(&self, height: usize, width: usize) -> Matrix {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
            self.grid.cols() as u32,
            self.grid.rows() as u32,
            self.grid.data().iter().map(|&v| v as f32).collect(),
        )
        .expect("grid buffer size");
        let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        Matrix::from_vec(height, width, out.into_raw().into_iter().map(|v| f64::from(v).clamp(0.0, 1.0)).collect())
    }

    /// Blends a red-yellow colour ramp of the upsampled map over `image`.
    pub fn overlay(&self, image: &ImageTensor, alpha: f32) -> ImageTensor {
        let (h, w) = (image.height(), image.width());
        let map = self.upsample(h, w);
        let mut out = image.clone();
        for y in 0..h {
            for x in 0..w {
                let v = map.get(y, x) as f32;
                let heat = [v.min(0.5) * 2.0, (v - 0.5).max(0.0) * 2.0, 0.15 * (1.0 - v)];
                let p = image.pixel(y, x);
                out.set_pixel(y, x, std::array::from_fn(|c| (1.0 - alpha) * p[c] + alpha * heat[c]));
            }
        }
        out
    }
}
