//! Gaussian keypoint heatmaps.
//!
//! Heatmap pixel `(r, c)` has its center at `(c + 0.5, r + 0.5)` in heatmap
//! units; image coordinates map to heatmap coordinates by the ratio of sizes.

use serde::{Deserialize, Serialize};

use crate::error::{HamrError, Result};
use crate::pose::Keypoints2D;
use crate::raster::ImageSize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    /// Square heatmap side in pixels.
    pub resolution: usize,
    /// Gaussian variance in heatmap pixels².
    pub sigma2: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig { resolution: 64, sigma2: 2.5 }
    }
}

impl HeatmapConfig {
    pub fn check(&self) -> Result<()> {
        if self.resolution == 0 || !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(HamrError::invalid(format!("invalid heatmap config {self:?}")));
        }
        Ok(())
    }
}

/// `channels × height × width`, row-major per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmaps {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub sigma2: f64,
    pub data: Vec<f64>,
}

impl Heatmaps {
    pub fn zeros(channels: usize, cfg: &HeatmapConfig) -> Self {
        let r = cfg.resolution;
        Heatmaps { channels, height: r, width: r, sigma2: cfg.sigma2, data: vec![0.0; channels * r * r] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn at(&self, k: usize, row: usize, col: usize) -> f64 {
        self.data[(k * self.height + row) * self.width + col]
    }
}

fn inside_image(p: [f64; 2], image: ImageSize) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= image.width as f64 && p[1] <= image.height as f64
}

/// Value of a unit-amplitude Gaussian centered at `center` (heatmap units) at
/// every pixel, written into `out` (row-major `res × res`).
fn splat(center: [f64; 2], res: usize, sigma2: f64, out: &mut [f64]) {
    let inv = -0.5 / sigma2;
    for r in 0..res {
        let dy = center[1] - (r as f64 + 0.5);
        let dy2 = dy * dy;
        for c in 0..res {
            let dx = center[0] - (c as f64 + 0.5);
            out[r * res + c] = ((dx * dx + dy2) * inv).exp();
        }
    }
}

/// One Gaussian channel per keypoint; hidden or out-of-image keypoints give a
/// zero channel.
pub fn render_heatmaps(keypoints: &Keypoints2D, image: ImageSize, cfg: &HeatmapConfig) -> Result<Heatmaps> {
    cfg.check()?;
    image.check()?;
    let mut hm = Heatmaps::zeros(keypoints.len(), cfg);
    let res = cfg.resolution;
    let (sx, sy) = (res as f64 / image.width as f64, res as f64 / image.height as f64);
    for (k, (p, &vis)) in keypoints.points.iter().zip(&keypoints.visible).enumerate() {
        if !vis || !inside_image(*p, image) {
            continue;
        }
        splat([p[0] * sx, p[1] * sy], res, cfg.sigma2, &mut hm.data[k * res * res..(k + 1) * res * res]);
    }
    Ok(hm)
}

/// Argmax decoding. Ties go to the smallest row-major index; an all-zero
/// channel decodes to a hidden keypoint.
pub fn decode_heatmaps(hm: &Heatmaps, image: ImageSize) -> Keypoints2D {
    let mut points = Vec::with_capacity(hm.channels);
    let mut visible = Vec::with_capacity(hm.channels);
    for k in 0..hm.channels {
        let ch = hm.channel(k);
        let mut best = 0;
        for (i, &v) in ch.iter().enumerate() {
            if v > ch[best] {
                best = i;
            }
        }
        if ch.is_empty() || ch[best] <= 0.0 {
            points.push([0.0, 0.0]);
            visible.push(false);
            continue;
        }
        let (row, col) = (best / hm.width, best % hm.width);
        points.push([
            (col as f64 + 0.5) * image.width as f64 / hm.width as f64,
            (row as f64 + 0.5) * image.height as f64 / hm.height as f64,
        ]);
        visible.push(true);
    }
    Keypoints2D { points, visible }
}

/// Mean squared difference between heatmaps rendered at `pred` and the
/// precomputed `gt` stack over channels where `mask` is set, with its gradient
/// with respect to each predicted point (image units). The Gaussian is
/// evaluated as a product of row and column factors.
pub(crate) fn heatmap_loss_and_grad(pred: &[[f64; 2]], mask: &[bool], gt: &Heatmaps, image: ImageSize) -> (f64, Vec<[f64; 2]>) {
    let res = gt.width;
    let n = res * res;
    let (sx, sy) = (res as f64 / image.width as f64, res as f64 / image.height as f64);
    let inv = 0.5 / gt.sigma2;
    let mut grad = vec![[0.0; 2]; pred.len()];
    let (mut ex, mut ey) = (vec![0.0; res], vec![0.0; res]);
    let (mut dx, mut dy) = (vec![0.0; res], vec![0.0; res]);
    let mut sum = 0.0;
    let mut channels = 0usize;
    for (k, (p, &m)) in pred.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        channels += 1;
        let target = gt.channel(k);
        if !inside_image(*p, image) {
            sum += target.iter().map(|b| b * b).sum::<f64>();
            continue;
        }
        let (hx, hy) = (p[0] * sx, p[1] * sy);
        for i in 0..res {
            let c = i as f64 + 0.5;
            dx[i] = hx - c;
            dy[i] = hy - c;
            ex[i] = (-dx[i] * dx[i] * inv).exp();
            ey[i] = (-dy[i] * dy[i] * inv).exp();
        }
        let (mut gx, mut gy) = (0.0, 0.0);
        for r in 0..res {
            let row = &target[r * res..(r + 1) * res];
            for c in 0..res {
                let v = ey[r] * ex[c];
                let e = v - row[c];
                sum += e * e;
                let w = e * v;
                gx += w * dx[c];
                gy += w * dy[r];
            }
        }
        // d/dh of exp(-d²/(2σ²)) is -d/σ² times the value
        grad[k] = [-4.0 * inv * gx * sx, -4.0 * inv * gy * sy];
    }
    if channels == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / (channels * n) as f64;
    grad.iter_mut().flatten().for_each(|g| *g *= scale);
    (sum * scale, grad)
}
