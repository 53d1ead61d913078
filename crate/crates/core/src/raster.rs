//! Silhouette rendering of the weak-perspective projected mesh.
//!
//! Pixel `(r, c)` covers `[c, c + 1) × [r, r + 1)` in image coordinates and is
//! sampled at its center `(c + 0.5, r + 0.5)`. Projected `u` is the column
//! axis and `v` the row axis.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{HamrError, Result};
use crate::model::Mesh;
use crate::pose::CameraParams;

/// Soft values are computed exactly up to this logit; beyond it the signed
/// distance is clamped (`sigmoid(±12)` is within 7e-6 of 0 or 1).
const CUTOFF_LOGIT: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

impl ImageSize {
    pub fn new(height: usize, width: usize) -> Self {
        ImageSize { height, width }
    }

    pub fn check(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(HamrError::invalid(format!("image size {}x{} must be positive", self.height, self.width)));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// `height × width` row-major mask with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Mask { height, width, data: vec![value; height * width] }
    }

    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Binary copy: 1 where the value is at least 0.5.
    pub fn threshold(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }
}

pub(crate) fn project_all(vertices: &[[f64; 3]], cam: &CameraParams) -> Vec<[f64; 2]> {
    vertices.iter().map(|p| cam.project_point(p)).collect()
}

#[inline]
fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn hypot2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Twice the signed area, or `None` for a (numerically) zero-area triangle.
fn oriented_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<f64> {
    let area = cross2(a, b, c);
    let scale = hypot2(a, b) * hypot2(a, c);
    if area == 0.0 || area.abs() <= 1e-12 * scale {
        None
    } else {
        Some(area)
    }
}

/// Inclusive range of pixel indices whose centers lie in `[lo, hi]`.
fn center_range(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(n as f64 - 1.0);
    if !(first <= last) {
        return None;
    }
    Some((first as usize, last as usize))
}

fn coverage(proj: &[[f64; 2]], faces: &[[usize; 3]], size: ImageSize) -> Vec<bool> {
    let mut covered = vec![false; size.pixels()];
    for f in faces {
        let (a, b, c) = (proj[f[0]], proj[f[1]], proj[f[2]]);
        let Some(area) = oriented_area(a, b, c) else { continue };
        let sign = area.signum();
        let xs = [a[0], b[0], c[0]];
        let ys = [a[1], b[1], c[1]];
        let fold = |v: [f64; 3], g: fn(f64, f64) -> f64| g(g(v[0], v[1]), v[2]);
        let (Some((c0, c1)), Some((r0, r1))) = (
            center_range(fold(xs, f64::min), fold(xs, f64::max), size.width),
            center_range(fold(ys, f64::min), fold(ys, f64::max), size.height),
        ) else {
            continue;
        };
        for r in r0..=r1 {
            for col in c0..=c1 {
                let i = r * size.width + col;
                if covered[i] {
                    continue;
                }
                let p = [col as f64 + 0.5, r as f64 + 0.5];
                if sign * cross2(a, b, p) >= 0.0 && sign * cross2(b, c, p) >= 0.0 && sign * cross2(c, a, p) >= 0.0 {
                    covered[i] = true;
                }
            }
        }
    }
    covered
}

/// Binary silhouette: a pixel is set iff its center lies inside (or on the
/// boundary of) any projected non-degenerate face.
pub fn rasterize_mask(mesh: &Mesh, cam: &CameraParams, size: ImageSize) -> Result<Mask> {
    cam.check()?;
    size.check()?;
    let proj = project_all(&mesh.vertices, cam);
    Ok(mask_from_projection(&proj, &mesh.faces, size))
}

pub(crate) fn mask_from_projection(proj: &[[f64; 2]], faces: &[[usize; 3]], size: ImageSize) -> Mask {
    let covered = coverage(proj, faces, size);
    Mask {
        height: size.height,
        width: size.width,
        data: covered.into_iter().map(|c| if c { 1.0 } else { 0.0 }).collect(),
    }
}

/// Closest edge of a pixel: endpoints, parameter along the edge, distance.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Witness {
    a: usize,
    b: usize,
    t: f64,
    dist: f64,
}

/// Soft silhouette plus, per pixel, the edge that determined its value.
pub(crate) struct SoftSilhouette {
    pub values: Vec<f64>,
    /// `+1` inside, `-1` outside.
    sign: Vec<f64>,
    witness: Vec<Option<Witness>>,
    sharpness: f64,
}

fn point_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    (hypot2(p, q), t)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SoftSilhouette {
    /// Signed distance is measured to the nearest contour edge: an edge between
    /// faces of opposite projected orientation, or with a single incident face.
    /// The silhouette boundary lies on contour edges, so for uncovered pixels
    /// this is also the distance to the nearest face.
    pub fn compute(proj: &[[f64; 2]], faces: &[[usize; 3]], size: ImageSize, sharpness: f64) -> Self {
        let covered = coverage(proj, faces, size);
        let cutoff = CUTOFF_LOGIT / sharpness;

        // undirected edge -> (incident faces, positive-orientation faces)
        let mut edges: HashMap<(usize, usize), (u32, u32)> = HashMap::new();
        for f in faces {
            let Some(area) = oriented_area(proj[f[0]], proj[f[1]], proj[f[2]]) else { continue };
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let entry = edges.entry((a.min(b), a.max(b))).or_insert((0, 0));
                entry.0 += 1;
                if area > 0.0 {
                    entry.1 += 1;
                }
            }
        }
        let mut edge_list: Vec<(usize, usize)> = edges
            .into_iter()
            .filter(|(_, (n, pos))| *n == 1 || (*pos != 0 && pos != n))
            .map(|(k, _)| k)
            .collect();
        // deterministic traversal regardless of hash order
        edge_list.sort_unstable();

        let mut best: Vec<Option<Witness>> = vec![None; size.pixels()];
        for &(a, b) in &edge_list {
            let (pa, pb) = (proj[a], proj[b]);
            let (Some((c0, c1)), Some((r0, r1))) = (
                center_range(pa[0].min(pb[0]) - cutoff, pa[0].max(pb[0]) + cutoff, size.width),
                center_range(pa[1].min(pb[1]) - cutoff, pa[1].max(pb[1]) + cutoff, size.height),
            ) else {
                continue;
            };
            for r in r0..=r1 {
                for col in c0..=c1 {
                    let i = r * size.width + col;
                    let (dist, t) = point_segment([col as f64 + 0.5, r as f64 + 0.5], pa, pb);
                    if dist < cutoff && best[i].map_or(true, |w| dist < w.dist) {
                        best[i] = Some(Witness { a, b, t, dist });
                    }
                }
            }
        }

        let sign: Vec<f64> = covered.iter().map(|&c| if c { 1.0 } else { -1.0 }).collect();
        let values = best
            .iter()
            .zip(&sign)
            .map(|(w, s)| sigmoid(sharpness * s * w.map_or(cutoff, |w| w.dist)))
            .collect();
        SoftSilhouette { values, sign, witness: best, sharpness }
    }

    /// L1 distance to `gt` (mean over pixels) and its gradient with respect to
    /// every projected vertex.
    pub fn l1_and_grad(&self, gt: &Mask, proj: &[[f64; 2]], num_vertices: usize) -> (f64, Vec<[f64; 2]>) {
        let n = self.values.len() as f64;
        let mut grad = vec![[0.0; 2]; num_vertices];
        let mut loss = 0.0;
        for (i, (&v, &g)) in self.values.iter().zip(&gt.data).enumerate() {
            loss += (v - g).abs();
            let Some(w) = self.witness[i] else { continue };
            if w.dist <= 0.0 {
                continue;
            }
            let width = gt.width;
            let p = [(i % width) as f64 + 0.5, (i / width) as f64 + 0.5];
            let (pa, pb) = (proj[w.a], proj[w.b]);
            let q = [pa[0] + w.t * (pb[0] - pa[0]), pa[1] + w.t * (pb[1] - pa[1])];
            // d dist / d q = (q - p) / dist; q moves with a by (1 - t), with b by t
            let dq = [(q[0] - p[0]) / w.dist, (q[1] - p[1]) / w.dist];
            let dloss_dv = if v > g { 1.0 } else { -1.0 } / n;
            let coef = dloss_dv * self.sharpness * v * (1.0 - v) * self.sign[i];
            for k in 0..2 {
                grad[w.a][k] += coef * (1.0 - w.t) * dq[k];
                grad[w.b][k] += coef * w.t * dq[k];
            }
        }
        (loss / n, grad)
    }
}

/// Soft silhouette `sigmoid(sharpness · signed distance)`, distances in pixels.
pub fn rasterize_soft(mesh: &Mesh, cam: &CameraParams, size: ImageSize, sharpness: f64) -> Result<Mask> {
    cam.check()?;
    size.check()?;
    if !(sharpness.is_finite() && sharpness > 0.0) {
        return Err(HamrError::invalid(format!("sharpness must be positive, got {sharpness}")));
    }
    let proj = project_all(&mesh.vertices, cam);
    let soft = SoftSilhouette::compute(&proj, &mesh.faces, size, sharpness);
    Ok(Mask { height: size.height, width: size.width, data: soft.values })
}

/// Intersection over union of two masks thresholded at 0.5; 1 when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(HamrError::invalid(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
