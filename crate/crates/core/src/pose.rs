//! Derived pose representations: 3D joints regressed from the mesh, their
//! weak-perspective projection, and camera estimation from paired annotations.
//!
//! Joint ordering is fixed: the model's 16 joints (wrist, then thumb, index,
//! middle, ring and pinky, each base to tip) followed by the five fingertips
//! from thumb to pinky.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{HamrError, Result};
use crate::model::{HandModel, Mesh, Rig};

#[derive(Clone, Debug, PartialEq)]
pub struct Joints3D {
    pub points: Vec<[f64; 3]>,
    /// Per-point availability; unavailable points are ignored by losses.
    pub visible: Vec<bool>,
}

impl Joints3D {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        let visible = vec![true; points.len()];
        Joints3D { points, visible }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoints2D {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl Keypoints2D {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let visible = vec![true; points.len()];
        Keypoints2D { points, visible }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Weak-perspective camera: `(x, y, z) -> (s (x + tx), s (y + ty))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub s: f64,
    pub tx: f64,
    pub ty: f64,
}

impl CameraParams {
    pub fn new(s: f64, tx: f64, ty: f64) -> Self {
        CameraParams { s, tx, ty }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.s.is_finite() && self.s > 0.0) || !self.tx.is_finite() || !self.ty.is_finite() {
            return Err(HamrError::invalid(format!("invalid camera {self:?}: scale must be positive")));
        }
        Ok(())
    }

    pub fn project_point(&self, p: &[f64; 3]) -> [f64; 2] {
        project_generic(p, &[self.s, self.tx, self.ty])
    }
}

#[inline]
pub(crate) fn project_generic<T: Real>(p: &[T; 3], cam: &[T; 3]) -> [T; 2] {
    [cam[0] * (p[0] + cam[1]), cam[0] * (p[1] + cam[2])]
}

/// Joint positions: `𝒥ᵀ · vertices` for the model joints, then the fingertip vertices.
pub fn regress_joints(model: &HandModel, mesh: &Mesh) -> Result<Joints3D> {
    if mesh.vertices.len() != model.num_vertices() {
        return Err(HamrError::invalid(format!(
            "mesh has {} vertices, model expects {}",
            mesh.vertices.len(),
            model.num_vertices()
        )));
    }
    let rig = Rig::new(model)?;
    Ok(Joints3D::new(rig.regress(&mesh.vertices)))
}

pub fn project(points: &Joints3D, cam: &CameraParams) -> Result<Keypoints2D> {
    cam.check()?;
    Ok(Keypoints2D {
        points: points.points.iter().map(|p| cam.project_point(p)).collect(),
        visible: points.visible.clone(),
    })
}

/// Which 3D bone length the scale estimate compares against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoneLength {
    /// Length of the bone's xy components; exact under weak perspective.
    #[default]
    Planar,
    /// Full 3D length.
    Full,
}

/// Camera from paired annotations: `s` is the ratio of mean 2D to mean 3D bone
/// length, `(tx, ty)` the mean of `(u, v) / s − (x, y)`.
pub fn camera_from_pairs(joints3d: &Joints3D, keypoints2d: &Keypoints2D, edges: &[[usize; 2]]) -> Result<CameraParams> {
    camera_from_pairs_with(joints3d, keypoints2d, edges, BoneLength::Planar)
}

pub fn camera_from_pairs_with(
    joints3d: &Joints3D,
    keypoints2d: &Keypoints2D,
    edges: &[[usize; 2]],
    bone: BoneLength,
) -> Result<CameraParams> {
    let n = joints3d.len();
    if keypoints2d.len() != n {
        return Err(HamrError::invalid(format!("{n} 3D points paired with {} 2D points", keypoints2d.len())));
    }
    let both = |i: usize| joints3d.visible[i] && keypoints2d.visible[i];
    let (mut len2, mut len3, mut count) = (0.0, 0.0, 0usize);
    for &[a, b] in edges {
        if a >= n || b >= n {
            return Err(HamrError::invalid(format!("bone ({a}, {b}) out of range")));
        }
        if !(both(a) && both(b)) {
            continue;
        }
        let (p, q) = (joints3d.points[a], joints3d.points[b]);
        let (u, v) = (keypoints2d.points[a], keypoints2d.points[b]);
        len2 += ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2)).sqrt();
        let planar = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        len3 += match bone {
            BoneLength::Planar => planar.sqrt(),
            BoneLength::Full => (planar + (p[2] - q[2]).powi(2)).sqrt(),
        };
        count += 1;
    }
    if count == 0 || len3 <= 0.0 {
        return Err(HamrError::Degenerate("mean 3D bone length is zero".into()));
    }
    // the counts cancel in the ratio of means
    let s = len2 / len3;
    if !(s.is_finite() && s > 0.0) {
        return Err(HamrError::Degenerate(format!("camera scale {s} is not positive")));
    }
    let (mut tx, mut ty, mut m) = (0.0, 0.0, 0usize);
    for i in (0..n).filter(|&i| both(i)) {
        tx += keypoints2d.points[i][0] / s - joints3d.points[i][0];
        ty += keypoints2d.points[i][1] / s - joints3d.points[i][1];
        m += 1;
    }
    Ok(CameraParams { s, tx: tx / m as f64, ty: ty / m as f64 })
}
