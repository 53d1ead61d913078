//! Synthetic annotated samples drawn around the rest pose.
//!
//! Finger flexion is generated the way real fingers bend: the two distal
//! joints of every non-thumb finger rotate by nonnegative angles about one
//! hinge axis, so the generated chains are planar with a consistent curl.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HamrError, Result};
use crate::fitter::{ParamState, Sample};
use crate::math::{cross, sub};
use crate::model::{lbs_forward, rest_joints, HandModel, ShapeParams, NUM_SHAPE};
use crate::pose::{project, regress_joints, CameraParams};
use crate::raster::{rasterize_mask, ImageSize};

/// Shape coefficients are drawn from `[-BETA_SPREAD * perturb, BETA_SPREAD * perturb]`.
pub const BETA_SPREAD: f64 = 2.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: ImageSize,
    /// Largest per-component pose deviation from the rest pose, radians.
    pub perturb: f64,
    /// Fraction of the shorter image side covered by the hand's larger extent.
    pub fill: f64,
    pub with_keypoints2d: bool,
    pub with_joints3d: bool,
    pub with_mask: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: ImageSize::new(128, 128),
            perturb: 0.4,
            fill: 0.6,
            with_keypoints2d: true,
            with_joints3d: true,
            with_mask: true,
        }
    }
}

impl SynthConfig {
    pub fn check(&self) -> Result<()> {
        self.image_size.check()?;
        if !(self.perturb.is_finite() && self.perturb >= 0.0) {
            return Err(HamrError::invalid(format!("perturb must be nonnegative, got {}", self.perturb)));
        }
        if !(self.fill > 0.0 && self.fill <= 1.0) {
            return Err(HamrError::invalid(format!("fill must be in (0, 1], got {}", self.fill)));
        }
        Ok(())
    }
}

/// A generated sample and the parameters that produced it.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub sample: Sample,
    pub truth: ParamState,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 1e-12).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

/// Draws a shape and pose, then fits a camera that frames the hand.
pub fn synth_sample(model: &HandModel, rng: &mut impl Rng, id: String, cfg: &SynthConfig) -> Result<SynthSample> {
    cfg.check()?;
    let p = cfg.perturb;
    let beta = ShapeParams {
        beta: (0..NUM_SHAPE)
            .map(|_| uniform(rng, -BETA_SPREAD * p, BETA_SPREAD * p))
            .collect(),
    };
    let mut theta = model.rest_pose_params();

    let hinged: Vec<[usize; 4]> = model.finger_chains.clone();
    let mut is_hinged = vec![false; model.num_joints()];
    for c in &hinged {
        for &j in &c[1..3] {
            if j < is_hinged.len() {
                is_hinged[j] = true;
            }
        }
    }
    for (k, t) in theta.theta.iter_mut().enumerate() {
        if !is_hinged[k] {
            for c in t.iter_mut() {
                *c += uniform(rng, -p, p);
            }
        }
    }
    // distal joints of each chain: [tip, dip, pip, mcp] bend about the hinge
    let rest = rest_joints(model, &beta)?;
    let palm_normal = [0.0, 0.0, 1.0];
    for c in &hinged {
        let (dip, pip, mcp) = (c[1], c[2], c[3]);
        if dip >= model.num_joints() || pip >= model.num_joints() {
            continue;
        }
        let dir = sub(&rest[pip], &rest[mcp]);
        let Some(axis) = normalize(cross(&dir, &palm_normal)) else { continue };
        for j in [pip, dip] {
            let angle = uniform(rng, 0.0, p);
            for a in 0..3 {
                theta.theta[j][a] += angle * axis[a];
            }
        }
    }

    let mesh = lbs_forward(model, &beta, &theta)?;
    let (lo, hi) = mesh.bounds();
    let (w, h) = (cfg.image_size.width as f64, cfg.image_size.height as f64);
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let s = cfg.fill * w.min(h) / extent;
    let cam = CameraParams::new(s, w / (2.0 * s) - 0.5 * (lo[0] + hi[0]), h / (2.0 * s) - 0.5 * (lo[1] + hi[1]));

    let j3 = regress_joints(model, &mesh)?;
    let kp = project(&j3, &cam)?;
    let mask = if cfg.with_mask { Some(rasterize_mask(&mesh, &cam, cfg.image_size)?) } else { None };
    let sample = Sample {
        id,
        image_size: cfg.image_size,
        keypoints2d: cfg.with_keypoints2d.then_some(kp),
        joints3d: cfg.with_joints3d.then_some(j3),
        mask,
        gt_cam: Some(cam),
    };
    Ok(SynthSample { sample, truth: ParamState { beta, theta, cam } })
}

/// `count` samples from one seed; ids are `synth-0000`, `synth-0001`, ...
pub fn synth_dataset(model: &HandModel, count: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| synth_sample(model, &mut rng, format!("synth-{i:04}"), cfg)).collect()
}
