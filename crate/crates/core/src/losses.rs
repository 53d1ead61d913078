//! Terms of the fitting objective and their weighted sum.
//!
//! All terms are averages (over points, chains, pixels) so that the default
//! weights do not depend on image or heatmap resolution.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{HamrError, Result};
use crate::heatmap::Heatmaps;
use crate::math::{cross, dot, sub, V3};
use crate::pose::{CameraParams, Joints3D};
use crate::raster::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_3d: f64,
    pub lambda_2d: f64,
    pub lambda_geo: f64,
    pub lambda_cam: f64,
    pub lambda_ht: f64,
    pub lambda_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_3d: 1000.0,
            lambda_2d: 1.0,
            lambda_geo: 1.0,
            lambda_cam: 0.1,
            lambda_ht: 100.0,
            lambda_seg: 10.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { lambda_3d: 0.0, lambda_2d: 0.0, lambda_geo: 0.0, lambda_cam: 0.0, lambda_ht: 0.0, lambda_seg: 0.0 }
    }

    pub fn check(&self) -> Result<()> {
        let all = [self.lambda_3d, self.lambda_2d, self.lambda_geo, self.lambda_cam, self.lambda_ht, self.lambda_seg];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(HamrError::invalid(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l3d: f64,
    pub l2d: f64,
    pub geo: f64,
    pub cam: f64,
    pub ht: f64,
    pub seg: f64,
}

impl LossTerms {
    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("3d", self.l3d),
            ("2d", self.l2d),
            ("geo", self.geo),
            ("cam", self.cam),
            ("ht", self.ht),
            ("seg", self.seg),
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    pub total: f64,
}

/// Weighted sum of the six terms.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, value) in terms.named() {
        if !value.is_finite() {
            return Err(HamrError::InvalidState { term: name, value });
        }
    }
    let w = weights;
    let total = w.lambda_3d * terms.l3d
        + w.lambda_2d * terms.l2d
        + w.lambda_geo * terms.geo
        + w.lambda_cam * terms.cam
        + w.lambda_ht * terms.ht
        + w.lambda_seg * terms.seg;
    Ok(LossBreakdown { terms: *terms, total })
}

/// Mean squared distance over the available points; 0 when none is available.
pub fn loss_keypoints<const D: usize>(pred: &[[f64; D]], gt: &[[f64; D]], mask: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(HamrError::invalid(format!(
            "keypoint counts differ: {} predicted, {} annotated, {} mask entries",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    Ok(keypoints_generic(pred, gt, mask))
}

pub(crate) fn keypoints_generic<T: Real, const D: usize>(pred: &[[T; D]], gt: &[[f64; D]], mask: &[bool]) -> T {
    let mut sum = T::zero();
    let mut count = 0usize;
    for ((p, g), &m) in pred.iter().zip(gt).zip(mask) {
        if !m {
            continue;
        }
        for i in 0..D {
            sum += (p[i] - g[i]).powi2();
        }
        count += 1;
    }
    if count == 0 {
        T::zero()
    } else {
        sum / count as f64
    }
}

/// Coplanarity plus consistent-curl penalty, averaged over the finger chains.
///
/// Each chain is `[tip, dip, pip, mcp]` into the 21-point joint set.
pub fn loss_geo(joints: &Joints3D, chains: &[[usize; 4]]) -> f64 {
    geo_generic(&joints.points, chains)
}

pub(crate) fn geo_generic<T: Real>(joints: &[V3<T>], chains: &[[usize; 4]]) -> T {
    if chains.is_empty() {
        return T::zero();
    }
    let mut sum = T::zero();
    for &[a, b, c, d] in chains {
        let vab = sub(&joints[a], &joints[b]);
        let vbc = sub(&joints[b], &joints[c]);
        let vcd = sub(&joints[c], &joints[d]);
        let n1 = cross(&vab, &vbc);
        let n2 = cross(&vbc, &vcd);
        let planar = dot(&n1, &vcd);
        let curl = (-dot(&n1, &n2)).max0();
        sum += planar.powi2() + curl.powi2();
    }
    sum / chains.len() as f64
}

pub fn loss_cam(pred: &CameraParams, gt: &CameraParams) -> f64 {
    cam_generic(&[pred.s, pred.tx, pred.ty], gt)
}

pub(crate) fn cam_generic<T: Real>(pred: &[T; 3], gt: &CameraParams) -> T {
    (pred[0] - gt.s).powi2() + (pred[1] - gt.tx).powi2() + (pred[2] - gt.ty).powi2()
}

/// Mean absolute per-pixel difference.
pub fn loss_seg(rendered: &Mask, gt: &Mask) -> Result<f64> {
    if rendered.height != gt.height || rendered.width != gt.width {
        return Err(HamrError::invalid(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            rendered.height, rendered.width, gt.height, gt.width
        )));
    }
    let sum: f64 = rendered.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / rendered.data.len() as f64)
}

/// Mean squared per-pixel difference over all channels.
pub fn loss_heatmaps(pred: &Heatmaps, gt: &Heatmaps) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(HamrError::invalid(format!("heatmap shapes differ: {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let sum: f64 = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sum / pred.data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::heatmap::HeatmapConfig;

    fn rotate_z(p: &[f64; 3], a: f64) -> [f64; 3] {
        [a.cos() * p[0] - a.sin() * p[1], a.sin() * p[0] + a.cos() * p[1], p[2]]
    }

    #[test]
    fn keypoint_examples() {
        let gt = vec![[1.0, 2.0], [5.0, 5.0]];
        assert_eq!(loss_keypoints(&gt, &gt, &[true, true]).unwrap(), 0.0);
        let pred = vec![[4.0, 6.0], [0.0, 0.0]];
        assert_eq!(loss_keypoints(&pred, &gt, &[true, false]).unwrap(), 25.0);
        assert_eq!(loss_keypoints(&pred, &gt, &[false, false]).unwrap(), 0.0);
        assert!(loss_keypoints(&pred, &gt[..1], &[true]).is_err());
    }

    #[test]
    fn keypoints_match_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pred: Vec<[f64; 3]> = (0..21).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let gt: Vec<[f64; 3]> = (0..21).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let mask: Vec<bool> = (0..21).map(|_| rng.gen_bool(0.7)).collect();
            let mut total = 0.0;
            let mut n = 0.0;
            for i in 0..21 {
                if mask[i] {
                    let d = [pred[i][0] - gt[i][0], pred[i][1] - gt[i][1], pred[i][2] - gt[i][2]];
                    total += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    n += 1.0;
                }
            }
            let expect = if n > 0.0 { total / n } else { 0.0 };
            assert!((loss_keypoints(&pred, &gt, &mask).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn geo_collinear_and_consistent_curl_are_zero() {
        let line = Joints3D::new(vec![[3.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(loss_geo(&line, &[[0, 1, 2, 3]]), 0.0);
        let curl = Joints3D::new(vec![[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(loss_geo(&curl, &[[0, 1, 2, 3]]), 0.0);
    }

    #[test]
    fn geo_zigzag_matches_hand_computation() {
        // V_ab = (1,1,0), V_bc = (1,-1,0), V_cd = (1,1,0)
        // V_ab x V_bc = (0,0,-2), V_bc x V_cd = (0,0,2), dot = -4, hinge^2 = 16
        let zig = Joints3D::new(vec![[2.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]]);
        assert_eq!(loss_geo(&zig, &[[0, 1, 2, 3]]), 16.0);
        // averaged with a zero chain
        let mut pts = zig.points.clone();
        pts.extend([[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(loss_geo(&Joints3D::new(pts), &[[0, 1, 2, 3], [4, 5, 6, 7]]), 8.0);
    }

    #[test]
    fn geo_coplanarity_term() {
        // V_ab = (1,0,0), V_bc = (0,1,0), V_cd = (0,0,1): triple product 1, curl dot 0
        let j = Joints3D::new(vec![[1.0, 1.0, 1.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]);
        assert_eq!(loss_geo(&j, &[[0, 1, 2, 3]]), 1.0);
    }

    #[test]
    fn cam_examples() {
        let a = CameraParams::new(10.0, 0.5, -0.5);
        assert_eq!(loss_cam(&a, &a), 0.0);
        assert_eq!(loss_cam(&CameraParams::new(12.0, 0.5, -0.5), &a), 4.0);
        let b = CameraParams::new(9.0, 0.1, 0.2);
        let expect = (10.0f64 - 9.0).powi(2) + (0.5f64 - 0.1).powi(2) + (-0.5f64 - 0.2).powi(2);
        assert!((loss_cam(&a, &b) - expect).abs() < 1e-15);
    }

    #[test]
    fn seg_examples() {
        let ones = Mask::filled(4, 6, 1.0);
        let zeros = Mask::filled(4, 6, 0.0);
        assert_eq!(loss_seg(&ones, &ones).unwrap(), 0.0);
        assert_eq!(loss_seg(&ones, &zeros).unwrap(), 1.0);
        let mut half = ones.clone();
        for v in half.data.iter_mut().step_by(2) {
            *v = 0.0;
        }
        assert_eq!(loss_seg(&half, &ones).unwrap(), 0.5);
        assert!(loss_seg(&ones, &Mask::filled(6, 4, 1.0)).is_err());
    }

    #[test]
    fn heatmap_examples() {
        let cfg = HeatmapConfig { resolution: 8, sigma2: 2.5 };
        let a = Heatmaps::zeros(3, &cfg);
        assert_eq!(loss_heatmaps(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v += 0.1);
        assert!((loss_heatmaps(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!(loss_heatmaps(&a, &Heatmaps::zeros(2, &cfg)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = a.clone();
        c.data.iter_mut().for_each(|v| *v = rng.gen());
        let mut d = a.clone();
        d.data.iter_mut().for_each(|v| *v = rng.gen());
        let mut sum = 0.0;
        for ch in 0..3 {
            for r in 0..8 {
                for col in 0..8 {
                    let i = (ch * 8 + r) * 8 + col;
                    sum += (c.data[i] - d.data[i]) * (c.data[i] - d.data[i]);
                }
            }
        }
        assert!((loss_heatmaps(&c, &d).unwrap() - sum / 192.0).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let unit = LossTerms { l3d: 1.0, l2d: 1.0, geo: 1.0, cam: 1.0, ht: 1.0, seg: 1.0 };
        assert_eq!(total_loss(&unit, &LossWeights::zero()).unwrap().total, 0.0);
        let w = LossWeights { lambda_2d: 1.0, ..LossWeights::zero() };
        let t = LossTerms { l2d: 25.0, ..LossTerms::default() };
        assert_eq!(total_loss(&t, &w).unwrap().total, 25.0);
        let total = total_loss(&unit, &LossWeights::default()).unwrap().total;
        assert!((total - 1112.1).abs() < 1e-9);
        let bad = LossTerms { seg: f64::NAN, ..LossTerms::default() };
        match total_loss(&bad, &LossWeights::default()) {
            Err(HamrError::InvalidState { term, .. }) => assert_eq!(term, "seg"),
            other => panic!("expected invalid state, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn geo_invariant_under_rigid_motion(seed in 0u64..500, angle in -3.0f64..3.0,
                                            tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 3]> = (0..4).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            let moved: Vec<[f64; 3]> = pts.iter().map(|p| {
                let r = rotate_z(p, angle);
                [r[0] + tx, r[1] + ty, r[2] + tz]
            }).collect();
            let a = loss_geo(&Joints3D::new(pts), &[[0, 1, 2, 3]]);
            let b = loss_geo(&Joints3D::new(moved), &[[0, 1, 2, 3]]);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn coplanarity_term_is_degree_six(seed in 0u64..500, c in 0.2f64..3.0) {
            // a consistently curled but twisted chain keeps the curl term at zero
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lift = rng.gen_range(0.1..1.0);
            let pts = vec![[1.0, 1.0, lift], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
            let scaled: Vec<[f64; 3]> = pts.iter().map(|p| [c * p[0], c * p[1], c * p[2]]).collect();
            let a = loss_geo(&Joints3D::new(pts), &[[0, 1, 2, 3]]);
            let b = loss_geo(&Joints3D::new(scaled), &[[0, 1, 2, 3]]);
            prop_assert!(a > 0.0);
            prop_assert!((b - c.powi(6) * a).abs() <= 1e-9 * b.abs().max(1e-12));
        }

        #[test]
        fn total_is_linear_in_each_weight(w in 0.0f64..1e3, k in 0.0f64..10.0, which in 0usize..6) {
            let terms = LossTerms { l3d: 0.3, l2d: 2.0, geo: 0.01, cam: 4.0, ht: 0.2, seg: 0.7 };
            let mut a = LossWeights::default();
            let mut b = LossWeights::default();
            let set = |ws: &mut LossWeights, v: f64| match which {
                0 => ws.lambda_3d = v,
                1 => ws.lambda_2d = v,
                2 => ws.lambda_geo = v,
                3 => ws.lambda_cam = v,
                4 => ws.lambda_ht = v,
                _ => ws.lambda_seg = v,
            };
            set(&mut a, w);
            set(&mut b, w + k);
            let term = terms.named()[which].1;
            let da = total_loss(&terms, &b).unwrap().total - total_loss(&terms, &a).unwrap().total;
            prop_assert!((da - k * term).abs() < 1e-9);
        }
    }
}
