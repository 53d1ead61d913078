//! Recovery of shape, pose and camera from annotations by staged descent on
//! the weighted loss.
//!
//! Parameters are flattened as `[beta (10), theta (3K), s, tx, ty]`. Gradients
//! of the smooth terms come from forward-mode dual numbers; the silhouette term
//! uses the rasterizer's analytic per-vertex gradient chained through the same
//! dual evaluation of the skinned, projected vertices.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient, Real};
use crate::error::{HamrError, Result};
use crate::heatmap::{heatmap_loss_and_grad, render_heatmaps, HeatmapConfig, Heatmaps};
use crate::losses::{cam_generic, geo_generic, keypoints_generic, total_loss, LossBreakdown, LossTerms, LossWeights};
use crate::math::V3;
use crate::model::{HandModel, Mesh, PoseParams, Rig, ShapeParams, NUM_SHAPE};
use crate::pose::{camera_from_pairs, project_generic, CameraParams, Joints3D, Keypoints2D};
use crate::raster::{ImageSize, Mask, SoftSilhouette};

/// Shape coefficients are kept inside `[-BETA_LIMIT, BETA_LIMIT]`.
pub const BETA_LIMIT: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub beta: ShapeParams,
    pub theta: PoseParams,
    pub cam: CameraParams,
}

impl ParamState {
    pub fn rest(model: &HandModel, cam: CameraParams) -> Self {
        ParamState { beta: ShapeParams::zeros(), theta: model.rest_pose_params(), cam }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut x = self.beta.beta.clone();
        x.extend(self.theta.theta.iter().flatten());
        x.extend([self.cam.s, self.cam.tx, self.cam.ty]);
        x
    }

    pub fn from_vec(model: &HandModel, x: &[f64]) -> Result<Self> {
        if x.len() != model.param_dim() {
            return Err(HamrError::invalid(format!("parameter vector has {} entries, expected {}", x.len(), model.param_dim())));
        }
        let k = model.num_joints();
        let c = NUM_SHAPE + 3 * k;
        Ok(ParamState {
            beta: ShapeParams { beta: x[..NUM_SHAPE].to_vec() },
            theta: PoseParams { theta: x[NUM_SHAPE..c].chunks_exact(3).map(|w| [w[0], w[1], w[2]]).collect() },
            cam: CameraParams::new(x[c], x[c + 1], x[c + 2]),
        })
    }
}

/// One annotated datum. At least one of 2D keypoints, 3D joints or a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image_size: ImageSize,
    pub keypoints2d: Option<Keypoints2D>,
    pub joints3d: Option<Joints3D>,
    pub mask: Option<Mask>,
    pub gt_cam: Option<CameraParams>,
}

impl Sample {
    pub fn check(&self, model: &HandModel) -> Result<()> {
        self.image_size.check()?;
        if self.keypoints2d.is_none() && self.joints3d.is_none() && self.mask.is_none() {
            return Err(HamrError::invalid(format!("sample `{}` has no annotation", self.id)));
        }
        let n = model.num_points();
        if let Some(kp) = &self.keypoints2d {
            if kp.len() != n || kp.visible.len() != n {
                return Err(HamrError::invalid(format!("sample `{}`: expected {n} 2D keypoints", self.id)));
            }
        }
        if let Some(j) = &self.joints3d {
            if j.len() != n || j.visible.len() != n {
                return Err(HamrError::invalid(format!("sample `{}`: expected {n} 3D joints", self.id)));
            }
        }
        if let Some(m) = &self.mask {
            if m.data.len() != m.height * m.width || m.data.is_empty() {
                return Err(HamrError::invalid(format!("sample `{}`: malformed mask", self.id)));
            }
        }
        if let Some(c) = &self.gt_cam {
            c.check()?;
        }
        Ok(())
    }
}

/// Which parameters a stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Camera plus the root (global) rotation.
    CameraAndRoot,
    All,
}

/// Which loss a stage minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLoss {
    /// 2D keypoint term only, at the 2D weight.
    Keypoints2d,
    /// All weighted terms.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Limited-memory BFGS direction.
    Lbfgs,
    /// Negative gradient.
    Steepest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    pub params: ParamGroup,
    pub loss: StageLoss,
    pub max_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub stages: Vec<Stage>,
    pub step_rule: StepRule,
    pub lbfgs_memory: usize,
    /// Stop when the gradient norm over active parameters drops below this.
    pub grad_tol: f64,
    /// Stop when an accepted step improves the objective by less than this fraction.
    pub rel_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub heatmap: HeatmapConfig,
    /// Soft silhouette sharpness, per mask pixel.
    pub sharpness: f64,
    /// Rotation magnitudes above `rotation_limit` radians are penalized.
    pub rotation_limit: f64,
    pub rotation_penalty: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            stages: vec![
                Stage { name: "camera".into(), params: ParamGroup::CameraAndRoot, loss: StageLoss::Keypoints2d, max_iters: 200 },
                Stage { name: "full".into(), params: ParamGroup::All, loss: StageLoss::Full, max_iters: 2000 },
            ],
            step_rule: StepRule::Lbfgs,
            lbfgs_memory: 10,
            grad_tol: 1e-8,
            rel_tol: 1e-10,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 60,
            heatmap: HeatmapConfig::default(),
            sharpness: 4.0,
            rotation_limit: 0.9 * std::f64::consts::PI,
            rotation_penalty: 100.0,
        }
    }
}

impl Schedule {
    /// No stages: `fit` returns the initial state.
    pub fn empty() -> Self {
        Schedule { stages: Vec::new(), ..Schedule::default() }
    }

    pub fn check(&self) -> Result<()> {
        self.heatmap.check()?;
        let positive = [self.sharpness, self.backtrack_factor, self.armijo_c, self.rotation_limit];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.backtrack_factor >= 1.0 || self.armijo_c >= 1.0 {
            return Err(HamrError::invalid("schedule step constants out of range"));
        }
        if !(self.grad_tol >= 0.0 && self.rel_tol >= 0.0 && self.rotation_penalty >= 0.0) {
            return Err(HamrError::invalid("schedule tolerances must be nonnegative"));
        }
        Ok(())
    }
}

/// One accepted (or initial) state of a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: usize,
    pub iteration: usize,
    pub breakdown: LossBreakdown,
    pub penalty: f64,
    /// `breakdown.total + penalty`, the quantity the stage minimizes.
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    RelativeImprovement,
    IterationCap,
    LineSearchFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub name: String,
    pub iterations: usize,
    pub termination: Termination,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub state: ParamState,
    pub mesh: Mesh,
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub converged: bool,
    pub stages: Vec<StageOutcome>,
}

/// Breakdown, penalty and gradient at one state.
#[derive(Clone, Debug)]
pub struct LossAndGrad {
    pub breakdown: LossBreakdown,
    pub penalty: f64,
    pub objective: f64,
    pub gradient: Vec<f64>,
}

/// Starting point: mean shape, rest pose, and a camera from the annotations.
pub fn init_params(model: &HandModel, sample: &Sample) -> Result<ParamState> {
    sample.check(model)?;
    let rig = Rig::new(model)?;
    let zero = vec![0.0; NUM_SHAPE];
    let rest_points = rig.regress(&model.template_vertices);

    if let (Some(kp), Some(j3)) = (&sample.keypoints2d, &sample.joints3d) {
        if let Ok(cam) = camera_from_pairs(j3, kp, &model.skeleton_edges) {
            return Ok(ParamState::rest(model, cam));
        }
    }
    let _ = zero;

    let (lo, hi) = Mesh { vertices: model.template_vertices.clone(), faces: Vec::new() }.bounds();
    let img = sample.image_size;
    let fallback_s = img.width as f64 / (hi[0] - lo[0]);
    let mut cam = CameraParams::new(
        fallback_s,
        img.width as f64 / (2.0 * fallback_s) - 0.5 * (lo[0] + hi[0]),
        img.height as f64 / (2.0 * fallback_s) - 0.5 * (lo[1] + hi[1]),
    );
    if let Some(kp) = &sample.keypoints2d {
        let vis: Vec<usize> = (0..kp.len()).filter(|&i| kp.visible[i]).collect();
        if !vis.is_empty() {
            let diag = |pts: &mut dyn Iterator<Item = [f64; 2]>| {
                let (mut a, mut b) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
                for p in pts {
                    for i in 0..2 {
                        a[i] = a[i].min(p[i]);
                        b[i] = b[i].max(p[i]);
                    }
                }
                ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
            };
            let d2 = diag(&mut vis.iter().map(|&i| kp.points[i]));
            let d3 = diag(&mut vis.iter().map(|&i| [rest_points[i][0], rest_points[i][1]]));
            let s = if d2 > 0.0 && d3 > 0.0 { d2 / d3 } else { cam.s };
            let m = vis.len() as f64;
            let tx = vis.iter().map(|&i| kp.points[i][0] / s - rest_points[i][0]).sum::<f64>() / m;
            let ty = vis.iter().map(|&i| kp.points[i][1] / s - rest_points[i][1]).sum::<f64>() / m;
            cam = CameraParams::new(s, tx, ty);
        }
    }
    Ok(ParamState::rest(model, cam))
}

/// Smooth-term values for one parameter vector.
struct Smooth<T> {
    l3d: T,
    l2d: T,
    geo: T,
    cam: T,
    penalty: T,
}

/// Evaluated objective at one `f64` state.
struct Eval {
    breakdown: LossBreakdown,
    penalty: f64,
    objective: f64,
    /// Heatmap-term gradient with respect to each projected joint.
    ht_grad: Option<Vec<[f64; 2]>>,
    /// Silhouette gradient with respect to each vertex's projected (u, v).
    seg_grad: Option<Vec<[f64; 2]>>,
}

struct Objective<'a> {
    rig: Rig<'a>,
    sample: &'a Sample,
    weights: LossWeights,
    schedule: &'a Schedule,
    support: Vec<usize>,
    gt_heatmaps: Option<Heatmaps>,
    /// Image-to-mask pixel scale.
    mask_scale: [f64; 2],
}

impl<'a> Objective<'a> {
    fn new(model: &'a HandModel, sample: &'a Sample, weights: LossWeights, schedule: &'a Schedule) -> Result<Self> {
        weights.check()?;
        schedule.check()?;
        sample.check(model)?;
        let rig = Rig::new(model)?;
        let support = rig.joint_support();
        let gt_heatmaps = match &sample.keypoints2d {
            Some(kp) if weights.lambda_ht > 0.0 => Some(render_heatmaps(kp, sample.image_size, &schedule.heatmap)?),
            _ => None,
        };
        let mask_scale = match &sample.mask {
            Some(m) => [m.width as f64 / sample.image_size.width as f64, m.height as f64 / sample.image_size.height as f64],
            None => [1.0, 1.0],
        };
        Ok(Objective { rig, sample, weights, schedule, support, gt_heatmaps, mask_scale })
    }

    fn uses_seg(&self) -> bool {
        self.sample.mask.is_some() && self.weights.lambda_seg > 0.0
    }

    fn dims(&self) -> (usize, usize) {
        let k = self.rig.num_joints();
        (NUM_SHAPE + 3 * k, NUM_SHAPE + 3 * k + 3)
    }

    /// Skinned vertices; only the joint support unless `all` is set.
    fn posed<T: Real>(&self, x: &[T], all: bool) -> Vec<V3<T>> {
        let (c, _) = self.dims();
        let (beta, theta) = (&x[..NUM_SHAPE], &x[NUM_SHAPE..c]);
        let joints = self.rig.rest_joints(beta);
        let transforms = self.rig.transforms(theta, &joints);
        let features = self.rig.pose_features(theta);
        let n = self.rig.model.num_vertices();
        let mut posed = vec![[T::zero(); 3]; n];
        if all {
            for (v, p) in posed.iter_mut().enumerate() {
                *p = self.rig.posed_vertex(beta, &features, &transforms, v);
            }
        } else {
            for &v in &self.support {
                posed[v] = self.rig.posed_vertex(beta, &features, &transforms, v);
            }
        }
        posed
    }

    fn smooth<T: Real>(&self, x: &[T], joints: &[V3<T>]) -> Smooth<T> {
        let (c, _) = self.dims();
        let cam = [x[c], x[c + 1], x[c + 2]];
        let w = &self.weights;
        let mut out = Smooth { l3d: T::zero(), l2d: T::zero(), geo: T::zero(), cam: T::zero(), penalty: T::zero() };
        if let Some(gt) = &self.sample.joints3d {
            if w.lambda_3d > 0.0 {
                out.l3d = keypoints_generic(joints, &gt.points, &gt.visible);
            }
        }
        if let Some(gt) = &self.sample.keypoints2d {
            if w.lambda_2d > 0.0 {
                let proj: Vec<[T; 2]> = joints.iter().map(|p| project_generic(p, &cam)).collect();
                out.l2d = keypoints_generic(&proj, &gt.points, &gt.visible);
            }
        }
        if w.lambda_geo > 0.0 {
            out.geo = geo_generic(joints, &self.rig.model.finger_chains);
        }
        if let Some(gt) = &self.sample.gt_cam {
            if w.lambda_cam > 0.0 {
                out.cam = cam_generic(&cam, gt);
            }
        }
        let limit2 = self.schedule.rotation_limit * self.schedule.rotation_limit;
        for r in x[NUM_SHAPE..c].chunks_exact(3) {
            let n2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
            if n2.re() > limit2 {
                let excess = n2.sqrt() - self.schedule.rotation_limit;
                out.penalty += excess * excess * self.schedule.rotation_penalty;
            }
        }
        out
    }

    fn weighted<T: Real>(&self, s: &Smooth<T>) -> T {
        let w = &self.weights;
        s.l3d * w.lambda_3d + s.l2d * w.lambda_2d + s.geo * w.lambda_geo + s.cam * w.lambda_cam + s.penalty
    }

    fn projected_for_mask(&self, posed: &[V3<f64>], cam: &[f64; 3]) -> Vec<[f64; 2]> {
        posed
            .iter()
            .map(|p| {
                let q = project_generic(p, cam);
                [q[0] * self.mask_scale[0], q[1] * self.mask_scale[1]]
            })
            .collect()
    }

    fn evaluate(&self, x: &[f64], want_seg_grad: bool) -> Result<Eval> {
        let (c, _) = self.dims();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(HamrError::InvalidState { term: "parameters", value: f64::NAN });
        }
        CameraParams::new(x[c], x[c + 1], x[c + 2]).check()?;
        let seg = self.uses_seg();
        let posed = self.posed(x, seg);
        let joints = self.rig.regress(&posed);
        let s = self.smooth(x, &joints);
        let mut terms = LossTerms { l3d: s.l3d, l2d: s.l2d, geo: s.geo, cam: s.cam, ht: 0.0, seg: 0.0 };
        let mut ht_grad = None;
        if let (Some(hm), Some(gt)) = (&self.gt_heatmaps, &self.sample.keypoints2d) {
            let cam = [x[c], x[c + 1], x[c + 2]];
            let proj: Vec<[f64; 2]> = joints.iter().map(|p| project_generic(p, &cam)).collect();
            let (value, grad) = heatmap_loss_and_grad(&proj, &gt.visible, hm, self.sample.image_size);
            terms.ht = value;
            ht_grad = Some(grad);
        }
        let mut seg_grad = None;
        if seg {
            let mask = self.sample.mask.as_ref().expect("mask present");
            let proj = self.projected_for_mask(&posed, &[x[c], x[c + 1], x[c + 2]]);
            let soft = SoftSilhouette::compute(&proj, &self.rig.model.faces, mask.size(), self.schedule.sharpness);
            let (value, grad) = soft.l1_and_grad(mask, &proj, proj.len());
            terms.seg = value;
            if want_seg_grad {
                seg_grad = Some(grad);
            }
        }
        let breakdown = total_loss(&terms, &self.weights)?;
        if !s.penalty.is_finite() {
            return Err(HamrError::InvalidState { term: "rotation_penalty", value: s.penalty });
        }
        Ok(Eval { breakdown, penalty: s.penalty, objective: breakdown.total + s.penalty, ht_grad, seg_grad })
    }

    fn gradient(&self, x: &[f64], active: &[bool], eval: &Eval) -> Vec<f64> {
        let (c, _) = self.dims();
        let all = eval.seg_grad.is_some();
        let (lambda_seg, lambda_ht) = (self.weights.lambda_seg, self.weights.lambda_ht);
        let scale = self.mask_scale;
        let (_, g) = gradient(x, active, |xd| {
            let posed = self.posed(xd, all);
            let joints = self.rig.regress(&posed);
            let mut f = self.weighted(&self.smooth(xd, &joints));
            // Heatmap and silhouette terms enter linearized around `x`: the
            // gradient of Σ g·p(x) is exactly λ ∂ℒ/∂x.
            let cam = [xd[c], xd[c + 1], xd[c + 2]];
            if let Some(ht) = &eval.ht_grad {
                for (p, g) in joints.iter().zip(ht) {
                    let q = project_generic(p, &cam);
                    f += q[0] * (lambda_ht * g[0]) + q[1] * (lambda_ht * g[1]);
                }
            }
            if let Some(seg) = &eval.seg_grad {
                for (p, g) in posed.iter().zip(seg) {
                    if g[0] == 0.0 && g[1] == 0.0 {
                        continue;
                    }
                    let q = project_generic(p, &cam);
                    f += q[0] * (lambda_seg * g[0] * scale[0]) + q[1] * (lambda_seg * g[1] * scale[1]);
                }
            }
            f
        });
        g
    }

    fn mesh(&self, x: &[f64]) -> Mesh {
        Mesh { vertices: self.posed(x, true), faces: self.rig.model.faces.clone() }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss breakdown and gradient over all parameters at `state`.
pub fn loss_and_grad(
    model: &HandModel,
    state: &ParamState,
    sample: &Sample,
    weights: &LossWeights,
    schedule: &Schedule,
) -> Result<LossAndGrad> {
    let obj = Objective::new(model, sample, *weights, schedule)?;
    let x = state.to_vec();
    if x.len() != model.param_dim() {
        return Err(HamrError::invalid("state does not match the model"));
    }
    let eval = obj.evaluate(&x, true)?;
    let gradient = obj.gradient(&x, &vec![true; x.len()], &eval);
    Ok(LossAndGrad { breakdown: eval.breakdown, penalty: eval.penalty, objective: eval.objective, gradient })
}

fn stage_weights(stage: &Stage, weights: &LossWeights) -> LossWeights {
    match stage.loss {
        StageLoss::Full => *weights,
        StageLoss::Keypoints2d => LossWeights { lambda_2d: weights.lambda_2d.max(f64::MIN_POSITIVE), ..LossWeights::zero() },
    }
}

fn active_mask(model: &HandModel, group: ParamGroup) -> Vec<bool> {
    let dim = model.param_dim();
    match group {
        ParamGroup::All => vec![true; dim],
        ParamGroup::CameraAndRoot => (0..dim).map(|i| (NUM_SHAPE..NUM_SHAPE + 3).contains(&i) || i >= dim - 3).collect(),
    }
}

fn project_feasible(x: &mut [f64]) {
    for b in x[..NUM_SHAPE].iter_mut() {
        *b = b.clamp(-BETA_LIMIT, BETA_LIMIT);
    }
}

/// Limited-memory inverse-Hessian product (two-loop recursion).
struct Lbfgs {
    memory: usize,
    pairs: Vec<(Vec<f64>, Vec<f64>, f64)>,
}

impl Lbfgs {
    fn new(memory: usize) -> Self {
        Lbfgs { memory, pairs: Vec::new() }
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if !(sy > 1e-12 * norm(&s) * norm(&y)) {
            return;
        }
        if self.pairs.len() == self.memory {
            self.pairs.remove(0);
        }
        self.pairs.push((s, y, 1.0 / sy));
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

/// Runs the staged schedule from [`init_params`].
pub fn fit(model: &HandModel, sample: &Sample, weights: &LossWeights, schedule: &Schedule) -> Result<FitResult> {
    let init = init_params(model, sample)?;
    fit_from(model, sample, weights, schedule, &init)
}

/// Runs the staged schedule from a given starting state.
pub fn fit_from(
    model: &HandModel,
    sample: &Sample,
    weights: &LossWeights,
    schedule: &Schedule,
    start: &ParamState,
) -> Result<FitResult> {
    weights.check()?;
    schedule.check()?;
    let mut x = start.to_vec();
    if x.len() != model.param_dim() {
        return Err(HamrError::invalid("starting state does not match the model"));
    }
    project_feasible(&mut x);
    let mut trace = Vec::new();
    let mut outcomes = Vec::new();
    let mut total_iters = 0;

    for (si, stage) in schedule.stages.iter().enumerate() {
        let w = stage_weights(stage, weights);
        let obj = Objective::new(model, sample, w, schedule)?;
        let active = active_mask(model, stage.params);
        let restrict = |g: &mut Vec<f64>| {
            for (gi, &a) in g.iter_mut().zip(&active) {
                if !a {
                    *gi = 0.0;
                }
            }
        };

        let mut eval = obj.evaluate(&x, true)?;
        let mut g = obj.gradient(&x, &active, &eval);
        restrict(&mut g);
        trace.push(TraceEntry {
            stage: si,
            iteration: 0,
            breakdown: eval.breakdown,
            penalty: eval.penalty,
            objective: eval.objective,
            grad_norm: norm(&g),
        });
        let mut lbfgs = Lbfgs::new(schedule.lbfgs_memory.max(1));
        let mut termination = Termination::IterationCap;
        let mut iters = 0;

        while iters < stage.max_iters {
            if norm(&g) < schedule.grad_tol {
                termination = Termination::GradientTolerance;
                break;
            }
            let mut use_memory = schedule.step_rule == StepRule::Lbfgs;
            let accepted = loop {
                let (mut d, first) = if use_memory && !lbfgs.pairs.is_empty() {
                    (lbfgs.direction(&g), false)
                } else {
                    (g.iter().map(|v| -v).collect::<Vec<_>>(), true)
                };
                restrict(&mut d);
                if dot(&g, &d) >= 0.0 {
                    d = g.iter().map(|v| -v).collect();
                }
                let mut alpha = if first { (1.0 / norm(&d)).min(1.0) } else { 1.0 };
                let mut found = None;
                for _ in 0..schedule.max_backtracks {
                    let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
                    project_feasible(&mut trial);
                    let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let decrease = dot(&g, &step);
                    if let Ok(e) = obj.evaluate(&trial, true) {
                        if e.objective.is_finite()
                            && e.objective <= eval.objective
                            && e.objective <= eval.objective + schedule.armijo_c * decrease
                        {
                            found = Some((trial, e));
                            break;
                        }
                    }
                    alpha *= schedule.backtrack_factor;
                }
                match found {
                    Some(f) => break Some(f),
                    None if use_memory && !lbfgs.pairs.is_empty() => {
                        // retry once along the plain gradient with a fresh memory
                        lbfgs.pairs.clear();
                        use_memory = false;
                    }
                    None => break None,
                }
            };
            let Some((x_new, e_new)) = accepted else {
                termination = Termination::LineSearchFailed;
                break;
            };
            iters += 1;
            let mut g_new = obj.gradient(&x_new, &active, &e_new);
            restrict(&mut g_new);
            let improvement = eval.objective - e_new.objective;
            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            lbfgs.push(s, y);
            let rel_done = improvement <= schedule.rel_tol * eval.objective.abs();
            x = x_new;
            eval = e_new;
            g = g_new;
            trace.push(TraceEntry {
                stage: si,
                iteration: iters,
                breakdown: eval.breakdown,
                penalty: eval.penalty,
                objective: eval.objective,
                grad_norm: norm(&g),
            });
            if rel_done {
                termination = Termination::RelativeImprovement;
                break;
            }
        }
        if iters >= stage.max_iters && termination == Termination::IterationCap && norm(&g) < schedule.grad_tol {
            termination = Termination::GradientTolerance;
        }
        total_iters += iters;
        outcomes.push(StageOutcome { name: stage.name.clone(), iterations: iters, termination });
    }

    let state = ParamState::from_vec(model, &x)?;
    let rig_obj = Objective::new(model, sample, *weights, schedule)?;
    let mesh = rig_obj.mesh(&x);
    let converged = outcomes.iter().all(|o| o.termination != Termination::IterationCap);
    Ok(FitResult { state, mesh, trace, iterations: total_iters, converged, stages: outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_toy_model, lbs_forward, ToyConfig};
    use crate::pose::{project, regress_joints};

    fn toy() -> HandModel {
        build_toy_model(&ToyConfig::default()).unwrap()
    }

    fn posed_state(model: &HandModel) -> ParamState {
        let mut s = ParamState::rest(model, CameraParams::new(90.0, 0.9, 0.3));
        s.beta.beta[0] = 0.4;
        s.beta.beta[3] = -0.7;
        s.theta.theta[0] = [0.1, -0.2, 0.15];
        s.theta.theta[5] = [0.3, 0.0, 0.0];
        s.theta.theta[6] = [0.25, 0.0, 0.0];
        s.theta.theta[1] = [0.05, 0.2, -0.1];
        s
    }

    fn synth_sample(model: &HandModel, state: &ParamState) -> Sample {
        let mesh = lbs_forward(model, &state.beta, &state.theta).unwrap();
        let j3 = regress_joints(model, &mesh).unwrap();
        let kp = project(&j3, &state.cam).unwrap();
        Sample {
            id: "t".into(),
            image_size: ImageSize::new(256, 256),
            keypoints2d: Some(kp),
            joints3d: Some(j3),
            mask: None,
            gt_cam: Some(state.cam),
        }
    }

    #[test]
    fn state_round_trips_through_vector() {
        let model = toy();
        let s = posed_state(&model);
        assert_eq!(ParamState::from_vec(&model, &s.to_vec()).unwrap(), s);
        assert_eq!(s.to_vec().len(), 10 + 3 * 16 + 3);
        assert!(ParamState::from_vec(&model, &[0.0; 5]).is_err());
    }

    #[test]
    fn init_uses_paired_camera_and_rest_pose() {
        let model = toy();
        let truth = posed_state(&model);
        let sample = synth_sample(&model, &truth);
        let init = init_params(&model, &sample).unwrap();
        let expect = camera_from_pairs(sample.joints3d.as_ref().unwrap(), sample.keypoints2d.as_ref().unwrap(), &model.skeleton_edges).unwrap();
        assert_eq!(init.cam, expect);
        assert_eq!(init.beta, ShapeParams::zeros());
        assert_eq!(init.theta, model.rest_pose_params());
    }

    #[test]
    fn init_two_d_only_centers_keypoints() {
        let model = toy();
        let mut sample = synth_sample(&model, &posed_state(&model));
        sample.joints3d = None;
        let init = init_params(&model, &sample).unwrap();
        let mesh = lbs_forward(&model, &init.beta, &init.theta).unwrap();
        let proj = project(&regress_joints(&model, &mesh).unwrap(), &init.cam).unwrap();
        let kp = sample.keypoints2d.as_ref().unwrap();
        let n = kp.len() as f64;
        for a in 0..2 {
            let c1: f64 = proj.points.iter().map(|p| p[a]).sum::<f64>() / n;
            let c2: f64 = kp.points.iter().map(|p| p[a]).sum::<f64>() / n;
            assert!((c1 - c2).abs() < 1e-9);
        }
    }

    #[test]
    fn init_without_annotation_fails() {
        let model = toy();
        let sample = Sample { id: "e".into(), image_size: ImageSize::new(8, 8), keypoints2d: None, joints3d: None, mask: None, gt_cam: None };
        assert!(init_params(&model, &sample).is_err());
    }

    #[test]
    fn zero_at_generating_state() {
        let model = toy();
        let truth = posed_state(&model);
        let sample = synth_sample(&model, &truth);
        let r = loss_and_grad(&model, &truth, &sample, &LossWeights::default(), &Schedule::default()).unwrap();
        let t = r.breakdown.terms;
        assert!(t.l3d < 1e-28 && t.l2d < 1e-20 && t.cam == 0.0 && t.ht < 1e-28, "{t:?}");
        // the pose bends two joints of the index finger about one axis, so the chain stays planar
        assert!(t.geo < 1e-28);
        assert!(norm(&r.gradient) < 1e-6, "{}", norm(&r.gradient));
    }

    #[test]
    fn camera_only_gradient_is_analytic() {
        let model = toy();
        let truth = posed_state(&model);
        let mut sample = synth_sample(&model, &truth);
        sample.keypoints2d = None;
        sample.joints3d = None;
        sample.mask = Some(Mask::filled(4, 4, 0.0));
        let w = LossWeights { lambda_cam: 1.0, ..LossWeights::zero() };
        let mut state = truth.clone();
        state.cam = CameraParams::new(92.5, 0.7, 0.45);
        let r = loss_and_grad(&model, &state, &sample, &w, &Schedule::default()).unwrap();
        let n = r.gradient.len();
        let expect = [2.0 * 2.5, 2.0 * (0.7 - 0.9), 2.0 * (0.45 - 0.3)];
        for i in 0..3 {
            assert!((r.gradient[n - 3 + i] - expect[i]).abs() < 1e-12);
        }
        assert!(r.gradient[..n - 3].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn zero_iteration_schedule_returns_init() {
        let model = toy();
        let sample = synth_sample(&model, &posed_state(&model));
        let res = fit(&model, &sample, &LossWeights::default(), &Schedule::empty()).unwrap();
        assert_eq!(res.state, init_params(&model, &sample).unwrap());
        assert_eq!(res.iterations, 0);
        assert!(res.trace.is_empty());
    }

    #[test]
    fn penalty_activates_beyond_limit() {
        let model = toy();
        let sample = synth_sample(&model, &posed_state(&model));
        let mut state = posed_state(&model);
        state.theta.theta[9] = [0.0, 3.0, 0.0];
        let r = loss_and_grad(&model, &state, &sample, &LossWeights::default(), &Schedule::default()).unwrap();
        let excess = 3.0 - 0.9 * std::f64::consts::PI;
        assert!((r.penalty - 100.0 * excess * excess).abs() < 1e-9);
        assert!((r.objective - r.breakdown.total - r.penalty).abs() < 1e-12);
    }
}
