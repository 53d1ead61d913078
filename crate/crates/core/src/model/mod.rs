//! Parametric hand model: template mesh, shape and pose blendshapes, linear
//! blend skinning along a kinematic tree.

mod rotation;
mod skinning;
pub mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{HamrError, Result};

pub use rotation::rodrigues;
pub(crate) use rotation::rodrigues_generic;
pub use skinning::{forward_kinematics, lbs_forward, rest_joints};
pub(crate) use skinning::Rig;
pub use toy::{build_toy_model, ToyConfig};

/// Number of shape coefficients.
pub const NUM_SHAPE: usize = 10;
/// Number of fingertips appended to the model joints.
pub const NUM_TIPS: usize = 5;
/// Number of non-thumb finger chains used by the geometric regularizer.
pub const NUM_CHAINS: usize = 4;

const SUM_TOL: f64 = 1e-9;

/// Immutable hand model definition.
///
/// Arrays are row-major: `skinning_weights[v][k]` is the influence of joint `k`
/// on vertex `v`, `joint_regressor[v][k]` the contribution of vertex `v` to
/// joint `k`. `finger_chains` and `skeleton_edges` index the 21-point joint
/// set (the `K` model joints followed by the five fingertips).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandModel {
    pub name: String,
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub joint_parents: Vec<i64>,
    pub skinning_weights: Vec<Vec<f64>>,
    pub joint_regressor: Vec<Vec<f64>>,
    pub shape_basis: Vec<Vec<[f64; 3]>>,
    pub pose_basis: Vec<Vec<[f64; 3]>>,
    pub rest_pose: Vec<[f64; 3]>,
    pub fingertip_vertex_ids: Vec<usize>,
    pub finger_chains: Vec<[usize; 4]>,
    pub skeleton_edges: Vec<[usize; 2]>,
}

impl HandModel {
    pub fn num_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joint_parents.len()
    }

    /// Model joints plus fingertips.
    pub fn num_points(&self) -> usize {
        self.num_joints() + NUM_TIPS
    }

    /// Length of the flattened parameter vector `[beta, theta, cam]`.
    pub fn param_dim(&self) -> usize {
        NUM_SHAPE + 3 * self.num_joints() + 3
    }

    pub fn rest_pose_params(&self) -> PoseParams {
        PoseParams { theta: self.rest_pose.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub beta: Vec<f64>,
}

impl ShapeParams {
    pub fn zeros() -> Self {
        ShapeParams { beta: vec![0.0; NUM_SHAPE] }
    }
}

/// Per-joint axis-angle rotations in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub theta: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for i in 0..3 {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        crate::math::norm(&[hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationFailure {
    pub invariant: &'static str,
    pub location: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub failures: Vec<ValidationFailure>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn has(&self, invariant: &str) -> bool {
        self.failures.iter().any(|f| f.invariant == invariant)
    }

    fn push(&mut self, invariant: &'static str, location: impl Into<String>) {
        self.failures.push(ValidationFailure { invariant, location: location.into() });
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let msg = self
            .failures
            .iter()
            .map(|f| format!("{} at {}", f.invariant, f.location))
            .collect::<Vec<_>>()
            .join("; ");
        Err(HamrError::Validation(msg))
    }
}

/// Checks every structural and numerical invariant of a model.
pub fn validate_model(model: &HandModel) -> ValidationReport {
    let mut r = ValidationReport::default();
    let n = model.num_vertices();
    let k = model.num_joints();
    let points = model.num_points();

    if n == 0 {
        r.push("dimensions", "template_vertices is empty");
    }
    if k == 0 {
        r.push("dimensions", "joint_parents is empty");
        return r;
    }
    for (v, p) in model.template_vertices.iter().enumerate() {
        if p.iter().any(|c| !c.is_finite()) {
            r.push("finite", format!("template_vertices[{v}]"));
        }
    }

    // skinning weights: N×K, nonnegative rows summing to one
    if model.skinning_weights.len() != n {
        r.push("dimensions", format!("skinning_weights has {} rows, expected {n}", model.skinning_weights.len()));
    }
    for (v, row) in model.skinning_weights.iter().enumerate() {
        if row.len() != k {
            r.push("dimensions", format!("skinning_weights[{v}] has {} columns, expected {k}", row.len()));
            continue;
        }
        if let Some(j) = row.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            r.push("skinning_nonnegative", format!("skinning_weights[{v}][{j}] = {}", row[j]));
        }
        let sum: f64 = row.iter().sum();
        if !((sum - 1.0).abs() <= SUM_TOL) {
            r.push("skinning_row_sum", format!("skinning_weights row {v} sums to {sum}"));
        }
    }

    // joint regressor: N×K, unit column sums
    if model.joint_regressor.len() != n {
        r.push("dimensions", format!("joint_regressor has {} rows, expected {n}", model.joint_regressor.len()));
    } else if model.joint_regressor.iter().all(|row| row.len() == k) {
        for j in 0..k {
            let sum: f64 = model.joint_regressor.iter().map(|row| row[j]).sum();
            if !((sum - 1.0).abs() <= SUM_TOL) {
                r.push("regressor_column_sum", format!("joint_regressor column {j} sums to {sum}"));
            }
        }
    } else {
        r.push("dimensions", "joint_regressor rows must have K columns");
    }

    // kinematic tree rooted at joint 0
    if model.joint_parents[0] != -1 {
        r.push("tree", format!("joint 0 has parent {}, expected -1", model.joint_parents[0]));
    }
    for (j, &p) in model.joint_parents.iter().enumerate().skip(1) {
        if p < 0 || p as usize >= k || p as usize == j {
            r.push("tree", format!("joint {j} has invalid parent {p}"));
        }
    }
    if !r.has("tree") {
        for start in 1..k {
            let mut cur = start;
            let mut steps = 0;
            while cur != 0 {
                cur = model.joint_parents[cur] as usize;
                steps += 1;
                if steps > k {
                    r.push("tree", format!("cycle reachable from joint {start}"));
                    break;
                }
            }
            if steps > k {
                break;
            }
        }
    }

    // blendshapes
    if model.shape_basis.len() != NUM_SHAPE {
        r.push("dimensions", format!("shape_basis has {} components, expected {NUM_SHAPE}", model.shape_basis.len()));
    }
    let pose_dim = 9 * (k - 1);
    if model.pose_basis.len() != pose_dim {
        r.push("dimensions", format!("pose_basis has {} components, expected {pose_dim}", model.pose_basis.len()));
    }
    for (name, basis) in [("shape_basis", &model.shape_basis), ("pose_basis", &model.pose_basis)] {
        for (c, comp) in basis.iter().enumerate() {
            if comp.len() != n {
                r.push("dimensions", format!("{name}[{c}] has {} vertices, expected {n}", comp.len()));
            } else if comp.iter().flatten().any(|x| !x.is_finite()) {
                r.push("finite", format!("{name}[{c}]"));
            }
        }
    }
    if model.rest_pose.len() != k {
        r.push("dimensions", format!("rest_pose has {} joints, expected {k}", model.rest_pose.len()));
    } else if model.rest_pose.iter().flatten().any(|x| !x.is_finite()) {
        r.push("finite", "rest_pose");
    }

    // index ranges
    if model.faces.is_empty() {
        r.push("dimensions", "faces is empty");
    }
    for (f, face) in model.faces.iter().enumerate() {
        if face.iter().any(|&i| i >= n) {
            r.push("index_range", format!("faces[{f}] = {face:?}"));
        }
    }
    if model.fingertip_vertex_ids.len() != NUM_TIPS {
        r.push("dimensions", format!("{} fingertip ids, expected {NUM_TIPS}", model.fingertip_vertex_ids.len()));
    }
    for (t, &v) in model.fingertip_vertex_ids.iter().enumerate() {
        if v >= n {
            r.push("index_range", format!("fingertip_vertex_ids[{t}] = {v}"));
        }
    }
    if model.finger_chains.len() != NUM_CHAINS {
        r.push("finger_chains", format!("{} chains, expected {NUM_CHAINS}", model.finger_chains.len()));
    }
    for (c, chain) in model.finger_chains.iter().enumerate() {
        if chain.iter().any(|&i| i >= points) {
            r.push("index_range", format!("finger_chains[{c}] = {chain:?}"));
        }
        let distinct = (0..4).all(|a| (a + 1..4).all(|b| chain[a] != chain[b]));
        if !distinct {
            r.push("finger_chains", format!("finger_chains[{c}] repeats a joint"));
        }
    }
    for (e, edge) in model.skeleton_edges.iter().enumerate() {
        if edge.iter().any(|&i| i >= points) {
            r.push("index_range", format!("skeleton_edges[{e}] = {edge:?}"));
        }
    }
    r
}
