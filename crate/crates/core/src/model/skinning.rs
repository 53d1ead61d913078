use crate::autodiff::Real;
use crate::error::{HamrError, Result};
use crate::math::{add, lift, mat_mul, mat_vec, scale, sub, Rigid, M3, V3};

use super::{rodrigues_generic, HandModel, Mesh, PoseParams, ShapeParams, NUM_SHAPE};

/// Sparse view of a model used by every skinning evaluation.
///
/// The dense N×K tables of [`HandModel`] are mostly zeros; the rig keeps only
/// the nonzero entries plus a topological order of the kinematic tree.
pub(crate) struct Rig<'a> {
    pub model: &'a HandModel,
    order: Vec<usize>,
    skin: Vec<Vec<(usize, f64)>>,
    regressor: Vec<Vec<(usize, f64)>>,
    shape_nz: Vec<Vec<usize>>,
    pose_nz: Vec<Vec<usize>>,
    rest_is_zero: bool,
}

impl<'a> Rig<'a> {
    pub fn new(model: &'a HandModel) -> Result<Self> {
        let n = model.num_vertices();
        let k = model.num_joints();
        if k == 0 || n == 0 {
            return Err(HamrError::invalid("model has no joints or no vertices"));
        }
        let dims_ok = model.skinning_weights.len() == n
            && model.joint_regressor.len() == n
            && model.skinning_weights.iter().all(|r| r.len() == k)
            && model.joint_regressor.iter().all(|r| r.len() == k)
            && model.shape_basis.len() == NUM_SHAPE
            && model.pose_basis.len() == 9 * (k - 1)
            && model.shape_basis.iter().chain(&model.pose_basis).all(|c| c.len() == n)
            && model.rest_pose.len() == k
            && model.fingertip_vertex_ids.iter().all(|&v| v < n);
        if !dims_ok {
            return Err(HamrError::invalid("model tables have inconsistent dimensions"));
        }

        // children-before-parents is not required; visit breadth-first from the root
        let mut children = vec![Vec::new(); k];
        let mut roots = 0;
        for (j, &p) in model.joint_parents.iter().enumerate() {
            if p < 0 {
                roots += 1;
            } else if (p as usize) < k {
                children[p as usize].push(j);
            } else {
                return Err(HamrError::invalid(format!("joint {j} has out-of-range parent {p}")));
            }
        }
        if roots != 1 || model.joint_parents[0] != -1 {
            return Err(HamrError::invalid("kinematic tree must have joint 0 as its single root"));
        }
        let mut order = vec![0];
        let mut head = 0;
        while head < order.len() {
            let j = order[head];
            head += 1;
            order.extend_from_slice(&children[j]);
            if order.len() > k {
                break;
            }
        }
        if order.len() != k {
            return Err(HamrError::invalid("kinematic tree is not connected or has a cycle"));
        }

        let skin = model
            .skinning_weights
            .iter()
            .map(|row| row.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(j, w)| (j, *w)).collect())
            .collect();
        let mut regressor = vec![Vec::new(); k];
        for (v, row) in model.joint_regressor.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    regressor[j].push((v, w));
                }
            }
        }
        let nonzero = |basis: &Vec<Vec<[f64; 3]>>| -> Vec<Vec<usize>> {
            (0..n)
                .map(|v| (0..basis.len()).filter(|&c| basis[c][v] != [0.0; 3]).collect())
                .collect()
        };
        Ok(Rig {
            model,
            order,
            skin,
            regressor,
            shape_nz: nonzero(&model.shape_basis),
            pose_nz: nonzero(&model.pose_basis),
            rest_is_zero: model.rest_pose.iter().all(|w| *w == [0.0; 3]),
        })
    }

    pub fn num_joints(&self) -> usize {
        self.model.num_joints()
    }

    /// Vertices that influence the 21 derived joints.
    pub fn joint_support(&self) -> Vec<usize> {
        let mut vs: Vec<usize> = self.regressor.iter().flatten().map(|(v, _)| *v).collect();
        vs.extend_from_slice(&self.model.fingertip_vertex_ids);
        vs.sort_unstable();
        vs.dedup();
        vs
    }

    /// `T̄_v + B_S(β)_v`
    pub fn shaped_vertex<T: Real>(&self, beta: &[T], v: usize) -> V3<T> {
        let mut p = lift::<T>(&self.model.template_vertices[v]);
        for &c in &self.shape_nz[v] {
            let d = self.model.shape_basis[c][v];
            for i in 0..3 {
                p[i] += beta[c] * d[i];
            }
        }
        p
    }

    /// Joints of the shaped rest mesh, `𝒥ᵀ (T̄ + B_S(β))`.
    pub fn rest_joints<T: Real>(&self, beta: &[T]) -> Vec<V3<T>> {
        self.regressor
            .iter()
            .map(|col| {
                let mut j = [T::zero(); 3];
                for &(v, w) in col {
                    j = add(&j, &scale(&self.shaped_vertex(beta, v), T::cst(w)));
                }
                j
            })
            .collect()
    }

    /// Canonical-to-posed transform of every joint: local rotations compose
    /// down the tree, each pivoting about its joint's rest position.
    fn absolute<T: Real>(&self, rots: &[M3<T>], joints: &[V3<T>]) -> Vec<Rigid<T>> {
        let k = self.num_joints();
        let mut glob: Vec<Rigid<T>> = vec![Rigid::identity(); k];
        let mut posed: Vec<V3<T>> = vec![[T::zero(); 3]; k];
        for &j in &self.order {
            let parent = self.model.joint_parents[j];
            let (rot, at) = if parent < 0 {
                (rots[j], joints[j])
            } else {
                let p = parent as usize;
                let r = mat_mul(&glob[p].rot, &rots[j]);
                let at = add(&posed[p], &mat_vec(&glob[p].rot, &sub(&joints[j], &joints[p])));
                (r, at)
            };
            glob[j] = Rigid { rot, trans: sub(&at, &mat_vec(&rot, &joints[j])) };
            posed[j] = at;
        }
        glob
    }

    /// Transforms mapping the rest (template) configuration to pose `theta`.
    pub fn transforms<T: Real>(&self, theta: &[T], joints: &[V3<T>]) -> Vec<Rigid<T>> {
        let rots: Vec<M3<T>> = theta.chunks_exact(3).map(|w| rodrigues_generic(&[w[0], w[1], w[2]])).collect();
        let posed = self.absolute(&rots, joints);
        if self.rest_is_zero {
            return posed;
        }
        let rest_rots: Vec<M3<T>> = self.model.rest_pose.iter().map(|w| rodrigues_generic(&lift::<T>(w))).collect();
        let rest = self.absolute(&rest_rots, joints);
        posed.iter().zip(&rest).map(|(p, r)| p.compose(&r.inverse())).collect()
    }

    /// Flattened `R(θ_k) − R(θ*_k)` over the non-root joints.
    pub fn pose_features<T: Real>(&self, theta: &[T]) -> Vec<T> {
        let k = self.num_joints();
        let mut f = Vec::with_capacity(9 * (k - 1));
        for j in 1..k {
            let r = rodrigues_generic(&[theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]]);
            let r0 = rodrigues_generic(&self.model.rest_pose[j]);
            for a in 0..3 {
                for b in 0..3 {
                    f.push(r[a][b] - r0[a][b]);
                }
            }
        }
        f
    }

    /// Skinned position of vertex `v`.
    pub fn posed_vertex<T: Real>(&self, beta: &[T], features: &[T], transforms: &[Rigid<T>], v: usize) -> V3<T> {
        let mut p = self.shaped_vertex(beta, v);
        for &c in &self.pose_nz[v] {
            let d = self.model.pose_basis[c][v];
            for i in 0..3 {
                p[i] += features[c] * d[i];
            }
        }
        let mut rot = [[T::zero(); 3]; 3];
        let mut trans = [T::zero(); 3];
        for &(j, w) in &self.skin[v] {
            let t = &transforms[j];
            for a in 0..3 {
                for b in 0..3 {
                    rot[a][b] += t.rot[a][b] * w;
                }
                trans[a] += t.trans[a] * w;
            }
        }
        add(&mat_vec(&rot, &p), &trans)
    }

    /// The 21 derived joints from already-skinned vertices. `posed` is indexed
    /// by vertex id and needs valid entries only on [`Self::joint_support`].
    pub fn regress<T: Real>(&self, posed: &[V3<T>]) -> Vec<V3<T>> {
        let mut out: Vec<V3<T>> = self
            .regressor
            .iter()
            .map(|col| {
                let mut j = [T::zero(); 3];
                for &(v, w) in col {
                    j = add(&j, &scale(&posed[v], T::cst(w)));
                }
                j
            })
            .collect();
        out.extend(self.model.fingertip_vertex_ids.iter().map(|&v| posed[v]));
        out
    }
}

fn check_params(model: &HandModel, beta: &ShapeParams, theta: Option<&PoseParams>) -> Result<()> {
    if beta.beta.len() != NUM_SHAPE {
        return Err(HamrError::invalid(format!("expected {NUM_SHAPE} shape coefficients, got {}", beta.beta.len())));
    }
    if beta.beta.iter().any(|b| !b.is_finite()) {
        return Err(HamrError::invalid("non-finite shape coefficient"));
    }
    if let Some(theta) = theta {
        if theta.theta.len() != model.num_joints() {
            return Err(HamrError::invalid(format!(
                "expected {} joint rotations, got {}",
                model.num_joints(),
                theta.theta.len()
            )));
        }
        if theta.theta.iter().flatten().any(|t| !t.is_finite()) {
            return Err(HamrError::invalid("non-finite joint rotation"));
        }
    }
    Ok(())
}

/// Joint positions of the shaped rest mesh.
pub fn rest_joints(model: &HandModel, beta: &ShapeParams) -> Result<Vec<[f64; 3]>> {
    check_params(model, beta, None)?;
    Ok(Rig::new(model)?.rest_joints(&beta.beta))
}

/// Per-joint rigid transforms (row-major 4×4) taking the rest configuration
/// to pose `theta`. The root rotation is the global orientation.
pub fn forward_kinematics(model: &HandModel, theta: &PoseParams, rest_joints: &[[f64; 3]]) -> Result<Vec<[[f64; 4]; 4]>> {
    check_params(model, &ShapeParams::zeros(), Some(theta))?;
    if rest_joints.len() != model.num_joints() {
        return Err(HamrError::invalid("rest joint count does not match the model"));
    }
    let rig = Rig::new(model)?;
    let flat: Vec<f64> = theta.theta.iter().flatten().copied().collect();
    Ok(rig.transforms(&flat, rest_joints).iter().map(Rigid::to_matrix).collect())
}

/// Skinned mesh `W(T̄ + B_S(β) + B_P(θ), J(β), θ, 𝒲)`.
pub fn lbs_forward(model: &HandModel, beta: &ShapeParams, theta: &PoseParams) -> Result<Mesh> {
    check_params(model, beta, Some(theta))?;
    let rig = Rig::new(model)?;
    Ok(Mesh { vertices: rig.skin_all(&beta.beta, &flatten(theta)), faces: model.faces.clone() })
}

pub(crate) fn flatten(theta: &PoseParams) -> Vec<f64> {
    theta.theta.iter().flatten().copied().collect()
}

impl Rig<'_> {
    pub fn skin_all<T: Real>(&self, beta: &[T], theta: &[T]) -> Vec<V3<T>> {
        let joints = self.rest_joints(beta);
        let transforms = self.transforms(theta, &joints);
        let features = self.pose_features(theta);
        (0..self.model.num_vertices())
            .map(|v| self.posed_vertex(beta, &features, &transforms, v))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_6;

    use super::*;
    use crate::model::{build_toy_model, rodrigues, ToyConfig};

    /// Three joints in a line along +x, one vertex per joint, rigid weights.
    fn chain_model() -> HandModel {
        let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let n = verts.len();
        let k = 3;
        let mut skin = vec![vec![0.0; k]; n];
        let mut reg = vec![vec![0.0; k]; n];
        for j in 0..k {
            skin[j][j] = 1.0;
            reg[j][j] = 1.0;
        }
        skin[3][2] = 1.0;
        HandModel {
            name: "chain".into(),
            template_vertices: verts,
            faces: vec![[0, 1, 2]],
            joint_parents: vec![-1, 0, 1],
            skinning_weights: skin,
            joint_regressor: reg,
            shape_basis: vec![vec![[0.0; 3]; n]; NUM_SHAPE],
            pose_basis: vec![vec![[0.0; 3]; n]; 9 * (k - 1)],
            rest_pose: vec![[0.0; 3]; k],
            fingertip_vertex_ids: vec![3; 5],
            finger_chains: vec![],
            skeleton_edges: vec![],
        }
    }

    fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for r in 0..4 {
            for c in 0..4 {
                m[r][c] = (0..4).map(|i| a[r][i] * b[i][c]).sum();
            }
        }
        m
    }

    /// Rotation `rot` about point `at` as a 4×4.
    fn about(rot: [[f64; 3]; 3], at: [f64; 3]) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r][..3].copy_from_slice(&rot[r]);
            m[r][3] = at[r] - (0..3).map(|c| rot[r][c] * at[c]).sum::<f64>();
        }
        m[3][3] = 1.0;
        m
    }

    #[test]
    fn regressor_one_hot_and_midpoint() {
        let mut model = chain_model();
        let j = rest_joints(&model, &ShapeParams::zeros()).unwrap();
        assert_eq!(j[1], [1.0, 0.0, 0.0]);
        model.joint_regressor[1][1] = 0.5;
        model.joint_regressor[2][1] = 0.5;
        let j = rest_joints(&model, &ShapeParams::zeros()).unwrap();
        assert_eq!(j[1], [1.5, 0.0, 0.0]);
    }

    #[test]
    fn rest_pose_gives_identity_transforms() {
        let model = build_toy_model(&ToyConfig::default()).unwrap();
        let joints = rest_joints(&model, &ShapeParams::zeros()).unwrap();
        let t = forward_kinematics(&model, &model.rest_pose_params(), &joints).unwrap();
        for m in t {
            for r in 0..4 {
                for c in 0..4 {
                    assert_eq!(m[r][c], if r == c { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn root_rotation_is_rigid_about_root() {
        let model = build_toy_model(&ToyConfig::default()).unwrap();
        let joints = rest_joints(&model, &ShapeParams::zeros()).unwrap();
        let w = [0.3, -0.2, 0.5];
        let mut theta = model.rest_pose_params();
        theta.theta[0] = w;
        let r = rodrigues(w).unwrap();
        let t = forward_kinematics(&model, &theta, &joints).unwrap();
        let root = joints[0];
        for (j, m) in joints.iter().zip(&t) {
            let posed: Vec<f64> = (0..3).map(|a| (0..3).map(|b| m[a][b] * j[b]).sum::<f64>() + m[a][3]).collect();
            let d = sub(j, &root);
            let expect = add(&mat_vec(&r, &d), &root);
            for a in 0..3 {
                assert!((posed[a] - expect[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_link_hinge_matches_composed_matrices() {
        let model = chain_model();
        let joints = rest_joints(&model, &ShapeParams::zeros()).unwrap();
        let hinge = [0.0, 0.0, FRAC_PI_6];
        let theta = PoseParams { theta: vec![[0.0; 3], hinge, hinge] };
        let t = forward_kinematics(&model, &theta, &joints).unwrap();
        let r = rodrigues(hinge).unwrap();
        let expect = mat4_mul(&about(r, joints[1]), &about(r, joints[2]));
        for a in 0..4 {
            for b in 0..4 {
                assert!((t[2][a][b] - expect[a][b]).abs() < 1e-12, "{:?} vs {:?}", t[2], expect);
            }
        }
        // the tip vertex at (3,0,0): first link turned 30°, second link 60°
        let mesh = lbs_forward(&model, &ShapeParams::zeros(), &theta).unwrap();
        let tip = mesh.vertices[3];
        let expect_tip = [1.0 + 3f64.sqrt() / 2.0 + 0.5, 0.5 + 3f64.sqrt() / 2.0, 0.0];
        for a in 0..3 {
            assert!((tip[a] - expect_tip[a]).abs() < 1e-12, "{tip:?}");
        }
    }

    #[test]
    fn rest_mesh_equals_template() {
        let model = build_toy_model(&ToyConfig::default()).unwrap();
        let mesh = lbs_forward(&model, &ShapeParams::zeros(), &model.rest_pose_params()).unwrap();
        assert_eq!(mesh.vertices, model.template_vertices);
    }

    #[test]
    fn rest_pose_with_shape_adds_shape_offsets_only() {
        let model = build_toy_model(&ToyConfig::default()).unwrap();
        let beta = ShapeParams { beta: vec![0.7, -1.2, 0.4, 2.0, -0.3, 0.1, 1.5, -2.2, 0.9, -0.6] };
        let mesh = lbs_forward(&model, &beta, &model.rest_pose_params()).unwrap();
        for (v, p) in mesh.vertices.iter().enumerate() {
            let mut e = model.template_vertices[v];
            for c in 0..NUM_SHAPE {
                for i in 0..3 {
                    e[i] += beta.beta[c] * model.shape_basis[c][v][i];
                }
            }
            for i in 0..3 {
                assert!((p[i] - e[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nonzero_rest_pose_is_a_fixed_point() {
        let mut model = build_toy_model(&ToyConfig::default()).unwrap();
        model.rest_pose[5] = [0.2, 0.1, -0.3];
        model.rest_pose[0] = [0.0, 0.4, 0.0];
        let mesh = lbs_forward(&model, &ShapeParams::zeros(), &model.rest_pose_params()).unwrap();
        for (p, t) in mesh.vertices.iter().zip(&model.template_vertices) {
            for i in 0..3 {
                assert!((p[i] - t[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_dimensions() {
        let model = build_toy_model(&ToyConfig::default()).unwrap();
        let short = ShapeParams { beta: vec![0.0; 3] };
        assert!(lbs_forward(&model, &short, &model.rest_pose_params()).is_err());
        let theta = PoseParams { theta: vec![[0.0; 3]; 4] };
        assert!(lbs_forward(&model, &ShapeParams::zeros(), &theta).is_err());
        assert!(rest_joints(&model, &short).is_err());
    }
}
