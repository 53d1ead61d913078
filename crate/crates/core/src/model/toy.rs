//! Procedural hand with the same structure as a production hand model.
//!
//! A box palm plus five closed tube fingers of three segments each. Joints:
//! `0` wrist, then three per finger (thumb, index, middle, ring, pinky), each
//! finger ordered base to tip. Fingertips are the cap apex vertices.
//!
//! Shape components, each linear in its coefficient:
//!
//! | index | effect at coefficient +1 |
//! |-------|--------------------------|
//! | 0 | uniform scale about the wrist by `1 + SCALE_STEP` |
//! | 1..=5 | finger (thumb..pinky) stretched along its axis by `LENGTH_STEP` |
//! | 6 | palm width (x) by `WIDTH_STEP`, fingers carried along |
//! | 7 | palm length (y) by `LENGTH_STEP`, fingers carried along |
//! | 8 | palm thickness (z) by `THICKNESS_STEP` |
//! | 9 | finger radius by `RADIUS_STEP` |

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HandModel, NUM_SHAPE};
use crate::error::{HamrError, Result};
use crate::math::{add, cross, scale, sub};

pub const SCALE_STEP: f64 = 0.1;
pub const LENGTH_STEP: f64 = 0.08;
pub const WIDTH_STEP: f64 = 0.08;
pub const THICKNESS_STEP: f64 = 0.1;
pub const RADIUS_STEP: f64 = 0.1;
/// Magnitude of the random pose-corrective displacements.
pub const POSE_BASIS_SCALE: f64 = 0.01;

const RINGS_PER_SEGMENT: usize = 3;
const NUM_JOINTS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    /// Segment lengths per finger (thumb..pinky), base to tip.
    pub finger_segments: [[f64; 3]; 5],
    pub palm_width: f64,
    pub palm_length: f64,
    pub palm_thickness: f64,
    pub finger_radius: f64,
    /// Vertices per finger cross-section ring.
    pub ring_resolution: usize,
    /// Seeds the pose-corrective blendshapes.
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            finger_segments: [
                [0.40, 0.32, 0.27],
                [0.42, 0.26, 0.20],
                [0.46, 0.30, 0.22],
                [0.43, 0.28, 0.21],
                [0.34, 0.21, 0.18],
            ],
            palm_width: 0.85,
            palm_length: 0.95,
            palm_thickness: 0.28,
            finger_radius: 0.085,
            ring_resolution: 8,
            seed: 0,
        }
    }
}

struct Finger {
    base: [f64; 3],
    dir: [f64; 3],
    e1: [f64; 3],
    e2: [f64; 3],
    segments: [f64; 3],
    cap: f64,
}

impl Finger {
    fn length(&self) -> f64 {
        self.segments.iter().sum::<f64>() + self.cap
    }

    fn at(&self, axial: f64) -> [f64; 3] {
        add(&self.base, &scale(&self.dir, axial))
    }
}

impl ToyConfig {
    fn check(&self) -> Result<()> {
        let dims = [self.palm_width, self.palm_length, self.palm_thickness, self.finger_radius];
        let segs_ok = self.finger_segments.iter().flatten().all(|l| l.is_finite() && *l > 0.0);
        if !segs_ok || dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(HamrError::invalid("toy model dimensions must be positive and finite"));
        }
        if self.ring_resolution < 3 {
            return Err(HamrError::invalid("ring resolution must be at least 3"));
        }
        if 2.0 * self.finger_radius >= self.palm_width / 4.0 {
            return Err(HamrError::invalid("fingers are too thick for the palm width"));
        }
        Ok(())
    }

    fn fingers(&self) -> Vec<Finger> {
        let (w, h) = (self.palm_width, self.palm_length);
        let z = [0.0, 0.0, 1.0];
        let mut out = vec![([-0.42 * w, 0.3 * h, 0.0], [-0.6, 0.8, 0.0])];
        for x in [-0.353, -0.118, 0.118, 0.353] {
            out.push(([x * w, h, 0.0], [0.0, 1.0, 0.0]));
        }
        out.into_iter()
            .zip(self.finger_segments)
            .map(|((base, dir), segments)| Finger {
                base,
                dir,
                e1: z,
                e2: cross(&dir, &z),
                segments,
                cap: 0.6 * self.finger_radius,
            })
            .collect()
    }

    /// Joint positions the builder places; the regressor reproduces them on
    /// the rest mesh. 16 joints followed by the 5 fingertips.
    pub fn skeleton(&self) -> Vec<[f64; 3]> {
        let fingers = self.fingers();
        let mut joints = vec![[0.0; 3]];
        for f in &fingers {
            let mut a = 0.0;
            for s in f.segments {
                joints.push(f.at(a));
                a += s;
            }
        }
        joints.extend(fingers.iter().map(|f| f.at(f.length())));
        joints
    }
}

/// Skinning weights of a finger ring: `(own, parent, child)` shares.
fn ring_weights(ring_in_segment: usize, has_child: bool) -> (f64, f64, f64) {
    match ring_in_segment {
        0 => (0.5, 0.5, 0.0),
        1 => (1.0, 0.0, 0.0),
        _ if has_child => (0.85, 0.0, 0.15),
        _ => (1.0, 0.0, 0.0),
    }
}

/// Builds the procedural hand. Deterministic for a given config.
pub fn build_toy_model(config: &ToyConfig) -> Result<HandModel> {
    config.check()?;
    let m = config.ring_resolution;
    let fingers = config.fingers();
    let (hw, h, ht) = (config.palm_width / 2.0, config.palm_length, config.palm_thickness / 2.0);

    let mut verts: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut skin: Vec<Vec<f64>> = Vec::new();
    let mut reg_members: Vec<Vec<usize>> = vec![Vec::new(); NUM_JOINTS];
    let mut shape: Vec<Vec<[f64; 3]>> = vec![Vec::new(); NUM_SHAPE];
    let mut tips = Vec::new();
    let one_hot = |j: usize| {
        let mut row = vec![0.0; NUM_JOINTS];
        row[j] = 1.0;
        row
    };

    // Palm box: corner bit 0 -> +x, bit 1 -> +y, bit 2 -> +z.
    for c in 0..8 {
        let p = [
            if c & 1 != 0 { hw } else { -hw },
            if c & 2 != 0 { h } else { 0.0 },
            if c & 4 != 0 { ht } else { -ht },
        ];
        verts.push(p);
        skin.push(one_hot(0));
        let mut d = [[0.0; 3]; NUM_SHAPE];
        d[0] = scale(&p, SCALE_STEP);
        d[6] = [WIDTH_STEP * p[0], 0.0, 0.0];
        d[7] = [0.0, LENGTH_STEP * p[1], 0.0];
        d[8] = [0.0, 0.0, THICKNESS_STEP * p[2]];
        for (s, v) in shape.iter_mut().zip(d) {
            s.push(v);
        }
    }
    reg_members[0] = vec![0, 1, 4, 5];
    // outward-facing quads, counter-clockwise seen from outside
    for q in [[0, 4, 6, 2], [1, 3, 7, 5], [0, 1, 5, 4], [2, 6, 7, 3], [0, 2, 3, 1], [4, 5, 7, 6]] {
        faces.push([q[0], q[1], q[2]]);
        faces.push([q[0], q[2], q[3]]);
    }

    for (fi, f) in fingers.iter().enumerate() {
        let first_joint = 1 + 3 * fi;
        let start = verts.len();
        let mut push = |p: [f64; 3], axial: f64, radial: [f64; 3], weights: Vec<f64>| {
            verts.push(p);
            skin.push(weights);
            let mut d = [[0.0; 3]; NUM_SHAPE];
            d[0] = scale(&p, SCALE_STEP);
            d[1 + fi] = scale(&f.dir, LENGTH_STEP * axial);
            d[6] = [WIDTH_STEP * f.base[0], 0.0, 0.0];
            d[7] = [0.0, LENGTH_STEP * f.base[1], 0.0];
            d[9] = scale(&radial, RADIUS_STEP);
            for (s, v) in shape.iter_mut().zip(d) {
                s.push(v);
            }
        };

        let mut axial = 0.0;
        let mut rings = 0;
        for (si, len) in f.segments.iter().enumerate() {
            let joint = first_joint + si;
            let parent = if si == 0 { 0 } else { joint - 1 };
            for r in 0..RINGS_PER_SEGMENT {
                let a = axial + len * r as f64 / RINGS_PER_SEGMENT as f64;
                let (own, up, down) = ring_weights(r, si < 2);
                let mut row = vec![0.0; NUM_JOINTS];
                row[joint] += own;
                row[parent] += up;
                if down > 0.0 {
                    row[joint + 1] += down;
                }
                if r == 0 {
                    reg_members[joint] = (0..m).map(|i| start + rings * m + i).collect();
                }
                for i in 0..m {
                    let phi = TAU * i as f64 / m as f64;
                    let radial = add(&scale(&f.e1, config.finger_radius * phi.cos()), &scale(&f.e2, config.finger_radius * phi.sin()));
                    push(add(&f.at(a), &radial), a, radial, row.clone());
                }
                rings += 1;
            }
            axial += len;
        }
        // closing ring at the end of the last segment
        let last = first_joint + 2;
        for i in 0..m {
            let phi = TAU * i as f64 / m as f64;
            let radial = add(&scale(&f.e1, config.finger_radius * phi.cos()), &scale(&f.e2, config.finger_radius * phi.sin()));
            push(add(&f.at(axial), &radial), axial, radial, one_hot(last));
        }
        rings += 1;
        let apex = start + rings * m;
        push(f.at(f.length()), f.length(), [0.0; 3], one_hot(last));
        let base_center = apex + 1;
        let mut row = vec![0.0; NUM_JOINTS];
        row[first_joint] = 0.5;
        row[0] = 0.5;
        push(f.base, 0.0, [0.0; 3], row);
        tips.push(apex);

        let idx = |ring: usize, i: usize| start + ring * m + (i % m);
        for ring in 0..rings - 1 {
            for i in 0..m {
                faces.push([idx(ring, i), idx(ring, i + 1), idx(ring + 1, i)]);
                faces.push([idx(ring, i + 1), idx(ring + 1, i + 1), idx(ring + 1, i)]);
            }
        }
        for i in 0..m {
            faces.push([idx(rings - 1, i), idx(rings - 1, i + 1), apex]);
            faces.push([idx(0, i + 1), idx(0, i), base_center]);
        }
    }

    let n = verts.len();
    let mut regressor = vec![vec![0.0; NUM_JOINTS]; n];
    for (j, members) in reg_members.iter().enumerate() {
        let w = 1.0 / members.len() as f64;
        for &v in members {
            regressor[v][j] = w;
        }
    }

    // Pose correctives: smooth bumps on the vertices that blend across a joint.
    // Regressor vertices are left rigid so joints follow the kinematic chain.
    let mut rigid = vec![false; n];
    for &v in reg_members.iter().flatten() {
        rigid[v] = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pose_basis = Vec::with_capacity(9 * (NUM_JOINTS - 1));
    for j in 1..NUM_JOINTS {
        for _ in 0..9 {
            let u: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let comp = skin
                .iter()
                .zip(&rigid)
                .map(|(row, &fixed)| {
                    let w = if fixed { 0.0 } else { row[j] };
                    scale(&u, POSE_BASIS_SCALE * 4.0 * w * (1.0 - w))
                })
                .collect();
            pose_basis.push(comp);
        }
    }

    let mut joint_parents = vec![-1i64];
    let mut skeleton_edges = Vec::new();
    let mut finger_chains = Vec::new();
    for fi in 0..5 {
        let base = 1 + 3 * fi;
        joint_parents.extend([0, base as i64, base as i64 + 1]);
        skeleton_edges.extend([[base, 0], [base + 1, base], [base + 2, base + 1], [16 + fi, base + 2]]);
        if fi > 0 {
            finger_chains.push([16 + fi, base + 2, base + 1, base]);
        }
    }

    let model = HandModel {
        name: format!("toy-hand-seed{}", config.seed),
        template_vertices: verts,
        faces,
        joint_parents,
        skinning_weights: skin,
        joint_regressor: regressor,
        shape_basis: shape,
        pose_basis,
        rest_pose: vec![[0.0; 3]; NUM_JOINTS],
        fingertip_vertex_ids: tips,
        finger_chains,
        skeleton_edges,
    };
    Ok(model)
}

/// Signed volume of a closed triangle mesh; positive for outward winding.
pub fn signed_volume(verts: &[[f64; 3]], faces: &[[usize; 3]]) -> f64 {
    faces
        .iter()
        .map(|f| {
            let (a, b, c) = (verts[f[0]], verts[f[1]], verts[f[2]]);
            crate::math::dot(&a, &cross(&sub(&b, &a), &sub(&c, &a))) / 6.0
        })
        .sum()
}
