//! Small fixed-size linear algebra over [`Real`].

use crate::autodiff::Real;

pub type V3<T> = [T; 3];
pub type M3<T> = [[T; 3]; 3];

/// Rigid transform `x -> rot * x + trans`.
#[derive(Clone, Copy, Debug)]
pub struct Rigid<T> {
    pub rot: M3<T>,
    pub trans: V3<T>,
}

impl<T: Real> Rigid<T> {
    pub fn identity() -> Self {
        Rigid { rot: mat_identity(), trans: [T::zero(); 3] }
    }

    pub fn apply(&self, p: &V3<T>) -> V3<T> {
        add(&mat_vec(&self.rot, p), &self.trans)
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Rigid<T>) -> Rigid<T> {
        Rigid {
            rot: mat_mul(&self.rot, &other.rot),
            trans: self.apply(&other.trans),
        }
    }

    pub fn inverse(&self) -> Rigid<T> {
        let rt = transpose(&self.rot);
        let t = mat_vec(&rt, &self.trans);
        Rigid { rot: rt, trans: [-t[0], -t[1], -t[2]] }
    }

    /// Row-major homogeneous 4×4 matrix.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = self.rot[r][c].re();
            }
            m[r][3] = self.trans[r].re();
        }
        m[3][3] = 1.0;
        m
    }
}

pub fn lift<T: Real>(p: &[f64; 3]) -> V3<T> {
    [T::cst(p[0]), T::cst(p[1]), T::cst(p[2])]
}

#[inline]
pub fn add<T: Real>(a: &V3<T>, b: &V3<T>) -> V3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Real>(a: &V3<T>, b: &V3<T>) -> V3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Real>(a: &V3<T>, s: T) -> V3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Real>(a: &V3<T>, b: &V3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Real>(a: &V3<T>, b: &V3<T>) -> V3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub fn mat_identity<T: Real>() -> M3<T> {
    let (o, z) = (T::cst(1.0), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

#[inline]
pub fn mat_vec<T: Real>(m: &M3<T>, v: &V3<T>) -> V3<T> {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

pub fn mat_mul<T: Real>(a: &M3<T>, b: &M3<T>) -> M3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

pub fn transpose<T: Real>(m: &M3<T>) -> M3<T> {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn det(m: &M3<f64>) -> f64 {
    dot(&m[0], &cross(&m[1], &m[2]))
}
