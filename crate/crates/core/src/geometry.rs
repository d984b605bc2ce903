//! Small fixed-size 3D helpers: vectors as `[T; 3]` and rigid poses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];

#[inline]
pub fn add<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Scalar>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm<T: Scalar>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist_sq<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    let d = sub(a, b);
    dot(d, d)
}

pub fn is_finite3<T: Scalar>(a: Vec3<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub fn cast3<A: Scalar, B: Scalar>(a: Vec3<A>) -> Vec3<B> {
    [B::of(a[0].as_f64()), B::of(a[1].as_f64()), B::of(a[2].as_f64())]
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    pub rotation: [[T; 3]; 3],
    pub translation: Vec3<T>,
}

impl<T: Scalar> Pose<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Pose {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            translation: [z, z, z],
        }
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Pose {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation about +z by `yaw` followed by translation.
    pub fn from_yaw(yaw: T, t: Vec3<T>) -> Self {
        let (s, c) = yaw.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Pose {
            rotation: [[c, -s, z], [s, c, z], [z, z, o]],
            translation: t,
        }
    }

    pub fn apply(&self, x: Vec3<T>) -> Vec3<T> {
        let r = &self.rotation;
        add(
            [dot(r[0], x), dot(r[1], x), dot(r[2], x)],
            self.translation,
        )
    }

    pub fn rotate(&self, x: Vec3<T>) -> Vec3<T> {
        let r = &self.rotation;
        [dot(r[0], x), dot(r[1], x), dot(r[2], x)]
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let nt = [-dot(rt[0], t), -dot(rt[1], t), -dot(rt[2], t)];
        Pose {
            rotation: rt,
            translation: nt,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose<T>) -> Self {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut r = [[T::zero(); 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Pose {
            rotation: r,
            translation: self.apply(other.translation),
        }
    }

    /// Checks `R Rᵀ = I` and `det R = +1` within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let r = &self.rotation;
        let finite = r.iter().flatten().chain(self.translation.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("pose has non-finite entries".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = dot(r[i], r[j]).as_f64();
                if (got - want).abs() > tol {
                    return Err(Error::Validation(format!(
                        "pose rotation not orthonormal: (R Rᵀ)[{i}][{j}] = {got}"
                    )));
                }
            }
        }
        let det = (r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]))
            .as_f64();
        if (det - 1.0).abs() > tol {
            return Err(Error::Validation(format!(
                "pose rotation determinant {det} is not +1"
            )));
        }
        Ok(())
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_row_major(&self) -> [T; 12] {
        let r = &self.rotation;
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2],
        ]
    }

    pub fn from_row_major(v: &[T; 12]) -> Self {
        Pose {
            rotation: [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]],
            translation: [v[3], v[7], v[11]],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_composes_to_identity() {
        let p = Pose::from_yaw(0.7f64, [1.0, -2.0, 0.5]);
        let q = p.compose(&p.inverse());
        let x = [3.0, 4.0, 5.0];
        let y = q.apply(x);
        for k in 0..3 {
            assert!((x[k] - y[k]).abs() < 1e-12);
        }
        p.validate(1e-9).unwrap();
    }

    #[test]
    fn reflection_rejected() {
        let mut p = Pose::<f64>::identity();
        p.rotation[2][2] = -1.0;
        assert!(p.validate(1e-6).is_err());
    }

    #[test]
    fn row_major_round_trip() {
        let p = Pose::from_yaw(-1.2f64, [0.1, 0.2, 0.3]);
        assert_eq!(Pose::from_row_major(&p.to_row_major()), p);
    }
}
