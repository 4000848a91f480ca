use serde::{Deserialize, Serialize};

/// Rigid motion in world coordinates: `p ↦ R p + t` with
/// `R = Rz(γ) · Ry(β) · Rx(α)` and angles `[α, β, γ]` in radians.
///
/// Warping an image by a transform moves its content: the warped image at
/// world point `p` takes the value of the source at `t⁻¹(p)`.
///
/// Serialized as `{"rotation_deg": [..], "translation_mm": [..]}`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation_deg: [f64; 3],
    translation_mm: [f64; 3],
}

impl From<TransformRepr> for RigidTransform {
    fn from(r: TransformRepr) -> Self {
        RigidTransform::from_degrees(r.rotation_deg, r.translation_mm)
    }
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        TransformRepr { rotation_deg: t.rotation_degrees(), translation_mm: t.translation }
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        RigidTransform { rotation: [0.0; 3], translation: t }
    }

    /// Builds a transform from angles in degrees and translation in mm.
    pub fn from_degrees(rotation_deg: [f64; 3], translation: [f64; 3]) -> Self {
        RigidTransform { rotation: rotation_deg.map(f64::to_radians), translation }
    }

    pub fn rotation_degrees(&self) -> [f64; 3] {
        self.rotation.map(f64::to_degrees)
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == [0.0; 3] && self.translation == [0.0; 3]
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let [a, b, g] = self.rotation;
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sg, cg) = g.sin_cos();
        [
            [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
            [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
            [-sb, cb * sa, cb * ca],
        ]
    }

    pub fn from_matrix(r: [[f64; 3]; 3], translation: [f64; 3]) -> Self {
        let sb = (-r[2][0]).clamp(-1.0, 1.0);
        let b = sb.asin();
        let a = r[2][1].atan2(r[2][2]);
        let g = r[1][0].atan2(r[0][0]);
        RigidTransform { rotation: [a, b, g], translation }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.matrix();
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    pub fn inverse(&self) -> Self {
        let r = self.matrix();
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let t = self.translation;
        let mut ti = [0.0; 3];
        for i in 0..3 {
            ti[i] = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        Self::from_matrix(rt, ti)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        let ra = self.matrix();
        let rb = other.matrix();
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| ra[i][k] * rb[k][j]).sum();
            }
        }
        let t = self.apply(other.translation);
        Self::from_matrix(r, t)
    }

    /// Largest absolute rotation angle in degrees and translation norm in mm.
    pub fn magnitude(&self) -> (f64, f64) {
        let ang = self.rotation.iter().map(|a| a.abs().to_degrees()).fold(0.0, f64::max);
        let t = self.translation.iter().map(|v| v * v).sum::<f64>().sqrt();
        (ang, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compose_with_inverse_is_identity() {
        let t = RigidTransform::from_degrees([4.0, -3.0, 10.0], [2.0, -1.5, 0.5]);
        let id = t.compose(&t.inverse());
        for v in id.rotation.iter().chain(id.translation.iter()) {
            assert!(v.abs() < 1e-9, "{id:?}");
        }
    }

    #[test]
    fn euler_round_trip() {
        let t = RigidTransform::new([0.1, -0.2, 0.3], [1.0, 2.0, 3.0]);
        let u = RigidTransform::from_matrix(t.matrix(), t.translation);
        for a in 0..3 {
            assert!((t.rotation[a] - u.rotation[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn points_round_trip_through_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = RigidTransform::from_degrees([5.0, 2.0, -7.0], [3.0, -4.0, 1.0]);
        let inv = t.inverse();
        for _ in 0..100 {
            let p = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
            let q = inv.apply(t.apply(p));
            for a in 0..3 {
                assert!((p[a] - q[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotation_about_z_moves_x_to_y() {
        let t = RigidTransform::from_degrees([0.0, 0.0, 90.0], [0.0; 3]);
        let p = t.apply([1.0, 0.0, 0.0]);
        assert!((p[0]).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }
}
