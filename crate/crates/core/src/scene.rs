//! Gaussian primitives, the pinhole camera and screen-space projection.
//!
//! Conventions: the camera looks down its +z axis with x to the right and
//! y down. Pixel `(x, y)` is evaluated at the integer coordinate `(x, y)`,
//! so a point on the optical axis lands exactly on `(cx, cy)`.

use nalgebra::{Matrix2, Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Low-pass term added to the diagonal of every projected covariance (px²).
pub const COV_REGULARIZATION: f64 = 0.3;
/// Alpha values below this are treated as zero.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Alpha is clamped to this value from above.
pub const ALPHA_MAX: f64 = 0.99;
/// Gaussians at or closer than this camera-space depth are culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Largest object ID a scene may declare. ID 0 is the void class.
pub const MAX_OBJECTS: u32 = 255;

/// One anisotropic 3D Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub index: u32,
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Per-axis standard deviations.
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn validate(&self) -> Result<()> {
        let q = self.rotation.quaternion();
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "gaussian {}: rotation is not a unit quaternion",
                self.index
            )));
        }
        if !self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Data(format!(
                "gaussian {}: scale components must be positive",
                self.index
            )));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::Data(format!(
                "gaussian {}: opacity {} outside (0, 1]",
                self.index, self.opacity
            )));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!(
                "gaussian {}: non-finite position",
                self.index
            )));
        }
        Ok(())
    }

    /// World-space covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r * s2 * r.transpose()
    }
}

#[derive(Serialize, Deserialize)]
struct GaussianRecord {
    position: [f64; 3],
    /// `(w, x, y, z)`
    rotation: [f64; 4],
    scale: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl From<&Gaussian> for GaussianRecord {
    fn from(g: &Gaussian) -> Self {
        let q = g.rotation.quaternion();
        GaussianRecord {
            position: g.position.into(),
            rotation: [q.w, q.i, q.j, q.k],
            scale: g.scale.into(),
            opacity: g.opacity,
            color: g.color.into(),
        }
    }
}

impl GaussianRecord {
    fn into_gaussian(self, index: u32) -> Gaussian {
        let [w, x, y, z] = self.rotation;
        Gaussian {
            index,
            position: self.position.into(),
            // Stored as given so that `validate` can see a non-unit norm.
            rotation: UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)),
            scale: self.scale.into(),
            opacity: self.opacity,
            color: self.color.into(),
        }
    }
}

/// The reference (rest) configuration of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalScene {
    pub gaussians: Vec<Gaussian>,
    pub object_count: u32,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    gaussians: Vec<GaussianRecord>,
    object_count: u32,
}

impl Serialize for CanonicalScene {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SceneRecord {
            gaussians: self.gaussians.iter().map(GaussianRecord::from).collect(),
            object_count: self.object_count,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CanonicalScene {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = SceneRecord::deserialize(d)?;
        Ok(CanonicalScene {
            gaussians: rec
                .gaussians
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.into_gaussian(i as u32))
                .collect(),
            object_count: rec.object_count,
        })
    }
}

impl CanonicalScene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.position).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.object_count == 0 || self.object_count > MAX_OBJECTS {
            return Err(Error::Data(format!(
                "object_count {} outside 1..={MAX_OBJECTS}",
                self.object_count
            )));
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.index as usize != i {
                return Err(Error::Data(format!(
                    "gaussian indices must be contiguous: slot {i} holds index {}",
                    g.index
                )));
            }
            g.validate()?;
        }
        Ok(())
    }
}

/// Pinhole camera with a world-to-camera rigid extrinsic.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub extrinsic: Matrix4<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    /// Row-major 4×4.
    extrinsic: Vec<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl Serialize for Camera {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut extrinsic = Vec::with_capacity(16);
        for r in 0..4 {
            for c in 0..4 {
                extrinsic.push(self.extrinsic[(r, c)]);
            }
        }
        CameraRecord {
            extrinsic,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Camera {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = CameraRecord::deserialize(d)?;
        if rec.extrinsic.len() != 16 {
            return Err(serde::de::Error::custom("extrinsic must hold 16 values"));
        }
        Ok(Camera {
            extrinsic: Matrix4::from_row_slice(&rec.extrinsic),
            fx: rec.fx,
            fy: rec.fy,
            cx: rec.cx,
            cy: rec.cy,
            width: rec.width,
            height: rec.height,
        })
    }
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` is the approximate world
    /// direction that should appear as image-up (−y in pixel space).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let z = (target - eye).normalize();
        let x = z.cross(&-up).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        let mut extrinsic = Matrix4::identity();
        extrinsic.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        extrinsic.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera {
            extrinsic,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsic.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsic.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation();
        let orth = (r * r.transpose() - Matrix3::identity()).abs().max();
        if orth > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Data("camera rotation is not a proper rotation".into()));
        }
        let bottom = self.extrinsic.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(Error::Data("camera extrinsic bottom row must be (0,0,0,1)".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Data("camera focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Data("camera image size must be nonzero".into()));
        }
        Ok(())
    }
}

/// Screen-space footprint of a projected Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatFootprint {
    /// Slot of the source Gaussian in the scene it was projected from.
    pub source_index: u32,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
}

/// Projects one Gaussian through `cam` with the first-order (EWA)
/// approximation. Returns `None` when the Gaussian is culled.
pub fn project_gaussian(g: &Gaussian, slot: u32, cam: &Camera) -> Option<SplatFootprint> {
    let w = cam.rotation();
    let pc = w * g.position + cam.translation();
    let z = pc.z;
    if z <= NEAR_PLANE {
        return None;
    }
    let mean2d = Vector2::new(cam.fx * pc.x / z + cam.cx, cam.fy * pc.y / z + cam.cy);

    #[rustfmt::skip]
    let j = nalgebra::Matrix2x3::new(
        cam.fx / z, 0.0, -cam.fx * pc.x / (z * z),
        0.0, cam.fy / z, -cam.fy * pc.y / (z * z),
    );
    let t = j * w;
    let mut cov2d = t * g.covariance() * t.transpose();
    // Symmetrize against round-off before regularizing.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    cov2d[(0, 0)] += COV_REGULARIZATION;
    cov2d[(1, 1)] += COV_REGULARIZATION;

    let ex = 3.0 * cov2d[(0, 0)].sqrt();
    let ey = 3.0 * cov2d[(1, 1)].sqrt();
    let max_x = (cam.width - 1) as f64;
    let max_y = (cam.height - 1) as f64;
    if mean2d.x + ex < 0.0 || mean2d.x - ex > max_x || mean2d.y + ey < 0.0 || mean2d.y - ey > max_y {
        return None;
    }
    let conic = cov2d.try_inverse()?;
    Some(SplatFootprint {
        source_index: slot,
        mean2d,
        cov2d,
        conic,
        depth: z,
        opacity: g.opacity,
    })
}

impl SplatFootprint {
    /// Squared Mahalanobis distance of `pixel` from the footprint center.
    #[inline]
    pub fn mahalanobis2(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let c = &self.conic;
        c[(0, 0)] * dx * dx + (c[(0, 1)] + c[(1, 0)]) * dx * dy + c[(1, 1)] * dy * dy
    }

    /// Mahalanobis radius beyond which alpha drops under [`ALPHA_MIN`].
    pub fn cutoff_radius(&self) -> f64 {
        (2.0 * (self.opacity / ALPHA_MIN).ln()).max(0.0).sqrt()
    }

    #[inline]
    pub fn alpha_at(&self, px: f64, py: f64) -> f64 {
        let a = (self.opacity * (-0.5 * self.mahalanobis2(px, py)).exp()).min(ALPHA_MAX);
        if a < ALPHA_MIN {
            0.0
        } else {
            a
        }
    }
}

/// Opacity of a footprint at a pixel position.
pub fn gaussian_alpha(fp: &SplatFootprint, pixel: Vector2<f64>) -> f64 {
    fp.alpha_at(pixel.x, pixel.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn axis_camera(size: usize, f: f64) -> Camera {
        Camera {
            extrinsic: Matrix4::identity(),
            fx: f,
            fy: f,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
        }
    }

    fn iso(position: Vector3<f64>, s: f64, opacity: f64) -> Gaussian {
        Gaussian {
            index: 0,
            position,
            rotation: UnitQuaternion::identity(),
            scale: Vector3::repeat(s),
            opacity,
            color: Vector3::new(1.0, 0.0, 0.0),
        }
    }

    #[test]
    fn on_axis_point_hits_principal_point() {
        let cam = axis_camera(64, 50.0);
        let fp = project_gaussian(&iso(Vector3::new(0.0, 0.0, 5.0), 0.1, 0.5), 0, &cam).unwrap();
        assert_eq!(fp.mean2d, Vector2::new(32.0, 32.0));
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = axis_camera(64, 50.0);
        assert!(project_gaussian(&iso(Vector3::new(0.0, 0.0, -1.0), 0.1, 0.5), 0, &cam).is_none());
        assert!(project_gaussian(&iso(Vector3::new(0.0, 0.0, 0.01), 0.1, 0.5), 0, &cam).is_none());
    }

    #[test]
    fn off_screen_is_culled() {
        let cam = axis_camera(32, 20.0);
        assert!(project_gaussian(&iso(Vector3::new(50.0, 0.0, 5.0), 0.1, 0.5), 0, &cam).is_none());
    }

    #[test]
    fn isotropic_on_axis_covariance_matches_closed_form() {
        let (f, s, z) = (60.0, 0.2, 4.0);
        let cam = axis_camera(64, f);
        let fp = project_gaussian(&iso(Vector3::new(0.0, 0.0, z), s, 0.5), 0, &cam).unwrap();
        let expected = (f * s / z).powi(2) + COV_REGULARIZATION;
        assert_abs_diff_eq!(fp.cov2d[(0, 0)], expected, epsilon = 1e-6);
        assert_abs_diff_eq!(fp.cov2d[(1, 1)], expected, epsilon = 1e-6);
        assert_abs_diff_eq!(fp.cov2d[(0, 1)], 0.0, epsilon = 1e-12);
    }

    /// Numerical Jacobian of the projection, pushed through the covariance.
    #[test]
    fn covariance_matches_numerical_jacobian() {
        let cam = Camera::look_at(
            Vector3::new(0.3, -0.2, -4.0),
            Vector3::new(0.0, 0.1, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
            55.0,
            48.0,
            30.0,
            26.0,
            64,
            56,
        );
        let g = Gaussian {
            index: 0,
            position: Vector3::new(0.4, -0.3, 0.5),
            rotation: UnitQuaternion::from_euler_angles(0.3, -0.7, 1.1),
            scale: Vector3::new(0.05, 0.2, 0.11),
            opacity: 0.8,
            color: Vector3::zeros(),
        };
        let fp = project_gaussian(&g, 0, &cam).unwrap();
        let proj = |p: Vector3<f64>| {
            let c = cam.to_camera(&p);
            Vector2::new(cam.fx * c.x / c.z + cam.cx, cam.fy * c.y / c.z + cam.cy)
        };
        let h = 1e-6;
        let mut jac = nalgebra::Matrix2x3::zeros();
        for k in 0..3 {
            let mut dp = Vector3::zeros();
            dp[k] = h;
            let d = (proj(g.position + dp) - proj(g.position - dp)) / (2.0 * h);
            jac.set_column(k, &d);
        }
        let mut cov = jac * g.covariance() * jac.transpose();
        cov[(0, 0)] += COV_REGULARIZATION;
        cov[(1, 1)] += COV_REGULARIZATION;
        assert!((cov - fp.cov2d).abs().max() < 1e-6);
    }

    #[test]
    fn alpha_rules() {
        let cam = axis_camera(64, 50.0);
        let fp = project_gaussian(&iso(Vector3::new(0.0, 0.0, 5.0), 0.1, 0.5), 0, &cam).unwrap();
        assert_eq!(gaussian_alpha(&fp, fp.mean2d), 0.5);

        let mut opaque = fp.clone();
        opaque.opacity = 1.0;
        assert_eq!(gaussian_alpha(&opaque, opaque.mean2d), ALPHA_MAX);

        // Just past the cutoff along x: d² = conic_xx · dx².
        let d2 = 2.0 * (255.0f64 * 0.5).ln() + 1e-9;
        let dx = (d2 / fp.conic[(0, 0)]).sqrt();
        let px = Vector2::new(fp.mean2d.x + dx, fp.mean2d.y);
        assert_eq!(gaussian_alpha(&fp, px), 0.0);
    }

    #[test]
    fn identity_precomposition_is_bit_identical() {
        let cam = Camera::look_at(
            Vector3::new(0.1, 0.2, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            40.0,
            40.0,
            16.0,
            16.0,
            32,
            32,
        );
        let mut cam2 = cam.clone();
        cam2.extrinsic *= Matrix4::identity();
        let g = iso(Vector3::new(0.2, 0.1, 0.3), 0.1, 0.7);
        assert_eq!(project_gaussian(&g, 0, &cam), project_gaussian(&g, 0, &cam2));
    }

    #[test]
    fn camera_json_round_trip() {
        let cam = Camera::look_at(
            Vector3::new(0.1, 0.2, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            40.0,
            41.0,
            16.0,
            15.0,
            32,
            30,
        );
        cam.validate().unwrap();
        let s = serde_json::to_string(&cam).unwrap();
        let back: Camera = serde_json::from_str(&s).unwrap();
        assert_eq!(cam, back);
    }

    #[test]
    fn scene_validation_rejects_bad_primitives() {
        let mut scene = CanonicalScene {
            gaussians: vec![iso(Vector3::zeros(), 0.1, 0.5)],
            object_count: 1,
        };
        scene.validate().unwrap();
        scene.gaussians[0].opacity = 0.0;
        assert!(scene.validate().is_err());
        scene.gaussians[0].opacity = 0.5;
        scene.gaussians[0].scale.x = -1.0;
        assert!(scene.validate().is_err());
        scene.gaussians[0].scale.x = 0.1;
        scene.object_count = 256;
        assert!(scene.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn alpha_non_increasing_in_distance(
                sx in 0.02f64..0.4, sy in 0.02f64..0.4, ang in 0.0f64..std::f64::consts::TAU,
                op in 0.05f64..1.0, dirx in -1.0f64..1.0, diry in -1.0f64..1.0,
                r1 in 0.0f64..20.0, dr in 0.0f64..10.0,
            ) {
                let cam = axis_camera(64, 60.0);
                let g = Gaussian {
                    index: 0,
                    position: Vector3::new(0.0, 0.0, 4.0),
                    rotation: UnitQuaternion::from_euler_angles(0.0, 0.0, ang),
                    scale: Vector3::new(sx, sy, 0.1),
                    opacity: op,
                    color: Vector3::zeros(),
                };
                let fp = project_gaussian(&g, 0, &cam).unwrap();
                let n = (dirx * dirx + diry * diry).sqrt().max(1e-9);
                let (ux, uy) = (dirx / n, diry / n);
                let a1 = fp.alpha_at(fp.mean2d.x + ux * r1, fp.mean2d.y + uy * r1);
                let a2 = fp.alpha_at(fp.mean2d.x + ux * (r1 + dr), fp.mean2d.y + uy * (r1 + dr));
                prop_assert!(a2 <= a1);
            }

            #[test]
            fn mean_invariant_under_joint_rigid_motion(
                px in -1.0f64..1.0, py in -1.0f64..1.0, pz in -1.0f64..1.0,
                r0 in -3.0f64..3.0, r1 in -3.0f64..3.0, r2 in -3.0f64..3.0,
                t0 in -5.0f64..5.0, t1 in -5.0f64..5.0, t2 in -5.0f64..5.0,
            ) {
                let cam = Camera::look_at(
                    Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0),
                    40.0, 40.0, 32.0, 32.0, 64, 64,
                );
                let g = iso(Vector3::new(px, py, pz), 0.1, 0.6);
                let rot = nalgebra::Rotation3::from_euler_angles(r0, r1, r2);
                let tr = Vector3::new(t0, t1, t2);
                let mut world = Matrix4::identity();
                world.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
                world.fixed_view_mut::<3, 1>(0, 3).copy_from(&tr);
                let inv = world.try_inverse().unwrap();
                let mut cam2 = cam.clone();
                cam2.extrinsic = cam.extrinsic * inv;
                let mut g2 = g.clone();
                g2.position = rot * g.position + tr;
                g2.rotation = UnitQuaternion::from_rotation_matrix(&rot) * g.rotation;
                let a = project_gaussian(&g, 0, &cam).unwrap();
                let b = project_gaussian(&g2, 0, &cam2).unwrap();
                prop_assert!((a.mean2d - b.mean2d).norm() < 1e-6);
            }
        }
    }
}
