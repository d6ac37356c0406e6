//! Camera rig and the ground-truth volume renderer.
//!
//! Cameras sit on a fixed orbit looking at the origin and shoot one ray per
//! pixel. Because scene media are piecewise constant along any ray, the
//! renderer first computes the exact chord through the primitive, subdivides
//! it at accent boundaries, and then runs discrete transmittance compositing
//! over midpoint samples. On a constant segment that sum telescopes to the
//! exact integral, so the images carry no quadrature bias for tests to absorb.

use super::geom::{accent_cuts, ray_chord};
use super::{analytic_field, SceneSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par;
use serde::{Deserialize, Serialize};

/// Azimuth positions on the orbit (12° apart).
pub const N_AZIMUTHS: usize = 30;

/// Orbit radius: well outside the unit ball that bounds every scene.
pub const DEFAULT_RADIUS: f64 = 2.5;

/// Focal length in image half-widths; atan(1/2.2) ≈ 24° half-FOV frames the
/// unit ball with some margin from the default radius.
pub const DEFAULT_FOCAL: f64 = 2.2;

/// The two elevation rings (radians). Single-ring datasets use ring 0.
pub const ELEVATION_RINGS: [f64; 2] = [0.0, 0.35];

/// Constant background composited behind every scene: white.
pub const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];

/// Along-ray sample count for ground-truth renders.
pub const GT_SAMPLES: usize = 256;

/// Square resolutions the dataset pipeline supports.
pub const RESOLUTIONS: [usize; 4] = [8, 16, 32, 64];

/// A camera on the orbit: azimuth slot, elevation ring, radius, and a pinhole
/// with the given focal length and square image size, looking at the origin
/// with the world z axis up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth_index: usize,
    /// Elevation in radians, in (−π/2, π/2).
    pub elevation: f64,
    pub radius: f64,
    /// Focal length in units of the image half-width.
    pub focal: f64,
    pub image_size: usize,
}

impl CameraPose {
    pub fn new(
        azimuth_index: usize,
        elevation: f64,
        radius: f64,
        focal: f64,
        image_size: usize,
    ) -> Result<Self> {
        if azimuth_index >= N_AZIMUTHS {
            return Err(Error::InvalidArgument {
                op: "camera_pose",
                reason: format!("azimuth index {azimuth_index} outside [0, {N_AZIMUTHS})"),
            });
        }
        if !(radius > 1.0) || !(focal > 0.0) || elevation.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::InvalidArgument {
                op: "camera_pose",
                reason: format!(
                    "need radius > 1, focal > 0, |elevation| < π/2; got {radius}, {focal}, {elevation}"
                ),
            });
        }
        Ok(CameraPose {
            azimuth_index,
            elevation,
            radius,
            focal,
            image_size,
        })
    }

    /// Azimuth angle in radians: 12° × index.
    pub fn azimuth(&self) -> f64 {
        std::f64::consts::TAU * self.azimuth_index as f64 / N_AZIMUTHS as f64
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> [f64; 3] {
        let (a, e) = (self.azimuth(), self.elevation);
        [
            self.radius * e.cos() * a.cos(),
            self.radius * e.cos() * a.sin(),
            self.radius * e.sin(),
        ]
    }

    /// Orthonormal (right, up, forward), forward aimed at the origin.
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let p = self.position();
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let f = [-p[0] / n, -p[1] / n, -p[2] / n];
        // right = forward × world-up, normalized; elevation < π/2 keeps the
        // cross product away from zero.
        let rx = f[1];
        let ry = -f[0];
        let rn = (rx * rx + ry * ry).sqrt();
        let r = [rx / rn, ry / rn, 0.0];
        let u = [
            r[1] * f[2] - r[2] * f[1],
            r[2] * f[0] - r[0] * f[2],
            r[0] * f[1] - r[1] * f[0],
        ];
        (r, u, f)
    }

    /// The ray through the center of pixel (row, col): origin and unit
    /// direction. Row 0 is the top of the image.
    pub fn pixel_ray(&self, row: usize, col: usize) -> ([f64; 3], [f64; 3]) {
        let n = self.image_size as f64;
        let u = (col as f64 + 0.5) / n * 2.0 - 1.0;
        let v = 1.0 - (row as f64 + 0.5) / n * 2.0;
        let (r, up, f) = self.basis();
        let mut d = [
            f[0] + (u * r[0] + v * up[0]) / self.focal,
            f[1] + (u * r[1] + v * up[1]) / self.focal,
            f[2] + (u * r[2] + v * up[2]) / self.focal,
        ];
        let dn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        d = [d[0] / dn, d[1] / dn, d[2] / dn];
        (self.position(), d)
    }
}

/// The full orbit in ring-major order: `rings` × 30 poses.
pub fn camera_rig(
    rings: usize,
    radius: f64,
    focal: f64,
    image_size: usize,
) -> Result<Vec<CameraPose>> {
    if rings == 0 || rings > ELEVATION_RINGS.len() {
        return Err(Error::InvalidArgument {
            op: "camera_rig",
            reason: format!("rings must be 1 or 2, got {rings}"),
        });
    }
    let mut poses = Vec::with_capacity(rings * N_AZIMUTHS);
    for &elevation in &ELEVATION_RINGS[..rings] {
        for az in 0..N_AZIMUTHS {
            poses.push(CameraPose::new(az, elevation, radius, focal, image_size)?);
        }
    }
    Ok(poses)
}

/// Transmittance compositing along one ray with `n_samples` midpoint samples
/// spread over the chord's constant-material segments (each segment gets its
/// length-proportional share, at least one). Returns the composited RGB with
/// the residual transmittance times the white background.
pub fn integrate_ray(scene: &SceneSpec, o: [f64; 3], d: [f64; 3], n_samples: usize) -> [f64; 3] {
    assert!(n_samples >= 1);
    let Some((t0, t1)) = ray_chord(scene, o, d) else {
        return BACKGROUND;
    };
    let total = t1 - t0;
    if total <= 0.0 {
        return BACKGROUND;
    }
    debug_assert!(t0 > 0.0, "camera inside the scene volume");

    let cuts = accent_cuts(scene, o, d, t0, t1);
    let mut bounds = Vec::with_capacity(cuts.len() + 2);
    bounds.push(t0);
    bounds.extend(cuts);
    bounds.push(t1);

    let mut trans = 1.0;
    let mut rgb = [0.0f64; 3];
    for pair in bounds.windows(2) {
        let len = pair[1] - pair[0];
        if len <= 0.0 {
            continue;
        }
        let n = ((n_samples as f64 * len / total).ceil() as usize).max(1);
        let delta = len / n as f64;
        for i in 0..n {
            let t = pair[0] + (i as f64 + 0.5) * delta;
            let (sigma, c) = analytic_field(scene, [
                o[0] + t * d[0],
                o[1] + t * d[1],
                o[2] + t * d[2],
            ]);
            let alpha = 1.0 - (-sigma * delta).exp();
            for ch in 0..3 {
                rgb[ch] += trans * alpha * c[ch];
            }
            trans *= 1.0 - alpha;
        }
    }
    for ch in 0..3 {
        rgb[ch] += trans * BACKGROUND[ch];
    }
    rgb
}

/// Renders one view of a scene to a [3, resolution, resolution] image in
/// [0,1], one ray per pixel, [`GT_SAMPLES`] samples per ray. The resolution
/// must be one of [`RESOLUTIONS`] and match the pose's image size. Pixels
/// are rendered in parallel.
pub fn render_ground_truth(
    scene: &SceneSpec,
    pose: &CameraPose,
    resolution: usize,
) -> Result<Tensor<f64>> {
    scene.validate()?;
    if !RESOLUTIONS.contains(&resolution) {
        return Err(Error::InvalidArgument {
            op: "render_ground_truth",
            reason: format!("resolution {resolution} not in {RESOLUTIONS:?}"),
        });
    }
    if pose.image_size != resolution {
        return Err(Error::InvalidArgument {
            op: "render_ground_truth",
            reason: format!(
                "pose image size {} does not match resolution {resolution}",
                pose.image_size
            ),
        });
    }
    let pixels = par::map_indexed(resolution * resolution, |i| {
        let (o, d) = pose.pixel_ray(i / resolution, i % resolution);
        integrate_ray(scene, o, d, GT_SAMPLES)
    });
    let mut img = Tensor::zeros(vec![3, resolution, resolution]);
    for (i, px) in pixels.iter().enumerate() {
        for ch in 0..3 {
            img.data_mut()[ch * resolution * resolution + i] = px[ch];
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{Accent, Primitive, COLORS};

    fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    #[test]
    fn basis_is_orthonormal_and_aims_at_origin() {
        for az in [0, 7, 29] {
            for el in ELEVATION_RINGS {
                let pose = CameraPose::new(az, el, DEFAULT_RADIUS, DEFAULT_FOCAL, 16).unwrap();
                let (r, u, f) = pose.basis();
                for v in [r, u, f] {
                    assert!((dot(v, v) - 1.0).abs() < 1e-12);
                }
                assert!(dot(r, u).abs() < 1e-12);
                assert!(dot(r, f).abs() < 1e-12);
                assert!(dot(u, f).abs() < 1e-12);
                let p = pose.position();
                let to_origin = [-p[0], -p[1], -p[2]];
                assert!((dot(f, to_origin) - DEFAULT_RADIUS).abs() < 1e-12);
                // Up stays on the sky side.
                assert!(u[2] > 0.0);
            }
        }
    }

    #[test]
    fn pixel_rays_are_unit_and_frame_the_object() {
        let pose = CameraPose::new(3, 0.35, DEFAULT_RADIUS, DEFAULT_FOCAL, 16).unwrap();
        let (_, _, f) = pose.basis();
        for (row, col) in [(0, 0), (0, 15), (15, 0), (15, 15), (8, 8)] {
            let (_, d) = pose.pixel_ray(row, col);
            assert!((dot(d, d) - 1.0).abs() < 1e-12);
            assert!(dot(d, f) > 0.8, "corner rays stay near the axis");
        }
    }

    #[test]
    fn object_fits_inside_the_frame() {
        let scene = SceneSpec {
            primitive: Primitive::Sphere,
            base_color: COLORS[2].1,
            size: 0.7,
            accent: Accent::None,
            accent_color: COLORS[2].1,
            density_inside: 10.0,
        };
        let pose = CameraPose::new(0, 0.0, DEFAULT_RADIUS, DEFAULT_FOCAL, 16).unwrap();
        let img = render_ground_truth(&scene, &pose, 16).unwrap();
        let d = img.data();
        let n = 16 * 16;
        // Border pixels all background, some interior pixels clearly object.
        for i in 0..16 {
            for idx in [i, 15 * 16 + i, i * 16, i * 16 + 15] {
                assert_eq!(d[idx], 1.0, "border pixel {idx} not background");
            }
        }
        let center = 8 * 16 + 8;
        assert!(d[n + center] < 0.5, "sphere invisible at the center");
    }

    #[test]
    fn resolution_contract_is_enforced() {
        let scene = SceneSpec {
            primitive: Primitive::Cube,
            base_color: COLORS[0].1,
            size: 0.5,
            accent: Accent::None,
            accent_color: COLORS[0].1,
            density_inside: 5.0,
        };
        let pose = CameraPose::new(0, 0.0, DEFAULT_RADIUS, DEFAULT_FOCAL, 12).unwrap();
        assert!(render_ground_truth(&scene, &pose, 12).is_err());
        let pose = CameraPose::new(0, 0.0, DEFAULT_RADIUS, DEFAULT_FOCAL, 16).unwrap();
        assert!(render_ground_truth(&scene, &pose, 32).is_err());
    }

    #[test]
    fn opaque_black_object_blocks_the_background() {
        let scene = SceneSpec {
            primitive: Primitive::Sphere,
            base_color: [0.0, 0.0, 0.0],
            size: 0.5,
            accent: Accent::None,
            accent_color: [0.0, 0.0, 0.0],
            density_inside: 1000.0,
        };
        let got = integrate_ray(&scene, [-2.5, 0.0, 0.0], [1.0, 0.0, 0.0], GT_SAMPLES);
        for ch in 0..3 {
            assert!(got[ch] < 1e-12, "background leaked through an opaque object");
        }
    }

    #[test]
    fn pose_validation_rejects_bad_rigs() {
        assert!(CameraPose::new(30, 0.0, 2.5, 2.2, 16).is_err());
        assert!(CameraPose::new(0, 0.0, 0.9, 2.2, 16).is_err());
        assert!(CameraPose::new(0, 1.6, 2.5, 2.2, 16).is_err());
        assert!(camera_rig(3, 2.5, 2.2, 16).is_err());
        assert!(camera_rig(0, 2.5, 2.2, 16).is_err());
    }
}
