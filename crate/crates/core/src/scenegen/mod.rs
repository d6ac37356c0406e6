//! Procedural multi-view dataset of colored primitives.
//!
//! Each scene is a single convex primitive — cube, sphere, cylinder or cone —
//! centered at the origin, with a flat interior density, a base color, and an
//! optional accent region (a horizontal stripe or a top cap) in a second
//! color. Density and color are analytic in position, so ground-truth images
//! have closed-form per-ray integrals and the learned components can be
//! checked against exact geometry instead of other learned components.
//!
//! Views come from a fixed orbit: 30 azimuths at 12° spacing on one or two
//! elevation rings, all cameras looking at the origin from the same radius.
//! Text labels pair each scene with a coarse description (color, shape) and a
//! full one (color, shape, size word, accent word) over a closed vocabulary.

mod dataset;
mod geom;
mod render;
mod vocab;

pub use dataset::{
    generate_dataset, load_image, load_png, save_image, save_png, DatasetManifest, SceneRecord,
    Split, ViewRecord,
};
pub use geom::ray_chord;
pub use render::{
    camera_rig, integrate_ray, render_ground_truth, CameraPose, BACKGROUND, DEFAULT_FOCAL,
    DEFAULT_RADIUS, ELEVATION_RINGS, GT_SAMPLES, N_AZIMUTHS, RESOLUTIONS,
};
pub use vocab::{
    accent_word, coarse_subsequence, color_word, scene_texts, size_word, token_id, tokenize,
    vocabulary, TextLabel, ACCENT_WORDS, COLORS, NULL_ID, NULL_WORD, PRIMITIVE_WORDS, SIZE_WORDS,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// The four shapes. All are symmetric about the vertical (z) axis; the cube
/// is axis-aligned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Cube,
    Sphere,
    Cylinder,
    Cone,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [
        Primitive::Cube,
        Primitive::Sphere,
        Primitive::Cylinder,
        Primitive::Cone,
    ];

    /// The vocabulary word naming this shape.
    pub fn word(self) -> &'static str {
        vocab::PRIMITIVE_WORDS[self as usize]
    }
}

/// Accent region recoloring part of the shape's interior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Accent {
    /// No accent; the shape is a single color.
    None,
    /// Horizontal band around the equator: |z| ≤ 0.25 × half-height.
    Stripe,
    /// Everything above z = 0.4 × half-height.
    TopCap,
}

impl Accent {
    pub const ALL: [Accent; 3] = [Accent::None, Accent::Stripe, Accent::TopCap];
}

pub(crate) const STRIPE_HALF: f64 = 0.25;
pub(crate) const CAP_FROM: f64 = 0.4;

/// One scene: a primitive with colors, size, accent, and interior density.
///
/// `size` is the circumradius — the radius of the smallest origin-centered
/// ball containing the shape. Parameterizing by the bound itself (rather
/// than per-primitive side lengths) keeps every scene inside the unit ball
/// by construction and hands the renderer an exact bounding sphere per ray.
/// Generated datasets draw sizes from [0.3, 0.7].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitive: Primitive,
    /// RGB in [0,1]³.
    pub base_color: [f64; 3],
    /// Circumradius in scene units.
    pub size: f64,
    pub accent: Accent,
    /// Color of the accent region; unused when `accent` is `None`.
    pub accent_color: [f64; 3],
    /// Interior density σ₀ ≥ 0 (zero renders as pure background).
    pub density_inside: f64,
}

impl SceneSpec {
    /// Rejects colors outside [0,1], non-finite fields, and sizes outside
    /// (0, 1] — beyond 1 the shape would leave the unit ball.
    pub fn validate(&self) -> Result<()> {
        let color_ok = |c: &[f64; 3]| c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v));
        if !color_ok(&self.base_color) || !color_ok(&self.accent_color) {
            return Err(Error::InvalidArgument {
                op: "scene_spec",
                reason: "colors must lie in [0,1]^3".into(),
            });
        }
        if !(self.size > 0.0 && self.size <= 1.0) || !self.size.is_finite() {
            return Err(Error::InvalidArgument {
                op: "scene_spec",
                reason: format!("size {} outside (0, 1]", self.size),
            });
        }
        if !(self.density_inside >= 0.0) || !self.density_inside.is_finite() {
            return Err(Error::InvalidArgument {
                op: "scene_spec",
                reason: format!("density {} must be finite and ≥ 0", self.density_inside),
            });
        }
        Ok(())
    }

    /// Half-extent along the vertical axis.
    pub fn half_height(&self) -> f64 {
        match self.primitive {
            Primitive::Cube => self.size / 3f64.sqrt(),
            Primitive::Sphere => self.size,
            Primitive::Cylinder | Primitive::Cone => self.size / 2f64.sqrt(),
        }
    }

    /// Horizontal radius: half side for the cube, sphere radius, cylinder
    /// radius, cone base radius. Each shape's aspect ratio is fixed at 1:1
    /// (radius = half-height), which makes the circumradius equal `size`
    /// exactly: corner √(3a²) for the cube, rim √(r²+h²) for cylinder and
    /// cone.
    pub fn radial(&self) -> f64 {
        self.half_height()
    }
}

/// Inside test with a closed boundary (surface points count as inside).
fn inside(scene: &SceneSpec, p: [f64; 3]) -> bool {
    let r = scene.radial();
    let h = scene.half_height();
    let rho2 = p[0] * p[0] + p[1] * p[1];
    match scene.primitive {
        Primitive::Cube => p.iter().all(|x| x.abs() <= r),
        Primitive::Sphere => rho2 + p[2] * p[2] <= r * r,
        Primitive::Cylinder => p[2].abs() <= h && rho2 <= r * r,
        Primitive::Cone => {
            // Apex at +h, closed base disk at −h.
            let allowed = r * (h - p[2]) / (2.0 * h);
            p[2].abs() <= h && rho2 <= allowed * allowed
        }
    }
}

/// Whether height `z` falls in the scene's accent region.
pub(crate) fn in_accent(scene: &SceneSpec, z: f64) -> bool {
    let h = scene.half_height();
    match scene.accent {
        Accent::None => false,
        Accent::Stripe => z.abs() <= STRIPE_HALF * h,
        Accent::TopCap => z >= CAP_FROM * h,
    }
}

/// Density and color of the scene at a point: (σ₀, color) inside the
/// primitive — accent region recolored — and (0, base color) outside. The
/// boundary is closed (counts as inside); there is no falloff.
pub fn analytic_field(scene: &SceneSpec, p: [f64; 3]) -> (f64, [f64; 3]) {
    if !inside(scene, p) {
        return (0.0, scene.base_color);
    }
    let c = if in_accent(scene, p[2]) {
        scene.accent_color
    } else {
        scene.base_color
    };
    (scene.density_inside, c)
}
