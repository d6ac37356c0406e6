//! Exact ray/primitive intersections.
//!
//! Every primitive is convex, so a line meets it in at most one parameter
//! interval. Each shape is an intersection of elementary constraints — axis
//! slabs, a quadric, a half-space — and each constraint restricts the ray
//! parameter to a simple set (an interval, a half-line, or the complement of
//! an interval). Intersecting those sets yields the chord in closed form.
//! Intervals are over the whole line: callers clip to t > 0 as needed.

use super::{Accent, Primitive, SceneSpec, CAP_FROM, STRIPE_HALF};

type Interval = (f64, f64);

const EMPTY: Interval = (f64::INFINITY, f64::NEG_INFINITY);
const ALL: Interval = (f64::NEG_INFINITY, f64::INFINITY);

fn isect(a: Interval, b: Interval) -> Interval {
    (a.0.max(b.0), a.1.min(b.1))
}

fn nonempty(i: Interval) -> bool {
    i.0 <= i.1
}

/// Parameters where |o + t·d| ≤ bound along one coordinate.
fn slab(o: f64, d: f64, bound: f64) -> Interval {
    if d == 0.0 {
        if o.abs() <= bound {
            ALL
        } else {
            EMPTY
        }
    } else {
        let a = (-bound - o) / d;
        let b = (bound - o) / d;
        (a.min(b), a.max(b))
    }
}

/// Solution set of a·t² + b·t + c ≤ 0: at most two disjoint intervals,
/// computed with the cancellation-safe quadratic formula.
fn quad_le(a: f64, b: f64, c: f64) -> [Interval; 2] {
    if a == 0.0 {
        return if b == 0.0 {
            [if c <= 0.0 { ALL } else { EMPTY }, EMPTY]
        } else if b > 0.0 {
            [(f64::NEG_INFINITY, -c / b), EMPTY]
        } else {
            [(-c / b, f64::INFINITY), EMPTY]
        };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        // Never touches zero: sign is the sign of `a` everywhere.
        return [if a > 0.0 { EMPTY } else { ALL }, EMPTY];
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let (mut r0, mut r1) = if q == 0.0 {
        (0.0, 0.0)
    } else {
        (q / a, c / q)
    };
    if r0 > r1 {
        std::mem::swap(&mut r0, &mut r1);
    }
    if a > 0.0 {
        [(r0, r1), EMPTY]
    } else {
        [(f64::NEG_INFINITY, r0), (r1, f64::INFINITY)]
    }
}

/// The parameter interval where the line o + t·d lies inside the primitive,
/// or None on a miss. The interval may extend to negative t (object behind
/// the origin); `d` need not be normalized.
pub fn ray_chord(scene: &SceneSpec, o: [f64; 3], d: [f64; 3]) -> Option<Interval> {
    let r = scene.radial();
    let h = scene.half_height();
    let pieces: [Interval; 2] = match scene.primitive {
        Primitive::Cube => [
            isect(
                slab(o[0], d[0], r),
                isect(slab(o[1], d[1], r), slab(o[2], d[2], r)),
            ),
            EMPTY,
        ],
        Primitive::Sphere => quad_le(
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2],
            2.0 * (o[0] * d[0] + o[1] * d[1] + o[2] * d[2]),
            o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - r * r,
        ),
        Primitive::Cylinder => {
            let q = quad_le(
                d[0] * d[0] + d[1] * d[1],
                2.0 * (o[0] * d[0] + o[1] * d[1]),
                o[0] * o[0] + o[1] * o[1] - r * r,
            );
            let z = slab(o[2], d[2], h);
            [isect(q[0], z), isect(q[1], z)]
        }
        Primitive::Cone => {
            // Solid cone = double cone {ρ² ≤ k²(h−z)²} ∩ slab {|z| ≤ h};
            // the slab kills the upper nappe, so at most one piece survives.
            let k = r / (2.0 * h);
            let w = h - o[2]; // h − z(t) = w − t·dz
            let q = quad_le(
                d[0] * d[0] + d[1] * d[1] - k * k * d[2] * d[2],
                2.0 * (o[0] * d[0] + o[1] * d[1] + k * k * d[2] * w),
                o[0] * o[0] + o[1] * o[1] - k * k * w * w,
            );
            let z = slab(o[2], d[2], h);
            [isect(q[0], z), isect(q[1], z)]
        }
    };
    // Convexity guarantees at most one non-empty piece away from degenerate
    // apex-grazing rays; prefer the longer piece if rounding yields two.
    match (nonempty(pieces[0]), nonempty(pieces[1])) {
        (false, false) => None,
        (true, false) => Some(pieces[0]),
        (false, true) => Some(pieces[1]),
        (true, true) => {
            if pieces[0].1 - pieces[0].0 >= pieces[1].1 - pieces[1].0 {
                Some(pieces[0])
            } else {
                Some(pieces[1])
            }
        }
    }
}

/// Parameters strictly inside (t0, t1) where the ray crosses an accent
/// boundary plane, sorted ascending. Between consecutive cuts (and the chord
/// endpoints) the material color is constant.
pub(crate) fn accent_cuts(scene: &SceneSpec, o: [f64; 3], d: [f64; 3], t0: f64, t1: f64) -> Vec<f64> {
    let h = scene.half_height();
    let planes: &[f64] = match scene.accent {
        Accent::None => &[],
        Accent::Stripe => &[-STRIPE_HALF, STRIPE_HALF],
        Accent::TopCap => &[CAP_FROM],
    };
    let mut cuts: Vec<f64> = planes
        .iter()
        .filter(|_| d[2] != 0.0)
        .map(|frac| (frac * h - o[2]) / d[2])
        .filter(|t| *t > t0 && *t < t1)
        .collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::analytic_field;

    fn scene(primitive: Primitive, accent: Accent) -> SceneSpec {
        SceneSpec {
            primitive,
            base_color: [0.9, 0.1, 0.1],
            size: 0.5,
            accent,
            accent_color: [0.1, 0.2, 0.9],
            density_inside: 7.0,
        }
    }

    fn assert_chord(got: Option<Interval>, want: Interval) {
        let (t0, t1) = got.expect("expected a hit");
        assert!(
            (t0 - want.0).abs() < 1e-12 && (t1 - want.1).abs() < 1e-12,
            "chord ({t0}, {t1}) != expected ({}, {})",
            want.0,
            want.1
        );
    }

    #[test]
    fn sphere_axial_chord() {
        let s = scene(Primitive::Sphere, Accent::None);
        let got = ray_chord(&s, [-2.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
        assert_chord(got, (1.5, 2.5));
    }

    #[test]
    fn cube_face_on_chord_and_miss() {
        let s = scene(Primitive::Cube, Accent::None);
        let a = s.radial();
        let got = ray_chord(&s, [-2.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
        assert_chord(got, (2.0 - a, 2.0 + a));
        assert!(ray_chord(&s, [-2.0, a + 1e-9, 0.0], [1.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn cylinder_vertical_and_radial_chords() {
        let s = scene(Primitive::Cylinder, Accent::None);
        let h = s.half_height();
        let vertical = ray_chord(&s, [0.1, 0.0, -2.0], [0.0, 0.0, 1.0]);
        assert_chord(vertical, (2.0 - h, 2.0 + h));
        let radial = ray_chord(&s, [-2.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
        assert_chord(radial, (2.0 - s.radial(), 2.0 + s.radial()));
    }

    #[test]
    fn cone_axis_and_midheight_chords() {
        let s = scene(Primitive::Cone, Accent::None);
        let (r, h) = (s.radial(), s.half_height());
        // Up the axis: enter through the base, exit at the apex.
        let axial = ray_chord(&s, [0.0, 0.0, -2.0], [0.0, 0.0, 1.0]);
        assert_chord(axial, (2.0 - h, 2.0 + h));
        // Across at z = 0 the allowed radius is half the base radius.
        let across = ray_chord(&s, [-2.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
        assert_chord(across, (2.0 - r / 2.0, 2.0 + r / 2.0));
        // Above the apex there is nothing.
        assert!(ray_chord(&s, [-2.0, 0.0, h + 1e-6], [1.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn chords_may_lie_behind_the_origin() {
        let s = scene(Primitive::Sphere, Accent::None);
        let got = ray_chord(&s, [2.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
        assert_chord(got, (-2.5, -1.5));
    }

    #[test]
    fn tangent_ray_gives_degenerate_chord() {
        let s = scene(Primitive::Sphere, Accent::None);
        let got = ray_chord(&s, [-2.0, 0.5, 0.0], [1.0, 0.0, 0.0]);
        if let Some((t0, t1)) = got {
            assert!(t1 - t0 < 1e-6, "tangent chord should be degenerate");
        }
    }

    #[test]
    fn accent_cuts_are_sorted_and_interior() {
        let s = scene(Primitive::Sphere, Accent::Stripe);
        let h = s.half_height();
        let (t0, t1) = ray_chord(&s, [0.0, 0.0, -2.0], [0.0, 0.0, 1.0]).unwrap();
        let cuts = accent_cuts(&s, [0.0, 0.0, -2.0], [0.0, 0.0, 1.0], t0, t1);
        assert_eq!(cuts.len(), 2);
        assert!(cuts[0] < cuts[1]);
        // The cuts sit exactly on the stripe planes.
        for t in &cuts {
            let z = -2.0 + t;
            assert!((z.abs() - STRIPE_HALF * h).abs() < 1e-12);
        }
        // A horizontal ray at fixed height never crosses a plane.
        let flat = accent_cuts(&s, [-2.0, 0.0, 0.1], [1.0, 0.0, 0.0], 0.0, 4.0);
        assert!(flat.is_empty());
    }

    /// Chord midpoints classify as inside, and points just outside the
    /// endpoints classify as outside (checks formula against membership).
    #[test]
    fn chord_endpoints_bracket_the_interior() {
        let at = |o: [f64; 3], d: [f64; 3], t: f64| {
            [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
        };
        for primitive in Primitive::ALL {
            let s = scene(primitive, Accent::None);
            let o = [-2.0, 0.07, -0.11];
            let d = [1.0, 0.0, 0.06];
            let (t0, t1) = ray_chord(&s, o, d).expect("central ray should hit");
            assert!(analytic_field(&s, at(o, d, 0.5 * (t0 + t1))).0 > 0.0);
            assert_eq!(analytic_field(&s, at(o, d, t0 - 1e-6)).0, 0.0);
            assert_eq!(analytic_field(&s, at(o, d, t1 + 1e-6)).0, 0.0);
        }
    }
}
