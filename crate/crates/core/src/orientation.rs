//! Orientation representations and conversions.
//!
//! The conversion chain is Euler angles (Bunge ZXZ) -> unit quaternion ->
//! axis-angle -> homochoric vector -> cubochoric coordinates. The cubochoric
//! step is the standard equal-volume map between the homochoric ball of
//! radius (3*pi/4)^(1/3) and the cube of half-edge pi^(2/3)/2: the cube is
//! first squeezed into a cylinder with a 2D equal-area curved-square-to-disc
//! map applied per cross-section, then the cylinder is bent into the ball
//! with a z-dependent radial map. Both directions are closed-form and are
//! validated by round-trip tests rather than external tables.
//!
//! No crystal-symmetry reduction happens anywhere in this module: cubochoric
//! vectors are compared with the plain Euclidean metric downstream.

use std::f64::consts::PI;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OrientationError {
    #[error("cubochoric point {coords:?} lies outside the cube of half-edge {half_edge}")]
    OutOfDomain { coords: [f64; 3], half_edge: f64 },
}

/// Half-edge of the cubochoric cube, pi^(2/3)/2.
pub const CUBOCHORIC_HALF_EDGE: f64 = 1.072_514_698_555_512_7;

/// Radius of the homochoric ball, (3*pi/4)^(1/3).
pub const HOMOCHORIC_RADIUS: f64 = 1.330_670_039_491_468_8;

/// Tolerance applied to the cube-membership test.
pub const CUBE_TOLERANCE: f64 = 1e-9;

// Derived map constants.
const SC: f64 = 0.897_772_786_961_286_2; // (pi/6)^(1/6): cube pre-scale
const PREF: f64 = 1.381_976_597_885_342; // sqrt(6/pi)
const PREK: f64 = 1.643_456_402_972_503; // ball_radius * 2^(1/4) / (sc * half_edge)
const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Bunge ZXZ Euler angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    pub phi1: f64,
    /// The middle (rotation about x') angle, conventionally written Phi.
    pub phi: f64,
    pub phi2: f64,
}

impl EulerAngles {
    /// Canonicalizes to phi1, phi2 in [0, 2*pi) and phi in [0, pi].
    pub fn new(phi1: f64, phi: f64, phi2: f64) -> EulerAngles {
        let two_pi = 2.0 * PI;
        let mut phi1 = phi1.rem_euclid(two_pi);
        let mut phi = phi.rem_euclid(two_pi);
        let mut phi2 = phi2.rem_euclid(two_pi);
        if phi > PI {
            // Rz(a) Rx(phi) Rz(b) == Rz(a+pi) Rx(2*pi-phi) Rz(b+pi)
            phi = two_pi - phi;
            phi1 = (phi1 + PI).rem_euclid(two_pi);
            phi2 = (phi2 + PI).rem_euclid(two_pi);
        }
        EulerAngles { phi1, phi, phi2 }
    }
}

/// Unit quaternion with non-negative scalar part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and sign-canonicalizes (w >= 0).
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> UnitQuaternion {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let s = if w < 0.0 { -1.0 / n } else { 1.0 / n };
        UnitQuaternion {
            w: w * s,
            x: x * s,
            y: y * s,
            z: z * s,
        }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> UnitQuaternion {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 {
            return UnitQuaternion::IDENTITY;
        }
        let (s, c) = (angle / 2.0).sin_cos();
        UnitQuaternion::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    /// Hamilton product; `self * rhs` applies `rhs` first.
    pub fn mul(&self, rhs: &UnitQuaternion) -> UnitQuaternion {
        UnitQuaternion::new(
            self.w * rhs.w - self.x * rhs.x - self.y * rhs.y - self.z * rhs.z,
            self.w * rhs.x + self.x * rhs.w + self.y * rhs.z - self.z * rhs.y,
            self.w * rhs.y - self.x * rhs.z + self.y * rhs.w + self.z * rhs.x,
            self.w * rhs.z + self.x * rhs.y - self.y * rhs.x + self.z * rhs.w,
        )
    }

    pub fn conjugate(&self) -> UnitQuaternion {
        UnitQuaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn dot(&self, rhs: &UnitQuaternion) -> f64 {
        self.w * rhs.w + self.x * rhs.x + self.y * rhs.y + self.z * rhs.z
    }

    /// Rotation angle in [0, pi].
    pub fn angle(&self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }

    /// True if both quaternions represent the same rotation within `tol`
    /// (quaternion double cover: q and -q are the same rotation).
    pub fn same_rotation(&self, rhs: &UnitQuaternion, tol: f64) -> bool {
        self.dot(rhs).abs() > 1.0 - tol
    }
}

/// Equal-volume cube coordinates of a rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cubochoric {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Cubochoric {
    pub fn as_array(&self) -> [f64; 3] {
        [self.c1, self.c2, self.c3]
    }

    pub fn from_array(a: [f64; 3]) -> Cubochoric {
        Cubochoric {
            c1: a[0],
            c2: a[1],
            c3: a[2],
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.c1.abs().max(self.c2.abs()).max(self.c3.abs())
    }

    pub fn is_inside(&self) -> bool {
        self.max_norm() <= CUBOCHORIC_HALF_EDGE + CUBE_TOLERANCE
    }
}

// ---- Euler <-> quaternion ----

/// Bunge ZXZ composition: rotate phi1 about z, phi about the new x,
/// phi2 about the newest z.
pub fn euler_to_quaternion(e: &EulerAngles) -> UnitQuaternion {
    let qz1 = UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], e.phi1);
    let qx = UnitQuaternion::from_axis_angle([1.0, 0.0, 0.0], e.phi);
    let qz2 = UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], e.phi2);
    qz1.mul(&qx).mul(&qz2)
}

pub fn quaternion_to_euler(q: &UnitQuaternion) -> EulerAngles {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    // rotation matrix rows
    let r00 = 1.0 - 2.0 * (y * y + z * z);
    let r10 = 2.0 * (x * y + w * z);
    let r02 = 2.0 * (x * z + w * y);
    let r12 = 2.0 * (y * z - w * x);
    let r20 = 2.0 * (x * z - w * y);
    let r21 = 2.0 * (y * z + w * x);
    let r22 = 1.0 - 2.0 * (x * x + y * y);

    let phi = r22.clamp(-1.0, 1.0).acos();
    if phi.sin() > 1e-9 {
        EulerAngles::new(r02.atan2(-r12), phi, r20.atan2(r21))
    } else {
        // gimbal degenerate: the z rotations merge; put everything in phi1
        EulerAngles::new(r10.atan2(r00), phi, 0.0)
    }
}

// ---- quaternion <-> homochoric ----

pub fn quaternion_to_homochoric(q: &UnitQuaternion) -> [f64; 3] {
    let v = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
    if v < 1e-300 {
        return [0.0, 0.0, 0.0];
    }
    let theta = 2.0 * v.atan2(q.w);
    let f = (0.75 * (theta - theta.sin())).cbrt();
    [f * q.x / v, f * q.y / v, f * q.z / v]
}

/// Solves theta - sin(theta) = t on [0, pi] (monotone increasing).
fn solve_theta(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let u = (6.0 * t).cbrt();
    let mut theta = (u + u * u * u / 60.0).min(PI);
    let (mut lo, mut hi) = (0.0f64, PI);
    for _ in 0..60 {
        let g = theta - theta.sin() - t;
        if g > 0.0 {
            hi = theta;
        } else {
            lo = theta;
        }
        let dg = 1.0 - theta.cos();
        let next = if dg > 1e-14 {
            theta - g / dg
        } else {
            0.5 * (lo + hi)
        };
        let next = if next.is_finite() && next > lo && next < hi {
            next
        } else {
            0.5 * (lo + hi)
        };
        if (next - theta).abs() < 1e-15 {
            return next;
        }
        theta = next;
    }
    theta
}

pub fn homochoric_to_quaternion(h: [f64; 3]) -> UnitQuaternion {
    let f = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
    if f < 1e-300 {
        return UnitQuaternion::IDENTITY;
    }
    let t = 4.0 * f * f * f / 3.0;
    let theta = solve_theta(t.min(PI));
    let (s, c) = (theta / 2.0).sin_cos();
    UnitQuaternion::new(c, s * h[0] / f, s * h[1] / f, s * h[2] / f)
}

// ---- homochoric ball <-> cubochoric cube ----

/// Which of the six pyramids (apex at the origin, base on a cube face)
/// contains the point. 0/1: +/-z, 2/3: +/-x, 4/5: +/-y.
fn pyramid(v: [f64; 3]) -> usize {
    let [x, y, z] = v;
    if x.abs() <= z && y.abs() <= z {
        0
    } else if x.abs() <= -z && y.abs() <= -z {
        1
    } else if z.abs() <= x && y.abs() <= x {
        2
    } else if z.abs() <= -x && y.abs() <= -x {
        3
    } else if x.abs() <= y && z.abs() <= y {
        4
    } else {
        5
    }
}

fn rotate_into_pyramid(v: [f64; 3], p: usize) -> [f64; 3] {
    match p {
        0 | 1 => v,
        2 | 3 => [v[1], v[2], v[0]],
        _ => [v[2], v[0], v[1]],
    }
}

fn rotate_out_of_pyramid(v: [f64; 3], p: usize) -> [f64; 3] {
    match p {
        0 | 1 => v,
        2 | 3 => [v[2], v[0], v[1]],
        _ => [v[1], v[2], v[0]],
    }
}

/// Cube -> ball leg of the equal-volume map.
pub fn cubochoric_to_homochoric(c: &Cubochoric) -> Result<[f64; 3], OrientationError> {
    if !c.is_inside() {
        return Err(OrientationError::OutOfDomain {
            coords: c.as_array(),
            half_edge: CUBOCHORIC_HALF_EDGE,
        });
    }
    let clamped = [
        c.c1.clamp(-CUBOCHORIC_HALF_EDGE, CUBOCHORIC_HALF_EDGE),
        c.c2.clamp(-CUBOCHORIC_HALF_EDGE, CUBOCHORIC_HALF_EDGE),
        c.c3.clamp(-CUBOCHORIC_HALF_EDGE, CUBOCHORIC_HALF_EDGE),
    ];
    if clamped == [0.0, 0.0, 0.0] {
        return Ok([0.0, 0.0, 0.0]);
    }
    let p = pyramid(clamped);
    let r = rotate_into_pyramid(clamped, p);
    let (x, y, z) = (SC * r[0], SC * r[1], SC * r[2]);

    let out = if x == 0.0 && y == 0.0 {
        [0.0, 0.0, PREF * z]
    } else {
        // curved square -> disc (per cross-section), then cylinder -> ball
        let (t1, t2) = if y.abs() <= x.abs() {
            let q = PI / 12.0 * y / x;
            let (sq, cq) = q.sin_cos();
            let scale = PREK * x / (SQRT2 - cq).sqrt();
            ((SQRT2 * cq - 1.0) * scale, SQRT2 * sq * scale)
        } else {
            let q = PI / 12.0 * x / y;
            let (sq, cq) = q.sin_cos();
            let scale = PREK * y / (SQRT2 - cq).sqrt();
            (SQRT2 * sq * scale, (SQRT2 * cq - 1.0) * scale)
        };
        let cc = t1 * t1 + t2 * t2;
        let shrink = (1.0 - PI * cc / (24.0 * z * z)).max(0.0).sqrt();
        let drop = PI.sqrt() * cc / (24.0f64.sqrt() * z);
        [t1 * shrink, t2 * shrink, PREF * z - drop]
    };
    Ok(rotate_out_of_pyramid(out, p))
}

/// Ball -> cube leg of the equal-volume map.
pub fn homochoric_to_cubochoric(h: [f64; 3]) -> Cubochoric {
    let r = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
    if r < 1e-300 {
        return Cubochoric::from_array([0.0, 0.0, 0.0]);
    }
    let p = pyramid(h);
    let v = rotate_into_pyramid(h, p);
    let w = v[2];

    // ball -> cylinder
    let q = (2.0 * r / (r + w.abs())).sqrt();
    let t1 = v[0] * q;
    let t2 = v[1] * q;
    let z = w.signum() * r / PREF;

    // disc -> curved square
    let (x, y) = if t1 == 0.0 && t2 == 0.0 {
        (0.0, 0.0)
    } else if t2.abs() <= t1.abs() {
        let rho = t2 / t1;
        let alpha = rho.atan();
        let ang = alpha - (alpha.sin() / SQRT2).asin();
        let cq = ang.cos();
        let mag =
            ((t1 * t1 + t2 * t2) * (SQRT2 - cq) / (3.0 - 2.0 * SQRT2 * cq)).sqrt() / PREK;
        let x = t1.signum() * mag;
        (x, x * ang * 12.0 / PI)
    } else {
        let rho = t1 / t2;
        let alpha = rho.atan();
        let ang = alpha - (alpha.sin() / SQRT2).asin();
        let cq = ang.cos();
        let mag =
            ((t1 * t1 + t2 * t2) * (SQRT2 - cq) / (3.0 - 2.0 * SQRT2 * cq)).sqrt() / PREK;
        let y = t2.signum() * mag;
        (y * ang * 12.0 / PI, y)
    };

    let out = rotate_out_of_pyramid([x / SC, y / SC, z / SC], p);
    Cubochoric::from_array(out)
}

// ---- top-level conversions ----

pub fn euler_to_cubochoric(e: &EulerAngles) -> Cubochoric {
    let q = euler_to_quaternion(e);
    homochoric_to_cubochoric(quaternion_to_homochoric(&q))
}

pub fn cubochoric_to_euler(c: &Cubochoric) -> Result<EulerAngles, OrientationError> {
    let h = cubochoric_to_homochoric(c)?;
    Ok(quaternion_to_euler(&homochoric_to_quaternion(h)))
}

pub fn quaternion_to_cubochoric(q: &UnitQuaternion) -> Cubochoric {
    homochoric_to_cubochoric(quaternion_to_homochoric(q))
}

pub fn cubochoric_to_quaternion(c: &Cubochoric) -> Result<UnitQuaternion, OrientationError> {
    Ok(homochoric_to_quaternion(cubochoric_to_homochoric(c)?))
}

/// Angle of the relative rotation a^-1 b, in [0, pi]. No crystal-symmetry
/// reduction is applied.
pub fn misorientation_angle(a: &UnitQuaternion, b: &UnitQuaternion) -> f64 {
    a.conjugate().mul(b).angle()
}

/// Uniform random rotation (Shoemake's method over the 3-sphere).
pub fn random_quaternion(rng: &mut impl Rng) -> UnitQuaternion {
    let u1: f64 = rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>() * 2.0 * PI;
    let u3: f64 = rng.gen::<f64>() * 2.0 * PI;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    UnitQuaternion::new(a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos())
}

/// Random unit vector, uniform on the sphere.
pub fn random_unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}
