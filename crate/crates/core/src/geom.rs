//! Spherical and equirectangular conventions shared by every stage.
//!
//! Directions use longitude `theta` (east-positive, degrees in `[-180, 180)`)
//! and latitude `phi` (up-positive, degrees in `[-90, 90]`). The unit vector
//! for a direction is `x = cos(phi) sin(theta)`, `y = sin(phi)`,
//! `z = cos(phi) cos(theta)`, so `+z` looks forward, `+x` right and `+y` up.
//!
//! Equirectangular pixels use the pixel-center convention: integer pixel
//! `(x, y)` has its center at continuous coordinate `(x, y)`, and the left
//! edge of the image sits at `x = -0.5`.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Wraps a longitude into `[-180, 180)`.
pub fn wrap_degrees(theta: f64) -> f64 {
    let w = (theta + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can return exactly 360 for tiny negative inputs
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Returns the representative of `theta` closest to `reference` (differs by a
/// multiple of 360).
pub fn unwrap_near(theta: f64, reference: f64) -> f64 {
    reference + wrap_degrees(theta - reference)
}

/// Unwraps a longitude sequence so consecutive samples differ by less than 180.
pub fn unwrap_sequence(thetas: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(thetas.len());
    for &t in thetas {
        match out.last() {
            Some(&prev) => out.push(unwrap_near(t, prev)),
            None => out.push(t),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalDirection {
    pub theta: f64,
    pub phi: f64,
}

impl SphericalDirection {
    /// Wraps `theta` and clamps `phi` into range.
    pub fn new(theta: f64, phi: f64) -> Self {
        Self {
            theta: wrap_degrees(theta),
            phi: phi.clamp(-90.0, 90.0),
        }
    }

    pub fn to_vec(self) -> Vec3 {
        dir_to_vec(self)
    }

    /// Great-circle angle in degrees.
    pub fn angle_to(self, other: SphericalDirection) -> f64 {
        self.to_vec().angle_to(other.to_vec()).to_degrees()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        Vec3::new(self.x / n, self.y / n, self.z / n)
    }

    /// Angle in radians between two vectors, stable for small angles.
    pub fn angle_to(self, o: Vec3) -> f64 {
        self.cross(o).norm().atan2(self.dot(o))
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

pub fn dir_to_vec(d: SphericalDirection) -> Vec3 {
    let (st, ct) = d.theta.to_radians().sin_cos();
    let (sp, cp) = d.phi.to_radians().sin_cos();
    Vec3::new(cp * st, sp, cp * ct)
}

/// Inverse of [`dir_to_vec`]. At the poles `theta` is reported as 0.
pub fn vec_to_dir(v: Vec3) -> Result<SphericalDirection> {
    let n = v.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::NonUnitVector(n));
    }
    Ok(vec_to_dir_unchecked(v))
}

/// [`vec_to_dir`] without the norm check; `v` must be non-zero.
pub fn vec_to_dir_unchecked(v: Vec3) -> SphericalDirection {
    let horiz = (v.x * v.x + v.z * v.z).sqrt();
    let phi = v.y.atan2(horiz).to_degrees();
    let theta = if horiz <= 1e-15 { 0.0 } else { v.x.atan2(v.z).to_degrees() };
    SphericalDirection::new(theta, phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquirectGeometry {
    pub width: usize,
    pub height: usize,
}

impl EquirectGeometry {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || height * 2 != width {
            return Err(Error::InvalidGeometry { width, height });
        }
        Ok(Self { width, height })
    }

    /// Geometry with `height = width / 2`.
    pub fn with_width(width: usize) -> Result<Self> {
        Self::new(width, width / 2)
    }

    pub fn pixel_to_dir(&self, x: usize, y: usize) -> Result<SphericalDirection> {
        if x >= self.width || y >= self.height {
            return Err(Error::OutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.continuous_to_dir(x as f64, y as f64))
    }

    /// Continuous-coordinate variant: `x` wraps around the seam, `phi` clamps.
    pub fn continuous_to_dir(&self, x: f64, y: f64) -> SphericalDirection {
        let theta = (x + 0.5) / self.width as f64 * 360.0 - 180.0;
        let phi = 90.0 - (y + 0.5) / self.height as f64 * 180.0;
        SphericalDirection::new(theta, phi)
    }

    /// Continuous pixel coordinate of a direction; exact inverse of
    /// [`EquirectGeometry::continuous_to_dir`] for in-range directions.
    pub fn dir_to_pixel(&self, d: SphericalDirection) -> (f64, f64) {
        let x = (d.theta + 180.0) / 360.0 * self.width as f64 - 0.5;
        let y = (90.0 - d.phi) / 180.0 * self.height as f64 - 0.5;
        (x, y)
    }

    pub fn pixel_to_vec(&self, x: f64, y: f64) -> Vec3 {
        dir_to_vec(self.continuous_to_dir(x, y))
    }

    pub fn vec_to_pixel(&self, v: Vec3) -> (f64, f64) {
        self.dir_to_pixel(vec_to_dir_unchecked(v))
    }

    /// Degrees of longitude per pixel column.
    pub fn degrees_per_pixel(&self) -> f64 {
        360.0 / self.width as f64
    }

    /// Signed horizontal difference `b - a` taking the shorter way around the seam.
    pub fn wrapped_dx(&self, a: f64, b: f64) -> f64 {
        let w = self.width as f64;
        let d = (b - a).rem_euclid(w);
        if d >= w / 2.0 {
            d - w
        } else {
            d
        }
    }
}

/// Unit quaternion `w + xi + yj + zk`, canonicalized so `w >= 0`.
///
/// Rotation acts on vectors as `v' = q v q*` and composition follows the
/// Hamilton product: `(a * b).rotate(v) == a.rotate(b.rotate(v))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

    /// Normalizes and canonicalizes raw components.
    pub fn from_components(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let s = if w < 0.0 { -1.0 / n } else { 1.0 / n };
        Self {
            w: w * s,
            x: x * s,
            y: y * s,
            z: z * s,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle_rad: f64) -> Self {
        let a = axis.normalized();
        let (s, c) = (angle_rad / 2.0).sin_cos();
        Self::from_components(c, a.x * s, a.y * s, a.z * s)
    }

    /// Rotation about `+y` that turns the forward axis towards increasing longitude.
    pub fn yaw(degrees: f64) -> Self {
        Self::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), degrees.to_radians())
    }

    /// Rotation about `+x`; positive values tilt the forward axis downwards.
    pub fn pitch(degrees: f64) -> Self {
        Self::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), degrees.to_radians())
    }

    /// Rotation about the forward `+z` axis.
    pub fn roll(degrees: f64) -> Self {
        Self::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), degrees.to_radians())
    }

    pub fn inverse(self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn dot(self, o: UnitQuaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Rotation angle of the quaternion in radians, in `[0, pi]`.
    pub fn angle(self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }

    /// Geodesic angle in radians between the rotations `self` and `o`.
    pub fn angle_to(self, o: UnitQuaternion) -> f64 {
        (self.inverse() * o).angle()
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    /// Row-major 3x3 rotation matrix.
    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    fn raw_mul(a: UnitQuaternion, b: UnitQuaternion) -> [f64; 4] {
        [
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        ]
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;
    fn mul(self, o: UnitQuaternion) -> UnitQuaternion {
        let [w, x, y, z] = Self::raw_mul(self, o);
        UnitQuaternion::from_components(w, x, y, z)
    }
}

/// Spherical linear interpolation at constant angular velocity.
pub fn slerp(q0: UnitQuaternion, q1: UnitQuaternion, t: f64) -> UnitQuaternion {
    let mut d = q0.dot(q1);
    let mut b = q1;
    if d < 0.0 {
        d = -d;
        b = UnitQuaternion {
            w: -b.w,
            x: -b.x,
            y: -b.y,
            z: -b.z,
        };
    }
    let (s0, s1) = if d > 1.0 - 1e-12 {
        (1.0 - t, t)
    } else {
        let omega = d.min(1.0).acos();
        let so = omega.sin();
        (((1.0 - t) * omega).sin() / so, (t * omega).sin() / so)
    };
    UnitQuaternion::from_components(
        s0 * q0.w + s1 * b.w,
        s0 * q0.x + s1 * b.x,
        s0 * q0.y + s1 * b.y,
        s0 * q0.z + s1 * b.z,
    )
}

/// Weighted blend of unit quaternions: each input is hemisphere-aligned to the
/// highest-weight element, summed with its weight and renormalized.
pub fn quat_weighted_blend(quats: &[UnitQuaternion], weights: &[f64]) -> Result<UnitQuaternion> {
    if quats.len() != weights.len() {
        return Err(Error::LengthMismatch(quats.len(), weights.len()));
    }
    let anchor = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| quats[i])
        .ok_or(Error::AllWeightsZero)?;
    let mut acc = [0.0f64; 4];
    for (q, &w) in quats.iter().zip(weights) {
        if w <= 0.0 {
            continue;
        }
        let s = if q.dot(anchor) < 0.0 { -w } else { w };
        acc[0] += s * q.w;
        acc[1] += s * q.x;
        acc[2] += s * q.y;
        acc[3] += s * q.z;
    }
    Ok(UnitQuaternion::from_components(acc[0], acc[1], acc[2], acc[3]))
}

/// Unnormalized Gaussian weights `exp(-(d^2)/sigma^2)` for offsets
/// `-radius..=radius`, with `radius = floor(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).floor() as i64;
    (-radius..=radius).map(|d| (-((d * d) as f64) / (sigma * sigma)).exp()).collect()
}

/// Normalized Gaussian filter of a scalar signal; the kernel is truncated at
/// `3 sigma` and renormalized where it runs off either end.
pub fn gaussian_filter(signal: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 || signal.is_empty() {
        return signal.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let n = signal.len() as i64;
    (0..n)
        .map(|t| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let i = t + k as i64 - radius;
                if (0..n).contains(&i) {
                    num += w * signal[i as usize];
                    den += w;
                }
            }
            num / den
        })
        .collect()
}
