//! Procedural scenes: analytic solids for visibility tests and textured
//! "blob heads" used as real data when pre-training the generator.

use alloc::vec::Vec;

use nalgebra::Vector3;
use rand::Rng;

use crate::math;

/// Primitive solid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Solid {
    Sphere { centre: Vector3<f64>, radius: f64 },
    /// Points with `⟨normal, p⟩ ≥ offset` (unit normal) inside a ball of `radius`.
    Plate { normal: Vector3<f64>, offset: f64, radius: f64 },
    Cuboid { centre: Vector3<f64>, half: Vector3<f64> },
}

impl Solid {
    /// Signed distance (exact for spheres and half-spaces, the usual bound for cuboids).
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Solid::Sphere { centre, radius } => (p - centre).norm() - radius,
            Solid::Plate { normal, offset, radius } => (offset - normal.dot(p)).max(p.norm() - radius),
            Solid::Cuboid { centre, half } => {
                let q = (p - centre).abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
        }
    }

    /// First ray parameter `t ≥ 0` at which the ray enters the solid.
    pub fn ray_hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Solid::Sphere { centre, radius } => sphere_interval(o, d, &centre, radius).and_then(|(t0, t1)| enter(t0, t1)),
            Solid::Plate { normal, offset, radius } => {
                let (s0, s1) = sphere_interval(o, d, &Vector3::zeros(), radius)?;
                let a = normal.dot(o);
                let dn = normal.dot(d);
                let (h0, h1) = if dn.abs() < 1e-15 {
                    if a >= offset {
                        (f64::NEG_INFINITY, f64::INFINITY)
                    } else {
                        return None;
                    }
                } else if dn > 0.0 {
                    ((offset - a) / dn, f64::INFINITY)
                } else {
                    (f64::NEG_INFINITY, (offset - a) / dn)
                };
                enter(s0.max(h0), s1.min(h1))
            }
            Solid::Cuboid { centre, half } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    let (lo, hi) = (centre[k] - half[k], centre[k] + half[k]);
                    if d[k].abs() < 1e-15 {
                        if o[k] < lo || o[k] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((lo - o[k]) / d[k], (hi - o[k]) / d[k]);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                enter(t0, t1)
            }
        }
    }
}

fn sphere_interval(o: &Vector3<f64>, d: &Vector3<f64>, centre: &Vector3<f64>, radius: f64) -> Option<(f64, f64)> {
    let oc = o - centre;
    let b = oc.dot(d);
    let disc = b * b - (oc.norm_squared() - radius * radius);
    if disc < 0.0 {
        return None;
    }
    let s = math::sqrt(disc);
    Some((-b - s, -b + s))
}

fn enter(t0: f64, t1: f64) -> Option<f64> {
    if t0 > t1 || t1 < 0.0 {
        None
    } else {
        Some(t0.max(0.0))
    }
}

/// Union of solids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolidScene {
    pub solids: Vec<Solid>,
}

impl SolidScene {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.solids.iter().map(|s| s.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    pub fn occupied(&self, p: &Vector3<f64>) -> bool {
        self.sdf(p) <= 0.0
    }

    pub fn ray_hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        self.solids.iter().filter_map(|s| s.ray_hit(o, d)).fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))))
    }

    /// One to three random solids inside the cube.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let n = rng.random_range(1..=3);
        let mut solids = Vec::with_capacity(n);
        for _ in 0..n {
            let centre = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let s = match rng.random_range(0..3) {
                0 => Solid::Sphere { centre, radius: rng.random_range(0.15..0.5) },
                1 => {
                    let normal = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    let normal = if normal.norm() < 1e-3 { Vector3::z() } else { normal.normalize() };
                    Solid::Plate { normal, offset: rng.random_range(-0.3..0.5), radius: rng.random_range(0.6..1.0) }
                }
                _ => Solid::Cuboid {
                    centre,
                    half: Vector3::new(rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)),
                },
            };
            solids.push(s);
        }
        Self { solids }
    }
}

/// Number of free parameters of a [`BlobHead`].
pub const BLOB_PARAMS: usize = 11;

/// Textured ellipsoid with a hair cap over the back hemisphere; mirror
/// symmetric in `x`. The face looks toward `+z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobHead {
    pub radii: Vector3<f64>,
    pub centre_y: f64,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    /// Hair covers points with `z/rz` below this value and the crown.
    pub hair_line: f64,
    pub eye_y: f64,
    pub eye_x: f64,
    pub eye_size: f64,
    pub mouth_y: f64,
    pub density: f64,
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

impl BlobHead {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut u = [0.0; BLOB_PARAMS];
        for v in &mut u {
            *v = rng.random_range(0.0..1.0);
        }
        Self::from_unit(&u)
    }

    /// Head whose free parameters are read from `u ∈ [0, 1]^BLOB_PARAMS`;
    /// continuous in `u`.
    pub fn from_unit(u: &[f64; BLOB_PARAMS]) -> Self {
        let at = |i: usize, lo: f64, hi: f64| lo + (hi - lo) * u[i].clamp(0.0, 1.0);
        let skin = mix([0.95, 0.78, 0.66], [0.45, 0.3, 0.22], u[0]);
        let hair = mix([0.12, 0.08, 0.05], [0.75, 0.55, 0.3], u[1] * u[1]);
        Self {
            radii: Vector3::new(at(2, 0.45, 0.58), at(3, 0.55, 0.7), at(4, 0.5, 0.62)),
            centre_y: at(5, -0.08, 0.08),
            skin,
            hair,
            hair_line: at(6, -0.2, 0.3),
            eye_y: at(7, 0.05, 0.25),
            eye_x: at(8, 0.25, 0.4),
            eye_size: at(9, 0.1, 0.16),
            mouth_y: at(10, -0.45, -0.3),
            density: 30.0,
        }
    }

    /// Density and colour at `p`.
    pub fn field(&self, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        let q = Vector3::new(p.x / self.radii.x, (p.y - self.centre_y) / self.radii.y, p.z / self.radii.z);
        let r = q.norm();
        let sigma = self.density * (1.0 - smoothstep(0.92, 1.0, r));
        if sigma <= 0.0 {
            return (0.0, [0.0; 3]);
        }
        let n = if r > 1e-9 { q / r } else { Vector3::z() };
        // hair over the back and the crown
        let hair_t = smoothstep(self.hair_line - 0.08, self.hair_line + 0.08, -n.z + 0.9 * (n.y - 0.55).max(0.0));
        let mut c = mix(self.skin, self.hair, hair_t);
        if n.z > 0.0 {
            let (ex, ey) = (n.x.abs() - self.eye_x, n.y - self.eye_y);
            let eye = math::sqrt(ex * ex + ey * ey);
            let e = 1.0 - smoothstep(self.eye_size * 0.6, self.eye_size, eye);
            c = mix(c, [0.1, 0.1, 0.12], e * (1.0 - hair_t));
            let mouth = (1.0 - smoothstep(0.03, 0.07, (n.y - self.mouth_y).abs())) * (1.0 - smoothstep(0.18, 0.26, n.x.abs()));
            c = mix(c, [0.6, 0.2, 0.2], mouth * (1.0 - hair_t));
        }
        (sigma, c)
    }
}
