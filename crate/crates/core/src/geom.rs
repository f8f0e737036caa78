//! Small 3-D vector and axis-aligned-box helpers shared by the scene model,
//! the ray tracer, and the rasterizer.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const fn vec3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub const ZERO: Vec3 = vec3(0.0, 0.0, 0.0);

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }
    pub fn cross(self, o: Vec3) -> Vec3 {
        vec3(
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
        vec3(self.x / n, self.y / n, self.z / n)
    }
    pub fn dist(self, o: Vec3) -> f64 {
        (self - o).norm()
    }
    pub fn axis(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        vec3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}
impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        vec3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}
impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        vec3(self.x * s, self.y * s, self.z * s)
    }
}
impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        vec3(-self.x, -self.y, -self.z)
    }
}

/// Axis-aligned box given by two opposite corners, `min` < `max` componentwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Aabb {
        Aabb { min, max }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn contains_strict(&self, p: Vec3, eps: f64) -> bool {
        p.x > self.min.x + eps
            && p.x < self.max.x - eps
            && p.y > self.min.y + eps
            && p.y < self.max.y - eps
            && p.z > self.min.z + eps
            && p.z < self.max.z - eps
    }

    /// Slab intersection of the parametric segment `a + t (b - a)`, t in [0,1],
    /// with the closed box. Returns the clipped `[t0, t1]` interval if nonempty.
    pub fn segment_interval(&self, a: Vec3, b: Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        let d = b - a;
        for i in 0..3 {
            let (av, dv) = (a.axis(i), d.axis(i));
            let (lo, hi) = (self.min.axis(i), self.max.axis(i));
            if dv.abs() < 1e-15 {
                if av < lo || av > hi {
                    return None;
                }
            } else {
                let mut ta = (lo - av) / dv;
                let mut tb = (hi - av) / dv;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }

    /// True when the open segment passes through the open interior of the box.
    /// Touching a face (reflection points, grazing rays) does not count.
    pub fn occludes_segment(&self, a: Vec3, b: Vec3) -> bool {
        match self.segment_interval(a, b) {
            None => false,
            Some((t0, t1)) => {
                if t1 - t0 < 1e-9 {
                    return false;
                }
                let tm = 0.5 * (t0 + t1);
                if tm <= 1e-9 || tm >= 1.0 - 1e-9 {
                    return false;
                }
                let p = a + (b - a) * tm;
                self.contains_strict(p, 1e-9)
            }
        }
    }

    /// First-hit parameter of the ray `o + t d` (t > eps) against the closed
    /// box, if any.
    pub fn ray_hit(&self, o: Vec3, d: Vec3, eps: f64) -> Option<f64> {
        let mut t0 = eps;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let (ov, dv) = (o.axis(i), d.axis(i));
            let (lo, hi) = (self.min.axis(i), self.max.axis(i));
            if dv.abs() < 1e-15 {
                if ov < lo || ov > hi {
                    return None;
                }
            } else {
                let mut ta = (lo - ov) / dv;
                let mut tb = (hi - ov) / dv;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some(t0)
    }
}

/// Mirror a point across the plane `n . x = off` (n unit-length).
pub fn mirror_point(p: Vec3, n: Vec3, off: f64) -> Vec3 {
    p - n * (2.0 * (p.dot(n) - off))
}
