//! Reproducible synthetic 3-D scenes: axis-aligned building and vegetation
//! blocks on a flat ground plane, a fixed BS, and an L-shaped CU polyline.

use crate::config::{
    building_class, SceneConfig, CLASS_GROUND, CLASS_VEGETATION, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::geom::{vec3, Aabb, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Surface material: per-interaction complex reflection coefficient plus the
/// semantic class rendered for this surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub id: u8,
    pub reflection_magnitude: f64,
    pub reflection_phase: f64,
    pub semantic_class: u8,
}

impl Material {
    pub fn reflection(&self) -> num_complex::Complex64 {
        num_complex::Complex64::from_polar(self.reflection_magnitude, self.reflection_phase)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub aabb: Aabb,
    pub material: Material,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64) -> Pose {
        Pose {
            position: vec3(x, y, z),
        }
    }

    pub fn new_v(position: Vec3) -> Pose {
        Pose { position }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub boxes: Vec<SceneBox>,
    pub ground_material: Material,
    pub bs: Pose,
    pub cu_waypoints: Vec<Pose>,
    pub cu_speed: f64,
    pub cu_dt: f64,
    pub rng_seed: u64,
    /// World extent carried along for feature scaling and rendering bounds.
    pub world_extent: [f64; 3],
}

impl Scene {
    pub fn contains_point(&self, p: Vec3) -> bool {
        self.boxes.iter().any(|b| b.aabb.contains(p))
    }
}

fn rand_in(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// 2-D test: does the segment a-b (xy plane) come within `clear` of the
/// footprint rectangle?
fn segment_near_rect_2d(a: Vec3, b: Vec3, rect: &Aabb, clear: f64) -> bool {
    let fat = Aabb::new(
        vec3(rect.min.x - clear, rect.min.y - clear, -1.0),
        vec3(rect.max.x + clear, rect.max.y + clear, 1.0),
    );
    fat.segment_interval(vec3(a.x, a.y, 0.0), vec3(b.x, b.y, 0.0))
        .is_some()
}

fn generate_waypoints(cfg: &SceneConfig, rng: &mut ChaCha12Rng) -> Vec<Pose> {
    let t = &cfg.trajectories;
    let [ex, ey, _] = cfg.world.extent;
    let margin = (0.05 * ex.min(ey)).max(5.0);
    let h = t.cu_height;
    let mut pts = vec![vec3(
        rand_in(rng, margin, ex - margin),
        rand_in(rng, margin, ey - margin),
        h,
    )];
    // Each leg is an L: one x-run then one y-run (or the reverse).
    for _ in 0..t.count.max(1) {
        for axis_first_x in [rng.gen_bool(0.5), rng.gen_bool(0.5)] {
            let cur = *pts.last().unwrap();
            let len = rand_in(rng, t.leg_min, t.leg_max);
            let next = if axis_first_x {
                let dir = if cur.x + len <= ex - margin { 1.0 } else { -1.0 };
                vec3((cur.x + dir * len).clamp(margin, ex - margin), cur.y, h)
            } else {
                let dir = if cur.y + len <= ey - margin { 1.0 } else { -1.0 };
                vec3(cur.x, (cur.y + dir * len).clamp(margin, ey - margin), h)
            };
            if next.dist(cur) > 1.0 {
                pts.push(next);
            }
        }
    }
    pts.into_iter().map(|p| Pose { position: p }).collect()
}

/// Deterministically generate a scene from `(config, seed)`.
pub fn build_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let [ex, ey, ez] = cfg.world.extent;
    let bs = Pose::new(
        cfg.bs.position[0].min(ex),
        cfg.bs.position[1].min(ey),
        cfg.bs.position[2],
    );

    let waypoints = generate_waypoints(cfg, &mut rng);
    let segs: Vec<(Vec3, Vec3)> = waypoints
        .windows(2)
        .map(|w| (w[0].position, w[1].position))
        .collect();

    let mut boxes = Vec::new();
    let b = &cfg.buildings;
    let n_buildings = if b.count_max == 0 {
        0
    } else {
        rng.gen_range(b.count_min..=b.count_max)
    };
    let clear = b.route_clearance;
    'outer: for _ in 0..n_buildings {
        for _try in 0..64 {
            let wx = rand_in(&mut rng, b.footprint_min, b.footprint_max);
            let wy = rand_in(&mut rng, b.footprint_min, b.footprint_max);
            let h = rand_in(&mut rng, b.height_min, b.height_max).min(ez);
            let cx = rand_in(&mut rng, wx / 2.0, ex - wx / 2.0);
            let cy = rand_in(&mut rng, wy / 2.0, ey - wy / 2.0);
            let aabb = Aabb::new(
                vec3(cx - wx / 2.0, cy - wy / 2.0, 0.0),
                vec3(cx + wx / 2.0, cy + wy / 2.0, h),
            );
            let near_route = segs
                .iter()
                .any(|(a, bb)| segment_near_rect_2d(*a, *bb, &aabb, clear));
            if near_route || aabb.contains(bs.position) {
                continue;
            }
            let mi = rng.gen_range(0..cfg.materials.palette.len());
            let spec = &cfg.materials.palette[mi];
            boxes.push(SceneBox {
                aabb,
                material: Material {
                    id: mi as u8,
                    reflection_magnitude: spec.reflection_magnitude,
                    reflection_phase: spec.reflection_phase,
                    semantic_class: building_class(mi, h, ez),
                },
            });
            continue 'outer;
        }
    }

    let v = &cfg.vegetation;
    let n_veg = if v.count_max == 0 {
        0
    } else {
        rng.gen_range(v.count_min..=v.count_max)
    };
    'veg: for _ in 0..n_veg {
        for _try in 0..64 {
            let s = rand_in(&mut rng, v.size_min, v.size_max);
            let h = rand_in(&mut rng, v.height_min, v.height_max).min(ez);
            let cx = rand_in(&mut rng, s / 2.0, ex - s / 2.0);
            let cy = rand_in(&mut rng, s / 2.0, ey - s / 2.0);
            let aabb = Aabb::new(
                vec3(cx - s / 2.0, cy - s / 2.0, 0.0),
                vec3(cx + s / 2.0, cy + s / 2.0, h),
            );
            if segs
                .iter()
                .any(|(a, bb)| segment_near_rect_2d(*a, *bb, &aabb, clear))
                || aabb.contains(bs.position)
            {
                continue;
            }
            boxes.push(SceneBox {
                aabb,
                material: Material {
                    id: 200,
                    reflection_magnitude: cfg.materials.vegetation_reflection_magnitude,
                    reflection_phase: std::f64::consts::PI,
                    semantic_class: CLASS_VEGETATION,
                },
            });
            continue 'veg;
        }
    }

    let scene = Scene {
        boxes,
        ground_material: Material {
            id: 201,
            reflection_magnitude: cfg.materials.ground_reflection_magnitude,
            reflection_phase: cfg.materials.ground_reflection_phase,
            semantic_class: CLASS_GROUND,
        },
        bs,
        cu_waypoints: waypoints,
        cu_speed: cfg.trajectories.speed,
        cu_dt: cfg.trajectories.dt,
        rng_seed: seed,
        world_extent: cfg.world.extent,
    };
    debug_assert!(scene
        .cu_waypoints
        .iter()
        .all(|w| !scene.contains_point(w.position)));
    Ok(scene)
}

/// Sample `n` CU poses by arc-length interpolation along the waypoint polyline
/// at `speed * dt` increments.
pub fn sample_cu_positions(scene: &Scene, n: usize) -> Result<Vec<Pose>> {
    if n == 0 {
        return Err(Error::Range("n must be at least 1".into()));
    }
    let wp = &scene.cu_waypoints;
    if wp.is_empty() {
        return Err(Error::Geometry("scene has no CU waypoints".into()));
    }
    if wp.len() == 1 {
        if n == 1 {
            return Ok(vec![wp[0]]);
        }
        return Err(Error::Range(format!(
            "trajectory holds a single waypoint, cannot sample {n} poses"
        )));
    }
    let mut cum = vec![0.0f64];
    for w in wp.windows(2) {
        let d = w[1].position.dist(w[0].position);
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    let step = scene.cu_speed * scene.cu_dt;
    let need = (n - 1) as f64 * step;
    if need > total + 1e-9 {
        return Err(Error::Range(format!(
            "trajectory length {total:.3} m supports at most {} poses at step {step:.3} m, {n} requested",
            (total / step) as usize + 1
        )));
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0usize;
    for k in 0..n {
        let s = (k as f64 * step).min(total);
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let seg_len = cum[seg + 1] - cum[seg];
        let t = if seg_len > 0.0 { (s - cum[seg]) / seg_len } else { 0.0 };
        let a = wp[seg].position;
        let b = wp[seg + 1].position;
        let p = a + (b - a) * t;
        if scene.contains_point(p) {
            return Err(Error::Geometry(format!(
                "sampled pose {k} at ({:.2},{:.2},{:.2}) lies inside an obstacle",
                p.x, p.y, p.z
            )));
        }
        out.push(Pose { position: p });
    }
    Ok(out)
}

/// Every class index produced by a scene stays in `1..=NUM_CLASSES`.
pub fn class_in_range(c: u8) -> bool {
    (1..=NUM_CLASSES as u8).contains(&c)
}
