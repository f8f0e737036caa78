//! BS-side environment sensing: semantic label-map rendering, the adaptive
//! ROI filter, and the three learned feature branches (location, global
//! image, ROI semantics).

use crate::config::{
    CLASS_CU, CLASS_GROUND, CLASS_SKY, CLASS_VEGETATION, NUM_CLASSES,
    NUM_HEIGHT_BANDS,
};
use crate::error::{Error, Result};
use crate::geom::{vec3, Vec3};
use crate::scene::{Pose, Scene};
use crate::tensorkit::{Graph, ParameterSet, TensorId};
use rand_chacha::ChaCha12Rng;

/// Feature dimensions: location P_v, global image J_v, ROI semantics J_sv.
pub const D_P: usize = 64;
pub const D_I: usize = 128;
pub const D_S: usize = 64;
/// Global descriptor: 8x8 spatial grid, per cell a class histogram plus one
/// mean-inverse-depth slot.
pub const GRID: usize = 8;
pub const DESC_LEN: usize = GRID * GRID * (NUM_CLASSES + 1);

/// CU body rendered as an axis-aligned box (length x width x height, meters).
pub const CU_BODY: [f64; 3] = [3.17, 2.0, 1.5];

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    /// Row-major class labels, each in 1..=NUM_CLASSES.
    pub labels: Vec<u8>,
    /// CU pixel U = (u0, v0) as (row, col); the camera tracks the CU, so
    /// this is the image center.
    pub cu_pixel: (usize, usize),
    /// Metric depth per pixel; sky pixels carry +inf.
    pub depth: Option<Vec<f64>>,
}

impl LabelMap {
    pub fn label(&self, u: usize, v: usize) -> u8 {
        self.labels[u * self.w + v]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVector {
    /// Raw in-ROI pixel counts per class (index 0 = class 1).
    pub j_pc: Vec<u64>,
    /// Threshold-filtered counts (Eq. 12 style: zero below j_r).
    pub j_po: Vec<u64>,
    pub d_r: usize,
    pub j_r: u64,
    /// |ROI ∩ image|.
    pub roi_pixels: u64,
}

// ---- rendering --------------------------------------------------------

fn cu_body_aabb(cu: Vec3) -> crate::geom::Aabb {
    crate::geom::Aabb::new(
        vec3(cu.x - CU_BODY[0] / 2.0, cu.y - CU_BODY[1] / 2.0, 0.0),
        vec3(cu.x + CU_BODY[0] / 2.0, cu.y + CU_BODY[1] / 2.0, CU_BODY[2]),
    )
}

/// Pinhole rasterization of the scene from the BS, optical axis through the
/// CU. Nearest surface wins; everything else is sky.
pub fn render_label_map(
    scene: &Scene,
    bs: &Pose,
    cu: &Pose,
    resolution: usize,
    fov_deg: f64,
) -> Result<LabelMap> {
    if resolution < 16 {
        return Err(Error::config("camera resolution must be at least 16"));
    }
    let o = bs.position;
    let mut forward = cu.position - o;
    if forward.norm() < 1e-9 {
        return Err(Error::Geometry("BS and CU coincide".into()));
    }
    forward = forward.normalized();
    let up_world = if forward.cross(vec3(0.0, 0.0, 1.0)).norm() > 1e-9 {
        vec3(0.0, 0.0, 1.0)
    } else {
        vec3(1.0, 0.0, 0.0)
    };
    let right = forward.cross(up_world).normalized();
    let up = right.cross(forward);
    let tan_half = (fov_deg.to_radians() / 2.0).tan();

    let cu_box = cu_body_aabb(cu.position);
    let n = resolution;
    let mut labels = vec![CLASS_SKY; n * n];
    let mut depth = vec![f64::INFINITY; n * n];
    for r in 0..n {
        let py = 1.0 - 2.0 * (r as f64 + 0.5) / n as f64;
        for c in 0..n {
            let px = 2.0 * (c as f64 + 0.5) / n as f64 - 1.0;
            let dir = (forward + right * (px * tan_half) + up * (py * tan_half)).normalized();
            let mut best_t = f64::INFINITY;
            let mut best_label = CLASS_SKY;
            for b in &scene.boxes {
                if let Some(t) = b.aabb.ray_hit(o, dir, 1e-9) {
                    if t < best_t {
                        best_t = t;
                        best_label = b.material.semantic_class;
                    }
                }
            }
            if let Some(t) = cu_box.ray_hit(o, dir, 1e-9) {
                if t < best_t {
                    best_t = t;
                    best_label = CLASS_CU;
                }
            }
            if dir.z < -1e-12 {
                let t = -o.z / dir.z;
                if t > 0.0 && t < best_t {
                    best_t = t;
                    best_label = CLASS_GROUND;
                }
            }
            labels[r * n + c] = best_label;
            depth[r * n + c] = best_t;
        }
    }
    Ok(LabelMap {
        h: n,
        w: n,
        labels,
        cu_pixel: (n / 2, n / 2),
        depth: Some(depth),
    })
}

// ---- ROI filtering ----------------------------------------------------

/// Linear density rule: d_r = round(d_max − (d_max − d_min)·ρ) with ρ the
/// obstacle fraction (non-ground, non-sky) in the (2·d_max+1)² window
/// around the CU pixel, clipped to the image.
pub fn adaptive_roi_radius(map: &LabelMap, d_min: usize, d_max: usize) -> usize {
    let (u0, v0) = map.cu_pixel;
    let lo_u = u0.saturating_sub(d_max);
    let hi_u = (u0 + d_max).min(map.h - 1);
    let lo_v = v0.saturating_sub(d_max);
    let hi_v = (v0 + d_max).min(map.w - 1);
    let mut total = 0u64;
    let mut obstacle = 0u64;
    for u in lo_u..=hi_u {
        for v in lo_v..=hi_v {
            total += 1;
            let l = map.label(u, v);
            if l != CLASS_GROUND && l != CLASS_SKY {
                obstacle += 1;
            }
        }
    }
    let rho = if total == 0 {
        0.0
    } else {
        obstacle as f64 / total as f64
    };
    (d_max as f64 - (d_max - d_min) as f64 * rho).round() as usize
}

fn threshold_counts(j_pc: &[u64], j_r: u64) -> Vec<u64> {
    j_pc.iter().map(|&c| if c < j_r { 0 } else { c }).collect()
}

/// Count in-ROI pixels per class inside the disc of radius `d_r` around the
/// CU pixel, then zero any class below the dynamic threshold
/// j_r = ceil(κ·|ROI∩image|).
pub fn roi_semantic_vector(map: &LabelMap, d_r: usize, kappa: f64) -> Result<SemanticVector> {
    if d_r == 0 {
        return Err(Error::config("ROI radius must be at least 1"));
    }
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::config("kappa must be in [0,1)"));
    }
    let (u0, v0) = map.cu_pixel;
    let r2 = (d_r * d_r) as i64;
    let mut j_pc = vec![0u64; NUM_CLASSES];
    let mut roi_pixels = 0u64;
    let lo_u = u0.saturating_sub(d_r);
    let hi_u = (u0 + d_r).min(map.h - 1);
    for u in lo_u..=hi_u {
        let du = u as i64 - u0 as i64;
        let span2 = r2 - du * du;
        // Columns with (u-u0)² + (v-v0)² ≤ d_r².
        let dv_max = (span2 as f64).sqrt().floor() as i64;
        let lo_v = ((v0 as i64 - dv_max).max(0)) as usize;
        let hi_v = ((v0 as i64 + dv_max).min(map.w as i64 - 1)) as usize;
        for v in lo_v..=hi_v {
            let l = map.label(u, v) as usize;
            debug_assert!((1..=NUM_CLASSES).contains(&l));
            j_pc[l - 1] += 1;
            roi_pixels += 1;
        }
    }
    let j_r = (kappa * roi_pixels as f64).ceil() as u64;
    let j_po = threshold_counts(&j_pc, j_r);
    Ok(SemanticVector {
        j_pc,
        j_po,
        d_r,
        j_r,
        roi_pixels,
    })
}

// ---- class merging (class-count sweep) --------------------------------

/// Label remap table (indexed by original label 1..=28) collapsing the class
/// set to `z_eff` effective classes. Merging only ever joins classes, so the
/// total pixel count is preserved.
pub fn class_merge_map(z_eff: usize) -> Result<Vec<u8>> {
    let mut table = vec![0u8; NUM_CLASSES + 1];
    match z_eff {
        28 => {
            for (l, t) in table.iter_mut().enumerate() {
                *t = l as u8;
            }
        }
        16 => {
            // Base classes kept; height bands merged in pairs (6 -> 3).
            for l in 1..=4u8 {
                table[l as usize] = l;
            }
            for l in 5..=NUM_CLASSES {
                let mat = (l - 5) / NUM_HEIGHT_BANDS;
                let band = (l - 5) % NUM_HEIGHT_BANDS;
                table[l] = (5 + mat * 3 + band / 2) as u8;
            }
        }
        8 => {
            // Base classes kept; height bands fully merged per material.
            for l in 1..=4u8 {
                table[l as usize] = l;
            }
            for l in 5..=NUM_CLASSES {
                let mat = (l - 5) / NUM_HEIGHT_BANDS;
                table[l] = (5 + mat) as u8;
            }
        }
        4 => {
            // Sky, ground, CU, any obstacle.
            table[CLASS_SKY as usize] = 1;
            table[CLASS_GROUND as usize] = 2;
            table[CLASS_CU as usize] = 3;
            table[CLASS_VEGETATION as usize] = 4;
            for l in 5..=NUM_CLASSES {
                table[l] = 4;
            }
        }
        _ => {
            return Err(Error::config(format!(
                "unsupported effective class count {z_eff} (choose 4, 8, 16, 28)"
            )))
        }
    }
    Ok(table)
}

pub fn remap_label_map(map: &LabelMap, z_eff: usize) -> Result<LabelMap> {
    let table = class_merge_map(z_eff)?;
    let mut out = map.clone();
    for l in out.labels.iter_mut() {
        *l = table[*l as usize];
    }
    Ok(out)
}

// ---- feature inputs ---------------------------------------------------

/// Location branch input: [p_u; p_c] with each axis scaled by the world
/// extent.
pub fn location_input(bs: Vec3, cu: Vec3, extent: [f64; 3]) -> Result<[f64; 6]> {
    let raw = [bs.x, bs.y, bs.z, cu.x, cu.y, cu.z];
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite position input".into()));
    }
    Ok([
        bs.x / extent[0],
        bs.y / extent[1],
        bs.z / extent[2],
        cu.x / extent[0],
        cu.y / extent[1],
        cu.z / extent[2],
    ])
}

/// Raw global descriptor: per grid cell, the class pixel histogram (counts)
/// followed by the mean inverse depth (sky contributes 0).
pub fn global_descriptor(map: &LabelMap) -> Vec<f64> {
    let mut desc = vec![0.0; DESC_LEN];
    let cell_h = map.h / GRID;
    let cell_w = map.w / GRID;
    for gu in 0..GRID {
        for gv in 0..GRID {
            let base = (gu * GRID + gv) * (NUM_CLASSES + 1);
            let mut inv_sum = 0.0;
            let mut count = 0usize;
            for u in gu * cell_h..(gu + 1) * cell_h {
                for v in gv * cell_w..(gv + 1) * cell_w {
                    let l = map.label(u, v) as usize;
                    desc[base + l - 1] += 1.0;
                    if let Some(d) = &map.depth {
                        let dv = d[u * map.w + v];
                        if dv.is_finite() && dv > 0.0 {
                            inv_sum += 1.0 / dv;
                        }
                    }
                    count += 1;
                }
            }
            desc[base + NUM_CLASSES] = inv_sum / count as f64;
        }
    }
    desc
}

/// Descriptor as fed to the affine block: histograms scaled to per-cell
/// fractions so input magnitudes stay O(1) across resolutions.
pub fn global_input(map: &LabelMap) -> Vec<f64> {
    let mut desc = global_descriptor(map);
    let per_cell = ((map.h / GRID) * (map.w / GRID)) as f64;
    for cell in desc.chunks_mut(NUM_CLASSES + 1) {
        for e in &mut cell[..NUM_CLASSES] {
            *e /= per_cell;
        }
    }
    desc
}

/// Semantic branch input: j_po normalized by the ROI pixel count.
pub fn semantic_input(sem: &SemanticVector) -> Vec<f64> {
    let denom = sem.roi_pixels.max(1) as f64;
    sem.j_po.iter().map(|&c| c as f64 / denom).collect()
}

// ---- feature networks -------------------------------------------------

/// A batch-norm application site recorded during a training forward so the
/// trainer can fold the batch statistics into the running buffers.
#[derive(Debug, Clone)]
pub struct BnUse {
    pub prefix: String,
    pub node: TensorId,
    pub channels: usize,
}

/// Read (batch_mean, batch_var) back out of a train-mode batch-norm node.
pub fn bn_batch_stats(g: &Graph, use_: &BnUse) -> (Vec<f64>, Vec<f64>) {
    let aux = g.aux(use_.node);
    let total = aux.len() - 2 * use_.channels;
    (
        aux[total..total + use_.channels].to_vec(),
        aux[total + use_.channels..].to_vec(),
    )
}

pub fn init_feature_params(ps: &mut ParameterSet, rng: &mut ChaCha12Rng) {
    ps.init_linear("pv.fc1", 6, D_P, rng);
    ps.init_batch_norm("pv.bn1", D_P);
    ps.init_linear("pv.fc2", D_P, D_P, rng);
    ps.init_batch_norm("pv.bn2", D_P);
    ps.init_linear("jv.fc1", DESC_LEN, D_I, rng);
    ps.init_linear("sv.fc1", NUM_CLASSES, D_S, rng);
    ps.init_linear("sv.fc2", D_S, D_S, rng);
}

fn fc_bn_relu(
    g: &mut Graph,
    ps: &ParameterSet,
    fc: &str,
    bn: &str,
    x: TensorId,
    train: bool,
    bn_uses: &mut Vec<BnUse>,
) -> Result<TensorId> {
    let w = ps.bind(g, &format!("{fc}.w"))?;
    let b = ps.bind(g, &format!("{fc}.b"))?;
    let y = g.linear(x, w, b);
    let gamma = ps.bind(g, &format!("{bn}.gamma"))?;
    let beta = ps.bind(g, &format!("{bn}.beta"))?;
    let c = g.shape(y)[1];
    let y = if train {
        let node = g.batch_norm_train(y, gamma, beta);
        bn_uses.push(BnUse {
            prefix: bn.to_string(),
            node,
            channels: c,
        });
        node
    } else {
        let mean = ps.bind(g, &format!("{bn}.running_mean"))?;
        let var = ps.bind(g, &format!("{bn}.running_var"))?;
        g.batch_norm_eval(y, gamma, beta, mean, var)
    };
    Ok(g.relu(y))
}

/// Location branch P_v: two affine -> batch-norm -> relu blocks, (N,6) -> (N,64).
pub fn location_features(
    g: &mut Graph,
    ps: &ParameterSet,
    x: TensorId,
    train: bool,
    bn_uses: &mut Vec<BnUse>,
) -> Result<TensorId> {
    let h = fc_bn_relu(g, ps, "pv.fc1", "pv.bn1", x, train, bn_uses)?;
    fc_bn_relu(g, ps, "pv.fc2", "pv.bn2", h, train, bn_uses)
}

/// Global image branch J_v: one affine + relu, (N,DESC_LEN) -> (N,128).
pub fn global_image_features(g: &mut Graph, ps: &ParameterSet, x: TensorId) -> Result<TensorId> {
    let w = ps.bind(g, "jv.fc1.w")?;
    let b = ps.bind(g, "jv.fc1.b")?;
    let y = g.linear(x, w, b);
    Ok(g.relu(y))
}

/// Semantic branch J_sv: two affine + relu blocks, (N,Z) -> (N,64).
pub fn semantic_features(g: &mut Graph, ps: &ParameterSet, x: TensorId) -> Result<TensorId> {
    let w1 = ps.bind(g, "sv.fc1.w")?;
    let b1 = ps.bind(g, "sv.fc1.b")?;
    let h = g.linear(x, w1, b1);
    let h = g.relu(h);
    let w2 = ps.bind(g, "sv.fc2.w")?;
    let b2 = ps.bind(g, "sv.fc2.b")?;
    let y = g.linear(h, w2, b2);
    Ok(g.relu(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{building_class, SceneConfig};
    use crate::scene::{build_scene, Material, SceneBox};
    use crate::tensorkit::ParameterSet;
    use rand::{Rng, SeedableRng};

    fn flat_scene() -> Scene {
        let mut cfg = SceneConfig::default();
        cfg.buildings.count_min = 0;
        cfg.buildings.count_max = 0;
        cfg.vegetation.count_min = 0;
        cfg.vegetation.count_max = 0;
        build_scene(&cfg, 1).unwrap()
    }

    #[test]
    fn empty_scene_splits_sky_and_ground() {
        let scene = flat_scene();
        let bs = Pose::new_v(vec3(180.0, 240.0, 40.0));
        let cu = Pose::new_v(vec3(200.0, 200.0, 1.5));
        let map = render_label_map(&scene, &bs, &cu, 64, 90.0).unwrap();
        assert_eq!(map.cu_pixel, (32, 32));
        // Camera looks down at the CU: top corners see sky, bottom corners
        // ground; the CU body occupies only a small central patch.
        assert_eq!(map.label(0, 0), CLASS_SKY);
        assert_eq!(map.label(0, 63), CLASS_SKY);
        assert_eq!(map.label(63, 0), CLASS_GROUND);
        assert_eq!(map.label(63, 63), CLASS_GROUND);
        let classes: std::collections::BTreeSet<u8> = map.labels.iter().copied().collect();
        assert!(classes.is_subset(&[CLASS_SKY, CLASS_GROUND, CLASS_CU].into()));
        assert!(classes.contains(&CLASS_CU));
    }

    #[test]
    fn small_resolution_rejected() {
        let scene = flat_scene();
        let bs = Pose::new_v(vec3(0.0, 0.0, 10.0));
        let cu = Pose::new_v(vec3(10.0, 0.0, 1.5));
        assert!(render_label_map(&scene, &bs, &cu, 8, 90.0).is_err());
    }

    /// Independent per-pixel oracle: intersect the ray against each of the
    /// box's six face rectangles as plane-rectangle tests.
    fn face_hit_oracle(b: &crate::geom::Aabb, o: Vec3, d: Vec3) -> Option<f64> {
        let mut best: Option<f64> = None;
        for axis in 0..3 {
            for &off in &[b.min.axis(axis), b.max.axis(axis)] {
                let dv = d.axis(axis);
                if dv.abs() < 1e-15 {
                    continue;
                }
                let t = (off - o.axis(axis)) / dv;
                if t <= 1e-9 {
                    continue;
                }
                let p = o + d * t;
                let inside = (0..3).all(|a| {
                    a == axis
                        || (p.axis(a) >= b.min.axis(a) - 1e-9 && p.axis(a) <= b.max.axis(a) + 1e-9)
                });
                if inside && best.map_or(true, |bt| t < bt) {
                    best = Some(t);
                }
            }
        }
        best
    }

    #[test]
    fn building_silhouette_matches_face_oracle() {
        let mut scene = flat_scene();
        let mat = Material {
            id: 0,
            reflection_magnitude: 0.7,
            reflection_phase: std::f64::consts::PI,
            semantic_class: 7,
        };
        scene.boxes.push(SceneBox {
            aabb: crate::geom::Aabb::new(vec3(190.0, 210.0, 0.0), vec3(210.0, 225.0, 18.0)),
            material: mat,
        });
        let bs = Pose::new_v(vec3(180.0, 240.0, 40.0));
        let cu = Pose::new_v(vec3(200.0, 180.0, 1.5));
        let map = render_label_map(&scene, &bs, &cu, 96, 90.0).unwrap();
        // Re-derive the camera basis exactly as the renderer does.
        let o = bs.position;
        let forward = (cu.position - o).normalized();
        let right = forward.cross(vec3(0.0, 0.0, 1.0)).normalized();
        let up = right.cross(forward);
        let cu_box = cu_body_aabb(cu.position);
        let mut building_pixels = 0;
        for r in 0..96 {
            let py = 1.0 - 2.0 * (r as f64 + 0.5) / 96.0;
            for c in 0..96 {
                let px = 2.0 * (c as f64 + 0.5) / 96.0 - 1.0;
                let dir = (forward + right * px + up * py).normalized();
                let tb = face_hit_oracle(&scene.boxes[0].aabb, o, dir);
                let tcu = face_hit_oracle(&cu_box, o, dir);
                let tg = if dir.z < 0.0 { Some(-o.z / dir.z) } else { None };
                let mut label = CLASS_SKY;
                let mut best = f64::INFINITY;
                for (t, l) in [(tb, 7u8), (tcu, CLASS_CU), (tg, CLASS_GROUND)] {
                    if let Some(t) = t {
                        if t < best {
                            best = t;
                            label = l;
                        }
                    }
                }
                assert_eq!(map.label(r, c), label, "pixel ({r},{c})");
                if label == 7 {
                    building_pixels += 1;
                }
            }
        }
        assert!(building_pixels > 50, "building should be visible");
    }

    #[test]
    fn paper_scale_render_labels_in_range() {
        let cfg = SceneConfig::default();
        let scene = build_scene(&cfg, 42).unwrap();
        let bs = scene.bs.clone();
        let cu = Pose::new_v(vec3(200.0, 200.0, 1.5));
        let map = render_label_map(&scene, &bs, &cu, 256, 90.0).unwrap();
        assert!(map
            .labels
            .iter()
            .all(|&l| (1..=NUM_CLASSES as u8).contains(&l)));
    }

    fn uniform_map(h: usize, w: usize, class: u8) -> LabelMap {
        LabelMap {
            h,
            w,
            labels: vec![class; h * w],
            cu_pixel: (h / 2, w / 2),
            depth: None,
        }
    }

    #[test]
    fn adaptive_radius_endpoints_and_midpoint() {
        // ρ = 0: all ground.
        let map = uniform_map(256, 256, CLASS_GROUND);
        assert_eq!(adaptive_roi_radius(&map, 20, 100), 100);
        // ρ = 1: all obstacle.
        let map = uniform_map(256, 256, 7);
        assert_eq!(adaptive_roi_radius(&map, 20, 100), 20);
        // ρ = 0.5 by exact halves: window is fully inside a 512-wide map.
        let mut map = uniform_map(512, 512, CLASS_GROUND);
        let (u0, _) = map.cu_pixel;
        for u in 0..512 {
            for v in 0..512 {
                if u < u0 {
                    map.labels[u * 512 + v] = 7;
                }
            }
        }
        // Window rows: 100 above (obstacle) + center + 100 below (ground).
        // Obstacle fraction = 100/201; force exactly half instead.
        let mut half = uniform_map(512, 512, CLASS_GROUND);
        let mut flip = 0;
        let d_max = 100usize;
        let (u0, v0) = half.cu_pixel;
        let total = (2 * d_max + 1) * (2 * d_max + 1);
        'outer: for u in u0 - d_max..=u0 + d_max {
            for v in v0 - d_max..=v0 + d_max {
                if flip * 2 >= total {
                    break 'outer;
                }
                half.labels[u * 512 + v] = 7;
                flip += 1;
            }
        }
        // total is odd, so flipping ceil(total/2) gives ρ just over 1/2;
        // flip one back for ρ just under, both round to 60.
        assert_eq!(adaptive_roi_radius(&half, 20, 100), 60);
    }

    #[test]
    fn roi_disc_on_3x3_lattice() {
        let map = LabelMap {
            h: 3,
            w: 3,
            labels: vec![1; 9],
            cu_pixel: (1, 1),
            depth: None,
        };
        let sem = roi_semantic_vector(&map, 1, 0.0).unwrap();
        assert_eq!(sem.j_pc[0], 5); // center + 4 axis neighbors
        assert_eq!(sem.roi_pixels, 5);
        assert_eq!(sem.j_r, 0);
        assert_eq!(sem.j_po[0], 5);
        // Forced threshold above the count zeroes the class.
        assert_eq!(threshold_counts(&sem.j_pc, 6)[0], 0);
    }

    #[test]
    fn roi_counts_match_double_loop_oracle() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let labels: Vec<u8> = (0..64 * 64)
            .map(|_| rng.gen_range(1..=NUM_CLASSES as u8))
            .collect();
        let map = LabelMap {
            h: 64,
            w: 64,
            labels,
            cu_pixel: (32, 32),
            depth: None,
        };
        let sem = roi_semantic_vector(&map, 10, 0.01).unwrap();
        let mut oracle = vec![0u64; NUM_CLASSES];
        let mut total = 0u64;
        for u in 0..64i64 {
            for v in 0..64i64 {
                if (u - 32) * (u - 32) + (v - 32) * (v - 32) <= 100 {
                    oracle[(map.label(u as usize, v as usize) - 1) as usize] += 1;
                    total += 1;
                }
            }
        }
        assert_eq!(sem.j_pc, oracle);
        assert_eq!(sem.roi_pixels, total);
        assert_eq!(sem.j_pc.iter().sum::<u64>(), total);
        // Filter idempotence.
        assert_eq!(threshold_counts(&sem.j_po, sem.j_r), sem.j_po);
        // Area bound.
        let bound = std::f64::consts::PI * ((sem.d_r + 1) * (sem.d_r + 1)) as f64;
        assert!((sem.roi_pixels as f64) <= bound);
    }

    #[test]
    fn roi_counts_monotone_in_radius() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let labels: Vec<u8> = (0..64 * 64)
            .map(|_| rng.gen_range(1..=NUM_CLASSES as u8))
            .collect();
        let map = LabelMap {
            h: 64,
            w: 64,
            labels,
            cu_pixel: (20, 40),
            depth: None,
        };
        let mut prev = vec![0u64; NUM_CLASSES];
        for d_r in [2, 5, 9, 15, 30] {
            let sem = roi_semantic_vector(&map, d_r, 0.0).unwrap();
            for z in 0..NUM_CLASSES {
                assert!(sem.j_pc[z] >= prev[z]);
            }
            prev = sem.j_pc;
        }
    }

    #[test]
    fn class_merge_preserves_pixel_count() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let labels: Vec<u8> = (0..32 * 32)
            .map(|_| rng.gen_range(1..=NUM_CLASSES as u8))
            .collect();
        let map = LabelMap {
            h: 32,
            w: 32,
            labels,
            cu_pixel: (16, 16),
            depth: None,
        };
        for z_eff in [4, 8, 16, 28] {
            let merged = remap_label_map(&map, z_eff).unwrap();
            assert_eq!(merged.labels.len(), map.labels.len());
            assert!(merged.labels.iter().all(|&l| l >= 1 && l <= z_eff as u8));
        }
        assert!(class_merge_map(7).is_err());
        // Identity at 28.
        let same = remap_label_map(&map, 28).unwrap();
        assert_eq!(same.labels, map.labels);
    }

    #[test]
    fn building_class_used_by_renderer_is_consistent() {
        // A box whose roof is in band 2 of material 1 renders as that class.
        let cls = building_class(1, 25.0, 60.0);
        assert_eq!(cls, 5 + 6 + 2);
    }

    #[test]
    fn descriptor_histograms_sum_to_cell_pixels() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let labels: Vec<u8> = (0..64 * 64)
            .map(|_| rng.gen_range(1..=NUM_CLASSES as u8))
            .collect();
        let map = LabelMap {
            h: 64,
            w: 64,
            labels,
            cu_pixel: (32, 32),
            depth: None,
        };
        let desc = global_descriptor(&map);
        assert_eq!(desc.len(), DESC_LEN);
        for cell in desc.chunks(NUM_CLASSES + 1) {
            let s: f64 = cell[..NUM_CLASSES].iter().sum();
            assert_eq!(s, 64.0); // 8x8 pixels per cell
        }
        // Brute-force one specific cell.
        let mut count7 = 0.0;
        for u in 8..16 {
            for v in 16..24 {
                if map.label(u, v) == 7 {
                    count7 += 1.0;
                }
            }
        }
        assert_eq!(desc[(GRID + 2) * (NUM_CLASSES + 1) + 6], count7);
    }

    #[test]
    fn rotated_map_descriptor_is_cell_permutation() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(13);
        let labels: Vec<u8> = (0..64 * 64)
            .map(|_| rng.gen_range(1..=4u8))
            .collect();
        let rot: Vec<u8> = (0..64 * 64).map(|i| labels[64 * 64 - 1 - i]).collect();
        let m1 = LabelMap {
            h: 64,
            w: 64,
            labels,
            cu_pixel: (32, 32),
            depth: None,
        };
        let m2 = LabelMap {
            h: 64,
            w: 64,
            labels: rot,
            cu_pixel: (32, 32),
            depth: None,
        };
        let d1 = global_descriptor(&m1);
        let d2 = global_descriptor(&m2);
        let s = NUM_CLASSES + 1;
        for cell in 0..GRID * GRID {
            let mirror = GRID * GRID - 1 - cell;
            assert_eq!(d1[cell * s..(cell + 1) * s], d2[mirror * s..(mirror + 1) * s]);
        }
    }

    #[test]
    fn semantic_input_is_scale_invariant() {
        let sem1 = SemanticVector {
            j_pc: vec![10; NUM_CLASSES],
            j_po: vec![10; NUM_CLASSES],
            d_r: 10,
            j_r: 1,
            roi_pixels: 280,
        };
        let sem2 = SemanticVector {
            j_pc: vec![20; NUM_CLASSES],
            j_po: vec![20; NUM_CLASSES],
            d_r: 14,
            j_r: 1,
            roi_pixels: 560,
        };
        assert_eq!(semantic_input(&sem1), semantic_input(&sem2));
    }

    #[test]
    fn feature_nets_shapes_and_determinism() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        let mut ps = ParameterSet::new();
        init_feature_params(&mut ps, &mut rng);

        let x6: Vec<f64> = (0..4 * 6).map(|i| (i as f64) * 0.01).collect();
        let xd: Vec<f64> = (0..2 * DESC_LEN).map(|i| (i % 29) as f64 * 0.03).collect();
        let xs: Vec<f64> = (0..3 * NUM_CLASSES).map(|i| (i as f64) * 0.002).collect();

        let run = |ps: &ParameterSet| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let mut bn = Vec::new();
            let xi = g.constant(&[4, 6], x6.clone());
            let p = location_features(&mut g, ps, xi, false, &mut bn).unwrap();
            assert_eq!(g.shape(p), &[4, D_P]);
            assert!(bn.is_empty());
            let xi = g.constant(&[2, DESC_LEN], xd.clone());
            let j = global_image_features(&mut g, ps, xi).unwrap();
            assert_eq!(g.shape(j), &[2, D_I]);
            let xi = g.constant(&[3, NUM_CLASSES], xs.clone());
            let s = semantic_features(&mut g, ps, xi).unwrap();
            assert_eq!(g.shape(s), &[3, D_S]);
            (
                g.value(p).to_vec(),
                g.value(j).to_vec(),
                g.value(s).to_vec(),
            )
        };
        let a = run(&ps);
        let b = run(&ps);
        assert_eq!(a, b);

        // Train-mode records one BnUse per block with readable batch stats.
        let mut g = Graph::new();
        let mut bn = Vec::new();
        let xi = g.constant(&[4, 6], x6.clone());
        let _ = location_features(&mut g, &ps, xi, true, &mut bn).unwrap();
        assert_eq!(bn.len(), 2);
        let (m, v) = bn_batch_stats(&g, &bn[0]);
        assert_eq!(m.len(), D_P);
        assert_eq!(v.len(), D_P);
        assert!(v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn zero_input_zero_weight_semantic_features_are_zero() {
        let mut ps = ParameterSet::new();
        ps.insert("sv.fc1.w", &[NUM_CLASSES, D_S], vec![0.0; NUM_CLASSES * D_S]);
        ps.insert("sv.fc1.b", &[D_S], vec![0.0; D_S]);
        ps.insert("sv.fc2.w", &[D_S, D_S], vec![0.0; D_S * D_S]);
        ps.insert("sv.fc2.b", &[D_S], vec![0.0; D_S]);
        let mut g = Graph::new();
        let x = g.constant(&[1, NUM_CLASSES], vec![0.0; NUM_CLASSES]);
        let y = semantic_features(&mut g, &ps, x).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn location_input_scaling_and_domain_error() {
        let x = location_input(
            vec3(180.0, 240.0, 40.0),
            vec3(200.0, 100.0, 1.5),
            [400.0, 400.0, 60.0],
        )
        .unwrap();
        assert!((x[0] - 0.45).abs() < 1e-12);
        assert!((x[4] - 0.25).abs() < 1e-12);
        assert!(location_input(
            vec3(f64::NAN, 0.0, 0.0),
            vec3(0.0, 0.0, 0.0),
            [1.0, 1.0, 1.0]
        )
        .is_err());
    }
}
