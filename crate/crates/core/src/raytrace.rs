//! Image-method ray tracer over axis-aligned box faces plus the ground plane,
//! and narrowband MIMO channel assembly from the traced multipath components.

use crate::error::{Error, Result};
use crate::geom::{mirror_point, vec3, Vec3};
use crate::scene::{Material, Pose, Scene};
use crate::SPEED_OF_LIGHT;
use num_complex::Complex64;
use std::f64::consts::PI;

/// One specular multipath component between a TX/RX pose pair.
#[derive(Debug, Clone)]
pub struct PathComponent {
    /// Propagation delay tau = d / c, seconds.
    pub delay: f64,
    /// Departure direction (azimuth, elevation), radians.
    pub aod: (f64, f64),
    /// Arrival direction (azimuth, elevation), radians, pointing from RX
    /// toward the last interaction (or TX for LoS).
    pub aoa: (f64, f64),
    /// Complex path gain.
    pub gain: Complex64,
    /// Total unfolded propagation distance, meters.
    pub distance: f64,
    /// Number of reflections along the path.
    pub interactions: usize,
    /// Per-interaction reflection coefficients, in path order.
    pub gammas: Vec<Complex64>,
}

#[derive(Debug, Clone, Default)]
pub struct PathSet {
    pub paths: Vec<PathComponent>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }
    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Structured one-line-per-path text dump for debugging.
    pub fn dump_text(&self) -> String {
        let mut s = String::new();
        for p in &self.paths {
            s.push_str(&format!(
                "d={:.6} I={} tau={:.6e} aod=({:.6},{:.6}) aoa=({:.6},{:.6}) gain=({:.6e},{:.6e})\n",
                p.distance,
                p.interactions,
                p.delay,
                p.aod.0,
                p.aod.1,
                p.aoa.0,
                p.aoa.1,
                p.gain.re,
                p.gain.im
            ));
        }
        s
    }
}

/// Uniform planar array lying in the horizontal plane, broadside up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayGeometry {
    pub rows: usize,
    pub cols: usize,
    /// Element spacing in meters.
    pub spacing: f64,
    /// In-plane rotation about the vertical axis, radians.
    pub yaw: f64,
}

impl ArrayGeometry {
    pub fn upa(rows: usize, cols: usize, wavelength: f64) -> ArrayGeometry {
        ArrayGeometry {
            rows,
            cols,
            spacing: wavelength / 2.0,
            yaw: 0.0,
        }
    }
    pub fn elements(&self) -> usize {
        self.rows * self.cols
    }
}

/// Narrowband MIMO channel matrix, K x M complex, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<Complex64>,
    pub wavelength: f64,
}

impl ChannelMatrix {
    pub fn zero(rows: usize, cols: usize, wavelength: f64) -> ChannelMatrix {
        ChannelMatrix {
            rows,
            cols,
            entries: vec![Complex64::new(0.0, 0.0); rows * cols],
            wavelength,
        }
    }
    pub fn at(&self, k: usize, m: usize) -> Complex64 {
        self.entries[k * self.cols + m]
    }
    pub fn frobenius(&self) -> f64 {
        self.entries.iter().map(|e| e.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// A reflecting plane: one of a box's side/top faces, or the ground plane.
#[derive(Debug, Clone, Copy)]
struct Face {
    /// Axis of the outward normal (0=x, 1=y, 2=z).
    axis: usize,
    /// Sign of the outward normal.
    sign: f64,
    /// Plane coordinate along `axis`.
    offset: f64,
    /// Rectangle bounds along the two remaining axes; infinite for ground.
    lo: [f64; 2],
    hi: [f64; 2],
    material: Material,
}

impl Face {
    fn normal(&self) -> Vec3 {
        match self.axis {
            0 => vec3(self.sign, 0.0, 0.0),
            1 => vec3(0.0, self.sign, 0.0),
            _ => vec3(0.0, 0.0, self.sign),
        }
    }

    fn other_axes(&self) -> (usize, usize) {
        match self.axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }

    fn contains(&self, p: Vec3) -> bool {
        let (a, b) = self.other_axes();
        let (pa, pb) = (p.axis(a), p.axis(b));
        pa >= self.lo[0] - 1e-9
            && pa <= self.hi[0] + 1e-9
            && pb >= self.lo[1] - 1e-9
            && pb <= self.hi[1] + 1e-9
    }
}

fn collect_faces(scene: &Scene) -> Vec<Face> {
    let mut faces = Vec::new();
    // Ground plane, infinite extent, normal +z.
    faces.push(Face {
        axis: 2,
        sign: 1.0,
        offset: 0.0,
        lo: [f64::NEG_INFINITY, f64::NEG_INFINITY],
        hi: [f64::INFINITY, f64::INFINITY],
        material: scene.ground_material,
    });
    for b in &scene.boxes {
        for axis in 0..3 {
            let (oa, ob) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let lo = [b.aabb.min.axis(oa), b.aabb.min.axis(ob)];
            let hi = [b.aabb.max.axis(oa), b.aabb.max.axis(ob)];
            for (sign, offset) in [(-1.0, b.aabb.min.axis(axis)), (1.0, b.aabb.max.axis(axis))] {
                // Skip the face resting on the ground plane.
                if axis == 2 && sign < 0.0 && offset <= 1e-9 {
                    continue;
                }
                faces.push(Face {
                    axis,
                    sign,
                    offset,
                    lo,
                    hi,
                    material: b.material,
                });
            }
        }
    }
    faces
}

fn segment_clear(scene: &Scene, a: Vec3, b: Vec3) -> bool {
    scene.boxes.iter().all(|bx| !bx.aabb.occludes_segment(a, b))
}

fn direction_angles(d: Vec3) -> (f64, f64) {
    let n = d.normalized();
    (n.y.atan2(n.x), n.z.asin())
}

/// Free-space path gain with per-interaction reflection coefficients:
/// `(lambda / (4 pi d)) * prod(gammas) * exp(-j 2 pi d / lambda)`.
pub fn path_gain(distance: f64, gammas: &[Complex64], wavelength: f64) -> Result<Complex64> {
    if distance <= 0.0 {
        return Err(Error::Domain(format!(
            "path distance must be positive, got {distance}"
        )));
    }
    if wavelength <= 0.0 {
        return Err(Error::Domain("wavelength must be positive".into()));
    }
    let mag = wavelength / (4.0 * PI * distance);
    let mut g = Complex64::new(mag, 0.0);
    for gamma in gammas {
        g *= gamma;
    }
    let phase = -2.0 * PI * distance / wavelength;
    Ok(g * Complex64::from_polar(1.0, phase))
}

/// Enumerate unblocked specular paths between `tx` and `rx` by the image
/// method over ordered face sequences up to `max_reflections` bounces.
/// Returned paths are sorted by |gain| descending and truncated to
/// `max_paths`.
pub fn trace_paths(
    scene: &Scene,
    tx: &Pose,
    rx: &Pose,
    max_reflections: usize,
    max_paths: usize,
    wavelength: f64,
) -> Result<PathSet> {
    let (t, r) = (tx.position, rx.position);
    if t.dist(r) < 1e-12 {
        return Err(Error::Geometry(
            "tx and rx coincide; path geometry is degenerate".into(),
        ));
    }
    let faces = collect_faces(scene);
    let mut paths: Vec<PathComponent> = Vec::new();

    // Line of sight.
    if segment_clear(scene, t, r) {
        let d = t.dist(r);
        paths.push(PathComponent {
            delay: d / SPEED_OF_LIGHT,
            aod: direction_angles(r - t),
            aoa: direction_angles(t - r),
            gain: path_gain(d, &[], wavelength)?,
            distance: d,
            interactions: 0,
            gammas: vec![],
        });
    }

    // Ordered face sequences of length 1..=max_reflections.
    let mut seq: Vec<usize> = Vec::new();
    fn recurse(
        scene: &Scene,
        faces: &[Face],
        t: Vec3,
        r: Vec3,
        wavelength: f64,
        seq: &mut Vec<usize>,
        depth_left: usize,
        paths: &mut Vec<PathComponent>,
    ) {
        for (fi, _) in faces.iter().enumerate() {
            if seq.last() == Some(&fi) {
                continue;
            }
            seq.push(fi);
            if let Some(p) = evaluate_sequence(scene, faces, t, r, seq, wavelength) {
                paths.push(p);
            }
            if depth_left > 1 {
                recurse(scene, faces, t, r, wavelength, seq, depth_left - 1, paths);
            }
            seq.pop();
        }
    }
    if max_reflections > 0 {
        recurse(
            scene,
            &faces,
            t,
            r,
            wavelength,
            &mut seq,
            max_reflections,
            &mut paths,
        );
    }

    paths.sort_by(|a, b| {
        b.gain
            .norm()
            .partial_cmp(&a.gain.norm())
            .unwrap()
            .then(a.distance.partial_cmp(&b.distance).unwrap())
            .then(a.interactions.cmp(&b.interactions))
    });
    paths.truncate(max_paths);
    Ok(PathSet { paths })
}

/// Validate one ordered face sequence with the image method; returns the
/// path if geometrically realizable and unblocked.
fn evaluate_sequence(
    scene: &Scene,
    faces: &[Face],
    t: Vec3,
    r: Vec3,
    seq: &[usize],
    wavelength: f64,
) -> Option<PathComponent> {
    // Successive mirror images of the transmitter.
    let mut images = Vec::with_capacity(seq.len() + 1);
    images.push(t);
    for &fi in seq {
        let f = &faces[fi];
        let prev = *images.last().unwrap();
        images.push(mirror_point(prev, f.normal(), f.sign * f.offset));
    }

    // Backtrack reflection points from the receiver.
    let mut points = vec![Vec3::ZERO; seq.len()];
    let mut cur = r;
    for (i, &fi) in seq.iter().enumerate().rev() {
        let f = &faces[fi];
        let img = images[i + 1];
        let dir = img - cur;
        let denom = dir.dot(f.normal());
        if denom.abs() < 1e-12 {
            return None;
        }
        let tt = (f.sign * f.offset - cur.dot(f.normal())) / denom;
        if !(1e-9..=1.0 - 1e-9).contains(&tt) {
            return None;
        }
        let hit = cur + dir * tt;
        if !f.contains(hit) {
            return None;
        }
        points[i] = hit;
        cur = hit;
    }

    // Side checks: each bounce must arrive on the outward side of its face.
    let mut chain = Vec::with_capacity(seq.len() + 2);
    chain.push(t);
    chain.extend(points.iter().copied());
    chain.push(r);
    for (i, &fi) in seq.iter().enumerate() {
        let f = &faces[fi];
        let incoming = chain[i + 1] - chain[i];
        let outgoing = chain[i + 2] - chain[i + 1];
        if incoming.dot(f.normal()) >= -1e-12 || outgoing.dot(f.normal()) <= 1e-12 {
            return None;
        }
    }

    // Occlusion of every segment.
    let mut length = 0.0;
    for w in chain.windows(2) {
        if w[0].dist(w[1]) < 1e-9 {
            return None;
        }
        if !segment_clear(scene, w[0], w[1]) {
            return None;
        }
        length += w[0].dist(w[1]);
    }

    // Unfolded straight-line length must match the segment sum.
    let unfolded = images.last().unwrap().dist(r);
    debug_assert!((unfolded - length).abs() <= 1e-9 * length.max(1.0));

    let gammas: Vec<Complex64> = seq.iter().map(|&fi| faces[fi].material.reflection()).collect();
    let gain = path_gain(length, &gammas, wavelength).ok()?;
    Some(PathComponent {
        delay: length / SPEED_OF_LIGHT,
        aod: direction_angles(chain[1] - chain[0]),
        aoa: direction_angles(chain[chain.len() - 2] - chain[chain.len() - 1]),
        gain,
        distance: length,
        interactions: seq.len(),
        gammas,
    })
}

/// UPA steering vector for a plane wave direction `(az, el)`:
/// element (p,q) has phase `(2 pi / lambda) * spacing *
/// (p cos(el) sin(az) + q sin(el))`, flattened row-major.
pub fn steering_vector(
    geom: &ArrayGeometry,
    direction: (f64, f64),
    wavelength: f64,
) -> Vec<Complex64> {
    let (az, el) = (direction.0 - geom.yaw, direction.1);
    let k = 2.0 * PI / wavelength * geom.spacing;
    let u = el.cos() * az.sin();
    let v = el.sin();
    let mut out = Vec::with_capacity(geom.elements());
    for p in 0..geom.rows {
        for q in 0..geom.cols {
            let phase = k * (p as f64 * u + q as f64 * v);
            out.push(Complex64::from_polar(1.0, phase));
        }
    }
    out
}

/// Narrowband channel assembly: `H = sum_m gain_m * a_rx(aoa) a_tx(aod)^H`.
pub fn assemble_channel(
    paths: &PathSet,
    tx_geom: &ArrayGeometry,
    rx_geom: &ArrayGeometry,
    wavelength: f64,
) -> Result<ChannelMatrix> {
    if tx_geom.spacing <= 0.0 || rx_geom.spacing <= 0.0 || wavelength <= 0.0 {
        return Err(Error::config("array spacing and wavelength must be positive"));
    }
    let m = tx_geom.elements();
    let k = rx_geom.elements();
    let mut h = ChannelMatrix::zero(k, m, wavelength);
    for p in &paths.paths {
        let a_tx = steering_vector(tx_geom, p.aod, wavelength);
        let a_rx = steering_vector(rx_geom, p.aoa, wavelength);
        for (ki, rk) in a_rx.iter().enumerate() {
            for (mi, tm) in a_tx.iter().enumerate() {
                h.entries[ki * m + mi] += p.gain * rk * tm.conj();
            }
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Aabb;
    use crate::scene::{SceneBox, Scene};

    fn ground() -> Material {
        Material {
            id: 201,
            reflection_magnitude: 0.6,
            reflection_phase: PI,
            semantic_class: 2,
        }
    }

    fn empty_scene() -> Scene {
        Scene {
            boxes: vec![],
            ground_material: ground(),
            bs: Pose::new(0.0, 0.0, 10.0),
            cu_waypoints: vec![Pose::new(1.0, 0.0, 1.5)],
            cu_speed: 3.0,
            cu_dt: 1.0,
            rng_seed: 0,
            world_extent: [100.0, 100.0, 60.0],
        }
    }

    fn wall(x0: f64, x1: f64, y0: f64, y1: f64, h: f64, mag: f64) -> SceneBox {
        SceneBox {
            aabb: Aabb::new(vec3(x0, y0, 0.0), vec3(x1, y1, h)),
            material: Material {
                id: 0,
                reflection_magnitude: mag,
                reflection_phase: PI,
                semantic_class: 5,
            },
        }
    }

    const LAMBDA_28G: f64 = SPEED_OF_LIGHT / 28.0e9;

    #[test]
    fn free_space_single_los() {
        let scene = empty_scene();
        let tx = Pose::new(0.0, 0.0, 10.0);
        let rx = Pose::new(30.0, 0.0, 10.0);
        let ps = trace_paths(&scene, &tx, &rx, 0, 20, LAMBDA_28G).unwrap();
        assert_eq!(ps.len(), 1);
        let p = &ps.paths[0];
        assert_eq!(p.interactions, 0);
        assert!((p.distance - 30.0).abs() < 1e-12);
        assert!((p.delay - 30.0 / SPEED_OF_LIGHT).abs() < 1e-20);
    }

    #[test]
    fn coincident_endpoints_rejected() {
        let scene = empty_scene();
        let p = Pose::new(1.0, 2.0, 3.0);
        assert!(matches!(
            trace_paths(&scene, &p, &p, 0, 20, LAMBDA_28G),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn single_wall_mirror_matches_image_oracle() {
        // Wall occupying x in [10, 11]; tx and rx on the x<10 side. The
        // mirror for the x=10 face reflects tx across that plane.
        let mut scene = empty_scene();
        scene.boxes = vec![wall(10.0, 11.0, -20.0, 20.0, 40.0, 0.7)];
        let tx = Pose::new(0.0, -5.0, 10.0);
        let rx = Pose::new(2.0, 6.0, 12.0);
        let ps = trace_paths(&scene, &tx, &rx, 1, 20, LAMBDA_28G).unwrap();
        // LoS + wall bounce + ground bounce.
        assert_eq!(ps.len(), 3);
        let wall_path = ps
            .paths
            .iter()
            .find(|p| p.interactions == 1 && p.gammas[0].norm() > 0.65)
            .expect("wall reflection present");
        // Independent mirrored-geometry oracle.
        let img = vec3(2.0 * 10.0 - 0.0, -5.0, 10.0);
        let d_expect = img.dist(rx.position);
        assert!((wall_path.distance - d_expect).abs() <= 1e-9 * d_expect);
        let g_expect = LAMBDA_28G / (4.0 * PI * d_expect) * 0.7;
        assert!((wall_path.gain.norm() - g_expect).abs() <= 1e-12 * g_expect);
    }

    #[test]
    fn full_blockage_empty_pathset() {
        let mut scene = empty_scene();
        scene.boxes = vec![wall(4.0, 6.0, -50.0, 50.0, 50.0, 0.7)];
        let tx = Pose::new(0.0, 0.0, 10.0);
        let rx = Pose::new(10.0, 0.0, 10.0);
        let ps = trace_paths(&scene, &tx, &rx, 0, 20, LAMBDA_28G).unwrap();
        assert!(ps.is_empty());
    }

    #[test]
    fn gain_formula_fixed_point_and_closed_form() {
        let lam = LAMBDA_28G;
        // d = lambda / 4pi gives magnitude exactly 1.
        let g = path_gain(lam / (4.0 * PI), &[], lam).unwrap();
        assert!((g.norm() - 1.0).abs() < 1e-14);
        // 100 m free space at 28 GHz.
        let g = path_gain(100.0, &[], lam).unwrap();
        assert!((g.norm() - 8.5203e-6).abs() < 1e-9);
        // One reflection with |gamma| = 0.7, phase pi.
        let gamma = Complex64::from_polar(0.7, PI);
        let g = path_gain(120.0, &[gamma], lam).unwrap();
        assert!((g.norm() - 4.9702e-6).abs() < 1e-9);
        let expect_phase = (PI - 2.0 * PI * 120.0 / lam).rem_euclid(2.0 * PI);
        let got_phase = g.arg().rem_euclid(2.0 * PI);
        let mut dphi = (got_phase - expect_phase).abs();
        if dphi > PI {
            dphi = 2.0 * PI - dphi;
        }
        assert!(dphi < 1e-6, "phase mismatch {dphi}");
        assert!(matches!(
            path_gain(-1.0, &[], lam),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn steering_examples() {
        let lam = 0.01;
        let g44 = ArrayGeometry::upa(4, 4, lam);
        let v = steering_vector(&g44, (0.0, 0.0), lam);
        assert_eq!(v.len(), 16);
        for e in &v {
            assert!((e - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        let g11 = ArrayGeometry::upa(1, 1, lam);
        let v = steering_vector(&g11, (0.7, -0.3), lam);
        assert_eq!(v, vec![Complex64::new(1.0, 0.0)]);
        let g21 = ArrayGeometry::upa(2, 1, lam);
        let v = steering_vector(&g21, (PI / 2.0, 0.0), lam);
        assert!((v[0] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        assert!((v[1] - Complex64::new(-1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn assemble_examples() {
        let lam = 0.01;
        let g = ArrayGeometry::upa(4, 4, lam);
        // Single broadside path with unit gain: all-ones 16x16.
        let ps = PathSet {
            paths: vec![PathComponent {
                delay: 0.0,
                aod: (0.0, 0.0),
                aoa: (0.0, 0.0),
                gain: Complex64::new(1.0, 0.0),
                distance: 1.0,
                interactions: 0,
                gammas: vec![],
            }],
        };
        let h = assemble_channel(&ps, &g, &g, lam).unwrap();
        for e in &h.entries {
            assert!((e - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        // Empty set: zero matrix.
        let h0 = assemble_channel(&PathSet::default(), &g, &g, lam).unwrap();
        assert!(h0.entries.iter().all(|e| e.norm() == 0.0));
        // Two paths: entrywise sum of rank-one outer products.
        let mut two = ps.clone();
        two.paths.push(PathComponent {
            delay: 0.0,
            aod: (0.4, 0.1),
            aoa: (-0.2, 0.05),
            gain: Complex64::new(0.3, -0.2),
            distance: 2.0,
            interactions: 1,
            gammas: vec![],
        });
        let h2 = assemble_channel(&two, &g, &g, lam).unwrap();
        let a_tx = steering_vector(&g, (0.4, 0.1), lam);
        let a_rx = steering_vector(&g, (-0.2, 0.05), lam);
        for k in 0..16 {
            for m in 0..16 {
                let expect = Complex64::new(1.0, 0.0)
                    + Complex64::new(0.3, -0.2) * a_rx[k] * a_tx[m].conj();
                assert!((h2.at(k, m) - expect).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn reciprocity_distance_multiset() {
        let mut scene = empty_scene();
        scene.boxes = vec![
            wall(10.0, 12.0, -15.0, 15.0, 30.0, 0.7),
            wall(-8.0, -6.0, -10.0, 20.0, 25.0, 0.45),
        ];
        let a = Pose::new(0.0, -3.0, 8.0);
        let b = Pose::new(3.0, 9.0, 2.0);
        let fwd = trace_paths(&scene, &a, &b, 2, 50, LAMBDA_28G).unwrap();
        let bwd = trace_paths(&scene, &b, &a, 2, 50, LAMBDA_28G).unwrap();
        assert_eq!(fwd.len(), bwd.len());
        let key = |p: &PathComponent| (p.distance, p.interactions, p.gain.norm());
        let mut kf: Vec<_> = fwd.paths.iter().map(key).collect();
        let mut kb: Vec<_> = bwd.paths.iter().map(key).collect();
        kf.sort_by(|x, y| x.partial_cmp(y).unwrap());
        kb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (f, b) in kf.iter().zip(&kb) {
            assert!((f.0 - b.0).abs() < 1e-9);
            assert_eq!(f.1, b.1);
            assert!((f.2 - b.2).abs() < 1e-15);
        }
    }

    #[test]
    fn adding_a_box_never_adds_paths() {
        let mut scene = empty_scene();
        scene.boxes = vec![wall(10.0, 12.0, -15.0, 15.0, 30.0, 0.7)];
        let a = Pose::new(0.0, -3.0, 8.0);
        let b = Pose::new(3.0, 9.0, 2.0);
        let before = trace_paths(&scene, &a, &b, 1, 100, LAMBDA_28G).unwrap();
        // A blocking slab between the endpoints removes paths and (being a
        // new reflector) may only fail to add new valid ones here.
        scene.boxes.push(wall(1.0, 2.0, -30.0, 30.0, 50.0, 0.3));
        let after = trace_paths(&scene, &a, &b, 1, 100, LAMBDA_28G).unwrap();
        assert!(after.len() <= before.len());
    }

    #[test]
    fn gain_bound_holds() {
        let scene = crate::scene::build_scene(&crate::config::SceneConfig::default(), 5).unwrap();
        let cu = crate::scene::sample_cu_positions(&scene, 5).unwrap();
        for pose in &cu {
            let ps = trace_paths(&scene, &scene.bs.clone(), pose, 2, 20, LAMBDA_28G).unwrap();
            for p in &ps.paths {
                assert!(p.gain.norm() <= LAMBDA_28G / (4.0 * PI * p.distance) + 1e-18);
                assert!(p.distance > 0.0);
            }
        }
    }
}
