use serde::{Deserialize, Serialize};

use super::{cross, normalize, sub, Camera, Cuboid, Scene, Vec3};

pub const POINTS_PER_OBJECT: usize = 128;

/// Rays must travel at least this far before a hit counts.
const MIN_HIT_T: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectCloud {
    pub id: u8,
    /// World-frame surface points; all zeros when `off_view`.
    pub points: Vec<Vec3>,
    pub off_view: bool,
}

/// Per-object partial views, sorted by object id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentedCloud {
    pub objects: Vec<ObjectCloud>,
    pub camera: Camera,
}

impl SegmentedCloud {
    pub fn get(&self, id: u8) -> Option<&ObjectCloud> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn ids(&self) -> Vec<u8> {
        self.objects.iter().map(|o| o.id).collect()
    }

    pub fn visible_ids(&self) -> Vec<u8> {
        self.objects.iter().filter(|o| !o.off_view).map(|o| o.id).collect()
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

/// Entry distance of the ray into the box, if any.
pub fn ray_box_entry(origin: Vec3, dir: Vec3, b: &Cuboid) -> Option<f64> {
    let (lo, hi) = (b.min(), b.max());
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        if dir[k] == 0.0 {
            if origin[k] < lo[k] || origin[k] > hi[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[k];
        let (mut t0, mut t1) = ((lo[k] - origin[k]) * inv, (hi[k] - origin[k]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
    }
    (t_near <= t_far && t_near > MIN_HIT_T).then_some(t_near)
}

/// Closest object hit by the ray: (index into `objects`, distance).
/// Exact ties go to the lower index.
pub fn first_hit(objects: &[Cuboid], origin: Vec3, dir: Vec3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in objects.iter().enumerate() {
        if let Some(t) = ray_box_entry(origin, dir, o) {
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((i, t));
            }
        }
    }
    best
}

/// Unit ray direction through the center of pixel (u, v), row 0 at the top.
pub fn pixel_ray(camera: &Camera, u: u32, v: u32) -> Vec3 {
    let f = camera.view_dir();
    let r = normalize(cross(f, [0.0, 0.0, 1.0]));
    let up = cross(r, f);
    let (w, h) = (f64::from(camera.resolution.0), f64::from(camera.resolution.1));
    let half = (camera.horizontal_fov / 2.0).tan();
    let x = (2.0 * (f64::from(u) + 0.5) / w - 1.0) * half;
    let y = (1.0 - 2.0 * (f64::from(v) + 0.5) / h) * half * h / w;
    normalize(std::array::from_fn(|k| f[k] + x * r[k] + y * up[k]))
}

/// Raw ray-cast hits per object, in pixel scan order.
pub fn raycast_hits(scene: &Scene) -> Vec<Vec<Vec3>> {
    let cam = &scene.camera;
    let mut hits = vec![Vec::new(); scene.objects.len()];
    for v in 0..cam.resolution.1 {
        for u in 0..cam.resolution.0 {
            let d = pixel_ray(cam, u, v);
            if let Some((i, t)) = first_hit(&scene.objects, cam.position, d) {
                hits[i].push(std::array::from_fn(|k| cam.position[k] + t * d[k]));
            }
        }
    }
    hits
}

/// Ids of objects with at least one visible point.
pub fn visible_ids(scene: &Scene) -> Vec<u8> {
    let hits = raycast_hits(scene);
    let mut ids: Vec<u8> = scene
        .objects
        .iter()
        .zip(&hits)
        .filter(|(_, h)| !h.is_empty())
        .map(|(o, _)| o.object_id)
        .collect();
    ids.sort_unstable();
    ids
}

/// Exactly `k` points: greedy farthest-point order starting from the first
/// point, or cyclic repetition when fewer than `k` are available.
pub fn farthest_point_sample(points: &[Vec3], k: usize) -> Vec<Vec3> {
    let n = points.len();
    if n == 0 {
        return vec![[0.0; 3]; k];
    }
    if n <= k {
        return (0..k).map(|i| points[i % n]).collect();
    }
    let d2 = |a: Vec3, b: Vec3| {
        let d = sub(a, b);
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    };
    let mut out = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; n];
    let mut current = 0;
    for _ in 0..k {
        out.push(points[current]);
        let c = points[current];
        let mut far = 0;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = d2(*p, c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > far_d {
                far_d = nearest[i];
                far = i;
            }
        }
        current = far;
    }
    out
}

pub fn render_cloud(scene: &Scene) -> SegmentedCloud {
    let hits = raycast_hits(scene);
    let mut objects: Vec<ObjectCloud> = scene
        .objects
        .iter()
        .zip(&hits)
        .map(|(o, h)| ObjectCloud {
            id: o.object_id,
            points: farthest_point_sample(h, POINTS_PER_OBJECT),
            off_view: h.is_empty(),
        })
        .collect();
    objects.sort_by_key(|o| o.id);
    SegmentedCloud {
        objects,
        camera: scene.camera.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(id: u8, c: Vec3, h: f64) -> Cuboid {
        Cuboid::new(id, c, [h; 3])
    }

    fn on_surface(b: &Cuboid, p: Vec3, tol: f64) -> bool {
        let (lo, hi) = (b.min(), b.max());
        let inside = (0..3).all(|k| p[k] >= lo[k] - tol && p[k] <= hi[k] + tol);
        let on_face = (0..3).any(|k| (p[k] - lo[k]).abs() <= tol || (p[k] - hi[k]).abs() <= tol);
        inside && on_face
    }

    #[test]
    fn single_cube_points_on_its_surface() {
        let b = cube(3, [0.0, 0.0, 0.04], 0.04);
        let scene = Scene::new(vec![b.clone()], Camera::default()).unwrap();
        let cloud = render_cloud(&scene);
        let o = cloud.get(3).unwrap();
        assert!(!o.off_view);
        assert_eq!(o.points.len(), POINTS_PER_OBJECT);
        assert!(o.points.iter().all(|p| on_surface(&b, *p, 1e-6)));
    }

    #[test]
    fn fully_occluded_cube_is_off_view() {
        // Small cube hidden behind a large one along the camera axis.
        let cam = Camera::default();
        let front = Cuboid::new(0, [0.0, -0.3, 0.06], [0.06, 0.02, 0.06]);
        let back = cube(1, [0.0, -0.22, 0.015], 0.015);
        let hidden_behind_ground_line = Scene::new(vec![front, back], cam).unwrap();
        let cloud = render_cloud(&hidden_behind_ground_line);
        assert!(cloud.get(1).unwrap().off_view);
        assert!(cloud.get(1).unwrap().points.iter().all(|p| *p == [0.0; 3]));
        assert!(!cloud.get(0).unwrap().off_view);
    }

    #[test]
    fn hit_assignment_matches_brute_force_oracle() {
        let scene = Scene::new(
            vec![cube(0, [-0.05, 0.0, 0.03], 0.03), cube(1, [0.05, 0.0, 0.03], 0.03)],
            Camera::default(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Oracle: march each ray in small steps and report the first box containing the sample.
        let oracle = |o: Vec3, d: Vec3| -> Option<usize> {
            let mut t = 0.0;
            while t < 2.0 {
                let p: Vec3 = std::array::from_fn(|k| o[k] + t * d[k]);
                for (i, b) in scene.objects.iter().enumerate() {
                    let (lo, hi) = (b.min(), b.max());
                    if (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k]) {
                        return Some(i);
                    }
                }
                t += 2e-4;
            }
            None
        };
        let mut agree = 0;
        let mut disagreements_near_edges = 0;
        for _ in 0..1000 {
            let target: Vec3 = [
                rng.random_range(-0.12..0.12),
                rng.random_range(-0.05..0.05),
                rng.random_range(0.0..0.08),
            ];
            let d = normalize(sub(target, scene.camera.position));
            let fast = first_hit(&scene.objects, scene.camera.position, d).map(|h| h.0);
            let slow = oracle(scene.camera.position, d);
            if fast == slow {
                agree += 1;
            } else {
                // Only grazing rays within one march step of an edge may differ.
                disagreements_near_edges += 1;
            }
        }
        assert!(disagreements_near_edges <= 5, "{disagreements_near_edges} disagreements");
        assert!(agree >= 995);
    }

    #[test]
    fn fps_is_deterministic_and_exact_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [0usize, 1, 5, 127, 128, 129, 500] {
            let pts: Vec<Vec3> = (0..n)
                .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                .collect();
            let a = farthest_point_sample(&pts, 128);
            let b = farthest_point_sample(&pts, 128);
            assert_eq!(a.len(), 128);
            assert_eq!(a, b);
            if n > 0 {
                assert!(a.iter().all(|p| pts.contains(p)));
            }
            if n >= 128 {
                let mut distinct = a.clone();
                distinct.sort_by(|x, y| x.partial_cmp(y).unwrap());
                distinct.dedup();
                assert_eq!(distinct.len(), 128);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = Scene::new(
            vec![cube(0, [0.0, 0.0, 0.03], 0.03), cube(2, [0.0, 0.0, 0.09], 0.03)],
            Camera::default(),
        )
        .unwrap();
        assert_eq!(render_cloud(&scene), render_cloud(&scene));
    }
}
