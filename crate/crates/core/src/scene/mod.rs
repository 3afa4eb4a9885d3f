//! World geometry: axis-aligned cuboids resting on a ground plane, viewed by
//! one virtual depth camera.

mod render;
mod sample;

pub use render::{
    farthest_point_sample, first_hit, pixel_ray, ray_box_entry, raycast_hits, render_cloud,
    visible_ids, ObjectCloud, SegmentedCloud, POINTS_PER_OBJECT,
};
pub use sample::{sample_scene, SceneConfig};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Vec3 = [f64; 3];

/// Largest number of distinct object identities.
pub const MAX_OBJECTS: usize = 16;
pub const MIN_HALF_EXTENT: f64 = 0.015;
pub const MAX_HALF_EXTENT: f64 = 0.06;
pub const GROUND_Z: f64 = 0.0;

/// Overlaps smaller than this are treated as touching, not intersecting.
pub const OVERLAP_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    #[serde(rename = "id")]
    pub object_id: u8,
    pub center: Vec3,
    pub half_extents: Vec3,
}

impl Cuboid {
    pub fn new(object_id: u8, center: Vec3, half_extents: Vec3) -> Self {
        Self {
            object_id,
            center,
            half_extents,
        }
    }

    pub fn min(&self) -> Vec3 {
        std::array::from_fn(|k| self.center[k] - self.half_extents[k])
    }

    pub fn max(&self) -> Vec3 {
        std::array::from_fn(|k| self.center[k] + self.half_extents[k])
    }

    pub fn bottom(&self) -> f64 {
        self.center[2] - self.half_extents[2]
    }

    pub fn top(&self) -> f64 {
        self.center[2] + self.half_extents[2]
    }

    pub fn footprint_area(&self) -> f64 {
        4.0 * self.half_extents[0] * self.half_extents[1]
    }

    /// Signed overlap along `axis`: positive when the intervals intersect.
    pub fn overlap_along(&self, other: &Cuboid, axis: usize) -> f64 {
        (self.max()[axis].min(other.max()[axis])) - (self.min()[axis].max(other.min()[axis]))
    }

    /// Area of the intersection of the two xy footprints.
    pub fn footprint_overlap_area(&self, other: &Cuboid) -> f64 {
        let ox = self.overlap_along(other, 0);
        let oy = self.overlap_along(other, 1);
        if ox > OVERLAP_EPS && oy > OVERLAP_EPS {
            ox * oy
        } else {
            0.0
        }
    }

    /// Fraction of this cuboid's footprint lying over `support`.
    pub fn footprint_overlap_ratio(&self, support: &Cuboid) -> f64 {
        self.footprint_overlap_area(support) / self.footprint_area()
    }

    pub fn footprints_overlap(&self, other: &Cuboid) -> bool {
        self.footprint_overlap_area(other) > 0.0
    }

    /// Smallest per-axis overlap: the distance one box would have to move
    /// to stop intersecting the other. Non-positive means no intersection.
    pub fn penetration_depth(&self, other: &Cuboid) -> f64 {
        (0..3)
            .map(|k| self.overlap_along(other, k))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn translate(&mut self, d: Vec3) {
        for k in 0..3 {
            self.center[k] += d[k];
        }
    }

    fn validate(&self) -> Result<()> {
        if usize::from(self.object_id) >= MAX_OBJECTS {
            return invalid(format!("object id {} outside [0, 16)", self.object_id));
        }
        if self.half_extents.iter().any(|h| !(*h > 0.0)) {
            return invalid(format!(
                "object {} has non-positive half extents {:?}",
                self.object_id, self.half_extents
            ));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return invalid(format!("object {} has a non-finite center", self.object_id));
        }
        Ok(())
    }
}

/// Pinhole depth camera; up is always world +z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    /// Radians.
    pub horizontal_fov: f64,
    pub resolution: (u32, u32),
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            position: [0.0, -0.9, 0.55],
            look_at: [0.0, 0.0, 0.05],
            horizontal_fov: 60f64.to_radians(),
            resolution: (160, 120),
        }
    }
}

/// Orthonormal camera-aligned axes: right, horizontal forward, up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraFrame {
    pub origin: Vec3,
    pub right: Vec3,
    pub forward: Vec3,
    pub up: Vec3,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let d = sub(self.look_at, self.position);
        if norm(d) == 0.0 {
            return invalid("camera position equals look_at");
        }
        if (d[0] * d[0] + d[1] * d[1]).sqrt() < 1e-9 {
            return invalid("camera view direction has no horizontal component");
        }
        if !(self.horizontal_fov > 0.0 && self.horizontal_fov < std::f64::consts::PI) {
            return invalid(format!("horizontal fov {} out of (0, pi)", self.horizontal_fov));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return invalid("camera resolution must be positive");
        }
        Ok(())
    }

    /// Unit viewing direction.
    pub fn view_dir(&self) -> Vec3 {
        normalize(sub(self.look_at, self.position))
    }

    /// Axes used for relation labels: forward is the viewing direction
    /// projected onto the ground plane, right = forward × up.
    pub fn frame(&self) -> CameraFrame {
        let d = self.view_dir();
        let forward = normalize([d[0], d[1], 0.0]);
        let up = [0.0, 0.0, 1.0];
        let right = cross(forward, up);
        CameraFrame {
            origin: self.position,
            right,
            forward,
            up,
        }
    }
}

impl CameraFrame {
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let q = sub(p, self.origin);
        [dot(q, self.right), dot(q, self.forward), dot(q, self.up)]
    }

    pub fn to_world(&self, p: Vec3) -> Vec3 {
        std::array::from_fn(|k| {
            self.origin[k] + p[0] * self.right[k] + p[1] * self.forward[k] + p[2] * self.up[k]
        })
    }
}

/// Rigid transform of world points into camera-aligned axes
/// (right = +x, horizontal forward = +y, up = +z, origin at the camera).
pub fn to_camera_frame(points: &[Vec3], camera: &Camera) -> Vec<Vec3> {
    let f = camera.frame();
    points.iter().map(|p| f.to_camera(*p)).collect()
}

pub fn from_camera_frame(points: &[Vec3], camera: &Camera) -> Vec<Vec3> {
    let f = camera.frame();
    points.iter().map(|p| f.to_world(*p)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Cuboid>,
    #[serde(default)]
    pub camera: Camera,
}

impl Scene {
    pub fn new(objects: Vec<Cuboid>, camera: Camera) -> Result<Self> {
        let s = Self { objects, camera };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        for (i, o) in self.objects.iter().enumerate() {
            o.validate()?;
            if self.objects[..i].iter().any(|p| p.object_id == o.object_id) {
                return invalid(format!("duplicate object id {}", o.object_id));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scene = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn get(&self, id: u8) -> Option<&Cuboid> {
        self.objects.iter().find(|o| o.object_id == id)
    }

    pub fn index_of(&self, id: u8) -> Option<usize> {
        self.objects.iter().position(|o| o.object_id == id)
    }

    /// Object ids in ascending order; this is the node order used by the model.
    pub fn sorted_ids(&self) -> Vec<u8> {
        let mut ids: Vec<u8> = self.objects.iter().map(|o| o.object_id).collect();
        ids.sort_unstable();
        ids
    }

    /// Largest pairwise penetration depth (0 when nothing intersects).
    pub fn max_penetration(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.objects.len() {
            for j in i + 1..self.objects.len() {
                worst = worst.max(self.objects[i].penetration_depth(&self.objects[j]));
            }
        }
        worst
    }

    pub fn translate_all(&mut self, d: Vec3) {
        for o in &mut self.objects {
            o.translate(d);
        }
        for k in 0..3 {
            self.camera.position[k] += d[k];
            self.camera.look_at[k] += d[k];
        }
    }
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}
