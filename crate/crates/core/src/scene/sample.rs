use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::visible_ids;
use super::{Camera, Cuboid, Scene, MAX_HALF_EXTENT, MIN_HALF_EXTENT};
use crate::error::{invalid, Error, Result};
use crate::sim::{settle, SUPPORT_RATIO};

const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub half_extent_range: (f64, f64),
    /// Stack base centers are drawn from this xy rectangle.
    pub base_x: (f64, f64),
    pub base_y: (f64, f64),
    /// Minimum footprint gap between distinct stacks.
    pub stack_gap: f64,
    pub camera: Camera,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            half_extent_range: (MIN_HALF_EXTENT, MAX_HALF_EXTENT),
            base_x: (-0.2, 0.2),
            base_y: (-0.12, 0.12),
            stack_gap: 0.01,
            camera: Camera::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.half_extent_range;
        if !(MIN_HALF_EXTENT..=MAX_HALF_EXTENT).contains(&lo) || !(lo..=MAX_HALF_EXTENT).contains(&hi) {
            return invalid(format!("half extent range {lo}..{hi} outside [0.015, 0.06]"));
        }
        if !(self.base_x.0 <= self.base_x.1 && self.base_y.0 <= self.base_y.1) {
            return invalid("base region bounds out of order");
        }
        self.camera.validate()
    }
}

/// Draws 1 or 2 separated stacks of axis-aligned boxes, every one visible.
/// Ids are a random permutation of 0..n.
pub fn sample_scene<R: Rng + ?Sized>(
    rng: &mut R,
    n_objects: usize,
    n_stacks: usize,
    cfg: &SceneConfig,
) -> Result<Scene> {
    if !(1..=super::MAX_OBJECTS).contains(&n_objects) {
        return invalid(format!("n_objects {n_objects} out of range"));
    }
    if !(1..=2).contains(&n_stacks) || n_stacks > n_objects {
        return invalid(format!("n_stacks {n_stacks} invalid for {n_objects} objects"));
    }
    cfg.validate()?;
    for _ in 0..MAX_ATTEMPTS {
        if let Some(scene) = attempt(rng, n_objects, n_stacks, cfg) {
            return Ok(scene);
        }
    }
    Err(Error::SamplingFailed(MAX_ATTEMPTS))
}

fn attempt<R: Rng + ?Sized>(
    rng: &mut R,
    n_objects: usize,
    n_stacks: usize,
    cfg: &SceneConfig,
) -> Option<Scene> {
    let mut sizes = vec![1usize; n_stacks];
    for _ in n_stacks..n_objects {
        sizes[rng.random_range(0..n_stacks)] += 1;
    }
    let mut ids: Vec<u8> = (0..n_objects as u8).collect();
    ids.shuffle(rng);
    let (lo, hi) = cfg.half_extent_range;
    let mut stacks: Vec<Vec<Cuboid>> = Vec::new();
    let mut next = 0;
    for &size in &sizes {
        let mut stack: Vec<Cuboid> = Vec::with_capacity(size);
        for level in 0..size {
            let h: [f64; 3] = std::array::from_fn(|_| rng.random_range(lo..=hi));
            let cuboid = if level == 0 {
                Cuboid::new(ids[next], [0.0, 0.0, h[2]], h)
            } else {
                let below = &stack[level - 1];
                let mut placed = None;
                for _ in 0..20 {
                    let reach: [f64; 2] =
                        std::array::from_fn(|k| below.half_extents[k] + h[k]);
                    let c = [
                        below.center[0] + rng.random_range(-reach[0]..reach[0]) * 0.7,
                        below.center[1] + rng.random_range(-reach[1]..reach[1]) * 0.7,
                        below.top() + h[2],
                    ];
                    let cand = Cuboid::new(ids[next], c, h);
                    if cand.footprint_overlap_ratio(below) >= SUPPORT_RATIO {
                        placed = Some(cand);
                        break;
                    }
                }
                placed?
            };
            stack.push(cuboid);
            next += 1;
        }
        stacks.push(stack);
    }
    // Place stack bases, keeping the stacks' footprints apart.
    let mut objects: Vec<Cuboid> = Vec::with_capacity(n_objects);
    let mut placed_stacks: Vec<(f64, f64, f64, f64)> = Vec::new();
    for stack in &mut stacks {
        let x = rng.random_range(cfg.base_x.0..=cfg.base_x.1);
        let y = rng.random_range(cfg.base_y.0..=cfg.base_y.1);
        for o in stack.iter_mut() {
            o.center[0] += x;
            o.center[1] += y;
        }
        let bounds = stack.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |b, o| {
                (
                    b.0.min(o.min()[0]),
                    b.1.max(o.max()[0]),
                    b.2.min(o.min()[1]),
                    b.3.max(o.max()[1]),
                )
            },
        );
        let g = cfg.stack_gap;
        let clash = placed_stacks.iter().any(|p| {
            bounds.0 < p.1 + g && p.0 < bounds.1 + g && bounds.2 < p.3 + g && p.2 < bounds.3 + g
        });
        if clash {
            return None;
        }
        placed_stacks.push(bounds);
        objects.extend(stack.iter().cloned());
    }
    objects.sort_by_key(|o| o.object_id);
    let scene = Scene::new(objects, cfg.camera.clone()).ok()?;
    let settled = settle(&scene);
    if settled != scene {
        return None;
    }
    if visible_ids(&scene).len() != n_objects {
        return None;
    }
    Some(scene)
}
