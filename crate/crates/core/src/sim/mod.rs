//! Kinematic push and pick-and-place with chained pushes, carried stacks and
//! a support-resolution settle.

mod episode;

pub use episode::{
    episode_rng, generate_dataset, generate_episode, observe, random_action, Episode, GenerationConfig,
    Observation,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scene::{visible_ids, Cuboid, Scene, Vec3, GROUND_Z, MAX_OBJECTS, OVERLAP_EPS};

/// Minimum fraction of an object's footprint that must lie over its support.
pub const SUPPORT_RATIO: f64 = 0.25;
pub const PUSH_SUBSTEP: f64 = 1e-3;
/// Vertical distance within which one box counts as resting on another.
pub const REST_EPS: f64 = 1e-6;
pub const MAX_DISPLACEMENT: f64 = 1.2;
const MAX_SLIDES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skill {
    Push,
    PickPlace,
}

impl Skill {
    pub const ALL: [Skill; 2] = [Skill::Push, Skill::PickPlace];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Skill::Push => "push",
            Skill::PickPlace => "pick_place",
        }
    }
}

impl std::str::FromStr for Skill {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "push" => Ok(Skill::Push),
            "pick_place" | "pickplace" => Ok(Skill::PickPlace),
            _ => invalid(format!("unknown skill {s:?}")),
        }
    }
}

/// Discrete skill, target object and planar world-frame displacement (m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillAction {
    pub skill: Skill,
    pub target: u8,
    pub params: [f64; 2],
}

impl SkillAction {
    pub fn new(skill: Skill, target: u8, params: [f64; 2]) -> Self {
        Self {
            skill,
            target,
            params,
        }
    }

    pub fn target_one_hot(&self) -> [f64; MAX_OBJECTS] {
        std::array::from_fn(|k| f64::from(k == usize::from(self.target)))
    }

    pub fn validate(&self) -> Result<()> {
        if usize::from(self.target) >= MAX_OBJECTS {
            return invalid(format!("target id {} outside [0, 16)", self.target));
        }
        let [dx, dy] = self.params;
        if !(dx.is_finite() && dy.is_finite()) || dx.hypot(dy) > MAX_DISPLACEMENT {
            return invalid(format!("displacement ({dx}, {dy}) exceeds 1.2 m or is not finite"));
        }
        Ok(())
    }
}

pub fn apply_action(scene: &Scene, action: &SkillAction) -> Result<Scene> {
    match action.skill {
        Skill::Push => apply_push(scene, action),
        Skill::PickPlace => apply_pick_place(scene, action),
    }
}

fn check_target(scene: &Scene, action: &SkillAction) -> Result<usize> {
    action.validate()?;
    let idx = scene
        .index_of(action.target)
        .ok_or(Error::UnknownObject(action.target))?;
    if !visible_ids(scene).contains(&action.target) {
        return Err(Error::OffView(action.target));
    }
    Ok(idx)
}

fn rests_on(upper: &Cuboid, lower: &Cuboid) -> bool {
    (upper.bottom() - lower.top()).abs() <= REST_EPS && upper.footprints_overlap(lower)
}

/// `root` plus every object transitively resting on it.
pub fn carried_group(objects: &[Cuboid], root: usize) -> Vec<usize> {
    let mut group = vec![root];
    let mut k = 0;
    while k < group.len() {
        let base = group[k];
        for (i, o) in objects.iter().enumerate() {
            if !group.contains(&i) && rests_on(o, &objects[base]) {
                group.push(i);
            }
        }
        k += 1;
    }
    group
}

fn interpenetrate(a: &Cuboid, b: &Cuboid) -> bool {
    a.penetration_depth(b) > OVERLAP_EPS
}

/// Distance `obstacle` must travel along unit `dir` to stop intersecting `mover`.
fn clearance_along(mover: &Cuboid, obstacle: &Cuboid, dir: [f64; 2]) -> f64 {
    let mut best = f64::INFINITY;
    for k in 0..2 {
        let t = if dir[k] > 0.0 {
            (mover.max()[k] - obstacle.min()[k]) / dir[k]
        } else if dir[k] < 0.0 {
            (obstacle.max()[k] - mover.min()[k]) / -dir[k]
        } else {
            continue;
        };
        best = best.min(t.max(0.0));
    }
    best
}

pub fn apply_push(scene: &Scene, action: &SkillAction) -> Result<Scene> {
    if action.skill != Skill::Push {
        return invalid("apply_push called with a non-push action");
    }
    let target = check_target(scene, action)?;
    let [dx, dy] = action.params;
    let dist = dx.hypot(dy);
    let mut objects = scene.objects.clone();
    if dist > 0.0 {
        let dir = [dx / dist, dy / dist];
        let group = carried_group(&objects, target);
        let start: Vec<Vec3> = group.iter().map(|&i| objects[i].center).collect();
        let n = (dist / PUSH_SUBSTEP).ceil().max(1.0) as usize;
        for step in 1..=n {
            let frac = step as f64 / n as f64;
            for (g, &i) in group.iter().enumerate() {
                objects[i].center[0] = start[g][0] + dx * frac;
                objects[i].center[1] = start[g][1] + dy * frac;
            }
            resolve_chain(&mut objects, &group, dir);
        }
    }
    Ok(settle(&Scene {
        objects,
        camera: scene.camera.clone(),
    }))
}

/// Moves anything the pushed group intersects forward along `dir`,
/// together with what it carries, until no moved object intersects another.
fn resolve_chain(objects: &mut [Cuboid], group: &[usize], dir: [f64; 2]) {
    let mut movers: Vec<usize> = group.to_vec();
    let mut k = 0;
    while k < movers.len() {
        let m = movers[k];
        for i in 0..objects.len() {
            if group.contains(&i) || i == m || !interpenetrate(&objects[m], &objects[i]) {
                continue;
            }
            let t = clearance_along(&objects[m], &objects[i], dir);
            if !t.is_finite() || t <= 0.0 {
                continue;
            }
            for j in carried_group(objects, i) {
                if group.contains(&j) {
                    continue;
                }
                objects[j].center[0] += dir[0] * t;
                objects[j].center[1] += dir[1] * t;
                if !movers.contains(&j) {
                    movers.push(j);
                }
            }
        }
        k += 1;
    }
}

pub fn apply_pick_place(scene: &Scene, action: &SkillAction) -> Result<Scene> {
    Ok(settle(&place_group(scene, action)?))
}

/// The carried group translated rigidly to its landing height, before any
/// support resolution.
pub fn place_group(scene: &Scene, action: &SkillAction) -> Result<Scene> {
    if action.skill != Skill::PickPlace {
        return invalid("pick-place called with a non-pick-place action");
    }
    let target = check_target(scene, action)?;
    let mut objects = scene.objects.clone();
    let group = carried_group(&objects, target);
    let [dx, dy] = action.params;
    for &i in &group {
        objects[i].center[0] += dx;
        objects[i].center[1] += dy;
    }
    // Lowest vertical offset at which the group touches nothing below it.
    let mut dz = group
        .iter()
        .map(|&i| GROUND_Z - objects[i].bottom())
        .fold(f64::NEG_INFINITY, f64::max);
    for &g in &group {
        for (i, o) in objects.iter().enumerate() {
            if !group.contains(&i) && o.footprints_overlap(&objects[g]) {
                dz = dz.max(o.top() - objects[g].bottom());
            }
        }
    }
    for &i in &group {
        objects[i].center[2] += dz;
    }
    Ok(Scene {
        objects,
        camera: scene.camera.clone(),
    })
}

/// Drops every object, bottom-up, onto the highest surface under its
/// footprint. An object with less than [`SUPPORT_RATIO`] of its footprint
/// over that surface slides away from the supports until clear and drops
/// again. Whatever rests on a moving object moves with it.
pub fn settle(scene: &Scene) -> Scene {
    let mut objects = scene.objects.clone();
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| {
        objects[a]
            .bottom()
            .total_cmp(&objects[b].bottom())
            .then(objects[a].object_id.cmp(&objects[b].object_id))
    });
    let mut done: Vec<usize> = Vec::with_capacity(objects.len());
    for &i in &order {
        let riders: Vec<usize> = carried_group(&objects, i)
            .into_iter()
            .filter(|j| *j != i && !done.contains(j))
            .collect();
        let before = objects[i].center;
        let mut o = objects[i].clone();
        for slide in 0..=MAX_SLIDES {
            let overlapping: Vec<&Cuboid> = done
                .iter()
                .map(|&j| &objects[j])
                .filter(|s| s.footprints_overlap(&o))
                .collect();
            let top = overlapping.iter().map(|s| s.top()).fold(GROUND_Z, f64::max);
            o.center[2] = top + o.half_extents[2];
            if overlapping.is_empty() || slide == MAX_SLIDES {
                break;
            }
            let supports: Vec<&Cuboid> = overlapping
                .into_iter()
                .filter(|s| (s.top() - top).abs() <= OVERLAP_EPS)
                .collect();
            let area: f64 = supports.iter().map(|s| o.footprint_overlap_area(s)).sum();
            if area / o.footprint_area() >= SUPPORT_RATIO {
                break;
            }
            let n = supports.len() as f64;
            let cx = supports.iter().map(|s| s.center[0]).sum::<f64>() / n;
            let cy = supports.iter().map(|s| s.center[1]).sum::<f64>() / n;
            let (mut ux, mut uy) = (o.center[0] - cx, o.center[1] - cy);
            let len = ux.hypot(uy);
            if len < 1e-12 {
                (ux, uy) = (1.0, 0.0);
            } else {
                (ux, uy) = (ux / len, uy / len);
            }
            let t = supports
                .iter()
                .map(|s| clearance_along(s, &o, [ux, uy]))
                .fold(0.0, f64::max);
            o.center[0] += ux * t;
            o.center[1] += uy * t;
        }
        let delta: Vec3 = std::array::from_fn(|k| o.center[k] - before[k]);
        objects[i] = o;
        if delta != [0.0; 3] {
            for &j in &riders {
                objects[j].translate(delta);
            }
        }
        done.push(i);
    }
    Scene {
        objects,
        camera: scene.camera.clone(),
    }
}
