use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_action, Skill, SkillAction};
use crate::error::{invalid, Result};
use crate::relations::{label_scene_with_visibility, RelationMatrix};
use crate::scene::{render_cloud, sample_scene, Cuboid, Scene, SceneConfig, SegmentedCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Inclusive range of actions per episode.
    pub horizon: (usize, usize),
    pub push_fraction: f64,
    /// Push displacement length range, meters.
    pub push_distance: (f64, f64),
    /// Pick-place displacement per axis lies in ±this, meters.
    pub pick_place_range: f64,
    pub scene: SceneConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            min_objects: 2,
            max_objects: 5,
            horizon: (1, 3),
            push_fraction: 0.5,
            push_distance: (0.03, 0.3),
            pick_place_range: 0.4,
            scene: SceneConfig::default(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 1 || self.min_objects > self.max_objects || self.max_objects > 16 {
            return invalid(format!(
                "object count range {}..={} invalid",
                self.min_objects, self.max_objects
            ));
        }
        let (h0, h1) = self.horizon;
        if h0 < 1 || h0 > h1 {
            return invalid(format!("horizon range {h0}..={h1} invalid"));
        }
        if !(0.0..=1.0).contains(&self.push_fraction) {
            return invalid("push fraction outside [0, 1]");
        }
        let (d0, d1) = self.push_distance;
        if !(0.0 <= d0 && d0 <= d1 && d1 <= 1.2) || !(0.0..=0.8).contains(&self.pick_place_range) {
            return invalid("skill parameter ranges invalid");
        }
        self.scene.validate()
    }
}

/// Everything recorded about one world state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub cloud: SegmentedCloud,
    pub relations: RelationMatrix,
    /// Ground-truth boxes, sorted by id.
    pub poses: Vec<Cuboid>,
}

impl Observation {
    pub fn scene(&self) -> Scene {
        Scene {
            objects: self.poses.clone(),
            camera: self.cloud.camera.clone(),
        }
    }
}

/// H + 1 observations interleaved with H actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub index: u64,
    pub observations: Vec<Observation>,
    pub actions: Vec<SkillAction>,
}

impl Episode {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn n_objects(&self) -> usize {
        self.observations.first().map_or(0, |o| o.poses.len())
    }
}

pub fn observe(scene: &Scene) -> Observation {
    let cloud = render_cloud(scene);
    let relations = label_scene_with_visibility(scene, &cloud.visible_ids());
    let mut poses = scene.objects.clone();
    poses.sort_by_key(|o| o.object_id);
    Observation {
        cloud,
        relations,
        poses,
    }
}

/// Independent generator for one episode of a corpus.
pub fn episode_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(b"episode\0");
    ChaCha8Rng::from_seed(key)
}

/// A uniformly random action on a visible object.
pub fn random_action<R: Rng + ?Sized>(
    rng: &mut R,
    visible: &[u8],
    cfg: &GenerationConfig,
) -> Option<SkillAction> {
    if visible.is_empty() {
        return None;
    }
    let target = visible[rng.random_range(0..visible.len())];
    let skill = if rng.random_bool(cfg.push_fraction) {
        Skill::Push
    } else {
        Skill::PickPlace
    };
    let params = match skill {
        Skill::Push => {
            let (lo, hi) = cfg.push_distance;
            let d = rng.random_range(lo..=hi);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            [d * a.cos(), d * a.sin()]
        }
        Skill::PickPlace => {
            let r = cfg.pick_place_range;
            [rng.random_range(-r..=r), rng.random_range(-r..=r)]
        }
    };
    Some(SkillAction::new(skill, target, params))
}

pub fn generate_episode(master_seed: u64, index: u64, cfg: &GenerationConfig) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = episode_rng(master_seed, index);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let stacks = rng.random_range(1..=n.min(2));
    let h = rng.random_range(cfg.horizon.0..=cfg.horizon.1);
    'restart: loop {
        let mut scene = sample_scene(&mut rng, n, stacks, &cfg.scene)?;
        let mut observations = vec![observe(&scene)];
        let mut actions = Vec::with_capacity(h);
        for _ in 0..h {
            let visible = observations[observations.len() - 1].cloud.visible_ids();
            let Some(action) = random_action(&mut rng, &visible, cfg) else {
                continue 'restart;
            };
            scene = apply_action(&scene, &action)?;
            observations.push(observe(&scene));
            actions.push(action);
        }
        return Ok(Episode {
            index,
            observations,
            actions,
        });
    }
}

/// Episodes `0..n_episodes`, generated in parallel and returned in index order.
pub fn generate_dataset(master_seed: u64, n_episodes: usize, cfg: &GenerationConfig) -> Result<Vec<Episode>> {
    cfg.validate()?;
    (0..n_episodes as u64)
        .into_par_iter()
        .map(|i| generate_episode(master_seed, i, cfg))
        .collect()
}
