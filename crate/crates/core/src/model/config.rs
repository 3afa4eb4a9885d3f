use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::relations::NUM_RELATIONS;
use crate::scene::{MAX_OBJECTS, POINTS_PER_OBJECT};
use crate::sim::Skill;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Gnn,
    PairwiseMlp,
}

/// Where relation predictions come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationReadout {
    /// The learned classifier head.
    Learned,
    /// Labeler rules applied to predicted centroids with true half extents.
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub readout: RelationReadout,
    pub points_per_object: usize,
    pub point_hidden: usize,
    pub point_feature: usize,
    pub id_width: usize,
    pub latent: usize,
    pub graph_hidden: usize,
    pub message_rounds: usize,
    pub relation_hidden: usize,
    pub pose_hidden: usize,
    pub action_hidden: usize,
    pub dynamics_hidden: usize,
    pub n_relations: usize,
    /// Point coordinates are multiplied by this before encoding.
    pub coord_scale: f64,
    /// Action displacements are divided by these per-skill bounds.
    pub push_bound: f64,
    pub pick_place_bound: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Gnn,
            readout: RelationReadout::Learned,
            points_per_object: POINTS_PER_OBJECT,
            point_hidden: 64,
            point_feature: 128,
            id_width: MAX_OBJECTS,
            latent: 128,
            graph_hidden: 64,
            message_rounds: 1,
            relation_hidden: 64,
            pose_hidden: 64,
            action_hidden: 128,
            dynamics_hidden: 64,
            n_relations: NUM_RELATIONS,
            coord_scale: 10.0,
            push_bound: 0.3,
            pick_place_bound: 0.4,
        }
    }
}

impl ModelConfig {
    pub fn pairwise() -> Self {
        Self {
            architecture: Architecture::PairwiseMlp,
            ..Self::default()
        }
    }

    pub fn node_input(&self) -> usize {
        self.point_feature + self.id_width
    }

    /// skill one-hot ⊕ target one-hot ⊕ planar params.
    pub fn action_input(&self) -> usize {
        Skill::ALL.len() + self.id_width + 2
    }

    pub fn bound(&self, skill: Skill) -> f64 {
        match skill {
            Skill::Push => self.push_bound,
            Skill::PickPlace => self.pick_place_bound,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.points_per_object,
            self.point_hidden,
            self.point_feature,
            self.latent,
            self.graph_hidden,
            self.message_rounds,
            self.relation_hidden,
            self.pose_hidden,
            self.action_hidden,
            self.dynamics_hidden,
        ];
        if widths.contains(&0) {
            return invalid("model widths and round count must be positive");
        }
        if !(1..=MAX_OBJECTS).contains(&self.id_width) {
            return invalid(format!("id width must be in [1, {MAX_OBJECTS}]"));
        }
        if self.n_relations != NUM_RELATIONS {
            return invalid(format!("relation count must be {NUM_RELATIONS}"));
        }
        if ![self.coord_scale, self.push_bound, self.pick_place_bound]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            return invalid("coordinate scale and action bounds must be positive");
        }
        if self.readout == RelationReadout::Analytic && self.architecture != Architecture::Gnn {
            return invalid("analytic relation readout needs the pose head of the gnn architecture");
        }
        Ok(())
    }
}
