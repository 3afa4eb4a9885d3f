//! Ground-truth spatial relations between ordered object pairs, in
//! camera-aligned axes, and conjunctive relational goals.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::scene::{visible_ids, Camera, Cuboid, Scene, Vec3};

/// Separation and contact tolerance, meters.
pub const RELATION_TOL: f64 = 1e-3;
/// Footprint overlaps at or below this are treated as zero area.
const FOOTPRINT_EPS: f64 = 1e-9;
pub const NUM_RELATIONS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Left,
    Right,
    Behind,
    InFront,
    Above,
    Below,
    InContact,
}

impl Relation {
    pub const ALL: [Relation; NUM_RELATIONS] = [
        Relation::Left,
        Relation::Right,
        Relation::Behind,
        Relation::InFront,
        Relation::Above,
        Relation::Below,
        Relation::InContact,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Behind => "behind",
            Relation::InFront => "in_front",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::InContact => "in_contact",
        }
    }

    /// The relation that holds for (j, i) whenever this one holds for (i, j).
    pub fn converse(self) -> Self {
        match self {
            Relation::Left => Relation::Right,
            Relation::Right => Relation::Left,
            Relation::Behind => Relation::InFront,
            Relation::InFront => Relation::Behind,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::InContact => Relation::InContact,
        }
    }

    /// The relation that can never hold together with this one on a pair.
    pub fn exclusive(self) -> Option<Self> {
        match self {
            Relation::InContact => None,
            r => Some(r.converse()),
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', ' '], "_");
        Self::ALL
            .into_iter()
            .find(|r| r.name() == norm)
            .ok_or_else(|| Error::Invalid(format!("unknown relation {s:?}")))
    }
}

impl Serialize for Relation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Relation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Seven booleans in the order left, right, behind, in_front, above, below,
/// in_contact. Serialized as an array of seven 0/1 integers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct RelationVector(pub [bool; NUM_RELATIONS]);

impl RelationVector {
    pub fn get(&self, r: Relation) -> bool {
        self.0[r.index()]
    }

    pub fn set(&mut self, r: Relation, v: bool) {
        self.0[r.index()] = v;
    }

    pub fn as_f64(&self) -> [f64; NUM_RELATIONS] {
        self.0.map(f64::from)
    }

    /// The vector that holds for the reversed pair.
    pub fn converse(&self) -> Self {
        let mut out = Self::default();
        for r in Relation::ALL {
            out.set(r.converse(), self.get(r));
        }
        out
    }
}

impl Serialize for RelationVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.map(u8::from).serialize(s)
    }
}

impl<'de> Deserialize<'de> for RelationVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let bits = <[u8; NUM_RELATIONS]>::deserialize(d)?;
        if bits.iter().any(|b| *b > 1) {
            return Err(serde::de::Error::custom("relation bits must be 0 or 1"));
        }
        Ok(Self(bits.map(|b| b == 1)))
    }
}

/// Relation vectors for every ordered pair (i, j), i ≠ j.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelationMatrix {
    entries: BTreeMap<(u8, u8), RelationVector>,
}

impl RelationMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, i: u8, j: u8, v: RelationVector) {
        self.entries.insert((i, j), v);
    }

    pub fn get(&self, i: u8, j: u8) -> Option<&RelationVector> {
        self.entries.get(&(i, j))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in ascending (i, j) order.
    pub fn iter(&self) -> impl Iterator<Item = ((u8, u8), &RelationVector)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// Renames every object id through `map`.
    pub fn relabel(&self, map: impl Fn(u8) -> u8) -> Self {
        Self {
            entries: self.entries.iter().map(|(&(i, j), v)| ((map(i), map(j)), *v)).collect(),
        }
    }
}

impl Serialize for RelationMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(self.entries.len()))?;
        for ((i, j), v) in &self.entries {
            m.serialize_entry(&format!("{i},{j}"), v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for RelationMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = BTreeMap::<String, RelationVector>::deserialize(d)?;
        let mut entries = BTreeMap::new();
        for (k, v) in raw {
            let parsed = k
                .split_once(',')
                .and_then(|(a, b)| Some((a.trim().parse::<u8>().ok()?, b.trim().parse::<u8>().ok()?)));
            match parsed {
                Some((i, j)) if i != j => {
                    entries.insert((i, j), v);
                }
                _ => return Err(serde::de::Error::custom(format!("bad pair key {k:?}"))),
            }
        }
        Ok(Self { entries })
    }
}

/// Camera-frame axis-aligned bounds (min, max) of a cuboid.
pub fn camera_aabb(b: &Cuboid, camera: &Camera) -> (Vec3, Vec3) {
    let f = camera.frame();
    let (lo, hi) = (b.min(), b.max());
    let mut mn = [f64::INFINITY; 3];
    let mut mx = [f64::NEG_INFINITY; 3];
    for c in 0..8 {
        let corner = [
            if c & 1 == 0 { lo[0] } else { hi[0] },
            if c & 2 == 0 { lo[1] } else { hi[1] },
            if c & 4 == 0 { lo[2] } else { hi[2] },
        ];
        let p = f.to_camera(corner);
        for k in 0..3 {
            mn[k] = mn[k].min(p[k]);
            mx[k] = mx[k].max(p[k]);
        }
    }
    (mn, mx)
}

pub fn label_pair(a: &Cuboid, b: &Cuboid, camera: &Camera) -> RelationVector {
    let (amin, amax) = camera_aabb(a, camera);
    let (bmin, bmax) = camera_aabb(b, camera);
    let gap = |k: usize| (amin[k] - bmax[k]).max(bmin[k] - amax[k]);
    let overlap = |k: usize| amax[k].min(bmax[k]) - amin[k].max(bmin[k]);
    let footprint = overlap(0) > FOOTPRINT_EPS && overlap(1) > FOOTPRINT_EPS;
    let t = RELATION_TOL;
    let mut v = RelationVector::default();
    v.set(Relation::Left, amax[0] <= bmin[0] + t);
    v.set(Relation::Right, bmax[0] <= amin[0] + t);
    v.set(Relation::Behind, amin[1] >= bmax[1] - t);
    v.set(Relation::InFront, bmin[1] >= amax[1] - t);
    v.set(Relation::Above, footprint && amin[2] >= bmax[2] - t);
    v.set(Relation::Below, footprint && bmin[2] >= amax[2] - t);
    v.set(Relation::InContact, (0..3).all(|k| gap(k) <= t));
    v
}

/// Labels every ordered pair; objects without visible points get all-false
/// vectors against every partner.
pub fn label_scene(scene: &Scene) -> RelationMatrix {
    label_scene_with_visibility(scene, &visible_ids(scene))
}

pub fn label_scene_with_visibility(scene: &Scene, visible: &[u8]) -> RelationMatrix {
    let mut m = RelationMatrix::new();
    for a in &scene.objects {
        for b in &scene.objects {
            if a.object_id == b.object_id {
                continue;
            }
            let both = visible.contains(&a.object_id) && visible.contains(&b.object_id);
            let v = if both {
                label_pair(a, b, &scene.camera)
            } else {
                RelationVector::default()
            };
            m.insert(a.object_id, b.object_id, v);
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Conjunct {
    pub pair: [u8; 2],
    pub rel: Relation,
    pub value: bool,
}

impl Conjunct {
    pub fn new(i: u8, j: u8, rel: Relation, value: bool) -> Self {
        Self {
            pair: [i, j],
            rel,
            value,
        }
    }

    /// Same statement written with the smaller id first.
    pub fn canonical(&self) -> Self {
        let [i, j] = self.pair;
        if i <= j {
            *self
        } else {
            Self::new(j, i, self.rel.converse(), self.value)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub conjuncts: Vec<Conjunct>,
}

impl Goal {
    pub fn new(conjuncts: Vec<Conjunct>) -> Result<Self> {
        let g = Self { conjuncts };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let canon: Vec<Conjunct> = self.conjuncts.iter().map(Conjunct::canonical).collect();
        for (k, c) in canon.iter().enumerate() {
            if c.pair[0] == c.pair[1] {
                return invalid(format!("goal pair ({0},{0}) relates an object to itself", c.pair[0]));
            }
            for d in &canon[..k] {
                if d.pair != c.pair {
                    continue;
                }
                if d.rel == c.rel && d.value != c.value {
                    return invalid(format!(
                        "contradictory goal: {}({},{}) required both true and false",
                        c.rel, c.pair[0], c.pair[1]
                    ));
                }
                if c.value && d.value && c.rel.exclusive() == Some(d.rel) {
                    return invalid(format!(
                        "mutually exclusive goal relations {} and {} on ({},{})",
                        d.rel, c.rel, c.pair[0], c.pair[1]
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Goal = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("goal serializes")
    }

    pub fn len(&self) -> usize {
        self.conjuncts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conjuncts.is_empty()
    }
}

pub fn goal_satisfied(m: &RelationMatrix, g: &Goal) -> Result<bool> {
    let mut all = true;
    for c in &g.conjuncts {
        let [i, j] = c.pair;
        let known = |id: u8| m.iter().any(|((a, _), _)| a == id);
        let v = m
            .get(i, j)
            .ok_or(Error::UnknownObject(if known(i) { j } else { i }))?;
        all &= v.get(c.rel) == c.value;
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(id: u8, c: Vec3, h: f64) -> Cuboid {
        Cuboid::new(id, c, [h; 3])
    }

    #[test]
    fn identical_boxes_are_only_in_contact() {
        let a = cube(0, [0.1, 0.05, 0.03], 0.03);
        let b = cube(1, [0.1, 0.05, 0.03], 0.03);
        let v = label_pair(&a, &b, &Camera::default());
        assert_eq!(v.0, [false, false, false, false, false, false, true]);
    }

    #[test]
    fn separated_pair_left_and_right() {
        let cam = Camera::default();
        let a = cube(0, [-0.2, 0.0, 0.03], 0.03);
        let b = cube(1, [0.0, 0.0, 0.03], 0.03);
        assert!(label_pair(&a, &b, &cam).get(Relation::Left));
        assert!(label_pair(&b, &a, &cam).get(Relation::Right));
        assert!(!label_pair(&a, &b, &cam).get(Relation::InContact));
    }

    #[test]
    fn matrix_json_round_trip() {
        let mut m = RelationMatrix::new();
        let mut v = RelationVector::default();
        v.set(Relation::Above, true);
        m.insert(0, 1, v);
        m.insert(1, 0, v.converse());
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(text, r#"{"0,1":[0,0,0,0,1,0,0],"1,0":[0,0,0,0,0,1,0]}"#);
        let back: RelationMatrix = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<RelationMatrix>(r#"{"1,1":[0,0,0,0,0,0,0]}"#).is_err());
    }

    #[test]
    fn four_objects_twelve_entries() {
        let objs = (0..4).map(|i| cube(i, [f64::from(i) * 0.1 - 0.15, 0.0, 0.03], 0.03)).collect();
        let s = Scene::new(objs, Camera::default()).unwrap();
        assert_eq!(label_scene(&s).len(), 12);
    }

    #[test]
    fn goal_json_and_validation() {
        let g = Goal::from_json(r#"{"conjuncts":[{"pair":[1,2],"rel":"above","value":true}]}"#).unwrap();
        assert_eq!(g.conjuncts[0], Conjunct::new(1, 2, Relation::Above, true));
        assert!(Goal::new(vec![
            Conjunct::new(0, 1, Relation::Left, true),
            Conjunct::new(0, 1, Relation::Right, true)
        ])
        .is_err());
        // right(1,0) is left(0,1) written the other way around.
        assert!(Goal::new(vec![
            Conjunct::new(0, 1, Relation::Left, true),
            Conjunct::new(1, 0, Relation::Right, false)
        ])
        .is_err());
        assert!(Goal::new(vec![
            Conjunct::new(0, 1, Relation::Left, true),
            Conjunct::new(0, 1, Relation::Right, false)
        ])
        .is_ok());
        assert!(Goal::new(vec![Conjunct::new(2, 2, Relation::Left, true)]).is_err());
    }

    #[test]
    fn goal_satisfaction() {
        let cam = Camera::default();
        let s = Scene::new(vec![cube(1, [0.0, 0.0, 0.09], 0.03), cube(2, [0.0, 0.0, 0.03], 0.03)], cam)
            .unwrap();
        let m = label_scene(&s);
        assert!(goal_satisfied(&m, &Goal::default()).unwrap());
        let g = Goal::new(vec![Conjunct::new(1, 2, Relation::Above, true)]).unwrap();
        assert!(goal_satisfied(&m, &g).unwrap());
        let g = Goal::new(vec![Conjunct::new(1, 2, Relation::Below, true)]).unwrap();
        assert!(!goal_satisfied(&m, &g).unwrap());
        let g = Goal::new(vec![Conjunct::new(1, 7, Relation::Above, true)]).unwrap();
        assert!(matches!(goal_satisfied(&m, &g), Err(Error::UnknownObject(7))));
    }

    #[test]
    fn random_goals_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..300 {
            let mut m = RelationMatrix::new();
            for i in 0..3u8 {
                for j in 0..3u8 {
                    if i != j {
                        m.insert(i, j, RelationVector(std::array::from_fn(|_| rng.random_bool(0.5))));
                    }
                }
            }
            let n = rng.random_range(0..5);
            let conj: Vec<Conjunct> = (0..n)
                .map(|_| {
                    let i = rng.random_range(0..3u8);
                    let j = (i + rng.random_range(1..3u8)) % 3;
                    Conjunct::new(i, j, Relation::ALL[rng.random_range(0..7)], rng.random_bool(0.5))
                })
                .collect();
            let g = Goal { conjuncts: conj };
            let mut expected = true;
            for c in &g.conjuncts {
                let bits = m.get(c.pair[0], c.pair[1]).unwrap().0;
                if bits[c.rel.index()] != c.value {
                    expected = false;
                }
            }
            assert_eq!(goal_satisfied(&m, &g).unwrap(), expected);
        }
    }

    #[test]
    fn relation_names_parse() {
        for r in Relation::ALL {
            assert_eq!(r.name().parse::<Relation>().unwrap(), r);
            assert_eq!(Relation::from_index(r.index()), Some(r));
        }
        assert_eq!("in-front".parse::<Relation>().unwrap(), Relation::InFront);
        assert!("near".parse::<Relation>().is_err());
    }
}
