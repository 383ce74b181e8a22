//! Reference / mixed-conditions / query splits over a ring-road world.
//!
//! Cameras drive a circle of radius `loop_radius` and look sideways
//! (left towards the centre or right away from it). The reference split
//! is one dense daytime traversal. Mixed-conditions images cover an arc
//! of the loop under every declared condition; query images cover a
//! disjoint arc under the night-family conditions.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::condition::{apply_profile, ConditionId, ConditionTable};
use super::geometry::{translation_distance, CameraPose, Intrinsics, Resolution};
use super::render::render_view;
use super::world::{generate_world, SceneWorld, WorldConfig};
use super::{CapturedImage, Split, WorldError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub conditions: ConditionTable,
    /// Conditions used for the held-out query split.
    pub query_conditions: Vec<String>,
    pub resolution: usize,
    pub intrinsics: Intrinsics,
    pub camera_height: f64,
    pub loop_radius: f64,
    pub reference_count: usize,
    pub mixed_per_condition: usize,
    pub query_count: usize,
    /// Arc of the loop, as fractions of a full turn, covered by the
    /// mixed-conditions split.
    pub mixed_arc: [f64; 2],
    pub query_arc: [f64; 2],
    pub lateral_sigma: f64,
    pub yaw_jitter_deg: f64,
    /// Minimum distance between any query and any mixed-conditions pose.
    pub disjoint_margin: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            conditions: ConditionTable::default(),
            query_conditions: vec!["night".into(), "night-rain".into()],
            resolution: 48,
            intrinsics: Intrinsics {
                focal: 40.0,
                near: 0.5,
                far: 40.0,
            },
            camera_height: 1.5,
            loop_radius: 64.0,
            reference_count: 400,
            mixed_per_condition: 40,
            query_count: 120,
            mixed_arc: [0.0, 0.45],
            query_arc: [0.55, 0.95],
            lateral_sigma: 0.5,
            yaw_jitter_deg: 4.0,
            disjoint_margin: 8.0,
        }
    }
}

impl DatasetConfig {
    pub fn resolution(&self) -> Resolution {
        Resolution::square(self.resolution)
    }

    /// Spacing between consecutive reference camera positions.
    pub fn reference_spacing(&self) -> f64 {
        TAU * self.loop_radius / self.reference_count.div_ceil(2).max(1) as f64
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        self.conditions.validate()?;
        self.intrinsics.validate()?;
        if self.query_conditions.is_empty() {
            return Err(WorldError::InvalidConfig("query_conditions is empty".into()));
        }
        for name in &self.query_conditions {
            self.conditions.id_of(name)?;
        }
        if self.reference_count == 0 {
            return Err(WorldError::InvalidConfig("reference_count must be positive".into()));
        }
        for (name, arc) in [("mixed_arc", self.mixed_arc), ("query_arc", self.query_arc)] {
            if !(arc[0] < arc[1] && arc[0] >= 0.0 && arc[1] <= 1.0) {
                return Err(WorldError::InvalidConfig(format!("{name} {arc:?} must satisfy 0 <= a < b <= 1")));
            }
        }
        if !(self.loop_radius > 0.0) || !(self.lateral_sigma >= 0.0) || !(self.yaw_jitter_deg >= 0.0) {
            return Err(WorldError::InvalidConfig(
                "loop_radius must be positive; lateral_sigma and yaw_jitter_deg non-negative".into(),
            ));
        }
        if let Some(road) = self.world.road {
            if (road.radius - self.loop_radius).abs() > 1e-9 {
                return Err(WorldError::InvalidConfig(format!(
                    "world road radius {} differs from loop_radius {}",
                    road.radius, self.loop_radius
                )));
            }
        }
        Ok(())
    }
}

/// An in-memory dataset. `images[i].image_id == i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub condition_names: Vec<String>,
    pub resolution: Resolution,
    pub images: Vec<CapturedImage>,
}

impl Dataset {
    pub fn get(&self, image_id: u32) -> Option<&CapturedImage> {
        self.images.get(image_id as usize)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CapturedImage> + '_ {
        self.images.iter().filter(move |i| i.split == split)
    }

    pub fn split_ids(&self, split: Split) -> Vec<u32> {
        self.split(split).map(|i| i.image_id).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn count_condition(&self, split: Split, condition: ConditionId) -> usize {
        self.split(split).filter(|i| i.condition == condition).count()
    }

    pub fn condition_id(&self, name: &str) -> Result<ConditionId, WorldError> {
        self.condition_names
            .iter()
            .position(|n| n == name)
            .map(ConditionId)
            .ok_or_else(|| WorldError::UnknownCondition(name.to_string()))
    }

    pub fn condition_name(&self, id: ConditionId) -> &str {
        self.condition_names.get(id.0).map(String::as_str).unwrap_or("?")
    }
}

struct Shot {
    split: Split,
    condition: ConditionId,
    pose: CameraPose,
}

fn ring_pose(cfg: &DatasetConfig, theta: f64, lateral: f64, look_left: bool, yaw_offset: f64) -> CameraPose {
    let r = cfg.loop_radius + lateral;
    let position = [r * theta.cos(), r * theta.sin(), cfg.camera_height];
    // Travel is counter-clockwise; left faces the loop centre.
    let heading = if look_left { theta + std::f64::consts::PI } else { theta };
    CameraPose::looking_horizontally(position, heading + yaw_offset)
}

fn jittered_pose(cfg: &DatasetConfig, arc: [f64; 2], rng: &mut ChaCha8Rng) -> CameraPose {
    let theta = TAU * rng.gen_range(arc[0]..arc[1]);
    let lateral = if cfg.lateral_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.lateral_sigma).expect("sigma validated");
        n.sample(rng).clamp(-3.0 * cfg.lateral_sigma, 3.0 * cfg.lateral_sigma)
    } else {
        0.0
    };
    let look_left = rng.gen_bool(0.5);
    let yaw = if cfg.yaw_jitter_deg > 0.0 {
        rng.gen_range(-cfg.yaw_jitter_deg..=cfg.yaw_jitter_deg).to_radians()
    } else {
        0.0
    };
    ring_pose(cfg, theta, lateral, look_left, yaw)
}

fn plan_shots(cfg: &DatasetConfig) -> Result<Vec<Shot>, WorldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_DA7A);
    let mut shots = Vec::new();

    let positions = cfg.reference_count.div_ceil(2);
    for i in 0..cfg.reference_count {
        let theta = TAU * (i / 2) as f64 / positions as f64;
        shots.push(Shot {
            split: Split::Reference,
            condition: ConditionId::REFERENCE,
            pose: ring_pose(cfg, theta, 0.0, i % 2 == 0, 0.0),
        });
    }
    for c in 0..cfg.conditions.len() {
        for _ in 0..cfg.mixed_per_condition {
            shots.push(Shot {
                split: Split::Mixed,
                condition: ConditionId(c),
                pose: jittered_pose(cfg, cfg.mixed_arc, &mut rng),
            });
        }
    }
    let qconds: Vec<ConditionId> = cfg
        .query_conditions
        .iter()
        .map(|n| cfg.conditions.id_of(n))
        .collect::<Result<_, _>>()?;
    for i in 0..cfg.query_count {
        shots.push(Shot {
            split: Split::Query,
            condition: qconds[i * qconds.len() / cfg.query_count.max(1)],
            pose: jittered_pose(cfg, cfg.query_arc, &mut rng),
        });
    }

    let mixed: Vec<&CameraPose> = shots.iter().filter(|s| s.split == Split::Mixed).map(|s| &s.pose).collect();
    for q in shots.iter().filter(|s| s.split == Split::Query) {
        if let Some(m) = mixed.iter().find(|m| translation_distance(&q.pose, m) < cfg.disjoint_margin) {
            return Err(WorldError::SplitOverlap(format!(
                "query pose at {:?} lies within {} of mixed-conditions pose at {:?}",
                q.pose.translation, cfg.disjoint_margin, m.translation
            )));
        }
    }
    Ok(shots)
}

/// Rounds to the 8-bit grid so in-memory images equal their PNG copies.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Per-image seed for condition noise.
pub fn noise_seed(dataset_seed: u64, image_id: u32) -> u64 {
    dataset_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(image_id as u64)
}

/// Generates the world and every split described by `cfg`.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<(SceneWorld, Dataset), WorldError> {
    cfg.validate()?;
    let world = generate_world(&cfg.world)?;
    let shots = plan_shots(cfg)?;
    let resolution = cfg.resolution();
    let images = shots
        .par_iter()
        .enumerate()
        .map(|(i, shot)| {
            let mut img = render_view(&world, &shot.pose, &cfg.intrinsics, resolution)?;
            let profile = &cfg.conditions.get(shot.condition)?.profile;
            let mut pixels = apply_profile(&img.pixels, profile, noise_seed(cfg.seed, i as u32));
            pixels.data_mut().iter_mut().for_each(|v| *v = quantize(*v));
            img.pixels = pixels;
            img.image_id = i as u32;
            img.split = shot.split;
            img.condition = shot.condition;
            Ok(img)
        })
        .collect::<Result<Vec<_>, WorldError>>()?;
    Ok((
        world,
        Dataset {
            condition_names: cfg.conditions.names().map(str::to_string).collect(),
            resolution,
            images,
        },
    ))
}
