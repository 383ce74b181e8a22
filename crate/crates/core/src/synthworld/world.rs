use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::WorldError;

/// Axis-aligned bounding box in metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extent {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Extent {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    fn validate(&self) -> Result<(), WorldError> {
        if (0..3).any(|i| !(self.max[i] >= self.min[i]) || !self.min[i].is_finite() || !self.max[i].is_finite()) {
            return Err(WorldError::InvalidConfig(format!("degenerate extent {self:?}")));
        }
        Ok(())
    }
}

/// Ring-shaped road kept free of landmarks so cameras driving along it
/// never sit inside a landmark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadCorridor {
    pub radius: f64,
    pub half_width: f64,
}

impl RoadCorridor {
    fn contains(&self, x: f64, y: f64) -> bool {
        ((x * x + y * y).sqrt() - self.radius).abs() < self.half_width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub num_landmarks: usize,
    pub extent: Extent,
    pub road: Option<RoadCorridor>,
    pub radius_range: [f64; 2],
    /// Weight of the spatially smooth palette in each landmark colour;
    /// 0 gives independent colours.
    pub palette_mix: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_landmarks: 4000,
            extent: Extent {
                min: [-100.0, -100.0, 0.3],
                max: [100.0, 100.0, 5.0],
            },
            road: Some(RoadCorridor {
                radius: 64.0,
                half_width: 3.5,
            }),
            radius_range: [0.3, 1.2],
            palette_mix: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u32,
    pub position: [f64; 3],
    pub color: [f64; 3],
    pub radius: f64,
}

/// Immutable set of coloured spherical landmarks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneWorld {
    pub landmarks: Vec<Landmark>,
    pub extent: Extent,
    pub seed: u64,
}

const PALETTE_WAVES: usize = 3;

/// Random smooth colour field over the ground plane: per channel, a sum
/// of plane waves with wavelengths between 40 and 120 m.
struct Palette {
    waves: [[(f64, f64, f64); PALETTE_WAVES]; 3],
}

impl Palette {
    fn new(seed: u64) -> Self {
        let mut rng = crate::seeding::rng_for("palette", &[seed]);
        let waves = std::array::from_fn(|_| {
            std::array::from_fn(|_| {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / rng.gen_range(40.0..120.0);
                (k * angle.cos(), k * angle.sin(), rng.gen_range(0.0..std::f64::consts::TAU))
            })
        });
        Self { waves }
    }

    /// Colour in `[0.05, 1]³` at ground position `(x, y)`.
    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        std::array::from_fn(|c| {
            let s: f64 = self.waves[c].iter().map(|(kx, ky, ph)| (kx * x + ky * y + ph).sin()).sum();
            0.525 + 0.475 * s / PALETTE_WAVES as f64
        })
    }
}

/// Places landmarks uniformly inside `config.extent` (outside the road
/// corridor, if one is given) with random radii. Colours blend an
/// independent draw with a smooth palette field (`palette_mix`).
pub fn generate_world(config: &WorldConfig) -> Result<SceneWorld, WorldError> {
    if config.num_landmarks == 0 {
        return Err(WorldError::InvalidConfig(
            "num_landmarks must be at least 1".into(),
        ));
    }
    config.extent.validate()?;
    let [rmin, rmax] = config.radius_range;
    if !(rmin > 0.0 && rmax >= rmin) {
        return Err(WorldError::InvalidConfig(format!(
            "landmark radius range {:?} must be positive and ordered",
            config.radius_range
        )));
    }

    if !(0.0..=1.0).contains(&config.palette_mix) {
        return Err(WorldError::InvalidConfig(format!(
            "palette_mix {} must lie in [0, 1]",
            config.palette_mix
        )));
    }
    let palette = Palette::new(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let e = &config.extent;
    let mut landmarks = Vec::with_capacity(config.num_landmarks);
    let mut attempts = 0usize;
    while landmarks.len() < config.num_landmarks {
        attempts += 1;
        if attempts > 1000 * config.num_landmarks {
            return Err(WorldError::InvalidConfig(
                "road corridor leaves no room for landmarks inside the extent".into(),
            ));
        }
        let position: [f64; 3] = std::array::from_fn(|i| {
            if e.max[i] > e.min[i] {
                rng.gen_range(e.min[i]..=e.max[i])
            } else {
                e.min[i]
            }
        });
        if config.road.is_some_and(|r| r.contains(position[0], position[1])) {
            continue;
        }
        let local = palette.at(position[0], position[1]);
        let mix = config.palette_mix;
        let color = std::array::from_fn(|c| mix * local[c] + (1.0 - mix) * rng.gen_range(0.05..1.0));
        let radius = if rmax > rmin {
            rng.gen_range(rmin..rmax)
        } else {
            rmin
        };
        landmarks.push(Landmark {
            id: landmarks.len() as u32,
            position,
            color,
            radius,
        });
    }
    Ok(SceneWorld {
        landmarks,
        extent: config.extent,
        seed: config.seed,
    })
}
