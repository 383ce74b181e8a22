//! Capturing conditions and their photometric transforms.
//!
//! Each transform applies, in order: desaturation towards Rec.601
//! luminance, a gamma curve, per-channel gain, an additive lift and
//! per-channel shift, an optional vertical box blur, Gaussian noise, and
//! finally a clamp to `[0, 1]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CapturedImage, WorldError};
use crate::numerics::Tensor;

/// Index into the declared condition table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionId(pub usize);

impl ConditionId {
    /// The daytime reference condition is always the first table entry.
    pub const REFERENCE: ConditionId = ConditionId(0);
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhotometricProfile {
    pub desaturate: f64,
    pub gamma: f64,
    pub gain: [f64; 3],
    pub lift: f64,
    pub shift: [f64; 3],
    /// Height of the vertical box blur; 1 disables it.
    pub vertical_blur: usize,
    pub noise_sigma: f64,
}

impl Default for PhotometricProfile {
    fn default() -> Self {
        Self::identity()
    }
}

impl PhotometricProfile {
    pub fn identity() -> Self {
        Self {
            desaturate: 0.0,
            gamma: 1.0,
            gain: [1.0; 3],
            lift: 0.0,
            shift: [0.0; 3],
            vertical_blur: 1,
            noise_sigma: 0.0,
        }
    }

    pub fn night() -> Self {
        Self {
            gamma: 1.4,
            gain: [0.30; 3],
            shift: [0.0, 0.0, 0.05],
            noise_sigma: 0.02,
            ..Self::identity()
        }
    }

    pub fn night_rain() -> Self {
        Self {
            vertical_blur: 3,
            noise_sigma: 0.04,
            ..Self::night()
        }
    }

    pub fn dawn() -> Self {
        Self {
            gamma: 1.1,
            gain: [1.05, 0.88, 0.70],
            shift: [0.04, 0.01, 0.0],
            noise_sigma: 0.01,
            ..Self::identity()
        }
    }

    pub fn dusk() -> Self {
        Self {
            gamma: 1.2,
            gain: [0.62, 0.50, 0.42],
            shift: [0.03, 0.0, 0.02],
            noise_sigma: 0.015,
            ..Self::identity()
        }
    }

    pub fn snow() -> Self {
        Self {
            desaturate: 0.5,
            gamma: 0.9,
            gain: [0.7; 3],
            lift: 0.3,
            noise_sigma: 0.01,
            ..Self::identity()
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn validate(&self) -> Result<(), WorldError> {
        let ok = (0.0..=1.0).contains(&self.desaturate)
            && self.gamma > 0.0
            && self.gain.iter().all(|g| *g >= 0.0)
            && self.vertical_blur >= 1
            && self.vertical_blur % 2 == 1
            && self.noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(WorldError::InvalidConfig(format!("invalid photometric profile {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub name: String,
    #[serde(default)]
    pub profile: PhotometricProfile,
}

/// Ordered list of declared conditions; entry 0 is the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionTable(pub Vec<ConditionSpec>);

impl Default for ConditionTable {
    fn default() -> Self {
        let c = |name: &str, profile| ConditionSpec {
            name: name.to_string(),
            profile,
        };
        Self(vec![
            c("reference-day", PhotometricProfile::identity()),
            c("dawn", PhotometricProfile::dawn()),
            c("dusk", PhotometricProfile::dusk()),
            c("snow", PhotometricProfile::snow()),
            c("night", PhotometricProfile::night()),
            c("night-rain", PhotometricProfile::night_rain()),
        ])
    }
}

impl ConditionTable {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|c| c.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Result<ConditionId, WorldError> {
        self.0
            .iter()
            .position(|c| c.name == name)
            .map(ConditionId)
            .ok_or_else(|| WorldError::UnknownCondition(name.to_string()))
    }

    pub fn get(&self, id: ConditionId) -> Result<&ConditionSpec, WorldError> {
        self.0
            .get(id.0)
            .ok_or_else(|| WorldError::UnknownCondition(format!("#{}", id.0)))
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.0.is_empty() {
            return Err(WorldError::InvalidConfig("no conditions declared".into()));
        }
        if !self.0[0].profile.is_identity() {
            return Err(WorldError::InvalidConfig(format!(
                "the first (reference) condition `{}` must use the identity profile",
                self.0[0].name
            )));
        }
        for (i, c) in self.0.iter().enumerate() {
            c.profile.validate()?;
            if self.0[..i].iter().any(|o| o.name == c.name) {
                return Err(WorldError::InvalidConfig(format!("duplicate condition `{}`", c.name)));
            }
        }
        Ok(())
    }
}

/// Applies a profile to an `H×W×3` buffer. `seed` drives the noise.
pub fn apply_profile(pixels: &Tensor, profile: &PhotometricProfile, seed: u64) -> Tensor {
    if profile.is_identity() {
        return pixels.clone();
    }
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    let mut out = Vec::with_capacity(pixels.len());
    for rgb in pixels.data().chunks_exact(3) {
        let luma: f64 = rgb.iter().zip(LUMA).map(|(v, l)| v * l).sum();
        for c in 0..3 {
            let x = rgb[c] + profile.desaturate * (luma - rgb[c]);
            out.push(profile.gain[c] * x.max(0.0).powf(profile.gamma) + profile.lift + profile.shift[c]);
        }
    }
    if profile.vertical_blur > 1 {
        let half = (profile.vertical_blur / 2) as isize;
        let src = out.clone();
        for row in 0..h {
            for col in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in -half..=half {
                        let r = (row as isize + dy).clamp(0, h as isize - 1) as usize;
                        acc += src[(r * w + col) * 3 + c];
                    }
                    out[(row * w + col) * 3 + c] = acc / profile.vertical_blur as f64;
                }
            }
        }
    }
    if profile.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, profile.noise_sigma).expect("sigma validated non-negative");
        for v in out.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(pixels.shape().to_vec(), out).expect("same shape as input")
}

/// Re-renders `image` under `condition`. Pose and visible set are kept.
pub fn apply_condition(
    image: &CapturedImage,
    condition: ConditionId,
    table: &ConditionTable,
    seed: u64,
) -> Result<CapturedImage, WorldError> {
    let spec = table.get(condition)?;
    Ok(CapturedImage {
        pixels: apply_profile(&image.pixels, &spec.profile, seed),
        condition,
        ..image.clone()
    })
}
