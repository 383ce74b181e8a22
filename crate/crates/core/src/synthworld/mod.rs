//! Deterministic synthetic scene, camera trajectories, renderer and
//! per-condition photometric transforms.

mod condition;
mod dataset;
mod geometry;
pub mod manifest;
mod render;
mod world;

use serde::{Deserialize, Serialize};

pub use condition::{
    apply_condition, apply_profile, ConditionId, ConditionSpec, ConditionTable, PhotometricProfile, LUMA,
};
pub use dataset::{generate_dataset, noise_seed, quantize, Dataset, DatasetConfig};
pub use geometry::{
    rotation_distance_deg, translation_distance, CameraPose, Intrinsics, Resolution,
};
pub use manifest::{load_dataset, read_manifest, save_dataset, Manifest, ManifestEntry, MANIFEST_FILE, MANIFEST_VERSION};
pub use render::{disc_pixels, project, render_view, Projection, MIN_RESOLUTION, VISIBLE_FRACTION};
pub use world::{generate_world, Extent, Landmark, RoadCorridor, SceneWorld, WorldConfig};

use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Reference,
    Mixed,
    Query,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Reference => "reference",
            Split::Mixed => "mixed",
            Split::Query => "query",
        }
    }
}

/// One element of the dataset: pixels, capturing condition, camera pose
/// and the exact set of visible landmark ids (sorted ascending).
#[derive(Clone, Debug, PartialEq)]
pub struct CapturedImage {
    pub image_id: u32,
    pub split: Split,
    pub condition: ConditionId,
    pub pose: CameraPose,
    /// `H×W×3`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub visible_ids: Vec<u32>,
}

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("invalid world configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate intrinsics: {0}")]
    DegenerateIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("unknown condition `{0}`")]
    UnknownCondition(String),
    #[error("query and mixed-conditions splits overlap: {0}")]
    SplitOverlap(String),
    #[error("dataset i/o: {0}")]
    Io(String),
}
