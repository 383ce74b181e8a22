//! Descriptor post-processing, the exact nearest-neighbour index, and
//! pose inference from the top-ranked reference image.

mod files;
mod whitening;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use files::{
    read_descriptors, read_index, write_descriptors, write_index, DescriptorFile, DESCRIPTOR_MAGIC, INDEX_MAGIC,
};
pub use whitening::{
    apply_whitening, learn_whitening, positive_difference_covariance, WhitenTransform, DEFAULT_EPSILON,
};

use crate::model::{l2_normalize, Descriptor, Model, ModelError};
use crate::numerics::Tensor;
use crate::synthworld::{CameraPose, CapturedImage, ConditionId};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("the index is empty")]
    EmptyIndex,
    #[error("no reference images to index")]
    NoReferenceImages,
    #[error("need at least 2 positive pairs, got {0}")]
    TooFewPairs(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("image id {0} appears twice in the index")]
    DuplicateId(u32),
    #[error("scale {scale} turns {height}×{width} into {new_height}×{new_width}, below the {min}×{min} minimum")]
    ScaleTooSmall {
        scale: f64,
        height: usize,
        width: usize,
        new_height: usize,
        new_width: usize,
        min: usize,
    },
    #[error("degenerate whitening: {0}")]
    Degenerate(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Descriptor extraction options shared by indexing and querying.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalOptions {
    pub multiscale: bool,
    pub scales: Vec<f64>,
    pub whitening: bool,
    pub whitening_epsilon: f64,
    /// Entries kept in localization diagnostics.
    pub top_k: usize,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        Self {
            multiscale: true,
            scales: vec![1.0, std::f64::consts::SQRT_2, 2.0],
            whitening: true,
            whitening_epsilon: DEFAULT_EPSILON,
            top_k: 5,
        }
    }
}

impl RetrievalOptions {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(RetrievalError::InvalidArgument(
                "scales must be non-empty and positive".into(),
            ));
        }
        if !(self.whitening_epsilon >= 0.0) {
            return Err(RetrievalError::InvalidArgument(
                "whitening_epsilon must be non-negative".into(),
            ));
        }
        if self.top_k == 0 {
            return Err(RetrievalError::InvalidArgument("top_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Scale factors actually used.
    pub fn active_scales(&self) -> &[f64] {
        if self.multiscale {
            &self.scales
        } else {
            &[1.0]
        }
    }
}

/// Bilinear resize of an `H×W×C` image with pixel-centre alignment and
/// edge clamping.
pub fn resize_bilinear(image: &Tensor, new_height: usize, new_width: usize) -> Result<Tensor, RetrievalError> {
    let &[h, w, c] = image.shape() else {
        return Err(RetrievalError::InvalidArgument(format!(
            "expected H×W×C, got {:?}",
            image.shape()
        )));
    };
    if new_height == 0 || new_width == 0 || h == 0 || w == 0 {
        return Err(RetrievalError::InvalidArgument("empty image size".into()));
    }
    if (new_height, new_width) == (h, w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let axis = |o: usize, n_out: usize, n_in: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(new_height * new_width * c);
    for oy in 0..new_height {
        let (y0, y1, fy) = axis(oy, new_height, h);
        for ox in 0..new_width {
            let (x0, x1, fx) = axis(ox, new_width, w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![new_height, new_width, c], out).map_err(|e| RetrievalError::InvalidArgument(e.to_string()))
}

/// Descriptor over several input scales, combined coordinate-wise by the
/// generalized mean with the network's GeM exponent and re-normalized.
pub fn multiscale_descriptor(
    model: &Model,
    image: &Tensor,
    condition: ConditionId,
    scales: &[f64],
) -> Result<Descriptor, RetrievalError> {
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(RetrievalError::InvalidArgument(
            "scales must be non-empty and positive".into(),
        ));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let min = model.config.min_input_size();
    let p = model.config.gem_p;
    let mut acc = vec![0.0; model.config.descriptor_dim()];
    for &s in scales {
        let (nh, nw) = ((h as f64 * s).round() as usize, (w as f64 * s).round() as usize);
        if nh < min || nw < min {
            return Err(RetrievalError::ScaleTooSmall {
                scale: s,
                height: h,
                width: w,
                new_height: nh,
                new_width: nw,
                min,
            });
        }
        let d = model.forward_descriptor(&resize_bilinear(image, nh, nw)?, condition)?;
        for (a, v) in acc.iter_mut().zip(d.as_slice()) {
            *a += v.max(0.0).powf(p);
        }
    }
    let n = scales.len() as f64;
    let combined: Vec<f64> = acc.into_iter().map(|a| (a / n).powf(1.0 / p)).collect();
    Ok(l2_normalize(&combined)?)
}

/// Raw (unwhitened) descriptor according to `options`.
pub fn describe(
    model: &Model,
    image: &Tensor,
    condition: ConditionId,
    options: &RetrievalOptions,
) -> Result<Descriptor, RetrievalError> {
    if options.multiscale {
        multiscale_descriptor(model, image, condition, &options.scales)
    } else {
        Ok(model.forward_descriptor(image, condition)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub image_id: u32,
    pub descriptor: Descriptor,
    pub pose: CameraPose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub image_id: u32,
    pub similarity: f64,
    pub pose: CameraPose,
}

/// Exact cosine-similarity index over unit-norm descriptors. Read-only
/// once built.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorIndex {
    entries: Vec<IndexEntry>,
    whitening: Option<WhitenTransform>,
    dim: usize,
}

impl DescriptorIndex {
    pub fn from_entries(entries: Vec<IndexEntry>, whitening: Option<WhitenTransform>) -> Result<Self, RetrievalError> {
        let dim = entries.first().map_or(0, |e| e.descriptor.dim());
        let mut seen = BTreeSet::new();
        for e in &entries {
            if e.descriptor.dim() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    got: e.descriptor.dim(),
                });
            }
            if !seen.insert(e.image_id) {
                return Err(RetrievalError::DuplicateId(e.image_id));
            }
        }
        if let Some(w) = &whitening {
            if w.dim() != dim && dim != 0 {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    got: w.dim(),
                });
            }
        }
        Ok(Self { entries, whitening, dim })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn whitening(&self) -> Option<&WhitenTransform> {
        self.whitening.as_ref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The `k` entries with the largest dot product, ties by ascending id.
    pub fn query_topk(&self, descriptor: &[f64], k: usize) -> Result<Vec<Match>, RetrievalError> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if k == 0 {
            return Err(RetrievalError::InvalidArgument("k must be at least 1".into()));
        }
        if descriptor.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: descriptor.len(),
            });
        }
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.descriptor.dot(descriptor), i))
            .collect();
        let key = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0)
                .then(self.entries[a.1].image_id.cmp(&self.entries[b.1].image_id))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, key);
            scored.truncate(k);
        }
        scored.sort_by(key);
        Ok(scored
            .into_iter()
            .map(|(s, i)| Match {
                image_id: self.entries[i].image_id,
                similarity: s,
                pose: self.entries[i].pose,
            })
            .collect())
    }
}

/// Learns the whitening transform from `images` (descriptors computed per
/// `options`) and index-local positive pairs.
pub fn learn_whitening_for(
    model: &Model,
    images: &[&CapturedImage],
    positive_pairs: &[(usize, usize)],
    options: &RetrievalOptions,
) -> Result<WhitenTransform, RetrievalError> {
    let descriptors: Vec<Descriptor> = images
        .par_iter()
        .map(|img| describe(model, &img.pixels, img.condition, options))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&[f64]> = descriptors.iter().map(Descriptor::as_slice).collect();
    learn_whitening(&refs, positive_pairs, options.whitening_epsilon)
}

/// Descriptor for a query or database image, whitened when a transform is
/// given.
pub fn final_descriptor(
    model: &Model,
    image: &Tensor,
    condition: ConditionId,
    options: &RetrievalOptions,
    whitening: Option<&WhitenTransform>,
) -> Result<Descriptor, RetrievalError> {
    let d = describe(model, image, condition, options)?;
    match whitening {
        Some(w) => apply_whitening(w, d.as_slice()),
        None => Ok(d),
    }
}

/// One entry per reference image, each described through its own
/// condition's branch.
pub fn build_index(
    reference: &[&CapturedImage],
    model: &Model,
    options: &RetrievalOptions,
    whitening: Option<WhitenTransform>,
) -> Result<DescriptorIndex, RetrievalError> {
    options.validate()?;
    if reference.is_empty() {
        return Err(RetrievalError::NoReferenceImages);
    }
    let entries: Vec<IndexEntry> = reference
        .par_iter()
        .map(|img| {
            Ok(IndexEntry {
                image_id: img.image_id,
                descriptor: final_descriptor(model, &img.pixels, img.condition, options, whitening.as_ref())?,
                pose: img.pose,
            })
        })
        .collect::<Result<_, RetrievalError>>()?;
    DescriptorIndex::from_entries(entries, whitening)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    /// Pose of the top-ranked entry, unchanged.
    pub pose: CameraPose,
    pub top: Vec<Match>,
}

/// Approximates the query pose by the pose of its nearest reference image.
pub fn localize_by_retrieval(
    index: &DescriptorIndex,
    image: &Tensor,
    condition: ConditionId,
    model: &Model,
    options: &RetrievalOptions,
) -> Result<Localization, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let d = final_descriptor(model, image, condition, options, index.whitening())?;
    let top = index.query_topk(d.as_slice(), options.top_k)?;
    Ok(Localization { pose: top[0].pose, top })
}
