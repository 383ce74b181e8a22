//! Training tuple construction: co-visibility positives against the
//! reference split, condition-balanced pose positives from the
//! mixed-conditions split, and hard negatives mined with the current
//! model.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelError};
use crate::seeding::rng_for;
use crate::synthworld::{
    rotation_distance_deg, translation_distance, CapturedImage, ConditionId, Dataset, Split,
};

#[derive(Debug, thiserror::Error)]
pub enum MiningError {
    #[error("query {0} has no visible landmarks; co-visibility ratio is undefined")]
    EmptyVisibleSet(u32),
    #[error("every condition pool is empty")]
    AllPoolsEmpty,
    #[error("negative pool is empty")]
    EmptyPool,
    #[error("cannot draw {requested} references from a split of {available}")]
    ResampleTooLarge { requested: usize, available: usize },
    #[error("no training query produced a tuple")]
    NoTuples,
    #[error("invalid mining config `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveMode {
    /// Skip queries with fewer than `P` candidate positives.
    Strict,
    /// Draw positives with replacement when there are fewer than `P`.
    Lenient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// Co-visibility ratio threshold.
    pub t_i: f64,
    /// Rotation threshold in degrees.
    #[serde(rename = "t_R")]
    pub t_r_deg: f64,
    /// Translation threshold in world units.
    #[serde(rename = "t_T")]
    pub t_t: f64,
    /// Positives per tuple.
    #[serde(rename = "P")]
    pub positives: usize,
    /// Negatives per tuple.
    #[serde(rename = "N")]
    pub negatives: usize,
    /// Pose positives drawn per condition before the final subsample.
    pub positives_per_condition: usize,
    /// Reference images kept per epoch.
    pub reference_resample_count: usize,
    pub mode: PositiveMode,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            t_i: 0.6,
            t_r_deg: 10.0,
            t_t: 8.0,
            positives: 8,
            negatives: 8,
            positives_per_condition: 2,
            reference_resample_count: 200,
            mode: PositiveMode::Strict,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), MiningError> {
        let err = |field, m: &str| {
            Err(MiningError::InvalidConfig {
                field,
                message: m.to_string(),
            })
        };
        if !(self.t_i > 0.0 && self.t_i <= 1.0) {
            return err("t_i", "must lie in (0, 1]");
        }
        if !(self.t_r_deg > 0.0) {
            return err("t_R", "must be positive");
        }
        if !(self.t_t > 0.0) {
            return err("t_T", "must be positive");
        }
        if self.positives == 0 {
            return err("P", "must be at least 1");
        }
        if self.negatives == 0 {
            return err("N", "must be at least 1");
        }
        Ok(())
    }
}

/// `(query, P positives, N negatives)` by image id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTuple {
    pub query: u32,
    pub positives: Vec<u32>,
    pub negatives: Vec<u32>,
}

impl TrainingTuple {
    pub fn len(&self) -> usize {
        1 + self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TupleSet {
    pub epoch: u64,
    pub tuples: Vec<TrainingTuple>,
    /// Training queries that did not yield a tuple.
    pub skipped: Vec<u32>,
}

/// Size of the intersection of two ascending id lists.
pub fn shared_count(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `|p(I_i) ∩ p(I_q)| / |p(I_q)|`; normalized by the query's set only.
pub fn covisibility_ratio(query: &CapturedImage, candidate: &CapturedImage) -> Result<f64, MiningError> {
    if query.visible_ids.is_empty() {
        return Err(MiningError::EmptyVisibleSet(query.image_id));
    }
    Ok(shared_count(&query.visible_ids, &candidate.visible_ids) as f64 / query.visible_ids.len() as f64)
}

/// Candidates whose co-visibility ratio with the query exceeds `t_i`.
pub fn covisibility_positives<'a, I>(query: &CapturedImage, candidates: I, t_i: f64) -> Result<Vec<u32>, MiningError>
where
    I: IntoIterator<Item = &'a CapturedImage>,
{
    if query.visible_ids.is_empty() {
        return Err(MiningError::EmptyVisibleSet(query.image_id));
    }
    let mut out = Vec::new();
    for c in candidates {
        if c.image_id != query.image_id && covisibility_ratio(query, c)? > t_i {
            out.push(c.image_id);
        }
    }
    Ok(out)
}

/// Candidates of `condition` within `t_r_deg` and `t_t` of the query pose.
pub fn pose_positives<'a, I>(
    query: &CapturedImage,
    candidates: I,
    t_r_deg: f64,
    t_t: f64,
    condition: ConditionId,
) -> Vec<u32>
where
    I: IntoIterator<Item = &'a CapturedImage>,
{
    candidates
        .into_iter()
        .filter(|c| {
            c.image_id != query.image_id
                && c.condition == condition
                && rotation_distance_deg(&query.pose, &c.pose) < t_r_deg
                && translation_distance(&query.pose, &c.pose) < t_t
        })
        .map(|c| c.image_id)
        .collect()
}

/// Draws `min(count, |pool|)` ids from every pool without replacement.
pub fn condition_balanced_positives<R: Rng>(
    pools: &BTreeMap<ConditionId, Vec<u32>>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<u32>, MiningError> {
    if pools.values().all(Vec::is_empty) {
        return Err(MiningError::AllPoolsEmpty);
    }
    let mut out = Vec::new();
    for pool in pools.values() {
        out.extend(pool.choose_multiple(rng, count.min(pool.len())).copied());
    }
    Ok(out)
}

/// Candidates with no shared landmark and a pose beyond both thresholds.
pub fn negatives_of<'a, I>(query: &CapturedImage, candidates: I, config: &MiningConfig) -> Vec<u32>
where
    I: IntoIterator<Item = &'a CapturedImage>,
{
    candidates
        .into_iter()
        .filter(|c| {
            c.image_id != query.image_id
                && shared_count(&query.visible_ids, &c.visible_ids) == 0
                && rotation_distance_deg(&query.pose, &c.pose) >= config.t_r_deg
                && translation_distance(&query.pose, &c.pose) >= config.t_t
        })
        .map(|c| c.image_id)
        .collect()
}

/// The `n` pool entries most similar to `query`, ties by ascending id.
pub fn hard_negative_mine(query: &[f64], pool: &[(u32, &[f64])], n: usize) -> Result<Vec<u32>, MiningError> {
    if pool.is_empty() {
        return Err(MiningError::EmptyPool);
    }
    let mut scored: Vec<(f64, u32)> = pool
        .iter()
        .map(|(id, d)| (query.iter().zip(d.iter()).map(|(a, b)| a * b).sum(), *id))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(n).map(|(_, id)| id).collect())
}

/// Uniform subset of `count` reference ids, determined by `(seed, epoch)`
/// and returned in ascending order.
pub fn resample_reference(reference: &[u32], count: usize, seed: u64, epoch: u64) -> Result<Vec<u32>, MiningError> {
    if count > reference.len() {
        return Err(MiningError::ResampleTooLarge {
            requested: count,
            available: reference.len(),
        });
    }
    let mut rng = rng_for("reference-resample", &[seed, epoch]);
    let mut out: Vec<u32> = reference.choose_multiple(&mut rng, count).copied().collect();
    out.sort_unstable();
    Ok(out)
}

/// Positive candidates for one query before the final subsample: the
/// co-visibility set over `reference` united with a condition-balanced
/// draw of pose positives over `mixed`.
pub fn positive_candidates<R: Rng>(
    query: &CapturedImage,
    reference: &[&CapturedImage],
    mixed: &[&CapturedImage],
    num_conditions: usize,
    config: &MiningConfig,
    rng: &mut R,
) -> Result<Vec<u32>, MiningError> {
    let mut set: BTreeSet<u32> = covisibility_positives(query, reference.iter().copied(), config.t_i)?
        .into_iter()
        .collect();
    let pools: BTreeMap<ConditionId, Vec<u32>> = (0..num_conditions)
        .map(|c| {
            let id = ConditionId(c);
            (id, pose_positives(query, mixed.iter().copied(), config.t_r_deg, config.t_t, id))
        })
        .collect();
    match condition_balanced_positives(&pools, config.positives_per_condition, rng) {
        Ok(ids) => set.extend(ids),
        Err(MiningError::AllPoolsEmpty) => {}
        Err(e) => return Err(e),
    }
    Ok(set.into_iter().collect())
}

/// Builds one tuple per mixed-conditions query. With a model, negatives
/// are the hardest under its current descriptors; otherwise they are
/// drawn uniformly.
pub fn build_training_tuples(
    dataset: &Dataset,
    model: Option<&Model>,
    config: &MiningConfig,
    seed: u64,
    epoch: u64,
) -> Result<TupleSet, MiningError> {
    config.validate()?;
    let reference_ids = dataset.split_ids(Split::Reference);
    let keep = config.reference_resample_count.min(reference_ids.len());
    let reference_subset = resample_reference(&reference_ids, keep, seed, epoch)?;
    let reference: Vec<&CapturedImage> = reference_subset.iter().map(|&id| &dataset.images[id as usize]).collect();
    let mixed: Vec<&CapturedImage> = dataset.split(Split::Mixed).collect();
    let pool: Vec<&CapturedImage> = reference.iter().chain(mixed.iter()).copied().collect();

    let descriptors: Option<BTreeMap<u32, Vec<f64>>> = match model {
        Some(m) => Some(
            pool.par_iter()
                .map(|img| Ok((img.image_id, m.forward_descriptor(&img.pixels, img.condition)?.into_vec())))
                .collect::<Result<BTreeMap<_, _>, ModelError>>()?,
        ),
        None => None,
    };

    let results: Vec<Result<Option<TrainingTuple>, MiningError>> = mixed
        .par_iter()
        .map(|q| {
            if q.visible_ids.is_empty() {
                return Ok(None);
            }
            let mut rng = rng_for("tuple", &[seed, epoch, q.image_id as u64]);
            let candidates = positive_candidates(q, &reference, &mixed, dataset.condition_names.len(), config, &mut rng)?;
            let positives: Vec<u32> = if candidates.len() >= config.positives {
                candidates.choose_multiple(&mut rng, config.positives).copied().collect()
            } else if config.mode == PositiveMode::Lenient && !candidates.is_empty() {
                (0..config.positives)
                    .map(|_| *candidates.choose(&mut rng).expect("non-empty"))
                    .collect()
            } else {
                return Ok(None);
            };

            let negative_pool = negatives_of(q, pool.iter().copied(), config);
            if negative_pool.len() < config.negatives {
                return Ok(None);
            }
            let negatives = match &descriptors {
                Some(desc) => {
                    let entries: Vec<(u32, &[f64])> =
                        negative_pool.iter().map(|id| (*id, desc[id].as_slice())).collect();
                    hard_negative_mine(&desc[&q.image_id], &entries, config.negatives)?
                }
                None => negative_pool
                    .choose_multiple(&mut rng, config.negatives)
                    .copied()
                    .collect(),
            };
            Ok(Some(TrainingTuple {
                query: q.image_id,
                positives,
                negatives,
            }))
        })
        .collect();

    let mut tuples = Vec::new();
    let mut skipped = Vec::new();
    for (q, r) in mixed.iter().zip(results) {
        match r? {
            Some(t) => tuples.push(t),
            None => skipped.push(q.image_id),
        }
    }
    if !skipped.is_empty() {
        log::info!(
            "epoch {epoch}: {} of {} training queries skipped (too few positives or negatives)",
            skipped.len(),
            mixed.len()
        );
    }
    if tuples.is_empty() {
        return Err(MiningError::NoTuples);
    }
    Ok(TupleSet { epoch, tuples, skipped })
}
