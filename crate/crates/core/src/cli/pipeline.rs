//! Pipeline stages shared by the subcommands.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::CliError;
use crate::evaluation::{pose_error, EvalReport, PoseError, Prediction, RunMeta, ThresholdBin};
use crate::mining::{positive_candidates, MiningConfig};
use crate::model::Model;
use crate::retrieval::{build_index, learn_whitening_for, localize_by_retrieval, DescriptorIndex, RetrievalOptions};
use crate::seeding::derive_seed;
use crate::synthworld::{CapturedImage, Dataset, Split};

/// Condition label of the report row that pools every query.
pub const ALL_QUERIES: &str = "all";

/// Positive pairs for whitening: each mixed-conditions image with its
/// positive candidates, as indices into `reference ∪ mixed`.
pub fn whitening_pairs<'a>(
    dataset: &'a Dataset,
    mining: &MiningConfig,
    seed: u64,
) -> Result<(Vec<&'a CapturedImage>, Vec<(usize, usize)>), CliError> {
    let reference: Vec<&CapturedImage> = dataset.split(Split::Reference).collect();
    let mixed: Vec<&CapturedImage> = dataset.split(Split::Mixed).collect();
    let images: Vec<&CapturedImage> = reference.iter().chain(mixed.iter()).copied().collect();
    let position: std::collections::HashMap<u32, usize> =
        images.iter().enumerate().map(|(i, img)| (img.image_id, i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed("whitening-pairs", &[seed]));
    let mut pairs = Vec::new();
    for q in &mixed {
        if q.visible_ids.is_empty() {
            continue;
        }
        let cands = positive_candidates(q, &reference, &mixed, dataset.condition_names.len(), mining, &mut rng)?;
        for c in cands {
            pairs.push((position[&q.image_id], position[&c]));
        }
    }
    Ok((images, pairs))
}

/// Learns whitening (if enabled) and indexes the reference split.
pub fn index_reference(
    model: &Model,
    dataset: &Dataset,
    mining: &MiningConfig,
    options: &RetrievalOptions,
    seed: u64,
) -> Result<DescriptorIndex, CliError> {
    let whitening = if options.whitening {
        let (images, pairs) = whitening_pairs(dataset, mining, seed)?;
        Some(learn_whitening_for(model, &images, &pairs, options)?)
    } else {
        None
    };
    let reference: Vec<&CapturedImage> = dataset.split(Split::Reference).collect();
    Ok(build_index(&reference, model, options, whitening)?)
}

/// Top-1 pose for every query image, in image-id order.
pub fn localize_queries(
    index: &DescriptorIndex,
    model: &Model,
    dataset: &Dataset,
    options: &RetrievalOptions,
) -> Result<Vec<Prediction>, CliError> {
    let queries: Vec<&CapturedImage> = dataset.split(Split::Query).collect();
    queries
        .par_iter()
        .map(|q| {
            let loc = localize_by_retrieval(index, &q.pixels, q.condition, model, options)?;
            Ok(Prediction {
                query_id: q.image_id,
                pose: loc.pose,
                top1_id: loc.top[0].image_id,
                top1_sim: loc.top[0].similarity,
            })
        })
        .collect()
}

/// Pose errors grouped by query condition, plus a pooled group.
pub fn grouped_errors(
    dataset: &Dataset,
    predictions: &[Prediction],
) -> Result<Vec<(String, Vec<PoseError>)>, CliError> {
    let mut by_condition: std::collections::BTreeMap<usize, Vec<PoseError>> = Default::default();
    let mut all = Vec::new();
    for p in predictions {
        let q = dataset
            .get(p.query_id)
            .filter(|q| q.split == Split::Query)
            .ok_or_else(|| CliError::Invalid(format!("prediction for unknown query image {}", p.query_id)))?;
        let e = pose_error(&p.pose, &q.pose)?;
        by_condition.entry(q.condition.0).or_default().push(e);
        all.push(e);
    }
    let mut groups: Vec<(String, Vec<PoseError>)> = by_condition
        .into_iter()
        .map(|(c, errs)| (dataset.condition_names[c].clone(), errs))
        .collect();
    groups.push((ALL_QUERIES.to_string(), all));
    Ok(groups)
}

pub fn evaluate_predictions(
    dataset: &Dataset,
    predictions: &[Prediction],
    bins: &[ThresholdBin],
    meta: RunMeta,
) -> Result<EvalReport, CliError> {
    let groups = grouped_errors(dataset, predictions)?;
    Ok(EvalReport::from_errors(meta, bins, &groups)?)
}
