//! Evaluation over a dataset split and single-cloud inference.
//!
//! Detection is scored with the checkpoint's full training label set; pose
//! generation runs the guided sampler per (object, affordance) pair and is
//! scored in the metric frame, converting both generated and ground-truth
//! poses out of the normalized frame before applying the thresholds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::affordance::predict_map;
use crate::data::ObjectRecord;
use crate::diffusion::{sample_poses, SamplerConfig};
use crate::embeddings::{normalize_label, BACKGROUND_LABEL};
use crate::encoder::{encode_planned, normalize_cloud, plan_cloud, CloudPlan, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{vector_to_pose, Pose};
use crate::metrics::{
    detection_report, pose_report, score_pose_pair, DetectionReport, PosePairReport, PoseReport,
    PoseThresholds,
};
use crate::numerics::graph::Graph;
use crate::numerics::params::ParamStore;
use crate::numerics::rng::derive_seed;
use crate::numerics::DenseArray;

use super::checkpoint::Checkpoint;
use super::model::prepare_dataset;
use crate::affordance::AffordanceMap;

/// Seed stream reserved for evaluation-time sampling.
const EVAL_STREAM: u64 = 2_000_000;
/// Seed stream reserved for inference-time sampling.
const INFER_STREAM: u64 = 3_000_000;

/// Evaluation settings; `None` fields fall back to the checkpoint's config.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Tag recorded in the report (e.g. the split name).
    pub split: String,
    /// Guidance-weight override; changes only the pose report.
    pub guidance: Option<f64>,
    /// Override for generated poses per (object, affordance) pair.
    pub poses_per_pair: Option<usize>,
    pub thresholds: PoseThresholds,
    /// Base seed for evaluation sampling; defaults to a stream derived from
    /// the config seed, so reports are reproducible.
    pub sample_seed: Option<u64>,
}

impl EvalOptions {
    pub fn new(split: impl Into<String>) -> EvalOptions {
        EvalOptions {
            split: split.into(),
            guidance: None,
            poses_per_pair: None,
            thresholds: PoseThresholds::default(),
            sample_seed: None,
        }
    }
}

/// Everything `evaluate` measures on one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReports {
    pub split: String,
    /// Guidance weight the pose report was sampled with.
    pub guidance: f64,
    pub detection: DetectionReport,
    pub poses: PoseReport,
}

fn encode_values(
    store: &ParamStore<f32>,
    config: &crate::encoder::EncoderConfig,
    plan: &CloudPlan,
) -> Result<(DenseArray<f32>, Vec<f32>)> {
    let mut graph = Graph::new();
    let enc = encode_planned(&mut graph, store, config, plan)?;
    let points = graph.value(enc.point_features).clone();
    let global = graph.value(enc.global_feature).row_slice(0).to_vec();
    Ok((points, global))
}

/// Scores a checkpoint on `records` (one split's objects): detection with
/// the full training label set, and `eval_poses_per_pair` guided samples for
/// every (object, affordance) pair that has ground-truth poses.
pub fn evaluate(
    checkpoint: &Checkpoint,
    records: &[ObjectRecord],
    options: &EvalOptions,
) -> Result<EvalReports> {
    if records.is_empty() {
        return Err(Error::Data(format!(
            "split `{}` has no objects to evaluate",
            options.split
        )));
    }
    options.thresholds.validate()?;
    let config = &checkpoint.config;
    let provider = config.embeddings.provider()?;
    let data = prepare_dataset(records, &checkpoint.labels, &provider, &config.encoder)?;
    let guidance = options.guidance.unwrap_or(config.guidance);
    let count = options.poses_per_pair.unwrap_or(config.eval_poses_per_pair);
    let den_cfg = config.denoiser_config(provider.dimension());
    let schedule = config.schedule()?;
    let eval_seed = options
        .sample_seed
        .unwrap_or_else(|| derive_seed(config.seed, EVAL_STREAM));

    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    let mut pairs: Vec<PosePairReport> = Vec::new();
    let mut pair_counter = 0u64;
    for object in &data.objects {
        let (point_values, global) = encode_values(&checkpoint.store, &config.encoder, &object.plan)?;
        let (map, _) = predict_map(&checkpoint.store, &point_values, &checkpoint.labels, &provider)?;
        predicted.extend_from_slice(&map.assignments);
        truth.extend_from_slice(&object.truth.assignments);
        for entry in &object.entries {
            if entry.poses.is_empty() {
                continue;
            }
            let sampler = SamplerConfig {
                count,
                guidance,
                seed: derive_seed(eval_seed, pair_counter),
            };
            pair_counter += 1;
            let generated = sample_poses(
                &checkpoint.store,
                &den_cfg,
                &schedule,
                &global,
                &entry.text,
                &sampler,
            )?;
            let generated_metric: Vec<Pose> = generated
                .iter()
                .map(|p| object.frame.pose_to_metric(p))
                .collect();
            let truth_metric: Vec<Pose> = entry
                .poses
                .iter()
                .map(|v| Ok(object.frame.pose_to_metric(&vector_to_pose(v)?)))
                .collect::<Result<Vec<_>>>()?;
            pairs.push(score_pose_pair(
                &object.id,
                &entry.label,
                &generated_metric,
                &truth_metric,
                &options.thresholds,
            )?);
        }
    }
    let detection = detection_report(&predicted, &truth, &checkpoint.labels, data.background)?;
    let poses = pose_report(pairs, options.thresholds)?;
    Ok(EvalReports {
        split: options.split.clone(),
        guidance,
        detection,
        poses,
    })
}

/// Affordance map and generated pose sets for one cloud and an arbitrary
/// query label set.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    /// The query set actually used: normalized input labels, deduplicated,
    /// with the background label appended when missing.
    pub labels: Vec<String>,
    /// Per-point indices into `labels`.
    pub map: AffordanceMap,
    /// Generated poses per non-background query label, in the metric frame
    /// of the input cloud.
    pub poses: BTreeMap<String, Vec<Pose>>,
}

/// Runs detection plus pose generation on one metric-frame cloud.
pub fn infer(
    checkpoint: &Checkpoint,
    cloud: &PointCloud,
    labels: &[String],
    count: usize,
    guidance: f64,
    seed: Option<u64>,
) -> Result<InferenceResult> {
    if labels.is_empty() {
        return Err(Error::Usage("query label list is empty".into()));
    }
    if count == 0 {
        return Err(Error::Usage("pose count must be at least 1".into()));
    }
    let mut query: Vec<String> = Vec::new();
    for label in labels {
        let norm = normalize_label(label);
        if norm.is_empty() {
            return Err(Error::Usage("query label is empty".into()));
        }
        if !query.contains(&norm) {
            query.push(norm);
        }
    }
    if !query.iter().any(|l| l == BACKGROUND_LABEL) {
        query.push(BACKGROUND_LABEL.to_string());
    }
    let config = &checkpoint.config;
    let provider = config.embeddings.provider()?;
    let (normalized, frame) = normalize_cloud(cloud)?;
    let plan = plan_cloud(&config.encoder, &normalized)?;
    let (point_values, global) = encode_values(&checkpoint.store, &config.encoder, &plan)?;
    let (map, _) = predict_map(&checkpoint.store, &point_values, &query, &provider)?;
    let den_cfg = config.denoiser_config(provider.dimension());
    let schedule = config.schedule()?;
    let base_seed = seed.unwrap_or_else(|| derive_seed(config.seed, INFER_STREAM));
    let mut poses = BTreeMap::new();
    for (i, label) in query.iter().enumerate() {
        if label == BACKGROUND_LABEL {
            continue;
        }
        let text = provider.embed(label)?;
        let sampler = SamplerConfig {
            count,
            guidance,
            seed: derive_seed(base_seed, i as u64),
        };
        let generated = sample_poses(
            &checkpoint.store,
            &den_cfg,
            &schedule,
            &global,
            &text,
            &sampler,
        )?;
        poses.insert(
            label.clone(),
            generated.iter().map(|p| frame.pose_to_metric(p)).collect(),
        );
    }
    Ok(InferenceResult {
        labels: query,
        map,
        poses,
    })
}
