//! Dataset preparation and the joint training loop.
//!
//! Each batch builds one graph per item sharing a single cloud encoding
//! between the two branches: the detection loss over the training label set,
//! and the noise-regression loss on one randomly chosen (affordance, pose)
//! triplet. Gradients accumulate scaled by 1/batch, followed by one Adam
//! step. All randomness derives from the config seed, so training is
//! bit-deterministic.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::affordance::{
    affordance_loss, correlation, map_from_masks, register_affordance_params, softmax_scores,
    AffordanceMap,
};
use crate::data::ObjectRecord;
use crate::diffusion::denoiser::{denoise, register_denoiser_params, DenoiserConfig};
use crate::diffusion::{draw_loss_events, q_sample, LossEvent, NoiseSchedule, POSE_DIM};
use crate::embeddings::{normalize_label, TextProvider, BACKGROUND_LABEL};
use crate::encoder::{
    encode_planned, normalize_cloud, plan_cloud, register_encoder_params, CloudPlan, EncoderConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{pose_to_vector, FrameTransform, PoseVector};
use crate::numerics::adam::{adam_step, AdamState};
use crate::numerics::graph::Graph;
use crate::numerics::params::ParamStore;
use crate::numerics::rng::{derive_seed, stream_rng};
use crate::numerics::DenseArray;

use super::checkpoint::{Checkpoint, EpochLoss, RngCursor};
use super::ExperimentConfig;

/// Seed streams reserved by the trainer; epoch streams start after these.
const ENCODER_INIT_STREAM: u64 = 1;
const DENOISER_INIT_STREAM: u64 = 2;
const EPOCH_STREAM_BASE: u64 = 1_000;

/// One affordance entry of a prepared object: its embedding and pose set.
#[derive(Debug, Clone)]
pub struct PreparedEntry {
    pub label: String,
    /// Index of `label` in the prepared label set.
    pub label_index: usize,
    pub text: Vec<f32>,
    /// Ground-truth poses in the normalized frame, as 7-vectors.
    pub poses: Vec<PoseVector>,
}

/// An object ready for training or evaluation: cached encoder plan, frame
/// transform, hard per-point labels, and per-affordance entries.
#[derive(Debug, Clone)]
pub struct PreparedObject {
    pub id: String,
    pub plan: CloudPlan,
    pub frame: FrameTransform,
    pub truth: AffordanceMap,
    pub entries: Vec<PreparedEntry>,
}

/// A label set with embeddings plus the prepared objects of one split part.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub labels: Vec<String>,
    pub background: usize,
    /// Row-per-label embedding matrix matching `labels`.
    pub label_matrix: DenseArray<f32>,
    pub objects: Vec<PreparedObject>,
}

/// The sorted training label set: every affordance label in the records,
/// normalized, plus the background label.
pub fn training_label_set(records: &[ObjectRecord]) -> Vec<String> {
    let mut set = BTreeSet::new();
    for r in records {
        for e in &r.entries {
            set.insert(normalize_label(&e.label));
        }
    }
    set.insert(BACKGROUND_LABEL.to_string());
    set.into_iter().collect()
}

/// Prepares records for training or evaluation against a fixed label set.
pub fn prepare_dataset(
    records: &[ObjectRecord],
    labels: &[String],
    provider: &TextProvider,
    encoder: &EncoderConfig,
) -> Result<PreparedDataset> {
    let background = labels
        .iter()
        .position(|l| l == BACKGROUND_LABEL)
        .ok_or_else(|| {
            Error::Usage(format!(
                "label set must include the background label `{BACKGROUND_LABEL}`"
            ))
        })?;
    let dim = provider.dimension();
    let flat = provider.embed_all(labels)?;
    let label_matrix = DenseArray::new(labels.len(), dim, flat)?;
    let mut objects = Vec::with_capacity(records.len());
    for record in records {
        record.validate()?;
        let (normalized, frame) = normalize_cloud(&record.cloud())?;
        let plan = plan_cloud(encoder, &normalized)?;
        let n = normalized.len();
        let mut mask_refs: Vec<(usize, &[f32])> = Vec::with_capacity(record.entries.len());
        let mut entries = Vec::with_capacity(record.entries.len());
        for entry in &record.entries {
            let label = normalize_label(&entry.label);
            let label_index = labels.iter().position(|l| *l == label).ok_or_else(|| {
                Error::Data(format!(
                    "object {}: affordance `{label}` is not in the label set {labels:?}",
                    record.id
                ))
            })?;
            mask_refs.push((label_index, entry.mask.as_slice()));
            let poses = entry
                .poses
                .iter()
                .map(|sp| Ok(pose_to_vector(&sp.pose()?)))
                .collect::<Result<Vec<_>>>()?;
            entries.push(PreparedEntry {
                label,
                label_index,
                text: provider.embed(&entry.label)?,
                poses,
            });
        }
        let truth = map_from_masks(n, &mask_refs, background)?;
        objects.push(PreparedObject {
            id: record.id.clone(),
            plan,
            frame,
            truth,
            entries,
        });
    }
    Ok(PreparedDataset {
        labels: labels.to_vec(),
        background,
        label_matrix,
        objects,
    })
}

/// Registers every learnable parameter (encoder, temperature, denoiser) in a
/// fixed order with seeds derived from the config seed.
pub fn register_model_params(
    store: &mut ParamStore<f32>,
    config: &ExperimentConfig,
    text_dim: usize,
) -> Result<()> {
    register_encoder_params(store, &config.encoder, derive_seed(config.seed, ENCODER_INIT_STREAM))?;
    register_affordance_params(store)?;
    register_denoiser_params(
        store,
        &config.denoiser_config(text_dim),
        derive_seed(config.seed, DENOISER_INIT_STREAM),
    )?;
    Ok(())
}

/// One scheduled training item: an object, its chosen (affordance, pose)
/// triplet, and the fixed diffusion randomness. Objects whose entries store
/// no poses train the detection branch alone.
#[derive(Debug, Clone)]
pub(crate) struct Pick {
    pub object: usize,
    pub triplet: Option<(usize, usize, LossEvent)>,
}

/// Plans one epoch: shuffles the object order, then draws each object's
/// triplet and diffusion randomness in that order from the same stream.
pub(crate) fn plan_epoch(
    rng: &mut ChaCha8Rng,
    data: &PreparedDataset,
    t_count: usize,
    p_uncond: f64,
) -> Vec<Pick> {
    let mut order: Vec<usize> = (0..data.objects.len()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|object| {
            let with_poses: Vec<usize> = data.objects[object]
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| !e.poses.is_empty())
                .map(|(i, _)| i)
                .collect();
            let triplet = if with_poses.is_empty() {
                None
            } else {
                let entry = with_poses[rng.gen_range(0..with_poses.len())];
                let pose = rng.gen_range(0..data.objects[object].entries[entry].poses.len());
                let event = draw_loss_events(rng, 1, t_count, p_uncond).pop().expect("one");
                Some((entry, pose, event))
            };
            Pick { object, triplet }
        })
        .collect()
}

pub(crate) struct ItemLosses {
    pub affordance: f64,
    pub pose: f64,
}

/// Builds the joint graph for one item, backpropagates with `grad_scale`,
/// and returns both branch losses. The cloud is encoded once; the detection
/// branch reads its per-point features and the pose branch conditions on its
/// global feature.
pub(crate) fn item_losses(
    store: &mut ParamStore<f32>,
    config: &ExperimentConfig,
    den_cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    data: &PreparedDataset,
    pick: &Pick,
    grad_scale: f32,
) -> Result<ItemLosses> {
    let object = &data.objects[pick.object];
    let mut graph = Graph::new();
    let enc = encode_planned(&mut graph, store, &config.encoder, &object.plan)?;
    let texts = graph.constant(data.label_matrix.clone());
    let f = correlation(&mut graph, enc.point_features, texts)?;
    let s = softmax_scores(&mut graph, store, f)?;
    let l_aff = affordance_loss(&mut graph, s, &object.truth)?;
    let (joint, l_pose) = match &pick.triplet {
        None => (l_aff, None),
        Some((entry_index, pose_index, event)) => {
            let entry = &object.entries[*entry_index];
            let g0 = entry.poses[*pose_index];
            let g_t = q_sample(&g0, event.t, &event.eps, schedule)?;
            let g_row: Vec<f32> = g_t.iter().map(|&v| v as f32).collect();
            let g = graph.constant(DenseArray::new(1, POSE_DIM, g_row)?);
            let condition = if event.drop {
                None
            } else {
                let text = graph.constant(DenseArray::new(
                    1,
                    den_cfg.text_dim,
                    entry.text.clone(),
                )?);
                Some((enc.global_feature, text))
            };
            let eps_hat = denoise(&mut graph, store, den_cfg, g, condition, event.t)?;
            let target_row: Vec<f32> = event.eps.iter().map(|&v| v as f32).collect();
            let target = graph.constant(DenseArray::new(1, POSE_DIM, target_row)?);
            let diff = graph.sub(eps_hat, target)?;
            let sq = graph.mul(diff, diff)?;
            let l_pose = graph.sum_all(sq)?;
            (graph.add(l_aff, l_pose)?, Some(l_pose))
        }
    };
    graph.backward(joint, store, grad_scale)?;
    let affordance = graph.value(l_aff).item()? as f64;
    let pose = match l_pose {
        Some(id) => graph.value(id).item()? as f64,
        None => 0.0,
    };
    Ok(ItemLosses { affordance, pose })
}

/// Trains from scratch over `records`, calling `on_epoch` with the running
/// checkpoint after every epoch (the CLI uses this to write checkpoints).
/// A non-finite loss or parameter halts with the offending epoch/batch and
/// the last finite losses.
pub fn train(
    config: &ExperimentConfig,
    records: &[ObjectRecord],
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let provider = config.embeddings.provider()?;
    let text_dim = provider.dimension();
    if text_dim != config.encoder.point_dim() {
        return Err(Error::Usage(format!(
            "text dimension {text_dim} must match the per-point feature dimension {}",
            config.encoder.point_dim()
        )));
    }
    let den_cfg = config.denoiser_config(text_dim);
    den_cfg.validate()?;
    let schedule = config.schedule()?;
    let labels = training_label_set(records);
    let data = prepare_dataset(records, &labels, &provider, &config.encoder)?;
    let mut store = ParamStore::new();
    register_model_params(&mut store, config, text_dim)?;
    let mut adam = AdamState::new(&store);
    let mut history: Vec<EpochLoss> = Vec::with_capacity(config.epochs);
    let mut last_finite: Option<(f64, f64)> = None;
    for epoch in 0..config.epochs {
        let mut rng = stream_rng(derive_seed(config.seed, EPOCH_STREAM_BASE + epoch as u64), 0);
        let picks = plan_epoch(&mut rng, &data, schedule.len(), config.diffusion.p_uncond);
        let mut aff_sum = 0.0;
        let mut pose_sum = 0.0;
        for (batch_id, chunk) in picks.chunks(config.batch_size).enumerate() {
            let diverged = |detail: String, last: Option<(f64, f64)>| Error::Diverged {
                epoch,
                batch: batch_id,
                detail: match last {
                    Some((a, p)) => format!(
                        "{detail}; last finite losses: detection {a:.6}, pose {p:.6}"
                    ),
                    None => format!("{detail}; no finite losses seen yet"),
                },
            };
            store.zero_grads();
            let scale = 1.0 / chunk.len() as f32;
            for pick in chunk {
                let item = match item_losses(
                    &mut store, config, &den_cfg, &schedule, &data, pick, scale,
                ) {
                    Ok(item) => item,
                    Err(Error::NonFinite(what)) => {
                        return Err(diverged(
                            format!(
                                "non-finite value in {what} on object {}",
                                data.objects[pick.object].id
                            ),
                            last_finite,
                        ))
                    }
                    Err(e) => return Err(e),
                };
                if !(item.affordance.is_finite() && item.pose.is_finite()) {
                    return Err(diverged(
                        format!(
                            "loss went non-finite on object {} (detection {}, pose {})",
                            data.objects[pick.object].id, item.affordance, item.pose
                        ),
                        last_finite,
                    ));
                }
                last_finite = Some((item.affordance, item.pose));
                aff_sum += item.affordance;
                pose_sum += item.pose;
            }
            if let Some(name) = store.any_non_finite() {
                return Err(diverged(
                    format!("gradient for `{name}` is non-finite"),
                    last_finite,
                ));
            }
            if let Err(e) = adam_step(&mut store, &mut adam, &config.optimizer) {
                return Err(diverged(format!("optimizer step failed: {e}"), last_finite));
            }
        }
        let n = picks.len() as f64;
        history.push(EpochLoss {
            epoch,
            affordance: aff_sum / n,
            pose: pose_sum / n,
        });
        let checkpoint = Checkpoint {
            config: config.clone(),
            epoch: epoch + 1,
            labels: labels.clone(),
            rng: RngCursor {
                seed: config.seed,
                next_epoch: epoch + 1,
            },
            loss_history: history.clone(),
            store: store.clone(),
        };
        on_epoch(&checkpoint)?;
        if epoch + 1 == config.epochs {
            return Ok(checkpoint);
        }
    }
    unreachable!("epochs >= 1 is validated");
}

#[cfg(test)]
mod tests {
    use super::super::test_support::tiny_config;
    use super::*;
    use crate::data::synth::generate_synthetic;
    use crate::diffusion::{diffusion_loss_from_events, LossItem};

    fn tiny_records() -> Vec<ObjectRecord> {
        generate_synthetic(&tiny_config().synth, 5).unwrap()
    }

    #[test]
    fn label_set_is_sorted_and_includes_background() {
        let labels = training_label_set(&tiny_records());
        assert_eq!(
            labels,
            ["contain", "cut", "grasp", "none", "open", "pour"]
                .map(String::from)
                .to_vec()
        );
    }

    #[test]
    fn joint_loss_equals_isolated_branch_losses() {
        let config = tiny_config();
        let records = tiny_records();
        let provider = config.embeddings.provider().unwrap();
        let labels = training_label_set(&records);
        let data = prepare_dataset(&records, &labels, &provider, &config.encoder).unwrap();
        let den_cfg = config.denoiser_config(provider.dimension());
        let schedule = config.schedule().unwrap();
        let mut store = ParamStore::new();
        register_model_params(&mut store, &config, provider.dimension()).unwrap();

        let mut rng = stream_rng(3, 0);
        let picks = plan_epoch(&mut rng, &data, schedule.len(), config.diffusion.p_uncond);
        let with_pose: Vec<&Pick> = picks.iter().filter(|p| p.triplet.is_some()).collect();
        assert!(!with_pose.is_empty());

        // Joint pass over the batch.
        let mut joint_aff = 0.0;
        let mut joint_pose = 0.0;
        for pick in &with_pose {
            let item =
                item_losses(&mut store, &config, &den_cfg, &schedule, &data, pick, 1.0).unwrap();
            joint_aff += item.affordance;
            joint_pose += item.pose;
        }
        let b = with_pose.len() as f64;

        // Isolated detection branch on the same objects.
        let mut iso_aff = 0.0;
        for pick in &with_pose {
            let object = &data.objects[pick.object];
            let mut graph = Graph::new();
            let enc = encode_planned(&mut graph, &store, &config.encoder, &object.plan).unwrap();
            let texts = graph.constant(data.label_matrix.clone());
            let f = correlation(&mut graph, enc.point_features, texts).unwrap();
            let s = softmax_scores(&mut graph, &store, f).unwrap();
            let l = affordance_loss(&mut graph, s, &object.truth).unwrap();
            iso_aff += graph.value(l).item().unwrap() as f64;
        }

        // Isolated pose branch with the same events, conditioning on the
        // same forward-pass cloud features.
        let mut g0s = Vec::new();
        let mut clouds = Vec::new();
        let mut texts = Vec::new();
        let mut events = Vec::new();
        for pick in &with_pose {
            let object = &data.objects[pick.object];
            let (entry_index, pose_index, event) = pick.triplet.clone().unwrap();
            let mut graph = Graph::new();
            let enc = encode_planned(&mut graph, &store, &config.encoder, &object.plan).unwrap();
            clouds.push(graph.value(enc.global_feature).row_slice(0).to_vec());
            g0s.push(object.entries[entry_index].poses[pose_index]);
            texts.push(object.entries[entry_index].text.clone());
            events.push(event);
        }
        let items: Vec<LossItem> = (0..g0s.len())
            .map(|i| LossItem {
                g0: g0s[i],
                cloud_feature: &clouds[i],
                text_feature: &texts[i],
            })
            .collect();
        let iso_pose =
            diffusion_loss_from_events(&store, &den_cfg, &schedule, &items, &events).unwrap();

        let joint_mean = (joint_aff + joint_pose) / b;
        let iso_mean = iso_aff / b + iso_pose;
        assert!(
            (joint_mean - iso_mean).abs() <= 1e-6 * iso_mean.abs().max(1.0),
            "joint {joint_mean} vs isolated {iso_mean}"
        );
    }

    #[test]
    fn training_is_deterministic_and_reports_history() {
        let config = tiny_config();
        let records = tiny_records();
        let run = || {
            let mut epochs_seen = 0usize;
            let ckpt = train(&config, &records, |_| {
                epochs_seen += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(epochs_seen, config.epochs);
            ckpt
        };
        let a = run();
        let b = run();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.epoch, config.epochs);
        assert_eq!(a.labels, b.labels);
        for i in 0..a.store.len() {
            assert_eq!(
                a.store.value_at(i).as_slice(),
                b.store.value_at(i).as_slice(),
                "parameter {} differs between identical runs",
                a.store.name_at(i)
            );
        }
        assert!(a.loss_history[0].affordance.is_finite());
        assert!(a.loss_history[0].pose > 0.0);
    }

    #[test]
    fn divergence_halts_with_batch_diagnostics() {
        let mut config = tiny_config();
        config.optimizer.learning_rate = 1e25;
        config.epochs = 6;
        let err = train(&config, &tiny_records(), |_| Ok(())).unwrap_err();
        match &err {
            Error::Diverged { detail, .. } => {
                assert!(
                    detail.contains("last finite losses"),
                    "diagnostic should cite the last finite losses: {detail}"
                );
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn epoch_plan_covers_every_object_once() {
        let config = tiny_config();
        let records = tiny_records();
        let provider = config.embeddings.provider().unwrap();
        let labels = training_label_set(&records);
        let data = prepare_dataset(&records, &labels, &provider, &config.encoder).unwrap();
        let mut rng = stream_rng(9, 0);
        let picks = plan_epoch(&mut rng, &data, 20, 0.05);
        let mut seen: Vec<usize> = picks.iter().map(|p| p.object).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..records.len()).collect::<Vec<_>>());
        for pick in &picks {
            let (entry, pose, _) = pick.triplet.clone().expect("synthetic objects have poses");
            assert!(!data.objects[pick.object].entries[entry].poses.is_empty());
            assert!(pose < data.objects[pick.object].entries[entry].poses.len());
        }
    }
}
