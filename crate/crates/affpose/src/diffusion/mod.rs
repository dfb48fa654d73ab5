//! Denoising diffusion over 7-vector gripper poses (unit quaternion plus
//! translation), conditioned on a cloud feature and a text embedding.
//!
//! The forward process follows a predefined linear variance schedule; training
//! regresses the injected noise with an occasional unconditional step so that
//! sampling can blend conditional and unconditional predictions
//! (classifier-free guidance). Ancestral sampling runs the learned reverse
//! chain from pure noise.

pub mod denoiser;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{vector_to_pose, Pose, PoseVector};
use crate::numerics::graph::Graph;
use crate::numerics::params::ParamStore;
use crate::numerics::rng::{standard_normal, stream_rng};
use crate::numerics::{DenseArray, Scalar};

use denoiser::{context_unify, denoise, denoise_rows, time_feature_node, DenoiserConfig};

/// Width of a pose vector: quaternion (w, x, y, z) then translation (x, y, z).
pub const POSE_DIM: usize = 7;

/// Linear variance schedule with cached products.
///
/// Tables are 1-indexed by timestep through the accessors; `alpha_bar(t)` is
/// the running product of `alpha` up to t and is strictly decreasing.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Usage(format!(
                "timestep {t} outside schedule of length {}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Builds a linear schedule of `t_count` steps from `beta_start` to `beta_end`.
pub fn make_linear_schedule(
    t_count: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if t_count < 2 {
        return Err(Error::Usage(format!(
            "schedule needs at least 2 steps, got {t_count}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Usage(format!(
            "schedule requires 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let step = (beta_end - beta_start) / (t_count - 1) as f64;
    let mut beta = Vec::with_capacity(t_count);
    let mut alpha = Vec::with_capacity(t_count);
    let mut alpha_bar = Vec::with_capacity(t_count);
    let mut product = 1.0f64;
    for i in 0..t_count {
        let b = beta_start + step * i as f64;
        let a = 1.0 - b;
        product *= a;
        beta.push(b);
        alpha.push(a);
        alpha_bar.push(product);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

/// Forward noising: blends a clean pose vector with unit Gaussian noise at
/// step t, scaling by the schedule's cumulative signal and noise levels.
pub fn q_sample(
    g0: &PoseVector,
    t: usize,
    eps: &PoseVector,
    schedule: &NoiseSchedule,
) -> Result<PoseVector> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    let mut out = [0.0; POSE_DIM];
    for ((o, &g), &e) in out.iter_mut().zip(g0).zip(eps) {
        *o = signal * g + noise * e;
    }
    Ok(out)
}

/// Sinusoidal timestep features: pair k oscillates at 10000^(-2k/dim).
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Usage(format!(
            "timestep feature width must be even and positive, got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let phase = t as f64 * freq;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(out)
}

/// Classifier-free guidance: (w+1) * conditional - w * unconditional.
pub fn guided_noise<S: Scalar>(eps_cond: &[S], eps_uncond: &[S], w: f64) -> Result<Vec<S>> {
    if eps_cond.len() != eps_uncond.len() {
        return Err(Error::shape(
            "guided_noise",
            format!("{} vs {} elements", eps_cond.len(), eps_uncond.len()),
        ));
    }
    let wc = S::from_f64(w + 1.0);
    let wu = S::from_f64(w);
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(&c, &u)| wc * c - wu * u)
        .collect())
}

/// Ancestral sampling of `count` chains of width `dim` from pure noise.
///
/// `predict` maps the current batch and timestep to the (guided) noise
/// estimate. Each reverse step subtracts the scaled estimate, rescales, and,
/// at every step except the last, adds fresh noise at the schedule's variance.
/// All randomness comes from `rng`: first the initial batch, then one batch of
/// step noise per timestep, drawn row-major.
pub fn run_chains<S, F>(
    mut predict: F,
    count: usize,
    dim: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<DenseArray<S>>
where
    S: Scalar,
    F: FnMut(&DenseArray<S>, usize) -> Result<DenseArray<S>>,
{
    if count == 0 || dim == 0 {
        return Err(Error::Usage("sampler needs positive count and width".into()));
    }
    let mut g = DenseArray::zeros(count, dim);
    crate::numerics::rng::fill_standard_normal(rng, g.as_mut_slice());
    for t in (1..=schedule.len()).rev() {
        let eps = predict(&g, t)?;
        if eps.rows() != count || eps.cols() != dim {
            return Err(Error::shape(
                "run_chains",
                format!(
                    "noise estimate {}x{} for chains {}x{}",
                    eps.rows(),
                    eps.cols(),
                    count,
                    dim
                ),
            ));
        }
        let a = schedule.alpha(t);
        let ab = schedule.alpha_bar(t);
        let coef = S::from_f64((1.0 - a) / (1.0 - ab).sqrt());
        let inv_sqrt_a = S::from_f64(1.0 / a.sqrt());
        let slice = g.as_mut_slice();
        for (x, &e) in slice.iter_mut().zip(eps.as_slice()) {
            *x = (*x - coef * e) * inv_sqrt_a;
        }
        if t > 1 {
            let sigma = S::from_f64(schedule.beta(t).sqrt());
            for x in slice.iter_mut() {
                *x += sigma * standard_normal::<S, _>(rng);
            }
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("sampler state at step {t}")));
        }
    }
    Ok(g)
}

/// How many poses to draw, with what guidance strength, from which seed.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub count: usize,
    pub guidance: f64,
    pub seed: u64,
}

/// Precomputed conditioning values for sampling: the unified context rows.
struct SamplerContext {
    cond: DenseArray<f32>,
    uncond: Option<DenseArray<f32>>,
}

fn unified_context_value(
    store: &ParamStore<f32>,
    config: &DenoiserConfig,
    cloud_feature: Option<&[f32]>,
    text_feature: Option<&[f32]>,
) -> Result<DenseArray<f32>> {
    let mut graph = Graph::new();
    let c = match cloud_feature {
        Some(v) => graph.constant(DenseArray::new(1, config.cloud_dim, v.to_vec())?),
        None => graph.constant(DenseArray::zeros(1, config.cloud_dim)),
    };
    let t = match text_feature {
        Some(v) => graph.constant(DenseArray::new(1, config.text_dim, v.to_vec())?),
        None => graph.constant(DenseArray::zeros(1, config.text_dim)),
    };
    let ctx = context_unify(&mut graph, store, c, t)?;
    Ok(graph.value(ctx.unified).clone())
}

/// Draws raw pose vectors from the learned reverse chain.
///
/// Guidance blends the conditional and unconditional predictions; `w = 0`
/// skips the unconditional pass entirely and `w = -1` skips the conditional
/// pass. The context fusion runs once up front since it does not depend on
/// the chain state or timestep.
pub fn sample_pose_rows(
    store: &ParamStore<f32>,
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    cloud_feature: &[f32],
    text_feature: &[f32],
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
    count: usize,
) -> Result<Vec<PoseVector>> {
    config.validate()?;
    let w = sampler.guidance;
    let context = SamplerContext {
        cond: unified_context_value(store, config, Some(cloud_feature), Some(text_feature))?,
        uncond: if w == 0.0 {
            None
        } else {
            Some(unified_context_value(store, config, None, None)?)
        },
    };
    let predict = |g: &DenseArray<f32>, t: usize| -> Result<DenseArray<f32>> {
        let mut graph = Graph::new();
        let g_node = graph.constant(g.clone());
        let tau = time_feature_node(&mut graph, store, config, t)?;
        let run_branch =
            |graph: &mut Graph<f32>, ctx_value: &DenseArray<f32>, tau| -> Result<DenseArray<f32>> {
                let ctx_node = graph.constant(ctx_value.clone());
                let eps = denoise_rows(graph, store, g_node, ctx_node, tau)?;
                Ok(graph.value(eps).clone())
            };
        if w == -1.0 {
            let uncond = context.uncond.as_ref().expect("w != 0");
            return run_branch(&mut graph, uncond, tau);
        }
        let cond = run_branch(&mut graph, &context.cond, tau)?;
        match &context.uncond {
            None => Ok(cond),
            Some(uncond_ctx) => {
                let uncond = run_branch(&mut graph, uncond_ctx, tau)?;
                let blended = guided_noise(cond.as_slice(), uncond.as_slice(), w)?;
                DenseArray::new(g.rows(), g.cols(), blended)
            }
        }
    };
    let rows = run_chains(predict, count, POSE_DIM, schedule, rng)?;
    Ok((0..count)
        .map(|i| {
            let mut v = [0.0f64; POSE_DIM];
            for (o, &x) in v.iter_mut().zip(rows.row_slice(i)) {
                *o = x as f64;
            }
            v
        })
        .collect())
}

/// Converts sampled rows to poses, rerunning failed chains once via `retry`.
fn poses_from_rows<F>(rows: Vec<PoseVector>, retry: F) -> Result<Vec<Pose>>
where
    F: FnOnce(usize) -> Result<Vec<PoseVector>>,
{
    let mut poses: Vec<Option<Pose>> = Vec::with_capacity(rows.len());
    let mut failed = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        match vector_to_pose(row) {
            Ok(p) => poses.push(Some(p)),
            Err(_) => {
                failed.push(i);
                poses.push(None);
            }
        }
    }
    if !failed.is_empty() {
        log::warn!(
            "{} of {} sampled poses had degenerate quaternions; resampling once",
            failed.len(),
            rows.len()
        );
        let replacements = retry(failed.len())?;
        if replacements.len() != failed.len() {
            return Err(Error::Sampling(format!(
                "retry produced {} rows for {} failed chains",
                replacements.len(),
                failed.len()
            )));
        }
        for (&slot, row) in failed.iter().zip(&replacements) {
            poses[slot] = Some(vector_to_pose(row).map_err(|e| {
                Error::Sampling(format!("chain {slot} degenerate after retry: {e}"))
            })?);
        }
    }
    Ok(poses.into_iter().map(|p| p.expect("filled")).collect())
}

/// Samples `sampler.count` gripper poses for one (cloud, label) condition.
///
/// Chains whose final quaternion is degenerate are resampled once as a batch
/// from a fresh noise stream; a second failure aborts.
pub fn sample_poses(
    store: &ParamStore<f32>,
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    cloud_feature: &[f32],
    text_feature: &[f32],
    sampler: &SamplerConfig,
) -> Result<Vec<Pose>> {
    let mut rng = stream_rng(sampler.seed, 0);
    let rows = sample_pose_rows(
        store,
        config,
        schedule,
        cloud_feature,
        text_feature,
        sampler,
        &mut rng,
        sampler.count,
    )?;
    poses_from_rows(rows, |n| {
        let mut retry_rng = stream_rng(sampler.seed, 1);
        sample_pose_rows(
            store,
            config,
            schedule,
            cloud_feature,
            text_feature,
            sampler,
            &mut retry_rng,
            n,
        )
    })
}

/// Randomness for one training item: the timestep, the injected noise, and
/// whether the conditions are dropped for this step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEvent {
    pub t: usize,
    pub eps: PoseVector,
    pub drop: bool,
}

/// Draws per-item training randomness in a fixed order: timestep, then the
/// seven noise components, then the condition-dropout coin.
pub fn draw_loss_events(
    rng: &mut ChaCha8Rng,
    count: usize,
    t_count: usize,
    p_uncond: f64,
) -> Vec<LossEvent> {
    (0..count)
        .map(|_| {
            let t = rng.gen_range(1..=t_count);
            let mut eps = [0.0f64; POSE_DIM];
            for e in eps.iter_mut() {
                *e = standard_normal(rng);
            }
            let drop = rng.gen::<f64>() < p_uncond;
            LossEvent { t, eps, drop }
        })
        .collect()
}

/// One (pose, conditioning) training example for the diffusion branch.
#[derive(Debug, Clone)]
pub struct LossItem<'a> {
    pub g0: PoseVector,
    pub cloud_feature: &'a [f32],
    pub text_feature: &'a [f32],
}

/// Reference evaluation of the noise-regression objective against an
/// arbitrary predictor: mean over items of the squared error between the
/// injected and predicted noise. The predictor sees the noised vector, the
/// timestep, and whether conditioning is dropped.
pub fn noise_regression_with<F>(
    schedule: &NoiseSchedule,
    g0s: &[PoseVector],
    events: &[LossEvent],
    mut predict: F,
) -> Result<f64>
where
    F: FnMut(usize, &PoseVector, usize, bool) -> Result<PoseVector>,
{
    if g0s.len() != events.len() || g0s.is_empty() {
        return Err(Error::Usage(format!(
            "noise regression needs matching non-empty item/event lists, got {} and {}",
            g0s.len(),
            events.len()
        )));
    }
    let mut total = 0.0;
    for (i, (g0, ev)) in g0s.iter().zip(events).enumerate() {
        let g_t = q_sample(g0, ev.t, &ev.eps, schedule)?;
        let est = predict(i, &g_t, ev.t, !ev.drop)?;
        total += ev
            .eps
            .iter()
            .zip(&est)
            .map(|(&e, &p)| (e - p) * (e - p))
            .sum::<f64>();
    }
    Ok(total / g0s.len() as f64)
}

/// Noise-regression loss through the denoiser for a batch, given fixed
/// randomness. Forward values only; the trainer builds its own graphs so that
/// gradients flow through the encoder as well.
pub fn diffusion_loss_from_events(
    store: &ParamStore<f32>,
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    items: &[LossItem],
    events: &[LossEvent],
) -> Result<f64> {
    if items.len() != events.len() || items.is_empty() {
        return Err(Error::Usage(format!(
            "diffusion loss needs matching non-empty item/event lists, got {} and {}",
            items.len(),
            events.len()
        )));
    }
    let g0s: Vec<PoseVector> = items.iter().map(|it| it.g0).collect();
    noise_regression_with(schedule, &g0s, events, |i, g_t, t, conditional| {
        let item = &items[i];
        let mut graph = Graph::new();
        let g_row: Vec<f32> = g_t.iter().map(|&v| v as f32).collect();
        let g = graph.constant(DenseArray::new(1, POSE_DIM, g_row)?);
        let condition = if conditional {
            let c = graph.constant(DenseArray::new(
                1,
                config.cloud_dim,
                item.cloud_feature.to_vec(),
            )?);
            let txt = graph.constant(DenseArray::new(
                1,
                config.text_dim,
                item.text_feature.to_vec(),
            )?);
            Some((c, txt))
        } else {
            None
        };
        let eps = denoise(&mut graph, store, config, g, condition, t)?;
        let mut out = [0.0f64; POSE_DIM];
        for (o, &v) in out.iter_mut().zip(graph.value(eps).row_slice(0)) {
            *o = v as f64;
        }
        Ok(out)
    })
}

/// Noise-regression loss for a batch, drawing fresh randomness from `rng`.
pub fn diffusion_loss(
    store: &ParamStore<f32>,
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    items: &[LossItem],
    p_uncond: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let events = draw_loss_events(rng, items.len(), schedule.len(), p_uncond);
    diffusion_loss_from_events(store, config, schedule, items, &events)
}
