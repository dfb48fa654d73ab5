//! Conditional noise-prediction network for the pose diffusion model.
//!
//! The denoiser fuses a global cloud feature and a text-label embedding into a
//! unified context vector via learned influence masks, then runs the noised
//! pose vector through a U-Net-style MLP stack: three downscaling layers, and
//! three upscaling layers whose inputs concatenate the previous output, a skip
//! connection from the mirrored downscaling layer, the projected timestep
//! features, and the unified context. Running unconditionally replaces both
//! condition vectors with zeros before their projections.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, VarId};
use crate::numerics::params::{init_linear, ParamStore};
use crate::numerics::rng::derive_seed;
use crate::numerics::{DenseArray, Scalar};

use super::{time_embedding, POSE_DIM};

/// Architecture of the denoiser; widths cover the three downscaling layers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    /// Dimension of the global cloud feature fed to the context fusion.
    pub cloud_dim: usize,
    /// Dimension of the text embeddings fed to the context fusion.
    pub text_dim: usize,
    /// Width of the unified context vector.
    pub context_dim: usize,
    /// Width of the sinusoidal timestep features (must be even).
    pub time_dim: usize,
    /// Output widths of the three downscaling MLPs.
    pub down_widths: [usize; 3],
}

impl DenoiserConfig {
    /// Full-scale defaults; callers override widths for small experiments.
    pub fn new(cloud_dim: usize, text_dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            cloud_dim,
            text_dim,
            context_dim: 128,
            time_dim: 64,
            down_widths: [64, 128, 256],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cloud_dim == 0 || self.text_dim == 0 || self.context_dim == 0 {
            return Err(Error::Usage(
                "denoiser feature dimensions must be positive".into(),
            ));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Usage(format!(
                "timestep feature width must be even and positive, got {}",
                self.time_dim
            )));
        }
        if self.down_widths.iter().any(|&w| w == 0) {
            return Err(Error::Usage("denoiser widths must be positive".into()));
        }
        Ok(())
    }
}

/// Registers all denoiser parameters under the `den.` prefix.
pub fn register_denoiser_params<S: Scalar>(
    store: &mut ParamStore<S>,
    config: &DenoiserConfig,
    seed: u64,
) -> Result<()> {
    config.validate()?;
    let mut counter = 0u64;
    let mut linear = |store: &mut ParamStore<S>,
                      name: &str,
                      d_in: usize,
                      d_out: usize|
     -> Result<()> {
        let (w, b) = init_linear::<S>(d_in, d_out, derive_seed(seed, counter));
        counter += 1;
        store.register(&format!("{name}.w"), w)?;
        store.register(&format!("{name}.b"), b)?;
        Ok(())
    };
    let ctx = config.context_dim;
    linear(store, "den.ctx.proj_c", config.cloud_dim, ctx)?;
    linear(store, "den.ctx.proj_t", config.text_dim, ctx)?;
    for branch in ["mask_c", "mask_t"] {
        linear(store, &format!("den.ctx.{branch}.mlp0"), ctx, ctx)?;
        linear(store, &format!("den.ctx.{branch}.mlp1"), ctx, ctx)?;
    }
    linear(store, "den.time.proj", config.time_dim, config.time_dim)?;
    let [d1, d2, d3] = config.down_widths;
    linear(store, "den.down0", POSE_DIM, d1)?;
    linear(store, "den.down1", d1, d2)?;
    linear(store, "den.down2", d2, d3)?;
    let side = config.time_dim + ctx;
    linear(store, "den.up0", d3 + d2 + side, d2)?;
    linear(store, "den.up1", d2 + d1 + side, d1)?;
    linear(store, "den.up2", d1 + POSE_DIM + side, POSE_DIM)?;
    Ok(())
}

fn linear_node<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    name: &str,
    x: VarId,
) -> Result<VarId> {
    let w = graph.param(store, &format!("{name}.w"))?;
    let b = graph.param(store, &format!("{name}.b"))?;
    let xw = graph.matmul(x, w)?;
    graph.add_row(xw, b)
}

fn mask_score<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    branch: &str,
    x: VarId,
) -> Result<VarId> {
    let h = linear_node(graph, store, &format!("den.ctx.{branch}.mlp0"), x)?;
    let h = graph.relu(h)?;
    linear_node(graph, store, &format!("den.ctx.{branch}.mlp1"), h)
}

/// Graph handles produced by the context fusion.
#[derive(Debug, Clone, Copy)]
pub struct ContextNodes {
    /// Unified context row, `1 x context_dim`.
    pub unified: VarId,
    /// Influence mask of the cloud branch (the text mask is its complement).
    pub cloud_mask: VarId,
    pub text_mask: VarId,
    pub cloud_proj: VarId,
    pub text_proj: VarId,
}

/// Fuses cloud and text features into a unified context vector.
///
/// Both inputs are projected to the context width; two mask MLPs score each
/// projection, and a pairwise softmax over the two scores (computed as
/// sigmoids of the score difference, which is the same function evaluated
/// stably) yields elementwise influence masks that mix the projections.
pub fn context_unify<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    cloud: VarId,
    text: VarId,
) -> Result<ContextNodes> {
    let cloud_proj = linear_node(graph, store, "den.ctx.proj_c", cloud)?;
    let text_proj = linear_node(graph, store, "den.ctx.proj_t", text)?;
    let score_c = mask_score(graph, store, "mask_c", cloud_proj)?;
    let score_t = mask_score(graph, store, "mask_t", text_proj)?;
    let c_minus_t = graph.sub(score_c, score_t)?;
    let t_minus_c = graph.scale(c_minus_t, S::from_f64(-1.0))?;
    let cloud_mask = graph.sigmoid(c_minus_t)?;
    let text_mask = graph.sigmoid(t_minus_c)?;
    let c_part = graph.mul(cloud_proj, cloud_mask)?;
    let t_part = graph.mul(text_proj, text_mask)?;
    let unified = graph.add(c_part, t_part)?;
    Ok(ContextNodes {
        unified,
        cloud_mask,
        text_mask,
        cloud_proj,
        text_proj,
    })
}

/// Projected sinusoidal features for one timestep, `1 x time_dim`.
pub fn time_feature_node<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    config: &DenoiserConfig,
    t: usize,
) -> Result<VarId> {
    let raw = time_embedding(t, config.time_dim)?;
    let row = DenseArray::new(
        1,
        config.time_dim,
        raw.into_iter().map(S::from_f64).collect(),
    )?;
    let node = graph.constant(row);
    let projected = linear_node(graph, store, "den.time.proj", node)?;
    graph.relu(projected)
}

/// Runs the U-Net MLP stack on a batch of noised pose rows.
///
/// `unified` and `tau` are single rows shared by every chain in the batch;
/// they are tiled to the batch height before each concatenation. Upscaling
/// layer k takes a skip connection from downscaling layer 3-k, where layer 0
/// is the input itself; the final layer is linear.
pub fn denoise_rows<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    g: VarId,
    unified: VarId,
    tau: VarId,
) -> Result<VarId> {
    let rows = graph.value(g).rows();
    let tile = Rc::new(vec![0usize; rows]);
    let u_rows = graph.gather_rows(unified, Rc::clone(&tile))?;
    let tau_rows = graph.gather_rows(tau, tile)?;
    let mut down = Vec::with_capacity(4);
    down.push(g);
    let mut x = g;
    for i in 0..3 {
        x = linear_node(graph, store, &format!("den.down{i}"), x)?;
        x = graph.relu(x)?;
        down.push(x);
    }
    for k in 0..3 {
        let skip = down[2 - k];
        let joined = graph.concat_cols(&[x, skip, tau_rows, u_rows])?;
        x = linear_node(graph, store, &format!("den.up{k}"), joined)?;
        if k < 2 {
            x = graph.relu(x)?;
        }
    }
    Ok(x)
}

/// Full conditional noise prediction for a batch of noised pose rows.
///
/// `condition` carries the cloud and text feature rows; `None` runs the
/// unconditional branch, substituting zeros for both features before their
/// projections.
pub fn denoise<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    config: &DenoiserConfig,
    g: VarId,
    condition: Option<(VarId, VarId)>,
    t: usize,
) -> Result<VarId> {
    let (cloud, text) = match condition {
        Some(pair) => pair,
        None => (
            graph.constant(DenseArray::zeros(1, config.cloud_dim)),
            graph.constant(DenseArray::zeros(1, config.text_dim)),
        ),
    };
    let ctx = context_unify(graph, store, cloud, text)?;
    let tau = time_feature_node(graph, store, config, t)?;
    denoise_rows(graph, store, g, ctx.unified, tau)
}
