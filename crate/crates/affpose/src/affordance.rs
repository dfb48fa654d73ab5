//! Open-vocabulary affordance detection head.
//!
//! Per-point features are compared with text-label embeddings by cosine
//! correlation, the scores are sharpened by a learned temperature and
//! normalized per point with a softmax, and training minimizes the negative
//! log-likelihood of the ground-truth label at every point. Inference takes
//! the per-point argmax over an arbitrary query label set, which must include
//! the background label so every point has a "no affordance" option.

use std::rc::Rc;

use crate::embeddings::{normalize_label, TextProvider, BACKGROUND_LABEL};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, VarId};
use crate::numerics::params::ParamStore;
use crate::numerics::{DenseArray, Scalar};

/// Name of the trainable log-temperature parameter.
pub const LOG_ETA_PARAM: &str = "aff.log_eta";

/// Initial softmax temperature; stored as its logarithm so it stays positive.
pub const INITIAL_ETA: f64 = 0.07;

/// Hard per-point label assignments, as indices into a query label list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffordanceMap {
    pub assignments: Vec<usize>,
}

impl AffordanceMap {
    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

/// Registers the learned temperature (one scalar, stored as log eta).
pub fn register_affordance_params<S: Scalar>(store: &mut ParamStore<S>) -> Result<()> {
    let init = DenseArray::scalar(S::from_f64(INITIAL_ETA.ln()));
    store.register(LOG_ETA_PARAM, init)?;
    Ok(())
}

/// Cosine correlation between per-point features (rows of `points`) and text
/// embeddings (rows of `texts`); entry (i, j) compares point i with label j.
pub fn correlation<S: Scalar>(graph: &mut Graph<S>, points: VarId, texts: VarId) -> Result<VarId> {
    graph.cosine_rows(points, texts)
}

/// Per-point distribution over query labels: softmax of correlation / eta.
///
/// The temperature enters as `exp(-log_eta)` so it is positive for any real
/// parameter value and the division stays differentiable.
pub fn softmax_scores<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    correlation: VarId,
) -> Result<VarId> {
    let log_eta = graph.param(store, LOG_ETA_PARAM)?;
    let neg_log_eta = graph.scale(log_eta, S::from_f64(-1.0))?;
    let inv_eta = graph.exp(neg_log_eta)?;
    let sharpened = graph.scale_by_scalar(correlation, inv_eta)?;
    graph.softmax_rows(sharpened)
}

/// Negative log-likelihood of the ground-truth label, summed over points.
pub fn affordance_loss<S: Scalar>(
    graph: &mut Graph<S>,
    scores: VarId,
    truth: &AffordanceMap,
) -> Result<VarId> {
    graph.nll_rows(scores, Rc::new(truth.assignments.clone()))
}

/// Row-wise argmax with ties broken toward the lower column index.
pub fn argmax_map<S: Scalar>(scores: &DenseArray<S>) -> AffordanceMap {
    let mut assignments = Vec::with_capacity(scores.rows());
    for r in 0..scores.rows() {
        let row = scores.row_slice(r);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        assignments.push(best);
    }
    AffordanceMap { assignments }
}

/// Labels an encoded cloud against an arbitrary query label set.
///
/// Returns the hard map plus the per-point score rows. The query set must be
/// non-empty and include the background label.
pub fn predict_map<S: Scalar>(
    store: &ParamStore<S>,
    point_features: &DenseArray<S>,
    labels: &[String],
    provider: &TextProvider,
) -> Result<(AffordanceMap, DenseArray<S>)> {
    if labels.is_empty() {
        return Err(Error::Usage("query label list is empty".into()));
    }
    if !labels
        .iter()
        .any(|l| normalize_label(l) == BACKGROUND_LABEL)
    {
        return Err(Error::Usage(format!(
            "query labels must include the background label `{BACKGROUND_LABEL}`"
        )));
    }
    let dim = provider.dimension();
    let flat = provider.embed_all(labels)?;
    let texts = DenseArray::new(
        labels.len(),
        dim,
        flat.into_iter().map(S::from_f32).collect(),
    )?;
    let mut graph = Graph::new();
    let p = graph.constant(point_features.clone());
    let t = graph.constant(texts);
    let f = correlation(&mut graph, p, t)?;
    let s = softmax_scores(&mut graph, store, f)?;
    let scores = graph.value(s).clone();
    Ok((argmax_map(&scores), scores))
}

/// Converts continuous per-point masks into a hard label map.
///
/// `masks` pairs a query-label column index with that affordance's mask over
/// all points. A point takes the column whose mask value is largest if any
/// value exceeds 0.5 (first listed wins exact ties), otherwise
/// `background_index`.
pub fn map_from_masks(
    n_points: usize,
    masks: &[(usize, &[f32])],
    background_index: usize,
) -> Result<AffordanceMap> {
    for &(col, mask) in masks {
        if mask.len() != n_points {
            return Err(Error::Data(format!(
                "mask for label column {col} has {} values for {n_points} points",
                mask.len()
            )));
        }
    }
    let mut assignments = vec![background_index; n_points];
    for (i, slot) in assignments.iter_mut().enumerate() {
        let mut best: Option<(usize, f32)> = None;
        for &(col, mask) in masks {
            let v = mask[i];
            if v > 0.5 && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((col, v));
            }
        }
        if let Some((col, _)) = best {
            *slot = col;
        }
    }
    Ok(AffordanceMap { assignments })
}
