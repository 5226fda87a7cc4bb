//! Orthogonal Safety-Constrained Adaptation.
//!
//! Task gradients are projected onto the orthogonal complement of the
//! safety subspace, with an adaptive relaxation coefficient
//! `alpha = max(0, 1 - lambda * tr(F))` that reintroduces a fraction of
//! the in-subspace component on layers where the Fisher trace is small.
//! The anchor gradient bypasses projection entirely so its
//! safety-reinforcing signal is preserved.

use crate::error::{Error, Result};
use crate::model::FlatAdapterVec;
use crate::ssi::{projection_apply, SafetySubspace};

/// Projection behaviour for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    /// Full projection: `alpha = 0`.
    Strict,
    /// `alpha = max(0, 1 - lambda * tr(F))`.
    Adaptive,
    /// No projection: `alpha = 1`; reduces to the unconstrained trainer.
    Off,
}

/// Relaxation-strictness hyperparameter plus mode.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct ProjectionPolicy {
    pub lambda: f64,
    pub mode: ProjectionMode,
}

impl ProjectionPolicy {
    pub fn new(lambda: f64, mode: ProjectionMode) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(ProjectionPolicy { lambda, mode })
    }

    /// Per-layer relaxation coefficient under this policy for a given
    /// Fisher trace.
    pub fn alpha(&self, fisher_trace: f64) -> Result<f64> {
        match self.mode {
            ProjectionMode::Strict => Ok(0.0),
            ProjectionMode::Off => Ok(1.0),
            ProjectionMode::Adaptive => relaxation_coefficient(fisher_trace, self.lambda),
        }
    }
}

/// `alpha = max(0, 1 - lambda * tr(F))`, clamped to [0, 1].
/// A zero trace means no safety information, hence unconstrained.
pub fn relaxation_coefficient(fisher_trace: f64, lambda: f64) -> Result<f64> {
    if fisher_trace < 0.0 {
        return Err(Error::Domain(format!(
            "negative fisher trace {fisher_trace}: PSD invariant broken upstream"
        )));
    }
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok((1.0 - lambda * fisher_trace).clamp(0.0, 1.0))
}

/// `g - V (V^T g)`: removes the safety-subspace component. An empty
/// subspace returns the gradient unchanged.
pub fn project_orthogonal(sub: &SafetySubspace, g: &[f64]) -> Result<Vec<f64>> {
    if sub.rank() == 0 {
        if g.len() != sub.ambient_dim() {
            return Err(Error::Shape(format!(
                "gradient has {} entries, subspace ambient dim is {}",
                g.len(),
                sub.ambient_dim()
            )));
        }
        return Ok(g.to_vec());
    }
    let pg = projection_apply(sub, g)?;
    Ok(g.iter().zip(&pg).map(|(a, b)| a - b).collect())
}

/// Relaxed projected gradient `(g - Pi g) + alpha * Pi g`.
pub fn relaxed_gradient(sub: &SafetySubspace, g: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let pg = projection_apply(sub, g)?;
    Ok(g.iter()
        .zip(&pg)
        .map(|(gi, pi)| (gi - pi) + alpha * pi)
        .collect())
}

/// One step's per-layer gradient decomposition: the task gradient, the
/// anchor gradient (already scaled by gamma), and their combination
/// `(g - Pi g) + alpha * Pi g + a`.
#[derive(Clone, Debug)]
pub struct StepGradient {
    pub task: FlatAdapterVec,
    pub anchor: FlatAdapterVec,
    pub combined: FlatAdapterVec,
}

/// Compose the update for one layer: relax-project the task gradient
/// under `policy` (using the subspace's own Fisher trace) and add the
/// unprojected anchor gradient.
pub fn compose_update(
    sub: &SafetySubspace,
    g_task: &FlatAdapterVec,
    a_anchor: &FlatAdapterVec,
    policy: &ProjectionPolicy,
) -> Result<StepGradient> {
    let alpha = policy.alpha(sub.fisher_trace)?;
    compose_update_with_alpha(sub, g_task, a_anchor, alpha)
}

/// Same as [`compose_update`] with a precomputed relaxation coefficient
/// (the pipeline fixes alpha per layer per domain, optionally after
/// cross-layer trace normalization).
pub fn compose_update_with_alpha(
    sub: &SafetySubspace,
    g_task: &FlatAdapterVec,
    a_anchor: &FlatAdapterVec,
    alpha: f64,
) -> Result<StepGradient> {
    if g_task.values.len() != a_anchor.values.len() {
        return Err(Error::Shape(format!(
            "task gradient has {} entries, anchor {}",
            g_task.values.len(),
            a_anchor.values.len()
        )));
    }
    let relaxed = if sub.rank() == 0 {
        g_task.values.clone()
    } else {
        relaxed_gradient(sub, &g_task.values, alpha)?
    };
    let combined: Vec<f64> = relaxed
        .iter()
        .zip(&a_anchor.values)
        .map(|(r, a)| r + a)
        .collect();
    Ok(StepGradient {
        task: g_task.clone(),
        anchor: a_anchor.clone(),
        combined: FlatAdapterVec {
            layer: g_task.layer,
            values: combined,
        },
    })
}
