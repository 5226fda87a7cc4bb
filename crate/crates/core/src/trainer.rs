//! Step machinery shared by domain training and safety replay.
//!
//! A [`StepEngine`] owns the projection state for the current domain
//! (per-layer subspaces and relaxation coefficients) plus the optimizer,
//! and applies one composed update per call: relax-projected task
//! gradient, unprojected anchor gradient, and any extra regularizer
//! gradient (the quadratic Fisher penalty of the EWC-style baseline).
//!
//! Plain SGD is the default: projecting raw gradients and projecting the
//! applied update then coincide. The AdamW variant keeps moments on the
//! raw task gradient and projects the preconditioned direction instead,
//! so adaptive rescaling cannot reintroduce in-subspace components; the
//! anchor gradient stays outside the moment state in both cases.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::{AdapterModel, FlatAdapterVec};
use crate::osca::{compose_update_with_alpha, ProjectionPolicy};
use crate::ssi::SafetySubspace;

/// Optimizer selection. SGD is the default at this scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    #[default]
    Sgd,
    Adamw {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn adamw_default() -> Self {
        OptimizerConfig::Adamw {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

/// Per-domain training state: projection setup plus optimizer moments.
#[derive(Clone, Debug)]
pub struct StepEngine {
    /// One subspace per layer; empty when the method does not project.
    subspaces: Vec<SafetySubspace>,
    /// Per-layer relaxation coefficients, fixed for the domain.
    alphas: Vec<f64>,
    pub eta: f64,
    pub optimizer: OptimizerConfig,
    adam: Option<AdamState>,
}

impl StepEngine {
    /// Engine with no projection (unconstrained and data-mixing methods).
    pub fn unconstrained(eta: f64, optimizer: OptimizerConfig) -> Self {
        StepEngine {
            subspaces: Vec::new(),
            alphas: Vec::new(),
            eta,
            optimizer,
            adam: None,
        }
    }

    /// Engine projecting against `subspaces` with fixed per-layer alphas.
    pub fn projected(
        subspaces: Vec<SafetySubspace>,
        alphas: Vec<f64>,
        eta: f64,
        optimizer: OptimizerConfig,
    ) -> Result<Self> {
        if subspaces.len() != alphas.len() {
            return Err(Error::Shape(format!(
                "{} subspaces but {} alphas",
                subspaces.len(),
                alphas.len()
            )));
        }
        Ok(StepEngine {
            subspaces,
            alphas,
            eta,
            optimizer,
            adam: None,
        })
    }

    /// Swap in the next domain's subspaces and alphas; optimizer moments
    /// reset with the domain.
    pub fn set_projection(
        &mut self,
        subspaces: Vec<SafetySubspace>,
        alphas: Vec<f64>,
    ) -> Result<()> {
        if subspaces.len() != alphas.len() {
            return Err(Error::Shape("subspace/alpha count mismatch".into()));
        }
        self.subspaces = subspaces;
        self.alphas = alphas;
        self.adam = None;
        Ok(())
    }

    pub fn has_projection(&self) -> bool {
        !self.subspaces.is_empty()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn subspaces(&self) -> &[SafetySubspace] {
        &self.subspaces
    }

    /// Compute per-layer alphas for a policy over subspace traces, with
    /// optional cross-layer trace normalization (divide by the largest
    /// layer trace) before the relaxation formula.
    pub fn alphas_for(
        subspaces: &[SafetySubspace],
        policy: &ProjectionPolicy,
        trace_normalize: bool,
    ) -> Result<Vec<f64>> {
        let max_trace = subspaces
            .iter()
            .map(|s| s.fisher_trace)
            .fold(0.0_f64, f64::max);
        subspaces
            .iter()
            .map(|s| {
                let tr = if trace_normalize && max_trace > 0.0 {
                    s.fisher_trace / max_trace
                } else {
                    s.fisher_trace
                };
                policy.alpha(tr)
            })
            .collect()
    }

    fn compose(
        &self,
        task: &FlatAdapterVec,
        anchor: Option<&FlatAdapterVec>,
    ) -> Result<FlatAdapterVec> {
        let li = task.layer;
        let zero_anchor = FlatAdapterVec::zeros(li, task.values.len());
        let a = anchor.unwrap_or(&zero_anchor);
        if self.subspaces.is_empty() {
            // No projection: plain sum.
            if task.values.len() != a.values.len() {
                return Err(Error::Shape("task/anchor length mismatch".into()));
            }
            return Ok(FlatAdapterVec {
                layer: li,
                values: task
                    .values
                    .iter()
                    .zip(&a.values)
                    .map(|(t, av)| t + av)
                    .collect(),
            });
        }
        let sub = &self.subspaces[li];
        let alpha = self.alphas[li];
        Ok(compose_update_with_alpha(sub, task, a, alpha)?.combined)
    }

    /// One optimizer step. `task_grads` must cover every layer once;
    /// `anchor_grads` and `extra_grads` are optional parallel sets.
    /// Extra gradients (regularizer terms) are added after composition
    /// and are never projected.
    pub fn step(
        &mut self,
        model: &mut AdapterModel,
        task_grads: &[FlatAdapterVec],
        anchor_grads: Option<&[FlatAdapterVec]>,
        extra_grads: Option<&[FlatAdapterVec]>,
    ) -> Result<()> {
        if task_grads.len() != model.layers.len() {
            return Err(Error::Shape(format!(
                "{} task gradients for {} layers",
                task_grads.len(),
                model.layers.len()
            )));
        }
        match self.optimizer {
            OptimizerConfig::Sgd => {
                let mut updates = Vec::with_capacity(task_grads.len());
                for (li, g) in task_grads.iter().enumerate() {
                    let anchor = anchor_grads.map(|a| &a[li]);
                    let mut u = self.compose(g, anchor)?;
                    if let Some(extra) = extra_grads {
                        for (uv, ev) in u.values.iter_mut().zip(&extra[li].values) {
                            *uv += ev;
                        }
                    }
                    updates.push(u);
                }
                model.apply_update(&updates, self.eta)
            }
            OptimizerConfig::Adamw {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                if self.adam.is_none() {
                    self.adam = Some(AdamState {
                        m: task_grads
                            .iter()
                            .map(|g| vec![0.0; g.values.len()])
                            .collect(),
                        v: task_grads
                            .iter()
                            .map(|g| vec![0.0; g.values.len()])
                            .collect(),
                        t: 0,
                    });
                }
                let directions: Vec<FlatAdapterVec> = {
                    let state = self.adam.as_mut().unwrap();
                    state.t += 1;
                    let t = state.t as f64;
                    task_grads
                        .iter()
                        .enumerate()
                        .map(|(li, g)| {
                            let m = &mut state.m[li];
                            let v = &mut state.v[li];
                            let mut direction = vec![0.0; g.values.len()];
                            for (i, &gi) in g.values.iter().enumerate() {
                                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                                let mh = m[i] / (1.0 - beta1.powf(t));
                                let vh = v[i] / (1.0 - beta2.powf(t));
                                direction[i] = mh / (vh.sqrt() + eps);
                            }
                            FlatAdapterVec {
                                layer: li,
                                values: direction,
                            }
                        })
                        .collect()
                };
                let mut updates = Vec::with_capacity(task_grads.len());
                for (li, dir) in directions.iter().enumerate() {
                    // Project the preconditioned direction, not the raw
                    // gradient, then attach the anchor path.
                    let anchor = anchor_grads.map(|a| &a[li]);
                    let mut u = self.compose(dir, anchor)?;
                    if let Some(extra) = extra_grads {
                        for (uv, ev) in u.values.iter_mut().zip(&extra[li].values) {
                            *uv += ev;
                        }
                    }
                    if weight_decay != 0.0 {
                        let delta = model.adapter_vec(li);
                        for (uv, dv) in u.values.iter_mut().zip(&delta) {
                            *uv += weight_decay * dv;
                        }
                    }
                    updates.push(u);
                }
                model.apply_update(&updates, self.eta)
            }
        }
    }
}

/// Quadratic Fisher penalty state for the EWC-style baseline:
/// `lambda_ewc * sum diag(F) (delta - delta_ref)^2` per layer, with the
/// diagonal taken from the same Fisher accumulator as SSI.
#[derive(Clone, Debug)]
pub struct EwcState {
    pub lambda_ewc: f64,
    pub diag: Vec<Vec<f64>>,
    pub ref_delta: Vec<Vec<f64>>,
}

impl EwcState {
    /// Gradient of the penalty: `2 lambda diag(F) (delta - delta_ref)`.
    pub fn grads(&self, model: &AdapterModel) -> Result<Vec<FlatAdapterVec>> {
        let mut out = Vec::with_capacity(self.diag.len());
        for li in 0..self.diag.len() {
            let delta = model.adapter_vec(li);
            if delta.len() != self.diag[li].len() {
                return Err(Error::Shape("EWC diagonal layout mismatch".into()));
            }
            let values = delta
                .iter()
                .zip(&self.diag[li])
                .zip(&self.ref_delta[li])
                .map(|((d, f), r)| 2.0 * self.lambda_ewc * f * (d - r))
                .collect();
            out.push(FlatAdapterVec { layer: li, values });
        }
        Ok(out)
    }

    /// Penalty value (monitoring only).
    pub fn penalty(&self, model: &AdapterModel) -> f64 {
        let mut acc = 0.0;
        for li in 0..self.diag.len() {
            let delta = model.adapter_vec(li);
            for ((d, f), r) in delta.iter().zip(&self.diag[li]).zip(&self.ref_delta[li]) {
                acc += f * (d - r) * (d - r);
            }
        }
        self.lambda_ewc * acc
    }
}

/// Endless deterministic cycler over example indices: shuffles once per
/// wrap with its own substream.
#[derive(Clone, Debug)]
pub struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCycler {
    pub fn new(n: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchCycler { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            if self.pos >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// In-subspace drift `|V^T (delta_end - delta_start)|` relative to the
/// total drift, per layer. Property checks use this to verify that with
/// strict projection and no anchor, adapters stay out of the safety
/// subspace over a whole domain.
pub fn in_subspace_drift_ratio(
    sub: &SafetySubspace,
    delta_start: &[f64],
    delta_end: &[f64],
) -> Result<f64> {
    if delta_start.len() != delta_end.len() {
        return Err(Error::Shape("drift vectors differ in length".into()));
    }
    let diff: Vec<f64> = delta_end
        .iter()
        .zip(delta_start)
        .map(|(a, b)| a - b)
        .collect();
    let total = dot(&diff, &diff).sqrt();
    if total == 0.0 {
        return Ok(0.0);
    }
    let mut in_sub = 0.0;
    for j in 0..sub.rank() {
        let c = sub.basis.column(j);
        let coef = dot(&c, &diff);
        in_sub += coef * coef;
    }
    Ok(in_sub.sqrt() / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{norm, orthonormalize_columns, Matrix};
    use crate::model::ModelArch;
    use crate::osca::ProjectionMode;
    use crate::rng::{normal, substream};
    use crate::ssi::projection_apply;

    fn small_model(seed: u64) -> AdapterModel {
        let mut rng = substream(seed, "init");
        let arch = ModelArch {
            input: 6,
            hidden: 5,
            classes: 4,
            rank: 2,
            layers: 2,
        };
        AdapterModel::init(arch, &mut rng)
    }

    fn random_subspaces(model: &AdapterModel, k: usize, seed: u64) -> Vec<SafetySubspace> {
        (0..model.layers.len())
            .map(|li| {
                let dim = model.delta_dim(li);
                let mut rng = substream(seed + li as u64, "sub");
                let raw = Matrix::from_fn(dim, k, |_, _| normal(&mut rng));
                SafetySubspace {
                    layer: li,
                    basis: orthonormalize_columns(&raw).unwrap(),
                    eigenvalues: vec![1.0; k],
                    fisher_trace: 3.0,
                }
            })
            .collect()
    }

    fn random_batch(model: &AdapterModel, n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = substream(seed, "batch");
        (0..n)
            .map(|i| {
                (
                    (0..model.arch.input).map(|_| normal(&mut rng)).collect(),
                    i % model.arch.classes,
                )
            })
            .collect()
    }

    #[test]
    fn unconstrained_sgd_step_is_plain_descent() {
        let mut m1 = small_model(1);
        let mut m2 = m1.clone();
        let batch = random_batch(&m1, 4, 2);
        let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (&x[..], *y)).collect();
        let g = m1.grad_task_loss(&refs).unwrap();

        let mut engine = StepEngine::unconstrained(0.1, OptimizerConfig::Sgd);
        engine.step(&mut m1, &g, None, None).unwrap();
        m2.apply_update(&g, 0.1).unwrap();
        for li in 0..m1.layers.len() {
            assert_eq!(m1.adapter_vec(li), m2.adapter_vec(li));
        }
    }

    #[test]
    fn strict_projection_keeps_updates_out_of_subspace() {
        let mut model = small_model(3);
        let subs = random_subspaces(&model, 3, 10);
        let policy = ProjectionPolicy::new(0.5, ProjectionMode::Strict).unwrap();
        let alphas = StepEngine::alphas_for(&subs, &policy, false).unwrap();
        let mut engine =
            StepEngine::projected(subs.clone(), alphas, 0.05, OptimizerConfig::Sgd).unwrap();

        let starts: Vec<Vec<f64>> = (0..model.layers.len())
            .map(|li| model.adapter_vec(li))
            .collect();
        for step in 0..200 {
            let batch = random_batch(&model, 8, 100 + step);
            let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (&x[..], *y)).collect();
            let g = model.grad_task_loss(&refs).unwrap();
            engine.step(&mut model, &g, None, None).unwrap();
        }
        for li in 0..model.layers.len() {
            let end = model.adapter_vec(li);
            let ratio = in_subspace_drift_ratio(&subs[li], &starts[li], &end).unwrap();
            assert!(ratio <= 1e-6, "layer {li}: in-subspace drift ratio {ratio}");
        }
    }

    #[test]
    fn anchor_path_bypasses_strict_projection() {
        let mut model = small_model(4);
        let subs = random_subspaces(&model, 2, 20);
        let alphas = vec![0.0; subs.len()];
        let mut engine =
            StepEngine::projected(subs.clone(), alphas, 1.0, OptimizerConfig::Sgd).unwrap();

        // Anchor gradient pointing straight into the safety subspace.
        let anchor: Vec<FlatAdapterVec> = subs
            .iter()
            .map(|s| FlatAdapterVec {
                layer: s.layer,
                values: s.basis.column(0),
            })
            .collect();
        let zeros: Vec<FlatAdapterVec> = (0..model.layers.len())
            .map(|li| FlatAdapterVec::zeros(li, model.delta_dim(li)))
            .collect();
        let before: Vec<Vec<f64>> = (0..model.layers.len())
            .map(|li| model.adapter_vec(li))
            .collect();
        engine
            .step(&mut model, &zeros, Some(&anchor), None)
            .unwrap();
        for li in 0..model.layers.len() {
            let after = model.adapter_vec(li);
            let diff: Vec<f64> = after.iter().zip(&before[li]).map(|(a, b)| a - b).collect();
            let moved = projection_apply(&subs[li], &diff).unwrap();
            assert!(norm(&moved) > 1e-12, "anchor signal was projected away");
        }
    }

    #[test]
    fn adamw_projected_direction_stays_orthogonal() {
        let mut model = small_model(5);
        let subs = random_subspaces(&model, 2, 30);
        let alphas = vec![0.0; subs.len()];
        let mut engine = StepEngine::projected(
            subs.clone(),
            alphas,
            0.01,
            OptimizerConfig::Adamw {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )
        .unwrap();
        let starts: Vec<Vec<f64>> = (0..model.layers.len())
            .map(|li| model.adapter_vec(li))
            .collect();
        for step in 0..50 {
            let batch = random_batch(&model, 4, 200 + step);
            let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (&x[..], *y)).collect();
            let g = model.grad_task_loss(&refs).unwrap();
            engine.step(&mut model, &g, None, None).unwrap();
        }
        for li in 0..model.layers.len() {
            let ratio =
                in_subspace_drift_ratio(&subs[li], &starts[li], &model.adapter_vec(li)).unwrap();
            assert!(ratio <= 1e-6, "layer {li}: drift ratio {ratio}");
        }
    }

    #[test]
    fn trace_normalization_rescales_alphas() {
        let model = small_model(6);
        let mut subs = random_subspaces(&model, 2, 40);
        subs[0].fisher_trace = 4.0;
        subs[1].fisher_trace = 2.0;
        let policy = ProjectionPolicy::new(0.5, ProjectionMode::Adaptive).unwrap();
        let raw = StepEngine::alphas_for(&subs, &policy, false).unwrap();
        assert_eq!(raw, vec![0.0, 0.0]); // both saturate strict
        let normed = StepEngine::alphas_for(&subs, &policy, true).unwrap();
        assert!((normed[0] - 0.5).abs() < 1e-12); // trace 1.0 after normalization
        assert!((normed[1] - 0.75).abs() < 1e-12); // trace 0.5
    }

    #[test]
    fn ewc_gradient_matches_quadratic_penalty_differences() {
        let model = small_model(7);
        let mut rng = substream(8, "ewc");
        let diag: Vec<Vec<f64>> = (0..model.layers.len())
            .map(|li| {
                (0..model.delta_dim(li))
                    .map(|_| normal(&mut rng).abs())
                    .collect()
            })
            .collect();
        let ref_delta: Vec<Vec<f64>> = (0..model.layers.len())
            .map(|li| model.adapter_vec(li))
            .collect();
        let mut moved = model.clone();
        for li in 0..moved.layers.len() {
            let mut v = moved.adapter_vec(li);
            for x in &mut v {
                *x += 0.1 * normal(&mut rng);
            }
            moved.set_adapter_vec(li, &v).unwrap();
        }
        let ewc = EwcState {
            lambda_ewc: 1.3,
            diag,
            ref_delta,
        };
        let g = ewc.grads(&moved).unwrap();
        let h = 1e-6;
        for li in 0..moved.layers.len() {
            let base = moved.adapter_vec(li);
            for idx in (0..base.len()).step_by(9) {
                let mut plus = moved.clone();
                let mut v = base.clone();
                v[idx] += h;
                plus.set_adapter_vec(li, &v).unwrap();
                let mut minus = moved.clone();
                v[idx] -= 2.0 * h;
                minus.set_adapter_vec(li, &v).unwrap();
                let fd = (ewc.penalty(&plus) - ewc.penalty(&minus)) / (2.0 * h);
                assert!((fd - g[li].values[idx]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_cycler_visits_everything_each_wrap() {
        let rng = substream(9, "cycler");
        let mut cycler = BatchCycler::new(10, rng);
        let first: Vec<usize> = cycler.next_batch(10);
        let mut sorted = first.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let second: Vec<usize> = cycler.next_batch(10);
        let mut sorted = second.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }
}
