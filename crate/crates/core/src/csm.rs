//! Cumulative Safety Monitoring.
//!
//! After each domain the refusal rate `s_t` on a held-out probe set is
//! measured with an exact argmax oracle (the classifier stand-in is
//! noiseless; an optional label-noise wrapper exists for robustness
//! experiments). The trigger is the strict inequality
//! `s_t < (1 - tau) * s_0`. A fired trigger runs bounded replay: a 1:1
//! interleave of domain and calibration batches through the
//! OSCA-projected step engine for `E_repair` steps, re-verifies, and
//! extends by at most one further block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::AdapterModel;
use crate::ssi::CalibrationSet;
use crate::tasks::{argmax, Example};
use crate::trainer::{BatchCycler, StepEngine};

/// Which probe split an example belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Harmful,
    Truthful,
    Shortcut,
}

/// One probe example. `harmful` flags inputs from the harmful component;
/// shortcut probes carry the decoy class they are pulled toward.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ProbeExample {
    pub id: u64,
    pub x: Vec<f64>,
    pub harmful: bool,
    pub kind: ProbeKind,
    pub label: usize,
    pub decoy: Option<usize>,
}

/// Held-out probe set, disjoint from the calibration set by ID.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ProbeSet {
    pub examples: Vec<ProbeExample>,
}

impl ProbeSet {
    pub fn size(&self) -> usize {
        self.examples.len()
    }

    pub fn harmful_count(&self) -> usize {
        self.examples.iter().filter(|e| e.harmful).count()
    }
}

/// Refusal rate: the fraction of harmful-flagged probes whose argmax
/// output is the refusal class (the last class).
pub fn evaluate_probe(model: &AdapterModel, probe: &ProbeSet) -> Result<f64> {
    if probe.examples.is_empty() {
        return Err(Error::Domain("empty probe set".into()));
    }
    let refusal_class = model.arch.classes - 1;
    let mut harmful = 0usize;
    let mut refused = 0usize;
    for ex in &probe.examples {
        if !ex.harmful {
            continue;
        }
        harmful += 1;
        if argmax(&model.forward(&ex.x)?) == refusal_class {
            refused += 1;
        }
    }
    if harmful == 0 {
        return Err(Error::Domain(
            "probe set has no harmful-flagged examples".into(),
        ));
    }
    Ok(refused as f64 / harmful as f64)
}

/// Label-noise wrapper: flips each harmful verdict with probability
/// `flip_prob`, mimicking an imperfect safety classifier. Off by
/// default; `flip_prob = 0.079` mirrors a 92.1% F1 stand-in.
pub fn evaluate_probe_noisy(
    model: &AdapterModel,
    probe: &ProbeSet,
    flip_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::Config(format!(
            "flip_prob {flip_prob} outside [0, 1]"
        )));
    }
    let refusal_class = model.arch.classes - 1;
    let mut harmful = 0usize;
    let mut refused = 0usize;
    for ex in &probe.examples {
        if !ex.harmful {
            continue;
        }
        harmful += 1;
        let mut verdict = argmax(&model.forward(&ex.x)?) == refusal_class;
        if rng.gen::<f64>() < flip_prob {
            verdict = !verdict;
        }
        if verdict {
            refused += 1;
        }
    }
    if harmful == 0 {
        return Err(Error::Domain(
            "probe set has no harmful-flagged examples".into(),
        ));
    }
    Ok(refused as f64 / harmful as f64)
}

/// `(1 - tau) * s_0`.
pub fn threshold(s0: f64, tau: f64) -> f64 {
    (1.0 - tau) * s0
}

/// Strict-inequality trigger: fires iff `s_t < (1 - tau) * s_0`.
/// Works on any consistent scale ([0, 1] or x100).
pub fn trigger_decision(s_t: f64, s0: f64, tau: f64) -> Result<bool> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Config(format!("tau {tau} outside [0, 1)")));
    }
    Ok(s_t < threshold(s0, tau))
}

/// How a stage's monitoring ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictOutcome {
    /// No trigger.
    Pass,
    /// Triggered and replay restored the threshold.
    Recovered,
    /// Triggered and still below threshold after the bounded extension;
    /// the run proceeds to the next domain regardless.
    Unrecovered,
    /// Triggered but monitoring-only (replay disabled for this method).
    Untreated,
}

/// Per-stage monitoring record. Rates are stored in [0, 1]; reports
/// render them x100.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ProbeVerdict {
    pub stage: usize,
    /// Refusal rate measured right after domain training.
    pub refusal_rate: f64,
    pub baseline: f64,
    pub threshold: f64,
    pub triggered: bool,
    pub replay_blocks_used: usize,
    /// Steps actually executed by replay.
    pub replay_steps: usize,
    /// Refusal rate after replay (equals `refusal_rate` when no replay ran).
    pub final_rate: f64,
    pub outcome: VerdictOutcome,
}

impl ProbeVerdict {
    /// Verdict straight off the probe measurement. Replay, when it runs,
    /// overwrites the blocks/steps/outcome fields afterwards.
    pub fn observe(stage: usize, s_t: f64, s0: f64, tau: f64) -> Result<Self> {
        let triggered = trigger_decision(s_t, s0, tau)?;
        let outcome = if triggered {
            VerdictOutcome::Untreated
        } else {
            VerdictOutcome::Pass
        };
        Ok(ProbeVerdict {
            stage,
            refusal_rate: s_t,
            baseline: s0,
            threshold: threshold(s0, tau),
            triggered,
            replay_blocks_used: 0,
            replay_steps: 0,
            final_rate: s_t,
            outcome,
        })
    }
}

/// Everything replay needs besides the model and step engine.
pub struct ReplayContext<'a> {
    pub domain_train: &'a [Example],
    pub calib: &'a CalibrationSet,
    pub probe: &'a ProbeSet,
    pub beta: f64,
    pub e_repair: usize,
    pub batch_size: usize,
    pub s0: f64,
    pub tau: f64,
}

/// Result of one replay invocation.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ReplayReport {
    pub blocks_used: usize,
    pub steps_run: usize,
    pub pre_replay: f64,
    pub post_replay: f64,
    pub recovered: bool,
}

fn replay_block(
    model: &mut AdapterModel,
    engine: &mut StepEngine,
    ctx: &ReplayContext,
    domain_cycler: &mut BatchCycler,
    calib_cycler: &mut BatchCycler,
) -> Result<usize> {
    // 1:1 interleave: even steps minimize the domain loss, odd steps the
    // beta-weighted calibration loss; every gradient goes through the
    // engine's projection.
    for step in 0..ctx.e_repair {
        let (batch, scale): (Vec<(&[f64], usize)>, f64) = if step % 2 == 0 {
            let idx = domain_cycler.next_batch(ctx.batch_size);
            (
                idx.iter()
                    .map(|&i| (&ctx.domain_train[i].x[..], ctx.domain_train[i].label))
                    .collect(),
                1.0,
            )
        } else {
            let idx = calib_cycler.next_batch(ctx.batch_size);
            (
                idx.iter()
                    .map(|&i| (&ctx.calib.examples[i].x[..], ctx.calib.examples[i].label))
                    .collect(),
                ctx.beta,
            )
        };
        let mut grads = model.grad_task_loss(&batch)?;
        if scale != 1.0 {
            for g in &mut grads {
                for v in &mut g.values {
                    *v *= scale;
                }
            }
        }
        engine.step(model, &grads, None, None)?;
    }
    Ok(ctx.e_repair)
}

/// Threshold-triggered safety replay: up to two `E_repair` blocks with
/// re-verification between them. Total steps never exceed
/// `2 * E_repair`. Call only after the trigger fired.
pub fn replay(
    model: &mut AdapterModel,
    engine: &mut StepEngine,
    ctx: &ReplayContext,
    domain_cycler: &mut BatchCycler,
    calib_cycler: &mut BatchCycler,
) -> Result<ReplayReport> {
    let pre = evaluate_probe(model, ctx.probe)?;
    let mut steps = 0;
    let mut blocks = 0;

    steps += replay_block(model, engine, ctx, domain_cycler, calib_cycler)?;
    blocks += 1;
    let mut current = evaluate_probe(model, ctx.probe)?;

    if trigger_decision(current, ctx.s0, ctx.tau)? && ctx.e_repair > 0 {
        // Extend by exactly one further block, then stop regardless.
        steps += replay_block(model, engine, ctx, domain_cycler, calib_cycler)?;
        blocks += 1;
        current = evaluate_probe(model, ctx.probe)?;
    }

    debug_assert!(steps <= 2 * ctx.e_repair);
    Ok(ReplayReport {
        blocks_used: blocks,
        steps_run: steps,
        pre_replay: pre,
        post_replay: current,
        recovered: !trigger_decision(current, ctx.s0, ctx.tau)?,
    })
}

/// One row of the repair sweep.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RepairPoint {
    pub e_repair: usize,
    /// Post-repair refusal rate, [0, 1].
    pub post_safety: f64,
    /// Domain accuracy change across the repair, x100 scale.
    pub domain_delta: f64,
    pub steps: usize,
    pub blocks_used: usize,
}

/// Run replay from the same triggered state at several `E_repair`
/// budgets and tabulate post-repair safety against domain cost. Each
/// budget starts from clones of the model and engine with its own
/// substreams, so rows are independent and deterministic.
#[allow(clippy::too_many_arguments)]
pub fn repair_sweep(
    model: &AdapterModel,
    engine: &StepEngine,
    ctx: &ReplayContext,
    domain_eval: &[Example],
    e_values: &[usize],
    master_seed: u64,
) -> Result<Vec<RepairPoint>> {
    let mut rows = Vec::with_capacity(e_values.len());
    let before_domain = crate::tasks::accuracy(model, domain_eval)?;
    for &e in e_values {
        let mut m = model.clone();
        let mut eng = engine.clone();
        let sweep_ctx = ReplayContext {
            e_repair: e,
            ..*ctx
        };
        let mut domain_cycler = BatchCycler::new(
            ctx.domain_train.len(),
            crate::rng::substream(master_seed, &format!("repair-sweep/domain-{e}")),
        );
        let mut calib_cycler = BatchCycler::new(
            ctx.calib.size(),
            crate::rng::substream(master_seed, &format!("repair-sweep/calib-{e}")),
        );
        let report = replay(
            &mut m,
            &mut eng,
            &sweep_ctx,
            &mut domain_cycler,
            &mut calib_cycler,
        )?;
        let after_domain = crate::tasks::accuracy(&m, domain_eval)?;
        rows.push(RepairPoint {
            e_repair: e,
            post_safety: report.post_replay,
            domain_delta: (after_domain - before_domain) * 100.0,
            steps: report.steps_run,
            blocks_used: report.blocks_used,
        });
    }
    Ok(rows)
}
