//! End-to-end orchestration: configuration, the per-seed pipeline run,
//! ablation grids, and log analysis.
//!
//! A run executes the full sequence: suite generation, base alignment,
//! initial subspace identification, per-domain constrained training with
//! anchor gradients, probe monitoring with conditional bounded replay,
//! and the incremental subspace merge. Every stage appends to a
//! schema-versioned [`RunLog`] that is sufficient to regenerate all
//! reports without retraining; in reproducibility mode two runs with the
//! same config produce byte-identical logs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::analytics::{
    compare_subspaces, per_step_slope, random_subspace_null, render_csv, TrajectoryRecord,
};
use crate::anchor::{anchor_loss_and_grad, AnchorReference, KlDirection};
use crate::csm::{
    evaluate_probe, evaluate_probe_noisy, replay, ProbeVerdict, ReplayContext, VerdictOutcome,
};
use crate::error::{Error, Result};
use crate::linalg::sym_eig;
use crate::model::{AdapterModel, ModelArch};
use crate::osca::{ProjectionMode, ProjectionPolicy};
use crate::rng::substream;
use crate::ssi::{
    accumulate_fisher, eigen_spectrum_report, mean_squared_grad_norm, merge_subspaces,
    select_basis, SafetySubspace, SpectrumReport,
};
use crate::tasks::{
    accuracy, align_base, generate_suite, safety_components, AlignParams, SuiteConfig, TaskSuite,
};
use crate::trainer::{BatchCycler, EwcState, OptimizerConfig, StepEngine};

pub const RUN_LOG_SCHEMA_VERSION: u32 = 1;

/// Training method. The ablation rows build on each other: SSI-only
/// computes subspaces without projecting, strict/adaptive OSCA project,
/// `+anchor` adds the KL anchor, and `+csm` (equivalently `safeanchor`)
/// adds monitoring with replay. `no-incremental-ssi` is the full method
/// with the post-domain subspace merge disabled.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub enum Method {
    #[serde(rename = "unconstrained")]
    Unconstrained,
    #[serde(rename = "fisher-penalty")]
    FisherPenalty,
    #[serde(rename = "interleave")]
    Interleave,
    #[serde(rename = "ssi-only")]
    SsiOnly,
    #[serde(rename = "strict-osca")]
    StrictOsca,
    #[serde(rename = "adaptive-osca")]
    AdaptiveOsca,
    #[serde(rename = "+anchor", alias = "anchor")]
    Anchor,
    #[serde(rename = "+csm", alias = "csm")]
    Csm,
    #[serde(rename = "safeanchor")]
    SafeAnchor,
    #[serde(rename = "no-incremental-ssi")]
    NoIncrementalSsi,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Unconstrained => "unconstrained",
            Method::FisherPenalty => "fisher-penalty",
            Method::Interleave => "interleave",
            Method::SsiOnly => "ssi-only",
            Method::StrictOsca => "strict-osca",
            Method::AdaptiveOsca => "adaptive-osca",
            Method::Anchor => "+anchor",
            Method::Csm => "+csm",
            Method::SafeAnchor => "safeanchor",
            Method::NoIncrementalSsi => "no-incremental-ssi",
        }
    }

    /// Safe name for file stems.
    pub fn slug(self) -> &'static str {
        match self {
            Method::Anchor => "anchor",
            Method::Csm => "csm",
            other => other.label(),
        }
    }

    pub fn uses_ssi(self) -> bool {
        !matches!(
            self,
            Method::Unconstrained | Method::FisherPenalty | Method::Interleave
        )
    }

    pub fn projection_mode(self) -> ProjectionMode {
        match self {
            Method::StrictOsca => ProjectionMode::Strict,
            Method::AdaptiveOsca
            | Method::Anchor
            | Method::Csm
            | Method::SafeAnchor
            | Method::NoIncrementalSsi => ProjectionMode::Adaptive,
            _ => ProjectionMode::Off,
        }
    }

    pub fn uses_anchor(self) -> bool {
        matches!(
            self,
            Method::Anchor | Method::Csm | Method::SafeAnchor | Method::NoIncrementalSsi
        )
    }

    pub fn uses_csm(self) -> bool {
        matches!(
            self,
            Method::Csm | Method::SafeAnchor | Method::NoIncrementalSsi
        )
    }

    pub fn incremental_update(self) -> bool {
        self.uses_ssi() && self != Method::NoIncrementalSsi
    }

    /// The seven ablation rows, baseline first.
    pub fn table_rows() -> Vec<Method> {
        vec![
            Method::Unconstrained,
            Method::SsiOnly,
            Method::StrictOsca,
            Method::AdaptiveOsca,
            Method::Anchor,
            Method::SafeAnchor,
            Method::NoIncrementalSsi,
        ]
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconstrained" => Ok(Method::Unconstrained),
            "fisher-penalty" => Ok(Method::FisherPenalty),
            "interleave" => Ok(Method::Interleave),
            "ssi-only" => Ok(Method::SsiOnly),
            "strict-osca" => Ok(Method::StrictOsca),
            "adaptive-osca" => Ok(Method::AdaptiveOsca),
            "+anchor" | "anchor" => Ok(Method::Anchor),
            "+csm" | "csm" => Ok(Method::Csm),
            "safeanchor" => Ok(Method::SafeAnchor),
            "no-incremental-ssi" => Ok(Method::NoIncrementalSsi),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Full run configuration. Defaults mirror the standard hyperparameters:
/// `rho = 0.90`, `tau = 0.05`, `gamma = 0.1`, `lambda = 0.5`,
/// `beta = 1.0`, `E_repair = 200`, `N_s = 500`, batch 16, 3 epochs over
/// 3 domains, 5 seeds.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: Method,
    pub rho: f64,
    pub tau: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub e_repair: usize,
    /// Calibration set size N_s.
    pub n_s: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of sequential domains T.
    pub domains: usize,
    /// Lexicographic permutation index over the T domain tasks.
    pub ordering: usize,
    pub seeds: Vec<u64>,
    /// Byte-identical logs when on; wall-clock timings are omitted.
    pub reproducible: bool,
    pub anchor_batch: usize,
    /// Compute the anchor gradient on the full calibration set each step.
    pub anchor_full_set: bool,
    /// Divide layer traces by the max layer trace before the relaxation
    /// formula.
    pub trace_normalize: bool,
    pub kl_direction: KlDirection,
    pub optimizer: OptimizerConfig,
    /// EWC-style baseline strength (free knob; no published default).
    pub lambda_ewc: f64,
    /// Safety fraction of the interleaving baseline's training stream.
    pub interleave_ratio: f64,
    /// Optional probe label-noise rate (classifier stand-in imperfection).
    pub probe_noise: Option<f64>,
    pub arch: ModelArch,
    pub suite: SuiteConfig,
    pub align: AlignParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::SafeAnchor,
            rho: 0.90,
            tau: 0.05,
            gamma: 0.1,
            lambda: 0.5,
            beta: 1.0,
            e_repair: 200,
            n_s: 500,
            learning_rate: 0.01,
            epochs: 3,
            batch_size: 16,
            domains: 3,
            ordering: 0,
            seeds: vec![0, 1, 2, 3, 4],
            reproducible: true,
            anchor_batch: 16,
            anchor_full_set: false,
            trace_normalize: false,
            kl_direction: KlDirection::Forward,
            optimizer: OptimizerConfig::Sgd,
            lambda_ewc: 1.0,
            interleave_ratio: 0.10,
            probe_noise: None,
            arch: ModelArch::default(),
            suite: SuiteConfig::default(),
            align: AlignParams::default(),
        }
    }
}

impl RunConfig {
    /// Normalize derived fields and validate ranges. The returned config
    /// is what run logs embed.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = self.clone();
        cfg.suite.calib_size = cfg.n_s;
        if cfg.n_s == 0 {
            return Err(Error::Config("N_s must be >= 1".into()));
        }
        if !(cfg.rho > 0.0 && cfg.rho <= 1.0) {
            return Err(Error::Config(format!("rho {} outside (0, 1]", cfg.rho)));
        }
        if !(0.0..1.0).contains(&cfg.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1)", cfg.tau)));
        }
        if cfg.domains == 0 {
            return Err(Error::Config("need at least one domain".into()));
        }
        if cfg.batch_size == 0 || cfg.anchor_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&cfg.interleave_ratio) {
            return Err(Error::Config("interleave_ratio outside [0, 1)".into()));
        }
        ordering_permutation(cfg.domains, cfg.ordering)?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.resolve()
    }
}

/// `id`-th lexicographic permutation of `0..t`.
pub fn ordering_permutation(t: usize, id: usize) -> Result<Vec<usize>> {
    let mut fact = 1usize;
    for i in 1..=t {
        fact = fact.saturating_mul(i);
    }
    if id >= fact {
        return Err(Error::Config(format!(
            "ordering {id} out of range for {t} domains ({fact} permutations)"
        )));
    }
    let mut pool: Vec<usize> = (0..t).collect();
    let mut rem = id;
    let mut out = Vec::with_capacity(t);
    for i in (1..=t).rev() {
        fact /= i;
        let idx = rem / fact;
        rem %= fact;
        out.push(pool.remove(idx));
    }
    Ok(out)
}

/// PSD and trace cross-checks of one accumulated Fisher.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct FisherCheck {
    pub stage: usize,
    pub layer: usize,
    /// Smallest eigenvalue; absent when the stage only needed the
    /// diagonal (the Fisher-penalty baseline).
    pub min_eigenvalue: Option<f64>,
    /// Trace read off the accumulated matrix.
    pub trace: f64,
    /// Independent route: mean squared gradient norm.
    pub mean_squared_grad_norm: f64,
    pub trace_rel_err: f64,
}

/// Subspace drift between two stages, per layer, plus layer-averaged
/// rows (`layer = None`).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct StabilityRecord {
    pub transition: String,
    pub layer: Option<usize>,
    pub mean_cos: f64,
    pub grassmannian: f64,
    pub rank_left: usize,
    pub rank_right: usize,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SpectrumRecord {
    pub stage: usize,
    pub layer: usize,
    pub report: SpectrumReport,
}

/// Pointer to a serialized subspace snapshot written next to the log.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SubspaceRef {
    pub stage: usize,
    pub layer: usize,
    pub file: String,
    pub rank: usize,
    pub ambient_dim: usize,
}

/// One adaptation stage: trajectory scores, the monitoring verdict, and
/// the per-layer relaxation coefficients in force.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct StageRecord {
    pub task_index: usize,
    pub trajectory: TrajectoryRecord,
    pub verdict: ProbeVerdict,
    pub alphas: Vec<f64>,
}

/// Complete, replayable record of one pipeline run.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RunLog {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    pub config: RunConfig,
    /// Task indices in training order.
    pub ordering: Vec<usize>,
    pub align_epochs: usize,
    pub baseline: TrajectoryRecord,
    pub stages: Vec<StageRecord>,
    pub fisher_checks: Vec<FisherCheck>,
    pub stability: Vec<StabilityRecord>,
    pub spectra: Vec<SpectrumRecord>,
    pub subspace_refs: Vec<SubspaceRef>,
    pub base_checksum_start: u64,
    pub base_checksum_end: u64,
    /// Per-phase wall-clock seconds; omitted in reproducibility mode.
    pub timing: Option<BTreeMap<String, f64>>,
}

impl RunLog {
    /// Refusal-rate series [s_0, s_1, ..., s_T] on the x100 scale.
    pub fn refusal_series(&self) -> Vec<f64> {
        let mut out = vec![self.baseline.refusal * 100.0];
        out.extend(self.stages.iter().map(|s| s.trajectory.refusal * 100.0));
        out
    }

    /// Composite-safety series on the x100 scale.
    pub fn composite_series(&self) -> Vec<f64> {
        let mut out = vec![self.baseline.composite];
        out.extend(self.stages.iter().map(|s| s.trajectory.composite));
        out
    }

    pub fn final_stage(&self) -> &TrajectoryRecord {
        self.stages
            .last()
            .map(|s| &s.trajectory)
            .unwrap_or(&self.baseline)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_file(path: &Path) -> Result<RunLog> {
        let log: RunLog = serde_json::from_slice(&std::fs::read(path)?)?;
        if log.schema_version > RUN_LOG_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "run log schema {} is newer than supported {}",
                log.schema_version, RUN_LOG_SCHEMA_VERSION
            )));
        }
        Ok(log)
    }
}

/// A finished run: the log plus in-memory artifacts (subspace snapshots
/// and the final model) ready to be written next to it.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub log: RunLog,
    /// `(file name, subspace)` pairs matching `log.subspace_refs`.
    pub subspaces: Vec<(String, SafetySubspace)>,
    pub final_model: AdapterModel,
    pub stem: String,
}

impl RunArtifacts {
    /// Write the log, subspace snapshots, and final model checkpoint.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir)?;
        let log_path = dir.join(format!("{}.json", self.stem));
        std::fs::write(&log_path, self.log.to_json()?)?;
        for (name, sub) in &self.subspaces {
            sub.save(&dir.join(name))?;
        }
        self.final_model
            .save(&dir.join(format!("{}-model.bin", self.stem)))?;
        Ok(log_path)
    }
}

struct PhaseClock {
    enabled: bool,
    acc: BTreeMap<String, f64>,
}

impl PhaseClock {
    fn new(enabled: bool) -> Self {
        PhaseClock {
            enabled,
            acc: BTreeMap::new(),
        }
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        if !self.enabled {
            return f();
        }
        let start = Instant::now();
        let out = f()?;
        *self.acc.entry(phase.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64();
        Ok(out)
    }

    fn into_map(self) -> Option<BTreeMap<String, f64>> {
        if self.enabled {
            Some(self.acc)
        } else {
            None
        }
    }
}

fn compute_subspaces(
    model: &AdapterModel,
    suite: &TaskSuite,
    rho: f64,
    stage: usize,
    checks: &mut Vec<FisherCheck>,
    spectra: &mut Vec<SpectrumRecord>,
) -> Result<Vec<SafetySubspace>> {
    let mut subs = Vec::with_capacity(model.layers.len());
    for layer in 0..model.layers.len() {
        let f = accumulate_fisher(model, &suite.calib, layer)?;
        let trace: f64 = (0..f.rows()).map(|i| f.get(i, i)).sum();
        let msgn = mean_squared_grad_norm(model, &suite.calib, layer)?;
        let rel = (trace - msgn).abs() / msgn.abs().max(1e-300);
        if rel > 1e-6 {
            return Err(Error::Invariant(format!(
                "fisher trace != mean squared grad norm at stage {stage} layer {layer} (rel {rel:.3e})"
            )));
        }
        let eig = sym_eig(&f)?;
        let min_eig = eig.eigenvalues.last().copied().unwrap_or(0.0);
        if min_eig < -1e-6 {
            return Err(Error::Invariant(format!(
                "fisher not PSD at stage {stage} layer {layer} (min eig {min_eig:.3e})"
            )));
        }
        checks.push(FisherCheck {
            stage,
            layer,
            min_eigenvalue: Some(min_eig),
            trace,
            mean_squared_grad_norm: msgn,
            trace_rel_err: rel,
        });
        spectra.push(SpectrumRecord {
            stage,
            layer,
            report: eigen_spectrum_report(&eig),
        });
        subs.push(select_basis(&eig, rho, layer)?);
    }
    Ok(subs)
}

fn ewc_state(
    model: &AdapterModel,
    suite: &TaskSuite,
    lambda_ewc: f64,
    stage: usize,
    checks: &mut Vec<FisherCheck>,
) -> Result<EwcState> {
    let mut diag = Vec::with_capacity(model.layers.len());
    let mut ref_delta = Vec::with_capacity(model.layers.len());
    for layer in 0..model.layers.len() {
        // Diagonal from the same accumulator as SSI.
        let f = accumulate_fisher(model, &suite.calib, layer)?;
        let trace: f64 = (0..f.rows()).map(|i| f.get(i, i)).sum();
        let msgn = mean_squared_grad_norm(model, &suite.calib, layer)?;
        let rel = (trace - msgn).abs() / msgn.abs().max(1e-300);
        checks.push(FisherCheck {
            stage,
            layer,
            min_eigenvalue: None,
            trace,
            mean_squared_grad_norm: msgn,
            trace_rel_err: rel,
        });
        diag.push((0..f.rows()).map(|i| f.get(i, i)).collect());
        ref_delta.push(model.adapter_vec(layer));
    }
    Ok(EwcState {
        lambda_ewc,
        diag,
        ref_delta,
    })
}

fn stage_trajectory(
    model: &AdapterModel,
    suite: &TaskSuite,
    stage: usize,
    label: String,
) -> Result<TrajectoryRecord> {
    let safety = safety_components(model, &suite.probe)?;
    let domain_scores: Vec<f64> = suite
        .domains
        .iter()
        .map(|d| accuracy(model, &d.eval))
        .collect::<Result<_>>()?;
    let domain_mean = domain_scores.iter().sum::<f64>() / domain_scores.len() as f64;
    let general = accuracy(model, &suite.general_eval)?;
    Ok(TrajectoryRecord {
        stage,
        label,
        refusal: safety.refusal,
        truth: safety.truth,
        bias: safety.bias,
        composite: safety.composite,
        domain_scores,
        domain_mean,
        general,
    })
}

fn probe_rate(
    model: &AdapterModel,
    suite: &TaskSuite,
    cfg: &RunConfig,
    seed: u64,
    stage: usize,
) -> Result<f64> {
    match cfg.probe_noise {
        None => evaluate_probe(model, &suite.probe),
        Some(p) => {
            let mut rng = substream(seed, &format!("probe-noise/stage-{stage}"));
            evaluate_probe_noisy(model, &suite.probe, p, &mut rng)
        }
    }
}

enum StreamItem {
    Domain(usize),
    Calib(usize),
}

/// Execute one pipeline run for one seed.
pub fn run(config: &RunConfig, seed: u64) -> Result<RunArtifacts> {
    let cfg = config.resolve()?;
    let method = cfg.method;
    let mut clock = PhaseClock::new(!cfg.reproducible);

    let suite = clock.time("suite", || {
        generate_suite(seed, &cfg.suite, cfg.arch, cfg.domains)
    })?;
    let ordering = ordering_permutation(cfg.domains, cfg.ordering)?;

    // Alignment phase: train and freeze the base.
    let mut init_rng = substream(seed, "init");
    let fresh = AdapterModel::init(cfg.arch, &mut init_rng);
    let align = clock.time("align", || align_base(fresh, &suite, &cfg.align, seed))?;
    let mut model = align.model;
    let base_checksum_start = align.base_checksum;

    let s0 = probe_rate(&model, &suite, &cfg, seed, 0)?;
    let baseline = TrajectoryRecord {
        stage: 0,
        label: "base".to_string(),
        refusal: s0,
        truth: align.safety.truth,
        bias: align.safety.bias,
        composite: crate::tasks::composite_safety(
            s0 * 100.0,
            align.safety.truth * 100.0,
            align.safety.bias * 100.0,
        )?,
        domain_scores: align.domain_scores.clone(),
        domain_mean: align.domain_mean,
        general: align.general,
    };

    let mut fisher_checks = Vec::new();
    let mut spectra = Vec::new();
    let mut stability = Vec::new();
    let mut subspace_archive: Vec<(String, SafetySubspace)> = Vec::new();
    let mut subspace_refs = Vec::new();
    let stem = format!("run-{}-seed{}", method.slug(), seed);

    // Initial SSI on the aligned model.
    let mut subspaces: Option<Vec<SafetySubspace>> = if method.uses_ssi() {
        let subs = clock.time("ssi", || {
            compute_subspaces(&model, &suite, cfg.rho, 0, &mut fisher_checks, &mut spectra)
        })?;
        snapshot_subspaces(&stem, 0, &subs, &mut subspace_archive, &mut subspace_refs);
        Some(subs)
    } else {
        None
    };
    let initial_subspaces = subspaces.clone();

    let policy = ProjectionPolicy::new(cfg.lambda, method.projection_mode())?;
    let mut engine = StepEngine::unconstrained(cfg.learning_rate, cfg.optimizer);
    let mut stages: Vec<StageRecord> = Vec::with_capacity(cfg.domains);

    for (stage_idx, &task_index) in ordering.iter().enumerate() {
        let stage = stage_idx + 1;
        let domain = &suite.domains[task_index];

        // Projection state for this domain; alpha is fixed within it
        // because the Fisher (hence the trace) is fixed at the boundary.
        let alphas: Vec<f64> = match (&subspaces, method.projection_mode()) {
            (Some(subs), ProjectionMode::Strict | ProjectionMode::Adaptive) => {
                let a = StepEngine::alphas_for(subs, &policy, cfg.trace_normalize)?;
                engine.set_projection(subs.clone(), a.clone())?;
                a
            }
            _ => {
                engine.set_projection(Vec::new(), Vec::new())?;
                vec![1.0; model.layers.len()]
            }
        };

        // Anchor reference: snapshot of the previous checkpoint's outputs.
        let anchor_ref = if method.uses_anchor() && cfg.gamma > 0.0 {
            Some(AnchorReference::snapshot(&model, &suite.calib.examples)?)
        } else {
            None
        };
        let mut anchor_cycler = BatchCycler::new(
            suite.calib.size(),
            substream(seed, &format!("anchor/stage-{stage}")),
        );

        let ewc = if method == Method::FisherPenalty {
            Some(clock.time("ssi", || {
                ewc_state(&model, &suite, cfg.lambda_ewc, stage, &mut fisher_checks)
            })?)
        } else {
            None
        };

        // Domain training.
        clock.time("train", || {
            let mut order_rng = substream(seed, &format!("batch/stage-{stage}"));
            let mut interleave_cycler = BatchCycler::new(
                suite.calib.size(),
                substream(seed, &format!("interleave/stage-{stage}")),
            );
            for _epoch in 0..cfg.epochs {
                let stream = build_stream(
                    domain.train.len(),
                    method == Method::Interleave,
                    cfg.interleave_ratio,
                    &mut order_rng,
                    &mut interleave_cycler,
                );
                for chunk in stream.chunks(cfg.batch_size) {
                    let batch: Vec<(&[f64], usize)> = chunk
                        .iter()
                        .map(|item| match item {
                            StreamItem::Domain(i) => {
                                (&domain.train[*i].x[..], domain.train[*i].label)
                            }
                            StreamItem::Calib(i) => (
                                &suite.calib.examples[*i].x[..],
                                suite.calib.examples[*i].label,
                            ),
                        })
                        .collect();
                    let task_grads = model.grad_task_loss(&batch)?;
                    let anchor_grads = match &anchor_ref {
                        Some(reference) => {
                            let ids = if cfg.anchor_full_set {
                                (0..suite.calib.size()).collect::<Vec<_>>()
                            } else {
                                anchor_cycler.next_batch(cfg.anchor_batch)
                            };
                            let batch: Vec<&crate::tasks::Example> =
                                ids.iter().map(|&i| &suite.calib.examples[i]).collect();
                            let (_, grads) = anchor_loss_and_grad(
                                &model,
                                reference,
                                &batch,
                                cfg.gamma,
                                cfg.kl_direction,
                            )?;
                            Some(grads)
                        }
                        None => None,
                    };
                    let ewc_grads = match &ewc {
                        Some(state) => Some(state.grads(&model)?),
                        None => None,
                    };
                    engine.step(
                        &mut model,
                        &task_grads,
                        anchor_grads.as_deref(),
                        ewc_grads.as_deref(),
                    )?;
                }
            }
            Ok(())
        })?;

        // Probe and conditional replay.
        let s_t = clock.time("probe", || probe_rate(&model, &suite, &cfg, seed, stage))?;
        let mut verdict = ProbeVerdict::observe(stage, s_t, s0, cfg.tau)?;
        if verdict.triggered && method.uses_csm() {
            let report = clock.time("replay", || {
                let ctx = ReplayContext {
                    domain_train: &domain.train,
                    calib: &suite.calib,
                    probe: &suite.probe,
                    beta: cfg.beta,
                    e_repair: cfg.e_repair,
                    batch_size: cfg.batch_size,
                    s0,
                    tau: cfg.tau,
                };
                let mut domain_cycler = BatchCycler::new(
                    domain.train.len(),
                    substream(seed, &format!("replay/stage-{stage}/domain")),
                );
                let mut calib_cycler = BatchCycler::new(
                    suite.calib.size(),
                    substream(seed, &format!("replay/stage-{stage}/calib")),
                );
                replay(
                    &mut model,
                    &mut engine,
                    &ctx,
                    &mut domain_cycler,
                    &mut calib_cycler,
                )
            })?;
            if report.steps_run > 2 * cfg.e_repair {
                return Err(Error::Invariant(format!(
                    "replay ran {} steps, bound is {}",
                    report.steps_run,
                    2 * cfg.e_repair
                )));
            }
            verdict.replay_blocks_used = report.blocks_used;
            verdict.replay_steps = report.steps_run;
            verdict.final_rate = report.post_replay;
            verdict.outcome = if report.recovered {
                VerdictOutcome::Recovered
            } else {
                VerdictOutcome::Unrecovered
            };
        }

        // Stage scores reflect the post-replay model.
        let trajectory = clock.time("eval", || {
            stage_trajectory(&model, &suite, stage, format!("+d{task_index}"))
        })?;

        // Incremental subspace update (after monitoring, per the
        // algorithm's step order).
        if let Some(old) = subspaces.take() {
            let merged = if method.incremental_update() {
                let fresh = clock.time("ssi", || {
                    compute_subspaces(
                        &model,
                        &suite,
                        cfg.rho,
                        stage,
                        &mut fisher_checks,
                        &mut spectra,
                    )
                })?;
                record_stability(
                    &mut stability,
                    &old,
                    &fresh,
                    &format!("fresh:stage{}->stage{stage}", stage - 1),
                )?;
                let merged: Vec<SafetySubspace> = old
                    .iter()
                    .zip(&fresh)
                    .map(|(o, f)| merge_subspaces(o, f, cfg.rho))
                    .collect::<Result<_>>()?;
                merged
            } else {
                old.clone()
            };
            record_stability(
                &mut stability,
                &old,
                &merged,
                &format!("stage{}->stage{stage}", stage - 1),
            )?;
            snapshot_subspaces(
                &stem,
                stage,
                &merged,
                &mut subspace_archive,
                &mut subspace_refs,
            );
            subspaces = Some(merged);
        }

        stages.push(StageRecord {
            task_index,
            trajectory,
            verdict,
            alphas,
        });
    }

    // End-to-end drift row.
    if let (Some(first), Some(last)) = (&initial_subspaces, &subspaces) {
        record_stability(
            &mut stability,
            first,
            last,
            &format!("stage0->stage{}", cfg.domains),
        )?;
    }

    let base_checksum_end = model.base_checksum();
    if base_checksum_end != base_checksum_start {
        return Err(Error::Invariant(
            "frozen base weights changed during the run".into(),
        ));
    }

    let log = RunLog {
        schema_version: RUN_LOG_SCHEMA_VERSION,
        method,
        seed,
        config: cfg,
        ordering,
        align_epochs: align.epochs_run,
        baseline,
        stages,
        fisher_checks,
        stability,
        spectra,
        subspace_refs,
        base_checksum_start,
        base_checksum_end,
        timing: clock.into_map(),
    };
    Ok(RunArtifacts {
        log,
        subspaces: subspace_archive,
        final_model: model,
        stem,
    })
}

fn build_stream(
    n_domain: usize,
    interleave: bool,
    ratio: f64,
    order_rng: &mut rand_chacha::ChaCha8Rng,
    calib_cycler: &mut BatchCycler,
) -> Vec<StreamItem> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n_domain).collect();
    order.shuffle(order_rng);
    if !interleave || ratio <= 0.0 {
        return order.into_iter().map(StreamItem::Domain).collect();
    }
    // One safety example after every `group` domain examples makes the
    // stream's safety fraction ~= ratio.
    let group = ((1.0 - ratio) / ratio).round().max(1.0) as usize;
    let mut out = Vec::with_capacity(n_domain + n_domain / group + 1);
    for (i, idx) in order.into_iter().enumerate() {
        out.push(StreamItem::Domain(idx));
        if (i + 1) % group == 0 {
            out.push(StreamItem::Calib(calib_cycler.next_batch(1)[0]));
        }
    }
    out
}

fn snapshot_subspaces(
    stem: &str,
    stage: usize,
    subs: &[SafetySubspace],
    archive: &mut Vec<(String, SafetySubspace)>,
    refs: &mut Vec<SubspaceRef>,
) {
    for sub in subs {
        let file = format!("{stem}-stage{stage}-layer{}.sub", sub.layer);
        refs.push(SubspaceRef {
            stage,
            layer: sub.layer,
            file: file.clone(),
            rank: sub.rank(),
            ambient_dim: sub.ambient_dim(),
        });
        archive.push((file, sub.clone()));
    }
}

fn record_stability(
    records: &mut Vec<StabilityRecord>,
    left: &[SafetySubspace],
    right: &[SafetySubspace],
    transition: &str,
) -> Result<()> {
    let mut cos_acc = 0.0;
    let mut dg_acc = 0.0;
    let mut rl = 0;
    let mut rr = 0;
    let mut counted = 0;
    for (l, r) in left.iter().zip(right) {
        if l.rank() == 0 || r.rank() == 0 {
            continue;
        }
        let cmp = compare_subspaces(&l.basis, &r.basis)?;
        records.push(StabilityRecord {
            transition: transition.to_string(),
            layer: Some(l.layer),
            mean_cos: cmp.mean_cos,
            grassmannian: cmp.grassmannian,
            rank_left: cmp.rank_left,
            rank_right: cmp.rank_right,
        });
        cos_acc += cmp.mean_cos;
        dg_acc += cmp.grassmannian;
        rl += cmp.rank_left;
        rr += cmp.rank_right;
        counted += 1;
    }
    if counted > 0 {
        // Layer-averaged row with equal layer weights.
        records.push(StabilityRecord {
            transition: transition.to_string(),
            layer: None,
            mean_cos: cos_acc / counted as f64,
            grassmannian: dg_acc / counted as f64,
            rank_left: rl / counted,
            rank_right: rr / counted,
        });
    }
    Ok(())
}

// --- ablation grids --------------------------------------------------------

/// One-at-a-time ablation grid around a base config: the method rows
/// plus sensitivity axes over `rho`, `tau`, `N_s`, and domain orderings.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub base: RunConfig,
    /// Include the seven method rows.
    pub table_rows: bool,
    /// Explicit extra methods (e.g. fisher-penalty, interleave).
    pub methods: Vec<Method>,
    pub rho: Vec<f64>,
    pub tau: Vec<f64>,
    pub n_s: Vec<usize>,
    pub orderings: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            base: RunConfig::default(),
            table_rows: true,
            methods: Vec::new(),
            rho: Vec::new(),
            tau: Vec::new(),
            n_s: Vec::new(),
            orderings: Vec::new(),
        }
    }
}

impl GridConfig {
    pub fn from_json_file(path: &Path) -> Result<GridConfig> {
        let grid: GridConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        grid.base.resolve()?;
        Ok(grid)
    }

    /// Expand into `(axis, value, config)` cells; axes vary one at a time
    /// from the base config.
    pub fn cells(&self) -> Vec<(String, String, RunConfig)> {
        let mut out = Vec::new();
        if self.table_rows {
            for m in Method::table_rows() {
                let mut cfg = self.base.clone();
                cfg.method = m;
                out.push(("method".to_string(), m.label().to_string(), cfg));
            }
        }
        for &m in &self.methods {
            let mut cfg = self.base.clone();
            cfg.method = m;
            out.push(("method".to_string(), m.label().to_string(), cfg));
        }
        for &rho in &self.rho {
            let mut cfg = self.base.clone();
            cfg.rho = rho;
            out.push(("rho".to_string(), format!("{rho}"), cfg));
        }
        for &tau in &self.tau {
            let mut cfg = self.base.clone();
            cfg.tau = tau;
            out.push(("tau".to_string(), format!("{tau}"), cfg));
        }
        for &n_s in &self.n_s {
            let mut cfg = self.base.clone();
            cfg.n_s = n_s;
            out.push(("n_s".to_string(), format!("{n_s}"), cfg));
        }
        for &ordering in &self.orderings {
            let mut cfg = self.base.clone();
            cfg.ordering = ordering;
            out.push(("ordering".to_string(), format!("{ordering}"), cfg));
        }
        out
    }
}

/// Final scores of one grid run.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AblationCell {
    pub axis: String,
    pub value: String,
    pub method: Method,
    pub seed: u64,
    pub ordering: usize,
    pub s0: f64,
    /// Final refusal rate, x100.
    pub final_refusal: f64,
    pub final_composite: f64,
    /// Final mean domain accuracy, x100.
    pub final_domain: f64,
    pub final_general: f64,
    pub refusal_slope: f64,
    pub composite_slope: f64,
    pub triggers: usize,
}

impl AblationCell {
    fn from_log(axis: &str, value: &str, log: &RunLog) -> AblationCell {
        let refusal = log.refusal_series();
        let composite = log.composite_series();
        let last = log.final_stage();
        AblationCell {
            axis: axis.to_string(),
            value: value.to_string(),
            method: log.method,
            seed: log.seed,
            ordering: log.config.ordering,
            s0: refusal[0],
            final_refusal: *refusal.last().unwrap(),
            final_composite: *composite.last().unwrap(),
            final_domain: last.domain_mean * 100.0,
            final_general: last.general * 100.0,
            refusal_slope: per_step_slope(&refusal),
            composite_slope: per_step_slope(&composite),
            triggers: log.stages.iter().filter(|s| s.verdict.triggered).count(),
        }
    }
}

/// Combined grid report.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AblationReport {
    /// Seed-mean and std of a metric for one (axis, value) cell group.
    pub fn seed_stats(
        &self,
        axis: &str,
        value: &str,
        metric: impl Fn(&AblationCell) -> f64,
    ) -> Option<(f64, f64)> {
        let xs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.axis == axis && c.value == value)
            .map(metric)
            .collect();
        if xs.is_empty() {
            None
        } else {
            Some(mean_std(&xs))
        }
    }

    pub fn render_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .cells
            .iter()
            .map(|c| {
                vec![
                    c.axis.clone(),
                    c.value.clone(),
                    c.method.label().to_string(),
                    c.seed.to_string(),
                    c.ordering.to_string(),
                    format!("{:.4}", c.s0),
                    format!("{:.4}", c.final_refusal),
                    format!("{:.4}", c.final_composite),
                    format!("{:.4}", c.final_domain),
                    format!("{:.4}", c.final_general),
                    format!("{:.4}", c.refusal_slope),
                    format!("{:.4}", c.composite_slope),
                    c.triggers.to_string(),
                ]
            })
            .collect();
        render_csv(
            &[
                "axis",
                "value",
                "method",
                "seed",
                "ordering",
                "s0",
                "final_refusal",
                "final_composite",
                "final_domain",
                "final_general",
                "refusal_slope",
                "composite_slope",
                "triggers",
            ],
            &rows,
        )
    }

    /// Human-readable seed-averaged summary with direction-of-effect
    /// checks over the method rows and a soft monotonicity report on the
    /// rho axis.
    pub fn render_summary(&self) -> String {
        let mut out = String::new();
        let mut groups: BTreeMap<(String, String), Vec<&AblationCell>> = BTreeMap::new();
        for c in &self.cells {
            groups
                .entry((c.axis.clone(), c.value.clone()))
                .or_default()
                .push(c);
        }
        out.push_str("axis value n final_refusal final_composite final_domain triggers\n");
        for ((axis, value), cells) in &groups {
            let refusal: Vec<f64> = cells.iter().map(|c| c.final_refusal).collect();
            let comp: Vec<f64> = cells.iter().map(|c| c.final_composite).collect();
            let dom: Vec<f64> = cells.iter().map(|c| c.final_domain).collect();
            let trig: usize = cells.iter().map(|c| c.triggers).sum();
            let (rm, rs) = mean_std(&refusal);
            let (cm, cs) = mean_std(&comp);
            let (dm, ds) = mean_std(&dom);
            out.push_str(&format!(
                "{axis} {value} {} {rm:.2}±{rs:.2} {cm:.2}±{cs:.2} {dm:.2}±{ds:.2} {trig}\n",
                cells.len()
            ));
        }

        // Direction-of-effect over the method lattice; inversions are
        // reported, not asserted, because toy-scale noise can compress
        // the gaps.
        let mean_of = |label: &str| {
            self.seed_stats("method", label, |c| c.final_refusal)
                .map(|(m, _)| m)
        };
        let chain = [
            "unconstrained",
            "strict-osca",
            "adaptive-osca",
            "+anchor",
            "safeanchor",
        ];
        let values: Vec<Option<f64>> = chain.iter().map(|l| mean_of(l)).collect();
        if values.iter().all(|v| v.is_some()) {
            out.push_str("\nmethod ordering (final refusal, seed means):\n");
            for (label, v) in chain.iter().zip(&values) {
                out.push_str(&format!("  {label}: {:.2}\n", v.unwrap()));
            }
            let mut inversions = Vec::new();
            for i in 1..chain.len() {
                if values[i].unwrap() < values[i - 1].unwrap() {
                    inversions.push(format!("{} < {}", chain[i], chain[i - 1]));
                }
            }
            if inversions.is_empty() {
                out.push_str("  ordering holds with no inversions\n");
            } else {
                out.push_str(&format!("  inversions: {}\n", inversions.join(", ")));
            }
            if let (Some(no_incr), Some(full)) =
                (mean_of("no-incremental-ssi"), mean_of("safeanchor"))
            {
                out.push_str(&format!(
                    "  no-incremental-ssi {:.2} vs safeanchor {:.2} ({})\n",
                    no_incr,
                    full,
                    if no_incr <= full {
                        "<= holds"
                    } else {
                        "inverted"
                    }
                ));
            }
        }

        // Soft rho monotonicity report.
        let mut rho_rows: Vec<(f64, f64)> = groups
            .iter()
            .filter(|((axis, _), _)| axis == "rho")
            .map(|((_, value), cells)| {
                let xs: Vec<f64> = cells.iter().map(|c| c.final_refusal).collect();
                (value.parse::<f64>().unwrap_or(f64::NAN), mean_std(&xs).0)
            })
            .collect();
        rho_rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        if rho_rows.len() >= 2 {
            let monotone = rho_rows.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-9);
            out.push_str(&format!(
                "\nrho trend (seed means): {} ({})\n",
                rho_rows
                    .iter()
                    .map(|(r, v)| format!("{r}:{v:.2}"))
                    .collect::<Vec<_>>()
                    .join(" "),
                if monotone {
                    "non-decreasing"
                } else {
                    "not monotone; reported, not asserted"
                }
            ));
        }
        out
    }
}

/// Run every cell of the grid, one worker per run. Results keep the
/// deterministic cell-major, seed-minor order.
pub fn ablate(grid: &GridConfig) -> Result<(Vec<RunArtifacts>, AblationReport)> {
    let cells = grid.cells();
    let mut jobs = Vec::new();
    for (axis, value, cfg) in &cells {
        for &seed in &cfg.seeds {
            jobs.push((axis.clone(), value.clone(), cfg.clone(), seed));
        }
    }
    let results: Vec<Result<(String, String, RunArtifacts)>> = jobs
        .into_par_iter()
        .map(|(axis, value, cfg, seed)| {
            let mut artifacts = run(&cfg, seed)?;
            // Distinguish sensitivity-run stems from plain method rows.
            if axis != "method" {
                artifacts.stem = format!(
                    "run-{}-{}-{}-seed{}",
                    axis,
                    value.replace('.', "_"),
                    cfg.method.slug(),
                    seed
                );
            }
            Ok((axis, value, artifacts))
        })
        .collect();
    let mut artifacts = Vec::new();
    let mut report_cells = Vec::new();
    for r in results {
        let (axis, value, art) = r?;
        report_cells.push(AblationCell::from_log(&axis, &value, &art.log));
        artifacts.push(art);
    }
    Ok((
        artifacts,
        AblationReport {
            cells: report_cells,
        },
    ))
}

// --- analysis --------------------------------------------------------------

/// Rendered outputs of `analyze`, byte-deterministic functions of the
/// input logs.
#[derive(Clone, Debug)]
pub struct AnalyzeOutput {
    pub trajectory_csv: String,
    pub stability_csv: String,
    pub null_csv: String,
    pub summary: String,
}

/// Build the trajectory, stability, and matched-null tables plus a text
/// summary from run logs. Matched nulls use a fixed seed and 50 trials
/// per distinct (ambient dim, rank) pair, so re-running is idempotent.
pub fn analyze(logs: &[RunLog]) -> Result<AnalyzeOutput> {
    if logs.is_empty() {
        return Err(Error::Domain("no run logs to analyze".into()));
    }

    // Trajectory CSV: one row per stage, composite safety as "safety".
    let mut rows = Vec::new();
    for log in logs {
        let mut push = |t: &TrajectoryRecord| {
            rows.push(vec![
                t.stage.to_string(),
                log.method.label().to_string(),
                log.seed.to_string(),
                format!("{:.4}", t.composite),
                format!("{:.4}", t.domain_mean * 100.0),
                format!("{:.4}", t.general * 100.0),
            ]);
        };
        push(&log.baseline);
        for s in &log.stages {
            push(&s.trajectory);
        }
    }
    let trajectory_csv = render_csv(
        &["stage", "method", "seed", "safety", "domain", "general"],
        &rows,
    );

    // Stability CSV: layer-averaged rows only.
    let mut rows = Vec::new();
    let mut null_pairs: std::collections::BTreeSet<(usize, usize)> =
        std::collections::BTreeSet::new();
    for log in logs {
        let ambient = log
            .subspace_refs
            .first()
            .map(|r| r.ambient_dim)
            .unwrap_or(0);
        for rec in log.stability.iter().filter(|r| r.layer.is_none()) {
            let k_s = rec.rank_left.min(rec.rank_right);
            rows.push(vec![
                log.method.label().to_string(),
                log.seed.to_string(),
                rec.transition.clone(),
                format!("{:.6}", rec.mean_cos),
                format!("{:.6}", rec.grassmannian),
                k_s.to_string(),
            ]);
            if ambient > 0 && k_s > 0 {
                null_pairs.insert((ambient, k_s));
            }
        }
    }
    let stability_csv = render_csv(
        &["method", "seed", "transition", "mean_cos", "d_G", "k_s"],
        &rows,
    );

    // Matched random-subspace nulls.
    let mut rows = Vec::new();
    for (dim, k) in &null_pairs {
        let stats = random_subspace_null(*dim, *k, 50, 0)?;
        rows.push(vec![
            dim.to_string(),
            k.to_string(),
            stats.trials.to_string(),
            "0".to_string(),
            format!("{:.6}", stats.mean_cos),
            format!("{:.6}", stats.std_cos),
            format!("{:.6}", stats.mean_grassmannian),
            format!("{:.6}", stats.std_grassmannian),
        ]);
    }
    let null_csv = render_csv(
        &[
            "dim", "k", "trials", "seed", "mean_cos", "std_cos", "mean_d_G", "std_d_G",
        ],
        &rows,
    );

    Ok(AnalyzeOutput {
        trajectory_csv,
        stability_csv,
        null_csv,
        summary: summarize(logs)?,
    })
}

fn summarize(logs: &[RunLog]) -> Result<String> {
    let mut out = String::new();
    let mut by_method: BTreeMap<&'static str, Vec<&RunLog>> = BTreeMap::new();
    for log in logs {
        by_method.entry(log.method.label()).or_default().push(log);
    }

    out.push_str("== methods ==\n");
    for (label, group) in &by_method {
        let s0: Vec<f64> = group.iter().map(|l| l.refusal_series()[0]).collect();
        let fin: Vec<f64> = group
            .iter()
            .map(|l| *l.refusal_series().last().unwrap())
            .collect();
        let comp: Vec<f64> = group
            .iter()
            .map(|l| *l.composite_series().last().unwrap())
            .collect();
        let dom: Vec<f64> = group
            .iter()
            .map(|l| l.final_stage().domain_mean * 100.0)
            .collect();
        let gen: Vec<f64> = group
            .iter()
            .map(|l| l.final_stage().general * 100.0)
            .collect();
        let slope: Vec<f64> = group
            .iter()
            .map(|l| per_step_slope(&l.refusal_series()))
            .collect();
        let (s0m, _) = mean_std(&s0);
        let (fm, fs) = mean_std(&fin);
        let (cm, cs) = mean_std(&comp);
        let (dm, _) = mean_std(&dom);
        let (gm, _) = mean_std(&gen);
        let (slm, _) = mean_std(&slope);
        out.push_str(&format!(
            "{label}: runs={} s0={s0m:.2} final_refusal={fm:.2}±{fs:.2} final_composite={cm:.2}±{cs:.2} domain={dm:.2} general={gm:.2} refusal_slope={slm:.3}\n",
            group.len()
        ));
    }

    out.push_str("\n== trigger accounting ==\n");
    for (label, group) in &by_method {
        let mut per_stage: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut unrecovered = 0usize;
        for log in group {
            for s in &log.stages {
                let entry = per_stage.entry(s.verdict.stage).or_insert((0, 0));
                entry.1 += 1;
                if s.verdict.triggered {
                    entry.0 += 1;
                    if s.verdict.replay_blocks_used > 0 {
                        pre.push(s.verdict.refusal_rate * 100.0);
                        post.push(s.verdict.final_rate * 100.0);
                    }
                    if s.verdict.outcome == VerdictOutcome::Unrecovered {
                        unrecovered += 1;
                    }
                }
            }
        }
        let events: usize = per_stage.values().map(|(_, n)| n).sum();
        let triggers: usize = per_stage.values().map(|(t, _)| t).sum();
        if events == 0 {
            continue;
        }
        out.push_str(&format!(
            "{label}: {triggers}/{events} triggered ({:.2} per event)",
            triggers as f64 / events as f64
        ));
        for (stage, (t, n)) in &per_stage {
            out.push_str(&format!(" stage{stage}:{t}/{n}"));
        }
        if !pre.is_empty() {
            let (prem, _) = mean_std(&pre);
            let (postm, _) = mean_std(&post);
            out.push_str(&format!(
                " pre={prem:.2} post={postm:.2} recovery={:+.2}",
                postm - prem
            ));
        }
        if unrecovered > 0 {
            out.push_str(&format!(" unrecovered={unrecovered}"));
        }
        out.push('\n');
    }

    out.push_str("\n== subspace stability (layer-averaged) ==\n");
    let mut by_transition: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for log in logs {
        for rec in log.stability.iter().filter(|r| r.layer.is_none()) {
            let e = by_transition.entry(rec.transition.clone()).or_default();
            e.0.push(rec.mean_cos);
            e.1.push(rec.grassmannian);
        }
    }
    for (transition, (cos, dg)) in &by_transition {
        let (cm, cs) = mean_std(cos);
        let (dm, ds) = mean_std(dg);
        out.push_str(&format!(
            "{transition}: mean_cos={cm:.3}±{cs:.3} d_G={dm:.3}±{ds:.3} (n={})\n",
            cos.len()
        ));
    }

    out.push_str("\n== spectrum ==\n");
    let mut ks: Vec<f64> = Vec::new();
    for log in logs {
        for rec in &log.spectra {
            for (rho, k) in &rec.report.ks_at {
                if (*rho - 0.9).abs() < 1e-12 {
                    ks.push(*k as f64);
                }
            }
        }
    }
    if !ks.is_empty() {
        let (km, kstd) = mean_std(&ks);
        out.push_str(&format!(
            "k_s at rho=0.90: mean={km:.2}±{kstd:.2} (n={})\n",
            ks.len()
        ));
    }

    // Cross-ordering spread, when the logs span orderings.
    let orderings: std::collections::BTreeSet<usize> =
        logs.iter().map(|l| l.config.ordering).collect();
    if orderings.len() > 1 {
        out.push_str("\n== orderings ==\n");
        for (label, group) in &by_method {
            let mut per_ordering: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for log in group.iter() {
                per_ordering
                    .entry(log.config.ordering)
                    .or_default()
                    .push(*log.refusal_series().last().unwrap());
            }
            if per_ordering.len() < 2 {
                continue;
            }
            let means: Vec<f64> = per_ordering.values().map(|v| mean_std(v).0).collect();
            let (mm, ms) = mean_std(&means);
            out.push_str(&format!(
                "{label}: {} mean={mm:.2} cross-ordering-sd={ms:.2}\n",
                per_ordering
                    .iter()
                    .map(|(o, v)| format!("ord{o}:{:.2}", mean_std(v).0))
                    .collect::<Vec<_>>()
                    .join(" ")
            ));
        }
    }
    Ok(out)
}

/// Read logs from files and analyze.
pub fn analyze_paths(paths: &[std::path::PathBuf]) -> Result<AnalyzeOutput> {
    let logs: Vec<RunLog> = paths
        .iter()
        .map(|p| RunLog::from_json_file(p))
        .collect::<Result<_>>()?;
    analyze(&logs)
}

impl AnalyzeOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("trajectory.csv"), &self.trajectory_csv)?;
        std::fs::write(dir.join("stability.csv"), &self.stability_csv)?;
        std::fs::write(dir.join("null.csv"), &self.null_csv)?;
        std::fs::write(dir.join("summary.txt"), &self.summary)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_enumerate_lexicographically() {
        assert_eq!(ordering_permutation(3, 0).unwrap(), vec![0, 1, 2]);
        assert_eq!(ordering_permutation(3, 1).unwrap(), vec![0, 2, 1]);
        assert_eq!(ordering_permutation(3, 5).unwrap(), vec![2, 1, 0]);
        assert!(ordering_permutation(3, 6).is_err());
    }

    #[test]
    fn config_defaults_mirror_the_standard_table() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.rho, 0.90);
        assert_eq!(cfg.tau, 0.05);
        assert_eq!(cfg.gamma, 0.1);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.beta, 1.0);
        assert_eq!(cfg.e_repair, 200);
        assert_eq!(cfg.n_s, 500);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.domains, 3);
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn resolve_copies_ns_into_suite_and_validates() {
        let mut cfg = RunConfig {
            n_s: 64,
            ..RunConfig::default()
        };
        let resolved = cfg.resolve().unwrap();
        assert_eq!(resolved.suite.calib_size, 64);
        cfg.rho = 1.5;
        assert!(cfg.resolve().is_err());
        let cfg = RunConfig {
            tau: 1.0,
            ..RunConfig::default()
        };
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn method_strings_roundtrip() {
        for m in [
            Method::Unconstrained,
            Method::FisherPenalty,
            Method::Interleave,
            Method::SsiOnly,
            Method::StrictOsca,
            Method::AdaptiveOsca,
            Method::Anchor,
            Method::Csm,
            Method::SafeAnchor,
            Method::NoIncrementalSsi,
        ] {
            let parsed: Method = m.label().parse().unwrap();
            assert_eq!(parsed, m);
            let json = serde_json::to_string(&m).unwrap();
            let back: Method = serde_json::from_str(&json).unwrap();
            assert_eq!(back, m);
        }
        // Aliases.
        assert_eq!("anchor".parse::<Method>().unwrap(), Method::Anchor);
        assert_eq!("csm".parse::<Method>().unwrap(), Method::Csm);
        let back: Method = serde_json::from_str("\"csm\"").unwrap();
        assert_eq!(back, Method::Csm);
    }

    #[test]
    fn method_traits_are_consistent() {
        assert!(!Method::Unconstrained.uses_ssi());
        assert!(Method::SsiOnly.uses_ssi());
        assert_eq!(Method::SsiOnly.projection_mode(), ProjectionMode::Off);
        assert_eq!(Method::StrictOsca.projection_mode(), ProjectionMode::Strict);
        assert!(Method::SafeAnchor.uses_csm());
        assert!(Method::SafeAnchor.incremental_update());
        assert!(!Method::NoIncrementalSsi.incremental_update());
        assert!(Method::NoIncrementalSsi.uses_csm());
        assert!(!Method::Anchor.uses_csm());
        assert!(Method::Anchor.uses_anchor());
        assert!(!Method::StrictOsca.uses_anchor());
        assert_eq!(Method::table_rows().len(), 7);
    }

    #[test]
    fn grid_cells_vary_one_axis_at_a_time() {
        let grid = GridConfig {
            base: RunConfig::default(),
            table_rows: false,
            methods: vec![Method::Unconstrained],
            rho: vec![0.8, 0.9],
            tau: vec![0.02],
            n_s: vec![100],
            orderings: vec![0, 1],
        };
        let cells = grid.cells();
        assert_eq!(cells.len(), 1 + 2 + 1 + 1 + 2);
        for (axis, _, cfg) in &cells {
            if axis != "rho" {
                assert_eq!(cfg.rho, 0.9);
            }
            if axis != "method" {
                assert_eq!(cfg.method, Method::SafeAnchor);
            }
        }
    }
}
