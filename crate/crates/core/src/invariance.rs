//! Finite-time diffusion invariance.
//!
//! Each reverse step `tau^{j+1} -> tau^j` is treated as the controllable
//! system `d tau / d s = u` with nominal velocity
//! `u_nom = (tau^j - tau^{j+1}) / dtau`. A CBF row per planning state and
//! barrier constrains `u`, the projection QP picks the closest admissible
//! velocity and the step is replaced by `tau^{j+1} + dtau u*`.
//!
//! Rows are linearised at `tau^{j+1}`, the state the update starts from.
//! For barriers convex in the state (every shape in [`crate::specs`]) this
//! gives `b(tau^{j*}) >= (1 - eps dtau) b(tau^{j+1})` per row, so
//! satisfied states stay satisfied and violated states decay geometrically.
//!
//! Modes:
//! - `RoS`: hard rows `grad b . u >= -alpha(b)`.
//! - `ReS`: rows softened by `- w_k(j) r_k` with `w_k(j) = w_max max(0, j) / N`,
//!   followed by `N_a` extra hard steps at diffusion index 1.
//! - `TVS`: hard rows on `b - gamma_k(j)` with `gamma_k` linear from
//!   `gamma_k(N) <= b(x_k^N)` to `gamma_k(0) = 0`.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    prior_sample, reverse_step, Conditioning, DenoiserModel, DiffusionError, DiffusionSchedule,
    SampleOptions, Trajectory,
};
use crate::qp::{
    debug_record, solve_projection, ConstraintRow, ProjectionProblem, ProjectionSolution, QpError,
    SolverSettings,
};
use crate::specs::{BarrierSpec, SpecError};

#[derive(Debug, Error)]
pub enum InvarianceError {
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("QP failed at diffusion step {step}: {source}")]
    Qp { step: i64, source: QpError },
    #[error("QP did not converge at diffusion step {step} (residual {residual:e})")]
    NotConverged { step: i64, residual: f64 },
    #[error("conditioning {which} violates spec {spec} (b = {value})")]
    ConditionViolatesSpec {
        spec: usize,
        which: &'static str,
        value: f64,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SafetyMode {
    Off,
    #[serde(alias = "ros")]
    RoS,
    #[serde(alias = "res")]
    ReS,
    #[serde(alias = "tvs")]
    TVS,
}

/// Extended class-K function `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassK {
    /// `eps * b`
    #[default]
    Linear,
    /// `eps * b^3`
    Cubic,
}

impl ClassK {
    pub fn apply(self, eps: f64, b: f64) -> f64 {
        match self {
            ClassK::Linear => eps * b,
            ClassK::Cubic => eps * b * b * b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpFailurePolicy {
    /// First soften the rows that `u = 0` already satisfies and keep the
    /// violated ones hard; accept that step only if no safe state becomes
    /// unsafe under the true barrier. Otherwise fall through to
    /// [`QpFailurePolicy::RelaxViolated`].
    #[default]
    Relax,
    /// Soften every row that `u = 0` violates, trying each of
    /// [`FALLBACK_WEIGHTS`] in turn. Rows already satisfied stay hard, so
    /// safe states remain safe.
    RelaxViolated,
    Abort,
    /// Keep the unprojected step and log the failure.
    PassThrough,
}

/// Slack weights of the relaxation fallback. A small weight makes slack
/// expensive but can leave Hildreth stalled; the larger one always converges
/// in practice.
pub const FALLBACK_WEIGHTS: [f64; 2] = [0.1, 1.0];

/// Which rows a fallback softened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Satisfied rows were softened; violated rows stayed hard.
    Satisfied,
    Violated,
}

/// Rounds of re-hardening rows whose states the satisfied-row fallback
/// pushed out of the safe set.
const REPAIR_ROUNDS: usize = 4;

/// Softens the rows marked in `soften`. With `normalize` each softened row is
/// scaled to a unit gradient so its slack is measured as a distance; far-field
/// rows of steep barriers otherwise stall the solver.
fn relax_rows(
    mut problem: ProjectionProblem,
    weight: f64,
    soften: &[bool],
    normalize: bool,
) -> ProjectionProblem {
    for (row, _) in problem.rows.iter_mut().zip(soften).filter(|(_, s)| **s) {
        let norm = row.entries.iter().map(|(_, a)| a * a).sum::<f64>().sqrt();
        if normalize && norm > 0.0 {
            row.entries.iter_mut().for_each(|(_, a)| *a /= norm);
            row.offset /= norm;
        }
        row.relax_index = Some(problem.relax_dim);
        row.relax_weight = weight;
        problem.relax_dim += 1;
    }
    problem
}

/// Rows a fallback stage softens. Satisfied rows of affine barriers stay
/// hard since their linearisation is exact.
fn fallback_mask(problem: &ProjectionProblem, stage: Fallback, exact: &[bool]) -> Vec<bool> {
    problem
        .rows
        .iter()
        .zip(exact)
        .map(|(row, exact)| {
            row.is_hard()
                && match stage {
                    Fallback::Satisfied => row.offset <= 0.0 && !exact,
                    Fallback::Violated => row.offset > 0.0,
                }
        })
        .collect()
}

/// `b - gamma(j)` per `[spec][k]`; plain barrier values without a schedule.
fn gaps(
    tau: &Trajectory,
    specs: &[BarrierSpec],
    gamma: Option<&GammaSchedule>,
    j: i64,
) -> Result<Vec<Vec<f64>>, SpecError> {
    let mut b = barrier_matrix(tau, specs)?;
    if let Some(g) = gamma {
        for (s, row) in b.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v -= g.value(s, k, j);
            }
        }
    }
    Ok(b)
}

/// `(spec, k)` pairs safe in `before` but not in `after`.
fn newly_unsafe(before: &[Vec<f64>], after: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (s, (b, a)) in before.iter().zip(after).enumerate() {
        for (k, (b, a)) in b.iter().zip(a).enumerate() {
            if *b >= 0.0 && *a < 0.0 {
                out.push((s, k));
            }
        }
    }
    out
}

fn max_violation(problem: &ProjectionProblem, u: &[f64], r: &[f64]) -> f64 {
    problem
        .rows
        .iter()
        .map(|row| (row.offset - row.lhs(u, r)).max(0.0))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaInit {
    /// `gamma_k(N) = min(0, b(x_k^N)) - margin`.
    #[default]
    FromPrior,
    /// `gamma == 0`, which reduces TVS to RoS.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvarianceConfig {
    pub mode: SafetyMode,
    pub eps: f64,
    pub class_k: ClassK,
    pub delta_tau: f64,
    /// Extra hard steps `N_a` appended in ReS mode.
    pub n_extra: usize,
    pub w_max: f64,
    pub gamma_init: GammaInit,
    pub gamma_margin: f64,
    pub solver: SolverSettings,
    pub on_qp_failure: QpFailurePolicy,
    /// Gaussian noise in the main chain. Off gives a deterministic chain.
    pub inject_noise: bool,
    /// Add `sqrt(beta_1) z` during the ReS extra steps.
    pub extra_step_noise: bool,
    /// Keep the full `[spec][k]` barrier matrix in every step record.
    pub record_barriers: bool,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            mode: SafetyMode::RoS,
            eps: 1.0,
            class_k: ClassK::Linear,
            delta_tau: 1.0,
            n_extra: 50,
            w_max: 1.0,
            gamma_init: GammaInit::FromPrior,
            gamma_margin: 25.0,
            solver: SolverSettings::default(),
            on_qp_failure: QpFailurePolicy::Relax,
            inject_noise: true,
            extra_step_noise: false,
            record_barriers: true,
        }
    }
}

impl InvarianceConfig {
    pub fn with_mode(mode: SafetyMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), InvarianceError> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(InvarianceError::InvalidConfig("eps must be > 0".into()));
        }
        if !(self.delta_tau > 0.0 && self.delta_tau.is_finite()) {
            return Err(InvarianceError::InvalidConfig("delta_tau must be > 0".into()));
        }
        if !(self.w_max >= 0.0) || !(self.gamma_margin >= 0.0) {
            return Err(InvarianceError::InvalidConfig(
                "w_max and gamma_margin must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Which (planning step, spec) a CBF row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub k: usize,
    pub spec: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbfRows {
    pub rows: Vec<ConstraintRow>,
    pub meta: Vec<RowMeta>,
    pub relax_dim: usize,
}

/// Barrier value and sparse gradient over the flattened velocity.
struct BarrierTerm {
    meta: RowMeta,
    value: f64,
    entries: Vec<(usize, f64)>,
}

/// `b(x_k)` for planning step `k`; adjacent-pair specs read `x_{k+1}` and
/// fall back to their speed-independent form at `k = H`.
pub fn barrier_at(spec: &BarrierSpec, tau: &Trajectory, k: usize) -> Result<f64, SpecError> {
    if spec.is_pair() {
        if k < tau.horizon() {
            spec.eval(tau.state(k), Some(tau.state(k + 1)))
        } else {
            spec.terminal_fallback()
                .expect("pair specs have a fallback")
                .eval(tau.state(k), None)
        }
    } else {
        spec.eval(tau.state(k), None)
    }
}

/// Barrier values indexed `[spec][k]`.
pub fn barrier_matrix(tau: &Trajectory, specs: &[BarrierSpec]) -> Result<Vec<Vec<f64>>, SpecError> {
    specs
        .iter()
        .map(|s| (0..tau.len()).map(|k| barrier_at(s, tau, k)).collect())
        .collect()
}

fn barrier_terms(tau: &Trajectory, specs: &[BarrierSpec]) -> Result<Vec<BarrierTerm>, SpecError> {
    let d = tau.dim();
    let h = tau.horizon();
    let mut terms = Vec::with_capacity(specs.len() * tau.len());
    for (s, spec) in specs.iter().enumerate() {
        let fallback = spec.terminal_fallback();
        for k in 0..=h {
            let (value, grad) = if spec.is_pair() && k < h {
                let next = Some(tau.state(k + 1));
                (spec.eval(tau.state(k), next)?, spec.gradient(tau.state(k), next)?)
            } else {
                let single = fallback.as_ref().unwrap_or(spec);
                (single.eval(tau.state(k), None)?, single.gradient(tau.state(k), None)?)
            };
            let mut entries: Vec<(usize, f64)> = grad
                .current
                .iter()
                .enumerate()
                .filter(|(_, g)| **g != 0.0)
                .map(|(i, g)| (k * d + i, *g))
                .collect();
            if let Some(next) = &grad.next {
                entries.extend(
                    next.iter()
                        .enumerate()
                        .filter(|(_, g)| **g != 0.0)
                        .map(|(i, g)| ((k + 1) * d + i, *g)),
                );
            }
            terms.push(BarrierTerm {
                meta: RowMeta { k, spec: s },
                value,
                entries,
            });
        }
    }
    Ok(terms)
}

/// `(tau^j - tau^{j+1}) / dtau`, flattened.
pub fn diffusion_velocity(
    tau_j: &Trajectory,
    tau_next: &Trajectory,
    delta_tau: f64,
) -> Result<Vec<f64>, InvarianceError> {
    if tau_j.states().dim() != tau_next.states().dim() {
        return Err(InvarianceError::Diffusion(DiffusionError::ShapeMismatch(
            "trajectories differ in shape".into(),
        )));
    }
    Ok(tau_j
        .as_flat()
        .iter()
        .zip(tau_next.as_flat())
        .map(|(a, b)| (a - b) / delta_tau)
        .collect())
}

/// Hard rows `grad b(x_k) . u >= -alpha(b(x_k))`, one per `(spec, k)`.
pub fn build_rows_ros(
    tau: &Trajectory,
    specs: &[BarrierSpec],
    eps: f64,
    class_k: ClassK,
) -> Result<CbfRows, SpecError> {
    let terms = barrier_terms(tau, specs)?;
    let mut rows = Vec::with_capacity(terms.len());
    let mut meta = Vec::with_capacity(terms.len());
    for t in terms {
        rows.push(ConstraintRow::hard(t.entries, -class_k.apply(eps, t.value)));
        meta.push(t.meta);
    }
    Ok(CbfRows {
        rows,
        meta,
        relax_dim: 0,
    })
}

/// `w_k(j) = w_max * max(0, j) / N`.
pub fn relax_weight(w_max: f64, j: i64, steps: usize) -> f64 {
    w_max * j.max(0) as f64 / steps as f64
}

/// RoS rows softened by `- w_k(j) r_k`, one relaxation variable per planning
/// step shared by every spec at that step. `j` is the index of the state the
/// step produces.
pub fn build_rows_res(
    tau: &Trajectory,
    specs: &[BarrierSpec],
    eps: f64,
    class_k: ClassK,
    j: i64,
    steps: usize,
    w_max: f64,
) -> Result<CbfRows, SpecError> {
    let mut out = build_rows_ros(tau, specs, eps, class_k)?;
    let w = relax_weight(w_max, j, steps);
    for (row, meta) in out.rows.iter_mut().zip(&out.meta) {
        let mut weight = w;
        if row.entries.is_empty() && row.offset > 0.0 && weight == 0.0 {
            log::warn!(
                "vanishing barrier gradient at k = {}, spec {}: relaxing row",
                meta.k,
                meta.spec
            );
            weight = 1.0;
        }
        if weight > 0.0 {
            row.relax_weight = weight;
            row.relax_index = Some(meta.k);
        }
    }
    out.relax_dim = tau.len();
    Ok(out)
}

/// Per-`(spec, k)` time-varying offset, linear in the diffusion index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSchedule {
    /// `gamma_k(N)` indexed `[spec][k]`.
    pub initial: Vec<Vec<f64>>,
    pub steps: usize,
}

impl GammaSchedule {
    pub fn zero(specs: usize, horizon: usize, steps: usize) -> Self {
        Self {
            initial: vec![vec![0.0; horizon + 1]; specs],
            steps,
        }
    }

    /// `gamma_k(j) = gamma_k(N) * clamp(j, 0, N) / N`.
    pub fn value(&self, spec: usize, k: usize, j: i64) -> f64 {
        let frac = j.clamp(0, self.steps as i64) as f64 / self.steps as f64;
        self.initial[spec][k] * frac
    }

    /// Constant slope `d gamma / dj = gamma_k(N) / N`.
    pub fn slope(&self, spec: usize, k: usize) -> f64 {
        self.initial[spec][k] / self.steps as f64
    }

    pub fn is_zero(&self) -> bool {
        self.initial.iter().flatten().all(|g| *g == 0.0)
    }
}

/// `gamma_k(N) = min(0, b(x_k^N)) - margin`.
pub fn init_gamma(
    tau_n: &Trajectory,
    specs: &[BarrierSpec],
    margin: f64,
    steps: usize,
) -> Result<GammaSchedule, SpecError> {
    let values = barrier_matrix(tau_n, specs)?;
    Ok(GammaSchedule {
        initial: values
            .into_iter()
            .map(|row| row.into_iter().map(|b| b.min(0.0) - margin).collect())
            .collect(),
        steps,
    })
}

/// Hard rows keeping `b - gamma` invariant across the step from diffusion
/// index `state_step` to `state_step - 1`:
/// `grad b . u >= (gamma(j-1) - gamma(j)) / dtau - alpha(b - gamma(j))`.
pub fn build_rows_tvs(
    tau: &Trajectory,
    specs: &[BarrierSpec],
    eps: f64,
    class_k: ClassK,
    gamma: &GammaSchedule,
    state_step: i64,
    delta_tau: f64,
) -> Result<CbfRows, SpecError> {
    let terms = barrier_terms(tau, specs)?;
    let mut rows = Vec::with_capacity(terms.len());
    let mut meta = Vec::with_capacity(terms.len());
    for t in terms {
        let RowMeta { k, spec } = t.meta;
        let now = gamma.value(spec, k, state_step);
        let next = gamma.value(spec, k, state_step - 1);
        let offset = (next - now) / delta_tau - class_k.apply(eps, t.value - now);
        rows.push(ConstraintRow::hard(t.entries, offset));
        meta.push(t.meta);
    }
    Ok(CbfRows {
        rows,
        meta,
        relax_dim: 0,
    })
}

/// Holds pinned planning steps at their nominal velocity: their coefficients
/// move into the offset and rows left without free coefficients are dropped
/// when already satisfied.
fn fix_pinned_blocks(rows: CbfRows, pinned: &[usize], dim: usize, u_nom: &[f64]) -> CbfRows {
    let is_pinned = |idx: usize| pinned.contains(&(idx / dim));
    let mut out = CbfRows {
        rows: Vec::with_capacity(rows.rows.len()),
        meta: Vec::with_capacity(rows.meta.len()),
        relax_dim: rows.relax_dim,
    };
    for (mut row, meta) in rows.rows.into_iter().zip(rows.meta) {
        if row.entries.iter().any(|(i, _)| is_pinned(*i)) {
            let fixed: f64 = row
                .entries
                .iter()
                .filter(|(i, _)| is_pinned(*i))
                .map(|(i, a)| a * u_nom[*i])
                .sum();
            row.offset -= fixed;
            row.entries.retain(|(i, _)| !is_pinned(*i));
            if row.entries.is_empty() && row.relax_index.is_none() && row.offset <= 0.0 {
                continue;
            }
        }
        out.rows.push(row);
        out.meta.push(meta);
    }
    out
}

/// Diagnostics of one reverse step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Index of the state this record describes.
    pub j: i64,
    pub min_barrier: Vec<f64>,
    /// `min_k (b - gamma_k(j))` per spec, TVS only.
    pub min_gap: Option<Vec<f64>>,
    /// `[spec][k]`, present when requested.
    pub barriers: Option<Vec<Vec<f64>>>,
    pub qp_rows: usize,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    /// `max_i (c_i - lhs_i)^+` of the solved rows.
    pub max_row_violation: f64,
    pub qp_converged: bool,
    pub projected: bool,
    /// Set when the QP had to be relaxed to find a feasible velocity.
    #[serde(default)]
    pub fallback: Option<Fallback>,
    pub wall_time_s: f64,
}

impl StepRecord {
    fn describe(
        tau: &Trajectory,
        j: i64,
        specs: &[BarrierSpec],
        gamma: Option<&GammaSchedule>,
        keep: bool,
    ) -> Result<Self, SpecError> {
        let matrix = barrier_matrix(tau, specs)?;
        let min_barrier = matrix
            .iter()
            .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let min_gap = gamma.map(|g| {
            matrix
                .iter()
                .enumerate()
                .map(|(s, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(k, b)| b - g.value(s, k, j))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        });
        Ok(Self {
            j,
            min_barrier,
            min_gap,
            barriers: keep.then_some(matrix),
            qp_rows: 0,
            qp_iterations: 0,
            kkt_residual: 0.0,
            max_row_violation: 0.0,
            qp_converged: true,
            projected: false,
            fallback: None,
            wall_time_s: 0.0,
        })
    }
}

/// Everything a safe reverse step needs besides the trajectory and RNG.
#[derive(Debug, Clone, Copy)]
pub struct SafeStepContext<'a> {
    pub model: &'a DenoiserModel,
    pub sched: &'a DiffusionSchedule,
    pub specs: &'a [BarrierSpec],
    pub config: &'a InvarianceConfig,
    pub cond: Option<&'a Conditioning>,
}

/// One step of the safe chain: ordinary denoising of `tau_next = tau^{j+1}`
/// into `tau^j`, CBF projection of the implied velocity, and the corrected
/// update `tau^{j*} = tau^{j+1} + dtau u*`.
///
/// For `j < 0` (ReS extra steps) the denoiser runs at diffusion index 1
/// without the Gaussian term.
pub fn safe_denoise_step<R: Rng + ?Sized>(
    ctx: &SafeStepContext<'_>,
    tau_next: &Trajectory,
    j: i64,
    gamma: Option<&GammaSchedule>,
    rng: &mut R,
) -> Result<(Trajectory, StepRecord), InvarianceError> {
    let started = Instant::now();
    let cfg = ctx.config;
    let t = (j + 1).max(1) as usize;
    let opts = SampleOptions {
        inject_noise: cfg.inject_noise && j >= 0,
    };
    let mut tau_j = reverse_step(ctx.model, tau_next, t, ctx.sched, opts, rng, |_| {})?;
    if j < 0 && cfg.extra_step_noise {
        let sigma = ctx.sched.beta(1).sqrt();
        for v in tau_j.as_flat_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    if let Some(c) = ctx.cond {
        c.apply(&mut tau_j);
    }

    let gamma = if cfg.mode == SafetyMode::TVS { gamma } else { None };
    if cfg.mode == SafetyMode::Off || ctx.specs.is_empty() {
        let mut record = StepRecord::describe(&tau_j, j, ctx.specs, gamma, cfg.record_barriers)?;
        record.wall_time_s = started.elapsed().as_secs_f64();
        return Ok((tau_j, record));
    }

    let u_nom = diffusion_velocity(&tau_j, tau_next, cfg.delta_tau)?;
    let steps = ctx.sched.steps();
    let rows = match cfg.mode {
        SafetyMode::RoS => build_rows_ros(tau_next, ctx.specs, cfg.eps, cfg.class_k)?,
        SafetyMode::ReS => {
            build_rows_res(tau_next, ctx.specs, cfg.eps, cfg.class_k, j, steps, cfg.w_max)?
        }
        SafetyMode::TVS => {
            let zero;
            let g = match gamma {
                Some(g) => g,
                None => {
                    zero = GammaSchedule::zero(ctx.specs.len(), tau_next.horizon(), steps);
                    &zero
                }
            };
            build_rows_tvs(tau_next, ctx.specs, cfg.eps, cfg.class_k, g, j + 1, cfg.delta_tau)?
        }
        SafetyMode::Off => unreachable!(),
    };
    let rows = match ctx.cond {
        Some(c) => fix_pinned_blocks(rows, &c.pinned_steps(tau_next.horizon()), tau_next.dim(), &u_nom),
        None => rows,
    };
    let exact: Vec<bool> = rows.meta.iter().map(|m| ctx.specs[m.spec].is_affine()).collect();
    let meta = rows.meta;
    let problem = ProjectionProblem {
        u_nom,
        rows: rows.rows,
        relax_dim: rows.relax_dim,
    };

    let step_to = |u: &[f64]| {
        let mut out = tau_next.clone();
        for (x, u) in out.as_flat_mut().iter_mut().zip(u) {
            *x += cfg.delta_tau * u;
        }
        if let Some(c) = ctx.cond {
            c.apply(&mut out);
        }
        out
    };
    let converged = |o: &Result<ProjectionSolution, QpError>| matches!(o, Ok(s) if s.converged);

    let mut problem = problem;
    let mut outcome = solve_projection(&problem, &cfg.solver);
    let mut fallback = None;
    let relaxing = matches!(cfg.on_qp_failure, QpFailurePolicy::Relax | QpFailurePolicy::RelaxViolated);
    if relaxing && !converged(&outcome) {
        log::warn!("QP infeasible or not converged at j = {j}; relaxing rows");
        if log::log_enabled!(log::Level::Debug) {
            log::debug!("QP record: {}", debug_record(&problem, outcome.as_ref().ok()));
        }
        let mut stages = vec![Fallback::Violated];
        if cfg.on_qp_failure == QpFailurePolicy::Relax {
            stages.insert(0, Fallback::Satisfied);
        }
        let before = gaps(tau_next, ctx.specs, gamma, j + 1)?;
        let original = problem;
        problem = original.clone();
        'stages: for stage in stages {
            let mut soften = fallback_mask(&original, stage, &exact);
            for w in FALLBACK_WEIGHTS {
                for _ in 0..REPAIR_ROUNDS {
                    let candidate = relax_rows(original.clone(), w, &soften, stage == Fallback::Satisfied);
                    let sol = solve_projection(&candidate, &cfg.solver);
                    let mut accept = converged(&sol);
                    let mut repaired = false;
                    if let (Ok(s), Fallback::Satisfied, true) = (&sol, stage, accept) {
                        let after = gaps(&step_to(&s.u_star), ctx.specs, gamma, j)?;
                        let lost = newly_unsafe(&before, &after);
                        if !lost.is_empty() {
                            accept = false;
                            for (i, m) in meta.iter().enumerate() {
                                if soften[i] && lost.contains(&(m.spec, m.k)) {
                                    soften[i] = false;
                                    repaired = true;
                                }
                            }
                        }
                    }
                    log::debug!("fallback {stage:?} weight {w}: converged {} accepted {accept}", converged(&sol));
                    // The last attempt is kept even when it fails, for reporting.
                    problem = candidate;
                    outcome = sol;
                    if accept {
                        fallback = Some(stage);
                        break 'stages;
                    }
                    if !repaired {
                        break;
                    }
                }
            }
        }
    }
    let (next, qp_stats) = match outcome {
        Ok(sol) if sol.converged => {
            let violation = max_violation(&problem, &sol.u_star, &sol.r_star);
            let projected = !sol.is_inactive();
            let next = if projected {
                step_to(&sol.u_star)
            } else {
                tau_j
            };
            (
                next,
                (problem.rows.len(), sol.iterations, sol.kkt_residual, violation, true, projected),
            )
        }
        outcome if cfg.on_qp_failure == QpFailurePolicy::PassThrough => {
            let (iterations, residual) = match &outcome {
                Ok(sol) => (sol.iterations, sol.kkt_residual),
                Err(_) => (0, f64::INFINITY),
            };
            log::warn!("QP failed at j = {j}; keeping the unprojected step");
            let violation = max_violation(&problem, &problem.u_nom, &vec![0.0; problem.relax_dim]);
            (tau_j, (problem.rows.len(), iterations, residual, violation, false, false))
        }
        Ok(sol) => {
            log::debug!("QP record: {}", debug_record(&problem, Some(&sol)));
            return Err(InvarianceError::NotConverged {
                step: j,
                residual: sol.kkt_residual,
            });
        }
        Err(e) => return Err(InvarianceError::Qp { step: j, source: e }),
    };

    let mut record = StepRecord::describe(&next, j, ctx.specs, gamma, cfg.record_barriers)?;
    let (qp_rows, iterations, residual, violation, converged, projected) = qp_stats;
    record.qp_rows = qp_rows;
    record.qp_iterations = iterations;
    record.kkt_residual = residual;
    record.max_row_violation = violation;
    record.qp_converged = converged;
    record.projected = projected;
    record.fallback = fallback;
    record.wall_time_s = started.elapsed().as_secs_f64();
    Ok((next, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeSample {
    pub trajectory: Trajectory,
    /// Record of the prior sample (`j = N`) followed by one record per step.
    pub steps: Vec<StepRecord>,
    pub gamma: Option<GammaSchedule>,
}

impl SafeSample {
    pub fn final_min_barrier(&self) -> f64 {
        self.steps
            .last()
            .map(|r| r.min_barrier.iter().copied().fold(f64::INFINITY, f64::min))
            .unwrap_or(f64::INFINITY)
    }

    /// Mean wall time of the reverse steps (excluding the prior record).
    pub fn mean_step_time(&self) -> f64 {
        let steps = &self.steps[1..];
        steps.iter().map(|r| r.wall_time_s).sum::<f64>() / steps.len().max(1) as f64
    }
}

/// Rejects conditioning that sits inside a spec.
pub fn check_conditioning(cond: &Conditioning, specs: &[BarrierSpec]) -> Result<(), InvarianceError> {
    for (s, spec) in specs.iter().enumerate() {
        let single = spec.terminal_fallback().unwrap_or_else(|| spec.clone());
        for (which, x) in [("start", &cond.start), ("goal", &cond.goal)] {
            let value = single.eval(x, None)?;
            if value < 0.0 {
                return Err(InvarianceError::ConditionViolatesSpec {
                    spec: s,
                    which,
                    value,
                });
            }
        }
    }
    Ok(())
}

/// Full safe reverse chain `N -> 0` (then `-1 .. -N_a` in ReS mode).
pub fn safe_sample<R: Rng + ?Sized>(
    model: &DenoiserModel,
    sched: &DiffusionSchedule,
    cond: Option<&Conditioning>,
    specs: &[BarrierSpec],
    config: &InvarianceConfig,
    rng: &mut R,
) -> Result<SafeSample, InvarianceError> {
    config.validate()?;
    let arch = model.architecture();
    if let Some(bad) = specs.iter().position(|s| s.min_state_dim() > arch.state_dim) {
        return Err(InvarianceError::InvalidConfig(format!(
            "spec {bad} reads a dimension beyond the state size {}",
            arch.state_dim
        )));
    }
    if let Some(c) = cond {
        check_conditioning(c, specs)?;
    }
    let n = sched.steps();
    let mut tau = prior_sample(arch.horizon, arch.state_dim, rng);
    if let Some(c) = cond {
        c.check(&tau)?;
        c.apply(&mut tau);
    }
    let active = config.mode != SafetyMode::Off && !specs.is_empty();
    let gamma = match (config.mode, config.gamma_init) {
        (SafetyMode::TVS, GammaInit::FromPrior) if active => {
            Some(init_gamma(&tau, specs, config.gamma_margin, n)?)
        }
        (SafetyMode::TVS, GammaInit::Zero) if active => {
            Some(GammaSchedule::zero(specs.len(), arch.horizon, n))
        }
        _ => None,
    };
    let ctx = SafeStepContext {
        model,
        sched,
        specs,
        config,
        cond,
    };
    let mut records = vec![StepRecord::describe(
        &tau,
        n as i64,
        specs,
        gamma.as_ref(),
        config.record_barriers,
    )?];
    let extra = if active && config.mode == SafetyMode::ReS {
        config.n_extra as i64
    } else {
        0
    };
    for j in (-extra..n as i64).rev() {
        let (next, record) = safe_denoise_step(&ctx, &tau, j, gamma.as_ref(), rng)?;
        tau = next;
        records.push(record);
    }
    Ok(SafeSample {
        trajectory: tau,
        steps: records,
        gamma,
    })
}
