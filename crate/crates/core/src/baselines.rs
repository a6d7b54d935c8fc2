//! Comparison samplers: per-step truncation and barrier-gradient guidance.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    prior_sample, reverse_step, Conditioning, DenoiserModel, DiffusionSchedule,
    SampleOptions, Trajectory,
};
use crate::invariance::InvarianceError;
use crate::specs::BarrierSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSample {
    pub trajectory: Trajectory,
    /// Indices of specs the method could not enforce.
    pub unsupported: Vec<usize>,
    pub steps: usize,
    pub wall_time_s: f64,
}

impl BaselineSample {
    pub fn mean_step_time(&self) -> f64 {
        self.wall_time_s / self.steps.max(1) as f64
    }
}

/// Projects every state onto each single-state spec in turn. Returns the
/// indices of specs that were skipped (adjacent-pair specs).
pub fn truncate_states(tau: &mut Trajectory, specs: &[BarrierSpec]) -> Result<Vec<usize>, InvarianceError> {
    let mut skipped = Vec::new();
    for (s, spec) in specs.iter().enumerate() {
        let mut supported = true;
        for k in 0..tau.len() {
            supported &= spec.project_state(tau.state_mut(k))?;
        }
        if !supported {
            skipped.push(s);
        }
    }
    Ok(skipped)
}

fn run_chain<R, F>(
    model: &DenoiserModel,
    sched: &DiffusionSchedule,
    cond: Option<&Conditioning>,
    opts: SampleOptions,
    rng: &mut R,
    mut after_mean: F,
    mut after_step: impl FnMut(&mut Trajectory) -> Result<(), InvarianceError>,
) -> Result<(Trajectory, f64), InvarianceError>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Trajectory),
{
    let arch = model.architecture();
    let mut tau = prior_sample(arch.horizon, arch.state_dim, rng);
    if let Some(c) = cond {
        c.check(&tau)?;
        c.apply(&mut tau);
    }
    let started = Instant::now();
    for t in (1..=sched.steps()).rev() {
        tau = reverse_step(model, &tau, t, sched, opts, rng, &mut after_mean)?;
        after_step(&mut tau)?;
        if let Some(c) = cond {
            c.apply(&mut tau);
        }
    }
    Ok((tau, started.elapsed().as_secs_f64()))
}

/// Ordinary sampling with every intermediate state projected onto the
/// single-state specs after each step.
pub fn truncate_sample<R: Rng + ?Sized>(
    model: &DenoiserModel,
    sched: &DiffusionSchedule,
    cond: Option<&Conditioning>,
    specs: &[BarrierSpec],
    opts: SampleOptions,
    rng: &mut R,
) -> Result<BaselineSample, InvarianceError> {
    let unsupported: Vec<usize> = specs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_pair())
        .map(|(i, _)| i)
        .collect();
    for s in &unsupported {
        log::warn!("truncation cannot enforce spec {s} (adjacent-pair barrier): unsupported");
    }
    let (trajectory, wall) = run_chain(model, sched, cond, opts, rng, |_| {}, |tau| {
        truncate_states(tau, specs).map(|_| ())
    })?;
    Ok(BaselineSample {
        trajectory,
        unsupported,
        steps: sched.steps(),
        wall_time_s: wall,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub scale: f64,
    /// Only states with `b < band` are pushed. `None` pushes everywhere.
    pub epsilon_band: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 0.1,
            epsilon_band: None,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean shift `-scale * grad sum softplus(-b)`, i.e. `scale * sigmoid(-b) grad b`
/// accumulated over every spec and planning step, evaluated at `tau`.
pub fn guidance_shift(
    tau: &Trajectory,
    specs: &[BarrierSpec],
    cfg: &GuidanceConfig,
) -> Result<Vec<f64>, InvarianceError> {
    let d = tau.dim();
    let h = tau.horizon();
    let mut shift = vec![0.0; tau.as_flat().len()];
    for spec in specs {
        let fallback = spec.terminal_fallback();
        for k in 0..=h {
            let (b, grad) = if spec.is_pair() && k < h {
                let next = Some(tau.state(k + 1));
                (spec.eval(tau.state(k), next)?, spec.gradient(tau.state(k), next)?)
            } else {
                let single = fallback.as_ref().unwrap_or(spec);
                (single.eval(tau.state(k), None)?, single.gradient(tau.state(k), None)?)
            };
            if cfg.epsilon_band.is_some_and(|band| b >= band) {
                continue;
            }
            let w = cfg.scale * sigmoid(-b);
            for (i, g) in grad.current.iter().enumerate() {
                shift[k * d + i] += w * g;
            }
            if let Some(next) = &grad.next {
                for (i, g) in next.iter().enumerate() {
                    shift[(k + 1) * d + i] += w * g;
                }
            }
        }
    }
    Ok(shift)
}

/// Sampling with the posterior mean nudged up the barrier gradients.
/// `scale = 0` reproduces plain sampling exactly.
pub fn guided_sample<R: Rng + ?Sized>(
    model: &DenoiserModel,
    sched: &DiffusionSchedule,
    cond: Option<&Conditioning>,
    specs: &[BarrierSpec],
    cfg: &GuidanceConfig,
    opts: SampleOptions,
    rng: &mut R,
) -> Result<BaselineSample, InvarianceError> {
    if !cfg.scale.is_finite() || cfg.scale < 0.0 {
        return Err(InvarianceError::InvalidConfig("guidance scale must be >= 0".into()));
    }
    let mut failure: Option<InvarianceError> = None;
    let active = cfg.scale > 0.0 && !specs.is_empty();
    let (trajectory, wall) = run_chain(
        model,
        sched,
        cond,
        opts,
        rng,
        |mean| {
            if !active || failure.is_some() {
                return;
            }
            match guidance_shift(mean, specs, cfg) {
                Ok(shift) => {
                    for (m, s) in mean.as_flat_mut().iter_mut().zip(&shift) {
                        *m += s;
                    }
                }
                Err(e) => failure = Some(e),
            }
        },
        |_| Ok(()),
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(BaselineSample {
        trajectory,
        unsupported: Vec::new(),
        steps: sched.steps(),
        wall_time_s: wall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample_with, Architecture};
    use crate::invariance::barrier_matrix;
    use crate::specs::{make_ellipse, make_floor, make_speed_dependent_roof};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (DenoiserModel, DiffusionSchedule) {
        let arch = Architecture {
            horizon: 4,
            state_dim: 2,
            time_embedding: 8,
            hidden: 16,
            hidden_layers: 2,
        };
        (
            DenoiserModel::random(arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap(),
            DiffusionSchedule::linear(10, 1e-3, 0.3).unwrap(),
        )
    }

    #[test]
    fn truncation_projects_simple_specs() {
        let (model, sched) = toy();
        let specs = vec![
            make_ellipse([0.0, 0.0], [0.7, 0.7]).unwrap(),
            make_floor(-0.2, 1).unwrap(),
        ];
        let out = truncate_sample(&model, &sched, None, &specs, SampleOptions::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(out.unsupported.is_empty());
        let m = barrier_matrix(&out.trajectory, &specs).unwrap();
        // The floor clamp comes last so it holds exactly.
        assert!(m[1].iter().all(|b| *b >= 0.0));
    }

    #[test]
    fn truncation_reports_pair_specs() {
        let (model, sched) = toy();
        let specs = vec![make_speed_dependent_roof(1.0, 0.5, 0).unwrap()];
        let out = truncate_sample(&model, &sched, None, &specs, SampleOptions::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.unsupported, vec![0]);
        let mut tau = Trajectory::from_flat(1, 2, vec![2.0, 0.0, 3.0, 0.0]).unwrap();
        assert_eq!(truncate_states(&mut tau, &specs).unwrap(), vec![0]);
        assert_eq!(tau.as_flat(), &[2.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn zero_scale_guidance_is_plain_sampling() {
        let (model, sched) = toy();
        let specs = vec![make_ellipse([0.0, 0.0], [0.7, 0.7]).unwrap()];
        let cfg = GuidanceConfig {
            scale: 0.0,
            epsilon_band: None,
        };
        let g = guided_sample(&model, &sched, None, &specs, &cfg, SampleOptions::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let plain = sample_with(&model, &sched, None, SampleOptions::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(g.trajectory.as_flat(), plain.as_flat());
    }

    #[test]
    fn guidance_points_up_the_gradient() {
        let spec = make_floor(0.0, 0).unwrap();
        let tau = Trajectory::from_flat(1, 1, vec![-1.0, 5.0]).unwrap();
        let cfg = GuidanceConfig {
            scale: 2.0,
            epsilon_band: None,
        };
        let shift = guidance_shift(&tau, &[spec.clone()], &cfg).unwrap();
        assert!((shift[0] - 2.0 * sigmoid(1.0)).abs() < 1e-15);
        assert!(shift[1] > 0.0 && shift[1] < shift[0]);
        let banded = GuidanceConfig {
            scale: 2.0,
            epsilon_band: Some(0.5),
        };
        let shift = guidance_shift(&tau, &[spec], &banded).unwrap();
        assert_eq!(shift[1], 0.0);
        assert!(shift[0] > 0.0);
    }

    #[test]
    fn guidance_rejects_negative_scale() {
        let (model, sched) = toy();
        let cfg = GuidanceConfig {
            scale: -1.0,
            epsilon_band: None,
        };
        assert!(guided_sample(&model, &sched, None, &[], &cfg, SampleOptions::default(), &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
