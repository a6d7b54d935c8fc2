use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DenoiserModel, DiffusionError, DiffusionSchedule, Trajectory};

/// Clean start and goal states pinned at `k = 0` and `k = H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
}

impl Conditioning {
    pub fn new(start: Vec<f64>, goal: Vec<f64>) -> Result<Self, DiffusionError> {
        if start.len() != goal.len() || start.iter().chain(&goal).any(|v| !v.is_finite()) {
            return Err(DiffusionError::ShapeMismatch(
                "start and goal must be finite and of equal dimension".into(),
            ));
        }
        Ok(Self { start, goal })
    }

    pub fn check(&self, traj: &Trajectory) -> Result<(), DiffusionError> {
        if self.start.len() != traj.dim() {
            return Err(DiffusionError::ShapeMismatch(format!(
                "conditioning has dimension {}, trajectory {}",
                self.start.len(),
                traj.dim()
            )));
        }
        Ok(())
    }

    /// Overwrites the endpoints with the clean conditioning values.
    pub fn apply(&self, traj: &mut Trajectory) {
        let h = traj.horizon();
        traj.state_mut(0).copy_from_slice(&self.start);
        traj.state_mut(h).copy_from_slice(&self.goal);
    }

    pub fn pinned_steps(&self, horizon: usize) -> [usize; 2] {
        [0, horizon]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOptions {
    /// Add `sigma_t z` after the mean. Off gives a deterministic chain.
    pub inject_noise: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { inject_noise: true }
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(
    tau0: &Trajectory,
    t: usize,
    eps: &Trajectory,
    sched: &DiffusionSchedule,
) -> Result<Trajectory, DiffusionError> {
    sched.check_step(t)?;
    if tau0.states().dim() != eps.states().dim() {
        return Err(DiffusionError::ShapeMismatch("noise shape differs".into()));
    }
    let ab = sched.alpha_bar(t);
    let out = tau0.states() * ab.sqrt() + eps.states() * (1.0 - ab).sqrt();
    Ok(Trajectory::from_array_unchecked(out))
}

/// `(tau_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t)`.
pub fn posterior_mean(
    model: &DenoiserModel,
    tau: &Trajectory,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Trajectory, DiffusionError> {
    sched.check_step(t)?;
    let eps_hat = model.predict(tau.as_flat(), t)?;
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    let mut mean = tau.clone();
    for (m, e) in mean.as_flat_mut().iter_mut().zip(&eps_hat) {
        *m = (*m - coef * e) * inv;
    }
    Ok(mean)
}

/// One ancestral step `t -> t - 1`. `shift_mean` may modify the mean before
/// the Gaussian term is added (used by guidance).
pub fn reverse_step<R, F>(
    model: &DenoiserModel,
    tau: &Trajectory,
    t: usize,
    sched: &DiffusionSchedule,
    opts: SampleOptions,
    rng: &mut R,
    shift_mean: F,
) -> Result<Trajectory, DiffusionError>
where
    R: Rng + ?Sized,
    F: FnOnce(&mut Trajectory),
{
    let mut next = posterior_mean(model, tau, t, sched)?;
    shift_mean(&mut next);
    let var = sched.posterior_variance(t);
    if opts.inject_noise && t > 1 && var > 0.0 {
        let sigma = var.sqrt();
        for v in next.as_flat_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(next)
}

pub fn denoise_step<R: Rng + ?Sized>(
    model: &DenoiserModel,
    tau: &Trajectory,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Trajectory, DiffusionError> {
    reverse_step(model, tau, t, sched, SampleOptions::default(), rng, |_| {})
}

pub fn denoise_step_with<R: Rng + ?Sized>(
    model: &DenoiserModel,
    tau: &Trajectory,
    t: usize,
    sched: &DiffusionSchedule,
    opts: SampleOptions,
    rng: &mut R,
) -> Result<Trajectory, DiffusionError> {
    reverse_step(model, tau, t, sched, opts, rng, |_| {})
}

pub fn prior_sample<R: Rng + ?Sized>(horizon: usize, dim: usize, rng: &mut R) -> Trajectory {
    let states = Array2::from_shape_simple_fn((horizon + 1, dim), || rng.sample(StandardNormal));
    Trajectory::from_array_unchecked(states)
}

pub fn sample<R: Rng + ?Sized>(
    model: &DenoiserModel,
    sched: &DiffusionSchedule,
    cond: Option<&Conditioning>,
    rng: &mut R,
) -> Result<Trajectory, DiffusionError> {
    sample_with(model, sched, cond, SampleOptions::default(), rng)
}

/// Full reverse chain `N -> 0` from the standard normal prior, with the
/// endpoints re-pinned after every step.
pub fn sample_with<R: Rng + ?Sized>(
    model: &DenoiserModel,
    sched: &DiffusionSchedule,
    cond: Option<&Conditioning>,
    opts: SampleOptions,
    rng: &mut R,
) -> Result<Trajectory, DiffusionError> {
    let arch = model.architecture();
    let mut tau = prior_sample(arch.horizon, arch.state_dim, rng);
    if let Some(c) = cond {
        c.check(&tau)?;
        c.apply(&mut tau);
    }
    for t in (1..=sched.steps()).rev() {
        tau = denoise_step_with(model, &tau, t, sched, opts, rng)?;
        if let Some(c) = cond {
            c.apply(&mut tau);
        }
    }
    Ok(tau)
}

/// Unconditioned samples, one flattened trajectory per row, denoised as a
/// single batch.
pub fn sample_batch<R: Rng + ?Sized>(
    model: &DenoiserModel,
    sched: &DiffusionSchedule,
    count: usize,
    rng: &mut R,
) -> Result<Array2<f64>, DiffusionError> {
    let width = model.architecture().data_len();
    let mut x = Array2::from_shape_simple_fn((count, width), || rng.sample(StandardNormal));
    for t in (1..=sched.steps()).rev() {
        let eps_hat = model.forward_batch(x.view(), &vec![t; count])?;
        let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv = 1.0 / sched.alpha(t).sqrt();
        x.zip_mut_with(&eps_hat, |v, e| *v = (*v - coef * e) * inv);
        let var = sched.posterior_variance(t);
        if t > 1 && var > 0.0 {
            let sigma = var.sqrt();
            x.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Architecture;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> Architecture {
        Architecture {
            horizon: 4,
            state_dim: 2,
            time_embedding: 8,
            hidden: 16,
            hidden_layers: 2,
        }
    }

    #[test]
    fn forward_noise_limits() {
        let x0 = Trajectory::from_flat(1, 2, vec![1.0; 4]).unwrap();
        let eps = Trajectory::from_flat(1, 2, vec![1.0; 4]).unwrap();
        let sched = DiffusionSchedule::from_betas(vec![0.75]).unwrap();
        let out = forward_noise(&x0, 1, &eps, &sched).unwrap();
        for v in out.as_flat() {
            assert_abs_diff_eq!(*v, 0.5 + 0.75f64.sqrt(), epsilon = 1e-15);
        }
        assert!(forward_noise(&x0, 2, &eps, &sched).is_err());

        let tiny = DiffusionSchedule::from_betas(vec![1e-300]).unwrap();
        let out = forward_noise(&x0, 1, &Trajectory::from_flat(1, 2, vec![5.0; 4]).unwrap(), &tiny)
            .unwrap();
        assert_eq!(out.as_flat(), x0.as_flat());
    }

    #[test]
    fn forward_noise_at_last_step_is_standard_normal() {
        let sched = DiffusionSchedule::linear(256, 1e-4, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Trajectory::from_flat(4_999, 2, vec![0.8; 10_000]).unwrap();
        let eps = prior_sample(4_999, 2, &mut rng);
        let out = forward_noise(&x0, 256, &eps, &sched).unwrap();
        let n = out.as_flat().len() as f64;
        let mean = out.as_flat().iter().sum::<f64>() / n;
        let var = out.as_flat().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        // 3 sigma bounds for the sample mean and variance of 1e4 draws.
        assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "var {var}");
    }

    #[test]
    fn last_step_is_deterministic() {
        let sched = DiffusionSchedule::linear(5, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = DenoiserModel::random(arch(), &mut rng).unwrap();
        let tau = prior_sample(4, 2, &mut rng);
        let a = denoise_step(&model, &tau, 1, &sched, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = denoise_step(&model, &tau, 1, &sched, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, posterior_mean(&model, &tau, 1, &sched).unwrap());
    }

    #[test]
    fn zero_prediction_small_beta_is_near_identity() {
        let sched = DiffusionSchedule::from_betas(vec![1e-12]).unwrap();
        let model = DenoiserModel::zeros(arch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tau = prior_sample(4, 2, &mut rng);
        let out = denoise_step(&model, &tau, 1, &sched, &mut rng).unwrap();
        assert!(out.max_abs_diff(&tau) < 1e-11);
    }

    #[test]
    fn zero_model_single_step_returns_scaled_prior_with_pins() {
        let sched = DiffusionSchedule::from_betas(vec![0.36]).unwrap();
        let model = DenoiserModel::zeros(arch()).unwrap();
        let cond = Conditioning::new(vec![0.1, 0.2], vec![-0.3, 0.4]).unwrap();
        let out = sample(&model, &sched, Some(&cond), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut prior = prior_sample(4, 2, &mut ChaCha8Rng::seed_from_u64(9));
        cond.apply(&mut prior);
        assert_eq!(out.state(0), &[0.1, 0.2]);
        assert_eq!(out.state(4), &[-0.3, 0.4]);
        for k in 1..4 {
            for i in 0..2 {
                assert_abs_diff_eq!(out.state(k)[i], prior.state(k)[i] / 0.8, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn sampling_is_reproducible_and_pinned() {
        let sched = DiffusionSchedule::linear(10, 1e-3, 0.2).unwrap();
        let model = DenoiserModel::random(arch(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cond = Conditioning::new(vec![0.5, 0.5], vec![-0.5, -0.5]).unwrap();
        let a = sample(&model, &sched, Some(&cond), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample(&model, &sched, Some(&cond), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.as_flat(), b.as_flat());
        assert_eq!(a.state(0), cond.start.as_slice());
        assert_eq!(a.state(4), cond.goal.as_slice());
        let bad = Conditioning::new(vec![0.0], vec![0.0]).unwrap();
        assert!(sample(&model, &sched, Some(&bad), &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn batch_sampler_matches_single_sampler() {
        let sched = DiffusionSchedule::linear(6, 1e-3, 0.2).unwrap();
        let model = DenoiserModel::random(arch(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let batch = sample_batch(&model, &sched, 1, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let single = sample(&model, &sched, None, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        for (a, b) in batch.iter().zip(single.as_flat()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }
}
