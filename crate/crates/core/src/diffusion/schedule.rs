use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Variance schedule of the forward process, indexed by step `t` in `1..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variance: Vec<f64>,
}

impl DiffusionSchedule {
    /// Betas interpolated linearly from `beta_min` (t = 1) to `beta_max` (t = N).
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::InvalidSchedule("need at least one step".into()));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule(
                "betas must lie strictly inside (0, 1)".into(),
            ));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_variance = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_variance,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            Err(DiffusionError::StepOutOfRange {
                step: t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// The chain ends close to the standard normal prior.
    pub fn is_well_mixed(&self) -> bool {
        self.alpha_bars[self.steps() - 1] < 0.01
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_step() {
        let s = DiffusionSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn two_steps() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(1), 0.9);
        assert_abs_diff_eq!(s.alpha_bar(2), 0.72, epsilon = 1e-15);
        assert_abs_diff_eq!(s.posterior_variance(2), 0.2 * 0.1 / 0.28, epsilon = 1e-15);
    }

    #[test]
    fn long_linear_schedules() {
        // Product computed independently: prod(1 - linspace(1e-4, 2e-2, 256)).
        let s = DiffusionSchedule::linear(256, 1e-4, 2e-2).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(256), 0.075_008_049_429_064_94, epsilon = 1e-12);
        assert!(!s.is_well_mixed());

        let s = DiffusionSchedule::linear(256, 1e-4, 5e-2).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(256), 1.469_762_270_504_158_5e-3, epsilon = 1e-12);
        assert!(s.is_well_mixed());
        assert!(s.alpha_bar(1) > 0.999);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn invalid_inputs() {
        assert!(DiffusionSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::linear(4, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::linear(4, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::from_betas(vec![1.0]).is_err());
        let s = DiffusionSchedule::linear(4, 0.1, 0.2).unwrap();
        assert!(s.check_step(0).is_err());
        assert!(s.check_step(5).is_err());
        assert!(s.check_step(4).is_ok());
    }
}
