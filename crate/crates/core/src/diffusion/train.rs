use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dense, DenoiserModel, DiffusionError, DiffusionSchedule, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            optimizer: Optimizer::Sgd,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean epsilon-MSE over the minibatches of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainingLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

struct AdamState {
    m: Vec<Dense>,
    v: Vec<Dense>,
    t: i32,
}

fn apply_update(
    model: &mut DenoiserModel,
    grads: &[Dense],
    cfg: &TrainConfig,
    adam: &mut Option<AdamState>,
) {
    match (cfg.optimizer, adam.as_mut()) {
        (Optimizer::Adam { beta1, beta2, eps }, Some(state)) => {
            state.t += 1;
            let c1 = 1.0 - beta1.powi(state.t);
            let c2 = 1.0 - beta2.powi(state.t);
            for (((layer, g), m), v) in model
                .layers_mut()
                .iter_mut()
                .zip(grads)
                .zip(&mut state.m)
                .zip(&mut state.v)
            {
                let step = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                };
                Zip::from(&mut layer.weight)
                    .and(&g.weight)
                    .and(&mut m.weight)
                    .and(&mut v.weight)
                    .for_each(step);
                Zip::from(&mut layer.bias)
                    .and(&g.bias)
                    .and(&mut m.bias)
                    .and(&mut v.bias)
                    .for_each(step);
            }
        }
        _ => {
            for (layer, g) in model.layers_mut().iter_mut().zip(grads) {
                layer.weight.scaled_add(-cfg.lr, &g.weight);
                layer.bias.scaled_add(-cfg.lr, &g.bias);
            }
        }
    }
}

fn stack(data: &[Trajectory], idx: &[usize], width: usize) -> Array2<f64> {
    let mut x = Array2::zeros((idx.len(), width));
    for (mut row, i) in x.rows_mut().into_iter().zip(idx) {
        row.as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(data[*i].as_flat());
    }
    x
}

/// One minibatch of the epsilon-MSE objective: returns the loss and, when
/// `grads` is requested, the parameter gradients.
fn minibatch<R: Rng + ?Sized>(
    model: &DenoiserModel,
    clean: &Array2<f64>,
    sched: &DiffusionSchedule,
    rng: &mut R,
    want_grads: bool,
) -> Result<(f64, Option<Vec<Dense>>), DiffusionError> {
    let (batch, width) = clean.dim();
    let steps: Vec<usize> = (0..batch)
        .map(|_| rng.random_range(1..=sched.steps()))
        .collect();
    let eps: Array2<f64> =
        Array2::from_shape_simple_fn((batch, width), || rng.sample(StandardNormal));
    let mut noisy = clean.clone();
    for (b, t) in steps.iter().enumerate() {
        let ab = sched.alpha_bar(*t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut row = noisy.row_mut(b);
        row.zip_mut_with(&eps.row(b), |x, e| *x = sa * *x + sn * e);
    }
    let scale = 1.0 / (batch * width) as f64;
    if want_grads {
        let (pred, cache) = model.forward_cached(noisy.view(), &steps)?;
        let diff = &pred - &eps;
        let loss = diff.mapv(|v| v * v).sum() * scale;
        let grad_out = diff * (2.0 * scale);
        Ok((loss, Some(model.backward(&cache, grad_out.view()))))
    } else {
        let pred = model.forward_batch(noisy.view(), &steps)?;
        Ok(((&pred - &eps).mapv(|v| v * v).sum() * scale, None))
    }
}

/// Trains with the simplified objective `E || eps - eps_hat(x_t, t) ||^2`.
///
/// Batches are drawn from a per-epoch shuffle driven by `rng`, so a fixed
/// seed reproduces the run exactly.
pub fn train<R: Rng + ?Sized>(
    model: &mut DenoiserModel,
    data: &[Trajectory],
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingLog, DiffusionError> {
    if data.is_empty() || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(DiffusionError::InvalidTraining(
            "need data, a positive batch size and a positive learning rate".into(),
        ));
    }
    let width = model.architecture().data_len();
    if let Some(bad) = data.iter().position(|t| t.as_flat().len() != width) {
        return Err(DiffusionError::ShapeMismatch(format!(
            "trajectory {bad} does not match the model input"
        )));
    }
    let mut adam = match cfg.optimizer {
        Optimizer::Adam { .. } => {
            let zeros: Vec<Dense> = model
                .layers()
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: ndarray::Array1::zeros(l.bias.len()),
                })
                .collect();
            Some(AdamState {
                m: zeros.clone(),
                v: zeros,
                t: 0,
            })
        }
        Optimizer::Sgd => None,
    };

    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let clean = stack(data, idx, width);
            let (loss, grads) = minibatch(model, &clean, sched, rng, true)?;
            if !loss.is_finite() {
                return Err(DiffusionError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            apply_update(model, &grads.expect("requested"), cfg, &mut adam);
            total += loss;
            batches += 1;
            log.steps += 1;
        }
        log.epoch_losses.push(total / batches as f64);
        log::debug!("epoch {epoch}: loss {:.6}", total / batches as f64);
    }
    Ok(log)
}

/// Evaluation loss over the whole dataset without updating the model.
pub fn epoch_loss<R: Rng + ?Sized>(
    model: &DenoiserModel,
    data: &[Trajectory],
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<f64, DiffusionError> {
    let width = model.architecture().data_len();
    let idx: Vec<usize> = (0..data.len()).collect();
    let clean = stack(data, &idx, width);
    Ok(minibatch(model, &clean, sched, rng, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> Architecture {
        Architecture {
            horizon: 3,
            state_dim: 2,
            time_embedding: 8,
            hidden: 32,
            hidden_layers: 2,
        }
    }

    #[test]
    fn identical_trajectories_loss_drops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sched = DiffusionSchedule::linear(20, 1e-3, 0.3).unwrap();
        let traj = Trajectory::from_rows(&[
            vec![-0.5, 0.2],
            vec![0.0, 0.4],
            vec![0.3, 0.1],
            vec![0.6, -0.2],
        ])
        .unwrap();
        let data = vec![traj; 64];
        let mut model = DenoiserModel::random(arch(), &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            optimizer: Optimizer::adam(),
        };
        let log = train(&mut model, &data, &sched, &cfg, &mut rng).unwrap();
        assert_eq!(log.epoch_losses.len(), 100);
        assert_eq!(log.steps, 400);
        assert!(log.final_loss().unwrap() < log.epoch_losses[0]);
    }

    #[test]
    fn sgd_is_deterministic_under_seed() {
        let sched = DiffusionSchedule::linear(10, 1e-3, 0.2).unwrap();
        let data: Vec<Trajectory> = (0..8)
            .map(|i| Trajectory::from_flat(3, 2, (0..8).map(|j| ((i + j) as f64).sin()).collect()).unwrap())
            .collect();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut model = DenoiserModel::random(arch(), &mut rng).unwrap();
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 4,
                lr: 1e-2,
                optimizer: Optimizer::Sgd,
            };
            train(&mut model, &data, &sched, &cfg, &mut rng).unwrap();
            model
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergent_training_aborts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sched = DiffusionSchedule::linear(10, 1e-3, 0.2).unwrap();
        let data = vec![Trajectory::from_flat(3, 2, vec![1.0; 8]).unwrap(); 4];
        let mut model = DenoiserModel::random(arch(), &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            lr: 1e6,
            optimizer: Optimizer::Sgd,
        };
        assert!(matches!(
            train(&mut model, &data, &sched, &cfg, &mut rng),
            Err(DiffusionError::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn rejects_bad_setup() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sched = DiffusionSchedule::linear(10, 1e-3, 0.2).unwrap();
        let mut model = DenoiserModel::zeros(arch()).unwrap();
        let cfg = TrainConfig::default();
        assert!(train(&mut model, &[], &sched, &cfg, &mut rng).is_err());
        let wrong = vec![Trajectory::zeros(1, 2)];
        assert!(train(&mut model, &wrong, &sched, &cfg, &mut rng).is_err());
    }
}
