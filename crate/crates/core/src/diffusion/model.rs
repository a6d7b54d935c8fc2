use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DiffusionError;

pub const CHECKPOINT_FORMAT: &str = "cbf-diffusion-denoiser";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Dense epsilon-prediction network over a flattened trajectory plus a
/// sinusoidal embedding of the diffusion step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub horizon: usize,
    pub state_dim: usize,
    pub time_embedding: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Architecture {
    pub fn new(horizon: usize, state_dim: usize) -> Self {
        Self {
            horizon,
            state_dim,
            time_embedding: 32,
            hidden: 256,
            hidden_layers: 3,
        }
    }

    pub fn data_len(&self) -> usize {
        (self.horizon + 1) * self.state_dim
    }

    pub fn input_len(&self) -> usize {
        self.data_len() + self.time_embedding
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_len();
        for _ in 0..self.hidden_layers {
            shapes.push((fan_in, self.hidden));
            fan_in = self.hidden;
        }
        shapes.push((fan_in, self.data_len()));
        shapes
    }

    fn validate(&self) -> Result<(), DiffusionError> {
        if self.state_dim == 0 || self.time_embedding % 2 != 0 || self.hidden == 0 {
            return Err(DiffusionError::ShapeMismatch(format!(
                "invalid architecture {self:?}"
            )));
        }
        Ok(())
    }
}

/// `y = x W + b`, with `W` stored `(inputs, outputs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: Architecture,
    layers: Vec<Dense>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Sinusoidal embedding `[sin(t w_i), cos(t w_i)]` with `w_i = 10000^(-i/half)`.
pub fn sinusoidal_embedding(step: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (step * freq).sin();
        out[half + i] = (step * freq).cos();
    }
    out
}

impl DenoiserModel {
    pub fn zeros(arch: Architecture) -> Result<Self, DiffusionError> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Ok(Self { arch, layers })
    }

    /// Gaussian init with variance `1 / fan_in`.
    pub fn random<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self, DiffusionError> {
        let mut model = Self::zeros(arch)?;
        for layer in &mut model.layers {
            let std = (1.0 / layer.weight.nrows() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            layer.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        }
        Ok(model)
    }

    pub fn from_layers(arch: Architecture, layers: Vec<Dense>) -> Result<Self, DiffusionError> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if shapes.len() != layers.len()
            || shapes
                .iter()
                .zip(&layers)
                .any(|(s, l)| l.weight.dim() != *s || l.bias.len() != s.1)
        {
            return Err(DiffusionError::ShapeMismatch(
                "layer shapes do not match the architecture".into(),
            ));
        }
        if layers
            .iter()
            .any(|l| l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()))
        {
            return Err(DiffusionError::ShapeMismatch("non-finite weight".into()));
        }
        Ok(Self { arch, layers })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Flat view of all parameters, layer by layer (weights then bias).
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.layers {
            let (nw, nb) = (layer.weight.len(), layer.bias.len());
            if index < nw {
                return layer.weight.iter_mut().nth(index).expect("in range");
            }
            index -= nw;
            if index < nb {
                return &mut layer.bias[index];
            }
            index -= nb;
        }
        panic!("parameter index out of range");
    }

    fn build_input(&self, x: ArrayView2<'_, f64>, steps: &[usize]) -> Array2<f64> {
        let emb_dim = self.arch.time_embedding;
        let mut emb = Array2::zeros((x.nrows(), emb_dim));
        for (mut row, t) in emb.rows_mut().into_iter().zip(steps) {
            for (dst, v) in row.iter_mut().zip(sinusoidal_embedding(*t as f64, emb_dim)) {
                *dst = v;
            }
        }
        concatenate(Axis(1), &[x, emb.view()]).expect("row counts agree")
    }

    fn check_batch(&self, x: &ArrayView2<'_, f64>, steps: &[usize]) -> Result<(), DiffusionError> {
        if x.ncols() != self.arch.data_len() || x.nrows() != steps.len() {
            return Err(DiffusionError::ShapeMismatch(format!(
                "batch {:?} with {} steps, model expects {} columns",
                x.dim(),
                steps.len(),
                self.arch.data_len()
            )));
        }
        Ok(())
    }

    /// Predicted noise for a batch of flattened trajectories, one row per
    /// sample, each at its own diffusion step.
    pub fn forward_batch(
        &self,
        x: ArrayView2<'_, f64>,
        steps: &[usize],
    ) -> Result<Array2<f64>, DiffusionError> {
        self.check_batch(&x, steps)?;
        let mut a = self.build_input(x, steps);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight);
            z += &layer.bias;
            if l < last {
                z.mapv_inplace(silu);
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_cached(
        &self,
        x: ArrayView2<'_, f64>,
        steps: &[usize],
    ) -> Result<(Array2<f64>, ForwardCache), DiffusionError> {
        self.check_batch(&x, steps)?;
        let mut a = self.build_input(x, steps);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight);
            z += &layer.bias;
            inputs.push(a);
            if l < last {
                a = z.mapv(silu);
                pre.push(z);
            } else {
                a = z;
            }
        }
        Ok((a, ForwardCache { inputs, pre }))
    }

    /// Parameter gradients of a scalar loss given `dL/d(output)`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<'_, f64>) -> Vec<Dense> {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let weight = cache.inputs[l].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            grads.push(Dense { weight, bias });
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].weight.t());
                back.zip_mut_with(&cache.pre[l - 1], |g, z| *g *= silu_grad(*z));
                delta = back;
            }
        }
        grads.reverse();
        grads
    }

    /// Noise prediction for a single trajectory given as a flat slice.
    pub fn predict(&self, flat: &[f64], step: usize) -> Result<Vec<f64>, DiffusionError> {
        let x = ArrayView2::from_shape((1, flat.len()), flat)
            .map_err(|e| DiffusionError::ShapeMismatch(e.to_string()))?;
        Ok(self.forward_batch(x, &[step])?.into_raw_vec_and_offset().0)
    }

    pub fn to_file(&self, extra: serde_json::Value) -> ModelFile {
        ModelFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            architecture: self.arch,
            layers: self.layers.clone(),
            extra,
        }
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), DiffusionError> {
        let text = serde_json::to_string(&self.to_file(extra))
            .map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), DiffusionError> {
        let text = std::fs::read_to_string(path)?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        file.into_model()
    }
}

/// On-disk checkpoint: versioned header, architecture and weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub layers: Vec<Dense>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl ModelFile {
    pub fn into_model(self) -> Result<(DenoiserModel, serde_json::Value), DiffusionError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(DiffusionError::Checkpoint(format!(
                "unknown format {:?}",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(DiffusionError::Checkpoint(format!(
                "unsupported version {}",
                self.version
            )));
        }
        Ok((DenoiserModel::from_layers(self.architecture, self.layers)?, self.extra))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Architecture {
        Architecture {
            horizon: 2,
            state_dim: 2,
            time_embedding: 4,
            hidden: 5,
            hidden_layers: 2,
        }
    }

    fn loss(model: &DenoiserModel, x: &Array2<f64>, steps: &[usize], target: &Array2<f64>) -> f64 {
        let y = model.forward_batch(x.view(), steps).unwrap();
        (&y - target).mapv(|v| v * v).sum()
    }

    #[test]
    fn zero_model_predicts_zero() {
        let model = DenoiserModel::zeros(small_arch()).unwrap();
        let out = model.predict(&[0.3; 6], 7).unwrap();
        assert_eq!(out, vec![0.0; 6]);
    }

    #[test]
    fn embedding_layout() {
        let e = sinusoidal_embedding(0.0, 4);
        assert_eq!(e, vec![0.0, 0.0, 1.0, 1.0]);
        let e = sinusoidal_embedding(2.0, 2);
        assert_eq!(e, vec![2f64.sin(), 2f64.cos()]);
    }

    #[test]
    fn single_linear_layer_by_hand() {
        let arch = Architecture {
            horizon: 0,
            state_dim: 2,
            time_embedding: 2,
            hidden: 1,
            hidden_layers: 0,
        };
        let layer = Dense {
            weight: array![[1.0, 2.0], [3.0, 4.0], [0.5, 0.0], [0.0, -1.0]],
            bias: array![0.1, -0.2],
        };
        let model = DenoiserModel::from_layers(arch, vec![layer]).unwrap();
        // Input [1, 1] with embedding at t = 0: [sin 0, cos 0] = [0, 1].
        let out = model.predict(&[1.0, 1.0], 0).unwrap();
        assert_eq!(out, vec![1.0 + 3.0 + 0.1, 2.0 + 4.0 - 1.0 - 0.2]);

        let x = array![[1.0, 1.0]];
        let (_, cache) = model.forward_cached(x.view(), &[0]).unwrap();
        let g = model.backward(&cache, array![[1.0, 0.0]].view());
        assert_eq!(g[0].weight.column(0).to_vec(), vec![1.0, 1.0, 0.0, 1.0]);
        assert_eq!(g[0].weight.column(1).to_vec(), vec![0.0; 4]);
        assert_eq!(g[0].bias.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = DenoiserModel::random(small_arch(), &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 6), |(i, j)| ((i * 6 + j) as f64 * 0.37).sin());
        let target = Array2::from_shape_fn((3, 6), |(i, j)| ((i + 2 * j) as f64 * 0.11).cos());
        let steps = [1, 5, 9];
        let (y, cache) = model.forward_cached(x.view(), &steps).unwrap();
        let grad_out = (&y - &target) * 2.0;
        let grads = model.backward(&cache, grad_out.view());
        let analytic: Vec<f64> = grads
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect();
        let h = 1e-6;
        for idx in 0..model.param_count() {
            let mut plus = model.clone();
            *plus.param_mut(idx) += h;
            let mut minus = model.clone();
            *minus.param_mut(idx) -= h;
            let fd = (loss(&plus, &x, &steps, &target) - loss(&minus, &x, &steps, &target)) / (2.0 * h);
            let a = analytic[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-5, "param {idx}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = DenoiserModel::random(small_arch(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path, serde_json::json!({"note": 1})).unwrap();
        let (loaded, extra) = DenoiserModel::load(&path).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(extra["note"], 1);

        let mut file = model.to_file(serde_json::Value::Null);
        file.version = 99;
        assert!(file.into_model().is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = DenoiserModel::zeros(small_arch()).unwrap();
        assert!(model.predict(&[0.0; 5], 1).is_err());
        let bad = vec![Dense::zeros(3, 3)];
        assert!(DenoiserModel::from_layers(small_arch(), bad).is_err());
    }
}
