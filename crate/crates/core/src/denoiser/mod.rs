//! Class-conditional noise predictor ε(z, t, c).
//!
//! A small MLP over `[z ; time_features(t/T) ; class_embedding(c)]` with SiLU
//! hidden activations and a linear output layer. All trainable values live in
//! one flat `Vec<f64>` (class embeddings first, then `weight, bias` per layer)
//! so the optimizer, the checkpoint format and finite-difference checks can
//! treat the model as a single tensor.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, TensorInfo};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::math::{axpy, dot, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiserError {
    #[error("class id {class_id} out of range for {n_classes} classes")]
    BadClassId { class_id: usize, n_classes: usize },
    #[error("timestep {t} outside 1..={max}")]
    BadTimestep { t: usize, max: usize },
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Latent dimension d.
    pub dim: usize,
    pub n_classes: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Number of sinusoidal frequencies; the time feature has `2 * n_freqs` entries.
    #[serde(default = "default_n_freqs")]
    pub n_freqs: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Std of the initial class-embedding rows.
    #[serde(default = "default_embed_init_std")]
    pub embed_init_std: f64,
}

fn default_embed_dim() -> usize {
    8
}
fn default_n_freqs() -> usize {
    8
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_init_std() -> f64 {
    0.02
}
fn default_embed_init_std() -> f64 {
    1.0
}

impl DenoiserConfig {
    pub fn new(dim: usize, n_classes: usize) -> Self {
        Self {
            dim,
            n_classes,
            embed_dim: default_embed_dim(),
            n_freqs: default_n_freqs(),
            hidden: default_hidden(),
            init_std: default_init_std(),
            embed_init_std: default_embed_init_std(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.dim + 2 * self.n_freqs + self.embed_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSpec {
    n_in: usize,
    n_out: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    timesteps: usize,
    layers: Vec<LayerSpec>,
    flat: Vec<f64>,
}

/// Gradients with the same flat layout as [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserGrads(pub Vec<f64>);

impl DenoiserGrads {
    pub fn zeros_like(params: &DenoiserParams) -> Self {
        Self(vec![0.0; params.num_values()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn add_scaled(&mut self, scale: f64, other: &DenoiserGrads) {
        axpy(&mut self.0, scale, &other.0);
    }
}

struct ForwardCache {
    /// Input to every layer; `inputs[0]` is the concatenated network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl DenoiserParams {
    /// All-zero parameters (the "zero denoiser").
    pub fn zeros(config: DenoiserConfig, timesteps: usize) -> Self {
        let mut layers = Vec::new();
        let mut offset = config.n_classes * config.embed_dim;
        let mut n_in = config.input_width();
        for &n_out in config.hidden.iter().chain(std::iter::once(&config.dim)) {
            layers.push(LayerSpec {
                n_in,
                n_out,
                weight: offset,
                bias: offset + n_in * n_out,
            });
            offset += n_in * n_out + n_out;
            n_in = n_out;
        }
        Self {
            config,
            timesteps,
            layers,
            flat: vec![0.0; offset],
        }
    }

    /// Gaussian weights (`init_std`), Gaussian embeddings (`embed_init_std`), zero biases.
    pub fn init(config: DenoiserConfig, timesteps: usize, rng: &mut Rng) -> Self {
        let mut params = Self::zeros(config, timesteps);
        let embed_len = params.config.n_classes * params.config.embed_dim;
        let embed_std = params.config.embed_init_std;
        for v in &mut params.flat[..embed_len] {
            *v = embed_std * rng.normal();
        }
        let std = params.config.init_std;
        for layer in params.layers.clone() {
            for v in &mut params.flat[layer.weight..layer.bias] {
                *v = std * rng.normal();
            }
        }
        params
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// The `T` used to scale time features.
    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn num_values(&self) -> usize {
        self.flat.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    /// Replaces the flat parameter vector; the length must match the layout.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<(), DenoiserError> {
        if values.len() != self.flat.len() {
            return Err(DenoiserError::ShapeMismatch {
                what: "parameter vector",
                expected: self.flat.len(),
                got: values.len(),
            });
        }
        self.flat = values;
        Ok(())
    }

    /// Named tensors in flat-layout order.
    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        let mut out = vec![TensorInfo {
            name: "class_embed".into(),
            shape: vec![self.config.n_classes, self.config.embed_dim],
        }];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(TensorInfo {
                name: format!("layer{l}.weight"),
                shape: vec![layer.n_out, layer.n_in],
            });
            out.push(TensorInfo {
                name: format!("layer{l}.bias"),
                shape: vec![layer.n_out],
            });
        }
        out
    }

    pub fn class_embedding(&self, class_id: usize) -> &[f64] {
        let e = self.config.embed_dim;
        &self.flat[class_id * e..(class_id + 1) * e]
    }

    /// Hex SHA-256 over the little-endian parameter bytes.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.flat {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn all_finite(&self) -> bool {
        crate::math::all_finite(&self.flat)
    }

    fn check_inputs(&self, z: &[f64], t: usize, class_id: usize) -> Result<(), DenoiserError> {
        if z.len() != self.config.dim {
            return Err(DenoiserError::ShapeMismatch {
                what: "latent",
                expected: self.config.dim,
                got: z.len(),
            });
        }
        if t == 0 || t > self.timesteps {
            return Err(DenoiserError::BadTimestep {
                t,
                max: self.timesteps,
            });
        }
        if class_id >= self.config.n_classes {
            return Err(DenoiserError::BadClassId {
                class_id,
                n_classes: self.config.n_classes,
            });
        }
        Ok(())
    }

    /// Fixed sinusoidal features of `t / T` at frequencies `π · 2^k`.
    pub fn time_features(&self, t: usize) -> Vec<f64> {
        let u = t as f64 / self.timesteps as f64;
        let mut out = Vec::with_capacity(2 * self.config.n_freqs);
        for k in 0..self.config.n_freqs {
            let w = std::f64::consts::PI * (1u64 << k) as f64;
            out.push((w * u).sin());
            out.push((w * u).cos());
        }
        out
    }

    fn run(&self, z: &[f64], t: usize, class_id: usize) -> ForwardCache {
        let mut input = Vec::with_capacity(self.config.input_width());
        input.extend_from_slice(z);
        input.extend(self.time_features(t));
        input.extend_from_slice(self.class_embedding(class_id));

        let mut inputs = vec![input];
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let x = &inputs[l];
            let w = &self.flat[layer.weight..layer.bias];
            let b = &self.flat[layer.bias..layer.bias + layer.n_out];
            let h: Vec<f64> = (0..layer.n_out)
                .map(|r| dot(&w[r * layer.n_in..(r + 1) * layer.n_in], x) + b[r])
                .collect();
            if l == last {
                return ForwardCache {
                    inputs,
                    pre,
                    output: h,
                };
            }
            inputs.push(h.iter().map(|&v| silu(v)).collect());
            pre.push(h);
        }
        unreachable!("network has at least an output layer")
    }

    /// Predicted noise ε(z, t, c).
    pub fn forward(&self, z: &[f64], t: usize, class_id: usize) -> Result<Vec<f64>, DenoiserError> {
        self.check_inputs(z, t, class_id)?;
        Ok(self.run(z, t, class_id).output)
    }

    /// Reverse-mode gradients of `<forward(z, t, c), upstream>`.
    /// Returns gradients w.r.t. every parameter and w.r.t. `z`.
    pub fn backward(
        &self,
        z: &[f64],
        t: usize,
        class_id: usize,
        upstream: &[f64],
    ) -> Result<(DenoiserGrads, Vec<f64>), DenoiserError> {
        let mut grads = DenoiserGrads::zeros_like(self);
        let (_, grad_z) = self.forward_backward(z, t, class_id, upstream, 1.0, &mut grads)?;
        Ok((grads, grad_z))
    }

    /// Forward pass plus `grads += scale * d<ε, upstream>/dθ`.
    /// Returns `(ε, d<ε, upstream>/dz)`; `grad_z` is not scaled.
    pub fn forward_backward(
        &self,
        z: &[f64],
        t: usize,
        class_id: usize,
        upstream: &[f64],
        scale: f64,
        grads: &mut DenoiserGrads,
    ) -> Result<(Vec<f64>, Vec<f64>), DenoiserError> {
        self.check_inputs(z, t, class_id)?;
        if upstream.len() != self.config.dim {
            return Err(DenoiserError::ShapeMismatch {
                what: "upstream gradient",
                expected: self.config.dim,
                got: upstream.len(),
            });
        }
        if grads.0.len() != self.flat.len() {
            return Err(DenoiserError::ShapeMismatch {
                what: "gradient buffer",
                expected: self.flat.len(),
                got: grads.0.len(),
            });
        }
        let cache = self.run(z, t, class_id);
        let g = &mut grads.0;

        let mut delta = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            let x = &cache.inputs[l];
            for r in 0..layer.n_out {
                let d = delta[r];
                g[layer.bias + r] += scale * d;
                let row = layer.weight + r * layer.n_in;
                axpy(&mut g[row..row + layer.n_in], scale * d, x);
            }
            let w = &self.flat[layer.weight..layer.bias];
            let mut prev = vec![0.0; layer.n_in];
            for (r, &d) in delta.iter().enumerate() {
                axpy(&mut prev, d, &w[r * layer.n_in..(r + 1) * layer.n_in]);
            }
            if l > 0 {
                for (p, &h) in prev.iter_mut().zip(&cache.pre[l - 1]) {
                    *p *= silu_grad(h);
                }
            }
            delta = prev;
        }

        // delta is now the gradient w.r.t. the concatenated input.
        let d = self.config.dim;
        let e = self.config.embed_dim;
        let embed_grad = &delta[delta.len() - e..];
        axpy(&mut g[class_id * e..(class_id + 1) * e], scale, embed_grad);
        let grad_z = delta[..d].to_vec();
        Ok((cache.output, grad_z))
    }
}
