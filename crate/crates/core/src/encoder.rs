//! Small feed-forward encoder standing in for a convolutional backbone.
//!
//! Depth 1: `f = normalize(W x + b)`.
//! Depth 2: `f = normalize(W tanh(H x + c) + b)`.
//! `x` is the flattened image with every pixel shifted by -0.5.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_normalize, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 3 * 8 * 8,
            feature_dim: 32,
            hidden_dim: 64,
            depth: 1,
            bias: false,
        }
    }
}

/// A named dense tensor, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

/// Encoder parameters. Tensor order is fixed by the config:
/// `[hidden, hidden_bias]` when depth is 2, then `weight`, then `bias` if enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub config: EncoderConfig,
    pub tensors: Vec<Tensor>,
}

/// Values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub hidden: Option<Vec<f64>>,
    /// Pre-normalization output.
    pub raw: Vec<f64>,
    pub feature: Vec<f64>,
    pub raw_norm: f64,
}

impl ParamSet {
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        if config.depth != 1 && config.depth != 2 {
            return Err(Error::Config(format!(
                "encoder depth must be 1 or 2, got {}",
                config.depth
            )));
        }
        if config.input_dim == 0 || config.feature_dim == 0 || (config.depth == 2 && config.hidden_dim == 0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let mut tensors = Vec::new();
        let inner = if config.depth == 2 {
            tensors.push(Tensor::zeros("hidden", &[config.hidden_dim, config.input_dim]));
            tensors.push(Tensor::zeros("hidden_bias", &[config.hidden_dim]));
            config.hidden_dim
        } else {
            config.input_dim
        };
        tensors.push(Tensor::zeros("weight", &[config.feature_dim, inner]));
        if config.bias {
            tensors.push(Tensor::zeros("bias", &[config.feature_dim]));
        }
        Ok(Self { config, tensors })
    }

    /// Uniform init with variance `1 / fan_in`; biases start at zero.
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for t in &mut p.tensors {
            if t.shape.len() == 2 {
                let a = (3.0 / t.shape[1] as f64).sqrt();
                for v in &mut t.data {
                    *v = rng.random_range(-a..a);
                }
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(&t.name, &t.shape))
                .collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Scalar at a flat index over all tensors in order.
    pub fn scalar_mut(&mut self, mut idx: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if idx < t.data.len() {
                return &mut t.data[idx];
            }
            idx -= t.data.len();
        }
        panic!("scalar index out of range");
    }

    pub fn scalar(&self, mut idx: usize) -> f64 {
        for t in &self.tensors {
            if idx < t.data.len() {
                return t.data[idx];
            }
            idx -= t.data.len();
        }
        panic!("scalar index out of range");
    }

    fn affine(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = (w.shape[0], w.shape[1]);
        (0..rows)
            .map(|r| {
                let v = dot(&w.data[r * cols..(r + 1) * cols], x);
                match b {
                    Some(b) => v + b.data[r],
                    None => v,
                }
            })
            .collect()
    }

    /// Runs the encoder on one flattened input. Fails when the pre-normalization
    /// output vanishes.
    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        if x.len() != self.config.input_dim {
            return Err(Error::DimMismatch(format!(
                "encoder expects {} inputs, got {}",
                self.config.input_dim,
                x.len()
            )));
        }
        let hidden = if self.config.depth == 2 {
            let h = Self::affine(
                self.tensor("hidden").expect("hidden"),
                self.tensor("hidden_bias"),
                x,
            );
            Some(h.into_iter().map(f64::tanh).collect::<Vec<_>>())
        } else {
            None
        };
        let inner = hidden.as_deref().unwrap_or(x);
        let raw = Self::affine(self.tensor("weight").expect("weight"), self.tensor("bias"), inner);
        let raw_norm = norm(&raw);
        let feature = l2_normalize(&raw)?;
        Ok(Forward {
            hidden,
            raw,
            feature,
            raw_norm,
        })
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.feature)
    }

    /// Accumulates parameter gradients into `grads` given the loss gradient
    /// w.r.t. the normalized feature and w.r.t. the raw output.
    pub fn backward(
        &self,
        x: &[f64],
        fwd: &Forward,
        grad_feature: Option<&[f64]>,
        grad_raw_extra: Option<&[f64]>,
        grads: &mut ParamSet,
    ) {
        let d = fwd.raw.len();
        let mut g_raw = vec![0.0; d];
        if let Some(gf) = grad_feature {
            // d normalize(r) / dr = (I - f f^T) / |r|
            let proj = dot(gf, &fwd.feature);
            for k in 0..d {
                g_raw[k] = (gf[k] - proj * fwd.feature[k]) / fwd.raw_norm;
            }
        }
        if let Some(extra) = grad_raw_extra {
            for k in 0..d {
                g_raw[k] += extra[k];
            }
        }
        let inner = fwd.hidden.as_deref().unwrap_or(x);
        let cols = inner.len();
        {
            let gw = grads.tensor_mut("weight").expect("weight");
            for (r, gr) in g_raw.iter().enumerate() {
                if *gr == 0.0 {
                    continue;
                }
                let row = &mut gw.data[r * cols..(r + 1) * cols];
                for (g, xi) in row.iter_mut().zip(inner) {
                    *g += gr * xi;
                }
            }
        }
        if let Some(gb) = grads.tensor_mut("bias") {
            for (g, gr) in gb.data.iter_mut().zip(&g_raw) {
                *g += gr;
            }
        }
        if let Some(h) = &fwd.hidden {
            let w = self.tensor("weight").expect("weight");
            let mut g_pre = vec![0.0; h.len()];
            for (r, gr) in g_raw.iter().enumerate() {
                let row = &w.data[r * cols..(r + 1) * cols];
                for (gp, wv) in g_pre.iter_mut().zip(row) {
                    *gp += gr * wv;
                }
            }
            for (gp, hv) in g_pre.iter_mut().zip(h) {
                *gp *= 1.0 - hv * hv;
            }
            let in_cols = x.len();
            {
                let gh = grads.tensor_mut("hidden").expect("hidden");
                for (r, gp) in g_pre.iter().enumerate() {
                    let row = &mut gh.data[r * in_cols..(r + 1) * in_cols];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += gp * xi;
                    }
                }
            }
            let ghb = grads.tensor_mut("hidden_bias").expect("hidden_bias");
            for (g, gp) in ghb.data.iter_mut().zip(&g_pre) {
                *g += gp;
            }
        }
    }
}
