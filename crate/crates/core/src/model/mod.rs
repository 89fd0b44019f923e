//! Axial-attention transformer for masked-slice regression.
//!
//! The model embeds per-voxel cubochoric triples, adds three per-axis
//! learnable positional tables, runs a stack of encoder layers (pre-norm
//! residual axial attention along each spatial axis, then a convolutional
//! feedforward block: two 3x3x3 convolutions around a GELU), and projects
//! back to three channels. The loss is mean squared error restricted to the
//! boundary voxels of the masked slice.

pub mod checkpoint;

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::rng::rng_from_seed;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss is undefined: the masked slice has no boundary voxels")]
    EmptyBoundary,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub dropout_p: f64,
    pub input_channels: usize,
    pub crop_shape: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            layers: 8,
            heads: 8,
            embed_dim: 128,
            ff_dim: 512,
            dropout_p: 0.1,
            input_channels: 3,
            crop_shape: [64, 7, 64],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.input_channels == 0 {
            return Err(ModelError::Config("input_channels must be positive".into()));
        }
        if self.crop_shape.iter().any(|&d| d == 0) {
            return Err(ModelError::Config(format!(
                "crop shape {:?} must have positive dims",
                self.crop_shape
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(format!(
                "dropout probability {} must be in [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

enum Init {
    UniformFanIn(usize),
    Normal(f64),
    Zero,
    One,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let d = config.embed_dim;
    let f = config.ff_dim;
    let c = config.input_channels;
    let mut specs = vec![
        ParamSpec {
            name: "embed.weight".into(),
            shape: vec![c, d],
            init: Init::UniformFanIn(c),
        },
        ParamSpec {
            name: "embed.bias".into(),
            shape: vec![d],
            init: Init::Zero,
        },
    ];
    for (a, &n) in config.crop_shape.iter().enumerate() {
        specs.push(ParamSpec {
            name: format!("pos.{a}"),
            shape: vec![n, d],
            init: Init::Normal(0.02),
        });
    }
    for l in 0..config.layers {
        for a in 0..3 {
            specs.push(ParamSpec {
                name: format!("layer{l}.axis{a}.norm.gamma"),
                shape: vec![d],
                init: Init::One,
            });
            specs.push(ParamSpec {
                name: format!("layer{l}.axis{a}.norm.beta"),
                shape: vec![d],
                init: Init::Zero,
            });
            for w in ["wq", "wk", "wv", "wo"] {
                specs.push(ParamSpec {
                    name: format!("layer{l}.axis{a}.{w}"),
                    shape: vec![d, d],
                    init: Init::UniformFanIn(d),
                });
            }
        }
        specs.push(ParamSpec {
            name: format!("layer{l}.ff.norm.gamma"),
            shape: vec![d],
            init: Init::One,
        });
        specs.push(ParamSpec {
            name: format!("layer{l}.ff.norm.beta"),
            shape: vec![d],
            init: Init::Zero,
        });
        specs.push(ParamSpec {
            name: format!("layer{l}.ff.conv1.weight"),
            shape: vec![3, 3, 3, d, f],
            init: Init::UniformFanIn(27 * d),
        });
        specs.push(ParamSpec {
            name: format!("layer{l}.ff.conv1.bias"),
            shape: vec![f],
            init: Init::Zero,
        });
        specs.push(ParamSpec {
            name: format!("layer{l}.ff.conv2.weight"),
            shape: vec![3, 3, 3, f, d],
            init: Init::UniformFanIn(27 * f),
        });
        specs.push(ParamSpec {
            name: format!("layer{l}.ff.conv2.bias"),
            shape: vec![d],
            init: Init::Zero,
        });
    }
    specs.push(ParamSpec {
        name: "head.weight".into(),
        shape: vec![d, c],
        init: Init::UniformFanIn(d),
    });
    specs.push(ParamSpec {
        name: "head.bias".into(),
        shape: vec![c],
        init: Init::Zero,
    });
    specs
}

/// Exact number of learnable scalars for a configuration.
pub fn param_count(config: &ModelConfig) -> usize {
    param_specs(config)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// All learnable parameters, owned as plain buffers (thread-shareable).
#[derive(Debug, Clone)]
pub struct ModelState {
    config: ModelConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl ModelState {
    /// Fresh parameters: weights uniform in +-1/sqrt(fan_in), positional
    /// tables normal with std 0.02, norms at identity, biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelState, ModelError> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let specs = param_specs(config);
        let mut names = Vec::with_capacity(specs.len());
        let mut shapes = Vec::with_capacity(specs.len());
        let mut values = Vec::with_capacity(specs.len());
        for spec in &specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::UniformFanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Normal(std) => (0..n)
                    .map(|_| {
                        // Box-Muller from two uniforms
                        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                        let u2: f64 = rng.gen::<f64>();
                        std * (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect(),
            };
            names.push(spec.name.clone());
            shapes.push(spec.shape.clone());
            values.push(data);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(ModelState {
            config: config.clone(),
            names,
            shapes,
            values,
            index,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        parts: Vec<(String, Vec<usize>, Vec<f64>)>,
    ) -> Result<ModelState, ModelError> {
        config.validate()?;
        let specs = param_specs(&config);
        if parts.len() != specs.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                parts.len()
            )));
        }
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut values = Vec::new();
        for (spec, (name, shape, data)) in specs.iter().zip(parts) {
            if spec.name != name || spec.shape != shape {
                return Err(ModelError::Config(format!(
                    "parameter {} with shape {:?} does not match expected {} {:?}",
                    name, shape, spec.name, spec.shape
                )));
            }
            if data.len() != shape.iter().product::<usize>() {
                return Err(ModelError::Config(format!(
                    "parameter {name} payload length mismatch"
                )));
            }
            names.push(name);
            shapes.push(shape);
            values.push(data);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(ModelState {
            config,
            names,
            shapes,
            values,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_tensors(&self) -> usize {
        self.names.len()
    }

    pub fn num_params(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.names
            .iter()
            .zip(&self.shapes)
            .zip(&self.values)
            .map(|((n, s), v)| (n.as_str(), s.as_slice(), v.as_slice()))
    }

    pub fn value(&self, name: &str) -> Result<&[f64], ModelError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        Ok(&self.values[i])
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Vec<f64>, ModelError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        Ok(&mut self.values[i])
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<f64>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter_mut())
    }

    /// Materializes parameters as graph leaves. `trainable` leaves receive
    /// gradients on backward.
    pub fn bind(&self, trainable: bool) -> Result<BoundParams, ModelError> {
        let mut tensors = Vec::with_capacity(self.names.len());
        for ((name, shape), value) in self.names.iter().zip(&self.shapes).zip(&self.values) {
            let t = if trainable {
                Tensor::param(shape, value.clone())?
            } else {
                Tensor::from_vec(shape, value.clone())?
            };
            tensors.push((name.clone(), t));
        }
        let index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(BoundParams { tensors, index })
    }
}

/// Per-step tensor bindings of a [`ModelState`].
pub struct BoundParams {
    tensors: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        Ok(&self.tensors[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// Forward-pass mode; training mode activates dropout.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut dyn rand::RngCore },
}

impl Mode<'_> {
    fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor, TensorError> {
        match self {
            Mode::Eval => {
                // validate p even when unused so bad configs fail loudly
                if !(0.0..1.0).contains(&p) {
                    return Err(TensorError::Parameter(format!(
                        "dropout probability must satisfy 0 <= p < 1, got {p}"
                    )));
                }
                Ok(x.clone())
            }
            Mode::Train { rng } => x.dropout(p, *rng, true),
        }
    }
}

/// Multi-head self-attention along one spatial axis of `x`
/// (shape (n_1, ..., n_k, d)). Every other spatial axis is flattened into
/// the batch, so fibers attend independently.
pub fn axial_attention(
    x: &Tensor,
    axis: usize,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
) -> Result<Tensor, ModelError> {
    let rank = x.shape().len();
    if rank < 2 {
        return Err(ModelError::Config(format!(
            "axial attention input must have spatial axes plus channels, got {:?}",
            x.shape()
        )));
    }
    let spatial = rank - 1;
    if axis >= spatial {
        return Err(ModelError::Config(format!(
            "axis {axis} out of range for {spatial} spatial dims"
        )));
    }
    let d = x.shape()[rank - 1];
    if d % heads != 0 {
        return Err(ModelError::Config(format!(
            "embedding dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;

    // move `axis` next to the channel axis and flatten the rest into batch
    let mut perm: Vec<usize> = (0..spatial).filter(|&a| a != axis).collect();
    perm.push(axis);
    perm.push(spatial);
    let xp = x.permute(&perm)?;
    let permuted_shape = xp.shape().to_vec();
    let l = permuted_shape[spatial - 1];
    let batch: usize = permuted_shape[..spatial - 1].iter().product();
    let x3 = xp.reshape(&[batch, l, d])?;

    let q = x3.matmul(wq)?;
    let k = x3.matmul(wk)?;
    let v = x3.matmul(wv)?;
    let split = |t: &Tensor| -> Result<Tensor, TensorError> {
        t.reshape(&[batch, l, heads, dh])?.permute(&[0, 2, 1, 3])
    };
    let (q4, k4, v4) = (split(&q)?, split(&k)?, split(&v)?);
    let scores = q4
        .matmul(&k4.permute(&[0, 1, 3, 2])?)?
        .scale(1.0 / (dh as f64).sqrt())?;
    let attn = scores.softmax_rows()?;
    let ctx = attn.matmul(&v4)?;
    let merged = ctx.permute(&[0, 2, 1, 3])?.reshape(&[batch, l, d])?;
    let y = merged.matmul(wo)?;

    // restore the original layout
    let mut inv = vec![0usize; rank];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    Ok(y.reshape(&permuted_shape)?.permute(&inv)?)
}

fn encoder_layer(
    x: Tensor,
    layer: usize,
    params: &BoundParams,
    config: &ModelConfig,
    mode: &mut Mode,
) -> Result<Tensor, ModelError> {
    let p = config.dropout_p;
    let mut x = x;
    for axis in 0..3 {
        let prefix = format!("layer{layer}.axis{axis}");
        let normed = x.layer_norm(
            params.get(&format!("{prefix}.norm.gamma"))?,
            params.get(&format!("{prefix}.norm.beta"))?,
        )?;
        let att = axial_attention(
            &normed,
            axis,
            params.get(&format!("{prefix}.wq"))?,
            params.get(&format!("{prefix}.wk"))?,
            params.get(&format!("{prefix}.wv"))?,
            params.get(&format!("{prefix}.wo"))?,
            config.heads,
        )?;
        x = x.add(&mode.dropout(&att, p)?)?;
    }
    let prefix = format!("layer{layer}.ff");
    let normed = x.layer_norm(
        params.get(&format!("{prefix}.norm.gamma"))?,
        params.get(&format!("{prefix}.norm.beta"))?,
    )?;
    let h = normed
        .conv3d(
            params.get(&format!("{prefix}.conv1.weight"))?,
            params.get(&format!("{prefix}.conv1.bias"))?,
        )?
        .gelu()?
        .conv3d(
            params.get(&format!("{prefix}.conv2.weight"))?,
            params.get(&format!("{prefix}.conv2.bias"))?,
        )?;
    Ok(x.add(&mode.dropout(&h, p)?)?)
}

/// Full forward pass: embed, add per-axis positional tables, run the
/// encoder stack, project to output channels. Returns predictions at every
/// voxel with the same spatial shape as the input.
pub fn forward(
    params: &BoundParams,
    config: &ModelConfig,
    masked_input: &Tensor,
    mode: &mut Mode,
) -> Result<Tensor, ModelError> {
    let [n1, n2, n3] = config.crop_shape;
    let c = config.input_channels;
    if masked_input.shape() != [n1, n2, n3, c] {
        return Err(ModelError::Tensor(TensorError::Dimension(format!(
            "input shape {:?} does not match configured crop {:?} with {} channels",
            masked_input.shape(),
            config.crop_shape,
            c
        ))));
    }
    let d = config.embed_dim;
    let mut x = masked_input
        .matmul(params.get("embed.weight")?)?
        .add(params.get("embed.bias")?)?;
    x = x.add(&params.get("pos.0")?.reshape(&[n1, 1, 1, d])?)?;
    x = x.add(&params.get("pos.1")?.reshape(&[n2, 1, d])?)?;
    x = x.add(params.get("pos.2")?)?;
    for l in 0..config.layers {
        x = encoder_layer(x, l, params, config, mode)?;
    }
    Ok(x.matmul(params.get("head.weight")?)?
        .add(params.get("head.bias")?)?)
}

/// Builds the multiplicative mask that zeroes slice `m` along the second
/// spatial dimension.
pub fn slice_mask(crop_shape: [usize; 3], channels: usize, m: usize) -> Tensor {
    let [n1, n2, n3] = crop_shape;
    let mut data = vec![1.0; n1 * n2 * n3 * channels];
    for i in 0..n1 {
        for k in 0..n3 {
            let base = ((i * n2 + m) * n3 + k) * channels;
            for ch in 0..channels {
                data[base + ch] = 0.0;
            }
        }
    }
    Tensor::from_vec(&[n1, n2, n3, channels], data).expect("mask shape is consistent")
}

/// Mean squared error over the boundary voxels of the masked slice:
/// the squared Frobenius norm of (pred - truth) restricted to slice `m`
/// and to `boundary`, divided by the boundary voxel count. Channel errors
/// are summed, voxels averaged.
pub fn boundary_masked_loss(
    pred: &Tensor,
    x_star: &Tensor,
    m: usize,
    boundary: &[bool],
) -> Result<Tensor, ModelError> {
    if pred.shape() != x_star.shape() {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "boundary_masked_loss",
            lhs: pred.shape().to_vec(),
            rhs: x_star.shape().to_vec(),
        }));
    }
    if pred.shape().len() != 4 {
        return Err(ModelError::Tensor(TensorError::Dimension(format!(
            "expected (n1, n2, n3, c) predictions, got {:?}",
            pred.shape()
        ))));
    }
    let (n1, n2, n3) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    if m >= n2 {
        return Err(ModelError::Tensor(TensorError::Parameter(format!(
            "slice index {m} out of range for {n2} slices"
        ))));
    }
    if boundary.len() != n1 * n3 {
        return Err(ModelError::Tensor(TensorError::Dimension(format!(
            "boundary map has {} entries, expected {}",
            boundary.len(),
            n1 * n3
        ))));
    }
    let count = boundary.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(ModelError::EmptyBoundary);
    }
    let e = Tensor::from_vec(
        &[n1, n3, 1],
        boundary.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    let diff = pred.index_axis(1, m)?.sub(&x_star.index_axis(1, m)?)?;
    let masked = diff.mul(&e)?;
    Ok(masked
        .mul(&masked)?
        .sum_all()?
        .scale(1.0 / count as f64)?)
}
