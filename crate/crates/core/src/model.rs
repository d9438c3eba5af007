//! MLP backbone with a main clustering head and an over-clustering head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DcdcError, Result};
use crate::matrix::{argmax_rows, Matrix};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_clusters: usize,
    pub over_clusters: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(DcdcError::config("layer widths must be at least 1"));
        }
        if self.num_clusters == 0 {
            return Err(DcdcError::config("num_clusters must be at least 1"));
        }
        if self.over_clusters < self.num_clusters {
            return Err(DcdcError::config(format!(
                "over_clusters ({}) must be >= num_clusters ({})",
                self.over_clusters, self.num_clusters
            )));
        }
        Ok(())
    }
}

/// Fixed per-feature map `(x - mean) / scale` applied ahead of the first layer.
/// Not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaling {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        InputScaling {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.len() != scale.len() {
            return Err(DcdcError::shape(format!(
                "{} means for {} scales",
                mean.len(),
                scale.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || scale.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(DcdcError::config("input scaling needs finite means and positive scales"));
        }
        Ok(InputScaling { mean, scale })
    }

    /// Column means and population standard deviations of `x`. Constant columns get scale 1.
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let (mut mean, mut scale) = (Vec::new(), Vec::new());
        for j in 0..x.cols() {
            let col = x.column(j);
            let mu = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
            mean.push(mu);
            scale.push(if sd > 1e-12 { sd } else { 1.0 });
        }
        InputScaling { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0) && self.scale.iter().all(|&s| s == 1.0)
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        if self.is_identity() {
            return out;
        }
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Affine layer `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Dense {
            weights: Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound)),
            bias: vec![0.0; fan_out],
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weights).expect("layer shapes checked");
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }

    fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    input_scaling: InputScaling,
    hidden: Vec<Dense>,
    head: Dense,
    over_head: Dense,
    version: u64,
}

/// Activations retained by [`Model::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    activations: Vec<Matrix>,
    version: u64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub logits_over: Matrix,
    pub cache: ForwardCache,
}

/// Parameter gradients, laid out like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub hidden: Vec<Dense>,
    pub head: Dense,
    pub over_head: Dense,
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        layers_in_order(&self.hidden, &self.head, &self.over_head)
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        let dst = self
            .hidden
            .iter_mut()
            .chain([&mut self.head, &mut self.over_head]);
        let src = layers_in_order(&other.hidden, &other.head, &other.over_head);
        for (d, s) in dst.zip(src) {
            d.weights.add_assign(&s.weights).expect("same layout");
            d.bias.iter_mut().zip(&s.bias).for_each(|(a, b)| *a += b);
        }
    }
}

fn layers_in_order<'a>(
    hidden: &'a [Dense],
    head: &'a Dense,
    over_head: &'a Dense,
) -> impl Iterator<Item = &'a Dense> {
    hidden.iter().chain([head, over_head])
}

impl Model {
    /// Fan-in scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fan_in = config.input_dim;
        let mut hidden = Vec::with_capacity(config.hidden_dims.len());
        for &width in &config.hidden_dims {
            hidden.push(Dense::init(fan_in, width, &mut rng));
            fan_in = width;
        }
        let head = Dense::init(fan_in, config.num_clusters, &mut rng);
        let over_head = Dense::init(fan_in, config.over_clusters, &mut rng);
        Ok(Model {
            input_scaling: InputScaling::identity(config.input_dim),
            config,
            hidden,
            head,
            over_head,
            version: 0,
        })
    }

    /// A model with every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut fan_in = config.input_dim;
        let mut hidden = Vec::new();
        for &width in &config.hidden_dims {
            hidden.push(Dense::zeros(fan_in, width));
            fan_in = width;
        }
        Ok(Model {
            head: Dense::zeros(fan_in, config.num_clusters),
            over_head: Dense::zeros(fan_in, config.over_clusters),
            input_scaling: InputScaling::identity(config.input_dim),
            config,
            hidden,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_scaling(&self) -> &InputScaling {
        &self.input_scaling
    }

    /// Replaces the input scaling. Invalidates caches.
    pub fn set_input_scaling(&mut self, scaling: InputScaling) -> Result<()> {
        if scaling.dim() != self.config.input_dim {
            return Err(DcdcError::shape(format!(
                "input scaling has {} features, model expects {}",
                scaling.dim(),
                self.config.input_dim
            )));
        }
        self.input_scaling = scaling;
        self.version += 1;
        Ok(())
    }

    pub fn hidden_layers(&self) -> &[Dense] {
        &self.hidden
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn over_head(&self) -> &Dense {
        &self.over_head
    }

    pub fn param_count(&self) -> usize {
        layers_in_order(&self.hidden, &self.head, &self.over_head)
            .map(Dense::param_count)
            .sum()
    }

    /// Parameter tensors in declaration order: each hidden layer's weights then bias,
    /// then the main head, then the over-clustering head.
    pub fn tensors(&self) -> Vec<&[f64]> {
        layers_in_order(&self.hidden, &self.head, &self.over_head)
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    /// Mutable parameter tensors, same order as [`Model::tensors`]. Invalidates caches.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.hidden
            .iter_mut()
            .chain([&mut self.head, &mut self.over_head])
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrites every parameter from a flat vector in declaration order.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(DcdcError::shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DcdcError::NonFinite("model parameters".into()));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(DcdcError::shape(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn features(&self, x: &Matrix) -> Vec<Matrix> {
        let mut activations = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let mut h = layer.apply(activations.last().unwrap_or(x));
            h.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            activations.push(h);
        }
        activations
    }

    /// Input scaling, then hidden layers of affine + ReLU, then two affine heads.
    pub fn forward(&self, x: &Matrix) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let x = self.input_scaling.apply(x);
        let activations = self.features(&x);
        let top = activations.last().unwrap_or(&x);
        let logits = self.head.apply(top);
        let logits_over = self.over_head.apply(top);
        Ok(ForwardOutput {
            logits,
            logits_over,
            cache: ForwardCache {
                input: x,
                activations,
                version: self.version,
            },
        })
    }

    /// Main-head logits only.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let x = self.input_scaling.apply(x);
        let activations = self.features(&x);
        Ok(self.head.apply(activations.last().unwrap_or(&x)))
    }

    /// Exact parameter gradients given upstream gradients of both heads' logits.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Matrix,
        d_logits_over: &Matrix,
    ) -> Result<ModelGrads> {
        if cache.version != self.version {
            return Err(DcdcError::shape(
                "forward cache is stale: parameters changed since the forward pass",
            ));
        }
        let batch = cache.input.rows();
        if cache.input.cols() != self.config.input_dim
            || cache.activations.len() != self.hidden.len()
            || d_logits.shape() != (batch, self.config.num_clusters)
            || d_logits_over.shape() != (batch, self.config.over_clusters)
        {
            return Err(DcdcError::shape("cache or upstream gradients do not match model"));
        }

        let top = cache.activations.last().unwrap_or(&cache.input);
        let head = dense_grad(top, d_logits)?;
        let over_head = dense_grad(top, d_logits_over)?;

        let mut d_act = d_logits.matmul_nt(&self.head.weights)?;
        d_act.add_assign(&d_logits_over.matmul_nt(&self.over_head.weights)?)?;

        let mut hidden = Vec::with_capacity(self.hidden.len());
        for k in (0..self.hidden.len()).rev() {
            let out = &cache.activations[k];
            for (d, &a) in d_act.as_mut_slice().iter_mut().zip(out.as_slice()) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let input = if k == 0 {
                &cache.input
            } else {
                &cache.activations[k - 1]
            };
            hidden.push(dense_grad(input, &d_act)?);
            if k > 0 {
                d_act = d_act.matmul_nt(&self.hidden[k].weights)?;
            }
        }
        hidden.reverse();
        Ok(ModelGrads {
            hidden,
            head,
            over_head,
        })
    }

    /// Cluster label per row: argmax of the main head, ties to the lowest index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        scaling: InputScaling,
        flat: &[f64],
    ) -> Result<Model> {
        let mut model = Model::zeros(config)?;
        model.set_input_scaling(scaling)?;
        model.set_flat(flat)?;
        model.version = 0;
        Ok(model)
    }
}

fn dense_grad(input: &Matrix, d_out: &Matrix) -> Result<Dense> {
    let weights = input.matmul_tn(d_out)?;
    let mut bias = vec![0.0; d_out.cols()];
    for i in 0..d_out.rows() {
        bias.iter_mut().zip(d_out.row(i)).for_each(|(b, d)| *b += d);
    }
    Ok(Dense { weights, bias })
}
