//! Normalization and convolution building blocks.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; a [`Forward`] pass binds
//! the store to a fresh [`Graph`] and threads the training flag, the dropout
//! RNG and the batch-norm statistics that must be folded into the running
//! averages once the step completes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchMoments, Graph, Var};
use crate::kernels::Padding;
use crate::params::{fan_in_uniform, Bindings, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Elu,
    None,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Elu => g.elu(x),
            Activation::None => x,
        }
    }
}

/// Ramp of the batch-renormalization clipping limits.
///
/// `r_max` goes from 1 to `r_max_end` and `d_max` from 0 to `d_max_end`,
/// linearly between `ramp_start` and `ramp_end` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenormSchedule {
    pub r_max_end: f64,
    pub d_max_end: f64,
    pub ramp_start: u64,
    pub ramp_end: u64,
}

impl Default for RenormSchedule {
    fn default() -> Self {
        RenormSchedule {
            r_max_end: 3.0,
            d_max_end: 5.0,
            ramp_start: 1_000,
            ramp_end: 6_000,
        }
    }
}

impl RenormSchedule {
    /// Clipping limits that reduce batch renorm to plain batch norm.
    pub fn plain() -> Self {
        RenormSchedule {
            r_max_end: 1.0,
            d_max_end: 0.0,
            ..Default::default()
        }
    }

    /// `(r_max, d_max)` at `step`.
    pub fn limits(&self, step: u64) -> (f64, f64) {
        let frac = if step <= self.ramp_start {
            0.0
        } else if step >= self.ramp_end {
            1.0
        } else {
            (step - self.ramp_start) as f64 / (self.ramp_end - self.ramp_start) as f64
        };
        (
            1.0 + (self.r_max_end - 1.0) * frac,
            self.d_max_end * frac,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    /// Weight of the old running value in the moving average.
    pub momentum: f64,
    pub epsilon: f64,
    pub renorm: RenormSchedule,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.99,
            epsilon: 1e-3,
            renorm: RenormSchedule::default(),
        }
    }
}

/// Batch (re)normalization over `(N, H, W)` per channel.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let t = ParamKind::Trainable;
        let b = ParamKind::Buffer;
        BatchNorm {
            gamma: store.add(format!("{name}/gamma"), Tensor::ones(&[channels]), t),
            beta: store.add(format!("{name}/beta"), Tensor::zeros(&[channels]), t),
            running_mean: store.add(format!("{name}/running_mean"), Tensor::zeros(&[channels]), b),
            running_var: store.add(format!("{name}/running_var"), Tensor::ones(&[channels]), b),
            channels,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let rm = f.store.get(self.running_mean).data();
        let rv = f.store.get(self.running_var).data();
        let gamma = f.bindings.var(self.gamma);
        let beta = f.bindings.var(self.beta);
        let eps = T::from_f64(f.bn.epsilon);
        if f.training {
            let (r_max, d_max) = f.bn.renorm.limits(f.bn_step);
            let (y, moments) = f.graph.batch_norm_train(
                x,
                gamma,
                beta,
                rm,
                rv,
                T::from_f64(r_max),
                T::from_f64(d_max),
                eps,
            )?;
            f.bn_updates.push(BatchNormUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                moments,
            });
            Ok(y)
        } else {
            f.graph.batch_norm_infer(x, gamma, beta, rm, rv, eps)
        }
    }
}

/// Batch statistics of one training step, to be folded into running averages.
#[derive(Clone, Debug)]
pub struct BatchNormUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub moments: BatchMoments<T>,
}

/// `running <- momentum * running + (1 - momentum) * batch` for every update.
pub fn apply_batch_norm_updates<T: Real>(
    store: &mut ParamStore<T>,
    updates: &[BatchNormUpdate<T>],
    momentum: f64,
) {
    let m = T::from_f64(momentum);
    let one_m = T::one() - m;
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.moments.mean), (u.running_var, &u.moments.var)] {
            for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = m * *r + one_m * b;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub epsilon: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}/gamma"), Tensor::ones(&[channels]), ParamKind::Trainable),
            beta: store.add(format!("{name}/beta"), Tensor::zeros(&[channels]), ParamKind::Trainable),
            epsilon: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (f.bindings.var(self.gamma), f.bindings.var(self.beta));
        f.graph.layer_norm(x, g, b, T::from_f64(self.epsilon))
    }
}

/// Depthwise K×K convolution, optional batch norm, 1×1 convolution with bias,
/// activation. Stride 1 with same padding, so spatial extents are preserved.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: ParamId,
    pub bn: Option<BatchNorm>,
    pub pointwise: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub kernel_size: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl SeparableConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel_size: usize,
        activation: Activation,
        batch_norm: bool,
    ) -> Self {
        let t = ParamKind::Trainable;
        let depthwise = store.add(
            format!("{name}/depthwise"),
            fan_in_uniform(rng, &[kernel_size, kernel_size, c_in], kernel_size * kernel_size),
            t,
        );
        let bn = batch_norm.then(|| BatchNorm::new(store, &format!("{name}/bn"), c_in));
        let pointwise = store.add(
            format!("{name}/pointwise"),
            fan_in_uniform(rng, &[c_in, c_out], c_in),
            t,
        );
        let bias = store.add(format!("{name}/bias"), Tensor::zeros(&[c_out]), t);
        SeparableConv {
            depthwise,
            bn,
            pointwise,
            bias,
            activation,
            kernel_size,
            c_in,
            c_out,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let c = f.graph.value(x).dims4("separable_conv")?[3];
        if c != self.c_in {
            return Err(Error::Dimension {
                op: "separable_conv",
                axis: "channels",
                expected: self.c_in,
                found: c,
            });
        }
        let k = f.bindings.var(self.depthwise);
        let mut y = f.graph.depthwise_conv2d(x, k, (1, 1), Padding::Same)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(f, y)?;
        }
        let (w, b) = (f.bindings.var(self.pointwise), f.bindings.var(self.bias));
        let y = f.graph.pointwise_conv2d(y, w, Some(b))?;
        Ok(self.activation.apply(&mut f.graph, y))
    }
}

/// 1×1 convolution with bias, optional batch norm, activation.
#[derive(Clone, Debug)]
pub struct Projection {
    pub weights: ParamId,
    pub bias: ParamId,
    pub bn: Option<BatchNorm>,
    pub activation: Activation,
    pub c_in: usize,
    pub c_out: usize,
}

impl Projection {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        activation: Activation,
        batch_norm: bool,
    ) -> Self {
        let t = ParamKind::Trainable;
        let weights = store.add(format!("{name}/weights"), fan_in_uniform(rng, &[c_in, c_out], c_in), t);
        let bias = store.add(format!("{name}/bias"), Tensor::zeros(&[c_out]), t);
        let bn = batch_norm.then(|| BatchNorm::new(store, &format!("{name}/bn"), c_out));
        Projection {
            weights,
            bias,
            bn,
            activation,
            c_in,
            c_out,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.bindings.var(self.weights), f.bindings.var(self.bias));
        let mut y = f.graph.pointwise_conv2d(x, w, Some(b))?;
        if let Some(bn) = &self.bn {
            y = bn.forward(f, y)?;
        }
        Ok(self.activation.apply(&mut f.graph, y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutConfig {
    /// Probability of zeroing a whole channel plane, in `[0, 1)`.
    pub rate: f64,
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.rate
            )));
        }
        Ok(())
    }
}

/// Mask that zeroes each `(n, c)` channel plane with probability `rate` and
/// scales survivors by `1 / (1 - rate)`.
pub fn spatial_dropout_mask<T: Real>(shape: [usize; 4], rate: f64, rng: &mut impl Rng) -> Tensor<T> {
    let [n, h, w, c] = shape;
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mut mask = vec![T::zero(); n * h * w * c];
    for sample in mask.chunks_exact_mut(h * w * c) {
        let plane: Vec<T> = (0..c)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        for px in sample.chunks_exact_mut(c) {
            px.copy_from_slice(&plane);
        }
    }
    Tensor::new_unchecked(vec![n, h, w, c], mask)
}

/// Spatial dropout; the identity outside training or when `rate == 0`.
pub fn spatial_dropout<T: Real>(f: &mut Forward<'_, T>, x: Var, config: DropoutConfig) -> Result<Var> {
    config.validate()?;
    if !f.training || config.rate == 0.0 {
        return Ok(x);
    }
    let dims = f.graph.value(x).dims4("spatial_dropout")?;
    let mask = spatial_dropout_mask(dims, config.rate, &mut f.rng);
    f.graph.mask(x, mask)
}

/// Mean over the height axis; `(N, H, W, C) -> (N, 1, W, C)`.
pub fn global_avg_pool_height<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.value(x).dims4("global_avg_pool_height")?;
    g.reduce_mean(x, 1)
}

/// State of one forward pass over a model's parameters.
pub struct Forward<'a, T> {
    pub graph: Graph<T>,
    pub store: &'a ParamStore<T>,
    pub bindings: Bindings,
    pub training: bool,
    pub bn: BatchNormConfig,
    pub bn_step: u64,
    pub rng: ChaCha8Rng,
    pub bn_updates: Vec<BatchNormUpdate<T>>,
}

impl<'a, T: Real> Forward<'a, T> {
    /// Binds `store` onto a new graph. Parameters require gradients only in
    /// training mode unless `grads` overrides it.
    pub fn new(store: &'a ParamStore<T>, training: bool, grads: bool, bn: BatchNormConfig, bn_step: u64, seed: u64) -> Self {
        let mut graph = Graph::new();
        let bindings = store.bind(&mut graph, grads);
        Forward {
            graph,
            store,
            bindings,
            training,
            bn,
            bn_step,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }
}
