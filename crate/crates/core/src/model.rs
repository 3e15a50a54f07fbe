//! The gated fully-convolutional recognizer.
//!
//! ```text
//! image (N,H,W,1)
//!   -> layer norm -> 1x1 conv to 16 -> channel softmax -> 13x13 depthwise
//!   -> concat with the layer-normed image (17 channels)
//!   -> [width projection] -> GateBlock x n
//!   -> spatial dropout -> 1x1 conv to A+1 -> mean over height
//!   -> layer norm -> log-softmax                      (N,1,W,A+1)
//! ```
//!
//! A GateBlock computes `P2((H1(y') - H2(y')) * T(y')) + y` with `y' = P1(y)`,
//! where `P1` halves the channels, `P2` restores them, and every transform is a
//! separable convolution. Blocks never change spatial extents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{
    apply_batch_norm_updates, global_avg_pool_height, spatial_dropout, Activation, BatchNormConfig,
    BatchNormUpdate, DropoutConfig, Forward, LayerNorm, Projection, SeparableConv,
};
use crate::params::{fan_in_uniform, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

/// Inner expression of a GateBlock.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateVariant {
    /// `(H1 - H2) * T`, with residual.
    Baseline,
    /// `(T + 1) * y'`, with residual.
    MulGatePlusOne,
    /// `H1 * T`, with residual.
    SingleH,
    /// `(T + 1) * H1 - H2`, with residual.
    AddOneH1MinusH2,
    /// `H1 * T - H2`, with residual.
    H1GateMinusH2,
    /// `H1`, with residual.
    ResidualOnly,
    /// `(H1 - H2) * T`, no residual.
    GatesNoResidual,
    /// `H1`, no residual.
    Plain,
}

impl GateVariant {
    pub const ALL: [GateVariant; 8] = [
        GateVariant::Baseline,
        GateVariant::MulGatePlusOne,
        GateVariant::SingleH,
        GateVariant::AddOneH1MinusH2,
        GateVariant::H1GateMinusH2,
        GateVariant::ResidualOnly,
        GateVariant::GatesNoResidual,
        GateVariant::Plain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateVariant::Baseline => "baseline",
            GateVariant::MulGatePlusOne => "mul_gate_plus_one",
            GateVariant::SingleH => "single_h",
            GateVariant::AddOneH1MinusH2 => "add_one_h1_minus_h2",
            GateVariant::H1GateMinusH2 => "h1_gate_minus_h2",
            GateVariant::ResidualOnly => "residual_only",
            GateVariant::GatesNoResidual => "gates_no_residual",
            GateVariant::Plain => "plain",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn uses_h1(self) -> bool {
        self != GateVariant::MulGatePlusOne
    }

    pub fn uses_h2(self) -> bool {
        matches!(
            self,
            GateVariant::Baseline
                | GateVariant::AddOneH1MinusH2
                | GateVariant::H1GateMinusH2
                | GateVariant::GatesNoResidual
        )
    }

    pub fn uses_gate(self) -> bool {
        !matches!(self, GateVariant::ResidualOnly | GateVariant::Plain)
    }

    pub fn residual(self) -> bool {
        !matches!(self, GateVariant::GatesNoResidual | GateVariant::Plain)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StemNonlinearity {
    Softmax,
    Tanh,
    None,
}

impl StemNonlinearity {
    pub fn name(self) -> &'static str {
        match self {
            StemNonlinearity::Softmax => "softmax",
            StemNonlinearity::Tanh => "tanh",
            StemNonlinearity::None => "none",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Self::Softmax, Self::Tanh, Self::None]
            .into_iter()
            .find(|v| v.name() == s)
    }
}

/// Normalization switches for the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    /// Master switch for every layer norm.
    pub layer_norm_everywhere: bool,
    /// The layer norms on the input image and on the head logits.
    pub layer_norm_ends: bool,
    pub batch_norm: bool,
    pub stem_nonlinearity: StemNonlinearity,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            layer_norm_everywhere: true,
            layer_norm_ends: true,
            batch_norm: true,
            stem_nonlinearity: StemNonlinearity::Softmax,
        }
    }
}

impl Normalization {
    fn end_layer_norms(&self) -> bool {
        self.layer_norm_everywhere && self.layer_norm_ends
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_blocks: usize,
    /// Width of the first block.
    pub c1: usize,
    /// Width of the third block onwards; requires at least three blocks.
    pub c2: Option<usize>,
    /// Number of symbols, not counting the CTC blank.
    pub alphabet_size: usize,
    pub input_height: usize,
    pub gate_variant: GateVariant,
    pub normalization: Normalization,
    pub dropout_rate: f64,
    pub gate_kernel: usize,
    pub stem_kernel: usize,
    pub stem_channels: usize,
    pub batch_norm: BatchNormConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_blocks: 4,
            c1: 128,
            c2: Some(512),
            alphabet_size: 10,
            input_height: 32,
            gate_variant: GateVariant::Baseline,
            normalization: Normalization::default(),
            dropout_rate: 0.25,
            gate_kernel: 3,
            stem_kernel: 13,
            stem_channels: 16,
            batch_norm: BatchNormConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Parses the `n(c1,c2)` or `n(c1)` architecture notation.
    pub fn from_notation(s: &str, alphabet_size: usize) -> Result<Self> {
        let bad = || Error::config(format!("cannot parse architecture {s:?}; expected n(c1,c2)"));
        let (n, rest) = s.trim().split_once('(').ok_or_else(bad)?;
        let inner = rest.strip_suffix(')').ok_or_else(bad)?;
        let num_blocks = n.trim().parse().map_err(|_| bad())?;
        let mut widths = inner.split(',').map(|p| p.trim().parse::<usize>());
        let c1 = widths.next().ok_or_else(bad)?.map_err(|_| bad())?;
        let c2 = widths.next().transpose().map_err(|_| bad())?;
        if widths.next().is_some() {
            return Err(bad());
        }
        let cfg = ModelConfig {
            num_blocks,
            c1,
            c2,
            alphabet_size,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn notation(&self) -> String {
        match self.c2 {
            Some(c2) => format!("{}({},{})", self.num_blocks, self.c1, c2),
            None => format!("{}({})", self.num_blocks, self.c1),
        }
    }

    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_blocks == 0 {
            v.push("num_blocks must be at least 1".to_string());
        }
        if self.c1 == 0 || self.c1 % 2 != 0 {
            v.push(format!("c1 must be a positive even number, got {}", self.c1));
        }
        if let Some(c2) = self.c2 {
            if c2 == 0 || c2 % 2 != 0 {
                v.push(format!("c2 must be a positive even number, got {c2}"));
            }
            if self.num_blocks < 3 {
                v.push(format!(
                    "c2 sets the width of the third block but only {} block(s) requested",
                    self.num_blocks
                ));
            }
        }
        if self.alphabet_size == 0 {
            v.push("alphabet_size must be at least 1".to_string());
        }
        if self.input_height == 0 {
            v.push("input_height must be positive".to_string());
        }
        for (name, k) in [("gate_kernel", self.gate_kernel), ("stem_kernel", self.stem_kernel)] {
            if k % 2 == 0 {
                v.push(format!("{name} must be odd, got {k}"));
            }
        }
        if self.stem_channels == 0 {
            v.push("stem_channels must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            v.push(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        let bn = &self.batch_norm;
        if !(bn.momentum > 0.0 && bn.momentum < 1.0) {
            v.push(format!("bn_momentum must lie in (0, 1), got {}", bn.momentum));
        }
        if bn.epsilon <= 0.0 {
            v.push(format!("bn_epsilon must be positive, got {}", bn.epsilon));
        }
        if bn.renorm.r_max_end < 1.0 || bn.renorm.d_max_end < 0.0 || bn.renorm.ramp_end < bn.renorm.ramp_start {
            v.push("renorm schedule needs r_max >= 1, d_max >= 0, ramp_end >= ramp_start".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Channel width of every block. Widths change only at blocks 1 and 3.
    pub fn block_widths(&self) -> Vec<usize> {
        (0..self.num_blocks)
            .map(|i| if i >= 2 { self.c2.unwrap_or(self.c1) } else { self.c1 })
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.alphabet_size + 1
    }
}

#[derive(Clone, Debug)]
pub struct Stem {
    pub input_norm: Option<LayerNorm>,
    pub projection: ParamId,
    pub projection_bias: ParamId,
    pub depthwise: ParamId,
}

/// Parameters of one GateBlock. Transforms a variant does not use are absent.
#[derive(Clone, Debug)]
pub struct GateBlock {
    pub p1: SeparableConv,
    pub h1: Option<SeparableConv>,
    pub h2: Option<SeparableConv>,
    pub t: Option<SeparableConv>,
    pub p2: SeparableConv,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub projection: ParamId,
    pub bias: ParamId,
    pub norm: Option<LayerNorm>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub stem: Stem,
    /// Width-changing projection applied before block `i`, if any.
    pub transitions: Vec<Option<Projection>>,
    pub blocks: Vec<GateBlock>,
    pub head: Head,
    /// Training steps seen by the batch-norm layers.
    pub bn_step: u64,
}

/// Channel count entering the block stack.
pub fn stem_output_channels(config: &ModelConfig) -> usize {
    config.stem_channels + 1
}

impl<T: Real> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let norm = config.normalization;
        let bn = norm.batch_norm;
        let t = ParamKind::Trainable;
        let sc = config.stem_channels;

        let stem = Stem {
            input_norm: norm.end_layer_norms().then(|| LayerNorm::new(&mut store, "stem/norm", 1)),
            projection: store.add("stem/projection", fan_in_uniform(&mut rng, &[1, sc], 1), t),
            projection_bias: store.add("stem/projection_bias", Tensor::zeros(&[sc]), t),
            depthwise: store.add(
                "stem/depthwise",
                fan_in_uniform(
                    &mut rng,
                    &[config.stem_kernel, config.stem_kernel, sc],
                    config.stem_kernel * config.stem_kernel,
                ),
                t,
            ),
        };

        let k = config.gate_kernel;
        let variant = config.gate_variant;
        let mut transitions = Vec::new();
        let mut blocks = Vec::new();
        let mut width = stem_output_channels(&config);
        for (i, w) in config.block_widths().into_iter().enumerate() {
            let name = format!("block{i}");
            transitions.push((w != width).then(|| {
                Projection::new(&mut store, &mut rng, &format!("{name}/transition"), width, w, Activation::Elu, bn)
            }));
            width = w;
            let half = w / 2;
            let mut sep = |store: &mut ParamStore<T>, part: &str, c_in, c_out, act| {
                SeparableConv::new(store, &mut rng, &format!("{name}/{part}"), c_in, c_out, k, act, bn)
            };
            let p1 = sep(&mut store, "p1", w, half, Activation::Elu);
            let h1 = variant.uses_h1().then(|| sep(&mut store, "h1", half, half, Activation::Tanh));
            let h2 = variant.uses_h2().then(|| sep(&mut store, "h2", half, half, Activation::Tanh));
            let tg = variant.uses_gate().then(|| sep(&mut store, "t", half, half, Activation::Sigmoid));
            let p2 = sep(&mut store, "p2", half, w, Activation::Elu);
            blocks.push(GateBlock {
                p1,
                h1,
                h2,
                t: tg,
                p2,
                width: w,
            });
        }

        let classes = config.num_classes();
        let head = Head {
            projection: store.add("head/projection", fan_in_uniform(&mut rng, &[width, classes], width), t),
            bias: store.add("head/bias", Tensor::zeros(&[classes]), t),
            norm: norm.end_layer_norms().then(|| LayerNorm::new(&mut store, "head/norm", classes)),
        };

        Ok(Model {
            config,
            store,
            stem,
            transitions,
            blocks,
            head,
            bn_step: 0,
        })
    }

    /// Exact count of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Starts a forward pass. `grads` makes parameters differentiable.
    pub fn begin(&self, training: bool, grads: bool, seed: u64) -> Forward<'_, T> {
        Forward::new(&self.store, training, grads, self.config.batch_norm, self.bn_step, seed)
    }

    /// `(N, H, W, 1) -> (N, H, W, stem_channels + 1)`.
    pub fn stem_forward(&self, f: &mut Forward<'_, T>, image: Var) -> Result<Var> {
        let c = f.graph.value(image).dims4("stem")?[3];
        if c != 1 {
            return Err(Error::Dimension {
                op: "stem",
                axis: "channels",
                expected: 1,
                found: c,
            });
        }
        let normed = match &self.stem.input_norm {
            Some(ln) => ln.forward(f, image)?,
            None => image,
        };
        let pre = self.stem_projection(f, normed)?;
        let k = f.bindings.var(self.stem.depthwise);
        let pre = f.graph.depthwise_conv2d(pre, k, (1, 1), crate::kernels::Padding::Same)?;
        f.graph.concat_channels(&[pre, normed])
    }

    /// Layer-normed image through the 1×1 projection and the stem nonlinearity.
    pub fn stem_projection(&self, f: &mut Forward<'_, T>, normed: Var) -> Result<Var> {
        let w = f.bindings.var(self.stem.projection);
        let b = f.bindings.var(self.stem.projection_bias);
        let y = f.graph.pointwise_conv2d(normed, w, Some(b))?;
        match self.config.normalization.stem_nonlinearity {
            StemNonlinearity::Softmax => f.graph.softmax_channels(y),
            StemNonlinearity::Tanh => Ok(f.graph.tanh(y)),
            StemNonlinearity::None => Ok(y),
        }
    }

    pub fn gate_block_forward(&self, f: &mut Forward<'_, T>, block: usize, y: Var) -> Result<Var> {
        gate_block_forward(f, &self.blocks[block], self.config.gate_variant, y)
    }

    /// `(N, H, W, C) -> (N, 1, W, A+1)` log-probabilities.
    pub fn head_forward(&self, f: &mut Forward<'_, T>, features: Var) -> Result<Var> {
        let x = spatial_dropout(
            f,
            features,
            DropoutConfig {
                rate: self.config.dropout_rate,
            },
        )?;
        let (w, b) = (f.bindings.var(self.head.projection), f.bindings.var(self.head.bias));
        let x = f.graph.pointwise_conv2d(x, w, Some(b))?;
        let mut x = global_avg_pool_height(&mut f.graph, x)?;
        if let Some(ln) = &self.head.norm {
            x = ln.forward(f, x)?;
        }
        f.graph.log_softmax_channels(x)
    }

    /// Blocks with their width transitions.
    pub fn body_forward(&self, f: &mut Forward<'_, T>, mut x: Var) -> Result<Var> {
        for (i, transition) in self.transitions.iter().enumerate() {
            if let Some(p) = transition {
                x = p.forward(f, x)?;
            }
            x = self.gate_block_forward(f, i, x)?;
        }
        Ok(x)
    }

    pub fn forward(&self, f: &mut Forward<'_, T>, image: Var) -> Result<Var> {
        let w = f.graph.value(image).dims4("model")?[2];
        if w == 0 {
            return Err(Error::Dimension {
                op: "model",
                axis: "width",
                expected: 1,
                found: 0,
            });
        }
        let x = self.stem_forward(f, image)?;
        let x = self.body_forward(f, x)?;
        self.head_forward(f, x)
    }

    /// Inference-mode log-probabilities `(N, 1, W, A+1)` for a batch of images.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut f = self.begin(false, false, 0);
        let x = f.graph.input(images.clone());
        let out = self.forward(&mut f, x)?;
        Ok(f.graph.value(out).clone())
    }

    /// Folds the statistics of a finished training step into the running
    /// averages and advances the renorm schedule.
    pub fn apply_batch_norm_updates(&mut self, updates: &[BatchNormUpdate<T>]) {
        apply_batch_norm_updates(&mut self.store, updates, self.config.batch_norm.momentum);
        self.bn_step += 1;
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            transitions: self.transitions.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
            bn_step: self.bn_step,
        }
    }
}

/// One GateBlock under `variant`. Widths must match the block's parameters.
pub fn gate_block_forward<T: Real>(
    f: &mut Forward<'_, T>,
    block: &GateBlock,
    variant: GateVariant,
    y: Var,
) -> Result<Var> {
    let c = f.graph.value(y).dims4("gate_block")?[3];
    if c != block.width {
        return Err(Error::Dimension {
            op: "gate_block",
            axis: "channels",
            expected: block.width,
            found: c,
        });
    }
    let yp = block.p1.forward(f, y)?;
    let apply = |f: &mut Forward<'_, T>, conv: &Option<SeparableConv>| -> Result<Var> {
        conv.as_ref()
            .expect("variant transform present by construction")
            .forward(f, yp)
    };
    let inner = match variant {
        GateVariant::Baseline | GateVariant::GatesNoResidual => {
            let h1 = apply(f, &block.h1)?;
            let h2 = apply(f, &block.h2)?;
            let t = apply(f, &block.t)?;
            let d = f.graph.sub(h1, h2)?;
            f.graph.mul(d, t)?
        }
        GateVariant::MulGatePlusOne => {
            let t = apply(f, &block.t)?;
            let t1 = f.graph.add_scalar(t, T::one());
            f.graph.mul(t1, yp)?
        }
        GateVariant::SingleH => {
            let h1 = apply(f, &block.h1)?;
            let t = apply(f, &block.t)?;
            f.graph.mul(h1, t)?
        }
        GateVariant::AddOneH1MinusH2 => {
            let h1 = apply(f, &block.h1)?;
            let h2 = apply(f, &block.h2)?;
            let t = apply(f, &block.t)?;
            let t1 = f.graph.add_scalar(t, T::one());
            let m = f.graph.mul(t1, h1)?;
            f.graph.sub(m, h2)?
        }
        GateVariant::H1GateMinusH2 => {
            let h1 = apply(f, &block.h1)?;
            let h2 = apply(f, &block.h2)?;
            let t = apply(f, &block.t)?;
            let m = f.graph.mul(h1, t)?;
            f.graph.sub(m, h2)?
        }
        GateVariant::ResidualOnly | GateVariant::Plain => apply(f, &block.h1)?,
    };
    let out = block.p2.forward(f, inner)?;
    if variant.residual() {
        f.graph.add(out, y)
    } else {
        Ok(out)
    }
}
