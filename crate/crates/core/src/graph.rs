//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it executes, so node order is a
//! topological order. [`Graph::backward`] walks the tape in reverse and
//! accumulates adjoints. Leaves created with `requires_grad = false` (input
//! images, constants) receive no gradient, and kernels skip the work of
//! computing input gradients nobody consumes.

use crate::error::{Error, Result};
use crate::kernels::{self, NormCache, Padding};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Neg,
    Tanh,
    Sigmoid,
    Elu,
}

enum Op<T> {
    Leaf,
    Depthwise {
        input: Var,
        kernel: Var,
        stride: (usize, usize),
        padding: Padding,
    },
    Pointwise {
        input: Var,
        weights: Var,
        bias: Option<Var>,
    },
    Binary(Elementwise, Var, Var),
    Unary(Elementwise, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Softmax(Var),
    LogSoftmax(Var),
    ReduceMean {
        input: Var,
        axis: usize,
    },
    Concat(Vec<Var>),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        /// Normalized value fed to the affine map (`xhat * r + d` in training).
        z: Tensor<T>,
        /// Batch-standardized input; present only when batch statistics were used.
        batch: Option<NormCache<T>>,
        /// Per-channel `dz/dx` factor: `r` in training, `1/sigma` at inference.
        scale: Vec<T>,
    },
    Mask {
        input: Var,
        mask: Tensor<T>,
    },
    Sum(Var),
    Loss {
        input: Var,
        grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input that receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let out = kernels::depthwise_forward(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            out,
            Op::Depthwise {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        ))
    }

    pub fn pointwise_conv2d(&mut self, input: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let out = kernels::pointwise_forward(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
        )?;
        let mut deps = vec![input, weights];
        deps.extend(bias);
        Ok(self.push(
            out,
            Op::Pointwise {
                input,
                weights,
                bias,
            },
            &deps,
        ))
    }

    /// Pointwise arithmetic and activations. Binary ops need identical shapes,
    /// or a single-element right operand which is broadcast.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        use Elementwise::*;
        match (op, b) {
            (Add | Sub | Mul, Some(b)) => {
                let (x, y) = (self.value(a), self.value(b));
                let f = |p: T, q: T| match op {
                    Add => p + q,
                    Sub => p - q,
                    _ => p * q,
                };
                let out = if y.len() == 1 && y.shape() != x.shape() && y.is_scalar() {
                    let s = y.item();
                    x.map(|p| f(p, s))
                } else {
                    x.zip_map(y, "elementwise", f)?
                };
                Ok(self.push(out, Op::Binary(op, a, b), &[a, b]))
            }
            (Add | Sub | Mul, None) => Err(Error::Shape {
                op: "elementwise",
                shape: self.value(a).shape().to_vec(),
                reason: format!("{op:?} needs two operands"),
            }),
            (_, Some(_)) => Err(Error::Shape {
                op: "elementwise",
                shape: self.value(a).shape().to_vec(),
                reason: format!("{op:?} takes one operand"),
            }),
            (_, None) => {
                let x = self.value(a);
                let out = match op {
                    Neg => x.map(|v| -v),
                    Tanh => x.map(T::tanh),
                    Sigmoid => x.map(sigmoid),
                    _ => x.map(elu),
                };
                Ok(self.push(out, Op::Unary(op, a), &[a]))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Neg, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Sigmoid, a)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Elu, a)
    }

    fn unary(&mut self, op: Elementwise, a: Var) -> Var {
        self.elementwise(op, a, None).expect("unary ops are infallible")
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::MulScalar(a, c), &[a])
    }

    /// Softmax over the channel (last) axis.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        self.value(a).dims4("softmax_channels")?;
        let out = kernels::softmax_last(self.value(a));
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax_channels(&mut self, a: Var) -> Result<Var> {
        self.value(a).dims4("log_softmax_channels")?;
        let out = kernels::log_softmax_last(self.value(a));
        Ok(self.push(out, Op::LogSoftmax(a), &[a]))
    }

    /// Mean along `axis`; the axis is kept with extent 1.
    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = kernels::reduce_mean(self.value(a), axis)?;
        Ok(self.push(out, Op::ReduceMean { input: a, axis }, &[a]))
    }

    /// Concatenates NHWC tensors along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).dims4("concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.value(p).dims4("concat")?;
            for (axis, name) in [(0, "batch"), (1, "height"), (2, "width")] {
                if d[axis] != first[axis] {
                    return Err(Error::Dimension {
                        op: "concat",
                        axis: name,
                        expected: first[axis],
                        found: d[axis],
                    });
                }
            }
            widths.push(d[3]);
        }
        let total: usize = widths.iter().sum();
        let rows = first[0] * first[1] * first[2];
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * c..][..c]);
            }
        }
        let out = Tensor::new_unchecked(vec![first[0], first[1], first[2], total], out);
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, cache) =
            kernels::layer_norm_forward(self.value(input), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                cache,
            },
            &[input, gamma, beta],
        ))
    }

    fn check_channels(&self, op: &'static str, input: Var, params: &[Var]) -> Result<usize> {
        let c = self.value(input).dims4(op)?[3];
        for &p in params {
            let len = self.value(p).len();
            if len != c {
                return Err(Error::Dimension {
                    op,
                    axis: "channels",
                    expected: c,
                    found: len,
                });
            }
        }
        Ok(c)
    }

    /// Batch renormalization with batch statistics. `r` and `d` are computed
    /// from the running statistics, clipped, and treated as constants by the
    /// backward pass. With `r_max = 1` and `d_max = 0` this is plain batch norm.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        r_max: T,
        d_max: T,
        eps: T,
    ) -> Result<(Var, BatchMoments<T>)> {
        let c = self.check_channels("batch_norm", input, &[gamma, beta])?;
        let x = self.value(input);
        let [n, h, w, _] = x.dims4("batch_norm")?;
        if n * h * w < 2 {
            return Err(Error::DegenerateBatch(n * h * w));
        }
        let (mean, var) = kernels::channel_moments(x)?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = kernels::channel_affine(x, &mean, &inv_std);
        let mut r = vec![T::one(); c];
        let mut d = vec![T::zero(); c];
        for ch in 0..c {
            let sigma_run = (running_var[ch] + eps).sqrt();
            let sigma_b = (var[ch] + eps).sqrt();
            r[ch] = (sigma_b / sigma_run).max(T::one() / r_max).min(r_max);
            d[ch] = ((mean[ch] - running_mean[ch]) / sigma_run).max(-d_max).min(d_max);
        }
        let mut z = xhat.clone();
        for px in z.data_mut().chunks_exact_mut(c) {
            for ((v, &rr), &dd) in px.iter_mut().zip(&r).zip(&d) {
                *v = *v * rr + dd;
            }
        }
        let out = affine(&z, self.value(gamma), self.value(beta));
        let var_out = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                z,
                batch: Some(NormCache { xhat, inv_std }),
                scale: r,
            },
            &[input, gamma, beta],
        );
        Ok((var_out, BatchMoments { mean, var }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        self.check_channels("batch_norm", input, &[gamma, beta])?;
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let z = kernels::channel_affine(self.value(input), running_mean, &inv_std);
        let out = affine(&z, self.value(gamma), self.value(beta));
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                z,
                batch: None,
                scale: inv_std,
            },
            &[input, gamma, beta],
        ))
    }

    /// Multiplies by a constant tensor of the same shape (dropout masks).
    pub fn mask(&mut self, input: Var, mask: Tensor<T>) -> Result<Var> {
        let out = self.value(input).zip_map(&mask, "mask", |a, b| a * b)?;
        Ok(self.push(out, Op::Mask { input, mask }, &[input]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// A scalar computed outside the graph whose gradient with respect to
    /// `input` is already known (used for the CTC loss).
    pub fn external_loss(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        self.value(input).expect_same_shape(&grad, "external_loss")?;
        Ok(self.push(Tensor::scalar(value), Op::Loss { input, grad }, &[input]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Depthwise {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (gi, gk) = kernels::depthwise_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *padding,
                    needs(*input),
                )?;
                if let Some(gi) = gi {
                    acc(*input, gi);
                }
                acc(*kernel, gk);
            }
            Op::Pointwise {
                input,
                weights,
                bias,
            } => {
                let pg = kernels::pointwise_backward(self.value(*input), self.value(*weights), g, needs(*input))?;
                if let Some(gi) = pg.input {
                    acc(*input, gi);
                }
                acc(*weights, pg.weights);
                if let Some(b) = bias {
                    acc(*b, pg.bias);
                }
            }
            Op::Binary(op, a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let broadcast = y.shape() != x.shape();
                let reduce = |t: Tensor<T>| {
                    if broadcast {
                        Tensor::new_unchecked(y.shape().to_vec(), vec![t.sum()])
                    } else {
                        t
                    }
                };
                let yv = |i: usize| if broadcast { y.item() } else { y.data()[i] };
                match op {
                    Elementwise::Add => {
                        acc(*a, g.clone());
                        acc(*b, reduce(g.clone()));
                    }
                    Elementwise::Sub => {
                        acc(*a, g.clone());
                        acc(*b, reduce(g.map(|v| -v)));
                    }
                    _ => {
                        if needs(*a) {
                            let mut ga = g.clone();
                            ga.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v *= yv(i));
                            acc(*a, ga);
                        }
                        if needs(*b) {
                            let gb = g.zip_map(x, "mul", |p, q| p * q)?;
                            acc(*b, reduce(gb));
                        }
                    }
                }
            }
            Op::Unary(op, a) => {
                let y = &node.value;
                let x = self.value(*a);
                let ga = match op {
                    Elementwise::Neg => g.map(|v| -v),
                    Elementwise::Tanh => g.zip_map(y, "tanh", |gv, yv| gv * (T::one() - yv * yv))?,
                    Elementwise::Sigmoid => g.zip_map(y, "sigmoid", |gv, yv| gv * yv * (T::one() - yv))?,
                    _ => {
                        let d = x.zip_map(y, "elu", |xv, yv| if xv >= T::zero() { T::one() } else { yv + T::one() })?;
                        g.zip_map(&d, "elu", |gv, dv| gv * dv)?
                    }
                };
                acc(*a, ga);
            }
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MulScalar(a, c) => acc(*a, g.map(|v| v * *c)),
            Op::Softmax(a) => {
                let y = &node.value;
                let c = *y.shape().last().unwrap_or(&1);
                let mut ga = g.clone();
                for (gs, ys) in ga.data_mut().chunks_exact_mut(c).zip(y.data().chunks_exact(c)) {
                    let dot: T = gs.iter().zip(ys).map(|(&p, &q)| p * q).sum();
                    for (gv, &yv) in gs.iter_mut().zip(ys) {
                        *gv = yv * (*gv - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let c = *y.shape().last().unwrap_or(&1);
                let mut ga = g.clone();
                for (gs, ys) in ga.data_mut().chunks_exact_mut(c).zip(y.data().chunks_exact(c)) {
                    let total: T = gs.iter().copied().sum();
                    for (gv, &yv) in gs.iter_mut().zip(ys) {
                        *gv -= yv.exp() * total;
                    }
                }
                acc(*a, ga);
            }
            Op::ReduceMean { input, axis } => {
                let x = self.value(*input);
                let (outer, len, inner) = kernels::split_axis(x.shape(), *axis);
                let scale = T::one() / T::from_usize(len);
                let mut ga = Tensor::zeros_like(x);
                for o in 0..outer {
                    let src = &g.data()[o * inner..][..inner];
                    for a in 0..len {
                        let dst = &mut ga.data_mut()[(o * len + a) * inner..][..inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                acc(*input, ga);
            }
            Op::Concat(parts) => {
                let total = *g.shape().last().unwrap_or(&1);
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = *pv.shape().last().unwrap_or(&1);
                    if needs(p) {
                        let mut gp = Vec::with_capacity(pv.len());
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..][..c]);
                        }
                        acc(p, Tensor::new_unchecked(pv.shape().to_vec(), gp));
                    }
                    offset += c;
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (gx, gg, gb) = kernels::layer_norm_backward(cache, self.value(*gamma), g);
                acc(*input, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                z,
                batch,
                scale,
            } => {
                let gm = self.value(*gamma).data();
                let c = gm.len();
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for (gs, zs) in g.data().chunks_exact(c).zip(z.data().chunks_exact(c)) {
                    for ch in 0..c {
                        gg[ch] += gs[ch] * zs[ch];
                        gb[ch] += gs[ch];
                    }
                }
                if needs(*input) {
                    let mut up = g.clone();
                    for px in up.data_mut().chunks_exact_mut(c) {
                        for ch in 0..c {
                            px[ch] *= gm[ch] * scale[ch];
                        }
                    }
                    let gx = match batch {
                        Some(cache) => kernels::batch_standardize_backward(&cache.xhat, &cache.inv_std, &up),
                        None => up,
                    };
                    acc(*input, gx);
                }
                acc(*gamma, Tensor::new_unchecked(vec![c], gg));
                acc(*beta, Tensor::new_unchecked(vec![c], gb));
            }
            Op::Mask { input, mask } => acc(*input, g.zip_map(mask, "mask", |a, b| a * b)?),
            Op::Sum(a) => {
                let s = g.item();
                acc(*a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::Loss { input, grad } => {
                let s = g.item();
                acc(*input, grad.map(|v| v * s));
            }
        }
        Ok(())
    }
}

fn affine<T: Real>(z: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let c = gamma.len();
    let mut out = z.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for ((v, &g), &b) in px.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = g * *v + b;
        }
    }
    out
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Exponential linear unit with unit scale.
pub(crate) fn elu<T: Real>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
