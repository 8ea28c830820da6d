use std::collections::HashMap;

use crate::error::{Error, Result};

use super::kernels::{self, Padding};
use super::{gemm, Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Non-trainable entries (batch-norm running statistics, frozen biases)
    /// never receive gradients or optimizer updates.
    pub trainable: bool,
}

/// Owns every parameter buffer of a model, addressed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { params: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Folds recorded batch statistics into the running mean/variance.
    /// `momentum` is the weight kept on the previous running value.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: f64) {
        let keep = T::lit(momentum);
        let take = T::one() - keep;
        for u in updates {
            let m = u.count as f64;
            let unbias = T::lit(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
            let mean = self.value_mut(u.running_mean);
            for (r, &b) in mean.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + take * b;
            }
            let var = self.value_mut(u.running_var);
            for (r, &b) in var.data_mut().iter_mut().zip(&u.batch_var) {
                *r = keep * *r + take * b * unbias;
            }
        }
    }
}

/// Batch statistics observed by a training-mode batch norm, waiting to be
/// folded into the running buffers by [`ParamStore::apply_bn_updates`].
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub count: usize,
}

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u8>,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormInfer {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SpaceToDepth {
        input: Var,
        block: usize,
    },
    Reshape {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Square {
        input: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    AddRow {
        input: Var,
        bias: Var,
    },
    Tanh {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    /// Scalar produced outside the graph whose gradient w.r.t. `input` was
    /// computed alongside its value.
    Fused {
        input: Var,
        grad: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::BatchNormTrain { .. } | Op::BatchNormInfer { .. } => "batch_norm",
            Op::Concat { .. } => "concat_channels",
            Op::SpaceToDepth { .. } => "space_to_depth",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Square { .. } => "square",
            Op::MatMul { .. } => "matmul",
            Op::AddRow { .. } => "add_row",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Fused { .. } => "fused_loss",
        }
    }
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to an input created with `requires_grad`.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&var)
    }

    /// Adds another gradient set (same parameter store) into this one.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        if self.params.len() < other.params.len() {
            self.params.resize_with(other.params.len(), || None);
        }
        for (slot, g) in self.params.iter_mut().zip(other.params) {
            if let Some(g) = g {
                accumulate(slot, g);
            }
        }
    }

    pub fn set_param(&mut self, id: ParamId, grad: Tensor<T>) {
        if self.params.len() <= id.0 {
            self.params.resize_with(id.0 + 1, || None);
        }
        self.params[id.0] = Some(grad);
    }

    pub fn empty(param_count: usize) -> Self {
        Gradients {
            params: (0..param_count).map(|_| None).collect(),
            inputs: HashMap::new(),
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Tape of executed ops. Nodes are appended in execution order, so walking
/// the tape backwards is a reverse topological traversal.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<'p, T>>,
    mode: Mode,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Input,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.params.get(id);
        self.nodes.push(Node {
            value: Value::Borrowed(&p.value),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op.name())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let y = kernels::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &deps,
        )
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2(self.value(input))?;
        self.push(y, Op::MaxPool2 { input, argmax }, &[input])
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Result<Var> {
        let y = kernels::leaky_relu(self.value(input), slope);
        self.push(y, Op::LeakyRelu { input, slope }, &[input])
    }

    /// Batch norm over all but the channel axis. In training mode the batch
    /// statistics normalize the input and are queued as a [`BnUpdate`].
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        match self.mode {
            Mode::Train => {
                let (y, stats) = kernels::batch_norm_train(
                    self.value(input),
                    self.value(gamma),
                    self.value(beta),
                )?;
                let c = stats.mean.len();
                self.bn_updates.push(BnUpdate {
                    running_mean,
                    running_var,
                    batch_mean: stats.mean.clone(),
                    batch_var: stats.var,
                    count: self.value(input).len() / c.max(1),
                });
                self.push(
                    y,
                    Op::BatchNormTrain {
                        input,
                        gamma,
                        beta,
                        mean: stats.mean,
                        inv_std: stats.inv_std,
                    },
                    &[input, gamma, beta],
                )
            }
            Mode::Infer => {
                let mean = self.params.value(running_mean);
                let (y, inv_std) = kernels::batch_norm_infer(
                    self.value(input),
                    self.value(gamma),
                    self.value(beta),
                    mean,
                    self.params.value(running_var),
                )?;
                let mean = mean.data().to_vec();
                self.push(
                    y,
                    Op::BatchNormInfer {
                        input,
                        gamma,
                        beta,
                        mean,
                        inv_std,
                    },
                    &[input, gamma, beta],
                )
            }
        }
    }

    /// Training-mode normalization by batch statistics that does not touch
    /// any running buffers.
    pub fn batch_norm_batch_stats(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (y, stats) =
            kernels::batch_norm_train(self.value(input), self.value(gamma), self.value(beta))?;
        self.push(
            y,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mean: stats.mean,
                inv_std: stats.inv_std,
            },
            &[input, gamma, beta],
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::concat_channels(self.value(a), self.value(b))?;
        self.push(y, Op::Concat { a, b }, &[a, b])
    }

    pub fn space_to_depth(&mut self, input: Var, block: usize) -> Result<Var> {
        let y = kernels::space_to_depth(self.value(input), block)?;
        self.push(y, Op::SpaceToDepth { input, block }, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(input).clone().reshape(shape)?;
        self.push(y, Op::Reshape { input }, &[input])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let bv = self.value(b).data();
        let mut y = self.value(a).clone();
        for (x, &z) in y.data_mut().iter_mut().zip(bv) {
            *x = *x * z;
        }
        self.push(y, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let y = self.value(input).map(|x| x * factor);
        self.push(y, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        let y = self.value(input).map(|x| x * x);
        self.push(y, Op::Square { input }, &[input])
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        let y = self.value(input).map(|x| x.tanh());
        self.push(y, Op::Tanh { input }, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let y = self.value(input).map(sigmoid);
        self.push(y, Op::Sigmoid { input }, &[input])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            T::zero(),
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, &[a, b])
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, input: Var, bias: Var) -> Result<Var> {
        let n = *self.value(input).shape().last().unwrap_or(&0);
        if self.value(bias).len() != n {
            return Err(Error::shape(
                "add_row",
                "bias length differs from row length",
            ));
        }
        let b = self.value(bias).data();
        let mut y = self.value(input).clone();
        for row in y.data_mut().chunks_mut(n.max(1)) {
            for (x, &bv) in row.iter_mut().zip(b) {
                *x = *x + bv;
            }
        }
        self.push(y, Op::AddRow { input, bias }, &[input, bias])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() || z.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                "logits/targets length mismatch",
            ));
        }
        let m = T::lit(z.len() as f64);
        let total: T = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        self.push(
            Tensor::scalar(total / m),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Records a scalar whose gradient with respect to `input` is already known.
    pub fn fused_scalar(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::shape(
                "fused_loss",
                "gradient shape differs from input",
            ));
        }
        grad.check_finite("fused_loss gradient")?;
        self.push(Tensor::scalar(value), Op::Fused { input, grad }, &[input])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut out = Gradients::empty(self.params.len());
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            dy.check_finite(&format!("backward of {}", node.op.name()))?;
            let mut send = |v: Var, g: Tensor<T>| {
                if self.needs(v) {
                    accumulate(&mut grads[v.0], g);
                }
            };
            match &node.op {
                Op::Input => {
                    out.inputs.insert(Var(i), dy);
                }
                Op::Param(id) => accumulate(&mut out.params[id.0], dy),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let g = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &dy,
                        *stride,
                        *padding,
                        self.needs(*input),
                        self.needs(*kernel),
                        bias.is_some_and(|b| self.needs(b)),
                    )?;
                    if let Some(gx) = g.input {
                        send(*input, gx);
                    }
                    if let Some(gk) = g.kernel {
                        send(*kernel, gk);
                    }
                    if let (Some(b), Some(gb)) = (bias, g.bias) {
                        send(*b, gb);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let shape = self.value(*input).shape().to_vec();
                    send(*input, kernels::maxpool2_backward(&dy, argmax, &shape));
                }
                Op::LeakyRelu { input, slope } => {
                    let x = self.value(*input).data();
                    let mut g = dy;
                    for (d, &xv) in g.data_mut().iter_mut().zip(x) {
                        if xv < T::zero() {
                            *d = *d * *slope;
                        }
                    }
                    send(*input, g);
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (gx, gg, gb) = kernels::batch_norm_train_backward(
                        self.value(*input),
                        &dy,
                        self.value(*gamma),
                        mean,
                        inv_std,
                    );
                    send(*input, gx);
                    send(*gamma, gg);
                    send(*beta, gb);
                }
                Op::BatchNormInfer {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let x = self.value(*input);
                    let gam = self.value(*gamma).data();
                    let c = gam.len();
                    let mut gx = Tensor::zeros(x.shape());
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for ((xr, dr), or) in x
                        .data()
                        .chunks(c)
                        .zip(dy.data().chunks(c))
                        .zip(gx.data_mut().chunks_mut(c))
                    {
                        for ch in 0..c {
                            or[ch] = dr[ch] * gam[ch] * inv_std[ch];
                            gg[ch] = gg[ch] + dr[ch] * (xr[ch] - mean[ch]) * inv_std[ch];
                            gb[ch] = gb[ch] + dr[ch];
                        }
                    }
                    send(*input, gx);
                    send(*gamma, Tensor::new(&[c], gg)?);
                    send(*beta, Tensor::new(&[c], gb)?);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).shape()[3];
                    let (ga, gb) = kernels::split_channels(&dy, ca);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::SpaceToDepth { input, block } => {
                    send(*input, kernels::depth_to_space(&dy, *block)?);
                }
                Op::Reshape { input } => {
                    let shape = self.value(*input).shape().to_vec();
                    send(*input, dy.reshape(&shape)?);
                }
                Op::Add { a, b } => {
                    send(*a, dy.clone());
                    send(*b, dy);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let mut ga = dy.clone();
                    ga.data_mut()
                        .iter_mut()
                        .zip(bv)
                        .for_each(|(g, &z)| *g = *g * z);
                    let mut gb = dy;
                    gb.data_mut()
                        .iter_mut()
                        .zip(av)
                        .for_each(|(g, &z)| *g = *g * z);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Scale { input, factor } => send(*input, dy.map(|g| g * *factor)),
                Op::Sum { input } => {
                    let shape = self.value(*input).shape().to_vec();
                    send(*input, Tensor::full(&shape, dy.item()));
                }
                Op::Square { input } => {
                    let x = self.value(*input).data();
                    let mut g = dy;
                    let two = T::lit(2.0);
                    g.data_mut()
                        .iter_mut()
                        .zip(x)
                        .for_each(|(g, &x)| *g = *g * two * x);
                    send(*input, g);
                }
                Op::Tanh { input: inp } => {
                    let y = self.value(Var(i)).data();
                    let mut g = dy;
                    g.data_mut()
                        .iter_mut()
                        .zip(y)
                        .for_each(|(g, &y)| *g = *g * (T::one() - y * y));
                    send(*inp, g);
                }
                Op::Sigmoid { input: inp } => {
                    let y = self.value(Var(i)).data();
                    let mut g = dy;
                    g.data_mut()
                        .iter_mut()
                        .zip(y)
                        .for_each(|(g, &y)| *g = *g * y * (T::one() - y));
                    send(*inp, g);
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.needs(*a) {
                        let mut ga = vec![T::zero(); m * k];
                        gemm(
                            m,
                            n,
                            k,
                            dy.data(),
                            false,
                            bv.data(),
                            true,
                            &mut ga,
                            T::zero(),
                        );
                        send(*a, Tensor::new(&[m, k], ga)?);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); k * n];
                        gemm(
                            k,
                            m,
                            n,
                            av.data(),
                            true,
                            dy.data(),
                            false,
                            &mut gb,
                            T::zero(),
                        );
                        send(*b, Tensor::new(&[k, n], gb)?);
                    }
                }
                Op::AddRow { input, bias } => {
                    let n = self.value(*bias).len();
                    let mut gb = vec![T::zero(); n];
                    for row in dy.data().chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    send(*bias, Tensor::new(&[n], gb)?);
                    send(*input, dy);
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.value(*logits);
                    let m = T::lit(targets.len() as f64);
                    let scale = dy.item() / m;
                    let mut g = z.map(sigmoid);
                    g.data_mut()
                        .iter_mut()
                        .zip(targets)
                        .for_each(|(p, &y)| *p = (*p - y) * scale);
                    send(*logits, g);
                }
                Op::Fused { input, grad } => {
                    let s = dy.item();
                    send(*input, grad.map(|g| g * s));
                }
            }
        }
        for g in out.params.iter().flatten() {
            g.check_finite("parameter gradient")?;
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("x", Tensor::scalar(3.0), true);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.param(p);
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_on_vector_is_rejected() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::zeros(&[3]), true);
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shared_param_accumulates_from_both_uses() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap(), true);
        let mut g = Graph::new(&store, Mode::Train);
        let a = g.param(p);
        let b = g.param(p);
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(p).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("w", Tensor::scalar(2.0), false);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::scalar(5.0), true);
        let w = g.param(p);
        let y = g.mul(x, w).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.param(p).is_none());
        assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::scalar(f32::MAX), false);
        assert!(matches!(g.square(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let mean = store.add("m", Tensor::zeros(&[1]), false);
        let var = store.add("v", Tensor::full(&[1], 1.0), false);
        let gamma = store.add("g", Tensor::full(&[1], 1.0), true);
        let beta = store.add("b", Tensor::zeros(&[1]), true);
        let updates = {
            let mut g = Graph::new(&store, Mode::Train);
            let x = g.input(Tensor::new(&[1, 1, 2, 1], vec![0.0, 2.0]).unwrap(), false);
            let (gv, bv) = (g.param(gamma), g.param(beta));
            g.batch_norm(x, gv, bv, mean, var).unwrap();
            g.bn_updates().to_vec()
        };
        store.apply_bn_updates(&updates, 0.99);
        assert!((store.value(mean).item() - 0.01).abs() < 1e-12);
        // batch var 1 (biased) -> 2 unbiased
        assert!((store.value(var).item() - (0.99 + 0.02)).abs() < 1e-12);
    }
}
