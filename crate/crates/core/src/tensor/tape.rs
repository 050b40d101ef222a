use super::conv::Conv3dGeometry;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// x[.., n] + b[n]
    AddBias(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Sum(Var),
    Mean(Var),
    Elu(Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Gather { input: Var, indices: Vec<usize> },
    GlobalAvgPool(Var),
    Upsample { input: Var, factor: usize },
    L2Normalize { input: Var, norms: Vec<T> },
    LogSumExp(Var),
    BceWithLogits { logits: Var, targets: Vec<T>, pos_weight: T },
    Conv3d { input: Var, kernel: Var, bias: Option<Var>, geom: Conv3dGeometry, cols: Vec<T> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Custom { name: String, inputs: Vec<Var>, backward: CustomBackward<T> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Elu(_) => "elu",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Gather { .. } => "gather",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Upsample { .. } => "upsample_nearest",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Conv3d { .. } => "conv3d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch statistics from a train-mode batchnorm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Ordered record of executed ops. Nodes are appended as they are created,
/// so index order is a topological order.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `xhat = (x - mean) * inv_std` and `out = gamma * xhat + beta` over `[B, C, S]` chunks.
#[allow(clippy::too_many_arguments)]
fn normalize_channels<T: Scalar>(
    x: &[T],
    s: usize,
    c: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    xhat: &mut [T],
    out: &mut [T],
) {
    for (chunk, ((xs, hs), os)) in x.chunks(s).zip(xhat.chunks_mut(s)).zip(out.chunks_mut(s)).enumerate() {
        let ci = chunk % c;
        let (m, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
        for ((&xv, h), o) in xs.iter().zip(hs.iter_mut()).zip(os.iter_mut()) {
            *h = (xv - m) * is;
            *o = g * *h + b;
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded op so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::invalid(op, format!("rank mismatch {:?} vs {:?}", sa, sb)));
        }
        for (axis, (x, y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(Error::Shape {
                    op,
                    axis,
                    expected: *x,
                    actual: *y,
                });
            }
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let src = self.value(a);
        let value = Tensor::from_fn(src.shape(), |i| f(src.data()[i]));
        self.push(value, op, &[a])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(x.shape(), |i| f(x.data()[i], y.data()[i]));
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds `bias[n]` to every length-`n` row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        let bs = self.shape(bias);
        if bs.len() != 1 || bs[0] != n {
            return Err(Error::Shape {
                op: "add_bias",
                axis: 0,
                expected: n,
                actual: bs.first().copied().unwrap_or(0),
            });
        }
        let (xv, bv) = (self.value(x), self.value(bias));
        let value = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + bv.data()[i % n]);
        self.push(value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::invalid("matmul", format!("operands must be 2D, got {:?} and {:?}", sa, sb)));
        }
        if sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                axis: 0,
                expected: sa[1],
                actual: sb[0],
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Elu(a), |x| if x > T::zero() { x } else { x.exp_m1() })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {:?}", base)));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() {
                return Err(Error::invalid("concat", format!("rank mismatch {:?} vs {:?}", base, s)));
            }
            for (ax, (x, y)) in base.iter().zip(s).enumerate() {
                if ax != axis && x != y {
                    return Err(Error::Shape {
                        op: "concat",
                        axis: ax,
                        expected: *x,
                        actual: *y,
                    });
                }
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} out of bounds on axis {axis} of {:?}", start + len, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.push(Tensor::new(new_shape, out)?, Op::Narrow { input: a, axis, start }, &[a])
    }

    /// Flat gather: `out[i] = a.flat[indices[i]]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid("gather", format!("index {bad} out of bounds for {} values", src.len())));
        }
        let out: Vec<T> = indices.iter().map(|&i| src[i]).collect();
        self.push(
            Tensor::new(vec![indices.len()], out)?,
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            &[a],
        )
    }

    /// [B, C, spatial...] -> [B, C]
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 3 {
            return Err(Error::invalid("global_avg_pool", format!("need [B,C,...], got {:?}", shape)));
        }
        let s: usize = shape[2..].iter().product();
        let inv = T::lit(1.0 / s as f64);
        let src = self.value(a).data();
        let out: Vec<T> = src
            .chunks(s)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Tensor::new(vec![shape[0], shape[1]], out)?, Op::GlobalAvgPool(a), &[a])
    }

    /// Nearest-neighbour upsampling of [B, C, d, h, w] by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 5 || factor == 0 {
            return Err(Error::invalid("upsample_nearest", format!("need [B,C,d,h,w] and factor >= 1, got {:?}", shape)));
        }
        let (d, h, w) = (shape[2], shape[3], shape[4]);
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let planes = shape[0] * shape[1];
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(planes * od * oh * ow);
        for pl in 0..planes {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        out.push(src[((pl * d + z / factor) * h + y / factor) * w + x / factor]);
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![shape[0], shape[1], od, oh, ow], out)?,
            Op::Upsample { input: a, factor },
            &[a],
        )
    }

    /// Unit-normalizes along the last axis: `x / sqrt(sum(x^2) + 1e-12)`.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape().last().unwrap_or(&1);
        let eps = T::lit(1e-12);
        let norms: Vec<T> = v
            .data()
            .chunks(n)
            .map(|row| (row.iter().map(|x| *x * *x).sum::<T>() + eps).sqrt())
            .collect();
        let value = Tensor::from_fn(v.shape(), |i| v.data()[i] / norms[i / n]);
        self.push(value, Op::L2Normalize { input: a, norms }, &[a])
    }

    /// Shift-stable log-sum-exp over the last axis.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let n = *shape.last().ok_or_else(|| Error::invalid("log_sum_exp", "scalar input"))?;
        if n == 0 {
            return Err(Error::invalid("log_sum_exp", "empty reduction axis"));
        }
        let out: Vec<T> = v.data().chunks(n).map(log_sum_exp_slice).collect();
        self.push(Tensor::new(shape[..shape.len() - 1].to_vec(), out)?, Op::LogSumExp(a), &[a])
    }

    /// Mean binary cross-entropy between sigmoid(logits) and `targets` in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        self.bce_with_logits_weighted(logits, targets, T::one())
    }

    /// Mean of `w y softplus(-x) + (1 - y) softplus(x)`.
    pub fn bce_with_logits_weighted(&mut self, logits: Var, targets: &[T], pos_weight: T) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                axis: 0,
                expected: z.len(),
                actual: targets.len(),
            });
        }
        let total: T = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| {
                let sp = x.max(T::zero()) + (-x.abs()).exp().ln_1p();
                pos_weight * y * (sp - x) + (T::one() - y) * sp
            })
            .sum();
        let value = total / T::lit(z.len() as f64);
        self.push(
            Tensor::scalar(value),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                pos_weight,
            },
            &[logits],
        )
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = Conv3dGeometry::infer(
            self.shape(input),
            self.shape(kernel),
            bias.map(|b| self.shape(b)),
            stride,
            pad,
        )?;
        let cols = geom.im2col(self.value(input).data());
        let out = geom.forward(
            &cols,
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut shape = vec![geom.c_out, geom.output[0], geom.output[1], geom.output[2]];
        if self.shape(input).len() == 5 {
            shape.insert(0, geom.batch);
        }
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            Tensor::new(shape, out)?,
            Op::Conv3d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            &inputs,
        )
    }

    fn bn_layout(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.shape(input);
        if shape.len() < 2 {
            return Err(Error::invalid("batchnorm", format!("need [B,C,...], got {:?}", shape)));
        }
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        for (v, axis) in [(gamma, 0), (beta, 0)] {
            let vs = self.shape(v);
            if vs.len() != 1 || vs[0] != c {
                return Err(Error::Shape {
                    op: "batchnorm",
                    axis,
                    expected: c,
                    actual: vs.first().copied().unwrap_or(0),
                });
            }
        }
        Ok((b, c, s))
    }

    /// Train-mode batch normalization over every axis except 1.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (b, c, s) = self.bn_layout(input, gamma, beta)?;
        if b < 2 {
            return Err(Error::invalid("batchnorm", "train mode needs a batch extent of at least 2"));
        }
        let x = self.value(input).data();
        let count = b * s;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                mean[ci] = mean[ci] + x[base..base + s].iter().copied().sum::<T>();
            }
        }
        let inv_count = T::lit(1.0 / count as f64);
        mean.iter_mut().for_each(|m| *m = *m * inv_count);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                let m = mean[ci];
                var[ci] = var[ci] + x[base..base + s].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
        }
        let biased: Vec<T> = var.iter().map(|v| *v * inv_count).collect();
        let inv_std: Vec<T> = biased.iter().map(|v| T::one() / (*v + T::lit(eps)).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.iter().map(|m| m.to_f64().unwrap_or(f64::NAN)).collect(),
            var: var
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN) / (count as f64 - 1.0))
                .collect(),
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        normalize_channels(x, s, c, &mean, &inv_std, g, bt, &mut xhat, &mut out);
        let shape = self.shape(input).to_vec();
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            &[input, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Eval-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, s) = self.bn_layout(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape {
                op: "batchnorm",
                axis: 1,
                expected: c,
                actual: running_mean.len(),
            });
        }
        let inv_std: Vec<T> = running_var.iter().map(|v| T::one() / (*v + T::lit(eps)).sqrt()).collect();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        normalize_channels(x, s, c, running_mean, &inv_std, g, bt, &mut xhat, &mut out);
        let shape = self.shape(input).to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            &[input, gamma, beta],
        )
    }

    /// Records an op with a caller-supplied backward rule. The rule receives
    /// (grad of output, input values, output value) and returns one optional
    /// gradient per input.
    pub fn custom(
        &mut self,
        name: &str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                name: name.to_string(),
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            inputs,
        )
    }

    /// Reverse pass from a scalar root. Each op is visited once, in reverse
    /// recording order. Errors if called twice without [`Tape::reset`].
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, node.requires_grad) {
                (Some(g), true) => Tensor::new(node.value.shape().to_vec(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.len();
        let out = &nodes[idx].value;

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(&mut grads[v.0], len(v), |d| add_into(d, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], len(*a), |d| add_into(d, g));
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], len(*b), |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d = *d - *g)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    accumulate(&mut grads[a.0], av.len(), |d| {
                        for i in 0..d.len() {
                            d[i] = d[i] + g[i] * bv[i];
                        }
                    });
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], bv.len(), |d| {
                        for i in 0..d.len() {
                            d[i] = d[i] + g[i] * av[i];
                        }
                    });
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], len(*x), |d| add_into(d, g));
                }
                if needs(*b) {
                    let n = len(*b);
                    accumulate(&mut grads[b.0], n, |d| {
                        for (i, gi) in g.iter().enumerate() {
                            d[i % n] = d[i % n] + *gi;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], len(*a), |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g * *c)
                    });
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    let bv = val(*b).data();
                    accumulate(&mut grads[a.0], m * k, |d| {
                        // dA = G · Bᵀ
                        T::gemm(m, n, k, T::one(), g, (n as isize, 1), bv, (1, n as isize), T::one(), d, (k as isize, 1));
                    });
                }
                if needs(*b) {
                    let av = val(*a).data();
                    accumulate(&mut grads[b.0], k * n, |d| {
                        // dB = Aᵀ · G
                        T::gemm(k, m, n, T::one(), av, (1, k as isize), g, (n as isize, 1), T::one(), d, (n as isize, 1));
                    });
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], len(*a), |d| d.iter_mut().for_each(|d| *d = *d + g[0]));
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let s = g[0] / T::lit(len(*a) as f64);
                    accumulate(&mut grads[a.0], len(*a), |d| d.iter_mut().for_each(|d| *d = *d + s));
                }
            }
            Op::Elu(a) => {
                if needs(*a) {
                    let (x, y) = (val(*a).data(), out.data());
                    accumulate(&mut grads[a.0], x.len(), |d| {
                        for i in 0..d.len() {
                            let slope = if x[i] > T::zero() { T::one() } else { y[i] + T::one() };
                            d[i] = d[i] + g[i] * slope;
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let x = val(*a).data();
                    accumulate(&mut grads[a.0], x.len(), |d| {
                        for i in 0..d.len() {
                            if x[i] > T::zero() {
                                d[i] = d[i] + g[i];
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let y = out.data();
                    accumulate(&mut grads[a.0], y.len(), |d| {
                        for i in 0..d.len() {
                            d[i] = d[i] + g[i] * y[i] * (T::one() - y[i]);
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], len(*a), |d| add_into(d, g));
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = val(*v).shape()[*axis] * inner;
                    if needs(*v) {
                        accumulate(&mut grads[v.0], len(*v), |d| {
                            for o in 0..outer {
                                add_into(&mut d[o * chunk..(o + 1) * chunk], &g[o * total + offset..o * total + offset + chunk]);
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { input, axis, start } => {
                if needs(*input) {
                    let src_shape = val(*input).shape();
                    let outer: usize = src_shape[..*axis].iter().product();
                    let inner: usize = src_shape[*axis + 1..].iter().product();
                    let len_out = out.shape()[*axis];
                    accumulate(&mut grads[input.0], len(*input), |d| {
                        for o in 0..outer {
                            let base = (o * src_shape[*axis] + start) * inner;
                            add_into(&mut d[base..base + len_out * inner], &g[o * len_out * inner..(o + 1) * len_out * inner]);
                        }
                    });
                }
            }
            Op::Gather { input, indices } => {
                if needs(*input) {
                    accumulate(&mut grads[input.0], len(*input), |d| {
                        for (gi, &i) in g.iter().zip(indices) {
                            d[i] = d[i] + *gi;
                        }
                    });
                }
            }
            Op::GlobalAvgPool(a) => {
                if needs(*a) {
                    let s: usize = val(*a).shape()[2..].iter().product();
                    let inv = T::lit(1.0 / s as f64);
                    accumulate(&mut grads[a.0], len(*a), |d| {
                        for (i, dv) in d.iter_mut().enumerate() {
                            *dv = *dv + g[i / s] * inv;
                        }
                    });
                }
            }
            Op::Upsample { input, factor } => {
                if needs(*input) {
                    let s = val(*input).shape();
                    let (dd, h, w) = (s[2], s[3], s[4]);
                    let f = *factor;
                    let (od, oh, ow) = (dd * f, h * f, w * f);
                    accumulate(&mut grads[input.0], len(*input), |d| {
                        let mut i = 0;
                        for pl in 0..s[0] * s[1] {
                            for z in 0..od {
                                for y in 0..oh {
                                    for x in 0..ow {
                                        let t = ((pl * dd + z / f) * h + y / f) * w + x / f;
                                        d[t] = d[t] + g[i];
                                        i += 1;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::L2Normalize { input, norms } => {
                if needs(*input) {
                    let y = out.data();
                    let n = *out.shape().last().unwrap_or(&1);
                    accumulate(&mut grads[input.0], y.len(), |d| {
                        for (r, norm) in norms.iter().enumerate() {
                            let row = r * n..(r + 1) * n;
                            let dot: T = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| *a * *b).sum();
                            for i in row {
                                d[i] = d[i] + (g[i] - y[i] * dot) / *norm;
                            }
                        }
                    });
                }
            }
            Op::LogSumExp(a) => {
                if needs(*a) {
                    let x = val(*a).data();
                    let n = *val(*a).shape().last().unwrap_or(&1);
                    let lse = out.data();
                    accumulate(&mut grads[a.0], x.len(), |d| {
                        for (i, dv) in d.iter_mut().enumerate() {
                            let r = i / n;
                            *dv = *dv + g[r] * (x[i] - lse[r]).exp();
                        }
                    });
                }
            }
            Op::BceWithLogits { logits, targets, pos_weight } => {
                if needs(*logits) {
                    let z = val(*logits).data();
                    let s = g[0] / T::lit(z.len() as f64);
                    let w = *pos_weight;
                    accumulate(&mut grads[logits.0], z.len(), |d| {
                        for i in 0..d.len() {
                            let (p, y) = (sigmoid(z[i]), targets[i]);
                            d[i] = d[i] + s * ((T::one() - y) * p - w * y * (T::one() - p));
                        }
                    });
                }
            }
            Op::Conv3d { input, kernel, bias, geom, cols } => {
                if needs(*kernel) {
                    accumulate(&mut grads[kernel.0], len(*kernel), |d| geom.backward_kernel(cols, g, d));
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        accumulate(&mut grads[b.0], len(*b), |d| geom.backward_bias(g, d));
                    }
                }
                if needs(*input) {
                    let gcols = geom.backward_cols(val(*kernel).data(), g);
                    accumulate(&mut grads[input.0], len(*input), |d| geom.col2im_accumulate(&gcols, d));
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let shape = val(*input).shape();
                let (b, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        for i in base..base + s {
                            sum_g[ci] = sum_g[ci] + g[i];
                            sum_gx[ci] = sum_gx[ci] + g[i] * xhat[i];
                        }
                    }
                }
                if needs(*gamma) {
                    accumulate(&mut grads[gamma.0], c, |d| add_into(d, &sum_gx));
                }
                if needs(*beta) {
                    accumulate(&mut grads[beta.0], c, |d| add_into(d, &sum_g));
                }
                if needs(*input) {
                    let gm = val(*gamma).data();
                    let count = T::lit((b * s) as f64);
                    accumulate(&mut grads[input.0], xhat.len(), |d| {
                        for (chunk, ((ds, gs), hs)) in d.chunks_mut(s).zip(g.chunks(s)).zip(xhat.chunks(s)).enumerate() {
                            let ci = chunk % c;
                            let scale = gm[ci] * inv_std[ci];
                            let (mg, mgx) = (sum_g[ci] / count, sum_gx[ci] / count);
                            for ((dv, &gv), &hv) in ds.iter_mut().zip(gs).zip(hs) {
                                let delta = if *train { scale * (gv - mg - hv * mgx) } else { scale * gv };
                                *dv = *dv + delta;
                            }
                        }
                    });
                }
            }
            Op::Custom { inputs, backward, .. } => {
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad matches output shape");
                let in_vals: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                let local = backward(&gt, &in_vals, out);
                for (v, lg) in inputs.iter().zip(local) {
                    if let (true, Some(lg)) = (needs(*v), lg) {
                        accumulate(&mut grads[v.0], len(*v), |d| add_into(d, lg.data()));
                    }
                }
            }
        }
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

pub(crate) fn log_sum_exp_slice<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = row.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}
