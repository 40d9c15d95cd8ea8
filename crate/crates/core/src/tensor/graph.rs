use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{ParamStore, Real, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub tau: f64,
    pub v_th: f64,
    /// Half-width of the rectangular surrogate window.
    pub width: f64,
    pub steps: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Abs(Var),
    Clamp01(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Down2(Var),
    Up2(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    ConcatBatch(Vec<Var>),
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
        train: bool,
    },
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
    },
    Lif {
        input: Var,
        membrane: Vec<T>,
        params: LifParams,
    },
    GroupMean(Var, usize),
    Mix {
        weights: Var,
        step: usize,
        branches: Vec<Var>,
    },
    Contrast {
        input: Var,
        factor: f64,
        gamma: f64,
    },
    Separable {
        input: Var,
        rows: Arc<Vec<T>>,
        cols: Arc<Vec<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
    grad: Option<Vec<T>>,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backpropagated: bool,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn invalid<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::InvalidArgument { op, msg: msg.into() })
}

fn nchw(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => invalid(op, format!("expected an NCHW tensor, got shape {s:?}")),
    }
}

/// The forward rule of the LIF recurrence, shared by the graph op and
/// [`crate::net::lif`]: `u' = tau * u * (1 - s_prev) + input`, spike where
/// `u' >= v_th`. Returns the pre-reset membrane per step and the spikes.
pub fn lif_forward<T: Real>(input: &[T], params: &LifParams) -> (Vec<T>, Vec<T>) {
    let n = input.len();
    let tau = T::of(params.tau);
    let v_th = T::of(params.v_th);
    let mut membrane = vec![T::zero(); params.steps * n];
    let mut spikes = vec![T::zero(); params.steps * n];
    let mut u = vec![T::zero(); n];
    let mut s_prev = vec![T::zero(); n];
    for t in 0..params.steps {
        for i in 0..n {
            let v = tau * u[i] * (T::one() - s_prev[i]) + input[i];
            let s = if v >= v_th { T::one() } else { T::zero() };
            membrane[t * n + i] = v;
            spikes[t * n + i] = s;
            u[i] = v;
            s_prev[i] = s;
        }
    }
    (membrane, spikes)
}

/// Rectangular surrogate for d spike / d membrane.
#[inline]
pub fn lif_surrogate<T: Real>(u: T, params: &LifParams) -> T {
    if (u - T::of(params.v_th)).abs() <= T::of(params.width) {
        T::of(1.0 / (2.0 * params.width))
    } else {
        T::zero()
    }
}

/// Pointwise gamma followed by contraction toward the per-plane mean, before
/// clamping. Shared by the graph op and the image-level degradation.
pub fn contrast_plane<T: Real>(x: &[T], factor: f64, gamma: f64) -> Vec<T> {
    let g = T::of(gamma);
    let powed: Vec<T> = if gamma == 1.0 {
        x.to_vec()
    } else {
        x.iter().map(|v| v.max(T::zero()).powf(g)).collect()
    };
    if factor == 1.0 {
        return powed;
    }
    let f = T::of(factor);
    let m = kernels::sum(&powed) / T::of(powed.len() as f64);
    powed.iter().map(|v| m + f * (*v - m)).collect()
}

#[inline]
pub fn clamp01<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backpropagated: false,
        }
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
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn make(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let t = Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        };
        self.push(t, op, inputs)
    }

    /// Adds a leaf; it is differentiated when `t.requires_grad` is set.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Binds a named parameter as a leaf. With `trainable == false` the value
    /// enters as a constant and receives no gradient.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str, trainable: bool) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let mut t = t.clone();
        t.requires_grad = t.requires_grad && trainable;
        let v = self.leaf(t);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Batch mean and biased variance recorded by a training-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, train: true, .. } => Some((mean, var)),
            _ => None,
        }
    }

    // ── elementwise ────────────────────────────────────────────────────

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        same_shape(op, self.shape(a), self.shape(b))?;
        Ok(self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.make(self.shape(a).to_vec(), d, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.make(self.shape(a).to_vec(), d, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.make(self.shape(a).to_vec(), d, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).iter().any(|v| *v == T::zero()) {
            return invalid("div", "division by zero");
        }
        let d = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.make(self.shape(a).to_vec(), d, Op::Div(a, b), &[a, b]))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let d = self.data(a).iter().map(|x| f(*x)).collect();
        self.make(self.shape(a).to_vec(), d, op, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    /// Hard clamp to `[0, 1]`; the gradient passes inside the interval and is
    /// zero outside it.
    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, Op::Clamp01(a), clamp01)
    }

    // ── spatial ────────────────────────────────────────────────────────

    /// Cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = nchw("conv2d", self.shape(input))?;
        let (o, i, kh, kw) = nchw("conv2d", self.shape(kernel))?;
        if i != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(input).to_vec(),
                rhs: self.shape(kernel).to_vec(),
            });
        }
        if stride == 0 {
            return invalid("conv2d", "stride must be positive");
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            );
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![o],
                });
            }
        }
        let geom = ConvGeom {
            n,
            c_in: c,
            h,
            w,
            c_out: o,
            kh,
            kw,
            stride,
            pad: padding,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.data(input),
            self.data(kernel),
            bias.map(|b| self.data(b)),
        );
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.make(
            vec![n, o, geom.out_h(), geom.out_w()],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// 2x2 average pooling.
    pub fn down2(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("down2", self.shape(a))?;
        if h % 2 != 0 || w % 2 != 0 {
            return invalid("down2", format!("spatial extent {h}x{w} is not even"));
        }
        let d = kernels::down2(self.data(a), n * c, h, w);
        Ok(self.make(vec![n, c, h / 2, w / 2], d, Op::Down2(a), &[a]))
    }

    /// 2x bilinear upsampling.
    pub fn up2(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("up2", self.shape(a))?;
        let d = kernels::up2(self.data(a), n * c, h, w);
        Ok(self.make(vec![n, c, 2 * h, 2 * w], d, Op::Up2(a), &[a]))
    }

    /// Applies `A x B^T` to every plane, `A` and `B` square row-major.
    pub fn separable(&mut self, a: Var, rows: Arc<Vec<T>>, cols: Arc<Vec<T>>) -> Result<Var> {
        let (n, c, h, w) = nchw("separable", self.shape(a))?;
        if rows.len() != h * h || cols.len() != w * w {
            return invalid("separable", format!("operator sizes do not match a {h}x{w} plane"));
        }
        let d = kernels::separable(self.data(a), n * c, h, w, &rows, &cols);
        Ok(self.make(
            vec![n, c, h, w],
            d,
            Op::Separable { input: a, rows, cols },
            &[a],
        ))
    }

    // ── dense ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb }),
        };
        let d = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.make(vec![m, n], d, Op::MatMul(a, b), &[a, b]))
    }

    /// `[rows, cols] + [cols]`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let cols = match sa.as_slice() {
            [_, c] if self.shape(bias) == [*c] => *c,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row_bias",
                    lhs: sa,
                    rhs: self.shape(bias).to_vec(),
                })
            }
        };
        let b = self.data(bias);
        let d = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, v)| *v + b[i % cols])
            .collect();
        Ok(self.make(sa, d, Op::AddRowBias(a, bias), &[a, bias]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = kernels::sum(self.data(a));
        self.make(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.data(a).len() as f64);
        let s = kernels::sum(self.data(a)) / n;
        self.make(vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Softmax along the last axis of a 2-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let cols = match s.as_slice() {
            [_, c] if *c > 0 => *c,
            [_, _] => return invalid("softmax", "empty axis"),
            _ => return invalid("softmax", format!("expected 2-D input, got {s:?}")),
        };
        let mut out = Vec::with_capacity(self.data(a).len());
        for row in self.data(a).chunks(cols) {
            let mx = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
            let e: Vec<T> = row.iter().map(|v| (*v - mx).exp()).collect();
            let z: T = e.iter().copied().sum();
            out.extend(e.into_iter().map(|v| v / z));
        }
        Ok(self.make(s, out, Op::Softmax(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let d = self.data(a).to_vec();
        Ok(self.make(shape.to_vec(), d, Op::Reshape(a), &[a]))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat_channels", "no inputs");
        }
        let (n, _, h, w) = nchw("concat_channels", self.shape(parts[0]))?;
        let mut total = 0;
        for p in parts {
            let (pn, pc, ph, pw) = nchw("concat_channels", self.shape(*p))?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(*p).to_vec(),
                });
            }
            total += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for p in parts {
                let c = self.shape(*p)[1];
                out.extend_from_slice(&self.data(*p)[b * c * plane..(b + 1) * c * plane]);
            }
        }
        Ok(self.make(vec![n, total, h, w], out, Op::Concat(parts.to_vec()), parts))
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat_batch", "no inputs");
        }
        let first = self.shape(parts[0]).to_vec();
        let mut n = 0;
        let mut out = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s[1..] != first[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_batch",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            n += s[0];
            out.extend_from_slice(self.data(*p));
        }
        let mut shape = first;
        shape[0] = n;
        Ok(self.make(shape, out, Op::ConcatBatch(parts.to_vec()), parts))
    }

    /// NCHW -> `[N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("global_avg_pool", self.shape(a))?;
        let plane = h * w;
        let inv = T::of(1.0 / plane as f64);
        let d = self
            .data(a)
            .chunks(plane)
            .map(|p| kernels::sum(p) * inv)
            .collect();
        Ok(self.make(vec![n, c], d, Op::GlobalAvgPool(a), &[a]))
    }

    /// Per-channel normalisation over batch and spatial axes. In training
    /// mode batch statistics are used (and recorded); otherwise the supplied
    /// running mean and variance.
    pub fn batch_norm(&mut self, a: Var, running: Option<(&[T], &[T])>, eps: f64) -> Result<Var> {
        let (n, c, h, w) = nchw("batch_norm", self.shape(a))?;
        let plane = h * w;
        let count = n * plane;
        let x = self.data(a);
        let train = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return invalid("batch_norm", "running statistics do not match channels");
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv = T::of(1.0 / count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s = s + kernels::sum(&x[(b * c + ch) * plane..][..plane]);
                    }
                    let m = s * inv;
                    let mut q = T::zero();
                    for b in 0..n {
                        for v in &x[(b * c + ch) * plane..][..plane] {
                            let d = *v - m;
                            q = q + d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q * inv;
                }
                (mean, var)
            }
        };
        let eps = T::of(eps);
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    out[i] = (x[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
        Ok(self.make(
            vec![n, c, h, w],
            out,
            Op::BatchNorm {
                input: a,
                inv_std,
                mean,
                var,
                train,
            },
            &[a],
        ))
    }

    /// `gamma[c] * x + beta[c]` on NCHW.
    pub fn channel_affine(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("channel_affine", self.shape(a))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_affine",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let plane = h * w;
        let (g, bt) = (self.data(gamma), self.data(beta));
        let d = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / plane) % c;
                *v * g[ch] + bt[ch]
            })
            .collect();
        Ok(self.make(vec![n, c, h, w], d, Op::ChannelAffine { input: a, gamma, beta }, &[a, gamma, beta]))
    }

    // ── spiking ────────────────────────────────────────────────────────

    /// Runs a LIF population for `params.steps` steps with the same input
    /// current every step (rate coding). The spike trains are stacked along
    /// the batch axis, step-major: `[steps * N, ...]`. The backward pass uses
    /// the rectangular surrogate and treats the reset gate as a constant.
    pub fn lif(&mut self, a: Var, params: LifParams) -> Result<Var> {
        if params.steps == 0 {
            return invalid("lif", "need at least one time step");
        }
        if params.v_th <= 0.0 {
            return invalid("lif", "firing threshold must be positive");
        }
        if params.width <= 0.0 {
            return invalid("lif", "surrogate width must be positive");
        }
        let (membrane, spikes) = lif_forward(self.data(a), &params);
        let mut shape = self.shape(a).to_vec();
        shape[0] *= params.steps;
        Ok(self.make(
            shape,
            spikes,
            Op::Lif {
                input: a,
                membrane,
                params,
            },
            &[a],
        ))
    }

    /// Mean over `groups` equal blocks along the batch axis:
    /// `[groups * N, ...] -> [N, ...]`.
    pub fn group_mean(&mut self, a: Var, groups: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if groups == 0 || s[0] % groups != 0 {
            return invalid("group_mean", format!("batch {} not divisible into {groups} groups", s[0]));
        }
        let block = self.data(a).len() / groups;
        let inv = T::of(1.0 / groups as f64);
        let x = self.data(a);
        let mut out = vec![T::zero(); block];
        for g in 0..groups {
            for (o, v) in out.iter_mut().zip(&x[g * block..(g + 1) * block]) {
                *o = *o + *v;
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let mut shape = s;
        shape[0] /= groups;
        Ok(self.make(shape, out, Op::GroupMean(a, groups), &[a]))
    }

    // ── degradation ────────────────────────────────────────────────────

    /// Per-sample convex combination `out[n] = sum_k w[n, step, k] * branch_k[n]`
    /// for weights shaped `[N, steps, K]`.
    pub fn mix(&mut self, weights: Var, step: usize, branches: &[Var]) -> Result<Var> {
        let ws = self.shape(weights).to_vec();
        let (n, steps, k) = match ws.as_slice() {
            [n, s, k] => (*n, *s, *k),
            _ => return invalid("mix", format!("weights must be [N, steps, K], got {ws:?}")),
        };
        if step >= steps {
            return invalid("mix", format!("step {step} out of range for {steps} steps"));
        }
        if branches.len() != k {
            return invalid("mix", format!("{} branches for {k} weights", branches.len()));
        }
        let shape = self.shape(branches[0]).to_vec();
        if shape[0] != n {
            return Err(TensorError::ShapeMismatch { op: "mix", lhs: ws, rhs: shape });
        }
        for b in branches {
            same_shape("mix", &shape, self.shape(*b))?;
        }
        let per = self.data(branches[0]).len() / n;
        let w = self.data(weights);
        let mut out = vec![T::zero(); n * per];
        for (j, b) in branches.iter().enumerate() {
            let x = self.data(*b);
            for s in 0..n {
                let a = w[(s * steps + step) * k + j];
                for i in s * per..(s + 1) * per {
                    out[i] = out[i] + a * x[i];
                }
            }
        }
        let mut inputs = vec![weights];
        inputs.extend_from_slice(branches);
        Ok(self.make(
            shape,
            out,
            Op::Mix {
                weights,
                step,
                branches: branches.to_vec(),
            },
            &inputs,
        ))
    }

    /// Per-sample `m + factor * (x^gamma - m)` with `m` the sample mean of
    /// `x^gamma`. Unclamped.
    pub fn contrast(&mut self, a: Var, factor: f64, gamma: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let per = self.data(a).len() / s[0];
        let d = self
            .data(a)
            .chunks(per)
            .flat_map(|p| contrast_plane(p, factor, gamma))
            .collect();
        Ok(self.make(s, d, Op::Contrast { input: a, factor, gamma }, &[a]))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Leaf gradients become
    /// available through [`Graph::grad`]; intermediate gradients are dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].grad = Some(g);
                continue;
            }
            for (input, contrib) in self.local_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a = *a + c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        // Leaves that require grad but were not reached get zeros.
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    /// Copies (accumulates) parameter gradients into `store`.
    pub fn write_grads(&self, store: &mut ParamStore<T>) {
        for node in &self.nodes {
            let (Some(name), Some(g)) = (&node.param, &node.grad) else { continue };
            if let Some(t) = store.get_mut(name) {
                match &mut t.grad {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a = *a + *v;
                        }
                    }
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let out = &node.value.data;
        let mut res = Vec::new();
        let mut emit = |v: Var, f: &dyn Fn() -> Vec<T>| {
            if self.wants(v) {
                res.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.iter().map(|v| -*v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                emit(*a, &|| g.iter().zip(db).map(|(g, y)| *g * *y).collect());
                emit(*b, &|| g.iter().zip(da).map(|(g, x)| *g * *x).collect());
            }
            Op::Div(a, b) => {
                let db = self.data(*b);
                emit(*a, &|| g.iter().zip(db).map(|(g, y)| *g / *y).collect());
                emit(*b, &|| {
                    g.iter()
                        .zip(out)
                        .zip(db)
                        .map(|((g, q), y)| -*g * *q / *y)
                        .collect()
                });
            }
            Op::AddScalar(a) => emit(*a, &|| g.to_vec()),
            Op::Scale(a, c) => emit(*a, &|| g.iter().map(|v| *v * *c).collect()),
            Op::Sigmoid(a) => emit(*a, &|| {
                g.iter()
                    .zip(out)
                    .map(|(g, s)| *g * *s * (T::one() - *s))
                    .collect()
            }),
            Op::Relu(a) => {
                let x = self.data(*a);
                emit(*a, &|| {
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                        .collect()
                })
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.data(*a);
                emit(*a, &|| {
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| if *x > T::zero() { *g } else { *g * *slope })
                        .collect()
                })
            }
            Op::Abs(a) => {
                let x = self.data(*a);
                // subgradient 0 at the kink keeps exact optima stationary
                emit(*a, &|| {
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| if *x == T::zero() { T::zero() } else { *g * x.signum() })
                        .collect()
                })
            }
            Op::Clamp01(a) => {
                let x = self.data(*a);
                emit(*a, &|| {
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| {
                            if *x >= T::zero() && *x <= T::one() {
                                *g
                            } else {
                                T::zero()
                            }
                        })
                        .collect()
                })
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (xi, k) = (self.data(*input), self.data(*kernel));
                emit(*input, &|| kernels::conv2d_backward_input(geom, g, k));
                emit(*kernel, &|| kernels::conv2d_backward_kernel(geom, g, xi));
                if let Some(b) = bias {
                    emit(*b, &|| {
                        kernels::channel_sums(g, geom.n, geom.c_out, geom.out_h() * geom.out_w())
                    });
                }
            }
            Op::Down2(a) => {
                let s = self.shape(*a);
                emit(*a, &|| kernels::down2_backward(g, s[0] * s[1], s[2], s[3]));
            }
            Op::Up2(a) => {
                let s = self.shape(*a);
                emit(*a, &|| kernels::up2_backward(g, s[0] * s[1], s[2], s[3]));
            }
            Op::Separable { input, rows, cols } => {
                let s = self.shape(*input);
                let (h, w) = (s[2], s[3]);
                emit(*input, &|| {
                    let rt = kernels::transpose(rows, h, h);
                    let ct = kernels::transpose(cols, w, w);
                    kernels::separable(g, s[0] * s[1], h, w, &rt, &ct)
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                emit(*a, &|| kernels::matmul(g, &kernels::transpose(db, k, n), m, n, k));
                emit(*b, &|| kernels::matmul(&kernels::transpose(da, m, k), g, k, m, n));
            }
            Op::AddRowBias(a, b) => {
                let cols = self.shape(*b)[0];
                emit(*a, &|| g.to_vec());
                emit(*b, &|| {
                    let mut acc = vec![T::zero(); cols];
                    for row in g.chunks(cols) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a = *a + *v;
                        }
                    }
                    acc
                });
            }
            Op::Sum(a) => emit(*a, &|| vec![g[0]; self.data(*a).len()]),
            Op::Mean(a) => {
                let n = self.data(*a).len();
                emit(*a, &|| vec![g[0] / T::of(n as f64); n]);
            }
            Op::Softmax(a) => {
                let cols = self.shape(*a)[1];
                emit(*a, &|| {
                    let mut d = Vec::with_capacity(out.len());
                    for (y, gy) in out.chunks(cols).zip(g.chunks(cols)) {
                        let s: T = y.iter().zip(gy).map(|(y, g)| *y * *g).sum();
                        d.extend(y.iter().zip(gy).map(|(y, g)| *y * (*g - s)));
                    }
                    d
                });
            }
            Op::Reshape(a) => emit(*a, &|| g.to_vec()),
            Op::Concat(parts) => {
                let s = &node.value.shape;
                let plane = s[2] * s[3];
                let total = s[1];
                let mut c0 = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    let start = c0;
                    emit(*p, &|| {
                        let mut d = Vec::with_capacity(s[0] * c * plane);
                        for b in 0..s[0] {
                            d.extend_from_slice(&g[(b * total + start) * plane..(b * total + start + c) * plane]);
                        }
                        d
                    });
                    c0 += c;
                }
            }
            Op::ConcatBatch(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.data(*p).len();
                    let start = off;
                    emit(*p, &|| g[start..start + len].to_vec());
                    off += len;
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let plane = s[2] * s[3];
                let inv = T::of(1.0 / plane as f64);
                emit(*a, &|| g.iter().flat_map(|v| std::iter::repeat(*v * inv).take(plane)).collect());
            }
            Op::BatchNorm {
                input,
                inv_std,
                train,
                ..
            } => {
                let s = self.shape(*input);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                emit(*input, &|| {
                    let mut d = vec![T::zero(); g.len()];
                    if !*train {
                        for (i, v) in d.iter_mut().enumerate() {
                            *v = g[i] * inv_std[(i / plane) % c];
                        }
                        return d;
                    }
                    let m = T::of((n * plane) as f64);
                    for ch in 0..c {
                        let (mut sg, mut sgx) = (T::zero(), T::zero());
                        for b in 0..n {
                            let off = (b * c + ch) * plane;
                            for i in off..off + plane {
                                sg = sg + g[i];
                                sgx = sgx + g[i] * out[i];
                            }
                        }
                        let k = inv_std[ch] / m;
                        for b in 0..n {
                            let off = (b * c + ch) * plane;
                            for i in off..off + plane {
                                d[i] = k * (m * g[i] - sg - out[i] * sgx);
                            }
                        }
                    }
                    d
                });
            }
            Op::ChannelAffine { input, gamma, beta } => {
                let s = self.shape(*input);
                let (c, plane) = (s[1], s[2] * s[3]);
                let (x, gm) = (self.data(*input), self.data(*gamma));
                emit(*input, &|| g.iter().enumerate().map(|(i, v)| *v * gm[(i / plane) % c]).collect());
                emit(*gamma, &|| {
                    let mut acc = vec![T::zero(); c];
                    for (i, v) in g.iter().enumerate() {
                        acc[(i / plane) % c] = acc[(i / plane) % c] + *v * x[i];
                    }
                    acc
                });
                emit(*beta, &|| kernels::channel_sums(g, s[0], c, plane));
            }
            Op::Lif {
                input,
                membrane,
                params,
            } => {
                let n = self.data(*input).len();
                let tau = T::of(params.tau);
                emit(*input, &|| {
                    let mut d = vec![T::zero(); n];
                    let mut carry = vec![T::zero(); n];
                    for t in (0..params.steps).rev() {
                        for i in 0..n {
                            let u = membrane[t * n + i];
                            let s = out[t * n + i];
                            // membrane at t feeds t+1 through tau * (1 - s_t)
                            let du = g[t * n + i] * lif_surrogate(u, params) + carry[i] * tau * (T::one() - s);
                            d[i] = d[i] + du;
                            carry[i] = du;
                        }
                    }
                    d
                });
            }
            Op::GroupMean(a, groups) => {
                let inv = T::of(1.0 / *groups as f64);
                emit(*a, &|| {
                    let mut d = Vec::with_capacity(g.len() * groups);
                    for _ in 0..*groups {
                        d.extend(g.iter().map(|v| *v * inv));
                    }
                    d
                });
            }
            Op::Mix {
                weights,
                step,
                branches,
            } => {
                let ws = self.shape(*weights);
                let (n, steps, k) = (ws[0], ws[1], ws[2]);
                let per = g.len() / n;
                let w = self.data(*weights);
                emit(*weights, &|| {
                    let mut d = vec![T::zero(); n * steps * k];
                    for (j, b) in branches.iter().enumerate() {
                        let x = self.data(*b);
                        for s in 0..n {
                            let r = s * per..(s + 1) * per;
                            d[(s * steps + step) * k + j] = kernels::dot(&g[r.clone()], &x[r]);
                        }
                    }
                    d
                });
                for (j, b) in branches.iter().enumerate() {
                    emit(*b, &|| {
                        let mut d = vec![T::zero(); g.len()];
                        for s in 0..n {
                            let a = w[(s * steps + step) * k + j];
                            for i in s * per..(s + 1) * per {
                                d[i] = g[i] * a;
                            }
                        }
                        d
                    });
                }
            }
            Op::Contrast { input, factor, gamma } => {
                let x = self.data(*input);
                let per = x.len() / self.shape(*input)[0];
                let (f, gm) = (T::of(*factor), T::of(*gamma));
                emit(*input, &|| {
                    let mut d = Vec::with_capacity(x.len());
                    for (xs, gs) in x.chunks(per).zip(g.chunks(per)) {
                        let shared = if *factor == 1.0 {
                            T::zero()
                        } else {
                            (T::one() - f) * kernels::sum(gs) / T::of(per as f64)
                        };
                        for (xv, gv) in xs.iter().zip(gs) {
                            let dtilde = if *factor == 1.0 { *gv } else { f * *gv + shared };
                            let dpow = if *gamma == 1.0 {
                                T::one()
                            } else {
                                gm * xv.max(T::zero()).powf(gm - T::one())
                            };
                            d.push(dtilde * dpow);
                        }
                    }
                    d
                });
            }
        }
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_sigmoid_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.data(c), &[4.0, 6.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.data(s), &[0.5]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5]).trainable());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn mse_at_stationary_point_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.2, 0.4, 0.6]).trainable());
        let y = g.constant(t(&[3], &[0.2, 0.4, 0.6]));
        let d = g.sub(x, y).unwrap();
        let sq = g.mul(d, d).unwrap();
        let l = g.mean(sq);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mul_gradient_matches_other_factor() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1], &[2.0]).trainable());
        let b = g.constant(t(&[1], &[3.0]));
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_twice_fails() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1], &[2.0]).trainable());
        let l = g.sum(a);
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(TensorError::AlreadyBackpropagated));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[2.0, 1.0]).trainable());
        assert!(matches!(g.backward(a), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
        let k = g.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.data(y), &[9.0]);

        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect();
        let x = g.constant(t(&[1, 1, 3, 4], &data));
        let mut id = vec![0.0; 9];
        id[4] = 1.0;
        let k = g.constant(t(&[1, 1, 3, 3], &id));
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(g.data(y), data.as_slice());
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversized_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[1, 2, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, k, None, 1, 0), Err(TensorError::ShapeMismatch { .. })));
        let k = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(g.conv2d(x, k, None, 1, 0).is_err());
    }

    #[test]
    fn resample_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0; 4]));
        let d = g.down2(x).unwrap();
        assert_eq!(g.data(d), &[1.0]);

        let c = g.constant(Tensor::full(&[1, 2, 4, 6], 0.37));
        let d = g.down2(c).unwrap();
        let u = g.up2(d).unwrap();
        assert_eq!(g.shape(u), &[1, 2, 4, 6]);
        assert!(g.data(u).iter().all(|v| (*v - 0.37).abs() < 1e-15));

        let odd = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(g.down2(odd).is_err());
    }

    #[test]
    fn softmax_and_mean_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        for v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[2.0, 4.0]));
        let m = g.mean(x);
        assert_eq!(g.data(m), &[3.0]);
    }

    #[test]
    fn batch_norm_training_normalises_channels() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37) % 11) as f64 * 0.3 + (i / 16) as f64).collect();
        let x = g.constant(t(&[2, 3, 4, 4], &data));
        let y = g.batch_norm(x, None, 1e-5).unwrap();
        let out = g.data(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| out[(b * 3 + c) * 16..(b * 3 + c + 1) * 16].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-4);
        }
        assert!(g.batch_stats(y).is_some());
    }

    #[test]
    fn lif_threshold_equality_fires_each_step() {
        let p = LifParams { tau: 0.3, v_th: 1.0, width: 0.5, steps: 5 };
        let (_, s) = lif_forward(&[1.0f64], &p);
        assert_eq!(s, vec![1.0; 5]);
    }
}
