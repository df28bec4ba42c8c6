use super::{axis_split, Padding, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomAdjoint = Box<dyn Fn(&Tensor, &Tensor) -> Vec<f64>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    ScaleChannels(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        dims: ConvDims,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        dims: ConvDims,
    },
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    Tanh(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    GlobalAvgPool {
        x: Var,
        n: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    SelectRows {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        n: usize,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        n: usize,
    },
    Custom {
        x: Var,
        adjoint: CustomAdjoint,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    n_in: usize,
    n_out: usize,
    k: usize,
    stride: usize,
    pad_left: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// A tape is single-use: one forward pass, one [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Raw gradient, `None` when the node did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; nodes that did not reach the loss report zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let t = tensor.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise product with a constant of the same shape (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let t = self.value(x);
        check_same("mul_const", t, c)?;
        let data = t.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c.data().to_vec()), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + s).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// Adds a rank-1 bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (t, b) = (self.value(x), self.value(bias));
        let last = *t.shape().last().unwrap_or(&1);
        if b.rank() != 1 || b.numel() != last {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match last axis of {:?}", b.shape(), t.shape()),
            ));
        }
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % last])
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// `x[b, c, t] * s[b, c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (t, sv) = (self.value(x), self.value(s));
        if t.rank() != 3 || sv.shape() != &t.shape()[..2] {
            return Err(Error::shape(
                "scale_channels",
                format!("{:?} cannot scale {:?}", sv.shape(), t.shape()),
            ));
        }
        let n = t.shape()[2];
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv.data()[i / n])
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleChannels(x, s), rg))
    }

    /// Matrix product of rank-2 operands, or a batched product of rank-3 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (batch, m, k, k2, p) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, p]) => (1, *m, *k, *k2, *p),
            ([b1, m, k], [b2, k2, p]) if b1 == b2 => (*b1, *m, *k, *k2, *p),
            (sa, sb) => {
                return Err(Error::shape(
                    "matmul",
                    format!("unsupported operand shapes {sa:?} x {sb:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; batch * m * p];
        let (ad, bd) = (ta.data(), tb.data());
        for bi in 0..batch {
            let ao = bi * m * k;
            let bo = bi * k * p;
            let oo = bi * m * p;
            for i in 0..m {
                for kk in 0..k {
                    let av = ad[ao + i * k + kk];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[bo + kk * p..bo + (kk + 1) * p];
                    let orow = &mut out[oo + i * p..oo + (i + 1) * p];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let shape = if ta.rank() == 2 {
            vec![m, p]
        } else {
            vec![batch, m, p]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
            },
            rg,
        ))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (batch, rows, cols) = match t.shape() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            s => return Err(Error::shape("transpose", format!("rank of {s:?}"))),
        };
        let mut out = vec![0.0; t.numel()];
        for b in 0..batch {
            let o = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[o + j * rows + i] = t.data()[o + i * cols + j];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
            rg,
        ))
    }

    fn conv_input_dims(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize, bool)> {
        match self.value(x).shape() {
            [c, n] => Ok((1, *c, *n, true)),
            [b, c, n] => Ok((*b, *c, *n, false)),
            s => Err(Error::shape(op, format!("input must be [C, N] or [B, C, N], got {s:?}"))),
        }
    }

    /// Cross-correlation of `x` (`[C_in, N]` or `[B, C_in, N]`) with kernels `[C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (batch, c_in, n_in, unbatched) = self.conv_input_dims(x, "conv1d")?;
        let ws = self.value(w).shape().to_vec();
        let [c_out, wc_in, k] = ws[..] else {
            return Err(Error::shape("conv1d", format!("kernels must be [C_out, C_in, K], got {ws:?}")));
        };
        if wc_in != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("kernels expect {wc_in} input channels but input has {c_in}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv1d stride must be positive".into()));
        }
        let (pad_left, _) = padding.amounts(n_in, k, stride);
        let n_out = padding.output_len(n_in, k, stride).ok_or_else(|| {
            Error::shape("conv1d", format!("kernel {k} longer than padded input {n_in}"))
        })?;
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            n_in,
            n_out,
            k,
            stride,
            pad_left,
        };
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; batch * c_out * n_out];
        for b in 0..batch {
            for o in 0..c_out {
                let orow = &mut out[(b * c_out + o) * n_out..(b * c_out + o + 1) * n_out];
                for i in 0..c_in {
                    let xrow = &xd[(b * c_in + i) * n_in..(b * c_in + i + 1) * n_in];
                    let wrow = &wd[(o * c_in + i) * k..(o * c_in + i + 1) * k];
                    conv_row(orow, xrow, wrow, stride, pad_left);
                }
            }
        }
        let shape = if unbatched {
            vec![c_out, n_out]
        } else {
            vec![batch, c_out, n_out]
        };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, w, dims }, rg))
    }

    /// Per-channel cross-correlation with kernels `[C, K]`; channels never mix.
    pub fn depthwise_conv1d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (batch, c, n_in, unbatched) = self.conv_input_dims(x, "depthwise_conv1d")?;
        let ws = self.value(w).shape().to_vec();
        let [wc, k] = ws[..] else {
            return Err(Error::shape("depthwise_conv1d", format!("kernels must be [C, K], got {ws:?}")));
        };
        if wc != c {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("{wc} kernels for {c} input channels"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("depthwise_conv1d stride must be positive".into()));
        }
        let (pad_left, _) = padding.amounts(n_in, k, stride);
        let n_out = padding.output_len(n_in, k, stride).ok_or_else(|| {
            Error::shape("depthwise_conv1d", format!("kernel {k} longer than padded input {n_in}"))
        })?;
        let dims = ConvDims {
            batch,
            c_in: c,
            c_out: c,
            n_in,
            n_out,
            k,
            stride,
            pad_left,
        };
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; batch * c * n_out];
        for b in 0..batch {
            for ch in 0..c {
                let row = b * c + ch;
                conv_row(
                    &mut out[row * n_out..(row + 1) * n_out],
                    &xd[row * n_in..(row + 1) * n_in],
                    &wd[ch * k..(ch + 1) * k],
                    stride,
                    pad_left,
                );
            }
        }
        let shape = if unbatched {
            vec![c, n_out]
        } else {
            vec![batch, c, n_out]
        };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::DepthwiseConv1d { x, w, dims }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Swish(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let xd = t.data();
        let mut out = vec![0.0; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xd[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xd[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s = self.sum(x);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Per-channel temporal mean: `[C, N] -> [C]` or `[B, C, N] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (shape, n) = match t.shape() {
            [c, n] => (vec![*c], *n),
            [b, c, n] => (vec![*b, *c], *n),
            s => return Err(Error::shape("global_avg_pool", format!("rank of {s:?}"))),
        };
        if n == 0 {
            return Err(Error::shape("global_avg_pool", "time axis is empty"));
        }
        let data = t
            .data()
            .chunks(n)
            .map(|c| c.iter().sum::<f64>() / n as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::GlobalAvgPool { x, n }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, full, inner) = axis_split(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * full + start) * inner;
            out.extend_from_slice(&t.data()[off..off + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Rows of `table` (`[V, D]`) at `indices`, giving `[indices.len(), D]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let [v, d] = t.shape()[..] else {
            return Err(Error::shape("gather", format!("table must be [V, D], got {:?}", t.shape())));
        };
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::IndexOutOfRange { index: i, size: v });
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Row `i` comes from `a` where `mask[i]`, otherwise from `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("select_rows", ta, tb)?;
        let rows = ta.shape().first().copied().unwrap_or(0);
        if rows != mask.len() {
            return Err(Error::shape(
                "select_rows",
                format!("mask of {} for {rows} rows", mask.len()),
            ));
        }
        let width = if rows == 0 { 0 } else { ta.numel() / rows };
        let mut out = Vec::with_capacity(ta.numel());
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { ta } else { tb };
            out.extend_from_slice(&src.data()[i * width..(i + 1) * width]);
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            Op::SelectRows {
                mask: mask.to_vec(),
                a,
                b,
            },
            rg,
        ))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let t = self.value(x);
        let (b, c, n) = match t.shape() {
            [b, c] => (*b, *c, 1),
            [b, c, n] => (*b, *c, *n),
            s => return Err(Error::shape("batch_norm", format!("input must be [B, C(, N)], got {s:?}"))),
        };
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("scale/shift {:?} for {c} channels", self.value(p).shape()),
                ));
            }
        }
        Ok((b, c, n))
    }

    /// Batch normalization with batch statistics over the batch and time axes.
    ///
    /// Returns the output together with the per-channel batch mean and
    /// (biased) variance so callers can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (b, c, n) = self.bn_dims(x, gamma, beta)?;
        if b < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch normalization in train mode needs a batch of at least 2, got {b}"
            )));
        }
        let xd = self.value(x).data();
        let m = (b * n) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let row = &xd[(bi * c + ch) * n..(bi * c + ch + 1) * n];
                mean[ch] += row.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for bi in 0..b {
            for ch in 0..c {
                let row = &xd[(bi * c + ch) * n..(bi * c + ch + 1) * n];
                var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, c, n);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                n,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, n) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std, c, n);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                n,
            },
            rg,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        c: usize,
        n: usize,
    ) -> (Tensor, Vec<f64>) {
        let t = self.value(x);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(t.numel());
        let mut out = Vec::with_capacity(t.numel());
        for (i, v) in t.data().iter().enumerate() {
            let ch = (i / n) % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g[ch] * h + bt[ch]);
        }
        (Tensor::new(t.shape().to_vec(), out).expect("same shape"), xhat)
    }

    /// Elementwise op with a caller-supplied forward and adjoint.
    ///
    /// `adjoint(input, upstream)` must return the gradient with respect to the
    /// input. Used to plug hand-written rules into the gradient checker.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(&Tensor) -> Tensor,
        adjoint: impl Fn(&Tensor, &Tensor) -> Vec<f64> + 'static,
    ) -> Result<Var> {
        let out = forward(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Custom {
                x,
                adjoint: Box::new(adjoint),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// The tape can be swept once; a second call fails with
    /// [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                });
            }
            Op::MulConst(x, c) => acc(*x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * c[j];
                }
            }),
            Op::Scale(x, s) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    let last = d.len();
                    for (j, gv) in g.iter().enumerate() {
                        d[j % last] += gv;
                    }
                });
            }
            Op::ScaleChannels(x, s) => {
                let (xv, sv) = (val(*x), val(*s));
                let n = g.len() / sv.len();
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * sv[j / n];
                    }
                });
                acc(*s, &mut |d| {
                    for j in 0..g.len() {
                        d[j / n] += g[j] * xv[j];
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
            } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k, p) = (*batch, *m, *k, *p);
                // dA = G B^T, dB = A^T G
                acc(*a, &mut |d| {
                    for bi in 0..batch {
                        for r in 0..m {
                            let grow = &g[bi * m * p + r * p..bi * m * p + (r + 1) * p];
                            for kk in 0..k {
                                let brow = &bv[bi * k * p + kk * p..bi * k * p + (kk + 1) * p];
                                d[bi * m * k + r * k + kk] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for bi in 0..batch {
                        for r in 0..m {
                            let grow = &g[bi * m * p + r * p..bi * m * p + (r + 1) * p];
                            for kk in 0..k {
                                let a_rk = av[bi * m * k + r * k + kk];
                                let drow = &mut d[bi * k * p + kk * p..bi * k * p + (kk + 1) * p];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += a_rk * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => acc(*x, &mut |d| {
                for b in 0..*batch {
                    let o = b * rows * cols;
                    for r in 0..*rows {
                        for c in 0..*cols {
                            d[o + r * cols + c] += g[o + c * rows + r];
                        }
                    }
                }
            }),
            Op::Conv1d { x, w, dims } => {
                let (xv, wv) = (val(*x), val(*w));
                let ConvDims {
                    batch,
                    c_in,
                    c_out,
                    n_in,
                    n_out,
                    k,
                    stride,
                    pad_left,
                } = *dims;
                acc(*x, &mut |d| {
                    for b in 0..batch {
                        for o in 0..c_out {
                            let grow = &g[(b * c_out + o) * n_out..(b * c_out + o + 1) * n_out];
                            for ci in 0..c_in {
                                let wrow = &wv[(o * c_in + ci) * k..(o * c_in + ci + 1) * k];
                                let drow = &mut d[(b * c_in + ci) * n_in..(b * c_in + ci + 1) * n_in];
                                conv_row_input_grad(drow, grow, wrow, stride, pad_left);
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for b in 0..batch {
                        for o in 0..c_out {
                            let grow = &g[(b * c_out + o) * n_out..(b * c_out + o + 1) * n_out];
                            for ci in 0..c_in {
                                let xrow = &xv[(b * c_in + ci) * n_in..(b * c_in + ci + 1) * n_in];
                                let drow = &mut d[(o * c_in + ci) * k..(o * c_in + ci + 1) * k];
                                conv_row_kernel_grad(drow, grow, xrow, stride, pad_left);
                            }
                        }
                    }
                });
            }
            Op::DepthwiseConv1d { x, w, dims } => {
                let (xv, wv) = (val(*x), val(*w));
                let ConvDims {
                    batch,
                    c_in: c,
                    n_in,
                    n_out,
                    k,
                    stride,
                    pad_left,
                    ..
                } = *dims;
                acc(*x, &mut |d| {
                    for b in 0..batch {
                        for ch in 0..c {
                            let row = b * c + ch;
                            conv_row_input_grad(
                                &mut d[row * n_in..(row + 1) * n_in],
                                &g[row * n_out..(row + 1) * n_out],
                                &wv[ch * k..(ch + 1) * k],
                                stride,
                                pad_left,
                            );
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for b in 0..batch {
                        for ch in 0..c {
                            let row = b * c + ch;
                            conv_row_kernel_grad(
                                &mut d[ch * k..(ch + 1) * k],
                                &g[row * n_out..(row + 1) * n_out],
                                &xv[row * n_in..(row + 1) * n_in],
                                stride,
                                pad_left,
                            );
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        if xv[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            Op::Swish(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        let s = sigmoid(xv[j]);
                        d[j] += g[j] * (s + xv[j] * s * (1.0 - s));
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }),
            Op::Ln(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / xv[j];
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        if xv[j] >= *lo && xv[j] <= *hi {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..len {
                                d[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::GlobalAvgPool { x, n } => acc(*x, &mut |d| {
                let inv = 1.0 / *n as f64;
                for (j, dv) in d.iter_mut().enumerate() {
                    *dv += g[j / n] * inv;
                }
            }),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    acc(*p, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let off = (o * full + start) * inner;
                        add_into(&mut d[off..off + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Gather { table, indices } => {
                let dcols = node.value.shape()[1];
                acc(*table, &mut |d| {
                    for (r, &idx) in indices.iter().enumerate() {
                        add_into(&mut d[idx * dcols..(idx + 1) * dcols], &g[r * dcols..(r + 1) * dcols]);
                    }
                });
            }
            Op::SelectRows { mask, a, b } => {
                let width = if mask.is_empty() { 0 } else { g.len() / mask.len() };
                acc(*a, &mut |d| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(&mut d[r * width..(r + 1) * width], &g[r * width..(r + 1) * width]);
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut d[r * width..(r + 1) * width], &g[r * width..(r + 1) * width]);
                        }
                    }
                });
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                n,
            } => {
                let gv = val(*gamma);
                let c = gv.len();
                let n = *n;
                let m = (g.len() / c) as f64;
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for j in 0..g.len() {
                    let ch = (j / n) % c;
                    let dxh = g[j] * gv[ch];
                    sum_dxhat[ch] += dxh;
                    sum_dxhat_xhat[ch] += dxh * xhat[j];
                }
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        let ch = (j / n) % c;
                        let dxh = g[j] * gv[ch];
                        d[j] += inv_std[ch] / m
                            * (m * dxh - sum_dxhat[ch] - xhat[j] * sum_dxhat_xhat[ch]);
                    }
                });
                bn_affine_grads(&mut acc, *gamma, *beta, g, xhat, c, n);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                n,
            } => {
                let gv = val(*gamma);
                let c = gv.len();
                let n = *n;
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        let ch = (j / n) % c;
                        d[j] += g[j] * gv[ch] * inv_std[ch];
                    }
                });
                bn_affine_grads(&mut acc, *gamma, *beta, g, xhat, c, n);
            }
            Op::Custom { x, adjoint } => {
                let upstream = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("shape");
                let gx = adjoint(&nodes[x.0].value, &upstream);
                acc(*x, &mut |d| add_into(d, &gx));
            }
        }
    }
}

fn bn_affine_grads(
    acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [f64])),
    gamma: Var,
    beta: Var,
    g: &[f64],
    xhat: &[f64],
    c: usize,
    n: usize,
) {
    acc(gamma, &mut |d| {
        for j in 0..g.len() {
            d[(j / n) % c] += g[j] * xhat[j];
        }
    });
    acc(beta, &mut |d| {
        for j in 0..g.len() {
            d[(j / n) % c] += g[j];
        }
    });
}

/// `out[t] += sum_k w[k] * x[t * stride + k - pad_left]`, zero outside `x`.
fn conv_row(out: &mut [f64], x: &[f64], w: &[f64], stride: usize, pad_left: usize) {
    let n = x.len() as isize;
    for (t, o) in out.iter_mut().enumerate() {
        let base = (t * stride) as isize - pad_left as isize;
        let mut s = 0.0;
        for (k, wv) in w.iter().enumerate() {
            let idx = base + k as isize;
            if idx >= 0 && idx < n {
                s += wv * x[idx as usize];
            }
        }
        *o += s;
    }
}

fn conv_row_input_grad(dx: &mut [f64], g: &[f64], w: &[f64], stride: usize, pad_left: usize) {
    let n = dx.len() as isize;
    for (t, gv) in g.iter().enumerate() {
        let base = (t * stride) as isize - pad_left as isize;
        for (k, wv) in w.iter().enumerate() {
            let idx = base + k as isize;
            if idx >= 0 && idx < n {
                dx[idx as usize] += gv * wv;
            }
        }
    }
}

fn conv_row_kernel_grad(dw: &mut [f64], g: &[f64], x: &[f64], stride: usize, pad_left: usize) {
    let n = x.len() as isize;
    for (t, gv) in g.iter().enumerate() {
        let base = (t * stride) as isize - pad_left as isize;
        for (k, dv) in dw.iter_mut().enumerate() {
            let idx = base + k as isize;
            if idx >= 0 && idx < n {
                *dv += gv * x[idx as usize];
            }
        }
    }
}
