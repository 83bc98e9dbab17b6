//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation appends one node holding its output value. Nodes whose
//! inputs carry gradients are differentiated by [`Tape::backward`], which
//! walks the record from the loss back to the first node exactly once,
//! accumulating gradients additively into shared inputs.

use super::kernels::{self, ConvGeom, Pool, Resize, Windows};
use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A scalar loss together with a flag marking the degenerate "nothing to
/// average over" case (every pixel ignored).
#[derive(Clone, Copy, Debug)]
pub struct Loss {
    pub var: Var,
    pub empty: bool,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
        c_out: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        b: Var,
        inner: usize,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    AvgPool {
        x: Var,
        pool: Pool,
    },
    Resize {
        x: Var,
        resize: Resize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Expand {
        x: Var,
    },
    GatherWindows {
        x: Var,
        windows: Windows,
    },
    ScatterWindows {
        x: Var,
        windows: Windows,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<u8>,
        ignore: u8,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Gradients produced by one backward pass. Only leaf nodes keep theirs.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for the parameter registered under `index`, summed over
    /// every node it was bound to.
    pub fn param(&self, index: usize) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for &(p, node) in &self.params {
            if p != index {
                continue;
            }
            if let Some(g) = &self.by_node[node] {
                match &mut acc {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(op: &'static str, detail: impl std::fmt::Display) -> Error {
    Error::contract(op, detail.to_string())
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter value as a differentiable leaf. `index` is the
    /// parameter's position in the caller's parameter list.
    pub fn param(&mut self, index: usize, value: &Tensor) -> Var {
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(index),
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers every parameter in order; the returned handles index like
    /// `params`.
    pub fn bind(&mut self, params: &[Parameter], requires_grad: bool) -> Vec<Var> {
        params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if requires_grad {
                    self.param(i, &p.value)
                } else {
                    self.constant(p.value.clone())
                }
            })
            .collect()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product of `[m,k]·[k,n]`, or batched `[B,m,k]·[B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(shape_err("matmul", format!("incompatible shapes {sa:?} and {sb:?}"))),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::mm_acc(
                &av[i * m * k..][..m * k],
                &bv[i * k * n..][..k * n],
                &mut out[i * m * n..][..m * n],
                m,
                k,
                n,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::from_parts(shape, out);
        self.push("matmul", value, Op::MatMul { a, b, batch, m, k, n }, &[a, b])
    }

    /// 2-D convolution of a `[Cin,H,W]` map with a `[Cout,Cin,kh,kw]` kernel
    /// using zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([c_in, h, wd], [c_out, c_in2, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(shape_err("conv2d", format!("expected [C,H,W] and [O,C,kh,kw], got {sx:?} and {sw:?}")));
        };
        if c_in != c_in2 {
            return Err(shape_err("conv2d", format!("input channels {c_in} vs kernel {c_in2}")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err("conv2d", "zero stride"));
        }
        let (ph, pw) = padding;
        if h + 2 * ph < *kh || wd + 2 * pw < *kw {
            return Err(shape_err(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {kh}x{kw}", h + 2 * ph, wd + 2 * pw),
            ));
        }
        let geom = ConvGeom {
            c_in: *c_in,
            h: *h,
            w: *wd,
            kh: *kh,
            kw: *kw,
            sh: stride.0,
            sw: stride.1,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / stride.0 + 1,
            wo: (wd + 2 * pw - kw) / stride.1 + 1,
        };
        let c_out = *c_out;
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; c_out * geom.cols()];
        kernels::mm_acc(self.value(w).data(), &cols, &mut out, c_out, geom.rows(), geom.cols());
        let value = Tensor::from_parts(vec![c_out, geom.ho, geom.wo], out);
        self.push("conv2d", value, Op::Conv2d { x, w, geom, cols, c_out }, &[x, w])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.map(a, |x| x * factor);
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    /// Adds a per-channel bias `[C]` to a `[C, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.is_empty() || sb != [sx[0]] {
            return Err(shape_err("add_bias", format!("bias {sb:?} does not match leading dim of {sx:?}")));
        }
        let inner = sx[1..].iter().product::<usize>();
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for (c, chunk) in data.chunks_mut(inner).enumerate() {
            for v in chunk {
                *v += bias[c];
            }
        }
        let value = Tensor::from_parts(sx, data);
        self.push("add_bias", value, Op::AddBias { x, b, inner }, &[x, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| x.max(0.0));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, kernels::gelu);
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, kernels::sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Average pooling over the last two dimensions, no padding.
    pub fn avg_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err("avg_pool2d", format!("invalid pooling of {shape:?} with kernel {kernel:?}")));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        if kernel.0 > h || kernel.1 > w {
            return Err(shape_err("avg_pool2d", format!("kernel {kernel:?} larger than {h}x{w}")));
        }
        let pool = Pool {
            planes: shape[..r - 2].iter().product(),
            h,
            w,
            kh: kernel.0,
            kw: kernel.1,
            sh: stride.0,
            sw: stride.1,
            ho: (h - kernel.0) / stride.0 + 1,
            wo: (w - kernel.1) / stride.1 + 1,
        };
        let out = pool.forward(self.value(x).data());
        let mut oshape = shape[..r - 2].to_vec();
        oshape.extend([pool.ho, pool.wo]);
        let value = Tensor::from_parts(oshape, out);
        self.push("avg_pool2d", value, Op::AvgPool { x, pool }, &[x])
    }

    /// Bilinear resampling of the last two dimensions (half-pixel centres).
    pub fn resize_bilinear(&mut self, x: Var, size: (usize, usize)) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || size.0 == 0 || size.1 == 0 {
            return Err(shape_err("resize_bilinear", format!("cannot resize {shape:?} to {size:?}")));
        }
        let resize = Resize::new(shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1], size.0, size.1);
        let out = resize.forward(self.value(x).data());
        let mut oshape = shape[..r - 2].to_vec();
        oshape.extend([size.0, size.1]);
        let value = Tensor::from_parts(oshape, out);
        self.push("resize_bilinear", value, Op::Resize { x, resize }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..][..len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    fn check_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(shape_err("batch_norm", format!("need [C, ...] input, got {sx:?}")));
        }
        let c = sx[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", format!("affine params must be [{c}]")));
        }
        Ok((c, sx[1..].iter().product()))
    }

    /// Normalization with statistics of the current input (per channel
    /// over all remaining dimensions). Returns the output together with
    /// the biased per-channel mean and variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (c, inner) = self.check_norm(x, gamma, beta)?;
        let xv = self.value(x).data();
        let (mut means, mut vars) = (Vec::with_capacity(c), Vec::with_capacity(c));
        for ch in xv.chunks(inner) {
            let m = ch.iter().sum::<f64>() / inner as f64;
            let v = ch.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / inner as f64;
            means.push(m);
            vars.push(v);
        }
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &means, &inv_std, true)?;
        Ok((out, means, vars))
    }

    /// Normalization with stored statistics; the variance is floored at
    /// `floor` before taking its square root.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        floor: f64,
    ) -> Result<Var> {
        let (c, _) = self.check_norm(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm", format!("stats length differs from {c} channels")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / v.max(floor).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, &inv_std, false)
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64], batch_stats: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let inner = shape[1..].iter().product::<usize>();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = self.value(x).data().to_vec();
        let mut out = vec![0.0; xhat.len()];
        for (c, (xh, o)) in xhat.chunks_mut(inner).zip(out.chunks_mut(inner)).enumerate() {
            for (a, y) in xh.iter_mut().zip(o.iter_mut()) {
                *a = (*a - mean[c]) * inv_std[c];
                *y = g[c] * *a + b[c];
            }
        }
        let value = Tensor::from_parts(shape, out);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std: inv_std.to_vec(),
            batch_stats,
        };
        self.push("batch_norm", value, op, &[x, gamma, beta])
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(shape_err("transpose", format!("need rank >= 2, got {shape:?}")));
        }
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch = shape[..r - 2].iter().product::<usize>();
        let out = transpose_data(self.value(x).data(), batch, rows, cols);
        let mut oshape = shape;
        oshape.swap(r - 2, r - 1);
        let value = Tensor::from_parts(oshape, out);
        self.push("transpose", value, Op::Transpose { x, batch, rows, cols }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Broadcasts size-1 dimensions to `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let ok = src_shape.len() == shape.len() && src_shape.iter().zip(shape).all(|(a, b)| a == b || *a == 1);
        if !ok {
            return Err(shape_err("expand", format!("cannot broadcast {src_shape:?} to {shape:?}")));
        }
        let idx = broadcast_index(&src_shape, shape);
        let src = self.value(x).data();
        let out = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_parts(shape.to_vec(), out);
        self.push("expand", value, Op::Expand { x }, &[x])
    }

    fn windows_for(&self, op: &'static str, x: Var, size: (usize, usize), origins: &[(usize, usize)]) -> Result<Windows> {
        let shape = self.shape(x);
        let [c, h, w] = shape else {
            return Err(shape_err(op, format!("need [C,H,W], got {shape:?}")));
        };
        if origins.is_empty() || size.0 == 0 || size.1 == 0 {
            return Err(shape_err(op, "empty window set"));
        }
        if let Some(o) = origins.iter().find(|(y, x)| y + size.0 > *h || x + size.1 > *w) {
            return Err(shape_err(op, format!("window at {o:?} of size {size:?} exceeds {h}x{w}")));
        }
        Ok(Windows {
            channels: *c,
            h: *h,
            w: *w,
            wh: size.0,
            ww: size.1,
            origins: origins.to_vec(),
        })
    }

    /// Cuts windows of `size` at `origins` out of a `[C,H,W]` map, giving
    /// `[N, C, wh, ww]`.
    pub fn gather_windows(&mut self, x: Var, size: (usize, usize), origins: &[(usize, usize)]) -> Result<Var> {
        let windows = self.windows_for("gather_windows", x, size, origins)?;
        let out = windows.gather(self.value(x).data());
        let value = Tensor::from_parts(vec![origins.len(), windows.channels, size.0, size.1], out);
        self.push("gather_windows", value, Op::GatherWindows { x, windows }, &[x])
    }

    /// Adjoint of [`Tape::gather_windows`]: sums `[N, C, wh, ww]` windows
    /// back into a zero `[C, H, W]` map.
    pub fn scatter_windows(&mut self, x: Var, map: (usize, usize), origins: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, wh, ww] = shape.as_slice() else {
            return Err(shape_err("scatter_windows", format!("need [N,C,h,w], got {shape:?}")));
        };
        if *n != origins.len() {
            return Err(shape_err("scatter_windows", format!("{n} windows but {} origins", origins.len())));
        }
        if let Some(o) = origins.iter().find(|(y, x)| y + wh > map.0 || x + ww > map.1) {
            return Err(shape_err("scatter_windows", format!("window at {o:?} exceeds {map:?}")));
        }
        let windows = Windows {
            channels: *c,
            h: map.0,
            w: map.1,
            wh: *wh,
            ww: *ww,
            origins: origins.to_vec(),
        };
        let mut out = vec![0.0; c * map.0 * map.1];
        windows.scatter_acc(self.value(x).data(), &mut out);
        let value = Tensor::from_parts(vec![*c, map.0, map.1], out);
        self.push("scatter_windows", value, Op::ScatterWindows { x, windows }, &[x])
    }

    /// Mean of `-log softmax(logits)[label]` over pixels whose label is not
    /// `ignore`. `logits` is `[C, H, W]`, `labels` holds `H·W` ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Loss> {
        let shape = self.shape(logits).to_vec();
        let [classes, h, w] = shape.as_slice() else {
            return Err(shape_err("cross_entropy", format!("need [C,H,W] logits, got {shape:?}")));
        };
        let (classes, pixels) = (*classes, h * w);
        if labels.len() != pixels {
            return Err(shape_err("cross_entropy", format!("{} labels for {h}x{w} logits", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != ignore && l as usize >= classes) {
            return Err(shape_err("cross_entropy", format!("label {bad} outside 0..{classes}")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; classes * pixels];
        let (mut total, mut count) = (0.0, 0usize);
        for p in 0..pixels {
            let label = labels[p];
            if label == ignore {
                continue;
            }
            let max = (0..classes).map(|c| z[c * pixels + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..classes {
                let e = (z[c * pixels + p] - max).exp();
                probs[c * pixels + p] = e;
                denom += e;
            }
            for c in 0..classes {
                probs[c * pixels + p] /= denom;
            }
            total += max + denom.ln() - z[label as usize * pixels + p];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::CrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
            ignore,
            count,
        };
        let var = self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])?;
        Ok(Loss { var, empty: count == 0 })
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`. The tape can be differentiated
    /// only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("tape already consumed by a backward pass".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { by_node: grads, params })
    }

    /// Back-propagates and stores `∂loss/∂θ` in each parameter's gradient;
    /// parameters the loss does not reach receive zeros.
    pub fn backward_into(&mut self, loss: Var, params: &mut [Parameter]) -> Result<()> {
        let grads = self.backward(loss)?;
        for (i, p) in params.iter_mut().enumerate() {
            match grads.param(i) {
                Some(g) => p.set_grad(g)?,
                None => p.set_grad(Tensor::zeros(p.value.shape().to_vec()))?,
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut acc = |v: Var, data: Vec<f64>| {
            let target = &self.nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let t = Tensor::from_parts(target.value.shape().to_vec(), data);
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * k * n];
                for bi in 0..*batch {
                    let gs = &gd[bi * m * n..][..m * n];
                    kernels::mm_nt_acc(gs, &bv[bi * k * n..][..k * n], &mut da[bi * m * k..][..m * k], m, n, k);
                    kernels::mm_tn_acc(&av[bi * m * k..][..m * k], gs, &mut db[bi * k * n..][..k * n], k, m, n);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Conv2d { x, w, geom, cols, c_out } => {
                let (rows, ncol) = (geom.rows(), geom.cols());
                let mut dw = vec![0.0; c_out * rows];
                kernels::mm_nt_acc(gd, cols, &mut dw, *c_out, ncol, rows);
                let mut dcols = vec![0.0; rows * ncol];
                kernels::mm_tn_acc(self.value(*w).data(), gd, &mut dcols, rows, *c_out, ncol);
                let mut dx = vec![0.0; self.value(*x).numel()];
                kernels::col2im_acc(&dcols, geom, &mut dx);
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, f) => acc(*a, gd.iter().map(|g| g * f).collect()),
            Op::AddBias { x, b, inner } => {
                acc(*x, gd.to_vec());
                acc(*b, gd.chunks(*inner).map(|c| c.iter().sum()).collect());
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(*a, gd.iter().zip(av).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                acc(*a, gd.iter().zip(av).map(|(g, x)| g * kernels::gelu_grad(*x)).collect());
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                acc(*a, gd.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![gd[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![gd[0] / n as f64; n]);
            }
            Op::AvgPool { x, pool } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                pool.backward_acc(gd, &mut dx);
                acc(*x, dx);
            }
            Op::Resize { x, resize } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                resize.backward_acc(gd, &mut dx);
                acc(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let mut dp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        dp.extend_from_slice(&gd[(o * total + offset) * inner..][..len * inner]);
                    }
                    offset += len;
                    acc(p, dp);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let gam = self.value(*gamma).data();
                let c = gam.len();
                let inner = xhat.len() / c;
                let n = inner as f64;
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let gs = &gd[ch * inner..][..inner];
                    let xs = &xhat[ch * inner..][..inner];
                    dgamma[ch] = gs.iter().zip(xs).map(|(g, x)| g * x).sum();
                    dbeta[ch] = gs.iter().sum();
                    let out = &mut dx[ch * inner..][..inner];
                    if *batch_stats {
                        let sum_d = gam[ch] * dbeta[ch];
                        let sum_dx = gam[ch] * dgamma[ch];
                        for ((o, g), xh) in out.iter_mut().zip(gs).zip(xs) {
                            *o = inv_std[ch] / n * (n * g * gam[ch] - sum_d - xh * sum_dx);
                        }
                    } else {
                        for (o, g) in out.iter_mut().zip(gs) {
                            *o = g * gam[ch] * inv_std[ch];
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Transpose { x, batch, rows, cols } => {
                acc(*x, transpose_data(gd, *batch, *cols, *rows));
            }
            Op::Reshape(x) => acc(*x, gd.to_vec()),
            Op::Expand { x } => {
                let src_shape = self.shape(*x);
                let idx = broadcast_index(src_shape, node.value.shape());
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (g, &i) in gd.iter().zip(&idx) {
                    dx[i] += g;
                }
                acc(*x, dx);
            }
            Op::GatherWindows { x, windows } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                windows.scatter_acc(gd, &mut dx);
                acc(*x, dx);
            }
            Op::ScatterWindows { x, windows } => acc(*x, windows.gather(gd)),
            Op::CrossEntropy { logits, probs, labels, ignore, count } => {
                let mut dz = vec![0.0; probs.len()];
                if *count > 0 {
                    let pixels = labels.len();
                    let scale = gd[0] / *count as f64;
                    for (p, &label) in labels.iter().enumerate() {
                        if label == *ignore {
                            continue;
                        }
                        for (c, chunk) in dz.chunks_mut(pixels).enumerate() {
                            let onehot = if c == label as usize { 1.0 } else { 0.0 };
                            chunk[p] = scale * (probs[c * pixels + p] - onehot);
                        }
                    }
                }
                acc(*logits, dz);
            }
        }
    }
}

fn transpose_data(src: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let s = &src[b * rows * cols..][..rows * cols];
        let d = &mut out[b * rows * cols..][..rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

/// For each element of a tensor of `dst` shape, the flat index of the
/// source element it is broadcast from.
fn broadcast_index(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let rank = dst.len();
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src[d] == 1 { 0 } else { stride };
        stride *= src[d];
    }
    let numel: usize = dst.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    for _ in 0..numel {
        out.push(counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < dst[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    out
}
