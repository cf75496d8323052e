use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, ConvGeom, PoolGeom};
use crate::real::Real;
use crate::tensor::{
    broadcast_shape, broadcast_strides, expect_rank4, for_each_broadcast, numel, sum_to_shape,
    Tensor,
};

use super::tape::{BinaryKind, Op, ReduceKind, Tape, UnaryKind, Var};

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn apply_binary<T: Real>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let (ad, bd) = (a.data(), b.data());
    let mut data = vec![T::zero(); numel(&out)];
    let f: fn(T, T) -> T = match kind {
        BinaryKind::Add => |x, y| x + y,
        BinaryKind::Sub => |x, y| x - y,
        BinaryKind::Mul => |x, y| x * y,
        BinaryKind::Max => |x: T, y: T| if x >= y { x } else { y },
    };
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(out, data)
}

/// Expands `t` to `shape` by repeating along stretched axes.
pub(crate) fn broadcast_to<T: Real>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let st = broadcast_strides(t.shape(), shape);
    let zero = vec![0; shape.len()];
    let mut data = vec![T::zero(); numel(shape)];
    for_each_broadcast(shape, &st, &zero, |o, i, _| data[o] = t.data()[i]);
    Tensor::new(shape.to_vec(), data).expect("broadcast shape is valid")
}

fn conv_dims(x: [usize; 4], w: &[usize], out_h: usize, out_w: usize) -> ConvDims {
    ConvDims {
        batch: x[0],
        in_ch: x[1],
        in_h: x[2],
        in_w: x[3],
        out_ch: w[0],
        out_h,
        out_w,
        kernel: w[2],
    }
}

impl<T: Real> Tape<T> {
    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            UnaryKind::Exp => x.map(T::exp),
            UnaryKind::Ln => {
                if let Some(bad) = x.data().iter().find(|v| **v <= T::zero()) {
                    return Err(Error::Domain(format!("ln of non-positive value {bad}")));
                }
                x.map(T::ln)
            }
            UnaryKind::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            UnaryKind::Sigmoid => x.map(sigmoid),
            UnaryKind::Abs => x.map(T::abs),
            UnaryKind::Neg => x.map(|v| -v),
        };
        self.push(Op::Unary(kind), &[a], value)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let value = apply_binary(kind, self.value(a), self.value(b))?;
        self.push(Op::Binary(kind), &[a, b], value)
    }

    /// Elementwise op; `b` is required for binary kinds and ignored otherwise.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match kind.split() {
            Ok(u) => self.unary(u, a),
            Err(bk) => {
                let b = b.ok_or_else(|| Error::shape(format!("{kind:?} needs two operands")))?;
                self.binary(bk, a, b)
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(c), &[a], value)
    }

    pub fn offset(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|v| v + c);
        self.push(Op::Offset, &[a], value)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(lo).min(hi));
        self.push(Op::Clamp { lo, hi }, &[a], value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_values(self.value(a), self.value(b))?;
        self.push(Op::MatMul, &[a, b], value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        self.push(Op::Reshape, &[a], value)
    }

    /// Reduces over `axes`. With `keepdim` the reduced axes stay as extent 1,
    /// otherwise they are removed (a full reduction yields shape `[1]`).
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let x = self.value(a);
        let rank = x.rank();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= rank) {
            return Err(Error::shape(format!(
                "axis {bad} out of range for rank {rank}"
            )));
        }
        let keep_shape: Vec<usize> = x
            .shape()
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let count = numel(x.shape()) / numel(&keep_shape);
        let mut argmax = Vec::new();
        let reduced = match kind {
            ReduceKind::Sum => sum_to_shape(x, &keep_shape),
            ReduceKind::Mean => sum_to_shape(x, &keep_shape).scale(T::one() / T::from_usize(count)),
            ReduceKind::Max => {
                let st = broadcast_strides(&keep_shape, x.shape());
                let zero = vec![0; rank];
                let n_out = numel(&keep_shape);
                let mut best = vec![T::neg_infinity(); n_out];
                argmax = vec![usize::MAX; n_out];
                for_each_broadcast(x.shape(), &st, &zero, |i, o, _| {
                    let v = x.data()[i];
                    if argmax[o] == usize::MAX || v > best[o] {
                        best[o] = v;
                        argmax[o] = i;
                    }
                });
                Tensor::new(keep_shape.clone(), best)?
            }
        };
        let out_shape: Vec<usize> = if keepdim {
            keep_shape.clone()
        } else {
            let s: Vec<usize> = x
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let value = reduced.reshape(out_shape)?;
        self.push(
            Op::Reduce {
                kind,
                keep_shape,
                argmax,
            },
            &[a],
            value,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(ReduceKind::Sum, a, &axes, false)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(ReduceKind::Mean, a, &axes, false)
    }

    /// 2-D cross-correlation. `w` is `out×in×n×n`, `bias` is `[out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = expect_rank4(self.shape(x), "conv2d input")?;
        let ws = expect_rank4(self.shape(w), "conv2d weight")?;
        if ws[1] != xs[1] {
            return Err(Error::shape(format!(
                "conv2d weight expects {} input channels, input has {}",
                ws[1], xs[1]
            )));
        }
        if ws[2] != ws[3] {
            return Err(Error::shape("conv2d kernel must be square"));
        }
        let (oh, ow) = match (geom.out_extent(xs[2], ws[2]), geom.out_extent(xs[3], ws[2])) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d output extent < 1 for input {:?}, kernel {}, {geom:?}",
                    xs, ws[2]
                )))
            }
        };
        let dims = conv_dims(xs, &ws, oh, ow);
        let mut out = vec![T::zero(); xs[0] * ws[0] * oh * ow];
        if let Some(b) = bias {
            self.fill_bias(b, ws[0], xs[0], oh * ow, &mut out)?;
        }
        kernels::conv_forward(self.value(x).data(), self.value(w).data(), &mut out, &dims, &geom);
        let value = Tensor::new(vec![xs[0], ws[0], oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            Op::Conv {
                geom,
                bias: bias.is_some(),
            },
            &inputs,
            value,
        )
    }

    /// Adjoint of [`Tape::conv2d`]. `w` is `in×out×n×n`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = expect_rank4(self.shape(x), "conv_transpose2d input")?;
        let ws = expect_rank4(self.shape(w), "conv_transpose2d weight")?;
        if ws[0] != xs[1] {
            return Err(Error::shape(format!(
                "conv_transpose2d weight expects {} input channels, input has {}",
                ws[0], xs[1]
            )));
        }
        let (oh, ow) = match (
            geom.transposed_extent(xs[2], ws[2]),
            geom.transposed_extent(xs[3], ws[2]),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::shape("conv_transpose2d: invalid geometry")),
        };
        // the adjoint runs the forward conv's input-gradient kernel with the
        // roles of input and output swapped
        let dims = ConvDims {
            batch: xs[0],
            in_ch: ws[1],
            in_h: oh,
            in_w: ow,
            out_ch: ws[0],
            out_h: xs[2],
            out_w: xs[3],
            kernel: ws[2],
        };
        let mut out = vec![T::zero(); xs[0] * ws[1] * oh * ow];
        if let Some(b) = bias {
            self.fill_bias(b, ws[1], xs[0], oh * ow, &mut out)?;
        }
        kernels::conv_backward_input(self.value(x).data(), self.value(w).data(), &mut out, &dims, &geom);
        let value = Tensor::new(vec![xs[0], ws[1], oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            Op::ConvTranspose {
                geom,
                bias: bias.is_some(),
            },
            &inputs,
            value,
        )
    }

    fn fill_bias(&self, b: Var, channels: usize, batch: usize, plane: usize, out: &mut [T]) -> Result<()> {
        let bv = self.value(b);
        if bv.shape() != [channels] {
            return Err(Error::shape(format!(
                "bias shape {:?}, expected [{channels}]",
                bv.shape()
            )));
        }
        for bi in 0..batch {
            for c in 0..channels {
                out[(bi * channels + c) * plane..][..plane].fill(bv.data()[c]);
            }
        }
        Ok(())
    }

    pub fn avg_pool2d(&mut self, x: Var, geom: PoolGeom) -> Result<Var> {
        let [b, c, h, w] = expect_rank4(self.shape(x), "avg_pool2d")?;
        let (oh, ow) = match (geom.out_extent(h), geom.out_extent(w)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::shape(format!("avg_pool2d: {h}×{w} too small for {geom:?}"))),
        };
        let mut out = vec![T::zero(); b * c * oh * ow];
        kernels::avg_pool_forward(self.value(x).data(), b * c, (h, w), (oh, ow), &geom, &mut out);
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        self.push(Op::AvgPool(geom), &[x], value)
    }

    /// Half-pixel bilinear resize of every channel plane.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [b, c, h, w] = expect_rank4(self.shape(x), "bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize to zero extent"));
        }
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        kernels::bilinear_forward(self.value(x).data(), b * c, (h, w), (out_h, out_w), &mut out);
        let value = Tensor::new(vec![b, c, out_h, out_w], out)?;
        self.push(Op::Resize, &[x], value)
    }

    /// Softmax over the spatial positions of every channel plane.
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = expect_rank4(self.shape(x), "spatial_softmax")?;
        let mut out = vec![T::zero(); b * c * h * w];
        kernels::softmax_planes(self.value(x).data(), h * w, &mut out);
        let value = Tensor::new(vec![b, c, h, w], out)?;
        self.push(Op::SpatialSoftmax, &[x], value)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let [b, _, h, w] = expect_rank4(self.shape(*first), "concat")?;
        let mut total_c = 0;
        for &p in parts {
            let s = expect_rank4(self.shape(p), "concat")?;
            if s[0] != b || s[2] != h || s[3] != w {
                return Err(Error::shape(format!(
                    "concat part {:?} does not match batch/spatial {:?}",
                    s,
                    [b, h, w]
                )));
            }
            total_c += s[1];
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * total_c * hw);
        for bi in 0..b {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let value = Tensor::new(vec![b, total_c, h, w], out)?;
        self.push(Op::ConcatChannels, parts, value)
    }

    /// Training-mode batch normalization over (B, H, W) per channel.
    ///
    /// Returns the output and the biased batch mean and variance so the
    /// caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let dims = expect_rank4(self.shape(x), "batch_norm")?;
        let [b, c, h, w] = dims;
        if b < 2 {
            return Err(Error::shape("batch_norm in train mode needs batch size >= 2"));
        }
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [c] {
                return Err(Error::shape(format!(
                    "batch_norm {what} shape {:?}, expected [{c}]",
                    self.shape(v)
                )));
            }
        }
        let xd = self.value(x).data();
        let (mean, var) = kernels::channel_stats(xd, dims);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let hw = h * w;
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut x_hat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    x_hat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let x_hat = Tensor::new(vec![b, c, h, w], x_hat)?;
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let y = self.push(Op::BatchNorm { x_hat, inv_std }, &[x, gamma, beta], value)?;
        Ok((y, mean, var))
    }
}

pub(crate) fn matmul_values<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub(crate) fn transpose2<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    Tensor::from_fn(vec![n, m], |i| a.data()[(i % m) * n + i / m])
}

/// Kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Max,
    Exp,
    Ln,
    Relu,
    Sigmoid,
}

impl ElementwiseKind {
    fn split(self) -> std::result::Result<UnaryKind, BinaryKind> {
        match self {
            ElementwiseKind::Add => Err(BinaryKind::Add),
            ElementwiseKind::Sub => Err(BinaryKind::Sub),
            ElementwiseKind::Mul => Err(BinaryKind::Mul),
            ElementwiseKind::Max => Err(BinaryKind::Max),
            ElementwiseKind::Exp => Ok(UnaryKind::Exp),
            ElementwiseKind::Ln => Ok(UnaryKind::Ln),
            ElementwiseKind::Relu => Ok(UnaryKind::Relu),
            ElementwiseKind::Sigmoid => Ok(UnaryKind::Sigmoid),
        }
    }
}
