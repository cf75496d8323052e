use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::real::Real;
use crate::tensor::{dims4, numel, sum_to_shape, Tensor};

use super::ops::{apply_binary, broadcast_to, matmul_values, transpose2};
use super::tape::{BinaryKind, Gradients, Node, Op, ReduceKind, Tape, UnaryKind, Var};

impl<T: Real> Tape<T> {
    /// Reverse-mode sweep from a scalar `output`.
    ///
    /// Every node is visited at most once, in reverse recording order. Leaves
    /// that require gradients but do not influence `output` receive zeros.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_idx = self.check(output).map_err(|_| {
            Error::Grad("backward output is not on this tape".to_string())
        })?;
        let out = &self.nodes[out_idx].value;
        if !out.is_scalar() {
            return Err(Error::Grad(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out_idx] = Some(Tensor::ones(out.shape().to_vec()));

        for i in (0..=out_idx).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let input_grads = self.node_backward(node, &g)?;
            grads[i] = Some(g);
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp].requires_grad {
                    continue;
                }
                match &mut grads[inp] {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients::new(self.id(), grads))
    }

    fn input(&self, node: &Node<T>, k: usize) -> &Tensor<T> {
        &self.nodes[node.inputs[k]].value
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Unary(kind) => {
                let x = self.input(node, 0);
                let d = match kind {
                    UnaryKind::Exp => g.zip_map(y, |g, y| g * y)?,
                    UnaryKind::Ln => g.zip_map(x, |g, x| g / x)?,
                    UnaryKind::Relu => g.zip_map(x, |g, x| if x > T::zero() { g } else { T::zero() })?,
                    UnaryKind::Sigmoid => g.zip_map(y, |g, y| g * y * (T::one() - y))?,
                    UnaryKind::Abs => g.zip_map(x, |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })?,
                    UnaryKind::Neg => g.map(|v| -v),
                };
                vec![Some(d)]
            }
            Op::Binary(kind) => {
                let (a, b) = (self.input(node, 0), self.input(node, 1));
                let (ga, gb) = match kind {
                    BinaryKind::Add => (g.clone(), g.clone()),
                    BinaryKind::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryKind::Mul => (
                        apply_binary(BinaryKind::Mul, g, b)?,
                        apply_binary(BinaryKind::Mul, g, a)?,
                    ),
                    BinaryKind::Max => {
                        let ab = broadcast_to(a, g.shape());
                        let bb = broadcast_to(b, g.shape());
                        let mask_a = ab.zip_map(&bb, |x, y| if x >= y { T::one() } else { T::zero() })?;
                        (
                            g.zip_map(&mask_a, |g, m| g * m)?,
                            g.zip_map(&mask_a, |g, m| g * (T::one() - m))?,
                        )
                    }
                };
                vec![
                    Some(sum_to_shape(&ga, a.shape())),
                    Some(sum_to_shape(&gb, b.shape())),
                ]
            }
            Op::Scale(c) => vec![Some(g.scale(*c))],
            Op::Offset => vec![Some(g.clone())],
            Op::Clamp { lo, hi } => {
                let x = self.input(node, 0);
                let (lo, hi) = (*lo, *hi);
                vec![Some(g.zip_map(x, |g, x| {
                    if x >= lo && x <= hi {
                        g
                    } else {
                        T::zero()
                    }
                })?)]
            }
            Op::MatMul => {
                let (a, b) = (self.input(node, 0), self.input(node, 1));
                vec![
                    Some(matmul_values(g, &transpose2(b))?),
                    Some(matmul_values(&transpose2(a), g)?),
                ]
            }
            Op::Reduce {
                kind,
                keep_shape,
                argmax,
            } => {
                let x = self.input(node, 0);
                let gk = g.reshape(keep_shape.clone())?;
                let d = match kind {
                    ReduceKind::Sum => broadcast_to(&gk, x.shape()),
                    ReduceKind::Mean => {
                        let count = numel(x.shape()) / numel(keep_shape);
                        broadcast_to(&gk, x.shape()).scale(T::one() / T::from_usize(count))
                    }
                    ReduceKind::Max => {
                        let mut d = Tensor::zeros(x.shape().to_vec());
                        for (o, &i) in argmax.iter().enumerate() {
                            d.data_mut()[i] += gk.data()[o];
                        }
                        d
                    }
                };
                vec![Some(d)]
            }
            Op::Reshape => vec![Some(g.reshape(self.input(node, 0).shape().to_vec())?)],
            Op::Conv { geom, bias } => {
                let (x, w) = (self.input(node, 0), self.input(node, 1));
                let xs = dims4(x.shape());
                let ys = dims4(y.shape());
                let dims = ConvDims {
                    batch: xs[0],
                    in_ch: xs[1],
                    in_h: xs[2],
                    in_w: xs[3],
                    out_ch: ys[1],
                    out_h: ys[2],
                    out_w: ys[3],
                    kernel: w.shape()[2],
                };
                let mut dx = vec![T::zero(); x.len()];
                kernels::conv_backward_input(g.data(), w.data(), &mut dx, &dims, geom);
                let mut dw = vec![T::zero(); w.len()];
                kernels::conv_backward_weight(g.data(), x.data(), &mut dw, &dims, geom);
                let mut out = vec![
                    Some(Tensor::new(x.shape().to_vec(), dx)?),
                    Some(Tensor::new(w.shape().to_vec(), dw)?),
                ];
                if *bias {
                    out.push(Some(channel_sums(g)));
                }
                out
            }
            Op::ConvTranspose { geom, bias } => {
                let (x, w) = (self.input(node, 0), self.input(node, 1));
                let xs = dims4(x.shape());
                let ys = dims4(y.shape());
                // forward-conv view: input = this op's output, output = this op's input
                let dims = ConvDims {
                    batch: xs[0],
                    in_ch: ys[1],
                    in_h: ys[2],
                    in_w: ys[3],
                    out_ch: xs[1],
                    out_h: xs[2],
                    out_w: xs[3],
                    kernel: w.shape()[2],
                };
                let mut dx = vec![T::zero(); x.len()];
                kernels::conv_forward(g.data(), w.data(), &mut dx, &dims, geom);
                let mut dw = vec![T::zero(); w.len()];
                kernels::conv_backward_weight(x.data(), g.data(), &mut dw, &dims, geom);
                let mut out = vec![
                    Some(Tensor::new(x.shape().to_vec(), dx)?),
                    Some(Tensor::new(w.shape().to_vec(), dw)?),
                ];
                if *bias {
                    out.push(Some(channel_sums(g)));
                }
                out
            }
            Op::AvgPool(geom) => {
                let x = self.input(node, 0);
                let [b, c, h, w] = dims4(x.shape());
                let [_, _, oh, ow] = dims4(y.shape());
                let mut dx = vec![T::zero(); x.len()];
                kernels::avg_pool_backward(g.data(), b * c, (h, w), (oh, ow), geom, &mut dx);
                vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
            }
            Op::Resize => {
                let x = self.input(node, 0);
                let [b, c, h, w] = dims4(x.shape());
                let [_, _, oh, ow] = dims4(y.shape());
                let mut dx = vec![T::zero(); x.len()];
                kernels::bilinear_backward(g.data(), b * c, (h, w), (oh, ow), &mut dx);
                vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
            }
            Op::SpatialSoftmax => {
                let [_, _, h, w] = dims4(y.shape());
                let mut dx = vec![T::zero(); y.len()];
                kernels::softmax_planes_backward(y.data(), g.data(), h * w, &mut dx);
                vec![Some(Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::ConcatChannels => {
                let [b, total_c, h, w] = dims4(y.shape());
                let hw = h * w;
                let mut parts = Vec::with_capacity(node.inputs.len());
                let mut c0 = 0;
                for k in 0..node.inputs.len() {
                    let shape = self.input(node, k).shape().to_vec();
                    let c = shape[1];
                    let mut d = Vec::with_capacity(b * c * hw);
                    for bi in 0..b {
                        let start = (bi * total_c + c0) * hw;
                        d.extend_from_slice(&g.data()[start..start + c * hw]);
                    }
                    parts.push(Some(Tensor::new(shape, d)?));
                    c0 += c;
                }
                parts
            }
            Op::BatchNorm { x_hat, inv_std } => {
                let gamma = self.input(node, 1);
                let [b, c, h, w] = dims4(y.shape());
                let hw = h * w;
                let m = T::from_usize(b * hw);
                let (gd, xh) = (g.data(), x_hat.data());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            dbeta[ch] += gd[i];
                            dgamma[ch] += gd[i] * xh[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); y.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let k = gamma.data()[ch] * inv_std[ch] / m;
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            dx[i] = k * (m * gd[i] - dbeta[ch] - xh[i] * dgamma[ch]);
                        }
                    }
                }
                vec![
                    Some(Tensor::new(y.shape().to_vec(), dx)?),
                    Some(Tensor::new(vec![c], dgamma)?),
                    Some(Tensor::new(vec![c], dbeta)?),
                ]
            }
        })
    }
}

fn channel_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = dims4(g.shape());
    let hw = h * w;
    let mut out = vec![T::zero(); c];
    for bi in 0..b {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += g.data()[(bi * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
    }
    Tensor::new(vec![c], out).expect("channel count is positive")
}
