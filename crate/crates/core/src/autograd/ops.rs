//! Differentiable operations on [`Var`].

use std::cell::Ref;

use crate::autograd::kernels::{self, ConvGeom};
use crate::autograd::tape::{matmul_dims, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::{numel, Tensor};

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    fn tracked(&self) -> bool {
        self.tape.is_recording() && self.requires_grad()
    }

    fn emit(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'t, T> {
        self.tape.push(value, op, requires_grad)
    }

    /// Matrix product of `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (av, bv) = (self.value(), rhs.value());
        let (sa, sb) = (av.shape(), bv.shape());
        let ok = match (sa.len(), sb.len()) {
            (2, 2) => sa[1] == sb[0],
            (3, 3) => sa[0] == sb[0] && sa[2] == sb[1],
            _ => false,
        };
        if !ok {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (batch, m, k, n) = matmul_dims(sa, sb);
        let mut c = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[bi * m * k..],
                Layout::Normal,
                &bv.data()[bi * k * n..],
                Layout::Normal,
                T::zero(),
                &mut c[bi * m * n..],
            );
        }
        let shape = if batch == 1 && sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        drop((av, bv));
        let rg = self.tracked() || rhs.tracked();
        Ok(self.emit(Tensor::from_parts(shape, c), Op::MatMul { a: self.id, b: rhs.id }, rg))
    }

    fn zip_same(self, rhs: Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(), rhs.value());
        if av.shape() != bv.shape() {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(rhs, "add", |a, b| a + b)?;
        let rg = self.tracked() || rhs.tracked();
        Ok(self.emit(v, Op::Add { a: self.id, b: rhs.id }, rg))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(rhs, "sub", |a, b| a - b)?;
        let rg = self.tracked() || rhs.tracked();
        Ok(self.emit(v, Op::Sub { a: self.id, b: rhs.id }, rg))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(rhs, "mul", |a, b| a * b)?;
        let rg = self.tracked() || rhs.tracked();
        Ok(self.emit(v, Op::Mul { a: self.id, b: rhs.id }, rg))
    }

    /// Adds a `[d]` bias to every row of a `[..., d]` tensor. This is the
    /// only broadcasting the engine supports.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (xv, bv) = (self.value(), bias.value());
        let d = *xv.shape().last().unwrap();
        if bv.rank() != 1 || bv.len() != d {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let shape = xv.shape().to_vec();
        drop((xv, bv));
        let rg = self.tracked() || bias.tracked();
        Ok(self.emit(Tensor::from_parts(shape, data), Op::AddBias { x: self.id, b: bias.id }, rg))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * c);
        self.emit(v, Op::Scale { x: self.id, c }, self.tracked())
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.max(T::zero()));
        self.emit(v, Op::Relu { x: self.id }, self.tracked())
    }

    pub fn leaky_relu(self, slope: T) -> Var<'t, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { x * slope });
        self.emit(v, Op::LeakyRelu { x: self.id, slope }, self.tracked())
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.value().map(kernels::sigmoid);
        self.emit(v, Op::Sigmoid { x: self.id }, self.tracked())
    }

    /// Softmax over the last dimension, stabilised by subtracting each
    /// row's maximum.
    pub fn softmax_last(self) -> Result<Var<'t, T>> {
        let xv = self.value();
        if !xv.is_finite() {
            return Err(Error::Numeric("softmax input contains NaN or infinity".into()));
        }
        let n = *xv.shape().last().unwrap();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = xv.shape().to_vec();
        drop(xv);
        Ok(self.emit(Tensor::from_parts(shape, data), Op::Softmax { x: self.id }, self.tracked()))
    }

    /// Normalises each row of the last dimension to zero mean and unit
    /// variance, then applies `gamma * x̂ + beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (xv, gv, bv) = (self.value(), gamma.value(), beta.value());
        let d = *xv.shape().last().unwrap();
        if gv.shape() != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        if bv.shape() != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), bv.shape()));
        }
        let rows = xv.len() / d;
        let dt = T::from_usize_lossy(d);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..][..d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (row[i] - mean) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = gv.data()[i] * h + bv.data()[i];
            }
        }
        let shape = xv.shape().to_vec();
        drop((xv, gv, bv));
        let rg = self.tracked() || gamma.tracked() || beta.tracked();
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.emit(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Reinterprets the shape; element order is unchanged.
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let xv = self.value();
        if numel(shape) != xv.len() || shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("reshape", xv.shape(), shape));
        }
        let data = xv.data().to_vec();
        drop(xv);
        Ok(self.emit(Tensor::from_parts(shape.to_vec(), data), Op::Reshape { x: self.id }, self.tracked()))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let xv = self.value();
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        let valid = axes.len() == rank
            && axes.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::shape("permute", xv.shape(), axes));
        }
        let data = kernels::permute(xv.data(), xv.shape(), axes);
        let shape = axes.iter().map(|&a| xv.shape()[a]).collect();
        drop(xv);
        Ok(self.emit(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
            self.tracked(),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let rank = self.value().rank();
        if rank < 2 {
            return Err(Error::shape("transpose", &self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let shape = xv.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total = shape[axis] * inner;
        let chunk = len * inner;
        let mut data = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            data.extend_from_slice(&xv.data()[o * total + start * inner..][..chunk]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        drop(xv);
        Ok(self.emit(
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            self.tracked(),
        ))
    }

    /// Selects rows of a `[n, d]` matrix (repeats allowed).
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t, T>> {
        let xv = self.value();
        if xv.rank() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= xv.shape()[0]) {
            return Err(Error::shape("gather_rows", xv.shape(), rows));
        }
        let d = xv.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&xv.data()[r * d..][..d]);
        }
        drop(xv);
        Ok(self.emit(
            Tensor::from_parts(vec![rows.len(), d], data),
            Op::GatherRows {
                x: self.id,
                rows: rows.to_vec(),
            },
            self.tracked(),
        ))
    }

    /// 2-D convolution of an NCHW batch with `[c_out, c_in, k, k]` weights
    /// and a `[c_out]` bias.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (xv, wv, bv) = (self.value(), weight.value(), bias.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if bv.shape() != [ws[0]] {
            return Err(Error::shape("conv2d bias", ws, bv.shape()));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], xs[3], ws[2], stride, pad)
            .ok_or_else(|| Error::shape("conv2d", xs, ws))?;
        let c_out = ws[0];
        let cols = kernels::im2col(xv.data(), &geom);
        let n_cols = geom.cols();
        let mut m = vec![T::zero(); c_out * n_cols];
        for (co, row) in m.chunks_exact_mut(n_cols).enumerate() {
            row.fill(bv.data()[co]);
        }
        gemm(c_out, geom.rows(), n_cols, wv.data(), Layout::Normal, &cols, Layout::Normal, T::one(), &mut m);
        let plane = geom.h_out * geom.w_out;
        let data = kernels::channels_to_batch_major(&m, c_out, geom.batch, plane);
        let shape = vec![geom.batch, c_out, geom.h_out, geom.w_out];
        drop((xv, wv, bv));
        let rg = self.tracked() || weight.tracked() || bias.tracked();
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.emit(
            Tensor::from_parts(shape, data),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2× upsampling of an NCHW batch.
    pub fn upsample2x(self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", s, &[]));
        }
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let mut data = Vec::with_capacity(xv.len() * 4);
        for p in 0..planes {
            let src = &xv.data()[p * h * w..][..h * w];
            for y in 0..2 * h {
                let row = &src[(y / 2) * w..][..w];
                for &v in row {
                    data.push(v);
                    data.push(v);
                }
            }
        }
        let shape = vec![s[0], s[1], 2 * h, 2 * w];
        drop(xv);
        Ok(self.emit(Tensor::from_parts(shape, data), Op::Upsample2x { x: self.id }, self.tracked()))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum();
        self.emit(Tensor::scalar(s), Op::Sum { x: self.id }, self.tracked())
    }

    /// Elementwise binary cross-entropy between `sigmoid(self)` and the
    /// given targets, computed from logits.
    pub fn bce_with_logits(self, targets: &[T]) -> Result<Var<'t, T>> {
        let xv = self.value();
        if targets.len() != xv.len() {
            return Err(Error::shape("bce_with_logits", xv.shape(), &[targets.len()]));
        }
        let data = xv
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| kernels::softplus(x) - x * t)
            .collect();
        let shape = xv.shape().to_vec();
        drop(xv);
        Ok(self.emit(
            Tensor::from_parts(shape, data),
            Op::BceWithLogits {
                x: self.id,
                targets: targets.to_vec(),
            },
            self.tracked(),
        ))
    }

    /// Per-row softmax cross-entropy of `[n, c]` logits against class
    /// indices; returns `[n]` losses.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t, T>> {
        let xv = self.value();
        let s = xv.shape();
        if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&t| t >= s[1]) {
            return Err(Error::shape("cross_entropy", s, &[targets.len()]));
        }
        let c = s[1];
        let mut probs = vec![T::zero(); xv.len()];
        let mut losses = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            let row = &xv.data()[r * c..][..c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + total.ln();
            for i in 0..c {
                probs[r * c + i] = (row[i] - lse).exp();
            }
            losses.push(lse - row[t]);
        }
        drop(xv);
        Ok(self.emit(
            Tensor::from_parts(vec![targets.len()], losses),
            Op::CrossEntropy {
                x: self.id,
                targets: targets.to_vec(),
                probs,
            },
            self.tracked(),
        ))
    }
}

impl<T: Scalar> Tape<T> {
    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, inputs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?
            .shape();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for v in inputs {
            let s = v.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, &s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        {
            let values: Vec<_> = inputs.iter().map(|v| v.value()).collect();
            for o in 0..outer {
                for v in &values {
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..][..chunk]);
                }
            }
        }
        let rg = self.is_recording() && inputs.iter().any(|v| v.requires_grad());
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat {
                inputs: inputs.iter().map(|v| v.id).collect(),
                axis,
            },
            rg,
        ))
    }
}
