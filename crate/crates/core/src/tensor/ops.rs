//! Forward rules (as `Graph` methods) and their vector-Jacobian products.

use std::sync::Arc;

use super::graph::{BnSaved, Graph, Op, RunningStats, Var, BN_EPS};
use super::kernels::{col2im, gemm, im2col, window_out, ConvGeom};
use super::{BnMode, Tensor};
use crate::error::{Error, Result};
use crate::faults::{self, Fault};
use crate::parallel;

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_tensor(src: &Tensor, perm: &[usize]) -> Tensor {
    let shape = src.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let data = src.data();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute preserves element count")
}

fn transpose_last2(src: &Tensor) -> Tensor {
    let r = src.rank();
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    permute_tensor(src, &perm)
}

/// (batch, m, k, n, rhs shared across batch)
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    let (batch, m, k, shared) = match a.len() {
        2 => (1, a[0], a[1], true),
        3 => (a[0], a[1], a[2], b.len() == 2),
        _ => return Err(Error::shape("matmul", format!("lhs must be rank 2 or 3, got {a:?}"))),
    };
    let (kb, n) = match (b.len(), shared) {
        (2, _) => (b[0], b[1]),
        (3, false) if b[0] == batch => (b[1], b[2]),
        _ => return Err(Error::shape("matmul", format!("incompatible operands {a:?} x {b:?}"))),
    };
    if kb != k {
        return Err(Error::shape("matmul", format!("inner dimensions differ: {a:?} x {b:?}")));
    }
    Ok((batch, m, k, n, shared))
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().zip(bv).for_each(|(x, y)| *x -= y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().zip(bv).for_each(|(x, y)| *x *= y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|t| t * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(v, Op::Mean(x))
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| if t > 0.0 { t } else { 0.0 });
        self.push(v, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let v = permute_tensor(self.value(x), perm);
        Ok(self.push(v, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let v = transpose_last2(self.value(x));
        Ok(self.push(v, Op::TransposeLast2(x)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// `[m,k]·[k,n]`, `[B,m,k]·[B,k,n]`, or `[B,m,k]·[k,n]` (shared rhs).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n, shared) = matmul_dims(self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let out_shape: Vec<usize> = if av.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let mut out = vec![0.0; batch * m * n];
        if shared {
            gemm(batch * m, k, n, av.data(), false, bv.data(), false, 0.0, &mut out);
        } else {
            let (ad, bd) = (av.data(), bv.data());
            parallel::for_each_chunk_mut(&mut out, m * n, |i, c| {
                gemm(m, k, n, &ad[i * m * k..], false, &bd[i * k * n..], false, 0.0, c);
            });
        }
        let v = Tensor::new(&out_shape, out)?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    /// `x·w + b` for `x:[N,D]`, `w:[D,M]`, `b:[M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || bs[0] != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, d, m, self.value(x).data(), false, self.value(w).data(), false, 0.0, &mut out);
        let bias = self.value(b).data();
        for row in out.chunks_mut(m) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let v = Tensor::new(&[n, m], out)?;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?} and weight {ws:?} must both be rank 4")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels C={c} (input {xs:?}) != weight in-channels {wc} (weight {ws:?})"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {k} filters", self.shape(b))));
            }
        }
        let (Some(out_h), Some(out_w)) = (window_out(h, kh, stride, padding), window_out(wd, kw, stride, padding))
        else {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd}+{padding}")));
        };
        let geom = ConvGeom { channels: c, height: h, width: wd, kh, kw, stride, padding, out_h, out_w };
        let plane = out_h * out_w;
        let mut out = vec![0.0; n * k * plane];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            let img = c * h * wd;
            parallel::for_each_chunk_mut(&mut out, k * plane, |i, o| {
                let src = &xd[i * img..(i + 1) * img];
                if geom.is_pointwise() {
                    gemm(k, c, plane, wdat, false, src, false, 0.0, o);
                } else {
                    let mut col = vec![0.0; geom.col_rows() * plane];
                    im2col(src, &geom, &mut col);
                    gemm(k, geom.col_rows(), plane, wdat, false, &col, false, 0.0, o);
                }
                if let Some(bias) = bias {
                    for (f, chunk) in o.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += bias[f]);
                    }
                }
            });
        }
        let v = Tensor::new(&[n, k, out_h, out_w], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }))
    }

    /// Max pooling with implicit `-inf` padding; ties resolve to the first index in scan order.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("max_pool2d", format!("input {xs:?} must be rank 4")));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("max_pool2d", format!("kernel {kernel} and stride {stride} must be positive")));
        }
        if padding >= kernel {
            return Err(Error::invalid("max_pool2d", format!("padding {padding} must be smaller than kernel {kernel}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (Some(oh), Some(ow)) = (window_out(h, kernel, stride, padding), window_out(w, kernel, stride, padding))
        else {
            return Err(Error::shape("max_pool2d", format!("kernel {kernel} larger than input {h}x{w}")));
        };
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let pad = padding as isize;
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if best_i == usize::MAX || data[idx] > best {
                                best = data[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let v = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(v, Op::MaxPool2d { x, argmax }))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("avg_pool2d", format!("input {xs:?} must be rank 4")));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("avg_pool2d", format!("kernel {kernel} and stride {stride} must be positive")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (Some(oh), Some(ow)) = (window_out(h, kernel, stride, 0), window_out(w, kernel, stride, 0)) else {
            return Err(Error::shape("avg_pool2d", format!("kernel {kernel} larger than input {h}x{w}")));
        };
        let data = self.value(x).data();
        let norm = 1.0 / (kernel * kernel) as f64;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ky in 0..kernel {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        s += data[row..row + kernel].iter().sum::<f64>();
                    }
                    out.push(s * norm);
                }
            }
        }
        let v = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(v, Op::AvgPool2d { x, kernel, stride }))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {xs:?} must be rank 4")));
        }
        let plane = xs[2] * xs[3];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let v = Tensor::new(&[xs[0], xs[1]], out)?;
        Ok(self.push(v, Op::GlobalAvgPool(x)))
    }

    /// Per-channel normalization of `[N,C,H,W]`.
    ///
    /// In [`BnMode::Train`] the batch statistics are used and recorded on the
    /// node (see [`Graph::bn_batch_stats`]); `running` is only read in eval mode.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm2d", format!("input {xs:?} must be rank 4")));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.mean.len() != c {
            return Err(Error::shape(
                "batch_norm2d",
                format!("{c} channels vs gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let count = n * plane;
        if mode == BnMode::Train && count < 2 {
            return Err(Error::invalid("batch_norm2d", format!("train mode needs N*H*W >= 2, got {count}")));
        }
        let data = self.value(x).data();
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += data[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for i in 0..n {
                        q += data[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count as f64;
                }
                (mean, var)
            }
            BnMode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                for j in r {
                    let xh = (data[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + b[ch];
                }
            }
        }
        let batch = (mode == BnMode::Train).then_some((mean, var, count));
        let v = Tensor::new(&xs, out)?;
        Ok(self.push(v, Op::BatchNorm2d { x, gamma, beta, saved: BnSaved { xhat, inv_std, batch } }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let axis = if faults::active(Fault::SoftmaxAxis) && axis > 0 { axis - 1 } else { axis };
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mx = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - mx).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[at(a)] /= z;
                }
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` for `logits:[N,C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", format!("logits {shape:?} for {} labels", labels.len())));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[label];
        }
        let v = Tensor::scalar(loss / n as f64);
        Ok(self.push(v, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// `out[b,i,j] = x[b,i,index[i*width+j]]` for `x:[B,n,m]`, giving `[B,n,width]`.
    pub fn gather_cols(&mut self, x: Var, index: Arc<[usize]>, width: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || index.len() != xs[1] * width {
            return Err(Error::shape("gather_cols", format!("input {xs:?} with {} indices, width {width}", index.len())));
        }
        if let Some(bad) = index.iter().find(|&&j| j >= xs[2]) {
            return Err(Error::shape("gather_cols", format!("index {bad} out of range for {} columns", xs[2])));
        }
        let (b, n, m) = (xs[0], xs[1], xs[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * n * width);
        for bi in 0..b {
            for i in 0..n {
                let row = &src[(bi * n + i) * m..(bi * n + i + 1) * m];
                out.extend(index[i * width..(i + 1) * width].iter().map(|&j| row[j]));
            }
        }
        let v = Tensor::new(&[b, n, width], out)?;
        Ok(self.push(v, Op::GatherCols { x, index }))
    }

    /// Adjoint of [`Graph::gather_cols`]: `out[b,i,index[i*w+j]] += x[b,i,j]`, giving `[B,n,m]`.
    pub fn scatter_cols(&mut self, x: Var, index: Arc<[usize]>, m: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || index.len() != xs[1] * xs[2] || index.iter().any(|&j| j >= m) {
            return Err(Error::shape("scatter_cols", format!("input {xs:?} with {} indices into {m}", index.len())));
        }
        let v = scatter(self.value(x), &index, m);
        let width = xs[2];
        Ok(self.push(v, Op::ScatterCols { x, index, width }))
    }

    pub(crate) fn backward_node(&self, i: usize, grad: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let gd = grad.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Sub(a, b) => vec![(*a, grad.clone()), (*b, grad.map(|v| -v))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = zip_map(grad, bv, |g, y| g * y);
                let gb = zip_map(grad, av, |g, x| g * x);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, c) => vec![(*x, grad.map(|v| v * c))],
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x), gd[0]))],
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                vec![(*x, Tensor::full(self.shape(*x), gd[0] / n))]
            }
            Op::Relu(x) => vec![(*x, zip_map(grad, self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 }))],
            Op::Reshape(x) => vec![(*x, grad.clone().reshape(self.shape(*x)).expect("reshape grad"))],
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                vec![(*x, permute_tensor(grad, &inv))]
            }
            Op::TransposeLast2(x) => vec![(*x, transpose_last2(grad))],
            Op::Concat { xs, axis } => {
                let shape = grad.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut start = 0;
                let mut res = Vec::with_capacity(xs.len());
                for &x in xs {
                    let xshape = self.shape(x);
                    let len = xshape[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let off = (o * total + start) * inner;
                        part.extend_from_slice(&gd[off..off + len * inner]);
                    }
                    start += len;
                    res.push((x, Tensor::new(xshape, part).expect("concat grad")));
                }
                res
            }
            Op::Matmul { a, b } => self.matmul_backward(*a, *b, grad),
            Op::Linear { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[1];
                let mut res = Vec::new();
                if self.needs_grad(*x) {
                    let mut gx = vec![0.0; n * d];
                    gemm(n, m, d, gd, false, self.value(*w).data(), true, 0.0, &mut gx);
                    res.push((*x, Tensor::new(&[n, d], gx).unwrap()));
                }
                if self.needs_grad(*w) {
                    let mut gw = vec![0.0; d * m];
                    gemm(d, n, m, self.value(*x).data(), true, gd, false, 0.0, &mut gw);
                    res.push((*w, Tensor::new(&[d, m], gw).unwrap()));
                }
                if self.needs_grad(*b) {
                    let mut gb = vec![0.0; m];
                    for row in gd.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    res.push((*b, Tensor::new(&[m], gb).unwrap()));
                }
                res
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, grad),
            Op::MaxPool2d { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let d = gx.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += gd[o];
                }
                vec![(*x, gx)]
            }
            Op::AvgPool2d { x, kernel, stride } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (grad.shape()[2], grad.shape()[3]);
                let norm = 1.0 / (kernel * kernel) as f64;
                let mut gx = Tensor::zeros(xs);
                let d = gx.data_mut();
                for p in 0..xs[0] * xs[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gd[(p * oh + oy) * ow + ox] * norm;
                            for ky in 0..*kernel {
                                let row = p * h * w + (oy * stride + ky) * w + ox * stride;
                                d[row..row + kernel].iter_mut().for_each(|v| *v += g);
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let mut gx = Vec::with_capacity(xs.iter().product());
                for &g in gd {
                    gx.extend(std::iter::repeat_n(g / plane as f64, plane));
                }
                vec![(*x, Tensor::new(xs, gx).unwrap())]
            }
            Op::BatchNorm2d { x, gamma, beta, saved } => self.bn_backward(*x, *gamma, *beta, saved, grad),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(grad.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| gd[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = y[at(a)] * (gd[at(a)] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::new(grad.shape(), gx).unwrap())]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = gd[0] / labels.len() as f64;
                let mut gx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * c + l] -= 1.0;
                }
                gx.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, Tensor::new(self.shape(*logits), gx).unwrap())]
            }
            Op::GatherCols { x, index, .. } => {
                let m = self.shape(*x)[2];
                vec![(*x, scatter(grad, index, m))]
            }
            Op::ScatterCols { x, index, width } => {
                let gs = grad.shape();
                let (b, n, m) = (gs[0], gs[1], gs[2]);
                let mut out = Vec::with_capacity(b * n * width);
                for bi in 0..b {
                    for r in 0..n {
                        let row = &gd[(bi * n + r) * m..(bi * n + r + 1) * m];
                        out.extend(index[r * width..(r + 1) * width].iter().map(|&j| row[j]));
                    }
                }
                vec![(*x, Tensor::new(&[b, n, *width], out).unwrap())]
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, grad: &Tensor) -> Vec<(Var, Tensor)> {
        let (batch, m, k, n, shared) = matmul_dims(self.shape(a), self.shape(b)).expect("checked in forward");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let gd = grad.data();
        let mut res = Vec::new();
        if self.needs_grad(a) {
            let mut ga = vec![0.0; batch * m * k];
            if shared {
                gemm(batch * m, n, k, gd, false, bv, true, 0.0, &mut ga);
            } else {
                parallel::for_each_chunk_mut(&mut ga, m * k, |i, c| {
                    gemm(m, n, k, &gd[i * m * n..], false, &bv[i * k * n..], true, 0.0, c);
                });
            }
            res.push((a, Tensor::new(self.shape(a), ga).unwrap()));
        }
        if self.needs_grad(b) {
            let gb = if shared {
                let mut gb = vec![0.0; k * n];
                gemm(k, batch * m, n, av, true, gd, false, 0.0, &mut gb);
                gb
            } else {
                let mut gb = vec![0.0; batch * k * n];
                parallel::for_each_chunk_mut(&mut gb, k * n, |i, c| {
                    gemm(k, m, n, &av[i * m * k..], true, &gd[i * m * n..], false, 0.0, c);
                });
                gb
            };
            res.push((b, Tensor::new(self.shape(b), gb).unwrap()));
        }
        res
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, grad: &Tensor) -> Vec<(Var, Tensor)> {
        let xs = self.shape(x);
        let n = xs[0];
        let k = self.shape(w)[0];
        let plane = geom.out_h * geom.out_w;
        let rows = geom.col_rows();
        let img = geom.channels * geom.height * geom.width;
        let (xd, wd, gd) = (self.value(x).data(), self.value(w).data(), grad.data());
        let mut res = Vec::new();
        if self.needs_grad(x) {
            let mut gx = vec![0.0; n * img];
            parallel::for_each_chunk_mut(&mut gx, img, |i, dst| {
                let dy = &gd[i * k * plane..(i + 1) * k * plane];
                if geom.is_pointwise() {
                    gemm(rows, k, plane, wd, true, dy, false, 0.0, dst);
                } else {
                    let mut dcol = vec![0.0; rows * plane];
                    gemm(rows, k, plane, wd, true, dy, false, 0.0, &mut dcol);
                    col2im(&dcol, geom, dst);
                }
            });
            res.push((x, Tensor::new(xs, gx).unwrap()));
        }
        if self.needs_grad(w) {
            let partials = parallel::map_range(n, |i| {
                let dy = &gd[i * k * plane..(i + 1) * k * plane];
                let src = &xd[i * img..(i + 1) * img];
                let mut gw = vec![0.0; k * rows];
                if geom.is_pointwise() {
                    gemm(k, plane, rows, dy, false, src, true, 0.0, &mut gw);
                } else {
                    let mut col = vec![0.0; rows * plane];
                    im2col(src, geom, &mut col);
                    gemm(k, plane, rows, dy, false, &col, true, 0.0, &mut gw);
                }
                gw
            });
            let mut gw = vec![0.0; k * rows];
            for p in partials {
                gw.iter_mut().zip(p).for_each(|(s, v)| *s += v);
            }
            res.push((w, Tensor::new(self.shape(w), gw).unwrap()));
        }
        if let Some(b) = b.filter(|b| self.needs_grad(*b)) {
            let mut gb = vec![0.0; k];
            for (j, chunk) in gd.chunks(plane).enumerate() {
                gb[j % k] += chunk.iter().sum::<f64>();
            }
            res.push((b, Tensor::new(&[k], gb).unwrap()));
        }
        res
    }

    fn bn_backward(&self, x: Var, gamma: Var, beta: Var, saved: &BnSaved, grad: &Tensor) -> Vec<(Var, Tensor)> {
        let xs = self.shape(x);
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let count = (n * plane) as f64;
        let gd = grad.data();
        let g = self.value(gamma).data();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                for j in (i * c + ch) * plane..(i * c + ch + 1) * plane {
                    sum_dy[ch] += gd[j];
                    sum_dy_xhat[ch] += gd[j] * saved.xhat[j];
                }
            }
        }
        let mut res = Vec::new();
        if self.needs_grad(x) {
            let mut gx = vec![0.0; gd.len()];
            for i in 0..n {
                for ch in 0..c {
                    let scale = g[ch] * saved.inv_std[ch];
                    for j in (i * c + ch) * plane..(i * c + ch + 1) * plane {
                        gx[j] = if saved.batch.is_some() {
                            scale * (gd[j] - sum_dy[ch] / count - saved.xhat[j] * sum_dy_xhat[ch] / count)
                        } else {
                            scale * gd[j]
                        };
                    }
                }
            }
            res.push((x, Tensor::new(xs, gx).unwrap()));
        }
        if self.needs_grad(gamma) {
            res.push((gamma, Tensor::new(&[c], sum_dy_xhat).unwrap()));
        }
        if self.needs_grad(beta) {
            res.push((beta, Tensor::new(&[c], sum_dy).unwrap()));
        }
        res
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map shapes")
}

fn scatter(src: &Tensor, index: &[usize], m: usize) -> Tensor {
    let s = src.shape();
    let (b, n, width) = (s[0], s[1], s[2]);
    let d = src.data();
    let mut out = vec![0.0; b * n * m];
    for bi in 0..b {
        for i in 0..n {
            let dst = &mut out[(bi * n + i) * m..(bi * n + i + 1) * m];
            let row = &d[(bi * n + i) * width..(bi * n + i + 1) * width];
            for (j, &col) in index[i * width..(i + 1) * width].iter().enumerate() {
                dst[col] += row[j];
            }
        }
    }
    Tensor::new(&[b, n, m], out).expect("scatter shape")
}
