//! Elementwise, shape, reduction, matrix and normalization ops.

use super::{numel, strides, Element, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            first_mismatch(a.shape(), b.shape()),
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn first_mismatch(a: &[usize], b: &[usize]) -> String {
    if a.len() != b.len() {
        return format!("rank ({} vs {})", a.len(), b.len());
    }
    let i = a.iter().zip(b).position(|(x, y)| x != y).unwrap_or(0);
    format!("axis {i}")
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis}"), format!("tensor has rank {}", shape.len())));
    }
    Ok(())
}

/// (outer, len, inner) split of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<T: Element> Tensor<T> {
    fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, y| {
                vec![Some(
                    g.iter()
                        .zip(x.data())
                        .zip(y)
                        .map(|((&g, &x), &y)| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let ga = a.requires_grad().then(|| g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect());
                let gb = b.requires_grad().then(|| g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        self.unary(|x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(|x| x + c, |_, _| T::one())
    }

    /// `self + other` where `other`'s shape is a suffix of `self`'s shape and is
    /// repeated over the leading axes.
    pub fn add_broadcast(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (s, o) = (self.shape(), other.shape());
        if o.len() > s.len() || s[s.len() - o.len()..] != *o {
            return Err(Error::dim(
                "add_broadcast",
                "trailing axes",
                format!("{:?} is not a suffix of {:?}", o, s),
            ));
        }
        let block = other.numel().max(1);
        let data: Vec<T> = self
            .data()
            .chunks(block)
            .flat_map(|c| c.iter().zip(other.data()).map(|(&a, &b)| a + b))
            .collect();
        Ok(Tensor::from_op(
            s.to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let mut gb = vec![T::zero(); block];
                for c in g.chunks(block) {
                    gb.iter_mut().zip(c).for_each(|(a, &b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(|x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(|x| x.abs(), |x, _| if x > T::zero() { T::one() } else if x < T::zero() { -T::one() } else { T::zero() })
    }

    /// Huber-style smooth L1 with transition `beta`: `0.5 x^2 / beta` inside, `|x| - 0.5 beta` outside.
    pub fn smooth_l1(&self, beta: T) -> Tensor<T> {
        let half = T::of(0.5);
        self.unary(
            move |x| if x.abs() < beta { half * x * x / beta } else { x.abs() - half * beta },
            move |x, _| if x.abs() < beta { x / beta } else { x.signum() },
        )
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(Vec::new(), vec![total], vec![self.clone()], Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().mul_scalar(T::one() / T::of(self.numel().max(1) as f64))
    }

    /// View with a new shape of the same element count (shares storage).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {:?}", self.shape(), shape)));
        }
        Ok(self.share_as(shape.to_vec(), vec![self.clone()], Box::new(|g, _| vec![Some(g.to_vec())])))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", "axes", format!("{:?} is not a permutation of rank {}", axes, rank)));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(self.data(), self.shape(), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let shape_out = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(permute_data(g, &shape_out, &inverse))]),
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        check_axis("concat", first.shape(), axis)?;
        for p in parts {
            if p.rank() != first.rank()
                || p.shape().iter().zip(first.shape()).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(
                    "concat",
                    first_mismatch(first.shape(), p.shape()),
                    format!("{:?} vs {:?}", first.shape(), p.shape()),
                ));
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        Ok(Tensor::from_op(
            shape,
            data,
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g, _| {
                let mut out: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (buf, &l) in out.iter_mut().zip(&lens) {
                        buf.extend_from_slice(&g[pos..pos + l * inner]);
                        pos += l * inner;
                    }
                }
                out.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        check_axis("narrow", self.shape(), axis)?;
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        if start + len > n {
            return Err(Error::dim("narrow", format!("axis {axis}"), format!("range {}..{} exceeds extent {}", start, start + len, n)));
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gi[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gi)]
            }),
        ))
    }

    /// Plain 2-D product `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::dim("matmul", "rank", "expects rank-2 operands"));
        }
        let a = self.reshape(&[1, self.shape()[0], self.shape()[1]])?;
        let b = other.reshape(&[1, other.shape()[0], other.shape()[1]])?;
        let out = a.bmm(&b, false)?;
        let s = out.shape().to_vec();
        out.reshape(&s[1..])
    }

    /// Batched product `[bt, m, k] x [bt, k, n]`, or `[bt, m, k] x [bt, n, k]^T`
    /// when `transpose_rhs` is set.
    pub fn bmm(&self, other: &Tensor<T>, transpose_rhs: bool) -> Result<Tensor<T>> {
        if self.rank() != 3 || other.rank() != 3 {
            return Err(Error::dim("bmm", "rank", "expects rank-3 operands"));
        }
        let (bt, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (bt2, r1, r2) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        let (kb, n) = if transpose_rhs { (r2, r1) } else { (r1, r2) };
        if bt != bt2 {
            return Err(Error::dim("bmm", "axis 0 (batch)", format!("{} vs {}", bt, bt2)));
        }
        if kb != k {
            return Err(Error::dim("bmm", "contraction axis", format!("{} vs {}", k, kb)));
        }
        // Row/column strides of the right operand viewed as k x n.
        let b_strides: (isize, isize) = if transpose_rhs { (1, k as isize) } else { (n as isize, 1) };
        let mut data = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &self.data()[i * m * k..],
                (k as isize, 1),
                &other.data()[i * k * n..],
                b_strides,
                T::zero(),
                &mut data[i * m * n..],
                (n as isize, 1),
            );
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![bt, m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let ga = a.requires_grad().then(|| {
                    // dA = G B^T : [m, n] x [n, k]
                    let bt_strides = (b_strides.1, b_strides.0);
                    let mut ga = vec![T::zero(); bt * m * k];
                    for i in 0..bt {
                        T::gemm(m, n, k, T::one(), &g[i * m * n..], (n as isize, 1), &b.data()[i * k * n..], bt_strides, T::zero(), &mut ga[i * m * k..], (k as isize, 1));
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); bt * k * n];
                    for i in 0..bt {
                        if transpose_rhs {
                            // dB (n x k) = G^T A
                            T::gemm(n, m, k, T::one(), &g[i * m * n..], (1, n as isize), &a.data()[i * m * k..], (k as isize, 1), T::zero(), &mut gb[i * k * n..], (k as isize, 1));
                        } else {
                            // dB (k x n) = A^T G
                            T::gemm(k, m, n, T::one(), &a.data()[i * m * k..], (1, k as isize), &g[i * m * n..], (n as isize, 1), T::zero(), &mut gb[i * k * n..], (n as isize, 1));
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map over the last axis: `x W^T + b` with `W: [out, in]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let fan_in = *self.shape().last().ok_or_else(|| Error::dim("linear", "rank", "scalar input"))?;
        if weight.rank() != 2 || weight.shape()[1] != fan_in {
            return Err(Error::dim("linear", "last axis", format!("input {:?} vs weight {:?}", self.shape(), weight.shape())));
        }
        let out_f = weight.shape()[0];
        if let Some(b) = bias {
            if b.shape() != [out_f] {
                return Err(Error::dim("linear", "bias", format!("expected [{}], got {:?}", out_f, b.shape())));
            }
        }
        let rows = self.numel() / fan_in.max(1);
        let mut data = vec![T::zero(); rows * out_f];
        T::gemm(rows, fan_in, out_f, T::one(), self.data(), (fan_in as isize, 1), weight.data(), (1, fan_in as isize), T::zero(), &mut data, (out_f as isize, 1));
        if let Some(b) = bias {
            for row in data.chunks_mut(out_f) {
                row.iter_mut().zip(b.data()).for_each(|(y, &b)| *y += b);
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        let (x, w) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            shape,
            data,
            parents,
            Box::new(move |g, _| {
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); rows * fan_in];
                    T::gemm(rows, out_f, fan_in, T::one(), g, (out_f as isize, 1), w.data(), (fan_in as isize, 1), T::zero(), &mut gx, (fan_in as isize, 1));
                    gx
                });
                let gw = w.requires_grad().then(|| {
                    let mut gw = vec![T::zero(); out_f * fan_in];
                    T::gemm(out_f, rows, fan_in, T::one(), g, (1, out_f as isize), x.data(), (fan_in as isize, 1), T::zero(), &mut gw, (fan_in as isize, 1));
                    gw
                });
                let mut out = vec![gx, gw];
                if has_bias {
                    let mut gb = vec![T::zero(); out_f];
                    for row in g.chunks(out_f) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    out.push(Some(gb));
                }
                out
            }),
        ))
    }

    /// Numerically stabilized softmax along `axis`. NaN inputs propagate.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        let mut data = vec![T::zero(); self.numel()];
        softmax_into(self.data(), &mut data, outer, n, inner);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: T = (0..n).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                        for k in 0..n {
                            let idx = base + k * inner;
                            gx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Expected index under a softmax along `axis`: `sum_d d * softmax(x)_d`.
    /// The reduced axis is kept with extent 1.
    pub fn soft_argmin(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("soft_argmin", self.shape(), axis)?;
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        let mut prob = vec![T::zero(); self.numel()];
        softmax_into(self.data(), &mut prob, outer, n, inner);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                data[o * inner + i] = (0..n).map(|k| T::of(k as f64) * prob[base + k * inner]).sum();
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![T::zero(); prob.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let (go, mean) = (g[o * inner + i], y[o * inner + i]);
                        for k in 0..n {
                            let idx = base + k * inner;
                            gx[idx] = go * prob[idx] * (T::of(k as f64) - mean);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalize over the last axis, then scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let c = *self.shape().last().ok_or_else(|| Error::dim("layer_norm", "rank", "scalar input"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim("layer_norm", "last axis", format!("features {} vs gamma {:?}", c, gamma.shape())));
        }
        let rows = self.numel() / c;
        let groups: Vec<Vec<usize>> = (0..rows).map(|r| (r * c..(r + 1) * c).collect()).collect();
        let channel: Vec<usize> = (0..self.numel()).map(|i| i % c).collect();
        Ok(normalize(self, gamma, beta, eps, groups, channel, NormStats::Batch).0)
    }

    /// Batch normalization over every axis except 1 using batch statistics.
    /// Returns the output with per-channel mean and biased variance.
    pub fn batch_norm_train(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let (groups, channel) = bn_layout(self, gamma, beta)?;
        let (out, mean, var) = normalize(self, gamma, beta, eps, groups, channel, NormStats::Batch);
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&self, gamma: &Tensor<T>, beta: &Tensor<T>, mean: &[T], var: &[T], eps: T) -> Result<Tensor<T>> {
        let (groups, channel) = bn_layout(self, gamma, beta)?;
        Ok(normalize(self, gamma, beta, eps, groups, channel, NormStats::Fixed(mean.to_vec(), var.to_vec())).0)
    }
}

fn bn_layout<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if x.rank() < 2 {
        return Err(Error::dim("batch_norm", "rank", "expects [N, C, ...]"));
    }
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim("batch_norm", "axis 1 (channels)", format!("{} vs gamma {:?}", c, gamma.shape())));
    }
    let n = x.shape()[0];
    let s = numel(&x.shape()[2..]);
    let mut groups = vec![Vec::with_capacity(n * s); c];
    let mut channel = vec![0; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            groups[ch].extend(base..base + s);
            channel[base..base + s].iter_mut().for_each(|v| *v = ch);
        }
    }
    Ok((groups, channel))
}

enum NormStats<T> {
    Batch,
    Fixed(Vec<T>, Vec<T>),
}

/// Shared normalization kernel. `groups[j]` lists flat indices normalized
/// together; `channel[i]` selects the affine parameter for element `i`.
fn normalize<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    groups: Vec<Vec<usize>>,
    channel: Vec<usize>,
    stats: NormStats<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let xd = x.data();
    let batch = matches!(stats, NormStats::Batch);
    let (mean, var) = match stats {
        NormStats::Batch => {
            let mut mean = Vec::with_capacity(groups.len());
            let mut var = Vec::with_capacity(groups.len());
            for idx in &groups {
                let cnt = T::of(idx.len() as f64);
                let m: T = idx.iter().map(|&i| xd[i]).sum::<T>() / cnt;
                let v: T = idx.iter().map(|&i| (xd[i] - m) * (xd[i] - m)).sum::<T>() / cnt;
                mean.push(m);
                var.push(v);
            }
            (mean, var)
        }
        NormStats::Fixed(m, v) => (m, v),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    for (j, idx) in groups.iter().enumerate() {
        for &i in idx {
            xhat[i] = (xd[i] - mean[j]) * inv_std[j];
        }
    }
    let (gd, bd) = (gamma.data(), beta.data());
    let data: Vec<T> = xhat.iter().zip(&channel).map(|(&h, &c)| h * gd[c] + bd[c]).collect();
    let (gamma_t, beta_t, x_t) = (gamma.clone(), beta.clone(), x.clone());
    let nparams = gamma.numel();
    let out = Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _| {
            let gd = gamma_t.data();
            let mut dgamma = vec![T::zero(); nparams];
            let mut dbeta = vec![T::zero(); nparams];
            for ((&gi, &h), &c) in g.iter().zip(&xhat).zip(&channel) {
                dgamma[c] += gi * h;
                dbeta[c] += gi;
            }
            let gx = x_t.requires_grad().then(|| {
                let mut gx = vec![T::zero(); g.len()];
                for (j, idx) in groups.iter().enumerate() {
                    if batch {
                        let cnt = T::of(idx.len() as f64);
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for &i in idx {
                            let dh = g[i] * gd[channel[i]];
                            s1 += dh;
                            s2 += dh * xhat[i];
                        }
                        let (m1, m2) = (s1 / cnt, s2 / cnt);
                        for &i in idx {
                            let dh = g[i] * gd[channel[i]];
                            gx[i] = inv_std[j] * (dh - m1 - xhat[i] * m2);
                        }
                    } else {
                        for &i in idx {
                            gx[i] = g[i] * gd[channel[i]] * inv_std[j];
                        }
                    }
                }
                gx
            });
            vec![gx, gamma_t.requires_grad().then_some(dgamma), beta_t.requires_grad().then_some(dbeta)]
        }),
    );
    (out, mean, var)
}

fn softmax_into<T: Element>(x: &[T], y: &mut [T], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n).map(|k| x[base + k * inner]).fold(T::neg_infinity(), |a, b| if b > a || b.is_nan() { b } else { a });
            let mut total = T::zero();
            for k in 0..n {
                let e = (x[base + k * inner] - max).exp();
                y[base + k * inner] = e;
                total += e;
            }
            for k in 0..n {
                y[base + k * inner] /= total;
            }
        }
    }
}

/// Row-major transpose of `data` (shape `shape`) so output axis `i` is input axis `axes[i]`.
pub(crate) fn permute_data<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    if rank == 0 {
        return data.to_vec();
    }
    let last = rank - 1;
    let (n_last, s_last) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        for j in 0..n_last {
            out.push(data[offset + j * s_last]);
        }
        // advance all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape, (0..numel(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_trivial_values() {
        let t = Tensor::<f64>::new(&[2], vec![0.0, 0.0]).unwrap().softmax(0).unwrap();
        assert_eq!(t.data(), &[0.5, 0.5]);
        let t = Tensor::<f64>::new(&[2], vec![3f64.ln(), 0.0]).unwrap().softmax(0).unwrap();
        assert!((t.data()[0] - 0.75).abs() < 1e-12 && (t.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_unit_sum() {
        let x = rand_t(&[3, 5, 4], 1);
        let a = x.softmax(1).unwrap();
        let b = x.add_scalar(17.5).softmax(1).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-6);
        }
        for o in 0..3 {
            for i in 0..4 {
                let s: f64 = (0..5).map(|k| a.data()[o * 20 + k * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_nan_propagates() {
        let t = Tensor::<f32>::new(&[3], vec![0.0, f32::NAN, 1.0]).unwrap().softmax(0).unwrap();
        assert!(t.data().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn soft_argmin_cases() {
        let mut logits = vec![0.0; 8];
        logits[5] = 50.0;
        let t = Tensor::<f64>::new(&[8], logits).unwrap().soft_argmin(0).unwrap();
        assert!((t.item() - 5.0).abs() < 1e-3);
        let t = Tensor::<f64>::zeros(&[48]).soft_argmin(0).unwrap();
        assert!((t.item() - 23.5).abs() < 1e-12);
        let t = Tensor::<f64>::new(&[2], vec![0.0, 3f64.ln()]).unwrap().soft_argmin(0).unwrap();
        assert!((t.item() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn permute_round_trip() {
        let x = rand_t(&[2, 3, 4, 5], 3);
        let y = x.permute(&[2, 0, 3, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 5, 3]);
        // y[k, i, l, j] == x[i, j, k, l]
        assert_eq!(y.data()[((1 * 2 + 1) * 5 + 4) * 3 + 2], x.data()[((1 * 3 + 2) * 4 + 1) * 5 + 4]);
        let z = y.permute(&[1, 3, 0, 2]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn shape_mismatch_names_axis() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 4]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
    }

    #[test]
    fn gradients_of_elementwise_and_shape_ops() {
        let x = rand_t(&[2, 3, 4], 5);
        let y = rand_t(&[2, 3, 4], 6);
        let bias = rand_t(&[3, 4], 7);
        let r = grad_check(
            |v| {
                let a = v[0].mul(&v[1])?.tanh().add_broadcast(&v[2])?.sigmoid();
                let b = v[0].smooth_l1(0.7).sub(&v[1].abs())?;
                let c = Tensor::concat(&[&a, &b], 1)?.permute(&[2, 0, 1])?.narrow(2, 1, 4)?;
                Ok(c.relu().add_scalar(0.1).mul(&c)?.sum())
            },
            &[x, y, bias],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn gradients_of_matrix_ops() {
        let a = rand_t(&[3, 4, 5], 8);
        let b = rand_t(&[3, 5, 2], 9);
        let bt = rand_t(&[3, 2, 5], 10);
        let w = rand_t(&[6, 2], 11);
        let wb = rand_t(&[6], 12);
        let r = grad_check(
            |v| {
                let p = v[0].bmm(&v[1], false)?;
                let q = v[0].bmm(&v[2], true)?;
                let l = p.add(&q)?.linear(&v[3], Some(&v[4]))?;
                Ok(l.mul(&l)?.sum())
            },
            &[a, b, bt, w, wb],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn gradients_of_softmax_and_norms() {
        let x = rand_t(&[2, 3, 5], 13);
        let g = rand_t(&[3], 14);
        let b = rand_t(&[3], 15);
        let lg = rand_t(&[5], 16);
        let lb = rand_t(&[5], 17);
        let w = rand_t(&[2, 3, 5], 18);
        let r = grad_check(
            |v| {
                let s = v[0].softmax(2)?.mul(&v[5])?;
                let (bn, _, _) = v[0].batch_norm_train(&v[1], &v[2], 1e-5)?;
                let be = v[0].batch_norm_eval(&v[1], &v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
                let ln = v[0].layer_norm(&v[3], &v[4], 1e-5)?;
                let sa = v[0].soft_argmin(1)?;
                Ok(s.add(&bn.mul(&v[5])?)?.add(&ln.mul(&be)?)?.sum().add(&sa.mul(&sa)?.sum())?)
            },
            &[x, g, b, lg, lb, w],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn gradients_of_smoothl1_near_transition() {
        let x = Tensor::<f64>::new(&[4], vec![0.5, -0.3, 1.7, -2.2]).unwrap();
        let r = grad_check(|v| Ok(v[0].smooth_l1(1.0).sum()), &[x], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6);
        let x = Tensor::<f64>::full(&[1], 0.5);
        assert!((x.smooth_l1(1.0).item() - 0.125).abs() < 1e-15);
    }
}
