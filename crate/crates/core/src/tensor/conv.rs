//! 2-D and 3-D convolution by im2col + GEMM. Zero padding, per-axis stride.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

const AXES: [&str; 3] = ["depth", "height", "width"];

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn in_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

/// Output positions `o` whose source `o * stride + k - pad` lies in `[0, n)`.
fn valid_range(n: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n + pad > k { ((n + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Element>(input: &[T], g: &Geometry, col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output;
    let p = g.out_len();
    let mut row = 0;
    for c in 0..g.channels {
        for a in 0..kd {
            let (z0, z1) = valid_range(id, od, a, sd, pd);
            for b in 0..kh {
                let (y0, y1) = valid_range(ih, oh, b, sh, ph);
                for e in 0..kw {
                    let (x0, x1) = valid_range(iw, ow, e, sw, pw);
                    let dst = &mut col[row * p..(row + 1) * p];
                    dst.fill(T::zero());
                    for z in z0..z1 {
                        let iz = z * sd + a - pd;
                        for y in y0..y1 {
                            let iy = y * sh + b - ph;
                            let src = ((c * id + iz) * ih + iy) * iw;
                            let d = (z * oh + y) * ow;
                            if sw == 1 {
                                let ix0 = x0 + e - pw;
                                dst[d + x0..d + x1].copy_from_slice(&input[src + ix0..src + ix0 + (x1 - x0)]);
                            } else {
                                for x in x0..x1 {
                                    dst[d + x] = input[src + x * sw + e - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &Geometry, out: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output;
    let p = g.out_len();
    let mut row = 0;
    for c in 0..g.channels {
        for a in 0..kd {
            let (z0, z1) = valid_range(id, od, a, sd, pd);
            for b in 0..kh {
                let (y0, y1) = valid_range(ih, oh, b, sh, ph);
                for e in 0..kw {
                    let (x0, x1) = valid_range(iw, ow, e, sw, pw);
                    let src_row = &col[row * p..(row + 1) * p];
                    for z in z0..z1 {
                        let iz = z * sd + a - pd;
                        for y in y0..y1 {
                            let iy = y * sh + b - ph;
                            let dst = ((c * id + iz) * ih + iy) * iw;
                            let s = (z * oh + y) * ow;
                            for x in x0..x1 {
                                out[dst + x * sw + e - pw] += src_row[s + x];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// 3-D convolution. `input: [N, C, D, H, W]`, `weight: [O, C, kd, kh, kw]`,
/// optional `bias: [O]`. Output extents follow
/// `floor((n + 2 * pad - k) / stride) + 1` per axis.
pub fn conv3d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor<T>> {
    if input.rank() != 5 {
        return Err(Error::dim("conv3d", "rank", format!("input must be [N, C, D, H, W], got {:?}", input.shape())));
    }
    if weight.rank() != 5 {
        return Err(Error::dim("conv3d", "rank", format!("kernel must be [O, C, kd, kh, kw], got {:?}", weight.shape())));
    }
    let s = input.shape();
    let (n, c) = (s[0], s[1]);
    let ws = weight.shape();
    let o = ws[0];
    if ws[1] != c {
        return Err(Error::dim("conv3d", "channels (axis 1)", format!("input has {} channels, kernel expects {}", c, ws[1])));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::dim("conv3d", "bias", format!("expected [{}], got {:?}", o, b.shape())));
        }
    }
    let mut output = [0; 3];
    for ax in 0..3 {
        if stride[ax] == 0 {
            return Err(Error::Config(format!("conv3d: stride along {} must be >= 1", AXES[ax])));
        }
        let padded = s[2 + ax] + 2 * padding[ax];
        if ws[2 + ax] > padded || ws[2 + ax] == 0 {
            return Err(Error::dim(
                "conv3d",
                AXES[ax],
                format!("kernel extent {} exceeds padded input extent {}", ws[2 + ax], padded),
            ));
        }
        output[ax] = (padded - ws[2 + ax]) / stride[ax] + 1;
    }
    let g = Geometry {
        channels: c,
        input: [s[2], s[3], s[4]],
        kernel: [ws[2], ws[3], ws[4]],
        stride,
        padding,
        output,
    };
    let (rows, p, in_len) = (g.col_rows(), g.out_len(), g.in_len());
    let mut data = vec![T::zero(); n * o * p];
    let x = input.data();
    let w = weight.data();
    data.par_chunks_mut(o * p).enumerate().for_each(|(bi, out)| {
        let xin = &x[bi * in_len..(bi + 1) * in_len];
        let owned;
        let col: &[T] = if g.pointwise() {
            xin
        } else {
            let mut buf = vec![T::zero(); rows * p];
            im2col(xin, &g, &mut buf);
            owned = buf;
            &owned
        };
        T::gemm(o, rows, p, T::one(), w, (rows as isize, 1), col, (p as isize, 1), T::zero(), out, (p as isize, 1));
        if let Some(b) = bias {
            for (oc, chunk) in out.chunks_mut(p).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    });

    let (xt, wt) = (input.clone(), weight.clone());
    let has_bias = bias.is_some();
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![n, o, output[0], output[1], output[2]],
        data,
        parents,
        Box::new(move |grad, _| {
            let x = xt.data();
            let w = wt.data();
            let gx = xt.requires_grad().then(|| {
                let mut gx = vec![T::zero(); n * in_len];
                gx.par_chunks_mut(in_len).enumerate().for_each(|(bi, gxi)| {
                    let go = &grad[bi * o * p..(bi + 1) * o * p];
                    if g.pointwise() {
                        T::gemm(rows, o, p, T::one(), w, (1, rows as isize), go, (p as isize, 1), T::zero(), gxi, (p as isize, 1));
                    } else {
                        let mut dcol = vec![T::zero(); rows * p];
                        T::gemm(rows, o, p, T::one(), w, (1, rows as isize), go, (p as isize, 1), T::zero(), &mut dcol, (p as isize, 1));
                        col2im(&dcol, &g, gxi);
                    }
                });
                gx
            });
            let gw = wt.requires_grad().then(|| {
                let mut gw = vec![T::zero(); o * rows];
                let mut buf = if g.pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
                for bi in 0..n {
                    let xin = &x[bi * in_len..(bi + 1) * in_len];
                    let col: &[T] = if g.pointwise() {
                        xin
                    } else {
                        im2col(xin, &g, &mut buf);
                        &buf
                    };
                    let go = &grad[bi * o * p..(bi + 1) * o * p];
                    T::gemm(o, p, rows, T::one(), go, (p as isize, 1), col, (1, p as isize), T::one(), &mut gw, (rows as isize, 1));
                }
                gw
            });
            let mut out = vec![gx, gw];
            if has_bias {
                let mut gb = vec![T::zero(); o];
                for bi in 0..n {
                    for (oc, v) in gb.iter_mut().enumerate() {
                        let base = (bi * o + oc) * p;
                        *v += grad[base..base + p].iter().copied().sum::<T>();
                    }
                }
                out.push(Some(gb));
            }
            out
        }),
    ))
}

/// 2-D convolution. `input: [N, C, H, W]`, `weight: [O, C, kh, kw]`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 2],
    padding: [usize; 2],
) -> Result<Tensor<T>> {
    if input.rank() != 4 {
        return Err(Error::dim("conv2d", "rank", format!("input must be [N, C, H, W], got {:?}", input.shape())));
    }
    if weight.rank() != 4 {
        return Err(Error::dim("conv2d", "rank", format!("kernel must be [O, C, kh, kw], got {:?}", weight.shape())));
    }
    let s = input.shape();
    let ws = weight.shape();
    if ws[1] != s[1] {
        return Err(Error::dim("conv2d", "channels (axis 1)", format!("input has {} channels, kernel expects {}", s[1], ws[1])));
    }
    for ax in 0..2 {
        let padded = s[2 + ax] + 2 * padding[ax];
        if ws[2 + ax] > padded {
            return Err(Error::dim(
                "conv2d",
                AXES[1 + ax],
                format!("kernel extent {} exceeds padded input extent {}", ws[2 + ax], padded),
            ));
        }
    }
    let x5 = input.reshape(&[s[0], s[1], 1, s[2], s[3]])?;
    let w5 = weight.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]])?;
    let y = conv3d(&x5, &w5, bias, [1, stride[0], stride[1]], [0, padding[0], padding[1]])?;
    let ys = y.shape().to_vec();
    y.reshape(&[ys[0], ys[1], ys[3], ys[4]])
}
