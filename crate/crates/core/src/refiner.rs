//! Iterative refinement: volume lookup, three-level ConvGRU, disparity
//! deltas and convex upsampling. Disparities here are in 1/4-scale pixels.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init};
use crate::tensor::{bilinear_resize, Element, Tensor};

/// Upsampling factor from the refinement grid to full resolution.
pub const UPSAMPLE: usize = 4;
const MASK_CHANNELS: usize = 9 * UPSAMPLE * UPSAMPLE;

/// Linear sample along one axis with zero fill: value and derivative in `p`.
#[inline]
fn sample<T: Element>(p: T, n: usize, at: impl Fn(usize) -> T) -> (T, T, isize, T) {
    let lo = p.floor();
    let t = p - lo;
    let li = lo.as_f64() as isize;
    let get = |i: isize| if i >= 0 && (i as usize) < n { at(i as usize) } else { T::zero() };
    let (a, b) = (get(li), get(li + 1));
    ((T::one() - t) * a + t * b, b - a, li, t)
}

/// Features around the current disparity. For offsets `o` in `-r..=r` the
/// filtered volume `[N, C, D, H, W]` is sampled at bin `d + o`, and the
/// correlation volume `[N, W', H, W]` at column `w - (d + o)`; both linearly
/// with zero outside the grid. Output `[N, (2r + 1) * (C + 1), H, W]`, volume
/// channels first (offset-major), then the correlation channels.
pub fn lookup<T: Element>(vc: &Tensor<T>, corr: &Tensor<T>, d: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
    if vc.rank() != 5 || corr.rank() != 4 || d.rank() != 4 {
        return Err(Error::dim("lookup", "rank", "expects volume [N, C, D, H, W], correlation [N, W', H, W], disparity [N, 1, H, W]"));
    }
    let [n, c, dn, h, w] = [vc.shape()[0], vc.shape()[1], vc.shape()[2], vc.shape()[3], vc.shape()[4]];
    if d.shape() != [n, 1, h, w] {
        return Err(Error::dim("lookup", "disparity", format!("expected {:?}, got {:?}", [n, 1, h, w], d.shape())));
    }
    let wp = corr.shape()[1];
    if corr.shape() != [n, wp, h, w] {
        return Err(Error::dim("lookup", "correlation", format!("expected [{n}, W', {h}, {w}], got {:?}", corr.shape())));
    }
    let k = 2 * radius + 1;
    let out_c = k * (c + 1);
    let (vx, cx, dx) = (vc.data(), corr.data(), d.data());
    let hw = h * w;
    let mut out = vec![T::zero(); n * out_c * hw];
    for b in 0..n {
        for p in 0..hw {
            let dv = dx[b * hw + p];
            let x = p % w;
            for (oi, o) in (-(radius as isize)..=radius as isize).enumerate() {
                let pos = dv + T::of(o as f64);
                for ch in 0..c {
                    let base = (b * c + ch) * dn * hw + p;
                    let (v, _, _, _) = sample(pos, dn, |i| vx[base + i * hw]);
                    out[(b * out_c + oi * c + ch) * hw + p] = v;
                }
                let q = T::of(x as f64) - pos;
                let (v, _, _, _) = sample(q, wp, |i| cx[(b * wp + i) * hw + p]);
                out[(b * out_c + k * c + oi) * hw + p] = v;
            }
        }
    }
    let (vt, ct, dt) = (vc.clone(), corr.clone(), d.clone());
    Ok(Tensor::from_op(
        vec![n, out_c, h, w],
        out,
        vec![vc.clone(), corr.clone(), d.clone()],
        Box::new(move |g, _| {
            let (vx, cx, dx) = (vt.data(), ct.data(), dt.data());
            let mut gv = vec![T::zero(); vx.len()];
            let mut gc = vec![T::zero(); cx.len()];
            let mut gd = vec![T::zero(); dx.len()];
            let scatter = |buf: &mut [T], len: usize, lo: isize, t: T, go: T, at: &dyn Fn(usize) -> usize| {
                if lo >= 0 && (lo as usize) < len {
                    buf[at(lo as usize)] += go * (T::one() - t);
                }
                if lo + 1 >= 0 && ((lo + 1) as usize) < len {
                    buf[at((lo + 1) as usize)] += go * t;
                }
            };
            for b in 0..n {
                for p in 0..hw {
                    let dv = dx[b * hw + p];
                    let x = p % w;
                    let mut acc = T::zero();
                    for (oi, o) in (-(radius as isize)..=radius as isize).enumerate() {
                        let pos = dv + T::of(o as f64);
                        for ch in 0..c {
                            let base = (b * c + ch) * dn * hw + p;
                            let go = g[(b * out_c + oi * c + ch) * hw + p];
                            let (_, slope, idx, t) = sample(pos, dn, |i| vx[base + i * hw]);
                            acc += go * slope;
                            scatter(&mut gv, dn, idx, t, go, &|i| base + i * hw);
                        }
                        let q = T::of(x as f64) - pos;
                        let go = g[(b * out_c + k * c + oi) * hw + p];
                        let (_, slope, idx, t) = sample(q, wp, |i| cx[(b * wp + i) * hw + p]);
                        acc -= go * slope;
                        scatter(&mut gc, wp, idx, t, go, &|i| (b * wp + i) * hw + p);
                    }
                    gd[b * hw + p] = acc;
                }
            }
            vec![Some(gv), Some(gc), Some(gd)]
        }),
    ))
}

/// Convex upsampling by 4: each full-resolution pixel is a softmax-weighted
/// mix of the 3x3 coarse neighbourhood (edge-replicated at borders), then
/// scaled by 4. `mask: [N, 144, H, W]` with channel `k * 16 + i * 4 + j` the
/// logit of neighbour `k` for sub-pixel `(i, j)`.
pub fn convex_upsample<T: Element>(d: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    if d.rank() != 4 || d.shape()[1] != 1 {
        return Err(Error::dim("convex_upsample", "channels (axis 1)", format!("disparity must be [N, 1, H, W], got {:?}", d.shape())));
    }
    let [n, _, h, w] = [d.shape()[0], 1, d.shape()[2], d.shape()[3]];
    if mask.shape() != [n, MASK_CHANNELS, h, w] {
        return Err(Error::dim("convex_upsample", "mask", format!("expected {:?}, got {:?}", [n, MASK_CHANNELS, h, w], mask.shape())));
    }
    const S: usize = UPSAMPLE;
    let hw = h * w;
    let (oh, ow) = (h * S, w * S);
    let neighbour = move |y: usize, x: usize, k: usize| {
        let yy = (y as isize + (k / 3) as isize - 1).clamp(0, h as isize - 1) as usize;
        let xx = (x as isize + (k % 3) as isize - 1).clamp(0, w as isize - 1) as usize;
        yy * w + xx
    };
    let (dx, mx) = (d.data(), mask.data());
    let mut weights = vec![T::zero(); mx.len()];
    let mut out = vec![T::zero(); n * oh * ow];
    let scale = T::of(S as f64);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                for sub in 0..S * S {
                    let logit = |k: usize| mx[(b * MASK_CHANNELS + k * S * S + sub) * hw + p];
                    let m = (0..9).map(logit).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for k in 0..9 {
                        let e = (logit(k) - m).exp();
                        weights[(b * MASK_CHANNELS + k * S * S + sub) * hw + p] = e;
                        z += e;
                    }
                    let mut acc = T::zero();
                    for k in 0..9 {
                        let wi = (b * MASK_CHANNELS + k * S * S + sub) * hw + p;
                        weights[wi] /= z;
                        acc += weights[wi] * dx[b * hw + neighbour(y, x, k)];
                    }
                    let (i, j) = (sub / S, sub % S);
                    out[(b * oh + y * S + i) * ow + x * S + j] = scale * acc;
                }
            }
        }
    }
    let dt = d.clone();
    Ok(Tensor::from_op(
        vec![n, 1, oh, ow],
        out,
        vec![d.clone(), mask.clone()],
        Box::new(move |g, _| {
            let dx = dt.data();
            let mut gd = vec![T::zero(); dx.len()];
            let mut gm = vec![T::zero(); weights.len()];
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        for sub in 0..S * S {
                            let (i, j) = (sub / S, sub % S);
                            let go = g[(b * oh + y * S + i) * ow + x * S + j] * scale;
                            let wi = |k: usize| (b * MASK_CHANNELS + k * S * S + sub) * hw + p;
                            let mean: T = (0..9).map(|k| weights[wi(k)] * dx[b * hw + neighbour(y, x, k)]).sum();
                            for k in 0..9 {
                                let v = dx[b * hw + neighbour(y, x, k)];
                                gd[b * hw + neighbour(y, x, k)] += go * weights[wi(k)];
                                gm[wi(k)] = go * weights[wi(k)] * (v - mean);
                            }
                        }
                    }
                }
            }
            vec![Some(gd), Some(gm)]
        }),
    ))
}

/// Convolutional GRU with 3x3 gates on `[h, x]`.
pub struct GruCell<T: Element> {
    pub conv_z: Conv2d<T>,
    pub conv_r: Conv2d<T>,
    pub conv_h: Conv2d<T>,
    pub hidden: usize,
    pub input: usize,
}

impl<T: Element> GruCell<T> {
    pub fn new(init: &Init<T>, name: &str, hidden: usize, input: usize) -> Self {
        let s = init.sub(name);
        GruCell {
            conv_z: Conv2d::new(&s, "conv_z", hidden + input, hidden, [3, 3], 1, true),
            conv_r: Conv2d::new(&s, "conv_r", hidden + input, hidden, [3, 3], 1, true),
            conv_h: Conv2d::new(&s, "conv_h", hidden + input, hidden, [3, 3], 1, true),
            hidden,
            input,
        }
    }

    /// `h_k = (1 - z) * h + z * tanh(Conv_h([r * h, x]))`.
    pub fn forward(&self, h: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if h.rank() != 4 || x.rank() != 4 || h.shape()[2..] != x.shape()[2..] || h.shape()[0] != x.shape()[0] {
            return Err(Error::dim("gru_update", "spatial extents", format!("hidden {:?} vs input {:?}", h.shape(), x.shape())));
        }
        if h.shape()[1] != self.hidden || x.shape()[1] != self.input {
            return Err(Error::dim(
                "gru_update",
                "channels (axis 1)",
                format!("expected hidden {} and input {}, got {:?} and {:?}", self.hidden, self.input, h.shape(), x.shape()),
            ));
        }
        let hx = Tensor::concat(&[h, x], 1)?;
        let z = self.conv_z.forward(&hx)?.sigmoid();
        let r = self.conv_r.forward(&hx)?.sigmoid();
        let q = self.conv_h.forward(&Tensor::concat(&[&r.mul(h)?, x], 1)?)?.tanh();
        // (1 - z) h + z q = h + z (q - h)
        h.add(&z.mul(&q.sub(h)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct RefinerConfig {
    pub volume_channels: usize,
    pub hidden: [usize; 3],
    pub motion: usize,
    pub radius: usize,
    pub detach_disparity: bool,
}

/// Recurrent state: quarter-scale disparity and hidden states at 1/4, 1/8, 1/16.
#[derive(Clone)]
pub struct RefineState<T: Element> {
    pub disparity: Tensor<T>,
    pub hidden: [Tensor<T>; 3],
    pub k: usize,
}

/// One refinement step's outputs.
#[derive(Clone)]
pub struct Iterate<T: Element> {
    pub disparity: Tensor<T>,
    pub mask: Tensor<T>,
}

pub struct Refiner<T: Element> {
    conv_v1: Conv2d<T>,
    conv_v2: Conv2d<T>,
    conv_d1: Conv2d<T>,
    conv_d2: Conv2d<T>,
    gru4: GruCell<T>,
    gru8: GruCell<T>,
    gru16: GruCell<T>,
    delta1: Conv2d<T>,
    pub delta2: Conv2d<T>,
    mask1: Conv2d<T>,
    mask2: Conv2d<T>,
    pub cfg: RefinerConfig,
}

impl<T: Element> Refiner<T> {
    pub fn new(init: &Init<T>, cfg: RefinerConfig) -> Self {
        let s = init.sub("refiner");
        let [h4, h8, h16] = cfg.hidden;
        let m = cfg.motion;
        let lookup_ch = (2 * cfg.radius + 1) * (cfg.volume_channels + 1);
        let x_ch = 2 * m + 1 + h4;
        Refiner {
            conv_v1: Conv2d::new(&s, "conv_v1", lookup_ch, 2 * m, [1, 1], 1, true),
            conv_v2: Conv2d::new(&s, "conv_v2", 2 * m, m, [3, 3], 1, true),
            conv_d1: Conv2d::new(&s, "conv_d1", 1, m, [3, 3], 1, true),
            conv_d2: Conv2d::new(&s, "conv_d2", m, m, [3, 3], 1, true),
            gru4: GruCell::new(&s, "gru4", h4, x_ch + h8),
            gru8: GruCell::new(&s, "gru8", h8, h4 + h16 + h8),
            gru16: GruCell::new(&s, "gru16", h16, h8 + h16),
            delta1: Conv2d::new(&s, "delta1", h4, h4, [3, 3], 1, true),
            delta2: Conv2d::new(&s, "delta2", h4, 1, [3, 3], 1, true),
            mask1: Conv2d::new(&s, "mask1", h4, 2 * h4, [3, 3], 1, true),
            mask2: Conv2d::new(&s, "mask2", 2 * h4, MASK_CHANNELS, [1, 1], 1, true),
            cfg,
        }
    }

    /// One refinement iteration, coarse to fine. `context` is
    /// `relu(f_c)` at 1/4, 1/8, 1/16.
    pub fn step(
        &self,
        state: &RefineState<T>,
        vc: &Tensor<T>,
        corr: &Tensor<T>,
        context: &[Tensor<T>; 3],
    ) -> Result<(RefineState<T>, Iterate<T>)> {
        let d = if self.cfg.detach_disparity { state.disparity.detach() } else { state.disparity.clone() };
        let fv = lookup(vc, corr, &d, self.cfg.radius)?;
        let v = self.conv_v2.forward(&self.conv_v1.forward(&fv)?.relu())?.relu();
        let df = self.conv_d2.forward(&self.conv_d1.forward(&d)?.relu())?.relu();
        let x = Tensor::concat(&[&v, &df, &d, &context[0]], 1)?;
        let [h4, h8, h16] = &state.hidden;
        let half = |t: &Tensor<T>| {
            let s = t.shape();
            bilinear_resize(t, [s[2] / 2, s[3] / 2])
        };
        let up_to = |t: &Tensor<T>, like: &Tensor<T>| bilinear_resize(t, [like.shape()[2], like.shape()[3]]);
        let h16n = self.gru16.forward(h16, &Tensor::concat(&[&half(h8)?, &context[2]], 1)?)?;
        let h8n = self.gru8.forward(h8, &Tensor::concat(&[&half(h4)?, &up_to(&h16n, h8)?, &context[1]], 1)?)?;
        let h4n = self.gru4.forward(h4, &Tensor::concat(&[&x, &up_to(&h8n, h4)?], 1)?)?;
        let delta = self.delta2.forward(&self.delta1.forward(&h4n)?.relu())?;
        let mask = self.mask2.forward(&self.mask1.forward(&h4n)?.relu())?.mul_scalar(T::of(0.25));
        let disparity = d.add(&delta)?;
        let next = RefineState {
            disparity: disparity.clone(),
            hidden: [h4n, h8n, h16n],
            k: state.k + 1,
        };
        Ok((next, Iterate { disparity, mask }))
    }

    /// Run `iters` steps from `state`, returning the final state and every iterate.
    pub fn refine(
        &self,
        mut state: RefineState<T>,
        vc: &Tensor<T>,
        corr: &Tensor<T>,
        context: &[Tensor<T>; 3],
        iters: usize,
    ) -> Result<(RefineState<T>, Vec<Iterate<T>>)> {
        if iters == 0 {
            return Err(Error::Config("refinement needs at least one iteration".into()));
        }
        let mut history = Vec::with_capacity(iters);
        for _ in 0..iters {
            let (next, it) = self.step(&state, vc, corr, context)?;
            state = next;
            history.push(it);
        }
        Ok((state, history))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check_params, ParamStore};
    use crate::tensor::{grad_check, grad_check_with, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn lookup_integer_and_midpoint() {
        let vol: Vec<f64> = vec![1.0, 2.0, 4.0, 8.0, 16.0];
        let vc = Tensor::new(&[1, 1, 5, 1, 1], vol).unwrap();
        let corr = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let f = lookup(&vc, &corr, &Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap(), 0).unwrap();
        assert_eq!(f.data()[0], 4.0);
        let f = lookup(&vc, &corr, &Tensor::new(&[1, 1, 1, 1], vec![2.5]).unwrap(), 1).unwrap();
        assert_eq!(&f.data()[..3], &[3.0, 6.0, 12.0]);
        let f = lookup(&vc, &corr, &Tensor::new(&[1, 1, 1, 1], vec![3.5]).unwrap(), 1).unwrap();
        assert_eq!(f.data()[2], 8.0); // half of bin 4, half of zero fill
    }

    /// Direct interpolation of both volumes at `d + o`.
    fn lookup_oracle(vc: &Tensor<f64>, corr: &Tensor<f64>, d: &Tensor<f64>, r: usize) -> Vec<f64> {
        let [n, c, dn, h, w] = [vc.shape()[0], vc.shape()[1], vc.shape()[2], vc.shape()[3], vc.shape()[4]];
        let wp = corr.shape()[1];
        let interp = |f: &dyn Fn(i64) -> f64, p: f64| {
            let lo = p.floor();
            let t = p - lo;
            (1.0 - t) * f(lo as i64) + t * f(lo as i64 + 1)
        };
        let k = 2 * r + 1;
        let mut out = vec![0.0; n * k * (c + 1) * h * w];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let dv = d.data()[(b * h + y) * w + x];
                    for oi in 0..k {
                        let pos = dv + oi as f64 - r as f64;
                        for ch in 0..c {
                            let f = |i: i64| {
                                if i < 0 || i >= dn as i64 { 0.0 } else { vc.data()[((((b * c + ch) * dn) + i as usize) * h + y) * w + x] }
                            };
                            out[((b * k * (c + 1) + oi * c + ch) * h + y) * w + x] = interp(&f, pos);
                        }
                        let f = |i: i64| if i < 0 || i >= wp as i64 { 0.0 } else { corr.data()[((b * wp + i as usize) * h + y) * w + x] };
                        out[((b * k * (c + 1) + k * c + oi) * h + y) * w + x] = interp(&f, x as f64 - pos);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn lookup_matches_oracle_and_gradients() {
        let vc = rand_t(&[2, 3, 6, 2, 5], 1, -1.0, 1.0);
        let corr = rand_t(&[2, 5, 2, 5], 2, -1.0, 1.0);
        let d = rand_t(&[2, 1, 2, 5], 3, 0.1, 4.9);
        let got = lookup(&vc, &corr, &d, 2).unwrap();
        let want = lookup_oracle(&vc, &corr, &d, 2);
        let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6, "{err}");
        let wt = rand_t(got.shape(), 4, -1.0, 1.0);
        let r = grad_check(|v| Ok(lookup(&v[0], &v[1], &v[2], 2)?.mul(&wt)?.sum()), &[vc, corr, d], 1e-6).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn convex_upsample_laws() {
        let d = Tensor::<f64>::full(&[1, 1, 3, 4], 2.5);
        let m = rand_t(&[1, 144, 3, 4], 5, -3.0, 3.0);
        let up = convex_upsample(&d, &m).unwrap();
        assert_eq!(up.shape(), &[1, 1, 12, 16]);
        assert!(up.data().iter().all(|&v| (v - 10.0).abs() <= 1e-12));

        let d = rand_t(&[1, 1, 3, 4], 6, 0.0, 8.0);
        let up = convex_upsample(&d, &m).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                let (cy, cx) = (y / 4, x / 4);
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (cy as i64 + dy).clamp(0, 2) as usize;
                        let xx = (cx as i64 + dx).clamp(0, 3) as usize;
                        lo = lo.min(d.data()[yy * 4 + xx]);
                        hi = hi.max(d.data()[yy * 4 + xx]);
                    }
                }
                let v = up.data()[y * 16 + x];
                assert!(v >= 4.0 * lo - 1e-12 && v <= 4.0 * hi + 1e-12);
            }
        }
    }

    #[test]
    fn convex_upsample_matches_gather_oracle() {
        let d = rand_t(&[2, 1, 3, 4], 7, 0.0, 8.0);
        let m = rand_t(&[2, 144, 3, 4], 8, -2.0, 2.0);
        let up = convex_upsample(&d, &m).unwrap();
        for b in 0..2 {
            for y in 0..12 {
                for x in 0..16 {
                    let (cy, cx, i, j) = (y / 4, x / 4, y % 4, x % 4);
                    let logits: Vec<f64> = (0..9).map(|k| m.data()[((b * 144 + k * 16 + i * 4 + j) * 3 + cy) * 4 + cx]).collect();
                    let z: f64 = logits.iter().map(|l| l.exp()).sum();
                    let mut want = 0.0;
                    for (k, l) in logits.iter().enumerate() {
                        let yy = (cy as i64 + k as i64 / 3 - 1).clamp(0, 2) as usize;
                        let xx = (cx as i64 + k as i64 % 3 - 1).clamp(0, 3) as usize;
                        want += l.exp() / z * d.data()[(b * 3 + yy) * 4 + xx];
                    }
                    let got = up.data()[(b * 12 + y) * 16 + x];
                    assert!((got - 4.0 * want).abs() <= 1e-6);
                }
            }
        }
        let wt = rand_t(up.shape(), 9, -1.0, 1.0);
        let opts = GradCheckOptions { eps: 1e-6, floor: 1e-3, ..Default::default() };
        let r = grad_check_with(|v| Ok(convex_upsample(&v[0], &v[1])?.mul(&wt)?.sum()), &[d, m], &opts).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn gru_zero_weights_halve_hidden() {
        let store = ParamStore::<f64>::new(0);
        let g = GruCell::new(&store.root(), "g", 3, 2);
        for p in store.trainable() {
            p.set_values(vec![0.0; p.values().len()]).unwrap();
        }
        let h = rand_t(&[1, 3, 4, 4], 1, -1.0, 1.0);
        let x = rand_t(&[1, 2, 4, 4], 2, -1.0, 1.0);
        let out = g.forward(&h, &x).unwrap();
        for (a, b) in out.data().iter().zip(h.data()) {
            assert!((a - 0.5 * b).abs() <= 1e-15);
        }
        assert!(g.forward(&h, &rand_t(&[1, 2, 4, 5], 3, 0.0, 1.0)).is_err());
    }

    #[test]
    fn gru_hidden_stays_bounded() {
        let store = ParamStore::<f64>::new(4);
        let g = GruCell::new(&store.root(), "g", 4, 3);
        let mut h = rand_t(&[1, 4, 5, 5], 5, -1.0, 1.0).tanh();
        for k in 0..100 {
            let x = rand_t(&[1, 3, 5, 5], 100 + k, -50.0, 50.0);
            h = g.forward(&h, &x).unwrap();
            assert!(h.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn gru_two_step_gradient() {
        let store = ParamStore::<f64>::new(6);
        let g = GruCell::new(&store.root(), "g", 2, 2);
        let h0 = rand_t(&[1, 2, 3, 3], 7, -1.0, 1.0);
        let (x1, x2) = (rand_t(&[1, 2, 3, 3], 8, -1.0, 1.0), rand_t(&[1, 2, 3, 3], 9, -1.0, 1.0));
        let r = grad_check_params(
            || {
                let h = g.forward(&g.forward(&h0, &x1)?, &x2)?;
                Ok(h.mul(&h)?.sum())
            },
            &store.trainable(),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }

    struct Setup {
        store: ParamStore<f64>,
        vc: Tensor<f64>,
        corr: Tensor<f64>,
        ctx: [Tensor<f64>; 3],
        state: RefineState<f64>,
    }

    fn setup(detach: bool) -> (Setup, Refiner<f64>) {
        let store = ParamStore::<f64>::new(11);
        let cfg = RefinerConfig { volume_channels: 2, hidden: [4, 3, 3], motion: 3, radius: 1, detach_disparity: detach };
        let r = Refiner::new(&store.root(), cfg);
        let (h, w) = (4, 8);
        let s = Setup {
            vc: rand_t(&[1, 2, 6, h, w], 1, -1.0, 1.0),
            corr: rand_t(&[1, w, h, w], 2, -1.0, 1.0),
            ctx: [rand_t(&[1, 4, h, w], 3, 0.0, 1.0), rand_t(&[1, 3, h / 2, w / 2], 4, 0.0, 1.0), rand_t(&[1, 3, h / 4, w / 4], 5, 0.0, 1.0)],
            state: RefineState {
                disparity: rand_t(&[1, 1, h, w], 6, 0.5, 4.5),
                hidden: [rand_t(&[1, 4, h, w], 7, -0.5, 0.5), rand_t(&[1, 3, h / 2, w / 2], 8, -0.5, 0.5), rand_t(&[1, 3, h / 4, w / 4], 9, -0.5, 0.5)],
                k: 0,
            },
            store,
        };
        (s, r)
    }

    #[test]
    fn zero_delta_head_keeps_initial_disparity() {
        let (s, r) = setup(true);
        for p in [&r.delta2.weight, r.delta2.bias.as_ref().unwrap()] {
            p.set_values(vec![0.0; p.values().len()]).unwrap();
        }
        let (end, hist) = r.refine(s.state.clone(), &s.vc, &s.corr, &s.ctx, 5).unwrap();
        assert_eq!(hist.len(), 5);
        assert_eq!(end.k, 5);
        assert_eq!(end.disparity.data(), s.state.disparity.data());
    }

    #[test]
    fn refinement_continues_from_state() {
        let (s, r) = setup(true);
        let (all, _) = r.refine(s.state.clone(), &s.vc, &s.corr, &s.ctx, 4).unwrap();
        let (mid, _) = r.refine(s.state.clone(), &s.vc, &s.corr, &s.ctx, 2).unwrap();
        let (end, _) = r.refine(mid, &s.vc, &s.corr, &s.ctx, 2).unwrap();
        assert_eq!(all.disparity.data(), end.disparity.data());
        for (a, b) in all.hidden.iter().zip(&end.hidden) {
            assert_eq!(a.data(), b.data());
        }
        assert!(r.refine(s.state.clone(), &s.vc, &s.corr, &s.ctx, 0).is_err());
    }

    #[test]
    fn two_updates_gradient() {
        let (s, r) = setup(false);
        s.store.perturb(2, 0.1).unwrap();
        let opts = GradCheckOptions { eps: 1e-5, floor: 1e-5, max_entries: Some(6), seed: 3, five_point: false };
        let rep = grad_check_params(
            || {
                let (_, hist) = r.refine(s.state.clone(), &s.vc, &s.corr, &s.ctx, 2)?;
                let up = convex_upsample(&hist[1].disparity, &hist[1].mask)?;
                Ok(up.mul(&up)?.mean().add(&hist[0].disparity.sum())?)
            },
            &s.store.trainable(),
            &opts,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-3, "{rep:?}");
    }
}
