//! Hybrid group-wise/concatenation cost volume and the all-pairs
//! correlation volume. Volumes are laid out `[N, C, D, H, W]` with `D` the
//! disparity axis at 1/4 scale; correlation is `[N, W', H, W]`.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init};
use crate::tensor::{Element, Tensor};

/// Width of each concatenation half after the shared 1x1 reduction.
pub const CAT_CHANNELS: usize = 14;
/// Floor applied to group norms before division.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Raw,
    Filtered,
}

#[derive(Clone, Debug)]
pub struct CostVolume<T: Element> {
    pub data: Tensor<T>,
    pub gwc_channels: usize,
    pub stage: Stage,
}

impl<T: Element> CostVolume<T> {
    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

fn check_pair<T: Element>(op: &'static str, l: &Tensor<T>, r: &Tensor<T>) -> Result<()> {
    if l.rank() != 4 {
        return Err(Error::dim(op, "rank", format!("features must be [N, C, H, W], got {:?}", l.shape())));
    }
    if l.shape() != r.shape() {
        let axis = (0..4).find(|&i| l.shape()[i] != r.shape().get(i).copied().unwrap_or(0)).unwrap_or(0);
        let name = ["batch", "channels", "height", "width"][axis];
        return Err(Error::dim(op, name, format!("left {:?} vs right {:?}", l.shape(), r.shape())));
    }
    Ok(())
}

/// L2-normalize each of the `groups` channel subvectors of `[N, C, H, W]`
/// per pixel, dividing by `max(norm, NORM_EPS)`.
pub fn group_normalize<T: Element>(f: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    if f.rank() != 4 {
        return Err(Error::dim("group_normalize", "rank", format!("expected [N, C, H, W], got {:?}", f.shape())));
    }
    let [n, c, h, w] = [f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]];
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("{c} feature channels are not divisible into {groups} groups")));
    }
    let (cg, hw) = (c / groups, h * w);
    let eps = T::of(NORM_EPS);
    let x = f.data();
    let mut norms = vec![T::zero(); n * groups * hw];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for g in 0..groups {
            let nb = (b * groups + g) * hw;
            for k in 0..cg {
                let base = (b * c + g * cg + k) * hw;
                for p in 0..hw {
                    norms[nb + p] += x[base + p] * x[base + p];
                }
            }
            for v in &mut norms[nb..nb + hw] {
                *v = v.sqrt().max(eps);
            }
            for k in 0..cg {
                let base = (b * c + g * cg + k) * hw;
                for p in 0..hw {
                    y[base + p] = x[base + p] / norms[nb + p];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        f.shape().to_vec(),
        y,
        vec![f.clone()],
        Box::new(move |grad, y| {
            let mut gx = vec![T::zero(); grad.len()];
            let mut dots = vec![T::zero(); hw];
            for b in 0..n {
                for g in 0..groups {
                    let nb = (b * groups + g) * hw;
                    dots.iter_mut().for_each(|d| *d = T::zero());
                    for k in 0..cg {
                        let base = (b * c + g * cg + k) * hw;
                        for p in 0..hw {
                            dots[p] += y[base + p] * grad[base + p];
                        }
                    }
                    for k in 0..cg {
                        let base = (b * c + g * cg + k) * hw;
                        for p in 0..hw {
                            let nrm = norms[nb + p];
                            // below the floor the map is a plain scaling
                            let proj = if nrm > eps { y[base + p] * dots[p] } else { T::zero() };
                            gx[base + p] = (grad[base + p] - proj) / nrm;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Group-wise correlation `V(g, d, h, w) = <l_g(h, w), r_g(h, w - d)>` for
/// `d < disparities`, zero where `w - d < 0`. Inputs are used as given.
pub fn gwc_volume<T: Element>(l: &Tensor<T>, r: &Tensor<T>, groups: usize, disparities: usize) -> Result<Tensor<T>> {
    check_pair("gwc_volume", l, r)?;
    let [n, c, h, w] = [l.shape()[0], l.shape()[1], l.shape()[2], l.shape()[3]];
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("{c} feature channels are not divisible into {groups} groups")));
    }
    let (cg, dn) = (c / groups, disparities);
    let (lx, rx) = (l.data(), r.data());
    let mut out = vec![T::zero(); n * groups * dn * h * w];
    let vidx = move |b: usize, g: usize, d: usize, y: usize, x: usize| (((b * groups + g) * dn + d) * h + y) * w + x;
    let fidx = move |b: usize, ch: usize, y: usize, x: usize| ((b * c + ch) * h + y) * w + x;
    for b in 0..n {
        for g in 0..groups {
            for d in 0..dn.min(w) {
                for y in 0..h {
                    let o = &mut out[vidx(b, g, d, y, 0)..vidx(b, g, d, y, 0) + w];
                    for k in 0..cg {
                        let ch = g * cg + k;
                        let lr = &lx[fidx(b, ch, y, 0)..fidx(b, ch, y, 0) + w];
                        let rr = &rx[fidx(b, ch, y, 0)..fidx(b, ch, y, 0) + w];
                        for x in d..w {
                            o[x] += lr[x] * rr[x - d];
                        }
                    }
                }
            }
        }
    }
    let (lt, rt) = (l.clone(), r.clone());
    Ok(Tensor::from_op(
        vec![n, groups, dn, h, w],
        out,
        vec![l.clone(), r.clone()],
        Box::new(move |gv, _| {
            let (lx, rx) = (lt.data(), rt.data());
            let mut gl = vec![T::zero(); lx.len()];
            let mut gr = vec![T::zero(); rx.len()];
            for b in 0..n {
                for g in 0..groups {
                    for d in 0..dn.min(w) {
                        for y in 0..h {
                            let go = &gv[vidx(b, g, d, y, 0)..vidx(b, g, d, y, 0) + w];
                            for k in 0..cg {
                                let base = fidx(b, g * cg + k, y, 0);
                                for x in d..w {
                                    gl[base + x] += go[x] * rx[base + x - d];
                                    gr[base + x - d] += go[x] * lx[base + x];
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gl), Some(gr)]
        }),
    ))
}

/// Concatenation volume: channels `[l(h, w) | r(h, w - d)]` for each `d`,
/// the right half zero where `w - d < 0`.
pub fn concat_volume<T: Element>(l: &Tensor<T>, r: &Tensor<T>, disparities: usize) -> Result<Tensor<T>> {
    check_pair("concat_volume", l, r)?;
    let [n, c, h, w] = [l.shape()[0], l.shape()[1], l.shape()[2], l.shape()[3]];
    let dn = disparities;
    let (lx, rx) = (l.data(), r.data());
    let mut out = vec![T::zero(); n * 2 * c * dn * h * w];
    let vidx = move |b: usize, ch: usize, d: usize, y: usize| (((b * 2 * c + ch) * dn + d) * h + y) * w;
    let fidx = move |b: usize, ch: usize, y: usize| ((b * c + ch) * h + y) * w;
    for b in 0..n {
        for ch in 0..c {
            for d in 0..dn {
                for y in 0..h {
                    let (vl, vr, f) = (vidx(b, ch, d, y), vidx(b, c + ch, d, y), fidx(b, ch, y));
                    out[vl..vl + w].copy_from_slice(&lx[f..f + w]);
                    for x in d.min(w)..w {
                        out[vr + x] = rx[f + x - d];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, 2 * c, dn, h, w],
        out,
        vec![l.clone(), r.clone()],
        Box::new(move |gv, _| {
            let mut gl = vec![T::zero(); n * c * h * w];
            let mut gr = vec![T::zero(); n * c * h * w];
            for b in 0..n {
                for ch in 0..c {
                    for d in 0..dn {
                        for y in 0..h {
                            let (vl, vr, f) = (vidx(b, ch, d, y), vidx(b, c + ch, d, y), fidx(b, ch, y));
                            for x in 0..w {
                                gl[f + x] += gv[vl + x];
                            }
                            for x in d.min(w)..w {
                                gr[f + x - d] += gv[vr + x];
                            }
                        }
                    }
                }
            }
            vec![Some(gl), Some(gr)]
        }),
    ))
}

/// Builder for `V_C = [V_gwc | V_cat]`, owning the shared 1x1 reduction.
pub struct HybridVolume<T: Element> {
    pub reduce: Conv2d<T>,
    pub groups: usize,
}

impl<T: Element> HybridVolume<T> {
    pub fn new(init: &Init<T>, feature_channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || feature_channels % groups != 0 {
            return Err(Error::Config(format!(
                "{feature_channels} feature channels are not divisible into {groups} groups"
            )));
        }
        Ok(HybridVolume {
            reduce: Conv2d::new(init, "volume.reduce", feature_channels, CAT_CHANNELS, [1, 1], 1, false),
            groups,
        })
    }

    pub fn channels(&self) -> usize {
        self.groups + 2 * CAT_CHANNELS
    }

    /// `max_disp` is the full-resolution range `D`; the volume spans `D / 4` bins.
    pub fn forward(&self, fl: &Tensor<T>, fr: &Tensor<T>, max_disp: usize) -> Result<CostVolume<T>> {
        if max_disp % 4 != 0 || max_disp == 0 {
            return Err(Error::Config(format!("max disparity {max_disp} must be a positive multiple of 4")));
        }
        check_pair("build_hybrid_volume", fl, fr)?;
        let d4 = max_disp / 4;
        let gwc = gwc_volume(&group_normalize(fl, self.groups)?, &group_normalize(fr, self.groups)?, self.groups, d4)?;
        let cat = concat_volume(&self.reduce.forward(fl)?, &self.reduce.forward(fr)?, d4)?;
        Ok(CostVolume {
            data: Tensor::concat(&[&gwc, &cat], 1)?,
            gwc_channels: self.groups,
            stage: Stage::Raw,
        })
    }
}

/// `V_corr(n, w', h, w) = <l(n, :, h, w), r(n, :, h, w')>`.
pub fn correlation_volume<T: Element>(l: &Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("build_correlation_volume", l, r)?;
    let [n, c, h, w] = [l.shape()[0], l.shape()[1], l.shape()[2], l.shape()[3]];
    let (lx, rx) = (l.data(), r.data());
    let fidx = move |b: usize, ch: usize, y: usize| ((b * c + ch) * h + y) * w;
    let cidx = move |b: usize, wp: usize, y: usize| ((b * w + wp) * h + y) * w;
    let mut out = vec![T::zero(); n * w * h * w];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let (lr, rr) = (&lx[fidx(b, ch, y)..fidx(b, ch, y) + w], &rx[fidx(b, ch, y)..fidx(b, ch, y) + w]);
                for (wp, &rv) in rr.iter().enumerate() {
                    let o = &mut out[cidx(b, wp, y)..cidx(b, wp, y) + w];
                    o.iter_mut().zip(lr).for_each(|(o, &lv)| *o += lv * rv);
                }
            }
        }
    }
    let (lt, rt) = (l.clone(), r.clone());
    Ok(Tensor::from_op(
        vec![n, w, h, w],
        out,
        vec![l.clone(), r.clone()],
        Box::new(move |g, _| {
            let (lx, rx) = (lt.data(), rt.data());
            let mut gl = vec![T::zero(); lx.len()];
            let mut gr = vec![T::zero(); rx.len()];
            for b in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        let f = fidx(b, ch, y);
                        for wp in 0..w {
                            let go = &g[cidx(b, wp, y)..cidx(b, wp, y) + w];
                            let mut acc = T::zero();
                            for x in 0..w {
                                gl[f + x] += go[x] * rx[f + wp];
                                acc += go[x] * lx[f + x];
                            }
                            gr[f + wp] += acc;
                        }
                    }
                }
            }
            vec![Some(gl), Some(gr)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_features_give_unit_zero_disparity() {
        let f = rand_t(&[1, 16, 3, 5], 1);
        let fh = group_normalize(&f, 4).unwrap();
        let v = gwc_volume(&fh, &fh, 4, 3).unwrap();
        for g in 0..4 {
            for p in 0..15 {
                let got = v.data()[(g * 3) * 15 + p];
                assert!((got - 1.0).abs() <= 1e-12, "{got}");
            }
        }
        assert!(v.data().iter().all(|x| x.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn out_of_range_disparities_are_zero() {
        let (l, r) = (rand_t(&[1, 8, 2, 4], 2), rand_t(&[1, 8, 2, 4], 3));
        let v = gwc_volume(&l, &r, 2, 6).unwrap();
        let c = concat_volume(&l, &r, 6).unwrap();
        let (h, w) = (2, 4);
        for d in 0..6 {
            for y in 0..h {
                for x in 0..w {
                    if d > x {
                        for g in 0..2 {
                            assert_eq!(v.data()[((g * 6 + d) * h + y) * w + x], 0.0);
                        }
                        for ch in 8..16 {
                            assert_eq!(c.data()[((ch * 6 + d) * h + y) * w + x], 0.0);
                        }
                    }
                }
            }
        }
    }

    /// Quadruple loop over (g, d, h, w) with per-group normalization inline.
    fn gwc_oracle(l: &[f64], r: &[f64], c: usize, h: usize, w: usize, groups: usize, dn: usize) -> Vec<f64> {
        let cg = c / groups;
        let at = |f: &[f64], ch: usize, y: usize, x: usize| f[(ch * h + y) * w + x];
        let norm = |f: &[f64], g: usize, y: usize, x: usize| {
            (0..cg).map(|k| at(f, g * cg + k, y, x).powi(2)).sum::<f64>().sqrt().max(1e-6)
        };
        let mut out = vec![0.0; groups * dn * h * w];
        for g in 0..groups {
            for d in 0..dn {
                for y in 0..h {
                    for x in 0..w {
                        if x < d {
                            continue;
                        }
                        let (nl, nr) = (norm(l, g, y, x), norm(r, g, y, x - d));
                        out[((g * dn + d) * h + y) * w + x] =
                            (0..cg).map(|k| at(l, g * cg + k, y, x) / nl * at(r, g * cg + k, y, x - d) / nr).sum();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn hybrid_volume_matches_loop_oracle() {
        let store = ParamStore::<f64>::new(0);
        let hv = HybridVolume::new(&store.root(), 16, 4).unwrap();
        let (l, r) = (rand_t(&[1, 16, 4, 6], 4), rand_t(&[1, 16, 4, 6], 5));
        let v = hv.forward(&l, &r, 32).unwrap();
        assert_eq!(v.shape(), &[1, 4 + 28, 8, 4, 6]);
        let want = gwc_oracle(l.data(), r.data(), 16, 4, 6, 4, 8);
        let err = v.data.data()[..want.len()].iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-5, "{err}");
        // concat half: reduced features by direct 1x1 products
        let wr = hv.reduce.weight.values();
        let red = |f: &[f64], o: usize, y: usize, x: usize| (0..16).map(|c| wr[o * 16 + c] * f[(c * 4 + y) * 6 + x]).sum::<f64>();
        for o in 0..14 {
            for d in 0..8 {
                for y in 0..4 {
                    for x in 0..6 {
                        let lv = v.data.data()[(((4 + o) * 8 + d) * 4 + y) * 6 + x];
                        let rv = v.data.data()[(((18 + o) * 8 + d) * 4 + y) * 6 + x];
                        assert!((lv - red(l.data(), o, y, x)).abs() <= 1e-12);
                        let want_r = if x >= d { red(r.data(), o, y, x - d) } else { 0.0 };
                        assert!((rv - want_r).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn indivisible_groups_is_config_error() {
        let store = ParamStore::<f32>::new(0);
        assert!(matches!(HybridVolume::<f32>::new(&store.root(), 10, 4), Err(Error::Config(_))));
    }

    #[test]
    fn volume_is_translation_equivariant() {
        let store = ParamStore::<f64>::new(1);
        let hv = HybridVolume::new(&store.root(), 8, 2).unwrap();
        let (l, r) = (rand_t(&[1, 8, 3, 12], 6), rand_t(&[1, 8, 3, 12], 7));
        let shift = |t: &Tensor<f64>| {
            let z = Tensor::zeros(&[1, 8, 3, 1]);
            Tensor::concat(&[&z, &t.narrow(3, 0, 11).unwrap()], 3).unwrap()
        };
        let a = hv.forward(&l, &r, 16).unwrap();
        let b = hv.forward(&shift(&l), &shift(&r), 16).unwrap();
        let c = a.shape()[1];
        for ch in 0..c {
            for d in 0..4 {
                for y in 0..3 {
                    for x in (d + 1)..11 {
                        let va = a.data.data()[(((ch * 4 + d) * 3 + y) * 12) + x];
                        let vb = b.data.data()[(((ch * 4 + d) * 3 + y) * 12) + x + 1];
                        assert!((va - vb).abs() <= 1e-6, "ch {ch} d {d} x {x}");
                    }
                }
            }
        }
    }

    #[test]
    fn correlation_cases() {
        // unit-norm columns: diagonal ones
        let f = group_normalize(&rand_t(&[1, 3, 2, 5], 8), 1).unwrap();
        let v = correlation_volume(&f, &f).unwrap();
        for y in 0..2 {
            for x in 0..5 {
                assert!((v.data()[(x * 2 + y) * 5 + x] - 1.0).abs() <= 1e-12);
            }
        }
        let mut l = vec![0.0; 2 * 4];
        let mut r = vec![0.0; 2 * 4];
        l[..4].fill(1.0);
        r[4..].fill(1.0);
        let v = correlation_volume(&Tensor::new(&[1, 2, 1, 4], l).unwrap(), &Tensor::new(&[1, 2, 1, 4], r).unwrap()).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));

        let (l, r) = (rand_t(&[1, 3, 2, 5], 9), rand_t(&[1, 3, 2, 5], 10));
        let v = correlation_volume(&l, &r).unwrap();
        for wp in 0..5 {
            for y in 0..2 {
                for x in 0..5 {
                    let want: f64 = (0..3).map(|c| l.data()[(c * 2 + y) * 5 + x] * r.data()[(c * 2 + y) * 5 + wp]).sum();
                    assert!((v.data()[(wp * 2 + y) * 5 + x] - want).abs() <= 1e-6);
                }
            }
        }
        assert!(correlation_volume(&l, &rand_t(&[1, 3, 2, 4], 0)).unwrap_err().to_string().contains("width"));
    }

    #[test]
    fn volume_gradients() {
        let (l, r) = (rand_t(&[1, 8, 2, 5], 11), rand_t(&[1, 8, 2, 5], 12));
        let wv = rand_t(&[1, 2, 3, 2, 5], 13);
        let wc = rand_t(&[1, 16, 3, 2, 5], 14);
        let wk = rand_t(&[1, 5, 2, 5], 15);
        let r1 = grad_check(
            |v| {
                let g = gwc_volume(&group_normalize(&v[0], 2)?, &group_normalize(&v[1], 2)?, 2, 3)?;
                let c = concat_volume(&v[0], &v[1], 3)?;
                let k = correlation_volume(&v[0], &v[1])?;
                Ok(g.mul(&wv)?.sum().add(&c.mul(&wc)?.sum())?.add(&k.mul(&wk)?.sum())?)
            },
            &[l, r],
            1e-6,
        )
        .unwrap();
        assert!(r1.max_rel_error < 1e-5, "{r1:?}");
    }
}
