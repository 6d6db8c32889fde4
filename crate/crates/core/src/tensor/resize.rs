//! Linear resampling with the align-corners-false convention: output index
//! `i` samples source coordinate `(i + 0.5) * in / out - 0.5`, clamped to
//! `[0, in - 1]` at the borders.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Per-output-index (low index, high index, high weight).
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Trilinear resize of `[N, C, D, H, W]` to `[N, C, target...]`.
pub fn trilinear_resize<T: Element>(v: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    if v.rank() != 5 {
        return Err(Error::dim("trilinear_resize", "rank", format!("expects [N, C, D, H, W], got {:?}", v.shape())));
    }
    for (ax, (&t, name)) in target.iter().zip(["depth", "height", "width"]).enumerate() {
        if t == 0 {
            return Err(Error::dim("trilinear_resize", name, "target extent must be >= 1"));
        }
        if v.shape()[2 + ax] == 0 {
            return Err(Error::dim("trilinear_resize", name, "source extent is zero"));
        }
    }
    let s = v.shape();
    let (nc, src) = (s[0] * s[1], [s[2], s[3], s[4]]);
    if src == target {
        return Ok(v.clone());
    }
    let taps: Vec<Vec<(usize, usize, T, T)>> = (0..3)
        .map(|ax| {
            axis_taps(src[ax], target[ax])
                .into_iter()
                .map(|(lo, hi, t)| (lo, hi, T::of(1.0 - t), T::of(t)))
                .collect()
        })
        .collect();
    let (in_len, out_len) = (src.iter().product::<usize>(), target.iter().product::<usize>());
    let [_, sh, sw] = src;
    let mut data = vec![T::zero(); nc * out_len];
    let x = v.data();
    for c in 0..nc {
        let xin = &x[c * in_len..(c + 1) * in_len];
        let out = &mut data[c * out_len..(c + 1) * out_len];
        let mut i = 0;
        for &(z0, z1, _, wz1) in &taps[0] {
            for &(y0, y1, _, wy1) in &taps[1] {
                let rows = [(z0 * sh + y0) * sw, (z0 * sh + y1) * sw, (z1 * sh + y0) * sw, (z1 * sh + y1) * sw];
                for &(x0, x1, _, wx1) in &taps[2] {
                    // difference form keeps constant inputs exact
                    let l = rows.map(|r| xin[r + x0] + wx1 * (xin[r + x1] - xin[r + x0]));
                    let a = l[0] + wy1 * (l[1] - l[0]);
                    let b = l[2] + wy1 * (l[3] - l[2]);
                    out[i] = a + wz1 * (b - a);
                    i += 1;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![s[0], s[1], target[0], target[1], target[2]],
        data,
        vec![v.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); nc * in_len];
            for c in 0..nc {
                let go = &g[c * out_len..(c + 1) * out_len];
                let gi = &mut gx[c * in_len..(c + 1) * in_len];
                let mut i = 0;
                for &(z0, z1, wz0, wz1) in &taps[0] {
                    for &(y0, y1, wy0, wy1) in &taps[1] {
                        let rows = [(z0 * sh + y0) * sw, (z0 * sh + y1) * sw, (z1 * sh + y0) * sw, (z1 * sh + y1) * sw];
                        let wr = [wz0 * wy0, wz0 * wy1, wz1 * wy0, wz1 * wy1];
                        for &(x0, x1, wx0, wx1) in &taps[2] {
                            let gv = go[i];
                            for r in 0..4 {
                                gi[rows[r] + x0] += gv * wr[r] * wx0;
                                gi[rows[r] + x1] += gv * wr[r] * wx1;
                            }
                            i += 1;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Bilinear resize of `[N, C, H, W]` to `[N, C, target...]`.
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, target: [usize; 2]) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::dim("bilinear_resize", "rank", format!("expects [N, C, H, W], got {:?}", x.shape())));
    }
    let s = x.shape();
    let v = x.reshape(&[s[0], s[1], 1, s[2], s[3]])?;
    let y = trilinear_resize(&v, [1, target[0], target[1]])?;
    y.reshape(&[s[0], s[1], target[0], target[1]])
}
