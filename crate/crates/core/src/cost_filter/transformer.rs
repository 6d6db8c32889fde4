//! Disparity transformer: self-attention along the disparity axis of a
//! 4x-downsampled volume, with sinusoidal position encoding and post-norm
//! encoder blocks.

use crate::error::{Error, Result};
use crate::nn::{Conv3d, Init, LayerNorm, Linear};
use crate::tensor::{trilinear_resize, Element, Tensor};

/// `pe[p, 2i] = sin(p / 10000^(2i / C))`, `pe[p, 2i + 1] = cos(p / 10000^(2i / C))`.
pub fn sinusoidal_encoding<T: Element>(len: usize, width: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * width];
    for p in 0..len {
        for c in 0..width {
            let freq = 10000f64.powf((c - c % 2) as f64 / width as f64);
            let a = p as f64 / freq;
            data[p * width + c] = T::of(if c % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::new(&[len, width], data).expect("sized")
}

pub struct MultiHeadAttention<T: Element> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
}

impl<T: Element> MultiHeadAttention<T> {
    pub fn new(init: &Init<T>, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("attention width {width} is not divisible by {heads} heads")));
        }
        let s = init.sub(name);
        Ok(MultiHeadAttention {
            q: Linear::new(&s, "wq", width, width),
            k: Linear::new(&s, "wk", width, width),
            v: Linear::new(&s, "wv", width, width),
            o: Linear::new(&s, "wo", width, width),
            heads,
        })
    }

    fn split(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [b, l, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let dh = c / self.heads;
        x.reshape(&[b, l, self.heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * self.heads, l, dh])
    }

    /// `x: [B, L, C]` -> (output `[B, L, C]`, weights `[B, heads, L, L]`).
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if x.rank() != 3 {
            return Err(Error::dim("attention", "rank", format!("expected [B, L, C], got {:?}", x.shape())));
        }
        let [b, l, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let dh = c / self.heads;
        let (q, k, v) = (self.split(&self.q.forward(x)?)?, self.split(&self.k.forward(x)?)?, self.split(&self.v.forward(x)?)?);
        let logits = q.bmm(&k, true)?.mul_scalar(T::of(1.0 / (dh as f64).sqrt()));
        let att = logits.softmax(2)?;
        let heads = att.bmm(&v, false)?;
        let merged = heads.reshape(&[b, self.heads, l, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b, l, c])?;
        Ok((self.o.forward(&merged)?, att.reshape(&[b, self.heads, l, l])?))
    }
}

/// Attention, residual, norm; feed-forward, residual, norm.
pub struct EncoderBlock<T: Element> {
    pub attn: MultiHeadAttention<T>,
    pub norm1: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
    pub norm2: LayerNorm<T>,
}

impl<T: Element> EncoderBlock<T> {
    pub fn new(init: &Init<T>, name: &str, width: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        let s = init.sub(name);
        Ok(EncoderBlock {
            attn: MultiHeadAttention::new(&s, "attn", width, heads)?,
            norm1: LayerNorm::new(&s, "norm1", width),
            ff1: Linear::new(&s, "ff1", width, width * ffn_mult),
            ff2: Linear::new(&s, "ff2", width * ffn_mult, width),
            norm2: LayerNorm::new(&s, "norm2", width),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, _) = self.attn.forward(x)?;
        let x = self.norm1.forward(&x.add(&a)?)?;
        let f = self.ff2.forward(&self.ff1.forward(&x)?.relu())?;
        self.norm2.forward(&x.add(&f)?)
    }
}

pub struct DisparityTransformer<T: Element> {
    pub down: Conv3d<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub width: usize,
}

impl<T: Element> DisparityTransformer<T> {
    pub fn new(init: &Init<T>, cin: usize, width: usize, blocks: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        let s = init.sub("dt");
        let blocks = (0..blocks)
            .map(|i| EncoderBlock::new(&s, &format!("block{i}"), width, heads, ffn_mult))
            .collect::<Result<Vec<_>>>()?;
        Ok(DisparityTransformer {
            down: Conv3d::with_padding(&s, "down", cin, width, [4, 4, 4], [4, 4, 4], [0, 0, 0], true),
            blocks,
            width,
        })
    }

    /// Tokens `[N * H' * W', D', C]` from a `[N, C, D', H', W']` volume.
    pub fn to_tokens(v: &Tensor<T>) -> Result<Tensor<T>> {
        let s = v.shape().to_vec();
        v.permute(&[0, 3, 4, 2, 1])?.reshape(&[s[0] * s[3] * s[4], s[2], s[1]])
    }

    pub fn from_tokens(t: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        let [n, c, d, h, w] = [shape[0], shape[1], shape[2], shape[3], shape[4]];
        t.reshape(&[n, h, w, d, c])?.permute(&[0, 4, 3, 1, 2])
    }

    /// `[N, C_in, D, H, W]` -> `[N, width, D, H, W]`; extents must be multiples of 4.
    pub fn forward(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let s = v.shape().to_vec();
        if s.len() != 5 {
            return Err(Error::dim("dt_forward", "rank", format!("expected [N, C, D, H, W], got {s:?}")));
        }
        if s[2..].iter().any(|&e| e % 4 != 0 || e == 0) {
            return Err(Error::Config(format!("disparity transformer needs volume extents divisible by 4, got {:?}", &s[2..])));
        }
        let x = self.down.forward(v)?;
        let xs = x.shape().to_vec();
        let mut t = Self::to_tokens(&x)?;
        t = t.add_broadcast(&sinusoidal_encoding(xs[2], self.width))?;
        for b in &self.blocks {
            t = b.forward(&t)?;
        }
        trilinear_resize(&Self::from_tokens(&t, &xs)?, [s[2], s[3], s[4]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check_params, ParamStore};
    use crate::tensor::GradCheckOptions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Per-head attention from the textbook formula.
    fn attention_oracle(mha: &MultiHeadAttention<f64>, x: &[f64], l: usize, c: usize) -> Vec<f64> {
        let proj = |lin: &Linear<f64>| -> Vec<f64> {
            let (w, b) = (lin.weight.values(), lin.bias.values());
            let mut y = vec![0.0; l * c];
            for t in 0..l {
                for o in 0..c {
                    y[t * c + o] = b[o] + (0..c).map(|i| w[o * c + i] * x[t * c + i]).sum::<f64>();
                }
            }
            y
        };
        let (q, k, v) = (proj(&mha.q), proj(&mha.k), proj(&mha.v));
        let dh = c / mha.heads;
        let mut cat = vec![0.0; l * c];
        for hd in 0..mha.heads {
            for i in 0..l {
                let s: Vec<f64> = (0..l)
                    .map(|j| (0..dh).map(|e| q[i * c + hd * dh + e] * k[j * c + hd * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for e in 0..dh {
                    cat[i * c + hd * dh + e] = (0..l).map(|j| (s[j] - m).exp() / z * v[j * c + hd * dh + e]).sum();
                }
            }
        }
        let (w, b) = (mha.o.weight.values(), mha.o.bias.values());
        let mut out = vec![0.0; l * c];
        for t in 0..l {
            for o in 0..c {
                out[t * c + o] = b[o] + (0..c).map(|i| w[o * c + i] * cat[t * c + i]).sum::<f64>();
            }
        }
        out
    }

    #[test]
    fn attention_matches_direct_formula() {
        let store = ParamStore::<f64>::new(2);
        let mha = MultiHeadAttention::new(&store.root(), "a", 8, 4).unwrap();
        for b in [&mha.q.bias, &mha.k.bias, &mha.v.bias, &mha.o.bias] {
            b.set_values(rand_t(&[8], 9).to_vec()).unwrap();
        }
        let x = rand_t(&[3, 2, 8], 3);
        let (y, att) = mha.forward(&x).unwrap();
        for bt in 0..3 {
            let want = attention_oracle(&mha, &x.data()[bt * 16..(bt + 1) * 16], 2, 8);
            let got = &y.data()[bt * 16..(bt + 1) * 16];
            let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-5, "{err}");
        }
        for row in att.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let store = ParamStore::<f64>::new(4);
        let mha = MultiHeadAttention::new(&store.root(), "a", 8, 4).unwrap();
        let x = rand_t(&[5, 1, 8], 5);
        let (y, _) = mha.forward(&x).unwrap();
        let want = mha.o.forward(&mha.v.forward(&x).unwrap()).unwrap();
        let err = y.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6);
    }

    #[test]
    fn token_rows_are_independent() {
        let store = ParamStore::<f64>::new(6);
        let mha = MultiHeadAttention::new(&store.root(), "a", 8, 4).unwrap();
        let x = rand_t(&[4, 3, 8], 7);
        let (y, _) = mha.forward(&x).unwrap();
        let perm = [2, 0, 3, 1];
        let xp: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * 24..(i + 1) * 24].to_vec()).collect();
        let (yp, _) = mha.forward(&Tensor::new(&[4, 3, 8], xp).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            let (a, b) = (&yp.data()[k * 24..(k + 1) * 24], &y.data()[i * 24..(i + 1) * 24]);
            assert!(a.iter().zip(b).all(|(p, q)| (p - q).abs() <= 1e-12));
        }
    }

    #[test]
    fn encoding_values() {
        let pe = sinusoidal_encoding::<f64>(3, 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.data()[6] - (0.01f64).sin()).abs() < 1e-15);
        assert!((pe.data()[7] - (0.01f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn forward_shapes_and_divisibility() {
        let store = ParamStore::<f32>::new(0);
        let dt = DisparityTransformer::new(&store.root(), 6, 8, 2, 4, 4).unwrap();
        let y = dt.forward(&Tensor::zeros(&[2, 6, 8, 8, 12])).unwrap();
        assert_eq!(y.shape(), &[2, 8, 8, 8, 12]);
        assert!(matches!(dt.forward(&Tensor::zeros(&[1, 6, 8, 6, 12])), Err(Error::Config(_))));
        assert!(matches!(DisparityTransformer::<f32>::new(&store.root().sub("x"), 6, 6, 1, 4, 4), Err(Error::Config(_))));
    }

    #[test]
    fn token_reshape_round_trips() {
        let v = rand_t(&[2, 3, 4, 2, 5], 1);
        let t = DisparityTransformer::to_tokens(&v).unwrap();
        assert_eq!(t.shape(), &[20, 4, 3]);
        // token (n, h, w) position d channel c
        assert_eq!(t.data()[((1 * 2 + 1) * 5 + 3) * 12 + 2 * 3 + 1], v.data()[((((1 * 3 + 1) * 4 + 2) * 2 + 1) * 5) + 3]);
        let back = DisparityTransformer::from_tokens(&t, v.shape()).unwrap();
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn gradient_check() {
        let store = ParamStore::<f64>::new(8);
        let dt = DisparityTransformer::new(&store.root(), 2, 4, 1, 2, 2).unwrap();
        store.perturb(1, 0.1).unwrap();
        let x = rand_t(&[1, 2, 8, 4, 4], 9);
        let w = rand_t(&[1, 4, 8, 4, 4], 10);
        let opts = GradCheckOptions { max_entries: Some(8), ..Default::default() };
        let r = grad_check_params(|| Ok(dt.forward(&x)?.mul(&w)?.sum()), &store.trainable(), &opts).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}
