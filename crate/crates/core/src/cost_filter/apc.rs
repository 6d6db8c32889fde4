//! Axial-planar convolution: a `[1, Ks, Ks]` spatial convolution followed by
//! a `[Kd, 1, 1]` disparity convolution on `[N, C, D, H, W]` volumes.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv3d, Init, Mode};
use crate::tensor::{Element, Tensor};

pub struct ApcBlock<T: Element> {
    pub spatial: Conv3d<T>,
    pub disparity: Conv3d<T>,
    bn_spatial: BatchNorm<T>,
    bn_disparity: BatchNorm<T>,
    /// Skip normalization and activation (both convolutions stay).
    pub linear: bool,
}

impl<T: Element> ApcBlock<T> {
    pub fn new(init: &Init<T>, name: &str, cin: usize, cout: usize, ks: usize, kd: usize) -> Result<Self> {
        if ks % 2 == 0 || kd % 2 == 0 {
            return Err(Error::Config(format!("APC kernels must be odd, got spatial {ks} and disparity {kd}")));
        }
        let s = init.sub(name);
        Ok(ApcBlock {
            spatial: Conv3d::new(&s, "spatial", cin, cout, [1, ks, ks], [1, 1, 1], false),
            disparity: Conv3d::new(&s, "disparity", cout, cout, [kd, 1, 1], [1, 1, 1], false),
            bn_spatial: BatchNorm::new(&s, "bn_spatial", cout),
            bn_disparity: BatchNorm::new(&s, "bn_disparity", cout),
            linear: false,
        })
    }

    pub fn linear(mut self) -> Self {
        self.linear = true;
        self
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = self.spatial.forward(x)?;
        if !self.linear {
            y = self.bn_spatial.forward(&y, mode)?.relu();
        }
        let mut z = self.disparity.forward(&y)?;
        if !self.linear {
            z = self.bn_disparity.forward(&z, mode)?.relu();
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::conv3d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn even_kernel_is_rejected() {
        let store = ParamStore::<f32>::new(0);
        assert!(matches!(ApcBlock::new(&store.root(), "a", 2, 2, 3, 4), Err(Error::Config(_))));
    }

    #[test]
    fn linear_mode_equals_outer_product_dense_conv() {
        for kd in [3, 5, 17] {
            let store = ParamStore::<f64>::new(kd as u64);
            let apc = ApcBlock::new(&store.root(), "a", 1, 1, 3, kd).unwrap().linear();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x = Tensor::new(&[1, 1, 6, 5, 7], (0..210).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let y = apc.forward(&x, Mode::Eval).unwrap();
            let (a, b) = (apc.spatial.weight.values(), apc.disparity.weight.values());
            let mut k = vec![0.0; kd * 9];
            for d in 0..kd {
                for s in 0..9 {
                    k[d * 9 + s] = b[d] * a[s];
                }
            }
            let dense = conv3d(&x, &Tensor::new(&[1, 1, kd, 3, 3], k).unwrap(), None, [1; 3], [kd / 2, 1, 1]).unwrap();
            let err = y.data().iter().zip(dense.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-5, "kd {kd}: {err}");
        }
    }

    #[test]
    fn identity_kernels_pass_volume_through() {
        let store = ParamStore::<f32>::new(0);
        let apc = ApcBlock::new(&store.root(), "a", 2, 2, 3, 5).unwrap().linear();
        let mut ws = vec![0.0; 2 * 2 * 9];
        let mut wd = vec![0.0; 2 * 2 * 5];
        for c in 0..2 {
            ws[(c * 2 + c) * 9 + 4] = 1.0;
            wd[(c * 2 + c) * 5 + 2] = 1.0;
        }
        apc.spatial.weight.set_values(ws).unwrap();
        apc.disparity.weight.set_values(wd).unwrap();
        let x = Tensor::new(&[1, 2, 4, 3, 3], (0..72).map(|v| v as f32 * 0.1).collect()).unwrap();
        assert_eq!(apc.forward(&x, Mode::Train).unwrap().data(), x.data());
    }
}
