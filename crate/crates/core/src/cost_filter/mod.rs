//! Attentive hybrid cost filtering: hourglass and disparity transformer in
//! parallel, summed, then a single-score head for soft-argmin.

mod apc;
mod hourglass;
mod transformer;

pub use apc::ApcBlock;
pub use hourglass::{ConvBn3d, Hourglass, MIN_EXTENT};
pub use transformer::{sinusoidal_encoding, DisparityTransformer, EncoderBlock, MultiHeadAttention};

use crate::cost_volume::{CostVolume, Stage};
use crate::error::{Error, Result};
use crate::nn::{Conv3d, Init, Mode};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct FilterConfig {
    pub widths: [usize; 3],
    pub spatial_kernel: usize,
    pub disparity_kernel: usize,
    pub dt_blocks: usize,
    pub dt_heads: usize,
    pub dt_ffn_mult: usize,
}

pub struct CostFilter<T: Element> {
    pub hourglass: Hourglass<T>,
    pub dt: DisparityTransformer<T>,
    pub score: Conv3d<T>,
    /// When false the transformer branch is skipped entirely.
    pub use_dt: bool,
}

impl<T: Element> CostFilter<T> {
    pub fn new(init: &Init<T>, cin: usize, cfg: &FilterConfig) -> Result<Self> {
        let s = init.sub("filter");
        let hourglass = Hourglass::new(&s, cin, cfg.widths, cfg.spatial_kernel, cfg.disparity_kernel)?;
        let dt = DisparityTransformer::new(&s, cin, hourglass.out_channels(), cfg.dt_blocks, cfg.dt_heads, cfg.dt_ffn_mult)?;
        Ok(CostFilter {
            score: Conv3d::new(&s, "score", hourglass.out_channels(), 1, [1, 1, 1], [1, 1, 1], true),
            hourglass,
            dt,
            use_dt: true,
        })
    }

    /// `V_C' = hourglass(V_C) + dt(V_C)`.
    pub fn forward(&self, v: &CostVolume<T>, mode: Mode) -> Result<CostVolume<T>> {
        if v.stage != Stage::Raw {
            return Err(Error::Config("cost filtering expects a raw volume".into()));
        }
        let mut out = self.hourglass.forward(&v.data, mode)?;
        if self.use_dt {
            out = out.add(&self.dt.forward(&v.data)?)?;
        }
        Ok(CostVolume {
            data: out,
            gwc_channels: v.gwc_channels,
            stage: Stage::Filtered,
        })
    }

    /// One score per disparity bin: `[N, 1, D, H, W]`.
    pub fn scores(&self, v: &CostVolume<T>) -> Result<Tensor<T>> {
        self.score.forward(&v.data)
    }
}

/// Soft-argmin over the disparity axis of `[N, 1, D, H, W]` scores, giving
/// `[N, 1, H, W]` in bin units.
pub fn init_disparity<T: Element>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    let s = scores.shape().to_vec();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::dim("init_disparity", "channels (axis 1)", format!("expected [N, 1, D, H, W], got {s:?}")));
    }
    if !scores.is_finite() {
        return Err(Error::Numerical("init_disparity: non-finite scores".into()));
    }
    scores.soft_argmin(2)?.reshape(&[s[0], 1, s[3], s[4]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check_params, ParamStore};
    use crate::tensor::GradCheckOptions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> FilterConfig {
        FilterConfig { widths: [4, 4, 4], spatial_kernel: 3, disparity_kernel: 3, dt_blocks: 1, dt_heads: 2, dt_ffn_mult: 2 }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn raw(t: Tensor<f64>) -> CostVolume<f64> {
        CostVolume { data: t, gwc_channels: 2, stage: Stage::Raw }
    }

    #[test]
    fn zeroed_transformer_reproduces_hourglass() {
        let store = ParamStore::<f64>::new(1);
        let mut f = CostFilter::new(&store.root(), 3, &cfg()).unwrap();
        let v = raw(rand_t(&[1, 3, 8, 8, 8], 2));
        let last = f.dt.blocks.last().unwrap();
        last.norm2.gamma.set_values(vec![0.0; 4]).unwrap();
        last.norm2.beta.set_values(vec![0.0; 4]).unwrap();
        let with = f.forward(&v, Mode::Eval).unwrap();
        f.use_dt = false;
        let without = f.forward(&v, Mode::Eval).unwrap();
        assert_eq!(with.data.data(), without.data.data());
        assert_eq!(with.shape(), &[1, 4, 8, 8, 8]);
        assert_eq!(with.stage, Stage::Filtered);
    }

    #[test]
    fn soft_argmin_cases() {
        let mut s = vec![0.0f64; 12];
        s[5] = 50.0;
        let d = init_disparity(&Tensor::new(&[1, 1, 12, 1, 1], s).unwrap()).unwrap();
        assert!((d.item() - 5.0).abs() <= 1e-3);
        let d = init_disparity(&Tensor::<f64>::zeros(&[1, 1, 48, 1, 1])).unwrap();
        assert!((d.item() - 23.5).abs() <= 1e-9);
        let d = init_disparity(&Tensor::new(&[1, 1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap()).unwrap();
        assert!((d.item() - 0.75).abs() <= 1e-12);
        let bad = Tensor::new(&[1, 1, 2, 1, 1], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(init_disparity(&bad), Err(Error::Numerical(_))));
    }

    #[test]
    fn end_to_end_gradient() {
        let store = ParamStore::<f64>::new(5);
        let f = CostFilter::new(&store.root(), 3, &cfg()).unwrap();
        let v = raw(rand_t(&[1, 3, 8, 8, 8], 6));
        store.perturb(1, 0.1).unwrap();
        let target = rand_t(&[1, 1, 8, 8], 7);
        let opts = GradCheckOptions { eps: 1e-5, floor: 1e-5, max_entries: Some(4), ..Default::default() };
        let r = grad_check_params(
            || {
                let d = init_disparity(&f.scores(&f.forward(&v, Mode::Train)?)?)?;
                let e = d.sub(&target)?;
                Ok(e.mul(&e)?.sum())
            },
            &store.trainable(),
            &opts,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?} {}", store.trainable()[r.worst.0].name());
    }
}
