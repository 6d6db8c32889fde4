//! The full stereo network: shared unary features, hybrid cost volume,
//! attentive filtering, soft-argmin initialisation and GRU refinement.

use std::sync::Arc;

use crate::cost_filter::{init_disparity, CostFilter, FilterConfig};
use crate::cost_volume::{correlation_volume, HybridVolume};
use crate::error::{Error, Result};
use crate::features::{crop, pad_to_multiple, ContextNet, FeatureNet, PriorProvider, ToyPrior};
use crate::nn::{Mode, ParamStore};
use crate::objective::{self, upsample_initial, DisparityMap, GroundTruth};
use crate::refiner::{convex_upsample, RefineState, Refiner, RefinerConfig};
use crate::synth::RgbImage;
use crate::tensor::{no_grad, Checkpoint, Element, Tensor};

/// Images are padded to multiples of this before entering the network.
pub const PAD_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Full-resolution disparity range `D`; the volumes span `D / 4` bins.
    pub max_disp: usize,
    pub groups: usize,
    pub prior_channels: usize,
    pub prior_seed: u64,
    pub stem_channels: usize,
    pub feature_channels: [usize; 4],
    pub context_channels: usize,
    pub hidden: [usize; 3],
    pub hourglass: [usize; 3],
    pub spatial_kernel: usize,
    pub disparity_kernel: usize,
    pub dt_blocks: usize,
    pub dt_heads: usize,
    pub dt_ffn_mult: usize,
    pub use_dt: bool,
    pub radius: usize,
    pub motion_channels: usize,
    pub train_iters: usize,
    pub infer_iters: usize,
    pub gamma: f64,
    /// Cut the gradient through `d_k` between refinement steps.
    pub detach_disparity: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            max_disp: 192,
            groups: 8,
            prior_channels: 32,
            prior_seed: 7,
            stem_channels: 32,
            feature_channels: [48, 64, 96, 160],
            context_channels: 64,
            hidden: [64, 64, 64],
            hourglass: [32, 64, 96],
            spatial_kernel: 3,
            disparity_kernel: 17,
            dt_blocks: 4,
            dt_heads: 4,
            dt_ffn_mult: 4,
            use_dt: true,
            radius: 4,
            motion_channels: 64,
            train_iters: 22,
            infer_iters: 32,
            gamma: 0.9,
            detach_disparity: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale channel plan used for the training experiments.
    pub fn toy() -> Self {
        ModelConfig {
            max_disp: 32,
            prior_channels: 8,
            stem_channels: 16,
            feature_channels: [24, 24, 32, 48],
            context_channels: 24,
            hidden: [16, 16, 16],
            hourglass: [16, 24, 32],
            disparity_kernel: 5,
            dt_ffn_mult: 2,
            motion_channels: 16,
            train_iters: 8,
            infer_iters: 16,
            ..Default::default()
        }
    }

    /// Smallest plan, sized for exhaustive 64-bit gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            max_disp: 32,
            groups: 4,
            prior_channels: 4,
            stem_channels: 4,
            feature_channels: [8, 4, 4, 4],
            context_channels: 6,
            hidden: [6, 6, 6],
            hourglass: [6, 6, 6],
            disparity_kernel: 3,
            dt_blocks: 1,
            dt_heads: 2,
            dt_ffn_mult: 2,
            radius: 2,
            motion_channels: 6,
            train_iters: 2,
            infer_iters: 2,
            detach_disparity: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_disp == 0 || self.max_disp % 32 != 0 {
            return bad(format!("max_disp {} must be a positive multiple of 32", self.max_disp));
        }
        if self.groups == 0 || (self.feature_channels[0] + self.prior_channels) % self.groups != 0 {
            return bad(format!(
                "groups {} must divide the 1/4 feature width {}",
                self.groups,
                self.feature_channels[0] + self.prior_channels
            ));
        }
        if self.hourglass[0] % self.dt_heads.max(1) != 0 {
            return bad(format!("dt_heads {} must divide the filter width {}", self.dt_heads, self.hourglass[0]));
        }
        if self.spatial_kernel % 2 == 0 || self.disparity_kernel % 2 == 0 {
            return bad("kernel sizes must be odd".into());
        }
        if self.train_iters == 0 || self.infer_iters == 0 {
            return bad("iteration counts must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} must lie in (0, 1)", self.gamma));
        }
        Ok(())
    }
}

/// Frozen prior maps for a batch of left and right images.
#[derive(Clone)]
pub struct PriorPair<T: Element> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
}

/// Everything a forward pass produces.
pub struct ForwardOutput<T: Element> {
    /// Soft-argmin initialisation at 1/4 scale, `[N, 1, H/4, W/4]`.
    pub d0: Tensor<T>,
    /// `d0` upsampled bilinearly to full resolution, values in full-scale pixels.
    pub d0_full: Tensor<T>,
    /// Convex-upsampled `d_1 .. d_K` at full resolution.
    pub history: Vec<Tensor<T>>,
    pub state: RefineState<T>,
}

impl<T: Element> ForwardOutput<T> {
    pub fn final_disparity(&self) -> &Tensor<T> {
        self.history.last().expect("at least one iteration")
    }
}

pub struct StereoModel<T: Element = f32> {
    pub store: ParamStore<T>,
    pub features: FeatureNet<T>,
    pub context: ContextNet<T>,
    pub volume: HybridVolume<T>,
    pub filter: CostFilter<T>,
    pub refiner: Refiner<T>,
    pub prior: Arc<dyn PriorProvider<T>>,
    pub cfg: ModelConfig,
}

impl<T: Element> StereoModel<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let prior = Arc::new(ToyPrior::<T>::new(cfg.prior_seed, cfg.prior_channels));
        Self::with_prior(cfg, prior)
    }

    pub fn with_prior(cfg: ModelConfig, prior: Arc<dyn PriorProvider<T>>) -> Result<Self> {
        cfg.validate()?;
        if prior.channels() != cfg.prior_channels {
            return Err(Error::Config(format!("prior has {} channels, config says {}", prior.channels(), cfg.prior_channels)));
        }
        let store = ParamStore::new(cfg.seed);
        let root = store.root();
        let features = FeatureNet::new(&root, cfg.stem_channels, cfg.feature_channels, cfg.prior_channels);
        let context = ContextNet::new(&root, cfg.context_channels, cfg.hidden, cfg.prior_channels);
        let volume = HybridVolume::new(&root, features.out_channels(), cfg.groups)?;
        let fcfg = FilterConfig {
            widths: cfg.hourglass,
            spatial_kernel: cfg.spatial_kernel,
            disparity_kernel: cfg.disparity_kernel,
            dt_blocks: cfg.dt_blocks,
            dt_heads: cfg.dt_heads,
            dt_ffn_mult: cfg.dt_ffn_mult,
        };
        let mut filter = CostFilter::new(&root, volume.channels(), &fcfg)?;
        filter.use_dt = cfg.use_dt;
        let refiner = Refiner::new(
            &root,
            RefinerConfig {
                volume_channels: filter.hourglass.out_channels(),
                hidden: cfg.hidden,
                motion: cfg.motion_channels,
                radius: cfg.radius,
                detach_disparity: cfg.detach_disparity,
            },
        );
        drop(root);
        Ok(StereoModel { store, features, context, volume, filter, refiner, prior, cfg })
    }

    /// Prior maps for `[N, 3, H, W]` image batches; never tracks gradients.
    pub fn priors(&self, left: &Tensor<T>, right: &Tensor<T>, ids: Option<&[String]>) -> Result<PriorPair<T>> {
        no_grad(|| {
            Ok(PriorPair {
                left: self.prior.batch(left, ids)?,
                right: self.prior.batch(right, ids)?,
            })
        })
    }

    /// `left, right: [N, 3, H, W]` in `[0, 1]`, H and W multiples of 32.
    pub fn forward(&self, left: &Tensor<T>, right: &Tensor<T>, priors: &PriorPair<T>, iters: usize, mode: Mode) -> Result<ForwardOutput<T>> {
        if left.shape() != right.shape() {
            return Err(Error::dim("forward", "image extents", format!("left {:?} vs right {:?}", left.shape(), right.shape())));
        }
        let n = left.shape()[0];
        // one pass over both views keeps the unary weights shared
        let both = Tensor::concat(&[left, right], 0)?;
        let both_prior = Tensor::concat(&[&priors.left, &priors.right], 0)?;
        let f4 = self.features.forward(&both, &both_prior, mode)?.levels[0].clone();
        let fl = f4.narrow(0, 0, n)?;
        let fr = f4.narrow(0, n, n)?;
        let raw = self.volume.forward(&fl, &fr, self.cfg.max_disp)?;
        let corr = correlation_volume(&fl, &fr)?;
        let filtered = self.filter.forward(&raw, mode)?;
        let d0 = init_disparity(&self.filter.scores(&filtered)?)?;
        let ctx = self.context.forward(left, &priors.left, mode)?;
        let state = RefineState { disparity: d0.clone(), hidden: ctx.hidden(), k: 0 };
        let (state, iterates) = self.refiner.refine(state, &filtered.data, &corr, &ctx.context(), iters)?;
        let history = iterates.iter().map(|it| convex_upsample(&it.disparity, &it.mask)).collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput { d0_full: upsample_initial(&d0)?, d0, history, state })
    }

    /// Training objective for a batch.
    pub fn loss(&self, out: &ForwardOutput<T>, gts: &[GroundTruth]) -> Result<Tensor<T>> {
        objective::loss(&out.d0_full, &out.history, gts, self.cfg.gamma)
    }

    /// Inference on one pair of arbitrary extents: pad, run, crop, clamp.
    pub fn predict(&self, left: &RgbImage, right: &RgbImage, id: Option<&str>, iters: usize) -> Result<Prediction> {
        Ok(self.predict_batch(&[(left, right)], id.map(|s| vec![s.to_string()]).as_deref(), iters)?.remove(0))
    }

    pub fn predict_batch(&self, pairs: &[(&RgbImage, &RgbImage)], ids: Option<&[String]>, iters: usize) -> Result<Vec<Prediction>> {
        let (h, w) = match pairs.first() {
            Some((l, _)) => (l.height, l.width),
            None => return Ok(Vec::new()),
        };
        for (l, r) in pairs {
            if (l.height, l.width) != (h, w) || (r.height, r.width) != (h, w) {
                return Err(Error::dim("predict", "image extents", format!("all images must be {h}x{w}")));
            }
        }
        let stack = |right: bool| -> Result<Tensor<T>> {
            let parts: Vec<Tensor<T>> = pairs
                .iter()
                .map(|p| if right { p.1 } else { p.0 }.to_tensor::<T>().reshape(&[1, 3, h, w]))
                .collect::<Result<_>>()?;
            Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
        };
        let (left, right) = (stack(false)?, stack(true)?);
        let priors = self.priors(&left, &right, ids)?;
        let (left, right) = (pad_to_multiple(&left, PAD_MULTIPLE)?, pad_to_multiple(&right, PAD_MULTIPLE)?);
        let priors = PriorPair { left: pad_to_multiple(&priors.left, PAD_MULTIPLE)?, right: pad_to_multiple(&priors.right, PAD_MULTIPLE)? };
        let out = no_grad(|| self.forward(&left, &right, &priors, iters, Mode::Eval))?;
        let hi = (self.cfg.max_disp - 1) as f32;
        let to_map = |t: &Tensor<T>, b: usize| -> Result<DisparityMap> {
            let mut m = DisparityMap::from_tensor(&crop(t, h, w)?, b)?;
            m.data.iter_mut().for_each(|v| *v = v.clamp(0.0, hi));
            Ok(m)
        };
        (0..pairs.len())
            .map(|b| {
                let disparity = to_map(out.final_disparity(), b)?;
                if disparity.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical("prediction is not finite".into()));
                }
                Ok(Prediction { disparity, initial: to_map(&out.d0_full, b)?, iterations: out.history.len() })
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.store.to_checkpoint()
    }

    pub fn load_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        self.store.load_checkpoint(ckpt)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable_values()
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Final refined disparity, clamped to `[0, D - 1]`.
    pub disparity: DisparityMap,
    /// Soft-argmin initialisation at full resolution, same clamp.
    pub initial: DisparityMap,
    pub iterations: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sample, SynthConfig};

    fn pair(h: usize, w: usize, seed: u64) -> (RgbImage, RgbImage) {
        let s = generate_sample(seed, &SynthConfig { height: h, width: w, max_disp: 16, n_layers: 2, texture: None }).unwrap();
        (s.left, s.right)
    }

    #[test]
    fn configs_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
        let bad = ModelConfig { max_disp: 48, ..ModelConfig::toy() };
        assert!(matches!(StereoModel::<f32>::new(bad), Err(Error::Config(_))));
    }

    #[test]
    fn micro_fits_gradient_budget() {
        let m = StereoModel::<f64>::new(ModelConfig::micro()).unwrap();
        assert!(m.num_parameters() <= 50_000, "{}", m.num_parameters());
    }

    #[test]
    fn predict_pads_crops_and_clamps() {
        let m = StereoModel::<f32>::new(ModelConfig::micro()).unwrap();
        let (l, r) = pair(20, 50, 1);
        let p = m.predict(&l, &r, None, 3).unwrap();
        assert_eq!((p.disparity.height, p.disparity.width, p.iterations), (20, 50, 3));
        assert!(p.disparity.data.iter().all(|v| (0.0..=31.0).contains(v)));
        let q = m.predict(&l, &r, None, 3).unwrap();
        assert_eq!(p.disparity, q.disparity);
        assert_eq!(m.predict(&l, &r, None, 1).unwrap().iterations, 1);
    }

    #[test]
    fn identical_views_give_finite_range() {
        let m = StereoModel::<f32>::new(ModelConfig::micro()).unwrap();
        let (l, _) = pair(32, 64, 2);
        let p = m.predict(&l, &l, None, 2).unwrap();
        assert!(p.disparity.data.iter().all(|v| v.is_finite() && (0.0..=31.0).contains(v)));
    }

    #[test]
    fn extent_mismatch_is_an_error() {
        let m = StereoModel::<f32>::new(ModelConfig::micro()).unwrap();
        let (l, _) = pair(32, 64, 3);
        let (r, _) = pair(32, 40, 3);
        assert!(matches!(m.predict(&l, &r, None, 1), Err(Error::Dimension { .. })));
    }
}
