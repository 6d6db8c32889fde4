//! Unary and context feature extraction with a frozen prior branch.
//!
//! Both networks take images as `[N, 3, H, W]` in `[0, 1]` with `H` and `W`
//! multiples of 32. The frozen prior feature (full resolution) is brought to
//! 1/4 scale by a 4x4 stride-4 convolution and concatenated to the CNN's 1/4
//! level.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBn2d, Init, Mode, ResBlock2d};
use crate::tensor::{conv2d, no_grad, Checkpoint, Element, Tensor};

pub const SCALES: [usize; 4] = [4, 8, 16, 32];
pub const CONTEXT_SCALES: [usize; 3] = [4, 8, 16];

/// A frozen feature extractor standing in for a pretrained monocular model.
pub trait PriorProvider<T: Element>: Send + Sync {
    /// Channel count `C_v` of the returned features.
    fn channels(&self) -> usize;

    /// `img: [3, H, W]` -> `[C_v, H, W]`, never tracking gradients. `id`
    /// names the image for providers that look features up by key.
    fn features(&self, img: &Tensor<T>, id: Option<&str>) -> Result<Tensor<T>>;

    /// Batched form over `[N, 3, H, W]`.
    fn batch(&self, imgs: &Tensor<T>, ids: Option<&[String]>) -> Result<Tensor<T>> {
        if imgs.rank() != 4 || imgs.shape()[1] != 3 {
            return Err(Error::dim("prior", "channels (axis 1)", format!("expected [N, 3, H, W], got {:?}", imgs.shape())));
        }
        let (n, h, w) = (imgs.shape()[0], imgs.shape()[2], imgs.shape()[3]);
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            let img = imgs.detach().narrow(0, i, 1)?.reshape(&[3, h, w])?;
            let f = self.features(&img, ids.map(|v| v[i].as_str()))?;
            parts.push(f.reshape(&[1, self.channels(), h, w])?);
        }
        Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
    }
}

/// Fixed-seed, three-layer 3x3 convolutional extractor at full resolution.
pub struct ToyPrior<T: Element> {
    channels: usize,
    layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Element> ToyPrior<T> {
    pub fn new(seed: u64, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for _ in 0..3 {
            let n = channels * cin * 9;
            let bound = (3.0 / (cin * 9) as f64).sqrt();
            let w: Vec<T> = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
            let b: Vec<T> = (0..channels).map(|_| T::of(rng.gen_range(-0.1..0.1))).collect();
            layers.push((
                Tensor::new(&[channels, cin, 3, 3], w).expect("sized"),
                Tensor::new(&[channels], b).expect("sized"),
            ));
            cin = channels;
        }
        ToyPrior { channels, layers }
    }

    /// The frozen weights and biases, in layer order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }
}

impl<T: Element> PriorProvider<T> for ToyPrior<T> {
    fn channels(&self) -> usize {
        self.channels
    }

    fn features(&self, img: &Tensor<T>, _id: Option<&str>) -> Result<Tensor<T>> {
        if img.rank() != 3 || img.shape()[0] != 3 {
            return Err(Error::dim("toy_prior", "channels (axis 0)", format!("expected [3, H, W], got {:?}", img.shape())));
        }
        let (h, w) = (img.shape()[1], img.shape()[2]);
        no_grad(|| {
            let mut x = img.detach().reshape(&[1, 3, h, w])?;
            for (i, (wt, b)) in self.layers.iter().enumerate() {
                x = conv2d(&x, wt, Some(b), [1, 1], [1, 1])?;
                if i + 1 < self.layers.len() {
                    x = x.tanh();
                }
            }
            x.reshape(&[self.channels, h, w])
        })
    }
}

/// Precomputed prior maps stored in the checkpoint container under
/// `prior/<image-id>`, each `[C_v, H, W]`.
pub struct FileBackedPrior {
    channels: usize,
    extent: (usize, usize),
    maps: Checkpoint,
}

impl FileBackedPrior {
    /// Every entry must be `[channels, height, width]`.
    pub fn new(maps: Checkpoint, channels: usize, extent: (usize, usize)) -> Result<Self> {
        for e in &maps.entries {
            if e.shape != [channels, extent.0, extent.1] {
                return Err(Error::Shape(format!(
                    "prior entry `{}` is {:?}, expected {:?}",
                    e.name,
                    e.shape,
                    [channels, extent.0, extent.1]
                )));
            }
        }
        Ok(FileBackedPrior { channels, extent, maps })
    }

    pub fn load(path: impl AsRef<Path>, channels: usize, extent: (usize, usize)) -> Result<Self> {
        Self::new(Checkpoint::load(path)?, channels, extent)
    }

    pub fn key(id: &str) -> String {
        format!("prior/{id}")
    }
}

impl<T: Element> PriorProvider<T> for FileBackedPrior {
    fn channels(&self) -> usize {
        self.channels
    }

    fn features(&self, img: &Tensor<T>, id: Option<&str>) -> Result<Tensor<T>> {
        let (h, w) = (img.shape()[img.rank() - 2], img.shape()[img.rank() - 1]);
        if (h, w) != self.extent {
            return Err(Error::Shape(format!(
                "file-backed prior holds {}x{} maps, image is {}x{}",
                self.extent.0, self.extent.1, h, w
            )));
        }
        let id = id.ok_or_else(|| Error::Config("file-backed prior needs an image id".into()))?;
        let e = self.maps.get(&Self::key(id)).ok_or_else(|| Error::MissingEntry(Self::key(id)))?;
        Tensor::new(&e.shape, e.values.iter().map(|&v| T::of(v as f64)).collect())
    }
}

pub(crate) fn check_padding(op: &str, x: &Tensor<impl Element>) -> Result<()> {
    if x.rank() != 4 || x.shape()[1] != 3 {
        return Err(Error::dim("features", "channels (axis 1)", format!("{op}: expected [N, 3, H, W], got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::Padding(format!("{op}: image is {h}x{w}; pad height and width to multiples of 32")));
    }
    Ok(())
}

/// Pad `[N, C, H, W]` on the right and bottom by edge replication up to the
/// next multiple of `m`.
pub fn pad_to_multiple<T: Element>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let nc = s[0] * s[1];
    let mut data = Vec::with_capacity(nc * ph * pw);
    for c in 0..nc {
        let src = &x.data()[c * h * w..(c + 1) * h * w];
        for y in 0..ph {
            let row = &src[y.min(h - 1) * w..(y.min(h - 1) + 1) * w];
            data.extend_from_slice(row);
            data.extend(std::iter::repeat(row[w - 1]).take(pw - w));
        }
    }
    Tensor::new(&[s[0], s[1], ph, pw], data)
}

/// Crop the top-left `h x w` window of `[N, C, H, W]`.
pub fn crop<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    x.narrow(2, 0, h)?.narrow(3, 0, w)
}

/// Multi-level unary features, levels at scales 4, 8, 16, 32.
pub struct FeaturePyramid<T: Element> {
    pub levels: [Tensor<T>; 4],
}

impl<T: Element> FeaturePyramid<T> {
    pub fn level(&self, scale: usize) -> &Tensor<T> {
        &self.levels[SCALES.iter().position(|&s| s == scale).expect("scale in {4, 8, 16, 32}")]
    }
}

/// 4x4 stride-4 convolution bringing a full-resolution prior to 1/4 scale.
pub struct PriorAdapter<T: Element> {
    pub conv: Conv2d<T>,
}

impl<T: Element> PriorAdapter<T> {
    pub fn new(init: &Init<T>, name: &str, channels: usize) -> Self {
        PriorAdapter {
            conv: Conv2d::with_padding(init, name, channels, channels, [4, 4], [4, 4], [0, 0], true),
        }
    }

    pub fn forward(&self, prior: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(&prior.detach())
    }
}

/// Stride-2 stem then four [conv s2, bn, relu, residual block] stages.
pub struct FeatureNet<T: Element> {
    stem: ConvBn2d<T>,
    stages: Vec<(ConvBn2d<T>, ResBlock2d<T>)>,
    pub adapter: PriorAdapter<T>,
    pub channels: [usize; 4],
    pub prior_channels: usize,
}

impl<T: Element> FeatureNet<T> {
    pub fn new(init: &Init<T>, stem: usize, channels: [usize; 4], prior_channels: usize) -> Self {
        let s = init.sub("feature");
        let mut stages = Vec::new();
        let mut cin = stem;
        for (i, &c) in channels.iter().enumerate() {
            let st = s.sub(&format!("stage{i}"));
            stages.push((ConvBn2d::new(&st, "down", cin, c, 3, 2, true), ResBlock2d::new(&st, "res", c)));
            cin = c;
        }
        FeatureNet {
            stem: ConvBn2d::new(&s, "stem", 3, stem, 3, 2, true),
            stages,
            adapter: PriorAdapter::new(&s, "prior_adapter", prior_channels),
            channels,
            prior_channels,
        }
    }

    /// Channel count of the 1/4 level (CNN plus prior).
    pub fn out_channels(&self) -> usize {
        self.channels[0] + self.prior_channels
    }

    /// `img: [N, 3, H, W]`, `prior: [N, C_v, H, W]`.
    pub fn forward(&self, img: &Tensor<T>, prior: &Tensor<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
        check_padding("extract_unary", img)?;
        check_prior(img, prior, self.prior_channels)?;
        let mut x = self.stem.forward(&normalize_image(img), mode)?;
        let mut levels = Vec::with_capacity(4);
        for (down, res) in &self.stages {
            x = res.forward(&down.forward(&x, mode)?, mode)?;
            levels.push(x.clone());
        }
        let p = self.adapter.forward(prior)?;
        levels[0] = Tensor::concat(&[&levels[0], &p], 1)?;
        let levels: [Tensor<T>; 4] = levels.try_into().map_err(|_| Error::Shape("pyramid depth".into()))?;
        Ok(FeaturePyramid { levels })
    }
}

fn check_prior<T: Element>(img: &Tensor<T>, prior: &Tensor<T>, c: usize) -> Result<()> {
    let (s, p) = (img.shape(), prior.shape());
    if p.len() != 4 || p[0] != s[0] || p[1] != c || p[2] != s[2] || p[3] != s[3] {
        return Err(Error::dim(
            "features",
            "prior",
            format!("prior {:?} does not match image {:?} with {} channels", p, s, c),
        ));
    }
    Ok(())
}

/// Map `[0, 1]` intensities to `[-1, 1]`.
fn normalize_image<T: Element>(img: &Tensor<T>) -> Tensor<T> {
    img.mul_scalar(T::of(2.0)).add_scalar(T::of(-1.0))
}

/// `f_c` at scales 4, 8, 16 with `h_0 = tanh(f_c)` and `c = relu(f_c)`.
pub struct ContextFeatures<T: Element> {
    pub fc: [Tensor<T>; 3],
}

impl<T: Element> ContextFeatures<T> {
    pub fn hidden(&self) -> [Tensor<T>; 3] {
        self.fc.clone().map(|f| f.tanh())
    }

    pub fn context(&self) -> [Tensor<T>; 3] {
        self.fc.clone().map(|f| f.relu())
    }
}

/// Residual blocks and stride-2 layers down to 1/16, with the prior adapted
/// at 1/4 exactly as in [`FeatureNet`].
pub struct ContextNet<T: Element> {
    stem: ConvBn2d<T>,
    down4: ConvBn2d<T>,
    res4: ResBlock2d<T>,
    pub adapter: PriorAdapter<T>,
    fuse: ConvBn2d<T>,
    down8: ConvBn2d<T>,
    res8: ResBlock2d<T>,
    down16: ConvBn2d<T>,
    res16: ResBlock2d<T>,
    heads: Vec<Conv2d<T>>,
    pub prior_channels: usize,
}

impl<T: Element> ContextNet<T> {
    pub fn new(init: &Init<T>, width: usize, hidden: [usize; 3], prior_channels: usize) -> Self {
        let s = init.sub("context");
        let heads = (0..3)
            .map(|i| Conv2d::new(&s, &format!("head{}", CONTEXT_SCALES[i]), width, hidden[i], [3, 3], 1, true))
            .collect();
        ContextNet {
            stem: ConvBn2d::new(&s, "stem", 3, width, 3, 2, true),
            down4: ConvBn2d::new(&s, "down4", width, width, 3, 2, true),
            res4: ResBlock2d::new(&s, "res4", width),
            adapter: PriorAdapter::new(&s, "prior_adapter", prior_channels),
            fuse: ConvBn2d::new(&s, "fuse", width + prior_channels, width, 3, 1, true),
            down8: ConvBn2d::new(&s, "down8", width, width, 3, 2, true),
            res8: ResBlock2d::new(&s, "res8", width),
            down16: ConvBn2d::new(&s, "down16", width, width, 3, 2, true),
            res16: ResBlock2d::new(&s, "res16", width),
            heads,
            prior_channels,
        }
    }

    pub fn forward(&self, img: &Tensor<T>, prior: &Tensor<T>, mode: Mode) -> Result<ContextFeatures<T>> {
        check_padding("extract_context", img)?;
        check_prior(img, prior, self.prior_channels)?;
        let x = self.stem.forward(&normalize_image(img), mode)?;
        let x4 = self.res4.forward(&self.down4.forward(&x, mode)?, mode)?;
        let p = self.adapter.forward(prior)?;
        let x4 = self.fuse.forward(&Tensor::concat(&[&x4, &p], 1)?, mode)?;
        let x8 = self.res8.forward(&self.down8.forward(&x4, mode)?, mode)?;
        let x16 = self.res16.forward(&self.down16.forward(&x8, mode)?, mode)?;
        let fc = [self.heads[0].forward(&x4)?, self.heads[1].forward(&x8)?, self.heads[2].forward(&x16)?];
        Ok(ContextFeatures { fc })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[1, 3, h, w], (0..3 * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn pyramid_shapes_and_prior_channels() {
        let store = ParamStore::<f32>::new(0);
        let net = FeatureNet::new(&store.root(), 16, [24, 32, 48, 64], 8);
        let prior = ToyPrior::new(1, 8);
        let img = image(64, 64, 2);
        let p = prior.batch(&img, None).unwrap();
        let pyr = net.forward(&img, &p, Mode::Eval).unwrap();
        assert_eq!(pyr.level(4).shape(), &[1, 32, 16, 16]);
        assert_eq!(pyr.level(8).shape(), &[1, 32, 8, 8]);
        assert_eq!(pyr.level(16).shape(), &[1, 48, 4, 4]);
        assert_eq!(pyr.level(32).shape(), &[1, 64, 2, 2]);
    }

    #[test]
    fn unpadded_input_is_rejected() {
        let store = ParamStore::<f32>::new(0);
        let net = FeatureNet::new(&store.root(), 8, [8, 8, 8, 8], 4);
        let img = image(48, 64, 0);
        let err = net.forward(&img, &Tensor::zeros(&[1, 4, 48, 64]), Mode::Eval).err().unwrap();
        assert!(matches!(err, Error::Padding(_)), "{err}");
    }

    #[test]
    fn extraction_is_deterministic() {
        let store = ParamStore::<f32>::new(5);
        let net = FeatureNet::new(&store.root(), 8, [8, 8, 8, 8], 4);
        let prior = ToyPrior::new(3, 4);
        let img = image(32, 64, 9);
        let a = net.forward(&img, &prior.batch(&img, None).unwrap(), Mode::Eval).unwrap();
        let b = net.forward(&img, &prior.batch(&img, None).unwrap(), Mode::Eval).unwrap();
        for (x, y) in a.levels.iter().zip(&b.levels) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn zero_image_prior_half_matches_direct_stride4_conv() {
        let store = ParamStore::<f64>::new(4);
        let net = FeatureNet::new(&store.root(), 4, [6, 6, 6, 6], 3);
        let prior = ToyPrior::<f64>::new(8, 3);
        let img = Tensor::<f64>::zeros(&[1, 3, 32, 32]);
        let p = prior.batch(&img, None).unwrap();
        let pyr = net.forward(&img, &p, Mode::Eval).unwrap();
        let half = pyr.level(4).narrow(1, 6, 3).unwrap();
        // direct loop over the 4x4 windows
        let (w, b) = (net.adapter.conv.weight.values(), net.adapter.conv.bias.as_ref().unwrap().values());
        let pv = p.data();
        for o in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let mut acc = b[o];
                    for c in 0..3 {
                        for i in 0..4 {
                            for j in 0..4 {
                                acc += w[((o * 3 + c) * 4 + i) * 4 + j] * pv[(c * 32 + 4 * y + i) * 32 + 4 * x + j];
                            }
                        }
                    }
                    let got = half.data()[(o * 8 + y) * 8 + x];
                    assert!((got - acc).abs() <= 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn context_levels_and_ranges() {
        let store = ParamStore::<f32>::new(1);
        let net = ContextNet::new(&store.root(), 16, [16, 16, 16], 8);
        let prior = ToyPrior::new(1, 8);
        let img = image(64, 64, 3);
        let ctx = net.forward(&img, &prior.batch(&img, None).unwrap(), Mode::Train).unwrap();
        let spatial: Vec<&[usize]> = ctx.fc.iter().map(|f| &f.shape()[2..]).collect();
        assert_eq!(spatial, vec![&[16, 16][..], &[8, 8][..], &[4, 4][..]]);
        for h in ctx.hidden() {
            assert!(h.data().iter().all(|&v| v > -1.0 && v < 1.0));
        }
        assert!(ctx.context()[0].data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn toy_prior_is_frozen_and_seeded() {
        let a = ToyPrior::<f32>::new(11, 5);
        let b = ToyPrior::<f32>::new(11, 5);
        assert!(a.tensors().iter().all(|t| !t.requires_grad()));
        for (h, w) in [(7, 13), (32, 20)] {
            let img = image(h, w, 4).reshape(&[3, h, w]).unwrap();
            let fa = a.features(&img, None).unwrap();
            assert_eq!(fa.shape(), &[5, h, w]);
            assert_eq!(fa.data(), b.features(&img, None).unwrap().data());
            assert!(!fa.requires_grad());
        }
    }

    #[test]
    fn file_backed_prior_checks_extent() {
        let mut ck = Checkpoint::default();
        ck.push(FileBackedPrior::key("a"), &[2, 4, 4], vec![0.5; 32]);
        let fp = FileBackedPrior::new(ck.clone(), 2, (4, 4)).unwrap();
        let img = Tensor::<f32>::zeros(&[3, 4, 4]);
        let f = PriorProvider::<f32>::features(&fp, &img, Some("a")).unwrap();
        assert_eq!(f.shape(), &[2, 4, 4]);
        let wrong = Tensor::<f32>::zeros(&[3, 4, 8]);
        assert!(matches!(PriorProvider::<f32>::features(&fp, &wrong, Some("a")), Err(Error::Shape(_))));
        assert!(matches!(FileBackedPrior::new(ck, 2, (4, 5)), Err(Error::Shape(_))));
    }

    #[test]
    fn padding_replicates_edges_and_crop_restores() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = pad_to_multiple(&x, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        assert_eq!(&p.data()[..8], &[1.0, 2.0, 3.0, 3.0, 4.0, 5.0, 6.0, 6.0]);
        assert_eq!(&p.data()[12..], &[4.0, 5.0, 6.0, 6.0]);
        assert_eq!(crop(&p, 2, 3).unwrap().data(), x.data());
    }
}
