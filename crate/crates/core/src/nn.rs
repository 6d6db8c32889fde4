//! Named parameters, their store, and the basic layers built on tensors.

use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, conv2d, conv3d, Checkpoint, Element, GradCheckReport, Tensor};

/// Train mode uses batch statistics in normalization layers and updates the
/// running estimates; eval mode uses the running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct ParamInner<T: Element> {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    value: RwLock<Tensor<T>>,
}

/// A named, shareable model parameter (or non-trainable buffer).
pub struct Param<T: Element = f32>(Arc<ParamInner<T>>);

impl<T: Element> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param(Arc::clone(&self.0))
    }
}

impl<T: Element> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.0.name, self.0.shape)
    }
}

impl<T: Element> Param<T> {
    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn trainable(&self) -> bool {
        self.0.trainable
    }

    /// The current value as a graph leaf.
    pub fn tensor(&self) -> Tensor<T> {
        self.0.value.read().clone()
    }

    pub fn values(&self) -> Vec<T> {
        self.0.value.read().to_vec()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.value.read().grad()
    }

    /// Replace the value with a fresh leaf (drops any gradient).
    pub fn set_values(&self, data: Vec<T>) -> Result<()> {
        let t = Tensor::new(&self.0.shape, data)?.with_requires_grad(self.0.trainable);
        *self.0.value.write() = t;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.0.value.read().zero_grad();
    }

    pub fn ptr_eq(&self, other: &Param<T>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// Owns every parameter and buffer of a model, in registration order.
pub struct ParamStore<T: Element = f32> {
    params: Mutex<Vec<Param<T>>>,
    rng: Mutex<ChaCha8Rng>,
}

impl<T: Element> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Mutex::new(Vec::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn root(&self) -> Init<'_, T> {
        Init {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn all(&self) -> Vec<Param<T>> {
        self.params.lock().clone()
    }

    pub fn trainable(&self) -> Vec<Param<T>> {
        self.params.lock().iter().filter(|p| p.trainable()).cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Param<T>> {
        self.params.lock().iter().find(|p| p.name() == name).cloned()
    }

    /// Number of trainable scalar values.
    pub fn num_trainable_values(&self) -> usize {
        self.trainable().iter().map(|p| tensor::numel_of(p.shape())).sum()
    }

    fn register(&self, name: String, shape: &[usize], data: Vec<T>, trainable: bool) -> Param<T> {
        let mut params = self.params.lock();
        assert!(params.iter().all(|p| p.name() != name), "duplicate parameter name `{name}`");
        let value = Tensor::new(shape, data).expect("init buffer matches shape").with_requires_grad(trainable);
        let p = Param(Arc::new(ParamInner {
            name,
            shape: shape.to_vec(),
            trainable,
            value: RwLock::new(value),
        }));
        params.push(p.clone());
        p
    }

    pub fn zero_grad(&self) {
        for p in self.params.lock().iter() {
            p.zero_grad();
        }
    }

    /// Add uniform noise in `[-scale, scale]` to every trainable value. Used
    /// to move freshly initialized models off activation kinks (zero biases
    /// feeding relu) before finite-difference checks.
    pub fn perturb(&self, seed: u64, scale: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.trainable() {
            let v = p.values().iter().map(|&x| x + T::of(rng.gen_range(-scale..=scale))).collect();
            p.set_values(v)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.params.lock().iter().map(|p| p.values()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<T>]) -> Result<()> {
        let params = self.all();
        if params.len() != snapshot.len() {
            return Err(Error::Shape("snapshot does not match parameter count".into()));
        }
        for (p, v) in params.iter().zip(snapshot) {
            p.set_values(v.clone())?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        for p in self.params.lock().iter() {
            c.push(p.name(), p.shape(), p.values().iter().map(|v| v.as_f64() as f32).collect());
        }
        c
    }

    /// Load every parameter by name; extra entries are ignored.
    pub fn load_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        for p in self.all() {
            let e = ckpt.get(p.name()).ok_or_else(|| Error::MissingEntry(p.name().to_string()))?;
            if e.shape != p.shape() {
                return Err(Error::Shape(format!("`{}`: checkpoint shape {:?}, model shape {:?}", p.name(), e.shape, p.shape())));
            }
            p.set_values(e.values.iter().map(|&v| T::of(v as f64)).collect())?;
        }
        Ok(())
    }
}

/// Registration handle carrying a name prefix.
pub struct Init<'a, T: Element> {
    store: &'a ParamStore<T>,
    prefix: String,
}

impl<'a, T: Element> Init<'a, T> {
    pub fn sub(&self, name: &str) -> Init<'a, T> {
        Init {
            store: self.store,
            prefix: self.path(name),
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Param<T> {
        let n = tensor::numel_of(shape);
        let data = {
            let mut rng = self.store.rng.lock();
            (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect()
        };
        self.store.register(self.path(name), shape, data, true)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Param<T> {
        self.store.register(self.path(name), shape, vec![T::of(value); tensor::numel_of(shape)], true)
    }

    /// A non-trainable buffer (normalization statistics).
    pub fn buffer(&self, name: &str, shape: &[usize], value: f64) -> Param<T> {
        self.store.register(self.path(name), shape, vec![T::of(value); tensor::numel_of(shape)], false)
    }
}

pub struct Conv2d<T: Element> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl<T: Element> Conv2d<T> {
    pub fn new(init: &Init<T>, name: &str, cin: usize, cout: usize, kernel: [usize; 2], stride: usize, bias: bool) -> Self {
        let padding = [kernel[0] / 2, kernel[1] / 2];
        Self::with_padding(init, name, cin, cout, kernel, [stride, stride], padding, bias)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_padding(
        init: &Init<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        bias: bool,
    ) -> Self {
        let s = init.sub(name);
        let bound = 1.0 / ((cin * kernel[0] * kernel[1]) as f64).sqrt();
        Conv2d {
            weight: s.uniform("weight", &[cout, cin, kernel[0], kernel[1]], bound),
            bias: bias.then(|| s.constant("bias", &[cout], 0.0)),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.as_ref().map(|b| b.tensor());
        conv2d(x, &self.weight.tensor(), b.as_ref(), self.stride, self.padding)
    }
}

pub struct Conv3d<T: Element> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl<T: Element> Conv3d<T> {
    /// `kernel` is `[depth, height, width]`; padding keeps extents at stride 1 for odd kernels.
    pub fn new(init: &Init<T>, name: &str, cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3], bias: bool) -> Self {
        let padding = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        Self::with_padding(init, name, cin, cout, kernel, stride, padding, bias)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_padding(
        init: &Init<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        bias: bool,
    ) -> Self {
        let s = init.sub(name);
        let bound = 1.0 / ((cin * kernel.iter().product::<usize>()) as f64).sqrt();
        Conv3d {
            weight: s.uniform("weight", &[cout, cin, kernel[0], kernel[1], kernel[2]], bound),
            bias: bias.then(|| s.constant("bias", &[cout], 0.0)),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.as_ref().map(|b| b.tensor());
        conv3d(x, &self.weight.tensor(), b.as_ref(), self.stride, self.padding)
    }
}

/// Batch normalization over all axes but the channel axis (1).
pub struct BatchNorm<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(init: &Init<T>, name: &str, channels: usize) -> Self {
        let s = init.sub(name);
        BatchNorm {
            gamma: s.constant("gamma", &[channels], 1.0),
            beta: s.constant("beta", &[channels], 0.0),
            running_mean: s.buffer("running_mean", &[channels], 0.0),
            running_var: s.buffer("running_var", &[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (g, b) = (self.gamma.tensor(), self.beta.tensor());
        match mode {
            Mode::Train => {
                let (y, mean, var) = x.batch_norm_train(&g, &b, T::of(self.eps))?;
                let count = x.numel() / x.shape()[1].max(1);
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                let m = T::of(self.momentum);
                let rm: Vec<T> = self.running_mean.values().iter().zip(&mean).map(|(&r, &v)| (T::one() - m) * r + m * v).collect();
                let rv: Vec<T> = self
                    .running_var
                    .values()
                    .iter()
                    .zip(&var)
                    .map(|(&r, &v)| (T::one() - m) * r + m * v * T::of(unbias))
                    .collect();
                self.running_mean.set_values(rm)?;
                self.running_var.set_values(rv)?;
                Ok(y)
            }
            Mode::Eval => x.batch_norm_eval(&g, &b, &self.running_mean.values(), &self.running_var.values(), T::of(self.eps)),
        }
    }
}

pub struct LayerNorm<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(init: &Init<T>, name: &str, features: usize) -> Self {
        let s = init.sub(name);
        LayerNorm {
            gamma: s.constant("gamma", &[features], 1.0),
            beta: s.constant("beta", &[features], 0.0),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma.tensor(), &self.beta.tensor(), T::of(self.eps))
    }
}

pub struct Linear<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(init: &Init<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let s = init.sub(name);
        Linear {
            weight: s.uniform("weight", &[fan_out, fan_in], 1.0 / (fan_in as f64).sqrt()),
            bias: s.constant("bias", &[fan_out], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight.tensor(), Some(&self.bias.tensor()))
    }
}

/// 2-D convolution without bias, batch norm, optional relu.
pub struct ConvBn2d<T: Element> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    pub relu: bool,
}

impl<T: Element> ConvBn2d<T> {
    pub fn new(init: &Init<T>, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        let s = init.sub(name);
        ConvBn2d {
            conv: Conv2d::new(&s, "conv", cin, cout, [kernel, kernel], stride, false),
            bn: BatchNorm::new(&s, "bn", cout),
            relu,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.bn.forward(&self.conv.forward(x)?, mode)?;
        Ok(if self.relu { y.relu() } else { y })
    }
}

/// Two 3x3 conv-bn layers with an identity shortcut.
pub struct ResBlock2d<T: Element> {
    pub a: ConvBn2d<T>,
    pub b: ConvBn2d<T>,
}

impl<T: Element> ResBlock2d<T> {
    pub fn new(init: &Init<T>, name: &str, channels: usize) -> Self {
        let s = init.sub(name);
        ResBlock2d {
            a: ConvBn2d::new(&s, "a", channels, channels, 3, 1, true),
            b: ConvBn2d::new(&s, "b", channels, channels, 3, 1, false),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.b.forward(&self.a.forward(x, mode)?, mode)?;
        Ok(y.add(x)?.relu())
    }
}

/// Finite-difference check of `f` with respect to stored parameters. Each
/// parameter's entries are perturbed in place and restored afterwards. With
/// `max_entries` set, that many entries per parameter are sampled.
pub fn grad_check_params<F>(f: F, params: &[Param<f64>], opts: &tensor::GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    let scalar = |t: &Tensor<f64>| -> Result<f64> {
        let v = t.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical(format!("grad_check: objective evaluated to {v}")))
        }
    };
    for p in params {
        p.zero_grad();
    }
    let out = f()?;
    scalar(&out)?;
    out.backward()?;
    drop(out);
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; tensor::numel_of(p.shape())]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for (i, p) in params.iter().enumerate() {
        let orig = p.values();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < orig.len() => sample(&mut rng, orig.len(), m).into_vec(),
            _ => (0..orig.len()).collect(),
        };
        for j in entries {
            let mut data = orig.clone();
            data[j] = orig[j] + opts.eps;
            p.set_values(data.clone())?;
            let fp = tensor::no_grad(|| f().and_then(|t| scalar(&t)));
            data[j] = orig[j] - opts.eps;
            p.set_values(data)?;
            let fm = tensor::no_grad(|| f().and_then(|t| scalar(&t)));
            p.set_values(orig.clone())?;
            let numeric = (fp? - fm?) / (2.0 * opts.eps);
            let err = tensor::rel_error(analytic[i][j], numeric, opts.floor);
            report.entries_checked += 1;
            if report.entries_checked == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = analytic[i][j];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
