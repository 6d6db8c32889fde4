//! AdamW training with step decay, gradient clipping and NaN abort.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::pad_to_multiple;
use crate::model::{PriorPair, StereoModel, PAD_MULTIPLE};
use crate::nn::{Mode, Param};
use crate::objective::{DisparityMap, GroundTruth, MetricReport, MetricTable};
use crate::synth::{Dataset, StereoSample};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Fraction of `steps` after which the rate drops by `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    /// Fraction of `steps` after which batch norm runs on its running
    /// statistics (frozen) instead of batch statistics; 1 never freezes.
    pub freeze_bn_at: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 1,
            lr: 1e-4,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            decay_at: 0.8,
            decay_factor: 0.1,
            freeze_bn_at: 1.0,
            iters: 22,
            seed: 0,
        }
    }
}

/// First step at the decayed rate.
pub fn decay_step(steps: usize, at: f64) -> usize {
    (steps as f64 * at).floor() as usize
}

pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step >= decay_step(cfg.steps, cfg.decay_at) {
        cfg.lr * cfg.decay_factor
    } else {
        cfg.lr
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Param<impl Element>], weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.values().len()]).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: zeros(), v: zeros() }
    }

    /// `grads[i]` belongs to `params[i]`.
    pub fn step<T: Element>(&mut self, params: &[Param<T>], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match the parameter list".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let vals: Vec<T> = p
                .values()
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                    let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                    let x = x.as_f64();
                    T::of(x - lr * (update + self.weight_decay * x))
                })
                .collect();
            p.set_values(vals)?;
        }
        Ok(())
    }
}

/// Gradients as f64, zero-filled for unused parameters, scaled to `max_norm`
/// in global L2 norm. Returns the norm before clipping.
pub fn clipped_grads<T: Element>(params: &[Param<T>], max_norm: f64) -> (Vec<Vec<f64>>, f64) {
    let mut grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| match p.grad() {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; p.values().len()],
        })
        .collect();
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    (grads, norm)
}

/// Network-ready tensors for one sample (padded), with its prior cached.
pub struct Prepared<T: Element> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
    pub priors: PriorPair<T>,
    pub gt: GroundTruth,
}

fn pad_gt(gt: &GroundTruth, h: usize, w: usize) -> Result<GroundTruth> {
    let (gh, gw) = (gt.height(), gt.width());
    let mut d = vec![0f32; h * w];
    let mut v = vec![false; h * w];
    for y in 0..gh {
        d[y * w..y * w + gw].copy_from_slice(&gt.disparity.data[y * gw..(y + 1) * gw]);
        v[y * w..y * w + gw].copy_from_slice(&gt.valid[y * gw..(y + 1) * gw]);
    }
    GroundTruth::new(DisparityMap::new(h, w, d)?, v)
}

pub fn prepare<T: Element>(model: &StereoModel<T>, id: &str, s: &StereoSample) -> Result<Prepared<T>> {
    let (h, w) = (s.left.height, s.left.width);
    let left = s.left.to_tensor::<T>().reshape(&[1, 3, h, w])?;
    let right = s.right.to_tensor::<T>().reshape(&[1, 3, h, w])?;
    let ids = [id.to_string()];
    let p = model.priors(&left, &right, Some(&ids))?;
    let left = pad_to_multiple(&left, PAD_MULTIPLE)?;
    let (ph, pw) = (left.shape()[2], left.shape()[3]);
    Ok(Prepared {
        right: pad_to_multiple(&right, PAD_MULTIPLE)?,
        left,
        priors: PriorPair { left: pad_to_multiple(&p.left, PAD_MULTIPLE)?, right: pad_to_multiple(&p.right, PAD_MULTIPLE)? },
        gt: pad_gt(&s.gt, ph, pw)?,
    })
}

fn batch<T: Element>(items: &[&Prepared<T>]) -> Result<(Tensor<T>, Tensor<T>, PriorPair<T>, Vec<GroundTruth>)> {
    let cat = |f: &dyn Fn(&Prepared<T>) -> &Tensor<T>| -> Result<Tensor<T>> { Tensor::concat(&items.iter().map(|p| f(p)).collect::<Vec<_>>(), 0) };
    Ok((
        cat(&|p| &p.left)?,
        cat(&|p| &p.right)?,
        PriorPair { left: cat(&|p| &p.priors.left)?, right: cat(&|p| &p.priors.right)? },
        items.iter().map(|p| p.gt.clone()).collect(),
    ))
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub steps_done: usize,
    /// Set when a non-finite loss or gradient stopped training; the model then
    /// holds the parameters from before the failing step.
    pub aborted: Option<String>,
}

impl TrainReport {
    /// Mean loss over a trailing window.
    pub fn smoothed(&self, from: usize, len: usize) -> f64 {
        let w = &self.losses[from.min(self.losses.len())..(from + len).min(self.losses.len())];
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

/// Train on `data` for `cfg.steps` optimizer steps. `log` receives
/// `(step, loss, lr)` after each step.
pub fn train<T: Element>(model: &StereoModel<T>, data: &Dataset, cfg: &TrainConfig, mut log: impl FnMut(usize, f64, f64)) -> Result<TrainReport> {
    if cfg.batch_size == 0 || cfg.iters == 0 {
        return Err(Error::Config("batch_size and iters must be at least 1".into()));
    }
    let mut report = TrainReport::default();
    if cfg.steps == 0 {
        return Ok(report);
    }
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let prepared: Vec<Prepared<T>> = data.ids.iter().zip(&data.samples).map(|(id, s)| prepare(model, id, s)).collect::<Result<_>>()?;
    let params = model.store.trainable();
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..prepared.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..cfg.batch_size.min(order.len())).collect();
        let items: Vec<&Prepared<T>> = idx.iter().map(|&i| &prepared[i]).collect();
        let (l, r, p, gts) = batch(&items)?;
        let good = model.store.snapshot();
        model.store.zero_grad();
        let mode = if step >= decay_step(cfg.steps, cfg.freeze_bn_at) { Mode::Eval } else { Mode::Train };
        let loss = model.forward(&l, &r, &p, cfg.iters, mode).and_then(|out| model.loss(&out, &gts));
        let loss = match loss {
            Ok(v) => v,
            Err(Error::Numerical(m)) => {
                model.store.restore(&good)?;
                report.aborted = Some(m);
                return Ok(report);
            }
            Err(e) => return Err(e),
        };
        let value = loss.item().as_f64();
        let fail = if value.is_finite() {
            loss.backward()?;
            drop(loss);
            let (grads, norm) = clipped_grads(&params, cfg.clip_norm);
            if norm.is_finite() {
                let lr = lr_at(step, cfg);
                opt.step(&params, &grads, lr)?;
                None
            } else {
                Some(format!("non-finite gradient norm at step {step}"))
            }
        } else {
            Some(format!("loss is {value} at step {step}"))
        };
        if let Some(m) = fail {
            model.store.restore(&good)?;
            report.aborted = Some(m);
            return Ok(report);
        }
        report.losses.push(value);
        report.steps_done = step + 1;
        log(step, value, lr_at(step, cfg));
    }
    Ok(report)
}

/// Held-out evaluation of both the refined output and the initialisation.
pub struct Evaluation {
    pub refined: MetricTable,
    pub initial: MetricTable,
}

pub fn evaluate<T: Element>(model: &StereoModel<T>, data: &Dataset, iters: usize, thresholds: &[f64]) -> Result<Evaluation> {
    let mut preds = Vec::with_capacity(data.len());
    for (id, s) in data.ids.iter().zip(&data.samples) {
        preds.push(model.predict(&s.left, &s.right, Some(id), iters)?);
    }
    let rows = |pick: fn(&crate::model::Prediction) -> &DisparityMap| {
        MetricTable::build(data.ids.iter().zip(&preds).zip(&data.samples).map(|((id, p), s)| (id.clone(), pick(p), &s.gt)), thresholds)
    };
    Ok(Evaluation { refined: rows(|p| &p.disparity)?, initial: rows(|p| &p.initial)? })
}

/// Aggregate refined metrics only.
pub fn evaluate_refined<T: Element>(model: &StereoModel<T>, data: &Dataset, iters: usize) -> Result<MetricReport> {
    Ok(evaluate(model, data, iters, &crate::objective::DEFAULT_THRESHOLDS)?.refined.aggregate)
}
