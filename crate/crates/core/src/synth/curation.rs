//! Self-curation: score each sample's BP-2 with the current model, drop the
//! ambiguous ones and regenerate replacements from fresh seeds.

use std::fmt::Write as _;

use super::dataset::Dataset;
use super::generator::{generate_sample, is_renderable, SynthConfig};
use crate::error::{Error, Result};
use crate::model::StereoModel;
use crate::objective::compute_metrics;
use crate::tensor::Element;
use crate::train::{train, TrainConfig, TrainReport};

pub const DEFAULT_THRESHOLD: f64 = 60.0;
/// BP threshold used for scoring, in pixels.
pub const SCORE_BP: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CurationReport {
    pub iteration: usize,
    pub threshold: f64,
    pub ids: Vec<String>,
    /// BP-2 percent per sample; `NaN` where scoring failed.
    pub bp2: Vec<f64>,
    pub rejected: Vec<usize>,
    /// Samples the model failed on, with the reason; these count as rejected.
    pub failures: Vec<(usize, String)>,
    /// Seeds used for the replacements of `rejected`, in order.
    pub replacement_seeds: Vec<u64>,
}

impl CurationReport {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# iteration {} threshold {}\nid\tbp2\trejected\n", self.iteration, self.threshold);
        for (i, id) in self.ids.iter().enumerate() {
            let _ = writeln!(s, "{id}\t{:.4}\t{}", self.bp2[i], self.rejected.contains(&i) as u8);
        }
        s
    }
}

/// Indices whose score is strictly above `threshold`, or not a number.
pub fn rejected_indices(scores: &[f64], threshold: f64) -> Vec<usize> {
    scores.iter().enumerate().filter(|(_, &s)| s.is_nan() || s > threshold).map(|(i, _)| i).collect()
}

/// Source of fresh generator seeds for replacements.
#[derive(Clone, Debug)]
pub struct Regenerator {
    pub synth: SynthConfig,
    pub next_seed: u64,
}

impl Regenerator {
    /// Draw seeds until a renderable sample appears.
    pub fn fresh(&mut self) -> Result<(u64, super::StereoSample)> {
        for _ in 0..1000 {
            let seed = self.next_seed;
            self.next_seed = self.next_seed.wrapping_add(1);
            let s = generate_sample(seed, &self.synth)?;
            if is_renderable(&s, self.synth.max_disp) {
                return Ok((seed, s));
            }
        }
        Err(Error::Data("no renderable replacement in 1000 seeds".into()))
    }
}

/// Score `data` at inference settings and replace every sample with BP-2
/// above `threshold`. Replacements are not re-scored.
pub fn curate<T: Element>(
    data: &Dataset,
    model: &StereoModel<T>,
    threshold: f64,
    iteration: usize,
    regen: &mut Regenerator,
) -> Result<(CurationReport, Dataset)> {
    if !(threshold > 0.0 && threshold < 100.0) {
        return Err(Error::Config(format!("threshold {threshold} must lie in (0, 100)")));
    }
    let mut bp2 = Vec::with_capacity(data.len());
    let mut failures = Vec::new();
    for (i, (id, s)) in data.ids.iter().zip(&data.samples).enumerate() {
        let score = model
            .predict(&s.left, &s.right, Some(id), model.cfg.infer_iters)
            .and_then(|p| compute_metrics(&p.disparity, &s.gt, &[SCORE_BP]))
            .and_then(|r| if r.n_valid == 0 { Err(Error::Data("no valid pixel".into())) } else { Ok(r.bp[0].1) });
        match score {
            Ok(v) => bp2.push(v),
            Err(e) => {
                failures.push((i, e.to_string()));
                bp2.push(f64::NAN);
            }
        }
    }
    let rejected = rejected_indices(&bp2, threshold);
    let mut out = data.clone();
    let mut replacement_seeds = Vec::with_capacity(rejected.len());
    for &i in &rejected {
        let (seed, s) = regen.fresh()?;
        out.samples[i] = s;
        replacement_seeds.push(seed);
    }
    let report = CurationReport { iteration, threshold, ids: data.ids.clone(), bp2, rejected, failures, replacement_seeds };
    Ok((report, out))
}

pub struct LoopOutcome {
    pub data: Dataset,
    pub reports: Vec<CurationReport>,
    pub training: Vec<TrainReport>,
}

/// Alternate training and curation for `rounds` rounds on a single model.
pub fn curation_loop<T: Element>(
    model: &StereoModel<T>,
    data: Dataset,
    train_cfg: &TrainConfig,
    threshold: f64,
    rounds: usize,
    regen: &mut Regenerator,
    mut log: impl FnMut(usize, usize, f64),
) -> Result<LoopOutcome> {
    if rounds == 0 {
        return Err(Error::Config("curation needs at least one round".into()));
    }
    let mut out = LoopOutcome { data, reports: Vec::new(), training: Vec::new() };
    for round in 0..rounds {
        let cfg = TrainConfig { seed: train_cfg.seed.wrapping_add(round as u64), ..train_cfg.clone() };
        let rep = train(model, &out.data, &cfg, |s, l, _| log(round, s, l))?;
        if let Some(m) = &rep.aborted {
            return Err(Error::Numerical(format!("training round {round}: {m}")));
        }
        out.training.push(rep);
        let (report, next) = curate(&out.data, model, threshold, round, regen)?;
        out.reports.push(report);
        out.data = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn synth() -> SynthConfig {
        SynthConfig { height: 32, width: 64, max_disp: 20, n_layers: 2, texture: None }
    }

    #[test]
    fn threshold_arithmetic() {
        assert_eq!(rejected_indices(&[70.0, 10.0, 61.0, 59.0], 60.0), vec![0, 2]);
        assert_eq!(rejected_indices(&[60.0], 60.0), Vec::<usize>::new());
        assert_eq!(rejected_indices(&[f64::NAN], 60.0), vec![0]);
    }

    #[test]
    fn empty_dataset_is_a_no_op() {
        let m = StereoModel::<f32>::new(ModelConfig::micro()).unwrap();
        let mut regen = Regenerator { synth: synth(), next_seed: 9 };
        let (r, d) = curate(&Dataset::default(), &m, 60.0, 0, &mut regen).unwrap();
        assert!(r.bp2.is_empty() && r.rejected.is_empty() && d.is_empty());
        assert_eq!(regen.next_seed, 9);
    }

    #[test]
    fn size_preserved_and_low_scores_kept() {
        let m = StereoModel::<f32>::new(ModelConfig::micro()).unwrap();
        let data = Dataset::generate(3, 0, &synth()).unwrap();
        let mut regen = Regenerator { synth: synth(), next_seed: 1 << 40 };
        let (r, d) = curate(&data, &m, 60.0, 0, &mut regen).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.ids, data.ids);
        for i in 0..3 {
            if r.bp2[i] <= 60.0 {
                assert_eq!(d.samples[i], data.samples[i]);
            } else {
                assert_ne!(d.samples[i], data.samples[i]);
            }
        }
        // a threshold no score can exceed leaves the set bit-identical
        let (r, d) = curate(&data, &m, 99.999_999, 0, &mut regen).unwrap();
        if r.bp2.iter().all(|&v| v <= 99.999_999) {
            assert_eq!(d, data);
        }
        assert!(curate(&data, &m, 100.0, 0, &mut regen).is_err());
    }
}
