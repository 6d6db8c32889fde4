//! Training objective and evaluation metrics (EPE, BP-X, D1).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, Element, Tensor};

/// Default BP thresholds in pixels.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [1.0, 2.0, 3.0, 5.0];
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Single-channel full-resolution map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl DisparityMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} map", data.len())));
        }
        Ok(DisparityMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        DisparityMap { height, width, data: vec![value; height * width] }
    }

    /// Batch element `b` of an `[N, 1, H, W]` tensor.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, b: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 1 || b >= s[0] {
            return Err(Error::dim("disparity_map", "shape", format!("need [N, 1, H, W] with N > {b}, got {s:?}")));
        }
        let hw = s[2] * s[3];
        Ok(DisparityMap {
            height: s[2],
            width: s[3],
            data: t.data()[b * hw..(b + 1) * hw].iter().map(|v| v.as_f64() as f32).collect(),
        })
    }
}

/// Ground truth disparity for the left view with its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub disparity: DisparityMap,
    pub valid: Vec<bool>,
}

impl GroundTruth {
    pub fn new(disparity: DisparityMap, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != disparity.data.len() {
            return Err(Error::Shape(format!("mask has {} entries, map has {}", valid.len(), disparity.data.len())));
        }
        Ok(GroundTruth { disparity, valid })
    }

    pub fn height(&self) -> usize {
        self.disparity.height
    }

    pub fn width(&self) -> usize {
        self.disparity.width
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// `gamma^(K-k)` for `k = 1..=K`.
pub fn loss_weights(k: usize, gamma: f64) -> Vec<f64> {
    (1..=k).map(|i| gamma.powi((k - i) as i32)).collect()
}

/// Target and 0/1 mask tensors `[N, 1, H, W]` for a batch of ground truths.
pub fn targets<T: Element>(gts: &[GroundTruth]) -> Result<(Tensor<T>, Tensor<T>, usize)> {
    let first = gts.first().ok_or_else(|| Error::Data("empty ground-truth batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut t = Vec::with_capacity(gts.len() * h * w);
    let mut m = Vec::with_capacity(gts.len() * h * w);
    let mut n_valid = 0;
    for g in gts {
        if g.height() != h || g.width() != w {
            return Err(Error::dim("loss", "ground truth extents", format!("{}x{} vs {h}x{w}", g.height(), g.width())));
        }
        for (&d, &v) in g.disparity.data.iter().zip(&g.valid) {
            t.push(if v { T::of(d as f64) } else { T::zero() });
            m.push(if v { T::one() } else { T::zero() });
            n_valid += v as usize;
        }
    }
    if n_valid == 0 {
        return Err(Error::Data("ground truth has no valid pixel".into()));
    }
    let shape = [gts.len(), 1, h, w];
    Ok((Tensor::new(&shape, t)?, Tensor::new(&shape, m)?, n_valid))
}

/// Bilinear x4 upsampling of a quarter-scale disparity with values scaled by 4.
pub fn upsample_initial<T: Element>(d0: &Tensor<T>) -> Result<Tensor<T>> {
    let s = d0.shape();
    if s.len() != 4 {
        return Err(Error::dim("upsample_initial", "rank", format!("expected [N, 1, H, W], got {s:?}")));
    }
    Ok(bilinear_resize(d0, [s[2] * 4, s[3] * 4])?.mul_scalar(T::of(4.0)))
}

/// Smooth-L1 on the initial disparity plus exponentially weighted L1 on
/// every refined disparity. All maps are full resolution `[N, 1, H, W]`;
/// both terms are means over valid pixels.
pub fn loss<T: Element>(d0_full: &Tensor<T>, history: &[Tensor<T>], gts: &[GroundTruth], gamma: f64) -> Result<Tensor<T>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let (target, mask, n_valid) = targets::<T>(gts)?;
    let check = |t: &Tensor<T>| {
        if t.shape() != target.shape() {
            Err(Error::dim("loss", "prediction extents", format!("expected {:?}, got {:?}", target.shape(), t.shape())))
        } else {
            Ok(())
        }
    };
    check(d0_full)?;
    let inv = T::of(1.0 / n_valid as f64);
    let mut total = d0_full.sub(&target)?.smooth_l1(T::of(SMOOTH_L1_BETA)).mul(&mask)?.sum().mul_scalar(inv);
    for (d, w) in history.iter().zip(loss_weights(history.len(), gamma)) {
        check(d)?;
        let term = d.sub(&target)?.abs().mul(&mask)?.sum().mul_scalar(T::of(w / n_valid as f64));
        total = total.add(&term)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub epe: f64,
    /// (threshold, percent of valid pixels with error strictly above it).
    pub bp: Vec<(f64, f64)>,
    pub d1: f64,
    pub n_valid: usize,
}

impl MetricReport {
    pub fn bp_at(&self, x: f64) -> Option<f64> {
        self.bp.iter().find(|(t, _)| *t == x).map(|&(_, v)| v)
    }
}

/// Per-pixel error sums; aggregates combine by valid-pixel weight.
#[derive(Clone, Debug, Default)]
struct Tally {
    abs_sum: f64,
    over: Vec<usize>,
    d1: usize,
    n: usize,
}

impl Tally {
    fn report(&self, thresholds: &[f64]) -> MetricReport {
        let pct = |c: usize| if self.n == 0 { 0.0 } else { 100.0 * c as f64 / self.n as f64 };
        MetricReport {
            epe: if self.n == 0 { 0.0 } else { self.abs_sum / self.n as f64 },
            bp: thresholds.iter().zip(&self.over).map(|(&t, &c)| (t, pct(c))).collect(),
            d1: pct(self.d1),
            n_valid: self.n,
        }
    }
}

fn tally(pred: &DisparityMap, gt: &GroundTruth, thresholds: &[f64]) -> Result<Tally> {
    if pred.height != gt.height() || pred.width != gt.width() {
        return Err(Error::dim(
            "compute_metrics",
            "extents",
            format!("prediction {}x{} vs ground truth {}x{}", pred.height, pred.width, gt.height(), gt.width()),
        ));
    }
    let mut t = Tally { over: vec![0; thresholds.len()], ..Default::default() };
    for ((&p, &g), &v) in pred.data.iter().zip(&gt.disparity.data).zip(&gt.valid) {
        if !v {
            continue;
        }
        let e = (p as f64 - g as f64).abs();
        t.abs_sum += e;
        t.n += 1;
        for (c, &x) in t.over.iter_mut().zip(thresholds) {
            *c += (e > x) as usize;
        }
        t.d1 += (e > 3.0 && e > 0.05 * g as f64) as usize;
    }
    Ok(t)
}

pub fn compute_metrics(pred: &DisparityMap, gt: &GroundTruth, thresholds: &[f64]) -> Result<MetricReport> {
    Ok(tally(pred, gt, thresholds)?.report(thresholds))
}

/// Per-sample reports plus the pooled (valid-pixel-weighted) aggregate.
#[derive(Clone, Debug)]
pub struct MetricTable {
    pub thresholds: Vec<f64>,
    pub rows: Vec<(String, MetricReport)>,
    pub aggregate: MetricReport,
}

impl MetricTable {
    pub fn build<'a>(items: impl IntoIterator<Item = (String, &'a DisparityMap, &'a GroundTruth)>, thresholds: &[f64]) -> Result<Self> {
        let mut total = Tally { over: vec![0; thresholds.len()], ..Default::default() };
        let mut rows = Vec::new();
        for (id, pred, gt) in items {
            let t = tally(pred, gt, thresholds)?;
            total.abs_sum += t.abs_sum;
            total.n += t.n;
            total.d1 += t.d1;
            for (a, b) in total.over.iter_mut().zip(&t.over) {
                *a += b;
            }
            rows.push((id, t.report(thresholds)));
        }
        Ok(MetricTable { thresholds: thresholds.to_vec(), rows, aggregate: total.report(thresholds) })
    }

    /// Tab-separated: a header, one line per sample, then an `#aggregate` footer.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tn_valid\tepe");
        for t in &self.thresholds {
            let _ = write!(s, "\tbp-{t}");
        }
        s.push_str("\td1\n");
        let line = |s: &mut String, id: &str, r: &MetricReport| {
            let _ = write!(s, "{id}\t{}\t{:.6}", r.n_valid, r.epe);
            for (_, v) in &r.bp {
                let _ = write!(s, "\t{v:.4}");
            }
            let _ = writeln!(s, "\t{:.4}", r.d1);
        };
        for (id, r) in &self.rows {
            line(&mut s, id, r);
        }
        line(&mut s, "#aggregate", &self.aggregate);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    fn gt_of(h: usize, w: usize, d: Vec<f32>) -> GroundTruth {
        GroundTruth::new(DisparityMap::new(h, w, d).unwrap(), vec![true; h * w]).unwrap()
    }

    #[test]
    fn weights_for_three_iterations() {
        let w = loss_weights(3, 0.9);
        for (a, b) in w.iter().zip([0.81, 0.9, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_definition_cases() {
        let gt = gt_of(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let exact = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let l = loss(&exact, &[exact.clone(), exact.clone()], &[gt.clone()], 0.9).unwrap();
        assert_eq!(l.item(), 0.0);

        let off = exact.add_scalar(0.5);
        let l = loss(&off, &[], &[gt.clone()], 0.9).unwrap();
        assert!((l.item() - 0.125).abs() < 1e-12);

        // L1 terms weighted 0.81, 0.9, 1.0 on errors 1, 1, 2
        let h = [exact.add_scalar(1.0), exact.add_scalar(-1.0), exact.add_scalar(2.0)];
        let l = loss(&exact, &h, &[gt.clone()], 0.9).unwrap();
        assert!((l.item() - (0.81 + 0.9 + 2.0)).abs() < 1e-12);

        let mut none = gt.clone();
        none.valid = vec![false; 4];
        assert!(matches!(loss(&exact, &[], &[none], 0.9), Err(Error::Data(_))));
    }

    #[test]
    fn loss_ignores_invalid_pixels() {
        let mut gt = gt_of(1, 2, vec![1.0, 1.0]);
        gt.valid[1] = false;
        let p = Tensor::<f64>::new(&[1, 1, 1, 2], vec![1.0, 1e6]).unwrap();
        assert_eq!(loss(&p, &[p.clone()], &[gt], 0.9).unwrap().item(), 0.0);
    }

    #[test]
    fn loss_gradient_wrt_final_disparity() {
        let gt = gt_of(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d0 = Tensor::<f64>::new(&[1, 1, 2, 3], vec![1.3, 2.6, 2.1, 4.4, 5.9, 6.2]).unwrap();
        let d1 = Tensor::<f64>::new(&[1, 1, 2, 3], vec![0.7, 2.3, 3.4, 3.6, 4.2, 6.3]).unwrap();
        let dk = Tensor::<f64>::new(&[1, 1, 2, 3], vec![1.2, 1.9, 3.2, 4.3, 5.1, 5.4]).unwrap();
        let r = grad_check(|v| loss(&v[0], &[v[1].clone(), v[2].clone()], &[gt.clone()], 0.9), &[d0, d1, dk], 1e-6).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn metric_definition_cases() {
        let gt = gt_of(2, 2, vec![10.0, 20.0, 30.0, 40.0]);
        let p = DisparityMap::new(2, 2, gt.disparity.data.iter().map(|v| v + 1.0).collect()).unwrap();
        let r = compute_metrics(&p, &gt, &[2.0]).unwrap();
        assert_eq!((r.epe, r.bp_at(2.0), r.n_valid), (1.0, Some(0.0), 4));

        let p = DisparityMap::new(2, 2, vec![13.0, 20.0, 33.0, 40.0]).unwrap();
        assert_eq!(compute_metrics(&p, &gt, &[2.0]).unwrap().bp_at(2.0), Some(50.0));

        let gt = gt_of(1, 2, vec![40.0, 100.0]);
        let p = DisparityMap::new(1, 2, vec![44.0, 104.0]).unwrap();
        let r = compute_metrics(&p, &gt, &[3.0]).unwrap();
        assert_eq!(r.d1, 50.0);
        assert_eq!(r.bp_at(3.0), Some(100.0));

        // ties are not "larger than"
        let gt = gt_of(1, 1, vec![0.0]);
        let r = compute_metrics(&DisparityMap::filled(1, 1, 2.0), &gt, &[2.0]).unwrap();
        assert_eq!(r.bp_at(2.0), Some(0.0));

        assert!(matches!(compute_metrics(&DisparityMap::filled(1, 2, 0.0), &gt, &[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn aggregate_is_pixel_weighted() {
        let a = gt_of(1, 2, vec![1.0, 1.0]);
        let mut b = gt_of(1, 4, vec![1.0; 4]);
        b.valid[0] = false;
        let pa = DisparityMap::filled(1, 2, 2.0);
        let pb = DisparityMap::filled(1, 4, 5.0);
        let t = MetricTable::build([("a".to_string(), &pa, &a), ("b".to_string(), &pb, &b)], &[2.0]).unwrap();
        let want = (2.0 * 1.0 + 3.0 * 4.0) / 5.0;
        assert!((t.aggregate.epe - want).abs() < 1e-12);
        assert_eq!(t.aggregate.n_valid, 5);
        let tsv = t.to_tsv();
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.lines().last().unwrap().starts_with("#aggregate\t5\t2.800000"));
    }

    proptest! {
        #[test]
        fn bp_monotone_and_d1_below_bp3(seed in 0u64..1000, n in 1usize..64) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..64.0)).collect();
            let p: Vec<f32> = g.iter().map(|v| v + rng.gen_range(-8.0..8.0f32)).collect();
            let gt = gt_of(1, n, g);
            let th = [0.5, 1.0, 2.0, 3.0, 4.0, 5.0];
            let r = compute_metrics(&DisparityMap::new(1, n, p).unwrap(), &gt, &th).unwrap();
            for w in r.bp.windows(2) {
                prop_assert!(w[1].1 <= w[0].1);
            }
            prop_assert!(r.d1 <= r.bp_at(3.0).unwrap());
            prop_assert!(r.epe >= 0.0);
        }
    }
}
