//! Reverse-mode vs. central-difference gradient comparison (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// (input index, flat entry) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor so entries with near-zero gradients compare absolutely.
    pub floor: f64,
    /// Check at most this many entries per input (sampled); `None` checks all.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Use the five-point stencil, whose truncation error is O(eps^4) instead of O(eps^2).
    pub five_point: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
            five_point: false,
        }
    }
}

pub(crate) fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn finite_scalar(t: &Tensor<f64>) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::Shape(format!("grad_check: objective must be scalar, got {:?}", t.shape())));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::Numerical(format!("grad_check: objective evaluated to {v}")));
    }
    Ok(v)
}

/// Check every entry of every input with `eps` and default options.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    grad_check_with(f, inputs, &GradCheckOptions { eps, ..Default::default() })
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.with_requires_grad(true)).collect();
    let out = f(&leaves)?;
    finite_scalar(&out)?;
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();
    drop(out);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> { no_grad(|| f(inputs).and_then(|t| finite_scalar(&t))) };
    for (i, input) in inputs.iter().enumerate() {
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < input.numel() => sample(&mut rng, input.numel(), m).into_vec(),
            _ => (0..input.numel()).collect(),
        };
        for j in entries {
            let orig = input.to_vec()[j];
            let at = |x: f64| -> Result<f64> {
                let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
                let mut data = input.to_vec();
                data[j] = x;
                perturbed[i] = Tensor::new(input.shape(), data)?;
                eval(&perturbed)
            };
            let h = opts.eps;
            let numeric = if opts.five_point {
                (8.0 * (at(orig + h)? - at(orig - h)?) - (at(orig + 2.0 * h)? - at(orig - 2.0 * h)?)) / (12.0 * h)
            } else {
                (at(orig + h)? - at(orig - h)?) / (2.0 * h)
            };
            let a = analytic[i][j];
            let err = rel_error(a, numeric, opts.floor);
            report.entries_checked += 1;
            if report.entries_checked == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let leaf = x.with_requires_grad(true);
        leaf.mul(&leaf).unwrap().sum().backward().unwrap();
        assert_eq!(leaf.grad().unwrap(), vec![2.0, 4.0]);
        let r = grad_check(|v| Ok(v[0].mul(&v[0])?.sum()), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-7, "{r:?}");
        assert_eq!(r.entries_checked, 2);
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let f = |v: &[Tensor<f64>]| {
            let sq = v[0].mul(&v[0])?;
            Ok(sq.mul(&sq)?.sum())
        };
        let three = grad_check_with(f, &[x.clone()], &GradCheckOptions { eps: 1e-2, ..Default::default() }).unwrap();
        let five = grad_check_with(f, &[x], &GradCheckOptions { eps: 1e-2, five_point: true, ..Default::default() }).unwrap();
        assert!(three.max_rel_error > 1e-5, "{three:?}");
        assert!(five.max_rel_error < 1e-10, "{five:?}");
    }

    #[test]
    fn non_finite_objective_aborts() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let err = grad_check(|v| Ok(v[0].mul_scalar(f64::INFINITY).sum()), &[x], 1e-5).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // detach hides the dependence from reverse mode but not from finite differences
        let x = Tensor::new(&[3], vec![0.3, -0.2, 0.9]).unwrap();
        let r = grad_check(|v| Ok(v[0].detach().mul(&v[0])?.sum()), &[x], 1e-6).unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
