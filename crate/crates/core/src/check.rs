//! Built-in oracle suite run by `fstereo check`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost_filter::ApcBlock;
use crate::cost_filter::init_disparity;
use crate::cost_filter::MultiHeadAttention;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PriorPair, StereoModel};
use crate::nn::{grad_check_params, Mode, ParamStore};
use crate::objective::{compute_metrics, loss_weights, DisparityMap, GroundTruth};
use crate::refiner::{convex_upsample, lookup};
use crate::synth::curation::rejected_indices;
use crate::synth::pfm::{decode, encode, Endian};
use crate::synth::{generate_sample, SynthConfig};
use crate::tensor::{conv2d, conv3d, grad_check, Checkpoint, GradCheckOptions, Tensor};

/// Number of checks in [`run_suite`].
pub const SUITE_SIZE: usize = 14;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn within(err: f64, tol: f64) -> Result<String> {
    if err <= tol {
        Ok(format!("max error {err:.2e} <= {tol:.0e}"))
    } else {
        Err(Error::Numerical(format!("max error {err:.2e} exceeds {tol:.0e}")))
    }
}

fn conv2d_loop() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, k, b) = (rand_t(&[2, 3, 7, 6], &mut rng), rand_t(&[4, 3, 3, 2], &mut rng), rand_t(&[4], &mut rng));
    let (stride, pad) = ([2, 1], [1, 1]);
    let y = conv2d(&x, &k, Some(&b), stride, pad)?;
    let (oh, ow) = ((7 + 2 - 3) / 2 + 1, (6 + 2 - 2) + 1);
    let mut want = vec![0.0; 2 * 4 * oh * ow];
    for n in 0..2 {
        for o in 0..4 {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..3 {
                        for u in 0..3 {
                            for v in 0..2 {
                                let (yy, xx) = ((i * 2 + u) as isize - 1, (j + v) as isize - 1);
                                if yy >= 0 && yy < 7 && xx >= 0 && xx < 6 {
                                    acc += x.data()[((n * 3 + c) * 7 + yy as usize) * 6 + xx as usize] * k.data()[((o * 3 + c) * 3 + u) * 2 + v];
                                }
                            }
                        }
                    }
                    want[((n * 4 + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    within(max_abs(y.data(), &want), 1e-5)
}

fn conv3d_loop() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, k) = (rand_t(&[1, 2, 5, 4, 6], &mut rng), rand_t(&[3, 2, 3, 3, 3], &mut rng));
    let y = conv3d(&x, &k, None, [1, 1, 1], [1, 1, 1])?;
    let mut want = vec![0.0; 3 * 5 * 4 * 6];
    for o in 0..3 {
        for d in 0..5 {
            for h in 0..4 {
                for w in 0..6 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for a in 0..3 {
                            for b in 0..3 {
                                for e in 0..3 {
                                    let (dd, hh, ww) = (d as isize + a as isize - 1, h as isize + b as isize - 1, w as isize + e as isize - 1);
                                    if (0..5).contains(&dd) && (0..4).contains(&hh) && (0..6).contains(&ww) {
                                        acc += x.data()[((c * 5 + dd as usize) * 4 + hh as usize) * 6 + ww as usize]
                                            * k.data()[(((o * 2 + c) * 3 + a) * 3 + b) * 3 + e];
                                    }
                                }
                            }
                        }
                    }
                    want[((o * 5 + d) * 4 + h) * 6 + w] = acc;
                }
            }
        }
    }
    within(max_abs(y.data(), &want), 1e-5)
}

fn apc_outer_product() -> Result<String> {
    let mut worst = 0.0f64;
    for kd in [3, 5, 17] {
        let store = ParamStore::<f64>::new(kd as u64);
        let apc = ApcBlock::new(&store.root(), "apc", 1, 1, 3, kd)?.linear();
        let x = rand_t(&[1, 1, 9, 5, 6], &mut ChaCha8Rng::seed_from_u64(kd as u64));
        let y = apc.forward(&x, Mode::Eval)?;
        let (a, b) = (apc.spatial.weight.values(), apc.disparity.weight.values());
        let k: Vec<f64> = (0..kd * 9).map(|i| b[i / 9] * a[i % 9]).collect();
        let dense = conv3d(&x, &Tensor::new(&[1, 1, kd, 3, 3], k)?, None, [1; 3], [kd / 2, 1, 1])?;
        worst = worst.max(max_abs(y.data(), dense.data()));
    }
    within(worst, 1e-5)
}

fn attention_direct() -> Result<String> {
    let store = ParamStore::<f64>::new(3);
    let (l, c, heads) = (5, 8, 4);
    let mha = MultiHeadAttention::new(&store.root(), "mha", c, heads)?;
    let x = rand_t(&[1, l, c], &mut ChaCha8Rng::seed_from_u64(4));
    let (y, _) = mha.forward(&x)?;
    let lin = |p: &crate::nn::Linear<f64>, inp: &[f64]| -> Vec<f64> {
        let (w, b) = (p.weight.values(), p.bias.values());
        (0..l * c).map(|i| b[i % c] + (0..c).map(|j| w[(i % c) * c + j] * inp[(i / c) * c + j]).sum::<f64>()).collect()
    };
    let (q, k, v) = (lin(&mha.q, x.data()), lin(&mha.k, x.data()), lin(&mha.v, x.data()));
    let dh = c / heads;
    let mut cat = vec![0.0; l * c];
    for h in 0..heads {
        for i in 0..l {
            let s: Vec<f64> = (0..l).map(|j| (0..dh).map(|e| q[i * c + h * dh + e] * k[j * c + h * dh + e]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for e in 0..dh {
                cat[i * c + h * dh + e] = (0..l).map(|j| s[j].exp() / z * v[j * c + h * dh + e]).sum();
            }
        }
    }
    within(max_abs(y.data(), &lin(&mha.o, &cat)), 1e-5)
}

fn lerp_zero(f: impl Fn(isize) -> f64, n: usize, p: f64) -> f64 {
    let lo = p.floor();
    let get = |i: isize| if i >= 0 && (i as usize) < n { f(i) } else { 0.0 };
    (1.0 - (p - lo)) * get(lo as isize) + (p - lo) * get(lo as isize + 1)
}

fn lookup_direct() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, dn, h, w, r) = (2, 6, 3, 7, 2);
    let vc = rand_t(&[1, c, dn, h, w], &mut rng);
    let corr = rand_t(&[1, w, h, w], &mut rng);
    let d = Tensor::new(&[1, 1, h, w], (0..h * w).map(|_| rng.gen_range(0.0..6.0)).collect())?;
    let got = lookup(&vc, &corr, &d, r)?;
    let k = 2 * r + 1;
    let mut want = vec![0.0; k * (c + 1) * h * w];
    for y in 0..h {
        for x in 0..w {
            let dv = d.data()[y * w + x];
            for oi in 0..k {
                let p = dv + oi as f64 - r as f64;
                for ch in 0..c {
                    want[((oi * c + ch) * h + y) * w + x] = lerp_zero(|i| vc.data()[((ch * dn + i as usize) * h + y) * w + x], dn, p);
                }
                want[((k * c + oi) * h + y) * w + x] = lerp_zero(|i| corr.data()[(i as usize * h + y) * w + x], w, x as f64 - p);
            }
        }
    }
    within(max_abs(got.data(), &want), 1e-6)
}

fn convex_direct() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w) = (3, 4);
    let d = Tensor::new(&[1, 1, h, w], (0..h * w).map(|_| rng.gen_range(0.0..8.0)).collect())?;
    let m = rand_t(&[1, 144, h, w], &mut rng);
    let up = convex_upsample(&d, &m)?;
    let mut worst = 0.0f64;
    for y in 0..4 * h {
        for x in 0..4 * w {
            let (cy, cx, sub) = (y / 4, x / 4, (y % 4) * 4 + x % 4);
            let logits: Vec<f64> = (0..9).map(|n| m.data()[((n * 16 + sub) * h + cy) * w + cx]).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let v: f64 = (0..9)
                .map(|n| {
                    let yy = (cy as isize + n as isize / 3 - 1).clamp(0, h as isize - 1) as usize;
                    let xx = (cx as isize + n as isize % 3 - 1).clamp(0, w as isize - 1) as usize;
                    logits[n].exp() / z * d.data()[yy * w + xx]
                })
                .sum();
            worst = worst.max((up.data()[y * 4 * w + x] - 4.0 * v).abs());
        }
    }
    within(worst, 1e-6)
}

fn soft_argmin_cases() -> Result<String> {
    let mut one_hot = vec![-1e4; 8];
    one_hot[5] = 1e4;
    let a = init_disparity(&Tensor::<f64>::new(&[1, 1, 8, 1, 1], one_hot)?)?.item();
    let u = init_disparity(&Tensor::<f64>::new(&[1, 1, 8, 1, 1], vec![0.3; 8])?)?.item();
    within((a - 5.0).abs().max((u - 3.5).abs()), 1e-3)
}

fn loss_weight_values() -> Result<String> {
    let w = loss_weights(3, 0.9);
    within(max_abs(&w, &[0.81, 0.9, 1.0]), 1e-12)
}

fn metric_units() -> Result<String> {
    let gt = GroundTruth::new(DisparityMap::new(1, 4, vec![40.0, 100.0, 10.0, 10.0])?, vec![true; 4])?;
    let pred = DisparityMap::new(1, 4, vec![44.0, 104.0, 13.0, 10.0])?;
    let r = compute_metrics(&pred, &gt, &[2.0, 3.0])?;
    let want = (11.0 / 4.0, 75.0, 50.0, 25.0);
    let got = (r.epe, r.bp_at(2.0).unwrap_or(f64::NAN), r.bp_at(3.0).unwrap_or(f64::NAN), r.d1);
    if got == want {
        Ok(format!("epe {} bp-2 {} bp-3 {} d1 {}", got.0, got.1, got.2, got.3))
    } else {
        Err(Error::Numerical(format!("got {got:?}, expected {want:?}")))
    }
}

fn curation_threshold() -> Result<String> {
    let r = rejected_indices(&[70.0, 10.0, 61.0, 59.0, 60.0], 60.0);
    if r == [0, 2] {
        Ok("rejects {0, 2}".into())
    } else {
        Err(Error::Numerical(format!("rejected {r:?}")))
    }
}

fn grad_ops() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_t(&[1, 2, 5, 4], &mut rng);
    let k = rand_t(&[3, 2, 3, 3], &mut rng);
    let v = rand_t(&[1, 2, 4, 3, 4], &mut rng);
    let r = grad_check(
        |t| {
            let a = conv2d(&t[0], &t[1], None, [1, 1], [1, 1])?.tanh().softmax(1)?;
            let b = t[2].sigmoid().soft_argmin(2)?.reshape(&[1, 2, 3, 4])?;
            let c = crate::tensor::bilinear_resize(&a.narrow(2, 0, 3)?, [6, 8])?.mean();
            Ok(c.add(&b.smooth_l1(1.0).sum())?.add(&a.mul(&a)?.sum())?)
        },
        &[x, k, v],
        1e-6,
    )?;
    within(r.max_rel_error, 1e-3).map_err(|e| Error::Numerical(format!("{e} at {:?}: {} vs {}", r.worst, r.analytic, r.numeric)))
}

fn grad_model() -> Result<String> {
    let model = StereoModel::<f64>::new(ModelConfig::micro())?;
    model.store.perturb(1, 0.05)?;
    let s = generate_sample(3, &SynthConfig { height: 32, width: 64, max_disp: 24, n_layers: 2, texture: None })?;
    let (l, r) = (s.left.to_tensor::<f64>().reshape(&[1, 3, 32, 64])?, s.right.to_tensor::<f64>().reshape(&[1, 3, 32, 64])?);
    let priors: PriorPair<f64> = model.priors(&l, &r, None)?;
    let gts = [s.gt.clone()];
    let opts = GradCheckOptions { eps: 1e-5, floor: 1e-5, max_entries: Some(1), seed: 2, five_point: false };
    let rep = grad_check_params(
        || {
            let out = model.forward(&l, &r, &priors, 2, Mode::Eval)?;
            model.loss(&out, &gts)
        },
        &model.store.trainable(),
        &opts,
    )?;
    within(rep.max_rel_error, 1e-3)
}

fn checkpoint_round_trip() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut c = Checkpoint::default();
    for i in 0..5 {
        let shape: Vec<usize> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(1..5)).collect();
        let n = shape.iter().product();
        c.push(format!("t{i}"), &shape, (0..n).map(|_| rng.gen::<f32>() * 1e3 - 5e2).collect());
    }
    let back = Checkpoint::from_bytes(&c.to_bytes())?;
    let exact = back.entries.len() == c.entries.len()
        && back.entries.iter().zip(&c.entries).all(|(a, b)| a.name == b.name && a.shape == b.shape && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    if exact {
        Ok("bit-exact".into())
    } else {
        Err(Error::Numerical("checkpoint round trip changed values".into()))
    }
}

fn pfm_round_trip() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = DisparityMap::new(17, 23, (0..17 * 23).map(|_| rng.gen_range(0.0..200.0)).collect())?;
    for e in [Endian::Little, Endian::Big] {
        let back = decode(&encode(&m, e)?)?;
        if back.data.iter().zip(&m.data).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Numerical(format!("{e:?} round trip changed values")));
        }
    }
    Ok("bit-exact, both byte orders".into())
}

/// Run every check; never panics on a failing check.
pub fn run_suite() -> Vec<CheckResult> {
    let checks: [(&'static str, fn() -> Result<String>); SUITE_SIZE] = [
        ("conv2d vs loops", conv2d_loop),
        ("conv3d vs loops", conv3d_loop),
        ("axial-planar vs outer-product kernel", apc_outer_product),
        ("attention vs direct formula", attention_direct),
        ("lookup vs direct interpolation", lookup_direct),
        ("convex upsample vs gather", convex_direct),
        ("soft-argmin one-hot and uniform", soft_argmin_cases),
        ("loss weights", loss_weight_values),
        ("metric definitions", metric_units),
        ("curation threshold", curation_threshold),
        ("gradients of core ops", grad_ops),
        ("gradients of micro model", grad_model),
        ("checkpoint round trip", checkpoint_round_trip),
        ("disparity file round trip", pfm_round_trip),
    ];
    checks
        .iter()
        .map(|&(name, f)| match f() {
            Ok(detail) => CheckResult { name, passed: true, detail },
            Err(e) => CheckResult { name, passed: false, detail: e.to_string() },
        })
        .collect()
}

/// Load-check a checkpoint file against the tensor container format.
pub fn check_checkpoint(path: &Path) -> Result<usize> {
    Ok(Checkpoint::load(path)?.entries.len())
}
