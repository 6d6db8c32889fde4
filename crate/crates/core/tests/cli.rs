use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fstereo::check::SUITE_SIZE;
use fstereo::objective::DisparityMap;
use fstereo::synth::dataset::{read_ground_truth, write_png};
use fstereo::synth::{read_pfm, write_pfm, RgbImage};

const BIN: &str = env!("CARGO_BIN_EXE_fstereo");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn fstereo")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small(dir: &Path) -> Vec<String> {
    [
        "preset=micro".to_string(),
        "height=32".into(),
        "width=64".into(),
        "gen_max_disp=20".into(),
        "n_layers=2".into(),
        format!("data_dir={}", dir.join("data").display()),
        format!("out_dir={}", dir.join("run").display()),
    ]
    .to_vec()
}

fn with_sets<'a>(cmd: &'a str, sets: &'a [String], extra: &'a [&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    for s in sets {
        v.push("--set");
        v.push(s);
    }
    v.extend_from_slice(extra);
    v
}

#[test]
fn generate_is_deterministic_and_histogram_sums() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for run_dir in ["a", "b"] {
        let mut sets = small(&dir.path().join(run_dir));
        sets.push("samples=10".into());
        sets.push("data_seed=7".into());
        let o = run(&with_sets("generate", &sets, &[]));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(stdout(&o));
    }
    let body = |s: &str| s.lines().skip(1).collect::<Vec<_>>().join("\n");
    assert_eq!(body(&outs[0]), body(&outs[1]));
    let root = dir.path().join("a/data");
    let ids: Vec<_> = fs::read_dir(&root).unwrap().collect();
    assert_eq!(ids.len(), 10);
    let mut valid = 0;
    for i in 0..10 {
        let id = format!("{i:06}");
        let a = fs::read(root.join(&id).join("disp.pfm")).unwrap();
        let b = fs::read(dir.path().join("b/data").join(&id).join("disp.pfm")).unwrap();
        assert_eq!(a, b);
        valid += read_ground_truth(&root.join(&id)).unwrap().n_valid();
    }
    let binned: usize = outs[0].lines().filter(|l| l.trim_start().starts_with('[')).map(|l| l.split_whitespace().last().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(binned, valid);
    assert!(outs[0].contains(&format!("({valid} valid pixels)")));
}

#[test]
fn train_zero_steps_then_infer() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = small(dir.path());
    sets.push("samples=2".into());
    sets.push("steps=0".into());
    assert!(run(&with_sets("generate", &sets, &[])).status.success());
    let o = run(&with_sets("train", &sets, &[]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("run/model.ckpt");
    assert!(ckpt.is_file());
    assert_eq!(fs::read_to_string(dir.path().join("run/loss.tsv")).unwrap().lines().count(), 1);

    // identical views, zero-trained model
    let img = RgbImage::new(30, 50, (0..30 * 50 * 3).map(|i| (i * 7 % 256) as u8).collect()).unwrap();
    let l = dir.path().join("l.png");
    write_png(&img, &l).unwrap();
    let ck = ckpt.to_str().unwrap();
    let ls = l.to_str().unwrap();
    let mut pfms = Vec::new();
    for (name, iters) in [("a.pfm", "2"), ("b.pfm", "2"), ("c.pfm", "1")] {
        let out = dir.path().join(name);
        let o = run(&with_sets("infer", &sets, &["--left", ls, "--right", ls, "--checkpoint", ck, "--iters", iters, "--out", out.to_str().unwrap(), "--color", dir.path().join("c.png").to_str().unwrap()]));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).starts_with(&format!("{iters} iterations")));
        pfms.push(fs::read(&out).unwrap());
    }
    assert_eq!(pfms[0], pfms[1]);
    let d = read_pfm(dir.path().join("a.pfm")).unwrap();
    assert_eq!((d.height, d.width), (30, 50));
    assert!(d.data.iter().all(|v| v.is_finite() && (0.0..=31.0).contains(v)));
    assert!(dir.path().join("c.png").is_file());

    // mismatched extents and unreadable checkpoint
    let small_img = dir.path().join("s.png");
    write_png(&RgbImage::new(20, 50, vec![0; 20 * 50 * 3]).unwrap(), &small_img).unwrap();
    let o = run(&with_sets("infer", &sets, &["--left", ls, "--right", small_img.to_str().unwrap(), "--checkpoint", ck]));
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.path().join("bad.ckpt"), b"garbage").unwrap();
    let o = run(&with_sets("infer", &sets, &["--left", ls, "--right", ls, "--checkpoint", dir.path().join("bad.ckpt").to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

fn write_gt(root: &Path, id: &str, d: &DisparityMap) {
    fs::create_dir_all(root.join(id)).unwrap();
    write_pfm(d, root.join(id).join("disp.pfm")).unwrap();
}

#[test]
fn eval_scores_and_reports_missing() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
    fs::create_dir_all(&pred).unwrap();
    for i in 0..5 {
        let d = DisparityMap::new(2, 3, (0..6).map(|k| (k + i) as f32).collect()).unwrap();
        write_gt(&gt, &format!("s{i}"), &d);
        write_pfm(&d, pred.join(format!("s{i}.pfm"))).unwrap();
    }
    let o = run(&["eval", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    assert!(o.status.success());
    let out = stdout(&o);
    let agg = out.lines().find(|l| l.starts_with("#aggregate")).unwrap();
    assert_eq!(agg, "#aggregate\t30\t0.000000\t0.0000\t0.0000\t0.0000\t0.0000\t0.0000");

    fs::remove_file(pred.join("s3.pfm")).unwrap();
    let o = run(&["eval", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with('s')).count(), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing prediction: s3"));
}

#[test]
fn eval_aggregate_is_pixel_weighted() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
    fs::create_dir_all(&pred).unwrap();
    // sample a: 4 pixels, errors 1,1,1,1; sample b: 1 pixel, error 6
    write_gt(&gt, "a", &DisparityMap::new(2, 2, vec![5.0; 4]).unwrap());
    write_pfm(&DisparityMap::new(2, 2, vec![6.0, 4.0, 6.0, 4.0]).unwrap(), pred.join("a.pfm")).unwrap();
    write_gt(&gt, "b", &DisparityMap::new(1, 1, vec![10.0]).unwrap());
    write_pfm(&DisparityMap::new(1, 1, vec![16.0]).unwrap(), pred.join("b.pfm")).unwrap();
    let tsv = dir.path().join("m.tsv");
    let o = run(&["eval", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap(), "--thresholds", "2", "--out", tsv.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(&tsv).unwrap();
    let cols: Vec<&str> = text.lines().last().unwrap().split('\t').collect();
    assert_eq!(cols[0], "#aggregate");
    assert_eq!(cols[1], "5");
    // (4 * 1 + 6) / 5, not the per-sample mean (1 + 6) / 2
    assert_eq!(cols[2].parse::<f64>().unwrap(), 2.0);
    assert_eq!(cols[3].parse::<f64>().unwrap(), 20.0);
    assert_eq!(cols[4].parse::<f64>().unwrap(), 20.0);
}

#[test]
fn check_passes_and_flags_bad_checkpoint() {
    let o = run(&["check"]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), SUITE_SIZE);
    assert!(out.contains(&format!("{SUITE_SIZE} of {SUITE_SIZE} checks passed")));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ckpt");
    let mut bytes = fstereo::tensor::Checkpoint::default().to_bytes();
    bytes[..4].copy_from_slice(b"JUNK");
    fs::write(&p, bytes).unwrap();
    let o = run(&["check", "--checkpoint", p.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("bad checkpoint magic"));
}

#[test]
fn config_errors_exit_with_one() {
    let o = run(&["generate", "--set", "max_disp=40"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["generate", "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(BIN).args(["check"]).env("FSTEREO_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_round_trips_through_train_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = small(dir.path());
    sets.push("samples=1".into());
    sets.push("steps=1".into());
    sets.push("train_iters=1".into());
    assert!(run(&with_sets("generate", &sets, &[])).status.success());
    let o = run(&with_sets("train", &sets, &[]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dumped = fs::read_to_string(dir.path().join("run/run.cfg")).unwrap();
    let back = fstereo::config::RunConfig::parse(&dumped).unwrap();
    assert_eq!(back.dump(), dumped);
    assert_eq!(back.train.steps, 1);
    assert_eq!(fs::read_to_string(dir.path().join("run/loss.tsv")).unwrap().lines().count(), 2);
}
