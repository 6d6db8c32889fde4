use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fstereo::check::{check_checkpoint, run_suite, SUITE_SIZE};
use fstereo::config::{threads_from_env, RunConfig};
use fstereo::model::StereoModel;
use fstereo::objective::{DisparityMap, MetricTable, DEFAULT_THRESHOLDS};
use fstereo::synth::curation::{curation_loop, Regenerator};
use fstereo::synth::dataset::{disparity_histogram, list_ids, read_ground_truth, read_image, Dataset};
use fstereo::synth::{read_pfm, write_pfm};
use fstereo::tensor::Checkpoint;
use fstereo::train::train;
use fstereo::{Error, Result};

#[derive(Parser)]
#[command(name = "fstereo", version, about = "Stereo disparity estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic stereo dataset to `data_dir`.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train on `data_dir`; writes `model.ckpt` and `loss.tsv` into `out_dir`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of fresh weights.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Predict a disparity map for one image pair.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Refinement iterations; defaults to the model's inference setting.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value = "disp.pfm")]
        out: PathBuf,
        /// Also write a colour-mapped PNG.
        #[arg(long)]
        color: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Directory of `<id>.pfm` or `<id>/disp.pfm` predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory with `<id>/disp.pfm` and optional `<id>/mask.pgm`.
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated bad-pixel thresholds.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
        thresholds: Vec<f64>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Alternate training and curation on `data_dir`, saving the curated set to `out_dir/data`.
    Curate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in oracle suite.
    Check {
        /// Also verify that this checkpoint loads.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&c.sets)?;
    cfg.validate()?;
    Ok(cfg)
}

fn generate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let ds = Dataset::generate(cfg.samples, cfg.data_seed, &cfg.synth)?;
    ds.save(&cfg.data_dir)?;
    let bins = 8;
    let max = cfg.synth.max_disp as f64;
    let hist = disparity_histogram(&ds.samples, bins, max);
    println!("wrote {} samples to {}", ds.len(), cfg.data_dir.display());
    println!("disparity histogram ({} valid pixels):", hist.iter().sum::<usize>());
    for (i, n) in hist.iter().enumerate() {
        println!("  [{:6.2}, {:6.2})  {n}", i as f64 * max / bins as f64, (i + 1) as f64 * max / bins as f64);
    }
    Ok(())
}

fn new_model(cfg: &RunConfig, init: Option<&Path>) -> Result<StereoModel<f32>> {
    let model = StereoModel::<f32>::new(cfg.model.clone())?;
    if let Some(p) = init {
        model.load_checkpoint(&Checkpoint::load(p)?)?;
    }
    Ok(model)
}

fn train_cmd(c: &Common, init: Option<&Path>) -> Result<()> {
    let cfg = load_config(c)?;
    let data = Dataset::load(&cfg.data_dir)?;
    let model = new_model(&cfg, init)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("run.cfg"), cfg.dump())?;
    let mut log = fs::File::create(cfg.out_dir.join("loss.tsv"))?;
    writeln!(log, "step\tloss\tlr")?;
    println!("{} parameters, {} samples, {} steps", model.num_parameters(), data.len(), cfg.train.steps);
    let mut io_err = None;
    let report = train(&model, &data, &cfg.train, |step, loss, lr| {
        if let Err(e) = writeln!(log, "{step}\t{loss}\t{lr}") {
            io_err.get_or_insert(e);
        }
        if step % 100 == 0 {
            println!("step {step} loss {loss:.4} lr {lr:.2e}");
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let ckpt = cfg.out_dir.join("model.ckpt");
    model.to_checkpoint().save(&ckpt)?;
    match report.aborted {
        Some(msg) => Err(Error::Numerical(format!("{msg}; last good weights saved to {}", ckpt.display()))),
        None => {
            println!("trained {} steps, checkpoint {}", report.steps_done, ckpt.display());
            Ok(())
        }
    }
}

/// Piecewise-polynomial fit of the turbo colour map.
fn turbo(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let poly = |c: [f64; 6]| c.iter().rev().fold(0.0, |acc, k| acc * t + k);
    let r = poly([0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943]);
    let g = poly([0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604]);
    let b = poly([0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973]);
    [r, g, b].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

fn colorize(d: &DisparityMap, max: f64) -> fstereo::synth::RgbImage {
    let data = d.data.iter().flat_map(|&v| turbo(v as f64 / max)).collect();
    fstereo::synth::RgbImage::new(d.height, d.width, data).expect("sized")
}

fn infer(c: &Common, left: &Path, right: &Path, ckpt: &Path, iters: Option<usize>, out: &Path, color: Option<&Path>) -> Result<()> {
    let cfg = load_config(c)?;
    let model = new_model(&cfg, Some(ckpt))?;
    let (l, r) = (read_image(left)?, read_image(right)?);
    let pred = model.predict(&l, &r, None, iters.unwrap_or(cfg.model.infer_iters))?;
    write_pfm(&pred.disparity, out)?;
    if let Some(p) = color {
        fstereo::synth::dataset::write_png(&colorize(&pred.disparity, (cfg.model.max_disp - 1) as f64), p)?;
    }
    println!("{} iterations, wrote {}", pred.iterations, out.display());
    Ok(())
}

fn find_prediction(pred: &Path, id: &str) -> Option<PathBuf> {
    [pred.join(format!("{id}.pfm")), pred.join(id).join("disp.pfm")].into_iter().find(|p| p.is_file())
}

/// Returns `Ok(false)` when some ground-truth ids had no prediction.
fn eval(pred: &Path, gt: &Path, thresholds: &[f64], out: Option<&Path>) -> Result<bool> {
    let mut scored = Vec::new();
    let mut missing = Vec::new();
    for id in list_ids(gt)? {
        match find_prediction(pred, &id) {
            Some(p) => {
                let g = read_ground_truth(&gt.join(&id))?;
                scored.push((id, read_pfm(p)?, g));
            }
            None => missing.push(id),
        }
    }
    let table = MetricTable::build(scored.iter().map(|(id, p, g)| (id.clone(), p, g)), thresholds)?;
    match out {
        Some(p) => fs::write(p, table.to_tsv())?,
        None => print!("{}", table.to_tsv()),
    }
    for id in &missing {
        eprintln!("missing prediction: {id}");
    }
    if !missing.is_empty() {
        eprintln!("{} scored, {} missing", scored.len(), missing.len());
    }
    Ok(missing.is_empty())
}

fn curate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = Dataset::load(&cfg.data_dir)?;
    let model = new_model(&cfg, None)?;
    let mut regen = Regenerator { synth: cfg.synth.clone(), next_seed: cfg.data_seed.wrapping_add(1 << 32) };
    let res = curation_loop(&model, data, &cfg.train, cfg.threshold, cfg.rounds, &mut regen, |round, step, loss| {
        if step % 100 == 0 {
            println!("round {round} step {step} loss {loss:.4}");
        }
    })?;
    fs::create_dir_all(&cfg.out_dir)?;
    for r in &res.reports {
        fs::write(cfg.out_dir.join(format!("curation_{}.tsv", r.iteration)), r.to_tsv())?;
        println!("round {}: rejected {} of {}", r.iteration, r.rejected.len(), r.ids.len());
    }
    res.data.save(&cfg.out_dir.join("data"))?;
    model.to_checkpoint().save(&cfg.out_dir.join("model.ckpt"))?;
    Ok(())
}

fn check(ckpt: Option<&Path>) -> Result<bool> {
    let results = run_suite();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let mut ok = results.iter().all(|r| r.passed);
    if let Some(p) = ckpt {
        match check_checkpoint(p) {
            Ok(n) => println!("PASS checkpoint {}: {n} tensors", p.display()),
            Err(e) => {
                println!("FAIL checkpoint {}: {e}", p.display());
                ok = false;
            }
        }
    }
    println!("{} of {SUITE_SIZE} checks passed", results.iter().filter(|r| r.passed).count());
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Generate { common } => generate(&common).map(|_| true),
        Cmd::Train { common, init } => train_cmd(&common, init.as_deref()).map(|_| true),
        Cmd::Infer { common, left, right, checkpoint, iters, out, color } => {
            infer(&common, &left, &right, &checkpoint, iters, &out, color.as_deref()).map(|_| true)
        }
        Cmd::Eval { pred, gt, thresholds, out } => eval(&pred, &gt, &thresholds, out.as_deref()),
        Cmd::Curate { common } => curate(&common).map(|_| true),
        Cmd::Check { checkpoint } => check(checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match threads_from_env() {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        // Incomplete evaluation or a failing check counts as a data error.
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
