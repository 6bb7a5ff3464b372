//! `stereo` command line: generate synthetic stereo data, train, evaluate,
//! and run single-pair inference.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 data/I-O errors,
//! 4 contract violations (bad shapes or ranges).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stereo_core::checkpoint;
use stereo_core::config::Config;
use stereo_core::error::Error;
use stereo_core::eval::evaluate;
use stereo_core::synthetic::{self, StereoSample};
use stereo_core::training;
use stereo_core::{pfm, ppm, Result, Tensor};

#[derive(Parser)]
#[command(name = "stereo", about = "prompt-guided iterative stereo matching on synthetic stereograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic stereo samples (PPM images + PFM fields + manifest).
    Gen {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Largest ground-truth disparity in pixels.
        #[arg(long = "max-disp", default_value_t = 40.0)]
        max_disp: f32,
        /// Slanted layers per scene.
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on streamed or pooled synthetic scenes.
    Train {
        /// key=value config file; defaults apply for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Training log path (default: <out>.log).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Inline overrides, e.g. --set steps=100 (applied after the file).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint on a generated dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Refinement iterations (default: checkpoint's iterations_eval).
        #[arg(long)]
        iters: Option<usize>,
        /// Comma-separated error thresholds, e.g. 1.0,2.0,3.0.
        #[arg(long)]
        taus: Option<String>,
        /// Report file (default: <data>/eval_report.txt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run inference on one rectified pair.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Left image (binary PPM).
        #[arg(long)]
        left: PathBuf,
        /// Right image (binary PPM).
        #[arg(long)]
        right: PathBuf,
        /// Output disparity (PFM).
        #[arg(long)]
        out: PathBuf,
        /// Optional color-mapped visualization (PPM).
        #[arg(long)]
        viz: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::Contract(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, count, width, height, max_disp, layers, seed } => {
            cmd_gen(&out, count, width, height, max_disp, layers, seed)
        }
        Command::Train { config, out, log, set } => cmd_train(config.as_deref(), &out, log, &set),
        Command::Eval { ckpt, data, iters, taus, out } => {
            cmd_eval(&ckpt, &data, iters, taus.as_deref(), out)
        }
        Command::Infer { ckpt, left, right, out, viz, iters } => {
            cmd_infer(&ckpt, &left, &right, &out, viz.as_deref(), iters)
        }
    }
}

fn sample_paths(index: usize) -> [String; 4] {
    [
        format!("sample_{index:04}_left.ppm"),
        format!("sample_{index:04}_right.ppm"),
        format!("sample_{index:04}_disp.pfm"),
        format!("sample_{index:04}_occ.pfm"),
    ]
}

fn cmd_gen(
    out: &Path,
    count: usize,
    width: usize,
    height: usize,
    max_disp: f32,
    layers: usize,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = String::new();
    for i in 0..count {
        let sample = synthetic::generate(width, height, layers, max_disp, seed + i as u64)?;
        let names = sample_paths(i);
        ppm::write_ppm(&sample.left, &out.join(&names[0]))?;
        ppm::write_ppm(&sample.right, &out.join(&names[1]))?;
        pfm::write_pfm(&sample.disparity_gt, &out.join(&names[2]))?;
        pfm::write_pfm(&sample.occlusion_tensor(), &out.join(&names[3]))?;
        for n in names {
            manifest.push_str(&n);
            manifest.push('\n');
        }
    }
    std::fs::write(out.join("manifest.txt"), manifest)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for assignment in overrides {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(Error::config(format!("--set expects key=value, got {assignment:?}")));
        };
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(config: Option<&Path>, out: &Path, log: Option<PathBuf>, set: &[String]) -> Result<()> {
    let cfg = resolve_config(config, set)?;
    let log_path = log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    });
    println!("resolved config:\n{}", cfg.to_text());
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    use std::io::Write;
    let started = std::time::Instant::now();
    let (model, adam, records) = training::train(&cfg, |r| {
        writeln!(log_file, "{}", r.to_line()).expect("log write");
        if r.step % 25 == 0 || r.step + 1 == cfg.steps {
            println!(
                "step {:>5}  lr {:.3e}  loss {:.4}  train_epe {:.3}  [{:.1}s]",
                r.step,
                r.lr,
                r.loss,
                r.train_epe,
                started.elapsed().as_secs_f32()
            );
        }
    })?;
    log_file.flush()?;
    checkpoint::save(out, &model, Some(&adam), records.len() as u64)?;
    println!("checkpoint: {}", out.display());
    println!("log: {}", log_path.display());
    Ok(())
}

/// Load a dataset directory written by `gen` via its manifest.
fn load_dataset(dir: &Path) -> Result<Vec<StereoSample>> {
    let manifest = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest)
        .map_err(|_| Error::data(format!("no manifest.txt in {}", dir.display())))?;
    let names: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if names.is_empty() || names.len() % 4 != 0 {
        return Err(Error::data(format!(
            "manifest {} must list 4 files per sample",
            manifest.display()
        )));
    }
    let mut samples = Vec::with_capacity(names.len() / 4);
    for (i, group) in names.chunks(4).enumerate() {
        let left = ppm::read_ppm(&dir.join(group[0]))?;
        let right = ppm::read_ppm(&dir.join(group[1]))?;
        let disparity_gt = pfm::read_pfm(&dir.join(group[2]))?;
        let occ = pfm::read_pfm(&dir.join(group[3]))?;
        samples.push(StereoSample {
            left,
            right,
            disparity_gt,
            occlusion: StereoSample::occlusion_from_tensor(&occ),
            seed: i as u64,
        });
    }
    Ok(samples)
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    iters: Option<usize>,
    taus: Option<&str>,
    out: Option<PathBuf>,
) -> Result<()> {
    let ck = checkpoint::load(ckpt)?;
    let (model, _) = ck.instantiate()?;
    let samples = load_dataset(data)?;
    let iters = iters.unwrap_or(model.cfg.iterations_eval);
    let taus: Vec<f32> = match taus {
        Some(list) => list
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f32>()
                    .map_err(|_| Error::config(format!("bad tau value {t:?}")))
            })
            .collect::<Result<_>>()?,
        None => model.cfg.taus.clone(),
    };
    let report = evaluate(&model, &samples, iters, &taus)?;
    print!("{}", report.table());
    let out = out.unwrap_or_else(|| data.join("eval_report.txt"));
    std::fs::write(&out, report.records())?;
    println!("report: {}", out.display());
    Ok(())
}

/// Piecewise-linear blue->cyan->yellow->red ramp on [0,1].
fn colormap(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let seg = |a: f32, b: f32, x: f32| ((x - a) / (b - a)).clamp(0.0, 1.0);
    if t < 0.33 {
        let u = seg(0.0, 0.33, t);
        [0.0, u, 1.0]
    } else if t < 0.66 {
        let u = seg(0.33, 0.66, t);
        [u, 1.0, 1.0 - u]
    } else {
        let u = seg(0.66, 1.0, t);
        [1.0, 1.0 - u, 0.0]
    }
}

fn cmd_infer(
    ckpt: &Path,
    left: &Path,
    right: &Path,
    out: &Path,
    viz: Option<&Path>,
    iters: Option<usize>,
) -> Result<()> {
    let ck = checkpoint::load(ckpt)?;
    let (model, _) = ck.instantiate()?;
    let left_img = ppm::read_ppm(left)?;
    let right_img = ppm::read_ppm(right)?;
    if left_img.shape != right_img.shape {
        return Err(Error::contract(format!(
            "image dimensions differ: {:?} vs {:?}",
            left_img.shape, right_img.shape
        )));
    }
    let (h, w) = (left_img.shape[1], left_img.shape[2]);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::contract(format!("image dims {h}x{w} must be divisible by 32")));
    }
    let iters = iters.unwrap_or(model.cfg.iterations_eval);
    let disparity = model.infer(&left_img, &right_img, iters)?;
    pfm::write_pfm(&disparity, out)?;
    println!("disparity: {}", out.display());
    if let Some(viz_path) = viz {
        let max = disparity.data.iter().cloned().fold(1e-6f32, f32::max);
        let mut rgb = vec![0.0f32; 3 * h * w];
        for (i, &d) in disparity.data.iter().enumerate() {
            let c = colormap(d / max);
            for ch in 0..3 {
                rgb[ch * h * w + i] = c[ch];
            }
        }
        ppm::write_ppm(&Tensor::new(vec![3, h, w], rgb)?, viz_path)?;
        println!("viz: {}", viz_path.display());
    }
    Ok(())
}
