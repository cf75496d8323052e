use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dsfnet::data::{load_dataset, load_image, save_dataset, save_image, save_mask, synth_generate, Checkpoint, Difficulty};
use dsfnet::metrics::{aggregate, uniform_thresholds, write_pr_csv, write_report, DEFAULT_THRESHOLD};
use dsfnet::train::{evaluate_samples, load_model, predict_image, train_run, Precision, RunConfig, CONFIG_FILE};
use dsfnet::verify::{self, VerifyOptions};
use dsfnet::Real;

#[derive(Parser)]
#[command(name = "dsfnet", version, about = "Lesion saliency segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a TOML config; writes loss.csv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a directory of image/mask pairs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Defaults to config.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Mean PR curve; defaults to `<report>.pr.csv`.
        #[arg(long)]
        pr: Option<PathBuf>,
        #[arg(long, default_value_t = 99)]
        thresholds: usize,
    },
    /// Saliency map for one PPM image, written as PGM.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the mask thresholded at 0.5 instead of the gray map.
        #[arg(long)]
        binary: bool,
    },
    /// Write synthetic image/mask pairs.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        extent: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "easy")]
        difficulty: Difficulty,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the self-check suite; exits nonzero if any check fails.
    Verify {
        /// Seeds per gradient check.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Offset every branch dilation by one (mutation test).
        #[arg(long)]
        inject_dilation_fault: bool,
    },
}

fn config_for(ckpt: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    RunConfig::load(&path).with_context(|| format!("reading config {}", path.display()))
}

fn eval<T: Real>(cfg: &RunConfig, ck: &Checkpoint, data: &Path, report: &Path, pr: &Path, thresholds: usize) -> Result<()> {
    let mut net = load_model::<T>(cfg, ck)?;
    let samples = load_dataset(data)?;
    if samples.is_empty() {
        bail!("no samples in {}", data.display());
    }
    let ts = uniform_thresholds(thresholds);
    let outcome = evaluate_samples(&mut net, &samples, &ts)?;
    let mut w = BufWriter::new(File::create(report).with_context(|| report.display().to_string())?);
    write_report(&mut w, &outcome.rows)?;
    let mut w = BufWriter::new(File::create(pr).with_context(|| pr.display().to_string())?);
    write_pr_csv(&mut w, &ts, &outcome.pr)?;
    let reports: Vec<_> = outcome.rows.iter().map(|(_, r)| *r).collect();
    if let Some(a) = aggregate(&reports) {
        println!(
            "{} images: F {:.4} MAE {:.4} PRI {:.4} VOI {:.4} GCE {:.4} BDE {}",
            reports.len(),
            a.f_score,
            a.mae,
            a.pri,
            a.voi,
            a.gce,
            a.bde.map_or("NaN".to_string(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn infer<T: Real>(cfg: &RunConfig, ck: &Checkpoint, image: &Path, out: &Path, binary: bool) -> Result<()> {
    let mut net = load_model::<T>(cfg, ck)?;
    let img = load_image::<f64>(image)?;
    let map = predict_image(&mut net, &img)?;
    if binary {
        save_mask(&map.map(|v| if v >= DEFAULT_THRESHOLD { 1.0 } else { 0.0 }), out)?;
    } else {
        save_image(&map, out)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train { config, resume, out } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("reading config {}", config.display()))?;
            if let Some(o) = out {
                cfg.output.dir = o;
            }
            let summary = match cfg.run.precision {
                Precision::F32 => train_run::<f32>(&cfg, resume.as_deref())?,
                Precision::F64 => train_run::<f64>(&cfg, resume.as_deref())?,
            };
            println!(
                "{} iterations, loss {} -> {}, best {}, output {}",
                summary.iterations,
                summary.first_loss.map_or("-".into(), |v| format!("{v:.5}")),
                summary.final_loss.map_or("-".into(), |v| format!("{v:.5}")),
                summary.best_loss,
                summary.out_dir.display()
            );
        }
        Cmd::Eval {
            ckpt,
            data,
            report,
            config,
            pr,
            thresholds,
        } => {
            let cfg = config_for(&ckpt, config.as_deref())?;
            let ck = Checkpoint::load(&ckpt)?;
            let pr = pr.unwrap_or_else(|| {
                let mut p = report.clone().into_os_string();
                p.push(".pr.csv");
                p.into()
            });
            match cfg.run.precision {
                Precision::F32 => eval::<f32>(&cfg, &ck, &data, &report, &pr, thresholds)?,
                Precision::F64 => eval::<f64>(&cfg, &ck, &data, &report, &pr, thresholds)?,
            }
        }
        Cmd::Infer {
            ckpt,
            image,
            out,
            config,
            binary,
        } => {
            let cfg = config_for(&ckpt, config.as_deref())?;
            let ck = Checkpoint::load(&ckpt)?;
            match cfg.run.precision {
                Precision::F32 => infer::<f32>(&cfg, &ck, &image, &out, binary)?,
                Precision::F64 => infer::<f64>(&cfg, &ck, &image, &out, binary)?,
            }
        }
        Cmd::Synth {
            count,
            extent,
            seed,
            difficulty,
            out,
        } => {
            let samples = synth_generate(count, extent, seed, difficulty)?;
            save_dataset(&out, &samples)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Cmd::Verify {
            seeds,
            inject_dilation_fault,
        } => {
            let opts = VerifyOptions {
                seeds,
                dilation_skew: usize::from(inject_dilation_fault),
                ..VerifyOptions::default()
            };
            let checks = verify::run(&opts);
            print!("{}", verify::render(&checks));
            if !verify::all_pass(&checks) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
