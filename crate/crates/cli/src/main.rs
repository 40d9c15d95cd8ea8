use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use deal::degrade::{mix_seed, Family, SeverityBank};
use deal::io::{list_images, load_image, save_image, BitDepth, Checkpoint, Manifest};
use deal::train::{enhance, evaluate, EvalInput, RunLog, TrainConfig, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "deal", version, about = "Degradation-aware enhancement of thermal infrared images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply one banked degradation to every image of a directory.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// stripe, lowres or contrast
        #[arg(long)]
        family: Family,
        /// Severity index within the family, 0 is the mildest.
        #[arg(long)]
        level: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the enhancer against the degradation generator.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Manifest split to train on.
        #[arg(long, default_value = "train")]
        split: String,
        /// Run log (JSON lines); defaults to the checkpoint path with `.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from the checkpoint at --out if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Enhance every image of a directory with a trained checkpoint.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrade, enhance and score a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Operator chain such as `stripe:0.15+lowres:2`, or `paired` to use
        /// the manifest's degraded images.
        #[arg(long)]
        degradation: String,
        #[arg(long)]
        report: PathBuf,
        /// JSON summary with per-metric means and standard deviations.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Restrict to one manifest split.
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check every differentiable op against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write synthetic thermal-like scenes and a manifest listing them.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure with a specific exit code.
#[derive(Debug)]
struct Exit(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Exit {
    fn from(e: E) -> Self {
        Exit(1, e.into())
    }
}

fn output_path(dir: &Path, src: &Path) -> Result<PathBuf> {
    let name = src.file_name().context("input path has no file name")?;
    Ok(dir.join(name))
}

fn degrade(input: &Path, out: &Path, family: Family, level: usize, seed: u64) -> Result<()> {
    let op = SeverityBank::default().level(family, level)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, path) in list_images(input)?.iter().enumerate() {
        let (img, depth) = load_image(path)?;
        let y = op.apply(&img, mix_seed(seed, i as u64))?;
        save_image(&y, output_path(out, path)?, depth)?;
    }
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, out: &Path, split: &str, log: Option<&Path>, resume: bool) -> Result<(), Exit> {
    let mut trainer = if resume && out.exists() {
        let t = Trainer::from_checkpoint(&Checkpoint::load(out)?)?;
        log::info!("resuming at epoch {} (iteration {})", t.epoch, t.iteration);
        t
    } else {
        let cfg = match config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                TrainConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => TrainConfig::default(),
        };
        Trainer::new(cfg)?
    };
    let divisor = trainer.cfg.bank.required_divisor().max(4);
    let manifest = Manifest::read(data)?;
    let split = manifest.splits().contains(&split).then_some(split);
    let samples = manifest.load(split, divisor)?;
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("log.jsonl"));
    let sink = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    trainer.log = RunLog::with_sink(Box::new(BufWriter::new(sink)));
    trainer.checkpoint_path = Some(out.to_path_buf());
    match trainer.train(&samples) {
        Ok(()) => {
            trainer.to_checkpoint().save(out)?;
            Ok(())
        }
        Err(e @ TrainError::Diverged { .. }) => Err(Exit(2, e.into())),
        Err(e) => Err(e.into()),
    }
}

fn run_enhance(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let t = Trainer::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for path in list_images(input)? {
        let (img, depth) = load_image(&path)?;
        let y = enhance(&t.omega, &t.cfg.model, &img).with_context(|| format!("enhancing {}", path.display()))?;
        save_image(&y, output_path(out, &path)?, depth)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    ckpt: &Path,
    data: &Path,
    degradation: &str,
    report: &Path,
    summary: Option<&Path>,
    split: Option<&str>,
    seed: u64,
) -> Result<()> {
    let input = match degradation {
        "paired" => EvalInput::Paired,
        s => EvalInput::Synthetic(s.parse()?),
    };
    let t = Trainer::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let samples = Manifest::read(data)?.load(split, 4)?;
    if samples.is_empty() {
        bail!("no images in {}", data.display());
    }
    let r = evaluate(&t.omega, &t.cfg.model, &samples, &input, seed)?;
    fs::write(report, r.to_csv()).with_context(|| format!("writing {}", report.display()))?;
    if let Some(p) = summary {
        fs::write(p, format!("{}\n", r.summary_json())).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<(), Exit> {
    let report = deal::gradcheck::run_suite(seed)?;
    for c in report.checks.iter().filter(|c| !c.passed()) {
        eprintln!("error: gradcheck {} instance {} relative error {:.3e}", c.name, c.instance, c.rel_error);
    }
    if let Some(w) = report.worst() {
        println!(
            "{} checks, worst {} ({:.3e})",
            report.checks.len(),
            w.name,
            w.rel_error
        );
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(Exit(1, anyhow::anyhow!("gradient check failed")))
    }
}

fn synth(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    if size == 0 || size % 4 != 0 {
        bail!("--size must be a positive multiple of 4");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = String::new();
    for (i, img) in deal::synth::scenes(count, size, size, seed).iter().enumerate() {
        let name = format!("scene{i:04}.png");
        save_image(img, out.join(&name), BitDepth::Sixteen)?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = out.join("manifest.txt");
    fs::write(&path, manifest).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Exit> {
    match cli.command {
        Command::Degrade {
            input,
            out,
            family,
            level,
            seed,
        } => degrade(&input, &out, family, level, seed)?,
        Command::Train {
            data,
            config,
            out,
            split,
            log,
            resume,
        } => train(&data, config.as_deref(), &out, &split, log.as_deref(), resume)?,
        Command::Enhance { ckpt, input, out } => run_enhance(&ckpt, &input, &out)?,
        Command::Eval {
            ckpt,
            data,
            degradation,
            report,
            summary,
            split,
            seed,
        } => eval(&ckpt, &data, &degradation, &report, summary.as_deref(), split.as_deref(), seed)?,
        Command::Gradcheck { seed } => gradcheck(seed)?,
        Command::Synth { out, count, size, seed } => synth(&out, count, size, seed)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
