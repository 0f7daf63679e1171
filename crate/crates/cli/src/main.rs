// `!(t >= 0.0)` rejects NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use condflow::data::Dataset;
use condflow::flow::FlowModel;
use condflow::inference::{self, binary_mask, PredictMode, Prediction};
use condflow::io::{load_tensor, save_tensor};
use condflow::tasks::config::RunConfig;
use condflow::tasks::eval::{evaluate, score};
use condflow::tasks::image::write_pnm;
use condflow::tasks::metrics::MetricReport;
use condflow::tasks::{generate, read_dataset, stack, unstack, write_dataset, TaskData, TaskKind};
use condflow::training::{load_checkpoint, save_checkpoint, train_loop, RunPaths, Trainer};
use condflow::verify::run_suite;
use condflow::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "condflow", version, about = "Conditional normalizing flows for structured prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    SampleMean,
    Gradient,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test datasets into <outdir>/data.
    Gen {
        /// Run configuration (key = value lines).
        #[arg(long)]
        config: PathBuf,
    },
    /// Train from scratch (or resume) and write <outdir>/model.cfck.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict the test split and write predictions plus a metric report.
    Predict {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to <outdir>/model.cfck.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides predict.mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Number of samples averaged in sample-mean mode; overrides predict.M.
        #[arg(long = "M")]
        m: Option<usize>,
        /// Sampling seed; defaults to train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw conditional samples for one test input.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test example to condition on.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Latent temperature; defaults to predict.temperature.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score stored predictions and write the metric report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the numerical invariant suite on tiny models.
    Check {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Singular { .. } | Error::NonFinite { .. } | Error::DivByZero(_) | Error::LogDomain(_) => 3,
        _ => 1,
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config {
        key: "<file>".into(),
        detail: format!("cannot read {}: {e}", path.display()),
    })?;
    Ok(RunConfig::parse(&text)?)
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.outdir.join("data")
}

fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.outdir.join("model.cfck")
}

/// Reuse `<outdir>/data` when its manifest matches the task, otherwise
/// regenerate it.
fn load_or_generate(cfg: &RunConfig) -> Result<TaskData, Failure> {
    let dir = data_dir(cfg);
    if dir.join("manifest.json").exists() {
        if let Ok((m, data)) = read_dataset(&dir) {
            if m.spec == cfg.task {
                return Ok(data);
            }
        }
        eprintln!("dataset in {} does not match the config; regenerating", dir.display());
    }
    let data = generate(&cfg.task)?;
    write_dataset(&dir, &cfg.task, &data)?;
    Ok(data)
}

fn load_model(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<FlowModel, Failure> {
    let path = checkpoint.unwrap_or_else(|| default_checkpoint(cfg));
    let t = load_checkpoint(&path).map_err(|e| match e {
        Error::Io(io) => Failure::Usage(format!("cannot open checkpoint {}: {io}", path.display())),
        other => Failure::Core(other),
    })?;
    if t.model.config() != &cfg.model {
        return Err(Failure::Core(Error::Config {
            key: "model.L".into(),
            detail: format!("checkpoint {} was trained with a different architecture", path.display()),
        }));
    }
    Ok(t.model)
}

fn gen(cfg: &RunConfig) -> Result<(), Failure> {
    let data = generate(&cfg.task)?;
    let m = write_dataset(&data_dir(cfg), &cfg.task, &data)?;
    println!(
        "wrote {} train / {} test {} examples to {} (sha256 {})",
        data.train.len(),
        data.test.len(),
        cfg.task.kind.name(),
        data_dir(cfg).display(),
        m.sha256
    );
    Ok(())
}

fn train(cfg: &RunConfig, resume: Option<PathBuf>) -> Result<(), Failure> {
    fs::create_dir_all(&cfg.outdir)?;
    let data = load_or_generate(cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = load_checkpoint(&p)?;
            t.config.iterations = cfg.train.iterations;
            t
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            Trainer::new(FlowModel::new(cfg.model.clone(), &mut rng)?, cfg.train.clone())
        }
    };
    let paths = RunPaths {
        curve: Some(cfg.outdir.join("curve.csv")),
        checkpoint: Some(default_checkpoint(cfg)),
    };
    println!(
        "training {} parameters for {} iterations",
        trainer.model.param_count(),
        trainer.config.iterations.saturating_sub(trainer.iteration)
    );
    let curve = train_loop(&mut trainer, &data.train, &paths)?;
    if let Some((it, nll)) = curve.last() {
        println!("iteration {it}: nll {nll:.6} nats/dim");
    }
    save_checkpoint(default_checkpoint(cfg), &trainer)?;
    println!("checkpoint {}", default_checkpoint(cfg).display());
    Ok(())
}

fn write_report(cfg: &RunConfig, report: &MetricReport) -> Result<(), Failure> {
    fs::write(cfg.outdir.join("metrics.csv"), report.to_csv())?;
    fs::write(cfg.outdir.join("metrics.jsonl"), report.to_json_lines()?)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} {} M={}: IOU {} PSNR {} pixel accuracy {} ({:.2}s)",
        report.task,
        report.mode,
        report.m,
        fmt(report.mean_iou),
        fmt(report.mean_psnr),
        fmt(report.mean_pixel_accuracy),
        report.wall_time_s
    );
    Ok(())
}

fn export_images(cfg: &RunConfig, test: &Dataset, raw_preds: &[Tensor]) -> Result<(), Failure> {
    let dir = cfg.outdir.join("images");
    fs::create_dir_all(&dir)?;
    let pre = cfg.model.preprocess;
    for (i, (ex, p)) in test.examples.iter().zip(raw_preds).enumerate().take(8) {
        write_pnm(dir.join(format!("{i}_x.pgm")), &ex.x, 0.0, 255.0)?;
        match cfg.task.kind {
            TaskKind::BinarySeg => {
                let mask = binary_mask(&pre.normalize(p), &pre)?;
                write_pnm(dir.join(format!("{i}_pred.pgm")), &mask, 0.0, 1.0)?;
                write_pnm(dir.join(format!("{i}_true.pgm")), &ex.y.slice_channels(0, 1)?, 0.0, 1.0)?;
            }
            TaskKind::Denoise => {
                let denoised = ex.x.zip_map(p, |a, r| a - r)?;
                write_pnm(dir.join(format!("{i}_pred.pgm")), &denoised, 0.0, 255.0)?;
            }
            TaskKind::Inpaint => {
                write_pnm(dir.join(format!("{i}_pred.pgm")), p, 0.0, 255.0)?;
                write_pnm(dir.join(format!("{i}_true.pgm")), &ex.y, 0.0, 255.0)?;
            }
        }
    }
    Ok(())
}

fn predict(mut cfg: RunConfig, checkpoint: Option<PathBuf>, mode: Option<Mode>, m: Option<usize>, seed: Option<u64>) -> Result<(), Failure> {
    if let Some(mode) = mode {
        cfg.predict.mode = match mode {
            Mode::SampleMean => PredictMode::SampleMean,
            Mode::Gradient => PredictMode::Gradient,
        };
    }
    if let Some(m) = m {
        cfg.predict.m = m;
    }
    cfg.predict.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let model = load_model(&cfg, checkpoint)?;
    let data = load_or_generate(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.train.seed));
    let (report, preds) = evaluate(&model, &cfg.task, &data.test, &cfg.predict, &mut rng)?;
    let pre = cfg.model.preprocess;
    let raw: Vec<Tensor> = preds.iter().map(|p| pre.unnormalize(&p.y)).collect();
    save_tensor(cfg.outdir.join("predictions.cft"), &stack(&raw.iter().collect::<Vec<_>>())?)?;
    if let Some(Prediction { variance: Some(_), .. }) = preds.first() {
        let (_, scale) = match pre {
            condflow::flow::Preprocess::Dequantize { bins } => (0.0, bins as f64),
            condflow::flow::Preprocess::Affine { scale, .. } => (0.0, scale),
        };
        let vars: Vec<Tensor> = preds
            .iter()
            .map(|p| p.variance.as_ref().expect("sample-mean variance").map(|v| v * scale * scale))
            .collect();
        save_tensor(cfg.outdir.join("variance.cft"), &stack(&vars.iter().collect::<Vec<_>>())?)?;
    }
    export_images(&cfg, &data.test, &raw)?;
    write_report(&cfg, &report)
}

fn sample(cfg: &RunConfig, checkpoint: Option<PathBuf>, index: usize, count: usize, temperature: Option<f64>, seed: u64) -> Result<(), Failure> {
    let model = load_model(cfg, checkpoint)?;
    let data = load_or_generate(cfg)?;
    if index >= data.test.len() {
        return Err(Failure::Usage(format!("--index {index} but the test split has {} examples", data.test.len())));
    }
    let t = temperature.unwrap_or(cfg.predict.temperature);
    if !(t >= 0.0) {
        return Err(Failure::Usage(format!("temperature {t} must be >= 0")));
    }
    let dir = cfg.outdir.join("samples");
    fs::create_dir_all(&dir)?;
    let x = data.test.model_input(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(count);
    for k in 0..count {
        let s = inference::sample(&model, &x, &mut rng, t)?;
        let img = match cfg.task.kind {
            TaskKind::BinarySeg => s.map(|v| v.clamp(0.0, 1.0)),
            TaskKind::Denoise => data.test.examples[index].x.zip_map(&s, |a, r| a - r)?,
            TaskKind::Inpaint => s.clone(),
        };
        let hi = if cfg.task.kind == TaskKind::BinarySeg { 1.0 } else { 255.0 };
        let ext = if img.channels() == 3 { "ppm" } else { "pgm" };
        write_pnm(dir.join(format!("{index}_{k}.{ext}")), &img, 0.0, hi)?;
        draws.push(s);
    }
    save_tensor(dir.join(format!("{index}.cft")), &stack(&draws.iter().collect::<Vec<_>>())?)?;
    println!("wrote {count} samples for test example {index} to {}", dir.display());
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(), Failure> {
    let model = load_model(cfg, checkpoint)?;
    let data = load_or_generate(cfg)?;
    let path = cfg.outdir.join("predictions.cft");
    let preds = unstack(&load_tensor(&path).map_err(|e| match e {
        Error::Io(io) => Failure::Usage(format!("cannot open {} (run predict first): {io}", path.display())),
        other => Failure::Core(other),
    })?)?;
    if preds.len() != data.test.len() {
        return Err(Failure::Usage(format!(
            "{} predictions for {} test examples",
            preds.len(),
            data.test.len()
        )));
    }
    let pre = cfg.model.preprocess;
    let start = std::time::Instant::now();
    let mut rows = Vec::new();
    for (i, (ex, raw)) in data.test.examples.iter().zip(&preds).enumerate() {
        let y = pre.normalize(raw);
        let ll = model.log_likelihood(&data.test.model_input(i), &y)?;
        let p = Prediction {
            y,
            variance: None,
            log_likelihood: ll,
        };
        rows.push(score(&cfg.task, &model, i, &ex.x, &ex.y, &p)?);
    }
    let mode = match cfg.predict.mode {
        PredictMode::SampleMean => "sample-mean",
        PredictMode::Gradient => "gradient",
    };
    let report = MetricReport::new(cfg.task.kind.name(), mode, cfg.predict.m, start.elapsed().as_secs_f64(), rows);
    write_report(cfg, &report)
}

fn check(seed: u64) -> Result<(), Failure> {
    let rows = run_suite(seed)?;
    println!("{:<36} {:>14} {:>12}  result", "invariant", "value", "threshold");
    let mut ok = true;
    for r in &rows {
        let cmp = if r.below { "<" } else { ">=" };
        println!(
            "{:<36} {:>14.3e} {:>2}{:>10.1e}  {}",
            r.name,
            r.value,
            cmp,
            r.threshold,
            if r.pass() { "pass" } else { "FAIL" }
        );
        ok &= r.pass();
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { config } => gen(&load_config(&config)?),
        Command::Train { config, resume } => train(&load_config(&config)?, resume),
        Command::Predict {
            config,
            checkpoint,
            mode,
            m,
            seed,
        } => predict(load_config(&config)?, checkpoint, mode, m, seed),
        Command::Sample {
            config,
            checkpoint,
            index,
            count,
            temperature,
            seed,
        } => sample(&load_config(&config)?, checkpoint, index, count, temperature, seed),
        Command::Eval { config, checkpoint } => eval(&load_config(&config)?, checkpoint),
        Command::Check { seed } => check(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Check) => {
            eprintln!("error: invariant check failed");
            ExitCode::from(4)
        }
    }
}
