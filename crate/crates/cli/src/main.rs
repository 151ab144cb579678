use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pyrstyle::config::TrainConfig;
use pyrstyle::eval::{comparison_table, evaluate, mean_row, to_csv};
use pyrstyle::imageio::{self, resize_bilinear, Image};
use pyrstyle::model::StyleModel;
use pyrstyle::tensor::OpKind;
use pyrstyle::trainer::{format_g, Dataset, NoObserver, Trainer};
use pyrstyle::verify::{self, MODEL_TOLERANCE, OP_TOLERANCE};
use pyrstyle::Error;
use pyrstyle_service::{serve, spawn_training, Session, DEFAULT_LISTEN};

/// Transformer style transfer with multi-scale positional encoding and
/// rating-driven training.
#[derive(Parser)]
#[command(name = "pyrstyle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a content/style dataset, writing metrics.csv and checkpoints.
    Train(RunArgs),
    /// Stylize one content image with one style image.
    Stylize(StylizeArgs),
    /// Per-pair and mean losses of one or more checkpoints.
    Eval(EvalArgs),
    /// Finite-difference gradient verification.
    Gradcheck(GradcheckArgs),
    /// Train behind the HTTP rating API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory of content images (PPM/PNG).
    #[arg(long, value_name = "DIR")]
    content_dir: Option<PathBuf>,
    /// Directory of style images (PPM/PNG).
    #[arg(long, value_name = "DIR")]
    style_dir: Option<PathBuf>,
    /// Output directory for metrics and checkpoints.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Total epochs; with --resume, training continues up to this count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for initialisation and pair shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Positional encoding of the content stream.
    #[arg(long, value_parser = ["ppe", "sinusoidal", "none"])]
    encoding: Option<String>,
    /// Continue from a checkpoint.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Feature extractor weights file instead of seeded weights.
    #[arg(long, value_name = "FILE")]
    phi_weights: Option<PathBuf>,
    /// Write 0 for the timing columns so metrics files are byte-comparable.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct StylizeArgs {
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "IMG")]
    content: PathBuf,
    #[arg(long, value_name = "IMG")]
    style: PathBuf,
    /// Output image; PNG if the extension is .png, PPM otherwise.
    #[arg(long, value_name = "IMG")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate; repeat to compare several.
    #[arg(long, value_name = "CKPT", required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    content_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    style_dir: Option<PathBuf>,
    /// Also write the per-pair and mean rows as CSV.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Forward passes per pair for the inference time median.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Skip inference timing and write 0.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = ["op", "model"], default_value = "op")]
    scale: String,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds (op scale).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Minimum sampled parameter coordinates (model scale).
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Test hook: scale the adjoint of this op by 1.5 (op scale).
    #[arg(long, value_name = "OP")]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Listen address.
    #[arg(long, default_value = DEFAULT_LISTEN)]
    listen: String,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Validation(_)) => 2,
        Some(Error::Data(_) | Error::Parse { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Stylize(a) => stylize(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Serve(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn print_config(config: &TrainConfig) {
    println!("# resolved configuration");
    print!("{}", config.to_text());
    println!();
}

fn load_config_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())).into())
}

impl RunArgs {
    fn apply(&self, c: &mut TrainConfig, file: Option<&str>) -> pyrstyle::Result<()> {
        if let Some(text) = file {
            c.apply_text(text)?;
        }
        if let Some(d) = &self.content_dir {
            c.content_dir = Some(d.clone());
        }
        if let Some(d) = &self.style_dir {
            c.style_dir = Some(d.clone());
        }
        if let Some(n) = self.epochs {
            c.epochs = n;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(e) = &self.encoding {
            c.encoding = e.parse()?;
        }
        if let Some(p) = &self.phi_weights {
            c.phi_weights = Some(p.clone());
        }
        if self.no_timing {
            c.timing = false;
        }
        Ok(())
    }

    /// Fresh or resumed trainer with all overrides applied.
    fn trainer(&self) -> Result<Trainer> {
        let file = self.config.as_deref().map(load_config_file).transpose()?;
        match &self.resume {
            Some(ckpt) => {
                let mut err = None;
                let trainer = Trainer::load(ckpt, |c| err = self.apply(c, file.as_deref()).err())
                    .with_context(|| format!("resuming from {}", ckpt.display()));
                if let Some(e) = err {
                    return Err(e.into());
                }
                trainer
            }
            None => {
                let mut c = TrainConfig::default();
                self.apply(&mut c, file.as_deref())?;
                c.validate()?;
                Ok(Trainer::new(c)?)
            }
        }
    }
}

fn dataset(config: &TrainConfig) -> Result<Dataset> {
    let content = config
        .content_dir
        .as_ref()
        .ok_or_else(|| Error::Data("missing --content-dir".into()))?;
    let style = config
        .style_dir
        .as_ref()
        .ok_or_else(|| Error::Data("missing --style-dir".into()))?;
    Ok(Dataset::load(content, style, config.image_size)?)
}

fn train(args: RunArgs) -> Result<()> {
    let mut trainer = args.trainer()?;
    print_config(&trainer.config);
    let data = dataset(&trainer.config)?;
    let start = trainer.epoch;
    let summary = trainer.run(&data, &args.out, &mut NoObserver)?;
    println!(
        "trained epochs {}..{} ({} pairs per epoch)",
        start + 1,
        trainer.epoch,
        data.pairs().len()
    );
    if let Some(row) = summary.rows.last() {
        println!(
            "last epoch: l_c {} l_s {} l_total {} gamma {}",
            format_g(row.l_c),
            format_g(row.l_s),
            format_g(row.l_total),
            format_g(row.gamma)
        );
    }
    println!("metrics: {}", args.out.join("metrics.csv").display());
    println!("checkpoint: {}", summary.checkpoint.display());
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<(TrainConfig, StyleModel)> {
    let trainer =
        Trainer::load(ckpt, |_| {}).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((trainer.config, trainer.model))
}

fn load_input(path: &Path, size: usize) -> Result<Image> {
    let img = imageio::load(path)?;
    if (img.height(), img.width()) != (size, size) {
        log::info!("resizing {} to {size}x{size}", path.display());
        return Ok(resize_bilinear(&img, size, size));
    }
    Ok(img)
}

fn stylize(args: StylizeArgs) -> Result<()> {
    let (config, model) = load_model(&args.checkpoint)?;
    print_config(&config);
    let content = load_input(&args.content, config.image_size)?;
    let style = load_input(&args.style, config.image_size)?;
    let t = Instant::now();
    let out = model.stylize(&content, &style)?;
    let seconds = t.elapsed().as_secs_f64();
    imageio::save(&out, &args.out)?;
    println!("wrote {}", args.out.display());
    println!("inference_seconds {}", format_g(seconds));
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let repeats = if args.no_timing { 0 } else { args.repeats };
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for ckpt in &args.checkpoint {
        let (mut config, model) = load_model(ckpt)?;
        if let Some(d) = &args.content_dir {
            config.content_dir = Some(d.clone());
        }
        if let Some(d) = &args.style_dir {
            config.style_dir = Some(d.clone());
        }
        print_config(&config);
        let data = dataset(&config)?;
        let label = config.encoding.to_string();
        let pairs = evaluate(&model, &label, &data, repeats)?;
        let mean = mean_row(&label, &pairs);
        rows.extend(pairs);
        rows.push(mean.clone());
        means.push(mean);
    }
    let csv = to_csv(&rows);
    print!("{csv}");
    println!();
    print!("{}", comparison_table(&means));
    if let Some(out) = &args.out {
        std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let fault = args
        .inject_fault
        .as_deref()
        .map(|name| {
            OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown op {name:?}")))
        })
        .transpose()?;
    let t = Instant::now();
    if args.scale == "model" {
        if fault.is_some() {
            return Err(Error::Config("--inject-fault applies to --scale op only".into()).into());
        }
        println!(
            "# gradcheck model seed {} min samples {}",
            args.seed, args.samples
        );
        let check = verify::check_model(args.seed, args.samples)?;
        for (name, err) in check.per_tensor() {
            println!("{name:<32} {:>12}", format_g(err));
        }
        println!(
            "{} samples over {} tensors in {:.1}s, max rel error {}",
            check.samples.len(),
            check.tensor_names.len(),
            t.elapsed().as_secs_f64(),
            format_g(check.max_rel_error())
        );
        let worst = check.worst().context("no samples")?;
        if worst.rel_error.is_nan() || worst.rel_error >= MODEL_TOLERANCE {
            bail!(
                "gradcheck failed: {} [{}] rel error {} exceeds {}",
                worst.tensor,
                worst.coord,
                format_g(worst.rel_error),
                format_g(MODEL_TOLERANCE)
            );
        }
    } else {
        let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
        println!("# gradcheck op seeds {seeds:?}");
        let results = verify::check_ops(&seeds, fault)?;
        for (op, err) in verify::worst_per_op(&results) {
            println!("{:<20} {:>12}", op.name(), format_g(err));
        }
        println!(
            "{} cases in {:.1}s",
            results.len(),
            t.elapsed().as_secs_f64()
        );
        let worst = results
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .context("no cases")?;
        if worst.max_rel_error.is_nan() || worst.max_rel_error >= OP_TOLERANCE {
            bail!(
                "gradcheck failed: {} ({}, seed {}) rel error {} exceeds {}",
                worst.op,
                worst.label,
                worst.seed,
                format_g(worst.max_rel_error),
                format_g(OP_TOLERANCE)
            );
        }
    }
    println!("ok");
    Ok(())
}

/// Without a dataset, `--resume` serves the checkpoint for stylization only.
fn serve_cmd(args: ServeArgs) -> Result<()> {
    let trainer = args.run.trainer()?;
    print_config(&trainer.config);
    let session = Session::new(trainer.config.samples_kept);
    let training = if trainer.config.content_dir.is_none() && args.run.resume.is_some() {
        session.publish_model(trainer.model);
        None
    } else {
        let data = dataset(&trainer.config)?;
        Some(spawn_training(
            &session,
            trainer,
            data,
            args.run.out.clone(),
        )?)
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.listen)
            .await
            .with_context(|| format!("binding {}", args.listen))?;
        println!("listening on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        serve(listener, Arc::clone(&session), shutdown).await?;
        anyhow::Ok(())
    })?;
    session.request_stop();
    if let Some(handle) = training {
        log::info!("waiting for the current epoch to finish");
        match handle.join() {
            Ok(r) => {
                r?;
            }
            Err(_) => bail!("training thread panicked"),
        }
    }
    Ok(())
}
