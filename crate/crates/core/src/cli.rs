//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when a command fails while running, 2 for
//! usage errors (bad flags, missing input paths).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baseline::{bp_reconstruct_image, dct_basis, random_ternary_projection, BpConfig, METHOD_LABEL};
use crate::imaging::{extract_patches, psnr, quantize, read_pgm, read_pgm_dir, write_pgm, GrayImage};
use crate::model::{reassemble, sense_raw, Model};
use crate::network::NetworkConfig;
use crate::numerics::SeededRng;
use crate::persistence::{load_checkpoint, load_measurements, load_stp, save_checkpoint, save_measurements, save_stp, MeasurementSet};
use crate::training::{train_on_images, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ternsense", version, about = "Learned sparse ternary compressed sensing for grayscale images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a projection and reconstruction network on a directory of PGM images.
    Train(TrainArgs),
    /// Write the ternary projection of a checkpoint as an STPM file.
    ExportMatrix(ExportArgs),
    /// Measure every patch of an image.
    Sense(SenseArgs),
    /// Rebuild an image from a measurement file.
    Reconstruct(ReconstructArgs),
    /// Report per-image and mean PSNR over a directory of PGM images.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of training images (.pgm).
    #[arg(long)]
    pub images: PathBuf,
    /// Patch side S.
    #[arg(long, default_value_t = 32)]
    pub patch: usize,
    /// Sensing rate R = m / S^2.
    #[arg(long, default_value_t = 0.25)]
    pub rate: f64,
    /// Nonzero ratio per projection column.
    #[arg(long, default_value_t = 0.05)]
    pub gamma: f64,
    /// Number of random training patches.
    #[arg(long, default_value_t = 100_000)]
    pub patches: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5000)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Learning-rate decay factor.
    #[arg(long, default_value_t = 0.6)]
    pub decay: f64,
    /// Epochs between learning-rate decays.
    #[arg(long, default_value_t = 5)]
    pub decay_every: usize,
    /// Weight of the l2 penalty on reconstruction weights.
    #[arg(long, default_value_t = 0.001)]
    pub l2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub hidden_layers: usize,
    #[arg(long, default_value_t = 2048)]
    pub hidden_units: usize,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss log (CSV). Defaults to the checkpoint path with a
    /// `.loss.csv` suffix.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SenseArgs {
    /// Ternary projection (STPM).
    #[arg(long)]
    pub matrix: PathBuf,
    /// Checkpoint supplying the normalization statistics.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub measurements: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    None,
    Bp,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of held-out images (.pgm).
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    #[arg(long, value_enum, default_value_t = Baseline::None)]
    pub baseline: Baseline,
    /// Feed extracted patches straight into reassembly instead of the
    /// network (reported as method "identity").
    #[arg(long)]
    pub bypass_reconstructor: bool,
    /// Seed of the baseline's random projection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Iteration cap of the baseline solver.
    #[arg(long, default_value_t = 1000)]
    pub bp_iters: usize,
    #[arg(long)]
    pub report: PathBuf,
}

/// Why a command did not complete.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_dir(path: &Path) -> CliResult {
    if !path.is_dir() {
        return Err(usage(format!("image directory {} does not exist", path.display())));
    }
    Ok(())
}

fn require_file(path: &Path) -> CliResult {
    if !path.is_file() {
        return Err(usage(format!("input file {} does not exist", path.display())));
    }
    Ok(())
}

fn require_stride(stride: usize) -> CliResult {
    if stride == 0 {
        return Err(usage("--stride must be at least 1"));
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::ExportMatrix(a) => cmd_export_matrix(&a, out),
        Command::Sense(a) => cmd_sense(&a, out),
        Command::Reconstruct(a) => cmd_reconstruct(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
    }
}

fn load_images(dir: &Path) -> CliResult<Vec<(String, GrayImage)>> {
    let images = read_pgm_dir(dir).with_context(|| format!("reading images from {}", dir.display()))?;
    if images.is_empty() {
        return Err(usage(format!("no .pgm images in {}", dir.display())));
    }
    Ok(images)
}

fn write_out(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> CliResult {
    out.write_fmt(line)
        .and_then(|_| out.write_all(b"\n"))
        .context("writing to stdout")?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let net_cfg = NetworkConfig {
        patch_side: a.patch,
        sensing_rate: a.rate,
        sparsity_ratio: a.gamma,
        hidden_layers: a.hidden_layers,
        hidden_units: a.hidden_units,
    };
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        base_lr: a.lr,
        lr_decay_factor: a.decay,
        lr_decay_every: a.decay_every,
        weight_decay: a.l2,
        seed: a.seed,
    };
    net_cfg.validate().map_err(|e| usage(e.to_string()))?;
    train_cfg.validate().map_err(|e| usage(e.to_string()))?;
    if a.patches < 2 {
        return Err(usage("--patches must be at least 2"));
    }
    require_dir(&a.images)?;

    let images: Vec<GrayImage> = load_images(&a.images)?.into_iter().map(|(_, img)| img).collect();
    write_out(
        out,
        format_args!(
            "n={} m={} K={} images={} patches={}",
            net_cfg.n(),
            net_cfg.m(),
            net_cfg.k(),
            images.len(),
            a.patches
        ),
    )?;

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    writeln!(log, "epoch,step,loss,lr").context("writing loss log")?;
    let mut log_err = None;
    let (model, epochs) = train_on_images(&images, net_cfg, a.patches, &train_cfg, |s| {
        if log_err.is_none() {
            log_err = writeln!(log, "{s}").err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(anyhow::Error::new(e).context("writing loss log").into());
    }
    log.flush().context("writing loss log")?;

    for e in &epochs {
        write_out(
            out,
            format_args!(
                "epoch {} steps {} lr {:.6} loss {:.6} mse {:.6}",
                e.epoch, e.steps, e.lr, e.mean_loss, e.mean_mse
            ),
        )?;
    }
    save_checkpoint(&a.out, &model).with_context(|| format!("writing {}", a.out.display()))?;
    write_out(out, format_args!("wrote {}", a.out.display()))?;
    Ok(())
}

fn load_model(path: &Path) -> CliResult<Model> {
    require_file(path)?;
    Ok(load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?)
}

pub fn cmd_export_matrix(a: &ExportArgs, out: &mut dyn Write) -> CliResult {
    let model = load_model(&a.model)?;
    let t = model.projection();
    save_stp(&a.out, t).with_context(|| format!("writing {}", a.out.display()))?;
    write_out(
        out,
        format_args!("wrote {} (n={} m={} K={})", a.out.display(), t.n(), t.m(), t.k()),
    )
}

pub fn cmd_sense(a: &SenseArgs, out: &mut dyn Write) -> CliResult {
    require_stride(a.stride)?;
    require_file(&a.matrix)?;
    require_file(&a.image)?;
    let model = load_model(&a.model)?;
    let matrix = load_stp(&a.matrix).with_context(|| format!("loading matrix {}", a.matrix.display()))?;
    if matrix.n() != model.config.n() {
        return Err(anyhow::anyhow!(
            "matrix expects {}-pixel patches, model uses {}",
            matrix.n(),
            model.config.n()
        )
        .into());
    }
    let img = read_pgm(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let side = model.config.patch_side;
    let patches = extract_patches(&img, side, a.stride)?;
    let vectors = sense_raw(&matrix, &model.stats, &patches.vectors)?;
    let set = MeasurementSet {
        width: img.width(),
        height: img.height(),
        patch_side: side,
        stride: a.stride,
        vectors,
    };
    save_measurements(&a.out, &set).with_context(|| format!("writing {}", a.out.display()))?;
    write_out(
        out,
        format_args!(
            "wrote {} ({} patches x {} measurements)",
            a.out.display(),
            set.vectors.rows(),
            set.vectors.cols()
        ),
    )
}

pub fn cmd_reconstruct(a: &ReconstructArgs, out: &mut dyn Write) -> CliResult {
    require_file(&a.measurements)?;
    let model = load_model(&a.model)?;
    let set = load_measurements(&a.measurements)
        .with_context(|| format!("loading measurements {}", a.measurements.display()))?;
    if set.patch_side != model.config.patch_side || set.vectors.cols() != model.config.m() {
        return Err(anyhow::anyhow!(
            "measurements use patch side {} and m = {}, model uses {} and {}",
            set.patch_side,
            set.vectors.cols(),
            model.config.patch_side,
            model.config.m()
        )
        .into());
    }
    let decoded = model.decode_patches(&set.vectors)?;
    let img = quantize(&reassemble(decoded, set.patch_side, set.stride, set.width, set.height)?);
    write_pgm(&a.out, &img).with_context(|| format!("writing {}", a.out.display()))?;
    write_out(out, format_args!("wrote {} ({}x{})", a.out.display(), img.width(), img.height()))
}

/// `"inf"` for a perfect match, two decimals otherwise.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.2}")
    }
}

pub const PROPOSED_LABEL: &str = "proposed";
pub const IDENTITY_LABEL: &str = "identity";
pub const MEAN_ROW: &str = "mean";

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> CliResult {
    require_stride(a.stride)?;
    if a.bp_iters == 0 {
        return Err(usage("--bp-iters must be at least 1"));
    }
    require_dir(&a.images)?;
    let model = load_model(&a.model)?;
    let images = load_images(&a.images)?;
    let side = model.config.patch_side;

    let mut methods: Vec<&str> = vec![if a.bypass_reconstructor { IDENTITY_LABEL } else { PROPOSED_LABEL }];
    let bp = match a.baseline {
        Baseline::None => None,
        Baseline::Bp => {
            methods.push(METHOD_LABEL);
            let phi = random_ternary_projection(model.config.n(), model.config.m(), &mut SeededRng::new(a.seed))?;
            let cfg = BpConfig {
                max_iters: a.bp_iters,
                ..BpConfig::default()
            };
            Some((phi, dct_basis(side)?, cfg))
        }
    };

    let mut rows: Vec<(String, &str, f64)> = Vec::new();
    for (name, img) in &images {
        let first = if a.bypass_reconstructor {
            let patches = extract_patches(img, side, a.stride)?;
            reassemble(patches.vectors, side, a.stride, img.width(), img.height())?
        } else {
            model.reconstruct_image(img, a.stride)?
        };
        rows.push((name.clone(), methods[0], psnr(img, &first)?));
        if let Some((phi, basis, cfg)) = &bp {
            let rec = bp_reconstruct_image(phi, basis, img, a.stride, cfg)?;
            rows.push((name.clone(), METHOD_LABEL, psnr(img, &rec)?));
        }
    }

    let mut wtr = csv::Writer::from_path(&a.report).with_context(|| format!("creating {}", a.report.display()))?;
    wtr.write_record(["image", "method", "psnr_db"]).context("writing report")?;
    let mut write_row = |image: &str, method: &str, v: f64| -> CliResult {
        wtr.write_record([image, method, &format_psnr(v)])
            .context("writing report")?;
        Ok(())
    };
    for (name, method, v) in &rows {
        write_row(name, method, *v)?;
    }
    let mut means = Vec::new();
    for method in &methods {
        let vals: Vec<f64> = rows.iter().filter(|r| r.1 == *method).map(|r| r.2).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        write_row(MEAN_ROW, method, mean)?;
        means.push((method, mean));
    }
    wtr.flush().context("writing report")?;

    for (name, method, v) in &rows {
        write_out(out, format_args!("{name:<24} {method:<24} {}", format_psnr(*v)))?;
    }
    for (method, mean) in means {
        write_out(out, format_args!("{MEAN_ROW:<24} {method:<24} {}", format_psnr(mean)))?;
    }
    Ok(())
}
