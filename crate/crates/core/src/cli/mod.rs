//! The `nlcunet` command line: argument parsing, the run configuration
//! document and one thin wrapper per subcommand.

mod config;

pub use config::{RunConfig, RunPaths, SCHEMA_VERSION};

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{find_pngs, load_png, load_records, prepare_data, read_manifest, save_png, write_manifest};
use crate::degradation::{blur_downsample, degrade_item, test_kernel_grid, DegradationSpec, KernelParams};
use crate::error::Error;
use crate::metrics::{evaluate_rgb, ImageMetric, MetricReport};
use crate::model::{load_generator, Discriminator, Generator};
use crate::tensor::{bicubic_resize_tensor, Tensor};
use crate::training::{
    super_resolve, train_gan_stage, train_psnr_stage, GanState, PsnrState, Stage, StepRecord, TrainContext,
    TrainData, ValidationSet, CHECKPOINT_FILE,
};

/// Name of the JSON-lines manifest written next to degraded images.
pub const DEGRADATION_MANIFEST: &str = "degradation.jsonl";

/// A failure mapped to a process exit code.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 1,
            ErrorKind::Io => 2,
            ErrorKind::Numeric => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Io => "io",
            ErrorKind::Numeric => "numeric",
        }
    }
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

/// `error kind=<kind> code=<n>: <message>` on a single line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error kind={} code={}: {one_line}", self.kind.name(), self.exit_code())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Io(_) | Error::Image { .. } | Error::Checkpoint(_) => ErrorKind::Io,
            Error::NonFinite(_) => ErrorKind::Numeric,
            _ => ErrorKind::Config,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "nlcunet", version, about = "Blind single-image super-resolution")]
pub struct Cli {
    /// Print the effective run configuration (defaults merged with --config)
    /// and exit.
    #[arg(long)]
    pub print_config: bool,
    /// Run configuration document (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Config1,
    Config2,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Psnr,
    Gan,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Index a directory of PNGs into a dataset manifest.
    PrepareData {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Synthesize LR images (and a JSON-lines manifest) from HR images.
    Degrade {
        #[arg(long, conflicts_with = "manifest")]
        input: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Replaces the document's degradation spec.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        scale: Option<usize>,
        /// Noise level on the 0..255 scale.
        #[arg(long)]
        noise: Option<f64>,
        /// Identity preset only: resample up by the scale instead of down
        /// (the bicubic baseline).
        #[arg(long)]
        upsample: bool,
    },
    /// Train the generator (PSNR stage) or fine-tune it adversarially.
    Train {
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Super-resolve every PNG of a directory with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Y-channel PSNR/SSIM of SR images against HR images.
    Eval {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        scale: usize,
        /// Degradation manifest mapping SR names to HR names and widths.
        #[arg(long)]
        degradation_manifest: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// The eight test kernels; with --input/--output, synthesizes the test set.
    KernelGrid {
        #[arg(long)]
        scale: usize,
        #[arg(long, requires = "output")]
        input: Option<PathBuf>,
        #[arg(long, requires = "input")]
        output: Option<PathBuf>,
    },
}

/// One line of the degradation manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradedEntry {
    /// File name of the LR image in the output directory.
    pub name: String,
    /// File name of the HR source.
    pub source: String,
    pub index: u64,
    pub scale: usize,
    pub kernel: KernelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_width: Option<f64>,
    pub noise_sigma: f64,
}

/// Parses `args` (including the program name) and runs the command; output
/// goes to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> CliResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            return Err(CliError::config(text.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ")));
        }
    };
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => CliError {
                kind: ErrorKind::Io,
                message: format!("{}: {io}", p.display()),
            },
            other => other.into(),
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if cli.print_config {
        writeln!(out, "{}", cfg.to_json())?;
        return Ok(());
    }
    match cli.command {
        None => Err(CliError::config("no subcommand given (see --help)")),
        Some(Command::PrepareData { input, manifest }) => cmd_prepare(&input, &manifest, out),
        Some(Command::Degrade {
            input,
            manifest,
            output,
            preset,
            scale,
            noise,
            upsample,
        }) => {
            let mut spec = cfg.degradation;
            let scale = scale.unwrap_or(spec.scale);
            if let Some(p) = preset {
                spec = match p {
                    Preset::Config1 => DegradationSpec::config1(scale, spec.seed)?,
                    Preset::Config2 => DegradationSpec::config2(scale, spec.seed)?,
                    Preset::Identity => DegradationSpec::identity(scale)?.with_seed(spec.seed),
                };
            } else {
                spec.scale = scale;
            }
            if let Some(n) = noise {
                spec = spec.with_noise(n);
            }
            spec.validate()?;
            let images = input_images(input.as_deref(), manifest.as_deref())?;
            cmd_degrade(&images, &output, &spec, upsample, out)
        }
        Some(Command::Train {
            stage,
            resume,
            out: dir,
            iterations,
        }) => {
            if let Some(s) = stage {
                cfg.train.stage = match s {
                    StageArg::Psnr => Stage::Psnr,
                    StageArg::Gan => Stage::Gan,
                };
            }
            if let Some(d) = dir {
                cfg.paths.output = d;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            cmd_train(&cfg, resume.as_deref(), out)
        }
        Some(Command::Infer {
            checkpoint,
            input,
            output,
        }) => cmd_infer(&checkpoint, &input, &output, out),
        Some(Command::Eval {
            sr,
            hr,
            scale,
            degradation_manifest,
            report,
        }) => cmd_eval(&sr, &hr, scale, degradation_manifest.as_deref(), report.as_deref(), out),
        Some(Command::KernelGrid { scale, input, output }) => cmd_kernel_grid(scale, input.as_deref(), output.as_deref(), out),
    }
}

fn input_images(input: Option<&Path>, manifest: Option<&Path>) -> CliResult<Vec<PathBuf>> {
    match (input, manifest) {
        (Some(dir), None) => Ok(find_pngs(dir)?),
        (None, Some(m)) => Ok(read_manifest(m)?),
        _ => Err(CliError::config("give exactly one of --input and --manifest")),
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `[1, 3, H, W]` image cropped at the bottom/right to a multiple of `scale`.
fn load_mod_cropped(path: &Path, scale: usize) -> CliResult<Tensor<f32>> {
    let img = load_png(path)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (ch, cw) = (h - h % scale, w - w % scale);
    if ch == 0 || cw == 0 {
        return Err(CliError::config(format!("{} is smaller than the scale", path.display())));
    }
    let d = img.data();
    let data = (0..3 * ch * cw)
        .map(|i| {
            let (c, r, x) = (i / (ch * cw), (i / cw) % ch, i % cw);
            d[(c * h + r) * w + x]
        })
        .collect();
    Ok(Tensor::new(&[1, 3, ch, cw], data)?)
}

fn kernel_width(k: KernelParams) -> Option<f64> {
    match k {
        KernelParams::Isotropic { sigma } => Some(sigma),
        _ => None,
    }
}

fn write_jsonl(path: &Path, entries: &[DegradedEntry]) -> CliResult {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).map_err(Error::from)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_degradation_manifest(path: &Path) -> CliResult<Vec<DegradedEntry>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::config(format!("{}: {e}", path.display()))))
        .collect()
}

fn cmd_prepare(input: &Path, manifest: &Path, out: &mut dyn Write) -> CliResult {
    let report = prepare_data(input)?;
    for (p, why) in &report.rejected {
        log::warn!("skipping {}: {why}", p.display());
    }
    write_manifest(manifest, &report.accepted)?;
    writeln!(
        out,
        "indexed {} images ({} rejected) into {}",
        report.accepted.len(),
        report.rejected.len(),
        manifest.display()
    )?;
    Ok(())
}

fn cmd_degrade(images: &[PathBuf], output: &Path, spec: &DegradationSpec, upsample: bool, out: &mut dyn Write) -> CliResult {
    if upsample && spec.mode != crate::degradation::DegradationMode::Identity {
        return Err(CliError::config("--upsample needs the identity preset"));
    }
    fs::create_dir_all(output)?;
    let mut entries = Vec::with_capacity(images.len());
    for (k, path) in images.iter().enumerate() {
        let name = format!("{}.png", file_stem(path));
        let s = spec.scale;
        let (img, kernel) = if upsample {
            let lr = load_png(path)?;
            let (h, w) = (lr.shape()[1], lr.shape()[2]);
            let up = bicubic_resize_tensor(&lr.reshape(&[1, 3, h, w])?, h * s, w * s, true)?;
            (up, KernelParams::Delta)
        } else {
            let hr = load_mod_cropped(path, s)?;
            let (lr, kernel) = degrade_item(&hr, spec, k as u64)?;
            (lr, kernel.params())
        };
        save_png(&output.join(&name), &img)?;
        entries.push(DegradedEntry {
            name,
            source: file_name(path),
            index: k as u64,
            scale: s,
            kernel,
            kernel_width: kernel_width(kernel),
            noise_sigma: spec.noise_sigma,
        });
    }
    write_jsonl(&output.join(DEGRADATION_MANIFEST), &entries)?;
    writeln!(out, "wrote {} images to {}", entries.len(), output.display())?;
    Ok(())
}

fn cmd_kernel_grid(scale: usize, input: Option<&Path>, output: Option<&Path>, out: &mut dyn Write) -> CliResult {
    let grid = test_kernel_grid(scale)?;
    let widths: Vec<f64> = grid.iter().filter_map(|k| kernel_width(k.params())).collect();
    let (Some(input), Some(output)) = (input, output) else {
        writeln!(out, "{}", serde_json::to_string(&widths).map_err(Error::from)?)?;
        return Ok(());
    };
    fs::create_dir_all(output)?;
    let mut entries = Vec::new();
    for (k, path) in find_pngs(input)?.iter().enumerate() {
        let hr = load_mod_cropped(path, scale)?;
        for (g, kernel) in grid.iter().enumerate() {
            let name = format!("{}_k{g}.png", file_stem(path));
            save_png(&output.join(&name), &blur_downsample(&hr, kernel, scale)?)?;
            entries.push(DegradedEntry {
                name,
                source: file_name(path),
                index: k as u64,
                scale,
                kernel: kernel.params(),
                kernel_width: Some(widths[g]),
                noise_sigma: 0.0,
            });
        }
    }
    write_jsonl(&output.join(DEGRADATION_MANIFEST), &entries)?;
    writeln!(out, "wrote {} images to {}", entries.len(), output.display())?;
    Ok(())
}

fn summarize(records: &[StepRecord], out: &mut dyn Write) -> CliResult {
    if let Some(last) = records.last() {
        let loss = records.iter().rev().find_map(|r| r.loss).map(|l| l.total);
        write!(out, "finished at iteration {}", last.iteration)?;
        if let Some(l) = loss {
            write!(out, ", last loss {l:.6}")?;
        }
        if let Some(v) = last.validation {
            write!(out, ", validation PSNR {:.3} dB, L1 {:.6}", v.psnr, v.l1)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, out: &mut dyn Write) -> CliResult {
    cfg.validate()?;
    let manifest = cfg
        .paths
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::config("paths.manifest is required for training"))?;
    let records = load_records(&read_manifest(manifest)?)?;
    let validation = match &cfg.paths.validation_manifest {
        Some(m) => {
            let held = load_records(&read_manifest(m)?)?;
            ValidationSet::sample(&held, &cfg.crop, &cfg.degradation, cfg.train.validation_size, cfg.train.seed)?
        }
        None => ValidationSet::sample(&records, &cfg.crop, &cfg.degradation, cfg.train.validation_size, cfg.train.seed)?,
    };
    let generator = Generator::new(cfg.model)?;
    let load = |p: &Path| -> CliResult<_> {
        let (model, ckpt) = load_generator(p)?;
        if model != cfg.model {
            return Err(CliError::config(format!(
                "{} was trained with a different model configuration",
                p.display()
            )));
        }
        Ok(ckpt)
    };
    let ctx = TrainContext {
        generator: &generator,
        config: &cfg.train,
        data: TrainData {
            records: &records,
            policy: cfg.crop,
            spec: cfg.degradation,
        },
        validation: (!validation.is_empty()).then_some(&validation),
        extractor: None,
        output: Some(&cfg.paths.output),
    };
    let records = match cfg.train.stage {
        Stage::Psnr => {
            let mut state = match resume {
                Some(p) => PsnrState::from_checkpoint(load(p)?)?,
                None => PsnrState::new(generator.init(cfg.train.seed)),
            };
            train_psnr_stage(&ctx, &mut state)?
        }
        Stage::Gan => {
            let start = resume.or(cfg.paths.init_checkpoint.as_deref()).ok_or_else(|| {
                CliError::config("the GAN stage needs --resume or paths.init_checkpoint (a PSNR checkpoint)")
            })?;
            let disc = Discriminator::new(cfg.train.discriminator)?;
            let mut state = GanState::from_checkpoint(load(start)?, &disc, cfg.train.seed)?;
            train_gan_stage(&ctx, &disc, &mut state)?
        }
    };
    summarize(&records, out)?;
    writeln!(out, "checkpoint: {}", cfg.paths.output.join(CHECKPOINT_FILE).display())?;
    Ok(())
}

fn cmd_infer(checkpoint: &Path, input: &Path, output: &Path, out: &mut dyn Write) -> CliResult {
    let (model, ckpt) = load_generator(checkpoint)?;
    let generator = Generator::new(model)?;
    fs::create_dir_all(output)?;
    let images = find_pngs(input)?;
    for path in &images {
        let lr = load_png(path)?;
        let (h, w) = (lr.shape()[1], lr.shape()[2]);
        let sr = super_resolve(&generator, &ckpt.params, &lr.reshape(&[1, 3, h, w])?)?;
        if !sr.all_finite() {
            return Err(Error::NonFinite(format!("output for {}", path.display())).into());
        }
        save_png(&output.join(file_name(path)), &sr)?;
    }
    writeln!(
        out,
        "super-resolved {} images at x{} into {}",
        images.len(),
        generator.config().scale,
        output.display()
    )?;
    Ok(())
}

fn cmd_eval(
    sr_dir: &Path,
    hr_dir: &Path,
    scale: usize,
    manifest: Option<&Path>,
    report_path: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult {
    if scale == 0 {
        return Err(CliError::config("scale must be >= 1"));
    }
    // (sr name, hr name, kernel width)
    let pairs: Vec<(String, String, Option<f64>)> = match manifest {
        Some(m) => read_degradation_manifest(m)?
            .into_iter()
            .map(|e| (e.name, e.source, e.kernel_width))
            .collect(),
        None => find_pngs(sr_dir)?
            .iter()
            .map(|p| (file_name(p), file_name(p), None))
            .collect(),
    };
    if pairs.is_empty() {
        return Err(CliError::config(format!("no images to evaluate in {}", sr_dir.display())));
    }
    let mut metrics = Vec::with_capacity(pairs.len());
    for (sr_name, hr_name, width) in pairs {
        let sr = load_png(&sr_dir.join(&sr_name))?;
        let (h, w) = (sr.shape()[1], sr.shape()[2]);
        let hr = load_mod_cropped(&hr_dir.join(&hr_name), scale)?;
        if hr.shape()[2..] != [h, w] {
            return Err(CliError::config(format!(
                "{sr_name} is {h}x{w} but {hr_name} is {}x{} after cropping to a multiple of {scale}",
                hr.shape()[2],
                hr.shape()[3]
            )));
        }
        let (psnr, ssim) = evaluate_rgb(&sr, &hr.reshape(&[3, h, w])?, scale)?;
        metrics.push(ImageMetric {
            name: sr_name,
            psnr,
            ssim,
            kernel_width: width,
        });
    }
    let report = MetricReport::new(scale, metrics);
    write!(out, "{}", report.table())?;
    if let Some(p) = report_path {
        fs::write(p, serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    }
    Ok(())
}
