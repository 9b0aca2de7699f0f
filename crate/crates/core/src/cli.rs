//! The `grnc` command-line tool.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::codec::{build_model, load_checkpoint, write_checkpoint, CodecModel, ReconstructionMode};
use crate::config::{parse_pairs, RunConfig};
use crate::dataio::{read_ppm, to_image, to_tensor, write_ppm};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::metrics::rd_points;
use crate::pipeline::{decode_stream, encode_image};
use crate::tensor::Tensor;
use crate::training::train;

pub const EVAL_HEADER: &str = "image,iteration,bpp,psnr_db,ms_ssim";
pub const THREADS_ENV: &str = "GRNC_THREADS";

#[derive(Parser, Debug)]
#[command(name = "grnc", version, about = "Variable-rate recurrent image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on random patches of the PPM images in a directory.
    Train(TrainArgs),
    /// Compress a PPM image into a GRNB stream.
    Encode(EncodeArgs),
    /// Reconstruct a PPM image from a GRNB stream.
    Decode(DecodeArgs),
    /// Write per-iteration rate-distortion rows for every image in a directory.
    Eval(EvalArgs),
    /// Compare every analytic backward pass against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    data_dir: PathBuf,
    out_checkpoint: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// CSV log path; defaults to the checkpoint path plus `.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    checkpoint: PathBuf,
    image_in: PathBuf,
    stream_out: PathBuf,
    /// Defaults to the model's configured iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// `one_shot` or `additive`; defaults to the model's mode.
    #[arg(long)]
    mode: Option<ReconstructionMode>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    checkpoint: PathBuf,
    stream_in: PathBuf,
    image_out: PathBuf,
    /// Decode only the first K iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Fail instead of warning when the stream was made by another model.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    checkpoint: PathBuf,
    image_dir: PathBuf,
    csv_out: PathBuf,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    mode: Option<ReconstructionMode>,
    /// Exit non-zero if any image was skipped.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Random problems per op.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Io<'_> {
    fn say(&mut self, s: impl AsRef<str>) {
        let _ = writeln!(self.out, "{}", s.as_ref());
    }

    fn warn(&mut self, s: impl AsRef<str>) {
        let _ = writeln!(self.err, "warning: {}", s.as_ref());
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code; failures print one `error: ...` line.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let _ = writeln!(err, "error: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    let mut io = Io { out, err };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, &mut io),
        Command::Encode(a) => cmd_encode(a, &mut io),
        Command::Decode(a) => cmd_decode(a, &mut io),
        Command::Eval(a) => cmd_eval(a, &mut io),
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut io),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(io.err, "error: {msg}");
            1
        }
    }
}

fn context(e: Error, path: &Path) -> Error {
    Error::invalid(format!("{}: {e}", path.display()))
}

/// PPM files in `dir`, sorted by name.
fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| context(e.into(), dir))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_train(a: TrainArgs, io: &mut Io<'_>) -> Result<i32> {
    let mut pairs = match &a.config {
        Some(p) => parse_pairs(&fs::read_to_string(p).map_err(|e| context(e.into(), p))?)?,
        None => Vec::new(),
    };
    for s in &a.set {
        pairs.extend(parse_pairs(s)?);
    }
    let cfg = RunConfig::from_pairs(&pairs)?;

    let mut images: Vec<Tensor> = Vec::new();
    for path in ppm_files(&a.data_dir)? {
        match read_ppm(&path) {
            Ok(img) if img.width >= cfg.train.patch_size && img.height >= cfg.train.patch_size => {
                images.push(to_tensor(&img))
            }
            Ok(img) => io.warn(format!(
                "skipping {}: {}×{} is smaller than the patch size",
                path.display(),
                img.width,
                img.height
            )),
            Err(e) => io.warn(format!("skipping {}: {e}", path.display())),
        }
    }
    if images.is_empty() {
        return Err(Error::invalid(format!(
            "no training images in {}",
            a.data_dir.display()
        )));
    }

    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out_checkpoint.clone().into_os_string();
        p.push(".log.csv");
        p.into()
    });
    let mut log = String::new();
    for line in cfg.render().lines() {
        let _ = writeln!(log, "# {line}");
    }
    log.push_str("step,loss,seconds\n");

    let mut model = build_model(&cfg.arch, cfg.train.seed)?;
    let records = train(&mut model, &images, &cfg.train, |r| {
        let _ = writeln!(log, "{},{},{:.3}", r.step, r.loss, r.seconds);
    })?;
    write_checkpoint(&model, &a.out_checkpoint).map_err(|e| context(e, &a.out_checkpoint))?;
    fs::write(&log_path, log).map_err(|e| context(e.into(), &log_path))?;
    let last = records.last().expect("at least one step");
    io.say(format!("final_loss={}", last.loss));
    Ok(0)
}

fn load_model(path: &Path) -> Result<(CodecModel, [u8; 32])> {
    load_checkpoint(path).map_err(|e| context(e, path))
}

fn cmd_encode(a: EncodeArgs, io: &mut Io<'_>) -> Result<i32> {
    let (model, digest) = load_model(&a.checkpoint)?;
    let iterations = a.iterations.unwrap_or(model.config.iterations);
    let mode = a.mode.unwrap_or(model.config.mode);
    let img = read_ppm(&a.image_in).map_err(|e| context(e, &a.image_in))?;
    let (header, bytes) = encode_image(&model, digest, &to_tensor(&img), iterations, mode)?;
    fs::write(&a.stream_out, bytes).map_err(|e| context(e.into(), &a.stream_out))?;
    io.say(format!("bpp={}", header.bits_per_pixel()));
    Ok(0)
}

fn cmd_decode(a: DecodeArgs, io: &mut Io<'_>) -> Result<i32> {
    let (model, digest) = load_model(&a.checkpoint)?;
    let bytes = fs::read(&a.stream_in).map_err(|e| context(e.into(), &a.stream_in))?;
    let decoded = decode_stream(&model, digest, &bytes, a.iterations, a.strict)
        .map_err(|e| context(e, &a.stream_in))?;
    if !decoded.digest_matches {
        io.warn("stream was encoded with a different model checkpoint");
    }
    write_ppm(&a.image_out, &to_image(&decoded.image)?).map_err(|e| context(e, &a.image_out))?;
    Ok(0)
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

fn cmd_eval(a: EvalArgs, io: &mut Io<'_>) -> Result<i32> {
    let (model, _) = load_model(&a.checkpoint)?;
    let t_max = a.max_iterations.unwrap_or(model.config.iterations);
    if t_max == 0 {
        return Err(Error::invalid("max-iterations must be at least 1"));
    }
    let mode = a.mode.unwrap_or(model.config.mode);
    let files = ppm_files(&a.image_dir)?;
    let pool = thread_pool()?;
    let results: Vec<_> = pool.install(|| {
        files
            .par_iter()
            .map(|path| {
                let img = read_ppm(path)?;
                rd_points(&model, &to_tensor(&img), t_max, mode)
            })
            .collect()
    });

    let mut csv = format!("{EVAL_HEADER}\n");
    let mut skipped = 0;
    for (path, result) in files.iter().zip(results) {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match result {
            Ok(points) => {
                for p in points {
                    let _ = writeln!(csv, "{name},{},{},{},{}", p.iteration, p.bpp, p.psnr_db, p.ms_ssim);
                }
            }
            Err(e) => {
                skipped += 1;
                io.warn(format!("skipping {}: {e}", path.display()));
            }
        }
    }
    fs::write(&a.csv_out, csv).map_err(|e| context(e.into(), &a.csv_out))?;
    if skipped > 0 && a.strict {
        return Err(Error::invalid(format!("{skipped} image(s) skipped")));
    }
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs, io: &mut Io<'_>) -> Result<i32> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        seeds: a.seeds,
        tolerance: a.tolerance,
        fault: a.inject_fault,
        ..GradcheckConfig::default()
    };
    let reports = run_gradcheck(&cfg)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        io.say(format!("{} max_rel_err={:.3e} seeds={} {status}", r.op, r.max_relative_error, r.seeds));
        if !r.passed {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        Ok(0)
    } else {
        Err(Error::invalid(format!("gradient check failed: {}", failed.join(","))))
    }
}
