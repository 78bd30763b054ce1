use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nlcodec::codec::CodecModel;
use nlcodec::coder::bpp;
use nlcodec::image_io::{list_images, load_image, save_image};
use nlcodec::metrics::{format_psnr, ms_ssim, mse, psnr, MS_SSIM_MIN_SIDE};
use nlcodec::params::write_atomic;
use nlcodec::selftest::{self, SelftestOptions};
use nlcodec::training::{self, extract_codes, metrics_csv, parse_config, train_post, CodeDataset, TrainConfig};
use nlcodec::{Error, Tensor};

#[derive(Parser)]
#[command(name = "nlcodec", version, about = "Learned lossy image codec with a non-local context model")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train transforms, quantizer and the MoG entropy model.
    Train(TrainArgs),
    /// Dump quantized code crops of a directory of images.
    ExtractCodes(ExtractArgs),
    /// Train the post entropy model used for coding.
    TrainPost(PostArgs),
    /// Compress one image.
    Encode(EncodeArgs),
    /// Decompress one stream.
    Decode(DecodeArgs),
    /// Rate and distortion over a directory of images.
    Eval(EvalArgs),
    /// Run the built-in invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-step CSV (step, L_D, L_R, lr).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from an existing model file.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    crop: usize,
}

#[derive(Args)]
struct PostArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// PNG, or PPM when the name ends in `.ppm`.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, hide = true)]
    sabotage_mask: bool,
}

enum Failure {
    Invariant(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Format(_) | Error::ModelMismatch(_) | Error::CorruptStream(_) => 3,
        Error::Numeric(_) => 1,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Error> {
    match path {
        Some(p) => parse_config(&std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
        None => Ok(TrainConfig::default()),
    }
}

fn load_dir(dir: &Path) -> Result<(Vec<PathBuf>, Vec<Tensor>), Error> {
    let paths = list_images(dir).map_err(|e| Error::Usage(format!("{}: {e}", dir.display())))?;
    if paths.is_empty() {
        return Err(Error::Usage(format!("{}: no .png or .ppm images", dir.display())));
    }
    let images = paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>, _>>()?;
    Ok((paths, images))
}

fn cmd_train(a: &TrainArgs, seed: u64) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let (_, images) = load_dir(&a.images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = match &a.init {
        Some(p) => CodecModel::load(p)?,
        None => CodecModel::new(cfg.transform_config(), cfg.entropy_config(), &mut rng)?,
    };
    let (model, log) = training::train(model, &images, &cfg, &mut rng, |r| {
        if r.step % 100 == 0 {
            info!("step {} L_D {:.6} L_R {:.4} lr {:e}", r.step, r.distortion, r.rate, r.lr);
        }
    })?;
    model.save(&a.out)?;
    if let Some(m) = &a.metrics {
        write_atomic(m, metrics_csv(&log).as_bytes())?;
    }
    println!("trained {} steps -> {}", log.len(), a.out.display());
    Ok(())
}

fn cmd_extract(a: &ExtractArgs, seed: u64) -> CmdResult {
    let model = CodecModel::load(&a.model)?;
    let (_, images) = load_dir(&a.images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = extract_codes(&model, &images, a.crop, &mut rng)?;
    ds.save(&a.out)?;
    println!("{} code blocks -> {}", ds.blocks.len(), a.out.display());
    Ok(())
}

fn cmd_train_post(a: &PostArgs, seed: u64) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let mut model = CodecModel::load(&a.model)?;
    let ds = CodeDataset::load(&a.codes)?;
    if ds.m != model.quantizer.channels() || ds.levels != model.quantizer.levels() {
        return Err(Error::ModelMismatch(format!(
            "codes have M={} L={}, model has M={} L={}",
            ds.m,
            ds.levels,
            model.quantizer.channels(),
            model.quantizer.levels()
        ))
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if model.post.is_none() {
        model.init_post(None, &mut rng)?;
    }
    let (train, held) = ds.split(cfg.heldout);
    let post = model.post.as_mut().expect("initialized above");
    let report = train_post(post, &train, &held, cfg.post_steps, cfg.post_lr, cfg.post_batch, &mut rng)?;
    model.save(&a.out)?;
    println!("held-out bits/code {:.4} -> {}", report.heldout_bits, a.out.display());
    Ok(())
}

fn cmd_encode(a: &EncodeArgs) -> CmdResult {
    let start = Instant::now();
    let model = CodecModel::load(&a.model)?;
    let img = load_image(&a.input)?;
    let bytes = model.encode_image(&img)?;
    write_atomic(&a.output, &bytes)?;
    let s = img.shape();
    println!(
        "{} bytes, {:.4} bpp, {:.3} s",
        bytes.len(),
        bpp(bytes.len(), s[2], s[3]),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_decode(a: &DecodeArgs) -> CmdResult {
    let start = Instant::now();
    let model = CodecModel::load(&a.model)?;
    let bytes = std::fs::read(&a.input).map_err(|e| Error::Usage(format!("{}: {e}", a.input.display())))?;
    let (h, _, x) = model.decode_bytes(&bytes)?;
    save_image(&x, &a.output)?;
    println!("{}x{} image, {:.3} s", h.width, h.height, start.elapsed().as_secs_f64());
    Ok(())
}

/// Metrics of one image after an encode/decode round trip through 8-bit output.
fn eval_one(model: &CodecModel, img: &Tensor) -> Result<[f64; 4], Error> {
    let bytes = model.encode_image(img)?;
    let (_, _, x) = model.decode_bytes(&bytes)?;
    let x = x.map(|v| (v * 255.0).round() / 255.0);
    let s = img.shape();
    let ssim = if s[2] >= MS_SSIM_MIN_SIDE && s[3] >= MS_SSIM_MIN_SIDE {
        ms_ssim(img, &x)?
    } else {
        f64::NAN
    };
    Ok([bytes.len() as f64, bpp(bytes.len(), s[2], s[3]), psnr(mse(img, &x)?), ssim])
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let model = CodecModel::load(&a.model)?;
    let (paths, images) = load_dir(&a.dir)?;
    let mut csv = String::from("image,bytes,bpp,psnr_db,ms_ssim\n");
    let mut sums = [0.0; 4];
    for (p, img) in paths.iter().zip(&images) {
        let r = eval_one(&model, img)?;
        for (s, v) in sums.iter_mut().zip(r) {
            *s += v;
        }
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(csv, "{name},{},{},{},{}", r[0], r[1], format_psnr(r[2]), r[3]);
    }
    let n = images.len() as f64;
    let mean = sums.map(|s| s / n);
    let _ = writeln!(csv, "mean,{},{},{},{}", mean[0], mean[1], format_psnr(mean[2]), mean[3]);
    write_atomic(&a.out, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs, seed: u64) -> CmdResult {
    let results = selftest::run(&SelftestOptions {
        seed,
        sabotage_mask: a.sabotage_mask,
    });
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(format!("selftest failed: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: cannot start worker threads: {e}");
        return ExitCode::from(2);
    }
    let res = match &cli.cmd {
        Cmd::Train(a) => cmd_train(a, cli.seed),
        Cmd::ExtractCodes(a) => cmd_extract(a, cli.seed),
        Cmd::TrainPost(a) => cmd_train_post(a, cli.seed),
        Cmd::Encode(a) => cmd_encode(a),
        Cmd::Decode(a) => cmd_decode(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Selftest(a) => cmd_selftest(a, cli.seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
