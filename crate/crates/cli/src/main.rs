//! `regattn` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use regattn::box_prep::{prepare, PrepConfig};
use regattn::degrade::{degrade, psnr, upsample_nearest, DegradeConfig};
use regattn::imageio::{read_pnm, write_pnm};
use regattn::pipeline::{build_all, simulate, BuildConfig, LoopConfig, RegionalMode};
use regattn::region_raster::{CoverageRule, GridSpec};
use regattn::scene_io::{
    annotate, save_scene, CaptionerClient, DetectorClient, HttpClient, HttpConfig, ImageRef, MockClient, Scene,
    TokenPolicy,
};
use regattn::verify::{verify, Suite, VerifyOptions};

#[derive(Parser)]
#[command(name = "regattn", version, about = "Regional attention masks, gated attention loop and oracle checks")]
struct Cli {
    #[command(flatten)]
    clients: ClientArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ClientArgs {
    /// Directory of recorded detector/captioner outputs.
    #[arg(long, global = true, env = "REGATTN_MOCK_DIR")]
    mock_dir: Option<PathBuf>,
    /// Base URL of a JSON-over-HTTP detector/captioner service.
    #[arg(long, global = true, env = "REGATTN_HTTP_ENDPOINT")]
    http_endpoint: Option<String>,
    /// HTTP timeout in seconds.
    #[arg(long, global = true, default_value_t = 30.0)]
    http_timeout: f64,
    /// Name of the environment variable holding a bearer token.
    #[arg(long, global = true)]
    http_token_env: Option<String>,
}

#[derive(Args)]
struct PrepArgs {
    /// Drop candidates scoring below this.
    #[arg(long, default_value_t = regattn::box_prep::DEFAULT_CONFIDENCE_THRESHOLD)]
    threshold: f64,
    /// Number of region slots.
    #[arg(long, default_value_t = regattn::box_prep::DEFAULT_MAX_REGIONS)]
    max_regions: usize,
}

impl PrepArgs {
    fn config(&self) -> Result<PrepConfig> {
        let cfg = PrepConfig { confidence_threshold: self.threshold, max_regions: self.max_regions };
        if !cfg.is_valid() {
            bail!("threshold must be in [0, 1] and max-regions >= 1");
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a scene and write RMASK/RATTN dumps, PGM renderings and a report.
    BuildMasks {
        scene: PathBuf,
        /// Comma-separated grid sizes (N or HxW).
        #[arg(long, value_delimiter = ',', default_value = "64,32,16,8")]
        levels: Vec<GridSpec>,
        #[arg(long, default_value = "center")]
        rule: CoverageRule,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        prep: PrepArgs,
    },
    /// Run the gated denoising loop on a scene.
    Simulate {
        scene: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Number of leading steps with regional attention.
        #[arg(long, default_value_t = 50)]
        inject: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Latent grid (N or HxW).
        #[arg(long, default_value = "16")]
        latent: GridSpec,
        #[arg(long, default_value_t = 8)]
        model_dim: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value = "center")]
        rule: CoverageRule,
        /// Prepend global-caption tokens to the regional sequence.
        #[arg(long)]
        global_tokens: bool,
        /// Remove the regional stage entirely.
        #[arg(long)]
        no_regional: bool,
        #[command(flatten)]
        prep: PrepArgs,
    },
    /// Run oracle suites and print a JSON report.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 1000)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Synthesize an LR image from a PGM/PPM.
    Degrade {
        image: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.2)]
        blur_sigma: f64,
        #[arg(long, default_value_t = 0.02)]
        noise_sigma: f64,
        /// Keep full precision instead of rounding to 8 bits.
        #[arg(long)]
        no_quantize: bool,
        /// Output path; defaults to `<input stem>_lr.<ext>` next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PSNR in dB between two images of equal size.
    Psnr { a: PathBuf, b: PathBuf },
    /// Detect and caption an image through the configured client, then write
    /// a prepared scene file.
    Annotate {
        source_id: String,
        #[arg(long)]
        width: u32,
        #[arg(long)]
        height: u32,
        /// Image path forwarded to the client.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Fixed tokens per regional caption; default counts words (max 8).
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        prep: PrepArgs,
    },
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn clients(args: &ClientArgs) -> Result<(Box<dyn DetectorClient>, Box<dyn CaptionerClient>)> {
    match (&args.http_endpoint, &args.mock_dir) {
        (Some(endpoint), _) => {
            let cfg = HttpConfig {
                endpoint: endpoint.clone(),
                timeout: Duration::from_secs_f64(args.http_timeout),
                bearer_token_env: args.http_token_env.clone(),
            };
            Ok((Box::new(HttpClient::new(cfg.clone())), Box::new(HttpClient::new(cfg))))
        }
        (None, Some(dir)) => Ok((Box::new(MockClient::new(dir)), Box::new(MockClient::new(dir)))),
        (None, None) => bail!("annotate needs --mock-dir or --http-endpoint"),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::BuildMasks { scene, levels, rule, out, prep } => {
            let cfg = BuildConfig { levels, rule, prep: prep.config()? };
            let report = build_all(&scene, &cfg, &out)?;
            for (stage, t) in &report.timings {
                log::info!("{stage}: {:.3} ms", t.as_secs_f64() * 1e3);
            }
            print_json(&report)?;
        }
        Command::Simulate {
            scene,
            steps,
            inject,
            seed,
            out,
            latent,
            model_dim,
            heads,
            rule,
            global_tokens,
            no_regional,
            prep,
        } => {
            let cfg = LoopConfig {
                total_steps: steps,
                injection_steps: inject,
                latent,
                model_dim,
                heads,
                seed,
                regional: if no_regional { RegionalMode::Disabled } else { RegionalMode::Gated },
                global_tokens_in_regional: global_tokens,
                rule,
                prep: prep.config()?,
            };
            let (report, _) = simulate(&scene, &cfg, &out)?;
            print_json(&report)?;
        }
        Command::Verify { suite, scenes, seed } => {
            let report = verify(suite, &VerifyOptions { scenes, seed, ..Default::default() });
            print_json(&report)?;
            return Ok(report.passed);
        }
        Command::Degrade { image, scale, seed, blur_sigma, noise_sigma, no_quantize, out } => {
            let hr = read_pnm(&image)?;
            let cfg = DegradeConfig { scale, blur_sigma, noise_sigma, quantize: !no_quantize, seed };
            let lr = degrade(&hr, &cfg)?;
            let out = out.unwrap_or_else(|| {
                let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let ext = if hr.channels == 1 { "pgm" } else { "ppm" };
                image.with_file_name(format!("{stem}_lr.{ext}"))
            });
            write_pnm(&out, &lr)?;
            let up = upsample_nearest(&lr, scale);
            let cropped = regattn::degrade::ImageBuffer::from_fn(up.width, up.height, hr.channels, |x, y, c| hr.at(x, y, c));
            print_json(&serde_json::json!({
                "input": { "width": hr.width, "height": hr.height, "channels": hr.channels },
                "output": { "path": out, "width": lr.width, "height": lr.height },
                "psnr_nearest_db": psnr(&cropped, &up)?,
            }))?;
        }
        Command::Psnr { a, b } => {
            let (a, b) = (read_pnm(&a)?, read_pnm(&b)?);
            println!("{:.6}", psnr(&a, &b)?);
        }
        Command::Annotate { source_id, width, height, image, tokens, out, prep } => {
            let (det, cap) = clients(&cli.clients)?;
            let img = ImageRef { source_id: source_id.clone(), width, height, path: image };
            let policy = tokens.map_or(TokenPolicy::Words { max: 8 }, TokenPolicy::Fixed);
            let (global_caption, candidates) = annotate(&img, det.as_ref(), cap.as_ref(), policy)?;
            let prepared = prepare(&candidates, &prep.config()?);
            let scene = Scene { source_id, image_width: width, image_height: height, global_caption, regions: prepared.slots };
            save_scene(&scene, &out).with_context(|| format!("writing {}", out.display()))?;
            print_json(&serde_json::json!({ "candidates": candidates.len(), "active_count": prepared.active_count }))?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
