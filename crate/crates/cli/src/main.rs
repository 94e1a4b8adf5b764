use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use meshtex_core::backend::probe::run_probe;
use meshtex_core::backend::server::BackendServer;
use meshtex_core::backend::{connect, BackendSpec, ToyBackend, BACKEND_ENV, LATENT_CHANNELS};
use meshtex_core::config::PipelineConfig;
use meshtex_core::export::{export_textured_mesh, write_maps_debug, write_png, write_sh_planes};
use meshtex_core::mesh::load_mesh;
use meshtex_core::pipeline::{prepare_views, texture_mesh_with_observer};
use meshtex_core::schedule::{parse_mask_spec, run_consistent_2d, DiffusionSchedule, DEFAULT_GUIDANCE, DEFAULT_STEPS};

#[derive(Parser)]
#[command(name = "meshtex", version, about = "Text-driven mesh texturing with latent diffusion")]
struct Cli {
    /// Worker threads for the compute pool (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct BackendArgs {
    /// `toy` or `remote:<host:port>`.
    #[arg(long, env = BACKEND_ENV, default_value = "toy")]
    backend: String,
    /// Seconds to wait for each remote response.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
}

impl BackendArgs {
    fn spec(&self) -> Result<BackendSpec> {
        Ok(self.backend.parse()?)
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Texture a UV-mapped OBJ mesh from a text prompt.
    Texture {
        #[arg(long)]
        mesh: PathBuf,
        /// Overrides the prompt in the config file.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `diffusion.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Bake the diffusion latents directly, without inversion.
        #[arg(long)]
        skip_inversion: bool,
        /// Also write per-view depth, mask, weight and decoded PNGs.
        #[arg(long)]
        debug: bool,
    },
    /// Jointly denoise several images with a masked shared region.
    Consistent2d {
        /// One prompt per line.
        #[arg(long)]
        prompts: PathBuf,
        /// `full`, `empty`, `center` or `center:<lo>:<hi>` in latent pixels.
        #[arg(long, default_value = "center")]
        mask: String,
        #[arg(long, default_value_t = 0.9)]
        alpha: f64,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
        guidance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Latent side in pixels; images are eight times larger.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that a backend server speaks the wire protocol.
    BackendCheck {
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Serve the toy backend over the wire protocol.
    ToyServer {
        #[arg(long, default_value = "127.0.0.1:7860")]
        listen: String,
        /// Seed of the prompt-hash targets. Match `diffusion.seed` to
        /// reproduce an in-process toy run.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    match cli.command {
        Command::Texture {
            mesh,
            prompt,
            config,
            backend,
            out,
            seed,
            skip_inversion,
            debug,
        } => {
            let mut cfg = match &config {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::default(),
            };
            if let Some(p) = prompt {
                cfg.prompt = p;
            }
            if let Some(s) = seed {
                cfg.diffusion.seed = s;
            }
            cfg.inversion.skip |= skip_inversion;
            cfg.validate()?;
            texture(&mesh, &cfg, &backend, &out, debug)?;
        }
        Command::Consistent2d {
            prompts,
            mask,
            alpha,
            steps,
            guidance,
            seed,
            size,
            backend,
            out,
        } => {
            let text = fs::read_to_string(&prompts).with_context(|| format!("reading {}", prompts.display()))?;
            let prompts: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            if prompts.is_empty() {
                bail!("no prompts in file");
            }
            let mask = parse_mask_spec(&mask, size, size)?;
            let schedule = DiffusionSchedule::new(steps, guidance)?;
            let b = connect(&backend.spec()?, seed, backend.timeout())?;
            let result = run_consistent_2d(
                &prompts,
                &mask,
                alpha,
                &schedule,
                b.as_ref(),
                seed,
                [size, size, LATENT_CHANNELS],
            )?;
            fs::create_dir_all(&out)?;
            for (i, img) in result.images.iter().enumerate() {
                write_png(img, &out.join(format!("image_{i:02}.png")))?;
            }
            println!("wrote {} images to {}", result.images.len(), out.display());
        }
        Command::BackendCheck { backend } => {
            let report = match backend.spec()? {
                BackendSpec::Toy => {
                    let server = BackendServer::bind("127.0.0.1:0", Arc::new(ToyBackend::new(0)))?;
                    let (addr, _handle) = server.spawn()?;
                    run_probe(&addr.to_string(), backend.timeout())?
                }
                BackendSpec::Remote(addr) => run_probe(&addr, backend.timeout())?,
            };
            print!("{report}");
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ToyServer { listen, seed } => {
            let server = BackendServer::bind(&listen, Arc::new(ToyBackend::new(seed)))?;
            eprintln!("toy backend listening on {}", server.local_addr()?);
            server.serve()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn texture(mesh_path: &Path, cfg: &PipelineConfig, backend: &BackendArgs, out: &Path, debug: bool) -> Result<()> {
    let mesh = load_mesh(mesh_path)?;
    let b = connect(&backend.spec()?, cfg.diffusion.seed, backend.timeout())?;
    let steps = cfg.diffusion.steps;
    let result = texture_mesh_with_observer(&mesh, cfg, b.as_ref(), |s| {
        eprintln!("step {:>3}/{steps}  t={:<4} residual {:.4}", s.step + 1, s.timestep, s.residual);
    })?;
    let files = export_textured_mesh(&mesh, &result.texture, out)?;
    let report = serde_json::to_string_pretty(&result.report)?;
    fs::write(out.join("report.json"), report)?;
    if debug {
        let dir = out.join("debug");
        let prep = prepare_views(&mesh, cfg)?;
        let decoded = b.decode(&result.latents)?;
        for (i, (maps, img)) in prep.rgb_maps.iter().zip(&decoded).enumerate() {
            write_maps_debug(maps, &dir, &format!("view_{i:02}"))?;
            write_png(img, &dir.join(format!("view_{i:02}_decoded.png")))?;
        }
        write_sh_planes(&result.latent_texture, &dir.join("latent_texture.bin"))?;
    }
    println!("wrote {}", files.texture.display());
    println!(
        "coverage {:.1}%, {} uncovered texels filled with {}",
        100.0 * result.report.rgb_coverage_fraction,
        result.report.uncovered_rgb_texels,
        cfg.fill_value
    );
    Ok(())
}
