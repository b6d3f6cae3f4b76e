use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};
use trigrid::commands::{self, Context, ImageInput, Pipeline, Source, TrainOptions};
use trigrid::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "trigrid", version, about = "Tri-grid generator pre-training, dual-encoder inversion and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Directory with the generator, encoder checkpoints and dataset; defaults to --out.
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    /// Suppress progress lines.
    #[arg(long, short, global = true)]
    quiet: bool,
    /// Train the second encoder without a discriminator.
    #[arg(long, global = true)]
    no_disc: bool,
    /// Discriminate renders instead of tri-grids.
    #[arg(long, global = true)]
    image_domain_disc: bool,
    /// Use all-ones masks in place of occlusion masks.
    #[arg(long, global = true)]
    no_occlusion: bool,
}

#[derive(Args, Debug, Clone)]
struct Training {
    /// Continue from the checkpoints in --out.
    #[arg(long)]
    resume: bool,
    /// Checkpoint interval in steps.
    #[arg(long, default_value_t = 50)]
    save_every: u64,
}

#[derive(Args, Debug, Clone)]
struct ImageArgs {
    /// Input PNG at the model resolution.
    #[arg(long)]
    image: PathBuf,
    /// Camera yaw of the input in degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    yaw: f64,
    /// Camera pitch of the input in degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pitch: f64,
    #[arg(long, value_enum, default_value_t = Pipeline::Dual)]
    pipeline: Pipeline,
}

#[derive(Args, Debug, Clone)]
struct SourceArgs {
    /// Invert this PNG instead of drawing a generator sample.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pitch: f64,
    #[arg(long, value_enum, default_value_t = Pipeline::Dual)]
    pipeline: Pipeline,
    /// Index of the generator sample when no image is given.
    #[arg(long, default_value_t = 0)]
    sample: u64,
}

impl SourceArgs {
    fn source(&self) -> Source {
        match &self.image {
            Some(path) => Source::Image(ImageInput { path: path.clone(), yaw_deg: self.yaw, pitch_deg: self.pitch, pipeline: self.pipeline }),
            None => Source::Sample(self.sample),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the toy generator and write generator.ckpt.
    PretrainGen,
    /// Render the training and test sets from the generator.
    GenData,
    /// Train the reconstruction encoder.
    TrainE1(Training),
    /// Train the adversarial encoder, starting from e1.ckpt.
    TrainE2(Training),
    /// Invert one image: same-view render, 360° views and a mesh.
    Invert(ImageArgs),
    /// Render 360° views of a sample or an inverted image.
    Render360(SourceArgs),
    /// Evaluate the encoders on the test set and write eval.json.
    Eval {
        /// Use the ground-truth latents in place of the encoders.
        #[arg(long)]
        oracle: bool,
    },
    /// Extract the density iso-surface of a sample or an inverted image.
    ExportMesh(SourceArgs),
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            RunConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.e2.no_disc |= common.no_disc;
    cfg.e2.image_domain_disc |= common.image_domain_disc;
    cfg.e2.no_occlusion |= common.no_occlusion;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let mut ctx = Context::new(cfg, cli.common.out.clone(), cli.common.ckpt.clone())?;
    ctx.verbose = !cli.common.quiet;
    let opts = |t: &Training| TrainOptions { resume: t.resume, save_every: t.save_every };
    match &cli.command {
        Command::PretrainGen => commands::pretrain_gen(&ctx).map(drop),
        Command::GenData => commands::gen_data(&ctx).map(drop),
        Command::TrainE1(t) => commands::train_e1(&ctx, opts(t)).map(drop),
        Command::TrainE2(t) => commands::train_e2(&ctx, opts(t)).map(drop),
        Command::Invert(a) => {
            let input = ImageInput { path: a.image.clone(), yaw_deg: a.yaw, pitch_deg: a.pitch, pipeline: a.pipeline };
            commands::invert(&ctx, &input).map(drop)
        }
        Command::Render360(s) => commands::render360(&ctx, &s.source()).map(drop),
        Command::ExportMesh(s) => commands::export_mesh_cmd(&ctx, &s.source()).map(drop),
        Command::Eval { oracle } => {
            let report = commands::eval(&ctx, *oracle)?;
            print!("{}", report.table());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
