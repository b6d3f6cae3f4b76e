//! One function per CLI verb. Inputs are read from the checkpoint directory,
//! outputs go to the output directory together with a hash manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use trigrid_core::camera::{pose_from_orbit, CameraPose};
use trigrid_core::checkpoint::{
    critic_checkpoint, encoder_checkpoint, generator_checkpoint, load_critic, load_encoder, load_generator, load_optimizer, optimizer_checkpoint,
};
use trigrid_core::config::TrainConfig;
use trigrid_core::data::{generate_toy_dataset, ToySample};
use trigrid_core::encoder::Encoder;
use trigrid_core::generator::Generator;
use trigrid_core::inference::{orbit_poses, render_grid, DualEncoder, Inverter, SingleEncoder};
use trigrid_core::losses::LossNets;
use trigrid_core::mesh::{default_density_threshold, export_mesh};
use trigrid_core::metrics::{
    build_paired_set, eval_multiview, eval_same_view, frechet_distance, inversion_embeddings, reference_embeddings, MetricsReport, OracleInverter,
};
use trigrid_core::optim::Optimizer;
use trigrid_core::renderer::RenderSettings;
use trigrid_core::training::{optimizer_config, AdversarialTrainer, Batch, EncoderTrainer, GeneratorTrainer, PretrainConfig};
use trigrid_core::trigrid::TriGrid;
use trigrid_core::Tensor;

use crate::config::RunConfig;
use crate::io::{obj_bytes, png_bytes, read_checkpoint, read_dataset, read_png, strip, write_dataset, ArtifactWriter, JsonlLog, Manifest};

const SALT_TRAIN_DATA: u64 = 0x7472_6169_6e;
const SALT_TEST_DATA: u64 = 0x7465_7374;
const SALT_E1_INIT: u64 = 0x6531_696e_6974;
const SALT_E2_INIT: u64 = 0x6532_696e_6974;
const SALT_REFERENCE: u64 = 0x7265_6665_7265;
const SALT_BASELINE: u64 = 0x6261_7365;
const SALT_SAMPLE: u64 = 0x7361_6d70;

/// Resolved settings shared by every command.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    /// Canonical TOML of `config`, archived next to the outputs.
    pub config_text: String,
    pub out: PathBuf,
    /// Directory holding checkpoints and the dataset produced by earlier commands.
    pub ckpt: PathBuf,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Context {
    pub fn new(config: RunConfig, out: PathBuf, ckpt: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let config_text = config.to_toml()?;
        let ckpt = ckpt.unwrap_or_else(|| out.clone());
        Ok(Self { config, config_text, out, ckpt, verbose: true })
    }

    fn writer(&self) -> Result<ArtifactWriter> {
        let mut w = ArtifactWriter::new(&self.out)?;
        w.write("config.toml", self.config_text.as_bytes())?;
        Ok(w)
    }

    fn progress(&self, msg: impl FnOnce() -> String) {
        if self.verbose {
            eprintln!("{}", msg());
        }
    }

    fn input(&self, name: &str) -> PathBuf {
        self.ckpt.join(name)
    }

    fn generator(&self) -> Result<Generator> {
        let ck = read_checkpoint(&self.input("generator.ckpt")).context("run `trigrid pretrain-gen` first")?;
        Ok(load_generator(&self.config.model, &ck)?)
    }

    fn encoder(&self, name: &str, hint: &str) -> Result<Encoder> {
        let ck = read_checkpoint(&self.input(name)).with_context(|| format!("run `trigrid {hint}` first"))?;
        Ok(load_encoder(&self.config.model, &ck)?)
    }

    fn dataset(&self, split: &str) -> Result<Vec<ToySample>> {
        read_dataset(&self.input(&format!("data/{split}")), &self.config.model)
    }
}

/// Fraction of front-view pixels with opacity above one half, averaged over
/// fresh samples.
pub fn front_coverage(gen: &Generator, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = pose_from_orbit(0.0, 0.0, gen.config().radius)?;
    let mut total = 0.0;
    for _ in 0..samples {
        let grid = gen.synthesize(&gen.sample_w_plus(&mut rng)?)?;
        let r = render_grid(gen, &grid, &pose)?;
        total += r.opacity.iter().filter(|&&o| o > 0.5).count() as f64 / r.opacity.len() as f64;
    }
    Ok(total / samples as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: u64,
    pub front_coverage: f64,
}

pub fn pretrain_gen(ctx: &Context) -> Result<Manifest> {
    let cfg = &ctx.config;
    let seed = cfg.stage_seed(cfg.pretrain.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = Generator::new(&cfg.model, &mut rng)?;
    let pc = PretrainConfig { seed, ..cfg.pretrain };
    let mut trainer = GeneratorTrainer::new(gen, pc, &mut rng)?;
    let mut w = ctx.writer()?;
    let mut log = JsonlLog::create(&ctx.out.join("pretrain.jsonl"))?;
    for _ in 0..pc.steps {
        let m = trainer.train_step()?;
        log.write(&m)?;
        if (m.step + 1) % 50 == 0 {
            ctx.progress(|| format!("pretrain step {} loss {:.5} opacity {:.3}", m.step + 1, m.gen_loss, m.fake_opacity));
        }
    }
    drop(log);
    w.record("pretrain.jsonl")?;
    let gen = trainer.generator;
    w.write("generator.ckpt", &generator_checkpoint(&gen)?.to_bytes()?)?;
    let summary = PretrainSummary { steps: pc.steps, front_coverage: front_coverage(&gen, 8, seed ^ SALT_SAMPLE)? };
    ctx.progress(|| format!("front-view coverage {:.3}", summary.front_coverage));
    w.write("pretrain.summary.json", (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    w.finish("pretrain-gen", &ctx.config_text)
}

pub fn gen_data(ctx: &Context) -> Result<Manifest> {
    let gen = ctx.generator()?;
    let cfg = &ctx.config;
    let mut w = ctx.writer()?;
    let train = generate_toy_dataset(&gen, cfg.data.train_images, cfg.stage_seed(SALT_TRAIN_DATA))?;
    write_dataset(&mut w, "data/train", &train)?;
    let test = generate_toy_dataset(&gen, cfg.data.test_images, cfg.stage_seed(SALT_TEST_DATA))?;
    write_dataset(&mut w, "data/test", &test)?;
    ctx.progress(|| format!("wrote {} training and {} test images", train.len(), test.len()));
    w.finish("gen-data", &ctx.config_text)
}

fn state_checkpoint(opt: &Optimizer, params: &trigrid_core::params::ParamStore, ctx: &Context) -> Result<Vec<u8>> {
    Ok(optimizer_checkpoint(opt, params, &ctx.config.model).to_bytes()?)
}

fn load_state(opt: &mut Optimizer, params: &trigrid_core::params::ParamStore, ctx: &Context, path: &Path) -> Result<()> {
    load_optimizer(opt, params, &ctx.config.model, &read_checkpoint(path)?)?;
    Ok(())
}

/// Options shared by the training commands.
#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    /// Continue from the checkpoints in the output directory.
    pub resume: bool,
    /// Save checkpoints every this many steps (and at the end).
    pub save_every: u64,
}

pub fn train_e1(ctx: &Context, opts: TrainOptions) -> Result<Manifest> {
    let cfg = &ctx.config;
    let gen = ctx.generator()?;
    let data = ctx.dataset("train")?;
    let train = TrainConfig { seed: cfg.stage_seed(cfg.e1.seed), ..cfg.e1 };
    let nets = LossNets::default();
    let (ck, st) = (ctx.out.join("e1.ckpt"), ctx.out.join("e1.state.ckpt"));
    let mut trainer = if opts.resume && ck.exists() && st.exists() {
        let encoder = load_encoder(&cfg.model, &read_checkpoint(&ck)?)?;
        let mut optimizer = Optimizer::new(optimizer_config(&train), encoder.params());
        load_state(&mut optimizer, encoder.params(), ctx, &st)?;
        EncoderTrainer { step: optimizer.step, encoder, optimizer }
    } else {
        let encoder = Encoder::new(&cfg.model, &gen.w_avg, &mut ChaCha8Rng::seed_from_u64(train.seed ^ SALT_E1_INIT))?;
        EncoderTrainer::new(encoder, &train)
    };
    let mut w = ctx.writer()?;
    let log_path = ctx.out.join("e1.jsonl");
    let mut log = if trainer.step > 0 { JsonlLog::resume(&log_path, trainer.step)? } else { JsonlLog::create(&log_path)? };
    let save = |t: &EncoderTrainer, w: &mut ArtifactWriter| -> Result<()> {
        w.write("e1.ckpt", &encoder_checkpoint(&t.encoder).to_bytes()?)?;
        w.write("e1.state.ckpt", &state_checkpoint(&t.optimizer, t.encoder.params(), ctx)?)?;
        Ok(())
    };
    while trainer.step < train.total_steps {
        let batch = Batch::for_step(&data, &train, trainer.step)?;
        let m = trainer.train_step(&gen, &nets, &batch, &cfg.losses)?;
        log.write(&m)?;
        if trainer.step % opts.save_every.max(1) == 0 {
            save(&trainer, &mut w)?;
        }
        if trainer.step % 25 == 0 {
            ctx.progress(|| format!("e1 step {} loss {:.5}", trainer.step, m.total));
        }
    }
    save(&trainer, &mut w)?;
    drop(log);
    w.record("e1.jsonl")?;
    w.finish("train-e1", &ctx.config_text)
}

pub fn train_e2(ctx: &Context, opts: TrainOptions) -> Result<Manifest> {
    let cfg = &ctx.config;
    let widths = cfg.critic_channels()?;
    let gen = ctx.generator()?;
    let data = ctx.dataset("train")?;
    let e1 = ctx.encoder("e1.ckpt", "train-e1")?;
    let train = TrainConfig { seed: cfg.stage_seed(cfg.e2.seed), ..cfg.e2 };
    let nets = LossNets::default();
    let mut st = AdversarialTrainer::new(&e1, &train, widths.unwrap_or([1; 4]), &mut ChaCha8Rng::seed_from_u64(train.seed ^ SALT_E2_INIT));
    let paths = ["e2.ckpt", "e2.state.ckpt", "critic.ckpt", "critic.state.ckpt"].map(|p| ctx.out.join(p));
    let needed = if widths.is_some() { 4 } else { 2 };
    if opts.resume && paths[..needed].iter().all(|p| p.exists()) {
        st.encoder = load_encoder(&cfg.model, &read_checkpoint(&paths[0])?)?;
        load_state(&mut st.encoder_opt, st.encoder.params(), ctx, &paths[1])?;
        if widths.is_some() {
            st.critic = load_critic(&cfg.model, &read_checkpoint(&paths[2])?)?;
            load_state(&mut st.critic_opt, st.critic.params(), ctx, &paths[3])?;
        }
        st.step = st.encoder_opt.step;
    }
    let mut w = ctx.writer()?;
    let log_path = ctx.out.join("e2.jsonl");
    let mut log = if st.step > 0 { JsonlLog::resume(&log_path, st.step)? } else { JsonlLog::create(&log_path)? };
    let save = |st: &AdversarialTrainer, w: &mut ArtifactWriter| -> Result<()> {
        w.write("e2.ckpt", &encoder_checkpoint(&st.encoder).to_bytes()?)?;
        w.write("e2.state.ckpt", &state_checkpoint(&st.encoder_opt, st.encoder.params(), ctx)?)?;
        if widths.is_some() {
            w.write("critic.ckpt", &critic_checkpoint(&st.critic, &cfg.model).to_bytes()?)?;
            w.write("critic.state.ckpt", &state_checkpoint(&st.critic_opt, st.critic.params(), ctx)?)?;
        }
        Ok(())
    };
    while st.step < train.total_steps {
        let batch = Batch::for_step(&data, &train, st.step)?;
        let m = st.train_step(&gen, &nets, &batch, &cfg.losses, &train)?;
        log.write(&m)?;
        if st.step % opts.save_every.max(1) == 0 {
            save(&st, &mut w)?;
        }
        if st.step % 25 == 0 {
            ctx.progress(|| format!("e2 step {} loss {:.5} critic {:?}", st.step, m.total, m.disc_loss));
        }
    }
    save(&st, &mut w)?;
    drop(log);
    w.record("e2.jsonl")?;
    w.finish("train-e2", &ctx.config_text)
}

/// Which trained encoders invert an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Dual,
    E1,
    E2,
}

/// Input image with its camera.
#[derive(Clone, Debug)]
pub struct ImageInput {
    pub path: PathBuf,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub pipeline: Pipeline,
}

/// Tri-grid to render or mesh: a fresh generator sample or an inverted image.
#[derive(Clone, Debug)]
pub enum Source {
    Sample(u64),
    Image(ImageInput),
}

struct Models {
    gen: Generator,
    e1: Option<Encoder>,
    e2: Option<Encoder>,
}

impl Models {
    fn load(ctx: &Context, pipeline: Pipeline) -> Result<Self> {
        let gen = ctx.generator()?;
        let e1 = if pipeline != Pipeline::E2 { Some(ctx.encoder("e1.ckpt", "train-e1")?) } else { None };
        let e2 = if pipeline != Pipeline::E1 { Some(ctx.encoder("e2.ckpt", "train-e2")?) } else { None };
        Ok(Self { gen, e1, e2 })
    }

    fn inverter(&self) -> Box<dyn Inverter + '_> {
        match (&self.e1, &self.e2) {
            (Some(e1), Some(e2)) => Box::new(DualEncoder { generator: &self.gen, e1, e2 }),
            (Some(e), None) | (None, Some(e)) => Box::new(SingleEncoder { generator: &self.gen, encoder: e }),
            (None, None) => unreachable!("at least one encoder is loaded"),
        }
    }
}

fn read_input(ctx: &Context, input: &ImageInput) -> Result<(Tensor, CameraPose)> {
    let image = read_png(&input.path)?;
    let r = ctx.config.model.image_res;
    ensure!(image.shape() == [3, r, r], "{} is {}×{}, the model expects {r}×{r}", input.path.display(), image.shape()[2], image.shape()[1]);
    let pose = pose_from_orbit(input.yaw_deg.to_radians(), input.pitch_deg.to_radians(), ctx.config.model.radius)?;
    Ok((image, pose))
}

fn resolve(ctx: &Context, source: &Source) -> Result<(Generator, TriGrid, Option<(Tensor, CameraPose)>)> {
    match source {
        Source::Sample(index) => {
            let gen = ctx.generator()?;
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.stage_seed(SALT_SAMPLE));
            rng.set_stream(*index);
            let grid = gen.synthesize(&gen.sample_w_plus(&mut rng)?)?;
            Ok((gen, grid, None))
        }
        Source::Image(input) => {
            let (image, pose) = read_input(ctx, input)?;
            let models = Models::load(ctx, input.pipeline)?;
            let grid = models.inverter().invert_grid(&image, &pose)?;
            Ok((models.gen, grid, Some((image, pose))))
        }
    }
}

fn write_views(ctx: &Context, w: &mut ArtifactWriter, gen: &Generator, grid: &TriGrid) -> Result<()> {
    let mut views = Vec::new();
    for (k, pose) in orbit_poses(gen.config().radius, ctx.config.eval.n_views)?.iter().enumerate() {
        let img = render_grid(gen, grid, pose)?.image;
        w.write(&format!("view_{k:02}.png"), &png_bytes(&img, false)?)?;
        views.push(img);
    }
    w.write("strip360.png", &png_bytes(&strip(&views)?, false)?)?;
    Ok(())
}

fn write_mesh(ctx: &Context, w: &mut ArtifactWriter, gen: &Generator, grid: &TriGrid) -> Result<usize> {
    let threshold = default_density_threshold(&RenderSettings::from_config(gen.config()));
    let mesh = export_mesh(gen, grid, ctx.config.eval.mesh_resolution, threshold)?;
    w.write("mesh.obj", &obj_bytes(&mesh))?;
    Ok(mesh.triangles.len())
}

pub fn invert(ctx: &Context, input: &ImageInput) -> Result<Manifest> {
    let (gen, grid, given) = resolve(ctx, &Source::Image(input.clone()))?;
    let (_, pose) = given.expect("image source");
    let mut w = ctx.writer()?;
    w.write("same_view.png", &png_bytes(&render_grid(&gen, &grid, &pose)?.image, false)?)?;
    write_views(ctx, &mut w, &gen, &grid)?;
    let faces = write_mesh(ctx, &mut w, &gen, &grid)?;
    ctx.progress(|| format!("inverted {} ({faces} mesh faces)", input.path.display()));
    w.finish("invert", &ctx.config_text)
}

pub fn render360(ctx: &Context, source: &Source) -> Result<Manifest> {
    let (gen, grid, _) = resolve(ctx, source)?;
    let mut w = ctx.writer()?;
    write_views(ctx, &mut w, &gen, &grid)?;
    w.finish("render360", &ctx.config_text)
}

pub fn export_mesh_cmd(ctx: &Context, source: &Source) -> Result<Manifest> {
    let (gen, grid, _) = resolve(ctx, source)?;
    let mut w = ctx.writer()?;
    let faces = write_mesh(ctx, &mut w, &gen, &grid)?;
    ctx.progress(|| format!("{faces} faces"));
    w.finish("export-mesh", &ctx.config_text)
}

/// Scores of one inversion pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub same_view: MetricsReport,
    pub fid_360: f64,
    /// Per |yaw| bucket, ascending.
    pub multiview: Vec<(String, MetricsReport)>,
}

/// Contents of `eval.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_images: usize,
    pub n_views: usize,
    pub reference_samples: usize,
    /// Fréchet distance between the reference set and an independent set of
    /// generator samples of the test-set size.
    pub same_distribution_fid: f64,
    pub pipelines: BTreeMap<String, PipelineReport>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<8} {:>10} {:>11} {:>9} {:>9}\n",
            "pipeline", "L2", "perceptual", "identity", "FID-360"
        );
        for (name, p) in &self.pipelines {
            s += &format!("{:<8} {:>10.6} {:>11.6} {:>9.4} {:>9.4}\n", name, p.same_view.l2, p.same_view.perceptual, p.same_view.identity, p.fid_360);
            for (bucket, r) in &p.multiview {
                s += &format!("  {:<6} {:>10.6} {:>11.6} {:>9.4}\n", bucket, r.l2, r.perceptual, r.identity);
            }
        }
        s += &format!("same-distribution FID baseline {:.4}\n", self.same_distribution_fid);
        s
    }
}

pub fn eval(ctx: &Context, oracle: bool) -> Result<EvalReport> {
    let cfg = &ctx.config;
    let gen = ctx.generator()?;
    let test = ctx.dataset("test")?;
    let nets = LossNets::default();
    let n_views = cfg.eval.n_views;
    let records: Vec<(Tensor, CameraPose)> = test.iter().map(|s| Ok((s.image.clone(), s.pose()?))).collect::<Result<_>>()?;
    let with_latents = test.iter().all(|s| !s.w_plus.is_empty());
    let pairs = if with_latents { build_paired_set(&gen, &test, &cfg.eval.multiview_yaws_deg)? } else { Vec::new() };
    let reference = reference_embeddings(&gen, &nets, cfg.eval.reference_samples, n_views, cfg.stage_seed(SALT_REFERENCE))?;
    let baseline = reference_embeddings(&gen, &nets, test.len().max(2), n_views, cfg.stage_seed(SALT_BASELINE))?;
    let same_distribution_fid = frechet_distance(&baseline, &reference)?;

    let score = |inv: &dyn Inverter| -> Result<PipelineReport> {
        Ok(PipelineReport {
            same_view: eval_same_view(inv, &gen, &nets, &records)?,
            fid_360: frechet_distance(&inversion_embeddings(inv, &gen, &nets, &records, n_views)?, &reference)?,
            multiview: if pairs.is_empty() { Vec::new() } else { eval_multiview(inv, &gen, &nets, &pairs)? },
        })
    };
    let mut pipelines = BTreeMap::new();
    if oracle {
        if !with_latents {
            bail!("oracle evaluation needs the latents stored by `trigrid gen-data`");
        }
        pipelines.insert("oracle".to_string(), score(&OracleInverter::from_samples(&gen, &test, &pairs)?)?);
    } else {
        let e1 = ctx.encoder("e1.ckpt", "train-e1")?;
        let e2 = ctx.encoder("e2.ckpt", "train-e2")?;
        pipelines.insert("e1".to_string(), score(&SingleEncoder { generator: &gen, encoder: &e1 })?);
        pipelines.insert("e2".to_string(), score(&SingleEncoder { generator: &gen, encoder: &e2 })?);
        pipelines.insert("dual".to_string(), score(&DualEncoder { generator: &gen, e1: &e1, e2: &e2 })?);
    }
    let report = EvalReport { test_images: test.len(), n_views, reference_samples: cfg.eval.reference_samples, same_distribution_fid, pipelines };
    let mut w = ctx.writer()?;
    w.write("eval.json", (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    w.finish("eval", &ctx.config_text)?;
    Ok(report)
}

/// Loads a checkpoint of any kind and writes it back unchanged.
pub fn resave_checkpoint(src: &Path, dst: &Path) -> Result<()> {
    let ck = read_checkpoint(src)?;
    std::fs::write(dst, ck.to_bytes()?).with_context(|| format!("cannot write {}", dst.display()))
}
