//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::f64::consts::{LN_2, PI};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use trigrid_core::autodiff::Tape;
use trigrid_core::camera::{generate_rays, pose_from_orbit, project, CameraPose};
use trigrid_core::checkpoint::*;
use trigrid_core::config::*;
use trigrid_core::data::{generate_toy_dataset, ToySample};
use trigrid_core::discriminator::{BnMode, Discriminator};
use trigrid_core::encoder::Encoder;
use trigrid_core::generator::{front_record, Generator};
use trigrid_core::gradcheck::{check_scalar_fn, rel_err, spread_coords};
use trigrid_core::inference::*;
use trigrid_core::losses::*;
use trigrid_core::metrics::*;
use trigrid_core::occlusion::*;
use trigrid_core::params::{normal_tensor, ParamStore};
use trigrid_core::renderer::{render, render_field, render_var, RenderSettings};
use trigrid_core::scenes::SolidScene;
use trigrid_core::training::*;
use trigrid_core::trigrid::TriGrid;
use trigrid_core::{Tensor, TriDims};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let criteria: [(&str, Check); 11] = [
        ("occlusion oracle", occlusion_oracle),
        ("renderer conservation", renderer_conservation),
        ("gradient checks", gradient_checks),
        ("loss identities", loss_identities),
        ("R1 schedule", r1_schedule),
        ("stitching exactness", stitching_exactness),
        ("overfit run", overfit_run),
        ("ablation trend", ablation_trend),
        ("dual trend", dual_trend),
        ("Frechet unit checks", frechet_checks),
        ("determinism and persistence", determinism),
    ];
    // comma-separated criterion numbers restrict the run
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!o.pass);
        println!(
            "criterion {:>2} {:<28} {}  {} ({:.1} s)",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- 1

fn occlusion_oracle() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig::bench();
    let intr = cfg.intrinsics();
    let (v, res) = (32, 64);
    let eps = voxel_diagonals(v, cfg.visibility_eps);
    // rays that miss every solid see to infinity
    let miss = 1e3;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut agree, mut total) = (0usize, 0usize);
    let mut worst: f64 = 1.0;
    for _ in 0..100 {
        let pose = pose_from_orbit(rng.random_range(-PI..PI), rng.random_range(-0.5..0.5), cfg.radius).unwrap();
        let scene = SolidScene::random(&mut rng);
        let depth: Vec<f64> = generate_rays(&pose, &intr, res)
            .unwrap()
            .iter()
            .map(|r| scene.ray_hit(&r.origin, &r.direction).unwrap_or(miss))
            .collect();
        let vol = visibility_volume(&depth, res, &pose, &intr, v, eps).unwrap();
        let oracle = oracle_raycast(|p| scene.occupied(p), &pose, &intr, res, v, 0.005);
        let (mut a, mut t) = (0usize, 0usize);
        for ix in 0..v {
            for iy in 0..v {
                for iz in 0..v {
                    let p = VisibilityVolume::voxel_centre(v, ix, iy, iz);
                    let in_view = project(&p, &pose, &intr, res).is_ok_and(|(u, w, _)| (0.0..res as f64).contains(&u) && (0.0..res as f64).contains(&w));
                    if !in_view || scene.sdf(&p).abs() < eps {
                        continue;
                    }
                    t += 1;
                    a += usize::from(vol.get(ix, iy, iz) == oracle.get(ix, iy, iz));
                }
            }
        }
        worst = worst.min(a as f64 / t.max(1) as f64);
        agree += a;
        total += t;
    }
    let rate = agree as f64 / total as f64;
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        rate >= 0.99 && secs < 120.0,
        format!("agreement {:.3}% over {total} in-view voxels (worst pair {:.2}%), {secs:.1} s", 100.0 * rate, 100.0 * worst),
    )
}

// ---------------------------------------------------------------- 2

fn renderer_conservation() -> Outcome {
    let cfg = ModelConfig::bench();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gen = Generator::new(&cfg, &mut rng).unwrap();
    // black emitters on a white background: each pixel reads the final transmittance
    let mut dec = gen.decoder();
    let hidden = dec.w1.shape()[1];
    for k in 1..4 {
        dec.w1.data_mut()[k * hidden..(k + 1) * hidden].fill(0.0);
        dec.b1.data_mut()[k] = -40.0;
    }
    dec.b1.data_mut()[0] += 1.0;
    let settings = RenderSettings { resolution: 32, background: [1.0; 3], ..RenderSettings::from_config(&cfg) };
    let mut worst: f64 = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..3 {
        let grid = gen.synthesize(&gen.sample_w_plus(&mut rng).unwrap()).unwrap();
        let grid = TriGrid::from_vec(grid.dims(), grid.data().iter().map(|v| 3.0 * v).collect()).unwrap();
        let pose = pose_from_orbit(2.0 * k as f64, 0.2, cfg.radius).unwrap();
        let out = render(&grid, &dec, &pose, &cfg.intrinsics(), &settings).unwrap();
        let n = 32 * 32;
        for r in 0..n {
            for c in 0..3 {
                worst = worst.max((out.image.data()[c * n + r] + out.opacity[r] - 1.0).abs());
            }
            lo = lo.min(out.opacity[r]);
            hi = hi.max(out.opacity[r]);
        }
    }
    let conserve = worst < 1e-5 && lo < 0.5 && hi > 0.5;

    // slab faces on sample boundaries of the centre ray, 64 samples
    let s = RenderSettings { resolution: 9, n_samples: 64, near: 1.2, far: 4.2, background: [1.0; 3] };
    let delta = s.spacing();
    let (front, back) = (2.7 - (s.near + 26.0 * delta), 2.7 - (s.near + 38.0 * delta));
    let h = front - back;
    let mut slab_err: f64 = 0.0;
    for sigma in [0.5, 2.0, 8.0] {
        let out = render_field(
            |p| if p.z <= front && p.z >= back { (sigma, [0.0; 3]) } else { (0.0, [0.0; 3]) },
            &pose_from_orbit(0.0, 0.0, 2.7).unwrap(),
            &ModelConfig::default().intrinsics(),
            &s,
        )
        .unwrap();
        let expect = 1.0 - (-sigma * h).exp();
        slab_err = slab_err.max((out.opacity[4 * 9 + 4] - expect).abs() / expect);
    }
    outcome(
        conserve && slab_err < 0.02,
        format!("max |sum w + T - 1| = {worst:.1e} (opacity {lo:.2}..{hi:.2}), slab relative error {:.3}%", 100.0 * slab_err),
    )
}

// ---------------------------------------------------------------- 3

/// Worst relative error of parameter gradients against central differences
/// of `eval`, at `per_tensor` spread coordinates of every tensor.
fn param_check(store: &ParamStore, grads: &[Tensor], per_tensor: usize, h: f64, eval: impl Fn(&ParamStore) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, t) in store.tensors().iter().enumerate() {
        for c in spread_coords(t.len(), per_tensor) {
            let mut plus = store.clone();
            plus.tensors_mut()[i].data_mut()[c] += h;
            let mut minus = store.clone();
            minus.tensors_mut()[i].data_mut()[c] -= h;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(grads[i].data()[c], num));
        }
    }
    worst
}

fn encoder_loss(enc: &Encoder, gen: &Generator, nets: &LossNets, image: &Tensor, pose: &CameraPose, residual: bool, grads: bool) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let b = enc.params().bind(&mut tape, grads);
    let gb = gen.params().bind(&mut tape, false);
    let x = tape.constant(image.clone().reshape(&[1, 3, 8, 8]).unwrap());
    let fv = enc.forward_var(&mut tape, &b, gen, &gb, x, &[*pose], residual).unwrap();
    let (loss, _) = loss_e1_var(&mut tape, nets, fv.images, x, &LossWeights::default()).unwrap();
    let value = tape.scalar(loss);
    if !grads {
        return (value, Vec::new());
    }
    let g = tape.backward(loss);
    (value, b.grads(&g))
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gen = Generator::new(&cfg, &mut rng).unwrap();
    let dims = gen.dims();
    let pose = pose_from_orbit(0.6, -0.15, cfg.radius).unwrap();
    let intr = cfg.intrinsics();
    let settings = RenderSettings::from_config(&cfg);
    let nets = LossNets::default();
    let w = LossWeights::default();
    let image = normal_tensor(&[1, 3, 8, 8], 0.2, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
    let mut results: Vec<(&str, f64)> = Vec::new();

    // renderer, with respect to tri-grid values
    let grid = normal_tensor(&[1, dims.len() / 64, 8, 8], 0.7, &mut rng);
    let probe = normal_tensor(&[1, 3, 8, 8], 1.0, &mut rng);
    let c = check_scalar_fn(
        |tape, g| {
            let d = gen.decoder_ids().vars(&gen.params().bind(tape, false));
            let out = render_var(tape, g, dims, &d, &pose, &intr, &settings).unwrap();
            let p = tape.constant(probe.clone());
            let m = tape.mul(out.image, p);
            tape.sum(m)
        },
        &grid,
        &spread_coords(grid.len(), 24),
        1e-6,
    );
    results.push(("renderer/grid", c.max_rel_err));

    // generator: mapping, synthesis and all generator parameters through a render
    let z = normal_tensor(&[1, cfg.z_dim], 1.0, &mut rng);
    let cond = Tensor::from_vec(&[1, 25], front_record(&cfg).to_vec()).unwrap();
    let c = check_scalar_fn(
        |tape, zv| {
            let b = gen.params().bind(tape, false);
            let cv = tape.constant(cond.clone());
            let wv = gen.map_var(tape, &b, zv, cv);
            let sq = tape.square(wv);
            tape.sum(sq)
        },
        &z,
        &spread_coords(z.len(), 8),
        1e-6,
    );
    results.push(("generator/mapping", c.max_rel_err));
    let wplus = gen.sample_w_plus(&mut rng).unwrap().reshape(&[1, cfg.latent_layers, cfg.w_dim]).unwrap();
    let render_of = |g: &Generator, tape: &mut Tape, wv, b: &trigrid_core::params::Bound| {
        let t = g.synthesize_var(tape, b, wv);
        let d = g.decoder_ids().vars(b);
        let out = render_var(tape, t, dims, &d, &pose, &intr, &settings).unwrap();
        let p = tape.constant(probe.clone());
        let m = tape.mul(out.image, p);
        tape.sum(m)
    };
    let c = check_scalar_fn(
        |tape, wv| {
            let b = gen.params().bind(tape, false);
            render_of(&gen, tape, wv, &b)
        },
        &wplus,
        &spread_coords(wplus.len(), 12),
        1e-6,
    );
    results.push(("generator/latent", c.max_rel_err));
    let grads = {
        let mut tape = Tape::new();
        let b = gen.params().bind(&mut tape, true);
        let wv = tape.constant(wplus.clone());
        let out = render_of(&gen, &mut tape, wv, &b);
        let g = tape.backward(out);
        b.grads(&g)
    };
    let worst = param_check(gen.params(), &grads, 3, 1e-6, |p| {
        let mut g2 = gen.clone();
        *g2.params_mut() = p.clone();
        let mut tape = Tape::new();
        let b = g2.params().bind(&mut tape, false);
        let wv = tape.constant(wplus.clone());
        let out = render_of(&g2, &mut tape, wv, &b);
        tape.scalar(out)
    });
    results.push(("generator/parameters", worst));

    // encoders: reconstruction objective with respect to the input and to every parameter
    let mut enc = Encoder::new(&cfg, &gen.w_avg, &mut rng).unwrap();
    let id = enc.params().find("res.out.w").unwrap();
    *enc.params_mut().get_mut(id) = normal_tensor(enc.params().get(id).shape(), 0.2, &mut rng);
    let c = check_scalar_fn(
        |tape, x| {
            let b = enc.params().bind(tape, false);
            let gb = gen.params().bind(tape, false);
            let fv = enc.forward_var(tape, &b, &gen, &gb, x, &[pose], false).unwrap();
            let p = tape.constant(probe.clone());
            let m = tape.mul(fv.images, p);
            tape.sum(m)
        },
        &image,
        &spread_coords(image.len(), 12),
        1e-6,
    );
    results.push(("encoder/input", c.max_rel_err));
    let img3 = image.clone().reshape(&[3, 8, 8]).unwrap();
    // the first-pass render feeding the residual branch is a constant input, so
    // latent-branch parameters are checked without the residual stage
    for (label, residual, prefix) in [("encoder/latent branch", false, "enc."), ("encoder/residual branch", true, "res.")] {
        let (_, grads) = encoder_loss(&enc, &gen, &nets, &img3, &pose, residual, true);
        let mut sub = ParamStore::new();
        let mut sub_grads = Vec::new();
        for ((name, t), g) in enc.params().iter().zip(&grads) {
            // the frozen latent average enters as a constant
            if name.starts_with(prefix) && !Encoder::is_frozen(name) {
                sub.add(name, t.clone());
                sub_grads.push(g.clone());
            }
        }
        let worst = param_check(&sub, &sub_grads, 2, 1e-6, |p| {
            let mut e2 = enc.clone();
            e2.params_mut().assign_from(p);
            encoder_loss(&e2, &gen, &nets, &img3, &pose, residual, false).0
        });
        results.push((label, worst));
    }

    // critic: scores with respect to input and parameters, and the R1 parameter gradient
    let critic = Discriminator::new(3 * cfg.slices * cfg.channels, [2, 3, 3, 3], &mut rng);
    let x = normal_tensor(&[2, 3 * cfg.slices * cfg.channels, 8, 8], 1.0, &mut rng);
    let c = check_scalar_fn(
        |tape, xv| {
            let b = critic.params().bind(tape, false);
            let (s, _) = critic.score_var(tape, &b, xv, BnMode::Train).unwrap();
            let sq = tape.square(s);
            tape.sum(sq)
        },
        &x,
        &spread_coords(x.len(), 12),
        1e-6,
    );
    results.push(("critic/input", c.max_rel_err));
    let critic_score = |d: &Discriminator, tape: &mut Tape, b: &trigrid_core::params::Bound| {
        let xv = tape.constant(x.clone());
        let (s, _) = d.score_var(tape, b, xv, BnMode::Train).unwrap();
        let f = tape.constant(Tensor::from_vec(&[2, 1], vec![0.3, -0.2]).unwrap());
        adv_disc_loss_var(tape, s, f)
    };
    let grads = {
        let mut tape = Tape::new();
        let b = critic.params().bind(&mut tape, true);
        let out = critic_score(&critic, &mut tape, &b);
        let g = tape.backward(out);
        b.grads(&g)
    };
    let worst = param_check(critic.params(), &grads, 3, 1e-6, |p| {
        let mut d = critic.clone();
        *d.params_mut() = p.clone();
        let mut tape = Tape::new();
        let b = d.params().bind(&mut tape, false);
        let out = critic_score(&d, &mut tape, &b);
        tape.scalar(out)
    });
    results.push(("critic/parameters", worst));
    let (_, r1_grads) = critic.r1_with_grads(&x, 10.0).unwrap();
    let worst = param_check(critic.params(), &r1_grads, 3, 1e-6, |p| {
        let mut d = critic.clone();
        *d.params_mut() = p.clone();
        r1_penalty(&d, &x, 10.0).unwrap()
    });
    results.push(("critic/R1", worst));

    // losses with respect to renders and scores
    let target = normal_tensor(&[2, 3, 8, 8], 0.2, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
    let renders = normal_tensor(&[2, 3, 8, 8], 0.2, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
    let scores = Tensor::from_vec(&[2, 1], vec![0.4, -1.3]).unwrap();
    for (label, which) in [("loss/e1", 0), ("loss/e2 render", 1), ("loss/perceptual", 2), ("loss/identity", 3)] {
        let c = check_scalar_fn(
            |tape, r| {
                let t = tape.constant(target.clone());
                match which {
                    0 => loss_e1_var(tape, &nets, r, t, &w).unwrap().0,
                    1 => {
                        let s = tape.constant(scores.clone());
                        loss_e2_var(tape, &nets, r, t, s, &w).unwrap().0
                    }
                    2 => {
                        let d = nets.perceptual.distance_var(tape, r, t).unwrap();
                        tape.mean(d)
                    }
                    _ => {
                        let d = nets.embedder.identity_loss_var(tape, r, t).unwrap();
                        tape.mean(d)
                    }
                }
            },
            &renders,
            &spread_coords(renders.len(), 16),
            1e-6,
        );
        results.push((label, c.max_rel_err));
    }
    let c = check_scalar_fn(
        |tape, s| {
            let r = tape.constant(renders.clone());
            let t = tape.constant(target.clone());
            loss_e2_var(tape, &nets, r, t, s, &w).unwrap().0
        },
        &scores,
        &[0, 1],
        1e-6,
    );
    results.push(("loss/e2 scores", c.max_rel_err));
    let c = check_scalar_fn(
        |tape, s| {
            let f = tape.constant(Tensor::from_vec(&[2, 1], vec![0.2, -0.7]).unwrap());
            adv_disc_loss_var(tape, s, f)
        },
        &scores,
        &[0, 1],
        1e-6,
    );
    results.push(("loss/critic", c.max_rel_err));
    let c = check_scalar_fn(|tape, s| adv_gen_loss_var(tape, s), &scores, &[0, 1], 1e-6);
    results.push(("loss/adversarial", c.max_rel_err));

    let (name, worst) = results.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 1e-3 && secs < 300.0 && results.iter().all(|(_, e)| e.is_finite()),
        format!("{} checks, worst relative error {worst:.1e} ({name}), {secs:.1} s", results.len()),
    )
}

// ---------------------------------------------------------------- 4

fn loss_identities() -> Outcome {
    let nets = LossNets::default();
    let w = LossWeights::default();
    let img = normal_tensor(&[2, 3, 16, 16], 0.2, &mut ChaCha8Rng::seed_from_u64(4)).map(|v| (v + 0.5).clamp(0.0, 1.0));
    let gen0 = adv_gen_loss(0.0);
    let disc0 = adv_disc_loss(0.0, 0.0);
    let same = loss_e1(&nets, &img, &img, &w).unwrap().total;
    let weights = (w.perceptual, w.l2, w.identity, w.adversarial, w.discriminator, w.r1_weight, w.r1_interval);
    let pass = (gen0 - LN_2).abs() < 1e-15 && (disc0 - 2.0 * LN_2).abs() < 1e-15 && same == 0.0 && weights == (0.8, 1.0, 0.5, 0.001, 0.5, 10.0, 16);
    outcome(pass, format!("adv_gen(0) = {gen0:.15}, adv_disc(0,0) = {disc0:.15}, loss_e1(x,x) = {same}, weights {weights:?}"))
}

// ---------------------------------------------------------------- 5

fn r1_schedule() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), &common::tiny_config());
    let out = dir.path().join("run");
    common::train_all(&cfg, &out);
    let log = common::read_log(&out.join("e2.jsonl"));
    let applied: Vec<u64> = log.iter().filter(|v| v["r1_applied"].as_bool() == Some(true)).map(|v| v["step"].as_u64().unwrap()).collect();
    let consistent = log.iter().all(|v| v["r1_applied"].as_bool() == Some(v["r1_penalty"].is_number()));
    let steps: Vec<u64> = log.iter().map(|v| v["step"].as_u64().unwrap()).collect();
    let expected: Vec<u64> = steps.iter().copied().filter(|s| s % 16 == 0).collect();
    outcome(
        applied == expected && consistent && steps.len() == 34,
        format!("{} logged steps, penalty on {applied:?}", steps.len()),
    )
}

// ---------------------------------------------------------------- shared benchmark

struct Pretrained {
    gen: Generator,
    took: Duration,
}

fn pretrained() -> &'static Pretrained {
    static CELL: OnceLock<Pretrained> = OnceLock::new();
    CELL.get_or_init(|| {
        let t0 = Instant::now();
        let cfg = ModelConfig::bench();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen = Generator::new(&cfg, &mut rng).unwrap();
        let pc = PretrainConfig::default();
        let mut trainer = GeneratorTrainer::new(gen, pc, &mut rng).unwrap();
        for _ in 0..pc.steps {
            trainer.train_step().unwrap();
        }
        eprintln!("  generator pre-trained in {:.0} s", t0.elapsed().as_secs_f64());
        Pretrained { gen: trainer.generator, took: t0.elapsed() }
    })
}

struct SeedRun {
    fid_no_disc: f64,
    fid_occlusion: f64,
    fid_dual: f64,
    same_view_no_disc: MetricsReport,
    same_view_dual: MetricsReport,
}

struct Bench {
    test: Vec<(Tensor, CameraPose)>,
    e1: Encoder,
    e2_first: Encoder,
    runs: Vec<SeedRun>,
}

const BENCH_SEEDS: u64 = 5;
const BENCH_VIEWS: usize = 12;

fn bench() -> &'static Bench {
    static CELL: OnceLock<Bench> = OnceLock::new();
    CELL.get_or_init(|| {
        let t0 = Instant::now();
        let gen = &pretrained().gen;
        let cfg = gen.config().clone();
        let nets = LossNets::default();
        let w = LossWeights::default();
        let train_set = generate_toy_dataset(gen, 32, 1).unwrap();
        let test: Vec<(Tensor, CameraPose)> =
            generate_toy_dataset(gen, 24, 2).unwrap().iter().map(|s| (s.image.clone(), s.pose().unwrap())).collect();
        let reference = reference_embeddings(gen, &nets, 24, BENCH_VIEWS, 3).unwrap();
        let fid = |inv: &dyn Inverter| frechet_distance(&inversion_embeddings(inv, gen, &nets, &test, BENCH_VIEWS).unwrap(), &reference).unwrap();

        let train = TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() };
        let enc = Encoder::new(&cfg, &gen.w_avg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut e1 = EncoderTrainer::new(enc, &train);
        for s in 0..300 {
            e1.train_step(gen, &nets, &Batch::for_step(&train_set, &train, s).unwrap(), &w).unwrap();
        }
        let e1 = e1.encoder;
        eprintln!("  first encoder trained at {:.0} s", t0.elapsed().as_secs_f64());

        let mut runs = Vec::new();
        let mut e2_first = None;
        for seed in 0..BENCH_SEEDS {
            let mut encoders = Vec::new();
            for no_disc in [true, false] {
                let tr = TrainConfig { seed, no_disc, ..train };
                let mut st = AdversarialTrainer::new(&e1, &tr, BENCH_CRITIC_CHANNELS, &mut ChaCha8Rng::seed_from_u64(100 + seed));
                for s in 0..200 {
                    st.train_step(gen, &nets, &Batch::for_step(&train_set, &tr, s).unwrap(), &w, &tr).unwrap();
                }
                encoders.push(st.encoder);
            }
            let [no_disc, occlusion] = <[Encoder; 2]>::try_from(encoders).ok().unwrap();
            let plain = SingleEncoder { generator: gen, encoder: &no_disc };
            let aware = SingleEncoder { generator: gen, encoder: &occlusion };
            let dual = DualEncoder { generator: gen, e1: &no_disc, e2: &occlusion };
            let run = SeedRun {
                fid_no_disc: fid(&plain),
                fid_occlusion: fid(&aware),
                fid_dual: fid(&dual),
                same_view_no_disc: eval_same_view(&plain, gen, &nets, &test).unwrap(),
                same_view_dual: eval_same_view(&dual, gen, &nets, &test).unwrap(),
            };
            eprintln!(
                "  seed {seed}: FID no-disc {:.4} occlusion-aware {:.4} dual {:.4} at {:.0} s",
                run.fid_no_disc,
                run.fid_occlusion,
                run.fid_dual,
                t0.elapsed().as_secs_f64()
            );
            runs.push(run);
            if e2_first.is_none() {
                e2_first = Some(occlusion);
            }
        }
        Bench { test, e1, e2_first: e2_first.unwrap(), runs }
    })
}

// ---------------------------------------------------------------- 6

fn same_bits(a: &TriGrid, b: &TriGrid) -> bool {
    a.dims() == b.dims() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn stitching_exactness() -> Outcome {
    let b = bench();
    let gen = &pretrained().gen;
    let dual = DualEncoder { generator: gen, e1: &b.e1, e2: &b.e2_first };
    let (mut cells, mut mismatches, mut occluded) = (0usize, 0usize, 0usize);
    let mut endpoints = true;
    for (image, pose) in b.test.iter().take(6) {
        let res = dual.invert(image, pose).unwrap();
        endpoints &= same_bits(&res.t1, &SingleEncoder { generator: gen, encoder: &b.e1 }.invert_grid(image, pose).unwrap());
        endpoints &= same_bits(&res.t2, &SingleEncoder { generator: gen, encoder: &b.e2_first }.invert_grid(image, pose).unwrap());
        let dims: TriDims = res.t1.dims();
        for p in 0..3 {
            for s in 0..dims.slices {
                for r in 0..dims.height {
                    for c in 0..dims.width {
                        let occ = res.mask_occluded.get(p, s, r, c);
                        let src = if occ { &res.t2 } else { &res.t1 };
                        cells += 1;
                        occluded += usize::from(occ);
                        for ch in 0..dims.channels {
                            mismatches += usize::from(res.stitched.get(p, s, ch, r, c).to_bits() != src.get(p, s, ch, r, c).to_bits());
                        }
                    }
                }
            }
        }
        let none = TriGridMask::for_dims(dims, false);
        let all = TriGridMask::for_dims(dims, true);
        endpoints &= same_bits(&stitch(&res.t1, &res.t2, &none).unwrap(), &res.t1);
        endpoints &= same_bits(&stitch(&res.t1, &res.t2, &all).unwrap(), &res.t2);
    }
    let frac = occluded as f64 / cells as f64;
    outcome(
        mismatches == 0 && endpoints && frac > 0.0 && frac < 1.0,
        format!("{cells} cells over 6 inversions, {mismatches} mismatches, occluded fraction {frac:.3}, endpoint identities {}", if endpoints { "hold" } else { "broken" }),
    )
}

// ---------------------------------------------------------------- 7

fn overfit_run() -> Outcome {
    let pre = pretrained();
    let t0 = Instant::now();
    let gen = &pre.gen;
    let nets = LossNets::default();
    let w = LossWeights::default();
    let set: Vec<ToySample> = generate_toy_dataset(gen, 8, 7).unwrap();
    let train = TrainConfig { learning_rate: 1e-3, mirror_prob: 0.0, ..TrainConfig::default() };
    let total_loss = |e: &Encoder| -> f64 {
        let inv = SingleEncoder { generator: gen, encoder: e };
        let sum: f64 = set
            .iter()
            .map(|s| {
                let pose = s.pose().unwrap();
                let grid = inv.invert_grid(&s.image, &pose).unwrap();
                loss_e1(&nets, &render_grid(gen, &grid, &pose).unwrap().image, &s.image, &w).unwrap().total
            })
            .sum();
        sum / set.len() as f64
    };
    let enc = Encoder::new(gen.config(), &gen.w_avg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let initial = total_loss(&enc);
    let mut trainer = EncoderTrainer::new(enc, &train);
    let mut last = initial;
    while trainer.step < 2000 && last > initial / 10.0 {
        let batch = Batch::for_step(&set, &train, trainer.step).unwrap();
        trainer.train_step(gen, &nets, &batch, &w).unwrap();
        if trainer.step % 50 == 0 {
            last = total_loss(&trainer.encoder);
        }
    }
    let wall = t0.elapsed() + pre.took;
    let ratio = initial / last;
    outcome(
        ratio >= 10.0 && wall.as_secs_f64() < 900.0,
        format!(
            "loss {initial:.4} -> {last:.4} ({ratio:.1}x) in {} steps, {:.0} s including generator pre-training",
            trainer.step,
            wall.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn ablation_trend() -> Outcome {
    let b = bench();
    let wins = b.runs.iter().filter(|r| r.fid_no_disc > r.fid_occlusion).count();
    let pairs: Vec<String> = b.runs.iter().map(|r| format!("{:.3}>{:.3}", r.fid_no_disc, r.fid_occlusion)).collect();
    outcome(wins >= 4, format!("no-disc FID above occlusion-aware FID in {wins} of {} seeds [{}]", b.runs.len(), pairs.join(" ")))
}

// ---------------------------------------------------------------- 9

fn dual_trend() -> Outcome {
    let b = bench();
    let rel = |a: f64, b: f64| (a - b).abs() / b;
    let mut worst_l2: f64 = 0.0;
    let mut worst_perc: f64 = 0.0;
    let mut worst_fid: f64 = 0.0;
    for r in &b.runs {
        worst_l2 = worst_l2.max(rel(r.same_view_dual.l2, r.same_view_no_disc.l2));
        worst_perc = worst_perc.max(rel(r.same_view_dual.perceptual, r.same_view_no_disc.perceptual));
        worst_fid = worst_fid.max(rel(r.fid_dual, r.fid_occlusion));
    }
    outcome(
        worst_l2 <= 0.05 && worst_perc <= 0.05 && worst_fid <= 0.10,
        format!(
            "worst seed: same-view L2 {:.2}%, perceptual {:.2}% from the reconstruction encoder; 360-FID {:.2}% from the adversarial encoder",
            100.0 * worst_l2,
            100.0 * worst_perc,
            100.0 * worst_fid
        ),
    )
}

// ---------------------------------------------------------------- 10

fn frechet_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = normal_tensor(&[500, 16], 1.0, &mut rng);
    let self_distance = frechet_distance(&x, &x).unwrap();
    let n = 10_000;
    let a: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            1.0 + z
        })
        .collect();
    let d2 = frechet_distance(&Tensor::from_vec(&[n, 1], a).unwrap(), &Tensor::from_vec(&[n, 1], b).unwrap()).unwrap();
    // the mean difference has standard error √(2/N); d² ≈ Δμ² carries twice that; allow 4σ
    let tol = 4.0 * 2.0 * (2.0 / n as f64).sqrt();
    outcome(
        self_distance.abs() < 1e-6 && (d2 - 1.0).abs() < tol,
        format!("d(X,X) = {self_distance:.1e}, shifted 1-d d² = {d2:.4} (tolerance {tol:.3})"),
    )
}

// ---------------------------------------------------------------- 11

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let root = dir.path().join(run);
        let path = common::write_config(&root, &cfg);
        let out = root.join("out");
        common::train_all(&path, &out);
        let img = out.join("data/test/images/00001.png");
        common::run_ok(&path, &out, &["invert", "--image", img.to_str().unwrap(), "--yaw", "30"]);
        common::run_ok(&path, &out, &["render360", "--sample", "3"]);
        common::run_ok(&path, &out, &["export-mesh", "--sample", "3"]);
        common::run_ok(&path, &out, &["eval"]);
        trees.push(common::tree_hashes(&out));
    }
    let identical = trees[0] == trees[1];
    let files = trees[0].len();

    // every checkpoint survives load and save byte for byte, through the
    // container and through the typed loaders
    let out = dir.path().join("a/out");
    let model = &cfg.model;
    let mut round_trips = 0;
    let mut broken = Vec::new();
    for name in ["generator.ckpt", "e1.ckpt", "e2.ckpt", "critic.ckpt", "e1.state.ckpt", "e2.state.ckpt", "critic.state.ckpt"] {
        let bytes = fs::read(out.join(name)).unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let again = match ck.kind.as_str() {
            "generator" => generator_checkpoint(&load_generator(model, &ck).unwrap()).unwrap().to_bytes().unwrap(),
            "encoder" => encoder_checkpoint(&load_encoder(model, &ck).unwrap()).to_bytes().unwrap(),
            "critic" => critic_checkpoint(&load_critic(model, &ck).unwrap(), model).to_bytes().unwrap(),
            _ => ck.to_bytes().unwrap(),
        };
        let copy = dir.path().join("copy.ckpt");
        trigrid::commands::resave_checkpoint(&out.join(name), &copy).unwrap();
        if again == bytes && fs::read(&copy).unwrap() == bytes {
            round_trips += 1;
        } else {
            broken.push(name);
        }
    }
    outcome(
        identical && broken.is_empty() && files > 20,
        format!("{files} output files hash-identical across two runs: {identical}; {round_trips} of 7 checkpoints round-trip exactly {broken:?}"),
    )
}
