//! Acceptance suite: one PASS/FAIL line per criterion. Pass substrings as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- kl`.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use trajkd::autograd::{gradient_check, Graph, Var};
use trajkd::benchmark::{benchmark_data, median, run_seed, BenchmarkConfig};
use trajkd::encoders::{
    DecodedVars, EncoderVariant, ForecastSet, LatentPacket, LatentVars, ModalitySet, Model,
    ModelConfig,
};
use trajkd::eval::{evaluate, min_ade, min_fde};
use trajkd::losses::{
    gaussian_kl, gaussian_kl_value, kd_loss_plain, kd_loss_reg, nll_loss, total_loss_var, wta_l2,
    KdDivergence, KdToggles, LossReport, LossWeights, Target,
};
use trajkd::par::Parallelism;
use trajkd::scene::{
    apply_mask, ModalityBundle, ObservationMask, PaddingMode, Point, Sample, Scene,
};
use trajkd::synth::{
    caption_bearing, caption_motion, caption_obstacle, generate_scene, CaptionRules,
    GeneratorConfig,
};
use trajkd::tensor::Mat;
use trajkd::train::{
    distill_student, train_teacher, ArchConfig, ExperimentConfig, Role, TrainOptions, TrainedModel,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
}

fn random_scene(seed: u64) -> Scene {
    generate_scene(&GeneratorConfig {
        seed,
        ..Default::default()
    })
    .expect("default generator config is valid")
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let f = rng.random_range(1..=6);
        let t = rng.random_range(1..=12);
        let proposals: Vec<f64> = (0..n * f * t * 2)
            .map(|_| rng.random_range(-10.0..10.0))
            .collect();
        let gt: Vec<Vec<Point>> = (0..n)
            .map(|_| {
                (0..t)
                    .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)])
                    .collect()
            })
            .collect();
        let mut target = Target::new(&gt);
        for v in target.valid.iter_mut() {
            *v = rng.random_bool(0.85);
        }
        let fc = ForecastSet {
            n_agents: n,
            modes: f,
            horizon: t,
            proposals: proposals.clone(),
            mode_logits: Mat::zeros(n, f),
            scales: None,
        };

        // Exhaustive reference over every (agent, mode, step) triple.
        let (mut ade_sum, mut fde_sum, mut counted) = (0.0, 0.0, 0usize);
        for a in 0..n {
            let steps: Vec<usize> = (0..t).filter(|&s| target.valid[a * t + s]).collect();
            if steps.is_empty() {
                continue;
            }
            let last = steps[steps.len() - 1];
            let mut best_ade = f64::MAX;
            let mut best_fde = f64::MAX;
            for m in 0..f {
                let at = |s: usize| {
                    let k = ((a * f + m) * t + s) * 2;
                    ((proposals[k] - gt[a][s][0]).powi(2)
                        + (proposals[k + 1] - gt[a][s][1]).powi(2))
                    .sqrt()
                };
                let mut sum = 0.0;
                for &s in &steps {
                    sum += at(s);
                }
                if sum / steps.len() as f64 <= best_ade {
                    best_ade = sum / steps.len() as f64;
                }
                if at(last) <= best_fde {
                    best_fde = at(last);
                }
            }
            ade_sum += best_ade;
            fde_sum += best_fde;
            counted += 1;
        }
        let (ref_ade, ref_fde) = if counted == 0 {
            (0.0, 0.0)
        } else {
            (ade_sum / counted as f64, fde_sum / counted as f64)
        };
        worst = worst
            .max((min_ade(&fc, &target) - ref_ade).abs())
            .max((min_fde(&fc, &target) - ref_fde).abs());
    }
    check(
        worst <= 1e-9,
        format!("max |diff| {worst:.2e} over 1000 instances (tol 1e-9)"),
    )
}

fn small_model(variant: EncoderVariant, modalities: ModalitySet, seed: u64) -> Model {
    Model::new(
        ModelConfig {
            variant,
            modalities,
            dim: 16,
            heads: 2,
            layers: 1,
            ..Default::default()
        },
        seed,
    )
    .expect("valid model config")
}

fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    let num: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn rotation_invariance() -> Outcome {
    let model = small_model(EncoderVariant::Graph, ModalitySet::XPS, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for s in 0..16 {
        let scene = random_scene(500 + s);
        let base = model
            .predict(&ModalityBundle::from_scene(&scene).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?
            .1;
        for _ in 0..32 {
            let theta = rng.random_range(-PI..PI);
            let rotated =
                ModalityBundle::from_scene(&scene.rotated(theta)).map_err(|e| e.to_string())?;
            let q = model.predict(&rotated).map_err(|e| e.to_string())?.1.q_mean;
            worst = worst.max(rel_diff(&base.q_mean, &q));
        }
    }
    check(
        worst < 1e-4,
        format!("max relative change {worst:.2e} over 16 scenes x 32 rotations (tol 1e-4)"),
    )
}

/// Overwrites every per-frame payload of frames `0..until`.
fn perturb_early_frames(scene: &Scene, until: usize, rng: &mut ChaCha8Rng) -> Scene {
    let mut s = scene.clone();
    for a in &mut s.agents {
        for t in 0..until {
            a.trajectory_obs.positions[t] =
                [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
            a.heading[t] = rng.random_range(-PI..PI);
            a.pose[t]
                .theta
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-PI..PI));
            let k = rng.random_range(0..trajkd::scene::vocab::vocabulary_size());
            a.captions[t] = vec![trajkd::scene::CaptionToken::of(k)];
        }
    }
    s
}

fn mask_independence() -> Outcome {
    let models: Vec<TrainedModel> = [EncoderVariant::Graph, EncoderVariant::Holistic]
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let exp = ExperimentConfig {
                variant: v,
                ..Default::default()
            };
            TrainedModel::new(
                Role::Teacher,
                exp,
                small_model(v, ModalitySet::XPS, 10 + i as u64),
                vec![],
            )
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for s in 0..100 {
        let scene = random_scene(900 + s);
        let frames = scene.obs_frames();
        let model = &models[s as usize % 2];
        for keep in [1usize, 2] {
            let other = perturb_early_frames(&scene, frames - keep, &mut rng);
            let view = |sc: &Scene| -> Result<_, String> {
                let b = ModalityBundle::from_scene(sc).map_err(|e| e.to_string())?;
                let masked =
                    apply_mask(&b, ObservationMask::keep_last(keep)).map_err(|e| e.to_string())?;
                model.model.predict(&masked).map_err(|e| e.to_string())
            };
            let (fa, la) = view(&scene)?;
            let (fb, lb) = view(&other)?;
            if fa != fb || la != lb {
                return Err(format!("scene {s}, keep_last {keep}: outputs differ"));
            }
            checked += 1;
        }
        let other = perturb_early_frames(&scene, frames - 2, &mut rng);
        let ra = evaluate(
            model,
            &[Sample::from_scene(&scene).map_err(|e| e.to_string())?],
            PaddingMode::Zero,
            Parallelism::Auto,
        );
        let rb = evaluate(
            model,
            &[Sample::from_scene(&other).map_err(|e| e.to_string())?],
            PaddingMode::Zero,
            Parallelism::Auto,
        );
        let (ra, rb) = (
            ra.map_err(|e| e.to_string())?,
            rb.map_err(|e| e.to_string())?,
        );
        if ra.ade_2.to_bits() != rb.ade_2.to_bits() || ra.ade_1.to_bits() != rb.ade_1.to_bits() {
            return Err(format!("scene {s}: ADE2/ADE1 differ"));
        }
    }
    check(
        true,
        format!(
            "{checked} masked views and 100 ADE2/ADE1 pairs bit-identical, both encoder variants"
        ),
    )
}

fn kl_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 4;
    let mut worst: f64 = 0.0;
    let mut worst_equal: f64 = 0.0;
    for _ in 0..50 {
        let (ma, la, mb, lb) = (
            rand_mat(&mut rng, 1, d, 1.5),
            rand_mat(&mut rng, 1, d, 1.0),
            rand_mat(&mut rng, 1, d, 1.5),
            rand_mat(&mut rng, 1, d, 1.0),
        );
        let closed = gaussian_kl_value(&ma, &la, &mb, &lb);
        let g = Graph::detached();
        let via_graph = g
            .value(gaussian_kl(
                &g,
                g.constant(ma.clone()),
                g.constant(la.clone()),
                g.constant(mb.clone()),
                g.constant(lb.clone()),
            ))
            .data[0];
        if (via_graph - closed).abs() > 1e-12 {
            return Err(format!(
                "graph and direct KL disagree: {via_graph} vs {closed}"
            ));
        }
        let (sa, sb): (Vec<f64>, Vec<f64>) = (0..d)
            .map(|j| ((la.data[j] / 2.0).exp(), (lb.data[j] / 2.0).exp()))
            .unzip();
        let samples = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..samples {
            let mut log_ratio = 0.0;
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                let x = ma.data[j] + sa[j] * z;
                let zb = (x - mb.data[j]) / sb[j];
                log_ratio += -0.5 * z * z - sa[j].ln() + 0.5 * zb * zb + sb[j].ln();
            }
            sum += log_ratio;
        }
        let mc = sum / samples as f64;
        worst = worst.max((mc - closed).abs() / closed.abs());
        worst_equal = worst_equal.max(gaussian_kl_value(&ma, &la, &ma, &la).abs());
    }
    check(
        worst < 0.02 && worst_equal <= 1e-12,
        format!("max relative MC error {:.3}% over 50 sets of 1e6 samples (tol 2%); max KL at equality {worst_equal:.1e}", 100.0 * worst),
    )
}

fn packet(rng: &mut ChaCha8Rng, n: usize, d: usize) -> LatentPacket {
    LatentPacket {
        q_mean: rand_mat(rng, n, d, 1.0),
        q_logvar: rand_mat(rng, n, d, 0.5),
        h_mean: rand_mat(rng, n, d, 1.0),
        h_logvar: rand_mat(rng, n, d, 0.5),
    }
}

fn gradient_checks() -> Outcome {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name)
    {
        Some(w) => w.1 = w.1.max(err),
        None => worst.push((name, err)),
    };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (n, f, t, d) = (
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(2..5),
            4,
        );
        let gt: Vec<Vec<Point>> = (0..n)
            .map(|_| {
                (0..t)
                    .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                    .collect()
            })
            .collect();
        let target = Target::new(&gt);
        let inputs = vec![
            rand_mat(&mut rng, n, f * t * 2, 2.0),
            rand_mat(&mut rng, n, f, 1.0),
            rand_mat(&mut rng, n, f * t * 2, 1.0),
        ];
        let decoded = |g: &Graph, v: &[Var]| DecodedVars {
            proposals: v[0],
            mode_logits: v[1],
            scales: g.add_scalar(g.softplus(v[2]), 0.1),
        };
        record(
            "wta_l2",
            gradient_check(&inputs, &|g, v| {
                wta_l2(g, &decoded(g, v), &target).unwrap().total
            }),
        );
        record(
            "nll_loss",
            gradient_check(&inputs, &|g, v| {
                nll_loss(g, &decoded(g, v), &target).unwrap().total
            }),
        );

        let tp = packet(&mut rng, n, d);
        let sp = packet(&mut rng, n, d);
        let student = vec![sp.q_mean, sp.q_logvar, sp.h_mean, sp.h_logvar];
        let vars = |v: &[Var]| LatentVars {
            q_mean: v[0],
            q_logvar: v[1],
            h_mean: v[2],
            h_logvar: v[3],
        };
        record(
            "kd_plain",
            gradient_check(&student, &|g, v| {
                let (a, b) = kd_loss_plain(g, &tp, &vars(v), KdDivergence::Gaussian).unwrap();
                g.add(a, b)
            }),
        );
        record(
            "kd_plain_softmax",
            gradient_check(&student, &|g, v| {
                let (a, b) = kd_loss_plain(g, &tp, &vars(v), KdDivergence::SoftmaxOverDim).unwrap();
                g.add(a, b)
            }),
        );
        record(
            "kd_reg",
            gradient_check(&student, &|g, v| {
                let (a, b) = kd_loss_reg(g, &tp, &vars(v), 0.5).unwrap();
                g.add(a, b)
            }),
        );
        let mut all = student.clone();
        all.extend(inputs.iter().cloned());
        record(
            "total",
            gradient_check(&all, &|g, v| {
                let reg = wta_l2(g, &decoded(g, &v[4..]), &target).unwrap().total;
                let nll = nll_loss(g, &decoded(g, &v[4..]), &target).unwrap().total;
                let (ql, hl) = kd_loss_reg(g, &tp, &vars(v), 0.5).unwrap();
                let (qp, hp) = kd_loss_plain(g, &tp, &vars(v), KdDivergence::Gaussian).unwrap();
                let comps = [
                    Some(reg),
                    Some(nll),
                    Some(reg),
                    Some(ql),
                    Some(qp),
                    Some(ql),
                    Some(hl),
                    Some(hp),
                    Some(hl),
                ];
                total_loss_var(g, &comps, &LossWeights::default())
            }),
        );
    }
    let summary = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        worst.iter().all(|(_, e)| *e < 1e-4),
        format!("max relative error per loss over 5 instances: {summary} (tol 1e-4)"),
    )
}

fn total_composition() -> Outcome {
    let w = |local, global| LossWeights {
        lambda_reg: 3.0,
        kd: KdToggles { local, global },
    };
    // Six unit components: three regressions and KD_r = local_r + global_r = 1 per regime.
    let mut c = [1.0; 9];
    c[3..].iter_mut().for_each(|v| *v = 0.5);
    let total = |l, g| LossReport::from_components(c, &w(l, g)).total;
    let full = total(true, true);
    let no_global = total(true, false);
    let no_local = total(false, true);
    let none = total(false, false);
    let local_sum = c[3] + c[4] + c[5];
    let global_sum = c[6] + c[7] + c[8];
    let ok = full == 8.0
        && full - no_global == global_sum
        && full - no_local == local_sum
        && none == 5.0
        && no_local - none == global_sum;
    check(ok, format!("total {full}; without global {no_global}, without local {no_local}, without both {none}"))
}

fn captioner_goldens() -> Outcome {
    let px = CaptionRules::pixels();
    let m = CaptionRules::default();
    let text = |t: trajkd::scene::CaptionToken| t.text;
    let motion = |d: f64, r: &CaptionRules| text(caption_motion(d, r).unwrap());
    let bearing = |deg: f64| text(caption_bearing(deg, &m));
    let obstacle = |dist: f64| {
        let obs = [trajkd::scene::Obstacle::Point { at: [dist, 0.0] }];
        text(caption_obstacle([0.0, 0.0], [1.0, 0.0], &obs, &m).unwrap())
    };
    let cases: Vec<(String, &str)> = vec![
        (motion(1.0, &px), "The person is standing still."),
        (motion(1.4999, &px), "The person is standing still."),
        (motion(1.5, &px), "The person is walking slowly."),
        (motion(10.0, &px), "The person is walking slowly."),
        (motion(19.999, &px), "The person is walking slowly."),
        (motion(20.0, &px), "The person is walking."),
        (motion(25.0, &px), "The person is walking."),
        (motion(0.0, &m), "The person is standing still."),
        (
            obstacle(m.obstacle_gate + 1.0),
            "There is no obstacle around.",
        ),
        (obstacle(m.obstacle_gate), "There is no obstacle around."),
        (
            obstacle(m.obstacle_gate - 1e-3),
            "There is an obstacle in front.",
        ),
        (bearing(0.0), "There is an obstacle in front."),
        (bearing(29.999), "There is an obstacle in front."),
        (
            bearing(30.0),
            "There is no obstacle in the heading direction of the person.",
        ),
        (bearing(30.001), "There is an obstacle on the right."),
        (bearing(60.0), "There is an obstacle on the right."),
        (bearing(99.999), "There is an obstacle on the right."),
        (
            bearing(100.0),
            "There is no obstacle in the heading direction of the person.",
        ),
        (bearing(-29.999), "There is an obstacle in front."),
        (
            bearing(-30.0),
            "There is no obstacle in the heading direction of the person.",
        ),
        (bearing(-60.0), "There is an obstacle on the left."),
        (
            bearing(-100.0),
            "There is no obstacle in the heading direction of the person.",
        ),
        (
            bearing(150.0),
            "There is no obstacle in the heading direction of the person.",
        ),
        (
            bearing(180.0),
            "There is no obstacle in the heading direction of the person.",
        ),
    ];
    let failures: Vec<String> = cases
        .iter()
        .filter(|(got, want)| got != want)
        .map(|(got, want)| format!("got {got:?}, want {want:?}"))
        .collect();
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} golden cases", cases.len())
        } else {
            failures.join("; ")
        },
    )
}

fn determinism() -> Outcome {
    let gen = GeneratorConfig {
        seed: 77,
        ..Default::default()
    };
    let data: Vec<Sample> = trajkd::synth::generate_dataset(&gen, 12, Parallelism::Auto)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|s| Sample::from_scene(s).unwrap())
        .collect();
    let cfg = ExperimentConfig {
        arch: ArchConfig {
            dim: 16,
            heads: 2,
            layers: 1,
            ..Default::default()
        },
        epochs: 2,
        batch_size: 4,
        seed: 9,
        ..Default::default()
    };
    let e = |r: trajkd::Result<TrainedModel>| r.map_err(|e| e.to_string());
    let t1 = e(train_teacher(&cfg, &data, TrainOptions::default()))?;
    let t2 = e(train_teacher(
        &cfg,
        &data,
        TrainOptions {
            parallelism: Parallelism::Sequential,
            log: None,
        },
    ))?;
    let before = t1.parameter_hash();
    let s1 = e(distill_student(&cfg, &t1, &data, TrainOptions::default()))?;
    let s2 = e(distill_student(&cfg, &t2, &data, TrainOptions::default()))?;
    let after = t1.parameter_hash();
    let reload = TrainedModel::from_bytes(&t1.to_bytes()).map_err(|e| e.to_string())?;
    let r1 =
        evaluate(&s1, &data, PaddingMode::Zero, Parallelism::Auto).map_err(|e| e.to_string())?;
    let r2 = evaluate(&s2, &data, PaddingMode::Zero, Parallelism::Sequential)
        .map_err(|e| e.to_string())?;
    let reports_equal = serde_json::to_string(&r1).unwrap() == serde_json::to_string(&r2).unwrap();
    check(
        before == after && reload.parameter_hash() == before && t1.parameter_hash() == t2.parameter_hash() && s1.parameter_hash() == s2.parameter_hash() && reports_equal,
        format!(
            "teacher hash {} unchanged by distillation; repeated teacher/student/report identical: {}/{}/{}",
            &before[..12],
            t1.parameter_hash() == t2.parameter_hash(),
            s1.parameter_hash() == s2.parameter_hash(),
            reports_equal
        ),
    )
}

fn direction_of_effect() -> Outcome {
    let config = BenchmarkConfig::default();
    let mut teacher = Vec::new();
    let mut student = Vec::new();
    let mut gains = Vec::new();
    for seed in 0..3 {
        let out = run_seed(&config, seed).map_err(|e| e.to_string())?;
        println!(
            "      seed {seed}: ADE1 teacher {:.4}, student {:.4}, distilled {:.4} ({:+.2}%), constant velocity {:.4}",
            out.teacher.ade_1,
            out.student.ade_1,
            out.distilled.ade_1,
            out.kd_gain_percent(),
            out.baseline.ade_1
        );
        if out.teacher_hash_before != out.teacher_hash_after {
            return Err(format!("seed {seed}: teacher changed during distillation"));
        }
        teacher.push(out.teacher.ade_1);
        student.push(out.student.ade_1);
        gains.push(out.kd_gain_percent());
    }
    let (mt, ms, mg) = (
        median(&teacher).unwrap(),
        median(&student).unwrap(),
        median(&gains).unwrap(),
    );
    check(
        mt < ms && mg >= 3.0,
        format!("median ADE1 teacher {mt:.4} < student {ms:.4}: {}; median KD gain {mg:.2}% (need >= 3%)", mt < ms),
    )
}

fn mode_count_sanity() -> Outcome {
    let config = BenchmarkConfig {
        train_scenes: 128,
        test_scenes: 64,
        ..Default::default()
    };
    let (train, test) = benchmark_data(&config, 0).map_err(|e| e.to_string())?;
    let mut ades = Vec::new();
    for modes in [1usize, 6, 20] {
        let cfg = ExperimentConfig {
            modes,
            teacher_modalities: ModalitySet::X,
            epochs: 10,
            ..config.experiment.clone()
        };
        let model =
            train_teacher(&cfg, &train, TrainOptions::default()).map_err(|e| e.to_string())?;
        ades.push(
            evaluate(&model, &test, PaddingMode::Zero, Parallelism::Auto)
                .map_err(|e| e.to_string())?
                .ade,
        );
    }
    check(
        ades[2] <= ades[1] && ades[1] <= ades[0],
        format!(
            "minADE F=1 {:.4}, F=6 {:.4}, F=20 {:.4}",
            ades[0], ades[1], ades[2]
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("metric-oracle", metric_oracle),
        ("rotation-invariance", rotation_invariance),
        ("mask-independence", mask_independence),
        ("kl-correctness", kl_correctness),
        ("gradient-checks", gradient_checks),
        ("total-composition", total_composition),
        ("captioner-goldens", captioner_goldens),
        ("frozen-teacher-determinism", determinism),
        ("direction-of-effect", direction_of_effect),
        ("mode-count-sanity", mode_count_sanity),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<28} {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<28} {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
