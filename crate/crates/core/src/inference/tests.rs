use super::*;
use crate::canonicalize::{Frame, NoisyOracle};
use crate::fields::PriorConfig;
use crate::geometry::{axis_angle, RigidTransform};
use crate::synthdata::{render_depth, AnalyticShape, Camera, Intrinsics};

fn small_prior(seed: u64) -> ShapePrior {
    let cfg = PriorConfig {
        latent_dim: 3,
        template_hidden: vec![12, 12],
        deform_hidden: vec![6],
        hyper_hidden: 5,
        hyper_weight_scale: 1.0,
        deform_output_scale: 1.0,
        ..PriorConfig::default()
    };
    ShapePrior::init("test", cfg, 4, &mut rng::stream(seed, "init")).unwrap()
}

fn random_points(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<[f64; 3]> {
    let mut r = rng::stream(seed, "pts");
    (0..n)
        .map(|_| std::array::from_fn(|_| r.random_range(lo..hi)))
        .collect()
}

fn test_pose() -> Pose {
    Pose::new(&axis_angle(&Vec3::new(0.2, 1.0, -0.4), 0.8), Vec3::new(0.1, -0.2, 2.0))
}

#[test]
fn gradients_match_finite_differences() {
    let prior = small_prior(1);
    let w = LossWeights::default();
    let pose = test_pose();
    let cam = pose.object_to_camera().unwrap();
    let observed: Vec<[f64; 3]> = random_points(2, 40, -0.7, 0.7)
        .iter()
        .map(|p| {
            let q = cam.apply(&Vec3::from(*p));
            [q.x, q.y, q.z]
        })
        .collect();
    let free = random_points(3, 30, -1.0, 1.0);
    let z = LatentCode::new(0, vec![0.3, -0.2, 0.4]);
    let o = inference_objective(&prior, &observed, &free, &z, &pose, &w).unwrap();
    let f = |z: &LatentCode, p: &Pose| {
        inference_objective(&prior, &observed, &free, z, p, &w)
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
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let h = 1e-6;
    for (k, &a) in analytic.iter().enumerate() {
        let (mut pp, mut pm) = (pose, pose);
        let (mut zp, mut zm) = (z.clone(), z.clone());
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
        assert!((a - fd).abs() / scale < 1e-3, "component {k}: {a} vs {fd}");
    }
}

#[test]
fn observation_gradient_is_exact_per_term() {
    // only the observation term: compare against differences of the term itself
    let prior = small_prior(4);
    let w = LossWeights {
        sdf: [1.0, 0.0, 0.0, 0.0],
        lambda2: 0.0,
        ..LossWeights::default()
    };
    let pose = test_pose();
    let observed = random_points(5, 25, -0.3, 0.3)
        .iter()
        .map(|p| [p[0], p[1], p[2] + 2.0])
        .collect::<Vec<_>>();
    let free = random_points(6, 4, -1.0, 1.0);
    let z = LatentCode::new(0, vec![-0.1, 0.2, 0.05]);
    let o = inference_objective(&prior, &observed, &free, &z, &pose, &w).unwrap();
    let obs = |p: &Pose| {
        inference_objective(&prior, &observed, &free, &z, p, &w)
            .unwrap()
            .terms
            .observation
    };
    let scale = o
        .grad_translation
        .iter()
        .chain(&o.grad_rot6d)
        .fold(0.0f64, |m, g| m.max(g.abs()));
    for k in 0..3 {
        let (mut a, mut b) = (pose, pose);
        a.translation[k] += 1e-6;
        b.translation[k] -= 1e-6;
        let fd = (obs(&a) - obs(&b)) / 2e-6;
        assert!((o.grad_translation[k] - fd).abs() / scale < 1e-3);
    }
}

#[test]
fn zero_iterations_return_the_initialisation() {
    let prior = small_prior(7);
    let cfg = InferenceConfig {
        iterations: 0,
        latent_init: LatentInit::Given(vec![0.1, 0.2, 0.3]),
        ..InferenceConfig::default()
    };
    let pc = PointCloud::new(vec![[0.0, 0.0, 2.0]], Frame::Camera);
    let init = test_pose();
    let fit = joint_optimize(&prior, &pc, &init, &LossWeights::default(), &cfg).unwrap();
    assert_eq!(fit.pose, init);
    assert_eq!(fit.latent.z, vec![0.1, 0.2, 0.3]);
    assert!(fit.trace.is_empty());
}

#[test]
fn trace_has_one_row_per_iteration_and_frozen_parts_stay_put() {
    let prior = small_prior(8);
    let pc = PointCloud::new(random_points(9, 50, -0.3, 0.3), Frame::Camera);
    let init = Pose::identity();
    let cfg = InferenceConfig {
        iterations: 7,
        optimize_pose: false,
        eikonal_points: 64,
        ..InferenceConfig::default()
    };
    let fit = joint_optimize(&prior, &pc, &init, &LossWeights::default(), &cfg).unwrap();
    assert_eq!(fit.trace.len(), 7);
    assert_eq!(fit.pose, init);
    fit.pose.validate().unwrap();

    let cfg = InferenceConfig {
        optimize_shape: false,
        optimize_pose: true,
        latent_init: LatentInit::Zero,
        ..cfg
    };
    let fit = joint_optimize(&prior, &pc, &init, &LossWeights::default(), &cfg).unwrap();
    assert_eq!(fit.latent.z, vec![0.0; 3]);
    assert_ne!(fit.pose, init);
    fit.pose.validate().unwrap();
}

#[test]
fn optimisation_is_deterministic() {
    let prior = small_prior(10);
    let pc = PointCloud::new(random_points(11, 30, -0.3, 0.3), Frame::Camera);
    let cfg = InferenceConfig {
        iterations: 5,
        eikonal_points: 32,
        seed: 3,
        ..InferenceConfig::default()
    };
    let a = joint_optimize(&prior, &pc, &Pose::identity(), &LossWeights::default(), &cfg).unwrap();
    let b = joint_optimize(&prior, &pc, &Pose::identity(), &LossWeights::default(), &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn random_latent_init_follows_trained_codes() {
    let mut prior = small_prior(12);
    for l in &mut prior.latents {
        l.z = vec![1.0, -2.0, 0.5];
    }
    let z = initial_latent(&prior, &LatentInit::Random, 1).unwrap();
    assert_eq!(z.z, vec![1.0, -2.0, 0.5]);
    assert!(initial_latent(&prior, &LatentInit::Given(vec![1.0]), 1).is_err());
}

#[test]
fn non_finite_input_aborts_with_iteration() {
    let prior = small_prior(13);
    let pc = PointCloud::new(vec![[0.0, 0.0, 2.0]], Frame::Camera);
    let cfg = InferenceConfig {
        iterations: 3,
        latent_init: LatentInit::Given(vec![f64::MAX, f64::MAX, 0.0]),
        ..InferenceConfig::default()
    };
    let err = joint_optimize(&prior, &pc, &Pose::identity(), &LossWeights::default(), &cfg).unwrap_err();
    assert!(
        err.to_string().contains("iteration 0") || matches!(err, Error::Structural(_)),
        "{err}"
    );
}

#[test]
fn diverging_pose_is_a_numeric_abort() {
    let prior = small_prior(13);
    let pc = PointCloud::new(vec![[0.1, 0.0, 2.0], [0.0, 0.2, 2.1]], Frame::Camera);
    let cfg = InferenceConfig {
        iterations: 3,
        lr_pose: 1e308,
        ..InferenceConfig::default()
    };
    let init = Pose::new(&Mat3::identity(), Vec3::new(0.0, 0.0, 2.0));
    let err = joint_optimize(&prior, &pc, &init, &LossWeights::default(), &cfg).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn pose_json_round_trips_row_major() {
    let p = test_pose();
    let text = pose_to_json(&p).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let r = p.rotation().unwrap();
    assert_eq!(v["rotation"][1].as_f64().unwrap(), r[(0, 1)]);
    let back = pose_from_json(&text).unwrap();
    assert!((back.rotation().unwrap() - r).abs().max() < 1e-15);
    assert_eq!(back.translation, p.translation);
}

#[test]
fn result_bundle_files_are_written() {
    let prior = small_prior(14);
    let z = LatentCode::zeros(0, 3);
    let res = ReconstructionResult {
        mesh: TriangleMesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        },
        pose: Pose::identity(),
        latent: z,
        trace: vec![TraceRow::default(); 2],
    };
    let dir = tempfile::tempdir().unwrap();
    res.write(dir.path()).unwrap();
    for f in ["mesh.obj", "pose.json", "latent.bin", "trace.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let tf = TensorFile::read(&dir.path().join("latent.bin")).unwrap();
    assert_eq!(tf.require("latent").unwrap().data.len(), prior.latent_dim());
}

fn rendered(shape: &AnalyticShape) -> DepthImage {
    let k = Intrinsics::from_fov(48, 48, 50f64.to_radians());
    let cam = Camera::looking_at_origin(Vec3::new(1.5, -1.8, 1.2), k);
    render_depth(shape, &cam, 48, 48, 0.0, 1).unwrap()
}

#[test]
fn pipeline_tags_failures_with_stage() {
    let prior = small_prior(15);
    let mut img = rendered(&AnalyticShape::sphere(0.5));
    img.mask.iter_mut().for_each(|m| *m = false);
    let oracle = NoisyOracle::new(Pose::identity(), 0.0, 0.0, 0).unwrap();
    let err = reconstruct(
        &prior,
        &img,
        &oracle,
        &LossWeights::default(),
        &InferenceConfig::default(),
    )
    .unwrap_err();
    assert_eq!(err.stage(), Some("lift_depth"));
}

#[test]
fn pipeline_runs_end_to_end() {
    let prior = small_prior(16);
    let img = rendered(&AnalyticShape::sphere(0.5));
    let truth = Pose::from_object_to_camera(&img.camera_from_canonical);
    let oracle = NoisyOracle::new(truth, 5.0, 0.02, 0).unwrap();
    let cfg = InferenceConfig {
        iterations: 3,
        mesh_resolution: 16,
        eikonal_points: 32,
        ..InferenceConfig::default()
    };
    let res = reconstruct(&prior, &img, &oracle, &LossWeights::default(), &cfg).unwrap();
    assert_eq!(res.trace.len(), 3);
    res.pose.validate().unwrap();
    res.mesh.validate().unwrap();
    let _ = RigidTransform::identity();
}
