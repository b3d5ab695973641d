use super::*;
use crate::geometry::axis_angle;
use crate::rng;
use crate::synthdata::{render_depth, sample_shape, AnalyticShape, Camera, Node, Primitive};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn ellipsoid() -> AnalyticShape {
    AnalyticShape::new(
        "ellipsoid",
        vec![0.7, 0.4, 0.25],
        Node::leaf(
            Primitive::Ellipsoid {
                radii: [0.7, 0.4, 0.25],
            },
            [0.0; 3],
        ),
    )
}

fn surface_cloud(shape: &AnalyticShape, n: usize, seed: u64) -> PointCloud {
    let s = sample_shape(shape, n, 1, seed).unwrap();
    PointCloud::new(s.surface.iter().map(|p| p.x).collect(), Frame::Canonical)
}

fn rot_err_deg(a: &Mat3, b: &Mat3) -> f64 {
    let c = (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

fn random_transform(r: &mut impl Rng) -> RigidTransform {
    let axis = Vec3::new(
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
    );
    RigidTransform::new(
        axis_angle(&(axis + Vec3::new(1e-3, 0.0, 0.0)), r.random_range(0.0..3.1)),
        Vec3::new(
            r.random_range(-0.5..0.5),
            r.random_range(-0.5..0.5),
            r.random_range(1.5..3.0),
        ),
    )
}

fn small_image(fx: f64, cx: f64) -> DepthImage {
    DepthImage {
        width: 20,
        height: 10,
        depth: vec![0.0; 200],
        mask: vec![false; 200],
        intrinsics: Intrinsics {
            fx,
            fy: fx,
            cx,
            cy: 5.0,
        },
        camera_from_canonical: RigidTransform::identity(),
    }
}

#[test]
fn principal_point_lifts_onto_the_axis() {
    let mut img = small_image(10.0, 5.0);
    img.mask[5 * 20 + 5] = true;
    img.depth[5 * 20 + 5] = 2.0;
    assert_eq!(lift_depth(&img).unwrap().points, vec![[0.0, 0.0, 2.0]]);
}

#[test]
fn one_focal_length_off_axis_is_unit_tangent() {
    let mut img = small_image(10.0, 5.0);
    img.mask[5 * 20 + 15] = true;
    img.depth[5 * 20 + 15] = 1.0;
    assert_eq!(lift_depth(&img).unwrap().points, vec![[1.0, 0.0, 1.0]]);
}

#[test]
fn lifting_inverts_projection() {
    let k = Intrinsics::from_fov(64, 48, 50f64.to_radians());
    let cam = Camera::looking_at_origin(Vec3::new(1.2, -1.5, 1.0), k);
    let img = render_depth(&ellipsoid(), &cam, 64, 48, 0.0, 3).unwrap();
    let pc = lift_depth(&img).unwrap();
    assert_eq!(pc.len(), img.valid_count());
    assert_eq!(pc.frame, Frame::Camera);
    let pixels = (0..img.width * img.height).filter(|&i| img.mask[i]);
    for (p, i) in pc.points.iter().zip(pixels) {
        let [u, v, d] = project(p, &img.intrinsics);
        assert!((u - (i % img.width) as f64).abs() < 1e-9);
        assert!((v - (i / img.width) as f64).abs() < 1e-9);
        assert_eq!(d, img.depth[i]);
    }
}

#[test]
fn empty_mask_is_an_error() {
    assert!(matches!(
        lift_depth(&small_image(10.0, 5.0)),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn pose_conversions_round_trip() {
    let mut r = rng::stream(3, "pose");
    for _ in 0..20 {
        let t = random_transform(&mut r);
        let p = Pose::from_object_to_camera(&t);
        p.validate().unwrap();
        let back = p.object_to_camera().unwrap();
        assert!((back.rotation - t.rotation).abs().max() < 1e-12);
        let inv = Pose::from_camera_to_canonical(&t).camera_to_canonical().unwrap();
        assert!((inv.rotation - t.rotation).abs().max() < 1e-12);
        assert!((inv.translation - t.translation).norm() < 1e-12);
    }
}

#[test]
fn pca_frame_follows_rigid_motion() {
    let template = surface_cloud(&ellipsoid(), 3000, 1);
    let mut r = rng::stream(4, "pca");
    let align = frame_align(&PcaEstimator, &template).unwrap();
    for _ in 0..5 {
        let t = random_transform(&mut r);
        let pc = template.transformed(&t, Frame::Camera);
        let est = PcaEstimator.estimate(&pc).unwrap();
        let cam_to_prior = align.compose(&est.camera_to_canonical().unwrap());
        let got = Pose::from_camera_to_canonical(&cam_to_prior)
            .object_to_camera()
            .unwrap();
        assert!(rot_err_deg(&got.rotation, &t.rotation) < 1.0);
        assert!((got.translation - t.translation).norm() < 1e-3);
    }
}

#[test]
fn pca_rejects_planar_clouds_naming_the_axis() {
    let pts = (0..50).map(|i| [i as f64 * 0.1, (i % 7) as f64 * 0.2, 0.0]).collect();
    let err = PcaEstimator.estimate(&PointCloud::new(pts, Frame::Camera)).unwrap_err();
    assert!(matches!(&err, Error::Degenerate(m) if m.contains("axis 3")), "{err}");
}

#[test]
fn icp_recovers_a_known_transform() {
    let template = surface_cloud(&ellipsoid(), 2000, 2);
    let icp = IcpEstimator::new(&template).unwrap();
    let mut r = rng::stream(5, "icp");
    for _ in 0..5 {
        let t = random_transform(&mut r);
        let pc = template.transformed(&t, Frame::Camera);
        let got = icp.estimate(&pc).unwrap().object_to_camera().unwrap();
        assert!(rot_err_deg(&got.rotation, &t.rotation) < 1.0);
        assert!((got.translation - t.translation).norm() < 1e-3);
    }
}

#[test]
fn canonical_cloud_gives_identity() {
    let template = surface_cloud(&ellipsoid(), 2000, 2);
    let icp = IcpEstimator::new(&template).unwrap();
    let got = icp.estimate(&template).unwrap().object_to_camera().unwrap();
    assert!(rot_err_deg(&got.rotation, &Mat3::identity()) < 1.0);
    assert!(got.translation.norm() < 1e-3);
}

#[test]
fn half_sphere_view_fixes_translation() {
    let sphere = AnalyticShape::sphere(0.5);
    let template = surface_cloud(&sphere, 4000, 6);
    let icp = IcpEstimator::new(&template).unwrap();
    let t = RigidTransform::new(axis_angle(&Vec3::new(0.3, 1.0, 0.2), 0.7), Vec3::new(0.1, -0.2, 2.5));
    // points facing the camera only
    let view = surface_cloud(&sphere, 6000, 7);
    let half: Vec<[f64; 3]> = view
        .points
        .iter()
        .filter(|p| t.apply_vector(&Vec3::from(**p)).z < 0.0)
        .copied()
        .collect();
    let pc = PointCloud::new(half, Frame::Canonical).transformed(&t, Frame::Camera);
    let got = icp.estimate(&pc).unwrap();
    assert!((got.translation() - t.translation).norm() < 5e-3);
    // the fitted residual is no worse than that of the true alignment
    let residual = icp.fit(&pc).unwrap().residual;
    let oracle = icp.refine(&pc, &t.inverse()).unwrap().residual;
    assert!(residual <= oracle * 1.05, "residual {residual} vs {oracle}");
}

#[test]
fn icp_residual_is_bounded_by_noise_on_partial_overlap() {
    let shape = ellipsoid();
    let template = surface_cloud(&shape, 20000, 8);
    let icp = IcpEstimator::new(&template).unwrap();
    let sigma = 0.01;
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut r = rng::stream(9, "overlap");
    let obs = surface_cloud(&shape, 3000, 10);
    let kept: Vec<[f64; 3]> = obs
        .points
        .iter()
        .filter(|p| p[0] > -0.15)
        .map(|p| {
            [
                p[0] + noise.sample(&mut r),
                p[1] + noise.sample(&mut r),
                p[2] + noise.sample(&mut r),
            ]
        })
        .collect();
    assert!(kept.len() as f64 >= 0.6 * obs.len() as f64);
    let t = random_transform(&mut r);
    let pc = PointCloud::new(kept, Frame::Canonical).transformed(&t, Frame::Camera);
    let near = RigidTransform::new(
        axis_angle(&Vec3::new(1.0, 2.0, 0.5), 8f64.to_radians()),
        Vec3::new(0.03, 0.0, -0.02),
    )
    .compose(&t.inverse());
    let fit = icp.refine(&pc, &near).unwrap();
    assert!(fit.residual < 2.0 * sigma, "residual {}", fit.residual);
    assert!(fit.iterations <= 50);
}

struct FixedEstimator(RigidTransform);

impl PoseEstimator for FixedEstimator {
    fn name(&self) -> &str {
        "fixed"
    }

    fn estimate(&self, _: &PointCloud) -> Result<Pose> {
        Ok(Pose::from_camera_to_canonical(&self.0))
    }
}

#[test]
fn frame_align_with_stub_estimators() {
    let template = surface_cloud(&ellipsoid(), 200, 1);
    let id = frame_align(&FixedEstimator(RigidTransform::identity()), &template).unwrap();
    assert!((id.rotation - Mat3::identity()).abs().max() < 1e-15);
    assert!(id.translation.norm() < 1e-15);

    let quarter = axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
    let a = frame_align(&FixedEstimator(RigidTransform::new(quarter, Vec3::zeros())), &template).unwrap();
    assert!((a.rotation - quarter.transpose()).abs().max() < 1e-12);
}

#[test]
fn frame_cache_computes_once_per_key() {
    let template = surface_cloud(&ellipsoid(), 200, 1);
    let cache = FrameCache::new();
    let a = cache.get_or_compute(&PcaEstimator, "ellipsoid", &template).unwrap();
    let b = cache.get_or_compute(&PcaEstimator, "ellipsoid", &template).unwrap();
    assert_eq!(a, b);
    cache.get_or_compute(&PcaEstimator, "car", &template).unwrap();
    assert_eq!(cache.len(), 2);
}

#[test]
fn noisy_oracle_applies_exact_noise() {
    let mut r = rng::stream(11, "oracle");
    let pc = PointCloud::new(vec![[0.0, 0.0, 2.0]], Frame::Camera);
    for seed in 0..10 {
        let t = random_transform(&mut r);
        let truth = Pose::from_object_to_camera(&t);
        let est = NoisyOracle::new(truth, 10.0, 0.05, seed)
            .unwrap()
            .estimate(&pc)
            .unwrap();
        est.validate().unwrap();
        let got = est.object_to_camera().unwrap();
        assert!((rot_err_deg(&got.rotation, &t.rotation) - 10.0).abs() < 1e-6);
        assert!(((got.translation - t.translation).norm() - 0.05).abs() < 1e-12);
    }
}

#[test]
fn ply_round_trips_in_both_encodings() {
    let dir = tempfile::tempdir().unwrap();
    let pc = surface_cloud(&ellipsoid(), 100, 3);
    for (name, fmt) in [("a.ply", PlyFormat::Ascii), ("b.ply", PlyFormat::BinaryLittleEndian)] {
        let path = dir.path().join(name);
        write_ply(&path, &pc, fmt).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.frame, Frame::Canonical);
        assert_eq!(back.len(), pc.len());
        for (a, b) in back.points.iter().zip(&pc.points) {
            for k in 0..3 {
                assert_eq!(a[k], b[k] as f32 as f64);
            }
        }
    }
}

#[test]
fn ply_mesh_vertices_are_readable() {
    let dir = tempfile::tempdir().unwrap();
    let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
        let path = dir.path().join("m.ply");
        write_ply_mesh(&path, &verts, &[[0, 1, 2]], Frame::Canonical, fmt).unwrap();
        assert_eq!(read_ply(&path).unwrap().points, verts);
    }
}

#[test]
fn malformed_ply_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ply");
    std::fs::write(
        &path,
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n2\n",
    )
    .unwrap();
    assert!(matches!(read_ply(&path), Err(Error::Format(_))));
    std::fs::write(&path, "ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n").unwrap();
    assert!(matches!(read_ply(&path), Err(Error::Format(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn estimates_are_proper_poses(seed in 0u64..1000) {
        let mut r = rng::stream(seed, "pc");
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|_| [r.random_range(-1.0..1.0), r.random_range(-0.5..0.5), r.random_range(1.0..1.2)])
            .collect();
        let pc = PointCloud::new(pts, Frame::Camera);
        prop_assert!(PcaEstimator.estimate(&pc).unwrap().validate().is_ok());
        let icp = IcpEstimator::new(&surface_cloud(&ellipsoid(), 300, 1)).unwrap();
        prop_assert!(icp.estimate(&pc).unwrap().validate().is_ok());
    }
}
