use nalgebra::DMatrix;
use rand::Rng;

use super::*;
use crate::autodiff::Activation;
use crate::rng;

fn small_prior(seed: u64) -> ShapePrior {
    let cfg = PriorConfig {
        latent_dim: 4,
        template_hidden: vec![12, 12],
        deform_hidden: vec![8],
        hyper_hidden: 6,
        hyper_weight_scale: 1.0,
        deform_output_scale: 1.0,
        ..PriorConfig::default()
    };
    ShapePrior::init("test", cfg, 3, &mut rng::stream(seed, "init")).unwrap()
}

fn random_point(r: &mut impl Rng) -> [f64; 3] {
    [
        r.random_range(-0.8..0.8),
        r.random_range(-0.8..0.8),
        r.random_range(-0.8..0.8),
    ]
}

fn random_latent(r: &mut impl Rng, n: usize) -> LatentCode {
    LatentCode::new(0, (0..n).map(|_| r.random_range(-0.5..0.5)).collect())
}

fn zero_last_layer(net: &mut Mlp) {
    let k = net.num_layers() - 1;
    let r = net.layer_range(k);
    net.params_mut()[r].iter_mut().for_each(|p| *p = 0.0);
}

fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(1e-3)
}

#[test]
fn zeroed_template_is_zero_field() {
    let mut prior = small_prior(1);
    zero_last_layer(&mut prior.template);
    let e = prior.template_eval([0.3, -0.1, 0.7]).unwrap();
    assert_eq!(e.value, 0.0);
    assert_eq!(e.spatial_grad, [0.0; 3]);
}

#[test]
fn template_gradient_matches_finite_differences() {
    let prior = small_prior(2);
    let mut r = rng::stream(2, "pts");
    for _ in 0..50 {
        let x = random_point(&mut r);
        let e = prior.template_eval(x).unwrap();
        let scale = e.spatial_grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for c in 0..3 {
            let h = 1e-5;
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let fd = (prior.template.forward(&xp).unwrap()[0] - prior.template.forward(&xm).unwrap()[0]) / (2.0 * h);
            assert!(rel_err(e.spatial_grad[c], fd, scale) < 1e-4);
        }
    }
}

#[test]
fn zero_latent_isolates_hyper_biases() {
    let prior = small_prior(3);
    let w = prior.hyper_weights(&LatentCode::zeros(0, 4)).unwrap();
    let mut expected = Vec::new();
    for h in &prior.hyper {
        expected.extend_from_slice(h.bias(h.num_layers() - 1));
    }
    assert_eq!(w.net().params(), expected.as_slice());
}

#[test]
fn hyper_weights_are_deterministic() {
    let prior = small_prior(4);
    let z = random_latent(&mut rng::stream(4, "z"), 4);
    assert_eq!(prior.hyper_weights(&z).unwrap(), prior.hyper_weights(&z).unwrap());
}

#[test]
fn latent_dimension_mismatch_is_structural() {
    let prior = small_prior(5);
    let bad = LatentCode::zeros(0, 5);
    assert!(matches!(prior.hyper_weights(&bad), Err(crate::Error::Structural(_))));
    assert!(prior.instance_sdf(&bad, [0.0; 3]).is_err());
}

fn spectral_norm(net: &Mlp, k: usize) -> f64 {
    let s = net.specs()[k];
    let m = DMatrix::from_row_slice(s.out_dim, s.in_dim, net.weight(k));
    m.singular_values().max()
}

#[test]
fn hyper_weights_are_lipschitz_in_latent() {
    let prior = small_prior(6);
    let mut r = rng::stream(6, "z");
    for _ in 0..20 {
        let z = random_latent(&mut r, 4);
        let i = r.random_range(0..4);
        let mut z2 = z.clone();
        z2.z[i] += 1e-6;
        let a = prior.hyper_weights(&z).unwrap();
        let b = prior.hyper_weights(&z2).unwrap();
        let mut off = 0;
        for (k, h) in prior.hyper.iter().enumerate() {
            let bound = 1e-6 * (0..h.num_layers()).map(|l| spectral_norm(h, l)).product::<f64>();
            let n = prior.deform_specs[k].num_params();
            let diff: f64 = a.net().params()[off..off + n]
                .iter()
                .zip(&b.net().params()[off..off + n])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(diff <= bound * (1.0 + 1e-6) + 1e-15, "{diff} > {bound}");
            off += n;
        }
    }
}

#[test]
fn zeroed_deformation_output() {
    let mut prior = small_prior(7);
    let last = prior.hyper.len() - 1;
    zero_last_layer(&mut prior.hyper[last]);
    let w = prior
        .hyper_weights(&random_latent(&mut rng::stream(7, "z"), 4))
        .unwrap();
    let d = deform_eval(&w, [0.2, 0.4, -0.3]).unwrap();
    assert_eq!(d.v, [0.0; 3]);
    assert_eq!(d.delta_s, 0.0);
    assert_eq!(d.jac_v, [0.0; 9]);
}

#[test]
fn deform_jacobian_matches_finite_differences() {
    let prior = small_prior(8);
    let mut r = rng::stream(8, "pts");
    let w = prior.hyper_weights(&random_latent(&mut r, 4)).unwrap();
    for _ in 0..50 {
        let x = random_point(&mut r);
        let d = deform_eval(&w, x).unwrap();
        let scale = d.jac_v.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for c in 0..3 {
            let h = 1e-5;
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let op = w.net().forward(&xp).unwrap();
            let om = w.net().forward(&xm).unwrap();
            for k in 0..3 {
                let fd = (op[k] - om[k]) / (2.0 * h);
                assert!(rel_err(d.jac_v[k * 3 + c], fd, scale) < 1e-4);
            }
        }
    }
}

#[test]
fn linear_deformation_has_exact_jacobian() {
    let a = [0.1, 0.2, 0.3, -0.4, 0.5, 0.6, 0.7, 0.8, -0.9];
    let mut w = a.to_vec();
    w.extend_from_slice(&[0.0; 3]);
    let net = Mlp::single_layer(&w, &[0.0; 4], 3, Activation::Linear, 1.0).unwrap();
    let d = deform_eval(&DeformWeights::new(net).unwrap(), [0.3, -0.2, 0.9]).unwrap();
    assert_eq!(d.jac_v, a);
}

#[test]
fn deform_weights_need_four_outputs() {
    let net = Mlp::single_layer(&[1.0, 0.0, 0.0], &[0.0], 3, Activation::Linear, 1.0).unwrap();
    assert!(DeformWeights::new(net).is_err());
}

#[test]
fn zero_deformation_reproduces_template_exactly() {
    let mut prior = small_prior(9);
    let last = prior.hyper.len() - 1;
    zero_last_layer(&mut prior.hyper[last]);
    let mut r = rng::stream(9, "pts");
    let z = random_latent(&mut r, 4);
    for _ in 0..100 {
        let x = random_point(&mut r);
        assert_eq!(prior.instance_sdf(&z, x).unwrap(), prior.template_eval(x).unwrap());
    }
}

#[test]
fn constant_correction_shifts_template() {
    let mut prior = small_prior(10);
    let last = prior.hyper.len() - 1;
    let h = &mut prior.hyper[last];
    zero_last_layer(h);
    let r = h.layer_range(h.num_layers() - 1);
    // deformation output bias (0, 0, 0, c) sits at the very end of the layer
    let c = 0.125;
    h.params_mut()[r.end - 1] = c;
    let z = random_latent(&mut rng::stream(10, "z"), 4);
    let x = [0.1, 0.2, 0.3];
    let e = prior.instance_sdf(&z, x).unwrap();
    let t = prior.template_eval(x).unwrap();
    assert_eq!(e.value, t.value + c);
    assert_eq!(e.spatial_grad, t.spatial_grad);
}

#[test]
fn composed_gradient_matches_finite_differences() {
    let prior = small_prior(11);
    let mut r = rng::stream(11, "pts");
    for _ in 0..100 {
        let z = random_latent(&mut r, 4);
        let x = random_point(&mut r);
        let field = prior.instance(&z).unwrap();
        let e = field.eval(x).unwrap();
        let scale = e.spatial_grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for c in 0..3 {
            let h = 1e-5;
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let fd = (field.value(xp).unwrap() - field.value(xm).unwrap()) / (2.0 * h);
            assert!(
                rel_err(e.spatial_grad[c], fd, scale) < 1e-4,
                "{:?} vs {fd}",
                e.spatial_grad
            );
        }
        assert!((field.value(x).unwrap() - e.value).abs() < 1e-12);
    }
}

#[test]
fn composed_input_gradient_matches_finite_differences() {
    let prior = small_prior(12);
    let mut r = rng::stream(12, "pts");
    let z = random_latent(&mut r, 4);
    let field = prior.instance(&z).unwrap();
    let mut work = PointWork::default();
    for _ in 0..20 {
        let x = random_point(&mut r);
        let e = field.forward(x, &mut work).unwrap();
        let seeds = PointSeeds {
            psi: 1.0,
            ..Default::default()
        };
        let gx = field.backward(&work, &e, &seeds, None, None).unwrap();
        for c in 0..3 {
            assert!(rel_err(gx[c], e.grad[c], e.grad[c].abs()) < 1e-10);
        }
    }
}

#[test]
fn prior_checkpoint_round_trip() {
    let prior = small_prior(13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prior.bin");
    prior.save(&path, Some(serde_json::json!({"seed": 13}))).unwrap();
    let back = ShapePrior::load(&path).unwrap();
    assert_eq!(back, prior);
    let meta: PriorMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("prior.bin.json")).unwrap()).unwrap();
    assert_eq!(meta.latent_dim, 4);
    assert_eq!(meta.template_layers, vec![3, 12, 12, 1]);
}

#[test]
fn latents_start_small() {
    let prior = ShapePrior::init("t", PriorConfig::desk(), 50, &mut rng::stream(14, "init")).unwrap();
    let (_, std) = prior.latent_stats();
    assert!(std.iter().all(|s| *s > 0.005 && *s < 0.02), "{std:?}");
}
