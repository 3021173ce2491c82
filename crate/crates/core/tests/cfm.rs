use falconbc::cfm::{ode_integrate, sample_posterior, CfmHyper, CfmModel, Integrator, PriorBox, SampleOptions};
use falconbc::pipeline::mean_std;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// x = y + 0.1·ε with y uniform on [-1, 1].
fn shifted(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = Normal::new(0.0, 0.1).unwrap();
    let u = rand_distr::Uniform::new(-1.0, 1.0).unwrap();
    let y: Vec<Vec<f64>> = (0..n).map(|_| vec![u.sample(&mut rng)]).collect();
    let x = y.iter().map(|r| vec![r[0] + e.sample(&mut rng)]).collect();
    (x, y)
}

fn small_hyper(seed: u64) -> CfmHyper {
    CfmHyper {
        hidden: vec![32, 32],
        lr: 3e-3,
        batch: 64,
        epochs: 250,
        seed,
        ..CfmHyper::default()
    }
}

fn fit(seed: u64) -> CfmModel {
    let (x, y) = shifted(600, 1);
    let (xv, yv) = shifted(100, 2);
    let bounds = PriorBox::new(vec![-3.0], vec![3.0]).unwrap();
    CfmModel::fit(&x, &y, &xv, &yv, bounds, vec!["x".into()], vec!["y".into()], &small_hyper(seed))
        .unwrap()
        .0
}

#[test]
fn one_network_serves_every_observation() {
    let model = fit(5);
    let opts = SampleOptions::default();
    for y in [-0.6, 0.0, 0.5] {
        let post = sample_posterior(&model, &[y], 400, &model.bounds, &opts).unwrap();
        let xs: Vec<f64> = post.samples.iter().map(|s| s[0]).collect();
        let (m, s) = mean_std(&xs);
        assert!((m - y).abs() < 0.08, "y={y}: mean {m}");
        assert!(s < 0.3, "y={y}: std {s}");
    }
}

#[test]
fn training_and_sampling_are_deterministic() {
    let a = fit(9);
    let b = fit(9);
    assert_eq!(a.net.flatten(), b.net.flatten());
    let opts = SampleOptions {
        seed: 4,
        ..SampleOptions::default()
    };
    let pa = sample_posterior(&a, &[0.2], 50, &a.bounds, &opts).unwrap();
    let pb = sample_posterior(&b, &[0.2], 50, &b.bounds, &opts).unwrap();
    assert_eq!(pa.samples, pb.samples);
    // sample k does not depend on how many were requested
    let short = sample_posterior(&a, &[0.2], 10, &a.bounds, &opts).unwrap();
    assert_eq!(&pa.samples[..10], &short.samples[..]);
}

#[test]
fn samples_respect_the_box() {
    let model = fit(5);
    let tight = PriorBox::new(vec![0.0], vec![0.4]).unwrap();
    let post = sample_posterior(&model, &[0.2], 100, &tight, &SampleOptions::default()).unwrap();
    assert!(post.samples.iter().all(|s| tight.contains(s)));
    assert!(post.acceptance_rate > 0.0 && post.acceptance_rate <= 1.0);
}

#[test]
fn integrators_agree_on_a_rotation() {
    // dx/dt = A x with A a rotation generator: exact solution is a rotation by 1 rad
    let f = |_: f64, x: &[f64], out: &mut [f64]| {
        out[0] = -x[1];
        out[1] = x[0];
    };
    let want = [1f64.cos(), 1f64.sin()];
    let a = ode_integrate(f, &[1.0, 0.0], Integrator::default()).unwrap();
    let b = ode_integrate(f, &[1.0, 0.0], Integrator::Rk4 { steps: 100 }).unwrap();
    for k in 0..2 {
        assert!((a[k] - want[k]).abs() < 1e-6);
        assert!((b[k] - want[k]).abs() < 1e-8);
    }
}

#[test]
fn saved_model_reloads() {
    let m = fit(5);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    m.save(&p).unwrap();
    assert_eq!(CfmModel::load(&p).unwrap(), m);
}
