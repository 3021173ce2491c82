use std::collections::HashSet;

use falconbc::circuit::StenosisLocation;
use falconbc::desk::BcParam;
use falconbc::pipeline::{
    add_noise, group_kfold, mean_std, random_search, reconstruction_metrics, sample_prior, split_fractions, standardize,
    destandardize, generate_dataset, DatasetTable, GenSpec, Geometry, NoiseSpec, SearchSpace, OBS_NAMES,
};
use proptest::prelude::*;

proptest! {
    #[test]
    fn fraction_split_is_a_partition(n in 1usize..300, a in 0.1..0.8f64, seed in 0u64..50) {
        let fr = [a, (1.0 - a) / 2.0, (1.0 - a) / 2.0];
        let parts = split_fractions(n, &fr, seed).unwrap();
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!((parts[0].len() as f64 - a * n as f64).abs() <= 1.0);
    }

    #[test]
    fn grouped_folds_never_share_a_group(groups in prop::collection::vec(0usize..12, 12..80), seed in 0u64..20) {
        let k = groups.iter().collect::<HashSet<_>>().len().min(4);
        prop_assume!(k >= 2);
        let folds = group_kfold(&groups, k, seed).unwrap();
        let mut seen = vec![0; groups.len()];
        for (train, val) in &folds {
            prop_assert_eq!(train.len() + val.len(), groups.len());
            let gv: HashSet<usize> = val.iter().map(|&i| groups[i]).collect();
            prop_assert!(train.iter().all(|&i| !gv.contains(&groups[i])));
            for &i in val {
                seen[i] += 1;
            }
        }
        // every row is validated exactly once
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn prior_stays_in_its_box(nom in prop::collection::vec(1e-4..1e4f64, 1..6), r in 0.01..0.9f64, seed in 0u64..50) {
        for row in sample_prior(&nom, r, 50, seed).unwrap() {
            for (v, n) in row.iter().zip(&nom) {
                prop_assert!(*v >= n * (1.0 - r) && *v <= n * (1.0 + r));
            }
        }
    }

    #[test]
    fn zero_noise_is_the_identity(rows in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 3), 1..20)) {
        let out = add_noise(&rows, &NoiseSpec::new(vec![0.0; 3], 1).unwrap()).unwrap();
        prop_assert_eq!(out, rows);
    }

    #[test]
    fn standardize_roundtrip(rows in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 2), 3..30)) {
        prop_assume!((0..2).all(|j| {
            let c: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            mean_std(&c).1 > 1e-6
        }));
        let (z, s) = standardize(&rows).unwrap();
        for (a, b) in destandardize(&z, &s).iter().zip(&rows) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}

#[test]
fn relative_noise_has_the_requested_spread() {
    let rows = vec![vec![100.0, -50.0]; 20000];
    let out = add_noise(&rows, &NoiseSpec::new(vec![0.05, 0.1], 3).unwrap()).unwrap();
    for (j, (v, rel)) in [(100.0, 0.05), (-50.0f64, 0.1)].iter().enumerate() {
        let c: Vec<f64> = out.iter().map(|r| r[j]).collect();
        let (m, s) = mean_std(&c);
        assert!((m - v).abs() < 4.0 * rel * v.abs() / (20000f64).sqrt());
        assert!((s / (rel * v.abs()) - 1.0).abs() < 0.03);
    }
    assert!(NoiseSpec::new(vec![-0.1], 0).is_err());
}

#[test]
fn metrics_against_hand_computation() {
    // two test points, three predictions each
    let truth = vec![vec![10.0], vec![-4.0]];
    let pred = vec![vec![vec![11.0], vec![8.0], vec![13.0]], vec![vec![-4.0], vec![-6.0], vec![-5.0]]];
    let r = reconstruction_metrics(&pred, &truth, &["y".into()]).unwrap();
    let t = r.target("y").unwrap();
    // per point |d| means: (1+2+3)/3 = 2 and (0+2+1)/3 = 1
    assert!((t.abs_mean - 1.5).abs() < 1e-15);
    assert!((t.abs_std - (0.5f64).sqrt()).abs() < 1e-15);
    // signed means: 2/3 and -1
    assert!((t.sign_mean - (2.0 / 3.0 - 1.0) / 2.0).abs() < 1e-15);
    assert!((t.abs_sign_mean - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    // relative: (0.2 and 0.25), signed relative (2/30 and 0.25)
    assert!((t.rel_abs_mean.unwrap() - 0.225).abs() < 1e-15);
    assert!((t.rel_sign_mean.unwrap() - (2.0 / 30.0 + 0.25) / 2.0).abs() < 1e-15);
}

#[test]
fn random_search_picks_the_best_trial() {
    let space = SearchSpace::for_rows(50);
    let res = random_search(&space, 12, |p| (p.lr.log10() + 3.0).abs(), 2).unwrap();
    assert_eq!(res.trials.len(), 12);
    assert!(res.trials.iter().all(|(p, _)| space.contains(p)));
    let best = res.trials.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
    assert_eq!(res.best_loss, best);
}

#[test]
fn dataset_roundtrip_and_determinism() {
    let mut spec = GenSpec::healthy(BcParam::Rcr6, 12, 5);
    spec.geometries = vec![
        Geometry {
            location: Some(StenosisLocation::D),
            severity: 0.6,
            nominal: None,
            latent: None,
        },
        Geometry {
            location: None,
            severity: 0.0,
            nominal: None,
            latent: None,
        },
    ];
    let a = generate_dataset(&spec).unwrap();
    let b = generate_dataset(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.groups(), (0..12).map(|i| i % 2).collect::<Vec<_>>());
    let z = a.z.as_ref().unwrap();
    assert_eq!(z.values[0][3], 0.6);
    for n in OBS_NAMES {
        assert!(a.column(n).unwrap().iter().all(|v| v.is_finite() && *v > 0.0));
    }
    let dir = tempfile::tempdir().unwrap();
    let side = a.write(dir.path(), "set").unwrap();
    let back = DatasetTable::read(&side).unwrap();
    assert_eq!(back, a);
    // lesion on the right moves flow to the left
    let ql = a.column("Q_left_sim").unwrap();
    let qr = a.column("Q_right_sim").unwrap();
    let share = |i: usize| ql[i] / (ql[i] + qr[i]);
    let lesioned: f64 = (0..12).step_by(2).map(share).sum::<f64>() / 6.0;
    let healthy: f64 = (1..12).step_by(2).map(share).sum::<f64>() / 6.0;
    assert!(lesioned > healthy);
}
