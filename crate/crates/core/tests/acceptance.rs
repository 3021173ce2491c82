//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use falconbc::anatomy::{evaluate_embedding, procedural_corpus, train_embedding, EmbedEval, EmbedHyper, TubeShape, CORPUS_SEVERITIES};
use falconbc::cfm::{sample_posterior, train_velocity, CfmHyper, CfmModel, PriorBox, SampleOptions, Standardizer};
use falconbc::circuit::{
    build_network, simulate, summarize, BranchConfig, RcrBoundary, Side, SimSettings, StenosisLocation, TopologyConfig,
};
use falconbc::desk::{self, BcParam, NOMINAL_RC2, NOMINAL_RCR6};
use falconbc::inflow::{fit_fourier, FourierInflow, N_HARMONICS};
use falconbc::nn::{mlp_grad, Activation, InitOptions, MlpParams};
use falconbc::pipeline::{
    cfm_train, generate_dataset, group_kfold, mean_std, posterior_predictive, reconstruction_metrics, simulate_values,
    split_fractions, GenSpec, MetricsReport, TrainSpec, Truth, OBS_NAMES,
};
use falconbc::tuning::{
    continuation_bounds, demc_oracle, diff_evolution, hard_constraints_ok, parallel_resistance, rescale_resistances,
    ContinuationState, DeOptions, DemcOptions, TuningProblem, TuningTargets,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

// ---------------------------------------------------------------------------

fn outlet(name: &str, parent: Option<&str>, bc: RcrBoundary, side: Option<Side>) -> BranchConfig {
    BranchConfig {
        name: name.into(),
        parent: parent.map(String::from),
        segments: if parent.is_some() {
            vec![desk::ILIAC_SEGMENT]
        } else {
            vec![]
        },
        outlet: Some(bc),
        side,
    }
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let bc = RcrBoundary {
        rp: 120.0,
        rd: 1500.0,
        c: 2e-4,
        p_ref: 4000.0,
    };
    let single = TopologyConfig {
        branches: vec![outlet("out", None, bc, None)],
        stations: HashMap::new(),
        stenoses: vec![],
        inflow: "q".into(),
    };
    let q = 25.0;
    let tr = simulate(&build_network(&single).unwrap(), &FourierInflow::constant(1.0, q), &SimSettings::default()).unwrap();
    let want = q * (bc.rp + bc.rd) + bc.p_ref;
    let steady = tr.p_in.iter().map(|p| rel(*p, want)).fold(0.0, f64::max);

    let sym = TopologyConfig {
        branches: vec![
            BranchConfig {
                name: "root".into(),
                parent: None,
                segments: vec![desk::AORTA_SEGMENT],
                outlet: None,
                side: None,
            },
            outlet("left", Some("root"), bc, Some(Side::Left)),
            outlet("right", Some("root"), bc, Some(Side::Right)),
        ],
        stations: HashMap::new(),
        stenoses: vec![],
        inflow: "q".into(),
    };
    let inflow = desk::nominal_inflow();
    let tr = simulate(&build_network(&sym).unwrap(), &inflow, &SimSettings::default()).unwrap();
    let split = summarize(&tr).unwrap().flow_split_left;
    let out: f64 = tr.mean_outflows().iter().sum();
    let mass = rel(out, inflow.cycle_volume() / inflow.period);
    let dt = t0.elapsed();
    check(
        steady < 1e-3 && (split - 50.0).abs() <= 0.1 && mass < 1e-3 && dt < Duration::from_secs(1),
        format!(
            "steady-state rel err {steady:.2e} (≤1e-3), split {split:.4}% (50±0.1), mass residual {mass:.2e} (<1e-3); {:.3}s (<1s)",
            dt.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for probe in 0..100 {
        let depth = rng.random_range(1..4);
        let mut widths = vec![rng.random_range(1..6)];
        widths.extend((0..depth).map(|_| rng.random_range(2..12)));
        widths.push(rng.random_range(1..5));
        let p = MlpParams::init(&widths, InitOptions::new(Activation::Silu, probe)).unwrap();
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..*widths.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = mlp_grad(&p, &x, &u).unwrap().flatten();
        let flat = p.flatten();
        // probe a parameter with a gradient large enough for a meaningful ratio
        let k = loop {
            let k = rng.random_range(0..flat.len());
            if g[k].abs() > 1e-3 {
                break k;
            }
        };
        let h = 1e-5;
        let f = |delta: f64| {
            let mut q = p.clone();
            let mut v = flat.clone();
            v[k] += delta;
            q.unflatten(&v).unwrap();
            q.forward(&x).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = (f(h) - f(-h)) / (2.0 * h);
        worst = worst.max((g[k] - fd).abs() / g[k].abs().max(fd.abs()));
    }
    check(worst <= 1e-5, format!("worst relative error over 100 probes {worst:.2e} (≤1e-5)"))
}

fn unconditional(net: MlpParams, d: usize) -> CfmModel {
    CfmModel {
        net,
        x_stats: Standardizer::identity(d),
        y_stats: Standardizer::identity(0),
        bounds: PriorBox::unbounded(d),
        x_names: vec![],
        y_names: vec![],
        config_hash: String::new(),
        seed: 0,
    }
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let h = CfmHyper {
        hidden: vec![32, 32],
        epochs: 300,
        patience: 100,
        batch: 64,
        lr: 3e-3,
        ..CfmHyper::default()
    };
    let target = 0.7;
    let x = vec![vec![target]; 512];
    let y = vec![vec![]; 512];
    let (net, _) = train_velocity(&x, &y, &x[..64], &y[..64], &h).unwrap();
    let s = sample_posterior(&unconditional(net, 1), &[], 1000, &PriorBox::unbounded(1), &SampleOptions::default()).unwrap();
    let (delta_mean, _) = mean_std(&s.samples.iter().map(|v| v[0]).collect::<Vec<_>>());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mu, sd) = ([1.0, -0.5], [0.5, 1.2]);
    let x: Vec<Vec<f64>> = (0..2000)
        .map(|_| (0..2).map(|k| mu[k] + sd[k] * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let y = vec![vec![]; 2000];
    let (net, _) = train_velocity(&x[..1600], &y[..1600], &x[1600..], &y[1600..], &h).unwrap();
    let s = sample_posterior(&unconditional(net, 2), &[], 5000, &PriorBox::unbounded(2), &SampleOptions::default()).unwrap();
    let stats: Vec<(f64, f64)> = (0..2).map(|k| mean_std(&s.samples.iter().map(|v| v[k]).collect::<Vec<_>>())).collect();
    let mean_ok = (0..2).all(|k| (stats[k].0 - mu[k]).abs() <= 0.05);
    let sd_ok = (0..2).all(|k| rel(stats[k].1, sd[k]) <= 0.1);
    let dt = t0.elapsed();
    check(
        (delta_mean - target).abs() <= 0.05 && mean_ok && sd_ok && dt < Duration::from_secs(300),
        format!(
            "delta mean {delta_mean:.4} (target {target}±0.05); gaussian means {:.4}/{:.4} (±0.05), stds {:.4}/{:.4} (±10% of {}/{}); {:.1}s (<300s)",
            stats[0].0,
            stats[1].0,
            stats[0].1,
            stats[1].1,
            sd[0],
            sd[1],
            dt.as_secs_f64()
        ),
    )
}

/// 1-Wasserstein distance between two empirical distributions via their
/// quantile functions on a fine grid.
fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let n = 4000;
    let q = |v: &[f64], p: f64| v[((p * v.len() as f64) as usize).min(v.len() - 1)];
    (0..n)
        .map(|k| {
            let p = (k as f64 + 0.5) / n as f64;
            (q(&a, p) - q(&b, p)).abs()
        })
        .sum::<f64>()
        / n as f64
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let table = generate_dataset(&GenSpec::healthy(BcParam::Rc2, 1000, 7)).unwrap();
    let parts = split_fractions(1000, &[0.9, 0.1], 1).unwrap();
    let spec = TrainSpec {
        x_columns: vec!["R_tot".into(), "C_tot".into()],
        y_columns: vec!["P_dia".into(), "P_sys".into()],
        hyper: CfmHyper {
            hidden: vec![64, 64],
            epochs: 2000,
            batch: 64,
            lr: 2e-3,
            patience: 300,
            ..CfmHyper::default()
        },
    };
    let (model, _) = cfm_train(&table, &parts[0], &parts[1], &spec).unwrap();
    let values = |x: &[f64]| HashMap::from([("R_tot".to_string(), x[0]), ("C_tot".to_string(), x[1])]);
    let settings = SimSettings::default();
    let s = simulate_values(BcParam::Rc2, &values(&NOMINAL_RC2), &settings).unwrap();
    let y = [s.p_dia, s.p_sys];
    let post = sample_posterior(&model, &y, 2000, &model.bounds, &SampleOptions { seed: 3, ..SampleOptions::default() }).unwrap();
    let b = &model.bounds;
    let bounds: Vec<(f64, f64)> = (0..2).map(|j| (b.lo[j], b.hi[j])).collect();
    let log_post = |x: &[f64]| match simulate_values(BcParam::Rc2, &values(x), &settings) {
        Ok(s) => [s.p_dia, s.p_sys]
            .iter()
            .zip(&y)
            .map(|(m, o)| {
                let sd = 0.05 * m.abs();
                -0.5 * ((o - m) / sd).powi(2) - sd.ln()
            })
            .sum(),
        Err(_) => f64::NEG_INFINITY,
    };
    let oracle = demc_oracle(
        log_post,
        &bounds,
        &DemcOptions {
            chains: 8,
            generations: 2000,
            burn_in: 500,
            seed: 5,
            ..DemcOptions::default()
        },
    )
    .unwrap()
    .samples();
    let mut lines = vec![];
    let mut ok = true;
    for (j, name) in ["R", "C"].iter().enumerate() {
        let a: Vec<f64> = post.samples.iter().map(|v| v[j]).collect();
        let o: Vec<f64> = oracle.iter().map(|v| v[j]).collect();
        let range = bounds[j].1 - bounds[j].0;
        let ratio = mean_std(&a).1 / (range / 12f64.sqrt());
        let w = wasserstein1(&a, &o) / range;
        let shape_ok = if j == 0 { ratio < 0.35 } else { ratio > 0.5 };
        ok &= shape_ok && w <= 0.1;
        lines.push(format!(
            "{name}: sd/prior {ratio:.3} ({}), W1/range {w:.3} (≤0.10)",
            if j == 0 { "<0.35" } else { ">0.5" }
        ));
    }
    let dt = t0.elapsed();
    ok &= dt < Duration::from_secs(1800);
    check(ok, format!("{}; {:.0}s (<1800s)", lines.join("; "), dt.as_secs_f64()))
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let test = generate_dataset(&GenSpec::healthy(BcParam::Rcr6, 100, 999)).unwrap();
    let rows: Vec<usize> = (0..100).collect();
    let mut reports: Vec<(usize, MetricsReport)> = vec![];
    for n in [100usize, 500, 1000] {
        let table = generate_dataset(&GenSpec::healthy(BcParam::Rcr6, n, 11)).unwrap();
        let parts = split_fractions(n, &[0.75, 0.25], 1).unwrap();
        let spec = TrainSpec {
            x_columns: BcParam::Rcr6.names(),
            y_columns: OBS_NAMES.iter().map(|s| s.to_string()).collect(),
            hyper: CfmHyper {
                hidden: vec![64, 64],
                epochs: 2000,
                batch: if n <= 100 { 16 } else { 64 },
                lr: 2e-3,
                patience: 300,
                ..CfmHyper::default()
            },
        };
        let (model, _) = cfm_train(&table, &parts[0], &parts[1], &spec).unwrap();
        let opts = SampleOptions { seed: 3, ..SampleOptions::default() };
        let pred = posterior_predictive(&model, &test, &rows, 20, &opts, Truth::Observed, &SimSettings::default()).unwrap();
        reports.push((n, reconstruction_metrics(&pred.predicted, &pred.truth, &pred.names).unwrap()));
    }
    let at = |n: usize| &reports.iter().find(|r| r.0 == n).unwrap().1;
    let big = at(1000);
    let small = at(100);
    let mut ok = true;
    let mut parts = vec![];
    for name in ["P_dia", "P_sys"] {
        let t = big.target(name).unwrap();
        let (ra, rs) = (t.rel_abs_mean.unwrap(), t.rel_sign_mean.unwrap());
        let (s1000, s100) = (t.abs_sign_mean, small.target(name).unwrap().abs_sign_mean);
        ok &= ra <= 0.10 && rs.abs() <= 0.04 && s1000 < s100;
        parts.push(format!(
            "{name} rel abs {:.2}% (≤10%), rel signed {:.2}% (≤4%), |signed| {s1000:.2} < {s100:.2} mmHg at N=100",
            100.0 * ra,
            100.0 * rs
        ));
    }
    let split = big.target("flow_split").unwrap().abs_mean;
    ok &= split <= 6.0;
    parts.push(format!("flow split MAE {split:.2} pp (≤6)"));
    let dt = t0.elapsed();
    ok &= dt < Duration::from_secs(7200);
    parts.push(format!("{:.0}s (<7200s)", dt.as_secs_f64()));
    check(ok, parts.join("; "))
}

fn criterion_6() -> Outcome {
    let r = reconstruction_metrics(&[vec![vec![9.0], vec![13.0]]], &[vec![10.0]], &["y".into()]).unwrap();
    let t = &r.targets[0];
    check(
        t.abs_mean == 2.0 && t.sign_mean == 1.0,
        format!("ε_abs {} (2), ε_sign {} (1)", t.abs_mean, t.sign_mean),
    )
}

fn criterion_7() -> Outcome {
    let problem = TuningProblem {
        topology: desk::topology(Some((StenosisLocation::B, 0.667))),
        inflow: desk::nominal_inflow(),
        targets: TuningTargets::new(120.0, 80.0).unwrap(),
        settings: SimSettings::default(),
    };
    let bounds: Vec<(f64, f64)> = NOMINAL_RCR6.iter().map(|v| (0.3 * v, 3.0 * v)).collect();
    let opts = DeOptions {
        pop: 30,
        max_gen: 60,
        seed: 1,
        ..DeOptions::default()
    };
    let r = diff_evolution(|x| problem.objective(x), &bounds, None, &opts).unwrap();
    let s = summarize(&problem.simulate(&r.x).unwrap()).unwrap();
    let feasible = hard_constraints_ok(&r.x);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut contained = 0;
    for _ in 0..1000 {
        let global: Vec<(f64, f64)> = (0..6)
            .map(|j| {
                let (a, b) = if j % 3 == 2 { (1e-5, 1e-2) } else { (10.0, 1e5) };
                let lo = rng.random_range(a..b);
                (lo, rng.random_range(lo..=b))
            })
            .collect();
        let prev: [f64; 6] = std::array::from_fn(|j| {
            let (lo, hi) = global[j];
            // include states outside the box
            rng.random_range(0.5 * lo..2.0 * hi)
        });
        let side = if rng.random::<bool>() { Side::Left } else { Side::Right };
        let b = continuation_bounds(&ContinuationState::new(prev, side), &global).unwrap();
        if b.iter().zip(&global).all(|((lo, hi), (glo, ghi))| glo <= lo && lo <= hi && hi <= ghi) {
            contained += 1;
        }
    }
    check(
        (s.p_sys - 120.0).abs() <= 2.0 && (s.p_dia - 80.0).abs() <= 2.0 && feasible && contained == 1000,
        format!(
            "P_sys {:.2} / P_dia {:.2} mmHg (120/80 ±2), feasible {feasible}, continuation ⊆ global {contained}/1000",
            s.p_sys, s.p_dia
        ),
    )
}

fn criterion_8() -> Outcome {
    let t0 = Instant::now();
    let (template, geoms) = procedural_corpus(&TubeShape::default(), &CORPUS_SEVERITIES).unwrap();
    let groups: Vec<usize> = (0..geoms.len()).collect();
    let folds = group_kfold(&groups, 6, 0).unwrap();
    let mut all: Option<EmbedEval> = None;
    for (k, (tr, va)) in folds.iter().enumerate() {
        let pick = |idx: &[usize]| idx.iter().map(|&i| geoms[i].clone()).collect::<Vec<_>>();
        let hyper = EmbedHyper {
            seed: k as u64,
            ..EmbedHyper::default()
        };
        let (model, _) = train_embedding(&pick(tr), &pick(va), &template, &hyper).unwrap();
        let e = evaluate_embedding(&model, &template, &pick(va), 3, 100 + k as u64).unwrap();
        match &mut all {
            Some(a) => a.extend(e),
            None => all = Some(e),
        }
    }
    let e = all.unwrap();
    let (acc, mae, cd, floor) = (e.mode_accuracy(), e.severity_mae(), e.mean_chamfer(), e.mean_noise_floor());
    let dt = t0.elapsed();
    check(
        e.mode_true.len() == 48 && acc >= 0.95 && mae <= 0.05 && cd <= 1.5 * floor && dt < Duration::from_secs(3600),
        format!(
            "mode accuracy {:.1}% (≥95%), severity MAE {mae:.4} (≤0.05), Chamfer {cd:.4} vs floor {floor:.4} = {:.2}× (≤1.5×); {:.0}s (<3600s)",
            100.0 * acc,
            cd / floor,
            dt.as_secs_f64()
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut q = FourierInflow::constant(rng.random_range(0.5..1.5), rng.random_range(10.0..100.0));
        for n in 0..N_HARMONICS {
            q.a[n] = rng.random_range(-20.0..20.0);
            q.b[n] = rng.random_range(-20.0..20.0);
        }
        let samples = q.sample_uniform(512);
        let fit = fit_fourier(&samples, q.period, N_HARMONICS).unwrap();
        for (t, v) in &samples {
            worst = worst.max((fit.eval(*t) - v).abs());
        }
    }
    check(worst <= 1e-8, format!("max roundtrip error {worst:.2e} over 20 waveforms (≤1e-8)"))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..10);
        let r: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(0.0..5.0))).collect();
        let truth = 10f64.powf(rng.random_range(0.0..4.0));
        let out = rescale_resistances(&r, truth).unwrap();
        worst = worst.max(rel(parallel_resistance(&out), truth));
    }
    check(worst <= 1e-12, format!("max relative total error {worst:.2e} over 1000 vectors (≤1e-12)"))
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 circuit oracle", criterion_1),
        ("2 gradient check", criterion_2),
        ("3 flow matching analytic targets", criterion_3),
        ("4 RC identifiability", criterion_4),
        ("5 error trends", criterion_5),
        ("6 metric fixture", criterion_6),
        ("7 constrained tuner", criterion_7),
        ("8 anatomy embedding", criterion_8),
        ("9 Fourier roundtrip", criterion_9),
        ("10 resistance rescaling", criterion_10),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.starts_with(&format!("{p} ")) || name.contains(p.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {name}: {} [{:.1}s] {}",
            if o.pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
