//! Acceptance criteria. Each test prints one `criterion N ...: PASS|FAIL` line
//! before asserting.

use std::io::Write;
use std::time::{Duration, Instant};

use fgm_core::autodiff::{Group, Matrix, ParameterStore, Tape, Var};
use fgm_core::checks::{
    default_target, fenchel_suite, fgan_equality_suite, kl_decoupling_suite, lower_bound_suite,
    stationarity_check, CheckConfig, CheckOutcome,
};
use fgm_core::data::{mode_coverage, ring_mixture, ExactDensity};
use fgm_core::fdiv::{Kernel, Term};
use fgm_core::models::{FgmModel, FlowDensityEstimator, ModelSpec};
use fgm_core::objective::{estimate_lm_with_noise, lm_gradients, LmNoise};
use fgm_core::trainer::{
    diagnose_collapse, write_metrics_csv, MetricsRow, TrainConfig, Trainer,
    DEFAULT_COLLAPSE_THRESHOLD,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(n: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    // Written to the raw handle so the line survives libtest output capture.
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "\ncriterion {n} {name}: {verdict} ({detail}; {:.1}s)",
        elapsed.as_secs_f64()
    )
    .expect("write report");
}

fn outcome_criterion(n: u32, name: &str, limit: Duration, run: impl FnOnce() -> CheckOutcome) {
    let start = Instant::now();
    let out = run();
    let elapsed = start.elapsed();
    let pass = out.passed() && elapsed <= limit;
    report(n, name, pass, &out.summary(), elapsed);
    assert!(out.passed(), "{}: {:?}", out.name, out.status);
    assert!(elapsed <= limit, "{} took {elapsed:?}", out.name);
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

#[test]
fn criterion_1_fenchel() {
    let start = Instant::now();
    // Independent restatement of the suite's assertions on the raw kernel API.
    let grid: Vec<f64> = (0..1000)
        .map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / 999.0))
        .collect();
    let mut worst_eq: f64 = 0.0;
    let mut worst_young = f64::INFINITY;
    for k in Kernel::ALL {
        assert_eq!(k.f_value(1.0).unwrap(), 0.0, "{k}");
        for &x in &grid {
            let (f, fp) = (k.f_value(x).unwrap(), k.f_prime(x).unwrap());
            let lhs = k.f_conj(fp).unwrap();
            let rhs = x * fp - f;
            worst_eq = worst_eq.max((lhs - rhs).abs() / (x * fp).abs().max(1.0));
        }
        let hi = k.conj_domain_sup().min(5.0) - 1e-9;
        for i in 0..100 {
            let x = 10f64.powf(-3.0 + 6.0 * i as f64 / 99.0);
            for j in 0..100 {
                let u = -5.0 + (hi + 5.0) * j as f64 / 99.0;
                worst_young = worst_young.min(k.f_value(x).unwrap() + k.f_conj(u).unwrap() - x * u);
            }
        }
    }
    let suite = fenchel_suite(|k, u| k.f_conj(u));
    let elapsed = start.elapsed();
    let pass = worst_eq <= 1e-9
        && worst_young >= -1e-12
        && suite.passed()
        && elapsed < Duration::from_secs(1);
    report(
        1,
        "fenchel",
        pass,
        &format!(
            "max relative conjugate error {worst_eq:.2e}, min Fenchel-Young gap {worst_young:.2e}"
        ),
        elapsed,
    );
    assert!(pass);
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `sum(W ⊙ op(inputs))`.
fn primitive_error(inputs: &[Matrix], op: impl Fn(&mut Tape<'_>, &[Var]) -> Var) -> f64 {
    let mut store = ParameterStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, m)| {
            store
                .add(format!("in{i}"), Group::Theta, m.clone())
                .unwrap()
        })
        .collect();
    let eval = |store: &ParameterStore| -> (f64, Option<fgm_core::autodiff::ParamGrads>) {
        let mut t = Tape::with_store(store);
        let vars: Vec<Var> = ids.iter().map(|&id| t.param(id).unwrap()).collect();
        let out = op(&mut t, &vars);
        let shape = t.shape(out);
        let w = Array2::from_shape_fn(shape, |(i, j)| {
            0.3 + 0.7 * ((i * 7 + j * 3) % 5) as f64 / 5.0
        });
        let wv = t.constant(w);
        let prod = t.mul(out, wv).unwrap();
        let root = t.sum(prod);
        let value = t.scalar(root);
        let grads = t.backward(root).unwrap().params(&t).unwrap();
        (value, Some(grads))
    };
    let (_, grads) = eval(&store);
    let grads = grads.unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &id in &ids {
        let base = store.value(id).clone();
        for idx in 0..base.len() {
            let (i, j) = (idx / base.ncols(), idx % base.ncols());
            let mut probe = store.clone();
            probe.value_mut(id)[[i, j]] = base[[i, j]] + h;
            let up = eval(&probe).0;
            probe.value_mut(id)[[i, j]] = base[[i, j]] - h;
            let down = eval(&probe).0;
            let fd = (up - down) / (2.0 * h);
            let a = grads.get(id)[[i, j]];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-2));
        }
    }
    worst
}

#[test]
fn criterion_2_gradients() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = gaussian(&mut rng, 3, 4);
    let b = gaussian(&mut rng, 3, 4);
    let pos = a.mapv(|v| v.abs() + 0.5);
    let m = gaussian(&mut rng, 4, 2);
    let row = gaussian(&mut rng, 1, 4);
    let col = gaussian(&mut rng, 4, 1);
    // Keep clamp inputs away from the kinks.
    let spread = Array2::from_shape_fn((3, 4), |(i, j)| -2.05 + 0.37 * (4 * i + j) as f64);
    let mut cases: Vec<(String, f64)> = vec![
        (
            "add".into(),
            primitive_error(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub".into(),
            primitive_error(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul".into(),
            primitive_error(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap()),
        ),
        (
            "matmul".into(),
            primitive_error(&[a.clone(), m.clone()], |t, v| {
                t.matmul(v[0], v[1]).unwrap()
            }),
        ),
        (
            "matvec".into(),
            primitive_error(&[a.clone(), col.clone()], |t, v| {
                t.matvec(v[0], v[1]).unwrap()
            }),
        ),
        (
            "scale".into(),
            primitive_error(&[a.clone()], |t, v| t.scale(v[0], -1.7)),
        ),
        (
            "add_scalar".into(),
            primitive_error(&[a.clone()], |t, v| t.add_scalar(v[0], 0.4)),
        ),
        (
            "exp".into(),
            primitive_error(&[a.clone()], |t, v| t.exp(v[0])),
        ),
        (
            "log".into(),
            primitive_error(&[pos.clone()], |t, v| t.log(v[0]).unwrap()),
        ),
        (
            "tanh".into(),
            primitive_error(&[a.clone()], |t, v| t.tanh(v[0])),
        ),
        (
            "softplus".into(),
            primitive_error(&[a.clone()], |t, v| t.softplus(v[0])),
        ),
        (
            "neg".into(),
            primitive_error(&[a.clone()], |t, v| t.neg(v[0])),
        ),
        (
            "square".into(),
            primitive_error(&[a.clone()], |t, v| t.square(v[0])),
        ),
        (
            "sum".into(),
            primitive_error(&[a.clone()], |t, v| t.sum(v[0])),
        ),
        (
            "mean".into(),
            primitive_error(&[a.clone()], |t, v| t.mean(v[0])),
        ),
        (
            "sum_rows".into(),
            primitive_error(&[a.clone()], |t, v| t.sum_rows(v[0])),
        ),
        (
            "logsumexp_rows".into(),
            primitive_error(&[a.clone()], |t, v| t.logsumexp_rows(v[0])),
        ),
        (
            "slice_cols".into(),
            primitive_error(&[a.clone()], |t, v| t.slice_cols(v[0], 1, 3).unwrap()),
        ),
        (
            "concat_cols".into(),
            primitive_error(&[a.clone(), b.clone()], |t, v| {
                t.concat_cols(&[v[0], v[1]]).unwrap()
            }),
        ),
        (
            "repeat_rows".into(),
            primitive_error(&[row.clone()], |t, v| t.repeat_rows(v[0], 3).unwrap()),
        ),
        (
            "clamp".into(),
            primitive_error(&[spread.clone()], |t, v| t.clamp(v[0], -1.0, 1.0)),
        ),
        (
            "soft_clamp".into(),
            primitive_error(&[spread.clone()], |t, v| t.soft_clamp(v[0], 1.5)),
        ),
        (
            "affine".into(),
            primitive_error(&[a.clone(), m.clone(), gaussian(&mut rng, 1, 2)], |t, v| {
                t.affine(v[0], v[1], v[2]).unwrap()
            }),
        ),
    ];
    let r = Array2::from_shape_fn((3, 4), |(i, j)| -3.0 + 0.5 * (4 * i + j) as f64);
    for k in Kernel::ALL {
        for term in [Term::Data, Term::Generated] {
            cases.push((
                format!("composite {k} {term:?}"),
                primitive_error(&[r.clone()], |t, v| t.composite(v[0], k, term)),
            ));
        }
    }

    let spec = ModelSpec {
        latent_dim: 2,
        hidden: vec![6],
        flow_layers: 2,
        flow_hidden: vec![6],
        mixture_components: 2,
    };
    let mut model = FgmModel::new(&spec, 2, 5).unwrap();
    for id in model.store.ids().collect::<Vec<_>>() {
        let v = model.store.value(id).mapv(|_| rng.random_range(-0.4..0.4));
        model.store.set(id, v).unwrap();
    }
    let data = gaussian(&mut rng, 8, 2);
    let noise = LmNoise::sample(8, 2, 2, &mut rng);
    for k in Kernel::ALL {
        let (_, grads) = lm_gradients(k, &model, &data, &noise).unwrap();
        let mut worst: f64 = 0.0;
        for id in model.store.ids() {
            let base = model.store.value(id).clone();
            for idx in 0..base.len() {
                let (i, j) = (idx / base.ncols(), idx % base.ncols());
                let mut probe = model.clone();
                probe.store.value_mut(id)[[i, j]] = base[[i, j]] + 1e-5;
                let up = estimate_lm_with_noise(k, &probe, &data, &noise)
                    .unwrap()
                    .total;
                probe.store.value_mut(id)[[i, j]] = base[[i, j]] - 1e-5;
                let down = estimate_lm_with_noise(k, &probe, &data, &noise)
                    .unwrap()
                    .total;
                let fd = (up - down) / 2e-5;
                let a = grads.get(id)[[i, j]];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-2));
            }
        }
        cases.push((format!("L^M {k}"), worst));
    }

    let elapsed = start.elapsed();
    let (name, worst) =
        cases.iter().cloned().fold(
            (String::new(), 0.0),
            |acc, c| if c.1 > acc.1 { c } else { acc },
        );
    let pass = worst <= 1e-4 && elapsed < Duration::from_secs(30);
    report(
        2,
        "gradients",
        pass,
        &format!(
            "{} cases, worst relative error {worst:.2e} ({name})",
            cases.len()
        ),
        elapsed,
    );
    for (n, e) in &cases {
        assert!(*e <= 1e-4, "{n}: {e}");
    }
    assert!(pass);
}

#[test]
fn criterion_3_lower_bound() {
    outcome_criterion(3, "lm_below_lv", Duration::from_secs(300), || {
        lower_bound_suite(&default_target(), &CheckConfig::default()).unwrap()
    });
}

#[test]
fn criterion_4_kl_decoupling() {
    outcome_criterion(4, "kl_decoupling", Duration::from_secs(180), || {
        kl_decoupling_suite(&default_target(), &CheckConfig::default()).unwrap()
    });
}

#[test]
fn criterion_5_fgan_equality() {
    outcome_criterion(5, "fgan_equality", Duration::from_secs(300), || {
        fgan_equality_suite(&default_target(), &CheckConfig::default()).unwrap()
    });
}

#[test]
fn criterion_6_stationarity() {
    outcome_criterion(6, "optimum_stationarity", Duration::from_secs(60), || {
        stationarity_check(&default_target(), &CheckConfig::default()).unwrap()
    });
}

fn ring_run(kernel: Kernel, seed: u64) -> (Vec<MetricsRow>, f64, usize, f64) {
    let mix = ring_mixture(8, 2.0, 0.05).unwrap();
    let x = mix.sample_n(10_000, &mut ChaCha8Rng::seed_from_u64(seed));
    let model = FgmModel::new(&ModelSpec::default(), 2, seed).unwrap();
    let cfg = TrainConfig {
        kernel,
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, model, &x, Some(mix.clone())).unwrap();
    let rows = trainer.run(&mut |_, _| Ok(())).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (samples, _) = trainer
        .model()
        .sample_generator(5000, &mut ChaCha8Rng::seed_from_u64(seed + 1000))
        .unwrap();
    let cov = mode_coverage(&mix, &samples).unwrap();
    (rows, secs, cov.covered, cov.high_quality_fraction)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_7_ring_kl_coverage() {
    let start = Instant::now();
    let mut covered = Vec::new();
    let mut hq = Vec::new();
    let mut per_seed = Vec::new();
    for seed in 0..3 {
        let (rows, secs, c, h) = ring_run(Kernel::Kl, seed);
        let last = rows.last().unwrap();
        assert_eq!(last.iteration, 20_000);
        covered.push(c as f64);
        hq.push(h);
        per_seed.push(format!("seed {seed}: {c}/8 modes, hq {h:.3}, {secs:.0}s"));
    }
    let (mc, mh) = (median(covered), median(hq));
    let pass = mc >= 7.0 && mh >= 0.5;
    report(
        7,
        "ring_kl_coverage",
        pass,
        &format!(
            "median {mc}/8 modes, median hq {mh:.3}; {}",
            per_seed.join("; ")
        ),
        start.elapsed(),
    );
    assert!(
        pass,
        "median coverage {mc}, median high-quality fraction {mh}"
    );
}

#[test]
fn criterion_7_ring_js_diagnostics() {
    let start = Instant::now();
    let (rows, _, c, h) = ring_run(Kernel::JensenShannon, 0);
    let finite = rows.iter().all(MetricsRow::all_finite)
        && rows.iter().all(|r| r.logp_eta_holdout.is_some());
    let report_ = diagnose_collapse(&rows, 4, DEFAULT_COLLAPSE_THRESHOLD);
    let pass = finite && rows.last().map(|r| r.iteration) == Some(20_000);
    report(
        7,
        "ring_js_completes",
        pass,
        &format!(
            "{} rows finite={finite}, final {c}/8 modes hq {h:.3}, {} collapse flags",
            rows.len(),
            report_.events.len()
        ),
        start.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_7_collapse_fixture() {
    let start = Instant::now();
    let row = |i: u64, lp: f64| MetricsRow {
        iteration: 500 * i,
        lm_total: 0.2,
        term1: 0.7,
        term2: 0.5,
        logp_eta_holdout: Some(lp),
        mode_coverage: Some(if lp > -1.5 { 8 } else { 1 }),
        high_quality_fraction: Some(0.6),
        gnorm_theta: 1.0,
        gnorm_phi: 1.0,
        gnorm_eta: 1.0,
        wall_ms: 0,
    };
    let injected: Vec<MetricsRow> = (1..=40)
        .map(|i| row(i, if i < 23 { -1.0 } else { -3.0 }))
        .collect();
    let steady: Vec<MetricsRow> = (1..=40).map(|i| row(i, -1.0)).collect();
    let improving: Vec<MetricsRow> = (1..=40).map(|i| row(i, -4.0 + 0.1 * i as f64)).collect();
    let hit = diagnose_collapse(&injected, 4, DEFAULT_COLLAPSE_THRESHOLD);
    let pass = hit.events.len() == 1
        && hit.events[0].iteration == 500 * 23
        && !diagnose_collapse(&steady, 4, DEFAULT_COLLAPSE_THRESHOLD).flagged()
        && !diagnose_collapse(&improving, 4, DEFAULT_COLLAPSE_THRESHOLD).flagged();
    report(
        7,
        "collapse_fixture",
        pass,
        &format!(
            "events {:?}",
            hit.events.iter().map(|e| e.iteration).collect::<Vec<_>>()
        ),
        start.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_8_flow() {
    let start = Instant::now();
    let mut worst_inv: f64 = 0.0;
    let mut worst_mass: f64 = 0.0;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let flow = FlowDensityEstimator::new(&mut store, 2, 4, &[8], &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let v = store.value(id).mapv(|_| rng.random_range(-0.5..0.5));
            store.set(id, v).unwrap();
        }
        let u = gaussian(&mut rng, 200, 2).mapv(|v| 3.0 * v);
        let mut t = Tape::with_store(&store);
        let uv = t.constant(u.clone());
        let x = flow.forward(&mut t, uv).unwrap();
        let (back, _) = flow.inverse(&mut t, x).unwrap();
        worst_inv = worst_inv.max(
            (t.value(back) - &u)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs())),
        );

        let (n, half) = (600usize, 20.0);
        let h = 2.0 * half / n as f64;
        let pts = Array2::from_shape_fn((n * n, 2), |(r, j)| {
            -half + h * (if j == 0 { r / n } else { r % n } as f64 + 0.5)
        });
        let mut t = Tape::with_store(&store);
        let pv = t.constant(pts);
        let lp = flow.log_prob(&mut t, pv).unwrap();
        let mass: f64 = t.value(lp).iter().map(|v| v.exp()).sum::<f64>() * h * h;
        worst_mass = worst_mass.max((mass - 1.0).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst_inv <= 1e-9 && worst_mass <= 1e-3 && elapsed < Duration::from_secs(60);
    report(
        8,
        "flow",
        pass,
        &format!("max inversion error {worst_inv:.2e}, max |mass - 1| {worst_mass:.2e}"),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_9_determinism() {
    let start = Instant::now();
    let mix = ring_mixture(8, 2.0, 0.05).unwrap();
    let x = mix.sample_n(2000, &mut ChaCha8Rng::seed_from_u64(9));
    let csv = || {
        let model = FgmModel::new(&ModelSpec::default(), 2, 9).unwrap();
        let cfg = TrainConfig {
            iterations: 60,
            eval_every: 20,
            seed: 9,
            coverage_samples: 1000,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(cfg, model, &x, Some(mix.clone())).unwrap();
        let rows = trainer.run(&mut |_, _| Ok(())).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        buf
    };
    let (a, b) = (csv(), csv());
    let pass = a == b && a.iter().filter(|&&c| c == b'\n').count() == 4;
    report(
        9,
        "determinism",
        pass,
        &format!("{} bytes of metrics CSV, identical={}", a.len(), a == b),
        start.elapsed(),
    );
    assert!(pass);
}
