//! Acceptance suite: one PASS/FAIL/UNVERIFIED line per criterion.
//!
//! Run everything with `cargo test -p dtm-core --test acceptance`, or a
//! subset by number: `... --test acceptance -- 4 7`. Criteria whose data
//! files are absent are reported as UNVERIFIED.
//!
//! The suite is a report: it exits 0 after printing every line unless
//! `--strict` is passed (or `DTM_ACCEPTANCE_STRICT=1` is set), in which case
//! any FAIL makes it exit 1.

use std::path::PathBuf;
use std::time::Instant;

use dtm::autodiff::{grad_check, Parameter, Tensor};
use dtm::bernstein::{monotone_from_unconstrained, poly_eval, MonotoneCoefficients};
use dtm::data::{
    gen_heteroscedastic_gaussian, gen_toy_bimodal, gen_toy_sinusoidal, load_csv, split_folds,
    Dataset, Scaler, TargetColumn, ToyGenerator,
};
use dtm::eval::{benchmark_run, cpd_export, test_nll, BenchmarkReport, GridSpec};
use dtm::flow::{
    cdf, log_density, quantile, transform, AnyModel, BaseDistribution, DensityModel, ModelConfig,
    ModelKind, TransformParams,
};
use dtm::training::{fit, loss_and_gradients, mean_nll, TrainConfig, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const BASE: BaseDistribution = BaseDistribution::StandardNormal;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Unverified,
}

struct Check {
    status: Status,
    detail: String,
}

impl Check {
    fn new(ok: bool, detail: String) -> Self {
        let status = if ok { Status::Pass } else { Status::Fail };
        Self { status, detail }
    }
}

/// Combines sub-checks: any failure fails, otherwise any unverified part
/// leaves the criterion unverified.
fn combine(parts: Vec<Check>) -> Check {
    let status = if parts.iter().any(|c| c.status == Status::Fail) {
        Status::Fail
    } else if parts.iter().any(|c| c.status == Status::Unverified) {
        Status::Unverified
    } else {
        Status::Pass
    };
    let detail = parts
        .iter()
        .map(|c| {
            let tag = match c.status {
                Status::Pass => "ok",
                Status::Fail => "FAILED",
                Status::Unverified => "unverified",
            };
            format!("{} [{tag}]", c.detail)
        })
        .collect::<Vec<_>>()
        .join("; ");
    Check { status, detail }
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/uci")
}

fn train_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        log_every: 100,
        ..TrainConfig::default()
    }
}

fn scaled(data: &Dataset) -> (Scaler, Dataset) {
    let scaler = Scaler::fit(data).expect("scaler");
    let d = scaler.apply(data).expect("scaled");
    (scaler, d)
}

fn jitter(model: &mut dyn DensityModel, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).unwrap();
    for p in model.parameters_mut() {
        for v in p.tensor.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
}

// 1 ------------------------------------------------------------------------

fn gradient_fidelity() -> Check {
    let mut worst: f64 = 0.0;
    let mut cases = Vec::new();
    for order in [1usize, 10, 20] {
        for kind in [ModelKind::DlMlt, ModelKind::Ltm] {
            let seed = order as u64;
            let config = ModelConfig {
                kind,
                order,
                hidden_layers: vec![6],
                seed,
                ..ModelConfig::default()
            };
            let mut model = AnyModel::new(config, 2).unwrap();
            jitter(&mut model, 0.3, seed + 100);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
            let xs: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let x = Tensor::new(8, 2, xs).unwrap();
            let y: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.2..1.2)).collect();
            let start: Vec<Parameter> = model.parameters().into_iter().cloned().collect();
            let report = grad_check(&start, 1e-6, |params| -> Result<_, TrainError> {
                for p in model.parameters_mut() {
                    p.tensor = params.iter().find(|q| q.id == p.id).unwrap().tensor.clone();
                }
                let eval = loss_and_gradients(&model, &x, &y, 0.01)?;
                Ok((eval.loss, eval.gradients))
            })
            .unwrap();
            worst = worst.max(report.max_rel_error);
            cases.push(format!("{kind:?}/M={order}: {:.1e}", report.max_rel_error));
        }
    }
    Check::new(
        worst < 1e-5,
        format!(
            "max relative error {worst:.2e} < 1e-5 ({})",
            cases.join(", ")
        ),
    )
}

// 2 ------------------------------------------------------------------------

/// Random parameters whose attainable `z` range covers at least (-7.5, 7.5).
fn random_params(rng: &mut ChaCha8Rng, order: usize) -> TransformParams {
    let gamma: Vec<f64> = (0..=order).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let theta = monotone_from_unconstrained(&gamma).unwrap();
    let mid = 0.5 * (theta.first() + theta.last());
    let spread = 20.0 / (theta.last() - theta.first());
    let scaled: Vec<f64> = theta
        .as_slice()
        .iter()
        .map(|t| (t - mid) * spread)
        .collect();
    TransformParams::new(
        rng.gen_range(0.5..3.0),
        rng.gen_range(-1.0..1.0),
        MonotoneCoefficients::new(scaled).unwrap(),
        rng.gen_range(0.8..1.5),
        rng.gen_range(-0.5..0.5),
    )
    .unwrap()
}

/// Composite Simpson rule of the density over the `u = a y - b` window
/// [-40, 40], which contains all attainable mass to double precision.
fn integrate_density(p: &TransformParams) -> f64 {
    let n = 40_000;
    let lo = (-40.0 + p.b) / p.a;
    let hi = (40.0 + p.b) / p.a;
    let h = (hi - lo) / n as f64;
    let f = |y: f64| log_density(p, y, BASE).map(f64::exp).unwrap_or(0.0);
    let mut sum = f(lo) + f(hi);
    for k in 1..n {
        sum += f(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

fn density_validity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let orders = [1usize, 2, 5, 10, 20];
    let (mut mass_err, mut mono_fail, mut rt_err): (f64, usize, f64) = (0.0, 0, 0.0);
    let mut attain_err: f64 = 0.0;
    for i in 0..50 {
        let p = random_params(&mut rng, orders[i % orders.len()]);
        let mass = integrate_density(&p);
        mass_err = mass_err.max((mass - 1.0).abs());
        let (z_lo, z_hi) = p.z_range();
        attain_err = attain_err.max((mass - (BASE.cdf(z_hi) - BASE.cdf(z_lo))).abs());

        // 1000-point grid over u in [-15, 15]
        let grid: Vec<f64> = (0..1000)
            .map(|k| (-15.0 + 30.0 * k as f64 / 999.0 + p.b) / p.a)
            .collect();
        let z: Vec<f64> = grid.iter().map(|&y| transform(&p, y)).collect();
        if !z.windows(2).all(|w| w[1] > w[0]) {
            mono_fail += 1;
        }

        for k in 0..=40 {
            let prob = 1e-6 + (1.0 - 2e-6) * k as f64 / 40.0;
            let q = quantile(&p, prob, BASE, (0.0, 1.0)).unwrap();
            rt_err = rt_err.max((cdf(&p, q, BASE) - prob).abs());
        }
    }
    Check::new(
        mass_err < 1e-3 && mono_fail == 0 && rt_err <= 1e-6,
        format!(
            "50 parameter sets: max |mass - 1| = {mass_err:.1e} (< 1e-3, agrees with attainable \
             base mass to {attain_err:.1e}); non-monotone grids: {mono_fail}; max cdf/quantile \
             round-trip error {rt_err:.1e} (<= 1e-6)"
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn affine_order_one() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t0: f64 = rng.gen_range(-5.0..5.0);
        let theta = MonotoneCoefficients::new(vec![t0, t0 + rng.gen_range(1e-3..10.0)]).unwrap();
        let mut t: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        t.sort_by(f64::total_cmp);
        let h: Vec<f64> = t.iter().map(|&v| poly_eval(&theta, v).unwrap()).collect();
        let residual = (h[2] - h[0]) * (t[1] - t[0]) - (h[1] - h[0]) * (t[2] - t[0]);
        worst = worst.max(residual.abs());
    }
    Check::new(
        worst < 1e-12,
        format!("max three-point collinearity residual over 1000 draws {worst:.1e} (< 1e-12)"),
    )
}

// 4 ------------------------------------------------------------------------

fn heteroscedastic_recovery() -> Check {
    let train = gen_heteroscedastic_gaussian(2000, 41);
    let test = gen_heteroscedastic_gaussian(2000, 42);
    let (scaler, d) = scaled(&train);
    let config = ModelConfig {
        order: 1,
        seed: 4,
        ..ModelConfig::default()
    };
    let mut model = AnyModel::new(config, 1).unwrap();
    if let Err(e) = fit(&mut model, &d, &train_config(HETERO_ITERATIONS)) {
        return Check::new(false, format!("training failed: {e}"));
    }
    let nll = test_nll(&model, &scaler, &test).unwrap();
    let oracle = ToyGenerator::Heteroscedastic.nll(&test);
    Check::new(
        (nll - oracle).abs() <= 0.05,
        format!(
            "M=1 test NLL {nll:.4} vs analytic {oracle:.4}: |gap| = {:.4} (<= 0.05)",
            (nll - oracle).abs()
        ),
    )
}

const HETERO_ITERATIONS: usize = 3000;

// 5 ------------------------------------------------------------------------

fn toy_ordering() -> Check {
    let data = gen_toy_sinusoidal(2000, 51);
    let (_, d) = scaled(&data);
    let train_nll = |kind| {
        let config = ModelConfig {
            kind,
            order: 10,
            seed: 5,
            ..ModelConfig::default()
        };
        let mut model = AnyModel::new(config, 1).unwrap();
        fit(&mut model, &d, &train_config(TOY_ITERATIONS)).map(|_| mean_nll(&model, &d))
    };
    let ordering = match (train_nll(ModelKind::DlMlt), train_nll(ModelKind::Ltm)) {
        (Ok(deep), Ok(ltm)) => Check::new(
            ltm - deep >= 0.8,
            format!(
                "sinusoidal train NLL (scaled) DL_MLT {deep:.3} vs LTM {ltm:.3}: gap {:.3} (>= 0.8)",
                ltm - deep
            ),
        ),
        (a, b) => Check::new(false, format!("training failed: {a:?} / {b:?}")),
    };

    let data = gen_toy_bimodal(2000, 52);
    let (scaler, d) = scaled(&data);
    let config = ModelConfig {
        order: 10,
        seed: 5,
        ..ModelConfig::default()
    };
    let mut model = AnyModel::new(config, 1).unwrap();
    let bimodal = match fit(&mut model, &d, &train_config(TOY_ITERATIONS)) {
        Err(e) => Check::new(false, format!("bimodal training failed: {e}")),
        Ok(_) => {
            let modes: Vec<Vec<f64>> = [1.0, 4.0]
                .iter()
                .map(|&x| {
                    cpd_export(&model, &scaler, &[x], &GridSpec::default(), &[])
                        .unwrap()
                        .modes()
                })
                .collect();
            let separation = |m: &Vec<f64>| m.last().unwrap_or(&0.0) - m.first().unwrap_or(&0.0);
            let (s1, s4) = (separation(&modes[0]), separation(&modes[1]));
            Check::new(
                modes[0].len() == 2 && modes[1].len() == 2 && s4 > s1,
                format!(
                    "bimodal CPD modes at x=1 {:?}, at x=4 {:?}; separation {s1:.3} < {s4:.3} \
                     (true 1.0 and 2.5)",
                    round3(&modes[0]),
                    round3(&modes[1])
                ),
            )
        }
    };
    combine(vec![ordering, bimodal])
}

const TOY_ITERATIONS: usize = 4000;

fn round3(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}

// 6 ------------------------------------------------------------------------

const UCI_FOLDS: usize = 5;
const UCI_ITERATIONS: usize = 5000;

fn uci_run(
    file: &str,
    target: &str,
    order: usize,
    l2: Option<f64>,
) -> Result<BenchmarkReport, String> {
    let path = data_dir().join(file);
    let data = load_csv(&path, &TargetColumn::from(target)).map_err(|e| e.to_string())?;
    let folds = split_folds(data.len(), UCI_FOLDS, 6).map_err(|e| e.to_string())?;
    let model = ModelConfig {
        order,
        seed: 6,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        l2,
        val_fraction: 0.2,
        refit_on_full: true,
        ..train_config(UCI_ITERATIONS)
    };
    benchmark_run(file, &data, &folds, &model, &train, 1).map_err(|e| e.to_string())
}

fn summarize(r: &BenchmarkReport) -> String {
    format!(
        "{:.3} +- {:.3} over {} folds ({} failed)",
        r.mean_test_nll.unwrap_or(f64::NAN),
        r.std_error.unwrap_or(f64::NAN),
        r.folds.len() - r.n_failed,
        r.n_failed
    )
}

fn uci_bound(
    label: &str,
    file: &str,
    target: &str,
    order: usize,
    l2: Option<f64>,
    ok: impl Fn(f64) -> bool,
    bound: &str,
) -> (Check, Option<f64>) {
    if !data_dir().join(file).exists() {
        return (
            Check {
                status: Status::Unverified,
                detail: format!("{label}: data/uci/{file} not present"),
            },
            None,
        );
    }
    match uci_run(file, target, order, l2) {
        Err(e) => (Check::new(false, format!("{label}: {e}")), None),
        Ok(r) => {
            let mean = r.mean_test_nll;
            let pass = r.n_failed == 0 && mean.is_some_and(&ok);
            (
                Check::new(pass, format!("{label} {} ({bound})", summarize(&r))),
                mean,
            )
        }
    }
}

fn smoke(label: &str, file: &str, target: &str) -> Option<Check> {
    let path = data_dir().join(file);
    if !path.exists() {
        return None;
    }
    let run = || -> Result<BenchmarkReport, String> {
        let data = load_csv(&path, &TargetColumn::from(target)).map_err(|e| e.to_string())?;
        let folds = split_folds(data.len(), 1, 6).map_err(|e| e.to_string())?;
        benchmark_run(
            file,
            &data,
            &folds,
            &ModelConfig::default(),
            &train_config(2000),
            1,
        )
        .map_err(|e| e.to_string())
    };
    Some(match run() {
        Ok(r) => Check::new(
            r.n_failed == 0 && r.mean_test_nll.is_some_and(f64::is_finite),
            format!("{label} 2000-iteration smoke run: {}", summarize(&r)),
        ),
        Err(e) => Check::new(false, format!("{label} smoke run: {e}")),
    })
}

fn uci_reproduction() -> Check {
    let mut parts = Vec::new();
    let (boston, _) = uci_bound(
        "Boston M=10",
        "boston.csv",
        "medv",
        10,
        Some(0.01),
        |m| (2.2..=2.7).contains(&m),
        "in [2.2, 2.7]",
    );
    parts.push(boston);
    let (yacht, _) = uci_bound(
        "Yacht M=10",
        "yacht.csv",
        "last",
        10,
        Some(0.01),
        |m| m <= 0.6,
        "<= 0.6",
    );
    parts.push(yacht);
    let (wine10, m10) = uci_bound(
        "Wine M=10",
        "wine-red.csv",
        "quality",
        10,
        None,
        |m| m <= 0.9,
        "<= 0.90",
    );
    parts.push(wine10);
    let (wine20, m20) = uci_bound(
        "Wine M=20",
        "wine-red.csv",
        "quality",
        20,
        None,
        |_| true,
        "",
    );
    parts.push(wine20);
    match (m10, m20) {
        (Some(a), Some(b)) => parts.push(Check::new(
            a - b >= 0.1,
            format!("Wine M=20 improves on M=10 by {:.3} (>= 0.1)", a - b),
        )),
        _ => parts.push(Check {
            status: Status::Unverified,
            detail: "Wine M=20 vs M=10 comparison unavailable".into(),
        }),
    }
    for (label, file, target) in [
        ("Naval", "naval.csv", "last"),
        ("Protein", "protein.csv", "last"),
    ] {
        if let Some(c) = smoke(label, file, target) {
            parts.push(c);
        }
    }
    combine(parts)
}

// 7 ------------------------------------------------------------------------

fn scale_invariance() -> Check {
    let train = gen_heteroscedastic_gaussian(1000, 71);
    let test = gen_heteroscedastic_gaussian(1000, 72);
    let times_ten = |d: &Dataset| d.scale_y(10.0);
    let run = |train: &Dataset, test: &Dataset| {
        let (scaler, d) = scaled(train);
        let mut model = AnyModel::new(
            ModelConfig {
                order: 5,
                seed: 7,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        fit(&mut model, &d, &train_config(1000)).unwrap();
        test_nll(&model, &scaler, test).unwrap()
    };
    let base = run(&train, &test);
    let tenfold = run(&times_ten(&train), &times_ten(&test));
    let ln10 = 10f64.ln();
    // Under y -> 10 y every density shrinks by 10, so the generator's own NLL
    // rises by exactly ln 10; the reported NLL must track it.
    let oracle = ToyGenerator::Heteroscedastic.nll(&test);
    let oracle_ten = oracle + ln10;
    let drift = ((tenfold - oracle_ten) - (base - oracle)).abs();
    Check::new(
        drift < 0.02,
        format!(
            "test NLL {base:.4} raw vs {tenfold:.4} for 10 y (raw change {:.4}, expected ln 10 = \
             {ln10:.4}); gap to the analytic NLL changes by {drift:.2e} (< 0.02)",
            tenfold - base
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn determinism() -> Check {
    let data = gen_heteroscedastic_gaussian(400, 81);
    let folds = split_folds(data.len(), 3, 8).unwrap();
    let model = ModelConfig {
        order: 6,
        hidden_layers: vec![16],
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        val_fraction: 0.2,
        refit_on_full: true,
        batch_size: dtm::training::BatchSize::Rows(128),
        ..train_config(300)
    };
    let report = |jobs| {
        let r = benchmark_run("det", &data, &folds, &model, &train, jobs).unwrap();
        serde_json::to_string_pretty(&r).unwrap()
    };
    let (a, b, c) = (report(1), report(1), report(2));
    Check::new(
        a == b && a == c,
        format!(
            "three 3-fold runs (jobs 1, 1, 2) give byte-identical JSON reports: {} ({} bytes)",
            a == b && a == c,
            a.len()
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Check);

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strict = args.iter().any(|a| a == "--strict")
        || std::env::var("DTM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 8] = [
        (1, "gradient fidelity", gradient_fidelity),
        (2, "density validity", density_validity),
        (3, "M=1 affine check", affine_order_one),
        (
            4,
            "heteroscedastic Gaussian recovery",
            heteroscedastic_recovery,
        ),
        (5, "toy ordering", toy_ordering),
        (6, "UCI desk-scale reproduction", uci_reproduction),
        (7, "scale invariance", scale_invariance),
        (8, "determinism", determinism),
    ];
    let (mut passed, mut failed, mut unverified) = (0, 0, 0);
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let check = run();
        let status = match check.status {
            Status::Pass => {
                passed += 1;
                "PASS"
            }
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Unverified => {
                unverified += 1;
                "UNVERIFIED"
            }
        };
        println!(
            "criterion {n} ({name}): {status} - {} [{:.1}s]",
            check.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance summary: {passed} passed, {failed} failed, {unverified} unverified");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
