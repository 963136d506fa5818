use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dtm::autodiff::{grad_check as check_gradients, Parameter};
use dtm::checkpoint::Checkpoint;
use dtm::data::{nll_scale_correction, Dataset, Fold, FoldSource, FoldSplit, Scaler, ToyGenerator};
use dtm::eval::{benchmark_run, cpd_export, evaluate_folds, CpdGrid, GridSpec};
use dtm::flow::{AnyModel, DensityModel};
use dtm::training::{auto_l2, fit_logged, loss_and_gradients, FitResult, TrainConfig, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::config::{
    check_writable_dir, parse_quantiles, Needs, Overrides, RunConfig, DEFAULT_FOLDS,
};
use crate::manifest::{input_hashes, Manifest};
use crate::CliError;

const GRAD_TOLERANCE: f64 = 1e-5;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl serde::Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("value serializes")
    );
}

fn dataset_name(config: &RunConfig) -> String {
    match (&config.data.path, &config.data.toy) {
        (Some(p), _) => p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string()),
        (None, Some(t)) => t.clone(),
        (None, None) => "data".into(),
    }
}

fn resolve_l2(train: &TrainConfig, n: usize) -> TrainConfig {
    TrainConfig {
        l2: Some(train.l2.unwrap_or_else(|| auto_l2(n))),
        ..train.clone()
    }
}

pub fn gen_toy(name: &str, n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let generator: ToyGenerator = name.parse()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(CliError::Config(vec![format!(
                "output directory {} does not exist",
                parent.display()
            )]));
        }
    }
    generator.generate(n, seed).write_csv(out)?;
    println!("{}: {}", generator.name(), generator.description());
    println!("wrote {n} rows to {}", out.display());
    Ok(())
}

fn fit_to_file(
    model: &mut AnyModel,
    data: &Dataset,
    config: &TrainConfig,
    log_path: &Path,
) -> Result<FitResult, CliError> {
    let file =
        File::create(log_path).map_err(|e| CliError::Io(format!("{}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(file);
    let result = fit_logged(model, data, config, Some(&mut log as &mut dyn Write));
    log.flush()
        .map_err(|e| CliError::Io(format!("{}: {e}", log_path.display())))?;
    Ok(result?)
}

pub fn train(config_path: Option<&Path>, overrides: &Overrides) -> Result<(), CliError> {
    let config = RunConfig::resolve(
        config_path,
        overrides,
        Needs {
            data: true,
            out: true,
        },
    )?;
    let data = config.load_data()?;
    let inputs = input_hashes(&config)?;
    let scaler = Scaler::fit(&data)?;
    let scaled = scaler.apply(&data)?;
    let train_config = resolve_l2(&config.train, data.len());
    // surface configuration problems before anything is written
    AnyModel::new(config.model.clone(), data.n_features())?;

    let out = config.out.clone().expect("validated");
    create_dir(&out)?;
    let mut outputs = Vec::new();
    let (train_config, selected) = if train_config.refit_on_full {
        let probe_log = out.join("probe_log.ndjson");
        let mut probe = AnyModel::new(config.model.clone(), data.n_features())?;
        let probed = fit_to_file(&mut probe, &scaled, &train_config, &probe_log)?;
        outputs.push(probe_log);
        let best = probed.best_val_iteration.unwrap_or(train_config.iterations);
        (train_config.refit(best), Some(best))
    } else {
        (train_config, None)
    };
    let log_path = out.join("train_log.ndjson");
    let mut model = AnyModel::new(config.model.clone(), data.n_features())?;
    let fitted = fit_to_file(&mut model, &scaled, &train_config, &log_path)?;
    outputs.push(log_path);

    let checkpoint_path = out.join("checkpoint.json");
    Checkpoint::capture(&model, Some(&scaler))?.save(&checkpoint_path)?;
    outputs.push(checkpoint_path);

    let results = json!({
        "rows": data.len(),
        "features": data.n_features(),
        "final_train_nll_scaled": fitted.final_train_nll,
        "final_train_nll": fitted.final_train_nll + nll_scale_correction(&scaler),
        "best_val_iteration": fitted.best_val_iteration,
        "selected_iterations": selected,
        "skipped_steps": fitted.skipped_steps,
        "l2": fitted.l2,
        "batch_size": fitted.batch_size,
    });
    let manifest_path = out.join("manifest.json");
    outputs.push(manifest_path.clone());
    let mut echoed = config.clone();
    echoed.train = train_config;
    Manifest::new("train", &echoed, inputs, outputs, results.clone()).write(&manifest_path)?;
    print_json(&results);
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, AnyModel, Scaler), CliError> {
    let checkpoint = Checkpoint::load(path)?;
    let model = checkpoint.restore()?;
    let scaler = match &checkpoint.scaler {
        Some(s) => s.clone(),
        None => {
            log::warn!(
                "{}: no scaler stored; scoring on the raw scale",
                path.display()
            );
            Scaler::identity(checkpoint.input_dim)
        }
    };
    Ok((checkpoint, model, scaler))
}

fn check_dim(data_dim: usize, model_dim: usize) -> Result<(), CliError> {
    if data_dim == model_dim {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "data has {data_dim} features, the checkpoint expects {model_dim}"
        )))
    }
}

pub fn evaluate(
    checkpoint: &Path,
    config_path: Option<&Path>,
    overrides: &Overrides,
) -> Result<(), CliError> {
    let needs = Needs {
        data: true,
        out: overrides.out.is_some(),
    };
    let config = RunConfig::resolve(config_path, overrides, needs)?;
    let (_, model, scaler) = load_model(checkpoint)?;
    let data = config.load_data()?;
    check_dim(data.n_features(), model.input_dim())?;
    let folds = match config.fold_split(data.len(), None)? {
        Some(f) => f,
        None => FoldSplit {
            n: data.len(),
            folds: vec![Fold {
                train: Vec::new(),
                test: (0..data.len()).collect(),
            }],
            source: FoldSource::File {
                path: PathBuf::from("<all rows>"),
            },
        },
    };
    let report = evaluate_folds(&dataset_name(&config), &model, &scaler, &data, &folds)?;
    if let Some(out) = &config.out {
        let mut inputs = input_hashes(&config)?;
        inputs.push(crate::manifest::InputHash {
            path: checkpoint.to_path_buf(),
            sha256: crate::manifest::blob_hash(checkpoint)?,
        });
        create_dir(out)?;
        let report_path = out.join("report.json");
        write_json(&report_path, &report)?;
        let manifest_path = out.join("manifest.json");
        let results =
            json!({ "mean_test_nll": report.mean_test_nll, "std_error": report.std_error });
        Manifest::new(
            "evaluate",
            &config,
            inputs,
            vec![report_path, manifest_path.clone()],
            results,
        )
        .write(&manifest_path)?;
    }
    print_json(&report);
    Ok(())
}

fn parse_row(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|t| {
            let v: f64 = t
                .trim()
                .parse()
                .map_err(|_| format!("--x `{text}`: `{t}` is not a number"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("--x `{text}`: non-finite value"))
            }
        })
        .collect()
}

pub fn predict_cpd(
    checkpoint: &Path,
    rows: &[String],
    out: &Path,
    quantiles: &str,
    points: usize,
    range: Option<&str>,
) -> Result<(), CliError> {
    let mut problems = Vec::new();
    let parsed: Vec<Vec<f64>> = rows
        .iter()
        .filter_map(|r| parse_row(r).map_err(|e| problems.push(e)).ok())
        .collect();
    let levels = match parse_quantiles(quantiles) {
        Ok(l) => {
            for &q in &l {
                if !(q > 0.0 && q < 1.0) {
                    problems.push(format!(
                        "quantile level {q} must lie strictly between 0 and 1"
                    ));
                }
            }
            l
        }
        Err(e) => {
            problems.push(format!("--quantiles: {e}"));
            Vec::new()
        }
    };
    if points < 2 {
        problems.push(format!("--points must be at least 2, got {points}"));
    }
    let range = match range.map(parse_quantiles) {
        None => None,
        Some(Ok(v)) if v.len() == 2 && v[0] < v[1] && v.iter().all(|x| x.is_finite()) => {
            Some((v[0], v[1]))
        }
        Some(_) => {
            problems.push("--range must be `lo,hi` with lo < hi".into());
            None
        }
    };
    problems.extend(check_writable_dir(out));
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }

    let (_, model, scaler) = load_model(checkpoint)?;
    for row in &parsed {
        check_dim(row.len(), model.input_dim())?;
    }
    let spec = GridSpec { points, range };
    let grids: Vec<CpdGrid> = parsed
        .iter()
        .map(|x| cpd_export(&model, &scaler, x, &spec, &levels))
        .collect::<Result<_, _>>()?;

    create_dir(out)?;
    let mut summary = Vec::new();
    for (i, grid) in grids.iter().enumerate() {
        let csv = out.join(format!("cpd_{i:03}.csv"));
        let sidecar = out.join(format!("cpd_{i:03}.json"));
        grid.write_csv(&csv)?;
        grid.write_quantiles_json(&sidecar)?;
        summary.push(json!({
            "x": grid.x,
            "csv": csv,
            "quantiles_file": sidecar,
            "mass": grid.mass,
            "modes": grid.modes(),
            "quantiles": grid.quantiles,
        }));
    }
    print_json(&summary);
    Ok(())
}

pub fn benchmark(config_path: Option<&Path>, overrides: &Overrides) -> Result<(), CliError> {
    let config = RunConfig::resolve(
        config_path,
        overrides,
        Needs {
            data: true,
            out: true,
        },
    )?;
    let data = config.load_data()?;
    let folds = config
        .fold_split(data.len(), Some(DEFAULT_FOLDS))?
        .expect("default fold count");
    let inputs = input_hashes(&config)?;
    AnyModel::new(config.model.clone(), data.n_features())?;

    let out = config.out.clone().expect("validated");
    create_dir(&out)?;
    let report = benchmark_run(
        &dataset_name(&config),
        &data,
        &folds,
        &config.model,
        &config.train,
        config.jobs,
    )?;
    let report_path = out.join("report.json");
    write_json(&report_path, &report)?;
    let manifest_path = out.join("manifest.json");
    let results = json!({
        "mean_test_nll": report.mean_test_nll,
        "std_error": report.std_error,
        "n_failed": report.n_failed,
    });
    Manifest::new(
        "benchmark",
        &config,
        inputs,
        vec![report_path, manifest_path.clone()],
        results,
    )
    .write(&manifest_path)?;
    match (report.mean_test_nll, report.std_error) {
        (Some(m), Some(se)) => println!(
            "{}: test NLL {m:.4} +- {se:.4} over {} folds",
            report.dataset,
            report.folds.len() - report.n_failed
        ),
        _ => println!("{}: no fold succeeded", report.dataset),
    }
    if report.n_failed > 0 {
        return Err(CliError::Diverged(format!(
            "{} of {} folds failed; see {}",
            report.n_failed,
            report.folds.len(),
            out.join("report.json").display()
        )));
    }
    Ok(())
}

pub fn grad_check(
    config_path: Option<&Path>,
    overrides: &Overrides,
    rows: usize,
    jitter: f64,
) -> Result<(), CliError> {
    let needs = Needs {
        data: true,
        out: overrides.out.is_some(),
    };
    let config = RunConfig::resolve(config_path, overrides, needs)?;
    let mut problems = Vec::new();
    if rows == 0 {
        problems.push("--rows must be positive".to_string());
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        problems.push(format!("--jitter must be non-negative, got {jitter}"));
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let data = config.load_data()?;
    let scaled = Scaler::fit(&data)?.apply(&data)?;
    let batch = scaled.select(&(0..rows.min(data.len())).collect::<Vec<_>>());
    let l2 = resolve_l2(&config.train, data.len()).l2.expect("resolved");

    let mut model = AnyModel::new(config.model.clone(), data.n_features())?;
    if jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.model.seed);
        let normal = Normal::new(0.0, jitter).expect("valid deviation");
        for p in model.parameters_mut() {
            for v in p.tensor.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let start: Vec<Parameter> = model.parameters().into_iter().cloned().collect();
    let report = check_gradients(&start, 1e-6, |params| -> Result<_, TrainError> {
        for p in model.parameters_mut() {
            if let Some(v) = params.iter().find(|q| q.id == p.id) {
                p.tensor = v.tensor.clone();
            }
        }
        let eval = loss_and_gradients(&model, &batch.x, &batch.y, l2)?;
        Ok((eval.loss, eval.gradients))
    })?;
    let pass = report.max_rel_error < GRAD_TOLERANCE;
    let result = json!({
        "rows": batch.len(),
        "l2": l2,
        "tolerance": GRAD_TOLERANCE,
        "pass": pass,
        "report": report,
    });
    if let Some(out) = &config.out {
        create_dir(out)?;
        write_json(&out.join("grad_check.json"), &result)?;
    }
    print_json(&result);
    if pass {
        Ok(())
    } else {
        Err(CliError::Other(format!(
            "gradient check failed: max relative error {:.3e} >= {GRAD_TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}
