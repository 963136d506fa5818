//! Run configuration: a JSON file, `--set key=value` overrides and
//! command-line flags, validated in full before any output is written.

use std::path::{Path, PathBuf};

use dtm::data::{
    load_csv, load_folds, split_folds, Dataset, FoldSplit, TargetColumn, ToyGenerator,
};
use dtm::flow::ModelConfig;
use dtm::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const DEFAULT_FOLDS: usize = 20;

/// Where the rows come from: a CSV file or a toy generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Target column name, or `last`.
    #[serde(default = "default_target")]
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<String>,
    #[serde(default = "default_toy_rows")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_target() -> String {
    "last".into()
}

fn default_toy_rows() -> usize {
    2000
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSpec {
    /// Index files to load; takes precedence over generated folds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_folds: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub folds: FoldSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_quantiles() -> Vec<f64> {
    vec![0.05, 0.5, 0.95]
}

fn default_jobs() -> usize {
    1
}

/// Command-line values layered over the file, after `--set`.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub folds_dir: Option<PathBuf>,
    pub quantiles: Option<Vec<f64>>,
}

/// What a command needs from the configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Needs {
    pub data: bool,
    pub out: bool,
}

pub fn parse_quantiles(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{t}` is not a number"))
        })
        .collect()
}

/// Sets `a.b.c` in a JSON object, creating intermediate objects. The value
/// is parsed as JSON when possible and taken as a string otherwise.
fn apply_set(root: &mut Value, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("--set `{assignment}`: expected key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("--set `{assignment}`: malformed key `{key}`"));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(format!(
                "--set `{assignment}`: `{}` is not an object",
                parts[..i].join(".")
            ));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}

impl RunConfig {
    /// Reads `path` (or starts from `{}`), applies overrides and validates.
    pub fn resolve(
        path: Option<&Path>,
        overrides: &Overrides,
        needs: Needs,
    ) -> Result<Self, CliError> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(vec![format!("{}: {e}", p.display())]))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(vec![format!("{}: {e}", p.display())]))?
            }
            None => Value::Object(Default::default()),
        };
        if !root.is_object() {
            return Err(CliError::Config(
                vec!["config must be a JSON object".into()],
            ));
        }
        let mut problems = Vec::new();
        for s in &overrides.sets {
            if let Err(e) = apply_set(&mut root, s) {
                problems.push(e);
            }
        }
        if !problems.is_empty() {
            return Err(CliError::Config(problems));
        }
        let mut config: RunConfig =
            serde_json::from_value(root).map_err(|e| CliError::Config(vec![e.to_string()]))?;
        if let Some(seed) = overrides.seed {
            config.model.seed = seed;
            config.train.seed = seed;
        }
        if let Some(out) = &overrides.out {
            config.out = Some(out.clone());
        }
        if let Some(jobs) = overrides.jobs {
            config.jobs = jobs;
        }
        if let Some(dir) = &overrides.folds_dir {
            config.folds.path = Some(dir.clone());
        }
        if let Some(q) = &overrides.quantiles {
            config.quantiles = q.clone();
        }
        let problems = config.validate(needs);
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(CliError::Config(problems))
        }
    }

    /// Every problem with the configuration, not just the first.
    pub fn validate(&self, needs: Needs) -> Vec<String> {
        let mut problems = self.model.validate();
        problems.extend(self.train.validate());
        if needs.data {
            match (&self.data.path, &self.data.toy) {
                (Some(_), Some(_)) => {
                    problems.push("data.path and data.toy are mutually exclusive".into())
                }
                (None, None) => problems.push("one of data.path or data.toy is required".into()),
                (Some(p), None) if !p.is_file() => {
                    problems.push(format!("data.path {} does not exist", p.display()))
                }
                (None, Some(name)) => {
                    if let Err(e) = name.parse::<ToyGenerator>() {
                        problems.push(format!("data.toy: {e}"));
                    }
                    if self.data.n == 0 {
                        problems.push("data.n must be positive".into());
                    }
                }
                _ => {}
            }
            if self.data.target.trim().is_empty() {
                problems.push("data.target must not be empty".into());
            }
        }
        if let Some(p) = &self.folds.path {
            if !p.exists() {
                problems.push(format!("folds.path {} does not exist", p.display()));
            }
        }
        if let Some(k) = self.folds.n_folds {
            if k < 1 {
                problems.push("folds.n_folds must be at least 1".into());
            }
        }
        for &q in &self.quantiles {
            if !(q > 0.0 && q < 1.0) {
                problems.push(format!(
                    "quantile level {q} must lie strictly between 0 and 1"
                ));
            }
        }
        if self.jobs == 0 {
            problems.push("jobs must be at least 1".into());
        }
        if needs.out {
            match &self.out {
                None => {
                    problems.push("out is required (set it in the config or pass --out)".into())
                }
                Some(out) => problems.extend(check_writable_dir(out)),
            }
        }
        problems
    }

    pub fn load_data(&self) -> Result<Dataset, CliError> {
        match (&self.data.path, &self.data.toy) {
            (Some(path), _) => Ok(load_csv(
                path,
                &TargetColumn::from(self.data.target.as_str()),
            )?),
            (None, Some(name)) => {
                let generator: ToyGenerator = name.parse()?;
                Ok(generator.generate(self.data.n, self.data.seed))
            }
            (None, None) => Err(CliError::Config(vec!["no data source configured".into()])),
        }
    }

    /// Folds from file when given, otherwise generated; `None` when the
    /// config names neither and `default_folds` is `None`.
    pub fn fold_split(
        &self,
        n: usize,
        default_folds: Option<usize>,
    ) -> Result<Option<FoldSplit>, CliError> {
        if let Some(path) = &self.folds.path {
            return Ok(Some(load_folds(path, n)?));
        }
        match self.folds.n_folds.or(default_folds) {
            Some(k) => Ok(Some(split_folds(n, k, self.folds.seed)?)),
            None => Ok(None),
        }
    }
}

/// An output directory is usable when it is an existing writable directory
/// or can be created under an existing writable ancestor.
pub fn check_writable_dir(out: &Path) -> Vec<String> {
    if out.exists() {
        if !out.is_dir() {
            return vec![format!(
                "out {} exists and is not a directory",
                out.display()
            )];
        }
        return writable(out, out);
    }
    let mut ancestor = out.parent();
    while let Some(a) = ancestor {
        let a = if a.as_os_str().is_empty() {
            Path::new(".")
        } else {
            a
        };
        if a.exists() {
            if !a.is_dir() {
                return vec![format!(
                    "out {}: {} is not a directory",
                    out.display(),
                    a.display()
                )];
            }
            return writable(out, a);
        }
        ancestor = a.parent();
    }
    Vec::new()
}

fn writable(out: &Path, dir: &Path) -> Vec<String> {
    match std::fs::metadata(dir) {
        Ok(m) if m.permissions().readonly() => {
            vec![format!(
                "out {}: {} is read-only",
                out.display(),
                dir.display()
            )]
        }
        Ok(_) => Vec::new(),
        Err(e) => vec![format!("out {}: {e}", out.display())],
    }
}
