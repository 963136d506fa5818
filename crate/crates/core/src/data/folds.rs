use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldSource {
    Generated { seed: u64 },
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub n: usize,
    pub folds: Vec<Fold>,
    pub source: FoldSource,
}

impl FoldSplit {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }
}

/// Repeated random 90/10 splits: each fold draws its own permutation and
/// holds out `n - round(0.9 n)` rows. Index lists are sorted.
pub fn split_folds(n: usize, n_folds: usize, seed: u64) -> Result<FoldSplit, DataError> {
    if n_folds < 1 {
        return Err(DataError::InvalidFolds(
            "at least one fold is required".into(),
        ));
    }
    let n_test = n - (0.9 * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(DataError::InvalidFolds(format!(
            "{n} rows cannot be split 90/10"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let folds = (0..n_folds)
        .map(|_| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut test = perm[..n_test].to_vec();
            let mut train = perm[n_test..].to_vec();
            test.sort_unstable();
            train.sort_unstable();
            Fold { train, test }
        })
        .collect();
    Ok(FoldSplit {
        n,
        folds,
        source: FoldSource::Generated { seed },
    })
}

/// Reads zero-based test-index lists for a dataset of `n` rows.
///
/// A directory holds one file per fold (files sorted by the number in their
/// name, e.g. `index_test_0.txt`, `index_test_1.txt`); each file lists that
/// fold's test rows separated by whitespace or commas. A single file holds
/// one fold per non-empty line. Training rows are the complement.
pub fn load_folds(path: &Path, n: usize) -> Result<FoldSplit, DataError> {
    let io = |e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut tests = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .filter(|p| {
                let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("");
                !name.starts_with('.') && !name.contains("train")
            })
            .collect();
        files.sort_by_key(|p| (trailing_number(p), p.clone()));
        for file in files {
            let text = std::fs::read_to_string(&file).map_err(|e| DataError::Io {
                path: file.clone(),
                source: e,
            })?;
            let mut indices = Vec::new();
            for (line_no, line) in text.lines().enumerate() {
                indices.extend(parse_indices(line, &file, line_no + 1, n)?);
            }
            tests.push((file, indices));
        }
    } else {
        let text = std::fs::read_to_string(path).map_err(io)?;
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            tests.push((
                path.to_path_buf(),
                parse_indices(line, path, line_no + 1, n)?,
            ));
        }
    }
    if tests.is_empty() {
        return Err(DataError::InvalidFolds(format!(
            "{} contains no fold index lists",
            path.display()
        )));
    }

    let mut folds = Vec::with_capacity(tests.len());
    for (file, mut test) in tests {
        test.sort_unstable();
        let before = test.len();
        test.dedup();
        if test.len() != before {
            return Err(DataError::InvalidFolds(format!(
                "{}: repeated test index",
                file.display()
            )));
        }
        if test.is_empty() || test.len() == n {
            return Err(DataError::InvalidFolds(format!(
                "{}: test set must be a proper non-empty subset",
                file.display()
            )));
        }
        let mut in_test = vec![false; n];
        test.iter().for_each(|&i| in_test[i] = true);
        let train = (0..n).filter(|&i| !in_test[i]).collect();
        folds.push(Fold { train, test });
    }
    Ok(FoldSplit {
        n,
        folds,
        source: FoldSource::File {
            path: path.to_path_buf(),
        },
    })
}

fn parse_indices(
    line: &str,
    file: &Path,
    line_no: usize,
    n: usize,
) -> Result<Vec<usize>, DataError> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|token| {
            // index files exported from numpy sometimes carry a trailing `.0`
            let parsed = token
                .parse::<usize>()
                .ok()
                .or_else(|| match token.parse::<f64>() {
                    Ok(v) if v >= 0.0 && v.fract() == 0.0 => Some(v as usize),
                    _ => None,
                })
                .ok_or_else(|| DataError::MalformedIndex {
                    file: file.to_path_buf(),
                    line: line_no,
                    token: token.to_string(),
                })?;
            if parsed >= n {
                return Err(DataError::IndexOutOfRange {
                    file: file.to_path_buf(),
                    index: parsed,
                    n,
                });
            }
            Ok(parsed)
        })
        .collect()
}

fn trailing_number(path: &Path) -> u64 {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let digits: String = stem
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().unwrap_or(u64::MAX)
}
