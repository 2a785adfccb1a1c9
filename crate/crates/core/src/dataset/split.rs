use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::format::to_json_pretty;

/// Share of the training portion used for fitting; the rest is for
/// validation and calibration.
pub const FIT_SHARE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train_fraction: f64,
    pub train: Vec<usize>,
    pub calval: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.train.len() + self.calval.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn make_split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<Split> {
    split_indices(dataset.len(), train_fraction, seed)
}

/// Random partition of `0..n` into train / calval / test.
///
/// `round(n * train_fraction)` observations form the training portion, of
/// which `round(0.8 * portion)` are used for fitting and the remainder for
/// validation and calibration. Depends only on `(n, train_fraction, seed)`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::validation(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let portion = (n as f64 * train_fraction).round() as usize;
    let n_train = (portion as f64 * FIT_SHARE).round() as usize;
    let n_calval = portion - n_train;
    let n_test = n - portion;
    if n_train == 0 || n_calval == 0 || n_test == 0 {
        return Err(Error::validation(format!(
            "split of {n} observations at fraction {train_fraction} leaves an empty set \
             (train {n_train}, calval {n_calval}, test {n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut train = order[..n_train].to_vec();
    let mut calval = order[n_train..portion].to_vec();
    let mut test = order[portion..].to_vec();
    train.sort_unstable();
    calval.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        seed,
        train_fraction,
        train,
        calval,
        test,
    })
}

/// `split_<seed>_<fraction>.json`
pub fn split_file_name(seed: u64, train_fraction: f64) -> String {
    format!("split_{seed}_{train_fraction}.json")
}

pub fn save_split(split: &Split, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::format::write_file(path, to_json_pretty(split)?.as_bytes())
}

pub fn load_split(path: impl AsRef<Path>) -> Result<Split> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split: Split = serde_json::from_str(&text)?;
    let mut seen = vec![false; split.len()];
    for &id in split.train.iter().chain(&split.calval).chain(&split.test) {
        if id >= seen.len() || std::mem::replace(&mut seen[id], true) {
            return Err(Error::validation(format!(
                "{}: split sets are not a partition of 0..{}",
                path.display(),
                seen.len()
            )));
        }
    }
    Ok(split)
}
