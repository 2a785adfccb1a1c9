//! Split conformal calibration of the quantile heads, one pool per number of
//! interferers, with per-miscoverage-rate head selection.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, MAX_INTERFERERS};
use crate::error::{Error, Result};
use crate::format::{to_json_pretty, write_file};
use crate::model::RuntimeModel;

/// Miscoverage rates 0.10, 0.09, ..., 0.01.
pub fn default_epsilons() -> Vec<f64> {
    (1..=10).rev().map(|k| k as f64 / 100.0).collect()
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::validation(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    Ok(())
}

/// 1-based rank `ceil((n + 1)(1 - epsilon))` of the conformal order statistic.
/// The product is nudged down before rounding so that exact integers such as
/// `10 * 0.9` are not pushed up by representation error.
pub fn conformal_rank(n: usize, epsilon: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - epsilon);
    (x - 1e-9 * x.max(1.0)).ceil().max(1.0) as usize
}

/// The `k`-th smallest residual with `k = ceil((n + 1)(1 - epsilon))`, or
/// `None` when `k > n` and no finite offset gives the guarantee.
pub fn conformal_offset(residuals: &[f64], epsilon: f64) -> Result<Option<f64>> {
    check_epsilon(epsilon)?;
    if residuals.is_empty() {
        return Err(Error::validation("conformal offset needs at least one residual"));
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::validation("residuals must be finite"));
    }
    let k = conformal_rank(residuals.len(), epsilon);
    if k > residuals.len() {
        return Ok(None);
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Some(sorted[k - 1]))
}

/// Mean of `max(bound - actual, 0) / actual`.
pub fn overprovisioning_margin(bounds: &[f64], actuals: &[f64]) -> Result<f64> {
    check_pairs(bounds, actuals)?;
    let sum: f64 = bounds.iter().zip(actuals).map(|(&b, &a)| (b - a).max(0.0) / a).sum();
    Ok(sum / bounds.len() as f64)
}

/// Fraction of actual runtimes that do not exceed their bound.
pub fn empirical_coverage(bounds: &[f64], actuals: &[f64]) -> Result<f64> {
    check_pairs(bounds, actuals)?;
    let covered = bounds.iter().zip(actuals).filter(|(b, a)| a <= b).count();
    Ok(covered as f64 / bounds.len() as f64)
}

fn check_pairs(bounds: &[f64], actuals: &[f64]) -> Result<()> {
    if bounds.len() != actuals.len() {
        return Err(Error::validation(format!(
            "{} bounds but {} actual runtimes",
            bounds.len(),
            actuals.len()
        )));
    }
    if bounds.is_empty() {
        return Err(Error::validation("no runtimes to compare"));
    }
    if actuals.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::validation("actual runtimes must be positive and finite"));
    }
    Ok(())
}

/// Offsets for every head at every miscoverage rate, for one pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolCalibration {
    pub pool: usize,
    pub size: usize,
    /// `[head][epsilon]`; `None` where the pool is too small.
    pub offsets: Vec<Vec<Option<f64>>>,
    /// Calval margin of each calibrated head, `[head][epsilon]`.
    pub margins: Vec<Vec<Option<f64>>>,
    /// `[epsilon]`
    pub selected_head: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub quantiles: Vec<f64>,
    pub epsilons: Vec<f64>,
    /// Present pools in increasing order of interferer count.
    pub pools: Vec<PoolCalibration>,
    /// Route an uncalibrated interferer count to the largest calibrated pool
    /// instead of failing.
    pub fallback_to_largest_pool: bool,
}

/// Calibrate every head on the calval observations of each pool and select the
/// tightest calibrated head per miscoverage rate.
pub fn build_calibration(
    model: &RuntimeModel,
    dataset: &Dataset,
    calval_ids: &[usize],
    epsilons: &[f64],
) -> Result<CalibrationTable> {
    if model.config.mean_mode {
        return Err(Error::validation("quantile-mode model required"));
    }
    if epsilons.is_empty() {
        return Err(Error::validation("at least one epsilon is required"));
    }
    for &e in epsilons {
        check_epsilon(e)?;
    }
    if let Some(&id) = calval_ids.iter().find(|&&id| id >= dataset.len()) {
        return Err(Error::Index(format!("observation {id} >= {}", dataset.len())));
    }
    let by_mode = dataset.ids_by_mode(calval_ids);
    let heads = model.heads();
    let mut pools = Vec::new();
    for (pool, ids) in by_mode.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let obs: Vec<_> = ids.iter().map(|&id| &dataset.observations[id]).collect();
        let queries: Vec<(usize, usize, &[usize])> = obs
            .iter()
            .map(|o| (o.workload, o.platform, o.interference.as_slice()))
            .collect();
        let preds = model.forward_heads(&queries)?;
        let actuals: Vec<f64> = obs.iter().map(|o| o.runtime).collect();

        let mut offsets = vec![vec![None; epsilons.len()]; heads];
        let mut margins = vec![vec![None; epsilons.len()]; heads];
        for h in 0..heads {
            let residuals: Vec<f64> = obs
                .iter()
                .enumerate()
                .map(|(n, o)| o.runtime.ln() - preds.row(n)[h])
                .collect();
            for (e, &eps) in epsilons.iter().enumerate() {
                if let Some(gamma) = conformal_offset(&residuals, eps)? {
                    let bounds: Vec<f64> = (0..obs.len()).map(|n| (preds.row(n)[h] + gamma).exp()).collect();
                    offsets[h][e] = Some(gamma);
                    margins[h][e] = Some(overprovisioning_margin(&bounds, &actuals)?);
                }
            }
        }
        let selected_head = (0..epsilons.len())
            .map(|e| select_head(margins.iter().map(|m| m[e])))
            .collect();
        pools.push(PoolCalibration {
            pool,
            size: obs.len(),
            offsets,
            margins,
            selected_head,
        });
    }
    if pools.is_empty() {
        return Err(Error::validation("calibration set is empty"));
    }
    Ok(CalibrationTable {
        quantiles: model.config.quantiles.clone(),
        epsilons: epsilons.to_vec(),
        pools,
        fallback_to_largest_pool: false,
    })
}

/// Index of the smallest margin; ties go to the later (higher-quantile) head.
fn select_head(margins: impl Iterator<Item = Option<f64>>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (h, m) in margins.enumerate() {
        if let Some(m) = m {
            if best.is_none_or(|(_, b)| m <= b) {
                best = Some((h, m));
            }
        }
    }
    best.map(|(h, _)| h)
}

/// Calibrated head and offset used for one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundRule {
    pub pool: usize,
    pub head: usize,
    pub offset: f64,
}

impl CalibrationTable {
    pub fn pool(&self, pool: usize) -> Option<&PoolCalibration> {
        self.pools.iter().find(|p| p.pool == pool)
    }

    pub fn epsilon_index(&self, epsilon: f64) -> Result<usize> {
        self.epsilons
            .iter()
            .position(|&e| (e - epsilon).abs() <= 1e-12)
            .ok_or_else(|| Error::validation(format!("epsilon {epsilon} was not calibrated")))
    }

    /// Head and offset for `n_interferers` at `epsilon`.
    pub fn rule(&self, n_interferers: usize, epsilon: f64) -> Result<BoundRule> {
        let e = self.epsilon_index(epsilon)?;
        let pool = match self.pool(n_interferers) {
            Some(p) => p,
            None if self.fallback_to_largest_pool => self.pools.last().expect("table has a pool"),
            None => return Err(Error::UnknownPool(n_interferers)),
        };
        match pool.selected_head[e] {
            Some(head) => Ok(BoundRule {
                pool: pool.pool,
                head,
                offset: pool.offsets[head][e].expect("selected head is feasible"),
            }),
            None => Err(Error::Infeasible {
                pool: pool.pool,
                epsilon,
                n: pool.size,
            }),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut offsets = BTreeMap::new();
        let mut margins = BTreeMap::new();
        let mut selected = BTreeMap::new();
        let mut sizes = BTreeMap::new();
        for p in &self.pools {
            sizes.insert(p.pool.to_string(), p.size);
            for (e, eps) in self.epsilons.iter().enumerate() {
                selected.insert(format!("{}/{}", p.pool, eps), p.selected_head[e]);
                for h in 0..p.offsets.len() {
                    let key = format!("{}/{}/{}", p.pool, h, eps);
                    offsets.insert(key.clone(), p.offsets[h][e]);
                    margins.insert(key, p.margins[h][e]);
                }
            }
        }
        let file = TableFile {
            format: TABLE_FORMAT.to_string(),
            version: 1,
            quantiles: self.quantiles.clone(),
            epsilons: self.epsilons.clone(),
            pool_sizes: sizes,
            fallback_to_largest_pool: self.fallback_to_largest_pool,
            offsets,
            margins,
            selected_head: selected,
        };
        Ok(to_json_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut file: TableFile = serde_json::from_str(text)?;
        if file.format != TABLE_FORMAT || file.version != 1 {
            return Err(Error::validation(format!(
                "unsupported calibration format {} version {}",
                file.format, file.version
            )));
        }
        let heads = file.quantiles.len();
        let mut pools = Vec::new();
        for (key, &size) in &file.pool_sizes {
            let pool: usize = key
                .parse()
                .map_err(|_| Error::validation(format!("bad pool key {key:?}")))?;
            if pool > MAX_INTERFERERS {
                return Err(Error::validation(format!(
                    "pool {pool} exceeds {MAX_INTERFERERS} interferers"
                )));
            }
            let mut entry = PoolCalibration {
                pool,
                size,
                offsets: vec![vec![None; file.epsilons.len()]; heads],
                margins: vec![vec![None; file.epsilons.len()]; heads],
                selected_head: vec![None; file.epsilons.len()],
            };
            for (e, eps) in file.epsilons.iter().enumerate() {
                let missing =
                    |what: &str, key: &str| Error::validation(format!("calibration table lacks {what} {key}"));
                let key = format!("{pool}/{eps}");
                let head = *file
                    .selected_head
                    .get(&key)
                    .ok_or_else(|| missing("selected head", &key))?;
                if head.is_some_and(|h| h >= heads) {
                    return Err(Error::validation(format!("selected head out of range at {key}")));
                }
                entry.selected_head[e] = head;
                for h in 0..heads {
                    let key = format!("{pool}/{h}/{eps}");
                    entry.offsets[h][e] = file.offsets.remove(&key).ok_or_else(|| missing("offset", &key))?;
                    entry.margins[h][e] = file.margins.remove(&key).ok_or_else(|| missing("margin", &key))?;
                }
                if let Some(h) = head {
                    if entry.offsets[h][e].is_none() {
                        return Err(Error::validation(format!("selected head has no offset at {key}")));
                    }
                }
            }
            pools.push(entry);
        }
        if pools.is_empty() {
            return Err(Error::validation("calibration table has no pools"));
        }
        pools.sort_by_key(|p| p.pool);
        Ok(CalibrationTable {
            quantiles: file.quantiles,
            epsilons: file.epsilons,
            pools,
            fallback_to_largest_pool: file.fallback_to_largest_pool,
        })
    }
}

const TABLE_FORMAT: &str = "runtime-oracle-calibration";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    format: String,
    version: u32,
    quantiles: Vec<f64>,
    epsilons: Vec<f64>,
    pool_sizes: BTreeMap<String, usize>,
    fallback_to_largest_pool: bool,
    /// `pool/head/epsilon`
    offsets: BTreeMap<String, Option<f64>>,
    margins: BTreeMap<String, Option<f64>>,
    /// `pool/epsilon`
    selected_head: BTreeMap<String, Option<usize>>,
}

pub fn save_calibration(table: &CalibrationTable, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), table.to_json()?.as_bytes())
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CalibrationTable::from_json(&text)
}

/// Upper bound on the runtime in seconds: the selected head's prediction
/// shifted by its conformal offset.
pub fn predict_bound(
    model: &RuntimeModel,
    table: &CalibrationTable,
    i: usize,
    j: usize,
    interference: &[usize],
    epsilon: f64,
) -> Result<f64> {
    let rule = table.rule(interference.len(), epsilon)?;
    Ok((model.forward(i, j, interference, rule.head)? + rule.offset).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_examples() {
        let r: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(conformal_offset(&r, 0.2).unwrap(), Some(9.0));
        assert_eq!(conformal_offset(&[5.0], 0.5).unwrap(), Some(5.0));
        assert_eq!(conformal_offset(&[1.0; 5], 0.1).unwrap(), None);
        assert!(conformal_offset(&[], 0.1).is_err());
        assert!(conformal_offset(&r, 1.0).is_err());
    }

    #[test]
    fn rank_is_exact_on_integer_products() {
        // 10 * 0.9 = 9 exactly in decimal
        assert_eq!(conformal_rank(9, 0.1), 9);
        assert_eq!(conformal_rank(99, 0.01), 99);
        assert_eq!(conformal_rank(19, 0.05), 19);
        assert_eq!(conformal_rank(10, 0.2), 9);
    }

    #[test]
    fn offset_is_monotone_in_epsilon() {
        let r: Vec<f64> = (0..120).map(|k| ((k * 37) % 121) as f64 * 0.1 - 2.0).collect();
        let eps = default_epsilons();
        let offsets: Vec<f64> = eps.iter().map(|&e| conformal_offset(&r, e).unwrap().unwrap()).collect();
        // epsilons decrease, so offsets must not decrease
        assert!(offsets.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn margin_examples() {
        assert_eq!(overprovisioning_margin(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((overprovisioning_margin(&[1.2], &[1.0]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(overprovisioning_margin(&[0.5], &[1.0]).unwrap(), 0.0);
        assert!(overprovisioning_margin(&[1.0], &[0.0]).is_err());
        assert!(overprovisioning_margin(&[1.0], &[]).is_err());
    }

    #[test]
    fn coverage_counts_ties_as_covered() {
        assert_eq!(
            empirical_coverage(&[1.0, 1.0, 3.0, 0.5], &[1.0, 2.0, 2.0, 1.0]).unwrap(),
            0.5
        );
    }

    #[test]
    fn selection_prefers_smaller_margin_then_higher_quantile() {
        assert_eq!(select_head([Some(0.3), Some(0.2), Some(0.4)].into_iter()), Some(1));
        assert_eq!(select_head([Some(0.2), Some(0.2)].into_iter()), Some(1));
        assert_eq!(select_head([None, Some(0.9)].into_iter()), Some(1));
        assert_eq!(select_head([None, None].into_iter()), None);
    }

    fn table() -> CalibrationTable {
        CalibrationTable {
            quantiles: vec![0.5, 0.9],
            epsilons: vec![0.1, 0.05],
            pools: vec![
                PoolCalibration {
                    pool: 0,
                    size: 30,
                    offsets: vec![vec![Some(0.4), Some(0.5)], vec![Some(0.1), Some(0.2)]],
                    margins: vec![vec![Some(0.5), Some(0.6)], vec![Some(0.2), Some(0.3)]],
                    selected_head: vec![Some(1), Some(1)],
                },
                PoolCalibration {
                    pool: 2,
                    size: 12,
                    offsets: vec![vec![Some(0.7), None], vec![Some(0.3), None]],
                    margins: vec![vec![Some(1.0), None], vec![Some(0.4), None]],
                    selected_head: vec![Some(1), None],
                },
            ],
            fallback_to_largest_pool: false,
        }
    }

    #[test]
    fn rules_and_errors() {
        let t = table();
        assert_eq!(
            t.rule(0, 0.05).unwrap(),
            BoundRule {
                pool: 0,
                head: 1,
                offset: 0.2
            }
        );
        assert!(matches!(t.rule(2, 0.05), Err(Error::Infeasible { pool: 2, n: 12, .. })));
        assert!(matches!(t.rule(1, 0.1), Err(Error::UnknownPool(1))));
        assert!(t.rule(0, 0.07).is_err());
        let fallback = CalibrationTable {
            fallback_to_largest_pool: true,
            ..t
        };
        assert_eq!(fallback.rule(3, 0.1).unwrap().pool, 2);
    }

    #[test]
    fn json_round_trip() {
        let t = table();
        let text = t.to_json().unwrap();
        assert!(text.contains("\"2/1/0.1\""));
        assert_eq!(CalibrationTable::from_json(&text).unwrap(), t);
        assert_eq!(CalibrationTable::from_json(&text).unwrap().to_json().unwrap(), text);
    }
}
