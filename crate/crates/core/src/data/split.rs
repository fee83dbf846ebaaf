//! Stratified train/val/test assignment.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};

use super::manifest::{ClassLabel, DatasetManifest, Split};

/// Requested split proportions. Must be non-negative and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        for (name, v) in [("train", train), ("val", val), ("test", test)] {
            if !(v >= 0.0) {
                return Err(Error::invalid(format!("split ratio {name} must be >= 0, got {v}")));
            }
        }
        let sum = train + val + test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(SplitRatios { train, val, test })
    }

    /// Ratios from a test share of the whole corpus plus a validation share
    /// quoted relative to the training set (e.g. 0.10 and 0.15 give
    /// 0.7826 / 0.1174 / 0.10).
    pub fn from_test_and_val_share(test: f64, val_over_train: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&test) || !(val_over_train >= 0.0) {
            return Err(Error::invalid("from_test_and_val_share: shares out of range"));
        }
        let train = (1.0 - test) / (1.0 + val_over_train);
        SplitRatios::new(train, train * val_over_train, test)
    }

    fn get(&self, s: Split) -> f64 {
        match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

impl Default for SplitRatios {
    /// Proportions of a 13571 / 2396 / 2237 partition
    /// (0.7455 / 0.1316 / 0.1229).
    fn default() -> Self {
        let total = 18204.0;
        SplitRatios { train: 13571.0 / total, val: 2396.0 / total, test: 2237.0 / total }
    }
}

/// Largest-remainder apportionment of `n` items to the three splits.
/// Remainder ties resolve in train < val < test order.
fn apportion(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let targets = [ratios.train * n as f64, ratios.val * n as f64, ratios.test * n as f64];
    let mut counts = [0usize; 3];
    let mut fracs = [0.0; 3];
    let mut assigned = 0;
    for i in 0..3 {
        counts[i] = targets[i].floor() as usize;
        fracs[i] = targets[i] - targets[i].floor();
        assigned += counts[i];
    }
    let mut leftover = n - assigned;
    while leftover > 0 {
        let mut best = 0;
        for i in 1..3 {
            if fracs[i] > fracs[best] {
                best = i;
            }
        }
        counts[best] += 1;
        fracs[best] = f64::NEG_INFINITY;
        leftover -= 1;
    }
    counts
}

/// Assign every row to a split, stratified by class: within each class the
/// rows are shuffled with a seed derived from (seed, class index) and then
/// assigned contiguously by the apportioned counts. If a split with a
/// positive ratio ends up empty overall, rows are reassigned one at a time
/// from the currently largest split while that stays legal.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<DatasetManifest> {
    if manifest.is_empty() {
        return Err(Error::data("split_dataset: manifest is empty"));
    }
    // counts[class][split]
    let mut per_class_idx: Vec<Vec<usize>> = vec![Vec::new(); ClassLabel::ALL.len()];
    for (i, row) in manifest.rows().iter().enumerate() {
        let c = ClassLabel::ALL.iter().position(|&l| l == row.label).unwrap();
        per_class_idx[c].push(i);
    }
    let mut counts: Vec<[usize; 3]> = per_class_idx
        .iter()
        .map(|idxs| apportion(idxs.len(), ratios))
        .collect();

    // Non-emptiness repair: a requested split must receive at least one row
    // somewhere, taken from the largest split that can spare one.
    let globals = |counts: &Vec<[usize; 3]>| {
        let mut g = [0usize; 3];
        for row in counts {
            for s in 0..3 {
                g[s] += row[s];
            }
        }
        g
    };
    for s in 0..3 {
        let split = Split::ALL[s];
        if ratios.get(split) <= 0.0 {
            continue;
        }
        while globals(&counts)[s] == 0 {
            let g = globals(&counts);
            let donor = (0..3)
                .filter(|&d| d != s && g[d] > if ratios.get(Split::ALL[d]) > 0.0 { 1 } else { 0 })
                .max_by_key(|&d| g[d]);
            let Some(donor) = donor else {
                return Err(Error::data(format!(
                    "split_dataset: cannot give split {split} any rows with {} total",
                    manifest.len()
                )));
            };
            let class = (0..counts.len())
                .find(|&c| counts[c][donor] > 0)
                .expect("donor split has a row in some class");
            counts[class][donor] -= 1;
            counts[class][s] += 1;
        }
    }

    let mut rows = manifest.rows().to_vec();
    for (c, idxs) in per_class_idx.iter().enumerate() {
        let mut order = idxs.clone();
        SeededRng::new(derive_seed(seed, c as u64)).shuffle(&mut order);
        let mut cursor = 0;
        for (s, &n) in counts[c].iter().enumerate() {
            for &row_idx in &order[cursor..cursor + n] {
                rows[row_idx].split = Some(Split::ALL[s]);
            }
            cursor += n;
        }
    }
    DatasetManifest::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::ManifestRow;

    fn manifest(per_class: usize) -> DatasetManifest {
        let mut rows = Vec::new();
        for label in ClassLabel::ALL {
            for i in 0..per_class {
                rows.push(ManifestRow {
                    path: format!("{}_{i:04}.pgm", label.as_str().to_lowercase()),
                    label,
                    split: None,
                });
            }
        }
        DatasetManifest::new(rows).unwrap()
    }

    fn split_counts(m: &DatasetManifest, label: ClassLabel) -> [usize; 3] {
        let mut c = [0; 3];
        for row in m.rows().iter().filter(|r| r.label == label) {
            c[Split::ALL.iter().position(|&s| Some(s) == row.split).unwrap()] += 1;
        }
        c
    }

    #[test]
    fn all_train_when_ratio_is_one() {
        let out = split_dataset(&manifest(4), &SplitRatios::new(1.0, 0.0, 0.0).unwrap(), 7).unwrap();
        assert!(out.rows().iter().all(|r| r.split == Some(Split::Train)));
    }

    #[test]
    fn eight_one_one_per_ten() {
        let out =
            split_dataset(&manifest(10), &SplitRatios::new(0.8, 0.1, 0.1).unwrap(), 3).unwrap();
        for label in ClassLabel::ALL {
            assert_eq!(split_counts(&out, label), [8, 1, 1]);
        }
    }

    #[test]
    fn default_ratios_reproduce_large_partition() {
        // 18204 rows can't be built class-balanced (not divisible by 3), so
        // check the apportionment arithmetic directly.
        let counts = apportion(18204, &SplitRatios::default());
        assert_eq!(counts, [13571, 2396, 2237]);
    }

    #[test]
    fn every_row_assigned_exactly_once() {
        let out = split_dataset(&manifest(7), &SplitRatios::default(), 11).unwrap();
        assert_eq!(out.len(), 21);
        assert!(out.rows().iter().all(|r| r.split.is_some()));
    }

    #[test]
    fn stratification_deviates_at_most_one_per_class() {
        let ratios = SplitRatios::new(0.6, 0.25, 0.15).unwrap();
        let out = split_dataset(&manifest(20), &ratios, 5).unwrap();
        for label in ClassLabel::ALL {
            let c = split_counts(&out, label);
            for (got, want) in c.iter().zip([0.6 * 20.0, 0.25 * 20.0, 0.15 * 20.0]) {
                assert!((*got as f64 - want).abs() <= 1.0, "{c:?}");
            }
        }
    }

    #[test]
    fn assignment_is_seed_deterministic_and_seed_sensitive() {
        let a = split_dataset(&manifest(30), &SplitRatios::default(), 9).unwrap();
        let b = split_dataset(&manifest(30), &SplitRatios::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&manifest(30), &SplitRatios::default(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn small_corpus_still_fills_every_requested_split() {
        // 2 per class and 0.8/0.1/0.1: naive rounding leaves val and test
        // empty; the repair pass must fill them.
        let out =
            split_dataset(&manifest(2), &SplitRatios::new(0.8, 0.1, 0.1).unwrap(), 1).unwrap();
        for split in Split::ALL {
            assert!(out.rows_in(split).count() > 0, "{split} empty");
        }
    }

    #[test]
    fn impossible_request_errors() {
        // One row cannot fill three requested splits.
        let m = DatasetManifest::new(vec![ManifestRow {
            path: "only.pgm".into(),
            label: ClassLabel::Pd,
            split: None,
        }])
        .unwrap();
        assert!(split_dataset(&m, &SplitRatios::new(0.8, 0.1, 0.1).unwrap(), 1).is_err());
    }

    #[test]
    fn empty_manifest_errors() {
        let m = DatasetManifest::default();
        assert!(split_dataset(&m, &SplitRatios::default(), 1).is_err());
    }

    #[test]
    fn ratio_validation() {
        assert!(SplitRatios::new(0.5, 0.5, 0.5).is_err());
        assert!(SplitRatios::new(-0.1, 0.6, 0.5).is_err());
        let r = SplitRatios::from_test_and_val_share(0.10, 0.15).unwrap();
        assert!((r.train - 0.9 / 1.15).abs() < 1e-12);
        assert!((r.val - 0.15 * 0.9 / 1.15).abs() < 1e-12);
        assert!((r.test - 0.10).abs() < 1e-12);
    }
}
