//! Disjoint-class splits and their plain-text manifests.

use super::{Dataset, SplitPart};
use crate::error::{DcnError, Result};
use crate::seed::sub_rng;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::path::Path;

/// Pairwise-disjoint class sets plus the per-class image index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub meta_train: Vec<usize>,
    pub meta_val: Vec<usize>,
    pub meta_test: Vec<usize>,
    pub per_class: BTreeMap<usize, Vec<usize>>,
}

impl DatasetSplit {
    /// Class ids belonging to one part (train∪val for the retrain phase).
    pub fn part_classes(&self, part: SplitPart) -> Vec<usize> {
        match part {
            SplitPart::MetaTrain => self.meta_train.clone(),
            SplitPart::MetaVal => self.meta_val.clone(),
            SplitPart::MetaTest => self.meta_test.clone(),
            SplitPart::MetaTrainVal => {
                let mut all = self.meta_train.clone();
                all.extend_from_slice(&self.meta_val);
                all.sort_unstable();
                all
            }
        }
    }

    /// Image indices of every class in one part, class-sorted.
    pub fn part_images(&self, part: SplitPart) -> Vec<usize> {
        self.part_classes(part)
            .iter()
            .flat_map(|c| self.per_class[c].iter().copied())
            .collect()
    }
}

/// Allocate `total` items to three sections by floor-then-distribute:
/// each section gets `floor(fraction·total)`, and the remainder goes to the
/// sections with the largest fractional parts (earlier section on ties).
fn allocate(total: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let fs = [fractions.0, fractions.1, fractions.2];
    let mut counts = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    for i in 0..3 {
        let exact = fs[i] * total as f64;
        counts[i] = exact.floor() as usize;
        remainders[i] = exact - exact.floor();
    }
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].partial_cmp(&remainders[a]).unwrap().then(a.cmp(&b)));
    for k in 0..(total - assigned) {
        counts[order[k % 3]] += 1;
    }
    counts
}

/// Shuffle classes under `seed` and cut them into disjoint meta-splits.
pub fn split_classes(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (ft, fv, fe) = fractions;
    if !(ft.is_finite() && fv.is_finite() && fe.is_finite()) {
        return Err(DcnError::invalid("split fractions must be finite"));
    }
    if ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(DcnError::invalid("split fractions must be non-negative"));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(DcnError::invalid("split fractions must sum to 1"));
    }
    let n = dataset.num_classes();
    let counts = allocate(n, fractions);
    if counts.contains(&0) {
        return Err(DcnError::invalid(format!(
            "split fractions {fractions:?} leave an empty split for {n} classes"
        )));
    }
    let mut classes: Vec<usize> = (0..n).collect();
    classes.shuffle(&mut sub_rng(seed, "split"));
    let mut meta_train: Vec<usize> = classes[..counts[0]].to_vec();
    let mut meta_val: Vec<usize> = classes[counts[0]..counts[0] + counts[1]].to_vec();
    let mut meta_test: Vec<usize> = classes[counts[0] + counts[1]..].to_vec();
    meta_train.sort_unstable();
    meta_val.sort_unstable();
    meta_test.sort_unstable();
    Ok(DatasetSplit {
        meta_train,
        meta_val,
        meta_test,
        per_class: dataset.per_class_index(),
    })
}

/// Write the `[meta_train]/[meta_val]/[meta_test]` manifest, one class name
/// per line; re-reading reproduces the split bit-exactly.
pub fn write_split_manifest(
    path: impl AsRef<Path>,
    split: &DatasetSplit,
    dataset: &Dataset,
) -> Result<()> {
    let mut text = String::new();
    for (header, classes) in [
        ("[meta_train]", &split.meta_train),
        ("[meta_val]", &split.meta_val),
        ("[meta_test]", &split.meta_test),
    ] {
        text.push_str(header);
        text.push('\n');
        for &c in classes {
            text.push_str(&dataset.class_names[c]);
            text.push('\n');
        }
    }
    std::fs::write(path.as_ref(), text).map_err(|e| DcnError::Io {
        path: path.as_ref().to_path_buf(),
        source: e,
    })
}

/// Read a manifest back against the dataset it was written for.
pub fn read_split_manifest(path: impl AsRef<Path>, dataset: &Dataset) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| DcnError::Io {
        path: path.as_ref().to_path_buf(),
        source: e,
    })?;
    let name_to_label: BTreeMap<&str, usize> = dataset
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut sections: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut current: Option<usize> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "[meta_train]" => current = Some(0),
            "[meta_val]" => current = Some(1),
            "[meta_test]" => current = Some(2),
            name => {
                let section = current.ok_or_else(|| {
                    DcnError::Dataset(format!("manifest line {name:?} precedes any section"))
                })?;
                let label = *name_to_label.get(name).ok_or_else(|| {
                    DcnError::Dataset(format!("manifest names unknown class {name:?}"))
                })?;
                sections[section].push(label);
            }
        }
    }
    let [meta_train, meta_val, meta_test] = sections;
    let mut seen = std::collections::BTreeSet::new();
    for c in meta_train.iter().chain(&meta_val).chain(&meta_test) {
        if !seen.insert(*c) {
            return Err(DcnError::Dataset(format!(
                "manifest lists class {:?} in more than one split",
                dataset.class_names[*c]
            )));
        }
    }
    Ok(DatasetSplit {
        meta_train,
        meta_val,
        meta_test,
        per_class: dataset.per_class_index(),
    })
}
