//! Episode specification and deterministic episodic sampling.

use super::{Dataset, DatasetSplit, LabeledImage};
use crate::error::{DcnError, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// C-way K-shot episode shape: `ways` classes, `shots` support and
/// `queries_per_class` query images per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, queries_per_class: usize) -> Self {
        Self {
            ways,
            shots,
            queries_per_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(DcnError::invalid("episode ways must be at least 2"));
        }
        if self.shots < 1 {
            return Err(DcnError::invalid("episode shots must be at least 1"));
        }
        if self.queries_per_class < 1 {
            return Err(DcnError::invalid("queries_per_class must be at least 1"));
        }
        Ok(())
    }

    /// Support-set size m = K·C.
    pub fn support_size(&self) -> usize {
        self.ways * self.shots
    }

    /// Query-set size n = K'·C.
    pub fn query_size(&self) -> usize {
        self.ways * self.queries_per_class
    }
}

/// Which class set episodes are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitPart {
    MetaTrain,
    MetaVal,
    MetaTest,
    /// Union of meta-train and meta-val (the retrain phase's class pool).
    MetaTrainVal,
}

impl std::fmt::Display for SplitPart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SplitPart::MetaTrain => "meta_train",
            SplitPart::MetaVal => "meta_val",
            SplitPart::MetaTest => "meta_test",
            SplitPart::MetaTrainVal => "meta_train+meta_val",
        };
        f.write_str(s)
    }
}

/// One sampled task: labeled support set, disjoint query set, and the
/// episode-local relabeling of the C sampled classes to `0..C-1`.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<LabeledImage>,
    pub query: Vec<LabeledImage>,
    pub class_map: BTreeMap<usize, usize>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.class_map.len()
    }

    /// Episode-local label (0..C-1) of an original class id.
    pub fn local_label(&self, original: usize) -> usize {
        self.class_map[&original]
    }

    pub fn support_local_labels(&self) -> Vec<usize> {
        self.support.iter().map(|im| self.local_label(im.label)).collect()
    }

    pub fn query_local_labels(&self) -> Vec<usize> {
        self.query.iter().map(|im| self.local_label(im.label)).collect()
    }
}

/// Sample one episode: C classes without replacement, then K + K' images per
/// class without replacement (first K support, rest query).
pub fn sample_episode<R: Rng>(
    dataset: &Dataset,
    split: &DatasetSplit,
    part: SplitPart,
    spec: EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    spec.validate()?;
    let classes = split.part_classes(part);
    if classes.len() < spec.ways {
        return Err(DcnError::Dataset(format!(
            "{part} has {} classes, fewer than the requested {} ways",
            classes.len(),
            spec.ways
        )));
    }
    let picked = rand::seq::index::sample(rng, classes.len(), spec.ways);
    let need = spec.shots + spec.queries_per_class;
    let mut support = Vec::with_capacity(spec.support_size());
    let mut query = Vec::with_capacity(spec.query_size());
    let mut class_map = BTreeMap::new();
    for (local, class_pos) in picked.iter().enumerate() {
        let class = classes[class_pos];
        class_map.insert(class, local);
        let images = split
            .per_class
            .get(&class)
            .ok_or_else(|| DcnError::Dataset(format!("class {class} missing from split index")))?;
        if images.len() < need {
            return Err(DcnError::Dataset(format!(
                "class {:?} has {} images, fewer than shots + queries = {need}",
                dataset.class_names[class],
                images.len()
            )));
        }
        let chosen = rand::seq::index::sample(rng, images.len(), need);
        for (k, image_pos) in chosen.iter().enumerate() {
            let img = dataset.images[images[image_pos]].clone();
            if k < spec.shots {
                support.push(img);
            } else {
                query.push(img);
            }
        }
    }
    Ok(Episode {
        support,
        query,
        class_map,
    })
}
