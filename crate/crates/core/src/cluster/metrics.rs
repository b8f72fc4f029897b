use serde::{Deserialize, Serialize};

use crate::cluster::hungarian::hungarian;
use crate::cluster::kmeans::{kmeans, KMeansOptions};
use crate::error::{RaplError, Result};
use crate::numerics::{l2_normalize_rows, Tensor, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Unlabeled training data holds new classes only.
    Ncd,
    /// Unlabeled training data holds half of every old class plus all new classes.
    Gcd,
}

/// Class layout and per-class image counts. Old classes are ids
/// `0..num_old`, new classes `num_old..num_old + num_new`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub num_old: usize,
    pub num_new: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub mode: SplitMode,
}

impl SplitSpec {
    pub fn num_classes(&self) -> usize {
        self.num_old + self.num_new
    }

    pub fn is_old(&self, class: usize) -> bool {
        class < self.num_old
    }

    /// Images of an old class that stay labeled.
    pub fn labeled_per_old_class(&self) -> usize {
        match self.mode {
            SplitMode::Ncd => self.train_per_class,
            SplitMode::Gcd => self.train_per_class - self.unlabeled_per_old_class(),
        }
    }

    pub fn unlabeled_per_old_class(&self) -> usize {
        match self.mode {
            SplitMode::Ncd => 0,
            SplitMode::Gcd => self.train_per_class / 2,
        }
    }

    pub fn labeled_train_size(&self) -> usize {
        self.num_old * self.labeled_per_old_class()
    }

    pub fn unlabeled_train_size(&self) -> usize {
        self.num_old * self.unlabeled_per_old_class() + self.num_new * self.train_per_class
    }

    pub fn test_size(&self) -> usize {
        self.num_classes() * self.test_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_old == 0 || self.num_new == 0 {
            return Err(RaplError::Config("both old and new classes are required".into()));
        }
        if self.train_per_class == 0 {
            return Err(RaplError::Config("need at least one training image per class".into()));
        }
        if self.mode == SplitMode::Gcd && self.train_per_class < 2 {
            return Err(RaplError::Config(
                "GCD splits need two training images per class to halve".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Cluster the whole test set with `K = C^l + C^u`.
    TaskAgnostic,
    /// Cluster the unlabeled training split with `K` = classes present there.
    TaskAware,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::TaskAgnostic => "task-agnostic",
            Protocol::TaskAware => "task-aware",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PermutationScope {
    /// One optimal permutation shared by every subset.
    #[default]
    Global,
    /// Old and new subsets each get their own optimal permutation.
    PerSubset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAccuracy {
    pub acc: f64,
    /// `permutation[cluster] = class`.
    pub permutation: Vec<usize>,
    pub matched: usize,
}

/// Best achievable accuracy over all bijections from cluster ids to class ids.
pub fn clustering_accuracy(
    y_true: &[usize],
    y_pred: &[usize],
    num_classes: usize,
) -> Result<ClusterAccuracy> {
    if y_true.len() != y_pred.len() {
        return Err(RaplError::Dimension(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.iter().chain(y_pred).any(|&v| v >= num_classes) {
        return Err(RaplError::InvalidArgument(format!(
            "labels must lie in 0..{num_classes}"
        )));
    }
    let k = num_classes;
    let mut counts = vec![0usize; k * k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        counts[p * k + t] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let cost = Tensor::new(vec![k, k], counts.iter().map(|&c| (max - c) as f64).collect())?;
    let permutation = hungarian(&cost)?;
    let matched = permutation
        .iter()
        .enumerate()
        .map(|(p, &t)| counts[p * k + t])
        .sum();
    let acc = if y_true.is_empty() {
        0.0
    } else {
        matched as f64 / y_true.len() as f64
    };
    Ok(ClusterAccuracy {
        acc,
        permutation,
        matched,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub acc_all: f64,
    /// `None` when the evaluated set has no old-class samples.
    pub acc_old: Option<f64>,
    pub acc_new: Option<f64>,
    pub matched_old: usize,
    pub matched_new: usize,
    pub num_old: usize,
    pub num_new: usize,
    /// `permutation[cluster] = class id` for the global matching.
    pub permutation: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub kmeans: KMeansOptions,
    pub scope: PermutationScope,
    /// L2-normalize embeddings before clustering.
    pub normalize: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            kmeans: KMeansOptions::default(),
            scope: PermutationScope::Global,
            normalize: true,
        }
    }
}

/// Number of clusters and the class ids in play for a protocol.
fn protocol_classes(labels: &[usize], split: &SplitSpec, protocol: Protocol) -> Result<Vec<usize>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= split.num_classes()) {
        return Err(RaplError::InvalidArgument(format!("class id {bad} outside the split")));
    }
    match (protocol, split.mode) {
        (Protocol::TaskAware, SplitMode::Ncd) => {
            if labels.iter().any(|&l| split.is_old(l)) {
                return Err(RaplError::InvalidArgument(
                    "task-aware evaluation of an NCD split expects only new-class samples".into(),
                ));
            }
            Ok((split.num_old..split.num_classes()).collect())
        }
        _ => Ok((0..split.num_classes()).collect()),
    }
}

/// Scores given cluster ids against ground truth under the protocol's class
/// set. Cluster ids must lie in `0..K`.
pub fn score_clusters(
    labels: &[usize],
    clusters: &[usize],
    split: &SplitSpec,
    protocol: Protocol,
    scope: PermutationScope,
) -> Result<MetricsReport> {
    let classes = protocol_classes(labels, split, protocol)?;
    let k = classes.len();
    let offset = classes[0];
    let local: Vec<usize> = labels.iter().map(|&l| l - offset).collect();
    let global = clustering_accuracy(&local, clusters, k)?;

    let subset = |old: bool| -> Vec<usize> {
        (0..labels.len())
            .filter(|&i| split.is_old(labels[i]) == old)
            .collect()
    };
    let (old_idx, new_idx) = (subset(true), subset(false));
    let matched_under = |idx: &[usize], perm: &[usize]| -> usize {
        idx.iter().filter(|&&i| perm[clusters[i]] == local[i]).count()
    };
    let subset_matched = |idx: &[usize]| -> Result<usize> {
        Ok(match scope {
            PermutationScope::Global => matched_under(idx, &global.permutation),
            PermutationScope::PerSubset => {
                let y: Vec<usize> = idx.iter().map(|&i| local[i]).collect();
                let p: Vec<usize> = idx.iter().map(|&i| clusters[i]).collect();
                clustering_accuracy(&y, &p, k)?.matched
            }
        })
    };
    let matched_old = subset_matched(&old_idx)?;
    let matched_new = subset_matched(&new_idx)?;
    let ratio = |m: usize, n: usize| (n > 0).then(|| m as f64 / n as f64);
    Ok(MetricsReport {
        protocol,
        acc_all: global.acc,
        acc_old: ratio(matched_old, old_idx.len()),
        acc_new: ratio(matched_new, new_idx.len()),
        matched_old,
        matched_new,
        num_old: old_idx.len(),
        num_new: new_idx.len(),
        permutation: global.permutation.iter().map(|&c| c + offset).collect(),
    })
}

/// Clusters `embeddings` with k-means and scores the result. `embeddings`
/// must be the protocol's target set: the full test split for task-agnostic,
/// the unlabeled training split for task-aware.
pub fn evaluate(
    embeddings: &Tensor,
    labels: &[usize],
    split: &SplitSpec,
    protocol: Protocol,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if embeddings.rows() != labels.len() {
        return Err(RaplError::Dimension(format!(
            "{} embeddings for {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    let k = protocol_classes(labels, split, protocol)?.len();
    let points = if opts.normalize {
        l2_normalize_rows(embeddings, NORM_EPS)?
    } else {
        embeddings.clone()
    };
    let clusters = kmeans(&points, k, &opts.kmeans)?.assignments;
    score_clusters(labels, &clusters, split, protocol, opts.scope)
}
