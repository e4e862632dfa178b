//! Datasets, specialized per-agent splits, and the synthetic ensemble task.

pub mod idx;
pub mod synthetic;

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{contract, dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// `N×d` features in `[0, 1]` with labels in `[0, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(dim_err("dataset", &[features.len()], &[labels.len(), dim]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(contract!("label {bad} outside [0, {classes})"));
        }
        Ok(Self {
            features,
            labels,
            dim,
            classes,
            split,
        })
    }

    /// Scales pixels by 1/255 and flattens each image row-major.
    pub fn from_idx(images: &idx::IdxImages, labels: &[u8], split: Split) -> Result<Self> {
        if images.count != labels.len() {
            return Err(crate::error::Error::Format {
                offset: 4,
                reason: alloc::format!(
                    "image count {} does not match label count {}",
                    images.count,
                    labels.len()
                ),
            });
        }
        let features = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
        let classes = labels.iter().max().map_or(1, |m| m + 1);
        Self::new(features, labels, images.rows * images.cols, classes, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Self {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            classes: self.classes,
            split,
        }
    }

    /// Features of `indices` as a `[len×d]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), self.dim], data).expect("batch shape")
    }

    /// Keeps only the listed classes, relabelled `0..keep.len()` in list order.
    pub fn keep_classes(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(contract!("class filter is empty"));
        }
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.labels[i]))
            .collect();
        let mut out = self.subset(&indices, self.split);
        for l in &mut out.labels {
            *l = keep.iter().position(|k| k == l).unwrap();
        }
        out.classes = keep.len();
        Ok(out)
    }

    /// Shuffles once and cuts consecutive pieces of the given sizes.
    pub fn partition<R: Rng + ?Sized>(
        &self,
        sizes: &[(usize, Split)],
        rng: &mut R,
    ) -> Result<Vec<Self>> {
        let total: usize = sizes.iter().map(|(s, _)| s).sum();
        if total > self.len() {
            return Err(contract!("partition wants {total} samples, dataset has {}", self.len()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        let mut at = 0;
        Ok(sizes
            .iter()
            .map(|&(size, split)| {
                let part = self.subset(&order[at..at + size], split);
                at += size;
                part
            })
            .collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// All singletons `{0}..{c-1}` followed by all pairs in lexicographic order.
pub fn enumerate_specializations(classes: usize) -> Result<Vec<Vec<usize>>> {
    if classes < 2 {
        return Err(contract!("specializations need c ≥ 2, got {classes}"));
    }
    let mut out: Vec<Vec<usize>> = (0..classes).map(|c| vec![c]).collect();
    for a in 0..classes {
        for b in a + 1..classes {
            out.push(vec![a, b]);
        }
    }
    Ok(out)
}

/// `c + C(c, 2)`.
pub fn specialization_count(classes: usize) -> usize {
    classes + classes * classes.saturating_sub(1) / 2
}

/// Number of specialty samples in a split of `target_size` at fraction `rho`.
pub fn specialty_quota(rho: f64, target_size: usize) -> usize {
    // The epsilon keeps products such as 0.732 * 1000 from rounding up a whole sample.
    let q = libm::ceil(rho * target_size as f64 - 1e-9);
    (q.max(0.0) as usize).min(target_size)
}

/// Per-class pools drawn without replacement until exhausted, then with replacement.
struct ClassPools {
    pools: Vec<Vec<usize>>,
    cursor: Vec<usize>,
}

impl ClassPools {
    fn new<R: Rng + ?Sized>(master: &Dataset, rng: &mut R) -> Self {
        let mut pools = vec![Vec::new(); master.classes()];
        for (i, &l) in master.labels().iter().enumerate() {
            pools[l].push(i);
        }
        for p in &mut pools {
            p.shuffle(rng);
        }
        Self {
            cursor: vec![0; pools.len()],
            pools,
        }
    }

    fn draw<R: Rng + ?Sized>(&mut self, class: usize, rng: &mut R) -> usize {
        let pool = &self.pools[class];
        let at = self.cursor[class];
        self.cursor[class] += 1;
        if at < pool.len() {
            pool[at]
        } else {
            if at == pool.len() {
                log::warn!(
                    "class {class} pool of {} samples exhausted; sampling with replacement",
                    pool.len()
                );
            }
            pool[rng.random_range(0..pool.len())]
        }
    }
}

/// Training split over-representing `specialty`.
///
/// `⌈ρ·target_size⌉` samples come from the specialty classes (split evenly,
/// earlier classes taking any odd sample); the rest are drawn by picking a
/// non-specialty class uniformly at random for each sample. The result is
/// shuffled.
pub fn compose_specialized_split<R: Rng + ?Sized>(
    master: &Dataset,
    specialty: &[usize],
    rho: f64,
    target_size: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if target_size == 0 {
        return Err(contract!("target size must be positive"));
    }
    if specialty.is_empty() || specialty.iter().any(|&c| c >= master.classes()) {
        return Err(contract!("specialty {specialty:?} invalid for {} classes", master.classes()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(contract!("specialty fraction ρ must lie in (0, 1], got {rho}"));
    }
    let counts = master.class_counts();
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(contract!("master split has no samples of class {empty}"));
    }
    let others: Vec<usize> = (0..master.classes())
        .filter(|c| !specialty.contains(c))
        .collect();
    let mut quota = specialty_quota(rho, target_size);
    if others.is_empty() {
        quota = target_size;
    }

    let mut pools = ClassPools::new(master, rng);
    let mut picked = Vec::with_capacity(target_size);
    let per = quota / specialty.len();
    let extra = quota % specialty.len();
    for (j, &class) in specialty.iter().enumerate() {
        let take = per + usize::from(j < extra);
        for _ in 0..take {
            picked.push(pools.draw(class, rng));
        }
    }
    for _ in quota..target_size {
        let class = others[rng.random_range(0..others.len())];
        picked.push(pools.draw(class, rng));
    }
    picked.shuffle(rng);
    Ok(master.subset(&picked, Split::Train))
}
