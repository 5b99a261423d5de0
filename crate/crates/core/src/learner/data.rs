use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LearnerError;
use crate::rng::sim_rng;

/// Row-major feature matrix with integer class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self, LearnerError> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(LearnerError::InvalidParams(format!(
                "{} features do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(LearnerError::LabelOutOfRange { label: bad, classes });
        }
        Ok(Self {
            features,
            dim,
            labels,
            classes,
        })
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.features
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    /// New dataset made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            features,
            dim: self.dim,
            labels,
            classes: self.classes,
        }
    }
}

fn check_generation_params(n: usize, d: usize, classes: usize, spread: f64) -> Result<(), LearnerError> {
    if classes < 2 {
        return Err(LearnerError::InvalidParams("need at least 2 classes".into()));
    }
    if d == 0 {
        return Err(LearnerError::InvalidParams("dimension must be at least 1".into()));
    }
    if n < classes {
        return Err(LearnerError::InvalidParams(format!(
            "n = {n} is smaller than the class count {classes}"
        )));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(LearnerError::InvalidParams(format!("bad spread {spread}")));
    }
    Ok(())
}

/// Class centres drawn uniformly on the unit sphere.
pub fn class_means(seed: u64, d: usize, classes: usize) -> Vec<Vec<f64>> {
    let mut rng = sim_rng(seed, "class-means", 0);
    (0..classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn sample_blobs(
    means: &[Vec<f64>],
    n: usize,
    spread: f64,
    rng: &mut impl Rng,
) -> Dataset {
    let classes = means.len();
    let d = means[0].len();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        for &m in &means[label] {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(m + spread * noise);
        }
        labels.push(label);
    }
    Dataset {
        features,
        dim: d,
        labels,
        classes,
    }
}

/// Gaussian blobs around [`class_means`]: labels cycle through the classes so
/// every class count is within one of the others.
pub fn generate_dataset(
    seed: u64,
    n: usize,
    d: usize,
    classes: usize,
    spread: f64,
) -> Result<Dataset, LearnerError> {
    check_generation_params(n, d, classes, spread)?;
    let means = class_means(seed, d, classes);
    Ok(sample_blobs(&means, n, spread, &mut sim_rng(seed, "train-points", 0)))
}

/// Fresh points from the same class centres as [`generate_dataset`] with the
/// same seed, drawn from an independent stream.
pub fn generate_holdout(
    seed: u64,
    n: usize,
    d: usize,
    classes: usize,
    spread: f64,
) -> Result<Dataset, LearnerError> {
    check_generation_params(n, d, classes, spread)?;
    let means = class_means(seed, d, classes);
    Ok(sample_blobs(&means, n, spread, &mut sim_rng(seed, "holdout-points", 0)))
}

/// Seeded shuffle followed by a contiguous split; the first `n % workers`
/// shards get one extra row.
pub fn partition_even(
    dataset: &Dataset,
    workers: usize,
    seed: u64,
) -> Result<Vec<Dataset>, LearnerError> {
    if workers == 0 {
        return Err(LearnerError::InvalidParams("workers must be at least 1".into()));
    }
    if workers > dataset.len() {
        return Err(LearnerError::InvalidParams(format!(
            "{workers} workers but only {} rows",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut sim_rng(seed, "partition", 0));
    let base = dataset.len() / workers;
    let extra = dataset.len() % workers;
    let mut shards = Vec::with_capacity(workers);
    let mut start = 0;
    for w in 0..workers {
        let size = base + usize::from(w < extra);
        shards.push(dataset.select(&order[start..start + size]));
        start += size;
    }
    Ok(shards)
}

/// Splits off a seeded `fraction` of the rows as a local evaluation slice.
/// Returns `(train, holdout)`.
pub fn split_holdout(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), LearnerError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(LearnerError::InvalidParams(format!(
            "holdout fraction {fraction} outside [0, 1)"
        )));
    }
    let n = dataset.len();
    let held = ((n as f64) * fraction).round() as usize;
    let held = held.min(n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut sim_rng(seed, "holdout-split", 0));
    let (hold_idx, train_idx) = order.split_at(held);
    Ok((dataset.select(train_idx), dataset.select(hold_idx)))
}
