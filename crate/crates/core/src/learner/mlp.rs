use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LearnerError};
use crate::rng::sim_rng;

/// Parameters of a fully connected ReLU network with a softmax output.
///
/// For each layer `l` with `fan_in = arch[l]` and `fan_out = arch[l + 1]`,
/// `params` holds the `fan_in x fan_out` weight matrix row-major followed by
/// `fan_out` biases. Layers follow each other in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    arch: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerView {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: usize,
    pub biases: usize,
}

pub fn param_count(arch: &[usize]) -> usize {
    arch.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_arch(arch: &[usize]) -> Result<(), LearnerError> {
    if arch.len() < 2 {
        return Err(LearnerError::BadArch(format!(
            "need at least an input and an output layer, got {arch:?}"
        )));
    }
    if arch.contains(&0) {
        return Err(LearnerError::BadArch(format!("zero-width layer in {arch:?}")));
    }
    Ok(())
}

impl ModelState {
    pub fn from_parts(arch: Vec<usize>, params: Vec<f64>) -> Result<Self, LearnerError> {
        check_arch(&arch)?;
        let expected = param_count(&arch);
        if params.len() != expected {
            return Err(LearnerError::DimMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.arch[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.arch.last().unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub(crate) fn layers(&self) -> Vec<LayerView> {
        let mut offset = 0;
        self.arch
            .windows(2)
            .map(|w| {
                let view = LayerView {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    biases: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                view
            })
            .collect()
    }

    /// Output logits for one input row.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.activations(x).pop().unwrap()
    }

    /// Class probabilities for one input row.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Post-activation values of every layer, input first, logits last.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.layers();
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (l, layer) in layers.iter().enumerate() {
            let input = &acts[l];
            let mut z = self.params[layer.biases..layer.biases + layer.fan_out].to_vec();
            for (i, &xi) in input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &self.params
                    [layer.weights + i * layer.fan_out..layer.weights + (i + 1) * layer.fan_out];
                for (zj, &w) in z.iter_mut().zip(row) {
                    *zj += xi * w;
                }
            }
            if l + 1 < layers.len() {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            acts.push(z);
        }
        acts
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(arch: &[usize], seed: u64) -> Result<ModelState, LearnerError> {
    check_arch(arch)?;
    let mut params = vec![0.0; param_count(arch)];
    let mut rng = sim_rng(seed, "init-model", 0);
    let mut offset = 0;
    for w in arch.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for p in &mut params[offset..offset + fan_in * fan_out] {
            *p = rng.gen_range(-limit..=limit);
        }
        offset += fan_in * fan_out + fan_out;
    }
    Ok(ModelState {
        arch: arch.to_vec(),
        params,
    })
}

fn check_compatible(model: &ModelState, data: &Dataset) -> Result<(), LearnerError> {
    if data.dim() != model.input_dim() {
        return Err(LearnerError::DimMismatch {
            expected: model.input_dim(),
            got: data.dim(),
        });
    }
    if data.classes() > model.output_dim() {
        return Err(LearnerError::DimMismatch {
            expected: model.output_dim(),
            got: data.classes(),
        });
    }
    Ok(())
}

/// Mean softmax cross-entropy over `indices` and its gradient with respect to
/// every parameter, by backpropagation.
pub fn loss_and_gradient(
    model: &ModelState,
    data: &Dataset,
    indices: &[usize],
) -> Result<(f64, Vec<f64>), LearnerError> {
    check_compatible(model, data)?;
    let layers = model.layers();
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    for &idx in indices {
        let label = data.labels()[idx];
        let acts = model.activations(data.row(idx));
        let probs = softmax(acts.last().unwrap());
        loss -= probs[label].max(f64::MIN_POSITIVE).ln();

        let mut delta = probs;
        delta[label] -= 1.0;
        for (l, layer) in layers.iter().enumerate().rev() {
            let input = &acts[l];
            for (i, &xi) in input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &mut grad
                    [layer.weights + i * layer.fan_out..layer.weights + (i + 1) * layer.fan_out];
                for (g, &d) in row.iter_mut().zip(&delta) {
                    *g += xi * d;
                }
            }
            for (g, &d) in grad[layer.biases..layer.biases + layer.fan_out]
                .iter_mut()
                .zip(&delta)
            {
                *g += d;
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.fan_in];
            for (i, p) in prev.iter_mut().enumerate() {
                if input[i] <= 0.0 {
                    continue;
                }
                let row = &model.params
                    [layer.weights + i * layer.fan_out..layer.weights + (i + 1) * layer.fan_out];
                *p = row.iter().zip(&delta).map(|(w, d)| w * d).sum();
            }
            delta = prev;
        }
    }
    let n = indices.len().max(1) as f64;
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss / n, grad))
}

/// Mean cross-entropy over the whole dataset.
pub fn dataset_loss(model: &ModelState, data: &Dataset) -> Result<f64, LearnerError> {
    check_compatible(model, data)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = data
        .rows()
        .map(|(x, y)| -model.predict_proba(x)[y].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(LearnerError::InvalidParams(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(LearnerError::InvalidParams("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Progress report handed to the observer after each epoch.
pub struct EpochReport<'a> {
    /// Zero-based epoch index within this call.
    pub epoch: usize,
    /// Mean of the mini-batch losses seen during the epoch.
    pub mean_batch_loss: f64,
    pub model: &'a ModelState,
}

pub fn train_local(
    model: &ModelState,
    shard: &Dataset,
    config: &TrainConfig,
) -> Result<ModelState, LearnerError> {
    train_local_observed(model, shard, config, |_| {})
}

/// Mini-batch SGD on softmax cross-entropy. Batches come from a per-epoch
/// shuffle of a stream seeded by `config.seed`.
pub fn train_local_observed(
    model: &ModelState,
    shard: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(EpochReport<'_>),
) -> Result<ModelState, LearnerError> {
    config.validate()?;
    check_compatible(model, shard)?;
    let mut current = model.clone();
    let mut rng = sim_rng(config.seed, "sgd-batches", 0);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let (loss, grad) = loss_and_gradient(&current, shard, batch)?;
            if !loss.is_finite() {
                return Err(LearnerError::NonFiniteLoss { epoch });
            }
            for (p, g) in current.params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
            if !current.is_finite() {
                return Err(LearnerError::NonFiniteLoss { epoch });
            }
            loss_sum += loss;
            batches += 1;
        }
        on_epoch(EpochReport {
            epoch,
            mean_batch_loss: if batches == 0 { 0.0 } else { loss_sum / batches as f64 },
            model: &current,
        });
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_layout() {
        assert_eq!(param_count(&[64, 32, 10]), 64 * 32 + 32 + 32 * 10 + 10);
        let m = init_model(&[3, 2], 1).unwrap();
        let layers = m.layers();
        assert_eq!(layers[0].weights, 0);
        assert_eq!(layers[0].biases, 6);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_glorot_range() {
        let a = init_model(&[64, 32, 10], 5).unwrap();
        assert_eq!(a, init_model(&[64, 32, 10], 5).unwrap());
        assert_ne!(a, init_model(&[64, 32, 10], 6).unwrap());
        for layer in a.layers() {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            let w = &a.params()[layer.weights..layer.biases];
            assert!(w.iter().all(|x| x.abs() <= limit));
            let b = &a.params()[layer.biases..layer.biases + layer.fan_out];
            assert!(b.iter().all(|&x| x == 0.0));
        }
        assert!(matches!(init_model(&[64], 1), Err(LearnerError::BadArch(_))));
        assert!(matches!(init_model(&[64, 0, 10], 1), Err(LearnerError::BadArch(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1000.0, -1000.0, 3.0, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let data = super::super::generate_dataset(1, 100, 4, 3, 0.3).unwrap();
        let model = init_model(&[4, 5, 3], 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 7,
            seed: 3,
        };
        let out = train_local(&model, &data, &cfg).unwrap();
        let same = out
            .params()
            .iter()
            .zip(model.params())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let data = super::super::generate_dataset(1, 20, 5, 2, 0.3).unwrap();
        let model = init_model(&[4, 2], 2).unwrap();
        assert!(matches!(
            train_local(&model, &data, &TrainConfig::default()),
            Err(LearnerError::DimMismatch { expected: 4, got: 5 })
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let data = super::super::generate_dataset(1, 50, 4, 2, 0.3).unwrap();
        let model = init_model(&[4, 8, 2], 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 3,
            batch_size: 5,
            seed: 1,
        };
        assert!(matches!(
            train_local(&model, &data, &cfg),
            Err(LearnerError::NonFiniteLoss { .. })
        ));
    }
}
