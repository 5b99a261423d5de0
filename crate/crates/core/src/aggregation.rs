//! Unweighted element-wise model averaging.

use thiserror::Error;

use crate::learner::ModelState;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AggregationError {
    #[error("cannot average an empty list of models")]
    EmptyList,
    #[error("model {index} has architecture {found:?}, expected {expected:?}")]
    ArchMismatch {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub fn average_models(models: &[ModelState]) -> Result<ModelState, AggregationError> {
    average_model_refs(&models.iter().collect::<Vec<_>>())
}

/// Mean of every parameter across `models`, each model counting once.
///
/// Sums are accumulated in list order as offsets from the first model, so
/// identical inputs come back bit-exact, and the result is clamped to the
/// per-element input range.
pub fn average_model_refs(models: &[&ModelState]) -> Result<ModelState, AggregationError> {
    let first = *models.first().ok_or(AggregationError::EmptyList)?;
    for (index, m) in models.iter().enumerate().skip(1) {
        if m.arch() != first.arch() {
            return Err(AggregationError::ArchMismatch {
                index,
                expected: first.arch().to_vec(),
                found: m.arch().to_vec(),
            });
        }
    }
    let count = models.len() as f64;
    let base = first.params();
    let mut offsets = vec![0.0f64; base.len()];
    let mut lo = base.to_vec();
    let mut hi = base.to_vec();
    for m in &models[1..] {
        for (i, &p) in m.params().iter().enumerate() {
            offsets[i] += p - base[i];
            lo[i] = lo[i].min(p);
            hi[i] = hi[i].max(p);
        }
    }
    let params = offsets
        .iter()
        .enumerate()
        .map(|(i, &off)| (base[i] + off / count).clamp(lo[i], hi[i]))
        .collect();
    Ok(ModelState::from_parts(first.arch().to_vec(), params)
        .expect("architecture and length copied from a valid model"))
}
