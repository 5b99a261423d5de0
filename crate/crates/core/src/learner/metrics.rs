use serde::{Deserialize, Serialize};

use super::{Dataset, LearnerError, ModelState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub correct: usize,
    pub total: usize,
}

impl Metrics {
    /// Accuracy in integer basis points, floor(correct * 10000 / total).
    pub fn accuracy_bp(&self) -> u16 {
        if self.total == 0 {
            return 0;
        }
        ((self.correct as u64 * 10_000) / self.total as u64) as u16
    }
}

/// `matrix[truth][predicted]` counts.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        m[t][p] += 1;
    }
    m
}

/// Accuracy plus macro-averaged precision and recall. A class whose
/// precision or recall is 0/0 contributes 0 to the average.
pub fn metrics_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<Metrics, LearnerError> {
    if labels.is_empty() {
        return Err(LearnerError::EmptyTestset);
    }
    if predictions.len() != labels.len() {
        return Err(LearnerError::DimMismatch {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(LearnerError::LabelOutOfRange { label: bad, classes });
    }
    let cm = confusion_matrix(predictions, labels, classes);
    let correct: usize = (0..classes).map(|c| cm[c][c]).sum();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    for c in 0..classes {
        let predicted: usize = (0..classes).map(|t| cm[t][c]).sum();
        let actual: usize = cm[c].iter().sum();
        precision_sum += ratio(cm[c][c], predicted);
        recall_sum += ratio(cm[c][c], actual);
    }
    Ok(Metrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_precision: precision_sum / classes as f64,
        macro_recall: recall_sum / classes as f64,
        correct,
        total: labels.len(),
    })
}

pub fn evaluate(model: &ModelState, testset: &Dataset) -> Result<Metrics, LearnerError> {
    if testset.dim() != model.input_dim() {
        return Err(LearnerError::DimMismatch {
            expected: model.input_dim(),
            got: testset.dim(),
        });
    }
    if testset.is_empty() {
        return Err(LearnerError::EmptyTestset);
    }
    let predictions: Vec<usize> = testset.rows().map(|(x, _)| model.predict(x)).collect();
    metrics_from_predictions(&predictions, testset.labels(), model.output_dim())
}
