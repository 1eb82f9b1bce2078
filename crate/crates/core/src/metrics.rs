//! Accuracy and fairness measures over client datasets.

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{forward_batch, ModelWeights, ViTConfig};

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairnessSummary {
    pub mean_acc: f64,
    pub weighted_mean_acc: f64,
    pub min_acc: f64,
    pub max_acc: f64,
    pub spread: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `logsumexp(row) − row[label]`.
pub fn cross_entropy_row(row: &[f64], label: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - row[label]
}

/// Counts correct argmax predictions and the summed cross-entropy of a
/// `samples×classes` logit matrix.
pub fn score_logits(logits: &Tensor, labels: &[usize]) -> Result<(usize, f64)> {
    let (n, k) = logits.dims2("score_logits")?;
    if n != labels.len() {
        return Err(crate::error::shape_err(
            "score_logits",
            format!("{n} rows for {} labels", labels.len()),
        ));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for (row, &l) in logits.data().chunks(k).zip(labels) {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
        correct += usize::from(argmax(row) == l);
        loss += cross_entropy_row(row, l);
    }
    Ok((correct, loss))
}

/// Fraction of `data` the model classifies correctly, with its mean loss.
pub fn accuracy(model: &ModelWeights, data: &Dataset, config: &ViTConfig) -> Result<ClientMetrics> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let images: Vec<&Tensor> = data.images[start..end].iter().collect();
        let logits = forward_batch(model, &images, config)?;
        let (c, l) = score_logits(&logits, &data.labels[start..end])?;
        correct += c;
        loss += l;
    }
    let total = data.len();
    Ok(ClientMetrics {
        client_id: 0,
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        mean_loss: loss / total as f64,
    })
}

/// Worst accuracy of one model over several client test sets.
pub fn lowest_global_accuracy(
    model: &ModelWeights,
    test_sets: &[Dataset],
    config: &ViTConfig,
) -> Result<f64> {
    if test_sets.is_empty() {
        return Err(Error::Empty("client test sets"));
    }
    let mut lowest = f64::INFINITY;
    for d in test_sets {
        lowest = lowest.min(accuracy(model, d, config)?.accuracy);
    }
    Ok(lowest)
}

/// `Σ vᵢ·nᵢ / Σ nᵢ`.
pub fn weighted_mean(values: &[f64], sizes: &[usize]) -> Result<f64> {
    if values.len() != sizes.len() {
        return Err(crate::error::shape_err(
            "weighted_mean",
            format!("{} values for {} sizes", values.len(), sizes.len()),
        ));
    }
    if values.is_empty() {
        return Err(Error::Empty("weighted_mean input"));
    }
    if sizes.contains(&0) {
        return Err(Error::Config("weighted_mean sizes must be positive".into()));
    }
    let total: usize = sizes.iter().sum();
    let num: f64 = values.iter().zip(sizes).map(|(v, &n)| v * n as f64).sum();
    Ok(num / total as f64)
}

pub fn fairness_summary(per_client: &[ClientMetrics]) -> Result<FairnessSummary> {
    if per_client.is_empty() {
        return Err(Error::Empty("client metrics"));
    }
    let accs: Vec<f64> = per_client.iter().map(|m| m.accuracy).collect();
    let sizes: Vec<usize> = per_client.iter().map(|m| m.total).collect();
    let min_acc = accs.iter().copied().fold(f64::INFINITY, f64::min);
    let max_acc = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // rounding can push a mean of equal values a hair outside [min, max]
    let mean_acc = (accs.iter().sum::<f64>() / accs.len() as f64).clamp(min_acc, max_acc);
    let weighted_mean_acc = weighted_mean(&accs, &sizes)?.clamp(min_acc, max_acc);
    Ok(FairnessSummary {
        mean_acc,
        weighted_mean_acc,
        min_acc,
        max_acc,
        spread: max_acc - min_acc,
    })
}
