//! Inference, accuracy and confusion matrices.

use mpaf_tensor::{Tape, Tensor};

use crate::checkpoint::{Checkpoint, Model};
use crate::crossmodal::{argmax_rows, logits};
use crate::data::{Dataset, Split};
use crate::encoder::{FrozenWeights, ImageFeatures, VisualPromptStack};
use crate::prototype::stack_images;
use crate::Result;

pub const EVAL_BATCH: usize = 64;

/// Encodes images in manifest order, `EVAL_BATCH` at a time.
pub fn encode_all(
    weights: &FrozenWeights,
    visual: Option<&VisualPromptStack>,
    images: &[Tensor],
) -> Result<Vec<ImageFeatures>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let batch = stack_images(chunk)?;
        out.extend(weights.encode_images(&[batch], visual)?);
    }
    Ok(out)
}

/// Row-major `[N, C]` logits for precomputed image features.
pub fn feature_logits(
    features: &[ImageFeatures],
    text_features: &Tensor,
    k: usize,
    local_alignment: bool,
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(features.len() * text_features.shape()[0]);
    for chunk in features.chunks(EVAL_BATCH) {
        let tape = Tape::new();
        let global = tape.constant(stack_images(chunk.iter().map(|f| &f.global))?);
        let locals = if local_alignment {
            Some(tape.constant(stack_images(chunk.iter().map(|f| &f.locals))?))
        } else {
            None
        };
        let text = tape.constant(text_features.clone());
        out.extend_from_slice(logits(global, locals, text, k)?.value().data());
    }
    Ok(out)
}

impl Model {
    pub fn encode(&self, images: &[Tensor]) -> Result<Vec<ImageFeatures>> {
        encode_all(&self.weights, self.visual.as_ref(), images)
    }

    pub fn logits(&self, images: &[Tensor]) -> Result<Vec<f32>> {
        feature_logits(&self.encode(images)?, &self.text_features, self.k, self.local_alignment)
    }

    pub fn predict(&self, images: &[Tensor]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(images)?, self.text_features.shape()[0]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn new(predictions: Vec<usize>, labels: &[usize], num_classes: usize) -> Self {
        let mut confusion = vec![vec![0; num_classes]; num_classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            confusion[y][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let accuracy = if labels.is_empty() {
            0.0
        } else {
            correct as f64 / labels.len() as f64
        };
        Self {
            accuracy,
            confusion,
            predictions,
        }
    }

    pub fn render(&self, classes: &[String]) -> String {
        let mut s = format!("accuracy {:.4}\n", self.accuracy);
        s.push_str("true\\pred");
        for c in classes {
            s.push('\t');
            s.push_str(c);
        }
        s.push('\n');
        for (c, row) in classes.iter().zip(&self.confusion) {
            s.push_str(c);
            for v in row {
                s.push_str(&format!("\t{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Accuracy and confusion matrix of `checkpoint` on one split.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    checkpoint.check_dataset(&dataset.hash())?;
    let model = checkpoint.model()?;
    let data = dataset.split(split);
    let predictions = model.predict(&data.images)?;
    Ok(EvalReport::new(predictions, &data.labels, dataset.classes.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_rows_and_trace() {
        let r = EvalReport::new(vec![0, 1, 1, 2, 0], &[0, 1, 2, 2, 1], 3);
        assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![1, 1, 0], vec![0, 1, 1]]);
        let rows: Vec<usize> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(rows, vec![1, 2, 2]);
        assert!((r.accuracy - 0.6).abs() < 1e-12);
    }
}
