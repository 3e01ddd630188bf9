//! Test-set evaluation: per-slice segmentation, volume assembly and metrics.

use std::collections::BTreeMap;

use uagan_autograd::Tensor;

use crate::error::{Result, UaganError};
use crate::metrics::{assemble_volume, patient_metrics, MetricsReport};
use crate::phantom::{Dataset, Grid, SliceSample};
use crate::trainer::{Batch, Model};

/// Slices per inference batch.
pub const EVAL_BATCH: usize = 16;

/// Binarizes `[N, 2, H, W]` logits by argmax; ties go to background.
pub fn argmax_masks(logits: &Tensor) -> Result<Vec<Grid<u8>>> {
    let [n, c, h, w] = logits.shape().0;
    if c != 2 {
        return Err(UaganError::Shape(format!("expected 2-channel logits, got {}", logits.shape())));
    }
    let hw = h * w;
    let d = logits.data();
    (0..n)
        .map(|i| {
            let (bg, fg) = (&d[i * 2 * hw..(i * 2 + 1) * hw], &d[(i * 2 + 1) * hw..(i * 2 + 2) * hw]);
            Grid::new(h, w, bg.iter().zip(fg).map(|(b, f)| u8::from(f > b)).collect())
        })
        .collect()
}

/// Groups slices by patient, keeping manifest order.
fn by_patient(samples: &[SliceSample]) -> Vec<Vec<&SliceSample>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&SliceSample>> = BTreeMap::new();
    for s in samples {
        if !groups.contains_key(s.patient_id.as_str()) {
            order.push(&s.patient_id);
        }
        groups.entry(&s.patient_id).or_default().push(s);
    }
    order.into_iter().map(|p| groups.remove(p).expect("grouped above")).collect()
}

/// Evaluates an arbitrary slice predictor over every test patient.
pub fn evaluate_with(
    dataset: &Dataset,
    variant: &str,
    seed: u64,
    mut predict: impl FnMut(&[&SliceSample]) -> Result<Vec<Grid<u8>>>,
) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for slices in by_patient(&dataset.samples) {
        let mut preds = Vec::with_capacity(slices.len());
        for chunk in slices.chunks(EVAL_BATCH) {
            let p = predict(chunk)?;
            if p.len() != chunk.len() {
                return Err(UaganError::Shape(format!("{} predictions for {} slices", p.len(), chunk.len())));
            }
            preds.extend(p);
        }
        let pairs: Vec<(&SliceSample, &Grid<u8>)> = slices.iter().copied().zip(preds.iter()).collect();
        rows.push(patient_metrics(&assemble_volume(&pairs)?)?);
    }
    Ok(MetricsReport { variant: variant.to_string(), seed, rows })
}

/// Segments with trained models; per-modality models see only their own modality.
pub fn evaluate(models: &[Model], dataset: &Dataset, variant: &str, seed: u64) -> Result<MetricsReport> {
    let size = dataset.manifest.image_size;
    for m in models {
        m.generator.config().validate(size)?;
        if m.generator.config().modalities != dataset.modalities() {
            return Err(UaganError::Config(format!(
                "model trained for {} modalities, dataset has {}",
                m.generator.config().modalities,
                dataset.modalities()
            )));
        }
    }
    evaluate_with(dataset, variant, seed, |chunk| {
        let modality = chunk[0].modality.index();
        let model = models
            .iter()
            .find(|m| m.modality.is_none_or(|k| k == modality))
            .ok_or_else(|| UaganError::Config(format!("no model for modality {}", chunk[0].modality.name())))?;
        let batch = Batch::from_samples(chunk)?;
        argmax_masks(&model.segment(&batch.x, &batch.labels)?)
    })
}

/// Uses the annotations themselves as predictions.
pub fn evaluate_oracle(dataset: &Dataset, seed: u64) -> Result<MetricsReport> {
    evaluate_with(dataset, "oracle", seed, |chunk| Ok(chunk.iter().map(|s| s.mask.clone()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use uagan_autograd::Shape;

    #[test]
    fn argmax_ties_to_background() {
        let t = Tensor::from_vec(Shape::new(1, 2, 1, 3), vec![0.0, 1.0, 2.0, 0.0, 1.5, 2.0]).unwrap();
        assert_eq!(argmax_masks(&t).unwrap()[0].data, vec![0, 1, 0]);
    }
}
