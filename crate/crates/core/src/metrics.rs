//! Accuracy, binned calibration error and layer-wise sparsity.

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationBin {
    pub count: usize,
    /// `sum(correct - confidence)` over the bin's samples.
    pub signed_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub mace: f64,
}

/// Mean absolute calibration error over the nonempty bins of `bins` equal-width bins.
pub fn mace(confidences: &[f64], predictions: &[usize], labels: &[usize], bins: usize) -> Result<CalibrationReport> {
    if confidences.is_empty() {
        return Err(Error::invalid("mace of an empty sample"));
    }
    if predictions.len() != confidences.len() || labels.len() != confidences.len() {
        return Err(Error::Shape {
            op: "mace",
            lhs: vec![confidences.len()],
            rhs: vec![predictions.len(), labels.len()],
        });
    }
    if bins == 0 {
        return Err(Error::invalid("mace needs at least one bin"));
    }
    let mut out = vec![
        CalibrationBin {
            count: 0,
            signed_gap: 0.0,
        };
        bins
    ];
    for ((&p, &pred), &label) in confidences.iter().zip(predictions).zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("confidence {p} outside [0, 1]")));
        }
        let b = ((p * bins as f64).floor() as usize).min(bins - 1);
        let correct = if pred == label { 1.0 } else { 0.0 };
        out[b].count += 1;
        out[b].signed_gap += correct - p;
    }
    let nonempty: Vec<_> = out.iter().filter(|b| b.count > 0).collect();
    let mace = nonempty
        .iter()
        .map(|b| b.signed_gap.abs() / b.count as f64)
        .sum::<f64>()
        / nonempty.len() as f64;
    Ok(CalibrationReport { bins: out, mace })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn rows(probs: &Tensor) -> Result<(usize, usize)> {
    match probs.shape[..] {
        [n, k] if n > 0 && k > 0 => Ok((n, k)),
        _ => Err(Error::invalid(format!("expected a nonempty [n, k] matrix, got {:?}", probs.shape))),
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = rows(probs)?;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "accuracy",
            lhs: probs.shape.clone(),
            rhs: vec![labels.len()],
        });
    }
    let hits = probs
        .data
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Predicted class and its probability for every row.
pub fn confidences(probs: &Tensor) -> Result<(Vec<f64>, Vec<usize>)> {
    let (_, k) = rows(probs)?;
    Ok(probs
        .data
        .chunks(k)
        .map(|row| {
            let i = argmax(row);
            ((row[i] as f64).clamp(0.0, 1.0), i)
        })
        .unzip())
}

/// Accuracy and MACE of a probability matrix.
pub fn evaluate(probs: &Tensor, labels: &[usize], bins: usize) -> Result<(f64, f64)> {
    let acc = accuracy(probs, labels)?;
    let (conf, pred) = confidences(probs)?;
    Ok((acc, mace(&conf, &pred, labels, bins)?.mace))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSparsity {
    pub name: String,
    pub size: usize,
    pub zeros: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityProfile {
    pub layers: Vec<LayerSparsity>,
    pub global: f64,
}

/// Per-layer and global sparsity of the prunable layers, in depth order.
pub fn sparsity_profile(model: &Model) -> SparsityProfile {
    let layers: Vec<_> = model
        .prunable_parameters()
        .into_iter()
        .map(|(name, w)| {
            let size = w.numel();
            let zeros = size - w.remaining();
            LayerSparsity {
                name: name.to_string(),
                size,
                zeros,
                ratio: if size == 0 { 0.0 } else { zeros as f64 / size as f64 },
            }
        })
        .collect();
    let size: usize = layers.iter().map(|l| l.size).sum();
    let zeros: usize = layers.iter().map(|l| l.zeros).sum();
    let global = if size == 0 { 0.0 } else { zeros as f64 / size as f64 };
    SparsityProfile { layers, global }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;

    #[test]
    fn mace_fixtures() {
        assert_eq!(mace(&[1.0, 1.0], &[0, 1], &[0, 1], 10).unwrap().mace, 0.0);
        assert!((mace(&[0.8, 0.6], &[1, 1], &[1, 1], 1).unwrap().mace - 0.3).abs() < 1e-12);
        assert_eq!(mace(&[1.0, 1.0], &[0, 0], &[1, 1], 10).unwrap().mace, 1.0);
        assert!(mace(&[], &[], &[], 10).is_err());
    }

    #[test]
    fn uniform_rows_tie_to_first_class() {
        let probs = Tensor::new(vec![3, 10], vec![0.1; 30]).unwrap();
        assert_eq!(accuracy(&probs, &[0, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn sparsity_of_fully_pruned_layer() {
        let mut m = Model::build(&ModelConfig::mlp(&[2, 32, 2, 2], false), 0).unwrap();
        assert_eq!(sparsity_profile(&m).global, 0.0);
        let n = m.layers()[0].weight.numel();
        m.layers_mut()[0].weight.set_mask(&vec![false; n]).unwrap();
        let p = sparsity_profile(&m);
        assert_eq!(p.layers[0].ratio, 1.0);
        assert_eq!(p.layers[1].ratio, 0.0);
        assert_eq!(p.global, 0.5);
        assert_eq!(p.global, 1.0 - m.remaining_fraction());
    }
}
