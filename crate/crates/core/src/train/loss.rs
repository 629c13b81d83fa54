//! Composite regression + classification loss.
//!
//! `total = mae + lambda * bce`, where `mae` averages `|pred - target|` over
//! cells, valid landmarks and axes in the encoded displacement domain, and
//! `bce` averages binary cross-entropy over cells and valid landmarks.
//! Probabilities are clamped to `[1e-7, 1 - 1e-7]` inside the logarithms.

use serde::{Deserialize, Serialize};

use crate::domain::PredictionField;
use crate::error::{Error, Result};
use crate::model::network::sigmoid;
use crate::model::{FeatureMap, Float, HeadOutputs};
use crate::targets::TargetField;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub mae: f64,
    pub bce: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.mae.is_finite() && self.bce.is_finite()
    }
}

pub(crate) fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Loss of one prediction field against its target.
pub fn loss(pred: &PredictionField, tgt: &TargetField, lambda: f64) -> Result<LossTerms> {
    if pred.grid != tgt.grid || pred.num_landmarks != tgt.num_landmarks {
        return Err(Error::ShapeMismatch(format!(
            "prediction grid {:?} x {} vs target grid {:?} x {}",
            pred.grid.cell_counts, pred.num_landmarks, tgt.grid.cell_counts, tgt.num_landmarks
        )));
    }
    let k = tgt.num_landmarks;
    let dims = tgt.grid.dims();
    let cells = tgt.grid.num_cells();
    let valid = tgt.valid.iter().filter(|&&v| v).count();
    if valid == 0 {
        return Err(Error::NoValidLandmarks);
    }
    let (mut abs_sum, mut bce_sum) = (0.0, 0.0);
    for j in 0..cells {
        for l in (0..k).filter(|&l| tgt.valid[l]) {
            for a in 0..dims {
                let i = (j * k + l) * dims + a;
                abs_sum += (pred.displacements[i] - tgt.displacements[i]).abs();
            }
            bce_sum += bce(pred.probabilities[j * k + l], tgt.labels[j * k + l]);
        }
    }
    let mae = abs_sum / (cells * valid * dims) as f64;
    let bce = bce_sum / (cells * valid) as f64;
    Ok(LossTerms {
        total: mae + lambda * bce,
        mae,
        bce,
    })
}

/// Batch loss and gradients with respect to the raw head outputs.
///
/// The classification gradient is `(p - y)` per logit scaled by the BCE
/// normalizer, i.e. the gradient of the unclamped logistic loss; the two
/// agree wherever `p` lies inside the clamp interval.
pub fn batch_loss_grad<T: Float>(
    out: &HeadOutputs<T>,
    targets: &[TargetField],
    lambda: f64,
) -> Result<(LossTerms, Option<FeatureMap<T>>, FeatureMap<T>)> {
    let first = targets.first().ok_or_else(|| Error::Empty("target batch".into()))?;
    let k = first.num_landmarks;
    let dims = first.grid.dims();
    let cells = first.grid.num_cells();
    let batch = targets.len();
    let logits = &out.logits;
    if logits.batch != batch || logits.channels != k || logits.spatial() != cells {
        return Err(Error::ShapeMismatch(format!(
            "logits {}x{}x{} vs targets {batch}x{k}x{cells}",
            logits.channels,
            logits.batch,
            logits.spatial()
        )));
    }
    if let Some(reg) = &out.regression {
        if reg.batch != batch || reg.channels != k * dims || reg.spatial() != cells {
            return Err(Error::ShapeMismatch("regression output vs targets".into()));
        }
    }
    if targets.iter().any(|t| t.grid != first.grid || t.num_landmarks != k) {
        return Err(Error::ShapeMismatch("targets in a batch must share a grid".into()));
    }
    let valid_total: usize = targets.iter().map(|t| t.valid.iter().filter(|&&v| v).count()).sum();
    if valid_total == 0 {
        return Err(Error::NoValidLandmarks);
    }
    let n_bce = (cells * valid_total) as f64;
    let n_mae = n_bce * dims as f64;

    let mut bce_sum = 0.0;
    let mut d_logits = FeatureMap::zeros(k, batch, logits.shape);
    let g_cls = lambda / n_bce;
    for (b, t) in targets.iter().enumerate() {
        for l in (0..k).filter(|&l| t.valid[l]) {
            let base = (l * batch + b) * cells;
            for j in 0..cells {
                let p = sigmoid(logits.data[base + j].as_f64());
                let y = t.labels[j * k + l];
                bce_sum += bce(p, y);
                d_logits.data[base + j] = T::from_f64_lossy(g_cls * (p - y));
            }
        }
    }

    let mut abs_sum = 0.0;
    let d_reg = match &out.regression {
        Some(reg) => {
            let mut d = FeatureMap::zeros(k * dims, batch, reg.shape);
            let g = 1.0 / n_mae;
            for (b, t) in targets.iter().enumerate() {
                for l in (0..k).filter(|&l| t.valid[l]) {
                    for a in 0..dims {
                        let base = ((l * dims + a) * batch + b) * cells;
                        for j in 0..cells {
                            let diff = reg.data[base + j].as_f64() - t.displacements[(j * k + l) * dims + a];
                            abs_sum += diff.abs();
                            let s = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            d.data[base + j] = T::from_f64_lossy(g * s);
                        }
                    }
                }
            }
            Some(d)
        }
        None => None,
    };
    let mae = abs_sum / n_mae;
    let bce = bce_sum / n_bce;
    Ok((
        LossTerms {
            total: mae + lambda * bce,
            mae,
            bce,
        },
        d_reg,
        d_logits,
    ))
}
