use crate::corpus::LabelMaps;
use crate::model::{Gradients, KuroNet, PositionList};
use crate::tensor::sigmoid_scalar;
use crate::{Scalar, Tensor};

use super::{Result, TrainError};

/// Loss terms of one page.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean binary cross-entropy over all `R²` pixels, before weighting.
    pub presence: f64,
    /// Mean cross-entropy over the character positions; 0 when there are none.
    pub character: f64,
    pub positions: usize,
    /// Fraction of pixels whose thresholded presence logit matches the target.
    pub presence_accuracy: f64,
}

fn check_resolution<T: Scalar>(model: &KuroNet<T>, labels: &LabelMaps) -> Result<()> {
    if labels.resolution != model.resolution() {
        return Err(TrainError::ResolutionMismatch {
            labels: labels.resolution,
            model: model.resolution(),
        });
    }
    Ok(())
}

fn positions(labels: &LabelMaps) -> Result<(PositionList, Vec<usize>)> {
    let (pos, cls): (Vec<_>, Vec<_>) = labels.positives().map(|(r, c, k)| ((r, c), k)).unzip();
    Ok((PositionList::new(pos, labels.resolution)?, cls))
}

/// `max(z, 0) − z·t + ln(1 + e^{−|z|})`.
fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

struct Terms {
    presence: f64,
    accuracy: f64,
    character: f64,
}

fn presence_term<T: Scalar>(logits: &Tensor<T>, labels: &LabelMaps) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (&z, &t) in logits.data().iter().zip(&labels.presence) {
        let z = z.as_f64();
        loss += bce_with_logits(z, t as f64);
        correct += usize::from((z > 0.0) == (t == 1));
    }
    let n = labels.presence.len() as f64;
    (loss / n, correct as f64 / n)
}

/// Mean cross-entropy of `[M, K]` logits against `classes`, plus the
/// gradient `(softmax − onehot) / M` when requested.
fn character_term<T: Scalar>(logits: &Tensor<T>, classes: &[usize], want_grad: bool) -> (f64, Option<Tensor<T>>) {
    let m = classes.len();
    if m == 0 {
        return (0.0, want_grad.then(|| Tensor::zeros(logits.shape())));
    }
    let k = logits.shape()[1];
    let mut loss = 0.0;
    let mut grad = want_grad.then(|| Vec::with_capacity(m * k));
    for (row, &y) in logits.data().chunks(k).zip(classes) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y].as_f64();
        if let Some(g) = grad.as_mut() {
            g.extend(row.iter().enumerate().map(|(j, v)| {
                let p = (v.as_f64() - lse).exp();
                T::of((p - f64::from(u8::from(j == y))) / m as f64)
            }));
        }
    }
    let grad = grad.map(|g| Tensor::new(&[m, k], g).expect("m*k values"));
    (loss / m as f64, grad)
}

fn breakdown(t: Terms, positions: usize, weight: f64) -> LossBreakdown {
    LossBreakdown {
        total: weight * t.presence + t.character,
        presence: t.presence,
        character: t.character,
        positions,
        presence_accuracy: t.accuracy,
    }
}

/// Presence BCE over every pixel plus character cross-entropy evaluated only
/// at the labelled positions.
pub fn compute_loss<T: Scalar>(
    model: &KuroNet<T>,
    image: &Tensor<T>,
    labels: &LabelMaps,
    presence_weight: f64,
) -> Result<LossBreakdown> {
    check_resolution(model, labels)?;
    let features = model.forward_features(image)?;
    let (presence, accuracy) = presence_term(&model.presence_logits(&features)?, labels);
    let (pos, cls) = positions(labels)?;
    let (character, _) = character_term(&model.character_logits_at(&features, &pos)?, &cls, false);
    Ok(breakdown(
        Terms {
            presence,
            accuracy,
            character,
        },
        pos.len(),
        presence_weight,
    ))
}

/// [`compute_loss`] plus accumulation of parameter gradients into `grads`.
pub fn loss_and_gradients<T: Scalar>(
    model: &KuroNet<T>,
    image: &Tensor<T>,
    labels: &LabelMaps,
    presence_weight: f64,
    grads: &mut Gradients<T>,
) -> Result<LossBreakdown> {
    check_resolution(model, labels)?;
    let (features, cache) = model.forward_train(image)?;
    let logits = model.presence_logits(&features)?;
    let (presence, accuracy) = presence_term(&logits, labels);
    let scale = presence_weight / labels.presence.len() as f64;
    let dz = Tensor::new(
        logits.shape(),
        logits
            .data()
            .iter()
            .zip(&labels.presence)
            .map(|(&z, &t)| T::of((sigmoid_scalar(z.as_f64()) - t as f64) * scale))
            .collect(),
    )?;
    let mut dfeatures = model.presence_backward(&features, &dz, grads)?;

    let (pos, cls) = positions(labels)?;
    let (character, dlogits) = character_term(&model.character_logits_at(&features, &pos)?, &cls, true);
    let dlogits = dlogits.expect("gradient requested");
    model.character_backward(&features, &pos, &dlogits, grads, &mut dfeatures)?;
    model.backward_features(&cache, &dfeatures, grads)?;
    Ok(breakdown(
        Terms {
            presence,
            accuracy,
            character,
        },
        pos.len(),
        presence_weight,
    ))
}
