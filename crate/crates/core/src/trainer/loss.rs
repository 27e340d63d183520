use serde::{Deserialize, Serialize};

use crate::ednet::{sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Pixel-wise binary cross-entropy.
    #[default]
    Bce,
    /// Soft Dice loss per sample with smoothing 1.
    Dice,
    BceDice,
}

const DICE_SMOOTH: f64 = 1.0;

/// Loss value and gradient with respect to the logits. Targets are 0 or 1.
pub fn loss_and_grad(kind: LossKind, logits: &Tensor<f32>, target: &Tensor<f32>) -> (f64, Tensor<f32>) {
    assert_eq!(logits.shape(), target.shape(), "loss shapes");
    let mut grad = Tensor::zeros(logits.n, logits.c, logits.h, logits.w);
    let mut loss = 0.0;
    if matches!(kind, LossKind::Bce | LossKind::BceDice) {
        loss += bce(logits, target, &mut grad);
    }
    if matches!(kind, LossKind::Dice | LossKind::BceDice) {
        loss += dice(logits, target, &mut grad);
    }
    (loss, grad)
}

/// Loss value only.
pub fn loss_value(kind: LossKind, logits: &Tensor<f32>, target: &Tensor<f32>) -> f64 {
    loss_and_grad(kind, logits, target).0
}

fn bce(z: &Tensor<f32>, t: &Tensor<f32>, grad: &mut Tensor<f32>) -> f64 {
    let count = z.data.len() as f64;
    let mut sum = 0.0;
    let scale = (1.0 / count) as f32;
    for ((g, &z), &t) in grad.data.iter_mut().zip(&z.data).zip(&t.data) {
        let (zd, td) = (z as f64, t as f64);
        sum += zd.max(0.0) - zd * td + (-zd.abs()).exp().ln_1p();
        *g += (sigmoid(z) - t) * scale;
    }
    sum / count
}

fn dice(z: &Tensor<f32>, t: &Tensor<f32>, grad: &mut Tensor<f32>) -> f64 {
    let n = z.n;
    let mut total = 0.0;
    for i in 0..n {
        let zs = z.sample(i);
        let ts = t.sample(i);
        let p: Vec<f64> = zs.iter().map(|&v| sigmoid(v as f64)).collect();
        let inter: f64 = p.iter().zip(ts).map(|(p, &t)| p * t as f64).sum();
        let s: f64 = p.iter().sum::<f64>() + ts.iter().map(|&t| t as f64).sum::<f64>();
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = s + DICE_SMOOTH;
        total += 1.0 - num / den;
        let gs = grad.sample_mut(i);
        for ((g, &pv), &tv) in gs.iter_mut().zip(&p).zip(ts) {
            let dd_dp = (2.0 * tv as f64 * den - num) / (den * den);
            *g += (-dd_dp * pv * (1.0 - pv) / n as f64) as f32;
        }
    }
    total / n as f64
}

/// Fraction of pixels whose thresholded probability equals the target.
pub fn pixel_accuracy(logits: &Tensor<f32>, target: &Tensor<f32>) -> f64 {
    let hits = logits
        .data
        .iter()
        .zip(&target.data)
        .filter(|(&z, &t)| (z >= 0.0) == (t >= 0.5))
        .count();
    hits as f64 / logits.data.len().max(1) as f64
}
