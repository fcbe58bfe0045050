//! Straight-line scalar reference implementations used as test oracles.
//!
//! Nothing here touches the tape: every quantity is recomputed per sample with
//! plain `f64` loops directly from its definition.

use cored::network::Activation;
use cored::Network;

const FLOOR: f64 = 1e-12;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(FLOOR, 1.0 - FLOOR)
}

/// Two-class tempered softmax of one row.
pub fn softmax2(z: [f64; 2], t: f64) -> [f64; 2] {
    let e0 = (z[0] / t).exp();
    let e1 = (z[1] / t).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

pub fn student_loss_one(z: [f64; 2], label: u8) -> f64 {
    let p = softmax2(z, 1.0);
    // −[t ln σ₁ + (1−t) ln(1−σ₁)] with σ₁ the fake probability
    let t = label as f64;
    -(t * clamp_prob(p[1]).ln() + (1.0 - t) * clamp_prob(p[0]).ln())
}

pub fn student_loss(logits: &[[f64; 2]], labels: &[u8]) -> f64 {
    let total: f64 = logits.iter().zip(labels).map(|(&z, &y)| student_loss_one(z, y)).sum();
    total / logits.len() as f64
}

pub fn distillation_one(teacher: [f64; 2], student: [f64; 2], tau: f64) -> f64 {
    let pt = softmax2(teacher, tau);
    let ps = softmax2(student, tau);
    -(pt[0] * clamp_prob(ps[0]).ln() + pt[1] * clamp_prob(ps[1]).ln())
}

pub fn distillation_loss(teacher: &[[f64; 2]], student: &[[f64; 2]], tau: f64) -> f64 {
    let total: f64 = teacher.iter().zip(student).map(|(&t, &s)| distillation_one(t, s, tau)).sum();
    total / teacher.len() as f64
}

pub fn entropy(p: [f64; 2]) -> f64 {
    -(p[0] * p[0].ln() + p[1] * p[1].ln())
}

/// Block of a teacher true-class probability: `min(floor((p − m)/v), b − 1)`,
/// or `None` below `m`.
pub fn block_index(p: f64, b: usize, v: f64, m: f64) -> Option<usize> {
    if p < m {
        return None;
    }
    Some((((p - m) / v).floor() as usize).min(b - 1))
}

/// Sum over classes and populated blocks of the squared gap between student and
/// teacher mean true-class probabilities.
pub fn representation_loss(
    teacher_probs: &[[f64; 2]],
    student_probs: &[[f64; 2]],
    labels: &[u8],
    b: usize,
    v: f64,
    m: f64,
) -> f64 {
    let mut loss = 0.0;
    for class in 0..2u8 {
        for k in 0..b {
            let mut count = 0usize;
            let mut t_sum = 0.0;
            let mut s_sum = 0.0;
            for i in 0..labels.len() {
                if labels[i] != class {
                    continue;
                }
                let pt = teacher_probs[i][class as usize];
                if block_index(pt, b, v, m) == Some(k) {
                    count += 1;
                    t_sum += pt;
                    s_sum += student_probs[i][class as usize];
                }
            }
            if count > 0 {
                let gap = s_sum / count as f64 - t_sum / count as f64;
                loss += gap * gap;
            }
        }
    }
    loss
}

/// Plain forward pass reading the network's weights (`fan_in × fan_out`),
/// applying each layer's activation.
pub fn forward(net: &Network<f64>, input: &[f64]) -> [f64; 2] {
    let layers = net.layers();
    let mut h = input.to_vec();
    for layer in layers {
        let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
        let w = layer.weights.data();
        let bias = layer.bias.data();
        let mut out = vec![0.0; fan_out];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = bias[j];
            for (i, &x) in h.iter().enumerate().take(fan_in) {
                acc += x * w[i * fan_out + j];
            }
            *o = if layer.activation == Activation::Relu { acc.max(0.0) } else { acc };
        }
        h = out;
    }
    [h[0], h[1]]
}

/// F1 of the positive class from explicit counts; zero when undefined.
pub fn f1_by_counting(predictions: &[u8], labels: &[u8], positive: u8) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == positive && y == positive {
            tp += 1.0;
        } else if p == positive {
            fp += 1.0;
        } else if y == positive {
            fn_ += 1.0;
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fn_)
}

/// AUROC by counting every positive/negative pair, ties worth one half.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}
