//! Classification losses over logits of shape `(batch, classes, 1, 1)`.
//! Every loss is a batch mean and returns its gradient w.r.t. the logits.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v as f64 - lse).collect()
}

pub fn softmax(row: &[f32]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

/// Row-wise class probabilities, used as fixed soft targets.
pub fn probabilities(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(logits.shape());
    for n in 0..logits.batch() {
        let p = softmax(logits.row(n));
        out.sample_mut(n).iter_mut().zip(p).for_each(|(o, v)| *o = v as f32);
    }
    out
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, c, _, _] = logits.shape();
    if labels.len() != n || n == 0 {
        return Err(Error::invalid(format!("{} labels for {n} logits", labels.len())));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
        }
        let logp = log_softmax(logits.row(s));
        loss -= logp[y];
        for (k, g) in grad.sample_mut(s).iter_mut().enumerate() {
            let target = if k == y { 1.0 } else { 0.0 };
            *g = ((logp[k].exp() - target) / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

/// `KL(target || softmax(student))`, with `target` a probability tensor
/// treated as a constant.
pub fn kl_divergence(target: &Tensor, student_logits: &Tensor) -> Result<(f64, Tensor)> {
    if target.shape() != student_logits.shape() || target.batch() == 0 {
        return Err(Error::invalid("target and student logits must share a non-empty shape"));
    }
    let n = target.batch();
    let mut grad = Tensor::zeros(student_logits.shape());
    let mut loss = 0.0;
    for s in 0..n {
        let logq = log_softmax(student_logits.row(s));
        let mut row = 0.0;
        for ((&p, &lq), g) in target.row(s).iter().zip(&logq).zip(grad.sample_mut(s)) {
            let p = p as f64;
            if p > 0.0 {
                row += p * (p.ln() - lq);
            }
            *g = ((lq.exp() - p) / n as f64) as f32;
        }
        // f32 targets can push a near-zero divergence slightly negative.
        loss += f64::max(row, 0.0);
    }
    Ok((loss / n as f64, grad))
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    (0..logits.batch()).filter(|&s| argmax(logits.row(s)) == labels[s]).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits() -> Tensor {
        Tensor::from_vec([3, 4, 1, 1], vec![0.5, -1.0, 2.0, 0.1, 3.0, 3.0, -2.0, 0.0, -0.3, 0.2, 0.9, -1.5]).unwrap()
    }

    fn numeric_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
        let eps = 1e-3;
        (0..x.data().len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += eps;
                let mut m = x.clone();
                m.data_mut()[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps as f64)
            })
            .collect()
    }

    #[test]
    fn cross_entropy_gradient() {
        let x = logits();
        let labels = [2, 1, 0];
        let (_, g) = cross_entropy(&x, &labels).unwrap();
        let fd = numeric_grad(|t| cross_entropy(t, &labels).unwrap().0, &x);
        for (a, b) in g.data().iter().zip(fd) {
            assert!((*a as f64 - b).abs() < 1e-3);
        }
    }

    #[test]
    fn kl_is_zero_on_match_and_positive_otherwise() {
        let x = logits();
        let p = probabilities(&x);
        assert!(kl_divergence(&p, &x).unwrap().0.abs() < 1e-6);
        let mut y = x.clone();
        y.data_mut()[0] += 1.0;
        assert!(kl_divergence(&p, &y).unwrap().0 > 0.0);
    }

    #[test]
    fn kl_gradient() {
        let target = probabilities(&Tensor::from_vec([3, 4, 1, 1], vec![1.0; 12]).unwrap());
        let x = logits();
        let (_, g) = kl_divergence(&target, &x).unwrap();
        let fd = numeric_grad(|t| kl_divergence(&target, t).unwrap().0, &x);
        for (a, b) in g.data().iter().zip(fd) {
            assert!((*a as f64 - b).abs() < 1e-3);
        }
    }

    #[test]
    fn bad_labels_rejected() {
        assert!(cross_entropy(&logits(), &[0, 1]).is_err());
        assert!(cross_entropy(&logits(), &[0, 1, 4]).is_err());
    }

    #[test]
    fn accuracy_count() {
        assert_eq!(count_correct(&logits(), &[2, 0, 2]), 3);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }
}
