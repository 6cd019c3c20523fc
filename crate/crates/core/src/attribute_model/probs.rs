//! Scalar attribute and distortion probabilities, the soft-label loss and
//! caption selection.

use crate::diffcore::{bce_term, sigmoid};
use crate::error::{Error, Result};
use crate::metrics::StrengthMatrix;

pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("dot", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// `exp(z⁺) / (exp(z⁺) + exp(z⁻))` with `z± = anchor± · e`, evaluated as
/// the logistic of `z⁺ − z⁻`.
pub fn attribute_prob(e_img: &[f64], anchor_pos: &[f64], anchor_neg: &[f64]) -> Result<f64> {
    let zp = dot(anchor_pos, e_img)?;
    let zn = dot(anchor_neg, e_img)?;
    if !zp.is_finite() || !zn.is_finite() {
        return Err(Error::Numerical(format!("non-finite anchor logits ({zp}, {zn})")));
    }
    Ok(sigmoid(zp - zn))
}

/// Softmax of one row of free weight parameters.
pub fn simplex_weights(theta: &[f64]) -> Vec<f64> {
    let m = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = theta.iter().map(|t| (t - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / s).collect()
}

pub fn check_simplex(w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::Invariant(format!("weights {w:?} are not on the simplex (sum {sum})")));
    }
    Ok(())
}

/// Weighted average of a distortion's attribute probabilities.
pub fn distortion_prob(attr_probs: &[f64], weights: &[f64]) -> Result<f64> {
    if attr_probs.len() != weights.len() {
        return Err(Error::shape("distortion_prob", &[attr_probs.len()], &[weights.len()]));
    }
    check_simplex(weights)?;
    Ok(attr_probs.iter().zip(weights).map(|(p, w)| p * w).sum())
}

/// Soft-label binary cross-entropy summed over every (image, distortion)
/// cell and divided by the cell count.
pub fn distortion_loss(pred: &StrengthMatrix, target: &StrengthMatrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        let (a, b) = (pred.shape(), target.shape());
        return Err(Error::shape("distortion_loss", &[a.0, a.1], &[b.0, b.1]));
    }
    let n = pred.as_slice().len();
    if n == 0 {
        return Err(Error::DegenerateInput("empty prediction matrix".into()));
    }
    if let Some(t) = target.as_slice().iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Data(format!("target {t} outside [0, 1]")));
    }
    let total: f64 = pred.as_slice().iter().zip(target.as_slice()).map(|(&p, &t)| bce_term(p, t)).sum();
    Ok(total / n as f64)
}

/// Index of the candidate with the largest dot product; ties go to the
/// lowest index.
pub fn infer_best_caption(e_img: &[f64], candidates: &[Vec<f64>]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Config("no caption candidates".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let s = dot(c, e_img)?;
        if s.is_nan() {
            return Err(Error::Numerical(format!("caption {i} scored NaN")));
        }
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_prob_spot_values() {
        let e = [1.0, 0.0];
        assert_eq!(attribute_prob(&e, &[0.3, 1.0], &[0.3, -1.0]).unwrap(), 0.5);
        let p = attribute_prob(&e, &[1.5, 0.0], &[0.5, 0.0]).unwrap();
        assert!((p - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-12);
        let p = attribute_prob(&e, &[-10.0, 0.0], &[10.0, 0.0]).unwrap();
        assert!((p - 2.061_153_618_190_204_5e-9).abs() < 1e-20);
        let p = attribute_prob(&e, &[1000.0, 0.0], &[-1000.0, 0.0]).unwrap();
        assert_eq!(p, 1.0);
        assert!(attribute_prob(&e, &[f64::INFINITY, 0.0], &[0.0, 0.0]).is_err());
        assert!(attribute_prob(&e, &[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn distortion_prob_examples() {
        assert_eq!(distortion_prob(&[0.37], &[1.0]).unwrap(), 0.37);
        let w = simplex_weights(&[0.3, -1.0, 2.0, 0.0, 0.1]);
        assert!((distortion_prob(&[0.6; 5], &w).unwrap() - 0.6).abs() < 1e-15);
        let p = distortion_prob(&[0.2, 0.8, 0.5, 0.5, 0.5], &[0.5, 0.5, 0.0, 0.0, 0.0]).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
        assert!(matches!(
            distortion_prob(&[0.2, 0.8], &[0.7, 0.7]),
            Err(Error::Invariant(_))
        ));
        assert!(matches!(
            distortion_prob(&[0.2, 0.8], &[1.5, -0.5]),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn loss_spot_values() {
        let one = |v: f64| StrengthMatrix::from_rows(&[vec![v]]).unwrap();
        assert!((distortion_loss(&one(0.5), &one(0.5)).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((distortion_loss(&one(0.9), &one(1.0)).unwrap() + 0.9f64.ln()).abs() < 1e-12);
        let hard = StrengthMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(distortion_loss(&hard, &hard).unwrap() <= 1e-11);
    }

    #[test]
    fn caption_rule() {
        let e = vec![0.3, -0.2, 0.9];
        assert_eq!(infer_best_caption(&e, &[vec![1.0, 1.0, 1.0]]).unwrap(), 0);
        let neg: Vec<f64> = e.iter().map(|v| -v).collect();
        assert_eq!(infer_best_caption(&e, &[neg.clone(), e.clone()]).unwrap(), 1);
        assert_eq!(infer_best_caption(&e, &[e.clone(), e.clone()]).unwrap(), 0);
        assert!(infer_best_caption(&e, &[]).is_err());
    }
}
