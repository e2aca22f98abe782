//! Training objectives.
//!
//! All cross-entropies clamp probabilities to `[eps, 1 - eps]` before taking
//! logarithms. Gradients with respect to probabilities follow the clamped
//! loss exactly (zero where clamping is active). The trainer instead uses the
//! logit-space gradient `p - y` of the sigmoid/cross-entropy pair, which
//! agrees with the chain rule wherever clamping is inactive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AnnotationMask, GridLabel, ProbGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the masked loss term.
    pub lambda_w: f64,
    /// Weight of the domain-classification term.
    pub lambda_domain: f64,
    /// Probability floor inside logarithms.
    pub epsilon_num: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_w: 1.0,
            lambda_domain: 1.0,
            epsilon_num: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_w) || !ok(self.lambda_domain) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.epsilon_num > 0.0 && self.epsilon_num < 0.5) {
            return Err(Error::Config("epsilon_num must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

#[inline]
fn bce(p: f64, y: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[inline]
fn bce_grad(p: f64, y: f64, eps: f64) -> f64 {
    if p < eps || p > 1.0 - eps {
        0.0
    } else {
        -(y / p) + (1.0 - y) / (1.0 - p)
    }
}

fn check_shapes(probs: &ProbGrid, label: &GridLabel) -> Result<()> {
    if probs.shape != label.shape() {
        return Err(Error::InvalidInput(format!(
            "prediction shape {:?} does not match label shape {:?}",
            probs.shape,
            label.shape()
        )));
    }
    Ok(())
}

fn check_mask(probs: &ProbGrid, mask: &AnnotationMask) -> Result<()> {
    if mask.rows() != probs.shape.rows || mask.cols() != probs.shape.cols {
        return Err(Error::InvalidInput(format!(
            "mask {}x{} does not match grid {}x{}",
            mask.rows(),
            mask.cols(),
            probs.shape.rows,
            probs.shape.cols
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy over every entry of the grid.
pub fn supervised_loss(probs: &ProbGrid, label: &GridLabel, eps: f64) -> Result<f64> {
    check_shapes(probs, label)?;
    let n = probs.values.len();
    let sum: f64 = probs
        .values
        .iter()
        .zip(label.values())
        .map(|(&p, &y)| bce(p, y as f64, eps))
        .sum();
    Ok(sum / n as f64)
}

/// Cross-entropy restricted to annotated cells, normalized by the number of
/// annotated entries (cells times classes). Exactly 0 for an empty mask.
pub fn masked_loss(probs: &ProbGrid, label: &GridLabel, mask: &AnnotationMask, eps: f64) -> Result<f64> {
    masked_loss_batch(&[(probs, label, mask)], eps)
}

/// Gradient of [`masked_loss`] with respect to each probability entry.
pub fn masked_loss_grad(
    probs: &ProbGrid,
    label: &GridLabel,
    mask: &AnnotationMask,
    eps: f64,
) -> Result<Vec<f64>> {
    check_shapes(probs, label)?;
    check_mask(probs, mask)?;
    let c = probs.shape.classes;
    let n_annotated = mask.count() * c;
    let mut grad = vec![0.0; probs.values.len()];
    if n_annotated == 0 {
        return Ok(grad);
    }
    for (cell, &on) in mask.as_slice().iter().enumerate() {
        if !on {
            continue;
        }
        for k in 0..c {
            let i = cell * c + k;
            grad[i] = bce_grad(probs.values[i], label.values()[i] as f64, eps) / n_annotated as f64;
        }
    }
    Ok(grad)
}

/// Masked loss pooled over a batch: the annotated entries of all items form
/// one set.
pub fn masked_loss_batch(items: &[(&ProbGrid, &GridLabel, &AnnotationMask)], eps: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (probs, label, mask) in items {
        check_shapes(probs, label)?;
        check_mask(probs, mask)?;
        let c = probs.shape.classes;
        for (cell, &on) in mask.as_slice().iter().enumerate() {
            if !on {
                continue;
            }
            for k in 0..c {
                let i = cell * c + k;
                sum += bce(probs.values[i], label.values()[i] as f64, eps);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// `L_S + lambda_w * L_W`.
pub fn combined_loss(supervised: f64, masked: f64, cfg: &LossConfig) -> Result<f64> {
    if !supervised.is_finite() || !masked.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss terms (L_S = {supervised}, L_W = {masked})"
        )));
    }
    Ok(supervised + cfg.lambda_w * masked)
}

/// Mean per-pixel binary cross-entropy of the domain classifier.
pub fn domain_loss(dom_probs: &[f64], targets: &[f64], eps: f64) -> Result<f64> {
    if dom_probs.len() != targets.len() {
        return Err(Error::InvalidInput(format!(
            "{} domain predictions for {} targets",
            dom_probs.len(),
            targets.len()
        )));
    }
    if dom_probs.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = dom_probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| bce(p, y, eps))
        .sum();
    Ok(sum / dom_probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;

    const EPS: f64 = 1e-7;

    fn grid(shape: GridShape, values: Vec<f64>) -> ProbGrid {
        ProbGrid::new(shape, values).unwrap()
    }

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let shape = GridShape::new(2, 2, 1);
        let label = GridLabel::from_values(shape, vec![1, 0, 0, 1]).unwrap();
        let probs = grid(shape, vec![1.0, 0.0, 0.0, 1.0]);
        let l = supervised_loss(&probs, &label, EPS).unwrap();
        assert!(l <= -(1.0 - EPS).ln() + 1e-15);
    }

    #[test]
    fn supervised_examples() {
        let shape = GridShape::new(1, 1, 1);
        let l = supervised_loss(&grid(shape, vec![0.5]), &GridLabel::from_values(shape, vec![1]).unwrap(), EPS)
            .unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let shape = GridShape::new(1, 1, 2);
        let l = supervised_loss(
            &grid(shape, vec![0.9, 0.1]),
            &GridLabel::from_values(shape, vec![1, 0]).unwrap(),
            EPS,
        )
        .unwrap();
        assert!((l - (-(0.9f64).ln())).abs() < 1e-12);
        assert!((l - 0.1054).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_is_invalid_input() {
        let probs = grid(GridShape::new(1, 1, 2), vec![0.5, 0.5]);
        let label = GridLabel::zeros(GridShape::new(1, 1, 1));
        assert!(matches!(supervised_loss(&probs, &label, EPS), Err(Error::InvalidInput(_))));
        assert!(domain_loss(&[0.5], &[0.0, 1.0], EPS).is_err());
    }

    #[test]
    fn empty_mask_is_zero_with_zero_gradient() {
        let shape = GridShape::new(3, 3, 2);
        let probs = grid(shape, (0..18).map(|i| 0.05 + i as f64 * 0.05).collect());
        let label = GridLabel::zeros(shape);
        let mask = AnnotationMask::empty(3, 3);
        assert_eq!(masked_loss(&probs, &label, &mask, EPS).unwrap(), 0.0);
        assert!(masked_loss_grad(&probs, &label, &mask, EPS).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_annotated_cell() {
        let shape = GridShape::new(2, 2, 1);
        let mut label = GridLabel::zeros(shape);
        label.set(0, 1, 0, true);
        let probs = grid(shape, vec![0.3, 0.8, 0.6, 0.1]);
        let mask = AnnotationMask::from_cells(2, 2, [(0, 1)]);
        let l = masked_loss(&probs, &label, &mask, EPS).unwrap();
        assert!((l - (-(0.8f64).ln())).abs() < 1e-12);
        assert!((l - 0.2231).abs() < 1e-4);
    }

    #[test]
    fn combined_examples() {
        let cfg = LossConfig::default();
        assert!((combined_loss(0.3, 0.2, &cfg).unwrap() - 0.5).abs() < 1e-15);
        let off = LossConfig { lambda_w: 0.0, ..cfg };
        assert_eq!(combined_loss(0.3, 0.2, &off).unwrap(), 0.3);
        assert_eq!(combined_loss(0.3, 0.0, &cfg).unwrap(), 0.3);
        assert!(matches!(combined_loss(f64::NAN, 0.0, &cfg), Err(Error::Divergence(_))));
        assert!(matches!(combined_loss(0.1, f64::INFINITY, &cfg), Err(Error::Divergence(_))));
    }

    #[test]
    fn domain_loss_at_chance() {
        let l = domain_loss(&[0.5; 4], &[0.0, 0.0, 1.0, 1.0], EPS).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = domain_loss(&[0.5; 2], &[1.0, 1.0], EPS).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(domain_loss(&[0.0, 1.0], &[0.0, 1.0], EPS).unwrap() < 1e-6);
    }

    #[test]
    fn invalid_loss_config() {
        assert!(LossConfig { lambda_w: -1.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
