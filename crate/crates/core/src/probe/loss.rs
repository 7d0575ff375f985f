//! Confidence-weighted, scale-normalized regression loss and the metric depth loss,
//! with closed-form gradients.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Pointmap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Mean Euclidean norm of the points.
pub fn mean_norm(points: &[Vector3<f64>]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::UndefinedScale("no valid pixels".into()));
    }
    let z = points.iter().map(|p| p.norm()).sum::<f64>() / points.len() as f64;
    if !z.is_finite() {
        return Err(Error::Numerical(format!("non-finite scale {z}")));
    }
    if z == 0.0 {
        return Err(Error::UndefinedScale("all points at the origin".into()));
    }
    Ok(z)
}

/// Mean norm over the pointmap's valid pixels.
pub fn normalize_scale(pm: &Pointmap) -> Result<f64> {
    mean_norm(&pm.valid_points())
}

/// Loss of one view together with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewLoss {
    pub value: f64,
    /// Σ ℓ over valid pixels, independent of confidence.
    pub regression_sum: f64,
    pub count: usize,
    pub d_pred: Vec<Vector3<f64>>,
    pub d_conf: Vec<f64>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("alpha must be >= 0, got {alpha}")))
    }
}

fn check_conf(conf: &[f64]) -> Result<()> {
    match conf.iter().find(|c| !(c.is_finite() && **c >= 1.0)) {
        Some(c) => Err(Error::InvalidInput(format!("confidence must be finite and >= 1, got {c}"))),
        None => Ok(()),
    }
}

/// `Σ C·‖P/z − G/z̄‖ − α·log C` over paired valid points of one view, with gradients
/// w.r.t. every predicted point and confidence (gradients are left empty unless asked for).
pub fn view_loss(pred: &[Vector3<f64>], conf: &[f64], gt: &[Vector3<f64>], alpha: f64, with_grad: bool) -> Result<ViewLoss> {
    check_alpha(alpha)?;
    if pred.len() != gt.len() || conf.len() != gt.len() {
        return Err(Error::InvalidInput("prediction, confidence and target sizes differ".into()));
    }
    check_conf(conf)?;
    let n = pred.len();
    let z = mean_norm(pred)?;
    let zg = mean_norm(gt)?;
    let mut value = 0.0;
    let mut regression_sum = 0.0;
    let mut units = Vec::with_capacity(if with_grad { n } else { 0 });
    for i in 0..n {
        let r = pred[i] / z - gt[i] / zg;
        let l = r.norm();
        value += conf[i] * l - alpha * conf[i].ln();
        regression_sum += l;
        if with_grad {
            units.push((if l > 0.0 { r / l } else { Vector3::zeros() }, l));
        }
    }
    let (mut d_pred, mut d_conf) = (Vec::new(), Vec::new());
    if with_grad {
        // ℓ_j depends on P_j directly and on every P through z = mean ‖P_k‖.
        let mut through_z = 0.0;
        for i in 0..n {
            through_z += conf[i] * units[i].0.dot(&pred[i]);
        }
        through_z /= n as f64 * z * z;
        d_pred = (0..n)
            .map(|i| {
                let norm = pred[i].norm();
                let radial = if norm > 0.0 { pred[i] / norm } else { Vector3::zeros() };
                units[i].0 * (conf[i] / z) - radial * through_z
            })
            .collect();
        d_conf = (0..n).map(|i| units[i].1 - alpha / conf[i]).collect();
    }
    Ok(ViewLoss { value, regression_sum, count: n, d_pred, d_conf })
}

fn masked(pm: &Pointmap, mask: &Pointmap) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for ((v, u), &ok) in mask.valid.indexed_iter() {
        if ok {
            out.push(pm.point(v, u));
        }
    }
    out
}

/// Two-view loss over the ground-truth valid sets. Predictions must carry confidences.
pub fn confidence_regression_loss(pred: [&Pointmap; 2], gt: [&Pointmap; 2], alpha: f64, reduction: Reduction) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for v in 0..2 {
        if pred[v].points.dim() != gt[v].points.dim() {
            return Err(Error::InvalidInput("prediction and target shapes differ".into()));
        }
        let conf_map = pred[v]
            .confidence
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("prediction has no confidence".into()))?;
        let conf: Vec<f64> = gt[v].valid.indexed_iter().filter(|(_, &ok)| ok).map(|(ix, _)| conf_map[ix]).collect();
        let l = view_loss(&masked(pred[v], gt[v]), &conf, &masked(gt[v], gt[v]), alpha, false)?;
        total += l.value;
        count += l.count;
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / count as f64,
    })
}

/// `d = exp(x / c)`.
pub fn depth_from_raw(raw: f64, c: f64) -> f64 {
    (raw / c).exp()
}

/// Metric depth loss `Σ C·|d − d̄| − α·log C` with gradients w.r.t. the raw depth output and C.
pub fn depth_loss(raw: &[f64], conf: &[f64], gt: &[f64], alpha: f64, c: f64, with_grad: bool) -> Result<ViewLoss> {
    check_alpha(alpha)?;
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidInput(format!("depth scale must be > 0, got {c}")));
    }
    if raw.len() != gt.len() || conf.len() != gt.len() {
        return Err(Error::InvalidInput("prediction, confidence and target sizes differ".into()));
    }
    if gt.is_empty() {
        return Err(Error::UndefinedScale("no valid pixels".into()));
    }
    check_conf(conf)?;
    let mut value = 0.0;
    let mut regression_sum = 0.0;
    let (mut d_raw, mut d_conf) = (Vec::new(), Vec::new());
    for i in 0..gt.len() {
        let d = depth_from_raw(raw[i], c);
        let l = (d - gt[i]).abs();
        value += conf[i] * l - alpha * conf[i].ln();
        regression_sum += l;
        if with_grad {
            d_raw.push(conf[i] * (d - gt[i]).signum() * d / c);
            d_conf.push(l - alpha / conf[i]);
        }
    }
    let d_pred = d_raw.into_iter().map(|g| Vector3::new(g, 0.0, 0.0)).collect();
    Ok(ViewLoss { value, regression_sum, count: gt.len(), d_pred, d_conf })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn single(p: [f64; 3], c: Option<f64>) -> Pointmap {
        let points = Array3::from_shape_vec((1, 1, 3), p.to_vec()).unwrap();
        Pointmap::new(points, c.map(|c| Array2::from_elem((1, 1), c)), Array2::from_elem((1, 1), true)).unwrap()
    }

    #[test]
    fn scale_examples() {
        assert_eq!(mean_norm(&[Vector3::new(1.0, 0.0, 0.0); 4]).unwrap(), 1.0);
        assert_eq!(mean_norm(&[Vector3::new(3.0, 0.0, 0.0), Vector3::new(0.0, 4.0, 0.0)]).unwrap(), 3.5);
        assert!(matches!(mean_norm(&[]), Err(Error::UndefinedScale(_))));
    }

    #[test]
    fn one_pixel_fixture() {
        let e = std::f64::consts::E;
        let pred = [single([1.0, 0.0, 0.0], Some(e)), single([0.0, 0.0, 1.0], Some(1.0))];
        let gt = [single([0.0, 1.0, 0.0], None), single([0.0, 0.0, 1.0], None)];
        let l = confidence_regression_loss([&pred[0], &pred[1]], [&gt[0], &gt[1]], 0.2, Reduction::Sum).unwrap();
        assert!((l - (e * 2f64.sqrt() - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = [Vector3::new(1.0, 0.0, 0.0)];
        assert!(view_loss(&x, &[0.5], &x, 0.2, false).is_err());
        assert!(view_loss(&x, &[f64::INFINITY], &x, 0.2, false).is_err());
        let g = single([1.0, 0.0, 0.0], None);
        let p = single([1.0, 0.0, 0.0], Some(1.0));
        assert!(confidence_regression_loss([&p, &p], [&g, &g], -1.0, Reduction::Sum).is_err());
        let mut empty = g.clone();
        empty.valid.fill(false);
        assert!(confidence_regression_loss([&p, &p], [&empty, &g], 0.2, Reduction::Sum).is_err());
    }

    #[test]
    fn depth_scalars() {
        assert_eq!(depth_from_raw(0.0, 3.0), 1.0);
        assert!((depth_from_raw(4.0, 4.0) - std::f64::consts::E).abs() < 1e-15);
    }
}
