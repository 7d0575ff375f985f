//! Evaluation math: scale/shift-invariant pointmap error, weighted Procrustes, aligned
//! second-view error, layer contributions, depth metrics and correspondence recall.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pointmap, Pose};
use crate::harness::Sublayer;
use crate::scene::{patch_center, PatchCorrespondences};

/// Median; an even count yields the midpoint of the two central values.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("median of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn masked_points(pm: &Pointmap, mask: &Array2<bool>) -> Vec<Vector3<f64>> {
    mask.indexed_iter().filter(|(_, &ok)| ok).map(|((v, u), _)| pm.point(v, u)).collect()
}

fn shift_depth(points: &mut [Vector3<f64>]) -> Result<()> {
    let z: Vec<f64> = points.iter().map(|p| p.z).collect();
    let zmed = median(&z)?;
    for p in points.iter_mut() {
        p.z -= zmed;
    }
    Ok(())
}

/// Median distance of both views' points to their coordinate-wise median.
fn median_scale(views: [&[Vector3<f64>]; 2]) -> Result<f64> {
    let all: Vec<&Vector3<f64>> = views[0].iter().chain(views[1].iter()).collect();
    let mut origin = Vector3::zeros();
    for k in 0..3 {
        origin[k] = median(&all.iter().map(|p| p[k]).collect::<Vec<_>>())?;
    }
    let s = median(&all.iter().map(|p| (*p - origin).norm()).collect::<Vec<_>>())?;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::UndefinedScale(format!("median scale is {s}")));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsInvError {
    /// Sum over both views.
    pub total: f64,
    pub per_view: [f64; 2],
    pub count: [usize; 2],
    /// `s̄_med / s_med` applied to the prediction.
    pub scale: f64,
}

impl SsInvError {
    pub fn mean(&self, view: usize) -> f64 {
        self.per_view[view] / self.count[view] as f64
    }
}

/// Scale and depth-shift invariant error over the ground-truth valid pixels.
///
/// Every pointmap has its own median depth removed; one scale per side (prediction,
/// ground truth) is the median distance of both views' points to their coordinate-wise
/// median, and the prediction is rescaled to the ground-truth scale.
pub fn scale_shift_invariant_error(pred: [&Pointmap; 2], gt: [&Pointmap; 2]) -> Result<SsInvError> {
    let mut p: [Vec<Vector3<f64>>; 2] = Default::default();
    let mut g: [Vec<Vector3<f64>>; 2] = Default::default();
    for v in 0..2 {
        if pred[v].points.dim() != gt[v].points.dim() {
            return Err(Error::InvalidInput("prediction and target shapes differ".into()));
        }
        p[v] = masked_points(pred[v], &gt[v].valid);
        g[v] = masked_points(gt[v], &gt[v].valid);
        if g[v].is_empty() {
            return Err(Error::InvalidInput(format!("view {} has no valid pixels", v + 1)));
        }
        if p[v].iter().any(|x| !x.iter().all(|c| c.is_finite())) {
            return Err(Error::Numerical("non-finite predicted point".into()));
        }
        shift_depth(&mut p[v])?;
        shift_depth(&mut g[v])?;
    }
    let s = median_scale([&p[0], &p[1]])?;
    let sg = median_scale([&g[0], &g[1]])?;
    let k = sg / s;
    let mut per_view = [0.0; 2];
    for v in 0..2 {
        per_view[v] = p[v].iter().zip(&g[v]).map(|(a, b)| (a * k - b).norm()).sum();
    }
    Ok(SsInvError { total: per_view[0] + per_view[1], per_view, count: [p[0].len(), p[1].len()], scale: k })
}

/// Rigid (or similarity) transform with `src ≈ scale·R·dst + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub pose: Pose,
    pub scale: f64,
}

/// Weighted Procrustes: `argmin_P Σ wᵢ‖srcᵢ − P·dstᵢ‖²` over rigid motions (or similarities
/// with `with_scale`), via the SVD of the weighted cross-covariance with a reflection guard.
pub fn weighted_procrustes(src: &[Vector3<f64>], dst: &[Vector3<f64>], weights: &[f64], with_scale: bool) -> Result<Alignment> {
    if src.len() != dst.len() || weights.len() != src.len() {
        return Err(Error::InvalidInput("point and weight counts differ".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidInput(format!("weights must be finite and >= 0, got {w}")));
    }
    if weights.iter().filter(|&&w| w > 0.0).count() < 3 {
        return Err(Error::DegenerateGeometry("fewer than three points with positive weight".into()));
    }
    let wsum: f64 = weights.iter().sum();
    let mut mu_s = Vector3::zeros();
    let mut mu_d = Vector3::zeros();
    for i in 0..src.len() {
        mu_s += src[i] * weights[i];
        mu_d += dst[i] * weights[i];
    }
    mu_s /= wsum;
    mu_d /= wsum;
    let mut h = Matrix3::zeros();
    let mut var_d = 0.0;
    for i in 0..src.len() {
        let d = dst[i] - mu_d;
        h += weights[i] * d * (src[i] - mu_s).transpose();
        var_d += weights[i] * d.norm_squared();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| b.1.total_cmp(&a.1));
    if !(sv[0].1 > 0.0) || sv[1].1 <= 1e-12 * sv[0].1 {
        return Err(Error::DegenerateGeometry("support points are collinear or coincident".into()));
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let mut correction = Matrix3::identity();
    // Flip the axis of the smallest singular value when the solution would reflect.
    correction[(sv[2].0, sv[2].0)] = d;
    let r = v * correction * u.transpose();
    let scale = if with_scale {
        let trace: f64 = (0..3).map(|i| svd.singular_values[i] * correction[(i, i)]).sum();
        trace / var_d
    } else {
        1.0
    };
    let t = mu_s - scale * r * mu_d;
    Ok(Alignment { pose: Pose { rotation: r, translation: t }, scale })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignedError {
    /// Sum over the second view's valid pixels.
    pub value: f64,
    /// Per-pixel mean.
    pub mean: f64,
    pub count: usize,
    /// Rigid motion mapping ground truth onto the prediction.
    pub pose_used: Pose,
    pub scale_used: f64,
}

/// Second-view error after confidence-weighted Procrustes alignment, computed with the
/// first view replaced by a copy of the second.
pub fn aligned_second_view_error(pred2: &Pointmap, gt2: &Pointmap) -> Result<AlignedError> {
    if pred2.points.dim() != gt2.points.dim() {
        return Err(Error::InvalidInput("prediction and target shapes differ".into()));
    }
    let idx: Vec<(usize, usize)> = gt2.valid.indexed_iter().filter(|(_, &ok)| ok).map(|(ix, _)| ix).collect();
    if idx.is_empty() {
        return Err(Error::InvalidInput("second view has no valid pixels".into()));
    }
    let src: Vec<_> = idx.iter().map(|&(v, u)| pred2.point(v, u)).collect();
    let dst: Vec<_> = idx.iter().map(|&(v, u)| gt2.point(v, u)).collect();
    let w: Vec<f64> = match &pred2.confidence {
        Some(c) => idx.iter().map(|&ix| c[ix]).collect(),
        None => vec![1.0; idx.len()],
    };
    let align = weighted_procrustes(&src, &dst, &w, false)?;
    let inv = align.pose.inverse();
    let aligned = pred2.transformed(&inv);
    let e = scale_shift_invariant_error([&aligned, &aligned], [gt2, gt2])?;
    Ok(AlignedError {
        value: e.per_view[1],
        mean: e.mean(1),
        count: e.count[1],
        pose_used: align.pose,
        scale_used: e.scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerContribution {
    /// `100·(e_ℓ − e_{ℓ−1})/e_{ℓ−1}` for ℓ = 1..n.
    pub per_layer: Vec<f64>,
    /// Σ over layers of one type of `100·(e_ℓ − e_{ℓ−1})/e_0`.
    pub per_type: BTreeMap<Sublayer, f64>,
}

/// Relative error change per layer. `sublayers[i]` is the type of the layer that
/// produced `errors[i + 1]`.
pub fn layer_contribution(errors: &[f64], sublayers: &[Sublayer]) -> Result<LayerContribution> {
    if errors.len() < 2 {
        return Err(Error::InvalidInput("need at least two errors".into()));
    }
    if sublayers.len() != errors.len() - 1 {
        return Err(Error::InvalidInput("one sublayer type per transition required".into()));
    }
    if let Some(e) = errors.iter().find(|e| !e.is_finite() || **e < 0.0) {
        return Err(Error::InvalidInput(format!("errors must be finite and non-negative, got {e}")));
    }
    let mut per_layer = Vec::with_capacity(errors.len() - 1);
    let mut per_type = BTreeMap::new();
    for (i, w) in errors.windows(2).enumerate() {
        if w[0] <= 0.0 {
            return Err(Error::UndefinedScale(format!("previous error at position {i} is zero")));
        }
        per_layer.push(100.0 * (w[1] - w[0]) / w[0]);
        *per_type.entry(sublayers[i]).or_insert(0.0) += 100.0 * (w[1] - w[0]) / errors[0];
    }
    Ok(LayerContribution { per_layer, per_type })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub absrel: f64,
    pub delta1: f64,
    /// Least-squares scale and shift applied to the prediction (1 and 0 when disabled).
    pub scale: f64,
    pub shift: f64,
}

/// Absolute relative error and δ₁ over valid pixels, optionally after least-squares
/// scale/shift alignment of the prediction.
pub fn depth_metrics(pred: &Array2<f64>, gt: &Array2<f64>, valid: &Array2<bool>, align: bool) -> Result<DepthMetrics> {
    if pred.dim() != gt.dim() || valid.dim() != gt.dim() {
        return Err(Error::InvalidInput("depth map shapes differ".into()));
    }
    let pairs: Vec<(f64, f64)> = valid.indexed_iter().filter(|(_, &ok)| ok).map(|(ix, _)| (pred[ix], gt[ix])).collect();
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no valid pixels".into()));
    }
    if let Some((_, g)) = pairs.iter().find(|(_, g)| !(g.is_finite() && *g > 0.0)) {
        return Err(Error::InvalidInput(format!("ground-truth depth must be > 0, got {g}")));
    }
    let n = pairs.len() as f64;
    let (scale, shift) = if align {
        let mp = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let mg = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let cov: f64 = pairs.iter().map(|(p, g)| (p - mp) * (g - mg)).sum();
        let var: f64 = pairs.iter().map(|(p, _)| (p - mp) * (p - mp)).sum();
        if !(var > 0.0) {
            return Err(Error::DegenerateGeometry("constant prediction cannot be aligned".into()));
        }
        let a = cov / var;
        if !(a > 0.0) {
            return Err(Error::DegenerateGeometry(format!("alignment scale {a} is not positive")));
        }
        (a, mg - a * mp)
    } else {
        (1.0, 0.0)
    };
    let mut absrel = 0.0;
    let mut good = 0usize;
    for &(p, g) in &pairs {
        let p = scale * p + shift;
        absrel += (p - g).abs() / g;
        if p > 0.0 && (p / g).max(g / p) < 1.25 {
            good += 1;
        }
    }
    Ok(DepthMetrics { absrel: absrel / n, delta1: good as f64 / n, scale, shift })
}

/// Fraction of ground-truth second-view patches whose predicted first-view patch center
/// lies strictly closer than `threshold_px` to the true one. Both maps must share a grid.
pub fn correspondence_recall(pred: &PatchCorrespondences, gt: &PatchCorrespondences, threshold_px: f64) -> f64 {
    if gt.pairs.is_empty() {
        return 0.0;
    }
    let cols = gt.grid.1;
    let hits = gt
        .pairs
        .iter()
        .filter(|(second, m)| {
            pred.get(**second).is_some_and(|p| {
                let (a, b) = (patch_center(p, cols, gt.patch_size), patch_center(m.first, cols, gt.patch_size));
                ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() < threshold_px
            })
        })
        .count();
    hits as f64 / gt.pairs.len() as f64
}
