//! Attention-map analytics: head roles, zero-shot correspondences from cross-attention,
//! best-head selection and register-token ranking.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{top_k_columns, ActivationTrace, AttnKey, AttnKind, View};
use crate::metrics::correspondence_recall;
use crate::scene::{patch_center, PatchCorrespondences, PatchMatch, ScenePair};

/// Ground-truth patch correspondences of one pair in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct GtCorrespondences {
    /// Keyed by first-view patches, pointing into the second view.
    pub to_second: PatchCorrespondences,
    /// Keyed by second-view patches, pointing into the first view.
    pub to_first: PatchCorrespondences,
}

impl GtCorrespondences {
    pub fn from_pair(pair: &ScenePair) -> Result<Self> {
        Ok(Self { to_second: pair.reverse_patch_correspondences()?, to_first: pair.patch_correspondences()? })
    }

    /// Ground truth for cross-attention queries issued by `view`.
    pub fn for_queries_of(&self, view: View) -> &PatchCorrespondences {
        match view {
            View::First => &self.to_second,
            View::Second => &self.to_first,
        }
    }
}

/// Predicted match per query patch in `queries`: the argmax of the cross-attention row
/// (ties → lowest key index), with support 1.
pub fn extract_correspondences_from_attention(
    trace: &ActivationTrace,
    view: View,
    block: usize,
    head: usize,
    queries: &BTreeSet<usize>,
    patch_size: usize,
) -> Result<PatchCorrespondences> {
    let key = AttnKey { view, block, kind: AttnKind::CrossAttention, head };
    let a = trace.attention_map(&key)?;
    let mut pairs = std::collections::BTreeMap::new();
    for &q in queries {
        if q >= a.nrows() {
            return Err(Error::InvalidInput(format!("query patch {q} outside the grid")));
        }
        pairs.insert(q, PatchMatch { first: argmax(a.row(q).iter().copied()), support: 1 });
    }
    Ok(PatchCorrespondences { patch_size, grid: trace.patch_grid, pairs })
}

fn argmax(row: impl Iterator<Item = f32>) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Recall of one cross-attention head against ground truth, averaged over pairs.
pub fn head_recall(
    traces: &[ActivationTrace],
    gts: &[GtCorrespondences],
    view: View,
    block: usize,
    head: usize,
    patch_size: usize,
    threshold_px: f64,
) -> Result<f64> {
    if traces.len() != gts.len() {
        return Err(Error::InvalidInput("one ground truth per trace required".into()));
    }
    if traces.is_empty() {
        return Err(Error::InvalidInput("no traces".into()));
    }
    let mut sum = 0.0;
    for (t, g) in traces.iter().zip(gts) {
        let gt = g.for_queries_of(view);
        let queries: BTreeSet<usize> = gt.pairs.keys().copied().collect();
        let pred = extract_correspondences_from_attention(t, view, block, head, &queries, patch_size)?;
        sum += correspondence_recall(&pred, gt, threshold_px);
    }
    Ok(sum / traces.len() as f64)
}

/// Head with the highest mean recall in one block's cross-attention (ties → lowest index).
pub fn select_best_head(
    traces: &[ActivationTrace],
    gts: &[GtCorrespondences],
    view: View,
    block: usize,
    patch_size: usize,
    threshold_px: f64,
) -> Result<(usize, f64)> {
    let first = traces.first().ok_or_else(|| Error::InvalidInput("no traces".into()))?;
    let heads = first.heads(view, block, AttnKind::CrossAttention);
    if heads.is_empty() {
        return Err(Error::NotFound(format!("no cross-attention heads captured in block {block}")));
    }
    let mut best: Option<(usize, f64)> = None;
    for h in heads {
        let r = head_recall(traces, gts, view, block, h, patch_size, threshold_px)?;
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((h, r));
        }
    }
    Ok(best.expect("at least one head"))
}

/// Best-head recall per decoder block.
pub fn recall_curve(
    traces: &[ActivationTrace],
    gts: &[GtCorrespondences],
    view: View,
    blocks: usize,
    patch_size: usize,
    threshold_px: f64,
) -> Result<Vec<(usize, usize, f64)>> {
    (0..blocks)
        .map(|b| select_best_head(traces, gts, view, b, patch_size, threshold_px).map(|(h, r)| (b, h, r)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadThresholds {
    pub query_invariance: f64,
    pub recall: f64,
    /// In patch widths.
    pub locality: f64,
    /// Rows whose mean entropy exceeds this fraction of `log N` never count as register heads.
    pub entropy_fraction: f64,
    /// Unsupervised correspondence proxy; reported only.
    pub peakiness: f64,
    /// Register-set size used for the fallback diagnostic.
    pub register_k: usize,
}

impl Default for HeadThresholds {
    fn default() -> Self {
        Self { query_invariance: 0.9, recall: 0.5, locality: 1.5, entropy_fraction: 0.95, peakiness: 0.3, register_k: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLabel {
    Register,
    Correspondence,
    Local,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    pub view: View,
    pub block: usize,
    pub sublayer: AttnKind,
    pub head: usize,
    /// Mean pairwise cosine similarity of attention rows.
    pub query_invariance: f64,
    /// Mean attention-weighted patch-center distance from the query, in pixels.
    pub locality: f64,
    /// Cross-attention only.
    pub recall_at_1patch: Option<f64>,
    /// Mean row entropy divided by `log N`.
    pub entropy: f64,
    /// Mean of the largest weight per row.
    pub peakiness: f64,
    /// Queries whose argmax falls on a register token, summed over pairs.
    pub fallback_queries: usize,
    pub label: HeadLabel,
    pub evidence_pairs: usize,
}

impl HeadProfile {
    pub fn key(&self) -> AttnKey {
        AttnKey { view: self.view, block: self.block, kind: self.sublayer, head: self.head }
    }
}

/// Mean pairwise cosine similarity between non-zero rows (`1` with fewer than two rows).
pub fn query_invariance(a: &Array2<f32>) -> f64 {
    let mut sum = vec![0.0f64; a.ncols()];
    let mut n = 0usize;
    for row in a.rows() {
        let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (s, &x) in sum.iter_mut().zip(row.iter()) {
                *s += x as f64 / norm;
            }
            n += 1;
        }
    }
    if n < 2 {
        return 1.0;
    }
    let total: f64 = sum.iter().map(|s| s * s).sum();
    ((total - n as f64) / (n * (n - 1)) as f64).clamp(-1.0, 1.0)
}

/// Mean row entropy normalized by `log N`.
pub fn normalized_entropy(a: &Array2<f32>) -> f64 {
    let n = a.ncols();
    if n < 2 || a.nrows() == 0 {
        return 0.0;
    }
    let h: f64 = a
        .rows()
        .into_iter()
        .map(|row| row.iter().filter(|&&x| x > 0.0).map(|&x| -(x as f64) * (x as f64).ln()).sum::<f64>())
        .sum();
    h / a.nrows() as f64 / (n as f64).ln()
}

/// Mean attention-weighted distance (pixels) between query and key patch centers on a shared grid.
pub fn locality(a: &Array2<f32>, grid: (usize, usize), patch_size: usize) -> f64 {
    let cols = grid.1;
    let centers: Vec<(f64, f64)> = (0..a.ncols()).map(|k| patch_center(k, cols, patch_size)).collect();
    let mut total = 0.0;
    for (q, row) in a.rows().into_iter().enumerate() {
        let (qx, qy) = centers[q.min(centers.len() - 1)];
        total += row
            .iter()
            .zip(&centers)
            .map(|(&w, &(kx, ky))| w as f64 * ((qx - kx).powi(2) + (qy - ky).powi(2)).sqrt())
            .sum::<f64>();
    }
    total / a.nrows().max(1) as f64
}

fn key_view(view: View, kind: AttnKind) -> View {
    match kind {
        AttnKind::SelfAttention => view,
        AttnKind::CrossAttention => view.other(),
    }
}

/// Score and label every captured head. `gts[i]` belongs to `traces[i]`.
pub fn classify_heads(traces: &[ActivationTrace], gts: &[GtCorrespondences], patch_size: usize, thresholds: &HeadThresholds) -> Result<Vec<HeadProfile>> {
    let first = traces.first().ok_or_else(|| Error::InvalidInput("no traces".into()))?;
    if gts.len() != traces.len() {
        return Err(Error::InvalidInput("one ground truth per trace required".into()));
    }
    let keys: Vec<AttnKey> = first.attention.keys().copied().collect();
    let grid = first.patch_grid;
    let n_tokens = grid.0 * grid.1;
    let count = traces.len() as f64;
    let mut profiles = Vec::with_capacity(keys.len());
    for key in &keys {
        let mut qi = 0.0;
        let mut loc = 0.0;
        let mut ent = 0.0;
        let mut peak = 0.0;
        for t in traces {
            let a = t.attention_map(key)?;
            qi += query_invariance(a);
            loc += locality(a, grid, patch_size);
            ent += normalized_entropy(a);
            peak += a.rows().into_iter().map(|r| r.iter().fold(0.0f32, |m, &x| m.max(x)) as f64).sum::<f64>() / a.nrows().max(1) as f64;
        }
        let recall = match key.kind {
            AttnKind::CrossAttention => Some(head_recall(traces, gts, key.view, key.block, key.head, patch_size, patch_size as f64)?),
            AttnKind::SelfAttention => None,
        };
        let (qi, loc, ent, peak) = (qi / count, loc / count, ent / count, peak / count);
        let label = if qi >= thresholds.query_invariance && ent <= thresholds.entropy_fraction {
            HeadLabel::Register
        } else if recall.is_some_and(|r| r >= thresholds.recall) {
            HeadLabel::Correspondence
        } else if loc <= thresholds.locality * patch_size as f64 {
            HeadLabel::Local
        } else {
            HeadLabel::Other
        };
        profiles.push(HeadProfile {
            view: key.view,
            block: key.block,
            sublayer: key.kind,
            head: key.head,
            query_invariance: qi,
            locality: loc,
            recall_at_1patch: recall,
            entropy: ent,
            peakiness: peak,
            fallback_queries: 0,
            label,
            evidence_pairs: traces.len(),
        });
    }
    // Fallback diagnostic: register set per trace and key view from the register-labeled heads.
    for (ti, t) in traces.iter().enumerate() {
        for kv in View::BOTH {
            let maps: Vec<&Array2<f32>> = profiles
                .iter()
                .filter(|p| p.label == HeadLabel::Register && key_view(p.view, p.sublayer) == kv)
                .map(|p| t.attention_map(&p.key()))
                .collect::<Result<_>>()?;
            if maps.is_empty() {
                continue;
            }
            let registers: BTreeSet<usize> = top_k_columns(&maps, thresholds.register_k.min(n_tokens)).into_iter().collect();
            for p in profiles.iter_mut().filter(|p| key_view(p.view, p.sublayer) == kv) {
                let a = traces[ti].attention_map(&p.key())?;
                p.fallback_queries += a.rows().into_iter().filter(|r| registers.contains(&argmax(r.iter().copied()))).count();
            }
        }
    }
    Ok(profiles)
}

/// Ranked register candidates of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterTokens {
    pub tokens: Vec<usize>,
    /// Column-mean attention of each returned token.
    pub scores: Vec<f64>,
    /// A tie straddles the cut, so the set depends on the index-order tie break.
    pub ambiguous: bool,
}

/// Top-`k` key tokens by column-mean attention (ties → lower index); `k` is clipped to the token count.
pub fn rank_register_tokens(trace: &ActivationTrace, key: &AttnKey, k: usize) -> Result<RegisterTokens> {
    let a = trace.attention_map(key)?;
    let n = a.ncols();
    let k = if k > n {
        log::warn!("requested {k} register tokens but {key} has only {n} keys; clipping");
        n
    } else {
        k
    };
    let rows = a.nrows().max(1) as f64;
    let scores: Vec<f64> = a.columns().into_iter().map(|c| c.iter().map(|&x| x as f64).sum::<f64>() / rows).collect();
    let tokens = top_k_columns(&[a], k);
    let picked: Vec<f64> = tokens.iter().map(|&t| scores[t]).collect();
    let ambiguous = k > 0 && k < n && {
        let mut sorted = scores.clone();
        sorted.sort_by(|x, y| y.total_cmp(x));
        (sorted[k - 1] - sorted[k]).abs() <= 1e-12 * sorted[k - 1].abs().max(1e-300)
    };
    Ok(RegisterTokens { tokens, scores: picked, ambiguous })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_with(a: Array2<f32>, kind: AttnKind) -> (ActivationTrace, AttnKey) {
        let key = AttnKey { view: View::Second, block: 0, kind, head: 0 };
        let mut t = ActivationTrace { patch_grid: (1, a.ncols()), ..Default::default() };
        t.attention.insert(key, a);
        (t, key)
    }

    #[test]
    fn argmax_examples() {
        let a = Array2::from_shape_vec((2, 3), vec![0.2, 0.5, 0.3, 0.0, 0.0, 1.0]).unwrap();
        let (t, _) = trace_with(a, AttnKind::CrossAttention);
        let q: BTreeSet<usize> = [0, 1].into_iter().collect();
        let c = extract_correspondences_from_attention(&t, View::Second, 0, 0, &q, 8).unwrap();
        assert_eq!(c.get(0), Some(1));
        assert_eq!(c.get(1), Some(2));
        assert!(extract_correspondences_from_attention(&t, View::Second, 1, 0, &q, 8).is_err());
    }

    #[test]
    fn invariance_and_entropy() {
        let same = Array2::from_shape_fn((4, 4), |(_, j)| if j == 1 { 1.0 } else { 0.0 });
        assert!((query_invariance(&same) - 1.0).abs() < 1e-12);
        assert_eq!(normalized_entropy(&same), 0.0);
        let uniform = Array2::from_elem((4, 4), 0.25f32);
        assert!((normalized_entropy(&uniform) - 1.0).abs() < 1e-6);
        let eye = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        assert_eq!(query_invariance(&eye), 0.0);
    }

    #[test]
    fn uniform_ranking_is_ambiguous_and_clipped() {
        let (t, key) = trace_with(Array2::from_elem((4, 4), 0.25f32), AttnKind::SelfAttention);
        let r = rank_register_tokens(&t, &key, 2).unwrap();
        assert_eq!(r.tokens, vec![0, 1]);
        assert!(r.ambiguous);
        assert_eq!(rank_register_tokens(&t, &key, 9).unwrap().tokens.len(), 4);
        let peaked = Array2::from_shape_fn((4, 4), |(_, j)| if j == 3 { 0.7 } else { 0.1 });
        let (t, key) = trace_with(peaked, AttnKind::SelfAttention);
        let r = rank_register_tokens(&t, &key, 1).unwrap();
        assert_eq!(r.tokens, vec![3]);
        assert!(!r.ambiguous);
    }
}
