//! Clean-versus-knockout comparison on one pair: the model's own second-view output and,
//! when a probe bank is given, the probed second-view pointmap at every post-skip location.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geom::Pointmap;
use crate::harness::{
    apply_knockout, post_skip_locations, CaptureOptions, KnockoutSpec, ModelAdapter, ProbePoint, View,
};
use crate::metrics::aligned_second_view_error;
use crate::probe::ProbeBank;
use crate::scene::ScenePair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointDelta {
    pub point: ProbePoint,
    pub clean: f64,
    pub knockout: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutComparison {
    pub pair_id: String,
    pub spec: KnockoutSpec,
    /// Key tokens actually masked (empty for a no-op spec).
    pub tokens: Vec<usize>,
    pub output_clean: f64,
    pub output_knockout: f64,
    /// `knockout − clean` aligned second-view error of the model output.
    pub output_delta: f64,
    pub points: Vec<PointDelta>,
}

/// Probed pointmaps of both views at one point, clean and intervened.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonMaps {
    pub clean: [Pointmap; 2],
    pub knockout: [Pointmap; 2],
}

fn probed(bank: &ProbeBank, trace: &crate::harness::ActivationTrace, pair: &ScenePair, point: &ProbePoint) -> Result<Pointmap> {
    let probe = bank.get(point)?;
    let out = probe.predict(trace.token(point)?, pair.grid(), pair.valid(point.view.index()))?;
    out.pointmap()
        .cloned()
        .ok_or_else(|| crate::Error::Unsupported(format!("probe {point} does not predict pointmaps")))
}

/// Run the pair clean and with `spec` applied and measure the aligned second-view error of
/// both. With a bank, the last post-skip location that has probes for both views is also
/// returned as maps for side-by-side display.
pub fn compare_knockout(
    adapter: &dyn ModelAdapter,
    bank: Option<&ProbeBank>,
    pair: &ScenePair,
    spec: &KnockoutSpec,
) -> Result<(KnockoutComparison, Option<ComparisonMaps>)> {
    let opts = CaptureOptions { tokens: bank.is_some(), attention: false, head_internals: false };
    let clean = apply_knockout(adapter, pair, &KnockoutSpec { heads: Default::default(), ..spec.clone() }, &opts)?;
    let ko = apply_knockout(adapter, pair, spec, &opts)?;
    let gt2 = &pair.gt_pointmaps[1];
    let output_clean = aligned_second_view_error(&clean.output.pointmaps[1], gt2)?.mean;
    let output_knockout = aligned_second_view_error(&ko.output.pointmaps[1], gt2)?.mean;
    let mut points = Vec::new();
    let mut maps = None;
    if let Some(bank) = bank {
        for loc in post_skip_locations(adapter.descriptor()) {
            let p2 = loc.at(View::Second);
            let p1 = loc.at(View::First);
            if bank.probes.get(&p2).is_none_or(|p| p.config.kind.is_depth()) {
                continue;
            }
            let c = probed(bank, &clean.trace, pair, &p2)?;
            let k = probed(bank, &ko.trace, pair, &p2)?;
            let (ce, ke) = (aligned_second_view_error(&c, gt2)?.mean, aligned_second_view_error(&k, gt2)?.mean);
            points.push(PointDelta { point: p2, clean: ce, knockout: ke, delta: ke - ce });
            if bank.probes.contains_key(&p1) {
                maps = Some(ComparisonMaps {
                    clean: [probed(bank, &clean.trace, pair, &p1)?, c],
                    knockout: [probed(bank, &ko.trace, pair, &p1)?, k],
                });
            }
        }
    }
    let report = KnockoutComparison {
        pair_id: pair.id(),
        spec: spec.clone(),
        tokens: ko.resolved.map(|r| r.tokens).unwrap_or_default(),
        output_clean,
        output_knockout,
        output_delta: output_knockout - output_clean,
        points,
    };
    Ok((report, maps))
}
