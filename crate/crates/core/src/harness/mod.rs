//! Model adapter contract, probe-point addressing, activation capture and
//! attention knockout.
//!
//! Every adapter exposes the same residual-stream addresses: the shared
//! encoder output of each view, and for every decoder block and sublayer the
//! residual after the skip addition (`post`) and the sublayer output before
//! it (`pre`).

mod planted;
mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Pointmap;
use crate::scene::ScenePair;

pub use planted::{HeadRole, PlantedConfig, PlantedModel};
pub use toy::{ToyConfig, ToyModel, ToyTrainConfig, ToyTrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum View {
    First,
    Second,
}

impl View {
    pub const BOTH: [View; 2] = [View::First, View::Second];

    pub fn index(self) -> usize {
        match self {
            View::First => 0,
            View::Second => 1,
        }
    }

    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn other(self) -> View {
        match self {
            View::First => View::Second,
            View::Second => View::First,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(View::First),
            2 => Ok(View::Second),
            _ => Err(Error::InvalidInput(format!("view must be 1 or 2, got {n}"))),
        }
    }
}

impl TryFrom<u8> for View {
    type Error = Error;
    fn try_from(n: u8) -> Result<Self> {
        View::from_number(n)
    }
}

impl From<View> for u8 {
    fn from(v: View) -> u8 {
        v.number()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    SelfAttention,
    CrossAttention,
    Mlp,
}

impl Sublayer {
    pub fn short(self) -> &'static str {
        match self {
            Sublayer::SelfAttention => "sa",
            Sublayer::CrossAttention => "ca",
            Sublayer::Mlp => "mlp",
        }
    }

    pub fn from_short(s: &str) -> Result<Self> {
        match s {
            "sa" => Ok(Sublayer::SelfAttention),
            "ca" => Ok(Sublayer::CrossAttention),
            "mlp" => Ok(Sublayer::Mlp),
            _ => Err(Error::InvalidInput(format!("unknown sublayer '{s}'"))),
        }
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, Sublayer::Mlp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    PostSkip,
    PreSkip,
}

/// Where on one view's residual stream a probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProbeLocation {
    EncoderOutput,
    Decoder { block: usize, sublayer: Sublayer, position: Position },
}

impl ProbeLocation {
    pub fn post(block: usize, sublayer: Sublayer) -> Self {
        ProbeLocation::Decoder { block, sublayer, position: Position::PostSkip }
    }

    pub fn pre(block: usize, sublayer: Sublayer) -> Self {
        ProbeLocation::Decoder { block, sublayer, position: Position::PreSkip }
    }

    pub fn position(&self) -> Position {
        match self {
            ProbeLocation::EncoderOutput => Position::PostSkip,
            ProbeLocation::Decoder { position, .. } => *position,
        }
    }

    pub fn sublayer(&self) -> Option<Sublayer> {
        match self {
            ProbeLocation::EncoderOutput => None,
            ProbeLocation::Decoder { sublayer, .. } => Some(*sublayer),
        }
    }

    pub fn at(self, view: View) -> ProbePoint {
        ProbePoint { view, location: self }
    }
}

/// A capture site: one view's residual stream at one location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProbePoint {
    pub view: View,
    pub location: ProbeLocation,
}

impl ProbePoint {
    pub fn encoder(view: View) -> Self {
        ProbeLocation::EncoderOutput.at(view)
    }

    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ProbePoint {
    /// `v{1|2}.(enc|dec).b{N}.(sa|ca|mlp).(post|pre)`; the encoder output prints as `v{n}.enc.b0.sa.post`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.view.number();
        match self.location {
            ProbeLocation::EncoderOutput => write!(f, "v{v}.enc.b0.sa.post"),
            ProbeLocation::Decoder { block, sublayer, position } => {
                let pos = match position {
                    Position::PostSkip => "post",
                    Position::PreSkip => "pre",
                };
                write!(f, "v{v}.dec.b{block}.{}.{pos}", sublayer.short())
            }
        }
    }
}

impl FromStr for ProbePoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("malformed probe point '{s}'"));
        let parts: Vec<&str> = s.split('.').collect();
        let [v, stage, b, sub, pos] = parts.as_slice() else { return Err(bad()) };
        let view = View::from_number(v.strip_prefix('v').and_then(|n| n.parse().ok()).ok_or_else(bad)?)?;
        let block_str = b.strip_prefix('b').ok_or_else(bad)?;
        if block_str.is_empty() || (block_str.len() > 1 && block_str.starts_with('0')) {
            return Err(bad());
        }
        let block: usize = block_str.parse().map_err(|_| bad())?;
        let sublayer = Sublayer::from_short(sub)?;
        let position = match *pos {
            "post" => Position::PostSkip,
            "pre" => Position::PreSkip,
            _ => return Err(bad()),
        };
        let location = match *stage {
            "enc" if block == 0 && sublayer == Sublayer::SelfAttention && position == Position::PostSkip => {
                ProbeLocation::EncoderOutput
            }
            "enc" => return Err(Error::InvalidInput(format!("non-canonical encoder point '{s}'"))),
            "dec" => ProbeLocation::Decoder { block, sublayer, position },
            _ => return Err(bad()),
        };
        Ok(ProbePoint { view, location })
    }
}

impl Serialize for ProbePoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ProbePoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Attention sublayer kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    SelfAttention,
    CrossAttention,
}

impl AttnKind {
    pub fn short(self) -> &'static str {
        match self {
            AttnKind::SelfAttention => "sa",
            AttnKind::CrossAttention => "ca",
        }
    }

    pub fn sublayer(self) -> Sublayer {
        match self {
            AttnKind::SelfAttention => Sublayer::SelfAttention,
            AttnKind::CrossAttention => Sublayer::CrossAttention,
        }
    }
}

/// Address of one decoder attention head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AttnKey {
    pub view: View,
    pub block: usize,
    pub kind: AttnKind,
    pub head: usize,
}

impl fmt::Display for AttnKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}.b{}.{}.h{}", self.view.number(), self.block, self.kind.short(), self.head)
    }
}

impl FromStr for AttnKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("malformed attention key '{s}'"));
        let parts: Vec<&str> = s.split('.').collect();
        let [v, b, k, h] = parts.as_slice() else { return Err(bad()) };
        let view = View::from_number(v.strip_prefix('v').and_then(|n| n.parse().ok()).ok_or_else(bad)?)?;
        let block = b.strip_prefix('b').and_then(|n| n.parse().ok()).ok_or_else(bad)?;
        let kind = match *k {
            "sa" => AttnKind::SelfAttention,
            "ca" => AttnKind::CrossAttention,
            _ => return Err(bad()),
        };
        let head = h.strip_prefix('h').and_then(|n| n.parse().ok()).ok_or_else(bad)?;
        Ok(AttnKey { view, block, kind, head })
    }
}

/// Architecture descriptor, persisted as `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub model_id: String,
    pub kind: String,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub decoder_blocks: usize,
    pub sublayer_order: Vec<Sublayer>,
    /// Adapter-specific construction parameters.
    #[serde(default)]
    pub params: serde_json::Value,
}

impl ArchDescriptor {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn tokens_per_view(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return Err(Error::Config("patch size must divide the image size".into()));
        }
        let mut seen = BTreeSet::new();
        if self.sublayer_order.len() != 3 || !self.sublayer_order.iter().all(|s| seen.insert(*s)) {
            return Err(Error::Config("sublayer order must list sa, ca and mlp exactly once".into()));
        }
        Ok(())
    }
}

/// Every probe point of the architecture, in forward-pass order: per view, the encoder
/// output then each block's sublayers in declared order with `post` before `pre`.
pub fn enumerate_probe_points(desc: &ArchDescriptor) -> Vec<ProbePoint> {
    View::BOTH.iter().flat_map(|&v| enumerate_locations(desc).into_iter().map(move |l| l.at(v))).collect()
}

/// Locations of one view in forward-pass order.
pub fn enumerate_locations(desc: &ArchDescriptor) -> Vec<ProbeLocation> {
    let mut out = vec![ProbeLocation::EncoderOutput];
    for block in 0..desc.decoder_blocks {
        for &sublayer in &desc.sublayer_order {
            out.push(ProbeLocation::post(block, sublayer));
            out.push(ProbeLocation::pre(block, sublayer));
        }
    }
    out
}

/// Post-skip locations only (`1 + 3B` entries).
pub fn post_skip_locations(desc: &ArchDescriptor) -> Vec<ProbeLocation> {
    enumerate_locations(desc).into_iter().filter(|l| l.position() == Position::PostSkip).collect()
}

/// Pre-skip locations only (`3B` entries).
pub fn pre_skip_locations(desc: &ArchDescriptor) -> Vec<ProbeLocation> {
    enumerate_locations(desc).into_iter().filter(|l| l.position() == Position::PreSkip).collect()
}

/// Everything captured during one forward pass over one pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationTrace {
    pub pair_id: String,
    pub model_id: String,
    pub patch_grid: (usize, usize),
    /// `N_patches × D` per probe point.
    pub tokens: BTreeMap<ProbePoint, Array2<f32>>,
    /// Post-softmax `N_q × N_k` per head.
    pub attention: BTreeMap<AttnKey, Array2<f32>>,
    /// Per-head value vectors, `N_k × d_head` (only with head internals enabled).
    pub values: BTreeMap<AttnKey, Array2<f32>>,
    /// Per-head aggregated outputs `A·V`, `N_q × d_head` (only with head internals enabled).
    pub head_outputs: BTreeMap<AttnKey, Array2<f32>>,
    /// Manifest fields this version does not interpret; carried through persistence.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ActivationTrace {
    pub fn token(&self, p: &ProbePoint) -> Result<&Array2<f32>> {
        self.tokens.get(p).ok_or_else(|| Error::NotFound(format!("no tokens captured at {p}")))
    }

    pub fn attention_map(&self, key: &AttnKey) -> Result<&Array2<f32>> {
        self.attention.get(key).ok_or_else(|| Error::NotFound(format!("no attention captured for {key}")))
    }

    /// Head count per (view, block, kind) observed in this trace.
    pub fn heads(&self, view: View, block: usize, kind: AttnKind) -> Vec<usize> {
        self.attention.keys().filter(|k| k.view == view && k.block == block && k.kind == kind).map(|k| k.head).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureOptions {
    pub tokens: bool,
    pub attention: bool,
    pub head_internals: bool,
}

impl Default for CaptureOptions {
    fn default() -> Self {
        Self { tokens: true, attention: true, head_internals: false }
    }
}

impl CaptureOptions {
    pub fn none() -> Self {
        Self { tokens: false, attention: false, head_internals: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub capture: bool,
    pub intervene: bool,
}

/// Final per-view predictions of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub pointmaps: [Pointmap; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyTokens {
    Explicit(Vec<usize>),
    TopKAttended(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Zero the selected post-softmax weights and leave the row unnormalized.
    #[default]
    ZeroPostSoftmax,
    /// Add `-inf` to the selected scores before the softmax.
    NegInfPreSoftmax,
}

/// Which attention weights to knock out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnockoutSpec {
    pub view: View,
    pub block: usize,
    pub sublayer: AttnKind,
    #[serde(default)]
    pub heads: BTreeSet<usize>,
    pub key_tokens: KeyTokens,
    #[serde(default)]
    pub mode: MaskMode,
}

impl KnockoutSpec {
    /// Register-head intervention: view 2, block 2, self-attention, heads {0, 3, 8, 9}, top 5 tokens.
    pub fn register_preset() -> Self {
        Self {
            view: View::Second,
            block: 2,
            sublayer: AttnKind::SelfAttention,
            heads: [0, 3, 8, 9].into_iter().collect(),
            key_tokens: KeyTokens::TopKAttended(5),
            mode: MaskMode::ZeroPostSoftmax,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
            || match &self.key_tokens {
                KeyTokens::Explicit(t) => t.is_empty(),
                KeyTokens::TopKAttended(k) => *k == 0,
            }
    }

    pub fn validate(&self, desc: &ArchDescriptor) -> Result<()> {
        if self.block >= desc.decoder_blocks {
            return Err(Error::InvalidInput(format!("block {} >= {}", self.block, desc.decoder_blocks)));
        }
        if let Some(h) = self.heads.iter().find(|&&h| h >= desc.heads) {
            return Err(Error::InvalidInput(format!("head {h} >= head count {}", desc.heads)));
        }
        if let KeyTokens::Explicit(t) = &self.key_tokens {
            let n = desc.tokens_per_view();
            if let Some(bad) = t.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidInput(format!("key token {bad} >= {n}")));
            }
        }
        Ok(())
    }
}

/// A knockout with concrete key tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedKnockout {
    pub view: View,
    pub block: usize,
    pub sublayer: AttnKind,
    pub heads: BTreeSet<usize>,
    pub tokens: Vec<usize>,
    pub mode: MaskMode,
}

impl ResolvedKnockout {
    pub fn targets(&self, view: View, block: usize, kind: AttnKind) -> bool {
        self.view == view && self.block == block && self.sublayer == kind
    }

    /// Column multiplier (`0` on knocked-out keys) for post-softmax masking.
    pub fn keep_mask(&self, rows: usize, cols: usize) -> Array2<f32> {
        let mut m = Array2::from_elem((rows, cols), 1.0f32);
        for &t in &self.tokens {
            m.column_mut(t).fill(0.0);
        }
        m
    }

    /// Additive `-inf` mask for pre-softmax masking.
    pub fn score_mask(&self, rows: usize, cols: usize) -> Array2<f32> {
        let mut m = Array2::zeros((rows, cols));
        for &t in &self.tokens {
            m.column_mut(t).fill(f32::NEG_INFINITY);
        }
        m
    }

    /// Apply the knockout to a post-softmax map in place.
    pub fn apply_to_weights(&self, a: &mut Array2<f32>) {
        match self.mode {
            MaskMode::ZeroPostSoftmax => {
                for &t in &self.tokens {
                    a.column_mut(t).fill(0.0);
                }
            }
            MaskMode::NegInfPreSoftmax => {
                for mut row in a.rows_mut() {
                    for &t in &self.tokens {
                        row[t] = 0.0;
                    }
                    let s: f32 = row.sum();
                    if s > 0.0 {
                        row.mapv_inplace(|v| v / s);
                    }
                }
            }
        }
    }
}

/// The contract every inspected model implements.
///
/// One adapter instance serves one client at a time; callers serialize `forward` calls
/// per instance. Distinct instances are independent.
pub trait ModelAdapter: Send + Sync {
    fn descriptor(&self) -> &ArchDescriptor;

    fn capabilities(&self) -> Capabilities;

    /// Run the model on one pair. Capture flags decide what is recorded; a knockout, when
    /// given, is applied during the pass and affects everything downstream of it.
    fn forward(
        &self,
        pair: &ScenePair,
        capture: &CaptureOptions,
        knockout: Option<&ResolvedKnockout>,
    ) -> Result<(ActivationTrace, ModelOutput)>;
}

fn check_input(adapter: &dyn ModelAdapter, pair: &ScenePair) -> Result<()> {
    let d = adapter.descriptor();
    if pair.height() != d.image_height || pair.width() != d.image_width {
        return Err(Error::InvalidInput(format!(
            "pair is {}x{} but the model expects {}x{}",
            pair.height(),
            pair.width(),
            d.image_height,
            d.image_width
        )));
    }
    if pair.config.patch_size != d.patch_size {
        return Err(Error::InvalidInput(format!(
            "pair patch size {} differs from the model's {}",
            pair.config.patch_size, d.patch_size
        )));
    }
    Ok(())
}

/// Record tokens at every probe point and every attention map.
pub fn capture(adapter: &dyn ModelAdapter, pair: &ScenePair) -> Result<ActivationTrace> {
    capture_with(adapter, pair, &CaptureOptions::default())
}

pub fn capture_with(adapter: &dyn ModelAdapter, pair: &ScenePair, opts: &CaptureOptions) -> Result<ActivationTrace> {
    if !adapter.capabilities().capture {
        return Err(Error::Unsupported(format!("adapter {} cannot capture", adapter.descriptor().model_id)));
    }
    check_input(adapter, pair)?;
    Ok(adapter.forward(pair, opts, None)?.0)
}

/// Run without recording anything.
pub fn run_clean(adapter: &dyn ModelAdapter, pair: &ScenePair) -> Result<ModelOutput> {
    check_input(adapter, pair)?;
    Ok(adapter.forward(pair, &CaptureOptions::none(), None)?.1)
}

/// Indices of the `k` largest column means over the given maps (ties → lower index).
pub fn top_k_columns(maps: &[&Array2<f32>], k: usize) -> Vec<usize> {
    let Some(first) = maps.first() else { return Vec::new() };
    let cols = first.ncols();
    let mut score = vec![0.0f64; cols];
    for m in maps {
        for row in m.rows() {
            for (s, &v) in score.iter_mut().zip(row.iter()) {
                *s += v as f64;
            }
        }
    }
    let mut idx: Vec<usize> = (0..cols).collect();
    idx.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    idx.truncate(k.min(cols));
    idx
}

/// Result of an intervened forward pass.
#[derive(Debug, Clone)]
pub struct KnockoutRun {
    pub trace: ActivationTrace,
    pub output: ModelOutput,
    /// `None` when the spec was empty and the clean pass ran unchanged.
    pub resolved: Option<ResolvedKnockout>,
}

/// Resolve `top_k_attended` against a clean capture, then run with the knockout applied.
pub fn resolve_knockout(adapter: &dyn ModelAdapter, pair: &ScenePair, spec: &KnockoutSpec) -> Result<Option<ResolvedKnockout>> {
    spec.validate(adapter.descriptor())?;
    if spec.is_empty() {
        return Ok(None);
    }
    let tokens = match &spec.key_tokens {
        KeyTokens::Explicit(t) => {
            let mut t = t.clone();
            t.sort_unstable();
            t.dedup();
            t
        }
        KeyTokens::TopKAttended(k) => {
            let clean = capture_with(adapter, pair, &CaptureOptions { tokens: false, attention: true, head_internals: false })?;
            let maps = spec
                .heads
                .iter()
                .map(|&head| clean.attention_map(&AttnKey { view: spec.view, block: spec.block, kind: spec.sublayer, head }))
                .collect::<Result<Vec<_>>>()?;
            top_k_columns(&maps, *k)
        }
    };
    Ok(Some(ResolvedKnockout {
        view: spec.view,
        block: spec.block,
        sublayer: spec.sublayer,
        heads: spec.heads.clone(),
        tokens,
        mode: spec.mode,
    }))
}

pub fn apply_knockout(
    adapter: &dyn ModelAdapter,
    pair: &ScenePair,
    spec: &KnockoutSpec,
    capture: &CaptureOptions,
) -> Result<KnockoutRun> {
    if !adapter.capabilities().intervene {
        return Err(Error::Unsupported(format!("adapter {} cannot intervene", adapter.descriptor().model_id)));
    }
    check_input(adapter, pair)?;
    let resolved = resolve_knockout(adapter, pair, spec)?;
    let (trace, output) = adapter.forward(pair, capture, resolved.as_ref())?;
    Ok(KnockoutRun { trace, output, resolved })
}

/// Split an `N × (p²·4)` head output into a pointmap (`1 + exp` confidence) on the image grid.
///
/// Per token the first `3p²` entries are xyz for each pixel of the patch in row-major order,
/// the last `p²` are raw confidences.
pub fn decode_patch_outputs(out: &Array2<f32>, grid: (usize, usize), patch: usize) -> (Array3<f64>, Array2<f64>) {
    let (rows, cols) = grid;
    let (h, w) = (rows * patch, cols * patch);
    let pp = patch * patch;
    let mut points = Array3::zeros((h, w, 3));
    let mut conf = Array2::zeros((h, w));
    for (i, row) in out.rows().into_iter().enumerate() {
        let (pr, pc) = (i / cols, i % cols);
        for j in 0..pp {
            let (y, x) = (pr * patch + j / patch, pc * patch + j % patch);
            for k in 0..3 {
                points[[y, x, k]] = row[j * 3 + k] as f64;
            }
            conf[[y, x]] = 1.0 + (row[3 * pp + j] as f64).exp();
        }
    }
    (points, conf)
}

/// Inverse layout of [`decode_patch_outputs`] for gradients: `d_points` (H×W×3) and
/// `d_raw_conf` (H×W) into an `N × (p²·4)` matrix.
pub fn encode_patch_grads(d_points: &Array3<f64>, d_raw_conf: &Array2<f64>, grid: (usize, usize), patch: usize) -> Array2<f32> {
    let (rows, cols) = grid;
    let pp = patch * patch;
    let mut out = Array2::zeros((rows * cols, 4 * pp));
    for i in 0..rows * cols {
        let (pr, pc) = (i / cols, i % cols);
        for j in 0..pp {
            let (y, x) = (pr * patch + j / patch, pc * patch + j % patch);
            for k in 0..3 {
                out[[i, j * 3 + k]] = d_points[[y, x, k]] as f32;
            }
            out[[i, 3 * pp + j]] = d_raw_conf[[y, x]] as f32;
        }
    }
    out
}

/// `N × (p²·3)` patch matrix of an `H × W × 3` image, pixels scaled to `[-1, 1]`.
pub fn patchify_image(image: &Array3<f32>, patch: usize) -> Array2<f32> {
    let (h, w, _) = image.dim();
    let (rows, cols) = (h / patch, w / patch);
    let mut out = Array2::zeros((rows * cols, patch * patch * 3));
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            for dy in 0..patch {
                for dx in 0..patch {
                    for k in 0..3 {
                        out[[i, (dy * patch + dx) * 3 + k]] = image[[r * patch + dy, c * patch + dx, k]] * 2.0 - 1.0;
                    }
                }
            }
        }
    }
    out
}

/// Ground-truth pointmap patches flattened per token: `N × (p²·3)`, zeros on invalid pixels.
pub fn patch_vectors(pm: &Pointmap, patch: usize) -> Array2<f64> {
    let (rows, cols) = (pm.height() / patch, pm.width() / patch);
    let mut out = Array2::zeros((rows * cols, patch * patch * 3));
    for i in 0..rows * cols {
        let (pr, pc) = (i / cols, i % cols);
        for j in 0..patch * patch {
            let (y, x) = (pr * patch + j / patch, pc * patch + j % patch);
            if pm.valid[[y, x]] {
                for k in 0..3 {
                    out[[i, j * 3 + k]] = pm.points[[y, x, k]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(blocks: usize) -> ArchDescriptor {
        ArchDescriptor {
            model_id: "t".into(),
            kind: "test".into(),
            image_height: 224,
            image_width: 224,
            patch_size: 16,
            dim: 768,
            heads: 12,
            decoder_blocks: blocks,
            sublayer_order: vec![Sublayer::SelfAttention, Sublayer::CrossAttention, Sublayer::Mlp],
            params: serde_json::Value::Null,
        }
    }

    fn count_post(points: &[ProbePoint], view: View) -> usize {
        points.iter().filter(|p| p.view == view && p.location.position() == Position::PostSkip).count()
    }

    #[test]
    fn twelve_blocks_give_thirty_seven_post_points() {
        let pts = enumerate_probe_points(&desc(12));
        assert_eq!(count_post(&pts, View::First), 37);
        assert_eq!(count_post(&pts, View::Second), 37);
        assert_eq!(pts.len(), 2 * (1 + 12 * 6));
    }

    #[test]
    fn zero_blocks_only_encoder() {
        let pts = enumerate_probe_points(&desc(0));
        assert_eq!(pts, vec![ProbePoint::encoder(View::First), ProbePoint::encoder(View::Second)]);
    }

    #[test]
    fn order_follows_descriptor() {
        let mut d = desc(1);
        d.sublayer_order = vec![Sublayer::CrossAttention, Sublayer::SelfAttention, Sublayer::Mlp];
        let locs = enumerate_locations(&d);
        assert_eq!(locs[1], ProbeLocation::post(0, Sublayer::CrossAttention));
        assert_eq!(locs[2], ProbeLocation::pre(0, Sublayer::CrossAttention));
        assert_eq!(locs[3], ProbeLocation::post(0, Sublayer::SelfAttention));
    }

    #[test]
    fn canonical_strings() {
        let p = ProbeLocation::pre(3, Sublayer::Mlp).at(View::Second);
        assert_eq!(p.to_string(), "v2.dec.b3.mlp.pre");
        assert_eq!("v2.dec.b3.mlp.pre".parse::<ProbePoint>().unwrap(), p);
        assert_eq!(ProbePoint::encoder(View::First).to_string(), "v1.enc.b0.sa.post");
        for bad in ["v3.dec.b0.sa.post", "v1.dec.b0.xx.post", "v1.enc.b2.sa.post", "v1.dec.b01.sa.post", "v1.dec.b0.sa"] {
            assert!(bad.parse::<ProbePoint>().is_err(), "{bad}");
        }
        let k = AttnKey { view: View::Second, block: 2, kind: AttnKind::CrossAttention, head: 7 };
        assert_eq!(k.to_string().parse::<AttnKey>().unwrap(), k);
    }

    #[test]
    fn knockout_spec_json_and_validation() {
        let spec = KnockoutSpec::register_preset();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"top_k_attended\":5"));
        let back: KnockoutSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        assert!(spec.validate(&desc(12)).is_ok());
        assert!(spec.validate(&desc(2)).is_err());
        let mut few_heads = desc(12);
        few_heads.heads = 4;
        assert!(spec.validate(&few_heads).is_err());
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        let m = Array2::from_shape_vec((2, 4), vec![0.1, 0.4, 0.4, 0.1, 0.1, 0.4, 0.4, 0.1]).unwrap();
        assert_eq!(top_k_columns(&[&m], 3), vec![1, 2, 0]);
        assert_eq!(top_k_columns(&[&m], 10).len(), 4);
    }

    #[test]
    fn patch_layout_round_trip() {
        let grid = (2, 3);
        let patch = 2;
        let out = Array2::from_shape_fn((6, 16), |(i, j)| (i * 16 + j) as f32 * 0.01);
        let (points, conf) = decode_patch_outputs(&out, grid, patch);
        let raw = conf.mapv(|c| (c - 1.0).ln());
        let back = encode_patch_grads(&points, &raw, grid, patch);
        for (a, b) in back.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
