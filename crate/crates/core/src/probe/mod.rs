//! Per-patch probes: pointmap MLP and linear probes with confidence, a metric depth
//! probe, and their training and evaluation over probe points.

mod loss;

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{
    confidence_regression_loss, depth_from_raw, depth_loss, mean_norm, normalize_scale, view_loss, Reduction, ViewLoss,
};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geom::Pointmap;
use crate::harness::{
    capture, decode_patch_outputs, encode_patch_grads, patch_vectors, ActivationTrace, ModelAdapter, ProbeLocation, ProbePoint, View,
};
use crate::nn::{all_finite, init_linear, init_relu, AdamW, OptimizerConfig, Params};
use crate::scene::ScenePair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    PointmapMlp,
    PointmapLinear,
    DepthMlp,
}

impl ProbeKind {
    pub fn is_depth(self) -> bool {
        matches!(self, ProbeKind::DepthMlp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    /// Hidden layers before the output layer (ignored by the linear probe).
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    pub alpha: f64,
    pub depth_scale_c: f64,
    pub reduction: Reduction,
    pub init: ProbeInit,
}

/// Starting point for probe training.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeInit {
    #[default]
    Random,
    /// Ridge fit of the point outputs to the target patch vectors over the training set,
    /// confidence weights zero. Linear probes only. `ridge` is relative to the mean
    /// diagonal of the Gram matrix.
    LeastSquares { ridge: f64 },
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            kind: ProbeKind::PointmapMlp,
            hidden_layers: 4,
            hidden_dim: 512,
            alpha: 0.2,
            depth_scale_c: 4.0,
            reduction: Reduction::Sum,
            init: ProbeInit::Random,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.depth_scale_c.is_finite() && self.depth_scale_c > 0.0) {
            return Err(Error::Config(format!("depth_scale_c must be > 0, got {}", self.depth_scale_c)));
        }
        if let ProbeInit::LeastSquares { ridge } = self.init {
            if self.kind != ProbeKind::PointmapLinear {
                return Err(Error::Config("least-squares init needs the linear pointmap probe".into()));
            }
            if !(ridge.is_finite() && ridge > 0.0) {
                return Err(Error::Config(format!("ridge must be > 0, got {ridge}")));
            }
        }
        if self.kind != ProbeKind::PointmapLinear && self.hidden_layers > 0 && self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        Ok(())
    }

    fn effective_hidden(&self) -> usize {
        match self.kind {
            ProbeKind::PointmapLinear => 0,
            _ => self.hidden_layers,
        }
    }

    /// Output width per token for patch size `p`.
    pub fn output_dim(&self, p: usize) -> usize {
        if self.kind.is_depth() {
            2 * p * p
        } else {
            4 * p * p
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Pairs per optimizer step.
    pub batch_pairs: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_pairs: 4, seed: 0, optimizer: OptimizerConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    /// `None` until trained.
    pub final_loss: Option<f64>,
    pub steps: usize,
    pub seed: u64,
}

/// One trained (or freshly initialized) probe.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub point: ProbePoint,
    pub config: ProbeConfig,
    pub input_dim: usize,
    pub patch_size: usize,
    pub params: Params,
    pub stats: ProbeStats,
}

impl Probe {
    pub fn new(point: ProbePoint, config: ProbeConfig, input_dim: usize, patch_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || patch_size == 0 {
            return Err(Error::InvalidInput("probe input dim and patch size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::default();
        let dims = Self::layer_dims(&config, input_dim, patch_size);
        let last = dims.len() - 2;
        for (i, pair) in dims.windows(2).enumerate() {
            let w = if i < last { init_relu(&mut rng, pair[0], pair[1]) } else { init_linear(&mut rng, pair[0], pair[1]) };
            params.push(format!("l{i}.w"), w);
            params.push(format!("l{i}.b"), Array2::zeros((1, pair[1])));
        }
        Ok(Self { point, config, input_dim, patch_size, params, stats: ProbeStats { final_loss: None, steps: 0, seed } })
    }

    pub fn layer_dims(config: &ProbeConfig, input_dim: usize, patch_size: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(config.hidden_dim, config.effective_hidden()));
        dims.push(config.output_dim(patch_size));
        dims
    }

    /// Check that persisted parameters have the shapes this configuration implies.
    pub fn check_shapes(&self) -> Result<()> {
        let dims = Self::layer_dims(&self.config, self.input_dim, self.patch_size);
        let ok = self.params.len() == 2 * (dims.len() - 1)
            && dims.windows(2).enumerate().all(|(i, d)| {
                self.params.values[2 * i].dim() == (d[0], d[1]) && self.params.values[2 * i + 1].dim() == (1, d[1])
            });
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("probe {} parameters do not match its configuration", self.point)))
        }
    }

    fn forward_tape(&self, tape: &mut Tape, w: &[Var], x: Var) -> Var {
        let layers = w.len() / 2;
        let mut h = x;
        for i in 0..layers {
            let y = tape.matmul(h, w[2 * i]);
            h = tape.add_row(y, w[2 * i + 1]);
            if i + 1 < layers {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Raw outputs for every token row independently.
    pub fn forward(&self, tokens: &Array2<f32>) -> Result<Array2<f32>> {
        if tokens.ncols() != self.input_dim {
            return Err(Error::InvalidInput(format!(
                "token dim {} does not match probe input {}",
                tokens.ncols(),
                self.input_dim
            )));
        }
        let mut tape = Tape::new();
        let w = self.params.register(&mut tape);
        let x = tape.leaf(tokens.clone());
        let out = self.forward_tape(&mut tape, &w, x);
        Ok(tape.value(out).clone())
    }

    /// Reassembled prediction on the image grid; `valid` is the target's validity mask.
    pub fn predict(&self, tokens: &Array2<f32>, grid: (usize, usize), valid: &Array2<bool>) -> Result<ProbeOutput> {
        check_grid(tokens, grid)?;
        let out = self.forward(tokens)?;
        if self.config.kind.is_depth() {
            let (depth, confidence) = decode_depth_outputs(&out, grid, self.patch_size, self.config.depth_scale_c);
            Ok(ProbeOutput::Depth { depth, confidence, valid: valid.clone() })
        } else {
            let (points, conf) = decode_patch_outputs(&out, grid, self.patch_size);
            Ok(ProbeOutput::Pointmap(Pointmap::new(points, Some(conf), valid.clone())?))
        }
    }

    /// Training loss of this probe on one pair, exactly as computed during training.
    pub fn loss_on(&self, tokens: &Array2<f32>, pair: &ScenePair) -> Result<f64> {
        check_grid(tokens, pair.grid())?;
        let out = self.forward(tokens)?;
        let (l, _) = self.target_loss(&out, pair, false)?;
        Ok(self.reduce(&l))
    }

    fn reduce(&self, l: &ViewLoss) -> f64 {
        match self.config.reduction {
            Reduction::Sum => l.value,
            Reduction::Mean => l.value / l.count as f64,
        }
    }

    fn target_loss(&self, out: &Array2<f32>, pair: &ScenePair, with_grad: bool) -> Result<(ViewLoss, Array2<f32>)> {
        let v = self.point.view.index();
        let grid = pair.grid();
        if self.config.kind.is_depth() {
            depth_head_loss(
                out,
                &pair.depths[v],
                pair.valid(v),
                grid,
                self.patch_size,
                self.config.alpha,
                self.config.depth_scale_c,
                with_grad,
            )
        } else {
            head_loss(out, &pair.gt_pointmaps[v], grid, self.patch_size, self.config.alpha, with_grad)
        }
    }
}

fn check_grid(tokens: &Array2<f32>, grid: (usize, usize)) -> Result<()> {
    if tokens.nrows() != grid.0 * grid.1 {
        return Err(Error::InvalidInput(format!("{} tokens for a {}x{} grid", tokens.nrows(), grid.0, grid.1)));
    }
    Ok(())
}

/// Probe prediction for one view of one pair.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeOutput {
    Pointmap(Pointmap),
    Depth { depth: Array2<f64>, confidence: Array2<f64>, valid: Array2<bool> },
}

impl ProbeOutput {
    pub fn pointmap(&self) -> Option<&Pointmap> {
        match self {
            ProbeOutput::Pointmap(p) => Some(p),
            ProbeOutput::Depth { .. } => None,
        }
    }
}

/// Split `N × 2p²` depth-head outputs into depth `exp(x/c)` and confidence `1 + exp(raw)`.
pub fn decode_depth_outputs(out: &Array2<f32>, grid: (usize, usize), patch: usize, c: f64) -> (Array2<f64>, Array2<f64>) {
    let (rows, cols) = grid;
    let pp = patch * patch;
    let mut depth = Array2::zeros((rows * patch, cols * patch));
    let mut conf = Array2::zeros((rows * patch, cols * patch));
    for (i, row) in out.rows().into_iter().enumerate() {
        let (pr, pc) = (i / cols, i % cols);
        for j in 0..pp {
            let (y, x) = (pr * patch + j / patch, pc * patch + j % patch);
            depth[[y, x]] = depth_from_raw(row[j] as f64, c);
            conf[[y, x]] = 1.0 + (row[pp + j] as f64).exp();
        }
    }
    (depth, conf)
}

/// Confidence loss of raw pointmap-head outputs against one view's target, with the
/// gradient w.r.t. the raw outputs when requested.
pub fn head_loss(
    out: &Array2<f32>,
    gt: &Pointmap,
    grid: (usize, usize),
    patch: usize,
    alpha: f64,
    with_grad: bool,
) -> Result<(ViewLoss, Array2<f32>)> {
    let (points, conf) = decode_patch_outputs(out, grid, patch);
    if points.dim() != gt.points.dim() {
        return Err(Error::InvalidInput("head output does not cover the target grid".into()));
    }
    let idx: Vec<(usize, usize)> = gt.valid.indexed_iter().filter(|(_, &ok)| ok).map(|(ix, _)| ix).collect();
    let pred: Vec<_> = idx.iter().map(|&(v, u)| nalgebra::Vector3::new(points[[v, u, 0]], points[[v, u, 1]], points[[v, u, 2]])).collect();
    let c: Vec<f64> = idx.iter().map(|&ix| conf[ix]).collect();
    let target: Vec<_> = idx.iter().map(|&(v, u)| gt.point(v, u)).collect();
    let l = view_loss(&pred, &c, &target, alpha, with_grad)?;
    let grad = if with_grad {
        let mut d_points = Array3::zeros(points.dim());
        let mut d_raw = Array2::zeros(conf.dim());
        for (k, &(v, u)) in idx.iter().enumerate() {
            for a in 0..3 {
                d_points[[v, u, a]] = l.d_pred[k][a];
            }
            // C = 1 + exp(raw)  ⇒  dC/draw = C − 1.
            d_raw[[v, u]] = l.d_conf[k] * (c[k] - 1.0);
        }
        encode_patch_grads(&d_points, &d_raw, grid, patch)
    } else {
        Array2::zeros((0, 0))
    };
    Ok((l, grad))
}

/// Depth-head counterpart of [`head_loss`].
#[allow(clippy::too_many_arguments)]
pub fn depth_head_loss(
    out: &Array2<f32>,
    gt_depth: &Array2<f64>,
    valid: &Array2<bool>,
    grid: (usize, usize),
    patch: usize,
    alpha: f64,
    c: f64,
    with_grad: bool,
) -> Result<(ViewLoss, Array2<f32>)> {
    let (_, conf) = decode_depth_outputs(out, grid, patch, c);
    let cols = grid.1;
    let pp = patch * patch;
    let mut idx = Vec::new();
    let mut raw = Vec::new();
    for (i, row) in out.rows().into_iter().enumerate() {
        let (pr, pc) = (i / cols, i % cols);
        for j in 0..pp {
            let (y, x) = (pr * patch + j / patch, pc * patch + j % patch);
            if valid[[y, x]] {
                idx.push((i, j, y, x));
                raw.push(row[j] as f64);
            }
        }
    }
    let cs: Vec<f64> = idx.iter().map(|&(_, _, y, x)| conf[[y, x]]).collect();
    let gt: Vec<f64> = idx.iter().map(|&(_, _, y, x)| gt_depth[[y, x]]).collect();
    let l = depth_loss(&raw, &cs, &gt, alpha, c, with_grad)?;
    let mut grad = Array2::zeros(if with_grad { out.dim() } else { (0, 0) });
    if with_grad {
        for (k, &(i, j, _, _)) in idx.iter().enumerate() {
            grad[[i, j]] = l.d_pred[k][0] as f32;
            grad[[i, pp + j]] = (l.d_conf[k] * (cs[k] - 1.0)) as f32;
        }
    }
    Ok((l, grad))
}

/// Where probe training and evaluation read tokens from.
pub trait TokenSource: Sync {
    /// Tokens (`N × D`) of pair `pair` at `point`.
    fn tokens(&self, pair: usize, point: &ProbePoint) -> Result<Array2<f32>>;
}

/// In-memory traces, one per pair, in pair order.
pub struct TraceSource<'a>(pub &'a [ActivationTrace]);

impl TokenSource for TraceSource<'_> {
    fn tokens(&self, pair: usize, point: &ProbePoint) -> Result<Array2<f32>> {
        let t = self.0.get(pair).ok_or_else(|| Error::NotFound(format!("no trace for pair index {pair}")))?;
        Ok(t.token(point)?.clone())
    }
}

/// Captures on demand from a live adapter.
pub struct LiveSource<'a> {
    pub adapter: &'a dyn ModelAdapter,
    pub pairs: &'a [ScenePair],
}

impl TokenSource for LiveSource<'_> {
    fn tokens(&self, pair: usize, point: &ProbePoint) -> Result<Array2<f32>> {
        let p = self.pairs.get(pair).ok_or_else(|| Error::NotFound(format!("no pair at index {pair}")))?;
        Ok(capture(self.adapter, p)?.token(point)?.clone())
    }
}

/// Trained probes for one model, one per probe point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeBank {
    pub model_id: String,
    pub probes: BTreeMap<ProbePoint, Probe>,
}

impl ProbeBank {
    pub fn get(&self, point: &ProbePoint) -> Result<&Probe> {
        self.probes.get(point).ok_or_else(|| Error::NotFound(format!("no probe trained for {point}")))
    }

    pub fn insert(&mut self, probe: Probe) -> Result<()> {
        if let Some(other) = self.probes.values().next() {
            if other.input_dim != probe.input_dim {
                return Err(Error::InvalidInput(format!(
                    "probe input dim {} differs from the bank's {}",
                    probe.input_dim, other.input_dim
                )));
            }
        }
        self.probes.insert(probe.point, probe);
        Ok(())
    }
}

/// Why a probe did not finish training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFailure {
    pub point: ProbePoint,
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub probe: Probe,
    /// Mean per-pair loss of every step.
    pub history: Vec<f64>,
}

/// Stable per-point seed derived from the root seed and the canonical point string.
pub fn point_seed(seed: u64, point: &ProbePoint) -> u64 {
    point.to_string().bytes().fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Train one probe. Non-finite losses or gradients abort with a [`ProbeFailure`].
pub fn train_probe(
    point: ProbePoint,
    source: &dyn TokenSource,
    pairs: &[ScenePair],
    config: &ProbeConfig,
    train: &TrainConfig,
) -> std::result::Result<TrainedProbe, ProbeFailure> {
    let fail = |step: usize, reason: String| ProbeFailure { point, step, reason };
    if pairs.is_empty() {
        return Err(fail(0, "empty training set".into()));
    }
    train.optimizer.validate().map_err(|e| fail(0, e.to_string()))?;
    let first = source.tokens(0, &point).map_err(|e| fail(0, e.to_string()))?;
    let seed = point_seed(train.seed, &point);
    let mut probe = Probe::new(point, *config, first.ncols(), pairs[0].config.patch_size, seed).map_err(|e| fail(0, e.to_string()))?;
    let mut cache: Vec<Option<Array2<f32>>> = vec![None; pairs.len()];
    cache[0] = Some(first);
    if let ProbeInit::LeastSquares { ridge } = config.init {
        for (i, slot) in cache.iter_mut().enumerate().skip(1) {
            *slot = Some(source.tokens(i, &point).map_err(|e| fail(0, e.to_string()))?);
        }
        let tokens: Vec<&Array2<f32>> = cache.iter().map(|t| t.as_ref().expect("cached")).collect();
        least_squares_init(&mut probe, &tokens, pairs, ridge).map_err(|e| fail(0, e.to_string()))?;
    }
    let mut opt = AdamW::new(train.optimizer, &probe.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let batch = train.batch_pairs.clamp(1, pairs.len());
    let mut history = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut chosen = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            chosen.push(order[cursor]);
            cursor += 1;
        }
        for &i in &chosen {
            if cache[i].is_none() {
                cache[i] = Some(source.tokens(i, &point).map_err(|e| fail(step, e.to_string()))?);
            }
        }
        let stacked = {
            let views: Vec<_> = chosen.iter().map(|&i| cache[i].as_ref().expect("cached").view()).collect();
            ndarray::concatenate(Axis(0), &views).map_err(|e| fail(step, e.to_string()))?
        };
        let mut tape = Tape::new();
        let w = probe.params.register(&mut tape);
        let x = tape.leaf(stacked);
        let out = probe.forward_tape(&mut tape, &w, x);
        let out_val = tape.value(out);
        let n = pairs[0].grid().0 * pairs[0].grid().1;
        let mut seed_grad = Array2::zeros(out_val.dim());
        let mut total = 0.0;
        for (b, &i) in chosen.iter().enumerate() {
            let rows = out_val.slice(s![b * n..(b + 1) * n, ..]).to_owned();
            let (l, g) = probe.target_loss(&rows, &pairs[i], true).map_err(|e| fail(step, e.to_string()))?;
            let norm = match config.reduction {
                Reduction::Sum => 1.0,
                Reduction::Mean => 1.0 / l.count as f64,
            } / batch as f64;
            total += l.value * norm;
            seed_grad.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&g.mapv(|v| v * norm as f32));
        }
        if !total.is_finite() {
            return Err(fail(step, format!("non-finite loss {total}")));
        }
        let grads = tape.backward(&[(out, seed_grad)]);
        let mut acc = probe.params.zeros_like();
        Params::accumulate(&mut acc, &w, &grads);
        if !all_finite(&acc) {
            return Err(fail(step, "non-finite gradient".into()));
        }
        history.push(total);
        opt.step(&mut probe.params, &acc, train.optimizer.lr_at(step, train.steps));
    }
    probe.stats = ProbeStats { final_loss: history.last().copied(), steps: train.steps, seed };
    Ok(TrainedProbe { probe, history })
}

/// Overwrite a linear probe with the ridge solution mapping tokens (plus bias) to the
/// target patch vectors. Invalid pixels contribute zero targets.
fn least_squares_init(probe: &mut Probe, tokens: &[&Array2<f32>], pairs: &[ScenePair], ridge: f64) -> Result<()> {
    let d = probe.input_dim;
    let pp3 = 3 * probe.patch_size * probe.patch_size;
    let mut gram = Array2::<f64>::zeros((d + 1, d + 1));
    let mut cross = Array2::<f64>::zeros((d + 1, pp3));
    for (t, pair) in tokens.iter().zip(pairs) {
        let mut x = Array2::<f64>::ones((t.nrows(), d + 1));
        x.slice_mut(s![.., ..d]).assign(&t.mapv(f64::from));
        let y = patch_vectors(&pair.gt_pointmaps[probe.point.view.index()], probe.patch_size);
        gram += &x.t().dot(&x);
        cross += &x.t().dot(&y);
    }
    let lambda = ridge * gram.diag().sum() / (d + 1) as f64;
    let a = nalgebra::DMatrix::from_fn(d + 1, d + 1, |i, j| gram[[i, j]] + if i == j { lambda } else { 0.0 });
    let b = nalgebra::DMatrix::from_fn(d + 1, pp3, |i, j| cross[[i, j]]);
    let sol = a.cholesky().ok_or_else(|| Error::Numerical("least-squares init: Gram matrix not positive definite".into()))?.solve(&b);
    let w = &mut probe.params.values[0];
    w.fill(0.0);
    for i in 0..d {
        for j in 0..pp3 {
            w[[i, j]] = sol[(i, j)] as f32;
        }
    }
    let bias = &mut probe.params.values[1];
    bias.fill(0.0);
    for j in 0..pp3 {
        bias[[0, j]] = sol[(d, j)] as f32;
    }
    Ok(())
}

/// Result of training many probes.
#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub bank: ProbeBank,
    pub histories: BTreeMap<ProbePoint, Vec<f64>>,
    pub failures: Vec<ProbeFailure>,
}

/// Train one independent probe per point, in parallel over points with `jobs` workers.
/// Diverging probes are reported in `failures`; the others still complete.
pub fn train_probes(
    model_id: &str,
    points: &[ProbePoint],
    source: &dyn TokenSource,
    pairs: &[ScenePair],
    config: &ProbeConfig,
    train: &TrainConfig,
    jobs: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    train.optimizer.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| points.par_iter().map(|&p| train_probe(p, source, pairs, config, train)).collect());
    let mut outcome = TrainOutcome { bank: ProbeBank { model_id: model_id.to_string(), ..Default::default() }, ..Default::default() };
    for r in results {
        match r {
            Ok(t) => {
                outcome.histories.insert(t.probe.point, t.history);
                outcome.bank.insert(t.probe)?;
            }
            Err(f) => {
                log::warn!("probe {} aborted at step {}: {}", f.point, f.step, f.reason);
                outcome.failures.push(f);
            }
        }
    }
    Ok(outcome)
}

/// Predictions of one probe point over the given pairs.
pub fn evaluate_point(bank: &ProbeBank, point: &ProbePoint, source: &dyn TokenSource, pairs: &[ScenePair]) -> Result<Vec<ProbeOutput>> {
    let probe = bank.get(point)?;
    pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| probe.predict(&source.tokens(i, point)?, pair.grid(), pair.valid(point.view.index())))
        .collect()
}

/// Predictions of both views' probes at one location, per pair.
pub fn evaluate_probe(
    bank: &ProbeBank,
    location: ProbeLocation,
    source: &dyn TokenSource,
    pairs: &[ScenePair],
) -> Result<Vec<[ProbeOutput; 2]>> {
    let v1 = evaluate_point(bank, &location.at(View::First), source, pairs)?;
    let v2 = evaluate_point(bank, &location.at(View::Second), source, pairs)?;
    Ok(v1.into_iter().zip(v2).map(|(a, b)| [a, b]).collect())
}
