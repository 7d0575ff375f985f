//! The pipeline stages. Each stage reads the artifacts of earlier stages from the run
//! directory, writes its own, and leaves a summary in `summaries/{command}.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use ptprobe::attn::{classify_heads, rank_register_tokens, recall_curve, GtCorrespondences, HeadLabel};
use ptprobe::harness::{
    capture_with, enumerate_locations, enumerate_probe_points, post_skip_locations, pre_skip_locations, AttnKind,
    CaptureOptions, KeyTokens, KnockoutSpec, MaskMode, ModelAdapter, PlantedModel, ProbeLocation, ToyModel, View,
};
use ptprobe::intervene::compare_knockout;
use ptprobe::metrics::{aligned_second_view_error, depth_metrics, layer_contribution, scale_shift_invariant_error};
use ptprobe::probe::{evaluate_probe, train_probes, ProbeBank, ProbeOutput};
use ptprobe::scene::{generate_scene_pair, ScenePair};
use ptprobe::store::{
    self, read_bank, read_manifest, read_model, read_scene_pair, read_trace, write_bank, write_curve_csv, write_json,
    write_manifest, write_planted_model, write_ptms, write_scene_pair, write_toy_model, write_trace, CurveRow, Manifest,
    PtmsFrame, RunLayout, StoreSource,
};
use ptprobe::{Error, Result};

use crate::config::{pair_seed, Metric, ModelKind, PipelineConfig, PointSet};

pub const SUMMARY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Generate,
    Capture,
    Train,
    Eval,
    Heads,
    Knockout,
    Export,
}

impl Command {
    pub const ALL: [Command; 7] =
        [Command::Generate, Command::Capture, Command::Train, Command::Eval, Command::Heads, Command::Knockout, Command::Export];

    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Capture => "capture",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Heads => "heads",
            Command::Knockout => "knockout",
            Command::Export => "export",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Skipped,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub exit_code: i32,
    pub kind: String,
    pub message: String,
}

/// Machine-readable outcome of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub command: Command,
    pub status: Status,
    pub seed: u64,
    /// Files written, relative to the run root.
    pub outputs: Vec<String>,
    pub details: Value,
    pub error: Option<ErrorInfo>,
}

/// Exit code for an error: 2 configuration, 3 missing prerequisite, 4 numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::NotFound(_) => 3,
        Error::Numerical(_) | Error::DegenerateGeometry(_) | Error::UndefinedScale(_) => 4,
        _ => 1,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::NotFound(_) => "missing_prerequisite",
        Error::Numerical(_) | Error::DegenerateGeometry(_) | Error::UndefinedScale(_) => "numerical",
        _ => "failure",
    }
}

/// One pipeline invocation.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub layout: RunLayout,
    pub force: bool,
}

struct Output {
    outputs: Vec<String>,
    details: Value,
}

struct Dataset {
    train: Vec<String>,
    eval: Vec<String>,
}

fn missing(what: &str, producer: &str) -> Error {
    Error::NotFound(format!("{what} not found; run `ptprobe {producer}` first"))
}

impl Pipeline {
    pub fn new(config: PipelineConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let layout = RunLayout::new(config.out.clone());
        Ok(Self { config, layout, force })
    }

    fn summary_path(&self, cmd: Command) -> PathBuf {
        self.layout.summaries().join(format!("{}.json", cmd.name()))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.layout.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    /// Run one command and record its summary. Completed stages are skipped unless forced.
    pub fn run(&self, cmd: Command, knockout: Option<&KnockoutSpec>) -> (Summary, Result<()>) {
        if !self.force {
            if let Ok(prev) = store::read_json::<Summary>(&self.summary_path(cmd)) {
                if prev.status == Status::Ok {
                    log::info!("{} is up to date; pass --force to rerun", cmd.name());
                    let skipped = Summary { status: Status::Skipped, ..prev };
                    return (skipped, Ok(()));
                }
            }
        }
        let result = self.prepare().and_then(|_| match cmd {
            Command::Generate => self.generate(),
            Command::Capture => self.capture(),
            Command::Train => self.train(),
            Command::Eval => self.eval(),
            Command::Heads => self.heads(),
            Command::Knockout => self.knockout(knockout),
            Command::Export => self.export(),
        });
        let (status, outputs, details, error, outcome) = match result {
            Ok(o) => (Status::Ok, o.outputs, o.details, None, Ok(())),
            Err((e, details)) => {
                let info = ErrorInfo { exit_code: exit_code(&e), kind: error_kind(&e).into(), message: e.to_string() };
                (Status::Error, Vec::new(), details, Some(info), Err(e))
            }
        };
        let summary = Summary { schema_version: SUMMARY_VERSION, command: cmd, status, seed: self.config.seed, outputs, details, error };
        if self.layout.root.exists() {
            if let Err(e) = write_json(&self.summary_path(cmd), &summary) {
                log::error!("cannot write summary: {e}");
            }
        }
        (summary, outcome)
    }

    fn prepare(&self) -> std::result::Result<(), (Error, Value)> {
        if self.layout.is_sealed() {
            if !self.force {
                return Err((Error::Config(format!("run {} is sealed; pass --force to modify it", self.layout.root.display())), Value::Null));
            }
            fs::remove_file(self.layout.root.join(store::SEALED)).map_err(|e| (Error::Io(e), Value::Null))?;
        }
        Ok(())
    }

    fn dataset(&self) -> Result<Dataset> {
        let dir = self.layout.dataset();
        let m = read_manifest(&dir).map_err(|e| match e {
            Error::NotFound(_) => missing("dataset", "generate"),
            e => e,
        })?;
        let split: BTreeMap<String, Vec<String>> = serde_json::from_value(m.config["split"].clone())
            .map_err(|e| Error::CorruptStore { path: dir.join(store::MANIFEST), reason: e.to_string() })?;
        Ok(Dataset { train: split.get("train").cloned().unwrap_or_default(), eval: split.get("eval").cloned().unwrap_or_default() })
    }

    fn pairs(&self, ids: &[String]) -> Result<Vec<ScenePair>> {
        ids.iter().map(|id| read_scene_pair(&self.layout.pair_dir(id))).collect()
    }

    fn trace_dirs(&self, ids: &[String]) -> Result<Vec<PathBuf>> {
        ids.iter()
            .map(|id| {
                let d = self.layout.trace_dir(id);
                if d.join(store::MANIFEST).exists() {
                    Ok(d)
                } else {
                    Err(missing(&format!("trace for pair {id}"), "capture"))
                }
            })
            .collect()
    }

    fn adapter(&self) -> Result<Box<dyn ModelAdapter>> {
        let dir = self.layout.model();
        if !dir.join("model.json").exists() {
            return Err(missing("model", "capture"));
        }
        read_model(&dir)
    }

    fn bank(&self) -> Result<ProbeBank> {
        read_bank(&self.layout.probes()).map_err(|e| match e {
            Error::NotFound(_) => missing("probe bank", "train"),
            e => e,
        })
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    fn generate(&self) -> std::result::Result<Output, (Error, Value)> {
        let c = &self.config;
        let inner = || -> Result<Output> {
            fs::create_dir_all(&self.layout.root)?;
            fs::write(self.layout.root.join("config.toml"), c.to_toml()?)?;
            let n = c.dataset.train_pairs + c.dataset.eval_pairs;
            let pairs: Vec<ScenePair> = self.pool()?.install(|| {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(|i| generate_scene_pair(pair_seed(c.seed, i), &c.dataset.scene)).collect::<Result<_>>()
            })?;
            let mut ids = Vec::with_capacity(n);
            for p in &pairs {
                write_scene_pair(&self.layout.pair_dir(&p.id()), p)?;
                ids.push(p.id());
            }
            let (train, eval) = ids.split_at(c.dataset.train_pairs);
            let mut m = Manifest::new("dataset");
            m.pair_ids = ids.clone();
            m.seed = Some(c.seed);
            m.config = json!({ "scene": c.dataset.scene, "split": { "train": train, "eval": eval } });
            write_manifest(&self.layout.dataset(), &m)?;
            let covis: Vec<usize> = pairs.iter().map(|p| p.pixel_correspondences.len()).collect();
            Ok(Output {
                outputs: vec!["config.toml".into(), "dataset/manifest.json".into()],
                details: json!({
                    "pairs": n,
                    "train_pairs": train.len(),
                    "eval_pairs": eval.len(),
                    "min_correspondences": covis.iter().min(),
                    "max_correspondences": covis.iter().max(),
                }),
            })
        };
        inner().map_err(|e| (e, Value::Null))
    }

    fn capture(&self) -> std::result::Result<Output, (Error, Value)> {
        let c = &self.config;
        let inner = || -> Result<Output> {
            let ds = self.dataset()?;
            let train_pairs = self.pairs(&ds.train)?;
            let mut details = serde_json::Map::new();
            let adapter: Box<dyn ModelAdapter> = match c.model.kind {
                ModelKind::Planted => {
                    let m = PlantedModel::new(c.model.planted.clone())?;
                    write_planted_model(&self.layout.model(), &m)?;
                    Box::new(m)
                }
                ModelKind::Toy => {
                    let mut m = ToyModel::new(c.model.toy, c.seed)?;
                    let before = m.view1_regression(&train_pairs)?;
                    let report = m.train(&train_pairs, &c.model.toy_train)?;
                    let after = m.view1_regression(&train_pairs)?;
                    details.insert("toy_training".into(), json!({ "steps": report.steps, "view1_regression_before": before, "view1_regression_after": after }));
                    write_toy_model(&self.layout.model(), &m)?;
                    Box::new(m)
                }
                ModelKind::External => self.adapter()?,
            };
            let desc = adapter.descriptor().clone();
            let ids: Vec<String> = ds.train.iter().chain(&ds.eval).cloned().collect();
            let opts = CaptureOptions { tokens: true, attention: true, head_internals: false };
            let adapter_ref: &dyn ModelAdapter = adapter.as_ref();
            self.pool()?.install(|| {
                use rayon::prelude::*;
                ids.par_iter().try_for_each(|id| {
                    let pair = read_scene_pair(&self.layout.pair_dir(id))?;
                    let trace = capture_with(adapter_ref, &pair, &opts)?;
                    write_trace(&self.layout.trace_dir(id), &trace)
                })
            })?;
            details.insert("model_id".into(), json!(desc.model_id));
            details.insert("pairs".into(), json!(ids.len()));
            details.insert("probe_points".into(), json!(enumerate_probe_points(&desc).len()));
            Ok(Output { outputs: vec!["model/model.json".into(), "traces".into()], details: Value::Object(details) })
        };
        inner().map_err(|e| (e, Value::Null))
    }

    fn locations(&self, adapter_desc: &ptprobe::harness::ArchDescriptor) -> Vec<ProbeLocation> {
        match self.config.probe.points {
            PointSet::PostSkip => post_skip_locations(adapter_desc),
            PointSet::All => enumerate_locations(adapter_desc),
        }
    }

    fn train(&self) -> std::result::Result<Output, (Error, Value)> {
        let c = &self.config;
        let ds = self.dataset().map_err(|e| (e, Value::Null))?;
        let pairs = self.pairs(&ds.train).map_err(|e| (e, Value::Null))?;
        let dirs = self.trace_dirs(&ds.train).map_err(|e| (e, Value::Null))?;
        let adapter = self.adapter().map_err(|e| (e, Value::Null))?;
        let desc = adapter.descriptor().clone();
        let points: Vec<_> = self.locations(&desc).into_iter().flat_map(|l| View::BOTH.map(|v| l.at(v))).collect();
        let source = StoreSource { dirs };
        let outcome = train_probes(&desc.model_id, &points, &source, &pairs, &c.probe.config, &c.probe.train, c.jobs)
            .map_err(|e| (e, Value::Null))?;
        write_bank(&self.layout.probes(), &outcome.bank).map_err(|e| (e, Value::Null))?;
        let losses: BTreeMap<String, Option<f64>> =
            outcome.bank.probes.iter().map(|(p, probe)| (p.to_string(), probe.stats.final_loss)).collect();
        let details = json!({
            "model_id": desc.model_id,
            "probes": outcome.bank.probes.len(),
            "final_losses": losses,
            "failures": outcome.failures,
        });
        if !outcome.failures.is_empty() {
            let names: Vec<String> = outcome.failures.iter().map(|f| f.point.to_string()).collect();
            return Err((Error::Numerical(format!("probe training diverged at {}", names.join(", "))), details));
        }
        Ok(Output { outputs: vec!["probes/bank.json".into()], details })
    }

    fn eval(&self) -> std::result::Result<Output, (Error, Value)> {
        self.eval_inner().map_err(|e| (e, Value::Null))
    }

    fn eval_inner(&self) -> Result<Output> {
        let c = &self.config;
        let ds = self.dataset()?;
        let pairs = self.pairs(&ds.eval)?;
        let source = StoreSource { dirs: self.trace_dirs(&ds.eval)? };
        let bank = self.bank()?;
        let adapter = self.adapter()?;
        let desc = adapter.descriptor().clone();
        let mut outputs = vec!["eval/report.json".to_string()];
        let mut curves = serde_json::Map::new();
        let mut rows_json = Vec::new();
        for (name, locs) in [("post", post_skip_locations(&desc)), ("pre", pre_skip_locations(&desc))] {
            let locs: Vec<_> = locs
                .into_iter()
                .filter(|l| View::BOTH.iter().all(|v| bank.probes.contains_key(&l.at(*v))))
                .collect();
            if locs.is_empty() {
                continue;
            }
            let mut errors = Vec::new();
            for loc in &locs {
                let preds = evaluate_probe(&bank, *loc, &source, &pairs)?;
                let row = self.score_location(*loc, &preds, &pairs, c)?;
                errors.push(row.1);
                rows_json.push(row.0);
            }
            let sublayers: Vec<_> = locs.iter().skip(1).filter_map(|l| l.sublayer()).collect();
            let contribution = if errors.len() >= 2 && sublayers.len() == errors.len() - 1 {
                layer_contribution(&errors, &sublayers).ok()
            } else {
                None
            };
            let rows: Vec<CurveRow> = locs
                .iter()
                .enumerate()
                .map(|(i, l)| CurveRow {
                    probe_point: l.at(View::Second).to_string(),
                    error: errors[i],
                    contribution_pct: if i == 0 { None } else { contribution.as_ref().map(|c| c.per_layer[i - 1]) },
                })
                .collect();
            let file = self.layout.eval().join(format!("curve_{name}.csv"));
            write_curve_csv(&file, &rows)?;
            outputs.push(self.rel(&file));
            let decreasing = errors.windows(2).filter(|w| w[1] < w[0]).count();
            curves.insert(
                name.into(),
                json!({
                    "points": rows.len(),
                    "first": errors[0],
                    "last": errors[errors.len() - 1],
                    "last_over_first": errors[errors.len() - 1] / errors[0],
                    "decreasing_pairs": decreasing,
                    "adjacent_pairs": errors.len() - 1,
                    "layer_contribution": contribution,
                }),
            );
        }
        if rows_json.is_empty() {
            return Err(missing("probes for both views at any location", "train"));
        }
        let report = json!({ "model_id": desc.model_id, "pairs": ds.eval, "locations": rows_json, "curves": curves });
        write_json(&self.layout.eval().join("report.json"), &report)?;
        Ok(Output { outputs, details: json!({ "curves": curves }) })
    }

    /// Per-location report row and the curve value (aligned error, or absrel for depth probes).
    fn score_location(&self, loc: ProbeLocation, preds: &[[ProbeOutput; 2]], pairs: &[ScenePair], c: &PipelineConfig) -> Result<(Value, f64)> {
        let n = pairs.len() as f64;
        let mut row = serde_json::Map::new();
        row.insert("point".into(), json!(loc.at(View::Second).to_string()));
        let curve;
        if let (Some(_), Some(_)) = (preds[0][0].pointmap(), preds[0][1].pointmap()) {
            let mut aligned = Vec::new();
            let mut ss = 0.0;
            for (p, pair) in preds.iter().zip(pairs) {
                let (p1, p2) = (p[0].pointmap().expect("pointmap"), p[1].pointmap().expect("pointmap"));
                aligned.push(aligned_second_view_error(p2, &pair.gt_pointmaps[1])?.mean);
                if c.eval.metrics.contains(&Metric::ScaleShiftInvariant) {
                    let e = scale_shift_invariant_error([p1, p2], [&pair.gt_pointmaps[0], &pair.gt_pointmaps[1]])?;
                    ss += e.total / (e.count[0] + e.count[1]) as f64;
                }
            }
            curve = aligned.iter().sum::<f64>() / n;
            if c.eval.metrics.contains(&Metric::Aligned) {
                row.insert("aligned_error".into(), json!(curve));
                row.insert("aligned_error_per_pair".into(), json!(aligned));
            }
            if c.eval.metrics.contains(&Metric::ScaleShiftInvariant) {
                row.insert("scale_shift_invariant_error".into(), json!(ss / n));
            }
        } else {
            let mut absrel = [0.0; 2];
            let mut delta1 = [0.0; 2];
            for (p, pair) in preds.iter().zip(pairs) {
                for v in 0..2 {
                    if let ProbeOutput::Depth { depth, valid, .. } = &p[v] {
                        let m = depth_metrics(depth, &pair.depths[v], valid, c.eval.depth_align)?;
                        absrel[v] += m.absrel / n;
                        delta1[v] += m.delta1 / n;
                    }
                }
            }
            curve = absrel[1];
            row.insert("absrel".into(), json!(absrel));
            row.insert("delta1".into(), json!(delta1));
        }
        Ok((Value::Object(row), curve))
    }

    fn heads(&self) -> std::result::Result<Output, (Error, Value)> {
        let c = &self.config;
        let inner = || -> Result<Output> {
            let ds = self.dataset()?;
            let pairs = self.pairs(&ds.eval)?;
            let traces = self.trace_dirs(&ds.eval)?.iter().map(|d| read_trace(d)).collect::<Result<Vec<_>>>()?;
            let gts = pairs.iter().map(GtCorrespondences::from_pair).collect::<Result<Vec<_>>>()?;
            let adapter = self.adapter()?;
            let desc = adapter.descriptor().clone();
            let profiles = classify_heads(&traces, &gts, desc.patch_size, &c.heads.thresholds)?;
            write_json(&self.layout.heads().join("profiles.json"), &profiles)?;
            let mut recall = Vec::new();
            for view in View::BOTH {
                for (block, head, r) in recall_curve(&traces, &gts, view, desc.decoder_blocks, desc.patch_size, c.heads.recall_threshold_px)? {
                    recall.push(json!({ "view": view, "block": block, "head": head, "recall": r }));
                }
            }
            write_json(&self.layout.heads().join("recall.json"), &recall)?;
            let mut registers = Vec::new();
            for p in profiles.iter().filter(|p| p.label == HeadLabel::Register) {
                let r = rank_register_tokens(&traces[0], &p.key(), c.heads.thresholds.register_k)?;
                registers.push(json!({ "key": p.key().to_string(), "pair_id": traces[0].pair_id, "tokens": r.tokens, "scores": r.scores, "ambiguous": r.ambiguous }));
            }
            write_json(&self.layout.heads().join("registers.json"), &registers)?;
            let mut labels: BTreeMap<String, usize> = BTreeMap::new();
            for p in &profiles {
                *labels.entry(serde_json::to_value(p.label)?.as_str().unwrap_or("other").to_string()).or_default() += 1;
            }
            Ok(Output {
                outputs: vec!["heads/profiles.json".into(), "heads/recall.json".into(), "heads/registers.json".into()],
                details: json!({ "heads": profiles.len(), "labels": labels, "best_recall": recall }),
            })
        };
        inner().map_err(|e| (e, Value::Null))
    }

    fn knockout(&self, spec: Option<&KnockoutSpec>) -> std::result::Result<Output, (Error, Value)> {
        let inner = || -> Result<Output> {
            let spec = spec.cloned().or_else(|| self.config.knockout.clone()).unwrap_or_else(empty_spec);
            let ds = self.dataset()?;
            let pairs = self.pairs(&ds.eval)?;
            let adapter = self.adapter()?;
            spec.validate(adapter.descriptor()).map_err(|e| Error::Config(format!("knockout spec: {e}")))?;
            let bank = match self.bank() {
                Ok(b) => Some(b),
                Err(Error::NotFound(_)) => None,
                Err(e) => return Err(e),
            };
            let mut reports = Vec::new();
            for pair in &pairs {
                reports.push(compare_knockout(adapter.as_ref(), bank.as_ref(), pair, &spec)?.0);
            }
            let n = reports.len() as f64;
            let mean_delta = reports.iter().map(|r| r.output_delta).sum::<f64>() / n;
            let mut point_means: BTreeMap<String, f64> = BTreeMap::new();
            for r in &reports {
                for p in &r.points {
                    *point_means.entry(p.point.to_string()).or_default() += p.delta / n;
                }
            }
            let report = json!({ "spec": spec, "pairs": reports, "mean_output_delta": mean_delta, "mean_point_delta": point_means });
            write_json(&self.layout.knockout().join("report.json"), &report)?;
            Ok(Output {
                outputs: vec!["knockout/report.json".into()],
                details: json!({ "empty_spec": spec.is_empty(), "pairs": reports.len(), "mean_output_delta": mean_delta, "mean_point_delta": point_means }),
            })
        };
        inner().map_err(|e| (e, Value::Null))
    }

    fn export(&self) -> std::result::Result<Output, (Error, Value)> {
        let inner = || -> Result<Output> {
            let ds = self.dataset()?;
            let pairs = self.pairs(&ds.eval)?;
            let dirs = self.trace_dirs(&ds.eval)?;
            let bank = self.bank()?;
            let adapter = self.adapter()?;
            let desc = adapter.descriptor().clone();
            let points: Vec<_> = enumerate_probe_points(&desc)
                .into_iter()
                .filter(|p| bank.probes.get(p).is_some_and(|pr| !pr.config.kind.is_depth()))
                .collect();
            if points.is_empty() {
                return Err(missing("pointmap probes", "train"));
            }
            let mut outputs = Vec::new();
            let mut files = BTreeMap::new();
            for (pair, dir) in pairs.iter().zip(&dirs) {
                let mut frames = Vec::with_capacity(points.len());
                for p in &points {
                    let tokens = store::read_trace_tokens(dir, p)?;
                    let out = bank.get(p)?.predict(&tokens, pair.grid(), pair.valid(p.view.index()))?;
                    let pm = out.pointmap().expect("pointmap probe");
                    frames.push(PtmsFrame::from_pointmap(p, pm, desc.patch_size)?);
                }
                let path = self.layout.ptms(&pair.id());
                write_ptms(&path, &frames)?;
                files.insert(pair.id(), store::sha256_hex(&fs::read(&path)?));
                outputs.push(self.rel(&path));
            }
            let mut m = Manifest::new("export");
            m.model_id = Some(desc.model_id.clone());
            m.pair_ids = ds.eval.clone();
            m.probe_points = points.iter().map(|p| p.to_string()).collect();
            m.config = json!({ "ptms_sha256": files, "patch_size": desc.patch_size });
            write_manifest(&self.layout.export(), &m)?;
            outputs.push("export/manifest.json".into());
            self.layout.seal()?;
            outputs.push(store::SEALED.into());
            Ok(Output { outputs, details: json!({ "pairs": pairs.len(), "frames_per_pair": points.len(), "sealed": true }) })
        };
        inner().map_err(|e| (e, Value::Null))
    }
}

/// No-op spec: no heads selected.
pub fn empty_spec() -> KnockoutSpec {
    KnockoutSpec {
        view: View::Second,
        block: 0,
        sublayer: AttnKind::SelfAttention,
        heads: Default::default(),
        key_tokens: KeyTokens::TopKAttended(0),
        mode: MaskMode::ZeroPostSoftmax,
    }
}

/// Read a knockout spec from a JSON file.
pub fn load_spec(path: &Path) -> Result<KnockoutSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid knockout spec: {e}")))
}
