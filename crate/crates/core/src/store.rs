//! On-disk persistence: JSON manifests plus raw little-endian `f32` blobs, probe banks,
//! scene pairs, metric reports, CSV curves and the PTMS pointmap-sequence format.
//!
//! A directory holds one `manifest.json` whose blob index names every tensor file with
//! its shape and SHA-256. Blobs carry no metadata of their own.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Pointmap, Pose};
use crate::harness::{
    ActivationTrace, ArchDescriptor, AttnKey, ModelAdapter, PlantedConfig, PlantedModel, ProbePoint, ToyConfig, ToyModel,
};
use crate::nn::Params;
use crate::probe::{Probe, ProbeBank, ProbeConfig, ProbeStats, TokenSource};
use crate::scene::{PixelPair, SceneConfig, ScenePair};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const SEALED: &str = "SEALED";

/// Element types accepted by the blob writer. Only `f32` is storable.
pub trait Element: Copy + 'static {
    const DTYPE: &'static str;
    fn to_f32(self) -> Option<f32>;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    fn to_f32(self) -> Option<f32> {
        Some(self)
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    fn to_f32(self) -> Option<f32> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub pair_ids: Vec<String>,
    #[serde(default)]
    pub probe_points: Vec<String>,
    #[serde(default)]
    pub blobs: BTreeMap<String, BlobEntry>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config: serde_json::Value,
    /// Fields written by newer versions; preserved on rewrite.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(kind: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            model_id: None,
            pair_ids: Vec::new(),
            probe_points: Vec::new(),
            blobs: BTreeMap::new(),
            seed: None,
            config: serde_json::Value::Null,
            extra: serde_json::Map::new(),
        }
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptStore { path: path.to_path_buf(), reason: reason.into() }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Blob file name for an index key (path-safe).
fn blob_file(name: &str) -> String {
    let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{safe}.bin")
}

/// Writes blobs into a directory and collects their index entries.
pub struct BlobWriter {
    dir: PathBuf,
    pub entries: BTreeMap<String, BlobEntry>,
}

impl BlobWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), entries: BTreeMap::new() })
    }

    pub fn write<T: Element>(&mut self, name: &str, shape: &[usize], data: &[T]) -> Result<()> {
        if T::DTYPE != "f32" {
            return Err(Error::Dtype(format!("blob '{name}' is {}; only f32 is stored", T::DTYPE)));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidInput(format!("blob '{name}' has {} values for shape {shape:?}", data.len())));
        }
        let mut bytes = Vec::with_capacity(4 * data.len());
        for &x in data {
            bytes.extend_from_slice(&x.to_f32().expect("f32 checked").to_le_bytes());
        }
        let file = blob_file(name);
        fs::write(self.dir.join(&file), &bytes)?;
        self.entries.insert(
            name.to_string(),
            BlobEntry { file, shape: shape.to_vec(), dtype: "f32".into(), sha256: sha256_hex(&bytes) },
        );
        Ok(())
    }

    pub fn write_array<T: Element, D: ndarray::Dimension>(&mut self, name: &str, a: &ndarray::Array<T, D>) -> Result<()> {
        let data: Vec<T> = a.iter().copied().collect();
        self.write(name, a.shape(), &data)
    }
}

/// Read and verify one blob listed in a manifest.
pub fn read_blob(dir: &Path, entry: &BlobEntry) -> Result<ArrayD<f32>> {
    if entry.dtype != "f32" {
        return Err(Error::Dtype(format!("unsupported stored dtype '{}'", entry.dtype)));
    }
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| corrupt(&path, format!("cannot read blob: {e}")))?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(corrupt(&path, "checksum mismatch"));
    }
    let n: usize = entry.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(corrupt(&path, format!("payload is {} bytes, expected {}", bytes.len(), 4 * n)));
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    ArrayD::from_shape_vec(IxDyn(&entry.shape), data).map_err(|e| corrupt(&path, e.to_string()))
}

fn blob<'a>(m: &'a Manifest, dir: &Path, name: &str) -> Result<&'a BlobEntry> {
    m.blobs.get(name).ok_or_else(|| corrupt(&dir.join(MANIFEST), format!("blob '{name}' not indexed")))
}

fn read2(dir: &Path, m: &Manifest, name: &str) -> Result<Array2<f32>> {
    let a = read_blob(dir, blob(m, dir, name)?)?;
    a.into_dimensionality().map_err(|e| corrupt(&dir.join(name), e.to_string()))
}

fn read3(dir: &Path, m: &Manifest, name: &str) -> Result<Array3<f32>> {
    let a = read_blob(dir, blob(m, dir, name)?)?;
    a.into_dimensionality().map_err(|e| corrupt(&dir.join(name), e.to_string()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("{} does not exist", path.display())),
        _ => Error::Io(e),
    })?;
    serde_json::from_str(&text).map_err(|e| corrupt(path, e.to_string()))
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    write_json(&dir.join(MANIFEST), m)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let m: Manifest = read_json(&path)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion(m.schema_version));
    }
    Ok(m)
}

fn expect_kind(dir: &Path, m: &Manifest, kind: &str) -> Result<()> {
    if m.kind != kind {
        return Err(corrupt(&dir.join(MANIFEST), format!("expected a {kind} manifest, found {}", m.kind)));
    }
    Ok(())
}

fn tok_name(p: &ProbePoint) -> String {
    format!("tok.{p}")
}

fn attn_name(prefix: &str, k: &AttnKey) -> String {
    format!("{prefix}.{k}")
}

#[derive(Serialize, Deserialize)]
struct TraceConfig {
    pair_id: String,
    patch_grid: (usize, usize),
    attention: Vec<String>,
    values: Vec<String>,
    head_outputs: Vec<String>,
}

/// Persist a trace into `dir` (created if missing).
pub fn write_trace(dir: &Path, trace: &ActivationTrace) -> Result<()> {
    let mut w = BlobWriter::new(dir)?;
    for (p, t) in &trace.tokens {
        w.write_array(&tok_name(p), t)?;
    }
    let groups = [("attn", &trace.attention), ("val", &trace.values), ("out", &trace.head_outputs)];
    for (prefix, map) in groups {
        for (k, a) in map {
            w.write_array(&attn_name(prefix, k), a)?;
        }
    }
    let keys = |m: &BTreeMap<AttnKey, Array2<f32>>| m.keys().map(|k| k.to_string()).collect::<Vec<_>>();
    let mut m = Manifest::new("trace");
    m.model_id = Some(trace.model_id.clone());
    m.pair_ids = vec![trace.pair_id.clone()];
    m.probe_points = trace.tokens.keys().map(|p| p.to_string()).collect();
    m.blobs = w.entries;
    m.config = serde_json::to_value(TraceConfig {
        pair_id: trace.pair_id.clone(),
        patch_grid: trace.patch_grid,
        attention: keys(&trace.attention),
        values: keys(&trace.values),
        head_outputs: keys(&trace.head_outputs),
    })?;
    m.extra = trace.extra.clone();
    write_manifest(dir, &m)
}

pub fn read_trace(dir: &Path) -> Result<ActivationTrace> {
    let m = read_manifest(dir)?;
    expect_kind(dir, &m, "trace")?;
    let cfg: TraceConfig = serde_json::from_value(m.config.clone()).map_err(|e| corrupt(&dir.join(MANIFEST), e.to_string()))?;
    let mut trace = ActivationTrace {
        pair_id: cfg.pair_id,
        model_id: m.model_id.clone().unwrap_or_default(),
        patch_grid: cfg.patch_grid,
        extra: m.extra.clone(),
        ..Default::default()
    };
    for s in &m.probe_points {
        let p: ProbePoint = s.parse()?;
        trace.tokens.insert(p, read2(dir, &m, &tok_name(&p))?);
    }
    let groups = [("attn", &cfg.attention), ("val", &cfg.values), ("out", &cfg.head_outputs)];
    for (prefix, names) in groups {
        for s in names {
            let k: AttnKey = s.parse()?;
            let a = read2(dir, &m, &attn_name(prefix, &k))?;
            match prefix {
                "attn" => trace.attention.insert(k, a),
                "val" => trace.values.insert(k, a),
                _ => trace.head_outputs.insert(k, a),
            };
        }
    }
    Ok(trace)
}

/// Tokens of one probe point from a stored trace, without loading the rest.
pub fn read_trace_tokens(dir: &Path, point: &ProbePoint) -> Result<Array2<f32>> {
    let m = read_manifest(dir)?;
    expect_kind(dir, &m, "trace")?;
    m.blobs
        .get(&tok_name(point))
        .ok_or_else(|| Error::NotFound(format!("no tokens for {point} in {}", dir.display())))?;
    read2(dir, &m, &tok_name(point))
}

/// Token source backed by stored traces, one directory per pair in pair order.
pub struct StoreSource {
    pub dirs: Vec<PathBuf>,
}

impl TokenSource for StoreSource {
    fn tokens(&self, pair: usize, point: &ProbePoint) -> Result<Array2<f32>> {
        let dir = self.dirs.get(pair).ok_or_else(|| Error::NotFound(format!("no trace for pair index {pair}")))?;
        read_trace_tokens(dir, point)
    }
}

#[derive(Serialize, Deserialize)]
struct SceneManifestConfig {
    scene: SceneConfig,
    intrinsics: [Intrinsics; 2],
    relative_pose: Pose,
    correspondences: usize,
}

fn mask_to_f32(m: &Array2<bool>) -> Array2<f32> {
    m.mapv(|b| if b { 1.0 } else { 0.0 })
}

/// Persist a scene pair. Depths and points must already be `f32`-representable for a
/// bit-identical round trip; the generator guarantees that.
pub fn write_scene_pair(dir: &Path, pair: &ScenePair) -> Result<()> {
    let mut w = BlobWriter::new(dir)?;
    for v in 0..2 {
        let n = v + 1;
        w.write_array(&format!("image{n}"), &pair.images[v])?;
        w.write_array(&format!("depth{n}"), &pair.depths[v].mapv(|x| x as f32))?;
        w.write_array(&format!("points{n}"), &pair.gt_pointmaps[v].points.mapv(|x| x as f32))?;
        w.write_array(&format!("valid{n}"), &mask_to_f32(&pair.gt_pointmaps[v].valid))?;
    }
    let flat: Vec<f32> = pair
        .pixel_correspondences
        .iter()
        .flat_map(|&((u2, v2), (u1, v1))| [u2 as f32, v2 as f32, u1 as f32, v1 as f32])
        .collect();
    w.write("correspondences", &[pair.pixel_correspondences.len(), 4], &flat)?;
    let mut m = Manifest::new("scene_pair");
    m.pair_ids = vec![pair.id()];
    m.seed = Some(pair.seed);
    m.blobs = w.entries;
    m.config = serde_json::to_value(SceneManifestConfig {
        scene: pair.config.clone(),
        intrinsics: pair.intrinsics,
        relative_pose: pair.relative_pose,
        correspondences: pair.pixel_correspondences.len(),
    })?;
    write_manifest(dir, &m)
}

pub fn read_scene_pair(dir: &Path) -> Result<ScenePair> {
    let m = read_manifest(dir)?;
    expect_kind(dir, &m, "scene_pair")?;
    let cfg: SceneManifestConfig = serde_json::from_value(m.config.clone()).map_err(|e| corrupt(&dir.join(MANIFEST), e.to_string()))?;
    let seed = m.seed.ok_or_else(|| corrupt(&dir.join(MANIFEST), "missing seed"))?;
    let mut images = Vec::new();
    let mut depths = Vec::new();
    let mut pms = Vec::new();
    for n in 1..=2 {
        images.push(read3(dir, &m, &format!("image{n}"))?);
        depths.push(read2(dir, &m, &format!("depth{n}"))?.mapv(f64::from));
        let valid = read2(dir, &m, &format!("valid{n}"))?.mapv(|x| x != 0.0);
        let points = read3(dir, &m, &format!("points{n}"))?.mapv(f64::from);
        pms.push(Pointmap::new(points, None, valid)?);
    }
    let c = read2(dir, &m, "correspondences")?;
    let pixel_correspondences: Vec<PixelPair> = c
        .rows()
        .into_iter()
        .map(|r| ((r[0] as usize, r[1] as usize), (r[2] as usize, r[3] as usize)))
        .collect();
    let pm2 = pms.pop().expect("two views");
    let pm1 = pms.pop().expect("two views");
    let d2 = depths.pop().expect("two views");
    let d1 = depths.pop().expect("two views");
    let i2 = images.pop().expect("two views");
    let i1 = images.pop().expect("two views");
    Ok(ScenePair {
        images: [i1, i2],
        depths: [d1, d2],
        intrinsics: cfg.intrinsics,
        relative_pose: cfg.relative_pose,
        gt_pointmaps: [pm1, pm2],
        pixel_correspondences,
        seed,
        config: cfg.scene,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankEntry {
    point: ProbePoint,
    config: ProbeConfig,
    input_dim: usize,
    patch_size: usize,
    stats: ProbeStats,
    param_names: Vec<String>,
    param_shapes: Vec<(usize, usize)>,
    blob: BlobEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankFile {
    schema_version: u32,
    model_id: String,
    probes: Vec<BankEntry>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

/// `bank.json` plus one flat parameter blob per probe point, named by its canonical string.
pub fn write_bank(dir: &Path, bank: &ProbeBank) -> Result<()> {
    let mut w = BlobWriter::new(dir)?;
    let mut probes = Vec::new();
    for (p, probe) in &bank.probes {
        let flat: Vec<f32> = probe.params.values.iter().flat_map(|v| v.iter().copied()).collect();
        let name = p.to_string();
        w.write(&name, &[flat.len()], &flat)?;
        probes.push(BankEntry {
            point: *p,
            config: probe.config,
            input_dim: probe.input_dim,
            patch_size: probe.patch_size,
            stats: probe.stats.clone(),
            param_names: probe.params.names.clone(),
            param_shapes: probe.params.values.iter().map(|v| v.dim()).collect(),
            blob: w.entries[&name].clone(),
        });
    }
    write_json(
        &dir.join("bank.json"),
        &BankFile { schema_version: SCHEMA_VERSION, model_id: bank.model_id.clone(), probes, extra: Default::default() },
    )
}

pub fn read_bank(dir: &Path) -> Result<ProbeBank> {
    let path = dir.join("bank.json");
    let file: BankFile = read_json(&path)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion(file.schema_version));
    }
    let mut bank = ProbeBank { model_id: file.model_id, ..Default::default() };
    for e in file.probes {
        let flat = read_blob(dir, &e.blob)?;
        let flat = flat.as_slice().ok_or_else(|| corrupt(&path, "non-contiguous blob"))?;
        let mut params = Params::default();
        let mut offset = 0;
        for (name, &(r, c)) in e.param_names.iter().zip(&e.param_shapes) {
            let end = offset + r * c;
            let slice = flat.get(offset..end).ok_or_else(|| corrupt(&path, format!("blob for {} too short", e.point)))?;
            params.push(name.clone(), Array2::from_shape_vec((r, c), slice.to_vec()).expect("shape matches length"));
            offset = end;
        }
        if offset != flat.len() {
            return Err(corrupt(&path, format!("blob for {} has trailing values", e.point)));
        }
        let probe = Probe { point: e.point, config: e.config, input_dim: e.input_dim, patch_size: e.patch_size, params, stats: e.stats };
        probe.check_shapes()?;
        bank.insert(probe)?;
    }
    Ok(bank)
}

/// Persist a model: `model.json` always, weights when the model has trained parameters.
pub fn write_toy_model(dir: &Path, model: &ToyModel) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("model.json"), model.descriptor())?;
    let mut w = BlobWriter::new(&dir.join("weights"))?;
    for (name, v) in model.params.names.iter().zip(&model.params.values) {
        w.write_array(name, v)?;
    }
    let mut m = Manifest::new("weights");
    m.model_id = Some(model.descriptor().model_id.clone());
    m.probe_points = model.params.names.clone();
    m.blobs = w.entries;
    write_manifest(&dir.join("weights"), &m)
}

pub fn write_planted_model(dir: &Path, model: &PlantedModel) -> Result<()> {
    write_json(&dir.join("model.json"), model.descriptor())
}

/// Rebuild an adapter from a model directory.
pub fn read_model(dir: &Path) -> Result<Box<dyn ModelAdapter>> {
    let desc: ArchDescriptor = read_json(&dir.join("model.json"))?;
    let bad = |e: serde_json::Error| corrupt(&dir.join("model.json"), e.to_string());
    match desc.kind.as_str() {
        "planted" => {
            let cfg: PlantedConfig = serde_json::from_value(desc.params.clone()).map_err(bad)?;
            Ok(Box::new(PlantedModel::new(cfg)?))
        }
        "toy" => {
            #[derive(Deserialize)]
            struct ToyParams {
                config: ToyConfig,
                seed: u64,
            }
            let tp: ToyParams = serde_json::from_value(desc.params.clone()).map_err(bad)?;
            let wdir = dir.join("weights");
            let m = read_manifest(&wdir)?;
            let mut params = Params::default();
            for name in &m.probe_points {
                params.push(name.clone(), read2(&wdir, &m, name)?);
            }
            Ok(Box::new(ToyModel::from_params(tp.config, tp.seed, params)?))
        }
        other => Err(Error::Unsupported(format!("no adapter available for model kind '{other}'"))),
    }
}

/// One row of an error curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub probe_point: String,
    pub error: f64,
    pub contribution_pct: Option<f64>,
}

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| corrupt(path, e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| corrupt(path, e.to_string()))).collect()
}

pub const PTMS_MAGIC: &[u8; 4] = b"PTMS";
pub const PTMS_VERSION: u32 = 1;

/// One probed pointmap in a PTMS sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtmsFrame {
    /// Canonical probe-point string.
    pub point: String,
    pub height: usize,
    pub width: usize,
    /// `H·W·3`, row-major.
    pub points: Vec<f32>,
    /// `H·W`.
    pub confidence: Vec<f32>,
    /// View id (1 or 2) of each patch row.
    pub view_ids: Vec<u8>,
}

impl PtmsFrame {
    /// Frame for one probe point's probed pointmap (confidence 1 where absent).
    pub fn from_pointmap(point: &ProbePoint, pm: &Pointmap, patch_size: usize) -> Result<Self> {
        let (h, w) = (pm.height(), pm.width());
        if patch_size == 0 || h % patch_size != 0 {
            return Err(Error::InvalidInput("patch size must divide the pointmap height".into()));
        }
        let points: Vec<f32> = pm.points.iter().map(|&x| x as f32).collect();
        let confidence: Vec<f32> = match &pm.confidence {
            Some(c) => c.iter().map(|&x| x as f32).collect(),
            None => vec![1.0; h * w],
        };
        Ok(Self { point: point.to_string(), height: h, width: w, points, confidence, view_ids: vec![point.view.number(); h / patch_size] })
    }
}

/// Serialize frames; every frame must share one resolution.
pub fn encode_ptms(frames: &[PtmsFrame]) -> Result<Vec<u8>> {
    if let Some(f0) = frames.first() {
        if frames.iter().any(|f| (f.height, f.width) != (f0.height, f0.width)) {
            return Err(Error::InvalidInput("frames have mixed resolutions".into()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(PTMS_MAGIC);
    out.extend_from_slice(&PTMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in frames {
        let n = f.height * f.width;
        if f.points.len() != 3 * n || f.confidence.len() != n {
            return Err(Error::InvalidInput(format!("frame {} has inconsistent sizes", f.point)));
        }
        let name = f.point.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidInput("frame name too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(f.height as u32).to_le_bytes());
        out.extend_from_slice(&(f.width as u32).to_le_bytes());
        for x in f.points.iter().chain(&f.confidence) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(f.view_ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&f.view_ids);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::InvalidInput("truncated PTMS data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

pub fn decode_ptms(bytes: &[u8]) -> Result<Vec<PtmsFrame>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != PTMS_MAGIC {
        return Err(Error::InvalidInput("not a PTMS file".into()));
    }
    let version = c.u32()?;
    if version != PTMS_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = c.u32()? as usize;
    let mut frames = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let point = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::InvalidInput("frame name is not UTF-8".into()))?;
        let height = c.u32()? as usize;
        let width = c.u32()? as usize;
        let points = c.f32s(3 * height * width)?;
        let confidence = c.f32s(height * width)?;
        let blocks = c.u32()? as usize;
        let view_ids = c.take(blocks)?.to_vec();
        frames.push(PtmsFrame { point, height, width, points, confidence, view_ids });
    }
    if c.pos != bytes.len() {
        return Err(Error::InvalidInput("trailing bytes after PTMS frames".into()));
    }
    Ok(frames)
}

pub fn write_ptms(path: &Path, frames: &[PtmsFrame]) -> Result<()> {
    let bytes = encode_ptms(frames)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_ptms(path: &Path) -> Result<Vec<PtmsFrame>> {
    decode_ptms(&fs::read(path)?)
}

/// Standard layout of one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn pair_dir(&self, pair_id: &str) -> PathBuf {
        self.dataset().join(pair_id)
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn trace_dir(&self, pair_id: &str) -> PathBuf {
        self.traces().join(pair_id)
    }

    pub fn probes(&self) -> PathBuf {
        self.root.join("probes")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn heads(&self) -> PathBuf {
        self.root.join("heads")
    }

    pub fn knockout(&self) -> PathBuf {
        self.root.join("knockout")
    }

    pub fn export(&self) -> PathBuf {
        self.root.join("export")
    }

    pub fn ptms(&self, pair_id: &str) -> PathBuf {
        self.export().join(format!("{pair_id}.ptms"))
    }

    pub fn summaries(&self) -> PathBuf {
        self.root.join("summaries")
    }

    pub fn is_sealed(&self) -> bool {
        self.root.join(SEALED).exists()
    }

    pub fn seal(&self) -> Result<()> {
        fs::write(self.root.join(SEALED), b"")?;
        Ok(())
    }

    /// Pair ids present in the dataset, sorted.
    pub fn pair_ids(&self) -> Result<Vec<String>> {
        let dir = self.dataset();
        let mut ids = Vec::new();
        for e in fs::read_dir(&dir).map_err(|_| Error::NotFound(format!("{} does not exist", dir.display())))? {
            let e = e?;
            if e.path().join(MANIFEST).exists() {
                ids.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }
}
