//! An oracle adapter whose activations encode ground truth by construction.
//!
//! Tokens at every probe point are `E·vec(gt patch) + σ·η` for one fixed injective map
//! `E`; attention maps are synthesized from per-head roles.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    decode_patch_outputs, enumerate_locations, patch_vectors, ActivationTrace, ArchDescriptor, AttnKey, AttnKind,
    Capabilities, CaptureOptions, ModelAdapter, ModelOutput, Position, ProbeLocation, ResolvedKnockout, Sublayer, View,
};
use crate::error::{Error, Result};
use crate::geom::Pointmap;
use crate::scene::{PatchCorrespondences, ScenePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadRole {
    /// All weight spread evenly over the fixed register tokens, for every query.
    Register,
    /// `1 − ε` on the ground-truth corresponding patch, `ε` spread uniformly; queries
    /// without a correspondence fall back to the register tokens. Cross-attention only.
    Correspondence,
    /// Gaussian around the query's grid position.
    Local,
    /// Softmax of random logits.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    /// Token width; must be at least `3·patch_size²` so the encoding is injective.
    pub dim: usize,
    pub heads: usize,
    pub decoder_blocks: usize,
    /// One σ per post-skip location of a view (`1 + 3B`).
    pub post_sigma: Vec<f64>,
    /// One σ per pre-skip location (`3B`); defaults to [`PlantedConfig::inflated_pre_sigma`].
    pub pre_sigma: Option<Vec<f64>>,
    pub epsilon: f64,
    pub sa_roles: Vec<HeadRole>,
    pub ca_roles: Vec<HeadRole>,
    pub register_tokens: Vec<usize>,
    /// Smallest and largest singular value of `E`.
    pub singular_values: (f64, f64),
    /// Width of local heads in patches.
    pub local_width: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        let decoder_blocks = 4;
        Self {
            seed: 0,
            image_size: 64,
            patch_size: 8,
            dim: 256,
            heads: 4,
            decoder_blocks,
            post_sigma: Self::geometric_sigma(decoder_blocks, 0.3, 0.6),
            pre_sigma: None,
            epsilon: 0.05,
            sa_roles: vec![HeadRole::Register, HeadRole::Local, HeadRole::Local, HeadRole::Random],
            ca_roles: vec![HeadRole::Register, HeadRole::Random, HeadRole::Correspondence, HeadRole::Local],
            register_tokens: vec![7, 23],
            singular_values: (0.1, 1.0),
            local_width: 1.0,
        }
    }
}

impl PlantedConfig {
    /// `first · ratio^i` for each of the `1 + 3B` post-skip locations.
    pub fn geometric_sigma(blocks: usize, first: f64, ratio: f64) -> Vec<f64> {
        (0..1 + 3 * blocks).map(|i| first * ratio.powi(i as i32)).collect()
    }

    /// Pre-skip σ: the σ of the matching post-skip location, inflated alternately by 6 and 1.5.
    pub fn inflated_pre_sigma(post: &[f64]) -> Vec<f64> {
        post.iter().skip(1).enumerate().map(|(i, s)| s * if i % 2 == 0 { 6.0 } else { 1.5 }).collect()
    }

    pub fn pre_sigma(&self) -> Vec<f64> {
        self.pre_sigma.clone().unwrap_or_else(|| Self::inflated_pre_sigma(&self.post_sigma))
    }

    pub fn grid(&self) -> (usize, usize) {
        let n = self.image_size / self.patch_size;
        (n, n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config("patch size must divide the image size".into()));
        }
        let m = 3 * self.patch_size * self.patch_size;
        if self.dim < m {
            return Err(Error::Config(format!("dim {} is below the patch size 3p² = {m}; E cannot be injective", self.dim)));
        }
        let posts = 1 + 3 * self.decoder_blocks;
        if self.post_sigma.len() != posts {
            return Err(Error::Config(format!("expected {posts} post-skip sigmas, got {}", self.post_sigma.len())));
        }
        let pre = self.pre_sigma();
        if pre.len() != 3 * self.decoder_blocks {
            return Err(Error::Config(format!("expected {} pre-skip sigmas, got {}", 3 * self.decoder_blocks, pre.len())));
        }
        if let Some(s) = self.post_sigma.iter().chain(&pre).find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Config(format!("sigma must be finite and >= 0, got {s}")));
        }
        if self.sa_roles.len() != self.heads || self.ca_roles.len() != self.heads {
            return Err(Error::Config(format!("expected {} roles per attention kind", self.heads)));
        }
        if self.sa_roles.contains(&HeadRole::Correspondence) {
            return Err(Error::Config("correspondence heads exist only in cross-attention".into()));
        }
        let n = self.grid().0 * self.grid().1;
        if self.register_tokens.is_empty() || self.register_tokens.iter().any(|&t| t >= n) {
            return Err(Error::Config(format!("register tokens must be non-empty and below {n}")));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("epsilon must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.singular_values;
        if !(lo > 0.0 && hi >= lo && hi / lo <= 100.0) {
            return Err(Error::Config("singular values must be positive with condition number <= 100".into()));
        }
        if !(self.local_width > 0.0) {
            return Err(Error::Config("local_width must be positive".into()));
        }
        Ok(())
    }
}

/// FNV-1a over a label, mixed with two integers.
fn stream_seed(a: u64, b: u64, label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h = (h ^ b).wrapping_mul(0x0100_0000_01b3);
    for byte in label.bytes() {
        h = (h ^ byte as u64).wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub config: PlantedConfig,
    /// `m × D`, so tokens are `X · encode` for patch rows `X`.
    encode: Array2<f64>,
    /// `D × m` least-squares left inverse.
    decode: Array2<f64>,
    descriptor: ArchDescriptor,
}

impl PlantedModel {
    pub fn new(config: PlantedConfig) -> Result<Self> {
        config.validate()?;
        let m = 3 * config.patch_size * config.patch_size;
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 0, "planted-encoder"));
        let u = orthonormal_columns(&mut rng, d, m);
        let v = orthonormal_columns(&mut rng, m, m);
        let (lo, hi) = config.singular_values;
        let s: Vec<f64> = (0..m)
            .map(|i| if m == 1 { hi } else { hi * (lo / hi).powf(i as f64 / (m - 1) as f64) })
            .collect();
        // E = U·diag(s)·Vᵀ (D × m); E⁺ = V·diag(1/s)·Uᵀ.
        let e = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s.clone())) * v.transpose();
        let inv_s = nalgebra::DVector::from_iterator(m, s.iter().map(|x| 1.0 / x));
        let e_pinv = &v * DMatrix::from_diagonal(&inv_s) * u.transpose();
        let encode = Array2::from_shape_fn((m, d), |(i, j)| e[(j, i)]);
        let decode = Array2::from_shape_fn((d, m), |(i, j)| e_pinv[(j, i)]);
        let descriptor = ArchDescriptor {
            model_id: format!("planted-s{}-d{}-b{}", config.seed, d, config.decoder_blocks),
            kind: "planted".into(),
            image_height: config.image_size,
            image_width: config.image_size,
            patch_size: config.patch_size,
            dim: d,
            heads: config.heads,
            decoder_blocks: config.decoder_blocks,
            sublayer_order: vec![Sublayer::SelfAttention, Sublayer::CrossAttention, Sublayer::Mlp],
            params: serde_json::to_value(&config).map_err(Error::Json)?,
        };
        Ok(Self { config, encode, decode, descriptor })
    }

    /// Noiseless tokens of one view: `X · Eᵀ`.
    pub fn clean_tokens(&self, pm: &Pointmap) -> Array2<f64> {
        patch_vectors(pm, self.config.patch_size).dot(&self.encode)
    }

    /// Least-squares decode of tokens back to patch vectors (`N × 3p²`).
    pub fn decode_tokens(&self, tokens: &Array2<f64>) -> Array2<f64> {
        tokens.dot(&self.decode)
    }

    fn sigma(&self, loc: &ProbeLocation) -> f64 {
        let locs = enumerate_locations(&self.descriptor);
        let pos = loc.position();
        let idx = locs.iter().filter(|l| l.position() == pos).position(|l| l == loc).expect("location enumerated");
        match pos {
            Position::PostSkip => self.config.post_sigma[idx],
            Position::PreSkip => self.config.pre_sigma()[idx],
        }
    }

    fn noisy(&self, clean: &Array2<f64>, sigma: f64, seed: u64, label: &str) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, seed, label));
        clean.mapv(|x| {
            let eta: f64 = rng.sample(StandardNormal);
            (x + sigma * eta) as f32
        })
    }

    fn attention_map(
        &self,
        key: &AttnKey,
        pair: &ScenePair,
        corr: &[PatchCorrespondences; 2],
    ) -> Array2<f32> {
        let (rows, cols) = self.config.grid();
        let n = rows * cols;
        let role = match key.kind {
            AttnKind::SelfAttention => self.config.sa_roles[key.head],
            AttnKind::CrossAttention => self.config.ca_roles[key.head],
        };
        let regs = &self.config.register_tokens;
        let register_row = |row: &mut ndarray::ArrayViewMut1<f32>, mass: f64| {
            for &t in regs {
                row[t] += (mass / regs.len() as f64) as f32;
            }
        };
        let mut a = Array2::<f32>::zeros((n, n));
        match role {
            HeadRole::Register => {
                for mut row in a.rows_mut() {
                    register_row(&mut row, 1.0);
                }
            }
            HeadRole::Correspondence => {
                let eps = self.config.epsilon;
                let map = &corr[key.view.index()];
                for (q, mut row) in a.rows_mut().into_iter().enumerate() {
                    row.fill((eps / n as f64) as f32);
                    match map.get(q) {
                        Some(m) => row[m] += (1.0 - eps) as f32,
                        None => register_row(&mut row, 1.0 - eps),
                    }
                }
            }
            HeadRole::Local => {
                let w2 = 2.0 * self.config.local_width * self.config.local_width;
                for (q, mut row) in a.rows_mut().into_iter().enumerate() {
                    let (qr, qc) = ((q / cols) as f64, (q % cols) as f64);
                    let mut total = 0.0;
                    let weights: Vec<f64> = (0..n)
                        .map(|k| {
                            let (kr, kc) = ((k / cols) as f64, (k % cols) as f64);
                            let w = (-((kr - qr).powi(2) + (kc - qc).powi(2)) / w2).exp();
                            total += w;
                            w
                        })
                        .collect();
                    for (r, w) in row.iter_mut().zip(weights) {
                        *r = (w / total) as f32;
                    }
                }
            }
            HeadRole::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, pair.seed, &key.to_string()));
                let logits = Array2::from_shape_fn((n, n), |_| 2.0 * rng.sample::<f32, _>(StandardNormal));
                a = crate::autodiff::softmax_rows(&logits);
            }
        }
        a
    }
}

impl ModelAdapter for PlantedModel {
    fn descriptor(&self) -> &ArchDescriptor {
        &self.descriptor
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { capture: true, intervene: true }
    }

    /// Knockouts edit the synthesized attention maps only; planted tokens do not depend on attention.
    fn forward(
        &self,
        pair: &ScenePair,
        capture: &CaptureOptions,
        knockout: Option<&ResolvedKnockout>,
    ) -> Result<(ActivationTrace, ModelOutput)> {
        let grid = self.config.grid();
        let mut trace = ActivationTrace {
            pair_id: pair.id(),
            model_id: self.descriptor.model_id.clone(),
            patch_grid: grid,
            ..Default::default()
        };
        let locs = enumerate_locations(&self.descriptor);
        let last_post = *locs.iter().rev().find(|l| l.position() == Position::PostSkip).expect("encoder output");
        let mut outputs = Vec::with_capacity(2);
        for view in View::BOTH {
            let clean = self.clean_tokens(&pair.gt_pointmaps[view.index()]);
            if capture.tokens {
                for loc in &locs {
                    let p = loc.at(view);
                    trace.tokens.insert(p, self.noisy(&clean, self.sigma(loc), pair.seed, &p.to_string()));
                }
            }
            let p = last_post.at(view);
            let final_tokens = self.noisy(&clean, self.sigma(&last_post), pair.seed, &p.to_string());
            let patches = self.decode_tokens(&final_tokens.mapv(f64::from)).mapv(|x| x as f32);
            let pp = self.config.patch_size * self.config.patch_size;
            // Raw confidence 0 decodes to C = 2 everywhere.
            let mut out = Array2::zeros((patches.nrows(), 4 * pp));
            out.slice_mut(ndarray::s![.., ..3 * pp]).assign(&patches);
            let (points, conf) = decode_patch_outputs(&out, grid, self.config.patch_size);
            outputs.push(Pointmap::new(points, Some(conf), pair.valid(view.index()).clone())?);
        }
        if capture.attention {
            let corr = [pair.reverse_patch_correspondences()?, pair.patch_correspondences()?];
            for view in View::BOTH {
                for block in 0..self.config.decoder_blocks {
                    for kind in [AttnKind::SelfAttention, AttnKind::CrossAttention] {
                        for head in 0..self.config.heads {
                            let key = AttnKey { view, block, kind, head };
                            let mut a = self.attention_map(&key, pair, &corr);
                            if let Some(ko) = knockout.filter(|k| k.targets(view, block, kind) && k.heads.contains(&head)) {
                                ko.apply_to_weights(&mut a);
                            }
                            trace.attention.insert(key, a);
                        }
                    }
                }
            }
        }
        let pm2 = outputs.pop().expect("two views");
        let pm1 = outputs.pop().expect("two views");
        Ok((trace, ModelOutput { pointmaps: [pm1, pm2] }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(PlantedConfig::default().validate().is_ok());
        let bad = [
            PlantedConfig { post_sigma: vec![0.1; 3], ..Default::default() },
            PlantedConfig { dim: 10, ..Default::default() },
            PlantedConfig { singular_values: (0.001, 1.0), ..Default::default() },
            PlantedConfig { sa_roles: vec![HeadRole::Correspondence; 4], ..Default::default() },
            PlantedConfig { register_tokens: vec![64], ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
        let mut neg = PlantedConfig::default();
        neg.post_sigma[3] = -1.0;
        assert!(neg.validate().is_err());
    }

    #[test]
    fn encoder_has_left_inverse() {
        let cfg = PlantedConfig { patch_size: 2, image_size: 8, dim: 16, register_tokens: vec![1], ..Default::default() };
        let m = PlantedModel::new(cfg).unwrap();
        let id = m.encode.dot(&m.decode);
        for ((i, j), v) in id.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-10);
        }
    }

    #[test]
    fn inflated_schedule_alternates() {
        let post = PlantedConfig::geometric_sigma(4, 0.3, 0.7);
        let pre = PlantedConfig::inflated_pre_sigma(&post);
        assert_eq!(pre.len(), 12);
        let ups = pre.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(ups > 0 && ups < 11);
    }
}
