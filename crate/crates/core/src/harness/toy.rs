//! A small trainable two-view transformer: shared patch encoder, two decoders that
//! exchange information through cross-attention, and a pointmap+confidence head per view.

use ndarray::Array2;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    decode_patch_outputs, patchify_image, ActivationTrace, ArchDescriptor, AttnKey, AttnKind, Capabilities,
    CaptureOptions, MaskMode, ModelAdapter, ModelOutput, ProbeLocation, ProbePoint, ResolvedKnockout, Sublayer, View,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geom::Pointmap;
use crate::nn::{all_finite, init_linear, AdamW, OptimizerConfig, Params};
use crate::probe::{head_loss, Reduction};
use crate::scene::ScenePair;

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub mlp_ratio: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { image_size: 64, patch_size: 8, dim: 64, heads: 4, encoder_blocks: 1, decoder_blocks: 4, mlp_ratio: 2 }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!("patch size {} must divide image size {}", self.patch_size, self.image_size)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    fn grid(&self) -> (usize, usize) {
        let n = self.image_size / self.patch_size;
        (n, n)
    }
}

#[derive(Debug, Clone, Copy)]
struct Ln {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncBlock {
    ln1: Ln,
    sa: Attn,
    ln2: Ln,
    mlp: Mlp,
}

#[derive(Debug, Clone, Copy)]
struct DecBlock {
    ln_sa: Ln,
    sa: Attn,
    ln_ca: Ln,
    ln_ctx: Ln,
    ca: Attn,
    ln_mlp: Ln,
    mlp: Mlp,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    ln: Ln,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    pos: usize,
    enc: Vec<EncBlock>,
    dec: [Vec<DecBlock>; 2],
    head: [Head; 2],
}

struct Builder<'a> {
    params: &'a mut Params,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let w = init_linear(self.rng, fan_in, fan_out);
        self.params.push(name, w)
    }

    fn zeros(&mut self, name: String, cols: usize) -> usize {
        self.params.push(name, Array2::zeros((1, cols)))
    }

    fn ln(&mut self, name: &str, d: usize) -> Ln {
        let g = self.params.push(format!("{name}.g"), Array2::ones((1, d)));
        let b = self.zeros(format!("{name}.b"), d);
        Ln { g, b }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            wq: self.linear(format!("{name}.wq"), d, d),
            wk: self.linear(format!("{name}.wk"), d, d),
            wv: self.linear(format!("{name}.wv"), d, d),
            wo: self.linear(format!("{name}.wo"), d, d),
            bo: self.zeros(format!("{name}.bo"), d),
        }
    }

    fn mlp(&mut self, name: &str, d: usize, hidden: usize) -> Mlp {
        Mlp {
            w1: self.linear(format!("{name}.w1"), d, hidden),
            b1: self.zeros(format!("{name}.b1"), hidden),
            w2: self.linear(format!("{name}.w2"), hidden, d),
            b2: self.zeros(format!("{name}.b2"), d),
        }
    }
}

fn build_layout(cfg: &ToyConfig, seed: u64) -> (Params, Layout) {
    let mut params = Params::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder { params: &mut params, rng: &mut rng };
    let d = cfg.dim;
    let p = cfg.patch_size;
    let n = cfg.grid().0 * cfg.grid().1;
    let hidden = d * cfg.mlp_ratio;
    let embed_w = b.linear("embed.w".into(), p * p * 3, d);
    let embed_b = b.zeros("embed.b".into(), d);
    let pos = b.params.push("pos", init_linear(b.rng, n, d));
    let enc = (0..cfg.encoder_blocks)
        .map(|i| EncBlock {
            ln1: b.ln(&format!("enc{i}.ln1"), d),
            sa: b.attn(&format!("enc{i}.sa"), d),
            ln2: b.ln(&format!("enc{i}.ln2"), d),
            mlp: b.mlp(&format!("enc{i}.mlp"), d, hidden),
        })
        .collect();
    let mut dec_for = |v: usize| -> Vec<DecBlock> {
        (0..cfg.decoder_blocks)
            .map(|i| {
                let name = format!("dec{v}.{i}");
                DecBlock {
                    ln_sa: b.ln(&format!("{name}.ln_sa"), d),
                    sa: b.attn(&format!("{name}.sa"), d),
                    ln_ca: b.ln(&format!("{name}.ln_ca"), d),
                    ln_ctx: b.ln(&format!("{name}.ln_ctx"), d),
                    ca: b.attn(&format!("{name}.ca"), d),
                    ln_mlp: b.ln(&format!("{name}.ln_mlp"), d),
                    mlp: b.mlp(&format!("{name}.mlp"), d, hidden),
                }
            })
            .collect()
    };
    let dec = [dec_for(1), dec_for(2)];
    let mut head_for = |v: usize| Head {
        ln: b.ln(&format!("head{v}.ln"), d),
        w: b.linear(format!("head{v}.w"), d, p * p * 4),
        b: b.zeros(format!("head{v}.b"), p * p * 4),
    };
    let head = [head_for(1), head_for(2)];
    (params, Layout { embed_w, embed_b, pos, enc, dec, head })
}

/// Records activations while the forward pass runs.
struct Recorder<'a> {
    opts: CaptureOptions,
    trace: &'a mut ActivationTrace,
}

impl Recorder<'_> {
    fn token(&mut self, tape: &Tape, point: ProbePoint, v: Var) {
        if self.opts.tokens {
            self.trace.tokens.insert(point, tape.value(v).clone());
        }
    }
}

struct Pass<'a> {
    tape: Tape,
    w: Vec<Var>,
    cfg: &'a ToyConfig,
}

impl Pass<'_> {
    fn ln(&mut self, x: Var, ln: Ln) -> Var {
        let n = self.tape.layer_norm(x, LN_EPS);
        let s = self.tape.mul_row(n, self.w[ln.g]);
        self.tape.add_row(s, self.w[ln.b])
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Var {
        let y = self.tape.matmul(x, self.w[w]);
        self.tape.add_row(y, self.w[b])
    }

    fn mlp(&mut self, x: Var, m: Mlp) -> Var {
        let h = self.linear(x, m.w1, m.b1);
        let h = self.tape.gelu(h);
        self.linear(h, m.w2, m.b2)
    }

    fn attention(
        &mut self,
        xq: Var,
        xkv: Var,
        a: Attn,
        site: Option<(View, usize, AttnKind)>,
        knockout: Option<&ResolvedKnockout>,
        rec: &mut Option<Recorder<'_>>,
    ) -> Var {
        let heads = self.cfg.heads;
        let dh = self.cfg.dim / heads;
        let q = self.tape.matmul(xq, self.w[a.wq]);
        let k = self.tape.matmul(xkv, self.w[a.wk]);
        let v = self.tape.matmul(xkv, self.w[a.wv]);
        let ko = match (site, knockout) {
            (Some((view, block, kind)), Some(ko)) if ko.targets(view, block, kind) => Some(ko),
            _ => None,
        };
        let scale = 1.0 / (dh as f32).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh);
            let kh = self.tape.slice_cols(k, h * dh, dh);
            let vh = self.tape.slice_cols(v, h * dh, dh);
            let s = self.tape.matmul_t(qh, kh);
            let mut s = self.tape.scale(s, scale);
            let head_ko = ko.filter(|ko| ko.heads.contains(&h));
            if let Some(ko) = head_ko.filter(|ko| ko.mode == MaskMode::NegInfPreSoftmax) {
                let (r, c) = self.tape.value(s).dim();
                s = self.tape.add_const(s, &ko.score_mask(r, c));
            }
            let mut att = self.tape.softmax_rows(s);
            if let Some(ko) = head_ko.filter(|ko| ko.mode == MaskMode::ZeroPostSoftmax) {
                let (r, c) = self.tape.value(att).dim();
                att = self.tape.mul_const(att, ko.keep_mask(r, c));
            }
            let oh = self.tape.matmul(att, vh);
            if let (Some((view, block, kind)), Some(rec)) = (site, rec.as_mut()) {
                let key = AttnKey { view, block, kind, head: h };
                if rec.opts.attention {
                    rec.trace.attention.insert(key, self.tape.value(att).clone());
                }
                if rec.opts.head_internals {
                    rec.trace.values.insert(key, self.tape.value(vh).clone());
                    rec.trace.head_outputs.insert(key, self.tape.value(oh).clone());
                }
            }
            outs.push(oh);
        }
        let o = self.tape.concat_cols(&outs);
        self.linear(o, a.wo, a.bo)
    }
}

/// Trainable toy two-view pointmap transformer.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub seed: u64,
    pub params: Params,
    layout: Layout,
    descriptor: ArchDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub batch_pairs: usize,
    pub alpha: f64,
    pub reduction: Reduction,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_pairs: 4,
            alpha: 0.2,
            reduction: Reduction::Mean,
            optimizer: OptimizerConfig { lr: 1e-3, ..Default::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainReport {
    pub steps: usize,
    /// Per-step training loss.
    pub losses: Vec<f64>,
}

impl ToyModel {
    pub fn new(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build_layout(&config, seed);
        Ok(Self::assemble(config, seed, params, layout))
    }

    /// Rebuild from persisted weights; names and shapes must match the configuration.
    pub fn from_params(config: ToyConfig, seed: u64, params: Params) -> Result<Self> {
        config.validate()?;
        let (fresh, layout) = build_layout(&config, seed);
        if fresh.names != params.names {
            return Err(Error::InvalidInput("parameter names do not match the configuration".into()));
        }
        for (a, b) in fresh.values.iter().zip(&params.values) {
            if a.dim() != b.dim() {
                return Err(Error::InvalidInput("parameter shapes do not match the configuration".into()));
            }
        }
        Ok(Self::assemble(config, seed, params, layout))
    }

    fn assemble(config: ToyConfig, seed: u64, params: Params, layout: Layout) -> Self {
        let descriptor = ArchDescriptor {
            model_id: format!("toy-s{seed}-d{}-b{}", config.dim, config.decoder_blocks),
            kind: "toy".into(),
            image_height: config.image_size,
            image_width: config.image_size,
            patch_size: config.patch_size,
            dim: config.dim,
            heads: config.heads,
            decoder_blocks: config.decoder_blocks,
            sublayer_order: vec![Sublayer::SelfAttention, Sublayer::CrossAttention, Sublayer::Mlp],
            params: serde_json::json!({ "config": config, "seed": seed }),
        };
        Self { config, seed, params, layout, descriptor }
    }

    /// Run the network on a tape. Returns the pass (for backward) and the per-view head outputs.
    fn run(
        &self,
        pair: &ScenePair,
        mut rec: Option<Recorder<'_>>,
        knockout: Option<&ResolvedKnockout>,
    ) -> (Pass<'_>, [Var; 2]) {
        let cfg = &self.config;
        let l = &self.layout;
        let mut tape = Tape::new();
        let w = self.params.register(&mut tape);
        let mut pass = Pass { tape, w, cfg };

        let mut x = [pass.w[0]; 2];
        for view in View::BOTH {
            let patches = pass.tape.leaf(patchify_image(&pair.images[view.index()], cfg.patch_size));
            let mut h = pass.linear(patches, l.embed_w, l.embed_b);
            h = pass.tape.add(h, pass.w[l.pos]);
            for blk in &l.enc {
                let n = pass.ln(h, blk.ln1);
                let u = pass.attention(n, n, blk.sa, None, None, &mut None);
                h = pass.tape.add(h, u);
                let n = pass.ln(h, blk.ln2);
                let u = pass.mlp(n, blk.mlp);
                h = pass.tape.add(h, u);
            }
            if let Some(r) = rec.as_mut() {
                r.token(&pass.tape, ProbePoint::encoder(view), h);
            }
            x[view.index()] = h;
        }

        for block in 0..cfg.decoder_blocks {
            let inputs = x;
            for view in View::BOTH {
                let blk = l.dec[view.index()][block];
                let ctx = inputs[view.other().index()];
                let mut h = x[view.index()];
                for sub in [Sublayer::SelfAttention, Sublayer::CrossAttention, Sublayer::Mlp] {
                    let u = match sub {
                        Sublayer::SelfAttention => {
                            let n = pass.ln(h, blk.ln_sa);
                            pass.attention(n, n, blk.sa, Some((view, block, AttnKind::SelfAttention)), knockout, &mut rec)
                        }
                        Sublayer::CrossAttention => {
                            let n = pass.ln(h, blk.ln_ca);
                            let c = pass.ln(ctx, blk.ln_ctx);
                            pass.attention(n, c, blk.ca, Some((view, block, AttnKind::CrossAttention)), knockout, &mut rec)
                        }
                        Sublayer::Mlp => {
                            let n = pass.ln(h, blk.ln_mlp);
                            pass.mlp(n, blk.mlp)
                        }
                    };
                    h = pass.tape.add(h, u);
                    if let Some(r) = rec.as_mut() {
                        r.token(&pass.tape, ProbeLocation::pre(block, sub).at(view), u);
                        r.token(&pass.tape, ProbeLocation::post(block, sub).at(view), h);
                    }
                }
                x[view.index()] = h;
            }
        }

        let mut out = [x[0]; 2];
        for view in View::BOTH {
            let hd = l.head[view.index()];
            let n = pass.ln(x[view.index()], hd.ln);
            out[view.index()] = pass.linear(n, hd.w, hd.b);
        }
        (pass, out)
    }

    fn output_pointmap(&self, out: &Array2<f32>, valid: &ndarray::Array2<bool>) -> Result<Pointmap> {
        let (points, conf) = decode_patch_outputs(out, self.config.grid(), self.config.patch_size);
        Pointmap::new(points, Some(conf), valid.clone())
    }

    /// Raw head outputs (`N × p²·4` per view) without capture.
    pub fn head_outputs(&self, pair: &ScenePair) -> [Array2<f32>; 2] {
        let (pass, out) = self.run(pair, None, None);
        [pass.tape.value(out[0]).clone(), pass.tape.value(out[1]).clone()]
    }

    /// Mean per-pixel regression term of the first view over `pairs`.
    pub fn view1_regression(&self, pairs: &[ScenePair]) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0;
        for pair in pairs {
            let out = self.head_outputs(pair);
            let (l, _) = head_loss(&out[0], &pair.gt_pointmaps[0], self.config.grid(), self.config.patch_size, 0.2, false)?;
            sum += l.regression_sum;
            count += l.count;
        }
        if count == 0 {
            return Err(Error::InvalidInput("no pairs".into()));
        }
        Ok(sum / count as f64)
    }

    /// Train end to end on the two-view confidence loss.
    pub fn train(&mut self, pairs: &[ScenePair], cfg: &ToyTrainConfig) -> Result<ToyTrainReport> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        cfg.optimizer.validate()?;
        let mut opt = AdamW::new(cfg.optimizer, &self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut cursor = order.len();
        let mut losses = Vec::with_capacity(cfg.steps);
        let grid = self.config.grid();
        let patch = self.config.patch_size;
        for step in 0..cfg.steps {
            let mut acc = self.params.zeros_like();
            let mut step_loss = 0.0;
            for _ in 0..cfg.batch_pairs.max(1) {
                if cursor >= order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let pair = &pairs[order[cursor]];
                cursor += 1;
                let (pass, out) = self.run(pair, None, None);
                let mut seeds = Vec::with_capacity(2);
                for v in 0..2 {
                    let (l, mut g) = head_loss(pass.tape.value(out[v]), &pair.gt_pointmaps[v], grid, patch, cfg.alpha, true)?;
                    let norm = match cfg.reduction {
                        Reduction::Sum => 1.0,
                        Reduction::Mean => 1.0 / l.count as f64,
                    };
                    g.mapv_inplace(|x| x * norm as f32);
                    step_loss += l.value * norm;
                    seeds.push((out[v], g));
                }
                let grads = pass.tape.backward(&seeds);
                Params::accumulate(&mut acc, &pass.w, &grads);
            }
            if !step_loss.is_finite() || !all_finite(&acc) {
                return Err(Error::Numerical(format!("toy training diverged at step {step}")));
            }
            losses.push(step_loss / cfg.batch_pairs.max(1) as f64);
            let lr = cfg.optimizer.lr_at(step, cfg.steps);
            opt.step(&mut self.params, &acc, lr);
        }
        Ok(ToyTrainReport { steps: cfg.steps, losses })
    }
}

impl ModelAdapter for ToyModel {
    fn descriptor(&self) -> &ArchDescriptor {
        &self.descriptor
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { capture: true, intervene: true }
    }

    fn forward(
        &self,
        pair: &ScenePair,
        capture: &CaptureOptions,
        knockout: Option<&ResolvedKnockout>,
    ) -> Result<(ActivationTrace, ModelOutput)> {
        let mut trace = ActivationTrace {
            pair_id: pair.id(),
            model_id: self.descriptor.model_id.clone(),
            patch_grid: self.config.grid(),
            ..Default::default()
        };
        let rec = Recorder { opts: *capture, trace: &mut trace };
        let (pass, out) = self.run(pair, Some(rec), knockout);
        let pm1 = self.output_pointmap(pass.tape.value(out[0]), pair.valid(0))?;
        let pm2 = self.output_pointmap(pass.tape.value(out[1]), pair.valid(1))?;
        Ok((trace, ModelOutput { pointmaps: [pm1, pm2] }))
    }
}
