//! Tiny decoder-only transformer used both as the frozen generator and,
//! with a LoRA adapter attached, as the compressor body.
//!
//! Pre-norm blocks: RMS norm, multi-head causal attention, RMS norm, GELU MLP.
//! Learned absolute positions are indexed from 0 over the full mixed
//! sequence, so soft blocks placed first occupy the first positions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Scalar};
use crate::tokenizer::VOCAB_SIZE;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { vocab_size: VOCAB_SIZE, d_model: 64, n_layers: 4, n_heads: 4, d_ff: 256, max_positions: 512 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::Config(format!("vocabulary of {} cannot hold the tokenizer", self.vocab_size)));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::Config("layer count, d_ff and max_positions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weight matrices a LoRA adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
    MlpUp,
    MlpDown,
}

impl LoraTarget {
    pub const ATTENTION: [LoraTarget; 4] = [LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output];

    fn key(self) -> &'static str {
        match self {
            LoraTarget::Query => "wq",
            LoraTarget::Key => "wk",
            LoraTarget::Value => "wv",
            LoraTarget::Output => "wo",
            LoraTarget::MlpUp => "w_up",
            LoraTarget::MlpDown => "w_down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0, dropout: 0.1, targets: LoraTarget::ATTENTION.to_vec() }
    }
}

#[derive(Debug, Clone)]
struct LoraFactor {
    layer: usize,
    target: LoraTarget,
    a: ParamId,
    b: ParamId,
}

/// Trainable low-rank factors; the effective weight is `W + (alpha/rank)·B·A`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    factors: Vec<LoraFactor>,
}

impl LoraAdapter {
    /// Registers factors for every target of every layer: `A` Gaussian, `B` zero.
    pub fn init(config: LoraConfig, backbone: &Backbone, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} outside [0,1)", config.dropout)));
        }
        let std = 1.0 / (config.rank as f64).sqrt();
        let mut factors = Vec::new();
        for layer in 0..backbone.config.n_layers {
            for &target in &config.targets {
                let w = store.get(backbone.weight(layer, target));
                let (d_out, d_in) = (w.shape[0], w.shape[1]);
                let a = store.add(
                    format!("lora.{layer}.{}.a", target.key()),
                    vec![config.rank, d_in],
                    gaussian(rng, config.rank * d_in, std),
                    true,
                );
                let b = store.add(
                    format!("lora.{layer}.{}.b", target.key()),
                    vec![d_out, config.rank],
                    vec![0.0; d_out * config.rank],
                    true,
                );
                factors.push(LoraFactor { layer, target, a, b });
            }
        }
        Ok(Self { config, factors })
    }

    /// Finds factors previously registered under the standard names.
    pub fn bind(config: LoraConfig, backbone: &Backbone, store: &ParamStore<f32>) -> Result<Self> {
        let mut factors = Vec::new();
        for layer in 0..backbone.config.n_layers {
            for &target in &config.targets {
                let find = |s: &str| {
                    store
                        .find(&format!("lora.{layer}.{}.{s}", target.key()))
                        .ok_or_else(|| Error::Config(format!("missing LoRA factor {layer}.{}.{s}", target.key())))
                };
                factors.push(LoraFactor { layer, target, a: find("a")?, b: find("b")? });
            }
        }
        Ok(Self { config, factors })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.factors.iter().flat_map(|f| [f.a, f.b]).collect()
    }

    fn factor(&self, layer: usize, target: LoraTarget) -> Option<&LoraFactor> {
        self.factors.iter().find(|f| f.layer == layer && f.target == target)
    }

    pub fn scaling(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }
}

#[derive(Debug, Clone)]
struct Layer {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    mlp_norm: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

/// Parameter handles of a backbone inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<Layer>,
    final_norm: ParamId,
    lm_head: ParamId,
}

/// One piece of a mixed input sequence.
#[derive(Debug, Clone)]
pub enum Segment {
    /// Soft embeddings already in the graph, shape `[rows, d_model]`.
    Soft(NodeId),
    Tokens(Vec<u32>),
}

/// Dropout state for a training-mode compressor pass.
pub struct Dropout<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    let d = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| d.sample(rng) as f32).collect()
}

impl Backbone {
    /// Registers freshly initialized weights (trainable) in `store`.
    pub fn init(config: BackboneConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = 0.02;
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = store.add("tok_emb", vec![config.vocab_size, d], gaussian(rng, config.vocab_size * d, std), true);
        let pos_emb = store.add("pos_emb", vec![config.max_positions, d], gaussian(rng, config.max_positions * d, std), true);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut mat = |name: &str, rows: usize, cols: usize, s: f64| {
                store.add(format!("layers.{l}.{name}"), vec![rows, cols], gaussian(rng, rows * cols, s), true)
            };
            let wq = mat("wq", d, d, std);
            let wk = mat("wk", d, d, std);
            let wv = mat("wv", d, d, std);
            let wo = mat("wo", d, d, resid_std);
            let w_up = mat("w_up", config.d_ff, d, std);
            let w_down = mat("w_down", d, config.d_ff, resid_std);
            let attn_norm = store.add(format!("layers.{l}.attn_norm"), vec![d], vec![1.0; d], true);
            let mlp_norm = store.add(format!("layers.{l}.mlp_norm"), vec![d], vec![1.0; d], true);
            layers.push(Layer { attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down });
        }
        let final_norm = store.add("final_norm", vec![d], vec![1.0; d], true);
        let lm_head = store.add("lm_head", vec![config.vocab_size, d], gaussian(rng, config.vocab_size * d, std), true);
        Ok(Self { config, tok_emb, pos_emb, layers, final_norm, lm_head })
    }

    /// Looks up a backbone registered under the standard names, checking shapes.
    pub fn bind<F: Scalar>(config: BackboneConfig, store: &ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let find = |name: String, shape: Vec<usize>| -> Result<ParamId> {
            let id = store.find(&name).ok_or_else(|| Error::Config(format!("backbone tensor {name} missing")))?;
            if store.get(id).shape != shape {
                return Err(Error::Config(format!(
                    "backbone tensor {name} has shape {:?}, expected {shape:?}",
                    store.get(id).shape
                )));
            }
            Ok(id)
        };
        let tok_emb = find("tok_emb".into(), vec![config.vocab_size, d])?;
        let pos_emb = find("pos_emb".into(), vec![config.max_positions, d])?;
        let mut layers = Vec::new();
        for l in 0..config.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            layers.push(Layer {
                attn_norm: find(p("attn_norm"), vec![d])?,
                wq: find(p("wq"), vec![d, d])?,
                wk: find(p("wk"), vec![d, d])?,
                wv: find(p("wv"), vec![d, d])?,
                wo: find(p("wo"), vec![d, d])?,
                mlp_norm: find(p("mlp_norm"), vec![d])?,
                w_up: find(p("w_up"), vec![config.d_ff, d])?,
                w_down: find(p("w_down"), vec![d, config.d_ff])?,
            });
        }
        let final_norm = find("final_norm".into(), vec![d])?;
        let lm_head = find("lm_head".into(), vec![config.vocab_size, d])?;
        Ok(Self { config, tok_emb, pos_emb, layers, final_norm, lm_head })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            ids.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.mlp_norm, l.w_up, l.w_down]);
        }
        ids.extend([self.final_norm, self.lm_head]);
        ids
    }

    pub fn lm_head(&self) -> ParamId {
        self.lm_head
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    fn weight(&self, layer: usize, target: LoraTarget) -> ParamId {
        let l = &self.layers[layer];
        match target {
            LoraTarget::Query => l.wq,
            LoraTarget::Key => l.wk,
            LoraTarget::Value => l.wv,
            LoraTarget::Output => l.wo,
            LoraTarget::MlpUp => l.w_up,
            LoraTarget::MlpDown => l.w_down,
        }
    }

    /// SHA-256 of every backbone weight.
    pub fn weight_hash<F: Scalar>(&self, store: &ParamStore<F>) -> String {
        store.digest(&self.param_ids())
    }

    /// Rows of the token embedding table for `tokens`.
    pub fn embed<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, tokens: &[u32]) -> Result<NodeId> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary")));
        }
        let table = g.param(store, self.tok_emb);
        Ok(g.gather(table, tokens))
    }

    /// Total number of positions a segment list occupies.
    pub fn sequence_len<F: Scalar>(g: &Graph<F>, segments: &[Segment]) -> usize {
        segments
            .iter()
            .map(|s| match s {
                Segment::Soft(n) => g.shape(*n)[0],
                Segment::Tokens(t) => t.len(),
            })
            .sum()
    }

    fn linear<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
        layer: usize,
        target: LoraTarget,
        lora: Option<&LoraAdapter>,
        dropout: &mut Option<Dropout<'_>>,
    ) -> NodeId {
        let w = g.param(store, self.weight(layer, target));
        let y = g.matmul_nt(x, w);
        let Some(f) = lora.and_then(|l| l.factor(layer, target)) else { return y };
        let adapter = lora.unwrap();
        let mut input = x;
        if let Some(d) = dropout.as_mut() {
            let p = adapter.config.dropout;
            if p > 0.0 {
                let keep = F::of(1.0 / (1.0 - p));
                let mask: Vec<F> =
                    (0..g.value(x).len()).map(|_| if d.rng.random::<f64>() < p { F::zero() } else { keep }).collect();
                let m = g.constant(g.shape(x).to_vec(), mask);
                input = g.mul(x, m);
            }
        }
        let a = g.param(store, f.a);
        let b = g.param(store, f.b);
        let xa = g.matmul_nt(input, a);
        let xab = g.matmul_nt(xa, b);
        let delta = g.scale(xab, F::of(adapter.scaling()));
        g.add(y, delta)
    }

    /// Runs the transformer and returns the residual stream after the last
    /// block, one row per position.
    ///
    /// With `lora` the adapter is applied (compressor pass); `dropout` turns
    /// on LoRA dropout and only has an effect when `lora` is present.
    pub fn forward_hidden<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        segments: &[Segment],
        lora: Option<&LoraAdapter>,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<NodeId> {
        let len = Self::sequence_len(g, segments);
        if len == 0 {
            return Err(Error::contract("empty input sequence"));
        }
        if len > self.config.max_positions {
            return Err(Error::contract(format!(
                "sequence of {len} positions exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let d = self.config.d_model;
        let mut parts = Vec::with_capacity(segments.len());
        for s in segments {
            match s {
                Segment::Soft(n) => {
                    if g.shape(*n).len() != 2 || g.shape(*n)[1] != d {
                        return Err(Error::contract(format!("soft block of shape {:?} must have width {d}", g.shape(*n))));
                    }
                    parts.push(*n);
                }
                Segment::Tokens(t) if t.is_empty() => {}
                Segment::Tokens(t) => parts.push(self.embed(g, store, t)?),
            }
        }
        let x0 = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0) };
        let positions: Vec<u32> = (0..len as u32).collect();
        let pos_table = g.param(store, self.pos_emb);
        let pos = g.gather(pos_table, &positions);
        let mut x = g.add(x0, pos);

        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let inv_sqrt = F::of(1.0 / (dh as f64).sqrt());
        for (l, layer) in self.layers.iter().enumerate() {
            let gain = g.param(store, layer.attn_norm);
            let n = g.rms_norm(x);
            let h = g.mul_row(n, gain);
            let q = self.linear(g, store, h, l, LoraTarget::Query, lora, &mut dropout);
            let k = self.linear(g, store, h, l, LoraTarget::Key, lora, &mut dropout);
            let v = self.linear(g, store, h, l, LoraTarget::Value, lora, &mut dropout);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (g.slice(q, 1, hd * dh, dh), g.slice(k, 1, hd * dh, dh), g.slice(v, 1, hd * dh, dh))
                };
                let s = g.matmul_nt(qh, kh);
                let s = g.scale(s, inv_sqrt);
                let p = g.softmax(s, true);
                outs.push(g.matmul(p, vh));
            }
            let att = if heads == 1 { outs[0] } else { g.concat(&outs, 1) };
            let o = self.linear(g, store, att, l, LoraTarget::Output, lora, &mut dropout);
            x = g.add(x, o);

            let gain = g.param(store, layer.mlp_norm);
            let n = g.rms_norm(x);
            let h = g.mul_row(n, gain);
            let up = self.linear(g, store, h, l, LoraTarget::MlpUp, lora, &mut dropout);
            let act = g.gelu(up);
            let down = self.linear(g, store, act, l, LoraTarget::MlpDown, lora, &mut dropout);
            x = g.add(x, down);
        }
        Ok(x)
    }

    /// Next-token logits `[len, vocab]` from hidden states.
    pub fn logits<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, hidden: NodeId) -> NodeId {
        let gain = g.param(store, self.final_norm);
        let n = g.rms_norm(hidden);
        let h = g.mul_row(n, gain);
        let head = g.param(store, self.lm_head);
        g.matmul_nt(h, head)
    }

    /// Hidden states and logits for a mixed input.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        segments: &[Segment],
        lora: Option<&LoraAdapter>,
        dropout: Option<Dropout<'_>>,
    ) -> Result<(NodeId, NodeId)> {
        let h = self.forward_hidden(g, store, segments, lora, dropout)?;
        let logits = self.logits(g, store, h);
        Ok((h, logits))
    }

    /// Serializes the backbone weights as a `role = "backbone"` container.
    pub fn to_container(&self, store: &ParamStore<f32>) -> Container {
        let mut c = Container::new("backbone");
        for id in self.param_ids() {
            let p = store.get(id);
            c.push(p.name.clone(), p.shape.clone(), p.data.clone());
        }
        c.hashes.insert("weights".into(), self.weight_hash(store));
        c.extra = serde_json::json!({ "config": self.config });
        c
    }

    /// Loads a backbone container into a fresh store with every weight frozen,
    /// verifying the recorded weight hash.
    pub fn from_container(c: &Container) -> Result<(Self, ParamStore<f32>)> {
        if c.role != "backbone" {
            return Err(Error::Config(format!("container role {} is not a backbone", c.role)));
        }
        let config: BackboneConfig = serde_json::from_value(c.extra["config"].clone())?;
        let mut store = ParamStore::new();
        for t in &c.tensors {
            store.add(t.name.clone(), t.shape.clone(), t.data.clone(), false);
        }
        let bb = Self::bind(config, &store)?;
        let found = bb.weight_hash(&store);
        match c.hashes.get("weights") {
            Some(expected) if *expected == found => Ok((bb, store)),
            Some(expected) => Err(Error::BackboneMismatch { expected: expected.clone(), found }),
            None => Err(Error::Config("backbone container lacks a weight hash".into())),
        }
    }
}

/// A backbone whose weights are frozen and hash-stamped.
#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    pub backbone: Backbone,
    pub store: ParamStore<f32>,
    pub hash: String,
}

impl FrozenBackbone {
    pub fn new(backbone: Backbone, mut store: ParamStore<f32>) -> Self {
        store.freeze_all();
        let hash = backbone.weight_hash(&store);
        Self { backbone, store, hash }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (backbone, store) = Backbone::from_container(c)?;
        Ok(Self::new(backbone, store))
    }

    pub fn to_container(&self) -> Container {
        self.backbone.to_container(&self.store)
    }

    /// Recomputes the weight hash and compares it with the stamp.
    pub fn verify(&self) -> Result<()> {
        let found = self.backbone.weight_hash(&self.store);
        if found != self.hash {
            return Err(Error::BackboneMismatch { expected: self.hash.clone(), found });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 8, peak_lr: 3e-3, warmup_fraction: 0.03, weight_decay: 0.01, clip_norm: 1.0, seed: 0 }
    }
}

/// Mean next-token loss of one token stream; streams longer than
/// `max_positions + 1` are cut.
pub fn sequence_loss<F: Scalar>(
    g: &mut Graph<F>,
    backbone: &Backbone,
    store: &ParamStore<F>,
    seq: &[u32],
) -> Result<NodeId> {
    if seq.len() < 2 {
        return Err(Error::contract("a training sequence needs at least two tokens"));
    }
    let seq = &seq[..seq.len().min(backbone.config.max_positions + 1)];
    let (_, logits) = backbone.forward(g, store, &[Segment::Tokens(seq[..seq.len() - 1].to_vec())], None, None)?;
    let targets: Vec<Option<u32>> = seq[1..].iter().map(|&t| Some(t)).collect();
    Ok(g.cross_entropy(logits, &targets))
}

/// Trains a fresh backbone on next-token prediction and returns it frozen
/// and hash-stamped. `on_step` receives `(step, mean batch loss)`.
pub fn pretrain_backbone(
    corpus: &[Vec<u32>],
    config: BackboneConfig,
    opts: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<FrozenBackbone> {
    use crate::numerics::{clip_global_norm, mean_gradients, AdamW, LrSchedule, ParamGroup};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rayon::prelude::*;

    if corpus.iter().all(|s| s.len() < 2) {
        return Err(Error::contract("pretraining corpus is empty"));
    }
    if opts.batch_size == 0 || opts.steps == 0 {
        return Err(Error::Config("steps and batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::new();
    let backbone = Backbone::init(config, &mut store, &mut rng)?;
    let schedule = LrSchedule::new(opts.steps, opts.warmup_fraction)?;
    let groups =
        [ParamGroup { name: "backbone".into(), params: backbone.param_ids(), peak_lr: opts.peak_lr, weight_decay: true }];
    let mut adam = AdamW::new(0.9, 0.999, 1e-8, opts.weight_decay);
    let usable: Vec<&Vec<u32>> = corpus.iter().filter(|s| s.len() >= 2).collect();
    let mut order: Vec<usize> = Vec::new();
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        while batch.len() < opts.batch_size {
            if order.is_empty() {
                order = (0..usable.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().unwrap());
        }
        let results: Vec<Result<(f64, crate::numerics::GradMap<f32>)>> = batch
            .par_iter()
            .map(|&i| {
                let mut g = Graph::new();
                let loss = sequence_loss(&mut g, &backbone, &store, usable[i])?;
                let grads = g.backward(loss)?;
                Ok((g.scalar(loss) as f64, grads.into_params()))
            })
            .collect();
        let mut losses = 0.0;
        let mut parts = Vec::with_capacity(results.len());
        for r in results {
            let (l, gm) = r.map_err(|e| match e {
                Error::NumericFault { op, .. } => Error::NumericFault { op, context: Some(format!("pretraining step {step}")) },
                e => e,
            })?;
            losses += l;
            parts.push(gm);
        }
        let mut grads = mean_gradients(parts);
        clip_global_norm(&mut grads, opts.clip_norm);
        adam.step(&mut store, &groups, &grads, step, &schedule)?;
        on_step(step, losses / batch.len() as f64);
    }
    Ok(FrozenBackbone::new(backbone, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> BackboneConfig {
        BackboneConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_positions: 64, ..Default::default() }
    }

    fn setup() -> (Backbone, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let bb = Backbone::init(small(), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (bb, store)
    }

    fn logits_of(bb: &Backbone, store: &ParamStore<f32>, toks: &[u32], lora: Option<&LoraAdapter>) -> Vec<f32> {
        let mut g = Graph::new();
        let (_, l) = bb.forward(&mut g, store, &[Segment::Tokens(toks.to_vec())], lora, None).unwrap();
        g.value(l).to_vec()
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig { n_heads: 3, ..small() }.validate().is_err());
        assert!(BackboneConfig { vocab_size: 100, ..small() }.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn embed_shapes_and_repeats() {
        let (bb, store) = setup();
        let mut g = Graph::new();
        let one = bb.embed(&mut g, &store, &[5]).unwrap();
        assert_eq!(g.shape(one), &[1, 16]);
        let rep = bb.embed(&mut g, &store, &[7, 7]).unwrap();
        let v = g.value(rep);
        assert_eq!(v[..16], v[16..]);
        assert!(matches!(bb.embed(&mut g, &store, &[260]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_lora_is_bit_identical_to_no_lora() {
        let (bb, mut store) = setup();
        let lora = LoraAdapter::init(LoraConfig::default(), &bb, &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let toks = [1, 2, 3, 40, 50];
        let a = logits_of(&bb, &store, &toks, None);
        let b = logits_of(&bb, &store, &toks, Some(&lora));
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let (_, l) = bb
            .forward(&mut g, &store, &[Segment::Tokens(toks.to_vec())], Some(&lora), Some(Dropout { rng: &mut rng }))
            .unwrap();
        assert_eq!(g.value(l), &a[..]);
    }

    #[test]
    fn future_tokens_do_not_affect_the_past() {
        let (bb, store) = setup();
        let v = bb.config.vocab_size;
        let a = logits_of(&bb, &store, &[10, 20, 30, 40], None);
        let b = logits_of(&bb, &store, &[10, 20, 99, 7], None);
        assert_eq!(a[..2 * v], b[..2 * v]);
        assert_ne!(a[2 * v..3 * v], b[2 * v..3 * v]);
    }

    #[test]
    fn soft_block_of_embeddings_equals_tokens() {
        let (bb, store) = setup();
        let toks = vec![3u32, 9, 27];
        let direct = logits_of(&bb, &store, &toks, None);
        let mut g = Graph::new();
        let table = store.get(bb.token_embedding());
        let rows: Vec<f32> = toks.iter().flat_map(|&t| table.data[t as usize * 16..(t as usize + 1) * 16].to_vec()).collect();
        let soft = g.constant(vec![3, 16], rows);
        let (_, l) = bb.forward(&mut g, &store, &[Segment::Soft(soft)], None, None).unwrap();
        assert_eq!(g.value(l), &direct[..]);
    }

    #[test]
    fn softmax_of_logits_is_normalized() {
        let (bb, store) = setup();
        let v = bb.config.vocab_size;
        let l = logits_of(&bb, &store, &[1, 2, 3], None);
        for row in l.chunks(v) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
            let p: f64 = row.iter().map(|&x| (x as f64 - max).exp() / z).sum();
            assert!((p - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn over_length_input_is_rejected() {
        let (bb, store) = setup();
        let mut g = Graph::new();
        let r = bb.forward(&mut g, &store, &[Segment::Tokens(vec![1; 65])], None, None);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn container_round_trip_checks_hash() {
        let (bb, store) = setup();
        let frozen = FrozenBackbone::new(bb, store);
        let c = frozen.to_container();
        let back = FrozenBackbone::from_container(&c).unwrap();
        assert_eq!(back.hash, frozen.hash);
        let mut bad = c.clone();
        bad.tensors[3].data[0] += 1.0;
        assert!(matches!(FrozenBackbone::from_container(&bad), Err(Error::BackboneMismatch { .. })));
    }

    #[test]
    fn pretraining_learns_and_is_deterministic() {
        let corpus: Vec<Vec<u32>> = (0..32).map(|i| crate::tokenizer::encode(&format!("abcabc {}", i % 4), true, true)).collect();
        let opts = PretrainConfig { steps: 60, batch_size: 4, peak_lr: 1e-2, ..Default::default() };
        let mut losses = Vec::new();
        let a = pretrain_backbone(&corpus, small(), &opts, |_, l| losses.push(l)).unwrap();
        let b = pretrain_backbone(&corpus, small(), &opts, |_, _| {}).unwrap();
        assert_eq!(a.hash, b.hash);
        assert!(a.store.iter().all(|(_, p)| !p.trainable));
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }
}
