//! Fine-tuning and ComMer pretraining runs: per-group AdamW with a cosine
//! schedule, gradient clipping, validation-perplexity early stopping and
//! checkpoints that hold only the trainable tensors.

mod model;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{FrozenBackbone, LoraConfig};
use crate::container::{write_atomic, Container};
use crate::datasets::{select_docs, Example};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::numerics::{clip_global_norm, mean_gradients, AdamW, GradMap, Graph, LrSchedule, ParamGroup};

pub use model::{Method, Model, ModelParts, Trainables};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    /// Documents per training example; examples with more are sub-sampled.
    pub n_docs: usize,
    /// Compression embeddings or soft-prompt rows.
    pub m: usize,
    pub lora: LoraConfig,
    pub lr_lora: f64,
    pub lr_embeddings: f64,
    pub lr_prompt: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Restrict weight decay to LoRA factors.
    pub decay_lora_only: bool,
    pub clip_norm: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub patience: usize,
    /// Cap on validation examples scored at each evaluation.
    pub max_val_examples: Option<usize>,
    /// Prompt tuning only: positions before the instruction available to
    /// the soft prompt plus document tokens.
    pub prompt_budget: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Commer,
            n_docs: 8,
            m: 4,
            lora: LoraConfig::default(),
            lr_lora: 1e-4,
            lr_embeddings: 1e-2,
            lr_prompt: 3e-2,
            batch_size: 16,
            epochs: 20,
            max_steps: None,
            warmup_fraction: 0.03,
            weight_decay: 0.001,
            decay_lora_only: false,
            clip_norm: 0.3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            eval_every: 50,
            patience: 5,
            max_val_examples: None,
            prompt_budget: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("epochs", self.epochs.max(self.max_steps.unwrap_or(0))),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("lr_lora", self.lr_lora), ("lr_embeddings", self.lr_embeddings), ("lr_prompt", self.lr_prompt), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.prompt_budget.is_some() && self.method != Method::PromptTuning {
            return Err(Error::Config("prompt_budget only applies to prompt tuning".into()));
        }
        LrSchedule::new(1000, self.warmup_fraction).map(|_| ())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub perplexity: f64,
}

pub fn trace_csv_bytes(trace: &[TraceRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in trace {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

/// Trainable tensors of a run and everything needed to reload them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub backbone_hash: String,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    /// `(step, validation perplexity)` at every evaluation.
    pub history: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val_perplexity: f64,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("checkpoint");
        for (name, (shape, data)) in &self.tensors {
            c.push(name.clone(), shape.clone(), data.clone());
        }
        c.hashes.insert("backbone".into(), self.backbone_hash.clone());
        c.extra = serde_json::json!({
            "config": self.config,
            "history": self.history,
            "best_step": self.best_step,
            "best_val_perplexity": self.best_val_perplexity,
        });
        Ok(c)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes())
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_role("checkpoint", path)?;
        let bad = |r: &str| Error::Integrity { path: path.to_path_buf(), reason: r.into() };
        Ok(Self {
            config: serde_json::from_value(c.extra["config"].clone())?,
            backbone_hash: c.hashes.get("backbone").cloned().ok_or_else(|| bad("missing backbone hash"))?,
            tensors: c.tensors.iter().map(|t| (t.name.clone(), (t.shape.clone(), t.data.clone()))).collect(),
            history: serde_json::from_value(c.extra["history"].clone())?,
            best_step: serde_json::from_value(c.extra["best_step"].clone())?,
            best_val_perplexity: serde_json::from_value(c.extra["best_val_perplexity"].clone())?,
        })
    }

    /// Rebuilds the model against `backbone`, refusing a different backbone.
    pub fn model(&self, backbone: &FrozenBackbone) -> Result<Model> {
        if backbone.hash != self.backbone_hash {
            return Err(Error::BackboneMismatch { expected: self.backbone_hash.clone(), found: backbone.hash.clone() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(
            backbone,
            self.config.method,
            self.config.m,
            self.config.lora.clone(),
            self.config.prompt_budget,
            &mut rng,
        )?;
        model.load_tensors(&self.tensors, false)?;
        Ok(model)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

/// Reads a checkpoint and verifies it belongs to `backbone`.
pub fn load_checkpoint(path: &Path, backbone: &FrozenBackbone) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_container(&Container::read(path)?, path)?;
    if ckpt.backbone_hash != backbone.hash {
        return Err(Error::BackboneMismatch { expected: ckpt.backbone_hash, found: backbone.hash.clone() });
    }
    Ok(ckpt)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    pub steps_run: usize,
    /// Examples consumed, counting repeats across epochs.
    pub examples_seen: usize,
    /// Store tensors whose bytes differ between the start and end of the run.
    pub changed_tensors: Vec<String>,
}

fn param_groups(cfg: &RunConfig, parts: &ModelParts) -> Vec<ParamGroup> {
    let decay = !cfg.decay_lora_only;
    match &parts.trainables {
        Trainables::Compressor(c) => vec![
            ParamGroup { name: "lora".into(), params: c.lora.param_ids(), peak_lr: cfg.lr_lora, weight_decay: true },
            ParamGroup {
                name: "compression_embeddings".into(),
                params: vec![c.embeddings.id],
                peak_lr: cfg.lr_embeddings,
                weight_decay: decay,
            },
        ],
        Trainables::Prompt(p) => {
            vec![ParamGroup { name: "soft_prompt".into(), params: vec![p.id], peak_lr: cfg.lr_prompt, weight_decay: decay }]
        }
    }
}

fn step_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0d70_9e75);
    rng.set_stream(((step as u64) << 20) | slot as u64);
    rng
}

/// Fine-tunes one configuration. `init` seeds the trainable tensors (for
/// example from ComMer pretraining); it must match the run's shapes.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Example],
    val_set: &[Example],
    backbone: &FrozenBackbone,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract("training and validation sets must be non-empty"));
    }
    backbone.verify()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(backbone, cfg.method, cfg.m, cfg.lora.clone(), cfg.prompt_budget, &mut rng)?;
    if let Some(ck) = init {
        if ck.backbone_hash != backbone.hash {
            return Err(Error::BackboneMismatch { expected: ck.backbone_hash.clone(), found: backbone.hash.clone() });
        }
        if ck.config.method.uses_compressor() != cfg.method.uses_compressor() {
            return Err(Error::Config("initial checkpoint was trained with an incompatible method".into()));
        }
        model.load_tensors(&ck.tensors, false)?;
    }
    let initial = model.store.clone();
    let groups = param_groups(cfg, &model.parts);
    let mut adam = AdamW::new(cfg.betas.0, cfg.betas.1, cfg.eps, cfg.weight_decay);

    let docs: Vec<Vec<String>> = train_set.iter().enumerate().map(|(i, e)| select_docs(&e.docs, cfg.n_docs, cfg.seed, i)).collect();
    let val: &[Example] = match cfg.max_val_examples {
        Some(k) if k < val_set.len() => &val_set[..k],
        _ => val_set,
    };
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = cfg.max_steps.unwrap_or(cfg.epochs * steps_per_epoch);
    let schedule = LrSchedule::new(total, cfg.warmup_fraction)?;

    let mut trace = Vec::new();
    let mut history = Vec::new();
    let evaluate = |model: &Model, step: usize, trace: &mut Vec<TraceRow>| -> Result<f64> {
        let s = evaluation::score(model, val, cfg.n_docs, cfg.seed)?;
        let ppl = s.perplexity();
        trace.push(TraceRow { step, split: "val".into(), loss: s.total_nll / s.tokens as f64, perplexity: ppl });
        Ok(ppl)
    };
    let mut best_ppl = evaluate(&model, 0, &mut trace)?;
    history.push((0, best_ppl));
    let mut best = model.trainable_tensors();
    let mut best_step = 0;
    let mut stale = 0;

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut seen = 0;
    let mut steps_run = 0;
    for step in 0..total {
        if cursor >= order.len() {
            order = (0..train_set.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<usize> = order[cursor..(cursor + cfg.batch_size).min(order.len())].to_vec();
        cursor += batch.len();
        seen += batch.len();
        let parts = &model.parts;
        let store = &model.store;
        let results: Vec<Result<(f64, GradMap<f32>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let ex = &train_set[i];
                let mut drng = step_rng(cfg.seed, step, slot);
                let mut g = Graph::new();
                let (l, _) = parts.example_loss(&mut g, store, &docs[i], &ex.x, &ex.y, Some(&mut drng))?;
                let loss = g.scalar(l.loss) as f64;
                if !loss.is_finite() {
                    return Err(Error::NumericFault { op: "loss".into(), context: Some(format!("step {step}")) });
                }
                Ok((loss, g.backward(l.loss)?.into_params()))
            })
            .collect();
        let mut loss_sum = 0.0;
        let mut grads = Vec::with_capacity(results.len());
        for r in results {
            let (l, gm) = r.map_err(|e| match e {
                Error::NumericFault { op, .. } => Error::NumericFault { op, context: Some(format!("training step {step}")) },
                e => e,
            })?;
            loss_sum += l;
            grads.push(gm);
        }
        let mut grads = mean_gradients(grads);
        clip_global_norm(&mut grads, cfg.clip_norm);
        adam.step(&mut model.store, &groups, &grads, step, &schedule)?;
        let mean_loss = loss_sum / batch.len() as f64;
        trace.push(TraceRow { step: step + 1, split: "train".into(), loss: mean_loss, perplexity: mean_loss.exp() });
        steps_run = step + 1;

        if steps_run % cfg.eval_every == 0 || steps_run == total {
            let ppl = evaluate(&model, steps_run, &mut trace)?;
            history.push((steps_run, ppl));
            if ppl < best_ppl {
                best_ppl = ppl;
                best = model.trainable_tensors();
                best_step = steps_run;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    log::info!("early stop at step {steps_run}; best {best_ppl:.4} at step {best_step}");
                    break;
                }
            }
        }
    }
    if model.backbone_digest() != backbone.hash {
        return Err(Error::BackboneMismatch { expected: backbone.hash.clone(), found: model.backbone_digest() });
    }
    let changed_tensors = model
        .store
        .iter()
        .filter(|(id, p)| initial.get(*id).data.iter().map(|v| v.to_bits()).ne(p.data.iter().map(|v| v.to_bits())))
        .map(|(_, p)| p.name.clone())
        .collect();
    Ok(TrainOutcome {
        changed_tensors,
        checkpoint: Checkpoint {
            config: cfg.clone(),
            backbone_hash: backbone.hash.clone(),
            tensors: best,
            history,
            best_step,
            best_val_perplexity: best_ppl,
        },
        trace,
        steps_run,
        examples_seen: seen,
    })
}

/// One epoch of multi-document auto-encoding on pretraining examples
/// (every document of an example is used).
pub fn pretrain_commer(
    cfg: &RunConfig,
    examples: &[Example],
    val_set: &[Example],
    backbone: &FrozenBackbone,
) -> Result<TrainOutcome> {
    if !cfg.method.uses_compressor() {
        return Err(Error::Config("pretraining applies to compressor methods".into()));
    }
    let max_docs = examples.iter().chain(val_set).map(|e| e.docs.len()).max().unwrap_or(1);
    let cfg = RunConfig { n_docs: max_docs, epochs: 1, max_steps: None, ..cfg.clone() };
    train(&cfg, examples, val_set, backbone, None)
}
