//! A frozen backbone plus the trainable tensors of one method, and the
//! per-example loss every method is trained and evaluated with.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Dropout, FrozenBackbone, LoraAdapter};
use crate::compressor::{Compression, CompressionEmbeddings, Compressor};
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorInput, LossNode, SoftPrompt};
use crate::merger::{self, join_docs};
use crate::numerics::{Graph, ParamId, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Compress each document, mean-pool, prefix the instruction.
    Commer,
    /// Trainable soft prompt followed by the raw documents.
    PromptTuning,
    /// Compress each document and stack the compressions row-wise.
    CommerConcat,
    /// Compress the separator-joined documents in a single pass.
    ConcatCommer,
}

impl Method {
    pub fn uses_compressor(self) -> bool {
        self != Method::PromptTuning
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Commer => "commer",
            Method::PromptTuning => "prompt_tuning",
            Method::CommerConcat => "commer_concat",
            Method::ConcatCommer => "concat_commer",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "commer" => Ok(Method::Commer),
            "prompt_tuning" => Ok(Method::PromptTuning),
            "commer_concat" => Ok(Method::CommerConcat),
            "concat_commer" => Ok(Method::ConcatCommer),
            other => Err(Error::Config(format!("unknown method {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Trainables {
    Compressor(Compressor),
    Prompt(SoftPrompt),
}

/// Parameter handles of a full model; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ModelParts {
    pub method: Method,
    pub backbone: Backbone,
    pub trainables: Trainables,
    /// Positions before the instruction that prompt tuning may fill with
    /// soft rows and document tokens.
    pub prompt_budget: Option<usize>,
}

/// Owned store plus handles.
#[derive(Debug, Clone)]
pub struct Model {
    pub parts: ModelParts,
    pub store: ParamStore<f32>,
    pub backbone_hash: String,
}

impl ModelParts {
    pub fn m(&self) -> usize {
        match &self.trainables {
            Trainables::Compressor(c) => c.m(),
            Trainables::Prompt(p) => p.m,
        }
    }

    pub fn compressor(&self) -> Option<&Compressor> {
        match &self.trainables {
            Trainables::Compressor(c) => Some(c),
            Trainables::Prompt(_) => None,
        }
    }

    /// Trainable parameter ids in a fixed order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        match &self.trainables {
            Trainables::Compressor(c) => {
                let mut v = vec![c.embeddings.id];
                v.extend(c.lora.param_ids());
                v
            }
            Trainables::Prompt(p) => vec![p.id],
        }
    }

    /// Document tokens the prompt-tuning input keeps under the budget.
    pub fn baseline_tokens(&self, docs: &[String]) -> Vec<u32> {
        let mut t = generator::baseline_doc_tokens(docs);
        if let Some(b) = self.prompt_budget {
            t.truncate(b.saturating_sub(self.m()));
        }
        t
    }

    /// Builds the generator input from per-document compression nodes
    /// (ComMer variants) or raw documents (prompt tuning).
    fn input<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        docs: &[String],
        x: &str,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<GeneratorInput> {
        match (&self.trainables, self.method) {
            (Trainables::Prompt(p), Method::PromptTuning) => {
                let soft = g.param(store, p.id);
                let tokens = self.baseline_tokens(docs);
                generator::build_input_prompt_tuning(g, &self.backbone, soft, &tokens, x)
            }
            (Trainables::Compressor(c), method) if !docs.is_empty() => {
                let prefix = match method {
                    Method::ConcatCommer => c.compress_tokens(g, store, &join_docs(docs), dropout.as_deref_mut().map(|rng| Dropout { rng }))?,
                    _ => {
                        let mut parts = Vec::with_capacity(docs.len());
                        for d in docs {
                            let tokens = crate::tokenizer::encode(d, false, false);
                            parts.push(c.compress_tokens(g, store, &tokens, dropout.as_deref_mut().map(|rng| Dropout { rng }))?);
                        }
                        if method == Method::CommerConcat {
                            if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0) }
                        } else {
                            g.mean_of(&parts)
                        }
                    }
                };
                generator::build_input_commer(g, &self.backbone, Some(prefix), x)
            }
            (Trainables::Compressor(_), _) => generator::build_input_commer(g, &self.backbone, None, x),
            (Trainables::Prompt(_), m) => Err(Error::Config(format!("soft prompt model cannot run method {m}"))),
        }
    }

    /// Teacher-forced target loss of one example.
    pub fn example_loss<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        docs: &[String],
        x: &str,
        y: &str,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossNode, usize)> {
        let input = self.input(g, store, docs, x, dropout)?;
        let loss = generator::loss(g, &self.backbone, store, &input, y)?;
        Ok((loss, input.prompt_tokens))
    }

    /// Generator input from precomputed single-document compressions.
    pub fn input_from_compressions<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        docs: &[String],
        compressions: &[&Compression],
        x: &str,
    ) -> Result<GeneratorInput> {
        let prefix = match self.method {
            Method::PromptTuning | Method::ConcatCommer => return self.input(g, store, docs, x, None),
            _ if compressions.is_empty() => None,
            Method::Commer => {
                let owned: Vec<Compression> = compressions.iter().map(|c| (*c).clone()).collect();
                Some(generator::prefix_node(g, &merger::merge_mean(&owned)?))
            }
            Method::CommerConcat => {
                let owned: Vec<Compression> = compressions.iter().map(|c| (*c).clone()).collect();
                Some(generator::prefix_node(g, &merger::merge_concat(&owned)?))
            }
        };
        generator::build_input_commer(g, &self.backbone, prefix, x)
    }
}

impl Model {
    /// Copies the frozen backbone and adds freshly initialized trainables.
    pub fn new(
        backbone: &FrozenBackbone,
        method: Method,
        m: usize,
        lora: crate::backbone::LoraConfig,
        prompt_budget: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        backbone.verify()?;
        let mut store = backbone.store.clone();
        let bb = backbone.backbone.clone();
        let trainables = if method.uses_compressor() {
            let lora = LoraAdapter::init(lora, &bb, &mut store, rng)?;
            let embeddings = CompressionEmbeddings::init(&mut store, m, bb.config.d_model, rng)?;
            Trainables::Compressor(Compressor { backbone: bb.clone(), lora, embeddings })
        } else {
            Trainables::Prompt(SoftPrompt::init(&mut store, &bb, m, rng)?)
        };
        if method != Method::PromptTuning && prompt_budget.is_some() {
            return Err(Error::Config("prompt_budget only applies to prompt tuning".into()));
        }
        Ok(Self {
            parts: ModelParts { method, backbone: bb, trainables, prompt_budget },
            store,
            backbone_hash: backbone.hash.clone(),
        })
    }

    pub fn trainable_tensors(&self) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
        self.parts
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let p = self.store.get(id);
                (p.name.clone(), (p.shape.clone(), p.data.clone()))
            })
            .collect()
    }

    /// Overwrites trainable tensors by name, refusing any shape difference.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, (Vec<usize>, Vec<f32>)>, allow_missing: bool) -> Result<()> {
        for id in self.parts.trainable_ids() {
            let p = self.store.get_mut(id);
            match tensors.get(&p.name) {
                Some((shape, data)) if *shape == p.shape => p.data.clone_from(data),
                Some((shape, _)) => {
                    return Err(Error::Config(format!(
                        "tensor {} has shape {shape:?} in the checkpoint but {:?} in this run",
                        p.name, p.shape
                    )))
                }
                None if allow_missing => {}
                None => return Err(Error::Config(format!("checkpoint lacks tensor {}", p.name))),
            }
        }
        Ok(())
    }

    /// Digest of the backbone weights inside this model's store.
    pub fn backbone_digest(&self) -> String {
        self.parts.backbone.weight_hash(&self.store)
    }

    /// Inference-mode compressions of distinct documents, keyed by text.
    pub fn compress_unique<'a>(&self, docs: impl IntoIterator<Item = &'a String>) -> Result<BTreeMap<String, Compression>> {
        let Some(c) = self.parts.compressor() else { return Ok(BTreeMap::new()) };
        let mut unique: Vec<String> = docs.into_iter().cloned().collect();
        unique.sort();
        unique.dedup();
        let comps = c.compress_batch(&self.store, &unique)?;
        Ok(unique.into_iter().zip(comps).collect())
    }
}
