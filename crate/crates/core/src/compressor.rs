//! Per-document compression: the document tokens followed by `m` trainable
//! compression embeddings run through the LoRA-adapted backbone; the last
//! block's states at the `m` trailing positions form the compression.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{gaussian, Backbone, Dropout, LoraAdapter, Segment};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Scalar};
use crate::tokenizer::encode;

pub const EMBEDDINGS_NAME: &str = "compression_embeddings";

/// The shared `m × d_model` table appended to every document.
#[derive(Debug, Clone, Copy)]
pub struct CompressionEmbeddings {
    pub id: ParamId,
    pub m: usize,
}

impl CompressionEmbeddings {
    /// Registers a trainable table initialized from `N(0, 0.02²)`.
    pub fn init(store: &mut ParamStore<f32>, m: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        let id = store.add(EMBEDDINGS_NAME, vec![m, d_model], gaussian(rng, m * d_model, 0.02), true);
        Ok(Self { id, m })
    }

    pub fn bind<F: Scalar>(store: &ParamStore<F>) -> Result<Self> {
        let id = store.find(EMBEDDINGS_NAME).ok_or_else(|| Error::Config("no compression embeddings in store".into()))?;
        Ok(Self { id, m: store.get(id).shape[0] })
    }
}

/// An `m × d` soft prompt built from `doc_count` documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compression {
    pub matrix: Vec<f32>,
    pub m: usize,
    pub d: usize,
    pub doc_count: usize,
}

impl Compression {
    pub fn new(matrix: Vec<f32>, m: usize, d: usize, doc_count: usize) -> Result<Self> {
        if matrix.len() != m * d {
            return Err(Error::contract(format!("compression buffer of {} values for shape ({m},{d})", matrix.len())));
        }
        if doc_count == 0 {
            return Err(Error::contract("compression with zero documents"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault { op: "compression".into(), context: None });
        }
        Ok(Self { matrix, m, d, doc_count })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.m, self.d)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.d..(i + 1) * self.d]
    }
}

/// Compressor parts of a model: backbone, adapter and compression table.
#[derive(Debug, Clone)]
pub struct Compressor {
    pub backbone: Backbone,
    pub lora: LoraAdapter,
    pub embeddings: CompressionEmbeddings,
}

impl Compressor {
    pub fn m(&self) -> usize {
        self.embeddings.m
    }

    /// Graph-level compression of already tokenized input; returns an
    /// `[m, d_model]` node.
    pub fn compress_tokens<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        tokens: &[u32],
        dropout: Option<Dropout<'_>>,
    ) -> Result<NodeId> {
        let m = self.m();
        let max = self.backbone.config.max_positions;
        if tokens.len() + m > max {
            return Err(Error::contract(format!(
                "document of {} tokens plus {m} compression embeddings exceeds {max} positions",
                tokens.len()
            )));
        }
        let table = g.param(store, self.embeddings.id);
        let segments = [Segment::Tokens(tokens.to_vec()), Segment::Soft(table)];
        let hidden = self.backbone.forward_hidden(g, store, &segments, Some(&self.lora), dropout)?;
        Ok(g.slice(hidden, 0, tokens.len(), m))
    }

    /// Inference-mode compression of one document.
    pub fn compress(&self, store: &ParamStore<f32>, doc: &str) -> Result<Compression> {
        self.compress_encoded(store, &encode(doc, false, false), 1)
    }

    pub(crate) fn compress_encoded(&self, store: &ParamStore<f32>, tokens: &[u32], doc_count: usize) -> Result<Compression> {
        let mut g = Graph::new();
        let node = self.compress_tokens(&mut g, store, tokens, None)?;
        g.check()?;
        Compression::new(g.value(node).to_vec(), self.m(), self.backbone.config.d_model, doc_count)
    }

    /// Compresses each document independently, preserving order.
    pub fn compress_batch(&self, store: &ParamStore<f32>, docs: &[String]) -> Result<Vec<Compression>> {
        docs.par_iter()
            .enumerate()
            .map(|(i, d)| {
                self.compress(store, d).map_err(|e| match e {
                    Error::Contract(msg) => Error::Contract(format!("document {i}: {msg}")),
                    Error::NumericFault { op, .. } => Error::NumericFault { op, context: Some(format!("document {i}")) },
                    e => e,
                })
            })
            .collect()
    }
}
