//! Perplexity and ROUGE-L scoring plus the experiment reports built on them.

pub mod report;
pub mod rouge;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{select_docs, Example};
use crate::error::{Error, Result};
use crate::generator;
use crate::numerics::Graph;
use crate::training::Model;

pub use report::{
    gen_matrix, powerlaw_fit, read_results_csv, results_csv_bytes, tradeoff_report, write_matrix_csv, write_results_csv, GenMatrix,
    PowerLawFit, TradeoffReport,
};
pub use rouge::rouge_l;

/// Teacher-forced scores of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub total_nll: f64,
    pub tokens: usize,
    /// Mean target NLL of each example, in dataset order.
    pub per_example_nll: Vec<f64>,
    pub prompt_tokens: Vec<usize>,
}

impl Scored {
    /// Corpus-level per-token perplexity.
    pub fn perplexity(&self) -> f64 {
        (self.total_nll / self.tokens as f64).exp()
    }

    /// Mean over examples of each example's own perplexity.
    pub fn mean_example_perplexity(&self) -> f64 {
        self.per_example_nll.iter().map(|l| l.exp()).sum::<f64>() / self.per_example_nll.len() as f64
    }

    pub fn mean_prompt_tokens(&self) -> f64 {
        self.prompt_tokens.iter().sum::<usize>() as f64 / self.prompt_tokens.len() as f64
    }
}

/// The documents example `index` is evaluated with.
pub fn eval_docs(ex: &Example, n_docs: usize, seed: u64, index: usize) -> Vec<String> {
    select_docs(&ex.docs, n_docs, seed, index)
}

/// Scores every example with `n_docs` seeded documents each. Document
/// compressions are computed once per distinct document.
pub fn score(model: &Model, examples: &[Example], n_docs: usize, seed: u64) -> Result<Scored> {
    if examples.is_empty() {
        return Err(Error::contract("cannot score an empty dataset"));
    }
    let selected: Vec<Vec<String>> = examples.iter().enumerate().map(|(i, e)| eval_docs(e, n_docs, seed, i)).collect();
    let cache = model.compress_unique(selected.iter().flatten())?;
    let parts = &model.parts;
    let rows: Vec<Result<(f64, usize, usize)>> = examples
        .par_iter()
        .zip(&selected)
        .map(|(ex, docs)| {
            let comps: Vec<_> = docs.iter().filter_map(|d| cache.get(d)).collect();
            let mut g = Graph::<f32>::new();
            let input = parts.input_from_compressions(&mut g, &model.store, docs, &comps, &ex.x)?;
            let loss = generator::loss(&mut g, &parts.backbone, &model.store, &input, &ex.y)?;
            g.check()?;
            let nll: f64 = g.token_nll(loss.loss).iter().map(|&v| v as f64).sum();
            Ok((nll, loss.tokens, input.prompt_tokens))
        })
        .collect();
    let mut s = Scored { total_nll: 0.0, tokens: 0, per_example_nll: Vec::new(), prompt_tokens: Vec::new() };
    for r in rows {
        let (nll, t, p) = r?;
        s.total_nll += nll;
        s.tokens += t;
        s.per_example_nll.push(nll / t as f64);
        s.prompt_tokens.push(p);
    }
    Ok(s)
}

/// Corpus-level perplexity with `n_docs` documents per example.
pub fn perplexity(model: &Model, examples: &[Example], n_docs: usize, seed: u64) -> Result<f64> {
    Ok(score(model, examples, n_docs, seed)?.perplexity())
}

/// Greedy generations and their mean ROUGE-L against the targets.
pub fn generate_and_score(
    model: &Model,
    examples: &[Example],
    n_docs: usize,
    seed: u64,
    max_new_tokens: usize,
) -> Result<(Vec<String>, f64)> {
    if examples.is_empty() {
        return Err(Error::contract("cannot score an empty dataset"));
    }
    let selected: Vec<Vec<String>> = examples.iter().enumerate().map(|(i, e)| eval_docs(e, n_docs, seed, i)).collect();
    let cache = model.compress_unique(selected.iter().flatten())?;
    let parts = &model.parts;
    let outs: Vec<Result<String>> = examples
        .par_iter()
        .zip(&selected)
        .map(|(ex, docs)| {
            let comps: Vec<_> = docs.iter().filter_map(|d| cache.get(d)).collect();
            generator::decode_greedy(
                &parts.backbone,
                &model.store,
                |g| parts.input_from_compressions(g, &model.store, docs, &comps, &ex.x),
                max_new_tokens,
            )
        })
        .collect();
    let outs: Vec<String> = outs.into_iter().collect::<Result<_>>()?;
    let mean = outs.iter().zip(examples).map(|(o, e)| rouge_l(o, &e.y)).sum::<f64>() / examples.len() as f64;
    Ok((outs, mean))
}

/// One evaluated configuration, as written to `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: String,
    pub m: usize,
    pub n_docs_train: usize,
    pub n_docs_test: usize,
    pub prompt_tokens: f64,
    pub perplexity: f64,
    /// Absent when no generations were scored.
    pub rouge_l: Option<f64>,
    pub n_examples: usize,
    pub seed: u64,
}
