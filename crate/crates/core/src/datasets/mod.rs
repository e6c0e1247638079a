//! Synthetic task generators, document sub-sampling and JSONL ingestion.

pub mod grammar;
pub mod knowledge;
pub mod pretrain;
pub mod skill;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{sha256_hex, write_atomic};
use crate::error::{Error, Result};
use crate::tokenizer::{encode, EOS, SEP};

pub use knowledge::{gen_knowledge_dataset, KnowledgeConfig, MemoryFact};
pub use pretrain::{gen_generic_corpus, gen_pretrain_example, pretrain_examples};
pub use skill::{collision_audit, gen_skill_dataset, Family, SkillConfig, StyleSpec};

/// `(documents, instruction, target)` for one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user_id: String,
    pub docs: Vec<String>,
    pub x: String,
    pub y: String,
}

impl Example {
    pub fn char_len(&self) -> usize {
        self.docs.iter().map(|d| d.chars().count()).sum::<usize>() + self.x.chars().count() + self.y.chars().count()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.x.is_empty() {
            return Err("empty instruction".into());
        }
        if self.y.is_empty() {
            return Err("empty target".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Splits {
    pub fn all(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Assigns whole users to splits: a fifth to test, an eighth to validation
/// (at least one user each), the rest to training.
pub(crate) fn split_users(per_user: &[Vec<Example>], order: &[usize]) -> Splits {
    let n = order.len();
    let n_test = (n / 5).max(1);
    let n_val = (n / 8).max(1);
    let mut s = Splits::default();
    for (rank, &u) in order.iter().enumerate() {
        let dst = if rank < n_test {
            &mut s.test
        } else if rank < n_test + n_val {
            &mut s.val
        } else {
            &mut s.train
        };
        dst.extend(per_user[u].iter().cloned());
    }
    s
}

/// Seeded subset of `n` documents: the first `n` of a permutation keyed by
/// `(seed, index)`, so subsets for growing `n` are nested.
pub fn select_docs(docs: &[String], n: usize, seed: u64, index: usize) -> Vec<String> {
    let key = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    idx.shuffle(&mut rng);
    idx.into_iter().take(n).map(|i| docs[i].clone()).collect()
}

/// Examples kept by [`load_jsonl`] and how many were over the character cap.
#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub examples: Vec<Example>,
    pub dropped: usize,
}

pub const DEFAULT_CHAR_CAP: usize = 2900;

/// Reads one JSON example per line, dropping examples longer than `char_cap` characters.
pub fn load_jsonl(path: &Path, char_cap: usize) -> Result<Loaded> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Loaded::default();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |reason: String| Error::Parse { path: path.to_path_buf(), line: i + 1, reason };
        let ex: Example = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        ex.validate().map_err(parse)?;
        if ex.char_len() > char_cap {
            log::info!("{}:{}: dropping example of {} characters", path.display(), i + 1, ex.char_len());
            out.dropped += 1;
            continue;
        }
        out.examples.push(ex);
    }
    if out.dropped > 0 {
        log::warn!("{}: dropped {} examples over {char_cap} characters", path.display(), out.dropped);
    }
    Ok(out)
}

pub fn to_jsonl(examples: &[Example]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for e in examples {
        serde_json::to_writer(&mut buf, e)?;
        buf.write_all(b"\n").expect("writing to memory");
    }
    Ok(buf)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    write_atomic(path, &to_jsonl(examples)?)
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and a manifest with the
/// generator parameters and file hashes.
pub fn write_splits(dir: &Path, splits: &Splits, params: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = serde_json::Map::new();
    for (name, set) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let bytes = to_jsonl(set)?;
        let file = format!("{name}.jsonl");
        write_atomic(&dir.join(&file), &bytes)?;
        files.insert(file, serde_json::json!({ "examples": set.len(), "sha256": sha256_hex(&bytes) }));
    }
    let manifest = serde_json::json!({ "params": params, "files": files });
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn read_splits(dir: &Path, char_cap: usize) -> Result<Splits> {
    Ok(Splits {
        train: load_jsonl(&dir.join("train.jsonl"), char_cap)?.examples,
        val: load_jsonl(&dir.join("val.jsonl"), char_cap)?.examples,
        test: load_jsonl(&dir.join("test.jsonl"), char_cap)?.examples,
    })
}

/// Renders an example as one token stream in the raw-document prompt layout:
/// `doc_1 SEP … doc_n SEP x SEP y EOS`. No BOS, since generator prompts
/// start directly with the prefix or the instruction.
pub fn render_in_context(docs: &[String], x: &str, y: &str) -> Vec<u32> {
    let mut t = Vec::new();
    for d in docs {
        t.extend(encode(d, false, false));
        t.push(SEP);
    }
    t.extend(encode(x, false, false));
    t.push(SEP);
    t.extend(encode(y, false, false));
    t.push(EOS);
    t
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub skill_users: usize,
    pub knowledge_users: usize,
    pub generic_docs: usize,
    pub max_docs: usize,
    /// Style consistency of the skill users in the corpus.
    pub skill_consistency: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { skill_users: 400, knowledge_users: 200, generic_docs: 3000, max_docs: 4, skill_consistency: 0.9, seed: 0 }
    }
}

/// Token streams for backbone pretraining, drawn from the same grammar and
/// task layouts as the downstream data but from users of their own.
pub fn backbone_corpus(cfg: &CorpusConfig) -> Result<Vec<Vec<u32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let add = |ex: &Example, rng: &mut ChaCha8Rng, out: &mut Vec<Vec<u32>>| {
        let k = rng.random_range(0..=cfg.max_docs.min(ex.docs.len()));
        let mut docs = ex.docs.clone();
        docs.shuffle(rng);
        docs.truncate(k);
        out.push(render_in_context(&docs, &ex.x, &ex.y));
    };
    if cfg.skill_users >= 8 {
        let sc = SkillConfig { n_users: cfg.skill_users, queries_per_user: 4, consistency: cfg.skill_consistency, seed: cfg.seed ^ 0x51, ..Default::default() };
        for ex in gen_skill_dataset(&sc)?.0.all() {
            add(ex, &mut rng, &mut out);
        }
    }
    if cfg.knowledge_users >= 8 {
        let kc = KnowledgeConfig {
            n_users: cfg.knowledge_users,
            docs_per_example: cfg.max_docs.clamp(1, 8),
            seed: cfg.seed ^ 0x4b,
            ..Default::default()
        };
        for ex in gen_knowledge_dataset(&kc)?.0.all() {
            // Keep the relevant document whenever any documents are shown.
            let k = rng.random_range(0..=ex.docs.len());
            let mut docs: Vec<String> = ex.docs.iter().filter(|d| !d.contains(&ex.y)).take(k.saturating_sub(1)).cloned().collect();
            if k > 0 {
                docs.push(ex.docs.iter().find(|d| d.contains(&ex.y)).unwrap().clone());
            }
            docs.shuffle(&mut rng);
            out.push(render_in_context(&docs, &ex.x, &ex.y));
        }
    }
    let generic = gen_generic_corpus(cfg.generic_docs, cfg.seed ^ 0x47);
    for ex in pretrain_examples(&generic, cfg.max_docs, cfg.seed ^ 0x50)? {
        add(&ex, &mut rng, &mut out);
    }
    out.shuffle(&mut rng);
    Ok(out)
}
