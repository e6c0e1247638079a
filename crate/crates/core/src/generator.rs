//! Frozen-backbone generation: input assembly for ComMer and the
//! prompt-tuning baseline, the masked target loss and greedy decoding.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Segment};
use crate::compressor::Compression;
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Scalar};
use crate::tokenizer::{decode, encode, EOS, SEP};

pub const SOFT_PROMPT_NAME: &str = "soft_prompt";

/// Trainable `m × d_model` prompt of the prompt-tuning baseline.
#[derive(Debug, Clone, Copy)]
pub struct SoftPrompt {
    pub id: ParamId,
    pub m: usize,
}

impl SoftPrompt {
    /// Initializes the rows as copies of randomly chosen token embeddings.
    pub fn init(store: &mut ParamStore<f32>, backbone: &Backbone, m: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        let table = store.get(backbone.token_embedding());
        let (v, d) = (table.shape[0], table.shape[1]);
        let rows: Vec<usize> = if m <= v {
            sample(rng, v, m).into_vec()
        } else {
            (0..m).map(|_| sample(rng, v, 1).index(0)).collect()
        };
        let data = rows.iter().flat_map(|&r| table.data[r * d..(r + 1) * d].to_vec()).collect();
        let id = store.add(SOFT_PROMPT_NAME, vec![m, d], data, true);
        Ok(Self { id, m })
    }

    pub fn bind<F: Scalar>(store: &ParamStore<F>) -> Result<Self> {
        let id = store.find(SOFT_PROMPT_NAME).ok_or_else(|| Error::Config("no soft prompt in store".into()))?;
        Ok(Self { id, m: store.get(id).shape[0] })
    }
}

/// Assembled prompt segments and the prompt length charged to the method.
#[derive(Debug, Clone)]
pub struct GeneratorInput {
    pub segments: Vec<Segment>,
    pub prompt_tokens: usize,
}

/// Instruction tokens: `encode(x)` followed by the separator that precedes the answer.
pub fn instruction_tokens(x: &str) -> Vec<u32> {
    let mut t = encode(x, false, false);
    t.push(SEP);
    t
}

/// Places a stored compression into a graph as a constant block.
pub fn prefix_node<F: Scalar>(g: &mut Graph<F>, c: &Compression) -> NodeId {
    g.constant(vec![c.m, c.d], c.matrix.iter().map(|&v| F::of(v as f64)).collect())
}

fn check_budget<F: Scalar>(g: &Graph<F>, backbone: &Backbone, input: GeneratorInput) -> Result<GeneratorInput> {
    let len = Backbone::sequence_len(g, &input.segments);
    debug_assert_eq!(len, input.prompt_tokens);
    if len > backbone.config.max_positions {
        return Err(Error::contract(format!(
            "prompt of {len} positions exceeds max_positions {}",
            backbone.config.max_positions
        )));
    }
    Ok(input)
}

/// `[merged; encode(x); SEP]`, or just the instruction when no documents are given.
pub fn build_input_commer<F: Scalar>(
    g: &Graph<F>,
    backbone: &Backbone,
    merged: Option<NodeId>,
    x: &str,
) -> Result<GeneratorInput> {
    let instr = instruction_tokens(x);
    let mut segments = Vec::with_capacity(2);
    let mut prompt_tokens = instr.len();
    if let Some(p) = merged {
        prompt_tokens += g.shape(p)[0];
        segments.push(Segment::Soft(p));
    }
    segments.push(Segment::Tokens(instr));
    check_budget(g, backbone, GeneratorInput { segments, prompt_tokens })
}

/// Raw-document tokens of the baseline: `doc_1 SEP … doc_n SEP`.
pub fn baseline_doc_tokens(docs: &[String]) -> Vec<u32> {
    let mut t = Vec::new();
    for d in docs {
        t.extend(encode(d, false, false));
        t.push(SEP);
    }
    t
}

/// `[soft; doc_1 SEP … doc_n SEP x SEP]`.
pub fn build_input_prompt_tuning<F: Scalar>(
    g: &Graph<F>,
    backbone: &Backbone,
    soft: NodeId,
    doc_tokens: &[u32],
    x: &str,
) -> Result<GeneratorInput> {
    let mut tokens = doc_tokens.to_vec();
    tokens.extend(instruction_tokens(x));
    let prompt_tokens = g.shape(soft)[0] + tokens.len();
    check_budget(g, backbone, GeneratorInput { segments: vec![Segment::Soft(soft), Segment::Tokens(tokens)], prompt_tokens })
}

#[derive(Debug, Clone, Copy)]
pub struct LossNode {
    /// Mean NLL over the target positions.
    pub loss: NodeId,
    /// Number of target positions (`|y| + 1` for the closing EOS).
    pub tokens: usize,
}

/// Teacher-forced target loss over `y` and the closing EOS; the prompt
/// positions carry no labels.
pub fn loss<F: Scalar>(
    g: &mut Graph<F>,
    backbone: &Backbone,
    store: &ParamStore<F>,
    input: &GeneratorInput,
    y: &str,
) -> Result<LossNode> {
    if y.is_empty() {
        return Err(Error::contract("empty target"));
    }
    let mut target = encode(y, false, false);
    target.push(EOS);
    let p = input.prompt_tokens;
    let mut segments = input.segments.clone();
    segments.push(Segment::Tokens(target[..target.len() - 1].to_vec()));
    let hidden = backbone.forward_hidden(g, store, &segments, None, None)?;
    // Only the rows that predict target tokens need logits.
    let rows = g.slice(hidden, 0, p - 1, target.len());
    let logits = backbone.logits(g, store, rows);
    let labels: Vec<Option<u32>> = target.iter().map(|&t| Some(t)).collect();
    let loss = g.cross_entropy(logits, &labels);
    Ok(LossNode { loss, tokens: target.len() })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding until EOS or `max_new_tokens`. `build` assembles the
/// prompt in a fresh graph each step.
pub fn decode_greedy<F, B>(backbone: &Backbone, store: &ParamStore<F>, build: B, max_new_tokens: usize) -> Result<String>
where
    F: Scalar,
    B: Fn(&mut Graph<F>) -> Result<GeneratorInput>,
{
    Ok(decode(&decode_greedy_ids(backbone, store, build, max_new_tokens)?)?.text)
}

/// Token ids chosen by [`decode_greedy`], without the closing EOS.
pub fn decode_greedy_ids<F, B>(backbone: &Backbone, store: &ParamStore<F>, build: B, max_new_tokens: usize) -> Result<Vec<u32>>
where
    F: Scalar,
    B: Fn(&mut Graph<F>) -> Result<GeneratorInput>,
{
    if max_new_tokens == 0 {
        return Err(Error::contract("max_new_tokens must be at least 1"));
    }
    let mut out: Vec<u32> = Vec::new();
    for _ in 0..max_new_tokens {
        let mut g = Graph::new();
        let input = build(&mut g)?;
        if input.prompt_tokens + out.len() >= backbone.config.max_positions {
            break;
        }
        let mut segments = input.segments;
        if !out.is_empty() {
            segments.push(Segment::Tokens(out.clone()));
        }
        let hidden = backbone.forward_hidden(&mut g, store, &segments, None, None)?;
        let last = g.shape(hidden)[0] - 1;
        let row = g.slice(hidden, 0, last, 1);
        let logits = backbone.logits(&mut g, store, row);
        g.check()?;
        let next = argmax(g.value(logits)) as u32;
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{tiny_compressor, tiny_frozen};
    use crate::tokenizer::VOCAB_SIZE;
    use rand::SeedableRng;

    fn tokens_of(input: &GeneratorInput) -> Vec<u32> {
        input
            .segments
            .iter()
            .flat_map(|s| match s {
                Segment::Tokens(t) => t.clone(),
                Segment::Soft(_) => Vec::new(),
            })
            .collect()
    }

    #[test]
    fn commer_prompt_length_counts_rows_and_instruction() {
        let fb = tiny_frozen(0);
        let mut g = Graph::<f32>::new();
        let prefix = g.constant(vec![4, 16], vec![0.0; 64]);
        let input = build_input_commer(&g, &fb.backbone, Some(prefix), "0123456789").unwrap();
        // four rows, ten bytes, one separator
        assert_eq!(input.prompt_tokens, 15);
        let bare = build_input_commer(&g, &fb.backbone, None, "0123456789").unwrap();
        assert_eq!(bare.segments.len(), 1);
        assert_eq!(tokens_of(&bare), instruction_tokens("0123456789"));
    }

    #[test]
    fn prompt_tuning_is_longer_than_commer_and_order_sensitive() {
        let fb = tiny_frozen(0);
        let mut g = Graph::<f32>::new();
        let soft = g.constant(vec![4, 16], vec![0.0; 64]);
        let docs = vec!["first".to_string(), "second one".to_string()];
        let x = "Paraphrase: hi";
        let commer = build_input_commer(&g, &fb.backbone, Some(soft), x).unwrap();
        for n in 1..=2 {
            let pt = build_input_prompt_tuning(&g, &fb.backbone, soft, &baseline_doc_tokens(&docs[..n]), x).unwrap();
            assert!(pt.prompt_tokens > commer.prompt_tokens);
        }
        let none = build_input_prompt_tuning(&g, &fb.backbone, soft, &[], x).unwrap();
        assert_eq!(none.prompt_tokens, commer.prompt_tokens);
        let fwd = build_input_prompt_tuning(&g, &fb.backbone, soft, &baseline_doc_tokens(&docs), x).unwrap();
        let rev: Vec<String> = docs.iter().rev().cloned().collect();
        let bwd = build_input_prompt_tuning(&g, &fb.backbone, soft, &baseline_doc_tokens(&rev), x).unwrap();
        assert_eq!(fwd.prompt_tokens, bwd.prompt_tokens);
        assert_ne!(tokens_of(&fwd), tokens_of(&bwd));
    }

    #[test]
    fn over_budget_prompt_is_rejected() {
        let fb = tiny_frozen(0);
        let g = Graph::<f32>::new();
        let x = "y".repeat(300);
        assert!(matches!(build_input_commer(&g, &fb.backbone, None, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn zeroed_head_gives_log_vocab_loss() {
        let fb = tiny_frozen(1);
        let mut store = fb.store.clone();
        store.get_mut(fb.backbone.lm_head()).data.fill(0.0);
        let mut g = Graph::<f32>::new();
        let input = build_input_commer(&g, &fb.backbone, None, "Paraphrase: see you").unwrap();
        let l = loss(&mut g, &fb.backbone, &store, &input, "SEE YOU").unwrap();
        assert_eq!(l.tokens, 8);
        let expected = (VOCAB_SIZE as f64).ln();
        assert!((g.scalar(l.loss) as f64 - expected).abs() < 1e-5);
    }

    /// Full-sequence forward with the logits as a free leaf, scored by an
    /// independent f64 log-softmax.
    #[test]
    fn loss_matches_naive_nll_and_masks_the_prompt() {
        let fb = tiny_frozen(2);
        let (x, y) = ("Paraphrase: hi there", "hi there xoxo");
        let mut g = Graph::<f64>::new();
        let store = fb.store.cast::<f64>();
        let input = build_input_commer(&g, &fb.backbone, None, x).unwrap();
        let l = loss(&mut g, &fb.backbone, &store, &input, y).unwrap();

        let mut full = instruction_tokens(x);
        let p = full.len();
        full.extend(encode(y, false, false));
        full.push(EOS);
        let mut h = Graph::<f64>::new();
        let (_, logits) = fb.backbone.forward(&mut h, &store, &[Segment::Tokens(full[..full.len() - 1].to_vec())], None, None).unwrap();
        let v = VOCAB_SIZE;
        let vals = h.value(logits).to_vec();
        let mut nll = 0.0;
        for r in p - 1..full.len() - 1 {
            let row = &vals[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            nll += lse - row[full[r + 1] as usize];
        }
        let n = (full.len() - p) as f64;
        assert_eq!(l.tokens as f64, n);
        assert!((g.scalar(l.loss) - nll / n).abs() < 1e-6);

        // Labels placed on prompt rows have no effect once masked, and the
        // gradient reaching those rows is exactly zero.
        let mut k = Graph::<f64>::new();
        let leaf = k.leaf(vec![full.len() - 1, v], vals, true);
        let labels: Vec<Option<u32>> = (0..full.len() - 1).map(|r| (r >= p - 1).then(|| full[r + 1])).collect();
        let ce = k.cross_entropy(leaf, &labels);
        assert!((k.scalar(ce) - g.scalar(l.loss)).abs() < 1e-9);
        let grads = k.backward(ce).unwrap();
        let gl = grads.node(leaf).unwrap();
        assert!(gl[..(p - 1) * v].iter().all(|&d| d == 0.0));
        assert!(gl[(p - 1) * v..].iter().any(|&d| d != 0.0));
    }

    #[test]
    fn empty_target_is_rejected() {
        let fb = tiny_frozen(0);
        let mut g = Graph::<f32>::new();
        let input = build_input_commer(&g, &fb.backbone, None, "q").unwrap();
        assert!(loss(&mut g, &fb.backbone, &fb.store, &input, "").is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 5]), 0);
    }

    #[test]
    fn eos_favoring_model_decodes_empty() {
        let fb = tiny_frozen(3);
        let mut store = fb.store.clone();
        // Residual stream pinned to +e_0: only embeddings survive, and the
        // head scores EOS on that direction alone.
        for id in fb.backbone.param_ids() {
            let p = store.get_mut(id);
            if !p.name.ends_with("norm") {
                p.data.fill(0.0);
            }
        }
        let tok = store.get_mut(fb.backbone.token_embedding());
        for r in 0..VOCAB_SIZE {
            tok.data[r * 16] = 1.0;
        }
        store.get_mut(fb.backbone.lm_head()).data[EOS as usize * 16] = 1.0;
        let out = decode_greedy(&fb.backbone, &store, |g| build_input_commer(g, &fb.backbone, None, "anything"), 10).unwrap();
        assert_eq!(out, "");
    }

    #[test]
    fn decode_step_matches_manual_argmax() {
        let (c, store) = tiny_compressor(2, 4);
        let comp = c.compress(&store, "doc").unwrap();
        let build = |g: &mut Graph<f32>| {
            let p = prefix_node(g, &comp);
            build_input_commer(g, &c.backbone, Some(p), "Paraphrase: ok")
        };
        let a = decode_greedy(&c.backbone, &store, build, 6).unwrap();
        assert_eq!(a, decode_greedy(&c.backbone, &store, build, 6).unwrap());

        let mut g = Graph::new();
        let input = build(&mut g).unwrap();
        let (_, logits) = c.backbone.forward(&mut g, &store, &input.segments, None, None).unwrap();
        let rows = g.shape(logits)[0];
        let last = &g.value(logits)[(rows - 1) * VOCAB_SIZE..];
        let first = argmax(last) as u32;
        let one = decode_greedy_ids(&c.backbone, &store, build, 1).unwrap();
        let expected: Vec<u32> = if first == EOS { vec![] } else { vec![first] };
        assert_eq!(one, expected);
        let many = decode_greedy_ids(&c.backbone, &store, build, 6).unwrap();
        assert_eq!(decode(&many).unwrap().text, a);
        assert!(matches!(decode_greedy(&c.backbone, &store, build, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn soft_prompt_rows_come_from_the_table() {
        let fb = tiny_frozen(5);
        let mut store = fb.store.clone();
        let sp = SoftPrompt::init(&mut store, &fb.backbone, 3, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        let table = &store.get(fb.backbone.token_embedding()).data;
        let rows: Vec<&[f32]> = table.chunks(16).collect();
        for r in store.get(sp.id).data.chunks(16) {
            assert!(rows.contains(&r));
        }
        assert!(store.get(sp.id).trainable);
        assert_eq!(SoftPrompt::bind(&store).unwrap().m, 3);
    }
}
