//! Personal-memory question answering: documents are fact sentences and the
//! answer must be copied from the one relevant document.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{split_users, Example, Splits};
use crate::error::{Error, Result};

pub const SURNAMES: &[&str] = &["Long", "Wang", "Chen", "Zhao", "Liu", "Sun", "Zhou", "Wu", "Xu", "Guo", "Ma", "Hu"];
pub const GIVEN_NAMES: &[&str] = &["Meili", "Li", "Wei", "Fang", "Jun", "Hua", "Lan", "Ming", "Ping", "Qing", "Tao", "Yan"];

/// Relation phrase and the matching question template (`{}` is the subject).
pub const RELATIONS: &[(&str, &str)] = &[
    ("collaborated with", "Who did {} collaborate with?"),
    ("met", "Who did {} meet?"),
    ("admires", "Who does {} admire?"),
    ("lives next to", "Who does {} live next to?"),
    ("studied with", "Who did {} study with?"),
    ("married", "Who did {} marry?"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFact {
    pub user_id: String,
    pub subject: String,
    pub relation: usize,
    pub object: String,
}

impl MemoryFact {
    pub fn sentence(&self) -> String {
        format!("{} {} {}.", self.subject, RELATIONS[self.relation].0, self.object)
    }

    pub fn question(&self) -> String {
        RELATIONS[self.relation].1.replace("{}", &self.subject)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeConfig {
    pub n_users: usize,
    pub facts_per_user: usize,
    pub docs_per_example: usize,
    pub examples_per_user: usize,
    pub seed: u64,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        Self { n_users: 64, facts_per_user: 8, docs_per_example: 4, examples_per_user: 8, seed: 0 }
    }
}

fn user_facts(user_id: &str, n: usize, rng: &mut ChaCha8Rng) -> Vec<MemoryFact> {
    let mut names: Vec<String> =
        SURNAMES.iter().flat_map(|s| GIVEN_NAMES.iter().map(move |g| format!("{s} {g}"))).collect();
    names.shuffle(rng);
    // Every name in a user's memory is distinct, so no distractor can mention the answer.
    (0..n)
        .map(|i| MemoryFact {
            user_id: user_id.to_owned(),
            subject: names[2 * i].clone(),
            relation: rng.random_range(0..RELATIONS.len()),
            object: names[2 * i + 1].clone(),
        })
        .collect()
}

/// Facts, targets and distractors come from separate seeded streams, so
/// datasets differing only in `docs_per_example` ask the same questions.
pub fn gen_knowledge_dataset(cfg: &KnowledgeConfig) -> Result<(Splits, Vec<Vec<MemoryFact>>)> {
    if cfg.n_users < 8 {
        return Err(Error::Config(format!("need at least 8 users, got {}", cfg.n_users)));
    }
    if cfg.docs_per_example == 0 || cfg.docs_per_example > cfg.facts_per_user {
        return Err(Error::Config(format!(
            "docs_per_example {} must lie in 1..={}",
            cfg.docs_per_example, cfg.facts_per_user
        )));
    }
    if 2 * cfg.facts_per_user > SURNAMES.len() * GIVEN_NAMES.len() {
        return Err(Error::Config("not enough distinct names for that many facts".into()));
    }
    let mut fact_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut target_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7461_7267);
    let mut distractor_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6469_7374);
    let mut all_facts = Vec::with_capacity(cfg.n_users);
    let mut examples = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let user_id = format!("know-{:04}", u);
        let facts = user_facts(&user_id, cfg.facts_per_user, &mut fact_rng);
        let mut user_examples = Vec::with_capacity(cfg.examples_per_user);
        for _ in 0..cfg.examples_per_user {
            let t = target_rng.random_range(0..facts.len());
            let target = &facts[t];
            let candidates: Vec<&MemoryFact> =
                facts.iter().enumerate().filter(|&(i, f)| i != t && !f.sentence().contains(&target.object)).map(|(_, f)| f).collect();
            let mut docs: Vec<String> = candidates
                .choose_multiple(&mut distractor_rng, cfg.docs_per_example - 1)
                .map(|f| f.sentence())
                .collect();
            docs.push(target.sentence());
            docs.shuffle(&mut distractor_rng);
            user_examples.push(Example { user_id: user_id.clone(), docs, x: target.question(), y: target.object.clone() });
        }
        all_facts.push(facts);
        examples.push(user_examples);
    }
    let mut order: Vec<usize> = (0..cfg.n_users).collect();
    order.shuffle(&mut fact_rng);
    Ok((split_users(&examples, &order), all_facts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fact_rendering() {
        let f = MemoryFact { user_id: "u".into(), subject: "Long Meili".into(), relation: 0, object: "Wang Li".into() };
        assert_eq!(f.sentence(), "Long Meili collaborated with Wang Li.");
        assert_eq!(f.question(), "Who did Long Meili collaborate with?");
    }

    #[test]
    fn answer_is_in_exactly_one_document() {
        let (s, _) = gen_knowledge_dataset(&KnowledgeConfig { n_users: 10, seed: 5, ..Default::default() }).unwrap();
        for ex in s.all() {
            assert_eq!(ex.docs.len(), 4);
            assert_eq!(ex.docs.iter().filter(|d| d.contains(&ex.y)).count(), 1);
        }
    }

    #[test]
    fn single_document_is_the_relevant_one() {
        let cfg = KnowledgeConfig { n_users: 8, docs_per_example: 1, seed: 9, ..Default::default() };
        let (s, _) = gen_knowledge_dataset(&cfg).unwrap();
        for ex in s.all() {
            assert!(ex.docs[0].contains(&ex.y));
        }
    }

    #[test]
    fn document_count_does_not_change_the_questions() {
        let one = gen_knowledge_dataset(&KnowledgeConfig { docs_per_example: 1, ..Default::default() }).unwrap().0;
        let four = gen_knowledge_dataset(&KnowledgeConfig { docs_per_example: 4, ..Default::default() }).unwrap().0;
        let qa = |s: &Splits| s.all().map(|e| (e.user_id.clone(), e.x.clone(), e.y.clone())).collect::<Vec<_>>();
        assert_eq!(qa(&one), qa(&four));
    }
}
