//! Personalized-style task: every user rewrites sentences with one string
//! transform, and their documents reveal it only statistically.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{is_base_sentence, sentence, vowel_free_sentence};
use super::{split_users, Example, Splits};
use crate::error::{Error, Result};

pub const SIGNATURES: &[&str] = &["xoxo", "lol", "cheers", "peace", "yo", "ok"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Uppercase,
    WordReversal,
    SuffixSignature,
    VowelDoubling,
    LeetSubstitution,
}

impl Family {
    pub const ALL: [Family; 5] =
        [Family::Uppercase, Family::WordReversal, Family::SuffixSignature, Family::VowelDoubling, Family::LeetSubstitution];
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyleSpec {
    pub family: Family,
    /// Signature word for [`Family::SuffixSignature`], empty otherwise.
    #[serde(default)]
    pub signature: String,
}

fn leet(c: char) -> char {
    match c {
        'a' => '4',
        'e' => '3',
        'i' => '1',
        'o' => '0',
        c => c,
    }
}

fn unleet(c: char) -> char {
    match c {
        '4' => 'a',
        '3' => 'e',
        '1' => 'i',
        '0' => 'o',
        c => c,
    }
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

impl StyleSpec {
    pub fn new(family: Family, signature: &str) -> Self {
        let signature = if family == Family::SuffixSignature { signature.to_owned() } else { String::new() };
        Self { family, signature }
    }

    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let family = *Family::ALL.choose(rng).unwrap();
        Self::new(family, SIGNATURES.choose(rng).unwrap())
    }

    pub fn apply(&self, s: &str) -> String {
        match self.family {
            Family::Uppercase => s.to_uppercase(),
            Family::WordReversal => s.split(' ').rev().collect::<Vec<_>>().join(" "),
            Family::SuffixSignature => format!("{s} {}", self.signature),
            Family::VowelDoubling => s.chars().flat_map(|c| if is_vowel(c) { vec![c, c] } else { vec![c] }).collect(),
            Family::LeetSubstitution => s.chars().map(leet).collect(),
        }
    }

    /// A base sentence this style maps onto `styled`, if one exists.
    fn invert(&self, styled: &str) -> Option<String> {
        let plain = match self.family {
            Family::Uppercase => styled.to_lowercase(),
            Family::WordReversal => styled.split(' ').rev().collect::<Vec<_>>().join(" "),
            Family::SuffixSignature => styled.strip_suffix(&format!(" {}", self.signature))?.to_owned(),
            Family::VowelDoubling => {
                let mut out = String::new();
                let mut it = styled.chars().peekable();
                while let Some(c) = it.next() {
                    if is_vowel(c) && it.peek() == Some(&c) {
                        it.next();
                    }
                    out.push(c);
                }
                out
            }
            Family::LeetSubstitution => styled.chars().map(unleet).collect(),
        };
        (is_base_sentence(&plain) && self.apply(&plain) == styled).then_some(plain)
    }
}

/// Every style (family plus signature) able to produce `styled` from some base sentence.
pub fn consistent_styles(styled: &str) -> Vec<StyleSpec> {
    let mut out = Vec::new();
    for f in Family::ALL {
        if f == Family::SuffixSignature {
            for sig in SIGNATURES {
                let s = StyleSpec::new(f, sig);
                if s.invert(styled).is_some() {
                    out.push(s);
                }
            }
        } else {
            let s = StyleSpec::new(f, "");
            if s.invert(styled).is_some() {
                out.push(s);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillConfig {
    pub n_users: usize,
    pub docs_per_user: usize,
    pub queries_per_user: usize,
    /// Probability that a document is written in the user's own style.
    pub consistency: f64,
    /// Probability that a document's base sentence uses only vowel-free words.
    pub collision_rate: f64,
    pub seed: u64,
}

impl Default for SkillConfig {
    fn default() -> Self {
        Self { n_users: 64, docs_per_user: 8, queries_per_user: 8, consistency: 0.6, collision_rate: 0.25, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SkillUser {
    pub user_id: String,
    pub style: StyleSpec,
}

pub const INSTRUCTION_PREFIX: &str = "Paraphrase: ";

/// Styled utterances and paraphrase queries per user, split by user.
pub fn gen_skill_dataset(cfg: &SkillConfig) -> Result<(Splits, Vec<SkillUser>)> {
    if cfg.n_users < 8 {
        return Err(Error::Config(format!("need at least 8 users, got {}", cfg.n_users)));
    }
    if cfg.docs_per_user == 0 || cfg.queries_per_user == 0 {
        return Err(Error::Config("docs_per_user and queries_per_user must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.consistency) || !(0.0..=1.0).contains(&cfg.collision_rate) {
        return Err(Error::Config("probabilities must lie in [0,1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut users = Vec::with_capacity(cfg.n_users);
    let mut examples = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let user_id = format!("skill-{:04}", u);
        let style = StyleSpec::random(&mut rng);
        let mut docs = Vec::with_capacity(cfg.docs_per_user);
        for _ in 0..cfg.docs_per_user {
            let base = if rng.random_bool(cfg.collision_rate) { vowel_free_sentence(&mut rng) } else { sentence(&mut rng) };
            let doc_style = if rng.random_bool(cfg.consistency) {
                style.clone()
            } else {
                let others: Vec<Family> = Family::ALL.into_iter().filter(|&f| f != style.family).collect();
                StyleSpec::new(*others.choose(&mut rng).unwrap(), SIGNATURES.choose(&mut rng).unwrap())
            };
            docs.push(doc_style.apply(&base));
        }
        let mut user_examples = Vec::with_capacity(cfg.queries_per_user);
        for _ in 0..cfg.queries_per_user {
            let plain = sentence(&mut rng);
            user_examples.push(Example {
                user_id: user_id.clone(),
                docs: docs.clone(),
                x: format!("{INSTRUCTION_PREFIX}{plain}"),
                y: style.apply(&plain),
            });
        }
        users.push(SkillUser { user_id, style });
        examples.push(user_examples);
    }
    let mut order: Vec<usize> = (0..cfg.n_users).collect();
    order.shuffle(&mut rng);
    Ok((split_users(&examples, &order), users))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CollisionAudit {
    pub docs: usize,
    /// Documents consistent with more than one style family.
    pub ambiguous: usize,
    /// Unordered family pairs that coincide on at least one document.
    pub colliding_pairs: BTreeSet<(Family, Family)>,
}

impl CollisionAudit {
    pub fn colliding_families(&self) -> BTreeSet<Family> {
        self.colliding_pairs.iter().flat_map(|&(a, b)| [a, b]).collect()
    }
}

/// Counts documents whose style cannot be read off the document alone.
pub fn collision_audit<'a>(docs: impl IntoIterator<Item = &'a str>) -> CollisionAudit {
    let mut audit = CollisionAudit::default();
    for d in docs {
        audit.docs += 1;
        let fams: BTreeSet<Family> = consistent_styles(d).into_iter().map(|s| s.family).collect();
        if fams.len() > 1 {
            audit.ambiguous += 1;
            let v: Vec<Family> = fams.into_iter().collect();
            for i in 0..v.len() {
                for j in i + 1..v.len() {
                    audit.colliding_pairs.insert((v[i], v[j]));
                }
            }
        }
    }
    audit
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transforms_render_as_documented() {
        let s = "i need a new song";
        assert_eq!(StyleSpec::new(Family::Uppercase, "").apply(s), "I NEED A NEW SONG");
        assert_eq!(StyleSpec::new(Family::WordReversal, "").apply(s), "song new a need i");
        assert_eq!(StyleSpec::new(Family::SuffixSignature, "lol").apply(s), "i need a new song lol");
        assert_eq!(StyleSpec::new(Family::VowelDoubling, "").apply(s), "ii neeeed aa neew soong");
        assert_eq!(StyleSpec::new(Family::LeetSubstitution, "").apply(s), "1 n33d 4 n3w s0ng");
    }

    #[test]
    fn inversion_recovers_the_base_sentence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let style = StyleSpec::random(&mut rng);
            let plain = sentence(&mut rng);
            assert_eq!(style.invert(&style.apply(&plain)).as_deref(), Some(plain.as_str()));
        }
    }

    #[test]
    fn vowel_free_documents_are_ambiguous() {
        let styles = consistent_styles("why try my gym");
        let fams: BTreeSet<Family> = styles.iter().map(|s| s.family).collect();
        assert!(fams.contains(&Family::VowelDoubling) && fams.contains(&Family::LeetSubstitution));
        assert_eq!(consistent_styles("I NEED A NEW SONG").len(), 1);
    }

    #[test]
    fn targets_follow_the_user_style() {
        let (splits, users) = gen_skill_dataset(&SkillConfig { n_users: 16, seed: 3, ..Default::default() }).unwrap();
        for ex in splits.all() {
            let u = users.iter().find(|u| u.user_id == ex.user_id).unwrap();
            let plain = ex.x.strip_prefix(INSTRUCTION_PREFIX).unwrap();
            assert_eq!(ex.y, u.style.apply(plain));
        }
    }

    #[test]
    fn too_few_users_is_a_config_error() {
        assert!(gen_skill_dataset(&SkillConfig { n_users: 7, ..Default::default() }).is_err());
    }
}
