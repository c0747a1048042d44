//! Synthetic three-label task whose label is a function of token sets.
//!
//! * hypothesis ⊆ premise: entailment
//! * `not` plus tokens ⊆ premise: contradiction
//! * anything else: neutral

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Example;

pub const NEGATION: &str = "not";

pub const TOY_WORDS: [&str; 16] = [
    "cat", "dog", "bird", "fish", "red", "blue", "green", "small", "large", "runs", "sleeps", "eats", "park", "house",
    "river", "tree",
];

const NEUTRAL: usize = 0;
const ENTAILMENT: usize = 1;
const CONTRADICTION: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyCorpus {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl ToyCorpus {
    pub fn labels() -> Vec<String> {
        crate::model::THREE_WAY_LABELS.iter().map(|s| s.to_string()).collect()
    }
}

/// Label index in the three-way set for a premise/hypothesis pair.
pub fn toy_label(premise: &[String], hypothesis: &[String]) -> usize {
    let seen: HashSet<&str> = premise.iter().map(String::as_str).collect();
    let negated = hypothesis.iter().any(|t| t == NEGATION);
    let covered = hypothesis
        .iter()
        .filter(|t| *t != NEGATION)
        .all(|t| seen.contains(t.as_str()));
    match (covered, negated) {
        (true, false) => ENTAILMENT,
        (true, true) => CONTRADICTION,
        _ => NEUTRAL,
    }
}

fn sample(rng: &mut ChaCha8Rng) -> Example {
    let n = rng.random_range(4..=6);
    let premise: Vec<&str> = TOY_WORDS.choose_multiple(rng, n).copied().collect();
    let k = rng.random_range(1..=3);
    let mut hypothesis: Vec<&str> = premise.choose_multiple(rng, k).copied().collect();
    match rng.random_range(0..3) {
        ENTAILMENT => {}
        CONTRADICTION => {
            hypothesis.truncate(2);
            hypothesis.insert(0, NEGATION);
        }
        _ => {
            hypothesis.truncate(rng.random_range(0..=2));
            let novel: Vec<&str> = TOY_WORDS.iter().filter(|w| !premise.contains(w)).copied().collect();
            hypothesis.push(novel.choose(rng).copied().unwrap_or("unseen"));
            hypothesis.shuffle(rng);
        }
    }
    let premise: Vec<String> = premise.into_iter().map(String::from).collect();
    let hypothesis: Vec<String> = hypothesis.into_iter().map(String::from).collect();
    let label = toy_label(&premise, &hypothesis);
    Example::new(premise, hypothesis, label)
}

/// Uniform ±1 vectors for every toy word and the negation token, as
/// `(token, vector)` rows for [`super::write_embeddings`].
pub fn toy_embeddings(dim: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TOY_WORDS
        .iter()
        .chain(std::iter::once(&NEGATION))
        .map(|w| (w.to_string(), (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()))
        .collect()
}

/// `size` examples split 80/10/10. Returns `None` below 30 examples.
pub fn generate_toy_corpus(seed: u64, size: usize) -> Option<ToyCorpus> {
    if size < 30 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<Example> = (0..size).map(|_| sample(&mut rng)).collect();
    let test = all.split_off(size * 9 / 10);
    let valid = all.split_off(size * 8 / 10);
    Some(ToyCorpus {
        train: all,
        valid,
        test,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn rule_examples() {
        let p = words("cat dog park");
        assert_eq!(toy_label(&p, &words("dog cat")), ENTAILMENT);
        assert_eq!(toy_label(&p, &words("not park")), CONTRADICTION);
        assert_eq!(toy_label(&p, &words("dog river")), NEUTRAL);
        assert_eq!(toy_label(&p, &words("not river")), NEUTRAL);
    }

    #[test]
    fn split_sizes() {
        let c = generate_toy_corpus(1, 600).unwrap();
        assert_eq!((c.train.len(), c.valid.len(), c.test.len()), (480, 60, 60));
        let c = generate_toy_corpus(1, 31).unwrap();
        assert_eq!(c.train.len() + c.valid.len() + c.test.len(), 31);
        assert!(generate_toy_corpus(1, 29).is_none());
    }

    #[test]
    fn labels_roughly_balanced() {
        let c = generate_toy_corpus(5, 600).unwrap();
        let mut counts = [0usize; 3];
        for e in c.train.iter().chain(&c.valid).chain(&c.test) {
            counts[e.label] += 1;
        }
        for n in counts {
            let share = n as f64 / 600.0;
            assert!((share - 1.0 / 3.0).abs() <= 0.10, "{counts:?}");
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_toy_corpus(9, 100), generate_toy_corpus(9, 100));
        assert_ne!(generate_toy_corpus(9, 100), generate_toy_corpus(10, 100));
    }

    #[test]
    fn embeddings_cover_corpus_words() {
        let rows = toy_embeddings(5, 3);
        assert_eq!(rows.len(), TOY_WORDS.len() + 1);
        assert!(rows
            .iter()
            .all(|(_, v)| v.len() == 5 && v.iter().all(|x| x.abs() <= 1.0)));
        let c = generate_toy_corpus(3, 200).unwrap();
        for e in c.train.iter().chain(&c.valid).chain(&c.test) {
            for t in e.premise().iter().chain(&e.hypothesis) {
                assert!(rows.iter().any(|(w, _)| w == t), "{t}");
            }
        }
        assert_eq!(rows, toy_embeddings(5, 3));
        assert_ne!(rows, toy_embeddings(5, 4));
    }

    proptest! {
        #[test]
        fn generated_labels_follow_rule(seed in any::<u64>()) {
            let c = generate_toy_corpus(seed, 30).unwrap();
            for e in c.train.iter().chain(&c.valid).chain(&c.test) {
                prop_assert_eq!(e.label, toy_label(&e.premise(), &e.hypothesis));
                prop_assert!(!e.hypothesis.is_empty());
                prop_assert!(!e.premise().iter().any(|t| t == NEGATION));
            }
        }
    }
}
