//! Synthetic unlearning corpus: tokenizer, sample format and generator.

mod dataset;
mod generate;
pub mod tokenizer;

pub use dataset::{Corpus, DocType, Sample, Split, TaskType};
pub use generate::{
    background_samples, generate, successor_cloze, utility_question, CorpusSpec, DocCounts,
    Document, Generated, MAX_UTILITY, TEMPLATE_VARIANTS,
};
pub use tokenizer::{detokenize, tokenize, Example, VOCAB_SIZE};

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::Error;

    #[test]
    fn generation_is_deterministic() {
        let spec = CorpusSpec::default();
        let a = generate(&spec).unwrap().corpus.to_jsonl();
        let b = generate(&spec).unwrap().corpus.to_jsonl();
        assert_eq!(a, b);
        let c = generate(&CorpusSpec { seed: 99, ..spec }).unwrap().corpus.to_jsonl();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_match_spec() {
        let spec = CorpusSpec::default();
        let g = generate(&spec).unwrap();
        for split in [Split::Forget, Split::Retain, Split::Holdout] {
            let counts = spec.counts(split);
            for t in DocType::ALL {
                for task in TaskType::ALL {
                    let n = g
                        .corpus
                        .split(split)
                        .iter()
                        .filter(|s| s.doc_type == t && s.task_type == task)
                        .count();
                    assert_eq!(n, counts.get(t), "{split} {t} {task}");
                }
            }
        }
        assert_eq!(g.corpus.utility().len(), spec.utility);
    }

    #[test]
    fn entities_never_cross_splits() {
        let g = generate(&CorpusSpec::default()).unwrap();
        let forget: HashSet<&str> = g.entities(Split::Forget).into_iter().collect();
        for split in [Split::Retain, Split::Holdout] {
            for e in g.entities(split) {
                assert!(!forget.contains(e), "{e} in forget and {split}");
            }
        }
        // No forget entity string appears in any other split's text.
        for s in g.corpus.samples().iter().filter(|s| s.split != Split::Forget) {
            for e in &forget {
                assert!(!s.input.contains(e) && !s.output.contains(e), "{e} leaks into {}", s.id);
            }
        }
    }

    #[test]
    fn generated_corpus_round_trips() {
        let g = generate(&CorpusSpec::default()).unwrap();
        let text = g.corpus.to_jsonl();
        assert_eq!(Corpus::parse(&text, Some(128)).unwrap(), g.corpus);
    }

    #[test]
    fn exhausting_the_entity_pool_is_a_capacity_error() {
        let spec = CorpusSpec {
            name_pool: 5,
            ..CorpusSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Capacity(_))));
        let spec = CorpusSpec {
            utility: 1000,
            ..CorpusSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Capacity(_))));
    }

    #[test]
    fn utility_items_never_reach_training() {
        let spec = CorpusSpec::default();
        let g = generate(&spec).unwrap();
        let utility: HashSet<String> = g.corpus.utility().iter().map(|s| s.input.clone()).collect();
        assert_eq!(utility.len(), spec.utility);
        let bg = background_samples(999, spec.seed);
        assert_eq!(bg.len(), 999 - MAX_UTILITY);
        assert!(bg.iter().all(|b| !utility.contains(&b.input)));
        let answers: HashSet<&str> = g.corpus.utility().iter().map(|s| s.output.as_str()).collect();
        assert_eq!(answers.len(), spec.utility);
        assert_eq!(successor_cloze(9), ("After 009 comes".to_string(), "010".to_string()));
    }
}
