use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span_qa::{GoldAnswer, QAExample};

use super::{write_jsonl, write_squad_json};

/// `(type word, opening marker, wh-word)`.
pub const SPAN_TYPES: [(&str, &str, &str); 6] = [
    ("agent", "xa", "who"),
    ("theme", "xb", "what"),
    ("place", "xc", "where"),
    ("time", "xd", "when"),
    ("manner", "xe", "how"),
    ("cause", "xf", "why"),
];

/// Closes every planted span, whatever its type.
pub const CLOSER: &str = "xz";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateFamily {
    /// `what is the <type> <opener> ?`
    Fixed,
    /// One of several phrasings per question.
    Varied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Number of distinct filler words `w0 … w{n-1}`.
    pub vocab_size: usize,
    /// Number of QA pairs to emit.
    pub n_examples: usize,
    /// Inclusive bounds on sentence length in tokens, markers included.
    pub sentence_length: (usize, usize),
    pub templates: TemplateFamily,
    /// Inclusive bounds on the filler run inside a span (markers excluded).
    pub answer_length: (usize, usize),
    pub spans_per_sentence: (usize, usize),
    /// How many of [`SPAN_TYPES`] are in play.
    pub n_types: usize,
}

impl SyntheticSpec {
    pub fn desk(seed: u64, n_examples: usize) -> Self {
        SyntheticSpec {
            seed,
            vocab_size: 40,
            n_examples,
            sentence_length: (10, 16),
            templates: TemplateFamily::Fixed,
            answer_length: (1, 3),
            spans_per_sentence: (2, 3),
            n_types: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (smin, smax) = self.sentence_length;
        let (amin, amax) = self.answer_length;
        let (kmin, kmax) = self.spans_per_sentence;
        if self.vocab_size == 0 {
            return Err(Error::Spec("vocab_size must be ≥ 1".into()));
        }
        if smin > smax || amin > amax || kmin > kmax || amin == 0 || kmin == 0 {
            return Err(Error::Spec("ranges must be non-empty with positive lower bounds".into()));
        }
        if self.n_types == 0 || self.n_types > SPAN_TYPES.len() || kmax > self.n_types {
            return Err(Error::Spec(format!(
                "need 1 ≤ spans_per_sentence ≤ n_types ≤ {}",
                SPAN_TYPES.len()
            )));
        }
        let worst = kmax * (amax + 2);
        if worst > smax {
            return Err(Error::Spec(format!(
                "{kmax} spans of up to {amax} tokens plus markers need {worst} tokens, sentences allow {smax}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggingExample {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub qa: Vec<QAExample>,
    /// BIO view of every generated sentence.
    pub tagging: Vec<TaggingExample>,
}

impl SyntheticCorpus {
    /// Writes `qa.json` (SQuAD format), `qa.jsonl` and `tagging.jsonl`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_squad_json(dir.join("qa.json"), &self.qa)?;
        write_jsonl(dir.join("qa.jsonl"), &self.qa)?;
        write_jsonl(dir.join("tagging.jsonl"), &self.tagging)
    }
}

fn question(ty: usize, family: TemplateFamily, rng: &mut ChaCha8Rng) -> Vec<String> {
    let (word, opener, wh) = SPAN_TYPES[ty];
    let q: Vec<&str> = match family {
        TemplateFamily::Fixed => vec!["what", "is", "the", word, opener, "?"],
        TemplateFamily::Varied => match rng.gen_range(0..4) {
            0 => vec!["what", "is", "the", word, "?"],
            1 => vec![wh, "?"],
            2 => vec!["which", "words", "give", "the", word, "?"],
            _ => vec!["tell", "me", "the", word, "of", "this", "?"],
        },
    };
    q.into_iter().map(String::from).collect()
}

/// Sentences of filler words with planted `opener w… xz` spans; one
/// question per span asks for its type and the answer is the whole span,
/// markers included. Pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut qa = Vec::with_capacity(spec.n_examples);
    let mut tagging = Vec::new();
    let filler = |rng: &mut ChaCha8Rng| format!("w{}", rng.gen_range(0..spec.vocab_size));
    let mut sid = 0;
    while qa.len() < spec.n_examples {
        let k = rng.gen_range(spec.spans_per_sentence.0..=spec.spans_per_sentence.1);
        let mut types: Vec<usize> = (0..spec.n_types).collect();
        types.shuffle(&mut rng);
        types.truncate(k);
        let lens: Vec<usize> = (0..k)
            .map(|_| rng.gen_range(spec.answer_length.0..=spec.answer_length.1))
            .collect();
        let needed: usize = lens.iter().map(|a| a + 2).sum();
        let total = rng.gen_range(spec.sentence_length.0.max(needed)..=spec.sentence_length.1);
        let mut gaps = vec![0usize; k + 1];
        for _ in 0..total - needed {
            gaps[rng.gen_range(0..=k)] += 1;
        }
        let mut tokens = Vec::with_capacity(total);
        let mut tags = Vec::with_capacity(total);
        let mut spans = Vec::with_capacity(k);
        for i in 0..=k {
            for _ in 0..gaps[i] {
                tokens.push(filler(&mut rng));
                tags.push("O".to_string());
            }
            if i == k {
                break;
            }
            let ty = types[i];
            let label = SPAN_TYPES[ty].0.to_uppercase();
            let start = tokens.len();
            tokens.push(SPAN_TYPES[ty].1.to_string());
            tags.push(format!("B-{label}"));
            for _ in 0..lens[i] {
                tokens.push(filler(&mut rng));
                tags.push(format!("I-{label}"));
            }
            tokens.push(CLOSER.to_string());
            tags.push(format!("I-{label}"));
            spans.push((ty, start, tokens.len()));
        }
        for (n, &(ty, start, end)) in spans.iter().enumerate() {
            if qa.len() == spec.n_examples {
                break;
            }
            qa.push(QAExample {
                id: format!("syn{}-{sid:05}-{n}", spec.seed),
                sentence: tokens.clone(),
                question: question(ty, spec.templates, &mut rng),
                answers: vec![GoldAnswer {
                    start,
                    end,
                    text: tokens[start..end].join(" "),
                }],
            });
        }
        tagging.push(TaggingExample { tokens, tags });
        sid += 1;
    }
    Ok(SyntheticCorpus { qa, tagging })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_examples_is_empty() {
        let c = generate_synthetic(&SyntheticSpec::desk(1, 0)).unwrap();
        assert!(c.qa.is_empty() && c.tagging.is_empty());
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic(&SyntheticSpec::desk(7, 64)).unwrap();
        let b = generate_synthetic(&SyntheticSpec::desk(7, 64)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&SyntheticSpec::desk(8, 64)).unwrap());
    }

    #[test]
    fn golds_within_bounds_and_length_range() {
        let spec = SyntheticSpec {
            templates: TemplateFamily::Varied,
            ..SyntheticSpec::desk(3, 200)
        };
        let c = generate_synthetic(&spec).unwrap();
        assert_eq!(c.qa.len(), 200);
        for ex in &c.qa {
            ex.validate().unwrap();
            let a = &ex.answers[0];
            assert!((3..=5).contains(&(a.end - a.start)));
            assert_eq!(ex.sentence[a.end - 1], CLOSER);
            assert!((10..=16).contains(&ex.sentence.len()));
        }
    }

    #[test]
    fn tags_mark_exactly_the_answers() {
        let c = generate_synthetic(&SyntheticSpec::desk(5, 30)).unwrap();
        for t in &c.tagging {
            assert_eq!(t.tokens.len(), t.tags.len());
            for (i, tag) in t.tags.iter().enumerate() {
                let opener = SPAN_TYPES.iter().any(|ty| ty.1 == t.tokens[i]);
                assert_eq!(tag.starts_with("B-"), opener);
                if t.tokens[i] == CLOSER {
                    assert!(tag.starts_with("I-"));
                }
            }
        }
    }

    #[test]
    fn infeasible_spec_rejected() {
        let spec = SyntheticSpec {
            sentence_length: (3, 4),
            ..SyntheticSpec::desk(0, 1)
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Spec(_))));
    }
}
