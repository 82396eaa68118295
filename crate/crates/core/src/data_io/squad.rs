use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span_qa::QAExample;

/// One (question, answer) pair; a question with several answers yields
/// several records sharing `id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawQARecord {
    pub id: String,
    pub context: String,
    pub question: String,
    pub answer_text: String,
    /// Character offset of the answer in `context`.
    pub answer_start: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SquadLoad {
    pub records: Vec<RawQARecord>,
    pub skipped_unanswerable: usize,
}

#[derive(Deserialize, Serialize)]
struct File {
    #[serde(default)]
    version: Option<String>,
    data: Vec<Article>,
}

#[derive(Deserialize, Serialize)]
struct Article {
    #[serde(default)]
    title: Option<String>,
    paragraphs: Vec<Paragraph>,
}

#[derive(Deserialize, Serialize)]
struct Paragraph {
    context: String,
    qas: Vec<Qa>,
}

#[derive(Deserialize, Serialize)]
struct Qa {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<Answer>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    is_impossible: bool,
}

#[derive(Deserialize, Serialize)]
struct Answer {
    text: String,
    answer_start: usize,
}

pub fn load_squad_json(path: impl AsRef<Path>) -> Result<SquadLoad> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_squad_json(&text, path)
}

/// Parses SQuAD v1.1 JSON; `path` is only used in error messages.
pub fn parse_squad_json(text: &str, path: &Path) -> Result<SquadLoad> {
    let file: File = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = SquadLoad::default();
    for article in file.data {
        for para in article.paragraphs {
            let chars: Vec<char> = para.context.chars().collect();
            for qa in para.qas {
                if qa.is_impossible || qa.answers.is_empty() {
                    out.skipped_unanswerable += 1;
                    continue;
                }
                for a in qa.answers {
                    let n = a.text.chars().count();
                    let found: String = chars.iter().skip(a.answer_start).take(n).collect();
                    if a.answer_start + n > chars.len() || found != a.text {
                        return Err(Error::Integrity {
                            id: qa.id.clone(),
                            message: format!(
                                "answer {:?} not found at offset {} (context has {found:?})",
                                a.text, a.answer_start
                            ),
                        });
                    }
                    out.records.push(RawQARecord {
                        id: qa.id.clone(),
                        context: para.context.clone(),
                        question: qa.question.clone(),
                        answer_text: a.text,
                        answer_start: a.answer_start,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Writes tokenized examples back as SQuAD JSON, one paragraph per
/// example; the context is the tokens joined by single spaces.
pub fn write_squad_json(path: impl AsRef<Path>, examples: &[QAExample]) -> Result<()> {
    let path = path.as_ref();
    let paragraphs = examples
        .iter()
        .map(|ex| {
            let mut offsets = Vec::with_capacity(ex.sentence.len());
            let mut pos = 0;
            for t in &ex.sentence {
                offsets.push(pos);
                pos += t.chars().count() + 1;
            }
            let answers = ex
                .answers
                .iter()
                .map(|a| Answer {
                    text: ex.sentence[a.start..a.end].join(" "),
                    answer_start: offsets[a.start],
                })
                .collect();
            Paragraph {
                context: ex.sentence.join(" "),
                qas: vec![Qa {
                    id: ex.id.clone(),
                    question: ex.question.join(" "),
                    answers,
                    is_impossible: false,
                }],
            }
        })
        .collect();
    let file = File {
        version: Some("1.1".into()),
        data: vec![Article {
            title: None,
            paragraphs,
        }],
    };
    let json = serde_json::to_string(&file).expect("serializable");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{"data":[{"paragraphs":[{"context":"the red dog ran","qas":[{"id":"q1","question":"what ran?","answers":[{"text":"red dog","answer_start":4}]}]}]}]}"#;

    #[test]
    fn minimal_file_gives_one_record() {
        let l = parse_squad_json(ONE, Path::new("x.json")).unwrap();
        assert_eq!(l.records.len(), 1);
        assert_eq!(l.records[0].answer_text, "red dog");
    }

    #[test]
    fn wrong_offset_is_integrity_error() {
        let bad = ONE.replace("\"answer_start\":4", "\"answer_start\":5");
        match parse_squad_json(&bad, Path::new("x.json")) {
            Err(Error::Integrity { id, .. }) => assert_eq!(id, "q1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_parse_error_with_path() {
        match parse_squad_json("{", Path::new("broken.json")) {
            Err(Error::Parse { path, .. }) => assert_eq!(path, Path::new("broken.json")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unanswerable_skipped() {
        let t = r#"{"data":[{"paragraphs":[{"context":"a b","qas":[{"id":"q","question":"?","answers":[],"is_impossible":true}]}]}]}"#;
        let l = parse_squad_json(t, Path::new("x")).unwrap();
        assert!(l.records.is_empty());
        assert_eq!(l.skipped_unanswerable, 1);
    }
}
