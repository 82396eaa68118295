use std::collections::BTreeMap;

use crate::encoder::split_tokens;
use crate::span_qa::{GoldAnswer, QAExample};

use super::RawQARecord;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignReport {
    /// Answers dropped because no token overlaps them.
    pub dropped: usize,
    /// Ids of answers whose boundaries fall inside a token.
    pub partial: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aligned {
    pub examples: Vec<QAExample>,
    pub report: AlignReport,
}

/// Maps each record's character answer onto the smallest covering token
/// span, merging records that share an id into one multi-answer example.
pub fn align_records(records: &[RawQARecord]) -> Aligned {
    let mut report = AlignReport::default();
    let mut by_id: BTreeMap<&str, (usize, QAExample)> = BTreeMap::new();
    for (order, r) in records.iter().enumerate() {
        let toks = split_tokens(&r.context);
        let a = r.answer_start;
        let b = a + r.answer_text.chars().count();
        let first = toks.iter().position(|t| t.end > a && t.start < b);
        let last = toks.iter().rposition(|t| t.end > a && t.start < b);
        let (Some(first), Some(last)) = (first, last) else {
            report.dropped += 1;
            continue;
        };
        if toks[first].start < a || toks[last].end > b {
            report.partial.push(r.id.clone());
        }
        let answer = GoldAnswer {
            start: first,
            end: last + 1,
            text: r.answer_text.clone(),
        };
        let entry = by_id.entry(r.id.as_str()).or_insert_with(|| {
            (
                order,
                QAExample {
                    id: r.id.clone(),
                    sentence: toks.iter().map(|t| t.text.clone()).collect(),
                    question: split_tokens(&r.question).into_iter().map(|t| t.text).collect(),
                    answers: Vec::new(),
                },
            )
        });
        if !entry.1.answers.contains(&answer) {
            entry.1.answers.push(answer);
        }
    }
    let mut examples: Vec<(usize, QAExample)> = by_id.into_values().collect();
    examples.sort_by_key(|(o, _)| *o);
    Aligned {
        examples: examples.into_iter().map(|(_, e)| e).collect(),
        report,
    }
}
