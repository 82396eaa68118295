use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Token ↔ id map with the four reserved ids fixed at 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { ids, tokens }
    }

    /// Vocabulary over every token of `texts` (after [`split_tokens`]),
    /// ordered by descending frequency, ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in split_tokens(text) {
                *counts.entry(tok.text).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut v = Vocabulary::new();
        for (tok, _) in entries {
            v.add(&tok);
        }
        v
    }

    /// Inserts `token` if absent; returns its id.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: "vocabulary must start with [PAD], [UNK], [CLS], [SEP]".into(),
            });
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("duplicate token {t:?} on line {}", i + 1),
                });
            }
        }
        Ok(Vocabulary { ids, tokens })
    }
}

/// A token with its character span `[start, end)` in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercases, splits on whitespace and detaches every punctuation
/// character as its own token. Offsets count characters, not bytes.
pub fn split_tokens(text: &str) -> Vec<TokenSpan> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut cur_start = 0;
    let flush = |cur: &mut String, start: usize, end: usize, out: &mut Vec<TokenSpan>| {
        if !cur.is_empty() {
            out.push(TokenSpan {
                text: std::mem::take(cur),
                start,
                end,
            });
        }
    };
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            flush(&mut cur, cur_start, i, &mut out);
        } else if is_punct(c) {
            flush(&mut cur, cur_start, i, &mut out);
            out.push(TokenSpan {
                text: c.to_lowercase().collect(),
                start: i,
                end: i + 1,
            });
        } else {
            if cur.is_empty() {
                cur_start = i;
            }
            cur.extend(c.to_lowercase());
        }
    }
    let n = text.chars().count();
    flush(&mut cur, cur_start, n, &mut out);
    out
}

/// Token ids of `text`; unknown tokens map to `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    split_tokens(text).iter().map(|t| vocab.id(&t.text)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_has_no_tokens() {
        assert!(tokenize("", &Vocabulary::new()).is_empty());
    }

    #[test]
    fn punctuation_detached_and_lowercased() {
        let mut v = Vocabulary::new();
        let ids: Vec<usize> = ["the", "dog", "ran", "."].iter().map(|t| v.add(t)).collect();
        assert_eq!(tokenize("The dog ran.", &v), ids);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        assert_eq!(tokenize("zyxqq", &Vocabulary::new()), vec![UNK]);
    }

    #[test]
    fn offsets_are_character_based() {
        let toks = split_tokens("héllo, wörld");
        assert_eq!(toks[0].text, "héllo");
        assert_eq!((toks[1].start, toks[1].end), (5, 6));
        assert_eq!((toks[2].start, toks[2].end), (7, 12));
    }

    #[test]
    fn reserved_ids_fixed() {
        let v = Vocabulary::build(["b a a", "c"]);
        assert_eq!(v.token(PAD), Some("[PAD]"));
        assert_eq!(v.token(SEP), Some("[SEP]"));
        assert_eq!(v.id("a"), 4);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::build(["the red dog ran ."]);
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
