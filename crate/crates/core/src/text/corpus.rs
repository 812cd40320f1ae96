//! JSON-lines dialogue corpus.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocab, MAX_UTTERANCE_TOKENS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    /// `A` on even 0-based positions, `B` on odd ones.
    pub fn alternate(i: usize) -> Speaker {
        if i % 2 == 0 {
            Speaker::A
        } else {
            Speaker::B
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(skip)]
    pub token_ids: Vec<TokenId>,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Utterance {
            speaker,
            text: text.into(),
            token_ids: Vec::new(),
        }
    }
}

/// Planted long-range dependency. Turn indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub antecedent_turn: usize,
    pub probe_turn: usize,
    pub entity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<Annotation>,
}

impl Dialogue {
    /// 1-based turn access.
    pub fn turn(&self, t: usize) -> &Utterance {
        &self.turns[t - 1]
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Fills `token_ids` of every turn.
    pub fn encode(&mut self, vocab: &Vocab) {
        for u in &mut self.turns {
            u.token_ids = vocab.encode(&u.text, MAX_UTTERANCE_TOKENS);
        }
    }

    fn validate(&self, line: usize) -> Result<()> {
        if self.turns.len() < 2 {
            return Err(Error::Schema {
                line,
                msg: format!("dialogue `{}` has {} turn(s), need at least 2", self.id, self.turns.len()),
            });
        }
        if let Some(i) = self.turns.iter().position(|u| u.text.trim().is_empty()) {
            return Err(Error::Schema {
                line,
                msg: format!("turn {} of `{}` is empty", i + 1, self.id),
            });
        }
        if let Some(a) = &self.annotation {
            if a.antecedent_turn == 0 || a.antecedent_turn >= a.probe_turn || a.probe_turn > self.turns.len() {
                return Err(Error::Schema {
                    line,
                    msg: format!(
                        "annotation turns out of range (antecedent {}, probe {}, {} turns)",
                        a.antecedent_turn,
                        a.probe_turn,
                        self.turns.len()
                    ),
                });
            }
        }
        Ok(())
    }
}

pub fn encode_corpus(corpus: &mut [Dialogue], vocab: &Vocab) {
    for d in corpus {
        d.encode(vocab);
    }
}

pub fn parse_corpus(raw: &str) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let d: Dialogue = serde_json::from_value(value).map_err(|e| Error::Schema {
            line: line_no,
            msg: e.to_string(),
        })?;
        d.validate(line_no)?;
        out.push(d);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Dialogue>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&raw)
}

pub fn save_corpus(corpus: &[Dialogue], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for d in corpus {
        let line = serde_json::to_string(d).expect("dialogue serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
