use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::corpus::Dialogue;
use super::normalize::tokenize;
use crate::error::{Error, Result};

pub type TokenId = usize;

/// Per-utterance token cap.
pub const MAX_UTTERANCE_TOKENS: usize = 64;

const VOCAB_MAGIC: &str = "lctx-vocab";
const VOCAB_VERSION: u32 = 1;

/// Token <-> id bijection with four fixed special ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    pub const PAD: TokenId = 0;
    pub const UNK: TokenId = 1;
    /// Utterance separator; also terminates generated responses.
    pub const SEP: TokenId = 2;
    pub const BOS: TokenId = 3;
    pub const SPECIALS: [&'static str; 4] = ["<pad>", "<unk>", "<sep>", "<bos>"];

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::invalid("vocab", format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    /// Specials first, then tokens with frequency ≥ `min_freq` ordered by
    /// frequency descending and lexicographically within a frequency.
    pub fn build(corpus: &[Dialogue], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty { op: "build_vocab" });
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for d in corpus {
            for u in &d.turns {
                for t in tokenize(&u.text) {
                    *freq.entry(t).or_default() += 1;
                }
            }
        }
        let mut counted: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !Self::SPECIALS.contains(&t.as_str()))
            .collect();
        counted.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = Self::SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(counted.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// FNV-1a over the ordered token list, newline separated.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for t in &self.tokens {
            h.write(t.as_bytes());
            h.write(b"\n");
        }
        h.finish()
    }

    /// Normalized tokens mapped to ids, OOV -> UNK, truncated at `cap`.
    pub fn encode(&self, text: &str, cap: usize) -> Vec<TokenId> {
        tokenize(text)
            .iter()
            .take(cap)
            .map(|t| self.id(t))
            .collect()
    }

    /// Joins tokens with spaces, dropping PAD/BOS and stopping at the first SEP.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .take_while(|&&i| i != Self::SEP)
            .filter(|&&i| i != Self::PAD && i != Self::BOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = format!(
            "{VOCAB_MAGIC} {VOCAB_VERSION} pad={} unk={} sep={} bos={}\n",
            Self::PAD,
            Self::UNK,
            Self::SEP,
            Self::BOS
        );
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = raw.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.first() != Some(&VOCAB_MAGIC) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected `{VOCAB_MAGIC}` header"),
            });
        }
        let version: u32 = fields
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or(Error::Parse {
                line: 1,
                msg: "missing version".into(),
            })?;
        if version != VOCAB_VERSION {
            return Err(Error::Version {
                expected: VOCAB_VERSION,
                found: version,
            });
        }
        let expected = [
            ("pad", Self::PAD),
            ("unk", Self::UNK),
            ("sep", Self::SEP),
            ("bos", Self::BOS),
        ];
        for (name, id) in expected {
            let want = format!("{name}={id}");
            if !fields.contains(&want.as_str()) {
                return Err(Error::Schema {
                    line: 1,
                    msg: format!("special id `{want}` missing or different"),
                });
            }
        }
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        for (i, s) in Self::SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Schema {
                    line: i + 2,
                    msg: format!("expected special token `{s}`"),
                });
            }
        }
        Self::from_tokens(tokens)
    }
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}
