//! Decoder-context construction: relevant-turn selection, history token
//! assembly, the unified context vector and its bag-of-words loss.

use serde::{Deserialize, Serialize};

use crate::encoder::bow_loss;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::Session;
use crate::text::{Dialogue, TokenId, Vocab, MAX_UTTERANCE_TOKENS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Slots filled by relevance.
    pub k: usize,
    /// Most recent turns always kept.
    pub m_last: usize,
    /// Per-utterance token cap.
    pub n_cap: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            k: 2,
            m_last: 2,
            n_cap: MAX_UTTERANCE_TOKENS,
        }
    }
}

impl SelectionConfig {
    pub fn c_max(&self) -> usize {
        self.k + self.m_last
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_max() == 0 {
            return Err(Error::config("selection", "k + m_last must be at least 1"));
        }
        if self.n_cap == 0 {
            return Err(Error::config("selection.n_cap", "must be positive"));
        }
        Ok(())
    }

    /// Upper bound on decoder context rows: every slot filled to the cap,
    /// one separator per slot, plus the summary row.
    pub fn max_context_rows(&self) -> usize {
        self.c_max() * (self.n_cap + 1) + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderContext {
    pub z: Vec<f64>,
    /// Selected 1-based turns, ascending.
    pub selected: Vec<usize>,
    pub y_token_ids: Vec<TokenId>,
}

impl DecoderContext {
    pub fn y_token_count(&self) -> usize {
        self.y_token_ids.len()
    }

    /// Rows fed to the decoder: the summary row plus the history tokens.
    pub fn rows(&self) -> usize {
        self.y_token_count() + 1
    }
}

/// Picks the turns that form the decoder history for relevance vector
/// `alpha` over turns `1..=t`.
///
/// The last `m_last` turns are always kept; the remaining `k` slots go to the
/// highest-relevance earlier turns, ties resolved toward the later turn.
/// When `t ≤ k + m_last` every turn is kept.
pub fn select_relevant(alpha: &[f64], cfg: &SelectionConfig) -> Result<Vec<usize>> {
    let t = alpha.len();
    if t == 0 {
        return Err(Error::Empty { op: "select_relevant" });
    }
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite { op: "select_relevant" });
    }
    if t <= cfg.c_max() {
        return Ok((1..=t).collect());
    }
    let pool_end = t - cfg.m_last; // candidates are 1..=pool_end
    let mut pool: Vec<usize> = (1..=pool_end).collect();
    pool.sort_by(|&a, &b| alpha[b - 1].total_cmp(&alpha[a - 1]).then(b.cmp(&a)));
    let mut selected: Vec<usize> = pool.into_iter().take(cfg.k).collect();
    selected.extend(pool_end + 1..=t);
    selected.sort_unstable();
    Ok(selected)
}

/// Concatenates up to `n_cap` tokens of each selected turn, each followed by SEP.
pub fn assemble_history(selected: &[usize], dialogue: &Dialogue, n_cap: usize) -> Result<Vec<TokenId>> {
    if selected.is_empty() {
        return Err(Error::Empty { op: "assemble_history" });
    }
    let mut out = Vec::new();
    for &t in selected {
        if t == 0 || t > dialogue.len() {
            return Err(Error::invalid(
                "assemble_history",
                format!("turn {t} outside 1..={}", dialogue.len()),
            ));
        }
        let ids = &dialogue.turn(t).token_ids;
        out.extend(ids.iter().take(n_cap));
        out.push(Vocab::SEP);
    }
    Ok(out)
}

/// `Z = LayerNorm(W · [X ; b'] + c)`.
pub fn unify_context(s: &mut Session, x: Var, b_next: Var) -> Result<Var> {
    let (dx, db) = (s.g.value(x).len(), s.g.value(b_next).len());
    let w = s.p("dec.fnn3.w");
    let expect = s.g.value(w).cols();
    if dx + db != expect || dx != db {
        return Err(Error::Shape {
            op: "unify_context",
            expected: vec![expect / 2, expect / 2],
            got: vec![dx, db],
        });
    }
    let cat = s.g.concat(&[x, b_next]);
    let y = s.linear(cat, "dec.fnn3.w", "dec.fnn3.c");
    Ok(s.layer_norm(y, "dec.fnn3.ln_g", "dec.fnn3.ln_b"))
}

/// `C = [Z ; embed(Y)]`: row 0 is `Z` as is, rows 1.. are token embeddings.
pub fn compose_decoder_context(s: &mut Session, z: Var, y: &[TokenId]) -> Result<Var> {
    if y.is_empty() {
        return Err(Error::Empty { op: "compose_decoder_context" });
    }
    let table = s.p("dec.tok");
    if s.g.value(z).len() != s.g.value(table).cols() {
        return Err(Error::Shape {
            op: "compose_decoder_context",
            expected: vec![s.g.value(table).cols()],
            got: vec![s.g.value(z).len()],
        });
    }
    let rows = s.g.gather(table, y);
    Ok(s.g.stack_rows(&[z, rows]))
}

/// Bag-of-words loss of the next utterance conditioned on `Z`.
pub fn decoder_bow_loss(s: &mut Session, z: Var, target: &[TokenId]) -> Result<Var> {
    if target.is_empty() {
        return Err(Error::Empty { op: "decoder_bow_loss" });
    }
    Ok(bow_loss(s, z, target, "dec.bow.w", "dec.bow.c"))
}
