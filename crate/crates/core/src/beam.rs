//! Beam search and greedy decoding over any next-token model.
//!
//! Scoring: a finished hypothesis of `n` generated tokens (the closing SEP
//! included) with total log-probability `lp` scores `lp / n^length_penalty`.
//! At every step all expansions of the alive hypotheses are ranked and the top
//! `beam_width` kept; kept SEP expansions become finished, the rest stay
//! alive. Hypotheses reaching `max_len` without SEP are finished as they are.
//! SEP is unavailable until it would be at least the `min_len`-th token.
//! Ties on score go to the lexicographically smaller token sequence.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub beam_width: usize,
    pub max_len: usize,
    pub min_len: usize,
    pub length_penalty: f64,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            beam_width: 5,
            max_len: 40,
            min_len: 11,
            length_penalty: 0.1,
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::config("generation.beam_width", "must be at least 1"));
        }
        if self.min_len == 0 {
            return Err(Error::config("generation.min_len", "must be at least 1"));
        }
        if self.max_len < self.min_len {
            return Err(Error::config("generation.max_len", "must be ≥ min_len"));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::config("generation.length_penalty", "must be finite"));
        }
        Ok(())
    }

    /// Normalized score of a finished hypothesis.
    pub fn score(&self, logprob: f64, len: usize) -> f64 {
        logprob / (len as f64).powf(self.length_penalty)
    }

    /// Whether SEP may be generated as token number `len + 1`.
    pub fn sep_allowed(&self, len: usize) -> bool {
        len + 1 >= self.min_len
    }
}

/// Autoregressive scorer. `start` gives the state after the conditioning
/// context together with log-probabilities of the first token; `extend` feeds
/// one more token.
pub trait NextTokenModel {
    type State: Clone;

    fn start(&self) -> Result<(Self::State, Vec<f64>)>;

    fn extend(&self, state: &Self::State, token: TokenId) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, without the closing SEP.
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
    /// Length used for scoring (SEP counted when present).
    pub len: usize,
    pub score: f64,
}

struct Alive<S> {
    tokens: Vec<TokenId>,
    logprob: f64,
    state: S,
    next: Vec<f64>,
}

fn rank(a_score: f64, a_toks: &[TokenId], b_score: f64, b_toks: &[TokenId]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_toks.cmp(b_toks))
}

fn best(finished: Vec<Hypothesis>) -> Result<Hypothesis> {
    finished
        .into_iter()
        .min_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens))
        .ok_or_else(|| Error::invalid("beam_generate", "no finite-probability hypothesis"))
}

/// Every hypothesis the search finished, in completion order.
pub fn beam_search_all<M: NextTokenModel>(model: &M, params: &GenerationParams) -> Result<Vec<Hypothesis>> {
    params.validate()?;
    let (state, next) = model.start()?;
    let mut alive = vec![Alive {
        tokens: Vec::new(),
        logprob: 0.0,
        state,
        next,
    }];
    let mut finished = Vec::new();

    for step in 0..params.max_len {
        if alive.is_empty() {
            break;
        }
        // (parent, token, cumulative logprob)
        let mut cands: Vec<(usize, TokenId, f64)> = Vec::new();
        for (i, h) in alive.iter().enumerate() {
            for (tok, &lp) in h.next.iter().enumerate() {
                if tok == Vocab::SEP && !params.sep_allowed(step) {
                    continue;
                }
                if lp.is_finite() {
                    cands.push((i, tok, h.logprob + lp));
                }
            }
        }
        let key = |&(i, tok, _): &(usize, TokenId, f64)| {
            let mut k = alive[i].tokens.clone();
            k.push(tok);
            k
        };
        cands.sort_by(|a, b| rank(a.2, &key(a), b.2, &key(b)));
        cands.truncate(params.beam_width);

        let mut next_alive = Vec::with_capacity(cands.len());
        for (i, tok, lp) in cands {
            let parent = &alive[i];
            if tok == Vocab::SEP {
                finished.push(Hypothesis {
                    tokens: parent.tokens.clone(),
                    logprob: lp,
                    len: step + 1,
                    score: params.score(lp, step + 1),
                });
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            if step + 1 == params.max_len {
                finished.push(Hypothesis {
                    score: params.score(lp, tokens.len()),
                    len: tokens.len(),
                    tokens,
                    logprob: lp,
                });
                continue;
            }
            let (state, next) = model.extend(&parent.state, tok)?;
            next_alive.push(Alive {
                tokens,
                logprob: lp,
                state,
                next,
            });
        }
        alive = next_alive;
    }
    Ok(finished)
}

pub fn beam_generate<M: NextTokenModel>(model: &M, params: &GenerationParams) -> Result<Hypothesis> {
    best(beam_search_all(model, params)?)
}

/// Argmax decoding (lowest id on ties) under the same length constraints.
pub fn greedy<M: NextTokenModel>(model: &M, params: &GenerationParams) -> Result<Hypothesis> {
    params.validate()?;
    let (mut state, mut next) = model.start()?;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    for step in 0..params.max_len {
        let mut pick: Option<(TokenId, f64)> = None;
        for (tok, &lp) in next.iter().enumerate() {
            if (tok == Vocab::SEP && !params.sep_allowed(step)) || !lp.is_finite() {
                continue;
            }
            if pick.is_none_or(|(_, b)| lp > b) {
                pick = Some((tok, lp));
            }
        }
        let (tok, lp) = pick.ok_or_else(|| Error::invalid("greedy", "no finite-probability token"))?;
        logprob += lp;
        if tok == Vocab::SEP {
            return Ok(Hypothesis {
                tokens,
                logprob,
                len: step + 1,
                score: params.score(logprob, step + 1),
            });
        }
        tokens.push(tok);
        if step + 1 < params.max_len {
            (state, next) = model.extend(&state, tok)?;
        }
    }
    Ok(Hypothesis {
        len: tokens.len(),
        score: params.score(logprob, tokens.len()),
        tokens,
        logprob,
    })
}

/// Scores every admissible sequence up to `max_len` and returns the best one.
/// Exponential; meant for tiny vocabularies.
pub fn exhaustive<M: NextTokenModel>(model: &M, params: &GenerationParams) -> Result<Hypothesis> {
    fn walk<M: NextTokenModel>(
        model: &M,
        params: &GenerationParams,
        state: &M::State,
        next: &[f64],
        tokens: &mut Vec<TokenId>,
        logprob: f64,
        out: &mut Vec<Hypothesis>,
    ) -> Result<()> {
        let step = tokens.len();
        for (tok, &lp) in next.iter().enumerate() {
            if !lp.is_finite() {
                continue;
            }
            let total = logprob + lp;
            if tok == Vocab::SEP {
                if params.sep_allowed(step) {
                    out.push(Hypothesis {
                        tokens: tokens.clone(),
                        logprob: total,
                        len: step + 1,
                        score: params.score(total, step + 1),
                    });
                }
                continue;
            }
            tokens.push(tok);
            if step + 1 == params.max_len {
                out.push(Hypothesis {
                    tokens: tokens.clone(),
                    logprob: total,
                    len: step + 1,
                    score: params.score(total, step + 1),
                });
            } else {
                let (s, n) = model.extend(state, tok)?;
                walk(model, params, &s, &n, tokens, total, out)?;
            }
            tokens.pop();
        }
        Ok(())
    }
    params.validate()?;
    let (state, next) = model.start()?;
    let mut out = Vec::new();
    walk(model, params, &state, &next, &mut Vec::new(), 0.0, &mut out)?;
    best(out)
}

/// Small table-driven model for tests and demos: the next-token distribution
/// depends on the last token only (the start distribution on none).
#[derive(Debug, Clone, PartialEq)]
pub struct BigramModel {
    pub start: Vec<f64>,
    /// `table[prev]` is the next-token log-probability row after `prev`.
    pub table: Vec<Vec<f64>>,
}

impl BigramModel {
    /// Builds log-probabilities from unnormalized logits.
    pub fn from_logits(start: &[f64], table: &[Vec<f64>]) -> Result<Self> {
        Ok(BigramModel {
            start: crate::tensor::log_softmax(start)?,
            table: table
                .iter()
                .map(|r| crate::tensor::log_softmax(r))
                .collect::<Result<_>>()?,
        })
    }
}

impl NextTokenModel for BigramModel {
    type State = TokenId;

    fn start(&self) -> Result<(TokenId, Vec<f64>)> {
        Ok((usize::MAX, self.start.clone()))
    }

    fn extend(&self, _state: &TokenId, token: TokenId) -> Result<(TokenId, Vec<f64>)> {
        let row = self
            .table
            .get(token)
            .ok_or_else(|| Error::invalid("BigramModel", format!("token {token} out of range")))?;
        Ok((token, row.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn random_model(v: usize, seed: u64, spread: f64) -> BigramModel {
        let mut rng = Rng::new(seed);
        let mut row = || (0..v).map(|_| rng.uniform(-spread, spread)).collect::<Vec<_>>();
        let start = row();
        let table: Vec<Vec<f64>> = (0..v).map(|_| row()).collect();
        BigramModel::from_logits(&start, &table).unwrap()
    }

    /// Full-prefix model so hypotheses sharing a last token still differ.
    struct PrefixHash {
        v: usize,
        seed: u64,
    }

    impl NextTokenModel for PrefixHash {
        type State = Vec<TokenId>;
        fn start(&self) -> Result<(Vec<TokenId>, Vec<f64>)> {
            Ok((Vec::new(), self.row(&[])))
        }
        fn extend(&self, s: &Vec<TokenId>, t: TokenId) -> Result<(Vec<TokenId>, Vec<f64>)> {
            let mut p = s.clone();
            p.push(t);
            let r = self.row(&p);
            Ok((p, r))
        }
    }

    impl PrefixHash {
        fn row(&self, prefix: &[TokenId]) -> Vec<f64> {
            let mut h = crate::text::vocab::Fnv64::new();
            h.write(&self.seed.to_le_bytes());
            for &t in prefix {
                h.write(&(t as u64).to_le_bytes());
            }
            let mut rng = Rng::new(h.finish());
            let logits: Vec<f64> = (0..self.v).map(|_| rng.uniform(-2.0, 2.0)).collect();
            crate::tensor::log_softmax(&logits).unwrap()
        }
    }

    fn params(w: usize, min: usize, max: usize) -> GenerationParams {
        GenerationParams {
            beam_width: w,
            max_len: max,
            min_len: min,
            length_penalty: 0.1,
            seed: 0,
        }
    }

    #[test]
    fn wide_beam_equals_exhaustive() {
        for seed in 0..20 {
            let m = PrefixHash { v: 5, seed };
            for min in 1..=3 {
                let p = params(5usize.pow(4), min, 4);
                assert_eq!(beam_generate(&m, &p).unwrap(), exhaustive(&m, &p).unwrap(), "seed {seed}");
            }
        }
    }

    #[test]
    fn width_one_is_greedy() {
        for seed in 0..30 {
            let m = random_model(6, seed, 3.0);
            for min in [1, 2, 5] {
                let p = params(1, min, 9);
                let b = beam_generate(&m, &p).unwrap();
                let g = greedy(&m, &p).unwrap();
                assert_eq!(b.tokens, g.tokens);
                assert!((b.logprob - g.logprob).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sep_masked_before_min_len() {
        // SEP is overwhelmingly likely everywhere
        let mut start = vec![0.0; 5];
        start[Vocab::SEP] = 20.0;
        let table = vec![start.clone(); 5];
        let m = BigramModel::from_logits(&start, &table).unwrap();
        for min in 1..=6 {
            let h = beam_generate(&m, &params(3, min, 8)).unwrap();
            assert_eq!(h.len, min);
            assert_eq!(h.tokens.len(), min - 1);
            assert!(!h.tokens.contains(&Vocab::SEP));
        }
    }

    #[test]
    fn forced_stop_at_max_len() {
        let mut start = vec![0.0; 5];
        start[Vocab::SEP] = -30.0;
        let table = vec![start.clone(); 5];
        let m = BigramModel::from_logits(&start, &table).unwrap();
        let h = beam_generate(&m, &params(2, 1, 6)).unwrap();
        assert_eq!(h.tokens.len(), 6);
        assert_eq!(h.len, 6);
    }

    #[test]
    fn ties_go_to_lower_ids() {
        let m = BigramModel::from_logits(&[0.0; 5], &vec![vec![0.0; 5]; 5]).unwrap();
        let h = beam_generate(&m, &params(3, 4, 4)).unwrap();
        // [0,0,0]+SEP and [0,0,0,0] tie on score; the shorter sequence sorts first
        assert_eq!(h.tokens, vec![0, 0, 0]);
        assert_eq!(h.len, 4);
        // greedy prefers token 0 over SEP (id 2) at the last step
        let g = greedy(&m, &params(1, 4, 4)).unwrap();
        assert_eq!(g.tokens, vec![0, 0, 0, 0]);
        assert_eq!(beam_generate(&m, &params(1, 4, 4)).unwrap().tokens, g.tokens);
    }

    #[test]
    fn score_rule() {
        let p = params(1, 1, 4);
        assert!((p.score(-4.0, 1) + 4.0).abs() < 1e-15);
        assert!((p.score(-4.0, 4) + 4.0 / 4f64.powf(0.1)).abs() < 1e-15);
        let p0 = GenerationParams { length_penalty: 0.0, ..p };
        assert_eq!(p0.score(-3.5, 7), -3.5);
    }

    #[test]
    fn invalid_params_rejected() {
        let m = random_model(5, 0, 1.0);
        assert!(beam_generate(&m, &params(0, 1, 4)).is_err());
        assert!(beam_generate(&m, &params(2, 5, 4)).is_err());
        assert!(beam_generate(&m, &params(2, 0, 4)).is_err());
    }

    proptest! {
        #[test]
        fn no_early_sep_for_any_model(seed in 0u64..10_000, min in 1usize..8, w in 1usize..6) {
            let m = random_model(5, seed, 4.0);
            let p = params(w, min, 10);
            for h in beam_search_all(&m, &p).unwrap() {
                prop_assert!(h.len >= min);
                prop_assert!(!h.tokens.contains(&Vocab::SEP));
            }
        }

        #[test]
        fn beam_never_worse_than_greedy_score_at_full_width(seed in 0u64..10_000) {
            let m = PrefixHash { v: 4, seed };
            let p = params(64, 2, 3);
            let b = beam_generate(&m, &p).unwrap();
            let g = greedy(&m, &p).unwrap();
            prop_assert!(b.score >= g.score - 1e-12);
        }
    }
}
