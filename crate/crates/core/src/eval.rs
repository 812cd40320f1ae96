//! Corpus evaluation: generation metrics, decoder-context budget and
//! recovery of planted antecedents from relevance scores.

use serde::{Deserialize, Serialize};

use crate::beam::{beam_generate, GenerationParams, Hypothesis};
use crate::composer::{assemble_history, select_relevant, SelectionConfig};
use crate::decoder::Decoder;
use crate::encoder::{Encoder, EncoderState, RelevanceResult};
use crate::error::{Error, Result};
use crate::metrics::{bleu, distinct, entropy, nist, split, Tokens};
use crate::tensor::Rng;
use crate::text::{normalize_output, Dialogue, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub nist_2: f64,
    pub nist_4: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub entropy_4: f64,
}

impl GenerationMetrics {
    pub fn compute(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<Self> {
        let m = GenerationMetrics {
            bleu_1: bleu(candidates, references, 1)?,
            bleu_2: bleu(candidates, references, 2)?,
            bleu_3: bleu(candidates, references, 3)?,
            bleu_4: bleu(candidates, references, 4)?,
            nist_2: nist(candidates, references, 2)?,
            nist_4: nist(candidates, references, 4)?,
            distinct_1: distinct(candidates, 1)?,
            distinct_2: distinct(candidates, 2)?,
            entropy_4: match entropy(candidates, 4) {
                Ok(h) => h,
                // short responses only: report zero rather than fail the run
                Err(Error::Invalid { .. }) => {
                    log::warn!("no 4-grams among the candidates; entropy_4 reported as 0");
                    0.0
                }
                Err(e) => return Err(e),
            },
        };
        let all = [
            m.bleu_1, m.bleu_2, m.bleu_3, m.bleu_4, m.nist_2, m.nist_4, m.distinct_1, m.distinct_2, m.entropy_4,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "evaluate" });
        }
        Ok(m)
    }

    /// Same as [`compute`](Self::compute) on raw strings, normalized first.
    pub fn from_text(candidates: &[String], references: &[Vec<String>]) -> Result<Self> {
        let c: Vec<Tokens> = candidates.iter().map(|s| split(&normalize_output(s))).collect();
        let r: Vec<Vec<Tokens>> = references
            .iter()
            .map(|set| set.iter().map(|s| split(&normalize_output(s))).collect())
            .collect();
        Self::compute(&c, &r)
    }
}

// ---- relevance recovery ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceStats {
    pub k: usize,
    pub m_last: usize,
    pub probes: usize,
    pub hits: usize,
    pub hit_rate: f64,
    /// Mean reciprocal alpha-rank of the antecedent.
    pub mrr: f64,
}

/// 1-based rank of `turn` when turns are ordered by descending alpha, ties
/// going to the later turn (the same order selection uses).
pub fn alpha_rank(alpha: &[f64], turn: usize) -> Result<usize> {
    if turn == 0 || turn > alpha.len() {
        return Err(Error::invalid(
            "alpha_rank",
            format!("turn {turn} outside 1..={}", alpha.len()),
        ));
    }
    let a = alpha[turn - 1];
    let ahead = alpha
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > a || (v == a && j + 1 > turn))
        .count();
    Ok(ahead + 1)
}

/// Scores `(alpha at the probe turn, antecedent turn)` pairs.
pub fn relevance_from_alphas(items: &[(Vec<f64>, usize)], sel: &SelectionConfig) -> Result<RelevanceStats> {
    sel.validate()?;
    if items.is_empty() {
        return Err(Error::Empty { op: "relevance_recovery" });
    }
    let mut hits = 0usize;
    let mut rr = 0.0;
    for (alpha, antecedent) in items {
        if select_relevant(alpha, sel)?.contains(antecedent) {
            hits += 1;
        }
        rr += 1.0 / alpha_rank(alpha, *antecedent)? as f64;
    }
    let n = items.len();
    Ok(RelevanceStats {
        k: sel.k,
        m_last: sel.m_last,
        probes: n,
        hits,
        hit_rate: hits as f64 / n as f64,
        mrr: rr / n as f64,
    })
}

fn annotated(corpus: &[Dialogue]) -> Result<Vec<(&Dialogue, usize, usize)>> {
    if corpus.is_empty() {
        return Err(Error::Empty { op: "relevance_recovery" });
    }
    corpus
        .iter()
        .map(|d| match &d.annotation {
            Some(a) => Ok((d, a.probe_turn, a.antecedent_turn)),
            None => Err(Error::invalid(
                "relevance_recovery",
                format!("dialogue `{}` has no planted-dependency annotation", d.id),
            )),
        })
        .collect()
}

/// Alpha at each dialogue's probe turn (scoring turns `1..=probe` for the
/// response that follows), paired with the antecedent turn.
pub fn probe_alphas(enc: &Encoder, corpus: &[Dialogue]) -> Result<Vec<(Vec<f64>, usize)>> {
    annotated(corpus)?
        .into_iter()
        .map(|(d, probe, antecedent)| {
            let mut state = EncoderState::new(&enc.cfg);
            let mut last = None;
            for t in 1..=probe {
                last = Some(enc.step(&mut state, &d.turn(t).token_ids)?);
            }
            Ok((last.expect("probe ≥ 2").alpha, antecedent))
        })
        .collect()
}

pub fn relevance_recovery(enc: &Encoder, corpus: &[Dialogue], sel: &SelectionConfig) -> Result<RelevanceStats> {
    relevance_from_alphas(&probe_alphas(enc, corpus)?, sel)
}

/// Expected hit rate when the `k` relevance slots are filled at random from
/// the turns outside the recency window.
pub fn combinatorial_hit_rate(corpus: &[Dialogue], sel: &SelectionConfig) -> Result<f64> {
    let items = annotated(corpus)?;
    let mut sum = 0.0;
    for (_, t, antecedent) in &items {
        sum += if *t <= sel.c_max() || *antecedent > t - sel.m_last {
            1.0
        } else {
            let pool = t - sel.m_last;
            sel.k.min(pool) as f64 / pool as f64
        };
    }
    Ok(sum / items.len() as f64)
}

/// Monte-Carlo chance level: `trials` draws of random alpha vectors per probe.
pub fn random_relevance_baseline(
    corpus: &[Dialogue],
    sel: &SelectionConfig,
    trials: usize,
    rng: &mut Rng,
) -> Result<RelevanceStats> {
    if trials == 0 {
        return Err(Error::invalid("random_relevance_baseline", "trials must be positive"));
    }
    let items = annotated(corpus)?;
    let mut draws = Vec::with_capacity(items.len() * trials);
    for (_, t, antecedent) in &items {
        for _ in 0..trials {
            let raw: Vec<f64> = (0..*t).map(|_| rng.uniform(0.0, 1.0)).collect();
            let z: f64 = raw.iter().sum();
            draws.push((raw.iter().map(|v| v / z).collect(), *antecedent));
        }
    }
    relevance_from_alphas(&draws, sel)
}

// ---- context budget --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    /// `c_max·(n_cap+1)+1`.
    pub bound: usize,
    pub contexts: usize,
    pub mean: f64,
    pub max: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Same statistics for the concatenation of every turn so far.
    pub baseline_mean: f64,
    pub baseline_max: usize,
    #[serde(skip)]
    pub counts: Vec<usize>,
    #[serde(skip)]
    pub baseline_counts: Vec<usize>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[usize], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

fn mean(xs: &[usize]) -> f64 {
    xs.iter().sum::<usize>() as f64 / xs.len() as f64
}

/// Decoder-context rows for every prefix `1..=t` of every dialogue.
pub fn context_budget_report(enc: &Encoder, corpus: &[Dialogue], sel: &SelectionConfig) -> Result<BudgetReport> {
    sel.validate()?;
    let bound = sel.max_context_rows();
    let mut counts = Vec::new();
    let mut baseline = Vec::new();
    for d in corpus {
        let rel = enc.infer_dialogue(d)?;
        let mut full = 1usize;
        for (i, r) in rel.iter().enumerate() {
            let y = assemble_history(&select_relevant(&r.alpha, sel)?, d, sel.n_cap)?;
            let rows = y.len() + 1;
            if rows > bound {
                return Err(Error::invalid(
                    "context_budget_report",
                    format!("dialogue `{}` turn {}: {rows} rows exceed the bound {bound}", d.id, i + 1),
                ));
            }
            full += d.turns[i].token_ids.len().min(sel.n_cap) + 1;
            counts.push(rows);
            baseline.push(full);
        }
    }
    if counts.is_empty() {
        return Err(Error::Empty { op: "context_budget_report" });
    }
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    Ok(BudgetReport {
        bound,
        contexts: counts.len(),
        mean: mean(&counts),
        max: *sorted.last().expect("non-empty"),
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        baseline_mean: mean(&baseline),
        baseline_max: baseline.iter().copied().max().expect("non-empty"),
        counts,
        baseline_counts: baseline,
    })
}

// ---- generation ------------------------------------------------------------

/// Response to the dialogue so far, given the encoder output at its last turn.
pub fn respond(
    dec: &Decoder,
    sel: &SelectionConfig,
    gen: &GenerationParams,
    history: &Dialogue,
    rel: &RelevanceResult,
) -> Result<(Vec<usize>, Hypothesis)> {
    let selected = select_relevant(&rel.alpha, sel)?;
    let y = assemble_history(&selected, history, sel.n_cap)?;
    let ctx = dec.context(&rel.x, &rel.b_next, &y)?;
    let hyp = beam_generate(&dec.conditioned(ctx)?, gen)?;
    Ok((selected, hyp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub dialogue: String,
    /// Last turn of the history; the response stands in for turn `turn + 1`.
    pub turn: usize,
    pub selected: Vec<usize>,
    pub response: String,
    pub reference: String,
}

/// One normalized response per turn `1..T-1` of every dialogue.
pub fn generate_corpus(
    enc: &Encoder,
    dec: &Decoder,
    sel: &SelectionConfig,
    gen: &GenerationParams,
    vocab: &Vocab,
    corpus: &[Dialogue],
) -> Result<Vec<Generated>> {
    let mut out = Vec::new();
    for d in corpus {
        let rel = enc.infer_dialogue(d)?;
        for t in 1..d.len() {
            let (selected, hyp) = respond(dec, sel, gen, d, &rel[t - 1])?;
            out.push(Generated {
                dialogue: d.id.clone(),
                turn: t,
                selected,
                response: normalize_output(&vocab.decode(&hyp.tokens)),
                reference: normalize_output(&d.turn(t + 1).text),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_count: usize,
    pub metrics: GenerationMetrics,
    pub budget: Option<BudgetReport>,
    pub relevance: Option<RelevanceStats>,
    /// Random-alpha chance level on the same probes.
    pub relevance_baseline: Option<RelevanceStats>,
    pub config: serde_json::Value,
    /// Vocabulary fingerprint, hex.
    pub fingerprint: String,
}

impl EvalReport {
    /// Canonical (sorted-key) pretty JSON.
    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string_pretty(&v).expect("value serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tensor::Rng;
    use crate::text::{encode_corpus, generate_synthetic, Annotation, Speaker, SynthConfig, Utterance};
    use proptest::prelude::*;

    fn sel(k: usize, m: usize) -> SelectionConfig {
        SelectionConfig {
            k,
            m_last: m,
            ..SelectionConfig::default()
        }
    }

    fn toy(n: usize, turns: usize, seed: u64) -> (Vec<Dialogue>, Encoder) {
        let cfg = SynthConfig {
            n_dialogues: n,
            min_turns: turns,
            max_turns: turns,
            ..SynthConfig::default()
        };
        let mut c = generate_synthetic(&cfg, &mut Rng::new(seed)).unwrap();
        let v = Vocab::build(&c, 1).unwrap();
        encode_corpus(&mut c, &v);
        let enc = Encoder::new(
            EncoderConfig {
                d: 8,
                layers: 1,
                d_att: 8,
                vocab_size: v.len(),
                ..EncoderConfig::default()
            },
            &mut Rng::new(seed + 1),
        )
        .unwrap();
        (c, enc)
    }

    #[test]
    fn rank_orders_by_alpha_then_recency() {
        let a = [0.1, 0.4, 0.1, 0.4];
        assert_eq!(alpha_rank(&a, 4).unwrap(), 1);
        assert_eq!(alpha_rank(&a, 2).unwrap(), 2);
        assert_eq!(alpha_rank(&a, 3).unwrap(), 3);
        assert_eq!(alpha_rank(&a, 1).unwrap(), 4);
        assert!(alpha_rank(&a, 5).is_err());
    }

    #[test]
    fn peaked_antecedent_outside_window_is_hit() {
        let alpha = vec![0.05, 0.6, 0.05, 0.05, 0.05, 0.1, 0.1];
        let s = relevance_from_alphas(&[(alpha, 2)], &sel(2, 2)).unwrap();
        assert_eq!((s.hits, s.hit_rate, s.mrr), (1, 1.0, 1.0));
    }

    #[test]
    fn antecedent_inside_window_always_hit() {
        // lowest alpha, but among the last m turns
        let alpha = vec![0.3, 0.3, 0.3, 0.05, 0.05];
        let s = relevance_from_alphas(&[(alpha, 5)], &sel(1, 2)).unwrap();
        assert_eq!(s.hits, 1);
        assert!(s.mrr < 1.0);
    }

    #[test]
    fn missing_annotation_rejected() {
        let d = Dialogue {
            id: "x".into(),
            turns: vec![Utterance::new(Speaker::A, "hi"), Utterance::new(Speaker::B, "yo")],
            annotation: None,
        };
        assert!(combinatorial_hit_rate(&[d], &sel(2, 2)).is_err());
    }

    #[test]
    fn random_baseline_matches_combinatorial_rate() {
        let (c, _) = toy(60, 12, 4);
        let s = sel(2, 2);
        let mc = random_relevance_baseline(&c, &s, 200, &mut Rng::new(9)).unwrap();
        let exact = combinatorial_hit_rate(&c, &s).unwrap();
        assert!((mc.hit_rate - exact).abs() < 0.02, "{} vs {exact}", mc.hit_rate);
        // uniform rank among t turns: E[1/r] = H_t / t
        let h: f64 = (1..=11).map(|r| 1.0 / r as f64).sum::<f64>() / 11.0;
        assert!((mc.mrr - h).abs() < 0.02, "{} vs {h}", mc.mrr);
    }

    #[test]
    fn untrained_encoder_recovery_is_well_defined() {
        let (c, enc) = toy(10, 8, 2);
        let s = relevance_recovery(&enc, &c, &sel(2, 2)).unwrap();
        assert_eq!(s.probes, 10);
        assert!((0.0..=1.0).contains(&s.hit_rate) && s.mrr > 0.0 && s.mrr <= 1.0);
    }

    #[test]
    fn two_turn_budget_counts_both_turns() {
        let (_, enc) = toy(1, 6, 1);
        let mut d = Dialogue {
            id: "two".into(),
            turns: vec![
                Utterance::new(Speaker::A, "the river was quiet ."),
                Utterance::new(Speaker::B, "yes ."),
            ],
            annotation: Some(Annotation {
                antecedent_turn: 1,
                probe_turn: 2,
                entity: "river".into(),
            }),
        };
        let v = Vocab::build(std::slice::from_ref(&d), 1).unwrap();
        d.encode(&v);
        let r = context_budget_report(&enc, &[d], &sel(2, 2)).unwrap();
        assert_eq!(r.counts, vec![5 + 1 + 1, 5 + 2 + 2 + 1]);
        assert_eq!(r.counts, r.baseline_counts);
    }

    #[test]
    fn budget_bound_and_compactness() {
        let (c, enc) = toy(8, 16, 3);
        let s = sel(2, 2);
        let r = context_budget_report(&enc, &c, &s).unwrap();
        assert!(r.max <= s.max_context_rows());
        assert!(r.mean < r.baseline_mean);
        assert!(r.q1 <= r.median && r.median <= r.q3 && r.q3 <= r.max as f64);
        assert_eq!(r.contexts, 8 * 16);
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [1, 2, 3, 4, 10];
        assert_eq!(quantile(&xs, 0.5), 3.0);
        assert_eq!(quantile(&xs, 0.25), 2.0);
        assert_eq!(quantile(&[1, 2], 0.5), 1.5);
    }

    #[test]
    fn identical_candidates_score_perfect_bleu() {
        let refs = vec![
            "I don't know the river, it was quiet today".to_string(),
            "how about a walk and some tea later on ?".to_string(),
        ];
        let m = GenerationMetrics::from_text(
            &refs,
            &refs.iter().map(|r| vec![r.clone()]).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((m.bleu_1 - 100.0).abs() < 1e-12 && (m.bleu_4 - 100.0).abs() < 1e-12);
        assert!(m.distinct_1 <= 1.0 && m.entropy_4 >= 0.0);
    }

    proptest! {
        #[test]
        fn hit_rate_monotone_in_k(
            alphas in prop::collection::vec(prop::collection::vec(0.001f64..1.0, 3..12), 1..8),
            m in 0usize..3,
        ) {
            let items: Vec<(Vec<f64>, usize)> = alphas
                .into_iter()
                .enumerate()
                .map(|(i, a)| { let t = a.len(); (a, 1 + i % t) })
                .collect();
            let mut prev = 0.0;
            for k in 1..6 {
                let s = relevance_from_alphas(&items, &sel(k, m)).unwrap();
                prop_assert!(s.hit_rate >= prev);
                prev = s.hit_rate;
            }
        }
    }
}
