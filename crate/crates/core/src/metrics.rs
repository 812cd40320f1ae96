//! Corpus-level generation metrics over whitespace-tokenized text.
//!
//! * BLEU: cumulative clipped n-gram precision (geometric mean over orders
//!   `1..=n`), counts clipped by the maximum over the references, brevity
//!   penalty against the closest reference length (shorter on ties), no
//!   smoothing, reported in percent.
//! * NIST: information-weighted co-occurrences with weights from reference
//!   n-gram counts (log base 2) and the standard brevity factor, with the
//!   reference length averaged over each segment's references.
//! * distinct-n and n-gram entropy (natural log) over the candidates.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type Tokens = Vec<String>;

fn ngrams(toks: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    toks.windows(n)
}

fn counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in ngrams(toks, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Per n-gram maximum count over the references.
fn max_ref_counts(refs: &[Tokens], n: usize) -> HashMap<&[String], usize> {
    let mut best: HashMap<&[String], usize> = HashMap::new();
    for r in refs {
        for (g, c) in counts(r, n) {
            let e = best.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    best
}

fn check_corpus(candidates: &[Tokens], references: &[Vec<Tokens>], op: &'static str) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Empty { op });
    }
    if candidates.len() != references.len() {
        return Err(Error::invalid(
            op,
            format!("{} candidates but {} reference sets", candidates.len(), references.len()),
        ));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::invalid(op, "every candidate needs at least one reference"));
    }
    Ok(())
}

pub fn bleu(candidates: &[Tokens], references: &[Vec<Tokens>], n: usize) -> Result<f64> {
    check_corpus(candidates, references, "bleu")?;
    if n == 0 {
        return Err(Error::invalid("bleu", "order must be positive"));
    }
    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, refs) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += refs
            .iter()
            .map(|r| (r.len().abs_diff(c.len()), r.len()))
            .min()
            .expect("non-empty")
            .1;
        for k in 1..=n {
            let best = max_ref_counts(refs, k);
            matches[k - 1] += counts(c, k)
                .into_iter()
                .map(|(g, v)| v.min(best.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[k - 1] += (c.len() + 1).saturating_sub(k);
        }
    }
    if matches.iter().zip(&totals).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

pub fn nist(candidates: &[Tokens], references: &[Vec<Tokens>], n: usize) -> Result<f64> {
    check_corpus(candidates, references, "nist")?;
    if n == 0 {
        return Err(Error::invalid("nist", "order must be positive"));
    }
    // reference n-gram counts for every order up to n
    let mut ref_counts: Vec<HashMap<&[String], usize>> = vec![HashMap::new(); n + 1];
    let mut ref_words = 0usize;
    for refs in references {
        for r in refs {
            ref_words += r.len();
            for (k, table) in ref_counts.iter_mut().enumerate().skip(1) {
                for g in ngrams(r, k) {
                    *table.entry(g).or_insert(0) += 1;
                }
            }
        }
    }
    let info = |g: &[String]| -> f64 {
        let k = g.len();
        let num = if k == 1 {
            ref_words
        } else {
            ref_counts[k - 1][&g[..k - 1]]
        };
        (num as f64 / ref_counts[k][g] as f64).log2()
    };

    let mut score = 0.0;
    for k in 1..=n {
        let mut gain = 0.0;
        let mut total = 0usize;
        for (c, refs) in candidates.iter().zip(references) {
            let best = max_ref_counts(refs, k);
            // sorted for a fixed summation order
            let mut cc: Vec<(&[String], usize)> = counts(c, k).into_iter().collect();
            cc.sort_unstable();
            for (g, v) in cc {
                let m = v.min(best.get(g).copied().unwrap_or(0));
                if m > 0 {
                    gain += m as f64 * info(g);
                }
            }
            total += (c.len() + 1).saturating_sub(k);
        }
        if total > 0 {
            score += gain / total as f64;
        }
    }
    let sys_len: usize = candidates.iter().map(Vec::len).sum();
    let ref_len: f64 = references
        .iter()
        .map(|refs| refs.iter().map(Vec::len).sum::<usize>() as f64 / refs.len() as f64)
        .sum();
    Ok(score * nist_brevity(sys_len as f64, ref_len))
}

/// `exp(β · ln²(min(L_sys / L_ref, 1)))`, β chosen so the factor is 0.5 at 2/3.
pub fn nist_brevity(sys_len: f64, ref_len: f64) -> f64 {
    if ref_len <= 0.0 {
        return 1.0;
    }
    if sys_len <= 0.0 {
        return 0.0;
    }
    let beta = 0.5f64.ln() / 1.5f64.ln().powi(2);
    let ratio = (sys_len / ref_len).min(1.0);
    (beta * ratio.ln().powi(2)).exp()
}

/// Unique n-grams over total n-grams; 0 when no candidate has an n-gram.
pub fn distinct(candidates: &[Tokens], n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Empty { op: "distinct" });
    }
    let mut seen = HashMap::new();
    let mut total = 0usize;
    for c in candidates {
        for g in ngrams(c, n.max(1)) {
            seen.insert(g, ());
            total += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    })
}

/// `−Σ p ln p` over corpus n-gram frequencies.
pub fn entropy(candidates: &[Tokens], n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Empty { op: "entropy" });
    }
    let mut freq: HashMap<&[String], usize> = HashMap::new();
    for c in candidates {
        for g in ngrams(c, n.max(1)) {
            *freq.entry(g).or_insert(0) += 1;
        }
    }
    let total: usize = freq.values().sum();
    if total == 0 {
        return Err(Error::invalid("entropy", format!("no {n}-grams in the corpus")));
    }
    let mut f: Vec<usize> = freq.into_values().collect();
    f.sort_unstable();
    let t = total as f64;
    Ok(-f.iter().map(|&v| v as f64 / t * (v as f64 / t).ln()).sum::<f64>())
}

pub fn split(s: &str) -> Tokens {
    s.split_whitespace().map(str::to_string).collect()
}
