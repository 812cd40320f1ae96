//! Synthetic corpus with one planted long-range dependency per dialogue.
//!
//! Layout of a dialogue with `T` turns:
//! - turn `T-1` is the probe, a question about something said earlier;
//! - turn `T` is the answer and names the entity;
//! - the antecedent turn, somewhere in `1..=T-4`, introduces the entity;
//! - every other turn is a filler drawn from a template pool that shares no
//!   template with the antecedent/probe/answer pools and never mentions an
//!   entity.

use serde::{Deserialize, Serialize};

use super::corpus::{Annotation, Dialogue, Speaker, Utterance};
use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_dialogues: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Size of the filler lexicon.
    pub vocab_size: usize,
    /// Number of filler templates in use (capped at the built-in pool).
    pub filler_templates: usize,
    pub n_entities: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_dialogues: 500,
            min_turns: 6,
            max_turns: 16,
            vocab_size: 60,
            filler_templates: FILLERS.len(),
            n_entities: ENTITIES.len(),
        }
    }
}

pub const ENTITIES: [&str; 24] = [
    "umbrella", "guitar", "bicycle", "lantern", "teapot", "compass", "violin", "backpack",
    "camera", "kettle", "scarf", "telescope", "notebook", "helmet", "blanket", "harmonica",
    "trumpet", "wallet", "hammock", "microscope", "skateboard", "typewriter", "accordion",
    "sundial",
];

const ANTECEDENTS: [&str; 4] = [
    "i bought a new {e} at the market yesterday .",
    "my sister gave me a {e} for my birthday .",
    "i finally found the {e} i was looking for .",
    "we keep an old {e} in the attic .",
];

const PROBES: [&str; 3] = [
    "by the way , what did you say you got ?",
    "remind me , what was that thing you mentioned ?",
    "sorry , what was the item again ?",
];

const ANSWERS: [&str; 3] = [
    "it was the {e} , of course .",
    "i told you , the {e} .",
    "the {e} , remember ?",
];

const FILLERS: [&str; 8] = [
    "the {w} was quite {w} this morning .",
    "did you see the {w} near the {w} ?",
    "i think the {w} is {w} .",
    "we should talk about the {w} later .",
    "my {w} has been {w} all week .",
    "yes , the {w} looks {w} .",
    "no , i prefer the {w} .",
    "how about a {w} and some {w} ?",
];

const LEXICON: [&str; 60] = [
    "weather", "garden", "river", "kitchen", "window", "office", "train", "bakery", "meeting",
    "rain", "coffee", "letter", "museum", "bridge", "harbor", "forest", "concert", "dinner",
    "project", "library", "station", "village", "picnic", "sky", "road", "tea", "soup",
    "painting", "movie", "lecture", "sunny", "cold", "busy", "quiet", "bright", "noisy",
    "lovely", "strange", "green", "early", "late", "warm", "windy", "crowded", "empty",
    "fresh", "gentle", "heavy", "simple", "clean", "dusty", "calm", "tiny", "huge", "blue",
    "golden", "slow", "rapid", "plain", "odd",
];

/// Filler lexicon of the requested size: built-in words first, then `w<n>`.
fn lexicon(size: usize) -> Vec<String> {
    (0..size)
        .map(|i| match LEXICON.get(i) {
            Some(w) => (*w).to_string(),
            None => format!("w{i}"),
        })
        .collect()
}

fn fill(template: &str, mut slot: impl FnMut() -> String) -> String {
    let mut out = String::new();
    let mut rest = template;
    while let Some(pos) = rest.find("{w}") {
        out.push_str(&rest[..pos]);
        out.push_str(&slot());
        rest = &rest[pos + 3..];
    }
    out.push_str(rest);
    out
}

pub fn generate_synthetic(cfg: &SynthConfig, rng: &mut Rng) -> Result<Vec<Dialogue>> {
    // antecedent < probe - 2 with probe = T - 1 needs T ≥ 5
    if cfg.min_turns < 5 {
        return Err(Error::config("synth.min_turns", "must be at least 5"));
    }
    if cfg.max_turns < cfg.min_turns {
        return Err(Error::config("synth.max_turns", "must be ≥ min_turns"));
    }
    if cfg.vocab_size < 2 {
        return Err(Error::config("synth.vocab_size", "must be at least 2"));
    }
    if cfg.filler_templates == 0 {
        return Err(Error::config("synth.filler_templates", "must be positive"));
    }
    if cfg.n_entities == 0 || cfg.n_entities > ENTITIES.len() {
        return Err(Error::config(
            "synth.n_entities",
            format!("must be in 1..={}", ENTITIES.len()),
        ));
    }
    let words = lexicon(cfg.vocab_size);
    let fillers = &FILLERS[..cfg.filler_templates.min(FILLERS.len())];
    let entities = &ENTITIES[..cfg.n_entities];

    let mut out = Vec::with_capacity(cfg.n_dialogues);
    for n in 0..cfg.n_dialogues {
        let turns = cfg.min_turns + rng.below(cfg.max_turns - cfg.min_turns + 1);
        let probe = turns - 1;
        let antecedent = 1 + rng.below(probe - 3);
        let entity = *rng.choose(entities);

        let mut utterances = Vec::with_capacity(turns);
        for t in 1..=turns {
            let text = if t == antecedent {
                rng.choose(&ANTECEDENTS).replace("{e}", entity)
            } else if t == probe {
                rng.choose(&PROBES).to_string()
            } else if t == turns {
                rng.choose(&ANSWERS).replace("{e}", entity)
            } else {
                let template = *rng.choose(fillers);
                fill(template, || rng.choose(&words).clone())
            };
            utterances.push(Utterance::new(Speaker::alternate(t - 1), text));
        }
        out.push(Dialogue {
            id: format!("synth-{n:05}"),
            turns: utterances,
            annotation: Some(Annotation {
                antecedent_turn: antecedent,
                probe_turn: probe,
                entity: entity.to_string(),
            }),
        });
    }
    Ok(out)
}
