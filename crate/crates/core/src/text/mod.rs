//! Vocabulary, tokenization, corpus I/O and synthetic data.

pub mod corpus;
pub mod normalize;
pub mod synth;
pub mod vocab;

pub use corpus::{encode_corpus, load_corpus, parse_corpus, save_corpus, Annotation, Dialogue, Speaker, Utterance};
pub use normalize::{normalize_output, tokenize};
pub use synth::{generate_synthetic, SynthConfig};
pub use vocab::{TokenId, Vocab, MAX_UTTERANCE_TOKENS};
