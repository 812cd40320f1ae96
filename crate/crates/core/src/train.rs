//! Two-stage training: the encoder on its own objective, then the decoder on
//! top of the frozen encoder.
//!
//! Gradients are summed over the turns of a dialogue and over
//! `accumulate_dialogues` dialogues before each optimizer step; leftover
//! dialogues at the end of an epoch get one more step. The returned model is
//! the one from the epoch with the lowest validation loss (earliest on ties).

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, Stage};
use crate::composer::{assemble_history, select_relevant, SelectionConfig};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, RelevanceResult};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Grads, ParamStore, Session};
use crate::tensor::Rng;
use crate::text::{Dialogue, TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Dialogues per optimizer step.
    pub accumulate_dialogues: usize,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::encoder()
    }
}

impl TrainConfig {
    pub fn encoder() -> Self {
        TrainConfig {
            lr: 5e-4,
            epochs: 30,
            accumulate_dialogues: 4,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            seed: 0,
        }
    }

    pub fn decoder() -> Self {
        TrainConfig {
            lr: 1e-5,
            epochs: 10,
            ..TrainConfig::encoder()
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{prefix}.lr"), "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config(format!("{prefix}.epochs"), "must be at least 1"));
        }
        if self.accumulate_dialogues == 0 {
            return Err(Error::config(format!("{prefix}.accumulate_dialogues"), "must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("{prefix}.weight_decay"), "must be ≥ 0"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config(format!("{prefix}.adam_eps"), "must be positive"));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.lr,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
    }
}

/// Encoder loss breakdown: `total = l1 + bow`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderLosses {
    pub total: f64,
    pub bow: f64,
    pub l1: f64,
}

/// Decoder loss breakdown: `total = lm + λ·bow`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DecoderLosses {
    pub total: f64,
    pub lm: f64,
    pub bow: f64,
}

pub trait Losses: Copy + Default + Serialize {
    fn add(&mut self, other: &Self);
    fn scaled(&self, k: f64) -> Self;
    fn total(&self) -> f64;
}

impl Losses for EncoderLosses {
    fn add(&mut self, o: &Self) {
        self.total += o.total;
        self.bow += o.bow;
        self.l1 += o.l1;
    }

    fn scaled(&self, k: f64) -> Self {
        EncoderLosses {
            total: self.total * k,
            bow: self.bow * k,
            l1: self.l1 * k,
        }
    }

    fn total(&self) -> f64 {
        self.total
    }
}

impl Losses for DecoderLosses {
    fn add(&mut self, o: &Self) {
        self.total += o.total;
        self.lm += o.lm;
        self.bow += o.bow;
    }

    fn scaled(&self, k: f64) -> Self {
        DecoderLosses {
            total: self.total * k,
            lm: self.lm * k,
            bow: self.bow * k,
        }
    }

    fn total(&self) -> f64 {
        self.total
    }
}

/// Losses summed over the dialogues of one optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord<L> {
    pub epoch: usize,
    pub step: u64,
    pub dialogues: usize,
    pub loss: L,
}

/// Per-dialogue mean losses of one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord<L> {
    pub epoch: usize,
    pub steps: u64,
    pub train: L,
    pub val: L,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog<L> {
    pub stage: Stage,
    pub config: serde_json::Value,
    pub steps: Vec<StepRecord<L>>,
    pub epochs: Vec<EpochRecord<L>>,
    pub selected_epoch: usize,
    pub selected_val: f64,
}

pub struct Trained<M, L> {
    pub model: M,
    pub log: TrainLog<L>,
    pub checkpoint: Checkpoint,
}

fn diverged(epoch: usize, d: &Dialogue, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            dialogue: d.id.clone(),
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Shared loop. `grad_fn` returns the gradients and losses of training
/// dialogue `i`, `val_fn` the mean validation losses of the current parameters.
#[allow(clippy::too_many_arguments)]
fn run_epochs<L: Losses>(
    stage: Stage,
    params: &mut ParamStore,
    train: &[Dialogue],
    cfg: &TrainConfig,
    config_echo: serde_json::Value,
    fingerprint: u64,
    mut grad_fn: impl FnMut(&ParamStore, usize, &mut Rng) -> Result<(Grads, L)>,
    mut val_fn: impl FnMut(&ParamStore) -> Result<L>,
) -> Result<(ParamStore, TrainLog<L>, Checkpoint)> {
    if train.is_empty() {
        return Err(Error::Empty { op: "train" });
    }
    let mut rng = Rng::new(cfg.seed ^ 0x7261_696e);
    let mut opt = cfg.optimizer();
    let mut log = TrainLog {
        stage,
        config: config_echo.clone(),
        steps: Vec::new(),
        epochs: Vec::new(),
        selected_epoch: 0,
        selected_val: f64::INFINITY,
    };
    let mut best: Option<ParamStore> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        let mut acc = Grads::zeros_like(params);
        let mut pending = 0usize;
        let mut step_loss = L::default();
        let mut epoch_loss = L::default();
        let steps_before = opt.steps();

        let flush = |params: &mut ParamStore,
                     acc: &mut Grads,
                     opt: &mut AdamW,
                     pending: &mut usize,
                     step_loss: &mut L,
                     log: &mut TrainLog<L>|
         -> Result<()> {
            opt.step(params, acc)?;
            log.steps.push(StepRecord {
                epoch,
                step: opt.steps(),
                dialogues: *pending,
                loss: *step_loss,
            });
            acc.clear();
            *pending = 0;
            *step_loss = L::default();
            Ok(())
        };

        for &i in &order {
            let d = &train[i];
            let mut drop_rng = rng.fork();
            let (g, l) = grad_fn(params, i, &mut drop_rng).map_err(|e| diverged(epoch, d, e))?;
            if !l.total().is_finite() || !g.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    dialogue: d.id.clone(),
                    loss: l.total(),
                });
            }
            acc.add(&g);
            step_loss.add(&l);
            epoch_loss.add(&l);
            pending += 1;
            if pending == cfg.accumulate_dialogues {
                flush(params, &mut acc, &mut opt, &mut pending, &mut step_loss, &mut log)?;
            }
        }
        if pending > 0 {
            flush(params, &mut acc, &mut opt, &mut pending, &mut step_loss, &mut log)?;
        }

        let val = val_fn(params).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                epoch,
                dialogue: "<validation>".into(),
                loss: f64::NAN,
            },
            other => other,
        })?;
        if !val.total().is_finite() {
            return Err(Error::Diverged {
                epoch,
                dialogue: "<validation>".into(),
                loss: val.total(),
            });
        }
        log::info!(
            "{stage} epoch {epoch}: train {:.4} val {:.4}",
            epoch_loss.total() / train.len() as f64,
            val.total()
        );
        log.epochs.push(EpochRecord {
            epoch,
            steps: opt.steps() - steps_before,
            train: epoch_loss.scaled(1.0 / train.len() as f64),
            val,
        });
        if val.total() < log.selected_val {
            log.selected_val = val.total();
            log.selected_epoch = epoch;
            best = Some(params.clone());
        }
    }
    let best = best.expect("at least one epoch ran");
    let checkpoint = Checkpoint {
        stage,
        config: config_echo,
        meta: CheckpointMeta {
            epoch: log.selected_epoch,
            val_loss: log.selected_val,
            seed: cfg.seed,
        },
        fingerprint,
        params: best.clone(),
    };
    Ok((best, log, checkpoint))
}

// ---- encoder ---------------------------------------------------------------

/// Gradients and losses of one dialogue under dropout.
pub fn encoder_dialogue_grads(enc: &Encoder, d: &Dialogue, dropout: Option<Rng>) -> Result<(Grads, EncoderLosses)> {
    let mut s = enc.train_session(dropout);
    let out = enc.encode_dialogue(&mut s, d)?;
    s.g.backward(out.total)?;
    Ok((
        s.grads(),
        EncoderLosses {
            total: out.total_value(),
            bow: out.bow_value(),
            l1: out.pred_value(),
        },
    ))
}

/// Mean per-dialogue encoder losses without dropout.
pub fn encoder_corpus_loss(enc: &Encoder, corpus: &[Dialogue]) -> Result<EncoderLosses> {
    if corpus.is_empty() {
        return Err(Error::Empty { op: "encoder_corpus_loss" });
    }
    let mut sum = EncoderLosses::default();
    for d in corpus {
        let mut s = Session::infer(&enc.params);
        let out = enc.encode_dialogue(&mut s, d)?;
        sum.add(&EncoderLosses {
            total: out.total_value(),
            bow: out.bow_value(),
            l1: out.pred_value(),
        });
    }
    Ok(sum.scaled(1.0 / corpus.len() as f64))
}

pub fn encoder_config_echo(enc: &EncoderConfig, cfg: &TrainConfig) -> serde_json::Value {
    serde_json::json!({ "encoder": enc, "train_encoder": cfg })
}

pub fn train_encoder(
    train: &[Dialogue],
    val: &[Dialogue],
    enc_cfg: EncoderConfig,
    cfg: &TrainConfig,
    vocab: &Vocab,
) -> Result<Trained<Encoder, EncoderLosses>> {
    cfg.validate("train_encoder")?;
    if val.is_empty() {
        return Err(Error::Empty { op: "train_encoder validation" });
    }
    let mut init_rng = Rng::new(cfg.seed);
    let mut enc = Encoder::new(enc_cfg, &mut init_rng)?;
    let echo = encoder_config_echo(&enc.cfg, cfg);
    let c = enc.cfg.clone();
    let (best, log, checkpoint) = run_epochs(
        Stage::Encoder,
        &mut enc.params,
        train,
        cfg,
        echo,
        vocab.fingerprint(),
        |p, i, rng| {
            let e = Encoder {
                cfg: c.clone(),
                params: p.clone(),
            };
            encoder_dialogue_grads(&e, &train[i], Some(rng.fork()))
        },
        |p| {
            let e = Encoder {
                cfg: c.clone(),
                params: p.clone(),
            };
            encoder_corpus_loss(&e, val)
        },
    )?;
    Ok(Trained {
        model: Encoder::from_params(enc.cfg, best)?,
        log,
        checkpoint,
    })
}

/// Rebuilds the encoder stored in an encoder or decoder checkpoint.
pub fn encoder_from_checkpoint(ckpt: &Checkpoint) -> Result<Encoder> {
    let cfg: EncoderConfig = serde_json::from_value(ckpt.config["encoder"].clone())
        .map_err(|e| Error::Corrupt(format!("encoder config: {e}")))?;
    Encoder::from_params(cfg, ckpt.params.subset("enc."))
}

// ---- decoder ---------------------------------------------------------------

/// One decoder training example: frozen encoder outputs for turn `t`, the
/// selected history and the next utterance closed by SEP.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnExample {
    pub t: usize,
    pub x: Vec<f64>,
    pub b_next: Vec<f64>,
    pub selected: Vec<usize>,
    pub y: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

/// Runs the frozen encoder over turns `1..T-1` of `d`.
pub fn turn_examples(enc: &Encoder, d: &Dialogue, sel: &SelectionConfig) -> Result<Vec<TurnExample>> {
    let rel: Vec<RelevanceResult> = enc.infer_dialogue(d)?;
    let mut out = Vec::with_capacity(d.len().saturating_sub(1));
    for t in 1..d.len() {
        let r = &rel[t - 1];
        let selected = select_relevant(&r.alpha, sel)?;
        let y = assemble_history(&selected, d, sel.n_cap)?;
        let mut target: Vec<TokenId> = d.turn(t + 1).token_ids.iter().copied().take(sel.n_cap).collect();
        target.push(Vocab::SEP);
        out.push(TurnExample {
            t,
            x: r.x.clone(),
            b_next: r.b_next.clone(),
            selected,
            y,
            target,
        });
    }
    Ok(out)
}

pub fn decoder_dialogue_grads(dec: &Decoder, examples: &[TurnExample]) -> Result<(Grads, DecoderLosses)> {
    let mut s = Session::train(&dec.params);
    let mut totals = Vec::with_capacity(examples.len());
    let mut sum = DecoderLosses::default();
    for ex in examples {
        let l = dec.turn_loss(&mut s, &ex.x, &ex.b_next, &ex.y, &ex.target)?;
        s.g.check()?;
        sum.add(&DecoderLosses {
            total: s.g.scalar(l.total),
            lm: s.g.scalar(l.lm),
            bow: s.g.scalar(l.bow),
        });
        totals.push(l.total);
    }
    let total = s.g.add_all(&totals);
    s.g.backward(total)?;
    Ok((s.grads(), sum))
}

pub fn decoder_examples_loss(dec: &Decoder, examples: &[TurnExample]) -> Result<DecoderLosses> {
    let mut sum = DecoderLosses::default();
    for ex in examples {
        let mut s = Session::infer(&dec.params);
        let l = dec.turn_loss(&mut s, &ex.x, &ex.b_next, &ex.y, &ex.target)?;
        s.g.check()?;
        sum.add(&DecoderLosses {
            total: s.g.scalar(l.total),
            lm: s.g.scalar(l.lm),
            bow: s.g.scalar(l.bow),
        });
    }
    Ok(sum)
}

pub fn decoder_config_echo(
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    sel: &SelectionConfig,
    cfg: &TrainConfig,
) -> serde_json::Value {
    serde_json::json!({ "encoder": enc, "decoder": dec, "selection": sel, "train_decoder": cfg })
}

/// Trains a decoder over a frozen encoder taken from `encoder_ckpt`.
pub fn train_decoder(
    train: &[Dialogue],
    val: &[Dialogue],
    encoder_ckpt: &Checkpoint,
    dec_cfg: DecoderConfig,
    sel: &SelectionConfig,
    cfg: &TrainConfig,
    vocab: &Vocab,
) -> Result<Trained<(Encoder, Decoder), DecoderLosses>> {
    cfg.validate("train_decoder")?;
    sel.validate()?;
    encoder_ckpt.expect(Stage::Encoder, vocab.fingerprint())?;
    if val.is_empty() {
        return Err(Error::Empty { op: "train_decoder validation" });
    }
    let enc = encoder_from_checkpoint(encoder_ckpt)?;
    if dec_cfg.context_dim != enc.cfg.d {
        return Err(Error::config("decoder.context_dim", "must equal encoder.d"));
    }
    if dec_cfg.vocab_size != vocab.len() {
        return Err(Error::config("decoder.vocab_size", "must equal the vocabulary size"));
    }
    let prep = |corpus: &[Dialogue]| -> Result<Vec<Vec<TurnExample>>> {
        corpus.iter().map(|d| turn_examples(&enc, d, sel)).collect()
    };
    let train_ex = prep(train)?;
    let val_ex = prep(val)?;

    let mut init_rng = Rng::new(cfg.seed);
    let mut dec = Decoder::new(dec_cfg, &mut init_rng)?;
    let echo = decoder_config_echo(&enc.cfg, &dec.cfg, sel, cfg);
    let c = dec.cfg.clone();
    let n_val = val.len() as f64;
    let (best, log, mut checkpoint) = run_epochs(
        Stage::Decoder,
        &mut dec.params,
        train,
        cfg,
        echo,
        vocab.fingerprint(),
        |p, i, _| {
            let m = Decoder {
                cfg: c.clone(),
                params: p.clone(),
            };
            decoder_dialogue_grads(&m, &train_ex[i])
        },
        |p| {
            let m = Decoder {
                cfg: c.clone(),
                params: p.clone(),
            };
            let mut sum = DecoderLosses::default();
            for ex in &val_ex {
                sum.add(&decoder_examples_loss(&m, ex)?);
            }
            Ok(sum.scaled(1.0 / n_val))
        },
    )?;
    // the decoder checkpoint carries the frozen encoder too
    let mut all = enc.params.clone();
    all.extend_from(&best);
    checkpoint.params = all;
    Ok(Trained {
        model: (enc, Decoder::from_params(dec.cfg, best)?),
        log,
        checkpoint,
    })
}

/// Encoder, decoder and selection settings from a decoder checkpoint.
pub fn models_from_checkpoint(ckpt: &Checkpoint) -> Result<(Encoder, Decoder, SelectionConfig)> {
    if ckpt.stage != Stage::Decoder {
        return Err(Error::Stage {
            expected: Stage::Decoder.tag().into(),
            found: ckpt.stage.tag().into(),
        });
    }
    let enc = encoder_from_checkpoint(ckpt)?;
    let dcfg: DecoderConfig = serde_json::from_value(ckpt.config["decoder"].clone())
        .map_err(|e| Error::Corrupt(format!("decoder config: {e}")))?;
    let sel: SelectionConfig = serde_json::from_value(ckpt.config["selection"].clone())
        .map_err(|e| Error::Corrupt(format!("selection config: {e}")))?;
    let dec = Decoder::from_params(dcfg, ckpt.params.subset("dec."))?;
    Ok((enc, dec, sel))
}
