use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use lctx::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
use lctx::composer::select_relevant;
use lctx::config::{flag_value, RunConfig};
use lctx::decoder::Decoder;
use lctx::encoder::{Encoder, EncoderState, RelevanceResult};
use lctx::eval::{
    context_budget_report, generate_corpus, random_relevance_baseline, relevance_recovery, respond, EvalReport,
    Generated, GenerationMetrics,
};
use lctx::metrics::split;
use lctx::text::{
    encode_corpus, generate_synthetic, load_corpus, normalize_output, save_corpus, Dialogue, Speaker, Utterance,
    Vocab, MAX_UTTERANCE_TOKENS,
};
use lctx::train::{encoder_from_checkpoint, models_from_checkpoint, train_decoder, train_encoder};
use lctx::{Error, Result, Rng};

/// Dialogue modeling with relevance-selected long-range context.
#[derive(Parser)]
#[command(name = "lctx", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (`paths.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    beam_width: Option<usize>,
    #[arg(long, global = true)]
    min_len: Option<usize>,
    #[arg(long, global = true)]
    max_len: Option<usize>,
    #[arg(long, global = true)]
    length_penalty: Option<f64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    m_last: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Epochs for the stage being trained.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Learning rate for the stage being trained.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Any other key, e.g. `--set encoder.d=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic train/valid/test corpus and its vocabulary.
    Synth,
    /// Train the relevance encoder.
    TrainEncoder,
    /// Train the decoder over a frozen encoder checkpoint.
    TrainDecoder,
    /// Generate a response for every turn of a corpus.
    Generate {
        /// Corpus (default: the test split).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Decoder checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score generations, context budget and antecedent recovery.
    Evaluate {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Encoder or decoder checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Previously generated responses; generated afresh when absent.
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Per-turn relevance table for one dialogue.
    Inspect {
        /// JSON-lines file holding the dialogue.
        dialogue: PathBuf,
        /// Dialogue id (default: the first one).
        #[arg(long)]
        id: Option<String>,
        /// Encoder or decoder checkpoint (default: decoder if present).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Line-by-line diagnostic chat. `:reset` clears the history, `:quit` exits.
    Chat {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy)]
enum StageFlags {
    Encoder,
    Decoder,
    Neither,
}

fn overrides(g: &Global, stage: StageFlags) -> Result<Vec<(String, Value)>> {
    let mut o: Vec<(String, Value)> = Vec::new();
    let mut put = |k: &str, v: Value| o.push((k.to_string(), v));
    if let Some(v) = g.seed {
        put("seed", v.into());
    }
    if let Some(v) = &g.out {
        put("paths.out", v.to_string_lossy().into_owned().into());
    }
    if let Some(v) = g.beam_width {
        put("generation.beam_width", v.into());
    }
    if let Some(v) = g.min_len {
        put("generation.min_len", v.into());
    }
    if let Some(v) = g.max_len {
        put("generation.max_len", v.into());
    }
    if let Some(v) = g.length_penalty {
        put("generation.length_penalty", v.into());
    }
    if let Some(v) = g.k {
        put("selection.k", v.into());
    }
    if let Some(v) = g.m_last {
        put("selection.m_last", v.into());
    }
    if let Some(v) = g.lambda {
        put("decoder.lambda", v.into());
    }
    let section = match stage {
        StageFlags::Encoder => Some("train_encoder"),
        StageFlags::Decoder => Some("train_decoder"),
        StageFlags::Neither => None,
    };
    for (flag, field, v) in [
        ("--epochs", "epochs", g.epochs.map(Value::from)),
        ("--lr", "lr", g.lr.map(Value::from)),
    ] {
        if let Some(v) = v {
            let Some(section) = section else {
                return Err(Error::config(flag, "only applies to train-encoder / train-decoder"));
            };
            put(&format!("{section}.{field}"), v);
        }
    }
    for s in &g.set {
        let Some((k, v)) = s.split_once('=') else {
            return Err(Error::config(s.clone(), "expected KEY=VALUE"));
        };
        put(k.trim(), flag_value(v.trim()));
    }
    Ok(o)
}

fn hex(fp: u64) -> String {
    format!("{fp:016x}")
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    Vocab::load(&cfg.paths.vocab())
}

fn load_encoded(path: &Path, vocab: &Vocab) -> Result<Vec<Dialogue>> {
    let mut c = load_corpus(path)?;
    encode_corpus(&mut c, vocab);
    Ok(c)
}

/// Loads a checkpoint and checks it against the vocabulary.
fn load_checked(path: &Path, vocab: &Vocab) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.expect(ckpt.stage, vocab.fingerprint())?;
    Ok(ckpt)
}

fn with_run_config(ckpt: &mut Checkpoint, cfg: &RunConfig) {
    if let Value::Object(m) = &mut ckpt.config {
        m.insert("run".into(), cfg.echo());
    }
}

fn log_json<L: serde::Serialize>(log: &L, cfg: &RunConfig, fp: u64) -> Value {
    let mut v = serde_json::to_value(log).expect("log serializes");
    v["run"] = cfg.echo();
    v["fingerprint"] = hex(fp).into();
    v
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let mut synth = cfg.synth.clone();
    let (n_train, n_valid, n_test) = (synth.n_dialogues, cfg.corpus.valid_dialogues, cfg.corpus.test_dialogues);
    synth.n_dialogues = n_train + n_valid + n_test;
    let all = generate_synthetic(&synth, &mut Rng::new(cfg.seed))?;
    let (train, rest) = all.split_at(n_train);
    let (valid, test) = rest.split_at(n_valid);
    if train.is_empty() {
        return Err(Error::config("synth.n_dialogues", "must be at least 1"));
    }
    let vocab = Vocab::build(train, cfg.corpus.min_freq)?;
    create_dir(&cfg.paths.out)?;
    save_corpus(train, &cfg.paths.train())?;
    save_corpus(valid, &cfg.paths.valid())?;
    save_corpus(test, &cfg.paths.test())?;
    vocab.save(&cfg.paths.vocab())?;
    write_json(
        &cfg.paths.out.join("synth.json"),
        &json!({
            "run": cfg.echo(),
            "fingerprint": hex(vocab.fingerprint()),
            "vocab_size": vocab.len(),
            "dialogues": {"train": train.len(), "valid": valid.len(), "test": test.len()},
        }),
    )?;
    println!(
        "{} train / {} valid / {} test dialogues, vocabulary {} (fingerprint {})",
        train.len(),
        valid.len(),
        test.len(),
        vocab.len(),
        hex(vocab.fingerprint())
    );
    Ok(())
}

fn cmd_train_encoder(cfg: &RunConfig) -> Result<()> {
    let vocab = load_vocab(cfg)?;
    let train = load_encoded(&cfg.paths.train(), &vocab)?;
    let valid = load_encoded(&cfg.paths.valid(), &vocab)?;
    let mut enc_cfg = cfg.encoder.clone();
    enc_cfg.vocab_size = vocab.len();
    let mut trained = train_encoder(&train, &valid, enc_cfg, &cfg.train_encoder, &vocab)?;
    with_run_config(&mut trained.checkpoint, cfg);
    create_dir(&cfg.paths.out)?;
    save_checkpoint(&trained.checkpoint, &cfg.paths.encoder())?;
    write_json(
        &cfg.paths.out.join("encoder_log.json"),
        &log_json(&trained.log, cfg, vocab.fingerprint()),
    )?;
    println!(
        "encoder: selected epoch {} (validation loss {:.6}) -> {}",
        trained.log.selected_epoch,
        trained.log.selected_val,
        cfg.paths.encoder().display()
    );
    Ok(())
}

fn cmd_train_decoder(cfg: &RunConfig) -> Result<()> {
    let vocab = load_vocab(cfg)?;
    let enc_ckpt = load_checkpoint(&cfg.paths.encoder())?;
    let train = load_encoded(&cfg.paths.train(), &vocab)?;
    let valid = load_encoded(&cfg.paths.valid(), &vocab)?;
    let enc_d = encoder_from_checkpoint(&enc_ckpt)?.cfg.d;
    let mut dec_cfg = cfg.decoder.clone();
    dec_cfg.vocab_size = vocab.len();
    dec_cfg.context_dim = enc_d;
    let mut trained = train_decoder(
        &train,
        &valid,
        &enc_ckpt,
        dec_cfg,
        &cfg.selection,
        &cfg.train_decoder,
        &vocab,
    )?;
    with_run_config(&mut trained.checkpoint, cfg);
    create_dir(&cfg.paths.out)?;
    save_checkpoint(&trained.checkpoint, &cfg.paths.decoder())?;
    write_json(
        &cfg.paths.out.join("decoder_log.json"),
        &log_json(&trained.log, cfg, vocab.fingerprint()),
    )?;
    println!(
        "decoder: selected epoch {} (validation loss {:.6}) -> {}",
        trained.log.selected_epoch,
        trained.log.selected_val,
        cfg.paths.decoder().display()
    );
    Ok(())
}

fn checkpoint_echo(ckpt: &Checkpoint) -> Value {
    json!({
        "stage": ckpt.stage,
        "fingerprint": hex(ckpt.fingerprint),
        "epoch": ckpt.meta.epoch,
        "val_loss": ckpt.meta.val_loss,
    })
}

fn cmd_generate(cfg: &RunConfig, input: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<()> {
    let vocab = load_vocab(cfg)?;
    let ckpt = load_checked(&checkpoint.unwrap_or_else(|| cfg.paths.decoder()), &vocab)?;
    let (enc, dec, _) = models_from_checkpoint(&ckpt)?;
    let corpus = load_encoded(&input.unwrap_or_else(|| cfg.paths.test()), &vocab)?;
    let out = generate_corpus(&enc, &dec, &cfg.selection, &cfg.generation, &vocab, &corpus)?;
    create_dir(&cfg.paths.out)?;
    let path = cfg.paths.out.join("generated.json");
    write_json(
        &path,
        &json!({
            "run": cfg.echo(),
            "checkpoint": checkpoint_echo(&ckpt),
            "fingerprint": hex(vocab.fingerprint()),
            "responses": out,
        }),
    )?;
    println!("{} responses -> {}", out.len(), path.display());
    Ok(())
}

fn read_candidates(path: &Path, corpus: &[Dialogue]) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let items: Vec<Generated> = serde_json::from_value(v["responses"].clone()).map_err(|e| Error::Schema {
        line: 0,
        msg: format!("responses: {e}"),
    })?;
    let mut cands = Vec::with_capacity(items.len());
    let mut refs = Vec::with_capacity(items.len());
    for g in items {
        let d = corpus
            .iter()
            .find(|d| d.id == g.dialogue)
            .ok_or_else(|| Error::invalid("evaluate", format!("dialogue `{}` not in the corpus", g.dialogue)))?;
        if g.turn == 0 || g.turn >= d.len() {
            return Err(Error::invalid(
                "evaluate",
                format!("dialogue `{}` has no turn after {}", g.dialogue, g.turn),
            ));
        }
        cands.push(g.response);
        refs.push(vec![normalize_output(&d.turn(g.turn + 1).text)]);
    }
    Ok((cands, refs))
}

fn cmd_evaluate(
    cfg: &RunConfig,
    input: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    candidates: Option<PathBuf>,
) -> Result<()> {
    let vocab = load_vocab(cfg)?;
    let path = checkpoint.unwrap_or_else(|| cfg.paths.decoder());
    let ckpt = load_checked(&path, &vocab)?;
    let corpus = load_encoded(&input.unwrap_or_else(|| cfg.paths.test()), &vocab)?;
    let enc = encoder_from_checkpoint(&ckpt)?;
    let (cands, refs) = match candidates {
        Some(p) => read_candidates(&p, &corpus)?,
        None => {
            if ckpt.stage != Stage::Decoder {
                return Err(Error::invalid(
                    "evaluate",
                    "an encoder checkpoint needs --candidates to score",
                ));
            }
            let (_, dec, _) = models_from_checkpoint(&ckpt)?;
            let g = generate_corpus(&enc, &dec, &cfg.selection, &cfg.generation, &vocab, &corpus)?;
            g.into_iter().map(|g| (g.response, vec![g.reference])).unzip()
        }
    };
    let metrics = GenerationMetrics::compute(
        &cands.iter().map(|s| split(s)).collect::<Vec<_>>(),
        &refs
            .iter()
            .map(|set| set.iter().map(|s| split(s)).collect())
            .collect::<Vec<_>>(),
    )?;
    let budget = context_budget_report(&enc, &corpus, &cfg.selection)?;
    let annotated = corpus.iter().all(|d| d.annotation.is_some());
    let (relevance, baseline) = if annotated {
        (
            Some(relevance_recovery(&enc, &corpus, &cfg.selection)?),
            Some(random_relevance_baseline(
                &corpus,
                &cfg.selection,
                100,
                &mut Rng::new(cfg.seed),
            )?),
        )
    } else {
        (None, None)
    };
    let report = EvalReport {
        sample_count: cands.len(),
        metrics,
        budget: Some(budget),
        relevance,
        relevance_baseline: baseline,
        config: json!({"run": cfg.echo(), "checkpoint": checkpoint_echo(&ckpt)}),
        fingerprint: hex(vocab.fingerprint()),
    };
    create_dir(&cfg.paths.out)?;
    let out = cfg.paths.out.join("eval.json");
    fs::write(&out, report.to_json() + "\n").map_err(|e| Error::io(&out, e))?;
    let m = &report.metrics;
    println!(
        "samples {}  bleu-1 {:.2}  bleu-4 {:.2}  nist-2 {:.3}  distinct-1 {:.3}  distinct-2 {:.3}  entropy-4 {:.3}",
        report.sample_count, m.bleu_1, m.bleu_4, m.nist_2, m.distinct_1, m.distinct_2, m.entropy_4
    );
    if let Some(r) = &report.relevance {
        println!("hit@{} {:.3}  mrr {:.3}  ({} probes)", r.k, r.hit_rate, r.mrr, r.probes);
    }
    println!("report -> {}", out.display());
    Ok(())
}

/// Encoder plus, for decoder checkpoints, the decoder.
fn models(path: &Path, vocab: &Vocab) -> Result<(Encoder, Option<Decoder>)> {
    let ckpt = load_checked(path, vocab)?;
    match ckpt.stage {
        Stage::Encoder => Ok((encoder_from_checkpoint(&ckpt)?, None)),
        Stage::Decoder => {
            let (e, d, _) = models_from_checkpoint(&ckpt)?;
            Ok((e, Some(d)))
        }
    }
}

fn default_checkpoint(cfg: &RunConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| {
        let dec = cfg.paths.decoder();
        if dec.exists() {
            dec
        } else {
            cfg.paths.encoder()
        }
    })
}

/// One relevance row: two decimals, selected turns in brackets.
fn alpha_row(alpha: &[f64], selected: &[usize]) -> String {
    alpha
        .iter()
        .enumerate()
        .map(|(i, a)| {
            if selected.contains(&(i + 1)) {
                format!("[{a:.2}]")
            } else {
                format!(" {a:.2} ")
            }
        })
        .collect()
}

fn cmd_inspect(cfg: &RunConfig, dialogue: &Path, id: Option<String>, checkpoint: Option<PathBuf>) -> Result<()> {
    let vocab = load_vocab(cfg)?;
    let (enc, dec) = models(&default_checkpoint(cfg, checkpoint), &vocab)?;
    let corpus = load_encoded(dialogue, &vocab)?;
    let d = match &id {
        Some(id) => corpus
            .iter()
            .find(|d| &d.id == id)
            .ok_or_else(|| Error::invalid("inspect", format!("no dialogue `{id}`")))?,
        None => corpus.first().ok_or(Error::Empty { op: "inspect" })?,
    };
    let rel = enc.infer_dialogue(d)?;
    let mut out = io::stdout().lock();
    let w = |e| Error::io("<stdout>", e);
    writeln!(out, "dialogue {} ({} turns)", d.id, d.len()).map_err(w)?;
    for (i, u) in d.turns.iter().enumerate() {
        writeln!(out, "{:>3} {:?}: {}", i + 1, u.speaker, u.text).map_err(w)?;
    }
    writeln!(out).map_err(w)?;
    writeln!(out, "relevance of turns 1..t for the reply to turn t, [selected]").map_err(w)?;
    for (i, r) in rel.iter().enumerate() {
        let selected = select_relevant(&r.alpha, &cfg.selection)?;
        write!(out, "{:>3} |{}", i + 1, alpha_row(&r.alpha, &selected)).map_err(w)?;
        if let Some(dec) = &dec {
            let history = Dialogue {
                id: d.id.clone(),
                turns: d.turns[..=i].to_vec(),
                annotation: None,
            };
            let (_, hyp) = respond(dec, &cfg.selection, &cfg.generation, &history, r)?;
            write!(out, "  -> {}", normalize_output(&vocab.decode(&hyp.tokens))).map_err(w)?;
        }
        writeln!(out).map_err(w)?;
    }
    Ok(())
}

fn push_turn(
    enc: &Encoder,
    vocab: &Vocab,
    state: &mut EncoderState,
    history: &mut Dialogue,
    text: &str,
) -> Result<RelevanceResult> {
    let mut u = Utterance::new(Speaker::alternate(history.turns.len()), text);
    u.token_ids = vocab.encode(text, MAX_UTTERANCE_TOKENS);
    let r = enc.step(state, &u.token_ids)?;
    history.turns.push(u);
    Ok(r)
}

fn cmd_chat(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let vocab = load_vocab(cfg)?;
    let (enc, dec) = models(&default_checkpoint(cfg, checkpoint), &vocab)?;
    let mut state = EncoderState::new(&enc.cfg);
    let mut history = Dialogue {
        id: "chat".into(),
        turns: Vec::new(),
        annotation: None,
    };
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let w = |e| Error::io("<stdout>", e);
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        let line = line.trim();
        match line {
            "" => continue,
            ":quit" => break,
            ":reset" => {
                state = EncoderState::new(&enc.cfg);
                history.turns.clear();
                writeln!(out, "(history cleared)").map_err(w)?;
                continue;
            }
            _ => {}
        }
        let r = push_turn(&enc, &vocab, &mut state, &mut history, line)?;
        let selected = select_relevant(&r.alpha, &cfg.selection)?;
        writeln!(out, "turn {} |{}", state.t, alpha_row(&r.alpha, &selected)).map_err(w)?;
        if let Some(dec) = &dec {
            let (_, hyp) = respond(dec, &cfg.selection, &cfg.generation, &history, &r)?;
            let reply = normalize_output(&vocab.decode(&hyp.tokens));
            writeln!(out, "bot: {reply}").map_err(w)?;
            if !reply.is_empty() {
                push_turn(&enc, &vocab, &mut state, &mut history, &reply)?;
            }
        }
        out.flush().map_err(w)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let stage = match cli.cmd {
        Cmd::TrainEncoder => StageFlags::Encoder,
        Cmd::TrainDecoder => StageFlags::Decoder,
        _ => StageFlags::Neither,
    };
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &overrides(&cli.global, stage)?)?;
    log::debug!("resolved config: {}", cfg.echo());
    match cli.cmd {
        Cmd::Synth => cmd_synth(&cfg),
        Cmd::TrainEncoder => cmd_train_encoder(&cfg),
        Cmd::TrainDecoder => cmd_train_decoder(&cfg),
        Cmd::Generate { input, checkpoint } => cmd_generate(&cfg, input, checkpoint),
        Cmd::Evaluate {
            input,
            checkpoint,
            candidates,
        } => cmd_evaluate(&cfg, input, checkpoint, candidates),
        Cmd::Inspect {
            dialogue,
            id,
            checkpoint,
        } => cmd_inspect(&cfg, &dialogue, id, checkpoint),
        Cmd::Chat { checkpoint } => cmd_chat(&cfg, checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("LCTX_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
