use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use quase::checkpoint::Checkpoint;
use quase::data_io::{
    align_records, generate_synthetic, load_squad_json, read_jsonl, write_jsonl, SyntheticSpec, TaggingExample,
    TemplateFamily,
};
use quase::downstream::{
    probe_accuracy, probe_examples_from_tagging, read_probe_jsonl, read_tagging_jsonl, sentence_features,
    tagger_span_f1, train_edge_probe, train_tagger, BioTagger, EdgeProbe, FeatureMode, HeadTrainConfig, LabelSet,
    ProbeItem, TaggedSentence, TaggerConfig, TaggerInput,
};
use quase::encoder::{EncoderConfig, Vocabulary};
use quase::pquase::{pooled_pair_representation, PQuaseConfig, PQuaseModel, PQUASE_KIND};
use quase::span_qa::{evaluate, train_qa, EncodedQA, QAExample, TrainConfig, TrainReport};
use quase::squase::{SQuaseConfig, SQuaseModel, Variant, SQUASE_KIND};
use quase::srl_eval::{align_span_files, corpus_overlap_stats, corpus_report, mapping_upper_bound, read_span_file};
use quase::tensor::set_parallel;
use quase::{Error, Result};

#[derive(Parser)]
#[command(name = "quase", version, about = "Question-answer driven sentence encoders")]
struct Cli {
    /// Training configuration file (flat key=value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model checkpoint to write (training) or read (everything else).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Disable intra-op parallelism.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    /// Training data: SQuAD-style `.json` or QA `.jsonl`.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Override config keys, e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct HeadArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f32,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train an s-QuASE model on extractive QA.
    TrainSquase {
        #[command(flatten)]
        data: TrainArgs,
        #[arg(long, default_value = "V")]
        variant: Variant,
    },
    /// Train a p-QuASE model on extractive QA.
    TrainPquase {
        #[command(flatten)]
        data: TrainArgs,
    },
    /// Exact match and F1 of a checkpoint on a QA file.
    EvalQa {
        #[arg(long)]
        data: PathBuf,
    },
    /// Emit h(S) (s-QuASE) or h_A(S) (p-QuASE) as JSON lines.
    Encode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and score an edge probe over frozen s-QuASE encodings.
    Probe {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[command(flatten)]
        head: HeadArgs,
    },
    /// Train and score a BiLSTM BIO tagger, optionally fed s-QuASE features.
    Tag {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long, default_value = "concatenate")]
        mode: FeatureMode,
        #[arg(long, default_value_t = 16)]
        word_dim: usize,
        #[command(flatten)]
        head: HeadArgs,
    },
    /// Map QA answers onto argument spans and score them against gold.
    SrlMapEval {
        #[arg(long)]
        answers: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Write a synthetic QA corpus with its tagging and probing views.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value = "fixed")]
        templates: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if cli.deterministic {
        set_parallel(false);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainSquase { data, variant } => {
            let (vocab, train, dev, cfg) = prepare_training(cli, data)?;
            let mcfg = SQuaseConfig::variant(*variant, EncoderConfig::desk(vocab.len()));
            let mut model = SQuaseModel::new(&mcfg, cfg.seed)?;
            let report = train_qa(&mut model, &train, dev.as_deref(), &cfg)?;
            let ckpt = require_checkpoint(cli)?;
            model.save(ckpt)?;
            vocab.save(vocab_path(ckpt))?;
            print_report(&report)
        }
        Command::TrainPquase { data } => {
            let (vocab, train, dev, cfg) = prepare_training(cli, data)?;
            let mut mcfg = PQuaseConfig::new(EncoderConfig::desk(vocab.len()));
            mcfg.max_seq_len = mcfg.max_seq_len.min(cfg.max_seq_len);
            let mut model = PQuaseModel::new(&mcfg, cfg.seed)?;
            let report = train_qa(&mut model, &train, dev.as_deref(), &cfg)?;
            let ckpt = require_checkpoint(cli)?;
            model.save(ckpt)?;
            vocab.save(vocab_path(ckpt))?;
            print_report(&report)
        }
        Command::EvalQa { data } => {
            let (model, vocab) = load_any(cli)?;
            let examples = encode_all(&load_qa(data)?, &vocab);
            let m = match &model {
                AnyModel::S(m) => evaluate(m, &examples)?,
                AnyModel::P(m) => evaluate(m, &examples)?,
            };
            emit(&json!({"em": m.em, "f1": m.f1, "count": m.count}))
        }
        Command::Encode { data, output } => {
            let (model, vocab) = load_any(cli)?;
            let examples = load_qa(data)?;
            let mut rows = Vec::with_capacity(examples.len());
            for ex in &examples {
                let enc = ex.encode(&vocab);
                rows.push(match &model {
                    AnyModel::S(m) => {
                        let h = m.encode_sentence(&enc.sentence)?;
                        json!({"id": ex.id, "vectors": matrix(h.vectors.data(), m.config.encoder.d_model)})
                    }
                    AnyModel::P(m) => {
                        let c = m.conditional_encode(&enc.sentence, &enc.question)?;
                        let d = m.config.encoder.d_model;
                        let r = c.sentence_range.clone();
                        json!({
                            "id": ex.id,
                            "vectors": matrix(&c.vectors.data()[r.start * d..r.end * d], d),
                            "pooled": pooled_pair_representation(&c)?.to_vec(),
                        })
                    }
                });
            }
            match output {
                Some(p) => write_jsonl(p, &rows),
                None => rows.iter().try_for_each(emit),
            }
        }
        Command::Probe { train, dev, head } => {
            let (model, vocab) = load_squase(cli)?;
            let tr = read_probe_jsonl(train)?;
            let dv = read_probe_jsonl(dev)?;
            let labels = LabelSet::new(sorted_labels(tr.iter().chain(&dv).map(|e| e.label.as_str())));
            let items = |rows: &[quase::downstream::ProbeExample]| -> Result<Vec<ProbeItem>> {
                let ids: Vec<Vec<usize>> = rows.iter().map(|r| token_ids(&r.tokens, &vocab)).collect();
                let feats = sentence_features(&model, &ids)?;
                rows.iter()
                    .zip(feats)
                    .map(|(r, encoding)| {
                        Ok(ProbeItem {
                            encoding,
                            span1: r.span1[0]..r.span1[1],
                            span2: r.span2[0]..r.span2[1],
                            label: labels.require(&r.label)?,
                        })
                    })
                    .collect()
            };
            let (tr_items, dv_items) = (items(&tr)?, items(&dv)?);
            let seed = cli.seed.unwrap_or(0);
            let mut probe = EdgeProbe::new(model.config.encoder.d_model, head.hidden, labels.len(), seed)?;
            let losses = train_edge_probe(&mut probe, &tr_items, &head_config(head, seed))?;
            emit(&json!({
                "losses": losses,
                "train_accuracy": probe_accuracy(&probe, &tr_items)?,
                "dev_accuracy": probe_accuracy(&probe, &dv_items)?,
            }))
        }
        Command::Tag {
            train,
            dev,
            mode,
            word_dim,
            head,
        } => {
            let tr = read_tagging_jsonl(train)?;
            let dv = read_tagging_jsonl(dev)?;
            let labels = LabelSet::for_tags(&[tr.as_slice(), dv.as_slice()].concat());
            let (model, vocab) = match &cli.checkpoint {
                Some(_) => {
                    let (m, v) = load_squase(cli)?;
                    (Some(m), v)
                }
                None => (None, tagging_vocab(&tr, &dv)),
            };
            let feature_dim = model.as_ref().map_or(0, |m| m.config.encoder.d_model);
            let sentences = |rows: &[TaggingExample]| -> Result<Vec<TaggedSentence>> {
                let ids: Vec<Vec<usize>> = rows.iter().map(|r| token_ids(&r.tokens, &vocab)).collect();
                let feats = match &model {
                    Some(m) => sentence_features(m, &ids)?.into_iter().map(Some).collect(),
                    None => vec![None; ids.len()],
                };
                rows.iter()
                    .zip(ids)
                    .zip(feats)
                    .map(|((r, token_ids), features)| {
                        Ok(TaggedSentence {
                            input: TaggerInput { token_ids, features },
                            tags: r.tags.iter().map(|t| labels.require(t)).collect::<Result<_>>()?,
                        })
                    })
                    .collect()
            };
            let (tr_s, dv_s) = (sentences(&tr)?, sentences(&dv)?);
            let seed = cli.seed.unwrap_or(0);
            let tc = TaggerConfig {
                vocab_size: vocab.len(),
                word_dim: *word_dim,
                feature_dim,
                mode: if feature_dim == 0 { FeatureMode::Concatenate } else { *mode },
                hidden: head.hidden,
                n_tags: labels.len(),
            };
            let mut tagger = BioTagger::new(tc, seed)?;
            let losses = train_tagger(&mut tagger, &tr_s, &head_config(head, seed))?;
            let f = tagger_span_f1(&tagger, &dv_s, labels.names())?;
            emit(&json!({"losses": losses, "precision": f.precision, "recall": f.recall, "f1": f.f1}))
        }
        Command::SrlMapEval { answers, gold } => {
            let pairs = align_span_files(&read_span_file(answers)?, &read_span_file(gold)?)?;
            let mapped: Vec<_> = pairs
                .iter()
                .map(|(a, g)| (mapping_upper_bound(a, g), g.clone()))
                .collect();
            emit(&json!({
                "upper_bound": corpus_report(&mapped),
                "overlap": corpus_overlap_stats(&pairs),
            }))
        }
        Command::GenSynthetic { out, n, templates } => {
            let templates = match templates.as_str() {
                "fixed" => TemplateFamily::Fixed,
                "varied" => TemplateFamily::Varied,
                other => return Err(Error::Config(format!("unknown template family {other:?}"))),
            };
            let spec = SyntheticSpec {
                templates,
                ..SyntheticSpec::desk(cli.seed.unwrap_or(7), *n)
            };
            let corpus = generate_synthetic(&spec)?;
            corpus.write(out)?;
            let (probe, _) = probe_examples_from_tagging(&corpus.tagging);
            write_jsonl(out.join("probe.jsonl"), &probe)?;
            emit(&json!({"qa": corpus.qa.len(), "sentences": corpus.tagging.len(), "probe": probe.len()}))
        }
    }
}

enum AnyModel {
    S(SQuaseModel),
    P(PQuaseModel),
}

fn require_checkpoint(cli: &Cli) -> Result<&Path> {
    cli.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

fn vocab_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

fn load_vocab(ckpt: &Path) -> Result<Vocabulary> {
    let p = vocab_path(ckpt);
    if !p.exists() {
        return Err(Error::Checkpoint(format!("{}: vocabulary file missing", p.display())));
    }
    Vocabulary::load(p)
}

fn load_any(cli: &Cli) -> Result<(AnyModel, Vocabulary)> {
    let ckpt = require_checkpoint(cli)?;
    let kind = Checkpoint::read(ckpt)?.header.kind;
    let model = match kind.as_str() {
        SQUASE_KIND => AnyModel::S(SQuaseModel::load(ckpt)?),
        PQUASE_KIND => AnyModel::P(PQuaseModel::load(ckpt)?),
        other => return Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
    };
    Ok((model, load_vocab(ckpt)?))
}

fn load_squase(cli: &Cli) -> Result<(SQuaseModel, Vocabulary)> {
    let ckpt = require_checkpoint(cli)?;
    Ok((SQuaseModel::load(ckpt)?, load_vocab(ckpt)?))
}

fn load_qa(path: &Path) -> Result<Vec<QAExample>> {
    let examples = if path.extension().is_some_and(|e| e == "jsonl") {
        read_jsonl::<QAExample>(path)?
    } else {
        let loaded = load_squad_json(path)?;
        let aligned = align_records(&loaded.records);
        if aligned.report.dropped > 0 || !aligned.report.partial.is_empty() || loaded.skipped_unanswerable > 0 {
            eprintln!(
                "{}: skipped {} unanswerable, dropped {} unalignable, {} partial",
                path.display(),
                loaded.skipped_unanswerable,
                aligned.report.dropped,
                aligned.report.partial.len()
            );
        }
        aligned.examples
    };
    for ex in &examples {
        ex.validate()?;
    }
    Ok(examples)
}

fn encode_all(examples: &[QAExample], vocab: &Vocabulary) -> Vec<EncodedQA> {
    examples.iter().map(|e| e.encode(vocab)).collect()
}

type Prepared = (Vocabulary, Vec<EncodedQA>, Option<Vec<EncodedQA>>, TrainConfig);

fn prepare_training(cli: &Cli, args: &TrainArgs) -> Result<Prepared> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::preset("desk")?,
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let train = load_qa(&args.train)?;
    let dev = args.dev.as_deref().map(load_qa).transpose()?;
    let texts: Vec<String> = train
        .iter()
        .chain(dev.iter().flatten())
        .flat_map(|e| [e.sentence.join(" "), e.question.join(" ")])
        .collect();
    let vocab = Vocabulary::build(texts.iter().map(String::as_str));
    let tr = encode_all(&train, &vocab);
    let dv = dev.map(|d| encode_all(&d, &vocab));
    Ok((vocab, tr, dv, cfg))
}

fn tagging_vocab(a: &[TaggingExample], b: &[TaggingExample]) -> Vocabulary {
    let mut v = Vocabulary::new();
    for t in a.iter().chain(b).flat_map(|e| &e.tokens) {
        v.add(t);
    }
    v
}

fn token_ids(tokens: &[String], vocab: &Vocabulary) -> Vec<usize> {
    tokens.iter().map(|t| vocab.id(t)).collect()
}

fn sorted_labels<'a>(it: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut v: Vec<&str> = it.collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn head_config(h: &HeadArgs, seed: u64) -> HeadTrainConfig {
    HeadTrainConfig {
        epochs: h.epochs,
        lr: h.lr,
        batch_size: h.batch_size,
        seed,
    }
}

fn matrix(data: &[f32], d: usize) -> Vec<Vec<f32>> {
    data.chunks(d).map(<[f32]>::to_vec).collect()
}

fn emit(v: &serde_json::Value) -> Result<()> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match writeln!(out, "{v}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn print_report(report: &TrainReport) -> Result<()> {
    for r in &report.epochs {
        emit(&json!({
            "epoch": r.epoch,
            "loss": r.loss,
            "train_em": r.train.map(|m| m.em),
            "dev_em": r.dev.map(|m| m.em),
            "dev_f1": r.dev.map(|m| m.f1),
        }))?;
    }
    emit(&json!({
        "steps": report.steps,
        "final_train": report.final_train,
        "final_dev": report.final_dev,
    }))
}
