//! Command-line surface: `synth`, `vocab`, `train`, `eval`, `sweep`, `align`.
//!
//! Settings resolve with precedence flag > config document > default.
//! Configuration and precondition errors exit with status 2, every other
//! failure with status 1.

pub mod config;
pub mod sweep;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ctc::{argmax_path, BLANK};
use crate::data::{
    attach_labels, gen_synthetic, load_spans, load_split, normalize_per_speaker, save_synthetic, transcripts_from_text,
    SyntheticSpec, Utterance,
};
use crate::encoder::TIME_REDUCTION;
use crate::error::{Error, Result};
use crate::multitask::{phone_log_probs, subword_log_probs, Regime};
use crate::tokenize::{learn_bpe, Lexicon, WordpieceVocab};
use crate::train::{eval_report, run_regime, Checkpoint, RegimeData};
use config::{prepare_from_disk, read_document, training_subset, RunConfig};
use sweep::{plan_cells, render_table, run_cells, Axis};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const LEXICON_FILE: &str = "lexicon.txt";

#[derive(Debug, Parser)]
#[command(name = "hmctc", version, about = "Hierarchical multitask CTC recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration document.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the seeded synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Learn a wordpiece vocabulary from a transcript file (`id<TAB>words`).
    Vocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        size: usize,
    },
    /// Train one regime; writes metrics and the best checkpoint under `--out`.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Evaluate a checkpoint on a data split and print the report as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        /// Also report PER; fails if the model has no phone head.
        #[arg(long)]
        per: bool,
    },
    /// Run a grid of seeded cells and emit a TSV table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: RunOverrides,
        #[arg(long)]
        axis: Axis,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
        /// Comma-separated regimes crossed with the grid (ignored for the regime axis).
        #[arg(long, value_delimiter = ',')]
        regimes: Vec<Regime>,
        /// Comma-separated seeds; defaults to the resolved seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Dump per-frame argmax labels of a checkpoint as a TSV table.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        /// Comma-separated utterance ids; all utterances when empty.
        #[arg(long, value_delimiter = ',')]
        utterances: Vec<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct RunOverrides {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub aux_layer: Option<usize>,
    #[arg(long)]
    pub fraction: Option<f64>,
}

/// Maps an error to the process exit status.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Capability(_) | Error::Compatibility(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => cmd_synth(&common),
        Command::Vocab { common, corpus, size } => cmd_vocab(&common, &corpus, size),
        Command::Train { common, overrides } => cmd_train(&common, &overrides),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            per,
        } => cmd_eval(&common, &checkpoint, &data, &split, per),
        Command::Sweep {
            common,
            overrides,
            axis,
            grid,
            regimes,
            seeds,
            jobs,
        } => cmd_sweep(&common, &overrides, axis, &grid, &regimes, &seeds, jobs),
        Command::Align {
            common,
            checkpoint,
            data,
            split,
            utterances,
            limit,
        } => cmd_align(&common, &checkpoint, &data, &split, &utterances, limit),
    }
}

fn required_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| Error::config("--out", "an output path is required"))
}

/// Creates `dir` (one level only); its parent must exist.
fn create_out_dir(dir: &Path) -> Result<()> {
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(Error::config(
            "--out",
            format!("parent directory {} does not exist", parent.display()),
        ));
    }
    if !dir.is_dir() {
        fs::create_dir(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn cmd_synth(common: &Common) -> Result<()> {
    let mut spec: SyntheticSpec = match &common.config {
        Some(p) => read_document(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let out = required_out(common)?;
    create_out_dir(out)?;
    let data = gen_synthetic(&spec)?;
    save_synthetic(out, &spec, &data)?;
    println!(
        "{}",
        serde_json::json!({
            "out": out.display().to_string(),
            "train": data.train.len(),
            "dev": data.dev.len(),
            "test": data.test.len(),
            "phones": data.lexicon.num_phones() - 1,
            "seed": spec.seed,
        })
    );
    Ok(())
}

fn cmd_vocab(common: &Common, corpus: &Path, size: usize) -> Result<()> {
    let text = fs::read_to_string(corpus).map_err(|e| Error::io(corpus, e))?;
    let transcripts = transcripts_from_text(&text).map_err(|m| Error::format(corpus, m))?;
    let counts = crate::tokenize::word_counts(transcripts.values().map(Vec::as_slice));
    let vocab = learn_bpe(&counts, size)?;
    let out = required_out(common)?;
    vocab.save(out)?;
    println!(
        "{}",
        serde_json::json!({ "pieces": vocab.len(), "merges": vocab.merges().len(), "out": out.display().to_string() })
    );
    Ok(())
}

/// Config document (or defaults) with command-line overrides applied.
pub fn resolve_config(common: &Common, overrides: &RunOverrides) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => read_document::<RunConfig>(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &overrides.data {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(r) = overrides.regime {
        cfg.multitask.regime = r;
    }
    if let Some(l) = overrides.lambda {
        cfg.multitask.lambda = Some(l);
    }
    if let Some(i) = overrides.aux_layer {
        cfg.multitask.aux_layer = Some(i);
    }
    if let Some(f) = overrides.fraction {
        cfg.data.fraction = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(common: &Common, overrides: &RunOverrides) -> Result<()> {
    let cfg = resolve_config(common, overrides)?;
    let out = required_out(common)?;
    create_out_dir(out)?;
    let data = prepare_from_disk(&cfg)?;
    let subset = training_subset(&data.train, cfg.data.fraction, cfg.train.batch_sizes, cfg.seed)?;
    write_text(&out.join("config.json"), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
    let encoder = cfg.encoder_config(data.input_dim());
    let regime_data = RegimeData {
        train: &subset,
        dev: &data.dev,
        vocab: &data.vocab,
        phone_classes: data.lexicon.num_phones(),
    };
    let outcome = run_regime(&cfg.multitask_spec(), &encoder, &regime_data, &cfg.train, cfg.seed, Some(out))?;
    let best = out.join("best");
    data.vocab.save(&best.join(VOCAB_FILE))?;
    data.lexicon.save(&best.join(LEXICON_FILE))?;
    let result = sweep::CellResult::from_outcome(&outcome);
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

/// Checkpoint plus the label inventories stored next to it.
fn load_checkpoint(dir: &Path) -> Result<(Checkpoint, WordpieceVocab, Lexicon)> {
    let ckpt = Checkpoint::load(dir)?;
    let vocab = WordpieceVocab::load(&dir.join(VOCAB_FILE))?;
    let lexicon = Lexicon::load(&dir.join(LEXICON_FILE))?;
    Ok((ckpt, vocab, lexicon))
}

fn load_eval_split(data: &Path, split: &str, vocab: &WordpieceVocab, lexicon: &Lexicon) -> Result<Vec<Utterance>> {
    let mut utts = load_split(data, split)?;
    normalize_per_speaker(&mut utts);
    Ok(attach_labels(utts, Some(vocab), Some(lexicon))?.0)
}

fn cmd_eval(common: &Common, checkpoint: &Path, data: &Path, split: &str, per: bool) -> Result<()> {
    let (ckpt, vocab, lexicon) = load_checkpoint(checkpoint)?;
    if per && ckpt.model.shape.phone.is_none() {
        return Err(Error::Capability("checkpoint has no phone head; PER is unavailable".into()));
    }
    let utts = load_eval_split(data, split, &vocab, &lexicon)?;
    let refs: Vec<&Utterance> = utts.iter().collect();
    let report = eval_report(&ckpt.model, Some(&vocab), &refs, per)?;
    let json = serde_json::to_string(&report)?;
    if let Some(out) = &common.out {
        write_text(out, &(json.clone() + "\n"))?;
    }
    println!("{json}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    common: &Common,
    overrides: &RunOverrides,
    axis: Axis,
    grid: &[String],
    regimes: &[Regime],
    seeds: &[u64],
    jobs: usize,
) -> Result<()> {
    let cfg = resolve_config(common, overrides)?;
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let regimes = if regimes.is_empty() { vec![cfg.multitask.regime] } else { regimes.to_vec() };
    let cells = plan_cells(&cfg, axis, grid, &regimes, &seeds)?;
    if let Some(out) = &common.out {
        create_out_dir(out)?;
    }
    let data = prepare_from_disk(&cfg)?;
    let results = run_cells(&data, &cfg, &cells, jobs, common.out.as_deref());
    let table = render_table(axis, &cells, &results);
    if let Some(out) = &common.out {
        write_text(&out.join("results.tsv"), &table)?;
    }
    print!("{table}");
    Ok(())
}

/// Blank-aware label of one argmax frame.
fn cell_label(id: usize, name: Option<&str>) -> String {
    if id == BLANK {
        "_".to_owned()
    } else {
        name.unwrap_or("?").to_owned()
    }
}

/// Word covering each paired frame, from original-frame spans.
pub fn word_row(words: &[String], spans: &[(usize, usize)], paired_frames: usize) -> Vec<String> {
    (0..paired_frames)
        .map(|t| {
            let frame = t * TIME_REDUCTION;
            spans
                .iter()
                .zip(words)
                .find(|((a, b), _)| (*a..*b).contains(&frame))
                .map_or_else(|| "_".to_owned(), |(_, w)| w.clone())
        })
        .collect()
}

fn cmd_align(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    ids: &[String],
    limit: Option<usize>,
) -> Result<()> {
    let (ckpt, vocab, lexicon) = load_checkpoint(checkpoint)?;
    let model = &ckpt.model;
    let mut utts = load_eval_split(data, split, &vocab, &lexicon)?;
    if !ids.is_empty() {
        utts.retain(|u| ids.contains(&u.id));
        if utts.len() != ids.len() {
            return Err(Error::config("--utterances", "some utterance ids are not in the split"));
        }
    }
    if let Some(n) = limit {
        utts.truncate(n);
    }
    let refs: Vec<&Utterance> = utts.iter().collect();
    let subword = subword_log_probs(model, &refs)?;
    let phone = if model.shape.phone.is_some() {
        Some(phone_log_probs(model, &refs)?)
    } else {
        log::warn!("checkpoint has no phone head; omitting the phone row");
        None
    };
    let spans = load_spans(data, split)?;
    if spans.is_none() {
        log::warn!("no word spans for split {split}; omitting the word row");
    }
    let mut out = String::new();
    for (k, u) in refs.iter().enumerate() {
        let frames = subword[k].rows();
        let row = |name: &str, cells: Vec<String>, out: &mut String| {
            writeln!(out, "{}\t{name}\t{}", u.id, cells.join("\t")).unwrap();
        };
        row(
            "subword",
            argmax_path(&subword[k]).into_iter().map(|i| cell_label(i, vocab.piece(i))).collect(),
            &mut out,
        );
        if let Some(p) = &phone {
            row(
                "phone",
                argmax_path(&p[k]).into_iter().map(|i| cell_label(i, lexicon.phone_name(i))).collect(),
                &mut out,
            );
        }
        if let Some(s) = spans.as_ref().and_then(|m| m.get(&u.id)) {
            row("words", word_row(&u.words, s, frames), &mut out);
        }
    }
    match &common.out {
        Some(path) => write_text(path, &out)?,
        None => print!("{out}"),
    }
    Ok(())
}
