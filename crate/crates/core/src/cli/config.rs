//! Run configuration document and the data preparation it drives.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    attach_labels, dedupe_cap, load_split, normalize_per_speaker, plan_buckets, subsample_fraction, Utterance,
    DEDUPE_CAP,
};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::multitask::{MultitaskSpec, Regime};
use crate::tokenize::{learn_bpe, word_counts, Lexicon, WordpieceVocab};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory holding `train`/`dev` splits and `lexicon.txt`.
    pub dir: Option<PathBuf>,
    pub fraction: f64,
    pub dedupe_cap: usize,
    pub vocab_size: usize,
    /// Prebuilt vocabulary; learned from the training transcripts when absent.
    pub vocab: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            fraction: 1.0,
            dedupe_cap: DEDUPE_CAP,
            vocab_size: 200,
            vocab: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let desk = EncoderConfig::desk_scale(1);
        Self {
            num_layers: desk.num_layers,
            hidden: desk.hidden,
            dropout: desk.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultitaskSection {
    pub regime: Regime,
    /// Defaults to 1 for `baseline`/`pretrain` and 0.5 otherwise.
    pub lambda: Option<f64>,
    /// Defaults to the middle layer, `⌈N/2⌉`.
    pub aux_layer: Option<usize>,
}

impl Default for MultitaskSection {
    fn default() -> Self {
        Self {
            regime: Regime::Multitask,
            lambda: None,
            aux_layer: None,
        }
    }
}

/// The single document configuring a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub multitask: MultitaskSection,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataSection::default(),
            encoder: EncoderSection::default(),
            multitask: MultitaskSection::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Parses JSON into `T`, reporting schema violations with their field path.
pub fn parse_document<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::config(if field == "." { "<root>".to_owned() } else { field }, e.into_inner().to_string())
    })
}

pub fn read_document<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_document(&text)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_document(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn multitask_spec(&self) -> MultitaskSpec {
        let regime = self.multitask.regime;
        let lambda = self.multitask.lambda.unwrap_or(match regime {
            Regime::Baseline | Regime::Pretrain => 1.0,
            Regime::Multitask | Regime::PretrainMultitask => 0.5,
        });
        MultitaskSpec {
            regime,
            lambda,
            aux_layer: self.multitask.aux_layer.unwrap_or(self.encoder.num_layers.div_ceil(2)),
        }
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.encoder.num_layers,
            hidden: self.encoder.hidden,
            dropout: self.encoder.dropout,
            input_dim,
        }
    }

    /// Semantic checks beyond the schema.
    pub fn validate(&self) -> Result<()> {
        self.encoder_config(1).validate()?;
        self.multitask_spec().validate(self.encoder.num_layers)?;
        self.train.validate()?;
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return Err(Error::config("data.fraction", format!("{} is not in (0, 1]", self.data.fraction)));
        }
        if self.data.dedupe_cap == 0 {
            return Err(Error::config("data.dedupe_cap", "must be positive"));
        }
        Ok(())
    }
}

/// Labeled, normalized splits plus the label inventories.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub vocab: WordpieceVocab,
    pub lexicon: Lexicon,
}

impl PreparedData {
    pub fn input_dim(&self) -> usize {
        self.train.first().map_or(0, |u| u.features.cols())
    }
}

/// Training transcripts' wordpiece vocabulary.
pub fn learn_vocab(train: &[Utterance], size: usize) -> Result<WordpieceVocab> {
    let counts = word_counts(train.iter().map(|u| u.words.as_slice()));
    learn_bpe(&counts, size)
}

/// dedupe → per-speaker normalization → labels. The vocabulary is learned on
/// the full deduplicated training set unless one is supplied.
pub fn prepare_full(
    train: Vec<Utterance>,
    mut dev: Vec<Utterance>,
    lexicon: Lexicon,
    vocab: Option<WordpieceVocab>,
    data: &DataSection,
) -> Result<PreparedData> {
    let mut train = dedupe_cap(train, data.dedupe_cap);
    normalize_per_speaker(&mut train);
    normalize_per_speaker(&mut dev);
    let vocab = match vocab {
        Some(v) => v,
        None => learn_vocab(&train, data.vocab_size)?,
    };
    let (train, _) = attach_labels(train, Some(&vocab), Some(&lexicon))?;
    let (dev, _) = attach_labels(dev, Some(&vocab), Some(&lexicon))?;
    Ok(PreparedData {
        train,
        dev,
        vocab,
        lexicon,
    })
}

/// Stratified training subset for one run.
pub fn training_subset(train: &[Utterance], fraction: f64, batch_sizes: [usize; 5], seed: u64) -> Result<Vec<Utterance>> {
    if fraction == 1.0 {
        return Ok(train.to_vec());
    }
    let lengths: Vec<usize> = train.iter().map(Utterance::frames).collect();
    let plan = plan_buckets(&lengths, batch_sizes)?;
    let keep = subsample_fraction(&plan.assign(&lengths), fraction, seed)?;
    Ok(keep.into_iter().map(|k| train[k].clone()).collect())
}

/// Loads the splits named by the config from disk and prepares them.
pub fn prepare_from_disk(cfg: &RunConfig) -> Result<PreparedData> {
    let dir = cfg
        .data
        .dir
        .as_deref()
        .ok_or_else(|| Error::config("data.dir", "no data directory given"))?;
    if !dir.is_dir() {
        return Err(Error::config("data.dir", format!("{} is not a directory", dir.display())));
    }
    let lexicon = Lexicon::load(&dir.join("lexicon.txt"))?;
    let vocab = cfg.data.vocab.as_deref().map(WordpieceVocab::load).transpose()?;
    prepare_full(load_split(dir, "train")?, load_split(dir, "dev")?, lexicon, vocab, &cfg.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_errors_name_the_field() {
        let err = parse_document::<RunConfig>(r#"{"encoder": {"hidden": 8, "depth": 3}}"#).unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "encoder.depth"),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_document::<RunConfig>(r#"{"train": {"adam": {"lr": "fast"}}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { field, .. } if field == "train.adam.lr"));
    }

    #[test]
    fn regime_dependent_lambda_default() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.multitask_spec().lambda, 0.5);
        assert_eq!(cfg.multitask_spec().aux_layer, 3);
        cfg.multitask.regime = Regime::Baseline;
        assert_eq!(cfg.multitask_spec().lambda, 1.0);
        cfg.multitask.lambda = Some(0.5);
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "multitask.lambda"));
    }
}
