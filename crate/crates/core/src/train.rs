//! Adam, the dev-WER learning-rate schedule, early stopping, evaluation, and
//! the training loop.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ctc::greedy_decode;
use crate::data::{plan_buckets, Utterance, NUM_BUCKETS};
use crate::encoder::{EncoderConfig, TIME_REDUCTION};
use crate::error::{Error, Result};
use crate::multitask::{
    batch_loss, init_from_pretrained, phone_log_probs, subword_log_probs, LossWeights, Model, ModelShape,
    MultitaskSpec, PretrainCheckpoint,
};
use crate::numeric::io::{load_params, save_params};
use crate::numeric::{named_rng, Graph, ParamStore, Tensor};
use crate::tokenize::WordpieceVocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.adam.lr", "must be positive"));
        }
        for (field, b) in [("train.adam.beta1", self.beta1), ("train.adam.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.adam.eps", "must be positive"));
        }
        Ok(())
    }
}

/// First and second moments, aligned with the parameter store order.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr` from the gradients in `store`.
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig, lr: f64, update: usize) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for p in store.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
                update,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let (value, grad) = (p.value.data_mut(), p.grad.data());
        for (((x, g), m), v) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Updates between dev evaluations.
    pub checkpoint_interval: usize,
    /// No learning-rate reduction before this many updates.
    pub warm_updates: usize,
    /// Non-improving checkpoints before stopping.
    pub patience: usize,
    /// Checkpoints the current dev metric is compared against.
    pub lookback: usize,
    /// Hard cap on updates.
    pub max_updates: usize,
}

impl ScheduleConfig {
    pub fn paper_scale() -> Self {
        Self {
            checkpoint_interval: 500,
            warm_updates: 25_000,
            patience: 10,
            lookback: 3,
            max_updates: usize::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_interval == 0 {
            return Err(Error::config("train.schedule.checkpoint_interval", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.schedule.patience", "must be positive"));
        }
        if self.lookback == 0 {
            return Err(Error::config("train.schedule.lookback", "must be positive"));
        }
        if self.max_updates == 0 {
            return Err(Error::config("train.schedule.max_updates", "must be positive"));
        }
        Ok(())
    }
}

impl Default for ScheduleConfig {
    /// Desk-scale schedule.
    fn default() -> Self {
        Self {
            checkpoint_interval: 100,
            warm_updates: 1000,
            patience: 10,
            lookback: 3,
            max_updates: 4000,
        }
    }
}

/// Dev-metric history driving learning-rate halving and early stopping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub lr: f64,
    pub history: Vec<f64>,
    pub best: Option<usize>,
    pub stale: usize,
    pub halvings: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointOutcome {
    pub improved: bool,
    pub halved: bool,
}

impl ScheduleState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            history: Vec::new(),
            best: None,
            stale: 0,
            halvings: 0,
        }
    }

    pub fn best_value(&self) -> Option<f64> {
        self.best.map(|k| self.history[k])
    }

    /// True iff the lr should halve: past the warm period, with `lookback`
    /// earlier checkpoints, and `current` worse than all of them.
    pub fn lr_update(&self, current: f64, updates: usize, cfg: &ScheduleConfig) -> bool {
        let n = self.history.len();
        if updates < cfg.warm_updates || n < cfg.lookback {
            return false;
        }
        let worst = self.history[n - cfg.lookback..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        current > worst
    }

    /// Records a checkpoint; halves the lr at most once.
    pub fn record(&mut self, metric: f64, updates: usize, cfg: &ScheduleConfig) -> CheckpointOutcome {
        let halved = self.lr_update(metric, updates, cfg);
        if halved {
            self.lr /= 2.0;
            self.halvings += 1;
        }
        let improved = self.best_value().is_none_or(|b| metric < b);
        self.history.push(metric);
        if improved {
            self.best = Some(self.history.len() - 1);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        CheckpointOutcome { improved, halved }
    }

    pub fn should_stop(&self, cfg: &ScheduleConfig) -> bool {
        self.stale >= cfg.patience
    }
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Word,
    Phone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ErrorCounts {
    pub errors: usize,
    pub reference: usize,
}

impl ErrorCounts {
    /// Corpus-level error rate in percent.
    pub fn rate(&self) -> f64 {
        if self.reference == 0 {
            if self.errors == 0 {
                0.0
            } else {
                100.0
            }
        } else {
            100.0 * self.errors as f64 / self.reference as f64
        }
    }
}

/// Word hypotheses from greedy subword decoding, joined at end-of-word markers.
pub fn decode_words(model: &Model, vocab: &WordpieceVocab, utterances: &[&Utterance]) -> Result<Vec<Vec<String>>> {
    let log_probs = subword_log_probs(model, utterances)?;
    Ok(log_probs.iter().map(|lp| vocab.decode(greedy_decode(lp).ids())).collect())
}

/// WER or PER over `utterances`.
pub fn evaluate(
    model: &Model,
    vocab: Option<&WordpieceVocab>,
    utterances: &[&Utterance],
    level: Level,
) -> Result<ErrorCounts> {
    let mut counts = ErrorCounts::default();
    match level {
        Level::Word => {
            let vocab = vocab.ok_or_else(|| Error::Capability("word error rate needs the wordpiece vocabulary".into()))?;
            for (u, hyp) in utterances.iter().zip(decode_words(model, vocab, utterances)?) {
                counts.errors += edit_distance(&u.words, &hyp);
                counts.reference += u.words.len();
            }
        }
        Level::Phone => {
            let log_probs = phone_log_probs(model, utterances)?;
            for (u, lp) in utterances.iter().zip(&log_probs) {
                let reference = u
                    .phones
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("utterance {} has no phone labels", u.id)))?;
                counts.errors += edit_distance(reference.ids(), greedy_decode(lp).ids());
                counts.reference += reference.len();
            }
        }
    }
    Ok(counts)
}

/// Dev metrics of one checkpoint. Wall time is kept out of this record so
/// that logs of identical runs are byte-identical; it goes to a sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub checkpoint: usize,
    pub updates: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_subword: Option<f64>,
    pub loss_phone: Option<f64>,
    pub dev_wer: Option<f64>,
    pub dev_per: Option<f64>,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub wer: Option<f64>,
    pub per: Option<f64>,
}

/// WER when the model and vocabulary allow it; PER when `with_phone` and a phone head exist.
pub fn eval_report(model: &Model, vocab: Option<&WordpieceVocab>, utterances: &[&Utterance], with_phone: bool) -> Result<EvalReport> {
    let wer = match (model.shape.subword, vocab) {
        (Some(_), Some(v)) => Some(evaluate(model, Some(v), utterances, Level::Word)?.rate()),
        _ => None,
    };
    let per = if with_phone && model.shape.phone.is_some() {
        Some(evaluate(model, None, utterances, Level::Phone)?.rate())
    } else {
        None
    };
    Ok(EvalReport {
        utterances: utterances.len(),
        wer,
        per,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub schedule: ScheduleConfig,
    pub batch_sizes: [usize; NUM_BUCKETS],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            schedule: ScheduleConfig::default(),
            batch_sizes: crate::data::DESK_BATCH_SIZES,
        }
    }
}

impl TrainConfig {
    pub fn paper_scale() -> Self {
        Self {
            adam: AdamConfig::default(),
            schedule: ScheduleConfig::paper_scale(),
            batch_sizes: crate::data::PAPER_BATCH_SIZES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.schedule.validate()?;
        if self.batch_sizes.contains(&0) {
            return Err(Error::config("train.batch_sizes", "batch sizes must be positive"));
        }
        Ok(())
    }
}

/// Which dev metric selects the best checkpoint and drives the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    DevWer,
    DevPer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    DidNotConverge,
}

/// Best model selected during one training phase.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_metric: f64,
    pub best_checkpoint: Option<usize>,
    pub status: RunStatus,
    pub reason: Option<String>,
    pub log: Vec<MetricsReport>,
    pub updates: usize,
    pub schedule: ScheduleState,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub reason: Option<String>,
    pub best_checkpoint: Option<usize>,
    pub best_metric: f64,
    pub selection: Selection,
    pub updates: usize,
}

/// Everything one training phase needs.
pub struct TrainJob<'a> {
    pub model: Model,
    pub weights: LossWeights,
    pub selection: Selection,
    pub train: &'a [Utterance],
    pub dev: &'a [Utterance],
    pub vocab: Option<&'a WordpieceVocab>,
    pub config: &'a TrainConfig,
    pub seed: u64,
    /// Directory for `metrics.jsonl`, `timing.jsonl`, `summary.json` and `best/`.
    pub out_dir: Option<&'a Path>,
}

fn feasible(u: &Utterance, weights: LossWeights) -> bool {
    let frames = u.frames().div_ceil(TIME_REDUCTION);
    let ok = |labels: &Option<crate::ctc::LabelSequence>| labels.as_ref().is_some_and(|z| z.feasible_in(frames));
    (weights.subword == 0.0 || ok(&u.subword)) && (weights.phone == 0.0 || ok(&u.phones))
}

struct LogSink {
    metrics: File,
    timing: File,
}

impl LogSink {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map_err(|e| Error::io(p, e))
        };
        Ok(Self {
            metrics: open("metrics.jsonl")?,
            timing: open("timing.jsonl")?,
        })
    }

    fn write(&mut self, dir: &Path, report: &MetricsReport, wall: f64) -> Result<()> {
        let line = serde_json::to_string(report)? + "\n";
        self.metrics
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(dir.join("metrics.jsonl"), e))?;
        let t = serde_json::json!({ "checkpoint": report.checkpoint, "wall_seconds": wall });
        self.timing
            .write_all(format!("{t}\n").as_bytes())
            .map_err(|e| Error::io(dir.join("timing.jsonl"), e))
    }
}

/// Trains until early stopping or the update cap, evaluating the dev set
/// every checkpoint interval. Divergence ends the run with status
/// `did_not_converge` and keeps the last good best checkpoint.
pub fn run_training(job: TrainJob<'_>) -> Result<TrainOutcome> {
    job.config.validate()?;
    let TrainJob {
        mut model,
        weights,
        selection,
        train,
        dev,
        vocab,
        config,
        seed,
        out_dir,
    } = job;
    let cfg = &config.schedule;
    let usable: Vec<usize> = (0..train.len()).filter(|&k| feasible(&train[k], weights)).collect();
    if usable.len() < train.len() {
        log::warn!("skipping {} infeasible training utterances", train.len() - usable.len());
    }
    if usable.is_empty() {
        return Err(Error::Data("no training utterance has feasible targets".into()));
    }
    let lengths: Vec<usize> = train.iter().map(Utterance::frames).collect();
    let usable_lengths: Vec<usize> = usable.iter().map(|&k| lengths[k]).collect();
    let plan = plan_buckets(&usable_lengths, config.batch_sizes)?;
    let dev_refs: Vec<&Utterance> = dev.iter().collect();

    let mut shuffle_rng = named_rng(seed, "train.shuffle");
    let mut dropout_rng = named_rng(seed, "train.dropout");
    let mut adam = AdamState::new(&model.params);
    let mut schedule = ScheduleState::new(config.adam.lr);
    let mut sink = out_dir.map(LogSink::open).transpose()?;
    let start = Instant::now();

    let initial = model.clone();
    let mut best: Option<Model> = None;
    let mut log = Vec::new();
    let mut updates = 0usize;
    let mut epoch = 0usize;
    let mut failure: Option<String> = None;
    let (mut sum_total, mut sum_sub, mut sum_ph, mut n_batches) = (0.0, 0.0, 0.0, 0usize);

    'outer: loop {
        epoch += 1;
        for batch_idx in plan.batches(&usable, &lengths, &mut shuffle_rng) {
            let batch: Vec<&Utterance> = batch_idx.iter().map(|&k| &train[k]).collect();
            let mut graph = Graph::new();
            model.params.zero_grads();
            let loss = batch_loss(&mut graph, &model, &batch, weights, Some(&mut dropout_rng))?;
            let total = graph.value(loss.total).data()[0];
            if !total.is_finite() {
                failure = Some(format!("non-finite loss {total} at update {}", updates + 1));
                break 'outer;
            }
            graph.backward(loss.total)?;
            graph.accumulate_param_grads(&mut model.params)?;
            match adam_step(&mut model.params, &mut adam, &config.adam, schedule.lr, updates + 1) {
                Ok(()) => {}
                Err(e @ Error::NonFiniteGradient { .. }) => {
                    failure = Some(e.to_string());
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
            updates += 1;
            sum_total += total;
            sum_sub += loss.subword.unwrap_or(0.0);
            sum_ph += loss.phone.unwrap_or(0.0);
            n_batches += 1;

            let at_cap = updates >= cfg.max_updates;
            if updates % cfg.checkpoint_interval == 0 || at_cap {
                let report = eval_report(&model, vocab, &dev_refs, weights.phone > 0.0)?;
                let metric = match selection {
                    Selection::DevWer => report.wer,
                    Selection::DevPer => report.per,
                }
                .ok_or_else(|| Error::Capability(format!("model cannot report the {selection:?} selection metric")))?;
                let lr_used = schedule.lr;
                let outcome = schedule.record(metric, updates, cfg);
                if outcome.improved {
                    best = Some(model.clone());
                }
                let n = n_batches as f64;
                let entry = MetricsReport {
                    checkpoint: schedule.history.len(),
                    updates,
                    epoch,
                    lr: lr_used,
                    loss: sum_total / n,
                    loss_subword: loss.subword.map(|_| sum_sub / n),
                    loss_phone: loss.phone.map(|_| sum_ph / n),
                    dev_wer: report.wer,
                    dev_per: report.per,
                    best: outcome.improved,
                };
                log::info!(
                    "checkpoint {} updates {} loss {:.4} dev {:?} {:.2}",
                    entry.checkpoint,
                    updates,
                    entry.loss,
                    selection,
                    metric
                );
                if let (Some(s), Some(dir)) = (sink.as_mut(), out_dir) {
                    s.write(dir, &entry, start.elapsed().as_secs_f64())?;
                }
                log.push(entry);
                (sum_total, sum_sub, sum_ph, n_batches) = (0.0, 0.0, 0.0, 0);
                if at_cap || schedule.should_stop(cfg) {
                    break 'outer;
                }
            }
        }
    }

    let (best, best_metric) = match best {
        Some(m) => (m, schedule.best_value().expect("best recorded with a model")),
        None => {
            // diverged before the first checkpoint: nothing better than the initial weights
            let report = eval_report(&initial, vocab, &dev_refs, weights.phone > 0.0)?;
            let metric = match selection {
                Selection::DevWer => report.wer,
                Selection::DevPer => report.per,
            }
            .unwrap_or(100.0);
            (initial, metric)
        }
    };
    let status = if failure.is_some() || best_metric >= 100.0 {
        RunStatus::DidNotConverge
    } else {
        RunStatus::Converged
    };
    let reason = failure.or_else(|| (status == RunStatus::DidNotConverge).then(|| "best dev error rate is 100%".to_owned()));
    let outcome = TrainOutcome {
        best,
        best_metric,
        best_checkpoint: schedule.best.map(|k| k + 1),
        status,
        reason,
        log,
        updates,
        schedule,
    };
    if let Some(dir) = out_dir {
        let summary = RunSummary {
            status: outcome.status,
            reason: outcome.reason.clone(),
            best_checkpoint: outcome.best_checkpoint,
            best_metric: outcome.best_metric,
            selection,
            updates: outcome.updates,
        };
        let path = dir.join("summary.json");
        fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
        Checkpoint {
            model: outcome.best.clone(),
            state: CheckpointState {
                updates: outcome.updates,
                schedule: outcome.schedule.clone(),
                seed,
            },
        }
        .save(&dir.join("best"))?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub updates: usize,
    pub schedule: ScheduleState,
    pub seed: u64,
}

/// Model parameters, shape, and schedule state in one directory.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub state: CheckpointState,
}

pub const CHECKPOINT_PARAMS: &str = "params.bin";
pub const CHECKPOINT_MODEL: &str = "model.json";
pub const CHECKPOINT_STATE: &str = "state.json";

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<()> {
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: PathBuf) -> Result<T> {
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(&self.model.params, &dir.join(CHECKPOINT_PARAMS))?;
        write_json(dir.join(CHECKPOINT_MODEL), &self.model.shape)?;
        write_json(dir.join(CHECKPOINT_STATE), &self.state)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let shape: ModelShape = read_json(dir.join(CHECKPOINT_MODEL))?;
        let state: CheckpointState = read_json(dir.join(CHECKPOINT_STATE))?;
        let params = load_params(&dir.join(CHECKPOINT_PARAMS))?;
        let reference = Model::init(shape.clone(), 0)?;
        let names_match = reference.params.len() == params.len()
            && reference
                .params
                .iter()
                .all(|p| params.by_name(&p.name).is_some_and(|q| q.value.shape() == p.value.shape()));
        if !names_match {
            return Err(Error::Compatibility(format!(
                "parameters in {} do not match the recorded model shape",
                dir.display()
            )));
        }
        let mut ordered = reference.params;
        for p in ordered.iter_mut() {
            p.value = params.by_name(&p.name).expect("checked above").value.clone();
        }
        Ok(Self {
            model: Model { shape, params: ordered },
            state,
        })
    }
}

/// Phase one of the pretrained regimes: an `aux_layer`-deep encoder with only
/// the phone loss, selected by dev PER.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_phase(
    train: &[Utterance],
    dev: &[Utterance],
    encoder: &EncoderConfig,
    aux_layer: usize,
    phone_classes: usize,
    config: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(PretrainCheckpoint, TrainOutcome)> {
    if aux_layer == 0 || aux_layer > encoder.num_layers {
        return Err(Error::config(
            "multitask.aux_layer",
            format!("{aux_layer} is not in 1..={}", encoder.num_layers),
        ));
    }
    let model = Model::init(PretrainCheckpoint::phase_shape(encoder, aux_layer, phone_classes), seed)?;
    let outcome = run_training(TrainJob {
        model,
        weights: LossWeights::phone_only(),
        selection: Selection::DevPer,
        train,
        dev,
        vocab: None,
        config,
        seed,
        out_dir,
    })?;
    let ckpt = PretrainCheckpoint::from_model(outcome.best.clone(), outcome.best_metric, seed)?;
    Ok((ckpt, outcome))
}

/// Result of a full regime: the optional pretraining phase and the main phase.
#[derive(Clone, Debug)]
pub struct RegimeOutcome {
    pub pretrain: Option<TrainOutcome>,
    pub main: TrainOutcome,
}

/// Data and sizes shared by every regime run.
pub struct RegimeData<'a> {
    pub train: &'a [Utterance],
    pub dev: &'a [Utterance],
    pub vocab: &'a WordpieceVocab,
    pub phone_classes: usize,
}

/// Runs one regime end to end. Pretrained regimes start the main phase with
/// fresh optimizer state.
pub fn run_regime(
    spec: &MultitaskSpec,
    encoder: &EncoderConfig,
    data: &RegimeData<'_>,
    config: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<RegimeOutcome> {
    spec.validate(encoder.num_layers)?;
    let subword_classes = data.vocab.len();
    let (model, pretrain) = if spec.regime.is_pretrained() {
        let pre_dir = out_dir.map(|d| d.join("pretrain"));
        let (ckpt, outcome) = pretrain_phase(
            data.train,
            data.dev,
            encoder,
            spec.aux_layer,
            data.phone_classes,
            config,
            seed,
            pre_dir.as_deref(),
        )?;
        if let Some(d) = &pre_dir {
            ckpt.save(&d.join("checkpoint"))?;
        }
        (init_from_pretrained(&ckpt, encoder, spec, subword_classes, seed)?, Some(outcome))
    } else {
        let shape = ModelShape {
            encoder: encoder.clone(),
            subword: Some(crate::multitask::HeadSpec {
                layer: encoder.num_layers,
                classes: subword_classes,
            }),
            phone: spec.regime.has_phone_head().then_some(crate::multitask::HeadSpec {
                layer: spec.aux_layer,
                classes: data.phone_classes,
            }),
        };
        (Model::init(shape, seed)?, None)
    };
    let weights = spec.weights();
    // with no subword term the subword head is never trained, so WER says nothing
    let selection = if weights.subword > 0.0 { Selection::DevWer } else { Selection::DevPer };
    let main = run_training(TrainJob {
        model,
        weights,
        selection,
        train: data.train,
        dev: data.dev,
        vocab: Some(data.vocab),
        config,
        seed,
        out_dir,
    })?;
    Ok(RegimeOutcome { pretrain, main })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Parameter;

    fn quiet() -> ScheduleConfig {
        ScheduleConfig {
            checkpoint_interval: 1,
            warm_updates: 0,
            patience: 10,
            lookback: 3,
            max_updates: 100,
        }
    }

    #[test]
    fn lr_rule_examples() {
        let cfg = quiet();
        let mut s = ScheduleState::new(0.001);
        for w in [30.0, 29.0, 28.0] {
            s.record(w, 10, &cfg);
        }
        assert!(s.lr_update(31.0, 10, &cfg));
        assert!(!s.lr_update(29.5, 10, &cfg));
        assert!(!s.lr_update(30.0, 10, &cfg));
        let warm = ScheduleConfig { warm_updates: 100, ..cfg.clone() };
        assert!(!s.lr_update(99.0, 99, &warm));
        let out = s.record(31.0, 10, &cfg);
        assert!(out.halved && !out.improved);
        assert_eq!(s.lr, 0.0005);
    }

    #[test]
    fn stopping_rule() {
        let cfg = quiet();
        let mut s = ScheduleState::new(1.0);
        for k in 0..30 {
            s.record(100.0 - k as f64, k, &cfg);
            assert!(!s.should_stop(&cfg));
        }
        let mut s = ScheduleState::new(1.0);
        s.record(10.0, 0, &cfg);
        for k in 0..9 {
            s.record(11.0, 0, &cfg);
            assert!(!s.should_stop(&cfg), "stopped after {k}");
        }
        s.record(9.0, 0, &cfg);
        assert!(!s.should_stop(&cfg) && s.stale == 0);
        for _ in 0..10 {
            s.record(9.0, 0, &cfg);
        }
        assert!(s.should_stop(&cfg));
    }

    #[test]
    fn edit_distance_examples() {
        let k: Vec<char> = "kitten".chars().collect();
        let s: Vec<char> = "sitting".chars().collect();
        assert_eq!(edit_distance(&k, &s), 3);
        assert_eq!(edit_distance(&k, &k), 0);
        assert_eq!(edit_distance(&[] as &[char], &s), 7);
        assert_eq!(edit_distance(&k, &[]), 6);
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert(Parameter::new("p", Tensor::full(&[1], v))).unwrap();
        store
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let cfg = AdamConfig::default();
        let mut store = scalar_store(1.0);
        let mut state = AdamState::new(&store);
        store.iter_mut().next().unwrap().grad = Tensor::full(&[1], 0.3);
        adam_step(&mut store, &mut state, &cfg, cfg.lr, 1).unwrap();
        let p = store.iter().next().unwrap().value.data()[0];
        assert!((p - (1.0 - cfg.lr)).abs() < 1e-10);

        let mut state2 = state.clone();
        store.zero_grads();
        let before = state2.m[0].data()[0];
        let mut s2 = store.clone();
        adam_step(&mut s2, &mut state2, &cfg, cfg.lr, 2).unwrap();
        // momentum still moves the parameter; the moments decay
        assert!((state2.m[0].data()[0] - 0.9 * before).abs() < 1e-18);

        let mut fresh = scalar_store(2.0);
        let mut st = AdamState::new(&fresh);
        adam_step(&mut fresh, &mut st, &cfg, cfg.lr, 1).unwrap();
        assert_eq!(fresh.iter().next().unwrap().value.data()[0], 2.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let cfg = AdamConfig::default();
        let mut store = scalar_store(1.0);
        let mut state = AdamState::new(&store);
        for k in 0..5000 {
            let p = store.iter().next().unwrap().value.data()[0];
            store.iter_mut().next().unwrap().grad = Tensor::full(&[1], 2.0 * p);
            adam_step(&mut store, &mut state, &cfg, cfg.lr, k + 1).unwrap();
        }
        assert!(store.iter().next().unwrap().value.data()[0].abs() < 1e-3);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let cfg = AdamConfig::default();
        let mut store = scalar_store(1.0);
        let mut state = AdamState::new(&store);
        store.iter_mut().next().unwrap().grad = Tensor::full(&[1], f64::NAN);
        match adam_step(&mut store, &mut state, &cfg, cfg.lr, 7) {
            Err(Error::NonFiniteGradient { param, update }) => assert_eq!((param.as_str(), update), ("p", 7)),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(store.iter().next().unwrap().value.data()[0], 1.0);
    }
}
