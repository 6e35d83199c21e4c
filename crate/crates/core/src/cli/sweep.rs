//! Grid cells: one seeded training run per (axis value, regime, seed).

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{training_subset, PreparedData, RunConfig};
use crate::error::{Error, Result};
use crate::multitask::Regime;
use crate::train::{run_regime, RegimeData, RegimeOutcome, RunStatus};

pub const NOT_CONVERGED: &str = "X";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Lambda,
    Layer,
    Fraction,
    Regime,
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lambda" => Ok(Axis::Lambda),
            "layer" => Ok(Axis::Layer),
            "fraction" => Ok(Axis::Fraction),
            "regime" => Ok(Axis::Regime),
            other => Err(format!("unknown sweep axis {other:?}")),
        }
    }
}

impl Axis {
    pub fn column(self) -> &'static str {
        match self {
            Axis::Lambda => "lambda",
            Axis::Layer => "aux_layer",
            Axis::Fraction => "fraction",
            Axis::Regime => "regime",
        }
    }
}

/// Overrides applied on top of the base configuration for one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub value: String,
    pub regime: Regime,
    pub lambda: Option<f64>,
    pub aux_layer: Option<usize>,
    pub fraction: Option<f64>,
    pub seed: u64,
}

impl Cell {
    pub fn config(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.seed = self.seed;
        cfg.multitask.regime = self.regime;
        if self.lambda.is_some() {
            cfg.multitask.lambda = self.lambda;
        }
        if self.aux_layer.is_some() {
            cfg.multitask.aux_layer = self.aux_layer;
        }
        if let Some(f) = self.fraction {
            cfg.data.fraction = f;
        }
        cfg
    }
}

/// Builds and validates every cell before anything runs.
pub fn plan_cells(base: &RunConfig, axis: Axis, grid: &[String], regimes: &[Regime], seeds: &[u64]) -> Result<Vec<Cell>> {
    if grid.is_empty() {
        return Err(Error::config("grid", "empty grid"));
    }
    let mut cells = Vec::new();
    for value in grid {
        let parse_f = |field: &str| {
            value
                .parse::<f64>()
                .map_err(|_| Error::config(field, format!("{value:?} is not a number")))
        };
        let (lambda, aux_layer, fraction, regime_override) = match axis {
            Axis::Lambda => (Some(parse_f("grid.lambda")?), None, None, None),
            Axis::Layer => {
                let i = value
                    .parse::<usize>()
                    .map_err(|_| Error::config("grid.aux_layer", format!("{value:?} is not a layer index")))?;
                (None, Some(i), None, None)
            }
            Axis::Fraction => (None, None, Some(parse_f("grid.fraction")?), None),
            Axis::Regime => {
                let r = value.parse::<Regime>().map_err(|m| Error::config("grid.regime", m))?;
                (None, None, None, Some(r))
            }
        };
        let row_regimes: Vec<Regime> = match regime_override {
            Some(r) => vec![r],
            None => regimes.to_vec(),
        };
        for &regime in &row_regimes {
            for &seed in seeds {
                let lambda = match (axis, regime) {
                    // the subword-only regimes keep lambda = 1 whatever the base config says
                    (Axis::Lambda, _) => lambda,
                    (_, Regime::Baseline | Regime::Pretrain) => Some(1.0),
                    _ => None,
                };
                let cell = Cell {
                    value: value.clone(),
                    regime,
                    lambda,
                    aux_layer,
                    fraction,
                    seed,
                };
                cell.config(base).validate()?;
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub dev_wer: Option<f64>,
    pub dev_per: Option<f64>,
    pub status: RunStatus,
    pub updates: usize,
}

impl CellResult {
    pub fn from_outcome(outcome: &RegimeOutcome) -> Self {
        let main = &outcome.main;
        let best = main.best_checkpoint.and_then(|k| main.log.get(k - 1));
        let dev_per = match &outcome.pretrain {
            // pretrained regimes report the phone model's PER right after pretraining
            Some(pre) if main.best.shape.phone.is_none() => Some(pre.best_metric),
            _ => best.and_then(|entry| entry.dev_per),
        };
        Self {
            dev_wer: best.filter(|_| main.status == RunStatus::Converged).and_then(|entry| entry.dev_wer),
            dev_per,
            status: main.status,
            updates: main.updates,
        }
    }
}

/// Runs one cell on prepared data.
pub fn run_cell(data: &PreparedData, base: &RunConfig, cell: &Cell, out_dir: Option<&Path>) -> Result<CellResult> {
    let cfg = cell.config(base);
    cfg.validate()?;
    let subset = training_subset(&data.train, cfg.data.fraction, cfg.train.batch_sizes, cfg.seed)?;
    let encoder = cfg.encoder_config(data.input_dim());
    let regime_data = RegimeData {
        train: &subset,
        dev: &data.dev,
        vocab: &data.vocab,
        phone_classes: data.lexicon.num_phones(),
    };
    let outcome = run_regime(&cfg.multitask_spec(), &encoder, &regime_data, &cfg.train, cfg.seed, out_dir)?;
    Ok(CellResult::from_outcome(&outcome))
}

fn fmt_rate(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.2}"))
}

/// TSV table with one row per cell; failed cells keep their row.
pub fn render_table(axis: Axis, cells: &[Cell], results: &[Result<CellResult>]) -> String {
    let mut out = String::new();
    writeln!(out, "{}\tregime\tseed\tdev_wer\tdev_per\tstatus\tupdates", axis.column()).unwrap();
    for (cell, result) in cells.iter().zip(results) {
        let (wer, per, status, updates) = match result {
            Ok(r) => (
                r.dev_wer.map_or_else(|| NOT_CONVERGED.to_owned(), |w| format!("{w:.2}")),
                fmt_rate(r.dev_per),
                match r.status {
                    RunStatus::Converged => "converged".to_owned(),
                    RunStatus::DidNotConverge => "did_not_converge".to_owned(),
                },
                r.updates.to_string(),
            ),
            Err(e) => (
                NOT_CONVERGED.to_owned(),
                "-".to_owned(),
                format!("error: {}", e.to_string().replace(['\t', '\n'], " ")),
                "-".to_owned(),
            ),
        };
        writeln!(
            out,
            "{}\t{}\t{}\t{wer}\t{per}\t{status}\t{updates}",
            cell.value,
            cell.regime.name(),
            cell.seed
        )
        .unwrap();
    }
    out
}

/// Runs all cells, `jobs` at a time; results keep cell order.
pub fn run_cells(
    data: &PreparedData,
    base: &RunConfig,
    cells: &[Cell],
    jobs: usize,
    out_dir: Option<&Path>,
) -> Vec<Result<CellResult>> {
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<CellResult>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let worker = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        let Some(cell) = cells.get(k) else { break };
        let dir = out_dir.map(|d| d.join(format!("cell{k:03}-{}-{}-s{}", cell.value, cell.regime.name(), cell.seed)));
        let r = run_cell(data, base, cell, dir.as_deref());
        if let Err(e) = &r {
            log::error!("cell {k} failed: {e}");
        }
        *results[k].lock().expect("result slot") = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.max(1) {
            s.spawn(worker);
        }
        worker();
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every cell ran"))
        .collect()
}
