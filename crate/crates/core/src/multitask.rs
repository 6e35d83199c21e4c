//! Subword and phone CTC heads, the interpolated loss, and training regimes.
//!
//! The training objective is `λ·L_subword(h^N) + (1 − λ)·L_phone(h^i)`. A head
//! whose weight is zero is not evaluated at all, which keeps its gradient
//! exactly zero and leaves the rest of the computation unchanged.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss_batch, CtcTarget, LabelSequence};
use crate::data::Utterance;
use crate::encoder::{
    encoder_forward, init_layers, layer_prefix, pair_and_pack, DropoutMasks, EncoderConfig, LayerTaps, Mode, INIT_RANGE,
};
use crate::error::{Error, Result};
use crate::numeric::io::{load_params, save_params};
use crate::numeric::{log_softmax_rows, named_rng, uniform_tensor, Graph, ParamStore, Parameter, Tensor, Var};

pub const SUBWORD_HEAD: &str = "head.subword";
pub const PHONE_HEAD: &str = "head.phone";
/// Utterances per decoding chunk.
const DECODE_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Baseline,
    Multitask,
    Pretrain,
    PretrainMultitask,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::Multitask => "multitask",
            Regime::Pretrain => "pretrain",
            Regime::PretrainMultitask => "pretrain_multitask",
        }
    }

    pub fn has_phone_head(self) -> bool {
        matches!(self, Regime::Multitask | Regime::PretrainMultitask)
    }

    pub fn is_pretrained(self) -> bool {
        matches!(self, Regime::Pretrain | Regime::PretrainMultitask)
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(Regime::Baseline),
            "multitask" => Ok(Regime::Multitask),
            "pretrain" => Ok(Regime::Pretrain),
            "pretrain_multitask" => Ok(Regime::PretrainMultitask),
            other => Err(format!("unknown regime {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultitaskSpec {
    pub regime: Regime,
    pub lambda: f64,
    /// 1-based encoder layer feeding the phone head.
    pub aux_layer: usize,
}

/// Loss interpolation weights for one training phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub subword: f64,
    pub phone: f64,
}

impl LossWeights {
    pub fn interpolate(lambda: f64) -> Self {
        Self {
            subword: lambda,
            phone: 1.0 - lambda,
        }
    }

    pub fn phone_only() -> Self {
        Self::interpolate(0.0)
    }
}

impl MultitaskSpec {
    pub fn baseline(num_layers: usize) -> Self {
        Self {
            regime: Regime::Baseline,
            lambda: 1.0,
            aux_layer: num_layers.div_ceil(2),
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("multitask.lambda", format!("{} is not in [0, 1]", self.lambda)));
        }
        if self.aux_layer == 0 || self.aux_layer > num_layers {
            return Err(Error::config(
                "multitask.aux_layer",
                format!("{} is not in 1..={num_layers}", self.aux_layer),
            ));
        }
        if matches!(self.regime, Regime::Baseline | Regime::Pretrain) && self.lambda != 1.0 {
            return Err(Error::config(
                "multitask.lambda",
                format!("regime {} trains the subword loss alone and requires lambda = 1", self.regime.name()),
            ));
        }
        Ok(())
    }

    /// Weights of the main (subword) training phase.
    pub fn weights(&self) -> LossWeights {
        if self.regime.has_phone_head() {
            LossWeights::interpolate(self.lambda)
        } else {
            LossWeights::interpolate(1.0)
        }
    }
}

/// Parameter names whose gradient is identically zero under `spec`.
pub fn dead_gradient_set(spec: &MultitaskSpec, num_layers: usize) -> BTreeSet<String> {
    let mut dead = BTreeSet::new();
    let w = spec.weights();
    if w.subword == 0.0 {
        for layer in spec.aux_layer + 1..=num_layers {
            for dir in ["fwd", "bwd"] {
                for p in ["w_in", "w_rec", "b"] {
                    dead.insert(format!("{}{dir}.{p}", layer_prefix(layer)));
                }
            }
        }
        dead.extend(head_param_names(SUBWORD_HEAD));
    }
    if spec.regime.has_phone_head() && w.phone == 0.0 {
        dead.extend(head_param_names(PHONE_HEAD));
    }
    dead
}

fn head_param_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.w"), format!("{prefix}.b")]
}

/// A softmax head reading the tap of `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub layer: usize,
    /// Output classes including the blank.
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub encoder: EncoderConfig,
    pub subword: Option<HeadSpec>,
    pub phone: Option<HeadSpec>,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let n = self.encoder.num_layers;
        if let Some(s) = self.subword {
            if s.layer != n {
                return Err(Error::config("model.subword.layer", format!("subword head must read layer {n}")));
            }
        }
        if let Some(p) = self.phone {
            if p.layer == 0 || p.layer > n {
                return Err(Error::config("model.phone.layer", format!("{} is not in 1..={n}", p.layer)));
            }
        }
        for (field, head) in [("model.subword.classes", self.subword), ("model.phone.classes", self.phone)] {
            if head.is_some_and(|h| h.classes < 2) {
                return Err(Error::config(field, "a head needs the blank and at least one label"));
            }
        }
        if self.subword.is_none() && self.phone.is_none() {
            return Err(Error::config("model", "at least one head is required"));
        }
        Ok(())
    }
}

fn init_head(store: &mut ParamStore, prefix: &str, width: usize, classes: usize, seed: u64) -> Result<()> {
    let [w_name, b_name] = head_param_names(prefix);
    let w = uniform_tensor(&[width, classes], -INIT_RANGE, INIT_RANGE, &mut named_rng(seed, &w_name));
    store.insert(Parameter::new(w_name, w))?;
    store.insert(Parameter::new(b_name, Tensor::zeros(&[classes])))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Model {
    pub shape: ModelShape,
    pub params: ParamStore,
}

impl Model {
    /// Fresh model; every parameter is drawn from a generator keyed by its own name.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut params = ParamStore::new();
        init_layers(&mut params, &shape.encoder, 1..=shape.encoder.num_layers, seed)?;
        let width = shape.encoder.tap_width();
        if let Some(s) = shape.subword {
            init_head(&mut params, SUBWORD_HEAD, width, s.classes, seed)?;
        }
        if let Some(p) = shape.phone {
            init_head(&mut params, PHONE_HEAD, width, p.classes, seed)?;
        }
        Ok(Self { shape, params })
    }

    pub fn num_layers(&self) -> usize {
        self.shape.encoder.num_layers
    }

    /// Encoder layers that must run for the given weights.
    fn depth_for(&self, weights: LossWeights) -> Result<usize> {
        let mut depth = 0;
        if weights.subword > 0.0 {
            if self.shape.subword.is_none() {
                return Err(Error::Capability("model has no subword head".into()));
            }
            depth = self.num_layers();
        }
        if weights.phone > 0.0 {
            let p = self.shape.phone.ok_or_else(|| Error::Capability("model has no phone head".into()))?;
            depth = depth.max(p.layer);
        }
        if depth == 0 {
            return Err(Error::Validation("both loss weights are zero".into()));
        }
        Ok(depth)
    }
}

fn head_logits(graph: &mut Graph, store: &ParamStore, prefix: &str, tap: Var) -> Result<Var> {
    let [w_name, b_name] = head_param_names(prefix);
    let w = graph.param(store, store.require(&w_name)?);
    let b = graph.param(store, store.require(&b_name)?);
    let z = graph.matmul(tap, w)?;
    graph.add_bias(z, b)
}

/// Loss node of one batch plus the unweighted component values.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub subword: Option<f64>,
    pub phone: Option<f64>,
}

fn targets<'a>(
    batch: &[&'a Utterance],
    lens: &[usize],
    head: &str,
    pick: impl Fn(&'a Utterance) -> Option<&'a LabelSequence>,
) -> Result<Vec<CtcTarget<'a>>> {
    batch
        .iter()
        .zip(lens)
        .map(|(u, &frames)| {
            let labels = pick(u).ok_or_else(|| Error::Data(format!("utterance {} has no {head} labels", u.id)))?;
            Ok(CtcTarget {
                utterance: &u.id,
                frames,
                labels,
            })
        })
        .collect()
}

/// Interpolated loss over encoder taps: the subword head reads layer N, the
/// phone head reads its own layer, and each term is the batch-mean CTC NLL.
pub fn combined_loss(
    graph: &mut Graph,
    model: &Model,
    taps: &LayerTaps,
    batch: &[&Utterance],
    weights: LossWeights,
) -> Result<BatchLoss> {
    model.depth_for(weights)?;
    let mut total: Option<Var> = None;
    let mut subword = None;
    let mut phone = None;
    if weights.subword > 0.0 {
        let logits = head_logits(graph, &model.params, SUBWORD_HEAD, taps.layer(model.num_layers()))?;
        let t = targets(batch, &taps.lens, "subword", |u| u.subword.as_ref())?;
        let loss = ctc_loss_batch(graph, logits, "subword", &t)?;
        subword = Some(graph.value(loss).data()[0]);
        total = Some(graph.scale(loss, weights.subword));
    }
    if weights.phone > 0.0 {
        let layer = model.shape.phone.expect("checked by depth_for").layer;
        let logits = head_logits(graph, &model.params, PHONE_HEAD, taps.layer(layer))?;
        let t = targets(batch, &taps.lens, "phone", |u| u.phones.as_ref())?;
        let loss = ctc_loss_batch(graph, logits, "phone", &t)?;
        phone = Some(graph.value(loss).data()[0]);
        let scaled = graph.scale(loss, weights.phone);
        total = Some(match total {
            Some(s) => graph.add(s, scaled)?,
            None => scaled,
        });
    }
    Ok(BatchLoss {
        total: total.expect("at least one weight is positive"),
        subword,
        phone,
    })
}

/// Runs the encoder as deep as the active heads need and records the loss.
/// Dropout masks are drawn from `dropout_rng` when given (train mode).
pub fn batch_loss<R: Rng>(
    graph: &mut Graph,
    model: &Model,
    batch: &[&Utterance],
    weights: LossWeights,
    dropout_rng: Option<&mut R>,
) -> Result<BatchLoss> {
    let depth = model.depth_for(weights)?;
    let features: Vec<&Tensor> = batch.iter().map(|u| &u.features).collect();
    let input = pair_and_pack(&features)?;
    let mode = match dropout_rng {
        Some(rng) => Mode::Train(DropoutMasks::sample(&model.shape.encoder, depth, input.data.rows(), rng)),
        None => Mode::Eval,
    };
    let taps = encoder_forward(graph, &model.params, &model.shape.encoder, depth, &input, &mode)?;
    combined_loss(graph, model, &taps, batch, weights)
}

fn head_log_probs(
    store: &ParamStore,
    encoder: &EncoderConfig,
    prefix: &str,
    layer: usize,
    utterances: &[&Utterance],
) -> Result<Vec<Tensor>> {
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    order.sort_by(|&a, &b| {
        let (ua, ub) = (utterances[a], utterances[b]);
        ua.frames().cmp(&ub.frames()).then_with(|| ua.id.cmp(&ub.id))
    });
    let mut out = vec![Tensor::zeros(&[0]); utterances.len()];
    for chunk in order.chunks(DECODE_CHUNK) {
        let features: Vec<&Tensor> = chunk.iter().map(|&k| &utterances[k].features).collect();
        let input = pair_and_pack(&features)?;
        let mut graph = Graph::inference();
        let taps = encoder_forward(&mut graph, store, encoder, layer, &input, &Mode::Eval)?;
        let logits = head_logits(&mut graph, store, prefix, taps.layer(layer))?;
        let value = graph.value(logits);
        for (b, &k) in chunk.iter().enumerate() {
            let rows = crate::ctc::utterance_rows(value, chunk.len(), b, input.lens[b]);
            out[k] = log_softmax_rows(&rows);
        }
    }
    Ok(out)
}

/// Per-frame subword log-posteriors `[T', C]`. Reads only encoder layers
/// 1..N and the subword head.
pub fn subword_log_probs(model: &Model, utterances: &[&Utterance]) -> Result<Vec<Tensor>> {
    if model.shape.subword.is_none() {
        return Err(Error::Capability("model has no subword head".into()));
    }
    head_log_probs(&model.params, &model.shape.encoder, SUBWORD_HEAD, model.num_layers(), utterances)
}

/// Per-frame phone log-posteriors from the auxiliary head at its layer.
pub fn phone_log_probs(model: &Model, utterances: &[&Utterance]) -> Result<Vec<Tensor>> {
    let p = model
        .shape
        .phone
        .ok_or_else(|| Error::Capability("model has no phone head; PER is unavailable".into()))?;
    head_log_probs(&model.params, &model.shape.encoder, PHONE_HEAD, p.layer, utterances)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainMeta {
    pub aux_layer: usize,
    pub dev_per: f64,
    pub seed: u64,
    pub shape: ModelShape,
}

/// Truncated phone-only encoder selected by dev PER.
#[derive(Clone, Debug)]
pub struct PretrainCheckpoint {
    pub meta: PretrainMeta,
    pub params: ParamStore,
}

const PRETRAIN_PARAMS: &str = "params.bin";
const PRETRAIN_META: &str = "pretrain.json";

impl PretrainCheckpoint {
    /// Shape of the phase-one model: `layers` encoder layers and a phone head on top.
    pub fn phase_shape(encoder: &EncoderConfig, layers: usize, phone_classes: usize) -> ModelShape {
        ModelShape {
            encoder: EncoderConfig {
                num_layers: layers,
                ..encoder.clone()
            },
            subword: None,
            phone: Some(HeadSpec {
                layer: layers,
                classes: phone_classes,
            }),
        }
    }

    pub fn from_model(model: Model, dev_per: f64, seed: u64) -> Result<Self> {
        let ckpt = Self {
            meta: PretrainMeta {
                aux_layer: model.num_layers(),
                dev_per,
                seed,
                shape: model.shape,
            },
            params: model.params,
        };
        ckpt.check()?;
        Ok(ckpt)
    }

    fn check(&self) -> Result<()> {
        let i = self.meta.aux_layer;
        let layers: BTreeSet<usize> = self
            .params
            .names()
            .filter_map(|n| n.strip_prefix("enc.l")?.split('.').next()?.parse().ok())
            .collect();
        if layers != (1..=i).collect() || self.meta.shape.encoder.num_layers != i {
            return Err(Error::Compatibility(format!(
                "pretraining checkpoint for layer {i} holds encoder layers {layers:?}"
            )));
        }
        if self.meta.shape.phone.map(|p| p.layer) != Some(i) || self.meta.shape.subword.is_some() {
            return Err(Error::Compatibility("pretraining checkpoint must carry exactly a phone head at its top layer".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Model {
        Model {
            shape: self.meta.shape.clone(),
            params: self.params.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(&self.params, &dir.join(PRETRAIN_PARAMS))?;
        let path = dir.join(PRETRAIN_META);
        fs::write(&path, serde_json::to_string_pretty(&self.meta)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PRETRAIN_META);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: PretrainMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let ckpt = Self {
            meta,
            params: load_params(&dir.join(PRETRAIN_PARAMS))?,
        };
        ckpt.check()?;
        Ok(ckpt)
    }
}

/// Full model for a pretrained regime: layers 1..i come from the checkpoint,
/// layers above i and the subword head are fresh, and the phone head is
/// carried over only for `pretrain_multitask`.
pub fn init_from_pretrained(
    ckpt: &PretrainCheckpoint,
    encoder: &EncoderConfig,
    spec: &MultitaskSpec,
    subword_classes: usize,
    seed: u64,
) -> Result<Model> {
    if !spec.regime.is_pretrained() {
        return Err(Error::config(
            "multitask.regime",
            format!("regime {} does not start from a pretraining checkpoint", spec.regime.name()),
        ));
    }
    let i = ckpt.meta.aux_layer;
    if i > encoder.num_layers {
        return Err(Error::Compatibility(format!(
            "checkpoint has {i} layers but the model has only {}",
            encoder.num_layers
        )));
    }
    if spec.aux_layer != i {
        return Err(Error::Compatibility(format!(
            "checkpoint was pretrained at layer {i}, configuration asks for layer {}",
            spec.aux_layer
        )));
    }
    let src = &ckpt.meta.shape.encoder;
    if src.hidden != encoder.hidden || src.input_dim != encoder.input_dim {
        return Err(Error::Compatibility(format!(
            "checkpoint layers (input {}, hidden {}) do not fit the model (input {}, hidden {})",
            src.input_dim, src.hidden, encoder.input_dim, encoder.hidden
        )));
    }
    let shape = ModelShape {
        encoder: encoder.clone(),
        subword: Some(HeadSpec {
            layer: encoder.num_layers,
            classes: subword_classes,
        }),
        phone: match spec.regime {
            Regime::PretrainMultitask => ckpt.meta.shape.phone,
            _ => None,
        },
    };
    let mut model = Model::init(shape, seed)?;
    let copy_prefixes: Vec<String> = (1..=i)
        .map(layer_prefix)
        .chain(model.shape.phone.is_some().then(|| format!("{PHONE_HEAD}.")))
        .collect();
    for p in ckpt.params.iter() {
        if !copy_prefixes.iter().any(|pre| p.name.starts_with(pre.as_str())) {
            continue;
        }
        let id = model.params.id(&p.name).ok_or_else(|| {
            Error::Compatibility(format!("checkpoint parameter {} has no counterpart in the model", p.name))
        })?;
        let dst = model.params.get_mut(id);
        if dst.value.shape() != p.value.shape() {
            return Err(Error::Compatibility(format!(
                "parameter {} has shape {:?} in the checkpoint and {:?} in the model",
                p.name,
                p.value.shape(),
                dst.value.shape()
            )));
        }
        dst.value = p.value.clone();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(regime: Regime, lambda: f64, aux_layer: usize) -> MultitaskSpec {
        MultitaskSpec {
            regime,
            lambda,
            aux_layer,
        }
    }

    #[test]
    fn regime_invariants() {
        assert!(spec(Regime::Baseline, 1.0, 3).validate(5).is_ok());
        assert!(matches!(
            spec(Regime::Baseline, 0.5, 3).validate(5),
            Err(Error::Config { field, .. }) if field == "multitask.lambda"
        ));
        assert!(matches!(
            spec(Regime::Multitask, 0.5, 6).validate(5),
            Err(Error::Config { field, .. }) if field == "multitask.aux_layer"
        ));
        assert!(spec(Regime::Multitask, 1.5, 2).validate(5).is_err());
        assert_eq!(spec(Regime::Pretrain, 1.0, 2).weights(), LossWeights::interpolate(1.0));
    }

    #[test]
    fn dead_sets() {
        let dead = dead_gradient_set(&spec(Regime::Multitask, 0.0, 3), 5);
        let expected: BTreeSet<String> = ["l4", "l5"]
            .iter()
            .flat_map(|l| {
                ["fwd", "bwd"]
                    .iter()
                    .flat_map(move |d| ["w_in", "w_rec", "b"].map(|p| format!("enc.{l}.{d}.{p}")))
            })
            .chain(["head.subword.w".to_owned(), "head.subword.b".to_owned()])
            .collect();
        assert_eq!(dead, expected);
        let dead = dead_gradient_set(&spec(Regime::Multitask, 1.0, 3), 5);
        assert_eq!(dead, ["head.phone.b", "head.phone.w"].map(String::from).into_iter().collect());
        assert!(dead_gradient_set(&spec(Regime::Multitask, 0.5, 3), 5).is_empty());
    }

    fn shape(layers: usize, phone_layer: Option<usize>) -> ModelShape {
        ModelShape {
            encoder: EncoderConfig {
                num_layers: layers,
                hidden: 3,
                dropout: 0.0,
                input_dim: 2,
            },
            subword: Some(HeadSpec {
                layer: layers,
                classes: 5,
            }),
            phone: phone_layer.map(|layer| HeadSpec { layer, classes: 4 }),
        }
    }

    #[test]
    fn phone_head_does_not_shift_other_parameters() {
        let a = Model::init(shape(3, None), 7).unwrap();
        let b = Model::init(shape(3, Some(2)), 7).unwrap();
        for p in a.params.iter() {
            assert_eq!(p.value, b.params.by_name(&p.name).unwrap().value);
        }
        assert_eq!(b.params.len(), a.params.len() + 2);
    }

    #[test]
    fn pretrained_wiring() {
        let enc = shape(4, None).encoder;
        let phase = PretrainCheckpoint::phase_shape(&enc, 2, 4);
        let mut pre = Model::init(phase, 11).unwrap();
        for p in pre.params.iter_mut() {
            p.value = p.value.map(|v| v + 1.0);
        }
        let ckpt = PretrainCheckpoint::from_model(pre, 12.5, 11).unwrap();

        let m = init_from_pretrained(&ckpt, &enc, &spec(Regime::Pretrain, 1.0, 2), 5, 11).unwrap();
        assert!(m.shape.phone.is_none());
        assert!(m.params.names().all(|n| !n.starts_with(PHONE_HEAD)));
        for p in ckpt.params.iter().filter(|p| p.name.starts_with("enc.")) {
            assert_eq!(m.params.by_name(&p.name).unwrap().value, p.value);
        }
        let fresh = Model::init(shape(4, None), 11).unwrap();
        for name in ["enc.l3.fwd.w_in", "enc.l4.bwd.b", "head.subword.w"] {
            assert_eq!(m.params.by_name(name).unwrap().value, fresh.params.by_name(name).unwrap().value);
        }

        let mt = init_from_pretrained(&ckpt, &enc, &spec(Regime::PretrainMultitask, 0.5, 2), 5, 11).unwrap();
        assert_eq!(mt.shape.phone, Some(HeadSpec { layer: 2, classes: 4 }));
        assert_eq!(
            mt.params.by_name("head.phone.w").unwrap().value,
            ckpt.params.by_name("head.phone.w").unwrap().value
        );

        let wide = EncoderConfig { hidden: 4, ..enc.clone() };
        assert!(matches!(
            init_from_pretrained(&ckpt, &wide, &spec(Regime::Pretrain, 1.0, 2), 5, 11),
            Err(Error::Compatibility(_))
        ));
        let shallow = EncoderConfig { num_layers: 1, ..enc };
        assert!(matches!(
            init_from_pretrained(&ckpt, &shallow, &spec(Regime::Pretrain, 1.0, 1), 5, 11),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let enc = shape(3, None).encoder;
        let pre = Model::init(PretrainCheckpoint::phase_shape(&enc, 2, 4), 3).unwrap();
        let ckpt = PretrainCheckpoint::from_model(pre, 40.0, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let back = PretrainCheckpoint::load(dir.path()).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.params.len(), ckpt.params.len());
        for (a, b) in back.params.iter().zip(ckpt.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }
}
