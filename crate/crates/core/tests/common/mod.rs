#![allow(dead_code)]

use hmctc::ctc::LabelSequence;
use hmctc::data::Utterance;
use hmctc::encoder::EncoderConfig;
use hmctc::multitask::{batch_loss, HeadSpec, LossWeights, Model, ModelShape};
use hmctc::numeric::{named_rng, uniform_tensor, Graph, ParamStore};
use hmctc::Result;
use rand_chacha::ChaCha8Rng;

pub fn utterance(id: &str, frames: usize, dim: usize, subword: &[usize], phones: &[usize], seed: u64) -> Utterance {
    Utterance {
        id: id.to_owned(),
        speaker: "spk".to_owned(),
        features: uniform_tensor(&[frames, dim], -1.0, 1.0, &mut named_rng(seed, id)),
        words: vec!["w".to_owned()],
        subword: Some(LabelSequence::new(subword.to_vec()).unwrap()),
        phones: Some(LabelSequence::new(phones.to_vec()).unwrap()),
    }
}

pub fn shape(layers: usize, hidden: usize, input_dim: usize, phone_layer: Option<usize>) -> ModelShape {
    ModelShape {
        encoder: EncoderConfig {
            num_layers: layers,
            hidden,
            dropout: 0.0,
            input_dim,
        },
        subword: Some(HeadSpec { layer: layers, classes: 5 }),
        phone: phone_layer.map(|layer| HeadSpec { layer, classes: 4 }),
    }
}

/// Loss of `batch` under `weights` with the store's current values; adds the
/// analytic gradient into the store.
pub fn loss_and_grad(store: &mut ParamStore, model: &Model, batch: &[&Utterance], weights: LossWeights) -> Result<f64> {
    let view = Model {
        shape: model.shape.clone(),
        params: store.clone(),
    };
    let mut graph = Graph::new();
    let loss = batch_loss::<ChaCha8Rng>(&mut graph, &view, batch, weights, None)?;
    let value = graph.value(loss.total).data()[0];
    graph.backward(loss.total)?;
    graph.accumulate_param_grads(store)?;
    Ok(value)
}

/// Random logits `[T, C]` and a label sequence feasible in `T` frames, with
/// `T ≤ max_frames`, `C ≤ max_classes` (blank included) and `L ≤ max_labels`.
pub fn ctc_instance(rng: &mut impl rand::Rng, max_frames: usize, max_classes: usize, max_labels: usize) -> (hmctc::numeric::Tensor, LabelSequence) {
    loop {
        let frames = rng.gen_range(1..=max_frames);
        let classes = rng.gen_range(2..=max_classes);
        let len = rng.gen_range(0..=max_labels);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(1..classes)).collect();
        let z = LabelSequence::new(ids).unwrap();
        if !z.feasible_in(frames) {
            continue;
        }
        let logits = uniform_tensor(&[frames, classes], -3.0, 3.0, rng);
        return (logits, z);
    }
}

/// `-log p(z | x)` from raw logits.
pub fn ctc_nll(logits: &hmctc::numeric::Tensor, z: &LabelSequence) -> f64 {
    -hmctc::ctc::ctc_log_likelihood(&hmctc::numeric::log_softmax_rows(logits), z).unwrap()
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all logits, plus
/// the largest absolute gradient row sum.
pub fn ctc_fd_errors(logits: &hmctc::numeric::Tensor, z: &LabelSequence, h: f64) -> (f64, f64) {
    let analytic = hmctc::ctc::ctc_grad(logits, z).unwrap().grad_logits;
    let mut worst = 0.0f64;
    let mut probe = logits.clone();
    for j in 0..logits.len() {
        let x = logits.data()[j];
        probe.data_mut()[j] = x + h;
        let plus = ctc_nll(&probe, z);
        probe.data_mut()[j] = x - h;
        let minus = ctc_nll(&probe, z);
        probe.data_mut()[j] = x;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[j];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    let row_sum = (0..analytic.rows())
        .map(|t| analytic.row(t).iter().sum::<f64>().abs())
        .fold(0.0, f64::max);
    (worst, row_sum)
}

/// A small labeled synthetic task: normalized splits plus vocabulary and lexicon.
pub fn small_task(seed: u64, train: usize, dev: usize) -> hmctc::cli::config::PreparedData {
    let spec = hmctc::data::SyntheticSpec {
        num_words: 30,
        utterance_words: (1, 3),
        train,
        dev,
        test: 4,
        seed,
        ..Default::default()
    };
    let data = hmctc::data::gen_synthetic(&spec).unwrap();
    let section = hmctc::cli::config::DataSection {
        vocab_size: 60,
        ..Default::default()
    };
    hmctc::cli::config::prepare_full(data.train, data.dev, data.lexicon, None, &section).unwrap()
}

/// Gradient of every parameter after one backward pass of `batch`.
pub fn grads_of(model: &Model, batch: &[&Utterance], weights: LossWeights) -> std::collections::BTreeMap<String, Vec<f64>> {
    let mut store = model.params.clone();
    store.zero_grads();
    loss_and_grad(&mut store, model, batch, weights).unwrap();
    store.iter().map(|p| (p.name.clone(), p.grad.data().to_vec())).collect()
}
