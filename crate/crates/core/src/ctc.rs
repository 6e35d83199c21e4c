//! Connectionist temporal classification.
//!
//! All lattice arithmetic runs in log space with `-inf` as the "unreachable"
//! sentinel. The blank symbol is id 0 in every vocabulary.

use crate::error::{Error, Result};
use crate::numeric::{log_softmax_rows, Backward, Graph, Tensor, Var};

pub const BLANK: usize = 0;

/// Target label ids, never containing [`BLANK`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.contains(&BLANK) {
            return Err(Error::Validation("label sequence contains the blank id".into()));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fewest frames any alignment needs: one per label plus one blank between
    /// each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    pub fn feasible_in(&self, frames: usize) -> bool {
        self.min_frames() <= frames
    }
}

/// Blank-interleaved target `[_, z1, _, z2, ..., zL, _]` of length `2L + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtendedSequence(Vec<usize>);

impl ExtendedSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whether state `s` may be entered directly from `s - 2`.
    fn can_skip(&self, s: usize) -> bool {
        s >= 2 && self.0[s] != BLANK && self.0[s] != self.0[s - 2]
    }
}

/// Merges runs of identical frame labels, then drops blanks.
pub fn collapse(path: &[usize]) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    LabelSequence(out)
}

pub fn extend_with_blanks(z: &LabelSequence) -> ExtendedSequence {
    let mut ext = Vec::with_capacity(2 * z.len() + 1);
    ext.push(BLANK);
    for &label in z.ids() {
        ext.push(label);
        ext.push(BLANK);
    }
    ExtendedSequence(ext)
}

/// `log(exp(a) + exp(b))`, exact when either operand is `-inf`.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn validate(log_probs: &Tensor, z: &LabelSequence) -> Result<()> {
    if log_probs.shape().len() != 2 {
        return Err(Error::Shape(format!("log-probs must be T×C, got {:?}", log_probs.shape())));
    }
    let classes = log_probs.cols();
    if let Some(&bad) = z.ids().iter().find(|&&id| id >= classes) {
        return Err(Error::Validation(format!("label id {bad} outside {classes} classes")));
    }
    for t in 0..log_probs.rows() {
        let lse = log_sum_exp(log_probs.row(t).iter().copied());
        if !(lse.abs() <= 1e-6) {
            return Err(Error::Validation(format!(
                "row {t} is not log-normalized (logsumexp = {lse})"
            )));
        }
    }
    Ok(())
}

/// Forward variables: `alpha[t][s]` is the log-probability of emitting frames
/// `0..=t` and sitting in extended state `s` at frame `t`.
fn forward_lattice(log_probs: &Tensor, ext: &ExtendedSequence) -> Vec<Vec<f64>> {
    let frames = log_probs.rows();
    let states = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; states]; frames];
    if frames == 0 {
        return alpha;
    }
    let lp = |t: usize, s: usize| log_probs.get(t, ext.0[s]);
    alpha[0][0] = lp(0, 0);
    if states > 1 {
        alpha[0][1] = lp(0, 1);
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if ext.can_skip(s) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if acc == f64::NEG_INFINITY { acc } else { acc + lp(t, s) };
        }
    }
    alpha
}

/// Backward variables: `beta[t][s]` is the log-probability of emitting frames
/// `t+1..T` and finishing in a final state, given state `s` at frame `t`.
fn backward_lattice(log_probs: &Tensor, ext: &ExtendedSequence) -> Vec<Vec<f64>> {
    let frames = log_probs.rows();
    let states = ext.len();
    let mut beta = vec![vec![f64::NEG_INFINITY; states]; frames];
    if frames == 0 {
        return beta;
    }
    beta[frames - 1][states - 1] = 0.0;
    if states > 1 {
        beta[frames - 1][states - 2] = 0.0;
    }
    let lp = |t: usize, s: usize| log_probs.get(t, ext.0[s]);
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta[t + 1][s] + lp(t + 1, s);
            if s + 1 < states {
                acc = log_add(acc, beta[t + 1][s + 1] + lp(t + 1, s + 1));
            }
            if s + 2 < states && ext.can_skip(s + 2) {
                acc = log_add(acc, beta[t + 1][s + 2] + lp(t + 1, s + 2));
            }
            beta[t][s] = acc;
        }
    }
    beta
}

fn final_log_likelihood(alpha: &[Vec<f64>]) -> f64 {
    match alpha.last() {
        None => f64::NEG_INFINITY,
        Some(last) => {
            let s = last.len();
            if s == 1 {
                last[0]
            } else {
                log_add(last[s - 1], last[s - 2])
            }
        }
    }
}

/// `log p(z | x)` summed over every frame path that collapses to `z`.
///
/// Returns `-inf` when `z` cannot be aligned to the available frames.
pub fn ctc_log_likelihood(log_probs: &Tensor, z: &LabelSequence) -> Result<f64> {
    validate(log_probs, z)?;
    if !z.feasible_in(log_probs.rows()) {
        return Ok(f64::NEG_INFINITY);
    }
    let ext = extend_with_blanks(z);
    Ok(final_log_likelihood(&forward_lattice(log_probs, &ext)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcResult {
    pub log_likelihood: f64,
    /// Gradient of `-log p(z | x)` with respect to the pre-softmax logits.
    pub grad_logits: Tensor,
}

/// Loss gradient through the softmax: `softmax(logits) - gamma`, where `gamma`
/// is the posterior state occupancy from the forward/backward recursions.
pub fn ctc_grad(logits: &Tensor, z: &LabelSequence) -> Result<CtcResult> {
    if !logits.is_finite() {
        return Err(Error::Validation("logits contain non-finite values".into()));
    }
    let log_probs = log_softmax_rows(logits);
    ctc_grad_from_log_probs(&log_probs, z, "ctc", "")
}

fn ctc_grad_from_log_probs(
    log_probs: &Tensor,
    z: &LabelSequence,
    head: &str,
    utterance: &str,
) -> Result<CtcResult> {
    validate(log_probs, z)?;
    let frames = log_probs.rows();
    if !z.feasible_in(frames) {
        return Err(Error::AlignmentInfeasible {
            head: head.to_owned(),
            utterance: utterance.to_owned(),
            labels: z.len(),
            needed: z.min_frames(),
            frames,
        });
    }
    let ext = extend_with_blanks(z);
    let alpha = forward_lattice(log_probs, &ext);
    let beta = backward_lattice(log_probs, &ext);
    let ll = final_log_likelihood(&alpha);

    let classes = log_probs.cols();
    let mut grad = log_probs.map(f64::exp);
    let mut occupancy = vec![f64::NEG_INFINITY; classes];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for (s, &label) in ext.0.iter().enumerate() {
            occupancy[label] = log_add(occupancy[label], alpha[t][s] + beta[t][s]);
        }
        for (g, &occ) in grad.row_mut(t).iter_mut().zip(&occupancy) {
            if occ != f64::NEG_INFINITY {
                *g -= (occ - ll).exp();
            }
        }
    }
    Ok(CtcResult {
        log_likelihood: ll,
        grad_logits: grad,
    })
}

/// Largest number of frame paths [`brute_force_log_likelihood`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Reference implementation: enumerates every frame path and keeps those that
/// collapse to `z`.
pub fn brute_force_log_likelihood(log_probs: &Tensor, z: &LabelSequence) -> Result<f64> {
    let (frames, classes) = (log_probs.rows(), log_probs.cols());
    let paths = (classes as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if paths > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeGuard {
            paths,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut terms = Vec::new();
    let mut path = vec![0usize; frames];
    for mut code in 0..paths {
        for slot in path.iter_mut() {
            *slot = (code % classes as u128) as usize;
            code /= classes as u128;
        }
        if collapse(&path) == *z {
            terms.push(path.iter().enumerate().map(|(t, &c)| log_probs.get(t, c)).sum());
        }
    }
    Ok(log_sum_exp(terms))
}

/// Per-frame argmax, lowest id on ties.
pub fn argmax_path(log_probs: &Tensor) -> Vec<usize> {
    (0..log_probs.rows())
        .map(|t| {
            let row = log_probs.row(t);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn greedy_decode(log_probs: &Tensor) -> LabelSequence {
    collapse(&argmax_path(log_probs))
}

/// One utterance inside a time-major padded batch.
#[derive(Clone, Debug)]
pub struct CtcTarget<'a> {
    pub utterance: &'a str,
    pub frames: usize,
    pub labels: &'a LabelSequence,
}

/// Rows of utterance `b` inside a time-major `[T_max * B, C]` matrix.
pub fn utterance_rows(t_max_rows: &Tensor, batch: usize, b: usize, frames: usize) -> Tensor {
    let classes = t_max_rows.cols();
    let mut data = Vec::with_capacity(frames * classes);
    for t in 0..frames {
        data.extend_from_slice(t_max_rows.row(t * batch + b));
    }
    Tensor::new(vec![frames, classes], data).expect("row gather has consistent shape")
}

/// Batch-mean CTC negative log-likelihood recorded on the tape.
///
/// `logits` holds time-major rows (`row = t * B + b`); padded rows beyond an
/// utterance's frame count receive zero gradient.
pub fn ctc_loss_batch(graph: &mut Graph, logits: Var, head: &str, targets: &[CtcTarget<'_>]) -> Result<Var> {
    let batch = targets.len();
    let value = graph.value(logits);
    let needs_grad = graph.requires_grad(logits);
    let mut grad = needs_grad.then(|| Tensor::zeros(value.shape()));
    let mut total = 0.0;
    for (b, target) in targets.iter().enumerate() {
        let log_probs = log_softmax_rows(&utterance_rows(value, batch, b, target.frames));
        let ll = if let Some(grad) = grad.as_mut() {
            let res = ctc_grad_from_log_probs(&log_probs, target.labels, head, target.utterance)?;
            for t in 0..target.frames {
                let dst = grad.row_mut(t * batch + b);
                for (d, g) in dst.iter_mut().zip(res.grad_logits.row(t)) {
                    *d = g / batch as f64;
                }
            }
            res.log_likelihood
        } else {
            if !target.labels.feasible_in(target.frames) {
                return Err(Error::AlignmentInfeasible {
                    head: head.to_owned(),
                    utterance: target.utterance.to_owned(),
                    labels: target.labels.len(),
                    needed: target.labels.min_frames(),
                    frames: target.frames,
                });
            }
            ctc_log_likelihood(&log_probs, target.labels)?
        };
        total -= ll;
    }
    let mean = total / batch.max(1) as f64;
    let op = CtcBatchGrad {
        grad: grad.unwrap_or_else(|| Tensor::zeros(&[0])),
    };
    Ok(graph.apply(&[logits], Tensor::scalar(mean), Box::new(op)))
}

struct CtcBatchGrad {
    grad: Tensor,
}

impl Backward for CtcBatchGrad {
    fn backward(&self, g: &Tensor, _out: &Tensor, _inputs: &[&Tensor], _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let scale = g.data()[0];
        Ok(vec![Some(self.grad.map(|v| v * scale))])
    }
}
