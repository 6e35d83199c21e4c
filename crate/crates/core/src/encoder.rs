//! Stacked bidirectional LSTM encoder with frame pairing and per-layer taps.
//!
//! Batches are time-major: row `t * B + b` holds frame `t` of utterance `b`.
//! Frames past an utterance's length are padding; both directions hold their
//! state at zero there, so the right-to-left pass starts fresh at each
//! utterance's own last frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{gemm, named_rng, uniform_tensor, Backward, Graph, MatRef, ParamId, ParamStore, Parameter, Tensor, Var};

pub const TIME_REDUCTION: usize = 2;
pub const INIT_RANGE: f64 = 0.05;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Feature dimension before frame pairing.
    pub input_dim: usize,
}

impl EncoderConfig {
    pub fn paper_scale(input_dim: usize) -> Self {
        Self {
            num_layers: 5,
            hidden: 320,
            dropout: 0.1,
            input_dim,
        }
    }

    pub fn desk_scale(input_dim: usize) -> Self {
        Self {
            hidden: 32,
            ..Self::paper_scale(input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("encoder.num_layers", "must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("encoder.hidden", "must be at least 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("encoder.input_dim", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("encoder.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn layer_input_width(&self, layer: usize) -> usize {
        if layer == 1 {
            TIME_REDUCTION * self.input_dim
        } else {
            2 * self.hidden
        }
    }

    pub fn tap_width(&self) -> usize {
        2 * self.hidden
    }
}

/// Concatenates consecutive frame pairs; an odd final frame is paired with zeros.
pub fn pair_frames(x: &Tensor) -> Tensor {
    let (frames, dim) = (x.rows(), x.cols());
    let out_frames = frames.div_ceil(TIME_REDUCTION);
    let mut data = vec![0.0; out_frames * TIME_REDUCTION * dim];
    data[..frames * dim].copy_from_slice(&x.data()[..frames * dim]);
    Tensor::new(vec![out_frames, TIME_REDUCTION * dim], data).expect("paired shape")
}

/// Zero-padded, time-major stack of variable-length sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub data: Tensor,
    pub lens: Vec<usize>,
}

impl PaddedBatch {
    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    pub fn max_len(&self) -> usize {
        self.lens.iter().copied().max().unwrap_or(0)
    }

    /// Packs `T_b × w` sequences into a `[T_max * B, w]` matrix.
    pub fn pack(seqs: &[&Tensor]) -> Result<Self> {
        let batch = seqs.len();
        let width = seqs.first().map_or(0, |s| s.cols());
        if seqs.iter().any(|s| s.cols() != width) {
            return Err(Error::Shape("sequences in a batch differ in width".into()));
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.rows()).collect();
        let t_max = lens.iter().copied().max().unwrap_or(0);
        let mut data = Tensor::zeros(&[t_max * batch, width]);
        for (b, s) in seqs.iter().enumerate() {
            for t in 0..s.rows() {
                data.row_mut(t * batch + b).copy_from_slice(s.row(t));
            }
        }
        Ok(Self { data, lens })
    }

    /// Rows of sequence `b` from a time-major matrix laid out like this batch.
    pub fn unpack(&self, rows: &Tensor, b: usize) -> Tensor {
        crate::ctc::utterance_rows(rows, self.batch_size(), b, self.lens[b])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionParams {
    pub w_in: Tensor,
    pub w_rec: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams {
    pub forward: DirectionParams,
    pub backward: DirectionParams,
}

impl LstmLayerParams {
    pub fn hidden(&self) -> usize {
        self.forward.w_rec.rows()
    }

    pub fn input_width(&self) -> usize {
        self.forward.w_in.rows()
    }

    pub fn from_store(store: &ParamStore, layer: usize) -> Result<Self> {
        let ids = LayerParamIds::lookup(store, layer)?;
        let dir = |w_in, w_rec, b| DirectionParams {
            w_in: store.get(w_in).value.clone(),
            w_rec: store.get(w_rec).value.clone(),
            bias: store.get(b).value.clone(),
        };
        Ok(Self {
            forward: dir(ids.0[0], ids.0[1], ids.0[2]),
            backward: dir(ids.0[3], ids.0[4], ids.0[5]),
        })
    }
}

pub fn layer_prefix(layer: usize) -> String {
    format!("enc.l{layer}.")
}

fn param_name(layer: usize, dir: &str, what: &str) -> String {
    format!("enc.l{layer}.{dir}.{what}")
}

/// Store ids of one layer in op-input order: fwd (w_in, w_rec, b), bwd (w_in, w_rec, b).
#[derive(Clone, Copy, Debug)]
pub struct LayerParamIds(pub [ParamId; 6]);

impl LayerParamIds {
    pub fn lookup(store: &ParamStore, layer: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(6);
        for dir in ["fwd", "bwd"] {
            for what in ["w_in", "w_rec", "b"] {
                ids.push(store.require(&param_name(layer, dir, what))?);
            }
        }
        Ok(Self(ids.try_into().expect("six ids")))
    }
}

/// Inserts freshly initialized parameters for `layers`.
///
/// Weights are uniform in ±[`INIT_RANGE`]; biases are zero except the forget
/// gate block, which starts at [`FORGET_BIAS`].
pub fn init_layers(store: &mut ParamStore, cfg: &EncoderConfig, layers: impl IntoIterator<Item = usize>, seed: u64) -> Result<()> {
    let h = cfg.hidden;
    for layer in layers {
        let width = cfg.layer_input_width(layer);
        for dir in ["fwd", "bwd"] {
            let name = param_name(layer, dir, "w_in");
            let w_in = uniform_tensor(&[width, 4 * h], -INIT_RANGE, INIT_RANGE, &mut named_rng(seed, &name));
            store.insert(Parameter::new(name, w_in))?;
            let name = param_name(layer, dir, "w_rec");
            let w_rec = uniform_tensor(&[h, 4 * h], -INIT_RANGE, INIT_RANGE, &mut named_rng(seed, &name));
            store.insert(Parameter::new(name, w_rec))?;
            let mut bias = Tensor::zeros(&[4 * h]);
            bias.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = FORGET_BIAS);
            store.insert(Parameter::new(param_name(layer, dir, "b"), bias))?;
        }
    }
    Ok(())
}

/// Cached activations of one direction, rows in batch layout.
struct DirectionCache {
    /// Post-activation gates (i, f, g, o), `[T*B, 4H]`.
    gates: Vec<f64>,
    tanh_cell: Vec<f64>,
    prev_cell: Vec<f64>,
    prev_hidden: Vec<f64>,
}

fn check_direction(width: usize, hidden: usize, p: [&Tensor; 3]) -> Result<()> {
    let [w_in, w_rec, bias] = p;
    if w_in.shape() != [width, 4 * hidden] || w_rec.shape() != [hidden, 4 * hidden] || bias.len() != 4 * hidden {
        return Err(Error::Shape(format!(
            "lstm parameters {:?}/{:?}/{:?} do not fit input width {width}, hidden {hidden}",
            w_in.shape(),
            w_rec.shape(),
            bias.shape()
        )));
    }
    Ok(())
}

fn step_order(t_max: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..t_max).rev())
    } else {
        Box::new(0..t_max)
    }
}

/// Runs one direction; returns hidden states `[T*B, H]` and the cache.
fn run_direction(
    x: &Tensor,
    lens: &[usize],
    w_in: &Tensor,
    w_rec: &Tensor,
    bias: &Tensor,
    reverse: bool,
) -> (Vec<f64>, DirectionCache) {
    let batch = lens.len();
    let h = w_rec.rows();
    let g4 = 4 * h;
    let width = x.cols();
    let rows = x.rows();
    let t_max = if batch == 0 { 0 } else { rows / batch };

    let mut gates = vec![0.0; rows * g4];
    for r in 0..rows {
        gates[r * g4..(r + 1) * g4].copy_from_slice(bias.data());
    }
    gemm(rows, width, g4, 1.0, MatRef::new(x.data(), width, false), MatRef::new(w_in.data(), g4, false), 1.0, &mut gates);

    let mut hidden = vec![0.0; rows * h];
    let mut cell = vec![0.0; rows * h];
    let mut tanh_cell = vec![0.0; rows * h];
    let mut prev_cell = vec![0.0; rows * h];
    let mut prev_hidden = vec![0.0; rows * h];
    let mut last: Option<usize> = None;
    for t in step_order(t_max, reverse) {
        let base = t * batch;
        if let Some(p) = last {
            let src = p * batch * h;
            let hp = hidden[src..src + batch * h].to_vec();
            prev_hidden[base * h..(base + batch) * h].copy_from_slice(&hp);
            let cp = cell[src..src + batch * h].to_vec();
            prev_cell[base * h..(base + batch) * h].copy_from_slice(&cp);
            gemm(
                batch,
                h,
                g4,
                1.0,
                MatRef::new(&hp, h, false),
                MatRef::new(w_rec.data(), g4, false),
                1.0,
                &mut gates[base * g4..(base + batch) * g4],
            );
        }
        for (b, &len) in lens.iter().enumerate() {
            let r = base + b;
            let gr = &mut gates[r * g4..(r + 1) * g4];
            if t >= len {
                gr.iter_mut().for_each(|v| *v = 0.0);
                // state stays zero on padding rows
                continue;
            }
            for v in &mut gr[..2 * h] {
                *v = crate::numeric::sigmoid(*v);
            }
            for v in &mut gr[2 * h..3 * h] {
                *v = v.tanh();
            }
            for v in &mut gr[3 * h..] {
                *v = crate::numeric::sigmoid(*v);
            }
            for k in 0..h {
                let (i, f, g, o) = (gr[k], gr[h + k], gr[2 * h + k], gr[3 * h + k]);
                let c = f * prev_cell[r * h + k] + i * g;
                let tc = c.tanh();
                cell[r * h + k] = c;
                tanh_cell[r * h + k] = tc;
                hidden[r * h + k] = o * tc;
            }
        }
        last = Some(t);
    }
    let cache = DirectionCache {
        gates,
        tanh_cell,
        prev_cell,
        prev_hidden,
    };
    (hidden, cache)
}

struct DirectionGrads {
    dx: Option<Vec<f64>>,
    dw_in: Vec<f64>,
    dw_rec: Vec<f64>,
    dbias: Vec<f64>,
}

/// Backpropagation through time for one direction given `dH` (`[T*B, H]`).
#[allow(clippy::too_many_arguments)]
fn backprop_direction(
    x: &Tensor,
    lens: &[usize],
    w_in: &Tensor,
    w_rec: &Tensor,
    cache: &DirectionCache,
    d_hidden: &[f64],
    reverse: bool,
    want_dx: bool,
) -> DirectionGrads {
    let batch = lens.len();
    let h = w_rec.rows();
    let g4 = 4 * h;
    let width = x.cols();
    let rows = x.rows();
    let t_max = if batch == 0 { 0 } else { rows / batch };

    let mut d_pre = vec![0.0; rows * g4];
    let mut dh_carry = vec![0.0; batch * h];
    let mut dc_carry = vec![0.0; batch * h];
    let order: Vec<usize> = step_order(t_max, reverse).collect();
    for &t in order.iter().rev() {
        let base = t * batch;
        for (b, &len) in lens.iter().enumerate() {
            let r = base + b;
            if t >= len {
                dh_carry[b * h..(b + 1) * h].iter_mut().for_each(|v| *v = 0.0);
                dc_carry[b * h..(b + 1) * h].iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let gr = &cache.gates[r * g4..(r + 1) * g4];
            let dp = &mut d_pre[r * g4..(r + 1) * g4];
            for k in 0..h {
                let (i, f, g, o) = (gr[k], gr[h + k], gr[2 * h + k], gr[3 * h + k]);
                let tc = cache.tanh_cell[r * h + k];
                let dh = d_hidden[r * h + k] + dh_carry[b * h + k];
                let dc = dh * o * (1.0 - tc * tc) + dc_carry[b * h + k];
                dp[k] = dc * g * i * (1.0 - i);
                dp[h + k] = dc * cache.prev_cell[r * h + k] * f * (1.0 - f);
                dp[2 * h + k] = dc * i * (1.0 - g * g);
                dp[3 * h + k] = dh * tc * o * (1.0 - o);
                dc_carry[b * h + k] = dc * f;
            }
        }
        // dh for the previous processing step
        gemm(
            batch,
            g4,
            h,
            1.0,
            MatRef::new(&d_pre[base * g4..(base + batch) * g4], g4, false),
            MatRef::new(w_rec.data(), g4, true),
            0.0,
            &mut dh_carry,
        );
    }

    let mut dw_in = vec![0.0; width * g4];
    gemm(width, rows, g4, 1.0, MatRef::new(x.data(), width, true), MatRef::new(&d_pre, g4, false), 0.0, &mut dw_in);
    let mut dw_rec = vec![0.0; h * g4];
    gemm(h, rows, g4, 1.0, MatRef::new(&cache.prev_hidden, h, true), MatRef::new(&d_pre, g4, false), 0.0, &mut dw_rec);
    let mut dbias = vec![0.0; g4];
    for r in 0..rows {
        for (d, v) in dbias.iter_mut().zip(&d_pre[r * g4..(r + 1) * g4]) {
            *d += v;
        }
    }
    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; rows * width];
        gemm(rows, g4, width, 1.0, MatRef::new(&d_pre, g4, false), MatRef::new(w_in.data(), g4, true), 0.0, &mut dx);
        dx
    });
    DirectionGrads {
        dx,
        dw_in,
        dw_rec,
        dbias,
    }
}

fn interleave(fwd: &[f64], bwd: &[f64], rows: usize, h: usize) -> Tensor {
    let mut out = Vec::with_capacity(rows * 2 * h);
    for r in 0..rows {
        out.extend_from_slice(&fwd[r * h..(r + 1) * h]);
        out.extend_from_slice(&bwd[r * h..(r + 1) * h]);
    }
    Tensor::new(vec![rows, 2 * h], out).expect("bilstm output shape")
}

fn check_layer(x: &Tensor, lens: &[usize], params: [&Tensor; 6]) -> Result<usize> {
    let hidden = params[1].rows();
    check_direction(x.cols(), hidden, [params[0], params[1], params[2]])?;
    check_direction(x.cols(), hidden, [params[3], params[4], params[5]])?;
    let batch = lens.len();
    let t_max = lens.iter().copied().max().unwrap_or(0);
    if x.rows() != t_max * batch {
        return Err(Error::Shape(format!(
            "input has {} rows, batch layout needs {}",
            x.rows(),
            t_max * batch
        )));
    }
    Ok(hidden)
}

/// Standalone bidirectional layer over a padded batch; returns `[T*B, 2H]`.
pub fn bilstm_layer_forward(input: &PaddedBatch, params: &LstmLayerParams) -> Result<Tensor> {
    let (f, b) = (&params.forward, &params.backward);
    let hidden = check_layer(&input.data, &input.lens, [&f.w_in, &f.w_rec, &f.bias, &b.w_in, &b.w_rec, &b.bias])?;
    let (hf, _) = run_direction(&input.data, &input.lens, &f.w_in, &f.w_rec, &f.bias, false);
    let (hb, _) = run_direction(&input.data, &input.lens, &b.w_in, &b.w_rec, &b.bias, true);
    Ok(interleave(&hf, &hb, input.data.rows(), hidden))
}

struct BiLstmOp {
    lens: Vec<usize>,
    hidden: usize,
    fwd: DirectionCache,
    bwd: DirectionCache,
}

impl Backward for BiLstmOp {
    fn backward(&self, g: &Tensor, _out: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let h = self.hidden;
        let rows = x.rows();
        let mut dh_f = vec![0.0; rows * h];
        let mut dh_b = vec![0.0; rows * h];
        for r in 0..rows {
            let gr = g.row(r);
            dh_f[r * h..(r + 1) * h].copy_from_slice(&gr[..h]);
            dh_b[r * h..(r + 1) * h].copy_from_slice(&gr[h..]);
        }
        let gf = backprop_direction(x, &self.lens, inputs[1], inputs[2], &self.fwd, &dh_f, false, needs[0]);
        let gb = backprop_direction(x, &self.lens, inputs[4], inputs[5], &self.bwd, &dh_b, true, needs[0]);
        let dx = match (gf.dx, gb.dx) {
            (Some(mut a), Some(b)) => {
                a.iter_mut().zip(&b).for_each(|(a, b)| *a += b);
                Some(Tensor::new(x.shape().to_vec(), a)?)
            }
            _ => None,
        };
        let wrap = |v: Vec<f64>, like: &Tensor| Tensor::new(like.shape().to_vec(), v).map(Some);
        Ok(vec![
            dx,
            wrap(gf.dw_in, inputs[1])?,
            wrap(gf.dw_rec, inputs[2])?,
            wrap(gf.dbias, inputs[3])?,
            wrap(gb.dw_in, inputs[4])?,
            wrap(gb.dw_rec, inputs[5])?,
            wrap(gb.dbias, inputs[6])?,
        ])
    }
}

/// Records one bidirectional layer on the tape. `params` follows [`LayerParamIds`] order.
pub fn bilstm_layer(graph: &mut Graph, x: Var, lens: &[usize], params: [Var; 6]) -> Result<Var> {
    let hidden = {
        let p: Vec<&Tensor> = params.iter().map(|v| graph.value(*v)).collect();
        check_layer(graph.value(x), lens, [p[0], p[1], p[2], p[3], p[4], p[5]])?
    };
    let xv = graph.value(x);
    let (hf, cf) = run_direction(xv, lens, graph.value(params[0]), graph.value(params[1]), graph.value(params[2]), false);
    let (hb, cb) = run_direction(xv, lens, graph.value(params[3]), graph.value(params[4]), graph.value(params[5]), true);
    let out = interleave(&hf, &hb, xv.rows(), hidden);
    let op = BiLstmOp {
        lens: lens.to_vec(),
        hidden,
        fwd: cf,
        bwd: cb,
    };
    let mut inputs = vec![x];
    inputs.extend_from_slice(&params);
    Ok(graph.apply(&inputs, out, Box::new(op)))
}

/// Per-layer inverted-dropout masks for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    pub keep: f64,
    pub masks: Vec<Tensor>,
}

impl DropoutMasks {
    pub fn sample(cfg: &EncoderConfig, layers: usize, rows: usize, rng: &mut impl Rng) -> Self {
        let keep = 1.0 - cfg.dropout;
        let width = cfg.tap_width();
        let masks = (0..layers)
            .map(|_| {
                let mut m = Tensor::zeros(&[rows, width]);
                if keep >= 1.0 {
                    m.data_mut().iter_mut().for_each(|v| *v = 1.0);
                } else {
                    for v in m.data_mut() {
                        *v = if rng.gen::<f64>() < keep { 1.0 } else { 0.0 };
                    }
                }
                m
            })
            .collect();
        Self { keep, masks }
    }
}

#[derive(Clone, Debug)]
pub enum Mode {
    Eval,
    Train(DropoutMasks),
}

/// Every layer's output sequence, in batch layout.
#[derive(Clone, Debug)]
pub struct LayerTaps {
    pub taps: Vec<Var>,
    pub lens: Vec<usize>,
}

impl LayerTaps {
    /// 1-based layer access.
    pub fn layer(&self, i: usize) -> Var {
        self.taps[i - 1]
    }

    pub fn depth(&self) -> usize {
        self.taps.len()
    }
}

/// Runs the first `layers` encoder layers over an already paired batch.
pub fn encoder_forward(
    graph: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layers: usize,
    input: &PaddedBatch,
    mode: &Mode,
) -> Result<LayerTaps> {
    let mut x = graph.constant(input.data.clone());
    let mut taps = Vec::with_capacity(layers);
    for layer in 1..=layers {
        let ids = LayerParamIds::lookup(store, layer)?;
        let params = ids.0.map(|id| graph.param(store, id));
        let mut out = bilstm_layer(graph, x, &input.lens, params)?;
        if let Mode::Train(masks) = mode {
            if cfg.dropout > 0.0 {
                let mask = masks
                    .masks
                    .get(layer - 1)
                    .ok_or_else(|| Error::Validation(format!("no dropout mask for layer {layer}")))?;
                out = graph.dropout_apply(out, mask, masks.keep)?;
            }
        }
        taps.push(out);
        x = out;
    }
    Ok(LayerTaps {
        taps,
        lens: input.lens.clone(),
    })
}

/// Convenience wrapper: pairs frames of each utterance and packs them.
pub fn pair_and_pack(features: &[&Tensor]) -> Result<PaddedBatch> {
    let paired: Vec<Tensor> = features.iter().map(|f| pair_frames(f)).collect();
    let refs: Vec<&Tensor> = paired.iter().collect();
    PaddedBatch::pack(&refs)
}

/// Back-propagates per-tap upstream gradients (1-based layer, gradient) and
/// adds the resulting parameter gradients into `store`.
pub fn encoder_backward(graph: &mut Graph, taps: &LayerTaps, upstream: &[(usize, Tensor)], store: &mut ParamStore) -> Result<()> {
    let mut seeds = Vec::with_capacity(upstream.len());
    for (layer, grad) in upstream {
        if *layer == 0 || *layer > taps.depth() {
            return Err(Error::Shape(format!("no tap at layer {layer}")));
        }
        let var = taps.layer(*layer);
        if graph.value(var).shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} for tap of shape {:?}",
                grad.shape(),
                graph.value(var).shape()
            )));
        }
        seeds.push((var, grad.clone()));
    }
    graph.backward_from(&seeds)?;
    graph.accumulate_param_grads(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn pair_even_and_odd() {
        let x = seq(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]);
        assert_eq!(pair_frames(&x), seq(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]));
        let x5 = seq(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![5.0]]);
        assert_eq!(pair_frames(&x5), seq(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0]]));
        let x1 = seq(&[vec![9.0, 8.0]]);
        assert_eq!(pair_frames(&x1), seq(&[vec![9.0, 8.0, 0.0, 0.0]]));
    }

    fn zero_params(width: usize, h: usize) -> LstmLayerParams {
        let dir = DirectionParams {
            w_in: Tensor::zeros(&[width, 4 * h]),
            w_rec: Tensor::zeros(&[h, 4 * h]),
            bias: Tensor::zeros(&[4 * h]),
        };
        LstmLayerParams {
            forward: dir.clone(),
            backward: dir,
        }
    }

    fn random_params(width: usize, h: usize, seed: u64) -> LstmLayerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dir = || DirectionParams {
            w_in: uniform_tensor(&[width, 4 * h], -0.5, 0.5, &mut rng),
            w_rec: uniform_tensor(&[h, 4 * h], -0.5, 0.5, &mut rng),
            bias: uniform_tensor(&[4 * h], -0.5, 0.5, &mut rng),
        };
        LstmLayerParams {
            forward: dir(),
            backward: dir(),
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let x = PaddedBatch::pack(&[&seq(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![2.0, 2.0]])]).unwrap();
        let out = bilstm_layer_forward(&x, &zero_params(2, 3)).unwrap();
        assert_eq!(out.shape(), &[3, 6]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_direction_swap_permutes_halves() {
        let x = PaddedBatch::pack(&[&seq(&[vec![0.3, -0.7, 1.1]])]).unwrap();
        let p = random_params(3, 4, 11);
        let swapped = LstmLayerParams {
            forward: p.backward.clone(),
            backward: p.forward.clone(),
        };
        let a = bilstm_layer_forward(&x, &p).unwrap();
        let b = bilstm_layer_forward(&x, &swapped).unwrap();
        assert_eq!(&a.data()[..4], &b.data()[4..]);
        assert_eq!(&a.data()[4..], &b.data()[..4]);
    }

    #[test]
    fn padding_does_not_change_results() {
        let p = random_params(2, 3, 5);
        let short = seq(&[vec![0.1, 0.2], vec![-0.3, 0.4]]);
        let long = seq(&[vec![1.0, 0.0], vec![0.5, -0.5], vec![0.2, 0.9], vec![-1.0, 0.3]]);
        let alone = bilstm_layer_forward(&PaddedBatch::pack(&[&short]).unwrap(), &p).unwrap();
        let batch = PaddedBatch::pack(&[&long, &short]).unwrap();
        let together = bilstm_layer_forward(&batch, &p).unwrap();
        assert_eq!(batch.unpack(&together, 1), alone);
    }

    #[test]
    fn init_sets_forget_bias() {
        let cfg = EncoderConfig {
            num_layers: 2,
            hidden: 3,
            dropout: 0.1,
            input_dim: 4,
        };
        let mut store = ParamStore::new();
        init_layers(&mut store, &cfg, 1..=2, 9).unwrap();
        assert_eq!(store.len(), 12);
        let b = &store.by_name("enc.l2.bwd.b").unwrap().value;
        assert_eq!(b.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let w = &store.by_name("enc.l1.fwd.w_in").unwrap().value;
        assert_eq!(w.shape(), &[8, 12]);
        assert!(w.data().iter().all(|v| v.abs() < INIT_RANGE));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::desk_scale(10);
        assert!(cfg.validate().is_ok());
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        cfg.dropout = 0.0;
        cfg.num_layers = 0;
        assert!(cfg.validate().is_err());
    }
}
