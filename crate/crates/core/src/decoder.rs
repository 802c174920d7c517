//! LSTM decoder with a character embedding and a deep output layer.
//!
//! Gate pre-activations are `T·[E·y_{t−1}; h_{t−1}; ẑ_t] + b`, split into
//! input/forget/output/candidate blocks of size `H`. The output distribution
//! is `softmax(L_0·(E·y_{t−1} + L_h·h_t + L_z·ẑ_t) + b_0)`.

use rand::Rng;

use crate::alphabet::ALPHABET_SIZE;
use crate::attention::{attend_keys, project_features, AttentionKeys, AttentionParams, AttentionStep};
use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::tensor::{matvec_acc, matvec_t_acc, outer_acc, sigmoid, softmax_in_place, Tensor};

/// How the decoder sees the image features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Soft attention context at every step.
    Soft,
    /// No-attention baseline: the mean feature vector at the first step, zeros afterwards.
    FirstStepOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// |L|×M
    pub embedding: Tensor,
    /// 4H×(M+H+D), row blocks ordered input, forget, output, candidate
    pub gates: Tensor,
    /// 4H
    pub gate_bias: Tensor,
    /// L_h, M×H
    pub out_hidden: Tensor,
    /// L_z, M×D
    pub out_context: Tensor,
    /// L_0, |L|×M
    pub out_proj: Tensor,
    /// |L|
    pub out_bias: Tensor,
    /// H×D, h_0 = tanh(init_h·mean(Ψ) + init_h_bias)
    pub init_h: Tensor,
    pub init_h_bias: Tensor,
    /// H×D, c_0 = tanh(init_c·mean(Ψ) + init_c_bias)
    pub init_c: Tensor,
    pub init_c_bias: Tensor,
}

impl DecoderParams {
    pub fn zeros(feature_dim: usize, hidden: usize, embed: usize) -> Self {
        let (d, h, m, l) = (feature_dim, hidden, embed, ALPHABET_SIZE);
        DecoderParams {
            embedding: Tensor::zeros(&[l, m]),
            gates: Tensor::zeros(&[4 * h, m + h + d]),
            gate_bias: Tensor::zeros(&[4 * h]),
            out_hidden: Tensor::zeros(&[m, h]),
            out_context: Tensor::zeros(&[m, d]),
            out_proj: Tensor::zeros(&[l, m]),
            out_bias: Tensor::zeros(&[l]),
            init_h: Tensor::zeros(&[h, d]),
            init_h_bias: Tensor::zeros(&[h]),
            init_c: Tensor::zeros(&[h, d]),
            init_c_bias: Tensor::zeros(&[h]),
        }
    }

    pub fn init<R: Rng + ?Sized>(feature_dim: usize, hidden: usize, embed: usize, rng: &mut R) -> Self {
        let (d, h, m, l) = (feature_dim, hidden, embed, ALPHABET_SIZE);
        let glorot = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
        let mut gate_bias = Tensor::zeros(&[4 * h]);
        gate_bias.data_mut()[h..2 * h].fill(1.0);
        DecoderParams {
            embedding: Tensor::uniform(&[l, m], glorot(l, m), rng),
            gates: Tensor::uniform(&[4 * h, m + h + d], glorot(h, m + h + d), rng),
            gate_bias,
            out_hidden: Tensor::uniform(&[m, h], glorot(m, h), rng),
            out_context: Tensor::uniform(&[m, d], glorot(m, d), rng),
            out_proj: Tensor::uniform(&[l, m], glorot(l, m), rng),
            out_bias: Tensor::zeros(&[l]),
            init_h: Tensor::uniform(&[h, d], glorot(h, d), rng),
            init_h_bias: Tensor::zeros(&[h]),
            init_c: Tensor::uniform(&[h, d], glorot(h, d), rng),
            init_c_bias: Tensor::zeros(&[h]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gate_bias.len() / 4
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.out_context.cols()
    }

    fn check(&self) -> Result<()> {
        let (h, m, d, l) = (self.hidden_dim(), self.embed_dim(), self.feature_dim(), ALPHABET_SIZE);
        let expect: [(&str, &Tensor, Vec<usize>); 11] = [
            ("embedding", &self.embedding, vec![l, m]),
            ("gates", &self.gates, vec![4 * h, m + h + d]),
            ("gate_bias", &self.gate_bias, vec![4 * h]),
            ("out_hidden", &self.out_hidden, vec![m, h]),
            ("out_context", &self.out_context, vec![m, d]),
            ("out_proj", &self.out_proj, vec![l, m]),
            ("out_bias", &self.out_bias, vec![l]),
            ("init_h", &self.init_h, vec![h, d]),
            ("init_h_bias", &self.init_h_bias, vec![h]),
            ("init_c", &self.init_c, vec![h, d]),
            ("init_c_bias", &self.init_c_bias, vec![h]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "decoder {name} is {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Tensor,
    pub c: Tensor,
    /// Previous output: a distribution over the alphabet, a one-hot of the
    /// emitted symbol, or all zeros before the first step.
    pub y_prev: Tensor,
    /// Number of steps already taken.
    pub step: usize,
}

impl DecoderState {
    pub fn new(h: Tensor, c: Tensor) -> Self {
        DecoderState {
            h,
            c,
            y_prev: Tensor::zeros(&[ALPHABET_SIZE]),
            step: 0,
        }
    }

    /// The same state with `y_prev` replaced by the one-hot of `symbol`.
    pub fn with_emitted(mut self, symbol: usize) -> Self {
        self.y_prev.fill(0.0);
        self.y_prev.data_mut()[symbol] = 1.0;
        self
    }
}

/// `h_0`, `c_0` from the mean feature vector.
pub fn initial_state(features: &FeatureGrid, params: &DecoderParams) -> Result<DecoderState> {
    params.check()?;
    if features.dim() != params.feature_dim() {
        return Err(Error::shape(format!(
            "features have dimension {} but the decoder expects {}",
            features.dim(),
            params.feature_dim()
        )));
    }
    let mean = features.mean();
    let (h0, c0) = init_forward(params, &mean);
    Ok(DecoderState::new(Tensor::vector(h0), Tensor::vector(c0)))
}

pub(crate) fn init_forward(params: &DecoderParams, mean: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h = params.hidden_dim();
    let d = mean.len();
    let mut h0 = params.init_h_bias.data().to_vec();
    matvec_acc(params.init_h.data(), h, d, mean, &mut h0);
    let mut c0 = params.init_c_bias.data().to_vec();
    matvec_acc(params.init_c.data(), h, d, mean, &mut c0);
    h0.iter_mut().for_each(|v| *v = v.tanh());
    c0.iter_mut().for_each(|v| *v = v.tanh());
    (h0, c0)
}

/// Intermediates of one LSTM step.
#[derive(Clone, Debug)]
pub(crate) struct LstmCache {
    /// [E·y; h_prev; z]
    pub input: Vec<f64>,
    /// activated gates, 4H in order i, f, o, g
    pub gates: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

pub(crate) fn embed(params: &DecoderParams, y: &[f64]) -> Vec<f64> {
    let mut e = vec![0.0; params.embed_dim()];
    matvec_t_acc(params.embedding.data(), ALPHABET_SIZE, params.embed_dim(), y, &mut e);
    e
}

pub(crate) fn lstm_forward(
    params: &DecoderParams,
    embedded: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    z: &[f64],
) -> LstmCache {
    let h = params.hidden_dim();
    let mut input = Vec::with_capacity(embedded.len() + h + z.len());
    input.extend_from_slice(embedded);
    input.extend_from_slice(h_prev);
    input.extend_from_slice(z);
    let mut gates = params.gate_bias.data().to_vec();
    matvec_acc(params.gates.data(), 4 * h, input.len(), &input, &mut gates);
    for (j, g) in gates.iter_mut().enumerate() {
        *g = if j < 3 * h { sigmoid(*g) } else { g.tanh() };
    }
    let mut c = vec![0.0; h];
    let mut tanh_c = vec![0.0; h];
    let mut hn = vec![0.0; h];
    for j in 0..h {
        let (i, f, o, g) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        hn[j] = o * tanh_c[j];
    }
    LstmCache {
        input,
        gates,
        c_prev: c_prev.to_vec(),
        c,
        tanh_c,
        h: hn,
    }
}

/// Accumulates weight gradients; returns (d_embedded, d_h_prev, d_c_prev, d_z).
pub(crate) fn lstm_backward(
    params: &DecoderParams,
    cache: &LstmCache,
    dh: &[f64],
    dc_next: &[f64],
    grads: &mut DecoderParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let h = params.hidden_dim();
    let m = params.embed_dim();
    let g = &cache.gates;
    let mut dpre = vec![0.0; 4 * h];
    let mut dc_prev = vec![0.0; h];
    for j in 0..h {
        let (i, f, o, gg) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
        let t = cache.tanh_c[j];
        let dc = dc_next[j] + dh[j] * o * (1.0 - t * t);
        let d_o = dh[j] * t;
        let d_i = dc * gg;
        let d_f = dc * cache.c_prev[j];
        let d_g = dc * i;
        dc_prev[j] = dc * f;
        dpre[j] = d_i * i * (1.0 - i);
        dpre[h + j] = d_f * f * (1.0 - f);
        dpre[2 * h + j] = d_o * o * (1.0 - o);
        dpre[3 * h + j] = d_g * (1.0 - gg * gg);
    }
    outer_acc(grads.gates.data_mut(), &dpre, &cache.input);
    for (b, d) in grads.gate_bias.data_mut().iter_mut().zip(&dpre) {
        *b += d;
    }
    let mut d_input = vec![0.0; cache.input.len()];
    matvec_t_acc(params.gates.data(), 4 * h, cache.input.len(), &dpre, &mut d_input);
    let d_z = d_input.split_off(m + h);
    let d_h_prev = d_input.split_off(m);
    (d_input, d_h_prev, dc_prev, d_z)
}

/// One LSTM update: gates from `[E·y_prev; h; z]`, then `c' = f⊙c + i⊙g`,
/// `h' = o⊙tanh(c')`. The returned state keeps `y_prev` and advances `step`.
pub fn lstm_step(state: &DecoderState, z: &Tensor, params: &DecoderParams) -> Result<DecoderState> {
    params.check()?;
    let h = params.hidden_dim();
    if state.h.len() != h || state.c.len() != h || state.y_prev.len() != ALPHABET_SIZE || z.len() != params.feature_dim() {
        return Err(Error::shape(format!(
            "state h {:?}, c {:?}, y {:?} and context {:?} do not fit hidden size {h}, feature size {}",
            state.h.shape(),
            state.c.shape(),
            state.y_prev.shape(),
            z.shape(),
            params.feature_dim()
        )));
    }
    let e = embed(params, state.y_prev.data());
    let cache = lstm_forward(params, &e, state.h.data(), state.c.data(), z.data());
    Ok(DecoderState {
        h: Tensor::vector(cache.h),
        c: Tensor::vector(cache.c),
        y_prev: state.y_prev.clone(),
        step: state.step + 1,
    })
}

#[derive(Clone, Debug)]
pub(crate) struct OutputCache {
    pub combined: Vec<f64>,
    pub probs: Vec<f64>,
}

pub(crate) fn output_forward(params: &DecoderParams, embedded: &[f64], h: &[f64], z: &[f64]) -> OutputCache {
    let (m, hd, d) = (params.embed_dim(), params.hidden_dim(), params.feature_dim());
    let mut combined = embedded.to_vec();
    matvec_acc(params.out_hidden.data(), m, hd, h, &mut combined);
    matvec_acc(params.out_context.data(), m, d, z, &mut combined);
    let mut probs = params.out_bias.data().to_vec();
    matvec_acc(params.out_proj.data(), ALPHABET_SIZE, m, &combined, &mut probs);
    softmax_in_place(&mut probs);
    OutputCache { combined, probs }
}

/// Backward of the output layer for the loss `−log p[target]`. Accumulates
/// weight gradients; returns (d_embedded, d_h, d_z).
pub(crate) fn output_backward(
    params: &DecoderParams,
    cache: &OutputCache,
    h: &[f64],
    z: &[f64],
    target: usize,
    grads: &mut DecoderParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (m, hd, d) = (params.embed_dim(), params.hidden_dim(), params.feature_dim());
    let mut dlogits = cache.probs.clone();
    dlogits[target] -= 1.0;
    outer_acc(grads.out_proj.data_mut(), &dlogits, &cache.combined);
    for (b, g) in grads.out_bias.data_mut().iter_mut().zip(&dlogits) {
        *b += g;
    }
    let mut dq = vec![0.0; m];
    matvec_t_acc(params.out_proj.data(), ALPHABET_SIZE, m, &dlogits, &mut dq);
    outer_acc(grads.out_hidden.data_mut(), &dq, h);
    outer_acc(grads.out_context.data_mut(), &dq, z);
    let mut dh = vec![0.0; hd];
    matvec_t_acc(params.out_hidden.data(), m, hd, &dq, &mut dh);
    let mut dz = vec![0.0; d];
    matvec_t_acc(params.out_context.data(), m, d, &dq, &mut dz);
    (dq, dh, dz)
}

/// `P(y_t | Ψ, y_{t−1})` as a softmax over the alphabet.
pub fn output_distribution(y_prev: &Tensor, h: &Tensor, z: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    params.check()?;
    if y_prev.len() != ALPHABET_SIZE || h.len() != params.hidden_dim() || z.len() != params.feature_dim() {
        return Err(Error::shape(format!(
            "output layer got y {:?}, h {:?}, z {:?}",
            y_prev.shape(),
            h.shape(),
            z.shape()
        )));
    }
    let e = embed(params, y_prev.data());
    Ok(Tensor::vector(output_forward(params, &e, h.data(), z.data()).probs))
}

/// Context vector used by the no-attention baseline at a given step.
pub(crate) fn baseline_context(features: &FeatureGrid, step: usize) -> AttentionStep {
    let k = features.len();
    let (weights, context) = if step == 0 {
        (vec![1.0 / k as f64; k], features.mean())
    } else {
        (vec![0.0; k], vec![0.0; features.dim()])
    };
    AttentionStep {
        scores: Tensor::zeros(&[k]),
        weights: Tensor::vector(weights),
        context: Tensor::vector(context),
    }
}

/// Features plus the per-image attention projection, shared by every step
/// and every beam hypothesis decoding the same image.
pub struct PreparedFeatures {
    pub grid: FeatureGrid,
    pub(crate) keys: AttentionKeys,
}

impl PreparedFeatures {
    pub fn new(grid: FeatureGrid, attention: &AttentionParams) -> Result<Self> {
        if grid.dim() != attention.feature_dim() {
            return Err(Error::shape(format!(
                "features have dimension {} but attention expects {}",
                grid.dim(),
                attention.feature_dim()
            )));
        }
        let keys = project_features(&grid, attention);
        Ok(PreparedFeatures { grid, keys })
    }
}

/// attend → lstm_step → output_distribution. The returned state's `y_prev` is
/// the emitted distribution; inference replaces it with a one-hot.
pub fn decode_step(
    features: &PreparedFeatures,
    state: &DecoderState,
    attention: &AttentionParams,
    decoder: &DecoderParams,
    mode: AttentionMode,
) -> Result<(AttentionStep, DecoderState, Tensor)> {
    if state.h.len() != attention.hidden_dim() {
        return Err(Error::shape(format!(
            "hidden state of size {} but attention expects {}",
            state.h.len(),
            attention.hidden_dim()
        )));
    }
    let att = match mode {
        AttentionMode::Soft => attend_keys(&features.keys, &features.grid, state.h.data(), attention).0,
        AttentionMode::FirstStepOnly => baseline_context(&features.grid, state.step),
    };
    let mut next = lstm_step(state, &att.context, decoder)?;
    let dist = output_distribution(&state.y_prev, &next.h, &att.context, decoder)?;
    next.y_prev = dist.clone();
    Ok((att, next, dist))
}
