//! The full recognizer: encoder, attention and decoder parameters plus the
//! configuration that shapes them.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alphabet::{Alphabet, END};
use crate::attention::AttentionParams;
use crate::decoder::{decode_step, initial_state, AttentionMode, DecoderParams, PreparedFeatures};
use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::Tensor;

/// Hard cap on decode steps, END included.
pub const MAX_DECODE_STEPS: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// attention hidden size A
    pub attention_dim: usize,
    /// LSTM hidden size H
    pub hidden_dim: usize,
    /// embedding size M
    pub embed_dim: usize,
    pub mode: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            attention_dim: 64,
            hidden_dim: 256,
            embed_dim: 128,
            mode: AttentionMode::Soft,
        }
    }
}

impl ModelConfig {
    /// H=8, D=8 toy model whose 8×14 inputs give K=4 cells.
    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(8),
            attention_dim: 8,
            hidden_dim: 8,
            embed_dim: 8,
            mode: AttentionMode::Soft,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.attention_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::input("attention, hidden and embedding sizes must be positive"));
        }
        Ok(())
    }
}

/// Parameter groups reported by the gradient check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Encoder,
    Attention,
    Gates,
    Embedding,
    Output,
    Init,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Encoder,
        ParamGroup::Attention,
        ParamGroup::Gates,
        ParamGroup::Embedding,
        ParamGroup::Output,
        ParamGroup::Init,
    ];
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Attention => "attention",
            ParamGroup::Gates => "gates",
            ParamGroup::Embedding => "embedding",
            ParamGroup::Output => "output",
            ParamGroup::Init => "init",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
    pub decoder: DecoderParams,
}

impl Params {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.encoder.feature_dim();
        let encoder = EncoderParams::init(&config.encoder, &mut rng);
        let attention = AttentionParams::init(d, config.hidden_dim, config.attention_dim, &mut rng);
        let decoder = DecoderParams::init(d, config.hidden_dim, config.embed_dim, &mut rng);
        Params {
            encoder,
            attention,
            decoder,
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.encoder.feature_dim();
        Params {
            encoder: EncoderParams::zeros(&config.encoder),
            attention: AttentionParams::zeros(d, config.hidden_dim, config.attention_dim),
            decoder: DecoderParams::zeros(d, config.hidden_dim, config.embed_dim),
        }
    }

    /// Every parameter tensor with its group and a stable name.
    pub fn named(&self) -> Vec<(ParamGroup, String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((ParamGroup::Encoder, format!("encoder.conv{i}.weight"), &l.weight));
            out.push((ParamGroup::Encoder, format!("encoder.conv{i}.bias"), &l.bias));
        }
        let a = &self.attention;
        let d = &self.decoder;
        let rest: [(ParamGroup, &str, &Tensor); 15] = [
            (ParamGroup::Attention, "attention.w_x", &a.w_x),
            (ParamGroup::Attention, "attention.w_h", &a.w_h),
            (ParamGroup::Attention, "attention.bias", &a.bias),
            (ParamGroup::Attention, "attention.score", &a.score),
            (ParamGroup::Gates, "decoder.gates", &d.gates),
            (ParamGroup::Gates, "decoder.gate_bias", &d.gate_bias),
            (ParamGroup::Embedding, "decoder.embedding", &d.embedding),
            (ParamGroup::Output, "decoder.out_hidden", &d.out_hidden),
            (ParamGroup::Output, "decoder.out_context", &d.out_context),
            (ParamGroup::Output, "decoder.out_proj", &d.out_proj),
            (ParamGroup::Output, "decoder.out_bias", &d.out_bias),
            (ParamGroup::Init, "decoder.init_h", &d.init_h),
            (ParamGroup::Init, "decoder.init_h_bias", &d.init_h_bias),
            (ParamGroup::Init, "decoder.init_c", &d.init_c),
            (ParamGroup::Init, "decoder.init_c_bias", &d.init_c_bias),
        ];
        out.extend(rest.into_iter().map(|(g, n, t)| (g, n.to_string(), t)));
        out
    }

    /// Mutable counterpart of [`Params::named`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        let a = &mut self.attention;
        out.extend([&mut a.w_x, &mut a.w_h, &mut a.bias, &mut a.score]);
        let d = &mut self.decoder;
        out.extend([
            &mut d.gates,
            &mut d.gate_bias,
            &mut d.embedding,
            &mut d.out_hidden,
            &mut d.out_context,
            &mut d.out_proj,
            &mut d.out_bias,
            &mut d.init_h,
            &mut d.init_h_bias,
            &mut d.init_c,
            &mut d.init_c_bias,
        ]);
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.named().iter().map(|(_, _, t)| t.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(factor));
    }

    pub fn add_assign(&mut self, other: &Params) -> Result<()> {
        let theirs: Vec<&Tensor> = other.named().into_iter().map(|(_, _, t)| t).collect();
        let mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(Error::shape("parameter sets have different layouts"));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Model { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Self {
        let params = Params::zeros(&config);
        Model { config, params }
    }

    pub fn prepare(&self, image: &GrayImage) -> Result<PreparedFeatures> {
        let grid = encode(&self.config.encoder, &self.params.encoder, image)?;
        PreparedFeatures::new(grid, &self.params.attention)
    }

    /// Argmax decoding; stops at END or after [`MAX_DECODE_STEPS`] steps.
    /// Returns the symbols emitted, END included when reached.
    pub fn greedy_symbols(&self, image: &GrayImage) -> Result<Vec<usize>> {
        let prepared = self.prepare(image)?;
        let mut state = initial_state(&prepared.grid, &self.params.decoder)?;
        let mut out = Vec::new();
        for _ in 0..MAX_DECODE_STEPS {
            let (_, next, dist) = decode_step(
                &prepared,
                &state,
                &self.params.attention,
                &self.params.decoder,
                self.config.mode,
            )?;
            let best = argmax(dist.data());
            out.push(best);
            if best == END {
                break;
            }
            state = next.with_emitted(best);
        }
        Ok(out)
    }

    pub fn greedy_decode(&self, image: &GrayImage) -> Result<String> {
        Ok(Alphabet.decode(&self.greedy_symbols(image)?))
    }
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
