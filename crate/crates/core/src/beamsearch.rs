//! Top-N beam search over decoder outputs with optional character LM fusion
//! and lexicon-trie pruning.

use std::cmp::Ordering;

use crate::alphabet::{Alphabet, ALPHABET_SIZE, END};
use crate::attention::AttentionStep;
use crate::decoder::{decode_step, initial_state, DecoderState, PreparedFeatures};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::lexicon::{nearest_word, LexiconTrie, ROOT};
use crate::model::{Model, MAX_DECODE_STEPS};
use crate::ngram::NgramModel;

/// Source of per-step symbol log-probabilities.
pub trait EmissionModel {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;

    /// Log-probabilities over all [`ALPHABET_SIZE`] symbols for the next
    /// step, given the state and the symbol emitted last (`None` at the
    /// first step). Also returns the state to carry forward. `−∞` marks a
    /// symbol that cannot be emitted.
    fn step(&self, state: &Self::State, prev: Option<usize>) -> Result<(Vec<f64>, Self::State)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LexiconMode {
    /// drop extensions that leave the trie
    #[default]
    Prune,
    /// decode freely, then replace each word by its nearest lexicon word
    Edit,
}

#[derive(Clone, Debug)]
pub struct DecodeConfig<'a> {
    pub beam_width: usize,
    pub lm_weight: f64,
    pub lm: Option<&'a NgramModel>,
    /// also add the LM term for the END symbol
    pub lm_scores_end: bool,
    pub trie: Option<&'a LexiconTrie>,
    pub lexicon_mode: LexiconMode,
    /// decode steps, END included
    pub max_len: usize,
}

impl Default for DecodeConfig<'_> {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 16,
            lm_weight: 0.25,
            lm: None,
            lm_scores_end: true,
            trie: None,
            lexicon_mode: LexiconMode::Prune,
            max_len: MAX_DECODE_STEPS,
        }
    }
}

impl DecodeConfig<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::input("beam width must be at least 1"));
        }
        if !(self.lm_weight >= 0.0) || !self.lm_weight.is_finite() {
            return Err(Error::input(format!("LM weight must be finite and non-negative, got {}", self.lm_weight)));
        }
        if self.max_len == 0 {
            return Err(Error::input("maximum length must be at least 1"));
        }
        Ok(())
    }

    fn pruning(&self) -> Option<&LexiconTrie> {
        match self.lexicon_mode {
            LexiconMode::Prune => self.trie,
            LexiconMode::Edit => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// emitted symbols, END included once completed
    pub symbols: Vec<usize>,
    pub score: f64,
    /// per-step decoder log-probabilities
    pub model_terms: Vec<f64>,
    /// per-step `α·log Θ` terms (zero when no LM term applies)
    pub lm_terms: Vec<f64>,
    pub state: S,
    pub completed: bool,
    /// trie node of the current prefix when pruning
    pub node: usize,
}

impl<S> Hypothesis<S> {
    pub fn root(state: S) -> Self {
        Hypothesis {
            symbols: Vec::new(),
            score: 0.0,
            model_terms: Vec::new(),
            lm_terms: Vec::new(),
            state,
            completed: false,
            node: ROOT,
        }
    }

    pub fn word(&self) -> String {
        Alphabet.decode(&self.symbols)
    }

    fn last(&self) -> Option<usize> {
        self.symbols.last().copied()
    }
}

/// Higher score first, then lexicographically smaller symbol sequence.
pub fn rank<S>(a: &Hypothesis<S>, b: &Hypothesis<S>) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.symbols.cmp(&b.symbols))
}

/// Children of `hyp` for the given step log-probabilities. `state` is the
/// decoder state after the step, shared by every child.
pub fn hypothesis_extend<S: Clone>(
    hyp: &Hypothesis<S>,
    logprobs: &[f64],
    state: &S,
    config: &DecodeConfig,
) -> Vec<Hypothesis<S>> {
    debug_assert!(!hyp.completed);
    let trie = config.pruning();
    let mut out = Vec::new();
    for (symbol, &lp) in logprobs.iter().enumerate().take(ALPHABET_SIZE) {
        if lp == f64::NEG_INFINITY || lp.is_nan() {
            continue;
        }
        let node = match trie {
            None => ROOT,
            Some(t) if symbol == END => {
                if !t.is_word_end(hyp.node) {
                    continue;
                }
                hyp.node
            }
            Some(t) => match t.child(hyp.node, symbol) {
                Some(n) => n,
                None => continue,
            },
        };
        let lm_term = match config.lm {
            Some(lm) if config.lm_weight > 0.0 && (symbol != END || config.lm_scores_end) => {
                config.lm_weight * lm.log_prob_symbols(&hyp.symbols, symbol)
            }
            _ => 0.0,
        };
        let mut child = Hypothesis {
            symbols: hyp.symbols.clone(),
            score: hyp.score + lp + lm_term,
            model_terms: hyp.model_terms.clone(),
            lm_terms: hyp.lm_terms.clone(),
            state: state.clone(),
            completed: symbol == END,
            node,
        };
        child.symbols.push(symbol);
        child.model_terms.push(lp);
        child.lm_terms.push(lm_term);
        out.push(child);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub word: String,
    pub score: f64,
    pub symbols: Vec<usize>,
    /// false when no hypothesis reached END within the length limit
    pub completed: bool,
}

impl<S> From<Hypothesis<S>> for Decoded {
    fn from(h: Hypothesis<S>) -> Self {
        Decoded {
            word: h.word(),
            score: h.score,
            symbols: h.symbols,
            completed: h.completed,
        }
    }
}

/// Runs the search and returns at most `beam_width` results, best first.
///
/// Each step, the children of all open hypotheses compete for
/// `beam_width` slots; completed winners move to the closed list. At the
/// last allowed step only END is expanded. The search ends when no open
/// hypothesis remains or when every open score is below the N-th closed
/// score. When the beam is wider than one, the greedy completion is merged
/// into the closed list as well.
pub fn beam_search<M: EmissionModel>(model: &M, config: &DecodeConfig) -> Result<Vec<Decoded>> {
    config.validate()?;
    let n = config.beam_width;
    let mut found = search(model, config, n)?;
    if n > 1 && found.first().is_some_and(|h| h.completed) {
        for g in search(model, config, 1)?.into_iter().filter(|g| g.completed) {
            if !found.iter().any(|c| c.symbols == g.symbols) {
                found.push(g);
            }
        }
        found.sort_by(rank);
        found.truncate(n);
    }
    let mut out: Vec<Decoded> = found.into_iter().map(Decoded::from).collect();
    if let (Some(trie), LexiconMode::Edit) = (config.trie, config.lexicon_mode) {
        let words = trie.words();
        for d in &mut out {
            d.word = nearest_word(&words, &d.word)?;
        }
    }
    Ok(out)
}

/// Core loop. Returns the closed list, or the best open hypotheses
/// (flagged incomplete) when nothing completed.
fn search<M: EmissionModel>(model: &M, config: &DecodeConfig, n: usize) -> Result<Vec<Hypothesis<M::State>>> {
    let mut open = vec![Hypothesis::root(model.start()?)];
    let mut closed: Vec<Hypothesis<M::State>> = Vec::new();
    for t in 0..config.max_len {
        let last_step = t + 1 == config.max_len;
        let mut candidates = Vec::new();
        for hyp in &open {
            let (mut logprobs, next) = model.step(&hyp.state, hyp.last())?;
            if logprobs.len() != ALPHABET_SIZE {
                return Err(Error::shape(format!(
                    "emission model returned {} log-probabilities, expected {ALPHABET_SIZE}",
                    logprobs.len()
                )));
            }
            if last_step {
                logprobs[..END].fill(f64::NEG_INFINITY);
            }
            candidates.extend(hypothesis_extend(hyp, &logprobs, &next, config));
        }
        candidates.sort_by(rank);
        candidates.truncate(n);
        let (done, still_open): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|h| h.completed);
        closed.extend(done);
        closed.sort_by(rank);
        closed.truncate(n);
        if still_open.is_empty() {
            break;
        }
        if closed.len() == n && still_open.iter().all(|h| h.score < closed[n - 1].score) {
            return Ok(closed);
        }
        open = still_open;
    }
    if closed.is_empty() {
        open.sort_by(rank);
        open.truncate(n);
        return Ok(open);
    }
    Ok(closed)
}

/// A model bound to one image.
pub struct ModelEmitter<'a> {
    pub model: &'a Model,
    pub features: PreparedFeatures,
}

impl<'a> ModelEmitter<'a> {
    pub fn new(model: &'a Model, image: &GrayImage) -> Result<Self> {
        Ok(ModelEmitter {
            model,
            features: model.prepare(image)?,
        })
    }

    /// Teacher-forced replay of `symbols`, returning the attention step
    /// taken before each symbol.
    pub fn attention_trace(&self, symbols: &[usize]) -> Result<Vec<AttentionStep>> {
        let mut state = self.start()?;
        let mut out = Vec::with_capacity(symbols.len());
        let p = &self.model.params;
        for t in 0..symbols.len() {
            if t > 0 {
                state = state.with_emitted(symbols[t - 1]);
            }
            let (att, next, _) = decode_step(&self.features, &state, &p.attention, &p.decoder, self.model.config.mode)?;
            out.push(att);
            state = next;
        }
        Ok(out)
    }
}

impl EmissionModel for ModelEmitter<'_> {
    type State = DecoderState;

    fn start(&self) -> Result<DecoderState> {
        initial_state(&self.features.grid, &self.model.params.decoder)
    }

    fn step(&self, state: &DecoderState, prev: Option<usize>) -> Result<(Vec<f64>, DecoderState)> {
        let p = &self.model.params;
        let (_, next, dist) = match prev {
            Some(s) => decode_step(
                &self.features,
                &state.clone().with_emitted(s),
                &p.attention,
                &p.decoder,
                self.model.config.mode,
            )?,
            None => decode_step(&self.features, state, &p.attention, &p.decoder, self.model.config.mode)?,
        };
        Ok((dist.data().iter().map(|v| v.ln()).collect(), next))
    }
}

/// Beam search on one image.
pub fn beam_decode(model: &Model, image: &GrayImage, config: &DecodeConfig) -> Result<Vec<Decoded>> {
    beam_search(&ModelEmitter::new(model, image)?, config)
}
