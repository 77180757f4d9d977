//! Inference-time slate generation.
//!
//! Two decoders share the masking discipline but not their code paths:
//! [`ar_decode`] is the plain greedy baseline (head 0, one item per
//! forward pass), [`omtp_decode`] resolves up to `H` heads per pass in
//! ascending order with cumulative masking inside the pass, finishing in
//! `ceil(n / H)` passes. With `H = 1` the two must agree bit for bit —
//! that equivalence is checked in tests precisely because the
//! implementations are independent.
//!
//! The encoder runs once per request; each pass re-runs the decoder trunk
//! over the full chosen prefix (no state caching).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::GenRerankerModel;
use crate::scalar::{softmax_slice, Scalar};

/// Per-request decode bookkeeping.
///
/// `mask` ranges over the augmented vocabulary (EOS at index 0, candidate
/// `i` at index `i + 1`); a set entry is excluded from argmax. EOS stays
/// masked until exactly `n` items are chosen, and a masked index never
/// unmasks.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub chosen: Vec<usize>,
    pub mask: Vec<bool>,
    pub step_count: usize,
}

impl DecodeState {
    pub fn new(num_candidates: usize) -> Self {
        let mut mask = vec![false; num_candidates + 1];
        mask[0] = true; // EOS banned until the slate is complete
        DecodeState { chosen: Vec::new(), mask, step_count: 0 }
    }

    fn choose(&mut self, item: usize) {
        debug_assert!(!self.mask[item + 1], "choosing a masked item");
        self.mask[item + 1] = true;
        self.chosen.push(item);
    }

    /// Argmax over unmasked candidate entries of a raw distribution.
    fn best_unmasked(&self, probs: &[f64]) -> usize {
        let mut best: Option<(usize, f64)> = None;
        for (vocab, &p) in probs.iter().enumerate().skip(1) {
            if self.mask[vocab] {
                continue;
            }
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((vocab, p));
            }
        }
        let (vocab, _) = best.expect("mask exhausted before the slate was complete");
        vocab - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Ar,
    Omtp,
}

impl DecodeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Ar => "ar",
            DecodeMode::Omtp => "omtp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(DecodeMode::Ar),
            "omtp" => Ok(DecodeMode::Omtp),
            other => Err(Error::InvalidArgument(format!(
                "unknown decode mode {other}; expected ar or omtp"
            ))),
        }
    }
}

/// A decoded slate plus its cost and the raw head-0 distribution observed
/// at each forward pass (before masking).
#[derive(Clone, Debug)]
pub struct DecodeOutcome {
    /// Candidate indices, length `n`, distinct.
    pub slate: Vec<usize>,
    /// Decoder trunk invocations.
    pub forward_passes: usize,
    /// Per pass: head-0 probabilities over the `m + 1` vocabulary.
    pub head0_premask: Vec<Vec<f64>>,
}

/// Greedy autoregressive decode: one forward pass per emitted item.
pub fn ar_decode<E: Scalar>(
    model: &GenRerankerModel<E>,
    features: &[Vec<f64>],
) -> Result<DecodeOutcome> {
    let config = model.config();
    let n = config.slate_length;
    let vocab = config.vocab_size();

    let mut g: Graph<E> = Graph::new();
    let bound = model.bind(&mut g);
    let enc = model.encode_graph(&mut g, &bound, features)?;

    let mut state = DecodeState::new(config.max_candidates);
    let mut premask = Vec::with_capacity(n);
    let mut probs = vec![E::ZERO; vocab];
    while state.chosen.len() < n {
        let hidden = model.decoder_states_graph(&mut g, &bound, &enc, &state.chosen)?;
        let last = g.slice_rows(hidden, state.chosen.len(), state.chosen.len() + 1);
        let logits = model.head_logits_graph(&mut g, &bound, last, &enc, 0)?;
        softmax_slice(g.data(logits), &mut probs);
        let probs64: Vec<f64> = probs.iter().map(|p| p.to_f64()).collect();
        let item = state.best_unmasked(&probs64);
        premask.push(probs64);
        state.choose(item);
        state.step_count += 1;
    }
    Ok(DecodeOutcome {
        slate: state.chosen,
        forward_passes: state.step_count,
        head0_premask: premask,
    })
}

/// Masked parallel decode: each forward pass resolves up to `heads` items.
///
/// Heads are resolved in ascending order; head `i` takes its argmax after
/// masking everything already chosen, including items picked by lower
/// heads within the same pass. The final pass truncates extra heads.
pub fn omtp_decode<E: Scalar>(
    model: &GenRerankerModel<E>,
    features: &[Vec<f64>],
    heads: usize,
) -> Result<DecodeOutcome> {
    let config = model.config();
    let n = config.slate_length;
    let vocab = config.vocab_size();
    if heads == 0 || heads > config.omtp_heads {
        return Err(Error::InvalidConfig(format!(
            "cannot decode with {heads} heads; the model has {}",
            config.omtp_heads
        )));
    }
    if heads > n {
        return Err(Error::InvalidConfig(format!(
            "cannot decode with {heads} heads for a slate of {n}"
        )));
    }

    let mut g: Graph<E> = Graph::new();
    let bound = model.bind(&mut g);
    let enc = model.encode_graph(&mut g, &bound, features)?;

    let mut state = DecodeState::new(config.max_candidates);
    let mut premask = Vec::new();
    let mut probs = vec![E::ZERO; vocab];
    while state.chosen.len() < n {
        let hidden = model.decoder_states_graph(&mut g, &bound, &enc, &state.chosen)?;
        let last_row = state.chosen.len();
        let last = g.slice_rows(hidden, last_row, last_row + 1);
        for head in 0..heads {
            if state.chosen.len() >= n {
                break;
            }
            let logits = model.head_logits_graph(&mut g, &bound, last, &enc, head)?;
            softmax_slice(g.data(logits), &mut probs);
            let probs64: Vec<f64> = probs.iter().map(|p| p.to_f64()).collect();
            if head == 0 {
                premask.push(probs64.clone());
            }
            let item = state.best_unmasked(&probs64);
            state.choose(item);
        }
        state.step_count += 1;
    }
    Ok(DecodeOutcome {
        slate: state.chosen,
        forward_passes: state.step_count,
        head0_premask: premask,
    })
}

/// Per-item inclusion scores for candidate-level ranking metrics.
///
/// Runs the greedy head-0 decode and credits every candidate with the raw
/// (pre-mask) probability it received at each of the `n` steps; scores lie
/// in `[0, n]`.
pub fn item_inclusion_scores<E: Scalar>(
    model: &GenRerankerModel<E>,
    features: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let outcome = ar_decode(model, features)?;
    let m = model.config().max_candidates;
    let mut scores = vec![0.0f64; m];
    for step_probs in &outcome.head0_premask {
        for (item, score) in scores.iter_mut().enumerate() {
            *score += step_probs[item + 1];
        }
    }
    Ok(scores)
}

/// One line of the decode output file.
#[derive(Clone, Debug, Serialize)]
pub struct DecodeRecord {
    pub session_id: String,
    pub slate: Vec<String>,
    pub mode: String,
    pub forward_passes: usize,
    pub latency_us: u64,
}
