//! The generative reranker: a bidirectional candidate encoder, a causal
//! decoder, and a dynamic output vocabulary.
//!
//! The output layer has no global item table. At every decode position the
//! logits are similarity scores `h · z_i` between the decoder's hidden
//! state and the current session's candidate embeddings, plus one learned
//! end-of-sequence embedding, so the model can only ever name an item that
//! is actually in the session (or stop). `H` head projections share the
//! decoder trunk; head `i` predicts the item `i` positions ahead, which is
//! what lets inference emit several items per forward pass.
//!
//! Sentinel conventions: BOS is a learned embedding used only as the first
//! decoder input and is never a prediction target; EOS is row 0 of the
//! augmented vocabulary, is only ever a target, and never enters the
//! decoder input.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Tensor};
use crate::scalar::{softmax_slice, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive mask value for banned attention links and vocabulary entries.
pub const MASK_VALUE: f64 = -1e9;

/// One element of a decoder-side sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Bos,
    Item(usize),
    Eos,
}

/// Row of a token in the augmented vocabulary (EOS first, then candidates).
pub fn vocab_index(token: Token) -> usize {
    match token {
        Token::Eos => 0,
        Token::Item(i) => i + 1,
        Token::Bos => panic!("BOS is never a prediction target"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width.
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    /// Number of ordered prediction heads sharing the trunk.
    pub omtp_heads: usize,
    /// Candidate-set size `m` expected by the encoder.
    pub max_candidates: usize,
    /// Slate length `n` emitted at inference.
    pub slate_length: usize,
    /// Width of raw item feature vectors.
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            encoder_layers: 4,
            decoder_layers: 4,
            attention_heads: 4,
            omtp_heads: 4,
            max_candidates: 30,
            slate_length: 10,
            feature_dim: 6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.attention_heads == 0 {
            return Err(Error::InvalidConfig("d_model and attention_heads must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.attention_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by attention_heads {}",
                self.d_model, self.attention_heads
            )));
        }
        if self.omtp_heads == 0 || self.omtp_heads > self.slate_length {
            return Err(Error::InvalidConfig(format!(
                "omtp_heads must satisfy 1 <= H <= n, got H={} n={}",
                self.omtp_heads, self.slate_length
            )));
        }
        if self.slate_length == 0 || self.slate_length > self.max_candidates {
            return Err(Error::InvalidConfig(format!(
                "slate_length must satisfy 1 <= n <= m, got n={} m={}",
                self.slate_length, self.max_candidates
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    /// Augmented vocabulary size: EOS plus m candidates.
    pub fn vocab_size(&self) -> usize {
        self.max_candidates + 1
    }
}

/// Named parameter tensors with deterministic (sorted) iteration order.
#[derive(Clone, Debug)]
pub struct ParamSet<E> {
    map: BTreeMap<String, Tensor<E>>,
}

impl<E: Scalar> ParamSet<E> {
    fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    fn insert(&mut self, name: &str, tensor: Tensor<E>) {
        let prior = self.map.insert(name.to_string(), tensor);
        assert!(prior.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor<E> {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<E> {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<E>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<F: Scalar>(&self) -> ParamSet<F> {
        ParamSet {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Bitwise equality of every tensor, used to verify frozen parameters.
    pub fn bits_equal(&self, other: &ParamSet<E>) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(other.map.iter()).all(|((ka, ta), (kb, tb))| {
                ka == kb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
            })
    }
}

impl<E: Scalar> FromIterator<(String, Tensor<E>)> for ParamSet<E> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<E>)>>(iter: I) -> Self {
        ParamSet { map: iter.into_iter().collect() }
    }
}

/// Parameter node ids inside one graph.
pub struct BoundModel {
    ids: BTreeMap<String, NodeId>,
}

impl BoundModel {
    pub fn id(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Encoder outputs reused across decode positions.
pub struct EncoderOut {
    /// Projected item features `[m, d]`, shared with the decoder input.
    pub proj: NodeId,
    /// Candidate embeddings `[m, d]`.
    pub z: NodeId,
    /// Augmented vocabulary `[m + 1, d]`: EOS row then candidates.
    pub z_aug: NodeId,
    /// `z_aug` transposed, cached for logit matmuls.
    pub z_aug_t: NodeId,
}

#[derive(Clone, Debug)]
pub struct GenRerankerModel<E> {
    config: ModelConfig,
    params: ParamSet<E>,
}

impl<E: Scalar> GenRerankerModel<E> {
    /// Fresh model with uniform initialization scaled by `1/sqrt(d_model)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.d_model as f64).sqrt();
        let mut draw = |shape: Vec<usize>| -> Tensor<E> {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_f64(shape, &data).expect("init shape")
        };
        let mut params = ParamSet::new();
        let d = config.d_model;
        params.insert("embed.proj.w", draw(vec![config.feature_dim, d]));
        params.insert("embed.proj.b", Tensor::zeros(vec![d]));
        params.insert("embed.enc_pos", draw(vec![config.max_candidates, d]));
        params.insert("embed.dec_pos", draw(vec![config.slate_length + 1, d]));
        params.insert("embed.bos", draw(vec![1, d]));
        params.insert("embed.eos", draw(vec![1, d]));
        for layer in 0..config.encoder_layers {
            insert_attention(&mut params, &format!("enc.{layer}.attn"), d, &mut draw);
            insert_layer_norm::<E>(&mut params, &format!("enc.{layer}.ln1"), d);
            insert_ffn(&mut params, &format!("enc.{layer}.ffn"), d, config.ffn_dim(), &mut draw);
            insert_layer_norm::<E>(&mut params, &format!("enc.{layer}.ln2"), d);
        }
        for layer in 0..config.decoder_layers {
            insert_attention(&mut params, &format!("dec.{layer}.self"), d, &mut draw);
            insert_layer_norm::<E>(&mut params, &format!("dec.{layer}.ln1"), d);
            insert_attention(&mut params, &format!("dec.{layer}.cross"), d, &mut draw);
            insert_layer_norm::<E>(&mut params, &format!("dec.{layer}.ln2"), d);
            insert_ffn(&mut params, &format!("dec.{layer}.ffn"), d, config.ffn_dim(), &mut draw);
            insert_layer_norm::<E>(&mut params, &format!("dec.{layer}.ln3"), d);
        }
        for head in 0..config.omtp_heads {
            params.insert(&format!("head.{head}.w"), draw(vec![d, d]));
            params.insert(&format!("head.{head}.b"), Tensor::zeros(vec![d]));
        }
        Ok(GenRerankerModel { config, params })
    }

    /// All-zero parameters. Every hidden state is exactly zero, so every
    /// output distribution is uniform; closed-form loss tests rely on it.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        for (_, tensor) in model.params.iter_mut() {
            for v in tensor.data_mut() {
                *v = E::ZERO;
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<E> {
        &mut self.params
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet<E>) -> Result<Self> {
        config.validate()?;
        Ok(GenRerankerModel { config, params })
    }

    pub fn cast<F: Scalar>(&self) -> GenRerankerModel<F> {
        GenRerankerModel { config: self.config.clone(), params: self.params.cast() }
    }

    /// Insert every parameter into a graph as a leaf.
    pub fn bind(&self, g: &mut Graph<E>) -> BoundModel {
        let ids = self
            .params
            .iter()
            .map(|(name, tensor)| (name.clone(), g.leaf(tensor)))
            .collect();
        BoundModel { ids }
    }

    fn check_features(&self, features: &[Vec<f64>]) -> Result<()> {
        if features.len() != self.config.max_candidates {
            return Err(Error::Schema(format!(
                "expected {} candidates, got {}",
                self.config.max_candidates,
                features.len()
            )));
        }
        for (i, f) in features.iter().enumerate() {
            if f.len() != self.config.feature_dim {
                return Err(Error::Schema(format!(
                    "candidate {i} has feature width {}, expected {}",
                    f.len(),
                    self.config.feature_dim
                )));
            }
        }
        Ok(())
    }

    /// Encode the candidate set into target-aware embeddings.
    ///
    /// Position order of `features` is the rank from the preceding stage.
    pub fn encode_graph(
        &self,
        g: &mut Graph<E>,
        bound: &BoundModel,
        features: &[Vec<f64>],
    ) -> Result<EncoderOut> {
        self.check_features(features)?;
        let m = self.config.max_candidates;
        let flat: Vec<E> = features
            .iter()
            .flat_map(|row| row.iter().map(|&x| E::from_f64(x)))
            .collect();
        let x = g.leaf_from(vec![m, self.config.feature_dim], flat);
        let projected = g.matmul(x, bound.id("embed.proj.w"));
        let proj = g.add_row_broadcast(projected, bound.id("embed.proj.b"));
        let mut h = g.add(proj, bound.id("embed.enc_pos"));
        for layer in 0..self.config.encoder_layers {
            h = self.encoder_block(g, bound, h, layer);
        }
        let z = h;
        let z_aug = g.concat_rows(&[bound.id("embed.eos"), z]);
        let z_aug_t = g.transpose(z_aug);
        Ok(EncoderOut { proj, z, z_aug, z_aug_t })
    }

    fn encoder_block(&self, g: &mut Graph<E>, bound: &BoundModel, x: NodeId, layer: usize) -> NodeId {
        let prefix = format!("enc.{layer}");
        let attn = self.attention(g, bound, x, x, &format!("{prefix}.attn"), false);
        let res = g.add(x, attn);
        let x = self.layer_norm(g, bound, res, &format!("{prefix}.ln1"));
        let ffn = self.ffn(g, bound, x, &format!("{prefix}.ffn"));
        let res = g.add(x, ffn);
        self.layer_norm(g, bound, res, &format!("{prefix}.ln2"))
    }

    fn decoder_block(
        &self,
        g: &mut Graph<E>,
        bound: &BoundModel,
        x: NodeId,
        z: NodeId,
        layer: usize,
    ) -> NodeId {
        let prefix = format!("dec.{layer}");
        let self_attn = self.attention(g, bound, x, x, &format!("{prefix}.self"), true);
        let res = g.add(x, self_attn);
        let x = self.layer_norm(g, bound, res, &format!("{prefix}.ln1"));
        let cross = self.attention(g, bound, x, z, &format!("{prefix}.cross"), false);
        let res = g.add(x, cross);
        let x = self.layer_norm(g, bound, res, &format!("{prefix}.ln2"));
        let ffn = self.ffn(g, bound, x, &format!("{prefix}.ffn"));
        let res = g.add(x, ffn);
        self.layer_norm(g, bound, res, &format!("{prefix}.ln3"))
    }

    fn attention(
        &self,
        g: &mut Graph<E>,
        bound: &BoundModel,
        query_in: NodeId,
        context: NodeId,
        prefix: &str,
        causal: bool,
    ) -> NodeId {
        let t = g.shape(query_in)[0];
        let s = g.shape(context)[0];
        let heads = self.config.attention_heads;
        let dh = self.config.d_model / heads;

        let q = g.matmul(query_in, bound.id(&format!("{prefix}.wq")));
        let q = g.add_row_broadcast(q, bound.id(&format!("{prefix}.bq")));
        let k = g.matmul(context, bound.id(&format!("{prefix}.wk")));
        let k = g.add_row_broadcast(k, bound.id(&format!("{prefix}.bk")));
        let v = g.matmul(context, bound.id(&format!("{prefix}.wv")));
        let v = g.add_row_broadcast(v, bound.id(&format!("{prefix}.bv")));

        let causal_mask: Vec<bool> = if causal {
            let mut mask = vec![false; t * s];
            for i in 0..t {
                for j in 0..s {
                    mask[i * s + j] = j > i;
                }
            }
            mask
        } else {
            Vec::new()
        };

        let mut outputs = Vec::with_capacity(heads);
        for head in 0..heads {
            let from = head * dh;
            let to = from + dh;
            let qh = g.slice_cols(q, from, to);
            let kh = g.slice_cols(k, from, to);
            let vh = g.slice_cols(v, from, to);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            if causal {
                scores = g.mask_fill(scores, &causal_mask, MASK_VALUE);
            }
            let attn = g.softmax(scores, 1).expect("attention softmax axis");
            outputs.push(g.matmul(attn, vh));
        }
        let merged = g.concat_cols(&outputs);
        let out = g.matmul(merged, bound.id(&format!("{prefix}.wo")));
        g.add_row_broadcast(out, bound.id(&format!("{prefix}.bo")))
    }

    fn ffn(&self, g: &mut Graph<E>, bound: &BoundModel, x: NodeId, prefix: &str) -> NodeId {
        let h = g.matmul(x, bound.id(&format!("{prefix}.w1")));
        let h = g.add_row_broadcast(h, bound.id(&format!("{prefix}.b1")));
        let h = g.gelu(h);
        let h = g.matmul(h, bound.id(&format!("{prefix}.w2")));
        g.add_row_broadcast(h, bound.id(&format!("{prefix}.b2")))
    }

    fn layer_norm(&self, g: &mut Graph<E>, bound: &BoundModel, x: NodeId, prefix: &str) -> NodeId {
        g.layer_norm(
            x,
            bound.id(&format!("{prefix}.g")),
            bound.id(&format!("{prefix}.b")),
            LAYER_NORM_EPS,
        )
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        if prefix.len() > self.config.slate_length {
            return Err(Error::InvalidSequence(format!(
                "prefix of {} items exceeds slate length {}",
                prefix.len(),
                self.config.slate_length
            )));
        }
        let mut seen = vec![false; self.config.max_candidates];
        for &item in prefix {
            if item >= self.config.max_candidates {
                return Err(Error::InvalidArgument(format!(
                    "item index {item} out of range for {} candidates",
                    self.config.max_candidates
                )));
            }
            if seen[item] {
                return Err(Error::InvalidSequence(format!("duplicate item {item} in sequence")));
            }
            seen[item] = true;
        }
        Ok(())
    }

    /// Run the decoder trunk over `[BOS, prefix...]`.
    ///
    /// Returns hidden states `[prefix.len() + 1, d]`; the state at position
    /// `t` conditions on the prefix up to and including item `t - 1`.
    pub fn decoder_states_graph(
        &self,
        g: &mut Graph<E>,
        bound: &BoundModel,
        enc: &EncoderOut,
        prefix: &[usize],
    ) -> Result<NodeId> {
        self.check_prefix(prefix)?;
        let t = prefix.len() + 1;
        let bos = bound.id("embed.bos");
        let inputs = if prefix.is_empty() {
            bos
        } else {
            let items = g.gather_rows(enc.proj, prefix);
            g.concat_rows(&[bos, items])
        };
        let pos = g.slice_rows(bound.id("embed.dec_pos"), 0, t);
        let mut h = g.add(inputs, pos);
        for layer in 0..self.config.decoder_layers {
            h = self.decoder_block(g, bound, h, enc.z, layer);
        }
        Ok(h)
    }

    /// Logits of one prediction head against the augmented vocabulary,
    /// shape `[positions, m + 1]`.
    pub fn head_logits_graph(
        &self,
        g: &mut Graph<E>,
        bound: &BoundModel,
        hidden: NodeId,
        enc: &EncoderOut,
        head: usize,
    ) -> Result<NodeId> {
        if head >= self.config.omtp_heads {
            return Err(Error::InvalidArgument(format!(
                "head {head} out of range for {} heads",
                self.config.omtp_heads
            )));
        }
        let projected = g.matmul(hidden, bound.id(&format!("head.{head}.w")));
        let projected = g.add_row_broadcast(projected, bound.id(&format!("head.{head}.b")));
        Ok(g.matmul(projected, enc.z_aug_t))
    }

    // ── Eager conveniences (fresh graph per call) ────────────────────

    /// Candidate embeddings `Z` as a host tensor.
    pub fn encode(&self, features: &[Vec<f64>]) -> Result<Tensor<E>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let enc = self.encode_graph(&mut g, &bound, features)?;
        Tensor::new(g.shape(enc.z).to_vec(), g.data(enc.z).to_vec())
    }

    /// One decode step: distributions of every head over the augmented
    /// vocabulary, conditioned on `[BOS, prefix...]`.
    ///
    /// Distributions are the raw model outputs; feasibility masking is the
    /// decoder loop's job.
    pub fn decode_step(&self, features: &[Vec<f64>], prefix: &[Token]) -> Result<Vec<Vec<E>>> {
        let mut items = Vec::with_capacity(prefix.len());
        for token in prefix {
            match token {
                Token::Eos => {
                    return Err(Error::InvalidState(
                        "EOS cannot appear in a decoder prefix".into(),
                    ))
                }
                Token::Bos => {
                    return Err(Error::InvalidSequence(
                        "BOS is implicit and cannot appear mid-prefix".into(),
                    ))
                }
                Token::Item(i) => items.push(*i),
            }
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let enc = self.encode_graph(&mut g, &bound, features)?;
        let hidden = self.decoder_states_graph(&mut g, &bound, &enc, &items)?;
        let last = g.slice_rows(hidden, items.len(), items.len() + 1);
        let vocab = self.config.vocab_size();
        let mut result = Vec::with_capacity(self.config.omtp_heads);
        for head in 0..self.config.omtp_heads {
            let logits = self.head_logits_graph(&mut g, &bound, last, &enc, head)?;
            let mut probs = vec![E::ZERO; vocab];
            softmax_slice(g.data(logits), &mut probs);
            result.push(probs);
        }
        Ok(result)
    }

    /// Teacher-forced distributions of one head at every position of
    /// `[BOS, items...]`, shape `(items.len() + 1) x (m + 1)`.
    pub fn teacher_forced_distributions(
        &self,
        features: &[Vec<f64>],
        items: &[usize],
        head: usize,
    ) -> Result<Vec<Vec<E>>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let enc = self.encode_graph(&mut g, &bound, features)?;
        let hidden = self.decoder_states_graph(&mut g, &bound, &enc, items)?;
        let logits = self.head_logits_graph(&mut g, &bound, hidden, &enc, head)?;
        let vocab = self.config.vocab_size();
        let data = g.data(logits);
        let mut rows = Vec::with_capacity(items.len() + 1);
        for pos in 0..=items.len() {
            let mut probs = vec![E::ZERO; vocab];
            softmax_slice(&data[pos * vocab..(pos + 1) * vocab], &mut probs);
            rows.push(probs);
        }
        Ok(rows)
    }

    /// Log-probability of a full slate under head 0, as a graph node.
    ///
    /// Teacher forcing over `[BOS, items...]` with feasibility masking:
    /// at step `t` the distribution is renormalized over the items not yet
    /// chosen (EOS banned until the final step, where it is forced). The
    /// result is a proper log-distribution over valid slates — summing
    /// `exp` over every permutation of every n-subset gives one.
    pub fn sequence_log_prob_graph(
        &self,
        g: &mut Graph<E>,
        bound: &BoundModel,
        enc: &EncoderOut,
        items: &[usize],
    ) -> Result<NodeId> {
        let n = self.config.slate_length;
        if items.len() != n {
            return Err(Error::InvalidSequence(format!(
                "sequence has {} items, expected slate length {n}",
                items.len()
            )));
        }
        let hidden = self.decoder_states_graph(g, bound, enc, items)?;
        let logits = self.head_logits_graph(g, bound, hidden, enc, 0)?;
        let vocab = self.config.vocab_size();

        // Row t: ban EOS and the already chosen items[0..t]; final row
        // bans everything except EOS.
        let rows = n + 1;
        let mut mask = vec![false; rows * vocab];
        for t in 0..n {
            mask[t * vocab] = true;
            for &prior in &items[..t] {
                mask[t * vocab + vocab_index(Token::Item(prior))] = true;
            }
        }
        for v in 1..vocab {
            mask[n * vocab + v] = true;
        }
        let masked = g.mask_fill(logits, &mask, MASK_VALUE);
        let lse = g.logsumexp_rows(masked);

        let mut parts = Vec::with_capacity(2 * rows);
        let mut coeffs = Vec::with_capacity(2 * rows);
        for t in 0..rows {
            let target = if t < n { Token::Item(items[t]) } else { Token::Eos };
            let logit = g.pick(logits, t, vocab_index(target));
            let norm = g.pick(lse, t, 0);
            parts.push(logit);
            coeffs.push(1.0);
            parts.push(norm);
            coeffs.push(-1.0);
        }
        Ok(g.affine_combine(&parts, &coeffs))
    }

    /// Eager form of [`Self::sequence_log_prob_graph`].
    pub fn sequence_log_prob(&self, features: &[Vec<f64>], items: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let enc = self.encode_graph(&mut g, &bound, features)?;
        let node = self.sequence_log_prob_graph(&mut g, &bound, &enc, items)?;
        Ok(g.scalar_value(node))
    }
}

/// Distribution over the augmented vocabulary from a raw hidden state:
/// `p(i) = exp(h · z_i) / sum_j exp(h · z_j)`.
pub fn dynamic_logits<E: Scalar>(h: &[E], z_aug: &Tensor<E>) -> Result<Vec<E>> {
    let shape = z_aug.shape();
    if shape.len() != 2 || shape[1] != h.len() {
        return Err(Error::InvalidShape(format!(
            "hidden width {} does not match vocabulary shape {shape:?}",
            h.len()
        )));
    }
    let rows = shape[0];
    let d = shape[1];
    let mut scores = vec![E::ZERO; rows];
    for (i, score) in scores.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for j in 0..d {
            acc += h[j].to_f64() * z_aug.data()[i * d + j].to_f64();
        }
        *score = E::from_f64(acc);
    }
    let mut out = vec![E::ZERO; rows];
    softmax_slice(&scores, &mut out);
    Ok(out)
}

fn insert_attention<E: Scalar>(
    params: &mut ParamSet<E>,
    prefix: &str,
    d: usize,
    draw: &mut impl FnMut(Vec<usize>) -> Tensor<E>,
) {
    for w in ["wq", "wk", "wv", "wo"] {
        params.insert(&format!("{prefix}.{w}"), draw(vec![d, d]));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        params.insert(&format!("{prefix}.{b}"), Tensor::zeros(vec![d]));
    }
}

fn insert_ffn<E: Scalar>(
    params: &mut ParamSet<E>,
    prefix: &str,
    d: usize,
    d_ff: usize,
    draw: &mut impl FnMut(Vec<usize>) -> Tensor<E>,
) {
    params.insert(&format!("{prefix}.w1"), draw(vec![d, d_ff]));
    params.insert(&format!("{prefix}.b1"), Tensor::zeros(vec![d_ff]));
    params.insert(&format!("{prefix}.w2"), draw(vec![d_ff, d]));
    params.insert(&format!("{prefix}.b2"), Tensor::zeros(vec![d]));
}

fn insert_layer_norm<E: Scalar>(params: &mut ParamSet<E>, prefix: &str, d: usize) {
    params.insert(&format!("{prefix}.g"), Tensor::new(vec![d], vec![E::ONE; d]).unwrap());
    params.insert(&format!("{prefix}.b"), Tensor::zeros(vec![d]));
}
