//! Losses, optimization, the two-stage training loop, and checkpoints.
//!
//! Stage one pre-trains on exposure order with a multi-token objective:
//! a cross-entropy term over every head/offset pair plus a pairwise term
//! that scores permutations of each H-item window by the click-DCG and
//! pushes the heads toward the better-ordered ones. Stage two post-trains
//! on preference pairs against a frozen reference: the loss rewards
//! raising the winning slate's log-probability relative to the reference
//! more than the losing slate's.
//!
//! Every loss is term-averaged rather than sequence-summed, so values are
//! comparable across slate lengths and head counts. Cross-entropy terms
//! use the raw (unmasked) output distributions — the model has to learn
//! not to repeat items; slate log-probabilities used by the preference
//! loss are feasibility-masked (see `sequence_log_prob_graph`).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DpoExample, TrainExample};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Tensor};
use crate::model::{vocab_index, BoundModel, GenRerankerModel, ModelConfig, ParamSet, Token};
use crate::scalar::Scalar;
use crate::seeding::derive_seed_indexed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Reward-difference scale of the preference loss.
    pub beta_dpo: f64,
    /// Weight of the multi-head cross-entropy term.
    pub lambda1: f64,
    /// Weight of the head-order term.
    pub lambda2: f64,
    /// Maximum sampled permutation pairs per window position.
    pub order_pair_cap: usize,
    pub grad_clip_norm: f64,
    /// Epochs per stage.
    pub epochs: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-6,
            batch_size: 64,
            beta_dpo: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
            order_pair_cap: 8,
            grad_clip_norm: 1.0,
            epochs: 3,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.beta_dpo <= 0.0 || self.grad_clip_norm <= 0.0 {
            return Err(Error::InvalidConfig(
                "learning_rate, beta_dpo, and grad_clip_norm must be positive".into(),
            ));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 || self.order_pair_cap == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, order_pair_cap, and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// How far a parameter set has been trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Scratch,
    Pretrained,
    Dpo,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Scratch => "scratch",
            StageTag::Pretrained => "pretrained",
            StageTag::Dpo => "dpo",
        }
    }
}

/// A loss node plus the number of averaged terms behind it.
pub struct LossNode {
    pub node: NodeId,
    pub term_count: usize,
}

// ── Batch validation and shared forward ──────────────────────────────

fn validate_batch(config: &ModelConfig, batch: &[TrainExample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidBatch("empty batch".into()));
    }
    for (i, ex) in batch.iter().enumerate() {
        if ex.features.len() != config.max_candidates {
            return Err(Error::InvalidBatch(format!(
                "example {i}: {} candidates, expected {}",
                ex.features.len(),
                config.max_candidates
            )));
        }
        if ex.exposed.len() != config.slate_length {
            return Err(Error::InvalidBatch(format!(
                "example {i}: exposure length {}, expected {}",
                ex.exposed.len(),
                config.slate_length
            )));
        }
        if ex.clicks.len() != ex.exposed.len() {
            return Err(Error::InvalidBatch(format!(
                "example {i}: {} click flags for {} exposed items",
                ex.clicks.len(),
                ex.exposed.len()
            )));
        }
        let mut seen = vec![false; config.max_candidates];
        for &item in &ex.exposed {
            if item >= config.max_candidates {
                return Err(Error::InvalidBatch(format!(
                    "example {i}: item {item} outside the candidate set"
                )));
            }
            if seen[item] {
                return Err(Error::InvalidBatch(format!("example {i}: item {item} repeats")));
            }
            seen[item] = true;
        }
    }
    Ok(())
}

/// Per-example teacher-forced logits and row normalizers per head.
struct ExampleForward {
    /// Raw head logits, each `[n + 1, m + 1]`.
    logits: Vec<NodeId>,
    /// Row log-sum-exp of each head's logits, `[n + 1, 1]`.
    lse: Vec<NodeId>,
}

fn forward_examples<E: Scalar>(
    model: &GenRerankerModel<E>,
    g: &mut Graph<E>,
    bound: &BoundModel,
    batch: &[TrainExample],
    heads: usize,
) -> Result<Vec<ExampleForward>> {
    let mut out = Vec::with_capacity(batch.len());
    for ex in batch {
        let enc = model.encode_graph(g, bound, &ex.features)?;
        let hidden = model.decoder_states_graph(g, bound, &enc, &ex.exposed)?;
        let mut logits = Vec::with_capacity(heads);
        let mut lse = Vec::with_capacity(heads);
        for head in 0..heads {
            let l = model.head_logits_graph(g, bound, hidden, &enc, head)?;
            logits.push(l);
            lse.push(g.logsumexp_rows(l));
        }
        out.push(ExampleForward { logits, lse });
    }
    Ok(out)
}

/// Target at an offset position: exposure items then EOS.
fn target_token(ex: &TrainExample, index: usize) -> Token {
    if index < ex.exposed.len() {
        Token::Item(ex.exposed[index])
    } else {
        Token::Eos
    }
}

fn ce_loss_terms<E: Scalar>(
    g: &mut Graph<E>,
    forwards: &[ExampleForward],
    batch: &[TrainExample],
    heads: usize,
) -> (Vec<NodeId>, Vec<f64>, usize) {
    // Term (position p, head i) contributes lse - logit, i.e. -log p of
    // the target `i` positions ahead; heads whose offset runs past the
    // EOS slot are masked out of the sum. The last position keeps exactly
    // one term, the EOS target of head 0.
    let n = batch[0].exposed.len();
    let mut per_example = 0usize;
    for p in 0..=n {
        for i in 0..heads {
            if p + i <= n {
                per_example += 1;
            }
        }
    }
    let total = per_example * batch.len();
    let weight = 1.0 / total as f64;
    let mut parts = Vec::with_capacity(2 * total);
    let mut coeffs = Vec::with_capacity(2 * total);
    for (ex, fw) in batch.iter().zip(forwards) {
        for p in 0..=n {
            for i in 0..heads {
                if p + i > n {
                    continue;
                }
                let target = vocab_index(target_token(ex, p + i));
                let logit = g.pick(fw.logits[i], p, target);
                let norm = g.pick(fw.lse[i], p, 0);
                parts.push(norm);
                coeffs.push(weight);
                parts.push(logit);
                coeffs.push(-weight);
            }
        }
    }
    (parts, coeffs, total)
}

/// Next-item cross-entropy, head 0 only: the plain autoregressive
/// objective, averaged over batch and step.
pub fn pretrain_loss_single_head<E: Scalar>(
    model: &GenRerankerModel<E>,
    g: &mut Graph<E>,
    bound: &BoundModel,
    batch: &[TrainExample],
) -> Result<LossNode> {
    validate_batch(model.config(), batch)?;
    let forwards = forward_examples(model, g, bound, batch, 1)?;
    let (parts, coeffs, count) = ce_loss_terms(g, &forwards, batch, 1);
    Ok(LossNode { node: g.affine_combine(&parts, &coeffs), term_count: count })
}

/// Multi-head cross-entropy: every head predicts its offset target,
/// averaged over batch and contributing (position, head) terms.
pub fn omtp_ce_loss<E: Scalar>(
    model: &GenRerankerModel<E>,
    g: &mut Graph<E>,
    bound: &BoundModel,
    batch: &[TrainExample],
) -> Result<LossNode> {
    validate_batch(model.config(), batch)?;
    let heads = model.config().omtp_heads;
    let forwards = forward_examples(model, g, bound, batch, heads)?;
    let (parts, coeffs, count) = ce_loss_terms(g, &forwards, batch, heads);
    Ok(LossNode { node: g.affine_combine(&parts, &coeffs), term_count: count })
}

/// Window score: DCG of click labels in permuted order.
fn window_dcg(clicks: &[u8], perm: &[usize]) -> f64 {
    perm.iter()
        .enumerate()
        .map(|(j, &src)| f64::from(clicks[src]) / ((j + 2) as f64).log2())
        .sum()
}

fn permutations(len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..len).collect();
    heap_permute(&mut items, len, &mut out);
    out.sort(); // lexicographic, independent of generation order
    out
}

fn heap_permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k <= 1 {
        out.push(items.clone());
        return;
    }
    for i in 0..k {
        heap_permute(items, k - 1, out);
        if k.is_multiple_of(2) {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

fn order_loss_terms<E: Scalar>(
    model: &GenRerankerModel<E>,
    g: &mut Graph<E>,
    forwards: &[ExampleForward],
    batch: &[TrainExample],
    pair_cap: usize,
    pair_seed: u64,
) -> Vec<NodeId> {
    let heads = model.config().omtp_heads;
    let n = model.config().slate_length;
    let perms = permutations(heads);
    let mut terms = Vec::new();

    for (ex_idx, (ex, fw)) in batch.iter().zip(forwards).enumerate() {
        // Windows lie fully inside the item span; EOS carries no click.
        for p in 0..=(n - heads) {
            let clicks = &ex.clicks[p..p + heads];
            if clicks.iter().all(|&c| c == clicks[0]) {
                continue; // every permutation ties
            }
            let scores: Vec<f64> = perms.iter().map(|perm| window_dcg(clicks, perm)).collect();
            let mut pairs = Vec::new();
            for (a, sa) in scores.iter().enumerate() {
                for (b, sb) in scores.iter().enumerate() {
                    if *sa > *sb + 1e-9 {
                        pairs.push((a, b));
                    }
                }
            }
            if pairs.is_empty() {
                continue;
            }
            let selected: Vec<(usize, usize)> = if pairs.len() <= pair_cap {
                pairs
            } else {
                let seed =
                    derive_seed_indexed(pair_seed, "order.pairs", &[ex_idx as u64, p as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rand::seq::index::sample(&mut rng, pairs.len(), pair_cap)
                    .iter()
                    .map(|i| pairs[i])
                    .collect()
            };

            for (win, lose) in selected {
                // Joint head score difference; the shared row normalizers
                // cancel exactly, leaving logit differences.
                let mut parts = Vec::with_capacity(2 * heads);
                let mut coeffs = Vec::with_capacity(2 * heads);
                for i in 0..heads {
                    let w_tok = vocab_index(Token::Item(ex.exposed[p + perms[win][i]]));
                    let l_tok = vocab_index(Token::Item(ex.exposed[p + perms[lose][i]]));
                    parts.push(g.pick(fw.logits[i], p, w_tok));
                    coeffs.push(1.0);
                    parts.push(g.pick(fw.logits[i], p, l_tok));
                    coeffs.push(-1.0);
                }
                let margin = g.affine_combine(&parts, &coeffs);
                let neg = g.scale(margin, -1.0);
                terms.push(g.softplus(neg));
            }
        }
    }
    terms
}

/// Pairwise head-order loss over permutations of each H-item window,
/// scored by the click-DCG; positions where every permutation ties
/// contribute nothing. Averaged over contributing pairs.
pub fn omtp_order_loss<E: Scalar>(
    model: &GenRerankerModel<E>,
    g: &mut Graph<E>,
    bound: &BoundModel,
    batch: &[TrainExample],
    pair_cap: usize,
    pair_seed: u64,
) -> Result<LossNode> {
    if model.config().omtp_heads < 2 {
        return Err(Error::InvalidConfig(
            "the order loss needs at least two heads; no pairs exist for H = 1".into(),
        ));
    }
    validate_batch(model.config(), batch)?;
    let heads = model.config().omtp_heads;
    let forwards = forward_examples(model, g, bound, batch, heads)?;
    let terms = order_loss_terms(model, g, &forwards, batch, pair_cap, pair_seed);
    let node = if terms.is_empty() { g.scalar_leaf(0.0) } else { g.mean_of(&terms) };
    Ok(LossNode { node, term_count: terms.len() })
}

/// Combined objective `lambda1 * ce + lambda2 * order` on one shared
/// forward pass.
pub fn omtp_loss<E: Scalar>(
    model: &GenRerankerModel<E>,
    g: &mut Graph<E>,
    bound: &BoundModel,
    batch: &[TrainExample],
    cfg: &TrainConfig,
    pair_seed: u64,
) -> Result<LossNode> {
    validate_batch(model.config(), batch)?;
    let heads = model.config().omtp_heads;
    let forwards = forward_examples(model, g, bound, batch, heads)?;

    let (parts, coeffs, ce_count) = ce_loss_terms(g, &forwards, batch, heads);
    let ce = g.affine_combine(&parts, &coeffs);

    let (order, order_count) = if cfg.lambda2 == 0.0 || heads < 2 {
        (g.scalar_leaf(0.0), 0)
    } else {
        let terms = order_loss_terms(model, g, &forwards, batch, cfg.order_pair_cap, pair_seed);
        let count = terms.len();
        let node = if terms.is_empty() { g.scalar_leaf(0.0) } else { g.mean_of(&terms) };
        (node, count)
    };

    Ok(LossNode {
        node: g.affine_combine(&[ce, order], &[cfg.lambda1, cfg.lambda2]),
        term_count: ce_count + order_count,
    })
}

// ── Preference loss ──────────────────────────────────────────────────

fn validate_pairs(config: &ModelConfig, pairs: &[DpoExample]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidBatch("empty preference batch".into()));
    }
    for (i, pair) in pairs.iter().enumerate() {
        if pair.winner == pair.loser {
            return Err(Error::InvalidBatch(format!(
                "pair {i}: winner and loser are identical; such pairs are rejected upstream"
            )));
        }
        let mut w = pair.winner.clone();
        let mut l = pair.loser.clone();
        w.sort_unstable();
        l.sort_unstable();
        if w != l {
            return Err(Error::InvalidBatch(format!(
                "pair {i}: winner and loser must range over the same item set"
            )));
        }
        if pair.winner.len() != config.slate_length {
            return Err(Error::InvalidBatch(format!(
                "pair {i}: slate length {} does not match the model's {}",
                pair.winner.len(),
                config.slate_length
            )));
        }
    }
    Ok(())
}

/// Frozen-reference slate log-probabilities, computed without gradients.
fn reference_log_probs<E: Scalar>(
    reference: &GenRerankerModel<E>,
    pair: &DpoExample,
) -> Result<(f64, f64)> {
    let mut g: Graph<E> = Graph::new();
    let bound = reference.bind(&mut g);
    let enc = reference.encode_graph(&mut g, &bound, &pair.features)?;
    let w = reference.sequence_log_prob_graph(&mut g, &bound, &enc, &pair.winner)?;
    let l = reference.sequence_log_prob_graph(&mut g, &bound, &enc, &pair.loser)?;
    Ok((g.scalar_value(w), g.scalar_value(l)))
}

/// Preference loss against a frozen reference: mean over pairs of
/// `-log sigmoid(beta * [policy margin - reference margin])` where each
/// margin is the winner-minus-loser slate log-probability under head 0.
///
/// With the policy identical to the reference the margins cancel and the
/// loss is `ln 2`, independent of data and beta.
pub fn dpo_loss<E: Scalar>(
    policy: &GenRerankerModel<E>,
    reference: &GenRerankerModel<E>,
    g: &mut Graph<E>,
    bound: &BoundModel,
    pairs: &[DpoExample],
    beta: f64,
) -> Result<LossNode> {
    validate_pairs(policy.config(), pairs)?;
    if policy.config() != reference.config() {
        return Err(Error::InvalidConfig(
            "policy and reference must share a model configuration".into(),
        ));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (ref_w, ref_l) = reference_log_probs(reference, pair)?;
        let enc = policy.encode_graph(g, bound, &pair.features)?;
        let pol_w = policy.sequence_log_prob_graph(g, bound, &enc, &pair.winner)?;
        let pol_l = policy.sequence_log_prob_graph(g, bound, &enc, &pair.loser)?;
        let ref_margin = g.scalar_leaf(ref_w - ref_l);
        let margin = g.affine_combine(&[pol_w, pol_l, ref_margin], &[beta, -beta, -beta]);
        let neg = g.scale(margin, -1.0);
        terms.push(g.softplus(neg));
    }
    Ok(LossNode { node: g.mean_of(&terms), term_count: terms.len() })
}

// ── Optimizer ────────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    pub step: u64,
    /// Steps skipped because a gradient was not finite.
    pub anomalies: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    SkippedNonFinite,
}

/// One Adam update with bias correction, after global-norm clipping.
///
/// A non-finite gradient anywhere aborts the whole step and bumps the
/// anomaly counter; parameters and moments stay untouched.
pub fn adam_step(
    params: &mut ParamSet<f32>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f64,
    clip_norm: f64,
) -> AdamOutcome {
    let mut norm_sq = 0.0f64;
    for grad in grads.values() {
        for &g in grad {
            if !g.is_finite() {
                state.anomalies += 1;
                return AdamOutcome::SkippedNonFinite;
            }
            norm_sq += (g as f64) * (g as f64);
        }
    }
    let norm = norm_sq.sqrt();
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);

    for (name, tensor) in params.iter_mut() {
        let Some(grad) = grads.get(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
        for (i, value) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i] as f64 * scale;
            let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * g;
            let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            *value = (*value as f64 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
        }
    }
    AdamOutcome::Applied
}

/// Gradients of every bound parameter after a backward pass.
pub fn collect_gradients<E: Scalar>(
    g: &Graph<E>,
    bound: &BoundModel,
) -> BTreeMap<String, Vec<f32>> {
    bound
        .iter()
        .map(|(name, &id)| (name.clone(), g.grad(id).iter().map(|v| v.to_f64() as f32).collect()))
        .collect()
}

// ── Stage loops ──────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: u64,
    pub stage: String,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct StageReport {
    pub loss_curve: Vec<LossPoint>,
    pub epoch_mean_loss: Vec<f64>,
    pub anomalies: u64,
}

/// Loss-curve CSV: `step,stage,loss`.
pub fn loss_curve_csv(points: &[LossPoint]) -> String {
    let mut out = String::from("step,stage,loss\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.step, p.stage, p.loss));
    }
    out
}

fn shuffled_indices(len: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

/// Pre-train on exposure order. Epochs run `start_epoch..cfg.epochs`;
/// resuming from a checkpointed epoch boundary replays the identical
/// batch schedule, so an interrupted run matches an uninterrupted one
/// bit for bit.
pub fn run_pretrain(
    model: &mut GenRerankerModel<f32>,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    start_epoch: u32,
) -> Result<StageReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidBatch("no training examples".into()));
    }
    let mut report = StageReport::default();
    let batches_per_epoch = examples.len().div_ceil(cfg.batch_size) as u64;
    for epoch in start_epoch..cfg.epochs {
        let order = shuffled_indices(
            examples.len(),
            derive_seed_indexed(cfg.seed, "shuffle.pretrain", &[epoch as u64]),
        );
        let mut epoch_losses = Vec::new();
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let mut g: Graph<f32> = Graph::new();
            let bound = model.bind(&mut g);
            let pair_seed =
                derive_seed_indexed(cfg.seed, "order", &[epoch as u64, batch_idx as u64]);
            let loss = omtp_loss(model, &mut g, &bound, &batch, cfg, pair_seed)?;
            g.backward(loss.node)?;
            let grads = collect_gradients(&g, &bound);
            let value = g.scalar_value(loss.node);
            adam_step(model.params_mut(), &grads, adam, cfg.learning_rate, cfg.grad_clip_norm);
            report.loss_curve.push(LossPoint {
                step: epoch as u64 * batches_per_epoch + batch_idx as u64,
                stage: "pretrain".into(),
                loss: value,
            });
            epoch_losses.push(value);
        }
        report
            .epoch_mean_loss
            .push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
    }
    report.anomalies = adam.anomalies;
    Ok(report)
}

/// Post-train on preference pairs against a frozen reference.
///
/// The policy must come from a pre-trained checkpoint; training from
/// scratch is allowed only behind `allow_scratch` (the ablation harness
/// uses it to show why that collapses).
#[allow(clippy::too_many_arguments)]
pub fn run_dpo(
    model: &mut GenRerankerModel<f32>,
    model_stage: StageTag,
    reference: &GenRerankerModel<f32>,
    pairs: &[DpoExample],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    start_epoch: u32,
    allow_scratch: bool,
) -> Result<StageReport> {
    cfg.validate()?;
    if model_stage == StageTag::Scratch && !allow_scratch {
        return Err(Error::Usage(
            "preference post-training needs a pre-trained checkpoint; \
             pass allow_scratch to override"
                .into(),
        ));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidBatch("no preference pairs".into()));
    }
    let mut report = StageReport::default();
    let batches_per_epoch = pairs.len().div_ceil(cfg.batch_size) as u64;
    for epoch in start_epoch..cfg.epochs {
        let order = shuffled_indices(
            pairs.len(),
            derive_seed_indexed(cfg.seed, "shuffle.dpo", &[epoch as u64]),
        );
        let mut epoch_losses = Vec::new();
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<DpoExample> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let mut g: Graph<f32> = Graph::new();
            let bound = model.bind(&mut g);
            let loss = dpo_loss(model, reference, &mut g, &bound, &batch, cfg.beta_dpo)?;
            g.backward(loss.node)?;
            let grads = collect_gradients(&g, &bound);
            let value = g.scalar_value(loss.node);
            adam_step(model.params_mut(), &grads, adam, cfg.learning_rate, cfg.grad_clip_norm);
            report.loss_curve.push(LossPoint {
                step: epoch as u64 * batches_per_epoch + batch_idx as u64,
                stage: "dpo".into(),
                loss: value,
            });
            epoch_losses.push(value);
        }
        report
            .epoch_mean_loss
            .push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
    }
    report.anomalies = adam.anomalies;
    Ok(report)
}

// ── Checkpoints ──────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GREF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned snapshot of parameters, optimizer moments, and stage.
///
/// Layout: magic `GREF`, version `u32`, length-prefixed model config as
/// canonical JSON, a length-prefixed manifest of `(name, shape, byte
/// offset)` entries, then raw little-endian `f32` data per tensor.
/// Optimizer moments are stored as tensors under `opt.m.*` / `opt.v.*`.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: StageTag,
    pub adam_step: u64,
    pub completed_epochs: u32,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    stage: StageTag,
    adam_step: u64,
    completed_epochs: u32,
    tensors: Vec<ManifestEntry>,
}

impl Checkpoint {
    pub fn from_training(
        model: &GenRerankerModel<f32>,
        adam: &AdamState,
        stage: StageTag,
        completed_epochs: u32,
    ) -> Self {
        let mut tensors: BTreeMap<String, Tensor<f32>> = model
            .params()
            .iter()
            .map(|(name, tensor)| (name.clone(), tensor.clone()))
            .collect();
        for (name, m) in &adam.m {
            let shape = model.params().get(name).shape().to_vec();
            tensors.insert(format!("opt.m.{name}"), Tensor::new(shape, m.clone()).unwrap());
        }
        for (name, v) in &adam.v {
            let shape = model.params().get(name).shape().to_vec();
            tensors.insert(format!("opt.v.{name}"), Tensor::new(shape, v.clone()).unwrap());
        }
        Checkpoint {
            config: model.config().clone(),
            stage,
            adam_step: adam.step,
            completed_epochs,
            tensors,
        }
    }

    /// Rebuild the model and optimizer state.
    pub fn restore(&self) -> Result<(GenRerankerModel<f32>, AdamState)> {
        let mut model = GenRerankerModel::<f32>::new(self.config.clone(), 0)?;
        let mut adam = AdamState { step: self.adam_step, ..AdamState::new() };
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let expected_shape = model.params().get(&name).shape().to_vec();
            let stored = self.tensors.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter {name} missing from checkpoint"))
            })?;
            if stored.shape() != expected_shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    expected_shape
                )));
            }
            *model.params_mut().get_mut(&name) = stored.clone();
            if let Some(m) = self.tensors.get(&format!("opt.m.{name}")) {
                adam.m.insert(name.clone(), m.data().to_vec());
            }
            if let Some(v) = self.tensors.get(&format!("opt.v.{name}")) {
                adam.v.insert(name.clone(), v.data().to_vec());
            }
        }
        Ok((model, adam))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob: Vec<u8> = Vec::new();
        for (name, tensor) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for value in tensor.data() {
                blob.extend_from_slice(&value.to_le_bytes());
            }
        }
        let manifest = Manifest {
            stage: self.stage,
            adam_step: self.adam_step,
            completed_epochs: self.completed_epochs,
            tensors: entries,
        };
        let config_json = serde_json::to_vec(&self.config).expect("config serialization");
        let manifest_json = serde_json::to_vec(&manifest).expect("manifest serialization");

        let mut file = std::fs::File::create(path)?;
        file.write_all(&CHECKPOINT_MAGIC)?;
        file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        file.write_all(&(config_json.len() as u32).to_le_bytes())?;
        file.write_all(&config_json)?;
        file.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
        file.write_all(&manifest_json)?;
        file.write_all(&blob)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        fn take<'a>(bytes: &'a [u8], cursor: &mut usize, len: usize) -> Result<&'a [u8]> {
            if *cursor + len > bytes.len() {
                return Err(Error::Checkpoint("truncated checkpoint".into()));
            }
            let slice = &bytes[*cursor..*cursor + len];
            *cursor += len;
            Ok(slice)
        }
        let mut cursor = 0usize;
        if take(&bytes, &mut cursor, 4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(take(&bytes, &mut cursor, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config_len =
            u32::from_le_bytes(take(&bytes, &mut cursor, 4)?.try_into().unwrap()) as usize;
        let config: ModelConfig = serde_json::from_slice(take(&bytes, &mut cursor, config_len)?)
            .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let manifest_len =
            u32::from_le_bytes(take(&bytes, &mut cursor, 4)?.try_into().unwrap()) as usize;
        let manifest: Manifest =
            serde_json::from_slice(take(&bytes, &mut cursor, manifest_len)?)
                .map_err(|e| Error::Checkpoint(format!("manifest block: {e}")))?;
        let blob = &bytes[cursor..];

        let mut tensors = BTreeMap::new();
        for entry in manifest.tensors {
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * numel;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} runs past the end of the data block",
                    entry.name
                )));
            }
            let data: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.insert(entry.name, Tensor::new(entry.shape, data)?);
        }
        Ok(Checkpoint {
            config,
            stage: manifest.stage,
            adam_step: manifest.adam_step,
            completed_epochs: manifest.completed_epochs,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_heads: 2,
            omtp_heads: 2,
            max_candidates: 4,
            slate_length: 2,
            feature_dim: 3,
        }
    }

    fn random_example(config: &ModelConfig, seed: u64, clicks: Vec<u8>) -> TrainExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..config.max_candidates)
            .map(|_| (0..config.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut pool: Vec<usize> = (0..config.max_candidates).collect();
        let mut exposed = Vec::with_capacity(config.slate_length);
        for _ in 0..config.slate_length {
            let at = rng.random_range(0..pool.len());
            exposed.push(pool.remove(at));
        }
        TrainExample { features, exposed, clicks }
    }

    #[test]
    fn zero_model_pretrain_loss_is_uniform_log() {
        // Zero hidden states give a uniform distribution over the m + 1
        // vocabulary entries at each step, so every term is ln(m + 1).
        let config = ModelConfig {
            encoder_layers: 0,
            decoder_layers: 0,
            max_candidates: 3,
            ..tiny_config()
        };
        let model = GenRerankerModel::<f64>::zeroed(config.clone()).unwrap();
        let batch = vec![random_example(&config, 5, vec![1, 0])];
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let loss = pretrain_loss_single_head(&model, &mut g, &bound, &batch).unwrap();
        assert_eq!(loss.term_count, 3); // n + 1 steps
        assert!((g.scalar_value(loss.node) - 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn zero_model_multi_head_ce_is_uniform_log() {
        // Every contributing (position, head) term is ln(m + 1) = ln 4;
        // term averaging keeps the loss there.
        let config = ModelConfig {
            encoder_layers: 0,
            decoder_layers: 0,
            max_candidates: 3,
            ..tiny_config()
        };
        let model = GenRerankerModel::<f64>::zeroed(config.clone()).unwrap();
        let batch = vec![random_example(&config, 6, vec![0, 1])];
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let loss = omtp_ce_loss(&model, &mut g, &bound, &batch).unwrap();
        // Positions 0..=2 with offsets {0, 1}: (0,0) (0,1) (1,0) (1,1) (2,0).
        assert_eq!(loss.term_count, 5);
        assert!((g.scalar_value(loss.node) - 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn last_position_contributes_one_eos_term() {
        let config = tiny_config();
        let model = GenRerankerModel::<f64>::new(config.clone(), 3).unwrap();
        let batch = vec![random_example(&config, 6, vec![0, 1])];
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let loss = omtp_ce_loss(&model, &mut g, &bound, &batch).unwrap();
        // n = 2, H = 2: positions 0,1 carry two head terms, position 2
        // carries exactly one (the EOS target of head 0).
        assert_eq!(loss.term_count, 5);
    }

    #[test]
    fn single_head_reduction_identity() {
        // H = 1 multi-head CE and the single-head objective agree on any
        // batch.
        let config = ModelConfig { omtp_heads: 1, ..tiny_config() };
        let model = GenRerankerModel::<f64>::new(config.clone(), 31).unwrap();
        for seed in 0..20 {
            let batch = vec![
                random_example(&config, 100 + seed, vec![1, 0]),
                random_example(&config, 200 + seed, vec![0, 0]),
            ];
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let a = omtp_ce_loss(&model, &mut g, &bound, &batch).unwrap();
            let b = pretrain_loss_single_head(&model, &mut g, &bound, &batch).unwrap();
            assert!((g.scalar_value(a.node) - g.scalar_value(b.node)).abs() < 1e-6);
        }
    }

    #[test]
    fn order_loss_rejects_single_head() {
        let config = ModelConfig { omtp_heads: 1, ..tiny_config() };
        let model = GenRerankerModel::<f64>::new(config.clone(), 3).unwrap();
        let batch = vec![random_example(&config, 7, vec![1, 0])];
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let res = omtp_order_loss(&model, &mut g, &bound, &batch, 8, 0);
        assert!(matches!(res, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn order_loss_tie_rule_and_dcg_pair() {
        let config = tiny_config();
        let model = GenRerankerModel::<f64>::new(config.clone(), 3).unwrap();

        // No clicks: every permutation scores the same, so no pairs.
        let batch = vec![random_example(&config, 7, vec![0, 0])];
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let loss = omtp_order_loss(&model, &mut g, &bound, &batch, 8, 0).unwrap();
        assert_eq!(loss.term_count, 0);
        assert_eq!(g.scalar_value(loss.node), 0.0);

        // Window [clicked, not clicked], H = 2: exactly one ordered pair,
        // clicked-first positive.
        let batch = vec![random_example(&config, 7, vec![1, 0])];
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let loss = omtp_order_loss(&model, &mut g, &bound, &batch, 8, 0).unwrap();
        assert_eq!(loss.term_count, 1);
        assert!(g.scalar_value(loss.node) > 0.0);

        // The DCG behind that pair: clicked-first scores 1, clicked-second
        // scores 1/log2(3).
        assert!((window_dcg(&[1, 0], &[0, 1]) - 1.0).abs() < 1e-12);
        assert!((window_dcg(&[1, 0], &[1, 0]) - 1.0 / 3.0f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn saturated_pair_term_vanishes() {
        // -log sigmoid(x) -> 0 as the score difference grows.
        assert!(crate::scalar::softplus_f64(-30.0) < 1e-12);
    }

    #[test]
    fn combined_loss_weights() {
        let config = tiny_config();
        let model = GenRerankerModel::<f64>::new(config.clone(), 17).unwrap();
        let batch = vec![random_example(&config, 8, vec![1, 0])];

        // lambda2 = 0 reduces to the weighted CE term.
        let cfg = TrainConfig { lambda1: 0.7, lambda2: 0.0, ..Default::default() };
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let combined = omtp_loss(&model, &mut g, &bound, &batch, &cfg, 0).unwrap();
        let ce = omtp_ce_loss(&model, &mut g, &bound, &batch).unwrap();
        let expect = 0.7 * g.scalar_value(ce.node);
        assert!((g.scalar_value(combined.node) - expect).abs() < 1e-9);

        // lambda1 = lambda2 = 1 is the plain sum.
        let cfg = TrainConfig::default();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let combined = omtp_loss(&model, &mut g, &bound, &batch, &cfg, 0).unwrap();
        let ce = omtp_ce_loss(&model, &mut g, &bound, &batch).unwrap();
        let order =
            omtp_order_loss(&model, &mut g, &bound, &batch, cfg.order_pair_cap, 0).unwrap();
        let expect = g.scalar_value(ce.node) + g.scalar_value(order.node);
        assert!((g.scalar_value(combined.node) - expect).abs() < 1e-9);

        // lambda1 = 0 on a no-click batch leaves nothing.
        let cfg = TrainConfig { lambda1: 0.0, lambda2: 1.0, ..Default::default() };
        let batch = vec![random_example(&config, 8, vec![0, 0])];
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let combined = omtp_loss(&model, &mut g, &bound, &batch, &cfg, 0).unwrap();
        assert_eq!(g.scalar_value(combined.node), 0.0);
    }

    fn single_param(name: &str, data: Vec<f32>) -> ParamSet<f32> {
        let len = data.len();
        std::iter::once((name.to_string(), Tensor::new(vec![len], data).unwrap())).collect()
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut params = single_param("x", vec![1.0, -2.0, 0.5]);
        let grads: BTreeMap<String, Vec<f32>> =
            std::iter::once(("x".to_string(), vec![0.0; 3])).collect();
        let mut adam = AdamState::new();
        let outcome = adam_step(&mut params, &grads, &mut adam, 0.1, 1.0);
        assert_eq!(outcome, AdamOutcome::Applied);
        assert_eq!(params.get("x").data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_descends_on_square() {
        // One step on f(x) = x^2 from x = 1 moves x toward zero.
        let mut params = single_param("x", vec![1.0]);
        let grads: BTreeMap<String, Vec<f32>> =
            std::iter::once(("x".to_string(), vec![2.0])).collect();
        let mut adam = AdamState::new();
        adam_step(&mut params, &grads, &mut adam, 0.1, 10.0);
        let x = params.get("x").data()[0];
        assert!(x < 1.0 && x > 0.0, "x after one step: {x}");
    }

    #[test]
    fn adam_clips_by_global_norm() {
        // Gradient norm 10 against clip 1.0: moments see the gradient
        // scaled by 0.1.
        let mut params = single_param("x", vec![0.0, 0.0]);
        let grads: BTreeMap<String, Vec<f32>> =
            std::iter::once(("x".to_string(), vec![6.0, 8.0])).collect();
        let mut adam = AdamState::new();
        adam_step(&mut params, &grads, &mut adam, 0.01, 1.0);
        let m = &adam.m["x"];
        assert!((m[0] as f64 - 0.1 * 0.6).abs() < 1e-7);
        assert!((m[1] as f64 - 0.1 * 0.8).abs() < 1e-7);
    }

    #[test]
    fn adam_aborts_on_nan() {
        let mut params = single_param("x", vec![1.0]);
        let grads: BTreeMap<String, Vec<f32>> =
            std::iter::once(("x".to_string(), vec![f32::NAN])).collect();
        let mut adam = AdamState::new();
        let outcome = adam_step(&mut params, &grads, &mut adam, 0.1, 1.0);
        assert_eq!(outcome, AdamOutcome::SkippedNonFinite);
        assert_eq!(adam.anomalies, 1);
        assert_eq!(adam.step, 0);
        assert_eq!(params.get("x").data(), &[1.0]);
    }

    #[test]
    fn permutations_cover_factorial() {
        assert_eq!(permutations(1).len(), 1);
        assert_eq!(permutations(2).len(), 2);
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(4).len(), 24);
        let mut unique = permutations(4);
        unique.dedup();
        assert_eq!(unique.len(), 24);
    }

    #[test]
    fn loss_curve_csv_format() {
        let points = vec![
            LossPoint { step: 0, stage: "pretrain".into(), loss: 1.5 },
            LossPoint { step: 1, stage: "pretrain".into(), loss: 1.25 },
        ];
        assert_eq!(loss_curve_csv(&points), "step,stage,loss\n0,pretrain,1.5\n1,pretrain,1.25\n");
    }
}
