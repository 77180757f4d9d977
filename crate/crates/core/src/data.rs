//! Session logs: ingestion, synthetic simulation, and training-example
//! construction.
//!
//! A session is one request: `m` candidate items in previous-stage rank
//! order, the `n`-item exposure the production policy actually showed, and
//! binary feedback per exposed item. Pre-training imitates the exposure
//! order; post-training contrasts a preference-reordered slate against it.
//!
//! The simulator stands in for production logs. Each session draws a user
//! topic preference; a synthetic policy exposes the top-n by preference
//! alignment plus noise; clicks follow a first-order causal chain (a click
//! is more likely right after a click on a topically similar item), which
//! is exactly the structure an autoregressive reranker can exploit.

use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Token;
use crate::seeding::derive_seed_indexed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateItem {
    pub item_id: String,
    pub features: Vec<f64>,
}

/// One user request with candidates, exposure order, and feedback.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionRecord {
    pub session_id: String,
    /// Previous-stage rank order.
    pub candidates: Vec<CandidateItem>,
    /// Item ids in exposure order, a subset of `candidates`.
    pub exposed: Vec<String>,
    /// Binary feedback aligned with `exposed`.
    pub feedback: Vec<u8>,
}

impl SessionRecord {
    /// Enforce the record invariants, naming offending items.
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::Schema(format!("session {}: no candidates", self.session_id)));
        }
        let width = self.candidates[0].features.len();
        for item in &self.candidates {
            if item.features.len() != width {
                return Err(Error::Schema(format!(
                    "session {}: item {} has feature width {}, expected {width}",
                    self.session_id,
                    item.item_id,
                    item.features.len()
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for item in &self.candidates {
            if !seen.insert(item.item_id.as_str()) {
                return Err(Error::Schema(format!(
                    "session {}: duplicate candidate {}",
                    self.session_id, item.item_id
                )));
            }
        }
        if self.exposed.is_empty() {
            return Err(Error::Schema(format!("session {}: empty exposure", self.session_id)));
        }
        if self.exposed.len() > self.candidates.len() {
            return Err(Error::Schema(format!(
                "session {}: {} exposed items exceed {} candidates",
                self.session_id,
                self.exposed.len(),
                self.candidates.len()
            )));
        }
        let mut exposed_seen = std::collections::BTreeSet::new();
        for id in &self.exposed {
            if !seen.contains(id.as_str()) {
                return Err(Error::Schema(format!(
                    "session {}: exposed item {id} is not among the candidates",
                    self.session_id
                )));
            }
            if !exposed_seen.insert(id.as_str()) {
                return Err(Error::Schema(format!(
                    "session {}: exposed item {id} repeats",
                    self.session_id
                )));
            }
        }
        if self.feedback.len() != self.exposed.len() {
            return Err(Error::Schema(format!(
                "session {}: {} feedback flags for {} exposed items",
                self.session_id,
                self.feedback.len(),
                self.exposed.len()
            )));
        }
        if let Some(bad) = self.feedback.iter().find(|&&u| u > 1) {
            return Err(Error::Schema(format!(
                "session {}: feedback must be 0 or 1, got {bad}",
                self.session_id
            )));
        }
        Ok(())
    }

    /// Candidate features in previous-stage rank order.
    pub fn feature_matrix(&self) -> Vec<Vec<f64>> {
        self.candidates.iter().map(|c| c.features.clone()).collect()
    }

    /// Exposure order as candidate indices.
    pub fn exposed_indices(&self) -> Result<Vec<usize>> {
        self.exposed
            .iter()
            .map(|id| {
                self.candidates
                    .iter()
                    .position(|c| &c.item_id == id)
                    .ok_or_else(|| {
                        Error::Schema(format!(
                            "session {}: exposed item {id} is not among the candidates",
                            self.session_id
                        ))
                    })
            })
            .collect()
    }

    fn candidate_index(&self, id: &str) -> Result<usize> {
        self.candidates.iter().position(|c| c.item_id == id).ok_or_else(|| {
            Error::Schema(format!(
                "session {}: item {id} is not among the candidates",
                self.session_id
            ))
        })
    }
}

/// A winning/losing slate pair over the same item set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub winner: Vec<String>,
    pub loser: Vec<String>,
}

// ── JSONL ingestion ──────────────────────────────────────────────────

/// Streaming reader over a JSON-Lines session file.
///
/// Malformed lines and invariant violations surface as errors carrying the
/// 1-based line number. Unknown fields are ignored but counted (see
/// [`SessionReader::warnings`]).
pub struct SessionReader {
    lines: Lines<BufReader<File>>,
    line_no: usize,
    warnings: u64,
}

impl SessionReader {
    /// Count of unknown fields skipped so far.
    pub fn warnings(&self) -> u64 {
        self.warnings
    }
}

impl Iterator for SessionReader {
    type Item = Result<SessionRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(parse_session_line(&line, self.line_no, &mut self.warnings));
        }
    }
}

/// Open a JSON-Lines session file as a validated record stream.
pub fn load_sessions(path: impl AsRef<Path>) -> Result<SessionReader> {
    let file = File::open(path.as_ref())?;
    Ok(SessionReader { lines: BufReader::new(file).lines(), line_no: 0, warnings: 0 })
}

/// Load an entire session file, returning records plus the count of
/// ignored unknown fields.
pub fn load_all_sessions(path: impl AsRef<Path>) -> Result<(Vec<SessionRecord>, u64)> {
    let mut reader = load_sessions(path)?;
    let mut records = Vec::new();
    for record in reader.by_ref() {
        records.push(record?);
    }
    Ok((records, reader.warnings()))
}

fn parse_session_line(line: &str, line_no: usize, warnings: &mut u64) -> Result<SessionRecord> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Parse {
        line: line_no,
        message: "expected a JSON object".into(),
    })?;

    let known = ["session_id", "candidates", "exposed", "feedback"];
    for key in obj.keys() {
        if !known.contains(&key.as_str()) {
            *warnings += 1;
        }
    }

    let field = |name: &str| -> Result<&serde_json::Value> {
        obj.get(name).ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("missing field {name}"),
        })
    };

    let session_id = field("session_id")?
        .as_str()
        .ok_or_else(|| Error::Parse { line: line_no, message: "session_id must be a string".into() })?
        .to_string();

    let mut candidates = Vec::new();
    for (i, cand) in field("candidates")?
        .as_array()
        .ok_or_else(|| Error::Parse { line: line_no, message: "candidates must be an array".into() })?
        .iter()
        .enumerate()
    {
        let cobj = cand.as_object().ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("candidate {i} must be an object"),
        })?;
        for key in cobj.keys() {
            if key != "item_id" && key != "features" {
                *warnings += 1;
            }
        }
        let item_id = cobj
            .get("item_id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("candidate {i} needs a string item_id"),
            })?
            .to_string();
        let features = cobj
            .get("features")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("candidate {i} needs a features array"),
            })?
            .iter()
            .map(|v| {
                v.as_f64().ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("candidate {i} has a non-numeric feature"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        candidates.push(CandidateItem { item_id, features });
    }

    let exposed = field("exposed")?
        .as_array()
        .ok_or_else(|| Error::Parse { line: line_no, message: "exposed must be an array".into() })?
        .iter()
        .map(|v| {
            v.as_str().map(str::to_string).ok_or_else(|| Error::Parse {
                line: line_no,
                message: "exposed entries must be strings".into(),
            })
        })
        .collect::<Result<Vec<String>>>()?;

    let feedback = field("feedback")?
        .as_array()
        .ok_or_else(|| Error::Parse { line: line_no, message: "feedback must be an array".into() })?
        .iter()
        .map(|v| {
            v.as_u64().filter(|&u| u <= 1).map(|u| u as u8).ok_or_else(|| Error::Parse {
                line: line_no,
                message: "feedback entries must be 0 or 1".into(),
            })
        })
        .collect::<Result<Vec<u8>>>()?;

    let record = SessionRecord { session_id, candidates, exposed, feedback };
    record.validate()?;
    Ok(record)
}

/// Serialize records as JSON-Lines.
pub fn sessions_to_jsonl(records: &[SessionRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("session serialization"));
        out.push('\n');
    }
    out
}

// ── Preference construction ──────────────────────────────────────────

/// Blend of exposure position and feedback: `alpha / P + gamma * U`.
///
/// `position` is 1-based rank in the exposure order.
pub fn personalization_score(position: usize, clicked: u8, alpha: f64, gamma: f64) -> Result<f64> {
    if position < 1 {
        return Err(Error::InvalidArgument("exposure position must be >= 1".into()));
    }
    Ok(alpha * (1.0 / position as f64) + gamma * f64::from(clicked))
}

/// Reorder the exposure by descending personalization score to build a
/// winning slate; the original exposure is the loser. Returns `None` when
/// the reordering is the exposure itself (ties keep exposure order, so a
/// session without clicks never yields a pair).
pub fn build_preference_pair(
    record: &SessionRecord,
    alpha: f64,
    gamma: f64,
) -> Result<Option<PreferencePair>> {
    record.validate()?;
    let mut scored: Vec<(usize, f64)> = record
        .exposed
        .iter()
        .enumerate()
        .map(|(i, _)| personalization_score(i + 1, record.feedback[i], alpha, gamma).map(|s| (i, s)))
        .collect::<Result<_>>()?;
    // Stable sort: equal scores keep exposure order.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    if scored.iter().enumerate().all(|(rank, (orig, _))| rank == *orig) {
        return Ok(None);
    }
    let winner: Vec<String> = scored.iter().map(|(i, _)| record.exposed[*i].clone()).collect();
    Ok(Some(PreferencePair { winner, loser: record.exposed.clone() }))
}

/// Pre-training target: candidates as-is, exposure wrapped in sentinels.
pub fn build_pretrain_example(record: &SessionRecord) -> Result<(Vec<Vec<f64>>, Vec<Token>)> {
    record.validate()?;
    let indices = record.exposed_indices()?;
    let mut target = Vec::with_capacity(indices.len() + 2);
    target.push(Token::Bos);
    target.extend(indices.into_iter().map(Token::Item));
    target.push(Token::Eos);
    Ok((record.feature_matrix(), target))
}

// ── Resolved training inputs ─────────────────────────────────────────

/// A session with ids resolved to candidate indices.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub features: Vec<Vec<f64>>,
    /// Exposure order as candidate indices.
    pub exposed: Vec<usize>,
    /// Feedback aligned with `exposed`.
    pub clicks: Vec<u8>,
}

impl TrainExample {
    pub fn from_record(record: &SessionRecord) -> Result<Self> {
        record.validate()?;
        Ok(TrainExample {
            features: record.feature_matrix(),
            exposed: record.exposed_indices()?,
            clicks: record.feedback.clone(),
        })
    }
}

/// A preference pair with ids resolved to candidate indices.
#[derive(Clone, Debug)]
pub struct DpoExample {
    pub features: Vec<Vec<f64>>,
    pub winner: Vec<usize>,
    pub loser: Vec<usize>,
}

/// Build resolved preference examples, skipping sessions whose reordering
/// matches the exposure.
pub fn build_dpo_examples(
    records: &[SessionRecord],
    alpha: f64,
    gamma: f64,
) -> Result<Vec<DpoExample>> {
    let mut out = Vec::new();
    for record in records {
        if let Some(pair) = build_preference_pair(record, alpha, gamma)? {
            let winner = pair
                .winner
                .iter()
                .map(|id| record.candidate_index(id))
                .collect::<Result<Vec<usize>>>()?;
            let loser = pair
                .loser
                .iter()
                .map(|id| record.candidate_index(id))
                .collect::<Result<Vec<usize>>>()?;
            out.push(DpoExample { features: record.feature_matrix(), winner, loser });
        }
    }
    Ok(out)
}

// ── Synthetic sessions ───────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    pub seed: u64,
    pub num_sessions: usize,
    /// Candidates per session.
    pub m: usize,
    /// Exposure length.
    pub n: usize,
    /// Latent topic count; the feature width is `num_topics + 1`.
    pub num_topics: usize,
    /// Click-probability boost after a click on a topically similar item.
    pub topic_coherence: f64,
    /// Gumbel noise scale of the synthetic exposure policy; zero exposes
    /// exactly the top-n by relevance.
    pub exposure_noise: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            seed: 7,
            num_sessions: 2000,
            m: 30,
            n: 10,
            num_topics: 4,
            topic_coherence: 0.4,
            exposure_noise: 0.25,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > self.m {
            return Err(Error::InvalidConfig(format!(
                "exposure length must satisfy 1 <= n <= m, got n={} m={}",
                self.n, self.m
            )));
        }
        if self.num_topics == 0 {
            return Err(Error::InvalidConfig("num_topics must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.topic_coherence) {
            return Err(Error::InvalidConfig(format!(
                "topic_coherence must lie in [0, 1], got {}",
                self.topic_coherence
            )));
        }
        if self.exposure_noise < 0.0 || !self.exposure_noise.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "exposure_noise must be a finite non-negative value, got {}",
                self.exposure_noise
            )));
        }
        Ok(())
    }

    /// Feature width per item: topic mixture, a quality scalar, and a
    /// noisy personalization estimate.
    pub fn feature_dim(&self) -> usize {
        self.num_topics + 2
    }
}

/// Deterministic session generator; the corpus is a pure function of the
/// config.
pub struct Simulator {
    config: SimulatorConfig,
}

struct SessionLatents {
    user_pref: Vec<f64>,
    // Per candidate, in previous-stage rank order.
    features: Vec<Vec<f64>>,
    relevance: Vec<f64>,
}

impl Simulator {
    pub fn new(config: SimulatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Simulator { config })
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.config
    }

    fn user_preference(&self, session: usize) -> Vec<f64> {
        let seed = derive_seed_indexed(self.config.seed, "sim.user", &[session as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..self.config.num_topics).map(|_| 2.0 * normal(&mut rng)).collect();
        softmax_f64(&raw)
    }

    fn latents(&self, session: usize) -> SessionLatents {
        let user_pref = self.user_preference(session);
        let seed = derive_seed_indexed(self.config.seed, "sim.items", &[session as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.config.num_topics;

        let mut features = Vec::with_capacity(self.config.m);
        for _ in 0..self.config.m {
            let dominant = rng.random_range(0..k);
            let mut raw: Vec<f64> = (0..k).map(|_| 0.5 * normal(&mut rng)).collect();
            raw[dominant] += 3.0;
            let mut f = softmax_f64(&raw);
            f.push(rng.random::<f64>()); // quality
            // Noisy upstream personalization estimate of the alignment.
            let alignment: f64 = user_pref.iter().zip(&f[..k]).map(|(u, t)| u * t).sum();
            f.push((alignment + 0.2 * normal(&mut rng)).clamp(0.0, 1.0));
            features.push(f);
        }

        // Previous-stage rank: descending policy relevance.
        let relevance: Vec<f64> =
            features.iter().map(|f| policy_relevance(&user_pref, f)).collect();
        let mut order: Vec<usize> = (0..self.config.m).collect();
        order.sort_by(|&a, &b| relevance[b].total_cmp(&relevance[a]));
        let features: Vec<Vec<f64>> = order.iter().map(|&i| features[i].clone()).collect();
        let relevance: Vec<f64> = order.iter().map(|&i| relevance[i]).collect();
        SessionLatents { user_pref, features, relevance }
    }

    /// Exposure order as candidate indices for a session's latents.
    fn expose(&self, session: usize, latents: &SessionLatents) -> Vec<usize> {
        if self.config.exposure_noise == 0.0 {
            return (0..self.config.n).collect();
        }
        let seed = derive_seed_indexed(self.config.seed, "sim.expose", &[session as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = latents
            .relevance
            .iter()
            .map(|r| r + self.config.exposure_noise * gumbel(&mut rng))
            .collect();
        let mut order: Vec<usize> = (0..self.config.m).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        order.truncate(self.config.n);
        order
    }

    /// Click probability before the causal boost.
    pub fn base_click_probability(user_pref: &[f64], features: &[f64]) -> f64 {
        let k = user_pref.len();
        let alignment: f64 = user_pref.iter().zip(&features[..k]).map(|(u, t)| u * t).sum();
        let quality = features[k];
        sigmoid(5.0 * alignment + 0.5 * quality - 2.5)
    }

    fn click_chain(
        &self,
        rng: &mut ChaCha8Rng,
        user_pref: &[f64],
        slate_features: &[&Vec<f64>],
    ) -> Vec<u8> {
        let k = self.config.num_topics;
        let mut clicks: Vec<u8> = Vec::with_capacity(slate_features.len());
        for (j, f) in slate_features.iter().enumerate() {
            let mut p = Self::base_click_probability(user_pref, f);
            if j > 0 && clicks[j - 1] == 1 {
                let prev = slate_features[j - 1];
                if dominant_topic(&prev[..k]) == dominant_topic(&f[..k]) {
                    p = (p + self.config.topic_coherence).min(1.0);
                }
            }
            clicks.push(u8::from(rng.random::<f64>() < p));
        }
        clicks
    }

    /// Generate the full corpus.
    pub fn generate(&self) -> Vec<SessionRecord> {
        (0..self.config.num_sessions).map(|s| self.generate_session(s)).collect()
    }

    fn generate_session(&self, session: usize) -> SessionRecord {
        let latents = self.latents(session);
        let exposed_idx = self.expose(session, &latents);

        let click_seed = derive_seed_indexed(self.config.seed, "sim.clicks", &[session as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(click_seed);
        let slate_features: Vec<&Vec<f64>> =
            exposed_idx.iter().map(|&i| &latents.features[i]).collect();
        let feedback = self.click_chain(&mut rng, &latents.user_pref, &slate_features);

        let candidates = latents
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| CandidateItem { item_id: format!("it{i:03}"), features: f.clone() })
            .collect::<Vec<_>>();
        SessionRecord {
            session_id: format!("s{session:06}"),
            exposed: exposed_idx.iter().map(|&i| candidates[i].item_id.clone()).collect(),
            candidates,
            feedback,
        }
    }

    fn session_index(record: &SessionRecord) -> Result<usize> {
        record
            .session_id
            .strip_prefix('s')
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "session id {} was not produced by the simulator",
                    record.session_id
                ))
            })
    }

    /// Counterfactual clicks for an arbitrary slate of candidate indices,
    /// drawn from the session's own user preference. Pure in
    /// `(config, record, slate)`.
    pub fn replay_clicks(&self, record: &SessionRecord, slate: &[usize]) -> Result<Vec<u8>> {
        let session = Self::session_index(record)?;
        let user_pref = self.user_preference(session);
        for &i in slate {
            if i >= record.candidates.len() {
                return Err(Error::InvalidArgument(format!(
                    "slate index {i} out of range for {} candidates",
                    record.candidates.len()
                )));
            }
        }
        let slate_features: Vec<&Vec<f64>> =
            slate.iter().map(|&i| &record.candidates[i].features).collect();
        let seed = derive_seed_indexed(self.config.seed, "sim.replay", &[session as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.click_chain(&mut rng, &user_pref, &slate_features))
    }

    /// Pre-boost click probabilities for a session's exposed items.
    pub fn exposed_base_probabilities(&self, record: &SessionRecord) -> Result<Vec<f64>> {
        let session = Self::session_index(record)?;
        let user_pref = self.user_preference(session);
        let indices = record.exposed_indices()?;
        Ok(indices
            .iter()
            .map(|&i| Self::base_click_probability(&user_pref, &record.candidates[i].features))
            .collect())
    }
}

/// Generate a corpus straight from a config.
pub fn simulate_sessions(config: &SimulatorConfig) -> Result<Vec<SessionRecord>> {
    Ok(Simulator::new(config.clone())?.generate())
}

/// Stable train/validation split on the session id: about `1/denominator`
/// of sessions land in validation.
pub fn is_validation_session(session_id: &str, denominator: u64) -> bool {
    crate::seeding::fnv1a64(session_id.as_bytes()).is_multiple_of(denominator)
}

/// What the synthetic production policy optimizes: mostly item quality,
/// with partial knowledge of the user's topic alignment. Clicks instead
/// follow the alignment (see `base_click_probability`), so exposure
/// imitation alone leaves headroom that preference signals can close.
fn policy_relevance(user_pref: &[f64], features: &[f64]) -> f64 {
    let k = user_pref.len();
    let alignment: f64 = user_pref.iter().zip(&features[..k]).map(|(u, t)| u * t).sum();
    0.3 * alignment + 0.7 * features[k]
}

fn dominant_topic(mix: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in mix.iter().enumerate() {
        if v > mix[best] {
            best = i;
        }
    }
    best
}

fn softmax_f64(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; avoids pulling in a distributions crate.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(1e-12);
    -(-u.ln()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_with_clicks(n: usize, clicked: &[usize]) -> SessionRecord {
        let candidates: Vec<CandidateItem> = (0..n + 2)
            .map(|i| CandidateItem { item_id: format!("y{}", i + 1), features: vec![0.1, 0.2] })
            .collect();
        let exposed: Vec<String> = (0..n).map(|i| format!("y{}", i + 1)).collect();
        let feedback: Vec<u8> =
            (0..n).map(|i| u8::from(clicked.contains(&(i + 1)))).collect();
        SessionRecord { session_id: "s1".into(), candidates, exposed, feedback }
    }

    #[test]
    fn personalization_score_values() {
        // alpha = gamma = 1: position 2 with a click scores 1/2 + 1.
        assert_eq!(personalization_score(2, 1, 1.0, 1.0).unwrap(), 1.5);
        assert_eq!(personalization_score(1, 0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(personalization_score(5, 1, 1.0, 1.0).unwrap(), 1.2);
        assert!(personalization_score(0, 1, 1.0, 1.0).is_err());
    }

    #[test]
    fn preference_pair_worked_example() {
        // Six exposed items, clicks on the 2nd and 5th: the winner pulls
        // them to the front in click order, remainder keeps exposure order.
        let record = record_with_clicks(6, &[2, 5]);
        let pair = build_preference_pair(&record, 1.0, 1.0).unwrap().unwrap();
        assert_eq!(pair.winner, vec!["y2", "y5", "y1", "y3", "y4", "y6"]);
        assert_eq!(pair.loser, vec!["y1", "y2", "y3", "y4", "y5", "y6"]);
    }

    #[test]
    fn preference_pair_none_without_clicks() {
        let record = record_with_clicks(6, &[]);
        assert!(build_preference_pair(&record, 1.0, 1.0).unwrap().is_none());
    }

    #[test]
    fn preference_pair_none_when_first_item_clicked() {
        // A click on position 1 only: scores stay in exposure order.
        let record = record_with_clicks(6, &[1]);
        let scores: Vec<f64> = (0..6)
            .map(|i| personalization_score(i + 1, record.feedback[i], 1.0, 1.0).unwrap())
            .collect();
        for w in scores.windows(2) {
            assert!(w[0] > w[1], "scores must stay strictly decreasing: {scores:?}");
        }
        assert!(build_preference_pair(&record, 1.0, 1.0).unwrap().is_none());
    }

    #[test]
    fn pretrain_example_wraps_exposure_in_sentinels() {
        let record = record_with_clicks(10, &[3]);
        let (features, target) = build_pretrain_example(&record).unwrap();
        assert_eq!(features.len(), 12); // candidates preserved, rank order
        assert_eq!(target.len(), 12); // BOS + 10 + EOS
        assert_eq!(target[0], Token::Bos);
        assert_eq!(*target.last().unwrap(), Token::Eos);
        for (t, expect) in target[1..11].iter().zip(0..10) {
            assert_eq!(*t, Token::Item(expect));
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let config = SimulatorConfig { num_sessions: 20, m: 8, n: 4, ..Default::default() };
        let a = simulate_sessions(&config).unwrap();
        let b = simulate_sessions(&config).unwrap();
        assert_eq!(sessions_to_jsonl(&a), sessions_to_jsonl(&b));
        for record in &a {
            record.validate().unwrap();
        }
    }

    #[test]
    fn zero_noise_exposes_top_candidates_in_order() {
        let config = SimulatorConfig {
            num_sessions: 10,
            m: 8,
            n: 4,
            exposure_noise: 0.0,
            ..Default::default()
        };
        for record in simulate_sessions(&config).unwrap() {
            assert_eq!(record.exposed_indices().unwrap(), vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn no_coherence_makes_consecutive_clicks_independent() {
        // With the causal boost off, consecutive click indicators are
        // independent Bernoulli draws given the base probabilities. The
        // standardized covariance over all consecutive pairs is a z-score;
        // its square is a one-degree chi-square statistic. |z| < 2.576
        // corresponds to p > 0.01.
        let config = SimulatorConfig {
            seed: 77,
            num_sessions: 100_000,
            m: 8,
            n: 4,
            topic_coherence: 0.0,
            ..Default::default()
        };
        let sim = Simulator::new(config).unwrap();
        let z = consecutive_click_zscore(&sim);
        assert!(z.abs() < 2.576, "coherence 0 should look independent, z = {z}");

        // Direction check: a strong boost produces a huge statistic.
        let config = SimulatorConfig {
            seed: 77,
            num_sessions: 100_000,
            m: 8,
            n: 4,
            topic_coherence: 0.5,
            ..Default::default()
        };
        let sim = Simulator::new(config).unwrap();
        let z = consecutive_click_zscore(&sim);
        assert!(z > 10.0, "coherence 0.5 should be detected, z = {z}");
    }

    fn consecutive_click_zscore(sim: &Simulator) -> f64 {
        let mut stat = 0.0f64;
        let mut var = 0.0f64;
        for record in sim.generate() {
            let probs = sim.exposed_base_probabilities(&record).unwrap();
            for j in 1..record.feedback.len() {
                let (p1, p2) = (probs[j - 1], probs[j]);
                let (c1, c2) = (record.feedback[j - 1] as f64, record.feedback[j] as f64);
                stat += (c1 - p1) * (c2 - p2);
                var += p1 * (1.0 - p1) * p2 * (1.0 - p2);
            }
        }
        stat / var.sqrt()
    }

    #[test]
    fn replay_is_pure() {
        let config = SimulatorConfig { num_sessions: 5, m: 8, n: 4, ..Default::default() };
        let sim = Simulator::new(config).unwrap();
        let records = sim.generate();
        let slate = vec![4, 1, 7, 2];
        let a = sim.replay_clicks(&records[3], &slate).unwrap();
        let b = sim.replay_clicks(&records[3], &slate).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn loader_round_trip_and_errors() {
        let dir = std::env::temp_dir().join(format!("gref-data-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        // Two well-formed lines load as two records.
        let config = SimulatorConfig { num_sessions: 2, m: 4, n: 2, ..Default::default() };
        let records = simulate_sessions(&config).unwrap();
        let path = dir.join("ok.jsonl");
        std::fs::write(&path, sessions_to_jsonl(&records)).unwrap();
        let (loaded, warnings) = load_all_sessions(&path).unwrap();
        assert_eq!(loaded, records);
        assert_eq!(warnings, 0);

        // Empty file: empty stream, success.
        let path = dir.join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let (loaded, _) = load_all_sessions(&path).unwrap();
        assert!(loaded.is_empty());

        // Unknown fields are ignored with a warning count.
        let path = dir.join("unknown.jsonl");
        let mut line = serde_json::to_value(&records[0]).unwrap();
        line.as_object_mut().unwrap().insert("extra".into(), 1.into());
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let (loaded, warnings) = load_all_sessions(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(warnings, 1);

        // Malformed JSON names the line.
        let path = dir.join("bad.jsonl");
        std::fs::write(&path, format!("{}\nnot json\n", serde_json::to_string(&records[0]).unwrap()))
            .unwrap();
        let err = load_all_sessions(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }

        // An exposed item missing from the candidates names the item.
        let mut broken = records[0].clone();
        broken.exposed[0] = "ghost".into();
        let path = dir.join("schema.jsonl");
        std::fs::write(&path, sessions_to_jsonl(&[broken])).unwrap();
        let err = load_all_sessions(&path).unwrap_err();
        match err {
            Error::Schema(message) => assert!(message.contains("ghost"), "{message}"),
            other => panic!("expected schema error, got {other}"),
        }

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn validation_split_is_stable_and_reasonable() {
        let config = SimulatorConfig { num_sessions: 1000, m: 6, n: 3, ..Default::default() };
        let records = simulate_sessions(&config).unwrap();
        let val: usize =
            records.iter().filter(|r| is_validation_session(&r.session_id, 5)).count();
        assert!((100..400).contains(&val), "validation share off: {val}/1000");
    }
}
