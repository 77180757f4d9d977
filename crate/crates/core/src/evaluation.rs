//! Ranking metrics, the single-sample latency benchmark, and the
//! training-stage ablation harness.

use std::time::Instant;

use serde::Serialize;

use crate::data::{
    build_dpo_examples, is_validation_session, SessionRecord, Simulator, SimulatorConfig,
    TrainExample,
};
use crate::decoding::{ar_decode, item_inclusion_scores, omtp_decode, DecodeMode, DecodeOutcome};
use crate::error::{Error, Result};
use crate::model::{GenRerankerModel, ModelConfig};
use crate::seeding::derive_seed;
use crate::training::{run_dpo, run_pretrain, AdamState, StageTag, TrainConfig};

/// Probability that a random positive outscores a random negative, ties
/// counted half (Mann–Whitney form).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }
    let mut favorable = 0.0f64;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            if sp > sn {
                favorable += 1.0;
            } else if sp == sn {
                favorable += 0.5;
            }
        }
    }
    Ok(favorable / (positives * negatives) as f64)
}

/// Discounted cumulative gain of binary relevances at `k`, normalized by
/// the ideal ordering of the same relevance multiset. A list with no
/// relevant entries is defined as 0.
pub fn ndcg_at_k(relevances: &[u8], k: usize) -> Result<f64> {
    if k == 0 || k > relevances.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} out of range for a list of {}",
            relevances.len()
        )));
    }
    if relevances.iter().all(|&r| r == 0) {
        return Ok(0.0);
    }
    let dcg: f64 = relevances[..k]
        .iter()
        .enumerate()
        .map(|(j, &r)| f64::from(r) / ((j + 2) as f64).log2())
        .sum();
    let mut ideal = relevances.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal[..k]
        .iter()
        .enumerate()
        .map(|(j, &r)| f64::from(r) / ((j + 2) as f64).log2())
        .sum();
    Ok(dcg / idcg)
}

// ── Latency ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct LatencyStats {
    pub mode: String,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub forward_passes_mean: f64,
    pub samples: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn decode_by_mode(
    model: &GenRerankerModel<f32>,
    features: &[Vec<f64>],
    mode: DecodeMode,
    heads: usize,
) -> Result<DecodeOutcome> {
    match mode {
        DecodeMode::Ar => ar_decode(model, features),
        DecodeMode::Omtp => omtp_decode(model, features, heads),
    }
}

/// Wall-clock of full single-sample decodes (encode included), one at a
/// time on one thread, after `warmup` discarded runs. Sessions are cycled
/// round-robin for `iters` timed samples.
pub fn latency_bench(
    model: &GenRerankerModel<f32>,
    sessions: &[SessionRecord],
    mode: DecodeMode,
    heads: usize,
    warmup: usize,
    iters: usize,
) -> Result<LatencyStats> {
    if iters < 30 {
        return Err(Error::InvalidArgument(format!(
            "latency needs at least 30 timed iterations, got {iters}"
        )));
    }
    if sessions.is_empty() {
        return Err(Error::InvalidArgument("no sessions to benchmark".into()));
    }
    let features: Vec<Vec<Vec<f64>>> =
        sessions.iter().map(|s| s.feature_matrix()).collect();
    for i in 0..warmup {
        decode_by_mode(model, &features[i % features.len()], mode, heads)?;
    }
    let mut samples = Vec::with_capacity(iters);
    let mut passes = 0usize;
    for i in 0..iters {
        let f = &features[i % features.len()];
        let start = Instant::now();
        let out = decode_by_mode(model, f, mode, heads)?;
        samples.push(start.elapsed().as_secs_f64() * 1e6);
        passes += out.forward_passes;
    }
    let mut sorted = samples.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(LatencyStats {
        mode: mode.as_str().to_string(),
        mean_us: samples.iter().sum::<f64>() / samples.len() as f64,
        p50_us: percentile(&sorted, 0.50),
        p99_us: percentile(&sorted, 0.99),
        forward_passes_mean: passes as f64 / iters as f64,
        samples: iters,
    })
}

/// Mean-latency speedup of the parallel decoder over the baseline.
pub fn latency_ratio(ar: &LatencyStats, omtp: &LatencyStats) -> f64 {
    ar.mean_us / omtp.mean_us
}

/// Benchmark CSV, one row per mode plus a ratio line when both ran.
pub fn latency_csv(stats: &[LatencyStats]) -> String {
    let mut out =
        String::from("mode,mean_latency_us,p50_latency_us,p99_latency_us,forward_passes,samples\n");
    for s in stats {
        out.push_str(&format!(
            "{},{:.3},{:.3},{:.3},{},{}\n",
            s.mode, s.mean_us, s.p50_us, s.p99_us, s.forward_passes_mean, s.samples
        ));
    }
    let ar = stats.iter().find(|s| s.mode == "ar");
    let omtp = stats.iter().find(|s| s.mode == "omtp");
    if let (Some(ar), Some(omtp)) = (ar, omtp) {
        out.push_str(&format!("ratio_ar_over_omtp,{:.4},,,,\n", latency_ratio(ar, omtp)));
    }
    out
}

// ── Model evaluation ─────────────────────────────────────────────────

/// Aggregate offline quality of a model on a session set.
///
/// Candidate-level AUC: labels are exposure membership over all `m`
/// candidates, scores are the greedy inclusion scores. Slate NDCG at
/// `k = n`: relevances are the simulator's counterfactual clicks replayed
/// on the decoded slate.
#[derive(Clone, Debug, Serialize)]
pub struct EvalOutcome {
    pub auc: f64,
    pub ndcg: f64,
    pub mean_latency_us: f64,
    pub p99_latency_us: f64,
    pub forward_passes_mean: f64,
    pub sessions: usize,
}

pub fn evaluate_model(
    model: &GenRerankerModel<f32>,
    records: &[SessionRecord],
    simulator: &Simulator,
    mode: DecodeMode,
    heads: usize,
) -> Result<EvalOutcome> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no sessions to evaluate".into()));
    }
    let n = model.config().slate_length;
    let m = model.config().max_candidates;
    let mut auc_sum = 0.0f64;
    let mut ndcg_sum = 0.0f64;
    let mut latencies = Vec::with_capacity(records.len());
    let mut passes = 0usize;
    for record in records {
        let features = record.feature_matrix();

        let start = Instant::now();
        let outcome = decode_by_mode(model, &features, mode, heads)?;
        latencies.push(start.elapsed().as_secs_f64() * 1e6);
        passes += outcome.forward_passes;

        let scores = item_inclusion_scores(model, &features)?;
        let mut labels = vec![0u8; m];
        for idx in record.exposed_indices()? {
            labels[idx] = 1;
        }
        auc_sum += auc(&scores, &labels)?;

        let relevances = simulator.replay_clicks(record, &outcome.slate)?;
        ndcg_sum += ndcg_at_k(&relevances, n)?;
    }
    let mut sorted = latencies.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(EvalOutcome {
        auc: auc_sum / records.len() as f64,
        ndcg: ndcg_sum / records.len() as f64,
        mean_latency_us: latencies.iter().sum::<f64>() / latencies.len() as f64,
        p99_latency_us: percentile(&sorted, 0.99),
        forward_passes_mean: passes as f64 / records.len() as f64,
        sessions: records.len(),
    })
}

/// One row of the metrics report.
#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub auc: f64,
    pub ndcg: f64,
    pub mean_latency_us: f64,
    pub p99_latency_us: f64,
    pub forward_passes: f64,
}

impl MetricReport {
    pub fn from_outcome(dataset: &str, model: &str, seed: u64, outcome: &EvalOutcome) -> Self {
        MetricReport {
            dataset: dataset.to_string(),
            model: model.to_string(),
            seed,
            auc: outcome.auc,
            ndcg: outcome.ndcg,
            mean_latency_us: outcome.mean_latency_us,
            p99_latency_us: outcome.p99_latency_us,
            forward_passes: outcome.forward_passes_mean,
        }
    }
}

pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out =
        String::from("dataset,model,seed,auc,ndcg,mean_latency_us,p99_latency_us,forward_passes\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.3},{:.3},{}\n",
            r.dataset, r.model, r.seed, r.auc, r.ndcg, r.mean_latency_us, r.p99_latency_us,
            r.forward_passes
        ));
    }
    out
}

pub fn reports_to_json(reports: &[MetricReport]) -> String {
    serde_json::to_string_pretty(reports).expect("report serialization")
}

// ── Ablation harness ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    /// Exposure-order pre-training only.
    PretrainOnly,
    /// Preference post-training from random parameters (the override
    /// path); demonstrates the cold-start collapse.
    DpoFromScratch,
    /// The full pipeline: pre-train, then preference post-training.
    Full,
    /// Full pipeline but pre-trained without the head-order term.
    NoOrderLoss,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::PretrainOnly,
        AblationVariant::DpoFromScratch,
        AblationVariant::Full,
        AblationVariant::NoOrderLoss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::PretrainOnly => "pretrain_only",
            AblationVariant::DpoFromScratch => "dpo_from_scratch",
            AblationVariant::Full => "pretrain_dpo",
            AblationVariant::NoOrderLoss => "pretrain_dpo_no_order",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub auc: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    /// CSV mirroring the variant-by-metric layout: one row per
    /// (variant, seed) plus per-variant means.
    pub fn csv(&self) -> String {
        let mut out = String::from("variant,seed,auc,ndcg\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", c.variant, c.seed, c.auc, c.ndcg));
        }
        for v in AblationVariant::ALL {
            let rows: Vec<&AblationCell> =
                self.cells.iter().filter(|c| c.variant == v.as_str()).collect();
            if rows.is_empty() {
                continue;
            }
            let mean_auc = rows.iter().map(|c| c.auc).sum::<f64>() / rows.len() as f64;
            let mean_ndcg = rows.iter().map(|c| c.ndcg).sum::<f64>() / rows.len() as f64;
            out.push_str(&format!("{},mean,{mean_auc:.6},{mean_ndcg:.6}\n", v.as_str()));
        }
        out
    }

    fn metric(cell: &AblationCell, ndcg: bool) -> f64 {
        if ndcg {
            cell.ndcg
        } else {
            cell.auc
        }
    }

    /// Seeds where variant `a` scores at least as high as variant `b`
    /// (and the total seed count).
    pub fn wins(
        &self,
        a: AblationVariant,
        b: AblationVariant,
        use_ndcg: bool,
    ) -> (usize, usize) {
        let mut wins = 0;
        let mut total = 0;
        for cell_a in self.cells.iter().filter(|c| c.variant == a.as_str()) {
            if let Some(cell_b) = self
                .cells
                .iter()
                .find(|c| c.variant == b.as_str() && c.seed == cell_a.seed)
            {
                total += 1;
                if Self::metric(cell_a, use_ndcg) >= Self::metric(cell_b, use_ndcg) {
                    wins += 1;
                }
            }
        }
        (wins, total)
    }

    /// Seeds where `a` scores strictly higher than `b`.
    pub fn strict_wins(
        &self,
        a: AblationVariant,
        b: AblationVariant,
        use_ndcg: bool,
    ) -> (usize, usize) {
        let mut wins = 0;
        let mut total = 0;
        for cell_a in self.cells.iter().filter(|c| c.variant == a.as_str()) {
            if let Some(cell_b) = self
                .cells
                .iter()
                .find(|c| c.variant == b.as_str() && c.seed == cell_a.seed)
            {
                total += 1;
                if Self::metric(cell_a, use_ndcg) > Self::metric(cell_b, use_ndcg) {
                    wins += 1;
                }
            }
        }
        (wins, total)
    }
}

/// Knobs for one ablation sweep.
#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub dpo: TrainConfig,
    /// Head count used by the parallel decoder at evaluation time.
    pub eval_heads: usize,
    /// One in this many sessions goes to validation.
    pub validation_denominator: u64,
}

impl AblationOptions {
    /// Desk-scale defaults sized for a corpus from `sim`: a small model
    /// and short schedules that still separate the training stages.
    pub fn desk_default(sim: &SimulatorConfig) -> Self {
        let model = ModelConfig {
            d_model: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_heads: 2,
            omtp_heads: 4.min(sim.n),
            max_candidates: sim.m,
            slate_length: sim.n,
            feature_dim: sim.feature_dim(),
        };
        let pretrain = TrainConfig {
            learning_rate: 2e-3,
            batch_size: 64,
            epochs: 4,
            ..TrainConfig::default()
        };
        let dpo = TrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 2,
            ..TrainConfig::default()
        };
        AblationOptions {
            eval_heads: model.omtp_heads,
            model,
            pretrain,
            dpo,
            validation_denominator: 5,
        }
    }
}

/// Train the four stage configurations per seed and report validation
/// AUC / NDCG per cell. Deterministic in `(records, seeds, options)`.
pub fn run_ablation(
    records: &[SessionRecord],
    sim_config: &SimulatorConfig,
    seeds: &[u64],
    opts: &AblationOptions,
) -> Result<AblationTable> {
    let simulator = Simulator::new(sim_config.clone())?;
    let denom = opts.validation_denominator;
    let train_records: Vec<SessionRecord> = records
        .iter()
        .filter(|r| !is_validation_session(&r.session_id, denom))
        .cloned()
        .collect();
    let val_records: Vec<SessionRecord> = records
        .iter()
        .filter(|r| is_validation_session(&r.session_id, denom))
        .cloned()
        .collect();
    if train_records.is_empty() || val_records.is_empty() {
        return Err(Error::InvalidArgument(
            "the session-hash split left a side empty; corpus too small".into(),
        ));
    }
    let examples: Vec<TrainExample> = train_records
        .iter()
        .map(TrainExample::from_record)
        .collect::<Result<_>>()?;
    let pairs = build_dpo_examples(&train_records, 1.0, 1.0)?;

    let mut table = AblationTable::default();
    for &seed in seeds {
        let init =
            GenRerankerModel::<f32>::new(opts.model.clone(), derive_seed(seed, "ablate.init"))?;

        for variant in AblationVariant::ALL {
            let mut model = init.clone();
            let mut adam = AdamState::new();
            match variant {
                AblationVariant::PretrainOnly => {
                    let cfg = TrainConfig { seed, ..opts.pretrain.clone() };
                    run_pretrain(&mut model, &examples, &cfg, &mut adam, 0)?;
                }
                AblationVariant::DpoFromScratch => {
                    let reference = model.clone();
                    let cfg = TrainConfig { seed, ..opts.dpo.clone() };
                    run_dpo(
                        &mut model,
                        StageTag::Scratch,
                        &reference,
                        &pairs,
                        &cfg,
                        &mut adam,
                        0,
                        true,
                    )?;
                }
                AblationVariant::Full => {
                    let cfg = TrainConfig { seed, ..opts.pretrain.clone() };
                    run_pretrain(&mut model, &examples, &cfg, &mut adam, 0)?;
                    let reference = model.clone();
                    let mut dpo_adam = AdamState::new();
                    let cfg = TrainConfig { seed, ..opts.dpo.clone() };
                    run_dpo(
                        &mut model,
                        StageTag::Pretrained,
                        &reference,
                        &pairs,
                        &cfg,
                        &mut dpo_adam,
                        0,
                        false,
                    )?;
                }
                AblationVariant::NoOrderLoss => {
                    let cfg = TrainConfig { seed, lambda2: 0.0, ..opts.pretrain.clone() };
                    run_pretrain(&mut model, &examples, &cfg, &mut adam, 0)?;
                    let reference = model.clone();
                    let mut dpo_adam = AdamState::new();
                    let cfg = TrainConfig { seed, ..opts.dpo.clone() };
                    run_dpo(
                        &mut model,
                        StageTag::Pretrained,
                        &reference,
                        &pairs,
                        &cfg,
                        &mut dpo_adam,
                        0,
                        false,
                    )?;
                }
            }
            let outcome = evaluate_model(
                &model,
                &val_records,
                &simulator,
                DecodeMode::Omtp,
                opts.eval_heads,
            )?;
            table.cells.push(AblationCell {
                variant: variant.as_str().to_string(),
                seed,
                auc: outcome.auc,
                ndcg: outcome.ndcg,
            });
        }
    }
    Ok(table)
}
