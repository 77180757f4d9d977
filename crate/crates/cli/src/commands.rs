//! Command implementations.
//!
//! Every command materializes a run directory holding the effective
//! config snapshot, a metadata file (seed, git describe, thread cap), and
//! its own outputs, which is enough to reproduce the run exactly.

use std::path::Path;
use std::time::Instant;

use gref_core::data::{
    build_dpo_examples, load_all_sessions, sessions_to_jsonl, SessionRecord, Simulator,
    TrainExample,
};
use gref_core::decoding::{ar_decode, omtp_decode, DecodeMode, DecodeRecord};
use gref_core::evaluation::{
    evaluate_model, latency_bench, latency_csv, reports_to_csv, reports_to_json, run_ablation,
    AblationOptions, LatencyStats, MetricReport,
};
use gref_core::model::{GenRerankerModel, ModelConfig};
use gref_core::seeding::derive_seed;
use gref_core::training::{
    loss_curve_csv, run_dpo, run_pretrain, AdamState, Checkpoint, StageTag,
};

use crate::runconfig::RunConfig;
use crate::{BenchModeArg, CliError, Cmd, CommonArgs, ModeArg};

impl From<gref_core::Error> for CliError {
    fn from(e: gref_core::Error) -> Self {
        match e {
            gref_core::Error::Usage(m) => CliError::Usage(m),
            gref_core::Error::InvalidConfig(m) => CliError::Usage(format!("invalid config: {m}")),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Simulate { common } => simulate(&common),
        Cmd::Pretrain { common, data } => pretrain(&common, &data),
        Cmd::Dpo { common, data, init, allow_scratch } => {
            dpo(&common, &data, init.as_deref(), allow_scratch)
        }
        Cmd::Decode { common, data, init, mode, heads } => {
            decode(&common, &data, &init, mode, heads)
        }
        Cmd::Eval { common, data, init, mode, heads } => {
            eval(&common, &data, &init, mode, heads)
        }
        Cmd::Bench { common, data, init, mode, heads, warmup, iters } => {
            bench(&common, &data, &init, mode, heads, warmup, iters)
        }
        Cmd::Ablate { common, num_seeds } => ablate(&common, num_seeds),
    }
}

// ── Run-directory plumbing ───────────────────────────────────────────

fn thread_cap() -> Result<u64, CliError> {
    match std::env::var("GREF_THREADS") {
        Err(_) => Ok(1),
        Ok(raw) => {
            let n: u64 = raw
                .parse()
                .map_err(|_| CliError::Usage(format!("GREF_THREADS must be a number, got {raw:?}")))?;
            if n == 0 {
                return Err(CliError::Usage("GREF_THREADS must be at least 1".into()));
            }
            if n > 1 {
                eprintln!("note: GREF_THREADS={n} requested; this build runs single-threaded");
            }
            Ok(n)
        }
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn effective_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.apply_seed(seed);
    }
    for spec in &common.set {
        config.apply_override(spec)?;
    }
    Ok(config)
}

fn init_run_dir(common: &CommonArgs, command: &str, config: &RunConfig) -> Result<(), CliError> {
    let threads = thread_cap()?;
    std::fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", common.out.display())))?;
    write_file(&common.out.join("effective.cfg"), &config.echo())?;
    let meta = serde_json::json!({
        "command": command,
        "seed": config.train.seed,
        "sim_seed": config.sim.seed,
        "git_describe": git_describe(),
        "threads": threads,
    });
    write_file(
        &common.out.join("meta.json"),
        &format!("{}\n", serde_json::to_string_pretty(&meta).expect("meta serialization")),
    )
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_records(path: &Path) -> Result<Vec<SessionRecord>, CliError> {
    let (records, warnings) = load_all_sessions(path)?;
    if warnings > 0 {
        eprintln!("note: ignored {warnings} unknown field(s) in {}", path.display());
    }
    if records.is_empty() {
        return Err(CliError::Runtime(format!("{} holds no sessions", path.display())));
    }
    Ok(records)
}

/// The corpus must agree with the model shape before training/decoding.
fn check_corpus(records: &[SessionRecord], model: &ModelConfig) -> Result<(), CliError> {
    let first = &records[0];
    if first.candidates.len() != model.max_candidates {
        return Err(CliError::Usage(format!(
            "corpus has {} candidates per session but model.max_candidates = {}; \
             adjust --set model.max_candidates",
            first.candidates.len(),
            model.max_candidates
        )));
    }
    if first.exposed.len() != model.slate_length {
        return Err(CliError::Usage(format!(
            "corpus exposes {} items per session but model.slate_length = {}; \
             adjust --set model.slate_length",
            first.exposed.len(),
            model.slate_length
        )));
    }
    let width = first.candidates[0].features.len();
    if width != model.feature_dim {
        return Err(CliError::Usage(format!(
            "corpus feature width {width} but model.feature_dim = {}; \
             adjust --set model.feature_dim",
            model.feature_dim
        )));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(GenRerankerModel<f32>, AdamState, Checkpoint), CliError> {
    let ckpt = Checkpoint::load(path)?;
    let (model, adam) = ckpt.restore()?;
    Ok((model, adam, ckpt))
}

fn dataset_tag(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

// ── Commands ─────────────────────────────────────────────────────────

fn simulate(common: &CommonArgs) -> Result<(), CliError> {
    let config = effective_config(common)?;
    config.sim.validate()?;
    init_run_dir(common, "simulate", &config)?;
    let simulator = Simulator::new(config.sim.clone())?;
    let records = simulator.generate();
    write_file(&common.out.join("sessions.jsonl"), &sessions_to_jsonl(&records))?;
    println!("wrote {} sessions to {}", records.len(), common.out.join("sessions.jsonl").display());
    Ok(())
}

fn pretrain(common: &CommonArgs, data: &Path) -> Result<(), CliError> {
    let config = effective_config(common)?;
    config.model.validate()?;
    config.train.validate()?;
    init_run_dir(common, "pretrain", &config)?;
    let records = load_records(data)?;
    check_corpus(&records, &config.model)?;
    let examples: Vec<TrainExample> = records
        .iter()
        .map(TrainExample::from_record)
        .collect::<gref_core::Result<_>>()?;

    let mut model = GenRerankerModel::<f32>::new(
        config.model.clone(),
        derive_seed(config.train.seed, "init"),
    )?;
    let mut adam = AdamState::new();
    let report = run_pretrain(&mut model, &examples, &config.train, &mut adam, 0)?;
    write_file(&common.out.join("loss_curve.csv"), &loss_curve_csv(&report.loss_curve))?;
    Checkpoint::from_training(&model, &adam, StageTag::Pretrained, config.train.epochs)
        .save(common.out.join("checkpoint.gref"))?;
    println!(
        "pre-trained {} epochs on {} sessions; final epoch mean loss {:.4}",
        config.train.epochs,
        examples.len(),
        report.epoch_mean_loss.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

fn dpo(
    common: &CommonArgs,
    data: &Path,
    init: Option<&Path>,
    allow_scratch: bool,
) -> Result<(), CliError> {
    let config = effective_config(common)?;
    config.train.validate()?;

    let (mut model, stage) = match init {
        Some(path) => {
            let (model, _, ckpt) = load_checkpoint(path)?;
            (model, ckpt.stage)
        }
        None => {
            if !allow_scratch {
                return Err(CliError::Usage(
                    "dpo needs --init CHECKPOINT; training from scratch requires \
                     --allow-scratch"
                        .into(),
                ));
            }
            config.model.validate()?;
            let model = GenRerankerModel::<f32>::new(
                config.model.clone(),
                derive_seed(config.train.seed, "init"),
            )?;
            (model, StageTag::Scratch)
        }
    };
    init_run_dir(common, "dpo", &config)?;

    let records = load_records(data)?;
    check_corpus(&records, model.config())?;
    let pairs = build_dpo_examples(&records, 1.0, 1.0)?;
    if pairs.is_empty() {
        return Err(CliError::Runtime(
            "no preference pairs: every session's reordering matched its exposure".into(),
        ));
    }

    // The frozen reference is the stage-start parameter set.
    let reference = model.clone();
    let mut adam = AdamState::new();
    let report = run_dpo(
        &mut model,
        stage,
        &reference,
        &pairs,
        &config.train,
        &mut adam,
        0,
        allow_scratch,
    )?;
    write_file(&common.out.join("loss_curve.csv"), &loss_curve_csv(&report.loss_curve))?;
    Checkpoint::from_training(&model, &adam, StageTag::Dpo, config.train.epochs)
        .save(common.out.join("checkpoint.gref"))?;
    println!(
        "post-trained on {} preference pairs; final epoch mean loss {:.4}",
        pairs.len(),
        report.epoch_mean_loss.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

fn decode(
    common: &CommonArgs,
    data: &Path,
    init: &Path,
    mode: ModeArg,
    heads: Option<usize>,
) -> Result<(), CliError> {
    let config = effective_config(common)?;
    init_run_dir(common, "decode", &config)?;
    let (model, _, _) = load_checkpoint(init)?;
    let records = load_records(data)?;
    check_corpus(&records, model.config())?;
    let heads = heads.unwrap_or(model.config().omtp_heads);

    let mut lines = String::new();
    for record in &records {
        let features = record.feature_matrix();
        let start = Instant::now();
        let outcome = match mode {
            ModeArg::Ar => ar_decode(&model, &features)?,
            ModeArg::Omtp => omtp_decode(&model, &features, heads)?,
        };
        let latency_us = start.elapsed().as_micros() as u64;
        let row = DecodeRecord {
            session_id: record.session_id.clone(),
            slate: outcome
                .slate
                .iter()
                .map(|&i| record.candidates[i].item_id.clone())
                .collect(),
            mode: decode_mode(mode).as_str().to_string(),
            forward_passes: outcome.forward_passes,
            latency_us,
        };
        lines.push_str(&serde_json::to_string(&row).expect("decode row serialization"));
        lines.push('\n');
    }
    write_file(&common.out.join("decodes.jsonl"), &lines)?;
    println!("decoded {} sessions in {} mode", records.len(), decode_mode(mode).as_str());
    Ok(())
}

fn decode_mode(mode: ModeArg) -> DecodeMode {
    match mode {
        ModeArg::Ar => DecodeMode::Ar,
        ModeArg::Omtp => DecodeMode::Omtp,
    }
}

fn eval(
    common: &CommonArgs,
    data: &Path,
    init: &Path,
    mode: ModeArg,
    heads: Option<usize>,
) -> Result<(), CliError> {
    let config = effective_config(common)?;
    config.sim.validate()?;
    init_run_dir(common, "eval", &config)?;
    let (model, _, ckpt) = load_checkpoint(init)?;
    let records = load_records(data)?;
    check_corpus(&records, model.config())?;
    let heads = heads.unwrap_or(model.config().omtp_heads);
    let simulator = Simulator::new(config.sim.clone())?;

    let outcome = evaluate_model(&model, &records, &simulator, decode_mode(mode), heads)?;
    let report = MetricReport::from_outcome(
        &dataset_tag(data),
        ckpt.stage.as_str(),
        config.train.seed,
        &outcome,
    );
    write_file(&common.out.join("metrics.csv"), &reports_to_csv(std::slice::from_ref(&report)))?;
    write_file(
        &common.out.join("metrics.json"),
        &format!("{}\n", reports_to_json(std::slice::from_ref(&report))),
    )?;
    println!(
        "auc {:.4}  ndcg {:.4}  mean latency {:.0} us over {} sessions",
        report.auc, report.ndcg, report.mean_latency_us, outcome.sessions
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench(
    common: &CommonArgs,
    data: &Path,
    init: &Path,
    mode: BenchModeArg,
    heads: Option<usize>,
    warmup: usize,
    iters: usize,
) -> Result<(), CliError> {
    let config = effective_config(common)?;
    init_run_dir(common, "bench", &config)?;
    let (model, _, _) = load_checkpoint(init)?;
    let records = load_records(data)?;
    check_corpus(&records, model.config())?;
    let heads = heads.unwrap_or(model.config().omtp_heads);

    let mut stats: Vec<LatencyStats> = Vec::new();
    if matches!(mode, BenchModeArg::Ar | BenchModeArg::Both) {
        stats.push(latency_bench(&model, &records, DecodeMode::Ar, heads, warmup, iters)?);
    }
    if matches!(mode, BenchModeArg::Omtp | BenchModeArg::Both) {
        stats.push(latency_bench(&model, &records, DecodeMode::Omtp, heads, warmup, iters)?);
    }
    let csv = latency_csv(&stats);
    write_file(&common.out.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn ablate(common: &CommonArgs, num_seeds: u64) -> Result<(), CliError> {
    if num_seeds == 0 {
        return Err(CliError::Usage("--num-seeds must be at least 1".into()));
    }
    let config = effective_config(common)?;
    config.sim.validate()?;
    init_run_dir(common, "ablate", &config)?;
    let simulator = Simulator::new(config.sim.clone())?;
    let records = simulator.generate();
    let opts = AblationOptions::desk_default(&config.sim);
    let seeds: Vec<u64> = (0..num_seeds).map(|i| config.train.seed + i).collect();
    let table = run_ablation(&records, &config.sim, &seeds, &opts)?;
    write_file(&common.out.join("ablation.csv"), &table.csv())?;
    write_file(
        &common.out.join("ablation.json"),
        &format!("{}\n", serde_json::to_string_pretty(&table).expect("table serialization")),
    )?;
    println!("ablation over {} seeds:\n{}", seeds.len(), table.csv());
    Ok(())
}

