//! Acceptance suite. Each criterion runs sequentially on one thread and
//! prints a single PASS/FAIL line; the process exits nonzero if any fail.
//!
//! Run with `cargo test -p gref-cli --test acceptance` (part of the
//! workspace test run).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use gref_core::data::{
    build_preference_pair, simulate_sessions, CandidateItem, SessionRecord, SimulatorConfig,
    TrainExample,
};
use gref_core::decoding::{ar_decode, omtp_decode, DecodeMode};
use gref_core::evaluation::{
    latency_bench, latency_ratio, run_ablation, AblationOptions, AblationVariant,
};
use gref_core::gradcheck::model_loss_gradcheck;
use gref_core::graph::{Graph, Tensor};
use gref_core::model::{dynamic_logits, GenRerankerModel, ModelConfig};
use gref_core::training::{dpo_loss, omtp_ce_loss, pretrain_loss_single_head, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let criteria: Vec<(&str, fn() -> Result<String, String>)> = vec![
        ("1 gradient correctness (64-bit < 1e-5, 32-bit < 1e-3, < 2 min)", c1_gradients),
        ("2 dynamic-vocabulary normalization over 1000 draws", c2_normalization),
        ("3 slate-probability normalization by enumeration", c3_sequence_mass),
        ("4 preference-loss anchor at ln 2", c4_dpo_anchor),
        ("5 single-head reduction identities", c5_reductions),
        ("6 step counts 3 vs 10 and latency ratio >= 1.3 (< 5 min)", c6_latency),
        ("7 slate validity across 1000 random draws", c7_validity),
        ("8 preference-pair worked example", c8_preference_oracle),
        ("9 ablation directions on the synthetic corpus (< 30 min)", c9_ablation),
        ("10 byte-for-byte CLI determinism", c10_determinism),
    ];

    let mut failures = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check);
        let elapsed = start.elapsed().as_secs_f64();
        match outcome {
            Ok(Ok(detail)) => println!("PASS  criterion {name}  [{elapsed:.1}s]  {detail}"),
            Ok(Err(detail)) => {
                failures += 1;
                println!("FAIL  criterion {name}  [{elapsed:.1}s]  {detail}");
            }
            Err(panic) => {
                failures += 1;
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                println!("FAIL  criterion {name}  [{elapsed:.1}s]  panicked: {msg}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}

// ── Shared fixtures ──────────────────────────────────────────────────

fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        encoder_layers: 2,
        decoder_layers: 2,
        attention_heads: 2,
        omtp_heads: 2,
        max_candidates: 5,
        slate_length: 3,
        feature_dim: 4,
    }
}

fn random_example(config: &ModelConfig, seed: u64) -> TrainExample {
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
    let clicks = (0..config.slate_length).map(|_| rng.random_range(0..2) as u8).collect();
    TrainExample { features, exposed, clicks }
}

fn check(cond: bool, detail: String) -> Result<String, String> {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ── Criteria ─────────────────────────────────────────────────────────

fn c1_gradients() -> Result<String, String> {
    let start = Instant::now();
    let config = gradcheck_config();
    let cfg = TrainConfig::default();

    let mut worst64 = 0.0f64;
    let model64 = GenRerankerModel::<f64>::new(config.clone(), 41).unwrap();
    for batch_seed in 0..3u64 {
        let batch = vec![
            random_example(&config, 100 + batch_seed),
            random_example(&config, 200 + batch_seed),
        ];
        let report = model_loss_gradcheck(&model64, &batch, &cfg, batch_seed, 1e-5)
            .map_err(|e| e.to_string())?;
        worst64 = worst64.max(report.worst().1);
    }

    let mut worst32 = 0.0f64;
    let model32 = model64.cast::<f32>();
    for batch_seed in 0..3u64 {
        let batch = vec![
            random_example(&config, 100 + batch_seed),
            random_example(&config, 200 + batch_seed),
        ];
        let report = model_loss_gradcheck(&model32, &batch, &cfg, batch_seed, 2e-3)
            .map_err(|e| e.to_string())?;
        worst32 = worst32.max(report.worst().1);
    }

    let elapsed = start.elapsed().as_secs_f64();
    check(
        worst64 < 1e-5 && worst32 < 1e-3 && elapsed < 120.0,
        format!("worst 64-bit {worst64:.2e}, worst 32-bit {worst32:.2e}, {elapsed:.1}s"),
    )
}

fn c2_normalization() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_gap = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(4..=64);
        let m = rng.random_range(1..=40);
        let h: Vec<f32> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let z: Vec<f64> = (0..(m + 1) * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let z_aug = Tensor::<f32>::from_f64(vec![m + 1, d], &z).unwrap();
        let probs = dynamic_logits(&h, &z_aug).unwrap();
        let sum: f64 = probs.iter().map(|&p| p as f64).sum();
        worst_gap = worst_gap.max((sum - 1.0).abs());
        if !probs.iter().all(|&p| p > 0.0 && p < 1.0) {
            return Err("an entry left the open interval (0, 1)".into());
        }
    }
    check(worst_gap < 1e-6, format!("worst |sum - 1| = {worst_gap:.2e}"))
}

fn c3_sequence_mass() -> Result<String, String> {
    let config = ModelConfig {
        d_model: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        attention_heads: 2,
        omtp_heads: 2,
        max_candidates: 4,
        slate_length: 2,
        feature_dim: 3,
    };
    let mut worst_gap = 0.0f64;
    for seed in 0..5u64 {
        let model = GenRerankerModel::<f64>::new(config.clone(), 80 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(90 + seed);
        let features: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut mass = 0.0f64;
        let mut slates = 0;
        for a in 0..4usize {
            for b in 0..4usize {
                if a != b {
                    mass += model.sequence_log_prob(&features, &[a, b]).unwrap().exp();
                    slates += 1;
                }
            }
        }
        assert_eq!(slates, 12);
        worst_gap = worst_gap.max((mass - 1.0).abs());
    }
    check(worst_gap < 1e-6, format!("worst |mass - 1| = {worst_gap:.2e} over 12 slates x 5 models"))
}

fn c4_dpo_anchor() -> Result<String, String> {
    let config = gradcheck_config();
    let policy = GenRerankerModel::<f32>::new(config.clone(), 4).unwrap();
    let reference = policy.clone();
    let mut worst = 0.0f64;
    for beta in [0.05, 0.1, 1.0, 5.0] {
        for seed in 0..5u64 {
            let ex = random_example(&config, 700 + seed);
            let mut loser = ex.exposed.clone();
            loser.reverse();
            let pairs = vec![gref_core::data::DpoExample {
                features: ex.features,
                winner: ex.exposed,
                loser,
            }];
            let mut g = Graph::new();
            let bound = policy.bind(&mut g);
            let loss = dpo_loss(&policy, &reference, &mut g, &bound, &pairs, beta)
                .map_err(|e| e.to_string())?;
            worst = worst.max((g.scalar_value(loss.node) - std::f64::consts::LN_2).abs());
        }
    }
    check(worst < 1e-6, format!("worst |loss - ln 2| = {worst:.2e}"))
}

fn c5_reductions() -> Result<String, String> {
    // Loss identity on 100 random batches.
    let config = ModelConfig { omtp_heads: 1, ..gradcheck_config() };
    let model = GenRerankerModel::<f32>::new(config.clone(), 5).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let batch = vec![random_example(&config, 1000 + seed)];
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let a = omtp_ce_loss(&model, &mut g, &bound, &batch).map_err(|e| e.to_string())?;
        let b = pretrain_loss_single_head(&model, &mut g, &bound, &batch)
            .map_err(|e| e.to_string())?;
        worst = worst.max((g.scalar_value(a.node) - g.scalar_value(b.node)).abs());
    }
    if worst >= 1e-6 {
        return Err(format!("loss reduction gap {worst:.2e}"));
    }

    // Decoder identity on 100 random sessions.
    let config = ModelConfig { omtp_heads: 2, ..gradcheck_config() };
    for seed in 0..100u64 {
        let model = GenRerankerModel::<f32>::new(config.clone(), 3000 + seed).unwrap();
        let ex = random_example(&config, 4000 + seed);
        let a = ar_decode(&model, &ex.features).map_err(|e| e.to_string())?;
        let b = omtp_decode(&model, &ex.features, 1).map_err(|e| e.to_string())?;
        if a.slate != b.slate || a.forward_passes != b.forward_passes {
            return Err(format!("seed {seed}: decoders diverge"));
        }
        for (x, y) in a.head0_premask.iter().flatten().zip(b.head0_premask.iter().flatten()) {
            if x.to_bits() != y.to_bits() {
                return Err(format!("seed {seed}: step distributions differ in bits"));
            }
        }
    }
    Ok(format!("loss gap {worst:.2e}; decoders bit-identical on 100 sessions"))
}

fn c6_latency() -> Result<String, String> {
    let start = Instant::now();
    // The default desk serving shape.
    let config = ModelConfig::default();
    let model = GenRerankerModel::<f32>::new(config.clone(), 6).unwrap();
    let sim = SimulatorConfig { num_sessions: 8, ..SimulatorConfig::default() };
    let sessions = simulate_sessions(&sim).map_err(|e| e.to_string())?;

    let probe = &sessions[0].feature_matrix();
    let ar = ar_decode(&model, probe).map_err(|e| e.to_string())?;
    let par = omtp_decode(&model, probe, 4).map_err(|e| e.to_string())?;
    if ar.forward_passes != 10 || par.forward_passes != 3 {
        return Err(format!(
            "forward passes {} vs {}, expected 10 vs 3",
            ar.forward_passes, par.forward_passes
        ));
    }

    let ar_stats = latency_bench(&model, &sessions, DecodeMode::Ar, 4, 5, 40)
        .map_err(|e| e.to_string())?;
    let omtp_stats = latency_bench(&model, &sessions, DecodeMode::Omtp, 4, 5, 40)
        .map_err(|e| e.to_string())?;
    let ratio = latency_ratio(&ar_stats, &omtp_stats);
    let elapsed = start.elapsed().as_secs_f64();
    check(
        ratio >= 1.3 && elapsed < 300.0,
        format!(
            "passes 10 vs 3; mean {:.0} us vs {:.0} us, ratio {ratio:.2} (floor 1.3), {elapsed:.1}s",
            ar_stats.mean_us, omtp_stats.mean_us
        ),
    )
}

fn c7_validity() -> Result<String, String> {
    let config = ModelConfig {
        d_model: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        attention_heads: 2,
        omtp_heads: 2,
        max_candidates: 8,
        slate_length: 4,
        feature_dim: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for draw in 0..1000u64 {
        let model = GenRerankerModel::<f32>::new(config.clone(), 10_000 + draw).unwrap();
        let features: Vec<Vec<f64>> = (0..config.max_candidates)
            .map(|_| (0..config.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        for out in [
            ar_decode(&model, &features).map_err(|e| e.to_string())?,
            omtp_decode(&model, &features, 2).map_err(|e| e.to_string())?,
        ] {
            if out.slate.len() != config.slate_length {
                return Err(format!("draw {draw}: slate length {}", out.slate.len()));
            }
            let mut sorted = out.slate.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != config.slate_length {
                return Err(format!("draw {draw}: duplicate items"));
            }
            if !out.slate.iter().all(|&i| i < config.max_candidates) {
                return Err(format!("draw {draw}: item outside the candidate set"));
            }
        }
    }
    Ok("2000 slates (both decoders x 1000 draws) all valid".into())
}

fn c8_preference_oracle() -> Result<String, String> {
    // Clicks on the 2nd and 5th of six exposed items.
    let n = 6;
    let candidates: Vec<CandidateItem> = (0..n)
        .map(|i| CandidateItem { item_id: format!("y{}", i + 1), features: vec![0.0] })
        .collect();
    let record = SessionRecord {
        session_id: "s0".into(),
        candidates,
        exposed: (0..n).map(|i| format!("y{}", i + 1)).collect(),
        feedback: vec![0, 1, 0, 0, 1, 0],
    };
    let pair = build_preference_pair(&record, 1.0, 1.0)
        .map_err(|e| e.to_string())?
        .ok_or("expected a pair")?;
    if pair.winner != ["y2", "y5", "y1", "y3", "y4", "y6"] {
        return Err(format!("winner order {:?}", pair.winner));
    }

    let no_clicks = SessionRecord { feedback: vec![0; 6], ..record };
    if build_preference_pair(&no_clicks, 1.0, 1.0).map_err(|e| e.to_string())?.is_some() {
        return Err("a click-free session produced a pair".into());
    }
    Ok("winner [y2, y5, y1, y3, y4, y6]; click-free session yields none".into())
}

fn c9_ablation() -> Result<String, String> {
    let start = Instant::now();
    let sim = SimulatorConfig::default(); // 2000 sessions, m = 30, n = 10
    let records = simulate_sessions(&sim).map_err(|e| e.to_string())?;
    let opts = AblationOptions::desk_default(&sim);
    let seeds = [1u64, 2, 3, 4, 5];
    let table = run_ablation(&records, &sim, &seeds, &opts).map_err(|e| e.to_string())?;

    let (a_wins, a_total) =
        table.strict_wins(AblationVariant::Full, AblationVariant::PretrainOnly, true);
    let (b_wins, b_total) =
        table.strict_wins(AblationVariant::Full, AblationVariant::DpoFromScratch, false);
    let (c_wins, c_total) =
        table.wins(AblationVariant::Full, AblationVariant::NoOrderLoss, true);
    let elapsed = start.elapsed().as_secs_f64();

    let detail = format!(
        "full>pretrain NDCG {a_wins}/{a_total} (need 4); full>scratch AUC {b_wins}/{b_total} \
         (need 5); full>=no-order NDCG {c_wins}/{c_total} (need 3); {elapsed:.0}s\n{}",
        table.csv()
    );
    check(
        a_wins >= 4 && a_total == 5 && b_wins == 5 && b_total == 5 && c_wins >= 3 && c_total == 5
            && elapsed < 1800.0,
        detail,
    )
}

// ── Criterion 10: CLI determinism ────────────────────────────────────

fn gref_bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gref"));
    cmd.env("GREF_THREADS", "1");
    cmd
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let mut cmd = gref_bin();
    cmd.args(args);
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "command {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

/// Zero out wall-clock fields so reruns compare equal; everything else is
/// compared byte for byte.
fn normalize_timing(name: &str, text: &str) -> String {
    match name {
        "decodes.jsonl" => text
            .lines()
            .map(|line| {
                let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
                v["latency_us"] = 0.into();
                v.to_string()
            })
            .collect::<Vec<_>>()
            .join("\n"),
        "metrics.csv" => text
            .lines()
            .map(|line| {
                let mut cols: Vec<&str> = line.split(',').collect();
                if cols.len() >= 7 && cols[0] != "dataset" {
                    cols[5] = "0";
                    cols[6] = "0";
                }
                cols.join(",")
            })
            .collect::<Vec<_>>()
            .join("\n"),
        "metrics.json" => {
            let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
            for row in v.as_array_mut().unwrap() {
                row["mean_latency_us"] = 0.into();
                row["p99_latency_us"] = 0.into();
            }
            v.to_string()
        }
        "bench.csv" => text
            .lines()
            .map(|line| {
                let mut cols: Vec<&str> = line.split(',').collect();
                if cols[0] == "ar" || cols[0] == "omtp" {
                    cols[1] = "0";
                    cols[2] = "0";
                    cols[3] = "0";
                }
                if cols[0] == "ratio_ar_over_omtp" {
                    cols[1] = "0";
                }
                cols.join(",")
            })
            .collect::<Vec<_>>()
            .join("\n"),
        _ => text.to_string(),
    }
}

fn compare_runs(dir_a: &Path, dir_b: &Path) -> Result<Vec<String>, String> {
    let mut seen = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir_a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    for path in entries {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let other = dir_b.join(&name);
        let a = std::fs::read(&path).map_err(|e| e.to_string())?;
        let b = std::fs::read(&other)
            .map_err(|e| format!("{} missing in rerun: {e}", other.display()))?;
        if name.ends_with(".gref") {
            if a != b {
                return Err(format!("{name}: checkpoint bytes differ"));
            }
        } else {
            let at = normalize_timing(&name, &String::from_utf8_lossy(&a));
            let bt = normalize_timing(&name, &String::from_utf8_lossy(&b));
            if at != bt {
                return Err(format!("{name}: outputs differ between reruns"));
            }
        }
        seen.push(name);
    }
    Ok(seen)
}

fn c10_determinism() -> Result<String, String> {
    let root = std::env::temp_dir().join(format!("gref-acceptance-{}", std::process::id()));
    std::fs::remove_dir_all(&root).ok();
    std::fs::create_dir_all(&root).map_err(|e| e.to_string())?;
    let root_str = root.to_string_lossy().into_owned();

    let small_model: Vec<String> = [
        "model.d_model=16",
        "model.encoder_layers=1",
        "model.decoder_layers=1",
        "model.attention_heads=2",
        "model.omtp_heads=2",
        "model.max_candidates=8",
        "model.slate_length=4",
        "train.epochs=1",
        "train.batch_size=16",
        "train.learning_rate=0.002",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect();
    let small_sim: Vec<String> = ["sim.num_sessions=60", "sim.m=8", "sim.n=4"]
        .iter()
        .flat_map(|s| ["--set".to_string(), s.to_string()])
        .collect();

    let mut compared = 0usize;
    for round in ["a", "b"] {
        let sim_out = format!("{root_str}/{round}/sim");
        let mut args: Vec<String> =
            vec!["simulate".into(), "--seed".into(), "7".into(), "--out".into(), sim_out.clone()];
        args.extend(small_sim.iter().cloned());
        run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>())?;

        let data = format!("{sim_out}/sessions.jsonl");
        let pre_out = format!("{root_str}/{round}/pre");
        let mut args: Vec<String> = vec![
            "pretrain".into(), "--seed".into(), "7".into(),
            "--data".into(), data.clone(), "--out".into(), pre_out.clone(),
        ];
        args.extend(small_model.iter().cloned());
        run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>())?;

        let ckpt = format!("{pre_out}/checkpoint.gref");
        let dpo_out = format!("{root_str}/{round}/dpo");
        let mut args: Vec<String> = vec![
            "dpo".into(), "--seed".into(), "7".into(),
            "--data".into(), data.clone(), "--init".into(), ckpt.clone(),
            "--out".into(), dpo_out.clone(),
        ];
        args.extend(small_model.iter().cloned());
        run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>())?;

        let dpo_ckpt = format!("{dpo_out}/checkpoint.gref");
        run_cli(&[
            "decode", "--data", &data, "--init", &dpo_ckpt, "--mode", "omtp",
            "--out", &format!("{root_str}/{round}/dec"),
        ])?;

        let mut args: Vec<String> = vec![
            "eval".into(), "--seed".into(), "7".into(),
            "--data".into(), data.clone(), "--init".into(), dpo_ckpt.clone(),
            "--out".into(), format!("{root_str}/{round}/eval"),
        ];
        args.extend(small_sim.iter().cloned());
        run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>())?;

        run_cli(&[
            "bench", "--data", &data, "--init", &dpo_ckpt, "--mode", "both",
            "--iters", "30", "--warmup", "2",
            "--out", &format!("{root_str}/{round}/bench"),
        ])?;

        let mut args: Vec<String> = vec![
            "ablate".into(), "--seed".into(), "7".into(), "--num-seeds".into(), "1".into(),
            "--out".into(), format!("{root_str}/{round}/abl"),
        ];
        args.extend(small_sim.iter().cloned());
        args.extend([
            "--set".into(), "sim.num_sessions=50".into(),
        ]);
        run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
    }

    for run in ["sim", "pre", "dpo", "dec", "eval", "bench", "abl"] {
        let files = compare_runs(&root.join("a").join(run), &root.join("b").join(run))?;
        compared += files.len();
    }
    std::fs::remove_dir_all(&root).ok();
    Ok(format!(
        "7 commands rerun; {compared} emitted files byte-identical (timing fields excluded)"
    ))
}
