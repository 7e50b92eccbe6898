use std::io::Write;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};
use specpipe::pipeline::{check_trace, run_concurrent_backend, run_pipeline, EventTrace, RunStats};
use specpipe::primitives::{SeededRng, TokenId};
use specpipe::specdec::{vanilla_sd_generate, WindowConfig};
use specpipe::theory::{
    expected_tokens_two_round, parallel_rollback_time, parallel_sd_time, vanilla_sd_time, Regime, TheoryInputs,
};

use crate::config::{Backend, ExperimentConfig, Method, Models, SweepSpec, SweepVariable};
use crate::output::{csv_writer, metadata, token_hash, write_json, Failure, UsageExt};

#[derive(Debug, Clone, Serialize)]
struct RunRecord {
    seed: u64,
    token_hash: String,
    tokens: Vec<TokenId>,
    stats: RunStats,
}

struct Outcome {
    record: RunRecord,
    wall_clock_ms: Option<f64>,
    trace: Option<EventTrace>,
}

fn run_seed(cfg: &ExperimentConfig, models: &Models, seed: u64) -> Result<Outcome, Failure> {
    let timing = cfg.timing().usage()?;
    let pcfg = cfg.pipeline_config().usage()?;
    let rng = SeededRng::new(seed);
    let (tokens, mut stats, trace) = match (cfg.method, cfg.backend) {
        (Method::Vanilla, _) => {
            let window = WindowConfig::new(pcfg.resolve_gamma(&timing).usage()?).usage()?;
            let (t, s) = vanilla_sd_generate(
                &models.draft,
                &models.target,
                &models.prefix,
                cfg.k,
                window,
                &timing,
                &mut rng.clone(),
            )?;
            (t, s, None)
        }
        (Method::Pipeline, Backend::Sim) => {
            let (t, s, trace) = run_pipeline(&models.draft, &models.target, &models.prefix, &timing, &pcfg, &rng)?;
            check_trace(&trace).map_err(|v| Failure::invariant(anyhow::anyhow!("seed {seed}: {v}")))?;
            (t, s, Some(trace))
        }
        (Method::Pipeline, Backend::Concurrent) => {
            let (t, s) = run_concurrent_backend(&models.draft, &models.target, &models.prefix, &timing, &pcfg, &rng)?;
            (t, s, None)
        }
    };
    // Measured time varies between runs, so it goes to the metadata.
    let wall_clock_ms = stats.wall_clock_ms.take();
    let tokens = tokens.into_ids();
    Ok(Outcome {
        record: RunRecord {
            seed,
            token_hash: token_hash(&tokens),
            tokens,
            stats,
        },
        wall_clock_ms,
        trace,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn simulate(cfg: &ExperimentConfig, trace_path: Option<&Path>) -> Result<(), Failure> {
    cfg.validate().usage()?;
    let gamma = cfg.gamma().usage()?;
    let models = cfg.models().usage()?;
    let mut records = Vec::new();
    let mut wall = Vec::new();
    let mut first_trace = None;
    for &seed in &cfg.seeds {
        let out = run_seed(cfg, &models, seed)?;
        if first_trace.is_none() {
            first_trace = out.trace;
        }
        wall.push(out.wall_clock_ms);
        records.push(out.record);
    }
    let m = mean(records.iter().map(|r| r.stats.mean_accepted_length));
    let tau = mean(records.iter().map(|r| r.stats.tau_hat));
    let speedup = mean(records.iter().map(|r| r.stats.speedup_vs_autoregressive));
    println!(
        "gamma={gamma} M={m:.4} tau_hat={tau:.4} speedup={speedup:.4} runs={}",
        records.len()
    );

    if let Some(path) = trace_path.or(cfg.trace_path.as_deref()) {
        let trace = first_trace.ok_or_else(|| {
            Failure::usage_msg("traces are only recorded by the simulated pipeline backend")
        })?;
        let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        trace.write_jsonl(std::io::BufWriter::new(file))?;
    }
    if let Some(path) = &cfg.output_path {
        let doc = json!({
            "metadata": metadata(json!({ "wall_clock_ms": wall })),
            "config": cfg,
            "gamma": gamma,
            "summary": { "M": m, "tau_hat": tau, "speedup": speedup },
            "runs": records,
        });
        write_json(path, &doc)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    variable: &'static str,
    value: f64,
    seed: Option<u64>,
    #[serde(rename = "M")]
    m: f64,
    tau_hat: f64,
    speedup: f64,
    rollbacks: Option<u64>,
    per_token_ms: f64,
}

fn apply_point(base: &ExperimentConfig, var: SweepVariable, value: f64) -> Result<ExperimentConfig, Failure> {
    let mut cfg = base.clone();
    match var {
        SweepVariable::Alpha => cfg.alpha = value,
        SweepVariable::Tau => cfg.set_base_alignment(value).usage()?,
        SweepVariable::Gamma => cfg.gamma = Some(value as usize),
        SweepVariable::C => {
            // Keep the preset's rounding and draft curve; rescale the target.
            cfg.rounding = cfg.rounding().usage()?;
            let mut timing = cfg.timing().usage()?;
            timing.t_target = value * timing.t_draft_full();
            cfg.timing = Some(timing);
        }
    }
    cfg.validate().usage()?;
    Ok(cfg)
}

fn theory_row(cfg: &ExperimentConfig, var: SweepVariable, value: f64) -> Result<SweepRow, Failure> {
    let timing = cfg.timing().usage()?;
    let tau = cfg.base_alignment().usage()?;
    let gamma = cfg.gamma().usage()?;
    let c = timing.pruned_speed_ratio(cfg.alpha);
    let t = timing.t_draft_at(cfg.alpha);
    let inputs = TheoryInputs::new(tau, gamma, c, t).usage()?;
    let report = parallel_rollback_time(&inputs).usage()?;
    Ok(SweepRow {
        variable: var.name(),
        value,
        seed: None,
        m: expected_tokens_two_round(tau, gamma).usage()? / 2.0,
        tau_hat: tau,
        speedup: report.speedup_vs_ar,
        rollbacks: None,
        per_token_ms: report.per_token_time,
    })
}

pub fn sweep(base: &ExperimentConfig, spec: &SweepSpec) -> Result<(), Failure> {
    base.validate().usage()?;
    let seeds: Vec<u64> = match spec.repeats {
        Some(r) => (0..r as u64).map(|i| base.seeds[0] + i).collect(),
        None => base.seeds.clone(),
    };
    let mut rows = Vec::new();
    for &value in &spec.grid {
        let cfg = apply_point(base, spec.variable, value)?;
        if spec.theory {
            rows.push(theory_row(&cfg, spec.variable, value)?);
            continue;
        }
        let models = cfg.models().usage()?;
        for &seed in &seeds {
            let s = run_seed(&cfg, &models, seed)?.record.stats;
            rows.push(SweepRow {
                variable: spec.variable.name(),
                value,
                seed: Some(seed),
                m: s.mean_accepted_length,
                tau_hat: s.tau_hat,
                speedup: s.speedup_vs_autoregressive,
                rollbacks: Some(s.rollback_count),
                per_token_ms: s.per_token_ms,
            });
        }
    }
    match &base.output_path {
        Some(path) => {
            let mut w = csv_writer(path)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            for &value in &spec.grid {
                let at: Vec<&SweepRow> = rows.iter().filter(|r| r.value == value).collect();
                println!(
                    "{}={value} M={:.4} speedup={:.4}",
                    spec.variable.name(),
                    mean(at.iter().map(|r| r.m)),
                    mean(at.iter().map(|r| r.speedup))
                );
            }
        }
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn theory(tau: f64, gamma: usize, c: f64, t: f64, out: Option<&Path>) -> Result<(), Failure> {
    let inputs = TheoryInputs::new(tau, gamma, c, t).usage()?;
    let mut rows = Vec::new();
    for (method, f) in [
        ("vanilla", vanilla_sd_time as fn(&TheoryInputs, Regime) -> _),
        ("parallel", parallel_sd_time),
    ] {
        for regime in [Regime::Ideal, Regime::Practical, Regime::Rollback] {
            let r = f(&inputs, regime).usage()?;
            rows.push(json!({
                "method": method,
                "regime": regime,
                "per_token_time": r.per_token_time,
                "speedup": r.speedup_vs_ar,
            }));
        }
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{:<10} {:<10} {:>16} {:>10}", "method", "regime", "per_token_time", "speedup")?;
    for r in &rows {
        writeln!(
            stdout,
            "{:<10} {:<10} {:>16.6} {:>10.6}",
            r["method"].as_str().unwrap_or(""),
            r["regime"].as_str().unwrap_or(""),
            r["per_token_time"].as_f64().unwrap_or(f64::NAN),
            r["speedup"].as_f64().unwrap_or(f64::NAN),
        )?;
    }
    if let Some(path) = out {
        let doc = json!({
            "metadata": metadata(Value::Null),
            "inputs": inputs,
            "rows": rows,
        });
        write_json(path, &doc)?;
    }
    Ok(())
}

pub fn replay(path: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .usage()?;
    let trace = EventTrace::read_jsonl(std::io::BufReader::new(file)).usage()?;
    let summary = check_trace(&trace).map_err(Failure::invariant)?;
    println!(
        "ok: {} tokens, {} verification spans, {} rollbacks, longest accepted run {}",
        summary.emitted.len(),
        summary.verification_spans,
        summary.rollbacks,
        summary.max_accepted_run
    );
    if let Some(path) = out {
        write_json(path, &json!({ "metadata": metadata(Value::Null), "summary": summary }))?;
    }
    Ok(())
}
