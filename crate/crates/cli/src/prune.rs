use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use serde_json::json;
use specpipe::primitives::SeededRng;
use specpipe::uvprune::{
    attention_prune, boundary_concentration, make_synthetic_stack, sample_planted, uv_prune, PruneConfig, PruneResult,
    SinkProfile,
};

use crate::output::{csv_writer, metadata, write_json, Failure, UsageExt};

#[derive(Args, Clone, Serialize)]
pub struct PruneArgs {
    /// Video tokens.
    #[arg(long, default_value_t = 1000)]
    pub m: usize,
    /// Text tokens.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Embedding width.
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 20)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub frames: usize,
    #[arg(long, default_value_t = 0.9)]
    pub alpha: f64,
    /// Per-layer similarity gain of the relevant tokens.
    #[arg(long, default_value_t = 0.01)]
    pub delta: f64,
    /// Attention bias added to the first frame and the last four.
    #[arg(long, default_value_t = 1.0)]
    pub sink_strength: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-token CSV.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// JSON summary; defaults to the CSV path with a .json extension.
    #[arg(long)]
    #[serde(skip)]
    pub summary: Option<PathBuf>,
}

#[derive(Serialize)]
struct TokenRow {
    token_index: usize,
    frame: usize,
    uv_score: f64,
    attention_score: f64,
    retained_uv: u8,
    retained_attn: u8,
}

fn flags(m: usize, r: &PruneResult) -> Vec<u8> {
    let mut f = vec![0u8; m];
    for &i in &r.retained {
        f[i] = 1;
    }
    f
}

pub fn prune_demo(a: &PruneArgs) -> Result<(), Failure> {
    let cfg = PruneConfig::new(a.alpha).with_layers(a.layers);
    cfg.validate().usage()?;
    if a.m == 0 || a.frames == 0 || a.frames > a.m {
        return Err(Failure::usage_msg("need m >= frames >= 1"));
    }
    let mut rng = SeededRng::new(a.seed);
    let keep = cfg.keep_count(a.m);
    let planted = sample_planted(a.m, keep, &mut rng);
    let sink = SinkProfile::new(a.frames, a.sink_strength);
    let s = make_synthetic_stack(a.m, a.n, a.d, a.layers, &planted, a.delta, sink, &mut rng).usage()?;
    let uv = uv_prune(&s.stack, &cfg)?;
    let attn = attention_prune(&s.attention, &cfg)?;
    let band = sink.band();
    let report = |r: &PruneResult| {
        json!({
            "retained": r.retained.len(),
            "recall": r.recall(&planted),
            "boundary_concentration": boundary_concentration(r, &s.stack.frame_map, &band),
        })
    };
    let summary = json!({
        "metadata": metadata(serde_json::Value::Null),
        "config": a,
        "keep": keep,
        "planted": planted.len(),
        "band_frames": band,
        "uv_prune": report(&uv),
        "attention": report(&attn),
    });
    println!(
        "keep={keep} recall_uv={:.4} recall_attn={:.4} boundary_uv={:.4} boundary_attn={:.4}",
        summary["uv_prune"]["recall"].as_f64().unwrap_or(0.0),
        summary["attention"]["recall"].as_f64().unwrap_or(0.0),
        summary["uv_prune"]["boundary_concentration"].as_f64().unwrap_or(0.0),
        summary["attention"]["boundary_concentration"].as_f64().unwrap_or(0.0),
    );

    if let Some(path) = &a.out {
        let (fu, fa) = (flags(a.m, &uv), flags(a.m, &attn));
        let mut w = csv_writer(path)?;
        for i in 0..a.m {
            w.serialize(TokenRow {
                token_index: i,
                frame: s.stack.frame_map[i],
                uv_score: uv.scores.delta_s[i],
                attention_score: s.attention[i],
                retained_uv: fu[i],
                retained_attn: fa[i],
            })?;
        }
        w.flush()?;
    }
    let summary_path = a.summary.clone().or_else(|| a.out.as_ref().map(|p| p.with_extension("json")));
    if let Some(path) = summary_path {
        write_json(&path, &summary)?;
    }
    Ok(())
}
