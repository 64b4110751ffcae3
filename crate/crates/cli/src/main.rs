use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use kuda::corpus::{generate_world, FactWorld};
use kuda::driver::{
    ffn_dominant, grid_csv, pretrain_pair, representation_dump, require_file, sweep,
    top_half_agreement, trace_world, tune, Fixture, GridRow, KudaSession, Memo, RunConfig,
};
use kuda::eval::MetricReport;
use kuda::io::{csv, write_atomic, write_json};
use kuda::model::{load_checkpoint, save_checkpoint, ToyTransformer};
use kuda::tracing::{sliding_window_search, CeTable, LayerSelection};
use kuda::unlearn::{
    retain_spectra, run_baseline, step_metrics_csv, BaselineMethod, UnlearnConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "kuda",
    version,
    about = "Toy-scale knowledge unlearning workbench"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every subsystem seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// kuda, ga, graddiff, npo, simnpo or rmu.
    #[arg(long, global = true)]
    method: Option<String>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Percentage of retained facts used for the key covariance.
    #[arg(long = "sample-ratio", global = true)]
    sample_ratio: Option<f64>,
    /// Comma-separated unlearning layers.
    #[arg(long, global = true, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// World file (default: <out>/world.json).
    #[arg(long, global = true)]
    world: Option<PathBuf>,
    /// Origin checkpoint (default: <out>/origin.ckpt).
    #[arg(long, global = true)]
    origin: Option<PathBuf>,
    /// Retrain checkpoint (default: <out>/retrain.ckpt).
    #[arg(long, global = true)]
    retrain: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic fact world.
    GenWorld,
    /// Train the origin (forget + retain) and retrain (retain only) models.
    Pretrain,
    /// Causal tracing over every QA prompt; writes ce.csv.
    Trace,
    /// Sliding-window layer selection from ce.csv; writes layers.json.
    SelectLayers {
        /// Number of top-scoring candidate layers.
        #[arg(long)]
        candidates: Option<usize>,
        /// Window size.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Retained-key covariance spectra at the unlearning layers.
    CaptureFeatures,
    /// Unlearn the forget split; writes unlearned.ckpt.
    Unlearn,
    /// Evaluate a checkpoint against the origin and retrain references.
    Eval {
        /// Checkpoint to evaluate (default: <out>/unlearned.ckpt).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Two-stage τ/β tuning.
    Tune,
    /// Grid sweeps and the sampling-ratio study.
    Sweep {
        /// grid (β × τ) or sample-ratio.
        #[arg(long, default_value = "grid")]
        kind: String,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[arg(long = "ratios", value_delimiter = ',', default_value = "10,30,100")]
        ratios: Vec<f64>,
    },
    /// Gradient angles with and without the null-space projection.
    Angles,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenWorld => "gen-world",
            Command::Pretrain => "pretrain",
            Command::Trace => "trace",
            Command::SelectLayers { .. } => "select-layers",
            Command::CaptureFeatures => "capture-features",
            Command::Unlearn => "unlearn",
            Command::Eval { .. } => "eval",
            Command::Tune => "tune",
            Command::Sweep { .. } => "sweep",
            Command::Angles => "angles",
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = &common.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &common.method {
        cfg.method = v.to_ascii_lowercase();
    }
    if let Some(v) = common.beta {
        cfg.unlearn.beta = v;
    }
    if let Some(v) = common.tau {
        cfg.unlearn.tau = v;
    }
    if let Some(v) = common.sample_ratio {
        cfg.unlearn.sample_ratio = v;
    }
    if let Some(v) = &common.layers {
        cfg.unlearn.layers = v.clone();
    }
    if let Some(v) = common.epochs {
        cfg.unlearn.epochs = v;
        cfg.baseline.epochs = v;
    }
    if let Some(v) = common.lr {
        cfg.unlearn.lr = v;
        cfg.baseline.lr = v;
    }
    for (dst, src) in [
        (&mut cfg.world, &common.world),
        (&mut cfg.origin, &common.origin),
        (&mut cfg.retrain, &common.retrain),
    ] {
        if src.is_some() {
            *dst = src.clone();
        }
    }
    Ok(cfg.resolved())
}

fn out_file(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Unlearning layers: the config or flag value, else `<out>/layers.json`.
fn unlearning_layers(cfg: &RunConfig) -> Result<Vec<usize>> {
    if !cfg.unlearn.layers.is_empty() {
        return Ok(cfg.unlearn.layers.clone());
    }
    let path = out_file(cfg, "layers.json");
    require_file(
        &path,
        "layer selection (run select-layers or pass --layers)",
    )?;
    let sel: LayerSelection = kuda::io::read_json(&path)?;
    Ok(sel.layers)
}

fn session<'a>(
    cfg: &RunConfig,
    fixture: &'a Fixture,
    sample_ratio: f64,
) -> Result<KudaSession<'a>> {
    let layers = unlearning_layers(cfg)?;
    let probe = UnlearnConfig {
        layers: layers.clone(),
        ..cfg.unlearn.clone()
    };
    probe.validate(fixture.origin.config().n_layers)?;
    Ok(KudaSession::new(
        fixture,
        &layers,
        sample_ratio,
        cfg.seeds().sampling,
    )?)
}

fn report_json(rep: &MetricReport) -> Value {
    json!({
        "method": rep.method,
        "krd": rep.krd,
        "forget_accuracy": rep.forget_accuracy,
        "retain_accuracy": rep.retain_accuracy,
        "normalized_retention": rep.normalized_retention,
        "privleak": rep.privleak,
    })
}

fn gen_world(cfg: &RunConfig) -> Result<Value> {
    let world = generate_world(&cfg.world_spec)?;
    let path = cfg.world_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    world.save(&path)?;
    Ok(json!({
        "world": path,
        "facts": world.facts.len(),
        "vocab": world.vocab.size(),
    }))
}

fn pretrain(cfg: &RunConfig) -> Result<Value> {
    let wp = cfg.world_path();
    require_file(&wp, "world")?;
    let world = FactWorld::load(&wp)?;
    let (origin, retrain) = pretrain_pair(&cfg.model, &world, &cfg.train)?;
    save_checkpoint(&origin.model, cfg.origin_path())?;
    save_checkpoint(&retrain.model, cfg.retrain_path())?;
    let summary = json!({
        "origin": {"steps": origin.steps_run, "loss": origin.final_loss, "reached_target": origin.reached_target, "recall": origin.recall},
        "retrain": {"steps": retrain.steps_run, "loss": retrain.final_loss, "reached_target": retrain.reached_target, "recall": retrain.recall},
    });
    write_json(&out_file(cfg, "pretrain.json"), &summary)?;
    Ok(json!({
        "origin": cfg.origin_path(),
        "retrain": cfg.retrain_path(),
        "origin_reached_target": origin.reached_target,
        "retrain_reached_target": retrain.reached_target,
    }))
}

fn trace(cfg: &RunConfig) -> Result<Value> {
    let (wp, op) = (cfg.world_path(), cfg.origin_path());
    require_file(&wp, "world")?;
    require_file(&op, "origin checkpoint")?;
    let world = FactWorld::load(&wp)?;
    let model = load_checkpoint(&op)?;
    let (cases, ce) = trace_world(&model, &world, &cfg.trace, cfg.seeds().noise)?;
    let path = out_file(cfg, "ce.csv");
    write_text(&path, &ce.to_csv())?;
    Ok(json!({
        "ce": path,
        "cases": cases.len(),
        "ineffective_noise": cases.iter().filter(|c| c.ineffective_noise).count(),
    }))
}

fn select_layers(
    cfg: &RunConfig,
    candidates: Option<usize>,
    window: Option<usize>,
) -> Result<Value> {
    let mut wc = cfg.trace.window;
    if let Some(n) = candidates {
        wc.n_candidates = n;
    }
    if let Some(s) = window {
        wc.window = s;
    }
    let ce_path = out_file(cfg, "ce.csv");
    require_file(&ce_path, "causal-effect table (run trace)")?;
    let text = std::fs::read_to_string(&ce_path)?;
    let ce = CeTable::from_csv(&text)?;
    let sel = sliding_window_search(&ce.ffn, &wc)?;
    let dominant = ffn_dominant(&ce, &sel);
    write_json(&out_file(cfg, "layers.json"), &sel)?;
    Ok(json!({
        "layers": sel.layers,
        "hit_ratio": sel.hit_ratio,
        "fallback": sel.fallback,
        "ffn_dominant": dominant,
    }))
}

fn capture_features(cfg: &RunConfig) -> Result<Value> {
    let (wp, op) = (cfg.world_path(), cfg.origin_path());
    require_file(&wp, "world")?;
    require_file(&op, "origin checkpoint")?;
    let world = FactWorld::load(&wp)?;
    let model = load_checkpoint(&op)?;
    let layers = unlearning_layers(cfg)?;
    let spectra = retain_spectra(
        &model,
        &world,
        &layers,
        cfg.unlearn.sample_ratio,
        cfg.seeds().sampling,
    )?;
    let mut rows = Vec::new();
    let mut dims = Vec::new();
    for sp in &spectra {
        let tau = kuda::unlearn::effective_tau(sp, &cfg.unlearn);
        dims.push(sp.projector(tau)?.null_dim);
        for (i, &e) in sp.eigenvalues().iter().enumerate() {
            rows.push(vec![
                sp.layer.to_string(),
                i.to_string(),
                format!("{e:e}"),
                format!("{:e}", e / sp.trace()),
            ]);
        }
    }
    let path = out_file(cfg, "spectra.csv");
    write_text(
        &path,
        &csv(&["layer", "index", "eigenvalue", "relative"], rows),
    )?;
    Ok(json!({
        "spectra": path,
        "layers": layers,
        "sample_ratio": cfg.unlearn.sample_ratio,
        "tau": cfg.unlearn.tau,
        "null_dims": dims,
    }))
}

fn unlearn(cfg: &RunConfig) -> Result<Value> {
    let fixture = Fixture::load(cfg)?;
    let (model, steps, extra): (ToyTransformer, _, Value) = if cfg.method == "kuda" {
        let s = session(cfg, &fixture, cfg.unlearn.sample_ratio)?;
        let (run, _) = s.run(&cfg.unlearn)?;
        let extra =
            json!({"layers": s.layers, "null_dims": run.null_dims, "mean_angle": run.mean_angle()});
        (run.model, run.steps, extra)
    } else {
        let method: BaselineMethod = cfg.method.parse()?;
        let bc = kuda::unlearn::BaselineConfig {
            method,
            ..cfg.baseline.clone()
        };
        let run = run_baseline(&fixture.origin, &fixture.world, &bc)?;
        (run.model, run.steps, json!({}))
    };
    let ckpt = out_file(cfg, "unlearned.ckpt");
    save_checkpoint(&model, &ckpt)?;
    write_text(&out_file(cfg, "steps.csv"), &step_metrics_csv(&steps))?;
    let layer = match cfg.method.as_str() {
        "kuda" => *unlearning_layers(cfg)?.iter().max().expect("validated"),
        _ => cfg.baseline.rmu_layer,
    };
    write_text(
        &out_file(cfg, "representations.csv"),
        &representation_dump(&fixture.origin, &model, &fixture.world, layer)?,
    )?;
    Ok(json!({"method": cfg.method, "checkpoint": ckpt, "steps": steps.len(), "run": extra}))
}

fn eval(cfg: &RunConfig, model: Option<PathBuf>) -> Result<Value> {
    let fixture = Fixture::load(cfg)?;
    let path = model.unwrap_or_else(|| out_file(cfg, "unlearned.ckpt"));
    require_file(&path, "model checkpoint")?;
    let m = load_checkpoint(&path)?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    let rep = fixture.report(&name, &m)?;
    write_json(&out_file(cfg, "report.json"), &rep)?;
    write_text(
        &out_file(cfg, "report.csv"),
        &csv(&MetricReport::CSV_HEADER, [rep.csv_row()]),
    )?;
    Ok(report_json(&rep))
}

fn tune_cmd(cfg: &RunConfig) -> Result<Value> {
    let fixture = Fixture::load(cfg)?;
    let s = session(cfg, &fixture, cfg.unlearn.sample_ratio)?;
    let mut memo = Memo::default();
    let mut run = |b: f64, t: f64| s.row(&cfg.unlearn, b, t);
    let res = tune(&cfg.tune, &mut memo, &mut run);
    write_text(&out_file(cfg, "tune_grid.csv"), &grid_csv(&memo.rows()))?;
    let res = res?;
    write_json(&out_file(cfg, "tune.json"), &res)?;
    Ok(json!({
        "tau_star": res.tau_star,
        "boundary_found": res.boundary_found,
        "beta": res.selected.beta,
        "tau": res.selected.tau,
        "krd": res.selected.krd,
        "retention": res.selected.retention,
    }))
}

fn sweep_cmd(
    cfg: &RunConfig,
    kind: &str,
    betas: Option<Vec<f64>>,
    taus: Option<Vec<f64>>,
    ratios: &[f64],
) -> Result<Value> {
    let fixture = Fixture::load(cfg)?;
    let betas = betas.unwrap_or_else(|| cfg.tune.betas.clone());
    let taus = taus.unwrap_or_else(|| cfg.tune.taus.clone());
    match kind {
        "grid" => {
            let s = session(cfg, &fixture, cfg.unlearn.sample_ratio)?;
            let mut memo = Memo::default();
            let mut run = |b: f64, t: f64| s.row(&cfg.unlearn, b, t);
            let res = sweep(&betas, &taus, &mut memo, &mut run);
            let path = out_file(cfg, "sweep.csv");
            write_text(&path, &grid_csv(&memo.rows()))?;
            let rows = res?;
            Ok(json!({"grid": path, "cells": rows.len()}))
        }
        "sample-ratio" => sample_ratio_study(cfg, &fixture, ratios, &taus),
        other => bail!(kuda::Error::Invalid(format!(
            "unknown sweep kind {other:?}"
        ))),
    }
}

/// Spectra and end-to-end results at each sampling ratio, compared with
/// the largest ratio. The smaller ratios may move τ by one grid step.
fn sample_ratio_study(
    cfg: &RunConfig,
    fixture: &Fixture,
    ratios: &[f64],
    taus: &[f64],
) -> Result<Value> {
    let Some(&full) = ratios.iter().max_by(|a, b| a.total_cmp(b)) else {
        bail!(kuda::Error::Invalid("no sampling ratios".into()));
    };
    let reference = session(cfg, fixture, full)?;
    let beta = cfg.unlearn.beta;
    let tau = cfg.unlearn.tau;
    let ref_row = reference.row(&cfg.unlearn, beta, tau)?;
    let pos = taus.iter().position(|&t| t == tau);
    let mut spectra_rows = Vec::new();
    let mut grid_rows = Vec::new();
    let mut summary = Vec::new();
    for &ratio in ratios {
        let s = if ratio == full {
            None
        } else {
            Some(session(cfg, fixture, ratio)?)
        };
        let s = s.as_ref().unwrap_or(&reference);
        let mut worst_max = 0.0f64;
        let mut worst_vec = 0.0f64;
        for (sp, rsp) in s.spectra.iter().zip(&reference.spectra) {
            let a = top_half_agreement(
                &relative(sp.eigenvalues(), sp.trace()),
                &relative(rsp.eigenvalues(), rsp.trace()),
            )?;
            worst_max = worst_max.max(a.max_relative);
            worst_vec = worst_vec.max(a.vector_relative);
            spectra_rows.push(vec![
                ratio.to_string(),
                sp.layer.to_string(),
                a.count.to_string(),
                format!("{:.6}", a.max_relative),
                format!("{:.6}", a.vector_relative),
            ]);
        }
        let mut candidates = vec![tau];
        if let Some(i) = pos {
            candidates.extend(i.checked_sub(1).map(|j| taus[j]));
            candidates.extend(taus.get(i + 1));
        }
        let mut best: Option<GridRow> = None;
        for &t in if ratio == full {
            &candidates[..1]
        } else {
            &candidates[..]
        } {
            let mut row = if ratio == full && t == tau {
                ref_row.clone()
            } else {
                s.row(&cfg.unlearn, beta, t)?
            };
            row.tau = t;
            let gap = |r: &GridRow| {
                (r.krd - ref_row.krd)
                    .abs()
                    .max((r.retention - ref_row.retention).abs())
            };
            grid_rows.push((ratio, row.clone()));
            if best.as_ref().is_none_or(|b| gap(&row) < gap(b)) {
                best = Some(row);
            }
        }
        let best = best.expect("at least one τ");
        summary.push(json!({
            "ratio": ratio,
            "top_half_max_relative": worst_max,
            "top_half_vector_relative": worst_vec,
            "tau": best.tau,
            "krd": best.krd,
            "retention": best.retention,
            "krd_gap": (best.krd - ref_row.krd).abs(),
            "retention_gap": (best.retention - ref_row.retention).abs(),
        }));
    }
    write_text(
        &out_file(cfg, "sample_ratio_spectra.csv"),
        &csv(
            &[
                "ratio",
                "layer",
                "top_half",
                "max_relative",
                "vector_relative",
            ],
            spectra_rows,
        ),
    )?;
    let mut text = String::from("ratio,");
    let grid: Vec<GridRow> = grid_rows.iter().map(|(_, r)| r.clone()).collect();
    let body = grid_csv(&grid);
    let mut lines = body.lines();
    text.push_str(lines.next().unwrap_or_default());
    text.push('\n');
    for ((ratio, _), line) in grid_rows.iter().zip(lines) {
        text.push_str(&format!("{ratio},{line}\n"));
    }
    write_text(&out_file(cfg, "sample_ratio.csv"), &text)?;
    let summary = Value::Array(summary);
    write_json(&out_file(cfg, "sample_ratio.json"), &summary)?;
    Ok(json!({"ratios": ratios, "results": summary}))
}

fn relative(eigs: &[f64], trace: f64) -> Vec<f64> {
    eigs.iter().map(|e| e / trace).collect()
}

fn angles(cfg: &RunConfig) -> Result<Value> {
    let fixture = Fixture::load(cfg)?;
    let s = session(cfg, &fixture, cfg.unlearn.sample_ratio)?;
    let (projected, _) = s.run(&cfg.unlearn)?;
    let ablation = UnlearnConfig {
        tau: f64::INFINITY,
        relative_tau: false,
        ..cfg.unlearn.clone()
    };
    let (plain, _) = s.run(&ablation)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |a| format!("{a:.4}"));
    let mut rows = Vec::new();
    for (variant, run) in [("projected", &projected), ("identity", &plain)] {
        for st in &run.steps {
            rows.push(vec![
                variant.to_string(),
                st.step.to_string(),
                opt(st.angle_deg),
                opt(st.angle_projected_deg),
            ]);
        }
    }
    let path = out_file(cfg, "angles.csv");
    write_text(
        &path,
        &csv(
            &["variant", "step", "angle_deg", "angle_projected_deg"],
            rows,
        ),
    )?;
    let mean_proj = |run: &kuda::unlearn::KudaRun| {
        let a: Vec<f64> = run
            .steps
            .iter()
            .filter_map(|s| s.angle_projected_deg)
            .collect();
        (!a.is_empty()).then(|| a.iter().sum::<f64>() / a.len() as f64)
    };
    let summary = json!({
        "angles": path,
        "projected": {"mean_angle": projected.mean_angle(), "mean_projected_angle": mean_proj(&projected)},
        "identity": {"mean_angle": plain.mean_angle(), "mean_projected_angle": mean_proj(&plain)},
    });
    write_json(&out_file(cfg, "angles.json"), &summary)?;
    Ok(summary)
}

fn run(cli: Cli) -> Result<Value> {
    let cfg = resolve(&cli.common)?;
    ensure_out(&cfg)?;
    match cli.command {
        Command::GenWorld => gen_world(&cfg),
        Command::Pretrain => pretrain(&cfg),
        Command::Trace => trace(&cfg),
        Command::SelectLayers { candidates, window } => select_layers(&cfg, candidates, window),
        Command::CaptureFeatures => capture_features(&cfg),
        Command::Unlearn => unlearn(&cfg),
        Command::Eval { model } => eval(&cfg, model),
        Command::Tune => tune_cmd(&cfg),
        Command::Sweep {
            kind,
            betas,
            taus,
            ratios,
        } => sweep_cmd(&cfg, &kind, betas, taus, &ratios),
        Command::Angles => angles(&cfg),
    }
}

/// Exit status per library error code; 1 for anything else.
fn exit_code(code: &str) -> u8 {
    match code {
        "usage" => 2,
        "shape" => 10,
        "asymmetric" => 11,
        "not_psd" => 12,
        "degenerate" => 13,
        "invalid_argument" => 14,
        "out_of_vocab" => 15,
        "too_long" => 16,
        "invalid_patch" => 17,
        "checkpoint" => 18,
        "diverged" => 19,
        "missing_reference" => 20,
        "io" => 21,
        "json" => 22,
        _ => 1,
    }
}

fn fail(code: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({"ok": false, "code": code, "message": message}));
    ExitCode::from(exit_code(code))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            return fail(
                "usage",
                e.to_string().lines().next().unwrap_or("usage error"),
            )
        }
    };
    let command = cli.command.name();
    match run(cli) {
        Ok(summary) => {
            println!(
                "{}",
                json!({"ok": true, "command": command, "summary": summary})
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<kuda::Error>())
                .map_or("other", |k| k.code());
            fail(code, &format!("{e:#}"))
        }
    }
}
