//! Run configuration, seed plumbing, the two-stage (β, τ) tuning and the
//! sweep runners behind the command-line tool.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{train_model, FactWorld, Split, TrainOutcome, TrainSpec, WorldSpec};
use crate::error::{Error, Result};
use crate::eval::{measure, report, EvalSpec, MetricReport, RawMetrics};
use crate::model::{Batch, Intervention, ModelConfig, ToyTransformer};
use crate::numerics::Tensor;
use crate::tracing::{
    causal_effect, run_trace, CeTable, LayerSelection, TraceCase, TracePrompt, WindowConfig,
};
use crate::unlearn::{
    retain_spectra, run_kuda, BaselineConfig, FeatureSpectrum, KudaReference, KudaRun,
    UnlearnConfig,
};

/// Per-subsystem seeds split from one root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub world: u64,
    pub init: u64,
    pub train: u64,
    pub noise: u64,
    pub sampling: u64,
    pub rmu: u64,
    pub unlearn: u64,
}

impl Seeds {
    pub fn from_root(root: u64) -> Self {
        let draw = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(root);
            rng.set_stream(stream);
            rng.next_u64()
        };
        Self {
            world: draw(1),
            init: draw(2),
            train: draw(3),
            noise: draw(4),
            sampling: draw(5),
            rmu: draw(6),
            unlearn: draw(7),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSpec {
    /// Corruption std as a multiple of the clean embedding std.
    pub noise_scale: f64,
    pub window: WindowConfig,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            noise_scale: 3.0,
            window: WindowConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneSpec {
    /// Stage-one grid, descending.
    pub taus: Vec<f64>,
    /// Stage-two inverse temperatures.
    pub betas: Vec<f64>,
    /// β held fixed while scanning τ.
    pub boundary_beta: f64,
    pub krd_threshold: f64,
}

impl Default for TuneSpec {
    fn default() -> Self {
        Self {
            taus: vec![3e-3, 1.5e-3, 1e-3, 6e-4, 3e-4],
            betas: vec![0.1, 1.0, 2.0],
            boundary_beta: 0.1,
            krd_threshold: 0.9,
        }
    }
}

/// One JSON document describing a run. Subsystem seeds are derived from
/// `seed` by [`RunConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Artifact paths; unset ones live in `out` under their default names.
    pub world: Option<PathBuf>,
    pub origin: Option<PathBuf>,
    pub retrain: Option<PathBuf>,
    pub out: PathBuf,
    pub method: String,
    pub world_spec: WorldSpec,
    pub model: ModelConfig,
    pub train: TrainSpec,
    pub trace: TraceSpec,
    pub eval: EvalSpec,
    pub unlearn: UnlearnConfig,
    pub baseline: BaselineConfig,
    pub tune: TuneSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: None,
            origin: None,
            retrain: None,
            out: PathBuf::from("out"),
            method: "kuda".into(),
            world_spec: WorldSpec::default(),
            model: ModelConfig::default(),
            train: TrainSpec::default(),
            trace: TraceSpec::default(),
            eval: EvalSpec::default(),
            unlearn: UnlearnConfig::default(),
            baseline: BaselineConfig::default(),
            tune: TuneSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingReference(format!(
                "config {}",
                path.display()
            )));
        }
        crate::io::read_json(path)
    }

    pub fn world_path(&self) -> PathBuf {
        self.world
            .clone()
            .unwrap_or_else(|| self.out.join("world.json"))
    }

    pub fn origin_path(&self) -> PathBuf {
        self.origin
            .clone()
            .unwrap_or_else(|| self.out.join("origin.ckpt"))
    }

    pub fn retrain_path(&self) -> PathBuf {
        self.retrain
            .clone()
            .unwrap_or_else(|| self.out.join("retrain.ckpt"))
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_root(self.seed)
    }

    /// Copy with every subsystem seed filled in from the root seed.
    pub fn resolved(&self) -> Self {
        let s = self.seeds();
        let mut c = self.clone();
        c.world_spec.seed = s.world;
        c.model.seed = s.init;
        c.train.seed = s.train;
        c.unlearn.seed = s.unlearn;
        c.baseline.seed = s.rmu;
        c
    }
}

/// Error unless `path` is an existing file.
pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingReference(format!(
            "{what} {}",
            path.display()
        )))
    }
}

/// Origin (forget + retain) and retrain (retain only) models from one spec.
pub fn pretrain_pair(
    model: &ModelConfig,
    world: &FactWorld,
    spec: &TrainSpec,
) -> Result<(TrainOutcome, TrainOutcome)> {
    let origin = train_model(model, world, &[Split::Forget, Split::Retain], spec)?;
    let retrain = train_model(model, world, &[Split::Retain], spec)?;
    Ok((origin, retrain))
}

/// Every QA question of the world as a trace prompt.
pub fn trace_prompts(world: &FactWorld) -> Vec<TracePrompt> {
    world
        .qa
        .iter()
        .map(|q| TracePrompt {
            tokens: q.question.clone(),
            answer: q.answer(),
        })
        .collect()
}

pub fn trace_world(
    model: &ToyTransformer,
    world: &FactWorld,
    spec: &TraceSpec,
    seed: u64,
) -> Result<(Vec<TraceCase>, CeTable)> {
    let cases = run_trace(model, &trace_prompts(world), spec.noise_scale, seed)?;
    let ce = causal_effect(&cases)?;
    Ok((cases, ce))
}

/// The FFN-dominance check over a selected window: max CE_FFN > max CE_MHSA.
pub fn ffn_dominant(ce: &CeTable, selection: &LayerSelection) -> bool {
    let max_over = |v: &[f64]| {
        selection
            .layers
            .iter()
            .map(|&l| v[l])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    max_over(&ce.ffn) > max_over(&ce.mhsa)
}

/// World, both reference models and their measured metrics.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub world: FactWorld,
    pub origin: ToyTransformer,
    pub retrain: ToyTransformer,
    pub eval: EvalSpec,
    pub origin_metrics: RawMetrics,
    pub retrain_metrics: RawMetrics,
}

impl Fixture {
    pub fn new(
        world: FactWorld,
        origin: ToyTransformer,
        retrain: ToyTransformer,
        eval: EvalSpec,
    ) -> Result<Self> {
        world.validate()?;
        let origin_metrics = measure(&origin, &world, &eval)?;
        let retrain_metrics = measure(&retrain, &world, &eval)?;
        Ok(Self {
            world,
            origin,
            retrain,
            eval,
            origin_metrics,
            retrain_metrics,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (w, o, r) = (cfg.world_path(), cfg.origin_path(), cfg.retrain_path());
        require_file(&w, "world")?;
        require_file(&o, "origin checkpoint")?;
        require_file(&r, "retrain checkpoint")?;
        let world = FactWorld::load(&w)?;
        let origin = crate::model::load_checkpoint(&o)?;
        let retrain = crate::model::load_checkpoint(&r)?;
        Self::new(world, origin, retrain, cfg.eval.clone())
    }

    pub fn report(&self, method: &str, model: &ToyTransformer) -> Result<MetricReport> {
        let raw = measure(model, &self.world, &self.eval)?;
        report(method, &raw, &self.origin_metrics, &self.retrain_metrics)
    }
}

/// Everything a KUDA run needs that does not depend on (β, τ): frozen
/// reference representations and retained-key spectra.
pub struct KudaSession<'a> {
    pub fixture: &'a Fixture,
    pub layers: Vec<usize>,
    pub sample_ratio: f64,
    pub reference: KudaReference,
    pub spectra: Vec<FeatureSpectrum>,
}

impl<'a> KudaSession<'a> {
    pub fn new(
        fixture: &'a Fixture,
        layers: &[usize],
        sample_ratio: f64,
        sampling_seed: u64,
    ) -> Result<Self> {
        let last = *layers
            .iter()
            .max()
            .ok_or_else(|| Error::Invalid("no unlearning layers".into()))?;
        Ok(Self {
            fixture,
            layers: layers.to_vec(),
            sample_ratio,
            reference: KudaReference::from_world(&fixture.origin, &fixture.world, last)?,
            spectra: retain_spectra(
                &fixture.origin,
                &fixture.world,
                layers,
                sample_ratio,
                sampling_seed,
            )?,
        })
    }

    /// Run KUDA with `cfg`, whose layers and sample ratio are taken from the
    /// session.
    pub fn run(&self, cfg: &UnlearnConfig) -> Result<(KudaRun, MetricReport)> {
        let mut cfg = cfg.clone();
        cfg.layers = self.layers.clone();
        cfg.sample_ratio = self.sample_ratio;
        let run = run_kuda(&self.fixture.origin, &self.reference, &cfg, &self.spectra)?;
        let rep = self.fixture.report("kuda", &run.model)?;
        Ok((run, rep))
    }

    pub fn row(&self, base: &UnlearnConfig, beta: f64, tau: f64) -> Result<GridRow> {
        let cfg = UnlearnConfig {
            beta,
            tau,
            ..base.clone()
        };
        let (run, rep) = self.run(&cfg)?;
        Ok(GridRow::new(beta, tau, &rep, run.mean_angle()))
    }
}

/// One (β, τ) cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub beta: f64,
    pub tau: f64,
    pub krd: f64,
    /// Retain accuracy relative to the origin model.
    pub retention: f64,
    pub forget_accuracy: f64,
    pub retain_accuracy: f64,
    pub privleak: f64,
    pub mean_angle: Option<f64>,
}

impl GridRow {
    pub fn new(beta: f64, tau: f64, rep: &MetricReport, mean_angle: Option<f64>) -> Self {
        Self {
            beta,
            tau,
            krd: rep.krd,
            retention: rep.normalized_retention,
            forget_accuracy: rep.forget_accuracy,
            retain_accuracy: rep.retain_accuracy,
            privleak: rep.privleak,
            mean_angle,
        }
    }

    /// Harmonic mean of KRD and retention.
    pub fn balance(&self) -> f64 {
        if self.krd <= 0.0 || self.retention <= 0.0 {
            0.0
        } else {
            2.0 * self.krd * self.retention / (self.krd + self.retention)
        }
    }
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    crate::io::csv(
        &[
            "beta",
            "tau",
            "krd",
            "retention",
            "forget_accuracy",
            "retain_accuracy",
            "privleak",
            "mean_angle",
        ],
        rows.iter().map(|r| {
            vec![
                r.beta.to_string(),
                r.tau.to_string(),
                format!("{:.6}", r.krd),
                format!("{:.6}", r.retention),
                format!("{:.6}", r.forget_accuracy),
                format!("{:.6}", r.retain_accuracy),
                format!("{:.6}", r.privleak),
                r.mean_angle.map_or(String::new(), |a| format!("{a:.4}")),
            ]
        }),
    )
}

/// Evaluated (β, τ) cells, so no pair is run twice.
#[derive(Clone, Debug, Default)]
pub struct Memo {
    cells: BTreeMap<(u64, u64), GridRow>,
    order: Vec<(u64, u64)>,
}

impl Memo {
    pub fn get_or_run(
        &mut self,
        beta: f64,
        tau: f64,
        run: &mut dyn FnMut(f64, f64) -> Result<GridRow>,
    ) -> Result<GridRow> {
        let key = (beta.to_bits(), tau.to_bits());
        if let Some(r) = self.cells.get(&key) {
            return Ok(r.clone());
        }
        let row = run(beta, tau)?;
        self.cells.insert(key, row.clone());
        self.order.push(key);
        Ok(row)
    }

    /// Rows in evaluation order.
    pub fn rows(&self) -> Vec<GridRow> {
        self.order.iter().map(|k| self.cells[k].clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub tau_star: f64,
    pub found: bool,
    /// Rows scanned, in grid order.
    pub rows: Vec<GridRow>,
}

fn check_grid(taus: &[f64]) -> Result<()> {
    if taus.len() < 3 {
        return Err(Error::Invalid(format!(
            "τ grid needs at least 3 points, got {}",
            taus.len()
        )));
    }
    if taus.windows(2).any(|w| !(w[0] > w[1])) || !(taus[taus.len() - 1] > 0.0) {
        return Err(Error::Invalid(
            "τ grid must be positive and strictly descending".into(),
        ));
    }
    if taus[0] / taus[taus.len() - 1] < 10.0 - 1e-9 {
        return Err(Error::Invalid(
            "τ grid must span at least one decade".into(),
        ));
    }
    Ok(())
}

/// Scan `taus` (descending) at fixed β; τ* is the first value whose KRD
/// falls below `threshold`. Without a crossing the grid minimum is
/// returned and `found` is false.
pub fn find_stability_boundary(
    taus: &[f64],
    beta: f64,
    threshold: f64,
    memo: &mut Memo,
    run: &mut dyn FnMut(f64, f64) -> Result<GridRow>,
) -> Result<Boundary> {
    check_grid(taus)?;
    let mut rows = Vec::new();
    for &tau in taus {
        let row = memo.get_or_run(beta, tau, run)?;
        let below = row.krd < threshold;
        rows.push(row);
        if below {
            return Ok(Boundary {
                tau_star: tau,
                found: true,
                rows,
            });
        }
    }
    Ok(Boundary {
        tau_star: taus[taus.len() - 1],
        found: false,
        rows,
    })
}

/// Run every β at `tau`; pick the largest harmonic mean of KRD and
/// retention, ties going to the larger β.
pub fn balance_search(
    tau: f64,
    betas: &[f64],
    memo: &mut Memo,
    run: &mut dyn FnMut(f64, f64) -> Result<GridRow>,
) -> Result<(GridRow, Vec<GridRow>)> {
    if betas.is_empty() {
        return Err(Error::Invalid("empty β set".into()));
    }
    let rows: Vec<GridRow> = betas
        .iter()
        .map(|&b| memo.get_or_run(b, tau, run))
        .collect::<Result<_>>()?;
    let mut best = &rows[0];
    for r in &rows[1..] {
        let (s, bs) = (r.balance(), best.balance());
        if s > bs + 1e-12 || ((s - bs).abs() <= 1e-12 && r.beta > best.beta) {
            best = r;
        }
    }
    Ok((best.clone(), rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub tau_star: f64,
    pub boundary_found: bool,
    /// Every evaluated cell, in evaluation order.
    pub grid: Vec<GridRow>,
    pub selected: GridRow,
    pub rationale: String,
}

/// The τ one grid step above `tau_star` (extrapolated geometrically when
/// `tau_star` is already the largest grid value).
pub fn tau_above(taus: &[f64], tau_star: f64) -> f64 {
    match taus.iter().position(|&t| t == tau_star) {
        Some(0) | None if taus.len() >= 2 => tau_star * taus[0] / taus[1],
        Some(i) => taus[i - 1],
        None => tau_star,
    }
}

/// Two-stage tuning: stability boundary at fixed β, then the β balance
/// search one grid step above it.
pub fn tune(
    spec: &TuneSpec,
    memo: &mut Memo,
    run: &mut dyn FnMut(f64, f64) -> Result<GridRow>,
) -> Result<TuneResult> {
    let boundary = find_stability_boundary(
        &spec.taus,
        spec.boundary_beta,
        spec.krd_threshold,
        memo,
        run,
    )?;
    let tau = tau_above(&spec.taus, boundary.tau_star);
    let (selected, _) = balance_search(tau, &spec.betas, memo, run)?;
    let rationale = format!(
        "{}; balance search at τ={tau:e} (one grid step above τ*) over β {:?}: \
         β={} maximizes the harmonic mean of KRD ({:.4}) and normalized retention ({:.4}) = {:.4}, ties to larger β",
        if boundary.found {
            format!("KRD first falls below {} at τ*={:e} with β={}", spec.krd_threshold, boundary.tau_star, spec.boundary_beta)
        } else {
            format!("no boundary found: KRD ≥ {} across the grid; τ* set to the grid minimum", spec.krd_threshold)
        },
        spec.betas,
        selected.beta,
        selected.krd,
        selected.retention,
        selected.balance(),
    );
    Ok(TuneResult {
        tau_star: boundary.tau_star,
        boundary_found: boundary.found,
        grid: memo.rows(),
        selected,
        rationale,
    })
}

/// Full β × τ grid through the memo.
pub fn sweep(
    betas: &[f64],
    taus: &[f64],
    memo: &mut Memo,
    run: &mut dyn FnMut(f64, f64) -> Result<GridRow>,
) -> Result<Vec<GridRow>> {
    let mut out = Vec::with_capacity(betas.len() * taus.len());
    for &b in betas {
        for &t in taus {
            out.push(memo.get_or_run(b, t, run)?);
        }
    }
    Ok(out)
}

/// Largest relative eigenvalue disagreement over the top half of two
/// spectra (both descending, equal length).
pub fn top_half_agreement(a: &[f64], b: &[f64]) -> Result<TopHalfAgreement> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "spectra of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let half = a.len() / 2;
    let mut max_rel = 0.0f64;
    let (mut diff, mut norm) = (0.0, 0.0);
    for i in 0..half.max(1) {
        let rel = (a[i] - b[i]).abs() / b[i].abs().max(f64::MIN_POSITIVE);
        max_rel = max_rel.max(rel);
        diff += (a[i] - b[i]).powi(2);
        norm += b[i].powi(2);
    }
    Ok(TopHalfAgreement {
        count: half.max(1),
        max_relative: max_rel,
        vector_relative: (diff / norm.max(f64::MIN_POSITIVE)).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopHalfAgreement {
    pub count: usize,
    /// max_i |a_i − b_i| / b_i.
    pub max_relative: f64,
    /// ‖a − b‖ / ‖b‖ over the same eigenvalues.
    pub vector_relative: f64,
}

/// Last-token layer outputs of `seqs`, one row per sequence.
pub fn last_token_rows(
    model: &ToyTransformer,
    seqs: &[Vec<usize>],
    layer: usize,
) -> Result<Tensor> {
    let batch = Batch::new(seqs);
    let rec = model.forward_batch(&batch, &Intervention::default())?;
    rec.layer_out
        .get(layer)
        .map(|h| h.gather_rows(&batch.last_rows()))
        .ok_or_else(|| Error::Invalid(format!("layer {layer} out of range")))
}

/// Representation dump at `layer` for origin and unlearned models over the
/// forget and retain QA prompts, labelled `model/split`.
pub fn representation_dump(
    origin: &ToyTransformer,
    unlearned: &ToyTransformer,
    world: &FactWorld,
    layer: usize,
) -> Result<String> {
    let mut owned = Vec::new();
    for (name, m) in [("origin", origin), ("unlearned", unlearned)] {
        for split in [Split::Forget, Split::Retain] {
            let seqs: Vec<Vec<usize>> = world
                .qa_items(split)
                .iter()
                .map(|q| q.question.clone())
                .collect();
            owned.push((
                format!("{name}/{}", split.name()),
                last_token_rows(m, &seqs, layer)?,
            ));
        }
    }
    let blocks: Vec<(String, &Tensor)> = owned.iter().map(|(l, t)| (l.clone(), t)).collect();
    Ok(crate::eval::representation_csv(&blocks))
}
