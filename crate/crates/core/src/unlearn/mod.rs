//! Representation-deviation unlearning with relaxed null-space projection,
//! plus the gradient-based baselines.

mod baselines;
mod nullspace;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{FactWorld, Split};
use crate::error::{Error, Result};
use crate::model::{Batch, Intervention, ToyTransformer};
use crate::numerics::{cosine, log_sigmoid, ParamId, Tape, Tensor};

pub use baselines::{
    baseline_loss, rmu_direction, run_baseline, BaselineConfig, BaselineMethod, BaselineRun,
};
pub use nullspace::{
    build_projector, capture_features, project_gradient, sample_retain, FeatureCovariance,
    FeatureSpectrum, RelaxedProjector,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    /// Inverse temperature of the forgetting loss.
    pub beta: f64,
    /// Null-space relaxation threshold.
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Percentage of retained facts used for the feature covariance.
    pub sample_ratio: f64,
    /// Consecutive unlearning layers; the last one is where representations
    /// are compared.
    pub layers: Vec<usize>,
    pub seed: u64,
    /// Std of the initial in-null-space perturbation of every updated
    /// matrix, relative to that matrix's RMS. At the start the unlearned
    /// and original representations coincide, where the cosine has zero
    /// gradient; the perturbation moves the run off that stationary point.
    pub init_jitter: f64,
    /// Divide each step by the joint Frobenius norm of the unprojected
    /// gradient over all layers, so an unconstrained step has length `lr`
    /// and the projection still shortens it. Plain steps either stall near
    /// the start, where the cosine gradient vanishes, or blow up once off it.
    #[serde(default)]
    pub normalize_step: bool,
    /// Compare `tau` against eigenvalues divided by the covariance trace,
    /// making the threshold a fraction of total key energy and independent
    /// of the activation scale of the model at hand.
    #[serde(default)]
    pub relative_tau: bool,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            tau: 1e-3,
            lr: 100.0,
            epochs: 20,
            batch_size: 16,
            sample_ratio: 100.0,
            layers: Vec::new(),
            seed: 0,
            init_jitter: 0.01,
            normalize_step: true,
            relative_tau: true,
        }
    }
}

impl UnlearnConfig {
    pub fn last_layer(&self) -> usize {
        *self.layers.iter().max().expect("validated nonempty")
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Invalid("no unlearning layers".into()));
        }
        if self.layers.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Invalid(format!(
                "unlearning layers {:?} must be consecutive and ascending",
                self.layers
            )));
        }
        if self.last_layer() >= n_layers {
            return Err(Error::Invalid(format!(
                "unlearning layer {} outside {n_layers} layers",
                self.last_layer()
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Invalid(format!(
                "beta {} must be positive",
                self.beta
            )));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::Invalid(format!(
                "tau {} must be non-negative",
                self.tau
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.init_jitter >= 0.0) {
            return Err(Error::Invalid(
                "lr and init_jitter must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 100.0) {
            return Err(Error::Invalid(format!(
                "sample ratio {} outside (0, 100]",
                self.sample_ratio
            )));
        }
        Ok(())
    }
}

fn check_pair(r_un: &Tensor, r_ori: &Tensor) -> Result<()> {
    if r_un.shape() != r_ori.shape() || r_un.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "representations {:?} and {:?}",
            r_un.shape(),
            r_ori.shape()
        )));
    }
    Ok(())
}

/// `−(2/β) · mean_i log σ(β (1 − cos⟨R_un,i, R_ori,i⟩))` over token rows.
pub fn forgetting_loss(r_un: &Tensor, r_ori: &Tensor, beta: f64) -> Result<f64> {
    check_pair(r_un, r_ori)?;
    if !(beta > 0.0) {
        return Err(Error::Invalid(format!("beta {beta} must be positive")));
    }
    let mut total = 0.0;
    for r in 0..r_un.rows() {
        if crate::numerics::norm(r_ori.row(r)) < 1e-12 {
            return Err(Error::Degenerate(format!(
                "original representation row {r} is zero"
            )));
        }
        let c = cosine(r_un.row(r), r_ori.row(r))?;
        total += log_sigmoid(beta * (1.0 - c));
    }
    Ok(-2.0 / beta * total / r_un.rows() as f64)
}

/// Mean squared deviation over every entry.
pub fn retaining_loss(r_un: &Tensor, r_ori: &Tensor) -> Result<f64> {
    check_pair(r_un, r_ori)?;
    Ok(r_un.sub(r_ori)?.data().iter().map(|d| d * d).sum::<f64>() / r_un.len() as f64)
}

pub fn unlearn_objective(l_f: f64, l_r: f64) -> f64 {
    l_f + l_r
}

/// Angle between two gradients in degrees.
pub fn gradient_angle(g_f: &[f64], g_r: &[f64]) -> Result<f64> {
    let c = cosine(g_f, g_r)?;
    Ok(c.acos() * 180.0 / std::f64::consts::PI)
}

/// Frozen original-model representations at the comparison layer.
#[derive(Clone, Debug)]
pub struct KudaReference {
    pub layer: usize,
    pub forget: Vec<Vec<usize>>,
    pub retain: Vec<Vec<usize>>,
    r_forget: Vec<Tensor>,
    r_retain: Vec<Tensor>,
}

fn layer_rows(model: &ToyTransformer, seqs: &[Vec<usize>], layer: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let batch = Batch::new(chunk);
        let rec = model.forward_batch(&batch, &Intervention::default())?;
        for s in &batch.segments {
            out.push(rec.layer_out[layer].slice_rows(s.start, s.start + s.len));
        }
    }
    Ok(out)
}

impl KudaReference {
    pub fn new(
        model_ori: &ToyTransformer,
        forget: Vec<Vec<usize>>,
        retain: Vec<Vec<usize>>,
        layer: usize,
    ) -> Result<Self> {
        if forget.is_empty() {
            return Err(Error::Invalid("empty forgetting set".into()));
        }
        Ok(Self {
            layer,
            r_forget: layer_rows(model_ori, &forget, layer)?,
            r_retain: layer_rows(model_ori, &retain, layer)?,
            forget,
            retain,
        })
    }

    pub fn from_world(model_ori: &ToyTransformer, world: &FactWorld, layer: usize) -> Result<Self> {
        Self::new(
            model_ori,
            world.sequences(&[Split::Forget]),
            world.sequences(&[Split::Retain]),
            layer,
        )
    }
}

/// Loss values and per-layer gradients of one batch.
#[derive(Clone, Debug)]
pub struct KudaLosses {
    pub l_f: f64,
    pub l_r: f64,
    /// Gradients of `L_f` and `L_r` per unlearning layer, shaped like `W_out`.
    pub grad_f: Vec<Tensor>,
    pub grad_r: Vec<Tensor>,
}

impl KudaLosses {
    pub fn l_u(&self) -> f64 {
        unlearn_objective(self.l_f, self.l_r)
    }
}

/// Evaluate both losses on a batch of forget and retain sequences;
/// gradients flow only into `W_out` of `layers`.
pub fn kuda_losses(
    model_un: &ToyTransformer,
    reference: &KudaReference,
    forget_idx: &[usize],
    retain_idx: &[usize],
    layers: &[usize],
    beta: f64,
    with_grads: bool,
) -> Result<KudaLosses> {
    if forget_idx.is_empty() {
        return Err(Error::Invalid("empty forget batch".into()));
    }
    let ids: Vec<ParamId> = layers.iter().map(|&l| model_un.w_out_id(l)).collect();
    let mut seqs: Vec<&[usize]> = forget_idx
        .iter()
        .map(|&i| reference.forget[i].as_slice())
        .collect();
    seqs.extend(retain_idx.iter().map(|&i| reference.retain[i].as_slice()));
    let batch = Batch::new(&seqs);
    let n_f: usize = batch.segments[..forget_idx.len()]
        .iter()
        .map(|s| s.len)
        .sum();
    let rows = batch.rows();

    let mut tape = Tape::new();
    let fv = model_un.forward_through_on_tape(
        &mut tape,
        &batch,
        &|id| ids.contains(&id),
        &Intervention::default(),
        reference.layer,
    )?;
    let h = fv.layer_out[reference.layer];

    let rf = tape.gather_rows(h, (0..n_f).collect())?;
    let of = Tensor::vstack(
        &forget_idx
            .iter()
            .map(|&i| &reference.r_forget[i])
            .collect::<Vec<_>>(),
    )?;
    let of = tape.constant(of);
    let cos = tape.row_cosine(rf, of)?;
    let x = tape.affine(cos, -beta, beta)?;
    let ls = tape.log_sigmoid(x)?;
    let m = tape.mean_all(ls)?;
    let l_f = tape.scale(m, -2.0 / beta)?;

    let l_r = if retain_idx.is_empty() {
        None
    } else {
        let rr = tape.gather_rows(h, (n_f..rows).collect())?;
        let or = Tensor::vstack(
            &retain_idx
                .iter()
                .map(|&i| &reference.r_retain[i])
                .collect::<Vec<_>>(),
        )?;
        let or = tape.constant(or);
        let d = tape.sub(rr, or)?;
        let sq = tape.square(d)?;
        Some(tape.mean_all(sq)?)
    };

    let pick = |g: crate::numerics::Gradients| -> Vec<Tensor> {
        ids.iter()
            .map(|&id| g.get(id).cloned().expect("registered parameter"))
            .collect()
    };
    let zeros = || -> Vec<Tensor> {
        ids.iter()
            .map(|&id| Tensor::zeros(model_un.param(id).shape()))
            .collect()
    };
    let (grad_f, grad_r) = if with_grads {
        let gf = pick(tape.backward(l_f)?);
        let gr = match l_r {
            Some(v) => pick(tape.backward(v)?),
            None => zeros(),
        };
        (gf, gr)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(KudaLosses {
        l_f: tape.scalar(l_f),
        l_r: l_r.map_or(0.0, |v| tape.scalar(v)),
        grad_f,
        grad_r,
    })
}

/// Diagnostics of one update step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub l_f: f64,
    pub l_r: f64,
    pub l_u: f64,
    /// Angle between the raw gradients of `L_f` and `L_r`; `None` when
    /// either vanishes.
    pub angle_deg: Option<f64>,
    /// Same, after projection.
    pub angle_projected_deg: Option<f64>,
    /// `(layer, ‖∇L_u‖, ‖P∇L_u‖)` per unlearning layer.
    pub grad_norms: Vec<(usize, f64, f64)>,
}

pub fn step_metrics_csv(steps: &[StepMetrics]) -> String {
    let layers: Vec<usize> = steps
        .first()
        .map(|s| s.grad_norms.iter().map(|g| g.0).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = [
        "step",
        "epoch",
        "L_f",
        "L_r",
        "L_u",
        "angle_deg",
        "angle_projected_deg",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for l in &layers {
        header.push(format!("grad_pre_l{l}"));
        header.push(format!("grad_post_l{l}"));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let rows = steps.iter().map(|s| {
        let mut r = vec![
            s.step.to_string(),
            s.epoch.to_string(),
            format!("{:.10e}", s.l_f),
            format!("{:.10e}", s.l_r),
            format!("{:.10e}", s.l_u),
            opt(s.angle_deg),
            opt(s.angle_projected_deg),
        ];
        for &(_, pre, post) in &s.grad_norms {
            r.push(format!("{pre:.6e}"));
            r.push(format!("{post:.6e}"));
        }
        r
    });
    crate::io::csv(&header, rows)
}

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn angle_or_none(a: &[Tensor], b: &[Tensor]) -> Option<f64> {
    gradient_angle(&flatten(a), &flatten(b)).ok()
}

/// One pass over the forgetting set. Only `W_out` of `cfg.layers` changes.
pub fn kuda_epoch(
    model_un: &mut ToyTransformer,
    reference: &KudaReference,
    cfg: &UnlearnConfig,
    projectors: &[RelaxedProjector],
    epoch: usize,
    step0: usize,
) -> Result<Vec<StepMetrics>> {
    cfg.validate(model_un.config().n_layers)?;
    if reference.layer != cfg.last_layer() {
        return Err(Error::Invalid(format!(
            "reference captured at layer {}, config compares at {}",
            reference.layer,
            cfg.last_layer()
        )));
    }
    if projectors.len() != cfg.layers.len()
        || projectors
            .iter()
            .zip(&cfg.layers)
            .any(|(p, &l)| p.layer != l)
    {
        return Err(Error::Invalid(
            "one projector per unlearning layer required".into(),
        ));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut forget: Vec<usize> = (0..reference.forget.len()).collect();
    forget.shuffle(&mut rng);
    let mut retain: Vec<usize> = (0..reference.retain.len()).collect();
    retain.shuffle(&mut rng);
    let mut r_cursor = 0;

    let mut out = Vec::new();
    for (b, chunk) in forget.chunks(cfg.batch_size).enumerate() {
        let step = step0 + out.len();
        let mut r_idx = Vec::with_capacity(cfg.batch_size);
        while !retain.is_empty() && r_idx.len() < cfg.batch_size.min(retain.len()) {
            r_idx.push(retain[r_cursor % retain.len()]);
            r_cursor += 1;
        }
        let losses = kuda_losses(
            model_un,
            reference,
            chunk,
            &r_idx,
            &cfg.layers,
            cfg.beta,
            true,
        )?;
        if !losses.l_u().is_finite() {
            return Err(Error::Diverged {
                step,
                batch: b,
                detail: format!("L_f {} L_r {}", losses.l_f, losses.l_r),
            });
        }
        let mut pf = Vec::with_capacity(cfg.layers.len());
        let mut pr = Vec::with_capacity(cfg.layers.len());
        let mut gps = Vec::with_capacity(cfg.layers.len());
        let mut norms = Vec::with_capacity(cfg.layers.len());
        for (i, proj) in projectors.iter().enumerate() {
            let g = losses.grad_f[i].add(&losses.grad_r[i])?;
            let gf = project_gradient(&losses.grad_f[i], proj)?;
            let gr = project_gradient(&losses.grad_r[i], proj)?;
            let gp = gf.add(&gr)?;
            norms.push((proj.layer, g.norm(), gp.norm()));
            gps.push(gp);
            pf.push(gf);
            pr.push(gr);
        }
        let total = norms
            .iter()
            .map(|&(_, raw, _)| raw * raw)
            .sum::<f64>()
            .sqrt();
        let scale = match (cfg.normalize_step, total > 0.0) {
            (true, true) => cfg.lr / total,
            (true, false) => 0.0,
            (false, _) => cfg.lr,
        };
        if scale > 0.0 {
            for (proj, gp) in projectors.iter().zip(&gps) {
                model_un
                    .param_mut(model_un.w_out_id(proj.layer))
                    .add_assign_scaled(gp, -scale);
            }
        }
        out.push(StepMetrics {
            step,
            epoch,
            l_f: losses.l_f,
            l_r: losses.l_r,
            l_u: losses.l_u(),
            angle_deg: angle_or_none(&losses.grad_f, &losses.grad_r),
            angle_projected_deg: angle_or_none(&pf, &pr),
            grad_norms: norms,
        });
    }
    Ok(out)
}

/// Seeded in-null-space perturbation of every updated matrix.
pub fn perturb_start(
    model_un: &mut ToyTransformer,
    projectors: &[RelaxedProjector],
    jitter: f64,
    seed: u64,
) -> Result<()> {
    if jitter == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));
    for proj in projectors {
        let id = model_un.w_out_id(proj.layer);
        let w = model_un.param(id);
        let rms = (w.dot(w) / w.len() as f64).sqrt();
        let normal = Normal::new(0.0, jitter * rms).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut noise = Tensor::zeros(w.shape());
        for v in noise.data_mut() {
            *v = normal.sample(&mut rng);
        }
        let noise = project_gradient(&noise, proj)?;
        model_un.param_mut(id).add_assign_scaled(&noise, 1.0);
    }
    Ok(())
}

/// Covariance spectra of the retained keys at every unlearning layer.
pub fn retain_spectra(
    model_ori: &ToyTransformer,
    world: &FactWorld,
    layers: &[usize],
    sample_ratio: f64,
    seed: u64,
) -> Result<Vec<FeatureSpectrum>> {
    let retain = world.indices(Split::Retain);
    let picked = sample_retain(retain.len(), sample_ratio, seed)?;
    let seqs: Vec<Vec<usize>> = picked
        .iter()
        .flat_map(|&j| {
            let i = retain[j];
            [world.statement(i), world.qa_sequence(i)]
        })
        .collect();
    capture_features(model_ori, &seqs, layers)?
        .iter()
        .map(FeatureCovariance::spectrum)
        .collect()
}

#[derive(Clone, Debug)]
pub struct KudaRun {
    pub model: ToyTransformer,
    pub steps: Vec<StepMetrics>,
    /// Admitted subspace dimension per unlearning layer.
    pub null_dims: Vec<usize>,
}

impl KudaRun {
    pub fn mean_angle(&self) -> Option<f64> {
        let a: Vec<f64> = self.steps.iter().filter_map(|s| s.angle_deg).collect();
        (!a.is_empty()).then(|| a.iter().sum::<f64>() / a.len() as f64)
    }
}

/// Raw eigenvalue threshold used for `spectrum` under `cfg`.
pub fn effective_tau(spectrum: &FeatureSpectrum, cfg: &UnlearnConfig) -> f64 {
    if cfg.relative_tau {
        cfg.tau * spectrum.trace()
    } else {
        cfg.tau
    }
}

/// Full unlearning run from precomputed retained-key spectra.
pub fn run_kuda(
    model_ori: &ToyTransformer,
    reference: &KudaReference,
    cfg: &UnlearnConfig,
    spectra: &[FeatureSpectrum],
) -> Result<KudaRun> {
    cfg.validate(model_ori.config().n_layers)?;
    let projectors: Vec<RelaxedProjector> = cfg
        .layers
        .iter()
        .map(|&l| {
            spectra
                .iter()
                .find(|s| s.layer == l)
                .ok_or_else(|| Error::Invalid(format!("no feature spectrum for layer {l}")))
                .and_then(|s| s.projector(effective_tau(s, cfg)))
        })
        .collect::<Result<_>>()?;
    let mut model = model_ori.clone();
    perturb_start(&mut model, &projectors, cfg.init_jitter, cfg.seed)?;
    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs {
        let s = kuda_epoch(&mut model, reference, cfg, &projectors, epoch, steps.len())?;
        steps.extend(s);
    }
    Ok(KudaRun {
        model,
        steps,
        null_dims: projectors.iter().map(|p| p.null_dim).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forgetting_loss_examples() {
        let r = Tensor::matrix(2, 2, vec![1.0, 2.0, -0.5, 3.0]).unwrap();
        assert!((forgetting_loss(&r, &r, 2.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let neg = r.scale(-1.0);
        let want = -2.0 * log_sigmoid(2.0);
        assert!((forgetting_loss(&neg, &r, 1.0).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.2538).abs() < 1e-4);
        // one row identical, one reversed
        let mixed = Tensor::matrix(2, 2, vec![1.0, 2.0, 0.5, -3.0]).unwrap();
        let terms = [-2.0 * log_sigmoid(0.0), -2.0 * log_sigmoid(2.0)];
        let want = 0.5 * (terms[0] + terms[1]);
        assert!((forgetting_loss(&mixed, &r, 1.0).unwrap() - want).abs() < 1e-12);
        assert!((terms[0] - 1.3863).abs() < 5e-5);
    }

    #[test]
    fn forgetting_loss_rejects_zero_original_row() {
        let a = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(forgetting_loss(&a, &Tensor::zeros(&[1, 2]), 1.0).is_err());
    }

    #[test]
    fn retaining_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(retaining_loss(&a, &a).unwrap(), 0.0);
        let off = a.map(|x| x + 0.1);
        assert!((retaining_loss(&off, &a).unwrap() - 0.01).abs() < 1e-12);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut flat = 0.0;
        for i in 0..12 {
            flat += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((retaining_loss(&a, &b).unwrap() - flat / 12.0).abs() < 1e-12);
        assert!(retaining_loss(&a, &Tensor::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn objective_is_plain_sum() {
        assert_eq!(unlearn_objective(0.69, 0.0), 0.69);
        assert!((unlearn_objective(0.69, 0.01) - 0.70).abs() < 1e-15);
    }

    #[test]
    fn angle_examples() {
        let g = [1.0, -2.0, 0.5];
        assert_eq!(gradient_angle(&g, &g).unwrap(), 0.0);
        assert_eq!(gradient_angle(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 90.0);
        assert_eq!(gradient_angle(&g, &[-1.0, 2.0, -0.5]).unwrap(), 180.0);
        assert!(gradient_angle(&g, &[0.0; 3]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = UnlearnConfig {
            layers: vec![2, 3, 4],
            ..UnlearnConfig::default()
        };
        c.validate(6).unwrap();
        assert!(c.validate(4).is_err());
        c.layers = vec![2, 4];
        assert!(c.validate(6).is_err());
        c.layers = vec![1];
        c.beta = 0.0;
        assert!(c.validate(6).is_err());
    }
}
