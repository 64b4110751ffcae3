//! Gradient-ascent family, preference-optimization and representation-
//! misdirection baselines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{angle_or_none, StepMetrics};
use crate::corpus::{FactWorld, RmsProp, Split};
use crate::error::{Error, Result};
use crate::model::{Batch, Intervention, ToyTransformer};
use crate::numerics::{ParamId, Segment, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Ga,
    GradDiff,
    Npo,
    SimNpo,
    Rmu,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Ga => "ga",
            BaselineMethod::GradDiff => "graddiff",
            BaselineMethod::Npo => "npo",
            BaselineMethod::SimNpo => "simnpo",
            BaselineMethod::Rmu => "rmu",
        }
    }
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "ga" => BaselineMethod::Ga,
            "graddiff" | "grad_diff" | "gd" => BaselineMethod::GradDiff,
            "npo" => BaselineMethod::Npo,
            "simnpo" => BaselineMethod::SimNpo,
            "rmu" => BaselineMethod::Rmu,
            _ => return Err(Error::Invalid(format!("unknown method {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// Weight of the retain term (ignored by plain GA).
    pub alpha: f64,
    pub beta_npo: f64,
    /// Scale of the misdirection target.
    pub rmu_c: f64,
    pub rmu_layer: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            method: BaselineMethod::GradDiff,
            alpha: 1.0,
            beta_npo: 0.1,
            rmu_c: 6.5,
            rmu_layer: 7,
            lr: 1e-3,
            epochs: 5,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.lr >= 0.0) {
            return Err(Error::Invalid("alpha and lr must be non-negative".into()));
        }
        if !(self.beta_npo > 0.0) || !(self.rmu_c > 0.0) {
            return Err(Error::Invalid("beta_npo and rmu_c must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if self.method == BaselineMethod::Rmu && self.rmu_layer >= n_layers {
            return Err(Error::Invalid(format!(
                "RMU layer {} outside {n_layers} layers",
                self.rmu_layer
            )));
        }
        Ok(())
    }

    /// Parameters the method updates.
    pub fn trainable(&self, model: &ToyTransformer) -> Vec<ParamId> {
        match self.method {
            BaselineMethod::Rmu => (self.rmu_layer.saturating_sub(2)..=self.rmu_layer)
                .flat_map(|l| model.ffn_param_ids(l))
                .collect(),
            _ => (0..model.params().len()).map(ParamId).collect(),
        }
    }
}

/// Fixed misdirection target `c · u` with `u` uniform on the unit sphere.
pub fn rmu_direction(d: usize, c: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xD1EC));
    let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = crate::numerics::norm(&u);
    u.into_iter().map(|x| c * x / n).collect()
}

/// Per-sequence summed next-token log-probability, `m×1`.
fn seq_log_probs(tape: &mut Tape, logits: Var, batch: &Batch) -> Result<Var> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut segs = Vec::new();
    for s in &batch.segments {
        segs.push(Segment {
            start: rows.len(),
            len: s.len - 1,
        });
        for i in 0..s.len - 1 {
            rows.push(s.start + i);
            targets.push(batch.tokens[s.start + i + 1]);
        }
    }
    let picked = tape.gather_rows(logits, rows)?;
    let lp = tape.target_log_prob(picked, targets)?;
    tape.segment_sum(lp, segs)
}

fn ref_seq_log_probs(reference: &ToyTransformer, batch: &Batch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fv = reference.forward_on_tape(&mut tape, batch, &|_| false, &Intervention::default())?;
    let v = seq_log_probs(&mut tape, fv.logits.expect("full pass"), batch)?;
    Ok(tape.value(v).clone())
}

/// Record the method's forgetting term and (weighted) retain term.
#[allow(clippy::too_many_arguments)]
fn record(
    tape: &mut Tape,
    cfg: &BaselineConfig,
    model_un: &ToyTransformer,
    reference: Option<&ToyTransformer>,
    direction: &[f64],
    batch_f: &[Vec<usize>],
    batch_r: &[Vec<usize>],
    trainable: &[ParamId],
) -> Result<(Var, Option<Var>)> {
    if batch_f.is_empty() {
        return Err(Error::Invalid("empty forget batch".into()));
    }
    let needs_ref = matches!(cfg.method, BaselineMethod::Npo | BaselineMethod::Rmu);
    if needs_ref && reference.is_none() {
        return Err(Error::MissingReference(format!(
            "{} needs a frozen reference model",
            cfg.method.name()
        )));
    }
    let is_trainable = |id: ParamId| trainable.contains(&id);
    let bf = Batch::new(batch_f);
    let br = Batch::new(batch_r);
    let beta = cfg.beta_npo;

    if cfg.method == BaselineMethod::Rmu {
        let l = cfg.rmu_layer;
        let fv = model_un.forward_through_on_tape(
            tape,
            &bf,
            &is_trainable,
            &Intervention::default(),
            l,
        )?;
        let target = Tensor::from_rows(&vec![direction.to_vec(); bf.rows()])?;
        let target = tape.constant(target);
        let d = tape.sub(fv.layer_out[l], target)?;
        let sq = tape.square(d)?;
        let forget = tape.mean_all(sq)?;
        let retain = if batch_r.is_empty() || cfg.alpha == 0.0 {
            None
        } else {
            let a_r = reference
                .expect("checked")
                .forward_batch(&br, &Intervention::default())?
                .layer_out[l]
                .clone();
            let fv = model_un.forward_through_on_tape(
                tape,
                &br,
                &is_trainable,
                &Intervention::default(),
                l,
            )?;
            let a_r = tape.constant(a_r);
            let d = tape.sub(fv.layer_out[l], a_r)?;
            let sq = tape.square(d)?;
            let m = tape.mean_all(sq)?;
            Some(tape.scale(m, cfg.alpha)?)
        };
        return Ok((forget, retain));
    }

    let fv = model_un.forward_on_tape(tape, &bf, &is_trainable, &Intervention::default())?;
    let logits = fv.logits.expect("full pass");
    let forget = match cfg.method {
        BaselineMethod::Ga | BaselineMethod::GradDiff => {
            let ce = tape.cross_entropy(logits, bf.next_token_targets())?;
            tape.scale(ce, -1.0)?
        }
        BaselineMethod::Npo => {
            let lp = seq_log_probs(tape, logits, &bf)?;
            let lp_ref = tape.constant(ref_seq_log_probs(reference.expect("checked"), &bf)?);
            let ratio = tape.sub(lp, lp_ref)?;
            let x = tape.scale(ratio, -beta)?;
            let ls = tape.log_sigmoid(x)?;
            let m = tape.mean_all(ls)?;
            tape.scale(m, -2.0 / beta)?
        }
        BaselineMethod::SimNpo => {
            let lp = seq_log_probs(tape, logits, &bf)?;
            let w: Vec<f64> = bf
                .segments
                .iter()
                .map(|s| -beta / (s.len - 1).max(1) as f64)
                .collect();
            let w = tape.constant(Tensor::matrix(w.len(), 1, w)?);
            let x = tape.mul(lp, w)?;
            let ls = tape.log_sigmoid(x)?;
            let m = tape.mean_all(ls)?;
            tape.scale(m, -2.0 / beta)?
        }
        BaselineMethod::Rmu => unreachable!(),
    };
    let retain = if cfg.method == BaselineMethod::Ga || batch_r.is_empty() || cfg.alpha == 0.0 {
        None
    } else {
        let fv = model_un.forward_on_tape(tape, &br, &is_trainable, &Intervention::default())?;
        let ce = tape.cross_entropy(fv.logits.expect("full pass"), br.next_token_targets())?;
        Some(tape.scale(ce, cfg.alpha)?)
    };
    Ok((forget, retain))
}

/// Value of the method's loss on one forget/retain batch pair.
pub fn baseline_loss(
    cfg: &BaselineConfig,
    model_un: &ToyTransformer,
    reference: Option<&ToyTransformer>,
    batch_f: &[Vec<usize>],
    batch_r: &[Vec<usize>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let direction = rmu_direction(model_un.config().d_model, cfg.rmu_c, cfg.seed);
    let (f, r) = record(
        &mut tape,
        cfg,
        model_un,
        reference,
        &direction,
        batch_f,
        batch_r,
        &[],
    )?;
    Ok(tape.scalar(f) + r.map_or(0.0, |r| tape.scalar(r)))
}

#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub model: ToyTransformer,
    pub steps: Vec<StepMetrics>,
}

/// Train `model_ori`'s copy with the baseline objective under the adaptive
/// optimizer used for pretraining.
pub fn run_baseline(
    model_ori: &ToyTransformer,
    world: &FactWorld,
    cfg: &BaselineConfig,
) -> Result<BaselineRun> {
    cfg.validate(model_ori.config().n_layers)?;
    let forget = world.sequences(&[Split::Forget]);
    let retain = world.sequences(&[Split::Retain]);
    if forget.is_empty() {
        return Err(Error::Invalid("empty forgetting set".into()));
    }
    let mut model = model_ori.clone();
    let trainable = cfg.trainable(&model);
    let direction = rmu_direction(model.config().d_model, cfg.rmu_c, cfg.seed);
    let mut opt = RmsProp::new(
        cfg.lr,
        trainable.iter().map(|&id| model.param(id).shape().to_vec()),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut r_order: Vec<usize> = (0..retain.len()).collect();
    let mut r_cursor = 0;
    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut f_order: Vec<usize> = (0..forget.len()).collect();
        f_order.shuffle(&mut rng);
        r_order.shuffle(&mut rng);
        for (b, chunk) in f_order.chunks(cfg.batch_size).enumerate() {
            let step = steps.len();
            let bf: Vec<Vec<usize>> = chunk.iter().map(|&i| forget[i].clone()).collect();
            let mut br = Vec::new();
            while !r_order.is_empty() && br.len() < cfg.batch_size.min(r_order.len()) {
                br.push(retain[r_order[r_cursor % r_order.len()]].clone());
                r_cursor += 1;
            }
            let mut tape = Tape::new();
            let (f, r) = record(
                &mut tape,
                cfg,
                &model,
                Some(model_ori),
                &direction,
                &bf,
                &br,
                &trainable,
            )?;
            let (lf, lr) = (tape.scalar(f), r.map_or(0.0, |r| tape.scalar(r)));
            if !(lf + lr).is_finite() {
                return Err(Error::Diverged {
                    step,
                    batch: b,
                    detail: format!("{} loss {lf} + {lr}", cfg.method.name()),
                });
            }
            let gf: Vec<Tensor> = tape
                .backward(f)?
                .into_entries()
                .into_iter()
                .map(|e| e.1)
                .collect();
            let gr: Option<Vec<Tensor>> = match r {
                Some(r) => Some(
                    tape.backward(r)?
                        .into_entries()
                        .into_iter()
                        .map(|e| e.1)
                        .collect(),
                ),
                None => None,
            };
            let total: Vec<Tensor> = match &gr {
                Some(gr) => gf
                    .iter()
                    .zip(gr)
                    .map(|(a, b)| a.add(b))
                    .collect::<Result<_>>()?,
                None => gf.clone(),
            };
            let norms = vec![(0, total.iter().map(|t| t.dot(t)).sum::<f64>().sqrt(), 0.0)];
            let params = model.params_mut();
            let mut slots: Vec<Option<&mut Tensor>> = params.iter_mut().map(Some).collect();
            let pairs: Vec<(&mut Tensor, &Tensor)> = trainable
                .iter()
                .zip(&total)
                .map(|(id, g)| (slots[id.0].take().expect("distinct ids"), g))
                .collect();
            opt.step(pairs);
            steps.push(StepMetrics {
                step,
                epoch,
                l_f: lf,
                l_r: lr,
                l_u: lf + lr,
                angle_deg: gr.as_ref().and_then(|gr| angle_or_none(&gf, gr)),
                angle_projected_deg: None,
                grad_norms: norms,
            });
        }
    }
    Ok(BaselineRun { model, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FfnVariant, ModelConfig};

    fn model(seed: u64) -> ToyTransformer {
        ToyTransformer::new(ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 6,
            ffn_variant: FfnVariant::Gated,
            seed,
            init_std: 0.3,
        })
        .unwrap()
    }

    #[test]
    fn npo_identity_policy() {
        let m = model(1);
        for beta in [0.1, 1.0, 2.5] {
            let cfg = BaselineConfig {
                method: BaselineMethod::Npo,
                beta_npo: beta,
                alpha: 0.0,
                ..BaselineConfig::default()
            };
            let l = baseline_loss(&cfg, &m, Some(&m), &[vec![1, 2, 3], vec![4, 5]], &[]).unwrap();
            assert!((l - 2.0 / beta * std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn npo_and_rmu_need_reference() {
        let m = model(1);
        for method in [BaselineMethod::Npo, BaselineMethod::Rmu] {
            let cfg = BaselineConfig {
                method,
                rmu_layer: 1,
                ..BaselineConfig::default()
            };
            assert!(matches!(
                baseline_loss(&cfg, &m, None, &[vec![1, 2]], &[vec![3, 4]]),
                Err(Error::MissingReference(_))
            ));
        }
    }

    #[test]
    fn ga_is_negated_cross_entropy() {
        let m = model(2);
        let cfg = BaselineConfig {
            method: BaselineMethod::Ga,
            ..BaselineConfig::default()
        };
        let seqs = vec![vec![1, 2, 3]];
        let logits = m.logits(&Batch::new(&seqs)).unwrap();
        let lp = crate::eval::token_log_probs(&m, &seqs).unwrap();
        let nll = -(lp[0][0] + lp[0][1]) / 2.0;
        assert!(logits.is_finite());
        assert!((baseline_loss(&cfg, &m, None, &seqs, &[]).unwrap() + nll).abs() < 1e-12);
    }

    #[test]
    fn rmu_direction_is_scaled_unit_vector() {
        let u = rmu_direction(16, 6.5, 3);
        assert!((crate::numerics::norm(&u) - 6.5).abs() < 1e-12);
        assert_eq!(u, rmu_direction(16, 6.5, 3));
    }
}
