//! Decoder-only toy transformer with per-component activation capture.
//!
//! Pre-normalization wiring per layer:
//!
//! ```text
//! mhsa  = Attn(RMSNorm(h_prev)) · Wo
//! mid   = h_prev + mhsa
//! key   = ReLU(RMSNorm(mid) · W_in)                      (classic)
//!       | Swish(RMSNorm(mid) · W_gate) ⊙ (RMSNorm(mid) · W_up)   (gated)
//! ffn   = key · W_out
//! h     = mid + ffn
//! ```
//!
//! The output head is tied to the token embedding.

mod checkpoint;
mod ffn;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, ParamId, Segment, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use ffn::{ffn_classic, ffn_gated, swish, KeyValue};

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnVariant {
    Classic,
    Gated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ffn_variant: FfnVariant,
    pub seed: u64,
    /// Standard deviation of the Gaussian weight initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 128,
            max_seq_len: 32,
            ffn_variant: FfnVariant::Gated,
            seed: 0,
            init_std: default_init_std(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Invalid("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.push((p("attn_norm"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((p(w), vec![d, d]));
            }
            out.push((p("ffn_norm"), vec![d]));
            match self.ffn_variant {
                FfnVariant::Classic => {
                    out.push((p("w_in"), vec![d, f]));
                    out.push((p("w_out"), vec![f, d]));
                }
                FfnVariant::Gated => {
                    out.push((p("w_gate"), vec![d, f]));
                    out.push((p("w_up"), vec![d, f]));
                    out.push((p("w_down"), vec![f, d]));
                }
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out
    }

    fn per_layer(&self) -> usize {
        match self.ffn_variant {
            FfnVariant::Classic => 8,
            FfnVariant::Gated => 9,
        }
    }
}

/// Which activation a capture or patch refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Mhsa,
    Ffn,
    /// Residual-stream state after the layer.
    Layer,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Mhsa, Component::Ffn, Component::Layer];

    pub fn name(self) -> &'static str {
        match self {
            Component::Mhsa => "MHSA",
            Component::Ffn => "FFN",
            Component::Layer => "Layer",
        }
    }
}

/// Overwrite one activation row with a replacement before propagation
/// continues. `token` indexes the position within the sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub component: Component,
    pub layer: usize,
    pub token: usize,
    pub value: Vec<f64>,
}

/// Patch addressed by absolute row in a stacked batch.
#[derive(Clone, Debug)]
pub struct RowPatch {
    pub component: Component,
    pub layer: usize,
    pub row: usize,
    pub value: Vec<f64>,
}

/// Token sequences stacked row-wise.
#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl Batch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            segments.push(Segment {
                start: tokens.len(),
                len: s.len(),
            });
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        Self {
            tokens,
            positions,
            segments,
        }
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Absolute row of the last token of every sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.start + s.len - 1).collect()
    }

    /// Next-token targets: row `i` predicts token `i + 1` of its sequence.
    pub fn next_token_targets(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.rows()];
        for s in &self.segments {
            for i in 0..s.len.saturating_sub(1) {
                out[s.start + i] = Some(self.tokens[s.start + i + 1]);
            }
        }
        out
    }
}

/// Perturbations applied during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Intervention {
    /// Added to the input embeddings (rows × d_model).
    pub noise: Option<Tensor>,
    pub patches: Vec<RowPatch>,
}

/// Tape handles for every captured activation of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub embed: Var,
    pub mhsa_out: Vec<Var>,
    pub ffn_out: Vec<Var>,
    pub ffn_key: Vec<Var>,
    pub layer_out: Vec<Var>,
    /// `None` when the pass stopped before the output head.
    pub logits: Option<Var>,
}

/// Per-layer, per-token activations of a single forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    /// Input embeddings (token + position), the residual state before layer 0.
    pub embed: Tensor,
    pub mhsa_out: Vec<Tensor>,
    pub ffn_out: Vec<Tensor>,
    pub layer_out: Vec<Tensor>,
    pub ffn_key: Vec<Tensor>,
    pub logits: Tensor,
    pub probs: Tensor,
}

impl ActivationRecord {
    pub fn component(&self, c: Component, layer: usize) -> &Tensor {
        match c {
            Component::Mhsa => &self.mhsa_out[layer],
            Component::Ffn => &self.ffn_out[layer],
            Component::Layer => &self.layer_out[layer],
        }
    }

    /// Rebuild every residual state from the captured sublayer outputs.
    pub fn recompute_layer_out(&self) -> Vec<Tensor> {
        let mut prev = self.embed.clone();
        let mut out = Vec::with_capacity(self.layer_out.len());
        for (m, f) in self.mhsa_out.iter().zip(&self.ffn_out) {
            let h = prev.add(m).and_then(|t| t.add(f)).expect("shapes");
            out.push(h.clone());
            prev = h;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTransformer {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl ToyTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let params = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                if shape.len() == 1 {
                    Tensor::full(&shape, 1.0)
                } else {
                    let residual_out = name.ends_with(".wo")
                        || name.ends_with(".w_out")
                        || name.ends_with(".w_down");
                    let std = if residual_out {
                        config.init_std * out_scale
                    } else {
                        config.init_std
                    };
                    Tensor::randn(&shape, std, &mut rng)
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.len() {
            return Err(Error::Shape("parameter count does not match config".into()));
        }
        for ((name, shape), t) in layout.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config
            .param_layout()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.config
            .param_layout()
            .iter()
            .position(|(n, _)| n == name)
            .map(ParamId)
    }

    fn layer_base(&self, layer: usize) -> usize {
        2 + layer * self.config.per_layer()
    }

    /// The FFN output matrix (`W_out`, or `W_down` for the gated variant).
    pub fn w_out_id(&self, layer: usize) -> ParamId {
        ParamId(self.layer_base(layer) + self.config.per_layer() - 1)
    }

    /// Every parameter of the FFN sublayer at `layer` (norm gain excluded).
    pub fn ffn_param_ids(&self, layer: usize) -> Vec<ParamId> {
        let base = self.layer_base(layer) + 6;
        (base..self.layer_base(layer) + self.config.per_layer())
            .map(ParamId)
            .collect()
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::TooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::OutOfVocab {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Record a forward pass on `tape`. Parameters for which `trainable`
    /// returns true become differentiable leaves, the rest constants.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        trainable: &dyn Fn(ParamId) -> bool,
        intervention: &Intervention,
    ) -> Result<ForwardVars> {
        self.record(tape, batch, trainable, intervention, self.config.n_layers)
    }

    /// As [`Self::forward_on_tape`], stopping after layer `last` (no head).
    pub fn forward_through_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        trainable: &dyn Fn(ParamId) -> bool,
        intervention: &Intervention,
        last: usize,
    ) -> Result<ForwardVars> {
        if last >= self.config.n_layers {
            return Err(Error::Invalid(format!(
                "layer {last} outside {} layers",
                self.config.n_layers
            )));
        }
        self.record(tape, batch, trainable, intervention, last + 1)
    }

    fn record(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        trainable: &dyn Fn(ParamId) -> bool,
        intervention: &Intervention,
        depth: usize,
    ) -> Result<ForwardVars> {
        for s in &batch.segments {
            self.check_tokens(&batch.tokens[s.start..s.start + s.len])?;
        }
        let cfg = &self.config;
        for p in &intervention.patches {
            if p.layer >= cfg.n_layers || p.row >= batch.rows() || p.value.len() != cfg.d_model {
                return Err(Error::Patch(format!(
                    "{} patch at layer {} row {} (len {}) is out of range",
                    p.component.name(),
                    p.layer,
                    p.row,
                    p.value.len()
                )));
            }
        }
        let vars: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let id = ParamId(i);
                if trainable(id) {
                    tape.param(id, t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();

        let tok = tape.embedding(vars[0], batch.tokens.clone())?;
        let pos = tape.embedding(vars[1], batch.positions.clone())?;
        let mut h = tape.add(tok, pos)?;
        if let Some(noise) = &intervention.noise {
            if noise.rows() != batch.rows() || noise.cols() != cfg.d_model {
                return Err(Error::Shape(format!(
                    "noise {:?} for {} rows of width {}",
                    noise.shape(),
                    batch.rows(),
                    cfg.d_model
                )));
            }
            let n = tape.constant(noise.clone());
            h = tape.add(h, n)?;
        }
        let embed = h;

        let patch = |tape: &mut Tape, x: Var, c: Component, l: usize| -> Result<Var> {
            let hits: Vec<&RowPatch> = intervention
                .patches
                .iter()
                .filter(|p| p.component == c && p.layer == l)
                .collect();
            if hits.is_empty() {
                return Ok(x);
            }
            let rows = hits.iter().map(|p| p.row).collect();
            let values =
                Tensor::from_rows(&hits.iter().map(|p| p.value.clone()).collect::<Vec<_>>())?;
            tape.replace_rows(x, rows, values)
        };

        let mut fv = ForwardVars {
            embed,
            mhsa_out: Vec::with_capacity(cfg.n_layers),
            ffn_out: Vec::with_capacity(cfg.n_layers),
            ffn_key: Vec::with_capacity(cfg.n_layers),
            layer_out: Vec::with_capacity(cfg.n_layers),
            logits: None,
        };
        for l in 0..depth {
            let b = self.layer_base(l);
            let a_in = tape.rms_norm(h, vars[b], NORM_EPS)?;
            let q = tape.matmul(a_in, vars[b + 1])?;
            let k = tape.matmul(a_in, vars[b + 2])?;
            let v = tape.matmul(a_in, vars[b + 3])?;
            let att = tape.causal_attention(q, k, v, cfg.n_heads, batch.segments.clone())?;
            let mhsa = tape.matmul(att, vars[b + 4])?;
            let mhsa = patch(tape, mhsa, Component::Mhsa, l)?;
            let mid = tape.add(h, mhsa)?;
            let f_in = tape.rms_norm(mid, vars[b + 5], NORM_EPS)?;
            let (key, w_out) = match cfg.ffn_variant {
                FfnVariant::Classic => {
                    let pre = tape.matmul(f_in, vars[b + 6])?;
                    (tape.relu(pre)?, vars[b + 7])
                }
                FfnVariant::Gated => {
                    let gate = tape.matmul(f_in, vars[b + 6])?;
                    let gate = tape.silu(gate)?;
                    let up = tape.matmul(f_in, vars[b + 7])?;
                    (tape.mul(gate, up)?, vars[b + 8])
                }
            };
            let ffn = tape.matmul(key, w_out)?;
            let ffn = patch(tape, ffn, Component::Ffn, l)?;
            let out = tape.add(mid, ffn)?;
            h = patch(tape, out, Component::Layer, l)?;
            fv.mhsa_out.push(mhsa);
            fv.ffn_out.push(ffn);
            fv.ffn_key.push(key);
            fv.layer_out.push(h);
        }
        if depth == cfg.n_layers {
            let last = vars.len() - 1;
            let fin = tape.rms_norm(h, vars[last], NORM_EPS)?;
            fv.logits = Some(tape.matmul_bt(fin, vars[0])?);
        }
        Ok(fv)
    }

    /// Inference-only forward of a stacked batch, returning the full record.
    pub fn forward_batch(
        &self,
        batch: &Batch,
        intervention: &Intervention,
    ) -> Result<ActivationRecord> {
        let mut tape = Tape::new();
        let fv = self.forward_on_tape(&mut tape, batch, &|_| false, intervention)?;
        let take = |vs: &[Var]| {
            vs.iter()
                .map(|&v| tape.value(v).clone())
                .collect::<Vec<_>>()
        };
        let logits = tape.value(fv.logits.expect("full pass")).clone();
        let probs = Tensor::new(logits.shape().to_vec(), softmax_rows(&logits))?;
        Ok(ActivationRecord {
            embed: tape.value(fv.embed).clone(),
            mhsa_out: take(&fv.mhsa_out),
            ffn_out: take(&fv.ffn_out),
            layer_out: take(&fv.layer_out),
            ffn_key: take(&fv.ffn_key),
            logits,
            probs,
        })
    }

    /// Logits only, for evaluation loops.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fv = self.forward_on_tape(&mut tape, batch, &|_| false, &Intervention::default())?;
        Ok(tape.value(fv.logits.expect("full pass")).clone())
    }

    /// Next-token probability rows and every intermediate activation.
    pub fn forward_with_capture(&self, tokens: &[usize]) -> Result<(Tensor, ActivationRecord)> {
        let rec = self.forward_batch(&Batch::new(&[tokens]), &Intervention::default())?;
        Ok((rec.probs.clone(), rec))
    }

    /// Forward with additive embedding noise, overwriting the listed
    /// activations before they propagate.
    pub fn forward_patched(
        &self,
        tokens: &[usize],
        noise: &Tensor,
        patches: &[Patch],
    ) -> Result<Tensor> {
        let n = self.config.n_layers;
        let row_patches = patches
            .iter()
            .map(|p| {
                if p.layer >= n || p.token >= tokens.len() {
                    return Err(Error::Patch(format!(
                        "{} at layer {} token {} is outside {} layers × {} tokens",
                        p.component.name(),
                        p.layer,
                        p.token,
                        n,
                        tokens.len()
                    )));
                }
                Ok(RowPatch {
                    component: p.component,
                    layer: p.layer,
                    row: p.token,
                    value: p.value.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = self.forward_batch(
            &Batch::new(&[tokens]),
            &Intervention {
                noise: Some(noise.clone()),
                patches: row_patches,
            },
        )?;
        Ok(rec.probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small(variant: FfnVariant) -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 20,
            max_seq_len: 8,
            ffn_variant: variant,
            seed: 11,
            init_std: 0.3,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small(FfnVariant::Classic);
        c.n_heads = 3;
        assert!(ToyTransformer::new(c.clone()).is_err());
        c.n_heads = 2;
        c.d_ff = 0;
        assert!(ToyTransformer::new(c).is_err());
    }

    #[test]
    fn probabilities_are_normalized_and_deterministic() {
        for v in [FfnVariant::Classic, FfnVariant::Gated] {
            let m = ToyTransformer::new(small(v)).unwrap();
            let toks = [1, 5, 7, 2, 19];
            let (p, rec) = m.forward_with_capture(&toks).unwrap();
            for r in 0..p.rows() {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let (p2, rec2) = m.forward_with_capture(&toks).unwrap();
            assert_eq!(p, p2);
            assert_eq!(rec, rec2);
        }
    }

    #[test]
    fn residual_recomputation_is_exact() {
        for v in [FfnVariant::Classic, FfnVariant::Gated] {
            let m = ToyTransformer::new(small(v)).unwrap();
            let (_, rec) = m.forward_with_capture(&[3, 4, 5, 6]).unwrap();
            assert_eq!(rec.recompute_layer_out(), rec.layer_out);
        }
    }

    #[test]
    fn captured_key_matches_standalone_ffn() {
        let m = ToyTransformer::new(small(FfnVariant::Classic)).unwrap();
        let (_, rec) = m.forward_with_capture(&[3, 4, 5]).unwrap();
        // Rebuild layer 1's FFN input by hand: RMSNorm(h0 + mhsa1) · gain.
        let mid = rec.layer_out[0].add(&rec.mhsa_out[1]).unwrap();
        let gain = m.param(m.param_id("layers.1.ffn_norm").unwrap());
        let w_in = m.param(m.param_id("layers.1.w_in").unwrap());
        let w_out = m.param(m.w_out_id(1));
        for r in 0..3 {
            let row = mid.row(r);
            let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
            let ir = 1.0 / (ms + NORM_EPS).sqrt();
            let h: Vec<f64> = row
                .iter()
                .zip(gain.data())
                .map(|(x, g)| x * ir * g)
                .collect();
            let kv = ffn_classic(&h, w_in, w_out).unwrap();
            for (a, b) in kv.key.iter().zip(rec.ffn_key[1].row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in kv.value.iter().zip(rec.ffn_out[1].row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_noise_no_patches_is_identity() {
        let m = ToyTransformer::new(small(FfnVariant::Gated)).unwrap();
        let toks = [2, 9, 4];
        let (p, _) = m.forward_with_capture(&toks).unwrap();
        let q = m
            .forward_patched(&toks, &Tensor::zeros(&[3, 16]), &[])
            .unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn full_restoration_recovers_clean_output() {
        let m = ToyTransformer::new(small(FfnVariant::Classic)).unwrap();
        let toks = [2, 9, 4, 7];
        let (clean, rec) = m.forward_with_capture(&toks).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Tensor::randn(&[4, 16], 1.0, &mut rng);
        let corrupted = m.forward_patched(&toks, &noise, &[]).unwrap();
        assert_ne!(corrupted.row(3), clean.row(3));

        let all: Vec<Patch> = (0..3)
            .flat_map(|l| {
                let rec = &rec;
                (0..4).map(move |i| Patch {
                    component: Component::Layer,
                    layer: l,
                    token: i,
                    value: rec.layer_out[l].row(i).to_vec(),
                })
            })
            .collect();
        let restored = m.forward_patched(&toks, &noise, &all).unwrap();
        assert_eq!(restored.row(3), clean.row(3));

        let last = Patch {
            component: Component::Layer,
            layer: 2,
            token: 3,
            value: rec.layer_out[2].row(3).to_vec(),
        };
        let restored = m.forward_patched(&toks, &noise, &[last]).unwrap();
        assert_eq!(restored.row(3), clean.row(3));
    }

    #[test]
    fn input_validation() {
        let m = ToyTransformer::new(small(FfnVariant::Classic)).unwrap();
        assert!(matches!(
            m.forward_with_capture(&[1, 20]),
            Err(Error::OutOfVocab { token: 20, .. })
        ));
        assert!(matches!(
            m.forward_with_capture(&[1; 9]),
            Err(Error::TooLong { len: 9, max: 8 })
        ));
        let bad = Patch {
            component: Component::Ffn,
            layer: 3,
            token: 0,
            value: vec![0.0; 16],
        };
        assert!(matches!(
            m.forward_patched(&[1, 2], &Tensor::zeros(&[2, 16]), &[bad]),
            Err(Error::Patch(_))
        ));
    }

    #[test]
    fn outputs_finite_for_large_inputs() {
        let m = ToyTransformer::new(small(FfnVariant::Gated)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Tensor::randn(&[3, 16], 250.0, &mut rng);
        let p = m.forward_patched(&[1, 2, 3], &noise, &[]).unwrap();
        assert!(p.is_finite());
        let w = Tensor::randn(&[16, 32], 1.0, &mut rng);
        let wd = Tensor::randn(&[32, 16], 1.0, &mut rng);
        let h: Vec<f64> = (0..16)
            .map(|i| if i % 2 == 0 { 250.0 } else { -250.0 })
            .collect();
        assert!(ffn_gated(&h, &w, &w, &wd)
            .unwrap()
            .value
            .iter()
            .all(|v| v.is_finite()));
        assert!(ffn_classic(&h, &w, &wd)
            .unwrap()
            .value
            .iter()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn w_out_ids_point_at_output_matrices() {
        for v in [FfnVariant::Classic, FfnVariant::Gated] {
            let m = ToyTransformer::new(small(v)).unwrap();
            let names = m.param_names();
            for l in 0..3 {
                let n = &names[m.w_out_id(l).0];
                assert!(n == &format!("layers.{l}.w_out") || n == &format!("layers.{l}.w_down"));
                let ffn: Vec<&String> = m.ffn_param_ids(l).iter().map(|id| &names[id.0]).collect();
                assert!(ffn.iter().all(|n| n.starts_with(&format!("layers.{l}.w_"))));
            }
        }
    }
}
