//! Causal tracing and unlearning-layer selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Component, Intervention, RowPatch, ToyTransformer};
use crate::numerics::Tensor;

/// A prompt and the token whose probability is traced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePrompt {
    pub tokens: Vec<usize>,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceCase {
    pub prompt: Vec<usize>,
    pub answer: usize,
    pub n_layers: usize,
    /// Answer probability at the final position, clean run.
    pub p_clean: f64,
    /// Same, corrupted run.
    pub p_corrupt: f64,
    /// Restored probabilities, indexed `[component][layer][token]` flat.
    pub restored: Vec<f64>,
    /// Corruption did not lower the answer probability.
    pub ineffective_noise: bool,
}

impl TraceCase {
    pub fn n_tokens(&self) -> usize {
        self.prompt.len()
    }

    fn index(&self, c: Component, layer: usize, token: usize) -> usize {
        let ci = Component::ALL
            .iter()
            .position(|&x| x == c)
            .expect("known component");
        (ci * self.n_layers + layer) * self.n_tokens() + token
    }

    pub fn restored(&self, c: Component, layer: usize, token: usize) -> f64 {
        self.restored[self.index(c, layer, token)]
    }
}

/// Standard deviation of all entries of the clean input embeddings.
pub fn embedding_std(model: &ToyTransformer, prompts: &[TracePrompt]) -> Result<f64> {
    let seqs: Vec<&[usize]> = prompts.iter().map(|p| p.tokens.as_slice()).collect();
    let rec = model.forward_batch(&Batch::new(&seqs), &Intervention::default())?;
    let d = rec.embed.data();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    Ok((d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt())
}

/// Clean, corrupted and corrupted-with-restoration runs for every prompt.
///
/// Noise of std `noise_scale · embedding_std` is added to every prompt
/// token's embedding; case `j` draws its noise from `seed + j`.
pub fn run_trace(
    model: &ToyTransformer,
    prompts: &[TracePrompt],
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<TraceCase>> {
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::Invalid(format!(
            "noise scale {noise_scale} must be non-negative"
        )));
    }
    if prompts.is_empty() {
        return Err(Error::Invalid("no trace prompts".into()));
    }
    let std = noise_scale * embedding_std(model, prompts)?;
    let cfg = model.config();
    let (n_layers, d) = (cfg.n_layers, cfg.d_model);
    let mut out = Vec::with_capacity(prompts.len());
    for (j, p) in prompts.iter().enumerate() {
        model.check_tokens(&p.tokens)?;
        if p.answer >= cfg.vocab_size {
            return Err(Error::OutOfVocab {
                token: p.answer,
                vocab: cfg.vocab_size,
            });
        }
        let t = p.tokens.len();
        let (clean_probs, clean) = model.forward_with_capture(&p.tokens)?;
        let p_clean = clean_probs.get(t - 1, p.answer);

        let mut noise = Tensor::zeros(&[t, d]);
        if std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(j as u64));
            let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
            for v in noise.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }

        // segment 0 is the corrupted run, then one segment per (m, l, i)
        let n_variants = 3 * n_layers * t;
        let seqs = vec![p.tokens.as_slice(); 1 + n_variants];
        let batch = Batch::new(&seqs);
        let stacked = Tensor::vstack(&vec![&noise; 1 + n_variants])?;
        let mut patches = Vec::with_capacity(n_variants);
        let mut v = 1;
        for c in Component::ALL {
            for l in 0..n_layers {
                for i in 0..t {
                    patches.push(RowPatch {
                        component: c,
                        layer: l,
                        row: v * t + i,
                        value: clean.component(c, l).row(i).to_vec(),
                    });
                    v += 1;
                }
            }
        }
        let rec = model.forward_batch(
            &batch,
            &Intervention {
                noise: Some(stacked),
                patches,
            },
        )?;
        let last = batch.last_rows();
        let p_corrupt = rec.probs.get(last[0], p.answer);
        let restored = last[1..]
            .iter()
            .map(|&r| rec.probs.get(r, p.answer))
            .collect();
        out.push(TraceCase {
            prompt: p.tokens.clone(),
            answer: p.answer,
            n_layers,
            p_clean,
            p_corrupt,
            restored,
            ineffective_noise: p_corrupt >= p_clean,
        });
    }
    Ok(out)
}

/// Mean restored-minus-corrupted probability per (layer, component).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeTable {
    pub n_layers: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub mhsa: Vec<f64>,
    pub ffn: Vec<f64>,
    pub layer: Vec<f64>,
}

impl CeTable {
    pub fn get(&self, c: Component) -> &[f64] {
        match c {
            Component::Mhsa => &self.mhsa,
            Component::Ffn => &self.ffn,
            Component::Layer => &self.layer,
        }
    }

    pub fn to_csv(&self) -> String {
        let rows = (0..self.n_layers).map(|l| {
            vec![
                l.to_string(),
                format!("{:.10}", self.mhsa[l]),
                format!("{:.10}", self.ffn[l]),
                format!("{:.10}", self.layer[l]),
            ]
        });
        crate::io::csv(&["layer", "CE_MHSA", "CE_FFN", "CE_Layer"], rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut cols: [Vec<f64>; 3] = Default::default();
        for (n, line) in text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .enumerate()
        {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 || f[0].trim().parse::<usize>().ok() != Some(n) {
                return Err(Error::Invalid(format!(
                    "malformed CE row {}: {line:?}",
                    n + 1
                )));
            }
            for (c, s) in cols.iter_mut().zip(&f[1..]) {
                c.push(
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Invalid(format!("bad CE value {s:?}")))?,
                );
            }
        }
        let [mhsa, ffn, layer] = cols;
        if ffn.is_empty() {
            return Err(Error::Invalid("empty CE table".into()));
        }
        Ok(Self {
            n_layers: ffn.len(),
            batch_size: 0,
            seq_len: 0,
            mhsa,
            ffn,
            layer,
        })
    }
}

pub fn causal_effect(traces: &[TraceCase]) -> Result<CeTable> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Invalid("causal effect of an empty trace list".into()))?;
    let (n_layers, t) = (first.n_layers, first.n_tokens());
    if let Some(c) = traces
        .iter()
        .find(|c| c.n_layers != n_layers || c.n_tokens() != t)
    {
        return Err(Error::Shape(format!(
            "trace geometry {}×{} differs from {}×{}",
            c.n_layers,
            c.n_tokens(),
            n_layers,
            t
        )));
    }
    let norm = 1.0 / (traces.len() * t) as f64;
    let mut cols: [Vec<f64>; 3] = Default::default();
    for (ci, c) in Component::ALL.iter().enumerate() {
        cols[ci] = (0..n_layers)
            .map(|l| {
                let s: f64 = traces
                    .iter()
                    .map(|case| {
                        (0..t)
                            .map(|i| case.restored(*c, l, i) - case.p_corrupt)
                            .sum::<f64>()
                    })
                    .sum();
                s * norm
            })
            .collect();
    }
    let [mhsa, ffn, layer] = cols;
    Ok(CeTable {
        n_layers,
        batch_size: traces.len(),
        seq_len: t,
        mhsa,
        ffn,
        layer,
    })
}

/// `|window ∩ top| / |window|`.
pub fn hit_ratio(window: &[usize], top: &[usize]) -> f64 {
    if window.is_empty() {
        return 0.0;
    }
    window.iter().filter(|l| top.contains(l)).count() as f64 / window.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Number of top-scoring candidate layers N.
    pub n_candidates: usize,
    /// Window size s.
    pub window: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            n_candidates: 10,
            window: 4,
        }
    }
}

impl WindowConfig {
    /// Offset of the window center, `⌈s/2⌉`.
    pub fn center_offset(&self) -> usize {
        self.window.div_ceil(2)
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.window == 0 || self.window > self.n_candidates || self.n_candidates > n_layers {
            return Err(Error::Invalid(format!(
                "need 1 ≤ s ({}) ≤ N ({}) ≤ layers ({n_layers})",
                self.window, self.n_candidates
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layers: Vec<usize>,
    pub center: usize,
    pub hit_ratio: f64,
    /// Top-N candidates, ascending by layer.
    pub candidates: Vec<usize>,
    /// No window passed the majority threshold.
    pub fallback: bool,
    /// The window was shifted inward to stay within the layer range.
    pub clamped: bool,
}

fn window_at(center: usize, cfg: &WindowConfig, n_layers: usize) -> (Vec<usize>, bool) {
    let p = cfg.center_offset() as isize;
    let mut start = center as isize - p + 1;
    let mut clamped = false;
    if start < 0 {
        start = 0;
        clamped = true;
    }
    if start as usize + cfg.window > n_layers {
        start = (n_layers - cfg.window) as isize;
        clamped = true;
    }
    let start = start as usize;
    ((start..start + cfg.window).collect(), clamped)
}

/// Sliding-window search over per-layer FFN causal effects.
pub fn sliding_window_search(ce_ffn: &[f64], cfg: &WindowConfig) -> Result<LayerSelection> {
    let n_layers = ce_ffn.len();
    cfg.validate(n_layers)?;
    if ce_ffn.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite causal effect".into()));
    }
    let mut order: Vec<usize> = (0..n_layers).collect();
    order.sort_by(|&a, &b| ce_ffn[b].total_cmp(&ce_ffn[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = order[..cfg.n_candidates].to_vec();
    top.sort_unstable();

    let first = (cfg.n_candidates + 1).div_ceil(2);
    for i in first..=cfg.n_candidates {
        let center = top[i - 1];
        let (layers, clamped) = window_at(center, cfg, n_layers);
        let hr = hit_ratio(&layers, &top);
        if hr > 0.5 {
            return Ok(LayerSelection {
                layers,
                center,
                hit_ratio: hr,
                candidates: top,
                fallback: false,
                clamped,
            });
        }
    }
    let center = top[first - 1];
    let (layers, clamped) = window_at(center, cfg, n_layers);
    Ok(LayerSelection {
        hit_ratio: hit_ratio(&layers, &top),
        layers,
        center,
        candidates: top,
        fallback: true,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FfnVariant, ModelConfig};

    fn model() -> ToyTransformer {
        ToyTransformer::new(ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 20,
            max_seq_len: 8,
            ffn_variant: FfnVariant::Gated,
            seed: 2,
            init_std: 0.3,
        })
        .unwrap()
    }

    fn prompts() -> Vec<TracePrompt> {
        vec![
            TracePrompt {
                tokens: vec![3, 4, 1],
                answer: 7,
            },
            TracePrompt {
                tokens: vec![5, 2, 1],
                answer: 9,
            },
        ]
    }

    #[test]
    fn zero_noise_is_identity() {
        let m = model();
        let cases = run_trace(&m, &prompts(), 0.0, 1).unwrap();
        for c in &cases {
            assert_eq!(c.p_corrupt, c.p_clean);
            assert!(c.restored.iter().all(|&p| p == c.p_clean));
        }
        let ce = causal_effect(&cases).unwrap();
        for c in Component::ALL {
            assert!(ce.get(c).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn last_layer_restoration_recovers_clean() {
        let m = model();
        let cases = run_trace(&m, &prompts(), 3.0, 1).unwrap();
        for c in &cases {
            assert_ne!(c.p_corrupt, c.p_clean);
            assert_eq!(c.restored(Component::Layer, 2, 2), c.p_clean);
            assert!(c.restored.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn batched_grid_matches_single_patched_runs() {
        let m = model();
        let p = &prompts()[0];
        let cases = run_trace(&m, std::slice::from_ref(p), 2.0, 5).unwrap();
        let std = 2.0 * embedding_std(&m, std::slice::from_ref(p)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, std).unwrap();
        let mut noise = Tensor::zeros(&[3, 16]);
        for v in noise.data_mut() {
            *v = normal.sample(&mut rng);
        }
        let (_, clean) = m.forward_with_capture(&p.tokens).unwrap();
        let patch = crate::model::Patch {
            component: Component::Ffn,
            layer: 1,
            token: 0,
            value: clean.ffn_out[1].row(0).to_vec(),
        };
        let probs = m.forward_patched(&p.tokens, &noise, &[patch]).unwrap();
        let single = probs.get(2, p.answer);
        assert!((single - cases[0].restored(Component::Ffn, 1, 0)).abs() < 1e-12);
    }

    #[test]
    fn ce_single_entry_arithmetic() {
        let mut restored = vec![0.1; 3 * 4];
        let case = TraceCase {
            prompt: vec![0],
            answer: 0,
            n_layers: 4,
            p_clean: 0.9,
            p_corrupt: 0.1,
            restored: {
                restored[4 + 3] = 0.6;
                restored
            },
            ineffective_noise: false,
        };
        let ce = causal_effect(&[case]).unwrap();
        assert!((ce.ffn[3] - 0.5).abs() < 1e-15);
        assert_eq!(ce.mhsa, vec![0.0; 4]);
    }

    #[test]
    fn ce_rejects_mixed_geometry() {
        let a = TraceCase {
            prompt: vec![0, 1],
            answer: 0,
            n_layers: 1,
            p_clean: 0.5,
            p_corrupt: 0.5,
            restored: vec![0.5; 6],
            ineffective_noise: true,
        };
        let mut b = a.clone();
        b.prompt = vec![0];
        b.restored = vec![0.5; 3];
        assert!(causal_effect(&[a, b]).is_err());
        assert!(causal_effect(&[]).is_err());
    }

    #[test]
    fn hit_ratio_examples() {
        assert_eq!(hit_ratio(&[1, 2], &[0, 1, 2, 3]), 1.0);
        assert_eq!(hit_ratio(&[3, 4, 5, 6], &[3, 5, 6, 9]), 0.75);
        assert_eq!(hit_ratio(&[1, 2], &[5, 6]), 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let t = CeTable {
            n_layers: 2,
            batch_size: 1,
            seq_len: 1,
            mhsa: vec![0.1, -0.2],
            ffn: vec![0.3, 0.25],
            layer: vec![0.5, 0.0],
        };
        let back = CeTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back.ffn, t.ffn);
        assert_eq!(back.mhsa, t.mhsa);
    }
}
