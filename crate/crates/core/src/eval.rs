//! Forgetting and retention metrics.

use serde::{Deserialize, Serialize};

use crate::corpus::{FactWorld, QaItem, Split};
use crate::error::{Error, Result};
use crate::model::{Batch, ToyTransformer};
use crate::numerics::Tensor;

/// Lower clamp for truncated forgetting-quality components.
pub const KRD_EPS: f64 = 1e-6;
pub const DEFAULT_MIN_K: f64 = 20.0;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of items whose correct candidate has the highest next-token
/// probability after the question.
pub fn answer_accuracy(model: &ToyTransformer, items: &[&QaItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Invalid("answer_accuracy on an empty QA set".into()));
    }
    let batch = Batch::new(
        &items
            .iter()
            .map(|q| q.question.as_slice())
            .collect::<Vec<_>>(),
    );
    let logits = model.logits(&batch)?;
    let mut correct = 0;
    for (q, row) in items.iter().zip(batch.last_rows()) {
        let scores: Vec<f64> = q.candidates.iter().map(|&c| logits.get(row, c)).collect();
        if argmax(&scores) == q.correct {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Greedy continuation of every prompt by `n_new` tokens.
pub fn greedy_continue(
    model: &ToyTransformer,
    prompts: &[Vec<usize>],
    n_new: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
    for _ in 0..n_new {
        if seqs.is_empty() {
            break;
        }
        let batch = Batch::new(&seqs);
        let logits = model.logits(&batch)?;
        for (s, row) in seqs.iter_mut().zip(batch.last_rows()) {
            s.push(argmax(logits.row(row)));
        }
    }
    Ok(seqs
        .into_iter()
        .zip(prompts)
        .map(|(s, p)| s[p.len()..].to_vec())
        .collect())
}

pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 over token sequences.
pub fn rouge_l_f1(candidate: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("ROUGE-L needs a nonempty reference".into()));
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Mean ROUGE-L of the greedy continuation of `x[..t]` against `x[t..]`.
pub fn verbmem(model: &ToyTransformer, seqs: &[Vec<usize>], t: usize) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Invalid("verbmem on an empty set".into()));
    }
    if let Some(s) = seqs.iter().find(|s| s.len() <= t) {
        return Err(Error::Invalid(format!(
            "sequence of length {} has no continuation after prefix {t}",
            s.len()
        )));
    }
    // group by length so every batch decodes the same number of tokens
    let mut total = 0.0;
    let mut lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
    lens.sort_unstable();
    lens.dedup();
    for len in lens {
        let group: Vec<&Vec<usize>> = seqs.iter().filter(|s| s.len() == len).collect();
        let prompts: Vec<Vec<usize>> = group.iter().map(|s| s[..t].to_vec()).collect();
        let outs = greedy_continue(model, &prompts, len - t)?;
        for (s, o) in group.iter().zip(&outs) {
            total += rouge_l_f1(o, &s[t..])?;
        }
    }
    Ok(total / seqs.len() as f64)
}

/// Mean ROUGE-L of the greedy answer against the reference answer.
pub fn knowmem(model: &ToyTransformer, items: &[&QaItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Invalid("knowmem on an empty QA set".into()));
    }
    let prompts: Vec<Vec<usize>> = items.iter().map(|q| q.question.clone()).collect();
    let outs = greedy_continue(model, &prompts, 1)?;
    let mut total = 0.0;
    for (q, o) in items.iter().zip(&outs) {
        total += rouge_l_f1(o, &[q.answer()])?;
    }
    Ok(total / items.len() as f64)
}

/// Log-probability of every next token of `seqs`, one vector per sequence.
pub fn token_log_probs(model: &ToyTransformer, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let batch = Batch::new(seqs);
    let logits = model.logits(&batch)?;
    Ok(batch
        .segments
        .iter()
        .map(|s| {
            (s.start..s.start + s.len - 1)
                .map(|r| {
                    let row = logits.row(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                    row[batch.tokens[r + 1]] - lse
                })
                .collect()
        })
        .collect())
}

/// Mean of the lowest `k_percent` of the values; short inputs (< 5 values)
/// fall back to the single minimum.
pub fn min_k_score(log_probs: &[f64], k_percent: f64) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::Invalid("min-k score of an empty sequence".into()));
    }
    let mut v = log_probs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = if v.len() < 5 {
        1
    } else {
        ((k_percent / 100.0 * v.len() as f64).ceil() as usize).clamp(1, v.len())
    };
    Ok(v[..n].iter().sum::<f64>() / n as f64)
}

/// Per-sequence Min-K% scores for members and non-members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaScores {
    pub k_percent: f64,
    pub members: Vec<f64>,
    pub non_members: Vec<f64>,
}

impl MiaScores {
    pub fn compute(
        model: &ToyTransformer,
        members: &[Vec<usize>],
        non_members: &[Vec<usize>],
        k_percent: f64,
    ) -> Result<Self> {
        if members.is_empty() || non_members.is_empty() {
            return Err(Error::Invalid(
                "membership sets must both be nonempty".into(),
            ));
        }
        let score = |seqs: &[Vec<usize>]| -> Result<Vec<f64>> {
            token_log_probs(model, seqs)?
                .iter()
                .map(|lp| min_k_score(lp, k_percent))
                .collect()
        };
        Ok(Self {
            k_percent,
            members: score(members)?,
            non_members: score(non_members)?,
        })
    }

    pub fn auc(&self) -> Result<f64> {
        auc(&self.members, &self.non_members)
    }
}

/// Probability that a member outscores a non-member, ties counted ½,
/// via the rank-sum statistic.
pub fn auc(members: &[f64], non_members: &[f64]) -> Result<f64> {
    if members.is_empty() || non_members.is_empty() {
        return Err(Error::Invalid("AUC needs both classes".into()));
    }
    if members.iter().chain(non_members).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite membership score".into()));
    }
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&v| (v, true))
        .chain(non_members.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // average 1-based ranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (m, n) = (members.len() as f64, non_members.len() as f64);
    Ok((rank_sum - m * (m + 1.0) / 2.0) / (m * n))
}

/// Min-K% membership AUC of `model` on member vs non-member sequences.
pub fn min_k_auc(
    model: &ToyTransformer,
    members: &[Vec<usize>],
    non_members: &[Vec<usize>],
    k_percent: f64,
) -> Result<f64> {
    MiaScores::compute(model, members, non_members, k_percent)?.auc()
}

/// Absolute relative AUC deviation from the retrain model, in percent.
pub fn privleak(auc_unlearned: f64, auc_retrain: f64) -> Result<f64> {
    if auc_retrain == 0.0 {
        return Err(Error::Invalid("retrain AUC of zero".into()));
    }
    Ok(((auc_unlearned - auc_retrain) / auc_retrain).abs() * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "floor")]
pub enum KrdMode {
    /// Golden reference is each component's retrain value.
    RetrainTruncated,
    /// Golden reference is a fixed floor (e.g. chance accuracy).
    FloorTruncated(f64),
}

/// One forgetting metric where larger means more retained knowledge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrdComponent {
    pub name: String,
    pub value: f64,
    pub origin: f64,
    pub golden: f64,
}

impl KrdComponent {
    pub fn new(name: &str, value: f64, origin: f64, golden: f64) -> Self {
        Self {
            name: name.into(),
            value,
            origin,
            golden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Krd {
    pub value: f64,
    /// Clamped truncated score per component, `None` when excluded.
    pub truncated: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// Harmonic mean of truncated forgetting-quality components.
pub fn krd(components: &[KrdComponent], mode: KrdMode) -> Result<Krd> {
    let mut truncated = Vec::with_capacity(components.len());
    let mut warnings = Vec::new();
    for c in components {
        let golden = match mode {
            KrdMode::RetrainTruncated => c.golden,
            KrdMode::FloorTruncated(f) => f,
        };
        let span = c.origin - golden;
        if !(span > 0.0) || !c.value.is_finite() {
            warnings.push(format!(
                "{}: origin {} not above golden {}; component excluded",
                c.name, c.origin, golden
            ));
            truncated.push(None);
            continue;
        }
        let fq = (c.origin - c.value.max(golden)) / span;
        truncated.push(Some(fq.clamp(KRD_EPS, 1.0)));
    }
    let kept: Vec<f64> = truncated.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Degenerate(
            "every KRD component is degenerate".into(),
        ));
    }
    let value = kept.len() as f64 / kept.iter().map(|f| 1.0 / f).sum::<f64>();
    Ok(Krd {
        value,
        truncated,
        warnings,
    })
}

/// Raw metrics of one model on the fact world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMetrics {
    pub verbmem_f: f64,
    pub knowmem_f: f64,
    pub forget_accuracy: f64,
    pub retain_accuracy: f64,
    pub knowmem_r: f64,
    pub holdout_accuracy: f64,
    pub mia_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub prefix_len: usize,
    pub k_percent: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            prefix_len: 2,
            k_percent: DEFAULT_MIN_K,
        }
    }
}

/// Both renderings of every fact in `split`.
pub fn mia_sequences(world: &FactWorld, split: Split) -> Vec<Vec<usize>> {
    world.sequences(&[split])
}

pub fn measure(model: &ToyTransformer, world: &FactWorld, spec: &EvalSpec) -> Result<RawMetrics> {
    let forget = world.qa_items(Split::Forget);
    let retain = world.qa_items(Split::Retain);
    let holdout = world.qa_items(Split::Holdout);
    let verbatim: Vec<Vec<usize>> = world
        .indices(Split::Forget)
        .iter()
        .map(|&i| world.verbatim(i))
        .collect();
    Ok(RawMetrics {
        verbmem_f: verbmem(model, &verbatim, spec.prefix_len)?,
        knowmem_f: knowmem(model, &forget)?,
        forget_accuracy: answer_accuracy(model, &forget)?,
        retain_accuracy: answer_accuracy(model, &retain)?,
        knowmem_r: knowmem(model, &retain)?,
        holdout_accuracy: answer_accuracy(model, &holdout)?,
        mia_auc: min_k_auc(
            model,
            &mia_sequences(world, Split::Forget),
            &mia_sequences(world, Split::Holdout),
            spec.k_percent,
        )?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub name: String,
    pub raw: f64,
    pub origin: f64,
    pub golden: f64,
    pub truncated: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub components: Vec<ComponentScore>,
    pub krd: f64,
    pub privleak: f64,
    pub forget_accuracy: f64,
    pub retain_accuracy: f64,
    pub knowmem_r: f64,
    pub holdout_accuracy: f64,
    /// Retain accuracy relative to the origin model.
    pub normalized_retention: f64,
    pub origin: RawMetrics,
    pub retrain: RawMetrics,
    pub raw: RawMetrics,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 10] = [
        "method",
        "krd",
        "verbmem_f",
        "knowmem_f",
        "privleak",
        "forget_accuracy",
        "retain_accuracy",
        "knowmem_r",
        "holdout_accuracy",
        "normalized_retention",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        let f = |v: f64| format!("{v:.6}");
        vec![
            self.method.clone(),
            f(self.krd),
            f(self.raw.verbmem_f),
            f(self.raw.knowmem_f),
            f(self.privleak),
            f(self.forget_accuracy),
            f(self.retain_accuracy),
            f(self.knowmem_r),
            f(self.holdout_accuracy),
            f(self.normalized_retention),
        ]
    }
}

/// Score `raw` against the origin and retrain references. KRD combines
/// verbatim and QA memorization with four-way answer accuracy; PrivLeak is
/// reported beside it. On four-token facts the MIA score is the single
/// minimum token log-prob, which fluency damage at non-answer positions
/// drives below the holdout level long before the answers are gone.
pub fn report(
    method: &str,
    raw: &RawMetrics,
    origin: &RawMetrics,
    retrain: &RawMetrics,
) -> Result<MetricReport> {
    let leak = privleak(raw.mia_auc, retrain.mia_auc)?;
    let comps = vec![
        KrdComponent::new(
            "verbmem_f",
            raw.verbmem_f,
            origin.verbmem_f,
            retrain.verbmem_f,
        ),
        KrdComponent::new(
            "knowmem_f",
            raw.knowmem_f,
            origin.knowmem_f,
            retrain.knowmem_f,
        ),
        KrdComponent::new(
            "forget_accuracy",
            raw.forget_accuracy,
            origin.forget_accuracy,
            retrain.forget_accuracy,
        ),
    ];
    let k = krd(&comps, KrdMode::RetrainTruncated)?;
    Ok(MetricReport {
        method: method.into(),
        components: comps
            .iter()
            .zip(&k.truncated)
            .map(|(c, t)| ComponentScore {
                name: c.name.clone(),
                raw: c.value,
                origin: c.origin,
                golden: c.golden,
                truncated: *t,
            })
            .collect(),
        krd: k.value,
        privleak: leak,
        forget_accuracy: raw.forget_accuracy,
        retain_accuracy: raw.retain_accuracy,
        knowmem_r: raw.knowmem_r,
        holdout_accuracy: raw.holdout_accuracy,
        normalized_retention: if origin.retain_accuracy > 0.0 {
            raw.retain_accuracy / origin.retain_accuracy
        } else {
            0.0
        },
        origin: origin.clone(),
        retrain: retrain.clone(),
        raw: raw.clone(),
        warnings: k.warnings,
    })
}

/// Uniform-random candidate choice, for chance-level checks.
pub fn random_guess_accuracy(items: &[&QaItem], rng: &mut impl rand::Rng) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Invalid("empty QA set".into()));
    }
    let hits = items
        .iter()
        .filter(|q| rng.random_range(0..4) == q.correct)
        .count();
    Ok(hits as f64 / items.len() as f64)
}

/// Two-sided 95% normal-approximation interval for a binomial proportion.
pub fn binomial_ci95(p: f64, n: usize) -> (f64, f64) {
    let half = 1.96 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

/// Dump a representation matrix as CSV rows `label,row,v0,v1,…`.
pub fn representation_csv(blocks: &[(String, &Tensor)]) -> String {
    let width = blocks.first().map_or(0, |(_, t)| t.cols());
    let mut header: Vec<String> = vec!["label".into(), "row".into()];
    header.extend((0..width).map(|j| format!("d{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = blocks.iter().flat_map(|(label, t)| {
        (0..t.rows()).map(move |r| {
            let mut row = vec![label.clone(), r.to_string()];
            row.extend(t.row(r).iter().map(|v| format!("{v:.8e}")));
            row
        })
    });
    crate::io::csv(&header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l_f1(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(rouge_l_f1(&[4, 5], &[1, 2, 3]).unwrap(), 0.0);
        assert!(close(
            rouge_l_f1(&[1, 3, 4], &[1, 2, 3, 4]).unwrap(),
            6.0 / 7.0,
            1e-12
        ));
        assert!(rouge_l_f1(&[1], &[]).is_err());
        assert_eq!(rouge_l_f1(&[], &[1]).unwrap(), 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.7, 0.1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.2], &[0.8, 0.1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.3, 0.5, 0.7], &[0.3, 0.5, 0.7]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1], &[0.2]).unwrap(), 0.0);
        assert!(auc(&[], &[0.2]).is_err());
    }

    #[test]
    fn min_k_score_rules() {
        assert_eq!(min_k_score(&[-1.0, -3.0, -2.0], 20.0).unwrap(), -3.0);
        // 10 values at k=20 → mean of the two lowest
        let v: Vec<f64> = (1..=10).map(|i| -(i as f64)).collect();
        assert_eq!(min_k_score(&v, 20.0).unwrap(), -9.5);
    }

    #[test]
    fn privleak_examples() {
        assert_eq!(privleak(0.5, 0.5).unwrap(), 0.0);
        assert_eq!(privleak(0.75, 0.5).unwrap(), 50.0);
        assert_eq!(privleak(0.25, 0.5).unwrap(), 50.0);
        assert!(privleak(0.3, 0.0).is_err());
    }

    #[test]
    fn krd_degenerate_component_is_excluded() {
        let k = krd(
            &[
                KrdComponent::new("a", 0.5, 0.5, 0.5),
                KrdComponent::new("b", 0.2, 1.0, 0.2),
            ],
            KrdMode::RetrainTruncated,
        )
        .unwrap();
        assert_eq!(k.truncated[0], None);
        assert_eq!(k.value, 1.0);
        assert_eq!(k.warnings.len(), 1);
    }

    #[test]
    fn krd_complete_forgetting_and_over_forgetting() {
        let at_golden = [
            KrdComponent::new("a", 0.1, 0.9, 0.1),
            KrdComponent::new("b", 3.0, 50.0, 3.0),
        ];
        assert_eq!(
            krd(&at_golden, KrdMode::RetrainTruncated).unwrap().value,
            1.0
        );
        let past = [
            KrdComponent::new("a", 0.0, 0.9, 0.1),
            KrdComponent::new("b", 1.0, 50.0, 3.0),
        ];
        assert_eq!(krd(&past, KrdMode::RetrainTruncated).unwrap().value, 1.0);
        let none = [KrdComponent::new("a", 0.9, 0.9, 0.1)];
        assert_eq!(
            krd(&none, KrdMode::RetrainTruncated).unwrap().value,
            KRD_EPS
        );
    }

    #[test]
    fn ci_contains_chance() {
        let (lo, hi) = binomial_ci95(0.25, 40);
        assert!(lo < 0.12 && hi > 0.38);
    }
}
