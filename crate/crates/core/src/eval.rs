//! Automatic metrics and the lower-bound diagnostics of the E-step.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::em::{candidate_scores, posterior_from_scores, Assignment};
use crate::error::{Error, Result};
use crate::model::{beam_decode, greedy_decode, GeneratorParams, Scalar};
use crate::text::{encode_instance, Vocabulary};

/// Stand-in count for zero n-gram matches.
pub const BLEU_SMOOTHING: f64 = 1e-9;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Pooled n-gram statistics for corpus-level BLEU (orders 1..=4).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [u64; 4],
    pub totals: [u64; 4],
    pub candidate_len: u64,
    pub reference_len: u64,
}

impl BleuStats {
    /// Adds one segment. Counts are clipped by the maximum count in any
    /// reference; the effective reference length is the closest one
    /// (shorter wins ties).
    pub fn add<T: Eq + Hash>(&mut self, candidate: &[T], references: &[Vec<T>]) {
        let c = candidate.len();
        self.candidate_len += c as u64;
        let r = references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        self.reference_len += r as u64;
        for n in 1..=4 {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for reference in references {
                for (g, cnt) in ngram_counts(reference, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            let clipped: usize = cand
                .iter()
                .map(|(g, &cnt)| cnt.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            self.matches[n - 1] += clipped as u64;
            self.totals[n - 1] += c.saturating_sub(n - 1) as u64;
        }
    }

    pub fn bleu(&self, n: usize) -> f64 {
        assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
        if self.candidate_len == 0 {
            return 0.0;
        }
        let log_p: f64 = (0..n)
            .map(|k| {
                let m = if self.matches[k] == 0 {
                    BLEU_SMOOTHING
                } else {
                    self.matches[k] as f64
                };
                (m / self.totals[k].max(1) as f64).ln()
            })
            .sum::<f64>()
            / n as f64;
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        (bp * log_p.exp()).clamp(0.0, 1.0)
    }
}

/// Sentence-level BLEU-n.
pub fn bleu_n<T: Eq + Hash>(candidate: &[T], references: &[Vec<T>], n: usize) -> f64 {
    let mut s = BleuStats::default();
    s.add(candidate, references);
    s.bleu(n)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
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

/// LCS-based F1 (β = 1).
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("ROUGE-L reference"));
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Size of the top-`fraction` prefix of `n` items: `ceil(fraction * n)`,
/// at least 1.
pub fn top_count(n: usize, fraction: f64) -> usize {
    (((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Indices sorted by descending confidence; ties keep input order.
pub(crate) fn confidence_order(assignments: &[Assignment]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..assignments.len()).collect();
    order.sort_by(|&a, &b| {
        assignments[b]
            .confidence
            .partial_cmp(&assignments[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Fraction of predictions matching `gold` (aligned with `predictions`),
/// optionally restricted to the `ceil(f * N)` most confident.
pub fn addressee_accuracy(
    predictions: &[Assignment],
    gold: &[Option<usize>],
    top_fraction: Option<f64>,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("prediction set"));
    }
    if gold.len() != predictions.len() {
        return Err(Error::Config("gold labels not aligned with predictions".into()));
    }
    let order = confidence_order(predictions);
    let take = match top_fraction {
        Some(f) => top_count(predictions.len(), f),
        None => predictions.len(),
    };
    let mut correct = 0usize;
    for &i in &order[..take] {
        let g = gold[i].ok_or_else(|| Error::MissingLabel {
            dialogue_id: predictions[i].dialogue_id.clone(),
            turn: predictions[i].t,
        })?;
        correct += usize::from(predictions[i].z == g);
    }
    Ok(correct as f64 / take as f64)
}

/// Marginal log-likelihood, its Jensen lower bound and the gap between them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    /// `log Σ_i p(r, z_i | c)`
    pub marginal: f64,
    /// `Σ_i q_i log p(r, z_i | c)`
    pub expected_complete: f64,
    /// `-Σ_i q_i log q_i`
    pub entropy: f64,
    pub gap: f64,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Lower-bound terms from per-candidate scores `log p(r | c, z_i)` under a
/// uniform prior over candidates. `q` defaults to the exact posterior.
pub fn elbo_from_scores(scores: &[f64], q: Option<&[f64]>) -> Result<ElboReport> {
    if scores.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    let posterior;
    let q = match q {
        Some(q) => {
            if q.len() != scores.len() {
                return Err(Error::InvalidDistribution(format!(
                    "{} weights for {} candidates",
                    q.len(),
                    scores.len()
                )));
            }
            if q.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return Err(Error::InvalidDistribution("negative or non-finite weight".into()));
            }
            let total: f64 = q.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
            }
            q
        }
        None => {
            posterior = posterior_from_scores(scores).probs;
            &posterior
        }
    };
    let log_prior = -(scores.len() as f64).ln();
    let joint: Vec<f64> = scores.iter().map(|s| s + log_prior).collect();
    let marginal = log_sum_exp(&joint);
    let expected_complete: f64 = q
        .iter()
        .zip(&joint)
        .filter(|(&w, _)| w > 0.0)
        .map(|(&w, &j)| w * j)
        .sum();
    let entropy: f64 = -q
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| w * w.ln())
        .sum::<f64>();
    Ok(ElboReport {
        marginal,
        expected_complete,
        entropy: entropy.max(0.0),
        gap: marginal - (expected_complete + entropy),
    })
}

pub fn elbo_diagnostics<F: Scalar>(
    params: &GeneratorParams<F>,
    instance: &Instance,
    vocab: &Vocabulary,
    max_context_len: usize,
    q: Option<&[f64]>,
) -> Result<ElboReport> {
    let scores = candidate_scores(params, instance, vocab, max_context_len)?;
    elbo_from_scores(&scores, q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_len: usize,
    pub beam: usize,
    pub max_context_len: usize,
    /// Clears every addressee flag (the no-addressee baseline).
    pub suppress_addressee: bool,
    /// Score only the first `limit` instances.
    pub limit: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_len: 8,
            beam: 1,
            max_context_len: 64,
            suppress_addressee: false,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub addressee_accuracy: Option<f64>,
    pub n_examples: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "all_addr_acc,bleu1,bleu2,bleu3,bleu4,rougeL,n_examples";

    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (i, b) in self.bleu.iter().enumerate() {
            let _ = writeln!(s, "bleu{} = {:.6}", i + 1, b);
        }
        let _ = writeln!(s, "rougeL = {:.6}", self.rouge_l);
        if let Some(a) = self.addressee_accuracy {
            let _ = writeln!(s, "all_addr_acc = {a:.6}");
        }
        let _ = writeln!(s, "n_examples = {}", self.n_examples);
        s
    }

    pub fn to_csv_row(&self) -> String {
        let acc = self
            .addressee_accuracy
            .map(|a| format!("{a:.6}"))
            .unwrap_or_default();
        format!(
            "{acc},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.bleu[0], self.bleu[1], self.bleu[2], self.bleu[3], self.rouge_l, self.n_examples
        )
    }
}

/// Decodes a response for one instance conditioned on its gold addressee.
pub fn generate_response<F: Scalar>(
    params: &GeneratorParams<F>,
    instance: &Instance,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<Vec<u32>> {
    let z = instance.gold_addressee.ok_or_else(|| Error::MissingLabel {
        dialogue_id: instance.dialogue_id.clone(),
        turn: instance.t,
    })?;
    let mut enc = encode_instance(instance, Some(z), vocab, cfg.max_context_len)?;
    if cfg.suppress_addressee {
        enc = enc.without_addressee();
    }
    if cfg.beam <= 1 {
        greedy_decode(params, &enc.context_ids, &enc.addressee_flags, cfg.max_len)
    } else {
        Ok(beam_decode(params, &enc.context_ids, &enc.addressee_flags, cfg.max_len, cfg.beam)?.tokens)
    }
}

/// Corpus BLEU (pooled statistics) and mean ROUGE-L of gold-addressee
/// generations against the gold responses.
pub fn evaluate_generation<F: Scalar>(
    params: &GeneratorParams<F>,
    instances: &[Instance],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<MetricsReport> {
    use rayon::prelude::*;
    let take = cfg.limit.unwrap_or(instances.len()).min(instances.len());
    if take == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    let outputs: Vec<Vec<u32>> = instances[..take]
        .par_iter()
        .map(|inst| generate_response(params, inst, vocab, cfg))
        .collect::<Result<_>>()?;
    let mut stats = BleuStats::default();
    let mut rouge = 0.0;
    for (inst, out) in instances[..take].iter().zip(&outputs) {
        let reference = vocab.encode(&inst.response);
        stats.add(out, std::slice::from_ref(&reference));
        rouge += rouge_l(out, &reference)?;
    }
    Ok(MetricsReport {
        bleu: [stats.bleu(1), stats.bleu(2), stats.bleu(3), stats.bleu(4)],
        rouge_l: rouge / take as f64,
        addressee_accuracy: None,
        n_examples: take,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn assignment(z: usize, confidence: f64) -> Assignment {
        Assignment {
            index: 0,
            dialogue_id: "d".into(),
            t: 5,
            z,
            confidence,
        }
    }

    #[test]
    fn identity_scores_one() {
        let s = toks("the cat sat on the mat");
        for n in 1..=4 {
            assert!((bleu_n(&s, &[s.clone()], n) - 1.0).abs() < 1e-12);
        }
        assert_eq!(rouge_l(&s, &s).unwrap(), 1.0);
    }

    #[test]
    fn clipping_example() {
        let c = toks("the the the the");
        let r = toks("the cat");
        assert!((bleu_n(&c, &[r], 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let r = toks("a b");
        assert_eq!(bleu_n::<String>(&[], &[r.clone()], 2), 0.0);
        assert_eq!(rouge_l(&[], &r).unwrap(), 0.0);
    }

    #[test]
    fn rouge_examples() {
        let v = rouge_l(&toks("a b c d"), &toks("a c b d")).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("x y"), &toks("a b")).unwrap(), 0.0);
        assert!(rouge_l(&toks("a"), &[]).is_err());
    }

    #[test]
    fn accuracy_prefixes() {
        let flags = [1, 0, 1, 0, 1, 0, 1, 0, 1, 0];
        let preds: Vec<_> = flags
            .iter()
            .enumerate()
            .map(|(i, &f)| assignment(if f == 1 { 2 } else { 3 }, 1.0 - i as f64 * 0.05))
            .collect();
        let gold = vec![Some(2); 10];
        let acc = addressee_accuracy(&preds, &gold, Some(0.3)).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(addressee_accuracy(&preds, &gold, Some(0.01)).unwrap(), 1.0);
        assert_eq!(addressee_accuracy(&preds, &gold, None).unwrap(), 0.5);
        assert!(addressee_accuracy(&preds, &vec![None; 10], None).is_err());
    }

    #[test]
    fn top_count_rounding() {
        assert_eq!(top_count(10, 0.3), 3);
        assert_eq!(top_count(10, 0.1 * 3.0), 3);
        assert_eq!(top_count(10, 0.01), 1);
        assert_eq!(top_count(7, 1.0), 7);
    }

    #[test]
    fn elbo_single_candidate() {
        let r = elbo_from_scores(&[-3.5], None).unwrap();
        assert_eq!(r.entropy, 0.0);
        assert_eq!(r.marginal, r.expected_complete);
    }

    #[test]
    fn elbo_rejects_bad_q() {
        assert!(elbo_from_scores(&[-1.0, -2.0], Some(&[0.5])).is_err());
        assert!(elbo_from_scores(&[-1.0, -2.0], Some(&[0.7, 0.7])).is_err());
        assert!(elbo_from_scores(&[-1.0, -2.0], Some(&[1.5, -0.5])).is_err());
    }

    #[test]
    fn elbo_uniform_q_has_positive_gap() {
        let r = elbo_from_scores(&[-4.0, -6.0, -9.0], Some(&[1.0 / 3.0; 3])).unwrap();
        assert!(r.gap > 0.0);
        let exact = elbo_from_scores(&[-4.0, -6.0, -9.0], None).unwrap();
        assert!(exact.gap.abs() < 1e-12);
    }
}
