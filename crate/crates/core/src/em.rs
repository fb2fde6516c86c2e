//! Hard-EM training with latent addressees.
//!
//! Each round scores every earlier turn as the addressee of a response,
//! normalizes the scores into a posterior (uniform prior), keeps the argmax
//! as a pseudo-label, and retrains on the most confident fraction of those
//! labels. The fraction is recalibrated every round on labeled validation
//! data.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::eval::{
    addressee_accuracy, confidence_order, elbo_from_scores, evaluate_generation, top_count,
    DecodeConfig,
};
use crate::model::{
    clip_grad_norm, loss_and_grads, optimizer_step, response_loglik, AdamConfig, AdamState,
    GeneratorParams, ModelConfig, Scalar,
};
use crate::text::{encode_instance, EncodedInstance, Vocabulary};

/// Normalized distribution over the addressee candidates `1..t` of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub index: usize,
    pub dialogue_id: String,
    pub t: usize,
    /// `probs[i]` is the probability of candidate turn `i + 1`.
    pub probs: Vec<f64>,
}

impl Posterior {
    pub fn prob(&self, z: usize) -> f64 {
        self.probs[z - 1]
    }
}

/// Hard addressee label for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Position of the instance in the list it was derived from.
    #[serde(skip)]
    pub index: usize,
    pub dialogue_id: String,
    pub t: usize,
    pub z: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitStrategy {
    PreviousUtterance,
    KeywordOverlap,
    /// Gold label with the given probability, otherwise a uniformly chosen
    /// wrong candidate.
    NoisyOracle(f64),
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitStrategy::PreviousUtterance => write!(f, "previous-utterance"),
            InitStrategy::KeywordOverlap => write!(f, "keyword-overlap"),
            InitStrategy::NoisyOracle(p) => write!(f, "noisy-oracle:{p}"),
        }
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "previous-utterance" => Ok(InitStrategy::PreviousUtterance),
            "keyword-overlap" => Ok(InitStrategy::KeywordOverlap),
            _ => {
                let p = s
                    .strip_prefix("noisy-oracle:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| Error::Config(format!("unknown init strategy {s:?}")))?;
                Ok(InitStrategy::NoisyOracle(p))
            }
        }
    }
}

impl Serialize for InitStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for InitStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Supervised training settings shared by the M-step and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub max_context_len: usize,
    /// Train with every addressee flag cleared.
    pub suppress_addressee: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            adam: AdamConfig {
                lr: 3e-4,
                ..AdamConfig::default()
            },
            clip_norm: 1.0,
            max_context_len: 64,
            suppress_addressee: false,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub n_iterations: usize,
    pub train: TrainConfig,
    pub alpha_target_accuracy: f64,
    pub alpha_grid_step: f64,
    pub alpha_floor: f64,
    pub init_strategy: InitStrategy,
    /// Confidence fraction used for the logged selected-subset accuracy.
    pub report_top_fraction: f64,
    pub decode: DecodeConfig,
    pub seed: u64,
    /// When false the `seconds` column is written as 0 so logs are
    /// byte-reproducible.
    pub record_timing: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            n_iterations: 8,
            train: TrainConfig::default(),
            alpha_target_accuracy: 0.8,
            alpha_grid_step: 0.05,
            alpha_floor: 0.1,
            init_strategy: InitStrategy::KeywordOverlap,
            report_top_fraction: 0.3,
            decode: DecodeConfig::default(),
            seed: 1,
            record_timing: true,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("em: {m}")));
        if !(self.alpha_floor > 0.0 && self.alpha_floor <= 1.0) {
            return bad("alpha_floor must lie in (0, 1]");
        }
        if !(self.alpha_target_accuracy > 0.0 && self.alpha_target_accuracy < 1.0) {
            return bad("alpha_target_accuracy must lie in (0, 1)");
        }
        if !(self.alpha_grid_step > 0.0 && self.alpha_grid_step <= 1.0) {
            return bad("alpha_grid_step must lie in (0, 1]");
        }
        if !(self.report_top_fraction > 0.0 && self.report_top_fraction <= 1.0) {
            return bad("report_top_fraction must lie in (0, 1]");
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    seed ^ stream.wrapping_mul(0xA076_1D64_78BD_642F) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Coarse labels for the first M-step.
pub fn initial_labels(
    instances: &[Instance],
    strategy: InitStrategy,
    seed: u64,
) -> Result<Vec<Assignment>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 1, 0));
    instances
        .iter()
        .enumerate()
        .map(|(index, inst)| {
            let (z, confidence) = match strategy {
                InitStrategy::PreviousUtterance => (inst.t - 1, 1.0),
                InitStrategy::KeywordOverlap => keyword_overlap_label(inst),
                InitStrategy::NoisyOracle(p) => {
                    let gold = inst.gold_addressee.ok_or_else(|| Error::MissingLabel {
                        dialogue_id: inst.dialogue_id.clone(),
                        turn: inst.t,
                    })?;
                    let n = inst.n_candidates();
                    if n == 1 || rng.gen_bool(p) {
                        (gold, 1.0)
                    } else {
                        // uniform over the n - 1 wrong candidates
                        let k = rng.gen_range(1..n);
                        (if k >= gold { k + 1 } else { k }, 1.0)
                    }
                }
            };
            Ok(Assignment {
                index,
                dialogue_id: inst.dialogue_id.clone(),
                t: inst.t,
                z,
                confidence,
            })
        })
        .collect()
}

/// Candidate sharing the most distinct tokens with the response; ties go
/// to the most recent turn. Confidence is the winner's share of all overlap.
fn keyword_overlap_label(inst: &Instance) -> (usize, f64) {
    let response: HashSet<&str> = inst.response.iter().map(String::as_str).collect();
    let overlaps: Vec<usize> = inst
        .context
        .iter()
        .map(|u| {
            u.tokens
                .iter()
                .map(String::as_str)
                .collect::<HashSet<_>>()
                .intersection(&response)
                .count()
        })
        .collect();
    let total: usize = overlaps.iter().sum();
    let n = overlaps.len();
    if total == 0 {
        return (n, 1.0 / n as f64);
    }
    let mut best = 0;
    for (i, &o) in overlaps.iter().enumerate() {
        if o >= overlaps[best] {
            best = i;
        }
    }
    (best + 1, overlaps[best] as f64 / total as f64)
}

/// `log p(r | c, z = i)` for every candidate `i = 1..t`.
pub fn candidate_scores<F: Scalar>(
    params: &GeneratorParams<F>,
    instance: &Instance,
    vocab: &Vocabulary,
    max_context_len: usize,
) -> Result<Vec<f64>> {
    (1..instance.t)
        .map(|z| {
            let enc = encode_instance(instance, Some(z), vocab, max_context_len)?;
            response_loglik(params, &enc)
        })
        .collect()
}

/// `p_i = exp(s_i - logsumexp(s))`: the posterior under a uniform prior.
pub fn posterior_from_scores(scores: &[f64]) -> Posterior {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Posterior {
        index: 0,
        dialogue_id: String::new(),
        t: scores.len() + 1,
        probs: weights.into_iter().map(|w| w / total).collect(),
    }
}

pub fn e_step_posterior<F: Scalar>(
    params: &GeneratorParams<F>,
    instance: &Instance,
    vocab: &Vocabulary,
    max_context_len: usize,
) -> Result<Posterior> {
    let scores = candidate_scores(params, instance, vocab, max_context_len)?;
    let mut post = posterior_from_scores(&scores);
    post.dialogue_id = instance.dialogue_id.clone();
    post.t = instance.t;
    Ok(post)
}

/// Candidate scores for a whole split, computed in parallel and returned in
/// instance order.
pub fn score_all<F: Scalar>(
    params: &GeneratorParams<F>,
    instances: &[Instance],
    vocab: &Vocabulary,
    max_context_len: usize,
) -> Result<Vec<Vec<f64>>> {
    instances
        .par_iter()
        .map(|inst| candidate_scores(params, inst, vocab, max_context_len))
        .collect()
}

pub fn e_step<F: Scalar>(
    params: &GeneratorParams<F>,
    instances: &[Instance],
    vocab: &Vocabulary,
    max_context_len: usize,
) -> Result<Vec<Posterior>> {
    let scores = score_all(params, instances, vocab, max_context_len)?;
    Ok(posteriors_for(instances, &scores))
}

fn posteriors_for(instances: &[Instance], scores: &[Vec<f64>]) -> Vec<Posterior> {
    instances
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(index, (inst, s))| Posterior {
            index,
            dialogue_id: inst.dialogue_id.clone(),
            t: inst.t,
            ..posterior_from_scores(s)
        })
        .collect()
}

/// Argmax of the posterior; ties go to the most recent candidate.
pub fn hard_assign(posterior: &Posterior) -> Assignment {
    let mut best = 0;
    for (i, &p) in posterior.probs.iter().enumerate() {
        if p >= posterior.probs[best] {
            best = i;
        }
    }
    Assignment {
        index: posterior.index,
        dialogue_id: posterior.dialogue_id.clone(),
        t: posterior.t,
        z: best + 1,
        confidence: posterior.probs[best],
    }
}

/// Largest grid value `α` whose top-`α` validation prefix (by confidence)
/// reaches the target accuracy; `alpha_floor` when none does.
pub fn calibrate_alpha(
    assignments_val: &[Assignment],
    gold: &[Option<usize>],
    cfg: &EmConfig,
) -> Result<f64> {
    if assignments_val.is_empty() {
        return Err(Error::Empty("validation set for alpha calibration"));
    }
    let order = confidence_order(assignments_val);
    let mut correct_prefix = Vec::with_capacity(order.len() + 1);
    correct_prefix.push(0usize);
    for &i in &order {
        let g = gold[i].ok_or_else(|| Error::MissingLabel {
            dialogue_id: assignments_val[i].dialogue_id.clone(),
            turn: assignments_val[i].t,
        })?;
        let last = *correct_prefix.last().unwrap();
        correct_prefix.push(last + usize::from(assignments_val[i].z == g));
    }
    let steps = (1.0 / cfg.alpha_grid_step).round() as usize;
    let n = order.len();
    let mut chosen = None;
    for k in 1..=steps {
        let alpha = (k as f64 * cfg.alpha_grid_step).min(1.0);
        let take = top_count(n, alpha);
        let acc = correct_prefix[take] as f64 / take as f64;
        if acc >= cfg.alpha_target_accuracy - 1e-12 {
            chosen = Some(alpha);
        }
    }
    Ok(round_alpha(chosen.unwrap_or(cfg.alpha_floor)))
}

fn round_alpha(a: f64) -> f64 {
    (a * 1e9).round() / 1e9
}

/// The `ceil(α N)` most confident assignments, in confidence order with
/// ties kept in input order.
pub fn select_top_alpha(assignments: &[Assignment], alpha: f64) -> Vec<Assignment> {
    if assignments.is_empty() {
        return Vec::new();
    }
    let order = confidence_order(assignments);
    let take = top_count(assignments.len(), alpha);
    order[..take].iter().map(|&i| assignments[i].clone()).collect()
}

fn encode_selected(
    instances: &[Instance],
    selected: &[Assignment],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<Vec<EncodedInstance>> {
    selected
        .iter()
        .map(|a| {
            let inst = instances.get(a.index).ok_or_else(|| {
                Error::Config(format!("assignment index {} out of range", a.index))
            })?;
            let enc = encode_instance(inst, Some(a.z), vocab, cfg.max_context_len)?;
            Ok(if cfg.suppress_addressee {
                enc.without_addressee()
            } else {
                enc
            })
        })
        .collect()
}

/// Trains on the `(c, r, z)` triples named by `selected` for `cfg.epochs`
/// epochs with a fresh optimizer state. Minibatch order is seeded by
/// `(cfg.seed, round)`. Returns the token-mean loss of each epoch.
pub fn m_step(
    params: &mut GeneratorParams<f32>,
    instances: &[Instance],
    selected: &[Assignment],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    round: u64,
) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::Empty("M-step training set"));
    }
    let encoded = encode_selected(instances, selected, vocab, cfg)?;
    let mut state = AdamState::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 2, round));
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&EncodedInstance> = chunk.iter().map(|&i| &encoded[i]).collect();
            let tokens: usize = batch.iter().map(|e| e.response_ids.len()).sum();
            let (loss, mut grads) = loss_and_grads(params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.clip_norm);
            }
            optimizer_step(params, &grads, &mut state, &cfg.adam)?;
            loss_sum += loss * tokens as f64;
            token_sum += tokens;
        }
        epoch_losses.push(loss_sum / token_sum as f64);
    }
    Ok(epoch_losses)
}

/// Supervised training on gold addressees.
pub fn finetune(
    params: &mut GeneratorParams<f32>,
    instances: &[Instance],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if instances.is_empty() {
        return Err(Error::Empty("fine-tuning set"));
    }
    let gold = gold_assignments(instances)?;
    m_step(params, instances, &gold, vocab, cfg, 0)
}

pub fn gold_assignments(instances: &[Instance]) -> Result<Vec<Assignment>> {
    instances
        .iter()
        .enumerate()
        .map(|(index, inst)| {
            let z = inst.gold_addressee.ok_or_else(|| Error::MissingLabel {
                dialogue_id: inst.dialogue_id.clone(),
                turn: inst.t,
            })?;
            Ok(Assignment {
                index,
                dialogue_id: inst.dialogue_id.clone(),
                t: inst.t,
                z,
                confidence: 1.0,
            })
        })
        .collect()
}

/// One row of the per-iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub alpha: f64,
    pub sel_addr_acc: f64,
    pub all_addr_acc: f64,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub mean_elbo_hat: f64,
    pub mean_entropy: f64,
    pub seconds: f64,
}

impl IterationRecord {
    fn to_csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.iteration,
            self.alpha,
            self.sel_addr_acc,
            self.all_addr_acc,
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.rouge_l,
            self.mean_elbo_hat,
            self.mean_entropy,
            self.seconds
        )
    }

    fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Config(format!("malformed iteration log row {line:?}"));
        if f.len() != 12 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(IterationRecord {
            iteration: f[0].parse().map_err(|_| bad())?,
            alpha: num(1)?,
            sel_addr_acc: num(2)?,
            all_addr_acc: num(3)?,
            bleu: [num(4)?, num(5)?, num(6)?, num(7)?],
            rouge_l: num(8)?,
            mean_elbo_hat: num(9)?,
            mean_entropy: num(10)?,
            seconds: num(11)?,
        })
    }

    /// BLEU-4 at the precision written to the log, so a resumed run picks
    /// the same best iteration as an uninterrupted one.
    fn logged_bleu4(&self) -> f64 {
        format!("{:.6}", self.bleu[3]).parse().unwrap_or(self.bleu[3])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationLog {
    pub records: Vec<IterationRecord>,
}

impl IterationLog {
    pub const CSV_HEADER: &'static str = "iteration,alpha,sel_addr_acc,all_addr_acc,bleu1,bleu2,bleu3,bleu4,rougeL,mean_elbo_hat,mean_entropy,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_csv_row());
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(Self::CSV_HEADER) {
            return Err(Error::Config("iteration log has an unexpected header".into()));
        }
        let records = lines
            .filter(|l| !l.trim().is_empty())
            .map(IterationRecord::from_csv_row)
            .collect::<Result<Vec<_>>>()?;
        for (i, r) in records.iter().enumerate() {
            if r.iteration != i {
                return Err(Error::Config(format!(
                    "iteration log row {i} has iteration {}",
                    r.iteration
                )));
            }
        }
        Ok(IterationLog { records })
    }

    /// Index of the row with the highest logged BLEU-4 (earliest on ties).
    pub fn best_iteration(&self) -> Option<usize> {
        let mut best: Option<&IterationRecord> = None;
        for r in &self.records {
            if best.map_or(true, |b| r.logged_bleu4() > b.logged_bleu4()) {
                best = Some(r);
            }
        }
        best.map(|r| r.iteration)
    }
}

/// Validation-side view of a model after one iteration.
#[derive(Debug, Clone)]
pub struct ValidationSnapshot {
    pub assignments: Vec<Assignment>,
    pub record: IterationRecord,
}

/// Scores `params` on the validation split: addressee accuracy (all and
/// top-confidence), mean lower-bound terms under the exact posterior, and
/// gold-addressee generation metrics.
pub fn evaluate_iteration(
    params: &GeneratorParams<f32>,
    valid: &[Instance],
    vocab: &Vocabulary,
    cfg: &EmConfig,
    iteration: usize,
    alpha: f64,
) -> Result<ValidationSnapshot> {
    let scores = score_all(params, valid, vocab, cfg.train.max_context_len)?;
    let assignments: Vec<Assignment> = posteriors_for(valid, &scores)
        .iter()
        .map(hard_assign)
        .collect();
    let gold: Vec<Option<usize>> = valid.iter().map(|i| i.gold_addressee).collect();
    let all_addr_acc = addressee_accuracy(&assignments, &gold, None)?;
    let sel_addr_acc = addressee_accuracy(&assignments, &gold, Some(cfg.report_top_fraction))?;
    let mut elbo_hat = 0.0;
    let mut entropy = 0.0;
    for s in &scores {
        let r = elbo_from_scores(s, None)?;
        elbo_hat += r.expected_complete;
        entropy += r.entropy;
    }
    let metrics = evaluate_generation(params, valid, vocab, &cfg.decode)?;
    Ok(ValidationSnapshot {
        assignments,
        record: IterationRecord {
            iteration,
            alpha,
            sel_addr_acc,
            all_addr_acc,
            bleu: metrics.bleu,
            rouge_l: metrics.rouge_l,
            mean_elbo_hat: elbo_hat / valid.len() as f64,
            mean_entropy: entropy / valid.len() as f64,
            seconds: 0.0,
        },
    })
}

/// Where an EM run starts: fresh, or after `log.records.len()` completed
/// iterations.
#[derive(Debug, Clone)]
pub struct EmState {
    pub params: GeneratorParams<f32>,
    pub log: IterationLog,
    pub best: Option<GeneratorParams<f32>>,
    /// Validation assignments from the latest model, if already computed.
    pub valid_assignments: Option<Vec<Assignment>>,
}

impl EmState {
    pub fn fresh(model_cfg: &ModelConfig) -> Result<Self> {
        Ok(EmState {
            params: GeneratorParams::init(model_cfg)?,
            log: IterationLog::default(),
            best: None,
            valid_assignments: None,
        })
    }

    pub fn next_iteration(&self) -> usize {
        self.log.records.len()
    }
}

/// Hooks invoked after every completed iteration.
pub trait EmObserver {
    fn on_iteration(
        &mut self,
        _record: &IterationRecord,
        _params: &GeneratorParams<f32>,
        _is_best: bool,
        _assignments: &[Assignment],
    ) -> Result<()> {
        Ok(())
    }
}

impl EmObserver for () {}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub best_params: GeneratorParams<f32>,
    pub best_iteration: usize,
    pub final_params: GeneratorParams<f32>,
    pub log: IterationLog,
}

/// Runs iterations `0..=n_iterations`. Iteration 0 trains on
/// [`initial_labels`]; each later iteration runs E-step, hard assignment,
/// α calibration on `valid`, top-α selection and an M-step. The model with
/// the best validation BLEU-4 is returned as `best_params`.
pub fn run_em(
    train: &[Instance],
    valid: &[Instance],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &EmConfig,
) -> Result<EmOutcome> {
    run_em_from(train, valid, vocab, cfg, EmState::fresh(model_cfg)?, &mut ())
}

pub fn run_em_from(
    train: &[Instance],
    valid: &[Instance],
    vocab: &Vocabulary,
    cfg: &EmConfig,
    mut state: EmState,
    observer: &mut dyn EmObserver,
) -> Result<EmOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if valid.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let gold_valid: Vec<Option<usize>> = valid.iter().map(|i| i.gold_addressee).collect();
    if let Some(i) = gold_valid.iter().position(Option::is_none) {
        return Err(Error::MissingLabel {
            dialogue_id: valid[i].dialogue_id.clone(),
            turn: valid[i].t,
        });
    }

    for iteration in state.next_iteration()..=cfg.n_iterations {
        let wrap = |e: Error| Error::Iteration {
            iteration,
            source: Box::new(e),
        };
        let started = Instant::now();
        let (selected, alpha) = if iteration == 0 {
            (initial_labels(train, cfg.init_strategy, cfg.seed).map_err(wrap)?, 1.0)
        } else {
            let posts = e_step(&state.params, train, vocab, cfg.train.max_context_len).map_err(wrap)?;
            let assignments: Vec<Assignment> = posts.iter().map(hard_assign).collect();
            let valid_assign = match state.valid_assignments.take() {
                Some(a) => a,
                None => e_step(&state.params, valid, vocab, cfg.train.max_context_len)
                    .map_err(wrap)?
                    .iter()
                    .map(hard_assign)
                    .collect(),
            };
            let alpha = calibrate_alpha(&valid_assign, &gold_valid, cfg).map_err(wrap)?;
            (select_top_alpha(&assignments, alpha), alpha)
        };

        m_step(&mut state.params, train, &selected, vocab, &cfg.train, iteration as u64)
            .map_err(wrap)?;

        let snapshot = evaluate_iteration(&state.params, valid, vocab, cfg, iteration, alpha)
            .map_err(wrap)?;
        let mut record = snapshot.record;
        if cfg.record_timing {
            record.seconds = started.elapsed().as_secs_f64();
        }
        state.log.records.push(record.clone());
        let is_best = state.log.best_iteration() == Some(iteration);
        if is_best || state.best.is_none() {
            state.best = Some(state.params.clone());
        }
        state.valid_assignments = Some(snapshot.assignments);
        observer
            .on_iteration(
                &record,
                &state.params,
                is_best,
                state.valid_assignments.as_deref().unwrap_or(&[]),
            )
            .map_err(wrap)?;
    }

    let best_iteration = state.log.best_iteration().unwrap_or(0);
    Ok(EmOutcome {
        best_params: state.best.unwrap_or_else(|| state.params.clone()),
        best_iteration,
        final_params: state.params,
        log: state.log,
    })
}
