//! Dialogue transcripts, JSONL ingestion, filtering, the planted-structure
//! generator and train/valid/test splitting.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: usize,
    pub tokens: Vec<String>,
    /// 1-based index of the earlier turn this utterance replies to.
    pub addressee: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn n_speakers(&self) -> usize {
        self.utterances
            .iter()
            .map(|u| u.speaker)
            .collect::<HashSet<_>>()
            .len()
    }

    /// Checks the per-utterance invariants: non-empty tokens and addressees
    /// pointing strictly backwards.
    pub fn validate(&self) -> Result<()> {
        for (i, utt) in self.utterances.iter().enumerate() {
            let turn = i + 1;
            if utt.tokens.is_empty() {
                return Err(self.invalid(turn, "utterance has no tokens".into()));
            }
            if let Some(a) = utt.addressee {
                if a == 0 || a >= turn {
                    return Err(self.invalid(
                        turn,
                        format!("addressee {a} out of range 1..{}", turn.saturating_sub(1)),
                    ));
                }
            }
        }
        Ok(())
    }

    fn invalid(&self, turn: usize, message: String) -> Error {
        Error::InvalidDialogue {
            dialogue_id: self.id.clone(),
            turn,
            message,
        }
    }
}

/// One response-generation example: turn `t` of a dialogue given turns `1..t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub dialogue_id: String,
    /// 1-based index of the response turn, always >= 2.
    pub t: usize,
    pub context: Vec<Utterance>,
    pub response_speaker: usize,
    pub response: Vec<String>,
    pub gold_addressee: Option<usize>,
}

impl Instance {
    /// Number of addressee candidates (all earlier turns).
    pub fn n_candidates(&self) -> usize {
        self.t - 1
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceRecord {
    speaker: usize,
    text: String,
    #[serde(default)]
    addressee: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    utterances: Vec<UtteranceRecord>,
}

impl From<DialogueRecord> for Dialogue {
    fn from(rec: DialogueRecord) -> Self {
        Dialogue {
            id: rec.id,
            utterances: rec
                .utterances
                .into_iter()
                .map(|u| Utterance {
                    speaker: u.speaker,
                    tokens: u.text.split_whitespace().map(str::to_owned).collect(),
                    addressee: u.addressee,
                })
                .collect(),
        }
    }
}

impl From<&Dialogue> for DialogueRecord {
    fn from(d: &Dialogue) -> Self {
        DialogueRecord {
            id: d.id.clone(),
            utterances: d
                .utterances
                .iter()
                .map(|u| UtteranceRecord {
                    speaker: u.speaker,
                    text: u.tokens.join(" "),
                    addressee: u.addressee,
                })
                .collect(),
        }
    }
}

/// Parses JSONL dialogue records from any reader. Line numbers in errors are 1-based.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogueRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        let dialogue = Dialogue::from(rec);
        dialogue.validate()?;
        out.push(dialogue);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file))
}

pub fn write_jsonl<W: Write>(mut writer: W, dialogues: &[Dialogue]) -> std::io::Result<()> {
    for d in dialogues {
        let line = serde_json::to_string(&DialogueRecord::from(d))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn save_jsonl(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&mut w, dialogues)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Drops dialogues with fewer than `min_turns` utterances.
pub fn filter_dialogues(dialogues: Vec<Dialogue>, min_turns: usize) -> Vec<Dialogue> {
    dialogues
        .into_iter()
        .filter(|d| d.len() >= min_turns)
        .collect()
}

/// Emits one instance per response turn `t >= 2`.
pub fn make_instances(dialogues: &[Dialogue]) -> Vec<Instance> {
    let mut out = Vec::new();
    for d in dialogues {
        for t in 2..=d.len() {
            let resp = &d.utterances[t - 1];
            out.push(Instance {
                dialogue_id: d.id.clone(),
                t,
                context: d.utterances[..t - 1].to_vec(),
                response_speaker: resp.speaker,
                response: resp.tokens.clone(),
                gold_addressee: resp.addressee,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Partitions dialogues by a seeded shuffle. Valid and test sizes are
/// `floor(ratio * n)`; the remainder goes to train. Each part keeps the
/// input order.
pub fn split(dialogues: &[Dialogue], ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::Config(format!("split ratios must be positive: {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {sum}, not 1")));
    }
    let n = dialogues.len();
    let n_valid = (ratios[1] * n as f64 + 1e-9).floor() as usize;
    let n_test = (ratios[2] * n as f64 + 1e-9).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut part = vec![0u8; n];
    for &i in &order[..n_valid] {
        part[i] = 1;
    }
    for &i in &order[n_valid..n_valid + n_test] {
        part[i] = 2;
    }

    let mut splits = Splits {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (d, p) in dialogues.iter().zip(part) {
        match p {
            0 => splits.train.push(d.clone()),
            1 => splits.valid.push(d.clone()),
            _ => splits.test.push(d.clone()),
        }
    }
    Ok(splits)
}

/// Parameters of the planted-addressee generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_dialogues: usize,
    pub turns_range: (usize, usize),
    pub n_speakers_range: (usize, usize),
    /// Background vocabulary size.
    pub vocab_size: usize,
    pub keyword_pool_size: usize,
    /// Number of background-or-copied tokens after the keyword.
    pub body_len_range: (usize, usize),
    pub copy_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_dialogues: 2000,
            turns_range: (4, 8),
            n_speakers_range: (3, 5),
            vocab_size: 60,
            keyword_pool_size: 40,
            body_len_range: (3, 4),
            copy_strength: 0.95,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.turns_range.0 < 4 || self.turns_range.0 > self.turns_range.1 {
            return bad("turns_range must satisfy 4 <= min <= max");
        }
        if self.n_speakers_range.0 < 2 || self.n_speakers_range.0 > self.n_speakers_range.1 {
            return bad("n_speakers_range must satisfy 2 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.copy_strength) {
            return bad("copy_strength must lie in [0, 1]");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.keyword_pool_size < self.turns_range.1 {
            return bad("keyword_pool_size must be at least the maximum turn count");
        }
        if self.body_len_range.0 > self.body_len_range.1 {
            return bad("body_len_range must satisfy min <= max");
        }
        Ok(())
    }
}

pub fn keyword_token(k: usize) -> String {
    format!("k{k}")
}

pub fn background_token(k: usize) -> String {
    format!("w{k}")
}

/// Generates dialogues whose responses copy the addressee's keyword.
///
/// Every utterance opens with a keyword unique within its dialogue, followed
/// by body tokens. For turns `t >= 2` the gold addressee is uniform over
/// `1..t`, and each body token is the addressee's keyword with probability
/// `copy_strength`, otherwise a Zipf-distributed background word.
pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<Vec<Dialogue>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zipf = WeightedIndex::new((0..cfg.vocab_size).map(|r| 1.0 / (r as f64 + 1.0)))
        .expect("positive weights");
    let pool: Vec<usize> = (0..cfg.keyword_pool_size).collect();

    let mut out = Vec::with_capacity(cfg.n_dialogues);
    for n in 0..cfg.n_dialogues {
        let turns = rng.gen_range(cfg.turns_range.0..=cfg.turns_range.1);
        let n_speakers = rng.gen_range(cfg.n_speakers_range.0..=cfg.n_speakers_range.1);
        let keywords: Vec<usize> = pool.choose_multiple(&mut rng, turns).copied().collect();

        let mut utterances: Vec<Utterance> = Vec::with_capacity(turns);
        let mut prev_speaker = None;
        for t in 1..=turns {
            // Consecutive turns never share a speaker, so every dialogue has >= 2.
            let speaker = loop {
                let s = rng.gen_range(0..n_speakers);
                if Some(s) != prev_speaker {
                    break s;
                }
            };
            prev_speaker = Some(speaker);
            let addressee = (t >= 2).then(|| rng.gen_range(1..t));

            let body_len = rng.gen_range(cfg.body_len_range.0..=cfg.body_len_range.1);
            let mut tokens = Vec::with_capacity(body_len + 1);
            tokens.push(keyword_token(keywords[t - 1]));
            for _ in 0..body_len {
                let copy = addressee.is_some() && rng.gen_bool(cfg.copy_strength);
                match addressee {
                    Some(z) if copy => tokens.push(keyword_token(keywords[z - 1])),
                    _ => tokens.push(background_token(zipf.sample(&mut rng))),
                }
            }
            utterances.push(Utterance {
                speaker,
                tokens,
                addressee,
            });
        }
        out.push(Dialogue {
            id: format!("synth-{n:06}"),
            utterances,
        });
    }
    Ok(out)
}
