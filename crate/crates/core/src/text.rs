//! Vocabulary and the flattened model input
//! `S#a : U_1 [SEP] S#b : U_2 [SEP] ... S#c :` with per-token addressee flags.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::corpus::{Dialogue, Instance};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;
pub const COLON: u32 = 5;

const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "[SEP]", "<unk>", ":"];

pub fn speaker_token(speaker: usize) -> String {
    format!("S#{speaker}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn reserved_count() -> usize {
        RESERVED.len()
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Reserved tokens, then one `S#k` per speaker seen, then words with
    /// frequency `>= min_freq` (most frequent first, ties lexicographic),
    /// capped so the whole vocabulary has at most `max_size` entries.
    pub fn build(dialogues: &[Dialogue], min_freq: usize, max_size: usize) -> Vocabulary {
        let min_freq = min_freq.max(1);
        let mut speakers = BTreeSet::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for d in dialogues {
            for u in &d.utterances {
                speakers.insert(u.speaker);
                for tok in &u.tokens {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
            }
        }

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(speakers.into_iter().map(speaker_token));

        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(w, c)| c >= min_freq && !RESERVED.contains(&w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_size.saturating_sub(tokens.len());
        for (w, _) in words.into_iter().take(room) {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens).expect("tokens are unique by construction")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn speaker_id(&self, speaker: usize) -> u32 {
        self.id(&speaker_token(speaker))
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]).to_string())
            .collect()
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Vocabulary> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Config(
                "vocabulary file does not start with the reserved tokens".into(),
            ));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocabulary> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Token span of one context turn: speaker token up to (excluding) its `[SEP]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateSpan {
    /// 1-based turn index in the dialogue.
    pub turn: usize,
    pub start: usize,
    pub end: usize,
}

impl CandidateSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInstance {
    pub context_ids: Vec<u32>,
    pub addressee_flags: Vec<u8>,
    /// Response tokens followed by EOS.
    pub response_ids: Vec<u32>,
    pub candidate_spans: Vec<CandidateSpan>,
}

impl EncodedInstance {
    pub fn span_of(&self, turn: usize) -> Option<&CandidateSpan> {
        self.candidate_spans.iter().find(|s| s.turn == turn)
    }

    /// Copy with every addressee flag cleared.
    pub fn without_addressee(&self) -> EncodedInstance {
        EncodedInstance {
            addressee_flags: vec![0; self.addressee_flags.len()],
            ..self.clone()
        }
    }
}

/// Lays out `instance` and flags the span of candidate turn `z`
/// (`None` leaves every flag at 0).
///
/// When the context exceeds `max_context_len`, whole turns are dropped from
/// the oldest end, skipping turn `z`; the response-speaker prompt is always
/// kept.
pub fn encode_instance(
    instance: &Instance,
    z: Option<usize>,
    vocab: &Vocabulary,
    max_context_len: usize,
) -> Result<EncodedInstance> {
    let fail = |message: String| Error::Encoding {
        dialogue_id: instance.dialogue_id.clone(),
        turn: instance.t,
        message,
    };
    if let Some(z) = z {
        if z == 0 || z >= instance.t {
            return Err(fail(format!(
                "addressee candidate {z} out of range 1..{}",
                instance.t - 1
            )));
        }
    }

    // speaker, colon, tokens, SEP
    let turn_len = |i: usize| instance.context[i].tokens.len() + 3;
    const PROMPT_LEN: usize = 2;

    let mut keep = vec![true; instance.context.len()];
    let mut total: usize = (0..instance.context.len()).map(turn_len).sum::<usize>() + PROMPT_LEN;
    let mut next_drop = 0;
    while total > max_context_len {
        while next_drop < keep.len() && Some(next_drop + 1) == z {
            next_drop += 1;
        }
        if next_drop >= keep.len() {
            return Err(fail(format!(
                "context of {total} tokens cannot fit max_context_len {max_context_len}"
            )));
        }
        keep[next_drop] = false;
        total -= turn_len(next_drop);
        next_drop += 1;
    }

    let mut context_ids = Vec::with_capacity(total);
    let mut flags = Vec::with_capacity(total);
    let mut spans = Vec::new();
    for (i, utt) in instance.context.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        let turn = i + 1;
        let flag = u8::from(Some(turn) == z);
        let start = context_ids.len();
        context_ids.push(vocab.speaker_id(utt.speaker));
        context_ids.push(COLON);
        context_ids.extend(utt.tokens.iter().map(|t| vocab.id(t)));
        let end = context_ids.len();
        flags.resize(end, flag);
        spans.push(CandidateSpan { turn, start, end });
        context_ids.push(SEP);
        flags.push(0);
    }
    context_ids.push(vocab.speaker_id(instance.response_speaker));
    context_ids.push(COLON);
    flags.extend([0, 0]);

    let mut response_ids = vocab.encode(&instance.response);
    response_ids.push(EOS);

    Ok(EncodedInstance {
        context_ids,
        addressee_flags: flags,
        response_ids,
        candidate_spans: spans,
    })
}
