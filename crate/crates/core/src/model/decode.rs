use super::params::{GeneratorParams, Scalar};
use super::transformer::next_token_log_probs;
use crate::error::Result;
use crate::text::{EOS, PAD};

fn masked_argmax<F: Scalar>(lp: &[F]) -> u32 {
    // strict `>` keeps the lowest id on ties
    let mut best = None;
    for (i, &x) in lp.iter().enumerate() {
        if i as u32 == PAD {
            continue;
        }
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i as u32, x)),
        }
    }
    best.map(|(i, _)| i).unwrap_or(EOS)
}

fn room<F: Scalar>(params: &GeneratorParams<F>, context_len: usize, max_len: usize) -> usize {
    // the last generated token is never fed back, hence the +1
    max_len.min((params.config.max_len + 1).saturating_sub(context_len))
}

/// Argmax decoding; ties go to the lowest id and PAD is never emitted.
/// Returns the generated ids without the terminating EOS.
pub fn greedy_decode<F: Scalar>(
    params: &GeneratorParams<F>,
    context_ids: &[u32],
    flags: &[u8],
    max_len: usize,
) -> Result<Vec<u32>> {
    let limit = room(params, context_ids.len(), max_len);
    let mut out = Vec::new();
    while out.len() < limit {
        let lp = next_token_log_probs(params, context_ids, flags, &out)?;
        let next = masked_argmax(&lp);
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    logprob: f64,
    finished: bool,
}

impl Hypothesis {
    /// Length counts the EOS for finished hypotheses.
    fn normalized(&self) -> f64 {
        let len = self.tokens.len() + usize::from(self.finished);
        if len == 0 {
            self.logprob
        } else {
            self.logprob / len as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub tokens: Vec<u32>,
    /// Unnormalized sequence log-probability (EOS included when emitted).
    pub logprob: f64,
}

/// Length-normalized beam search. With `beam == 1` this reproduces
/// [`greedy_decode`].
pub fn beam_decode<F: Scalar>(
    params: &GeneratorParams<F>,
    context_ids: &[u32],
    flags: &[u8],
    max_len: usize,
    beam: usize,
) -> Result<BeamOutput> {
    let beam = beam.max(1);
    let limit = room(params, context_ids.len(), max_len);
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..limit {
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (hi, hyp) in alive.iter().enumerate() {
            let lp = next_token_log_probs(params, context_ids, flags, &hyp.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                if tok as u32 == PAD {
                    continue;
                }
                candidates.push((hyp.logprob + l.to_f64().unwrap_or(f64::NAN), hi, tok as u32));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(beam);
        for &(lp, hi, tok) in candidates.iter().take(beam) {
            let mut h = Hypothesis {
                tokens: alive[hi].tokens.clone(),
                logprob: lp,
                finished: tok == EOS,
            };
            if h.finished {
                finished.push(h);
            } else {
                h.tokens.push(tok);
                next.push(h);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }

    let best = finished
        .into_iter()
        .chain(alive)
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.normalized()
                .partial_cmp(&b.normalized())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ib.cmp(ia))
        })
        .map(|(_, h)| h);
    Ok(match best {
        Some(h) => BeamOutput {
            tokens: h.tokens,
            logprob: h.logprob,
        },
        None => BeamOutput {
            tokens: Vec::new(),
            logprob: 0.0,
        },
    })
}

/// Unnormalized log-probability of `tokens` (plus EOS when `with_eos`)
/// after the context.
pub fn sequence_logprob<F: Scalar>(
    params: &GeneratorParams<F>,
    context_ids: &[u32],
    flags: &[u8],
    tokens: &[u32],
    with_eos: bool,
) -> Result<f64> {
    let mut total = 0.0;
    let n = tokens.len() + usize::from(with_eos);
    for i in 0..n {
        let lp = next_token_log_probs(params, context_ids, flags, &tokens[..i])?;
        let target = if i < tokens.len() { tokens[i] } else { EOS };
        total += lp[target as usize].to_f64().unwrap_or(f64::NAN);
    }
    Ok(total)
}
