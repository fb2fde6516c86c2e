#![allow(dead_code)]

use dialogem::model::{GeneratorParams, ModelConfig};
use dialogem::text::{CandidateSpan, EncodedInstance, EOS};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 5,
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        max_len: 16,
        init_scale: 0.5,
        seed: 11,
    }
}

/// Fixed instance used by the forward-pass oracle.
pub fn tiny_instance() -> EncodedInstance {
    EncodedInstance {
        context_ids: vec![4, 1, 3, 4, 3, 0],
        addressee_flags: vec![0, 1, 1, 0, 0, 0],
        response_ids: vec![1, EOS],
        candidate_spans: vec![CandidateSpan {
            turn: 1,
            start: 1,
            end: 3,
        }],
    }
}

pub fn params_json(p: &GeneratorParams<f32>) -> String {
    let mut blocks = serde_json::Map::new();
    for (name, t) in p.blocks() {
        blocks.insert(
            name,
            serde_json::json!({ "shape": t.shape, "data": t.data }),
        );
    }
    serde_json::json!({ "config": p.config, "blocks": blocks }).to_string()
}

/// Random encoded instance with `n_turns` context turns over vocabulary `v`
/// (ids >= 6), flags on turn `z`.
pub fn random_encoded(rng: &mut impl rand::Rng, v: u32, n_turns: usize, z: usize) -> EncodedInstance {
    let mut ids = Vec::new();
    let mut flags = Vec::new();
    let mut spans = Vec::new();
    for turn in 1..=n_turns {
        let start = ids.len();
        let len = rng.gen_range(1..4);
        ids.push(rng.gen_range(6..v));
        ids.push(5);
        for _ in 0..len {
            ids.push(rng.gen_range(6..v));
        }
        let end = ids.len();
        flags.resize(end, u8::from(turn == z));
        spans.push(CandidateSpan { turn, start, end });
        ids.push(3);
        flags.push(0);
    }
    ids.push(rng.gen_range(6..v));
    ids.push(5);
    flags.extend([0, 0]);
    let rlen = rng.gen_range(1..4);
    let mut resp: Vec<u32> = (0..rlen).map(|_| rng.gen_range(6..v)).collect();
    resp.push(EOS);
    EncodedInstance {
        context_ids: ids,
        addressee_flags: flags,
        response_ids: resp,
        candidate_spans: spans,
    }
}

/// Central finite-difference gradient check of the token-mean NLL.
/// Returns `(block name, relative error)` per block where relative error is
/// `‖analytic − numeric‖₂ / (‖analytic‖₂ + ‖numeric‖₂)`.
pub fn gradient_check(
    params: &GeneratorParams<f64>,
    batch: &[&EncodedInstance],
    h: f64,
) -> Vec<(String, f64)> {
    let (_, analytic) = dialogem::model::loss_and_grads(params, batch).unwrap();
    let loss = |p: &GeneratorParams<f64>| dialogem::model::loss_and_grads(p, batch).unwrap().0;
    let names: Vec<String> = params.blocks().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    for (bi, name) in names.iter().enumerate() {
        let len = params.blocks()[bi].1.data.len();
        let a = analytic.blocks()[bi].1.data.clone();
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        for i in 0..len {
            let mut plus = params.clone();
            plus.blocks_mut()[bi].1.data[i] += h;
            let mut minus = params.clone();
            minus.blocks_mut()[bi].1.data[i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            diff2 += (a[i] - numeric).powi(2);
            an2 += a[i] * a[i];
            nu2 += numeric * numeric;
        }
        let denom = an2.sqrt() + nu2.sqrt();
        let rel = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        out.push((name.clone(), rel));
    }
    out
}
