//! Pre-norm causal transformer over `[context ⊕ response]` with an explicit
//! reverse pass. Input embedding at position `i` is
//! `token_emb[x_i] + pos_emb[i] + addr_emb[flag_i]`.

use super::params::{cst, GeneratorParams, LayerParams, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::text::EncodedInstance;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// out[m×n] = a[m×k] · b[k×n]
fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    out[..m * n].iter_mut().for_each(|x| *x = F::zero());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// db[k×n] += aᵀ · dout, with a[m×k], dout[m×n]
fn matmul_at_b_acc<F: Scalar>(a: &[F], dout: &[F], m: usize, k: usize, n: usize, db: &mut [F]) {
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (g, &dv) in dbrow.iter_mut().zip(drow) {
                *g += av * dv;
            }
        }
    }
}

/// da[m×k] = dout[m×n] · bᵀ, with b[k×n]
fn matmul_a_bt<F: Scalar>(dout: &[F], b: &[F], m: usize, k: usize, n: usize, da: &mut [F]) {
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] = drow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
}

struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

fn layer_norm<F: Scalar>(x: &[F], gain: &[F], bias: &[F], n: usize, d: usize) -> (Vec<F>, LnCache<F>) {
    let mut y = vec![F::zero(); n * d];
    let mut xhat = vec![F::zero(); n * d];
    let mut rstd = vec![F::zero(); n];
    let inv_d = F::one() / cst::<F>(d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let r = F::one() / (var + cst(LN_EPS)).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    cache: &LnCache<F>,
    gain: &[F],
    n: usize,
    d: usize,
    dgain: &mut [F],
    dbias: &mut [F],
) -> Vec<F> {
    let mut dx = vec![F::zero(); n * d];
    let inv_d = F::one() / cst::<F>(d as f64);
    let mut dxhat = vec![F::zero(); d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<F>() * inv_d;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

#[inline]
fn gelu<F: Scalar>(x: F) -> F {
    let c: F = cst(GELU_C);
    let a: F = cst(GELU_A);
    let half: F = cst(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<F: Scalar>(x: F) -> F {
    let c: F = cst(GELU_C);
    let a: F = cst(GELU_A);
    let half: F = cst(0.5);
    let three: F = cst(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

struct LayerCache<F> {
    ln1: LnCache<F>,
    a: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// heads × n × n, row-major, causal (zero above the diagonal)
    probs: Vec<F>,
    attn: Vec<F>,
    ln2: LnCache<F>,
    b: Vec<F>,
    u: Vec<F>,
    g: Vec<F>,
}

pub(crate) struct Forward<F> {
    pub n: usize,
    /// n × d, output of the final layer norm
    pub hidden: Vec<F>,
    layers: Vec<LayerCache<F>>,
    final_ln: Option<LnCache<F>>,
}

fn attention<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::one() / cst::<F>(dh as f64).sqrt();
    let mut probs = vec![F::zero(); heads * n * n];
    let mut out = vec![F::zero(); n * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            let prow = &mut probs[(h * n + i) * n..(h * n + i) * n + n];
            let mut max = F::neg_infinity();
            for j in 0..=i {
                let kj = &k[j * d + off..j * d + off + dh];
                let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<F>() * scale;
                prow[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut total = F::zero();
            for pj in prow[..=i].iter_mut() {
                *pj = (*pj - max).exp();
                total += *pj;
            }
            let inv = F::one() / total;
            let orow = &mut out[i * d + off..i * d + off + dh];
            for j in 0..=i {
                prow[j] *= inv;
                let pj = prow[j];
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += pj * vv;
                }
            }
        }
    }
    (out, probs)
}

fn validate_input<F: Scalar>(p: &GeneratorParams<F>, tokens: &[u32], flags: &[u8]) -> Result<()> {
    let cfg = &p.config;
    if tokens.len() > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_len,
        });
    }
    if tokens.is_empty() {
        return Err(Error::Empty("input sequence"));
    }
    debug_assert_eq!(tokens.len(), flags.len());
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Config(format!(
            "token id {bad} outside vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

pub(crate) fn forward<F: Scalar>(
    p: &GeneratorParams<F>,
    tokens: &[u32],
    flags: &[u8],
    keep_cache: bool,
) -> Result<Forward<F>> {
    validate_input(p, tokens, flags)?;
    let cfg = &p.config;
    let (n, d, dff) = (tokens.len(), cfg.d_model, cfg.d_ff);

    let mut x = vec![F::zero(); n * d];
    for i in 0..n {
        let te = p.token_emb.row(tokens[i] as usize);
        let pe = p.pos_emb.row(i);
        let ae = p.addr_emb.row(usize::from(flags[i] != 0));
        for j in 0..d {
            x[i * d + j] = te[j] + pe[j] + ae[j];
        }
    }

    let mut caches = Vec::with_capacity(if keep_cache { p.layers.len() } else { 0 });
    for layer in &p.layers {
        let (a, ln1) = layer_norm(&x, &layer.ln1_gain.data, &layer.ln1_bias.data, n, d);
        let mut q = vec![F::zero(); n * d];
        let mut k = vec![F::zero(); n * d];
        let mut v = vec![F::zero(); n * d];
        matmul(&a, &layer.w_q.data, n, d, d, &mut q);
        matmul(&a, &layer.w_k.data, n, d, d, &mut k);
        matmul(&a, &layer.w_v.data, n, d, d, &mut v);
        let (attn, probs) = attention(&q, &k, &v, n, d, cfg.n_heads);
        let mut proj = vec![F::zero(); n * d];
        matmul(&attn, &layer.w_o.data, n, d, d, &mut proj);
        for (xi, pi) in x.iter_mut().zip(&proj) {
            *xi += *pi;
        }

        let (b, ln2) = layer_norm(&x, &layer.ln2_gain.data, &layer.ln2_bias.data, n, d);
        let mut u = vec![F::zero(); n * dff];
        matmul(&b, &layer.w_ff1.data, n, d, dff, &mut u);
        for i in 0..n {
            for (uj, &bj) in u[i * dff..(i + 1) * dff].iter_mut().zip(&layer.b_ff1.data) {
                *uj += bj;
            }
        }
        let g: Vec<F> = u.iter().map(|&v| gelu(v)).collect();
        let mut m = vec![F::zero(); n * d];
        matmul(&g, &layer.w_ff2.data, n, dff, d, &mut m);
        for i in 0..n {
            for j in 0..d {
                x[i * d + j] += m[i * d + j] + layer.b_ff2.data[j];
            }
        }

        if keep_cache {
            caches.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                attn,
                ln2,
                b,
                u,
                g,
            });
        }
    }

    let (hidden, lnf) = layer_norm(&x, &p.final_ln_gain.data, &p.final_ln_bias.data, n, d);
    Ok(Forward {
        n,
        hidden,
        layers: caches,
        final_ln: keep_cache.then_some(lnf),
    })
}

fn layer_backward<F: Scalar>(
    layer: &LayerParams<F>,
    c: &LayerCache<F>,
    dx: &mut [F],
    grads: &mut LayerParams<F>,
    n: usize,
    d: usize,
    dff: usize,
    heads: usize,
) {
    // feed-forward branch: x_out = h + g·W2 + b2
    for i in 0..n {
        for j in 0..d {
            grads.b_ff2.data[j] += dx[i * d + j];
        }
    }
    matmul_at_b_acc(&c.g, dx, n, dff, d, &mut grads.w_ff2.data);
    let mut du = vec![F::zero(); n * dff];
    matmul_a_bt(dx, &layer.w_ff2.data, n, dff, d, &mut du);
    for (dui, &ui) in du.iter_mut().zip(&c.u) {
        *dui *= gelu_grad(ui);
    }
    for i in 0..n {
        for j in 0..dff {
            grads.b_ff1.data[j] += du[i * dff + j];
        }
    }
    matmul_at_b_acc(&c.b, &du, n, d, dff, &mut grads.w_ff1.data);
    let mut db = vec![F::zero(); n * d];
    matmul_a_bt(&du, &layer.w_ff1.data, n, d, dff, &mut db);
    let dh_ln = layer_norm_backward(
        &db,
        &c.ln2,
        &layer.ln2_gain.data,
        n,
        d,
        &mut grads.ln2_gain.data,
        &mut grads.ln2_bias.data,
    );
    for (a, b) in dx.iter_mut().zip(&dh_ln) {
        *a += *b;
    }

    // attention branch: h = x + attn·Wo
    matmul_at_b_acc(&c.attn, dx, n, d, d, &mut grads.w_o.data);
    let mut dattn = vec![F::zero(); n * d];
    matmul_a_bt(dx, &layer.w_o.data, n, d, d, &mut dattn);

    let dh = d / heads;
    let scale = F::one() / cst::<F>(dh as f64).sqrt();
    let mut dq = vec![F::zero(); n * d];
    let mut dk = vec![F::zero(); n * d];
    let mut dv = vec![F::zero(); n * d];
    let mut dp = vec![F::zero(); n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let prow = &c.probs[(h * n + i) * n..(h * n + i) * n + n];
            let doi = &dattn[i * d + off..i * d + off + dh];
            let mut dot = F::zero();
            for j in 0..=i {
                let vj = &c.v[j * d + off..j * d + off + dh];
                dp[j] = doi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                dot += prow[j] * dp[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (g, &o) in dvj.iter_mut().zip(doi) {
                    *g += prow[j] * o;
                }
            }
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == F::zero() {
                    continue;
                }
                for t in 0..dh {
                    dq[i * d + off + t] += ds * c.k[j * d + off + t];
                    dk[j * d + off + t] += ds * c.q[i * d + off + t];
                }
            }
        }
    }
    matmul_at_b_acc(&c.a, &dq, n, d, d, &mut grads.w_q.data);
    matmul_at_b_acc(&c.a, &dk, n, d, d, &mut grads.w_k.data);
    matmul_at_b_acc(&c.a, &dv, n, d, d, &mut grads.w_v.data);
    let mut da = vec![F::zero(); n * d];
    let mut tmp = vec![F::zero(); n * d];
    for (dm, w) in [(&dq, &layer.w_q), (&dk, &layer.w_k), (&dv, &layer.w_v)] {
        matmul_a_bt(dm, &w.data, n, d, d, &mut tmp);
        for (a, t) in da.iter_mut().zip(&tmp) {
            *a += *t;
        }
    }
    let dx_ln = layer_norm_backward(
        &da,
        &c.ln1,
        &layer.ln1_gain.data,
        n,
        d,
        &mut grads.ln1_gain.data,
        &mut grads.ln1_bias.data,
    );
    for (a, b) in dx.iter_mut().zip(&dx_ln) {
        *a += *b;
    }
}

/// Propagates `d_hidden` (gradient w.r.t. the final layer-norm output)
/// back through the network, accumulating into `grads`.
pub(crate) fn backward<F: Scalar>(
    p: &GeneratorParams<F>,
    fwd: &Forward<F>,
    tokens: &[u32],
    flags: &[u8],
    d_hidden: &[F],
    grads: &mut GeneratorParams<F>,
) {
    let cfg = &p.config;
    let (n, d, dff) = (fwd.n, cfg.d_model, cfg.d_ff);
    let lnf = fwd
        .final_ln
        .as_ref()
        .expect("backward requires a forward pass with cache");
    let mut dx = layer_norm_backward(
        d_hidden,
        lnf,
        &p.final_ln_gain.data,
        n,
        d,
        &mut grads.final_ln_gain.data,
        &mut grads.final_ln_bias.data,
    );
    for (li, layer) in p.layers.iter().enumerate().rev() {
        layer_backward(
            layer,
            &fwd.layers[li],
            &mut dx,
            &mut grads.layers[li],
            n,
            d,
            dff,
            cfg.n_heads,
        );
    }
    for i in 0..n {
        let g = &dx[i * d..(i + 1) * d];
        add_row(&mut grads.token_emb, tokens[i] as usize, g);
        add_row(&mut grads.pos_emb, i, g);
        add_row(&mut grads.addr_emb, usize::from(flags[i] != 0), g);
    }
}

fn add_row<F: Scalar>(t: &mut Tensor<F>, r: usize, g: &[F]) {
    for (a, &b) in t.row_mut(r).iter_mut().zip(g) {
        *a += b;
    }
}

/// Numerically stable log-softmax of `hidden_row · output`.
pub(crate) fn log_probs_at<F: Scalar>(p: &GeneratorParams<F>, hidden_row: &[F]) -> Vec<F> {
    let (d, v) = (p.config.d_model, p.config.vocab_size);
    let mut logits = vec![F::zero(); v];
    matmul(hidden_row, &p.output.data, 1, d, v, &mut logits);
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<F>().ln();
    logits.iter_mut().for_each(|l| *l -= lse);
    logits
}

/// Teacher-forcing input: the context followed by all response tokens but
/// the last, flags cleared on response positions.
pub(crate) fn teacher_forcing_input(enc: &EncodedInstance) -> (Vec<u32>, Vec<u8>) {
    let nr = enc.response_ids.len();
    let mut tokens = enc.context_ids.clone();
    tokens.extend_from_slice(&enc.response_ids[..nr.saturating_sub(1)]);
    let mut flags = enc.addressee_flags.clone();
    flags.resize(tokens.len(), 0);
    (tokens, flags)
}

/// Log-probability of each response token (EOS included) under teacher forcing.
pub fn response_token_logprobs<F: Scalar>(
    p: &GeneratorParams<F>,
    enc: &EncodedInstance,
) -> Result<Vec<f64>> {
    if enc.context_ids.is_empty() || enc.response_ids.is_empty() {
        return Err(Error::Empty("context or response"));
    }
    let (tokens, flags) = teacher_forcing_input(enc);
    let fwd = forward(p, &tokens, &flags, false)?;
    let d = p.config.d_model;
    let c = enc.context_ids.len();
    Ok(enc
        .response_ids
        .iter()
        .enumerate()
        .map(|(i, &target)| {
            let pos = c - 1 + i;
            let lp = log_probs_at(p, &fwd.hidden[pos * d..(pos + 1) * d]);
            lp[target as usize].to_f64().unwrap_or(f64::NAN)
        })
        .collect())
}

/// `Σ_i log p(w_i | w_<i, context, flags)` over the response including EOS.
pub fn response_loglik<F: Scalar>(p: &GeneratorParams<F>, enc: &EncodedInstance) -> Result<f64> {
    Ok(response_token_logprobs(p, enc)?.iter().sum())
}

/// Next-token log-distribution after `context ⊕ prefix`.
pub fn next_token_log_probs<F: Scalar>(
    p: &GeneratorParams<F>,
    context_ids: &[u32],
    flags: &[u8],
    prefix: &[u32],
) -> Result<Vec<F>> {
    let mut tokens = context_ids.to_vec();
    tokens.extend_from_slice(prefix);
    let mut fl = flags.to_vec();
    fl.resize(tokens.len(), 0);
    let fwd = forward(p, &tokens, &fl, false)?;
    let d = p.config.d_model;
    let last = fwd.n - 1;
    Ok(log_probs_at(p, &fwd.hidden[last * d..(last + 1) * d]))
}

/// Sum of per-token NLL of one instance; accumulates `weight`-scaled
/// gradients into `grads`.
pub(crate) fn accumulate_instance<F: Scalar>(
    p: &GeneratorParams<F>,
    enc: &EncodedInstance,
    weight: F,
    grads: &mut GeneratorParams<F>,
) -> Result<f64> {
    if enc.context_ids.is_empty() || enc.response_ids.is_empty() {
        return Err(Error::Empty("context or response"));
    }
    let (tokens, flags) = teacher_forcing_input(enc);
    let fwd = forward(p, &tokens, &flags, true)?;
    let (d, v) = (p.config.d_model, p.config.vocab_size);
    let c = enc.context_ids.len();
    let mut d_hidden = vec![F::zero(); fwd.n * d];
    let mut nll = 0.0;
    let mut dlogits = vec![F::zero(); v];
    for (i, &target) in enc.response_ids.iter().enumerate() {
        let pos = c - 1 + i;
        let row = &fwd.hidden[pos * d..(pos + 1) * d];
        let lp = log_probs_at(p, row);
        nll -= lp[target as usize].to_f64().unwrap_or(f64::NAN);
        for (g, &l) in dlogits.iter_mut().zip(&lp) {
            *g = l.exp() * weight;
        }
        dlogits[target as usize] -= weight;
        matmul_at_b_acc(row, &dlogits, 1, d, v, &mut grads.output.data);
        matmul_a_bt(
            &dlogits,
            &p.output.data,
            1,
            d,
            v,
            &mut d_hidden[pos * d..(pos + 1) * d],
        );
    }
    backward(p, &fwd, &tokens, &flags, &d_hidden, grads);
    Ok(nll)
}

/// Token-mean negative log-likelihood over the batch and its gradient.
/// Instances are accumulated sequentially in batch order.
pub fn loss_and_grads<F: Scalar>(
    p: &GeneratorParams<F>,
    batch: &[&EncodedInstance],
) -> Result<(f64, GeneratorParams<F>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total_tokens: usize = batch.iter().map(|e| e.response_ids.len()).sum();
    let weight = F::one() / cst::<F>(total_tokens as f64);
    let mut grads = p.zeros_like();
    let mut nll = 0.0;
    for enc in batch {
        nll += accumulate_instance(p, enc, weight, &mut grads)?;
    }
    Ok((nll / total_tokens as f64, grads))
}
