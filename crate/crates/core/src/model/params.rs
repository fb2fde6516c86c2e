use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type of the generator. Training uses `f32`;
/// `f64` is available for numerically demanding checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
        + Default
        + Debug
        + Send
        + Sync
        + 'static
{
}

#[inline]
pub(crate) fn cst<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Maximum total sequence length (context plus response).
    pub max_len: usize,
    pub init_scale: f32,
    pub seed: u64,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_len == 0 {
            return bad("sizes must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    fn uniform(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let u: f32 = rng.gen_range(-1.0f32..=1.0f32);
                cst(f64::from(u * scale))
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn row(&self, r: usize) -> &[F] {
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        let w = self.shape[1];
        &mut self.data[r * w..(r + 1) * w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub w_o: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
    pub w_ff1: Tensor<F>,
    pub b_ff1: Tensor<F>,
    pub w_ff2: Tensor<F>,
    pub b_ff2: Tensor<F>,
}

/// All learnable arrays of the conditional generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<F = f32> {
    pub config: ModelConfig,
    pub token_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    /// Row 0: outside the addressee utterance. Row 1: inside it.
    pub addr_emb: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_ln_gain: Tensor<F>,
    pub final_ln_bias: Tensor<F>,
    pub output: Tensor<F>,
}

impl<F: Scalar> GeneratorParams<F> {
    /// Seeded uniform initialisation in `[-init_scale, init_scale]` for
    /// embeddings and projections; layer-norm gains 1, all biases 0.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let s = cfg.init_scale;
        let (v, d, l, f) = (cfg.vocab_size, cfg.d_model, cfg.max_len, cfg.d_ff);
        let token_emb = Tensor::uniform(&[v, d], s, &mut rng);
        let pos_emb = Tensor::uniform(&[l, d], s, &mut rng);
        let addr_emb = Tensor::uniform(&[2, d], s, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::filled(&[d], F::one()),
                ln1_bias: Tensor::zeros(&[d]),
                w_q: Tensor::uniform(&[d, d], s, &mut rng),
                w_k: Tensor::uniform(&[d, d], s, &mut rng),
                w_v: Tensor::uniform(&[d, d], s, &mut rng),
                w_o: Tensor::uniform(&[d, d], s, &mut rng),
                ln2_gain: Tensor::filled(&[d], F::one()),
                ln2_bias: Tensor::zeros(&[d]),
                w_ff1: Tensor::uniform(&[d, f], s, &mut rng),
                b_ff1: Tensor::zeros(&[f]),
                w_ff2: Tensor::uniform(&[f, d], s, &mut rng),
                b_ff2: Tensor::zeros(&[d]),
            })
            .collect();
        let output = Tensor::uniform(&[d, v], s, &mut rng);
        Ok(GeneratorParams {
            config: cfg.clone(),
            token_emb,
            pos_emb,
            addr_emb,
            layers,
            final_ln_gain: Tensor::filled(&[d], F::one()),
            final_ln_bias: Tensor::zeros(&[d]),
            output,
        })
    }

    /// Same layout with every entry zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.blocks_mut() {
            t.data.iter_mut().for_each(|x| *x = F::zero());
        }
        z
    }

    /// Parameter blocks in a fixed, named order.
    pub fn blocks(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("token_emb".to_string(), &self.token_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("addr_emb".to_string(), &self.addr_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("ln1_gain"), &l.ln1_gain),
                (p("ln1_bias"), &l.ln1_bias),
                (p("w_q"), &l.w_q),
                (p("w_k"), &l.w_k),
                (p("w_v"), &l.w_v),
                (p("w_o"), &l.w_o),
                (p("ln2_gain"), &l.ln2_gain),
                (p("ln2_bias"), &l.ln2_bias),
                (p("w_ff1"), &l.w_ff1),
                (p("b_ff1"), &l.b_ff1),
                (p("w_ff2"), &l.w_ff2),
                (p("b_ff2"), &l.b_ff2),
            ]);
        }
        out.extend([
            ("final_ln_gain".to_string(), &self.final_ln_gain),
            ("final_ln_bias".to_string(), &self.final_ln_bias),
            ("output".to_string(), &self.output),
        ]);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![
            ("token_emb".to_string(), &mut self.token_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
            ("addr_emb".to_string(), &mut self.addr_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("ln1_gain"), &mut l.ln1_gain),
                (p("ln1_bias"), &mut l.ln1_bias),
                (p("w_q"), &mut l.w_q),
                (p("w_k"), &mut l.w_k),
                (p("w_v"), &mut l.w_v),
                (p("w_o"), &mut l.w_o),
                (p("ln2_gain"), &mut l.ln2_gain),
                (p("ln2_bias"), &mut l.ln2_bias),
                (p("w_ff1"), &mut l.w_ff1),
                (p("b_ff1"), &mut l.b_ff1),
                (p("w_ff2"), &mut l.w_ff2),
                (p("b_ff2"), &mut l.b_ff2),
            ]);
        }
        out.extend([
            ("final_ln_gain".to_string(), &mut self.final_ln_gain),
            ("final_ln_bias".to_string(), &mut self.final_ln_bias),
            ("output".to_string(), &mut self.output),
        ]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|(_, t)| t.data.len()).sum()
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for (_, t) in self.blocks_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|x| {
                let v = x.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.blocks() {
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    /// Element-type conversion (e.g. to `f64` for finite-difference checks).
    pub fn cast<G: Scalar>(&self) -> GeneratorParams<G> {
        let conv = |t: &Tensor<F>| Tensor {
            shape: t.shape.clone(),
            data: t
                .data
                .iter()
                .map(|x| G::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
        };
        GeneratorParams {
            config: self.config.clone(),
            token_emb: conv(&self.token_emb),
            pos_emb: conv(&self.pos_emb),
            addr_emb: conv(&self.addr_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: conv(&l.ln1_gain),
                    ln1_bias: conv(&l.ln1_bias),
                    w_q: conv(&l.w_q),
                    w_k: conv(&l.w_k),
                    w_v: conv(&l.w_v),
                    w_o: conv(&l.w_o),
                    ln2_gain: conv(&l.ln2_gain),
                    ln2_bias: conv(&l.ln2_bias),
                    w_ff1: conv(&l.w_ff1),
                    b_ff1: conv(&l.b_ff1),
                    w_ff2: conv(&l.w_ff2),
                    b_ff2: conv(&l.b_ff2),
                })
                .collect(),
            final_ln_gain: conv(&self.final_ln_gain),
            final_ln_bias: conv(&self.final_ln_bias),
            output: conv(&self.output),
        }
    }
}
