//! Parameter tensors of the toy transformer and their canonical manifest.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::scalar::Real;

/// Projections of one attention head. `wq`, `wk`, `wv` are `model_dim × head_dim`,
/// `wo` is `head_dim × model_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T> {
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub heads: Vec<HeadWeights<T>>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
    /// `model_dim × ff_dim`
    pub ff_w1: Vec<T>,
    pub ff_b1: Vec<T>,
    /// `ff_dim × model_dim`
    pub ff_w2: Vec<T>,
    pub ff_b2: Vec<T>,
}

/// All parameters. Pre-norm decoder-only transformer with learned positions
/// and the output projection tied to the token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub cfg: ModelConfig,
    /// `vocab_size × model_dim`
    pub tok_emb: Vec<T>,
    /// `max_seq_len × model_dim`
    pub pos_emb: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: Vec<T>,
    pub lnf_bias: Vec<T>,
}

/// Name and shape of one tensor in the checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered tensor manifest for a configuration.
pub fn manifest(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let d = cfg.model_dim;
    let hd = cfg.head_dim();
    let f = cfg.ff_dim();
    let spec = |name: String, shape: &[usize]| TensorSpec {
        name,
        shape: shape.to_vec(),
    };
    let mut out = vec![
        spec("tok_emb".into(), &[cfg.vocab_size, d]),
        spec("pos_emb".into(), &[cfg.max_seq_len, d]),
    ];
    for l in 0..cfg.num_layers {
        out.push(spec(format!("layers.{l}.ln1.gain"), &[d]));
        out.push(spec(format!("layers.{l}.ln1.bias"), &[d]));
        for h in 0..cfg.num_heads {
            out.push(spec(format!("layers.{l}.heads.{h}.wq"), &[d, hd]));
            out.push(spec(format!("layers.{l}.heads.{h}.wk"), &[d, hd]));
            out.push(spec(format!("layers.{l}.heads.{h}.wv"), &[d, hd]));
            out.push(spec(format!("layers.{l}.heads.{h}.wo"), &[hd, d]));
        }
        out.push(spec(format!("layers.{l}.ln2.gain"), &[d]));
        out.push(spec(format!("layers.{l}.ln2.bias"), &[d]));
        out.push(spec(format!("layers.{l}.ff.w1"), &[d, f]));
        out.push(spec(format!("layers.{l}.ff.b1"), &[f]));
        out.push(spec(format!("layers.{l}.ff.w2"), &[f, d]));
        out.push(spec(format!("layers.{l}.ff.b2"), &[d]));
    }
    out.push(spec("ln_f.gain".into(), &[d]));
    out.push(spec("ln_f.bias".into(), &[d]));
    out
}

impl<T: Real> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let hd = cfg.head_dim();
        let f = cfg.ff_dim();
        let z = |n: usize| vec![T::ZERO; n];
        Self {
            cfg: *cfg,
            tok_emb: z(cfg.vocab_size * d),
            pos_emb: z(cfg.max_seq_len * d),
            layers: (0..cfg.num_layers)
                .map(|_| LayerParams {
                    ln1_gain: z(d),
                    ln1_bias: z(d),
                    heads: (0..cfg.num_heads)
                        .map(|_| HeadWeights {
                            wq: z(d * hd),
                            wk: z(d * hd),
                            wv: z(d * hd),
                            wo: z(hd * d),
                        })
                        .collect(),
                    ln2_gain: z(d),
                    ln2_bias: z(d),
                    ff_w1: z(d * f),
                    ff_b1: z(f),
                    ff_w2: z(f * d),
                    ff_b2: z(d),
                })
                .collect(),
            lnf_gain: z(d),
            lnf_bias: z(d),
        }
    }

    /// Tensors in manifest order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            out.push(&layer.ln1_gain);
            out.push(&layer.ln1_bias);
            for h in &layer.heads {
                out.extend([&h.wq[..], &h.wk[..], &h.wv[..], &h.wo[..]]);
            }
            out.extend([
                &layer.ln2_gain[..],
                &layer.ln2_bias[..],
                &layer.ff_w1[..],
                &layer.ff_b1[..],
                &layer.ff_w2[..],
                &layer.ff_b2[..],
            ]);
        }
        out.extend([&self.lnf_gain[..], &self.lnf_bias[..]]);
        out
    }

    /// Mutable tensors in manifest order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.push(&mut layer.ln1_gain);
            out.push(&mut layer.ln1_bias);
            for h in &mut layer.heads {
                out.extend([&mut h.wq, &mut h.wk, &mut h.wv, &mut h.wo]);
            }
            out.extend([
                &mut layer.ln2_gain,
                &mut layer.ln2_bias,
                &mut layer.ff_w1,
                &mut layer.ff_b1,
                &mut layer.ff_w2,
                &mut layer.ff_b2,
            ]);
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn convert<U: Real>(&self) -> Params<U> {
        let mut out = Params::<U>::zeros(&self.cfg);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = U::from_f64(s.to_f64());
            }
        }
        out
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(T::ZERO);
        }
    }

    /// `self += scale * other`, elementwise across every tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

impl Params<f32> {
    /// Seeded initialization: unit gains, zero biases, Gaussian matrices with
    /// `1/sqrt(fan_in)` scale (residual-writing projections further scaled by
    /// `1/sqrt(2·num_layers)`).
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = Self::zeros(cfg);
        let d = cfg.model_dim as f32;
        let f = cfg.ff_dim() as f32;
        let resid = 1.0 / libm::sqrtf(2.0 * cfg.num_layers as f32);
        let mut fill = |t: &mut Vec<f32>, std: f32| {
            let normal = Normal::new(0.0f32, std).expect("positive std");
            for v in t.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        };
        fill(&mut p.tok_emb, 1.0 / libm::sqrtf(d));
        fill(&mut p.pos_emb, 0.5 / libm::sqrtf(d));
        for layer in &mut p.layers {
            layer.ln1_gain.fill(1.0);
            layer.ln2_gain.fill(1.0);
            for h in &mut layer.heads {
                fill(&mut h.wq, 1.0 / libm::sqrtf(d));
                fill(&mut h.wk, 1.0 / libm::sqrtf(d));
                fill(&mut h.wv, 1.0 / libm::sqrtf(d));
                fill(&mut h.wo, resid / libm::sqrtf(d));
            }
            fill(&mut layer.ff_w1, 1.0 / libm::sqrtf(d));
            fill(&mut layer.ff_w2, resid / libm::sqrtf(f));
        }
        p.lnf_gain.fill(1.0);
        p
    }

    /// FNV-1a over the bit patterns of every parameter in manifest order.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t {
                for b in v.to_bits().to_le_bytes() {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        hash
    }

    /// True when every parameter has the same bit pattern.
    pub fn bit_equal(&self, other: &Self) -> bool {
        self.cfg == other.cfg
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}
