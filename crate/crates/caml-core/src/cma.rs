//! Cross-sample Mutual Attention: two sequential transformer encoder layers
//! over a (b, c, k) feature block. E1 attends within each sample across its
//! k spatial tokens; E2 attends across the b samples at each spatial
//! position. Neither stage uses positional encodings, so both are
//! permutation-equivariant over their token axes.
//!
//! Each encoder layer is residual with layer norm after each block:
//! `x + LN(Attention(x))`, then `x + LN(MLP(x))`. With zeroed output
//! projections (and zero LN bias) a layer is exactly the identity, which is
//! what lets an auxiliary branch collapse onto a CMA-free one for testing.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{CamlError, Result};
use crate::params::{kaiming_uniform, ones_param, zeros_param};

#[derive(Clone, Copy, Debug)]
pub struct CmaConfig {
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
}

impl Default for CmaConfig {
    fn default() -> Self {
        CmaConfig {
            channels: 32,
            heads: 4,
            mlp_ratio: 2.0,
        }
    }
}

impl CmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(CamlError::Config(format!(
                "channel count {} must be a positive multiple of the head count {}",
                self.channels, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(CamlError::Config(format!(
                "mlp_ratio {} must be > 0",
                self.mlp_ratio
            )));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.channels as f32 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// One transformer encoder layer: multi-head self-attention then a
/// two-layer MLP, each block followed by layer norm and joined residually.
#[derive(Clone)]
pub struct EncoderLayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl EncoderLayerParams {
    pub fn init(cfg: &CmaConfig, rng: &mut ChaCha8Rng) -> EncoderLayerParams {
        let c = cfg.channels;
        let h = cfg.mlp_hidden();
        EncoderLayerParams {
            wq: kaiming_uniform(rng, &[c, c], c),
            bq: zeros_param(&[c]),
            wk: kaiming_uniform(rng, &[c, c], c),
            bk: zeros_param(&[c]),
            wv: kaiming_uniform(rng, &[c, c], c),
            bv: zeros_param(&[c]),
            wo: kaiming_uniform(rng, &[c, c], c),
            bo: zeros_param(&[c]),
            ln1_gamma: ones_param(&[c]),
            ln1_beta: zeros_param(&[c]),
            w1: kaiming_uniform(rng, &[c, h], c),
            b1: zeros_param(&[h]),
            w2: kaiming_uniform(rng, &[h, c], h),
            b2: zeros_param(&[c]),
            ln2_gamma: ones_param(&[c]),
            ln2_beta: zeros_param(&[c]),
        }
    }

    /// Collapses the layer to the identity map by zeroing both output
    /// projections (used by the branch-equivalence test path).
    pub fn zero_output_projections(&self) {
        for t in [&self.wo, &self.bo, &self.w2, &self.b2] {
            for v in t.data_mut().value.iter_mut() {
                *v = 0.0;
            }
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
        .collect()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named("x").into_iter().map(|(_, t)| t).collect()
    }
}

#[derive(Clone)]
pub struct CmaParams {
    pub e1: EncoderLayerParams,
    pub e2: EncoderLayerParams,
}

impl CmaParams {
    pub fn init(cfg: &CmaConfig, rng: &mut ChaCha8Rng) -> CmaParams {
        CmaParams {
            e1: EncoderLayerParams::init(cfg, rng),
            e2: EncoderLayerParams::init(cfg, rng),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.e1.named(&format!("{prefix}.e1"));
        out.extend(self.e2.named(&format!("{prefix}.e2")));
        out
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named("x").into_iter().map(|(_, t)| t).collect()
    }
}

fn check_input(x: &Tensor, cfg: &CmaConfig) -> Result<[usize; 3]> {
    cfg.validate()?;
    let s = x.shape();
    if s.len() != 3 || s[1] != cfg.channels {
        return Err(CamlError::Shape(format!(
            "attention input must be (b, {}, k), got {s:?}",
            cfg.channels
        )));
    }
    Ok([s[0], s[1], s[2]])
}

/// One encoder layer over `tokens` shaped (groups, n, c): every group of n
/// tokens attends within itself. Score-matrix entries are counted on the
/// tape as groups * heads * n^2.
fn encoder_layer(
    tape: &Tape,
    tokens: &Tensor,
    p: &EncoderLayerParams,
    heads: usize,
) -> Result<Tensor> {
    let s = tokens.shape();
    let (g, n, c) = (s[0], s[1], s[2]);
    let dh = c / heads;

    let q = tape.linear(tokens, &p.wq, &p.bq)?;
    let k = tape.linear(tokens, &p.wk, &p.bk)?;
    let v = tape.linear(tokens, &p.wv, &p.bv)?;
    let split = |t: &Tensor| -> Result<Tensor> {
        let r = tape.reshape(t, &[g, n, heads, dh])?;
        tape.transpose(&r, &[0, 2, 1, 3])
    };
    let qh = split(&q)?;
    let kh = split(&k)?;
    let vh = split(&v)?;
    let kt = tape.transpose(&kh, &[0, 1, 3, 2])?;
    let scores = tape.scale(&tape.matmul(&qh, &kt)?, 1.0 / (dh as f32).sqrt())?;
    tape.add_attn_score_entries((g * heads * n * n) as u64);
    let attn = tape.softmax(&scores, 3)?;
    let ctx = tape.matmul(&attn, &vh)?;
    let merged = tape.reshape(&tape.transpose(&ctx, &[0, 2, 1, 3])?, &[g, n, c])?;
    let attn_out = tape.linear(&merged, &p.wo, &p.bo)?;
    let x1 = tape.add(tokens, &tape.layer_norm(&attn_out, &p.ln1_gamma, &p.ln1_beta)?)?;

    let hidden = tape.relu(&tape.linear(&x1, &p.w1, &p.b1)?)?;
    let mlp_out = tape.linear(&hidden, &p.w2, &p.b2)?;
    tape.add(&x1, &tape.layer_norm(&mlp_out, &p.ln2_gamma, &p.ln2_beta)?)
}

/// E1: intra-sample attention over the k spatial tokens of each sample.
pub fn e1_intra_attention(
    tape: &Tape,
    x: &Tensor,
    p: &EncoderLayerParams,
    cfg: &CmaConfig,
) -> Result<Tensor> {
    check_input(x, cfg)?;
    let tokens = tape.transpose(x, &[0, 2, 1])?; // (b, k, c)
    let out = encoder_layer(tape, &tokens, p, cfg.heads)?;
    tape.transpose(&out, &[0, 2, 1])
}

/// E2: inter-sample attention across the b samples at each spatial position.
pub fn e2_inter_attention(
    tape: &Tape,
    x: &Tensor,
    p: &EncoderLayerParams,
    cfg: &CmaConfig,
) -> Result<Tensor> {
    check_input(x, cfg)?;
    let tokens = tape.transpose(x, &[2, 0, 1])?; // (k, b, c)
    let out = encoder_layer(tape, &tokens, p, cfg.heads)?;
    tape.transpose(&out, &[1, 2, 0])
}

/// The full module: E2 after E1.
pub fn cma_forward(tape: &Tape, x: &Tensor, p: &CmaParams, cfg: &CmaConfig) -> Result<Tensor> {
    let intra = e1_intra_attention(tape, x, &p.e1, cfg)?;
    e2_inter_attention(tape, &intra, &p.e2, cfg)
}

/// Closed-form score-entry count of the factorized module.
pub fn factorized_score_entries(b: usize, k: usize, heads: usize) -> u64 {
    (b * k * k * heads + k * b * b * heads) as u64
}

/// Score-entry count had the module flattened all b*k tokens into one joint
/// attention.
pub fn joint_score_entries(b: usize, k: usize, heads: usize) -> u64 {
    let n = (b * k) as u64;
    n * n * heads as u64
}
