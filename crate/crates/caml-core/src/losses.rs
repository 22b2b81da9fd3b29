//! Loss terms and their assembly: the supervised CE + soft-Dice loss on the
//! labeled half, the cross-pseudo-supervision loss over the whole batch,
//! the Gaussian warm-up schedule for the consistency weights, and the final
//! weighted total.
//!
//! Pseudo-labels are hard argmaxes taken off the autodiff graph, so the
//! cross-supervision gradient never flows through the producing branch's
//! prediction — each branch only learns from the other's frozen guess.

use crate::autodiff::{Tape, Tensor};
use crate::error::{CamlError, Result};

/// Laplace-style smoothing inside the soft Dice ratio.
pub const DICE_SMOOTH: f32 = 1e-5;
/// Additive guard inside cross-entropy logarithms.
pub const CE_LOG_EPS: f32 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Warm-up ceiling for the cross-supervision weight.
    pub beta_c: f32,
    /// Warm-up ceiling for the omni-correlation weight.
    pub beta_o: f32,
    pub t_max: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_c: 1.0,
            beta_o: 0.1,
            t_max: 1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.beta_c < 0.0 || self.beta_o < 0.0 {
            return Err(CamlError::Config(format!(
                "loss weights must be nonnegative, got beta_c {} beta_o {}",
                self.beta_c, self.beta_o
            )));
        }
        if self.t_max == 0 {
            return Err(CamlError::Config("t_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scalar record of one iteration's loss assembly.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub l_s: f32,
    pub l_c: f32,
    pub l_o: f32,
    pub lambda_c: f32,
    pub lambda_o: f32,
    pub total: f32,
}

fn check_logits(logits: &Tensor, labels: &[u8]) -> Result<(usize, usize, usize)> {
    let s = logits.shape();
    if s.len() != 5 {
        return Err(CamlError::Shape(format!(
            "logits must be (b, C, D, H, W), got {s:?}"
        )));
    }
    let (b, c) = (s[0], s[1]);
    let spatial = s[2] * s[3] * s[4];
    if b == 0 {
        return Err(CamlError::Shape("no labeled samples in batch".into()));
    }
    if labels.len() != b * spatial {
        return Err(CamlError::Shape(format!(
            "labels length {} != {b} samples x {spatial} voxels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= c) {
        return Err(CamlError::Config(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    Ok((b, c, spatial))
}

fn one_hot_constant(labels: &[u8], shape: &[usize]) -> Tensor {
    let (b, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let mut vals = vec![0.0f32; b * c * spatial];
    for s in 0..b {
        for v in 0..spatial {
            let y = labels[s * spatial + v] as usize;
            vals[(s * c + y) * spatial + v] = 1.0;
        }
    }
    Tensor::from_vec(shape, vals)
}

fn ce_against_one_hot(tape: &Tape, logits: &Tensor, one_hot: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    let voxels: usize = s[0] * s[2..].iter().product::<usize>();
    let probs = tape.softmax(logits, 1)?;
    let logp = tape.log(&tape.add_const(&probs, CE_LOG_EPS)?)?;
    let picked = tape.mul(&logp, one_hot)?;
    tape.scale(&tape.sum(&picked)?, -1.0 / voxels as f32)
}

/// Voxel-mean cross-entropy of `logits` against integer `labels`.
pub fn cross_entropy_mean(tape: &Tape, logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    check_logits(logits, labels)?;
    let one_hot = one_hot_constant(labels, &logits.shape());
    ce_against_one_hot(tape, logits, &one_hot)
}

/// Soft Dice loss averaged over foreground channels:
/// `1 - (2 sum(p*g) + s) / (sum(p) + sum(g) + s)` per channel.
pub fn soft_dice_loss(tape: &Tape, logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let (b, c, spatial) = check_logits(logits, labels)?;
    let s = logits.shape();
    let probs = tape.softmax(logits, 1)?;
    // put the class axis first so per-channel views are batch slices
    let by_class = tape.transpose(&probs, &[1, 0, 2, 3, 4])?;
    let mut acc: Option<Tensor> = None;
    for cls in 1..c {
        let p_c = tape.slice_batch(&by_class, cls, 1)?;
        let mut g_vals = vec![0.0f32; b * spatial];
        let mut g_count = 0.0f32;
        for sidx in 0..b {
            for v in 0..spatial {
                if labels[sidx * spatial + v] as usize == cls {
                    g_vals[sidx * spatial + v] = 1.0;
                    g_count += 1.0;
                }
            }
        }
        let g_c = Tensor::from_vec(&[1, b, s[2], s[3], s[4]], g_vals);
        let numer = tape.add_const(&tape.scale(&tape.sum(&tape.mul(&p_c, &g_c)?)?, 2.0)?, DICE_SMOOTH)?;
        let denom = tape.add_const(&tape.sum(&p_c)?, g_count + DICE_SMOOTH)?;
        let dice = tape.div(&numer, &denom)?;
        let loss = tape.add_const(&tape.scale(&dice, -1.0)?, 1.0)?;
        acc = Some(match acc {
            None => loss,
            Some(a) => tape.add(&a, &loss)?,
        });
    }
    let total = acc.expect("n_classes >= 2 guarantees a foreground channel");
    tape.scale(&total, 1.0 / (c - 1) as f32)
}

/// Supervised loss on the labeled half: the branch-mean of
/// `(CE + soft Dice) / 2`.
pub fn supervised_loss(
    tape: &Tape,
    logits_v: &Tensor,
    logits_a: &Tensor,
    labels: &[u8],
) -> Result<Tensor> {
    if logits_v.shape() != logits_a.shape() {
        return Err(CamlError::Shape(format!(
            "branch logits disagree: {:?} vs {:?}",
            logits_v.shape(),
            logits_a.shape()
        )));
    }
    let mut per_branch = Vec::with_capacity(2);
    for logits in [logits_v, logits_a] {
        let ce = cross_entropy_mean(tape, logits, labels)?;
        let dice = soft_dice_loss(tape, logits, labels)?;
        per_branch.push(tape.scale(&tape.add(&ce, &dice)?, 0.5)?);
    }
    tape.scale(&tape.add(&per_branch[0], &per_branch[1])?, 0.5)
}

/// Per-voxel argmax pseudo-labels, detached from the graph by construction.
pub fn hard_pseudo_labels(logits: &Tensor) -> Result<Vec<u8>> {
    let s = logits.shape();
    if s.len() != 5 {
        return Err(CamlError::Shape(format!(
            "logits must be (b, C, D, H, W), got {s:?}"
        )));
    }
    let (b, c) = (s[0], s[1]);
    let spatial = s[2] * s[3] * s[4];
    let vals = logits.value();
    let mut out = vec![0u8; b * spatial];
    for sidx in 0..b {
        for v in 0..spatial {
            let mut best = 0usize;
            let mut best_val = vals[(sidx * c) * spatial + v];
            for cls in 1..c {
                let x = vals[(sidx * c + cls) * spatial + v];
                if x > best_val {
                    best_val = x;
                    best = cls;
                }
            }
            out[sidx * spatial + v] = best as u8;
        }
    }
    Ok(out)
}

/// Cross-pseudo-supervision: each branch is trained with voxel-mean CE
/// toward the other branch's frozen argmax prediction.
pub fn cps_loss(tape: &Tape, logits_v: &Tensor, logits_a: &Tensor) -> Result<Tensor> {
    if logits_v.shape() != logits_a.shape() {
        return Err(CamlError::Shape(format!(
            "branch logits disagree: {:?} vs {:?}",
            logits_v.shape(),
            logits_a.shape()
        )));
    }
    let pseudo_v = hard_pseudo_labels(logits_v)?;
    let pseudo_a = hard_pseudo_labels(logits_a)?;
    let ce_v = cross_entropy_mean(tape, logits_v, &pseudo_a)?;
    let ce_a = cross_entropy_mean(tape, logits_a, &pseudo_v)?;
    tape.add(&ce_v, &ce_a)
}

/// Gaussian warm-up `beta * exp(-5 (1 - t / t_max)^2)`, clamped to `beta`
/// past `t_max`.
pub fn warmup_weight(t: usize, t_max: usize, beta: f32) -> Result<f32> {
    if t_max == 0 {
        return Err(CamlError::Config("warm-up t_max must be positive".into()));
    }
    if t >= t_max {
        return Ok(beta);
    }
    let frac = t as f64 / t_max as f64;
    let exponent = -5.0 * (1.0 - frac) * (1.0 - frac);
    Ok(beta * exponent.exp() as f32)
}

/// Assembles the iteration's scalar breakdown. `l_o = None` marks an
/// omni-correlation cold-start skip: the weight is still reported but the
/// term contributes zero. Any non-finite input aborts with the iteration.
pub fn total_loss(
    l_s: f32,
    l_c: f32,
    l_o: Option<f32>,
    t: usize,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let lambda_c = warmup_weight(t, weights.t_max, weights.beta_c)?;
    let lambda_o = warmup_weight(t, weights.t_max, weights.beta_o)?;
    let l_o_val = l_o.unwrap_or(0.0);
    for (term, v) in [
        ("supervised loss", l_s),
        ("cross-supervision loss", l_c),
        ("omni-correlation loss", l_o_val),
    ] {
        if !v.is_finite() {
            return Err(CamlError::NonFinite { iteration: t, term });
        }
    }
    let total = l_s + lambda_c * l_c + lambda_o * l_o_val;
    if !total.is_finite() {
        return Err(CamlError::NonFinite {
            iteration: t,
            term: "total loss",
        });
    }
    Ok(LossBreakdown {
        l_s,
        l_c,
        l_o: l_o_val,
        lambda_c,
        lambda_o,
        total,
    })
}
