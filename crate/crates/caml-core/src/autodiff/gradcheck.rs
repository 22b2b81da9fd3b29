//! Central-difference gradient checking.
//!
//! Two entry points: [`grad_check`] probes a single kernel by op id with
//! seeded random inputs, scalarizing via a plain sum of the outputs;
//! [`grad_check_fn`] probes an arbitrary composed forward closure with a
//! fixed random weighting of the outputs (a plain sum would be blind to
//! Jacobians with zero row sums, e.g. softmax).
//!
//! Reported error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`,
//! maximized over every entry of every input. The numeric side replays the
//! recorded graph through the f64 reference path (`Tape::eval_f64`), so the
//! probes are free of f32 forward noise; the f32 analytic gradients are what
//! is under test.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{OpAttrs, Tape};
use super::tensor::Tensor;
use crate::error::Result;

/// Checks one kernel from the table. `h` must lie in `[1e-4, 1e-2]` for f32.
pub fn grad_check(
    op_id: &str,
    shapes: &[Vec<usize>],
    attrs: &OpAttrs,
    seed: u64,
    h: f32,
) -> Result<f32> {
    assert!(
        (1e-4..=1e-2).contains(&h),
        "step {h} outside the f32-safe range [1e-4, 1e-2]"
    );
    let inputs = seeded_inputs(op_id, shapes, seed);
    let op = op_id.to_string();
    let attrs = attrs.clone();
    check_with(
        &move |tape: &Tape, ins: &[Tensor]| tape.forward_op(&op, ins, &attrs),
        &inputs,
        h,
        Scalarize::Sum,
    )
}

/// Checks a composed forward pass. All `inputs` must be `requires_grad`;
/// any constants belong inside the closure.
pub fn grad_check_fn<F>(f: &F, inputs: &[Tensor], h: f32) -> Result<f32>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    check_with(f, inputs, h, Scalarize::WeightedSum)
}

enum Scalarize {
    Sum,
    WeightedSum,
}

fn check_with<F>(f: &F, inputs: &[Tensor], h: f32, mode: Scalarize) -> Result<f32>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    for t in inputs {
        assert!(t.requires_grad(), "grad_check input must require grad");
        t.zero_grad();
    }

    // Analytic pass; this also records the graph the f64 probes replay.
    let tape = Tape::new();
    let y = f(&tape, inputs)?;
    let weights = match mode {
        Scalarize::Sum => vec![1.0f32; y.numel()],
        Scalarize::WeightedSum => probe_weights(y.numel()),
    };
    let w = Tensor::from_vec(&y.shape(), weights);
    let weighted = tape.mul(&y, &w)?;
    let loss = tape.sum(&weighted)?;
    tape.backward(&loss)?;

    let mut max_err = 0.0f32;
    for t in inputs {
        let n = t.numel();
        let analytic = t.grad();
        for e in 0..n {
            let plus = tape.eval_f64(&loss, Some((t.key(), e, h as f64)))[0];
            let minus = tape.eval_f64(&loss, Some((t.key(), e, -(h as f64))))[0];
            let numeric = ((plus - minus) / (2.0 * h as f64)) as f32;
            let a = analytic[e];
            let err = (a - numeric).abs() / 1.0f32.max(a.abs()).max(numeric.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Fixed pseudo-random output weights in [0.5, 1.5], away from zero so every
/// output entry contributes to the probe.
fn probe_weights(n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FF_EE00);
    let dist = Uniform::new(0.5f32, 1.5f32);
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

/// Seeded random inputs, conditioned per op so probes stay clear of kinks
/// (relu at 0), poles (div, log), and degenerate rows (cos_normalize).
fn seeded_inputs(op_id: &str, shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(-1.0f32, 1.0f32);
    shapes
        .iter()
        .enumerate()
        .map(|(idx, shape)| {
            let n: usize = shape.iter().product();
            let vals: Vec<f32> = (0..n)
                .map(|_| {
                    let u = dist.sample(&mut rng);
                    match op_id {
                        "relu" => u.signum() * (0.15 + u.abs()),
                        "div" if idx == 1 => u.signum() * (0.5 + u.abs()),
                        "log" => 0.2 + (u + 1.0) * 0.5,
                        "cos_normalize" => u.signum() * (0.1 + u.abs()),
                        _ => u,
                    }
                })
                .collect();
            Tensor::from_vec(shape, vals).with_grad()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_4x3_times_3x2_seed0() {
        let err = grad_check(
            "linear",
            &[vec![4, 3], vec![3, 2], vec![2]],
            &OpAttrs::default(),
            0,
            5e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "linear grad error {err}");
    }

    #[test]
    fn layer_norm_2x8() {
        let err = grad_check(
            "layer_norm",
            &[vec![2, 8], vec![8], vec![8]],
            &OpAttrs::default(),
            0,
            5e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "layer_norm grad error {err}");
    }

    #[test]
    fn softmax_len5() {
        let attrs = OpAttrs {
            axis: Some(0),
            ..OpAttrs::default()
        };
        let err = grad_check("softmax", &[vec![5]], &attrs, 0, 5e-3).unwrap();
        assert!(err < 1e-3, "softmax grad error {err}");
    }

    #[test]
    fn weighted_probe_exercises_softmax_jacobian() {
        // Sum-scalarized softmax has identically zero gradient; the weighted
        // closure path must still match finite differences.
        let x = Tensor::from_vec(&[6], vec![0.3, -0.7, 1.2, 0.0, -0.1, 0.8]).with_grad();
        let err = grad_check_fn(&|tape: &Tape, ins: &[Tensor]| tape.softmax(&ins[0], 0), &[x], 5e-3)
            .unwrap();
        assert!(err < 1e-3, "weighted softmax grad error {err}");
    }
}
