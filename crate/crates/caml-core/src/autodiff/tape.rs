//! Dynamic compute graph: ops append nodes in execution order, `backward`
//! walks them in reverse.
//!
//! The kernel table (dynamic `op_id`s accepted by [`Tape::forward_op`]):
//!
//! | op id            | inputs              | notes                                   |
//! |------------------|---------------------|-----------------------------------------|
//! | `conv3d`         | x, weight, bias     | attrs: stride, padding (uniform)        |
//! | `upsample2x`     | x                   | trilinear, half-pixel centers           |
//! | `linear`         | x, weight, bias     | x (..., in) -> (..., out)               |
//! | `relu`           | x                   |                                         |
//! | `softmax`        | x                   | attrs: axis                             |
//! | `layer_norm`     | x, gamma, beta      | last axis                               |
//! | `matmul`         | a, b                | batched, equal leading dims             |
//! | `concat`         | x0, x1, ...         | attrs: axis                             |
//! | `reshape`        | x                   | attrs: shape                            |
//! | `transpose`      | x                   | attrs: perm                             |
//! | `add`/`mul`/`div`| a, b                | elementwise, equal shapes               |
//! | `scale`          | x                   | attrs: factor (constant multiplier)     |
//! | `add_const`      | x                   | attrs: factor (constant addend)         |
//! | `sum`/`mean`     | x                   | full reduction to shape [1]             |
//! | `log`            | x                   | natural log                             |
//! | `cos_normalize`  | x                   | L2-normalize last axis, eps 1e-8        |
//! | `gather_voxels`  | x                   | attrs: positions; (b,c,*) -> (m,c)      |
//! | `slice_batch`    | x                   | attrs: range on axis 0                  |

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use super::kernels as kn;
use super::kernels::ConvGeom;
use super::tensor::Tensor;
use crate::error::{CamlError, Result};

#[derive(Clone, Debug)]
enum Op {
    Conv3d { geom: ConvGeom },
    Upsample2x,
    Linear,
    Relu,
    Softmax { axis: usize },
    LayerNorm,
    Matmul,
    Concat { axis: usize },
    Reshape,
    Transpose { perm: Vec<usize> },
    Add,
    Mul,
    Div,
    Scale { factor: f32 },
    AddConst { c: f32 },
    Sum,
    Mean,
    Log,
    CosNormalize,
    GatherVoxels { positions: Vec<(usize, usize)> },
    SliceBatch { start: usize, len: usize },
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Attributes for the dynamic [`Tape::forward_op`] dispatcher.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub axis: Option<usize>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub factor: Option<f32>,
    pub shape: Option<Vec<usize>>,
    pub perm: Option<Vec<usize>>,
    pub positions: Option<Vec<(usize, usize)>>,
    pub range: Option<(usize, usize)>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
    attn_score_entries: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            attn_score_entries: Cell::new(0),
        }
    }

    /// A tape that never records nodes; forwards still run.
    pub fn inference() -> Tape {
        let t = Tape::new();
        t.recording.set(false);
        t
    }

    pub fn set_recording(&self, on: bool) {
        self.recording.set(on);
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Running count of attention score-matrix entries materialized so far.
    pub fn attn_score_entries(&self) -> u64 {
        self.attn_score_entries.get()
    }

    pub fn add_attn_score_entries(&self, n: u64) {
        self.attn_score_entries
            .set(self.attn_score_entries.get() + n);
    }

    pub fn reset_attn_score_entries(&self) {
        self.attn_score_entries.set(0);
    }

    fn push(&self, op: Op, inputs: Vec<Tensor>, output: &Tensor) {
        if self.recording.get() && inputs.iter().any(|t| t.requires_grad()) {
            output.ensure_grad_buffer();
            self.nodes.borrow_mut().push(Node {
                op,
                inputs,
                output: output.clone(),
            });
        }
    }

    // ---- kernel table ----------------------------------------------------

    pub fn conv3d(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(CamlError::Shape(format!(
                "conv3d expects rank-5 input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(CamlError::Shape(format!(
                "conv3d channel mismatch: input has {} channels, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if b.shape() != vec![ws[0]] {
            return Err(CamlError::Shape(format!(
                "conv3d bias must have shape [{}], got {:?}",
                ws[0],
                b.shape()
            )));
        }
        if stride == 0 {
            return Err(CamlError::Shape("conv3d stride must be >= 1".into()));
        }
        let mut out_dims = [0usize; 3];
        for (i, od) in out_dims.iter_mut().enumerate() {
            let span = xs[2 + i] + 2 * padding;
            let k = ws[2 + i];
            if span < k || (span - k) % stride != 0 {
                return Err(CamlError::Shape(format!(
                    "conv3d geometry invalid on axis {i}: input {} padding {padding} kernel {k} stride {stride}",
                    xs[2 + i]
                )));
            }
            *od = (span - k) / stride + 1;
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            in_dims: [xs[2], xs[3], xs[4]],
            kernel: [ws[2], ws[3], ws[4]],
            out_dims,
            stride,
            padding,
        };
        let out_shape = vec![xs[0], ws[0], out_dims[0], out_dims[1], out_dims[2]];
        let mut out = vec![0.0f32; out_shape.iter().product()];
        kn::conv3d_forward(&x.data().value, &w.data().value, &b.data().value, &geom, &mut out);
        let out = Tensor::from_vec(&out_shape, out);
        self.push(Op::Conv3d { geom }, vec![x.clone(), w.clone(), b.clone()], &out);
        Ok(out)
    }

    pub fn upsample2x(&self, x: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 5 {
            return Err(CamlError::Shape(format!(
                "upsample2x expects rank-5 input, got {xs:?}"
            )));
        }
        let out_shape = vec![xs[0], xs[1], 2 * xs[2], 2 * xs[3], 2 * xs[4]];
        let mut out = vec![0.0f32; out_shape.iter().product()];
        kn::upsample2x_forward(&x.data().value, xs[0] * xs[1], [xs[2], xs[3], xs[4]], &mut out);
        let out = Tensor::from_vec(&out_shape, out);
        self.push(Op::Upsample2x, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn linear(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.is_empty() || ws.len() != 2 {
            return Err(CamlError::Shape(format!(
                "linear expects x (..., in) and weight (in, out), got {xs:?} and {ws:?}"
            )));
        }
        let in_dim = *xs.last().unwrap();
        if in_dim != ws[0] {
            return Err(CamlError::Shape(format!(
                "linear input dim {in_dim} does not match weight rows {}",
                ws[0]
            )));
        }
        if b.shape() != vec![ws[1]] {
            return Err(CamlError::Shape(format!(
                "linear bias must have shape [{}], got {:?}",
                ws[1],
                b.shape()
            )));
        }
        let rows = x.numel() / in_dim;
        let out_dim = ws[1];
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = out_dim;
        let mut out = vec![0.0f32; rows * out_dim];
        kn::gemm_nn(&mut out, &x.data().value, &w.data().value, rows, in_dim, out_dim);
        {
            let bd = b.data();
            for r in 0..rows {
                for (o, &bv) in out[r * out_dim..(r + 1) * out_dim].iter_mut().zip(&bd.value) {
                    *o += bv;
                }
            }
        }
        let out = Tensor::from_vec(&out_shape, out);
        self.push(Op::Linear, vec![x.clone(), w.clone(), b.clone()], &out);
        Ok(out)
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f32> = x.data().value.iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::from_vec(&x.shape(), out);
        self.push(Op::Relu, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let xs = x.shape();
        if axis >= xs.len() {
            return Err(CamlError::Shape(format!(
                "softmax axis {axis} out of range for shape {xs:?}"
            )));
        }
        if xs[axis] == 0 {
            return Err(CamlError::Shape("softmax over an empty axis".into()));
        }
        let mut out = vec![0.0f32; x.numel()];
        kn::softmax_forward(&x.data().value, &xs, axis, &mut out);
        let out = Tensor::from_vec(&xs, out);
        self.push(Op::Softmax { axis }, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let row_len = *xs.last().ok_or_else(|| {
            CamlError::Shape("layer_norm expects an input of rank >= 1".into())
        })?;
        if row_len == 0 {
            return Err(CamlError::Shape("layer_norm over an empty axis".into()));
        }
        if gamma.shape() != vec![row_len] || beta.shape() != vec![row_len] {
            return Err(CamlError::Shape(format!(
                "layer_norm gain/bias must have shape [{row_len}]"
            )));
        }
        let mut out = vec![0.0f32; x.numel()];
        kn::layer_norm_forward(
            &x.data().value,
            &gamma.data().value,
            &beta.data().value,
            row_len,
            &mut out,
        );
        let out = Tensor::from_vec(&xs, out);
        self.push(
            Op::LayerNorm,
            vec![x.clone(), gamma.clone(), beta.clone()],
            &out,
        );
        Ok(out)
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ash = a.shape();
        let bsh = b.shape();
        if ash.len() < 2 || ash.len() != bsh.len() {
            return Err(CamlError::Shape(format!(
                "matmul expects equal-rank inputs of rank >= 2, got {ash:?} and {bsh:?}"
            )));
        }
        let r = ash.len();
        if ash[..r - 2] != bsh[..r - 2] || ash[r - 1] != bsh[r - 2] {
            return Err(CamlError::Shape(format!(
                "matmul shape mismatch: {ash:?} x {bsh:?}"
            )));
        }
        let (m, p, n) = (ash[r - 2], ash[r - 1], bsh[r - 1]);
        let batch: usize = ash[..r - 2].iter().product();
        let mut out_shape = ash.clone();
        out_shape[r - 2] = m;
        out_shape[r - 1] = n;
        let mut out = vec![0.0f32; batch * m * n];
        {
            let ad = a.data();
            let bd = b.data();
            for s in 0..batch {
                kn::gemm_nn(
                    &mut out[s * m * n..(s + 1) * m * n],
                    &ad.value[s * m * p..(s + 1) * m * p],
                    &bd.value[s * p * n..(s + 1) * p * n],
                    m,
                    p,
                    n,
                );
            }
        }
        let out = Tensor::from_vec(&out_shape, out);
        self.push(Op::Matmul, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    pub fn concat(&self, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(CamlError::Shape("concat of zero tensors".into()));
        }
        let first = xs[0].shape();
        if axis >= first.len() {
            return Err(CamlError::Shape(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for t in xs {
            let s = t.shape();
            if s.len() != first.len() {
                return Err(CamlError::Shape("concat rank mismatch".into()));
            }
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if i != axis && a != b {
                    return Err(CamlError::Shape(format!(
                        "concat off-axis extent mismatch: {s:?} vs {first:?}"
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0f32; out_shape.iter().product()];
        let out_row = axis_total * inner;
        let mut offset = 0;
        for t in xs {
            let s_axis = t.shape()[axis];
            let d = t.data();
            for o in 0..outer {
                let src = &d.value[o * s_axis * inner..(o + 1) * s_axis * inner];
                let dst = &mut out[o * out_row + offset..o * out_row + offset + s_axis * inner];
                dst.copy_from_slice(src);
            }
            offset += s_axis * inner;
        }
        let out = Tensor::from_vec(&out_shape, out);
        self.push(
            Op::Concat { axis },
            xs.iter().map(|t| (*t).clone()).collect(),
            &out,
        );
        Ok(out)
    }

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != x.numel() {
            return Err(CamlError::Shape(format!(
                "reshape from {:?} to {shape:?} changes element count",
                x.shape()
            )));
        }
        let out = Tensor::from_vec(shape, x.data().value.clone());
        self.push(Op::Reshape, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn transpose(&self, x: &Tensor, perm: &[usize]) -> Result<Tensor> {
        let xs = x.shape();
        let r = xs.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
        {
            return Err(CamlError::Shape(format!(
                "transpose perm {perm:?} is not a permutation of 0..{r}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let out = permute(&x.data().value, &xs, perm);
        let out = Tensor::from_vec(&out_shape, out);
        self.push(Op::Transpose { perm: perm.to_vec() }, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Op::Add, a, b, |x, y| x + y)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Op::Div, a, b, |x, y| x / y)
    }

    fn elementwise(
        &self,
        op: Op,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(CamlError::Shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out: Vec<f32> = a
            .data()
            .value
            .iter()
            .zip(&b.data().value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(&a.shape(), out);
        self.push(op, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    pub fn scale(&self, x: &Tensor, factor: f32) -> Result<Tensor> {
        let out: Vec<f32> = x.data().value.iter().map(|&v| v * factor).collect();
        let out = Tensor::from_vec(&x.shape(), out);
        self.push(Op::Scale { factor }, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn add_const(&self, x: &Tensor, c: f32) -> Result<Tensor> {
        let out: Vec<f32> = x.data().value.iter().map(|&v| v + c).collect();
        let out = Tensor::from_vec(&x.shape(), out);
        self.push(Op::AddConst { c }, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().value.iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar(s as f32);
        self.push(Op::Sum, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        if x.numel() == 0 {
            return Err(CamlError::Shape("mean of an empty tensor".into()));
        }
        let s: f64 = x.data().value.iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar((s / x.numel() as f64) as f32);
        self.push(Op::Mean, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f32> = x.data().value.iter().map(|&v| v.ln()).collect();
        let out = Tensor::from_vec(&x.shape(), out);
        self.push(Op::Log, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn cos_normalize(&self, x: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let row_len = *xs
            .last()
            .ok_or_else(|| CamlError::Shape("cos_normalize expects rank >= 1".into()))?;
        if row_len == 0 {
            return Err(CamlError::Shape("cos_normalize over an empty axis".into()));
        }
        let mut out = vec![0.0f32; x.numel()];
        kn::cos_normalize_forward(&x.data().value, row_len, &mut out);
        let out = Tensor::from_vec(&xs, out);
        self.push(Op::CosNormalize, vec![x.clone()], &out);
        Ok(out)
    }

    /// Extracts feature columns at `(sample, voxel)` positions from a
    /// (b, c, spatial...) tensor, producing (positions.len(), c).
    pub fn gather_voxels(&self, x: &Tensor, positions: &[(usize, usize)]) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() < 3 {
            return Err(CamlError::Shape(format!(
                "gather_voxels expects rank >= 3, got {xs:?}"
            )));
        }
        let (b, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        for &(s, v) in positions {
            if s >= b || v >= spatial {
                return Err(CamlError::Shape(format!(
                    "gather position ({s}, {v}) out of range for {b} samples x {spatial} voxels"
                )));
            }
        }
        let m = positions.len();
        let mut out = vec![0.0f32; m * c];
        {
            let d = x.data();
            for (r, &(s, v)) in positions.iter().enumerate() {
                for ch in 0..c {
                    out[r * c + ch] = d.value[(s * c + ch) * spatial + v];
                }
            }
        }
        let out = Tensor::from_vec(&[m, c], out);
        self.push(
            Op::GatherVoxels {
                positions: positions.to_vec(),
            },
            vec![x.clone()],
            &out,
        );
        Ok(out)
    }

    pub fn slice_batch(&self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let xs = x.shape();
        if xs.is_empty() || start + len > xs[0] {
            return Err(CamlError::Shape(format!(
                "slice_batch [{start}, {}) out of range for shape {xs:?}",
                start + len
            )));
        }
        let inner: usize = xs[1..].iter().product();
        let mut out_shape = xs.clone();
        out_shape[0] = len;
        let out = x.data().value[start * inner..(start + len) * inner].to_vec();
        let out = Tensor::from_vec(&out_shape, out);
        self.push(Op::SliceBatch { start, len }, vec![x.clone()], &out);
        Ok(out)
    }

    // ---- dynamic dispatch ------------------------------------------------

    /// Runs a kernel by name; used by the gradient checker and the bindings.
    pub fn forward_op(&self, op_id: &str, inputs: &[Tensor], attrs: &OpAttrs) -> Result<Tensor> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(CamlError::Shape(format!(
                    "{op_id} expects {n} inputs, got {}",
                    inputs.len()
                )))
            } else {
                Ok(())
            }
        };
        match op_id {
            "conv3d" => {
                need(3)?;
                self.conv3d(
                    &inputs[0],
                    &inputs[1],
                    &inputs[2],
                    attrs.stride.unwrap_or(1),
                    attrs.padding.unwrap_or(0),
                )
            }
            "upsample2x" => {
                need(1)?;
                self.upsample2x(&inputs[0])
            }
            "linear" => {
                need(3)?;
                self.linear(&inputs[0], &inputs[1], &inputs[2])
            }
            "relu" => {
                need(1)?;
                self.relu(&inputs[0])
            }
            "softmax" => {
                need(1)?;
                self.softmax(&inputs[0], attrs.axis.unwrap_or(0))
            }
            "layer_norm" => {
                need(3)?;
                self.layer_norm(&inputs[0], &inputs[1], &inputs[2])
            }
            "matmul" => {
                need(2)?;
                self.matmul(&inputs[0], &inputs[1])
            }
            "concat" => {
                let refs: Vec<&Tensor> = inputs.iter().collect();
                self.concat(&refs, attrs.axis.unwrap_or(0))
            }
            "reshape" => {
                need(1)?;
                let shape = attrs
                    .shape
                    .as_ref()
                    .ok_or_else(|| CamlError::Shape("reshape needs a target shape".into()))?;
                self.reshape(&inputs[0], shape)
            }
            "transpose" => {
                need(1)?;
                let perm = attrs
                    .perm
                    .as_ref()
                    .ok_or_else(|| CamlError::Shape("transpose needs a permutation".into()))?;
                self.transpose(&inputs[0], perm)
            }
            "add" => {
                need(2)?;
                self.add(&inputs[0], &inputs[1])
            }
            "mul" => {
                need(2)?;
                self.mul(&inputs[0], &inputs[1])
            }
            "div" => {
                need(2)?;
                self.div(&inputs[0], &inputs[1])
            }
            "scale" => {
                need(1)?;
                self.scale(&inputs[0], attrs.factor.unwrap_or(1.0))
            }
            "add_const" => {
                need(1)?;
                self.add_const(&inputs[0], attrs.factor.unwrap_or(0.0))
            }
            "sum" => {
                need(1)?;
                self.sum(&inputs[0])
            }
            "mean" => {
                need(1)?;
                self.mean(&inputs[0])
            }
            "log" => {
                need(1)?;
                self.log(&inputs[0])
            }
            "cos_normalize" => {
                need(1)?;
                self.cos_normalize(&inputs[0])
            }
            "gather_voxels" => {
                need(1)?;
                let positions = attrs
                    .positions
                    .as_ref()
                    .ok_or_else(|| CamlError::Shape("gather_voxels needs positions".into()))?;
                self.gather_voxels(&inputs[0], positions)
            }
            "slice_batch" => {
                need(1)?;
                let (start, len) = attrs
                    .range
                    .ok_or_else(|| CamlError::Shape("slice_batch needs a range".into()))?;
                self.slice_batch(&inputs[0], start, len)
            }
            other => Err(CamlError::UnknownOp(other.to_string())),
        }
    }

    // ---- reverse pass ----------------------------------------------------

    /// Accumulates d(loss)/d(tensor) into the persistent `grad` buffer of
    /// every `requires_grad` tensor reachable from `loss`. Calling twice on
    /// the same tape doubles the grads.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(CamlError::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        // Pass-local adjoints, keyed by tensor identity.
        let mut adj: HashMap<usize, (Tensor, Vec<f32>)> = HashMap::new();
        adj.insert(loss.key(), (loss.clone(), vec![1.0]));
        for node in nodes.iter().rev() {
            let dy = match adj.get(&node.output.key()) {
                Some((_, buf)) => buf.clone(),
                None => continue,
            };
            let needs: Vec<bool> = node.inputs.iter().map(|t| t.requires_grad()).collect();
            let contribs = backward_op(&node.op, &node.inputs, &node.output, &dy, &needs);
            for (inp, contrib) in node.inputs.iter().zip(contribs) {
                if let Some(c) = contrib {
                    let entry = adj
                        .entry(inp.key())
                        .or_insert_with(|| (inp.clone(), vec![0.0; inp.numel()]));
                    for (a, b) in entry.1.iter_mut().zip(&c) {
                        *a += b;
                    }
                }
            }
        }
        for (t, buf) in adj.values() {
            if t.requires_grad() {
                t.ensure_grad_buffer();
                let mut d = t.data_mut();
                for (g, b) in d.grad.iter_mut().zip(buf) {
                    *g += b;
                }
            }
        }
        Ok(())
    }

    /// Replays the recorded graph in f64 and returns the value of `target`.
    /// `perturb = (leaf key, element, delta)` shifts one element of one leaf
    /// before the replay. This is the reference path for the gradient
    /// checker: leaves enter at their f32 values, every op then runs in f64,
    /// so central differences are not polluted by f32 forward noise.
    /// Tensors built off-graph stay frozen, which matches the detachment
    /// semantics of the analytic gradients being checked.
    pub(crate) fn eval_f64(&self, target: &Tensor, perturb: Option<(usize, usize, f64)>) -> Vec<f64> {
        let leaf = |t: &Tensor| -> Vec<f64> {
            let mut v: Vec<f64> = t.data().value.iter().map(|&x| x as f64).collect();
            if let Some((key, e, d)) = perturb {
                if key == t.key() {
                    v[e] += d;
                }
            }
            v
        };
        let nodes = self.nodes.borrow();
        let mut env: HashMap<usize, Vec<f64>> = HashMap::new();
        for node in nodes.iter() {
            let bufs: Vec<Vec<f64>> = node
                .inputs
                .iter()
                .map(|t| env.get(&t.key()).cloned().unwrap_or_else(|| leaf(t)))
                .collect();
            let out = forward_f64(&node.op, &node.inputs, &bufs, &node.output);
            env.insert(node.output.key(), out);
        }
        env.remove(&target.key()).unwrap_or_else(|| leaf(target))
    }
}

/// f64 twin of every kernel's forward, for [`Tape::eval_f64`].
fn forward_f64(op: &Op, inputs: &[Tensor], bufs: &[Vec<f64>], _output: &Tensor) -> Vec<f64> {
    match op {
        Op::Conv3d { geom } => {
            let g = geom;
            let [id, ih, iw] = g.in_dims;
            let [kd, kh, kw] = g.kernel;
            let [od, oh, ow] = g.out_dims;
            let (x, w, b) = (&bufs[0], &bufs[1], &bufs[2]);
            let mut out = vec![0.0f64; g.batch * g.c_out * od * oh * ow];
            let mut i = 0;
            for n in 0..g.batch {
                for co in 0..g.c_out {
                    for oz in 0..od {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = b[co];
                                for ci in 0..g.c_in {
                                    for z in 0..kd {
                                        let iz = (oz * g.stride + z) as isize - g.padding as isize;
                                        if iz < 0 || iz >= id as isize {
                                            continue;
                                        }
                                        for y in 0..kh {
                                            let iy =
                                                (oy * g.stride + y) as isize - g.padding as isize;
                                            if iy < 0 || iy >= ih as isize {
                                                continue;
                                            }
                                            for xk in 0..kw {
                                                let ix = (ox * g.stride + xk) as isize
                                                    - g.padding as isize;
                                                if ix < 0 || ix >= iw as isize {
                                                    continue;
                                                }
                                                let xi = ((n * g.c_in + ci) * id
                                                    + iz as usize)
                                                    * ih
                                                    * iw
                                                    + iy as usize * iw
                                                    + ix as usize;
                                                let wi = (((co * g.c_in + ci) * kd + z) * kh + y)
                                                    * kw
                                                    + xk;
                                                acc += x[xi] * w[wi];
                                            }
                                        }
                                    }
                                }
                                out[i] = acc;
                                i += 1;
                            }
                        }
                    }
                }
            }
            out
        }
        Op::Upsample2x => {
            let xs = inputs[0].shape();
            let (bc, d, h, w) = (xs[0] * xs[1], xs[2], xs[3], xs[4]);
            let taps = |size_in: usize| -> Vec<(usize, usize, f64)> {
                (0..size_in * 2)
                    .map(|o| {
                        let src = (o as f64 + 0.5) * 0.5 - 0.5;
                        let f = src.floor();
                        let t = src - f;
                        let i0 = (f as isize).clamp(0, size_in as isize - 1) as usize;
                        let i1 = ((f as isize + 1).clamp(0, size_in as isize - 1)) as usize;
                        (i0, i1, t)
                    })
                    .collect()
            };
            let (tz, ty, tx) = (taps(d), taps(h), taps(w));
            let x = &bufs[0];
            let mut out = vec![0.0f64; bc * 8 * d * h * w];
            let (oh, ow) = (2 * h, 2 * w);
            for c in 0..bc {
                let src = &x[c * d * h * w..(c + 1) * d * h * w];
                let dst = &mut out[c * 8 * d * h * w..(c + 1) * 8 * d * h * w];
                for (oz, &(z0, z1, fz)) in tz.iter().enumerate() {
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let at = |z: usize, y: usize, xx: usize| src[(z * h + y) * w + xx];
                            let c00 = at(z0, y0, x0) + (at(z0, y0, x1) - at(z0, y0, x0)) * fx;
                            let c01 = at(z0, y1, x0) + (at(z0, y1, x1) - at(z0, y1, x0)) * fx;
                            let c10 = at(z1, y0, x0) + (at(z1, y0, x1) - at(z1, y0, x0)) * fx;
                            let c11 = at(z1, y1, x0) + (at(z1, y1, x1) - at(z1, y1, x0)) * fx;
                            let c0 = c00 + (c01 - c00) * fy;
                            let c1 = c10 + (c11 - c10) * fy;
                            dst[(oz * oh + oy) * ow + ox] = c0 + (c1 - c0) * fz;
                        }
                    }
                }
            }
            out
        }
        Op::Linear => {
            let in_dim = *inputs[0].shape().last().unwrap();
            let out_dim = inputs[1].shape()[1];
            let rows = bufs[0].len() / in_dim;
            let (x, w, b) = (&bufs[0], &bufs[1], &bufs[2]);
            let mut out = vec![0.0f64; rows * out_dim];
            for r in 0..rows {
                for o in 0..out_dim {
                    let mut acc = b[o];
                    for i in 0..in_dim {
                        acc += x[r * in_dim + i] * w[i * out_dim + o];
                    }
                    out[r * out_dim + o] = acc;
                }
            }
            out
        }
        Op::Relu => bufs[0].iter().map(|&v| v.max(0.0)).collect(),
        Op::Softmax { axis } => {
            let it = kn::axis_iter(&inputs[0].shape(), *axis);
            let x = &bufs[0];
            let mut out = vec![0.0f64; x.len()];
            for o in 0..it.outer {
                for i in 0..it.inner {
                    let base = o * it.len * it.inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..it.len {
                        mx = mx.max(x[base + j * it.inner]);
                    }
                    let mut denom = 0.0;
                    for j in 0..it.len {
                        let e = (x[base + j * it.inner] - mx).exp();
                        out[base + j * it.inner] = e;
                        denom += e;
                    }
                    for j in 0..it.len {
                        out[base + j * it.inner] /= denom;
                    }
                }
            }
            out
        }
        Op::LayerNorm => {
            let row_len = *inputs[0].shape().last().unwrap();
            let (x, gamma, beta) = (&bufs[0], &bufs[1], &bufs[2]);
            let rows = x.len() / row_len;
            let mut out = vec![0.0f64; x.len()];
            for r in 0..rows {
                let xr = &x[r * row_len..(r + 1) * row_len];
                let mean = xr.iter().sum::<f64>() / row_len as f64;
                let var =
                    xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row_len as f64;
                let inv_std = 1.0 / (var + kn::LAYER_NORM_EPS as f64).sqrt();
                for j in 0..row_len {
                    out[r * row_len + j] = gamma[j] * (xr[j] - mean) * inv_std + beta[j];
                }
            }
            out
        }
        Op::Matmul => {
            let ash = inputs[0].shape();
            let bsh = inputs[1].shape();
            let r = ash.len();
            let (m, p, n) = (ash[r - 2], ash[r - 1], bsh[r - 1]);
            let batch: usize = ash[..r - 2].iter().product();
            let (a, b) = (&bufs[0], &bufs[1]);
            let mut out = vec![0.0f64; batch * m * n];
            for s in 0..batch {
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for t in 0..p {
                            acc += a[s * m * p + i * p + t] * b[s * p * n + t * n + j];
                        }
                        out[s * m * n + i * n + j] = acc;
                    }
                }
            }
            out
        }
        Op::Concat { axis } => {
            let first = inputs[0].shape();
            let outer: usize = first[..*axis].iter().product();
            let total_axis: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let inner: usize = first[*axis + 1..].iter().product();
            let mut out = vec![0.0f64; outer * total_axis * inner];
            let out_row = total_axis * inner;
            let mut offset = 0;
            for (t, buf) in inputs.iter().zip(bufs) {
                let s_axis = t.shape()[*axis];
                for o in 0..outer {
                    out[o * out_row + offset..o * out_row + offset + s_axis * inner]
                        .copy_from_slice(&buf[o * s_axis * inner..(o + 1) * s_axis * inner]);
                }
                offset += s_axis * inner;
            }
            out
        }
        Op::Reshape => bufs[0].clone(),
        Op::Transpose { perm } => permute(&bufs[0], &inputs[0].shape(), perm),
        Op::Add => bufs[0].iter().zip(&bufs[1]).map(|(a, b)| a + b).collect(),
        Op::Mul => bufs[0].iter().zip(&bufs[1]).map(|(a, b)| a * b).collect(),
        Op::Div => bufs[0].iter().zip(&bufs[1]).map(|(a, b)| a / b).collect(),
        Op::Scale { factor } => bufs[0].iter().map(|&v| v * *factor as f64).collect(),
        Op::AddConst { c } => bufs[0].iter().map(|&v| v + *c as f64).collect(),
        Op::Sum => vec![bufs[0].iter().sum()],
        Op::Mean => vec![bufs[0].iter().sum::<f64>() / bufs[0].len() as f64],
        Op::Log => bufs[0].iter().map(|&v| v.ln()).collect(),
        Op::CosNormalize => {
            let row_len = *inputs[0].shape().last().unwrap();
            let x = &bufs[0];
            let rows = x.len() / row_len;
            let mut out = vec![0.0f64; x.len()];
            for r in 0..rows {
                let xr = &x[r * row_len..(r + 1) * row_len];
                let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let inv = 1.0 / (norm + kn::COS_NORM_EPS as f64);
                for j in 0..row_len {
                    out[r * row_len + j] = xr[j] * inv;
                }
            }
            out
        }
        Op::GatherVoxels { positions } => {
            let xs = inputs[0].shape();
            let c = xs[1];
            let spatial: usize = xs[2..].iter().product();
            let x = &bufs[0];
            let mut out = vec![0.0f64; positions.len() * c];
            for (r, &(s, v)) in positions.iter().enumerate() {
                for ch in 0..c {
                    out[r * c + ch] = x[(s * c + ch) * spatial + v];
                }
            }
            out
        }
        Op::SliceBatch { start, len } => {
            let xs = inputs[0].shape();
            let inner: usize = xs[1..].iter().product();
            bufs[0][start * inner..(start + len) * inner].to_vec()
        }
    }
}

fn permute<T: Copy + Default>(value: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let r = shape.len();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![T::default(); value.len()];
    let mut idx = vec![0usize; r];
    for o in out.iter_mut() {
        let mut src = 0;
        for (axis, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[axis]];
        }
        *o = value[src];
        for axis in (0..r).rev() {
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    out
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Per-op vector-Jacobian products. Returns one optional gradient buffer per
/// input; `None` when the input does not need a gradient.
fn backward_op(
    op: &Op,
    inputs: &[Tensor],
    output: &Tensor,
    dy: &[f32],
    needs: &[bool],
) -> Vec<Option<Vec<f32>>> {
    match op {
        Op::Conv3d { geom } => {
            let x = inputs[0].data();
            let w = inputs[1].data();
            let mut dx = needs[0].then(|| vec![0.0f32; inputs[0].numel()]);
            let mut dw = needs[1].then(|| vec![0.0f32; inputs[1].numel()]);
            let mut db = needs[2].then(|| vec![0.0f32; inputs[2].numel()]);
            kn::conv3d_backward(
                &x.value,
                &w.value,
                dy,
                geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            vec![dx, dw, db]
        }
        Op::Upsample2x => {
            let xs = inputs[0].shape();
            let mut dx = vec![0.0f32; inputs[0].numel()];
            kn::upsample2x_backward(dy, xs[0] * xs[1], [xs[2], xs[3], xs[4]], &mut dx);
            vec![Some(dx)]
        }
        Op::Linear => {
            let in_dim = *inputs[0].shape().last().unwrap();
            let out_dim = inputs[1].shape()[1];
            let rows = inputs[0].numel() / in_dim;
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0f32; inputs[0].numel()];
                kn::gemm_nt(&mut dx, dy, &inputs[1].data().value, rows, out_dim, in_dim);
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0f32; inputs[1].numel()];
                kn::gemm_tn(&mut dw, &inputs[0].data().value, dy, in_dim, rows, out_dim);
                dw
            });
            let db = needs[2].then(|| {
                let mut db = vec![0.0f32; out_dim];
                for r in 0..rows {
                    for (g, &d) in db.iter_mut().zip(&dy[r * out_dim..(r + 1) * out_dim]) {
                        *g += d;
                    }
                }
                db
            });
            vec![dx, dw, db]
        }
        Op::Relu => {
            let x = inputs[0].data();
            let dx = x
                .value
                .iter()
                .zip(dy)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect();
            vec![Some(dx)]
        }
        Op::Softmax { axis } => {
            let y = output.data();
            let mut dx = vec![0.0f32; dy.len()];
            kn::softmax_backward(&y.value, dy, &output.shape(), *axis, &mut dx);
            vec![Some(dx)]
        }
        Op::LayerNorm => {
            let row_len = *inputs[0].shape().last().unwrap();
            let x = inputs[0].data();
            let gamma = inputs[1].data();
            let mut dx = needs[0].then(|| vec![0.0f32; inputs[0].numel()]);
            let mut dgamma = needs[1].then(|| vec![0.0f32; row_len]);
            let mut dbeta = needs[2].then(|| vec![0.0f32; row_len]);
            kn::layer_norm_backward(
                &x.value,
                &gamma.value,
                dy,
                row_len,
                dx.as_deref_mut(),
                dgamma.as_deref_mut(),
                dbeta.as_deref_mut(),
            );
            vec![dx, dgamma, dbeta]
        }
        Op::Matmul => {
            let ash = inputs[0].shape();
            let bsh = inputs[1].shape();
            let r = ash.len();
            let (m, p, n) = (ash[r - 2], ash[r - 1], bsh[r - 1]);
            let batch: usize = ash[..r - 2].iter().product();
            let da = needs[0].then(|| {
                let mut da = vec![0.0f32; inputs[0].numel()];
                let b = inputs[1].data();
                for s in 0..batch {
                    kn::gemm_nt(
                        &mut da[s * m * p..(s + 1) * m * p],
                        &dy[s * m * n..(s + 1) * m * n],
                        &b.value[s * p * n..(s + 1) * p * n],
                        m,
                        n,
                        p,
                    );
                }
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![0.0f32; inputs[1].numel()];
                let a = inputs[0].data();
                for s in 0..batch {
                    kn::gemm_tn(
                        &mut db[s * p * n..(s + 1) * p * n],
                        &a.value[s * m * p..(s + 1) * m * p],
                        &dy[s * m * n..(s + 1) * m * n],
                        p,
                        m,
                        n,
                    );
                }
                db
            });
            vec![da, db]
        }
        Op::Concat { axis } => {
            let first = inputs[0].shape();
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[*axis + 1..].iter().product();
            let total_axis: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let out_row = total_axis * inner;
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (t, &need) in inputs.iter().zip(needs) {
                let s_axis = t.shape()[*axis];
                if need {
                    let mut g = vec![0.0f32; t.numel()];
                    for o in 0..outer {
                        let src = &dy[o * out_row + offset..o * out_row + offset + s_axis * inner];
                        g[o * s_axis * inner..(o + 1) * s_axis * inner].copy_from_slice(src);
                    }
                    grads.push(Some(g));
                } else {
                    grads.push(None);
                }
                offset += s_axis * inner;
            }
            grads
        }
        Op::Reshape => vec![Some(dy.to_vec())],
        Op::Transpose { perm } => {
            let out_shape = output.shape();
            vec![Some(permute(dy, &out_shape, &inverse_perm(perm)))]
        }
        Op::Add => vec![
            needs[0].then(|| dy.to_vec()),
            needs[1].then(|| dy.to_vec()),
        ],
        Op::Mul => {
            let da = needs[0].then(|| {
                let b = inputs[1].data();
                dy.iter().zip(&b.value).map(|(&g, &v)| g * v).collect()
            });
            let db = needs[1].then(|| {
                let a = inputs[0].data();
                dy.iter().zip(&a.value).map(|(&g, &v)| g * v).collect()
            });
            vec![da, db]
        }
        Op::Div => {
            let a = inputs[0].data();
            let b = inputs[1].data();
            let da = needs[0].then(|| dy.iter().zip(&b.value).map(|(&g, &v)| g / v).collect());
            let db = needs[1].then(|| {
                dy.iter()
                    .zip(a.value.iter().zip(&b.value))
                    .map(|(&g, (&av, &bv))| -g * av / (bv * bv))
                    .collect()
            });
            vec![da, db]
        }
        Op::Scale { factor } => vec![Some(dy.iter().map(|&g| g * factor).collect())],
        Op::AddConst { .. } => vec![Some(dy.to_vec())],
        Op::Sum => vec![Some(vec![dy[0]; inputs[0].numel()])],
        Op::Mean => {
            let n = inputs[0].numel() as f32;
            vec![Some(vec![dy[0] / n; inputs[0].numel()])]
        }
        Op::Log => {
            let x = inputs[0].data();
            vec![Some(dy.iter().zip(&x.value).map(|(&g, &v)| g / v).collect())]
        }
        Op::CosNormalize => {
            let row_len = *inputs[0].shape().last().unwrap();
            let x = inputs[0].data();
            let mut dx = vec![0.0f32; inputs[0].numel()];
            kn::cos_normalize_backward(&x.value, dy, row_len, &mut dx);
            vec![Some(dx)]
        }
        Op::GatherVoxels { positions } => {
            let xs = inputs[0].shape();
            let c = xs[1];
            let spatial: usize = xs[2..].iter().product();
            let mut dx = vec![0.0f32; inputs[0].numel()];
            for (r, &(s, v)) in positions.iter().enumerate() {
                for ch in 0..c {
                    dx[(s * c + ch) * spatial + v] += dy[r * c + ch];
                }
            }
            vec![Some(dx)]
        }
        Op::SliceBatch { start, len } => {
            let xs = inputs[0].shape();
            let inner: usize = xs[1..].iter().product();
            let mut dx = vec![0.0f32; inputs[0].numel()];
            dx[start * inner..(start + len) * inner].copy_from_slice(&dy[..len * inner]);
            vec![Some(dx)]
        }
    }
}
