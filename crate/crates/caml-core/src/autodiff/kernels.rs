//! Pure array kernels behind the tape ops.
//!
//! Everything here is single-threaded and runs in a fixed loop order, so
//! results are bitwise reproducible for a given binary. Contractions
//! accumulate in f64 before rounding once to f32, which keeps the results
//! insensitive to operand ordering at f32 resolution — reordering a batch or
//! the spatial positions must not move attention outputs by more than the
//! final rounding step.

/// Column-block width for the cache-blocked GEMM variants.
const NB: usize = 512;

/// C (m x n) += A (m x k) @ B (k x n), all row-major.
pub fn gemm_nn(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut acc = vec![0.0f64; NB.min(n.max(1))];
    let mut j0 = 0;
    while j0 < n {
        let jw = NB.min(n - j0);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let accs = &mut acc[..jw];
            accs.fill(0.0);
            for (kk, &aik) in arow.iter().enumerate() {
                if aik != 0.0 {
                    let aik = aik as f64;
                    let brow = &b[kk * n + j0..kk * n + j0 + jw];
                    for (av, &bv) in accs.iter_mut().zip(brow) {
                        *av += aik * bv as f64;
                    }
                }
            }
            let crow = &mut c[i * n + j0..i * n + j0 + jw];
            for (cv, &av) in crow.iter_mut().zip(accs.iter()) {
                *cv += av as f32;
            }
        }
        j0 += jw;
    }
}

/// C (m x n) += A^T @ B with A stored (k x m), B (k x n).
pub fn gemm_tn(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut acc = vec![0.0f64; m * NB.min(n.max(1))];
    let mut j0 = 0;
    while j0 < n {
        let jw = NB.min(n - j0);
        let accs = &mut acc[..m * jw];
        accs.fill(0.0);
        for kk in 0..k {
            let arow = &a[kk * m..(kk + 1) * m];
            let brow = &b[kk * n + j0..kk * n + j0 + jw];
            for i in 0..m {
                let aik = arow[i];
                if aik != 0.0 {
                    let aik = aik as f64;
                    let accr = &mut accs[i * jw..(i + 1) * jw];
                    for (av, &bv) in accr.iter_mut().zip(brow) {
                        *av += aik * bv as f64;
                    }
                }
            }
        }
        for i in 0..m {
            let crow = &mut c[i * n + j0..i * n + j0 + jw];
            for (cv, &av) in crow.iter_mut().zip(&accs[i * jw..(i + 1) * jw]) {
                *cv += av as f32;
            }
        }
        j0 += jw;
    }
}

/// C (m x n) += A (m x k) @ B^T with B stored (n x k).
pub fn gemm_nt(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av as f64 * bv as f64;
            }
            *cv += acc as f32;
        }
    }
}

/// Spatial geometry of a 3-d convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub out_dims: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn in_voxels(&self) -> usize {
        self.in_dims.iter().product()
    }
    pub fn out_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }
}

/// Unrolls one sample (c_in x D x H x W) into a (patch_len x out_voxels) matrix.
pub fn im2col(sample: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let [d, h, w] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.out_dims;
    let n = od * oh * ow;
    let s = g.stride as isize;
    let p = g.padding as isize;
    debug_assert_eq!(cols.len(), g.patch_len() * n);
    cols.fill(0.0);
    for ci in 0..g.c_in {
        let chan = &sample[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((ci * kd + kz) * kh + ky) * kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oz in 0..od {
                        let iz = oz as isize * s + kz as isize - p;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_base = (iz as usize * h + iy as usize) * w;
                            let dst_base = (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    dst[dst_base + ox] = chan[src_base + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a (patch_len x out_voxels) gradient back onto one sample grid.
pub fn col2im_add(cols: &[f32], g: &ConvGeom, sample_grad: &mut [f32]) {
    let [d, h, w] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.out_dims;
    let n = od * oh * ow;
    let s = g.stride as isize;
    let p = g.padding as isize;
    for ci in 0..g.c_in {
        let chan = &mut sample_grad[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((ci * kd + kz) * kh + ky) * kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oz in 0..od {
                        let iz = oz as isize * s + kz as isize - p;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_base = (iz as usize * h + iy as usize) * w;
                            let src_base = (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    chan[dst_base + ix as usize] += src[src_base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward(x: &[f32], w: &[f32], b: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let n = g.out_voxels();
    let k = g.patch_len();
    let in_len = g.c_in * g.in_voxels();
    let out_len = g.c_out * n;
    let mut cols = vec![0.0f32; k * n];
    for s in 0..g.batch {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        let o = &mut out[s * out_len..(s + 1) * out_len];
        o.fill(0.0);
        gemm_nn(o, w, &cols, g.c_out, k, n);
        for co in 0..g.c_out {
            let bias = b[co];
            for v in &mut o[co * n..(co + 1) * n] {
                *v += bias;
            }
        }
    }
}

/// Accumulates dx/dw/db; any of the gradient slots may be `None` to skip it.
pub fn conv3d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
    mut db: Option<&mut [f32]>,
) {
    let n = g.out_voxels();
    let k = g.patch_len();
    let in_len = g.c_in * g.in_voxels();
    let out_len = g.c_out * n;
    let mut cols = vec![0.0f32; k * n];
    let mut dcols = vec![0.0f32; k * n];
    for s in 0..g.batch {
        let dys = &dy[s * out_len..(s + 1) * out_len];
        if dw.is_some() || dx.is_some() {
            im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        }
        if let Some(dw) = dw.as_deref_mut() {
            gemm_nt(dw, dys, &cols, g.c_out, n, k);
        }
        if let Some(db) = db.as_deref_mut() {
            for co in 0..g.c_out {
                let mut acc = 0.0f32;
                for &v in &dys[co * n..(co + 1) * n] {
                    acc += v;
                }
                db[co] += acc;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.fill(0.0);
            gemm_tn(&mut dcols, w, dys, k, g.c_out, n);
            col2im_add(&dcols, g, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
}

/// Per-axis interpolation taps for a x2 trilinear resize (half-pixel centers).
fn upsample_taps(size_in: usize) -> Vec<(usize, usize, f32)> {
    let size_out = size_in * 2;
    (0..size_out)
        .map(|o| {
            let src = (o as f32 + 0.5) * 0.5 - 0.5;
            let f = src.floor();
            let t = src - f;
            let i0 = (f as isize).clamp(0, size_in as isize - 1) as usize;
            let i1 = ((f as isize + 1).clamp(0, size_in as isize - 1)) as usize;
            (i0, i1, t)
        })
        .collect()
}

pub fn upsample2x_forward(x: &[f32], bc: usize, dims: [usize; 3], out: &mut [f32]) {
    let [d, h, w] = dims;
    let tz = upsample_taps(d);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    for c in 0..bc {
        let src = &x[c * d * h * w..(c + 1) * d * h * w];
        let dst = &mut out[c * od * oh * ow..(c + 1) * od * oh * ow];
        for (oz, &(z0, z1, fz)) in tz.iter().enumerate() {
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let base = (oz * oh + oy) * ow;
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let c000 = src[(z0 * h + y0) * w + x0];
                    let c001 = src[(z0 * h + y0) * w + x1];
                    let c010 = src[(z0 * h + y1) * w + x0];
                    let c011 = src[(z0 * h + y1) * w + x1];
                    let c100 = src[(z1 * h + y0) * w + x0];
                    let c101 = src[(z1 * h + y0) * w + x1];
                    let c110 = src[(z1 * h + y1) * w + x0];
                    let c111 = src[(z1 * h + y1) * w + x1];
                    let c00 = c000 + (c001 - c000) * fx;
                    let c01 = c010 + (c011 - c010) * fx;
                    let c10 = c100 + (c101 - c100) * fx;
                    let c11 = c110 + (c111 - c110) * fx;
                    let c0 = c00 + (c01 - c00) * fy;
                    let c1 = c10 + (c11 - c10) * fy;
                    dst[base + ox] = c0 + (c1 - c0) * fz;
                }
            }
        }
    }
}

pub fn upsample2x_backward(dy: &[f32], bc: usize, dims: [usize; 3], dx: &mut [f32]) {
    let [d, h, w] = dims;
    let tz = upsample_taps(d);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    for c in 0..bc {
        let src = &dy[c * od * oh * ow..(c + 1) * od * oh * ow];
        let dst = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for (oz, &(z0, z1, fz)) in tz.iter().enumerate() {
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let base = (oz * oh + oy) * ow;
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = src[base + ox];
                    let w000 = (1.0 - fz) * (1.0 - fy) * (1.0 - fx);
                    let w001 = (1.0 - fz) * (1.0 - fy) * fx;
                    let w010 = (1.0 - fz) * fy * (1.0 - fx);
                    let w011 = (1.0 - fz) * fy * fx;
                    let w100 = fz * (1.0 - fy) * (1.0 - fx);
                    let w101 = fz * (1.0 - fy) * fx;
                    let w110 = fz * fy * (1.0 - fx);
                    let w111 = fz * fy * fx;
                    dst[(z0 * h + y0) * w + x0] += g * w000;
                    dst[(z0 * h + y0) * w + x1] += g * w001;
                    dst[(z0 * h + y1) * w + x0] += g * w010;
                    dst[(z0 * h + y1) * w + x1] += g * w011;
                    dst[(z1 * h + y0) * w + x0] += g * w100;
                    dst[(z1 * h + y0) * w + x1] += g * w101;
                    dst[(z1 * h + y1) * w + x0] += g * w110;
                    dst[(z1 * h + y1) * w + x1] += g * w111;
                }
            }
        }
    }
}

/// Iterates `axis`-slices of an arbitrary-rank tensor as (outer, inner) frames.
pub struct AxisIter {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

pub fn axis_iter(shape: &[usize], axis: usize) -> AxisIter {
    AxisIter {
        outer: shape[..axis].iter().product(),
        len: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    }
}

pub fn softmax_forward(x: &[f32], shape: &[usize], axis: usize, out: &mut [f32]) {
    let it = axis_iter(shape, axis);
    for o in 0..it.outer {
        for i in 0..it.inner {
            let base = o * it.len * it.inner + i;
            let mut mx = f32::NEG_INFINITY;
            for j in 0..it.len {
                mx = mx.max(x[base + j * it.inner]);
            }
            let mut denom = 0.0f64;
            for j in 0..it.len {
                let e = (x[base + j * it.inner] - mx).exp();
                out[base + j * it.inner] = e;
                denom += e as f64;
            }
            let inv = 1.0 / denom;
            for j in 0..it.len {
                let idx = base + j * it.inner;
                out[idx] = (out[idx] as f64 * inv) as f32;
            }
        }
    }
}

pub fn softmax_backward(y: &[f32], dy: &[f32], shape: &[usize], axis: usize, dx: &mut [f32]) {
    let it = axis_iter(shape, axis);
    for o in 0..it.outer {
        for i in 0..it.inner {
            let base = o * it.len * it.inner + i;
            let mut dot = 0.0f64;
            for j in 0..it.len {
                let idx = base + j * it.inner;
                dot += dy[idx] as f64 * y[idx] as f64;
            }
            for j in 0..it.len {
                let idx = base + j * it.inner;
                dx[idx] += (y[idx] as f64 * (dy[idx] as f64 - dot)) as f32;
            }
        }
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

pub fn layer_norm_forward(x: &[f32], gamma: &[f32], beta: &[f32], row_len: usize, out: &mut [f32]) {
    let rows = x.len() / row_len;
    for r in 0..rows {
        let xr = &x[r * row_len..(r + 1) * row_len];
        let or = &mut out[r * row_len..(r + 1) * row_len];
        let mean = xr.iter().sum::<f32>() / row_len as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / row_len as f32;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..row_len {
            or[j] = gamma[j] * (xr[j] - mean) * inv_std + beta[j];
        }
    }
}

pub fn layer_norm_backward(
    x: &[f32],
    gamma: &[f32],
    dy: &[f32],
    row_len: usize,
    mut dx: Option<&mut [f32]>,
    mut dgamma: Option<&mut [f32]>,
    mut dbeta: Option<&mut [f32]>,
) {
    let rows = x.len() / row_len;
    let ln = row_len as f32;
    for r in 0..rows {
        let xr = &x[r * row_len..(r + 1) * row_len];
        let dyr = &dy[r * row_len..(r + 1) * row_len];
        let mean = xr.iter().sum::<f32>() / ln;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / ln;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        if let Some(dgamma) = dgamma.as_deref_mut() {
            for j in 0..row_len {
                dgamma[j] += dyr[j] * (xr[j] - mean) * inv_std;
            }
        }
        if let Some(dbeta) = dbeta.as_deref_mut() {
            for j in 0..row_len {
                dbeta[j] += dyr[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxr = &mut dx[r * row_len..(r + 1) * row_len];
            // dxhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            let mut mean_dxhat = 0.0f32;
            let mut mean_dxhat_xhat = 0.0f32;
            for j in 0..row_len {
                let xhat = (xr[j] - mean) * inv_std;
                let dxhat = dyr[j] * gamma[j];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
            }
            mean_dxhat /= ln;
            mean_dxhat_xhat /= ln;
            for j in 0..row_len {
                let xhat = (xr[j] - mean) * inv_std;
                let dxhat = dyr[j] * gamma[j];
                dxr[j] += inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
}

pub const COS_NORM_EPS: f32 = 1e-8;

pub fn cos_normalize_forward(x: &[f32], row_len: usize, out: &mut [f32]) {
    let rows = x.len() / row_len;
    for r in 0..rows {
        let xr = &x[r * row_len..(r + 1) * row_len];
        let norm = xr.iter().map(|v| v * v).sum::<f32>().sqrt();
        let inv = 1.0 / (norm + COS_NORM_EPS);
        for j in 0..row_len {
            out[r * row_len + j] = xr[j] * inv;
        }
    }
}

pub fn cos_normalize_backward(x: &[f32], dy: &[f32], row_len: usize, dx: &mut [f32]) {
    let rows = x.len() / row_len;
    for r in 0..rows {
        let xr = &x[r * row_len..(r + 1) * row_len];
        let dyr = &dy[r * row_len..(r + 1) * row_len];
        let dxr = &mut dx[r * row_len..(r + 1) * row_len];
        let norm = xr.iter().map(|v| v * v).sum::<f32>().sqrt();
        let denom = norm + COS_NORM_EPS;
        let inv = 1.0 / denom;
        if norm < 1e-20 {
            for j in 0..row_len {
                dxr[j] += dyr[j] * inv;
            }
        } else {
            let dot = xr.iter().zip(dyr).map(|(a, b)| a * b).sum::<f32>();
            let coef = dot / (denom * denom * norm);
            for j in 0..row_len {
                dxr[j] += dyr[j] * inv - coef * xr[j];
            }
        }
    }
}
