//! Segmentation metrics (Dice, Jaccard, 95HD, ASD) and sliding-window
//! inference.
//!
//! Surface metrics use the voxel-center point-cloud discretization: a surface
//! voxel is a foreground voxel with at least one six-connected background or
//! out-of-bounds neighbor, distances are spacing-weighted Euclidean between
//! voxel centers, and the 95th percentile is nearest-rank.

use crate::error::{CamlError, Result};
use crate::volgen::{normalize_volume, LabelGrid, VolumeGrid};

#[derive(Clone, Copy, Debug)]
pub struct MetricRow {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
}

fn check_dims(pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
    if pred.dims != gt.dims {
        return Err(CamlError::Shape(format!(
            "prediction dims {:?} and ground-truth dims {:?} differ",
            pred.dims, gt.dims
        )));
    }
    Ok(())
}

/// 2|P ∩ G| / (|P| + |G|), with the both-empty case defined as 1.
pub fn dice(pred: &LabelGrid, gt: &LabelGrid) -> Result<f64> {
    check_dims(pred, gt)?;
    let (inter, p, g) = overlap_counts(pred, gt);
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// |P ∩ G| / |P ∪ G|, with the both-empty case defined as 1.
pub fn jaccard(pred: &LabelGrid, gt: &LabelGrid) -> Result<f64> {
    check_dims(pred, gt)?;
    let (inter, p, g) = overlap_counts(pred, gt);
    let union = p + g - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

fn overlap_counts(pred: &LabelGrid, gt: &LabelGrid) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let fa = a == 1;
        let fb = b == 1;
        inter += (fa && fb) as usize;
        p += fa as usize;
        g += fb as usize;
    }
    (inter, p, g)
}

/// Foreground voxels with a six-connected background or out-of-bounds
/// neighbor, as (z, y, x) coordinates.
pub fn surface_voxels(mask: &LabelGrid) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.dims;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.data[mask.index(z, y, x)] != 1 {
                    continue;
                }
                let mut boundary = false;
                let neighbors: [(isize, isize, isize); 6] = [
                    (-1, 0, 0),
                    (1, 0, 0),
                    (0, -1, 0),
                    (0, 1, 0),
                    (0, 0, -1),
                    (0, 0, 1),
                ];
                for (dz, dy, dx) in neighbors {
                    let nz = z as isize + dz;
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if nz < 0
                        || ny < 0
                        || nx < 0
                        || nz >= d as isize
                        || ny >= h as isize
                        || nx >= w as isize
                        || mask.data[mask.index(nz as usize, ny as usize, nx as usize)] != 1
                    {
                        boundary = true;
                        break;
                    }
                }
                if boundary {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// (hd95, asd): hd95 is the max of the two directed nearest-rank 95th
/// percentiles; asd is the mean over the pooled directed distances of both
/// directions.
pub fn surface_metrics(
    pred: &LabelGrid,
    gt: &LabelGrid,
    spacing: [f32; 3],
) -> Result<(f64, f64)> {
    check_dims(pred, gt)?;
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    if sp.is_empty() {
        return Err(CamlError::EmptySurface("prediction"));
    }
    if sg.is_empty() {
        return Err(CamlError::EmptySurface("ground truth"));
    }
    let d_pg = directed_distances(&sp, &sg, spacing);
    let d_gp = directed_distances(&sg, &sp, spacing);
    let hd95 = nearest_rank_p95(&d_pg).max(nearest_rank_p95(&d_gp));
    let total: f64 = d_pg.iter().chain(&d_gp).sum();
    let asd = total / (d_pg.len() + d_gp.len()) as f64;
    Ok((hd95, asd))
}

fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f32; 3]) -> Vec<f64> {
    let s = [spacing[0] as f64, spacing[1] as f64, spacing[2] as f64];
    from.iter()
        .map(|a| {
            let mut best = f64::INFINITY;
            for b in to {
                let dz = (a[0] as f64 - b[0] as f64) * s[0];
                let dy = (a[1] as f64 - b[1] as f64) * s[1];
                let dx = (a[2] as f64 - b[2] as f64) * s[2];
                let d2 = dz * dz + dy * dy + dx * dx;
                if d2 < best {
                    best = d2;
                }
            }
            best.sqrt()
        })
        .collect()
}

/// Nearest-rank percentile: sorted ascending, entry at ceil(0.95 n), 1-based.
fn nearest_rank_p95(distances: &[f64]) -> f64 {
    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).max(1);
    sorted[rank - 1]
}

pub fn metric_row(pred: &LabelGrid, gt: &LabelGrid, spacing: [f32; 3]) -> Result<MetricRow> {
    let (hd95, asd) = surface_metrics(pred, gt, spacing)?;
    Ok(MetricRow {
        dice: dice(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
        hd95,
        asd,
    })
}

/// Window origins along one axis: steps of `stride`, with the final window
/// clamped to end exactly at the border.
pub fn window_starts(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut z = 0;
    loop {
        if z + window >= dim {
            starts.push(dim - window);
            break;
        }
        starts.push(z);
        z += stride;
    }
    starts
}

/// Tiles the normalized volume with windows, averages per-voxel class
/// probabilities over every covering window, and takes the per-voxel argmax
/// (ties to the lower class index). `forward` receives one normalized window
/// and must return `n_classes * window voxels` post-softmax probabilities in
/// class-major order.
pub fn sliding_window_infer<F>(
    mut forward: F,
    volume: &VolumeGrid,
    window: [usize; 3],
    stride: [usize; 3],
    n_classes: usize,
) -> Result<LabelGrid>
where
    F: FnMut(&VolumeGrid) -> Result<Vec<f32>>,
{
    for ((&d, &w), &s) in volume.dims.iter().zip(&window).zip(&stride) {
        if w > d {
            return Err(CamlError::Shape(format!(
                "window {window:?} exceeds volume dims {:?}",
                volume.dims
            )));
        }
        if s == 0 || s > w {
            return Err(CamlError::Shape(format!(
                "stride {stride:?} must be in [1, window] = [1, {w}]"
            )));
        }
    }
    let norm = normalize_volume(volume);
    let [vd, vh, vw] = norm.dims;
    let voxels = vd * vh * vw;
    let mut acc = vec![0.0f64; n_classes * voxels];
    let mut cover = vec![0u32; voxels];
    let win_voxels = window[0] * window[1] * window[2];

    for &oz in &window_starts(vd, window[0], stride[0]) {
        for &oy in &window_starts(vh, window[1], stride[1]) {
            for &ox in &window_starts(vw, window[2], stride[2]) {
                let chunk = crate::volgen::crop_volume_at(&norm, [oz, oy, ox], window);
                let probs = forward(&chunk)?;
                if probs.len() != n_classes * win_voxels {
                    return Err(CamlError::Shape(format!(
                        "forward returned {} values for a {} class x {} voxel window",
                        probs.len(),
                        n_classes,
                        win_voxels
                    )));
                }
                let mut i = 0;
                for c in 0..n_classes {
                    for z in 0..window[0] {
                        for y in 0..window[1] {
                            let base = ((oz + z) * vh + oy + y) * vw + ox;
                            for x in 0..window[2] {
                                acc[c * voxels + base + x] += probs[i] as f64;
                                i += 1;
                            }
                        }
                    }
                }
                for z in 0..window[0] {
                    for y in 0..window[1] {
                        let base = ((oz + z) * vh + oy + y) * vw + ox;
                        for x in 0..window[2] {
                            cover[base + x] += 1;
                        }
                    }
                }
            }
        }
    }

    let mut out = vec![0u8; voxels];
    for v in 0..voxels {
        debug_assert!(cover[v] > 0, "voxel left uncovered by the window tiling");
        let mut best_c = 0;
        let mut best_p = f64::NEG_INFINITY;
        for c in 0..n_classes {
            let p = acc[c * voxels + v] / cover[v] as f64;
            if p > best_p {
                best_p = p;
                best_c = c;
            }
        }
        out[v] = best_c as u8;
    }
    LabelGrid::new(norm.dims, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: [usize; 3], fg: &[[usize; 3]]) -> LabelGrid {
        let mut l = LabelGrid::new(dims, vec![0; dims[0] * dims[1] * dims[2]]).unwrap();
        for &[z, y, x] in fg {
            let i = l.index(z, y, x);
            l.data[i] = 1;
        }
        l
    }

    #[test]
    fn identical_masks_score_perfectly() {
        let a = grid([4, 4, 4], &[[1, 1, 1], [1, 1, 2], [2, 2, 2]]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        let (hd95, asd) = surface_metrics(&a, &a, [1.0; 3]).unwrap();
        assert_eq!((hd95, asd), (0.0, 0.0));
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a = grid([4, 4, 4], &[[0, 0, 0]]);
        let b = grid([4, 4, 4], &[[3, 3, 3]]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_overlap_counts() {
        // |P| = 4, |G| = 6, |P ∩ G| = 3.
        let p = grid([2, 3, 3], &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [1, 2, 2]]);
        let g = grid(
            [2, 3, 3],
            &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 1, 0], [0, 1, 1], [0, 1, 2]],
        );
        assert!((dice(&p, &g).unwrap() - 0.6).abs() < 1e-12);
        assert!((jaccard(&p, &g).unwrap() - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn both_empty_masks_define_one() {
        let a = grid([3, 3, 3], &[]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let a = grid([3, 3, 3], &[[0, 0, 0]]);
        let b = grid([3, 3, 4], &[[0, 0, 0]]);
        assert!(dice(&a, &b).is_err());
        assert!(surface_metrics(&a, &b, [1.0; 3]).is_err());
    }

    #[test]
    fn empty_mask_surface_is_an_error() {
        let empty = grid([3, 3, 3], &[]);
        let full = grid([3, 3, 3], &[[1, 1, 1]]);
        match surface_metrics(&empty, &full, [1.0; 3]) {
            Err(CamlError::EmptySurface(side)) => assert_eq!(side, "prediction"),
            other => panic!("expected EmptySurface, got {other:?}"),
        }
        match surface_metrics(&full, &empty, [1.0; 3]) {
            Err(CamlError::EmptySurface(side)) => assert_eq!(side, "ground truth"),
            other => panic!("expected EmptySurface, got {other:?}"),
        }
    }

    #[test]
    fn single_voxels_three_apart() {
        let a = grid([8, 4, 4], &[[1, 1, 1]]);
        let b = grid([8, 4, 4], &[[4, 1, 1]]);
        let (hd95, asd) = surface_metrics(&a, &b, [1.0; 3]).unwrap();
        assert!((hd95 - 3.0).abs() < 1e-12);
        assert!((asd - 3.0).abs() < 1e-12);
    }

    #[test]
    fn spacing_weights_distances() {
        let a = grid([8, 4, 4], &[[1, 1, 1]]);
        let b = grid([8, 4, 4], &[[4, 1, 1]]);
        let (hd95, asd) = surface_metrics(&a, &b, [0.5, 1.0, 1.0]).unwrap();
        assert!((hd95 - 1.5).abs() < 1e-12);
        assert!((asd - 1.5).abs() < 1e-12);
    }

    /// Independent all-pairs reimplementation used as the oracle.
    fn oracle_surface(mask: &LabelGrid) -> Vec<[f64; 3]> {
        let [d, h, w] = mask.dims;
        let mut pts = Vec::new();
        for z in 0..d as isize {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if mask.data[mask.index(z as usize, y as usize, x as usize)] != 1 {
                        continue;
                    }
                    let mut edge = false;
                    for (dz, dy, dx) in
                        [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    {
                        let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                        let outside =
                            nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize;
                        if outside
                            || mask.data[mask.index(nz as usize, ny as usize, nx as usize)] == 0
                        {
                            edge = true;
                        }
                    }
                    if edge {
                        pts.push([z as f64, y as f64, x as f64]);
                    }
                }
            }
        }
        pts
    }

    fn oracle_metrics(pred: &LabelGrid, gt: &LabelGrid, sp: [f32; 3]) -> (f64, f64) {
        let a = oracle_surface(pred);
        let b = oracle_surface(gt);
        let dist = |p: &[f64; 3], q: &[f64; 3]| {
            let dz = (p[0] - q[0]) * sp[0] as f64;
            let dy = (p[1] - q[1]) * sp[1] as f64;
            let dx = (p[2] - q[2]) * sp[2] as f64;
            (dz * dz + dy * dy + dx * dx).sqrt()
        };
        let dir = |from: &Vec<[f64; 3]>, to: &Vec<[f64; 3]>| -> Vec<f64> {
            from.iter()
                .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
                .collect()
        };
        let ab = dir(&a, &b);
        let ba = dir(&b, &a);
        let p95 = |v: &Vec<f64>| {
            let mut s = v.clone();
            s.sort_by(|x, y| x.partial_cmp(y).unwrap());
            s[((0.95 * s.len() as f64).ceil() as usize).max(1) - 1]
        };
        let hd95 = p95(&ab).max(p95(&ba));
        let asd = (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64;
        (hd95, asd)
    }

    #[test]
    fn hundred_random_masks_match_the_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut done = 0;
        while done < 100 {
            let dims = [6, 6, 6];
            let data: Vec<u8> = (0..216).map(|_| rng.gen_bool(0.3) as u8).collect();
            let gdata: Vec<u8> = (0..216).map(|_| rng.gen_bool(0.3) as u8).collect();
            let p = LabelGrid::new(dims, data).unwrap();
            let g = LabelGrid::new(dims, gdata).unwrap();
            if surface_voxels(&p).is_empty() || surface_voxels(&g).is_empty() {
                continue;
            }
            let spacing = [1.0, 0.7, 1.3];
            let (hd95, asd) = surface_metrics(&p, &g, spacing).unwrap();
            let (ohd, oasd) = oracle_metrics(&p, &g, spacing);
            assert!((hd95 - ohd).abs() < 1e-6, "hd95 {hd95} vs oracle {ohd}");
            assert!((asd - oasd).abs() < 1e-6, "asd {asd} vs oracle {oasd}");

            // Side properties: jaccard <= dice; hd95 and asd bounded by the
            // maximum directed distance.
            let d = dice(&p, &g).unwrap();
            let j = jaccard(&p, &g).unwrap();
            assert!(j <= d + 1e-12);
            let sp = surface_voxels(&p);
            let sg = surface_voxels(&g);
            let max_directed = directed_distances(&sp, &sg, spacing)
                .into_iter()
                .chain(directed_distances(&sg, &sp, spacing))
                .fold(0.0f64, f64::max);
            assert!(hd95 <= max_directed + 1e-12);
            assert!(asd <= max_directed + 1e-12);
            done += 1;
        }
    }

    #[test]
    fn symmetry_of_all_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [5, 5, 5];
        let p = LabelGrid::new(dims, (0..125).map(|_| rng.gen_bool(0.4) as u8).collect()).unwrap();
        let g = LabelGrid::new(dims, (0..125).map(|_| rng.gen_bool(0.4) as u8).collect()).unwrap();
        assert_eq!(dice(&p, &g).unwrap(), dice(&g, &p).unwrap());
        assert_eq!(jaccard(&p, &g).unwrap(), jaccard(&g, &p).unwrap());
        let m1 = surface_metrics(&p, &g, [1.0; 3]).unwrap();
        let m2 = surface_metrics(&g, &p, [1.0; 3]).unwrap();
        assert!((m1.0 - m2.0).abs() < 1e-12);
        assert!((m1.1 - m2.1).abs() < 1e-12);
    }

    #[test]
    fn window_starts_cover_with_clamped_tail() {
        assert_eq!(window_starts(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(window_starts(8, 4, 4), vec![0, 4]);
        assert_eq!(window_starts(4, 4, 4), vec![0]);
        assert_eq!(window_starts(9, 4, 2), vec![0, 2, 4, 5]);
    }

    /// Pointwise "classifier": class 1 where intensity > 0.
    fn threshold_forward(v: &VolumeGrid) -> Result<Vec<f32>> {
        let n = v.voxel_count();
        let mut probs = vec![0.0f32; 2 * n];
        for (i, &x) in v.data.iter().enumerate() {
            let p1 = 1.0 / (1.0 + (-8.0 * x).exp());
            probs[i] = 1.0 - p1;
            probs[n + i] = p1;
        }
        Ok(probs)
    }

    #[test]
    fn full_window_equals_single_forward() {
        let (vol, _, _) = crate::volgen::synth_sample(31, 0, [8, 8, 8]);
        let single = {
            let norm = normalize_volume(&vol);
            let probs = threshold_forward(&norm).unwrap();
            let n = norm.voxel_count();
            let data: Vec<u8> = (0..n).map(|i| (probs[n + i] > probs[i]) as u8).collect();
            LabelGrid::new(norm.dims, data).unwrap()
        };
        let windowed =
            sliding_window_infer(threshold_forward, &vol, [8, 8, 8], [8, 8, 8], 2).unwrap();
        assert_eq!(single.data, windowed.data);
    }

    #[test]
    fn overlapping_windows_agree_with_full_forward_for_pointwise_net() {
        let (vol, _, _) = crate::volgen::synth_sample(32, 1, [12, 12, 12]);
        let full = sliding_window_infer(threshold_forward, &vol, [12, 12, 12], [12, 12, 12], 2)
            .unwrap();
        let tiled = sliding_window_infer(threshold_forward, &vol, [8, 8, 8], [4, 4, 4], 2).unwrap();
        assert_eq!(full.data, tiled.data);
    }

    #[test]
    fn window_larger_than_volume_is_rejected() {
        let (vol, _, _) = crate::volgen::synth_sample(1, 0, [8, 8, 8]);
        assert!(sliding_window_infer(threshold_forward, &vol, [16, 8, 8], [8, 8, 8], 2).is_err());
        assert!(sliding_window_infer(threshold_forward, &vol, [8, 8, 8], [0, 8, 8], 2).is_err());
        assert!(sliding_window_infer(threshold_forward, &vol, [8, 8, 8], [9, 8, 8], 2).is_err());
    }
}
