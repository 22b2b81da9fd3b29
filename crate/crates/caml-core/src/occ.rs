//! Omni-correlation consistency: the prototype memory bank harvested from
//! labeled samples, confidence-based embedding sampling on unlabeled
//! samples, the omni-correlation matrices, and the consistency loss that
//! ties the two branches together in embedding space.
//!
//! The bank keeps a FIFO queue of at most N class-tagged embeddings per
//! labeled sample. Entries are fused means of the two branches' projected
//! features at voxels where both branches predict the ground-truth class,
//! stored L2-normalized so the later cosine reduces to a dot product. All
//! bank bookkeeping is plain `f32` arithmetic off the autodiff graph; only
//! the sampled embeddings of the current batch carry gradients.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{CamlError, Result};

/// Additive guard inside the consistency loss logarithm.
pub const OCC_LOG_EPS: f32 = 1e-12;
/// Default softmax temperature for the correlation matrices.
pub const DEFAULT_TEMPERATURE: f32 = 10.0;
/// Fused embeddings with a norm below this are degenerate and skipped.
const MIN_FUSED_NORM: f32 = 1e-6;

pub const BANK_MAGIC: &[u8; 8] = b"CAMLBNK1";

#[derive(Clone, Debug)]
pub struct BankSlot {
    pub class: usize,
    /// L2-normalized, length = projection width.
    pub embedding: Vec<f32>,
}

/// FIFO prototype memory over the labeled subset.
pub struct PrototypeBank {
    n_slots: usize,
    proj_dim: usize,
    n_classes: usize,
    queues: BTreeMap<u64, VecDeque<BankSlot>>,
}

impl PrototypeBank {
    pub fn new(sample_ids: &[u64], n_slots: usize, proj_dim: usize, n_classes: usize) -> Self {
        let queues = sample_ids
            .iter()
            .map(|&id| (id, VecDeque::with_capacity(n_slots)))
            .collect();
        PrototypeBank {
            n_slots,
            proj_dim,
            n_classes,
            queues,
        }
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn queue_len(&self, sample_id: u64) -> Option<usize> {
        self.queues.get(&sample_id).map(|q| q.len())
    }

    /// Normalizes and enqueues one embedding, evicting the oldest entry if
    /// the sample's queue is full.
    pub fn enqueue(&mut self, sample_id: u64, class: usize, embedding: &[f32]) -> Result<()> {
        if class >= self.n_classes {
            return Err(CamlError::Config(format!(
                "bank class {class} out of range for {} classes",
                self.n_classes
            )));
        }
        if embedding.len() != self.proj_dim {
            return Err(CamlError::Shape(format!(
                "bank embedding length {} != projection width {}",
                embedding.len(),
                self.proj_dim
            )));
        }
        let norm = embedding.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm < MIN_FUSED_NORM {
            return Err(CamlError::Config(
                "refusing to bank a zero-norm embedding".into(),
            ));
        }
        let queue = self.queues.get_mut(&sample_id).ok_or_else(|| {
            CamlError::Config(format!("sample id {sample_id} is not tracked by the bank"))
        })?;
        if queue.len() == self.n_slots {
            queue.pop_front();
        }
        queue.push_back(BankSlot {
            class,
            embedding: embedding.iter().map(|v| v / norm).collect(),
        });
        Ok(())
    }

    /// Entries of one class across all queues, in (sample id, queue position)
    /// order. Borrowed slots stay valid only while the bank is unchanged.
    fn class_entries(&self, class: usize) -> Vec<&BankSlot> {
        self.queues
            .values()
            .flat_map(|q| q.iter().filter(|s| s.class == class))
            .collect()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.class_entries(class).len()
    }

    /// True once every class has at least one banked embedding; the
    /// consistency loss stays switched off before that.
    pub fn is_warm(&self) -> bool {
        (0..self.n_classes).all(|c| self.class_count(c) > 0)
    }

    pub fn total_entries(&self) -> usize {
        self.queues.values().map(|q| q.len()).sum()
    }
}

fn check_batch_tensors(
    bank: &PrototypeBank,
    logits_v: &Tensor,
    logits_a: &Tensor,
    proj_v: &Tensor,
    proj_a: &Tensor,
) -> Result<(usize, usize, usize, usize)> {
    let ls = logits_v.shape();
    if ls.len() != 5 {
        return Err(CamlError::Shape(format!(
            "logits must be rank 5, got {ls:?}"
        )));
    }
    if logits_a.shape() != ls {
        return Err(CamlError::Shape(format!(
            "branch logits disagree: {ls:?} vs {:?}",
            logits_a.shape()
        )));
    }
    let (b, c) = (ls[0], ls[1]);
    let spatial = ls[2] * ls[3] * ls[4];
    if c != bank.n_classes {
        return Err(CamlError::Shape(format!(
            "logits carry {c} classes, bank expects {}",
            bank.n_classes
        )));
    }
    let ps = proj_v.shape();
    if ps.len() != 5 || ps[0] != b || ps[2..] != ls[2..] {
        return Err(CamlError::Shape(format!(
            "projections {ps:?} do not match logits {ls:?}"
        )));
    }
    if proj_a.shape() != ps {
        return Err(CamlError::Shape(format!(
            "branch projections disagree: {ps:?} vs {:?}",
            proj_a.shape()
        )));
    }
    if ps[1] != bank.proj_dim {
        return Err(CamlError::Shape(format!(
            "projection width {} != bank width {}",
            ps[1], bank.proj_dim
        )));
    }
    Ok((b, c, ps[1], spatial))
}

/// Per-voxel argmax over the class axis of a (b, C, ...) value buffer;
/// ties resolve to the lower class index.
fn argmax_classes(values: &[f32], b: usize, c: usize, spatial: usize) -> Vec<usize> {
    let mut out = vec![0usize; b * spatial];
    for s in 0..b {
        for v in 0..spatial {
            let mut best = 0usize;
            let mut best_val = values[(s * c) * spatial + v];
            for cls in 1..c {
                let val = values[(s * c + cls) * spatial + v];
                if val > best_val {
                    best_val = val;
                    best = cls;
                }
            }
            out[s * spatial + v] = best;
        }
    }
    out
}

/// Softmax over the class axis, one probability row per voxel.
fn class_probs(values: &[f32], b: usize, c: usize, spatial: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; values.len()];
    for s in 0..b {
        for v in 0..spatial {
            let mut max = f32::NEG_INFINITY;
            for cls in 0..c {
                max = max.max(values[(s * c + cls) * spatial + v]);
            }
            let mut denom = 0.0f32;
            for cls in 0..c {
                let e = (values[(s * c + cls) * spatial + v] - max).exp();
                out[(s * c + cls) * spatial + v] = e;
                denom += e;
            }
            for cls in 0..c {
                out[(s * c + cls) * spatial + v] /= denom;
            }
        }
    }
    out
}

/// Harvests prototypes from the labeled half of a batch: voxels where both
/// branches predict the ground-truth class contribute the L2-normalized
/// mean of the two projected features. At most N entries per sample are
/// enqueued per call; a larger eligible set is thinned by a seeded uniform
/// subsample (kept in ascending voxel order so FIFO age is deterministic).
#[allow(clippy::too_many_arguments)]
pub fn update_bank(
    bank: &mut PrototypeBank,
    logits_v: &Tensor,
    logits_a: &Tensor,
    proj_v: &Tensor,
    proj_a: &Tensor,
    labels: &[u8],
    sample_ids: &[u64],
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let (b, c, dim, spatial) = check_batch_tensors(bank, logits_v, logits_a, proj_v, proj_a)?;
    if labels.len() != b * spatial {
        return Err(CamlError::Shape(format!(
            "labels length {} != {b} samples x {spatial} voxels",
            labels.len()
        )));
    }
    if sample_ids.len() != b {
        return Err(CamlError::Shape(format!(
            "{} sample ids for a batch of {b}",
            sample_ids.len()
        )));
    }
    for &id in sample_ids {
        if !bank.queues.contains_key(&id) {
            return Err(CamlError::Config(format!(
                "sample id {id} is not tracked by the bank"
            )));
        }
    }

    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= c) {
        return Err(CamlError::Config(format!(
            "label {bad} out of range for {c} classes"
        )));
    }

    let lv = logits_v.value();
    let la = logits_a.value();
    let pred_v = argmax_classes(&lv, b, c, spatial);
    let pred_a = argmax_classes(&la, b, c, spatial);
    let pv = proj_v.value();
    let pa = proj_a.value();

    let mut enqueued = 0usize;
    for s in 0..b {
        let mut eligible: Vec<usize> = (0..spatial)
            .filter(|&v| {
                let idx = s * spatial + v;
                let y = labels[idx] as usize;
                pred_v[idx] == y && pred_a[idx] == y
            })
            .collect();
        if eligible.len() > bank.n_slots {
            let mut picked = rand::seq::index::sample(rng, eligible.len(), bank.n_slots)
                .into_iter()
                .map(|k| eligible[k])
                .collect::<Vec<_>>();
            picked.sort_unstable();
            eligible = picked;
        }
        for v in eligible {
            let mut fused = vec![0.0f32; dim];
            for (ch, f) in fused.iter_mut().enumerate() {
                let idx = (s * dim + ch) * spatial + v;
                *f = 0.5 * (pv[idx] + pa[idx]);
            }
            let norm = fused.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm < MIN_FUSED_NORM {
                continue; // the two branches cancelled out; nothing to store
            }
            bank.enqueue(sample_ids[s], labels[s * spatial + v] as usize, &fused)?;
            enqueued += 1;
        }
    }
    Ok(enqueued)
}

/// Embeddings gathered at matching positions from both branches, rows
/// L2-normalized and still attached to the autodiff graph.
pub struct SampledEmbeddings {
    /// (m, c') tensor of normalized embeddings.
    pub z: Tensor,
    /// (sample index, linear voxel index) per row.
    pub positions: Vec<(usize, usize)>,
    /// Agreed class per row.
    pub classes: Vec<usize>,
}

/// Picks the most confident branch-agreed voxels of the unlabeled half.
/// Per agreed class the top `i` voxels by mean agreed-class probability are
/// taken (ties break toward the lower batch-linear voxel index), and both
/// branches' projections are extracted at the identical positions.
/// Returns `None` when no voxel wins agreement, in which case the
/// consistency loss is skipped for the step.
pub fn sample_unlabeled_embeddings(
    tape: &Tape,
    logits_v: &Tensor,
    logits_a: &Tensor,
    proj_v: &Tensor,
    proj_a: &Tensor,
    top_i: usize,
) -> Result<Option<(SampledEmbeddings, SampledEmbeddings)>> {
    if top_i == 0 {
        return Err(CamlError::Config("top-i must be at least 1".into()));
    }
    let ls = logits_v.shape();
    if ls.len() != 5 || logits_a.shape() != ls {
        return Err(CamlError::Shape(format!(
            "logits must be matching rank-5 tensors, got {ls:?} vs {:?}",
            logits_a.shape()
        )));
    }
    let (b, c) = (ls[0], ls[1]);
    let spatial = ls[2] * ls[3] * ls[4];
    let ps = proj_v.shape();
    if ps.len() != 5 || proj_a.shape() != ps || ps[0] != b || ps[2..] != ls[2..] {
        return Err(CamlError::Shape(format!(
            "projections {ps:?} do not match logits {ls:?}"
        )));
    }

    let lv = logits_v.value();
    let la = logits_a.value();
    let pred_v = argmax_classes(&lv, b, c, spatial);
    let pred_a = argmax_classes(&la, b, c, spatial);
    let probs_v = class_probs(&lv, b, c, spatial);
    let probs_a = class_probs(&la, b, c, spatial);

    // (confidence, batch-linear index, sample, voxel) per agreed class
    let mut per_class: Vec<Vec<(f32, usize, usize, usize)>> = vec![Vec::new(); c];
    for s in 0..b {
        for v in 0..spatial {
            let idx = s * spatial + v;
            if pred_v[idx] != pred_a[idx] {
                continue;
            }
            let cls = pred_v[idx];
            let p = 0.5
                * (probs_v[(s * c + cls) * spatial + v] + probs_a[(s * c + cls) * spatial + v]);
            per_class[cls].push((p, idx, s, v));
        }
    }

    let mut positions: Vec<(usize, usize)> = Vec::new();
    let mut classes: Vec<usize> = Vec::new();
    for (cls, mut rows) in per_class.into_iter().enumerate() {
        rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, _, s, v) in rows.iter().take(top_i) {
            positions.push((s, v));
            classes.push(cls);
        }
    }
    if positions.is_empty() {
        return Ok(None);
    }

    let z_v = tape.cos_normalize(&tape.gather_voxels(proj_v, &positions)?)?;
    let z_a = tape.cos_normalize(&tape.gather_voxels(proj_a, &positions)?)?;
    Ok(Some((
        SampledEmbeddings {
            z: z_v,
            positions: positions.clone(),
            classes: classes.clone(),
        },
        SampledEmbeddings {
            z: z_a,
            positions,
            classes,
        },
    )))
}

/// Prototypes drawn from the bank for one consistency step.
pub struct PrototypeSet {
    /// (n, c') constant tensor; bank entries carry no gradients.
    pub z_p: Tensor,
    pub classes: Vec<usize>,
}

/// Draws `j` prototypes per class across all queues: without replacement
/// when a class holds at least `j` entries, with replacement otherwise.
/// Returns `None` while any class is still empty (cold start).
pub fn sample_prototypes(
    bank: &PrototypeBank,
    j: usize,
    rng: &mut ChaCha8Rng,
) -> Option<PrototypeSet> {
    if j == 0 || !bank.is_warm() {
        return None;
    }
    let dim = bank.proj_dim;
    let mut rows: Vec<f32> = Vec::with_capacity(bank.n_classes * j * dim);
    let mut classes = Vec::with_capacity(bank.n_classes * j);
    for cls in 0..bank.n_classes {
        let entries = bank.class_entries(cls);
        if entries.len() >= j {
            for k in rand::seq::index::sample(rng, entries.len(), j) {
                rows.extend_from_slice(&entries[k].embedding);
                classes.push(cls);
            }
        } else {
            for _ in 0..j {
                let k = rng.gen_range(0..entries.len());
                rows.extend_from_slice(&entries[k].embedding);
                classes.push(cls);
            }
        }
    }
    let n = classes.len();
    Some(PrototypeSet {
        z_p: Tensor::from_vec(&[n, dim], rows),
        classes,
    })
}

/// Row-stochastic omni-correlation: softmax over prototypes of the
/// temperature-scaled cosine similarities between each embedding row and
/// every prototype row.
pub fn omni_correlation(tape: &Tape, z: &Tensor, z_p: &Tensor, t: f32) -> Result<Tensor> {
    if !(t > 0.0) {
        return Err(CamlError::Config(format!(
            "temperature must be positive, got {t}"
        )));
    }
    let zs = z.shape();
    let ps = z_p.shape();
    if zs.len() != 2 || ps.len() != 2 || zs[1] != ps[1] {
        return Err(CamlError::Shape(format!(
            "omni-correlation expects (m, c') x (n, c'), got {zs:?} x {ps:?}"
        )));
    }
    if zs[0] == 0 || ps[0] == 0 {
        return Err(CamlError::Shape(
            "omni-correlation over an empty embedding or prototype set".into(),
        ));
    }
    let zn = tape.cos_normalize(z)?;
    let pn = tape.cos_normalize(z_p)?;
    let cos = tape.matmul(&zn, &tape.transpose(&pn, &[1, 0])?)?;
    tape.softmax(&tape.scale(&cos, t)?, 1)
}

/// Consistency loss: mean over rows of the cross-entropy between the
/// vanilla-branch correlation row (as the target distribution) and the
/// auxiliary-branch row. Gradients flow into both arguments.
pub fn occ_loss(tape: &Tape, sim_vp: &Tensor, sim_ap: &Tensor) -> Result<Tensor> {
    let s = sim_vp.shape();
    if s.len() != 2 || sim_ap.shape() != s {
        return Err(CamlError::Shape(format!(
            "correlation matrices must match, got {s:?} vs {:?}",
            sim_ap.shape()
        )));
    }
    let m = s[0] as f32;
    let lg = tape.log(&tape.add_const(sim_ap, OCC_LOG_EPS)?)?;
    let per_entry = tape.mul(sim_vp, &lg)?;
    tape.scale(&tape.sum(&per_entry)?, -1.0 / m)
}

/// Writes the bank to a small versioned binary dump (magic `CAMLBNK1`):
/// header `u32 n_samples, u32 n_slots, u32 proj_dim, u32 n_classes`, then
/// per sample `u64 id, u32 count` followed by `count` slots of
/// `u8 class` + `proj_dim` f32 little-endian values.
pub fn write_bank_dump(path: &Path, bank: &PrototypeBank) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BANK_MAGIC)?;
    w.write_all(&(bank.queues.len() as u32).to_le_bytes())?;
    w.write_all(&(bank.n_slots as u32).to_le_bytes())?;
    w.write_all(&(bank.proj_dim as u32).to_le_bytes())?;
    w.write_all(&(bank.n_classes as u32).to_le_bytes())?;
    for (&id, queue) in &bank.queues {
        w.write_all(&id.to_le_bytes())?;
        w.write_all(&(queue.len() as u32).to_le_bytes())?;
        for slot in queue {
            w.write_all(&[slot.class as u8])?;
            for v in &slot.embedding {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a `CAMLBNK1` dump back into a bank with identical queue contents.
pub fn read_bank_dump(path: &Path) -> Result<PrototypeBank> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BANK_MAGIC {
        return Err(CamlError::Format(format!(
            "bad bank magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let n_samples = read_u32(&mut r)? as usize;
    let n_slots = read_u32(&mut r)? as usize;
    let proj_dim = read_u32(&mut r)? as usize;
    let n_classes = read_u32(&mut r)? as usize;
    let mut bank = PrototypeBank::new(&[], n_slots, proj_dim, n_classes);
    for _ in 0..n_samples {
        let mut idbuf = [0u8; 8];
        r.read_exact(&mut idbuf)?;
        let id = u64::from_le_bytes(idbuf);
        let mut cntbuf = [0u8; 4];
        r.read_exact(&mut cntbuf)?;
        let count = u32::from_le_bytes(cntbuf) as usize;
        if count > n_slots {
            return Err(CamlError::Format(format!(
                "queue for sample {id} claims {count} slots, limit is {n_slots}"
            )));
        }
        let mut queue = VecDeque::with_capacity(n_slots);
        for _ in 0..count {
            let mut clsbuf = [0u8; 1];
            r.read_exact(&mut clsbuf)?;
            let class = clsbuf[0] as usize;
            if class >= n_classes {
                return Err(CamlError::Format(format!(
                    "banked class {class} out of range for {n_classes} classes"
                )));
            }
            let mut embedding = vec![0.0f32; proj_dim];
            let mut fbuf = [0u8; 4];
            for e in embedding.iter_mut() {
                r.read_exact(&mut fbuf)?;
                *e = f32::from_le_bytes(fbuf);
            }
            queue.push_back(BankSlot { class, embedding });
        }
        bank.queues.insert(id, queue);
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::grad_check_fn;
    use rand::distributions::{Distribution, Uniform};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(seed: u64, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        let mut r = rng(seed);
        let dist = Uniform::new(lo, hi);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| dist.sample(&mut r)).collect())
    }

    /// Class-c-wins logits for every voxel of a (b, C, 2, 2, 2) tensor.
    fn constant_logits(b: usize, c_total: usize, winner: usize) -> Tensor {
        let spatial = 8;
        let mut vals = vec![0.0f32; b * c_total * spatial];
        for s in 0..b {
            for v in 0..spatial {
                vals[(s * c_total + winner) * spatial + v] = 4.0;
            }
        }
        Tensor::from_vec(&[b, c_total, 2, 2, 2], vals)
    }

    #[test]
    fn all_wrong_predictions_leave_bank_unchanged() {
        let mut bank = PrototypeBank::new(&[7], 8, 4, 2);
        let logits = constant_logits(1, 2, 0); // both branches predict class 0
        let proj = random_tensor(1, &[1, 4, 2, 2, 2], -1.0, 1.0);
        let labels = vec![1u8; 8]; // ground truth is class 1 everywhere
        let n = update_bank(
            &mut bank,
            &logits,
            &logits,
            &proj,
            &proj,
            &labels,
            &[7],
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(n, 0);
        assert_eq!(bank.queue_len(7), Some(0));
        assert!(!bank.is_warm());
    }

    #[test]
    fn perfect_predictions_fill_queue_with_unit_norms() {
        let mut bank = PrototypeBank::new(&[3], 8, 4, 2);
        let logits = constant_logits(1, 2, 1);
        let pv = random_tensor(2, &[1, 4, 2, 2, 2], 0.2, 1.0);
        let pa = random_tensor(3, &[1, 4, 2, 2, 2], 0.2, 1.0);
        let labels = vec![1u8; 8];
        let n = update_bank(
            &mut bank, &logits, &logits, &pv, &pa, &labels, &[3], &mut rng(0),
        )
        .unwrap();
        assert_eq!(n, 8);
        assert_eq!(bank.queue_len(3), Some(8));
        for slot in &bank.queues[&3] {
            assert_eq!(slot.class, 1);
            let norm = slot.embedding.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "stored norm {norm}");
        }
    }

    #[test]
    fn fifo_eviction_follows_a_scripted_replay() {
        // Step 1 banks all 8 voxels of a 2x2x2 crop, step 2 banks 3 more;
        // with N=8 the three oldest must leave in order. The oracle replays
        // the same script on a plain VecDeque.
        let dim = 4;
        let mut bank = PrototypeBank::new(&[5], 8, dim, 2);
        let logits_all = constant_logits(1, 2, 1);
        let mk_proj = |base: f32| {
            let mut vals = vec![0.0f32; dim * 8];
            for ch in 0..dim {
                for v in 0..8 {
                    vals[ch * 8 + v] = base + v as f32 + 0.1 * ch as f32;
                }
            }
            Tensor::from_vec(&[1, dim, 2, 2, 2], vals)
        };
        let p1 = mk_proj(1.0);
        update_bank(
            &mut bank,
            &logits_all,
            &logits_all,
            &p1,
            &p1,
            &vec![1u8; 8],
            &[5],
            &mut rng(9),
        )
        .unwrap();

        // second step: only voxels 0, 3, 6 are labeled correctly
        let mut labels2 = vec![0u8; 8];
        for v in [0, 3, 6] {
            labels2[v] = 1;
        }
        let p2 = mk_proj(100.0);
        update_bank(
            &mut bank,
            &logits_all,
            &logits_all,
            &p2,
            &p2,
            &labels2,
            &[5],
            &mut rng(9),
        )
        .unwrap();

        // independent replay with a plain queue
        let mut oracle: VecDeque<Vec<f32>> = VecDeque::new();
        let fused = |t: &Tensor, v: usize| {
            let vals = t.value();
            let raw: Vec<f32> = (0..dim).map(|ch| vals[ch * 8 + v]).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f32>().sqrt();
            raw.iter().map(|x| x / norm).collect::<Vec<f32>>()
        };
        for v in 0..8 {
            if oracle.len() == 8 {
                oracle.pop_front();
            }
            oracle.push_back(fused(&p1, v));
        }
        for v in [0, 3, 6] {
            if oracle.len() == 8 {
                oracle.pop_front();
            }
            oracle.push_back(fused(&p2, v));
        }

        assert_eq!(bank.queue_len(5), Some(8));
        for (slot, want) in bank.queues[&5].iter().zip(&oracle) {
            assert_eq!(&slot.embedding, want);
        }
        // the survivors start at step-1 voxel 3, confirming the first three
        // enqueued entries were evicted front-first
        assert_eq!(bank.queues[&5][0].embedding, fused(&p1, 3));
    }

    #[test]
    fn unknown_sample_id_is_rejected() {
        let mut bank = PrototypeBank::new(&[1], 4, 4, 2);
        let logits = constant_logits(1, 2, 0);
        let proj = random_tensor(4, &[1, 4, 2, 2, 2], -1.0, 1.0);
        let err = update_bank(
            &mut bank,
            &logits,
            &logits,
            &proj,
            &proj,
            &vec![0u8; 8],
            &[99],
            &mut rng(0),
        );
        assert!(matches!(err, Err(CamlError::Config(_))));
    }

    #[test]
    fn oversized_eligible_set_is_subsampled_to_capacity() {
        let mut bank = PrototypeBank::new(&[2], 3, 4, 2);
        let logits = constant_logits(1, 2, 0);
        let proj = random_tensor(5, &[1, 4, 2, 2, 2], 0.2, 1.0);
        let n = update_bank(
            &mut bank,
            &logits,
            &logits,
            &proj,
            &proj,
            &vec![0u8; 8],
            &[2],
            &mut rng(17),
        )
        .unwrap();
        assert_eq!(n, 3);
        assert_eq!(bank.queue_len(2), Some(3));
    }

    #[test]
    fn disagreement_everywhere_yields_empty_sample() {
        let lv = constant_logits(1, 2, 0);
        let la = constant_logits(1, 2, 1);
        let proj = random_tensor(6, &[1, 4, 2, 2, 2], -1.0, 1.0);
        let tape = Tape::inference();
        let got = sample_unlabeled_embeddings(&tape, &lv, &la, &proj, &proj, 3).unwrap();
        assert!(got.is_none());
    }

    #[test]
    fn m_is_top_i_times_classes_when_plentiful() {
        // class 0 wins on sample 0, class 1 on sample 1 -> 8 eligible per class
        let mut vals = vec![0.0f32; 2 * 2 * 8];
        for v in 0..8 {
            vals[v] = 3.0; // sample 0, class 0
            vals[(1 * 2 + 1) * 8 + v] = 3.0; // sample 1, class 1
        }
        let logits = Tensor::from_vec(&[2, 2, 2, 2, 2], vals);
        let proj = random_tensor(7, &[2, 4, 2, 2, 2], 0.2, 1.0);
        let tape = Tape::inference();
        let (zv, za) = sample_unlabeled_embeddings(&tape, &logits, &logits, &proj, &proj, 3)
            .unwrap()
            .unwrap();
        assert_eq!(zv.z.shape(), vec![6, 4]);
        assert_eq!(zv.classes, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(zv.positions, za.positions);
        let norms = zv.z.value();
        for row in norms.chunks(4) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn top_i_selection_matches_a_sort_oracle() {
        // hand-built logits over a 1x2x2x2 volume with distinct confidences
        let margins = [2.0f32, 0.5, 3.0, 1.0, 2.5, 0.2, 1.5, 0.8];
        let mut vals = vec![0.0f32; 2 * 8];
        for (v, &m) in margins.iter().enumerate() {
            vals[8 + v] = m; // class 1 logit; class 0 stays 0
        }
        let logits = Tensor::from_vec(&[1, 2, 2, 2, 2], vals);
        let proj = random_tensor(8, &[1, 4, 2, 2, 2], 0.2, 1.0);
        let tape = Tape::inference();
        let (zv, _) = sample_unlabeled_embeddings(&tape, &logits, &logits, &proj, &proj, 3)
            .unwrap()
            .unwrap();

        // oracle: every voxel agrees on class 1; confidence is the softmax
        // of (0, margin), so ranking by margin is the same ordering
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| margins[b].total_cmp(&margins[a]).then(a.cmp(&b)));
        let expect: Vec<(usize, usize)> = order[..3].iter().map(|&v| (0, v)).collect();
        assert_eq!(zv.positions, expect);
        assert_eq!(zv.positions, vec![(0, 2), (0, 4), (0, 0)]);
    }

    #[test]
    fn confidence_ties_break_toward_lower_voxel_index() {
        let logits = constant_logits(1, 2, 1); // identical confidence everywhere
        let proj = random_tensor(9, &[1, 4, 2, 2, 2], 0.2, 1.0);
        let tape = Tape::inference();
        let (zv, _) = sample_unlabeled_embeddings(&tape, &logits, &logits, &proj, &proj, 4)
            .unwrap()
            .unwrap();
        assert_eq!(zv.positions, vec![(0, 0), (0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn prototype_set_is_j_per_class() {
        let mut bank = PrototypeBank::new(&[0, 1], 16, 4, 2);
        for k in 0..6 {
            let mut e = vec![0.1f32; 4];
            e[k % 4] = 1.0;
            bank.enqueue(k as u64 % 2, 0, &e).unwrap();
            bank.enqueue(k as u64 % 2, 1, &e).unwrap();
        }
        let set = sample_prototypes(&bank, 4, &mut rng(1)).unwrap();
        assert_eq!(set.z_p.shape(), vec![8, 4]);
        assert_eq!(set.classes, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn class_with_exactly_j_entries_is_taken_once_each() {
        let mut bank = PrototypeBank::new(&[0], 16, 4, 2);
        let mut want = Vec::new();
        for k in 0..3 {
            let mut e = vec![0.0f32; 4];
            e[k] = 1.0;
            bank.enqueue(0, 0, &e).unwrap();
            bank.enqueue(0, 1, &e).unwrap();
            want.push(k);
        }
        let set = sample_prototypes(&bank, 3, &mut rng(2)).unwrap();
        let vals = set.z_p.value();
        let mut seen: Vec<usize> = vals[..12]
            .chunks(4)
            .map(|row| row.iter().position(|&v| v == 1.0).unwrap())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, want);
    }

    #[test]
    fn cold_start_returns_none_until_every_class_is_banked() {
        let mut bank = PrototypeBank::new(&[0], 8, 4, 2);
        assert!(sample_prototypes(&bank, 2, &mut rng(0)).is_none());
        bank.enqueue(0, 0, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(!bank.is_warm());
        assert!(sample_prototypes(&bank, 2, &mut rng(0)).is_none());
        bank.enqueue(0, 1, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(bank.is_warm());
        assert!(sample_prototypes(&bank, 2, &mut rng(0)).is_some());
    }

    #[test]
    fn prototype_sampling_is_uniform_by_chi_square() {
        // ten distinguishable one-hot entries in class 0; a lone class-1
        // entry keeps the bank warm without affecting the counts
        let dim = 16;
        let mut bank = PrototypeBank::new(&[0, 1], 8, dim, 2);
        for k in 0..10 {
            let mut e = vec![0.0f32; dim];
            e[k] = 1.0;
            bank.enqueue((k % 2) as u64, 0, &e).unwrap();
        }
        bank.enqueue(0, 1, &{
            let mut e = vec![0.0f32; dim];
            e[15] = 1.0;
            e
        })
        .unwrap();

        let draws = 100_000usize;
        let mut counts = [0u64; 10];
        let mut r = rng(0xFEED);
        for _ in 0..draws {
            let set = sample_prototypes(&bank, 1, &mut r).unwrap();
            let vals = set.z_p.value();
            let k = vals[..dim].iter().position(|&v| v > 0.5).unwrap();
            counts[k] += 1;
        }
        let expect = draws as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expect;
                d * d / expect
            })
            .sum();
        // 9 degrees of freedom; the 0.999 quantile is 27.88
        assert!(chi2 < 27.88, "chi-square statistic {chi2}");
    }

    #[test]
    fn identical_prototypes_give_uniform_rows() {
        let z = random_tensor(11, &[3, 4], -1.0, 1.0);
        let proto = vec![0.3f32, -0.2, 0.9, 0.1];
        let mut rows = Vec::new();
        for _ in 0..5 {
            rows.extend_from_slice(&proto);
        }
        let z_p = Tensor::from_vec(&[5, 4], rows);
        let tape = Tape::inference();
        let sim = omni_correlation(&tape, &z, &z_p, 10.0).unwrap().value();
        for v in sim {
            assert!((v - 0.2).abs() < 1e-6, "entry {v}");
        }
    }

    #[test]
    fn two_way_softmax_matches_closed_form() {
        let z = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]);
        let z_p = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let tape = Tape::inference();
        let sim = omni_correlation(&tape, &z, &z_p, 1.0).unwrap().value();
        let e = std::f32::consts::E;
        assert!((sim[0] - e / (e + 1.0)).abs() < 1e-6);
        assert!((sim[1] - 1.0 / (e + 1.0)).abs() < 1e-6);
        assert!((sim[0] - 0.7311).abs() < 1e-4);
        assert!((sim[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn omni_correlation_matches_naive_double_loop() {
        let z = random_tensor(12, &[5, 3], -1.0, 1.0);
        let z_p = random_tensor(13, &[7, 3], -1.0, 1.0);
        let tape = Tape::inference();
        let sim = omni_correlation(&tape, &z, &z_p, 10.0).unwrap().value();

        let zv = z.value();
        let pv = z_p.value();
        let eps = 1e-8f64;
        let cos = |a: &[f32], b: &[f32]| -> f64 {
            let na = a.iter().map(|&v| (v as f64) * v as f64).sum::<f64>().sqrt() + eps;
            let nb = b.iter().map(|&v| (v as f64) * v as f64).sum::<f64>().sqrt() + eps;
            let dot: f64 = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x as f64 / na) * (y as f64 / nb))
                .sum();
            dot
        };
        for i in 0..5 {
            let row: Vec<f64> = (0..7)
                .map(|l| 10.0 * cos(&zv[i * 3..(i + 1) * 3], &pv[l * 3..(l + 1) * 3]))
                .collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for l in 0..7 {
                let want = exps[l] / denom;
                let got = sim[i * 7 + l] as f64;
                assert!(
                    (got - want).abs() < 1e-6,
                    "entry ({i},{l}): {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn rows_are_stochastic_and_positive() {
        let z = random_tensor(14, &[6, 8], -1.0, 1.0);
        let z_p = random_tensor(15, &[9, 8], -1.0, 1.0);
        let tape = Tape::inference();
        let sim = omni_correlation(&tape, &z, &z_p, 10.0).unwrap().value();
        for row in sim.chunks(9) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            for &v in row {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn power_of_two_rescaling_is_bitwise_invariant() {
        // scaling a row by 2 scales its norm by exactly 2 in IEEE floats,
        // so the normalized row and hence the whole matrix are unchanged
        let z = random_tensor(16, &[4, 16], -1.0, 1.0);
        let scaled = Tensor::from_vec(&[4, 16], z.value().iter().map(|v| v * 2.0).collect());
        let z_p = random_tensor(17, &[5, 16], -1.0, 1.0);
        let tape = Tape::inference();
        let a = omni_correlation(&tape, &z, &z_p, 10.0).unwrap().value();
        let b = omni_correlation(&tape, &scaled, &z_p, 10.0).unwrap().value();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn general_rescaling_is_invariant_within_tolerance() {
        let z = random_tensor(18, &[4, 16], -1.0, 1.0);
        let scaled = Tensor::from_vec(&[4, 16], z.value().iter().map(|v| v * 1.7).collect());
        let z_p = random_tensor(19, &[5, 16], -1.0, 1.0);
        let tape = Tape::inference();
        let a = omni_correlation(&tape, &z, &z_p, 10.0).unwrap().value();
        let b = omni_correlation(&tape, &scaled, &z_p, 10.0).unwrap().value();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn temperature_controls_row_sharpness() {
        let z = random_tensor(20, &[3, 8], -1.0, 1.0);
        let z_p = random_tensor(21, &[6, 8], -1.0, 1.0);
        let tape = Tape::inference();
        let near_zero = omni_correlation(&tape, &z, &z_p, 1e-3).unwrap().value();
        for v in &near_zero {
            assert!((v - 1.0 / 6.0).abs() < 1e-3, "t->0 entry {v}");
        }
        let cool = omni_correlation(&tape, &z, &z_p, 5.0).unwrap().value();
        let hot = omni_correlation(&tape, &z, &z_p, 10.0).unwrap().value();
        for (rc, rh) in cool.chunks(6).zip(hot.chunks(6)) {
            let mc = rc.iter().cloned().fold(0.0f32, f32::max);
            let mh = rh.iter().cloned().fold(0.0f32, f32::max);
            assert!(mh > mc, "sharpness must grow with t: {mh} vs {mc}");
        }
    }

    #[test]
    fn uniform_pair_gives_ln_n() {
        let m = 3;
        let n = 4;
        let uniform = Tensor::from_vec(&[m, n], vec![0.25f32; m * n]);
        let tape = Tape::inference();
        let l = occ_loss(&tape, &uniform, &uniform).unwrap().item();
        assert!((l - 4.0f32.ln()).abs() < 1e-6, "{l} vs ln 4");
    }

    #[test]
    fn one_hot_target_against_uniform_gives_ln_n() {
        let n = 5;
        let mut one_hot = vec![0.0f32; n];
        one_hot[2] = 1.0;
        let p = Tensor::from_vec(&[1, n], one_hot);
        let q = Tensor::from_vec(&[1, n], vec![0.2f32; n]);
        let tape = Tape::inference();
        let l = occ_loss(&tape, &p, &q).unwrap().item();
        assert!((l - 5.0f32.ln()).abs() < 1e-5, "{l} vs ln 5");
    }

    #[test]
    fn occ_loss_matches_scalar_loop() {
        let raw_p = random_tensor(22, &[3, 5], 0.1, 1.0);
        let raw_q = random_tensor(23, &[3, 5], 0.1, 1.0);
        let normalize = |t: &Tensor| {
            let v = t.value();
            let mut out = v.clone();
            for row in out.chunks_mut(5) {
                let s: f32 = row.iter().sum();
                for x in row {
                    *x /= s;
                }
            }
            Tensor::from_vec(&[3, 5], out)
        };
        let p = normalize(&raw_p);
        let q = normalize(&raw_q);
        let tape = Tape::inference();
        let got = occ_loss(&tape, &p, &q).unwrap().item() as f64;

        let pv = p.value();
        let qv = q.value();
        let mut want = 0.0f64;
        for r in 0..3 {
            for l in 0..5 {
                want -= pv[r * 5 + l] as f64 * ((qv[r * 5 + l] as f64) + 1e-12).ln();
            }
        }
        want /= 3.0;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn equal_matrices_give_entropy_and_its_gradient() {
        let raw = random_tensor(24, &[2, 4], 0.1, 1.0);
        let vals = {
            let mut v = raw.value();
            for row in v.chunks_mut(4) {
                let s: f32 = row.iter().sum();
                for x in row {
                    *x /= s;
                }
            }
            v
        };
        let p = Tensor::from_vec(&[2, 4], vals.clone());
        let q = Tensor::from_vec(&[2, 4], vals.clone()).with_grad();
        let tape = Tape::new();
        let l = occ_loss(&tape, &p, &q).unwrap();

        // value: mean row entropy
        let mut entropy = 0.0f64;
        for r in 0..2 {
            for c in 0..4 {
                let x = vals[r * 4 + c] as f64;
                entropy -= x * x.ln();
            }
        }
        entropy /= 2.0;
        assert!((l.item() as f64 - entropy).abs() < 1e-6);

        // gradient into the second slot: -p/(q + eps) / m, which at p = q
        // collapses to -1/m in every entry
        tape.backward(&l).unwrap();
        let g = q.grad();
        for (i, &gi) in g.iter().enumerate() {
            let want = -vals[i] / (vals[i] + OCC_LOG_EPS) / 2.0;
            assert!((gi - want).abs() < 1e-6, "entry {i}: {gi} vs {want}");
            assert!((gi + 0.5).abs() < 1e-4);
        }
    }

    #[test]
    fn occ_loss_grad_check() {
        let p = random_tensor(25, &[3, 4], 0.05, 0.3).with_grad();
        let q = random_tensor(26, &[3, 4], 0.05, 0.3).with_grad();
        let err = grad_check_fn(
            &|tape: &Tape, ins: &[Tensor]| occ_loss(tape, &ins[0], &ins[1]),
            &[p, q],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "occ_loss grad error {err}");
    }

    #[test]
    fn omni_correlation_chain_grad_check() {
        // Eq. 2 into Eq. 3: gradients flow through both correlation
        // matrices into the sampled embeddings; prototypes stay constant
        let z_v = random_tensor(27, &[4, 6], -1.0, 1.0).with_grad();
        let z_a = random_tensor(28, &[4, 6], -1.0, 1.0).with_grad();
        let z_p = random_tensor(29, &[3, 6], -1.0, 1.0);
        let err = grad_check_fn(
            &move |tape: &Tape, ins: &[Tensor]| {
                let sim_vp = omni_correlation(tape, &ins[0], &z_p, 10.0)?;
                let sim_ap = omni_correlation(tape, &ins[1], &z_p, 10.0)?;
                occ_loss(tape, &sim_vp, &sim_ap)
            },
            &[z_v, z_a],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "correlation chain grad error {err}");
    }

    #[test]
    fn bank_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        let mut bank = PrototypeBank::new(&[2, 9], 4, 3, 2);
        bank.enqueue(2, 0, &[1.0, 2.0, 3.0]).unwrap();
        bank.enqueue(2, 1, &[0.5, 0.5, 0.0]).unwrap();
        bank.enqueue(9, 1, &[0.0, 0.0, 1.0]).unwrap();
        write_bank_dump(&path, &bank).unwrap();
        let back = read_bank_dump(&path).unwrap();
        assert_eq!(back.n_slots(), 4);
        assert_eq!(back.proj_dim(), 3);
        assert_eq!(back.n_classes(), 2);
        assert_eq!(back.queue_len(2), Some(2));
        assert_eq!(back.queue_len(9), Some(1));
        for id in [2u64, 9] {
            for (a, b) in bank.queues[&id].iter().zip(back.queues[&id].iter()) {
                assert_eq!(a.class, b.class);
                assert_eq!(a.embedding, b.embedding);
            }
        }
    }

    #[test]
    fn bad_bank_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTABANKxxxx").unwrap();
        assert!(matches!(read_bank_dump(&path), Err(CamlError::Format(_))));
    }
}
