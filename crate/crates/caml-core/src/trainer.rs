//! The end-to-end training loop and checkpoint evaluation.
//!
//! Each iteration draws half labeled, half unlabeled samples with
//! replacement, crops and batches them labeled-first, runs both branches,
//! assembles the supervised + cross-supervision + omni-correlation losses
//! under their warm-up weights, backpropagates once, steps four SGD
//! optimizers (two branches, two projection heads), and only then refreshes
//! the prototype bank from the labeled half. Everything is driven by named
//! ChaCha streams of one seed, so a config + seed pair reproduces the final
//! checkpoints bit for bit on a single thread.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{load_into, save_checkpoint, Sgd, SgdConfig, Tape, Tensor};
use crate::backbone::{
    build_branches, forward_auxiliary, forward_vanilla, BranchConfig, BranchParams,
    ProjectionHead,
};
use crate::error::{CamlError, Result};
use crate::losses::{cps_loss, supervised_loss, total_loss, LossBreakdown, LossWeights};
use crate::metrics::{dice, jaccard, sliding_window_infer, surface_metrics};
use crate::occ::{
    occ_loss, omni_correlation, sample_prototypes, sample_unlabeled_embeddings, update_bank,
    PrototypeBank,
};
use crate::volgen::{
    crop_label_at, crop_offset, crop_volume_at, load_manifest, load_samples, normalize_volume,
    resolve_manifest_path, SampleRecord, VolumeGrid,
};

/// Named ChaCha streams of the run seed.
const STREAM_BATCH: u64 = 10;
const STREAM_CROP: u64 = 11;
const STREAM_BANK: u64 = 12;
const STREAM_PROTO: u64 = 13;

pub const RUN_CSV_HEADER: &str =
    "iteration,L_s,l_c,l_o,lambda_c,lambda_o,total,bank_class0,bank_class1,m,n";
pub const EVAL_CSV_HEADER: &str = "sample_id,dice,jaccard,hd95,asd";

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub crop: [usize; 3],
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub beta_c: f32,
    pub beta_o: f32,
    /// Prototype slots per labeled sample.
    pub bank_slots: usize,
    /// Top-confidence voxels sampled per agreed class.
    pub top_i: usize,
    /// Prototypes drawn per class.
    pub proto_j: usize,
    /// Correlation softmax temperature.
    pub temperature: f32,
    /// Projection embedding width.
    pub proj_dim: usize,
    pub n_levels: usize,
    pub base_channels: usize,
    pub seed: u64,
    /// Sliding-window evaluation every this many iterations; 0 disables.
    pub eval_every: usize,
    pub enable_cma: bool,
    pub enable_occ: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            manifest: PathBuf::new(),
            crop: [16, 16, 16],
            batch_size: 4,
            iterations: 800,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            beta_c: 1.0,
            beta_o: 0.1,
            bank_slots: 64,
            top_i: 8,
            proto_j: 4,
            temperature: 10.0,
            proj_dim: 16,
            n_levels: 3,
            base_channels: 8,
            seed: 0,
            eval_every: 0,
            enable_cma: true,
            enable_occ: true,
        }
    }
}

impl TrainConfig {
    /// Structural checks that need no dataset: batch shape, crop
    /// divisibility, optimizer ranges.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(CamlError::Config(format!(
                "batch_size {} must be even and at least 2",
                self.batch_size
            )));
        }
        let div = 1usize << (self.n_levels.max(1) - 1);
        for &c in &self.crop {
            if c == 0 || c % div != 0 {
                return Err(CamlError::Config(format!(
                    "crop {:?} must be positive and divisible by {div} for {} levels",
                    self.crop, self.n_levels
                )));
            }
        }
        if self.lr <= 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(CamlError::Config(format!(
                "bad optimizer settings: lr {} momentum {} weight_decay {}",
                self.lr, self.momentum, self.weight_decay
            )));
        }
        if self.bank_slots == 0 || self.top_i == 0 || self.proto_j == 0 {
            return Err(CamlError::Config(
                "bank_slots, top_i, and proto_j must all be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(CamlError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        LossWeights {
            beta_c: self.beta_c,
            beta_o: self.beta_o,
            t_max: self.iterations.max(1),
        }
        .validate()
    }

    pub fn branch_configs(&self, n_classes: usize) -> (BranchConfig, BranchConfig) {
        let v = BranchConfig {
            n_levels: self.n_levels,
            base_channels: self.base_channels,
            n_classes,
            with_cma: false,
            proj_dim: self.proj_dim,
        };
        let a = BranchConfig {
            with_cma: self.enable_cma,
            ..v
        };
        (v, a)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta_c: self.beta_c,
            beta_o: self.beta_o,
            t_max: self.iterations.max(1),
        }
    }
}

/// Parses a plain-text config: one `key = value` per line, `#` comments,
/// unknown keys rejected. Missing keys keep their defaults.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CamlError::Config(format!("config line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| {
            CamlError::Config(format!(
                "config line {}: bad {what} value {value:?}",
                lineno + 1
            ))
        };
        match key {
            "manifest" => cfg.manifest = PathBuf::from(value),
            "crop" => cfg.crop = parse_triple(value).ok_or_else(|| bad("crop"))?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
            "iterations" => cfg.iterations = value.parse().map_err(|_| bad("iterations"))?,
            "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
            "momentum" => cfg.momentum = value.parse().map_err(|_| bad("momentum"))?,
            "weight_decay" => {
                cfg.weight_decay = value.parse().map_err(|_| bad("weight_decay"))?
            }
            "beta_c" => cfg.beta_c = value.parse().map_err(|_| bad("beta_c"))?,
            "beta_o" => cfg.beta_o = value.parse().map_err(|_| bad("beta_o"))?,
            "bank_slots" => cfg.bank_slots = value.parse().map_err(|_| bad("bank_slots"))?,
            "top_i" => cfg.top_i = value.parse().map_err(|_| bad("top_i"))?,
            "proto_j" => cfg.proto_j = value.parse().map_err(|_| bad("proto_j"))?,
            "temperature" => cfg.temperature = value.parse().map_err(|_| bad("temperature"))?,
            "proj_dim" => cfg.proj_dim = value.parse().map_err(|_| bad("proj_dim"))?,
            "n_levels" => cfg.n_levels = value.parse().map_err(|_| bad("n_levels"))?,
            "base_channels" => {
                cfg.base_channels = value.parse().map_err(|_| bad("base_channels"))?
            }
            "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
            "eval_every" => cfg.eval_every = value.parse().map_err(|_| bad("eval_every"))?,
            "enable_cma" => cfg.enable_cma = parse_bool(value).ok_or_else(|| bad("enable_cma"))?,
            "enable_occ" => cfg.enable_occ = parse_bool(value).ok_or_else(|| bad("enable_occ"))?,
            other => {
                return Err(CamlError::Config(format!(
                    "config line {}: unknown key {other:?}",
                    lineno + 1
                )))
            }
        }
    }
    Ok(cfg)
}

pub(crate) fn parse_triple(s: &str) -> Option<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().ok())
        .collect::<Option<Vec<_>>>()?;
    (parts.len() == 3).then(|| [parts[0], parts[1], parts[2]])
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Renders the config as a parse-compatible key = value block.
pub fn render_train_config(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "manifest = {}", cfg.manifest.display());
    let _ = writeln!(s, "crop = {},{},{}", cfg.crop[0], cfg.crop[1], cfg.crop[2]);
    let _ = writeln!(s, "batch_size = {}", cfg.batch_size);
    let _ = writeln!(s, "iterations = {}", cfg.iterations);
    let _ = writeln!(s, "lr = {}", cfg.lr);
    let _ = writeln!(s, "momentum = {}", cfg.momentum);
    let _ = writeln!(s, "weight_decay = {}", cfg.weight_decay);
    let _ = writeln!(s, "beta_c = {}", cfg.beta_c);
    let _ = writeln!(s, "beta_o = {}", cfg.beta_o);
    let _ = writeln!(s, "bank_slots = {}", cfg.bank_slots);
    let _ = writeln!(s, "top_i = {}", cfg.top_i);
    let _ = writeln!(s, "proto_j = {}", cfg.proto_j);
    let _ = writeln!(s, "temperature = {}", cfg.temperature);
    let _ = writeln!(s, "proj_dim = {}", cfg.proj_dim);
    let _ = writeln!(s, "n_levels = {}", cfg.n_levels);
    let _ = writeln!(s, "base_channels = {}", cfg.base_channels);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "eval_every = {}", cfg.eval_every);
    let _ = writeln!(s, "enable_cma = {}", cfg.enable_cma);
    let _ = writeln!(s, "enable_occ = {}", cfg.enable_occ);
    s
}

/// One training iteration's log record.
#[derive(Clone, Copy, Debug)]
pub struct RunRow {
    pub iteration: usize,
    pub breakdown: LossBreakdown,
    pub bank_class0: usize,
    pub bank_class1: usize,
    /// Embedding rows actually used by the correlation loss this step.
    pub m: usize,
    /// Prototype rows actually used.
    pub n: usize,
}

pub struct RunLog {
    pub rows: Vec<RunRow>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(RUN_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let b = r.breakdown;
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
                r.iteration,
                b.l_s,
                b.l_c,
                b.l_o,
                b.lambda_c,
                b.lambda_o,
                b.total,
                r.bank_class0,
                r.bank_class1,
                r.m,
                r.n
            );
        }
        s
    }
}

struct LoadedData {
    samples: Vec<SampleRecord>,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    n_classes: usize,
    dims: [usize; 3],
    spacing: [f32; 3],
}

fn load_training_data(cfg: &TrainConfig) -> Result<LoadedData> {
    let manifest_path = resolve_manifest_path(&cfg.manifest);
    let manifest = load_manifest(&manifest_path)?;
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut samples = load_samples(&manifest, &dir, false)?;
    // normalize once up front so training crops and evaluation windows see
    // the same intensity statistics
    for s in &mut samples {
        s.volume = normalize_volume(&s.volume);
    }
    let labeled: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].labeled).collect();
    let unlabeled: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].labeled).collect();
    if labeled.len() < cfg.batch_size / 2 {
        return Err(CamlError::Config(format!(
            "labeled pool of {} cannot fill half a batch of {}",
            labeled.len(),
            cfg.batch_size
        )));
    }
    if unlabeled.is_empty() {
        return Err(CamlError::Config(
            "training needs at least one unlabeled sample".into(),
        ));
    }
    for (d, c) in manifest.dims.iter().zip(&cfg.crop) {
        if c > d {
            return Err(CamlError::Config(format!(
                "crop {:?} does not fit into volumes of {:?}",
                cfg.crop, manifest.dims
            )));
        }
    }
    if cfg.top_i * manifest.n_classes > cfg.crop.iter().product::<usize>() {
        return Err(CamlError::Config(format!(
            "top_i {} x {} classes exceeds the {} voxels of one crop",
            cfg.top_i,
            manifest.n_classes,
            cfg.crop.iter().product::<usize>()
        )));
    }
    Ok(LoadedData {
        samples,
        labeled,
        unlabeled,
        n_classes: manifest.n_classes,
        dims: manifest.dims,
        spacing: manifest.spacing,
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn batch_tensor(crops: &[VolumeGrid]) -> Tensor {
    let [d, h, w] = crops[0].dims;
    let mut vals = Vec::with_capacity(crops.len() * d * h * w);
    for c in crops {
        vals.extend_from_slice(&c.data);
    }
    Tensor::from_vec(&[crops.len(), 1, d, h, w], vals)
}

/// Trains per the config and writes `fv/fa/gv/ga.ckpt`, `run.csv`, and
/// `run_meta.txt` into `out_dir`. Returns the per-iteration log.
pub fn train_run(cfg: &TrainConfig, out_dir: &Path) -> Result<RunLog> {
    cfg.validate()?;
    let data = load_training_data(cfg)?;
    fs::create_dir_all(out_dir)?;

    let c = data.n_classes;
    let (cfg_v, cfg_a) = cfg.branch_configs(c);
    let (fv, fa, gv, ga) = build_branches(cfg_v, cfg_a, cfg.seed)?;

    let opt_cfg = SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut opt_fv = Sgd::new(opt_cfg, fv.tensors());
    let mut opt_fa = Sgd::new(opt_cfg, fa.tensors());
    let mut opt_gv = Sgd::new(opt_cfg, gv.tensors());
    let mut opt_ga = Sgd::new(opt_cfg, ga.tensors());

    let labeled_ids: Vec<u64> = data.labeled.iter().map(|&i| data.samples[i].id as u64).collect();
    let mut bank = PrototypeBank::new(&labeled_ids, cfg.bank_slots, cfg.proj_dim, c);

    let mut rng_batch = stream_rng(cfg.seed, STREAM_BATCH);
    let mut rng_crop = stream_rng(cfg.seed, STREAM_CROP);
    let mut rng_bank = stream_rng(cfg.seed, STREAM_BANK);
    let mut rng_proto = stream_rng(cfg.seed, STREAM_PROTO);

    let weights = cfg.weights();
    let half = cfg.batch_size / 2;
    let crop_voxels: usize = cfg.crop.iter().product();
    let mut rows = Vec::with_capacity(cfg.iterations);

    for t in 0..cfg.iterations {
        // ---- batch assembly: labeled half first, then unlabeled ----
        let picked_l: Vec<usize> = (0..half)
            .map(|_| data.labeled[rng_batch.gen_range(0..data.labeled.len())])
            .collect();
        let picked_u: Vec<usize> = (0..half)
            .map(|_| data.unlabeled[rng_batch.gen_range(0..data.unlabeled.len())])
            .collect();

        let mut crops = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(half * crop_voxels);
        let mut batch_sample_ids = Vec::with_capacity(half);
        for &i in &picked_l {
            let s = &data.samples[i];
            let offset = crop_offset(s.volume.dims, cfg.crop, &mut rng_crop)?;
            crops.push(crop_volume_at(&s.volume, offset, cfg.crop));
            let lab = s.label.as_ref().ok_or_else(|| {
                CamlError::Config(format!("labeled sample {} has no label grid", s.id))
            })?;
            labels.extend_from_slice(&crop_label_at(lab, offset, cfg.crop).data);
            batch_sample_ids.push(s.id as u64);
        }
        for &i in &picked_u {
            let s = &data.samples[i];
            let offset = crop_offset(s.volume.dims, cfg.crop, &mut rng_crop)?;
            crops.push(crop_volume_at(&s.volume, offset, cfg.crop));
        }
        let x = batch_tensor(&crops);

        // ---- forwards and losses ----
        opt_fv.zero_grad();
        opt_fa.zero_grad();
        opt_gv.zero_grad();
        opt_ga.zero_grad();
        let tape = Tape::new();
        let out_v = forward_vanilla(&tape, &fv, &gv, &x)?;
        let out_a = if fa.cma.is_some() {
            forward_auxiliary(&tape, &fa, &ga, &x)?
        } else {
            forward_vanilla(&tape, &fa, &ga, &x)?
        };

        let lv_l = tape.slice_batch(&out_v.logits, 0, half)?;
        let la_l = tape.slice_batch(&out_a.logits, 0, half)?;
        let ls_t = supervised_loss(&tape, &lv_l, &la_l, &labels)?;
        let lc_t = cps_loss(&tape, &out_v.logits, &out_a.logits)?;

        let mut lo_t: Option<Tensor> = None;
        let mut used_m = 0usize;
        let mut used_n = 0usize;
        if cfg.enable_occ && bank.is_warm() {
            let lv_u = tape.slice_batch(&out_v.logits, half, half)?;
            let la_u = tape.slice_batch(&out_a.logits, half, half)?;
            let pv_u = tape.slice_batch(&out_v.projections, half, half)?;
            let pa_u = tape.slice_batch(&out_a.projections, half, half)?;
            if let Some((zv, za)) =
                sample_unlabeled_embeddings(&tape, &lv_u, &la_u, &pv_u, &pa_u, cfg.top_i)?
            {
                if let Some(protos) = sample_prototypes(&bank, cfg.proto_j, &mut rng_proto) {
                    let sim_vp = omni_correlation(&tape, &zv.z, &protos.z_p, cfg.temperature)?;
                    let sim_ap = omni_correlation(&tape, &za.z, &protos.z_p, cfg.temperature)?;
                    used_m = zv.positions.len();
                    used_n = protos.classes.len();
                    lo_t = Some(occ_loss(&tape, &sim_vp, &sim_ap)?);
                }
            }
        }

        let breakdown = total_loss(
            ls_t.item(),
            lc_t.item(),
            lo_t.as_ref().map(|l| l.item()),
            t,
            &weights,
        )?;

        let mut total_t = tape.add(&ls_t, &tape.scale(&lc_t, breakdown.lambda_c)?)?;
        if let Some(lo) = &lo_t {
            total_t = tape.add(&total_t, &tape.scale(lo, breakdown.lambda_o)?)?;
        }
        debug_assert!((total_t.item() - breakdown.total).abs() < 1e-4);

        tape.backward(&total_t)?;
        opt_fv.step()?;
        opt_fa.step()?;
        opt_gv.step()?;
        opt_ga.step()?;

        // ---- bank refresh, strictly after this iteration's losses ----
        let bank_tape = Tape::inference();
        let bl_v = bank_tape.slice_batch(&out_v.logits, 0, half)?;
        let bl_a = bank_tape.slice_batch(&out_a.logits, 0, half)?;
        let bp_v = bank_tape.slice_batch(&out_v.projections, 0, half)?;
        let bp_a = bank_tape.slice_batch(&out_a.projections, 0, half)?;
        update_bank(
            &mut bank,
            &bl_v,
            &bl_a,
            &bp_v,
            &bp_a,
            &labels,
            &batch_sample_ids,
            &mut rng_bank,
        )?;

        rows.push(RunRow {
            iteration: t,
            breakdown,
            bank_class0: bank.class_count(0),
            bank_class1: if c > 1 { bank.class_count(1) } else { 0 },
            m: used_m,
            n: used_n,
        });

        if cfg.eval_every > 0 && (t + 1) % cfg.eval_every == 0 {
            let eval_rows =
                evaluate_params(&fv, &gv, &data.samples, data.spacing, cfg.crop, cfg.crop, c)?;
            fs::write(
                out_dir.join(format!("eval_iter{:05}.csv", t + 1)),
                eval_rows_to_csv(&eval_rows),
            )?;
        }
    }

    save_checkpoint(&out_dir.join("fv.ckpt"), &fv.named("fv"))?;
    save_checkpoint(&out_dir.join("fa.ckpt"), &fa.named("fa"))?;
    save_checkpoint(&out_dir.join("gv.ckpt"), &gv.named("gv"))?;
    save_checkpoint(&out_dir.join("ga.ckpt"), &ga.named("ga"))?;

    let log = RunLog { rows };
    fs::write(out_dir.join("run.csv"), log.to_csv())?;
    let mut meta = String::new();
    let _ = writeln!(meta, "threads = 1");
    let _ = writeln!(meta, "dataset_dims = {:?}", data.dims);
    let _ = writeln!(meta, "labeled_samples = {}", data.labeled.len());
    let _ = writeln!(meta, "unlabeled_samples = {}", data.unlabeled.len());
    meta.push_str(&render_train_config(cfg));
    fs::write(out_dir.join("run_meta.txt"), meta)?;
    Ok(log)
}

/// One evaluated sample. Surface distances are `None` when either surface
/// is empty — reported as an explicit failure, never as a silent zero.
#[derive(Clone, Copy, Debug)]
pub struct EvalRow {
    pub sample_id: u64,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    All,
    Labeled,
    Unlabeled,
}

/// Sliding-window evaluation of in-memory vanilla-branch weights.
pub fn evaluate_params(
    fv: &BranchParams,
    gv: &ProjectionHead,
    samples: &[SampleRecord],
    spacing: [f32; 3],
    window: [usize; 3],
    stride: [usize; 3],
    n_classes: usize,
) -> Result<Vec<EvalRow>> {
    let mut out = Vec::new();
    for s in samples {
        let Some(gt) = &s.label else { continue };
        let forward = |win: &VolumeGrid| -> Result<Vec<f32>> {
            let [d, h, w] = win.dims;
            let x = Tensor::from_vec(&[1, 1, d, h, w], win.data.clone());
            let tape = Tape::inference();
            let outs = forward_vanilla(&tape, fv, gv, &x)?;
            Ok(tape.softmax(&outs.logits, 1)?.value())
        };
        let pred = sliding_window_infer(forward, &s.volume, window, stride, n_classes)?;
        let (hd95, asd) = match surface_metrics(&pred, gt, spacing) {
            Ok((h, a)) => (Some(h), Some(a)),
            Err(CamlError::EmptySurface(_)) => (None, None),
            Err(e) => return Err(e),
        };
        out.push(EvalRow {
            sample_id: s.id as u64,
            dice: dice(&pred, gt)?,
            jaccard: jaccard(&pred, gt)?,
            hd95,
            asd,
        });
    }
    Ok(out)
}

/// Loads `fv.ckpt` weights and evaluates the requested manifest split with
/// the vanilla branch only, one window at a time (batch size 1 throughout;
/// the auxiliary branch and its attention never run).
pub fn evaluate_checkpoint(
    ckpt: &Path,
    manifest_path: &Path,
    split: EvalSplit,
    window: [usize; 3],
    stride: [usize; 3],
    n_levels: usize,
    base_channels: usize,
    proj_dim: usize,
) -> Result<Vec<EvalRow>> {
    let manifest_path = resolve_manifest_path(manifest_path);
    let manifest = load_manifest(&manifest_path)?;
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let samples = load_samples(&manifest, &dir, true)?;
    let filtered: Vec<SampleRecord> = samples
        .into_iter()
        .filter(|s| match split {
            EvalSplit::All => true,
            EvalSplit::Labeled => s.labeled,
            EvalSplit::Unlabeled => !s.labeled,
        })
        .collect();

    let cfg_v = BranchConfig {
        n_levels,
        base_channels,
        n_classes: manifest.n_classes,
        with_cma: false,
        proj_dim,
    };
    cfg_v.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cma_rng = ChaCha8Rng::seed_from_u64(0);
    let fv = BranchParams::init(cfg_v, &mut rng, &mut cma_rng);
    load_into(ckpt, &fv.named("fv"))?;
    // the projection head is structurally required by the forward but its
    // outputs play no part in metrics, so fresh init values are fine
    let gv = ProjectionHead::init(&cfg_v, &mut rng);

    evaluate_params(
        &fv,
        &gv,
        &filtered,
        manifest.spacing,
        window,
        stride,
        manifest.n_classes,
    )
}

pub fn eval_rows_to_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from(EVAL_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "nan".to_string(),
        };
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{},{}",
            r.sample_id,
            r.dice,
            r.jaccard,
            fmt(r.hd95),
            fmt(r.asd)
        );
    }
    s
}

/// Parses an eval CSV written by [`eval_rows_to_csv`].
pub fn parse_eval_csv(text: &str) -> Result<Vec<EvalRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CamlError::Format("empty eval csv".into()))?;
    if header != EVAL_CSV_HEADER {
        return Err(CamlError::Format(format!(
            "eval csv header {header:?} does not match {EVAL_CSV_HEADER:?}"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(CamlError::Format(format!(
                "eval csv line {}: expected 5 fields, got {}",
                i + 2,
                parts.len()
            )));
        }
        let field = |s: &str| -> Result<Option<f64>> {
            if s == "nan" {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| CamlError::Format(format!("bad eval csv number {s:?}")))
        };
        rows.push(EvalRow {
            sample_id: parts[0]
                .parse()
                .map_err(|_| CamlError::Format(format!("bad sample id {:?}", parts[0])))?,
            dice: field(parts[1])?
                .ok_or_else(|| CamlError::Format("dice may not be nan".into()))?,
            jaccard: field(parts[2])?
                .ok_or_else(|| CamlError::Format("jaccard may not be nan".into()))?,
            hd95: field(parts[3])?,
            asd: field(parts[4])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::load_checkpoint;
    use crate::volgen::generate_dataset;
    use tempfile::tempdir;

    fn tiny_dataset(dir: &Path, seed: u64, n: usize) -> PathBuf {
        generate_dataset(seed, n, [8, 8, 8], 0.5, dir).unwrap();
        dir.join("manifest.txt")
    }

    fn tiny_config(manifest: PathBuf) -> TrainConfig {
        TrainConfig {
            manifest,
            crop: [8, 8, 8],
            batch_size: 2,
            iterations: 3,
            bank_slots: 16,
            top_i: 4,
            proto_j: 2,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_parse_round_trips() {
        let cfg = TrainConfig {
            manifest: PathBuf::from("/tmp/data"),
            crop: [8, 16, 8],
            batch_size: 6,
            iterations: 123,
            lr: 0.02,
            seed: 99,
            enable_cma: false,
            ..TrainConfig::default()
        };
        let text = render_train_config(&cfg);
        let back = parse_train_config(&text).unwrap();
        assert_eq!(back.manifest, cfg.manifest);
        assert_eq!(back.crop, cfg.crop);
        assert_eq!(back.batch_size, 6);
        assert_eq!(back.iterations, 123);
        assert_eq!(back.lr, 0.02);
        assert_eq!(back.seed, 99);
        assert!(!back.enable_cma);
        assert!(back.enable_occ);
    }

    #[test]
    fn config_parser_rejects_junk() {
        assert!(parse_train_config("unknown_key = 3").is_err());
        assert!(parse_train_config("batch_size = many").is_err());
        assert!(parse_train_config("just some words").is_err());
        // comments and blanks are fine
        let ok = parse_train_config("# a comment\n\nseed = 5 # trailing\n").unwrap();
        assert_eq!(ok.seed, 5);
    }

    #[test]
    fn config_validation_catches_structural_errors() {
        let base = TrainConfig::default();
        let odd = TrainConfig {
            batch_size: 3,
            ..base.clone()
        };
        assert!(odd.validate().is_err());
        let tiny = TrainConfig {
            batch_size: 0,
            ..base.clone()
        };
        assert!(tiny.validate().is_err());
        let bad_crop = TrainConfig {
            crop: [10, 16, 16],
            ..base.clone()
        };
        assert!(bad_crop.validate().is_err(), "10 is not divisible by 4");
        assert!(base.validate().is_ok());
    }

    #[test]
    fn zero_iterations_saves_the_initialization() {
        let data_dir = tempdir().unwrap();
        let manifest = tiny_dataset(data_dir.path(), 1, 4);
        let out = tempdir().unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            ..tiny_config(manifest)
        };
        let log = train_run(&cfg, out.path()).unwrap();
        assert!(log.rows.is_empty());

        let (cfg_v, cfg_a) = cfg.branch_configs(2);
        let (fv, _, _, _) = build_branches(cfg_v, cfg_a, cfg.seed).unwrap();
        let loaded = load_checkpoint(&out.path().join("fv.ckpt")).unwrap();
        let want = fv.named("fv");
        assert_eq!(loaded.len(), want.len());
        for ((ln, ls, lv), (wn, wt)) in loaded.into_iter().zip(want) {
            assert_eq!(ln, wn);
            assert_eq!(ls, wt.shape());
            let wv = wt.value();
            for (a, b) in lv.iter().zip(&wv) {
                assert_eq!(a.to_bits(), b.to_bits(), "{ln} drifted");
            }
        }
    }

    #[test]
    fn same_seed_reproduces_checkpoints_bitwise() {
        let data_dir = tempdir().unwrap();
        let manifest = tiny_dataset(data_dir.path(), 2, 4);
        let out1 = tempdir().unwrap();
        let out2 = tempdir().unwrap();
        let cfg = tiny_config(manifest);
        train_run(&cfg, out1.path()).unwrap();
        train_run(&cfg, out2.path()).unwrap();
        for name in ["fv.ckpt", "fa.ckpt", "gv.ckpt", "ga.ckpt", "run.csv"] {
            let a = fs::read(out1.path().join(name)).unwrap();
            let b = fs::read(out2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn training_reduces_the_total_loss() {
        let data_dir = tempdir().unwrap();
        let manifest = tiny_dataset(data_dir.path(), 3, 4);
        let out = tempdir().unwrap();
        let cfg = TrainConfig {
            iterations: 40,
            ..tiny_config(manifest)
        };
        let log = train_run(&cfg, out.path()).unwrap();
        assert_eq!(log.rows.len(), 40);
        let head: f32 = log.rows[..5].iter().map(|r| r.breakdown.total).sum::<f32>() / 5.0;
        let tail: f32 = log.rows[35..].iter().map(|r| r.breakdown.total).sum::<f32>() / 5.0;
        assert!(
            tail < head,
            "loss failed to decrease: first {head}, last {tail}"
        );
    }

    #[test]
    fn run_artifacts_have_the_documented_shape() {
        let data_dir = tempdir().unwrap();
        let manifest = tiny_dataset(data_dir.path(), 4, 4);
        let out = tempdir().unwrap();
        let cfg = TrainConfig {
            iterations: 4,
            ..tiny_config(manifest)
        };
        let log = train_run(&cfg, out.path()).unwrap();

        let csv = fs::read_to_string(out.path().join("run.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), RUN_CSV_HEADER);
        assert_eq!(lines.count(), 4);

        let meta = fs::read_to_string(out.path().join("run_meta.txt")).unwrap();
        assert!(meta.contains("threads = 1"), "thread count must be logged");
        assert!(meta.contains("seed = 7"));

        // iteration zero always runs on a cold bank: no correlation term
        assert_eq!(log.rows[0].breakdown.l_o, 0.0);
        assert_eq!(log.rows[0].m, 0);
        // the λ ramp is nondecreasing across iterations
        for pair in log.rows.windows(2) {
            assert!(pair[1].breakdown.lambda_c >= pair[0].breakdown.lambda_c);
        }
    }

    #[test]
    fn evaluation_runs_the_vanilla_branch_alone() {
        let data_dir = tempdir().unwrap();
        let manifest = tiny_dataset(data_dir.path(), 5, 4);
        let out = tempdir().unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            ..tiny_config(manifest.clone())
        };
        train_run(&cfg, out.path()).unwrap();
        let rows = evaluate_checkpoint(
            &out.path().join("fv.ckpt"),
            &manifest,
            EvalSplit::All,
            [8, 8, 8],
            [8, 8, 8],
            cfg.n_levels,
            cfg.base_channels,
            cfg.proj_dim,
        )
        .unwrap();
        assert_eq!(rows.len(), 4, "every sample gets a row");
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.dice));
            assert!(r.jaccard <= r.dice + 1e-12);
        }
        let labeled_only = evaluate_checkpoint(
            &out.path().join("fv.ckpt"),
            &manifest,
            EvalSplit::Labeled,
            [8, 8, 8],
            [8, 8, 8],
            cfg.n_levels,
            cfg.base_channels,
            cfg.proj_dim,
        )
        .unwrap();
        assert_eq!(labeled_only.len(), 2);
    }

    #[test]
    fn eval_csv_round_trips_including_failure_rows() {
        let rows = vec![
            EvalRow {
                sample_id: 3,
                dice: 0.875,
                jaccard: 0.7778,
                hd95: Some(1.5),
                asd: Some(0.25),
            },
            EvalRow {
                sample_id: 4,
                dice: 0.0,
                jaccard: 0.0,
                hd95: None,
                asd: None,
            },
        ];
        let csv = eval_rows_to_csv(&rows);
        assert!(csv.contains("nan,nan"));
        let back = parse_eval_csv(&csv).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].sample_id, 3);
        assert!(back[1].hd95.is_none());
        assert!(parse_eval_csv("wrong,header\n1,2").is_err());
    }
}
