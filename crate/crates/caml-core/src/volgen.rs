//! Synthetic dataset generation and volume plumbing.
//!
//! Each generated sample is a single randomly-posed ellipsoid (class 1) on a
//! flat background, corrupted by a smooth polynomial bias field and additive
//! Gaussian noise. Pose, bias, and noise all come from one ChaCha stream per
//! sample (stream id = sample id), so regeneration is byte-identical and
//! independent of generation order.
//!
//! On-disk formats (little-endian):
//!
//! ```text
//! volume:  "CAMLVOL1" | u32 D,H,W | f32 spacing sz,sy,sx | f32 payload D*H*W
//! label:   "CAMLLAB1" | u32 D,H,W | u8 payload D*H*W
//! ```
//!
//! Payload order is slowest-varying dimension first (z, then y, then x).
//! The manifest is plain text, one `key=value` per line; see
//! [`write_manifest`] for the schema.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{CamlError, Result};

pub const VOL_MAGIC: &[u8; 8] = b"CAMLVOL1";
pub const LAB_MAGIC: &[u8; 8] = b"CAMLLAB1";

/// Background intensity of a clean synthetic volume.
pub const BACKGROUND_INTENSITY: f32 = 0.0;
/// Foreground (ellipsoid) intensity of a clean synthetic volume.
pub const FOREGROUND_INTENSITY: f32 = 1.0;
/// Noise sigma as a fraction of the foreground/background contrast.
pub const NOISE_SIGMA_FRACTION: f32 = 0.2;
/// Peak amplitude of each polynomial bias-field coefficient.
pub const BIAS_AMPLITUDE: f32 = 0.4;
/// Ellipsoid semi-axis range as a fraction of the smallest grid dimension.
pub const SEMI_AXIS_FRACTION: (f32, f32) = (0.18, 0.28);

#[derive(Clone, Debug)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<VolumeGrid> {
        if dims.iter().any(|&d| d == 0) {
            return Err(CamlError::Shape(format!("volume dims {dims:?} must all be >= 1")));
        }
        if spacing.iter().any(|&s| s <= 0.0) {
            return Err(CamlError::Shape(format!("voxel spacing {spacing:?} must be > 0")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(CamlError::Shape(format!(
                "volume payload holds {} voxels but dims {dims:?} require {n}",
                data.len()
            )));
        }
        Ok(VolumeGrid { dims, spacing, data })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }
}

#[derive(Clone, Debug)]
pub struct LabelGrid {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelGrid {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<LabelGrid> {
        if dims.iter().any(|&d| d == 0) {
            return Err(CamlError::Shape(format!("label dims {dims:?} must all be >= 1")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(CamlError::Shape(format!(
                "label payload holds {} voxels but dims {dims:?} require {n}",
                data.len()
            )));
        }
        Ok(LabelGrid { dims, data })
    }

    pub fn validate_classes(&self, n_classes: usize) -> Result<()> {
        if let Some(&bad) = self.data.iter().find(|&&v| (v as usize) >= n_classes) {
            return Err(CamlError::Format(format!(
                "label value {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }
}

#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub id: usize,
    pub volume: VolumeGrid,
    pub label: Option<LabelGrid>,
    pub labeled: bool,
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub id: usize,
    pub labeled: bool,
    pub volume_file: String,
    pub label_file: String,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_classes: usize,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn labeled_count(&self) -> usize {
        self.entries.iter().filter(|e| e.labeled).count()
    }
}

/// Pose and scale of one generated ellipsoid, in voxel units.
#[derive(Clone, Copy, Debug)]
pub struct EllipsoidParams {
    pub center: [f32; 3],
    pub semi_axes: [f32; 3],
    /// Row-major rotation matrix applied to offsets from the center.
    pub rotation: [[f32; 3]; 3],
}

fn rotation_from_euler(alpha: f32, beta: f32, gamma: f32) -> [[f32; 3]; 3] {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    // Rz(alpha) * Ry(beta) * Rx(gamma), acting on (z, y, x) offsets.
    [
        [ca * cb, ca * sb * sg - sa * cg, ca * sb * cg + sa * sg],
        [sa * cb, sa * sb * sg + ca * cg, sa * sb * cg - ca * sg],
        [-sb, cb * sg, cb * cg],
    ]
}

/// Deterministically synthesizes sample `id` of a dataset: clean ellipsoid
/// plus bias field plus noise, and the matching label mask.
pub fn synth_sample(
    seed: u64,
    id: usize,
    dims: [usize; 3],
) -> (VolumeGrid, LabelGrid, EllipsoidParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);

    let min_dim = *dims.iter().min().unwrap() as f32;
    let axis_dist = Uniform::new(
        SEMI_AXIS_FRACTION.0 * min_dim,
        SEMI_AXIS_FRACTION.1 * min_dim,
    );
    let semi_axes = [
        axis_dist.sample(&mut rng),
        axis_dist.sample(&mut rng),
        axis_dist.sample(&mut rng),
    ];
    let angle = Uniform::new(0.0f32, std::f32::consts::TAU);
    let rotation = rotation_from_euler(
        angle.sample(&mut rng),
        angle.sample(&mut rng),
        angle.sample(&mut rng),
    );
    // Keep the whole ellipsoid inside the grid so its voxel count tracks the
    // analytic volume; the bounding radius under any rotation is the largest
    // semi-axis.
    let margin = semi_axes.iter().fold(0.0f32, |m, &a| m.max(a)) + 1.0;
    let mut center = [0.0f32; 3];
    for (c, &d) in center.iter_mut().zip(&dims) {
        let hi = (d as f32 - 1.0 - margin).max(margin);
        *c = if hi > margin {
            rng.gen_range(margin..hi)
        } else {
            (d as f32 - 1.0) * 0.5
        };
    }
    let params = EllipsoidParams {
        center,
        semi_axes,
        rotation,
    };

    let coeff = Uniform::new(-BIAS_AMPLITUDE, BIAS_AMPLITUDE);
    let bias: Vec<f32> = (0..9).map(|_| coeff.sample(&mut rng)).collect();
    let contrast = FOREGROUND_INTENSITY - BACKGROUND_INTENSITY;
    let noise = Normal::new(0.0f32, NOISE_SIGMA_FRACTION * contrast).unwrap();

    let n = dims[0] * dims[1] * dims[2];
    let mut vol = vec![0.0f32; n];
    let mut lab = vec![0u8; n];
    let mut i = 0;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let inside = inside_ellipsoid(&params, [z as f32, y as f32, x as f32]);
                let base = if inside {
                    FOREGROUND_INTENSITY
                } else {
                    BACKGROUND_INTENSITY
                };
                // Normalized coordinates in [-1, 1] for the bias polynomial.
                let tz = 2.0 * z as f32 / (dims[0] - 1).max(1) as f32 - 1.0;
                let ty = 2.0 * y as f32 / (dims[1] - 1).max(1) as f32 - 1.0;
                let tx = 2.0 * x as f32 / (dims[2] - 1).max(1) as f32 - 1.0;
                let field = bias[0] * tz
                    + bias[1] * ty
                    + bias[2] * tx
                    + bias[3] * tz * ty
                    + bias[4] * ty * tx
                    + bias[5] * tz * tx
                    + bias[6] * tz * tz
                    + bias[7] * ty * ty
                    + bias[8] * tx * tx;
                vol[i] = base + field + noise.sample(&mut rng);
                lab[i] = inside as u8;
                i += 1;
            }
        }
    }
    (
        VolumeGrid {
            dims,
            spacing: [1.0, 1.0, 1.0],
            data: vol,
        },
        LabelGrid { dims, data: lab },
        params,
    )
}

fn inside_ellipsoid(p: &EllipsoidParams, pos: [f32; 3]) -> bool {
    let d = [
        pos[0] - p.center[0],
        pos[1] - p.center[1],
        pos[2] - p.center[2],
    ];
    let mut q = 0.0f32;
    for (row, &axis) in p.rotation.iter().zip(&p.semi_axes) {
        let proj = row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
        q += (proj / axis) * (proj / axis);
    }
    q <= 1.0
}

/// Writes `n_samples` volume/label pairs plus `manifest.txt` under `out_dir`
/// and returns the manifest. The first `ceil(labeled_fraction * n_samples)`
/// samples are flagged labeled.
pub fn generate_dataset(
    seed: u64,
    n_samples: usize,
    dims: [usize; 3],
    labeled_fraction: f64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_samples < 2 {
        return Err(CamlError::Config(format!(
            "need at least 2 samples, got {n_samples}"
        )));
    }
    if dims.iter().any(|&d| d < 8) {
        return Err(CamlError::Config(format!(
            "dims {dims:?} are degenerate; each must be >= 8"
        )));
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(CamlError::Config(format!(
            "labeled_fraction {labeled_fraction} must lie in (0, 1]"
        )));
    }
    let labeled = (labeled_fraction * n_samples as f64).ceil() as usize;
    if labeled < 1 {
        return Err(CamlError::Config(
            "labeled_fraction leaves no labeled samples".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut entries = Vec::with_capacity(n_samples);
    for id in 0..n_samples {
        let (vol, lab, _) = synth_sample(seed, id, dims);
        let volume_file = format!("vol_{id:04}.vol");
        let label_file = format!("lab_{id:04}.lab");
        write_volume(&out_dir.join(&volume_file), &vol)?;
        write_label(&out_dir.join(&label_file), &lab)?;
        entries.push(ManifestEntry {
            id,
            labeled: id < labeled,
            volume_file,
            label_file,
        });
    }
    let manifest = DatasetManifest {
        seed,
        n_classes: 2,
        dims,
        spacing: [1.0, 1.0, 1.0],
        entries,
    };
    write_manifest(&out_dir.join("manifest.txt"), &manifest)?;
    Ok(manifest)
}

/// Rescales to zero mean and unit population variance; inputs with
/// population std below 1e-8 come back all zero.
pub fn normalize_volume(v: &VolumeGrid) -> VolumeGrid {
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let data = if std < 1e-8 {
        vec![0.0f32; v.data.len()]
    } else {
        v.data
            .iter()
            .map(|&x| ((x as f64 - mean) / std) as f32)
            .collect()
    };
    VolumeGrid {
        dims: v.dims,
        spacing: v.spacing,
        data,
    }
}

/// Draws a crop origin uniformly over all valid positions.
pub fn crop_offset(
    dims: [usize; 3],
    crop: [usize; 3],
    rng: &mut impl Rng,
) -> Result<[usize; 3]> {
    for (d, c) in dims.iter().zip(&crop) {
        if c > d || *c == 0 {
            return Err(CamlError::Shape(format!(
                "crop {crop:?} does not fit inside dims {dims:?}"
            )));
        }
    }
    Ok([
        rng.gen_range(0..=dims[0] - crop[0]),
        rng.gen_range(0..=dims[1] - crop[1]),
        rng.gen_range(0..=dims[2] - crop[2]),
    ])
}

pub fn crop_volume_at(v: &VolumeGrid, offset: [usize; 3], crop: [usize; 3]) -> VolumeGrid {
    let mut data = Vec::with_capacity(crop[0] * crop[1] * crop[2]);
    for z in 0..crop[0] {
        for y in 0..crop[1] {
            let base = v.index(offset[0] + z, offset[1] + y, offset[2]);
            data.extend_from_slice(&v.data[base..base + crop[2]]);
        }
    }
    VolumeGrid {
        dims: crop,
        spacing: v.spacing,
        data,
    }
}

pub fn crop_label_at(l: &LabelGrid, offset: [usize; 3], crop: [usize; 3]) -> LabelGrid {
    let mut data = Vec::with_capacity(crop[0] * crop[1] * crop[2]);
    for z in 0..crop[0] {
        for y in 0..crop[1] {
            let base = l.index(offset[0] + z, offset[1] + y, offset[2]);
            data.extend_from_slice(&l.data[base..base + crop[2]]);
        }
    }
    LabelGrid { dims: crop, data }
}

/// Crops volume and label at one shared uniformly-drawn offset.
pub fn random_crop(
    v: &VolumeGrid,
    l: &LabelGrid,
    crop: [usize; 3],
    rng: &mut impl Rng,
) -> Result<(VolumeGrid, LabelGrid)> {
    if v.dims != l.dims {
        return Err(CamlError::Shape(format!(
            "volume dims {:?} and label dims {:?} differ",
            v.dims, l.dims
        )));
    }
    let offset = crop_offset(v.dims, crop, rng)?;
    Ok((crop_volume_at(v, offset, crop), crop_label_at(l, offset, crop)))
}

// ---- file I/O ------------------------------------------------------------

pub fn write_volume(path: &Path, v: &VolumeGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VOL_MAGIC)?;
    for &d in &v.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &s in &v.spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    for &x in &v.data {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<VolumeGrid> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != VOL_MAGIC {
        return Err(CamlError::Format(format!(
            "{}: bad volume magic {:?}",
            path.display(),
            magic
        )));
    }
    let dims = [
        read_u32(&mut r, path)? as usize,
        read_u32(&mut r, path)? as usize,
        read_u32(&mut r, path)? as usize,
    ];
    let mut spacing = [0.0f32; 3];
    for s in spacing.iter_mut() {
        *s = read_f32(&mut r, path)?;
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut data = vec![0.0f32; n];
    for v in data.iter_mut() {
        *v = read_f32(&mut r, path)?;
    }
    reject_trailing(&mut r, path)?;
    VolumeGrid::new(dims, spacing, data)
}

pub fn write_label(path: &Path, l: &LabelGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(LAB_MAGIC)?;
    for &d in &l.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&l.data)?;
    w.flush()?;
    Ok(())
}

pub fn read_label(path: &Path) -> Result<LabelGrid> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != LAB_MAGIC {
        return Err(CamlError::Format(format!(
            "{}: bad label magic {:?}",
            path.display(),
            magic
        )));
    }
    let dims = [
        read_u32(&mut r, path)? as usize,
        read_u32(&mut r, path)? as usize,
        read_u32(&mut r, path)? as usize,
    ];
    let n = dims[0] * dims[1] * dims[2];
    let mut data = vec![0u8; n];
    read_exact(&mut r, &mut data, path)?;
    reject_trailing(&mut r, path)?;
    LabelGrid::new(dims, data)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| CamlError::Format(format!("{}: truncated payload", path.display())))
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R, path: &Path) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(f32::from_le_bytes(b))
}

fn reject_trailing<R: Read>(r: &mut R, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(CamlError::Format(format!(
            "{}: trailing bytes after payload",
            path.display()
        ))),
        Err(e) => Err(CamlError::Io(e)),
    }
}

// ---- manifest ------------------------------------------------------------

/// Schema: `format=CAMLMANIFEST1`, then `seed`, `n_classes`, `n_samples`,
/// `dims=D,H,W`, `spacing=sz,sy,sx`, then one
/// `sample=<id>,<labeled|unlabeled>,<volume file>,<label file>` per sample.
/// File paths are relative to the manifest's directory.
pub fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "format=CAMLMANIFEST1")?;
    writeln!(w, "seed={}", m.seed)?;
    writeln!(w, "n_classes={}", m.n_classes)?;
    writeln!(w, "n_samples={}", m.entries.len())?;
    writeln!(w, "dims={},{},{}", m.dims[0], m.dims[1], m.dims[2])?;
    writeln!(
        w,
        "spacing={},{},{}",
        m.spacing[0], m.spacing[1], m.spacing[2]
    )?;
    for e in &m.entries {
        writeln!(
            w,
            "sample={},{},{},{}",
            e.id,
            if e.labeled { "labeled" } else { "unlabeled" },
            e.volume_file,
            e.label_file
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CamlError::Format(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let bad = |msg: String| CamlError::Format(format!("{}: {msg}", path.display()));

    let mut seed = None;
    let mut n_classes = None;
    let mut n_samples = None;
    let mut dims = None;
    let mut spacing = None;
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut saw_format = false;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected key=value", lineno + 1)))?;
        match key {
            "format" => {
                if value != "CAMLMANIFEST1" {
                    return Err(bad(format!("unsupported manifest format {value:?}")));
                }
                saw_format = true;
            }
            "seed" => seed = Some(parse_num::<u64>(value, "seed", &bad)?),
            "n_classes" => n_classes = Some(parse_num::<usize>(value, "n_classes", &bad)?),
            "n_samples" => n_samples = Some(parse_num::<usize>(value, "n_samples", &bad)?),
            "dims" => dims = Some(parse_triple_usize(value, "dims", &bad)?),
            "spacing" => spacing = Some(parse_triple_f32(value, "spacing", &bad)?),
            "sample" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 4 {
                    return Err(bad(format!(
                        "line {}: sample needs id,flag,volume,label",
                        lineno + 1
                    )));
                }
                let labeled = match parts[1] {
                    "labeled" => true,
                    "unlabeled" => false,
                    other => return Err(bad(format!("unknown labeled flag {other:?}"))),
                };
                entries.push(ManifestEntry {
                    id: parse_num::<usize>(parts[0], "sample id", &bad)?,
                    labeled,
                    volume_file: parts[2].to_string(),
                    label_file: parts[3].to_string(),
                });
            }
            other => return Err(bad(format!("unknown manifest key {other:?}"))),
        }
    }
    if !saw_format {
        return Err(bad("missing format line".into()));
    }
    let m = DatasetManifest {
        seed: seed.ok_or_else(|| bad("missing seed".into()))?,
        n_classes: n_classes.ok_or_else(|| bad("missing n_classes".into()))?,
        dims: dims.ok_or_else(|| bad("missing dims".into()))?,
        spacing: spacing.ok_or_else(|| bad("missing spacing".into()))?,
        entries,
    };
    if let Some(expect) = n_samples {
        if expect != m.entries.len() {
            return Err(bad(format!(
                "n_samples says {expect} but {} sample lines present",
                m.entries.len()
            )));
        }
    }
    if m.entries.is_empty() {
        return Err(bad("manifest lists no samples".into()));
    }
    if m.labeled_count() == 0 {
        return Err(bad("manifest lists no labeled samples".into()));
    }
    for e in &m.entries {
        for f in [&e.volume_file, &e.label_file] {
            let p = dir.join(f);
            if !p.exists() {
                return Err(bad(format!("referenced file {} is missing", p.display())));
            }
        }
    }
    Ok(m)
}

fn parse_num<T: std::str::FromStr>(
    s: &str,
    what: &str,
    bad: &impl Fn(String) -> CamlError,
) -> Result<T> {
    s.trim()
        .parse::<T>()
        .map_err(|_| bad(format!("cannot parse {what} from {s:?}")))
}

fn parse_triple_usize(
    s: &str,
    what: &str,
    bad: &impl Fn(String) -> CamlError,
) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(bad(format!("{what} needs three comma-separated values")));
    }
    Ok([
        parse_num(parts[0], what, bad)?,
        parse_num(parts[1], what, bad)?,
        parse_num(parts[2], what, bad)?,
    ])
}

fn parse_triple_f32(s: &str, what: &str, bad: &impl Fn(String) -> CamlError) -> Result<[f32; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(bad(format!("{what} needs three comma-separated values")));
    }
    Ok([
        parse_num(parts[0], what, bad)?,
        parse_num(parts[1], what, bad)?,
        parse_num(parts[2], what, bad)?,
    ])
}

/// Loads every sample of a manifest. Labels are attached to labeled samples
/// always, and to unlabeled samples only when `labels_for_all` is set (the
/// evaluation path, where ground truth is wanted for scoring).
pub fn load_samples(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    labels_for_all: bool,
) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let volume = read_volume(&manifest_dir.join(&e.volume_file))?;
        if volume.dims != manifest.dims {
            return Err(CamlError::Format(format!(
                "sample {}: volume dims {:?} disagree with manifest dims {:?}",
                e.id, volume.dims, manifest.dims
            )));
        }
        let label = if e.labeled || labels_for_all {
            let l = read_label(&manifest_dir.join(&e.label_file))?;
            if l.dims != volume.dims {
                return Err(CamlError::Format(format!(
                    "sample {}: label dims {:?} disagree with volume dims {:?}",
                    e.id, l.dims, volume.dims
                )));
            }
            l.validate_classes(manifest.n_classes)?;
            Some(l)
        } else {
            None
        };
        out.push(SampleRecord {
            id: e.id,
            labeled: e.labeled,
            label,
            volume,
        });
    }
    Ok(out)
}

/// Resolves a manifest path: accepts either the manifest file itself or a
/// dataset directory containing `manifest.txt`.
pub fn resolve_manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.txt")
    } else {
        path.to_path_buf()
    }
}
