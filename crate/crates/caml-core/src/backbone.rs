//! The two segmentation branches and their projection heads.
//!
//! Both branches are the same encoder-decoder: per level two 3x3x3
//! conv+relu blocks, downsampling via stride-2 2x2x2 convs, trilinear x2
//! upsampling with skip concatenations on the way back up, and a 1x1x1
//! logits head. The auxiliary branch differs in exactly one way: its
//! bottleneck feature map is routed through the cross-sample attention
//! module, which means its forward needs at least two samples in the batch.
//!
//! Projection heads are pointwise two-layer MLPs (1x1x1 conv, relu, 1x1x1
//! conv) from decoder features to the embedding width; cosine normalization
//! happens downstream in the correlation loss, not here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::cma::{cma_forward, CmaConfig, CmaParams};
use crate::error::{CamlError, Result};
use crate::params::{kaiming_uniform, zeros_param};

pub const CMA_HEADS: usize = 4;
pub const CMA_MLP_RATIO: f32 = 2.0;

#[derive(Clone, Copy, Debug)]
pub struct BranchConfig {
    pub n_levels: usize,
    pub base_channels: usize,
    pub n_classes: usize,
    pub with_cma: bool,
    pub proj_dim: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        BranchConfig {
            n_levels: 3,
            base_channels: 8,
            n_classes: 2,
            with_cma: false,
            proj_dim: 16,
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels < 2 {
            return Err(CamlError::Config(format!(
                "n_levels {} must be >= 2",
                self.n_levels
            )));
        }
        if self.base_channels < 4 {
            return Err(CamlError::Config(format!(
                "base_channels {} must be >= 4",
                self.base_channels
            )));
        }
        if self.proj_dim < 8 {
            return Err(CamlError::Config(format!(
                "proj_dim {} must be >= 8",
                self.proj_dim
            )));
        }
        if self.n_classes < 2 {
            return Err(CamlError::Config(format!(
                "n_classes {} must be >= 2",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Channel width of encoder level `i`.
    pub fn level_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.level_channels(self.n_levels - 1)
    }

    /// Every spatial extent must divide by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.n_levels - 1)
    }

    pub fn cma_config(&self) -> CmaConfig {
        CmaConfig {
            channels: self.bottleneck_channels(),
            heads: CMA_HEADS,
            mlp_ratio: CMA_MLP_RATIO,
        }
    }
}

#[derive(Clone)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    fn init(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> ConvLayer {
        ConvLayer {
            w: kaiming_uniform(rng, &[c_out, c_in, k, k, k], c_in * k * k * k),
            b: zeros_param(&[c_out]),
            stride,
            padding,
        }
    }

    fn apply(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.conv3d(x, &self.w, &self.b, self.stride, self.padding)
    }
}

#[derive(Clone)]
pub struct BranchParams {
    pub cfg: BranchConfig,
    /// Per level; level 0 starts with the stem, deeper levels with the
    /// stride-2 downsampling conv.
    pub enc_blocks: Vec<Vec<ConvLayer>>,
    /// In processing order, deepest first; each runs after upsample+concat.
    pub dec_blocks: Vec<Vec<ConvLayer>>,
    pub head: ConvLayer,
    pub cma: Option<CmaParams>,
}

impl BranchParams {
    pub fn init(cfg: BranchConfig, rng: &mut ChaCha8Rng, cma_rng: &mut ChaCha8Rng) -> BranchParams {
        let l = cfg.n_levels;
        let mut enc_blocks = Vec::with_capacity(l);
        for i in 0..l {
            let ch = cfg.level_channels(i);
            let mut blocks = Vec::new();
            if i == 0 {
                blocks.push(ConvLayer::init(rng, 1, ch, 3, 1, 1));
            } else {
                blocks.push(ConvLayer::init(rng, cfg.level_channels(i - 1), ch, 2, 2, 0));
            }
            blocks.push(ConvLayer::init(rng, ch, ch, 3, 1, 1));
            enc_blocks.push(blocks);
        }
        let mut dec_blocks = Vec::with_capacity(l - 1);
        for i in (0..l - 1).rev() {
            let ch = cfg.level_channels(i);
            let cat = cfg.level_channels(i + 1) + ch;
            dec_blocks.push(vec![
                ConvLayer::init(rng, cat, ch, 3, 1, 1),
                ConvLayer::init(rng, ch, ch, 3, 1, 1),
            ]);
        }
        let head = ConvLayer::init(rng, cfg.base_channels, cfg.n_classes, 1, 1, 0);
        let cma = cfg
            .with_cma
            .then(|| CmaParams::init(&cfg.cma_config(), cma_rng));
        BranchParams {
            cfg,
            enc_blocks,
            dec_blocks,
            head,
            cma,
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, blocks) in self.enc_blocks.iter().enumerate() {
            for (j, c) in blocks.iter().enumerate() {
                out.push((format!("{prefix}.enc{i}.conv{j}.w"), c.w.clone()));
                out.push((format!("{prefix}.enc{i}.conv{j}.b"), c.b.clone()));
            }
        }
        if let Some(cma) = &self.cma {
            out.extend(cma.named(&format!("{prefix}.cma")));
        }
        for (i, blocks) in self.dec_blocks.iter().enumerate() {
            for (j, c) in blocks.iter().enumerate() {
                out.push((format!("{prefix}.dec{i}.conv{j}.w"), c.w.clone()));
                out.push((format!("{prefix}.dec{i}.conv{j}.b"), c.b.clone()));
            }
        }
        out.push((format!("{prefix}.head.w"), self.head.w.clone()));
        out.push((format!("{prefix}.head.b"), self.head.b.clone()));
        out
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named("p").into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// The same convolution weights with attention detached — used to show
    /// that a collapsed attention module leaves the branch CMA-free.
    pub fn without_cma_view(&self) -> BranchParams {
        let mut v = self.clone();
        v.cma = None;
        v.cfg.with_cma = false;
        v
    }
}

#[derive(Clone)]
pub struct ProjectionHead {
    pub c1: ConvLayer,
    pub c2: ConvLayer,
}

impl ProjectionHead {
    pub fn init(cfg: &BranchConfig, rng: &mut ChaCha8Rng) -> ProjectionHead {
        ProjectionHead {
            c1: ConvLayer::init(rng, cfg.base_channels, cfg.proj_dim, 1, 1, 0),
            c2: ConvLayer::init(rng, cfg.proj_dim, cfg.proj_dim, 1, 1, 0),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.c1.w"), self.c1.w.clone()),
            (format!("{prefix}.c1.b"), self.c1.b.clone()),
            (format!("{prefix}.c2.w"), self.c2.w.clone()),
            (format!("{prefix}.c2.b"), self.c2.b.clone()),
        ]
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named("g").into_iter().map(|(_, t)| t).collect()
    }
}

pub struct BranchOutputs {
    pub logits: Tensor,
    pub decoder_features: Tensor,
    pub projections: Tensor,
}

/// Builds f_v, f_a, g_v, g_a with disjoint parameters. Each component draws
/// from its own ChaCha stream of `seed`, so shared structure initializes
/// identically whether or not the auxiliary branch carries CMA.
pub fn build_branches(
    cfg_v: BranchConfig,
    cfg_a: BranchConfig,
    seed: u64,
) -> Result<(BranchParams, BranchParams, ProjectionHead, ProjectionHead)> {
    cfg_v.validate()?;
    cfg_a.validate()?;
    if cfg_v.with_cma {
        return Err(CamlError::Config(
            "the vanilla branch must be built without CMA".into(),
        ));
    }
    if cfg_v.n_classes != cfg_a.n_classes {
        return Err(CamlError::Config(format!(
            "branch class counts differ: {} vs {}",
            cfg_v.n_classes, cfg_a.n_classes
        )));
    }
    if cfg_v.proj_dim != cfg_a.proj_dim {
        return Err(CamlError::Config(format!(
            "projection widths differ: {} vs {}",
            cfg_v.proj_dim, cfg_a.proj_dim
        )));
    }
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    let mut unused = stream(9);
    let fv = BranchParams::init(cfg_v, &mut stream(0), &mut unused);
    let fa = BranchParams::init(cfg_a, &mut stream(1), &mut stream(4));
    let gv = ProjectionHead::init(&cfg_v, &mut stream(2));
    let ga = ProjectionHead::init(&cfg_a, &mut stream(3));
    Ok((fv, fa, gv, ga))
}

fn check_batch_shape(p: &BranchParams, x: &Tensor) -> Result<[usize; 5]> {
    let s = x.shape();
    if s.len() != 5 || s[1] != 1 {
        return Err(CamlError::Shape(format!(
            "branch input must be (b, 1, D, H, W), got {s:?}"
        )));
    }
    let div = p.cfg.spatial_divisor();
    for &d in &s[2..] {
        if d == 0 || d % div != 0 {
            return Err(CamlError::Shape(format!(
                "spatial dims {:?} must be divisible by {div} for a {}-level branch",
                &s[2..],
                p.cfg.n_levels
            )));
        }
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

fn forward_impl(
    tape: &Tape,
    p: &BranchParams,
    head: &ProjectionHead,
    x: &Tensor,
) -> Result<BranchOutputs> {
    let [b, _, _, _, _] = check_batch_shape(p, x)?;
    let l = p.cfg.n_levels;

    let mut cur = x.clone();
    let mut skips: Vec<Tensor> = Vec::with_capacity(l - 1);
    for (i, blocks) in p.enc_blocks.iter().enumerate() {
        for conv in blocks {
            cur = tape.relu(&conv.apply(tape, &cur)?)?;
        }
        if i < l - 1 {
            skips.push(cur.clone());
        }
    }

    if let Some(cma) = &p.cma {
        let s = cur.shape();
        let k = s[2] * s[3] * s[4];
        let flat = tape.reshape(&cur, &[b, s[1], k])?;
        let attended = cma_forward(tape, &flat, cma, &p.cfg.cma_config())?;
        cur = tape.reshape(&attended, &s)?;
    }

    for (j, blocks) in p.dec_blocks.iter().enumerate() {
        let up = tape.upsample2x(&cur)?;
        let skip = &skips[l - 2 - j];
        cur = tape.concat(&[&up, skip], 1)?;
        for conv in blocks {
            cur = tape.relu(&conv.apply(tape, &cur)?)?;
        }
    }

    let logits = p.head.apply(tape, &cur)?;
    let projections = project_embeddings(tape, head, &cur)?;
    Ok(BranchOutputs {
        logits,
        decoder_features: cur,
        projections,
    })
}

/// Forward of the CMA-free vanilla branch; any batch size, including 1.
pub fn forward_vanilla(
    tape: &Tape,
    p: &BranchParams,
    head: &ProjectionHead,
    x: &Tensor,
) -> Result<BranchOutputs> {
    if p.cma.is_some() {
        return Err(CamlError::Config(
            "forward_vanilla called on parameters that carry a CMA module".into(),
        ));
    }
    forward_impl(tape, p, head, x)
}

/// Forward of the auxiliary branch; cross-sample attention makes batches of
/// one meaningless, so they are rejected.
pub fn forward_auxiliary(
    tape: &Tape,
    p: &BranchParams,
    head: &ProjectionHead,
    x: &Tensor,
) -> Result<BranchOutputs> {
    if p.cma.is_none() {
        return Err(CamlError::Config(
            "forward_auxiliary called on parameters without a CMA module".into(),
        ));
    }
    let s = x.shape();
    if s.first().copied().unwrap_or(0) < 2 {
        return Err(CamlError::BatchSize(s.first().copied().unwrap_or(0)));
    }
    forward_impl(tape, p, head, x)
}

/// Two-layer pointwise MLP from decoder features to the embedding width.
pub fn project_embeddings(
    tape: &Tape,
    head: &ProjectionHead,
    features: &Tensor,
) -> Result<Tensor> {
    let s = features.shape();
    let expect = head.c1.w.shape()[1];
    if s.len() != 5 || s[1] != expect {
        return Err(CamlError::Shape(format!(
            "projection head expects (b, {expect}, D, H, W) features, got {s:?}"
        )));
    }
    let h = tape.relu(&head.c1.apply(tape, features)?)?;
    head.c2.apply(tape, &h)
}
