//! Selective fusion of NIR and RGB feature maps.
//!
//! Two stages produce complementary per-channel, per-pixel weights via a
//! paired softmax: a global stage built from 1×1 blocks (handles color
//! and luminance disagreement between the streams) and a local stage
//! whose blocks use a large-kernel depthwise convolution plus pointwise
//! mixing (handles structure disagreement). Each stage modulates both
//! streams; the fused feature is the sum of the two modulated streams
//! after the final stage, making the output an elementwise convex
//! combination of the inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{ConvLayer, NormAct, ParamSet};
use crate::param::Param;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

pub const DEFAULT_KERNEL_SIZE: usize = 5;
pub const DEFAULT_BLOCKS_PER_STAGE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Global,
    Local,
}

/// Default arrangement: global first, then local.
pub const DEFAULT_ARRANGEMENT: [StageKind; 2] = [StageKind::Global, StageKind::Local];

/// 1×1 conv → LayerNorm → PReLU.
#[derive(Debug, Clone)]
pub struct Block1x1 {
    pub conv: ConvLayer,
    pub norm_act: NormAct,
}

impl Block1x1 {
    fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Block1x1 {
            conv: ConvLayer::new(&format!("{name}.conv"), channels, channels, 1, 1, rng),
            norm_act: NormAct::new(name, channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        self.norm_act.forward(tape, y)
    }
}

impl ParamSet for Block1x1 {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.conv.collect(out);
        self.norm_act.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv.collect_mut(out);
        self.norm_act.collect_mut(out);
    }
}

/// Depthwise k×k conv → 1×1 pointwise conv → LayerNorm → PReLU.
/// The pointwise conv restores cross-channel mixing that the depthwise
/// step deliberately lacks.
#[derive(Debug, Clone)]
pub struct BlockKxK {
    pub depthwise: ConvLayer,
    pub pointwise: ConvLayer,
    pub norm_act: NormAct,
}

impl BlockKxK {
    fn new(name: &str, channels: usize, kernel_size: usize, rng: &mut ChaCha8Rng) -> Self {
        BlockKxK {
            depthwise: ConvLayer::depthwise(&format!("{name}.dw"), channels, kernel_size, rng),
            pointwise: ConvLayer::new(&format!("{name}.pw"), channels, channels, 1, 1, rng),
            norm_act: NormAct::new(name, channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.depthwise.forward(tape, x)?;
        let y = self.pointwise.forward(tape, y)?;
        self.norm_act.forward(tape, y)
    }
}

impl ParamSet for BlockKxK {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.depthwise.collect(out);
        self.pointwise.collect(out);
        self.norm_act.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.depthwise.collect_mut(out);
        self.pointwise.collect_mut(out);
        self.norm_act.collect_mut(out);
    }
}

#[derive(Debug, Clone)]
enum StageBlocks {
    Global(Vec<Block1x1>),
    Local(Vec<BlockKxK>),
}

/// One modulation stage: entry 1×1 conv at 2C width, a block stack,
/// exit 1×1 conv, then split + paired softmax into per-stream weights.
#[derive(Debug, Clone)]
pub struct ModulationStage {
    pub kind: StageKind,
    entry: ConvLayer,
    blocks: StageBlocks,
    exit: ConvLayer,
    channels: usize,
}

/// Complementary weight pair for the NIR and RGB streams; each element
/// lies in (0, 1) and the pair sums to 1.
pub struct ModulationWeights {
    pub w_nir: Var,
    pub w_rgb: Var,
}

impl ModulationStage {
    fn new(
        name: &str,
        kind: StageKind,
        channels: usize,
        kernel_size: usize,
        n_blocks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let wide = 2 * channels;
        let entry = ConvLayer::new(&format!("{name}.entry"), wide, wide, 1, 1, rng);
        let exit = ConvLayer::new(&format!("{name}.exit"), wide, wide, 1, 1, rng);
        let blocks = match kind {
            StageKind::Global => StageBlocks::Global(
                (0..n_blocks)
                    .map(|i| Block1x1::new(&format!("{name}.block{i}"), wide, rng))
                    .collect(),
            ),
            StageKind::Local => StageBlocks::Local(
                (0..n_blocks)
                    .map(|i| BlockKxK::new(&format!("{name}.block{i}"), wide, kernel_size, rng))
                    .collect(),
            ),
        };
        ModulationStage { kind, entry, blocks, exit, channels }
    }

    /// Weight estimation: concat → entry → blocks → exit → split → softmax.
    pub fn forward_weights(
        &self,
        tape: &mut Tape,
        f_nir: Var,
        f_rgb: Var,
    ) -> Result<ModulationWeights> {
        let c = tape.value(f_nir).shape().channels;
        if c != self.channels || tape.value(f_rgb).shape().channels != self.channels {
            return Err(Error::ShapeMismatch {
                op: "modulation_stage",
                lhs: tape.value(f_nir).shape().as_array().to_vec(),
                rhs: vec![0, self.channels, 0, 0],
            });
        }
        let mut h = tape.concat(f_nir, f_rgb)?;
        h = self.entry.forward(tape, h)?;
        match &self.blocks {
            StageBlocks::Global(blocks) => {
                for b in blocks {
                    h = b.forward(tape, h)?;
                }
            }
            StageBlocks::Local(blocks) => {
                for b in blocks {
                    h = b.forward(tape, h)?;
                }
            }
        }
        h = self.exit.forward(tape, h)?;
        let (logit_n, logit_r) = tape.split(h, self.channels)?;
        let (w_nir, w_rgb) = tape.paired_softmax(logit_n, logit_r)?;
        Ok(ModulationWeights { w_nir, w_rgb })
    }
}

impl ParamSet for ModulationStage {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.entry.collect(out);
        match &self.blocks {
            StageBlocks::Global(blocks) => blocks.iter().for_each(|b| b.collect(out)),
            StageBlocks::Local(blocks) => blocks.iter().for_each(|b| b.collect(out)),
        }
        self.exit.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.entry.collect_mut(out);
        match &mut self.blocks {
            StageBlocks::Global(blocks) => blocks.iter_mut().for_each(|b| b.collect_mut(out)),
            StageBlocks::Local(blocks) => blocks.iter_mut().for_each(|b| b.collect_mut(out)),
        }
        self.exit.collect_mut(out);
    }
}

/// Knobs for one selective fusion module.
#[derive(Debug, Clone)]
pub struct SfmConfig {
    pub channels: usize,
    pub kernel_size: usize,
    pub blocks_global: usize,
    pub blocks_local: usize,
    pub arrangement: Vec<StageKind>,
}

impl SfmConfig {
    pub fn with_defaults(channels: usize) -> Self {
        SfmConfig {
            channels,
            kernel_size: DEFAULT_KERNEL_SIZE,
            blocks_global: DEFAULT_BLOCKS_PER_STAGE,
            blocks_local: DEFAULT_BLOCKS_PER_STAGE,
            arrangement: DEFAULT_ARRANGEMENT.to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("sfm channels must be >= 1"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "sfm kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.arrangement.is_empty() {
            return Err(Error::invalid("sfm arrangement must not be empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SfmParams {
    pub stages: Vec<ModulationStage>,
    channels: usize,
}

impl SfmParams {
    pub fn channels(&self) -> usize {
        self.channels
    }
}

impl ParamSet for SfmParams {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.stages.iter().for_each(|s| s.collect(out));
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.stages.iter_mut().for_each(|s| s.collect_mut(out));
    }
}

/// Deterministic parameter construction for a given seed.
pub fn sfm_init(cfg: &SfmConfig, seed: u64) -> Result<SfmParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sfm_init_with(cfg, "sfm", &mut rng)
}

pub fn sfm_init_with(cfg: &SfmConfig, name: &str, rng: &mut ChaCha8Rng) -> Result<SfmParams> {
    cfg.validate()?;
    let stages = cfg
        .arrangement
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let (tag, n_blocks) = match kind {
                StageKind::Global => ("gmm", cfg.blocks_global),
                StageKind::Local => ("lmm", cfg.blocks_local),
            };
            ModulationStage::new(
                &format!("{name}.s{i}.{tag}"),
                kind,
                cfg.channels,
                cfg.kernel_size,
                n_blocks,
                rng,
            )
        })
        .collect();
    Ok(SfmParams { stages, channels: cfg.channels })
}

/// Fused feature: run every stage in order, modulating both streams,
/// then sum the two modulated streams.
pub fn sfm_forward(tape: &mut Tape, f_nir: Var, f_rgb: Var, p: &SfmParams) -> Result<Var> {
    if p.stages.is_empty() {
        return Err(Error::invalid("sfm has no stages"));
    }
    let mut n = f_nir;
    let mut r = f_rgb;
    for stage in &p.stages {
        let w = stage.forward_weights(tape, n, r)?;
        n = tape.mul(w.w_nir, n)?;
        r = tape.mul(w.w_rgb, r)?;
    }
    tape.add(n, r)
}

/// Value-level convenience wrapper over a throwaway tape.
pub fn sfm_apply(f_nir: &Tensor4, f_rgb: &Tensor4, p: &SfmParams) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let vn = tape.leaf(f_nir.clone());
    let vr = tape.leaf(f_rgb.clone());
    let out = sfm_forward(&mut tape, vn, vr, p)?;
    Ok(tape.value(out).clone())
}

/// Value-level weight pair from a single stage.
pub fn stage_apply_weights(
    f_nir: &Tensor4,
    f_rgb: &Tensor4,
    stage: &ModulationStage,
) -> Result<(Tensor4, Tensor4)> {
    let mut tape = Tape::new();
    let vn = tape.leaf(f_nir.clone());
    let vr = tape.leaf(f_rgb.clone());
    let w = stage.forward_weights(&mut tape, vn, vr)?;
    Ok((tape.value(w.w_nir).clone(), tape.value(w.w_rgb).clone()))
}
