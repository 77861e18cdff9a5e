//! Builders for the segmentation search space.
//!
//! The encoder is an EfficientNet-Lite0 style stack of inverted residual
//! blocks reaching 1/32 of the input. The decoder starts with a bottleneck
//! block with squeeze-and-excitation at 1/32 (which also emits a coarse
//! mask), then refines at 1/16, 1/8 and 1/4 with one of three variants and
//! finishes with a x4 bilinear upsample and a sigmoid.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId, TensorId};
use crate::ops::{ActKind, ConvSpec};
use crate::tensor::Shape;
use crate::weights::{WeightError, WeightStore, WeightTensor};

/// Mean subtracted from 8-bit pixel values before inference.
pub const INPUT_MEAN: f32 = 127.5;
/// Divisor applied after mean subtraction; maps 0..=255 to [-1, 1].
pub const INPUT_STD: f32 = 127.5;
pub const INPUT_CHANNELS: usize = 3;
pub const OUTPUT_STRIDE: usize = 32;

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Weights(#[from] WeightError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    BilinearUpsampling,
    ChannelAttention,
    Mlp,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [
        DecoderKind::BilinearUpsampling,
        DecoderKind::ChannelAttention,
        DecoderKind::Mlp,
    ];

    fn short(self) -> &'static str {
        match self {
            DecoderKind::BilinearUpsampling => "bilinear",
            DecoderKind::ChannelAttention => "attention",
            DecoderKind::Mlp => "mlp",
        }
    }
}

/// Spatial convolution used inside the inverted residual blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvType {
    Depthwise,
    /// Group convolution with this many groups.
    Group(usize),
}

/// One point of the architecture search space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelConfig", into = "RawModelConfig")]
pub struct ModelConfig {
    pub resolution: usize,
    pub width_multiplier: f64,
    pub decoder: DecoderKind,
    pub conv_type: ConvType,
    pub se_reduction: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModelConfig {
    resolution: usize,
    width_multiplier: f64,
    decoder: DecoderKind,
    conv_type: String,
    group_size: usize,
    se_reduction: usize,
    seed: u64,
}

impl TryFrom<RawModelConfig> for ModelConfig {
    type Error = ZooError;

    fn try_from(raw: RawModelConfig) -> Result<Self, ZooError> {
        let conv_type = match raw.conv_type.as_str() {
            "depthwise" => ConvType::Depthwise,
            "group" => ConvType::Group(raw.group_size),
            other => return Err(ZooError::Config(format!("unknown conv_type {other:?}"))),
        };
        let cfg = ModelConfig {
            resolution: raw.resolution,
            width_multiplier: raw.width_multiplier,
            decoder: raw.decoder,
            conv_type,
            se_reduction: raw.se_reduction,
            seed: raw.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<ModelConfig> for RawModelConfig {
    fn from(c: ModelConfig) -> Self {
        let (conv_type, group_size) = match c.conv_type {
            ConvType::Depthwise => ("depthwise", 1),
            ConvType::Group(g) => ("group", g),
        };
        RawModelConfig {
            resolution: c.resolution,
            width_multiplier: c.width_multiplier,
            decoder: c.decoder,
            conv_type: conv_type.to_string(),
            group_size,
            se_reduction: c.se_reduction,
            seed: c.seed,
        }
    }
}

impl ModelConfig {
    /// The selected configuration: MLP decoder, group convolution, width 1.0, 512x512.
    pub fn final_choice() -> Self {
        ModelConfig {
            resolution: 512,
            width_multiplier: 1.0,
            decoder: DecoderKind::Mlp,
            conv_type: ConvType::Group(DEFAULT_GROUPS),
            se_reduction: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ZooError> {
        check_spatial(self.resolution, "resolution")?;
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(ZooError::Config(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.se_reduction == 0 {
            return Err(ZooError::Config("se_reduction must be >= 1".into()));
        }
        if self.conv_type == ConvType::Group(0) {
            return Err(ZooError::Config("group count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, ZooError> {
        serde_json::from_str(s).map_err(|e| ZooError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Short comma-free label, e.g. `r512-w1.0-mlp-group16-se4`.
    pub fn label(&self) -> String {
        let conv = match self.conv_type {
            ConvType::Depthwise => "depthwise".to_string(),
            ConvType::Group(g) => format!("group{g}"),
        };
        format!(
            "r{}-w{:.1}-{}-{}-se{}",
            self.resolution,
            self.width_multiplier,
            self.decoder.short(),
            conv,
            self.se_reduction
        )
    }

    /// Channel count for a base (width 1.0) channel count.
    pub fn width(&self, base: usize) -> usize {
        make_divisible(base as f64 * self.width_multiplier, 8)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

pub const DEFAULT_GROUPS: usize = 16;

fn check_spatial(v: usize, what: &str) -> Result<(), ZooError> {
    if v == 0 || !v.is_multiple_of(OUTPUT_STRIDE) {
        return Err(ZooError::Config(format!(
            "{what} {v} must be a positive multiple of {OUTPUT_STRIDE}"
        )));
    }
    Ok(())
}

/// Round to the nearest multiple of `divisor`, never going below 90% of `v`.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut rounded = (((v + d / 2.0) / d).floor() * d).max(d);
    if rounded < 0.9 * v {
        rounded += d;
    }
    rounded as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub repeats: usize,
    /// Output channels before the width multiplier.
    pub channels: usize,
    pub stride: usize,
    pub expansion: usize,
    pub kernel: usize,
}

const fn stage(
    repeats: usize,
    channels: usize,
    stride: usize,
    expansion: usize,
    kernel: usize,
) -> StageSpec {
    StageSpec {
        repeats,
        channels,
        stride,
        expansion,
        kernel,
    }
}

pub const STEM_CHANNELS: usize = 32;
pub const STEM_STRIDE: usize = 2;

/// EfficientNet-Lite0 stages.
pub const ENCODER_STAGES: [StageSpec; 7] = [
    stage(1, 16, 1, 1, 3),
    stage(2, 24, 2, 6, 3),
    stage(2, 40, 2, 6, 5),
    stage(3, 80, 2, 6, 3),
    stage(3, 112, 1, 6, 5),
    stage(4, 192, 2, 6, 5),
    stage(1, 320, 1, 6, 3),
];

/// Decoder knobs the search space leaves open.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderOptions {
    /// 1x1 convolutions per scale in the MLP variant.
    pub mlp_depth: usize,
    /// 1x1 convolutions per scale in the channel-attention variant.
    pub attention_convs: usize,
    /// Expansion ratio of the 1/32 bottleneck head.
    pub head_expansion: usize,
    /// Refinement width is max(min_width, tap_channels / 2).
    pub min_width: usize,
}

impl Default for DecoderOptions {
    fn default() -> Self {
        DecoderOptions {
            mlp_depth: 2,
            attention_convs: 2,
            head_expansion: 2,
            min_width: 8,
        }
    }
}

/// Encoder feature maps keyed by downscale factor.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SkipTaps {
    pub taps: BTreeMap<usize, TensorId>,
}

impl SkipTaps {
    pub const SCALES: [usize; 5] = [2, 4, 8, 16, 32];

    pub fn get(&self, scale: usize) -> Result<TensorId, ZooError> {
        self.taps
            .get(&scale)
            .copied()
            .ok_or_else(|| ZooError::Config(format!("missing encoder tap at 1/{scale}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderOutputs {
    pub mask: TensorId,
    pub coarse_mask: TensorId,
    /// Variant-specific nodes per refinement scale (channel adapters excluded).
    pub refinement: BTreeMap<usize, Vec<NodeId>>,
    pub head: Vec<NodeId>,
}

fn spatial_spec(conv: ConvType, c: usize, k: usize, stride: usize) -> Result<ConvSpec, ZooError> {
    match conv {
        ConvType::Depthwise => Ok(ConvSpec::depthwise(c, k, stride)),
        ConvType::Group(groups) => {
            if groups == 0 || !c.is_multiple_of(groups) {
                return Err(ZooError::Config(format!(
                    "group count {groups} does not divide {c} channels"
                )));
            }
            Ok(ConvSpec::grouped(c, c, k, stride, groups))
        }
    }
}

/// Expand (1x1) -> spatial conv -> project (1x1), with a residual when shapes allow.
#[allow(clippy::too_many_arguments)]
fn inverted_residual(
    g: &mut Graph,
    name: &str,
    x: TensorId,
    cout: usize,
    expansion: usize,
    kernel: usize,
    stride: usize,
    conv: ConvType,
) -> Result<TensorId, ZooError> {
    let cin = g.shape(x)?.c;
    let hidden = cin * expansion;
    let mut t = x;
    if expansion != 1 {
        t = g.conv(
            &format!("{name}.expand"),
            t,
            ConvSpec::pointwise(cin, hidden),
            ActKind::Relu6,
        )?;
    }
    t = g.conv(
        &format!("{name}.spatial"),
        t,
        spatial_spec(conv, hidden, kernel, stride)?,
        ActKind::Relu6,
    )?;
    t = g.conv(
        &format!("{name}.project"),
        t,
        ConvSpec::pointwise(hidden, cout),
        ActKind::Identity,
    )?;
    if stride == 1 && cin == cout {
        t = g.add(&format!("{name}.residual"), x, t)?;
    }
    Ok(t)
}

/// Add the encoder on top of `input` (1, H, W, 3) and return its taps.
pub fn build_encoder(
    g: &mut Graph,
    cfg: &ModelConfig,
    input: TensorId,
) -> Result<SkipTaps, ZooError> {
    cfg.validate()?;
    let s = g.shape(input)?;
    check_spatial(s.h, "input height")?;
    check_spatial(s.w, "input width")?;
    if s.c != INPUT_CHANNELS {
        return Err(ZooError::Config(format!(
            "encoder expects {INPUT_CHANNELS} input channels, got {}",
            s.c
        )));
    }
    let mut taps = SkipTaps::default();
    let mut scale = STEM_STRIDE;
    let mut t = g.conv(
        "enc.stem",
        input,
        ConvSpec::standard(INPUT_CHANNELS, cfg.width(STEM_CHANNELS), 3, STEM_STRIDE),
        ActKind::Relu6,
    )?;
    for (si, st) in ENCODER_STAGES.iter().enumerate() {
        let cout = cfg.width(st.channels);
        for b in 0..st.repeats {
            let stride = if b == 0 { st.stride } else { 1 };
            t = inverted_residual(
                g,
                &format!("enc.s{}.b{}", si + 1, b),
                t,
                cout,
                st.expansion,
                st.kernel,
                stride,
                cfg.conv_type,
            )?;
        }
        scale *= st.stride;
        // the last stage at each scale provides the tap
        taps.taps.insert(scale, t);
    }
    debug_assert_eq!(scale, OUTPUT_STRIDE);
    Ok(taps)
}

/// Add the decoder head, per-scale refinement and the output mask.
pub fn build_decoder(
    g: &mut Graph,
    cfg: &ModelConfig,
    opts: &DecoderOptions,
    taps: &SkipTaps,
) -> Result<DecoderOutputs, ZooError> {
    let tap_ids: Vec<TensorId> = SkipTaps::SCALES
        .iter()
        .map(|&s| taps.get(s))
        .collect::<Result<_, _>>()?;
    let refine_width = |c: usize| (c / 2).max(opts.min_width);
    let deepest = tap_ids[4];
    let c32 = g.shape(deepest)?.c;

    let first = g.nodes().len();
    let hidden = make_divisible((c32 * opts.head_expansion) as f64, 8);
    let mut t = g.conv(
        "dec.head.expand",
        deepest,
        ConvSpec::pointwise(c32, hidden),
        ActKind::Relu6,
    )?;
    t = g.conv(
        "dec.head.spatial",
        t,
        spatial_spec(cfg.conv_type, hidden, 3, 1)?,
        ActKind::Relu6,
    )?;
    se_fits(hidden, cfg.se_reduction)?;
    t = g.squeeze_excite("dec.head.se", t, cfg.se_reduction)?;
    let mut width = refine_width(c32);
    let mut state = g.conv(
        "dec.head.project",
        t,
        ConvSpec::pointwise(hidden, width),
        ActKind::Relu6,
    )?;
    let coarse = g.conv(
        "dec.head.coarse_logits",
        state,
        ConvSpec::pointwise(width, 1),
        ActKind::Identity,
    )?;
    let coarse_mask = g.activation("dec.head.coarse_mask", coarse, ActKind::Sigmoid)?;
    let head = g.nodes()[first..].iter().map(|n| n.id).collect();

    let mut refinement = BTreeMap::new();
    for (&scale, &tap) in [16usize, 8, 4]
        .iter()
        .zip([tap_ids[3], tap_ids[2], tap_ids[1]].iter())
    {
        let p = format!("dec.s{scale}");
        let tap_c = g.shape(tap)?.c;
        let w = refine_width(tap_c);
        let state_in = g.conv(
            &format!("{p}.state"),
            state,
            ConvSpec::pointwise(width, w),
            ActKind::Identity,
        )?;
        let skip = g.conv(
            &format!("{p}.skip"),
            tap,
            ConvSpec::pointwise(tap_c, w),
            ActKind::Identity,
        )?;

        let start = g.nodes().len();
        let mut up = g.upsample(&format!("{p}.up"), state_in, 2)?;
        if cfg.decoder == DecoderKind::ChannelAttention {
            se_fits(w, cfg.se_reduction)?;
            up = g.squeeze_excite(&format!("{p}.se"), up, cfg.se_reduction)?;
        }
        let sum = g.add(&format!("{p}.add"), up, skip)?;
        let mut t = g.activation(&format!("{p}.act"), sum, ActKind::Relu6)?;
        match cfg.decoder {
            DecoderKind::BilinearUpsampling => {}
            DecoderKind::Mlp => {
                for i in 0..opts.mlp_depth {
                    t = g.conv(
                        &format!("{p}.mlp{i}"),
                        t,
                        ConvSpec::pointwise(w, w),
                        ActKind::Relu6,
                    )?;
                }
            }
            DecoderKind::ChannelAttention => {
                for i in 0..opts.attention_convs {
                    t = g.conv(
                        &format!("{p}.conv{i}"),
                        t,
                        ConvSpec::pointwise(w, w),
                        ActKind::Relu6,
                    )?;
                }
                t = g.conv(
                    &format!("{p}.dw"),
                    t,
                    ConvSpec::depthwise(w, 3, 1),
                    ActKind::Relu6,
                )?;
            }
        }
        refinement.insert(scale, g.nodes()[start..].iter().map(|n| n.id).collect());
        state = t;
        width = w;
    }

    let logits = g.conv(
        "dec.logits",
        state,
        ConvSpec::pointwise(width, 1),
        ActKind::Identity,
    )?;
    let full = g.upsample("dec.upsample_out", logits, 4)?;
    let mask = g.activation("dec.mask", full, ActKind::Sigmoid)?;
    Ok(DecoderOutputs {
        mask,
        coarse_mask,
        refinement,
        head,
    })
}

fn se_fits(c: usize, reduction: usize) -> Result<(), ZooError> {
    if !c.is_multiple_of(reduction) {
        return Err(ZooError::Config(format!(
            "se_reduction {reduction} does not divide {c} decoder channels"
        )));
    }
    Ok(())
}

/// Graph structure (no weight values) at the given input size.
pub fn build_graph_for(
    cfg: &ModelConfig,
    opts: &DecoderOptions,
    height: usize,
    width: usize,
) -> Result<(Graph, DecoderOutputs), ZooError> {
    cfg.validate()?;
    check_spatial(height, "input height")?;
    check_spatial(width, "input width")?;
    let mut g = Graph::new();
    let shape = Shape::new(1, height, width, INPUT_CHANNELS)
        .map_err(|e| ZooError::Config(e.to_string()))?;
    let input = g.add_input("image", shape)?;
    let taps = build_encoder(&mut g, cfg, input)?;
    let out = build_decoder(&mut g, cfg, opts, &taps)?;
    g.mark_output(out.mask)?;
    g.mark_output(out.coarse_mask)?;
    Ok((g, out))
}

/// Graph structure at `cfg.resolution`, without weight values.
pub fn build_graph(cfg: &ModelConfig) -> Result<Graph, ZooError> {
    Ok(build_graph_for(
        cfg,
        &DecoderOptions::default(),
        cfg.resolution,
        cfg.resolution,
    )?
    .0)
}

/// Graph with deterministic weights drawn from `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<Graph, ZooError> {
    let mut g = build_graph(cfg)?;
    g.weights = init_weights(&g, cfg.seed)?;
    Ok(g)
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// He-uniform weights keyed by name, biases uniform in +-0.05.
///
/// Each tensor draws from its own stream seeded by `seed` and the weight
/// name, so values do not depend on graph order.
pub fn init_weights(g: &Graph, seed: u64) -> Result<WeightStore, ZooError> {
    let mut store = WeightStore::new();
    for (name, dims) in g.weight_decls() {
        let len: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
        let bound = if dims.len() == 1 {
            0.05
        } else {
            let fan_in: usize = dims[1..].iter().product();
            let gain = if name.contains("logits") {
                0.25 * 3.0
            } else {
                6.0
            };
            (gain / fan_in as f64).sqrt() as f32
        };
        let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        store.insert(name.clone(), WeightTensor::new(dims.clone(), data))?;
    }
    Ok(store)
}
