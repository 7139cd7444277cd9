//! Declarative description of the encoder and the two decoder branches.
//!
//! Channel counts below are the full-width values; every count is scaled by
//! the spec's width multiplier (rounded, at least 1) when a spec is built.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::DepthRange;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    LowDepthRange,
    HighDepthRange,
}

impl Variant {
    /// Total spatial downsampling of the encoder.
    pub fn downsampling(self) -> usize {
        match self {
            Variant::LowDepthRange => 32,
            Variant::HighDepthRange => 4,
        }
    }

    pub fn for_range(range: DepthRange) -> Self {
        match range {
            DepthRange::Low => Variant::LowDepthRange,
            DepthRange::High => Variant::HighDepthRange,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Convbn,
    ConvbnDw,
    Upproj,
    UpprojCon,
    Sam,
    OutputHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub out_channels: usize,
    pub repeat: usize,
    pub depthwise: bool,
}

impl LayerSpec {
    fn convbn(kernel: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Convbn,
            kernel,
            stride,
            dilation: 1,
            out_channels,
            repeat: 1,
            depthwise: false,
        }
    }

    fn dw(out_channels: usize, stride: usize, dilation: usize, repeat: usize) -> Self {
        Self {
            kind: LayerKind::ConvbnDw,
            kernel: 3,
            stride,
            dilation,
            out_channels,
            repeat,
            depthwise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub layers: Vec<LayerSpec>,
}

impl EncoderBlock {
    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride.pow(l.repeat as u32)).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("non-empty block").out_channels
    }
}

/// One decoding stage. An `UpprojCon` stage with both skips disabled is
/// wired exactly like a plain `Upproj` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderStage {
    pub layer: LayerSpec,
    /// Scale difference `t` between input and output resolution.
    pub scale: usize,
    /// Encoder block (0-based) whose output feeds the encoder skip.
    pub skip_encoder: Option<usize>,
    pub skip_rgb: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    #[default]
    Both,
    ClassificationOnly,
    RegressionOnly,
}

impl Branches {
    pub fn has(self, b: Branch) -> bool {
        matches!(
            (self, b),
            (Branches::Both, _)
                | (Branches::ClassificationOnly, Branch::Classification)
                | (Branches::RegressionOnly, Branch::Regression)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkOptions {
    pub width_multiplier: f64,
    pub num_bins: usize,
    pub skip_encoding: bool,
    pub skip_rgb: bool,
    /// 1-based decoding position of the SAM block (3, 4 or 5), if any.
    pub sam_position: Option<usize>,
    pub branches: Branches,
    /// Initial bias of the regression head, meters.
    pub regression_bias: f64,
    pub seed: u64,
}

impl NetworkOptions {
    pub fn new(variant: Variant) -> Self {
        Self {
            width_multiplier: 1.0,
            num_bins: 80,
            skip_encoding: true,
            skip_rgb: true,
            sam_position: match variant {
                Variant::LowDepthRange => None,
                Variant::HighDepthRange => Some(3),
            },
            branches: Branches::Both,
            regression_bias: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub width_multiplier: f64,
    pub num_bins: usize,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderStage>,
    pub head_kernel: usize,
    pub branches: Branches,
    pub regression_bias: f64,
    pub seed: u64,
}

fn scaled(c: usize, m: f64) -> Result<usize> {
    let s = (c as f64 * m).round() as usize;
    if s == 0 {
        return Err(Error::Shape(format!(
            "width multiplier {m} reduces a {c}-channel layer to zero channels"
        )));
    }
    Ok(s)
}

/// Encoder blocks 1-5 for a variant at width multiplier `m`.
pub fn build_encoder(variant: Variant, m: f64) -> Result<Vec<EncoderBlock>> {
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::InvalidInput(format!("width multiplier must be in (0, 1], got {m}")));
    }
    let c = |v| scaled(v, m);
    let down = match variant {
        Variant::LowDepthRange => 2,
        Variant::HighDepthRange => 1,
    };
    let last = match variant {
        Variant::LowDepthRange => 512,
        Variant::HighDepthRange => 128,
    };
    let convbn = LayerSpec::convbn;
    let dw = LayerSpec::dw;
    Ok(vec![
        EncoderBlock {
            layers: vec![convbn(3, c(32)?, 2), convbn(3, c(64)?, 1)],
        },
        EncoderBlock {
            layers: vec![dw(c(64)?, 1, 1, 3), dw(c(128)?, 2, 1, 1)],
        },
        EncoderBlock {
            layers: vec![dw(c(128)?, 1, 1, 3), dw(c(256)?, down, 1, 1)],
        },
        EncoderBlock {
            layers: vec![dw(c(32)?, 1, 2, 12), dw(c(256)?, down, 1, 1)],
        },
        EncoderBlock {
            layers: vec![dw(c(256)?, down, 1, 1), convbn(1, c(last)?, 1)],
        },
    ])
}

fn upproj_stage(out: usize, scale: usize, skip_encoder: Option<usize>, skip_rgb: bool) -> DecoderStage {
    let con = skip_encoder.is_some() || skip_rgb;
    DecoderStage {
        layer: LayerSpec {
            kind: if con { LayerKind::UpprojCon } else { LayerKind::Upproj },
            kernel: 5,
            stride: 1,
            dilation: 1,
            out_channels: out,
            repeat: 1,
            depthwise: false,
        },
        scale,
        skip_encoder,
        skip_rgb,
    }
}

fn sam_stage(channels: usize) -> DecoderStage {
    DecoderStage {
        layer: LayerSpec {
            kind: LayerKind::Sam,
            kernel: 3,
            stride: 1,
            dilation: 1,
            out_channels: channels,
            repeat: 3,
            depthwise: false,
        },
        scale: 1,
        skip_encoder: None,
        skip_rgb: false,
    }
}

/// Decoding stages shared by both branches. Each upsampling stage halves the
/// channel count; the last one is a plain upproj that feeds the output head.
pub fn build_decoder(variant: Variant, encoder: &[EncoderBlock], opts: &NetworkOptions) -> Result<Vec<DecoderStage>> {
    // (scale, encoder skip source) per upsampling stage
    let plan: &[(usize, Option<usize>)] = match variant {
        Variant::LowDepthRange => &[(2, Some(3)), (2, Some(2)), (2, Some(1)), (2, Some(0)), (2, None)],
        Variant::HighDepthRange => &[(1, Some(3)), (1, Some(2)), (2, Some(0)), (2, None)],
    };
    let mut channels = encoder.last().expect("encoder").out_channels();
    let mut stages = Vec::new();
    for (i, &(scale, skip)) in plan.iter().enumerate() {
        let out = channels / 2;
        if out == 0 {
            return Err(Error::Shape(format!(
                "decoder stage {} cannot halve {channels} channel(s); raise the width multiplier",
                i + 1
            )));
        }
        let last = i + 1 == plan.len();
        stages.push(upproj_stage(
            out,
            scale,
            skip.filter(|_| opts.skip_encoding && !last),
            opts.skip_rgb && !last,
        ));
        channels = out;
    }
    if let Some(p) = opts.sam_position {
        if !(3..=stages.len() + 1).contains(&p) {
            return Err(Error::InvalidInput(format!(
                "SAM position must be in 3..={}, got {p}",
                stages.len() + 1
            )));
        }
        let c = stages[p - 2].layer.out_channels;
        stages.insert(p - 1, sam_stage(c));
    }
    Ok(stages)
}

/// Static shapes of every block for an input of `height x width`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeReport {
    /// `[C, H, W]` after each encoder block.
    pub encoder: Vec<[usize; 3]>,
    /// `[C, H, W]` after each decoding stage (before the head).
    pub decoder: Vec<[usize; 3]>,
    pub cls_logits: [usize; 3],
    pub reg_depth: [usize; 3],
}

impl NetworkSpec {
    pub fn build(variant: Variant, opts: &NetworkOptions) -> Result<Self> {
        if opts.num_bins == 0 {
            return Err(Error::InvalidInput("num_bins must be >= 1".into()));
        }
        let encoder = build_encoder(variant, opts.width_multiplier)?;
        let decoder = build_decoder(variant, &encoder, opts)?;
        let spec = Self {
            variant,
            width_multiplier: opts.width_multiplier,
            num_bins: opts.num_bins,
            encoder,
            decoder,
            head_kernel: 3,
            branches: opts.branches,
            regression_bias: opts.regression_bias,
            seed: opts.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn head_channels(&self, branch: Branch) -> usize {
        match branch {
            Branch::Classification => self.num_bins + 1,
            Branch::Regression => 1,
        }
    }

    /// Cumulative downsampling factor after each encoder block.
    pub fn encoder_factors(&self) -> Vec<usize> {
        self.encoder
            .iter()
            .scan(1, |f, b| {
                *f *= b.stride();
                Some(*f)
            })
            .collect()
    }

    /// Checks channel counts and that every skip source has the resolution of
    /// the stage it feeds.
    pub fn validate(&self) -> Result<()> {
        let factors = self.encoder_factors();
        let total = *factors.last().ok_or_else(|| Error::Wiring("empty encoder".into()))?;
        if total != self.variant.downsampling() {
            return Err(Error::Wiring(format!(
                "encoder downsamples by {total}, variant expects {}",
                self.variant.downsampling()
            )));
        }
        let mut factor = total;
        let mut channels = self.encoder.last().unwrap().out_channels();
        for (i, st) in self.decoder.iter().enumerate() {
            if st.scale == 0 || factor % st.scale != 0 {
                return Err(Error::Wiring(format!("stage {} scale {} overshoots input resolution", i + 1, st.scale)));
            }
            factor /= st.scale;
            if st.layer.kind == LayerKind::Sam && st.layer.out_channels != channels {
                return Err(Error::Wiring(format!(
                    "SAM stage {} configured for {} channels but receives {channels}",
                    i + 1,
                    st.layer.out_channels
                )));
            }
            if let Some(src) = st.skip_encoder {
                let f = *factors.get(src).ok_or_else(|| {
                    Error::Wiring(format!("stage {} skips from missing encoder block {}", i + 1, src + 1))
                })?;
                if f != factor {
                    return Err(Error::Wiring(format!(
                        "stage {} runs at 1/{factor} resolution but encoder block {} is at 1/{f}",
                        i + 1,
                        src + 1
                    )));
                }
            }
            channels = st.layer.out_channels;
            if channels == 0 {
                return Err(Error::Shape(format!("stage {} has zero channels", i + 1)));
            }
        }
        if factor != 1 {
            return Err(Error::Wiring(format!("decoder ends at 1/{factor} resolution")));
        }
        Ok(())
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let f = self.variant.downsampling();
        if height == 0 || height % f != 0 {
            return Err(Error::Shape(format!(
                "input height {height} is not a positive multiple of {f} required by {:?}",
                self.variant
            )));
        }
        if width == 0 || width % f != 0 {
            return Err(Error::Shape(format!(
                "input width {width} is not a positive multiple of {f} required by {:?}",
                self.variant
            )));
        }
        Ok(())
    }

    pub fn infer_shapes(&self, height: usize, width: usize) -> Result<ShapeReport> {
        self.check_input(height, width)?;
        let mut encoder = Vec::new();
        let (mut h, mut w) = (height, width);
        for b in &self.encoder {
            h /= b.stride();
            w /= b.stride();
            encoder.push([b.out_channels(), h, w]);
        }
        let mut decoder = Vec::new();
        for st in &self.decoder {
            h *= st.scale;
            w *= st.scale;
            decoder.push([st.layer.out_channels, h, w]);
        }
        Ok(ShapeReport {
            encoder,
            decoder,
            cls_logits: [self.num_bins + 1, h, w],
            reg_depth: [1, h, w],
        })
    }

    /// Trainable parameter count of encoder block `block` (0-based), derived
    /// from the spec alone. Batch-norm contributes `2 * C` per normalization.
    pub fn encoder_block_params(&self, block: usize) -> usize {
        let mut c_in = if block == 0 { 3 } else { self.encoder[block - 1].out_channels() };
        let mut total = 0;
        for l in &self.encoder[block].layers {
            for _ in 0..l.repeat {
                let k2 = l.kernel * l.kernel;
                if l.depthwise {
                    total += c_in * k2 + 2 * c_in + c_in * l.out_channels + 2 * l.out_channels;
                } else {
                    total += c_in * l.out_channels * k2 + 2 * l.out_channels;
                }
                c_in = l.out_channels;
            }
        }
        total
    }

    /// Parameter count of the same block if every separable layer were a
    /// single dense convolution with batch norm.
    pub fn encoder_block_dense_params(&self, block: usize) -> usize {
        let mut c_in = if block == 0 { 3 } else { self.encoder[block - 1].out_channels() };
        let mut total = 0;
        for l in &self.encoder[block].layers {
            for _ in 0..l.repeat {
                total += c_in * l.out_channels * l.kernel * l.kernel + 2 * l.out_channels;
                c_in = l.out_channels;
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(variant: Variant, m: f64) -> NetworkSpec {
        NetworkSpec::build(variant, &NetworkOptions { width_multiplier: m, num_bins: 10, ..NetworkOptions::new(variant) }).unwrap()
    }

    #[test]
    fn low_shapes_follow_tables() {
        let s = spec(Variant::LowDepthRange, 1.0);
        let r = s.infer_shapes(64, 64).unwrap();
        assert_eq!(
            r.encoder,
            vec![[64, 32, 32], [128, 16, 16], [256, 8, 8], [256, 4, 4], [512, 2, 2]]
        );
        assert_eq!(
            r.decoder,
            vec![[256, 4, 4], [128, 8, 8], [64, 16, 16], [32, 32, 32], [16, 64, 64]]
        );
        assert_eq!(r.cls_logits, [11, 64, 64]);
        assert_eq!(r.reg_depth, [1, 64, 64]);
    }

    #[test]
    fn high_shapes_follow_tables() {
        let s = spec(Variant::HighDepthRange, 1.0);
        let r = s.infer_shapes(64, 64).unwrap();
        assert_eq!(r.encoder.last().unwrap(), &[128, 16, 16]);
        assert_eq!(r.encoder[2], [256, 16, 16]);
        assert_eq!(r.decoder[0], [64, 16, 16]);
        assert_eq!(r.decoder[1], [32, 16, 16]);
        assert_eq!(r.decoder[2], [32, 16, 16]);
        assert_eq!(s.decoder[2].layer.kind, LayerKind::Sam);
        assert_eq!(r.decoder[3], [16, 32, 32]);
        assert_eq!(r.cls_logits, [11, 64, 64]);
    }

    #[test]
    fn divisibility_errors_name_dimension() {
        let s = spec(Variant::LowDepthRange, 0.125);
        match s.infer_shapes(64, 70) {
            Err(Error::Shape(msg)) => assert!(msg.contains("width 70"), "{msg}"),
            other => panic!("{other:?}"),
        }
        match s.infer_shapes(240, 320) {
            Err(Error::Shape(msg)) => assert!(msg.contains("height 240"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let h = spec(Variant::HighDepthRange, 0.125);
        assert!(h.infer_shapes(240, 320).is_ok());
        assert!(h.infer_shapes(66, 64).is_err());
    }

    #[test]
    fn wiring_checks_resolution() {
        let mut s = spec(Variant::LowDepthRange, 0.25);
        s.decoder[0].skip_encoder = Some(2);
        assert!(matches!(s.validate(), Err(Error::Wiring(_))));
        let mut s = spec(Variant::HighDepthRange, 0.25);
        s.decoder[3].skip_encoder = Some(3);
        assert!(matches!(s.validate(), Err(Error::Wiring(_))));
    }

    #[test]
    fn multiplier_limits() {
        assert!(build_encoder(Variant::LowDepthRange, 0.0).is_err());
        assert!(build_encoder(Variant::LowDepthRange, 1.5).is_err());
        let opts = NetworkOptions { width_multiplier: 1.0 / 64.0, ..NetworkOptions::new(Variant::HighDepthRange) };
        assert!(NetworkSpec::build(Variant::HighDepthRange, &opts).is_err());
    }

    #[test]
    fn separable_block_is_cheaper() {
        for m in [1.0, 0.25, 0.125] {
            let s = spec(Variant::LowDepthRange, m);
            assert!(s.encoder_block_params(1) < s.encoder_block_dense_params(1));
        }
        // Block 2 at full width: 3 x (64*9 + 2*64 + 64*64 + 2*64) + (64*9 + 2*64 + 64*128 + 2*128)
        let s = spec(Variant::LowDepthRange, 1.0);
        assert_eq!(s.encoder_block_params(1), 3 * (576 + 128 + 4096 + 128) + (576 + 128 + 8192 + 256));
        assert_eq!(s.encoder_block_dense_params(1), 3 * (64 * 64 * 9 + 128) + (64 * 128 * 9 + 256));
    }

    #[test]
    fn sam_positions() {
        for p in [3, 4, 5] {
            let opts = NetworkOptions { sam_position: Some(p), num_bins: 4, ..NetworkOptions::new(Variant::HighDepthRange) };
            let s = NetworkSpec::build(Variant::HighDepthRange, &opts).unwrap();
            assert_eq!(s.decoder[p - 1].layer.kind, LayerKind::Sam);
            assert_eq!(s.decoder.len(), 5);
            s.infer_shapes(32, 32).unwrap();
        }
        let opts = NetworkOptions { sam_position: None, ..NetworkOptions::new(Variant::HighDepthRange) };
        let s = NetworkSpec::build(Variant::HighDepthRange, &opts).unwrap();
        assert!(s.decoder.iter().all(|d| d.layer.kind != LayerKind::Sam));
        let opts = NetworkOptions { sam_position: Some(6), ..NetworkOptions::new(Variant::HighDepthRange) };
        assert!(NetworkSpec::build(Variant::HighDepthRange, &opts).is_err());
    }

    #[test]
    fn skip_toggles_reduce_to_upproj() {
        let opts = NetworkOptions { skip_encoding: false, skip_rgb: false, ..NetworkOptions::new(Variant::LowDepthRange) };
        let s = NetworkSpec::build(Variant::LowDepthRange, &opts).unwrap();
        assert!(s.decoder.iter().all(|d| d.layer.kind == LayerKind::Upproj));
        let opts = NetworkOptions { skip_encoding: false, ..NetworkOptions::new(Variant::LowDepthRange) };
        let s = NetworkSpec::build(Variant::LowDepthRange, &opts).unwrap();
        assert!(s.decoder[..4].iter().all(|d| d.layer.kind == LayerKind::UpprojCon && d.skip_encoder.is_none() && d.skip_rgb));
    }
}
