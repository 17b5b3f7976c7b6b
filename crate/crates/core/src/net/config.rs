use crate::error::{GaitError, Result};
use crate::kernels::{window_len, ConvGeometry};
use crate::mask::{MaskKind, MaskStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlclVariant {
    /// global + local, elementwise sum
    A,
    /// global on top of local, height doubles
    B,
}

/// What follows the GLCL layers of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTail {
    /// Strided temporal convolution, kernel `(kernel, 1, 1)`, stride `(stride, 1, 1)`.
    Lta { kernel: usize, stride: usize },
    /// 2 x 2 spatial max pooling.
    SpatialPool,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub channels: usize,
    pub variants: Vec<GlclVariant>,
    pub tail: StageTail,
}

impl StageConfig {
    pub fn glcl_count(&self) -> usize {
        self.variants.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadMode {
    /// `alpha * max + beta * mean` over each strip, alpha and beta in {0, 1}.
    MaxAvg { alpha: f64, beta: f64 },
    /// Generalized mean with a learnable exponent.
    Gem { p_init: f64 },
}

/// Nonlinearity applied after every extractor convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Leaky(f64),
    /// Only for testing the linear identities of the masked extractor.
    Identity,
}

/// Local branch used in eval mode, where random masks are switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalLocal {
    /// the trivial pair (0, 1)
    NoMask,
    /// fixed partition into `n` horizontal parts
    FixedParts(usize),
}

/// Convolution description for one extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn same(in_channels: usize, out_channels: usize, k: usize, has_bias: bool) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            geometry: ConvGeometry::same([k; 3]),
            has_bias,
        }
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [a, b, c] = self.geometry.kernel;
        [self.out_channels, self.in_channels, a, b, c]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.geometry.kernel.iter().product::<usize>()
    }
}

pub const LEAKY_SLOPE: f64 = 0.01;
pub const GEM_P_INIT: f64 = 6.5;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
    pub mask: MaskStrategy,
    pub eval_local: EvalLocal,
    /// Training clip length and frame size `(T, H, W)`.
    pub input: (usize, usize, usize),
    pub kernel: usize,
    pub activation: Activation,
    pub embed_channels: usize,
    pub head: HeadMode,
}

/// Extents after each stage plus the embedding layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeChain {
    /// `[C, T, H, W]` after each stage.
    pub stages: Vec<[usize; 4]>,
    pub strips: usize,
    pub embed_channels: usize,
}

fn variants(count: usize, last_b: bool) -> Vec<GlclVariant> {
    let mut v = vec![GlclVariant::A; count];
    if last_b {
        if let Some(l) = v.last_mut() {
            *l = GlclVariant::B;
        }
    }
    v
}

impl BackboneConfig {
    /// Three stages with (1, 1, 2) GLCL layers; LTA after stage 1, spatial
    /// pooling after stage 2. `channels` is `(64, 128, 128)` at full size.
    pub fn casia_b(channels: [usize; 3], final_b: bool) -> Self {
        let lta = StageTail::Lta { kernel: 3, stride: 3 };
        BackboneConfig {
            stages: vec![
                StageConfig { channels: channels[0], variants: variants(1, false), tail: lta },
                StageConfig { channels: channels[1], variants: variants(1, false), tail: StageTail::SpatialPool },
                StageConfig { channels: channels[2], variants: variants(2, final_b), tail: StageTail::None },
            ],
            mask: MaskStrategy::new(MaskKind::PartH, 0.5).expect("valid ratio"),
            eval_local: EvalLocal::NoMask,
            input: (30, 64, 44),
            kernel: 3,
            activation: Activation::Leaky(LEAKY_SLOPE),
            embed_channels: channels[2],
            head: HeadMode::Gem { p_init: GEM_P_INIT },
        }
    }

    /// Four stages with (2, 2, 2, 4) GLCL layers and channels
    /// (64, 128, 256, 512); LTA after stage 2, spatial pooling after stage 3.
    pub fn large(final_b: bool) -> Self {
        let mut cfg = Self::casia_b([64, 128, 256], final_b);
        cfg.stages = vec![
            StageConfig { channels: 64, variants: variants(2, false), tail: StageTail::None },
            StageConfig { channels: 128, variants: variants(2, false), tail: StageTail::Lta { kernel: 3, stride: 3 } },
            StageConfig { channels: 256, variants: variants(2, false), tail: StageTail::SpatialPool },
            StageConfig { channels: 512, variants: variants(4, final_b), tail: StageTail::None },
        ];
        cfg.embed_channels = 512;
        cfg
    }

    /// Looks up a named profile: `casia-b`, `large`, or `small` (8/16/16).
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "casia-b" => Ok(Self::casia_b([64, 128, 128], true)),
            "large" => Ok(Self::large(true)),
            "small" => Ok(Self::casia_b([8, 16, 16], true)),
            other => Err(GaitError::Config(format!(
                "unknown profile '{other}' (expected casia-b, large or small)"
            ))),
        }
    }

    /// Overrides the per-stage channel counts; the embedding width follows
    /// the last stage.
    pub fn with_channels(mut self, channels: &[usize]) -> Result<Self> {
        if channels.len() != self.stages.len() {
            return Err(GaitError::Config(format!(
                "{} channel counts for {} stages",
                channels.len(),
                self.stages.len()
            )));
        }
        for (s, &c) in self.stages.iter_mut().zip(channels) {
            s.channels = c;
        }
        self.embed_channels = *channels.last().unwrap();
        Ok(self)
    }

    /// Moves the GLCL-B layer on or off the final position.
    pub fn set_final_variant(&mut self, variant: GlclVariant) {
        if let Some(v) = self.stages.last_mut().and_then(|s| s.variants.last_mut()) {
            *v = variant;
        }
    }

    pub fn final_variant(&self) -> Option<GlclVariant> {
        self.stages.last().and_then(|s| s.variants.last().copied())
    }

    pub fn global_spec(&self, in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec::same(in_channels, out_channels, self.kernel, true)
    }

    /// The local extractor shares one bias-free weight set across its branches.
    pub fn local_spec(&self, in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec::same(in_channels, out_channels, self.kernel, false)
    }

    pub fn lta_spec(&self, channels: usize, kernel: usize, stride: usize) -> ConvSpec {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            geometry: ConvGeometry::new([kernel, 1, 1], [stride, 1, 1], [0, 0, 0]),
            has_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(GaitError::Config("backbone has no stages".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(GaitError::Config(format!("kernel {} must be odd to keep extents", self.kernel)));
        }
        let lta = self
            .stages
            .iter()
            .filter(|s| matches!(s.tail, StageTail::Lta { .. }))
            .count();
        if lta != 1 {
            return Err(GaitError::Config(format!("exactly one stage must use LTA, found {lta}")));
        }
        let total: usize = self.stages.iter().map(StageConfig::glcl_count).sum();
        let mut seen = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if s.variants.is_empty() || s.channels == 0 {
                return Err(GaitError::Config(format!("stage {} is empty", i + 1)));
            }
            for v in &s.variants {
                seen += 1;
                if *v == GlclVariant::B && seen != total {
                    return Err(GaitError::Config(format!(
                        "GLCL-B is only allowed as the final layer (stage {})",
                        i + 1
                    )));
                }
            }
        }
        if self.embed_channels == 0 {
            return Err(GaitError::Config("embedding width must be positive".into()));
        }
        match self.head {
            HeadMode::MaxAvg { alpha, beta } => {
                let bit = |v: f64| v == 0.0 || v == 1.0;
                if !bit(alpha) || !bit(beta) || alpha + beta == 0.0 {
                    return Err(GaitError::Config(format!(
                        "max/avg head needs alpha, beta in {{0, 1}} not both 0 (got {alpha}, {beta})"
                    )));
                }
            }
            HeadMode::Gem { p_init } => {
                if p_init.is_nan() || p_init <= 0.0 {
                    return Err(GaitError::Config(format!("GeM p must be positive, got {p_init}")));
                }
            }
        }
        if let EvalLocal::FixedParts(0) = self.eval_local {
            return Err(GaitError::Config("fixed partition needs n >= 1".into()));
        }
        self.shape_chain(self.input.0).map(|_| ())
    }

    /// Extents after each stage for a `T`-frame input, computed without
    /// running the network. Also checks that fixed partitions divide every
    /// GLCL input height.
    pub fn shape_chain(&self, t: usize) -> Result<ShapeChain> {
        let (_, mut h, mut w) = self.input;
        let mut t = t;
        let parts = match (self.mask.kind, self.eval_local) {
            (MaskKind::FixedNPart(n), _) | (_, EvalLocal::FixedParts(n)) => Some(n),
            _ => None,
        };
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let stage_err = |detail: String| GaitError::dim("backbone", format!("stage {}: {detail}", i + 1));
            for v in &s.variants {
                if let Some(n) = parts {
                    if h % n != 0 {
                        return Err(stage_err(format!("{n} fixed parts do not divide height {h}")));
                    }
                }
                if *v == GlclVariant::B {
                    h *= 2;
                }
            }
            match s.tail {
                StageTail::Lta { kernel, stride } => {
                    t = window_len(t, kernel, stride, 0).ok_or_else(|| {
                        stage_err(format!("LTA kernel {kernel} longer than {t} frames"))
                    })?;
                }
                StageTail::SpatialPool => {
                    if h < 2 || w < 2 {
                        return Err(stage_err(format!("cannot pool {h}x{w}")));
                    }
                    h /= 2;
                    w /= 2;
                }
                StageTail::None => {}
            }
            out.push([s.channels, t, h, w]);
        }
        Ok(ShapeChain {
            stages: out,
            strips: h,
            embed_channels: self.embed_channels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn casia_b_shape_chain() {
        let mut cfg = BackboneConfig::profile("casia-b").unwrap();
        cfg.set_final_variant(GlclVariant::A);
        let chain = cfg.shape_chain(30).unwrap();
        assert_eq!(chain.stages, vec![[64, 10, 64, 44], [128, 10, 32, 22], [128, 10, 32, 22]]);
        assert_eq!(chain.strips, 32);
        cfg.set_final_variant(GlclVariant::B);
        let chain = cfg.shape_chain(30).unwrap();
        assert_eq!(chain.stages[2], [128, 10, 64, 22]);
        assert_eq!(chain.strips, 64);
    }

    #[test]
    fn large_profile_is_valid() {
        let cfg = BackboneConfig::profile("large").unwrap();
        cfg.validate().unwrap();
        let counts: Vec<usize> = cfg.stages.iter().map(StageConfig::glcl_count).collect();
        assert_eq!(counts, vec![2, 2, 2, 4]);
        assert!(matches!(cfg.stages[1].tail, StageTail::Lta { .. }));
    }

    #[test]
    fn rejects_misplaced_b_and_double_lta() {
        let mut cfg = BackboneConfig::profile("small").unwrap();
        cfg.stages[0].variants[0] = GlclVariant::B;
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::profile("small").unwrap();
        cfg.stages[1].tail = StageTail::Lta { kernel: 3, stride: 3 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fixed_parts_must_divide_heights() {
        let mut cfg = BackboneConfig::profile("small").unwrap();
        cfg.mask = MaskStrategy::new(MaskKind::FixedNPart(2), 0.0).unwrap();
        cfg.validate().unwrap();
        cfg.mask = MaskStrategy::new(MaskKind::FixedNPart(3), 0.0).unwrap();
        assert!(cfg.validate().is_err());
    }
}
