use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvMap;

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $(t if t == $text.to_ascii_lowercase() => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} '{other}' (expected one of: {})",
                        stringify!($name).to_ascii_lowercase(),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

named_enum!(
    /// Network size / stream selection.
    Variant { S => "S", Sf => "Sf", L => "L", Lf => "Lf" }
);

named_enum!(
    /// Which colour representation steers the bottleneck refinement.
    Guidance { None => "none", Rgb => "rgb", Lab => "lab", Hsv => "hsv" }
);

named_enum!(
    /// How guidance features are merged with the encoder features.
    Fusion { Concat => "concat", Cdffa => "cdffa" }
);

named_enum!(
    /// Wide-context feature extractor attached to the decoders.
    ContextBackbone { Tiny => "tiny", Large => "large", None => "none" }
);

named_enum!(
    /// Scaling applied to guidance maps before they enter the network.
    GuidanceNorm { Unit => "unit", Raw => "raw" }
);

impl Variant {
    pub fn frequency_stream(self) -> bool {
        matches!(self, Variant::Sf | Variant::Lf)
    }

    pub fn is_large(self) -> bool {
        matches!(self, Variant::L | Variant::Lf)
    }

    pub fn default_backbone(self) -> ContextBackbone {
        if self.is_large() {
            ContextBackbone::Large
        } else {
            ContextBackbone::Tiny
        }
    }
}

impl ContextBackbone {
    /// Channel widths of the three ConvNeXt-style stages.
    pub fn dims(self) -> Option<[usize; 3]> {
        match self {
            ContextBackbone::Tiny => Some([8, 16, 32]),
            ContextBackbone::Large => Some([32, 64, 128]),
            ContextBackbone::None => None,
        }
    }

    pub fn depths(self) -> Option<[usize; 3]> {
        match self {
            ContextBackbone::Tiny => Some([1, 1, 1]),
            ContextBackbone::Large => Some([2, 2, 2]),
            ContextBackbone::None => None,
        }
    }

    /// Total downsampling of the context features.
    pub const FACTOR: usize = 16;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub guidance: Guidance,
    pub fusion: Fusion,
    pub stages: usize,
    pub base_width: usize,
    pub context_backbone: ContextBackbone,
    pub guidance_norm: GuidanceNorm,
    pub retinex_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Sf)
    }
}

impl ModelConfig {
    /// Desk-scale defaults for a variant: three stages, width 16, HSV
    /// guidance fused with CDFFA.
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            guidance: Guidance::Hsv,
            fusion: Fusion::Cdffa,
            stages: 3,
            base_width: 16,
            context_backbone: variant.default_backbone(),
            guidance_norm: GuidanceNorm::Unit,
            retinex_eps: crate::retinex::DEFAULT_EPS,
            seed: 0,
        }
    }

    pub fn with_guidance(mut self, guidance: Guidance, fusion: Fusion) -> Self {
        self.guidance = guidance;
        self.fusion = fusion;
        self
    }

    pub fn with_width(mut self, base_width: usize, stages: usize) -> Self {
        self.base_width = base_width;
        self.stages = stages;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.variant.is_large(), self.context_backbone) {
            (true, ContextBackbone::Large) | (false, ContextBackbone::Tiny | ContextBackbone::None) => {}
            (true, b) => {
                return Err(Error::config(format!("variant {} requires the large backbone, got {b}", self.variant)))
            }
            (false, b) => {
                return Err(Error::config(format!("variant {} cannot use the {b} backbone", self.variant)))
            }
        }
        if !(1..=5).contains(&self.stages) {
            return Err(Error::config(format!("stages must be in 1..=5, got {}", self.stages)));
        }
        if self.base_width < 2 {
            return Err(Error::config(format!("base_width must be at least 2, got {}", self.base_width)));
        }
        if !(self.retinex_eps > 0.0 && self.retinex_eps < 1.0) {
            return Err(Error::config(format!("retinex_eps must be in (0,1), got {}", self.retinex_eps)));
        }
        Ok(())
    }

    /// Fusion actually used: without guidance the fusion mode has no effect.
    pub fn effective_fusion(&self) -> Option<Fusion> {
        (self.guidance != Guidance::None).then_some(self.fusion)
    }

    /// Channel width at encoder depth `k` (0 = full resolution).
    pub fn width_at(&self, k: usize) -> usize {
        self.base_width << k
    }

    /// Spatial multiple a forward pass needs before padding kicks in.
    pub fn size_multiple(&self) -> usize {
        let m = 1 << self.stages;
        if self.context_backbone == ContextBackbone::None {
            m
        } else {
            m.max(ContextBackbone::FACTOR)
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("variant", self.variant);
        kv.set("guidance", self.guidance);
        kv.set("fusion", self.fusion);
        kv.set("stages", self.stages);
        kv.set("base_width", self.base_width);
        kv.set("context_backbone", self.context_backbone);
        kv.set("guidance_norm", self.guidance_norm);
        kv.set("retinex_eps", self.retinex_eps);
        kv.set("seed", self.seed);
        kv
    }

    /// Reads a config; absent keys take the defaults of the given variant.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let variant: Variant = kv.parse_or("variant", Variant::Sf)?;
        let d = Self::for_variant(variant);
        let cfg = Self {
            variant,
            guidance: kv.parse_or("guidance", d.guidance)?,
            fusion: kv.parse_or("fusion", d.fusion)?,
            stages: kv.parse_or("stages", d.stages)?,
            base_width: kv.parse_or("base_width", d.base_width)?,
            context_backbone: kv.parse_or("context_backbone", d.context_backbone)?,
            guidance_norm: kv.parse_or("guidance_norm", d.guidance_norm)?,
            retinex_eps: kv.parse_or("retinex_eps", d.retinex_eps)?,
            seed: kv.parse_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
