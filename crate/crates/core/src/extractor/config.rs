use std::fmt;
use std::str::FromStr;

use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::nn::SincSpec;

macro_rules! component_enum {
    ($(#[$m:meta])* $name:ident, $what:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
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
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::UnknownComponent {
                        what: $what,
                        given: other.to_string(),
                        valid: format!("{{{}}}", [$($text),+].join(", ")),
                    }),
                }
            }
        }
    };
}

component_enum!(
    /// How audio becomes a frame sequence.
    FrontendKind, "frontend", {
        Mel => "mel",
        SincRaw => "sinc_raw",
        PrecomputedFile => "precomputed_file",
    }
);

component_enum!(
    /// Frame-level feature model.
    EncoderKind, "encoder", {
        Tdnn => "tdnn",
        EcapaLite => "ecapa_lite",
        Identity => "identity",
    }
);

component_enum!(
    /// Aggregation from frames to one vector.
    PoolingKind, "pooling", {
        Mean => "mean",
        Stats => "stats",
        AttentiveStats => "attentive_stats",
    }
);

/// One projector layer; `Linear(None)` maps to the embedding dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorLayer {
    Linear(Option<usize>),
    BatchNorm,
    LayerNorm,
    Relu,
    Sigmoid,
}

impl fmt::Display for ProjectorLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProjectorLayer::Linear(Some(n)) => write!(f, "linear:{n}"),
            ProjectorLayer::Linear(None) => f.write_str("linear"),
            ProjectorLayer::BatchNorm => f.write_str("batch_norm"),
            ProjectorLayer::LayerNorm => f.write_str("layer_norm"),
            ProjectorLayer::Relu => f.write_str("relu"),
            ProjectorLayer::Sigmoid => f.write_str("sigmoid"),
        }
    }
}

impl FromStr for ProjectorLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        let layer = match name.trim() {
            "linear" if arg.is_empty() => ProjectorLayer::Linear(None),
            "linear" => ProjectorLayer::Linear(Some(
                arg.trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad linear width {arg:?}")))?,
            )),
            "batch_norm" => ProjectorLayer::BatchNorm,
            "layer_norm" => ProjectorLayer::LayerNorm,
            "relu" => ProjectorLayer::Relu,
            "sigmoid" => ProjectorLayer::Sigmoid,
            other => {
                return Err(Error::UnknownComponent {
                    what: "projector layer",
                    given: other.to_string(),
                    valid: "{linear[:N], batch_norm, layer_norm, relu, sigmoid}".into(),
                })
            }
        };
        if !arg.is_empty() && !matches!(layer, ProjectorLayer::Linear(_)) {
            return Err(Error::Parse(format!("{name} takes no argument")));
        }
        Ok(layer)
    }
}

/// Parses a comma-separated projector description such as `batch_norm, linear`.
pub fn parse_projector(s: &str) -> Result<Vec<ProjectorLayer>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

pub fn format_projector(layers: &[ProjectorLayer]) -> String {
    layers
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Declarative extractor: front-end, encoder, pooling and projector choices.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub frontend: FrontendKind,
    pub sample_rate: u32,
    pub mel: MelConfig,
    /// Filter count, kernel and stride of the `sinc_raw` front-end.
    pub sinc: SincSpec,
    /// Feature width of `precomputed_file` inputs.
    pub feature_dim: usize,
    /// Subtract each feature dimension's mean over time before the encoder.
    pub feature_norm: bool,
    pub encoder: EncoderKind,
    pub channels: usize,
    /// Batch norm after each TDNN layer.
    pub tdnn_post_norm: bool,
    pub se_bottleneck: usize,
    pub pooling: PoolingKind,
    pub attention_hidden: usize,
    pub projector: Vec<ProjectorLayer>,
    pub embed_dim: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendKind::Mel,
            sample_rate: 16000,
            mel: MelConfig::default(),
            sinc: SincSpec::default(),
            feature_dim: 80,
            feature_norm: true,
            encoder: EncoderKind::EcapaLite,
            channels: 128,
            tdnn_post_norm: true,
            se_bottleneck: 32,
            pooling: PoolingKind::AttentiveStats,
            attention_hidden: 64,
            projector: vec![ProjectorLayer::BatchNorm, ProjectorLayer::Linear(None)],
            embed_dim: 192,
        }
    }
}

impl ExtractorConfig {
    /// Width of the front-end output.
    pub fn frontend_dim(&self) -> usize {
        match self.frontend {
            FrontendKind::Mel => self.mel.n_mels,
            FrontendKind::SincRaw => self.sinc.n_filters,
            FrontendKind::PrecomputedFile => self.feature_dim,
        }
    }

    pub fn encoder_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::Identity => self.frontend_dim(),
            EncoderKind::Tdnn | EncoderKind::EcapaLite => self.channels,
        }
    }

    pub fn pooled_dim(&self) -> usize {
        match self.pooling {
            PoolingKind::Mean => self.encoder_dim(),
            PoolingKind::Stats | PoolingKind::AttentiveStats => 2 * self.encoder_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.embed_dim == 0 {
            return fail("embed_dim must be at least 1");
        }
        if self.frontend_dim() == 0 {
            return fail("front-end produces zero-width features");
        }
        if self.encoder != EncoderKind::Identity && self.channels == 0 {
            return fail("encoder channels must be at least 1");
        }
        if self.encoder == EncoderKind::EcapaLite && self.se_bottleneck == 0 {
            return fail("squeeze-excite bottleneck must be at least 1");
        }
        if self.pooling == PoolingKind::AttentiveStats && self.attention_hidden == 0 {
            return fail("attention_hidden must be at least 1");
        }
        if self.frontend == FrontendKind::Mel {
            self.mel.validate(self.sample_rate)?;
        }
        if self.frontend == FrontendKind::SincRaw && self.sinc.sample_rate != self.sample_rate {
            return fail("sinc front-end sample rate differs from the extractor sample rate");
        }
        let mut dim = self.pooled_dim();
        for layer in &self.projector {
            if let ProjectorLayer::Linear(n) = layer {
                dim = n.unwrap_or(self.embed_dim);
                if dim == 0 {
                    return fail("projector linear width must be positive");
                }
            }
        }
        if dim != self.embed_dim {
            return Err(Error::Config(format!(
                "projector ends at width {dim} but embed_dim is {}",
                self.embed_dim
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_encoder_lists_options() {
        let err = "resnet99".parse::<EncoderKind>().unwrap_err();
        let msg = err.to_string();
        for name in ["tdnn", "ecapa_lite", "identity"] {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn projector_parsing() {
        let p = parse_projector("batch_norm, linear:256, relu, linear").unwrap();
        assert_eq!(
            p,
            vec![
                ProjectorLayer::BatchNorm,
                ProjectorLayer::Linear(Some(256)),
                ProjectorLayer::Relu,
                ProjectorLayer::Linear(None)
            ]
        );
        assert_eq!(parse_projector(&format_projector(&p)).unwrap(), p);
        assert!(parse_projector("dropout").is_err());
    }

    #[test]
    fn projector_must_reach_embed_dim() {
        let cfg = ExtractorConfig {
            projector: vec![ProjectorLayer::Linear(Some(10))],
            embed_dim: 12,
            ..ExtractorConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExtractorConfig {
            projector: vec![],
            embed_dim: 256,
            ..ExtractorConfig::default()
        };
        // attentive stats over 128 channels is already 256 wide
        assert!(cfg.validate().is_ok());
    }
}
