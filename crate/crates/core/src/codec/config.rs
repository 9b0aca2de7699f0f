use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Spatial reduction from image to code plane.
pub const DOWNSAMPLING: usize = 16;

/// How each iteration's decoder output becomes a reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReconstructionMode {
    /// `x̂_t = clamp(Dec(b_t) + 0.5)`: every iteration decodes the full image.
    OneShot,
    /// `x̂_t = clamp(x̂_{t-1} + Dec(b_t))`: decoder outputs accumulate.
    Additive,
}

impl ReconstructionMode {
    pub fn as_u8(self) -> u8 {
        match self {
            ReconstructionMode::OneShot => 0,
            ReconstructionMode::Additive => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ReconstructionMode::OneShot),
            1 => Ok(ReconstructionMode::Additive),
            _ => Err(Error::Malformed {
                what: "reconstruction mode",
                detail: format!("unknown code {v}"),
            }),
        }
    }
}

impl fmt::Display for ReconstructionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReconstructionMode::OneShot => "one_shot",
            ReconstructionMode::Additive => "additive",
        })
    }
}

impl FromStr for ReconstructionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_shot" | "one-shot" => Ok(ReconstructionMode::OneShot),
            "additive" => Ok(ReconstructionMode::Additive),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

/// Channel plan of the encoder, binarizer and decoder.
///
/// Kernel sizes and strides are fixed by the architecture:
///
/// * analysis block: 3×3 conv, stride 1, RGB → `analysis_channels`, then GDN
/// * front conv: 3×3, stride 2, `analysis_channels` → `analysis_channels`
/// * three encoder LSTM cells, 3×3 input conv with stride 2, 1×1 hidden conv
/// * binarizer: 1×1 conv to `code_channels`, tanh, sign
/// * synthesis block: 1×1 conv `code_channels` → `synthesis_channels`, then iGDN
/// * four decoder LSTM cells (3×3 input conv, stride 1), each followed by
///   depth-to-space with block 2, so cell `k+1` reads `decoder_hidden[k] / 4`
///   channels
/// * output conv: 3×3 from `decoder_hidden[3] / 4` to RGB, then tanh
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub patch_size: usize,
    pub analysis_channels: usize,
    pub encoder_hidden: [usize; 3],
    pub code_channels: usize,
    pub synthesis_channels: usize,
    pub decoder_hidden: [usize; 4],
    /// Disabling removes both the GDN and the iGDN step.
    pub use_gdn: bool,
    pub mode: ReconstructionMode,
    pub iterations: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            patch_size: 32,
            analysis_channels: 64,
            encoder_hidden: [256, 512, 512],
            code_channels: 38,
            synthesis_channels: 512,
            decoder_hidden: [512, 512, 256, 128],
            use_gdn: true,
            mode: ReconstructionMode::OneShot,
            iterations: 8,
        }
    }
}

impl ArchitectureConfig {
    /// The default plan with every internal width divided by `divisor`.
    /// Code channels and RGB endpoints are kept.
    pub fn narrowed(divisor: usize) -> Result<Self> {
        if divisor == 0 {
            return Err(Error::Config("width divisor must be positive".into()));
        }
        let d = ArchitectureConfig::default();
        let cfg = ArchitectureConfig {
            analysis_channels: d.analysis_channels / divisor,
            encoder_hidden: d.encoder_hidden.map(|c| c / divisor),
            synthesis_channels: d.synthesis_channels / divisor,
            decoder_hidden: d.decoder_hidden.map(|c| c / divisor),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("analysis_channels", self.analysis_channels),
            ("code_channels", self.code_channels),
            ("synthesis_channels", self.synthesis_channels),
            ("iterations", self.iterations),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.encoder_hidden.contains(&0) {
            return Err(Error::Config("encoder_hidden entries must be positive".into()));
        }
        if self.decoder_hidden.iter().any(|&c| c == 0 || c % 4 != 0) {
            return Err(Error::Config(
                "decoder_hidden entries must be positive multiples of 4".into(),
            ));
        }
        if self.patch_size % DOWNSAMPLING != 0 {
            return Err(Error::Config(format!(
                "patch_size must be a multiple of {DOWNSAMPLING}"
            )));
        }
        if self.iterations > u16::MAX as usize || self.code_channels > u16::MAX as usize {
            return Err(Error::Config("iterations and code_channels must fit in u16".into()));
        }
        Ok(())
    }

    /// Input channels of each decoder cell.
    pub fn decoder_inputs(&self) -> [usize; 4] {
        let h = self.decoder_hidden;
        [self.synthesis_channels, h[0] / 4, h[1] / 4, h[2] / 4]
    }

    pub fn output_in_channels(&self) -> usize {
        self.decoder_hidden[3] / 4
    }

    /// Code plane shape for an `h × w` image.
    pub fn code_shape(&self, batch: usize, h: usize, w: usize) -> [usize; 4] {
        [batch, self.code_channels, h / DOWNSAMPLING, w / DOWNSAMPLING]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_endpoints() {
        let c = ArchitectureConfig::default();
        c.validate().unwrap();
        assert_eq!(c.code_channels, 38);
        assert_eq!(c.encoder_hidden[2], 512);
        assert_eq!(c.decoder_inputs(), [512, 128, 128, 64]);
        assert_eq!(c.output_in_channels(), 32);
        assert_eq!(c.code_shape(1, 32, 32), [1, 38, 2, 2]);
    }

    #[test]
    fn narrowed_keeps_codes() {
        let c = ArchitectureConfig::narrowed(8).unwrap();
        assert_eq!(c.analysis_channels, 8);
        assert_eq!(c.code_channels, 38);
        assert_eq!(c.decoder_hidden, [64, 64, 32, 16]);
        assert!(ArchitectureConfig::narrowed(0).is_err());
        assert!(ArchitectureConfig::narrowed(64).is_err());
    }

    #[test]
    fn rejects_bad_plans() {
        let mut c = ArchitectureConfig::default();
        c.patch_size = 24;
        assert!(c.validate().is_err());
        let mut c = ArchitectureConfig::default();
        c.decoder_hidden[1] = 30;
        assert!(c.validate().is_err());
        let mut c = ArchitectureConfig::default();
        c.iterations = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_codes() {
        for m in [ReconstructionMode::OneShot, ReconstructionMode::Additive] {
            assert_eq!(ReconstructionMode::from_u8(m.as_u8()).unwrap(), m);
            assert_eq!(m.to_string().parse::<ReconstructionMode>().unwrap(), m);
        }
        assert!(ReconstructionMode::from_u8(2).is_err());
        assert!("gamma".parse::<ReconstructionMode>().is_err());
    }
}
