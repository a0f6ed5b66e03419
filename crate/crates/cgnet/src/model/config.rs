//! Structural configuration of a single context-guided block and of the
//! whole network, including every ablation switch.

use crate::error::{Error, Result};

/// Residual connection style. Local adds the block input to the joint
/// feature before the global gate; Global adds it to the gated output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Residual {
    None,
    Local,
    Global,
}

impl std::fmt::Display for Residual {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Residual::None => write!(f, "none"),
            Residual::Local => write!(f, "lrl"),
            Residual::Global => write!(f, "grl"),
        }
    }
}

impl std::str::FromStr for Residual {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Residual::None),
            "lrl" => Ok(Residual::Local),
            "grl" => Ok(Residual::Global),
            _ => Err(Error::Config(format!("unknown residual mode '{s}'"))),
        }
    }
}

/// Where the dilated surrounding-context branch is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurMode {
    None,
    /// Only the last block of stage 3.
    Single,
    Full,
}

impl std::fmt::Display for SurMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SurMode::None => write!(f, "none"),
            SurMode::Single => write!(f, "single"),
            SurMode::Full => write!(f, "full"),
        }
    }
}

impl std::str::FromStr for SurMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SurMode::None),
            "single" => Ok(SurMode::Single),
            "full" => Ok(SurMode::Full),
            _ => Err(Error::Config(format!("unknown sur mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Prelu,
}

impl std::fmt::Display for ActKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActKind::Relu => write!(f, "relu"),
            ActKind::Prelu => write!(f, "prelu"),
        }
    }
}

impl std::str::FromStr for ActKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActKind::Relu),
            "prelu" => Ok(ActKind::Prelu),
            _ => Err(Error::Config(format!("unknown activation '{s}'"))),
        }
    }
}

/// Full description of one context-guided block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CgBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
    pub downsample: bool,
    pub residual: Residual,
    pub use_sur: bool,
    pub use_glo: bool,
    pub interchannel_1x1: bool,
    pub glo_reduction: usize,
    pub activation: ActKind,
}

impl CgBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.out_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "block out_channels {} must be even",
                self.out_channels
            )));
        }
        if self.in_channels == 0 || self.dilation == 0 {
            return Err(Error::Config("block extents must be positive".into()));
        }
        if self.glo_reduction == 0 || !self.out_channels.is_multiple_of(self.glo_reduction) {
            return Err(Error::Config(format!(
                "glo_reduction {} must divide out_channels {}",
                self.glo_reduction, self.out_channels
            )));
        }
        if self.residual != Residual::None && self.downsample {
            return Err(Error::Config(
                "downsampling blocks cannot carry a residual connection".into(),
            ));
        }
        if self.residual == Residual::Global && self.in_channels != self.out_channels {
            return Err(Error::Config(format!(
                "global residual needs in == out channels, got {} -> {}",
                self.in_channels, self.out_channels
            )));
        }
        if self.residual == Residual::Local && self.in_channels != self.out_channels {
            return Err(Error::Config(format!(
                "local residual needs in == out channels, got {} -> {}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }
}

/// Structural description of the whole network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub num_classes: usize,
    /// Block count in stage 2 (M) and stage 3 (N).
    pub blocks_stage2: usize,
    pub blocks_stage3: usize,
    /// Channel widths of stages 1..3.
    pub stage_channels: [usize; 3],
    /// Dilation rates of stage 2 and stage 3.
    pub dilations: [usize; 2],
    pub input_injection: bool,
    pub sur_mode: SurMode,
    pub use_glo: bool,
    pub glo_reduction: usize,
    pub residual: Residual,
    pub activation: ActKind,
    pub interchannel_1x1: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_classes: 19,
            blocks_stage2: 3,
            blocks_stage3: 21,
            stage_channels: [32, 64, 128],
            dilations: [2, 4],
            input_injection: true,
            sur_mode: SurMode::Full,
            use_glo: true,
            glo_reduction: 16,
            residual: Residual::Global,
            activation: ActKind::Prelu,
            interchannel_1x1: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes {} must be >= 2",
                self.num_classes
            )));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("num_classes must fit in a byte label".into()));
        }
        if self.blocks_stage2 < 1 || self.blocks_stage3 < 1 {
            return Err(Error::Config("M and N must be >= 1".into()));
        }
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 || c % 2 != 0 {
                return Err(Error::Config(format!(
                    "stage {} channels {c} must be positive and even",
                    i + 1
                )));
            }
        }
        for &d in &self.dilations {
            if d == 0 {
                return Err(Error::Config("dilations must be >= 1".into()));
            }
        }
        if self.glo_reduction == 0
            || !self.stage_channels[1].is_multiple_of(self.glo_reduction)
            || !self.stage_channels[2].is_multiple_of(self.glo_reduction)
        {
            return Err(Error::Config(format!(
                "glo_reduction {} must divide stage 2/3 channels {}/{}",
                self.glo_reduction, self.stage_channels[1], self.stage_channels[2]
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        NetworkConfig::default().validate().unwrap();
    }

    #[test]
    fn odd_channels_rejected() {
        let cfg = NetworkConfig {
            stage_channels: [32, 63, 128],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grl_needs_equal_channels() {
        let cfg = CgBlockConfig {
            in_channels: 32,
            out_channels: 64,
            dilation: 2,
            downsample: false,
            residual: Residual::Global,
            use_sur: true,
            use_glo: true,
            interchannel_1x1: false,
            glo_reduction: 16,
            activation: ActKind::Prelu,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn downsample_forbids_residual() {
        let cfg = CgBlockConfig {
            in_channels: 64,
            out_channels: 64,
            dilation: 2,
            downsample: true,
            residual: Residual::Global,
            use_sur: true,
            use_glo: true,
            interchannel_1x1: false,
            glo_reduction: 16,
            activation: ActKind::Prelu,
        };
        assert!(cfg.validate().is_err());
    }
}
