//! Experiment-matrix vocabulary shared by training, fusion and reporting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square input resolution in pixels. Only the five studied sizes exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Resolution(u32);

impl Resolution {
    pub const SUPPORTED: [u32; 5] = [64, 128, 224, 448, 768];
    pub const R64: Resolution = Resolution(64);
    pub const R128: Resolution = Resolution(128);
    pub const R224: Resolution = Resolution(224);
    pub const R448: Resolution = Resolution(448);
    pub const R768: Resolution = Resolution(768);

    pub fn new(px: u32) -> Result<Self> {
        if Self::SUPPORTED.contains(&px) {
            Ok(Self(px))
        } else {
            Err(Error::Config(format!(
                "resolution {px} not supported (expected one of {:?})",
                Self::SUPPORTED
            )))
        }
    }

    pub fn all() -> [Resolution; 5] {
        Self::SUPPORTED.map(Resolution)
    }

    pub fn px(self) -> u32 {
        self.0
    }

    pub fn side(self) -> usize {
        self.0 as usize
    }

    /// Whether the resolution takes part in the cross-resolution fusion level.
    /// 64 px is excluded.
    pub fn in_multi_resolution_fusion(self) -> bool {
        self.0 >= 128
    }
}

impl TryFrom<u32> for Resolution {
    type Error = Error;
    fn try_from(v: u32) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Resolution> for u32 {
    fn from(r: Resolution) -> u32 {
        r.0
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "resnet18")]
    ResNet18,
    #[serde(rename = "resnet50")]
    ResNet50,
    #[serde(rename = "densenet121")]
    DenseNet121,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::ResNet18, Architecture::ResNet50, Architecture::DenseNet121];

    pub fn id(self) -> &'static str {
        match self {
            Architecture::ResNet18 => "resnet18",
            Architecture::ResNet50 => "resnet50",
            Architecture::DenseNet121 => "densenet121",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::ResNet18 => "ResNet-18",
            Architecture::ResNet50 => "ResNet-50",
            Architecture::DenseNet121 => "DenseNet-121",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|a| a.id() == norm)
            .ok_or_else(|| Error::Config(format!("unsupported architecture {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "sgdm")]
    Sgdm,
    #[serde(rename = "rmsprop")]
    RmsProp,
    #[serde(rename = "adam")]
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Sgdm, OptimizerKind::RmsProp, OptimizerKind::Adam];

    pub fn id(self) -> &'static str {
        match self {
            OptimizerKind::Sgdm => "sgdm",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            OptimizerKind::Sgdm => "SGDM",
            OptimizerKind::RmsProp => "RMSProp",
            OptimizerKind::Adam => "Adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|o| o.id() == norm)
            .ok_or_else(|| Error::Config(format!("unsupported optimiser {s:?}")))
    }
}

/// One training cell of the run matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub architecture: Architecture,
    pub resolution: Resolution,
    pub optimizer: OptimizerKind,
    pub repeat: u32,
}

impl Cell {
    /// `<arch>_<R>_<optimiser>_r<repeat>`, e.g. `resnet18_128_sgdm_r1`.
    pub fn run_id(&self) -> String {
        format!("{}_{}_{}_r{}", self.architecture, self.resolution, self.optimizer, self.repeat)
    }

    pub fn parse_run_id(id: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed run id {id:?}"));
        let parts: Vec<&str> = id.split('_').collect();
        if parts.len() != 4 || !parts[3].starts_with('r') {
            return Err(bad());
        }
        Ok(Cell {
            architecture: parts[0].parse()?,
            resolution: Resolution::new(parts[1].parse().map_err(|_| bad())?)?,
            optimizer: parts[2].parse()?,
            repeat: parts[3][1..].parse().map_err(|_| bad())?,
        })
    }
}

/// Axes of the run matrix; cells are their Cartesian product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixAxes {
    pub architectures: Vec<Architecture>,
    pub resolutions: Vec<Resolution>,
    pub optimizers: Vec<OptimizerKind>,
    pub repeats: Vec<u32>,
}

impl MatrixAxes {
    /// 3 architectures x 5 resolutions x 3 optimisers x 3 repeats.
    pub fn full() -> Self {
        Self {
            architectures: Architecture::ALL.to_vec(),
            resolutions: Resolution::all().to_vec(),
            optimizers: OptimizerKind::ALL.to_vec(),
            repeats: vec![1, 2, 3],
        }
    }

    /// Sorted, deduplicated copy; rejects empty axes and repeat index 0.
    pub fn normalized(&self) -> Result<Self> {
        fn norm<T: Ord + Clone>(v: &[T], name: &str) -> Result<Vec<T>> {
            let mut v = v.to_vec();
            v.sort();
            v.dedup();
            if v.is_empty() {
                return Err(Error::Config(format!("matrix axis {name} is empty")));
            }
            Ok(v)
        }
        let repeats = norm(&self.repeats, "repeats")?;
        if repeats.contains(&0) {
            return Err(Error::Config("repeat indices are 1-based".into()));
        }
        Ok(Self {
            architectures: norm(&self.architectures, "architectures")?,
            resolutions: norm(&self.resolutions, "resolutions")?,
            optimizers: norm(&self.optimizers, "optimizers")?,
            repeats,
        })
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &architecture in &self.architectures {
            for &resolution in &self.resolutions {
                for &optimizer in &self.optimizers {
                    for &repeat in &self.repeats {
                        out.push(Cell { architecture, resolution, optimizer, repeat });
                    }
                }
            }
        }
        out
    }

    /// Cells whose predictions feed the three-level ensemble (resolution >= 128).
    pub fn ensemble_cells(&self) -> Vec<Cell> {
        self.cells().into_iter().filter(|c| c.resolution.in_multi_resolution_fusion()).collect()
    }

    /// Runs fused at level 1 for one (architecture, resolution).
    pub fn level1_cells(&self, architecture: Architecture, resolution: Resolution) -> Vec<Cell> {
        self.cells()
            .into_iter()
            .filter(|c| c.architecture == architecture && c.resolution == resolution)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_plan_counts() {
        let p = MatrixAxes::full();
        assert_eq!(p.cells().len(), 135);
        assert_eq!(p.ensemble_cells().len(), 108);
        assert_eq!(p.level1_cells(Architecture::ResNet18, Resolution::R128).len(), 9);
    }

    #[test]
    fn run_id_roundtrip() {
        for c in MatrixAxes::full().cells() {
            assert_eq!(Cell::parse_run_id(&c.run_id()).unwrap(), c);
        }
        assert!(Cell::parse_run_id("resnet18_100_sgdm_r1").is_err());
    }

    #[test]
    fn parse_names() {
        assert_eq!("ResNet-50".parse::<Architecture>().unwrap(), Architecture::ResNet50);
        assert_eq!("DenseNet121".parse::<Architecture>().unwrap(), Architecture::DenseNet121);
        assert_eq!("RMSProp".parse::<OptimizerKind>().unwrap(), OptimizerKind::RmsProp);
        assert!("vgg16".parse::<Architecture>().is_err());
        assert!(Resolution::new(256).is_err());
    }

    #[test]
    fn toy_plan_counts_distinct_ids() {
        let axes = MatrixAxes {
            architectures: vec![Architecture::ResNet18, Architecture::DenseNet121],
            resolutions: vec![Resolution::R64, Resolution::R128],
            optimizers: vec![OptimizerKind::Sgdm, OptimizerKind::Adam],
            repeats: vec![1, 2],
        };
        let ids: std::collections::BTreeSet<_> = axes.cells().iter().map(Cell::run_id).collect();
        assert_eq!(ids.len(), 16);
    }
}
