use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mupar_core::coordcheck::MatrixKind;
use mupar_core::parametrize::Scheme;
use mupar_core::transfer::primer::BoundedFn;
use mupar_core::transfer::{ExperimentSpec, HpPoint, Metric, ScalePoint, Search};
use mupar_core::{Error, Result};

/// Everything a subcommand needs. Sections a subcommand does not use may be
/// omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand this file was written for; checked when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// Overrides the scheme of the model template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<Search>,
    /// Proxy scale for sweeps and transfers, fixed scale otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<ScalePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ScalePoint>,
    /// Width multipliers for multi-width sweeps and width scans.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub widths: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub metric: Metric,
    /// Fixed HP point for width scans and reverse transfer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hp: Option<HpPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordcheck: Option<CoordCheckSection>,
    #[serde(default)]
    pub transfer: TransferSection,
    #[serde(default)]
    pub widthscan: WidthScanSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reverse: Option<ReverseSection>,
    #[serde(default)]
    pub primer: PrimerSection,
    #[serde(default)]
    pub lawcheck: LawCheckSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordCheckSection {
    /// Absolute widths; each must be a multiple of the template's base.
    pub widths: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_seq_len() -> usize {
    32
}

fn default_tol() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    /// Also copy the SP-tuned proxy HP to the target under SP.
    #[serde(default)]
    pub naive_sp: bool,
    /// Also grid search the target directly.
    #[serde(default)]
    pub oracle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthScanSection {
    /// Steps at which loss is compared; empty means the last step.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    #[serde(default = "default_band")]
    pub band: f64,
}

fn default_band() -> f64 {
    0.02
}

impl Default for WidthScanSection {
    fn default() -> Self {
        Self {
            checkpoints: Vec::new(),
            band: default_band(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReverseSection {
    pub from_width: usize,
    pub to_width: usize,
    /// Reference loss at the destination; searched with `search` if absent.
    #[serde(default)]
    pub optimum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimerSection {
    #[serde(default = "default_primer_fn")]
    pub f: BoundedFn,
    #[serde(default = "default_primer_n")]
    pub n: Vec<usize>,
    #[serde(default = "default_primer_samples")]
    pub samples: usize,
    #[serde(default)]
    pub grid: AlphaGrid,
    /// Unscaled values of the other HPs; when set, only the first is tuned.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fixed: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_primer_fn() -> BoundedFn {
    BoundedFn::Well
}

fn default_primer_n() -> Vec<usize> {
    vec![64, 256, 1024]
}

fn default_primer_samples() -> usize {
    100_000
}

impl Default for PrimerSection {
    fn default() -> Self {
        Self {
            f: default_primer_fn(),
            n: default_primer_n(),
            samples: default_primer_samples(),
            grid: AlphaGrid::default(),
            fixed: Vec::new(),
            seed: 0,
        }
    }
}

/// `points` evenly spaced values from `lo` to `hi` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 4.0,
            points: 81,
        }
    }
}

impl AlphaGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if self.points < 2 || !(self.lo < self.hi) {
            return Err(Error::Config(
                "primer grid needs lo < hi and at least 2 points".into(),
            ));
        }
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        Ok((0..self.points)
            .map(|i| self.lo + i as f64 * step)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawCheckSection {
    #[serde(default = "default_law_cases")]
    pub cases: Vec<LawCase>,
    #[serde(default = "default_law_n")]
    pub n: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawCase {
    pub kind: MatrixKind,
    pub correlated: bool,
}

fn default_law_cases() -> Vec<LawCase> {
    vec![
        LawCase {
            kind: MatrixKind::Gaussian,
            correlated: false,
        },
        LawCase {
            kind: MatrixKind::TensorProduct,
            correlated: true,
        },
        LawCase {
            kind: MatrixKind::Vector,
            correlated: true,
        },
    ]
}

fn default_law_n() -> Vec<usize> {
    (7..=13).map(|k| 1 << k).collect()
}

fn default_reps() -> usize {
    100
}

impl Default for LawCheckSection {
    fn default() -> Self {
        Self {
            cases: default_law_cases(),
            n: default_law_n(),
            reps: default_reps(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn experiment(&self) -> Result<&ExperimentSpec> {
        self.experiment
            .as_ref()
            .ok_or_else(|| missing("experiment"))
    }

    pub fn search(&self) -> Result<&Search> {
        self.search.as_ref().ok_or_else(|| missing("search"))
    }

    pub fn scale(&self) -> Result<ScalePoint> {
        self.scale.ok_or_else(|| missing("scale"))
    }

    pub fn target(&self) -> Result<ScalePoint> {
        self.target.ok_or_else(|| missing("target"))
    }

    pub fn hp(&self) -> Result<&HpPoint> {
        self.hp.as_ref().ok_or_else(|| missing("hp"))
    }

    pub fn coordcheck(&self) -> Result<&CoordCheckSection> {
        self.coordcheck
            .as_ref()
            .ok_or_else(|| missing("coordcheck"))
    }

    pub fn reverse(&self) -> Result<&ReverseSection> {
        self.reverse.as_ref().ok_or_else(|| missing("reverse"))
    }

    pub fn widths(&self) -> Result<&[usize]> {
        if self.widths.is_empty() {
            return Err(missing("widths"));
        }
        Ok(&self.widths)
    }
}

fn missing(section: &str) -> Error {
    Error::Config(format!("config is missing `{section}`"))
}
