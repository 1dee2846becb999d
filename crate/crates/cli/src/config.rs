//! Effective-value resolution for command parameters.
//!
//! Precedence, highest first: explicit flag, `PPP_SEED` (seed only),
//! `--paper-defaults`, config file, built-in default. The built-in
//! defaults already match the published constants except for the cloud
//! size, which defaults to a tenth of the published 8e6 points to keep
//! casual runs quick; `--paper-defaults` pins all of them at once.

use std::fs;
use std::path::Path;

use clap::ValueEnum;
use ppp_core::predictor::{centers_range, QuantileMode, SliceSpec, T_LEVELS_DEFAULT};
use ppp_core::{CloudConfig, Error, Result};
use serde::Deserialize;

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_N: usize = 20;
pub const DEFAULT_N_POINTS: u64 = 1_000_000;
pub const PAPER_N_POINTS: u64 = 8_000_000;
pub const DEFAULT_PSI_MIN: f64 = -4.0;
pub const DEFAULT_PSI_MAX: f64 = 4.0;
pub const DEFAULT_CHUNK_SIZE: u64 = 65_536;
pub const DEFAULT_SLICE_WIDTH: f64 = 0.1;
pub const DEFAULT_SLICE_MIN: f64 = -3.0;
pub const DEFAULT_SLICE_MAX: f64 = 3.0;
pub const DEFAULT_MIN_POINTS: usize = 200;

/// Quantile extraction mode as it appears on the command line and in
/// config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    OrderStat,
    Kde,
}

impl From<ModeArg> for QuantileMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::OrderStat => QuantileMode::OrderStat,
            ModeArg::Kde => QuantileMode::Kde,
        }
    }
}

/// Optional overrides read from a TOML config file. Unknown keys are
/// rejected so typos surface instead of silently falling back.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub n_points: Option<u64>,
    pub psi_min: Option<f64>,
    pub psi_max: Option<f64>,
    pub chunk_size: Option<u64>,
    pub slice_width: Option<f64>,
    pub slice_min: Option<f64>,
    pub slice_max: Option<f64>,
    pub min_points: Option<usize>,
    pub t_levels: Option<Vec<f64>>,
    pub quantile_mode: Option<ModeArg>,
}

/// A loaded config file plus the `--paper-defaults` switch.
pub struct Settings {
    file: FileConfig,
    paper: bool,
}

fn pick<T>(flag: Option<T>, paper: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(paper).or(file).unwrap_or(default)
}

impl Settings {
    pub fn load(config: Option<&Path>, paper: bool) -> Result<Self> {
        let file = match config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                toml::from_str(&text).map_err(|e| {
                    Error::InvalidInput(format!("config file {}: {e}", path.display()))
                })?
            }
            None => FileConfig::default(),
        };
        Ok(Self { file, paper })
    }

    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(seed) = flag {
            return Ok(seed);
        }
        if let Ok(text) = std::env::var("PPP_SEED") {
            return text
                .trim()
                .parse()
                .map_err(|e| Error::InvalidInput(format!("PPP_SEED: {e}")));
        }
        Ok(self.file.seed.unwrap_or(DEFAULT_SEED))
    }

    pub fn n(&self, flag: Option<usize>) -> usize {
        pick(flag, self.paper.then_some(DEFAULT_N), self.file.n, DEFAULT_N)
    }

    pub fn n_points(&self, flag: Option<u64>) -> u64 {
        pick(
            flag,
            self.paper.then_some(PAPER_N_POINTS),
            self.file.n_points,
            DEFAULT_N_POINTS,
        )
    }

    pub fn psi_range(&self, min: Option<f64>, max: Option<f64>) -> (f64, f64) {
        (
            pick(
                min,
                self.paper.then_some(DEFAULT_PSI_MIN),
                self.file.psi_min,
                DEFAULT_PSI_MIN,
            ),
            pick(
                max,
                self.paper.then_some(DEFAULT_PSI_MAX),
                self.file.psi_max,
                DEFAULT_PSI_MAX,
            ),
        )
    }

    pub fn chunk_size(&self, flag: Option<u64>) -> u64 {
        pick(flag, None, self.file.chunk_size, DEFAULT_CHUNK_SIZE)
    }

    pub fn cloud_config(
        &self,
        n_points: Option<u64>,
        psi_min: Option<f64>,
        psi_max: Option<f64>,
        n: Option<usize>,
        seed: Option<u64>,
        chunk_size: Option<u64>,
    ) -> Result<CloudConfig> {
        let (psi_min, psi_max) = self.psi_range(psi_min, psi_max);
        Ok(CloudConfig {
            n_points: self.n_points(n_points),
            psi_min,
            psi_max,
            n: self.n(n),
            seed: self.seed(seed)?,
            chunk_size: self.chunk_size(chunk_size),
        })
    }

    pub fn slice_spec(
        &self,
        width: Option<f64>,
        min: Option<f64>,
        max: Option<f64>,
        min_points: Option<usize>,
    ) -> Result<SliceSpec> {
        let width = pick(
            width,
            self.paper.then_some(DEFAULT_SLICE_WIDTH),
            self.file.slice_width,
            DEFAULT_SLICE_WIDTH,
        );
        let lo = pick(
            min,
            self.paper.then_some(DEFAULT_SLICE_MIN),
            self.file.slice_min,
            DEFAULT_SLICE_MIN,
        );
        let hi = pick(
            max,
            self.paper.then_some(DEFAULT_SLICE_MAX),
            self.file.slice_max,
            DEFAULT_SLICE_MAX,
        );
        if !(lo < hi) {
            return Err(Error::InvalidInput(format!(
                "slice range [{lo}, {hi}] is empty"
            )));
        }
        let spec = SliceSpec {
            width,
            centers: centers_range(lo, hi, width),
            min_points: pick(min_points, None, self.file.min_points, DEFAULT_MIN_POINTS),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn t_levels(&self, flag: Option<&[f64]>) -> Vec<f64> {
        if let Some(ts) = flag {
            return ts.to_vec();
        }
        if self.paper {
            return T_LEVELS_DEFAULT.to_vec();
        }
        self.file
            .t_levels
            .clone()
            .unwrap_or_else(|| T_LEVELS_DEFAULT.to_vec())
    }

    pub fn quantile_mode(&self, flag: Option<ModeArg>) -> QuantileMode {
        pick(
            flag,
            self.paper.then_some(ModeArg::OrderStat),
            self.file.quantile_mode,
            ModeArg::OrderStat,
        )
        .into()
    }
}

/// Parses a comma-separated list of recurrence multiples.
pub fn parse_t_list(text: &str) -> std::result::Result<Vec<f64>, String> {
    let ts: Vec<f64> = text
        .split(',')
        .map(|part| part.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    if ts.is_empty() {
        return Err("empty list".into());
    }
    Ok(ts)
}
