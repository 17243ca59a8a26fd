//! The run configuration document.

use std::path::{Path, PathBuf};

use oi_assim::osse::{grid_with_ocean_patch, SynthesisParams, DEFAULT_OCEAN_FRACTION};
use oi_assim::rng::{derive_seed, stream};
use oi_assim::{CovarianceParams, GridGeometry, GridSpec, ObsErrorModel, OiConfig, Sigma2};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub synthesis: SynthesisConfig,
    pub oi: OiSection,
    pub n_steps: usize,
    pub n_stations: usize,
    /// Standard deviation of the pseudo-observation noise, Kelvin.
    pub noise_sigma: f64,
    pub sweep: SweepConfig,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: GridConfig::default(),
            synthesis: SynthesisConfig::default(),
            oi: OiSection::default(),
            n_steps: 12,
            n_stations: 500,
            noise_sigma: 0.5,
            sweep: SweepConfig::default(),
            output_dir: PathBuf::from("out"),
            master_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    pub lat0: f64,
    pub lon0: f64,
    pub d_lat: f64,
    pub d_lon: f64,
    pub relaxation_width: usize,
    pub ocean_fraction: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        let g = oi_assim::osse::default_geometry();
        GridConfig {
            n_lat: g.n_lat,
            n_lon: g.n_lon,
            lat0: g.lat0,
            lon0: g.lon0,
            d_lat: g.d_lat,
            d_lon: g.d_lon,
            relaxation_width: g.relaxation_width,
            ocean_fraction: DEFAULT_OCEAN_FRACTION,
        }
    }
}

impl GridConfig {
    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            n_lat: self.n_lat,
            n_lon: self.n_lon,
            lat0: self.lat0,
            lon0: self.lon0,
            d_lat: self.d_lat,
            d_lon: self.d_lon,
            relaxation_width: self.relaxation_width,
        }
    }
}

/// Synthesis knobs; the seed comes from `master_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub n_modes: usize,
    pub amp: f64,
    pub base: f64,
    pub bias_amp: f64,
    pub bias_corr_len: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        let p = SynthesisParams::default();
        SynthesisConfig {
            n_modes: p.n_modes,
            amp: p.amp,
            base: p.base,
            bias_amp: p.bias_amp,
            bias_corr_len: p.bias_corr_len,
        }
    }
}

/// `"estimate"` asks for the per-cell variance of forecast minus nature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma2Setting {
    Scalar(f64),
    Keyword(Sigma2Keyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sigma2Keyword {
    #[serde(rename = "estimate")]
    Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OiSection {
    pub sigma2: Sigma2Setting,
    pub corr_len: f64,
    /// Defaults to three correlation lengths.
    pub scanning_radius: Option<f64>,
    pub max_influential: usize,
    /// Defaults to `noise_sigma²`.
    pub obs_sigma2: Option<f64>,
    pub jitter: f64,
}

impl Default for OiSection {
    fn default() -> Self {
        OiSection {
            sigma2: Sigma2Setting::Keyword(Sigma2Keyword::Estimate),
            corr_len: 3.0,
            scanning_radius: None,
            max_influential: oi_assim::covariance::DEFAULT_MAX_INFLUENTIAL,
            obs_sigma2: None,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub l_values: Vec<f64>,
    pub n_values: Vec<usize>,
    /// Network/noise realizations averaged per cell, seeded from
    /// `master_seed`, `master_seed + 1`, ...
    pub n_seeds: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            l_values: (1..=10).map(f64::from).collect(),
            n_values: vec![100, 200],
            n_seeds: 5,
        }
    }
}

/// Every seed a run uses, all derived from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub ocean_mask: u64,
    pub synthesis: u64,
    pub stations: u64,
    pub noise: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self, CliError> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("{source}: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Checks every component invariant by building the components.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: oi_assim::Error| CliError::Config(e.to_string());
        self.grid.geometry().validate().map_err(bad)?;
        if !(0.0..1.0).contains(&self.grid.ocean_fraction) {
            return Err(CliError::Config(format!(
                "grid.ocean_fraction must be in [0, 1), got {}",
                self.grid.ocean_fraction
            )));
        }
        self.synthesis_params().validate().map_err(bad)?;
        self.oi_config(None).map_err(bad)?;
        if self.n_steps == 0 {
            return Err(CliError::Config("n_steps must be at least 1".into()));
        }
        if self.n_stations == 0 {
            return Err(CliError::Config("n_stations must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CliError::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.sweep.l_values.is_empty()
            || self.sweep.n_values.is_empty()
            || self.sweep.n_seeds == 0
        {
            return Err(CliError::Config(
                "sweep axes and n_seeds must be non-empty".into(),
            ));
        }
        if let Some(l) = self
            .sweep
            .l_values
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(CliError::Config(format!(
                "sweep.l_values must be positive, got {l}"
            )));
        }
        if self.sweep.n_values.contains(&0) {
            return Err(CliError::Config("sweep.n_values must be positive".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        let m = self.master_seed;
        Seeds {
            master: m,
            ocean_mask: m,
            synthesis: derive_seed(m, stream::SYNTHESIS, 0),
            stations: derive_seed(m, stream::STATIONS, 0),
            noise: derive_seed(m, stream::NOISE, 0),
        }
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        (0..self.sweep.n_seeds)
            .map(|k| self.master_seed.wrapping_add(k))
            .collect()
    }

    pub fn build_grid(&self) -> oi_assim::Result<GridSpec> {
        grid_with_ocean_patch(
            self.grid.geometry(),
            self.grid.ocean_fraction,
            self.seeds().ocean_mask,
        )
    }

    pub fn synthesis_params(&self) -> SynthesisParams {
        let s = &self.synthesis;
        SynthesisParams {
            n_modes: s.n_modes,
            amp: s.amp,
            base: s.base,
            bias_amp: s.bias_amp,
            bias_corr_len: s.bias_corr_len,
            seed: self.seeds().synthesis,
        }
    }

    pub fn estimates_sigma2(&self) -> bool {
        matches!(
            self.oi.sigma2,
            Sigma2Setting::Keyword(Sigma2Keyword::Estimate)
        )
    }

    /// The analysis configuration. `estimated` supplies the background
    /// variance when the config asks for an estimate; without it a
    /// placeholder of 1 is used (enough for validation).
    pub fn oi_config(&self, estimated: Option<Sigma2>) -> oi_assim::Result<OiConfig> {
        let sigma2 = match (self.oi.sigma2, estimated) {
            (Sigma2Setting::Scalar(v), _) => Sigma2::Scalar(v),
            (Sigma2Setting::Keyword(_), Some(s)) => s,
            (Sigma2Setting::Keyword(_), None) => Sigma2::Scalar(1.0),
        };
        let radius = self
            .oi
            .scanning_radius
            .unwrap_or(oi_assim::covariance::RADIUS_PER_CORR_LEN * self.oi.corr_len);
        let cov = CovarianceParams::new(
            sigma2,
            [self.oi.corr_len; 2],
            radius,
            self.oi.max_influential,
        )?;
        let obs_sigma2 = self
            .oi
            .obs_sigma2
            .unwrap_or(self.noise_sigma * self.noise_sigma);
        OiConfig::new(cov, ObsErrorModel::new(obs_sigma2)?, self.oi.jitter)
    }
}
