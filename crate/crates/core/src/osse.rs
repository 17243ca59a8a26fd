//! Observation system simulation experiments on synthetic fields.
//!
//! A smooth "nature" run stands in for the truth, and the forecast is the
//! nature run plus a time-constant, spatially correlated bias. Stations
//! sample the nature run with white noise; the analysis of the forecast is
//! scored against nature.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{estimate_background_variance, CovarianceParams, ObsErrorModel, Sigma2};
use crate::error::{Error, Result, ResultExt};
use crate::fsv;
use crate::grid::{Cell, Field, FieldSeries, GridGeometry, GridSpec};
use crate::obsnet::{make_pseudo_obs, sample_stations, ObservationBatch, ObservationNetwork};
use crate::oi::{analyze_series, AnalysisResult, OiConfig};
use crate::rng::{derive_seed, rng, stream};
use crate::skill::SkillReport;

/// Parameters of the synthetic nature and forecast runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisParams {
    pub n_modes: usize,
    /// Kelvin.
    pub amp: f64,
    /// Kelvin mean level.
    pub base: f64,
    /// Pointwise standard deviation of the forecast bias, Kelvin.
    pub bias_amp: f64,
    /// Gaussian correlation length of the bias, grid units.
    pub bias_corr_len: f64,
    pub seed: u64,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        SynthesisParams {
            n_modes: 6,
            amp: 3.0,
            base: 280.0,
            bias_amp: 1.0,
            bias_corr_len: 3.0,
            seed: 0,
        }
    }
}

impl SynthesisParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_modes == 0 {
            return Err(Error::InvalidParam("n_modes must be at least 1".into()));
        }
        if !(self.amp >= 0.0 && self.bias_amp >= 0.0) {
            return Err(Error::InvalidParam("amplitudes must be >= 0".into()));
        }
        if !(self.bias_corr_len > 0.0 && self.bias_corr_len.is_finite()) {
            return Err(Error::InvalidParam("bias_corr_len must be positive".into()));
        }
        if !self.base.is_finite() {
            return Err(Error::InvalidParam("base must be finite".into()));
        }
        Ok(())
    }
}

/// Geometry of the default experiment: 100×100 cells of 0.44°, 20-cell
/// relaxation zone.
pub fn default_geometry() -> GridGeometry {
    GridGeometry {
        n_lat: 100,
        n_lon: 100,
        lat0: 35.0,
        lon0: -10.0,
        d_lat: 0.44,
        d_lon: 0.44,
        relaxation_width: 20,
    }
}

pub const DEFAULT_OCEAN_FRACTION: f64 = 0.2;

/// Grid whose ocean is one connected, randomly grown patch covering
/// `ocean_fraction` of the cells.
pub fn grid_with_ocean_patch(
    geometry: GridGeometry,
    ocean_fraction: f64,
    seed: u64,
) -> Result<GridSpec> {
    geometry.validate()?;
    if !(0.0..1.0).contains(&ocean_fraction) {
        return Err(Error::InvalidParam(format!(
            "ocean fraction must be in [0, 1), got {ocean_fraction}"
        )));
    }
    let (n_lat, n_lon) = (geometry.n_lat, geometry.n_lon);
    let n = geometry.n_cells();
    let target = (ocean_fraction * n as f64).round() as usize;
    let mut land = vec![true; n];
    if target > 0 {
        let mut r = rng(derive_seed(seed, stream::MASK, 0));
        let start = r.random_range(0..n);
        let mut frontier = vec![start];
        let mut queued: HashSet<usize> = HashSet::from([start]);
        let mut filled = 0;
        while filled < target && !frontier.is_empty() {
            let k = r.random_range(0..frontier.len());
            let i = frontier.swap_remove(k);
            land[i] = false;
            filled += 1;
            let (row, col) = (i / n_lon, i % n_lon);
            let mut push = |rr: usize, cc: usize| {
                let j = rr * n_lon + cc;
                if queued.insert(j) {
                    frontier.push(j);
                }
            };
            if row > 0 {
                push(row - 1, col);
            }
            if row + 1 < n_lat {
                push(row + 1, col);
            }
            if col > 0 {
                push(row, col - 1);
            }
            if col + 1 < n_lon {
                push(row, col + 1);
            }
        }
    }
    GridSpec::new(geometry, land)
}

/// Default experiment grid with a seeded 20% ocean patch.
pub fn default_grid(seed: u64) -> Result<GridSpec> {
    grid_with_ocean_patch(default_geometry(), DEFAULT_OCEAN_FRACTION, seed)
}

/// Monthly labels starting at 2010-01.
pub fn month_labels(n_steps: usize) -> Vec<String> {
    (0..n_steps)
        .map(|t| format!("{}-{:02}", 2010 + t / 12, t % 12 + 1))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Mode {
    amp: f64,
    f_row: f64,
    f_col: f64,
    phase: f64,
    drift: f64,
}

/// Sum of low-wavenumber sinusoids with slow phase drift.
///
/// Each mode has integer wavenumbers in 1..=4 along both axes, so every
/// snapshot is periodic over the grid and carries no power above
/// wavenumber 4.
pub fn synthesize_nature(
    grid: &Arc<GridSpec>,
    n_steps: usize,
    params: &SynthesisParams,
) -> Result<FieldSeries> {
    params.validate()?;
    if n_steps == 0 {
        return Err(Error::InvalidParam("n_steps must be at least 1".into()));
    }
    let mut r = rng(derive_seed(params.seed, stream::NATURE, 0));
    let norm = (params.n_modes as f64).sqrt();
    let modes: Vec<Mode> = (0..params.n_modes)
        .map(|_| Mode {
            amp: params.amp * r.random_range(0.5..1.5) / norm,
            f_row: r.random_range(1..=4) as f64,
            f_col: r.random_range(1..=4) as f64,
            phase: r.random_range(0.0..2.0 * PI),
            drift: r.random_range(-0.25..0.25),
        })
        .collect();
    let (n_lat, n_lon) = (grid.n_lat() as f64, grid.n_lon() as f64);
    let steps = (0..n_steps)
        .map(|t| {
            Field::from_fn(grid.clone(), |c| {
                let (y, x) = (c.row as f64 / n_lat, c.col as f64 / n_lon);
                params.base
                    + modes
                        .iter()
                        .map(|m| {
                            m.amp
                                * (2.0 * PI * (m.f_row * y + m.f_col * x)
                                    + m.phase
                                    + m.drift * t as f64)
                                    .sin()
                        })
                        .sum::<f64>()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FieldSeries::new(grid.clone(), steps, month_labels(n_steps))
}

/// Smooth random bias with Gaussian correlation `exp(-d²/L²)` at
/// `L = bias_corr_len` and pointwise standard deviation `bias_amp`.
///
/// White noise on a padded grid is convolved with the Gaussian kernel of
/// length `L/√2` (the self-convolution of that kernel has length `L`) and
/// divided by the kernel's L2 norm.
pub fn bias_field(grid: &Arc<GridSpec>, params: &SynthesisParams) -> Result<Field> {
    params.validate()?;
    if params.bias_amp == 0.0 {
        return Ok(Field::constant(grid.clone(), 0.0));
    }
    let kernel_len = params.bias_corr_len / 2f64.sqrt();
    let radius = (4.0 * kernel_len).ceil() as usize;
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|k| {
            let d = k as f64 - radius as f64;
            (-d * d / (kernel_len * kernel_len)).exp()
        })
        .collect();
    let norm1d: f64 = taps.iter().map(|w| w * w).sum::<f64>().sqrt();

    let (n_lat, n_lon) = (grid.n_lat(), grid.n_lon());
    let (p_lat, p_lon) = (n_lat + 2 * radius, n_lon + 2 * radius);
    let mut r = rng(derive_seed(params.seed, stream::BIAS, 0));
    let noise: Vec<f64> = (0..p_lat * p_lon)
        .map(|_| r.sample(StandardNormal))
        .collect();

    // separable: rows of the padded grid first, then columns
    let mut along_col = vec![0.0; p_lat * n_lon];
    for i in 0..p_lat {
        for j in 0..n_lon {
            along_col[i * n_lon + j] = taps
                .iter()
                .enumerate()
                .map(|(k, w)| w * noise[i * p_lon + j + k])
                .sum();
        }
    }
    let scale = params.bias_amp / (norm1d * norm1d);
    let values = (0..n_lat * n_lon)
        .map(|idx| {
            let (i, j) = (idx / n_lon, idx % n_lon);
            scale
                * taps
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * along_col[(i + k) * n_lon + j])
                    .sum::<f64>()
        })
        .collect();
    Field::new(grid.clone(), values)
}

/// Nature plus the time-constant bias field.
pub fn synthesize_forecast(nature: &FieldSeries, params: &SynthesisParams) -> Result<FieldSeries> {
    let bias = bias_field(nature.grid(), params)?;
    let steps = nature
        .steps()
        .iter()
        .map(|f| {
            let v = f
                .values()
                .iter()
                .zip(bias.values())
                .map(|(x, b)| x + b)
                .collect();
            Field::new(nature.grid().clone(), v)
        })
        .collect::<Result<Vec<_>>>()?;
    FieldSeries::new(nature.grid().clone(), steps, nature.labels().to_vec())
}

/// Everything `run_osse` needs besides the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OsseSetup {
    pub synthesis: SynthesisParams,
    pub n_steps: usize,
    pub n_stations: usize,
    pub noise_sigma: f64,
    pub station_seed: u64,
    pub noise_seed: u64,
    pub config: OiConfig,
    /// Replace the configured background variance with the per-cell
    /// estimate from nature and forecast.
    pub estimate_sigma2: bool,
}

impl OsseSetup {
    /// The reference experiment: 12 monthly steps, 500 stations, noise
    /// σ = 0.5 K, L = 3, background variance estimated from the bias.
    /// Every seed is derived from `master`.
    pub fn standard(master: u64) -> Result<Self> {
        let cov = CovarianceParams::isotropic(1.0, 3.0)?;
        let noise_sigma = 0.5;
        Ok(OsseSetup {
            synthesis: SynthesisParams {
                seed: derive_seed(master, stream::SYNTHESIS, 0),
                ..SynthesisParams::default()
            },
            n_steps: 12,
            n_stations: 500,
            noise_sigma,
            station_seed: derive_seed(master, stream::STATIONS, 0),
            noise_seed: derive_seed(master, stream::NOISE, 0),
            config: OiConfig::new(cov, ObsErrorModel::new(noise_sigma * noise_sigma)?, 0.0)?,
            estimate_sigma2: true,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub synthesis: SynthesisParams,
    pub station_seed: u64,
    pub noise_seed: u64,
    pub n_steps: usize,
    pub n_stations: usize,
    pub noise_sigma: f64,
    pub estimate_sigma2: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsseReport {
    pub forecast_skill: SkillReport,
    pub analysis_skill: SkillReport,
    /// `1 - analysis_mean / forecast_mean`.
    pub reduction: f64,
    pub provenance: Provenance,
}

/// All products of one experiment.
#[derive(Debug, Clone)]
pub struct OsseRun {
    pub nature: FieldSeries,
    pub forecast: FieldSeries,
    pub network: Arc<ObservationNetwork>,
    pub observations: ObservationBatch,
    pub result: AnalysisResult,
    pub report: OsseReport,
}

impl OsseRun {
    /// Writes nature, forecast, analysis, both RMSE maps and the station
    /// list into `dir`.
    pub fn write_fields(&self, dir: &Path) -> Result<()> {
        fsv::write(dir.join("nature.fsv"), &self.nature)?;
        fsv::write(dir.join("forecast.fsv"), &self.forecast)?;
        fsv::write(dir.join("analysis.fsv"), &self.result.analysis)?;
        fsv::write(
            dir.join("rmse_forecast.fsv"),
            &FieldSeries::single(self.report.forecast_skill.rmse_field.clone(), "rmse"),
        )?;
        fsv::write(
            dir.join("rmse_analysis.fsv"),
            &FieldSeries::single(self.report.analysis_skill.rmse_field.clone(), "rmse"),
        )?;
        self.network.write_csv(dir.join("stations.csv"))
    }
}

/// Nature → forecast → stations → pseudo-observations → analysis → scores.
pub fn run_osse(grid: &Arc<GridSpec>, setup: &OsseSetup) -> Result<OsseRun> {
    let nature = synthesize_nature(grid, setup.n_steps, &setup.synthesis)
        .context_with(|| "synthesize nature".into())?;
    let forecast = synthesize_forecast(&nature, &setup.synthesis)
        .context_with(|| "synthesize forecast".into())?;
    let network = Arc::new(
        sample_stations(grid, setup.n_stations, setup.station_seed)
            .context_with(|| "sample stations".into())?,
    );
    let observations = make_pseudo_obs(&nature, &network, setup.noise_sigma, setup.noise_seed)
        .context_with(|| "make pseudo-observations".into())?;

    let config = if setup.estimate_sigma2 {
        let sigma2 = estimate_background_variance(&nature, &forecast)
            .context_with(|| "estimate variance".into())?;
        OiConfig {
            cov: setup
                .config
                .cov
                .clone()
                .with_sigma2(Sigma2::Field(sigma2))?,
            ..setup.config.clone()
        }
    } else {
        setup.config.clone()
    };
    let result =
        analyze_series(&forecast, &observations, &config).context_with(|| "analyze".into())?;

    let forecast_skill =
        SkillReport::compute(&nature, &forecast).context_with(|| "score forecast".into())?;
    let analysis_skill =
        SkillReport::compute(&nature, &result.analysis).context_with(|| "score analysis".into())?;
    let reduction = if forecast_skill.domain_mean > 0.0 {
        1.0 - analysis_skill.domain_mean / forecast_skill.domain_mean
    } else {
        0.0
    };
    let report = OsseReport {
        forecast_skill,
        analysis_skill,
        reduction,
        provenance: Provenance {
            synthesis: setup.synthesis.clone(),
            station_seed: setup.station_seed,
            noise_seed: setup.noise_seed,
            n_steps: setup.n_steps,
            n_stations: setup.n_stations,
            noise_sigma: setup.noise_sigma,
            estimate_sigma2: setup.estimate_sigma2,
        },
    };
    Ok(OsseRun {
        nature,
        forecast,
        network,
        observations,
        result,
        report,
    })
}

/// True for cells within `radius` (grid units) of any station.
pub fn near_station_mask(network: &ObservationNetwork, radius: f64) -> Vec<bool> {
    let grid = network.grid();
    let r2 = radius * radius;
    grid.cells()
        .map(|c: Cell| {
            network.sites().iter().any(|s| {
                let dr = c.row.abs_diff(s.cell.row) as f64;
                let dc = c.col.abs_diff(s.cell.col) as f64;
                dr * dr + dc * dc <= r2
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid(n: usize) -> Arc<GridSpec> {
        Arc::new(
            GridSpec::all_land(GridGeometry {
                n_lat: n,
                n_lon: n,
                lat0: 40.0,
                lon0: 0.0,
                d_lat: 0.44,
                d_lon: 0.44,
                relaxation_width: 2,
            })
            .unwrap(),
        )
    }

    #[test]
    fn zero_amplitude_nature_is_constant() {
        let grid = small_grid(12);
        let params = SynthesisParams {
            amp: 0.0,
            ..SynthesisParams::default()
        };
        let nature = synthesize_nature(&grid, 3, &params).unwrap();
        for f in nature.steps() {
            assert!(f.values().iter().all(|&v| v == 280.0));
        }
    }

    #[test]
    fn same_seed_same_series() {
        let grid = small_grid(16);
        let params = SynthesisParams::default();
        let a =
            synthesize_forecast(&synthesize_nature(&grid, 4, &params).unwrap(), &params).unwrap();
        let b =
            synthesize_forecast(&synthesize_nature(&grid, 4, &params).unwrap(), &params).unwrap();
        assert_eq!(a, b);
        let other = SynthesisParams { seed: 1, ..params };
        let c = synthesize_nature(&grid, 4, &other).unwrap();
        assert_ne!(a.step(0).values(), c.step(0).values());
    }

    #[test]
    fn nature_has_no_power_above_wavenumber_four() {
        let n = 16;
        let grid = small_grid(n);
        let nature = synthesize_nature(&grid, 2, &SynthesisParams::default()).unwrap();
        let v = nature.step(1).values();
        let (mut total, mut high) = (0.0, 0.0);
        for kr in 0..n {
            for kc in 0..n {
                if kr == 0 && kc == 0 {
                    continue;
                }
                let (mut re, mut im) = (0.0, 0.0);
                for r in 0..n {
                    for c in 0..n {
                        let ph = -2.0 * PI * ((kr * r + kc * c) as f64) / n as f64;
                        re += v[r * n + c] * ph.cos();
                        im += v[r * n + c] * ph.sin();
                    }
                }
                let p = re * re + im * im;
                total += p;
                let wrap = |k: usize| k.min(n - k);
                if wrap(kr) > 4 || wrap(kc) > 4 {
                    high += p;
                }
            }
        }
        assert!(total > 0.0);
        assert!(
            high / total < 0.01,
            "high-wavenumber share {}",
            high / total
        );
    }

    #[test]
    fn zero_bias_forecast_equals_nature() {
        let grid = small_grid(12);
        let params = SynthesisParams {
            bias_amp: 0.0,
            ..SynthesisParams::default()
        };
        let nature = synthesize_nature(&grid, 2, &params).unwrap();
        assert_eq!(synthesize_forecast(&nature, &params).unwrap(), nature);
    }

    #[test]
    fn bias_spread_and_time_constancy() {
        let grid = Arc::new(default_grid(0).unwrap());
        let params = SynthesisParams::default();
        let nature = synthesize_nature(&grid, 3, &params).unwrap();
        let forecast = synthesize_forecast(&nature, &params).unwrap();
        let mask = grid.evaluation_mask();
        let bias: Vec<Vec<f64>> = (0..3)
            .map(|t| {
                forecast
                    .step(t)
                    .values()
                    .iter()
                    .zip(nature.step(t).values())
                    .map(|(f, x)| f - x)
                    .collect()
            })
            .collect();
        for t in 1..3 {
            for (a, b) in bias[0].iter().zip(&bias[t]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let inside: Vec<f64> = bias[0]
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(b, _)| *b)
            .collect();
        let mean = inside.iter().sum::<f64>() / inside.len() as f64;
        let sd =
            (inside.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / inside.len() as f64).sqrt();
        assert!((0.8..=1.2).contains(&sd), "bias spread {sd}");
    }

    #[test]
    fn bias_correlation_matches_length() {
        // lag-3 sample correlation over several realizations should be near e^-1
        let grid = small_grid(60);
        let mut num = 0.0;
        let mut den = 0.0;
        for seed in 0..8 {
            let b = bias_field(
                &grid,
                &SynthesisParams {
                    seed,
                    ..SynthesisParams::default()
                },
            )
            .unwrap();
            let v = b.values();
            for r in 0..60 {
                for c in 0..57 {
                    num += v[r * 60 + c] * v[r * 60 + c + 3];
                    den += v[r * 60 + c] * v[r * 60 + c];
                }
            }
        }
        let rho = num / den;
        assert!(
            (rho - (-1.0f64).exp()).abs() < 0.08,
            "lag-3 correlation {rho}"
        );
    }

    #[test]
    fn ocean_patch_has_requested_fraction() {
        let grid = default_grid(7).unwrap();
        assert_eq!(grid.n_cells() - grid.land_count(), 2000);
        assert_ne!(grid.land_mask(), default_grid(8).unwrap().land_mask());
    }

    #[test]
    fn month_labels_roll_over() {
        let labels = month_labels(14);
        assert_eq!(labels[0], "2010-01");
        assert_eq!(labels[11], "2010-12");
        assert_eq!(labels[13], "2011-02");
    }

    #[test]
    fn standard_experiment_reduces_error_near_stations() {
        let grid = Arc::new(default_grid(3).unwrap());
        let setup = OsseSetup::standard(3).unwrap();
        let run = run_osse(&grid, &setup).unwrap();
        assert!(run.report.reduction > 0.0);
        assert!(run.report.analysis_skill.domain_mean < run.report.forecast_skill.domain_mean);

        let near = near_station_mask(&run.network, 1.0);
        let eval = grid.evaluation_mask();
        let ratio = |want: bool| {
            let (mut a, mut f) = (0.0, 0.0);
            for i in 0..grid.n_cells() {
                if eval[i] && near[i] == want {
                    a += run.report.analysis_skill.rmse_field.values()[i];
                    f += run.report.forecast_skill.rmse_field.values()[i];
                }
            }
            a / f
        };
        assert!(ratio(true) < ratio(false));
    }

    #[test]
    fn provenance_reproduces_run() {
        let grid = Arc::new(default_grid(1).unwrap());
        let mut setup = OsseSetup::standard(1).unwrap();
        setup.n_steps = 2;
        let a = run_osse(&grid, &setup).unwrap();
        let p = &a.report.provenance;
        let replay = OsseSetup {
            synthesis: p.synthesis.clone(),
            n_steps: p.n_steps,
            n_stations: p.n_stations,
            noise_sigma: p.noise_sigma,
            station_seed: p.station_seed,
            noise_seed: p.noise_seed,
            estimate_sigma2: p.estimate_sigma2,
            ..setup
        };
        let b = run_osse(&grid, &replay).unwrap();
        assert_eq!(a.result.analysis, b.result.analysis);
    }

    #[test]
    fn unbiased_forecast_stays_close_under_noise() {
        let grid = small_grid(20);
        let mut setup = OsseSetup::standard(0).unwrap();
        setup.synthesis.bias_amp = 0.0;
        setup.n_steps = 2;
        setup.n_stations = 40;
        setup.estimate_sigma2 = false;
        let run = run_osse(&grid, &setup).unwrap();
        // only observation noise can move the analysis away from nature
        assert!(run.report.forecast_skill.domain_mean == 0.0);
        assert!(run.report.analysis_skill.domain_mean < 0.5);
    }
}
