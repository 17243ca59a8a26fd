//! RMSE skill maps, evaluation-domain means and the correlation-length ×
//! station-count sweep.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::fsv::fmt_f64;
use crate::grid::{Field, FieldSeries, GridSpec};
use crate::obsnet::{make_pseudo_obs, sample_stations};
use crate::oi::{analyze_series_with, LocalAnalyzer, OiConfig};
use crate::rng::{derive_seed, stream};

/// Per cell, `sqrt(mean_t (a - b)²)`.
pub fn rmse_field(a: &FieldSeries, b: &FieldSeries) -> Result<Field> {
    a.ensure_aligned(b)?;
    let n = a.grid().n_cells();
    let mut acc = vec![0.0; n];
    for (x, y) in a.steps().iter().zip(b.steps()) {
        for ((s, u), v) in acc.iter_mut().zip(x.values()).zip(y.values()) {
            let d = u - v;
            *s += d * d;
        }
    }
    let steps = a.len() as f64;
    let values = acc.into_iter().map(|s| (s / steps).sqrt()).collect();
    Field::new(a.grid().clone(), values)
}

/// Area weighting for domain means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    CosLatitude,
}

/// Optional rectangular sub-box (inclusive row/col ranges) intersected with
/// the evaluation mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

/// Cells and weights a domain mean is taken over.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationDomain {
    mask: Vec<bool>,
    weights: Vec<f64>,
}

impl EvaluationDomain {
    /// Land cells outside the relaxation zone, uniformly weighted.
    pub fn new(grid: &GridSpec) -> Result<Self> {
        Self::with_options(grid, None, Weighting::Uniform)
    }

    pub fn with_options(
        grid: &GridSpec,
        sub_box: Option<SubBox>,
        weighting: Weighting,
    ) -> Result<Self> {
        let mut mask = grid.evaluation_mask();
        if let Some(b) = sub_box {
            for (m, c) in mask.iter_mut().zip(grid.cells()) {
                *m &= (b.row_min..=b.row_max).contains(&c.row)
                    && (b.col_min..=b.col_max).contains(&c.col);
            }
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidParam("evaluation domain is empty".into()));
        }
        let weights = grid
            .cells()
            .map(|c| match weighting {
                Weighting::Uniform => 1.0,
                Weighting::CosLatitude => grid.center(c).0.to_radians().cos(),
            })
            .collect();
        Ok(EvaluationDomain { mask, weights })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn n_cells(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn mean(&self, field: &Field) -> f64 {
        let (mut s, mut w) = (0.0, 0.0);
        for ((v, &m), &wt) in field.values().iter().zip(&self.mask).zip(&self.weights) {
            if m {
                s += wt * v;
                w += wt;
            }
        }
        s / w
    }
}

/// Unweighted mean of `rmse` over the grid's evaluation mask.
pub fn domain_mean_rmse(rmse: &Field, grid: &GridSpec) -> Result<f64> {
    if **rmse.grid() != *grid {
        return Err(Error::GridMismatch(
            "rmse field is not on the given grid".into(),
        ));
    }
    Ok(EvaluationDomain::new(grid)?.mean(rmse))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillReport {
    pub rmse_field: Field,
    pub domain_mean: f64,
    pub n_cells: usize,
}

impl SkillReport {
    /// Scores `estimate` against `truth` over the grid's evaluation domain.
    pub fn compute(truth: &FieldSeries, estimate: &FieldSeries) -> Result<Self> {
        let domain = EvaluationDomain::new(truth.grid())?;
        Self::compute_in(truth, estimate, &domain)
    }

    pub fn compute_in(
        truth: &FieldSeries,
        estimate: &FieldSeries,
        domain: &EvaluationDomain,
    ) -> Result<Self> {
        let rmse_field = rmse_field(truth, estimate)?;
        Ok(SkillReport {
            domain_mean: domain.mean(&rmse_field),
            n_cells: domain.n_cells(),
            rmse_field,
        })
    }
}

/// Inputs of a sweep besides the fields and the base configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub l_values: Vec<f64>,
    pub n_values: Vec<usize>,
    /// Master seeds; the reported RMSE is the mean over them.
    pub seeds: Vec<u64>,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub l_values: Vec<f64>,
    pub n_values: Vec<usize>,
    /// `mean_rmse[i][j]` for `l_values[i]`, `n_values[j]`.
    pub mean_rmse: Vec<Vec<f64>>,
    /// Per N, the L with the smallest mean RMSE (first on ties).
    pub argmin_l: Vec<f64>,
}

impl SweepResult {
    fn from_matrix(l_values: Vec<f64>, n_values: Vec<usize>, mean_rmse: Vec<Vec<f64>>) -> Self {
        let mut result = SweepResult {
            l_values,
            n_values,
            mean_rmse,
            argmin_l: Vec::new(),
        };
        result.argmin_l = (0..result.n_values.len())
            .map(|j| result.l_values[result.argmin_index(j)])
            .collect();
        result
    }

    /// Index into `l_values` of the minimum for `n_values[j]`.
    pub fn argmin_index(&self, j: usize) -> usize {
        let mut best = 0;
        for i in 1..self.l_values.len() {
            if self.mean_rmse[i][j] < self.mean_rmse[best][j] {
                best = i;
            }
        }
        best
    }

    /// `L,N,mean_rmse`, L-major.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("L,N,mean_rmse\n");
        for (i, l) in self.l_values.iter().enumerate() {
            for (j, n) in self.n_values.iter().enumerate() {
                let _ = writeln!(out, "{l},{n},{}", fmt_f64(self.mean_rmse[i][j]));
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Station-network seed used by a sweep for one master seed.
pub fn sweep_station_seed(master: u64) -> u64 {
    derive_seed(master, stream::STATIONS, 0)
}

/// Observation-noise seed used by a sweep for one master seed.
pub fn sweep_noise_seed(master: u64) -> u64 {
    derive_seed(master, stream::NOISE, 0)
}

/// Domain-mean analysis RMSE over a grid of correlation lengths and
/// station counts.
///
/// For every master seed the networks are nested across N (one station
/// ordering, truncated) and reused across L, and each station keeps its
/// noise draws, so differences along either axis come from the axis alone.
/// The scanning radius follows `3·L`.
pub fn sweep(
    nature: &FieldSeries,
    forecast: &FieldSeries,
    spec: &SweepSpec,
    base_config: &OiConfig,
) -> Result<SweepResult> {
    if spec.l_values.is_empty() || spec.n_values.is_empty() || spec.seeds.is_empty() {
        return Err(Error::InvalidParam(
            "sweep axes and seed list must be non-empty".into(),
        ));
    }
    nature.ensure_aligned(forecast)?;
    let grid: Arc<GridSpec> = nature.grid().clone();
    let domain = EvaluationDomain::new(&grid)?;

    let jobs: Vec<(usize, usize, usize)> = (0..spec.seeds.len())
        .flat_map(|s| {
            (0..spec.l_values.len())
                .flat_map(move |i| (0..spec.n_values.len()).map(move |j| (s, i, j)))
        })
        .collect();

    let scores = jobs
        .par_iter()
        .map(|&(s, i, j)| {
            let (l, n, master) = (spec.l_values[i], spec.n_values[j], spec.seeds[s]);
            sweep_cell(
                nature,
                forecast,
                &grid,
                &domain,
                l,
                n,
                master,
                spec.noise_sigma,
                base_config,
            )
            .context_with(|| format!("sweep cell L={l} N={n} seed={master}"))
        })
        .collect::<Result<Vec<f64>>>()?;

    let (nl, nn) = (spec.l_values.len(), spec.n_values.len());
    let mut mean = vec![vec![0.0; nn]; nl];
    for (&(_, i, j), v) in jobs.iter().zip(&scores) {
        mean[i][j] += v;
    }
    let k = spec.seeds.len() as f64;
    for row in &mut mean {
        for v in row.iter_mut() {
            *v /= k;
        }
    }
    Ok(SweepResult::from_matrix(
        spec.l_values.clone(),
        spec.n_values.clone(),
        mean,
    ))
}

#[allow(clippy::too_many_arguments)]
fn sweep_cell(
    nature: &FieldSeries,
    forecast: &FieldSeries,
    grid: &Arc<GridSpec>,
    domain: &EvaluationDomain,
    l: f64,
    n: usize,
    master: u64,
    noise_sigma: f64,
    base: &OiConfig,
) -> Result<f64> {
    let network = Arc::new(sample_stations(grid, n, sweep_station_seed(master))?);
    let batch = make_pseudo_obs(nature, &network, noise_sigma, sweep_noise_seed(master))?;
    let config = OiConfig {
        cov: base.cov.clone().with_corr_len(l)?,
        ..base.clone()
    };
    let analyzer = LocalAnalyzer::new(network, &config)?;
    let result = analyze_series_with(&analyzer, forecast, &batch, &config)?;
    Ok(SkillReport::compute_in(nature, &result.analysis, domain)?.domain_mean)
}
