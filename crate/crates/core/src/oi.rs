//! Optimal interpolation (the BLUE update).
//!
//! For background `x_b`, observations `y`, selection operator `H`,
//! background covariance `P` and observation covariance `R`:
//!
//! ```text
//! K   = P Hᵀ (H P Hᵀ + R)⁻¹
//! x_a = x_b + K (y - H x_b)
//! P_a = P - K H P
//! ```
//!
//! [`analyze_full`] evaluates this with dense matrices over the whole grid
//! and is meant for small problems and cross-checks. [`analyze_localized`]
//! solves one small system per grid cell using only the nearest observations
//! within the scanning radius; that is the production path.
//!
//! Systems are solved with a Cholesky factorization. When it fails (for
//! example two stations on one cell with `R = 0`) a single retry adds
//! diagonal jitter.

use std::sync::Arc;

use rayon::prelude::*;

use crate::covariance::{CovarianceParams, ObsErrorModel, Sigma2};
use crate::error::{Error, Result, ResultExt};
use crate::grid::{ensure_same_grid, Cell, Field, FieldSeries, GridSpec};
use crate::linalg::{factor_with_jitter, Matrix};
use crate::obsnet::{apply_h, ObservationBatch, ObservationNetwork};

#[derive(Debug, Clone, PartialEq)]
pub struct OiConfig {
    pub cov: CovarianceParams,
    pub obs_error: ObsErrorModel,
    /// Diagonal jitter for the retry after a failed factorization; 0 means
    /// use `1e-10·trace`.
    pub jitter: f64,
}

impl OiConfig {
    pub fn new(cov: CovarianceParams, obs_error: ObsErrorModel, jitter: f64) -> Result<Self> {
        if !(jitter >= 0.0 && jitter.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "jitter must be >= 0, got {jitter}"
            )));
        }
        Ok(OiConfig {
            cov,
            obs_error,
            jitter,
        })
    }

    fn check_sigma2_grid(&self, grid: &Arc<GridSpec>) -> Result<()> {
        if let Sigma2::Field(f) = self.cov.sigma2() {
            ensure_same_grid(f.grid(), grid, "background variance and background")?;
        }
        Ok(())
    }
}

/// `K = pb_ho · (h_pb_ht + r)⁻¹` without forming an inverse.
///
/// `pb_ho` is cells × obs, the other two obs × obs. On a singular system
/// the error lists the offending observation indices.
pub fn kalman_gain(pb_ho: &Matrix, h_pb_ht: &Matrix, r: &Matrix, jitter: f64) -> Result<Matrix> {
    let m = h_pb_ht.rows();
    if !h_pb_ht.is_square() || (r.rows(), r.cols()) != (m, m) || pb_ho.cols() != m {
        return Err(Error::InvalidParam(format!(
            "gain shapes do not conform: PHᵀ {}x{}, HPHᵀ {}x{}, R {}x{}",
            pb_ho.rows(),
            pb_ho.cols(),
            h_pb_ht.rows(),
            h_pb_ht.cols(),
            r.rows(),
            r.cols()
        )));
    }
    let innovation_cov = h_pb_ht.add(r);
    let (chol, _) = factor_with_jitter(&innovation_cov, jitter).map_err(|_| Error::Singular {
        cell: None,
        stations: (0..m as u64).collect(),
    })?;
    let mut gain = Matrix::zeros(pb_ho.rows(), m);
    let mut row = vec![0.0; m];
    for i in 0..pb_ho.rows() {
        row.copy_from_slice(pb_ho.row(i));
        chol.solve_in_place(&mut row);
        for (j, v) in row.iter().enumerate() {
            gain[(i, j)] = *v;
        }
    }
    Ok(gain)
}

/// The 0/1 selection matrix `H` (obs × cells) of a network.
pub fn selection_operator(network: &ObservationNetwork) -> Matrix {
    let grid = network.grid();
    let mut h = Matrix::zeros(network.len(), grid.n_cells());
    for (i, s) in network.sites().iter().enumerate() {
        h[(i, grid.index(s.cell))] = 1.0;
    }
    h
}

/// Analysis error covariance for an arbitrary gain:
/// `(I - KH) P (I - KH)ᵀ + K R Kᵀ`.
pub fn analysis_covariance(k: &Matrix, h: &Matrix, pb: &Matrix, r: &Matrix) -> Matrix {
    let i_kh = Matrix::identity(pb.rows()).sub(&k.mul(h));
    i_kh.mul(pb)
        .mul(&i_kh.transpose())
        .add(&k.mul(r).mul(&k.transpose()))
}

/// Analysis error covariance `P - K H P`, valid only at the optimal gain.
pub fn optimal_analysis_covariance(k: &Matrix, h: &Matrix, pb: &Matrix) -> Matrix {
    pb.sub(&k.mul(h).mul(pb))
}

/// One analyzed snapshot with its per-cell analysis error variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub field: Field,
    pub pa_diag: Field,
}

impl Analysis {
    pub fn increment(&self, background: &Field) -> Vec<f64> {
        self.field
            .values()
            .iter()
            .zip(background.values())
            .map(|(a, b)| a - b)
            .collect()
    }
}

fn check_inputs(
    background: &Field,
    network: &ObservationNetwork,
    obs: &[f64],
    config: &OiConfig,
) -> Result<()> {
    ensure_same_grid(
        background.grid(),
        network.grid(),
        "background and station network",
    )?;
    config.check_sigma2_grid(background.grid())?;
    if obs.len() != network.len() {
        return Err(Error::InvalidParam(format!(
            "{} observed values for {} stations",
            obs.len(),
            network.len()
        )));
    }
    Ok(())
}

fn innovation(background: &Field, network: &ObservationNetwork, obs: &[f64]) -> Result<Vec<f64>> {
    Ok(apply_h(background, network)?
        .into_iter()
        .zip(obs)
        .map(|(hx, y)| y - hx)
        .collect())
}

/// Dense BLUE over every cell and every observation.
pub fn analyze_full(
    background: &Field,
    network: &ObservationNetwork,
    obs: &[f64],
    config: &OiConfig,
) -> Result<Analysis> {
    check_inputs(background, network, obs, config)?;
    let grid = background.grid();
    let cov = &config.cov;
    let obs_cells = network.cells();
    let m = obs_cells.len();

    let pb_ho = Matrix::from_fn(grid.n_cells(), m, |i, j| {
        crate::covariance::background_cov(grid.cell(i), obs_cells[j], cov)
    });
    let h_pb_ht = crate::covariance::build_cov_matrix(&obs_cells, cov);
    let r = Matrix::diagonal(&vec![config.obs_error.obs_sigma2(); m]);
    let gain = kalman_gain(&pb_ho, &h_pb_ht, &r, config.jitter).map_err(|e| match e {
        Error::Singular { .. } => Error::Singular {
            cell: None,
            stations: network.station_ids(),
        },
        other => other,
    })?;

    let d = innovation(background, network, obs)?;
    let mut values = background.values().to_vec();
    let mut pa = Vec::with_capacity(grid.n_cells());
    for (i, v) in values.iter_mut().enumerate() {
        let k = gain.row(i);
        *v += k.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
        let reduction: f64 = k.iter().zip(pb_ho.row(i)).map(|(a, b)| a * b).sum();
        pa.push((cov.sigma2().at(grid.cell(i)) - reduction).max(0.0));
    }
    Ok(Analysis {
        field: Field::new(grid.clone(), values)?,
        pa_diag: Field::new(grid.clone(), pa)?,
    })
}

/// Observations influencing `cell`: those within the scanning radius,
/// nearest first (ties by station id), capped at `max_influential`.
/// Returns indices into the network.
pub fn select_influential(
    cell: Cell,
    network: &ObservationNetwork,
    cov: &CovarianceParams,
) -> Vec<usize> {
    let r2 = cov.scanning_radius() * cov.scanning_radius();
    // absorbs rounding in radii like 9·√2
    let limit = r2 * (1.0 + 1e-12);
    let mut near: Vec<(f64, u64, usize)> = network
        .sites()
        .iter()
        .enumerate()
        .filter_map(|(j, s)| {
            let dr = cell.row.abs_diff(s.cell.row) as f64;
            let dc = cell.col.abs_diff(s.cell.col) as f64;
            let d2 = dr * dr + dc * dc;
            (d2 <= limit).then_some((d2, s.station_id, j))
        })
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    near.truncate(cov.max_influential());
    near.into_iter().map(|(_, _, j)| j).collect()
}

#[derive(Debug, Clone)]
struct LocalGain {
    obs: Vec<usize>,
    weights: Vec<f64>,
    pa: f64,
}

/// Per-cell gain rows for one network and configuration.
///
/// The gains depend only on station positions and the covariance model, so
/// they are computed once and applied to any number of innovation vectors.
#[derive(Debug, Clone)]
pub struct LocalAnalyzer {
    grid: Arc<GridSpec>,
    network: Arc<ObservationNetwork>,
    gains: Vec<LocalGain>,
}

impl LocalAnalyzer {
    pub fn new(network: Arc<ObservationNetwork>, config: &OiConfig) -> Result<Self> {
        let grid = network.grid().clone();
        config.check_sigma2_grid(&grid)?;
        let gains = (0..grid.n_cells())
            .into_par_iter()
            .map(|i| local_gain(grid.cell(i), &network, config))
            .collect::<Result<Vec<_>>>()?;
        Ok(LocalAnalyzer {
            grid,
            network,
            gains,
        })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn network(&self) -> &Arc<ObservationNetwork> {
        &self.network
    }

    /// Network indices of the observations used at `cell`.
    pub fn influential(&self, cell: Cell) -> &[usize] {
        &self.gains[self.grid.index(cell)].obs
    }

    pub fn pa_diag(&self) -> Field {
        let pa = self.gains.iter().map(|g| g.pa).collect();
        Field::new(self.grid.clone(), pa).expect("analysis variances are finite")
    }

    /// Analysis increment for an innovation vector (one entry per site).
    pub fn increment(&self, innovation: &[f64]) -> Vec<f64> {
        assert_eq!(innovation.len(), self.network.len(), "innovation length");
        self.gains
            .iter()
            .map(|g| {
                g.obs
                    .iter()
                    .zip(&g.weights)
                    .map(|(&j, w)| w * innovation[j])
                    .sum()
            })
            .collect()
    }

    /// Returns `(analysis, increment)` for one background snapshot.
    pub fn analyze(&self, background: &Field, obs: &[f64]) -> Result<(Field, Field)> {
        ensure_same_grid(background.grid(), &self.grid, "background and analyzer")?;
        if obs.len() != self.network.len() {
            return Err(Error::InvalidParam(format!(
                "{} observed values for {} stations",
                obs.len(),
                self.network.len()
            )));
        }
        let d = innovation(background, &self.network, obs)?;
        let inc = self.increment(&d);
        let values = background
            .values()
            .iter()
            .zip(&inc)
            .map(|(b, i)| b + i)
            .collect();
        Ok((
            Field::new(self.grid.clone(), values)?,
            Field::new(self.grid.clone(), inc)?,
        ))
    }
}

fn local_gain(cell: Cell, network: &ObservationNetwork, config: &OiConfig) -> Result<LocalGain> {
    let cov = &config.cov;
    let sigma2 = cov.sigma2();
    let var_g = sigma2.at(cell);
    let obs = select_influential(cell, network, cov);
    if obs.is_empty() || var_g == 0.0 {
        return Ok(LocalGain {
            obs: Vec::new(),
            weights: Vec::new(),
            pa: var_g,
        });
    }
    let sites = network.sites();
    let cells: Vec<Cell> = obs.iter().map(|&j| sites[j].cell).collect();
    let m = cells.len();

    let b: Vec<f64> = cells
        .iter()
        .map(|&c| crate::covariance::background_cov(cell, c, cov))
        .collect();
    let mut a = crate::covariance::build_cov_matrix(&cells, cov);
    a.add_to_diagonal(config.obs_error.obs_sigma2());

    let (chol, _) = factor_with_jitter(&a, config.jitter).map_err(|_| Error::Singular {
        cell: Some(cell),
        stations: obs.iter().map(|&j| sites[j].station_id).collect(),
    })?;
    let weights = chol.solve(&b);
    let reduction: f64 = weights.iter().zip(&b).map(|(w, b)| w * b).sum();
    debug_assert_eq!(weights.len(), m);
    Ok(LocalGain {
        obs,
        weights,
        pa: (var_g - reduction).max(0.0),
    })
}

/// Localized BLUE for one snapshot.
pub fn analyze_localized(
    background: &Field,
    network: &ObservationNetwork,
    obs: &[f64],
    config: &OiConfig,
) -> Result<Analysis> {
    check_inputs(background, network, obs, config)?;
    let analyzer = LocalAnalyzer::new(Arc::new(network.clone()), config)?;
    let (field, _) = analyzer.analyze(background, obs)?;
    Ok(Analysis {
        field,
        pa_diag: analyzer.pa_diag(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisResult {
    pub analysis: FieldSeries,
    pub increment: FieldSeries,
    pub pa_diag: Field,
    pub config_echo: OiConfig,
}

/// Analyzes every step independently (no cycling) with the localized BLUE.
pub fn analyze_series(
    background: &FieldSeries,
    batch: &ObservationBatch,
    config: &OiConfig,
) -> Result<AnalysisResult> {
    let analyzer = LocalAnalyzer::new(batch.network().clone(), config)?;
    analyze_series_with(&analyzer, background, batch, config)
}

/// [`analyze_series`] with precomputed gains; `analyzer` must have been
/// built from `config` and the batch's network.
pub fn analyze_series_with(
    analyzer: &LocalAnalyzer,
    background: &FieldSeries,
    batch: &ObservationBatch,
    config: &OiConfig,
) -> Result<AnalysisResult> {
    ensure_same_grid(
        background.grid(),
        analyzer.grid(),
        "background and station network",
    )?;
    if background.len() != batch.len() {
        return Err(Error::StepMismatch {
            left: background.len(),
            right: batch.len(),
        });
    }
    let outputs = background
        .steps()
        .par_iter()
        .zip(batch.steps().par_iter())
        .zip(background.labels().par_iter())
        .map(|((bg, obs), label)| {
            analyzer
                .analyze(bg, obs)
                .context_with(|| format!("step '{label}'"))
        })
        .collect::<Result<Vec<_>>>()?;
    let (analysis, increment): (Vec<Field>, Vec<Field>) = outputs.into_iter().unzip();
    let grid = background.grid().clone();
    let labels = background.labels().to_vec();
    Ok(AnalysisResult {
        analysis: FieldSeries::new(grid.clone(), analysis, labels.clone())?,
        increment: FieldSeries::new(grid, increment, labels)?,
        pa_diag: analyzer.pa_diag(),
        config_echo: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;
    use crate::obsnet::sample_stations;
    use approx::assert_relative_eq;

    fn grid(n_lat: usize, n_lon: usize) -> Arc<GridSpec> {
        Arc::new(
            GridSpec::all_land(GridGeometry {
                n_lat,
                n_lon,
                lat0: 0.0,
                lon0: 0.0,
                d_lat: 1.0,
                d_lon: 1.0,
                relaxation_width: 0,
            })
            .unwrap(),
        )
    }

    fn config(sigma2: f64, l: f64, r: f64) -> OiConfig {
        OiConfig::new(
            CovarianceParams::isotropic(sigma2, l).unwrap(),
            ObsErrorModel::new(r).unwrap(),
            0.0,
        )
        .unwrap()
    }

    fn scalar(v: f64) -> Matrix {
        Matrix::from_row_major(1, 1, vec![v])
    }

    #[test]
    fn scalar_gains() {
        let k = |r: f64| kalman_gain(&scalar(1.0), &scalar(1.0), &scalar(r), 0.0).unwrap()[(0, 0)];
        assert_eq!(k(0.0), 1.0);
        assert_relative_eq!(k(1.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(k(1e9), 1e-9, max_relative = 1e-8);
    }

    #[test]
    fn gain_rejects_bad_shapes_and_singular_systems() {
        assert!(kalman_gain(
            &Matrix::zeros(2, 3),
            &Matrix::zeros(2, 2),
            &Matrix::zeros(2, 2),
            0.0
        )
        .is_err());
        let e = kalman_gain(
            &Matrix::zeros(1, 2),
            &Matrix::zeros(2, 2),
            &Matrix::zeros(2, 2),
            0.0,
        )
        .unwrap_err();
        assert!(matches!(e, Error::Singular { cell: None, ref stations } if stations == &[0, 1]));
    }

    #[test]
    fn coincident_stations_fall_back_to_jitter() {
        let g = grid(3, 3);
        let net = ObservationNetwork::new(g.clone(), [(1, 1.0, 1.0), (2, 1.2, 0.9)]).unwrap();
        let bg = Field::constant(g, 280.0);
        let cfg = config(1.0, 1.5, 0.0);
        let a = analyze_full(&bg, &net, &[281.0, 281.0], &cfg).unwrap();
        assert_relative_eq!(a.field.at(Cell::new(1, 1)), 281.0, epsilon = 1e-6);
        let l = analyze_localized(&bg, &net, &[281.0, 281.0], &cfg).unwrap();
        assert_relative_eq!(l.field.at(Cell::new(1, 1)), 281.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_innovation_leaves_background() {
        let g = grid(6, 5);
        let bg = Field::from_fn(g.clone(), |c| 270.0 + c.row as f64 * 0.3 - c.col as f64).unwrap();
        let net = sample_stations(&g, 7, 3).unwrap();
        let y = apply_h(&bg, &net).unwrap();
        let cfg = config(1.0, 2.0, 0.25);
        assert_eq!(analyze_full(&bg, &net, &y, &cfg).unwrap().field, bg);
        assert_eq!(analyze_localized(&bg, &net, &y, &cfg).unwrap().field, bg);
    }

    #[test]
    fn single_cell_scalar_blue() {
        let g = grid(1, 1);
        let net = ObservationNetwork::new(g.clone(), [(0, 0.0, 0.0)]).unwrap();
        let bg = Field::constant(g, 10.0);
        let a = analyze_full(&bg, &net, &[12.0], &config(1.0, 3.0, 1.0)).unwrap();
        assert_eq!(a.field.values(), &[11.0]);
        assert_eq!(a.pa_diag.values(), &[0.5]);
    }

    #[test]
    fn cells_without_observations_keep_background() {
        let g = grid(20, 20);
        let net = ObservationNetwork::new(g.clone(), [(0, 1.0, 1.0)]).unwrap();
        let bg = Field::constant(g.clone(), 5.0);
        let cfg = OiConfig::new(
            CovarianceParams::isotropic(2.0, 1.0)
                .unwrap()
                .with_scanning_radius(4.0)
                .unwrap(),
            ObsErrorModel::new(0.1).unwrap(),
            0.0,
        )
        .unwrap();
        let a = analyze_localized(&bg, &net, &[9.0], &cfg).unwrap();
        let far = Cell::new(15, 15);
        assert_eq!(a.field.at(far), 5.0);
        assert_eq!(a.pa_diag.at(far), 2.0);
        assert!(a.field.at(Cell::new(1, 1)) > 5.0);
        // radius is inclusive
        assert!(a.field.at(Cell::new(5, 1)) > 5.0);
        assert_eq!(a.field.at(Cell::new(5, 2)), 5.0);
    }

    #[test]
    fn influential_selection_is_nearest_with_id_ties() {
        let g = grid(9, 9);
        let net = ObservationNetwork::new(
            g.clone(),
            [
                (5, 4.0, 6.0),
                (3, 4.0, 2.0),
                (8, 6.0, 4.0),
                (1, 0.0, 0.0),
                (2, 4.0, 5.0),
            ],
        )
        .unwrap();
        let cov = CovarianceParams::isotropic(1.0, 3.0)
            .unwrap()
            .with_max_influential(3)
            .unwrap();
        let sel = select_influential(Cell::new(4, 4), &net, &cov);
        let ids: Vec<u64> = sel.iter().map(|&j| net.sites()[j].station_id).collect();
        // distances: 2 ->1, 3,5,8 -> 2, 1 -> sqrt(32)
        assert_eq!(ids, vec![2, 3, 5]);
    }

    #[test]
    fn series_matches_per_step_and_rejects_mismatch() {
        let g = grid(8, 8);
        let net = Arc::new(sample_stations(&g, 6, 2).unwrap());
        let bg = Field::from_fn(g.clone(), |c| (c.row + c.col) as f64).unwrap();
        let series = FieldSeries::single(bg.clone(), "only");
        let obs = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let batch = ObservationBatch::new(
            net.clone(),
            vec!["only".into()],
            vec![obs.clone()],
            ObsErrorModel::default(),
            0,
        )
        .unwrap();
        let cfg = config(1.0, 2.0, 0.25);
        let res = analyze_series(&series, &batch, &cfg).unwrap();
        let single = analyze_localized(&bg, &net, &obs, &cfg).unwrap();
        assert_eq!(res.analysis.step(0), &single.field);
        assert_eq!(res.pa_diag, single.pa_diag);
        assert_eq!(res.config_echo, cfg);
        let inc = single.increment(&bg);
        for (a, b) in res.increment.step(0).values().iter().zip(inc) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }

        let two = FieldSeries::new(g, vec![bg.clone(), bg], vec!["a".into(), "b".into()]).unwrap();
        assert!(matches!(
            analyze_series(&two, &batch, &cfg),
            Err(Error::StepMismatch { .. })
        ));
    }

    #[test]
    fn per_cell_failure_names_cell_and_stations() {
        let g = grid(3, 3);
        // sigma2 0 at the observed cells but not at (0,0): A = 0 with r = 0
        let s =
            Field::from_fn(g.clone(), |c| if c == Cell::new(0, 0) { 1.0 } else { 0.0 }).unwrap();
        let cov = CovarianceParams::isotropic(1.0, 2.0)
            .unwrap()
            .with_sigma2(Sigma2::Field(s))
            .unwrap();
        let cfg = OiConfig::new(cov, ObsErrorModel::new(0.0).unwrap(), 0.0).unwrap();
        let net = ObservationNetwork::new(g.clone(), [(4, 1.0, 1.0)]).unwrap();
        let e = analyze_localized(&Field::constant(g, 0.0), &net, &[1.0], &cfg).unwrap_err();
        match e {
            Error::Singular {
                cell: Some(c),
                stations,
            } => {
                assert_eq!(c, Cell::new(0, 0));
                assert_eq!(stations, vec![4]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn covariance_forms_agree_at_optimal_gain() {
        let g = grid(2, 3);
        let net = ObservationNetwork::new(g.clone(), [(0, 0.0, 0.0), (1, 1.0, 2.0)]).unwrap();
        let cfg = config(1.3, 1.7, 0.4);
        let cells: Vec<Cell> = g.cells().collect();
        let pb = crate::covariance::build_cov_matrix(&cells, &cfg.cov);
        let h = selection_operator(&net);
        let r = Matrix::diagonal(&[0.4, 0.4]);
        let pht = pb.mul(&h.transpose());
        let k = kalman_gain(&pht, &h.mul(&pht), &r, 0.0).unwrap();
        let joseph = analysis_covariance(&k, &h, &pb, &r);
        let short = optimal_analysis_covariance(&k, &h, &pb);
        assert!(joseph.sub(&short).max_abs() <= 1e-12 * joseph.max_abs());
    }
}
