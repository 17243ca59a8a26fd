//! Station networks, the nearest-neighbour observation operator and
//! pseudo-observation generation.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::covariance::ObsErrorModel;
use crate::error::{Error, Result};
use crate::fsv::fmt_f64;
use crate::grid::{ensure_same_grid, Cell, Field, FieldSeries, GridSpec};
use crate::rng::{derive_seed, rng, stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub station_id: u64,
    pub lat: f64,
    pub lon: f64,
    pub cell: Cell,
}

/// Station sites sorted by id, each snapped to its nearest land cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationNetwork {
    grid: Arc<GridSpec>,
    sites: Vec<Site>,
}

impl ObservationNetwork {
    /// Builds a network from `(station_id, lat, lon)` triples.
    ///
    /// Ids must be unique; every station must map to a land cell inside the
    /// domain.
    pub fn new(
        grid: Arc<GridSpec>,
        stations: impl IntoIterator<Item = (u64, f64, f64)>,
    ) -> Result<Self> {
        let mut sites = Vec::new();
        for (station_id, lat, lon) in stations {
            let cell = grid
                .nearest_grid_index(lat, lon)
                .map_err(|e| Error::InvalidNetwork(format!("station {station_id}: {e}")))?;
            if !grid.is_land(cell) {
                return Err(Error::InvalidNetwork(format!(
                    "station {station_id} at ({lat}, {lon}) falls on ocean cell ({}, {})",
                    cell.row, cell.col
                )));
            }
            sites.push(Site {
                station_id,
                lat,
                lon,
                cell,
            });
        }
        sites.sort_by_key(|s| s.station_id);
        if let Some(w) = sites
            .windows(2)
            .find(|w| w[0].station_id == w[1].station_id)
        {
            return Err(Error::InvalidNetwork(format!(
                "duplicate station id {}",
                w[0].station_id
            )));
        }
        Ok(ObservationNetwork { grid, sites })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn station_ids(&self) -> Vec<u64> {
        self.sites.iter().map(|s| s.station_id).collect()
    }

    pub fn cells(&self) -> Vec<Cell> {
        self.sites.iter().map(|s| s.cell).collect()
    }

    pub fn load_csv(path: impl AsRef<Path>, grid: Arc<GridSpec>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, grid, &path.display().to_string())
    }

    /// Reads `station_id,lat,lon` rows; `source` names the input in errors.
    pub fn read_csv(reader: impl std::io::Read, grid: Arc<GridSpec>, source: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Row {
            station_id: u64,
            lat: f64,
            lon: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        check_header(&mut rdr, &["station_id", "lat", "lon"], source)?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<Row>().enumerate() {
            let r = rec.map_err(|e| Error::format(source, i + 2, e.to_string()))?;
            rows.push((r.station_id, r.lat, r.lon));
        }
        Self::new(grid, rows).map_err(|e| Error::format(source, 0, e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("station_id,lat,lon\n");
        for s in &self.sites {
            out.push_str(&format!(
                "{},{},{}\n",
                s.station_id,
                fmt_f64(s.lat),
                fmt_f64(s.lon)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

fn check_header<R: std::io::Read>(
    rdr: &mut csv::Reader<R>,
    expected: &[&str],
    source: &str,
) -> Result<()> {
    let header = rdr
        .headers()
        .map_err(|e| Error::format(source, 1, e.to_string()))?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::format(
            source,
            1,
            format!(
                "expected header '{}', found '{}'",
                expected.join(","),
                got.join(",")
            ),
        ));
    }
    Ok(())
}

/// Seeded random ordering of all land cells. Any prefix of length `n` is a
/// uniform sample without replacement, so networks of increasing size drawn
/// from one seed are nested.
pub fn station_order(grid: &GridSpec, seed: u64) -> Vec<Cell> {
    let mut cells: Vec<Cell> = grid.cells().filter(|&c| grid.is_land(c)).collect();
    cells.shuffle(&mut rng(derive_seed(seed, stream::STATIONS, 0)));
    cells
}

/// Draws `n` distinct land cells uniformly without replacement. Stations
/// sit at cell centers and get ids `0..n` in draw order.
pub fn sample_stations(grid: &Arc<GridSpec>, n: usize, seed: u64) -> Result<ObservationNetwork> {
    if n == 0 {
        return Err(Error::InvalidParam(
            "station count must be at least 1".into(),
        ));
    }
    let land = grid.land_count();
    if n > land {
        return Err(Error::InvalidParam(format!(
            "requested {n} stations but the grid has only {land} land cells"
        )));
    }
    let order = station_order(grid, seed);
    let stations = order.into_iter().take(n).enumerate().map(|(i, c)| {
        let (lat, lon) = grid.center(c);
        (i as u64, lat, lon)
    });
    ObservationNetwork::new(grid.clone(), stations)
}

/// The observation operator: field values at each site's grid cell.
pub fn apply_h(field: &Field, network: &ObservationNetwork) -> Result<Vec<f64>> {
    ensure_same_grid(field.grid(), network.grid(), "field and station network")?;
    Ok(network.sites.iter().map(|s| field.at(s.cell)).collect())
}

/// Observed values per time step for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    network: Arc<ObservationNetwork>,
    labels: Vec<String>,
    steps: Vec<Vec<f64>>,
    error_model: ObsErrorModel,
    noise_seed: u64,
}

impl ObservationBatch {
    pub fn new(
        network: Arc<ObservationNetwork>,
        labels: Vec<String>,
        steps: Vec<Vec<f64>>,
        error_model: ObsErrorModel,
        noise_seed: u64,
    ) -> Result<Self> {
        if labels.len() != steps.len() {
            return Err(Error::StepMismatch {
                left: labels.len(),
                right: steps.len(),
            });
        }
        for (label, values) in labels.iter().zip(&steps) {
            if values.len() != network.len() {
                return Err(Error::InvalidParam(format!(
                    "step '{label}' has {} values for {} sites",
                    values.len(),
                    network.len()
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParam(format!(
                    "step '{label}' has non-finite observations"
                )));
            }
        }
        Ok(ObservationBatch {
            network,
            labels,
            steps,
            error_model,
            noise_seed,
        })
    }

    pub fn network(&self) -> &Arc<ObservationNetwork> {
        &self.network
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn steps(&self) -> &[Vec<f64>] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn error_model(&self) -> ObsErrorModel {
        self.error_model
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise_seed
    }

    pub fn with_error_model(mut self, error_model: ObsErrorModel) -> Self {
        self.error_model = error_model;
        self
    }

    /// Long-format CSV: `label,station_id,lat,lon,value`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("label,station_id,lat,lon,value\n");
        for (label, values) in self.labels.iter().zip(&self.steps) {
            for (s, v) in self.network.sites.iter().zip(values) {
                out.push_str(&format!(
                    "{label},{},{},{},{}\n",
                    s.station_id,
                    fmt_f64(s.lat),
                    fmt_f64(s.lon),
                    fmt_f64(*v)
                ));
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(
        path: impl AsRef<Path>,
        grid: Arc<GridSpec>,
        error_model: ObsErrorModel,
    ) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, grid, error_model, &path.display().to_string())
    }

    /// Reads the long-format CSV. Every step must report every station;
    /// steps keep their order of first appearance.
    pub fn read_csv(
        reader: impl std::io::Read,
        grid: Arc<GridSpec>,
        error_model: ObsErrorModel,
        source: &str,
    ) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Row {
            label: String,
            station_id: u64,
            lat: f64,
            lon: f64,
            value: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        check_header(
            &mut rdr,
            &["label", "station_id", "lat", "lon", "value"],
            source,
        )?;
        let mut stations: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
        let mut labels: Vec<String> = Vec::new();
        let mut values: Vec<BTreeMap<u64, f64>> = Vec::new();
        for (i, rec) in rdr.deserialize::<Row>().enumerate() {
            let line = i + 2;
            let r = rec.map_err(|e| Error::format(source, line, e.to_string()))?;
            match stations.get(&r.station_id) {
                Some(&(lat, lon)) if lat != r.lat || lon != r.lon => {
                    return Err(Error::format(
                        source,
                        line,
                        format!("station {} changes location", r.station_id),
                    ))
                }
                Some(_) => {}
                None => {
                    stations.insert(r.station_id, (r.lat, r.lon));
                }
            }
            let t = match labels.iter().position(|l| *l == r.label) {
                Some(t) => t,
                None => {
                    labels.push(r.label.clone());
                    values.push(BTreeMap::new());
                    labels.len() - 1
                }
            };
            if values[t].insert(r.station_id, r.value).is_some() {
                return Err(Error::format(
                    source,
                    line,
                    format!(
                        "duplicate value for station {} in step '{}'",
                        r.station_id, r.label
                    ),
                ));
            }
        }
        if labels.is_empty() {
            return Err(Error::format(source, 1, "no observations"));
        }
        let network = ObservationNetwork::new(
            grid,
            stations.iter().map(|(&id, &(lat, lon))| (id, lat, lon)),
        )
        .map_err(|e| Error::format(source, 0, e.to_string()))?;
        let mut steps = Vec::with_capacity(labels.len());
        for (label, vals) in labels.iter().zip(values) {
            if vals.len() != network.len() {
                return Err(Error::format(
                    source,
                    0,
                    format!(
                        "step '{label}' reports {} of {} stations",
                        vals.len(),
                        network.len()
                    ),
                ));
            }
            // BTreeMap iteration is id-ordered, like the network
            steps.push(vals.into_values().collect());
        }
        Self::new(Arc::new(network), labels, steps, error_model, 0)
    }
}

/// Samples the nature run at every site and adds N(0, noise_sigma²) noise.
///
/// Each station draws from its own stream keyed by `(seed, station_id)`, so
/// a station sees the same noise whatever network it belongs to.
pub fn make_pseudo_obs(
    nature: &FieldSeries,
    network: &Arc<ObservationNetwork>,
    noise_sigma: f64,
    seed: u64,
) -> Result<ObservationBatch> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "noise sigma must be >= 0, got {noise_sigma}"
        )));
    }
    ensure_same_grid(
        nature.grid(),
        network.grid(),
        "nature run and station network",
    )?;
    let n_steps = nature.len();
    let mut steps: Vec<Vec<f64>> = nature
        .steps()
        .iter()
        .map(|f| apply_h(f, network))
        .collect::<Result<_>>()?;
    for (i, site) in network.sites.iter().enumerate() {
        let mut r = rng(derive_seed(seed, stream::NOISE, site.station_id));
        for step in steps.iter_mut().take(n_steps) {
            let z: f64 = r.sample(StandardNormal);
            step[i] += noise_sigma * z;
        }
    }
    ObservationBatch::new(
        network.clone(),
        nature.labels().to_vec(),
        steps,
        ObsErrorModel::new(noise_sigma * noise_sigma)?,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;

    fn grid_with(n: usize, mask: Option<Vec<bool>>) -> Arc<GridSpec> {
        let geom = GridGeometry {
            n_lat: n,
            n_lon: n,
            lat0: 50.0,
            lon0: 0.0,
            d_lat: 1.0,
            d_lon: 1.0,
            relaxation_width: 0,
        };
        Arc::new(match mask {
            Some(m) => GridSpec::new(geom, m).unwrap(),
            None => GridSpec::all_land(geom).unwrap(),
        })
    }

    fn series(grid: &Arc<GridSpec>, n_steps: usize, f: impl Fn(usize, Cell) -> f64) -> FieldSeries {
        let steps = (0..n_steps)
            .map(|t| Field::from_fn(grid.clone(), |c| f(t, c)).unwrap())
            .collect();
        FieldSeries::new(
            grid.clone(),
            steps,
            (0..n_steps).map(|t| format!("t{t}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn apply_h_examples() {
        let g = grid_with(10, None);
        let net = sample_stations(&g, 5, 7).unwrap();
        let flat = Field::constant(g.clone(), 280.0);
        assert!(apply_h(&flat, &net).unwrap().iter().all(|&v| v == 280.0));

        let rows = Field::from_fn(g.clone(), |c| c.row as f64).unwrap();
        let one = ObservationNetwork::new(g.clone(), [(1, 53.0, 6.0)]).unwrap();
        assert_eq!(apply_h(&rows, &one).unwrap(), vec![3.0]);

        let ramp = Field::from_fn(g.clone(), |c| (c.row * 10 + c.col) as f64 * 0.5).unwrap();
        let got = apply_h(&ramp, &net).unwrap();
        for (s, v) in net.sites().iter().zip(got) {
            let (r, c) = (
                ((s.lat - 50.0) / 1.0).round() as usize,
                s.lon.round() as usize,
            );
            assert_eq!(v, ramp.values()[r * 10 + c]);
        }
    }

    #[test]
    fn apply_h_rejects_other_grid() {
        let net = sample_stations(&grid_with(4, None), 2, 1).unwrap();
        assert!(apply_h(&Field::constant(grid_with(5, None), 1.0), &net).is_err());
    }

    #[test]
    fn sampling_exhausts_land_cells() {
        let mut mask = vec![true; 16];
        mask[3] = false;
        mask[10] = false;
        let g = grid_with(4, Some(mask));
        let net = sample_stations(&g, 14, 99).unwrap();
        let mut cells = net.cells();
        cells.sort();
        let land: Vec<Cell> = g.cells().filter(|&c| g.is_land(c)).collect();
        assert_eq!(cells, land);
        assert!(sample_stations(&g, 15, 99).is_err());
        assert!(sample_stations(&g, 0, 99).is_err());
    }

    #[test]
    fn sampling_single_land_cell() {
        let mut mask = vec![false; 9];
        mask[5] = true;
        let g = grid_with(3, Some(mask));
        let net = sample_stations(&g, 1, 0).unwrap();
        assert_eq!(net.cells(), vec![Cell::new(1, 2)]);
    }

    #[test]
    fn sampling_is_seeded_and_nested() {
        let g = grid_with(100, None);
        let a = sample_stations(&g, 500, 11).unwrap();
        assert_eq!(a, sample_stations(&g, 500, 11).unwrap());
        assert_ne!(a.cells(), sample_stations(&g, 500, 12).unwrap().cells());
        let big = sample_stations(&g, 600, 11).unwrap();
        assert_eq!(&big.sites()[..500], a.sites());
        let mut cells = big.cells();
        cells.sort();
        cells.dedup();
        assert_eq!(cells.len(), 600);
    }

    #[test]
    fn network_validation() {
        let mut mask = vec![true; 9];
        mask[4] = false;
        let g = grid_with(3, Some(mask));
        assert!(ObservationNetwork::new(g.clone(), [(1, 51.0, 1.0)]).is_err());
        assert!(ObservationNetwork::new(g.clone(), [(1, 45.0, 1.0)]).is_err());
        assert!(ObservationNetwork::new(g.clone(), [(1, 50.0, 0.0), (1, 52.0, 2.0)]).is_err());
        let net = ObservationNetwork::new(g, [(9, 50.2, 0.1), (2, 52.0, 2.0)]).unwrap();
        assert_eq!(net.station_ids(), vec![2, 9]);
        assert_eq!(net.sites()[1].cell, Cell::new(0, 0));
    }

    #[test]
    fn station_csv_round_trip_and_validation() {
        let g = grid_with(6, None);
        let net = sample_stations(&g, 4, 3).unwrap();
        let text = net.to_csv_string();
        assert!(text.starts_with("station_id,lat,lon\n"));
        let back = ObservationNetwork::read_csv(text.as_bytes(), g.clone(), "s.csv").unwrap();
        assert_eq!(back, net);

        let dup = "station_id,lat,lon\n1,50,0\n1,51,1\n";
        assert!(ObservationNetwork::read_csv(dup.as_bytes(), g.clone(), "s").is_err());
        let outside = "station_id,lat,lon\n1,70,0\n";
        assert!(ObservationNetwork::read_csv(outside.as_bytes(), g.clone(), "s").is_err());
        let bad_header = "id,lat,lon\n1,50,0\n";
        let e = ObservationNetwork::read_csv(bad_header.as_bytes(), g, "s").unwrap_err();
        assert!(matches!(e, Error::Format { line: 1, .. }));
    }

    #[test]
    fn noiseless_obs_equal_truth() {
        let g = grid_with(8, None);
        let nature = series(&g, 3, |t, c| 280.0 + t as f64 + 0.1 * c.col as f64);
        let net = Arc::new(sample_stations(&g, 10, 5).unwrap());
        let batch = make_pseudo_obs(&nature, &net, 0.0, 77).unwrap();
        for (t, obs) in batch.steps().iter().enumerate() {
            assert_eq!(obs, &apply_h(nature.step(t), &net).unwrap());
        }
        assert_eq!(batch.error_model().obs_sigma2(), 0.0);
        assert_eq!(batch.noise_seed(), 77);
        assert!(make_pseudo_obs(&nature, &net, -1.0, 77).is_err());
    }

    #[test]
    fn pseudo_obs_noise_statistics() {
        let g = grid_with(100, None);
        let nature = series(&g, 12, |t, c| 275.0 + (c.row as f64 * 0.1).sin() + t as f64);
        let net = Arc::new(sample_stations(&g, 500, 21).unwrap());
        let batch = make_pseudo_obs(&nature, &net, 0.5, 2024).unwrap();
        assert_eq!(batch.error_model().obs_sigma2(), 0.25);
        let mut errs = Vec::with_capacity(6000);
        for (t, obs) in batch.steps().iter().enumerate() {
            let truth = apply_h(nature.step(t), &net).unwrap();
            errs.extend(obs.iter().zip(truth).map(|(o, x)| o - x));
        }
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.07, "mean {mean}");
        assert!((0.2..=0.3).contains(&var), "variance {var}");
    }

    #[test]
    fn pseudo_obs_reproducible_and_network_independent() {
        let g = grid_with(20, None);
        let nature = series(&g, 4, |_, c| c.row as f64);
        let small = Arc::new(sample_stations(&g, 10, 1).unwrap());
        let big = Arc::new(sample_stations(&g, 30, 1).unwrap());
        let a = make_pseudo_obs(&nature, &small, 0.5, 9).unwrap();
        assert_eq!(a, make_pseudo_obs(&nature, &small, 0.5, 9).unwrap());
        let b = make_pseudo_obs(&nature, &big, 0.5, 9).unwrap();
        for (x, y) in a.steps().iter().zip(b.steps()) {
            assert_eq!(&x[..], &y[..10]);
        }
    }

    #[test]
    fn obs_csv_round_trip() {
        let g = grid_with(6, None);
        let nature = series(&g, 2, |t, c| t as f64 + c.col as f64);
        let net = Arc::new(sample_stations(&g, 5, 8).unwrap());
        let batch = make_pseudo_obs(&nature, &net, 0.3, 4).unwrap();
        let text = batch.to_csv_string();
        let back =
            ObservationBatch::read_csv(text.as_bytes(), g.clone(), batch.error_model(), "o.csv")
                .unwrap();
        assert_eq!(back.steps(), batch.steps());
        assert_eq!(back.labels(), batch.labels());
        assert_eq!(back.network().sites(), net.sites());

        let missing: String = text
            .lines()
            .take(text.lines().count() - 1)
            .collect::<Vec<_>>()
            .join("\n");
        assert!(
            ObservationBatch::read_csv(missing.as_bytes(), g, batch.error_model(), "o").is_err()
        );
    }
}
