//! Regular lat/lon grids, land masks, evaluation-domain trimming and the
//! field containers the rest of the crate operates on.
//!
//! All distances used by the covariance model are measured in grid steps,
//! not kilometres.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A (row, col) grid index. Row runs along latitude, col along longitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }
}

impl From<(usize, usize)> for Cell {
    fn from((row, col): (usize, usize)) -> Self {
        Cell { row, col }
    }
}

/// Grid geometry without the mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridGeometry {
    pub n_lat: usize,
    pub n_lon: usize,
    pub lat0: f64,
    pub lon0: f64,
    pub d_lat: f64,
    pub d_lon: f64,
    pub relaxation_width: usize,
}

impl GridGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.n_lat == 0 || self.n_lon == 0 {
            return Err(Error::InvalidGrid(format!(
                "grid must have at least one row and column, got {}x{}",
                self.n_lat, self.n_lon
            )));
        }
        if !(self.d_lat > 0.0
            && self.d_lat.is_finite()
            && self.d_lon > 0.0
            && self.d_lon.is_finite())
        {
            return Err(Error::InvalidGrid(format!(
                "grid steps must be positive, got d_lat={} d_lon={}",
                self.d_lat, self.d_lon
            )));
        }
        if !(self.lat0.is_finite() && self.lon0.is_finite()) {
            return Err(Error::InvalidGrid("grid origin must be finite".into()));
        }
        if 2 * self.relaxation_width >= self.n_lat.min(self.n_lon) {
            return Err(Error::InvalidGrid(format!(
                "relaxation width {} leaves no evaluation domain on a {}x{} grid",
                self.relaxation_width, self.n_lat, self.n_lon
            )));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_lat * self.n_lon
    }
}

/// Regular grid with land mask. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    geometry: GridGeometry,
    land_mask: Vec<bool>,
}

impl GridSpec {
    pub fn new(geometry: GridGeometry, land_mask: Vec<bool>) -> Result<Self> {
        geometry.validate()?;
        if land_mask.len() != geometry.n_cells() {
            return Err(Error::InvalidGrid(format!(
                "land mask has {} entries, expected {}",
                land_mask.len(),
                geometry.n_cells()
            )));
        }
        Ok(GridSpec {
            geometry,
            land_mask,
        })
    }

    pub fn all_land(geometry: GridGeometry) -> Result<Self> {
        let n = geometry.n_cells();
        Self::new(geometry, vec![true; n])
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn n_lat(&self) -> usize {
        self.geometry.n_lat
    }

    pub fn n_lon(&self) -> usize {
        self.geometry.n_lon
    }

    pub fn n_cells(&self) -> usize {
        self.geometry.n_cells()
    }

    pub fn relaxation_width(&self) -> usize {
        self.geometry.relaxation_width
    }

    pub fn land_mask(&self) -> &[bool] {
        &self.land_mask
    }

    pub fn is_land(&self, cell: Cell) -> bool {
        self.land_mask[self.index(cell)]
    }

    pub fn land_count(&self) -> usize {
        self.land_mask.iter().filter(|&&l| l).count()
    }

    /// Flat row-major index of `cell`.
    #[inline]
    pub fn index(&self, cell: Cell) -> usize {
        debug_assert!(self.contains(cell));
        cell.row * self.geometry.n_lon + cell.col
    }

    #[inline]
    pub fn cell(&self, index: usize) -> Cell {
        Cell::new(index / self.geometry.n_lon, index % self.geometry.n_lon)
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.row < self.geometry.n_lat && cell.col < self.geometry.n_lon
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.n_cells()).map(|i| self.cell(i))
    }

    /// Coordinates (lat, lon) of the cell center.
    pub fn center(&self, cell: Cell) -> (f64, f64) {
        let g = &self.geometry;
        (
            g.lat0 + cell.row as f64 * g.d_lat,
            g.lon0 + cell.col as f64 * g.d_lon,
        )
    }

    /// Grid cell nearest to (lat, lon).
    ///
    /// Ties go to the smaller row, then the smaller column. Points more than
    /// one grid step outside the bounding box are rejected.
    pub fn nearest_grid_index(&self, lat: f64, lon: f64) -> Result<Cell> {
        if !(lat.is_finite() && lon.is_finite()) {
            return Err(Error::OutsideDomain { lat, lon });
        }
        let g = &self.geometry;
        let row = nearest_axis(lat, g.lat0, g.d_lat, g.n_lat);
        let col = nearest_axis(lon, g.lon0, g.d_lon, g.n_lon);
        match (row, col) {
            (Some(row), Some(col)) => Ok(Cell::new(row, col)),
            _ => Err(Error::OutsideDomain { lat, lon }),
        }
    }

    /// True for land cells at least `relaxation_width` cells from every
    /// lateral boundary.
    pub fn evaluation_mask(&self) -> Vec<bool> {
        let w = self.geometry.relaxation_width;
        let (n_lat, n_lon) = (self.geometry.n_lat, self.geometry.n_lon);
        self.cells()
            .map(|c| {
                self.land_mask[self.index(c)]
                    && c.row >= w
                    && c.row + w < n_lat
                    && c.col >= w
                    && c.col + w < n_lon
            })
            .collect()
    }
}

/// Nearest index along one axis; `None` if more than one step outside.
fn nearest_axis(x: f64, origin: f64, step: f64, n: usize) -> Option<usize> {
    let last = origin + (n - 1) as f64 * step;
    if x < origin - step || x > last + step {
        return None;
    }
    let pos = ((x - origin) / step).floor();
    if pos < 0.0 {
        return Some(0);
    }
    let lo = pos as usize;
    if lo >= n - 1 {
        return Some(n - 1);
    }
    let d_lo = (x - (origin + lo as f64 * step)).abs();
    let d_hi = (x - (origin + (lo + 1) as f64 * step)).abs();
    Some(if d_hi < d_lo { lo + 1 } else { lo })
}

/// Per-axis distance between two cells in grid units.
pub fn grid_distance(a: Cell, b: Cell) -> (f64, f64) {
    (a.row.abs_diff(b.row) as f64, a.col.abs_diff(b.col) as f64)
}

/// A single scalar snapshot (Kelvin), row-major by (row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Arc<GridSpec>,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Arc<GridSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::GridMismatch(format!(
                "field has {} values, grid has {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        if let Some(i) = values
            .iter()
            .zip(grid.land_mask())
            .position(|(v, &land)| land && !v.is_finite())
        {
            let c = grid.cell(i);
            return Err(Error::InvalidParam(format!(
                "non-finite value at land cell ({}, {})",
                c.row, c.col
            )));
        }
        Ok(Field { grid, values })
    }

    pub fn constant(grid: Arc<GridSpec>, value: f64) -> Self {
        let n = grid.n_cells();
        Field {
            grid,
            values: vec![value; n],
        }
    }

    pub fn from_fn(grid: Arc<GridSpec>, f: impl Fn(Cell) -> f64) -> Result<Self> {
        let values = grid.cells().map(f).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, cell: Cell) -> f64 {
        self.values[self.grid.index(cell)]
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        same_grid(&self.grid, &other.grid)
    }
}

pub(crate) fn same_grid(a: &Arc<GridSpec>, b: &Arc<GridSpec>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

pub(crate) fn ensure_same_grid(a: &Arc<GridSpec>, b: &Arc<GridSpec>, what: &str) -> Result<()> {
    if same_grid(a, b) {
        Ok(())
    } else {
        Err(Error::GridMismatch(format!(
            "{what} are defined on different grids"
        )))
    }
}

/// A time sequence of fields on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    grid: Arc<GridSpec>,
    steps: Vec<Field>,
    labels: Vec<String>,
}

impl FieldSeries {
    pub fn new(grid: Arc<GridSpec>, steps: Vec<Field>, labels: Vec<String>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidParam(
                "a field series needs at least one step".into(),
            ));
        }
        if steps.len() != labels.len() {
            return Err(Error::InvalidParam(format!(
                "{} steps but {} time labels",
                steps.len(),
                labels.len()
            )));
        }
        for f in &steps {
            ensure_same_grid(&grid, f.grid(), "series snapshots")?;
        }
        Ok(FieldSeries {
            grid,
            steps,
            labels,
        })
    }

    /// Builds a one-step series; labels it `label`.
    pub fn single(field: Field, label: impl Into<String>) -> Self {
        FieldSeries {
            grid: field.grid().clone(),
            steps: vec![field],
            labels: vec![label.into()],
        }
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[Field] {
        &self.steps
    }

    pub fn step(&self, t: usize) -> &Field {
        &self.steps[t]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Errors unless `other` lives on the same grid with the same step count.
    pub fn ensure_aligned(&self, other: &FieldSeries) -> Result<()> {
        ensure_same_grid(&self.grid, &other.grid, "field series")?;
        if self.len() != other.len() {
            return Err(Error::StepMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(())
    }
}
