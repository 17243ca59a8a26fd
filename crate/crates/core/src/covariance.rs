//! Background and observation error covariance models.
//!
//! The background error covariance between two cells is the separable
//! Gaussian
//!
//! ```text
//! B(a, b) = σ_a σ_b exp(-Σ_k d_k² / L_k²)
//! ```
//!
//! with `d_k` the per-axis grid distance and `L_k` the correlation length
//! along that axis. With a scalar variance this is `σ² exp(-Σ d²/L²)`.

use crate::error::{Error, Result};
use crate::grid::{ensure_same_grid, grid_distance, Cell, Field, FieldSeries};
use crate::linalg::Matrix;

/// Background error variance: one value everywhere or one per cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Sigma2 {
    Scalar(f64),
    Field(Field),
}

impl Sigma2 {
    #[inline]
    pub fn at(&self, cell: Cell) -> f64 {
        match self {
            Sigma2::Scalar(v) => *v,
            Sigma2::Field(f) => f.at(cell),
        }
    }

    #[inline]
    pub fn std_at(&self, cell: Cell) -> f64 {
        self.at(cell).sqrt()
    }

    /// `σ_a σ_b`, exact when both variances are equal.
    #[inline]
    pub fn cross(&self, a: Cell, b: Cell) -> f64 {
        match self {
            Sigma2::Scalar(v) => *v,
            Sigma2::Field(f) => (f.at(a) * f.at(b)).sqrt(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Sigma2::Scalar(v) => *v >= 0.0 && v.is_finite(),
            Sigma2::Field(f) => f.values().iter().all(|v| *v >= 0.0 && v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(
                "background variance must be finite and >= 0".into(),
            ))
        }
    }
}

/// Default cap on observations used per analyzed cell.
pub const DEFAULT_MAX_INFLUENTIAL: usize = 30;

/// Scanning radius as a multiple of the (largest) correlation length.
pub const RADIUS_PER_CORR_LEN: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceParams {
    sigma2: Sigma2,
    corr_len: [f64; 2],
    scanning_radius: f64,
    max_influential: usize,
}

impl CovarianceParams {
    pub fn new(
        sigma2: Sigma2,
        corr_len: [f64; 2],
        scanning_radius: f64,
        max_influential: usize,
    ) -> Result<Self> {
        sigma2.validate()?;
        if !corr_len.iter().all(|l| *l > 0.0 && l.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "correlation lengths must be positive, got {corr_len:?}"
            )));
        }
        if scanning_radius.is_nan() || scanning_radius <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "scanning radius must be positive, got {scanning_radius}"
            )));
        }
        if max_influential == 0 {
            return Err(Error::InvalidParam(
                "max_influential must be at least 1".into(),
            ));
        }
        Ok(CovarianceParams {
            sigma2,
            corr_len,
            scanning_radius,
            max_influential,
        })
    }

    /// Isotropic parameters with the scanning radius tied to `3·L` and the
    /// default influential-observation cap.
    pub fn isotropic(sigma2: f64, corr_len: f64) -> Result<Self> {
        Self::new(
            Sigma2::Scalar(sigma2),
            [corr_len; 2],
            RADIUS_PER_CORR_LEN * corr_len,
            DEFAULT_MAX_INFLUENTIAL,
        )
    }

    pub fn sigma2(&self) -> &Sigma2 {
        &self.sigma2
    }

    pub fn corr_len(&self) -> [f64; 2] {
        self.corr_len
    }

    pub fn scanning_radius(&self) -> f64 {
        self.scanning_radius
    }

    pub fn max_influential(&self) -> usize {
        self.max_influential
    }

    pub fn with_sigma2(mut self, sigma2: Sigma2) -> Result<Self> {
        sigma2.validate()?;
        self.sigma2 = sigma2;
        Ok(self)
    }

    /// Sets an isotropic correlation length and rescales the scanning radius
    /// to `3·L`.
    pub fn with_corr_len(self, corr_len: f64) -> Result<Self> {
        Self::new(
            self.sigma2,
            [corr_len; 2],
            RADIUS_PER_CORR_LEN * corr_len,
            self.max_influential,
        )
    }

    pub fn with_scanning_radius(self, radius: f64) -> Result<Self> {
        Self::new(self.sigma2, self.corr_len, radius, self.max_influential)
    }

    pub fn with_max_influential(self, max_influential: usize) -> Result<Self> {
        Self::new(
            self.sigma2,
            self.corr_len,
            self.scanning_radius,
            max_influential,
        )
    }

    /// Background error correlation between two cells.
    #[inline]
    pub fn correlation(&self, a: Cell, b: Cell) -> f64 {
        let (dr, dc) = grid_distance(a, b);
        let [lr, lc] = self.corr_len;
        (-(dr * dr / (lr * lr) + dc * dc / (lc * lc))).exp()
    }
}

/// Background error covariance between cells `a` and `b`.
pub fn background_cov(a: Cell, b: Cell, params: &CovarianceParams) -> f64 {
    params.sigma2.cross(a, b) * params.correlation(a, b)
}

/// Dense background covariance over a list of points.
pub fn build_cov_matrix(points: &[Cell], params: &CovarianceParams) -> Matrix {
    let n = points.len();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = params.sigma2.at(points[i]);
        for j in 0..i {
            let v = background_cov(points[i], points[j], params);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Observation error model: `R = obs_sigma2 · I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsErrorModel {
    obs_sigma2: f64,
}

impl ObsErrorModel {
    /// Matches the pseudo-observation noise of σ = 0.5 K.
    pub const DEFAULT_SIGMA2: f64 = 0.25;

    pub fn new(obs_sigma2: f64) -> Result<Self> {
        if !(obs_sigma2 >= 0.0 && obs_sigma2.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "observation error variance must be >= 0, got {obs_sigma2}"
            )));
        }
        Ok(ObsErrorModel { obs_sigma2 })
    }

    pub fn obs_sigma2(&self) -> f64 {
        self.obs_sigma2
    }
}

impl Default for ObsErrorModel {
    fn default() -> Self {
        ObsErrorModel {
            obs_sigma2: Self::DEFAULT_SIGMA2,
        }
    }
}

/// Per-cell time mean of `(forecast - nature)²`, divided by the step count.
pub fn estimate_background_variance(nature: &FieldSeries, forecast: &FieldSeries) -> Result<Field> {
    ensure_same_grid(nature.grid(), forecast.grid(), "nature and forecast")?;
    nature.ensure_aligned(forecast)?;
    let n = nature.grid().n_cells();
    let mut acc = vec![0.0; n];
    for (t, f) in nature.steps().iter().zip(forecast.steps()) {
        for ((a, x), y) in acc.iter_mut().zip(t.values()).zip(f.values()) {
            let d = y - x;
            *a += d * d;
        }
    }
    let steps = nature.len() as f64;
    let values = acc
        .into_iter()
        .zip(nature.grid().land_mask())
        .map(|(s, &land)| {
            let v = s / steps;
            // ocean cells may carry NaN; keep the variance field usable
            if land || v.is_finite() {
                v
            } else {
                0.0
            }
        })
        .collect();
    Field::new(nature.grid().clone(), values)
}
