use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::{RunConfig, Seeds};
use crate::CliError;

/// Contents of `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: String,
    pub seeds: Seeds,
    pub config_echo: RunConfig,
    pub forecast_rmse_mean: Option<f64>,
    pub analysis_rmse_mean: Option<f64>,
    pub reduction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSummary>,
    pub timings_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub seeds: Vec<u64>,
    pub n_values: Vec<usize>,
    /// Per entry of `n_values`, the correlation length with the lowest
    /// mean RMSE.
    pub argmin_l: Vec<f64>,
}

impl Report {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Report {
            command: command.to_string(),
            seeds: config.seeds(),
            config_echo: config.clone(),
            forecast_rmse_mean: None,
            analysis_rmse_mean: None,
            reduction: None,
            sweep: None,
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn set_skill(&mut self, forecast: f64, analysis: f64) {
        self.forecast_rmse_mean = Some(forecast);
        self.analysis_rmse_mean = Some(analysis);
        self.reduction = (forecast > 0.0).then(|| 1.0 - analysis / forecast);
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings_ms
            .insert(stage.to_string(), start.elapsed().as_secs_f64() * 1e3);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("report.json");
        std::fs::write(&path, self.to_json()).map_err(|e| CliError::io(&path, e))
    }
}
