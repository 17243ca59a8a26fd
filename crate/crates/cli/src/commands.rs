use std::path::Path;
use std::sync::Arc;

use oi_assim::covariance::estimate_background_variance;
use oi_assim::fsv;
use oi_assim::obsnet::{make_pseudo_obs, sample_stations};
use oi_assim::oi::analyze_series;
use oi_assim::osse::{run_osse, synthesize_forecast, synthesize_nature, OsseSetup};
use oi_assim::skill::{domain_mean_rmse, rmse_field, sweep, SkillReport, SweepSpec};
use oi_assim::{FieldSeries, GridSpec, ObsErrorModel, ObservationBatch, Sigma2};

use crate::report::{Report, SweepSummary};
use crate::{CliError, RunConfig};

type Result<T> = std::result::Result<T, CliError>;

fn stage<T>(label: &str, r: oi_assim::Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Core(e.context(label)))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn synthesize(
    config: &RunConfig,
    report: &mut Report,
) -> Result<(Arc<GridSpec>, FieldSeries, FieldSeries)> {
    report.timed("synthesize", || {
        let grid = Arc::new(stage("build grid", config.build_grid())?);
        let params = config.synthesis_params();
        let nature = stage(
            "synthesize nature",
            synthesize_nature(&grid, config.n_steps, &params),
        )?;
        let forecast = stage("synthesize forecast", synthesize_forecast(&nature, &params))?;
        Ok((grid, nature, forecast))
    })
}

fn estimated_sigma2(
    config: &RunConfig,
    nature: &FieldSeries,
    forecast: &FieldSeries,
) -> Result<Option<Sigma2>> {
    if !config.estimates_sigma2() {
        return Ok(None);
    }
    let field = stage(
        "estimate background variance",
        estimate_background_variance(nature, forecast),
    )?;
    Ok(Some(Sigma2::Field(field)))
}

/// Writes nature.fsv, forecast.fsv, stations.csv, obs.csv and report.json.
pub fn cmd_generate(config: &RunConfig, out: &Path) -> Result<Report> {
    ensure_dir(out)?;
    let mut report = Report::new("generate", config);
    let (grid, nature, forecast) = synthesize(config, &mut report)?;
    let seeds = config.seeds();
    let batch = report.timed("observe", || {
        let network = Arc::new(stage(
            "sample stations",
            sample_stations(&grid, config.n_stations, seeds.stations),
        )?);
        stage(
            "make pseudo-observations",
            make_pseudo_obs(&nature, &network, config.noise_sigma, seeds.noise),
        )
    })?;
    let skill = stage("score forecast", SkillReport::compute(&nature, &forecast))?;
    report.forecast_rmse_mean = Some(skill.domain_mean);

    report.timed("write", || -> Result<()> {
        stage("write nature", fsv::write(out.join("nature.fsv"), &nature))?;
        stage(
            "write forecast",
            fsv::write(out.join("forecast.fsv"), &forecast),
        )?;
        stage(
            "write stations",
            batch.network().write_csv(out.join("stations.csv")),
        )?;
        stage("write observations", batch.write_csv(out.join("obs.csv")))
    })?;
    report.write(out)?;
    Ok(report)
}

/// Analyzes `background` with the observations in `obs`; writes
/// analysis.fsv, increment.fsv, pa_diag.fsv and report.json. With `nature`
/// the report carries RMSE scores, and an `"estimate"` variance setting
/// becomes usable.
pub fn cmd_assimilate(
    config: &RunConfig,
    background: &Path,
    obs: &Path,
    nature: Option<&Path>,
    out: &Path,
) -> Result<Report> {
    ensure_dir(out)?;
    let mut report = Report::new("assimilate", config);
    let (bg, batch, nature) = report.timed("read", || -> Result<_> {
        let bg = stage("read background", fsv::read(background))?;
        let obs_error = stage(
            "observation error",
            ObsErrorModel::new(
                config
                    .oi
                    .obs_sigma2
                    .unwrap_or(config.noise_sigma * config.noise_sigma),
            ),
        )?;
        let batch = stage(
            "read observations",
            ObservationBatch::load_csv(obs, bg.grid().clone(), obs_error),
        )?;
        let nature = nature
            .map(|p| stage("read nature", fsv::read(p)))
            .transpose()?;
        Ok((bg, batch, nature))
    })?;
    if batch.labels() != bg.labels() {
        return Err(CliError::Core(
            oi_assim::Error::StepMismatch {
                left: bg.len(),
                right: batch.len(),
            }
            .context("observation steps must match background steps"),
        ));
    }
    if let Some(n) = &nature {
        stage("nature vs background", n.ensure_aligned(&bg))?;
    }

    let sigma2 = match (&nature, config.estimates_sigma2()) {
        (_, false) => None,
        (Some(n), true) => estimated_sigma2(config, n, &bg)?,
        (None, true) => {
            return Err(CliError::Usage(
                "oi.sigma2 = \"estimate\" needs --nature; give a number instead".into(),
            ))
        }
    };
    let oi = stage("analysis configuration", config.oi_config(sigma2))?;
    let result = report.timed("analyze", || {
        stage("analyze", analyze_series(&bg, &batch, &oi))
    })?;

    if let Some(n) = &nature {
        let f = stage("score background", SkillReport::compute(n, &bg))?;
        let a = stage("score analysis", SkillReport::compute(n, &result.analysis))?;
        report.set_skill(f.domain_mean, a.domain_mean);
    }
    report.timed("write", || -> Result<()> {
        stage(
            "write analysis",
            fsv::write(out.join("analysis.fsv"), &result.analysis),
        )?;
        stage(
            "write increment",
            fsv::write(out.join("increment.fsv"), &result.increment),
        )?;
        stage(
            "write pa_diag",
            fsv::write(
                out.join("pa_diag.fsv"),
                &FieldSeries::single(result.pa_diag.clone(), "pa_diag"),
            ),
        )
    })?;
    report.write(out)?;
    Ok(report)
}

/// Domain-mean analysis RMSE over the configured (L, N) axes; writes
/// sweep.csv and report.json.
pub fn cmd_sweep(config: &RunConfig, out: &Path) -> Result<Report> {
    ensure_dir(out)?;
    let mut report = Report::new("sweep", config);
    let (_, nature, forecast) = synthesize(config, &mut report)?;
    let sigma2 = estimated_sigma2(config, &nature, &forecast)?;
    let oi = stage("analysis configuration", config.oi_config(sigma2))?;
    let spec = SweepSpec {
        l_values: config.sweep.l_values.clone(),
        n_values: config.sweep.n_values.clone(),
        seeds: config.sweep_seeds(),
        noise_sigma: config.noise_sigma,
    };
    let result = report.timed("sweep", || {
        stage("sweep", sweep(&nature, &forecast, &spec, &oi))
    })?;
    let skill = stage("score forecast", SkillReport::compute(&nature, &forecast))?;
    report.forecast_rmse_mean = Some(skill.domain_mean);
    report.sweep = Some(SweepSummary {
        seeds: spec.seeds,
        n_values: result.n_values.clone(),
        argmin_l: result.argmin_l.clone(),
    });
    stage("write sweep table", result.write_csv(out.join("sweep.csv")))?;
    report.write(out)?;
    Ok(report)
}

/// Per-cell RMSE between two series, written to rmse.fsv. Returns the
/// evaluation-domain mean.
pub fn cmd_evaluate(a: &Path, b: &Path, out: &Path) -> Result<f64> {
    ensure_dir(out)?;
    let sa = stage("read first series", fsv::read(a))?;
    let sb = stage("read second series", fsv::read(b))?;
    let rmse = stage("rmse", rmse_field(&sa, &sb))?;
    let mean = stage("domain mean", domain_mean_rmse(&rmse, sa.grid()))?;
    stage(
        "write rmse",
        fsv::write(out.join("rmse.fsv"), &FieldSeries::single(rmse, "rmse")),
    )?;
    Ok(mean)
}

/// The whole experiment in one go: synthesis, stations, analysis and
/// scores, with every product written to `out`.
pub fn cmd_osse(config: &RunConfig, out: &Path) -> Result<Report> {
    ensure_dir(out)?;
    let mut report = Report::new("osse", config);
    let grid = Arc::new(stage("build grid", config.build_grid())?);
    let seeds = config.seeds();
    let setup = OsseSetup {
        synthesis: config.synthesis_params(),
        n_steps: config.n_steps,
        n_stations: config.n_stations,
        noise_sigma: config.noise_sigma,
        station_seed: seeds.stations,
        noise_seed: seeds.noise,
        config: stage("analysis configuration", config.oi_config(None))?,
        estimate_sigma2: config.estimates_sigma2(),
    };
    let run = report.timed("run", || stage("osse", run_osse(&grid, &setup)))?;
    report.set_skill(
        run.report.forecast_skill.domain_mean,
        run.report.analysis_skill.domain_mean,
    );
    report.timed("write", || -> Result<()> {
        stage("write products", run.write_fields(out))?;
        stage(
            "write observations",
            run.observations.write_csv(out.join("obs.csv")),
        )
    })?;
    report.write(out)?;
    Ok(report)
}
