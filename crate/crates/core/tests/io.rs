use std::sync::Arc;

use oi_assim::fsv;
use oi_assim::obsnet::ObservationBatch;
use oi_assim::osse::{default_grid, run_osse, OsseSetup};
use oi_assim::ObservationNetwork;

#[test]
fn written_products_read_back_unchanged() {
    let grid = Arc::new(default_grid(4).unwrap());
    let mut setup = OsseSetup::standard(4).unwrap();
    setup.n_steps = 2;
    setup.n_stations = 50;
    let run = run_osse(&grid, &setup).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.write_fields(dir.path()).unwrap();

    assert_eq!(
        fsv::read(dir.path().join("nature.fsv")).unwrap().steps(),
        run.nature.steps()
    );
    assert_eq!(
        fsv::read(dir.path().join("analysis.fsv")).unwrap().steps(),
        run.result.analysis.steps()
    );
    let rmse = fsv::read(dir.path().join("rmse_analysis.fsv")).unwrap();
    assert_eq!(rmse.step(0), &run.report.analysis_skill.rmse_field);

    let stations =
        ObservationNetwork::load_csv(dir.path().join("stations.csv"), grid.clone()).unwrap();
    assert_eq!(stations.sites(), run.network.sites());

    let obs_path = dir.path().join("obs.csv");
    run.observations.write_csv(&obs_path).unwrap();
    let back = ObservationBatch::load_csv(&obs_path, grid, run.observations.error_model()).unwrap();
    assert_eq!(back.steps(), run.observations.steps());
    assert_eq!(back.labels(), run.observations.labels());
}
