//! Project test-split softmax activations to 2-D plot data.

use std::path::Path;

use covernet::data::read_split;
use covernet::net::params_from_store;
use covernet::projection::{pca_project, projection_csv, projection_svg};

use crate::config::RunConfig;
use crate::error::{io_ctx, require_dir, require_file, CliError, CliResult};

use super::common::{load_store, prediction_set, spec_from_meta, stored_mean};

pub fn run(config: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> CliResult<()> {
    require_dir(&config.split_dir)?;
    require_dir(&config.image_root)?;
    require_file(checkpoint)?;

    let store = load_store(checkpoint)?;
    let meta = store.meta()?;
    let (spec, kind) = spec_from_meta(&meta)?;
    if kind != config.model {
        return Err(CliError::Conflict(format!(
            "checkpoint holds {} but the config says {}",
            kind.name(),
            config.model.name()
        )));
    }
    let params = params_from_store(&spec, &store)?;
    let mean = stored_mean(&store, &meta)?;

    let (split, labels) = read_split(&config.split_dir)?;
    if labels.class_count() != spec.class_count {
        return Err(CliError::Conflict(format!(
            "split has {} classes but the checkpoint head emits {}",
            labels.class_count(),
            spec.class_count
        )));
    }

    let preds = prediction_set(
        &spec,
        &params,
        &split.test,
        &labels,
        &config.image_root,
        mean,
        config.batch_size,
    )?;
    let projection = pca_project(&preds)?;

    let out_dir = out.unwrap_or(&config.checkpoint_dir);
    std::fs::create_dir_all(out_dir).map_err(io_ctx(out_dir))?;
    let csv_path = out_dir.join("projection.csv");
    std::fs::write(&csv_path, projection_csv(&projection, labels.names()))
        .map_err(io_ctx(&csv_path))?;
    let svg_path = out_dir.join("projection.svg");
    std::fs::write(&svg_path, projection_svg(&projection, labels.names()))
        .map_err(io_ctx(&svg_path))?;
    config.write_resolved(out_dir).map_err(io_ctx(out_dir))?;

    println!(
        "projected {} points; explained variance {:.6} / {:.6}",
        projection.points.len(),
        projection.explained_variance[0],
        projection.explained_variance[1],
    );
    println!("plot data written to {}", out_dir.display());
    Ok(())
}
