//! Score a checkpoint on the test split and write report files.

use std::path::Path;

use covernet::data::read_split;
use covernet::eval::{confusion_csv, per_class_report, render_table, report_csv};
use covernet::net::params_from_store;

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
    let report = per_class_report(&preds)?;
    let table = render_table(&[(kind.name(), &report)]);

    let out_dir = out.unwrap_or(&config.checkpoint_dir);
    std::fs::create_dir_all(out_dir).map_err(io_ctx(out_dir))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = out_dir.join(name);
        std::fs::write(&path, bytes).map_err(io_ctx(&path))
    };
    write("report.txt", table.as_bytes())?;
    write("report.csv", &report_csv(&report))?;
    write("confusion.csv", &confusion_csv(&report))?;
    config.write_resolved(out_dir).map_err(io_ctx(out_dir))?;

    print!("{table}");
    println!(
        "over chance at k=1,2,3: {:.1}x / {:.1}x / {:.1}x on {} rows",
        report.chance_multiples[0],
        report.chance_multiples[1],
        report.chance_multiples[2],
        report.total_rows,
    );
    println!("reports written to {}", out_dir.display());
    Ok(())
}
