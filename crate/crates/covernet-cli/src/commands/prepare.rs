//! Balance the manifest, split it, and write the label map.

use std::collections::BTreeSet;

use covernet::data::{
    balance_classes, parse_manifest, resolve_single_class, split, write_split, ClassTable,
    LabelMap,
};

use crate::config::RunConfig;
use crate::error::{io_ctx, require_file, CliError, CliResult};

pub fn run(config: &RunConfig) -> CliResult<()> {
    require_file(&config.manifest)?;
    require_file(&config.class_table)?;

    let manifest_bytes = std::fs::read(&config.manifest).map_err(io_ctx(&config.manifest))?;
    let records = parse_manifest(&manifest_bytes)?;
    let table_bytes = std::fs::read(&config.class_table).map_err(io_ctx(&config.class_table))?;
    let table = ClassTable::parse(&table_bytes)?;
    table.check_records(&records)?;

    let all_ids: BTreeSet<u32> = table.ids().collect();
    for &excluded in &config.exclude_classes {
        if !all_ids.contains(&excluded) {
            return Err(CliError::Conflict(format!(
                "excludeClasses lists {excluded}, which is not in the class table"
            )));
        }
    }
    let included: BTreeSet<u32> = all_ids
        .iter()
        .copied()
        .filter(|id| !config.exclude_classes.contains(id))
        .collect();
    if included.len() < 2 {
        return Err(CliError::Conflict(format!(
            "only {} class(es) remain after exclusions",
            included.len()
        )));
    }

    let resolved = resolve_single_class(&records, config.seed);
    let balanced = balance_classes(&resolved, config.per_class, &included, config.seed)?;
    let manifest = split(&balanced, config.train_frac, config.seed)?;
    let labels = LabelMap::from_records(&balanced);

    write_split(&config.split_dir, &manifest, &labels)?;
    config
        .write_resolved(&config.split_dir)
        .map_err(io_ctx(&config.split_dir))?;

    println!(
        "prepared {} classes: {} records balanced to {} per class, {} train / {} test",
        included.len(),
        records.len(),
        config.per_class,
        manifest.train.len(),
        manifest.test.len(),
    );
    println!("split written to {}", config.split_dir.display());
    Ok(())
}
