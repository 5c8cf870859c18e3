//! Top-k class probabilities for a single image.

use std::path::Path;

use covernet::data::LabelMap;
use covernet::image::load_image;
use covernet::net::params_from_store;
use covernet::tensor::Tensor;

use crate::error::{io_ctx, require_file, CliError, CliResult};

use super::common::{load_store, predict_rows, spec_from_meta, stored_mean};

pub fn run(
    checkpoint: &Path,
    image: &Path,
    k: usize,
    labels: Option<&Path>,
    machine: bool,
) -> CliResult<()> {
    require_file(checkpoint)?;
    require_file(image)?;
    if let Some(path) = labels {
        require_file(path)?;
    }

    let store = load_store(checkpoint)?;
    let meta = store.meta()?;
    let (spec, _) = spec_from_meta(&meta)?;
    let classes = spec.class_count;
    if k == 0 || k > classes {
        return Err(CliError::Arg(format!(
            "k = {k} is outside [1, {classes}]"
        )));
    }
    let names: Vec<String> = match labels {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(io_ctx(path))?;
            let map = LabelMap::parse(&bytes)?;
            if map.class_count() != classes {
                return Err(CliError::Conflict(format!(
                    "label map has {} classes but the checkpoint head emits {}",
                    map.class_count(),
                    classes
                )));
            }
            map.names().to_vec()
        }
        None => (0..classes).map(|i| format!("class{i}")).collect(),
    };

    let params = params_from_store(&spec, &store)?;
    let mean = stored_mean(&store, &meta)?;
    let [height, width, _] = spec.input_shape;
    let pixels = load_image(image, height, width)?;
    let data: Vec<f32> = match mean {
        Some(m) => pixels
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v - m[i % 3])
            .collect(),
        None => pixels.data().to_vec(),
    };
    let batch = Tensor::new(&[1, height, width, 3], data)?;
    let probs = predict_rows(&spec, &params, &batch, 1)?;
    let row = probs.data();

    // Rank descending; equal probabilities admit the lower class index
    // first, matching the evaluation tie rule.
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));

    if machine {
        let line = order[..k]
            .iter()
            .map(|&c| format!("{c}:{}", row[c]))
            .collect::<Vec<_>>()
            .join(" ");
        println!("{line}");
    } else {
        for (rank, &c) in order[..k].iter().enumerate() {
            println!("{}. {} {:.4}", rank + 1, names[c], row[c]);
        }
    }
    Ok(())
}
