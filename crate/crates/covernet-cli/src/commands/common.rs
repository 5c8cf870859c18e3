//! Plumbing shared by the inference-side commands: checkpoint loading,
//! topology reconstruction from stored metadata, and batched forward
//! passes over record lists.

use std::path::Path;

use covernet::checkpoint::{load_weights, StoreMeta, WeightStore};
use covernet::data::{BookRecord, LabelMap};
use covernet::eval::PredictionSet;
use covernet::image::{load_image, ImageError};
use covernet::layers::PassMode;
use covernet::net::{
    build_alexnet30, build_lenet_variant_with, forward, LayerKind, ModelKind, NetworkSpec, Params,
    StepRng,
};
use covernet::tensor::Tensor;

use crate::error::{io_ctx, CliError, CliResult};

pub fn load_store(path: &Path) -> CliResult<WeightStore> {
    let bytes = std::fs::read(path).map_err(io_ctx(path))?;
    Ok(load_weights(&bytes)?)
}

/// Rebuilds the network a checkpoint was trained with from its stored
/// metadata: model code, pool-stride flag, and head width.
pub fn spec_from_meta(meta: &StoreMeta) -> CliResult<(NetworkSpec, ModelKind)> {
    let kind = ModelKind::from_code(meta.model_code)?;
    let mut spec = match kind {
        ModelKind::AlexNet30 => build_alexnet30(),
        ModelKind::LenetVariant => build_lenet_variant_with(
            meta.flags & StoreMeta::FLAG_LITERAL_POOL_STRIDE != 0,
        ),
    };
    let classes = meta.class_count as usize;
    if classes != spec.class_count {
        // The head was replaced after the builder ran; mirror that.
        spec.class_count = classes;
        let head = spec
            .layers
            .iter_mut()
            .rev()
            .find(|l| matches!(l.kind, LayerKind::Linear { .. }))
            .ok_or(covernet::net::NetError::MissingHead)?;
        head.kind = LayerKind::Linear {
            out_features: classes,
        };
    }
    spec.validate()?;
    Ok((spec, kind))
}

/// The per-channel mean a checkpoint says it was trained with, if the
/// mean-subtract flag is set. Flag without stored mean is a broken file.
pub fn stored_mean(store: &WeightStore, meta: &StoreMeta) -> CliResult<Option<[f32; 3]>> {
    if meta.flags & StoreMeta::FLAG_MEAN_SUBTRACT == 0 {
        return Ok(None);
    }
    store
        .channel_mean()
        .map(Some)
        .ok_or_else(|| CliError::Conflict(
            "checkpoint sets the mean-subtract flag but stores no channel mean".to_string(),
        ))
}

/// Loads records in manifest order into one `[n,H,W,3]` tensor plus
/// dense labels. Unreadable images are skipped and reported; the rows
/// that remain stay aligned with the returned labels.
pub fn load_rows(
    records: &[BookRecord],
    labels: &LabelMap,
    image_root: &Path,
    height: usize,
    width: usize,
    mean: Option<[f32; 3]>,
) -> CliResult<(Tensor<f32>, Vec<usize>, Vec<(String, ImageError)>)> {
    let mut data = Vec::new();
    let mut dense = Vec::new();
    let mut skipped = Vec::new();
    for record in records {
        let label = labels.dense(record.class_id).ok_or_else(|| {
            CliError::Conflict(format!(
                "record {:?}: class {} is not in the label map",
                record.id, record.class_id
            ))
        })?;
        match load_image(&image_root.join(&record.image_file), height, width) {
            Ok(image) => {
                match mean {
                    Some(m) => data.extend(
                        image
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| v - m[i % 3]),
                    ),
                    None => data.extend_from_slice(image.data()),
                }
                dense.push(label);
            }
            Err(err) => skipped.push((record.id.clone(), err)),
        }
    }
    if dense.is_empty() {
        return Err(CliError::Numerical(
            "no record produced a loadable image".to_string(),
        ));
    }
    let n = dense.len();
    let images = Tensor::new(&[n, height, width, 3], data)?;
    Ok((images, dense, skipped))
}

/// Runs inference in chunks and assembles one probability matrix.
pub fn predict_rows(
    spec: &NetworkSpec,
    params: &Params<f32>,
    images: &Tensor<f32>,
    chunk_rows: usize,
) -> CliResult<Tensor<f32>> {
    let shape = images.shape().to_vec();
    let n = shape[0];
    let row_len: usize = shape[1..].iter().product();
    let classes = spec.class_count;
    let mut probs = Vec::with_capacity(n * classes);
    let mut start = 0;
    while start < n {
        let count = chunk_rows.min(n - start);
        let mut chunk_shape = shape.clone();
        chunk_shape[0] = count;
        let chunk = Tensor::new(
            &chunk_shape,
            images.data()[start * row_len..(start + count) * row_len].to_vec(),
        )?;
        let out = forward(
            spec,
            params,
            &chunk,
            PassMode::Infer,
            StepRng { seed: 0, step: 0 },
        )?;
        probs.extend_from_slice(out.data());
        start += count;
    }
    Ok(Tensor::new(&[n, classes], probs)?)
}

/// Full inference pipeline for report-producing commands: test split
/// rows through the checkpointed network into a prediction set.
pub fn prediction_set(
    spec: &NetworkSpec,
    params: &Params<f32>,
    records: &[BookRecord],
    labels: &LabelMap,
    image_root: &Path,
    mean: Option<[f32; 3]>,
    chunk_rows: usize,
) -> CliResult<PredictionSet> {
    let [height, width, _] = spec.input_shape;
    let (images, dense, skipped) =
        load_rows(records, labels, image_root, height, width, mean)?;
    for (id, err) in &skipped {
        eprintln!("skipping {id}: {err}");
    }
    let probs = predict_rows(spec, params, &images, chunk_rows)?;
    Ok(PredictionSet::new(
        probs,
        dense,
        labels.names().to_vec(),
    )?)
}
