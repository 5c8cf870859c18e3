//! Deterministic batching over a split manifest.
//!
//! The shuffle for epoch `e` is a pure function of `(seed, e)`, so any
//! global step maps to one batch whose contents can be regenerated at
//! will: resuming a run replays the identical sequence. Records whose
//! image fails to load are skipped and reported, never silently dropped.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{BookRecord, LabelMap};
use crate::image::{self, ImageError};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("no records to batch")]
    NoRecords,
    #[error("record {id:?}: class {class_id} is not in the label map")]
    UnmappedClass { id: String, class_id: u32 },
    #[error("every record in batch {index} of epoch {epoch} failed to load")]
    EmptyBatch { epoch: u64, index: usize },
    #[error("no record produced a loadable image")]
    NothingLoadable,
}

/// One delivered batch. `images` is `[k,H,W,3]` where `k` counts the
/// records that loaded; `skipped` lists the ones that did not.
#[derive(Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub skipped: Vec<(String, ImageError)>,
}

/// Batching schedule over one record list.
#[derive(Debug, Clone)]
pub struct BatchPlan<'a> {
    records: &'a [BookRecord],
    labels: &'a LabelMap,
    image_root: PathBuf,
    target_h: usize,
    target_w: usize,
    batch_size: usize,
    seed: u64,
    /// Per-channel value subtracted from every loaded pixel.
    mean: Option<[f32; 3]>,
}

impl<'a> BatchPlan<'a> {
    pub fn new(
        records: &'a [BookRecord],
        labels: &'a LabelMap,
        image_root: &Path,
        target_h: usize,
        target_w: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, BatchError> {
        if batch_size == 0 {
            return Err(BatchError::ZeroBatchSize);
        }
        if records.is_empty() {
            return Err(BatchError::NoRecords);
        }
        Ok(Self {
            records,
            labels,
            image_root: image_root.to_path_buf(),
            target_h,
            target_w,
            batch_size,
            seed,
            mean: None,
        })
    }

    pub fn with_mean(mut self, mean: Option<[f32; 3]>) -> Self {
        self.mean = mean;
        self
    }

    /// Record indices for one epoch, shuffled on the epoch's own stream.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        let mut stream = rng::stream(self.seed, domain::SHUFFLE, &[epoch]);
        rng::shuffle(&mut order, &mut stream);
        order
    }

    /// Batches per epoch; the final short batch counts.
    pub fn batches_per_epoch(&self) -> usize {
        self.records.len().div_ceil(self.batch_size)
    }

    /// Maps a global step to (epoch, batch index within the epoch).
    pub fn locate(&self, step: u64) -> (u64, usize) {
        let per = self.batches_per_epoch() as u64;
        (step / per, (step % per) as usize)
    }

    /// The records batch `index` of `epoch` draws, in delivery order.
    pub fn batch_records(&self, epoch: u64, index: usize) -> Vec<&'a BookRecord> {
        let order = self.epoch_order(epoch);
        let lo = index * self.batch_size;
        let hi = (lo + self.batch_size).min(order.len());
        order[lo..hi].iter().map(|&i| &self.records[i]).collect()
    }

    /// Loads one batch: decode, resize, scale, optional mean
    /// subtraction. Unloadable records are skipped and reported in
    /// `Batch::skipped`.
    pub fn load_batch(&self, epoch: u64, index: usize) -> Result<Batch, BatchError> {
        let members = self.batch_records(epoch, index);
        let mut labels = Vec::with_capacity(members.len());
        let mut data = Vec::with_capacity(members.len() * self.target_h * self.target_w * 3);
        let mut skipped = Vec::new();
        for record in members {
            let dense = self
                .labels
                .dense(record.class_id)
                .ok_or_else(|| BatchError::UnmappedClass {
                    id: record.id.clone(),
                    class_id: record.class_id,
                })?;
            let path = self.image_root.join(&record.image_file);
            match image::load_image(&path, self.target_h, self.target_w) {
                Ok(tensor) => {
                    match self.mean {
                        Some(mean) => data.extend(
                            tensor
                                .data()
                                .iter()
                                .enumerate()
                                .map(|(i, &v)| v - mean[i % 3]),
                        ),
                        None => data.extend_from_slice(tensor.data()),
                    }
                    labels.push(dense);
                }
                Err(err) => skipped.push((record.id.clone(), err)),
            }
        }
        if labels.is_empty() {
            return Err(BatchError::EmptyBatch { epoch, index });
        }
        let images = Tensor::new(
            &[labels.len(), self.target_h, self.target_w, 3],
            data,
        )
        .expect("loader emits fixed-size tensors");
        Ok(Batch {
            images,
            labels,
            skipped,
        })
    }
}

/// Per-channel mean over every loadable record's resized pixels,
/// accumulated in f64. Returns the mean and the ids that failed to load.
pub fn channel_mean(
    records: &[BookRecord],
    image_root: &Path,
    target_h: usize,
    target_w: usize,
) -> Result<([f32; 3], Vec<(String, ImageError)>), BatchError> {
    let mut sums = [0f64; 3];
    let mut count = 0u64;
    let mut skipped = Vec::new();
    for record in records {
        let path = image_root.join(&record.image_file);
        match image::load_image(&path, target_h, target_w) {
            Ok(tensor) => {
                for (i, &v) in tensor.data().iter().enumerate() {
                    sums[i % 3] += f64::from(v);
                }
                count += (target_h * target_w) as u64;
            }
            Err(err) => skipped.push((record.id.clone(), err)),
        }
    }
    if count == 0 {
        return Err(BatchError::NothingLoadable);
    }
    Ok((
        [
            (sums[0] / count as f64) as f32,
            (sums[1] / count as f64) as f32,
            (sums[2] / count as f64) as f32,
        ],
        skipped,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{encode_ppm, RgbImage};
    use std::collections::BTreeSet;

    /// 23 records across classes {3, 7}; each image is a solid color
    /// whose red channel encodes the record index.
    fn fixture(dir: &Path) -> Vec<BookRecord> {
        (0..23)
            .map(|i| {
                let file = format!("cover{i}.ppm");
                let img = RgbImage::new(4, 4, vec![i as u8; 4 * 4 * 3]);
                std::fs::write(dir.join(&file), encode_ppm(&img)).unwrap();
                let class_id = if i % 2 == 0 { 3 } else { 7 };
                BookRecord {
                    id: format!("book{i}"),
                    image_file: file,
                    image_url: String::new(),
                    title: format!("title {i}"),
                    author: "a".into(),
                    class_id,
                    class_name: format!("class{class_id}"),
                }
            })
            .collect()
    }

    #[test]
    fn epoch_orders_are_stable_distinct_permutations() {
        let dir = tempfile::tempdir().unwrap();
        let records = fixture(dir.path());
        let labels = LabelMap::from_records(&records);
        let plan = BatchPlan::new(&records, &labels, dir.path(), 4, 4, 10, 5).unwrap();
        let e0 = plan.epoch_order(0);
        let e0b = plan.epoch_order(0);
        let e1 = plan.epoch_order(1);
        assert_eq!(e0, e0b);
        assert_ne!(e0, e1);
        let sorted: BTreeSet<usize> = e0.iter().copied().collect();
        assert_eq!(sorted.len(), 23);
        assert_eq!(
            e0.iter().copied().collect::<BTreeSet<_>>(),
            e1.iter().copied().collect::<BTreeSet<_>>()
        );
    }

    #[test]
    fn final_short_batch_is_emitted() {
        let dir = tempfile::tempdir().unwrap();
        let records = fixture(dir.path());
        let labels = LabelMap::from_records(&records);
        let plan = BatchPlan::new(&records, &labels, dir.path(), 4, 4, 10, 5).unwrap();
        assert_eq!(plan.batches_per_epoch(), 3);
        assert_eq!(plan.locate(7), (2, 1));
        let sizes: Vec<usize> = (0..3)
            .map(|i| plan.load_batch(0, i).unwrap().labels.len())
            .collect();
        assert_eq!(sizes, [10, 10, 3]);
        let b0 = plan.load_batch(0, 0).unwrap();
        assert_eq!(b0.images.shape(), &[10, 4, 4, 3]);
        assert!(b0.skipped.is_empty());
    }

    #[test]
    fn batch_size_one_delivers_shuffle_order() {
        let dir = tempfile::tempdir().unwrap();
        let records = fixture(dir.path());
        let labels = LabelMap::from_records(&records);
        let plan = BatchPlan::new(&records, &labels, dir.path(), 4, 4, 1, 9).unwrap();
        let order = plan.epoch_order(3);
        for (i, &rec_idx) in order.iter().enumerate().take(6) {
            let batch = plan.load_batch(3, i).unwrap();
            // Red channel encodes the record index.
            let red = batch.images.at4(0, 0, 0, 0);
            assert_eq!(red, rec_idx as f32 / 255.0);
        }
    }

    #[test]
    fn labels_are_dense_experiment_indices() {
        let dir = tempfile::tempdir().unwrap();
        let records = fixture(dir.path());
        let labels = LabelMap::from_records(&records);
        let plan = BatchPlan::new(&records, &labels, dir.path(), 4, 4, 23, 5).unwrap();
        let batch = plan.load_batch(0, 0).unwrap();
        // Classes {3, 7} remap to {0, 1}.
        assert!(batch.labels.iter().all(|&l| l < 2));
        assert!(batch.labels.contains(&0) && batch.labels.contains(&1));
    }

    #[test]
    fn dead_record_is_skipped_and_named() {
        let dir = tempfile::tempdir().unwrap();
        let records = fixture(dir.path());
        let labels = LabelMap::from_records(&records);
        std::fs::remove_file(dir.path().join("cover0.ppm")).unwrap();
        let plan = BatchPlan::new(&records, &labels, dir.path(), 4, 4, 23, 5).unwrap();
        let batch = plan.load_batch(0, 0).unwrap();
        assert_eq!(batch.labels.len(), 22);
        assert_eq!(batch.skipped.len(), 1);
        assert_eq!(batch.skipped[0].0, "book0");
    }

    #[test]
    fn mean_subtraction_shifts_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let records = fixture(dir.path());
        let labels = LabelMap::from_records(&records);
        let mean = [0.25f32, 0.5, 0.125];
        let plan = BatchPlan::new(&records, &labels, dir.path(), 4, 4, 1, 5)
            .unwrap()
            .with_mean(Some(mean));
        let raw_plan = BatchPlan::new(&records, &labels, dir.path(), 4, 4, 1, 5).unwrap();
        let shifted = plan.load_batch(0, 0).unwrap();
        let raw = raw_plan.load_batch(0, 0).unwrap();
        for i in 0..raw.images.len() {
            assert_eq!(
                shifted.images.data()[i],
                raw.images.data()[i] - mean[i % 3]
            );
        }
    }

    #[test]
    fn channel_mean_matches_hand_average() {
        let dir = tempfile::tempdir().unwrap();
        // Two solid images: (51,102,153) and (153,102,51).
        let mut records = Vec::new();
        for (i, px) in [[51u8, 102, 153], [153, 102, 51]].iter().enumerate() {
            let file = format!("m{i}.ppm");
            let img = RgbImage::new(2, 2, px.repeat(4));
            std::fs::write(dir.path().join(&file), encode_ppm(&img)).unwrap();
            records.push(BookRecord {
                id: format!("m{i}"),
                image_file: file,
                image_url: String::new(),
                title: String::new(),
                author: String::new(),
                class_id: 0,
                class_name: "c".into(),
            });
        }
        let (mean, skipped) = channel_mean(&records, dir.path(), 2, 2).unwrap();
        assert!(skipped.is_empty());
        assert!((mean[0] - 102.0 / 255.0).abs() < 1e-6);
        assert!((mean[1] - 102.0 / 255.0).abs() < 1e-6);
        assert!((mean[2] - 102.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn twentynine_batches_for_test_split_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let records = fixture(dir.path());
        let labels = LabelMap::from_records(&records);
        // Geometry only: 5,700 records at 200 per batch is 29 batches.
        let plan = BatchPlan::new(&records, &labels, dir.path(), 4, 4, 200, 5).unwrap();
        assert_eq!(5_700usize.div_ceil(200), 29);
        assert_eq!(plan.batches_per_epoch(), 1);
    }
}
