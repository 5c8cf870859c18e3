//! Accuracy reporting over class-probability predictions.
//!
//! Top-k membership uses an explicit tie rule: the true label is in the
//! top k when fewer than k classes beat it, counting equal-probability
//! classes with a lower index as beating it. Zero-initialized nets emit
//! exactly uniform rows, so ties are a real case, not a corner.

use std::fmt::Write as _;

use thiserror::Error;

use crate::tensor::Tensor;

/// Tolerance on each probability row's sum.
pub const ROW_SUM_TOL: f32 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("predictions must be a nonempty [rows, classes] matrix, got {0:?}")]
    BadShape(Vec<usize>),
    #[error("probability row {row} sums to {sum}, not 1")]
    RowSum { row: usize, sum: f32 },
    #[error("row {row}: label {label} is outside [0, {classes})")]
    LabelRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("{names} class names for {classes} classes")]
    NameCount { names: usize, classes: usize },
    #[error("{labels} labels for {rows} prediction rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("k = {k} is outside [1, {classes}]")]
    KRange { k: usize, classes: usize },
    #[error("class {class} is outside [0, {classes})")]
    ClassRange { class: usize, classes: usize },
}

/// Model outputs over one evaluation set: probability rows, true dense
/// labels, and display names for every class.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    probs: Tensor<f32>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl PredictionSet {
    pub fn new(
        probs: Tensor<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self, EvalError> {
        if probs.rank() != 2 || probs.shape()[0] == 0 {
            return Err(EvalError::BadShape(probs.shape().to_vec()));
        }
        let (rows, classes) = (probs.shape()[0], probs.shape()[1]);
        if class_names.len() != classes {
            return Err(EvalError::NameCount {
                names: class_names.len(),
                classes,
            });
        }
        if labels.len() != rows {
            return Err(EvalError::LabelCount {
                labels: labels.len(),
                rows,
            });
        }
        for (row, chunk) in probs.data().chunks(classes).enumerate() {
            let sum: f32 = chunk.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(EvalError::RowSum { row, sum });
            }
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(EvalError::LabelRange {
                    row,
                    label,
                    classes,
                });
            }
        }
        Ok(Self {
            probs,
            labels,
            class_names,
        })
    }

    pub fn rows(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn class_count(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn probs(&self) -> &Tensor<f32> {
        &self.probs
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn row(&self, row: usize) -> &[f32] {
        let classes = self.class_count();
        &self.probs.data()[row * classes..(row + 1) * classes]
    }

    /// Number of classes admitted before the true label: strictly
    /// higher probability, or equal probability at a lower index.
    fn true_rank(&self, row: usize) -> usize {
        let probs = self.row(row);
        let truth = self.labels[row];
        let p_true = probs[truth];
        probs
            .iter()
            .enumerate()
            .filter(|&(j, &p)| p > p_true || (p == p_true && j < truth))
            .count()
    }

    /// Top-1 class under the same tie rule (lowest index wins).
    fn argmax(&self, row: usize) -> usize {
        let probs = self.row(row);
        let mut best = 0;
        for (j, &p) in probs.iter().enumerate().skip(1) {
            if p > probs[best] {
                best = j;
            }
        }
        best
    }
}

/// Fraction of rows whose true label ranks inside the top `k`.
pub fn topk_accuracy(preds: &PredictionSet, k: usize) -> Result<f64, EvalError> {
    let classes = preds.class_count();
    if k == 0 || k > classes {
        return Err(EvalError::KRange { k, classes });
    }
    let hits = (0..preds.rows())
        .filter(|&row| preds.true_rank(row) < k)
        .count();
    Ok(hits as f64 / preds.rows() as f64)
}

/// Accuracy relative to random guessing: `accuracy / (k / class_count)`.
pub fn chance_multiple(accuracy: f64, k: usize, class_count: usize) -> f64 {
    accuracy / (k as f64 / class_count as f64)
}

/// One class's row of the report. `top1`/`top3` are `None` when the
/// class has no test rows: absent is not the same as 0%.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub name: String,
    pub test_rows: usize,
    pub top1: Option<f64>,
    pub top3: Option<f64>,
}

/// Full evaluation of one prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<ClassReport>,
    /// Overall top-1, top-2, top-3 fractions.
    pub overall: [f64; 3],
    /// `confusion[true][predicted]` counts of top-1 assignments.
    pub confusion: Vec<Vec<usize>>,
    /// Overall accuracies over chance, for k = 1, 2, 3.
    pub chance_multiples: [f64; 3],
    pub total_rows: usize,
}

/// Per-class top-1/top-3, overall top-1/2/3, top-1 confusion matrix,
/// and chance multiples.
pub fn per_class_report(preds: &PredictionSet) -> Result<EvalReport, EvalError> {
    let classes = preds.class_count();
    let k3 = 3.min(classes);
    let mut rows_per_class = vec![0usize; classes];
    let mut top1_hits = vec![0usize; classes];
    let mut top3_hits = vec![0usize; classes];
    let mut confusion = vec![vec![0usize; classes]; classes];
    for row in 0..preds.rows() {
        let truth = preds.labels()[row];
        let rank = preds.true_rank(row);
        rows_per_class[truth] += 1;
        if rank < 1 {
            top1_hits[truth] += 1;
        }
        if rank < k3 {
            top3_hits[truth] += 1;
        }
        confusion[truth][preds.argmax(row)] += 1;
    }
    let per_class = (0..classes)
        .map(|c| {
            let n = rows_per_class[c];
            ClassReport {
                name: preds.class_names()[c].clone(),
                test_rows: n,
                top1: (n > 0).then(|| top1_hits[c] as f64 / n as f64),
                top3: (n > 0).then(|| top3_hits[c] as f64 / n as f64),
            }
        })
        .collect();
    let overall = [
        topk_accuracy(preds, 1)?,
        topk_accuracy(preds, 2.min(classes))?,
        topk_accuracy(preds, k3)?,
    ];
    Ok(EvalReport {
        per_class,
        overall,
        confusion,
        chance_multiples: [
            chance_multiple(overall[0], 1, classes),
            chance_multiple(overall[1], 2.min(classes), classes),
            chance_multiple(overall[2], k3, classes),
        ],
        total_rows: preds.rows(),
    })
}

/// Off-diagonal confusion targets for one source class, highest count
/// first, ties by ascending class index. Zero-count cells are omitted.
pub fn top_confusions(
    report: &EvalReport,
    source: usize,
) -> Result<Vec<(usize, usize)>, EvalError> {
    let classes = report.per_class.len();
    if source >= classes {
        return Err(EvalError::ClassRange {
            class: source,
            classes,
        });
    }
    let mut targets: Vec<(usize, usize)> = report.confusion[source]
        .iter()
        .enumerate()
        .filter(|&(j, &count)| j != source && count > 0)
        .map(|(j, &count)| (j, count))
        .collect();
    targets.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(targets)
}

fn fmt_pct(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{:.1}", 100.0 * v),
        None => "--".to_string(),
    }
}

/// Aligned plain-text table: one genre per row, a Top-1/Top-3 column
/// pair per model, and overall/chance rows at the bottom.
pub fn render_table(reports: &[(&str, &EvalReport)]) -> String {
    assert!(!reports.is_empty(), "render_table needs at least one report");
    let names: Vec<&str> = reports[0]
        .1
        .per_class
        .iter()
        .map(|c| c.name.as_str())
        .collect();
    for (_, r) in reports {
        assert_eq!(
            r.per_class.len(),
            names.len(),
            "reports disagree on class count"
        );
    }
    let genre_w = names
        .iter()
        .map(|n| n.len())
        .chain(["Genre".len(), "Overall".len(), "Over chance".len()])
        .max()
        .unwrap();
    let col_w = reports
        .iter()
        .map(|(m, _)| m.len())
        .chain([12])
        .max()
        .unwrap();

    let mut out = String::new();
    // Two header lines: model group, then the metric under each.
    let _ = write!(out, "{:<genre_w$}", "");
    for (model, _) in reports {
        let _ = write!(out, "  {:^w$}", model, w = 2 * col_w + 2);
    }
    let _ = writeln!(out);
    let _ = write!(out, "{:<genre_w$}", "Genre");
    for _ in reports {
        let _ = write!(out, "  {:>col_w$}  {:>col_w$}", "Top-1 %", "Top-3 %");
    }
    let _ = writeln!(out);
    let rule_len = genre_w + reports.len() * (2 * col_w + 4);
    let _ = writeln!(out, "{}", "-".repeat(rule_len));
    for (c, name) in names.iter().enumerate() {
        let _ = write!(out, "{name:<genre_w$}");
        for (_, r) in reports {
            let _ = write!(
                out,
                "  {:>col_w$}  {:>col_w$}",
                fmt_pct(r.per_class[c].top1),
                fmt_pct(r.per_class[c].top3)
            );
        }
        let _ = writeln!(out);
    }
    let _ = writeln!(out, "{}", "-".repeat(rule_len));
    let _ = write!(out, "{:<genre_w$}", "Overall");
    for (_, r) in reports {
        let _ = write!(
            out,
            "  {:>col_w$}  {:>col_w$}",
            fmt_pct(Some(r.overall[0])),
            fmt_pct(Some(r.overall[2]))
        );
    }
    let _ = writeln!(out);
    let _ = write!(out, "{:<genre_w$}", "Over chance");
    for (_, r) in reports {
        let _ = write!(
            out,
            "  {:>col_w$}  {:>col_w$}",
            format!("{:.1}x", r.chance_multiples[0]),
            format!("{:.1}x", r.chance_multiples[2])
        );
    }
    let _ = writeln!(out);
    out
}

/// Machine-readable per-class CSV: class, testRows, top1, top3.
/// Accuracies are fractions; absent classes leave the fields empty.
pub fn report_csv(report: &EvalReport) -> Vec<u8> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer
        .write_record(["class", "testRows", "top1", "top3"])
        .expect("writing to memory cannot fail");
    for c in &report.per_class {
        let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        writer
            .write_record([
                c.name.as_str(),
                &c.test_rows.to_string(),
                &fmt(c.top1),
                &fmt(c.top3),
            ])
            .expect("writing to memory cannot fail");
    }
    writer.into_inner().expect("writing to memory cannot fail")
}

/// Confusion matrix CSV: header `true\predicted,<names...>`, then one
/// row of counts per true class.
pub fn confusion_csv(report: &EvalReport) -> Vec<u8> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(report.per_class.iter().map(|c| c.name.clone()));
    writer
        .write_record(&header)
        .expect("writing to memory cannot fail");
    for (c, row) in report.confusion.iter().enumerate() {
        let mut record = vec![report.per_class[c].name.clone()];
        record.extend(row.iter().map(usize::to_string));
        writer
            .write_record(&record)
            .expect("writing to memory cannot fail");
    }
    writer.into_inner().expect("writing to memory cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("class{i}")).collect()
    }

    fn preds(rows: Vec<Vec<f32>>, labels: Vec<usize>) -> PredictionSet {
        let classes = rows[0].len();
        let flat: Vec<f32> = rows.concat();
        PredictionSet::new(
            Tensor::new(&[labels.len(), classes], flat).unwrap(),
            labels,
            names(classes),
        )
        .unwrap()
    }

    #[test]
    fn constructor_enforces_invariants() {
        let t = Tensor::new(&[1, 2], vec![0.6, 0.6]).unwrap();
        assert!(matches!(
            PredictionSet::new(t, vec![0], names(2)),
            Err(EvalError::RowSum { row: 0, .. })
        ));
        let t = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            PredictionSet::new(t.clone(), vec![2], names(2)),
            Err(EvalError::LabelRange { label: 2, .. })
        ));
        assert!(matches!(
            PredictionSet::new(t.clone(), vec![0], names(3)),
            Err(EvalError::NameCount { .. })
        ));
        assert!(matches!(
            PredictionSet::new(t, vec![0, 1], names(2)),
            Err(EvalError::LabelCount { .. })
        ));
    }

    #[test]
    fn ranks_first_second_fourth() {
        // Truth ranks 1st, 2nd, and 4th in the three rows.
        let p = preds(
            vec![
                vec![0.7, 0.1, 0.1, 0.05, 0.05],
                vec![0.5, 0.3, 0.1, 0.05, 0.05],
                vec![0.4, 0.3, 0.2, 0.06, 0.04],
            ],
            vec![0, 1, 3],
        );
        assert!((topk_accuracy(&p, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((topk_accuracy(&p, 3).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(topk_accuracy(&p, 5).unwrap(), 1.0);
    }

    #[test]
    fn k_equal_class_count_is_always_one() {
        let p = preds(vec![vec![0.25; 4]; 3], vec![3, 2, 0]);
        assert_eq!(topk_accuracy(&p, 4).unwrap(), 1.0);
        assert!(matches!(
            topk_accuracy(&p, 0),
            Err(EvalError::KRange { k: 0, .. })
        ));
        assert!(matches!(
            topk_accuracy(&p, 5),
            Err(EvalError::KRange { k: 5, .. })
        ));
    }

    #[test]
    fn ties_admit_lower_index_first() {
        let p = preds(vec![vec![0.5, 0.5, 0.0]], vec![1]);
        // Class 0 ties and sits at a lower index, so it is admitted
        // first: the truth misses top-1 but makes top-2.
        assert_eq!(topk_accuracy(&p, 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&p, 2).unwrap(), 1.0);
        let p0 = preds(vec![vec![0.5, 0.5, 0.0]], vec![0]);
        assert_eq!(topk_accuracy(&p0, 1).unwrap(), 1.0);
    }

    #[test]
    fn matches_brute_force_oracle_and_is_monotonic() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let (rows, classes) = (200, 30);
        let mut data = Vec::with_capacity(rows * classes);
        let mut labels = Vec::with_capacity(rows);
        for _ in 0..rows {
            let raw: Vec<f32> = (0..classes).map(|_| rng.random_range(0.0..1.0)).collect();
            let sum: f32 = raw.iter().sum();
            data.extend(raw.iter().map(|x| x / sum));
            labels.push(rng.random_range(0..classes));
        }
        let p = PredictionSet::new(
            Tensor::new(&[rows, classes], data.clone()).unwrap(),
            labels.clone(),
            names(classes),
        )
        .unwrap();

        // Oracle: stable sort by (probability desc, index asc), take k.
        let oracle = |k: usize| -> f64 {
            let mut hits = 0;
            for (r, &truth) in labels.iter().enumerate() {
                let row = &data[r * classes..(r + 1) * classes];
                let mut idx: Vec<usize> = (0..classes).collect();
                idx.sort_by(|&a, &b| {
                    row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
                });
                if idx[..k].contains(&truth) {
                    hits += 1;
                }
            }
            hits as f64 / rows as f64
        };
        let mut last = 0.0;
        for k in 1..=classes {
            let acc = topk_accuracy(&p, k).unwrap();
            assert_eq!(acc, oracle(k), "k = {k}");
            assert!(acc >= last, "not monotonic at k = {k}");
            last = acc;
        }
    }

    #[test]
    fn perfect_predictor_reports_diagonal() {
        let rows: Vec<Vec<f32>> = (0..3)
            .map(|c| {
                let mut r = vec![0.0; 3];
                r[c] = 1.0;
                r
            })
            .collect();
        let p = preds(rows, vec![0, 1, 2]);
        let report = per_class_report(&p).unwrap();
        for c in &report.per_class {
            assert_eq!(c.top1, Some(1.0));
            assert_eq!(c.top3, Some(1.0));
        }
        assert_eq!(report.overall, [1.0, 1.0, 1.0]);
        for (i, row) in report.confusion.iter().enumerate() {
            for (j, &count) in row.iter().enumerate() {
                assert_eq!(count, usize::from(i == j));
            }
        }
    }

    #[test]
    fn constant_predictor_concentrates_on_column_zero() {
        let mut row = vec![0.0f32; 5];
        row[0] = 1.0;
        // 10 rows: 2 per class.
        let p = preds(vec![row; 10], vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
        let report = per_class_report(&p).unwrap();
        assert_eq!(report.per_class[0].top1, Some(1.0));
        for c in &report.per_class[1..] {
            assert_eq!(c.top1, Some(0.0));
        }
        assert!((report.overall[0] - 0.2).abs() < 1e-12);
        for (i, confusion_row) in report.confusion.iter().enumerate() {
            assert_eq!(confusion_row[0], 2, "row {i}");
            assert_eq!(confusion_row.iter().sum::<usize>(), 2);
        }
    }

    #[test]
    fn absent_class_is_none_not_zero() {
        let p = preds(
            vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1]],
            vec![0, 0],
        );
        let report = per_class_report(&p).unwrap();
        assert_eq!(report.per_class[0].test_rows, 2);
        assert_eq!(report.per_class[1].top1, None);
        assert_eq!(report.per_class[2].top3, None);
        assert_eq!(fmt_pct(report.per_class[1].top1), "--");
        // Confusion mass sums to the number of predictions.
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, 2);
    }

    #[test]
    fn consistent_permutation_preserves_accuracy() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let (rows, classes) = (40, 6);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..rows {
            let raw: Vec<f32> = (0..classes).map(|_| rng.random_range(0.1..1.0)).collect();
            let sum: f32 = raw.iter().sum();
            data.push(raw.iter().map(|x| x / sum).collect::<Vec<_>>());
            labels.push(rng.random_range(0..classes));
        }
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted_rows: Vec<Vec<f32>> = data
            .iter()
            .map(|row| {
                let mut out = vec![0.0; classes];
                for (old, &new) in perm.iter().enumerate() {
                    out[new] = row[old];
                }
                out
            })
            .collect();
        let permuted_labels: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();

        let a = preds(data, labels);
        let b = preds(permuted_rows, permuted_labels);
        for k in 1..=classes {
            assert_eq!(
                topk_accuracy(&a, k).unwrap(),
                topk_accuracy(&b, k).unwrap()
            );
        }
        let ra = per_class_report(&a).unwrap();
        let rb = per_class_report(&b).unwrap();
        for old in 0..classes {
            for old2 in 0..classes {
                assert_eq!(
                    ra.confusion[old][old2],
                    rb.confusion[perm[old]][perm[old2]]
                );
            }
        }
    }

    #[test]
    fn chance_multiples_match_published_rounding() {
        let m1 = chance_multiple(0.247, 1, 30);
        let m2 = chance_multiple(0.331, 2, 30);
        let m3 = chance_multiple(0.403, 3, 30);
        assert!((m1 - 7.41).abs() < 1e-12);
        assert!((m2 - 4.965).abs() < 1e-12);
        assert!((m3 - 4.03).abs() < 1e-12);
        assert_eq!(format!("{m1:.1}"), "7.4");
        assert_eq!(format!("{m2:.1}"), "5.0");
        assert_eq!(format!("{m3:.1}"), "4.0");
        assert_eq!(format!("{m1:.2}"), "7.41");
        assert_eq!(format!("{m2:.2}"), "4.97");
        assert_eq!(format!("{m3:.2}"), "4.03");
    }

    #[test]
    fn top_confusions_sort_desc_then_index() {
        let p = preds(
            vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1]],
            vec![0, 0],
        );
        let mut report = per_class_report(&p).unwrap();
        report.confusion[0] = vec![0, 5, 3];
        report.confusion[1] = vec![0, 7, 0];
        assert_eq!(top_confusions(&report, 0).unwrap(), vec![(1, 5), (2, 3)]);
        // Diagonal-only row: empty list.
        assert_eq!(top_confusions(&report, 1).unwrap(), vec![]);
        report.confusion[2] = vec![4, 4, 0];
        assert_eq!(top_confusions(&report, 2).unwrap(), vec![(0, 4), (1, 4)]);
        assert!(top_confusions(&report, 9).is_err());
    }

    #[test]
    fn table_renders_model_groups_and_absent_markers() {
        let p1 = preds(
            vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1]],
            vec![0, 0],
        );
        let p2 = preds(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            vec![0, 1],
        );
        let r1 = per_class_report(&p1).unwrap();
        let r2 = per_class_report(&p2).unwrap();
        let table = render_table(&[("lenet", &r1), ("alexnet30", &r2)]);
        assert!(table.contains("lenet"));
        assert!(table.contains("alexnet30"));
        assert!(table.contains("Genre"));
        assert!(table.contains("class0"));
        assert!(table.contains("--"), "absent class must render as --");
        assert!(table.contains("Overall"));
        assert!(table.contains("Over chance"));
        assert!(table.contains("50.0"), "p1 top-1 is 50.0%");
        assert!(table.contains("100.0"), "p2 top-1 is 100.0%");
        // Every line carries both model column groups.
        let body: Vec<&str> = table.lines().skip(2).collect();
        for line in body {
            if line.starts_with('-') {
                continue;
            }
            assert!(line.len() > 40, "short row: {line:?}");
        }
    }

    #[test]
    fn csv_outputs_have_expected_shape() {
        let p = preds(
            vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1]],
            vec![0, 1],
        );
        let report = per_class_report(&p).unwrap();
        let csv_bytes = report_csv(&report);
        let text = String::from_utf8(csv_bytes).unwrap();
        assert_eq!(text.lines().count(), 4, "header + one row per class");
        assert!(text.starts_with("class,testRows,top1,top3"));
        assert!(text.contains("class0,1,1,1"));

        let confusion = String::from_utf8(confusion_csv(&report)).unwrap();
        assert_eq!(confusion.lines().count(), 4);
        assert!(confusion.lines().next().unwrap().starts_with("true\\predicted"));
    }
}
