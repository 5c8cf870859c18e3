//! PCA of class-probability rows onto the top-2 variance plane, with
//! the class unit vectors mapped through the same rotation so each
//! class gets a direction arrow in the plot.
//!
//! The eigensolver is power iteration with deflation at a fixed
//! tolerance; a dense Jacobi sweep takes over when iteration stalls.
//! The matrix is tiny, so determinism is worth more than speed.

use std::fmt::Write as _;

use thiserror::Error;

use crate::eval::PredictionSet;

/// Convergence tolerance on successive eigenvector estimates.
const POWER_TOL: f64 = 1e-10;
/// Iteration budget before the dense fallback takes over.
const POWER_MAX_ITERS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("projection needs at least 3 rows, got {rows}")]
    TooFewRows { rows: usize },
    #[error("projection needs at least 2 columns, got {cols}")]
    TooFewColumns { cols: usize },
    #[error("row {row} has {actual} columns, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("row {row}: label {label} is outside [0, {classes})")]
    LabelRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("covariance has {positive} positive eigenvalue(s), a plane needs 2")]
    Degenerate { positive: usize },
}

/// A 2-D embedding of the input rows plus the images of the class
/// unit vectors under the same linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    /// One (x, y) per input row, mean-centered coordinates.
    pub points: Vec<[f64; 2]>,
    /// One (x, y) per class: the class unit vector through the map.
    pub class_axes: Vec<[f64; 2]>,
    /// True class per point, parallel to `points`.
    pub labels: Vec<usize>,
    /// Top-2 covariance eigenvalues, descending.
    pub explained_variance: [f64; 2],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(mat: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    mat.iter().map(|row| dot(row, v)).collect()
}

/// Flips `v` so its largest-magnitude coordinate is positive; ties
/// keep the lowest index. Makes eigenvector signs reproducible.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Dominant eigenpair by power iteration. Starts on the basis vector
/// with the largest diagonal entry: a uniform start would sit in the
/// null space whenever the input rows share a constant sum, which is
/// exactly the probability-row case. `None` when the iteration budget
/// runs out before `tol` is met or the start lands in the null space.
fn power_iteration(mat: &[Vec<f64>], tol: f64, max_iters: usize) -> Option<(f64, Vec<f64>)> {
    let k = mat.len();
    let mut start = 0;
    for i in 1..k {
        if mat[i][i] > mat[start][start] {
            start = i;
        }
    }
    let mut v = vec![0.0; k];
    v[start] = 1.0;
    for _ in 0..max_iters {
        let mut w = matvec(mat, &v);
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return None;
        }
        for x in &mut w {
            *x /= norm;
        }
        if dot(&w, &v) < 0.0 {
            for x in &mut w {
                *x = -*x;
            }
        }
        let delta = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = w;
        if delta < tol {
            let lambda = dot(&v, &matvec(mat, &v));
            return Some((lambda, v));
        }
    }
    None
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi
/// rotations. Returns (eigenvalues, eigenvectors) sorted descending.
fn jacobi_eigenpairs(mat: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = mat.len();
    let mut a: Vec<Vec<f64>> = mat.to_vec();
    let mut vecs = vec![vec![0.0; k]; k];
    for (i, row) in vecs.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale = mat
        .iter()
        .flatten()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..k {
            for q in p + 1..k {
                off += a[p][q] * a[p][q];
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..k {
                    let aip = a[i][p];
                    let aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for i in 0..k {
                    let api = a[p][i];
                    let aqi = a[q][i];
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for row in vecs.iter_mut() {
                    let vip = row[p];
                    let viq = row[q];
                    row[p] = c * vip - s * viq;
                    row[q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| a[y][y].partial_cmp(&a[x][x]).unwrap().then(x.cmp(&y)));
    let values = order.iter().map(|&c| a[c][c]).collect();
    let vectors = order
        .iter()
        .map(|&c| vecs.iter().map(|row| row[c]).collect())
        .collect();
    (values, vectors)
}

/// Top-2 eigenpairs: power iteration with rank-1 deflation, falling
/// back to the dense solver on stall or inconsistent ordering.
fn top_two_eigenpairs(cov: &[Vec<f64>]) -> (f64, Vec<f64>, f64, Vec<f64>) {
    if let Some((l1, v1)) = power_iteration(cov, POWER_TOL, POWER_MAX_ITERS) {
        let k = cov.len();
        let deflated: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| cov[i][j] - l1 * v1[i] * v1[j]).collect())
            .collect();
        if let Some((l2, v2)) = power_iteration(&deflated, POWER_TOL, POWER_MAX_ITERS) {
            // Deflation landing above the dominant value means the
            // first run caught a minor component; distrust both.
            if l2 <= l1 + l1.abs() * 1e-9 {
                return (l1, v1, l2, v2);
            }
        }
    }
    let (values, vectors) = jacobi_eigenpairs(cov);
    (
        values[0],
        vectors[0].clone(),
        values[1],
        vectors[1].clone(),
    )
}

/// PCA of raw rows onto the top-2 variance plane. Rows are mean
/// centered; the class axes are the images of the unit basis vectors
/// under the same (linear, uncentered) map as the points.
pub fn pca_project_rows(
    rows: &[Vec<f64>],
    labels: &[usize],
) -> Result<Projection2D, ProjectionError> {
    let n = rows.len();
    if n < 3 {
        return Err(ProjectionError::TooFewRows { rows: n });
    }
    let k = rows[0].len();
    if k < 2 {
        return Err(ProjectionError::TooFewColumns { cols: k });
    }
    for (row, r) in rows.iter().enumerate() {
        if r.len() != k {
            return Err(ProjectionError::RaggedRows {
                row,
                expected: k,
                actual: r.len(),
            });
        }
    }
    if labels.len() != n {
        return Err(ProjectionError::LabelCount {
            labels: labels.len(),
            rows: n,
        });
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(ProjectionError::LabelRange {
                row,
                label,
                classes: k,
            });
        }
    }

    let mut mean = vec![0.0; k];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let mut cov = vec![vec![0.0; k]; k];
    for row in &centered {
        for i in 0..k {
            for j in i..k {
                cov[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            let value = cov[i][j] / (n - 1) as f64;
            cov[i][j] = value;
            cov[j][i] = value;
        }
    }

    let (l1, mut v1, l2, mut v2) = top_two_eigenpairs(&cov);
    // Strictly positive spread on both components, with a relative
    // floor absorbing eigensolver rounding on rank-deficient input.
    let positive = if l1 <= 0.0 {
        0
    } else if l2 <= l1 * 1e-12 {
        1
    } else {
        2
    };
    if positive < 2 {
        return Err(ProjectionError::Degenerate { positive });
    }
    fix_sign(&mut v1);
    fix_sign(&mut v2);

    let points = centered
        .iter()
        .map(|row| [dot(row, &v1), dot(row, &v2)])
        .collect();
    let class_axes = (0..k).map(|j| [v1[j], v2[j]]).collect();
    Ok(Projection2D {
        points,
        class_axes,
        labels: labels.to_vec(),
        explained_variance: [l1, l2],
    })
}

/// PCA of a prediction set's probability rows.
pub fn pca_project(preds: &PredictionSet) -> Result<Projection2D, ProjectionError> {
    let classes = preds.class_count();
    let rows: Vec<Vec<f64>> = preds
        .probs()
        .data()
        .chunks(classes)
        .map(|chunk| chunk.iter().map(|&p| f64::from(p)).collect())
        .collect();
    pca_project_rows(&rows, preds.labels())
}

/// Plot rows as CSV: `kind,x,y,classId,className` with one `point`
/// row per input row followed by one `axis` row per class. f64
/// display form round-trips, so re-parsing reproduces coordinates
/// bit-exactly.
pub fn projection_csv(projection: &Projection2D, class_names: &[String]) -> Vec<u8> {
    assert_eq!(
        class_names.len(),
        projection.class_axes.len(),
        "one name per class axis"
    );
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["kind", "x", "y", "classId", "className"])
        .expect("writing to memory cannot fail");
    for (point, &label) in projection.points.iter().zip(&projection.labels) {
        writer
            .write_record([
                "point",
                &point[0].to_string(),
                &point[1].to_string(),
                &label.to_string(),
                &class_names[label],
            ])
            .expect("writing to memory cannot fail");
    }
    for (class, axis) in projection.class_axes.iter().enumerate() {
        writer
            .write_record([
                "axis",
                &axis[0].to_string(),
                &axis[1].to_string(),
                &class.to_string(),
                &class_names[class],
            ])
            .expect("writing to memory cannot fail");
    }
    writer.into_inner().expect("writing to memory cannot fail")
}

/// Fixed palette: one maximally spaced hue per class at constant
/// saturation and lightness, as a `#rrggbb` string.
fn palette(class: usize, class_count: usize) -> String {
    let hue = 360.0 * class as f64 / class_count as f64;
    let (s, l) = (0.65, 0.45);
    let c = (1.0 - (2.0 * l - 1.0f64).abs()) * s;
    let hp = hue / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    let channel = |v: f64| ((v + m) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", channel(r1), channel(g1), channel(b1))
}

/// Static SVG scatter: one circle per point colored by class, one
/// labeled arrow per class axis, all in a square viewport.
pub fn projection_svg(projection: &Projection2D, class_names: &[String]) -> String {
    assert_eq!(
        class_names.len(),
        projection.class_axes.len(),
        "one name per class axis"
    );
    let size = 900.0;
    let margin = 70.0;
    let point_radius = projection
        .points
        .iter()
        .map(|p| p[0].hypot(p[1]))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let axis_norm = projection
        .class_axes
        .iter()
        .map(|a| a[0].hypot(a[1]))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    // Scale arrows into the point cloud so both stay readable.
    let arrow_scale = 0.9 * point_radius / axis_norm;
    let extent = projection
        .points
        .iter()
        .map(|p| p[0].abs().max(p[1].abs()))
        .chain(
            projection
                .class_axes
                .iter()
                .map(|a| (a[0] * arrow_scale).abs().max((a[1] * arrow_scale).abs())),
        )
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let to_screen = |x: f64, y: f64| {
        let half = size / 2.0 - margin;
        (
            size / 2.0 + x / extent * half,
            size / 2.0 - y / extent * half,
        )
    };

    let class_count = class_names.len();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" \
         width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">"
    );
    let _ = writeln!(
        out,
        "  <defs><marker id=\"tip\" markerWidth=\"8\" markerHeight=\"8\" \
         refX=\"6\" refY=\"3\" orient=\"auto\">\
         <path d=\"M0,0 L6,3 L0,6 z\" fill=\"#333333\"/></marker></defs>"
    );
    let _ = writeln!(
        out,
        "  <rect x=\"0\" y=\"0\" width=\"{size}\" height=\"{size}\" fill=\"#ffffff\"/>"
    );
    for (point, &label) in projection.points.iter().zip(&projection.labels) {
        let (cx, cy) = to_screen(point[0], point[1]);
        let _ = writeln!(
            out,
            "  <circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"{}\" \
             fill-opacity=\"0.8\"/>",
            palette(label, class_count)
        );
    }
    let (ox, oy) = to_screen(0.0, 0.0);
    for (class, axis) in projection.class_axes.iter().enumerate() {
        let (tx, ty) = to_screen(axis[0] * arrow_scale, axis[1] * arrow_scale);
        let _ = writeln!(
            out,
            "  <line x1=\"{ox:.2}\" y1=\"{oy:.2}\" x2=\"{tx:.2}\" y2=\"{ty:.2}\" \
             stroke=\"#333333\" stroke-width=\"1\" marker-end=\"url(#tip)\"/>"
        );
        let (lx, ly) = to_screen(axis[0] * arrow_scale * 1.07, axis[1] * arrow_scale * 1.07);
        let _ = writeln!(
            out,
            "  <text x=\"{lx:.2}\" y=\"{ly:.2}\" font-size=\"9\" \
             font-family=\"sans-serif\" fill=\"#333333\" \
             text-anchor=\"middle\">{}</text>",
            xml_escape(&class_names[class])
        );
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
