//! Two-dimensional projections of embeddings and static scatter output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("PCA needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("data have zero variance")]
    ZeroVariance,
    #[error("row {row} has {found} columns, expected {expected}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },
    #[error("cannot keep {k} components of {dim}-dimensional data")]
    TooManyComponents { k: usize, dim: usize },
    #[error("row {0} has a non-finite value")]
    NonFinite(usize),
    #[error("no points to draw")]
    NoPoints,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Unit-norm principal axes, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues for the kept components.
    pub explained_variance: Vec<f64>,
    /// Trace of the covariance.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance.iter().map(|v| v / self.total_variance).collect()
    }
}

fn check_rows(x: &[Vec<f64>], dim: usize) -> Result<(), ProjectError> {
    for (row, r) in x.iter().enumerate() {
        if r.len() != dim {
            return Err(ProjectError::DimensionMismatch {
                row,
                expected: dim,
                found: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(ProjectError::NonFinite(row));
        }
    }
    Ok(())
}

/// Sample covariance (denominator `N − 1`) of the rows of `x`, with the
/// column means.
pub fn covariance(x: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let mut mean = vec![0.0; d];
    for r in x {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Fits the top-`k` principal components. Each component is signed so that
/// its largest-magnitude entry is positive.
pub fn pca_fit(x: &[Vec<f64>], k: usize) -> Result<PcaModel, ProjectError> {
    if x.len() < 2 {
        return Err(ProjectError::TooFewRows(x.len()));
    }
    let dim = x[0].len();
    check_rows(x, dim)?;
    if k == 0 || k > dim {
        return Err(ProjectError::TooManyComponents { k, dim });
    }
    let (mean, cov) = covariance(x);
    let total_variance = cov.trace();
    if !(total_variance > 0.0) {
        return Err(ProjectError::ZeroVariance);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let components = order[..k]
        .iter()
        .map(|&j| {
            let mut c: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            let pivot = (0..dim).fold(0, |best, i| if c[i].abs() > c[best].abs() { i } else { best });
            if c[pivot] < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            c
        })
        .collect();
    let explained_variance = order[..k].iter().map(|&j| eig.eigenvalues[j].max(0.0)).collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

/// Projects `(x − mean)` onto the components.
pub fn pca_transform(model: &PcaModel, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ProjectError> {
    check_rows(x, model.mean.len())?;
    Ok(x.iter()
        .map(|r| {
            model
                .components
                .iter()
                .map(|c| c.iter().zip(r.iter().zip(&model.mean)).map(|(c, (v, m))| c * (v - m)).sum())
                .collect()
        })
        .collect())
}

/// Settings a UMAP projection would use: 500 neighbors, minimum distance
/// 0.25, cosine metric. Nothing consumes this yet; both applications are
/// projected with PCA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UmapConfig {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub metric: String,
}

impl Default for UmapConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 500,
            min_dist: 0.25,
            metric: "cosine".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointKind {
    Claim,
    HoaxCenter,
    Author,
    Tweet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub label: String,
    pub kind: PointKind,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 24.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Standalone SVG: hoax centers as crosses, everything else as dots, hue
/// keyed by label.
pub fn scatter_svg(points: &[ScatterPoint]) -> Result<String, ProjectError> {
    if points.is_empty() {
        return Err(ProjectError::NoPoints);
    }
    if let Some(i) = points.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(ProjectError::NonFinite(i));
    }
    let labels: BTreeMap<&str, usize> = {
        let mut m = BTreeMap::new();
        for p in points {
            m.insert(p.label.as_str(), 0);
        }
        m.into_keys().enumerate().map(|(i, l)| (l, i)).collect()
    };
    let range = |f: fn(&ScatterPoint) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let ((x0, xs), (y0, ys)) = (range(|p| p.x), range(|p| p.y));
    let sx = |x: f64| MARGIN + (x - x0) / xs * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / ys * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    // Crosses go last so they sit on top of the dots.
    let mut ordered: Vec<&ScatterPoint> = points.iter().collect();
    ordered.sort_by_key(|p| p.kind == PointKind::HoaxCenter);
    for p in ordered {
        let hue = labels[p.label.as_str()] * 360 / labels.len();
        let color = format!("hsl({hue},70%,45%)");
        let (x, y) = (sx(p.x), sy(p.y));
        let title = escape(&p.label);
        match p.kind {
            PointKind::HoaxCenter => writeln!(
                svg,
                r#"<path class="cross" d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="{color}" stroke-width="3"><title>{title}</title></path>"#,
                x - 6.0,
                y - 6.0,
                x + 6.0,
                y + 6.0,
                x - 6.0,
                y + 6.0,
                x + 6.0,
                y - 6.0
            ),
            _ => writeln!(
                svg,
                r#"<circle class="dot" cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}" fill-opacity="0.7"><title>{title}</title></circle>"#
            ),
        }
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes the points as CSV (`x,y,label,kind`) and as an SVG scatter.
pub fn emit_scatter(points: &[ScatterPoint], out_csv: &Path, out_svg: &Path) -> Result<(), ProjectError> {
    let svg = scatter_svg(points)?;
    let mut w = csv::Writer::from_path(out_csv)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    std::fs::write(out_svg, svg)?;
    Ok(())
}

pub fn read_scatter_csv(path: &Path) -> Result<Vec<ScatterPoint>, ProjectError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn collinear_points() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, i as f64]).collect();
        let m = pca_fit(&x, 2).unwrap();
        let s = 0.5f64.sqrt();
        assert!((m.components[0][0] - s).abs() < 1e-12 && (m.components[0][1] - s).abs() < 1e-12);
        assert!((m.explained_variance_ratio()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_cross_has_equal_variances() {
        let x = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let m = pca_fit(&x, 2).unwrap();
        assert!((m.explained_variance[0] - m.explained_variance[1]).abs() < 1e-12);
        assert!((m.explained_variance[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(pca_fit(&[vec![1.0]], 1), Err(ProjectError::TooFewRows(1))));
        assert!(matches!(pca_fit(&[vec![1.0, 2.0], vec![1.0, 2.0]], 2), Err(ProjectError::ZeroVariance)));
        assert!(matches!(pca_fit(&[vec![1.0], vec![2.0]], 2), Err(ProjectError::TooManyComponents { .. })));
        let m = pca_fit(&random_matrix(5, 3, 0), 2).unwrap();
        assert!(matches!(pca_transform(&m, &[vec![1.0, 2.0]]), Err(ProjectError::DimensionMismatch { .. })));
    }

    /// Components agree with the right singular vectors of the centered data.
    #[test]
    fn matches_svd_oracle() {
        for seed in 0..10 {
            let x = random_matrix(5, 3, seed);
            let m = pca_fit(&x, 2).unwrap();
            let n = x.len();
            let centered = DMatrix::from_fn(n, 3, |i, j| x[i][j] - m.mean[j]);
            let svd = centered.svd(false, true);
            let vt = svd.v_t.unwrap();
            let mut sv: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..).collect();
            sv.sort_by(|a, b| b.0.total_cmp(&a.0));
            for (c, &(s, row)) in sv.iter().take(2).enumerate() {
                assert!((m.explained_variance[c] - s * s / (n as f64 - 1.0)).abs() < 1e-10);
                let v: Vec<f64> = vt.row(row).iter().copied().collect();
                assert!((dot(&v, &m.components[c]).abs() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transform_examples_and_reconstruction() {
        let x = random_matrix(12, 4, 5);
        let m = pca_fit(&x, 2).unwrap();
        let at_mean = pca_transform(&m, std::slice::from_ref(&m.mean)).unwrap();
        assert!(at_mean[0].iter().all(|v| v.abs() < 1e-12));

        // Points in the component plane keep their pairwise distances.
        let plane: Vec<Vec<f64>> = [(0.0, 0.0), (1.0, 2.0), (-3.0, 0.5)]
            .iter()
            .map(|&(a, b)| (0..4).map(|j| m.mean[j] + a * m.components[0][j] + b * m.components[1][j]).collect())
            .collect();
        let p = pca_transform(&m, &plane).unwrap();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        for i in 0..3 {
            for j in 0..3 {
                assert!((dist(&p[i], &p[j]) - dist(&plane[i], &plane[j])).abs() < 1e-10);
            }
        }

        let full = pca_fit(&x, 4).unwrap();
        let proj = pca_transform(&m, &x).unwrap();
        let mut err = 0.0;
        for (r, z) in x.iter().zip(&proj) {
            for j in 0..4 {
                let rec = m.mean[j] + z[0] * m.components[0][j] + z[1] * m.components[1][j];
                err += (r[j] - rec).powi(2);
            }
        }
        err /= (x.len() - 1) as f64;
        let discarded: f64 = full.explained_variance[2..].iter().sum();
        assert!((err - discarded).abs() < 1e-10, "{err} vs {discarded}");
    }

    proptest! {
        #[test]
        fn model_invariants(seed in any::<u64>(), n in 3usize..12, d in 2usize..6) {
            let x = random_matrix(n, d, seed);
            let m = pca_fit(&x, 2).unwrap();
            for (i, a) in m.components.iter().enumerate() {
                prop_assert!((dot(a, a) - 1.0).abs() < 1e-8);
                for b in &m.components[i + 1..] {
                    prop_assert!(dot(a, b).abs() < 1e-8);
                }
                let pivot = a.iter().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { *v } else { acc });
                prop_assert!(pivot > 0.0);
            }
            prop_assert!(m.explained_variance[0] >= m.explained_variance[1]);
        }

        #[test]
        fn translation_invariant(seed in any::<u64>(), shift in prop::collection::vec(-100.0f64..100.0, 3)) {
            let x = random_matrix(8, 3, seed);
            let shifted: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
            let a = pca_transform(&pca_fit(&x, 2).unwrap(), &x).unwrap();
            let b = pca_transform(&pca_fit(&shifted, 2).unwrap(), &shifted).unwrap();
            for (ra, rb) in a.iter().zip(&b) {
                for (u, v) in ra.iter().zip(rb) {
                    prop_assert!((u - v).abs() < 1e-8);
                }
            }
        }

        /// No random rank-2 orthonormal projection retains more variance.
        #[test]
        fn pca_retains_the_most_variance(seed in any::<u64>()) {
            let x = random_matrix(10, 4, seed);
            let m = pca_fit(&x, 2).unwrap();
            let best: f64 = m.explained_variance.iter().sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            for _ in 0..50 {
                let q = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0)).qr().q();
                let model = PcaModel {
                    components: (0..2).map(|c| q.column(c).iter().copied().collect()).collect(),
                    ..m.clone()
                };
                let z = pca_transform(&model, &x).unwrap();
                let kept: f64 = z.iter().flatten().map(|v| v * v).sum::<f64>() / 9.0;
                prop_assert!(kept <= best + 1e-9);
            }
        }
    }

    #[test]
    fn scatter_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let points = vec![
            ScatterPoint { x: 0.1, y: -2.0, label: "h1".into(), kind: PointKind::Claim },
            ScatterPoint { x: 1.0 / 3.0, y: 4.5, label: "h2 <&>".into(), kind: PointKind::Claim },
            ScatterPoint { x: 0.0, y: 0.0, label: "h1".into(), kind: PointKind::HoaxCenter },
            ScatterPoint { x: 2.0, y: 1.0, label: "h2 <&>".into(), kind: PointKind::HoaxCenter },
        ];
        let (csv_path, svg_path) = (dir.path().join("p.csv"), dir.path().join("p.svg"));
        emit_scatter(&points, &csv_path, &svg_path).unwrap();
        assert_eq!(read_scatter_csv(&csv_path).unwrap(), points);
        let svg = std::fs::read_to_string(&svg_path).unwrap();
        assert_eq!(svg.matches(r#"class="cross""#).count(), 2);
        assert_eq!(svg.matches(r#"class="dot""#).count(), 2);
        assert!(svg.contains("h2 &lt;&amp;&gt;"));

        emit_scatter(&points[..1], &csv_path, &svg_path).unwrap();
        assert_eq!(std::fs::read_to_string(&csv_path).unwrap().lines().count(), 2);
        assert!(matches!(scatter_svg(&[]), Err(ProjectError::NoPoints)));
        assert!(emit_scatter(&points, &dir.path().join("missing/p.csv"), &svg_path).is_err());
    }
}
