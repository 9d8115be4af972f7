//! Report tables: accuracy rows, class-averaged similarity heatmaps, 2-D
//! feature projections and loss curves, all written as CSV.
//!
//! Nothing time-dependent is written, so the same run always produces the
//! same bytes.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use ssam_core::encoders::CategoryEmbeddings;
use ssam_core::numerics::{cosine_similarity_matrix, Matrix};
use ssam_core::objectives::LossBreakdown;
use ssam_core::Error;

use crate::error::Result;

/// One adaptation run, or one ablation cell on one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub seed: u64,
    pub encoder: String,
    pub mask: String,
    pub alpha: f64,
    pub beta: f64,
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
    pub online_accuracy: f64,
    pub delta: f64,
}

/// Mean over seeds of one ablation cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub mask: String,
    pub alpha: f64,
    pub beta: f64,
    pub seeds: usize,
    pub mean_pre: f64,
    pub mean_post: f64,
    pub mean_delta: f64,
}

/// A 2-D projection of features, one point per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Variance captured by each axis of the fitted basis.
    pub explained: [f64; 2],
}

/// Pre- and post-adaptation views of the same images.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub labels: Vec<usize>,
    pub heatmap_pre: Matrix,
    pub heatmap_post: Matrix,
    pub projection_pre: Projection,
    pub projection_post: Projection,
    pub dispersion_pre: f64,
    pub dispersion_post: f64,
    /// Per-image similarities, kept only when asked for.
    pub per_image: Option<(Matrix, Matrix)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportBundle {
    pub accuracy: Vec<AccuracyRow>,
    pub summary: Vec<CellSummary>,
    pub diagnostics: Option<Diagnostics>,
    pub loss_curve: Vec<LossBreakdown>,
}

/// Mean cosine between the features of true class `i` and category `j`.
/// A class with no images gets a row of zeros.
pub fn class_heatmap(features: &Matrix, labels: &[usize], categories: &CategoryEmbeddings) -> Result<Matrix> {
    if features.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "class_heatmap",
            detail: format!("{} features for {} labels", features.rows(), labels.len()),
        }
        .into());
    }
    let m = categories.num_classes();
    let sims = cosine_similarity_matrix(features, categories.matrix())?;
    let mut sums = Matrix::zeros(m, m);
    let mut counts = vec![0usize; m];
    for (r, &l) in labels.iter().enumerate() {
        if l >= m {
            return Err(Error::Config(format!("label {l} out of range for {m} classes")).into());
        }
        counts[l] += 1;
        for j in 0..m {
            sums.set(l, j, sums.get(l, j) + sims.get(r, j));
        }
    }
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 {
            for j in 0..m {
                sums.set(i, j, sums.get(i, j) / c as f64);
            }
        }
    }
    Ok(sums)
}

pub fn mean_diagonal(h: &Matrix) -> f64 {
    let n = h.rows().min(h.cols());
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|i| h.get(i, i)).sum::<f64>() / n as f64
}

/// Mean pairwise Euclidean distance between class centroids. Classes with
/// no images are left out.
pub fn dispersion(features: &Matrix, labels: &[usize], num_classes: usize) -> f64 {
    let d = features.cols();
    let mut centroids = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (r, &l) in labels.iter().enumerate() {
        if l < num_classes {
            counts[l] += 1;
            centroids[l].iter_mut().zip(features.row(r)).for_each(|(c, x)| *c += x);
        }
    }
    let present: Vec<Vec<f64>> = centroids
        .into_iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(c, &n)| c.into_iter().map(|x| x / n as f64).collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..present.len() {
        for j in i + 1..present.len() {
            total += present[i]
                .iter()
                .zip(&present[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Top-two principal axes of the rows of `data`, as columns of a `D × 2`
/// basis, plus the column mean. Each axis is flipped so its first nonzero
/// loading is positive.
pub fn pca_basis(data: &Matrix) -> Result<(Matrix, Vec<f64>, [f64; 2])> {
    let (n, d) = data.shape();
    if n == 0 || d == 0 {
        return Err(Error::Degenerate {
            op: "pca",
            detail: "no data to project".into(),
        }
        .into());
    }
    let mean: Vec<f64> = data.col_sums().into_iter().map(|s| s / n as f64).collect();
    let centred = DMatrix::from_fn(n, d, |r, c| data.get(r, c) - mean[c]);
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut basis = Matrix::zeros(d, 2);
    let mut explained = [0.0; 2];
    for (k, &col) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(col);
        let sign = v.iter().find(|x| x.abs() > 1e-12).map_or(1.0, |x| x.signum());
        for r in 0..d {
            basis.set(r, k, sign * v[r]);
        }
        explained[k] = eig.eigenvalues[col].max(0.0);
    }
    Ok((basis, mean, explained))
}

pub fn project(data: &Matrix, basis: &Matrix, mean: &[f64]) -> Vec<[f64; 2]> {
    (0..data.rows())
        .map(|r| {
            let mut p = [0.0; 2];
            for (c, (x, m)) in data.row(r).iter().zip(mean).enumerate() {
                p[0] += (x - m) * basis.get(c, 0);
                p[1] += (x - m) * basis.get(c, 1);
            }
            p
        })
        .collect()
}

impl Diagnostics {
    /// Both projections use one basis fitted on the pre and post features
    /// together, so the two clouds share coordinates.
    pub fn compute(
        pre: &Matrix,
        post: &Matrix,
        labels: &[usize],
        categories: &CategoryEmbeddings,
        per_image: bool,
    ) -> Result<Self> {
        let m = categories.num_classes();
        let mut stacked = pre.data().to_vec();
        stacked.extend_from_slice(post.data());
        let both = Matrix::from_vec(pre.rows() + post.rows(), pre.cols(), stacked)?;
        let (basis, mean, explained) = pca_basis(&both)?;
        let per_image = if per_image {
            Some((
                cosine_similarity_matrix(pre, categories.matrix())?,
                cosine_similarity_matrix(post, categories.matrix())?,
            ))
        } else {
            None
        };
        Ok(Self {
            labels: labels.to_vec(),
            heatmap_pre: class_heatmap(pre, labels, categories)?,
            heatmap_post: class_heatmap(post, labels, categories)?,
            projection_pre: Projection {
                points: project(pre, &basis, &mean),
                explained,
            },
            projection_post: Projection {
                points: project(post, &basis, &mean),
                explained,
            },
            dispersion_pre: dispersion(pre, labels, m),
            dispersion_post: dispersion(post, labels, m),
            per_image,
        })
    }
}

/// Per-cell means in first-appearance order of `(mask, alpha, beta)`.
pub fn summarize(rows: &[AccuracyRow]) -> Vec<CellSummary> {
    let mut out: Vec<CellSummary> = Vec::new();
    for r in rows {
        let hit = out
            .iter_mut()
            .find(|s| s.mask == r.mask && s.alpha == r.alpha && s.beta == r.beta);
        let s = match hit {
            Some(s) => s,
            None => {
                out.push(CellSummary {
                    mask: r.mask.clone(),
                    alpha: r.alpha,
                    beta: r.beta,
                    seeds: 0,
                    mean_pre: 0.0,
                    mean_post: 0.0,
                    mean_delta: 0.0,
                });
                out.last_mut().unwrap()
            }
        };
        s.seeds += 1;
        s.mean_pre += r.pre_accuracy;
        s.mean_post += r.post_accuracy;
        s.mean_delta += r.delta;
    }
    for s in &mut out {
        let n = s.seeds as f64;
        s.mean_pre /= n;
        s.mean_post /= n;
        s.mean_delta /= n;
    }
    out
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_matrix(path: &Path, m: &Matrix, row_name: &str, col_prefix: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![row_name.to_string()];
    header.extend((0..m.cols()).map(|j| format!("{col_prefix}{j}")));
    w.write_record(&header)?;
    for i in 0..m.rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ProjectionRow {
    image: usize,
    label: usize,
    stage: &'static str,
    x: f64,
    y: f64,
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    l_ent: f64,
    l_pir: f64,
    l_ca: f64,
    total: f64,
}

#[derive(Serialize)]
struct DispersionRow {
    stage: &'static str,
    dispersion: f64,
    heatmap_mean_diagonal: f64,
    explained_x: f64,
    explained_y: f64,
}

impl ReportBundle {
    /// Writes every table present into `dir`, creating it if needed, and
    /// returns the written paths in a fixed order.
    pub fn write_csv(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut emit = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
            let p = dir.join(name);
            f(&p)?;
            written.push(p);
            Ok(())
        };

        emit("accuracy.csv", &|p| write_rows(p, &self.accuracy))?;
        if !self.summary.is_empty() {
            emit("summary.csv", &|p| write_rows(p, &self.summary))?;
        }
        if !self.loss_curve.is_empty() {
            let rows: Vec<LossRow> = self
                .loss_curve
                .iter()
                .enumerate()
                .map(|(step, l)| LossRow {
                    step,
                    l_ent: l.l_ent,
                    l_pir: l.l_pir,
                    l_ca: l.l_ca,
                    total: l.total,
                })
                .collect();
            emit("loss_curve.csv", &|p| write_rows(p, &rows))?;
        }
        if let Some(d) = &self.diagnostics {
            emit("heatmap_pre.csv", &|p| write_matrix(p, &d.heatmap_pre, "class", "category_"))?;
            emit("heatmap_post.csv", &|p| write_matrix(p, &d.heatmap_post, "class", "category_"))?;
            let mut rows = Vec::with_capacity(2 * d.labels.len());
            for (stage, proj) in [("pre", &d.projection_pre), ("post", &d.projection_post)] {
                for (image, (pt, &label)) in proj.points.iter().zip(&d.labels).enumerate() {
                    rows.push(ProjectionRow {
                        image,
                        label,
                        stage,
                        x: pt[0],
                        y: pt[1],
                    });
                }
            }
            emit("projection.csv", &|p| write_rows(p, &rows))?;
            let disp = [
                ("pre", d.dispersion_pre, &d.heatmap_pre, &d.projection_pre),
                ("post", d.dispersion_post, &d.heatmap_post, &d.projection_post),
            ]
            .map(|(stage, dispersion, h, proj)| DispersionRow {
                stage,
                dispersion,
                heatmap_mean_diagonal: mean_diagonal(h),
                explained_x: proj.explained[0],
                explained_y: proj.explained[1],
            });
            emit("dispersion.csv", &|p| write_rows(p, &disp))?;
            if let Some((pre, post)) = &d.per_image {
                emit("similarity_pre.csv", &|p| write_matrix(p, pre, "image", "category_"))?;
                emit("similarity_post.csv", &|p| write_matrix(p, post, "image", "category_"))?;
            }
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats(m: usize, d: usize) -> CategoryEmbeddings {
        CategoryEmbeddings::seeded_orthonormal(m, d, 3).unwrap()
    }

    #[test]
    fn aligned_set_has_dominant_diagonal() {
        let t = cats(3, 5);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for k in 0..4 {
                let mut r = t.matrix().row(c).to_vec();
                r[k % 5] += 0.1 * (k as f64 + 1.0);
                rows.push(r);
                labels.push(c);
            }
        }
        let h = class_heatmap(&Matrix::from_rows(&rows).unwrap(), &labels, &t).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(h.get(i, i) > h.get(i, j));
                }
            }
        }
        assert!(mean_diagonal(&h) > 0.9);
    }

    #[test]
    fn empty_class_row_is_zero() {
        let t = cats(3, 4);
        let v = Matrix::from_rows(&[t.matrix().row(0).to_vec()]).unwrap();
        let h = class_heatmap(&v, &[0], &t).unwrap();
        assert!((h.get(0, 0) - 1.0).abs() < 1e-12);
        assert_eq!(h.row(2), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn dispersion_of_two_points() {
        let v = Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0], [3.0, 4.0]]).unwrap();
        assert!((dispersion(&v, &[0, 1, 1], 2) - 5.0).abs() < 1e-12);
        assert_eq!(dispersion(&v, &[0, 0, 0], 2), 0.0);
    }

    #[test]
    fn pca_recovers_dominant_axis_with_sign_convention() {
        // points along (−1, 2)/√5 with a little spread on the orthogonal axis
        let dir = [-1.0 / 5f64.sqrt(), 2.0 / 5f64.sqrt()];
        let perp = [dir[1], -dir[0]];
        let rows: Vec<[f64; 2]> = (-5..=5)
            .map(|k| {
                let a = k as f64;
                let b = 0.1 * if k % 2 == 0 { 1.0 } else { -1.0 };
                [a * dir[0] + b * perp[0], a * dir[1] + b * perp[1]]
            })
            .collect();
        let (basis, _, explained) = pca_basis(&Matrix::from_rows(&rows).unwrap()).unwrap();
        assert!(explained[0] > explained[1]);
        // first loading positive, so the axis is +(1, −2)/√5
        assert!((basis.get(0, 0) - 1.0 / 5f64.sqrt()).abs() < 1e-9);
        assert!((basis.get(1, 0) + 2.0 / 5f64.sqrt()).abs() < 1e-9);
        assert!(basis.get(0, 1) > 0.0);
    }

    #[test]
    fn summary_averages_per_cell() {
        let row = |seed, mask: &str, delta| AccuracyRow {
            seed,
            encoder: "vit".into(),
            mask: mask.into(),
            alpha: 1.0,
            beta: 1.0,
            pre_accuracy: 0.5,
            post_accuracy: 0.5 + delta,
            online_accuracy: 0.5,
            delta,
        };
        let s = summarize(&[row(0, "full", 0.1), row(0, "ent", 0.0), row(1, "full", 0.3)]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].mask, "full");
        assert_eq!(s[0].seeds, 2);
        assert!((s[0].mean_delta - 0.2).abs() < 1e-12);
    }

    #[test]
    fn csv_bytes_are_reproducible() {
        let t = cats(2, 3);
        let pre = Matrix::from_rows(&[[1.0, 0.1, 0.0], [0.2, 1.0, 0.3], [0.9, 0.0, 0.1]]).unwrap();
        let post = pre.scale(1.5);
        let d = Diagnostics::compute(&pre, &post, &[0, 1, 0], &t, true).unwrap();
        let bundle = ReportBundle {
            diagnostics: Some(d),
            loss_curve: vec![LossBreakdown::new(1.0, 0.5, 0.25, 1.0, 1.0)],
            ..ReportBundle::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = bundle.write_csv(a.path()).unwrap();
        let pb = bundle.write_csv(b.path()).unwrap();
        assert_eq!(pa.len(), 8);
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let heat = fs::read_to_string(a.path().join("heatmap_pre.csv")).unwrap();
        assert!(heat.starts_with("class,category_0,category_1\n"));
    }
}
