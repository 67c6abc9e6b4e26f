//! Embedding-space metrics, evaluation grids, gradient checking and
//! model-size reports.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{stack_nchw, unstack_nchw, ImageTensor};
use crate::models::a1::A1Bundle;
use crate::models::a2::GeneratorA2;
use crate::models::{Embedder, StyleTransfer};
use crate::util;

/// Embeds `images` in chunks of `batch`, one row per image.
pub fn embed_corpus(encoder: &dyn Embedder, images: &[ImageTensor], batch: usize) -> Result<Vec<Vec<f64>>> {
    if batch == 0 {
        return Err(Error::arg("batch must be >= 1"));
    }
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch) {
        let emb = encoder.embed_batch(&stack_nchw(chunk, DType::F32)?)?;
        let emb: Vec<Vec<f32>> = emb.to_dtype(DType::F32)?.to_vec2()?;
        rows.extend(emb.into_iter().map(|r| r.into_iter().map(f64::from).collect::<Vec<_>>()));
    }
    Ok(rows)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub label: usize,
    pub name: String,
    pub count: usize,
    pub silhouette: f64,
    pub intra_mean: f64,
    pub centroid_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub silhouette: f64,
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub nearest_centroid_accuracy: f64,
    pub per_class: Vec<ClassRow>,
}

fn centroid<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> (Vec<f64>, usize) {
    let mut c = vec![0.0; dim];
    let mut n = 0;
    for r in rows {
        for (a, b) in c.iter_mut().zip(r) {
            *a += b;
        }
        n += 1;
    }
    for a in &mut c {
        *a /= n.max(1) as f64;
    }
    (c, n)
}

/// Euclidean silhouette, mean intra/inter-class distances and leave-one-out
/// nearest-centroid accuracy. Needs at least two classes with at least two
/// samples each; classes absent from `labels` are ignored.
pub fn cluster_quality(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    class_names: &[String],
) -> Result<ClusterReport> {
    if embeddings.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let dim = embeddings.first().map_or(0, Vec::len);
    if embeddings.iter().any(|e| e.len() != dim) || dim == 0 {
        return Err(Error::shape("embeddings must be non-empty rows of equal length"));
    }
    let name = |l: usize| class_names.get(l).cloned().unwrap_or_else(|| format!("class_{l}"));
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::arg(format!(
            "cluster quality needs >= 2 classes, got {}",
            classes.len()
        )));
    }
    for &c in &classes {
        let n = labels.iter().filter(|&&l| l == c).count();
        if n < 2 {
            return Err(Error::arg(format!(
                "class `{}` has {n} sample(s); at least 2 are needed",
                name(c)
            )));
        }
    }
    let n = embeddings.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(&embeddings[i], &embeddings[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let (mut intra_sum, mut intra_n, mut inter_sum, mut inter_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                intra_sum += dist[i * n + j];
                intra_n += 1;
            } else {
                inter_sum += dist[i * n + j];
                inter_n += 1;
            }
        }
    }

    let full: Vec<(usize, Vec<f64>, usize)> = classes
        .iter()
        .map(|&c| {
            let (v, k) = centroid(
                embeddings.iter().zip(labels).filter(|(_, &l)| l == c).map(|(e, _)| e),
                dim,
            );
            (c, v, k)
        })
        .collect();

    let mut sil = vec![0.0; n];
    let mut correct = vec![false; n];
    for i in 0..n {
        let mean_to = |c: usize| {
            let (s, k) = (0..n)
                .filter(|&j| j != i && labels[j] == c)
                .fold((0.0, 0usize), |(s, k), j| (s + dist[i * n + j], k + 1));
            s / k as f64
        };
        let a = mean_to(labels[i]);
        let b = classes
            .iter()
            .filter(|&&c| c != labels[i])
            .map(|&c| mean_to(c))
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        sil[i] = if m > 0.0 { (b - a) / m } else { 0.0 };

        let mut best = (f64::INFINITY, usize::MAX);
        for (c, cen, k) in &full {
            let d = if *c == labels[i] {
                // Own centroid without the held-out point.
                let loo: Vec<f64> = cen
                    .iter()
                    .zip(&embeddings[i])
                    .map(|(m, x)| (m * *k as f64 - x) / (*k - 1) as f64)
                    .collect();
                euclidean(&embeddings[i], &loo)
            } else {
                euclidean(&embeddings[i], cen)
            };
            if d < best.0 {
                best = (d, *c);
            }
        }
        correct[i] = best.1 == labels[i];
    }

    let per_class = classes
        .iter()
        .map(|&c| {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            let k = idx.len() as f64;
            let (mut s, mut sn) = (0.0, 0usize);
            for (p, &i) in idx.iter().enumerate() {
                for &j in &idx[p + 1..] {
                    s += dist[i * n + j];
                    sn += 1;
                }
            }
            ClassRow {
                label: c,
                name: name(c),
                count: idx.len(),
                silhouette: idx.iter().map(|&i| sil[i]).sum::<f64>() / k,
                intra_mean: s / sn as f64,
                centroid_accuracy: idx.iter().filter(|&&i| correct[i]).count() as f64 / k,
            }
        })
        .collect();

    Ok(ClusterReport {
        silhouette: sil.iter().sum::<f64>() / n as f64,
        intra_mean: intra_sum / intra_n.max(1) as f64,
        inter_mean: inter_sum / inter_n.max(1) as f64,
        nearest_centroid_accuracy: correct.iter().filter(|&&c| c).count() as f64 / n as f64,
        per_class,
    })
}

/// Projection onto the two leading principal components.
pub fn pca_2d(embeddings: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let n = embeddings.len();
    let dim = embeddings.first().map_or(0, Vec::len);
    if n < 2 || dim == 0 {
        return Err(Error::arg("PCA needs at least 2 non-empty rows"));
    }
    let x = DMatrix::from_fn(n, dim, |i, j| embeddings[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| order.get(k).map(|&c| eig.eigenvectors.column(c).into_owned());
    let (p0, p1) = (axis(0).unwrap(), axis(1));
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let x = row.dot(&p0.transpose());
            let y = p1.as_ref().map_or(0.0, |p| row.dot(&p.transpose()));
            (x, y)
        })
        .collect())
}

/// Writes `x,y,label` rows.
pub fn export_pca_csv(path: &Path, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    let pts = pca_2d(embeddings)?;
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    w.write_record(["x", "y", "label"]).map_err(io)?;
    for ((x, y), l) in pts.iter().zip(labels) {
        w.write_record([x.to_string(), y.to_string(), l.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------

/// `(N + 1) x (M + 1)` tile grid: row 0 holds the styles, column 0 the
/// contents, cell `(i, j)` the transfer of content `i` under style `j`.
/// The corner tile is white.
pub fn build_eval_grid(
    model: &dyn StyleTransfer,
    contents: &[ImageTensor],
    styles: &[ImageTensor],
) -> Result<ImageTensor> {
    if contents.is_empty() || styles.is_empty() {
        return Err(Error::arg("evaluation grid needs contents and styles"));
    }
    let (h, w, c) = contents[0].shape();
    for img in contents.iter().chain(styles) {
        contents[0].ensure_same_shape(img, "grid images differ in shape")?;
    }
    let (rows, cols) = (contents.len() + 1, styles.len() + 1);
    let mut canvas = ImageTensor::filled(rows * h, cols * w, c, 1.0);
    let mut paste = |r: usize, col: usize, img: &ImageTensor| {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    canvas.set(r * h + y, col * w + x, ch, img.get(y, x, ch));
                }
            }
        }
    };
    for (j, s) in styles.iter().enumerate() {
        paste(0, j + 1, s);
    }
    let style_t = stack_nchw(styles, DType::F32)?;
    for (i, content) in contents.iter().enumerate() {
        paste(i + 1, 0, content);
        let reps = vec![content.clone(); styles.len()];
        let out = model.transfer_batch(&stack_nchw(&reps, DType::F32)?, &style_t)?;
        for (j, img) in unstack_nchw(&out)?.iter().enumerate() {
            paste(i + 1, j + 1, img);
        }
    }
    Ok(canvas)
}

pub fn export_eval_grid(
    model: &dyn StyleTransfer,
    contents: &[ImageTensor],
    styles: &[ImageTensor],
    path: &Path,
) -> Result<ImageTensor> {
    let grid = build_eval_grid(model, contents, styles)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            util::create_dir_all(parent)?;
        }
    }
    grid.save_png(path)?;
    Ok(grid)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the autograd gradient of scalar `f` at `input` against central
/// differences with step `h`, in `f64`. The error per coordinate is
/// `|analytic - numeric| / max(|analytic|, 1e-6)`.
pub fn finite_diff_gradcheck<F>(f: F, input: &[f64], shape: &[usize], h: f64) -> Result<GradcheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let n: usize = shape.iter().product();
    if n != input.len() || n == 0 {
        return Err(Error::shape(format!(
            "input of {} values does not fill shape {shape:?}",
            input.len()
        )));
    }
    if !(h > 0.0) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    let eval = |v: &[f64]| -> Result<f64> {
        let t = Tensor::from_vec(v.to_vec(), shape, &Device::Cpu)?;
        let y = f(&t)?;
        let y = y.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        match y.as_slice() {
            [v] if v.is_finite() => Ok(*v),
            [v] => Err(Error::arg(format!("function value is not finite ({v})"))),
            _ => Err(Error::shape("gradcheck function must return a scalar")),
        }
    };
    let var = Var::from_vec(input.to_vec(), shape, &Device::Cpu)?;
    let y = f(var.as_tensor())?;
    let grads = y.backward()?;
    let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1()?,
        None => vec![0.0; n],
    };
    let mut numeric = Vec::with_capacity(n);
    let mut x = input.to_vec();
    for k in 0..n {
        let orig = x[k];
        x[k] = orig + h;
        let fp = eval(&x)?;
        x[k] = orig - h;
        let fm = eval(&x)?;
        x[k] = orig;
        numeric.push((fp - fm) / (2.0 * h));
    }
    let (mut worst, mut idx) = (0.0, 0);
    for k in 0..n {
        let e = (analytic[k] - numeric[k]).abs() / analytic[k].abs().max(1e-6);
        if e > worst {
            worst = e;
            idx = k;
        }
    }
    Ok(GradcheckReport {
        max_rel_error: worst,
        worst_index: idx,
        analytic,
        numeric,
    })
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub a1_total: usize,
    pub a2_total: usize,
    pub a1_breakdown: Vec<(String, usize)>,
    pub a2_breakdown: Vec<(String, usize)>,
    pub a2_smaller: bool,
}

pub fn compare_param_counts(a1: &A1Bundle, a2: &GeneratorA2) -> ParamReport {
    let a1_breakdown = a1.breakdown();
    let a2_breakdown = a2.breakdown();
    let a1_total = a1_breakdown.iter().map(|(_, n)| n).sum();
    let a2_total = a2_breakdown.iter().map(|(_, n)| n).sum();
    ParamReport {
        a1_total,
        a2_total,
        a1_breakdown,
        a2_breakdown,
        a2_smaller: a2_total < a1_total,
    }
}
