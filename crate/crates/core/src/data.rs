//! Corpora, the paired image matrix, samplers and procedural fixtures.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::PairLabel;
use crate::util;
use crate::wavelet::{haar_dwt2, haar_idwt2};

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];
pub const MANIFEST_VERSION: u32 = 1;

/// Rec. 601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Decodes an image file, resizes it bilinearly to `(height, width)` and
/// maps it into `[-1, 1]`.
pub fn load_and_preprocess(path: &Path, size: (usize, usize)) -> Result<ImageTensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (h, w) = size;
    let img = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle)
    };
    Ok(ImageTensor::from_rgb8(&img))
}

/// Loads every image in a flat directory, sorted by file name.
pub fn load_image_dir(dir: &Path, size: (usize, usize)) -> Result<Vec<(PathBuf, ImageTensor)>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ));
    }
    util::list_files(dir, IMAGE_EXTENSIONS)?
        .into_iter()
        .map(|p| {
            let img = load_and_preprocess(&p, size)?;
            Ok((p, img))
        })
        .collect()
}

// ---------------------------------------------------------------------------

/// Dense grid of stylised images: rows are contents, columns are styles.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMatrix {
    contents: Vec<ImageTensor>,
    styles: Vec<ImageTensor>,
    cells: Vec<Vec<ImageTensor>>,
}

impl ImageMatrix {
    pub fn new(
        contents: Vec<ImageTensor>,
        styles: Vec<ImageTensor>,
        cells: Vec<Vec<ImageTensor>>,
    ) -> Result<Self> {
        if contents.is_empty() || styles.is_empty() {
            return Err(Error::arg("image matrix needs at least one content and one style"));
        }
        if cells.len() != contents.len() || cells.iter().any(|r| r.len() != styles.len()) {
            return Err(Error::shape(format!(
                "cells must form a dense {}x{} grid",
                contents.len(),
                styles.len()
            )));
        }
        let first = &contents[0];
        for img in contents.iter().chain(&styles).chain(cells.iter().flatten()) {
            first.ensure_same_shape(img, "image matrix entries differ in shape")?;
        }
        if first.channels() != 3 {
            return Err(Error::shape("image matrix entries must be RGB"));
        }
        Ok(Self {
            contents,
            styles,
            cells,
        })
    }

    pub fn rows(&self) -> usize {
        self.contents.len()
    }

    pub fn cols(&self) -> usize {
        self.styles.len()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.contents[0].shape()
    }

    pub fn contents(&self) -> &[ImageTensor] {
        &self.contents
    }

    pub fn styles(&self) -> &[ImageTensor] {
        &self.styles
    }

    pub fn cell(&self, row: usize, col: usize) -> &ImageTensor {
        &self.cells[row][col]
    }

    pub fn triplet(&self, row: usize, col: usize) -> TripletSample {
        TripletSample {
            row,
            col,
            content: self.contents[row].clone(),
            style: self.styles[col].clone(),
            target: self.cells[row][col].clone(),
        }
    }
}

/// Source of the stylised targets in the image matrix.
pub trait Stylizer {
    fn name(&self) -> &str;
    fn stylize(&self, content: &ImageTensor, style: &ImageTensor, seed: u64) -> Result<ImageTensor>;
}

pub struct IdentityStylizer;

impl Stylizer for IdentityStylizer {
    fn name(&self) -> &str {
        "identity"
    }
    fn stylize(&self, content: &ImageTensor, style: &ImageTensor, _seed: u64) -> Result<ImageTensor> {
        content.ensure_same_shape(style, "content and style")?;
        Ok(content.clone())
    }
}

/// Deterministic stand-in for a pretrained style transfer network.
#[derive(Clone, Debug, PartialEq)]
pub struct ProceduralStylizer {
    pub detail_gain: f32,
    pub levels: usize,
}

impl Default for ProceduralStylizer {
    fn default() -> Self {
        Self {
            detail_gain: 0.3,
            levels: 2,
        }
    }
}

impl Stylizer for ProceduralStylizer {
    fn name(&self) -> &str {
        "procedural"
    }
    fn stylize(&self, content: &ImageTensor, style: &ImageTensor, _seed: u64) -> Result<ImageTensor> {
        procedural_stylize(content, style, self.detail_gain, self.levels)
    }
}

/// Keeps the content's luminance structure, shifts its chroma toward the
/// style's channel means and blends in the style's Haar detail bands.
///
/// The colour shift is the difference of channel means with its luma
/// component removed, so the luminance of the coarsest LL band is the
/// content's own whenever clipping is inactive.
pub fn procedural_stylize(
    content: &ImageTensor,
    style: &ImageTensor,
    detail_gain: f32,
    levels: usize,
) -> Result<ImageTensor> {
    content.ensure_same_shape(style, "content and style")?;
    if content.channels() != 3 {
        return Err(Error::shape("procedural stylizer needs RGB images"));
    }
    let diff: [f64; 3] =
        std::array::from_fn(|c| style.channel_mean(c) - content.channel_mean(c));
    let luma: f64 = (0..3).map(|c| LUMA[c] as f64 * diff[c]).sum();
    let shift: [f32; 3] = std::array::from_fn(|c| (diff[c] - luma) as f32);
    let shifted = ImageTensor::from_fn(content.height(), content.width(), 3, |y, x, c| {
        content.get(y, x, c) + shift[c]
    });
    let mut pyr = haar_dwt2(&shifted, levels)?;
    let spyr = haar_dwt2(style, levels)?;
    for (lvl, slvl) in pyr.levels_mut().iter_mut().zip(spyr.levels()) {
        for (band, sband) in [
            (&mut lvl.lh, &slvl.lh),
            (&mut lvl.hl, &slvl.hl),
            (&mut lvl.hh, &slvl.hh),
        ] {
            for (d, s) in band.data_mut().iter_mut().zip(sband.data()) {
                *d += detail_gain * (s - *d);
            }
        }
    }
    Ok(haar_idwt2(&pyr)?.map(|v| v.clamp(-1.0, 1.0)))
}

/// Fills every cell with `stylizer(contents[i], styles[j])`.
pub fn synthesize_image_matrix(
    contents: &[ImageTensor],
    styles: &[ImageTensor],
    stylizer: &dyn Stylizer,
    seed: u64,
) -> Result<ImageMatrix> {
    if contents.is_empty() || styles.is_empty() {
        return Err(Error::arg("need at least one content and one style image"));
    }
    let mut cells = Vec::with_capacity(contents.len());
    for (i, c) in contents.iter().enumerate() {
        let mut row = Vec::with_capacity(styles.len());
        for (j, s) in styles.iter().enumerate() {
            let cell_seed = seed ^ ((i as u64) << 32 | j as u64);
            let out = stylizer
                .stylize(c, s, cell_seed)
                .map_err(|e| Error::Stylizer {
                    row: i,
                    col: j,
                    source: Box::new(e),
                })?;
            if out.shape() != c.shape() {
                return Err(Error::Stylizer {
                    row: i,
                    col: j,
                    source: Box::new(Error::shape(format!(
                        "stylizer returned {:?} for a {:?} input",
                        out.shape(),
                        c.shape()
                    ))),
                });
            }
            row.push(out);
        }
        cells.push(row);
    }
    ImageMatrix::new(contents.to_vec(), styles.to_vec(), cells)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixManifest {
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    pub image_size: (usize, usize),
    pub stylizer: String,
    pub seed: u64,
    pub contents: Vec<StoredFile>,
    pub styles: Vec<StoredFile>,
    /// Row-major.
    pub cells: Vec<StoredFile>,
}

fn png_bytes(img: &ImageTensor) -> Result<Vec<u8>> {
    let rgb = img.to_rgb8()?;
    let mut buf = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: PathBuf::from("<memory>"),
            source,
        })?;
    Ok(buf.into_inner())
}

fn store_png(dir: &Path, name: String, img: &ImageTensor) -> Result<StoredFile> {
    let bytes = png_bytes(img)?;
    util::write_atomic(&dir.join(&name), &bytes)?;
    Ok(StoredFile {
        file: name,
        sha256: util::sha256_hex(&bytes),
    })
}

/// Writes `content_{i}.png`, `style_{j}.png`, `cell_{i}_{j}.png` and
/// `matrix.json` into `dir`.
pub fn save_matrix_store(
    matrix: &ImageMatrix,
    dir: &Path,
    stylizer: &str,
    seed: u64,
) -> Result<MatrixManifest> {
    util::create_dir_all(dir)?;
    let contents = matrix
        .contents
        .iter()
        .enumerate()
        .map(|(i, img)| store_png(dir, format!("content_{i}.png"), img))
        .collect::<Result<Vec<_>>>()?;
    let styles = matrix
        .styles
        .iter()
        .enumerate()
        .map(|(j, img)| store_png(dir, format!("style_{j}.png"), img))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for i in 0..matrix.rows() {
        for j in 0..matrix.cols() {
            cells.push(store_png(dir, format!("cell_{i}_{j}.png"), matrix.cell(i, j))?);
        }
    }
    let (h, w, _) = matrix.image_shape();
    let manifest = MatrixManifest {
        version: MANIFEST_VERSION,
        rows: matrix.rows(),
        cols: matrix.cols(),
        image_size: (h, w),
        stylizer: stylizer.to_string(),
        seed,
        contents,
        styles,
        cells,
    };
    util::write_atomic(&dir.join("matrix.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn load_stored(dir: &Path, f: &StoredFile, size: (usize, usize)) -> Result<ImageTensor> {
    let path = dir.join(&f.file);
    let bytes = util::read(&path)?;
    if util::sha256_hex(&bytes) != f.sha256 {
        return Err(Error::Checksum(path.display().to_string()));
    }
    load_and_preprocess(&path, size)
}

/// Reads a matrix store, verifying every file checksum.
pub fn load_matrix_store(dir: &Path) -> Result<(ImageMatrix, MatrixManifest)> {
    let mpath = dir.join("matrix.json");
    let m: MatrixManifest = serde_json::from_slice(&util::read(&mpath)?)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::arg(format!("unsupported matrix store version {}", m.version)));
    }
    if m.cells.len() != m.rows * m.cols || m.contents.len() != m.rows || m.styles.len() != m.cols {
        return Err(Error::shape(format!("{} lists do not match its {}x{} grid", mpath.display(), m.rows, m.cols)));
    }
    let size = m.image_size;
    let contents = m.contents.iter().map(|f| load_stored(dir, f, size)).collect::<Result<Vec<_>>>()?;
    let styles = m.styles.iter().map(|f| load_stored(dir, f, size)).collect::<Result<Vec<_>>>()?;
    let flat = m.cells.iter().map(|f| load_stored(dir, f, size)).collect::<Result<Vec<_>>>()?;
    let mut it = flat.into_iter();
    let cells = (0..m.rows).map(|_| it.by_ref().take(m.cols).collect()).collect();
    Ok((ImageMatrix::new(contents, styles, cells)?, m))
}

// ---------------------------------------------------------------------------

/// `(content, style, stylised target)` training unit with its cell index.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub row: usize,
    pub col: usize,
    pub content: ImageTensor,
    pub style: ImageTensor,
    pub target: ImageTensor,
}

/// One shuffled pass over every cell.
pub fn make_triplets(matrix: &ImageMatrix, rng: &mut ChaCha8Rng) -> Vec<TripletSample> {
    let mut order: Vec<(usize, usize)> = (0..matrix.rows())
        .flat_map(|i| (0..matrix.cols()).map(move |j| (i, j)))
        .collect();
    order.shuffle(rng);
    order.into_iter().map(|(i, j)| matrix.triplet(i, j)).collect()
}

/// Stateless triplet schedule: the order of epoch `e` depends only on
/// `(seed, e)`, so any step can be reproduced without replaying earlier ones.
#[derive(Clone, Debug)]
pub struct TripletSampler {
    rows: usize,
    cols: usize,
    seed: u64,
}

impl TripletSampler {
    pub fn new(matrix: &ImageMatrix, seed: u64) -> Self {
        Self {
            rows: matrix.rows(),
            cols: matrix.cols(),
            seed,
        }
    }

    pub fn epoch_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch.wrapping_add(1000));
        let mut order: Vec<(usize, usize)> = (0..self.rows)
            .flat_map(|i| (0..self.cols).map(move |j| (i, j)))
            .collect();
        order.shuffle(&mut rng);
        order
    }

    /// Cell indices of the `step`-th batch.
    pub fn batch_indices(&self, step: u64, batch_size: usize) -> Vec<(usize, usize)> {
        let n = self.epoch_len() as u64;
        let start = step * batch_size as u64;
        let mut cached: Option<(u64, Vec<(usize, usize)>)> = None;
        (0..batch_size as u64)
            .map(|k| {
                let g = start + k;
                let (epoch, pos) = (g / n, (g % n) as usize);
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    cached = Some((epoch, self.epoch_order(epoch)));
                }
                cached.as_ref().map(|c| c.1[pos]).unwrap()
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------

/// Random horizontal flip followed by a random crop covering 80-100% of
/// each side, resized back to the input size.
pub fn augment(img: &ImageTensor, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let (h, w, _) = img.shape();
    let flipped = if rng.random_bool(0.5) {
        img.flip_horizontal()
    } else {
        img.clone()
    };
    let scale: f64 = rng.random_range(0.8..=1.0);
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    flipped.crop_resize(top, left, ch, cw, h, w)
}

/// Content pairs for the content encoder's verification objective.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub anchors: Vec<ImageTensor>,
    pub partners: Vec<ImageTensor>,
    pub labels: Vec<PairLabel>,
    pub anchor_ids: Vec<usize>,
    pub partner_ids: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Each slot is positive with probability 0.5 (anchor against an augmented
/// view of itself) and otherwise negative (anchor against an augmented view
/// of a different image).
pub fn sample_content_pairs(
    contents: &[ImageTensor],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    if batch_size < 1 {
        return Err(Error::arg("batch_size must be >= 1"));
    }
    if contents.len() < 2 {
        return Err(Error::arg(format!(
            "content pairs need at least 2 images, got {}",
            contents.len()
        )));
    }
    let n = contents.len();
    let mut b = PairBatch {
        anchors: Vec::with_capacity(batch_size),
        partners: Vec::with_capacity(batch_size),
        labels: Vec::with_capacity(batch_size),
        anchor_ids: Vec::with_capacity(batch_size),
        partner_ids: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let a = rng.random_range(0..n);
        let positive = rng.random_bool(0.5);
        let p = if positive {
            a
        } else {
            let k = rng.random_range(0..n - 1);
            if k >= a {
                k + 1
            } else {
                k
            }
        };
        b.anchors.push(contents[a].clone());
        b.partners.push(augment(&contents[p], rng)?);
        b.labels.push(PairLabel::from_bool(positive));
        b.anchor_ids.push(a);
        b.partner_ids.push(p);
    }
    Ok(b)
}

// ---------------------------------------------------------------------------

/// Labelled style images.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCorpus {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl StyleCorpus {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if images.is_empty() {
            return Err(Error::arg("style corpus is empty"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::arg(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        let first = &images[0];
        for img in &images {
            first.ensure_same_shape(img, "style corpus images differ in shape")?;
        }
        Ok(Self {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Metric-learning runs need at least two populated classes.
    pub fn ensure_metric_ready(&self) -> Result<()> {
        let populated = self.class_counts().iter().filter(|&&c| c > 0).count();
        if populated < 2 {
            return Err(Error::arg(format!(
                "style corpus needs >= 2 populated classes, has {populated}"
            )));
        }
        Ok(())
    }

    /// Deterministic split keeping every `k`-th image of each class aside.
    pub fn split_every(&self, k: usize) -> Result<(StyleCorpus, StyleCorpus)> {
        if k < 2 {
            return Err(Error::arg("split stride must be >= 2"));
        }
        let mut seen = vec![0usize; self.num_classes()];
        let (mut tr, mut te) = ((Vec::new(), Vec::new()), (Vec::new(), Vec::new()));
        for (img, &l) in self.images.iter().zip(&self.labels) {
            let dst = if seen[l] % k == k - 1 { &mut te } else { &mut tr };
            dst.0.push(img.clone());
            dst.1.push(l);
            seen[l] += 1;
        }
        Ok((
            StyleCorpus::new(tr.0, tr.1, self.class_names.clone())?,
            StyleCorpus::new(te.0, te.1, self.class_names.clone())?,
        ))
    }
}

/// Anchors and style references for the style encoder's class objective.
#[derive(Clone, Debug)]
pub struct StyleBatch {
    pub anchors: Vec<ImageTensor>,
    pub anchor_labels: Vec<usize>,
    pub anchor_ids: Vec<usize>,
    pub styles: Vec<ImageTensor>,
    pub style_labels: Vec<usize>,
    /// Corpus index of each style sample; `None` for a fallback view.
    pub style_ids: Vec<Option<usize>>,
    pub fallbacks: usize,
}

const ANCHOR_ATTEMPTS: usize = 64;

/// Draws styles uniformly, then anchors uniformly, redrawing an anchor
/// until some *other* style sample shares its class. When no draw
/// succeeds the anchor's augmented view is appended to the styles.
pub fn sample_style_batch(
    corpus: &StyleCorpus,
    anchors_per_batch: usize,
    styles_per_batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StyleBatch> {
    if anchors_per_batch < 1 || styles_per_batch < 1 {
        return Err(Error::arg("anchor and style batch sizes must be >= 1"));
    }
    let n = corpus.len();
    let style_ids: Vec<usize> = (0..styles_per_batch).map(|_| rng.random_range(0..n)).collect();
    let mut b = StyleBatch {
        anchors: Vec::with_capacity(anchors_per_batch),
        anchor_labels: Vec::with_capacity(anchors_per_batch),
        anchor_ids: Vec::with_capacity(anchors_per_batch),
        styles: style_ids.iter().map(|&i| corpus.images[i].clone()).collect(),
        style_labels: style_ids.iter().map(|&i| corpus.labels[i]).collect(),
        style_ids: style_ids.iter().map(|&i| Some(i)).collect(),
        fallbacks: 0,
    };
    let covered = |a: usize, ids: &[usize]| ids.iter().any(|&s| s != a && corpus.labels[s] == corpus.labels[a]);
    for _ in 0..anchors_per_batch {
        let mut a = rng.random_range(0..n);
        let mut ok = covered(a, &style_ids);
        for _ in 1..ANCHOR_ATTEMPTS {
            if ok {
                break;
            }
            a = rng.random_range(0..n);
            ok = covered(a, &style_ids);
        }
        if !ok {
            b.styles.push(augment(&corpus.images[a], rng)?);
            b.style_labels.push(corpus.labels[a]);
            b.style_ids.push(None);
            b.fallbacks += 1;
        }
        b.anchors.push(corpus.images[a].clone());
        b.anchor_labels.push(corpus.labels[a]);
        b.anchor_ids.push(a);
    }
    Ok(b)
}

// ---------------------------------------------------------------------------

/// On-disk style corpus description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleManifest {
    pub version: u32,
    pub classes: Vec<String>,
    pub files: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the corpus root.
    pub path: String,
    pub label: usize,
    pub sha256: String,
}

/// Writes `<class>/<class>_<k>.png` per image plus `manifest.json`.
pub fn save_style_corpus(corpus: &StyleCorpus, dir: &Path) -> Result<StyleManifest> {
    let mut counters = vec![0usize; corpus.num_classes()];
    let mut files = Vec::with_capacity(corpus.len());
    for (img, &l) in corpus.images.iter().zip(&corpus.labels) {
        let class = &corpus.class_names[l];
        let sub = dir.join(class);
        util::create_dir_all(&sub)?;
        let name = format!("{class}_{:03}.png", counters[l]);
        counters[l] += 1;
        let stored = store_png(&sub, name, img)?;
        files.push(ManifestEntry {
            path: format!("{class}/{}", stored.file),
            label: l,
            sha256: stored.sha256,
        });
    }
    let manifest = StyleManifest {
        version: MANIFEST_VERSION,
        classes: corpus.class_names.clone(),
        files,
    };
    util::write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads a directory-per-class corpus. A `manifest.json` at the root, when
/// present, defines files and labels and its checksums are verified.
pub fn load_style_corpus(dir: &Path, size: (usize, usize)) -> Result<StyleCorpus> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ));
    }
    let mpath = dir.join("manifest.json");
    if mpath.is_file() {
        let m: StyleManifest = serde_json::from_slice(&util::read(&mpath)?)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::arg(format!("unsupported corpus manifest version {}", m.version)));
        }
        let mut images = Vec::with_capacity(m.files.len());
        let mut labels = Vec::with_capacity(m.files.len());
        for f in &m.files {
            let stored = StoredFile {
                file: f.path.clone(),
                sha256: f.sha256.clone(),
            };
            images.push(load_stored(dir, &stored, size)?);
            labels.push(f.label);
        }
        return StyleCorpus::new(images, labels, m.classes);
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut classes = Vec::new();
    for sub in util::list_dirs(dir)? {
        let label = classes.len();
        classes.push(sub.file_name().unwrap_or_default().to_string_lossy().into_owned());
        for (_, img) in load_image_dir(&sub, size)? {
            images.push(img);
            labels.push(label);
        }
    }
    StyleCorpus::new(images, labels, classes)
}

/// Writes `<prefix>_<k>.png` for each image.
pub fn save_image_dir(images: &[ImageTensor], dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    util::create_dir_all(dir)?;
    images
        .iter()
        .enumerate()
        .map(|(k, img)| {
            let path = dir.join(format!("{prefix}_{k:03}.png"));
            util::write_atomic(&path, &png_bytes(img)?)?;
            Ok(path)
        })
        .collect()
}

// ---------------------------------------------------------------------------

pub const TEXTURE_GENERATORS: &[&str] = &["stripes", "checker", "dots", "perlin-noise"];

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    std::array::from_fn(|_| rng.random_range(-1.0..1.0))
}

/// Two colours whose luminance differs by at least 0.6.
fn contrasting_pair(rng: &mut ChaCha8Rng) -> ([f32; 3], [f32; 3]) {
    loop {
        let a = random_color(rng);
        let b = random_color(rng);
        let la: f32 = (0..3).map(|c| LUMA[c] * a[c]).sum();
        let lb: f32 = (0..3).map(|c| LUMA[c] * b[c]).sum();
        if (la - lb).abs() >= 0.6 {
            return (a, b);
        }
    }
}

fn blend(a: [f32; 3], b: [f32; 3], t: f32, c: usize) -> f32 {
    a[c] + (b[c] - a[c]) * t
}

fn add_noise(img: &mut ImageTensor, amp: f32, rng: &mut ChaCha8Rng) {
    for v in img.data_mut() {
        *v = (*v + rng.random_range(-amp..amp)).clamp(-1.0, 1.0);
    }
}

fn stripes(size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let horizontal = rng.random_bool(0.5);
    let period = rng.random_range(5.0f32..12.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (a, b) = contrasting_pair(rng);
    ImageTensor::from_fn(size, size, 3, |y, x, c| {
        let u = if horizontal { y } else { x } as f32;
        let t = 0.5 + 0.5 * (2.0 * PI * u / period + phase).sin();
        blend(a, b, t, c)
    })
}

fn checker(size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let cell = rng.random_range(4..=10);
    let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
    let (a, b) = contrasting_pair(rng);
    ImageTensor::from_fn(size, size, 3, |y, x, c| {
        let t = (((y + oy) / cell + (x + ox) / cell) % 2) as f32;
        blend(a, b, t, c)
    })
}

fn dots(size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let spacing = rng.random_range(8.0f32..14.0);
    let radius = spacing * rng.random_range(0.2..0.35);
    let (oy, ox) = (rng.random_range(0.0..spacing), rng.random_range(0.0..spacing));
    let (bg, fg) = contrasting_pair(rng);
    ImageTensor::from_fn(size, size, 3, |y, x, c| {
        let dy = (y as f32 + oy).rem_euclid(spacing) - spacing / 2.0;
        let dx = (x as f32 + ox).rem_euclid(spacing) - spacing / 2.0;
        let t = (radius + 0.5 - (dy * dy + dx * dx).sqrt()).clamp(0.0, 1.0);
        blend(bg, fg, t, c)
    })
}

/// Two-octave gradient noise.
fn perlin(size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let cell = rng.random_range(8.0f32..16.0);
    let octaves = [(cell, 1.0f32), (cell / 2.0, 0.5)];
    let grids: Vec<(f32, f32, usize, Vec<(f32, f32)>)> = octaves
        .iter()
        .map(|&(cs, amp)| {
            let g = (size as f32 / cs).ceil() as usize + 2;
            let grads = (0..g * g)
                .map(|_| {
                    let th: f32 = rng.random_range(0.0..2.0 * PI);
                    (th.cos(), th.sin())
                })
                .collect();
            (cs, amp, g, grads)
        })
        .collect();
    let fade = |t: f32| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (a, b) = contrasting_pair(rng);
    let mut field = vec![0.0f32; size * size];
    for (cs, amp, g, grads) in &grids {
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f32 / cs, x as f32 / cs);
                let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (fy - iy as f32, fx - ix as f32);
                let dot = |gy: usize, gx: usize| {
                    let (gxv, gyv) = grads[gy * g + gx];
                    gxv * (fx - gx as f32) + gyv * (fy - gy as f32)
                };
                let n00 = dot(iy, ix);
                let n01 = dot(iy, ix + 1);
                let n10 = dot(iy + 1, ix);
                let n11 = dot(iy + 1, ix + 1);
                let (u, v) = (fade(tx), fade(ty));
                let top = n00 + u * (n01 - n00);
                let bot = n10 + u * (n11 - n10);
                field[y * size + x] += amp * (top + v * (bot - top));
            }
        }
    }
    ImageTensor::from_fn(size, size, 3, |y, x, c| {
        let t = (0.5 + field[y * size + x]).clamp(0.0, 1.0);
        blend(a, b, t, c)
    })
}

fn texture(name: &str, size: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let mut img = match name {
        "stripes" => stripes(size, rng),
        "checker" => checker(size, rng),
        "dots" => dots(size, rng),
        "perlin-noise" => perlin(size, rng),
        other => {
            return Err(Error::arg(format!(
                "unknown texture generator `{other}` (known: {})",
                TEXTURE_GENERATORS.join(", ")
            )))
        }
    };
    add_noise(&mut img, 0.03, rng);
    Ok(img)
}

/// Labelled synthetic textures, `n_per_class` per generator, class order
/// following `classes`.
pub fn procedural_texture_corpus(
    classes: &[&str],
    n_per_class: usize,
    size: usize,
    seed: u64,
) -> Result<StyleCorpus> {
    if classes.is_empty() || n_per_class == 0 || size == 0 {
        return Err(Error::arg("texture corpus needs classes, n_per_class >= 1 and size >= 1"));
    }
    if let Some(bad) = classes.iter().find(|c| !TEXTURE_GENERATORS.contains(c)) {
        return Err(Error::arg(format!(
            "unknown texture generator `{bad}` (known: {})",
            TEXTURE_GENERATORS.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut images = Vec::with_capacity(classes.len() * n_per_class);
    let mut labels = Vec::with_capacity(classes.len() * n_per_class);
    for _ in 0..n_per_class {
        for (label, name) in classes.iter().enumerate() {
            images.push(texture(name, size, &mut rng)?);
            labels.push(label);
        }
    }
    StyleCorpus::new(images, labels, classes.iter().map(|s| s.to_string()).collect())
}

/// Content fixtures: a smooth background with a few random rectangles and
/// discs.
pub fn procedural_content_images(n: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(8);
    (0..n)
        .map(|_| {
            let (c0, c1) = contrasting_pair(&mut rng);
            let angle: f32 = rng.random_range(0.0..2.0 * PI);
            let (ca, sa) = (angle.cos(), angle.sin());
            let mut img = ImageTensor::from_fn(size, size, 3, |y, x, c| {
                let u = (x as f32 * ca + y as f32 * sa) / (size as f32 * 1.5) + 0.5;
                blend(c0, c1, u.clamp(0.0, 1.0), c)
            });
            let shapes = rng.random_range(2..=4);
            for _ in 0..shapes {
                let color = random_color(&mut rng);
                let s = size as f32;
                let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
                let r = rng.random_range(0.1 * s..0.3 * s);
                let disc = rng.random_bool(0.5);
                for y in 0..size {
                    for x in 0..size {
                        let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                        let inside = if disc {
                            dy * dy + dx * dx <= r * r
                        } else {
                            dy.abs() <= r && dx.abs() <= r * 0.7
                        };
                        if inside {
                            for (c, &v) in color.iter().enumerate() {
                                img.set(y, x, c, v);
                            }
                        }
                    }
                }
            }
            img
        })
        .collect()
}

/// Empirical class frequencies of a label list.
pub fn label_frequencies(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    (0..num_classes)
        .map(|k| *counts.get(&k).unwrap_or(&0) as f64 / labels.len().max(1) as f64)
        .collect()
}
