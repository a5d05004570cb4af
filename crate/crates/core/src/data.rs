//! Datasets: the synthetic class-structured image generator, seeded splits
//! and a loader for folders of small PPM/PGM images.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::augment::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("dataset '{0}' has no labels")]
    NoLabels(String),
    #[error("{path}: {msg}")]
    Image { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Images stored as `f64` in `(d, h, w)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub shape: [usize; 3],
    images: Vec<Vec<f64>>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, shape: [usize; 3], images: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let name = name.into();
        if images.len() < 2 {
            return Err(DataError::Invalid(format!("need at least 2 images, got {}", images.len())));
        }
        let numel = shape.iter().product::<usize>();
        if numel == 0 || images.iter().any(|im| im.len() != numel) {
            return Err(DataError::Invalid(format!("every image must have shape {shape:?}")));
        }
        if labels.as_ref().is_some_and(|l| l.len() != images.len()) {
            return Err(DataError::Invalid("one label per image required".into()));
        }
        Ok(Dataset { name, seed: 0, shape, images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor<f64> {
        Tensor::from_vec(self.images[i].clone(), &self.shape).expect("shape checked at construction")
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or_else(|| DataError::NoLabels(self.name.clone()))
    }

    pub fn class_count(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// The same images with labels replaced.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(self.name.clone(), self.shape, self.images.clone(), Some(labels)).map(|mut d| {
            d.seed = self.seed;
            d
        })
    }

    /// The images alone. Pretraining only ever sees this view.
    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView { images: &self.images, shape: self.shape }
    }

    /// Every pixel as raw bytes, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for im in &self.images {
            for v in im {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for l in self.labels.iter().flatten() {
            out.extend_from_slice(&(*l as u64).to_le_bytes());
        }
        out
    }
}

/// Label-free access to a dataset's images.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    images: &'a [Vec<f64>],
    pub shape: [usize; 3],
}

impl<'a> UnlabeledView<'a> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &'a [f64] {
        &self.images[i]
    }
}

/// Seeded 70/15/15 train/validation/test index split, stratified by label.
pub fn split_indices(labels: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5b1));
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (n * 70).div_ceil(100);
        let n_val = (n * 15) / 100;
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (train, val, test)
}

/// Class-structured synthetic images.
///
/// Each class owns an oriented sinusoidal grating (orientation
/// `pi * y / classes`, frequency 3 cycles per image). Nuisance `nu` perturbs
/// every image independently: orientation by `nu * U(-0.2, 0.2)`, frequency
/// by `nu * U(-1, 1)`, phase by `nu * U(-pi, pi)`, then adds pixel noise of
/// standard deviation `2 * nu` and a per-channel gain `1 + nu * U(-0.5, 0.5)`
/// and offset `nu * U(-1, 1)`. At `nu = 0` every image of a class is
/// identical.
pub fn make_synthetic(
    n: usize,
    classes: usize,
    d: usize,
    h: usize,
    w: usize,
    nuisance: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || d == 0 || h == 0 || w == 0 {
        return Err(DataError::Invalid("classes and image extents must be positive".into()));
    }
    if n < 2 * classes {
        return Err(DataError::Invalid(format!("need n >= 2 * classes, got n={n} classes={classes}")));
    }
    if !(nuisance >= 0.0 && nuisance.is_finite()) {
        return Err(DataError::Invalid(format!("nuisance must be a finite non-negative number, got {nuisance}")));
    }
    use std::f64::consts::{PI, TAU};
    let mut order: Vec<usize> = (0..n).map(|i| i % classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0)));
    let nu = nuisance;
    let mut images = Vec::with_capacity(n);
    for (i, &y) in order.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 + i as u64));
        let theta = PI * y as f64 / classes as f64 + nu * rng.gen_range(-0.2..0.2);
        let freq = 3.0 + nu * rng.gen_range(-1.0..1.0);
        let phase = nu * rng.gen_range(-PI..PI);
        let color: Vec<(f64, f64)> = (0..d)
            .map(|_| (1.0 + nu * rng.gen_range(-0.5..0.5), nu * rng.gen_range(-1.0..1.0)))
            .collect();
        let mut img = vec![0.0; d * h * w];
        for (ch, &(gain, offset)) in color.iter().enumerate() {
            for r in 0..h {
                for c in 0..w {
                    let (u, v) = (c as f64 / w as f64, r as f64 / h as f64);
                    let s = (TAU * freq * (u * theta.cos() + v * theta.sin()) + phase).sin();
                    let noise: f64 = rng.sample(StandardNormal);
                    img[(ch * h + r) * w + c] = gain * (s + 2.0 * nu * noise) + offset;
                }
            }
        }
        images.push(img);
    }
    let mut ds = Dataset::new(format!("synthetic-{classes}c-{n}"), [d, h, w], images, Some(order))?;
    ds.seed = seed;
    Ok(ds)
}

/// Loads every `.ppm`/`.pgm` (binary P6/P5, 8-bit) file in `dir`, sorted by
/// file name. Images must share one size. The label is the name of the
/// first-level subdirectory when `labeled_by_subdir` is set.
pub fn load_folder(dir: &Path, labeled_by_subdir: bool) -> Result<Dataset> {
    let mut files = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    if labeled_by_subdir {
        let mut subdirs: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.path())
            .collect();
        subdirs.sort();
        for (label, sub) in subdirs.iter().enumerate() {
            class_names.push(sub.file_name().unwrap_or_default().to_string_lossy().into_owned());
            for f in image_files(sub)? {
                files.push((f, Some(label)));
            }
        }
    } else {
        files = image_files(dir)?.into_iter().map(|f| (f, None)).collect();
    }
    let mut shape = None;
    let mut images = Vec::new();
    for (path, _) in &files {
        let (s, img) = read_pnm(path)?;
        if *shape.get_or_insert(s) != s {
            return Err(DataError::Image { path: path.display().to_string(), msg: format!("size {s:?} differs from {:?}", shape.unwrap()) });
        }
        images.push(img);
    }
    let shape = shape.ok_or_else(|| DataError::Invalid(format!("no .ppm/.pgm images in {}", dir.display())))?;
    let labels = labeled_by_subdir.then(|| files.iter().map(|(_, l)| l.unwrap_or(0)).collect());
    Dataset::new(dir.display().to_string(), shape, images, labels)
}

fn image_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    out.sort();
    Ok(out)
}

fn read_pnm(path: &Path) -> Result<([usize; 3], Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let err = |msg: &str| DataError::Image { path: path.display().to_string(), msg: msg.to_string() };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let d = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(err("only binary P5/P6 files are supported")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(err("only 8-bit images are supported"));
    }
    let raw = bytes.get(pos..pos + w * h * d).ok_or_else(|| err("truncated pixel data"))?;
    let mut img = vec![0.0; d * h * w];
    for (i, &b) in raw.iter().enumerate() {
        let (pix, ch) = (i / d, i % d);
        img[ch * h * w + pix] = b as f64 / max as f64;
    }
    Ok(([d, h, w], img))
}
