//! Stochastic augmentation pipelines producing anchor, positive and
//! negative views.
//!
//! Each stage draws from its own ChaCha stream keyed by the stage kind and
//! its occurrence count, so inserting or removing one stage leaves the
//! draws of every other stage untouched.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("stage {stage}: {msg}")]
    InvalidStage { stage: &'static str, msg: String },
    #[error("patchify: image {h}x{w} cannot be tiled by {q}x{q} patches with stride {stride}")]
    Tiling { h: usize, w: usize, q: usize, stride: usize },
    #[error("expected an image of shape (d, h, w), got {0:?}")]
    Shape(Vec<usize>),
    #[error("source shapes differ: {0:?} vs {1:?}")]
    SourceMismatch(Vec<usize>, Vec<usize>),
    #[error("sample_triplet needs at least one negative source")]
    NoNegatives,
    #[error("pipeline syntax: {0}")]
    Parse(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchifyConfig {
    pub q: usize,
    pub overlap: usize,
}

impl PatchifyConfig {
    pub fn new(q: usize, overlap: usize) -> Result<Self> {
        if q == 0 || overlap >= q {
            return Err(AugmentError::InvalidStage {
                stage: "patchify",
                msg: format!("need 0 <= overlap < q, got q={q} overlap={overlap}"),
            });
        }
        Ok(PatchifyConfig { q, overlap })
    }

    pub fn stride(&self) -> usize {
        self.q - self.overlap
    }

    /// Patch grid `(rows, cols)` for an `h x w` image.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.stride();
        let err = || AugmentError::Tiling { h, w, q: self.q, stride: s };
        if self.q > h.min(w) || (h - self.q) % s != 0 || (w - self.q) % s != 0 {
            return Err(err());
        }
        Ok(((h - self.q) / s + 1, (w - self.q) / s + 1))
    }

    pub fn patch_count(&self, h: usize, w: usize) -> Result<usize> {
        self.grid(h, w).map(|(r, c)| r * c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    /// Horizontal mirror with probability `p`.
    RandomFlip { p: f64 },
    /// With probability `p`, translate by integer offsets drawn uniformly
    /// from `[-max_shift, max_shift]` on each axis, reflecting at borders.
    ImageJitter { p: f64, max_shift: usize },
    /// With probability `p`, per channel `x * a + b` with
    /// `a ~ U[1 - strength, 1 + strength]`, `b ~ U[-strength, strength]`.
    ColorJitter { p: f64, strength: f64 },
    /// With probability `p`, replace every channel by the luminance.
    RandomGrayscale { p: f64 },
    /// Per-channel standardization to mean 0 and standard deviation 1.
    /// Constant channels are only centered.
    ZNormalize,
    /// Cut into a row-major list of overlapping `q x q` patches.
    Patchify(PatchifyConfig),
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::RandomFlip { .. } => "random_flip",
            Stage::ImageJitter { .. } => "image_jitter",
            Stage::ColorJitter { .. } => "color_jitter",
            Stage::RandomGrayscale { .. } => "random_grayscale",
            Stage::ZNormalize => "z_normalize",
            Stage::Patchify(_) => "patchify",
        }
    }

    fn kind_tag(&self) -> u64 {
        match self {
            Stage::RandomFlip { .. } => 1,
            Stage::ImageJitter { .. } => 2,
            Stage::ColorJitter { .. } => 3,
            Stage::RandomGrayscale { .. } => 4,
            Stage::ZNormalize => 5,
            Stage::Patchify(_) => 6,
        }
    }

    fn validate(&self) -> Result<()> {
        let prob = |p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(AugmentError::InvalidStage {
                    stage: self.name(),
                    msg: format!("probability {p} outside [0, 1]"),
                })
            }
        };
        match *self {
            Stage::RandomFlip { p } | Stage::RandomGrayscale { p } | Stage::ImageJitter { p, .. } => prob(p),
            Stage::ColorJitter { p, strength } => {
                prob(p)?;
                if strength.is_finite() && strength >= 0.0 {
                    Ok(())
                } else {
                    Err(AugmentError::InvalidStage {
                        stage: self.name(),
                        msg: format!("strength {strength} must be >= 0"),
                    })
                }
            }
            Stage::ZNormalize => Ok(()),
            Stage::Patchify(cfg) => PatchifyConfig::new(cfg.q, cfg.overlap).map(|_| ()),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::RandomFlip { p } | Stage::RandomGrayscale { p } => write!(f, "{}(p={p})", self.name()),
            Stage::ImageJitter { p, max_shift } => write!(f, "image_jitter(p={p}, max_shift={max_shift})"),
            Stage::ColorJitter { p, strength } => write!(f, "color_jitter(p={p}, strength={strength})"),
            Stage::ZNormalize => f.write_str("z_normalize"),
            Stage::Patchify(c) => write!(f, "patchify(q={}, overlap={})", c.q, c.overlap),
        }
    }
}

/// Ordered augmentation stages; `patchify`, when present, comes last.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pipeline {
    stages: Vec<Stage>,
}

impl Pipeline {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        for (i, s) in stages.iter().enumerate() {
            s.validate()?;
            if matches!(s, Stage::Patchify(_)) && i + 1 != stages.len() {
                return Err(AugmentError::InvalidStage {
                    stage: "patchify",
                    msg: "must be the final stage".into(),
                });
            }
        }
        Ok(Pipeline { stages })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn patchify(&self) -> Option<PatchifyConfig> {
        match self.stages.last() {
            Some(Stage::Patchify(c)) => Some(*c),
            _ => None,
        }
    }

    /// The five-stage AMDIM pipeline at desk-scale magnitudes.
    pub fn amdim() -> Self {
        Pipeline {
            stages: vec![
                Stage::RandomFlip { p: 0.5 },
                Stage::ImageJitter { p: 1.0, max_shift: 3 },
                Stage::ColorJitter { p: 0.8, strength: 0.4 },
                Stage::RandomGrayscale { p: 0.25 },
                Stage::ZNormalize,
            ],
        }
    }

    /// AMDIM's stages followed by patchify.
    pub fn cpc(patches: PatchifyConfig) -> Self {
        let mut p = Self::amdim();
        p.stages.push(Stage::Patchify(patches));
        p
    }

    /// Union of the AMDIM and CPC pipelines (identical to [`Pipeline::cpc`]).
    pub fn yadim(patches: PatchifyConfig) -> Self {
        Self::cpc(patches)
    }

    /// Flip, color jitter and grayscale, then normalization. Random resized
    /// crop and Gaussian blur are not implemented.
    pub fn simclr() -> Self {
        Pipeline {
            stages: vec![
                Stage::RandomFlip { p: 0.5 },
                Stage::ColorJitter { p: 0.8, strength: 0.4 },
                Stage::RandomGrayscale { p: 0.2 },
                Stage::ZNormalize,
            ],
        }
    }

    /// The stages that involve no randomness (normalization, patchify),
    /// used to prepare images for evaluation.
    pub fn deterministic(&self) -> Pipeline {
        Pipeline {
            stages: self
                .stages
                .iter()
                .filter(|s| matches!(s, Stage::ZNormalize | Stage::Patchify(_)))
                .cloned()
                .collect(),
        }
    }

    /// Parses `stage(key=value, ...), stage, ...`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut stages = Vec::new();
        let mut rest = text.trim();
        while !rest.is_empty() {
            let name_end = rest.find(|c: char| c == '(' || c == ',').unwrap_or(rest.len());
            let name = rest[..name_end].trim();
            rest = &rest[name_end..];
            let mut args: Vec<(String, String)> = Vec::new();
            if let Some(r) = rest.strip_prefix('(') {
                let close = r
                    .find(')')
                    .ok_or_else(|| AugmentError::Parse(format!("unclosed '(' after {name}")))?;
                for kv in r[..close].split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| AugmentError::Parse(format!("expected key=value, got '{kv}'")))?;
                    args.push((k.trim().to_string(), v.trim().to_string()));
                }
                rest = &r[close + 1..];
            }
            rest = rest.trim_start();
            if let Some(r) = rest.strip_prefix(',') {
                rest = r.trim_start();
            } else if !rest.is_empty() {
                return Err(AugmentError::Parse(format!("expected ',' before '{rest}'")));
            }
            stages.push(parse_stage(name, &args)?);
        }
        Pipeline::new(stages)
    }

    /// Applies every stage in order. Output is `(d, h, w)`, or
    /// `(p, d, q, q)` when the pipeline ends with patchify.
    pub fn apply<T: Element>(&self, image: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
        let (d, h, w) = match image.shape() {
            &[d, h, w] => (d, h, w),
            s => return Err(AugmentError::Shape(s.to_vec())),
        };
        let mut img = Image { d, h, w, px: image.to_f64_vec() };
        let mut seen = [0u64; 8];
        for stage in &self.stages {
            let tag = stage.kind_tag();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((tag << 32) | seen[tag as usize]);
            seen[tag as usize] += 1;
            match *stage {
                Stage::RandomFlip { p } => {
                    if rng.gen_bool(p) {
                        img.flip();
                    }
                }
                Stage::ImageJitter { p, max_shift } => {
                    let hit = rng.gen_bool(p);
                    let m = max_shift as i64;
                    let dy = rng.gen_range(-m..=m);
                    let dx = rng.gen_range(-m..=m);
                    if hit && (dy != 0 || dx != 0) {
                        img.translate(dy, dx);
                    }
                }
                Stage::ColorJitter { p, strength } => {
                    let hit = rng.gen_bool(p);
                    let params: Vec<(f64, f64)> = (0..d)
                        .map(|_| {
                            let a = 1.0 + strength * rng.gen_range(-1.0..=1.0);
                            let b = strength * rng.gen_range(-1.0..=1.0);
                            (a, b)
                        })
                        .collect();
                    if hit {
                        img.color_affine(&params);
                    }
                }
                Stage::RandomGrayscale { p } => {
                    if rng.gen_bool(p) {
                        img.grayscale();
                    }
                }
                Stage::ZNormalize => img.z_normalize(),
                Stage::Patchify(cfg) => {
                    let (rows, cols) = cfg.grid(h, w)?;
                    let data = img.patches(cfg, rows, cols);
                    return Ok(Tensor::from_vec(
                        data.into_iter().map(T::lit).collect(),
                        &[rows * cols, d, cfg.q, cfg.q],
                    )?);
                }
            }
        }
        Ok(Tensor::from_vec(img.px.into_iter().map(T::lit).collect(), &[d, h, w])?)
    }

    /// Two independent draws on `x` (anchor, positive) and one draw per
    /// negative source.
    pub fn sample_triplet<T: Element>(
        &self,
        x: &Tensor<T>,
        negatives_source: &[Tensor<T>],
        seed: u64,
    ) -> Result<ViewTriplet<T>> {
        if negatives_source.is_empty() {
            return Err(AugmentError::NoNegatives);
        }
        if let Some(bad) = negatives_source.iter().find(|n| n.shape() != x.shape()) {
            return Err(AugmentError::SourceMismatch(x.shape().to_vec(), bad.shape().to_vec()));
        }
        let anchor_view = self.apply(x, derive_seed(seed, 0))?;
        let positive_view = self.apply(x, derive_seed(seed, 1))?;
        let negative_views = negatives_source
            .iter()
            .enumerate()
            .map(|(i, n)| self.apply(n, derive_seed(seed, 2 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ViewTriplet { anchor_view, positive_view, negative_views })
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

fn parse_stage(name: &str, args: &[(String, String)]) -> Result<Stage> {
    let get = |key: &str| -> Result<Option<f64>> {
        args.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| {
                v.parse::<f64>()
                    .map_err(|_| AugmentError::Parse(format!("{name}: '{v}' is not a number")))
            })
            .transpose()
    };
    let known: &[&str] = match name {
        "random_flip" | "random_grayscale" => &["p"],
        "image_jitter" => &["p", "max_shift"],
        "color_jitter" => &["p", "strength"],
        "z_normalize" => &[],
        "patchify" => &["q", "overlap"],
        other => return Err(AugmentError::Parse(format!("unknown stage '{other}'"))),
    };
    if let Some((k, _)) = args.iter().find(|(k, _)| !known.contains(&k.as_str())) {
        return Err(AugmentError::Parse(format!("{name}: unknown parameter '{k}'")));
    }
    let need = |key: &str| get(key)?.ok_or_else(|| AugmentError::Parse(format!("{name}: missing '{key}'")));
    let count = |key: &str| -> Result<usize> {
        let v = need(key)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(AugmentError::Parse(format!("{name}: '{key}' must be a non-negative integer")));
        }
        Ok(v as usize)
    };
    Ok(match name {
        "random_flip" => Stage::RandomFlip { p: need("p")? },
        "random_grayscale" => Stage::RandomGrayscale { p: need("p")? },
        "image_jitter" => Stage::ImageJitter { p: need("p")?, max_shift: count("max_shift")? },
        "color_jitter" => Stage::ColorJitter { p: need("p")?, strength: need("strength")? },
        "z_normalize" => Stage::ZNormalize,
        _ => Stage::Patchify(PatchifyConfig::new(count("q")?, count("overlap")?)?),
    })
}

/// SplitMix64 finalizer over `(seed, tag)`; used to give every view and
/// every image its own independent stream.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct ViewTriplet<T: Element> {
    pub anchor_view: Tensor<T>,
    pub positive_view: Tensor<T>,
    pub negative_views: Vec<Tensor<T>>,
}

struct Image {
    d: usize,
    h: usize,
    w: usize,
    px: Vec<f64>,
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

impl Image {
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.px[(c * self.h + y) * self.w + x]
    }

    fn flip(&mut self) {
        for row in self.px.chunks_mut(self.w) {
            row.reverse();
        }
    }

    fn translate(&mut self, dy: i64, dx: i64) {
        let mut out = vec![0.0; self.px.len()];
        for c in 0..self.d {
            for y in 0..self.h {
                let sy = reflect(y as i64 + dy, self.h);
                for x in 0..self.w {
                    out[(c * self.h + y) * self.w + x] = self.at(c, sy, reflect(x as i64 + dx, self.w));
                }
            }
        }
        self.px = out;
    }

    fn color_affine(&mut self, params: &[(f64, f64)]) {
        let plane = self.h * self.w;
        for (ch, &(a, b)) in self.px.chunks_mut(plane).zip(params) {
            ch.iter_mut().for_each(|v| *v = *v * a + b);
        }
    }

    fn grayscale(&mut self) {
        let plane = self.h * self.w;
        let weights: Vec<f64> = if self.d == 3 {
            vec![0.299, 0.587, 0.114]
        } else {
            vec![1.0 / self.d as f64; self.d]
        };
        let lum: Vec<f64> = (0..plane)
            .map(|i| (0..self.d).map(|c| weights[c] * self.px[c * plane + i]).sum())
            .collect();
        for ch in self.px.chunks_mut(plane) {
            ch.copy_from_slice(&lum);
        }
    }

    fn z_normalize(&mut self) {
        let plane = self.h * self.w;
        for ch in self.px.chunks_mut(plane) {
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            let inv = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
            ch.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
    }

    fn patches(&self, cfg: PatchifyConfig, rows: usize, cols: usize) -> Vec<f64> {
        let (q, s) = (cfg.q, cfg.stride());
        let mut out = Vec::with_capacity(rows * cols * self.d * q * q);
        for r in 0..rows {
            for col in 0..cols {
                for c in 0..self.d {
                    for y in 0..q {
                        let base = (c * self.h + r * s + y) * self.w + col * s;
                        out.extend_from_slice(&self.px[base..base + q]);
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn image(d: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec((0..d * h * w).map(|_| rng.gen_range(-2.0..5.0)).collect(), &[d, h, w]).unwrap()
    }

    fn channel_stats(t: &Tensor<f64>, c: usize) -> (f64, f64) {
        let plane = t.shape()[1] * t.shape()[2];
        let ch = &t.data()[c * plane..(c + 1) * plane];
        let mean = ch.iter().sum::<f64>() / plane as f64;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
        (mean, var.sqrt())
    }

    #[test]
    fn z_normalize_only() {
        let p = Pipeline::new(vec![Stage::ZNormalize]).unwrap();
        let out = p.apply(&image(3, 9, 7, 1), 42).unwrap();
        for c in 0..3 {
            let (m, s) = channel_stats(&out, c);
            assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6, "{m} {s}");
        }
    }

    #[test]
    fn degenerate_patchify_is_identity() {
        let x = image(3, 8, 8, 2);
        let p = Pipeline::new(vec![Stage::Patchify(PatchifyConfig::new(8, 0).unwrap())]).unwrap();
        let out = p.apply(&x, 0).unwrap();
        assert_eq!(out.shape(), &[1, 3, 8, 8]);
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn cpc_scale_patch_grid() {
        let cfg = PatchifyConfig::new(64, 32).unwrap();
        assert_eq!(cfg.grid(256, 256).unwrap(), (7, 7));
        let p = Pipeline::new(vec![Stage::Patchify(cfg)]).unwrap();
        let out = p.apply(&Tensor::<f32>::zeros(&[3, 256, 256]), 0).unwrap();
        assert_eq!(out.shape(), &[49, 3, 64, 64]);
    }

    #[test]
    fn patches_are_row_major_crops() {
        let x = image(2, 6, 6, 3);
        let cfg = PatchifyConfig::new(4, 2).unwrap();
        let out = Pipeline::new(vec![Stage::Patchify(cfg)]).unwrap().apply(&x, 0).unwrap();
        assert_eq!(out.shape(), &[4, 2, 4, 4]);
        // patch 1 = row 0, col 1: offset (0, 2); check channel 1, pixel (3, 1)
        let got = out.data()[((1 * 2 + 1) * 4 + 3) * 4 + 1];
        let want = x.data()[(1 * 6 + 3) * 6 + 2 + 1];
        assert_eq!(got, want);
    }

    #[test]
    fn tiling_violation_reports_extents_and_stride() {
        let p = Pipeline::new(vec![Stage::Patchify(PatchifyConfig::new(5, 2).unwrap())]).unwrap();
        let err = p.apply(&image(1, 9, 9, 0), 0).unwrap_err().to_string();
        assert!(err.contains("9x9") && err.contains("stride 3"), "{err}");
    }

    #[test]
    fn patchify_must_be_last() {
        let r = Pipeline::new(vec![Stage::Patchify(PatchifyConfig::new(4, 0).unwrap()), Stage::ZNormalize]);
        assert!(r.is_err());
        assert!(PatchifyConfig::new(4, 4).is_err());
    }

    #[test]
    fn invalid_probabilities_rejected() {
        assert!(Pipeline::new(vec![Stage::RandomFlip { p: 1.5 }]).is_err());
        assert!(Pipeline::new(vec![Stage::ColorJitter { p: 0.5, strength: -0.1 }]).is_err());
    }

    #[test]
    fn zero_probability_pipeline_is_deterministic_across_views() {
        let p = Pipeline::new(vec![
            Stage::RandomFlip { p: 0.0 },
            Stage::ImageJitter { p: 0.0, max_shift: 4 },
            Stage::ColorJitter { p: 0.0, strength: 0.5 },
            Stage::RandomGrayscale { p: 0.0 },
            Stage::ZNormalize,
        ])
        .unwrap();
        let x = image(3, 8, 8, 5);
        let t = p.sample_triplet(&x, &[image(3, 8, 8, 6)], 11).unwrap();
        assert_eq!(t.anchor_view.data(), t.positive_view.data());
        // identity up to z-normalization
        let z = Pipeline::new(vec![Stage::ZNormalize]).unwrap().apply(&x, 0).unwrap();
        assert_eq!(t.anchor_view.data(), z.data());
    }

    #[test]
    fn triplet_is_reproducible() {
        let p = Pipeline::amdim();
        let x = image(3, 8, 8, 7);
        let negs = vec![image(3, 8, 8, 8), image(3, 8, 8, 9)];
        let a = p.sample_triplet(&x, &negs, 99).unwrap();
        let b = p.sample_triplet(&x, &negs, 99).unwrap();
        assert_eq!(a.anchor_view.data(), b.anchor_view.data());
        assert_eq!(a.positive_view.data(), b.positive_view.data());
        for (u, v) in a.negative_views.iter().zip(&b.negative_views) {
            assert_eq!(u.data(), v.data());
        }
        assert_ne!(a.anchor_view.data(), a.positive_view.data());
    }

    #[test]
    fn triplet_errors() {
        let p = Pipeline::amdim();
        let x = image(3, 8, 8, 7);
        assert!(matches!(p.sample_triplet(&x, &[], 0), Err(AugmentError::NoNegatives)));
        assert!(p.sample_triplet(&x, &[image(3, 9, 8, 0)], 0).is_err());
    }

    #[test]
    fn yadim_union_views_on_64px() {
        let p = Pipeline::yadim(PatchifyConfig::new(16, 8).unwrap());
        assert_eq!(p.stages().len(), 6);
        let t = p.sample_triplet(&image(3, 64, 64, 1), &[image(3, 64, 64, 2)], 3).unwrap();
        assert_eq!(t.anchor_view.shape(), &[49, 3, 16, 16]);
        assert_eq!(t.negative_views[0].shape(), &[49, 3, 16, 16]);
    }

    #[test]
    fn inserting_a_stage_keeps_other_streams() {
        let x = image(3, 8, 8, 4);
        let a = Pipeline::new(vec![Stage::ImageJitter { p: 1.0, max_shift: 2 }]).unwrap();
        let b = Pipeline::new(vec![
            Stage::RandomGrayscale { p: 0.0 },
            Stage::ImageJitter { p: 1.0, max_shift: 2 },
        ])
        .unwrap();
        assert_eq!(a.apply(&x, 5).unwrap().data(), b.apply(&x, 5).unwrap().data());
    }

    #[test]
    fn flip_and_reflect() {
        let x = Tensor::<f64>::from_f64(&[1., 2., 3.], &[1, 1, 3]).unwrap();
        let p = Pipeline::new(vec![Stage::RandomFlip { p: 1.0 }]).unwrap();
        assert_eq!(p.apply(&x, 0).unwrap().data(), &[3., 2., 1.]);
        assert_eq!(reflect(-1, 3), 1);
        assert_eq!(reflect(3, 3), 1);
        assert_eq!(reflect(-5, 3), 1);
    }

    #[test]
    fn parse_round_trips_display() {
        let p = Pipeline::yadim(PatchifyConfig::new(8, 4).unwrap());
        let text = p.to_string();
        assert_eq!(
            text,
            "random_flip(p=0.5), image_jitter(p=1, max_shift=3), color_jitter(p=0.8, strength=0.4), \
             random_grayscale(p=0.25), z_normalize, patchify(q=8, overlap=4)"
        );
        assert_eq!(Pipeline::parse(&text).unwrap(), p);
        assert!(Pipeline::parse("blur(p=1)").is_err());
        assert!(Pipeline::parse("random_flip(q=1)").is_err());
        assert!(Pipeline::parse("patchify(q=4, overlap=1), z_normalize").is_err());
    }

    proptest! {
        #[test]
        fn patch_count_formula(
            q in 1usize..12, overlap_frac in 0.0f64..1.0, rows in 1usize..6, cols in 1usize..6, d in 1usize..3
        ) {
            let overlap = ((q as f64) * overlap_frac) as usize % q;
            let s = q - overlap;
            let (h, w) = ((rows - 1) * s + q, (cols - 1) * s + q);
            let cfg = PatchifyConfig::new(q, overlap).unwrap();
            let p = Pipeline::new(vec![Stage::Patchify(cfg)]).unwrap();
            let out = p.apply(&Tensor::<f32>::zeros(&[d, h, w]), 0).unwrap();
            prop_assert_eq!(out.shape()[0], ((h - q) / s + 1) * ((w - q) / s + 1));
            prop_assert_eq!(out.shape(), &[rows * cols, d, q, q]);
        }

        #[test]
        fn apply_is_deterministic(seed in any::<u64>()) {
            let p = Pipeline::amdim();
            let x = image(3, 6, 6, 1);
            prop_assert_eq!(p.apply(&x, seed).unwrap().to_vec(), p.apply(&x, seed).unwrap().to_vec());
        }
    }
}
