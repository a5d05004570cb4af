//! Representation extraction: turning feature maps into anchor, positive
//! and negative vectors.
//!
//! Every strategy emits a [`RepresentationBatch`]: a matrix of anchors, a
//! matrix of candidate targets, and rules that say which targets are
//! positives and which are negatives for each anchor.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::derive_seed;
use crate::encoder::FeatureMapSet;
use crate::nn::{Init, Linear, ParamId, ParamStore};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ExtractionError {
    #[error("comparison spec, position {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("layer index {index} is deeper than the encoder ({depth} maps)")]
    TooDeep { index: isize, depth: usize },
    #[error("no prediction targets")]
    NoTargets,
    #[error("anchor vectors have {anchor} channels but targets have {target}")]
    Channels { anchor: usize, target: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ExtractionError> = std::result::Result<T, E>;

/// Which targets count as positives for an anchor.
#[derive(Debug, Clone, PartialEq)]
pub enum Positives {
    /// Every target drawn from the anchor's source image.
    SameSource,
    /// Exactly one target per anchor, by index.
    Labels(Vec<usize>),
}

/// Which targets count as negatives for an anchor (positives and the
/// excluded target are never negatives).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Negatives {
    OtherSources,
    AllOthers,
}

/// Anchors `(A, c)` scored against targets `(T, c)`.
#[derive(Debug, Clone)]
pub struct RepresentationBatch<T: Element = f64> {
    pub anchors: Tensor<T>,
    pub targets: Tensor<T>,
    pub anchor_source: Vec<usize>,
    pub target_source: Vec<usize>,
    pub positives: Positives,
    pub negatives: Negatives,
    /// A target that plays no role at all for the anchor (self-similarity).
    pub exclude: Option<Vec<usize>>,
    /// `(j, k)` map pair this batch came from, when applicable.
    pub layers: Option<(isize, isize)>,
}

impl<T: Element> RepresentationBatch<T> {
    pub fn anchor_count(&self) -> usize {
        self.anchors.shape()[0]
    }

    pub fn target_count(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.anchors.shape()[1]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.positives {
            Positives::Labels(l) => Some(l),
            Positives::SameSource => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, t) = (self.anchors.shape(), self.targets.shape());
        if a.len() != 2 || t.len() != 2 {
            return Err(ExtractionError::Invalid(format!("anchors {a:?} and targets {t:?} must be matrices")));
        }
        if a[1] != t[1] {
            return Err(ExtractionError::Channels { anchor: a[1], target: t[1] });
        }
        if self.anchor_source.len() != a[0] || self.target_source.len() != t[0] {
            return Err(ExtractionError::Invalid("source ids do not match vector counts".into()));
        }
        if let Positives::Labels(l) = &self.positives {
            if l.len() != a[0] || l.iter().any(|&x| x >= t[0]) {
                return Err(ExtractionError::Invalid("labels out of range".into()));
            }
        }
        if let Some(e) = &self.exclude {
            if e.len() != a[0] {
                return Err(ExtractionError::Invalid("one excluded target per anchor expected".into()));
            }
        }
        Ok(())
    }

    fn excluded(&self, a: usize, t: usize) -> bool {
        self.exclude.as_ref().is_some_and(|e| e[a] == t)
    }

    pub fn is_positive(&self, a: usize, t: usize) -> bool {
        !self.excluded(a, t)
            && match &self.positives {
                Positives::SameSource => self.anchor_source[a] == self.target_source[t],
                Positives::Labels(l) => l[a] == t,
            }
    }

    pub fn is_negative(&self, a: usize, t: usize) -> bool {
        !self.excluded(a, t)
            && !self.is_positive(a, t)
            && match self.negatives {
                Negatives::OtherSources => self.anchor_source[a] != self.target_source[t],
                Negatives::AllOthers => true,
            }
    }

    pub fn positives_of(&self, a: usize) -> usize {
        (0..self.target_count()).filter(|&t| self.is_positive(a, t)).count()
    }

    pub fn negatives_of(&self, a: usize) -> usize {
        (0..self.target_count()).filter(|&t| self.is_negative(a, t)).count()
    }

    /// Paired views: row `i` of `z1` and row `i` of `z2` are the two views of
    /// image `i`. Anchors and targets are both `[z1; z2]`; each anchor's
    /// positive is its partner view and its own row is excluded.
    pub fn paired(z1: &Tensor<T>, z2: &Tensor<T>) -> Result<Self> {
        if z1.shape() != z2.shape() || z1.rank() != 2 {
            return Err(ExtractionError::Invalid(format!(
                "paired views need equal (n, c) shapes, got {:?} and {:?}",
                z1.shape(),
                z2.shape()
            )));
        }
        let n = z1.shape()[0];
        let out = Tensor::concat(&[z1, z2], 0)?;
        let source: Vec<usize> = (0..2 * n).map(|i| i % n).collect();
        let labels = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
        Ok(RepresentationBatch {
            anchors: out.clone(),
            targets: out,
            anchor_source: source.clone(),
            target_source: source,
            positives: Positives::Labels(labels),
            negatives: Negatives::AllOthers,
            exclude: Some((0..2 * n).collect()),
            layers: None,
        })
    }
}

/// `(B, c, h, w)` map to `(B*h*w, c)` cell vectors, row-major over
/// `(b, row, col)`, plus the image index of each cell.
pub fn cell_vectors<T: Element>(map: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = map.shape();
    if s.len() != 4 {
        return Err(ExtractionError::Invalid(format!("feature map must be (B, c, h, w), got {s:?}")));
    }
    let (b, c, cells) = (s[0], s[1], s[2] * s[3]);
    let v = map.permute(&[0, 2, 3, 1])?.reshape(&[b * cells, c])?;
    Ok((v, (0..b * cells).map(|i| i / cells).collect()))
}

// ---------------------------------------------------------------------------
// comparison specs

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Keyword {
    LastOnly,
    Amdim,
    SameLevel,
    LastRandom(Option<u64>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Item {
    Pair(isize, isize),
    Keyword(Keyword),
}

/// Which `(j, k)` layer pairs to compare: anchors from map `j` of one view,
/// targets from map `k` of the other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonSpec {
    items: Vec<Item>,
}

impl ComparisonSpec {
    pub fn pairs(pairs: &[(isize, isize)]) -> Self {
        ComparisonSpec { items: pairs.iter().map(|&(j, k)| Item::Pair(j, k)).collect() }
    }

    pub fn last_only() -> Self {
        ComparisonSpec { items: vec![Item::Keyword(Keyword::LastOnly)] }
    }

    pub fn amdim() -> Self {
        ComparisonSpec { items: vec![Item::Keyword(Keyword::Amdim)] }
    }

    pub fn same_level() -> Self {
        ComparisonSpec { items: vec![Item::Keyword(Keyword::SameLevel)] }
    }

    pub fn last_random(seed: u64) -> Self {
        ComparisonSpec { items: vec![Item::Keyword(Keyword::LastRandom(Some(seed)))] }
    }

    /// True when the pairs differ from step to step.
    pub fn is_random(&self) -> bool {
        self.items.iter().any(|i| matches!(i, Item::Keyword(Keyword::LastRandom(_))))
    }

    /// Concrete pairs for an encoder with `depth` maps. `last_random`
    /// draws `k` uniformly from `-1..=-depth`, freshly for each `step`.
    pub fn resolve(&self, depth: usize, step: u64) -> Result<Vec<(isize, isize)>> {
        let mut out = Vec::new();
        for item in &self.items {
            match *item {
                Item::Pair(j, k) => out.push((j, k)),
                Item::Keyword(Keyword::LastOnly) => out.push((-1, -1)),
                Item::Keyword(Keyword::Amdim) => out.extend([(-1, -2), (-1, -3), (-2, -2)]),
                Item::Keyword(Keyword::SameLevel) => out.extend([(-1, -1), (-2, -2), (-3, -3)]),
                Item::Keyword(Keyword::LastRandom(seed)) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed.unwrap_or(0), step));
                    let k = rng.gen_range(1..=depth.max(1)) as isize;
                    out.push((-1, -k));
                }
            }
        }
        for &(j, k) in &out {
            for i in [j, k] {
                if i >= 0 || i < -(depth as isize) {
                    return Err(ExtractionError::TooDeep { index: i, depth });
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Display for ComparisonSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, item) in self.items.iter().enumerate() {
            if n > 0 {
                f.write_str(",")?;
            }
            match item {
                Item::Pair(j, k) => write!(f, "{j}:{k}")?,
                Item::Keyword(Keyword::LastOnly) => f.write_str("last_only")?,
                Item::Keyword(Keyword::Amdim) => f.write_str("amdim")?,
                Item::Keyword(Keyword::SameLevel) => f.write_str("same_level")?,
                Item::Keyword(Keyword::LastRandom(None)) => f.write_str("last_random")?,
                Item::Keyword(Keyword::LastRandom(Some(s))) => write!(f, "last_random({s})")?,
            }
        }
        Ok(())
    }
}

/// Parses `item (',' item)*` where an item is `j:k` with negative layer
/// indices, or one of `last_only`, `amdim`, `same_level`, `last_random`,
/// `last_random(seed)`. Whitespace around items is ignored.
pub fn parse_comparison_spec(text: &str) -> Result<ComparisonSpec> {
    let mut items = Vec::new();
    let mut pos = 0;
    for raw in text.split(',') {
        let lead = raw.len() - raw.trim_start().len();
        let item = raw.trim();
        let at = pos + lead;
        pos += raw.len() + 1;
        let err = |off: usize, msg: String| ExtractionError::Parse { pos: at + off, msg };
        if item.is_empty() {
            return Err(err(0, "empty item".into()));
        }
        let kw = match item {
            "last_only" => Some(Keyword::LastOnly),
            "amdim" => Some(Keyword::Amdim),
            "same_level" => Some(Keyword::SameLevel),
            "last_random" => Some(Keyword::LastRandom(None)),
            _ => None,
        };
        if let Some(kw) = kw {
            items.push(Item::Keyword(kw));
            continue;
        }
        if let Some(rest) = item.strip_prefix("last_random(") {
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| err(item.len(), "expected ')'".into()))?;
            let seed = inner
                .trim()
                .parse::<u64>()
                .map_err(|_| err(12, format!("invalid seed '{inner}'")))?;
            items.push(Item::Keyword(Keyword::LastRandom(Some(seed))));
            continue;
        }
        let Some((j, k)) = item.split_once(':') else {
            return Err(err(0, format!("expected 'j:k' or a keyword, found '{item}'")));
        };
        let parse_index = |s: &str, off: usize| -> Result<isize> {
            let v = s
                .trim()
                .parse::<isize>()
                .map_err(|_| err(off, format!("invalid layer index '{}'", s.trim())))?;
            if v >= 0 {
                return Err(err(off, format!("layer index must be negative, got {v}")));
            }
            Ok(v)
        };
        items.push(Item::Pair(parse_index(j, 0)?, parse_index(k, j.len() + 1)?));
    }
    Ok(ComparisonSpec { items })
}

// ---------------------------------------------------------------------------
// AMDIM

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMode {
    /// Every cell of the anchor map is an anchor.
    AllCells,
    /// One seeded random cell per image.
    Sampled(u64),
}

/// One batch per `(j, k)` pair. Anchors are cells of `ma[j]`; targets are
/// all cells of `mb[k]` followed by all cells of each `neg_maps[i][k]`.
/// Positives for an anchor are the `mb[k]` cells of its own image;
/// negatives are the cells of every other image, in `mb` or `neg_maps`.
pub fn extract_amdim<T: Element>(
    ma: &FeatureMapSet<T>,
    mb: &FeatureMapSet<T>,
    neg_maps: &[&FeatureMapSet<T>],
    pairs: &[(isize, isize)],
    mode: AnchorMode,
) -> Result<Vec<RepresentationBatch<T>>> {
    let depth = ma.len().min(mb.len());
    let at = |m: &FeatureMapSet<T>, i: isize| -> Result<Tensor<T>> {
        m.get(i).cloned().ok_or(ExtractionError::TooDeep { index: i, depth: m.len() })
    };
    if ma.batch() != mb.batch() {
        return Err(ExtractionError::Invalid("anchor and positive views differ in batch size".into()));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for &(j, k) in pairs {
        if j >= 0 || k >= 0 || j < -(depth as isize) || k < -(depth as isize) {
            return Err(ExtractionError::TooDeep { index: j.min(k), depth });
        }
        let (mut anchors, mut anchor_source) = cell_vectors(&at(ma, j)?)?;
        if let AnchorMode::Sampled(seed) = mode {
            let m = at(ma, j)?;
            let cells = m.shape()[2] * m.shape()[3];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (j + 64) as u64));
            let pick: Vec<usize> = (0..ma.batch()).map(|b| b * cells + rng.gen_range(0..cells)).collect();
            anchors = anchors.index_select(0, &pick)?;
            anchor_source = pick.iter().map(|&i| anchor_source[i]).collect();
        }
        let (pos, mut target_source) = cell_vectors(&at(mb, k)?)?;
        let mut parts = vec![pos];
        let mut offset = mb.batch();
        for neg in neg_maps {
            let (v, src) = cell_vectors(&at(neg, k)?)?;
            parts.push(v);
            target_source.extend(src.iter().map(|s| s + offset));
            offset += neg.batch();
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let targets = if refs.len() == 1 { parts[0].clone() } else { Tensor::concat(&refs, 0)? };
        let batch = RepresentationBatch {
            anchors,
            targets,
            anchor_source,
            target_source,
            positives: Positives::SameSource,
            negatives: Negatives::OtherSources,
            exclude: None,
            layers: Some((j, k)),
        };
        batch.validate()?;
        out.push(batch);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CPC

/// Two stacked 3x3 convolutions whose kernel row below the centre is held
/// at zero, with a ReLU between them. Output row `i` sees input rows `<= i`.
#[derive(Debug)]
pub struct ContextEncoder<T: Element = f64> {
    pub params: ParamStore<T>,
    layers: [(ParamId, ParamId); 2],
    mask: Tensor<T>,
}

impl<T: Element> ContextEncoder<T> {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let c = channels;
        let mut layer = |i: usize| {
            let w = params.push(format!("context.{i}.weight"), init.fan_in_uniform(&[c, c, 3, 3], c * 6));
            let b = params.push(format!("context.{i}.bias"), Tensor::zeros(&[c]));
            (w, b)
        };
        let layers = [layer(0), layer(1)];
        let mask = Tensor::from_f64(&[1., 1., 1., 1., 1., 1., 0., 0., 0.], &[1, 1, 3, 3]).expect("3x3");
        ContextEncoder { params, layers, mask }
    }

    /// `(B, c, h, w)` to `(B, c, h, w)`.
    pub fn forward(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = h.clone();
        for (n, &(w, b)) in self.layers.iter().enumerate() {
            let w = self.params.get(w).mul(&self.mask)?;
            x = x.conv2d(&w, Some(self.params.get(b)), 1, 1)?;
            if n == 0 {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

/// One `c x c` matrix per prediction offset `k = 1..=max_offset`.
#[derive(Debug)]
pub struct PredictionMatrices<T: Element = f64> {
    pub params: ParamStore<T>,
    ids: Vec<ParamId>,
}

impl<T: Element> PredictionMatrices<T> {
    pub fn new(channels: usize, max_offset: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let ids = (1..=max_offset)
            .map(|k| params.push(format!("predict.{k}"), init.fan_in_uniform(&[channels, channels], channels)))
            .collect();
        PredictionMatrices { params, ids }
    }

    pub fn offsets(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.ids.len()
    }

    pub fn matrix(&self, k: usize) -> &Tensor<T> {
        self.params.get(self.ids[k - 1])
    }
}

/// Target index of the cell `k` rows below `(row, col)` of image `b` in the
/// `(b, row, col)`-flattened target matrix.
pub fn cpc_label(b: usize, row: usize, col: usize, k: usize, h: usize, w: usize) -> usize {
    b * h * w + (row + k) * w + col
}

/// Downward prediction over a `(B, c, h, w)` grid. For each offset `k < h`,
/// every cell `(row, col)` with `row + k < h` yields an anchor
/// `embed_scale * c_{row,col} W_k` whose positive is `H[row + k, col]` of
/// the same image; every other grid vector in the batch is a negative.
/// Anchors of all offsets are stacked in offset order.
pub fn extract_cpc<T: Element>(
    h: &Tensor<T>,
    ctx: &ContextEncoder<T>,
    w: &PredictionMatrices<T>,
    embed_scale: f64,
) -> Result<RepresentationBatch<T>> {
    let s = h.shape();
    if s.len() != 4 {
        return Err(ExtractionError::Invalid(format!("CPC grid must be (B, c, h, w), got {s:?}")));
    }
    let (b, c, gh, gw) = (s[0], s[1], s[2], s[3]);
    let (targets, target_source) = cell_vectors(h)?;
    let context = ctx.forward(h)?.permute(&[0, 2, 3, 1])?;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut anchor_source = Vec::new();
    for k in w.offsets().filter(|&k| k < gh) {
        let rows = gh - k;
        let ctx_k = context.narrow(1, 0, rows)?.reshape(&[b * rows * gw, c])?;
        preds.push(ctx_k.matmul(w.matrix(k))?.scale(T::lit(embed_scale))?);
        for bi in 0..b {
            for row in 0..rows {
                for col in 0..gw {
                    labels.push(cpc_label(bi, row, col, k, gh, gw));
                    anchor_source.push(bi);
                }
            }
        }
    }
    if preds.is_empty() {
        return Err(ExtractionError::NoTargets);
    }
    let refs: Vec<&Tensor<T>> = preds.iter().collect();
    let anchors = if refs.len() == 1 { preds[0].clone() } else { Tensor::concat(&refs, 0)? };
    let batch = RepresentationBatch {
        anchors,
        targets,
        anchor_source,
        target_source,
        positives: Positives::Labels(labels),
        negatives: Negatives::AllOthers,
        exclude: None,
        layers: None,
    };
    batch.validate()?;
    Ok(batch)
}

// ---------------------------------------------------------------------------
// SimCLR

/// `z = normalize(W2 relu(W1 h))`, or the identity map when built with
/// [`ProjectionHead::identity`].
#[derive(Debug)]
pub struct ProjectionHead<T: Element = f64> {
    pub params: ParamStore<T>,
    layers: Option<(Linear, Linear)>,
    pub normalize: bool,
}

impl<T: Element> ProjectionHead<T> {
    pub fn new(dim: usize, hidden: usize, normalize: bool, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let l1 = Linear::new(&mut params, "head.0", dim, hidden, &mut init);
        let l2 = Linear::new(&mut params, "head.1", hidden, dim, &mut init);
        ProjectionHead { params, layers: Some((l1, l2)), normalize }
    }

    pub fn identity(normalize: bool) -> Self {
        ProjectionHead { params: ParamStore::new(), layers: None, normalize }
    }

    /// `(n, dim)` to `(n, dim)`.
    pub fn forward(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let mut z = match &self.layers {
            Some((l1, l2)) => l2.forward(&self.params, &l1.forward(&self.params, h)?.relu()?)?,
            None => h.clone(),
        };
        if self.normalize {
            z = z.l2_normalize(1)?;
        }
        Ok(z)
    }
}

/// Flattens the deepest map of each view, projects it, and pairs image `i`
/// of view a with image `i` of view b; the other `2n - 2` vectors are
/// negatives.
pub fn extract_simclr<T: Element>(
    ma: &FeatureMapSet<T>,
    mb: &FeatureMapSet<T>,
    head: &ProjectionHead<T>,
) -> Result<RepresentationBatch<T>> {
    let flat = |m: &FeatureMapSet<T>| -> Result<Tensor<T>> {
        let d = m.deepest();
        let n = d.shape()[0];
        Ok(d.reshape(&[n, d.numel() / n.max(1)])?)
    };
    let z1 = head.forward(&flat(ma)?)?;
    let z2 = head.forward(&flat(mb)?)?;
    RepresentationBatch::paired(&z1, &z2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    fn maps(batch: usize, extents: &[usize], c: usize, seed: u64) -> FeatureMapSet<f64> {
        FeatureMapSet {
            maps: extents
                .iter()
                .enumerate()
                .map(|(i, &e)| random(&[batch, c, e, e], seed + i as u64))
                .collect(),
        }
    }

    #[test]
    fn keywords_expand() {
        let r = |s: &str| parse_comparison_spec(s).unwrap().resolve(3, 0).unwrap();
        assert_eq!(r("last_only"), vec![(-1, -1)]);
        assert_eq!(r("amdim"), vec![(-1, -2), (-1, -3), (-2, -2)]);
        assert_eq!(r("same_level"), vec![(-1, -1), (-2, -2), (-3, -3)]);
        assert_eq!(r("-1:-1,-2:-2"), vec![(-1, -1), (-2, -2)]);
        assert_eq!(r(" -1:-3 , last_only"), vec![(-1, -3), (-1, -1)]);
    }

    #[test]
    fn last_random_draws_within_depth() {
        let spec = parse_comparison_spec("last_random(7)").unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for step in 0..200 {
            let p = spec.resolve(4, step).unwrap();
            assert_eq!(p.len(), 1);
            assert_eq!(p[0].0, -1);
            seen.insert(p[0].1);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![-4, -3, -2, -1]);
        assert_eq!(spec.resolve(4, 3).unwrap(), spec.resolve(4, 3).unwrap());
    }

    #[test]
    fn parse_errors_carry_positions() {
        let pos = |s: &str| match parse_comparison_spec(s).unwrap_err() {
            ExtractionError::Parse { pos, .. } => pos,
            e => panic!("{e}"),
        };
        assert_eq!(pos("bogus"), 0);
        assert_eq!(pos("-1:-1,x:-2"), 6);
        assert_eq!(pos("-1:-1,-1:y"), 9);
        assert_eq!(pos("-1:-1,"), 6);
        assert_eq!(pos("1:-1"), 0);
    }

    #[test]
    fn display_round_trips() {
        for s in ["last_only", "amdim,-1:-2", "last_random(3)", "same_level", "last_random"] {
            let spec = parse_comparison_spec(s).unwrap();
            assert_eq!(parse_comparison_spec(&spec.to_string()).unwrap(), spec);
        }
    }

    #[test]
    fn too_deep_index_is_rejected() {
        let err = ComparisonSpec::amdim().resolve(2, 0).unwrap_err();
        assert!(matches!(err, ExtractionError::TooDeep { index: -3, depth: 2 }));
        let m = maps(1, &[4, 2], 3, 0);
        assert!(extract_amdim(&m, &m, &[], &[(-1, -3)], AnchorMode::AllCells).is_err());
    }

    #[test]
    fn amdim_counts_cells() {
        let (ma, mb) = (maps(1, &[4, 2], 3, 0), maps(1, &[4, 2], 3, 10));
        let (n1, n2) = (maps(1, &[4, 2], 3, 20), maps(1, &[4, 2], 3, 30));
        let out = extract_amdim(&ma, &mb, &[&n1, &n2], &[(-1, -2)], AnchorMode::AllCells).unwrap();
        assert_eq!(out.len(), 1);
        let b = &out[0];
        assert_eq!(b.anchor_count(), 4);
        for a in 0..4 {
            assert_eq!(b.positives_of(a), 16);
            assert_eq!(b.negatives_of(a), 32);
        }
    }

    #[test]
    fn amdim_in_batch_negatives() {
        let (ma, mb) = (maps(3, &[3, 1], 4, 0), maps(3, &[3, 1], 4, 5));
        let out = extract_amdim(&ma, &mb, &[], &ComparisonSpec::last_only().resolve(2, 0).unwrap(), AnchorMode::AllCells).unwrap();
        let b = &out[0];
        assert_eq!((b.anchor_count(), b.target_count()), (3, 3));
        assert!((0..3).all(|a| b.positives_of(a) == 1 && b.negatives_of(a) == 2));
        let sampled = extract_amdim(&ma, &mb, &[], &[(-2, -1)], AnchorMode::Sampled(1)).unwrap();
        assert_eq!(sampled[0].anchor_count(), 3);
        assert_eq!(sampled[0].anchor_source, vec![0, 1, 2]);
    }

    #[test]
    fn amdim_spec_gives_three_batches() {
        let m = maps(2, &[5, 3, 1], 4, 0);
        let out = extract_amdim(&m, &m, &[], &ComparisonSpec::amdim().resolve(3, 0).unwrap(), AnchorMode::AllCells).unwrap();
        assert_eq!(out.iter().map(|b| b.layers.unwrap()).collect::<Vec<_>>(), vec![(-1, -2), (-1, -3), (-2, -2)]);
    }

    #[test]
    fn cpc_labels_for_small_grid() {
        let h = random(&[1, 2, 3, 2], 1);
        let ctx = ContextEncoder::new(2, 0);
        let w = PredictionMatrices::new(2, 1, 0);
        let b = extract_cpc(&h, &ctx, &w, 0.1).unwrap();
        assert_eq!(b.labels().unwrap(), &[2, 3, 4, 5]);
        assert_eq!(b.anchor_count(), 4);
        assert_eq!(b.target_count(), 6);
    }

    #[test]
    fn cpc_without_rows_below_has_no_targets() {
        let h = random(&[2, 2, 1, 3], 1);
        let err = extract_cpc(&h, &ContextEncoder::new(2, 0), &PredictionMatrices::new(2, 3, 0), 0.1).unwrap_err();
        assert_eq!(err.to_string(), "no prediction targets");
    }

    #[test]
    fn cpc_skips_offsets_past_the_grid() {
        let h = random(&[2, 2, 3, 3], 1);
        let b = extract_cpc(&h, &ContextEncoder::new(2, 0), &PredictionMatrices::new(2, 5, 0), 0.1).unwrap();
        // offsets 1 and 2 only: (2 + 1) rows * 3 cols * 2 images
        assert_eq!(b.anchor_count(), 18);
        assert!((0..18).all(|a| b.positives_of(a) == 1 && b.negatives_of(a) == 17));
    }

    #[test]
    fn context_rows_only_see_rows_above() {
        let ctx = ContextEncoder::<f64>::new(3, 4);
        let h = random(&[1, 3, 5, 4], 2);
        let full = ctx.forward(&h).unwrap();
        for row in 0..5 {
            let mut cut = h.to_vec();
            for ch in 0..3 {
                for r in row + 1..5 {
                    for c in 0..4 {
                        cut[(ch * 5 + r) * 4 + c] = 0.0;
                    }
                }
            }
            let cut = ctx.forward(&Tensor::from_vec(cut, &[1, 3, 5, 4]).unwrap()).unwrap();
            for ch in 0..3 {
                for c in 0..4 {
                    let i = (ch * 5 + row) * 4 + c;
                    assert_eq!(full.data()[i], cut.data()[i]);
                }
            }
        }
    }

    #[test]
    fn simclr_pairs_views() {
        let (ma, mb) = (maps(2, &[2], 8, 0), maps(2, &[2], 8, 1));
        let head = ProjectionHead::new(32, 16, true, 0);
        let b = extract_simclr(&ma, &mb, &head).unwrap();
        assert_eq!(b.anchors.shape(), &[4, 32]);
        assert!((0..4).all(|a| b.positives_of(a) == 1 && b.negatives_of(a) == 2));
    }

    #[test]
    fn identity_head_keeps_unit_vectors() {
        let v = random(&[3, 4], 0).l2_normalize(1).unwrap();
        let z = ProjectionHead::identity(true).forward(&v).unwrap();
        for (a, b) in z.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn simclr_is_permutation_equivariant() {
        let (ma, mb) = (maps(3, &[2], 2, 0), maps(3, &[2], 2, 1));
        let perm = [2usize, 0, 1];
        let permute = |m: &FeatureMapSet<f64>| FeatureMapSet { maps: vec![m.maps[0].index_select(0, &perm).unwrap()] };
        let head = ProjectionHead::new(8, 8, true, 3);
        let a = extract_simclr(&ma, &mb, &head).unwrap();
        let b = extract_simclr(&permute(&ma), &permute(&mb), &head).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for view in 0..2 {
                let x = a.anchors.narrow(0, view * 3 + p, 1).unwrap().to_vec();
                let y = b.anchors.narrow(0, view * 3 + i, 1).unwrap().to_vec();
                assert_eq!(x, y);
            }
        }
    }
}
