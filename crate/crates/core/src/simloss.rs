//! Similarity measures and contrastive losses.
//!
//! All three losses share one shape. For anchor `a` with positive targets
//! `P` and a denominator set `D`, the per-anchor loss is
//!
//! ```text
//! -LSE_{t in P}(s_at / tau) + LSE_{t in D}(s_at / tau)
//! ```
//!
//! and the batch loss is the mean over anchors. `D` holds the negatives,
//! plus the positives when `include_positive_in_denominator` is set. With a
//! single positive and the positive included this is softmax cross-entropy.
//!
//! Targets may be split into shards. Each shard reduces its scores to
//! per-anchor `(max, sum)` partials; merging partials is associative and
//! commutative, so any shard layout gives the single-shard loss.

use std::ops::Range;

use crate::extraction::{ExtractionError, RepresentationBatch};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("anchor {anchor} has no positive targets")]
    NoPositives { anchor: usize },
    #[error("anchor {anchor} has no negative targets")]
    NoNegatives { anchor: usize },
    #[error("the AMDIM objective needs three map pairs from an encoder with at least three feature maps, got {0}")]
    TooFewMaps(usize),
    #[error("shards overlap at target {0}")]
    Overlap(usize),
    #[error("target {0} is in no shard")]
    Uncovered(usize),
    #[error("shard count must be positive")]
    NoShards,
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub enum Similarity<T: Element = f64> {
    Dot,
    /// `a^T W b`
    Bilinear(Tensor<T>),
    Cosine,
}

impl<T: Element> Similarity<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Similarity::Dot => "dot",
            Similarity::Bilinear(_) => "bilinear",
            Similarity::Cosine => "cosine",
        }
    }

    /// Scores of every anchor row `(A, c)` against every target row
    /// `(T, c)`, as an `(A, T)` matrix.
    pub fn scores(&self, anchors: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
        let zero = |e: TensorError| match e {
            TensorError::NonFinite { .. } => LossError::ZeroVector,
            e => LossError::Tensor(e),
        };
        Ok(match self {
            Similarity::Dot => anchors.matmul(&targets.transpose()?)?,
            Similarity::Bilinear(w) => anchors.matmul(w)?.matmul(&targets.transpose()?)?,
            Similarity::Cosine => {
                let a = anchors.l2_normalize(1).map_err(zero)?;
                let b = targets.l2_normalize(1).map_err(zero)?;
                a.matmul(&b.transpose()?)?
            }
        })
    }
}

/// Scalar score of two vectors.
pub fn similarity<T: Element>(sim: &Similarity<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let row = |v: &Tensor<T>| v.reshape(&[1, v.numel()]);
    Ok(sim.scores(&row(a)?, &row(b)?)?.reshape(&[])?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    NceAmdim,
    InfoNce,
    NtXent,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::NceAmdim => "nce_amdim",
            LossKind::InfoNce => "info_nce",
            LossKind::NtXent => "nt_xent",
        }
    }

    pub fn parse(s: &str) -> Option<LossKind> {
        match s {
            "nce_amdim" => Some(LossKind::NceAmdim),
            "info_nce" => Some(LossKind::InfoNce),
            "nt_xent" => Some(LossKind::NtXent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub temperature: f64,
    pub include_positive_in_denominator: bool,
}

impl LossConfig {
    /// Denominator over negatives only.
    pub fn nce_amdim() -> Self {
        LossConfig { kind: LossKind::NceAmdim, temperature: 1.0, include_positive_in_denominator: false }
    }

    pub fn info_nce() -> Self {
        LossConfig { kind: LossKind::InfoNce, temperature: 1.0, include_positive_in_denominator: true }
    }

    pub fn nt_xent(temperature: f64) -> Self {
        LossConfig { kind: LossKind::NtXent, temperature, include_positive_in_denominator: true }
    }

    pub fn for_kind(kind: LossKind) -> Self {
        match kind {
            LossKind::NceAmdim => Self::nce_amdim(),
            LossKind::InfoNce => Self::info_nce(),
            LossKind::NtXent => Self::nt_xent(0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::Temperature(self.temperature));
        }
        Ok(())
    }
}

/// Running log-sum-exp over a subset of scores: `max + ln(sum)`, with an
/// empty subset held as `(-inf, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsePartial<T: Element> {
    pub max: T,
    pub sum: T,
}

impl<T: Element> LsePartial<T> {
    pub fn empty() -> Self {
        LsePartial { max: T::neg_infinity(), sum: T::zero() }
    }

    pub fn of(values: impl Iterator<Item = T> + Clone) -> Self {
        let max = values.clone().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            return Self::empty();
        }
        LsePartial { max, sum: values.map(|v| (v - max).exp()).sum() }
    }

    pub fn merge(self, other: Self) -> Self {
        if self.max == T::neg_infinity() {
            return other;
        }
        if other.max == T::neg_infinity() {
            return self;
        }
        let max = self.max.max(other.max);
        LsePartial { max, sum: self.sum * (self.max - max).exp() + other.sum * (other.max - max).exp() }
    }

    pub fn is_empty(&self) -> bool {
        self.max == T::neg_infinity()
    }

    pub fn value(&self) -> T {
        self.max + self.sum.ln()
    }
}

/// Shard-local partials: for each anchor, the positive-set and
/// denominator-set log-sum-exp over this shard's targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedScores<T: Element> {
    pub numerators: Vec<LsePartial<T>>,
    pub denominators: Vec<LsePartial<T>>,
    pub shard_count: usize,
}

impl<T: Element> ShardedScores<T> {
    /// Phase 1: reduce one shard's `(A, T_k)` scaled scores.
    pub fn from_shard(scores: &[T], anchors: usize, targets: usize, pos: &[bool], den: &[bool]) -> Self {
        let lane = |mask: &[bool], a: usize| {
            let row = &scores[a * targets..(a + 1) * targets];
            let m = &mask[a * targets..(a + 1) * targets];
            LsePartial::of(row.iter().zip(m).filter(|(_, &k)| k).map(|(&v, _)| v))
        };
        ShardedScores {
            numerators: (0..anchors).map(|a| lane(pos, a)).collect(),
            denominators: (0..anchors).map(|a| lane(den, a)).collect(),
            shard_count: 1,
        }
    }

    /// Phase 2: combine partials of disjoint shards.
    pub fn merge(&self, other: &Self) -> Self {
        let zip = |a: &[LsePartial<T>], b: &[LsePartial<T>]| a.iter().zip(b).map(|(x, y)| x.merge(*y)).collect();
        ShardedScores {
            numerators: zip(&self.numerators, &other.numerators),
            denominators: zip(&self.denominators, &other.denominators),
            shard_count: self.shard_count + other.shard_count,
        }
    }
}

/// Splits `n` targets into `k` contiguous shards whose sizes differ by at
/// most one.
pub fn even_shards(n: usize, k: usize) -> Vec<Range<usize>> {
    let k = k.max(1);
    (0..k).map(|i| (i * n / k)..((i + 1) * n / k)).collect()
}

fn check_shards(n: usize, shards: &[Vec<usize>]) -> Result<()> {
    if shards.is_empty() {
        return Err(LossError::NoShards);
    }
    let mut seen = vec![false; n];
    for &t in shards.iter().flatten() {
        if t >= n {
            return Err(LossError::Uncovered(t));
        }
        if std::mem::replace(&mut seen[t], true) {
            return Err(LossError::Overlap(t));
        }
    }
    match seen.iter().position(|s| !s) {
        Some(t) => Err(LossError::Uncovered(t)),
        None => Ok(()),
    }
}

/// Per-anchor loss with targets split across `shards` (lists of target
/// indices that must partition the target set).
pub fn sharded_anchor_losses<T: Element>(
    batch: &RepresentationBatch<T>,
    sim: &Similarity<T>,
    cfg: &LossConfig,
    shards: &[Vec<usize>],
) -> Result<Tensor<T>> {
    cfg.validate()?;
    batch.validate()?;
    let (na, nt) = (batch.anchor_count(), batch.target_count());
    check_shards(nt, shards)?;
    let inv_tau = T::lit(1.0 / cfg.temperature);
    let mut scores = Vec::with_capacity(shards.len());
    let mut masks = Vec::with_capacity(shards.len());
    for shard in shards {
        let targets = if shard.len() == nt && shard.iter().enumerate().all(|(i, &t)| i == t) {
            batch.targets.clone()
        } else {
            batch.targets.index_select(0, shard)?
        };
        let s = sim.scores(&batch.anchors, &targets)?;
        scores.push(if cfg.temperature == 1.0 { s } else { s.scale(inv_tau)? });
        let mut pos = Vec::with_capacity(na * shard.len());
        let mut den = Vec::with_capacity(na * shard.len());
        for a in 0..na {
            for &t in shard {
                let p = batch.is_positive(a, t);
                pos.push(p);
                den.push(batch.is_negative(a, t) || (p && cfg.include_positive_in_denominator));
            }
        }
        masks.push((shard.len(), pos, den));
    }
    let merged = scores
        .iter()
        .zip(&masks)
        .map(|(s, (n, pos, den))| ShardedScores::from_shard(s.data(), na, *n, pos, den))
        .reduce(|a, b| a.merge(&b))
        .expect("at least one shard");
    for a in 0..na {
        if merged.numerators[a].is_empty() {
            return Err(LossError::NoPositives { anchor: a });
        }
        if merged.denominators[a].is_empty() {
            return Err(LossError::NoNegatives { anchor: a });
        }
    }
    let lse_p: Vec<T> = merged.numerators.iter().map(LsePartial::value).collect();
    let lse_d: Vec<T> = merged.denominators.iter().map(LsePartial::value).collect();
    let data = lse_p.iter().zip(&lse_d).map(|(&p, &d)| d - p).collect();
    let inputs: Vec<&Tensor<T>> = scores.iter().collect();
    Ok(Tensor::from_op("contrastive_lse", data, vec![na], &inputs, move |ctx| {
        ctx.inputs
            .iter()
            .zip(&masks)
            .map(|(x, (n, pos, den))| {
                let x = x.data();
                let mut g = vec![T::zero(); x.len()];
                for a in 0..na {
                    for j in 0..*n {
                        let i = a * n + j;
                        let mut v = T::zero();
                        if pos[i] {
                            v -= (x[i] - lse_p[a]).exp();
                        }
                        if den[i] {
                            v += (x[i] - lse_d[a]).exp();
                        }
                        g[i] = ctx.grad_out[a] * v;
                    }
                }
                Some(g)
            })
            .collect()
    })?)
}

/// Mean loss over anchors with targets split across `shards`.
pub fn sharded_negatives<T: Element>(
    batch: &RepresentationBatch<T>,
    sim: &Similarity<T>,
    cfg: &LossConfig,
    shards: &[Vec<usize>],
) -> Result<Tensor<T>> {
    Ok(sharded_anchor_losses(batch, sim, cfg, shards)?.mean_all()?)
}

/// Mean loss over anchors, targets split into `k` contiguous shards.
pub fn batch_loss_k<T: Element>(
    batch: &RepresentationBatch<T>,
    sim: &Similarity<T>,
    cfg: &LossConfig,
    k: usize,
) -> Result<Tensor<T>> {
    if k == 0 {
        return Err(LossError::NoShards);
    }
    let shards: Vec<Vec<usize>> = even_shards(batch.target_count(), k).into_iter().map(|r| r.collect()).collect();
    sharded_negatives(batch, sim, cfg, &shards)
}

/// Mean loss over anchors.
pub fn batch_loss<T: Element>(
    batch: &RepresentationBatch<T>,
    sim: &Similarity<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    batch_loss_k(batch, sim, cfg, 1)
}

fn single_anchor<T: Element>(r_a: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(r_a.reshape(&[1, r_a.numel()])?)
}

/// `-log(sum_{R+} exp s / sum_{R-} exp s)` for one anchor `(c)` against
/// positives `(P, c)` and negatives `(N, c)`; the denominator also holds
/// the positives when `include_positive` is set.
pub fn nce_amdim<T: Element>(
    r_a: &Tensor<T>,
    r_pos: &Tensor<T>,
    r_neg: &Tensor<T>,
    sim: &Similarity<T>,
    include_positive: bool,
) -> Result<Tensor<T>> {
    let (np, nn) = (r_pos.shape()[0], r_neg.shape()[0]);
    if nn == 0 {
        return Err(LossError::NoNegatives { anchor: 0 });
    }
    let batch = RepresentationBatch {
        anchors: single_anchor(r_a)?,
        targets: Tensor::concat(&[r_pos, r_neg], 0)?,
        anchor_source: vec![0],
        target_source: (0..np + nn).map(|t| usize::from(t >= np)).collect(),
        positives: crate::extraction::Positives::SameSource,
        negatives: crate::extraction::Negatives::OtherSources,
        exclude: None,
        layers: None,
    };
    let cfg = LossConfig { include_positive_in_denominator: include_positive, ..LossConfig::nce_amdim() };
    batch_loss(&batch, sim, &cfg)
}

/// Softmax cross-entropy of one anchor `(c)` over `[r_pos; R_neg]`.
pub fn info_nce<T: Element>(
    r_a: &Tensor<T>,
    r_pos: &Tensor<T>,
    r_neg: &Tensor<T>,
    sim: &Similarity<T>,
) -> Result<Tensor<T>> {
    if r_neg.shape()[0] == 0 {
        return Err(LossError::NoNegatives { anchor: 0 });
    }
    let nn = r_neg.shape()[0];
    let batch = RepresentationBatch {
        anchors: single_anchor(r_a)?,
        targets: Tensor::concat(&[&single_anchor(r_pos)?, r_neg], 0)?,
        anchor_source: vec![0],
        target_source: (0..=nn).collect(),
        positives: crate::extraction::Positives::Labels(vec![0]),
        negatives: crate::extraction::Negatives::AllOthers,
        exclude: None,
        layers: None,
    };
    batch_loss(&batch, sim, &LossConfig::info_nce())
}

/// Temperature-scaled cross-entropy over paired unit vectors `(n, c)`:
/// each row's partner view is its positive and every other row except
/// itself, the partner included, forms the denominator.
pub fn nt_xent<T: Element>(z1: &Tensor<T>, z2: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    let cfg = LossConfig::nt_xent(temperature);
    cfg.validate()?;
    let batch = RepresentationBatch::paired(z1, z2)?;
    batch_loss(&batch, &Similarity::Dot, &cfg)
}

/// Mean of the three per-pair losses of the multiscale objective.
pub fn amdim_total<T: Element>(
    batches: &[RepresentationBatch<T>],
    sim: &Similarity<T>,
    cfg: &LossConfig,
    shards: usize,
) -> Result<Tensor<T>> {
    if batches.len() != 3 {
        return Err(LossError::TooFewMaps(batches.len()));
    }
    mean_over_batches(batches, sim, cfg, shards)
}

/// Unweighted mean of the per-batch losses.
pub fn mean_over_batches<T: Element>(
    batches: &[RepresentationBatch<T>],
    sim: &Similarity<T>,
    cfg: &LossConfig,
    shards: usize,
) -> Result<Tensor<T>> {
    let losses = batches
        .iter()
        .map(|b| batch_loss_k(b, sim, cfg, shards))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = losses.iter().collect();
    Ok(Tensor::stack(&refs)?.mean_all()?)
}
