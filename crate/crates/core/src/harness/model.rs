use std::collections::HashMap;

use crate::augment::derive_seed;
use crate::encoder::{build_encoder, Encoder, FeatureMapSet};
use crate::extraction::{extract_amdim, extract_cpc, extract_simclr, ContextEncoder, PredictionMatrices, ProjectionHead};
use crate::nn::{Init, ParamStore};
use crate::simloss::{amdim_total, batch_loss_k, mean_over_batches, Similarity};
use crate::tensor::{AnyTensor, Element, Tensor};

use super::config::{ExtractionConfig, RunConfig, SimilarityKind};
use super::{HarnessError, Result};

/// Every trainable part of a run: the encoder plus whatever the extraction
/// and similarity stages add.
#[derive(Debug)]
pub struct Model<T: Element> {
    pub encoder: Encoder<T>,
    pub head: Option<ProjectionHead<T>>,
    pub context: Option<ContextEncoder<T>>,
    pub predict: Option<PredictionMatrices<T>>,
    pub bilinear: Option<ParamStore<T>>,
    cfg: RunConfig,
    grid: Option<(usize, usize)>,
}

impl<T: Element> Model<T>
where
    AnyTensor: From<Tensor<T>>,
{
    /// Builds every part deterministically from `cfg.seed`.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let size = cfg.data.size;
        let encoder = build_encoder::<T>(&cfg.encoder, derive_seed(cfg.seed, 100))?;
        let (grid, view) = match cfg.pipeline.patchify() {
            Some(p) => (Some(p.grid(size, size)?), p.q),
            None => (None, size),
        };
        let extents = cfg.encoder.map_extents(view, view)?;
        let channels = cfg.encoder.map_channels();
        let deepest = *channels.last().expect("validated non-empty");
        let (mut head, mut context, mut predict) = (None, None, None);
        let rep_dim = match &cfg.extraction {
            ExtractionConfig::Multiscale { .. } => deepest,
            ExtractionConfig::Cpc { max_offset, .. } => {
                context = Some(ContextEncoder::new(deepest, derive_seed(cfg.seed, 102)));
                predict = Some(PredictionMatrices::new(deepest, *max_offset, derive_seed(cfg.seed, 103)));
                deepest
            }
            ExtractionConfig::Simclr { head_hidden, normalize } => {
                if grid.is_some() {
                    return Err(HarnessError::Config { line: 0, msg: "simclr extraction needs whole-image views (no patchify)".into() });
                }
                let (h, w) = *extents.last().expect("non-empty");
                let dim = deepest * h * w;
                head = Some(ProjectionHead::new(dim, *head_hidden, *normalize, derive_seed(cfg.seed, 101)));
                dim
            }
        };
        let bilinear = (cfg.similarity == SimilarityKind::Bilinear).then(|| {
            let mut store = ParamStore::new();
            let mut init = Init::new(derive_seed(cfg.seed, 104));
            store.push("similarity.weight", init.fan_in_uniform(&[rep_dim, rep_dim], rep_dim));
            store
        });
        Ok(Model { encoder, head, context, predict, bilinear, cfg: cfg.clone(), grid })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Patch grid `(rows, cols)` when views are patchified.
    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParamStore<T>)> {
        let mut out: Vec<(&'static str, &mut ParamStore<T>)> = vec![("encoder.", &mut self.encoder.params)];
        if let Some(h) = &mut self.head {
            out.push(("", &mut h.params));
        }
        if let Some(c) = &mut self.context {
            out.push(("", &mut c.params));
        }
        if let Some(p) = &mut self.predict {
            out.push(("", &mut p.params));
        }
        if let Some(b) = &mut self.bilinear {
            out.push(("", b));
        }
        out
    }

    pub fn records(&self) -> Vec<(String, AnyTensor)> {
        let mut out = self.encoder.records("encoder.");
        for store in [self.head.as_ref().map(|h| &h.params), self.context.as_ref().map(|c| &c.params), self.predict.as_ref().map(|p| &p.params), self.bilinear.as_ref()]
            .into_iter()
            .flatten()
        {
            out.extend(store.records(""));
        }
        out
    }

    pub fn load(&mut self, records: &HashMap<String, AnyTensor>) -> Result<()> {
        self.encoder.load(records, "encoder.")?;
        for (_, store) in self.stores_mut().into_iter().skip(1) {
            store.load(records, "")?;
        }
        Ok(())
    }

    /// Encodes a batch of views: `(B, d, h, w)`, or `(B, p, d, q, q)` when
    /// the pipeline patchifies.
    pub fn encode(&self, views: &Tensor<T>) -> Result<FeatureMapSet<T>> {
        Ok(match self.grid {
            Some((r, c)) => self.encoder.encode_patches(views, r, c)?,
            None => self.encoder.encode_batch(views)?,
        })
    }

    fn similarity(&self) -> Similarity<T> {
        match self.cfg.similarity {
            SimilarityKind::Dot => Similarity::Dot,
            SimilarityKind::Cosine => Similarity::Cosine,
            SimilarityKind::Bilinear => {
                let store = self.bilinear.as_ref().expect("built with bilinear similarity");
                Similarity::Bilinear(store.iter().next().expect("one weight").1.clone())
            }
        }
    }

    /// Contrastive loss of one batch. `va` and `vb` are two augmented views
    /// of the same images; single-view methods ignore `vb`.
    pub fn loss(&self, va: &Tensor<T>, vb: &Tensor<T>, step: u64) -> Result<Tensor<T>> {
        let sim = self.similarity();
        let k = self.cfg.shards;
        let b = va.shape()[0];
        match &self.cfg.extraction {
            ExtractionConfig::Multiscale { spec, anchors } => {
                let both = self.encode(&Tensor::concat(&[va, vb], 0)?)?;
                let (ma, mb) = (both.narrow(0, b)?, both.narrow(b, b)?);
                let pairs = spec.resolve(both.len(), step)?;
                let batches = extract_amdim(&ma, &mb, &[], &pairs, *anchors)?;
                Ok(if batches.len() == 3 {
                    amdim_total(&batches, &sim, &self.cfg.loss, k)?
                } else {
                    mean_over_batches(&batches, &sim, &self.cfg.loss, k)?
                })
            }
            ExtractionConfig::Cpc { embed_scale, .. } => {
                let h = self.encode(va)?;
                let ctx = self.context.as_ref().expect("cpc model has a context encoder");
                let w = self.predict.as_ref().expect("cpc model has prediction matrices");
                let batch = extract_cpc(h.deepest(), ctx, w, *embed_scale)?;
                Ok(batch_loss_k(&batch, &sim, &self.cfg.loss, k)?)
            }
            ExtractionConfig::Simclr { .. } => {
                let both = self.encode(&Tensor::concat(&[va, vb], 0)?)?;
                let head = self.head.as_ref().expect("simclr model has a head");
                let batch = extract_simclr(&both.narrow(0, b)?, &both.narrow(b, b)?, head)?;
                Ok(batch_loss_k(&batch, &sim, &self.cfg.loss, k)?)
            }
        }
    }
}
