use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::derive_seed;
use crate::data::{split_indices, Dataset};
use crate::nn::{Adam, AdamConfig, Init, Linear, ParamStore};
use crate::tensor::{AnyTensor, Element, Tensor};

use super::config::{Precision, ProbeConfig, RunConfig};
use super::model::Model;
use super::pretrain::load_records;
use super::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// Held-out test accuracy at the epoch with the best validation accuracy.
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub train_accuracy: f64,
    pub best_epoch: usize,
    pub feature_dim: usize,
}

/// Freezes the encoder of `checkpoint` (or a freshly initialized one when
/// `None`), extracts the deepest feature map of every image under the
/// pipeline's deterministic stages, and trains an MLP probe on the labels.
pub fn probe(cfg: &RunConfig, checkpoint: Option<&Path>, data: &Dataset, pcfg: &ProbeConfig) -> Result<ProbeReport> {
    let labels = data.labels()?.to_vec();
    let features = match cfg.precision {
        Precision::F32 => features::<f32>(cfg, checkpoint, data)?,
        Precision::F64 => features::<f64>(cfg, checkpoint, data)?,
    };
    probe_features(&features, &labels, pcfg)
}

fn features<T: Element>(cfg: &RunConfig, checkpoint: Option<&Path>, data: &Dataset) -> Result<Vec<Vec<f64>>>
where
    AnyTensor: From<Tensor<T>>,
{
    let mut model = Model::<T>::build(cfg)?;
    if let Some(path) = checkpoint {
        model.load(&load_records(path)?)?;
    }
    model.encoder.freeze();
    let eval = cfg.pipeline.deterministic();
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(64) {
        let views = chunk
            .iter()
            .map(|&i| eval.apply(&Tensor::<T>::from_f64(data.image(i), &data.shape)?, 0))
            .collect::<Result<Vec<_>, _>>()?;
        let maps = model.encode(&Tensor::stack(&views.iter().collect::<Vec<_>>())?)?;
        let deepest = maps.deepest();
        if deepest.is_tracked() {
            return Err(HarnessError::Probe("frozen encoder produced a tracked output".into()));
        }
        let per = deepest.numel() / chunk.len();
        out.extend(deepest.data().chunks(per).map(|c| c.iter().map(|v| v.as_f64()).collect()));
    }
    if !model.encoder.params.grads_absent() {
        return Err(HarnessError::Probe("encoder parameters hold gradients".into()));
    }
    Ok(out)
}

/// Trains `Linear -> ReLU -> Linear` on standardized features with a
/// seeded 70/15/15 split; returns test accuracy at the best validation
/// epoch.
pub fn probe_features(features: &[Vec<f64>], labels: &[usize], pcfg: &ProbeConfig) -> Result<ProbeReport> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(HarnessError::Probe("one feature vector per label required".into()));
    }
    if pcfg.hidden == 0 || pcfg.batch_size == 0 {
        return Err(HarnessError::Probe("hidden units and batch size must be positive".into()));
    }
    let dim = features[0].len();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let (train, val, test) = split_indices(labels, pcfg.seed);
    // standardize with training-split statistics
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(&features[i]) {
            *m += v / train.len() as f64;
        }
    }
    for &i in &train {
        for ((s, v), m) in sd.iter_mut().zip(&features[i]).zip(&mean) {
            *s += (v - m).powi(2) / train.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let matrix = |idx: &[usize]| -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend(features[i].iter().zip(&mean).zip(&sd).map(|((v, m), s)| ((v - m) / s) as f32));
        }
        Ok(Tensor::from_vec(data, &[idx.len(), dim])?)
    };
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(derive_seed(pcfg.seed, 0x9b0));
    let l1 = Linear::new(&mut store, "probe.0", dim, pcfg.hidden, &mut init);
    let l2 = Linear::new(&mut store, "probe.1", pcfg.hidden, classes, &mut init);
    let forward = |store: &ParamStore<f32>, x: &Tensor<f32>| -> Result<Tensor<f32>> {
        Ok(l2.forward(store, &l1.forward(store, x)?.relu()?)?)
    };
    let accuracy = |store: &ParamStore<f32>, idx: &[usize]| -> Result<f64> {
        if idx.is_empty() {
            return Ok(0.0);
        }
        let logits = forward(store, &matrix(idx)?)?;
        let l = logits.data();
        let correct = idx
            .iter()
            .enumerate()
            .filter(|&(r, &i)| {
                let row = &l[r * classes..(r + 1) * classes];
                let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                best == labels[i]
            })
            .count();
        Ok(correct as f64 / idx.len() as f64)
    };
    let mut adam = Adam::new(AdamConfig { lr: pcfg.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(pcfg.seed, 0x9b1));
    let mut order = train.clone();
    let mut best: Option<(f64, usize, Vec<Vec<f32>>)> = None;
    for epoch in 0..pcfg.epochs.max(1) {
        order.shuffle(&mut rng);
        for chunk in order.chunks(pcfg.batch_size) {
            let logits = forward(&store, &matrix(chunk)?)?;
            let mask: Vec<bool> = chunk.iter().flat_map(|&i| (0..classes).map(move |c| c == labels[i])).collect();
            let loss = logits.log_softmax(1)?.masked_select(&mask)?.mean_all()?.neg()?;
            loss.backward()?;
            adam.step(&mut [("", &mut store)])?;
        }
        let va = accuracy(&store, &val)?;
        if best.as_ref().is_none_or(|(b, _, _)| va > *b) {
            best = Some((va, epoch + 1, store.iter().map(|(_, t)| t.to_vec()).collect()));
        }
    }
    let (val_accuracy, best_epoch, snapshot) = best.expect("at least one epoch");
    for (i, data) in snapshot.into_iter().enumerate() {
        store.set_data(i, data)?;
    }
    Ok(ProbeReport {
        accuracy: accuracy(&store, &test)?,
        val_accuracy,
        train_accuracy: accuracy(&store, &train)?,
        best_epoch,
        feature_dim: dim,
    })
}
