use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::derive_seed;
use crate::data::UnlabeledView;
use crate::nn::Adam;
use crate::tensor::{read_checkpoint, write_checkpoint, AnyTensor, Element, Tensor, TensorError};

use super::config::{Precision, RunConfig};
use super::model::Model;
use super::{io_err, HarnessError, Result};

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Continue from this checkpoint (written by an earlier run of the same
    /// config); its epoch count is where training resumes.
    pub resume: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub best_loss: f64,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

pub const METRICS_HEADER: [&str; 6] = ["run_id", "epoch", "step", "loss", "wall_ms", "shard_count"];

/// Trains the model a config describes on unlabeled images and writes
/// `metrics.csv` (one row per epoch), `steps.csv` (one row per step),
/// `ckpt.bin`, `ckpt_best.bin` and `resolved.cfg` into `out`.
pub fn pretrain(cfg: &RunConfig, data: UnlabeledView<'_>, out: &Path, opts: &PretrainOptions) -> Result<PretrainReport> {
    match cfg.precision {
        Precision::F32 => run::<f32>(cfg, data, out, opts),
        Precision::F64 => run::<f64>(cfg, data, out, opts),
    }
}

/// Views of `indices` as two `(B, ...)` tensors. Image `i` in epoch `e`
/// always receives the same two augmentation draws.
fn views<T: Element>(cfg: &RunConfig, data: UnlabeledView<'_>, indices: &[usize], epoch: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let epoch_seed = derive_seed(cfg.seed, 1 + epoch as u64);
    let mut a = Vec::with_capacity(indices.len());
    let mut b = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = Tensor::<T>::from_f64(data.image(i), &data.shape)?;
        a.push(cfg.pipeline.apply(&img, derive_seed(epoch_seed, 2 * i as u64))?);
        b.push(cfg.pipeline.apply(&img, derive_seed(epoch_seed, 2 * i as u64 + 1))?);
    }
    let stack = |v: &[Tensor<T>]| Tensor::stack(&v.iter().collect::<Vec<_>>());
    Ok((stack(&a)?, stack(&b)?))
}

/// Batches of image indices for one epoch; a trailing batch with fewer
/// than two images is dropped.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x0e00 + epoch as u64)));
    order.chunks(batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

fn meta(name: &str, v: f64) -> (String, AnyTensor) {
    (name.to_string(), AnyTensor::F64(Tensor::scalar(v)))
}

fn save<T: Element>(path: &Path, model: &Model<T>, adam: &Adam, epoch: usize, step: u64, best: f64) -> Result<()>
where
    AnyTensor: From<Tensor<T>>,
{
    let mut records = model.records();
    records.extend(adam.records());
    records.push(meta("meta.epoch", epoch as f64));
    records.push(meta("meta.step", step as f64));
    records.push(meta("meta.best_loss", best));
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, &records)?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub(crate) fn load_records(path: &Path) -> Result<HashMap<String, AnyTensor>> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(read_checkpoint(BufReader::new(file))?.into_iter().collect())
}

fn meta_value(records: &HashMap<String, AnyTensor>, name: &str) -> Result<f64> {
    let t = records.get(name).ok_or_else(|| HarnessError::Checkpoint(format!("missing {name}")))?;
    Ok(t.to::<f64>().item()?)
}

fn csv_appender(path: &Path, header: &[&str], append: bool) -> Result<csv::Writer<File>> {
    let exists = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    if !exists {
        w.write_record(header)?;
    }
    Ok(w)
}

fn diverged(epoch: usize, step: u64, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Diverged { epoch, step, msg: e.to_string() }
}

fn is_non_finite(e: &HarnessError) -> bool {
    let text = e.to_string();
    matches!(e, HarnessError::Tensor(TensorError::NonFinite { .. })) || text.contains("non-finite")
}

fn run<T: Element>(cfg: &RunConfig, data: UnlabeledView<'_>, out: &Path, opts: &PretrainOptions) -> Result<PretrainReport>
where
    AnyTensor: From<Tensor<T>>,
{
    cfg.validate()?;
    if data.len() < 2 {
        return Err(HarnessError::Config { line: 0, msg: "pretraining needs at least two images".into() });
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    fs::write(out.join("resolved.cfg"), cfg.to_text()).map_err(io_err(out.join("resolved.cfg")))?;
    let mut model = Model::<T>::build(cfg)?;
    let mut adam = Adam::new(cfg.optimizer);
    let (mut start_epoch, mut step, mut best) = (0usize, 0u64, f64::INFINITY);
    if let Some(path) = &opts.resume {
        let records = load_records(path)?;
        model.load(&records)?;
        adam.load(&records)?;
        start_epoch = meta_value(&records, "meta.epoch")? as usize;
        step = meta_value(&records, "meta.step")? as u64;
        best = meta_value(&records, "meta.best_loss")?;
    }
    let resuming = opts.resume.is_some();
    let mut metrics = csv_appender(&out.join("metrics.csv"), &METRICS_HEADER, resuming)?;
    let mut steps = csv_appender(&out.join("steps.csv"), &["run_id", "epoch", "step", "loss"], resuming)?;
    let (ckpt, ckpt_best) = (out.join("ckpt.bin"), out.join("ckpt_best.bin"));
    let mut report = PretrainReport {
        epoch_losses: Vec::new(),
        step_losses: Vec::new(),
        best_loss: best,
        checkpoint: ckpt.clone(),
        best_checkpoint: ckpt_best.clone(),
    };
    let started = Instant::now();
    for epoch in start_epoch..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        for batch in &batches {
            let (va, vb) = views::<T>(cfg, data, batch, epoch)?;
            let loss = match model.loss(&va, &vb, step) {
                Ok(l) => l,
                Err(e) if is_non_finite(&e) => return Err(record_divergence(out, diverged(epoch + 1, step, e))),
                Err(e) => return Err(e),
            };
            let value = loss.item()?.as_f64();
            if !value.is_finite() {
                return Err(record_divergence(out, diverged(epoch + 1, step, "non-finite loss")));
            }
            loss.backward()?;
            adam.step(&mut model.stores_mut())?;
            step += 1;
            total += value;
            report.step_losses.push(value);
            steps.write_record([cfg.run_id.clone(), (epoch + 1).to_string(), step.to_string(), format!("{value:?}")])?;
        }
        let mean = total / batches.len().max(1) as f64;
        report.epoch_losses.push(mean);
        let wall = if cfg.record_wall_time { started.elapsed().as_millis() } else { 0 };
        metrics.write_record([
            cfg.run_id.clone(),
            (epoch + 1).to_string(),
            step.to_string(),
            format!("{mean:?}"),
            wall.to_string(),
            cfg.shards.to_string(),
        ])?;
        metrics.flush().map_err(io_err(out.join("metrics.csv")))?;
        steps.flush().map_err(io_err(out.join("steps.csv")))?;
        if mean < best {
            best = mean;
            save(&ckpt_best, &model, &adam, epoch + 1, step, best)?;
        }
        save(&ckpt, &model, &adam, epoch + 1, step, best)?;
        if opts.verbose {
            eprintln!("[{}] epoch {}/{} loss {mean:.5} ({} steps, {:.1}s)", cfg.run_id, epoch + 1, cfg.epochs, batches.len(), started.elapsed().as_secs_f64());
        }
    }
    report.best_loss = best;
    Ok(report)
}

fn record_divergence(out: &Path, err: HarnessError) -> HarnessError {
    let _ = fs::write(out.join("diverged.txt"), format!("{err}\n"));
    err
}

/// Per-step losses from a run directory's `steps.csv`.
pub fn read_steps(out: &Path) -> Result<Vec<f64>> {
    let path = out.join("steps.csv");
    let mut r = csv::Reader::from_path(&path)?;
    let mut losses = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v = rec.get(3).and_then(|s| s.parse::<f64>().ok());
        losses.push(v.ok_or_else(|| HarnessError::Checkpoint(format!("bad row in {}", path.display())))?);
    }
    Ok(losses)
}
