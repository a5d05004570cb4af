//! Convolutional encoders producing one feature map per stage.
//!
//! A stage is a stack of `conv -> norm -> relu` blocks; only the first block
//! of a stage applies the stage stride. The last block's activation is the
//! stage's feature map, optionally passed through a 1x1 projection to a
//! shared width (`embed_dim`) so maps of different depth can be compared
//! with a dot product.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;

use crate::nn::{Init, ParamId, ParamStore};
use crate::tensor::{conv_out_extent, AnyTensor, Element, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {field}: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("stage {stage} block {block}: kernel {kernel} with stride {stride} does not fit a {h}x{w} input")]
    Underflow { stage: usize, block: usize, kernel: usize, stride: usize, h: usize, w: usize },
    #[error("expected input of shape {expected}, got {got:?}")]
    Input { expected: &'static str, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    None,
    Batch,
    Layer,
}

impl Norm {
    pub fn parse(s: &str) -> Option<Norm> {
        match s {
            "none" => Some(Norm::None),
            "batch" => Some(Norm::Batch),
            "layer" => Some(Norm::Layer),
            _ => None,
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::None => "none",
            Norm::Batch => "batch",
            Norm::Layer => "layer",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub kernel_size: usize,
    pub use_padding: bool,
    pub norm: Norm,
    pub embed_dim: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_channels: 3,
            stage_channels: vec![32, 64, 128],
            blocks_per_stage: vec![1, 1, 1],
            stage_strides: vec![1, 1, 1],
            kernel_size: 3,
            use_padding: false,
            norm: Norm::None,
            embed_dim: None,
        }
    }
}

impl EncoderConfig {
    /// Multiplies every stage width by `factor` (rounded, at least 1).
    pub fn with_width(mut self, factor: f64) -> Self {
        for c in &mut self.stage_channels {
            *c = ((*c as f64 * factor).round() as usize).max(1);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field, msg: &str| Err(EncoderError::Config { field, msg: msg.to_string() });
        let n = self.stage_channels.len();
        if self.input_channels == 0 {
            return err("input_channels", "must be positive");
        }
        if n == 0 {
            return err("stage_channels", "must not be empty");
        }
        if self.stage_channels.contains(&0) {
            return err("stage_channels", "every entry must be positive");
        }
        if self.blocks_per_stage.len() != n {
            return err("blocks_per_stage", "must have one entry per stage");
        }
        if self.blocks_per_stage.contains(&0) {
            return err("blocks_per_stage", "every entry must be positive");
        }
        if self.stage_strides.len() != n {
            return err("stage_strides", "must have one entry per stage");
        }
        if self.stage_strides.contains(&0) {
            return err("stage_strides", "every entry must be positive");
        }
        if self.kernel_size == 0 {
            return err("kernel_size", "must be positive");
        }
        if self.embed_dim == Some(0) {
            return err("embed_dim", "must be positive");
        }
        Ok(())
    }

    fn padding(&self) -> usize {
        if self.use_padding {
            self.kernel_size / 2
        } else {
            0
        }
    }

    /// Spatial extent `(h, w)` of every stage map for an `h x w` input.
    pub fn map_extents(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (h, w);
        let mut out = Vec::new();
        for (s, (&blocks, &stride)) in self.blocks_per_stage.iter().zip(&self.stage_strides).enumerate() {
            for b in 0..blocks {
                let st = if b == 0 { stride } else { 1 };
                let k = self.kernel_size;
                match (
                    conv_out_extent(h, k, st, self.padding()),
                    conv_out_extent(w, k, st, self.padding()),
                ) {
                    (Some(nh), Some(nw)) => (h, w) = (nh, nw),
                    _ => {
                        return Err(EncoderError::Underflow { stage: s, block: b, kernel: k, stride: st, h, w })
                    }
                }
            }
            out.push((h, w));
        }
        Ok(out)
    }

    /// Channel count of each emitted map.
    pub fn map_channels(&self) -> Vec<usize> {
        match self.embed_dim {
            Some(e) => vec![e; self.stage_channels.len()],
            None => self.stage_channels.clone(),
        }
    }
}

/// Per-layer encoder outputs, each `(batch, c, h, w)`. Index `-1` is the
/// deepest map.
#[derive(Debug, Clone)]
pub struct FeatureMapSet<T: Element = f64> {
    pub maps: Vec<Tensor<T>>,
}

impl<T: Element> FeatureMapSet<T> {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.maps.first().map_or(0, |m| m.shape()[0])
    }

    /// Map at a negative (`-1` = deepest) or non-negative index.
    pub fn get(&self, index: isize) -> Option<&Tensor<T>> {
        let l = self.maps.len() as isize;
        let i = if index < 0 { l + index } else { index };
        (0..l).contains(&i).then(|| &self.maps[i as usize])
    }

    pub fn deepest(&self) -> &Tensor<T> {
        self.maps.last().expect("non-empty feature map set")
    }

    /// Concatenates two sets along the batch axis.
    pub fn concat(&self, other: &FeatureMapSet<T>) -> Result<FeatureMapSet<T>> {
        let maps = self
            .maps
            .iter()
            .zip(&other.maps)
            .map(|(a, b)| Tensor::concat(&[a, b], 0))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FeatureMapSet { maps })
    }

    /// Images `start..start+len` of every map.
    pub fn narrow(&self, start: usize, len: usize) -> Result<FeatureMapSet<T>> {
        let maps = self
            .maps
            .iter()
            .map(|m| m.narrow(0, start, len))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FeatureMapSet { maps })
    }
}

#[derive(Debug, Clone)]
struct Block {
    weight: ParamId,
    bias: ParamId,
    gamma: Option<ParamId>,
    beta: Option<ParamId>,
    stride: usize,
    channels: usize,
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<Block>,
    embed: Option<(ParamId, ParamId)>,
}

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
pub struct Encoder<T: Element = f64> {
    cfg: EncoderConfig,
    pub params: ParamStore<T>,
    stages: Vec<Stage>,
    // running (mean, var) per batch-norm block, in stage/block order
    running: RefCell<Vec<(Vec<f64>, Vec<f64>)>>,
    training: Cell<bool>,
}

/// Builds an encoder with parameters drawn deterministically from `seed`.
pub fn build_encoder<T: Element>(cfg: &EncoderConfig, seed: u64) -> Result<Encoder<T>> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    let mut init = Init::new(seed);
    let mut stages = Vec::new();
    let mut running = Vec::new();
    let k = cfg.kernel_size;
    let mut cin = cfg.input_channels;
    for (s, &cout) in cfg.stage_channels.iter().enumerate() {
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks_per_stage[s] {
            let name = format!("stage{s}.block{b}");
            let weight = params.push(
                format!("{name}.weight"),
                init.fan_in_uniform(&[cout, cin, k, k], cin * k * k),
            );
            let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
            let (gamma, beta) = if cfg.norm == Norm::None {
                (None, None)
            } else {
                (
                    Some(params.push(format!("{name}.gamma"), Tensor::ones(&[cout]))),
                    Some(params.push(format!("{name}.beta"), Tensor::zeros(&[cout]))),
                )
            };
            if cfg.norm == Norm::Batch {
                running.push((vec![0.0; cout], vec![1.0; cout]));
            }
            let stride = if b == 0 { cfg.stage_strides[s] } else { 1 };
            blocks.push(Block { weight, bias, gamma, beta, stride, channels: cout });
            cin = cout;
        }
        let embed = cfg.embed_dim.map(|e| {
            let w = params.push(format!("stage{s}.embed.weight"), init.fan_in_uniform(&[e, cout, 1, 1], cout));
            let b = params.push(format!("stage{s}.embed.bias"), Tensor::zeros(&[e]));
            (w, b)
        });
        stages.push(Stage { blocks, embed });
    }
    Ok(Encoder {
        cfg: cfg.clone(),
        params,
        stages,
        running: RefCell::new(running),
        training: Cell::new(true),
    })
}

impl<T: Element> Encoder<T> {
    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Batch norm uses batch statistics (and updates running ones) in
    /// training mode and the running statistics otherwise.
    pub fn set_training(&self, training: bool) {
        self.training.set(training);
    }

    pub fn is_training(&self) -> bool {
        self.training.get()
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
        self.training.set(false);
    }

    /// Encodes one `(d, h, w)` image; every map has a leading batch axis
    /// of 1.
    pub fn encode(&self, v: &Tensor<T>) -> Result<FeatureMapSet<T>> {
        if v.rank() != 3 {
            return Err(EncoderError::Input { expected: "(d, h, w)", got: v.shape().to_vec() });
        }
        let s = v.shape();
        self.encode_batch(&v.reshape(&[1, s[0], s[1], s[2]])?)
    }

    /// Encodes a `(batch, d, h, w)` stack.
    pub fn encode_batch(&self, v: &Tensor<T>) -> Result<FeatureMapSet<T>> {
        let s = v.shape();
        if v.rank() != 4 || s[1] != self.cfg.input_channels {
            return Err(EncoderError::Input { expected: "(batch, d, h, w)", got: s.to_vec() });
        }
        self.cfg.map_extents(s[2], s[3])?;
        let pad = self.cfg.padding();
        let mut x = v.clone();
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut bn_index = 0;
        for stage in &self.stages {
            for block in &stage.blocks {
                let w = self.params.get(block.weight);
                let b = self.params.get(block.bias);
                x = x.conv2d(w, Some(b), block.stride, pad)?;
                x = match self.cfg.norm {
                    Norm::None => x,
                    Norm::Layer => self.layer_norm(&x, block)?,
                    Norm::Batch => {
                        bn_index += 1;
                        self.batch_norm(&x, block, bn_index - 1)?
                    }
                };
                x = x.relu()?;
            }
            let map = match stage.embed {
                Some((w, b)) => x.conv2d(self.params.get(w), Some(self.params.get(b)), 1, 0)?,
                None => x.clone(),
            };
            maps.push(map);
        }
        Ok(FeatureMapSet { maps })
    }

    /// Encodes patched views `(batch, p, d, q, q)` (or `(p, d, q, q)` for a
    /// single image). Each patch is encoded independently; every stage map
    /// is mean-pooled to one vector per patch and laid out on the
    /// `rows x cols` patch grid, giving maps of shape `(batch, c, rows, cols)`.
    pub fn encode_patches(&self, v: &Tensor<T>, rows: usize, cols: usize) -> Result<FeatureMapSet<T>> {
        let v = if v.rank() == 4 {
            let s = v.shape();
            v.reshape(&[1, s[0], s[1], s[2], s[3]])?
        } else {
            v.clone()
        };
        let s = v.shape().to_vec();
        if s.len() != 5 || s[1] != rows * cols {
            return Err(EncoderError::Input { expected: "(batch, rows*cols, d, q, q)", got: s });
        }
        let (b, p) = (s[0], s[1]);
        let flat = v.reshape(&[b * p, s[2], s[3], s[4]])?;
        let inner = self.encode_batch(&flat)?;
        let maps = inner
            .maps
            .iter()
            .map(|m| {
                let c = m.shape()[1];
                m.mean_axes(&[2, 3], false)?
                    .reshape(&[b, rows, cols, c])?
                    .permute(&[0, 3, 1, 2])
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FeatureMapSet { maps })
    }

    fn affine(&self, x: &Tensor<T>, block: &Block) -> Result<Tensor<T>> {
        let c = block.channels;
        let g = self.params.get(block.gamma.expect("norm params")).reshape(&[1, c, 1, 1])?;
        let b = self.params.get(block.beta.expect("norm params")).reshape(&[1, c, 1, 1])?;
        Ok(x.mul(&g)?.add(&b)?)
    }

    fn layer_norm(&self, x: &Tensor<T>, block: &Block) -> Result<Tensor<T>> {
        let mean = x.mean_axes(&[1, 2, 3], true)?;
        let centered = x.sub(&mean)?;
        let var = centered.square()?.mean_axes(&[1, 2, 3], true)?;
        let y = centered.div(&var.add_scalar(T::lit(NORM_EPS))?.sqrt()?)?;
        self.affine(&y, block)
    }

    fn batch_norm(&self, x: &Tensor<T>, block: &Block, index: usize) -> Result<Tensor<T>> {
        let c = block.channels;
        let y = if self.training.get() {
            let mean = x.mean_axes(&[0, 2, 3], true)?;
            let centered = x.sub(&mean)?;
            let var = centered.square()?.mean_axes(&[0, 2, 3], true)?;
            let mut running = self.running.borrow_mut();
            let (rm, rv) = &mut running[index];
            for ch in 0..c {
                rm[ch] = (1.0 - BN_MOMENTUM) * rm[ch] + BN_MOMENTUM * mean.data()[ch].as_f64();
                rv[ch] = (1.0 - BN_MOMENTUM) * rv[ch] + BN_MOMENTUM * var.data()[ch].as_f64();
            }
            centered.div(&var.add_scalar(T::lit(NORM_EPS))?.sqrt()?)?
        } else {
            let running = self.running.borrow();
            let (rm, rv) = &running[index];
            let mean = Tensor::from_f64(rm, &[1, c, 1, 1])?;
            let inv: Vec<f64> = rv.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            x.sub(&mean)?.mul(&Tensor::from_f64(&inv, &[1, c, 1, 1])?)?
        };
        self.affine(&y, block)
    }

    /// Parameters plus batch-norm running statistics as checkpoint records.
    pub fn records(&self, prefix: &str) -> Vec<(String, AnyTensor)>
    where
        AnyTensor: From<Tensor<T>>,
    {
        let mut out = self.params.records(prefix);
        let running = self.running.borrow();
        for (i, (m, v)) in running.iter().enumerate() {
            let n = m.len();
            out.push((format!("{prefix}bn{i}.running_mean"), AnyTensor::F64(Tensor::from_vec(m.clone(), &[n]).expect("1-d"))));
            out.push((format!("{prefix}bn{i}.running_var"), AnyTensor::F64(Tensor::from_vec(v.clone(), &[n]).expect("1-d"))));
        }
        out
    }

    pub fn load(&mut self, records: &HashMap<String, AnyTensor>, prefix: &str) -> Result<()> {
        self.params.load(records, prefix)?;
        let mut running = self.running.borrow_mut();
        for (i, (m, v)) in running.iter_mut().enumerate() {
            for (key, dst) in [("running_mean", m), ("running_var", v)] {
                let name = format!("{prefix}bn{i}.{key}");
                let t = records
                    .get(&name)
                    .ok_or_else(|| TensorError::Format(format!("missing tensor '{name}'")))?;
                *dst = t.to::<f64>().to_vec();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    fn small(norm: Norm) -> EncoderConfig {
        EncoderConfig { stage_channels: vec![8, 16, 32], norm, ..Default::default() }
    }

    #[test]
    fn channels_per_map() {
        let enc = build_encoder::<f64>(&small(Norm::None), 1).unwrap();
        let m = enc.encode(&random(&[3, 32, 32], 2)).unwrap();
        let ch: Vec<usize> = m.maps.iter().map(|t| t.shape()[1]).collect();
        assert_eq!(ch, vec![8, 16, 32]);
    }

    #[test]
    fn unpadded_extents_shrink_by_two() {
        let enc = build_encoder::<f64>(&small(Norm::None), 1).unwrap();
        let m = enc.encode(&random(&[3, 32, 32], 2)).unwrap();
        let ext: Vec<usize> = m.maps.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(ext, vec![30, 28, 26]);
    }

    #[test]
    fn padded_extents_are_preserved() {
        let cfg = EncoderConfig { use_padding: true, ..small(Norm::None) };
        let enc = build_encoder::<f64>(&cfg, 1).unwrap();
        let m = enc.encode(&random(&[3, 12, 12], 2)).unwrap();
        assert!(m.maps.iter().all(|t| t.shape()[2..] == [12, 12]));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_encoder::<f64>(&small(Norm::Layer), 9).unwrap();
        let b = build_encoder::<f64>(&small(Norm::Layer), 9).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        let c = build_encoder::<f64>(&small(Norm::Layer), 10).unwrap();
        assert_ne!(a.params.iter().next().unwrap().1.to_vec(), c.params.iter().next().unwrap().1.to_vec());
    }

    #[test]
    fn parameter_names_follow_stage_block_layout() {
        let enc = build_encoder::<f64>(&small(Norm::Layer), 0).unwrap();
        let names: Vec<&str> = enc.params.iter().map(|(n, _)| n).collect();
        assert_eq!(&names[..4], &["stage0.block0.weight", "stage0.block0.bias", "stage0.block0.gamma", "stage0.block0.beta"]);
        // 3*8*9+8 + 8*16*9+16 + 16*32*9+32 convs, plus 2*(8+16+32) norm
        assert_eq!(enc.parameter_count(), 224 + 1168 + 4640 + 112);
    }

    #[test]
    fn zero_input_gives_zero_maps() {
        let enc = build_encoder::<f64>(&small(Norm::None), 3).unwrap();
        let m = enc.encode(&Tensor::zeros(&[3, 16, 16])).unwrap();
        assert!(m.deepest().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn underflow_names_the_stage() {
        let enc = build_encoder::<f64>(&small(Norm::None), 3).unwrap();
        let err = enc.encode(&Tensor::zeros(&[3, 6, 6])).unwrap_err();
        assert!(matches!(err, EncoderError::Underflow { stage: 2, .. }), "{err}");
        assert!(err.to_string().contains("stage 2"));
    }

    #[test]
    fn invalid_config_names_the_field() {
        let cfg = EncoderConfig { blocks_per_stage: vec![1], ..Default::default() };
        let err = build_encoder::<f64>(&cfg, 0).unwrap_err();
        assert!(err.to_string().contains("blocks_per_stage"), "{err}");
        let cfg = EncoderConfig { stage_channels: vec![], ..Default::default() };
        assert!(build_encoder::<f64>(&cfg, 0).unwrap_err().to_string().contains("stage_channels"));
    }

    #[test]
    fn patch_grid_shape() {
        let cfg = EncoderConfig { stage_channels: vec![8, 16, 32], ..Default::default() };
        let enc = build_encoder::<f64>(&cfg, 4).unwrap();
        let m = enc.encode_patches(&random(&[49, 3, 8, 8], 5), 7, 7).unwrap();
        assert_eq!(m.deepest().shape(), &[1, 32, 7, 7]);
    }

    #[test]
    fn perturbing_one_patch_changes_one_cell() {
        for norm in [Norm::None, Norm::Layer] {
            let cfg = EncoderConfig { stage_channels: vec![4, 6], blocks_per_stage: vec![1, 1], stage_strides: vec![1, 1], norm, ..Default::default() };
            let enc = build_encoder::<f64>(&cfg, 4).unwrap();
            let x = random(&[9, 3, 6, 6], 5);
            let mut y = x.to_vec();
            let target = 4;
            for v in &mut y[target * 108..(target + 1) * 108] {
                *v += 0.5;
            }
            let y = Tensor::from_vec(y, &[9, 3, 6, 6]).unwrap();
            let a = enc.encode_patches(&x, 3, 3).unwrap();
            let b = enc.encode_patches(&y, 3, 3).unwrap();
            let (ha, hb) = (a.deepest().data(), b.deepest().data());
            for ch in 0..6 {
                for cell in 0..9 {
                    let i = ch * 9 + cell;
                    if cell == target {
                        continue;
                    }
                    assert_eq!(ha[i], hb[i], "norm {norm} channel {ch} cell {cell}");
                }
            }
            assert!((0..6).any(|ch| ha[ch * 9 + target] != hb[ch * 9 + target]));
        }
    }

    #[test]
    fn batch_encoding_matches_single_images() {
        let enc = build_encoder::<f64>(&small(Norm::Layer), 7).unwrap();
        let x = random(&[2, 3, 10, 10], 8);
        let both = enc.encode_batch(&x).unwrap();
        let second = enc.encode(&x.narrow(0, 1, 1).unwrap().reshape(&[3, 10, 10]).unwrap()).unwrap();
        let d = both.deepest().narrow(0, 1, 1).unwrap();
        for (p, q) in d.data().iter().zip(second.deepest().data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_switches_to_running_stats() {
        let enc = build_encoder::<f64>(&small(Norm::Batch), 7).unwrap();
        let x = random(&[4, 3, 10, 10], 8);
        let train = enc.encode_batch(&x).unwrap();
        enc.set_training(false);
        let eval = enc.encode_batch(&x).unwrap();
        assert_ne!(train.deepest().to_vec(), eval.deepest().to_vec());
        let again = enc.encode_batch(&x).unwrap();
        assert_eq!(eval.deepest().to_vec(), again.deepest().to_vec());
    }

    #[test]
    fn embedding_projects_every_map_to_one_width() {
        let cfg = EncoderConfig { embed_dim: Some(12), ..small(Norm::None) };
        let enc = build_encoder::<f64>(&cfg, 1).unwrap();
        let m = enc.encode(&random(&[3, 12, 12], 2)).unwrap();
        assert!(m.maps.iter().all(|t| t.shape()[1] == 12));
        assert_eq!(cfg.map_channels(), vec![12, 12, 12]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = build_encoder::<f32>(&small(Norm::Batch), 1).unwrap();
        enc.encode_batch(&random(&[2, 3, 10, 10], 2).cast()).unwrap();
        let records: HashMap<_, _> = enc.records("enc.").into_iter().collect();
        let mut other = build_encoder::<f32>(&small(Norm::Batch), 2).unwrap();
        other.load(&records, "enc.").unwrap();
        enc.set_training(false);
        other.set_training(false);
        let x = random(&[1, 3, 10, 10], 3).cast();
        assert_eq!(enc.encode_batch(&x).unwrap().deepest().to_vec(), other.encode_batch(&x).unwrap().deepest().to_vec());
    }
}
